#pragma once

// On-disk persistence for teacher snapshots and base weights.
//
// A store is a directory holding `manifest.json` plus one binary blob per
// snapshot. Every blob is laid out as:
//
//   magic "NUTE" | u32 format version | string checksum algo | string real
//   width | string kind ("module" or "base") | u64 config fingerprint |
//   kind-specific fields and parameter arrays (little-endian, fixed order) |
//   u64 checksum of all preceding bytes
//
// Module blobs carry: key (basis points), creation step, gate hyperparameters
// (beta, l, r), the three gate logit arrays (head, intermediate, hidden),
// adapter rank and scale, then per layer, per target (Q, K, V, O, gate, up,
// down) the A then B matrices. Base blobs carry the full ModelConfig followed
// by every weight tensor in declaration order.
//
// Writes are atomic (temp file + rename). Loads verify the checksum and
// distinguish a missing key from a corrupted container.

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "nute/common.hpp"
#include "nute/model.hpp"

namespace nute {

namespace detail {

constexpr uint32_t kBlobVersion = 1;
constexpr char kMagic[5] = "NUTE";

struct BlobWriter {
    std::vector<unsigned char> buf;

    void u8(uint8_t v) { buf.push_back(v); }
    void u32(uint32_t v) {
        for (int i = 0; i < 4; ++i) buf.push_back(uint8_t(v >> (8 * i)));
    }
    void u64(uint64_t v) {
        for (int i = 0; i < 8; ++i) buf.push_back(uint8_t(v >> (8 * i)));
    }
    void i64(int64_t v) { u64(uint64_t(v)); }
    void str(const std::string& s) {
        u32(uint32_t(s.size()));
        buf.insert(buf.end(), s.begin(), s.end());
    }
    void scalar(real v) {
        if (sizeof(real) == 8) {
            uint64_t bits;
            std::memcpy(&bits, &v, 8);
            u64(bits);
        } else {
            uint32_t bits;
            std::memcpy(&bits, &v, 4);
            u32(bits);
        }
    }
    void array(const std::vector<real>& v) {
        u64(v.size());
        for (real x : v) scalar(x);
    }
    void tensor(const Tensor& t) { array(t.val()); }
    void finish() { u64(fnv1a64(buf.data(), buf.size())); }
};

// Read-only view over a blob's payload (the bytes before the trailing
// checksum); the caller keeps the underlying buffer alive.
struct BlobReader {
    const unsigned char* data = nullptr;
    size_t size = 0;
    size_t pos = 0;

    void need(size_t n) const {
        if (pos + n > size) throw corrupt_data_error("snapshot blob truncated");
    }
    uint8_t u8() {
        need(1);
        return data[pos++];
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= uint32_t(data[pos++]) << (8 * i);
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= uint64_t(data[pos++]) << (8 * i);
        return v;
    }
    int64_t i64() { return int64_t(u64()); }
    std::string str() {
        const uint32_t n = u32();
        need(n);
        std::string s(data + pos, data + pos + n);
        pos += n;
        return s;
    }
    real scalar() {
        real v;
        if (sizeof(real) == 8) {
            uint64_t bits = u64();
            std::memcpy(&v, &bits, 8);
        } else {
            uint32_t bits = u32();
            std::memcpy(&v, &bits, 4);
        }
        return v;
    }
    void array_into(std::vector<real>& out) {
        const uint64_t n = u64();
        if (n != out.size())
            throw corrupt_data_error("snapshot blob array length " + std::to_string(n) +
                                     " does not match expected " + std::to_string(out.size()));
        for (auto& x : out) x = scalar();
    }
};

inline void write_file_atomic(const std::filesystem::path& path,
                              const std::vector<unsigned char>& bytes) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw io_error("cannot open " + tmp.string() + " for writing");
        f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
        if (!f) throw io_error("short write to " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw io_error("cannot rename " + tmp.string() + ": " + ec.message());
}

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw io_error("cannot open " + path.string());
    const std::streamsize n = f.tellg();
    f.seekg(0);
    std::vector<unsigned char> bytes(static_cast<size_t>(n));
    f.read(reinterpret_cast<char*>(bytes.data()), n);
    if (!f) throw io_error("short read from " + path.string());
    return bytes;
}

// Verifies the trailing checksum, magic, version, and identity strings, then
// returns a reader positioned at the config fingerprint's successor with the
// fingerprint written to *fingerprint_out. The reader borrows `bytes`.
inline BlobReader open_blob(const std::vector<unsigned char>& bytes,
                            const std::string& expect_kind, uint64_t* fingerprint_out) {
    if (bytes.size() < 12) throw corrupt_data_error("snapshot blob too small");
    const uint64_t stored = [&] {
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= uint64_t(bytes[bytes.size() - 8 + i]) << (8 * i);
        return v;
    }();
    if (fnv1a64(bytes.data(), bytes.size() - 8) != stored)
        throw corrupt_data_error("snapshot blob checksum mismatch");

    BlobReader r;
    r.data = bytes.data();
    r.size = bytes.size() - 8;
    r.need(4);
    if (std::memcmp(r.data, kMagic, 4) != 0)
        throw corrupt_data_error("snapshot blob has wrong magic bytes");
    r.pos = 4;
    if (r.u32() != kBlobVersion) throw corrupt_data_error("snapshot blob version unsupported");
    if (r.str() != kChecksumName) throw corrupt_data_error("snapshot blob checksum algo unknown");
    if (r.str() != kRealName)
        throw corrupt_data_error("snapshot blob real width does not match this build");
    if (r.str() != expect_kind) throw corrupt_data_error("snapshot blob kind mismatch");
    *fingerprint_out = r.u64();
    return r;
}

inline void blob_header(BlobWriter& w, const std::string& kind, uint64_t fingerprint) {
    w.buf.insert(w.buf.end(), kMagic, kMagic + 4);
    w.u32(kBlobVersion);
    w.str(kChecksumName);
    w.str(kRealName);
    w.str(kind);
    w.u64(fingerprint);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Module blobs.

inline std::vector<unsigned char> serialize_module(const LightweightModule& m,
                                                   uint64_t fingerprint, int64_t key_bp,
                                                   int64_t step) {
    detail::BlobWriter w;
    detail::blob_header(w, "module", fingerprint);
    w.i64(key_bp);
    w.i64(step);
    w.scalar(m.masks.beta);
    w.scalar(m.masks.l);
    w.scalar(m.masks.r);
    w.tensor(m.masks.logalpha_head);
    w.tensor(m.masks.logalpha_int);
    w.tensor(m.masks.logalpha_hid);
    w.i64(m.lora.rank);
    w.scalar(m.lora.scale);
    for (const auto& layer : m.lora.layers)
        for (const auto& p : layer) {
            w.tensor(p.A);
            w.tensor(p.B);
        }
    w.finish();
    return w.buf;
}

inline LightweightModule deserialize_module(const std::vector<unsigned char>& bytes,
                                            const ModelConfig& cfg, int64_t* key_bp = nullptr,
                                            int64_t* step = nullptr) {
    uint64_t fingerprint = 0;
    detail::BlobReader r = detail::open_blob(bytes, "module", &fingerprint);
    if (fingerprint != cfg.fingerprint())
        throw corrupt_data_error("snapshot blob was written for a different model config");
    const int64_t kb = r.i64();
    const int64_t st = r.i64();
    if (key_bp != nullptr) *key_bp = kb;
    if (step != nullptr) *step = st;

    LightweightModule m;
    m.masks.beta = r.scalar();
    m.masks.l = r.scalar();
    m.masks.r = r.scalar();
    m.masks.logalpha_head = Tensor(Shape{cfg.L, cfg.n_head});
    m.masks.logalpha_int = Tensor(Shape{cfg.L, cfg.d_int});
    m.masks.logalpha_hid = Tensor(Shape{cfg.d});
    r.array_into(m.masks.logalpha_head.val());
    r.array_into(m.masks.logalpha_int.val());
    r.array_into(m.masks.logalpha_hid.val());
    m.masks.validate();

    const int64_t rank = r.i64();
    if (rank <= 0) throw corrupt_data_error("snapshot blob has nonpositive adapter rank");
    const real scale = r.scalar();
    m.lora.rank = rank;
    m.lora.scale = scale;
    m.lora.layers.resize(size_t(cfg.L));
    for (auto& layer : m.lora.layers)
        for (int t = 0; t < LoraSet::kTargetCount; ++t) {
            auto [n, mm] = m.lora.target_dims(cfg, LoraSet::Target(t));
            layer[size_t(t)].A = Tensor(Shape{n, rank});
            layer[size_t(t)].B = Tensor(Shape{rank, mm});
            r.array_into(layer[size_t(t)].A.val());
            r.array_into(layer[size_t(t)].B.val());
        }
    if (r.pos != r.size) throw corrupt_data_error("snapshot blob has trailing bytes");
    for (auto& t : m.params()) t.set_requires_grad(true);
    return m;
}

// ---------------------------------------------------------------------------
// Base-weight blobs (same container idiom, their own files).

inline void write_base_weights(const std::filesystem::path& path, const BaseWeights& base) {
    detail::BlobWriter w;
    detail::blob_header(w, "base", base.cfg.fingerprint());
    const ModelConfig& c = base.cfg;
    for (int64_t v : {c.L, c.d, c.n_head, c.d_h, c.d_int, c.V, c.context_len}) w.i64(v);
    w.u8(c.sliced ? 1 : 0);
    w.u64(c.heads_per_layer.size());
    for (int64_t v : c.heads_per_layer) w.i64(v);
    w.u64(c.dint_per_layer.size());
    for (int64_t v : c.dint_per_layer) w.i64(v);
    w.scalar(c.norm_divisor);
    for (const auto& t : base.params()) w.tensor(t);
    w.finish();
    detail::write_file_atomic(path, w.buf);
}

inline BaseWeights read_base_weights(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path))
        throw missing_key_error("base weights file not found: " + path.string());
    const auto bytes = detail::read_file(path);
    uint64_t fingerprint = 0;
    detail::BlobReader r = detail::open_blob(bytes, "base", &fingerprint);

    ModelConfig c;
    c.L = r.i64();
    c.d = r.i64();
    c.n_head = r.i64();
    c.d_h = r.i64();
    c.d_int = r.i64();
    c.V = r.i64();
    c.context_len = r.i64();
    c.sliced = r.u8() != 0;
    c.heads_per_layer.resize(size_t(r.u64()));
    for (auto& v : c.heads_per_layer) v = r.i64();
    c.dint_per_layer.resize(size_t(r.u64()));
    for (auto& v : c.dint_per_layer) v = r.i64();
    c.norm_divisor = r.scalar();
    c.validate();
    if (c.fingerprint() != fingerprint)
        throw corrupt_data_error("base blob fingerprint does not match its own config");

    BaseWeights base;
    base.cfg = c;
    base.tok_emb = Tensor(Shape{c.V, c.d});
    base.pos_emb = Tensor(Shape{c.context_len, c.d});
    base.layers.resize(size_t(c.L));
    for (int64_t l = 0; l < c.L; ++l) {
        auto& ly = base.layers[size_t(l)];
        const int64_t hw = c.heads_in(l) * c.d_h;
        const int64_t iw = c.dint_in(l);
        ly.wq = Tensor(Shape{c.d, hw});
        ly.wk = Tensor(Shape{c.d, hw});
        ly.wv = Tensor(Shape{c.d, hw});
        ly.wo = Tensor(Shape{hw, c.d});
        ly.wgate = Tensor(Shape{c.d, iw});
        ly.wup = Tensor(Shape{c.d, iw});
        ly.wdown = Tensor(Shape{iw, c.d});
        ly.gain_attn = Tensor(Shape{c.d});
        ly.gain_ffn = Tensor(Shape{c.d});
    }
    base.gain_final = Tensor(Shape{c.d});
    base.head = Tensor(Shape{c.d, c.V});
    for (auto& t : base.params()) r.array_into(t.val());
    if (r.pos != r.size) throw corrupt_data_error("base blob has trailing bytes");
    return base;
}

// ---------------------------------------------------------------------------
// Standalone module files (the prune and finetune outputs) reuse the module
// blob layout unchanged.

inline void write_module_file(const std::filesystem::path& path, const LightweightModule& m,
                              uint64_t fingerprint, int64_t key_bp, int64_t step) {
    detail::write_file_atomic(path, serialize_module(m, fingerprint, key_bp, step));
}

inline LightweightModule read_module_file(const std::filesystem::path& path,
                                          const ModelConfig& cfg, int64_t* key_bp = nullptr,
                                          int64_t* step = nullptr) {
    if (!std::filesystem::exists(path))
        throw missing_key_error("module file not found: " + path.string());
    return deserialize_module(detail::read_file(path), cfg, key_bp, step);
}

// ---------------------------------------------------------------------------
// The keyed store.

class SnapshotStore {
   public:
    // Opens (or, with create=true, creates) the store directory. A store is
    // bound to one model configuration via its fingerprint.
    SnapshotStore(std::filesystem::path dir, uint64_t fingerprint, bool create)
        : dir_(std::move(dir)), fingerprint_(fingerprint) {
        const auto manifest = dir_ / "manifest.json";
        if (create) {
            std::filesystem::create_directories(dir_);
            if (std::filesystem::exists(manifest))
                load_manifest();
            else
                write_manifest();
        } else {
            if (!std::filesystem::exists(manifest))
                throw missing_key_error("snapshot store manifest not found: " + manifest.string());
            load_manifest();
        }
    }

    const std::filesystem::path& dir() const { return dir_; }

    bool has(int64_t key_bp) const {
        for (const auto& e : entries_)
            if (e.key_bp == key_bp) return true;
        return false;
    }

    std::vector<int64_t> keys() const {
        std::vector<int64_t> out;
        out.reserve(entries_.size());
        for (const auto& e : entries_) out.push_back(e.key_bp);
        return out;
    }

    void save(int64_t key_bp, const LightweightModule& m, int64_t step) {
        if (has(key_bp))
            throw io_error("snapshot key " + std::to_string(key_bp) +
                           " already present in store");
        if (!entries_.empty() && key_bp <= entries_.back().key_bp)
            throw io_error("snapshot keys must increase; got " + std::to_string(key_bp) +
                           " after " + std::to_string(entries_.back().key_bp));
        const auto bytes = serialize_module(m, fingerprint_, key_bp, step);
        Entry e;
        e.key_bp = key_bp;
        e.step = step;
        e.file = file_name(key_bp);
        e.checksum = fnv1a64(bytes.data(), bytes.size());
        detail::write_file_atomic(dir_ / e.file, bytes);
        entries_.push_back(e);
        write_manifest();
    }

    LightweightModule load(int64_t key_bp, const ModelConfig& cfg) const {
        const Entry* entry = nullptr;
        for (const auto& e : entries_)
            if (e.key_bp == key_bp) entry = &e;
        if (entry == nullptr)
            throw missing_key_error("snapshot key " + std::to_string(key_bp) +
                                    " not in store manifest");
        if (cfg.fingerprint() != fingerprint_)
            throw corrupt_data_error("snapshot store belongs to a different model config");
        const auto bytes = detail::read_file(dir_ / entry->file);
        if (fnv1a64(bytes.data(), bytes.size()) != entry->checksum)
            throw corrupt_data_error("snapshot file " + entry->file +
                                     " does not match its manifest checksum");
        int64_t kb = 0;
        LightweightModule m = deserialize_module(bytes, cfg, &kb);
        if (kb != key_bp)
            throw corrupt_data_error("snapshot file " + entry->file + " carries key " +
                                     std::to_string(kb) + ", expected " +
                                     std::to_string(key_bp));
        return m;
    }

    // Creation step recorded for a stored key.
    int64_t step_of(int64_t key_bp) const {
        for (const auto& e : entries_)
            if (e.key_bp == key_bp) return e.step;
        throw missing_key_error("snapshot key " + std::to_string(key_bp) +
                                " not in store manifest");
    }

    // Total bytes of all snapshot blobs, for the size accounting report.
    uint64_t total_blob_bytes() const {
        uint64_t n = 0;
        for (const auto& e : entries_) n += std::filesystem::file_size(dir_ / e.file);
        return n;
    }

   private:
    struct Entry {
        int64_t key_bp = 0;
        int64_t step = 0;
        std::string file;
        uint64_t checksum = 0;
    };

    static std::string file_name(int64_t key_bp) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "snap_%06lld.bin", static_cast<long long>(key_bp));
        return buf;
    }

    void write_manifest() const {
        nlohmann::json j;
        j["format_version"] = detail::kBlobVersion;
        j["checksum_algo"] = kChecksumName;
        j["real"] = kRealName;
        char fp[24];
        std::snprintf(fp, sizeof(fp), "%016llx", static_cast<unsigned long long>(fingerprint_));
        j["config_fingerprint"] = fp;
        j["snapshots"] = nlohmann::json::array();
        for (const auto& e : entries_) {
            char cs[24];
            std::snprintf(cs, sizeof(cs), "%016llx", static_cast<unsigned long long>(e.checksum));
            j["snapshots"].push_back({{"key_bp", e.key_bp},
                                      {"step", e.step},
                                      {"file", e.file},
                                      {"checksum", cs}});
        }
        const std::string text = j.dump(2) + "\n";
        detail::write_file_atomic(dir_ / "manifest.json",
                                  std::vector<unsigned char>(text.begin(), text.end()));
    }

    void load_manifest() {
        const auto bytes = detail::read_file(dir_ / "manifest.json");
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(bytes.begin(), bytes.end());
        } catch (const nlohmann::json::exception& e) {
            throw corrupt_data_error(std::string("snapshot manifest is not valid JSON: ") +
                                     e.what());
        }
        try {
            if (j.at("format_version").get<uint32_t>() != detail::kBlobVersion)
                throw corrupt_data_error("snapshot manifest version unsupported");
            if (j.at("checksum_algo").get<std::string>() != kChecksumName)
                throw corrupt_data_error("snapshot manifest checksum algo unknown");
            if (j.at("real").get<std::string>() != kRealName)
                throw corrupt_data_error("snapshot manifest real width mismatch");
            const std::string fp = j.at("config_fingerprint").get<std::string>();
            if (std::stoull(fp, nullptr, 16) != fingerprint_)
                throw corrupt_data_error(
                    "snapshot store belongs to a different model config (fingerprint " + fp +
                    ")");
            entries_.clear();
            int64_t prev = -1;
            for (const auto& s : j.at("snapshots")) {
                Entry e;
                e.key_bp = s.at("key_bp").get<int64_t>();
                e.step = s.at("step").get<int64_t>();
                e.file = s.at("file").get<std::string>();
                e.checksum = std::stoull(s.at("checksum").get<std::string>(), nullptr, 16);
                if (e.key_bp <= prev)
                    throw corrupt_data_error("snapshot manifest keys are not increasing");
                prev = e.key_bp;
                entries_.push_back(e);
            }
        } catch (const nlohmann::json::exception& e) {
            throw corrupt_data_error(std::string("snapshot manifest is missing fields: ") +
                                     e.what());
        }
    }

    std::filesystem::path dir_;
    uint64_t fingerprint_ = 0;
    std::vector<Entry> entries_;
};

}  // namespace nute
