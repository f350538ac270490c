#include <catch2/catch_amalgamated.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>

#include "nute/snapshot.hpp"
#include "support/oracles.hpp"

using namespace nute;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.L = 2;
    c.d = 16;
    c.n_head = 2;
    c.d_h = 8;
    c.d_int = 12;
    c.V = 32;
    c.context_len = 24;
    return c;
}

LightweightModule random_module(const ModelConfig& c, Rng& rng) {
    LightweightModule m = LightweightModule::init(c, rng, 2);
    for (auto& t : m.masks.params())
        for (int64_t i = 0; i < t.numel(); ++i) t.val()[i] = real(normal(rng, 0, 3));
    for (auto& layer : m.lora.layers)
        for (auto& p : layer) {
            Rng r2(rng());
            p.A = Tensor::randn(p.A.shape(), r2, real(0.5));
            p.B = Tensor::randn(p.B.shape(), r2, real(0.5));
        }
    m.lora.scale = real(0.75);
    return m;
}

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("nute_test_" + std::to_string(Catch::rngSeed()) + "_" +
                std::to_string(counter()++));
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
    static int& counter() {
        static int n = 0;
        return n;
    }
};

bool modules_bit_equal(const LightweightModule& a, const LightweightModule& b) {
    auto pa = a.params(), pb = b.params();
    if (pa.size() != pb.size()) return false;
    for (size_t i = 0; i < pa.size(); ++i)
        if (!oracle::bit_equal(pa[i].val(), pb[i].val())) return false;
    return a.masks.beta == b.masks.beta && a.masks.l == b.masks.l && a.masks.r == b.masks.r &&
           a.lora.rank == b.lora.rank && a.lora.scale == b.lora.scale;
}

}  // namespace

TEST_CASE("module snapshots roundtrip bit-exactly") {
    ModelConfig c = tiny_config();
    Rng rng(61);
    LightweightModule m = random_module(c, rng);
    m.masks.beta = real(0.55);
    m.masks.l = real(-0.15);
    m.masks.r = real(1.2);

    SECTION("through the byte serializer") {
        auto bytes = serialize_module(m, c.fingerprint(), 700, 1234);
        int64_t key = 0, step = 0;
        LightweightModule back = deserialize_module(bytes, c, &key, &step);
        CHECK(key == 700);
        CHECK(step == 1234);
        CHECK(modules_bit_equal(m, back));
    }

    SECTION("through the store") {
        TempDir dir;
        SnapshotStore store(dir.path / "run", c.fingerprint(), true);
        store.save(700, m, 1234);
        LightweightModule back = store.load(700, c);
        CHECK(modules_bit_equal(m, back));
        CHECK(store.keys() == std::vector<int64_t>{700});
    }
}

TEST_CASE("duplicate and non-increasing snapshot keys are rejected") {
    ModelConfig c = tiny_config();
    Rng rng(62);
    TempDir dir;
    SnapshotStore store(dir.path / "run", c.fingerprint(), true);
    store.save(100, random_module(c, rng), 10);
    CHECK_THROWS_AS(store.save(100, random_module(c, rng), 20), io_error);
    CHECK_THROWS_AS(store.save(50, random_module(c, rng), 20), io_error);
    store.save(200, random_module(c, rng), 30);
    CHECK(store.keys() == std::vector<int64_t>{100, 200});
}

TEST_CASE("missing keys and corruption raise different errors") {
    ModelConfig c = tiny_config();
    Rng rng(63);
    TempDir dir;
    SnapshotStore store(dir.path / "run", c.fingerprint(), true);
    LightweightModule m = random_module(c, rng);
    store.save(300, m, 7);

    CHECK_THROWS_AS(store.load(400, c), missing_key_error);

    SECTION("one flipped byte anywhere in the blob is caught") {
        auto bytes = serialize_module(m, c.fingerprint(), 300, 7);
        for (size_t pos : {size_t(0), size_t(3), size_t(9), size_t(40), bytes.size() / 2,
                           bytes.size() - 9, bytes.size() - 1}) {
            auto bad = bytes;
            bad[pos] ^= 0x40;
            CHECK_THROWS_AS(deserialize_module(bad, c), corrupt_data_error);
        }
    }

    SECTION("a corrupted file on disk is caught by the store") {
        const fs::path blob = dir.path / "run" / "snap_000300.bin";
        REQUIRE(fs::exists(blob));
        auto bytes = detail::read_file(blob);
        bytes[bytes.size() / 2] ^= 0x01;
        detail::write_file_atomic(blob, bytes);
        CHECK_THROWS_AS(store.load(300, c), corrupt_data_error);
    }

    SECTION("truncation is caught") {
        auto bytes = serialize_module(m, c.fingerprint(), 300, 7);
        bytes.resize(bytes.size() / 2);
        CHECK_THROWS_AS(deserialize_module(bytes, c), corrupt_data_error);
    }

    SECTION("a blob for another architecture is refused") {
        ModelConfig other = tiny_config();
        other.d_int = 16;
        auto bytes = serialize_module(random_module(c, rng), c.fingerprint(), 300, 7);
        CHECK_THROWS_AS(deserialize_module(bytes, other), corrupt_data_error);
    }
}

TEST_CASE("a store reopens with its manifest intact") {
    ModelConfig c = tiny_config();
    Rng rng(64);
    TempDir dir;
    const fs::path run = dir.path / "run";
    LightweightModule m1 = random_module(c, rng);
    {
        SnapshotStore store(run, c.fingerprint(), true);
        store.save(100, m1, 1);
        store.save(200, random_module(c, rng), 2);
        store.save(300, random_module(c, rng), 3);
    }
    SnapshotStore reopened(run, c.fingerprint(), false);
    CHECK(reopened.keys() == std::vector<int64_t>{100, 200, 300});
    CHECK(modules_bit_equal(reopened.load(100, c), m1));

    // Opening with the wrong architecture fingerprint is refused.
    ModelConfig other = tiny_config();
    other.L = 3;
    CHECK_THROWS_AS(SnapshotStore(run, other.fingerprint(), false), corrupt_data_error);

    // Opening a store that does not exist is a missing-artifact error.
    CHECK_THROWS_AS(SnapshotStore(dir.path / "absent", c.fingerprint(), false),
                    missing_key_error);

    // A mangled manifest is corruption.
    {
        std::ofstream f(run / "manifest.json", std::ios::trunc);
        f << "{ not json";
    }
    CHECK_THROWS_AS(SnapshotStore(run, c.fingerprint(), false), corrupt_data_error);
}

TEST_CASE("base weights roundtrip bit-exactly, sliced models included") {
    ModelConfig c = tiny_config();
    Rng rng(65);
    BaseWeights base = BaseWeights::init(c, rng);
    TempDir dir;

    write_base_weights(dir.path / "base.bin", base);
    BaseWeights back = read_base_weights(dir.path / "base.bin");
    CHECK(back.checksum() == base.checksum());
    CHECK(back.cfg.fingerprint() == base.cfg.fingerprint());

    // A sliced model carries per-layer structure and a norm divisor.
    MaskValues z;
    z.head = Tensor::full({c.L, c.n_head}, real(1));
    z.intermediate = Tensor::full({c.L, c.d_int}, real(1));
    z.hidden = Tensor::full({c.d}, real(1));
    z.head.val()[0] = 0;
    for (int64_t i = 0; i < 5; ++i) z.intermediate.val()[i] = 0;
    z.hidden.val()[7] = 0;
    LightweightModule m = LightweightModule::init(c, rng, 1);
    auto set_binary = [](Tensor& logits, const Tensor& zv) {
        logits.set_requires_grad(false);
        for (int64_t i = 0; i < zv.numel(); ++i)
            logits.val()[i] = zv.val()[i] == real(1) ? real(40) : real(-40);
    };
    set_binary(m.masks.logalpha_head, z.head);
    set_binary(m.masks.logalpha_int, z.intermediate);
    set_binary(m.masks.logalpha_hid, z.hidden);

    BaseWeights sliced = slice_pruned(base, m);
    write_base_weights(dir.path / "sliced.bin", sliced);
    BaseWeights sliced_back = read_base_weights(dir.path / "sliced.bin");
    CHECK(sliced_back.checksum() == sliced.checksum());
    CHECK(sliced_back.cfg.sliced);
    CHECK(sliced_back.cfg.d == c.d - 1);
    CHECK(sliced_back.cfg.heads_per_layer == sliced.cfg.heads_per_layer);
    CHECK(sliced_back.cfg.dint_per_layer == sliced.cfg.dint_per_layer);
    CHECK(sliced_back.cfg.norm_divisor == real(c.d));

    CHECK_THROWS_AS(read_base_weights(dir.path / "nope.bin"), missing_key_error);
}

TEST_CASE("forty snapshots of the default model stay lightweight") {
    ModelConfig c;  // default toy configuration
    Rng rng(66);
    BaseWeights base = BaseWeights::init(c, rng);
    const uint64_t base_bytes = uint64_t(base.param_count()) * sizeof(real);

    TempDir dir;
    SnapshotStore store(dir.path / "run", c.fingerprint(), true);
    LightweightModule m = LightweightModule::init(c, rng, 1);
    for (int k = 1; k <= 40; ++k) store.save(k * 100, m, k);

    const uint64_t total = store.total_blob_bytes();
    CHECK(total < 40u * base_bytes / 50u);  // 2% of the base, forty times over
    // ... and each individual snapshot is under 2% of the base.
    CHECK(total / 40 < base_bytes / 50);
}

TEST_CASE("teacher switching keeps at most two modules and one base resident") {
    ModelConfig c = tiny_config();
    Rng rng(67);
    TempDir dir;

    const int base0 = LiveCounter<BaseWeights>::live();
    const int mod0 = LiveCounter<LightweightModule>::live();

    BaseWeights base = BaseWeights::init(c, rng);
    SnapshotStore store(dir.path / "run", c.fingerprint(), true);
    LightweightModule student = LightweightModule::init(c, rng, 1);
    for (int k = 1; k <= 5; ++k) store.save(k * 100, random_module(c, rng), k);

    LiveCounter<BaseWeights>::reset_peak();
    LiveCounter<LightweightModule>::reset_peak();

    std::optional<LightweightModule> teacher;
    IdArray ids;
    ids.shape = {1, 4};
    ids.v = {1, 2, 3, 4};
    for (int k = 1; k <= 5; ++k) {
        teacher.reset();  // release the previous teacher before loading the next
        teacher = store.load(k * 100, c);
        NoGrad ng;
        ForwardOutput tout = forward(base, *teacher, ids, MaskMode::kDeterministic);
        ForwardOutput sout = forward(base, student, ids, MaskMode::kDeterministic);
        (void)tout;
        (void)sout;
        CHECK(LiveCounter<BaseWeights>::live() == base0 + 1);
        CHECK(LiveCounter<LightweightModule>::live() == mod0 + 2);
    }
    CHECK(LiveCounter<BaseWeights>::peak() == base0 + 1);
    CHECK(LiveCounter<LightweightModule>::peak() <= mod0 + 2);
}
