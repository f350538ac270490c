#include <catch2/catch_amalgamated.hpp>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "nute/data.hpp"
#include "nute/optim.hpp"
#include "support/oracles.hpp"

using namespace nute;
namespace fs = std::filesystem;

namespace {

// Scratch directory unique to this test process.
struct TempDir {
    fs::path path;
    TempDir() {
        static int counter = 0;
        path = fs::temp_directory_path() /
               ("nute_data_" + std::to_string(Catch::rngSeed()) + "_" + std::to_string(counter++));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

fs::path write_bytes(const TempDir& dir, const std::string& name,
                     const std::vector<unsigned char>& bytes) {
    fs::path p = dir.path / name;
    std::ofstream f(p, std::ios::binary);
    f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    return p;
}

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

ModelConfig byte_config() {
    ModelConfig c = tiny_config();
    c.V = 256;
    c.context_len = 32;
    return c;
}

void zero_params(BaseWeights& base) {
    for (Tensor p : base.params()) std::fill(p.val().begin(), p.val().end(), real(0));
}

// A frozen module whose gates are exactly the given binary values.
LightweightModule binary_module(const ModelConfig& c, const MaskValues& z, Rng& rng) {
    LightweightModule m = LightweightModule::init(c, rng, 1);
    auto set_binary = [](Tensor& logits, const Tensor& zv) {
        logits.set_requires_grad(false);
        for (int64_t i = 0; i < zv.numel(); ++i)
            logits.val()[i] = zv.val()[i] == real(1) ? real(40) : real(-40);
    };
    set_binary(m.masks.logalpha_head, z.head);
    set_binary(m.masks.logalpha_int, z.intermediate);
    set_binary(m.masks.logalpha_hid, z.hidden);
    for (auto& layer : m.lora.layers)
        for (auto& p : layer) {
            Rng r2(rng());
            p.A = Tensor::randn(p.A.shape(), r2, real(0.3));
            p.B = Tensor::randn(p.B.shape(), r2, real(0.3));
        }
    return m;
}

}  // namespace

TEST_CASE("corpus loading is byte-level and deterministic") {
    TempDir dir;

    SECTION("two-character file maps to its byte values") {
        fs::path p = write_bytes(dir, "ab.txt", {'a', 'b'});
        Corpus c = load_corpus(p, 1.0);
        REQUIRE(c.ids == std::vector<int32_t>{97, 98});
        REQUIRE(c.train_end == 2);
        REQUIRE(c.valid_size() == 0);
    }

    SECTION("every possible byte is a valid id below the vocabulary size") {
        std::vector<unsigned char> all(256);
        for (int i = 0; i < 256; ++i) all[size_t(i)] = (unsigned char)(i);
        Corpus c = load_corpus(write_bytes(dir, "all.bin", all), 0.5);
        for (int64_t i = 0; i < c.size(); ++i) {
            REQUIRE(c.ids[size_t(i)] >= 0);
            REQUIRE(c.ids[size_t(i)] < 256);
            REQUIRE(c.ids[size_t(i)] == int32_t(i));
        }
    }

    SECTION("split lands on a window boundary for window-aligned sizes") {
        // 1000 windows of 16 bytes; a 0.9 split gives 900 train, 100 validation.
        std::vector<unsigned char> bytes(1000 * 16);
        Rng rng(5);
        for (auto& b : bytes) b = (unsigned char)(rng() & 0xff);
        Corpus c = load_corpus(write_bytes(dir, "windows.bin", bytes), 0.9);
        REQUIRE(c.train_end == 900 * 16);
        REQUIRE(c.valid_size() == 100 * 16);
        REQUIRE(c.train_size() + c.valid_size() == c.size());
    }

    SECTION("reload gives identical ids and split") {
        Corpus a = load_corpus(fs::path(NUTE_REPO_ROOT) / "data" / "sample.txt", 0.9);
        Corpus b = load_corpus(fs::path(NUTE_REPO_ROOT) / "data" / "sample.txt", 0.9);
        REQUIRE(a.ids == b.ids);
        REQUIRE(a.train_end == b.train_end);
        REQUIRE(a.size() > 60000);
        REQUIRE(a.valid_size() > 0);
    }

    SECTION("error cases") {
        REQUIRE_THROWS_AS(load_corpus(write_bytes(dir, "empty.txt", {}), 0.9),
                          corrupt_data_error);
        REQUIRE_THROWS_AS(load_corpus(dir.path / "missing.txt", 0.9), io_error);
        fs::path p = write_bytes(dir, "ok.txt", {'x'});
        REQUIRE_THROWS_AS(load_corpus(p, 0.0), config_error);
        REQUIRE_THROWS_AS(load_corpus(p, 1.5), config_error);
    }
}

TEST_CASE("sampled batches are contiguous shifted windows") {
    TempDir dir;
    // Strictly increasing unique bytes: a window's start equals its first id.
    std::vector<unsigned char> bytes(200);
    for (int i = 0; i < 200; ++i) bytes[size_t(i)] = (unsigned char)(i);
    Corpus c = load_corpus(write_bytes(dir, "inc.bin", bytes), 1.0);

    Rng rng(99);
    const int64_t B = 16, T = 8;
    Batch b = sample_batch(c, rng, B, T);
    REQUIRE(b.inputs.shape == Shape{B, T});
    REQUIRE(b.targets.shape == Shape{B, T});
    for (int64_t i = 0; i < B; ++i) {
        const int32_t start = b.inputs.v[size_t(i * T)];
        REQUIRE(start >= 0);
        REQUIRE(start <= int32_t(c.train_size() - T - 1));
        for (int64_t j = 0; j < T; ++j) {
            REQUIRE(b.inputs.v[size_t(i * T + j)] == start + int32_t(j));
            REQUIRE(b.targets.v[size_t(i * T + j)] == start + int32_t(j) + 1);
        }
    }

    SECTION("a fixed seed reproduces the same batches") {
        Rng r1(1234), r2(1234);
        for (int k = 0; k < 3; ++k) {
            Batch x = sample_batch(c, r1, 4, 6);
            Batch y = sample_batch(c, r2, 4, 6);
            REQUIRE(x.inputs.v == y.inputs.v);
            REQUIRE(x.targets.v == y.targets.v);
        }
    }

    SECTION("a window that does not fit is rejected") {
        // 200 bytes hold exactly one window of 199 inputs plus its target...
        Batch edge = sample_batch(c, rng, 2, 199);
        REQUIRE(edge.inputs.v[0] == 0);
        // ...but nothing longer.
        REQUIRE_THROWS_AS(sample_batch(c, rng, 2, 200), config_error);
        REQUIRE_THROWS_AS(sample_batch(c, rng, 0, 8), config_error);
    }
}

TEST_CASE("window starts are uniform under a chi-square test") {
    TempDir dir;
    // 272 bytes with ids[i] = i mod 256 and seq_len 16: exactly 256 possible
    // starts, and a window's start is recoverable from its first byte.
    std::vector<unsigned char> bytes(272);
    for (int i = 0; i < 272; ++i) bytes[size_t(i)] = (unsigned char)(i % 256);
    Corpus c = load_corpus(write_bytes(dir, "mod.bin", bytes), 1.0);

    const int64_t T = 16;
    const int kBuckets = 16;                 // 256 starts / 16 per bucket
    const double kCrit01_df15 = 30.578;      // chi-square critical value, 15 dof, alpha = 0.01
    const int64_t kDraws = 100000;

    std::vector<int64_t> seen(256, 0);
    Rng rng(991);
    int64_t drawn = 0;
    while (drawn < kDraws) {
        Batch b = sample_batch(c, rng, 5, T);
        for (int64_t i = 0; i < 5 && drawn < kDraws; ++i, ++drawn) {
            const int32_t start = b.inputs.v[size_t(i * T)];
            REQUIRE(start >= 0);
            REQUIRE(start < 256);
            ++seen[size_t(start)];
        }
    }
    std::vector<int64_t> bucket(kBuckets, 0);
    for (int s = 0; s < 256; ++s) bucket[size_t(s / 16)] += seen[size_t(s)];
    const double expect = double(kDraws) / kBuckets;
    double chi2 = 0;
    for (int k = 0; k < kBuckets; ++k) {
        const double diff = double(bucket[size_t(k)]) - expect;
        chi2 += diff * diff / expect;
    }
    INFO("chi-square statistic " << chi2);
    REQUIRE(chi2 < kCrit01_df15);
    // Every start position is reachable.
    for (int s = 0; s < 256; ++s) REQUIRE(seen[size_t(s)] > 0);
}

TEST_CASE("uniform logits give perplexity equal to the vocabulary size") {
    ModelConfig c = byte_config();
    Rng rng(7);
    BaseWeights base = BaseWeights::init(c, rng);
    zero_params(base);  // all-zero weights produce all-zero logits

    TempDir dir;
    std::vector<unsigned char> bytes(600);
    for (auto& b : bytes) b = (unsigned char)(rng() & 0xff);
    Corpus corpus = load_corpus(write_bytes(dir, "u.bin", bytes), 1.0);

    const double ppl = perplexity_plain(base, corpus.train_data(), corpus.train_size(), 32);
    REQUIRE(ppl == Catch::Approx(256.0).epsilon(1e-9));
}

TEST_CASE("a model that predicts a constant byte drives perplexity to one") {
    ModelConfig c = byte_config();
    c.L = 1;
    Rng rng(11);
    BaseWeights base = BaseWeights::init(c, rng);
    zero_params(base);
    // Every token embeds to e0; the head maps channel 0 strongly to byte 'a'.
    for (int64_t v = 0; v < c.V; ++v) base.tok_emb.val()[v * c.d] = 1;
    std::fill(base.gain_final.val().begin(), base.gain_final.val().end(), real(1));
    base.head.val()[97] = 10;  // row 0 (channel 0), column 'a'

    TempDir dir;
    std::vector<unsigned char> bytes(500, (unsigned char)('a'));
    Corpus corpus = load_corpus(write_bytes(dir, "rep.bin", bytes), 1.0);

    const double ppl = perplexity_plain(base, corpus.train_data(), corpus.train_size(), 32);
    REQUIRE(ppl >= 1.0);
    REQUIRE(ppl < 1.0 + 1e-6);
}

TEST_CASE("perplexity is independent of evaluation batching and repeatable") {
    ModelConfig c = tiny_config();
    Rng rng(21);
    BaseWeights base = BaseWeights::init(c, rng);

    TempDir dir;
    std::vector<unsigned char> bytes(700);
    for (auto& b : bytes) b = (unsigned char)(rng() % 32);
    Corpus corpus = load_corpus(write_bytes(dir, "s.bin", bytes), 1.0);

    const double p1 = perplexity_plain(base, corpus.train_data(), corpus.train_size(), 12, 1);
    const double p8 = perplexity_plain(base, corpus.train_data(), corpus.train_size(), 12, 8);
    const double p8b = perplexity_plain(base, corpus.train_data(), corpus.train_size(), 12, 8);
    REQUIRE(p1 == p8);
    REQUIRE(p8 == p8b);
    REQUIRE(std::isfinite(p1));
    REQUIRE(p1 > 0);
}

TEST_CASE("an identity module leaves perplexity unchanged") {
    ModelConfig c = tiny_config();
    Rng rng(31);
    BaseWeights base = BaseWeights::init(c, rng);
    LightweightModule id = LightweightModule::identity(c, rng);

    TempDir dir;
    std::vector<unsigned char> bytes(600);
    for (auto& b : bytes) b = (unsigned char)(rng() % 32);
    Corpus corpus = load_corpus(write_bytes(dir, "i.bin", bytes), 1.0);

    const double plain = perplexity_plain(base, corpus.train_data(), corpus.train_size(), 12);
    const double gated = perplexity(base, id, corpus.train_data(), corpus.train_size(), 12);
    REQUIRE(gated == Catch::Approx(plain).epsilon(1e-4));
}

TEST_CASE("slicing preserves perplexity of a binary-masked model") {
    ModelConfig c = tiny_config();
    Rng rng(77);
    BaseWeights base = BaseWeights::init(c, rng);

    MaskValues z;
    z.head = Tensor::full({c.L, c.n_head}, real(1));
    z.intermediate = Tensor::full({c.L, c.d_int}, real(1));
    z.hidden = Tensor::full({c.d}, real(1));
    z.head.val()[1] = 0;  // drop one head
    for (int64_t i = 0; i < 5; ++i) z.intermediate.val()[i * 2] = 0;
    for (int64_t k = 3; k < c.d; k += 4) z.hidden.val()[k] = 0;
    LightweightModule m = binary_module(c, z, rng);
    BaseWeights sliced = slice_pruned(base, m);
    REQUIRE(sliced.cfg.d < c.d);

    TempDir dir;
    std::vector<unsigned char> bytes(600);
    for (auto& b : bytes) b = (unsigned char)(rng() % 32);
    Corpus corpus = load_corpus(write_bytes(dir, "sl.bin", bytes), 1.0);

    const double masked = perplexity(base, m, corpus.train_data(), corpus.train_size(), 12);
    const double pruned = perplexity_plain(sliced, corpus.train_data(), corpus.train_size(), 12);
    REQUIRE(pruned == Catch::Approx(masked).epsilon(1e-3));
}

TEST_CASE("a briefly trained model beats the uniform-perplexity ceiling") {
    ModelConfig c = byte_config();
    c.d_int = 24;
    Rng rng(123);
    BaseWeights base = BaseWeights::init(c, rng);
    base.set_requires_grad(true);

    Corpus corpus = load_corpus(fs::path(NUTE_REPO_ROOT) / "data" / "sample.txt", 0.9);
    AdamW::Options opt;
    opt.lr = real(3e-3);
    AdamW optim(base.params(), opt);
    Rng data_rng(7);
    for (int step = 0; step < 200; ++step) {
        Batch b = sample_batch(corpus, data_rng, 8, 32);
        Graph g;
        Tensor loss = mean_all(nll_last(log_softmax(forward_plain(base, b.inputs).logits), b.targets));
        g.backward(loss);
        optim.step();
    }
    base.set_requires_grad(false);

    const double ppl = perplexity_plain(base, corpus.valid_data(), corpus.valid_size(), 32);
    INFO("validation perplexity " << ppl);
    REQUIRE(ppl < 256.0);
    REQUIRE(ppl > 1.0);
}

TEST_CASE("greedy generation is deterministic and breaks ties on the lowest id") {
    ModelConfig c = tiny_config();
    Rng rng(55);

    SECTION("all-equal logits always choose token zero") {
        BaseWeights base = BaseWeights::init(c, rng);
        zero_params(base);
        std::vector<int32_t> out = generate(base, nullptr, {5, 6, 7}, 4);
        REQUIRE(out == std::vector<int32_t>{5, 6, 7, 0, 0, 0, 0});
    }

    SECTION("zero new tokens returns the prompt unchanged") {
        BaseWeights base = BaseWeights::init(c, rng);
        std::vector<int32_t> prompt{9, 1, 4};
        REQUIRE(generate(base, nullptr, prompt, 0) == prompt);
    }

    SECTION("repeated calls agree, with and without a module") {
        BaseWeights base = BaseWeights::init(c, rng);
        LightweightModule id = LightweightModule::identity(c, rng);
        std::vector<int32_t> a = generate(base, nullptr, {3, 14, 15, 9}, 12);
        std::vector<int32_t> b = generate(base, nullptr, {3, 14, 15, 9}, 12);
        REQUIRE(a == b);
        REQUIRE(int64_t(a.size()) == 4 + 12);
        std::vector<int32_t> g1 = generate(base, &id, {3, 14, 15, 9}, 12);
        std::vector<int32_t> g2 = generate(base, &id, {3, 14, 15, 9}, 12);
        REQUIRE(g1 == g2);
        REQUIRE(g1 == a);  // identity module does not change greedy choices
    }

    SECTION("prompts longer than the context window use the trailing tokens") {
        BaseWeights base = BaseWeights::init(c, rng);
        std::vector<int32_t> prompt(size_t(c.context_len + 5), 3);
        std::vector<int32_t> out = generate(base, nullptr, prompt, 2);
        REQUIRE(int64_t(out.size()) == c.context_len + 5 + 2);
    }

    SECTION("an empty prompt is rejected") {
        BaseWeights base = BaseWeights::init(c, rng);
        REQUIRE_THROWS_AS(generate(base, nullptr, {}, 3), config_error);
    }
}
