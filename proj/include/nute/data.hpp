#pragma once

// Corpus handling, batching, perplexity, and greedy generation. Tokenization
// is byte-level (V = 256): zero external assets and fully deterministic.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "nute/common.hpp"
#include "nute/model.hpp"

namespace nute {

struct Corpus {
    std::vector<int32_t> ids;  // byte values 0..255
    int64_t train_end = 0;     // ids[0, train_end) train, [train_end, size) validation

    int64_t size() const { return int64_t(ids.size()); }
    const int32_t* train_data() const { return ids.data(); }
    int64_t train_size() const { return train_end; }
    const int32_t* valid_data() const { return ids.data() + train_end; }
    int64_t valid_size() const { return size() - train_end; }
};

// Reads a file as raw bytes and splits train/validation at
// floor(split_fraction * size); with window-aligned corpus sizes the split
// lands exactly on a window boundary.
inline Corpus load_corpus(const std::filesystem::path& path, real split_fraction) {
    if (split_fraction <= 0 || split_fraction > 1)
        throw config_error("load_corpus: split fraction must be in (0,1]");
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw io_error("cannot open corpus file: " + path.string());
    const std::streamsize n = f.tellg();
    if (n <= 0) throw corrupt_data_error("corpus file is empty: " + path.string());
    f.seekg(0);
    std::vector<unsigned char> bytes(static_cast<size_t>(n));
    f.read(reinterpret_cast<char*>(bytes.data()), n);
    if (!f) throw io_error("short read from corpus file: " + path.string());

    Corpus c;
    c.ids.reserve(bytes.size());
    for (unsigned char b : bytes) c.ids.push_back(int32_t(b));
    c.train_end = int64_t(double(split_fraction) * double(c.ids.size()));
    return c;
}

struct Batch {
    IdArray inputs;   // [batch, seq_len]
    IdArray targets;  // [batch, seq_len], shifted one position ahead
};

// Uniformly random training windows; targets are the inputs shifted by one.
inline Batch sample_batch(const Corpus& corpus, Rng& rng, int64_t batch, int64_t seq_len) {
    if (batch <= 0 || seq_len <= 0) throw config_error("sample_batch: batch and seq_len must be positive");
    const int64_t max_start = corpus.train_size() - seq_len - 1;
    if (max_start < 0)
        throw config_error("sample_batch: train split (" + std::to_string(corpus.train_size()) +
                           " tokens) is shorter than one window of " + std::to_string(seq_len + 1));
    Batch b;
    b.inputs.shape = {batch, seq_len};
    b.targets.shape = {batch, seq_len};
    b.inputs.v.resize(size_t(batch * seq_len));
    b.targets.v.resize(size_t(batch * seq_len));
    std::uniform_int_distribution<int64_t> pick(0, max_start);
    for (int64_t i = 0; i < batch; ++i) {
        const int64_t s = pick(rng);
        for (int64_t j = 0; j < seq_len; ++j) {
            b.inputs.v[size_t(i * seq_len + j)] = corpus.ids[size_t(s + j)];
            b.targets.v[size_t(i * seq_len + j)] = corpus.ids[size_t(s + j + 1)];
        }
    }
    return b;
}

namespace detail {

// Mean next-token cross-entropy over non-overlapping windows (stride =
// seq_len) of ids[0, n), then exponentiated. Windows are batched for speed;
// per-row arithmetic is independent of the batching.
template <class ForwardFn>
double perplexity_impl(ForwardFn&& fwd, const int32_t* ids, int64_t n, int64_t seq_len,
                       int64_t eval_batch) {
    if (seq_len <= 0) throw config_error("perplexity: seq_len must be positive");
    std::vector<int64_t> starts;
    for (int64_t s = 0; s + seq_len + 1 <= n; s += seq_len) starts.push_back(s);
    if (starts.empty())
        throw config_error("perplexity: split shorter than one window of " +
                           std::to_string(seq_len + 1) + " tokens");
    double ce_sum = 0;
    int64_t count = 0;
    NoGrad ng;
    for (size_t w0 = 0; w0 < starts.size(); w0 += size_t(eval_batch)) {
        const int64_t bs = std::min<int64_t>(eval_batch, int64_t(starts.size() - w0));
        IdArray inputs, targets;
        inputs.shape = {bs, seq_len};
        targets.shape = {bs, seq_len};
        inputs.v.resize(size_t(bs * seq_len));
        targets.v.resize(size_t(bs * seq_len));
        for (int64_t i = 0; i < bs; ++i) {
            const int64_t s = starts[w0 + size_t(i)];
            for (int64_t j = 0; j < seq_len; ++j) {
                inputs.v[size_t(i * seq_len + j)] = ids[s + j];
                targets.v[size_t(i * seq_len + j)] = ids[s + j + 1];
            }
        }
        Tensor nll = nll_last(log_softmax(fwd(inputs)), targets);
        for (int64_t i = 0; i < nll.numel(); ++i) ce_sum += double(nll.val()[i]);
        count += nll.numel();
    }
    return std::exp(ce_sum / double(count));
}

}  // namespace detail

// Perplexity of the gated model (deterministic gates).
inline double perplexity(const BaseWeights& base, const LightweightModule& module,
                         const int32_t* ids, int64_t n, int64_t seq_len,
                         int64_t eval_batch = 8) {
    return detail::perplexity_impl(
        [&](const IdArray& in) { return forward(base, module, in, MaskMode::kDeterministic).logits; },
        ids, n, seq_len, eval_batch);
}

// Perplexity of a bare model (pretrained base or sliced output).
inline double perplexity_plain(const BaseWeights& base, const int32_t* ids, int64_t n,
                               int64_t seq_len, int64_t eval_batch = 8) {
    return detail::perplexity_impl(
        [&](const IdArray& in) { return forward_plain(base, in).logits; }, ids, n, seq_len,
        eval_batch);
}

// Greedy decoding: repeatedly append the argmax next token (ties broken by
// the lowest token id). `module` may be null for a bare model.
inline std::vector<int32_t> generate(const BaseWeights& base, const LightweightModule* module,
                                     std::vector<int32_t> prompt, int64_t max_new) {
    if (prompt.empty()) throw config_error("generate: empty prompt");
    NoGrad ng;
    for (int64_t step = 0; step < max_new; ++step) {
        const int64_t T = std::min<int64_t>(int64_t(prompt.size()), base.cfg.context_len);
        IdArray in;
        in.shape = {1, T};
        in.v.assign(prompt.end() - T, prompt.end());
        Tensor logits = module != nullptr
                            ? forward(base, *module, in, MaskMode::kDeterministic).logits
                            : forward_plain(base, in).logits;
        const real* last = logits.val().data() + (T - 1) * base.cfg.V;
        int32_t best = 0;
        for (int64_t v = 1; v < base.cfg.V; ++v)
            if (last[v] > last[best]) best = int32_t(v);
        prompt.push_back(best);
    }
    return prompt;
}

}  // namespace nute
