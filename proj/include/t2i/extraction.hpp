#pragma once

#include <cstdint>
#include <cstring>
#include <map>
#include <string>
#include <vector>

#include "t2i/encoder.hpp"
#include "t2i/io.hpp"
#include "t2i/ops.hpp"

namespace t2i {

struct ExtractionStrategy {
    enum class Kind { LastLayer, SingleLayer, MeanLayers, NormMeanLayers };
    enum class Pool { None, Mean, LastToken };

    Kind kind = Kind::LastLayer;
    int64_t layer = 0;  // SingleLayer index k, 0 = embedding output
    Pool pooled = Pool::None;
    bool center_only = false;  // NormMeanLayers: center without rescaling

    void validate(int64_t layers) const {
        if (kind == Kind::SingleLayer && (layer < 0 || layer > layers))
            throw index_error("SingleLayer index out of range: " + std::to_string(layer));
    }

    // Identifies the per-token part (what an embedding cache stores).
    std::string tag() const {
        std::string s;
        switch (kind) {
            case Kind::LastLayer: s = "last"; break;
            case Kind::SingleLayer: s = "layer" + std::to_string(layer); break;
            case Kind::MeanLayers: s = "mean"; break;
            case Kind::NormMeanLayers: s = center_only ? "normmean-centeronly" : "normmean"; break;
        }
        return s;
    }

    static ExtractionStrategy from_tag(const std::string& tag) {
        ExtractionStrategy s;
        if (tag == "last") s.kind = Kind::LastLayer;
        else if (tag == "mean") s.kind = Kind::MeanLayers;
        else if (tag == "normmean") s.kind = Kind::NormMeanLayers;
        else if (tag == "normmean-centeronly") { s.kind = Kind::NormMeanLayers; s.center_only = true; }
        else if (tag.rfind("layer", 0) == 0) {
            s.kind = Kind::SingleLayer;
            s.layer = std::stol(tag.substr(5));
        } else throw parse_error("unknown extraction strategy tag: " + tag);
        return s;
    }
};

// Reduces a (L+1, T, D) stack to a per-token (T, D) matrix. Pure and
// tape-free: the stack comes from a frozen encoder. Pad positions are
// processed like any other and excluded downstream via the mask.
inline Tensor extract(const Tensor& states, const ExtractionStrategy& strat, float eps = 1e-5f) {
    check_dim(states.rank() == 3, "extract: stack must be (L+1, T, D)");
    int64_t layers1 = states.dim(0), t = states.dim(1), d = states.dim(2);
    int64_t layers = layers1 - 1;
    strat.validate(layers);
    const float* ps = states.data();
    Tensor out = Tensor::zeros({t, d});
    float* po = out.data();
    auto copy_layer = [&](int64_t k) {
        std::copy(ps + k * t * d, ps + (k + 1) * t * d, po);
    };
    switch (strat.kind) {
        case ExtractionStrategy::Kind::LastLayer:
            copy_layer(layers);
            break;
        case ExtractionStrategy::Kind::SingleLayer:
            copy_layer(strat.layer);
            break;
        case ExtractionStrategy::Kind::MeanLayers: {
            float inv = 1.0f / static_cast<float>(layers1);
            for (int64_t l = 0; l < layers1; l++) {
                const float* pl = ps + l * t * d;
                for (int64_t i = 0; i < t * d; i++) po[i] += pl[i];
            }
            for (int64_t i = 0; i < t * d; i++) po[i] *= inv;
            break;
        }
        case ExtractionStrategy::Kind::NormMeanLayers: {
            float inv = 1.0f / static_cast<float>(layers1);
            for (int64_t l = 0; l < layers1; l++) {
                for (int64_t tok = 0; tok < t; tok++) {
                    const float* row = ps + (l * t + tok) * d;
                    float mean = 0.0f;
                    for (int64_t c = 0; c < d; c++) mean += row[c];
                    mean /= static_cast<float>(d);
                    float scale = 1.0f;
                    if (!strat.center_only) {
                        float var = 0.0f;
                        for (int64_t c = 0; c < d; c++) {
                            float cc = row[c] - mean;
                            var += cc * cc;
                        }
                        var /= static_cast<float>(d);
                        scale = 1.0f / std::sqrt(var + eps);
                    }
                    float* orow = po + tok * d;
                    for (int64_t c = 0; c < d; c++) orow[c] += (row[c] - mean) * scale * inv;
                }
            }
            break;
        }
    }
    return out;
}

inline Tensor extract(const LayerStack& stack, const ExtractionStrategy& strat) {
    return extract(stack.states, strat);
}

// Per-prompt conditioning: projected per-token matrix, optional pooled
// vector, and the validity mask from the source sequence.
struct ConditioningBundle {
    Tensor tokens;  // (T, d_c)
    Tensor pooled;  // (d_c), defined only when the strategy pools
    int32_t valid_len = 0;
    bool is_null = false;
};

// A batch of conditioning inputs sharing one strategy. tokens is (B, T, d_c)
// after projection; pooled is (B, d_c) when the strategy pools; lens holds
// per-sample valid token counts for key masking.
struct CondBatch {
    Tensor tokens;
    Tensor pooled;
    std::vector<int32_t> lens;
};

// Pools projected tokens (B, T, d_c) -> (B, d_c) over valid positions.
inline Tensor pool_tokens(Tape* tape, const Tensor& tokens, const std::vector<int32_t>& lens,
                          ExtractionStrategy::Pool kind) {
    check(kind != ExtractionStrategy::Pool::None, "pool_tokens: no pooling kind selected");
    for (int32_t l : lens)
        if (l < 1) throw contract_error("pool_tokens: all-masked input");
    if (kind == ExtractionStrategy::Pool::Mean) return masked_mean_tokens(tape, tokens, lens);
    return last_token(tape, tokens, lens);
}

// Precomputed post-extraction, pre-projection matrices keyed by caption hash.
// The caption text is stored per record so hash collisions between distinct
// captions are detected rather than silently merged.
struct EmbeddingCache {
    static constexpr uint32_t kVersion = 1;

    std::string encoder_digest;
    std::string strategy_tag;
    int64_t context = 0;
    int64_t dim = 0;
    std::map<uint64_t, std::pair<std::string, std::vector<float>>> records;

    static EmbeddingCache build(const std::vector<std::string>& captions, const TextEncoder& enc,
                                const Vocab& vocab, const ExtractionStrategy& strat,
                                int64_t batch = 64) {
        strat.validate(enc.cfg.layers);
        EmbeddingCache c;
        c.encoder_digest = enc.cfg.digest();
        c.strategy_tag = strat.tag();
        c.context = enc.cfg.context;
        c.dim = enc.cfg.dim;
        int64_t t = enc.cfg.context, d = enc.cfg.dim;
        for (size_t base = 0; base < captions.size(); base += static_cast<size_t>(batch)) {
            size_t n = std::min(static_cast<size_t>(batch), captions.size() - base);
            std::vector<int32_t> ids(n * static_cast<size_t>(t));
            std::vector<int32_t> lens(n);
            for (size_t i = 0; i < n; i++) {
                TokenSequence seq = vocab.tokenize(captions[base + i], static_cast<int32_t>(t));
                std::copy(seq.ids.begin(), seq.ids.end(), ids.begin() + i * static_cast<size_t>(t));
                lens[i] = seq.valid_len;
            }
            Tensor stacks = enc.forward_stacks(ids, static_cast<int64_t>(n), lens);
            for (size_t i = 0; i < n; i++) {
                Tensor one = Tensor::zeros({enc.cfg.layers + 1, t, d});
                std::copy(stacks.data() + static_cast<int64_t>(i) * one.numel(),
                          stacks.data() + static_cast<int64_t>(i + 1) * one.numel(), one.data());
                Tensor mat = extract(one, strat);
                c.insert(captions[base + i], std::vector<float>(mat.data(), mat.data() + mat.numel()));
            }
        }
        return c;
    }

    void insert(const std::string& caption, std::vector<float> data) {
        uint64_t h = fnv1a64(caption);
        auto it = records.find(h);
        if (it != records.end()) {
            if (it->second.first != caption)
                throw integrity_error("caption hash collision: \"" + it->second.first +
                                      "\" vs \"" + caption + "\"");
            return;  // idempotent re-insert of the same caption
        }
        records.emplace(h, std::make_pair(caption, std::move(data)));
    }

    bool contains(const std::string& caption) const {
        auto it = records.find(fnv1a64(caption));
        return it != records.end() && it->second.first == caption;
    }

    // (T, dim) matrix for a cached caption.
    Tensor lookup(const std::string& caption) const {
        auto it = records.find(fnv1a64(caption));
        if (it == records.end()) throw contract_error("caption not in cache: " + caption);
        if (it->second.first != caption)
            throw integrity_error("caption hash collision on lookup: " + caption);
        Tensor t = Tensor::zeros({context, dim});
        std::copy(it->second.second.begin(), it->second.second.end(), t.data());
        return t;
    }

    // Refuses to serve a run whose encoder or strategy differs.
    void check_compatible(const TextEncoder& enc, const ExtractionStrategy& strat) const {
        if (enc.cfg.digest() != encoder_digest)
            throw contract_error("embedding cache was built for encoder " + encoder_digest +
                                 ", not " + enc.cfg.digest());
        if (strat.tag() != strategy_tag)
            throw contract_error("embedding cache was built under strategy " + strategy_tag +
                                 ", not " + strat.tag());
    }

    void save(const std::string& path) const {
        BinWriter w(path);
        w.bytes("EMB1", 4);
        w.u32(kVersion);
        w.str(encoder_digest);
        w.str(strategy_tag);
        w.u32(static_cast<uint32_t>(context));
        w.u32(static_cast<uint32_t>(dim));
        w.u64(records.size());
        for (auto& [h, rec] : records) {
            w.u64(h);
            w.str(rec.first);
            w.f32s(rec.second.data(), rec.second.size());
        }
        w.finish();
    }

    static EmbeddingCache load(const std::string& path) {
        BinReader r(path);
        char magic[4];
        r.bytes(magic, 4);
        if (std::memcmp(magic, "EMB1", 4) != 0) throw parse_error("bad cache magic: " + path);
        if (r.u32() != kVersion) throw parse_error("unsupported cache version: " + path);
        EmbeddingCache c;
        c.encoder_digest = r.str();
        c.strategy_tag = r.str();
        c.context = r.u32();
        c.dim = r.u32();
        uint64_t n = r.u64();
        for (uint64_t i = 0; i < n; i++) {
            uint64_t h = r.u64();
            std::string caption = r.str();
            std::vector<float> data(static_cast<size_t>(c.context * c.dim));
            r.f32s(data.data(), data.size());
            if (h != fnv1a64(caption)) throw integrity_error("record hash mismatch: " + path);
            c.records.emplace(h, std::make_pair(std::move(caption), std::move(data)));
        }
        r.expect_checksum();
        return c;
    }
};

// Caption -> ConditioningBundle under one frozen encoder, one strategy and
// one trainable projection. The extraction stage (pre-projection) may be
// served from an EmbeddingCache; the projection is applied per use so its
// training is never frozen into cached values. The empty-caption extraction
// is memoized: null bundles depend only on the model and strategy.
struct ConditioningPipeline {
    const TextEncoder* encoder = nullptr;
    const Vocab* vocab = nullptr;
    ExtractionStrategy strategy;
    Tensor projection;                     // (D, d_c), trainable
    const EmbeddingCache* cache = nullptr; // optional

    ConditioningPipeline() = default;
    ConditioningPipeline(const TextEncoder* enc, const Vocab* v, ExtractionStrategy s, Tensor proj,
                         const EmbeddingCache* c = nullptr)
        : encoder(enc), vocab(v), strategy(s), projection(std::move(proj)), cache(c) {
        strategy.validate(encoder->cfg.layers);
        check_dim(projection.rank() == 2 && projection.dim(0) == encoder->cfg.dim,
                  "projection rows must equal encoder width");
        if (cache) cache->check_compatible(*encoder, strategy);
    }

    int64_t cond_width() const { return projection.dim(1); }

    // Post-extraction, pre-projection (T, D) matrix for a caption.
    Tensor pre_tokens(const std::string& caption, int32_t* valid_len_out = nullptr) const {
        TokenSequence seq = vocab->tokenize(caption, static_cast<int32_t>(encoder->cfg.context));
        if (valid_len_out) *valid_len_out = seq.valid_len;
        if (cache && cache->contains(caption)) return cache->lookup(caption);
        return extract(encoder->forward_collect(seq), strategy);
    }

    ConditioningBundle bundle(Tape* tape, const std::string& caption) const {
        ConditioningBundle b;
        b.tokens = linear(tape, pre_tokens(caption, &b.valid_len), projection);
        if (strategy.pooled != ExtractionStrategy::Pool::None) {
            Tensor t3 = reshape(tape, b.tokens, {1, encoder->cfg.context, cond_width()});
            Tensor pooled = pool_tokens(tape, t3, {b.valid_len}, strategy.pooled);
            b.pooled = reshape(tape, pooled, {cond_width()});
        }
        return b;
    }

    ConditioningBundle null_bundle(Tape* tape) const {
        if (!null_pre_.defined()) {
            null_pre_ = pre_tokens("", &null_len_);
        }
        ConditioningBundle b;
        b.is_null = true;
        b.valid_len = null_len_;
        b.tokens = linear(tape, null_pre_, projection);
        if (strategy.pooled != ExtractionStrategy::Pool::None) {
            Tensor t3 = reshape(tape, b.tokens, {1, encoder->cfg.context, cond_width()});
            Tensor pooled = pool_tokens(tape, t3, {b.valid_len}, strategy.pooled);
            b.pooled = reshape(tape, pooled, {cond_width()});
        }
        return b;
    }

    // Memoized empty-caption extraction, exposed for batched training paths.
    const Tensor& null_pre_tokens(int32_t* valid_len_out = nullptr) const {
        if (!null_pre_.defined()) null_pre_ = pre_tokens("", &null_len_);
        if (valid_len_out) *valid_len_out = null_len_;
        return null_pre_;
    }

    // Batched conditioning: per-caption matrices are constants (frozen
    // encoder), so they are stacked first and projected in one call, giving
    // the projection a single recorded matmul per step. Empty captions are
    // served from the memoized null extraction.
    CondBatch batch(Tape* tape, const std::vector<std::string>& captions) const {
        check(!captions.empty(), "conditioning batch must be non-empty");
        int64_t b = static_cast<int64_t>(captions.size());
        int64_t t = encoder->cfg.context, d = encoder->cfg.dim;
        Tensor raw = Tensor::zeros({b, t, d});
        CondBatch out;
        out.lens.resize(captions.size());
        for (int64_t i = 0; i < b; i++) {
            Tensor pre;
            if (captions[static_cast<size_t>(i)].empty()) {
                pre = null_pre_tokens(&out.lens[static_cast<size_t>(i)]);
            } else {
                pre = pre_tokens(captions[static_cast<size_t>(i)], &out.lens[static_cast<size_t>(i)]);
            }
            std::copy(pre.data(), pre.data() + t * d, raw.data() + i * t * d);
        }
        out.tokens = linear(tape, raw, projection);
        if (strategy.pooled != ExtractionStrategy::Pool::None)
            out.pooled = pool_tokens(tape, out.tokens, out.lens, strategy.pooled);
        return out;
    }

    // B copies of the null condition, for guided sampling.
    CondBatch null_batch(Tape* tape, int64_t b) const {
        return batch(tape, std::vector<std::string>(static_cast<size_t>(b)));
    }

  private:
    mutable Tensor null_pre_;
    mutable int32_t null_len_ = 0;
};

}  // namespace t2i
