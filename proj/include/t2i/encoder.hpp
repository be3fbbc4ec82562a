#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "t2i/ops.hpp"
#include "t2i/optim.hpp"
#include "t2i/rng.hpp"
#include "t2i/vocab.hpp"

namespace t2i {

enum class EncoderKind { Causal, Bidirectional };

struct EncoderConfig {
    EncoderKind kind = EncoderKind::Causal;
    int64_t layers = 4;
    int64_t dim = 64;
    int64_t heads = 4;
    int64_t ff_mult = 4;
    int64_t context = 32;
    int64_t vocab = 0;

    void validate() const {
        check(layers >= 1, "encoder: layers must be >= 1");
        check(dim % heads == 0, "encoder: heads must divide dim");
        check(context >= 3 && vocab > Vocab::kReserved, "encoder: bad context/vocab");
    }

    std::string digest() const {
        std::string s = kind == EncoderKind::Causal ? "causal" : "bidir";
        s += "|L" + std::to_string(layers) + "|D" + std::to_string(dim) +
             "|H" + std::to_string(heads) + "|F" + std::to_string(ff_mult) +
             "|C" + std::to_string(context) + "|V" + std::to_string(vocab);
        return s;
    }
};

// All L+1 hidden states of one sequence: index 0 is the embedding output,
// index L the final block output.
struct LayerStack {
    Tensor states;  // (L+1, T, D)
    int32_t valid_len = 0;
};

// Pre-norm transformer with learned absolute position embeddings and SiLU
// feed-forward. The causal variant masks attention by loop bounds, so prefix
// states are bit-exactly independent of suffix tokens.
struct TextEncoder {
    EncoderConfig cfg;
    Tensor tok_emb;  // (V, D)
    Tensor pos_emb;  // (ctx, D)
    struct Block {
        Tensor ln1_g, ln1_b;
        Tensor wq, bq, wk, bk, wv, bv, wo, bo;
        Tensor ln2_g, ln2_b;
        Tensor w1, b1, w2, b2;
    };
    std::vector<Block> blocks;
    Tensor head;  // (D, V), bias-free prediction head

    static TextEncoder init(const EncoderConfig& cfg, uint64_t seed) {
        cfg.validate();
        TextEncoder m;
        m.cfg = cfg;
        Rng rng = substream(seed, "encoder-init");
        const float sd = 0.02f;
        auto w = [&](Shape s) { return Tensor::randn(rng, std::move(s), sd, true); };
        auto zeros = [&](Shape s) { return Tensor::zeros(std::move(s), true); };
        auto ones = [&](Shape s) { return Tensor::full(std::move(s), 1.0f, true); };
        int64_t d = cfg.dim, f = cfg.ff_mult * d;
        m.tok_emb = w({cfg.vocab, d});
        m.pos_emb = w({cfg.context, d});
        for (int64_t l = 0; l < cfg.layers; l++) {
            Block b;
            b.ln1_g = ones({d}); b.ln1_b = zeros({d});
            b.wq = w({d, d}); b.bq = zeros({d});
            b.wk = w({d, d}); b.bk = zeros({d});
            b.wv = w({d, d}); b.bv = zeros({d});
            b.wo = w({d, d}); b.bo = zeros({d});
            b.ln2_g = ones({d}); b.ln2_b = zeros({d});
            b.w1 = w({d, f}); b.b1 = zeros({f});
            b.w2 = w({f, d}); b.b2 = zeros({d});
            m.blocks.push_back(std::move(b));
        }
        m.head = w({d, cfg.vocab});
        return m;
    }

    std::vector<std::pair<std::string, Tensor>> named_params() {
        std::vector<std::pair<std::string, Tensor>> ps;
        ps.emplace_back("tok_emb", tok_emb);
        ps.emplace_back("pos_emb", pos_emb);
        for (size_t l = 0; l < blocks.size(); l++) {
            std::string p = "blk" + std::to_string(l) + ".";
            Block& b = blocks[l];
            ps.emplace_back(p + "ln1.g", b.ln1_g); ps.emplace_back(p + "ln1.b", b.ln1_b);
            ps.emplace_back(p + "q.w", b.wq); ps.emplace_back(p + "q.b", b.bq);
            ps.emplace_back(p + "k.w", b.wk); ps.emplace_back(p + "k.b", b.bk);
            ps.emplace_back(p + "v.w", b.wv); ps.emplace_back(p + "v.b", b.bv);
            ps.emplace_back(p + "o.w", b.wo); ps.emplace_back(p + "o.b", b.bo);
            ps.emplace_back(p + "ln2.g", b.ln2_g); ps.emplace_back(p + "ln2.b", b.ln2_b);
            ps.emplace_back(p + "ff1.w", b.w1); ps.emplace_back(p + "ff1.b", b.b1);
            ps.emplace_back(p + "ff2.w", b.w2); ps.emplace_back(p + "ff2.b", b.b2);
        }
        ps.emplace_back("head.w", head);
        return ps;
    }

    std::vector<Tensor> params() {
        std::vector<Tensor> ps;
        for (auto& [n, t] : named_params()) ps.push_back(t);
        return ps;
    }

    int64_t param_count() {
        int64_t n = 0;
        for (auto& p : params()) n += p.numel();
        return n;
    }

    void freeze() {
        for (auto& p : params()) p.set_requires_grad(false);
    }

    // Final-layer hidden states for a batch; used by the training losses.
    Tensor forward_final(Tape* tape, const std::vector<int32_t>& ids, int64_t batch,
                         const std::vector<int32_t>& lens) const {
        return forward_impl(tape, ids, batch, lens, nullptr);
    }

    // All L+1 layer states: out shape (B, L+1, T, D). Inference only.
    Tensor forward_stacks(const std::vector<int32_t>& ids, int64_t batch,
                          const std::vector<int32_t>& lens) const {
        int64_t t = cfg.context, d = cfg.dim;
        Tensor stacks = Tensor::zeros({batch, cfg.layers + 1, t, d});
        forward_impl(nullptr, ids, batch, lens, &stacks);
        return stacks;
    }

    LayerStack forward_collect(const TokenSequence& seq) const {
        check(static_cast<int64_t>(seq.ids.size()) == cfg.context,
              "forward_collect: sequence length differs from model context");
        Tensor stacks = forward_stacks(seq.ids, 1, {seq.valid_len});
        LayerStack ls;
        ls.states = stacks.reshaped({cfg.layers + 1, cfg.context, cfg.dim});
        ls.valid_len = seq.valid_len;
        return ls;
    }

  private:
    // Copies (B,T,D) activations into stacks[:, layer_index] when collecting.
    static void capture(Tensor* stacks, const Tensor& x, int64_t layer_index) {
        if (!stacks) return;
        int64_t b = x.dim(0), t = x.dim(1), d = x.dim(2);
        int64_t layers1 = stacks->dim(1);
        const float* px = x.data();
        float* ps = stacks->data();
        for (int64_t bi = 0; bi < b; bi++)
            std::copy(px + bi * t * d, px + (bi + 1) * t * d,
                      ps + (bi * layers1 + layer_index) * t * d);
    }

    Tensor forward_impl(Tape* tape, const std::vector<int32_t>& ids, int64_t batch,
                        const std::vector<int32_t>& lens, Tensor* stacks) const {
        check(static_cast<int64_t>(ids.size()) == batch * cfg.context,
              "encoder forward: ids size mismatch");
        check(static_cast<int64_t>(lens.size()) == batch, "encoder forward: lens size mismatch");
        for (int32_t id : ids)
            check(id >= 0 && id < cfg.vocab, "encoder forward: token id outside vocabulary");
        int64_t t = cfg.context;
        Tensor x = embedding(tape, tok_emb, ids, {batch, t});
        x = add(tape, x, pos_emb);
        capture(stacks, x, 0);
        AttnMask mask = cfg.kind == EncoderKind::Causal ? AttnMask::Causal : AttnMask::KeyLens;
        for (size_t l = 0; l < blocks.size(); l++) {
            const Block& b = blocks[l];
            Tensor h = layer_norm(tape, x, b.ln1_g, b.ln1_b);
            Tensor q = add(tape, linear(tape, h, b.wq), b.bq);
            Tensor k = add(tape, linear(tape, h, b.wk), b.bk);
            Tensor v = add(tape, linear(tape, h, b.wv), b.bv);
            Tensor a = attention(tape, q, k, v, cfg.heads, mask, lens);
            x = add(tape, x, add(tape, linear(tape, a, b.wo), b.bo));
            Tensor h2 = layer_norm(tape, x, b.ln2_g, b.ln2_b);
            Tensor f = silu(tape, add(tape, linear(tape, h2, b.w1), b.b1));
            x = add(tape, x, add(tape, linear(tape, f, b.w2), b.b2));
            capture(stacks, x, static_cast<int64_t>(l) + 1);
        }
        return x;
    }
};

// Next-token cross-entropy over valid positions (predicting ids[p+1] from
// position p, up to and including the EOS prediction).
inline Tensor causal_lm_loss(Tape* tape, const TextEncoder& m, const std::vector<int32_t>& ids,
                             int64_t batch, const std::vector<int32_t>& lens) {
    check(m.cfg.kind == EncoderKind::Causal, "causal_lm_loss: model is not causal");
    int64_t t = m.cfg.context;
    Tensor x = m.forward_final(tape, ids, batch, lens);
    Tensor logits = linear(tape, x, m.head);
    logits = reshape(tape, logits, {batch * t, m.cfg.vocab});
    std::vector<int32_t> targets(static_cast<size_t>(batch * t), -1);
    for (int64_t b = 0; b < batch; b++)
        for (int64_t p = 0; p + 1 < lens[b]; p++)
            targets[static_cast<size_t>(b * t + p)] = ids[static_cast<size_t>(b * t + p + 1)];
    return cross_entropy(tape, logits, targets, -1);
}

// Draws the masked-LM positions: each word position (1..len-2, never
// BOS/EOS/PAD) is selected independently with probability mask_rate.
// Returns a flat (batch * context) flag vector.
inline std::vector<uint8_t> sample_mask_positions(Rng& rng, int64_t batch, int64_t context,
                                                  const std::vector<int32_t>& lens,
                                                  float mask_rate) {
    check(mask_rate > 0.0f && mask_rate < 1.0f, "mask_rate must be in (0,1)");
    std::vector<uint8_t> flags(static_cast<size_t>(batch * context), 0);
    for (int64_t b = 0; b < batch; b++)
        for (int64_t p = 1; p + 1 < lens[static_cast<size_t>(b)]; p++)
            if (rng.uniform() < mask_rate) flags[static_cast<size_t>(b * context + p)] = 1;
    return flags;
}

// Masked-prediction loss: word positions are independently masked at
// mask_rate, replaced by MASK in the input; cross-entropy is computed at
// masked positions only. Returns an undefined Tensor when the draw masked
// nothing (that batch contributes zero loss).
inline Tensor masked_lm_loss(Tape* tape, const TextEncoder& m, const std::vector<int32_t>& ids,
                             int64_t batch, const std::vector<int32_t>& lens, float mask_rate,
                             Rng& mask_rng) {
    check(m.cfg.kind == EncoderKind::Bidirectional, "masked_lm_loss: model is not bidirectional");
    int64_t t = m.cfg.context;
    std::vector<uint8_t> flags = sample_mask_positions(mask_rng, batch, t, lens, mask_rate);
    std::vector<int32_t> masked_ids = ids;
    std::vector<int32_t> targets(static_cast<size_t>(batch * t), -1);
    int64_t n_masked = 0;
    for (int64_t i = 0; i < batch * t; i++) {
        if (!flags[static_cast<size_t>(i)]) continue;
        targets[static_cast<size_t>(i)] = ids[static_cast<size_t>(i)];
        masked_ids[static_cast<size_t>(i)] = Vocab::kMask;
        n_masked++;
    }
    if (n_masked == 0) return {};
    Tensor x = m.forward_final(tape, masked_ids, batch, lens);
    Tensor logits = linear(tape, x, m.head);
    logits = reshape(tape, logits, {batch * t, m.cfg.vocab});
    return cross_entropy(tape, logits, targets, -1);
}

struct EncoderTrainSchedule {
    int64_t steps = 2000;
    int64_t batch = 64;
    AdamWConfig opt{.lr = 3e-4f};
    float mask_rate = 0.15f;
};

struct EncoderTrainResult {
    TextEncoder model;
    std::vector<float> loss_curve;
};

namespace encdet {

struct TokenizedCorpus {
    std::vector<int32_t> ids;   // (N, ctx) flattened
    std::vector<int32_t> lens;  // (N)
    int64_t n = 0;
};

inline TokenizedCorpus tokenize_corpus(const std::vector<std::string>& captions,
                                       const Vocab& vocab, int64_t context) {
    if (captions.empty()) throw data_error("empty caption corpus");
    TokenizedCorpus tc;
    tc.n = static_cast<int64_t>(captions.size());
    tc.ids.reserve(static_cast<size_t>(tc.n * context));
    for (auto& c : captions) {
        TokenSequence seq = vocab.tokenize(c, static_cast<int32_t>(context));
        tc.ids.insert(tc.ids.end(), seq.ids.begin(), seq.ids.end());
        tc.lens.push_back(seq.valid_len);
    }
    return tc;
}

inline void gather_batch(const TokenizedCorpus& tc, int64_t context, Rng& rng, int64_t batch,
                         std::vector<int32_t>& ids, std::vector<int32_t>& lens) {
    ids.resize(static_cast<size_t>(batch * context));
    lens.resize(static_cast<size_t>(batch));
    for (int64_t b = 0; b < batch; b++) {
        int64_t i = static_cast<int64_t>(rng.below(static_cast<uint64_t>(tc.n)));
        std::copy(tc.ids.begin() + i * context, tc.ids.begin() + (i + 1) * context,
                  ids.begin() + b * context);
        lens[static_cast<size_t>(b)] = tc.lens[static_cast<size_t>(i)];
    }
}

}  // namespace encdet

inline EncoderTrainResult train_text_encoder(const std::vector<std::string>& corpus,
                                             const EncoderConfig& cfg,
                                             const Vocab& vocab,
                                             const EncoderTrainSchedule& sched, uint64_t seed) {
    check(cfg.vocab == vocab.size(), "encoder config vocabulary size mismatch");
    encdet::TokenizedCorpus tc = encdet::tokenize_corpus(corpus, vocab, cfg.context);
    EncoderTrainResult res{TextEncoder::init(cfg, seed), {}};
    AdamW opt(res.model.params(), sched.opt);
    Rng batch_rng = substream(seed, "encoder-batch");
    Rng mask_rng = substream(seed, "encoder-mask");
    std::vector<int32_t> ids, lens;
    for (int64_t step = 0; step < sched.steps; step++) {
        encdet::gather_batch(tc, cfg.context, batch_rng, sched.batch, ids, lens);
        Tape tape;
        Tensor loss;
        if (cfg.kind == EncoderKind::Causal)
            loss = causal_lm_loss(&tape, res.model, ids, sched.batch, lens);
        else
            loss = masked_lm_loss(&tape, res.model, ids, sched.batch, lens, sched.mask_rate,
                                  mask_rng);
        if (!loss.defined()) {
            res.loss_curve.push_back(0.0f);
            continue;
        }
        res.loss_curve.push_back(loss.item());
        tape.backward(loss);
        opt.step();
        opt.zero_grad();
    }
    return res;
}

}  // namespace t2i
