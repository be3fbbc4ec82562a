// Tokenizer, vocabulary and text-encoder behavior.

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "doctest.h"
#include "t2i/encoder.hpp"
#include "t2i/io.hpp"
#include "t2i/vocab.hpp"

using t2i::EncoderConfig;
using t2i::EncoderKind;
using t2i::TextEncoder;
using t2i::TokenSequence;
using t2i::Vocab;

namespace {

Vocab test_vocab() {
    return Vocab::make({"red", "green", "blue", "circle", "square", "triangle", "a", "on", "the",
                        "left", "right", "small", "large", "black", "white", "background"});
}

EncoderConfig small_cfg(EncoderKind kind, const Vocab& v) {
    EncoderConfig cfg;
    cfg.kind = kind;
    cfg.layers = 2;
    cfg.dim = 32;
    cfg.heads = 4;
    cfg.context = 16;
    cfg.vocab = v.size();
    return cfg;
}

}  // namespace

TEST_CASE("tokenize: empty caption") {
    Vocab v = test_vocab();
    TokenSequence s = v.tokenize("", 8);
    CHECK(s.ids[0] == Vocab::kBos);
    CHECK(s.ids[1] == Vocab::kEos);
    for (size_t i = 2; i < 8; i++) CHECK(s.ids[i] == Vocab::kPad);
    CHECK(s.valid_len == 2);
    CHECK(s.valid_at(0));
    CHECK(s.valid_at(1));
    CHECK_FALSE(s.valid_at(2));
}

TEST_CASE("tokenize: words in order") {
    Vocab v = test_vocab();
    TokenSequence s = v.tokenize("red circle", 8);
    CHECK(s.ids[0] == Vocab::kBos);
    CHECK(s.ids[1] == v.id("red"));
    CHECK(s.ids[2] == v.id("circle"));
    CHECK(s.ids[3] == Vocab::kEos);
    CHECK(s.ids[4] == Vocab::kPad);
    CHECK(s.valid_len == 4);
    CHECK(v.detokenize(s) == "red circle");
}

TEST_CASE("tokenize: errors") {
    Vocab v = test_vocab();
    CHECK_THROWS_WITH_AS(v.tokenize("red wombat", 8), doctest::Contains("wombat"),
                         t2i::vocab_error);
    // context-1 words overflows (limit is context-2)
    std::string long_cap = "red";
    for (int i = 0; i < 6; i++) long_cap += " red";  // 7 words, context 8
    CHECK_THROWS_AS(v.tokenize(long_cap, 8), t2i::length_error);
    // exactly context-2 words fits
    std::string fit_cap = "red";
    for (int i = 0; i < 5; i++) fit_cap += " red";  // 6 words
    CHECK(v.tokenize(fit_cap, 8).valid_len == 8);
}

TEST_CASE("vocab: round trip and reserved ids") {
    Vocab v = test_vocab();
    CHECK(v.id("<pad>") == 0);
    CHECK(v.id("<bos>") == 1);
    CHECK(v.id("<eos>") == 2);
    CHECK(v.id("<mask>") == 3);
    CHECK(v.id("<null>") == 4);
    for (int32_t i = 0; i < v.size(); i++) CHECK(v.id(v.token(i)) == i);
    CHECK_THROWS_AS(v.token(v.size()), t2i::index_error);
}

TEST_CASE("vocab: file round trip") {
    Vocab v = test_vocab();
    std::string path = (std::filesystem::temp_directory_path() / "t2i_vocab_test.txt").string();
    v.save(path);
    Vocab w = Vocab::load(path);
    REQUIRE(w.size() == v.size());
    for (int32_t i = 0; i < v.size(); i++) CHECK(w.token(i) == v.token(i));
    std::remove(path.c_str());
}

TEST_CASE("forward_collect: stack shape and finiteness") {
    Vocab v = test_vocab();
    EncoderConfig cfg = small_cfg(EncoderKind::Causal, v);
    TextEncoder m = TextEncoder::init(cfg, 1);
    t2i::LayerStack ls = m.forward_collect(v.tokenize("red circle on the left", 16));
    CHECK(ls.states.shape() == t2i::Shape{cfg.layers + 1, cfg.context, cfg.dim});
    for (int64_t i = 0; i < ls.states.numel(); i++) CHECK(std::isfinite(ls.states.data()[i]));
    CHECK(ls.valid_len == 7);
}

TEST_CASE("causal encoder: prefix states bit-invariant to suffix edits") {
    Vocab v = test_vocab();
    EncoderConfig cfg = small_cfg(EncoderKind::Causal, v);
    TextEncoder m = TextEncoder::init(cfg, 2);
    TokenSequence a = v.tokenize("red circle on the left", 16);
    TokenSequence b = a;
    b.ids[5] = v.id("right");  // mutate the last word
    t2i::LayerStack sa = m.forward_collect(a);
    t2i::LayerStack sb = m.forward_collect(b);
    int64_t t = cfg.context, d = cfg.dim;
    for (int64_t l = 0; l <= cfg.layers; l++)
        for (int64_t p = 0; p < 5; p++)  // positions before the edit
            for (int64_t c = 0; c < d; c++) {
                CHECK(sa.states.data()[(l * t + p) * d + c] == sb.states.data()[(l * t + p) * d + c]);
            }
    // The edited position differs beyond the embedding layer.
    bool differs = false;
    for (int64_t c = 0; c < d; c++)
        differs |= sa.states.data()[(1 * t + 5) * d + c] != sb.states.data()[(1 * t + 5) * d + c];
    CHECK(differs);
}

TEST_CASE("bidirectional encoder: later tokens influence earlier states") {
    Vocab v = test_vocab();
    EncoderConfig cfg = small_cfg(EncoderKind::Bidirectional, v);
    TextEncoder m = TextEncoder::init(cfg, 3);
    TokenSequence a = v.tokenize("red circle", 16);
    TokenSequence b = a;
    b.ids[2] = v.id("square");  // second word
    t2i::LayerStack sa = m.forward_collect(a);
    t2i::LayerStack sb = m.forward_collect(b);
    int64_t t = cfg.context, d = cfg.dim;
    bool changed = false;
    for (int64_t c = 0; c < d; c++)
        changed |= sa.states.data()[(1 * t + 1) * d + c] != sb.states.data()[(1 * t + 1) * d + c];
    CHECK(changed);
}

TEST_CASE("encoder init determinism") {
    Vocab v = test_vocab();
    EncoderConfig cfg = small_cfg(EncoderKind::Causal, v);
    TextEncoder a = TextEncoder::init(cfg, 7);
    TextEncoder b = TextEncoder::init(cfg, 7);
    auto pa = a.params(), pb = b.params();
    REQUIRE(pa.size() == pb.size());
    for (size_t i = 0; i < pa.size(); i++)
        for (int64_t j = 0; j < pa[i].numel(); j++) CHECK(pa[i].data()[j] == pb[i].data()[j]);
}

TEST_CASE("causal training: step-0 loss near ln V and memorization") {
    Vocab v = test_vocab();
    EncoderConfig cfg = small_cfg(EncoderKind::Causal, v);
    std::vector<std::string> corpus = {"red circle on the left"};
    t2i::EncoderTrainSchedule sched;
    sched.steps = 500;
    sched.batch = 8;
    t2i::EncoderTrainResult res = t2i::train_text_encoder(corpus, cfg, v, sched, 11);
    float ln_v = std::log(static_cast<float>(v.size()));
    CHECK(res.loss_curve.front() == doctest::Approx(ln_v).epsilon(0.10));
    CHECK(res.loss_curve.back() < 0.1f);
}

TEST_CASE("causal training: zero learning rate freezes the loss") {
    Vocab v = test_vocab();
    EncoderConfig cfg = small_cfg(EncoderKind::Causal, v);
    std::vector<std::string> corpus = {"red circle on the left"};
    t2i::EncoderTrainSchedule sched;
    sched.steps = 5;
    sched.batch = 4;
    sched.opt.lr = 0.0f;
    t2i::EncoderTrainResult res = t2i::train_text_encoder(corpus, cfg, v, sched, 11);
    for (float l : res.loss_curve) CHECK(l == res.loss_curve[0]);
}

TEST_CASE("masked training: memorization and empty-mask semantics") {
    Vocab v = test_vocab();
    EncoderConfig cfg = small_cfg(EncoderKind::Bidirectional, v);
    std::vector<std::string> corpus = {"red circle on the left"};
    t2i::EncoderTrainSchedule sched;
    sched.steps = 1000;
    sched.batch = 8;
    t2i::EncoderTrainResult res = t2i::train_text_encoder(corpus, cfg, v, sched, 13);
    // Average the tail: individual draws vary with which tokens are masked.
    float tail = 0.0f;
    for (size_t i = res.loss_curve.size() - 50; i < res.loss_curve.size(); i++)
        tail += res.loss_curve[i];
    tail /= 50.0f;
    CHECK(tail < 0.2f);

    // A sample with no maskable positions contributes nothing: the empty
    // caption has no word positions, so a batch of them yields no loss.
    TextEncoder m = TextEncoder::init(cfg, 5);
    TokenSequence empty = v.tokenize("", 16);
    std::vector<int32_t> ids(empty.ids.begin(), empty.ids.end());
    t2i::Rng rng(1);
    t2i::Tape tape;
    t2i::Tensor loss = t2i::masked_lm_loss(&tape, m, ids, 1, {empty.valid_len}, 0.15f, rng);
    CHECK_FALSE(loss.defined());
}

TEST_CASE("masked fraction matches the rate within 3 sigma") {
    // Count masked positions over >= 10k maskable positions, drawn by the
    // same sampler the training loss uses.
    Vocab v = test_vocab();
    std::string cap = "red circle on the left";  // 5 words
    TokenSequence seq = v.tokenize(cap, 16);
    const int64_t batch = 128, reps = 16;  // 128*16*5 = 10240 maskable positions
    std::vector<int32_t> lens(batch, seq.valid_len);
    t2i::Rng rng(17);
    int64_t masked = 0, total = 0;
    const float rate = 0.15f;
    for (int64_t rep = 0; rep < reps; rep++) {
        std::vector<uint8_t> flags = t2i::sample_mask_positions(rng, batch, 16, lens, rate);
        for (int64_t b = 0; b < batch; b++) {
            for (int64_t p = 1; p + 1 < seq.valid_len; p++) {
                total++;
                masked += flags[static_cast<size_t>(b * 16 + p)];
            }
            // Special positions are never masked.
            CHECK(flags[static_cast<size_t>(b * 16)] == 0);
            CHECK(flags[static_cast<size_t>(b * 16 + seq.valid_len - 1)] == 0);
        }
    }
    CHECK(total >= 10000);
    double mean = rate * static_cast<double>(total);
    double sigma = std::sqrt(static_cast<double>(total) * rate * (1.0 - rate));
    CHECK(std::fabs(static_cast<double>(masked) - mean) <= 3.0 * sigma);
}

TEST_CASE("scaling axis: both encoder sizes train stably") {
    Vocab v = test_vocab();
    std::vector<std::string> corpus = {"red circle on the left", "green square on the right",
                                       "blue triangle", "large black circle"};
    for (auto [layers, dim] : {std::pair<int64_t, int64_t>{2, 32}, {4, 64}}) {
        EncoderConfig cfg;
        cfg.kind = EncoderKind::Causal;
        cfg.layers = layers;
        cfg.dim = dim;
        cfg.heads = 4;
        cfg.context = 16;
        cfg.vocab = v.size();
        t2i::EncoderTrainSchedule sched;
        sched.steps = 60;
        sched.batch = 8;
        t2i::EncoderTrainResult res = t2i::train_text_encoder(corpus, cfg, v, sched, 19);
        for (float l : res.loss_curve) CHECK(std::isfinite(l));
        CHECK(res.loss_curve.back() < res.loss_curve.front());
    }
}

TEST_CASE("encoder checkpoint round trip") {
    Vocab v = test_vocab();
    EncoderConfig cfg = small_cfg(EncoderKind::Causal, v);
    TextEncoder m = TextEncoder::init(cfg, 23);
    t2i::Checkpoint ck;
    ck.config_text = cfg.digest();
    for (auto& [n, t] : m.named_params()) ck.tensors.emplace_back(n, t);
    auto dir = std::filesystem::temp_directory_path();
    std::string p1 = (dir / "t2i_enc_a.ckpt").string();
    std::string p2 = (dir / "t2i_enc_b.ckpt").string();
    ck.save(p1);
    t2i::Checkpoint lk = t2i::Checkpoint::load(p1);
    CHECK(lk.config_text == cfg.digest());
    lk.save(p2);
    // Load-then-save reproduces bytes exactly.
    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), {});
    std::string b2((std::istreambuf_iterator<char>(f2)), {});
    CHECK(b1 == b2);
    // Corruption is refused.
    std::fstream fc(p1, std::ios::binary | std::ios::in | std::ios::out);
    fc.seekp(32);
    char z = 0x5a;
    fc.write(&z, 1);
    fc.close();
    CHECK_THROWS_AS(t2i::Checkpoint::load(p1), t2i::error);
    std::remove(p1.c_str());
    std::remove(p2.c_str());
}
