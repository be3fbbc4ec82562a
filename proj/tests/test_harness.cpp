#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <set>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "doctest.h"
#include "t2i/harness.hpp"

using t2i::RunConfig;
using t2i::Tensor;

namespace {

const char* kSkillHeader =
    "attribute,scene,spatial,counting,comparison,differentiation,negation,universality";

std::string tmpdir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("t2i_harness_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p.string();
}

bool file_exists(const std::string& path) { return std::filesystem::exists(path); }

int count_occurrences(const std::string& hay, const std::string& needle) {
    int n = 0;
    for (size_t p = hay.find(needle); p != std::string::npos;
         p = hay.find(needle, p + needle.size()))
        n++;
    return n;
}

// Small enough that every driver runs in well under a second per call.
RunConfig tiny_config() {
    RunConfig c;
    c.enc_layers = 2;
    c.enc_dim = 16;
    c.enc_heads = 2;
    c.enc_ff_mult = 2;
    c.enc_context = 32;
    c.enc_steps = 12;
    c.enc_batch = 8;
    c.strategy = "mean";
    c.unet_base = 4;
    c.unet_mults = {1, 2};
    c.unet_attn = {16};
    c.unet_heads = 2;
    c.unet_cond = 8;
    c.unet_time = 16;
    c.unet_groups = 2;
    c.sched_steps = 40;
    c.train_steps = 10;
    c.train_batch = 4;
    c.guidance = 1.5f;
    c.sample_steps = 5;
    c.eval_batch = 8;
    c.seed = 11;
    return c;
}

struct HarnessWorld {
    RunConfig cfg;
    t2i::Corpus corpus;
    t2i::EncoderRunResult enc_run;
};

const HarnessWorld& world() {
    static HarnessWorld w = [] {
        HarnessWorld h;
        h.cfg = tiny_config();
        t2i::Rng rng = t2i::substream(5, "corpus");
        h.corpus = t2i::build_corpus(16, rng, 8);
        h.enc_run = t2i::run_train_encoder(h.cfg, h.corpus, tmpdir("enc_fixture"));
        return h;
    }();
    return w;
}

const t2i::DiffusionRunResult& trained() {
    static t2i::DiffusionRunResult r = t2i::run_train_diffusion(
        world().cfg, world().corpus, world().enc_run.enc, nullptr, tmpdir("diff_fixture"));
    return r;
}

}  // namespace

TEST_CASE("run config: defaults serialize and round trip") {
    RunConfig c;
    std::string text = c.serialize();
    RunConfig d = RunConfig::parse(text);
    CHECK(d == c);
    CHECK(d.digest() == c.digest());
    CHECK(c.digest().size() == 16);
    CHECK(RunConfig::parse("") == c);

    // The digest covers every field.
    RunConfig e = c;
    e.seed = 2;
    CHECK(e.digest() != c.digest());
    RunConfig f = c;
    f.train_lr = 1.001e-4f;
    CHECK(f.digest() != c.digest());

    // Key order in the file is fixed.
    CHECK(text.find("encoder.kind") == 0);
    CHECK(text.find("seed = 1\n") != std::string::npos);
}

TEST_CASE("run config: randomized round trips preserve every field") {
    t2i::Rng rng(321);
    const char* strategies[] = {"last", "mean", "normmean", "normmean-centeronly", "layer3"};
    const char* pools[] = {"none", "mean", "lasttoken"};
    const char* kinds[] = {"causal", "bidirectional"};
    for (int iter = 0; iter < 50; iter++) {
        RunConfig c;
        c.encoder_kind = kinds[rng.below(2)];
        c.enc_layers = 1 + static_cast<int64_t>(rng.below(6));
        c.enc_heads = 1 + static_cast<int64_t>(rng.below(4));
        c.enc_dim = c.enc_heads * (1 + static_cast<int64_t>(rng.below(8)));
        c.enc_ff_mult = 1 + static_cast<int64_t>(rng.below(4));
        c.enc_context = 3 + static_cast<int64_t>(rng.below(40));
        c.enc_steps = 1 + static_cast<int64_t>(rng.below(5000));
        c.enc_lr = rng.uniform(1e-6f, 1e-2f);
        c.enc_mask_rate = rng.uniform(0.01f, 0.99f);
        c.strategy = strategies[rng.below(5)];
        c.pool = pools[rng.below(3)];
        c.unet_mults = {1, 1 + static_cast<int64_t>(rng.below(4))};
        c.beta_start = rng.uniform(1e-5f, 1e-3f);
        c.beta_end = rng.uniform(0.01f, 0.5f);
        c.train_lr = rng.uniform(1e-6f, 1e-2f);
        c.drop_prob = rng.uniform();
        c.guidance = rng.uniform(0.0f, 30.0f);
        c.benchmark = iter % 2 ? "runs/corpus.txt" : "";
        c.seed = rng.u64();
        RunConfig d = RunConfig::parse(c.serialize());
        CHECK(d == c);
        CHECK(d.digest() == c.digest());
        CHECK(d.serialize() == c.serialize());
    }
}

TEST_CASE("run config: float fields survive the text form exactly") {
    for (float v : {0.1f, 3e-4f, 1.0f / 3.0f, 6.1035156e-05f, 0.6999999881f, 1e-30f}) {
        RunConfig c;
        c.train_lr = v;
        RunConfig d = RunConfig::parse(c.serialize());
        CHECK(d.train_lr == v);
    }
}

TEST_CASE("run config: parser rejects malformed input") {
    CHECK_THROWS_AS(RunConfig::parse("no equals sign here"), t2i::config_error);
    CHECK_THROWS_AS(RunConfig::parse("bogus.key = 1"), t2i::config_error);
    CHECK_THROWS_AS(RunConfig::parse("seed = 1\nseed = 2"), t2i::config_error);
    CHECK_THROWS_AS(RunConfig::parse("= 3"), t2i::config_error);
    CHECK_THROWS_AS(RunConfig::parse("seed = banana"), t2i::config_error);
    CHECK_THROWS_AS(RunConfig::parse("seed = -4"), t2i::config_error);
    CHECK_THROWS_AS(RunConfig::parse("train.lr = fast"), t2i::config_error);
    CHECK_THROWS_AS(RunConfig::parse("unet.mults ="), t2i::config_error);
    CHECK_THROWS_AS(RunConfig::parse("unet.mults = 1,x"), t2i::config_error);
    CHECK_THROWS_AS(RunConfig::parse("encoder.layers = 99999999999999999999"),
                    t2i::config_error);

    // Comments, blank lines, and reordering are fine.
    RunConfig c = RunConfig::parse("# comment\n\n  seed = 9\nencoder.dim = 32\n");
    CHECK(c.seed == 9);
    CHECK(c.enc_dim == 32);
}

TEST_CASE("run config: validation catches semantic errors") {
    auto bad = [](auto&& mutate) {
        RunConfig c;
        mutate(c);
        CHECK_THROWS_AS(c.validate(), t2i::contract_error);
    };
    RunConfig ok;
    CHECK_NOTHROW(ok.validate());
    bad([](RunConfig& c) { c.encoder_kind = "gru"; });
    bad([](RunConfig& c) { c.pool = "max"; });
    bad([](RunConfig& c) { c.strategy = "layer5"; });  // four layers by default
    bad([](RunConfig& c) { c.strategy = "bogus"; });
    bad([](RunConfig& c) { c.enc_dim = 65; });  // not divisible by heads
    bad([](RunConfig& c) { c.enc_context = 2; });
    bad([](RunConfig& c) { c.enc_mask_rate = 1.0f; });
    bad([](RunConfig& c) { c.unet_groups = 3; });  // does not divide the channel counts
    bad([](RunConfig& c) { c.sched_steps = 1; });
    bad([](RunConfig& c) { c.beta_end = c.beta_start; });
    bad([](RunConfig& c) { c.beta_end = 1.5f; });
    bad([](RunConfig& c) { c.train_steps = 0; });
    bad([](RunConfig& c) { c.train_lr = 0.0f; });
    bad([](RunConfig& c) { c.weight_decay = -0.1f; });
    bad([](RunConfig& c) { c.drop_prob = 1.5f; });
    bad([](RunConfig& c) { c.guidance = -1.0f; });
    bad([](RunConfig& c) { c.sample_steps = c.sched_steps + 1; });
    bad([](RunConfig& c) { c.eval_batch = 0; });
}

TEST_CASE("run config: accessors mirror the module configs") {
    RunConfig c = tiny_config();
    t2i::EncoderConfig e = c.encoder_config(42);
    CHECK(e.layers == c.enc_layers);
    CHECK(e.dim == c.enc_dim);
    CHECK(e.vocab == 42);
    CHECK(e.kind == t2i::EncoderKind::Causal);

    c.pool = "mean";
    CHECK(c.extraction().pooled == t2i::ExtractionStrategy::Pool::Mean);
    CHECK(c.unet_config().pooled);
    c.pool = "lasttoken";
    CHECK(c.extraction().pooled == t2i::ExtractionStrategy::Pool::LastToken);
    c.pool = "none";
    CHECK(c.extraction().pooled == t2i::ExtractionStrategy::Pool::None);
    CHECK_FALSE(c.unet_config().pooled);

    t2i::UNetConfig u = c.unet_config();
    CHECK(u.image_size == t2i::SceneImage::kSide);
    CHECK(u.in_channels == 3);
    CHECK(u.base == 4);
    CHECK_NOTHROW(u.validate());

    t2i::NoiseSchedule s = c.noise_schedule();
    CHECK(s.t_diff == c.sched_steps);
    CHECK(c.diffusion_opt().lr == c.train_lr);
    CHECK(c.diffusion_opt().weight_decay == c.weight_decay);
}

TEST_CASE("file helpers: round trip and failure modes") {
    std::string dir = tmpdir("files");
    std::string path = dir + "/x.txt";
    t2i::write_text_file(path, "alpha\nbeta");
    CHECK(t2i::read_text_file(path) == "alpha\nbeta");
    CHECK_THROWS_AS(t2i::read_text_file(dir + "/missing.txt"), t2i::io_error);
    CHECK_THROWS_AS(t2i::write_text_file(dir + "/no/such/dir/x.txt", "y"), t2i::io_error);
    CHECK_NOTHROW(t2i::ensure_dir(dir + "/a/b/c"));
    CHECK(file_exists(dir + "/a/b/c"));
}

TEST_CASE("loss csv and kv files have the documented shapes") {
    CHECK(t2i::loss_csv({0.5f, 0.25f}) == "step,loss\n1,0.5\n2,0.25\n");
    std::string kv = t2i::kv_text({{"a", "1"}, {"b", "two words"}});
    CHECK(kv == "a = 1\nb = two words\n");
    auto parsed = t2i::parse_kv(kv, "test");
    CHECK(t2i::kv_find(parsed, "b", "test") == "two words");
    CHECK_THROWS_AS(t2i::kv_find(parsed, "zzz", "test"), t2i::data_error);
    CHECK_THROWS_AS(t2i::parse_kv("broken line", "test"), t2i::parse_error);
}

TEST_CASE("ppm bytes: header plus raw pixels") {
    t2i::SceneImage img;
    for (size_t i = 0; i < img.rgb.size(); i++) img.rgb[i] = static_cast<uint8_t>(i % 251);
    std::string ppm = t2i::ppm_bytes(img);
    CHECK(ppm.size() == 13 + 3072);
    CHECK(ppm.substr(0, 13) == "P6\n32 32\n255\n");
    CHECK(ppm[13] == 0);
    CHECK(static_cast<uint8_t>(ppm[13 + 252]) == 1);
}

TEST_CASE("pgm bytes: quantization with clipping") {
    Tensor m = Tensor::from({0.0f, 0.5f, 1.0f, 2.0f, -0.5f, 0.25f}, {2, 3});
    std::string pgm = t2i::pgm_bytes(m);
    CHECK(pgm.substr(0, 11) == "P5\n3 2\n255\n");
    REQUIRE(pgm.size() == 17);
    const auto* px = reinterpret_cast<const uint8_t*>(pgm.data() + 11);
    CHECK(px[0] == 0);
    CHECK(px[1] == 128);
    CHECK(px[2] == 255);
    CHECK(px[3] == 255);  // clipped high
    CHECK(px[4] == 0);    // clipped low
    CHECK(px[5] == 64);
    CHECK_THROWS_AS(t2i::pgm_bytes(Tensor::zeros({2, 2, 2})), t2i::contract_error);
}

TEST_CASE("svg builders emit one series element per input series") {
    std::vector<std::string> axes = t2i::skill_axis_labels();
    REQUIRE(axes.size() == 8);
    std::vector<double> a(8, 0.5), b(8, 0.9);
    std::string radar = t2i::svg_radar(axes, {{"first", a}, {"second", b}});
    CHECK(count_occurrences(radar, "class=\"series\"") == 2);
    CHECK(count_occurrences(radar, "class=\"ring\"") == 4);
    CHECK(radar.find("attribute") != std::string::npos);
    CHECK(radar.find("universality") != std::string::npos);
    CHECK(radar.find("first") != std::string::npos);
    CHECK_THROWS_AS(t2i::svg_radar({"x", "y"}, {}), t2i::contract_error);

    std::string line = t2i::svg_line("w", "score", {{"run", {{1.0, 0.2}, {2.0, 0.6}}},
                                                    {"other", {{1.0, 0.3}, {2.0, 0.4}}}});
    CHECK(count_occurrences(line, "<polyline") == 2);
    CHECK(line.find(">run</text>") != std::string::npos);
    CHECK_THROWS_AS(t2i::svg_line("x", "y", {}), t2i::contract_error);

    Tensor m = Tensor::zeros({4, 4});
    std::string sheet = t2i::svg_map_sheet({"rowA"}, {"c0", "c1"}, {{m, m}});
    CHECK(sheet.find("rowA") != std::string::npos);
    CHECK(sheet.find("c1") != std::string::npos);
    CHECK(count_occurrences(sheet, "<rect") >= 32);
}

TEST_CASE("encoder run: checkpoint round trips bit for bit") {
    const HarnessWorld& w = world();
    CHECK(w.enc_run.loss_curve.size() == static_cast<size_t>(w.cfg.enc_steps));
    CHECK(file_exists(w.enc_run.ckpt_path));
    std::string loss = t2i::read_text_file(
        std::filesystem::path(w.enc_run.ckpt_path).parent_path().string() +
        "/encoder_loss.csv");
    CHECK(loss.rfind("step,loss\n", 0) == 0);

    t2i::LoadedEncoder lo = t2i::load_encoder_ckpt(w.enc_run.ckpt_path);
    CHECK(lo.cfg == w.cfg);
    CHECK(lo.vocab->size() == w.enc_run.enc.vocab->size());
    auto got = lo.encoder->named_params();
    auto want = w.enc_run.enc.encoder->named_params();
    REQUIRE(got.size() == want.size());
    for (size_t i = 0; i < got.size(); i++) {
        CHECK(got[i].first == want[i].first);
        REQUIRE(got[i].second.numel() == want[i].second.numel());
        for (int64_t j = 0; j < got[i].second.numel(); j++)
            CHECK(got[i].second.data()[j] == want[i].second.data()[j]);
        CHECK_FALSE(got[i].second.requires_grad());
    }

    // A run asking for a different encoder shape is refused, naming both digests.
    RunConfig other = w.cfg;
    other.enc_dim = 32;
    try {
        t2i::require_encoder_match(other, lo);
        CHECK(false);
    } catch (const t2i::config_error& e) {
        std::string msg = e.what();
        CHECK(msg.find(lo.encoder->cfg.digest()) != std::string::npos);
        CHECK(msg.find(other.encoder_config(lo.vocab->size()).digest()) != std::string::npos);
    }
}

TEST_CASE("diffusion run: artifacts, meta, and checkpoint identity") {
    const t2i::DiffusionRunResult& r = trained();
    const HarnessWorld& w = world();
    CHECK(r.loss_curve.size() == static_cast<size_t>(w.cfg.train_steps));
    std::string dir = std::filesystem::path(r.ckpt_path).parent_path().string();
    CHECK(file_exists(dir + "/diffusion_loss.csv"));
    auto meta = t2i::parse_kv(t2i::read_text_file(dir + "/train_meta.txt"), "train_meta");
    CHECK(t2i::kv_find(meta, "config_digest", "meta") == w.cfg.digest());
    CHECK(t2i::kv_find(meta, "benchmark_digest", "meta") == t2i::benchmark_digest(w.corpus));
    CHECK(t2i::kv_find(meta, "cached_embeddings", "meta") == "no");
    CHECK(t2i::kv_find(meta, "final_loss", "meta") ==
          t2i::rundet::fmt_float(r.loss_curve.back()));

    // Load, compare parameters, and re-save: the bytes must not change.
    t2i::RunModel lo = t2i::load_run_ckpt(r.ckpt_path);
    CHECK(lo.cfg == w.cfg);
    auto got = lo.unet.named_params();
    auto want = r.model.unet.named_params();
    REQUIRE(got.size() == want.size());
    for (size_t i = 0; i < got.size(); i++)
        for (int64_t j = 0; j < got[i].second.numel(); j++)
            CHECK(got[i].second.data()[j] == want[i].second.data()[j]);
    for (int64_t j = 0; j < lo.projection.numel(); j++)
        CHECK(lo.projection.data()[j] == r.model.projection.data()[j]);
    CHECK(lo.projection.requires_grad());

    std::string resaved = tmpdir("resave") + "/model.ckpt";
    t2i::save_run_ckpt(resaved, lo);
    CHECK(t2i::read_text_file(resaved) == t2i::read_text_file(r.ckpt_path));

    // The loaded pipeline is ready to condition captions.
    t2i::CondBatch cb = lo.pipeline.batch(nullptr, {w.corpus.pairs[0].caption});
    CHECK(cb.tokens.dim(0) == 1);
    CHECK(cb.tokens.dim(2) == w.cfg.unet_cond);
}

TEST_CASE("cached embeddings do not change training or evaluation") {
    const HarnessWorld& w = world();
    std::vector<std::string> captions;
    for (auto& p : w.corpus.pairs) captions.push_back(p.caption);
    t2i::EmbeddingCache cache =
        t2i::EmbeddingCache::build(captions, *w.enc_run.enc.encoder, *w.enc_run.enc.vocab,
                                   w.cfg.extraction(), 5);
    t2i::DiffusionRunResult with = t2i::run_train_diffusion(w.cfg, w.corpus, w.enc_run.enc,
                                                            &cache, tmpdir("cached"));
    const t2i::DiffusionRunResult& without = trained();
    REQUIRE(with.loss_curve.size() == without.loss_curve.size());
    for (size_t i = 0; i < with.loss_curve.size(); i++)
        CHECK(std::abs(with.loss_curve[i] - without.loss_curve[i]) <= 1e-5f);

    std::vector<uint64_t> seeds = {1, 2};
    t2i::EvalOutcome ea = t2i::evaluate_model(with.model, w.corpus, 1.5f, seeds, 5, 8);
    t2i::EvalOutcome eb = t2i::evaluate_model(without.model, w.corpus, 1.5f, seeds, 5, 8);
    CHECK(t2i::prompt_csv(ea.pooled) == t2i::prompt_csv(eb.pooled));
    CHECK(t2i::aggregate_csv(ea.pooled) == t2i::aggregate_csv(eb.pooled));
}

TEST_CASE("evaluation: deterministic, pooled over seeds, vocabulary-screened") {
    const t2i::DiffusionRunResult& r = trained();
    const HarnessWorld& w = world();
    std::vector<uint64_t> seeds = {1, 2};
    t2i::EvalOutcome e1 = t2i::evaluate_model(r.model, w.corpus, 1.5f, seeds, 5, 8);
    t2i::EvalOutcome e2 = t2i::evaluate_model(r.model, w.corpus, 1.5f, seeds, 5, 8);
    CHECK(t2i::prompt_csv(e1.pooled) == t2i::prompt_csv(e2.pooled));
    for (size_t s = 0; s < seeds.size(); s++)
        CHECK(t2i::prompt_csv(e1.per_seed[s]) == t2i::prompt_csv(e2.per_seed[s]));

    // Chunking must not affect scores: conditioning and sampling run per
    // chunk with a chunk-indexed stream, so batch 3 and batch 8 disagree.
    // What must hold: the pooled score is the mean of the per-seed scores.
    REQUIRE(e1.per_seed.size() == 2);
    for (size_t i = 0; i < e1.pooled.prompt_scores.size(); i++) {
        double mean =
            (e1.per_seed[0].prompt_scores[i] + e1.per_seed[1].prompt_scores[i]) / 2.0;
        CHECK(e1.pooled.prompt_scores[i] == doctest::Approx(mean).epsilon(1e-12));
    }
    CHECK(e1.pooled.seeds == seeds);
    CHECK(e1.pooled.model == w.cfg.digest());
    CHECK(e1.guidance == 1.5f);

    CHECK_THROWS_AS(t2i::evaluate_model(r.model, w.corpus, 1.5f, {}, 5, 8),
                    t2i::config_error);

    t2i::Corpus tampered = w.corpus;
    tampered.held_out_captions[0] = "a zorp circle";
    try {
        t2i::evaluate_model(r.model, tampered, 1.5f, {1}, 5, 8);
        CHECK(false);
    } catch (const t2i::data_error& e) {
        CHECK(std::string(e.what()).find("zorp") != std::string::npos);
    }

    std::string dir = tmpdir("evalout");
    t2i::write_eval_outputs(dir, e1, w.cfg);
    CHECK(file_exists(dir + "/eval_seed1.csv"));
    CHECK(file_exists(dir + "/eval_seed2.csv"));
    CHECK(file_exists(dir + "/pooled.csv"));
    CHECK(file_exists(dir + "/radar.svg"));
    std::string agg = t2i::read_text_file(dir + "/aggregate.csv");
    CHECK(agg.rfind(std::string("metric,avg,") + kSkillHeader + "\n", 0) == 0);
    auto meta = t2i::parse_kv(t2i::read_text_file(dir + "/meta.txt"), "meta");
    CHECK(t2i::kv_find(meta, "benchmark_digest", "meta") == t2i::benchmark_digest(w.corpus));
    CHECK(t2i::kv_find(meta, "seeds", "meta") == "1,2");
    CHECK(t2i::read_text_file(dir + "/pooled.csv").rfind("prompt_id,skills,score\n", 0) == 0);
}

TEST_CASE("guidance sweep: dedup, two-point minimum, artifacts") {
    const t2i::DiffusionRunResult& r = trained();
    const HarnessWorld& w = world();
    std::string dir = tmpdir("sweepw");
    std::ostringstream warn;
    auto rows = t2i::sweep_guidance(r.model, w.corpus, {1.0f, 1.0f, 2.0f}, {1}, 5, 8, dir,
                                    &warn);
    CHECK(rows.size() == 2);
    CHECK(warn.str().find("duplicate") != std::string::npos);
    std::string csv = t2i::read_text_file(dir + "/guidance.csv");
    CHECK(csv.rfind(std::string("w,avg,") + kSkillHeader + "\n", 0) == 0);
    CHECK(count_occurrences(csv, "\n") == 3);
    CHECK(file_exists(dir + "/w1/pooled.csv"));
    CHECK(file_exists(dir + "/w2/pooled.csv"));
    CHECK(file_exists(dir + "/guidance.svg"));

    CHECK_THROWS_AS(t2i::sweep_guidance(r.model, w.corpus, {1.0f, 1.0f}, {1}, 5, 8,
                                        tmpdir("sweepw2"), nullptr),
                    t2i::config_error);
    CHECK_THROWS_AS(t2i::sweep_guidance(r.model, w.corpus, {}, {1}, 5, 8, tmpdir("sweepw3"),
                                        nullptr),
                    t2i::config_error);
}

TEST_CASE("layer sweep: trains each index once and reuses the final layer") {
    const HarnessWorld& w = world();
    RunConfig cfg = w.cfg;
    cfg.train_steps = 5;
    cfg.sample_steps = 4;
    std::string dir = tmpdir("sweepk");
    auto rows = t2i::sweep_layers(cfg, w.corpus, w.enc_run.enc, {0, 2}, {1}, dir);
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].label == "0");
    CHECK(rows[1].label == "2");
    CHECK(rows[2].label == "last");
    CHECK(rows[2].eval.pooled.aggregate == rows[1].eval.pooled.aggregate);
    CHECK(file_exists(dir + "/layer0/model.ckpt"));
    CHECK(file_exists(dir + "/layer2/eval/pooled.csv"));
    CHECK_FALSE(file_exists(dir + "/last"));
    std::string csv = t2i::read_text_file(dir + "/layers.csv");
    CHECK(csv.rfind(std::string("layer,avg,") + kSkillHeader + "\n", 0) == 0);
    CHECK(csv.find("\nlast,") != std::string::npos);

    CHECK_THROWS_AS(
        t2i::sweep_layers(cfg, w.corpus, w.enc_run.enc, {5}, {1}, tmpdir("sweepk2")),
        t2i::config_error);

    // Without the final layer in the list, a separate last-layer model trains.
    std::string dir3 = tmpdir("sweepk3");
    auto rows3 = t2i::sweep_layers(cfg, w.corpus, w.enc_run.enc, {0}, {1}, dir3);
    REQUIRE(rows3.size() == 2);
    CHECK(rows3[1].label == "last");
    CHECK(file_exists(dir3 + "/last/model.ckpt"));
}

TEST_CASE("strategy comparison: rows, pooled variants, per-prompt diffs") {
    const HarnessWorld& w = world();
    RunConfig cfg = w.cfg;
    cfg.train_steps = 5;
    cfg.sample_steps = 4;
    std::string dir = tmpdir("strat");
    std::ostringstream log;
    auto rows = t2i::compare_strategies(cfg, w.corpus, w.enc_run.enc,
                                        {"last", "mean", "last"}, false, {1}, dir, &log);
    REQUIRE(rows.size() == 2);
    CHECK(log.str().find("duplicate strategy") != std::string::npos);
    CHECK(rows[0].tag == "last");
    CHECK(rows[1].tag == "mean");
    std::string csv = t2i::read_text_file(dir + "/strategies.csv");
    CHECK(csv.rfind(std::string("strategy,pool,avg,") + kSkillHeader + "\n", 0) == 0);
    std::string diffs = t2i::read_text_file(dir + "/prompt_diffs.csv");
    CHECK(diffs.rfind("prompt_id,skills,last,mean,d_mean\n", 0) == 0);
    CHECK(count_occurrences(diffs, "\n") ==
          static_cast<int>(w.corpus.held_out.size()) + 1);
    std::string radar = t2i::read_text_file(dir + "/radar.svg");
    CHECK(count_occurrences(radar, "class=\"series\"") == 2);

    std::string dir2 = tmpdir("strat2");
    auto rows2 = t2i::compare_strategies(cfg, w.corpus, w.enc_run.enc, {"last"}, true, {1},
                                         dir2);
    REQUIRE(rows2.size() == 2);
    CHECK(rows2[0].pool == "none");
    CHECK(rows2[1].pool == "mean");
    CHECK(file_exists(dir2 + "/last/model.ckpt"));
    CHECK(file_exists(dir2 + "/last-pooled/model.ckpt"));

    CHECK_THROWS_AS(
        t2i::compare_strategies(cfg, w.corpus, w.enc_run.enc, {}, false, {1}, tmpdir("strat3")),
        t2i::config_error);
    CHECK_THROWS_AS(t2i::compare_strategies(cfg, w.corpus, w.enc_run.enc, {"layer9"}, false,
                                            {1}, tmpdir("strat4")),
                    t2i::contract_error);
}

TEST_CASE("heatmap run: traced token, captured timesteps, image artifacts") {
    const t2i::DiffusionRunResult& r = trained();
    const HarnessWorld& w = world();
    std::string caption = w.corpus.pairs[0].caption;
    std::istringstream is(caption);
    std::string first_word;
    is >> first_word;
    std::string dir = tmpdir("heatmap");
    t2i::heatmap_run(r.model, caption, first_word, {4, 1, 4}, 3, dir);
    CHECK(file_exists(dir + "/sample.ppm"));
    std::string ppm = t2i::read_text_file(dir + "/sample.ppm");
    CHECK(ppm.rfind("P6\n32 32\n255\n", 0) == 0);
    CHECK(file_exists(dir + "/heatmap.svg"));
    auto meta = t2i::parse_kv(t2i::read_text_file(dir + "/meta.txt"), "meta");
    CHECK(t2i::kv_find(meta, "token_index", "meta") == "1");
    CHECK(t2i::kv_find(meta, "timesteps", "meta") == "4,1");
    int pgms = 0;
    for (auto& entry : std::filesystem::directory_iterator(dir))
        if (entry.path().extension() == ".pgm") pgms++;
    CHECK(pgms >= 2);
    CHECK(pgms % 2 == 0);  // one map per (site, timestep)

    CHECK_THROWS_AS(t2i::heatmap_run(r.model, caption, "zorp", {4}, 3, tmpdir("hm2")),
                    t2i::data_error);
    CHECK_THROWS_AS(t2i::heatmap_run(r.model, caption, first_word, {99}, 3, tmpdir("hm3")),
                    t2i::config_error);
    CHECK_THROWS_AS(t2i::heatmap_run(r.model, caption, first_word, {}, 3, tmpdir("hm4")),
                    t2i::config_error);
}

TEST_CASE("report: merges runs, flags config drift, rejects benchmark drift") {
    const t2i::DiffusionRunResult& r = trained();
    const HarnessWorld& w = world();
    t2i::EvalOutcome ev = t2i::evaluate_model(r.model, w.corpus, 1.5f, {1}, 5, 8);
    std::string base = tmpdir("report_in");
    RunConfig cfg_a = w.cfg;
    RunConfig cfg_b = w.cfg;
    cfg_b.strategy = "last";  // different digest, same benchmark
    t2i::write_eval_outputs(base + "/runA", ev, cfg_a);
    t2i::write_eval_outputs(base + "/runB", ev, cfg_b);

    std::string out = tmpdir("report_out");
    t2i::report_runs({base + "/runA", base + "/runB"}, out);
    std::string csv = t2i::read_text_file(out + "/summary.csv");
    CHECK(csv.rfind(std::string("run,strategy,pool,guidance,avg,") + kSkillHeader + "\n", 0) ==
          0);
    CHECK(count_occurrences(csv, "\n") == 3);
    CHECK(csv.find("runA,") != std::string::npos);
    std::string md = t2i::read_text_file(out + "/report.md");
    CHECK(md.find("Flag") != std::string::npos);  // config digests differ
    std::string radar = t2i::read_text_file(out + "/radar.svg");
    CHECK(count_occurrences(radar, "class=\"series\"") == 2);

    // Same config twice: no flag.
    std::string out2 = tmpdir("report_out2");
    t2i::write_eval_outputs(base + "/runC", ev, cfg_a);
    t2i::report_runs({base + "/runA", base + "/runC"}, out2);
    CHECK(t2i::read_text_file(out2 + "/report.md").find("Flag") == std::string::npos);

    // Evaluations against different benchmarks never merge.
    std::string meta_path = base + "/runB/meta.txt";
    std::string meta = t2i::read_text_file(meta_path);
    size_t pos = meta.find("benchmark_digest = ");
    REQUIRE(pos != std::string::npos);
    meta.replace(pos + 19, 16, "0000000000000000");
    t2i::write_text_file(meta_path, meta);
    CHECK_THROWS_AS(t2i::report_runs({base + "/runA", base + "/runB"}, tmpdir("report_out3")),
                    t2i::data_error);
    CHECK_THROWS_AS(t2i::report_runs({}, tmpdir("report_out4")), t2i::config_error);
}

#ifdef T2I_BIN
namespace {

int run_cli(const std::string& args) {
    std::string cmd = std::string(T2I_BIN) + " " + args + " >/dev/null 2>&1";
    int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST_CASE("cli: exit codes separate usage errors from environment failures") {
    CHECK(run_cli("--help") == 0);
    CHECK(run_cli("") == 2);                  // a subcommand is required
    CHECK(run_cli("frobnicate") == 2);        // unknown subcommand
    CHECK(run_cli("make-corpus") == 2);       // missing required flags
    CHECK(run_cli("evaluate --model /nonexistent.ckpt --benchmark /nonexistent.txt") == 1);

    std::string dir = tmpdir("cli");
    t2i::write_text_file(dir + "/bad.cfg", "bogus.key = 1\n");
    CHECK(run_cli("train-encoder --config " + dir + "/bad.cfg --corpus " + dir +
                  "/c.txt --out " + dir + "/enc") == 2);
    CHECK(run_cli("make-corpus --out " + dir + "/c.txt --pairs 0") == 2);
}

TEST_CASE("cli: corpus, training, and evaluation run end to end") {
    std::string dir = tmpdir("cli_e2e");
    CHECK(run_cli("make-corpus --out " + dir + "/c.txt --pairs 12 --held-out 8 --seed 5") == 0);
    t2i::Corpus corpus = t2i::corpus_from_text(t2i::read_text_file(dir + "/c.txt"));
    CHECK(corpus.pairs.size() == 12);
    CHECK(corpus.held_out.size() == 8);

    RunConfig cfg = tiny_config();
    cfg.enc_steps = 6;
    cfg.train_steps = 6;
    cfg.sample_steps = 4;
    cfg.benchmark = dir + "/c.txt";
    t2i::write_text_file(dir + "/run.cfg", cfg.serialize());

    CHECK(run_cli("train-encoder --config " + dir + "/run.cfg --corpus " + dir +
                  "/c.txt --out " + dir + "/enc") == 0);
    CHECK(file_exists(dir + "/enc/encoder.ckpt"));

    CHECK(run_cli("build-cache --config " + dir + "/run.cfg --corpus " + dir +
                  "/c.txt --encoder " + dir + "/enc/encoder.ckpt --out " + dir + "/emb.cache") ==
          0);
    CHECK(file_exists(dir + "/emb.cache"));

    CHECK(run_cli("train-diffusion --config " + dir + "/run.cfg --corpus " + dir +
                  "/c.txt --encoder " + dir + "/enc/encoder.ckpt --cache " + dir +
                  "/emb.cache --out " + dir + "/diff") == 0);
    CHECK(file_exists(dir + "/diff/model.ckpt"));

    CHECK(run_cli("evaluate --model " + dir + "/diff/model.ckpt --seeds 1 --out " + dir +
                  "/eval") == 0);
    CHECK(file_exists(dir + "/eval/pooled.csv"));
    CHECK(file_exists(dir + "/eval/aggregate.csv"));

    CHECK(run_cli("report --out " + dir + "/report " + dir + "/eval") == 0);
    CHECK(file_exists(dir + "/report/summary.csv"));
    CHECK(file_exists(dir + "/report/report.md"));
}
#endif
