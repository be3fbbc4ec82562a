// Command-line front end: corpus generation, encoder and diffusion training,
// evaluation, sweeps, attention heatmaps, and report merging. Exit codes:
// 0 success, 2 invalid inputs (bad flags, configs, or data), 1 environment
// failures (missing files, corrupt checkpoints, out of memory).
#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "t2i/harness.hpp"

namespace {

std::string resolve_out(const std::string& given, const char* sub) {
    if (!given.empty()) return given;
    const char* root = std::getenv("T2I_OUT_ROOT");
    return std::string(root ? root : "runs") + "/" + sub;
}

t2i::Corpus load_corpus(const std::string& path) {
    return t2i::corpus_from_text(t2i::read_text_file(path));
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"toy text-to-image diffusion lab"};
    app.require_subcommand(1);
    int64_t threads = 0;
    app.add_option("--threads", threads, "worker threads (default 1)");

    auto* mk = app.add_subcommand("make-corpus", "generate a benchmark corpus file");
    mk->fallthrough();
    std::string mk_out;
    int64_t mk_pairs = 0, mk_held = 400;
    uint64_t mk_seed = 9001;
    mk->add_option("--out", mk_out, "corpus file to write")->required();
    mk->add_option("--pairs", mk_pairs, "training pair count")->required();
    mk->add_option("--held-out", mk_held, "held-out prompt count");
    mk->add_option("--seed", mk_seed, "corpus seed");

    auto* te = app.add_subcommand("train-encoder", "pretrain a text encoder on captions");
    te->fallthrough();
    std::string te_cfg, te_corpus, te_out;
    uint64_t te_seed = 0;
    te->add_option("--config", te_cfg, "run config file")->required();
    te->add_option("--corpus", te_corpus, "corpus file")->required();
    te->add_option("--out", te_out, "output directory");
    auto* te_seed_opt = te->add_option("--seed", te_seed, "override the config seed");

    auto* bc = app.add_subcommand("build-cache", "precompute frozen caption embeddings");
    bc->fallthrough();
    std::string bc_cfg, bc_corpus, bc_enc, bc_out;
    bc->add_option("--config", bc_cfg, "run config file")->required();
    bc->add_option("--corpus", bc_corpus, "corpus file")->required();
    bc->add_option("--encoder", bc_enc, "encoder checkpoint")->required();
    bc->add_option("--out", bc_out, "cache file to write")->required();

    auto* td = app.add_subcommand("train-diffusion", "train a conditioned diffusion model");
    td->fallthrough();
    std::string td_cfg, td_corpus, td_enc, td_cache, td_out;
    uint64_t td_seed = 0;
    td->add_option("--config", td_cfg, "run config file")->required();
    td->add_option("--corpus", td_corpus, "corpus file")->required();
    td->add_option("--encoder", td_enc, "encoder checkpoint")->required();
    td->add_option("--cache", td_cache, "embedding cache file");
    td->add_option("--out", td_out, "output directory");
    auto* td_seed_opt = td->add_option("--seed", td_seed, "override the config seed");

    auto* ev = app.add_subcommand("evaluate", "score a model on held-out prompts");
    ev->fallthrough();
    std::string ev_model, ev_bench, ev_out;
    float ev_w = 0.0f;
    int64_t ev_steps = 0;
    std::vector<uint64_t> ev_seeds = {1, 2, 3};
    ev->add_option("--model", ev_model, "model checkpoint")->required();
    ev->add_option("--benchmark", ev_bench, "corpus file (default: the model's)");
    auto* ev_w_opt = ev->add_option("--guidance", ev_w, "override guidance weight");
    auto* ev_steps_opt = ev->add_option("--sample-steps", ev_steps, "override sampling steps");
    ev->add_option("--seeds", ev_seeds, "evaluation seeds")->delimiter(',');
    ev->add_option("--out", ev_out, "output directory");

    auto* sg = app.add_subcommand("sweep-guidance", "evaluate one model across guidance weights");
    sg->fallthrough();
    std::string sg_model, sg_bench, sg_out;
    std::vector<float> sg_weights;
    std::vector<uint64_t> sg_seeds = {1, 2, 3};
    sg->add_option("--model", sg_model, "model checkpoint")->required();
    sg->add_option("--weights", sg_weights, "guidance weights")->required()->delimiter(',');
    sg->add_option("--benchmark", sg_bench, "corpus file (default: the model's)");
    sg->add_option("--seeds", sg_seeds, "evaluation seeds")->delimiter(',');
    sg->add_option("--out", sg_out, "output directory");

    auto* sl = app.add_subcommand("sweep-layers", "train and score single-layer strategies");
    sl->fallthrough();
    std::string sl_cfg, sl_corpus, sl_enc, sl_out;
    std::vector<int64_t> sl_ks;
    std::vector<uint64_t> sl_seeds = {1, 2, 3};
    sl->add_option("--config", sl_cfg, "run config file")->required();
    sl->add_option("--corpus", sl_corpus, "corpus file")->required();
    sl->add_option("--encoder", sl_enc, "encoder checkpoint")->required();
    sl->add_option("--layers", sl_ks, "layer indices (default 0, mid, last-1, last)")
        ->delimiter(',');
    sl->add_option("--seeds", sl_seeds, "evaluation seeds")->delimiter(',');
    sl->add_option("--out", sl_out, "output directory");

    auto* cs = app.add_subcommand("compare-strategies",
                                  "train and score several extraction strategies");
    cs->fallthrough();
    std::string cs_cfg, cs_corpus, cs_enc, cs_out;
    std::vector<std::string> cs_tags;
    std::vector<uint64_t> cs_seeds = {1, 2, 3};
    bool cs_pooled = false;
    cs->add_option("--config", cs_cfg, "run config file")->required();
    cs->add_option("--corpus", cs_corpus, "corpus file")->required();
    cs->add_option("--encoder", cs_enc, "encoder checkpoint")->required();
    cs->add_option("--strategies", cs_tags, "strategy tags")->required()->delimiter(',');
    cs->add_flag("--pool-variants", cs_pooled, "also run a pooled variant of each strategy");
    cs->add_option("--seeds", cs_seeds, "evaluation seeds")->delimiter(',');
    cs->add_option("--out", cs_out, "output directory");

    auto* hm = app.add_subcommand("heatmap", "capture cross-attention maps while sampling");
    hm->fallthrough();
    std::string hm_model, hm_caption, hm_token, hm_out;
    std::vector<int64_t> hm_ts;
    uint64_t hm_seed = 1;
    hm->add_option("--model", hm_model, "model checkpoint")->required();
    hm->add_option("--caption", hm_caption, "prompt to sample")->required();
    hm->add_option("--token", hm_token, "caption word to trace")->required();
    hm->add_option("--timesteps", hm_ts, "timesteps to capture")->required()->delimiter(',');
    hm->add_option("--seed", hm_seed, "sampling seed");
    hm->add_option("--out", hm_out, "output directory");

    auto* rp = app.add_subcommand("report", "merge evaluation runs into one summary");
    rp->fallthrough();
    std::string rp_out;
    std::vector<std::string> rp_dirs;
    rp->add_option("--out", rp_out, "output directory");
    rp->add_option("dirs", rp_dirs, "evaluation output directories")->required()->expected(-1);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        t2i::set_threads(threads > 0 ? threads : 1);

        if (*mk) {
            if (mk_pairs < 1) throw t2i::config_error("--pairs must be positive");
            t2i::Rng rng = t2i::substream(mk_seed, "corpus");
            t2i::Corpus corpus = t2i::build_corpus(mk_pairs, rng, mk_held);
            t2i::write_text_file(mk_out, t2i::corpus_to_text(corpus));
            std::cout << "wrote " << corpus.pairs.size() << " pairs and "
                      << corpus.held_out.size() << " held-out prompts to " << mk_out << "\n";
        } else if (*te) {
            t2i::RunConfig cfg = t2i::load_config_file(te_cfg);
            if (te_seed_opt->count()) cfg.seed = te_seed;
            t2i::Corpus corpus = load_corpus(te_corpus);
            std::string out = resolve_out(te_out, "train-encoder");
            t2i::run_train_encoder(cfg, corpus, out, &std::cout);
        } else if (*bc) {
            t2i::RunConfig cfg = t2i::load_config_file(bc_cfg);
            t2i::Corpus corpus = load_corpus(bc_corpus);
            t2i::LoadedEncoder enc = t2i::load_encoder_ckpt(bc_enc);
            t2i::run_build_cache(cfg, corpus, enc, bc_out);
            std::cout << "wrote embedding cache to " << bc_out << "\n";
        } else if (*td) {
            t2i::RunConfig cfg = t2i::load_config_file(td_cfg);
            if (td_seed_opt->count()) cfg.seed = td_seed;
            t2i::Corpus corpus = load_corpus(td_corpus);
            t2i::LoadedEncoder enc = t2i::load_encoder_ckpt(td_enc);
            t2i::EmbeddingCache cache;
            bool cached = !td_cache.empty();
            if (cached) cache = t2i::EmbeddingCache::load(td_cache);
            std::string out = resolve_out(td_out, "train-diffusion");
            t2i::run_train_diffusion(cfg, corpus, enc, cached ? &cache : nullptr, out,
                                     &std::cout);
        } else if (*ev) {
            t2i::RunModel rm = t2i::load_run_ckpt(ev_model);
            std::string bench_path = !ev_bench.empty() ? ev_bench : rm.cfg.benchmark;
            if (bench_path.empty())
                throw t2i::config_error(
                    "no benchmark: pass --benchmark or set it in the run config");
            t2i::Corpus bench = load_corpus(bench_path);
            t2i::RunConfig cfg = rm.cfg;
            cfg.benchmark = bench_path;
            if (ev_w_opt->count()) cfg.guidance = ev_w;
            if (ev_steps_opt->count()) cfg.sample_steps = ev_steps;
            cfg.validate();
            t2i::EvalOutcome out = t2i::evaluate_model(rm, bench, cfg.guidance, ev_seeds,
                                                       cfg.sample_steps, cfg.eval_batch);
            std::string dir = resolve_out(ev_out, "evaluate");
            t2i::write_eval_outputs(dir, out, cfg);
            std::cout << "aggregate " << t2i::benchdet::fixed6(out.pooled.aggregate) << " over "
                      << out.pooled.prompt_scores.size() << " prompts; outputs in " << dir
                      << "\n";
        } else if (*sg) {
            t2i::RunModel rm = t2i::load_run_ckpt(sg_model);
            std::string bench_path = !sg_bench.empty() ? sg_bench : rm.cfg.benchmark;
            if (bench_path.empty())
                throw t2i::config_error(
                    "no benchmark: pass --benchmark or set it in the run config");
            t2i::Corpus bench = load_corpus(bench_path);
            std::string dir = resolve_out(sg_out, "sweep-guidance");
            auto rows = t2i::sweep_guidance(rm, bench, sg_weights, sg_seeds,
                                            rm.cfg.sample_steps, rm.cfg.eval_batch, dir,
                                            &std::cerr);
            for (auto& [w, outc] : rows)
                std::cout << "w=" << w << " aggregate "
                          << t2i::benchdet::fixed6(outc.pooled.aggregate) << "\n";
            std::cout << "outputs in " << dir << "\n";
        } else if (*sl) {
            t2i::RunConfig cfg = t2i::load_config_file(sl_cfg);
            t2i::Corpus corpus = load_corpus(sl_corpus);
            t2i::LoadedEncoder enc = t2i::load_encoder_ckpt(sl_enc);
            std::string dir = resolve_out(sl_out, "sweep-layers");
            auto rows = t2i::sweep_layers(cfg, corpus, enc, sl_ks, sl_seeds, dir, &std::cout);
            for (auto& r : rows)
                std::cout << "layer " << r.label << " aggregate "
                          << t2i::benchdet::fixed6(r.eval.pooled.aggregate) << "\n";
            std::cout << "outputs in " << dir << "\n";
        } else if (*cs) {
            t2i::RunConfig cfg = t2i::load_config_file(cs_cfg);
            t2i::Corpus corpus = load_corpus(cs_corpus);
            t2i::LoadedEncoder enc = t2i::load_encoder_ckpt(cs_enc);
            std::string dir = resolve_out(cs_out, "compare-strategies");
            auto rows = t2i::compare_strategies(cfg, corpus, enc, cs_tags, cs_pooled, cs_seeds,
                                                dir, &std::cout);
            for (auto& r : rows)
                std::cout << r.tag << (r.pool != "none" ? "+" + r.pool : "") << " aggregate "
                          << t2i::benchdet::fixed6(r.eval.pooled.aggregate) << "\n";
            std::cout << "outputs in " << dir << "\n";
        } else if (*hm) {
            t2i::RunModel rm = t2i::load_run_ckpt(hm_model);
            std::string dir = resolve_out(hm_out, "heatmap");
            t2i::heatmap_run(rm, hm_caption, hm_token, hm_ts, hm_seed, dir);
            std::cout << "outputs in " << dir << "\n";
        } else if (*rp) {
            std::string dir = resolve_out(rp_out, "report");
            t2i::report_runs(rp_dirs, dir);
            std::cout << "outputs in " << dir << "\n";
        }
    } catch (const t2i::contract_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
