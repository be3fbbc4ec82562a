#pragma once

#include <algorithm>
#include <array>
#include <cerrno>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "t2i/bench.hpp"
#include "t2i/diffusion.hpp"

namespace t2i {

// ---------------------------------------------------------------------------
// Files.

inline std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open for reading: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw io_error("cannot open for writing: " + path);
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!f) throw io_error("short write: " + path);
}

inline void ensure_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw io_error("cannot create directory " + dir + ": " + ec.message());
}

namespace rundet {

inline std::string hex16(uint64_t v) {
    char b[17];
    std::snprintf(b, sizeof b, "%016llx", static_cast<unsigned long long>(v));
    return b;
}

// Nine significant digits reproduce any binary32 value exactly on reparse.
inline std::string fmt_float(float v) {
    char b[32];
    std::snprintf(b, sizeof b, "%.9g", static_cast<double>(v));
    return b;
}

inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

inline int64_t parse_i64(const std::string& key, const std::string& v) {
    errno = 0;
    char* end = nullptr;
    long long r = std::strtoll(v.c_str(), &end, 10);
    if (v.empty() || end != v.c_str() + v.size() || errno == ERANGE)
        throw config_error("config key " + key + ": bad integer \"" + v + "\"");
    return r;
}

inline uint64_t parse_u64(const std::string& key, const std::string& v) {
    errno = 0;
    char* end = nullptr;
    if (!v.empty() && v[0] == '-')
        throw config_error("config key " + key + ": value must be non-negative");
    unsigned long long r = std::strtoull(v.c_str(), &end, 10);
    if (v.empty() || end != v.c_str() + v.size() || errno == ERANGE)
        throw config_error("config key " + key + ": bad integer \"" + v + "\"");
    return r;
}

inline float parse_f32(const std::string& key, const std::string& v) {
    errno = 0;
    char* end = nullptr;
    float r = std::strtof(v.c_str(), &end);
    if (v.empty() || end != v.c_str() + v.size() || errno == ERANGE)
        throw config_error("config key " + key + ": bad number \"" + v + "\"");
    if (!(r == r)) throw config_error("config key " + key + ": value is not a number");
    return r;
}

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    size_t p = 0;
    while (true) {
        size_t q = s.find(sep, p);
        if (q == std::string::npos) {
            out.push_back(s.substr(p));
            break;
        }
        out.push_back(s.substr(p, q - p));
        p = q + 1;
    }
    return out;
}

inline std::string field_text(const std::string& v) { return v; }
inline std::string field_text(int64_t v) { return std::to_string(v); }
inline std::string field_text(uint64_t v) { return std::to_string(v); }
inline std::string field_text(float v) { return fmt_float(v); }
inline std::string field_text(const std::vector<int64_t>& v) {
    std::string s;
    for (size_t i = 0; i < v.size(); i++) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

inline void field_from_text(const std::string&, const std::string& v, std::string& out) { out = v; }
inline void field_from_text(const std::string& k, const std::string& v, int64_t& out) {
    out = parse_i64(k, v);
}
inline void field_from_text(const std::string& k, const std::string& v, uint64_t& out) {
    out = parse_u64(k, v);
}
inline void field_from_text(const std::string& k, const std::string& v, float& out) {
    out = parse_f32(k, v);
}
inline void field_from_text(const std::string& k, const std::string& v,
                            std::vector<int64_t>& out) {
    if (trim(v).empty()) throw config_error("config key " + k + ": empty list");
    out.clear();
    for (auto& item : split(v, ',')) out.push_back(parse_i64(k, trim(item)));
}

}  // namespace rundet

// ---------------------------------------------------------------------------
// Run configuration: one flat key = value file describing a full training and
// evaluation setup. Serialization is lossless (floats keep nine significant
// digits) and key order is fixed, so the digest identifies the run.

struct RunConfig {
    std::string encoder_kind = "causal";  // causal | bidirectional
    int64_t enc_layers = 4;
    int64_t enc_dim = 64;
    int64_t enc_heads = 4;
    int64_t enc_ff_mult = 4;
    int64_t enc_context = 32;
    int64_t enc_steps = 2000;
    int64_t enc_batch = 64;
    float enc_lr = 3e-4f;
    float enc_mask_rate = 0.15f;

    std::string strategy = "last";  // last | layerK | mean | normmean | normmean-centeronly
    std::string pool = "none";      // none | mean | lasttoken

    int64_t unet_base = 8;
    std::vector<int64_t> unet_mults = {1, 2, 4};
    std::vector<int64_t> unet_attn = {16, 8};
    int64_t unet_heads = 4;
    int64_t unet_cond = 64;
    int64_t unet_time = 128;
    int64_t unet_groups = 4;

    int64_t sched_steps = 1000;
    float beta_start = 1e-4f;
    float beta_end = 0.02f;

    int64_t train_steps = 20000;
    int64_t train_batch = 64;
    float train_lr = 1e-4f;
    float weight_decay = 0.01f;
    float drop_prob = 0.1f;

    float guidance = 7.0f;
    int64_t sample_steps = 50;
    int64_t eval_batch = 64;
    std::string benchmark;  // corpus file whose held-out prompts are evaluated
    uint64_t seed = 1;

    // Single source of truth for the key set; the serializer and the parser
    // both walk this table.
    template <class Self, class F>
    static void visit(Self& self, F&& f) {
        f("encoder.kind", self.encoder_kind);
        f("encoder.layers", self.enc_layers);
        f("encoder.dim", self.enc_dim);
        f("encoder.heads", self.enc_heads);
        f("encoder.ff_mult", self.enc_ff_mult);
        f("encoder.context", self.enc_context);
        f("encoder.steps", self.enc_steps);
        f("encoder.batch", self.enc_batch);
        f("encoder.lr", self.enc_lr);
        f("encoder.mask_rate", self.enc_mask_rate);
        f("strategy", self.strategy);
        f("pool", self.pool);
        f("unet.base", self.unet_base);
        f("unet.mults", self.unet_mults);
        f("unet.attn", self.unet_attn);
        f("unet.heads", self.unet_heads);
        f("unet.cond_width", self.unet_cond);
        f("unet.time_width", self.unet_time);
        f("unet.groups", self.unet_groups);
        f("schedule.steps", self.sched_steps);
        f("schedule.beta_start", self.beta_start);
        f("schedule.beta_end", self.beta_end);
        f("train.steps", self.train_steps);
        f("train.batch", self.train_batch);
        f("train.lr", self.train_lr);
        f("train.weight_decay", self.weight_decay);
        f("train.drop_prob", self.drop_prob);
        f("eval.guidance", self.guidance);
        f("eval.sample_steps", self.sample_steps);
        f("eval.batch", self.eval_batch);
        f("benchmark", self.benchmark);
        f("seed", self.seed);
    }

    std::string serialize() const {
        std::string out;
        visit(*this, [&](const char* key, const auto& field) {
            out += std::string(key) + " = " + rundet::field_text(field) + "\n";
        });
        return out;
    }

    // Accepts keys in any order; missing keys keep their defaults. Unknown
    // and duplicate keys are rejected rather than ignored.
    static RunConfig parse(const std::string& text) {
        RunConfig c;
        std::set<std::string> seen;
        std::istringstream is(text);
        std::string line;
        while (std::getline(is, line)) {
            std::string s = rundet::trim(line);
            if (s.empty() || s[0] == '#') continue;
            size_t eq = s.find('=');
            if (eq == std::string::npos) throw config_error("config line has no '=': " + s);
            std::string key = rundet::trim(s.substr(0, eq));
            std::string val = rundet::trim(s.substr(eq + 1));
            if (key.empty()) throw config_error("config line has an empty key: " + s);
            if (!seen.insert(key).second) throw config_error("duplicate config key: " + key);
            bool matched = false;
            visit(c, [&](const char* k, auto& field) {
                if (key == k) {
                    rundet::field_from_text(key, val, field);
                    matched = true;
                }
            });
            if (!matched) throw config_error("unknown config key: " + key);
        }
        return c;
    }

    EncoderConfig encoder_config(int32_t vocab_size) const {
        EncoderConfig e;
        e.kind = encoder_kind == "causal" ? EncoderKind::Causal : EncoderKind::Bidirectional;
        e.layers = enc_layers;
        e.dim = enc_dim;
        e.heads = enc_heads;
        e.ff_mult = enc_ff_mult;
        e.context = enc_context;
        e.vocab = vocab_size;
        return e;
    }

    EncoderTrainSchedule encoder_schedule() const {
        EncoderTrainSchedule s;
        s.steps = enc_steps;
        s.batch = enc_batch;
        s.opt.lr = enc_lr;
        s.mask_rate = enc_mask_rate;
        return s;
    }

    ExtractionStrategy extraction() const {
        ExtractionStrategy s = ExtractionStrategy::from_tag(strategy);
        if (pool == "mean") s.pooled = ExtractionStrategy::Pool::Mean;
        if (pool == "lasttoken") s.pooled = ExtractionStrategy::Pool::LastToken;
        return s;
    }

    UNetConfig unet_config() const {
        UNetConfig u;
        u.image_size = SceneImage::kSide;
        u.in_channels = 3;
        u.base = unet_base;
        u.mults = unet_mults;
        u.attn_res = unet_attn;
        u.heads = unet_heads;
        u.d_c = unet_cond;
        u.d_t = unet_time;
        u.gn_groups = unet_groups;
        u.pooled = pool != "none";
        return u;
    }

    AdamWConfig diffusion_opt() const {
        AdamWConfig o;
        o.lr = train_lr;
        o.weight_decay = weight_decay;
        return o;
    }

    NoiseSchedule noise_schedule() const {
        return build_schedule(sched_steps, static_cast<double>(beta_start),
                              static_cast<double>(beta_end));
    }

    void validate() const {
        if (encoder_kind != "causal" && encoder_kind != "bidirectional")
            throw config_error("encoder.kind must be causal or bidirectional");
        if (pool != "none" && pool != "mean" && pool != "lasttoken")
            throw config_error("pool must be none, mean or lasttoken");
        ExtractionStrategy strat = ExtractionStrategy::from_tag(strategy);
        strat.validate(enc_layers);
        if (enc_layers < 1 || enc_dim < 1 || enc_heads < 1 || enc_ff_mult < 1)
            throw config_error("encoder sizes must be positive");
        if (enc_dim % enc_heads != 0) throw config_error("encoder.heads must divide encoder.dim");
        if (enc_context < 3) throw config_error("encoder.context must be at least 3");
        if (enc_steps < 1 || enc_batch < 1)
            throw config_error("encoder training budget must be positive");
        if (!(enc_lr > 0.0f)) throw config_error("encoder.lr must be positive");
        if (!(enc_mask_rate > 0.0f && enc_mask_rate < 1.0f))
            throw config_error("encoder.mask_rate must lie in (0, 1)");
        if (unet_cond < 1) throw config_error("unet.cond_width must be positive");
        unet_config().validate();
        if (sched_steps < 2) throw config_error("schedule.steps must be at least 2");
        if (!(beta_start > 0.0f && beta_end > beta_start && beta_end < 1.0f))
            throw config_error("schedule betas must satisfy 0 < start < end < 1");
        if (train_steps < 1 || train_batch < 1)
            throw config_error("training budget must be positive");
        if (!(train_lr > 0.0f)) throw config_error("train.lr must be positive");
        if (!(weight_decay >= 0.0f)) throw config_error("train.weight_decay must be non-negative");
        if (!(drop_prob >= 0.0f && drop_prob <= 1.0f))
            throw config_error("train.drop_prob must lie in [0, 1]");
        if (!(guidance >= 0.0f)) throw config_error("eval.guidance must be non-negative");
        if (sample_steps < 0 || sample_steps > sched_steps)
            throw config_error("eval.sample_steps must lie in [0, schedule.steps]");
        if (eval_batch < 1) throw config_error("eval.batch must be positive");
    }

    std::string digest() const { return rundet::hex16(fnv1a64(serialize())); }

    bool operator==(const RunConfig& o) const { return serialize() == o.serialize(); }
};

inline RunConfig load_config_file(const std::string& path) {
    RunConfig c = RunConfig::parse(read_text_file(path));
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Image writers.

inline std::string ppm_bytes(const SceneImage& img) {
    std::string s = "P6\n" + std::to_string(SceneImage::kSide) + " " +
                    std::to_string(SceneImage::kSide) + "\n255\n";
    s.append(reinterpret_cast<const char*>(img.rgb.data()), img.rgb.size());
    return s;
}

// Grayscale map in [0, 1]; values are clipped at quantization.
inline std::string pgm_bytes(const Tensor& map) {
    check_dim(map.rank() == 2, "pgm writer expects a rank-2 map");
    std::string s = "P5\n" + std::to_string(map.dim(1)) + " " + std::to_string(map.dim(0)) +
                    "\n255\n";
    for (int64_t i = 0; i < map.numel(); i++) {
        float v = std::min(1.0f, std::max(0.0f, map.data()[i]));
        s.push_back(static_cast<char>(static_cast<uint8_t>(v * 255.0f + 0.5f)));
    }
    return s;
}

// ---------------------------------------------------------------------------
// SVG plots. CSV files are the source of truth; these are derived views.

namespace rundet {

inline const char* series_color(size_t i) {
    static const char* c[] = {"#4363d8", "#e6194b", "#3cb44b", "#f58231",
                              "#911eb4", "#0e7f8b", "#f032e6", "#808000"};
    return c[i % 8];
}

inline std::string svg_num(double v) {
    char b[32];
    std::snprintf(b, sizeof b, "%.2f", v);
    return b;
}

inline std::string svg_text(double x, double y, const std::string& s,
                            const std::string& attrs = "") {
    return "<text x=\"" + svg_num(x) + "\" y=\"" + svg_num(y) +
           "\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#333\" " + attrs + ">" + s +
           "</text>\n";
}

}  // namespace rundet

// Radar chart over unit-interval axes; one polygon per labeled series.
inline std::string svg_radar(const std::vector<std::string>& axes,
                             const std::vector<std::pair<std::string, std::vector<double>>>& series) {
    check(axes.size() >= 3, "radar chart needs at least three axes");
    for (auto& s : series)
        check(s.second.size() == axes.size(), "radar series length must match axis count");
    const double cx = 210, cy = 225, r = 150, pi = 3.14159265358979323846;
    size_t n = axes.size();
    auto pt = [&](size_t i, double v) {
        double th = 2.0 * pi * static_cast<double>(i) / static_cast<double>(n);
        return std::make_pair(cx + v * r * std::sin(th), cy - v * r * std::cos(th));
    };
    std::string svg =
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"600\" height=\"450\" "
        "viewBox=\"0 0 600 450\">\n<rect width=\"600\" height=\"450\" fill=\"#ffffff\"/>\n";
    for (double ring : {0.25, 0.5, 0.75, 1.0}) {
        svg += "<polygon class=\"ring\" fill=\"none\" stroke=\"#cccccc\" points=\"";
        for (size_t i = 0; i < n; i++) {
            auto [x, y] = pt(i, ring);
            svg += rundet::svg_num(x) + "," + rundet::svg_num(y) + " ";
        }
        svg += "\"/>\n";
    }
    for (size_t i = 0; i < n; i++) {
        auto [x, y] = pt(i, 1.0);
        svg += "<line x1=\"" + rundet::svg_num(cx) + "\" y1=\"" + rundet::svg_num(cy) +
               "\" x2=\"" + rundet::svg_num(x) + "\" y2=\"" + rundet::svg_num(y) +
               "\" stroke=\"#cccccc\"/>\n";
        auto [lx, ly] = pt(i, 1.14);
        svg += rundet::svg_text(lx, ly + 4, axes[i], "text-anchor=\"middle\"");
    }
    for (size_t s = 0; s < series.size(); s++) {
        const char* color = rundet::series_color(s);
        svg += std::string("<polygon class=\"series\" fill=\"") + color +
               "\" fill-opacity=\"0.12\" stroke=\"" + color + "\" stroke-width=\"2\" points=\"";
        for (size_t i = 0; i < n; i++) {
            auto [x, y] = pt(i, series[s].second[i]);
            svg += rundet::svg_num(x) + "," + rundet::svg_num(y) + " ";
        }
        svg += "\"/>\n";
        double ly = 40 + 20 * static_cast<double>(s);
        svg += std::string("<rect x=\"430\" y=\"") + rundet::svg_num(ly - 9) +
               "\" width=\"12\" height=\"12\" fill=\"" + color + "\"/>\n";
        svg += rundet::svg_text(448, ly + 2, series[s].first);
    }
    return svg + "</svg>\n";
}

// Line chart with a fixed [0, 1] vertical domain (scores) and a data-driven
// horizontal domain.
inline std::string svg_line(const std::string& x_label, const std::string& y_label,
                            const std::vector<std::pair<std::string,
                                                        std::vector<std::pair<double, double>>>>&
                                series) {
    check(!series.empty(), "line chart needs at least one series");
    double xmin = 0, xmax = 0;
    bool first = true;
    std::set<double> xticks;
    for (auto& s : series) {
        check(!s.second.empty(), "line series must be non-empty");
        for (auto& [x, y] : s.second) {
            if (first || x < xmin) xmin = x;
            if (first || x > xmax) xmax = x;
            first = false;
            xticks.insert(x);
        }
    }
    if (xmax == xmin) {
        xmin -= 0.5;
        xmax += 0.5;
    }
    const double px0 = 60, px1 = 520, py0 = 330, py1 = 25;
    auto mx = [&](double x) { return px0 + (x - xmin) / (xmax - xmin) * (px1 - px0); };
    auto my = [&](double y) { return py0 + y * (py1 - py0); };
    std::string svg =
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"580\" height=\"380\" "
        "viewBox=\"0 0 580 380\">\n<rect width=\"580\" height=\"380\" fill=\"#ffffff\"/>\n";
    for (double g : {0.0, 0.25, 0.5, 0.75, 1.0}) {
        svg += "<line x1=\"" + rundet::svg_num(px0) + "\" y1=\"" + rundet::svg_num(my(g)) +
               "\" x2=\"" + rundet::svg_num(px1) + "\" y2=\"" + rundet::svg_num(my(g)) +
               "\" stroke=\"#dddddd\"/>\n";
        svg += rundet::svg_text(px0 - 8, my(g) + 4, rundet::svg_num(g), "text-anchor=\"end\"");
    }
    for (double x : xticks) {
        svg += "<line x1=\"" + rundet::svg_num(mx(x)) + "\" y1=\"" + rundet::svg_num(py0) +
               "\" x2=\"" + rundet::svg_num(mx(x)) + "\" y2=\"" + rundet::svg_num(py0 + 5) +
               "\" stroke=\"#333333\"/>\n";
        char lbl[32];
        std::snprintf(lbl, sizeof lbl, "%g", x);
        svg += rundet::svg_text(mx(x), py0 + 18, lbl, "text-anchor=\"middle\"");
    }
    svg += "<line x1=\"" + rundet::svg_num(px0) + "\" y1=\"" + rundet::svg_num(py0) + "\" x2=\"" +
           rundet::svg_num(px1) + "\" y2=\"" + rundet::svg_num(py0) + "\" stroke=\"#333333\"/>\n";
    svg += "<line x1=\"" + rundet::svg_num(px0) + "\" y1=\"" + rundet::svg_num(py0) + "\" x2=\"" +
           rundet::svg_num(px0) + "\" y2=\"" + rundet::svg_num(py1) + "\" stroke=\"#333333\"/>\n";
    svg += rundet::svg_text((px0 + px1) / 2, 368, x_label, "text-anchor=\"middle\"");
    svg += rundet::svg_text(14, (py0 + py1) / 2, y_label,
                            "text-anchor=\"middle\" transform=\"rotate(-90 14 " +
                                rundet::svg_num((py0 + py1) / 2) + ")\"");
    for (size_t s = 0; s < series.size(); s++) {
        const char* color = rundet::series_color(s);
        std::string pts;
        for (auto& [x, y] : series[s].second)
            pts += rundet::svg_num(mx(x)) + "," + rundet::svg_num(my(y)) + " ";
        svg += std::string("<polyline class=\"series\" fill=\"none\" stroke=\"") + color +
               "\" stroke-width=\"2\" points=\"" + pts + "\"/>\n";
        for (auto& [x, y] : series[s].second)
            svg += "<circle cx=\"" + rundet::svg_num(mx(x)) + "\" cy=\"" + rundet::svg_num(my(y)) +
                   "\" r=\"3\" fill=\"" + color + "\"/>\n";
        double ly = 40 + 20 * static_cast<double>(s);
        svg += std::string("<rect x=\"440\" y=\"") + rundet::svg_num(ly - 9) +
               "\" width=\"12\" height=\"12\" fill=\"" + color + "\"/>\n";
        svg += rundet::svg_text(458, ly + 2, series[s].first);
    }
    return svg + "</svg>\n";
}

// Contact sheet of grayscale maps: one row per labeled group, one column per
// labeled step.
inline std::string svg_map_sheet(const std::vector<std::string>& row_labels,
                                 const std::vector<std::string>& col_labels,
                                 const std::vector<std::vector<Tensor>>& maps) {
    check(maps.size() == row_labels.size(), "map sheet: one map row per row label");
    for (auto& row : maps)
        check(row.size() == col_labels.size(), "map sheet: one map per column label");
    const int texel = 3, gutter_x = 120, gutter_y = 26, gap = 10;
    int side = 0;
    if (!maps.empty() && !maps[0].empty()) side = static_cast<int>(maps[0][0].dim(0));
    int cell = side * texel;
    int width = gutter_x + static_cast<int>(col_labels.size()) * (cell + gap);
    int height = gutter_y + static_cast<int>(row_labels.size()) * (cell + gap);
    std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" +
                      std::to_string(width) + "\" height=\"" + std::to_string(height) +
                      "\" viewBox=\"0 0 " + std::to_string(width) + " " + std::to_string(height) +
                      "\">\n<rect width=\"" + std::to_string(width) + "\" height=\"" +
                      std::to_string(height) + "\" fill=\"#ffffff\"/>\n";
    for (size_t c = 0; c < col_labels.size(); c++)
        svg += rundet::svg_text(gutter_x + static_cast<double>(c) * (cell + gap) + cell / 2.0, 16,
                                col_labels[c], "text-anchor=\"middle\"");
    for (size_t r = 0; r < row_labels.size(); r++) {
        double y0 = gutter_y + static_cast<double>(r) * (cell + gap);
        svg += rundet::svg_text(8, y0 + cell / 2.0, row_labels[r]);
        for (size_t c = 0; c < col_labels.size(); c++) {
            const Tensor& m = maps[r][c];
            check_dim(m.rank() == 2 && m.dim(0) == side && m.dim(1) == side,
                      "map sheet: all maps must share one square shape");
            double x0 = gutter_x + static_cast<double>(c) * (cell + gap);
            for (int y = 0; y < side; y++)
                for (int x = 0; x < side; x++) {
                    float v = m.data()[y * side + x];
                    int g = static_cast<int>(std::min(1.0f, std::max(0.0f, v)) * 255.0f + 0.5f);
                    svg += "<rect x=\"" + rundet::svg_num(x0 + x * texel) + "\" y=\"" +
                           rundet::svg_num(y0 + y * texel) + "\" width=\"3\" height=\"3\" "
                           "fill=\"rgb(" + std::to_string(g) + "," + std::to_string(g) + "," +
                           std::to_string(g) + ")\"/>\n";
                }
        }
    }
    return svg + "</svg>\n";
}

// ---------------------------------------------------------------------------
// Checkpoint bundles. Both bundle kinds embed the RunConfig plus the word
// list, separated by a "---" line, so loading needs no side files.

struct LoadedEncoder {
    RunConfig cfg;
    std::shared_ptr<Vocab> vocab;
    std::shared_ptr<TextEncoder> encoder;
};

namespace rundet {

inline std::string vocab_line(const Vocab& v) {
    std::string s = "vocab =";
    for (size_t i = Vocab::kReserved; i < v.tokens.size(); i++) s += " " + v.tokens[i];
    return s + "\n";
}

inline Vocab vocab_from_line(const std::string& text) {
    size_t eq = text.find('=');
    if (eq == std::string::npos || trim(text.substr(0, eq)) != "vocab")
        throw parse_error("checkpoint lacks a vocab line");
    std::istringstream is(text.substr(eq + 1));
    std::vector<std::string> words;
    std::string w;
    while (is >> w) words.push_back(w);
    return Vocab::make(std::move(words));
}

inline std::pair<std::string, std::string> split_ckpt_text(const std::string& text) {
    size_t p = text.find("\n---\n");
    if (p == std::string::npos) throw parse_error("checkpoint config text lacks a section break");
    return {text.substr(0, p + 1), text.substr(p + 5)};
}

inline void copy_named_into(const Checkpoint& ck, const std::string& prefix,
                            std::vector<std::pair<std::string, Tensor>> dst) {
    for (auto& [name, t] : dst) {
        const Tensor& src = ck.get(prefix + name);
        check_dim(src.shape() == t.shape(), "checkpoint tensor shape mismatch: " + prefix + name);
        std::copy(src.data(), src.data() + src.numel(), t.data());
    }
}

}  // namespace rundet

inline void save_encoder_ckpt(const std::string& path, TextEncoder& enc, const Vocab& vocab,
                              const RunConfig& cfg) {
    Checkpoint ck;
    ck.config_text = cfg.serialize() + "---\n" + rundet::vocab_line(vocab);
    for (auto& [name, t] : enc.named_params()) ck.tensors.emplace_back("encoder." + name, t);
    ck.save(path);
}

inline LoadedEncoder load_encoder_ckpt(const std::string& path) {
    Checkpoint ck = Checkpoint::load(path);
    auto [cfg_text, extra] = rundet::split_ckpt_text(ck.config_text);
    LoadedEncoder out;
    out.cfg = RunConfig::parse(cfg_text);
    out.vocab = std::make_shared<Vocab>(rundet::vocab_from_line(extra));
    out.encoder = std::make_shared<TextEncoder>(
        TextEncoder::init(out.cfg.encoder_config(out.vocab->size()), 0));
    rundet::copy_named_into(ck, "encoder.", out.encoder->named_params());
    out.encoder->freeze();
    return out;
}

// Refuses to pair a run with an encoder trained under a different shape.
inline void require_encoder_match(const RunConfig& run, const LoadedEncoder& enc) {
    std::string want = run.encoder_config(enc.vocab->size()).digest();
    std::string got = enc.encoder->cfg.digest();
    if (want != got)
        throw config_error("encoder checkpoint digest " + got +
                           " does not match the run's encoder digest " + want);
}

// A fully assembled generative model: frozen encoder, trainable projection,
// U-Net, schedule, and the conditioning pipeline tying them together.
struct RunModel {
    RunConfig cfg;
    std::shared_ptr<Vocab> vocab;
    std::shared_ptr<TextEncoder> encoder;
    Tensor projection;
    UNet unet;
    NoiseSchedule sched;
    ConditioningPipeline pipeline;
};

inline RunModel assemble_run_model(const RunConfig& cfg, std::shared_ptr<Vocab> vocab,
                                   std::shared_ptr<TextEncoder> encoder, Tensor projection,
                                   UNet unet, const EmbeddingCache* cache = nullptr) {
    RunModel rm;
    rm.cfg = cfg;
    rm.vocab = std::move(vocab);
    rm.encoder = std::move(encoder);
    rm.projection = std::move(projection);
    rm.unet = std::move(unet);
    rm.sched = cfg.noise_schedule();
    rm.pipeline = ConditioningPipeline(rm.encoder.get(), rm.vocab.get(), cfg.extraction(),
                                       rm.projection, cache);
    return rm;
}

inline void save_run_ckpt(const std::string& path, const RunModel& rm) {
    Checkpoint ck;
    ck.config_text = rm.cfg.serialize() + "---\n" + rundet::vocab_line(*rm.vocab);
    for (auto& [name, t] : rm.encoder->named_params()) ck.tensors.emplace_back("encoder." + name, t);
    ck.tensors.emplace_back("projection", rm.projection);
    for (auto& [name, t] : rm.unet.named_params()) ck.tensors.emplace_back("unet." + name, t);
    ck.save(path);
}

inline RunModel load_run_ckpt(const std::string& path) {
    Checkpoint ck = Checkpoint::load(path);
    auto [cfg_text, extra] = rundet::split_ckpt_text(ck.config_text);
    RunConfig cfg = RunConfig::parse(cfg_text);
    cfg.validate();
    auto vocab = std::make_shared<Vocab>(rundet::vocab_from_line(extra));
    auto encoder = std::make_shared<TextEncoder>(
        TextEncoder::init(cfg.encoder_config(vocab->size()), 0));
    rundet::copy_named_into(ck, "encoder.", encoder->named_params());
    encoder->freeze();
    Tensor projection = ck.get("projection");
    projection.set_requires_grad(true);
    UNet unet = UNet::init(cfg.unet_config(), 0);
    rundet::copy_named_into(ck, "unet.", unet.named_params());
    return assemble_run_model(cfg, std::move(vocab), std::move(encoder), std::move(projection),
                              std::move(unet));
}

// ---------------------------------------------------------------------------
// Training drivers.

inline std::string loss_csv(const std::vector<float>& curve) {
    std::string s = "step,loss\n";
    for (size_t i = 0; i < curve.size(); i++)
        s += std::to_string(i + 1) + "," + rundet::fmt_float(curve[i]) + "\n";
    return s;
}

inline std::string kv_text(const std::vector<std::pair<std::string, std::string>>& kv) {
    std::string s;
    for (auto& [k, v] : kv) s += k + " = " + v + "\n";
    return s;
}

inline std::vector<std::pair<std::string, std::string>> parse_kv(const std::string& text,
                                                                 const std::string& where) {
    std::vector<std::pair<std::string, std::string>> out;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        std::string s = rundet::trim(line);
        if (s.empty() || s[0] == '#') continue;
        size_t eq = s.find('=');
        if (eq == std::string::npos) throw parse_error(where + ": line has no '=': " + s);
        out.emplace_back(rundet::trim(s.substr(0, eq)), rundet::trim(s.substr(eq + 1)));
    }
    return out;
}

inline std::string kv_find(const std::vector<std::pair<std::string, std::string>>& kv,
                           const std::string& key, const std::string& where) {
    for (auto& [k, v] : kv)
        if (k == key) return v;
    throw data_error(where + " lacks the key " + key);
}

inline std::string benchmark_digest(const Corpus& corpus) {
    return rundet::hex16(fnv1a64(corpus_to_text(corpus)));
}

struct EncoderRunResult {
    LoadedEncoder enc;
    std::vector<float> loss_curve;
    std::string ckpt_path;
};

inline EncoderRunResult run_train_encoder(const RunConfig& cfg, const Corpus& corpus,
                                          const std::string& out_dir,
                                          std::ostream* log = nullptr) {
    cfg.validate();
    if (corpus.pairs.empty()) throw data_error("corpus has no training pairs");
    auto vocab = std::make_shared<Vocab>(Vocab::make(benchmark_vocabulary()));
    std::vector<std::string> captions;
    captions.reserve(corpus.pairs.size());
    for (auto& p : corpus.pairs) captions.push_back(p.caption);
    if (log) *log << "training " << cfg.encoder_kind << " encoder: " << cfg.enc_steps
                  << " steps on " << captions.size() << " captions" << std::endl;
    EncoderTrainResult res = train_text_encoder(captions, cfg.encoder_config(vocab->size()),
                                                *vocab, cfg.encoder_schedule(), cfg.seed);
    EncoderRunResult out;
    out.enc.cfg = cfg;
    out.enc.vocab = vocab;
    out.enc.encoder = std::make_shared<TextEncoder>(std::move(res.model));
    out.enc.encoder->freeze();
    out.loss_curve = std::move(res.loss_curve);
    ensure_dir(out_dir);
    out.ckpt_path = out_dir + "/encoder.ckpt";
    save_encoder_ckpt(out.ckpt_path, *out.enc.encoder, *vocab, cfg);
    write_text_file(out_dir + "/encoder_loss.csv", loss_csv(out.loss_curve));
    if (log) *log << "encoder checkpoint written to " << out.ckpt_path << "\n";
    return out;
}

struct DiffusionRunResult {
    RunModel model;
    std::vector<float> loss_curve;
    std::string ckpt_path;
};

inline DiffusionRunResult run_train_diffusion(const RunConfig& cfg, const Corpus& corpus,
                                              const LoadedEncoder& enc,
                                              const EmbeddingCache* cache,
                                              const std::string& out_dir,
                                              std::ostream* log = nullptr) {
    cfg.validate();
    require_encoder_match(cfg, enc);
    if (corpus.pairs.empty()) throw data_error("corpus has no training pairs");
    Rng proj_rng = substream(cfg.seed, "projection-init");
    Tensor projection =
        Tensor::randn(proj_rng, {enc.encoder->cfg.dim, cfg.unet_cond}, 0.02f, true);
    ConditioningPipeline pipe(enc.encoder.get(), enc.vocab.get(), cfg.extraction(), projection,
                              cache);
    UNet unet = UNet::init(cfg.unet_config(), cfg.seed);
    std::vector<Tensor> params = unet.params();
    params.push_back(projection);
    AdamW opt(params, cfg.diffusion_opt());
    NoiseSchedule sched = cfg.noise_schedule();

    Rng batch_rng = substream(cfg.seed, "diffusion-batch");
    Rng step_rng = substream(cfg.seed, "diffusion-train");
    int64_t b = cfg.train_batch;
    int64_t px = SceneImage::kSide * SceneImage::kSide * 3;
    Tensor x0 = Tensor::zeros({b, SceneImage::kSide, SceneImage::kSide, 3});
    std::vector<std::string> captions(static_cast<size_t>(b));
    std::vector<float> curve;
    curve.reserve(static_cast<size_t>(cfg.train_steps));
    Tape tape;
    if (log) *log << "training diffusion (" << cfg.strategy
                  << (cfg.pool != "none" ? "+" + cfg.pool : "") << "): " << cfg.train_steps
                  << " steps, batch " << b << (cache ? ", cached embeddings" : "") << std::endl;
    for (int64_t step = 0; step < cfg.train_steps; step++) {
        for (int64_t i = 0; i < b; i++) {
            size_t idx = static_cast<size_t>(
                batch_rng.below(static_cast<uint64_t>(corpus.pairs.size())));
            corpus.pairs[idx].image.to_floats(x0.data() + i * px);
            captions[static_cast<size_t>(i)] = corpus.pairs[idx].caption;
        }
        float loss = train_step(tape, unet, pipe, sched, x0, captions, cfg.drop_prob, step_rng,
                                opt);
        curve.push_back(loss);
        if (log && ((step + 1) % 500 == 0 || step + 1 == cfg.train_steps)) {
            size_t win = std::min<size_t>(100, curve.size());
            double ma = 0;
            for (size_t i = curve.size() - win; i < curve.size(); i++) ma += curve[i];
            *log << "step " << (step + 1) << "/" << cfg.train_steps << " loss(ma100) "
                 << ma / static_cast<double>(win) << std::endl;
        }
    }

    DiffusionRunResult out;
    out.model = assemble_run_model(cfg, enc.vocab, enc.encoder, projection, std::move(unet));
    out.loss_curve = std::move(curve);
    ensure_dir(out_dir);
    out.ckpt_path = out_dir + "/model.ckpt";
    save_run_ckpt(out.ckpt_path, out.model);
    write_text_file(out_dir + "/diffusion_loss.csv", loss_csv(out.loss_curve));
    write_text_file(
        out_dir + "/train_meta.txt",
        kv_text({{"config_digest", cfg.digest()},
                 {"encoder_digest", enc.encoder->cfg.digest()},
                 {"benchmark_digest", benchmark_digest(corpus)},
                 {"cached_embeddings", cache ? "yes" : "no"},
                 {"final_loss", rundet::fmt_float(out.loss_curve.back())}}));
    if (log) *log << "model checkpoint written to " << out.ckpt_path << std::endl;
    return out;
}

inline std::string run_build_cache(const RunConfig& cfg, const Corpus& corpus,
                                   const LoadedEncoder& enc, const std::string& out_path) {
    cfg.validate();
    require_encoder_match(cfg, enc);
    if (corpus.pairs.empty()) throw data_error("corpus has no training pairs");
    std::vector<std::string> captions;
    captions.reserve(corpus.pairs.size());
    for (auto& p : corpus.pairs) captions.push_back(p.caption);
    EmbeddingCache cache = EmbeddingCache::build(captions, *enc.encoder, *enc.vocab,
                                                 cfg.extraction(), cfg.eval_batch);
    cache.save(out_path);
    return out_path;
}

// ---------------------------------------------------------------------------
// Evaluation: one image per (prompt, seed), scored by the reference oracle.
// Per-seed reports plus a pooled report over per-prompt seed means.

struct EvalOutcome {
    std::vector<EvalReport> per_seed;
    EvalReport pooled;
    std::vector<uint64_t> seeds;
    float guidance = 0.0f;
    int64_t sample_steps = 0;
    std::string bench_digest;
};

inline EvalOutcome evaluate_model(const RunModel& rm, const Corpus& bench, float w,
                                  const std::vector<uint64_t>& seeds, int64_t sample_steps,
                                  int64_t eval_batch) {
    if (seeds.empty()) throw config_error("evaluation needs at least one seed");
    if (eval_batch < 1) throw config_error("evaluation batch must be positive");
    if (sample_steps < 0 || sample_steps > rm.sched.t_diff)
        throw config_error("eval.sample_steps must lie in [0, schedule.steps]");
    if (bench.held_out.empty()) throw data_error("benchmark has no held-out prompts");
    check(bench.held_out.size() == bench.held_out_captions.size(),
          "benchmark prompt/caption count mismatch");

    // Vocabulary screen: name every offending word, not just the first.
    std::set<std::string> unknown;
    for (auto& cap : bench.held_out_captions) {
        std::istringstream is(cap);
        std::string wd;
        while (is >> wd) {
            try {
                rm.vocab->id(wd);
            } catch (const vocab_error&) {
                unknown.insert(wd);
            }
        }
    }
    if (!unknown.empty()) {
        std::string msg = "prompt words outside the encoder vocabulary:";
        for (auto& u : unknown) msg += " " + u;
        throw data_error(msg);
    }

    int64_t n = static_cast<int64_t>(bench.held_out.size());
    int64_t px = SceneImage::kSide * SceneImage::kSide * 3;
    // Conditioning depends only on the prompts; build each chunk once and
    // reuse it across seeds.
    struct Chunk {
        CondBatch cond, null_cond;
        int64_t begin = 0, count = 0;
    };
    std::vector<Chunk> chunks;
    for (int64_t b0 = 0; b0 < n; b0 += eval_batch) {
        int64_t m = std::min(eval_batch, n - b0);
        std::vector<std::string> caps(bench.held_out_captions.begin() + b0,
                                      bench.held_out_captions.begin() + b0 + m);
        Chunk c;
        c.cond = rm.pipeline.batch(nullptr, caps);
        c.null_cond = rm.pipeline.null_batch(nullptr, m);
        c.begin = b0;
        c.count = m;
        chunks.push_back(std::move(c));
    }

    EvalOutcome out;
    out.seeds = seeds;
    out.guidance = w;
    out.sample_steps = sample_steps;
    out.bench_digest = benchmark_digest(bench);
    std::string strat_label = rm.cfg.strategy + (rm.cfg.pool != "none" ? "+" + rm.cfg.pool : "");
    std::vector<double> sums(static_cast<size_t>(n), 0.0);
    for (uint64_t sd : seeds) {
        std::vector<double> scores(static_cast<size_t>(n));
        for (size_t ci = 0; ci < chunks.size(); ci++) {
            Rng srng = substream(sd, "eval-sample", static_cast<uint64_t>(ci));
            Tensor x = ddpm_sample(rm.unet, chunks[ci].cond, chunks[ci].null_cond, rm.sched, srng,
                                   w, sample_steps);
            for (int64_t i = 0; i < chunks[ci].count; i++) {
                SceneImage img = SceneImage::from_floats(x.data() + i * px);
                size_t gi = static_cast<size_t>(chunks[ci].begin + i);
                scores[gi] = score(img, bench.held_out[gi]);
            }
        }
        for (size_t i = 0; i < scores.size(); i++) sums[i] += scores[i];
        EvalReport r = aggregate_scores(scores, bench.held_out);
        r.model = rm.cfg.digest();
        r.strategy = strat_label;
        r.guidance = static_cast<double>(w);
        r.seeds = {sd};
        out.per_seed.push_back(std::move(r));
    }
    std::vector<double> pooled(sums.size());
    for (size_t i = 0; i < sums.size(); i++)
        pooled[i] = sums[i] / static_cast<double>(seeds.size());
    out.pooled = aggregate_scores(pooled, bench.held_out);
    out.pooled.model = rm.cfg.digest();
    out.pooled.strategy = strat_label;
    out.pooled.guidance = static_cast<double>(w);
    out.pooled.seeds = seeds;
    return out;
}

inline std::vector<std::pair<std::string, std::vector<double>>> radar_series(
    const std::vector<std::pair<std::string, const EvalReport*>>& reports) {
    std::vector<std::pair<std::string, std::vector<double>>> series;
    for (auto& [label, r] : reports) {
        std::vector<double> vals;
        for (int s = 0; s < kSkillCount; s++) vals.push_back(r->skill_mean[static_cast<size_t>(s)]);
        series.emplace_back(label, std::move(vals));
    }
    return series;
}

inline std::vector<std::string> skill_axis_labels() {
    std::vector<std::string> axes;
    for (int s = 0; s < kSkillCount; s++) axes.push_back(skill_name(static_cast<Skill>(s)));
    return axes;
}

inline std::string join_seeds(const std::vector<uint64_t>& seeds) {
    std::string s;
    for (size_t i = 0; i < seeds.size(); i++) s += (i ? "," : "") + std::to_string(seeds[i]);
    return s;
}

// Skill-mean cells in table column order; untagged skills stay empty.
inline std::string skill_cells(const EvalReport& r) {
    std::string out;
    for (int s = 0; s < kSkillCount; s++) {
        out += ",";
        if (r.skill_count[static_cast<size_t>(s)] > 0)
            out += benchdet::fixed6(r.skill_mean[static_cast<size_t>(s)]);
    }
    return out;
}

inline void write_eval_outputs(const std::string& dir, const EvalOutcome& out,
                               const RunConfig& cfg) {
    ensure_dir(dir);
    for (size_t i = 0; i < out.per_seed.size(); i++)
        write_text_file(dir + "/eval_seed" + std::to_string(out.seeds[i]) + ".csv",
                        prompt_csv(out.per_seed[i]));
    write_text_file(dir + "/pooled.csv", prompt_csv(out.pooled));
    write_text_file(dir + "/aggregate.csv", aggregate_csv(out.pooled));
    write_text_file(dir + "/radar.svg",
                    svg_radar(skill_axis_labels(),
                              radar_series({{out.pooled.strategy, &out.pooled}})));
    write_text_file(dir + "/meta.txt",
                    kv_text({{"config_digest", cfg.digest()},
                             {"strategy", cfg.strategy},
                             {"pool", cfg.pool},
                             {"guidance", rundet::fmt_float(out.guidance)},
                             {"sample_steps", std::to_string(out.sample_steps)},
                             {"eval_batch", std::to_string(cfg.eval_batch)},
                             {"seeds", join_seeds(out.seeds)},
                             {"benchmark_digest", out.bench_digest}}));
}

// ---------------------------------------------------------------------------
// Sweeps and comparisons.

inline std::string guidance_csv(const std::vector<std::pair<float, EvalOutcome>>& rows) {
    std::string out = "w,avg";
    for (auto& a : skill_axis_labels()) out += "," + a;
    out += "\n";
    for (auto& [w, ev] : rows)
        out += rundet::fmt_float(w) + "," + benchdet::fixed6(ev.pooled.aggregate) +
               skill_cells(ev.pooled) + "\n";
    return out;
}

// One model, several guidance weights, shared seeds. Duplicate weights are
// dropped with a warning; at least two distinct weights must remain.
inline std::vector<std::pair<float, EvalOutcome>> sweep_guidance(
    const RunModel& rm, const Corpus& bench, const std::vector<float>& weights,
    const std::vector<uint64_t>& seeds, int64_t sample_steps, int64_t eval_batch,
    const std::string& out_dir, std::ostream* warn = nullptr) {
    std::vector<float> uniq;
    for (float w : weights) {
        bool dup = false;
        for (float u : uniq) dup = dup || u == w;
        if (dup) {
            if (warn) *warn << "warning: duplicate guidance weight " << w << " ignored\n";
        } else {
            uniq.push_back(w);
        }
    }
    if (uniq.size() < 2) throw config_error("guidance sweep needs at least two distinct weights");
    for (float w : uniq)
        if (!(w >= 0.0f)) throw config_error("guidance weights must be non-negative");
    ensure_dir(out_dir);
    std::vector<std::pair<float, EvalOutcome>> rows;
    for (float w : uniq) {
        EvalOutcome ev = evaluate_model(rm, bench, w, seeds, sample_steps, eval_batch);
        RunConfig at_w = rm.cfg;
        at_w.guidance = w;
        write_eval_outputs(out_dir + "/w" + rundet::fmt_float(w), ev, at_w);
        rows.emplace_back(w, std::move(ev));
    }
    write_text_file(out_dir + "/guidance.csv", guidance_csv(rows));
    std::vector<std::pair<double, double>> pts;
    for (auto& [w, ev] : rows) pts.emplace_back(static_cast<double>(w), ev.pooled.aggregate);
    write_text_file(out_dir + "/guidance.svg",
                    svg_line("guidance weight", "score", {{"avg", pts}}));
    write_text_file(out_dir + "/meta.txt",
                    kv_text({{"config_digest", rm.cfg.digest()},
                             {"strategy", rm.cfg.strategy},
                             {"pool", rm.cfg.pool},
                             {"sample_steps", std::to_string(sample_steps)},
                             {"seeds", join_seeds(seeds)},
                             {"benchmark_digest", rows.front().second.bench_digest}}));
    return rows;
}

struct LayerRow {
    std::string label;
    int64_t k = -1;  // -1 marks the dedicated last-layer row
    EvalOutcome eval;
};

inline std::string layers_csv(const std::vector<LayerRow>& rows) {
    std::string out = "layer,avg";
    for (auto& a : skill_axis_labels()) out += "," + a;
    out += "\n";
    for (auto& r : rows)
        out += r.label + "," + benchdet::fixed6(r.eval.pooled.aggregate) +
               skill_cells(r.eval.pooled) + "\n";
    return out;
}

// Trains one model per single-layer strategy plus a last-layer row. When the
// final layer index is itself in the sweep, its model doubles as the
// last-layer row: both strategies read the same hidden states, so retraining
// would reproduce the same weights bit for bit.
inline std::vector<LayerRow> sweep_layers(const RunConfig& base, const Corpus& corpus,
                                          const LoadedEncoder& enc, std::vector<int64_t> ks,
                                          const std::vector<uint64_t>& seeds,
                                          const std::string& out_dir,
                                          std::ostream* log = nullptr) {
    base.validate();
    require_encoder_match(base, enc);
    int64_t layers = base.enc_layers;
    if (ks.empty()) ks = {0, layers / 2, layers - 1, layers};
    std::vector<int64_t> uniq;
    for (int64_t k : ks) {
        bool dup = false;
        for (int64_t u : uniq) dup = dup || u == k;
        if (dup) {
            if (log) *log << "warning: duplicate layer index " << k << " ignored\n";
        } else {
            uniq.push_back(k);
        }
    }
    for (int64_t k : uniq)
        if (k < 0 || k > layers)
            throw config_error("layer index " + std::to_string(k) + " outside 0.." +
                               std::to_string(layers));
    ensure_dir(out_dir);
    std::vector<LayerRow> rows;
    ptrdiff_t final_layer_row = -1;
    for (int64_t k : uniq) {
        RunConfig cfg = base;
        cfg.strategy = "layer" + std::to_string(k);
        std::string dir = out_dir + "/layer" + std::to_string(k);
        DiffusionRunResult run = run_train_diffusion(cfg, corpus, enc, nullptr, dir, log);
        EvalOutcome ev = evaluate_model(run.model, corpus, cfg.guidance, seeds, cfg.sample_steps,
                                        cfg.eval_batch);
        write_eval_outputs(dir + "/eval", ev, cfg);
        rows.push_back({std::to_string(k), k, std::move(ev)});
        if (k == layers) final_layer_row = static_cast<ptrdiff_t>(rows.size()) - 1;
    }
    if (final_layer_row >= 0) {
        LayerRow last;
        last.label = "last";
        last.eval = rows[static_cast<size_t>(final_layer_row)].eval;
        rows.push_back(std::move(last));
        if (log) *log << "last-layer row reuses the layer" << layers
                      << " model (the strategies coincide at the final layer)\n";
    } else {
        RunConfig cfg = base;
        cfg.strategy = "last";
        std::string dir = out_dir + "/last";
        DiffusionRunResult run = run_train_diffusion(cfg, corpus, enc, nullptr, dir, log);
        EvalOutcome ev = evaluate_model(run.model, corpus, cfg.guidance, seeds, cfg.sample_steps,
                                        cfg.eval_batch);
        write_eval_outputs(dir + "/eval", ev, cfg);
        rows.push_back({"last", -1, std::move(ev)});
    }
    write_text_file(out_dir + "/layers.csv", layers_csv(rows));
    std::vector<std::pair<double, double>> pts;
    for (auto& r : rows)
        if (r.k >= 0) pts.emplace_back(static_cast<double>(r.k), r.eval.pooled.aggregate);
    write_text_file(out_dir + "/layers.svg", svg_line("layer", "score", {{"avg", pts}}));
    write_text_file(out_dir + "/meta.txt",
                    kv_text({{"config_digest", base.digest()},
                             {"encoder_digest", enc.encoder->cfg.digest()},
                             {"seeds", join_seeds(seeds)},
                             {"benchmark_digest", rows.front().eval.bench_digest}}));
    return rows;
}

struct StrategyRow {
    std::string tag;
    std::string pool;
    EvalOutcome eval;
};

inline std::string strategies_csv(const std::vector<StrategyRow>& rows) {
    std::string out = "strategy,pool,avg";
    for (auto& a : skill_axis_labels()) out += "," + a;
    out += "\n";
    for (auto& r : rows)
        out += r.tag + "," + r.pool + "," + benchdet::fixed6(r.eval.pooled.aggregate) +
               skill_cells(r.eval.pooled) + "\n";
    return out;
}

// Paired per-prompt pooled scores, one row per held-out prompt, plus signed
// differences against the first run.
inline std::string prompt_diffs_csv(const std::vector<StrategyRow>& rows) {
    check(!rows.empty(), "no strategy rows");
    std::vector<std::string> labels;
    for (auto& r : rows) labels.push_back(r.tag + (r.pool != "none" ? "+" + r.pool : ""));
    std::string out = "prompt_id,skills";
    for (auto& l : labels) out += "," + l;
    for (size_t i = 1; i < labels.size(); i++) out += ",d_" + labels[i];
    out += "\n";
    const EvalReport& base = rows.front().eval.pooled;
    for (auto& r : rows)
        check(r.eval.pooled.prompt_scores.size() == base.prompt_scores.size(),
              "strategy runs scored different prompt counts");
    for (size_t p = 0; p < base.prompt_scores.size(); p++) {
        out += std::to_string(p) + ",";
        for (size_t t = 0; t < base.prompt_tags[p].size(); t++) {
            if (t) out += "|";
            out += skill_name(base.prompt_tags[p][t]);
        }
        for (auto& r : rows) out += "," + benchdet::fixed6(r.eval.pooled.prompt_scores[p]);
        for (size_t i = 1; i < rows.size(); i++)
            out += "," + benchdet::fixed6(rows[i].eval.pooled.prompt_scores[p] -
                                          base.prompt_scores[p]);
        out += "\n";
    }
    return out;
}

// One full train + evaluate per strategy under a shared budget and shared
// seeds. Pooled variants, when requested, double the rows.
inline std::vector<StrategyRow> compare_strategies(const RunConfig& base, const Corpus& corpus,
                                                   const LoadedEncoder& enc,
                                                   const std::vector<std::string>& tags,
                                                   bool pooled_variants,
                                                   const std::vector<uint64_t>& seeds,
                                                   const std::string& out_dir,
                                                   std::ostream* log = nullptr) {
    if (tags.empty()) throw config_error("strategy list is empty");
    base.validate();
    require_encoder_match(base, enc);
    std::vector<std::string> uniq;
    for (auto& t : tags) {
        ExtractionStrategy s = ExtractionStrategy::from_tag(t);
        s.validate(base.enc_layers);
        bool dup = false;
        for (auto& u : uniq) dup = dup || u == t;
        if (dup) {
            if (log) *log << "warning: duplicate strategy " << t << " ignored\n";
        } else {
            uniq.push_back(t);
        }
    }
    std::vector<std::pair<std::string, std::string>> runs;
    std::string pool_kind = base.pool != "none" ? base.pool : "mean";
    for (auto& t : uniq) {
        runs.emplace_back(t, "none");
        if (pooled_variants) runs.emplace_back(t, pool_kind);
    }
    ensure_dir(out_dir);
    std::vector<StrategyRow> rows;
    for (auto& [tag, pool] : runs) {
        RunConfig cfg = base;
        cfg.strategy = tag;
        cfg.pool = pool;
        std::string dir = out_dir + "/" + tag + (pool != "none" ? "-pooled" : "");
        DiffusionRunResult run = run_train_diffusion(cfg, corpus, enc, nullptr, dir, log);
        EvalOutcome ev = evaluate_model(run.model, corpus, cfg.guidance, seeds, cfg.sample_steps,
                                        cfg.eval_batch);
        write_eval_outputs(dir + "/eval", ev, cfg);
        rows.push_back({tag, pool, std::move(ev)});
    }
    write_text_file(out_dir + "/strategies.csv", strategies_csv(rows));
    write_text_file(out_dir + "/prompt_diffs.csv", prompt_diffs_csv(rows));
    std::vector<std::pair<std::string, const EvalReport*>> reports;
    for (auto& r : rows)
        reports.emplace_back(r.tag + (r.pool != "none" ? "+" + r.pool : ""), &r.eval.pooled);
    write_text_file(out_dir + "/radar.svg", svg_radar(skill_axis_labels(), radar_series(reports)));
    write_text_file(out_dir + "/meta.txt",
                    kv_text({{"config_digest", base.digest()},
                             {"encoder_digest", enc.encoder->cfg.digest()},
                             {"seeds", join_seeds(seeds)},
                             {"benchmark_digest", rows.front().eval.bench_digest}}));
    return rows;
}

// ---------------------------------------------------------------------------
// Attention heatmaps along a seeded sampling trajectory.

inline void heatmap_run(const RunModel& rm, const std::string& caption, const std::string& token,
                        std::vector<int64_t> t_list, uint64_t seed, const std::string& out_dir) {
    if (rundet::trim(caption).empty()) throw data_error("heatmap needs a non-empty caption");
    if (t_list.empty()) throw config_error("heatmap needs at least one timestep");
    for (int64_t t : t_list)
        if (t < 0 || t >= rm.sched.t_diff)
            throw config_error("timestep " + std::to_string(t) + " outside 0.." +
                               std::to_string(rm.sched.t_diff - 1));
    std::vector<std::string> words;
    {
        std::istringstream is(caption);
        std::string w;
        while (is >> w) words.push_back(w);
    }
    int64_t pos = -1;
    for (size_t i = 0; i < words.size() && pos < 0; i++)
        if (words[i] == token) pos = static_cast<int64_t>(i);
    if (pos < 0) {
        std::string msg = "token \"" + token + "\" is not in the caption; available tokens:";
        for (auto& w : words) msg += " " + w;
        throw data_error(msg);
    }
    int64_t token_index = 1 + pos;  // the sequence starts with the begin marker

    std::sort(t_list.begin(), t_list.end(), std::greater<int64_t>());
    t_list.erase(std::unique(t_list.begin(), t_list.end()), t_list.end());
    std::set<int64_t> wanted(t_list.begin(), t_list.end());

    CondBatch cond = rm.pipeline.batch(nullptr, {caption});
    CondBatch null_cond = rm.pipeline.null_batch(nullptr, 1);
    std::map<int64_t, std::vector<AttentionRecord>> captured;
    SampleObserver obs = [&](int64_t t, const Tensor& x) {
        if (wanted.count(t)) captured[t] = capture_attention(rm.unet, x, t, cond, token_index);
    };
    Rng srng = substream(seed, "heatmap-sample");
    // The full ancestral chain visits every timestep, so every listed t is
    // captured exactly once.
    Tensor x = ddpm_sample(rm.unet, cond, null_cond, rm.sched, srng, rm.cfg.guidance, 0, &obs);

    ensure_dir(out_dir);
    write_text_file(out_dir + "/sample.ppm", ppm_bytes(SceneImage::from_floats(x.data())));
    size_t sites = captured.begin()->second.size();
    for (auto& [t, recs] : captured)
        check(recs.size() == sites, "attention site count varies across timesteps");
    std::vector<std::string> row_labels, col_labels;
    for (int64_t t : t_list) col_labels.push_back("t=" + std::to_string(t));
    std::vector<std::vector<Tensor>> grid(sites);
    for (size_t s = 0; s < sites; s++) {
        row_labels.push_back("site" + std::to_string(s) + " (res " +
                             std::to_string(captured.begin()->second[s].res) + ")");
        for (int64_t t : t_list) {
            const AttentionRecord& rec = captured.at(t).at(s);
            Tensor map = heatmap_image(rec, token_index, SceneImage::kSide);
            write_text_file(out_dir + "/site" + std::to_string(s) + "_res" +
                                std::to_string(rec.res) + "_t" + std::to_string(t) + ".pgm",
                            pgm_bytes(map));
            grid[s].push_back(std::move(map));
        }
    }
    write_text_file(out_dir + "/heatmap.svg", svg_map_sheet(row_labels, col_labels, grid));
    std::string ts;
    for (size_t i = 0; i < t_list.size(); i++) ts += (i ? "," : "") + std::to_string(t_list[i]);
    write_text_file(out_dir + "/meta.txt",
                    kv_text({{"config_digest", rm.cfg.digest()},
                             {"caption", caption},
                             {"token", token},
                             {"token_index", std::to_string(token_index)},
                             {"timesteps", ts},
                             {"guidance", rundet::fmt_float(rm.cfg.guidance)},
                             {"seed", std::to_string(seed)}}));
}

// ---------------------------------------------------------------------------
// Report: merge completed run directories (each holding meta.txt and
// aggregate.csv from an evaluation) into one summary.

struct RunDirSummary {
    std::string dir, name;
    std::vector<std::pair<std::string, std::string>> meta;
    std::vector<std::string> mean_cells;   // avg then one cell per skill
    std::vector<std::string> count_cells;  // prompt count then per-skill counts
};

inline RunDirSummary read_run_dir(const std::string& dir) {
    RunDirSummary s;
    s.dir = dir;
    std::filesystem::path p = std::filesystem::path(dir).lexically_normal();
    s.name = p.filename().string();
    if (s.name.empty() || s.name == ".") s.name = p.parent_path().filename().string();
    if (s.name.empty()) s.name = dir;
    s.meta = parse_kv(read_text_file(dir + "/meta.txt"), dir + "/meta.txt");
    std::string agg = read_text_file(dir + "/aggregate.csv");
    std::vector<std::string> lines = rundet::split(agg, '\n');
    if (lines.size() < 3) throw data_error(dir + "/aggregate.csv is truncated");
    std::string want_header = "metric,avg";
    for (auto& a : skill_axis_labels()) want_header += "," + a;
    if (lines[0] != want_header)
        throw data_error(dir + "/aggregate.csv has an unrecognized header: " + lines[0]);
    std::vector<std::string> mean_row = rundet::split(lines[1], ',');
    std::vector<std::string> count_row = rundet::split(lines[2], ',');
    if (mean_row.size() != static_cast<size_t>(kSkillCount) + 2 || mean_row[0] != "mean" ||
        count_row.size() != static_cast<size_t>(kSkillCount) + 2 || count_row[0] != "count")
        throw data_error(dir + "/aggregate.csv rows are malformed");
    s.mean_cells.assign(mean_row.begin() + 1, mean_row.end());
    s.count_cells.assign(count_row.begin() + 1, count_row.end());
    return s;
}

inline void report_runs(const std::vector<std::string>& run_dirs, const std::string& out_dir) {
    if (run_dirs.empty()) throw config_error("report needs at least one run directory");
    std::vector<RunDirSummary> runs;
    for (auto& d : run_dirs) runs.push_back(read_run_dir(d));
    std::set<std::string> names;
    for (auto& r : runs)
        while (!names.insert(r.name).second) r.name += "+";

    std::string bench = kv_find(runs[0].meta, "benchmark_digest", runs[0].dir);
    for (auto& r : runs) {
        std::string b = kv_find(r.meta, "benchmark_digest", r.dir);
        if (b != bench)
            throw data_error("runs evaluate different benchmarks: " + runs[0].dir + " has " +
                             bench + ", " + r.dir + " has " + b);
    }
    std::set<std::string> digests;
    for (auto& r : runs) digests.insert(kv_find(r.meta, "config_digest", r.dir));

    std::vector<std::string> axes = skill_axis_labels();
    std::string csv = "run,strategy,pool,guidance,avg";
    for (auto& a : axes) csv += "," + a;
    csv += "\n";
    for (auto& r : runs) {
        csv += r.name + "," + kv_find(r.meta, "strategy", r.dir) + "," +
               kv_find(r.meta, "pool", r.dir) + "," + kv_find(r.meta, "guidance", r.dir);
        for (auto& c : r.mean_cells) csv += "," + c;
        csv += "\n";
    }

    std::string md = "# Evaluation summary\n\n";
    md += "| run | strategy | pool | guidance | avg |";
    for (auto& a : axes) md += " " + a + " |";
    md += "\n|---|---|---|---|---|";
    for (size_t i = 0; i < axes.size(); i++) md += "---|";
    md += "\n";
    for (auto& r : runs) {
        md += "| " + r.name + " | " + kv_find(r.meta, "strategy", r.dir) + " | " +
              kv_find(r.meta, "pool", r.dir) + " | " + kv_find(r.meta, "guidance", r.dir) + " |";
        for (auto& c : r.mean_cells) md += " " + (c.empty() ? std::string("-") : c) + " |";
        md += "\n";
    }
    md += "\nBenchmark digest: `" + bench + "`.\n";
    if (digests.size() > 1) {
        md += "\n**Flag**: run configs differ (digests:";
        for (auto& d : digests) md += " `" + d + "`";
        md += "); scores are not an apples-to-apples comparison.\n";
    }
    for (auto& r : runs)
        md += "\n- " + r.name + ": seeds " + kv_find(r.meta, "seeds", r.dir) + ", " +
              r.count_cells[0] + " prompts, from `" + r.dir + "`\n";

    std::vector<std::pair<std::string, std::vector<double>>> series;
    for (auto& r : runs) {
        std::vector<double> vals;
        for (size_t i = 1; i < r.mean_cells.size(); i++)
            vals.push_back(r.mean_cells[i].empty() ? 0.0 : std::atof(r.mean_cells[i].c_str()));
        series.emplace_back(r.name, std::move(vals));
    }

    ensure_dir(out_dir);
    write_text_file(out_dir + "/summary.csv", csv);
    write_text_file(out_dir + "/report.md", md);
    write_text_file(out_dir + "/radar.svg", svg_radar(axes, series));
}

}  // namespace t2i
