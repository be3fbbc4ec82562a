#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "t2i/common.hpp"
#include "t2i/rng.hpp"

// Closed-world compositional benchmark: a prompt grammar over colored shapes,
// deterministic caption templates, an exact reference renderer, a
// nearest-palette detector, and a predicate-satisfaction scorer. Scores are
// exact fractions, so identical inputs always reproduce identical reports.

namespace t2i {

enum class ObjShape { Circle, Square, Triangle };
enum class ObjColor { Red, Green, Blue, Yellow };
enum class ObjSize { Small, Large };
enum class Quadrant { None, Left, Right, Top, Bottom };
enum class Background { Black, White, Gray };
enum class RelKind { LeftOf, RightOf, Above, Below };

// Table column order; Skill doubles as an index into per-skill arrays.
enum class Skill {
    Attribute,
    Scene,
    Spatial,
    Counting,
    Comparison,
    Differentiation,
    Negation,
    Universality,
};
inline constexpr int kSkillCount = 8;

namespace benchdet {

inline const char* shape_word(ObjShape s, bool plural) {
    switch (s) {
        case ObjShape::Circle: return plural ? "circles" : "circle";
        case ObjShape::Square: return plural ? "squares" : "square";
        default: return plural ? "triangles" : "triangle";
    }
}
inline const char* color_word(ObjColor c) {
    switch (c) {
        case ObjColor::Red: return "red";
        case ObjColor::Green: return "green";
        case ObjColor::Blue: return "blue";
        default: return "yellow";
    }
}
inline const char* size_word(ObjSize s) { return s == ObjSize::Small ? "small" : "large"; }
inline const char* quadrant_word(Quadrant q) {
    switch (q) {
        case Quadrant::Left: return "left";
        case Quadrant::Right: return "right";
        case Quadrant::Top: return "top";
        default: return "bottom";
    }
}
inline const char* background_word(Background b) {
    switch (b) {
        case Background::Black: return "black";
        case Background::White: return "white";
        default: return "gray";
    }
}
inline const char* rel_word(RelKind k) {
    switch (k) {
        case RelKind::LeftOf: return "leftof";
        case RelKind::RightOf: return "rightof";
        case RelKind::Above: return "above";
        default: return "below";
    }
}
inline const char* count_word(int n) {
    static const char* words[] = {"zero", "one", "two", "three", "four"};
    check(n >= 1 && n <= 4, "count word out of range");
    return words[n];
}

}  // namespace benchdet

inline const char* skill_name(Skill s) {
    static const char* names[] = {"attribute", "scene",           "spatial",  "counting",
                                  "comparison", "differentiation", "negation", "universality"};
    return names[static_cast<int>(s)];
}

struct ObjectClause {
    ObjShape shape = ObjShape::Circle;
    int count = 1;
    std::optional<ObjColor> color;
    std::optional<ObjSize> size;
    Quadrant quadrant = Quadrant::None;

    auto key() const {
        return std::make_tuple(static_cast<int>(shape), count,
                               color ? static_cast<int>(*color) : -1,
                               size ? static_cast<int>(*size) : -1, static_cast<int>(quadrant));
    }
    bool operator==(const ObjectClause& o) const { return key() == o.key(); }
};

struct RelationClause {
    RelKind kind = RelKind::LeftOf;
    int a = 0, b = 0;  // indices into PromptSpec::objects
    bool operator==(const RelationClause& o) const {
        return kind == o.kind && a == o.a && b == o.b;
    }
};

struct UniversalClause {
    ObjShape shape = ObjShape::Circle;
    ObjColor color = ObjColor::Red;
    bool operator==(const UniversalClause& o) const {
        return shape == o.shape && color == o.color;
    }
};

// One strictly largest object of `shape` colored `largest`, plus other_count
// smaller ones colored `others`.
struct ComparisonClause {
    ObjShape shape = ObjShape::Circle;
    ObjColor largest = ObjColor::Red;
    ObjColor others = ObjColor::Blue;
    int other_count = 1;
    bool operator==(const ComparisonClause& o) const {
        return shape == o.shape && largest == o.largest && others == o.others &&
               other_count == o.other_count;
    }
};

struct PromptSpec {
    std::optional<Background> background;
    std::vector<ObjectClause> objects;
    std::optional<RelationClause> relation;
    std::optional<ComparisonClause> comparison;
    std::vector<ObjShape> negated;
    std::vector<UniversalClause> universals;

    int total_objects() const {
        int n = comparison ? 1 + comparison->other_count : 0;
        for (const auto& c : objects) n += c.count;
        return n;
    }

    std::vector<Skill> tags() const {
        std::vector<Skill> out;
        auto add = [&](Skill s) { out.push_back(s); };
        bool attr = false, spatial = relation.has_value(), counting = false;
        for (const auto& c : objects) {
            if (c.color || c.size) attr = true;
            if (c.quadrant != Quadrant::None) spatial = true;
            if (c.count >= 2) counting = true;
        }
        bool differ = false;
        for (size_t i = 0; i < objects.size(); i++)
            for (size_t j = i + 1; j < objects.size(); j++)
                if (objects[i].shape == objects[j].shape) differ = true;
        if (attr) add(Skill::Attribute);
        if (background) add(Skill::Scene);
        if (spatial) add(Skill::Spatial);
        if (counting) add(Skill::Counting);
        if (comparison) add(Skill::Comparison);
        if (differ) add(Skill::Differentiation);
        if (!negated.empty()) add(Skill::Negation);
        if (!universals.empty()) add(Skill::Universality);
        return out;
    }

    // Sorts clauses into a fixed order and remaps relation indices, so specs
    // that differ only in clause order compare and realize identically.
    PromptSpec canonical() const {
        PromptSpec s = *this;
        std::vector<int> perm(s.objects.size());
        for (size_t i = 0; i < perm.size(); i++) perm[i] = static_cast<int>(i);
        std::stable_sort(perm.begin(), perm.end(),
                         [&](int x, int y) { return s.objects[x].key() < s.objects[y].key(); });
        std::vector<ObjectClause> sorted;
        std::vector<int> inv(perm.size());
        for (size_t i = 0; i < perm.size(); i++) {
            sorted.push_back(s.objects[static_cast<size_t>(perm[i])]);
            inv[static_cast<size_t>(perm[i])] = static_cast<int>(i);
        }
        s.objects = std::move(sorted);
        if (s.relation) {
            s.relation->a = inv[static_cast<size_t>(s.relation->a)];
            s.relation->b = inv[static_cast<size_t>(s.relation->b)];
        }
        std::sort(s.negated.begin(), s.negated.end());
        std::sort(s.universals.begin(), s.universals.end(), [](const auto& a, const auto& b) {
            return std::make_pair(static_cast<int>(a.shape), static_cast<int>(a.color)) <
                   std::make_pair(static_cast<int>(b.shape), static_cast<int>(b.color));
        });
        return s;
    }

    bool operator==(const PromptSpec& o) const {
        return background == o.background && objects == o.objects && relation == o.relation &&
               comparison == o.comparison && negated == o.negated && universals == o.universals;
    }
};

// Throws contract_error when a spec violates the grammar's closed-world
// guarantees (the conditions that make every spec renderable and scorable).
inline void validate(const PromptSpec& spec) {
    check(!spec.objects.empty() || spec.comparison.has_value(), "spec has no positive clause");
    check(spec.total_objects() <= 6, "spec places more than 6 objects");
    for (const auto& c : spec.objects) check(c.count >= 1 && c.count <= 4, "clause count out of 1..4");
    if (spec.comparison) {
        const auto& cmp = *spec.comparison;
        check(cmp.other_count >= 1 && cmp.other_count <= 3, "comparison other_count out of 1..3");
        check(cmp.largest != cmp.others, "comparison colors must differ");
        for (const auto& c : spec.objects)
            check(c.shape != cmp.shape, "comparison shape reused by an object clause");
    }
    // Same-shape clause pairs are only valid as differentiation pairs: both
    // singletons, fully attributed, differing in exactly one attribute. That
    // keeps count predicates disjoint.
    for (size_t i = 0; i < spec.objects.size(); i++) {
        for (size_t j = i + 1; j < spec.objects.size(); j++) {
            const auto& a = spec.objects[i];
            const auto& b = spec.objects[j];
            if (a.shape != b.shape) continue;
            check(a.count == 1 && b.count == 1, "same-shape clauses must be singletons");
            check(a.color && b.color && a.size && b.size,
                  "same-shape clauses must specify color and size");
            check(a.quadrant == Quadrant::None && b.quadrant == Quadrant::None,
                  "same-shape clauses cannot carry quadrants");
            int diffs = (*a.color != *b.color ? 1 : 0) + (*a.size != *b.size ? 1 : 0);
            check(diffs == 1, "same-shape clauses must differ in exactly one attribute");
        }
    }
    std::set<int> seen_neg;
    for (ObjShape s : spec.negated) {
        check(seen_neg.insert(static_cast<int>(s)).second, "duplicate negation");
        for (const auto& c : spec.objects)
            check(c.shape != s, "negated shape also appears positively");
        if (spec.comparison) check(spec.comparison->shape != s, "negated shape also appears positively");
        for (const auto& u : spec.universals)
            check(u.shape != s, "negated shape carries a universal");
    }
    std::set<int> seen_uni;
    for (const auto& u : spec.universals) {
        check(seen_uni.insert(static_cast<int>(u.shape)).second, "duplicate universal shape");
        bool present = false;
        for (const auto& c : spec.objects) {
            if (c.shape != u.shape) continue;
            present = true;
            check(!c.color || *c.color == u.color, "clause color contradicts universal");
        }
        check(present, "universal over a shape with no objects");
        if (spec.comparison) check(spec.comparison->shape != u.shape, "universal over comparison shape");
    }
    int constrained = 0;
    for (const auto& c : spec.objects)
        if (c.quadrant != Quadrant::None) constrained += c.count;
    check(constrained <= 3, "more than 3 quadrant-constrained objects");
    if (spec.relation) {
        const auto& r = *spec.relation;
        int n = static_cast<int>(spec.objects.size());
        check(r.a >= 0 && r.a < n && r.b >= 0 && r.b < n && r.a != r.b,
              "relation endpoints out of range");
        const auto& a = spec.objects[static_cast<size_t>(r.a)];
        const auto& b = spec.objects[static_cast<size_t>(r.b)];
        check(a.count == 1 && b.count == 1, "relation endpoints must be singletons");
        check(a.shape != b.shape, "relation endpoints must differ in shape");
        check(constrained == 0, "relation and quadrants cannot mix");
    }
    check(!spec.tags().empty(), "spec carries no skill tag");
}

// ---------------------------------------------------------------------------
// Caption templates.

namespace benchdet {

inline std::string clause_phrase(const ObjectClause& c) {
    std::string s = count_word(c.count);
    if (c.size) s += std::string(" ") + size_word(*c.size);
    if (c.color) s += std::string(" ") + color_word(*c.color);
    s += std::string(" ") + shape_word(c.shape, c.count > 1);
    if (c.quadrant != Quadrant::None) s += std::string(" on the ") + quadrant_word(c.quadrant);
    return s;
}

inline const char* rel_phrase(RelKind k) {
    switch (k) {
        case RelKind::LeftOf: return "left of";
        case RelKind::RightOf: return "right of";
        case RelKind::Above: return "above";
        default: return "below";
    }
}

}  // namespace benchdet

inline std::string realize_caption(const PromptSpec& raw) {
    validate(raw);
    PromptSpec spec = raw.canonical();
    using namespace benchdet;
    std::vector<std::string> phrases;
    if (spec.relation) {
        const auto& r = *spec.relation;
        phrases.push_back(clause_phrase(spec.objects[static_cast<size_t>(r.a)]) + " " +
                          rel_phrase(r.kind) + " " +
                          clause_phrase(spec.objects[static_cast<size_t>(r.b)]));
    }
    for (size_t i = 0; i < spec.objects.size(); i++) {
        if (spec.relation && (static_cast<int>(i) == spec.relation->a ||
                              static_cast<int>(i) == spec.relation->b))
            continue;
        phrases.push_back(clause_phrase(spec.objects[i]));
    }
    if (spec.comparison) {
        const auto& c = *spec.comparison;
        std::string s = count_word(c.other_count + 1);
        s += std::string(" ") + shape_word(c.shape, true);
        s += std::string(" and the largest ") + shape_word(c.shape, false) + " is " +
             color_word(c.largest);
        s += std::string(" and the other ") + shape_word(c.shape, true) + " are " +
             color_word(c.others);
        phrases.push_back(s);
    }
    for (ObjShape s : spec.negated) phrases.push_back(std::string("no ") + shape_word(s, true));
    for (const auto& u : spec.universals)
        phrases.push_back(std::string("all ") + shape_word(u.shape, true) + " are " +
                          color_word(u.color));
    std::string caption;
    for (size_t i = 0; i < phrases.size(); i++) {
        if (i) caption += " and ";
        caption += phrases[i];
    }
    if (spec.background)
        caption += std::string(" on a ") + background_word(*spec.background) + " background";
    return caption;
}

// Every word the caption templates can emit; the encoder vocabulary for this
// benchmark is built from exactly this list.
inline std::vector<std::string> benchmark_vocabulary() {
    return {"one",    "two",    "three",   "four",      "small", "large",  "red",   "green",
            "blue",   "yellow", "circle",  "circles",   "square", "squares", "triangle",
            "triangles", "on",  "the",     "left",      "right", "top",    "bottom", "of",
            "above",  "below",  "no",      "all",       "are",   "and",    "largest", "is",
            "other",  "a",      "background", "black",  "white", "gray"};
}

// ---------------------------------------------------------------------------
// Spec text form: one canonical spec per line, parenthesized clauses.
// (spec (bg gray) (obj 2 circle red small left) (rel leftof 0 1)
//       (cmp triangle red blue 2) (neg square) (uni circle red))
// "_" stands for an unspecified color, size, or quadrant.

namespace benchdet {

template <class T, class Name>
inline T parse_enum(const std::string& tok, std::initializer_list<T> vals, Name name,
                    const char* what) {
    for (T v : vals)
        if (tok == name(v)) return v;
    throw parse_error(std::string("spec text: unknown ") + what + " '" + tok + "'");
}

inline std::vector<std::vector<std::string>> split_clauses(const std::string& text) {
    // Tokenizes "(spec (a b) (c d))" into [["a","b"],["c","d"]].
    std::vector<std::vector<std::string>> clauses;
    size_t i = 0;
    auto skip_ws = [&] { while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) i++; };
    skip_ws();
    if (i >= text.size() || text[i] != '(') throw parse_error("spec text: missing opening paren");
    i++;
    skip_ws();
    size_t head = i;
    while (head < text.size() && std::isalpha(static_cast<unsigned char>(text[head]))) head++;
    if (text.substr(i, head - i) != "spec") throw parse_error("spec text: expected (spec ...)");
    i = head;
    while (true) {
        skip_ws();
        if (i >= text.size()) throw parse_error("spec text: unterminated spec");
        if (text[i] == ')') {
            i++;
            break;
        }
        if (text[i] != '(') throw parse_error("spec text: expected clause paren");
        i++;
        std::vector<std::string> toks;
        while (true) {
            skip_ws();
            if (i >= text.size()) throw parse_error("spec text: unterminated clause");
            if (text[i] == ')') {
                i++;
                break;
            }
            size_t j = i;
            while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j])) &&
                   text[j] != ')' && text[j] != '(')
                j++;
            toks.push_back(text.substr(i, j - i));
            i = j;
        }
        if (toks.empty()) throw parse_error("spec text: empty clause");
        clauses.push_back(std::move(toks));
    }
    skip_ws();
    if (i != text.size()) throw parse_error("spec text: trailing content");
    return clauses;
}

inline int parse_int(const std::string& tok, const char* what) {
    try {
        size_t pos = 0;
        int v = std::stoi(tok, &pos);
        if (pos != tok.size()) throw std::invalid_argument(tok);
        return v;
    } catch (const std::exception&) {
        throw parse_error(std::string("spec text: bad ") + what + " '" + tok + "'");
    }
}

}  // namespace benchdet

inline std::string spec_to_text(const PromptSpec& raw) {
    validate(raw);
    PromptSpec spec = raw.canonical();
    using namespace benchdet;
    std::ostringstream os;
    os << "(spec";
    if (spec.background) os << " (bg " << background_word(*spec.background) << ")";
    for (const auto& c : spec.objects) {
        os << " (obj " << c.count << " " << shape_word(c.shape, false) << " "
           << (c.color ? color_word(*c.color) : "_") << " "
           << (c.size ? size_word(*c.size) : "_") << " "
           << (c.quadrant != Quadrant::None ? quadrant_word(c.quadrant) : "_") << ")";
    }
    if (spec.relation)
        os << " (rel " << rel_word(spec.relation->kind) << " " << spec.relation->a << " "
           << spec.relation->b << ")";
    if (spec.comparison)
        os << " (cmp " << shape_word(spec.comparison->shape, false) << " "
           << color_word(spec.comparison->largest) << " " << color_word(spec.comparison->others)
           << " " << spec.comparison->other_count << ")";
    for (ObjShape s : spec.negated) os << " (neg " << shape_word(s, false) << ")";
    for (const auto& u : spec.universals)
        os << " (uni " << shape_word(u.shape, false) << " " << color_word(u.color) << ")";
    os << ")";
    return os.str();
}

inline PromptSpec spec_from_text(const std::string& text) {
    using namespace benchdet;
    auto shapes = {ObjShape::Circle, ObjShape::Square, ObjShape::Triangle};
    auto colors = {ObjColor::Red, ObjColor::Green, ObjColor::Blue, ObjColor::Yellow};
    auto shape_of = [&](const std::string& t) {
        return parse_enum(t, shapes, [](ObjShape s) { return shape_word(s, false); }, "shape");
    };
    auto color_of = [&](const std::string& t) {
        return parse_enum(t, colors, [](ObjColor c) { return color_word(c); }, "color");
    };
    PromptSpec spec;
    for (const auto& toks : split_clauses(text)) {
        const std::string& kind = toks[0];
        auto arity = [&](size_t n) {
            if (toks.size() != n + 1)
                throw parse_error("spec text: clause '" + kind + "' expects " + std::to_string(n) +
                                  " fields");
        };
        if (kind == "bg") {
            arity(1);
            spec.background = parse_enum(
                toks[1], {Background::Black, Background::White, Background::Gray},
                [](Background b) { return background_word(b); }, "background");
        } else if (kind == "obj") {
            arity(5);
            ObjectClause c;
            c.count = parse_int(toks[1], "count");
            c.shape = shape_of(toks[2]);
            if (toks[3] != "_") c.color = color_of(toks[3]);
            if (toks[4] != "_") c.size = parse_enum(
                toks[4], {ObjSize::Small, ObjSize::Large},
                [](ObjSize s) { return size_word(s); }, "size");
            if (toks[5] != "_") c.quadrant = parse_enum(
                toks[5], {Quadrant::Left, Quadrant::Right, Quadrant::Top, Quadrant::Bottom},
                [](Quadrant q) { return quadrant_word(q); }, "quadrant");
            spec.objects.push_back(c);
        } else if (kind == "rel") {
            arity(3);
            if (spec.relation) throw parse_error("spec text: duplicate rel clause");
            RelationClause r;
            r.kind = parse_enum(toks[1], {RelKind::LeftOf, RelKind::RightOf, RelKind::Above,
                                          RelKind::Below},
                                [](RelKind k) { return rel_word(k); }, "relation");
            r.a = parse_int(toks[2], "relation index");
            r.b = parse_int(toks[3], "relation index");
            spec.relation = r;
        } else if (kind == "cmp") {
            arity(4);
            if (spec.comparison) throw parse_error("spec text: duplicate cmp clause");
            ComparisonClause c;
            c.shape = shape_of(toks[1]);
            c.largest = color_of(toks[2]);
            c.others = color_of(toks[3]);
            c.other_count = parse_int(toks[4], "comparison count");
            spec.comparison = c;
        } else if (kind == "neg") {
            arity(1);
            spec.negated.push_back(shape_of(toks[1]));
        } else if (kind == "uni") {
            arity(2);
            spec.universals.push_back({shape_of(toks[1]), color_of(toks[2])});
        } else {
            throw parse_error("spec text: unknown clause '" + kind + "'");
        }
    }
    validate(spec);
    return spec.canonical();
}

// ---------------------------------------------------------------------------
// Prompt sampling.

using SkillMix = std::array<double, kSkillCount>;

inline SkillMix uniform_mix() {
    SkillMix m;
    m.fill(1.0);
    return m;
}

namespace benchdet {

inline ObjShape pick_shape(Rng& rng) { return static_cast<ObjShape>(rng.below(3)); }
inline ObjColor pick_color(Rng& rng) { return static_cast<ObjColor>(rng.below(4)); }
inline ObjSize pick_size(Rng& rng) { return static_cast<ObjSize>(rng.below(2)); }
inline Background pick_background(Rng& rng) { return static_cast<Background>(rng.below(3)); }

inline ObjShape pick_unused_shape(Rng& rng, const std::set<int>& used) {
    std::vector<ObjShape> free;
    for (int s = 0; s < 3; s++)
        if (!used.count(s)) free.push_back(static_cast<ObjShape>(s));
    check(!free.empty(), "no unused shape available");
    return free[rng.below(free.size())];
}

}  // namespace benchdet

// Draws a spec whose primary skill follows skill_mix, with one optional
// compatible extra feature. Deterministic in the rng stream.
inline PromptSpec sample_prompt(Rng& rng, const SkillMix& mix) {
    using namespace benchdet;
    double total = 0;
    for (double w : mix) {
        check(w >= 0.0, "skill_mix weight negative");
        total += w;
    }
    check(total > 0.0, "skill_mix has no positive weight");
    double u = static_cast<double>(rng.uniform()) * total;
    int primary = -1;
    double acc = 0;
    for (int s = 0; s < kSkillCount; s++) {
        acc += mix[static_cast<size_t>(s)];
        if (mix[static_cast<size_t>(s)] > 0 && u < acc) {
            primary = s;
            break;
        }
    }
    // u == total can slip past every bucket; take the last positive weight.
    if (primary < 0)
        for (int s = kSkillCount - 1; s >= 0; s--)
            if (mix[static_cast<size_t>(s)] > 0) {
                primary = s;
                break;
            }

    PromptSpec spec;
    std::set<int> used;  // shapes already claimed by any clause
    auto add_plain = [&](ObjShape sh, int count, std::optional<ObjColor> col,
                         std::optional<ObjSize> sz, Quadrant q) {
        spec.objects.push_back({sh, count, col, sz, q});
        used.insert(static_cast<int>(sh));
    };
    switch (static_cast<Skill>(primary)) {
        case Skill::Attribute: {
            int clauses = 1 + static_cast<int>(rng.below(2));
            for (int i = 0; i < clauses; i++) {
                ObjShape sh = pick_unused_shape(rng, used);
                std::optional<ObjSize> sz;
                if (rng.below(2)) sz = pick_size(rng);
                add_plain(sh, 1 + static_cast<int>(rng.below(2)), pick_color(rng), sz,
                          Quadrant::None);
            }
            break;
        }
        case Skill::Scene: {
            spec.background = pick_background(rng);
            std::optional<ObjColor> col;
            if (rng.below(2)) col = pick_color(rng);
            add_plain(pick_shape(rng), 1 + static_cast<int>(rng.below(3)), col, std::nullopt,
                      Quadrant::None);
            break;
        }
        case Skill::Spatial: {
            if (rng.below(2)) {
                Quadrant q = static_cast<Quadrant>(1 + rng.below(4));
                add_plain(pick_shape(rng), 1 + static_cast<int>(rng.below(2)), pick_color(rng),
                          std::nullopt, q);
            } else {
                ObjShape sa = pick_shape(rng);
                ObjShape sb = pick_unused_shape(rng, {static_cast<int>(sa)});
                add_plain(sa, 1, pick_color(rng), std::nullopt, Quadrant::None);
                add_plain(sb, 1, pick_color(rng), std::nullopt, Quadrant::None);
                spec.relation = {static_cast<RelKind>(rng.below(4)), 0, 1};
            }
            break;
        }
        case Skill::Counting: {
            std::optional<ObjColor> col;
            if (rng.below(4) < 3) col = pick_color(rng);
            std::optional<ObjSize> sz;
            if (rng.below(3) == 0) sz = pick_size(rng);
            add_plain(pick_shape(rng), 2 + static_cast<int>(rng.below(3)), col, sz,
                      Quadrant::None);
            if (rng.below(2)) {
                ObjShape sh = pick_unused_shape(rng, used);
                add_plain(sh, 1, pick_color(rng), std::nullopt, Quadrant::None);
            }
            break;
        }
        case Skill::Comparison: {
            ComparisonClause c;
            c.shape = pick_shape(rng);
            c.largest = pick_color(rng);
            do {
                c.others = pick_color(rng);
            } while (c.others == c.largest);
            c.other_count = 1 + static_cast<int>(rng.below(3));
            spec.comparison = c;
            used.insert(static_cast<int>(c.shape));
            break;
        }
        case Skill::Differentiation: {
            ObjShape sh = pick_shape(rng);
            ObjColor c1 = pick_color(rng);
            ObjSize z1 = pick_size(rng);
            if (rng.below(2)) {
                ObjColor c2;
                do {
                    c2 = pick_color(rng);
                } while (c2 == c1);
                add_plain(sh, 1, c1, z1, Quadrant::None);
                add_plain(sh, 1, c2, z1, Quadrant::None);
            } else {
                add_plain(sh, 1, c1, z1, Quadrant::None);
                add_plain(sh, 1, c1, z1 == ObjSize::Small ? ObjSize::Large : ObjSize::Small,
                          Quadrant::None);
            }
            break;
        }
        case Skill::Negation: {
            ObjShape neg = pick_shape(rng);
            spec.negated.push_back(neg);
            ObjShape sh = pick_unused_shape(rng, {static_cast<int>(neg)});
            used.insert(static_cast<int>(neg));
            std::optional<ObjColor> col;
            if (rng.below(2)) col = pick_color(rng);
            add_plain(sh, 1 + static_cast<int>(rng.below(2)), col, std::nullopt, Quadrant::None);
            break;
        }
        case Skill::Universality: {
            ObjShape sh = pick_shape(rng);
            ObjColor col = pick_color(rng);
            bool spell_color = rng.below(2) == 0;
            add_plain(sh, 2 + static_cast<int>(rng.below(2)),
                      spell_color ? std::optional<ObjColor>(col) : std::nullopt, std::nullopt,
                      Quadrant::None);
            spec.universals.push_back({sh, col});
            break;
        }
    }

    // One optional extra feature, only where it cannot break satisfiability.
    if (rng.below(100) < 35) {
        std::vector<int> options;
        if (!spec.background) options.push_back(0);
        bool has_quadrant = false, has_pair = spec.objects.size() == 2 &&
                                              spec.objects[0].shape == spec.objects[1].shape;
        for (const auto& c : spec.objects)
            if (c.quadrant != Quadrant::None) has_quadrant = true;
        if (!spec.relation && !has_quadrant && !has_pair && !spec.objects.empty() &&
            spec.objects[0].count <= 3)
            options.push_back(1);
        if (used.size() < 3) options.push_back(2);
        if (!options.empty()) {
            switch (options[rng.below(options.size())]) {
                case 0: spec.background = pick_background(rng); break;
                case 1:
                    spec.objects[0].quadrant = static_cast<Quadrant>(1 + rng.below(4));
                    break;
                default: spec.negated.push_back(pick_unused_shape(rng, used)); break;
            }
        }
    }
    spec = spec.canonical();
    validate(spec);
    return spec;
}

// ---------------------------------------------------------------------------
// Images and the reference renderer.

struct SceneImage {
    static constexpr int kSide = 32;
    std::array<uint8_t, kSide * kSide * 3> rgb{};

    uint8_t* at(int x, int y) { return rgb.data() + (y * kSide + x) * 3; }
    const uint8_t* at(int x, int y) const { return rgb.data() + (y * kSide + x) * 3; }

    // HWC float view in [-1, 1] for the model.
    void to_floats(float* dst) const {
        for (size_t i = 0; i < rgb.size(); i++)
            dst[i] = static_cast<float>(rgb[i]) / 127.5f - 1.0f;
    }
    // Clamps and rounds model output back to 8-bit; the only place sampler
    // output gets clipped.
    static SceneImage from_floats(const float* src) {
        SceneImage img;
        for (size_t i = 0; i < img.rgb.size(); i++) {
            float v = (std::min(1.0f, std::max(-1.0f, src[i])) + 1.0f) * 127.5f;
            img.rgb[i] = static_cast<uint8_t>(v + 0.5f);
        }
        return img;
    }
    bool operator==(const SceneImage& o) const { return rgb == o.rgb; }
};

namespace benchdet {

// Palette indices: 0..2 backgrounds, 3..6 object colors.
inline constexpr uint8_t kPalette[7][3] = {
    {0, 0, 0},        // black
    {255, 255, 255},  // white
    {128, 128, 128},  // gray
    {255, 0, 0},      // red
    {0, 255, 0},      // green
    {0, 0, 255},      // blue
    {255, 255, 0},    // yellow
};
inline int palette_of(Background b) { return static_cast<int>(b); }
inline int palette_of(ObjColor c) { return 3 + static_cast<int>(c); }

inline constexpr int kSmallSide = 5;
inline constexpr int kLargeSide = 9;
// Pixel-offset mask of one shape at side s, centered on (0,0).
inline std::vector<std::pair<int, int>> shape_mask(ObjShape shape, int s) {
    std::vector<std::pair<int, int>> px;
    int h = s / 2;
    switch (shape) {
        case ObjShape::Square:
            for (int dy = -h; dy <= h; dy++)
                for (int dx = -h; dx <= h; dx++) px.push_back({dx, dy});
            break;
        case ObjShape::Circle:
            for (int dy = -h; dy <= h; dy++)
                for (int dx = -h; dx <= h; dx++)
                    if (dx * dx + dy * dy <= h * h + h) px.push_back({dx, dy});
            break;
        case ObjShape::Triangle:
            for (int k = 0; k < s; k++)
                for (int dx = -(k / 2); dx <= k / 2; dx++) px.push_back({dx, k - h});
            break;
    }
    return px;
}

// 3x3 cell grid; one object per cell guarantees no overlap.
inline constexpr int kGrid = 3;
inline void cell_span(int c, int& lo, int& hi) {
    lo = c * 11;
    hi = std::min(c * 11 + 10, SceneImage::kSide - 1);
}

enum class Axis { None, Col, Row };
struct PlaceConstraint {
    Axis axis = Axis::None;
    int index = 0;  // grid column or row
};

inline PlaceConstraint constraint_of(Quadrant q) {
    switch (q) {
        case Quadrant::Left: return {Axis::Col, 0};
        case Quadrant::Right: return {Axis::Col, kGrid - 1};
        case Quadrant::Top: return {Axis::Row, 0};
        case Quadrant::Bottom: return {Axis::Row, kGrid - 1};
        default: return {};
    }
}

}  // namespace benchdet

// One rendered object, for detector cross-checks and debugging.
struct PlacedObject {
    ObjShape shape;
    ObjColor color;
    ObjSize size;
    int cx = 0, cy = 0;
};

// Renders a spec exactly: correct counts, colors, sizes, quadrants, relation
// geometry, comparison size ratios, and universal recoloring; negated shapes
// never appear. Jitter comes from rng inside the placement cells.
inline SceneImage render_reference(const PromptSpec& raw, Rng& rng,
                                   std::vector<PlacedObject>* placed_out = nullptr) {
    using namespace benchdet;
    validate(raw);
    PromptSpec spec = raw.canonical();
    Background bg = spec.background ? *spec.background : pick_background(rng);

    struct Pending {
        ObjShape shape;
        ObjColor color;
        ObjSize size;
        PlaceConstraint where;
    };
    std::vector<Pending> pend;
    auto universal_color = [&](ObjShape sh) -> std::optional<ObjColor> {
        for (const auto& u : spec.universals)
            if (u.shape == sh) return u.color;
        return std::nullopt;
    };
    for (size_t ci = 0; ci < spec.objects.size(); ci++) {
        const auto& c = spec.objects[ci];
        PlaceConstraint where = constraint_of(c.quadrant);
        if (spec.relation && (static_cast<int>(ci) == spec.relation->a ||
                              static_cast<int>(ci) == spec.relation->b)) {
            bool is_a = static_cast<int>(ci) == spec.relation->a;
            switch (spec.relation->kind) {
                case RelKind::LeftOf: where = {Axis::Col, is_a ? 0 : kGrid - 1}; break;
                case RelKind::RightOf: where = {Axis::Col, is_a ? kGrid - 1 : 0}; break;
                case RelKind::Above: where = {Axis::Row, is_a ? 0 : kGrid - 1}; break;
                case RelKind::Below: where = {Axis::Row, is_a ? kGrid - 1 : 0}; break;
            }
        }
        for (int n = 0; n < c.count; n++) {
            ObjColor col;
            if (c.color) col = *c.color;
            else if (auto u = universal_color(c.shape)) col = *u;
            else col = pick_color(rng);
            ObjSize sz = c.size ? *c.size : pick_size(rng);
            pend.push_back({c.shape, col, sz, where});
        }
    }
    if (spec.comparison) {
        const auto& c = *spec.comparison;
        pend.push_back({c.shape, c.largest, ObjSize::Large, {}});
        for (int n = 0; n < c.other_count; n++)
            pend.push_back({c.shape, c.others, ObjSize::Small, {}});
    }

    // Constrained objects claim cells first; the grammar caps them so a
    // random free cell of the right class always exists.
    std::vector<size_t> order(pend.size());
    for (size_t i = 0; i < order.size(); i++) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        return (pend[a].where.axis != Axis::None) > (pend[b].where.axis != Axis::None);
    });
    std::array<bool, kGrid * kGrid> taken{};
    std::vector<std::pair<int, int>> cell_of(pend.size());
    for (size_t oi : order) {
        std::vector<std::pair<int, int>> free;
        for (int cy = 0; cy < kGrid; cy++) {
            for (int cx = 0; cx < kGrid; cx++) {
                if (taken[static_cast<size_t>(cy * kGrid + cx)]) continue;
                const auto& w = pend[oi].where;
                if (w.axis == Axis::Col && cx != w.index) continue;
                if (w.axis == Axis::Row && cy != w.index) continue;
                free.push_back({cx, cy});
            }
        }
        check(!free.empty(), "render: no free cell satisfies the spec");
        auto cell = free[rng.below(free.size())];
        taken[static_cast<size_t>(cell.second * kGrid + cell.first)] = true;
        cell_of[oi] = cell;
    }

    SceneImage img;
    const uint8_t* bgc = kPalette[palette_of(bg)];
    for (int i = 0; i < SceneImage::kSide * SceneImage::kSide; i++)
        std::copy(bgc, bgc + 3, img.rgb.data() + i * 3);
    std::vector<PlacedObject> placed;
    for (size_t oi = 0; oi < pend.size(); oi++) {
        const auto& p = pend[oi];
        int side = p.size == ObjSize::Small ? kSmallSide : kLargeSide;
        int half = side / 2;
        int x0, x1, y0, y1;
        cell_span(cell_of[oi].first, x0, x1);
        cell_span(cell_of[oi].second, y0, y1);
        // One blank row/column at each cell's high edge keeps same-colored
        // neighbors in adjacent cells from merging into one component.
        x1 -= 1;
        y1 -= 1;
        int cx = x0 + half + static_cast<int>(rng.below(static_cast<uint64_t>(x1 - x0 - 2 * half + 1)));
        int cy = y0 + half + static_cast<int>(rng.below(static_cast<uint64_t>(y1 - y0 - 2 * half + 1)));
        const uint8_t* oc = kPalette[palette_of(p.color)];
        for (auto [dx, dy] : shape_mask(p.shape, side))
            std::copy(oc, oc + 3, img.at(cx + dx, cy + dy));
        placed.push_back({p.shape, p.color, p.size, cx, cy});
    }
    if (placed_out) *placed_out = std::move(placed);
    return img;
}

// ---------------------------------------------------------------------------
// Detection.

struct DetectedObject {
    ObjShape shape;
    int palette;                   // palette index of the component color
    std::optional<ObjColor> color;  // set when palette is an object color
    ObjSize size;
    double cx = 0, cy = 0;  // pixel centroid
    int area = 0;
};

namespace benchdet {

inline constexpr int kMinComponent = 4;
inline constexpr double kSquareFill = 0.92;
inline constexpr double kCircleFill = 0.68;
inline constexpr int kLargeArea = 33;  // between max small (25) and min large (41)

inline int nearest_palette(const uint8_t* px) {
    int best = 0;
    int bestd = 1 << 30;
    for (int p = 0; p < 7; p++) {
        int d = 0;
        for (int c = 0; c < 3; c++) {
            int diff = static_cast<int>(px[c]) - static_cast<int>(kPalette[p][c]);
            d += diff * diff;
        }
        if (d < bestd) {
            bestd = d;
            best = p;
        }
    }
    return best;
}

}  // namespace benchdet

inline int detect_background(const SceneImage& img) {
    using namespace benchdet;
    int counts[3] = {0, 0, 0};
    for (int i = 0; i < SceneImage::kSide * SceneImage::kSide; i++) {
        int p = nearest_palette(img.rgb.data() + i * 3);
        if (p < 3) counts[p]++;
    }
    int best = -1, bestn = 0;
    for (int p = 0; p < 3; p++) {
        if (counts[p] > bestn) {
            bestn = counts[p];
            best = p;
        }
    }
    return best;  // -1 when no pixel quantizes to a background color
}

// Nearest-palette quantization, then single-color 4-connected components of
// at least 4 pixels; shape from bounding-box fill ratio, size from area.
inline std::vector<DetectedObject> detect_objects(const SceneImage& img) {
    using namespace benchdet;
    constexpr int kSide = SceneImage::kSide;
    std::array<int8_t, kSide * kSide> quant;
    for (int i = 0; i < kSide * kSide; i++)
        quant[static_cast<size_t>(i)] = static_cast<int8_t>(nearest_palette(img.rgb.data() + i * 3));
    int bg = detect_background(img);
    std::array<bool, kSide * kSide> seen{};
    std::vector<DetectedObject> out;
    std::vector<int> stack;
    for (int start = 0; start < kSide * kSide; start++) {
        if (seen[static_cast<size_t>(start)]) continue;
        int color = quant[static_cast<size_t>(start)];
        if (color == bg) continue;
        seen[static_cast<size_t>(start)] = true;
        stack.assign(1, start);
        int area = 0;
        long sx = 0, sy = 0;
        int minx = kSide, maxx = -1, miny = kSide, maxy = -1;
        while (!stack.empty()) {
            int i = stack.back();
            stack.pop_back();
            int x = i % kSide, y = i / kSide;
            area++;
            sx += x;
            sy += y;
            minx = std::min(minx, x);
            maxx = std::max(maxx, x);
            miny = std::min(miny, y);
            maxy = std::max(maxy, y);
            const int dx[4] = {1, -1, 0, 0};
            const int dy[4] = {0, 0, 1, -1};
            for (int d = 0; d < 4; d++) {
                int nx = x + dx[d], ny = y + dy[d];
                if (nx < 0 || nx >= kSide || ny < 0 || ny >= kSide) continue;
                int j = ny * kSide + nx;
                if (seen[static_cast<size_t>(j)] || quant[static_cast<size_t>(j)] != color) continue;
                seen[static_cast<size_t>(j)] = true;
                stack.push_back(j);
            }
        }
        if (area < kMinComponent) continue;
        DetectedObject obj;
        obj.palette = color;
        if (color >= 3) obj.color = static_cast<ObjColor>(color - 3);
        obj.area = area;
        obj.cx = static_cast<double>(sx) / area;
        obj.cy = static_cast<double>(sy) / area;
        double fill = static_cast<double>(area) /
                      (static_cast<double>(maxx - minx + 1) * static_cast<double>(maxy - miny + 1));
        obj.shape = fill >= kSquareFill ? ObjShape::Square
                                        : (fill >= kCircleFill ? ObjShape::Circle : ObjShape::Triangle);
        obj.size = area >= kLargeArea ? ObjSize::Large : ObjSize::Small;
        out.push_back(obj);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Scoring.

namespace benchdet {

inline constexpr double kHalfLine = (SceneImage::kSide - 1) / 2.0;  // 15.5

inline bool in_quadrant(const DetectedObject& o, Quadrant q) {
    switch (q) {
        case Quadrant::Left: return o.cx < kHalfLine;
        case Quadrant::Right: return o.cx > kHalfLine;
        case Quadrant::Top: return o.cy < kHalfLine;
        case Quadrant::Bottom: return o.cy > kHalfLine;
        default: return true;
    }
}

inline bool matches(const DetectedObject& o, const ObjectClause& c) {
    if (o.shape != c.shape) return false;
    if (c.color && (!o.color || *o.color != *c.color)) return false;
    if (c.size && o.size != *c.size) return false;
    return true;
}

}  // namespace benchdet

struct ScoreDetail {
    int satisfied = 0;
    int total = 0;
    double value() const { return total ? static_cast<double>(satisfied) / total : 0.0; }
};

// Compiles the spec into atomic predicates and counts how many the image
// satisfies. Every predicate is exact, so the score is a ratio of integers.
inline ScoreDetail score_detail(const SceneImage& img, const PromptSpec& raw) {
    using namespace benchdet;
    validate(raw);
    PromptSpec spec = raw.canonical();
    std::vector<DetectedObject> objs = detect_objects(img);
    ScoreDetail d;
    auto pred = [&](bool ok) {
        d.total++;
        if (ok) d.satisfied++;
    };

    if (spec.background) pred(detect_background(img) == palette_of(*spec.background));

    for (const auto& c : spec.objects) {
        std::vector<const DetectedObject*> m;
        for (const auto& o : objs)
            if (matches(o, c)) m.push_back(&o);
        pred(static_cast<int>(m.size()) == c.count);
        if (c.quadrant != Quadrant::None) {
            bool ok = !m.empty();
            for (const auto* o : m) ok = ok && in_quadrant(*o, c.quadrant);
            pred(ok);
        }
    }

    if (spec.relation) {
        const auto& r = *spec.relation;
        std::vector<const DetectedObject*> ma, mb;
        for (const auto& o : objs) {
            if (matches(o, spec.objects[static_cast<size_t>(r.a)])) ma.push_back(&o);
            if (matches(o, spec.objects[static_cast<size_t>(r.b)])) mb.push_back(&o);
        }
        bool ok = !ma.empty() && !mb.empty();
        for (const auto* a : ma) {
            for (const auto* b : mb) {
                switch (r.kind) {
                    case RelKind::LeftOf: ok = ok && a->cx < b->cx; break;
                    case RelKind::RightOf: ok = ok && a->cx > b->cx; break;
                    case RelKind::Above: ok = ok && a->cy < b->cy; break;
                    case RelKind::Below: ok = ok && a->cy > b->cy; break;
                }
            }
        }
        pred(ok);
    }

    if (spec.comparison) {
        const auto& c = *spec.comparison;
        std::vector<const DetectedObject*> m;
        for (const auto& o : objs)
            if (o.shape == c.shape) m.push_back(&o);
        pred(static_cast<int>(m.size()) == c.other_count + 1);
        const DetectedObject* big = nullptr;
        for (const auto* o : m)
            if (!big || o->area > big->area) big = o;
        bool big_ok = big != nullptr && big->color && *big->color == c.largest;
        bool others_ok = true;
        for (const auto* o : m) {
            if (o == big) continue;
            big_ok = big_ok && 2 * big->area >= 3 * o->area;  // area ratio >= 1.5
            others_ok = others_ok && o->color && *o->color == c.others;
        }
        pred(big_ok);
        pred(others_ok);
    }

    for (ObjShape s : spec.negated) {
        bool any = false;
        for (const auto& o : objs) any = any || o.shape == s;
        pred(!any);
    }

    for (const auto& u : spec.universals) {
        bool any = false, all = true;
        for (const auto& o : objs) {
            if (o.shape != u.shape) continue;
            any = true;
            all = all && o.color && *o.color == u.color;
        }
        pred(any && all);
    }
    return d;
}

inline double score(const SceneImage& img, const PromptSpec& spec) {
    return score_detail(img, spec).value();
}

// ---------------------------------------------------------------------------
// Corpus.

struct CorpusPair {
    PromptSpec spec;
    std::string caption;
    SceneImage image;
};

struct Corpus {
    std::vector<CorpusPair> pairs;
    std::vector<PromptSpec> held_out;
    std::vector<std::string> held_out_captions;
};

// Seed-deterministic corpus: n_pairs training pairs under a uniform skill
// mix, plus a held-out prompt set quota-balanced across skills whose captions
// never collide with a training caption.
inline Corpus build_corpus(int64_t n_pairs, Rng& rng, int64_t n_held_out = 400) {
    check(n_pairs >= 1, "build_corpus: n_pairs must be positive");
    check(n_held_out >= 0, "build_corpus: n_held_out negative");
    Corpus corpus;
    std::set<std::string> train_captions;
    SkillMix mix = uniform_mix();
    for (int64_t i = 0; i < n_pairs; i++) {
        PromptSpec spec = sample_prompt(rng, mix);
        std::string caption = realize_caption(spec);
        SceneImage img = render_reference(spec, rng);
        train_captions.insert(caption);
        corpus.pairs.push_back({std::move(spec), std::move(caption), img});
    }
    std::set<std::string> held_captions;
    for (int64_t i = 0; i < n_held_out; i++) {
        SkillMix solo{};
        solo[static_cast<size_t>(i % kSkillCount)] = 1.0;
        PromptSpec spec;
        std::string caption;
        int tries = 0;
        do {
            check(++tries <= 10000, "build_corpus: cannot find a disjoint held-out prompt");
            spec = sample_prompt(rng, solo);
            caption = realize_caption(spec);
        } while (train_captions.count(caption) || held_captions.count(caption));
        held_captions.insert(caption);
        corpus.held_out.push_back(std::move(spec));
        corpus.held_out_captions.push_back(std::move(caption));
    }
    return corpus;
}

namespace benchdet {

inline void hex_encode(const uint8_t* data, size_t n, std::string& out) {
    static const char* digits = "0123456789abcdef";
    for (size_t i = 0; i < n; i++) {
        out += digits[data[i] >> 4];
        out += digits[data[i] & 0xf];
    }
}

inline int hex_nibble(char c) {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    throw parse_error("corpus: bad hex digit");
}

}  // namespace benchdet

// Text corpus format: header line, then one caption TAB hex-image line per
// pair, then one canonical spec line per held-out prompt.
inline std::string corpus_to_text(const Corpus& corpus) {
    std::string out = "T2IC1 " + std::to_string(corpus.pairs.size()) + " " +
                      std::to_string(corpus.held_out.size()) + "\n";
    for (const auto& p : corpus.pairs) {
        out += p.caption;
        out += '\t';
        benchdet::hex_encode(p.image.rgb.data(), p.image.rgb.size(), out);
        out += '\n';
    }
    for (const auto& s : corpus.held_out) {
        out += spec_to_text(s);
        out += '\n';
    }
    return out;
}

inline Corpus corpus_from_text(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line)) throw parse_error("corpus: empty file");
    std::istringstream head(line);
    std::string magic;
    int64_t n_pairs = -1, n_held = -1;
    head >> magic >> n_pairs >> n_held;
    if (magic != "T2IC1" || n_pairs < 0 || n_held < 0)
        throw parse_error("corpus: bad header '" + line + "'");
    Corpus corpus;
    for (int64_t i = 0; i < n_pairs; i++) {
        if (!std::getline(is, line)) throw parse_error("corpus: truncated pair section");
        size_t tab = line.find('\t');
        if (tab == std::string::npos) throw parse_error("corpus: pair line missing tab");
        CorpusPair p;
        p.caption = line.substr(0, tab);
        std::string hex = line.substr(tab + 1);
        if (hex.size() != p.image.rgb.size() * 2) throw parse_error("corpus: bad image hex length");
        for (size_t j = 0; j < p.image.rgb.size(); j++)
            p.image.rgb[j] = static_cast<uint8_t>((benchdet::hex_nibble(hex[2 * j]) << 4) |
                                                  benchdet::hex_nibble(hex[2 * j + 1]));
        corpus.pairs.push_back(std::move(p));
    }
    for (int64_t i = 0; i < n_held; i++) {
        if (!std::getline(is, line)) throw parse_error("corpus: truncated held-out section");
        corpus.held_out.push_back(spec_from_text(line));
        corpus.held_out_captions.push_back(realize_caption(corpus.held_out.back()));
    }
    return corpus;
}

// ---------------------------------------------------------------------------
// Reports.

struct EvalReport {
    std::vector<double> prompt_scores;
    std::vector<std::vector<Skill>> prompt_tags;
    std::array<int, kSkillCount> skill_count{};
    std::array<double, kSkillCount> skill_mean{};
    double aggregate = 0.0;
    // Metadata echoed into report headers.
    std::string model, strategy;
    double guidance = 0.0;
    std::vector<uint64_t> seeds;
};

// Pools per-prompt scores into per-skill means; skills with no tagged prompt
// keep count 0 and are reported absent, not zero.
inline EvalReport aggregate_scores(const std::vector<double>& scores,
                                   const std::vector<PromptSpec>& specs) {
    check(scores.size() == specs.size(), "aggregate: score/spec count mismatch");
    check(!scores.empty(), "aggregate: no prompts");
    EvalReport r;
    std::array<double, kSkillCount> sums{};
    double total = 0;
    for (size_t i = 0; i < scores.size(); i++) {
        check(scores[i] >= 0.0 && scores[i] <= 1.0, "aggregate: score out of [0,1]");
        r.prompt_scores.push_back(scores[i]);
        r.prompt_tags.push_back(specs[i].tags());
        total += scores[i];
        for (Skill s : r.prompt_tags.back()) {
            sums[static_cast<size_t>(s)] += scores[i];
            r.skill_count[static_cast<size_t>(s)]++;
        }
    }
    r.aggregate = total / static_cast<double>(scores.size());
    for (int s = 0; s < kSkillCount; s++)
        if (r.skill_count[static_cast<size_t>(s)] > 0)
            r.skill_mean[static_cast<size_t>(s)] =
                sums[static_cast<size_t>(s)] / r.skill_count[static_cast<size_t>(s)];
    return r;
}

namespace benchdet {

inline std::string fixed6(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

}  // namespace benchdet

// One row per prompt: id, |-joined skill tags, score.
inline std::string prompt_csv(const EvalReport& r) {
    std::string out = "prompt_id,skills,score\n";
    for (size_t i = 0; i < r.prompt_scores.size(); i++) {
        out += std::to_string(i) + ",";
        for (size_t t = 0; t < r.prompt_tags[i].size(); t++) {
            if (t) out += "|";
            out += skill_name(r.prompt_tags[i][t]);
        }
        out += "," + benchdet::fixed6(r.prompt_scores[i]) + "\n";
    }
    return out;
}

// Mean and count rows over the aggregate plus one column per skill, in table
// column order; untagged skills have an empty mean cell.
inline std::string aggregate_csv(const EvalReport& r) {
    std::string out = "metric,avg";
    for (int s = 0; s < kSkillCount; s++) out += std::string(",") + skill_name(static_cast<Skill>(s));
    out += "\nmean," + benchdet::fixed6(r.aggregate);
    for (int s = 0; s < kSkillCount; s++) {
        out += ",";
        if (r.skill_count[static_cast<size_t>(s)] > 0)
            out += benchdet::fixed6(r.skill_mean[static_cast<size_t>(s)]);
    }
    out += "\ncount," + std::to_string(r.prompt_scores.size());
    for (int s = 0; s < kSkillCount; s++)
        out += "," + std::to_string(r.skill_count[static_cast<size_t>(s)]);
    out += "\n";
    return out;
}

}  // namespace t2i
