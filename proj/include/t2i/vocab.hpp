#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "t2i/common.hpp"

namespace t2i {

// Token ids fixed at len..ctx-1 = PAD. Right padding only.
struct TokenSequence {
    std::vector<int32_t> ids;  // length = context
    int32_t valid_len = 0;     // count of real tokens (BOS..EOS inclusive)

    bool valid_at(int64_t i) const { return i < valid_len; }
};

// Closed word-level vocabulary. Ids are dense; the first five are reserved.
struct Vocab {
    static constexpr int32_t kPad = 0;
    static constexpr int32_t kBos = 1;
    static constexpr int32_t kEos = 2;
    static constexpr int32_t kMask = 3;
    static constexpr int32_t kNull = 4;  // the empty-caption token
    static constexpr int32_t kReserved = 5;

    std::vector<std::string> tokens;

    static const std::vector<std::string>& reserved_tokens() {
        static const std::vector<std::string> r = {"<pad>", "<bos>", "<eos>", "<mask>", "<null>"};
        return r;
    }

    // Builds from a word list: reserved tokens first, then sorted unique words.
    static Vocab make(std::vector<std::string> words) {
        std::sort(words.begin(), words.end());
        words.erase(std::unique(words.begin(), words.end()), words.end());
        Vocab v;
        v.tokens = reserved_tokens();
        for (auto& w : words) {
            check(!w.empty(), "empty word");
            for (auto& r : reserved_tokens())
                if (w == r) throw vocab_error("word collides with reserved token: " + w);
            v.tokens.push_back(w);
        }
        v.rebuild_index();
        return v;
    }

    int32_t size() const { return static_cast<int32_t>(tokens.size()); }

    int32_t id(const std::string& tok) const {
        auto it = index_.find(tok);
        if (it == index_.end()) throw vocab_error("unknown word: " + tok);
        return it->second;
    }

    const std::string& token(int32_t i) const {
        if (i < 0 || i >= size()) throw index_error("token id out of range");
        return tokens[static_cast<size_t>(i)];
    }

    // BOS + word ids + EOS, right-padded to `context`.
    TokenSequence tokenize(const std::string& text, int32_t context) const {
        std::istringstream is(text);
        std::vector<int32_t> word_ids;
        std::string w;
        while (is >> w) word_ids.push_back(id(w));
        if (static_cast<int32_t>(word_ids.size()) > context - 2)
            throw length_error("caption exceeds context: " + std::to_string(word_ids.size()) +
                               " words, context " + std::to_string(context));
        TokenSequence seq;
        seq.ids.assign(static_cast<size_t>(context), kPad);
        seq.ids[0] = kBos;
        for (size_t i = 0; i < word_ids.size(); i++) seq.ids[i + 1] = word_ids[i];
        seq.ids[word_ids.size() + 1] = kEos;
        seq.valid_len = static_cast<int32_t>(word_ids.size()) + 2;
        return seq;
    }

    std::string detokenize(const TokenSequence& seq) const {
        std::string out;
        for (int32_t i = 1; i + 1 < seq.valid_len; i++) {
            if (!out.empty()) out += ' ';
            out += token(seq.ids[static_cast<size_t>(i)]);
        }
        return out;
    }

    void save(const std::string& path) const {
        std::ofstream os(path, std::ios::binary);
        if (!os) throw io_error("cannot write vocabulary file: " + path);
        os << "t2i.vocab.v1\n";
        os << "reserved pad=0 bos=1 eos=2 mask=3 null=4\n";
        os << "count=" << size() << "\n";
        os << "\n";
        for (auto& t : tokens) os << t << "\n";
        if (!os) throw io_error("write failure: " + path);
    }

    static Vocab load(const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw io_error("cannot read vocabulary file: " + path);
        std::string line;
        auto next = [&](const char* what) {
            if (!std::getline(is, line)) throw parse_error(std::string("vocabulary header truncated: ") + what);
            return line;
        };
        if (next("magic") != "t2i.vocab.v1") throw parse_error("bad vocabulary magic");
        if (next("reserved") != "reserved pad=0 bos=1 eos=2 mask=3 null=4")
            throw parse_error("bad reserved-id line");
        std::string cnt = next("count");
        if (cnt.rfind("count=", 0) != 0) throw parse_error("bad count line");
        int32_t n = std::stoi(cnt.substr(6));
        if (!next("separator").empty()) throw parse_error("bad header separator");
        Vocab v;
        for (int32_t i = 0; i < n; i++) {
            if (!std::getline(is, line)) throw parse_error("vocabulary body truncated");
            v.tokens.push_back(line);
        }
        for (int32_t i = 0; i < kReserved; i++)
            if (v.tokens[static_cast<size_t>(i)] != reserved_tokens()[static_cast<size_t>(i)])
                throw parse_error("reserved token mismatch at id " + std::to_string(i));
        v.rebuild_index();
        return v;
    }

  private:
    std::unordered_map<std::string, int32_t> index_;

    void rebuild_index() {
        index_.clear();
        for (size_t i = 0; i < tokens.size(); i++) {
            if (!index_.emplace(tokens[i], static_cast<int32_t>(i)).second)
                throw vocab_error("duplicate token: " + tokens[i]);
        }
    }
};

}  // namespace t2i
