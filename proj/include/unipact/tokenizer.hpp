#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace unipact {

// Fixed ids at the bottom of every vocabulary: five structural specials
// followed by the two answer words. Answer extraction relies on "Yes"/"No"
// always being single tokens with known ids.
inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;
inline constexpr int kBosId = 2;
inline constexpr int kEosId = 3;
inline constexpr int kEcgSlotId = 4;
inline constexpr int kYesId = 5;
inline constexpr int kNoId = 6;
inline constexpr size_t kNumReservedTokens = 7;
inline constexpr size_t kNumSpecialTokens = 5;  // ids [0, 5) are dropped by decode

inline const std::vector<std::string>& reserved_tokens() {
    static const std::vector<std::string> toks = {"<pad>", "<unk>", "<bos>",
                                                  "<eos>", "<ecg>", "Yes",
                                                  "No"};
    return toks;
}

// Word-level split: whitespace separates tokens, punctuation marks become
// single-character tokens, except that a '.' flanked by digits stays inside
// its token so numeric literals like "88.0" survive as one word.
inline std::vector<std::string> split_tokens(std::string_view text) {
    auto is_punct = [](char c) {
        switch (c) {
            case '.':
            case ',':
            case ':':
            case ';':
            case '?':
            case '!':
            case '(':
            case ')':
            case '"':
                return true;
            default:
                return false;
        }
    };
    auto is_digit = [](char c) { return c >= '0' && c <= '9'; };
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) {
            out.push_back(cur);
            cur.clear();
        }
    };
    for (size_t i = 0; i < text.size(); ++i) {
        char c = text[i];
        if (std::isspace(static_cast<unsigned char>(c))) {
            flush();
            continue;
        }
        if (is_punct(c)) {
            if (c == '.' && !cur.empty() && is_digit(text[i - 1]) && i + 1 < text.size() &&
                is_digit(text[i + 1])) {
                cur.push_back(c);
                continue;
            }
            flush();
            out.emplace_back(1, c);
            continue;
        }
        cur.push_back(c);
    }
    flush();
    return out;
}

class Vocab {
public:
    static Vocab build(const std::vector<std::string>& corpus, size_t max_size) {
        if (corpus.empty()) throw std::invalid_argument("build_vocab: corpus is empty");
        if (max_size < kNumReservedTokens)
            throw std::invalid_argument("build_vocab: max_size " + std::to_string(max_size) +
                                        " is smaller than the " +
                                        std::to_string(kNumReservedTokens) + " reserved tokens");
        std::unordered_map<std::string, uint64_t> freq;
        for (const auto& doc : corpus)
            for (auto& tok : split_tokens(doc)) ++freq[tok];
        for (const auto& r : reserved_tokens()) freq.erase(r);
        std::vector<std::pair<std::string, uint64_t>> ranked(freq.begin(), freq.end());
        std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
            if (a.second != b.second) return a.second > b.second;
            return a.first < b.first;
        });
        Vocab v;
        v.id2tok_ = reserved_tokens();
        for (auto& [tok, count] : ranked) {
            (void)count;
            if (v.id2tok_.size() >= max_size) break;
            v.id2tok_.push_back(tok);
        }
        v.rebuild_map();
        return v;
    }

    size_t size() const { return id2tok_.size(); }

    const std::string& token(int id) const {
        if (id < 0 || static_cast<size_t>(id) >= id2tok_.size())
            throw std::out_of_range("vocab: id " + std::to_string(id) + " out of range (size " +
                                    std::to_string(id2tok_.size()) + ")");
        return id2tok_[static_cast<size_t>(id)];
    }

    int id_of(std::string_view tok) const {
        auto it = tok2id_.find(std::string(tok));
        return it == tok2id_.end() ? kUnkId : it->second;
    }

    bool contains(std::string_view tok) const { return tok2id_.count(std::string(tok)) > 0; }

    std::vector<int> encode(std::string_view text) const {
        std::vector<int> ids;
        for (auto& tok : split_tokens(text)) ids.push_back(id_of(tok));
        return ids;
    }

    // Joins non-special tokens with single spaces; ids [0, kNumSpecialTokens)
    // are structural and dropped.
    std::string decode(const std::vector<int>& ids) const {
        std::string out;
        for (int id : ids) {
            const std::string& tok = token(id);  // range-checks
            if (id < static_cast<int>(kNumSpecialTokens)) continue;
            if (!out.empty()) out.push_back(' ');
            out += tok;
        }
        return out;
    }

    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::binary);
        if (!f) throw std::runtime_error("vocab: cannot open for write: " + path);
        for (const auto& tok : id2tok_) f << tok << '\n';
    }

    static Vocab load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw std::runtime_error("vocab: cannot open: " + path);
        Vocab v;
        std::string line;
        while (std::getline(f, line)) v.id2tok_.push_back(line);
        if (v.id2tok_.size() < kNumReservedTokens)
            throw std::runtime_error("vocab: file too small: " + path);
        for (size_t i = 0; i < kNumReservedTokens; ++i)
            if (v.id2tok_[i] != reserved_tokens()[i])
                throw std::runtime_error("vocab: reserved token mismatch at id " +
                                         std::to_string(i) + " in " + path);
        v.rebuild_map();
        return v;
    }

private:
    void rebuild_map() {
        tok2id_.clear();
        for (size_t i = 0; i < id2tok_.size(); ++i) {
            auto [it, inserted] = tok2id_.emplace(id2tok_[i], static_cast<int>(i));
            (void)it;
            if (!inserted) throw std::runtime_error("vocab: duplicate token: " + id2tok_[i]);
        }
    }

    std::vector<std::string> id2tok_;
    std::unordered_map<std::string, int> tok2id_;
};

}  // namespace unipact
