#pragma once

#include <algorithm>
#include <cctype>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "vag/error.hpp"
#include "vag/rng.hpp"

namespace vag {

// Whitespace tokenization after ASCII lowercasing.
inline std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        if (std::isspace(static_cast<unsigned char>(ch))) {
            if (!cur.empty()) {
                out.push_back(std::move(cur));
                cur.clear();
            }
        } else {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

// Token string <-> dense id map with fixed reserved ids.
class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kUnk = 3;

    Vocabulary() {
        for (const char* tok : {"<pad>", "<bos>", "<eos>", "<unk>"}) add_token(tok);
    }

    // Adds a token if new; returns its id either way.
    int add_token(const std::string& tok) {
        auto it = ids_.find(tok);
        if (it != ids_.end()) return it->second;
        const int id = static_cast<int>(tokens_.size());
        tokens_.push_back(tok);
        ids_.emplace(tok, id);
        return id;
    }

    void add_text(std::string_view text) {
        for (auto& tok : tokenize(text)) add_token(tok);
    }

    std::size_t size() const { return tokens_.size(); }

    int id_of(const std::string& tok) const {
        auto it = ids_.find(tok);
        return it == ids_.end() ? kUnk : it->second;
    }

    bool contains(const std::string& tok) const { return ids_.count(tok) != 0; }

    const std::string& token(int id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
            throw OovError("Vocabulary::token: id " + std::to_string(id) + " outside vocab of " +
                           std::to_string(tokens_.size()));
        }
        return tokens_[static_cast<std::size_t>(id)];
    }

    bool is_reserved(int id) const { return id >= 0 && id <= kUnk; }

    std::vector<int> encode(std::string_view text) const {
        std::vector<int> out;
        for (auto& tok : tokenize(text)) out.push_back(id_of(tok));
        return out;
    }

    std::string decode(std::span<const int> ids) const {
        std::string out;
        for (int id : ids) {
            if (!out.empty()) out.push_back(' ');
            out += token(id);
        }
        return out;
    }

    const std::vector<std::string>& tokens() const { return tokens_; }

    // Stable digest of the token list; stored in checkpoints.
    std::uint64_t hash() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& tok : tokens_) {
            h = fnv1a64(tok, h);
            h = fnv1a64(std::string_view("\n"), h);
        }
        return h;
    }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> ids_;
};

}  // namespace vag
