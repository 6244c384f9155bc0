#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "vag/error.hpp"
#include "vag/rng.hpp"
#include "vag/vocab.hpp"

namespace vag {

// Frozen per-token vectors with mean-pool + L2 aggregation. Drawn once from a
// seeded distribution (or loaded from a token-vector file) and never updated
// by training, so retrieval geometry is stable across a whole run.
class FrozenEmbedder {
public:
    FrozenEmbedder(std::size_t vocab_size, std::size_t dim, std::uint64_t seed)
        : dim_(dim), table_(vocab_size * dim) {
        if (dim == 0) throw ContractError("FrozenEmbedder: dimension must be positive");
        Rng rng(seed);
        for (auto& x : table_) x = rng.normal(0.0, 1.0);
    }

    // Token-vector file: one line per token, "token v1 v2 ... vd". Tokens
    // absent from the file keep seeded vectors (seed 0) so every id stays
    // defined.
    static FrozenEmbedder from_file(const std::string& path, const Vocabulary& vocab) {
        std::ifstream is(path);
        if (!is) throw ConfigError("FrozenEmbedder: cannot open token-vector file " + path);
        std::string line;
        std::size_t dim = 0;
        std::vector<std::pair<int, std::vector<double>>> rows;
        std::size_t line_no = 0;
        while (std::getline(is, line)) {
            ++line_no;
            if (line.empty()) continue;
            std::istringstream ls(line);
            std::string tok;
            ls >> tok;
            std::vector<double> vec;
            double x;
            while (ls >> x) vec.push_back(x);
            if (vec.empty()) {
                throw ConfigError("FrozenEmbedder: line " + std::to_string(line_no) +
                                  ": no vector components");
            }
            if (dim == 0) dim = vec.size();
            if (vec.size() != dim) {
                throw ConfigError("FrozenEmbedder: line " + std::to_string(line_no) +
                                  ": dimension " + std::to_string(vec.size()) + " != " +
                                  std::to_string(dim));
            }
            if (vocab.contains(tok)) rows.emplace_back(vocab.id_of(tok), std::move(vec));
        }
        if (dim == 0) throw ConfigError("FrozenEmbedder: empty token-vector file " + path);
        FrozenEmbedder e(vocab.size(), dim, /*seed=*/0);
        for (auto& [id, vec] : rows) {
            std::copy(vec.begin(), vec.end(),
                      e.table_.begin() + static_cast<std::ptrdiff_t>(id) * static_cast<std::ptrdiff_t>(dim));
        }
        return e;
    }

    std::size_t dim() const { return dim_; }
    std::size_t vocab_size() const { return table_.size() / dim_; }

    std::span<const double> token_vector(int id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= vocab_size()) {
            throw OovError("FrozenEmbedder: token id " + std::to_string(id) +
                           " outside table of " + std::to_string(vocab_size()));
        }
        return {table_.data() + static_cast<std::size_t>(id) * dim_, dim_};
    }

    // L2-normalized mean of token vectors; the empty sequence maps to the
    // zero vector (a sentinel that matches nothing preferentially). Tokens
    // are summed in sorted order so permutation invariance is exact.
    std::vector<double> embed(std::span<const int> token_ids) const {
        std::vector<double> out(dim_, 0.0);
        if (token_ids.empty()) return out;
        std::vector<int> sorted(token_ids.begin(), token_ids.end());
        std::sort(sorted.begin(), sorted.end());
        for (int id : sorted) {
            auto row = token_vector(id);
            for (std::size_t j = 0; j < dim_; ++j) out[j] += row[j];
        }
        const double inv = 1.0 / static_cast<double>(token_ids.size());
        double norm2 = 0.0;
        for (auto& x : out) {
            x *= inv;
            norm2 += x * x;
        }
        if (norm2 > 0.0) {
            const double inv_norm = 1.0 / std::sqrt(norm2);
            for (auto& x : out) x *= inv_norm;
        }
        return out;
    }

    // Uniform rescaling hook used by the scale-invariance property test.
    void scale_table(double c) {
        for (auto& x : table_) x *= c;
    }

private:
    std::size_t dim_;
    std::vector<double> table_;
};

inline double cosine(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw DimensionError("cosine: dimension mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return -1.0;  // zero vectors match nothing preferentially
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace vag
