#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <span>
#include <unordered_map>
#include <vector>

#include "vag/embedder.hpp"
#include "vag/error.hpp"
#include "vag/objective.hpp"
#include "vag/rng.hpp"
#include "vag/vocab.hpp"

namespace vag {

// k nearest content tokens per token under the frozen embedder's cosine.
// A token is never its own neighbor. Neighbor lists are computed on demand
// and cached; the cache is not thread-safe (each run owns its table).
class RelatednessTable {
public:
    RelatednessTable(std::shared_ptr<const FrozenEmbedder> embedder, const Vocabulary& vocab,
                     std::size_t k = 10)
        : embedder_(std::move(embedder)), k_(k) {
        if (!embedder_) throw ContractError("RelatednessTable: embedder required");
        for (std::size_t id = 0; id < vocab.size(); ++id) {
            if (!vocab.is_reserved(static_cast<int>(id))) {
                content_ids_.push_back(static_cast<int>(id));
            }
        }
    }

    std::size_t k() const { return k_; }

    const std::vector<int>& neighbors(int token_id) const {
        auto it = cache_.find(token_id);
        if (it != cache_.end()) return it->second;
        std::vector<std::pair<double, int>> scored;
        scored.reserve(content_ids_.size());
        const auto anchor = embedder_->token_vector(token_id);
        for (int other : content_ids_) {
            if (other == token_id) continue;
            scored.emplace_back(cosine(anchor, embedder_->token_vector(other)), other);
        }
        const std::size_t take = std::min(k_, scored.size());
        // ties broken by lower token id for determinism
        std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(take),
                          scored.end(), [](const auto& a, const auto& b) {
                              if (a.first != b.first) return a.first > b.first;
                              return a.second < b.second;
                          });
        std::vector<int> nbrs;
        nbrs.reserve(take);
        for (std::size_t i = 0; i < take; ++i) nbrs.push_back(scored[i].second);
        return cache_.emplace(token_id, std::move(nbrs)).first->second;
    }

private:
    std::shared_ptr<const FrozenEmbedder> embedder_;
    std::size_t k_;
    std::vector<int> content_ids_;
    mutable std::unordered_map<int, std::vector<int>> cache_;
};

struct Augmented {
    std::vector<int> tokens;
    std::vector<std::size_t> inserted_positions;  // indices into `tokens`
    std::size_t skipped_insertions = 0;           // anchors without neighbors
};

// Inserts ceil(0.3 * token_num(y)) related tokens into y. Each insertion
// draws a uniform anchor from y, a uniform neighbor of that anchor, and a
// uniform insertion slot. The original token order is preserved.
inline Augmented augment_label(std::span<const int> y, const RelatednessTable& table, Rng& rng) {
    if (y.empty()) throw ContractError("augment_label: empty label sequence");
    const std::size_t n_ins =
        static_cast<std::size_t>(std::ceil(0.3 * static_cast<double>(y.size())));
    std::vector<std::pair<int, bool>> work;  // (token, inserted?)
    work.reserve(y.size() + n_ins);
    for (int tok : y) work.emplace_back(tok, false);
    Augmented out;
    for (std::size_t i = 0; i < n_ins; ++i) {
        const int anchor = y[rng.uniform_index(y.size())];
        const auto& nbrs = table.neighbors(anchor);
        if (nbrs.empty()) {
            ++out.skipped_insertions;
            continue;
        }
        const int tok = nbrs[rng.uniform_index(nbrs.size())];
        const std::size_t slot = rng.uniform_index(work.size() + 1);
        work.insert(work.begin() + static_cast<std::ptrdiff_t>(slot), {tok, true});
    }
    for (std::size_t i = 0; i < work.size(); ++i) {
        out.tokens.push_back(work[i].first);
        if (work[i].second) out.inserted_positions.push_back(i);
    }
    return out;
}

struct PseudoReplaySample {
    std::vector<int> input;   // aug(y)
    std::vector<int> target;  // y (without EOS; callers append it)
    int source_task = 0;
    std::shared_ptr<const TaskVocab> vocab;  // V_i of the source task
    std::vector<std::size_t> inserted_positions;
};

// One label sequence of a previous task, with the metadata needed to
// re-augment it.
struct LprBasePair {
    std::vector<int> label_ids;
    int source_task = 0;
    std::shared_ptr<const TaskVocab> vocab;
};

// Builds the pseudo-replay set: one (aug(y), y) pair per distinct previous
// label, each tagged with its source task's vocabulary. Empty for t = 1.
inline std::vector<PseudoReplaySample> build_lpr(std::span<const LprBasePair> previous_labels,
                                                 const RelatednessTable& table, Rng& rng) {
    std::vector<PseudoReplaySample> out;
    out.reserve(previous_labels.size());
    for (const auto& base : previous_labels) {
        Augmented aug = augment_label(base.label_ids, table, rng);
        PseudoReplaySample s;
        s.input = std::move(aug.tokens);
        s.target = base.label_ids;
        s.source_task = base.source_task;
        s.vocab = base.vocab;
        s.inserted_positions = std::move(aug.inserted_positions);
        out.push_back(std::move(s));
    }
    return out;
}

inline std::size_t round_half_up(double x) {
    return static_cast<std::size_t>(std::floor(x + 0.5));
}

// Draws round(lambda * |D_t|) pairs uniformly with replacement, re-augmenting
// on each draw so duplicate picks differ in their inserted tokens.
inline std::vector<PseudoReplaySample> sample_lpr(std::span<const LprBasePair> base,
                                                  double lambda, std::size_t current_task_size,
                                                  const RelatednessTable& table, Rng& rng) {
    if (lambda < 0.0) throw ContractError("sample_lpr: lambda must be >= 0");
    std::vector<PseudoReplaySample> out;
    if (base.empty()) return out;
    const std::size_t count = round_half_up(lambda * static_cast<double>(current_task_size));
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        const auto& pick = base[rng.uniform_index(base.size())];
        Augmented aug = augment_label(pick.label_ids, table, rng);
        PseudoReplaySample s;
        s.input = std::move(aug.tokens);
        s.target = pick.label_ids;
        s.source_task = pick.source_task;
        s.vocab = pick.vocab;
        s.inserted_positions = std::move(aug.inserted_positions);
        out.push_back(std::move(s));
    }
    return out;
}

// Adapter into the objective's sample type (appends EOS to the target).
inline Sample to_sample(const PseudoReplaySample& p) {
    Sample s;
    s.input_ids = p.input;
    s.target_ids = p.target;
    s.target_ids.push_back(Vocabulary::kEos);
    s.mask = p.vocab;
    return s;
}

}  // namespace vag
