#pragma once

#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "vag/embedder.hpp"
#include "vag/error.hpp"
#include "vag/model.hpp"
#include "vag/vocab.hpp"

namespace vag {

struct PoolEntry {
    std::vector<int> token_ids;
    std::string text;
    int task_id = 0;
    std::vector<double> embedding;  // unit L2 norm
};

struct Retrieval {
    std::size_t index = 0;
    double score = 0.0;
    bool fallback = false;  // empty/zero query fell back to the first entry
};

struct Prediction {
    std::size_t pool_index = 0;
    std::string label;            // y_pred, always a pool member
    std::vector<int> y_gen;       // raw generated tokens, for diagnostics
    double score = 0.0;
    bool fallback = false;
};

// Growing set of distinct label sequences with frozen embeddings. Append-only;
// duplicates are no-ops, so the pool holds every distinct label seen so far.
class LabelPool {
public:
    explicit LabelPool(std::shared_ptr<const FrozenEmbedder> embedder)
        : embedder_(std::move(embedder)) {
        if (!embedder_) throw ContractError("LabelPool: embedder required");
    }

    // Appends each new distinct label of task t; returns how many were new.
    std::size_t add_labels(const std::vector<std::string>& labels, const Vocabulary& vocab,
                           int task_id) {
        std::size_t added = 0;
        for (const auto& label : labels) {
            auto ids = vocab.encode(label);
            std::string key = vocab.decode(ids);
            if (seen_.count(key)) continue;
            seen_.insert(key);
            PoolEntry e;
            e.token_ids = std::move(ids);
            e.text = key;
            e.task_id = task_id;
            e.embedding = embedder_->embed(e.token_ids);
            entries_.push_back(std::move(e));
            ++added;
        }
        return added;
    }

    std::size_t size() const { return entries_.size(); }
    const PoolEntry& entry(std::size_t i) const { return entries_.at(i); }
    const std::vector<PoolEntry>& entries() const { return entries_; }

    bool contains(const std::string& label_text) const { return seen_.count(label_text) != 0; }

    // Exhaustive argmax of cosine similarity; ties go to the earliest
    // inserted entry. An empty or zero-embedding query falls back to the
    // first entry with the fallback flag set.
    Retrieval retrieve(std::span<const int> y_gen) const {
        if (entries_.empty()) throw ContractError("LabelPool::retrieve: pool is empty");
        const auto query = embedder_->embed(y_gen);
        double norm2 = 0.0;
        for (double x : query) norm2 += x * x;
        if (norm2 == 0.0) return {0, -1.0, true};
        Retrieval best{0, cosine(entries_[0].embedding, query), false};
        for (std::size_t i = 1; i < entries_.size(); ++i) {
            const double s = cosine(entries_[i].embedding, query);
            if (s > best.score) {
                best.index = i;
                best.score = s;
            }
        }
        return best;
    }

    const FrozenEmbedder& embedder() const { return *embedder_; }

private:
    std::shared_ptr<const FrozenEmbedder> embedder_;
    std::vector<PoolEntry> entries_;
    std::unordered_set<std::string> seen_;
};

// Greedy decoding followed by pool retrieval. The returned label is always a
// pool member; the raw generation is exposed for diagnostics.
inline Prediction predict(const Seq2SeqModel& m, const LabelPool& pool,
                          std::span<const int> input_ids,
                          std::vector<std::string>* warnings = nullptr) {
    Prediction p;
    p.y_gen = greedy_decode(m, input_ids, m.config.max_target_len, warnings);
    Retrieval r = pool.retrieve(p.y_gen);
    p.pool_index = r.index;
    p.label = pool.entry(r.index).text;
    p.score = r.score;
    p.fallback = r.fallback;
    return p;
}

}  // namespace vag
