#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "vag/error.hpp"
#include "vag/model.hpp"
#include "vag/tensor.hpp"
#include "vag/vocab.hpp"

namespace vag {

// Token ids a task's label sequences can produce, plus EOS. The generation
// loss for that task normalizes over exactly this set.
struct TaskVocab {
    int task_id = 0;
    VocabMask mask;               // |V| bytes, 1 = member
    std::vector<int> token_ids;   // members in ascending id order (includes EOS)
    std::string provenance;

    bool allows(int id) const {
        return id >= 0 && static_cast<std::size_t>(id) < mask.size() && mask[id] != 0;
    }
    std::size_t count() const { return token_ids.size(); }
};

// Union of token ids over the labels of one task, plus EOS.
inline TaskVocab task_vocab(const Vocabulary& vocab, const std::vector<std::string>& labels,
                            int task_id, std::vector<std::string>* warnings = nullptr) {
    if (labels.empty()) throw ContractError("task_vocab: no labels given");
    TaskVocab tv;
    tv.task_id = task_id;
    tv.mask.assign(vocab.size(), 0);
    for (const auto& label : labels) {
        const auto ids = vocab.encode(label);
        if (ids.empty()) {
            throw ContractError("task_vocab: label '" + label + "' has no tokens");
        }
        bool any_known = false;
        for (int id : ids) any_known = any_known || (id != Vocabulary::kUnk);
        if (!any_known) {
            throw ContractError("task_vocab: label '" + label +
                                "' contains only unknown tokens");
        }
        for (int id : ids) tv.mask[static_cast<std::size_t>(id)] = 1;
        if (!tv.provenance.empty()) tv.provenance += ", ";
        tv.provenance += label;
    }
    tv.mask[Vocabulary::kEos] = 1;
    for (std::size_t id = 0; id < tv.mask.size(); ++id) {
        if (tv.mask[id]) tv.token_ids.push_back(static_cast<int>(id));
    }
    if (warnings && tv.token_ids.size() > vocab.size() / 2) {
        warnings->push_back("task_vocab: task " + std::to_string(task_id) + " vocabulary has " +
                            std::to_string(tv.token_ids.size()) + " of " +
                            std::to_string(vocab.size()) + " tokens; expected a small subset");
    }
    return tv;
}

// Full-vocabulary "mask" (identity restriction).
inline VocabMask full_vocab_mask(std::size_t vocab_size) { return VocabMask(vocab_size, 1); }

// Next-token distribution restricted to the task vocabulary: probability
// exp(s_w) / sum_{u in V_t} exp(s_u) for members, exactly zero elsewhere.
inline std::vector<double> masked_next_token_dist(const Tensor& logits, const TaskVocab& vocab) {
    if (logits.rows() != 1) {
        throw ContractError("masked_next_token_dist: expected a single logit row, got " +
                            logits.shape_string());
    }
    if (vocab.token_ids.empty()) throw ContractError("masked_next_token_dist: empty V_t");
    Tape tape(/*track=*/false);
    Tensor lp = tape.masked_log_softmax_rows(logits, vocab.mask);
    std::vector<double> out(logits.cols(), 0.0);
    for (int id : vocab.token_ids) out[static_cast<std::size_t>(id)] =
        std::exp(lp.at(0, static_cast<std::size_t>(id)));
    return out;
}

// One training example for the generation objective. `target_ids` must end
// with EOS. `mask` selects the vocabulary restriction for the VAG term; null
// means the full vocabulary.
struct Sample {
    std::vector<int> input_ids;
    std::vector<int> target_ids;
    std::shared_ptr<const TaskVocab> mask;
};

struct LossBreakdown {
    double total = 0.0;
    double normal_term = 0.0;
    double vag_term = 0.0;
    std::size_t token_count = 0;  // target tokens contributing across both terms
};

struct LossResult {
    Tensor loss;  // scalar on the tape; backward() trains
    LossBreakdown breakdown;
};

namespace detail {

// Sum of -log P(target token) over one sample under teacher forcing,
// restricted to `mask` when given. Returns the scalar sum and token count.
inline Tensor sample_token_nll_sum(Tape& tape, const Seq2SeqModel& m, const Sample& s,
                                   const VocabMask* mask, std::size_t& token_count) {
    if (s.target_ids.empty() || s.target_ids.back() != Vocabulary::kEos) {
        throw ContractError("nll_loss: target must terminate with EOS");
    }
    if (mask) {
        for (int id : s.target_ids) {
            if (!(*mask)[static_cast<std::size_t>(id)]) {
                throw ContractError("nll_loss: target token id " + std::to_string(id) +
                                    " outside the task vocabulary mask");
            }
        }
    }
    std::vector<int> prefix;
    prefix.reserve(s.target_ids.size());
    prefix.push_back(Vocabulary::kBos);
    for (std::size_t i = 0; i + 1 < s.target_ids.size(); ++i) prefix.push_back(s.target_ids[i]);

    Tensor memory = encode(tape, m, s.input_ids);
    Tensor logits = decoder_logits_all(tape, m, memory, prefix);
    const VocabMask full = mask ? VocabMask() : full_vocab_mask(m.vocab.size());
    Tensor lp = tape.masked_log_softmax_rows(logits, mask ? *mask : full);
    std::vector<std::pair<std::size_t, std::size_t>> coords;
    coords.reserve(s.target_ids.size());
    for (std::size_t i = 0; i < s.target_ids.size(); ++i) {
        coords.emplace_back(i, static_cast<std::size_t>(s.target_ids[i]));
    }
    token_count += coords.size();
    return tape.scale(tape.sum(tape.pick(lp, coords)), -1.0);
}

inline Tensor add_scalars(Tape& tape, const std::vector<Tensor>& parts) {
    Tensor acc = parts.front();
    for (std::size_t i = 1; i < parts.size(); ++i) acc = tape.add(acc, parts[i]);
    return acc;
}

}  // namespace detail

// Mean over contributing target tokens of -log P (unmasked) or -log P'
// (masked with `vocab`, or each sample's own mask when vocab is null).
inline LossResult nll_loss(Tape& tape, const Seq2SeqModel& m, std::span<const Sample> batch,
                           bool masked, const TaskVocab* vocab = nullptr) {
    if (batch.empty()) throw ContractError("nll_loss: empty batch");
    std::size_t tokens = 0;
    std::vector<Tensor> sums;
    sums.reserve(batch.size());
    for (const Sample& s : batch) {
        const VocabMask* mask = nullptr;
        if (masked) {
            const TaskVocab* tv = vocab ? vocab : s.mask.get();
            if (!tv) throw ContractError("nll_loss: masked mode requires a task vocabulary");
            mask = &tv->mask;
        }
        sums.push_back(detail::sample_token_nll_sum(tape, m, s, mask, tokens));
    }
    Tensor mean = tape.scale(detail::add_scalars(tape, sums), 1.0 / static_cast<double>(tokens));
    LossResult r;
    r.loss = mean;
    r.breakdown.total = mean.item();
    r.breakdown.token_count = tokens;
    if (masked) {
        r.breakdown.vag_term = r.breakdown.total;
    } else {
        r.breakdown.normal_term = r.breakdown.total;
    }
    return r;
}

// Combined objective: normal generation loss over (er ++ current) plus
// mu * VAG loss over (lpr ++ current). Current-task samples use
// `current_vocab` for the VAG term; replayed pairs use their own source-task
// vocabulary. An empty er batch means non-exemplar mode: total = VAG term.
inline LossResult combined_exemplar_loss(Tape& tape, const Seq2SeqModel& m,
                                         std::span<const Sample> current,
                                         std::span<const Sample> er,
                                         std::span<const Sample> lpr, double mu,
                                         const TaskVocab& current_vocab) {
    if (mu < 0.0) throw ContractError("combined_exemplar_loss: mu must be >= 0");
    if (current.empty() && er.empty() && lpr.empty()) {
        throw ContractError("combined_exemplar_loss: empty batch");
    }

    std::size_t vag_tokens = 0;
    std::vector<Tensor> vag_sums;
    for (const Sample& s : lpr) {
        if (!s.mask) {
            throw ContractError("combined_exemplar_loss: pseudo-replay sample lacks its mask");
        }
        vag_sums.push_back(detail::sample_token_nll_sum(tape, m, s, &s.mask->mask, vag_tokens));
    }
    for (const Sample& s : current) {
        vag_sums.push_back(
            detail::sample_token_nll_sum(tape, m, s, &current_vocab.mask, vag_tokens));
    }

    LossResult r;
    if (er.empty()) {
        // non-exemplar mode: VAG term only
        if (vag_sums.empty()) throw ContractError("combined_exemplar_loss: empty batch");
        Tensor vag = tape.scale(detail::add_scalars(tape, vag_sums),
                                1.0 / static_cast<double>(vag_tokens));
        r.loss = vag;
        r.breakdown.vag_term = vag.item();
        r.breakdown.total = r.breakdown.vag_term;
        r.breakdown.token_count = vag_tokens;
        return r;
    }

    std::size_t normal_tokens = 0;
    std::vector<Tensor> normal_sums;
    for (const Sample& s : er) {
        normal_sums.push_back(detail::sample_token_nll_sum(tape, m, s, nullptr, normal_tokens));
    }
    for (const Sample& s : current) {
        normal_sums.push_back(detail::sample_token_nll_sum(tape, m, s, nullptr, normal_tokens));
    }
    Tensor normal = tape.scale(detail::add_scalars(tape, normal_sums),
                               1.0 / static_cast<double>(normal_tokens));
    r.breakdown.normal_term = normal.item();
    if (vag_sums.empty()) {
        r.loss = normal;
    } else {
        Tensor vag = tape.scale(detail::add_scalars(tape, vag_sums),
                                1.0 / static_cast<double>(vag_tokens));
        r.breakdown.vag_term = vag.item();
        r.loss = tape.add(normal, tape.scale(vag, mu));
    }
    r.breakdown.total = r.loss.item();
    r.breakdown.token_count = normal_tokens + vag_tokens;
    return r;
}

}  // namespace vag
