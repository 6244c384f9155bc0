#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "vag/data.hpp"
#include "vag/embedder.hpp"
#include "vag/error.hpp"
#include "vag/label_pool.hpp"
#include "vag/metrics.hpp"
#include "vag/model.hpp"
#include "vag/objective.hpp"
#include "vag/optimizer.hpp"
#include "vag/pseudo_replay.hpp"
#include "vag/rng.hpp"
#include "vag/vocab.hpp"

namespace vag {

enum class Method {
    VanillaClassifier,  // linear head over all seen classes, cross-entropy
    VanillaG,           // unmasked label generation
    EwcG,               // generation + quadratic parameter penalty
    Er,                 // classifier + experience replay buffer
    Vag,                // vocabulary-aware generation + label-based pseudo replay
    VagEr,              // vag extended with a real replay buffer
    NonCl,              // joint training on all tasks (upper bound)
};

inline std::string method_name(Method m) {
    switch (m) {
        case Method::VanillaClassifier: return "vanilla-classifier";
        case Method::VanillaG: return "vanilla-g";
        case Method::EwcG: return "ewc-g";
        case Method::Er: return "er";
        case Method::Vag: return "vag";
        case Method::VagEr: return "vag+er";
        case Method::NonCl: return "non-cl";
    }
    throw ContractError("method_name: unknown method");
}

inline Method parse_method(const std::string& s) {
    for (Method m : {Method::VanillaClassifier, Method::VanillaG, Method::EwcG, Method::Er,
                     Method::Vag, Method::VagEr, Method::NonCl}) {
        if (method_name(m) == s) return m;
    }
    throw ConfigError("unknown method '" + s + "'");
}

inline bool is_generation_method(Method m) {
    return m != Method::VanillaClassifier && m != Method::Er;
}

inline bool uses_replay_buffer(Method m) { return m == Method::Er || m == Method::VagEr; }

inline bool uses_pseudo_replay(Method m) { return m == Method::Vag || m == Method::VagEr; }

struct LearnerConfig {
    Method method = Method::Vag;
    double lpr_lambda = 0.1;
    double mu = 1.0;
    double ewc_weight = 5000.0;
    std::size_t epochs = 10;
    std::size_t batch_size = 8;
    double learning_rate = 3e-4;
    std::size_t patience = 2;
    double buffer_fraction = 0.0;  // p; meaningful for er / vag+er
    std::size_t pretrain_epochs = 10;
    double pretrain_learning_rate = 1e-3;
    // keep Adam moments across task boundaries (generation methods only;
    // the classifier head grows, so classifier methods always reset)
    bool persist_optimizer = false;
    std::uint64_t embedder_seed = 17;
    std::size_t embed_dim = 64;
    std::size_t relatedness_k = 10;
    ModelConfig model;

    void validate() const {
        model.validate();
        if (lpr_lambda < 0.0) throw ConfigError("LearnerConfig: lpr_lambda must be >= 0");
        if (mu < 0.0) throw ConfigError("LearnerConfig: mu must be >= 0");
        if (buffer_fraction < 0.0 || buffer_fraction > 1.0) {
            throw ConfigError("LearnerConfig: buffer_fraction must lie in [0, 1]");
        }
        if (uses_replay_buffer(method) && buffer_fraction == 0.0) {
            throw ConfigError("LearnerConfig: method '" + method_name(method) +
                              "' needs a positive buffer_fraction");
        }
        if (!uses_replay_buffer(method) && buffer_fraction != 0.0) {
            throw ConfigError("LearnerConfig: buffer_fraction is only meaningful for er/vag+er");
        }
        if (epochs == 0 || batch_size == 0) {
            throw ConfigError("LearnerConfig: epochs and batch_size must be positive");
        }
        if (learning_rate <= 0.0) throw ConfigError("LearnerConfig: learning_rate must be > 0");
    }
};

// ---- replay buffer --------------------------------------------------------

struct StoredExample {
    ExampleRecord record;
    std::size_t class_index = 0;  // global class index
    int task_id = 0;
};

// Stores round(p * |D_t|) examples per task, class-balanced within the task.
class ReplayBuffer {
public:
    void update(const TaskData& task, std::span<const std::size_t> class_indices, double p,
                Rng& rng) {
        if (p < 0.0 || p > 1.0) throw ContractError("ReplayBuffer: p must lie in [0, 1]");
        const std::size_t quota = round_half_up(p * static_cast<double>(task.train.size()));
        if (quota == 0) return;
        // bucket examples per class, preserving task order
        std::vector<std::vector<const ExampleRecord*>> buckets(task.classes.size());
        for (const auto& ex : task.train) {
            for (std::size_t c = 0; c < task.classes.size(); ++c) {
                if (task.classes[c] == ex.label) {
                    buckets[c].push_back(&ex);
                    break;
                }
            }
        }
        const std::size_t per_class = quota / task.classes.size();
        std::size_t remainder = quota % task.classes.size();
        std::vector<std::size_t> extra(task.classes.size(), 0);
        {
            std::vector<std::size_t> order(task.classes.size());
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            rng.shuffle(order);
            for (std::size_t i = 0; i < remainder; ++i) extra[order[i]] = 1;
        }
        for (std::size_t c = 0; c < task.classes.size(); ++c) {
            std::vector<const ExampleRecord*> pool = buckets[c];
            rng.shuffle(pool);
            const std::size_t take = std::min(per_class + extra[c], pool.size());
            for (std::size_t i = 0; i < take; ++i) {
                items_.push_back({*pool[i], class_indices[c], task.task_id});
            }
        }
    }

    std::size_t size() const { return items_.size(); }
    const std::vector<StoredExample>& items() const { return items_; }

private:
    std::vector<StoredExample> items_;
};

// ---- elastic weight consolidation ------------------------------------------

struct EwcAnchor {
    std::vector<std::vector<double>> params;  // theta* at the end of a task
    std::vector<std::vector<double>> fisher;  // diagonal Fisher estimate
};

// weight/2 * sum_i F_i (theta_i - theta*_i)^2
inline double ewc_penalty(std::span<Tensor* const> params, const EwcAnchor& anchor,
                          double weight) {
    if (anchor.params.size() != params.size() || anchor.fisher.size() != params.size()) {
        throw ContractError("ewc_penalty: anchor does not match parameter list");
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& v = params[i]->values();
        if (anchor.params[i].size() != v.size()) {
            throw ContractError("ewc_penalty: parameter shape mismatch at index " +
                                std::to_string(i));
        }
        for (std::size_t j = 0; j < v.size(); ++j) {
            const double drift = v[j] - anchor.params[i][j];
            acc += anchor.fisher[i][j] * drift * drift;
        }
    }
    return 0.5 * weight * acc;
}

// Adds d(penalty)/d(theta) = weight * F * (theta - theta*) into the grads.
inline void add_ewc_penalty_gradient(std::span<Tensor* const> params, const EwcAnchor& anchor,
                                     double weight) {
    if (anchor.params.size() != params.size()) {
        throw ContractError("ewc_penalty: anchor does not match parameter list");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& g = params[i]->grad();
        const auto& v = params[i]->values();
        for (std::size_t j = 0; j < v.size(); ++j) {
            g[j] += weight * anchor.fisher[i][j] * (v[j] - anchor.params[i][j]);
        }
    }
}

// ---- reports ----------------------------------------------------------------

struct LprLogEntry {
    int task = 0;
    std::size_t epoch = 0;
    std::size_t drawn = 0;
    std::size_t expected = 0;
};

struct BufferLogEntry {
    int task = 0;
    std::size_t stored_total = 0;
    std::size_t expected_added = 0;
};

struct SeedReport {
    std::uint64_t seed = 0;
    std::vector<std::vector<EvalCell>> acc_matrix;  // [t][i], lower-triangular
    double final_acc = 0.0;
    ConfusionMatrix confusion;
    std::vector<double> nc_trajectory;  // T + 1 entries (pre-CIL first)
    std::vector<double> bias_trajectory;  // per task: fraction of predictions in its classes
    double bias_last_task = 0.0;
    std::vector<LprLogEntry> lpr_log;
    std::vector<BufferLogEntry> buffer_log;
    std::vector<std::size_t> epochs_ran;  // per task
    std::vector<std::string> warnings;
    std::size_t retrieval_fallbacks = 0;
    std::size_t closed_world_violations = 0;

    double accuracy_after_task(std::size_t t) const {
        return final_accuracy(acc_matrix.at(t));
    }
};

struct RunReport {
    Method method = Method::Vag;
    LearnerConfig config;
    std::vector<SeedReport> seeds;

    double mean_final_accuracy() const {
        double s = 0.0;
        for (const auto& r : seeds) s += r.final_acc;
        return s / static_cast<double>(seeds.size());
    }

    double std_final_accuracy() const {
        if (seeds.size() < 2) return 0.0;
        const double mean = mean_final_accuracy();
        double ss = 0.0;
        for (const auto& r : seeds) ss += (r.final_acc - mean) * (r.final_acc - mean);
        return std::sqrt(ss / static_cast<double>(seeds.size() - 1));
    }
};

// ---- the learner ------------------------------------------------------------

// One class-incremental run for one seed. Tasks must be trained strictly in
// order; the prediction path never sees a task identity.
class CilRun {
public:
    CilRun(const TaskStream& stream, const LearnerConfig& config, std::uint64_t seed,
           std::vector<std::string> pretrain_corpus = {})
        : stream_(stream),
          config_(config),
          seed_(seed),
          rng_(seed),
          pretrain_corpus_(std::move(pretrain_corpus)) {
        config_.validate();
        vocab_ = build_vocabulary(stream_, pretrain_corpus_);
        model_ = init_model(config_.model, vocab_, seed);
        embedder_ = std::make_shared<FrozenEmbedder>(vocab_.size(), config_.embed_dim,
                                                     config_.embedder_seed);
        pool_ = std::make_unique<LabelPool>(embedder_);
        rel_table_ = std::make_unique<RelatednessTable>(embedder_, vocab_,
                                                        config_.relatedness_k);
        report_.seed = seed;
        // probe set for the collapse diagnostic: all test examples, all classes
        std::map<std::string, int> class_ids;
        for (const auto& task : stream_.tasks) {
            for (const auto& cls : task.classes) {
                class_ids.emplace(normalize_label(cls), static_cast<int>(class_ids.size()));
            }
            for (const auto& ex : task.test) {
                probe_.push_back(
                    {vocab_.encode(ex.text), class_ids.at(normalize_label(ex.label))});
            }
        }
        if (config_.pretrain_epochs > 0 && !pretrain_corpus_.empty()) pretrain();
        report_.nc_trajectory.push_back(nc_metric(collect_features(model_, probe_)));
    }

    const Seq2SeqModel& model() const { return model_; }
    const LabelPool& pool() const { return *pool_; }
    const Vocabulary& vocab() const { return vocab_; }
    const SeedReport& report() const { return report_; }
    std::size_t classes_seen() const { return classes_.size(); }
    std::size_t head_width() const { return head_w_.defined() ? head_w_.rows() : 0; }

    // Train the next task; enforces the sequential protocol.
    void train_task(const TaskData& task) {
        if (task.task_id != last_task_ + 1) {
            throw ProtocolError("train_task: task " + std::to_string(task.task_id) +
                                " trained after task " + std::to_string(last_task_) +
                                "; tasks must run strictly in order");
        }
        last_task_ = task.task_id;

        // register the new classes (grows the classifier head if present)
        std::vector<std::size_t> class_indices;
        for (const auto& cls : task.classes) {
            class_indices.push_back(register_class(cls, task.task_id));
        }
        if (!is_generation_method(config_.method)) grow_head(task.classes.size());

        if (config_.method == Method::NonCl) {
            throw ProtocolError("train_task: the non-cl mode trains jointly; use run_joint()");
        }
        train_current_task(task);

        // label pool grows with C_t; V_t is recorded for the vag variants
        pool_->add_labels(task.classes, vocab_, task.task_id);
        task_vocabs_.push_back(
            std::make_shared<TaskVocab>(task_vocab(vocab_, task.classes, task.task_id,
                                                   &report_.warnings)));
        task_label_sets_.push_back(task.classes);

        if (uses_replay_buffer(config_.method)) {
            Rng buffer_rng = rng_.fork("buffer" + std::to_string(task.task_id));
            buffer_.update(task, class_indices, config_.buffer_fraction, buffer_rng);
            report_.buffer_log.push_back(
                {task.task_id, buffer_.size(),
                 round_half_up(config_.buffer_fraction *
                               static_cast<double>(task.train.size()))});
        }
        if (config_.method == Method::EwcG) capture_ewc_anchor(task);

        evaluate_after_task();
        report_.nc_trajectory.push_back(nc_metric(collect_features(model_, probe_)));
    }

    // Joint training over every task at once (the non-CL upper bound).
    void run_joint() {
        if (config_.method != Method::NonCl) {
            throw ProtocolError("run_joint: only valid for the non-cl mode");
        }
        TaskData merged;
        merged.task_id = 1;
        for (const auto& task : stream_.tasks) {
            for (const auto& cls : task.classes) register_class(cls, task.task_id);
            merged.classes.insert(merged.classes.end(), task.classes.begin(),
                                  task.classes.end());
            merged.train.insert(merged.train.end(), task.train.begin(), task.train.end());
            merged.val.insert(merged.val.end(), task.val.begin(), task.val.end());
            merged.test.insert(merged.test.end(), task.test.begin(), task.test.end());
        }
        last_task_ = 1;
        train_generation_task(merged, nullptr, {});
        pool_->add_labels(merged.classes, vocab_, 1);
        evaluate_joint(merged);
        report_.nc_trajectory.push_back(nc_metric(collect_features(model_, probe_)));
    }

    void finalize() {
        if (report_.acc_matrix.empty()) throw ContractError("finalize: nothing evaluated");
        report_.final_acc = final_accuracy(report_.acc_matrix.back());
    }

private:
    static std::string normalize_label(const std::string& label) {
        std::string out;
        for (const auto& tok : tokenize(label)) {
            if (!out.empty()) out.push_back(' ');
            out += tok;
        }
        return out;
    }

    std::size_t register_class(const std::string& label, int task_id) {
        const std::string key = normalize_label(label);
        auto it = class_index_.find(key);
        if (it != class_index_.end()) return it->second;
        const std::size_t idx = classes_.size();
        class_index_.emplace(key, idx);
        classes_.push_back(key);
        class_task_.push_back(task_id);
        return idx;
    }

    void grow_head(std::size_t new_classes) {
        const std::size_t d = config_.model.d_model;
        const std::size_t old_k = head_w_.defined() ? head_w_.rows() : 0;
        const std::size_t new_k = old_k + new_classes;
        Rng init_rng = rng_.fork("head" + std::to_string(last_task_));
        Tensor w = Tensor::zeros(new_k, d, true);
        Tensor b = Tensor::zeros(new_k, 1, true);
        for (std::size_t i = 0; i < old_k * d; ++i) w.values()[i] = head_w_.values()[i];
        for (std::size_t i = 0; i < old_k; ++i) b.values()[i] = head_b_.values()[i];
        for (std::size_t i = old_k * d; i < new_k * d; ++i)
            w.values()[i] = init_rng.normal(0.0, 0.02);
        head_w_ = w;
        head_b_ = b;
    }

    std::vector<Tensor*> trainable_parameters() {
        auto ps = model_.parameters();
        if (!is_generation_method(config_.method) && head_w_.defined()) {
            ps.push_back(&head_w_);
            ps.push_back(&head_b_);
        }
        return ps;
    }

    std::vector<std::vector<double>> snapshot_trainable() {
        std::vector<std::vector<double>> snap;
        for (Tensor* p : trainable_parameters()) snap.push_back(p->values());
        return snap;
    }

    void restore_trainable(const std::vector<std::vector<double>>& snap) {
        auto ps = trainable_parameters();
        if (snap.size() != ps.size()) throw ContractError("restore_trainable: size mismatch");
        for (std::size_t i = 0; i < ps.size(); ++i) ps[i]->values() = snap[i];
    }

    // classifier logits for one text: mean-pooled encoder state -> linear head
    Tensor classifier_logits(Tape& tape, std::span<const int> input_ids) {
        Tensor pooled = encode_pooled(tape, model_, input_ids, &report_.warnings);
        return tape.add(tape.matmul(pooled, tape.transpose(head_w_)),
                        tape.transpose(head_b_));
    }

    Tensor classifier_batch_loss(Tape& tape,
                                 std::span<const std::pair<const ExampleRecord*, std::size_t>>
                                     batch) {
        std::vector<Tensor> terms;
        const VocabMask all(head_w_.rows(), 1);
        for (const auto& [ex, cls] : batch) {
            Tensor logits = classifier_logits(tape, vocab_.encode(ex->text));
            Tensor lp = tape.masked_log_softmax_rows(logits, all);
            terms.push_back(tape.pick(lp, {{0, cls}}));
        }
        Tensor acc = terms.front();
        for (std::size_t i = 1; i < terms.size(); ++i) acc = tape.add(acc, terms[i]);
        return tape.scale(acc, -1.0 / static_cast<double>(terms.size()));
    }

    // proportional pacing: items of a pool of size m assigned to the batch
    // window [i0, i1) over n current items
    static std::pair<std::size_t, std::size_t> paced_window(std::size_t i0, std::size_t i1,
                                                            std::size_t n, std::size_t m) {
        const auto lo = static_cast<std::size_t>(
            std::floor(static_cast<double>(i0) * static_cast<double>(m) /
                       static_cast<double>(n)));
        const auto hi = static_cast<std::size_t>(
            std::floor(static_cast<double>(i1) * static_cast<double>(m) /
                       static_cast<double>(n)));
        return {lo, hi};
    }

    double validation_loss(const TaskData& task, const TaskVocab* tv) {
        if (task.val.empty()) return 0.0;
        if (!is_generation_method(config_.method)) {
            Tape tape(/*track=*/false);
            double acc = 0.0;
            const VocabMask all(head_w_.rows(), 1);
            for (const auto& ex : task.val) {
                Tensor logits = classifier_logits(tape, vocab_.encode(ex.text));
                Tensor lp = tape.masked_log_softmax_rows(logits, all);
                acc -= lp.at(0, class_index_.at(normalize_label(ex.label)));
            }
            return acc / static_cast<double>(task.val.size());
        }
        // generation: per-token NLL on the current task's validation split,
        // masked with V_t for the vag variants
        Tape tape(/*track=*/false);
        double sum = 0.0;
        std::size_t tokens = 0;
        for (const auto& ex : task.val) {
            Sample s;
            s.input_ids = vocab_.encode(ex.text);
            s.target_ids = vocab_.encode(ex.label);
            s.target_ids.push_back(Vocabulary::kEos);
            const VocabMask* mask = nullptr;
            if (uses_pseudo_replay(config_.method) && tv) mask = &tv->mask;
            Tensor memory = encode(tape, model_, s.input_ids, &report_.warnings);
            std::vector<int> prefix{Vocabulary::kBos};
            for (std::size_t i = 0; i + 1 < s.target_ids.size(); ++i)
                prefix.push_back(s.target_ids[i]);
            Tensor logits = decoder_logits_all(tape, model_, memory, prefix);
            const VocabMask full = mask ? VocabMask() : full_vocab_mask(vocab_.size());
            Tensor lp = tape.masked_log_softmax_rows(logits, mask ? *mask : full);
            for (std::size_t i = 0; i < s.target_ids.size(); ++i) {
                sum -= lp.at(i, static_cast<std::size_t>(s.target_ids[i]));
                ++tokens;
            }
        }
        return sum / static_cast<double>(tokens);
    }

    void train_current_task(const TaskData& task) {
        if (is_generation_method(config_.method)) {
            std::shared_ptr<const TaskVocab> tv = std::make_shared<TaskVocab>(
                task_vocab(vocab_, task.classes, task.task_id, &report_.warnings));
            std::vector<LprBasePair> lpr_base;
            if (uses_pseudo_replay(config_.method)) {
                for (std::size_t t = 0; t < task_label_sets_.size(); ++t) {
                    for (const auto& label : task_label_sets_[t]) {
                        lpr_base.push_back({vocab_.encode(label),
                                            task_vocabs_[t]->task_id, task_vocabs_[t]});
                    }
                }
            }
            train_generation_task(task, tv.get(), lpr_base);
        } else {
            train_classifier_task(task);
        }
    }

    void train_generation_task(const TaskData& task, const TaskVocab* tv,
                               std::span<const LprBasePair> lpr_base) {
        Adam local_opt(model_.parameters(), config_.learning_rate);
        Adam* opt_ptr = &local_opt;
        if (config_.persist_optimizer) {
            if (!task_optimizer_) {
                task_optimizer_ = std::make_unique<Adam>(model_.parameters(),
                                                         config_.learning_rate);
            }
            opt_ptr = task_optimizer_.get();
        }
        Adam& opt = *opt_ptr;
        Rng epoch_rng = rng_.fork("gen-task" + std::to_string(task.task_id));

        std::vector<Sample> current;
        std::shared_ptr<const TaskVocab> tv_shared;
        if (tv) tv_shared = std::make_shared<TaskVocab>(*tv);
        for (const auto& ex : task.train) {
            Sample s;
            s.input_ids = vocab_.encode(ex.text);
            s.target_ids = vocab_.encode(ex.label);
            s.target_ids.push_back(Vocabulary::kEos);
            s.mask = tv_shared;
            current.push_back(std::move(s));
        }

        double best_val = std::numeric_limits<double>::infinity();
        std::vector<std::vector<double>> best_snapshot;
        std::size_t bad_epochs = 0;
        std::size_t epochs_done = 0;

        for (std::size_t epoch = 0; epoch < config_.epochs; ++epoch) {
            ++epochs_done;
            std::vector<std::size_t> order(current.size());
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            epoch_rng.shuffle(order);

            // per-epoch replay pools
            std::vector<Sample> er_pool;
            if (uses_replay_buffer(config_.method)) {
                std::vector<const StoredExample*> stored;
                for (const auto& item : buffer_.items()) stored.push_back(&item);
                epoch_rng.shuffle(stored);
                for (const auto* item : stored) {
                    Sample s;
                    s.input_ids = vocab_.encode(item->record.text);
                    s.target_ids = vocab_.encode(item->record.label);
                    s.target_ids.push_back(Vocabulary::kEos);
                    er_pool.push_back(std::move(s));
                }
            }
            std::vector<Sample> lpr_pool;
            if (uses_pseudo_replay(config_.method) && !lpr_base.empty()) {
                Rng lpr_rng = epoch_rng.fork("lpr");
                auto refreshed = build_lpr(lpr_base, *rel_table_, lpr_rng);
                (void)refreshed;  // the per-draw re-augmentation below supersedes it
                auto drawn = sample_lpr(lpr_base, config_.lpr_lambda, current.size(),
                                        *rel_table_, lpr_rng);
                const std::size_t expected =
                    round_half_up(config_.lpr_lambda * static_cast<double>(current.size()));
                report_.lpr_log.push_back({task.task_id, epoch, drawn.size(), expected});
                if (expected == 0 && config_.lpr_lambda > 0.0) {
                    report_.warnings.push_back(
                        "pseudo-replay starved at task " + std::to_string(task.task_id) +
                        ": round(lambda * " + std::to_string(current.size()) + ") = 0");
                }
                for (const auto& p : drawn) {
                    const std::size_t want = static_cast<std::size_t>(
                        std::ceil(0.3 * static_cast<double>(p.target.size())));
                    if (p.inserted_positions.size() < want) {
                        report_.warnings.push_back(
                            "augmentation skipped insertions for a label without neighbors"
                            " at task " + std::to_string(task.task_id));
                    }
                    lpr_pool.push_back(to_sample(p));
                }
            }

            for (std::size_t start = 0; start < order.size(); start += config_.batch_size) {
                const std::size_t end = std::min(order.size(), start + config_.batch_size);
                std::vector<Sample> cur_batch;
                for (std::size_t i = start; i < end; ++i) cur_batch.push_back(current[order[i]]);

                std::vector<Sample> er_batch;
                auto [e0, e1] = paced_window(start, end, order.size(), er_pool.size());
                for (std::size_t i = e0; i < e1; ++i) er_batch.push_back(er_pool[i]);

                std::vector<Sample> lpr_batch;
                auto [l0, l1] = paced_window(start, end, order.size(), lpr_pool.size());
                for (std::size_t i = l0; i < l1; ++i) lpr_batch.push_back(lpr_pool[i]);

                Tape tape;
                Tensor loss;
                if (uses_pseudo_replay(config_.method)) {
                    auto r = combined_exemplar_loss(tape, model_, cur_batch, er_batch,
                                                    lpr_batch, config_.mu, *tv);
                    loss = r.loss;
                } else {
                    auto r = nll_loss(tape, model_, cur_batch, /*masked=*/false);
                    loss = r.loss;
                }
                opt.zero_grad();
                tape.backward(loss);
                if (config_.method == Method::EwcG) {
                    auto params = model_.parameters();
                    for (const auto& anchor : ewc_anchors_) {
                        add_ewc_penalty_gradient(params, anchor, config_.ewc_weight);
                    }
                }
                opt.step();
            }

            const double val = validation_loss(task, tv);
            if (val < best_val) {
                best_val = val;
                best_snapshot = snapshot_trainable();
                bad_epochs = 0;
            } else {
                ++bad_epochs;
                if (bad_epochs >= config_.patience) break;
            }
        }
        if (!best_snapshot.empty()) restore_trainable(best_snapshot);
        report_.epochs_ran.push_back(epochs_done);
    }

    void train_classifier_task(const TaskData& task) {
        Adam opt(trainable_parameters(), config_.learning_rate);
        Rng epoch_rng = rng_.fork("cls-task" + std::to_string(task.task_id));

        std::vector<std::pair<const ExampleRecord*, std::size_t>> current;
        for (const auto& ex : task.train) {
            current.emplace_back(&ex, class_index_.at(normalize_label(ex.label)));
        }

        double best_val = std::numeric_limits<double>::infinity();
        std::vector<std::vector<double>> best_snapshot;
        std::size_t bad_epochs = 0;
        std::size_t epochs_done = 0;

        for (std::size_t epoch = 0; epoch < config_.epochs; ++epoch) {
            ++epochs_done;
            std::vector<std::size_t> order(current.size());
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            epoch_rng.shuffle(order);

            std::vector<std::pair<const ExampleRecord*, std::size_t>> er_pool;
            if (uses_replay_buffer(config_.method)) {
                std::vector<const StoredExample*> stored;
                for (const auto& item : buffer_.items()) stored.push_back(&item);
                epoch_rng.shuffle(stored);
                for (const auto* item : stored)
                    er_pool.emplace_back(&item->record, item->class_index);
            }

            for (std::size_t start = 0; start < order.size(); start += config_.batch_size) {
                const std::size_t end = std::min(order.size(), start + config_.batch_size);
                std::vector<std::pair<const ExampleRecord*, std::size_t>> batch;
                for (std::size_t i = start; i < end; ++i) batch.push_back(current[order[i]]);
                auto [e0, e1] = paced_window(start, end, order.size(), er_pool.size());
                for (std::size_t i = e0; i < e1; ++i) batch.push_back(er_pool[i]);

                Tape tape;
                Tensor loss = classifier_batch_loss(tape, batch);
                opt.zero_grad();
                tape.backward(loss);
                opt.step();
            }

            const double val = validation_loss(task, nullptr);
            if (val < best_val) {
                best_val = val;
                best_snapshot = snapshot_trainable();
                bad_epochs = 0;
            } else {
                ++bad_epochs;
                if (bad_epochs >= config_.patience) break;
            }
        }
        if (!best_snapshot.empty()) restore_trainable(best_snapshot);
        report_.epochs_ran.push_back(epochs_done);
    }

    // diagonal Fisher: mean squared gradient of the generation loss over the
    // task's training batches
    void capture_ewc_anchor(const TaskData& task) {
        auto params = model_.parameters();
        EwcAnchor anchor;
        anchor.params = model_.snapshot_values();
        anchor.fisher.clear();
        for (const Tensor* p : params) anchor.fisher.emplace_back(p->numel(), 0.0);

        std::vector<Sample> samples;
        for (const auto& ex : task.train) {
            Sample s;
            s.input_ids = vocab_.encode(ex.text);
            s.target_ids = vocab_.encode(ex.label);
            s.target_ids.push_back(Vocabulary::kEos);
            samples.push_back(std::move(s));
        }
        std::size_t batches = 0;
        for (std::size_t start = 0; start < samples.size(); start += config_.batch_size) {
            const std::size_t end = std::min(samples.size(), start + config_.batch_size);
            Tape tape;
            auto r = nll_loss(tape, model_,
                              std::span(samples.data() + start, end - start), false);
            model_.zero_grad();
            tape.backward(r.loss);
            for (std::size_t i = 0; i < params.size(); ++i) {
                const auto& g = params[i]->grad();
                for (std::size_t j = 0; j < g.size(); ++j) {
                    anchor.fisher[i][j] += g[j] * g[j];
                }
            }
            ++batches;
        }
        if (batches > 0) {
            for (auto& f : anchor.fisher) {
                for (auto& x : f) x /= static_cast<double>(batches);
            }
        }
        ewc_anchors_.push_back(std::move(anchor));
    }

    // prediction for one input; the path receives the text only (no task id)
    std::size_t predict_class(const std::string& text) {
        if (is_generation_method(config_.method)) {
            auto p = predict(model_, *pool_, vocab_.encode(text), &report_.warnings);
            if (p.fallback) ++report_.retrieval_fallbacks;
            if (!pool_->contains(p.label)) ++report_.closed_world_violations;
            return class_index_.at(p.label);
        }
        Tape tape(/*track=*/false);
        Tensor logits = classifier_logits(tape, vocab_.encode(text));
        std::size_t best = 0;
        double best_score = logits.at(0, 0);
        for (std::size_t c = 1; c < logits.cols(); ++c) {
            if (logits.at(0, c) > best_score) {
                best_score = logits.at(0, c);
                best = c;
            }
        }
        return best;
    }

    void evaluate_after_task() {
        const std::size_t t = static_cast<std::size_t>(last_task_);
        std::vector<EvalCell> row(t);
        const bool final_task = (t == stream_.tasks.size());
        ConfusionMatrix cm(classes_);
        for (std::size_t i = 0; i < t; ++i) {
            for (const auto& ex : stream_.tasks[i].test) {
                const std::size_t truth = class_index_.at(normalize_label(ex.label));
                const std::size_t pred = predict_class(ex.text);
                row[i].total += 1;
                if (pred == truth) row[i].correct += 1;
                cm.add(truth, pred);
            }
        }
        report_.acc_matrix.push_back(std::move(row));
        std::vector<std::size_t> newest_classes;
        for (std::size_t c = 0; c < classes_.size(); ++c) {
            if (class_task_[c] == last_task_) newest_classes.push_back(c);
        }
        report_.bias_trajectory.push_back(last_task_bias(cm, newest_classes));
        if (final_task) {
            report_.confusion = cm;
            report_.bias_last_task = report_.bias_trajectory.back();
        }
    }

    void evaluate_joint(const TaskData& merged) {
        std::vector<EvalCell> row(1);
        ConfusionMatrix cm(classes_);
        for (const auto& ex : merged.test) {
            const std::size_t truth = class_index_.at(normalize_label(ex.label));
            const std::size_t pred = predict_class(ex.text);
            row[0].total += 1;
            if (pred == truth) row[0].correct += 1;
            cm.add(truth, pred);
        }
        report_.acc_matrix.push_back(std::move(row));
        report_.confusion = cm;
        report_.bias_trajectory.push_back(0.0);
        report_.bias_last_task = 0.0;
    }

    // Unsupervised k-means over bag-of-words vectors of the corpus texts.
    // Returns one cluster index per text; fully seeded and deterministic.
    std::vector<std::size_t> cluster_corpus(const std::vector<std::vector<int>>& docs,
                                            std::size_t k, Rng& rng) const {
        const std::size_t v = vocab_.size();
        std::vector<std::vector<double>> vecs(docs.size(), std::vector<double>(v, 0.0));
        for (std::size_t i = 0; i < docs.size(); ++i) {
            for (int id : docs[i]) vecs[i][static_cast<std::size_t>(id)] += 1.0;
            double n2 = 0.0;
            for (double x : vecs[i]) n2 += x * x;
            if (n2 > 0.0) {
                const double inv = 1.0 / std::sqrt(n2);
                for (double& x : vecs[i]) x *= inv;
            }
        }
        std::vector<std::vector<double>> centers;
        std::vector<std::size_t> pick(docs.size());
        for (std::size_t i = 0; i < docs.size(); ++i) pick[i] = i;
        rng.shuffle(pick);
        for (std::size_t c = 0; c < k && c < docs.size(); ++c) centers.push_back(vecs[pick[c]]);
        std::vector<std::size_t> assign(docs.size(), 0);
        for (int iter = 0; iter < 10; ++iter) {
            for (std::size_t i = 0; i < docs.size(); ++i) {
                double best = -2.0;
                std::size_t arg = 0;
                for (std::size_t c = 0; c < centers.size(); ++c) {
                    double dot = 0.0;
                    for (int id : docs[i]) dot += centers[c][static_cast<std::size_t>(id)];
                    if (dot > best) {
                        best = dot;
                        arg = c;
                    }
                }
                assign[i] = arg;
            }
            for (auto& c : centers) std::fill(c.begin(), c.end(), 0.0);
            std::vector<std::size_t> counts(centers.size(), 0);
            for (std::size_t i = 0; i < docs.size(); ++i) {
                ++counts[assign[i]];
                for (std::size_t j = 0; j < v; ++j) centers[assign[i]][j] += vecs[i][j];
            }
            for (std::size_t c = 0; c < centers.size(); ++c) {
                double n2 = 0.0;
                for (double x : centers[c]) n2 += x * x;
                if (n2 > 0.0) {
                    const double inv = 1.0 / std::sqrt(n2);
                    for (double& x : centers[c]) x *= inv;
                }
            }
        }
        return assign;
    }

    // Generation warm-up: name unsupervised corpus clusters. Each k-means
    // cluster of the unlabeled corpus gets a random two-word pseudo-name from
    // the label vocabulary; the model learns (corrupted text -> pseudo-name).
    // The attend-and-name skill transfers to the tasks while the random
    // names carry no text-to-label knowledge.
    void pretrain() {
        Adam opt(model_.parameters(), config_.pretrain_learning_rate);
        Rng pre_rng = rng_.fork("pretrain");

        std::vector<int> label_words;
        {
            std::vector<std::uint8_t> seen(vocab_.size(), 0);
            for (const auto& task : stream_.tasks) {
                for (const auto& cls : task.classes) {
                    for (int id : vocab_.encode(cls)) {
                        if (!seen[static_cast<std::size_t>(id)]) {
                            seen[static_cast<std::size_t>(id)] = 1;
                            label_words.push_back(id);
                        }
                    }
                }
            }
        }
        std::vector<std::vector<int>> docs;
        for (const auto& text : pretrain_corpus_) {
            auto ids = vocab_.encode(text);
            if (!ids.empty()) docs.push_back(std::move(ids));
        }
        if (docs.empty() || label_words.size() < 2) return;
        const std::size_t k =
            std::max<std::size_t>(2, std::min<std::size_t>(docs.size() / 10, 24));
        const auto clusters = cluster_corpus(docs, k, pre_rng);
        std::vector<std::vector<int>> names(k);
        for (auto& name : names) {
            const int a = label_words[pre_rng.uniform_index(label_words.size())];
            int b = a;
            while (b == a) b = label_words[pre_rng.uniform_index(label_words.size())];
            name = {a, b};
        }

        for (std::size_t epoch = 0; epoch < config_.pretrain_epochs; ++epoch) {
            std::vector<std::size_t> order(docs.size());
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            pre_rng.shuffle(order);
            for (std::size_t start = 0; start < order.size(); start += config_.batch_size) {
                const std::size_t end = std::min(order.size(), start + config_.batch_size);
                std::vector<Sample> batch;
                for (std::size_t i = start; i < end; ++i) {
                    const auto& ids = docs[order[i]];
                    Sample s;
                    for (int id : ids) {
                        if (pre_rng.uniform() >= 0.2) s.input_ids.push_back(id);
                    }
                    if (s.input_ids.empty()) s.input_ids.push_back(ids[0]);
                    s.target_ids = names[clusters[order[i]]];
                    s.target_ids.push_back(Vocabulary::kEos);
                    batch.push_back(std::move(s));
                }
                if (batch.empty()) continue;
                Tape tape;
                auto r = nll_loss(tape, model_, batch, /*masked=*/false);
                opt.zero_grad();
                tape.backward(r.loss);
                opt.step();
            }
        }
    }

    const TaskStream& stream_;
    LearnerConfig config_;
    std::uint64_t seed_;
    Rng rng_;
    std::vector<std::string> pretrain_corpus_;

    Vocabulary vocab_;
    Seq2SeqModel model_;
    std::shared_ptr<FrozenEmbedder> embedder_;
    std::unique_ptr<LabelPool> pool_;
    std::unique_ptr<RelatednessTable> rel_table_;
    Tensor head_w_, head_b_;  // classifier head over seen classes

    std::vector<std::string> classes_;           // insertion order == pool order
    std::vector<int> class_task_;                // owning task per class
    std::map<std::string, std::size_t> class_index_;
    std::vector<std::shared_ptr<TaskVocab>> task_vocabs_;
    std::vector<std::vector<std::string>> task_label_sets_;
    ReplayBuffer buffer_;
    std::vector<EwcAnchor> ewc_anchors_;
    std::vector<ProbeExample> probe_;
    std::unique_ptr<Adam> task_optimizer_;

    int last_task_ = 0;
    SeedReport report_;
};

// One full run for one seed.
inline SeedReport run_single_seed(const TaskStream& stream, const LearnerConfig& config,
                                  std::uint64_t seed,
                                  const std::vector<std::string>& pretrain_corpus = {}) {
    CilRun run(stream, config, seed, pretrain_corpus);
    if (config.method == Method::NonCl) {
        run.run_joint();
    } else {
        for (const auto& task : stream.tasks) run.train_task(task);
    }
    run.finalize();
    return run.report();
}

// Seed-replicated run; seeds may execute as parallel runs (no shared state).
inline RunReport run_sequence(const TaskStream& stream, const LearnerConfig& config,
                              std::span<const std::uint64_t> seeds,
                              const std::vector<std::string>& pretrain_corpus = {},
                              std::size_t threads = 1) {
    if (seeds.empty()) throw ConfigError("run_sequence: no seeds given");
    config.validate();
    RunReport report;
    report.method = config.method;
    report.config = config;
    report.seeds.resize(seeds.size());
    if (threads <= 1 || seeds.size() == 1) {
        for (std::size_t i = 0; i < seeds.size(); ++i) {
            report.seeds[i] = run_single_seed(stream, config, seeds[i], pretrain_corpus);
        }
        return report;
    }
    std::vector<std::thread> workers;
    std::vector<std::exception_ptr> errors(seeds.size());
    std::atomic<std::size_t> next{0};
    const std::size_t n_workers = std::min(threads, seeds.size());
    for (std::size_t w = 0; w < n_workers; ++w) {
        workers.emplace_back([&] {
            while (true) {
                const std::size_t i = next.fetch_add(1);
                if (i >= seeds.size()) break;
                try {
                    report.seeds[i] = run_single_seed(stream, config, seeds[i], pretrain_corpus);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    }
    for (auto& t : workers) t.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    return report;
}

}  // namespace vag
