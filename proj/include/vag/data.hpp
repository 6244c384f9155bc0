#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "vag/error.hpp"
#include "vag/rng.hpp"
#include "vag/vocab.hpp"

namespace vag {

struct ExampleRecord {
    std::string text;
    std::string label;
    bool operator==(const ExampleRecord&) const = default;
};

using Dataset = std::vector<ExampleRecord>;

struct TaskData {
    int task_id = 0;                    // 1-based
    std::vector<std::string> classes;   // label sequences of C_t
    Dataset train, val, test;
};

struct TaskStream {
    std::vector<TaskData> tasks;

    std::vector<std::string> all_classes() const {
        std::vector<std::string> out;
        for (const auto& t : tasks) out.insert(out.end(), t.classes.begin(), t.classes.end());
        return out;
    }
};

// ---- synthetic benchmark ---------------------------------------------------

// Classes come in sibling pairs that share a label token and `shared_tokens`
// bag tokens, so lexically close labels compete at retrieval time.
struct SyntheticSpec {
    std::size_t num_classes = 20;
    std::size_t tasks = 5;             // X
    std::size_t classes_per_task = 4;  // Y
    std::size_t train_per_class = 60;
    std::size_t val_per_class = 20;
    std::size_t test_per_class = 20;
    std::size_t bag_size = 8;
    std::size_t shared_tokens = 2;     // bag tokens shared with the sibling class
    std::size_t vocab_words = 160;     // content word universe
    double noise_rate = 0.05;
    std::size_t min_text_len = 8;
    std::size_t max_text_len = 20;

    void validate() const {
        if (tasks * classes_per_task != num_classes) {
            throw ConfigError("SyntheticSpec: tasks * classes_per_task = " +
                              std::to_string(tasks * classes_per_task) + " != num_classes " +
                              std::to_string(num_classes));
        }
        if (bag_size == 0 || shared_tokens > bag_size) {
            throw ConfigError("SyntheticSpec: shared_tokens must not exceed bag_size");
        }
        const std::size_t pairs = (num_classes + 1) / 2;
        const std::size_t needed = pairs * (2 * bag_size - shared_tokens);
        if (vocab_words < needed) {
            throw ConfigError("SyntheticSpec: vocab_words " + std::to_string(vocab_words) +
                              " too small; class bags need " + std::to_string(needed));
        }
        if (noise_rate < 0.0 || noise_rate > 1.0) {
            throw ConfigError("SyntheticSpec: noise_rate must lie in [0, 1]");
        }
        if (min_text_len == 0 || min_text_len > max_text_len) {
            throw ConfigError("SyntheticSpec: bad text length range");
        }
    }
};

namespace detail {

// Pronounceable deterministic pseudo-words ("bakodu", "minera", ...).
inline std::string synth_word(Rng& rng, std::size_t syllables) {
    static constexpr const char* kConsonants = "bcdfgklmnprstvz";
    static constexpr const char* kVowels = "aeiou";
    std::string w;
    for (std::size_t s = 0; s < syllables; ++s) {
        w.push_back(kConsonants[rng.uniform_index(15)]);
        w.push_back(kVowels[rng.uniform_index(5)]);
    }
    return w;
}

inline std::vector<std::string> distinct_words(Rng& rng, std::size_t count,
                                               std::size_t syllables) {
    std::set<std::string> seen;
    std::vector<std::string> out;
    while (out.size() < count) {
        std::string w = synth_word(rng, syllables);
        if (seen.insert(w).second) out.push_back(std::move(w));
    }
    return out;
}

struct SynthClass {
    std::string label;
    std::vector<std::string> bag;      // content tokens
    std::vector<double> bag_weights;   // descending sampling weights
};

}  // namespace detail

// Deterministic synthetic task stream: per class, texts are bags-of-words
// drawn from a weighted token bag plus global noise. Splits are disjoint by
// construction.
inline TaskStream generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
    spec.validate();
    Rng rng(seed);
    Rng word_rng = rng.fork("words");
    Rng label_rng = rng.fork("labels");
    Rng text_rng = rng.fork("texts");
    Rng split_rng = rng.fork("split");

    const std::size_t k = spec.num_classes;
    const std::size_t pairs = (k + 1) / 2;
    auto content = detail::distinct_words(word_rng, spec.vocab_words, 3);
    auto family_words = detail::distinct_words(label_rng, pairs, 2);
    auto tag_words = detail::distinct_words(label_rng, 2 * k, 2);

    std::vector<detail::SynthClass> classes(k);
    std::size_t next_word = 0;
    for (std::size_t p = 0; p < pairs; ++p) {
        std::vector<std::string> shared;
        for (std::size_t s = 0; s < spec.shared_tokens; ++s) shared.push_back(content[next_word++]);
        for (std::size_t half = 0; half < 2; ++half) {
            const std::size_t c = 2 * p + half;
            if (c >= k) break;
            auto& sc = classes[c];
            sc.bag = shared;
            while (sc.bag.size() < spec.bag_size) sc.bag.push_back(content[next_word++]);
            for (std::size_t i = 0; i < sc.bag.size(); ++i)
                sc.bag_weights.push_back(1.0 / static_cast<double>(i + 1));
            // label: shared family word + 1-2 class tags
            sc.label = family_words[p] + " " + tag_words[2 * c];
            if (label_rng.uniform() < 0.5) sc.label += " " + tag_words[2 * c + 1];
        }
    }

    auto draw_text = [&](const detail::SynthClass& sc) {
        const std::size_t len =
            spec.min_text_len + text_rng.uniform_index(spec.max_text_len - spec.min_text_len + 1);
        double weight_sum = 0.0;
        for (double w : sc.bag_weights) weight_sum += w;
        std::string text;
        for (std::size_t i = 0; i < len; ++i) {
            std::string tok;
            if (text_rng.uniform() < spec.noise_rate) {
                tok = content[text_rng.uniform_index(content.size())];
            } else {
                double r = text_rng.uniform() * weight_sum;
                std::size_t pick = 0;
                while (pick + 1 < sc.bag.size() && r > sc.bag_weights[pick]) {
                    r -= sc.bag_weights[pick];
                    ++pick;
                }
                tok = sc.bag[pick];
            }
            if (!text.empty()) text.push_back(' ');
            text += tok;
        }
        return text;
    };

    // classes are assigned to tasks by a seeded shuffle
    std::vector<std::size_t> order(k);
    for (std::size_t i = 0; i < k; ++i) order[i] = i;
    split_rng.shuffle(order);

    TaskStream stream;
    for (std::size_t t = 0; t < spec.tasks; ++t) {
        TaskData task;
        task.task_id = static_cast<int>(t + 1);
        for (std::size_t j = 0; j < spec.classes_per_task; ++j) {
            const auto& sc = classes[order[t * spec.classes_per_task + j]];
            task.classes.push_back(sc.label);
            for (std::size_t i = 0; i < spec.train_per_class; ++i)
                task.train.push_back({draw_text(sc), sc.label});
            for (std::size_t i = 0; i < spec.val_per_class; ++i)
                task.val.push_back({draw_text(sc), sc.label});
            for (std::size_t i = 0; i < spec.test_per_class; ++i)
                task.test.push_back({draw_text(sc), sc.label});
        }
        stream.tasks.push_back(std::move(task));
    }
    return stream;
}

// Unlabeled texts from the same distribution, for the denoising warm-up.
// Label-vocabulary words are mixed in uniformly at random (independent of
// each text's class), so the decoder sees every label token during the
// warm-up without learning any text-label association.
inline std::vector<std::string> generate_pretrain_corpus(const SyntheticSpec& spec,
                                                         std::uint64_t seed,
                                                         std::size_t texts_per_class) {
    SyntheticSpec probe = spec;
    probe.train_per_class = texts_per_class;
    probe.val_per_class = 0;
    probe.test_per_class = 0;
    TaskStream s = generate_synthetic(probe, fnv1a64(std::uint64_t{0x9e3779b9}, seed));
    std::vector<std::string> label_words;
    {
        std::set<std::string> seen;
        for (const auto& task : s.tasks) {
            for (const auto& cls : task.classes) {
                for (const auto& tok : tokenize(cls)) {
                    if (seen.insert(tok).second) label_words.push_back(tok);
                }
            }
        }
    }
    Rng mix_rng(fnv1a64(std::uint64_t{0x517cc1b7}, seed));
    std::vector<std::string> out;
    for (const auto& task : s.tasks) {
        for (const auto& ex : task.train) {
            auto toks = tokenize(ex.text);
            const std::size_t n_inject =
                1 + mix_rng.uniform_index(std::max<std::size_t>(1, toks.size() / 3));
            for (std::size_t i = 0; i < n_inject; ++i) {
                const auto& w = label_words[mix_rng.uniform_index(label_words.size())];
                toks.insert(toks.begin() +
                                static_cast<std::ptrdiff_t>(mix_rng.uniform_index(toks.size() + 1)),
                            w);
            }
            std::string text;
            for (const auto& t : toks) {
                if (!text.empty()) text.push_back(' ');
                text += t;
            }
            out.push_back(std::move(text));
        }
    }
    return out;
}

// ---- JSONL ingestion -------------------------------------------------------

// One JSON object per line with string fields "text" and "label".
inline Dataset ingest_jsonl(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("ingest_jsonl: cannot open " + path);
    Dataset out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, /*allow_exceptions=*/false);
        if (j.is_discarded() || !j.is_object() || !j.contains("text") || !j.contains("label") ||
            !j["text"].is_string() || !j["label"].is_string()) {
            throw ConfigError(path + ": line " + std::to_string(line_no) +
                              ": expected {\"text\": ..., \"label\": ...}");
        }
        ExampleRecord r{j["text"].get<std::string>(), j["label"].get<std::string>()};
        if (r.label.empty() || tokenize(r.label).empty()) {
            throw ConfigError(path + ": line " + std::to_string(line_no) + ": empty label");
        }
        out.push_back(std::move(r));
    }
    return out;
}

inline void emit_jsonl(const Dataset& data, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw ConfigError("emit_jsonl: cannot open " + path + " for writing");
    for (const auto& r : data) {
        nlohmann::json j{{"text", r.text}, {"label", r.label}};
        os << j.dump() << "\n";
    }
}

// Shuffles classes by seed, partitions them into X tasks of Y classes, and
// splits each class's examples 60/20/20 into train/val/test. Labels remain
// natural-language sequences.
inline TaskStream split_tasks(const Dataset& data, std::size_t x, std::size_t y,
                              std::uint64_t seed, double val_fraction = 0.2,
                              double test_fraction = 0.2) {
    if (x == 0 || y == 0) throw ConfigError("split_tasks: X and Y must be positive");
    std::map<std::string, Dataset> by_class;
    std::vector<std::string> class_order;
    for (const auto& r : data) {
        if (!by_class.count(r.label)) class_order.push_back(r.label);
        by_class[r.label].push_back(r);
    }
    if (by_class.size() != x * y) {
        throw ConfigError("split_tasks: " + std::to_string(by_class.size()) +
                          " classes are not divisible into " + std::to_string(x) + " tasks of " +
                          std::to_string(y) + " classes");
    }
    Rng rng(seed);
    rng.shuffle(class_order);

    TaskStream stream;
    for (std::size_t t = 0; t < x; ++t) {
        TaskData task;
        task.task_id = static_cast<int>(t + 1);
        for (std::size_t j = 0; j < y; ++j) {
            const std::string& cls = class_order[t * y + j];
            task.classes.push_back(cls);
            Dataset examples = by_class[cls];
            rng.shuffle(examples);
            const std::size_t n = examples.size();
            const std::size_t n_test = static_cast<std::size_t>(
                std::floor(test_fraction * static_cast<double>(n)));
            const std::size_t n_val = static_cast<std::size_t>(
                std::floor(val_fraction * static_cast<double>(n)));
            for (std::size_t i = 0; i < n; ++i) {
                if (i < n_test) {
                    task.test.push_back(examples[i]);
                } else if (i < n_test + n_val) {
                    task.val.push_back(examples[i]);
                } else {
                    task.train.push_back(examples[i]);
                }
            }
        }
        stream.tasks.push_back(std::move(task));
    }
    return stream;
}

// ---- task stream directory format -------------------------------------

// manifest.json lists task order and class lists; per-task JSONL files hold
// the splits.
inline void save_stream(const TaskStream& stream, const std::string& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["tasks"] = nlohmann::json::array();
    for (const auto& task : stream.tasks) {
        char tag[16];
        std::snprintf(tag, sizeof(tag), "task%02d", task.task_id);
        const std::string base(tag);
        emit_jsonl(task.train, dir + "/" + base + ".train.jsonl");
        emit_jsonl(task.val, dir + "/" + base + ".val.jsonl");
        emit_jsonl(task.test, dir + "/" + base + ".test.jsonl");
        nlohmann::json t;
        t["task_id"] = task.task_id;
        t["classes"] = task.classes;
        t["train_file"] = base + ".train.jsonl";
        t["val_file"] = base + ".val.jsonl";
        t["test_file"] = base + ".test.jsonl";
        manifest["tasks"].push_back(std::move(t));
    }
    std::ofstream os(dir + "/manifest.json");
    if (!os) throw ConfigError("save_stream: cannot write manifest in " + dir);
    os << manifest.dump(2) << "\n";
}

inline TaskStream load_stream(const std::string& dir) {
    std::ifstream is(dir + "/manifest.json");
    if (!is) throw ConfigError("load_stream: cannot open " + dir + "/manifest.json");
    nlohmann::json manifest = nlohmann::json::parse(is, nullptr, false);
    if (manifest.is_discarded() || !manifest.contains("tasks")) {
        throw ConfigError("load_stream: malformed manifest in " + dir);
    }
    TaskStream stream;
    for (const auto& t : manifest["tasks"]) {
        TaskData task;
        task.task_id = t["task_id"].get<int>();
        for (const auto& c : t["classes"]) task.classes.push_back(c.get<std::string>());
        task.train = ingest_jsonl(dir + "/" + t["train_file"].get<std::string>());
        task.val = ingest_jsonl(dir + "/" + t["val_file"].get<std::string>());
        task.test = ingest_jsonl(dir + "/" + t["test_file"].get<std::string>());
        stream.tasks.push_back(std::move(task));
    }
    return stream;
}

// Vocabulary over every text and label in the stream (the fixed-vocabulary
// analogue of a pretrained tokenizer), plus any extra corpus texts.
inline Vocabulary build_vocabulary(const TaskStream& stream,
                                   const std::vector<std::string>& extra_texts = {}) {
    Vocabulary vocab;
    for (const auto& task : stream.tasks) {
        for (const auto& cls : task.classes) vocab.add_text(cls);
        for (const Dataset* split : {&task.train, &task.val, &task.test}) {
            for (const auto& ex : *split) {
                vocab.add_text(ex.text);
                vocab.add_text(ex.label);
            }
        }
    }
    for (const auto& text : extra_texts) vocab.add_text(text);
    return vocab;
}

}  // namespace vag
