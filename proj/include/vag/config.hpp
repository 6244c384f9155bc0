#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "vag/data.hpp"
#include "vag/error.hpp"
#include "vag/harness.hpp"

namespace vag {

// Flat key-value config with [section] headers, '#' or ';' comments.
class IniFile {
public:
    struct Entry {
        std::string value;
        std::size_t line = 0;
        mutable bool used = false;
    };

    static IniFile parse_file(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw ConfigError("cannot open config file " + path);
        std::stringstream ss;
        ss << is.rdbuf();
        return parse_text(ss.str(), path);
    }

    static IniFile parse_text(const std::string& text, const std::string& origin = "<config>") {
        IniFile ini;
        ini.origin_ = origin;
        std::istringstream is(text);
        std::string line, section;
        std::size_t line_no = 0;
        while (std::getline(is, line)) {
            ++line_no;
            std::string s = strip(line);
            if (s.empty() || s[0] == '#' || s[0] == ';') continue;
            if (s.front() == '[') {
                if (s.back() != ']') {
                    throw ConfigError(origin + ": line " + std::to_string(line_no) +
                                      ": unterminated section header");
                }
                section = strip(s.substr(1, s.size() - 2));
                continue;
            }
            const auto eq = s.find('=');
            if (eq == std::string::npos) {
                throw ConfigError(origin + ": line " + std::to_string(line_no) +
                                  ": expected key = value");
            }
            const std::string key = strip(s.substr(0, eq));
            const std::string value = strip(s.substr(eq + 1));
            if (key.empty()) {
                throw ConfigError(origin + ": line " + std::to_string(line_no) + ": empty key");
            }
            ini.entries_[section + "." + key] = {value, line_no, false};
        }
        return ini;
    }

    bool has(const std::string& key) const { return entries_.count(key) != 0; }

    std::string get_string(const std::string& key, const std::string& fallback) const {
        auto it = entries_.find(key);
        if (it == entries_.end()) return fallback;
        it->second.used = true;
        return it->second.value;
    }

    double get_double(const std::string& key, double fallback) const {
        auto it = entries_.find(key);
        if (it == entries_.end()) return fallback;
        it->second.used = true;
        try {
            std::size_t pos = 0;
            double v = std::stod(it->second.value, &pos);
            if (pos != it->second.value.size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            throw ConfigError(origin_ + ": line " + std::to_string(it->second.line) + ": '" +
                              it->second.value + "' is not a number for " + key);
        }
    }

    std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const {
        const double v = get_double(key, static_cast<double>(fallback));
        if (v < 0.0 || v != std::floor(v)) {
            auto it = entries_.find(key);
            throw ConfigError(origin_ + ": line " + std::to_string(it->second.line) + ": " +
                              key + " must be a non-negative integer");
        }
        return static_cast<std::uint64_t>(v);
    }

    std::vector<std::string> get_list(const std::string& key,
                                      const std::vector<std::string>& fallback) const {
        auto it = entries_.find(key);
        if (it == entries_.end()) return fallback;
        it->second.used = true;
        std::vector<std::string> out;
        std::string cur;
        for (char ch : it->second.value) {
            if (ch == ',') {
                if (!strip(cur).empty()) out.push_back(strip(cur));
                cur.clear();
            } else {
                cur.push_back(ch);
            }
        }
        if (!strip(cur).empty()) out.push_back(strip(cur));
        if (out.empty()) {
            throw ConfigError(origin_ + ": line " + std::to_string(it->second.line) + ": " +
                              key + " must list at least one value");
        }
        return out;
    }

    void reject_unused() const {
        for (const auto& [key, entry] : entries_) {
            if (!entry.used) {
                throw ConfigError(origin_ + ": line " + std::to_string(entry.line) +
                                  ": unknown key '" + key + "'");
            }
        }
    }

private:
    static std::string strip(const std::string& s) {
        std::size_t a = 0, b = s.size();
        while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
        while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
        return s.substr(a, b - a);
    }

    std::string origin_;
    std::map<std::string, Entry> entries_;
};

enum class DataSource { Synthetic, Jsonl, Stream };

struct DataConfig {
    DataSource source = DataSource::Synthetic;
    SyntheticSpec spec;
    std::uint64_t seed = 1;
    std::string path;                  // jsonl file or stream directory
    std::size_t tasks = 5;             // X for jsonl splitting
    std::size_t classes_per_task = 4;  // Y for jsonl splitting
};

struct ExperimentConfig {
    DataConfig data;
    std::vector<Method> methods{Method::Vag};
    std::vector<std::uint64_t> seeds{1, 2, 3};
    LearnerConfig learner;  // method field is overridden per run
    std::size_t pretrain_texts_per_class = 20;
    std::string out_dir = "out";
};

inline ExperimentConfig load_experiment_config(const IniFile& ini) {
    ExperimentConfig cfg;

    const std::string source = ini.get_string("data.source", "synthetic");
    if (source == "synthetic") {
        cfg.data.source = DataSource::Synthetic;
    } else if (source == "jsonl") {
        cfg.data.source = DataSource::Jsonl;
    } else if (source == "stream") {
        cfg.data.source = DataSource::Stream;
    } else {
        throw ConfigError("data.source must be synthetic, jsonl or stream; got '" + source +
                          "'");
    }
    cfg.data.path = ini.get_string("data.path", "");
    cfg.data.seed = ini.get_u64("data.seed", 1);
    cfg.data.tasks = ini.get_u64("data.tasks", 5);
    cfg.data.classes_per_task = ini.get_u64("data.classes_per_task", 4);
    auto& spec = cfg.data.spec;
    spec.tasks = cfg.data.tasks;
    spec.classes_per_task = cfg.data.classes_per_task;
    spec.num_classes = ini.get_u64("data.classes", spec.tasks * spec.classes_per_task);
    spec.train_per_class = ini.get_u64("data.train_per_class", 60);
    spec.val_per_class = ini.get_u64("data.val_per_class", 20);
    spec.test_per_class = ini.get_u64("data.test_per_class", 20);
    spec.bag_size = ini.get_u64("data.bag_size", 8);
    spec.shared_tokens = ini.get_u64("data.shared_tokens", 2);
    spec.vocab_words = ini.get_u64("data.vocab_words", 160);
    spec.noise_rate = ini.get_double("data.noise_rate", 0.05);
    if ((cfg.data.source == DataSource::Jsonl || cfg.data.source == DataSource::Stream) &&
        cfg.data.path.empty()) {
        throw ConfigError("data.path is required for jsonl/stream sources");
    }

    auto& model = cfg.learner.model;
    model.d_model = ini.get_u64("model.d_model", 64);
    model.n_heads = ini.get_u64("model.heads", 4);
    model.enc_layers = ini.get_u64("model.encoder_layers", 2);
    model.dec_layers = ini.get_u64("model.decoder_layers", 2);
    model.ff_mult = ini.get_u64("model.ff_mult", 4);
    model.max_seq_len = ini.get_u64("model.max_seq_len", 128);
    model.max_target_len = ini.get_u64("model.max_target_len", 16);

    cfg.methods.clear();
    for (const auto& name : ini.get_list("train.methods", {"vag"})) {
        cfg.methods.push_back(parse_method(name));
    }
    cfg.seeds.clear();
    for (const auto& s : ini.get_list("train.seeds", {"1", "2", "3"})) {
        try {
            cfg.seeds.push_back(std::stoull(s));
        } catch (const std::exception&) {
            throw ConfigError("train.seeds: '" + s + "' is not an integer");
        }
    }
    auto& learner = cfg.learner;
    learner.epochs = ini.get_u64("train.epochs", 10);
    learner.batch_size = ini.get_u64("train.batch_size", 8);
    learner.learning_rate = ini.get_double("train.learning_rate", 3e-4);
    learner.patience = ini.get_u64("train.patience", 2);
    learner.mu = ini.get_double("train.mu", 1.0);
    learner.lpr_lambda = ini.get_double("train.lpr_lambda", 0.1);
    learner.buffer_fraction = ini.get_double("train.buffer_fraction", 0.0);
    learner.ewc_weight = ini.get_double("train.ewc_weight", 5000.0);
    learner.pretrain_epochs = ini.get_u64("train.pretrain_epochs", 10);
    learner.pretrain_learning_rate = ini.get_double("train.pretrain_learning_rate", 1e-3);
    learner.persist_optimizer = ini.get_u64("train.persist_optimizer", 0) != 0;
    learner.embedder_seed = ini.get_u64("train.embedder_seed", 17);
    learner.embed_dim = ini.get_u64("train.embed_dim", 64);
    learner.relatedness_k = ini.get_u64("train.relatedness_k", 10);
    cfg.pretrain_texts_per_class = ini.get_u64("train.pretrain_texts_per_class", 20);

    cfg.out_dir = ini.get_string("output.dir", "out");
    ini.reject_unused();

    // buffer fractions are restricted to the benchmark presets
    const double p = learner.buffer_fraction;
    if (p != 0.0 && p != 0.01 && p != 0.03 && p != 0.05) {
        throw ConfigError("train.buffer_fraction must be one of 0, 0.01, 0.03, 0.05; got " +
                          std::to_string(p));
    }
    if (cfg.seeds.empty()) throw ConfigError("train.seeds must not be empty");
    if (cfg.methods.empty()) throw ConfigError("train.methods must not be empty");
    return cfg;
}

inline TaskStream build_stream(const DataConfig& data) {
    switch (data.source) {
        case DataSource::Synthetic: return generate_synthetic(data.spec, data.seed);
        case DataSource::Jsonl: {
            Dataset set = ingest_jsonl(data.path);
            return split_tasks(set, data.tasks, data.classes_per_task, data.seed);
        }
        case DataSource::Stream: return load_stream(data.path);
    }
    throw ConfigError("build_stream: unknown data source");
}

// Unlabeled warm-up corpus: fresh synthetic texts for synthetic streams,
// the training texts (labels dropped) otherwise.
inline std::vector<std::string> build_pretrain_corpus(const ExperimentConfig& cfg,
                                                      const TaskStream& stream) {
    if (cfg.learner.pretrain_epochs == 0) return {};
    if (cfg.data.source == DataSource::Synthetic) {
        return generate_pretrain_corpus(cfg.data.spec, cfg.data.seed,
                                        cfg.pretrain_texts_per_class);
    }
    std::vector<std::string> texts;
    for (const auto& task : stream.tasks) {
        for (const auto& ex : task.train) texts.push_back(ex.text);
    }
    return texts;
}

// Resolved config echo, written verbatim into every run directory.
inline std::string render_config(const ExperimentConfig& cfg, Method method) {
    std::ostringstream os;
    os << "[data]\n";
    os << "source = "
       << (cfg.data.source == DataSource::Synthetic
               ? "synthetic"
               : (cfg.data.source == DataSource::Jsonl ? "jsonl" : "stream"))
       << "\n";
    if (!cfg.data.path.empty()) os << "path = " << cfg.data.path << "\n";
    os << "seed = " << cfg.data.seed << "\n";
    os << "tasks = " << cfg.data.tasks << "\n";
    os << "classes_per_task = " << cfg.data.classes_per_task << "\n";
    if (cfg.data.source == DataSource::Synthetic) {
        const auto& s = cfg.data.spec;
        os << "classes = " << s.num_classes << "\n";
        os << "train_per_class = " << s.train_per_class << "\n";
        os << "val_per_class = " << s.val_per_class << "\n";
        os << "test_per_class = " << s.test_per_class << "\n";
        os << "bag_size = " << s.bag_size << "\n";
        os << "shared_tokens = " << s.shared_tokens << "\n";
        os << "vocab_words = " << s.vocab_words << "\n";
        os << "noise_rate = " << s.noise_rate << "\n";
    }
    const auto& m = cfg.learner.model;
    os << "\n[model]\n";
    os << "d_model = " << m.d_model << "\n";
    os << "heads = " << m.n_heads << "\n";
    os << "encoder_layers = " << m.enc_layers << "\n";
    os << "decoder_layers = " << m.dec_layers << "\n";
    os << "ff_mult = " << m.ff_mult << "\n";
    os << "max_seq_len = " << m.max_seq_len << "\n";
    os << "max_target_len = " << m.max_target_len << "\n";
    const auto& l = cfg.learner;
    os << "\n[train]\n";
    os << "methods = " << method_name(method) << "\n";
    os << "seeds = ";
    for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
        if (i) os << ",";
        os << cfg.seeds[i];
    }
    os << "\n";
    os << "epochs = " << l.epochs << "\n";
    os << "batch_size = " << l.batch_size << "\n";
    os << "learning_rate = " << l.learning_rate << "\n";
    os << "patience = " << l.patience << "\n";
    os << "mu = " << l.mu << "\n";
    os << "lpr_lambda = " << l.lpr_lambda << "\n";
    os << "buffer_fraction = " << l.buffer_fraction << "\n";
    os << "ewc_weight = " << l.ewc_weight << "\n";
    os << "pretrain_epochs = " << l.pretrain_epochs << "\n";
    os << "pretrain_learning_rate = " << l.pretrain_learning_rate << "\n";
    os << "pretrain_texts_per_class = " << cfg.pretrain_texts_per_class << "\n";
    os << "embedder_seed = " << l.embedder_seed << "\n";
    os << "embed_dim = " << l.embed_dim << "\n";
    os << "relatedness_k = " << l.relatedness_k << "\n";
    os << "\n[output]\n";
    os << "dir = " << cfg.out_dir << "\n";
    return os.str();
}

}  // namespace vag
