// Experiment runner: generates benchmark data, runs class-incremental
// training with the configured methods, sweeps hyperparameters, and
// aggregates run directories into report tables.

#include <atomic>
#include <exception>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "vag/vag.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfigError = 2;
constexpr int kExitRuntimeError = 3;

std::vector<std::uint64_t> parse_seed_list(const std::string& csv) {
    std::vector<std::uint64_t> seeds;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) {
            seeds.push_back(std::stoull(cur));
            cur.clear();
        }
    };
    for (char ch : csv) {
        if (ch == ',') {
            flush();
        } else if (!std::isspace(static_cast<unsigned char>(ch))) {
            cur.push_back(ch);
        }
    }
    flush();
    if (seeds.empty()) throw vag::ConfigError("--seeds: no seeds given");
    return seeds;
}

struct RunOptions {
    std::string config_path;
    std::string out_dir;  // overrides [output] dir when set
    std::string seeds_csv;
    std::size_t threads = 1;
};

vag::ExperimentConfig load_config(const RunOptions& opts) {
    auto cfg = vag::load_experiment_config(vag::IniFile::parse_file(opts.config_path));
    if (!opts.out_dir.empty()) cfg.out_dir = opts.out_dir;
    if (!opts.seeds_csv.empty()) cfg.seeds = parse_seed_list(opts.seeds_csv);
    return cfg;
}

// Runs every configured method over the stream; one subdirectory per method.
void execute_run(const vag::ExperimentConfig& cfg, std::size_t threads) {
    const vag::TaskStream stream = vag::build_stream(cfg.data);
    const auto corpus = vag::build_pretrain_corpus(cfg, stream);
    for (vag::Method method : cfg.methods) {
        vag::LearnerConfig learner = cfg.learner;
        learner.method = method;
        if (!vag::uses_replay_buffer(method)) learner.buffer_fraction = 0.0;
        auto report = vag::run_sequence(stream, learner, cfg.seeds, corpus, threads);
        vag::write_run_report(report, cfg, cfg.out_dir + "/" + vag::method_name(method));
        std::cout << vag::method_name(method) << ": final accuracy "
                  << vag::fmt(100.0 * report.mean_final_accuracy()) << " +/- "
                  << vag::fmt(100.0 * report.std_final_accuracy()) << " %\n";
    }
}

int cmd_gen_data(const std::string& spec_path, const std::string& out_dir) {
    auto cfg = vag::load_experiment_config(vag::IniFile::parse_file(spec_path));
    if (cfg.data.source != vag::DataSource::Synthetic) {
        throw vag::ConfigError("gen-data requires data.source = synthetic");
    }
    vag::TaskStream stream = vag::generate_synthetic(cfg.data.spec, cfg.data.seed);
    vag::save_stream(stream, out_dir);
    std::size_t train = 0, val = 0, test = 0;
    for (const auto& t : stream.tasks) {
        train += t.train.size();
        val += t.val.size();
        test += t.test.size();
    }
    std::cout << "wrote " << stream.tasks.size() << " tasks (" << train << "/" << val << "/"
              << test << " train/val/test examples) to " << out_dir << "\n";
    return kExitOk;
}

int cmd_run(const RunOptions& opts) {
    auto cfg = load_config(opts);
    execute_run(cfg, opts.threads);
    return kExitOk;
}

void apply_sweep_value(vag::ExperimentConfig& cfg, const std::string& param,
                       const std::string& value) {
    try {
        if (param == "lpr_lambda") {
            cfg.learner.lpr_lambda = std::stod(value);
        } else if (param == "mu") {
            cfg.learner.mu = std::stod(value);
        } else if (param == "buffer_fraction") {
            const double p = std::stod(value);
            if (p != 0.0 && p != 0.01 && p != 0.03 && p != 0.05) {
                throw vag::ConfigError("buffer_fraction must be one of 0, 0.01, 0.03, 0.05; got " +
                                       value);
            }
            cfg.learner.buffer_fraction = p;
        } else if (param == "learning_rate") {
            cfg.learner.learning_rate = std::stod(value);
        } else if (param == "ewc_weight") {
            cfg.learner.ewc_weight = std::stod(value);
        } else {
            throw vag::ConfigError(
                "--param must sweep one of lpr_lambda, mu, buffer_fraction, learning_rate, "
                "ewc_weight; got '" + param + "'");
        }
    } catch (const std::invalid_argument&) {
        throw vag::ConfigError("--param: '" + value + "' is not a number");
    }
}

int cmd_sweep(const RunOptions& opts, const std::string& param_spec) {
    const auto eq = param_spec.find('=');
    if (eq == std::string::npos) {
        throw vag::ConfigError("--param expects name=v1,v2,...; got '" + param_spec + "'");
    }
    const std::string param = param_spec.substr(0, eq);
    std::vector<std::string> values;
    {
        std::string cur;
        for (char ch : param_spec.substr(eq + 1)) {
            if (ch == ',') {
                if (!cur.empty()) values.push_back(cur);
                cur.clear();
            } else {
                cur.push_back(ch);
            }
        }
        if (!cur.empty()) values.push_back(cur);
    }
    if (values.empty()) throw vag::ConfigError("--param: no values given");

    const auto base_cfg = load_config(opts);
    const vag::TaskStream stream = vag::build_stream(base_cfg.data);
    const auto corpus = vag::build_pretrain_corpus(base_cfg, stream);

    struct Cell {
        std::string value;
        vag::Method method;
        double mean = 0.0;
        double stddev = 0.0;
        std::vector<double> per_task_mean;
        bool ok = false;
        std::string error;
    };
    std::vector<Cell> cells;
    for (const auto& v : values) {
        for (vag::Method m : base_cfg.methods) cells.push_back({v, m, 0, 0, {}, false, ""});
    }

    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        while (true) {
            const std::size_t i = next.fetch_add(1);
            if (i >= cells.size()) break;
            Cell& cell = cells[i];
            try {
                vag::ExperimentConfig cfg = base_cfg;
                apply_sweep_value(cfg, param, cell.value);
                vag::LearnerConfig learner = cfg.learner;
                learner.method = cell.method;
                if (!vag::uses_replay_buffer(cell.method)) learner.buffer_fraction = 0.0;
                auto report = vag::run_sequence(stream, learner, cfg.seeds, corpus, 1);
                const std::string dir = cfg.out_dir + "/" + param + "_" + cell.value + "/" +
                                        vag::method_name(cell.method);
                vag::write_run_report(report, cfg, dir);
                cell.mean = report.mean_final_accuracy();
                cell.stddev = report.std_final_accuracy();
                const std::size_t tasks = report.seeds.front().acc_matrix.size();
                for (std::size_t t = 0; t < tasks; ++t) {
                    double s = 0.0;
                    for (const auto& r : report.seeds) s += r.accuracy_after_task(t);
                    cell.per_task_mean.push_back(s /
                                                 static_cast<double>(report.seeds.size()));
                }
                cell.ok = true;
            } catch (const std::exception& e) {
                cell.error = e.what();
            }
        }
    };
    std::vector<std::thread> pool;
    const std::size_t n_workers = std::max<std::size_t>(1, std::min(opts.threads, cells.size()));
    for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();

    std::filesystem::create_directories(base_cfg.out_dir);
    {
        auto os = std::ofstream(base_cfg.out_dir + "/sweep_summary.csv");
        os << "param,value,method,mean_final_accuracy,std_final_accuracy,status\n";
        for (const auto& c : cells) {
            os << param << "," << c.value << "," << vag::method_name(c.method) << ",";
            if (c.ok) os << vag::fmt(c.mean) << "," << vag::fmt(c.stddev) << ",ok\n";
            else os << ",,failed\n";
        }
    }
    {
        // accuracy-after-each-task curve, one column per sweep cell
        auto os = std::ofstream(base_cfg.out_dir + "/sweep_curve.csv");
        os << "task_index";
        for (const auto& c : cells) {
            os << "," << param << "=" << c.value;
            if (base_cfg.methods.size() > 1) os << ":" << vag::method_name(c.method);
        }
        os << "\n";
        std::size_t max_tasks = 0;
        for (const auto& c : cells) max_tasks = std::max(max_tasks, c.per_task_mean.size());
        for (std::size_t t = 0; t < max_tasks; ++t) {
            os << (t + 1);
            for (const auto& c : cells) {
                os << ",";
                if (t < c.per_task_mean.size()) os << vag::fmt(c.per_task_mean[t]);
            }
            os << "\n";
        }
    }
    bool any_failed = false;
    for (const auto& c : cells) {
        if (!c.ok) {
            any_failed = true;
            std::cerr << "sweep cell " << param << "=" << c.value << " ("
                      << vag::method_name(c.method) << ") failed: " << c.error << "\n";
        } else {
            std::cout << param << "=" << c.value << " " << vag::method_name(c.method)
                      << ": final accuracy " << vag::fmt(100.0 * c.mean) << " %\n";
        }
    }
    return any_failed ? kExitRuntimeError : kExitOk;
}

int cmd_report(const std::vector<std::string>& run_dirs, const std::string& out_dir) {
    vag::write_cross_run_report(run_dirs, out_dir);
    std::cout << "wrote " << out_dir << "/curves.csv and " << out_dir
              << "/report_summary.txt\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"class-incremental label generation experiments"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic task stream directory");
    std::string gen_spec, gen_out;
    gen->add_option("--spec,--config", gen_spec, "spec/config file")->required();
    gen->add_option("--out", gen_out, "output directory")->required();

    // run
    auto* run = app.add_subcommand("run", "run the configured experiment");
    RunOptions run_opts;
    run->add_option("--config", run_opts.config_path, "experiment config file")->required();
    run->add_option("--out", run_opts.out_dir, "output directory override");
    run->add_option("--seeds", run_opts.seeds_csv, "comma-separated seed override");
    run->add_option("--threads", run_opts.threads, "parallel seed workers");

    // sweep
    auto* sweep = app.add_subcommand("sweep", "run a hyperparameter grid");
    RunOptions sweep_opts;
    std::string param_spec;
    sweep->add_option("--config", sweep_opts.config_path, "experiment config file")->required();
    sweep->add_option("--param", param_spec, "grid as name=v1,v2,...")->required();
    sweep->add_option("--out", sweep_opts.out_dir, "output directory override");
    sweep->add_option("--seeds", sweep_opts.seeds_csv, "comma-separated seed override");
    sweep->add_option("--threads", sweep_opts.threads, "parallel sweep cells");

    // report
    auto* rep = app.add_subcommand("report", "aggregate run directories");
    std::vector<std::string> report_dirs;
    std::string report_out = "report";
    rep->add_option("dirs", report_dirs, "run directories (containing metrics.csv)")
        ->required();
    rep->add_option("--out", report_out, "output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfigError;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(gen_spec, gen_out);
        if (run->parsed()) return cmd_run(run_opts);
        if (sweep->parsed()) return cmd_sweep(sweep_opts, param_spec);
        if (rep->parsed()) return cmd_report(report_dirs, report_out);
    } catch (const vag::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfigError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntimeError;
    }
    return kExitConfigError;
}
