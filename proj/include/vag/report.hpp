#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "vag/config.hpp"
#include "vag/error.hpp"
#include "vag/harness.hpp"

namespace vag {

// All CSVs carry a header row, use a stable column order, and print floats
// with a fixed format so identical runs produce byte-identical files.
inline std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

namespace detail {

inline std::ofstream open_out(const std::string& path) {
    std::ofstream os(path);
    if (!os) throw ConfigError("cannot open " + path + " for writing");
    return os;
}

}  // namespace detail

inline void write_accuracy_matrix_csv(const SeedReport& r, const std::string& path) {
    auto os = detail::open_out(path);
    os << "after_task";
    for (std::size_t i = 0; i < r.acc_matrix.size(); ++i) os << ",task" << (i + 1);
    os << ",cumulative\n";
    for (std::size_t t = 0; t < r.acc_matrix.size(); ++t) {
        os << (t + 1);
        for (std::size_t i = 0; i < r.acc_matrix.size(); ++i) {
            os << ",";
            if (i < r.acc_matrix[t].size()) os << fmt(r.acc_matrix[t][i].accuracy());
        }
        os << "," << fmt(r.accuracy_after_task(t)) << "\n";
    }
}

inline void write_confusion_csv(const SeedReport& r, const std::string& path) {
    auto os = detail::open_out(path);
    os << "true_class";
    for (const auto& c : r.confusion.classes) os << ",\"" << c << "\"";
    os << "\n";
    for (std::size_t i = 0; i < r.confusion.counts.size(); ++i) {
        os << "\"" << r.confusion.classes[i] << "\"";
        for (auto n : r.confusion.counts[i]) os << "," << n;
        os << "\n";
    }
}

inline void write_nc_csv(const SeedReport& r, const std::string& path) {
    auto os = detail::open_out(path);
    os << "snapshot,nc\n";
    for (std::size_t i = 0; i < r.nc_trajectory.size(); ++i) {
        os << (i == 0 ? std::string("pre_cil") : ("after_task" + std::to_string(i))) << ","
           << fmt(r.nc_trajectory[i]) << "\n";
    }
}

inline void write_replay_log_csv(const SeedReport& r, const std::string& path) {
    auto os = detail::open_out(path);
    os << "kind,task,epoch,count,expected\n";
    for (const auto& e : r.lpr_log) {
        os << "lpr," << e.task << "," << e.epoch << "," << e.drawn << "," << e.expected << "\n";
    }
    for (const auto& e : r.buffer_log) {
        os << "buffer," << e.task << ",," << e.stored_total << "," << e.expected_added << "\n";
    }
}

// One row per (seed, method, task index): accuracy so far, NC, recency bias.
inline void write_metrics_csv(const RunReport& run, const std::string& path) {
    auto os = detail::open_out(path);
    os << "seed,method,task_index,accuracy,nc,last_task_bias\n";
    for (const auto& r : run.seeds) {
        for (std::size_t t = 0; t < r.acc_matrix.size(); ++t) {
            os << r.seed << "," << method_name(run.method) << "," << (t + 1) << ","
               << fmt(r.accuracy_after_task(t)) << "," << fmt(r.nc_trajectory.at(t + 1)) << ","
               << fmt(r.bias_trajectory.at(t)) << "\n";
        }
    }
}

inline void write_aggregate_csv(const RunReport& run, const std::string& path) {
    auto os = detail::open_out(path);
    os << "task_index,mean_accuracy,std_accuracy,mean_nc,std_nc\n";
    const std::size_t tasks = run.seeds.front().acc_matrix.size();
    for (std::size_t t = 0; t < tasks; ++t) {
        double acc_sum = 0.0, nc_sum = 0.0;
        for (const auto& r : run.seeds) {
            acc_sum += r.accuracy_after_task(t);
            nc_sum += r.nc_trajectory.at(t + 1);
        }
        const double n = static_cast<double>(run.seeds.size());
        const double acc_mean = acc_sum / n, nc_mean = nc_sum / n;
        double acc_ss = 0.0, nc_ss = 0.0;
        for (const auto& r : run.seeds) {
            acc_ss += (r.accuracy_after_task(t) - acc_mean) * (r.accuracy_after_task(t) - acc_mean);
            nc_ss += (r.nc_trajectory.at(t + 1) - nc_mean) * (r.nc_trajectory.at(t + 1) - nc_mean);
        }
        const double acc_std = run.seeds.size() > 1 ? std::sqrt(acc_ss / (n - 1.0)) : 0.0;
        const double nc_std = run.seeds.size() > 1 ? std::sqrt(nc_ss / (n - 1.0)) : 0.0;
        os << (t + 1) << "," << fmt(acc_mean) << "," << fmt(acc_std) << "," << fmt(nc_mean)
           << "," << fmt(nc_std) << "\n";
    }
}

inline void write_summary_txt(const RunReport& run, const std::string& path) {
    auto os = detail::open_out(path);
    os << "method: " << method_name(run.method) << "\n";
    os << "seeds:";
    for (const auto& r : run.seeds) os << " " << r.seed;
    os << "\n";
    os << "final accuracy: " << fmt(100.0 * run.mean_final_accuracy()) << " +/- "
       << fmt(100.0 * run.std_final_accuracy()) << " %\n";
    double nc_sum = 0.0, bias_sum = 0.0, fallback_sum = 0.0;
    for (const auto& r : run.seeds) {
        nc_sum += r.nc_trajectory.back();
        bias_sum += r.bias_last_task;
        fallback_sum += static_cast<double>(r.retrieval_fallbacks);
    }
    const double n = static_cast<double>(run.seeds.size());
    os << "final nc: " << fmt(nc_sum / n) << "\n";
    os << "last-task bias: " << fmt(bias_sum / n) << "\n";
    os << "retrieval fallbacks (mean per seed): " << fmt(fallback_sum / n) << "\n";
    std::size_t violations = 0, warnings = 0;
    for (const auto& r : run.seeds) {
        violations += r.closed_world_violations;
        warnings += r.warnings.size();
    }
    os << "closed-world violations: " << violations << "\n";
    os << "warnings: " << warnings << "\n";
    for (const auto& r : run.seeds) {
        for (const auto& w : r.warnings) os << "  [seed " << r.seed << "] " << w << "\n";
    }
}

// Full run directory for one method: resolved config echo plus per-seed and
// aggregate CSVs.
inline void write_run_report(const RunReport& run, const ExperimentConfig& cfg,
                             const std::string& dir) {
    std::filesystem::create_directories(dir);
    {
        auto os = detail::open_out(dir + "/config.ini");
        os << render_config(cfg, run.method);
    }
    for (const auto& r : run.seeds) {
        const std::string tag = "_seed" + std::to_string(r.seed);
        write_accuracy_matrix_csv(r, dir + "/accuracy_matrix" + tag + ".csv");
        write_confusion_csv(r, dir + "/confusion" + tag + ".csv");
        write_nc_csv(r, dir + "/nc" + tag + ".csv");
        write_replay_log_csv(r, dir + "/replay_log" + tag + ".csv");
    }
    write_metrics_csv(run, dir + "/metrics.csv");
    write_aggregate_csv(run, dir + "/aggregate.csv");
    write_summary_txt(run, dir + "/summary.txt");
}

// ---- cross-run aggregation (the `report` subcommand) -----------------------

struct MetricsRow {
    std::uint64_t seed = 0;
    std::string method;
    std::size_t task_index = 0;
    double accuracy = 0.0;
    double nc = 0.0;
    double bias = 0.0;
};

inline std::vector<MetricsRow> read_metrics_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open " + path);
    std::vector<MetricsRow> rows;
    std::string line;
    std::getline(is, line);  // header
    if (line != "seed,method,task_index,accuracy,nc,last_task_bias") {
        throw ConfigError(path + ": unexpected metrics header '" + line + "'");
    }
    std::size_t line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::string cur;
        for (char ch : line) {
            if (ch == ',') {
                cells.push_back(cur);
                cur.clear();
            } else {
                cur.push_back(ch);
            }
        }
        cells.push_back(cur);
        if (cells.size() != 6) {
            throw ConfigError(path + ": line " + std::to_string(line_no) + ": expected 6 cells");
        }
        MetricsRow r;
        r.seed = std::stoull(cells[0]);
        r.method = cells[1];
        r.task_index = std::stoul(cells[2]);
        r.accuracy = std::stod(cells[3]);
        r.nc = std::stod(cells[4]);
        r.bias = std::stod(cells[5]);
        rows.push_back(std::move(r));
    }
    return rows;
}

// Aggregates metrics.csv files of several run directories into a summary
// table and a plot-ready accuracy-vs-task CSV (mean and std per method).
inline void write_cross_run_report(const std::vector<std::string>& run_dirs,
                                   const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    std::vector<MetricsRow> all;
    for (const auto& dir : run_dirs) {
        auto rows = read_metrics_csv(dir + "/metrics.csv");
        all.insert(all.end(), rows.begin(), rows.end());
    }
    // method -> task -> accuracy samples
    std::map<std::string, std::map<std::size_t, std::vector<double>>> acc;
    std::map<std::string, std::map<std::size_t, std::vector<double>>> nc;
    for (const auto& r : all) {
        acc[r.method][r.task_index].push_back(r.accuracy);
        nc[r.method][r.task_index].push_back(r.nc);
    }
    auto mean_of = [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    };
    auto std_of = [&](const std::vector<double>& v) {
        if (v.size() < 2) return 0.0;
        const double m = mean_of(v);
        double ss = 0.0;
        for (double x : v) ss += (x - m) * (x - m);
        return std::sqrt(ss / static_cast<double>(v.size() - 1));
    };

    std::size_t max_task = 0;
    for (const auto& [method, tasks] : acc) {
        for (const auto& [t, v] : tasks) max_task = std::max(max_task, t);
    }
    {
        auto os = detail::open_out(out_dir + "/curves.csv");
        os << "task_index";
        for (const auto& [method, tasks] : acc) {
            os << "," << method << "_mean," << method << "_std";
        }
        os << "\n";
        for (std::size_t t = 1; t <= max_task; ++t) {
            os << t;
            for (const auto& [method, tasks] : acc) {
                auto it = tasks.find(t);
                os << ",";
                if (it != tasks.end()) os << fmt(mean_of(it->second));
                os << ",";
                if (it != tasks.end()) os << fmt(std_of(it->second));
            }
            os << "\n";
        }
    }
    {
        auto os = detail::open_out(out_dir + "/report_summary.txt");
        os << "method | final accuracy (%) | final nc\n";
        for (const auto& [method, tasks] : acc) {
            const auto& final_acc = tasks.rbegin()->second;
            const auto& final_nc = nc[method].rbegin()->second;
            os << method << " | " << fmt(100.0 * mean_of(final_acc)) << " +/- "
               << fmt(100.0 * std_of(final_acc)) << " | " << fmt(mean_of(final_nc)) << "\n";
        }
    }
}

}  // namespace vag
