#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "vag/error.hpp"
#include "vag/model.hpp"

namespace vag {

// Encoder representations with class assignments for the collapse diagnostic.
struct FeatureBundle {
    std::vector<std::vector<double>> features;  // N rows of dimension d
    std::vector<int> class_ids;                 // N entries

    std::size_t size() const { return features.size(); }
    std::size_t dim() const { return features.empty() ? 0 : features[0].size(); }
};

namespace detail {

// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
// Returns eigenvalues; `vecs` holds eigenvectors as columns.
inline std::vector<double> jacobi_eigen_sym(std::vector<double> a, std::size_t n,
                                            std::vector<double>& vecs) {
    vecs.assign(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) vecs[i * n + i] = 1.0;
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off += a[p * n + q] * a[p * n + q];
        if (off < 1e-26) break;
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a[p * n + q];
                if (std::abs(apq) < 1e-300) continue;
                const double app = a[p * n + p], aqq = a[q * n + q];
                const double theta = (aqq - app) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t i = 0; i < n; ++i) {
                    const double aip = a[i * n + p], aiq = a[i * n + q];
                    a[i * n + p] = c * aip - s * aiq;
                    a[i * n + q] = s * aip + c * aiq;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double api = a[p * n + i], aqi = a[q * n + i];
                    a[p * n + i] = c * api - s * aqi;
                    a[q * n + i] = s * api + c * aqi;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double vip = vecs[i * n + p], viq = vecs[i * n + q];
                    vecs[i * n + p] = c * vip - s * viq;
                    vecs[i * n + q] = s * vip + c * viq;
                }
            }
        }
    }
    std::vector<double> eig(n);
    for (std::size_t i = 0; i < n; ++i) eig[i] = a[i * n + i];
    return eig;
}

// Moore-Penrose pseudo-inverse of a symmetric PSD matrix via its spectrum;
// eigenvalues below cutoff * max are treated as zero.
inline std::vector<double> pinv_sym(const std::vector<double>& a, std::size_t n,
                                    double rel_cutoff = 1e-10) {
    std::vector<double> vecs;
    auto eig = jacobi_eigen_sym(a, n, vecs);
    double emax = 0.0;
    for (double e : eig) emax = std::max(emax, std::abs(e));
    std::vector<double> out(n * n, 0.0);
    if (emax == 0.0) return out;
    const double cutoff = rel_cutoff * emax;
    for (std::size_t k = 0; k < n; ++k) {
        if (std::abs(eig[k]) <= cutoff) continue;
        const double inv = 1.0 / eig[k];
        for (std::size_t i = 0; i < n; ++i) {
            const double vik = vecs[i * n + k];
            if (vik == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] += inv * vik * vecs[j * n + k];
        }
    }
    return out;
}

}  // namespace detail

// Collapse diagnostic: trace(Sigma_W * pinv(Sigma_B)) / K over the bundle's
// features. Sigma_W is the (1/N-normalized) within-class covariance, Sigma_B
// the (1/K-normalized) between-class covariance around the global mean.
// Low values mean features have collapsed onto class means.
inline double nc_metric(const FeatureBundle& bundle) {
    const std::size_t n = bundle.size();
    const std::size_t d = bundle.dim();
    if (n == 0 || bundle.class_ids.size() != n) {
        throw ContractError("nc_metric: empty or inconsistent feature bundle");
    }
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < n; ++i) by_class[bundle.class_ids[i]].push_back(i);
    const std::size_t k = by_class.size();
    if (k < 2) {
        throw ContractError("nc_metric: needs at least 2 classes, got " + std::to_string(k));
    }

    std::vector<double> global_mean(d, 0.0);
    for (const auto& f : bundle.features) {
        if (f.size() != d) throw DimensionError("nc_metric: inconsistent feature dimension");
        for (std::size_t j = 0; j < d; ++j) global_mean[j] += f[j];
    }
    for (auto& x : global_mean) x /= static_cast<double>(n);

    std::vector<double> sigma_w(d * d, 0.0), sigma_b(d * d, 0.0);
    for (const auto& [cls, idx] : by_class) {
        std::vector<double> mu(d, 0.0);
        for (std::size_t i : idx)
            for (std::size_t j = 0; j < d; ++j) mu[j] += bundle.features[i][j];
        for (auto& x : mu) x /= static_cast<double>(idx.size());
        for (std::size_t i : idx) {
            for (std::size_t a = 0; a < d; ++a) {
                const double ca = bundle.features[i][a] - mu[a];
                if (ca == 0.0) continue;
                for (std::size_t b = 0; b < d; ++b) {
                    sigma_w[a * d + b] += ca * (bundle.features[i][b] - mu[b]);
                }
            }
        }
        for (std::size_t a = 0; a < d; ++a) {
            const double ca = mu[a] - global_mean[a];
            for (std::size_t b = 0; b < d; ++b) {
                sigma_b[a * d + b] += ca * (mu[b] - global_mean[b]);
            }
        }
    }
    for (auto& x : sigma_w) x /= static_cast<double>(n);
    for (auto& x : sigma_b) x /= static_cast<double>(k);

    const auto pinv_b = detail::pinv_sym(sigma_b, d);
    double trace = 0.0;
    for (std::size_t a = 0; a < d; ++a)
        for (std::size_t b = 0; b < d; ++b) trace += sigma_w[a * d + b] * pinv_b[b * d + a];
    return trace / static_cast<double>(k);
}

// Probe example: tokenized input plus its class index.
struct ProbeExample {
    std::vector<int> input_ids;
    int class_id = 0;
};

// Mean-pooled encoder features of the probe set under the given model.
inline FeatureBundle collect_features(const Seq2SeqModel& m,
                                      std::span<const ProbeExample> probe) {
    FeatureBundle bundle;
    bundle.features.reserve(probe.size());
    bundle.class_ids.reserve(probe.size());
    for (const auto& ex : probe) {
        Tape tape(/*track=*/false);
        Tensor pooled = encode_pooled(tape, m, ex.input_ids);
        bundle.features.push_back(pooled.values());
        bundle.class_ids.push_back(ex.class_id);
    }
    return bundle;
}

// Row = true class, column = predicted class; ordering follows the label
// pool's insertion order.
struct ConfusionMatrix {
    std::vector<std::string> classes;
    std::vector<std::vector<std::size_t>> counts;

    explicit ConfusionMatrix(std::vector<std::string> class_names = {})
        : classes(std::move(class_names)),
          counts(classes.size(), std::vector<std::size_t>(classes.size(), 0)) {}

    void add(std::size_t true_idx, std::size_t pred_idx) {
        counts.at(true_idx).at(pred_idx) += 1;
    }

    std::size_t row_sum(std::size_t r) const {
        std::size_t s = 0;
        for (auto c : counts.at(r)) s += c;
        return s;
    }

    std::size_t total() const {
        std::size_t s = 0;
        for (std::size_t r = 0; r < counts.size(); ++r) s += row_sum(r);
        return s;
    }
};

// Fraction of all predictions landing in the given class columns (used with
// the final task's classes to quantify recency bias).
inline double last_task_bias(const ConfusionMatrix& cm,
                             std::span<const std::size_t> last_task_classes) {
    const std::size_t total = cm.total();
    if (total == 0) throw ContractError("last_task_bias: empty confusion matrix");
    std::size_t hits = 0;
    for (std::size_t r = 0; r < cm.counts.size(); ++r) {
        for (std::size_t c : last_task_classes) hits += cm.counts[r].at(c);
    }
    return static_cast<double>(hits) / static_cast<double>(total);
}

// Correct/total counters for one (trained-after-task, evaluated-on-task) cell.
struct EvalCell {
    std::size_t correct = 0;
    std::size_t total = 0;
    double accuracy() const {
        if (total == 0) throw ContractError("EvalCell: empty evaluation");
        return static_cast<double>(correct) / static_cast<double>(total);
    }
};

// Micro-averaged accuracy over the union of seen test sets.
inline double final_accuracy(std::span<const EvalCell> last_row) {
    std::size_t correct = 0, total = 0;
    for (const auto& cell : last_row) {
        correct += cell.correct;
        total += cell.total;
    }
    if (total == 0) throw ContractError("final_accuracy: empty evaluation");
    return static_cast<double>(correct) / static_cast<double>(total);
}

}  // namespace vag
