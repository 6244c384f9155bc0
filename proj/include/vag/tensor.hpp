#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "vag/error.hpp"

namespace vag {

// Dense row-major 2-D tensors in double precision with reverse-mode
// differentiation. Operations are recorded on a Tape; replaying the tape in
// reverse propagates gradients. Scalars are 1x1 tensors.

namespace detail {

struct TensorNode {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> value;
    std::vector<double> grad;  // allocated iff tracked
    bool tracked = false;
};

inline std::string shape_str(std::size_t r, std::size_t c) {
    return "[" + std::to_string(r) + "x" + std::to_string(c) + "]";
}

// C += A(m x k) * B(k x n)
inline void gemm_nn_accum(const double* a, const double* b, double* c,
                          std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        double* ci = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = ai[p];
            if (aip == 0.0) continue;
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
        }
    }
}

// C += A(m x k) * B(n x k)^T  -> C is m x n
inline void gemm_nt_accum(const double* a, const double* b, double* c,
                          std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        double* ci = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* bj = b + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
            ci[j] += acc;
        }
    }
}

// C += A(k x m)^T * B(k x n)  -> C is m x n
inline void gemm_tn_accum(const double* a, const double* b, double* c,
                          std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t p = 0; p < k; ++p) {
        const double* ap = a + p * m;
        const double* bp = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double api = ap[i];
            if (api == 0.0) continue;
            double* ci = c + i * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
        }
    }
}

}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::size_t rows, std::size_t cols, bool tracked = false) {
        return make(rows, cols, std::vector<double>(rows * cols, 0.0), tracked);
    }

    static Tensor full(std::size_t rows, std::size_t cols, double v, bool tracked = false) {
        return make(rows, cols, std::vector<double>(rows * cols, v), tracked);
    }

    static Tensor from_values(std::size_t rows, std::size_t cols, std::vector<double> values,
                              bool tracked = false) {
        if (values.size() != rows * cols) {
            throw DimensionError("Tensor: value count " + std::to_string(values.size()) +
                                 " does not match shape " + detail::shape_str(rows, cols));
        }
        return make(rows, cols, std::move(values), tracked);
    }

    static Tensor scalar(double v, bool tracked = false) { return full(1, 1, v, tracked); }

    bool defined() const { return node_ != nullptr; }
    std::size_t rows() const { return node_->rows; }
    std::size_t cols() const { return node_->cols; }
    std::size_t numel() const { return node_->value.size(); }
    std::vector<std::size_t> shape() const { return {node_->rows, node_->cols}; }
    bool tracked() const { return node_ && node_->tracked; }

    double at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
    double& at(std::size_t r, std::size_t c) { return node_->value[r * cols() + c]; }
    double item() const {
        if (numel() != 1) {
            throw ContractError("Tensor::item: tensor has " + std::to_string(numel()) +
                                " elements, expected 1");
        }
        return node_->value[0];
    }

    std::vector<double>& values() { return node_->value; }
    const std::vector<double>& values() const { return node_->value; }

    const std::vector<double>& grad() const {
        if (!tracked()) throw ContractError("Tensor::grad: tensor is not tracked");
        return node_->grad;
    }
    std::vector<double>& grad() {
        if (!tracked()) throw ContractError("Tensor::grad: tensor is not tracked");
        return node_->grad;
    }
    double grad_at(std::size_t r, std::size_t c) const { return grad()[r * cols() + c]; }

    void zero_grad() {
        if (tracked()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }

    std::shared_ptr<detail::TensorNode> node() const { return node_; }

    std::string shape_string() const { return detail::shape_str(rows(), cols()); }

private:
    static Tensor make(std::size_t rows, std::size_t cols, std::vector<double> values,
                       bool tracked) {
        Tensor t;
        t.node_ = std::make_shared<detail::TensorNode>();
        t.node_->rows = rows;
        t.node_->cols = cols;
        t.node_->value = std::move(values);
        t.node_->tracked = tracked;
        if (tracked) t.node_->grad.assign(rows * cols, 0.0);
        return t;
    }

    std::shared_ptr<detail::TensorNode> node_;
};

// Per-row vocabulary mask: mask[w] != 0 means token w participates.
using VocabMask = std::vector<std::uint8_t>;

// Records operations in execution order (which is a valid topological order)
// and replays them in reverse on backward(). A Tape built with track=false
// computes values only; useful for evaluation loops.
class Tape {
public:
    explicit Tape(bool track = true) : track_(track) {}

    std::size_t size() const { return records_.size(); }
    bool tracking() const { return track_; }

    // ---- arithmetic ----

    Tensor matmul(const Tensor& a, const Tensor& b) {
        if (a.cols() != b.rows()) {
            throw DimensionError("matmul: inner dimensions disagree: " + a.shape_string() +
                                 " vs " + b.shape_string());
        }
        const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
        Tensor out = output(m, n, a, b);
        detail::gemm_nn_accum(a.values().data(), b.values().data(), out.values().data(), m, k, n);
        if (out.tracked()) {
            record([an = a.node(), bn = b.node(), on = out.node(), m, k, n] {
                if (an->tracked)
                    detail::gemm_nt_accum(on->grad.data(), bn->value.data(), an->grad.data(), m, n, k);
                if (bn->tracked)
                    detail::gemm_tn_accum(an->value.data(), on->grad.data(), bn->grad.data(), k, m, n);
            });
        }
        return out;
    }

    Tensor transpose(const Tensor& a) {
        const std::size_t m = a.rows(), n = a.cols();
        Tensor out = output(n, m, a);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) out.values()[j * m + i] = a.values()[i * n + j];
        if (out.tracked()) {
            record([an = a.node(), on = out.node(), m, n] {
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j)
                        an->grad[i * n + j] += on->grad[j * m + i];
            });
        }
        return out;
    }

    Tensor add(const Tensor& a, const Tensor& b) {
        if (a.rows() != b.rows() || a.cols() != b.cols()) {
            throw DimensionError("add: shape mismatch: " + a.shape_string() + " vs " +
                                 b.shape_string());
        }
        Tensor out = output(a.rows(), a.cols(), a, b);
        for (std::size_t i = 0; i < a.numel(); ++i)
            out.values()[i] = a.values()[i] + b.values()[i];
        if (out.tracked()) {
            record([an = a.node(), bn = b.node(), on = out.node()] {
                if (an->tracked)
                    for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
                if (bn->tracked)
                    for (std::size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i];
            });
        }
        return out;
    }

    // x (n x d) + v (1 x d), broadcast over rows.
    Tensor add_rowvec(const Tensor& x, const Tensor& v) {
        if (v.rows() != 1 || v.cols() != x.cols()) {
            throw DimensionError("add_rowvec: expected row vector [1x" +
                                 std::to_string(x.cols()) + "], got " + v.shape_string());
        }
        Tensor out = output(x.rows(), x.cols(), x, v);
        const std::size_t n = x.rows(), d = x.cols();
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j)
                out.values()[i * d + j] = x.values()[i * d + j] + v.values()[j];
        if (out.tracked()) {
            record([xn = x.node(), vn = v.node(), on = out.node(), n, d] {
                if (xn->tracked)
                    for (std::size_t i = 0; i < n * d; ++i) xn->grad[i] += on->grad[i];
                if (vn->tracked)
                    for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t j = 0; j < d; ++j) vn->grad[j] += on->grad[i * d + j];
            });
        }
        return out;
    }

    Tensor scale(const Tensor& a, double c) {
        Tensor out = output(a.rows(), a.cols(), a);
        for (std::size_t i = 0; i < a.numel(); ++i) out.values()[i] = c * a.values()[i];
        if (out.tracked()) {
            record([an = a.node(), on = out.node(), c] {
                for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += c * on->grad[i];
            });
        }
        return out;
    }

    // ---- nonlinearities ----

    Tensor gelu(const Tensor& a) {
        Tensor out = output(a.rows(), a.cols(), a);
        for (std::size_t i = 0; i < a.numel(); ++i) {
            const double x = a.values()[i];
            out.values()[i] = 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2));
        }
        if (out.tracked()) {
            record([an = a.node(), on = out.node()] {
                constexpr double inv_sqrt_2pi = 0.3989422804014327;
                for (std::size_t i = 0; i < on->grad.size(); ++i) {
                    const double x = an->value[i];
                    const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
                    const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
                    an->grad[i] += on->grad[i] * (cdf + x * pdf);
                }
            });
        }
        return out;
    }

    // Elementwise natural log; requires strictly positive inputs.
    Tensor log(const Tensor& a) {
        Tensor out = output(a.rows(), a.cols(), a);
        for (std::size_t i = 0; i < a.numel(); ++i) {
            const double x = a.values()[i];
            if (!(x > 0.0)) {
                throw NumericError("log: input must be positive, got " + std::to_string(x));
            }
            out.values()[i] = std::log(x);
        }
        if (out.tracked()) {
            record([an = a.node(), on = out.node()] {
                for (std::size_t i = 0; i < on->grad.size(); ++i)
                    an->grad[i] += on->grad[i] / an->value[i];
            });
        }
        return out;
    }

    // ---- softmax family ----

    // Row-wise softmax with per-row max subtraction. Inputs must be finite.
    Tensor softmax_rows(const Tensor& a) {
        for (double v : a.values()) {
            if (!std::isfinite(v)) {
                throw NumericError("softmax_rows: non-finite input " + std::to_string(v));
            }
        }
        return softmax_rows_impl(a, /*causal=*/false);
    }

    // Row-wise softmax over a square score matrix where row i attends to
    // columns 0..i only. Columns above the diagonal get exactly zero
    // probability and zero gradient.
    Tensor causal_softmax_rows(const Tensor& a) {
        if (a.rows() != a.cols()) {
            throw DimensionError("causal_softmax_rows: matrix must be square, got " +
                                 a.shape_string());
        }
        return softmax_rows_impl(a, /*causal=*/true);
    }

    // Row-wise log-softmax restricted to the tokens allowed by `mask`
    // (shared across rows). Disallowed entries come back as -inf and carry
    // exactly zero gradient.
    Tensor masked_log_softmax_rows(const Tensor& a, const VocabMask& mask) {
        if (mask.size() != a.cols()) {
            throw DimensionError("masked_log_softmax_rows: mask size " +
                                 std::to_string(mask.size()) + " vs " +
                                 std::to_string(a.cols()) + " columns");
        }
        bool any = false;
        for (auto m : mask) any = any || (m != 0);
        if (!any) throw ContractError("masked_log_softmax_rows: mask allows no tokens");

        const std::size_t n = a.rows(), v = a.cols();
        Tensor out = output(n, v, a);
        constexpr double ninf = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < n; ++i) {
            const double* row = a.values().data() + i * v;
            double mx = ninf;
            for (std::size_t j = 0; j < v; ++j)
                if (mask[j] && row[j] > mx) mx = row[j];
            double sum = 0.0;
            for (std::size_t j = 0; j < v; ++j)
                if (mask[j]) sum += std::exp(row[j] - mx);
            const double lse = mx + std::log(sum);
            double* orow = out.values().data() + i * v;
            for (std::size_t j = 0; j < v; ++j) orow[j] = mask[j] ? row[j] - lse : ninf;
        }
        if (out.tracked()) {
            record([an = a.node(), on = out.node(), mask, n, v] {
                for (std::size_t i = 0; i < n; ++i) {
                    const double* gy = on->grad.data() + i * v;
                    const double* lp = on->value.data() + i * v;
                    double gsum = 0.0;
                    for (std::size_t j = 0; j < v; ++j)
                        if (mask[j]) gsum += gy[j];
                    double* gx = an->grad.data() + i * v;
                    for (std::size_t j = 0; j < v; ++j)
                        if (mask[j]) gx[j] += gy[j] - std::exp(lp[j]) * gsum;
                }
            });
        }
        return out;
    }

    // Per-row variant: row i uses masks[i].
    Tensor masked_log_softmax_rows(const Tensor& a, const std::vector<VocabMask>& masks) {
        if (masks.size() != a.rows()) {
            throw DimensionError("masked_log_softmax_rows: " + std::to_string(masks.size()) +
                                 " masks for " + std::to_string(a.rows()) + " rows");
        }
        std::vector<Tensor> rows;
        rows.reserve(a.rows());
        for (std::size_t i = 0; i < a.rows(); ++i)
            rows.push_back(masked_log_softmax_rows(slice_rows(a, i, 1), masks[i]));
        return concat_rows(rows);
    }

    // ---- normalization ----

    // Row-wise layer norm with affine gain/bias; epsilon 1e-5.
    Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
        const std::size_t n = x.rows(), d = x.cols();
        if (d < 2) {
            throw DimensionError("layer_norm: normalization axis must have size >= 2, got " +
                                 x.shape_string());
        }
        if (gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 || bias.cols() != d) {
            throw DimensionError("layer_norm: gain/bias must be [1x" + std::to_string(d) +
                                 "], got " + gain.shape_string() + " and " + bias.shape_string());
        }
        constexpr double eps = 1e-5;
        Tensor out = output(n, d, x, gain, bias);
        std::vector<double> xhat(n * d), inv_std(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double* row = x.values().data() + i * d;
            double mean = 0.0;
            for (std::size_t j = 0; j < d; ++j) mean += row[j];
            mean /= static_cast<double>(d);
            double var = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                const double c = row[j] - mean;
                var += c * c;
            }
            var /= static_cast<double>(d);
            const double is = 1.0 / std::sqrt(var + eps);
            inv_std[i] = is;
            for (std::size_t j = 0; j < d; ++j) {
                const double h = (row[j] - mean) * is;
                xhat[i * d + j] = h;
                out.values()[i * d + j] = gain.values()[j] * h + bias.values()[j];
            }
        }
        if (out.tracked()) {
            record([xn = x.node(), gn = gain.node(), bn = bias.node(), on = out.node(),
                    xhat = std::move(xhat), inv_std = std::move(inv_std), n, d] {
                for (std::size_t i = 0; i < n; ++i) {
                    const double* gy = on->grad.data() + i * d;
                    const double* h = xhat.data() + i * d;
                    if (gn->tracked)
                        for (std::size_t j = 0; j < d; ++j) gn->grad[j] += gy[j] * h[j];
                    if (bn->tracked)
                        for (std::size_t j = 0; j < d; ++j) bn->grad[j] += gy[j];
                    if (xn->tracked) {
                        double m1 = 0.0, m2 = 0.0;
                        for (std::size_t j = 0; j < d; ++j) {
                            const double gh = gy[j] * gn->value[j];
                            m1 += gh;
                            m2 += gh * h[j];
                        }
                        m1 /= static_cast<double>(d);
                        m2 /= static_cast<double>(d);
                        for (std::size_t j = 0; j < d; ++j) {
                            const double gh = gy[j] * gn->value[j];
                            xn->grad[i * d + j] += (gh - m1 - h[j] * m2) * inv_std[i];
                        }
                    }
                }
            });
        }
        return out;
    }

    // ---- gather / slicing ----

    // Rows of `table` selected by token ids; duplicates accumulate on backward.
    Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
        const std::size_t v = table.rows(), d = table.cols();
        for (int id : ids) {
            if (id < 0 || static_cast<std::size_t>(id) >= v) {
                throw OovError("gather_rows: id " + std::to_string(id) +
                               " outside table with " + std::to_string(v) + " rows");
            }
        }
        Tensor out = output(ids.size(), d, table);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            const double* src = table.values().data() + static_cast<std::size_t>(ids[i]) * d;
            std::copy(src, src + d, out.values().data() + i * d);
        }
        if (out.tracked()) {
            std::vector<int> ids_copy(ids.begin(), ids.end());
            record([tn = table.node(), on = out.node(), ids_copy = std::move(ids_copy), d] {
                for (std::size_t i = 0; i < ids_copy.size(); ++i) {
                    double* dst = tn->grad.data() + static_cast<std::size_t>(ids_copy[i]) * d;
                    const double* src = on->grad.data() + i * d;
                    for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
                }
            });
        }
        return out;
    }

    Tensor slice_rows(const Tensor& x, std::size_t r0, std::size_t len) {
        if (r0 + len > x.rows()) {
            throw DimensionError("slice_rows: [" + std::to_string(r0) + ", " +
                                 std::to_string(r0 + len) + ") outside " + x.shape_string());
        }
        const std::size_t d = x.cols();
        Tensor out = output(len, d, x);
        std::copy(x.values().data() + r0 * d, x.values().data() + (r0 + len) * d,
                  out.values().data());
        if (out.tracked()) {
            record([xn = x.node(), on = out.node(), r0, len, d] {
                for (std::size_t i = 0; i < len * d; ++i) xn->grad[r0 * d + i] += on->grad[i];
            });
        }
        return out;
    }

    Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t len) {
        if (c0 + len > x.cols()) {
            throw DimensionError("slice_cols: [" + std::to_string(c0) + ", " +
                                 std::to_string(c0 + len) + ") outside " + x.shape_string());
        }
        const std::size_t n = x.rows(), d = x.cols();
        Tensor out = output(n, len, x);
        for (std::size_t i = 0; i < n; ++i)
            std::copy(x.values().data() + i * d + c0, x.values().data() + i * d + c0 + len,
                      out.values().data() + i * len);
        if (out.tracked()) {
            record([xn = x.node(), on = out.node(), c0, len, n, d] {
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < len; ++j)
                        xn->grad[i * d + c0 + j] += on->grad[i * len + j];
            });
        }
        return out;
    }

    Tensor concat_cols(const std::vector<Tensor>& parts) {
        if (parts.empty()) throw ContractError("concat_cols: no parts");
        const std::size_t n = parts[0].rows();
        std::size_t total = 0;
        bool tracked_any = false;
        for (const auto& p : parts) {
            if (p.rows() != n) {
                throw DimensionError("concat_cols: row mismatch: " + p.shape_string() + " vs " +
                                     parts[0].shape_string());
            }
            total += p.cols();
            tracked_any = tracked_any || p.tracked();
        }
        Tensor out = make_output(n, total, track_ && tracked_any);
        std::size_t off = 0;
        for (const auto& p : parts) {
            const std::size_t d = p.cols();
            for (std::size_t i = 0; i < n; ++i)
                std::copy(p.values().data() + i * d, p.values().data() + (i + 1) * d,
                          out.values().data() + i * total + off);
            off += d;
        }
        if (out.tracked()) {
            std::vector<std::shared_ptr<detail::TensorNode>> nodes;
            for (const auto& p : parts) nodes.push_back(p.node());
            record([nodes = std::move(nodes), on = out.node(), n, total] {
                std::size_t off = 0;
                for (const auto& pn : nodes) {
                    const std::size_t d = pn->cols;
                    if (pn->tracked)
                        for (std::size_t i = 0; i < n; ++i)
                            for (std::size_t j = 0; j < d; ++j)
                                pn->grad[i * d + j] += on->grad[i * total + off + j];
                    off += d;
                }
            });
        }
        return out;
    }

    Tensor concat_rows(const std::vector<Tensor>& parts) {
        if (parts.empty()) throw ContractError("concat_rows: no parts");
        const std::size_t d = parts[0].cols();
        std::size_t total = 0;
        bool tracked_any = false;
        for (const auto& p : parts) {
            if (p.cols() != d) {
                throw DimensionError("concat_rows: column mismatch: " + p.shape_string() +
                                     " vs " + parts[0].shape_string());
            }
            total += p.rows();
            tracked_any = tracked_any || p.tracked();
        }
        Tensor out = make_output(total, d, track_ && tracked_any);
        std::size_t off = 0;
        for (const auto& p : parts) {
            std::copy(p.values().begin(), p.values().end(), out.values().data() + off * d);
            off += p.rows();
        }
        if (out.tracked()) {
            std::vector<std::shared_ptr<detail::TensorNode>> nodes;
            for (const auto& p : parts) nodes.push_back(p.node());
            record([nodes = std::move(nodes), on = out.node(), d] {
                std::size_t off = 0;
                for (const auto& pn : nodes) {
                    if (pn->tracked)
                        for (std::size_t i = 0; i < pn->rows * d; ++i)
                            pn->grad[i] += on->grad[off * d + i];
                    off += pn->rows;
                }
            });
        }
        return out;
    }

    // Picks entries (r, c) into a k x 1 column; duplicates accumulate.
    Tensor pick(const Tensor& x, const std::vector<std::pair<std::size_t, std::size_t>>& coords) {
        for (auto [r, c] : coords) {
            if (r >= x.rows() || c >= x.cols()) {
                throw DimensionError("pick: coordinate (" + std::to_string(r) + ", " +
                                     std::to_string(c) + ") outside " + x.shape_string());
            }
        }
        Tensor out = output(coords.size(), 1, x);
        for (std::size_t i = 0; i < coords.size(); ++i)
            out.values()[i] = x.at(coords[i].first, coords[i].second);
        if (out.tracked()) {
            record([xn = x.node(), on = out.node(), coords] {
                for (std::size_t i = 0; i < coords.size(); ++i)
                    xn->grad[coords[i].first * xn->cols + coords[i].second] += on->grad[i];
            });
        }
        return out;
    }

    // ---- reductions ----

    Tensor sum(const Tensor& x) {
        Tensor out = output(1, 1, x);
        double s = 0.0;
        for (double v : x.values()) s += v;
        out.values()[0] = s;
        if (out.tracked()) {
            record([xn = x.node(), on = out.node()] {
                const double g = on->grad[0];
                for (double& gi : xn->grad) gi += g;
            });
        }
        return out;
    }

    // Column means over rows: (n x d) -> (1 x d). Used for mean pooling.
    Tensor mean_over_rows(const Tensor& x) {
        const std::size_t n = x.rows(), d = x.cols();
        if (n == 0) throw ContractError("mean_over_rows: empty tensor");
        Tensor out = output(1, d, x);
        for (std::size_t j = 0; j < d; ++j) {
            double s = 0.0;
            for (std::size_t i = 0; i < n; ++i) s += x.values()[i * d + j];
            out.values()[j] = s / static_cast<double>(n);
        }
        if (out.tracked()) {
            record([xn = x.node(), on = out.node(), n, d] {
                const double inv = 1.0 / static_cast<double>(n);
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < d; ++j)
                        xn->grad[i * d + j] += on->grad[j] * inv;
            });
        }
        return out;
    }

    // ---- backward ----

    // Seeds d(out)/d(out) = 1 and replays the tape in reverse, visiting each
    // record exactly once. Gradients of intermediate results are reset first;
    // leaf gradients accumulate (callers zero leaves between passes).
    void backward(const Tensor& out) {
        if (!track_) throw ContractError("Tape::backward: tape was built with tracking off");
        if (out.numel() != 1) {
            throw ContractError("Tape::backward: output must be scalar, got " +
                                out.shape_string());
        }
        if (!out.tracked()) {
            throw ContractError("Tape::backward: output does not depend on tracked tensors");
        }
        for (auto& node : outputs_) std::fill(node->grad.begin(), node->grad.end(), 0.0);
        out.node()->grad[0] += 1.0;
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
    }

private:
    Tensor make_output(std::size_t r, std::size_t c, bool tracked) {
        Tensor t = Tensor::zeros(r, c, tracked);
        if (tracked) outputs_.push_back(t.node());
        return t;
    }
    Tensor output(std::size_t r, std::size_t c, const Tensor& a) {
        return make_output(r, c, track_ && a.tracked());
    }
    Tensor output(std::size_t r, std::size_t c, const Tensor& a, const Tensor& b) {
        return make_output(r, c, track_ && (a.tracked() || b.tracked()));
    }
    Tensor output(std::size_t r, std::size_t c, const Tensor& a, const Tensor& b,
                  const Tensor& d) {
        return make_output(r, c, track_ && (a.tracked() || b.tracked() || d.tracked()));
    }

    void record(std::function<void()> fn) { records_.push_back(std::move(fn)); }

    std::vector<std::shared_ptr<detail::TensorNode>> outputs_;

    Tensor softmax_rows_impl(const Tensor& a, bool causal) {
        const std::size_t n = a.rows(), v = a.cols();
        Tensor out = output(n, v, a);
        for (std::size_t i = 0; i < n; ++i) {
            const double* row = a.values().data() + i * v;
            const std::size_t limit = causal ? i + 1 : v;
            double mx = row[0];
            for (std::size_t j = 1; j < limit; ++j) mx = std::max(mx, row[j]);
            double sum = 0.0;
            double* orow = out.values().data() + i * v;
            for (std::size_t j = 0; j < limit; ++j) {
                orow[j] = std::exp(row[j] - mx);
                sum += orow[j];
            }
            for (std::size_t j = 0; j < limit; ++j) orow[j] /= sum;
            for (std::size_t j = limit; j < v; ++j) orow[j] = 0.0;
        }
        if (out.tracked()) {
            record([an = a.node(), on = out.node(), n, v, causal] {
                for (std::size_t i = 0; i < n; ++i) {
                    const double* p = on->value.data() + i * v;
                    const double* gy = on->grad.data() + i * v;
                    const std::size_t limit = causal ? i + 1 : v;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < limit; ++j) dot += gy[j] * p[j];
                    double* gx = an->grad.data() + i * v;
                    for (std::size_t j = 0; j < limit; ++j) gx[j] += p[j] * (gy[j] - dot);
                }
            });
        }
        return out;
    }

    std::vector<std::function<void()>> records_;
    bool track_;
};

// Compares the tape gradient of a scalar-valued program against central
// finite differences. Returns the worst relative error over all entries of x
// (denominators clamped at 1e-8).
inline double grad_check(const std::function<Tensor(Tape&, const Tensor&)>& f, const Tensor& x,
                         double h) {
    if (h < 1e-7 || h > 1e-3) {
        throw ContractError("grad_check: step must lie in [1e-7, 1e-3], got " +
                            std::to_string(h));
    }
    Tensor xt = Tensor::from_values(x.rows(), x.cols(), x.values(), /*tracked=*/true);
    Tape tape;
    Tensor y = f(tape, xt);
    if (y.numel() != 1) {
        throw ContractError("grad_check: program must be scalar-valued, got " +
                            y.shape_string());
    }
    tape.backward(y);
    const std::vector<double> analytic = xt.grad();

    auto eval = [&](const std::vector<double>& vals) {
        Tensor xi = Tensor::from_values(x.rows(), x.cols(), vals, /*tracked=*/false);
        Tape t(/*track=*/false);
        return f(t, xi).item();
    };

    double worst = 0.0;
    std::vector<double> vals = x.values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
        const double orig = vals[i];
        vals[i] = orig + h;
        const double fp = eval(vals);
        vals[i] = orig - h;
        const double fm = eval(vals);
        vals[i] = orig;
        const double numeric = (fp - fm) / (2.0 * h);
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
        worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
    return worst;
}

}  // namespace vag
