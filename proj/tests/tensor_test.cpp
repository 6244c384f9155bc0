#include "vag/tensor.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "vag/rng.hpp"

using vag::Rng;
using vag::Tape;
using vag::Tensor;

namespace {

Tensor random_tensor(std::size_t r, std::size_t c, Rng& rng, bool tracked = true) {
    std::vector<double> v(r * c);
    for (auto& x : v) x = rng.normal(0.0, 1.0);
    return Tensor::from_values(r, c, std::move(v), tracked);
}

}  // namespace

TEST(Matmul, IdentityCase) {
    Tape tape;
    auto a = Tensor::from_values(2, 2, {1, 0, 0, 1});
    auto b = Tensor::from_values(2, 1, {3, 4});
    auto c = tape.matmul(a, b);
    EXPECT_DOUBLE_EQ(c.at(0, 0), 3.0);
    EXPECT_DOUBLE_EQ(c.at(1, 0), 4.0);
}

TEST(Matmul, RowTimesColumn) {
    Tape tape;
    auto a = Tensor::from_values(1, 2, {1, 2});
    auto b = Tensor::from_values(2, 1, {3, 4});
    EXPECT_DOUBLE_EQ(tape.matmul(a, b).item(), 11.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
    Tape tape;
    auto a = Tensor::zeros(4, 5);
    auto b = Tensor::zeros(4, 3);
    try {
        tape.matmul(a, b);
        FAIL() << "expected DimensionError";
    } catch (const vag::DimensionError& e) {
        EXPECT_NE(std::string(e.what()).find("[4x5]"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("[4x3]"), std::string::npos);
    }
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
    Rng rng(42);
    auto b_vals = random_tensor(5, 3, rng, false);
    // d(sum(A * B))/dA against central differences, h = 1e-5.
    auto f = [&](Tape& t, const Tensor& a) { return t.sum(t.matmul(a, b_vals)); };
    auto a = random_tensor(4, 5, rng);
    EXPECT_LT(vag::grad_check(f, a, 1e-5), 1e-6);
    // and with respect to B
    auto a_vals = random_tensor(4, 5, rng, false);
    auto g = [&](Tape& t, const Tensor& b) { return t.sum(t.matmul(a_vals, b)); };
    auto b = random_tensor(5, 3, rng);
    EXPECT_LT(vag::grad_check(g, b, 1e-5), 1e-6);
}

TEST(SoftmaxRows, UniformOnEqualLogits) {
    Tape tape;
    auto x = Tensor::from_values(1, 4, {0, 0, 0, 0});
    auto p = tape.softmax_rows(x);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_DOUBLE_EQ(p.at(0, j), 0.25);
}

TEST(SoftmaxRows, LargeLogitsDoNotOverflow) {
    Tape tape;
    auto x = Tensor::from_values(1, 2, {1000, 0});
    auto p = tape.softmax_rows(x);
    EXPECT_NEAR(p.at(0, 0), 1.0, 1e-12);
    EXPECT_NEAR(p.at(0, 1), 0.0, 1e-12);
    EXPECT_TRUE(std::isfinite(p.at(0, 0)));
}

TEST(SoftmaxRows, MatchesExtendedPrecisionOracle) {
    Tape tape;
    auto x = Tensor::from_values(1, 3, {1, 2, 3});
    auto p = tape.softmax_rows(x);
    long double z = std::exp(1.0L) + std::exp(2.0L) + std::exp(3.0L);
    for (std::size_t j = 0; j < 3; ++j) {
        long double expect = std::exp(static_cast<long double>(j + 1)) / z;
        EXPECT_NEAR(p.at(0, j), static_cast<double>(expect), 1e-15);
    }
}

TEST(SoftmaxRows, RowsSumToOneProperty) {
    Rng rng(7);
    Tape tape;
    for (int it = 0; it < 200; ++it) {
        std::size_t n = 1 + rng.uniform_index(5);
        std::size_t v = 2 + rng.uniform_index(20);
        std::vector<double> vals(n * v);
        for (auto& x : vals) x = rng.normal(0.0, 50.0);
        auto p = tape.softmax_rows(Tensor::from_values(n, v, std::move(vals)));
        for (std::size_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < v; ++j) {
                EXPECT_GE(p.at(i, j), 0.0);
                s += p.at(i, j);
            }
            EXPECT_NEAR(s, 1.0, 1e-9);
        }
    }
}

TEST(SoftmaxRows, NonFiniteInputRejected) {
    Tape tape;
    auto x = Tensor::from_values(1, 2, {std::numeric_limits<double>::quiet_NaN(), 0.0});
    EXPECT_THROW(tape.softmax_rows(x), vag::NumericError);
    auto y = Tensor::from_values(1, 2, {std::numeric_limits<double>::infinity(), 0.0});
    EXPECT_THROW(tape.softmax_rows(y), vag::NumericError);
}

TEST(SoftmaxRows, GradientMatchesFiniteDifferences) {
    Rng rng(3);
    auto w = random_tensor(2, 6, rng, false);
    auto f = [&](Tape& t, const Tensor& x) {
        // weighted sum keeps the scalar sensitive to every prob entry
        std::vector<std::pair<std::size_t, std::size_t>> coords;
        for (std::size_t i = 0; i < 2; ++i)
            for (std::size_t j = 0; j < 6; ++j) coords.emplace_back(i, j);
        auto p = t.softmax_rows(x);
        auto picked = t.pick(p, coords);
        auto weights = t.pick(w, coords);
        // sum of p_ij * w_ij via matmul of transposed column
        return t.matmul(t.transpose(picked), weights);
    };
    EXPECT_LT(vag::grad_check(f, random_tensor(2, 6, rng), 1e-5), 1e-6);
}

TEST(CausalSoftmax, UpperTriangleExactlyZero) {
    Rng rng(11);
    Tape tape;
    auto x = random_tensor(5, 5, rng);
    auto p = tape.causal_softmax_rows(x);
    for (std::size_t i = 0; i < 5; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < 5; ++j) {
            if (j > i) EXPECT_EQ(p.at(i, j), 0.0);
            s += p.at(i, j);
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(LayerNorm, ConstantRowMapsToBias) {
    Tape tape;
    auto x = Tensor::from_values(1, 4, {1, 1, 1, 1});
    auto gain = Tensor::full(1, 4, 1.0);
    auto bias = Tensor::zeros(1, 4);
    auto y = tape.layer_norm(x, gain, bias);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_DOUBLE_EQ(y.at(0, j), 0.0);
}

TEST(LayerNorm, SymmetricPair) {
    Tape tape;
    auto x = Tensor::from_values(1, 2, {-1, 1});
    auto gain = Tensor::full(1, 2, 1.0);
    auto bias = Tensor::zeros(1, 2);
    auto y = tape.layer_norm(x, gain, bias);
    // epsilon shrinks the output slightly below +-1
    EXPECT_NEAR(y.at(0, 0), -1.0, 1e-4);
    EXPECT_NEAR(y.at(0, 1), 1.0, 1e-4);
    EXPECT_LT(y.at(0, 1), 1.0);
}

TEST(LayerNorm, DegenerateAxisRejected) {
    Tape tape;
    auto x = Tensor::zeros(3, 1);
    auto gain = Tensor::full(1, 1, 1.0);
    auto bias = Tensor::zeros(1, 1);
    EXPECT_THROW(tape.layer_norm(x, gain, bias), vag::DimensionError);
}

TEST(LayerNorm, GradientMatchesFiniteDifferences) {
    Rng rng(5);
    auto gain = random_tensor(1, 8, rng, false);
    auto bias = random_tensor(1, 8, rng, false);
    auto w = random_tensor(3, 8, rng, false);
    auto f = [&](Tape& t, const Tensor& x) {
        auto y = t.layer_norm(x, gain, bias);
        std::vector<std::pair<std::size_t, std::size_t>> coords;
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < 8; ++j) coords.emplace_back(i, j);
        return t.matmul(t.transpose(t.pick(y, coords)), t.pick(w, coords));
    };
    EXPECT_LT(vag::grad_check(f, random_tensor(3, 8, rng), 1e-5), 1e-5);

    // gradient with respect to gain and bias
    auto x_fixed = random_tensor(3, 8, rng, false);
    auto g = [&](Tape& t, const Tensor& gn) {
        return t.sum(t.layer_norm(x_fixed, gn, bias));
    };
    EXPECT_LT(vag::grad_check(g, random_tensor(1, 8, rng), 1e-5), 1e-5);
}

TEST(GatherRows, BasicRowLookup) {
    Tape tape;
    auto table = Tensor::from_values(4, 2, {1, 2, 3, 4, 5, 6, 7, 8});
    std::vector<int> ids = {0};
    auto out = tape.gather_rows(table, ids);
    EXPECT_DOUBLE_EQ(out.at(0, 0), 1.0);
    EXPECT_DOUBLE_EQ(out.at(0, 1), 2.0);
}

TEST(GatherRows, DuplicateIdsAccumulateGradient) {
    Tape tape;
    auto table = Tensor::from_values(4, 2, {1, 2, 3, 4, 5, 6, 7, 8}, /*tracked=*/true);
    std::vector<int> ids = {3, 3};
    auto out = tape.gather_rows(table, ids);
    auto s = tape.sum(out);
    tape.backward(s);
    EXPECT_DOUBLE_EQ(table.grad_at(3, 0), 2.0);
    EXPECT_DOUBLE_EQ(table.grad_at(3, 1), 2.0);
    EXPECT_DOUBLE_EQ(table.grad_at(0, 0), 0.0);
}

TEST(GatherRows, OutOfVocabularyRejected) {
    Tape tape;
    auto table = Tensor::zeros(4, 2);
    std::vector<int> ids = {4};
    EXPECT_THROW(tape.gather_rows(table, ids), vag::OovError);
}

TEST(GatherRows, GradientMatchesFiniteDifferences) {
    Rng rng(13);
    std::vector<int> ids = {2, 0, 2, 5, 1};
    auto f = [&](Tape& t, const Tensor& table) { return t.sum(t.gather_rows(table, ids)); };
    EXPECT_LT(vag::grad_check(f, random_tensor(6, 3, rng), 1e-5), 1e-6);
}

TEST(MaskedLogSoftmax, DisallowedEntriesHaveExactZeroGradient) {
    Rng rng(17);
    auto x = random_tensor(2, 5, rng);
    vag::VocabMask mask = {1, 0, 1, 0, 1};
    Tape tape;
    auto lp = tape.masked_log_softmax_rows(x, mask);
    auto s = tape.sum(tape.pick(lp, {{0, 0}, {1, 2}}));
    tape.backward(s);
    EXPECT_EQ(x.grad_at(0, 1), 0.0);
    EXPECT_EQ(x.grad_at(0, 3), 0.0);
    EXPECT_EQ(x.grad_at(1, 1), 0.0);
    EXPECT_EQ(x.grad_at(1, 3), 0.0);
    EXPECT_NE(x.grad_at(0, 0), 0.0);
}

TEST(MaskedLogSoftmax, AllowedProbabilitiesNormalize) {
    Rng rng(19);
    Tape tape;
    auto x = random_tensor(3, 7, rng, false);
    vag::VocabMask mask = {0, 1, 1, 0, 1, 0, 0};
    auto lp = tape.masked_log_softmax_rows(x, mask);
    for (std::size_t i = 0; i < 3; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < 7; ++j) {
            if (mask[j]) {
                s += std::exp(lp.at(i, j));
            } else {
                EXPECT_TRUE(std::isinf(lp.at(i, j)));
                EXPECT_LT(lp.at(i, j), 0.0);
            }
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(MaskedLogSoftmax, EmptyMaskRejected) {
    Tape tape;
    auto x = Tensor::zeros(1, 3);
    vag::VocabMask mask = {0, 0, 0};
    EXPECT_THROW(tape.masked_log_softmax_rows(x, mask), vag::ContractError);
}

TEST(MaskedLogSoftmax, GradientMatchesFiniteDifferences) {
    Rng rng(23);
    vag::VocabMask mask = {1, 0, 1, 1, 0, 1};
    auto f = [&](Tape& t, const Tensor& x) {
        auto lp = t.masked_log_softmax_rows(x, mask);
        return t.sum(t.pick(lp, {{0, 0}, {0, 3}, {1, 5}}));
    };
    EXPECT_LT(vag::grad_check(f, random_tensor(2, 6, rng), 1e-5), 1e-6);
}

TEST(Gelu, GradientMatchesFiniteDifferences) {
    Rng rng(29);
    auto f = [&](Tape& t, const Tensor& x) { return t.sum(t.gelu(x)); };
    EXPECT_LT(vag::grad_check(f, random_tensor(3, 4, rng), 1e-5), 1e-6);
}

TEST(Log, MatchesSoftmaxLogIdentity) {
    Rng rng(31);
    Tape tape;
    auto x = random_tensor(2, 5, rng, false);
    auto p = tape.softmax_rows(x);
    auto lp = tape.log(p);
    vag::VocabMask full(5, 1);
    auto lsm = tape.masked_log_softmax_rows(x, full);
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(lp.at(i, j), lsm.at(i, j), 1e-12);
}

TEST(Log, RejectsNonPositive) {
    Tape tape;
    auto x = Tensor::from_values(1, 2, {1.0, 0.0});
    EXPECT_THROW(tape.log(x), vag::NumericError);
}

TEST(CompositeOps, GradientMatchesFiniteDifferences) {
    // slice / concat / transpose / add_rowvec / mean_over_rows / scale in one program
    Rng rng(37);
    auto v = random_tensor(1, 4, rng, false);
    auto f = [&](Tape& t, const Tensor& x) {
        auto left = t.slice_cols(x, 0, 2);
        auto right = t.slice_cols(x, 2, 2);
        auto swapped = t.concat_cols({right, left});
        auto shifted = t.add_rowvec(swapped, v);
        auto pooled = t.mean_over_rows(t.gelu(shifted));
        auto top = t.slice_rows(x, 0, 1);
        return t.scale(t.sum(t.add(pooled, top)), 0.7);
    };
    EXPECT_LT(vag::grad_check(f, random_tensor(1, 4, rng), 1e-5), 1e-5);

    auto g = [&](Tape& t, const Tensor& x) {
        auto y = t.matmul(t.transpose(x), x);
        return t.sum(y);
    };
    EXPECT_LT(vag::grad_check(g, random_tensor(3, 2, rng), 1e-5), 1e-6);
}

TEST(GradCheck, SumHasUnitGradient) {
    Rng rng(41);
    auto x = random_tensor(2, 3, rng);
    Tape tape;
    auto y = tape.sum(x);
    tape.backward(y);
    for (double g : x.grad()) EXPECT_EQ(g, 1.0);  // exactly ones on the tape
    auto f = [](Tape& t, const Tensor& xx) { return t.sum(xx); };
    EXPECT_LT(vag::grad_check(f, x, 1e-5), 1e-9);
}

TEST(GradCheck, SquareAtThree) {
    auto f = [](Tape& t, const Tensor& x) { return t.matmul(x, t.transpose(x)); };
    auto x = Tensor::from_values(1, 1, {3.0});
    // tape gradient is 6; central differences of x^2 are exact up to rounding
    EXPECT_LT(vag::grad_check(f, x, 1e-5), 1e-9);
}

TEST(GradCheck, RejectsBadStepAndNonScalar) {
    auto f = [](Tape& t, const Tensor& x) { return t.sum(x); };
    auto x = Tensor::zeros(2, 2);
    EXPECT_THROW(vag::grad_check(f, x, 1e-2), vag::ContractError);
    auto g = [](Tape& t, const Tensor& x) { return t.scale(x, 2.0); };
    EXPECT_THROW(vag::grad_check(g, x, 1e-5), vag::ContractError);
}

TEST(Tape, BackwardIsDeterministic) {
    Rng rng(43);
    auto x = random_tensor(4, 4, rng);
    Tape tape;
    auto y = tape.sum(tape.gelu(tape.matmul(x, tape.transpose(x))));

    x.zero_grad();
    tape.backward(y);
    auto first = x.grad();

    x.zero_grad();
    tape.backward(y);
    auto second = x.grad();

    ASSERT_EQ(first.size(), second.size());
    for (std::size_t i = 0; i < first.size(); ++i) {
        EXPECT_EQ(first[i], second[i]);  // bitwise
    }
}

TEST(Tape, UntrackedTapeRecordsNothing) {
    Rng rng(47);
    auto x = random_tensor(3, 3, rng);
    Tape tape(/*track=*/false);
    auto y = tape.matmul(x, x);
    EXPECT_FALSE(y.tracked());
    EXPECT_EQ(tape.size(), 0u);
}

TEST(Tape, BackwardRequiresScalar) {
    Rng rng(53);
    auto x = random_tensor(2, 2, rng);
    Tape tape;
    auto y = tape.matmul(x, x);
    EXPECT_THROW(tape.backward(y), vag::ContractError);
}
