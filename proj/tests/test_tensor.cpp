#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "wnet/nn_ops.hpp"
#include "wnet/tensor.hpp"

using wnet::Padding;
using wnet::Tape;
using wnet::Tensor;

namespace {

Tensor<double> random_tensor(wnet::Shape shape, std::mt19937_64& rng,
                             double lo = -1.0, double hi = 1.0,
                             bool requires_grad = false) {
    auto t = Tensor<double>::zeros(std::move(shape), requires_grad);
    wnet::fill_uniform(t, lo, hi, rng);
    return t;
}

// Checks every (or up to `max_checks`) element of every grad-tracked input
// of a scalar-valued graph against central finite differences.
void expect_grad_matches_fd(std::vector<Tensor<double>> inputs,
                            const std::function<Tensor<double>(Tape<double>*)>& loss_fn,
                            double h = 1e-5, double tol = 1e-4,
                            int max_checks = 64) {
    for (auto& in : inputs) in.zero_grad();
    Tape<double> tape;
    auto loss = loss_fn(&tape);
    wnet::backward(loss, tape);
    auto f = [&] { return loss_fn(nullptr).item(); };
    std::mt19937_64 pick(7);
    for (auto& in : inputs) {
        ASSERT_TRUE(in.requires_grad());
        std::vector<std::size_t> idx(static_cast<std::size_t>(in.numel()));
        std::iota(idx.begin(), idx.end(), 0u);
        if (static_cast<int>(idx.size()) > max_checks) {
            std::shuffle(idx.begin(), idx.end(), pick);
            idx.resize(static_cast<std::size_t>(max_checks));
        }
        for (auto i : idx) {
            const double fd = oracle::fd_derivative(in.data(), i, f, h);
            const double an = in.grad()[i];
            EXPECT_TRUE(oracle::fd_close(an, fd, tol))
                << "index " << i << " analytic " << an << " fd " << fd;
        }
    }
}

}  // namespace

// ---------------- conv2d ----------------

TEST(Conv2d, Table1FirstLayerShape) {
    auto x = Tensor<float>::zeros({1, 3, 576, 576});
    auto w = Tensor<float>::zeros({32, 3, 3, 3});
    auto b = Tensor<float>::zeros({32});
    auto y = wnet::conv2d(x, w, b, Padding::Same, 1);
    EXPECT_EQ(y.shape(), (wnet::Shape{1, 32, 576, 576}));
}

TEST(Conv2d, OneByOneIdentitySelector) {
    std::mt19937_64 rng(1);
    auto x = random_tensor({2, 1, 5, 7}, rng);
    auto w = Tensor<double>::from({1, 1, 1, 1}, {1.0});
    auto b = Tensor<double>::zeros({1});
    auto y = wnet::conv2d(x, w, b, Padding::Same, 1);
    EXPECT_EQ(y.shape(), x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i)
        EXPECT_DOUBLE_EQ(y.data()[i], x.data()[i]);
}

TEST(Conv2d, ConstantInputAllOnesKernelInterior) {
    const double c = 2.5;
    auto x = Tensor<double>::full({1, 1, 8, 8}, c);
    auto w = Tensor<double>::full({1, 1, 3, 3}, 1.0);
    auto b = Tensor<double>::zeros({1});
    auto y = wnet::conv2d(x, w, b, Padding::Same, 1);
    for (std::int64_t iy = 1; iy < 7; ++iy)
        for (std::int64_t ix = 1; ix < 7; ++ix)
            EXPECT_NEAR(y.data()[iy * 8 + ix], 9.0 * c, 1e-12);
}

TEST(Conv2d, MatchesNaiveOracle) {
    std::mt19937_64 rng(42);
    for (auto [pad_mode, stride] : {std::pair{Padding::Same, std::int64_t{1}},
                                    {Padding::Valid, std::int64_t{1}},
                                    {Padding::Same, std::int64_t{2}}}) {
        auto x = random_tensor({2, 3, 11, 9}, rng);
        auto w = random_tensor({4, 3, 3, 3}, rng);
        auto b = random_tensor({4}, rng);
        auto fast = wnet::conv2d(x, w, b, pad_mode, stride);
        const std::int64_t pad = pad_mode == Padding::Same ? 1 : 0;
        auto ref = oracle::conv2d_naive(x, w, b, pad, stride);
        ASSERT_EQ(fast.shape(), ref.shape());
        for (std::int64_t i = 0; i < fast.numel(); ++i)
            EXPECT_NEAR(fast.data()[i], ref.data()[i], 1e-10);
    }
}

TEST(Conv2d, GradMatchesFiniteDifference) {
    std::mt19937_64 rng(3);
    auto x = random_tensor({1, 2, 6, 5}, rng, -1, 1, true);
    auto w = random_tensor({3, 2, 3, 3}, rng, -1, 1, true);
    auto b = random_tensor({3}, rng, -1, 1, true);
    expect_grad_matches_fd({x, w, b}, [&](Tape<double>* tape) {
        return wnet::sum(wnet::conv2d(x, w, b, Padding::Same, 1, tape), tape);
    });
}

TEST(Conv2d, LinearInInput) {
    std::mt19937_64 rng(5);
    auto x = random_tensor({1, 2, 7, 7}, rng);
    auto y = random_tensor({1, 2, 7, 7}, rng);
    auto w = random_tensor({3, 2, 3, 3}, rng);
    auto zero_b = Tensor<double>::zeros({3});
    const double a = 1.7, b = -0.6;
    auto mix = Tensor<double>::zeros(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i)
        mix.data()[i] = a * x.data()[i] + b * y.data()[i];
    auto lhs = wnet::conv2d(mix, w, zero_b);
    auto cx = wnet::conv2d(x, w, zero_b);
    auto cy = wnet::conv2d(y, w, zero_b);
    for (std::int64_t i = 0; i < lhs.numel(); ++i)
        EXPECT_NEAR(lhs.data()[i], a * cx.data()[i] + b * cy.data()[i], 1e-10);
}

TEST(Conv2d, ShapeMismatchNamesBothShapes) {
    auto x = Tensor<float>::zeros({1, 3, 8, 8});
    auto w = Tensor<float>::zeros({4, 2, 3, 3});
    auto b = Tensor<float>::zeros({4});
    try {
        wnet::conv2d(x, w, b);
        FAIL() << "expected shape error";
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[4x2x3x3]"), std::string::npos) << msg;
        EXPECT_NE(msg.find("[1x3x8x8]"), std::string::npos) << msg;
    }
}

TEST(Conv2d, DeterministicAcrossCalls) {
    std::mt19937_64 rng(11);
    auto x = random_tensor({1, 3, 16, 16}, rng);
    auto w = random_tensor({8, 3, 3, 3}, rng);
    auto b = random_tensor({8}, rng);
    auto y1 = wnet::conv2d(x, w, b);
    auto y2 = wnet::conv2d(x, w, b);
    EXPECT_EQ(y1.data(), y2.data());
}

// ---------------- maxpool2d ----------------

TEST(MaxPool, HalvesSpatialExtents) {
    auto x = Tensor<float>::zeros({1, 1, 576, 576});
    EXPECT_EQ(wnet::maxpool2d(x).shape(), (wnet::Shape{1, 1, 288, 288}));
}

TEST(MaxPool, ConstantImageStaysConstant) {
    auto x = Tensor<double>::full({1, 2, 6, 6}, 3.25);
    auto y = wnet::maxpool2d(x);
    for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 3.25);
}

TEST(MaxPool, SingleWindow) {
    auto x = Tensor<double>::from({1, 1, 2, 2}, {1, 2, 3, 4});
    auto y = wnet::maxpool2d(x);
    ASSERT_EQ(y.numel(), 1);
    EXPECT_DOUBLE_EQ(y.data()[0], 4.0);
}

TEST(MaxPool, OddExtentsRejected) {
    auto x = Tensor<float>::zeros({1, 1, 5, 4});
    EXPECT_THROW(wnet::maxpool2d(x), std::invalid_argument);
}

TEST(MaxPool, TieRoutesGradToFirstRowMajorElement) {
    auto x = Tensor<double>::from({1, 1, 2, 2}, {7, 7, 7, 7}, true);
    Tape<double> tape;
    auto loss = wnet::sum(wnet::maxpool2d(x, &tape), &tape);
    wnet::backward(loss, tape);
    EXPECT_DOUBLE_EQ(x.grad()[0], 1.0);
    EXPECT_DOUBLE_EQ(x.grad()[1], 0.0);
    EXPECT_DOUBLE_EQ(x.grad()[2], 0.0);
    EXPECT_DOUBLE_EQ(x.grad()[3], 0.0);
}

TEST(MaxPool, GradMatchesFiniteDifference) {
    std::mt19937_64 rng(9);
    auto x = random_tensor({2, 2, 4, 4}, rng, -2, 2, true);
    expect_grad_matches_fd({x}, [&](Tape<double>* tape) {
        return wnet::sum(wnet::maxpool2d(x, tape), tape);
    });
}

// ---------------- upsample2x ----------------

TEST(Upsample, DoublesExtents) {
    auto x = Tensor<float>::zeros({1, 4, 72, 72});
    EXPECT_EQ(wnet::upsample2x(x).shape(), (wnet::Shape{1, 4, 144, 144}));
}

TEST(Upsample, ReplicatesByDefinition) {
    auto x = Tensor<double>::from({1, 1, 1, 2}, {1, 2});
    auto y = wnet::upsample2x(x);
    EXPECT_EQ(y.data(), (std::vector<double>{1, 1, 2, 2, 1, 1, 2, 2}));
}

TEST(Upsample, ConstantStaysConstant) {
    auto x = Tensor<double>::full({1, 1, 3, 3}, -0.5);
    auto y = wnet::upsample2x(x);
    for (double v : y.data()) EXPECT_DOUBLE_EQ(v, -0.5);
}

TEST(Upsample, MaxpoolOfUpsampleIsIdentity) {
    std::mt19937_64 rng(13);
    auto x = random_tensor({2, 3, 5, 6}, rng);
    auto y = wnet::maxpool2d(wnet::upsample2x(x));
    ASSERT_EQ(y.shape(), x.shape());
    EXPECT_EQ(y.data(), x.data());
}

TEST(Upsample, GradMatchesFiniteDifference) {
    std::mt19937_64 rng(17);
    auto x = random_tensor({1, 2, 3, 3}, rng, -1, 1, true);
    expect_grad_matches_fd({x}, [&](Tape<double>* tape) {
        auto up = wnet::upsample2x(x, tape);
        return wnet::sum(wnet::mul(up, up, tape), tape);
    });
}

// ---------------- concat / slice ----------------

TEST(Concat, AddsChannelExtents) {
    auto a = Tensor<float>::zeros({1, 32, 16, 16});
    auto b = Tensor<float>::zeros({1, 32, 16, 16});
    EXPECT_EQ(wnet::concat<float>({a, b}).shape(), (wnet::Shape{1, 64, 16, 16}));
}

TEST(Concat, SingleInputIsIdentity) {
    std::mt19937_64 rng(19);
    auto a = random_tensor({2, 3, 4, 4}, rng);
    auto y = wnet::concat<double>({a});
    EXPECT_EQ(y.shape(), a.shape());
    EXPECT_EQ(y.data(), a.data());
}

TEST(Concat, ChannelSliceRoundTrip) {
    std::mt19937_64 rng(23);
    auto a = random_tensor({2, 3, 4, 5}, rng);
    auto b = random_tensor({2, 2, 4, 5}, rng);
    auto y = wnet::concat<double>({a, b});
    // slice channels back out and compare
    const std::int64_t hw = 4 * 5;
    for (std::int64_t img = 0; img < 2; ++img) {
        for (std::int64_t c = 0; c < 3; ++c)
            for (std::int64_t i = 0; i < hw; ++i)
                EXPECT_EQ(y.data()[((img * 5 + c) * hw) + i],
                          a.data()[((img * 3 + c) * hw) + i]);
        for (std::int64_t c = 0; c < 2; ++c)
            for (std::int64_t i = 0; i < hw; ++i)
                EXPECT_EQ(y.data()[((img * 5 + 3 + c) * hw) + i],
                          b.data()[((img * 2 + c) * hw) + i]);
    }
}

TEST(Concat, SpatialMismatchRejected) {
    auto a = Tensor<float>::zeros({1, 2, 4, 4});
    auto b = Tensor<float>::zeros({1, 2, 5, 4});
    EXPECT_THROW(wnet::concat<float>({a, b}), std::invalid_argument);
}

TEST(Concat, GradSplitsBackToInputs) {
    std::mt19937_64 rng(29);
    auto a = random_tensor({1, 2, 3, 3}, rng, -1, 1, true);
    auto b = random_tensor({1, 1, 3, 3}, rng, -1, 1, true);
    expect_grad_matches_fd({a, b}, [&](Tape<double>* tape) {
        auto y = wnet::concat<double>({a, b}, tape);
        return wnet::sum(wnet::mul(y, y, tape), tape);
    });
}

TEST(SliceChannel, ExtractsAndBackpropagates) {
    std::mt19937_64 rng(31);
    auto x = random_tensor({2, 3, 4, 4}, rng, -1, 1, true);
    auto s = wnet::slice_channel(x, 1);
    EXPECT_EQ(s.shape(), (wnet::Shape{2, 4, 4}));
    for (std::int64_t img = 0; img < 2; ++img)
        for (std::int64_t i = 0; i < 16; ++i)
            EXPECT_EQ(s.data()[img * 16 + i], x.data()[(img * 3 + 1) * 16 + i]);
    expect_grad_matches_fd({x}, [&](Tape<double>* tape) {
        auto y = wnet::slice_channel(x, 1, tape);
        return wnet::sum(wnet::mul(y, y, tape), tape);
    });
}

// ---------------- activations ----------------

TEST(LeakyRelu, PointValues) {
    auto x = Tensor<double>::from({3}, {2.0, -1.0, 0.0});
    auto y = wnet::leaky_relu(x, 0.01);
    EXPECT_DOUBLE_EQ(y.data()[0], 2.0);
    EXPECT_DOUBLE_EQ(y.data()[1], -0.01);
    EXPECT_DOUBLE_EQ(y.data()[2], 0.0);
}

TEST(LeakyRelu, GradientOnNegativeSideIsSlope) {
    auto x = Tensor<double>::from({1}, {-3.0}, true);
    const double slope = 0.01;
    Tape<double> tape;
    auto loss = wnet::sum(wnet::leaky_relu(x, slope, &tape), &tape);
    wnet::backward(loss, tape);
    EXPECT_DOUBLE_EQ(x.grad()[0], slope);
    auto f = [&] { return wnet::leaky_relu(x, slope).item(); };
    EXPECT_LT(oracle::rel_err(x.grad()[0], oracle::fd_derivative(x.data(), 0, f, 1e-6)),
              1e-6);
}

TEST(Sigmoid, PointValueAndSymmetry) {
    auto x = Tensor<double>::from({3}, {0.0, 1.3, -1.3});
    auto y = wnet::sigmoid(x);
    EXPECT_DOUBLE_EQ(y.data()[0], 0.5);
    EXPECT_NEAR(y.data()[1] + y.data()[2], 1.0, 1e-12);
    for (double v : y.data()) {
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, 1.0);
    }
}

TEST(Sigmoid, DerivativeMatchesClosedFormAndFd) {
    std::mt19937_64 rng(37);
    auto x = random_tensor({8}, rng, -3, 3, true);
    Tape<double> tape;
    auto s = wnet::sigmoid(x, &tape);
    auto loss = wnet::sum(s, &tape);
    wnet::backward(loss, tape);
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        const double sv = s.data()[i];
        EXPECT_NEAR(x.grad()[i], sv * (1.0 - sv), 1e-12);
    }
    expect_grad_matches_fd({x}, [&](Tape<double>* tape2) {
        return wnet::sum(wnet::sigmoid(x, tape2), tape2);
    });
}

// ---------------- dropout ----------------

TEST(Dropout, EvalModeIsIdentity) {
    std::mt19937_64 rng(41);
    auto x = random_tensor({100}, rng);
    std::mt19937_64 drop_rng(5);
    auto y = wnet::dropout(x, 0.2, /*training=*/false, drop_rng);
    EXPECT_EQ(y.data(), x.data());
}

TEST(Dropout, ZeroRateIsIdentity) {
    std::mt19937_64 rng(43);
    auto x = random_tensor({100}, rng);
    std::mt19937_64 drop_rng(5);
    auto y = wnet::dropout(x, 0.0, /*training=*/true, drop_rng);
    EXPECT_EQ(y.data(), x.data());
}

TEST(Dropout, PreservesMeanWithinTwoPercent) {
    auto x = Tensor<double>::full({100000}, 1.0);
    std::mt19937_64 drop_rng(2024);
    auto y = wnet::dropout(x, 0.2, /*training=*/true, drop_rng);
    double mean = 0;
    for (double v : y.data()) mean += v;
    mean /= static_cast<double>(y.numel());
    EXPECT_NEAR(mean, 1.0, 0.02);
}

TEST(Dropout, PureFunctionOfSeed) {
    std::mt19937_64 rng(47);
    auto x = random_tensor({512}, rng);
    std::mt19937_64 r1(99), r2(99), r3(100);
    auto y1 = wnet::dropout(x, 0.3, true, r1);
    auto y2 = wnet::dropout(x, 0.3, true, r2);
    auto y3 = wnet::dropout(x, 0.3, true, r3);
    EXPECT_EQ(y1.data(), y2.data());
    EXPECT_NE(y1.data(), y3.data());
}

TEST(Dropout, GradUsesSameMask) {
    std::mt19937_64 rng(53);
    auto x = random_tensor({64}, rng, -1, 1, true);
    Tape<double> tape;
    std::mt19937_64 drop_rng(7);
    auto y = wnet::dropout(x, 0.5, true, drop_rng, &tape);
    auto loss = wnet::sum(y, &tape);
    wnet::backward(loss, tape);
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        const double mask = x.data()[i] != 0.0 ? y.data()[i] / x.data()[i] : x.grad()[i];
        EXPECT_NEAR(x.grad()[i], mask, 1e-12);
    }
}

// ---------------- batch norm ----------------

namespace {
wnet::BatchNormState<double> fresh_state(std::int64_t c) {
    return {Tensor<double>::zeros({c}), Tensor<double>::full({c}, 1.0)};
}
}  // namespace

TEST(BatchNorm, StandardizesPerChannel) {
    std::mt19937_64 rng(59);
    auto x = random_tensor({4, 3, 5, 5}, rng, -4, 4);
    auto gamma = Tensor<double>::full({3}, 1.0);
    auto beta = Tensor<double>::zeros({3});
    auto state = fresh_state(3);
    auto y = wnet::batch_norm(x, gamma, beta, state, /*training=*/true);
    const std::int64_t hw = 25, n = 4, c = 3;
    for (std::int64_t ch = 0; ch < c; ++ch) {
        double mean = 0, var = 0;
        for (std::int64_t img = 0; img < n; ++img)
            for (std::int64_t i = 0; i < hw; ++i)
                mean += y.data()[(img * c + ch) * hw + i];
        mean /= static_cast<double>(n * hw);
        for (std::int64_t img = 0; img < n; ++img)
            for (std::int64_t i = 0; i < hw; ++i) {
                const double d = y.data()[(img * c + ch) * hw + i] - mean;
                var += d * d;
            }
        var /= static_cast<double>(n * hw);
        EXPECT_NEAR(mean, 0.0, 1e-10);
        EXPECT_NEAR(var, 1.0, 1e-4);  // off by eps/(var+eps)
    }
}

TEST(BatchNorm, ConstantChannelMapsToBeta) {
    auto x = Tensor<double>::full({2, 1, 4, 4}, 5.0);
    auto gamma = Tensor<double>::full({1}, 2.0);
    auto beta = Tensor<double>::full({1}, -0.75);
    auto state = fresh_state(1);
    auto y = wnet::batch_norm(x, gamma, beta, state, true);
    for (double v : y.data()) EXPECT_NEAR(v, -0.75, 1e-9);
}

TEST(BatchNorm, EvalUsesRunningStats) {
    std::mt19937_64 rng(61);
    auto x = random_tensor({2, 2, 3, 3}, rng);
    auto gamma = Tensor<double>::full({2}, 1.0);
    auto beta = Tensor<double>::zeros({2});
    auto state = fresh_state(2);
    state.running_mean.data() = {0.5, -0.5};
    state.running_var.data() = {4.0, 0.25};
    auto y = wnet::batch_norm(x, gamma, beta, state, /*training=*/false);
    for (std::int64_t img = 0; img < 2; ++img)
        for (std::int64_t ch = 0; ch < 2; ++ch)
            for (std::int64_t i = 0; i < 9; ++i) {
                const double xv = x.data()[(img * 2 + ch) * 9 + i];
                const double mu = state.running_mean.data()[ch];
                const double var = state.running_var.data()[ch];
                EXPECT_NEAR(y.data()[(img * 2 + ch) * 9 + i],
                            (xv - mu) / std::sqrt(var + 1e-5), 1e-12);
            }
}

TEST(BatchNorm, GradMatchesFiniteDifferenceOn2x3x4x4) {
    std::mt19937_64 rng(67);
    auto x = random_tensor({2, 3, 4, 4}, rng, -2, 2, true);
    auto gamma = random_tensor({3}, rng, 0.5, 1.5, true);
    auto beta = random_tensor({3}, rng, -0.5, 0.5, true);
    expect_grad_matches_fd({x, gamma, beta}, [&](Tape<double>* tape) {
        auto state = fresh_state(3);
        auto y = wnet::batch_norm(x, gamma, beta, state, true, 0.9, 1e-5, tape);
        return wnet::sum(wnet::mul(y, y, tape), tape);
    });
}

// ---------------- backward driver ----------------

TEST(Backward, SumGivesAllOnes) {
    auto x = Tensor<double>::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    Tape<double> tape;
    auto loss = wnet::sum(x, &tape);
    wnet::backward(loss, tape);
    for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 1.0);
}

TEST(Backward, SumOfSquares) {
    auto x = Tensor<double>::from({2}, {1, 2}, true);
    Tape<double> tape;
    auto loss = wnet::sum(wnet::mul(x, x, &tape), &tape);
    wnet::backward(loss, tape);
    EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
    EXPECT_DOUBLE_EQ(x.grad()[1], 4.0);
}

TEST(Backward, NonScalarLossRejected) {
    auto x = Tensor<double>::from({2}, {1, 2}, true);
    Tape<double> tape;
    auto y = wnet::mul(x, x, &tape);
    EXPECT_THROW(wnet::backward(y, tape), std::invalid_argument);
}

TEST(Backward, RepeatedCallsAccumulateLeafGrads) {
    auto x = Tensor<double>::from({2}, {1, 2}, true);
    Tape<double> tape;
    auto loss = wnet::sum(wnet::mul(x, x, &tape), &tape);
    wnet::backward(loss, tape);
    wnet::backward(loss, tape);
    EXPECT_DOUBLE_EQ(x.grad()[0], 4.0);
    EXPECT_DOUBLE_EQ(x.grad()[1], 8.0);
    x.zero_grad();
    wnet::backward(loss, tape);
    EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
}

TEST(TensorInvariants, GradPresentIffRequiresGrad) {
    auto x = Tensor<float>::zeros({3, 2});
    EXPECT_TRUE(x.grad().empty());
    x.set_requires_grad(true);
    EXPECT_EQ(x.grad().size(), x.data().size());
    x.set_requires_grad(false);
    EXPECT_TRUE(x.grad().empty());
}

TEST(TensorInvariants, FiniteCheck) {
    auto x = Tensor<double>::from({2}, {1.0, 2.0});
    EXPECT_TRUE(wnet::all_finite(x));
    x.data()[1] = std::numeric_limits<double>::quiet_NaN();
    EXPECT_FALSE(wnet::all_finite(x));
    EXPECT_THROW(wnet::check_finite(x, "activations"), std::runtime_error);
}
