#include "grad_suite.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace unetsharp;
using namespace unetsharp::testing;

namespace {

// Direct seven-loop cross-correlation.
template <typename T>
Tensor<T> reference_conv(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, Index stride, Index pad)
{
    const Index n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3), cout = w.dim(0), k = w.dim(2);
    const Index ho = (h + 2 * pad - k) / stride + 1, wo = (wd + 2 * pad - k) / stride + 1;
    Tensor<T> out({n, cout, ho, wo});
    for (Index i = 0; i < n; ++i)
        for (Index co = 0; co < cout; ++co)
            for (Index oy = 0; oy < ho; ++oy)
                for (Index ox = 0; ox < wo; ++ox) {
                    double acc = b[co];
                    for (Index ci = 0; ci < cin; ++ci)
                        for (Index ky = 0; ky < k; ++ky)
                            for (Index kx = 0; kx < k; ++kx) {
                                const Index iy = oy * stride - pad + ky, ix = ox * stride - pad + kx;
                                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                                acc += static_cast<double>(x.at(i, ci, iy, ix)) * w.at(co, ci, ky, kx);
                            }
                    out.at(i, co, oy, ox) = static_cast<T>(acc);
                }
    return out;
}

// Bilinear resize with half-pixel centres, written per output pixel.
double reference_bilinear(const Tensor<double>& x, Index n, Index c, double fy, double fx)
{
    const Index h = x.dim(2), w = x.dim(3);
    const double sy = std::max(0.0, fy), sx = std::max(0.0, fx);
    const Index y0 = std::min<Index>(static_cast<Index>(sy), h - 1), x0 = std::min<Index>(static_cast<Index>(sx), w - 1);
    const Index y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
    const double ty = sy - static_cast<double>(y0), tx = sx - static_cast<double>(x0);
    return (1 - ty) * ((1 - tx) * x.at(n, c, y0, x0) + tx * x.at(n, c, y0, x1))
        + ty * ((1 - tx) * x.at(n, c, y1, x0) + tx * x.at(n, c, y1, x1));
}

} // namespace

TEST(Tensor, ShapeAndFill)
{
    Tensor<float> t({2, 3}, 1.5f);
    EXPECT_EQ(t.size(), 6);
    EXPECT_EQ(t.rank(), 2);
    EXPECT_FLOAT_EQ(t[5], 1.5f);
    EXPECT_THROW(Tensor<float>({2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
    EXPECT_THROW(t.reshaped({4}), ShapeError);
    EXPECT_EQ(t.reshaped({3, 2}).shape(), (Shape{3, 2}));
}

TEST(Tensor, BitwiseEqualDistinguishesSignedZero)
{
    Tensor<float> a({1}, 0.0f), b({1}, -0.0f);
    EXPECT_FALSE(bitwise_equal(a, b));
    EXPECT_TRUE(bitwise_equal(a, a));
}

TEST(Tape, BackwardRequiresScalar)
{
    Tape<double> tape;
    Var<double> x = tape.leaf(Tensor<double>({2}, 1.0), true);
    EXPECT_THROW(tape.backward(x), ArgumentError);
}

TEST(Tape, ReusedValueAccumulates)
{
    Tape<double> tape;
    Var<double> x = tape.leaf(Tensor<double>({3}, std::vector<double>{1, 2, 3}), true);
    tape.backward(sum(mul(x, x)));
    for (Index i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2.0 * (i + 1));
}

TEST(Tape, SumGivesOnesAndRepeatedCallsAccumulate)
{
    Tape<double> tape;
    Var<double> x = tape.leaf(Tensor<double>({2, 3}, 0.7), true);
    Var<double> loss = sum(x);
    tape.backward(loss);
    for (Index i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 1.0);
    tape.backward(loss);
    for (Index i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2.0);
}

TEST(Tape, SquareHasAnalyticGradient)
{
    Tape<double> tape;
    Var<double> x = tape.leaf(Tensor<double>({2}, std::vector<double>{1, 2}), true);
    tape.backward(sum(mul(x, x)));
    EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
    EXPECT_DOUBLE_EQ(x.grad()[1], 4.0);
}

TEST(Tape, ParameterSinksAccumulateAcrossBackwards)
{
    Tensor<double> w({2}, 3.0), gw;
    for (int round = 1; round <= 2; ++round) {
        Tape<double> tape;
        Var<double> v = tape.bind(w, &gw);
        tape.backward(sum(v));
        EXPECT_DOUBLE_EQ(gw[0], static_cast<double>(round));
    }
}

TEST(Tape, NonRecordingTapeKeepsNoGraph)
{
    Tape<double> tape(false);
    Var<double> x = tape.leaf(Tensor<double>({2}, 1.0), true);
    Var<double> y = sum(x);
    EXPECT_DOUBLE_EQ(y.value()[0], 2.0);
    EXPECT_FALSE(y.requires_grad());
    EXPECT_THROW(tape.backward(y), ContractError);
}

TEST(Conv2d, OnesKernelCountsNeighbours)
{
    Tape<float> tape;
    auto x = tape.leaf(Tensor<float>({1, 1, 3, 3}, 1.0f));
    auto w = tape.leaf(Tensor<float>({1, 1, 3, 3}, 1.0f));
    auto b = tape.leaf(Tensor<float>({1}, 0.0f));
    const auto y = conv2d(x, w, b, 1, 1).value();
    EXPECT_FLOAT_EQ(y[4], 9.0f);
    for (Index corner : {0, 2, 6, 8}) EXPECT_FLOAT_EQ(y[corner], 4.0f);
    for (Index edge : {1, 3, 5, 7}) EXPECT_FLOAT_EQ(y[edge], 6.0f);
}

TEST(Conv2d, MatchesDirectLoopsOnRandomShapes)
{
    std::mt19937_64 rng(3);
    struct Case {
        Shape x;
        Index cout, k, stride, pad;
    };
    for (const Case& c : {Case{{2, 3, 7, 5}, 4, 3, 1, 1}, Case{{1, 5, 8, 8}, 2, 1, 1, 0},
             Case{{3, 2, 9, 6}, 3, 3, 2, 1}, Case{{2, 40, 70, 64}, 8, 3, 1, 1}}) {
        const auto xf = random_tensor(c.x, rng).cast<float>();
        const auto wf = random_tensor({c.cout, c.x[1], c.k, c.k}, rng).cast<float>();
        const auto bf = random_tensor({c.cout}, rng).cast<float>();
        Tape<float> tape;
        const auto y = conv2d(tape.leaf(xf), tape.leaf(wf), tape.leaf(bf), c.stride, c.pad).value();
        const auto ref = reference_conv(xf, wf, bf, c.stride, c.pad);
        ASSERT_EQ(y.shape(), ref.shape());
        for (Index i = 0; i < y.size(); ++i) ASSERT_NEAR(y[i], ref[i], 1e-4 * (1 + std::abs(ref[i])));
    }
}

TEST(Conv2d, SamePaddingPreservesExtent)
{
    for (Index k : {1, 3, 5}) {
        for (Index h : {1, 4, 7}) {
            for (Index w : {2, 5, 8}) {
                Tape<float> tape;
                auto x = tape.leaf(Tensor<float>({1, 2, h, w}, 1.0f));
                auto wt = tape.leaf(Tensor<float>({3, 2, k, k}, 0.5f));
                auto b = tape.leaf(Tensor<float>({3}));
                EXPECT_EQ(conv2d(x, wt, b, 1, (k - 1) / 2).shape(), (Shape{1, 3, h, w}));
            }
        }
    }
}

TEST(Conv2d, RejectsChannelMismatch)
{
    Tape<float> tape;
    auto x = tape.leaf(Tensor<float>({1, 2, 4, 4}));
    auto w = tape.leaf(Tensor<float>({1, 3, 3, 3}));
    auto b = tape.leaf(Tensor<float>({1}));
    EXPECT_THROW(conv2d(x, w, b, 1, 1), ShapeError);
}

TEST(BatchNorm, NormalizesFourValues)
{
    Tape<double> tape;
    Tensor<double> rm({1}), rv({1}, 1.0);
    auto x = tape.leaf(Tensor<double>({4, 1}, std::vector<double>{1, 2, 3, 4}));
    auto g = tape.leaf(Tensor<double>({1}, 1.0));
    auto b = tape.leaf(Tensor<double>({1}, 0.0));
    const auto y = batch_norm(x, g, b, NormState<double>{&rm, &rv}, Mode::Train).value();
    // Population variance 1.25 plus eps 1e-5.
    const double s = std::sqrt(1.25 + 1e-5);
    EXPECT_NEAR(y[0], -1.5 / s, 1e-12);
    EXPECT_NEAR(y[1], -0.5 / s, 1e-12);
    EXPECT_NEAR(y[2], 0.5 / s, 1e-12);
    EXPECT_NEAR(y[3], 1.5 / s, 1e-12);
    EXPECT_NEAR(y[0], -1.3416, 1e-4);
    EXPECT_NEAR(y[1], -0.4472, 1e-4);
    // Running estimates move by momentum 0.1; variance uses the unbiased 5/3.
    EXPECT_NEAR(rm[0], 0.25, 1e-12);
    EXPECT_NEAR(rv[0], 0.9 + 0.1 * 5.0 / 3.0, 1e-12);
}

TEST(BatchNorm, TrainOutputIsStandardized)
{
    std::mt19937_64 rng(4);
    Tape<double> tape;
    Tensor<double> rm({3}), rv({3}, 1.0);
    auto x = tape.leaf(random_tensor({4, 3, 5, 5}, rng, -3.0, 5.0));
    auto g = tape.leaf(Tensor<double>({3}, 1.0));
    auto b = tape.leaf(Tensor<double>({3}, 0.0));
    const auto y = batch_norm(x, g, b, NormState<double>{&rm, &rv}, Mode::Train).value();
    for (Index c = 0; c < 3; ++c) {
        double m = 0, v = 0;
        for (Index n = 0; n < 4; ++n)
            for (Index q = 0; q < 25; ++q) m += y[(n * 3 + c) * 25 + q];
        m /= 100;
        for (Index n = 0; n < 4; ++n)
            for (Index q = 0; q < 25; ++q) v += std::pow(y[(n * 3 + c) * 25 + q] - m, 2);
        v /= 100;
        EXPECT_NEAR(m, 0.0, 1e-5);
        EXPECT_NEAR(v, 1.0, 1e-4);
    }
}

TEST(BatchNorm, SingleValuePopulationIsDegenerate)
{
    Tape<double> tape;
    Tensor<double> rm({2}), rv({2}, 1.0);
    auto x = tape.leaf(Tensor<double>({1, 2}, 1.0));
    auto g = tape.leaf(Tensor<double>({2}, 1.0));
    auto b = tape.leaf(Tensor<double>({2}, 0.0));
    EXPECT_THROW(batch_norm(x, g, b, NormState<double>{&rm, &rv}, Mode::Train), DegenerateError);
    EXPECT_NO_THROW(batch_norm(x, g, b, NormState<double>{&rm, &rv}, Mode::Eval));
}

TEST(BatchNorm, FreshEvalIsNearIdentity)
{
    Tape<double> tape;
    Tensor<double> rm({1}), rv({1}, 1.0);
    auto x = tape.leaf(Tensor<double>({3, 1}, std::vector<double>{-2, 0.5, 7}));
    auto g = tape.leaf(Tensor<double>({1}, 1.0));
    auto b = tape.leaf(Tensor<double>({1}, 0.0));
    const auto y = batch_norm(x, g, b, NormState<double>{&rm, &rv}, Mode::Eval).value();
    for (Index i = 0; i < 3; ++i) EXPECT_NEAR(y[i], x.value()[i] / std::sqrt(1 + 1e-5), 1e-12);
}

TEST(Upsample, BilinearMatchesPerPixelFormula)
{
    std::mt19937_64 rng(9);
    for (Index factor : {2, 4, 8, 16}) {
        const auto x = random_tensor({2, 2, 3, 4}, rng);
        Tape<double> tape;
        const auto y = upsample(tape.leaf(x), factor, UpsampleMode::Bilinear).value();
        ASSERT_EQ(y.shape(), (Shape{2, 2, 3 * factor, 4 * factor}));
        for (Index n = 0; n < 2; ++n)
            for (Index c = 0; c < 2; ++c)
                for (Index oy = 0; oy < 3 * factor; ++oy)
                    for (Index ox = 0; ox < 4 * factor; ++ox) {
                        const double fy = (oy + 0.5) / static_cast<double>(factor) - 0.5;
                        const double fx = (ox + 0.5) / static_cast<double>(factor) - 0.5;
                        ASSERT_NEAR(y.at(n, c, oy, ox), reference_bilinear(x, n, c, fy, fx), 1e-12);
                    }
    }
}

TEST(Upsample, ConstantStaysConstantAndNearestReplicates)
{
    Tape<double> tape;
    const auto c = upsample(tape.leaf(Tensor<double>({1, 1, 2, 2}, 3.0)), 4).value();
    for (Index i = 0; i < c.size(); ++i) EXPECT_DOUBLE_EQ(c[i], 3.0);
    const auto x = Tensor<double>({1, 1, 1, 2}, std::vector<double>{1, 2});
    const auto y = upsample(tape.leaf(x), 2, UpsampleMode::Nearest).value();
    EXPECT_EQ(std::vector<double>(y.data(), y.data() + y.size()), (std::vector<double>{1, 1, 2, 2, 1, 1, 2, 2}));
    EXPECT_THROW(upsample(tape.leaf(x), 3), ArgumentError);
}

TEST(MaxPool, TiesRouteToFirstElement)
{
    Tape<double> tape;
    auto x = tape.leaf(Tensor<double>({1, 1, 2, 2}, 5.0), true);
    tape.backward(sum(max_pool2d(x)));
    EXPECT_DOUBLE_EQ(x.grad()[0], 1.0);
    EXPECT_DOUBLE_EQ(x.grad()[1] + x.grad()[2] + x.grad()[3], 0.0);
}

TEST(Activations, StableAtExtremes)
{
    const auto s = sigmoid_values(Tensor<double>({2}, std::vector<double>{-1000, 1000}));
    EXPECT_EQ(s[0], 0.0);
    EXPECT_EQ(s[1], 1.0);
    Tape<double> tape;
    const auto p = softmax(tape.leaf(Tensor<double>({1, 2}, std::vector<double>{1000, 1000})), 1).value();
    EXPECT_DOUBLE_EQ(p[0], 0.5);
    EXPECT_DOUBLE_EQ(p[1], 0.5);
}

TEST(Activations, SoftmaxSumsToOneAndIgnoresShift)
{
    std::mt19937_64 rng(8);
    const auto x = random_tensor({3, 4, 2, 2}, rng, -5, 5);
    Tensor<double> shifted = x;
    shifted.array() += 17.0;
    Tape<double> tape;
    const auto p = softmax(tape.leaf(x), 1).value();
    const auto q = softmax(tape.leaf(shifted), 1).value();
    for (Index n = 0; n < 3; ++n)
        for (Index s = 0; s < 4; ++s) {
            double total = 0;
            for (Index c = 0; c < 4; ++c) total += p[(n * 4 + c) * 4 + s];
            EXPECT_NEAR(total, 1.0, 1e-6);
        }
    for (Index i = 0; i < p.size(); ++i) EXPECT_NEAR(p[i], q[i], 1e-12);
}

TEST(Plumbing, ConcatThenSliceRecoversInputs)
{
    std::mt19937_64 rng(2);
    Tape<double> tape;
    auto a = tape.leaf(random_tensor({2, 3, 2, 2}, rng));
    auto b = tape.leaf(random_tensor({2, 1, 2, 2}, rng));
    auto cat = concat_channels<double>({a, b});
    EXPECT_TRUE(bitwise_equal(slice_channels(cat, 0, 3).value(), a.value()));
    EXPECT_TRUE(bitwise_equal(slice_channels(cat, 3, 4).value(), b.value()));
    EXPECT_THROW(concat_channels<double>({a, tape.leaf(Tensor<double>({2, 1, 3, 2}))}), ShapeError);
}

TEST(Plumbing, LinearIdentityAndFlattenShape)
{
    std::mt19937_64 rng(6);
    Tape<double> tape;
    const auto x = random_tensor({3, 4}, rng);
    Tensor<double> eye({4, 4});
    for (Index i = 0; i < 4; ++i) eye[i * 4 + i] = 1.0;
    const auto y = linear(tape.leaf(x), tape.leaf(eye), tape.leaf(Tensor<double>({4}))).value();
    EXPECT_TRUE(bitwise_equal(y, x));
    EXPECT_EQ(flatten(tape.leaf(Tensor<double>({2, 3, 4, 4}))).shape(), (Shape{2, 48}));
    EXPECT_THROW(linear(tape.leaf(x), tape.leaf(Tensor<double>({3, 4})), tape.leaf(Tensor<double>({4}))), ShapeError);
}

TEST(Dropout, ZeroRateIsIdentityInBothModes)
{
    Tape<double> tape;
    std::mt19937_64 rng(1);
    auto x = tape.leaf(Tensor<double>({5}, 2.5));
    EXPECT_TRUE(bitwise_equal(dropout(x, 0.0, Mode::Train, rng).value(), x.value()));
    EXPECT_TRUE(bitwise_equal(dropout(x, 0.0, Mode::Eval, rng).value(), x.value()));
}

TEST(Dropout, EvalIsIdentityAndTrainRescales)
{
    Tape<double> tape;
    std::mt19937_64 rng(1);
    auto x = tape.leaf(Tensor<double>({10000}, 1.0));
    EXPECT_EQ(dropout(x, 0.5, Mode::Eval, rng).id(), x.id());
    const auto y = dropout(x, 0.5, Mode::Train, rng).value();
    Index kept = 0;
    for (Index i = 0; i < y.size(); ++i) {
        ASSERT_TRUE(y[i] == 0.0 || y[i] == 2.0);
        kept += y[i] != 0.0;
    }
    EXPECT_NEAR(static_cast<double>(kept) / 10000.0, 0.5, 0.03);
    EXPECT_THROW(dropout(x, 1.0, Mode::Train, rng), ArgumentError);
}

TEST(GradCheck, EveryPrimitiveOnThreeShapes)
{
    for (const auto& c : primitive_cases()) {
        const double err = grad_check(c.fn, c.inputs);
        EXPECT_LT(err, 1e-6) << c.name;
    }
}

TEST(GradCheck, LinearAndConvExamples)
{
    std::mt19937_64 rng(12);
    const GradCheckFn lin = [](Tape<double>&, const std::vector<Var<double>>& x) {
        return project(linear(x[0], x[1], x[2]), 1);
    };
    EXPECT_LT(grad_check(lin, {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng), random_tensor({2}, rng)}), 1e-7);
    const GradCheckFn conv = [](Tape<double>&, const std::vector<Var<double>>& x) {
        return project(conv2d(x[0], x[1], x[2], 1, 1), 2);
    };
    EXPECT_LT(grad_check(conv, {random_tensor({1, 2, 6, 6}, rng), random_tensor({3, 2, 3, 3}, rng),
                                   random_tensor({3}, rng)}),
        1e-6);
}

TEST(GradCheck, ConvBatchNormReluComposite)
{
    std::mt19937_64 rng(13);
    const GradCheckFn fn = [](Tape<double>&, const std::vector<Var<double>>& x) {
        Tensor<double> rm({3}), rv({3}, 1.0);
        auto y = conv2d(x[0], x[1], x[2], 1, 1);
        y = batch_norm(y, x[3], x[4], NormState<double>{&rm, &rv}, Mode::Train);
        return project(relu(y), 3);
    };
    EXPECT_LT(grad_check(fn, {random_tensor({2, 2, 4, 4}, rng), random_tensor({3, 2, 3, 3}, rng),
                              random_tensor({3}, rng), random_tensor({3}, rng, 0.5, 1.5), random_tensor({3}, rng)}),
        1e-5);
}

TEST(GradCheck, SupervisedLossThroughTwoLevelGrid)
{
    EXPECT_LT(composite_model_grad_error(true), 1e-5);
}
