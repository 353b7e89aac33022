#include <doctest.h>

#include <cmath>
#include <random>

#include "crowdkit/ops.hpp"
#include "crowdkit/ssim.hpp"
#include "crowdkit/tensor.hpp"
#include "test_util.hpp"

using crowdkit::ConvSpec;
using crowdkit::Padding;
using crowdkit::ShapeError;
using crowdkit::Tensor;

namespace {

// Independent nested-loop convolution used as the conformance oracle.
Tensor conv_oracle(const Tensor& input, const Tensor& weights, const Tensor* bias, const ConvSpec& s) {
    const int C = input.dim(0), H = input.dim(1), W = input.dim(2);
    const int O = weights.dim(0);
    const int oh = s.out_h(H), ow = s.out_w(W);
    auto reflect = [](int i, int n) {
        if (i < 0) i = -i;
        if (i >= n) i = 2 * n - 2 - i;
        return i;
    };
    Tensor out({O, oh, ow});
    for (int o = 0; o < O; ++o) {
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                double acc = bias ? (*bias)[static_cast<std::size_t>(o)] : 0.0;
                for (int c = 0; c < C; ++c) {
                    for (int ky = 0; ky < s.kernel_h; ++ky) {
                        for (int kx = 0; kx < s.kernel_w; ++kx) {
                            int iy = oy * s.stride - s.pad_top + ky * s.dilation;
                            int ix = ox * s.stride - s.pad_left + kx * s.dilation;
                            double v;
                            if (iy >= 0 && iy < H && ix >= 0 && ix < W) {
                                v = input.at(c, iy, ix);
                            } else if (s.padding == Padding::kZero) {
                                v = 0.0;
                            } else {
                                v = input.at(c, reflect(iy, H), reflect(ix, W));
                            }
                            acc += weights.at(o, c, ky, kx) * v;
                        }
                    }
                }
                out.at(o, oy, ox) = acc;
            }
        }
    }
    return out;
}

}  // namespace

TEST_CASE("tensor basics and invariants") {
    Tensor t({2, 3});
    CHECK(t.numel() == 6);
    CHECK(t.shape_str() == "[2,3]");
    Tensor s = Tensor::scalar(4.5);
    CHECK(s.rank() == 0);
    CHECK(s.value() == 4.5);
    CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0, 3.0}), ShapeError);
    CHECK_THROWS_AS(t.value(), ShapeError);
    CHECK(t.all_finite());
    t[0] = std::nan("");
    CHECK_FALSE(t.all_finite());
}

TEST_CASE("conv2d 1x1 identity kernel") {
    std::mt19937_64 rng(7);
    const Tensor x = testutil::random_tensor({1, 4, 5}, rng);
    const Tensor w({1, 1, 1, 1}, {1.0});
    const Tensor y = crowdkit::conv2d(x, w, nullptr, ConvSpec{});
    CHECK(testutil::max_abs_diff(x, y) == 0.0);
}

TEST_CASE("conv2d normalized gaussian on a constant map keeps the constant") {
    const crowdkit::ssim::GaussianWindow win = crowdkit::ssim::gaussian_window(5, 1.0);
    Tensor w({1, 1, 5, 5}, std::vector<double>(win.weights.data(), win.weights.data() + 25));
    const Tensor x = Tensor::full({1, 9, 9}, 2.75);
    const Tensor y = crowdkit::conv2d(x, w, nullptr, ConvSpec::same(5, 1, Padding::kReflect));
    CHECK(y.same_shape(x));
    for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y[i] == doctest::Approx(2.75).epsilon(1e-13));
}

TEST_CASE("conv2d dilated matches the nested-loop oracle") {
    std::mt19937_64 rng(11);
    const Tensor x = testutil::random_tensor({1, 7, 7}, rng);
    const Tensor w = testutil::random_tensor({1, 1, 3, 3}, rng);
    ConvSpec s;
    s.kernel_h = s.kernel_w = 3;
    s.dilation = 2;
    s.pad_top = s.pad_bottom = s.pad_left = s.pad_right = 2;
    const Tensor got = crowdkit::conv2d(x, w, nullptr, s);
    const Tensor want = conv_oracle(x, w, nullptr, s);
    CHECK(testutil::max_abs_diff(got, want) < 1e-12);
}

TEST_CASE("conv2d multi-channel strided and reflect variants match the oracle") {
    std::mt19937_64 rng(13);
    for (int trial = 0; trial < 6; ++trial) {
        const int cin = 1 + trial % 3;
        const int cout = 1 + (trial + 1) % 3;
        const Tensor x = testutil::random_tensor({cin, 8, 9}, rng);
        const Tensor w = testutil::random_tensor({cout, cin, 3, 3}, rng);
        const Tensor b = testutil::random_tensor({cout}, rng);
        ConvSpec s = ConvSpec::same(3, 1, trial % 2 ? Padding::kReflect : Padding::kZero);
        s.stride = 1 + trial % 2;
        const Tensor got = crowdkit::conv2d(x, w, &b, s);
        const Tensor want = conv_oracle(x, w, &b, s);
        CHECK(testutil::max_abs_diff(got, want) < 1e-12);
    }
}

TEST_CASE("conv2d linearity in the input") {
    std::mt19937_64 rng(17);
    const Tensor x = testutil::random_tensor({2, 6, 6}, rng);
    const Tensor y = testutil::random_tensor({2, 6, 6}, rng);
    const Tensor w = testutil::random_tensor({3, 2, 3, 3}, rng);
    const ConvSpec s = ConvSpec::same(3);
    const double a = 0.7, b = -1.3;
    const Tensor lhs = crowdkit::conv2d(crowdkit::add(crowdkit::scale(x, a), crowdkit::scale(y, b)),
                                        w, nullptr, s);
    const Tensor rhs = crowdkit::add(crowdkit::scale(crowdkit::conv2d(x, w, nullptr, s), a),
                                     crowdkit::scale(crowdkit::conv2d(y, w, nullptr, s), b));
    CHECK(testutil::max_abs_diff(lhs, rhs) < 1e-12);
}

TEST_CASE("conv2d rejects inconsistent arguments with named dimensions") {
    const Tensor x({2, 4, 4});
    const Tensor w({1, 3, 1, 1});
    CHECK_THROWS_WITH_AS(crowdkit::conv2d(x, w, nullptr, ConvSpec{}),
                         doctest::Contains("channels"), ShapeError);
    ConvSpec bad;
    bad.dilation = 0;
    const Tensor w2({1, 2, 1, 1});
    CHECK_THROWS_WITH_AS(crowdkit::conv2d(x, w2, nullptr, bad),
                         doctest::Contains("dilation"), ShapeError);
    ConvSpec bad2;
    bad2.stride = -1;
    CHECK_THROWS_AS(crowdkit::conv2d(x, w2, nullptr, bad2), ShapeError);
}

TEST_CASE("bilinear upsample of constants and singletons") {
    const Tensor c = Tensor::full({1, 3, 4}, 0.37);
    const Tensor up = crowdkit::bilinear_upsample_x2(c);
    CHECK(up.dim(1) == 6);
    CHECK(up.dim(2) == 8);
    for (std::size_t i = 0; i < up.numel(); ++i) CHECK(up[i] == 0.37);

    const Tensor one({1, 1, 1}, {3.0});
    const Tensor up1 = crowdkit::bilinear_upsample_x2(one);
    CHECK(up1.numel() == 4);
    for (std::size_t i = 0; i < up1.numel(); ++i) CHECK(up1[i] == 3.0);

    CHECK_THROWS_AS(crowdkit::bilinear_upsample_x2(Tensor({1, 0, 4})), ShapeError);
}

TEST_CASE("bilinear upsample 1x2 row matches the coordinate formula") {
    const double a = 0.3, b = -1.7;
    const Tensor x({1, 1, 2}, {a, b});
    const Tensor up = crowdkit::bilinear_upsample_x2(x);
    // direct evaluation of src = (j + 0.5)/2 - 0.5 with edge clamping
    auto expected = [&](int j) {
        const double src = (j + 0.5) / 2.0 - 0.5;
        const double f = std::floor(src);
        const int i0 = std::clamp(static_cast<int>(f), 0, 1);
        const int i1 = std::clamp(static_cast<int>(f) + 1, 0, 1);
        const double t = src - f;
        const double v0 = i0 == 0 ? a : b;
        const double v1 = i1 == 0 ? a : b;
        return v0 + t * (v1 - v0);
    };
    for (int j = 0; j < 4; ++j) {
        CHECK(up.at(0, 0, j) == doctest::Approx(expected(j)).epsilon(1e-15));
        CHECK(up.at(0, 1, j) == doctest::Approx(expected(j)).epsilon(1e-15));
    }
}

TEST_CASE("bilinear upsample stays within input bounds and preserves the mean of constants") {
    std::mt19937_64 rng(23);
    for (int trial = 0; trial < 10; ++trial) {
        const Tensor x = testutil::random_tensor({1, 5, 7}, rng, -2.0, 3.0);
        const Tensor up = crowdkit::bilinear_upsample_x2(x);
        CHECK(up.min() >= x.min());
        CHECK(up.max() <= x.max());
    }
    // exact constant preservation implies exact mean preservation
    const Tensor c = Tensor::full({1, 4, 4}, -0.123);
    const Tensor up = crowdkit::bilinear_upsample_x2(c);
    for (std::size_t i = 0; i < up.numel(); ++i) CHECK(up[i] == -0.123);
}

TEST_CASE("elementwise operations") {
    const Tensor x({3}, {-1.0, 0.0, 2.0});
    const Tensor r = crowdkit::relu(x);
    CHECK(r[0] == 0.0);
    CHECK(r[1] == 0.0);
    CHECK(r[2] == 2.0);

    std::mt19937_64 rng(29);
    const Tensor a = testutil::random_tensor({3, 3}, rng);
    const Tensor zero({3, 3});
    CHECK(testutil::max_abs_diff(crowdkit::add(a, zero), a) == 0.0);

    const Tensor b = testutil::random_tensor({3, 3}, rng);
    const Tensor prod = crowdkit::mul(a, b);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            CHECK(prod.at(i, j) == a.at(i, j) * b.at(i, j));

    CHECK_THROWS_AS(crowdkit::add(a, Tensor({2, 3})), ShapeError);
    CHECK_THROWS_AS(crowdkit::mul(a, Tensor({9})), ShapeError);
}

TEST_CASE("maxpool2x2 picks maxima and rejects odd sizes") {
    const Tensor x({1, 2, 4}, {1, 5, 2, 0, 3, -1, 7, 2});
    std::vector<int> argmax;
    const Tensor y = crowdkit::maxpool2x2(x, &argmax);
    CHECK(y.dim(1) == 1);
    CHECK(y.dim(2) == 2);
    CHECK(y.at(0, 0, 0) == 5.0);
    CHECK(y.at(0, 0, 1) == 7.0);
    CHECK(argmax[0] == 1);
    CHECK(argmax[1] == 6);
    CHECK_THROWS_AS(crowdkit::maxpool2x2(Tensor({1, 3, 4})), ShapeError);
}

TEST_CASE("receptive field of composed dilated convolutions matches receptive_fields") {
    // impulse response support after composing all-ones kernels
    const std::vector<int> dilations{1, 2, 3};
    const int k = 5;
    const int n = 64;
    Tensor x({1, n, n});
    x.at(0, n / 2, n / 2) = 1.0;
    Tensor w = Tensor::full({1, 1, k, k}, 1.0);
    const std::vector<int> rf = crowdkit::ssim::receptive_fields(k, dilations);
    for (std::size_t layer = 0; layer < dilations.size(); ++layer) {
        x = crowdkit::conv2d(x, w, nullptr, ConvSpec::same(k, dilations[layer], Padding::kZero));
        int lo = n, hi = -1;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                if (x.at(0, i, j) != 0.0) {
                    lo = std::min(lo, i);
                    hi = std::max(hi, i);
                }
        CHECK(hi - lo + 1 == rf[layer]);
    }
}
