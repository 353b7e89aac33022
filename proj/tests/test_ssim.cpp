#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "crowdkit/ssim.hpp"
#include "ssim_oracle.hpp"
#include "test_util.hpp"

using namespace crowdkit::ssim;
using crowdkit::ShapeError;
using crowdkit::Tape;
using crowdkit::Tensor;
using crowdkit::Var;
using ssim_oracle::Grid;
using ssim_oracle::OracleScale;
using ssim_oracle::oracle_dms_ssim_loss;
using ssim_oracle::oracle_filter;
using ssim_oracle::oracle_scale;
using ssim_oracle::oracle_single_scale_grad;
using ssim_oracle::oracle_window;

TEST_CASE("gaussian window: trivial, default, and formula cases") {
    const GaussianWindow w1 = gaussian_window(1, 1.0);
    CHECK(w1.weights.numel() == 1);
    CHECK(w1.weights[0] == doctest::Approx(1.0).epsilon(1e-15));

    const GaussianWindow w5 = gaussian_window(5, 1.0);
    CHECK(std::abs(w5.weights.sum() - 1.0) < 1e-12);
    CHECK(w5.weights.at(2, 2) == w5.weights.max());
    for (int dy = 0; dy < 5; ++dy)
        for (int dx = 0; dx < 5; ++dx)
            CHECK(w5.weights.at(dy, dx) == doctest::Approx(w5.weights.at(4 - dy, 4 - dx)).epsilon(1e-15));

    const GaussianWindow w3 = gaussian_window(3, 1.0);
    const auto direct = oracle_window(3, 1.0);
    for (int dy = 0; dy < 3; ++dy)
        for (int dx = 0; dx < 3; ++dx)
            CHECK(w3.weights.at(dy, dx) ==
                  doctest::Approx(direct[static_cast<std::size_t>(dy)][static_cast<std::size_t>(dx)])
                      .epsilon(1e-14));

    CHECK_THROWS_AS(gaussian_window(4, 1.0), ShapeError);
    CHECK_THROWS_AS(gaussian_window(5, 0.0), ShapeError);
}

TEST_CASE("pyramid filter: constants, impulse stamp, and oracle match") {
    const GaussianWindow win = gaussian_window(5, 1.0);
    const Tensor c = Tensor::full({9, 9}, 1.25);
    const Tensor fc = pyramid_filter(c, win, 1);
    for (std::size_t i = 0; i < fc.numel(); ++i) CHECK(fc[i] == doctest::Approx(1.25).epsilon(1e-13));

    Tensor impulse({11, 11});
    impulse.at(5, 5) = 1.0;
    const Tensor stamp = pyramid_filter(impulse, win, 1);
    for (int dy = -2; dy <= 2; ++dy)
        for (int dx = -2; dx <= 2; ++dx)
            CHECK(stamp.at(5 + dy, 5 + dx) ==
                  doctest::Approx(win.weights.at(dy + 2, dx + 2)).epsilon(1e-14));
    CHECK(stamp.at(5, 0) == 0.0);

    std::mt19937_64 rng(211);
    const Tensor x = testutil::random_tensor({16, 16}, rng);
    const Tensor got = pyramid_filter(x, win, 3);
    Grid g(16, 16);
    for (std::size_t i = 0; i < x.numel(); ++i) g.v[i] = x[i];
    const Grid want = oracle_filter(g, oracle_window(5, 1.0), 3);
    double max_diff = 0.0;
    for (std::size_t i = 0; i < got.numel(); ++i) max_diff = std::max(max_diff, std::abs(got[i] - want.v[i]));
    CHECK(max_diff < 1e-12);

    CHECK_THROWS_WITH_AS(pyramid_filter(Tensor({8, 8}), win, 9), doctest::Contains("19"), ShapeError);
}

TEST_CASE("local stats: self-comparison, shift invariance, oracle match") {
    const GaussianWindow win = gaussian_window(5, 1.0);
    std::mt19937_64 rng(223);
    const Tensor x = testutil::random_tensor({12, 12}, rng, 0.0, 1.0);

    SUBCASE("X == Y makes covariance equal variance") {
        SsimScaleStats s = local_stats(x, x, win, 1);
        CHECK(testutil::max_abs_diff(s.cov_xy, s.var_x) < 1e-12);
        const double ssim = ssim_scale(s, 1e-4, 9e-4, 4.5e-4);
        CHECK(ssim == doctest::Approx(1.0).epsilon(1e-9));
        for (std::size_t i = 0; i < s.str.numel(); ++i) CHECK(s.str[i] == doctest::Approx(1.0).epsilon(1e-9));
    }
    SUBCASE("variance is invariant to constant shifts") {
        const Tensor y = crowdkit::add_const(x, 0.8);
        SsimScaleStats s = local_stats(x, y, win, 1);
        CHECK(testutil::max_abs_diff(s.var_y, s.var_x) < 1e-12);
        CHECK(testutil::max_abs_diff(s.cov_xy, s.var_x) < 1e-12);
    }
    SUBCASE("all five maps match the nested-loop oracle") {
        const Tensor y = testutil::random_tensor({12, 12}, rng, 0.0, 1.0);
        SsimScaleStats s = local_stats(x, y, win, 2);
        Grid gx(12, 12), gy(12, 12);
        for (std::size_t i = 0; i < x.numel(); ++i) {
            gx.v[i] = x[i];
            gy.v[i] = y[i];
        }
        const OracleScale o = oracle_scale(gx, gy, oracle_window(5, 1.0), 2, 1e-4, 9e-4, 4.5e-4);
        double dmu = 0, dvar = 0, dcov = 0;
        for (std::size_t i = 0; i < x.numel(); ++i) {
            dmu = std::max({dmu, std::abs(s.mu_x[i] - o.mu_x.v[i]), std::abs(s.mu_y[i] - o.mu_y.v[i])});
            dvar = std::max({dvar, std::abs(s.var_x[i] - o.var_x.v[i]), std::abs(s.var_y[i] - o.var_y.v[i])});
            dcov = std::max(dcov, std::abs(s.cov_xy[i] - o.cov.v[i]));
        }
        CHECK(dmu < 1e-12);
        CHECK(dvar < 1e-12);
        CHECK(dcov < 1e-12);
    }
}

TEST_CASE("ssim scale: perfect, scaled, and all-zero cases") {
    const GaussianWindow win = gaussian_window(5, 1.0);
    std::mt19937_64 rng(227);
    const Tensor x = testutil::random_tensor({16, 16}, rng, 0.1, 1.0);

    SsimScaleStats self = local_stats(x, x, win, 1);
    CHECK(ssim_scale(self, 1e-4, 9e-4, 4.5e-4) == doctest::Approx(1.0).epsilon(1e-9));

    const Tensor y = crowdkit::scale(x, 2.0);
    SsimScaleStats doubled = local_stats(x, y, win, 1);
    const double s = ssim_scale(doubled, 1e-4, 9e-4, 4.5e-4);
    CHECK(s < 1.0);
    for (std::size_t i = 0; i < doubled.lum.numel(); ++i) {
        CHECK(doubled.lum[i] < 1.0 + 1e-12);
        CHECK(doubled.con[i] < 1.0 + 1e-12);
        CHECK(doubled.str[i] == doctest::Approx(1.0).epsilon(1e-6));
    }

    const Tensor z({10, 10});
    SsimScaleStats zero = local_stats(z, z, win, 1);
    CHECK(ssim_scale(zero, 1e-4, 9e-4, 4.5e-4) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("dms-ssim loss: identity, oracle equality, symmetry, bounds") {
    const DmsSsimConfig cfg = DmsSsimConfig::defaults();
    std::mt19937_64 rng(229);

    SUBCASE("X == Y gives zero loss and unit per-scale values") {
        const Tensor x = testutil::random_tensor({48, 48}, rng, 0.0, 1.0);
        const DmsSsimResult r = dms_ssim_loss(x, x, cfg);
        CHECK(std::abs(r.loss) < 1e-9);
        REQUIRE(r.per_scale.size() == 5);
        for (double s : r.per_scale) CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
    }
    SUBCASE("matches the from-scratch nested-loop oracle") {
        for (int trial = 0; trial < 3; ++trial) {
            const Tensor x = testutil::random_tensor({48, 48}, rng, 0.0, 1.0);
            const Tensor y = testutil::random_tensor({48, 48}, rng, 0.0, 1.0);
            std::vector<double> oracle_scales;
            const double want = oracle_dms_ssim_loss(x, y, cfg, &oracle_scales);
            const DmsSsimResult got = dms_ssim_loss(x, y, cfg);
            CHECK(std::abs(got.loss - want) < 1e-9);
            for (std::size_t i = 0; i < oracle_scales.size(); ++i)
                CHECK(std::abs(got.per_scale[i] - oracle_scales[i]) < 1e-9);
        }
    }
    SUBCASE("m=1 equals plain single-scale SSIM") {
        DmsSsimConfig single;
        single.m = 1;
        single.dilations = {1};
        single.alphas = {1.0};
        const Tensor x = testutil::random_tensor({24, 24}, rng, 0.0, 1.0);
        const Tensor y = testutil::random_tensor({24, 24}, rng, 0.0, 1.0);
        const double want = oracle_dms_ssim_loss(x, y, single);
        const DmsSsimResult got = dms_ssim_loss(x, y, single);
        CHECK(std::abs(got.loss - want) < 1e-12);
    }
    SUBCASE("symmetry and bounds") {
        for (int trial = 0; trial < 5; ++trial) {
            const Tensor x = testutil::random_tensor({32, 32}, rng, -0.5, 1.0);
            const Tensor y = testutil::random_tensor({32, 32}, rng, -0.5, 1.0);
            const DmsSsimResult ab = dms_ssim_loss(x, y, cfg);
            const DmsSsimResult ba = dms_ssim_loss(y, x, cfg);
            CHECK(std::abs(ab.loss - ba.loss) < 1e-12);
            CHECK(ab.loss >= -1e-12);
            for (double s : ab.per_scale) CHECK(s <= 1.0 + 1e-12);
        }
    }
    SUBCASE("tape and plain paths agree") {
        const Tensor x = testutil::random_tensor({32, 32}, rng, 0.0, 1.0);
        const Tensor y = testutil::random_tensor({32, 32}, rng, 0.0, 1.0);
        Tape t;
        Var loss = dms_ssim_loss(t, t.constant(x), t.constant(y), cfg);
        CHECK(std::abs(t.value(loss).value() - dms_ssim_loss(x, y, cfg).loss) < 1e-12);
    }
    SUBCASE("too-small maps are rejected with the minimum size") {
        CHECK(min_map_size(cfg) == 19);
        CHECK_THROWS_WITH_AS(dms_ssim_loss(Tensor({8, 8}), Tensor({8, 8}), cfg),
                             doctest::Contains("19"), ShapeError);
        CHECK_THROWS_AS(dms_ssim_loss(Tensor({32, 32}), Tensor({16, 16}), cfg), ShapeError);
    }
}

TEST_CASE("dms-ssim gradient: stationary point, finite differences, analytic oracle") {
    const DmsSsimConfig cfg = DmsSsimConfig::defaults();
    std::mt19937_64 rng(233);

    SUBCASE("gradient vanishes at X == Y") {
        const Tensor x = testutil::random_tensor({24, 24}, rng, 0.0, 1.0);
        const Tensor g = dms_ssim_grad(x, x, cfg);
        CHECK(g.abs_max() < 1e-6);
    }
    SUBCASE("matches central finite differences on a 32x32 pair") {
        const Tensor x = testutil::random_tensor({32, 32}, rng, 0.0, 1.0);
        const Tensor y = testutil::random_tensor({32, 32}, rng, 0.0, 1.0);
        const Tensor analytic = dms_ssim_grad(x, y, cfg);
        const Tensor fd = testutil::finite_diff(
            x, [&](const Tensor& probe) { return dms_ssim_loss(probe, y, cfg).loss; });
        CHECK(testutil::max_rel_err(analytic, fd) < 1e-4);
    }
    SUBCASE("sampled finite differences across sizes up to 96") {
        for (int size : {48, 96}) {
            const Tensor x = testutil::random_tensor({size, size}, rng, 0.0, 1.0);
            const Tensor y = testutil::random_tensor({size, size}, rng, 0.0, 1.0);
            const Tensor analytic = dms_ssim_grad(x, y, cfg);
            std::uniform_int_distribution<std::size_t> pick(0, x.numel() - 1);
            double max_rel = 0.0, gmax = analytic.abs_max();
            Tensor probe = x;
            for (int k = 0; k < 16; ++k) {
                const std::size_t i = pick(rng);
                const double h = 1e-5;
                probe[i] = x[i] + h;
                const double up = dms_ssim_loss(probe, y, cfg).loss;
                probe[i] = x[i] - h;
                const double down = dms_ssim_loss(probe, y, cfg).loss;
                probe[i] = x[i];
                const double fd = (up - down) / (2.0 * h);
                max_rel = std::max(max_rel, std::abs(analytic[i] - fd) / (std::abs(fd) + 1e-3 * gmax));
            }
            CHECK(max_rel < 1e-4);
        }
    }
    SUBCASE("m=1 matches the analytic single-scale oracle") {
        DmsSsimConfig single;
        single.m = 1;
        single.dilations = {1};
        single.alphas = {1.0};
        const Tensor x = testutil::random_tensor({20, 20}, rng, 0.0, 1.0);
        const Tensor y = testutil::random_tensor({20, 20}, rng, 0.0, 1.0);
        const Tensor got = dms_ssim_grad(x, y, single);
        const Tensor want = oracle_single_scale_grad(x, y, single.c1, single.c2, single.c3);
        CHECK(testutil::max_abs_diff(got, want) < 1e-8);
    }
}

TEST_CASE("receptive fields reproduce the published table") {
    CHECK(receptive_fields(5, {1, 2, 3, 6, 9}) == std::vector<int>{5, 13, 25, 49, 85});
    CHECK(receptive_fields(5, {1, 1, 1, 1, 1}) == std::vector<int>{5, 9, 13, 17, 21});
    CHECK(receptive_fields(1, {1, 5, 9}) == std::vector<int>{1, 1, 1});
    CHECK_THROWS_AS(receptive_fields(4, {1}), ShapeError);
}

TEST_CASE("dilation widens sensitivity to smooth large-blob discrepancies") {
    // fixed fixture: a single wide blob pair differing by a count factor in
    // a smooth region; the dilated config must see a larger loss than the
    // undilated one.
    const int n = 64;
    Tensor x({n, n}), y({n, n});
    const double sigma = 10.0;
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            const double dy = i - 31.5, dx = j - 31.5;
            const double g = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
            y.at(i, j) = g;
            x.at(i, j) = 1.4 * g;
        }
    }
    DmsSsimConfig dilated = DmsSsimConfig::defaults();
    DmsSsimConfig undilated = DmsSsimConfig::defaults();
    undilated.dilations = {1, 1, 1, 1, 1};
    const double loss_dilated = dms_ssim_loss(x, y, dilated).loss;
    const double loss_undilated = dms_ssim_loss(x, y, undilated).loss;
    CHECK(loss_dilated > loss_undilated);
}

TEST_CASE("config validation and JSON round-trip") {
    DmsSsimConfig cfg = DmsSsimConfig::defaults();
    cfg.validate();
    double alpha_sum = 0.0;
    for (double a : cfg.alphas) alpha_sum += a;
    CHECK(std::abs(alpha_sum - 1.0) < 1e-12);

    const DmsSsimConfig back = DmsSsimConfig::from_json(cfg.to_json());
    CHECK(back.m == cfg.m);
    CHECK(back.dilations == cfg.dilations);
    CHECK(back.alphas == cfg.alphas);
    CHECK(back.c1 == cfg.c1);
    CHECK(back.c3 == cfg.c3);

    const DmsSsimConfig uni = DmsSsimConfig::uniform(3, {1, 2, 4});
    CHECK(uni.alphas.size() == 3);
    uni.validate();

    DmsSsimConfig bad = cfg;
    bad.alphas[0] += 0.5;
    CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("sum"), ShapeError);
    bad = cfg;
    bad.dilations.pop_back();
    CHECK_THROWS_AS(bad.validate(), ShapeError);
    CHECK_THROWS_AS(DmsSsimConfig::from_json("{"), crowdkit::FormatError);
}
