#pragma once

// From-scratch nested-loop evaluation of the dilated multiscale structural
// similarity, kept deliberately independent of the library: plain vectors,
// direct loops, reflect indexing, literal weighted-deviation variance.

#include <cmath>
#include <vector>

#include "crowdkit/ssim.hpp"
#include "crowdkit/tensor.hpp"

namespace ssim_oracle {

struct Grid {
    int h = 0, w = 0;
    std::vector<double> v;
    Grid() = default;
    Grid(int h_, int w_) : h(h_), w(w_), v(static_cast<std::size_t>(h_) * w_, 0.0) {}
    double& at(int y, int x) { return v[static_cast<std::size_t>(y) * w + x]; }
    double at(int y, int x) const { return v[static_cast<std::size_t>(y) * w + x]; }
};

inline int reflect(int i, int n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
    return i;
}

inline std::vector<std::vector<double>> oracle_window(int size, double stddev) {
    std::vector<std::vector<double>> w(static_cast<std::size_t>(size),
                                       std::vector<double>(static_cast<std::size_t>(size)));
    const int half = size / 2;
    double total = 0.0;
    for (int dy = -half; dy <= half; ++dy)
        for (int dx = -half; dx <= half; ++dx) {
            const double g = std::exp(-(dx * dx + dy * dy) / (2.0 * stddev * stddev));
            w[static_cast<std::size_t>(dy + half)][static_cast<std::size_t>(dx + half)] = g;
            total += g;
        }
    for (auto& row : w)
        for (double& x : row) x /= total;
    return w;
}

inline Grid oracle_filter(const Grid& g, const std::vector<std::vector<double>>& win, int r) {
    const int half = static_cast<int>(win.size()) / 2;
    Grid out(g.h, g.w);
    for (int y = 0; y < g.h; ++y)
        for (int x = 0; x < g.w; ++x) {
            double acc = 0.0;
            for (int dy = -half; dy <= half; ++dy)
                for (int dx = -half; dx <= half; ++dx)
                    acc += win[static_cast<std::size_t>(dy + half)][static_cast<std::size_t>(dx + half)] *
                           g.at(reflect(y + r * dy, g.h), reflect(x + r * dx, g.w));
            out.at(y, x) = acc;
        }
    return out;
}

struct OracleScale {
    Grid mu_x, mu_y, var_x, var_y, cov;
    double ssim = 0.0;
};

inline OracleScale oracle_scale(const Grid& X, const Grid& Y, const std::vector<std::vector<double>>& win,
                                int r, double c1, double c2, double c3) {
    OracleScale s;
    s.mu_x = oracle_filter(X, win, r);
    s.mu_y = oracle_filter(Y, win, r);
    s.var_x = Grid(X.h, X.w);
    s.var_y = Grid(X.h, X.w);
    s.cov = Grid(X.h, X.w);
    const int half = static_cast<int>(win.size()) / 2;
    double total = 0.0;
    for (int y = 0; y < X.h; ++y) {
        for (int x = 0; x < X.w; ++x) {
            double vx = 0.0, vy = 0.0, cxy = 0.0;
            for (int dy = -half; dy <= half; ++dy) {
                for (int dx = -half; dx <= half; ++dx) {
                    const double wgt =
                        win[static_cast<std::size_t>(dy + half)][static_cast<std::size_t>(dx + half)];
                    const double xs = X.at(reflect(y + r * dy, X.h), reflect(x + r * dx, X.w));
                    const double ys = Y.at(reflect(y + r * dy, Y.h), reflect(x + r * dx, Y.w));
                    vx += wgt * (xs - s.mu_x.at(y, x)) * (xs - s.mu_x.at(y, x));
                    vy += wgt * (ys - s.mu_y.at(y, x)) * (ys - s.mu_y.at(y, x));
                    cxy += wgt * (xs - s.mu_x.at(y, x)) * (ys - s.mu_y.at(y, x));
                }
            }
            s.var_x.at(y, x) = vx;
            s.var_y.at(y, x) = vy;
            s.cov.at(y, x) = cxy;
            const double mx = s.mu_x.at(y, x), my = s.mu_y.at(y, x);
            const double lum = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
            const double con = (2.0 * std::sqrt(vx) * std::sqrt(vy) + c2) / (vx + vy + c2);
            const double str = (cxy + c3) / (std::sqrt(vx) * std::sqrt(vy) + c3);
            total += lum * con * str;
        }
    }
    s.ssim = total / (static_cast<double>(X.h) * X.w);
    return s;
}

inline double oracle_dms_ssim_loss(const crowdkit::Tensor& x0, const crowdkit::Tensor& y0,
                                   const crowdkit::ssim::DmsSsimConfig& cfg,
                                   std::vector<double>* per_scale = nullptr) {
    Grid X(x0.dim(0), x0.dim(1)), Y(y0.dim(0), y0.dim(1));
    for (std::size_t i = 0; i < x0.numel(); ++i) {
        X.v[i] = x0[i];
        Y.v[i] = y0[i];
    }
    const auto win = oracle_window(5, 1.0);
    double prod = 1.0;
    for (int i = 0; i < cfg.m; ++i) {
        OracleScale s = oracle_scale(X, Y, win, cfg.dilations[static_cast<std::size_t>(i)],
                                     cfg.c1, cfg.c2, cfg.c3);
        if (per_scale) per_scale->push_back(s.ssim);
        prod *= std::pow(std::max(s.ssim, 1e-6), cfg.alphas[static_cast<std::size_t>(i)]);
        X = std::move(s.mu_x);
        Y = std::move(s.mu_y);
    }
    return 1.0 - prod;
}

// Analytic gradient of the single-scale (m = 1, alpha = 1) loss.
inline crowdkit::Tensor oracle_single_scale_grad(const crowdkit::Tensor& x0, const crowdkit::Tensor& y0,
                                                 double c1, double c2, double c3) {
    const int H = x0.dim(0), W = x0.dim(1);
    Grid X(H, W), Y(H, W);
    for (std::size_t i = 0; i < x0.numel(); ++i) {
        X.v[i] = x0[i];
        Y.v[i] = y0[i];
    }
    const auto win = oracle_window(5, 1.0);
    const OracleScale s = oracle_scale(X, Y, win, 1, c1, c2, c3);
    crowdkit::Tensor grad({H, W});
    const double inv_n = 1.0 / (static_cast<double>(H) * W);
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            const double mx = s.mu_x.at(y, x), my = s.mu_y.at(y, x);
            const double vx = s.var_x.at(y, x), vy = s.var_y.at(y, x);
            const double sx = std::sqrt(vx), sy = std::sqrt(vy);
            const double cxy = s.cov.at(y, x);
            const double lum_n = 2.0 * mx * my + c1, lum_d = mx * mx + my * my + c1;
            const double con_n = 2.0 * sx * sy + c2, con_d = vx + vy + c2;
            const double str_n = cxy + c3, str_d = sx * sy + c3;
            const double L = lum_n / lum_d, C = con_n / con_d, S = str_n / str_d;
            const double dL_dmx = (2.0 * my * lum_d - lum_n * 2.0 * mx) / (lum_d * lum_d);
            const double dC_dvx = ((sy / sx) * con_d - con_n) / (con_d * con_d);
            const double dS_dvx = -str_n * (sy / (2.0 * sx)) / (str_d * str_d);
            const double dS_dcov = 1.0 / str_d;
            const double A = dL_dmx * C * S;
            const double B = L * dC_dvx * S + L * C * dS_dvx;
            const double D = L * C * dS_dcov;
            for (int dy = -2; dy <= 2; ++dy) {
                for (int dx = -2; dx <= 2; ++dx) {
                    const double wgt =
                        win[static_cast<std::size_t>(dy + 2)][static_cast<std::size_t>(dx + 2)];
                    const int qy = reflect(y + dy, H), qx = reflect(x + dx, W);
                    const double xq = X.at(qy, qx), yq = Y.at(qy, qx);
                    grad.at(qy, qx) -= inv_n * (A * wgt + B * 2.0 * wgt * (xq - mx) + D * wgt * (yq - my));
                }
            }
        }
    }
    return grad;
}

}  // namespace ssim_oracle
