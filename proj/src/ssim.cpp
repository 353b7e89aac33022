#include "crowdkit/ssim.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

namespace crowdkit::ssim {

using nlohmann::json;

namespace {
constexpr double kSsimFloor = 1e-6;  // floor before fractional exponentiation
}

GaussianWindow gaussian_window(int size, double std_dev) {
    if (size < 1 || size % 2 == 0)
        throw ShapeError("gaussian_window: size must be odd and >= 1, got " + std::to_string(size));
    if (!(std_dev > 0.0))
        throw ShapeError("gaussian_window: std must be positive, got " + std::to_string(std_dev));
    GaussianWindow w;
    w.size = size;
    w.std_dev = std_dev;
    w.weights = Tensor({size, size});
    const int half = size / 2;
    const double inv = 1.0 / (2.0 * std_dev * std_dev);
    double total = 0.0;
    for (int dy = -half; dy <= half; ++dy) {
        for (int dx = -half; dx <= half; ++dx) {
            const double g = std::exp(-(dx * dx + dy * dy) * inv);
            w.weights.at(dy + half, dx + half) = g;
            total += g;
        }
    }
    for (std::size_t i = 0; i < w.weights.numel(); ++i) w.weights[i] /= total;
    return w;
}

std::vector<double> canonical_alphas(int m) {
    if (m != 5) throw ShapeError("canonical alphas are defined for m == 5, got m = " + std::to_string(m));
    std::vector<double> a{0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
    double s = 0.0;
    for (double v : a) s += v;
    for (double& v : a) v /= s;
    return a;
}

DmsSsimConfig DmsSsimConfig::defaults() {
    DmsSsimConfig cfg;
    cfg.alphas = canonical_alphas(cfg.m);
    return cfg;
}

DmsSsimConfig DmsSsimConfig::uniform(int m, std::vector<int> dilations) {
    DmsSsimConfig cfg;
    cfg.m = m;
    cfg.dilations = std::move(dilations);
    cfg.alphas.assign(static_cast<std::size_t>(m), 1.0 / static_cast<double>(m));
    cfg.validate();
    return cfg;
}

void DmsSsimConfig::validate() const {
    if (m < 1) throw ShapeError("DmsSsimConfig: m must be >= 1, got " + std::to_string(m));
    if (static_cast<int>(dilations.size()) != m)
        throw ShapeError("DmsSsimConfig: " + std::to_string(dilations.size()) + " dilations for m = " +
                         std::to_string(m));
    if (static_cast<int>(alphas.size()) != m)
        throw ShapeError("DmsSsimConfig: " + std::to_string(alphas.size()) + " alphas for m = " +
                         std::to_string(m));
    for (int d : dilations)
        if (d < 1) throw ShapeError("DmsSsimConfig: dilation must be >= 1, got " + std::to_string(d));
    double s = 0.0;
    for (double a : alphas) {
        if (!(a > 0.0)) throw ShapeError("DmsSsimConfig: alphas must be positive");
        s += a;
    }
    if (std::abs(s - 1.0) > 1e-9)
        throw ShapeError("DmsSsimConfig: alphas sum to " + std::to_string(s) + ", expected 1");
    if (!(c1 > 0.0) || !(c2 > 0.0) || !(c3 > 0.0))
        throw ShapeError("DmsSsimConfig: stability constants must be positive");
}

std::string DmsSsimConfig::to_json() const {
    json j;
    j["m"] = m;
    j["dilations"] = dilations;
    j["alphas"] = alphas;
    j["c1"] = c1;
    j["c2"] = c2;
    j["c3"] = c3;
    return j.dump(2);
}

DmsSsimConfig DmsSsimConfig::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw FormatError(std::string("DmsSsimConfig: invalid JSON: ") + e.what(), e.byte);
    }
    DmsSsimConfig cfg = defaults();
    try {
        if (j.contains("m")) cfg.m = j["m"].get<int>();
        if (j.contains("dilations")) cfg.dilations = j["dilations"].get<std::vector<int>>();
        if (j.contains("alphas")) cfg.alphas = j["alphas"].get<std::vector<double>>();
        else if (cfg.m != 5) cfg.alphas.assign(static_cast<std::size_t>(cfg.m), 1.0 / cfg.m);
        if (j.contains("c1")) cfg.c1 = j["c1"].get<double>();
        if (j.contains("c2")) cfg.c2 = j["c2"].get<double>();
        if (j.contains("c3")) cfg.c3 = j["c3"].get<double>();
    } catch (const json::exception& e) {
        throw FormatError(std::string("DmsSsimConfig: ") + e.what(), 0);
    }
    cfg.validate();
    return cfg;
}

std::vector<int> receptive_fields(int window_size, const std::vector<int>& dilations) {
    if (window_size < 1 || window_size % 2 == 0)
        throw ShapeError("receptive_fields: window size must be odd, got " + std::to_string(window_size));
    std::vector<int> rf;
    rf.reserve(dilations.size());
    int acc = 1;
    for (int d : dilations) {
        acc += d * (window_size - 1);
        rf.push_back(acc);
    }
    return rf;
}

int min_map_size_for(int window_size, int dilation) {
    return 1 + dilation * (window_size - 1) / 2;
}

int min_map_size(const DmsSsimConfig& cfg) {
    int max_d = 1;
    for (int d : cfg.dilations) max_d = std::max(max_d, d);
    return min_map_size_for(5, max_d);
}

namespace {

void check_map(const Tensor& map, const char* op) {
    if (map.rank() != 2)
        throw ShapeError(std::string(op) + ": map must be rank 2 [H,W], got " + map.shape_str());
}

void check_filter_size(const Tensor& map, int window_size, int dilation, const char* op) {
    const int need = min_map_size_for(window_size, dilation);
    if (map.dim(0) < need || map.dim(1) < need)
        throw ShapeError(std::string(op) + ": map " + std::to_string(map.dim(0)) + "x" +
                         std::to_string(map.dim(1)) + " is smaller than the minimum " +
                         std::to_string(need) + "x" + std::to_string(need) + " for dilation " +
                         std::to_string(dilation) + " (" + std::to_string(window_size) + "x" +
                         std::to_string(window_size) + " window)");
}

ConvSpec filter_spec(const GaussianWindow& w, int dilation) {
    return ConvSpec::same(w.size, dilation, Padding::kReflect);
}

Tensor window_as_kernel(const GaussianWindow& w) {
    return Tensor({1, 1, w.size, w.size},
                  std::vector<double>(w.weights.data(), w.weights.data() + w.weights.numel()));
}

Tensor filter2d(const Tensor& map, const GaussianWindow& w, int dilation) {
    const Tensor in({1, map.dim(0), map.dim(1)},
                    std::vector<double>(map.data(), map.data() + map.numel()));
    Tensor out = conv2d(in, window_as_kernel(w), nullptr, filter_spec(w, dilation));
    return Tensor({map.dim(0), map.dim(1)},
                  std::vector<double>(out.data(), out.data() + out.numel()));
}

}  // namespace

Tensor pyramid_filter(const Tensor& map, const GaussianWindow& window, int dilation) {
    check_map(map, "pyramid_filter");
    if (dilation < 1)
        throw ShapeError("pyramid_filter: dilation must be >= 1, got " + std::to_string(dilation));
    check_filter_size(map, window.size, dilation, "pyramid_filter");
    return filter2d(map, window, dilation);
}

SsimScaleStats local_stats(const Tensor& x, const Tensor& y, const GaussianWindow& window, int dilation) {
    check_map(x, "local_stats");
    check_map(y, "local_stats");
    if (!x.same_shape(y))
        throw ShapeError("local_stats: map shapes " + x.shape_str() + " and " + y.shape_str() +
                         " do not match");
    check_filter_size(x, window.size, dilation, "local_stats");

    SsimScaleStats s;
    s.mu_x = filter2d(x, window, dilation);
    s.mu_y = filter2d(y, window, dilation);
    // var = E[v^2] - mu^2, identical to the weighted squared deviation
    // because the window sums to 1; clamped against rounding.
    Tensor ex2 = filter2d(mul(x, x), window, dilation);
    Tensor ey2 = filter2d(mul(y, y), window, dilation);
    Tensor exy = filter2d(mul(x, y), window, dilation);
    s.var_x = Tensor(x.shape());
    s.var_y = Tensor(x.shape());
    s.cov_xy = Tensor(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) {
        s.var_x[i] = std::max(ex2[i] - s.mu_x[i] * s.mu_x[i], 0.0);
        s.var_y[i] = std::max(ey2[i] - s.mu_y[i] * s.mu_y[i], 0.0);
        s.cov_xy[i] = exy[i] - s.mu_x[i] * s.mu_y[i];
    }
    return s;
}

double ssim_scale(SsimScaleStats& s, double c1, double c2, double c3) {
    const std::size_t n = s.mu_x.numel();
    s.lum = Tensor(s.mu_x.shape());
    s.con = Tensor(s.mu_x.shape());
    s.str = Tensor(s.mu_x.shape());
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double mx = s.mu_x[i], my = s.mu_y[i];
        const double sx = std::sqrt(s.var_x[i]), sy = std::sqrt(s.var_y[i]);
        const double lum = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
        const double con = (2.0 * sx * sy + c2) / (s.var_x[i] + s.var_y[i] + c2);
        const double str = (s.cov_xy[i] + c3) / (sx * sy + c3);
        s.lum[i] = lum;
        s.con[i] = con;
        s.str[i] = str;
        total += lum * con * str;
    }
    return total / static_cast<double>(n);
}

DmsSsimResult dms_ssim_loss(const Tensor& x0, const Tensor& y0, const DmsSsimConfig& cfg) {
    cfg.validate();
    check_map(x0, "dms_ssim_loss");
    check_map(y0, "dms_ssim_loss");
    if (!x0.same_shape(y0))
        throw ShapeError("dms_ssim_loss: map shapes " + x0.shape_str() + " and " + y0.shape_str() +
                         " do not match");
    const int need = min_map_size(cfg);
    if (x0.dim(0) < need || x0.dim(1) < need)
        throw ShapeError("dms_ssim_loss: map " + std::to_string(x0.dim(0)) + "x" +
                         std::to_string(x0.dim(1)) + " is smaller than the minimum admissible size " +
                         std::to_string(need) + "x" + std::to_string(need));

    const GaussianWindow window = gaussian_window(5, 1.0);
    DmsSsimResult result;
    result.per_scale.reserve(static_cast<std::size_t>(cfg.m));
    Tensor x = x0, y = y0;
    double prod = 1.0;
    for (int i = 0; i < cfg.m; ++i) {
        const int r = cfg.dilations[static_cast<std::size_t>(i)];
        SsimScaleStats stats = local_stats(x, y, window, r);
        const double s = ssim_scale(stats, cfg.c1, cfg.c2, cfg.c3);
        result.per_scale.push_back(s);
        double base = s;
        if (base < kSsimFloor) {
            base = kSsimFloor;
            ++result.clamped_scales;
        }
        prod *= std::pow(base, cfg.alphas[static_cast<std::size_t>(i)]);
        if (i + 1 < cfg.m) {
            x = std::move(stats.mu_x);
            y = std::move(stats.mu_y);
        }
    }
    result.dms_ssim = prod;
    result.loss = 1.0 - prod;
    return result;
}

Var dms_ssim_loss(Tape& t, Var x0, Var y0, const DmsSsimConfig& cfg, std::vector<Var>* per_scale) {
    cfg.validate();
    const Tensor& xv = t.value(x0);
    const Tensor& yv = t.value(y0);
    check_map(xv, "dms_ssim_loss");
    check_map(yv, "dms_ssim_loss");
    if (!xv.same_shape(yv))
        throw ShapeError("dms_ssim_loss: map shapes " + xv.shape_str() + " and " + yv.shape_str() +
                         " do not match");
    const int need = min_map_size(cfg);
    if (xv.dim(0) < need || xv.dim(1) < need)
        throw ShapeError("dms_ssim_loss: map " + std::to_string(xv.dim(0)) + "x" +
                         std::to_string(xv.dim(1)) + " is smaller than the minimum admissible size " +
                         std::to_string(need) + "x" + std::to_string(need));

    const int h = xv.dim(0), w = xv.dim(1);
    const GaussianWindow window = gaussian_window(5, 1.0);
    const Var kernel = t.constant(window_as_kernel(window));

    Var x = reshape(t, x0, {1, h, w});
    Var y = reshape(t, y0, {1, h, w});
    Var prod{};
    for (int i = 0; i < cfg.m; ++i) {
        const int r = cfg.dilations[static_cast<std::size_t>(i)];
        const ConvSpec spec = filter_spec(window, r);
        Var mu_x = conv2d(t, x, kernel, std::nullopt, spec);
        Var mu_y = conv2d(t, y, kernel, std::nullopt, spec);
        Var ex2 = conv2d(t, mul(t, x, x), kernel, std::nullopt, spec);
        Var ey2 = conv2d(t, mul(t, y, y), kernel, std::nullopt, spec);
        Var exy = conv2d(t, mul(t, x, y), kernel, std::nullopt, spec);
        Var mx2 = mul(t, mu_x, mu_x);
        Var my2 = mul(t, mu_y, mu_y);
        Var var_x = clamp_min(t, sub(t, ex2, mx2), 0.0);
        Var var_y = clamp_min(t, sub(t, ey2, my2), 0.0);
        Var cov = sub(t, exy, mul(t, mu_x, mu_y));
        Var lum = divide(t, add_const(t, scale(t, mul(t, mu_x, mu_y), 2.0), cfg.c1),
                         add_const(t, add(t, mx2, my2), cfg.c1));
        Var sx = sqrt(t, var_x);
        Var sy = sqrt(t, var_y);
        Var sxsy = mul(t, sx, sy);
        Var con = divide(t, add_const(t, scale(t, sxsy, 2.0), cfg.c2),
                         add_const(t, add(t, var_x, var_y), cfg.c2));
        Var str = divide(t, add_const(t, cov, cfg.c3), add_const(t, sxsy, cfg.c3));
        Var scale_ssim = mean(t, mul(t, mul(t, lum, con), str));
        if (per_scale) per_scale->push_back(scale_ssim);
        Var term = pow_const(t, clamp_min(t, scale_ssim, kSsimFloor),
                             cfg.alphas[static_cast<std::size_t>(i)]);
        prod = (i == 0) ? term : mul(t, prod, term);
        x = mu_x;
        y = mu_y;
    }
    return add_const(t, scale(t, prod, -1.0), 1.0);
}

Tensor dms_ssim_grad(const Tensor& x0, const Tensor& y0, const DmsSsimConfig& cfg) {
    Tape t;
    Var x = t.leaf(x0);
    Var y = t.constant(y0);
    Var loss = dms_ssim_loss(t, x, y, cfg);
    t.backward(loss);
    return t.grad(x);
}

}  // namespace crowdkit::ssim
