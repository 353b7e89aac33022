#pragma once

#include <string>
#include <vector>

#include "crowdkit/tape.hpp"
#include "crowdkit/tensor.hpp"

namespace crowdkit::ssim {

/// Normalized 2-D Gaussian filter window; weights sum to 1 and are
/// symmetric under reflection of offsets.
struct GaussianWindow {
    int size = 5;
    double std_dev = 1.0;
    Tensor weights;  // [size, size]
};

GaussianWindow gaussian_window(int size, double std_dev);

/// Configuration of the dilated multiscale structural-similarity measure:
/// m filtering scales, one dilation per scale, importance weights alphas
/// (summing to 1), and stability constants c1/c2/c3.
struct DmsSsimConfig {
    int m = 5;
    std::vector<int> dilations{1, 2, 3, 6, 9};
    std::vector<double> alphas;
    double c1 = 1e-4;
    double c2 = 9e-4;
    double c3 = 4.5e-4;

    // m = 5, dilations 1,2,3,6,9, the canonical multiscale alphas.
    static DmsSsimConfig defaults();
    // Same structure with uniform alphas 1/m.
    static DmsSsimConfig uniform(int m, std::vector<int> dilations);

    void validate() const;
    std::string to_json() const;
    static DmsSsimConfig from_json(const std::string& text);
};

// Importance weights from the standard multiscale SSIM reference,
// normalized to sum exactly 1 (defined for m == 5).
std::vector<double> canonical_alphas(int m);

/// Receptive-field sizes after each filtering layer: rf_i grows by
/// dilation_i * (window_size - 1) per layer.
std::vector<int> receptive_fields(int window_size, const std::vector<int>& dilations);

/// Smallest admissible map side for a config: reflect padding of the most
/// dilated window requires min(H,W) >= 1 + max_dilation * (window-1)/2.
int min_map_size(const DmsSsimConfig& cfg);
int min_map_size_for(int window_size, int dilation);

/// Dilated filtering of a map with a normalized window: same-size output
/// via reflect padding. Output(p) = sum_o w(o) * input(p + dilation*o).
Tensor pyramid_filter(const Tensor& map, const GaussianWindow& window, int dilation);

/// Local first and second moments of a map pair at one scale, all filtered
/// with the same window and dilation. Variances are clamped at 0. The
/// lum/con/str comparison maps are filled by ssim_scale.
struct SsimScaleStats {
    Tensor mu_x, mu_y;      // local means ([H,W])
    Tensor var_x, var_y;    // local variances
    Tensor cov_xy;          // local covariance
    Tensor lum, con, str;   // comparison maps
};

SsimScaleStats local_stats(const Tensor& x, const Tensor& y, const GaussianWindow& window, int dilation);

/// Fills the luminance/contrast/structure maps of `stats` and returns the
/// spatial mean of their pointwise product.
double ssim_scale(SsimScaleStats& stats, double c1, double c2, double c3);

struct DmsSsimResult {
    double loss = 0.0;               // 1 - dms_ssim
    double dms_ssim = 0.0;
    std::vector<double> per_scale;   // per-scale SSIM before clamping
    int clamped_scales = 0;          // scales clamped to the 1e-6 floor
};

DmsSsimResult dms_ssim_loss(const Tensor& x0, const Tensor& y0, const DmsSsimConfig& cfg);

/// dLoss/dX0 by reverse sweep; matches central finite differences.
Tensor dms_ssim_grad(const Tensor& x0, const Tensor& y0, const DmsSsimConfig& cfg);

/// Tape form for composing the loss into larger differentiable programs.
/// x0 and y0 are rank-2 [H,W] nodes.
Var dms_ssim_loss(Tape& t, Var x0, Var y0, const DmsSsimConfig& cfg,
                  std::vector<Var>* per_scale = nullptr);

}  // namespace crowdkit::ssim
