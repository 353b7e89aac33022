#include "crowdkit/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>

namespace crowdkit {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConst = Eigen::Map<const RowMat>;
using OuterStride = Eigen::OuterStride<>;
using MapStride = Eigen::Map<RowMat, 0, OuterStride>;
using MapConstStride = Eigen::Map<const RowMat, 0, OuterStride>;

// im2col tile budget; keeps the column matrix L2-resident.
constexpr std::size_t kTileBytes = std::size_t{2} << 20;

inline int reflect_index(int i, int n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
    return i;
}

int tile_rows(int ckk, int out_w, int out_h) {
    const std::size_t per_row = static_cast<std::size_t>(ckk) * static_cast<std::size_t>(out_w) * sizeof(double);
    const int rows = per_row ? static_cast<int>(kTileBytes / per_row) : out_h;
    return std::clamp(rows, 1, out_h);
}

void check_positive(const ConvSpec& s) {
    if (s.dilation < 1) throw ShapeError("conv2d: dilation must be >= 1, got " + std::to_string(s.dilation));
    if (s.stride < 1) throw ShapeError("conv2d: stride must be >= 1, got " + std::to_string(s.stride));
    if (s.kernel_h < 1 || s.kernel_w < 1)
        throw ShapeError("conv2d: kernel must be >= 1x1, got " + std::to_string(s.kernel_h) + "x" + std::to_string(s.kernel_w));
    if (s.pad_top < 0 || s.pad_bottom < 0 || s.pad_left < 0 || s.pad_right < 0)
        throw ShapeError("conv2d: padding must be >= 0");
}

void check_conv_args(const Tensor& input, const Tensor& weights, const Tensor* bias, const ConvSpec& s) {
    check_positive(s);
    if (input.rank() != 3)
        throw ShapeError("conv2d: input must be rank 3 [C,H,W], got shape " + input.shape_str());
    if (weights.rank() != 4)
        throw ShapeError("conv2d: weights must be rank 4 [O,C,kh,kw], got shape " + weights.shape_str());
    if (weights.dim(1) != input.dim(0))
        throw ShapeError("conv2d: input has " + std::to_string(input.dim(0)) +
                         " channels but weights expect " + std::to_string(weights.dim(1)));
    if (weights.dim(2) != s.kernel_h || weights.dim(3) != s.kernel_w)
        throw ShapeError("conv2d: weights kernel " + std::to_string(weights.dim(2)) + "x" + std::to_string(weights.dim(3)) +
                         " does not match spec " + std::to_string(s.kernel_h) + "x" + std::to_string(s.kernel_w));
    if (bias && (bias->rank() != 1 || bias->dim(0) != weights.dim(0)))
        throw ShapeError("conv2d: bias must be rank 1 of size " + std::to_string(weights.dim(0)) +
                         ", got shape " + bias->shape_str());
    const int h = input.dim(1), w = input.dim(2);
    if (s.out_h(h) < 1 || s.out_w(w) < 1)
        throw ShapeError("conv2d: output would be empty for input " + input.shape_str());
    if (s.padding == Padding::kReflect) {
        if (s.pad_top > h - 1 || s.pad_bottom > h - 1)
            throw ShapeError("conv2d: reflect padding " + std::to_string(std::max(s.pad_top, s.pad_bottom)) +
                             " exceeds input height - 1 (" + std::to_string(h - 1) + ")");
        if (s.pad_left > w - 1 || s.pad_right > w - 1)
            throw ShapeError("conv2d: reflect padding " + std::to_string(std::max(s.pad_left, s.pad_right)) +
                             " exceeds input width - 1 (" + std::to_string(w - 1) + ")");
    }
}

// Fills cols[ckk x (rows*out_w)] with input patches for output rows
// [oy0, oy0+rows). Row copies are contiguous for stride 1.
void im2col_tile(const Tensor& in, const ConvSpec& s, int out_w, int oy0, int rows, double* cols) {
    const int C = in.dim(0), H = in.dim(1), W = in.dim(2);
    const int n = rows * out_w;
    const double* src = in.data();
    double* dst = cols;
    for (int c = 0; c < C; ++c) {
        for (int ky = 0; ky < s.kernel_h; ++ky) {
            for (int kx = 0; kx < s.kernel_w; ++kx, dst += n) {
                const int x_off = kx * s.dilation - s.pad_left;
                for (int t = 0; t < rows; ++t) {
                    int iy = (oy0 + t) * s.stride - s.pad_top + ky * s.dilation;
                    double* drow = dst + static_cast<std::size_t>(t) * out_w;
                    const bool row_oob = iy < 0 || iy >= H;
                    if (row_oob && s.padding == Padding::kZero) {
                        std::memset(drow, 0, sizeof(double) * out_w);
                        continue;
                    }
                    if (row_oob) iy = reflect_index(iy, H);
                    const double* srow = src + (static_cast<std::size_t>(c) * H + iy) * W;
                    if (s.stride == 1) {
                        int lo = std::clamp(-x_off, 0, out_w);
                        int hi = std::clamp(W - x_off, lo, out_w);
                        if (s.padding == Padding::kZero) {
                            if (lo > 0) std::memset(drow, 0, sizeof(double) * lo);
                            if (hi > lo) std::memcpy(drow + lo, srow + x_off + lo, sizeof(double) * (hi - lo));
                            if (hi < out_w) std::memset(drow + hi, 0, sizeof(double) * (out_w - hi));
                        } else {
                            for (int ox = 0; ox < lo; ++ox) drow[ox] = srow[reflect_index(ox + x_off, W)];
                            if (hi > lo) std::memcpy(drow + lo, srow + x_off + lo, sizeof(double) * (hi - lo));
                            for (int ox = hi; ox < out_w; ++ox) drow[ox] = srow[reflect_index(ox + x_off, W)];
                        }
                    } else {
                        for (int ox = 0; ox < out_w; ++ox) {
                            const int ix = ox * s.stride + x_off;
                            if (ix >= 0 && ix < W) drow[ox] = srow[ix];
                            else if (s.padding == Padding::kZero) drow[ox] = 0.0;
                            else drow[ox] = srow[reflect_index(ix, W)];
                        }
                    }
                }
            }
        }
    }
}

// Scatter-add of a column tile back into the input gradient.
void col2im_tile(const double* cols, const ConvSpec& s, int out_w, int oy0, int rows, Tensor& din) {
    const int C = din.dim(0), H = din.dim(1), W = din.dim(2);
    const int n = rows * out_w;
    const double* srcc = cols;
    for (int c = 0; c < C; ++c) {
        for (int ky = 0; ky < s.kernel_h; ++ky) {
            for (int kx = 0; kx < s.kernel_w; ++kx, srcc += n) {
                const int x_off = kx * s.dilation - s.pad_left;
                for (int t = 0; t < rows; ++t) {
                    int iy = (oy0 + t) * s.stride - s.pad_top + ky * s.dilation;
                    const double* srow = srcc + static_cast<std::size_t>(t) * out_w;
                    const bool row_oob = iy < 0 || iy >= H;
                    if (row_oob && s.padding == Padding::kZero) continue;
                    if (row_oob) iy = reflect_index(iy, H);
                    double* drow = din.data() + (static_cast<std::size_t>(c) * H + iy) * W;
                    if (s.stride == 1) {
                        int lo = std::clamp(-x_off, 0, out_w);
                        int hi = std::clamp(W - x_off, lo, out_w);
                        if (s.padding == Padding::kReflect) {
                            for (int ox = 0; ox < lo; ++ox) drow[reflect_index(ox + x_off, W)] += srow[ox];
                            for (int ox = hi; ox < out_w; ++ox) drow[reflect_index(ox + x_off, W)] += srow[ox];
                        }
                        for (int ox = lo; ox < hi; ++ox) drow[ox + x_off] += srow[ox];
                    } else {
                        for (int ox = 0; ox < out_w; ++ox) {
                            const int ix = ox * s.stride + x_off;
                            if (ix >= 0 && ix < W) drow[ix] += srow[ox];
                            else if (s.padding == Padding::kReflect) drow[reflect_index(ix, W)] += srow[ox];
                        }
                    }
                }
            }
        }
    }
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(op) + ": operand shapes " + a.shape_str() + " and " +
                         b.shape_str() + " do not match");
}

}  // namespace

ConvSpec ConvSpec::same(int kernel, int dilation, Padding mode) {
    if (kernel % 2 == 0) throw ShapeError("ConvSpec::same requires an odd kernel, got " + std::to_string(kernel));
    ConvSpec s;
    s.kernel_h = s.kernel_w = kernel;
    s.dilation = dilation;
    s.padding = mode;
    const int pad = dilation * (kernel - 1) / 2;
    s.pad_top = s.pad_bottom = s.pad_left = s.pad_right = pad;
    return s;
}

int ConvSpec::out_h(int in_h) const {
    return (in_h + pad_top + pad_bottom - dilation * (kernel_h - 1) - 1) / stride + 1;
}

int ConvSpec::out_w(int in_w) const {
    return (in_w + pad_left + pad_right - dilation * (kernel_w - 1) - 1) / stride + 1;
}

Tensor conv2d(const Tensor& input, const Tensor& weights, const Tensor* bias, const ConvSpec& s) {
    check_conv_args(input, weights, bias, s);
    const int H = input.dim(1), W = input.dim(2);
    const int O = weights.dim(0);
    const int oh = s.out_h(H), ow = s.out_w(W);
    const int ckk = input.dim(0) * s.kernel_h * s.kernel_w;
    Tensor out({O, oh, ow});

    const int tr = tile_rows(ckk, ow, oh);
    std::vector<double> cols(static_cast<std::size_t>(ckk) * tr * ow);
    MapConst wm(weights.data(), O, ckk);
    const std::ptrdiff_t out_stride = static_cast<std::ptrdiff_t>(oh) * ow;
    for (int oy0 = 0; oy0 < oh; oy0 += tr) {
        const int rows = std::min(tr, oh - oy0);
        const int n = rows * ow;
        im2col_tile(input, s, ow, oy0, rows, cols.data());
        MapConst cm(cols.data(), ckk, n);
        MapStride om(out.data() + static_cast<std::size_t>(oy0) * ow, O, n, OuterStride(out_stride));
        om.noalias() = wm * cm;
    }
    if (bias) {
        double* p = out.data();
        for (int o = 0; o < O; ++o) {
            const double b = (*bias)[static_cast<std::size_t>(o)];
            for (int i = 0; i < oh * ow; ++i) *p++ += b;
        }
    }
    return out;
}

void conv2d_grad_input_into(const Tensor& grad_out, const Tensor& weights, const ConvSpec& s,
                            Tensor& grad_input) {
    check_conv_args(grad_input, weights, nullptr, s);
    const int H = grad_input.dim(1), W = grad_input.dim(2);
    const int O = weights.dim(0);
    const int oh = s.out_h(H), ow = s.out_w(W);
    if (grad_out.rank() != 3 || grad_out.dim(0) != O || grad_out.dim(1) != oh || grad_out.dim(2) != ow)
        throw ShapeError("conv2d backward: grad shape " + grad_out.shape_str() + " does not match output");
    const int ckk = grad_input.dim(0) * s.kernel_h * s.kernel_w;

    const int tr = tile_rows(ckk, ow, oh);
    std::vector<double> dcols(static_cast<std::size_t>(ckk) * tr * ow);
    MapConst wm(weights.data(), O, ckk);
    const std::ptrdiff_t out_stride = static_cast<std::ptrdiff_t>(oh) * ow;
    for (int oy0 = 0; oy0 < oh; oy0 += tr) {
        const int rows = std::min(tr, oh - oy0);
        const int n = rows * ow;
        MapConstStride gm(grad_out.data() + static_cast<std::size_t>(oy0) * ow, O, n, OuterStride(out_stride));
        MapMat dm(dcols.data(), ckk, n);
        dm.noalias() = wm.transpose() * gm;
        col2im_tile(dcols.data(), s, ow, oy0, rows, grad_input);
    }
}

void conv2d_grad_weights_into(const Tensor& grad_out, const Tensor& input, const ConvSpec& s,
                              Tensor& grad_weights) {
    check_conv_args(input, grad_weights, nullptr, s);
    const int H = input.dim(1), W = input.dim(2);
    const int O = grad_weights.dim(0);
    const int oh = s.out_h(H), ow = s.out_w(W);
    if (grad_out.rank() != 3 || grad_out.dim(0) != O || grad_out.dim(1) != oh || grad_out.dim(2) != ow)
        throw ShapeError("conv2d backward: grad shape " + grad_out.shape_str() + " does not match output");
    const int ckk = input.dim(0) * s.kernel_h * s.kernel_w;

    const int tr = tile_rows(ckk, ow, oh);
    std::vector<double> cols(static_cast<std::size_t>(ckk) * tr * ow);
    MapMat dwm(grad_weights.data(), O, ckk);
    const std::ptrdiff_t out_stride = static_cast<std::ptrdiff_t>(oh) * ow;
    for (int oy0 = 0; oy0 < oh; oy0 += tr) {
        const int rows = std::min(tr, oh - oy0);
        const int n = rows * ow;
        im2col_tile(input, s, ow, oy0, rows, cols.data());
        MapConst cm(cols.data(), ckk, n);
        MapConstStride gm(grad_out.data() + static_cast<std::size_t>(oy0) * ow, O, n, OuterStride(out_stride));
        dwm.noalias() += gm * cm.transpose();
    }
}

void conv2d_grad_bias_into(const Tensor& grad_out, Tensor& grad_bias) {
    const int O = grad_out.dim(0);
    const std::size_t plane = grad_out.numel() / static_cast<std::size_t>(O);
    const double* g = grad_out.data();
    for (int o = 0; o < O; ++o) {
        double s = 0.0;
        for (std::size_t i = 0; i < plane; ++i) s += *g++;
        grad_bias[static_cast<std::size_t>(o)] += s;
    }
}

Tensor channel_map(const Tensor& weights, const Tensor& input, const Tensor* bias) {
    if (weights.rank() != 2)
        throw ShapeError("channel_map: weights must be rank 2 [O,C], got " + weights.shape_str());
    if (input.rank() != 3)
        throw ShapeError("channel_map: input must be rank 3 [C,H,W], got " + input.shape_str());
    const int O = weights.dim(0), C = weights.dim(1);
    if (input.dim(0) != C)
        throw ShapeError("channel_map: input has " + std::to_string(input.dim(0)) +
                         " channels but weights expect " + std::to_string(C));
    if (bias && (bias->rank() != 1 || bias->dim(0) != O))
        throw ShapeError("channel_map: bias must be rank 1 of size " + std::to_string(O));
    const int hw = input.dim(1) * input.dim(2);
    Tensor out({O, input.dim(1), input.dim(2)});
    MapConst wm(weights.data(), O, C);
    MapConst xm(input.data(), C, hw);
    MapMat om(out.data(), O, hw);
    om.noalias() = wm * xm;
    if (bias) {
        double* p = out.data();
        for (int o = 0; o < O; ++o) {
            const double b = (*bias)[static_cast<std::size_t>(o)];
            for (int i = 0; i < hw; ++i) *p++ += b;
        }
    }
    return out;
}

void channel_map_grad_input_into(const Tensor& grad_out, const Tensor& weights, Tensor& grad_input) {
    const int O = weights.dim(0), C = weights.dim(1);
    const int hw = grad_input.dim(1) * grad_input.dim(2);
    MapConst wm(weights.data(), O, C);
    MapConst gm(grad_out.data(), O, hw);
    MapMat dm(grad_input.data(), C, hw);
    dm.noalias() += wm.transpose() * gm;
}

void channel_map_grad_weights_into(const Tensor& grad_out, const Tensor& input, Tensor& grad_weights) {
    const int O = grad_weights.dim(0), C = grad_weights.dim(1);
    const int hw = input.dim(1) * input.dim(2);
    MapConst gm(grad_out.data(), O, hw);
    MapConst xm(input.data(), C, hw);
    MapMat dm(grad_weights.data(), O, C);
    dm.noalias() += gm * xm.transpose();
}

namespace {

struct LerpAxis {
    std::vector<int> i0, i1;
    std::vector<double> t;
};

LerpAxis lerp_axis(int in, int out) {
    LerpAxis a;
    a.i0.resize(static_cast<std::size_t>(out));
    a.i1.resize(static_cast<std::size_t>(out));
    a.t.resize(static_cast<std::size_t>(out));
    const double ratio = static_cast<double>(in) / static_cast<double>(out);
    for (int j = 0; j < out; ++j) {
        const double src = (j + 0.5) * ratio - 0.5;
        const double f = std::floor(src);
        int i0 = static_cast<int>(f);
        double t = src - f;
        int i1 = i0 + 1;
        i0 = std::clamp(i0, 0, in - 1);
        i1 = std::clamp(i1, 0, in - 1);
        a.i0[static_cast<std::size_t>(j)] = i0;
        a.i1[static_cast<std::size_t>(j)] = i1;
        a.t[static_cast<std::size_t>(j)] = t;
    }
    return a;
}

inline double lerp(double a, double b, double t) { return a + t * (b - a); }

}  // namespace

Tensor bilinear_resize(const Tensor& input, int out_h, int out_w) {
    if (input.rank() != 3)
        throw ShapeError("bilinear_resize: input must be rank 3 [C,H,W], got " + input.shape_str());
    const int C = input.dim(0), H = input.dim(1), W = input.dim(2);
    if (H < 1 || W < 1) throw ShapeError("bilinear_resize: empty input " + input.shape_str());
    if (out_h < 1 || out_w < 1)
        throw ShapeError("bilinear_resize: output size must be positive, got " +
                         std::to_string(out_h) + "x" + std::to_string(out_w));
    const LerpAxis ay = lerp_axis(H, out_h);
    const LerpAxis ax = lerp_axis(W, out_w);
    Tensor out({C, out_h, out_w});
    for (int c = 0; c < C; ++c) {
        const double* plane = input.data() + static_cast<std::size_t>(c) * H * W;
        double* op = out.data() + static_cast<std::size_t>(c) * out_h * out_w;
        for (int y = 0; y < out_h; ++y) {
            const double* r0 = plane + static_cast<std::size_t>(ay.i0[static_cast<std::size_t>(y)]) * W;
            const double* r1 = plane + static_cast<std::size_t>(ay.i1[static_cast<std::size_t>(y)]) * W;
            const double ty = ay.t[static_cast<std::size_t>(y)];
            for (int x = 0; x < out_w; ++x) {
                const int x0 = ax.i0[static_cast<std::size_t>(x)];
                const int x1 = ax.i1[static_cast<std::size_t>(x)];
                const double tx = ax.t[static_cast<std::size_t>(x)];
                const double top = lerp(r0[x0], r0[x1], tx);
                const double bot = lerp(r1[x0], r1[x1], tx);
                *op++ = lerp(top, bot, ty);
            }
        }
    }
    return out;
}

Tensor bilinear_upsample_x2(const Tensor& input) {
    if (input.rank() != 3)
        throw ShapeError("bilinear_upsample_x2: input must be rank 3 [C,H,W], got " + input.shape_str());
    if (input.dim(1) < 1 || input.dim(2) < 1)
        throw ShapeError("bilinear_upsample_x2: empty input " + input.shape_str());
    return bilinear_resize(input, 2 * input.dim(1), 2 * input.dim(2));
}

void bilinear_resize_grad_into(const Tensor& grad_out, Tensor& grad_input) {
    const int C = grad_input.dim(0), H = grad_input.dim(1), W = grad_input.dim(2);
    const int oh = grad_out.dim(1), ow = grad_out.dim(2);
    const LerpAxis ay = lerp_axis(H, oh);
    const LerpAxis ax = lerp_axis(W, ow);
    for (int c = 0; c < C; ++c) {
        double* plane = grad_input.data() + static_cast<std::size_t>(c) * H * W;
        const double* gp = grad_out.data() + static_cast<std::size_t>(c) * oh * ow;
        for (int y = 0; y < oh; ++y) {
            double* r0 = plane + static_cast<std::size_t>(ay.i0[static_cast<std::size_t>(y)]) * W;
            double* r1 = plane + static_cast<std::size_t>(ay.i1[static_cast<std::size_t>(y)]) * W;
            const double ty = ay.t[static_cast<std::size_t>(y)];
            for (int x = 0; x < ow; ++x) {
                const int x0 = ax.i0[static_cast<std::size_t>(x)];
                const int x1 = ax.i1[static_cast<std::size_t>(x)];
                const double tx = ax.t[static_cast<std::size_t>(x)];
                const double g = *gp++;
                r0[x0] += g * (1.0 - ty) * (1.0 - tx);
                r0[x1] += g * (1.0 - ty) * tx;
                r1[x0] += g * ty * (1.0 - tx);
                r1[x1] += g * ty * tx;
            }
        }
    }
}

Tensor maxpool2x2(const Tensor& input, std::vector<int>* argmax) {
    if (input.rank() != 3)
        throw ShapeError("maxpool2x2: input must be rank 3 [C,H,W], got " + input.shape_str());
    const int C = input.dim(0), H = input.dim(1), W = input.dim(2);
    if (H % 2 != 0 || W % 2 != 0)
        throw ShapeError("maxpool2x2: spatial size " + std::to_string(H) + "x" + std::to_string(W) +
                         " must be even");
    const int oh = H / 2, ow = W / 2;
    Tensor out({C, oh, ow});
    if (argmax) argmax->resize(out.numel());
    const double* src = input.data();
    double* dst = out.data();
    std::size_t oi = 0;
    for (int c = 0; c < C; ++c) {
        const std::size_t base = static_cast<std::size_t>(c) * H * W;
        for (int y = 0; y < oh; ++y) {
            for (int x = 0; x < ow; ++x, ++oi) {
                const std::size_t p = base + static_cast<std::size_t>(2 * y) * W + 2 * x;
                std::size_t best = p;
                double bv = src[p];
                const std::size_t cands[3] = {p + 1, p + W, p + W + 1};
                for (std::size_t q : cands) {
                    if (src[q] > bv) { bv = src[q]; best = q; }
                }
                dst[oi] = bv;
                if (argmax) (*argmax)[oi] = static_cast<int>(best);
            }
        }
    }
    return out;
}

void maxpool2x2_grad_into(const Tensor& grad_out, const std::vector<int>& argmax, Tensor& grad_input) {
    if (argmax.size() != grad_out.numel())
        throw ShapeError("maxpool2x2 backward: argmax size does not match grad");
    for (std::size_t i = 0; i < argmax.size(); ++i) {
        grad_input[static_cast<std::size_t>(argmax[i])] += grad_out[i];
    }
}

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] - b[i];
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
    return out;
}

Tensor scale(const Tensor& a, double c) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * c;
    return out;
}

Tensor add_const(const Tensor& a, double c) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] + c;
    return out;
}

Tensor relu(const Tensor& a) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
    return out;
}

}  // namespace crowdkit
