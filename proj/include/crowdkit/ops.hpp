#pragma once

#include <vector>

#include "crowdkit/tensor.hpp"

namespace crowdkit {

enum class Padding { kZero, kReflect };

/// Geometry of a 2-D convolution. Output spatial size per axis is
/// floor((in + pad_total - dilation*(k-1) - 1) / stride) + 1.
struct ConvSpec {
    int kernel_h = 1;
    int kernel_w = 1;
    int dilation = 1;  // applied to both axes
    int stride = 1;
    Padding padding = Padding::kZero;
    int pad_top = 0, pad_bottom = 0, pad_left = 0, pad_right = 0;

    // Same-size convolution for an odd kernel: pad = dilation*(k-1)/2 per side.
    static ConvSpec same(int kernel, int dilation = 1, Padding mode = Padding::kZero);

    int out_h(int in_h) const;
    int out_w(int in_w) const;
};

// input [C,H,W], weights [O,C,kh,kw], optional bias [O] -> [O,H',W']
Tensor conv2d(const Tensor& input, const Tensor& weights, const Tensor* bias,
              const ConvSpec& spec);

// Accumulating backward kernels; destinations must be pre-shaped and are added into.
void conv2d_grad_input_into(const Tensor& grad_out, const Tensor& weights,
                            const ConvSpec& spec, Tensor& grad_input);
void conv2d_grad_weights_into(const Tensor& grad_out, const Tensor& input,
                              const ConvSpec& spec, Tensor& grad_weights);
void conv2d_grad_bias_into(const Tensor& grad_out, Tensor& grad_bias);

// Channel mixing: out[o,p] = sum_c weights[o,c] * input[c,p] (+ bias[o]).
// Equivalent to a 1x1 convolution with 2-D weights [O,C].
Tensor channel_map(const Tensor& weights, const Tensor& input, const Tensor* bias);
void channel_map_grad_input_into(const Tensor& grad_out, const Tensor& weights, Tensor& grad_input);
void channel_map_grad_weights_into(const Tensor& grad_out, const Tensor& input, Tensor& grad_weights);

// Bilinear resampling with half-pixel-center source coordinates and edge
// clamping: output index j reads (j + 0.5) * in/out - 0.5.
Tensor bilinear_resize(const Tensor& input, int out_h, int out_w);
Tensor bilinear_upsample_x2(const Tensor& input);
void bilinear_resize_grad_into(const Tensor& grad_out, Tensor& grad_input);

// 2x2 max pooling, stride 2; H and W must be even. `argmax` (flat input
// indices of the selected elements, first-wins on ties) enables backward.
Tensor maxpool2x2(const Tensor& input, std::vector<int>* argmax = nullptr);
void maxpool2x2_grad_into(const Tensor& grad_out, const std::vector<int>& argmax,
                          Tensor& grad_input);

// Pointwise operations. Operand shapes must match exactly; there is no
// implicit broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_const(const Tensor& a, double c);
Tensor relu(const Tensor& a);

}  // namespace crowdkit
