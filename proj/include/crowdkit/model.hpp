#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "crowdkit/density.hpp"
#include "crowdkit/sfem.hpp"
#include "crowdkit/ssim.hpp"
#include "crowdkit/tape.hpp"
#include "crowdkit/tensor.hpp"

namespace crowdkit::model {

/// Miniature multiscale backbone: four stages of 3x3/pad-1/ReLU
/// convolutions with 2x max-pooling between stages, run over an image
/// pyramid by one shared-parameter network.
struct BackboneConfig {
    std::vector<int> stage_widths{16, 32, 64, 128};
    int convs_per_stage = 2;
    int in_channels = 1;
    int head_width = 32;                        // 1x1 reduce width of density heads
    std::vector<double> pyramid_scales{2.0, 1.0, 0.5};
    int sfem_iterations = 2;

    void validate() const;
    // Input sides must be divisible by this (integral feature maps at
    // every pyramid level and a dyadic fusion chain).
    int required_multiple() const;
    std::string to_json() const;
    static BackboneConfig from_json(const std::string& text);
};

/// Where each pyramid level taps into the backbone and how taps group by
/// resolution. Derived from the config; resolution index i means H / 2^i.
struct ModelPlan {
    struct Tap {
        int level;  // pyramid level, 0-based
        int stage;  // backbone stage, 1-based
    };
    struct Group {
        std::vector<Tap> taps;        // ascending level
        std::vector<int> channels;    // per tap
        int out_index = -1;           // resolution index of the side output; -1 if none
        int sfem_index = -1;          // index into ModelParams::sfem; -1 for singletons
    };
    std::vector<Group> groups;  // descending resolution
    int top_index = 0;          // coarsest output resolution index
    std::vector<int> head_in_channels;   // by output index 0..top_index
    std::vector<std::vector<int>> sfem_channels;  // per multi-member group
};

ModelPlan derive_plan(const BackboneConfig& config);

struct ConvLayer {
    Tensor w;  // [O,C,kh,kw]
    Tensor b;  // [O]
};

struct Head {
    Tensor reduce_w;   // [head_width, in_channels]
    Tensor reduce_b;   // [head_width]
    Tensor regress_w;  // [1, head_width, 3, 3]
    Tensor regress_b;  // [1]
};

/// All trainable tensors. Backbone weights exist exactly once and are
/// shared by every pyramid level.
struct ModelParams {
    BackboneConfig config;
    std::vector<std::vector<ConvLayer>> backbone;  // [stage][conv]
    std::vector<sfem::SfemParams> sfem;            // per multi-member group
    std::vector<Head> heads;                       // by output index 0..top
    std::vector<Tensor> fusion;                    // w_0..w_top, [1,1,3,3], no bias

    /// Visits every tensor in a fixed order with its checkpoint name.
    void for_each(const std::function<void(const std::string&, Tensor&)>& fn);
    void for_each(const std::function<void(const std::string&, const Tensor&)>& fn) const;
    std::size_t parameter_count() const;
};

/// Fan-in-scaled Gaussian init for the backbone, N(0, 1e-6^2) for SFEM
/// mixing weights, heads, and fusion kernels; all biases zero.
ModelParams init_params(const BackboneConfig& config, std::uint64_t seed);

/// Bilinear image pyramid; scale 1.0 returns the input unchanged.
std::vector<Tensor> build_pyramid(const Tensor& image, const std::vector<double>& scales);

struct ParamVars {
    std::vector<std::vector<std::pair<Var, Var>>> backbone;  // (w, b)
    std::vector<std::vector<std::vector<Var>>> sfem;         // [group][i][j]
    struct HeadVars { Var reduce_w, reduce_b, regress_w, regress_b; };
    std::vector<HeadVars> heads;
    std::vector<Var> fusion;
};

/// Registers every parameter tensor as a tracked leaf.
ParamVars register_params(Tape& t, const ModelParams& params);
/// Names and Vars in for_each order (for gradient collection).
std::vector<std::pair<std::string, Var>> named_vars(const ModelParams& params, const ParamVars& vars);

struct ForwardVars {
    Var m0;                 // [1,H,W] full-resolution density map
    std::vector<Var> side;  // side outputs by resolution index 0..top-1
    Var m_top;              // coarsest head output
};

ForwardVars forward(Tape& t, const Tensor& image, const ParamVars& vars,
                    const BackboneConfig& config, bool apply_sfem = true);

struct ForwardMaps {
    density::DensityMap m0;      // [H,W]
    std::vector<Tensor> side;    // [1,h,w] maps
    Tensor m_top;
};

ForwardMaps forward(const Tensor& image, const ModelParams& params, bool apply_sfem = true);

/// Coarse-to-fine fusion: M_i = w_i * Mt_i + w_{i+1} * Up2(M_{i+1}) from the
/// coarsest map down to full resolution. Maps are [1,h,w] on a dyadic chain.
Tensor topdown_fuse(const std::vector<Tensor>& side_outputs, const Tensor& m_top,
                    const std::vector<Tensor>& fusion_weights);

/// Crowd count: plain integral of the density map.
double count(const density::DensityMap& map);

// Model checkpoint: named-tensor binary at `path` plus a JSON sidecar
// `path + ".json"` carrying the backbone and loss configs and their hash.
void save_checkpoint(const std::string& path, const ModelParams& params,
                     const ssim::DmsSsimConfig& loss_config);

struct Checkpoint {
    ModelParams params;
    ssim::DmsSsimConfig loss_config;
};

Checkpoint load_checkpoint(const std::string& path);

std::string config_hash(const BackboneConfig& backbone, const ssim::DmsSsimConfig& loss_config);

}  // namespace crowdkit::model
