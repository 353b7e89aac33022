#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "crowdkit/density.hpp"
#include "crowdkit/model.hpp"
#include "crowdkit/ssim.hpp"
#include "crowdkit/tensor.hpp"

namespace crowdkit::train {

/// Synthetic crowd scene: filled discs ("heads") on a flat background with
/// additive Gaussian noise. Head radius grows linearly from top to bottom
/// of the frame, so lower heads are larger.
struct SyntheticSceneSpec {
    int width = 128;
    int height = 128;
    int count_min = 6;
    int count_max = 36;
    double radius_min = 3.0;
    double radius_max = 7.0;
    double background = 0.1;
    double foreground = 0.85;
    double noise_std = 0.02;
    std::uint64_t seed = 1;

    void validate() const;
};

struct Scene {
    Tensor image;  // [1,H,W]
    density::AnnotationSet annotations;
};

Scene generate_scene(const SyntheticSceneSpec& spec);

/// Aligned random crops; image and density are cut at identical offsets, so
/// the density crop carries exactly the ground-truth mass of its window.
std::vector<std::pair<Tensor, Tensor>> sample_crops(const Tensor& image, const Tensor& gt_density,
                                                    int crop_size, int count, std::mt19937_64& rng);

struct AdamParams {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Per-parameter first/second moments plus the step counter. Moments are
/// created on the first step and stay aligned with the parameter walk.
struct AdamState {
    AdamParams hyper;
    std::int64_t step = 0;
    std::vector<std::pair<std::string, Tensor>> m;
    std::vector<std::pair<std::string, Tensor>> v;
};

/// Bias-corrected Adam update. Every parameter must have a gradient;
/// partial updates are rejected.
void adam_step(const std::vector<std::pair<std::string, Tensor*>>& params,
               const std::map<std::string, Tensor>& grads, AdamState& state);

struct LossConfig {
    std::string objective = "dms-ssim";  // "dms-ssim" | "ms-ssim" | "euclidean"
    ssim::DmsSsimConfig dms = ssim::DmsSsimConfig::defaults();
    bool supervise_side_outputs = false;

    // "ms-ssim" is the same measure with every dilation set to 1.
    ssim::DmsSsimConfig effective_dms() const;
    void validate() const;
};

struct DataConfig {
    SyntheticSceneSpec scene;    // per-scene seed is derived from the run seed
    int train_scenes = 32;
    int val_scenes = 12;
    int crop = 96;
    int batch = 4;
    double label_scale = 100.0;  // both maps are scaled by this inside the loss

    void validate() const;
};

struct OptimizerConfig {
    AdamParams adam;
    std::string preset;  // "" or "paper" (lr 1e-5)

    AdamParams effective() const;
};

struct TrainConfig {
    model::BackboneConfig model;
    LossConfig loss;
    DataConfig data;
    OptimizerConfig optimizer;
    int steps = 300;
    std::uint64_t seed = 1;
    std::string checkpoint_dir = "checkpoints";
    int val_every = 100;

    void validate() const;
    std::string to_json() const;
    static TrainConfig from_json(const std::string& text);
    static TrainConfig from_file(const std::string& path);
};

struct StepRecord {
    int step = 0;
    double loss = 0.0;
    double lr = 0.0;
    double wall_ms = 0.0;
};

struct ValRecord {
    int step = 0;
    double val_mae = 0.0;
    double val_mse = 0.0;
};

struct TrainResult {
    model::ModelParams params;
    std::vector<StepRecord> log;
    std::vector<ValRecord> val_log;
    std::string checkpoint_path;
    std::string best_checkpoint_path;
    std::string log_path;
    double final_val_mae = 0.0;
    double final_val_mse = 0.0;
    std::vector<double> train_scene_counts;
    std::vector<double> val_scene_counts;
};

TrainResult train(const TrainConfig& config);

struct EvalReport {
    std::vector<std::pair<double, double>> per_image;  // (ground truth, estimate)
    double mae = 0.0;
    double mse = 0.0;  // root of the mean squared count error
};

/// Count-error aggregation over (ground truth, estimate) pairs.
EvalReport make_report(const std::vector<std::pair<double, double>>& per_image);

EvalReport evaluate(const model::ModelParams& params,
                    const std::vector<std::pair<Tensor, density::AnnotationSet>>& dataset);

/// Renders the ground-truth density for a scene with adaptive sigmas.
density::DensityMap scene_ground_truth(const Scene& scene);

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace crowdkit::train
