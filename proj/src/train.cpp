#include "crowdkit/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "crowdkit/ntb.hpp"

namespace crowdkit::train {

using nlohmann::json;
namespace fs = std::filesystem;

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t x = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

void SyntheticSceneSpec::validate() const {
    if (width < 8 || height < 8)
        throw ShapeError("SyntheticSceneSpec: canvas must be at least 8x8, got " + std::to_string(width) +
                         "x" + std::to_string(height));
    if (count_min < 0 || count_max < count_min)
        throw ShapeError("SyntheticSceneSpec: invalid count range [" + std::to_string(count_min) + ", " +
                         std::to_string(count_max) + "]");
    if (radius_min < 1.0 || radius_max < radius_min)
        throw ShapeError("SyntheticSceneSpec: invalid radius range [" + std::to_string(radius_min) + ", " +
                         std::to_string(radius_max) + "]");
    const double margin = radius_max + 1.0;
    if (2.0 * margin >= std::min(width, height) - 1)
        throw ShapeError("SyntheticSceneSpec: canvas " + std::to_string(width) + "x" + std::to_string(height) +
                         " too small for max head radius " + std::to_string(radius_max));
    if (noise_std < 0.0)
        throw ShapeError("SyntheticSceneSpec: noise_std must be >= 0");
}

Scene generate_scene(const SyntheticSceneSpec& spec) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);
    const int H = spec.height, W = spec.width;

    Scene scene;
    scene.image = Tensor::full({1, H, W}, spec.background);
    scene.annotations.width = W;
    scene.annotations.height = H;

    std::uniform_int_distribution<int> count_dist(spec.count_min, spec.count_max);
    const int n = count_dist(rng);
    const double margin = spec.radius_max + 1.0;
    std::uniform_real_distribution<double> x_dist(margin, W - 1 - margin);
    std::uniform_real_distribution<double> y_dist(margin, H - 1 - margin);
    for (int i = 0; i < n; ++i) {
        const double x = x_dist(rng);
        const double y = y_dist(rng);
        const double r = spec.radius_min + (spec.radius_max - spec.radius_min) * (y / (H - 1));
        scene.annotations.points.push_back({x, y});
        const int y0 = std::max(0, static_cast<int>(std::floor(y - r)));
        const int y1 = std::min(H - 1, static_cast<int>(std::ceil(y + r)));
        const int x0 = std::max(0, static_cast<int>(std::floor(x - r)));
        const int x1 = std::min(W - 1, static_cast<int>(std::ceil(x + r)));
        for (int iy = y0; iy <= y1; ++iy) {
            for (int ix = x0; ix <= x1; ++ix) {
                const double dx = ix - x, dy = iy - y;
                if (dx * dx + dy * dy <= r * r) {
                    double& px = scene.image.at(0, iy, ix);
                    px = std::max(px, spec.foreground);
                }
            }
        }
    }
    if (spec.noise_std > 0.0) {
        std::normal_distribution<double> noise(0.0, spec.noise_std);
        for (std::size_t i = 0; i < scene.image.numel(); ++i) scene.image[i] += noise(rng);
    }
    return scene;
}

std::vector<std::pair<Tensor, Tensor>> sample_crops(const Tensor& image, const Tensor& gt_density,
                                                    int crop_size, int count, std::mt19937_64& rng) {
    if (image.rank() != 3)
        throw ShapeError("sample_crops: image must be rank 3 [C,H,W], got " + image.shape_str());
    if (gt_density.rank() != 2 || gt_density.dim(0) != image.dim(1) || gt_density.dim(1) != image.dim(2))
        throw ShapeError("sample_crops: density shape " + gt_density.shape_str() +
                         " does not match image " + image.shape_str());
    const int C = image.dim(0), H = image.dim(1), W = image.dim(2);
    if (crop_size > std::min(H, W))
        throw ShapeError("sample_crops: crop " + std::to_string(crop_size) + " exceeds image " +
                         std::to_string(H) + "x" + std::to_string(W));
    if (crop_size % 16 != 0)
        throw ShapeError("sample_crops: crop size " + std::to_string(crop_size) +
                         " must be divisible by 16");

    std::uniform_int_distribution<int> oy_dist(0, H - crop_size);
    std::uniform_int_distribution<int> ox_dist(0, W - crop_size);
    std::vector<std::pair<Tensor, Tensor>> crops;
    crops.reserve(static_cast<std::size_t>(count));
    for (int k = 0; k < count; ++k) {
        const int oy = oy_dist(rng);
        const int ox = ox_dist(rng);
        Tensor ic({C, crop_size, crop_size});
        Tensor dc({crop_size, crop_size});
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < crop_size; ++y)
                for (int x = 0; x < crop_size; ++x)
                    ic.at(c, y, x) = image.at(c, oy + y, ox + x);
        for (int y = 0; y < crop_size; ++y)
            for (int x = 0; x < crop_size; ++x)
                dc.at(y, x) = gt_density.at(oy + y, ox + x);
        crops.emplace_back(std::move(ic), std::move(dc));
    }
    return crops;
}

void adam_step(const std::vector<std::pair<std::string, Tensor*>>& params,
               const std::map<std::string, Tensor>& grads, AdamState& state) {
    if (state.step == 0 && state.m.empty()) {
        for (const auto& [name, p] : params) {
            state.m.emplace_back(name, Tensor(p->shape()));
            state.v.emplace_back(name, Tensor(p->shape()));
        }
    }
    if (state.m.size() != params.size())
        throw ShapeError("adam_step: state tracks " + std::to_string(state.m.size()) +
                         " parameters, got " + std::to_string(params.size()));
    ++state.step;
    const AdamParams& h = state.hyper;
    const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
    for (std::size_t k = 0; k < params.size(); ++k) {
        const std::string& name = params[k].first;
        Tensor& p = *params[k].second;
        auto it = grads.find(name);
        if (it == grads.end())
            throw ShapeError("adam_step: missing gradient for parameter \"" + name + "\"");
        const Tensor& g = it->second;
        if (!g.same_shape(p))
            throw ShapeError("adam_step: gradient shape " + g.shape_str() + " for \"" + name +
                             "\" does not match parameter " + p.shape_str());
        if (state.m[k].first != name)
            throw ShapeError("adam_step: parameter order changed at \"" + name + "\"");
        Tensor& m = state.m[k].second;
        Tensor& v = state.v[k].second;
        for (std::size_t i = 0; i < p.numel(); ++i) {
            m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
            v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p[i] -= h.lr * mhat / (std::sqrt(vhat) + h.eps);
        }
    }
}

ssim::DmsSsimConfig LossConfig::effective_dms() const {
    ssim::DmsSsimConfig cfg = dms;
    if (objective == "ms-ssim") {
        std::fill(cfg.dilations.begin(), cfg.dilations.end(), 1);
    }
    return cfg;
}

void LossConfig::validate() const {
    if (objective != "dms-ssim" && objective != "ms-ssim" && objective != "euclidean")
        throw ShapeError("LossConfig: unknown objective \"" + objective + "\"");
    dms.validate();
}

void DataConfig::validate() const {
    scene.validate();
    if (train_scenes < 1 || val_scenes < 1)
        throw ShapeError("DataConfig: need at least one training and one validation scene");
    if (crop < 16) throw ShapeError("DataConfig: crop must be >= 16");
    if (crop > std::min(scene.width, scene.height))
        throw ShapeError("DataConfig: crop " + std::to_string(crop) + " exceeds scene canvas");
    if (batch < 1) throw ShapeError("DataConfig: batch must be >= 1");
    if (!(label_scale > 0.0)) throw ShapeError("DataConfig: label_scale must be positive");
}

AdamParams OptimizerConfig::effective() const {
    AdamParams p = adam;
    if (preset == "paper") p.lr = 1e-5;
    else if (!preset.empty())
        throw ShapeError("OptimizerConfig: unknown preset \"" + preset + "\"");
    return p;
}

void TrainConfig::validate() const {
    model.validate();
    loss.validate();
    data.validate();
    (void)optimizer.effective();
    if (steps < 0) throw ShapeError("TrainConfig: steps must be >= 0");
    if (val_every < 0) throw ShapeError("TrainConfig: val_every must be >= 0");
    if (checkpoint_dir.empty()) throw ShapeError("TrainConfig: checkpoint_dir must be set");
    if (data.crop % model.required_multiple() != 0)
        throw ShapeError("TrainConfig: crop " + std::to_string(data.crop) + " must be divisible by " +
                         std::to_string(model.required_multiple()));
}

std::string TrainConfig::to_json() const {
    json j;
    j["model"] = json::parse(model.to_json());
    json loss_j;
    loss_j["objective"] = loss.objective;
    loss_j["dms_ssim"] = json::parse(loss.dms.to_json());
    loss_j["supervise_side_outputs"] = loss.supervise_side_outputs;
    j["loss"] = loss_j;
    json data_j;
    data_j["canvas_width"] = data.scene.width;
    data_j["canvas_height"] = data.scene.height;
    data_j["count_min"] = data.scene.count_min;
    data_j["count_max"] = data.scene.count_max;
    data_j["radius_min"] = data.scene.radius_min;
    data_j["radius_max"] = data.scene.radius_max;
    data_j["background"] = data.scene.background;
    data_j["foreground"] = data.scene.foreground;
    data_j["noise_std"] = data.scene.noise_std;
    data_j["train_scenes"] = data.train_scenes;
    data_j["val_scenes"] = data.val_scenes;
    data_j["crop"] = data.crop;
    data_j["batch"] = data.batch;
    data_j["label_scale"] = data.label_scale;
    j["data"] = data_j;
    json opt_j;
    opt_j["lr"] = optimizer.adam.lr;
    opt_j["beta1"] = optimizer.adam.beta1;
    opt_j["beta2"] = optimizer.adam.beta2;
    opt_j["eps"] = optimizer.adam.eps;
    if (!optimizer.preset.empty()) opt_j["preset"] = optimizer.preset;
    j["optimizer"] = opt_j;
    j["steps"] = steps;
    j["seed"] = seed;
    j["checkpoint_dir"] = checkpoint_dir;
    j["val_every"] = val_every;
    return j.dump(2);
}

TrainConfig TrainConfig::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw FormatError(std::string("TrainConfig: invalid JSON at offset ") + std::to_string(e.byte) +
                          ": " + e.what(), e.byte);
    }
    TrainConfig cfg;
    try {
        if (j.contains("model")) cfg.model = model::BackboneConfig::from_json(j["model"].dump());
        if (j.contains("loss")) {
            const json& lj = j["loss"];
            if (lj.contains("objective")) cfg.loss.objective = lj["objective"].get<std::string>();
            if (lj.contains("dms_ssim")) cfg.loss.dms = ssim::DmsSsimConfig::from_json(lj["dms_ssim"].dump());
            if (lj.contains("supervise_side_outputs"))
                cfg.loss.supervise_side_outputs = lj["supervise_side_outputs"].get<bool>();
        }
        if (j.contains("data")) {
            const json& dj = j["data"];
            if (dj.contains("canvas_width")) cfg.data.scene.width = dj["canvas_width"].get<int>();
            if (dj.contains("canvas_height")) cfg.data.scene.height = dj["canvas_height"].get<int>();
            if (dj.contains("count_min")) cfg.data.scene.count_min = dj["count_min"].get<int>();
            if (dj.contains("count_max")) cfg.data.scene.count_max = dj["count_max"].get<int>();
            if (dj.contains("radius_min")) cfg.data.scene.radius_min = dj["radius_min"].get<double>();
            if (dj.contains("radius_max")) cfg.data.scene.radius_max = dj["radius_max"].get<double>();
            if (dj.contains("background")) cfg.data.scene.background = dj["background"].get<double>();
            if (dj.contains("foreground")) cfg.data.scene.foreground = dj["foreground"].get<double>();
            if (dj.contains("noise_std")) cfg.data.scene.noise_std = dj["noise_std"].get<double>();
            if (dj.contains("train_scenes")) cfg.data.train_scenes = dj["train_scenes"].get<int>();
            if (dj.contains("val_scenes")) cfg.data.val_scenes = dj["val_scenes"].get<int>();
            if (dj.contains("crop")) cfg.data.crop = dj["crop"].get<int>();
            if (dj.contains("batch")) cfg.data.batch = dj["batch"].get<int>();
            if (dj.contains("label_scale")) cfg.data.label_scale = dj["label_scale"].get<double>();
        }
        if (j.contains("optimizer")) {
            const json& oj = j["optimizer"];
            if (oj.contains("lr")) cfg.optimizer.adam.lr = oj["lr"].get<double>();
            if (oj.contains("beta1")) cfg.optimizer.adam.beta1 = oj["beta1"].get<double>();
            if (oj.contains("beta2")) cfg.optimizer.adam.beta2 = oj["beta2"].get<double>();
            if (oj.contains("eps")) cfg.optimizer.adam.eps = oj["eps"].get<double>();
            if (oj.contains("preset")) cfg.optimizer.preset = oj["preset"].get<std::string>();
        }
        if (j.contains("steps")) cfg.steps = j["steps"].get<int>();
        if (j.contains("seed")) cfg.seed = j["seed"].get<std::uint64_t>();
        if (j.contains("checkpoint_dir")) cfg.checkpoint_dir = j["checkpoint_dir"].get<std::string>();
        if (j.contains("val_every")) cfg.val_every = j["val_every"].get<int>();
    } catch (const json::exception& e) {
        throw FormatError(std::string("TrainConfig: ") + e.what(), 0);
    }
    cfg.validate();
    return cfg;
}

TrainConfig TrainConfig::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open: " + path, 0);
    std::ostringstream buf;
    buf << in.rdbuf();
    return from_json(buf.str());
}

density::DensityMap scene_ground_truth(const Scene& scene) {
    const std::vector<double> sigmas = density::adaptive_sigma(scene.annotations.points);
    return density::render_density(scene.annotations, sigmas).map;
}

EvalReport make_report(const std::vector<std::pair<double, double>>& per_image) {
    if (per_image.empty()) throw ShapeError("make_report: empty dataset");
    EvalReport report;
    report.per_image = per_image;
    double abs_sum = 0.0, sq_sum = 0.0;
    for (const auto& [truth, est] : per_image) {
        const double d = std::abs(est - truth);
        abs_sum += d;
        sq_sum += d * d;
    }
    const double n = static_cast<double>(per_image.size());
    report.mae = abs_sum / n;
    report.mse = std::sqrt(sq_sum / n);
    return report;
}

EvalReport evaluate(const model::ModelParams& params,
                    const std::vector<std::pair<Tensor, density::AnnotationSet>>& dataset) {
    if (dataset.empty()) throw ShapeError("evaluate: empty dataset");
    std::vector<std::pair<double, double>> per_image;
    per_image.reserve(dataset.size());
    for (const auto& [image, annotations] : dataset) {
        const model::ForwardMaps maps = model::forward(image, params);
        per_image.emplace_back(static_cast<double>(annotations.points.size()),
                               model::count(maps.m0));
    }
    return make_report(per_image);
}

namespace {

struct PreparedScene {
    Tensor image;
    Tensor gt;  // [H,W]
    int count = 0;
};

PreparedScene prepare_scene(SyntheticSceneSpec spec, std::uint64_t seed) {
    spec.seed = seed;
    Scene scene = generate_scene(spec);
    PreparedScene out;
    out.gt = scene_ground_truth(scene).values;
    out.count = static_cast<int>(scene.annotations.points.size());
    out.image = std::move(scene.image);
    return out;
}

Var objective_loss(Tape& t, const TrainConfig& cfg, Var prediction_2d, const Tensor& gt_crop) {
    const double s = cfg.data.label_scale;
    Var pred = scale(t, prediction_2d, s);
    Var target = t.constant(scale(gt_crop, s));
    if (cfg.loss.objective == "euclidean") {
        Var d = sub(t, pred, target);
        return mean(t, mul(t, d, d));
    }
    return ssim::dms_ssim_loss(t, pred, target, cfg.loss.effective_dms());
}

// 2x2 block sum; preserves integral mass for density maps.
Tensor block_sum_2x2(const Tensor& map) {
    const int H = map.dim(0), W = map.dim(1);
    Tensor out({H / 2, W / 2});
    for (int y = 0; y < H / 2; ++y)
        for (int x = 0; x < W / 2; ++x)
            out.at(y, x) = map.at(2 * y, 2 * x) + map.at(2 * y, 2 * x + 1) +
                           map.at(2 * y + 1, 2 * x) + map.at(2 * y + 1, 2 * x + 1);
    return out;
}

}  // namespace

TrainResult train(const TrainConfig& config) {
    config.validate();
    fs::create_directories(config.checkpoint_dir);
    const fs::path ckpt_dir(config.checkpoint_dir);
    const std::string final_path = (ckpt_dir / "model.ckpt").string();
    const std::string best_path = (ckpt_dir / "model_best.ckpt").string();
    const std::string log_path = (ckpt_dir / "train_log.jsonl").string();
    const fs::path val_dir = ckpt_dir / "val";
    fs::create_directories(val_dir);

    // Independent per-purpose seed streams.
    std::vector<PreparedScene> train_scenes;
    for (int i = 0; i < config.data.train_scenes; ++i)
        train_scenes.push_back(prepare_scene(config.data.scene, mix_seed(config.seed, 0x5C000 + i)));
    std::vector<std::pair<Tensor, density::AnnotationSet>> val_set;
    for (int i = 0; i < config.data.val_scenes; ++i) {
        SyntheticSceneSpec spec = config.data.scene;
        spec.seed = mix_seed(config.seed, 0xA1000 + i);
        Scene scene = generate_scene(spec);
        val_set.emplace_back(scene.image, scene.annotations);
    }
    std::mt19937_64 crop_rng(mix_seed(config.seed, 0xC0FFEE));

    // Export the validation scenes so `eval` can run on this directory.
    for (std::size_t i = 0; i < val_set.size(); ++i) {
        char stem[32];
        std::snprintf(stem, sizeof stem, "scene_%03zu", i);
        write_ntb((val_dir / (std::string(stem) + ".image.ntb")).string(), {{"image", val_set[i].first}});
        density::write_annotations((val_dir / (std::string(stem) + ".annotations.json")).string(),
                                   val_set[i].second);
    }

    model::ModelParams params = model::init_params(config.model, mix_seed(config.seed, 0x1217));
    AdamState adam;
    adam.hyper = config.optimizer.effective();

    TrainResult result;
    for (const PreparedScene& s : train_scenes) result.train_scene_counts.push_back(s.count);
    for (const auto& [image, annotations] : val_set)
        result.val_scene_counts.push_back(static_cast<double>(annotations.points.size()));
    double best_mae = std::numeric_limits<double>::infinity();

    std::ofstream log_out(log_path, std::ios::trunc);
    if (!log_out) throw FormatError("cannot open for writing: " + log_path, 0);
    auto log_step = [&log_out](const StepRecord& r) {
        json j;
        j["step"] = r.step;
        j["loss"] = r.loss;
        j["lr"] = r.lr;
        j["wall_ms"] = r.wall_ms;
        log_out << j.dump() << '\n';
    };
    auto log_val = [&log_out](const ValRecord& r) {
        json j;
        j["step"] = r.step;
        j["val_mae"] = r.val_mae;
        j["val_mse"] = r.val_mse;
        log_out << j.dump() << '\n';
    };

    auto run_validation = [&](int step) {
        const EvalReport report = evaluate(params, val_set);
        ValRecord vr{step, report.mae, report.mse};
        result.val_log.push_back(vr);
        log_val(vr);
        result.final_val_mae = report.mae;
        result.final_val_mse = report.mse;
        if (report.mae < best_mae) {
            best_mae = report.mae;
            model::save_checkpoint(best_path, params, config.loss.effective_dms());
        }
        // keep the last known-good state on disk
        model::save_checkpoint(final_path, params, config.loss.effective_dms());
    };

    std::uniform_int_distribution<std::size_t> scene_dist(0, train_scenes.size() - 1);
    for (int step = 1; step <= config.steps; ++step) {
        const auto t0 = std::chrono::steady_clock::now();
        Tape tape;
        const model::ParamVars pv = model::register_params(tape, params);
        Var total{};
        for (int b = 0; b < config.data.batch; ++b) {
            const PreparedScene& scene = train_scenes[scene_dist(crop_rng)];
            auto crops = sample_crops(scene.image, scene.gt, config.data.crop, 1, crop_rng);
            auto& [ic, gc] = crops[0];
            const model::ForwardVars fv = model::forward(tape, ic, pv, config.model);
            const Tensor& m0v = tape.value(fv.m0);
            Var pred2d = reshape(tape, fv.m0, {m0v.dim(1), m0v.dim(2)});
            Var loss_b = objective_loss(tape, config, pred2d, gc);
            if (config.loss.supervise_side_outputs) {
                Tensor gt_level = gc;
                int terms = 1;
                for (Var side : fv.side) {
                    const Tensor& sv = tape.value(side);
                    while (gt_level.dim(0) > sv.dim(1)) gt_level = block_sum_2x2(gt_level);
                    if (gt_level.dim(0) < ssim::min_map_size(config.loss.effective_dms()) &&
                        config.loss.objective != "euclidean")
                        break;
                    Var side2d = reshape(tape, side, {sv.dim(1), sv.dim(2)});
                    loss_b = add(tape, loss_b, objective_loss(tape, config, side2d, gt_level));
                    ++terms;
                }
                loss_b = scale(tape, loss_b, 1.0 / terms);
            }
            total = (b == 0) ? loss_b : add(tape, total, loss_b);
        }
        Var loss = scale(tape, total, 1.0 / config.data.batch);
        const double loss_value = tape.value(loss).value();
        if (!std::isfinite(loss_value))
            throw NumericError("training aborted: non-finite loss at step " + std::to_string(step) +
                               " (last-good checkpoint: " + final_path + ")");
        tape.backward(loss);

        std::map<std::string, Tensor> grads;
        for (const auto& [name, var] : model::named_vars(params, pv)) grads[name] = tape.grad(var);
        std::vector<std::pair<std::string, Tensor*>> plist;
        params.for_each([&plist](const std::string& name, Tensor& t) { plist.emplace_back(name, &t); });
        adam_step(plist, grads, adam);

        const auto t1 = std::chrono::steady_clock::now();
        StepRecord rec{step, loss_value, adam.hyper.lr,
                       std::chrono::duration<double, std::milli>(t1 - t0).count()};
        result.log.push_back(rec);
        log_step(rec);

        if (config.val_every > 0 && step % config.val_every == 0 && step != config.steps)
            run_validation(step);
    }

    if (config.steps > 0) {
        run_validation(config.steps);
    } else {
        model::save_checkpoint(final_path, params, config.loss.effective_dms());
        model::save_checkpoint(best_path, params, config.loss.effective_dms());
    }
    result.params = std::move(params);
    result.checkpoint_path = final_path;
    result.best_checkpoint_path = best_path;
    result.log_path = log_path;
    return result;
}

}  // namespace crowdkit::train
