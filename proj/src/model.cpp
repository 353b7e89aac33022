#include "crowdkit/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include <json.hpp>

#include "crowdkit/ntb.hpp"

namespace crowdkit::model {

using nlohmann::json;

void BackboneConfig::validate() const {
    if (stage_widths.size() != 4)
        throw ShapeError("BackboneConfig: expected 4 stage widths, got " + std::to_string(stage_widths.size()));
    for (int w : stage_widths)
        if (w < 1) throw ShapeError("BackboneConfig: stage width must be >= 1, got " + std::to_string(w));
    if (convs_per_stage < 1)
        throw ShapeError("BackboneConfig: convs_per_stage must be >= 1, got " + std::to_string(convs_per_stage));
    if (in_channels < 1)
        throw ShapeError("BackboneConfig: in_channels must be >= 1, got " + std::to_string(in_channels));
    if (head_width < 1)
        throw ShapeError("BackboneConfig: head_width must be >= 1, got " + std::to_string(head_width));
    if (sfem_iterations < 1)
        throw ShapeError("BackboneConfig: sfem_iterations must be >= 1, got " + std::to_string(sfem_iterations));
    if (pyramid_scales.empty())
        throw ShapeError("BackboneConfig: pyramid_scales must not be empty");
    for (std::size_t i = 1; i < pyramid_scales.size(); ++i) {
        if (!(pyramid_scales[i] < pyramid_scales[i - 1]))
            throw ShapeError("BackboneConfig: pyramid scales must be strictly decreasing");
    }
    for (double s : pyramid_scales) {
        const double units = s * 16.0;
        const int u = static_cast<int>(std::lround(units));
        if (std::abs(units - u) > 1e-12 || u < 1 || (u & (u - 1)) != 0)
            throw ShapeError("BackboneConfig: pyramid scale " + std::to_string(s) +
                             " must be a power of two between 1/16 and large");
        if (u < (1 << 3))
            throw ShapeError("BackboneConfig: pyramid scale " + std::to_string(s) +
                             " is too small for 4 backbone stages");
    }
}

int BackboneConfig::required_multiple() const {
    // Every level must reach stage 4 with integral sizes: level k needs
    // H * scale divisible by 2^(stages-1).
    int mult = 1;
    for (double s : pyramid_scales) {
        const int u = static_cast<int>(std::lround(s * 16.0));
        // H * u/16 divisible by 8  <=>  H divisible by 128/u
        mult = std::max(mult, 128 / u);
    }
    return mult;
}

std::string BackboneConfig::to_json() const {
    json j;
    j["stage_widths"] = stage_widths;
    j["convs_per_stage"] = convs_per_stage;
    j["in_channels"] = in_channels;
    j["head_width"] = head_width;
    j["pyramid_scales"] = pyramid_scales;
    j["sfem_iterations"] = sfem_iterations;
    return j.dump(2);
}

BackboneConfig BackboneConfig::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw FormatError(std::string("BackboneConfig: invalid JSON: ") + e.what(), e.byte);
    }
    BackboneConfig cfg;
    try {
        if (j.contains("stage_widths")) cfg.stage_widths = j["stage_widths"].get<std::vector<int>>();
        if (j.contains("convs_per_stage")) cfg.convs_per_stage = j["convs_per_stage"].get<int>();
        if (j.contains("in_channels")) cfg.in_channels = j["in_channels"].get<int>();
        if (j.contains("head_width")) cfg.head_width = j["head_width"].get<int>();
        if (j.contains("pyramid_scales")) cfg.pyramid_scales = j["pyramid_scales"].get<std::vector<double>>();
        if (j.contains("sfem_iterations")) cfg.sfem_iterations = j["sfem_iterations"].get<int>();
    } catch (const json::exception& e) {
        throw FormatError(std::string("BackboneConfig: ") + e.what(), 0);
    }
    cfg.validate();
    return cfg;
}

ModelPlan derive_plan(const BackboneConfig& config) {
    config.validate();
    const int n_stages = static_cast<int>(config.stage_widths.size());
    constexpr int kBaseUnits = 16;  // resolution units of the input image

    // units(level, stage) = scale*16 / 2^(stage-1); equal units = same resolution
    std::map<int, ModelPlan::Group, std::greater<int>> by_units;
    for (std::size_t level = 0; level < config.pyramid_scales.size(); ++level) {
        const int u0 = static_cast<int>(std::lround(config.pyramid_scales[level] * 16.0));
        for (int stage = 1; stage <= n_stages; ++stage) {
            const int units = u0 >> (stage - 1);
            auto& group = by_units[units];
            group.taps.push_back({static_cast<int>(level), stage});
            group.channels.push_back(config.stage_widths[static_cast<std::size_t>(stage - 1)]);
        }
    }

    ModelPlan plan;
    int sfem_index = 0;
    std::vector<int> out_units;
    for (auto& [units, group] : by_units) {
        if (units <= kBaseUnits) {
            int idx = 0;
            for (int u = kBaseUnits; u > units; u >>= 1) ++idx;
            group.out_index = idx;
            out_units.push_back(units);
        }
        if (group.taps.size() >= 2) {
            group.sfem_index = sfem_index++;
            plan.sfem_channels.push_back(group.channels);
        }
        plan.groups.push_back(group);
    }

    // The side outputs plus the top map must form a contiguous dyadic chain.
    for (std::size_t i = 1; i < out_units.size(); ++i) {
        if (out_units[i - 1] != out_units[i] * 2)
            throw ShapeError("BackboneConfig: output resolutions do not form a dyadic chain");
    }
    if (out_units.empty() || out_units.front() != kBaseUnits)
        throw ShapeError("BackboneConfig: no output at the input resolution");
    plan.top_index = static_cast<int>(out_units.size()) - 1;

    plan.head_in_channels.assign(static_cast<std::size_t>(plan.top_index) + 1, 0);
    for (const auto& group : plan.groups) {
        if (group.out_index < 0) continue;
        int total = 0;
        for (int c : group.channels) total += c;
        plan.head_in_channels[static_cast<std::size_t>(group.out_index)] = total;
    }
    return plan;
}

void ModelParams::for_each(const std::function<void(const std::string&, Tensor&)>& fn) {
    for (std::size_t s = 0; s < backbone.size(); ++s) {
        for (std::size_t c = 0; c < backbone[s].size(); ++c) {
            const std::string base = "backbone.s" + std::to_string(s + 1) + ".c" + std::to_string(c + 1);
            fn(base + ".w", backbone[s][c].w);
            fn(base + ".b", backbone[s][c].b);
        }
    }
    for (std::size_t g = 0; g < sfem.size(); ++g) {
        const int n = sfem[g].group_size();
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < n; ++j) {
                if (i == j) continue;
                fn("sfem" + std::to_string(g) + ".w_" + std::to_string(i + 1) + "_" + std::to_string(j + 1),
                   sfem[g].weights[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]);
            }
        }
    }
    for (std::size_t h = 0; h < heads.size(); ++h) {
        const std::string base = "head" + std::to_string(h);
        fn(base + ".reduce.w", heads[h].reduce_w);
        fn(base + ".reduce.b", heads[h].reduce_b);
        fn(base + ".regress.w", heads[h].regress_w);
        fn(base + ".regress.b", heads[h].regress_b);
    }
    for (std::size_t i = 0; i < fusion.size(); ++i) {
        fn("fuse.w" + std::to_string(i), fusion[i]);
    }
}

void ModelParams::for_each(const std::function<void(const std::string&, const Tensor&)>& fn) const {
    const_cast<ModelParams*>(this)->for_each(
        [&fn](const std::string& name, Tensor& t) { fn(name, t); });
}

std::size_t ModelParams::parameter_count() const {
    std::size_t n = 0;
    for_each([&n](const std::string&, const Tensor& t) { n += t.numel(); });
    return n;
}

ModelParams init_params(const BackboneConfig& config, std::uint64_t seed) {
    config.validate();
    const ModelPlan plan = derive_plan(config);
    std::mt19937_64 rng(seed);

    ModelParams p;
    p.config = config;

    const int n_stages = static_cast<int>(config.stage_widths.size());
    p.backbone.resize(static_cast<std::size_t>(n_stages));
    int in_ch = config.in_channels;
    for (int s = 0; s < n_stages; ++s) {
        const int out_ch = config.stage_widths[static_cast<std::size_t>(s)];
        for (int c = 0; c < config.convs_per_stage; ++c) {
            ConvLayer layer;
            layer.w = Tensor({out_ch, in_ch, 3, 3});
            layer.b = Tensor({out_ch});
            const double std_dev = std::sqrt(2.0 / (static_cast<double>(in_ch) * 9.0));
            std::normal_distribution<double> dist(0.0, std_dev);
            for (std::size_t k = 0; k < layer.w.numel(); ++k) layer.w[k] = dist(rng);
            p.backbone[static_cast<std::size_t>(s)].push_back(std::move(layer));
            in_ch = out_ch;
        }
    }

    constexpr double kNearZeroStd = 1e-6;
    for (const auto& channels : plan.sfem_channels) {
        p.sfem.push_back(sfem::SfemParams::gaussian_init(channels, config.sfem_iterations, rng, kNearZeroStd));
    }

    std::normal_distribution<double> tiny(0.0, kNearZeroStd);
    for (int h = 0; h <= plan.top_index; ++h) {
        Head head;
        const int in = plan.head_in_channels[static_cast<std::size_t>(h)];
        head.reduce_w = Tensor({config.head_width, in});
        head.reduce_b = Tensor({config.head_width});
        head.regress_w = Tensor({1, config.head_width, 3, 3});
        head.regress_b = Tensor({1});
        for (std::size_t k = 0; k < head.reduce_w.numel(); ++k) head.reduce_w[k] = tiny(rng);
        for (std::size_t k = 0; k < head.regress_w.numel(); ++k) head.regress_w[k] = tiny(rng);
        p.heads.push_back(std::move(head));
    }

    for (int i = 0; i <= plan.top_index; ++i) {
        Tensor w({1, 1, 3, 3});
        for (std::size_t k = 0; k < w.numel(); ++k) w[k] = tiny(rng);
        p.fusion.push_back(std::move(w));
    }
    return p;
}

std::vector<Tensor> build_pyramid(const Tensor& image, const std::vector<double>& scales) {
    if (image.rank() != 3)
        throw ShapeError("build_pyramid: image must be rank 3 [C,H,W], got " + image.shape_str());
    const int H = image.dim(1), W = image.dim(2);
    std::vector<Tensor> levels;
    levels.reserve(scales.size());
    for (double s : scales) {
        if (s == 1.0) {
            levels.push_back(image);
            continue;
        }
        const double oh = H * s, ow = W * s;
        if (std::abs(oh - std::lround(oh)) > 1e-9 || std::abs(ow - std::lround(ow)) > 1e-9)
            throw ShapeError("build_pyramid: scale " + std::to_string(s) + " of " + std::to_string(H) + "x" +
                             std::to_string(W) + " is not integral");
        levels.push_back(bilinear_resize(image, static_cast<int>(std::lround(oh)),
                                         static_cast<int>(std::lround(ow))));
    }
    return levels;
}

ParamVars register_params(Tape& t, const ModelParams& params) {
    ParamVars v;
    v.backbone.resize(params.backbone.size());
    for (std::size_t s = 0; s < params.backbone.size(); ++s) {
        for (const ConvLayer& layer : params.backbone[s]) {
            v.backbone[s].push_back({t.leaf(layer.w), t.leaf(layer.b)});
        }
    }
    v.sfem.resize(params.sfem.size());
    for (std::size_t g = 0; g < params.sfem.size(); ++g) {
        const int n = params.sfem[g].group_size();
        v.sfem[g].assign(static_cast<std::size_t>(n), std::vector<Var>(static_cast<std::size_t>(n)));
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                if (i != j)
                    v.sfem[g][static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] =
                        t.leaf(params.sfem[g].weights[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]);
    }
    for (const Head& h : params.heads) {
        v.heads.push_back({t.leaf(h.reduce_w), t.leaf(h.reduce_b), t.leaf(h.regress_w), t.leaf(h.regress_b)});
    }
    for (const Tensor& w : params.fusion) v.fusion.push_back(t.leaf(w));
    return v;
}

std::vector<std::pair<std::string, Var>> named_vars(const ModelParams& params, const ParamVars& vars) {
    std::vector<std::pair<std::string, Var>> out;
    // mirrors ModelParams::for_each ordering
    for (std::size_t s = 0; s < params.backbone.size(); ++s) {
        for (std::size_t c = 0; c < params.backbone[s].size(); ++c) {
            const std::string base = "backbone.s" + std::to_string(s + 1) + ".c" + std::to_string(c + 1);
            out.emplace_back(base + ".w", vars.backbone[s][c].first);
            out.emplace_back(base + ".b", vars.backbone[s][c].second);
        }
    }
    for (std::size_t g = 0; g < params.sfem.size(); ++g) {
        const int n = params.sfem[g].group_size();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                if (i != j)
                    out.emplace_back("sfem" + std::to_string(g) + ".w_" + std::to_string(i + 1) + "_" +
                                         std::to_string(j + 1),
                                     vars.sfem[g][static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]);
    }
    for (std::size_t h = 0; h < params.heads.size(); ++h) {
        const std::string base = "head" + std::to_string(h);
        out.emplace_back(base + ".reduce.w", vars.heads[h].reduce_w);
        out.emplace_back(base + ".reduce.b", vars.heads[h].reduce_b);
        out.emplace_back(base + ".regress.w", vars.heads[h].regress_w);
        out.emplace_back(base + ".regress.b", vars.heads[h].regress_b);
    }
    for (std::size_t i = 0; i < params.fusion.size(); ++i)
        out.emplace_back("fuse.w" + std::to_string(i), vars.fusion[i]);
    return out;
}

namespace {

void check_image(const Tensor& image, const BackboneConfig& config) {
    if (image.rank() != 3 || image.dim(0) != config.in_channels)
        throw ShapeError("forward: image must be [" + std::to_string(config.in_channels) +
                         ",H,W], got " + image.shape_str());
    const int mult = config.required_multiple();
    if (image.dim(1) % mult != 0 || image.dim(2) % mult != 0)
        throw ShapeError("forward: image size " + std::to_string(image.dim(1)) + "x" +
                         std::to_string(image.dim(2)) + " must be divisible by " + std::to_string(mult));
}

}  // namespace

ForwardVars forward(Tape& t, const Tensor& image, const ParamVars& vars,
                    const BackboneConfig& config, bool apply_sfem) {
    check_image(image, config);
    const ModelPlan plan = derive_plan(config);
    const ConvSpec conv3 = ConvSpec::same(3, 1, Padding::kZero);

    const std::vector<Tensor> pyramid = build_pyramid(image, config.pyramid_scales);
    const std::size_t n_levels = pyramid.size();
    std::vector<Var> state(n_levels);
    std::vector<int> done(n_levels, 0);
    for (std::size_t k = 0; k < n_levels; ++k) state[k] = t.constant(pyramid[k]);

    auto advance = [&](int level, int stage) {
        auto& cur = state[static_cast<std::size_t>(level)];
        int& d = done[static_cast<std::size_t>(level)];
        while (d < stage) {
            if (d >= 1) cur = maxpool2x2(t, cur);
            const auto& layers = vars.backbone[static_cast<std::size_t>(d)];
            for (const auto& [w, b] : layers) {
                cur = relu(t, conv2d(t, cur, w, b, conv3));
            }
            ++d;
        }
    };

    std::vector<Var> outputs(static_cast<std::size_t>(plan.top_index) + 1);
    for (const auto& group : plan.groups) {
        std::vector<Var> taps;
        taps.reserve(group.taps.size());
        for (const auto& tap : group.taps) {
            advance(tap.level, tap.stage);
            taps.push_back(state[static_cast<std::size_t>(tap.level)]);
        }
        std::vector<Var> refined = taps;
        if (group.sfem_index >= 0 && apply_sfem) {
            refined = sfem::mean_field_refine(t, taps, vars.sfem[static_cast<std::size_t>(group.sfem_index)],
                                              config.sfem_iterations);
        }
        for (std::size_t m = 0; m < group.taps.size(); ++m) {
            state[static_cast<std::size_t>(group.taps[m].level)] = refined[m];
        }
        if (group.out_index >= 0) {
            Var x = refined.size() > 1 ? concat_channels(t, refined) : refined[0];
            const auto& head = vars.heads[static_cast<std::size_t>(group.out_index)];
            Var reduced = relu(t, channel_map(t, head.reduce_w, x, head.reduce_b));
            outputs[static_cast<std::size_t>(group.out_index)] =
                conv2d(t, reduced, head.regress_w, head.regress_b, conv3);
        }
    }

    ForwardVars fv;
    fv.m_top = outputs[static_cast<std::size_t>(plan.top_index)];
    Var m = fv.m_top;
    for (int i = plan.top_index - 1; i >= 0; --i) {
        Var own = conv2d(t, outputs[static_cast<std::size_t>(i)], vars.fusion[static_cast<std::size_t>(i)],
                         std::nullopt, conv3);
        Var up = conv2d(t, bilinear_upsample_x2(t, m), vars.fusion[static_cast<std::size_t>(i) + 1],
                        std::nullopt, conv3);
        m = add(t, own, up);
    }
    fv.m0 = m;
    fv.side.assign(outputs.begin(), outputs.end() - 1);
    return fv;
}

ForwardMaps forward(const Tensor& image, const ModelParams& params, bool apply_sfem) {
    Tape t;
    const ParamVars vars = register_params(t, params);
    const ForwardVars fv = forward(t, image, vars, params.config, apply_sfem);
    ForwardMaps maps;
    const Tensor& m0 = t.value(fv.m0);
    maps.m0.values = Tensor({m0.dim(1), m0.dim(2)},
                            std::vector<double>(m0.data(), m0.data() + m0.numel()));
    for (Var v : fv.side) maps.side.push_back(t.value(v));
    maps.m_top = t.value(fv.m_top);
    return maps;
}

Tensor topdown_fuse(const std::vector<Tensor>& side_outputs, const Tensor& m_top,
                    const std::vector<Tensor>& fusion_weights) {
    const int T = static_cast<int>(side_outputs.size());
    if (static_cast<int>(fusion_weights.size()) != T + 1)
        throw ShapeError("topdown_fuse: expected " + std::to_string(T + 1) + " fusion kernels, got " +
                         std::to_string(fusion_weights.size()));
    const ConvSpec conv3 = ConvSpec::same(3, 1, Padding::kZero);
    Tensor m = m_top;
    for (int i = T - 1; i >= 0; --i) {
        const Tensor& own_map = side_outputs[static_cast<std::size_t>(i)];
        if (own_map.rank() != 3 || own_map.dim(0) != 1)
            throw ShapeError("topdown_fuse: maps must be [1,h,w], got " + own_map.shape_str());
        Tensor up = bilinear_upsample_x2(m);
        if (up.dim(1) != own_map.dim(1) || up.dim(2) != own_map.dim(2))
            throw ShapeError("topdown_fuse: resolution-chain mismatch: expected " +
                             std::to_string(own_map.dim(1)) + "x" + std::to_string(own_map.dim(2)) +
                             ", got " + std::to_string(up.dim(1)) + "x" + std::to_string(up.dim(2)));
        Tensor own = conv2d(own_map, fusion_weights[static_cast<std::size_t>(i)], nullptr, conv3);
        Tensor from_up = conv2d(up, fusion_weights[static_cast<std::size_t>(i) + 1], nullptr, conv3);
        m = add(own, from_up);
    }
    return m;
}

double count(const density::DensityMap& map) { return map.values.sum(); }

std::string config_hash(const BackboneConfig& backbone, const ssim::DmsSsimConfig& loss_config) {
    json j;
    j["backbone"] = json::parse(backbone.to_json());
    j["dms_ssim"] = json::parse(loss_config.to_json());
    const std::string canon = j.dump();
    // FNV-1a 64
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : canon) {
        h ^= c;
        h *= 1099511628211ull;
    }
    std::ostringstream os;
    os << std::hex << h;
    return os.str();
}

void save_checkpoint(const std::string& path, const ModelParams& params,
                     const ssim::DmsSsimConfig& loss_config) {
    NamedTensors tensors;
    params.for_each([&tensors](const std::string& name, const Tensor& t) {
        tensors.emplace_back(name, t);
    });
    write_ntb(path, tensors);

    json sidecar;
    sidecar["backbone"] = json::parse(params.config.to_json());
    sidecar["dms_ssim"] = json::parse(loss_config.to_json());
    sidecar["config_hash"] = config_hash(params.config, loss_config);
    std::ofstream out(path + ".json", std::ios::trunc);
    if (!out) throw FormatError("cannot open for writing: " + path + ".json", 0);
    out << sidecar.dump(2) << '\n';
    if (!out) throw FormatError("write failed: " + path + ".json", 0);
}

Checkpoint load_checkpoint(const std::string& path) {
    const std::string sidecar_path = path + ".json";
    std::ifstream in(sidecar_path);
    if (!in) throw FormatError("cannot open: " + sidecar_path, 0);
    json sidecar;
    try {
        sidecar = json::parse(in);
    } catch (const json::parse_error& e) {
        throw FormatError(sidecar_path + ": invalid JSON at offset " + std::to_string(e.byte), e.byte);
    }
    if (!sidecar.contains("backbone") || !sidecar.contains("dms_ssim") || !sidecar.contains("config_hash"))
        throw FormatError(sidecar_path + ": missing backbone/dms_ssim/config_hash fields", 0);

    Checkpoint ck;
    ck.params.config = BackboneConfig::from_json(sidecar["backbone"].dump());
    ck.loss_config = ssim::DmsSsimConfig::from_json(sidecar["dms_ssim"].dump());

    const std::string stored = sidecar["config_hash"].get<std::string>();
    const std::string computed = config_hash(ck.params.config, ck.loss_config);
    if (stored != computed)
        throw FormatError(sidecar_path + ": config hash mismatch (stored " + stored + ", computed " +
                          computed + ")", 0);

    // Build the skeleton, then fill tensors by name with exact shape checks.
    ModelParams skeleton = init_params(ck.params.config, 0);
    skeleton.config = ck.params.config;
    NamedTensors stored_tensors = read_ntb(path);
    std::map<std::string, Tensor*> by_name;
    for (auto& [name, tensor] : stored_tensors) by_name[name] = &tensor;

    std::size_t used = 0;
    skeleton.for_each([&](const std::string& name, Tensor& dst) {
        auto it = by_name.find(name);
        if (it == by_name.end())
            throw FormatError(path + ": missing tensor \"" + name + "\"", 0);
        if (it->second->shape() != dst.shape())
            throw FormatError(path + ": tensor \"" + name + "\" has shape " + it->second->shape_str() +
                              ", expected " + dst.shape_str(), 0);
        dst = std::move(*it->second);
        ++used;
    });
    if (used != stored_tensors.size())
        throw FormatError(path + ": checkpoint contains " + std::to_string(stored_tensors.size()) +
                          " tensors, expected " + std::to_string(used), 0);
    ck.params = std::move(skeleton);
    return ck;
}

}  // namespace crowdkit::model
