#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "crowdkit/density.hpp"
#include "crowdkit/model.hpp"
#include "crowdkit/ntb.hpp"
#include "crowdkit/ssim.hpp"
#include "crowdkit/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical failure.
constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kData = 2;
constexpr int kNumeric = 3;

void emit(const json& doc) { std::cout << doc.dump() << std::endl; }

crowdkit::ssim::DmsSsimConfig load_ssim_config(const std::string& explicit_path) {
    std::string path = explicit_path;
    if (path.empty()) {
        if (const char* dir = std::getenv("CROWDKIT_CONFIG_DIR")) {
            const fs::path candidate = fs::path(dir) / "dms_ssim.json";
            if (fs::exists(candidate)) path = candidate.string();
        }
    }
    if (path.empty()) return crowdkit::ssim::DmsSsimConfig::defaults();
    std::ifstream in(path);
    if (!in) throw crowdkit::FormatError("cannot open: " + path, 0);
    std::ostringstream buf;
    buf << in.rdbuf();
    return crowdkit::ssim::DmsSsimConfig::from_json(buf.str());
}

int run_gen_gt(const std::string& annotations_path, const std::string& out_path, int k, double beta,
               const std::string& pgm_path) {
    const crowdkit::density::AnnotationSet annotations = crowdkit::density::read_annotations(annotations_path);
    crowdkit::density::AdaptiveSigmaOptions opts;
    opts.k = k;
    opts.beta = beta;
    const std::vector<double> sigmas = crowdkit::density::adaptive_sigma(annotations.points, opts);
    const crowdkit::density::RenderResult result = crowdkit::density::render_density(annotations, sigmas);
    crowdkit::density::write_density(out_path, result.map);
    if (!pgm_path.empty()) crowdkit::density::write_pgm(pgm_path, result.map);
    json doc;
    doc["count"] = annotations.points.size();
    doc["integral"] = result.map.integral();
    doc["skipped_points"] = result.skipped;
    emit(doc);
    return kOk;
}

int run_ssim(const std::string& a_path, const std::string& b_path, const std::string& config_path) {
    const crowdkit::ssim::DmsSsimConfig cfg = load_ssim_config(config_path);
    const crowdkit::density::DensityMap a = crowdkit::density::read_density(a_path);
    const crowdkit::density::DensityMap b = crowdkit::density::read_density(b_path);
    const crowdkit::ssim::DmsSsimResult result = crowdkit::ssim::dms_ssim_loss(a.values, b.values, cfg);
    json doc;
    doc["dms_ssim"] = result.dms_ssim;
    doc["loss"] = result.loss;
    doc["per_scale"] = result.per_scale;
    if (result.clamped_scales > 0) {
        doc["clamped_scales"] = result.clamped_scales;
        std::cerr << "note: " << result.clamped_scales << " scale(s) clamped to the stability floor\n";
    }
    emit(doc);
    return kOk;
}

int run_train(const std::string& config_path) {
    const crowdkit::train::TrainConfig cfg = crowdkit::train::TrainConfig::from_file(config_path);
    const crowdkit::train::TrainResult result = crowdkit::train::train(cfg);
    json doc;
    doc["steps"] = cfg.steps;
    doc["final_loss"] = result.log.empty() ? json() : json(result.log.back().loss);
    doc["val_mae"] = result.val_log.empty() ? json() : json(result.final_val_mae);
    doc["val_mse"] = result.val_log.empty() ? json() : json(result.final_val_mse);
    doc["checkpoint"] = result.checkpoint_path;
    doc["best_checkpoint"] = result.best_checkpoint_path;
    doc["log"] = result.log_path;
    emit(doc);
    return kOk;
}

int run_eval(const std::string& checkpoint_path, const std::string& data_dir) {
    const crowdkit::model::Checkpoint ck = crowdkit::model::load_checkpoint(checkpoint_path);
    if (!fs::is_directory(data_dir))
        throw crowdkit::FormatError("data directory not found: " + data_dir, 0);

    std::vector<std::string> stems;
    for (const auto& entry : fs::directory_iterator(data_dir)) {
        const std::string name = entry.path().filename().string();
        const std::string suffix = ".annotations.json";
        if (name.size() > suffix.size() && name.substr(name.size() - suffix.size()) == suffix)
            stems.push_back(name.substr(0, name.size() - suffix.size()));
    }
    std::sort(stems.begin(), stems.end());
    if (stems.empty())
        throw crowdkit::FormatError("no *.annotations.json files in " + data_dir, 0);

    std::vector<std::pair<crowdkit::Tensor, crowdkit::density::AnnotationSet>> dataset;
    for (const std::string& stem : stems) {
        const fs::path ann_path = fs::path(data_dir) / (stem + ".annotations.json");
        const fs::path img_path = fs::path(data_dir) / (stem + ".image.ntb");
        if (!fs::exists(img_path))
            throw crowdkit::FormatError("missing image file: " + img_path.string(), 0);
        crowdkit::NamedTensors tensors = crowdkit::read_ntb(img_path.string());
        const crowdkit::Tensor* image = nullptr;
        for (const auto& [name, tensor] : tensors)
            if (name == "image") image = &tensor;
        if (!image)
            throw crowdkit::FormatError(img_path.string() + ": no tensor named \"image\"", 0);
        dataset.emplace_back(*image, crowdkit::density::read_annotations(ann_path.string()));
    }
    const crowdkit::train::EvalReport report = crowdkit::train::evaluate(ck.params, dataset);
    json doc;
    doc["mae"] = report.mae;
    doc["mse"] = report.mse;
    doc["n"] = report.per_image.size();
    emit(doc);
    return kOk;
}

int run_inspect(const std::string& checkpoint_path) {
    const crowdkit::model::Checkpoint ck = crowdkit::model::load_checkpoint(checkpoint_path);
    json tensors = json::array();
    std::size_t total = 0;
    ck.params.for_each([&tensors, &total](const std::string& name, const crowdkit::Tensor& t) {
        double sq = 0.0;
        for (std::size_t i = 0; i < t.numel(); ++i) sq += t[i] * t[i];
        json entry;
        entry["name"] = name;
        entry["shape"] = t.shape();
        entry["norm"] = std::sqrt(sq);
        tensors.push_back(entry);
        total += t.numel();
    });
    json doc;
    doc["tensors"] = tensors;
    doc["parameter_count"] = total;
    doc["config_hash"] = crowdkit::model::config_hash(ck.params.config, ck.loss_config);
    emit(doc);
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"crowdkit: crowd density map toolkit"};
    app.require_subcommand(1);
    int threads = 1;
    app.add_option("--threads", threads, "worker threads (1 = deterministic serial mode)")
        ->check(CLI::PositiveNumber);

    auto* gen = app.add_subcommand("gen-gt", "render a ground-truth density map from annotations");
    std::string gen_annotations, gen_out, gen_pgm;
    int gen_k = 3;
    double gen_beta = 0.3;
    gen->add_option("--annotations", gen_annotations, "annotation JSON file")->required();
    gen->add_option("--out", gen_out, "output density file (DMP1)")->required();
    gen->add_option("--k", gen_k, "neighbor count for adaptive sigma");
    gen->add_option("--beta", gen_beta, "sigma as a fraction of the mean k-NN distance");
    gen->add_option("--pgm", gen_pgm, "optional 16-bit PGM export for inspection");

    auto* ssim_cmd = app.add_subcommand("ssim", "dilated multiscale SSIM between two density maps");
    std::string ssim_a, ssim_b, ssim_config;
    ssim_cmd->add_option("--a", ssim_a, "first density file")->required();
    ssim_cmd->add_option("--b", ssim_b, "second density file")->required();
    ssim_cmd->add_option("--config", ssim_config, "DMS-SSIM config JSON (default: built-in)");

    auto* train_cmd = app.add_subcommand("train", "train the mini model on synthetic scenes");
    std::string train_config;
    train_cmd->add_option("--config", train_config, "training config JSON")->required();

    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset directory");
    std::string eval_checkpoint, eval_data;
    eval_cmd->add_option("--checkpoint", eval_checkpoint, "model checkpoint path")->required();
    eval_cmd->add_option("--data", eval_data, "directory of *.annotations.json + *.image.ntb pairs")->required();

    auto* inspect_cmd = app.add_subcommand("inspect", "list checkpoint tensors, shapes and norms");
    std::string inspect_checkpoint;
    inspect_cmd->add_option("--checkpoint", inspect_checkpoint, "model checkpoint path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << '\n';
        return kUsage;
    }

    if (threads != 1)
        std::cerr << "note: execution is serial; --threads " << threads << " has no effect\n";

    try {
        if (gen->parsed()) return run_gen_gt(gen_annotations, gen_out, gen_k, gen_beta, gen_pgm);
        if (ssim_cmd->parsed()) return run_ssim(ssim_a, ssim_b, ssim_config);
        if (train_cmd->parsed()) return run_train(train_config);
        if (eval_cmd->parsed()) return run_eval(eval_checkpoint, eval_data);
        if (inspect_cmd->parsed()) return run_inspect(inspect_checkpoint);
    } catch (const crowdkit::NumericError& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return kNumeric;
    } catch (const crowdkit::FormatError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kData;
    } catch (const crowdkit::ShapeError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kData;
    }
    return kUsage;
}
