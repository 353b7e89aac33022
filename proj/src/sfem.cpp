#include "crowdkit/sfem.hpp"

#include <string>

namespace crowdkit::sfem {

void FeatureGroup::validate() const {
    if (features.size() < 2)
        throw ShapeError("FeatureGroup: need at least 2 features, got " + std::to_string(features.size()));
    const Tensor& first = features[0];
    if (first.rank() != 3)
        throw ShapeError("FeatureGroup: features must be rank 3 [C,H,W], got " + first.shape_str());
    for (std::size_t i = 1; i < features.size(); ++i) {
        const Tensor& f = features[i];
        if (f.rank() != 3 || f.dim(1) != first.dim(1) || f.dim(2) != first.dim(2))
            throw ShapeError("FeatureGroup: feature " + std::to_string(i) + " shape " + f.shape_str() +
                             " does not spatially match " + first.shape_str());
    }
}

SfemParams SfemParams::zeros(const std::vector<int>& channels, int n_iter) {
    SfemParams p;
    p.n_iter = n_iter;
    const std::size_t n = channels.size();
    p.weights.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        p.weights[i].resize(n);
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j) continue;
            p.weights[i][j] = Tensor({channels[i], channels[j]});
        }
    }
    return p;
}

SfemParams SfemParams::gaussian_init(const std::vector<int>& channels, int n_iter,
                                     std::mt19937_64& rng, double std_dev) {
    SfemParams p = zeros(channels, n_iter);
    std::normal_distribution<double> dist(0.0, std_dev);
    for (auto& row : p.weights) {
        for (Tensor& w : row) {
            for (std::size_t k = 0; k < w.numel(); ++k) w[k] = dist(rng);
        }
    }
    return p;
}

void SfemParams::validate_for(const FeatureGroup& group) const {
    group.validate();
    if (n_iter < 1) throw ShapeError("SfemParams: n_iter must be >= 1, got " + std::to_string(n_iter));
    const int n = group.size();
    if (group_size() != n)
        throw ShapeError("SfemParams: weights for " + std::to_string(group_size()) +
                         " features, group has " + std::to_string(n));
    for (int i = 0; i < n; ++i) {
        if (static_cast<int>(weights[static_cast<std::size_t>(i)].size()) != n)
            throw ShapeError("SfemParams: weight row " + std::to_string(i) + " has wrong size");
        for (int j = 0; j < n; ++j) {
            if (i == j) continue;
            const Tensor& w = weights[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
            const int ci = group.features[static_cast<std::size_t>(i)].dim(0);
            const int cj = group.features[static_cast<std::size_t>(j)].dim(0);
            if (w.rank() != 2 || w.dim(0) != ci || w.dim(1) != cj)
                throw ShapeError("SfemParams: weight w_" + std::to_string(i + 1) + "_" +
                                 std::to_string(j + 1) + " shape " + w.shape_str() + " does not map " +
                                 std::to_string(cj) + " -> " + std::to_string(ci) + " channels");
        }
    }
}

std::vector<Var> mean_field_refine(Tape& t, const std::vector<Var>& features,
                                   const std::vector<std::vector<Var>>& weights, int n_iter) {
    if (features.size() < 2) throw ShapeError("mean_field_refine: need at least 2 features");
    if (n_iter < 1) throw ShapeError("mean_field_refine: n_iter must be >= 1");
    const std::size_t n = features.size();
    std::vector<Var> h = features;
    for (int it = 0; it < n_iter; ++it) {
        std::vector<Var> next;
        next.reserve(n);
        for (std::size_t i = 0; i < n; ++i) {
            Var acc = features[i];
            for (std::size_t j = 0; j < n; ++j) {
                if (j == i) continue;
                acc = add(t, acc, channel_map(t, weights[i][j], h[j]));
            }
            next.push_back(acc);
        }
        h = std::move(next);
    }
    return h;
}

FeatureGroup mean_field_refine(const FeatureGroup& group, const SfemParams& params) {
    params.validate_for(group);
    Tape t;
    std::vector<Var> features;
    features.reserve(group.features.size());
    for (const Tensor& f : group.features) features.push_back(t.constant(f));
    const int n = group.size();
    std::vector<std::vector<Var>> weights(static_cast<std::size_t>(n),
                                          std::vector<Var>(static_cast<std::size_t>(n)));
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            if (i != j)
                weights[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] =
                    t.constant(params.weights[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]);
    const std::vector<Var> out = mean_field_refine(t, features, weights, params.n_iter);
    FeatureGroup refined;
    refined.features.reserve(out.size());
    for (Var v : out) refined.features.push_back(t.value(v));
    return refined;
}

FeatureGroup mean_field_refine_reference(const FeatureGroup& group, const SfemParams& params) {
    params.validate_for(group);
    const int n = group.size();
    const int H = group.features[0].dim(1);
    const int W = group.features[0].dim(2);

    std::vector<Tensor> h = group.features;
    for (int it = 0; it < params.n_iter; ++it) {
        std::vector<Tensor> next;
        next.reserve(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            const Tensor& fi = group.features[static_cast<std::size_t>(i)];
            Tensor out = fi;
            const int ci = fi.dim(0);
            for (int j = 0; j < n; ++j) {
                if (j == i) continue;
                const Tensor& w = params.weights[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
                const Tensor& hj = h[static_cast<std::size_t>(j)];
                const int cj = hj.dim(0);
                for (int co = 0; co < ci; ++co) {
                    for (int y = 0; y < H; ++y) {
                        for (int x = 0; x < W; ++x) {
                            double acc = 0.0;
                            for (int cc = 0; cc < cj; ++cc) acc += w.at(co, cc) * hj.at(cc, y, x);
                            out.at(co, y, x) += acc;
                        }
                    }
                }
            }
            next.push_back(std::move(out));
        }
        h = std::move(next);
    }
    FeatureGroup refined;
    refined.features = std::move(h);
    return refined;
}

}  // namespace crowdkit::sfem
