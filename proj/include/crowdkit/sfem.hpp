#pragma once

#include <random>
#include <vector>

#include "crowdkit/tape.hpp"
#include "crowdkit/tensor.hpp"

namespace crowdkit::sfem {

/// Ordered set of same-resolution feature maps [C_i,H,W]. All members share
/// H and W; channel counts may differ per member.
struct FeatureGroup {
    std::vector<Tensor> features;

    int size() const { return static_cast<int>(features.size()); }
    void validate() const;
};

/// Mixing weights for one feature group: for every ordered pair i != j a
/// channels-to-channels map [C_i, C_j] applied as a 1x1 convolution, shared
/// across all refinement iterations. No bias terms.
struct SfemParams {
    int n_iter = 2;
    std::vector<std::vector<Tensor>> weights;  // [n][n]; diagonal entries empty

    int group_size() const { return static_cast<int>(weights.size()); }

    static SfemParams zeros(const std::vector<int>& channels, int n_iter = 2);
    static SfemParams gaussian_init(const std::vector<int>& channels, int n_iter,
                                    std::mt19937_64& rng, double std_dev = 1e-6);

    void validate_for(const FeatureGroup& group) const;
};

/// Mutual refinement by unrolled mean-field updates with synchronous
/// (Jacobi) iteration: h_i^0 = f_i, h_i^t = f_i + sum_{j != i} w_ij h_j^{t-1}.
FeatureGroup mean_field_refine(const FeatureGroup& group, const SfemParams& params);

/// Tape form used inside differentiable programs. `weights[i][j]` must hold
/// valid Vars for all i != j.
std::vector<Var> mean_field_refine(Tape& t, const std::vector<Var>& features,
                                   const std::vector<std::vector<Var>>& weights, int n_iter);

/// Deliberately naive scalar-loop reimplementation of the same contract,
/// kept as a conformance oracle. Shares no kernels with the fast path.
FeatureGroup mean_field_refine_reference(const FeatureGroup& group, const SfemParams& params);

}  // namespace crowdkit::sfem
