#pragma once

#include <array>
#include <string>
#include <vector>

#include "crowdkit/tensor.hpp"

namespace crowdkit::density {

/// Head-point annotations for one image. Coordinates are pixels with the
/// origin at the top-left; points may lie outside the canvas (they are
/// handled at render time, not parse time).
struct AnnotationSet {
    int width = 0;
    int height = 0;
    std::vector<std::array<double, 2>> points;  // (x, y)

    void validate() const;
};

/// Single-channel density map; pixel units are persons per pixel, so the
/// integral over a region is the expected head count there. Rendered
/// ground-truth maps are nonnegative with integral == rendered point count.
struct DensityMap {
    Tensor values;  // [H,W]

    int height() const { return values.dim(0); }
    int width() const { return values.dim(1); }
    double integral() const { return values.sum(); }
};

/// Per-point Gaussian spread: beta times the mean distance to the k nearest
/// other points. With n <= k other points the available distances are
/// averaged; an isolated point gets sigma_default. All results are clamped
/// to at least sigma_min.
struct AdaptiveSigmaOptions {
    int k = 3;
    double beta = 0.3;
    double sigma_default = 15.0;
    double sigma_min = 1.0;
};

std::vector<double> adaptive_sigma(const std::vector<std::array<double, 2>>& points,
                                   const AdaptiveSigmaOptions& opts = {});

struct RenderResult {
    DensityMap map;
    int rendered = 0;
    int skipped = 0;  // points with no in-image support
};

/// Renders each point as a discrete Gaussian evaluated at pixel centers,
/// zeroed outside the ceil(3*sigma) square window and outside the image,
/// renormalized so every rendered point contributes exactly 1.
RenderResult render_density(const AnnotationSet& annotations, const std::vector<double>& sigmas);

// Annotation file: UTF-8 JSON {"width": int, "height": int, "points": [[x,y],...]}.
AnnotationSet read_annotations(const std::string& path);
void write_annotations(const std::string& path, const AnnotationSet& annotations);

// Density-map file: magic "DMP1", u32 LE height, u32 LE width, then H*W f64
// LE row-major values. Round-trips bit-exactly.
void write_density(const std::string& path, const DensityMap& map);
DensityMap read_density(const std::string& path);

// 16-bit max-scaled PGM export for inspection; lossy, never read back.
void write_pgm(const std::string& path, const DensityMap& map);

}  // namespace crowdkit::density
