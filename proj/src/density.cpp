#include "crowdkit/density.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace crowdkit::density {

using nlohmann::json;

void AnnotationSet::validate() const {
    if (width <= 0 || height <= 0)
        throw ShapeError("annotation canvas must be positive, got " + std::to_string(width) + "x" +
                         std::to_string(height));
    for (std::size_t i = 0; i < points.size(); ++i) {
        if (!std::isfinite(points[i][0]) || !std::isfinite(points[i][1]))
            throw ShapeError("annotation point " + std::to_string(i) + " is not finite");
    }
}

std::vector<double> adaptive_sigma(const std::vector<std::array<double, 2>>& points,
                                   const AdaptiveSigmaOptions& opts) {
    if (opts.k < 1) throw ShapeError("adaptive_sigma: k must be >= 1, got " + std::to_string(opts.k));
    for (std::size_t i = 0; i < points.size(); ++i) {
        if (!std::isfinite(points[i][0]) || !std::isfinite(points[i][1]))
            throw ShapeError("adaptive_sigma: point " + std::to_string(i) + " is not finite");
    }
    const std::size_t n = points.size();
    std::vector<double> sigmas(n);
    std::vector<double> dists;
    dists.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        dists.clear();
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            const double dx = points[i][0] - points[j][0];
            const double dy = points[i][1] - points[j][1];
            dists.push_back(std::sqrt(dx * dx + dy * dy));
        }
        double sigma;
        if (dists.empty()) {
            sigma = opts.sigma_default;
        } else {
            const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(opts.k), dists.size());
            std::partial_sort(dists.begin(), dists.begin() + static_cast<std::ptrdiff_t>(take), dists.end());
            double mean = 0.0;
            for (std::size_t t = 0; t < take; ++t) mean += dists[t];
            mean /= static_cast<double>(take);
            sigma = opts.beta * mean;
        }
        sigmas[i] = std::max(sigma, opts.sigma_min);
    }
    return sigmas;
}

RenderResult render_density(const AnnotationSet& annotations, const std::vector<double>& sigmas) {
    annotations.validate();
    if (sigmas.size() != annotations.points.size())
        throw ShapeError("render_density: sigma count " + std::to_string(sigmas.size()) +
                         " does not match point count " + std::to_string(annotations.points.size()));
    for (std::size_t i = 0; i < sigmas.size(); ++i) {
        if (!(sigmas[i] > 0.0))
            throw ShapeError("render_density: sigma must be positive, got " + std::to_string(sigmas[i]) +
                             " at index " + std::to_string(i));
    }
    const int H = annotations.height, W = annotations.width;
    RenderResult result;
    result.map.values = Tensor({H, W});
    Tensor& map = result.map.values;

    std::vector<double> weights;
    for (std::size_t p = 0; p < annotations.points.size(); ++p) {
        const double x = annotations.points[p][0];
        const double y = annotations.points[p][1];
        const double sigma = sigmas[p];
        const double half = std::ceil(3.0 * sigma);
        const int x0 = std::max(0, static_cast<int>(std::ceil(x - half)));
        const int x1 = std::min(W - 1, static_cast<int>(std::floor(x + half)));
        const int y0 = std::max(0, static_cast<int>(std::ceil(y - half)));
        const int y1 = std::min(H - 1, static_cast<int>(std::floor(y + half)));
        if (x0 > x1 || y0 > y1) {
            ++result.skipped;
            continue;
        }
        const int wn = x1 - x0 + 1;
        const int hn = y1 - y0 + 1;
        weights.assign(static_cast<std::size_t>(wn) * hn, 0.0);
        const double inv = 1.0 / (2.0 * sigma * sigma);
        double total = 0.0;
        std::size_t w_idx = 0;
        for (int i = y0; i <= y1; ++i) {
            const double dy = static_cast<double>(i) - y;
            for (int j = x0; j <= x1; ++j, ++w_idx) {
                const double dx = static_cast<double>(j) - x;
                const double g = std::exp(-(dx * dx + dy * dy) * inv);
                weights[w_idx] = g;
                total += g;
            }
        }
        if (!(total > 0.0)) {
            ++result.skipped;
            continue;
        }
        const double norm = 1.0 / total;
        w_idx = 0;
        for (int i = y0; i <= y1; ++i) {
            for (int j = x0; j <= x1; ++j, ++w_idx) {
                map.at(i, j) += weights[w_idx] * norm;
            }
        }
        ++result.rendered;
    }
    return result;
}

AnnotationSet read_annotations(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open: " + path, 0);
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::parse_error& e) {
        throw FormatError(path + ": invalid JSON at offset " + std::to_string(e.byte) + ": " + e.what(),
                          e.byte);
    }
    AnnotationSet a;
    try {
        if (!doc.is_object()) throw FormatError(path + ": top-level value must be an object", 0);
        if (!doc.contains("width") || !doc["width"].is_number_integer())
            throw FormatError(path + ": missing or non-integer field \"width\"", 0);
        if (!doc.contains("height") || !doc["height"].is_number_integer())
            throw FormatError(path + ": missing or non-integer field \"height\"", 0);
        a.width = doc["width"].get<int>();
        a.height = doc["height"].get<int>();
        if (!doc.contains("points") || !doc["points"].is_array())
            throw FormatError(path + ": missing or non-array field \"points\"", 0);
        for (const auto& pt : doc["points"]) {
            if (!pt.is_array() || pt.size() != 2 || !pt[0].is_number() || !pt[1].is_number())
                throw FormatError(path + ": each point must be a [x, y] number pair", 0);
            a.points.push_back({pt[0].get<double>(), pt[1].get<double>()});
        }
    } catch (const json::exception& e) {
        throw FormatError(path + ": " + e.what(), 0);
    }
    if (a.width <= 0 || a.height <= 0)
        throw FormatError(path + ": canvas size must be positive, got " + std::to_string(a.width) + "x" +
                          std::to_string(a.height), 0);
    return a;
}

void write_annotations(const std::string& path, const AnnotationSet& annotations) {
    json doc;
    doc["width"] = annotations.width;
    doc["height"] = annotations.height;
    doc["points"] = json::array();
    for (const auto& p : annotations.points) doc["points"].push_back({p[0], p[1]});
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FormatError("cannot open for writing: " + path, 0);
    out << doc.dump(2) << '\n';
    if (!out) throw FormatError("write failed: " + path, 0);
}

namespace {

constexpr char kDensityMagic[4] = {'D', 'M', 'P', '1'};

void put_u32(std::ofstream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::ifstream& in, std::uint64_t offset, const std::string& path, const char* what) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (in.gcount() != 4)
        throw FormatError(path + ": truncated " + what + " at offset " + std::to_string(offset), offset);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_density(const std::string& path, const DensityMap& map) {
    if (map.values.rank() != 2)
        throw ShapeError("write_density: map must be rank 2 [H,W], got " + map.values.shape_str());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open for writing: " + path, 0);
    out.write(kDensityMagic, 4);
    put_u32(out, static_cast<std::uint32_t>(map.height()));
    put_u32(out, static_cast<std::uint32_t>(map.width()));
    out.write(reinterpret_cast<const char*>(map.values.data()),
              static_cast<std::streamsize>(map.values.numel() * sizeof(double)));
    if (!out) throw FormatError("write failed: " + path, 0);
}

DensityMap read_density(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open: " + path, 0);
    char magic[4];
    in.read(magic, 4);
    if (in.gcount() != 4 || std::memcmp(magic, kDensityMagic, 4) != 0)
        throw FormatError(path + ": bad magic at offset 0", 0);
    const std::uint32_t h = get_u32(in, 4, path, "height");
    const std::uint32_t w = get_u32(in, 8, path, "width");
    if (h == 0 || w == 0 || static_cast<std::uint64_t>(h) * w > (std::uint64_t{1} << 32))
        throw FormatError(path + ": implausible map size " + std::to_string(h) + "x" + std::to_string(w) +
                          " at offset 4", 4);
    std::vector<double> values(static_cast<std::size_t>(h) * w);
    in.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(double)));
    const auto got = static_cast<std::size_t>(in.gcount());
    if (got != values.size() * sizeof(double)) {
        const std::uint64_t off = 12 + got;
        throw FormatError(path + ": truncated payload at offset " + std::to_string(off) + " (expected " +
                          std::to_string(values.size() * sizeof(double)) + " bytes)", off);
    }
    DensityMap map;
    map.values = Tensor({static_cast<int>(h), static_cast<int>(w)}, std::move(values));
    return map;
}

void write_pgm(const std::string& path, const DensityMap& map) {
    if (map.values.rank() != 2)
        throw ShapeError("write_pgm: map must be rank 2 [H,W], got " + map.values.shape_str());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open for writing: " + path, 0);
    const int h = map.height(), w = map.width();
    out << "P5\n" << w << " " << h << "\n65535\n";
    const double peak = map.values.max();
    const double scale = peak > 0.0 ? 65535.0 / peak : 0.0;
    for (std::size_t i = 0; i < map.values.numel(); ++i) {
        const double v = std::clamp(map.values[i] * scale, 0.0, 65535.0);
        const auto s = static_cast<std::uint16_t>(std::lround(v));
        const unsigned char b[2] = {static_cast<unsigned char>(s >> 8), static_cast<unsigned char>(s & 0xff)};
        out.write(reinterpret_cast<const char*>(b), 2);
    }
    if (!out) throw FormatError("write failed: " + path, 0);
}

}  // namespace crowdkit::density
