#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "crowdkit/errors.hpp"

namespace crowdkit {

// Product of dimensions; rejects negative dims. Empty shape is a scalar.
std::size_t shape_numel(const std::vector<int>& shape);

/// Dense row-major tensor of doubles. Conventions used throughout:
/// feature maps [C,H,W], plain maps [H,W], conv weights [Cout,Cin,kh,kw],
/// channel-mixing weights [Cout,Cin], scalars rank 0.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape);
    Tensor(std::vector<int> shape, std::vector<double> values);

    static Tensor scalar(double v);
    static Tensor full(std::vector<int> shape, double v);

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int axis) const { return shape_[static_cast<std::size_t>(axis)]; }
    std::size_t numel() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    // Unchecked indexed access; rank must match the overload.
    double& at(int i, int j) { return data_[idx2(i, j)]; }
    double at(int i, int j) const { return data_[idx2(i, j)]; }
    double& at(int c, int y, int x) { return data_[idx3(c, y, x)]; }
    double at(int c, int y, int x) const { return data_[idx3(c, y, x)]; }
    double& at(int o, int c, int y, int x) { return data_[idx4(o, c, y, x)]; }
    double at(int o, int c, int y, int x) const { return data_[idx4(o, c, y, x)]; }

    // Extracts the single element of a one-element tensor.
    double value() const;

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool all_finite() const;
    double sum() const;
    double min() const;
    double max() const;
    double abs_max() const;

    std::string shape_str() const;  // e.g. "[16,32,3,3]"

private:
    std::size_t idx2(int i, int j) const {
        return static_cast<std::size_t>(i) * shape_[1] + j;
    }
    std::size_t idx3(int c, int y, int x) const {
        return (static_cast<std::size_t>(c) * shape_[1] + y) * shape_[2] + x;
    }
    std::size_t idx4(int o, int c, int y, int x) const {
        return ((static_cast<std::size_t>(o) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x;
    }

    std::vector<int> shape_;
    std::vector<double> data_;
};

}  // namespace crowdkit
