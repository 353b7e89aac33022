#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "crowdkit/ops.hpp"
#include "crowdkit/tensor.hpp"

namespace crowdkit {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; only valid for the tape that
/// produced it.
struct Var {
    std::uint64_t tape_id = 0;
    std::uint32_t index = 0;
};

/// Ordered record of executed differentiable operations. A reverse sweep
/// from a scalar loss produces gradients for every tracked node; values
/// feeding multiple consumers have their gradients accumulated.
class Tape {
public:
    Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Tracked input: receives a gradient in the reverse sweep.
    Var leaf(Tensor value);
    /// Untracked input: treated as fixed data.
    Var constant(Tensor value);

    const Tensor& value(Var v) const;
    std::size_t size() const { return nodes_.size(); }

    /// Reverse sweep from a scalar (one-element) loss node.
    void backward(Var loss);
    /// Gradient of the last backward() loss w.r.t. v (zeros if unreached).
    const Tensor& grad(Var v);

    // -- interface for operation implementations --
    using BackwardFn = std::function<void(Tape&, std::uint32_t self)>;
    Var record(Tensor value, std::vector<Var> parents, BackwardFn fn);
    bool tracked(Var v) const;
    Tensor& grad_buffer(Var v);  // zero-initialized on first use
    const Tensor& upstream(std::uint32_t self) const { return nodes_[self].grad; }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool tracked = false;
        bool has_grad = false;
        BackwardFn backward;
    };

    std::uint32_t check(Var v) const;

    std::vector<Node> nodes_;
    std::uint64_t id_;
};

// Operations recorded on a tape. Forward semantics match the plain Tensor
// kernels in ops.hpp.
Var conv2d(Tape& t, Var input, Var weights, std::optional<Var> bias, const ConvSpec& spec);
Var channel_map(Tape& t, Var weights, Var input, std::optional<Var> bias = std::nullopt);
Var bilinear_upsample_x2(Tape& t, Var x);
Var maxpool2x2(Tape& t, Var x);
Var relu(Tape& t, Var x);
Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var mul(Tape& t, Var a, Var b);
Var divide(Tape& t, Var a, Var b);
Var scale(Tape& t, Var x, double c);
Var add_const(Tape& t, Var x, double c);
Var sqrt(Tape& t, Var x);                    // d/dx at x == 0 is 0
Var clamp_min(Tape& t, Var x, double lo = 0.0);
Var pow_const(Tape& t, Var x, double exponent);
Var sum(Tape& t, Var x);
Var mean(Tape& t, Var x);
Var concat_channels(Tape& t, const std::vector<Var>& parts);
Var reshape(Tape& t, Var x, std::vector<int> shape);

}  // namespace crowdkit
