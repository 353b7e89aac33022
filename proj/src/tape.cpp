#include "crowdkit/tape.hpp"

#include <atomic>
#include <cmath>
#include <memory>
#include <utility>

namespace crowdkit {

namespace {
std::atomic<std::uint64_t> g_next_tape_id{1};
}

Tape::Tape() : id_(g_next_tape_id.fetch_add(1)) {}

std::uint32_t Tape::check(Var v) const {
    if (v.tape_id != id_ || v.index >= nodes_.size())
        throw ShapeError("node is not on this tape");
    return v.index;
}

Var Tape::leaf(Tensor value) {
    Node n;
    n.value = std::move(value);
    n.tracked = true;
    nodes_.push_back(std::move(n));
    return {id_, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::constant(Tensor value) {
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return {id_, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

const Tensor& Tape::value(Var v) const { return nodes_[check(v)].value; }

bool Tape::tracked(Var v) const { return nodes_[check(v)].tracked; }

Var Tape::record(Tensor value, std::vector<Var> parents, BackwardFn fn) {
    bool tracked = false;
    for (Var p : parents) tracked = tracked || this->tracked(p);
    Node n;
    n.value = std::move(value);
    n.tracked = tracked;
    if (tracked) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return {id_, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Tensor& Tape::grad_buffer(Var v) {
    Node& n = nodes_[check(v)];
    if (!n.has_grad) {
        n.grad = Tensor(n.value.shape());
        n.has_grad = true;
    }
    return n.grad;
}

const Tensor& Tape::grad(Var v) { return grad_buffer(v); }

void Tape::backward(Var loss) {
    const std::uint32_t root = check(loss);
    if (nodes_[root].value.numel() != 1)
        throw ShapeError("backward: loss must be a scalar, shape is " + nodes_[root].value.shape_str());
    for (Node& n : nodes_) {
        n.has_grad = false;
        n.grad = Tensor();
    }
    grad_buffer(loss)[0] = 1.0;
    for (std::uint32_t i = root + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.tracked || !n.has_grad || !n.backward) continue;
        n.backward(*this, i);
    }
}

// ---------------------------------------------------------------------------
// Operations

Var conv2d(Tape& t, Var input, Var weights, std::optional<Var> bias, const ConvSpec& spec) {
    const Tensor* b = bias ? &t.value(*bias) : nullptr;
    Tensor y = conv2d(t.value(input), t.value(weights), b, spec);
    std::vector<Var> parents{input, weights};
    if (bias) parents.push_back(*bias);
    return t.record(std::move(y), std::move(parents), [=](Tape& tp, std::uint32_t self) {
        const Tensor& g = tp.upstream(self);
        if (tp.tracked(input)) conv2d_grad_input_into(g, tp.value(weights), spec, tp.grad_buffer(input));
        if (tp.tracked(weights)) conv2d_grad_weights_into(g, tp.value(input), spec, tp.grad_buffer(weights));
        if (bias && tp.tracked(*bias)) conv2d_grad_bias_into(g, tp.grad_buffer(*bias));
    });
}

Var channel_map(Tape& t, Var weights, Var input, std::optional<Var> bias) {
    const Tensor* b = bias ? &t.value(*bias) : nullptr;
    Tensor y = channel_map(t.value(weights), t.value(input), b);
    std::vector<Var> parents{weights, input};
    if (bias) parents.push_back(*bias);
    return t.record(std::move(y), std::move(parents), [=](Tape& tp, std::uint32_t self) {
        const Tensor& g = tp.upstream(self);
        if (tp.tracked(input)) channel_map_grad_input_into(g, tp.value(weights), tp.grad_buffer(input));
        if (tp.tracked(weights)) channel_map_grad_weights_into(g, tp.value(input), tp.grad_buffer(weights));
        if (bias && tp.tracked(*bias)) conv2d_grad_bias_into(g, tp.grad_buffer(*bias));
    });
}

Var bilinear_upsample_x2(Tape& t, Var x) {
    Tensor y = bilinear_upsample_x2(t.value(x));
    return t.record(std::move(y), {x}, [=](Tape& tp, std::uint32_t self) {
        if (tp.tracked(x)) bilinear_resize_grad_into(tp.upstream(self), tp.grad_buffer(x));
    });
}

Var maxpool2x2(Tape& t, Var x) {
    auto argmax = std::make_shared<std::vector<int>>();
    Tensor y = maxpool2x2(t.value(x), argmax.get());
    return t.record(std::move(y), {x}, [=](Tape& tp, std::uint32_t self) {
        if (tp.tracked(x)) maxpool2x2_grad_into(tp.upstream(self), *argmax, tp.grad_buffer(x));
    });
}

Var relu(Tape& t, Var x) {
    Tensor y = relu(t.value(x));
    return t.record(std::move(y), {x}, [=](Tape& tp, std::uint32_t self) {
        if (!tp.tracked(x)) return;
        const Tensor& g = tp.upstream(self);
        const Tensor& xv = tp.value(x);
        Tensor& dx = tp.grad_buffer(x);
        for (std::size_t i = 0; i < g.numel(); ++i)
            if (xv[i] > 0.0) dx[i] += g[i];
    });
}

Var add(Tape& t, Var a, Var b) {
    Tensor y = add(t.value(a), t.value(b));
    return t.record(std::move(y), {a, b}, [=](Tape& tp, std::uint32_t self) {
        const Tensor& g = tp.upstream(self);
        if (tp.tracked(a)) {
            Tensor& da = tp.grad_buffer(a);
            for (std::size_t i = 0; i < g.numel(); ++i) da[i] += g[i];
        }
        if (tp.tracked(b)) {
            Tensor& db = tp.grad_buffer(b);
            for (std::size_t i = 0; i < g.numel(); ++i) db[i] += g[i];
        }
    });
}

Var sub(Tape& t, Var a, Var b) {
    Tensor y = sub(t.value(a), t.value(b));
    return t.record(std::move(y), {a, b}, [=](Tape& tp, std::uint32_t self) {
        const Tensor& g = tp.upstream(self);
        if (tp.tracked(a)) {
            Tensor& da = tp.grad_buffer(a);
            for (std::size_t i = 0; i < g.numel(); ++i) da[i] += g[i];
        }
        if (tp.tracked(b)) {
            Tensor& db = tp.grad_buffer(b);
            for (std::size_t i = 0; i < g.numel(); ++i) db[i] -= g[i];
        }
    });
}

Var mul(Tape& t, Var a, Var b) {
    Tensor y = mul(t.value(a), t.value(b));
    return t.record(std::move(y), {a, b}, [=](Tape& tp, std::uint32_t self) {
        const Tensor& g = tp.upstream(self);
        const Tensor& av = tp.value(a);
        const Tensor& bv = tp.value(b);
        if (tp.tracked(a)) {
            Tensor& da = tp.grad_buffer(a);
            for (std::size_t i = 0; i < g.numel(); ++i) da[i] += g[i] * bv[i];
        }
        if (tp.tracked(b)) {
            Tensor& db = tp.grad_buffer(b);
            for (std::size_t i = 0; i < g.numel(); ++i) db[i] += g[i] * av[i];
        }
    });
}

Var divide(Tape& t, Var a, Var b) {
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    if (!av.same_shape(bv))
        throw ShapeError("divide: operand shapes " + av.shape_str() + " and " + bv.shape_str() + " do not match");
    Tensor y(av.shape());
    for (std::size_t i = 0; i < y.numel(); ++i) y[i] = av[i] / bv[i];
    return t.record(std::move(y), {a, b}, [=](Tape& tp, std::uint32_t self) {
        const Tensor& g = tp.upstream(self);
        const Tensor& an = tp.value(a);
        const Tensor& bn = tp.value(b);
        if (tp.tracked(a)) {
            Tensor& da = tp.grad_buffer(a);
            for (std::size_t i = 0; i < g.numel(); ++i) da[i] += g[i] / bn[i];
        }
        if (tp.tracked(b)) {
            Tensor& db = tp.grad_buffer(b);
            for (std::size_t i = 0; i < g.numel(); ++i) db[i] -= g[i] * an[i] / (bn[i] * bn[i]);
        }
    });
}

Var scale(Tape& t, Var x, double c) {
    Tensor y = scale(t.value(x), c);
    return t.record(std::move(y), {x}, [=](Tape& tp, std::uint32_t self) {
        if (!tp.tracked(x)) return;
        const Tensor& g = tp.upstream(self);
        Tensor& dx = tp.grad_buffer(x);
        for (std::size_t i = 0; i < g.numel(); ++i) dx[i] += g[i] * c;
    });
}

Var add_const(Tape& t, Var x, double c) {
    Tensor y = add_const(t.value(x), c);
    return t.record(std::move(y), {x}, [=](Tape& tp, std::uint32_t self) {
        if (!tp.tracked(x)) return;
        const Tensor& g = tp.upstream(self);
        Tensor& dx = tp.grad_buffer(x);
        for (std::size_t i = 0; i < g.numel(); ++i) dx[i] += g[i];
    });
}

Var sqrt(Tape& t, Var x) {
    const Tensor& xv = t.value(x);
    Tensor y(xv.shape());
    for (std::size_t i = 0; i < y.numel(); ++i) y[i] = std::sqrt(xv[i]);
    return t.record(std::move(y), {x}, [=](Tape& tp, std::uint32_t self) {
        if (!tp.tracked(x)) return;
        const Tensor& g = tp.upstream(self);
        const Tensor& xn = tp.value(x);
        Tensor& dx = tp.grad_buffer(x);
        for (std::size_t i = 0; i < g.numel(); ++i)
            if (xn[i] > 0.0) dx[i] += g[i] * 0.5 / std::sqrt(xn[i]);
    });
}

Var clamp_min(Tape& t, Var x, double lo) {
    const Tensor& xv = t.value(x);
    Tensor y(xv.shape());
    for (std::size_t i = 0; i < y.numel(); ++i) y[i] = xv[i] > lo ? xv[i] : lo;
    return t.record(std::move(y), {x}, [=](Tape& tp, std::uint32_t self) {
        if (!tp.tracked(x)) return;
        const Tensor& g = tp.upstream(self);
        const Tensor& xn = tp.value(x);
        Tensor& dx = tp.grad_buffer(x);
        for (std::size_t i = 0; i < g.numel(); ++i)
            if (xn[i] > lo) dx[i] += g[i];
    });
}

Var pow_const(Tape& t, Var x, double exponent) {
    const Tensor& xv = t.value(x);
    Tensor y(xv.shape());
    for (std::size_t i = 0; i < y.numel(); ++i) y[i] = std::pow(xv[i], exponent);
    return t.record(std::move(y), {x}, [=](Tape& tp, std::uint32_t self) {
        if (!tp.tracked(x)) return;
        const Tensor& g = tp.upstream(self);
        const Tensor& xn = tp.value(x);
        Tensor& dx = tp.grad_buffer(x);
        for (std::size_t i = 0; i < g.numel(); ++i)
            dx[i] += g[i] * exponent * std::pow(xn[i], exponent - 1.0);
    });
}

Var sum(Tape& t, Var x) {
    Tensor y = Tensor::scalar(t.value(x).sum());
    return t.record(std::move(y), {x}, [=](Tape& tp, std::uint32_t self) {
        if (!tp.tracked(x)) return;
        const double g = tp.upstream(self)[0];
        Tensor& dx = tp.grad_buffer(x);
        for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += g;
    });
}

Var mean(Tape& t, Var x) {
    const std::size_t n = t.value(x).numel();
    if (n == 0) throw ShapeError("mean: empty tensor");
    Tensor y = Tensor::scalar(t.value(x).sum() / static_cast<double>(n));
    return t.record(std::move(y), {x}, [=](Tape& tp, std::uint32_t self) {
        if (!tp.tracked(x)) return;
        const double g = tp.upstream(self)[0] / static_cast<double>(n);
        Tensor& dx = tp.grad_buffer(x);
        for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += g;
    });
}

Var concat_channels(Tape& t, const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_channels: no inputs");
    int channels = 0;
    const Tensor& first = t.value(parts[0]);
    if (first.rank() != 3) throw ShapeError("concat_channels: inputs must be rank 3 [C,H,W]");
    const int h = first.dim(1), w = first.dim(2);
    for (const Var& p : parts) {
        const Tensor& v = t.value(p);
        if (v.rank() != 3 || v.dim(1) != h || v.dim(2) != w)
            throw ShapeError("concat_channels: input shape " + v.shape_str() + " does not match " +
                             first.shape_str() + " spatially");
        channels += v.dim(0);
    }
    Tensor y({channels, h, w});
    std::size_t off = 0;
    for (const Var& p : parts) {
        const Tensor& v = t.value(p);
        std::copy(v.data(), v.data() + v.numel(), y.data() + off);
        off += v.numel();
    }
    return t.record(std::move(y), parts, [parts](Tape& tp, std::uint32_t self) {
        const Tensor& g = tp.upstream(self);
        std::size_t off = 0;
        for (const Var& p : parts) {
            const std::size_t n = tp.value(p).numel();
            if (tp.tracked(p)) {
                Tensor& dp = tp.grad_buffer(p);
                for (std::size_t i = 0; i < n; ++i) dp[i] += g[off + i];
            }
            off += n;
        }
    });
}

Var reshape(Tape& t, Var x, std::vector<int> shape) {
    const Tensor& xv = t.value(x);
    if (shape_numel(shape) != xv.numel())
        throw ShapeError("reshape: element count of " + xv.shape_str() + " does not match target");
    Tensor y(std::move(shape), std::vector<double>(xv.data(), xv.data() + xv.numel()));
    return t.record(std::move(y), {x}, [=](Tape& tp, std::uint32_t self) {
        if (!tp.tracked(x)) return;
        const Tensor& g = tp.upstream(self);
        Tensor& dx = tp.grad_buffer(x);
        for (std::size_t i = 0; i < g.numel(); ++i) dx[i] += g[i];
    });
}

}  // namespace crowdkit
