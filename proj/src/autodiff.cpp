#include "bevdiff/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace bevdiff {

// ---------------------------------------------------------------------------------------------
// ParamStore

void ParamStore::add(const std::string& name, Tensor init) {
    if (!params_.emplace(name, std::move(init)).second)
        throw std::invalid_argument("parameter '" + name + "' registered twice");
}

const Tensor& ParamStore::get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return it->second;
}

Tensor& ParamStore::get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return it->second;
}

std::size_t ParamStore::scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.size();
    return n;
}

bool ParamStore::all_finite() const {
    return std::all_of(params_.begin(), params_.end(), [](const auto& kv) { return kv.second.all_finite(); });
}

Tensor init_uniform(const Shape& shape, int fan_in, Rng& rng) {
    const double bound = std::sqrt(1.0 / std::max(fan_in, 1));
    Tensor t(shape);
    for (auto& v : t.data()) v = rng.uniform(-bound, bound);
    return t;
}

// ---------------------------------------------------------------------------------------------
// Tape

const Tensor& Var::value() const { return tape_->nodes_[id_].value; }

Var Tape::constant(Tensor value) {
    nodes_.push_back(Node{"constant", {}, std::move(value), {}, {}, false});
    return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::parameter(const ParamStore& store, const std::string& name) {
    if (auto it = bound_params_.find(name); it != bound_params_.end()) return Var(this, it->second);
    nodes_.push_back(Node{"parameter", {}, store.get(name), {}, name, record_});
    const int id = static_cast<int>(nodes_.size()) - 1;
    bound_params_.emplace(name, id);
    return Var(this, id);
}

Var Tape::record(std::string_view op, std::vector<Var> inputs, Tensor value, BackwardFn fn) {
    Node node;
    node.op = op;
    node.value = std::move(value);
    for (const Var& v : inputs) {
        if (v.tape_ != this) throw std::invalid_argument(std::string(op) + ": operand belongs to another tape");
        node.inputs.push_back(v.id_);
        node.requires_grad = node.requires_grad || nodes_[v.id_].requires_grad;
    }
    node.requires_grad = node.requires_grad && record_;
    if (node.requires_grad) node.backward = std::move(fn);
    nodes_.push_back(std::move(node));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
}

void Tape::accumulate(Var v, const Tensor& g) {
    if (!requires_grad(v)) return;
    Tensor& buf = grads_[v.id()];
    if (buf.empty()) {
        buf = g;
        return;
    }
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
}

Tensor& Tape::grad_buffer(Var v) {
    Tensor& buf = grads_[v.id()];
    if (buf.empty()) buf = Tensor::zeros_like(nodes_[v.id()].value);
    return buf;
}

void Tape::backward(Var loss) {
    if (loss.tape_ != this) throw std::invalid_argument("backward: loss belongs to another tape");
    if (loss.value().size() != 1)
        throw std::invalid_argument("backward: loss must be a scalar, got shape " + to_string(loss.shape()));
    grads_.assign(nodes_.size(), Tensor());
    grads_[loss.id()] = Tensor(loss.shape(), 1.0);
    for (int i = loss.id(); i >= 0; --i) {
        Node& node = nodes_[i];
        if (node.backward && !grads_[i].empty()) node.backward(*this, grads_[i]);
    }
}

Gradients Tape::gradients(Var loss, const ParamStore& store) {
    backward(loss);
    Gradients out;
    for (const auto& [name, value] : store) {
        auto it = bound_params_.find(name);
        if (it != bound_params_.end() && !grads_[it->second].empty())
            out.emplace(name, grads_[it->second]);
        else
            out.emplace(name, Tensor::zeros_like(value));
    }
    return out;
}

Tensor Tape::grad(Var v) const {
    if (static_cast<std::size_t>(v.id()) < grads_.size() && !grads_[v.id()].empty()) return grads_[v.id()];
    return Tensor::zeros_like(nodes_.at(v.id()).value);
}

// ---------------------------------------------------------------------------------------------
// Helpers

namespace {

Tape& tape_of(Var a) {
    if (!a.valid()) throw std::invalid_argument("operation on an unbound Var");
    return a.tape();
}

template <class F>
Var unary(const char* op, Var a, F&& f_and_df) {
    const Tensor& x = a.value();
    Tensor y(x.shape());
    Tensor dydx(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        auto [v, d] = f_and_df(x[i]);
        y[i] = v;
        dydx[i] = d;
    }
    return tape_of(a).record(op, {a}, std::move(y), [a, dydx = std::move(dydx)](Tape& t, const Tensor& g) {
        if (!t.requires_grad(a)) return;
        Tensor& ga = t.grad_buffer(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dydx[i];
    });
}

double stable_sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// Output range [lo, hi] such that out*stride + k - pad lies in [0, in).
std::pair<int, int> valid_range(int in, int out, int stride, int k, int pad) {
    auto ceil_div = [](int a, int b) { return a >= 0 ? (a + b - 1) / b : -((-a) / b); };
    auto floor_div = [](int a, int b) { return a >= 0 ? a / b : -((-a + b - 1) / b); };
    const int lo = std::max(0, ceil_div(pad - k, stride));
    const int hi = std::min(out - 1, floor_div(in - 1 + pad - k, stride));
    return {lo, hi};
}

struct AxisSplit {
    std::size_t outer, axis, inner;
};

AxisSplit split_axis(const Shape& s, int axis) {
    AxisSplit r{1, static_cast<std::size_t>(s[axis]), 1};
    for (int i = 0; i < axis; ++i) r.outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

}  // namespace

// ---------------------------------------------------------------------------------------------
// Convolution

Var conv2d(Var input, Var kernel, Var bias, int stride, int padding) {
    const Tensor& x = input.value();
    const Tensor& w = kernel.value();
    const Tensor& b = bias.value();
    if (x.rank() != 4 || w.rank() != 4 || w.dim(1) != x.dim(1))
        throw ShapeError("conv2d: input " + to_string(x.shape()) + " incompatible with kernel " + to_string(w.shape()));
    if (b.rank() != 1 || b.dim(0) != w.dim(0))
        throw ShapeError("conv2d: bias " + to_string(b.shape()) + " incompatible with kernel " + to_string(w.shape()));
    if (w.dim(2) % 2 == 0 || w.dim(3) % 2 == 0)
        throw ShapeError("conv2d: kernel extents must be odd, got " + to_string(w.shape()));
    if (stride < 1 || padding < 0) throw std::invalid_argument("conv2d: stride must be >= 1 and padding >= 0");

    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int O = w.dim(0), KH = w.dim(2), KW = w.dim(3);
    const int Ho = (H + 2 * padding - KH) / stride + 1;
    const int Wo = (W + 2 * padding - KW) / stride + 1;
    if (Ho < 1 || Wo < 1)
        throw ShapeError("conv2d: input " + to_string(x.shape()) + " too small for kernel " + to_string(w.shape()));

    Tensor y(Shape{N, O, Ho, Wo});
    const double* xd = x.data().data();
    const double* wd = w.data().data();
    double* yd = y.data().data();
    const std::size_t in_plane = static_cast<std::size_t>(H) * W, out_plane = static_cast<std::size_t>(Ho) * Wo;

    for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o) {
            double* yp = yd + (static_cast<std::size_t>(n) * O + o) * out_plane;
            std::fill(yp, yp + out_plane, b[o]);
            for (int c = 0; c < C; ++c) {
                const double* xp = xd + (static_cast<std::size_t>(n) * C + c) * in_plane;
                for (int ky = 0; ky < KH; ++ky) {
                    const auto [ylo, yhi] = valid_range(H, Ho, stride, ky, padding);
                    for (int kx = 0; kx < KW; ++kx) {
                        const auto [xlo, xhi] = valid_range(W, Wo, stride, kx, padding);
                        const double wv = wd[((static_cast<std::size_t>(o) * C + c) * KH + ky) * KW + kx];
                        for (int oy = ylo; oy <= yhi; ++oy) {
                            const double* xr = xp + static_cast<std::size_t>(oy * stride + ky - padding) * W + (kx - padding);
                            double* yr = yp + static_cast<std::size_t>(oy) * Wo;
                            if (stride == 1)
                                for (int ox = xlo; ox <= xhi; ++ox) yr[ox] += wv * xr[ox];
                            else
                                for (int ox = xlo; ox <= xhi; ++ox) yr[ox] += wv * xr[ox * stride];
                        }
                    }
                }
            }
        }

    return tape_of(input).record(
        "conv2d", {input, kernel, bias}, std::move(y),
        [=](Tape& t, const Tensor& g) {
            const Tensor& xv = input.value();
            const Tensor& wv_t = kernel.value();
            const bool need_x = t.requires_grad(input), need_w = t.requires_grad(kernel), need_b = t.requires_grad(bias);
            const double* gd = g.data().data();
            if (need_b) {
                Tensor& gb = t.grad_buffer(bias);
                for (int n = 0; n < N; ++n)
                    for (int o = 0; o < O; ++o) {
                        const double* gp = gd + (static_cast<std::size_t>(n) * O + o) * out_plane;
                        gb[o] += std::accumulate(gp, gp + out_plane, 0.0);
                    }
            }
            if (!need_x && !need_w) return;
            double* gx = need_x ? t.grad_buffer(input).data().data() : nullptr;
            double* gw = need_w ? t.grad_buffer(kernel).data().data() : nullptr;
            const double* xd2 = xv.data().data();
            const double* wd2 = wv_t.data().data();
            for (int n = 0; n < N; ++n)
                for (int o = 0; o < O; ++o) {
                    const double* gp = gd + (static_cast<std::size_t>(n) * O + o) * out_plane;
                    for (int c = 0; c < C; ++c) {
                        const std::size_t xoff = (static_cast<std::size_t>(n) * C + c) * in_plane;
                        for (int ky = 0; ky < KH; ++ky) {
                            const auto [ylo, yhi] = valid_range(H, Ho, stride, ky, padding);
                            for (int kx = 0; kx < KW; ++kx) {
                                const auto [xlo, xhi] = valid_range(W, Wo, stride, kx, padding);
                                const std::size_t widx = ((static_cast<std::size_t>(o) * C + c) * KH + ky) * KW + kx;
                                const double wv = wd2[widx];
                                double acc = 0.0;
                                for (int oy = ylo; oy <= yhi; ++oy) {
                                    const std::size_t row = xoff + static_cast<std::size_t>(oy * stride + ky - padding) * W + (kx - padding);
                                    const double* gr = gp + static_cast<std::size_t>(oy) * Wo;
                                    if (gw) {
                                        const double* xr = xd2 + row;
                                        for (int ox = xlo; ox <= xhi; ++ox) acc += gr[ox] * xr[ox * stride];
                                    }
                                    if (gx) {
                                        double* gxr = gx + row;
                                        for (int ox = xlo; ox <= xhi; ++ox) gxr[ox * stride] += wv * gr[ox];
                                    }
                                }
                                if (gw) gw[widx] += acc;
                            }
                        }
                    }
                }
        });
}

// ---------------------------------------------------------------------------------------------
// Bilinear resize

namespace {

struct Lerp {
    int i0, i1;
    double frac;
};

std::vector<Lerp> lerp_table(int in, int out) {
    std::vector<Lerp> table(out);
    const double scale_f = static_cast<double>(in) / out;
    for (int d = 0; d < out; ++d) {
        double src = (d + 0.5) * scale_f - 0.5;
        if (src < 0) src = 0;
        int i0 = static_cast<int>(src);
        if (i0 > in - 1) i0 = in - 1;
        const int i1 = i0 < in - 1 ? i0 + 1 : i0;
        table[d] = {i0, i1, src - i0};
    }
    return table;
}

}  // namespace

Var bilinear_resize(Var input, int out_h, int out_w) {
    const Tensor& x = input.value();
    require_rank(x, 4, "bilinear_resize");
    if (out_h < 1 || out_w < 1) throw ShapeError("bilinear_resize: target size must be >= 1");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    auto ty = lerp_table(H, out_h);
    auto tx = lerp_table(W, out_w);
    Tensor y(Shape{N, C, out_h, out_w});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int oy = 0; oy < out_h; ++oy) {
                const auto& ly = ty[oy];
                for (int ox = 0; ox < out_w; ++ox) {
                    const auto& lx = tx[ox];
                    const double top = (1 - lx.frac) * x.at(n, c, ly.i0, lx.i0) + lx.frac * x.at(n, c, ly.i0, lx.i1);
                    const double bot = (1 - lx.frac) * x.at(n, c, ly.i1, lx.i0) + lx.frac * x.at(n, c, ly.i1, lx.i1);
                    y.at(n, c, oy, ox) = (1 - ly.frac) * top + ly.frac * bot;
                }
            }
    return tape_of(input).record("bilinear_resize", {input}, std::move(y),
                                 [=, ty = std::move(ty), tx = std::move(tx)](Tape& t, const Tensor& g) {
                                     if (!t.requires_grad(input)) return;
                                     Tensor& gx = t.grad_buffer(input);
                                     std::size_t k = 0;
                                     for (int n = 0; n < N; ++n)
                                         for (int c = 0; c < C; ++c)
                                             for (int oy = 0; oy < out_h; ++oy) {
                                                 const auto& ly = ty[oy];
                                                 for (int ox = 0; ox < out_w; ++ox, ++k) {
                                                     const auto& lx = tx[ox];
                                                     const double gv = g[k];
                                                     gx.at(n, c, ly.i0, lx.i0) += gv * (1 - ly.frac) * (1 - lx.frac);
                                                     gx.at(n, c, ly.i0, lx.i1) += gv * (1 - ly.frac) * lx.frac;
                                                     gx.at(n, c, ly.i1, lx.i0) += gv * ly.frac * (1 - lx.frac);
                                                     gx.at(n, c, ly.i1, lx.i1) += gv * ly.frac * lx.frac;
                                                 }
                                             }
                                 });
}

// ---------------------------------------------------------------------------------------------
// Elementwise

Var add(Var a, Var b) {
    require_same_shape(a.value(), b.value(), "add");
    Tensor y = a.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += b.value()[i];
    return tape_of(a).record("add", {a, b}, std::move(y), [a, b](Tape& t, const Tensor& g) {
        t.accumulate(a, g);
        t.accumulate(b, g);
    });
}

Var sub(Var a, Var b) {
    require_same_shape(a.value(), b.value(), "sub");
    Tensor y = a.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] -= b.value()[i];
    return tape_of(a).record("sub", {a, b}, std::move(y), [a, b](Tape& t, const Tensor& g) {
        t.accumulate(a, g);
        if (!t.requires_grad(b)) return;
        Tensor& gb = t.grad_buffer(b);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    });
}

Var mul(Var a, Var b) {
    require_same_shape(a.value(), b.value(), "mul");
    Tensor y = a.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b.value()[i];
    return tape_of(a).record("mul", {a, b}, std::move(y), [a, b](Tape& t, const Tensor& g) {
        if (t.requires_grad(a)) {
            Tensor& ga = t.grad_buffer(a);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.value()[i];
        }
        if (t.requires_grad(b)) {
            Tensor& gb = t.grad_buffer(b);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.value()[i];
        }
    });
}

Var scale(Var a, double s) {
    Tensor y = a.value();
    for (auto& v : y.data()) v *= s;
    return tape_of(a).record("scale", {a}, std::move(y), [a, s](Tape& t, const Tensor& g) {
        if (!t.requires_grad(a)) return;
        Tensor& ga = t.grad_buffer(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
    });
}

Var add_scalar(Var a, double s) {
    Tensor y = a.value();
    for (auto& v : y.data()) v += s;
    return tape_of(a).record("add_scalar", {a}, std::move(y), [a](Tape& t, const Tensor& g) { t.accumulate(a, g); });
}

Var swish(Var a) {
    return unary("swish", a, [](double x) {
        const double s = stable_sigmoid(x);
        return std::pair{x * s, s + x * s * (1 - s)};
    });
}

Var sigmoid(Var a) {
    return unary("sigmoid", a, [](double x) {
        const double s = stable_sigmoid(x);
        return std::pair{s, s * (1 - s)};
    });
}

Var softplus(Var a) {
    return unary("softplus", a, [](double x) {
        return std::pair{std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))), stable_sigmoid(x)};
    });
}

Var exp(Var a) {
    return unary("exp", a, [](double x) {
        const double e = std::exp(x);
        return std::pair{e, e};
    });
}

Var smooth_l1(Var a) {
    return unary("smooth_l1", a, [](double x) {
        const double ax = std::abs(x);
        if (ax < 1.0) return std::pair{0.5 * x * x, x};
        return std::pair{ax - 0.5, x > 0 ? 1.0 : -1.0};
    });
}

Var stop_gradient(Var a) {
    // Recorded with no inputs so nothing upstream can receive gradient through it.
    return tape_of(a).record("stop_gradient", {}, a.value(), {});
}

// ---------------------------------------------------------------------------------------------
// Shape manipulation

Var concat(std::span<const Var> parts, int axis) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    const Shape& first = parts.front().shape();
    if (axis < 0 || axis >= static_cast<int>(first.size()))
        throw std::invalid_argument("concat: axis " + std::to_string(axis) + " out of range for shape " + to_string(first));
    Shape out_shape = first;
    out_shape[axis] = 0;
    for (const Var& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == first.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i)
            if (static_cast<int>(i) != axis && s[i] != first[i]) ok = false;
        if (!ok) throw ShapeError("concat: shape mismatch " + to_string(first) + " vs " + to_string(s));
        out_shape[axis] += s[axis];
    }
    const AxisSplit os = split_axis(out_shape, axis);
    Tensor y(out_shape);
    std::size_t offset = 0;
    std::vector<std::size_t> offsets;
    for (const Var& p : parts) {
        const AxisSplit ps = split_axis(p.shape(), axis);
        offsets.push_back(offset);
        for (std::size_t o = 0; o < ps.outer; ++o)
            std::copy_n(p.value().data().begin() + o * ps.axis * ps.inner, ps.axis * ps.inner,
                        y.data().begin() + o * os.axis * os.inner + offset * os.inner);
        offset += ps.axis;
    }
    std::vector<Var> inputs(parts.begin(), parts.end());
    return tape_of(parts.front())
        .record("concat", inputs, std::move(y), [inputs, offsets, os, axis](Tape& t, const Tensor& g) {
            for (std::size_t k = 0; k < inputs.size(); ++k) {
                if (!t.requires_grad(inputs[k])) continue;
                const AxisSplit ps = split_axis(inputs[k].shape(), axis);
                Tensor& gp = t.grad_buffer(inputs[k]);
                for (std::size_t o = 0; o < ps.outer; ++o)
                    for (std::size_t j = 0; j < ps.axis * ps.inner; ++j)
                        gp[o * ps.axis * ps.inner + j] += g[o * os.axis * os.inner + offsets[k] * os.inner + j];
            }
        });
}

Var slice(Var a, int axis, int begin, int end) {
    const Shape& s = a.shape();
    if (axis < 0 || axis >= static_cast<int>(s.size()))
        throw std::invalid_argument("slice: axis " + std::to_string(axis) + " out of range for shape " + to_string(s));
    if (begin < 0 || end > s[axis] || begin >= end)
        throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for shape " +
                         to_string(s));
    Shape out_shape = s;
    out_shape[axis] = end - begin;
    const AxisSplit is = split_axis(s, axis);
    const std::size_t len = static_cast<std::size_t>(end - begin) * is.inner;
    Tensor y(out_shape);
    for (std::size_t o = 0; o < is.outer; ++o)
        std::copy_n(a.value().data().begin() + o * is.axis * is.inner + begin * is.inner, len, y.data().begin() + o * len);
    return tape_of(a).record("slice", {a}, std::move(y), [a, is, len, begin](Tape& t, const Tensor& g) {
        if (!t.requires_grad(a)) return;
        Tensor& ga = t.grad_buffer(a);
        for (std::size_t o = 0; o < is.outer; ++o)
            for (std::size_t j = 0; j < len; ++j) ga[o * is.axis * is.inner + begin * is.inner + j] += g[o * len + j];
    });
}

// ---------------------------------------------------------------------------------------------
// Reductions

Var sum(Var a) {
    const double total = std::accumulate(a.value().data().begin(), a.value().data().end(), 0.0);
    return tape_of(a).record("sum", {a}, Tensor::scalar(total), [a](Tape& t, const Tensor& g) {
        if (!t.requires_grad(a)) return;
        for (auto& v : t.grad_buffer(a).data()) v += g[0];
    });
}

Var mean(Var a) {
    const double n = static_cast<double>(a.value().size());
    const double total = std::accumulate(a.value().data().begin(), a.value().data().end(), 0.0);
    return tape_of(a).record("mean", {a}, Tensor::scalar(total / n), [a, n](Tape& t, const Tensor& g) {
        if (!t.requires_grad(a)) return;
        for (auto& v : t.grad_buffer(a).data()) v += g[0] / n;
    });
}

Var mse(Var a, Var b) {
    require_same_shape(a.value(), b.value(), "mse");
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    Tensor diff(x.shape());
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        diff[i] = x[i] - y[i];
        acc += diff[i] * diff[i];
    }
    const double n = static_cast<double>(x.size());
    return tape_of(a).record("mse", {a, b}, Tensor::scalar(acc / n), [a, b, n, diff = std::move(diff)](Tape& t, const Tensor& g) {
        const double k = 2.0 * g[0] / n;
        if (t.requires_grad(a)) {
            Tensor& ga = t.grad_buffer(a);
            for (std::size_t i = 0; i < diff.size(); ++i) ga[i] += k * diff[i];
        }
        if (t.requires_grad(b)) {
            Tensor& gb = t.grad_buffer(b);
            for (std::size_t i = 0; i < diff.size(); ++i) gb[i] -= k * diff[i];
        }
    });
}

// ---------------------------------------------------------------------------------------------
// Broadcasting helpers

Var linear(Var x, Var weight, Var bias) {
    const Tensor& xv = x.value();
    const Tensor& w = weight.value();
    const Tensor& b = bias.value();
    if (xv.rank() != 2 || w.rank() != 2 || w.dim(1) != xv.dim(1) || b.rank() != 1 || b.dim(0) != w.dim(0))
        throw ShapeError("linear: x " + to_string(xv.shape()) + ", weight " + to_string(w.shape()) + ", bias " +
                         to_string(b.shape()));
    const int N = xv.dim(0), D = xv.dim(1), O = w.dim(0);
    Tensor y(Shape{N, O});
    for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o) {
            double acc = b[o];
            for (int d = 0; d < D; ++d) acc += w[o * D + d] * xv[n * D + d];
            y[n * O + o] = acc;
        }
    return tape_of(x).record("linear", {x, weight, bias}, std::move(y), [=](Tape& t, const Tensor& g) {
        const Tensor& xs = x.value();
        const Tensor& ws = weight.value();
        if (t.requires_grad(x)) {
            Tensor& gx = t.grad_buffer(x);
            for (int n = 0; n < N; ++n)
                for (int o = 0; o < O; ++o)
                    for (int d = 0; d < D; ++d) gx[n * D + d] += g[n * O + o] * ws[o * D + d];
        }
        if (t.requires_grad(weight)) {
            Tensor& gw = t.grad_buffer(weight);
            for (int n = 0; n < N; ++n)
                for (int o = 0; o < O; ++o)
                    for (int d = 0; d < D; ++d) gw[o * D + d] += g[n * O + o] * xs[n * D + d];
        }
        if (t.requires_grad(bias)) {
            Tensor& gb = t.grad_buffer(bias);
            for (int n = 0; n < N; ++n)
                for (int o = 0; o < O; ++o) gb[o] += g[n * O + o];
        }
    });
}

Var add_per_channel(Var x, Var v) {
    const Tensor& xv = x.value();
    const Tensor& vv = v.value();
    require_rank(xv, 4, "add_per_channel");
    if (vv.rank() != 2 || vv.dim(0) != xv.dim(0) || vv.dim(1) != xv.dim(1))
        throw ShapeError("add_per_channel: x " + to_string(xv.shape()) + " vs per-channel term " + to_string(vv.shape()));
    const std::size_t planes = static_cast<std::size_t>(xv.dim(0)) * xv.dim(1);
    const std::size_t plane = static_cast<std::size_t>(xv.dim(2)) * xv.dim(3);
    Tensor y = xv;
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t i = 0; i < plane; ++i) y[p * plane + i] += vv[p];
    return tape_of(x).record("add_per_channel", {x, v}, std::move(y), [x, v, planes, plane](Tape& t, const Tensor& g) {
        t.accumulate(x, g);
        if (!t.requires_grad(v)) return;
        Tensor& gv = t.grad_buffer(v);
        for (std::size_t p = 0; p < planes; ++p)
            for (std::size_t i = 0; i < plane; ++i) gv[p] += g[p * plane + i];
    });
}

Var scale_per_sample(Var x, std::span<const double> coeffs) {
    const Tensor& xv = x.value();
    if (coeffs.size() != static_cast<std::size_t>(xv.dim(0)))
        throw ShapeError("scale_per_sample: " + std::to_string(coeffs.size()) + " coefficients for shape " +
                         to_string(xv.shape()));
    const std::size_t per = xv.size() / xv.dim(0);
    Tensor y = xv;
    for (std::size_t i = 0; i < y.size(); ++i) y[i] *= coeffs[i / per];
    std::vector<double> c(coeffs.begin(), coeffs.end());
    return tape_of(x).record("scale_per_sample", {x}, std::move(y), [x, per, c = std::move(c)](Tape& t, const Tensor& g) {
        if (!t.requires_grad(x)) return;
        Tensor& gx = t.grad_buffer(x);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * c[i / per];
    });
}

Var spatial_mean_broadcast(Var x) {
    const Tensor& xv = x.value();
    require_rank(xv, 4, "spatial_mean_broadcast");
    const std::size_t planes = static_cast<std::size_t>(xv.dim(0)) * xv.dim(1);
    const std::size_t plane = static_cast<std::size_t>(xv.dim(2)) * xv.dim(3);
    Tensor y(xv.shape());
    for (std::size_t p = 0; p < planes; ++p) {
        const double m = std::accumulate(xv.data().begin() + p * plane, xv.data().begin() + (p + 1) * plane, 0.0) / plane;
        std::fill_n(y.data().begin() + p * plane, plane, m);
    }
    return tape_of(x).record("spatial_mean_broadcast", {x}, std::move(y), [x, planes, plane](Tape& t, const Tensor& g) {
        if (!t.requires_grad(x)) return;
        Tensor& gx = t.grad_buffer(x);
        for (std::size_t p = 0; p < planes; ++p) {
            const double m = std::accumulate(g.data().begin() + p * plane, g.data().begin() + (p + 1) * plane, 0.0) / plane;
            for (std::size_t i = 0; i < plane; ++i) gx[p * plane + i] += m;
        }
    });
}

Var normalized_fusion(std::span<const Var> inputs, Var weights, double eps) {
    const Tensor& w = weights.value();
    if (inputs.empty()) throw std::invalid_argument("normalized_fusion: no inputs");
    if (w.rank() != 1 || static_cast<std::size_t>(w.dim(0)) != inputs.size())
        throw ShapeError("normalized_fusion: weights " + to_string(w.shape()) + " for " + std::to_string(inputs.size()) +
                         " inputs");
    for (const Var& in : inputs) require_same_shape(inputs.front().value(), in.value(), "normalized_fusion");
    const double denom = std::accumulate(w.data().begin(), w.data().end(), 0.0) + eps;
    if (!(denom > 0)) throw std::invalid_argument("normalized_fusion: non-positive normalizer");
    Tensor y(inputs.front().shape());
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        const double c = w[k] / denom;
        const Tensor& x = inputs[k].value();
        for (std::size_t i = 0; i < y.size(); ++i) y[i] += c * x[i];
    }
    std::vector<Var> all(inputs.begin(), inputs.end());
    all.push_back(weights);
    std::vector<Var> ins(inputs.begin(), inputs.end());
    Tensor out_copy = y;
    return tape_of(weights).record(
        "normalized_fusion", all, std::move(y), [ins, weights, denom, out = std::move(out_copy)](Tape& t, const Tensor& g) {
            const Tensor& wv = weights.value();
            for (std::size_t k = 0; k < ins.size(); ++k) {
                if (!t.requires_grad(ins[k])) continue;
                const double c = wv[k] / denom;
                Tensor& gx = t.grad_buffer(ins[k]);
                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += c * g[i];
            }
            if (!t.requires_grad(weights)) return;
            Tensor& gw = t.grad_buffer(weights);
            for (std::size_t k = 0; k < ins.size(); ++k) {
                const Tensor& x = ins[k].value();
                double acc = 0.0;
                for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * (x[i] - out[i]);
                gw[k] += acc / denom;
            }
        });
}

Var gather(Var a, std::span<const std::size_t> indices) {
    if (indices.empty()) throw std::invalid_argument("gather: no indices");
    Tensor y(Shape{static_cast<int>(indices.size())});
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= a.value().size())
            throw std::out_of_range("gather: index " + std::to_string(indices[i]) + " out of range for shape " +
                                    to_string(a.shape()));
        y[i] = a.value()[indices[i]];
    }
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    return tape_of(a).record("gather", {a}, std::move(y), [a, idx = std::move(idx)](Tape& t, const Tensor& g) {
        if (!t.requires_grad(a)) return;
        Tensor& ga = t.grad_buffer(a);
        for (std::size_t i = 0; i < idx.size(); ++i) ga[idx[i]] += g[i];
    });
}

Var sigmoid_focal_loss(Var logits, const Tensor& targets, double alpha, double gamma, Reduction reduction) {
    require_same_shape(logits.value(), targets, "sigmoid_focal_loss");
    constexpr double kClamp = 1e-7;
    const Tensor& z = logits.value();
    Tensor dldz(z.shape());
    double total = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        const double p_raw = stable_sigmoid(z[i]);
        const double p = std::clamp(p_raw, kClamp, 1.0 - kClamp);
        const bool clamped = p != p_raw;
        double loss, dldp;
        if (targets[i] > 0.5) {
            const double q = 1.0 - p;
            loss = -alpha * std::pow(q, gamma) * std::log(p);
            dldp = (gamma == 0.0 ? 0.0 : alpha * gamma * std::pow(q, gamma - 1) * std::log(p)) - alpha * std::pow(q, gamma) / p;
        } else {
            loss = -(1 - alpha) * std::pow(p, gamma) * std::log(1 - p);
            dldp = -(1 - alpha) * ((gamma == 0.0 ? 0.0 : gamma * std::pow(p, gamma - 1) * std::log(1 - p)) -
                                   std::pow(p, gamma) / (1 - p));
        }
        total += loss;
        dldz[i] = clamped ? 0.0 : dldp * p_raw * (1 - p_raw);
    }
    const double k = reduction == Reduction::Mean ? 1.0 / static_cast<double>(z.size()) : 1.0;
    return tape_of(logits).record("sigmoid_focal_loss", {logits}, Tensor::scalar(total * k),
                                  [logits, k, dldz = std::move(dldz)](Tape& t, const Tensor& g) {
                                      if (!t.requires_grad(logits)) return;
                                      Tensor& gl = t.grad_buffer(logits);
                                      for (std::size_t i = 0; i < dldz.size(); ++i) gl[i] += g[0] * k * dldz[i];
                                  });
}

}  // namespace bevdiff
