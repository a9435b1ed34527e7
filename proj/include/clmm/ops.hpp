#pragma once

// Differentiable primitives. Every op validates shapes, computes its value
// eagerly and, when an input requires gradients, records a closure that
// accumulates input gradients from the output gradient.

#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "clmm/tensor.hpp"

namespace clmm {

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    }
}

inline void require_rank(const Tensor& a, std::size_t r, const char* op) {
    if (a.rank() != r) {
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) +
                             ", got " + shape_str(a.shape()));
    }
}

template <typename F>
Tensor unary(const Tensor& x, F&& f_and_df) {
    const auto xv = x.values();
    std::vector<double> out(xv.size()), deriv(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) {
        auto [y, dy] = f_and_df(xv[i]);
        out[i] = y;
        deriv[i] = dy;
    }
    return make_result(x.shape(), std::move(out), {x},
                       [x, deriv = std::move(deriv)](const std::vector<double>& g) {
                           if (auto* gx = grad_sink(x)) {
                               for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * deriv[i];
                           }
                       });
}

} // namespace detail

// ---------------------------------------------------------------- elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    return detail::make_result(a.shape(), std::move(out), {a, b}, [a, b](const std::vector<double>& g) {
        detail::accum(a, g);
        detail::accum(b, g);
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    return detail::make_result(a.shape(), std::move(out), {a, b}, [a, b](const std::vector<double>& g) {
        detail::accum(a, g);
        if (auto* gb = detail::grad_sink(b)) {
            for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    return detail::make_result(a.shape(), std::move(out), {a, b}, [a, b](const std::vector<double>& g) {
        if (auto* ga = detail::grad_sink(a)) {
            for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * b[i];
        }
        if (auto* gb = detail::grad_sink(b)) {
            for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * a[i];
        }
    });
}

// scale * x + shift with constant coefficients.
inline Tensor affine(const Tensor& x, double scale, double shift = 0.0) {
    return detail::unary(x, [=](double v) { return std::pair{scale * v + shift, scale}; });
}

inline Tensor scale(const Tensor& x, double c) { return affine(x, c, 0.0); }

// s * x where s is a one-element tensor (e.g. a learnable scalar).
inline Tensor mul_scalar(const Tensor& x, const Tensor& s) {
    if (s.numel() != 1) throw DimensionError("mul_scalar: scalar expected, got " + shape_str(s.shape()));
    const double sv = s[0];
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = sv * x[i];
    return detail::make_result(x.shape(), std::move(out), {x, s}, [x, s](const std::vector<double>& g) {
        const double sv = s[0];
        if (auto* gx = detail::grad_sink(x)) {
            for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += sv * g[i];
        }
        if (auto* gs = detail::grad_sink(s)) {
            double acc = 0.0;
            for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * x[i];
            (*gs)[0] += acc;
        }
    });
}

inline Tensor sigmoid(const Tensor& x) {
    return detail::unary(x, [](double v) {
        const double y = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
        return std::pair{y, y * (1.0 - y)};
    });
}

inline Tensor tanh(const Tensor& x) {
    return detail::unary(x, [](double v) {
        const double y = std::tanh(v);
        return std::pair{y, 1.0 - y * y};
    });
}

// x * sigmoid(x)
inline Tensor silu(const Tensor& x) {
    return detail::unary(x, [](double v) {
        const double s = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
        return std::pair{v * s, s * (1.0 + v * (1.0 - s))};
    });
}

// ------------------------------------------------------------------ reshaping

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (numel_of(shape) != x.numel()) {
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    std::vector<double> out(x.values().begin(), x.values().end());
    return detail::make_result(std::move(shape), std::move(out), {x},
                               [x](const std::vector<double>& g) { detail::accum(x, g); });
}

inline Tensor transpose(const Tensor& x) {
    detail::require_rank(x, 2, "transpose");
    const std::size_t m = x.dim(0), n = x.dim(1);
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
    return detail::make_result({n, m}, std::move(out), {x}, [x, m, n](const std::vector<double>& g) {
        if (auto* gx = detail::grad_sink(x)) {
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) (*gx)[i * n + j] += g[j * m + i];
        }
    });
}

// Columns [begin, end) of a matrix.
inline Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
    detail::require_rank(x, 2, "slice_cols");
    const std::size_t m = x.dim(0), n = x.dim(1);
    if (begin >= end || end > n) throw DimensionError("slice_cols: bad range for " + shape_str(x.shape()));
    const std::size_t w = end - begin;
    std::vector<double> out(m * w);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) out[i * w + j] = x[i * n + begin + j];
    return detail::make_result({m, w}, std::move(out), {x}, [x, m, n, w, begin](const std::vector<double>& g) {
        if (auto* gx = detail::grad_sink(x)) {
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < w; ++j) (*gx)[i * n + begin + j] += g[i * w + j];
        }
    });
}

// Rows [begin, end) of a matrix.
inline Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
    detail::require_rank(x, 2, "slice_rows");
    const std::size_t m = x.dim(0), n = x.dim(1);
    if (begin >= end || end > m) throw DimensionError("slice_rows: bad range for " + shape_str(x.shape()));
    std::vector<double> out(x.values().begin() + begin * n, x.values().begin() + end * n);
    return detail::make_result({end - begin, n}, std::move(out), {x}, [x, n, begin](const std::vector<double>& g) {
        if (auto* gx = detail::grad_sink(x)) {
            for (std::size_t i = 0; i < g.size(); ++i) (*gx)[begin * n + i] += g[i];
        }
    });
}

// Element i of any tensor as a rank-0 tensor.
inline Tensor select(const Tensor& x, std::size_t i) {
    if (i >= x.numel()) throw DimensionError("select: index out of range for " + shape_str(x.shape()));
    return detail::make_result({}, {x[i]}, {x}, [x, i](const std::vector<double>& g) {
        if (auto* gx = detail::grad_sink(x)) (*gx)[i] += g[0];
    });
}

// Concatenates matrices with equal row counts along the column axis.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no inputs");
    const std::size_t m = parts[0].dim(0);
    std::size_t total = 0;
    for (const auto& p : parts) {
        detail::require_rank(p, 2, "concat_cols");
        if (p.dim(0) != m) {
            throw DimensionError("concat_cols: row mismatch " + shape_str(parts[0].shape()) + " vs " +
                                 shape_str(p.shape()));
        }
        total += p.dim(1);
    }
    std::vector<double> out(m * total);
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t w = p.dim(1);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) out[i * total + off + j] = p[i * w + j];
        off += w;
    }
    return detail::make_result({m, total}, std::move(out), parts, [parts, m, total](const std::vector<double>& g) {
        std::size_t off = 0;
        for (const auto& p : parts) {
            const std::size_t w = p.dim(1);
            if (auto* gp = detail::grad_sink(p)) {
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < w; ++j) (*gp)[i * w + j] += g[i * total + off + j];
            }
            off += w;
        }
    });
}

// Stacks tensors of identical shape as rows: k inputs of n elements -> [k x n].
inline Tensor stack_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("stack_rows: no inputs");
    const std::size_t n = parts[0].numel();
    std::vector<double> out;
    out.reserve(parts.size() * n);
    for (const auto& p : parts) {
        if (p.numel() != n) {
            throw DimensionError("stack_rows: size mismatch " + shape_str(parts[0].shape()) + " vs " +
                                 shape_str(p.shape()));
        }
        out.insert(out.end(), p.values().begin(), p.values().end());
    }
    return detail::make_result({parts.size(), n}, std::move(out), parts, [parts, n](const std::vector<double>& g) {
        for (std::size_t k = 0; k < parts.size(); ++k) {
            detail::accum(parts[k], std::span<const double>(g).subspan(k * n, n));
        }
    });
}

// ------------------------------------------------------------------ reductions

inline Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.values()) acc += v;
    return detail::make_result({}, {acc}, {x}, [x](const std::vector<double>& g) {
        if (auto* gx = detail::grad_sink(x)) {
            for (double& v : *gx) v += g[0];
        }
    });
}

inline Tensor dot(const Tensor& a, const Tensor& b) {
    if (a.numel() != b.numel()) {
        throw DimensionError("dot: size mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) acc += a[i] * b[i];
    return detail::make_result({}, {acc}, {a, b}, [a, b](const std::vector<double>& g) {
        if (auto* ga = detail::grad_sink(a)) {
            for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += g[0] * b[i];
        }
        if (auto* gb = detail::grad_sink(b)) {
            for (std::size_t i = 0; i < gb->size(); ++i) (*gb)[i] += g[0] * a[i];
        }
    });
}

// Mean over rows of an [m x n] matrix -> [n].
inline Tensor mean_rows(const Tensor& x) {
    detail::require_rank(x, 2, "mean_rows");
    const std::size_t m = x.dim(0), n = x.dim(1);
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j] += x[i * n + j];
    for (double& v : out) v /= static_cast<double>(m);
    return detail::make_result({n}, std::move(out), {x}, [x, m, n](const std::vector<double>& g) {
        if (auto* gx = detail::grad_sink(x)) {
            const double inv = 1.0 / static_cast<double>(m);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) (*gx)[i * n + j] += g[j] * inv;
        }
    });
}

// Σ_j w_j · xs_j for same-shape inputs and a weight vector of length |xs|.
inline Tensor weighted_sum(const std::vector<Tensor>& xs, const Tensor& w) {
    if (xs.empty()) throw DimensionError("weighted_sum: no inputs");
    if (w.numel() != xs.size()) {
        throw DimensionError("weighted_sum: " + std::to_string(xs.size()) + " inputs but weights " +
                             shape_str(w.shape()));
    }
    for (const auto& x : xs) detail::require_same_shape(xs[0], x, "weighted_sum");
    std::vector<double> out(xs[0].numel(), 0.0);
    for (std::size_t j = 0; j < xs.size(); ++j)
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += w[j] * xs[j][i];
    std::vector<Tensor> inputs = xs;
    inputs.push_back(w);
    return detail::make_result(xs[0].shape(), std::move(out), std::move(inputs), [xs, w](const std::vector<double>& g) {
        auto* gw = detail::grad_sink(w);
        for (std::size_t j = 0; j < xs.size(); ++j) {
            if (auto* gx = detail::grad_sink(xs[j])) {
                for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += w[j] * g[i];
            }
            if (gw) {
                double acc = 0.0;
                for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xs[j][i];
                (*gw)[j] += acc;
            }
        }
    });
}

// ------------------------------------------------------------------- linear

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(m * n, 0.0);
    const auto av = a.values();
    const auto bv = b.values();
    for (std::size_t i = 0; i < m; ++i) {
        double* row = out.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = av[i * k + p];
            if (aip == 0.0) continue;
            const double* brow = bv.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) row[j] += aip * brow[j];
        }
    }
    return detail::make_result({m, n}, std::move(out), {a, b}, [a, b, m, k, n](const std::vector<double>& g) {
        const auto av = a.values();
        const auto bv = b.values();
        if (auto* ga = detail::grad_sink(a)) {
            // dA = G · Bᵀ
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double acc = 0.0;
                    const double* grow = g.data() + i * n;
                    const double* brow = bv.data() + p * n;
                    for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                    (*ga)[i * k + p] += acc;
                }
        }
        if (auto* gb = detail::grad_sink(b)) {
            // dB = Aᵀ · G
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double aip = av[i * k + p];
                    if (aip == 0.0) continue;
                    double* gbrow = gb->data() + p * n;
                    const double* grow = g.data() + i * n;
                    for (std::size_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
                }
        }
    });
}

// x[m x n] + b[n] broadcast over rows.
inline Tensor add_row_bias(const Tensor& x, const Tensor& b) {
    detail::require_rank(x, 2, "add_row_bias");
    const std::size_t m = x.dim(0), n = x.dim(1);
    if (b.numel() != n) {
        throw DimensionError("add_row_bias: bias " + shape_str(b.shape()) + " vs input " + shape_str(x.shape()));
    }
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] + b[j];
    return detail::make_result({m, n}, std::move(out), {x, b}, [x, b, m, n](const std::vector<double>& g) {
        detail::accum(x, g);
        if (auto* gb = detail::grad_sink(b)) {
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) (*gb)[j] += g[i * n + j];
        }
    });
}

// y = x·W + b for a row-batch x[m x in], W[in x out], b[out].
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    return add_row_bias(matmul(x, weight), bias);
}

// 1-D cross-correlation: x[C_in x T], kernel[C_out x C_in x K], bias[C_out].
// Output length floor((T + 2·padding − K)/stride) + 1, zero padding.
inline Tensor conv1d(const Tensor& x, const Tensor& kernel, const Tensor& bias, std::size_t stride,
                     std::size_t padding) {
    detail::require_rank(x, 2, "conv1d input");
    detail::require_rank(kernel, 3, "conv1d kernel");
    const std::size_t cin = x.dim(0), t_in = x.dim(1);
    const std::size_t cout = kernel.dim(0), ksize = kernel.dim(2);
    if (kernel.dim(1) != cin) {
        throw DimensionError("conv1d: kernel " + shape_str(kernel.shape()) + " does not match input " +
                             shape_str(x.shape()));
    }
    if (bias.defined() && bias.numel() != cout) {
        throw DimensionError("conv1d: bias " + shape_str(bias.shape()) + " for " + std::to_string(cout) +
                             " output channels");
    }
    if (stride == 0) throw DimensionError("conv1d: stride must be >= 1");
    if (t_in + 2 * padding < ksize) {
        throw DimensionError("conv1d: window " + std::to_string(ksize) + " longer than padded input " +
                             std::to_string(t_in + 2 * padding));
    }
    const std::size_t t_out = (t_in + 2 * padding - ksize) / stride + 1;
    std::vector<double> out(cout * t_out, 0.0);
    const auto xv = x.values();
    const auto kv = kernel.values();
    for (std::size_t o = 0; o < cout; ++o) {
        double* orow = out.data() + o * t_out;
        if (bias.defined())
            for (std::size_t t = 0; t < t_out; ++t) orow[t] = bias[o];
        for (std::size_t c = 0; c < cin; ++c) {
            const double* xrow = xv.data() + c * t_in;
            const double* krow = kv.data() + (o * cin + c) * ksize;
            for (std::size_t t = 0; t < t_out; ++t) {
                const std::ptrdiff_t base = static_cast<std::ptrdiff_t>(t * stride) - static_cast<std::ptrdiff_t>(padding);
                double acc = 0.0;
                for (std::size_t k = 0; k < ksize; ++k) {
                    const std::ptrdiff_t idx = base + static_cast<std::ptrdiff_t>(k);
                    if (idx >= 0 && idx < static_cast<std::ptrdiff_t>(t_in)) acc += krow[k] * xrow[idx];
                }
                orow[t] += acc;
            }
        }
    }
    std::vector<Tensor> inputs{x, kernel};
    if (bias.defined()) inputs.push_back(bias);
    return detail::make_result(
        {cout, t_out}, std::move(out), std::move(inputs),
        [x, kernel, bias, cin, t_in, cout, ksize, t_out, stride, padding](const std::vector<double>& g) {
            const auto xv = x.values();
            const auto kv = kernel.values();
            auto* gx = detail::grad_sink(x);
            auto* gk = detail::grad_sink(kernel);
            for (std::size_t o = 0; o < cout; ++o) {
                const double* grow = g.data() + o * t_out;
                for (std::size_t c = 0; c < cin; ++c) {
                    for (std::size_t t = 0; t < t_out; ++t) {
                        const double go = grow[t];
                        if (go == 0.0) continue;
                        const std::ptrdiff_t base =
                            static_cast<std::ptrdiff_t>(t * stride) - static_cast<std::ptrdiff_t>(padding);
                        for (std::size_t k = 0; k < ksize; ++k) {
                            const std::ptrdiff_t idx = base + static_cast<std::ptrdiff_t>(k);
                            if (idx < 0 || idx >= static_cast<std::ptrdiff_t>(t_in)) continue;
                            const std::size_t kidx = (o * cin + c) * ksize + k;
                            const std::size_t xidx = c * t_in + static_cast<std::size_t>(idx);
                            if (gk) (*gk)[kidx] += go * xv[xidx];
                            if (gx) (*gx)[xidx] += go * kv[kidx];
                        }
                    }
                }
            }
            if (auto* gb = bias.defined() ? detail::grad_sink(bias) : nullptr) {
                for (std::size_t o = 0; o < cout; ++o)
                    for (std::size_t t = 0; t < t_out; ++t) (*gb)[o] += g[o * t_out + t];
            }
        });
}

// --------------------------------------------------------------- softmax family

namespace detail {

struct AxisLayout {
    std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisLayout axis_layout(const Shape& shape, int axis) {
    const int rank = static_cast<int>(shape.size());
    if (rank == 0) return {};
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank) throw DimensionError("softmax: axis out of range for " + shape_str(shape));
    AxisLayout l;
    for (int i = 0; i < axis; ++i) l.outer *= shape[i];
    l.len = shape[axis];
    for (int i = axis + 1; i < rank; ++i) l.inner *= shape[i];
    return l;
}

} // namespace detail

// Max-subtracted softmax along `axis` (default: last).
inline Tensor softmax(const Tensor& x, int axis = -1) {
    const auto l = detail::axis_layout(x.shape(), axis);
    std::vector<double> out(x.numel());
    for (std::size_t o = 0; o < l.outer; ++o)
        for (std::size_t in = 0; in < l.inner; ++in) {
            const std::size_t base = o * l.len * l.inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < l.len; ++k) mx = std::max(mx, x[base + k * l.inner]);
            double z = 0.0;
            for (std::size_t k = 0; k < l.len; ++k) {
                const double e = std::exp(x[base + k * l.inner] - mx);
                out[base + k * l.inner] = e;
                z += e;
            }
            for (std::size_t k = 0; k < l.len; ++k) out[base + k * l.inner] /= z;
        }
    std::vector<double> saved = out;
    return detail::make_result(x.shape(), std::move(out), {x}, [x, l, y = std::move(saved)](const std::vector<double>& g) {
        auto* gx = detail::grad_sink(x);
        if (!gx) return;
        for (std::size_t o = 0; o < l.outer; ++o)
            for (std::size_t in = 0; in < l.inner; ++in) {
                const std::size_t base = o * l.len * l.inner + in;
                double gy = 0.0;
                for (std::size_t k = 0; k < l.len; ++k) gy += g[base + k * l.inner] * y[base + k * l.inner];
                for (std::size_t k = 0; k < l.len; ++k) {
                    const std::size_t i = base + k * l.inner;
                    (*gx)[i] += y[i] * (g[i] - gy);
                }
            }
    });
}

inline Tensor log_softmax(const Tensor& x, int axis = -1) {
    const auto l = detail::axis_layout(x.shape(), axis);
    std::vector<double> out(x.numel()), prob(x.numel());
    for (std::size_t o = 0; o < l.outer; ++o)
        for (std::size_t in = 0; in < l.inner; ++in) {
            const std::size_t base = o * l.len * l.inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < l.len; ++k) mx = std::max(mx, x[base + k * l.inner]);
            double z = 0.0;
            for (std::size_t k = 0; k < l.len; ++k) z += std::exp(x[base + k * l.inner] - mx);
            const double lse = mx + std::log(z);
            for (std::size_t k = 0; k < l.len; ++k) {
                const std::size_t i = base + k * l.inner;
                out[i] = x[i] - lse;
                prob[i] = std::exp(out[i]);
            }
        }
    return detail::make_result(x.shape(), std::move(out), {x}, [x, l, p = std::move(prob)](const std::vector<double>& g) {
        auto* gx = detail::grad_sink(x);
        if (!gx) return;
        for (std::size_t o = 0; o < l.outer; ++o)
            for (std::size_t in = 0; in < l.inner; ++in) {
                const std::size_t base = o * l.len * l.inner + in;
                double gs = 0.0;
                for (std::size_t k = 0; k < l.len; ++k) gs += g[base + k * l.inner];
                for (std::size_t k = 0; k < l.len; ++k) {
                    const std::size_t i = base + k * l.inner;
                    (*gx)[i] += g[i] - p[i] * gs;
                }
            }
    });
}

// -------------------------------------------------------------- normalization

// Per-row x / sqrt(mean(x²) + eps), no learnable scale.
inline Tensor rms_norm_rows(const Tensor& x, double eps = 1e-6) {
    detail::require_rank(x, 2, "rms_norm_rows");
    const std::size_t m = x.dim(0), n = x.dim(1);
    std::vector<double> out(m * n), inv_rms(m);
    for (std::size_t i = 0; i < m; ++i) {
        double ss = 0.0;
        for (std::size_t j = 0; j < n; ++j) ss += x[i * n + j] * x[i * n + j];
        inv_rms[i] = 1.0 / std::sqrt(ss / static_cast<double>(n) + eps);
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] * inv_rms[i];
    }
    std::vector<double> y = out;
    return detail::make_result({m, n}, std::move(out), {x},
                               [x, m, n, y = std::move(y), inv_rms = std::move(inv_rms)](const std::vector<double>& g) {
                                   auto* gx = detail::grad_sink(x);
                                   if (!gx) return;
                                   for (std::size_t i = 0; i < m; ++i) {
                                       double gy = 0.0;
                                       for (std::size_t j = 0; j < n; ++j) gy += g[i * n + j] * y[i * n + j];
                                       gy /= static_cast<double>(n);
                                       for (std::size_t j = 0; j < n; ++j)
                                           (*gx)[i * n + j] += inv_rms[i] * (g[i * n + j] - y[i * n + j] * gy);
                                   }
                               });
}

// Per-row layer normalization with learnable gain/shift of length n.
inline Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
    detail::require_rank(x, 2, "layer_norm_rows");
    const std::size_t m = x.dim(0), n = x.dim(1);
    if (gamma.numel() != n || beta.numel() != n) {
        throw DimensionError("layer_norm_rows: affine params do not match " + shape_str(x.shape()));
    }
    std::vector<double> xhat(m * n), inv_std(m), out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += x[i * n + j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (x[i * n + j] - mu) * (x[i * n + j] - mu);
        var /= static_cast<double>(n);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            xhat[i * n + j] = (x[i * n + j] - mu) * inv_std[i];
            out[i * n + j] = xhat[i * n + j] * gamma[j] + beta[j];
        }
    }
    return detail::make_result(
        {m, n}, std::move(out), {x, gamma, beta},
        [x, gamma, beta, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](const std::vector<double>& g) {
            auto* gg = detail::grad_sink(gamma);
            auto* gb = detail::grad_sink(beta);
            auto* gx = detail::grad_sink(x);
            for (std::size_t i = 0; i < m; ++i) {
                double mean_d = 0.0, mean_dx = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    const double gij = g[i * n + j];
                    if (gg) (*gg)[j] += gij * xhat[i * n + j];
                    if (gb) (*gb)[j] += gij;
                    const double d = gij * gamma[j];
                    mean_d += d;
                    mean_dx += d * xhat[i * n + j];
                }
                if (!gx) continue;
                mean_d /= static_cast<double>(n);
                mean_dx /= static_cast<double>(n);
                for (std::size_t j = 0; j < n; ++j) {
                    const double d = g[i * n + j] * gamma[j];
                    (*gx)[i * n + j] += inv_std[i] * (d - mean_d - xhat[i * n + j] * mean_dx);
                }
            }
        });
}

// v / ‖v‖₂. Throws ContractError("degenerate embedding") when ‖v‖ < 1e-12.
inline Tensor l2_normalize(const Tensor& v) {
    double ss = 0.0;
    for (double e : v.values()) ss += e * e;
    const double norm = std::sqrt(ss);
    if (norm < 1e-12) throw ContractError("degenerate embedding: norm below 1e-12");
    std::vector<double> out(v.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] / norm;
    std::vector<double> y = out;
    return detail::make_result(v.shape(), std::move(out), {v}, [v, norm, y = std::move(y)](const std::vector<double>& g) {
        auto* gv = detail::grad_sink(v);
        if (!gv) return;
        double yg = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) yg += y[i] * g[i];
        for (std::size_t i = 0; i < g.size(); ++i) (*gv)[i] += (g[i] - y[i] * yg) / norm;
    });
}

// ---------------------------------------------------------------------- losses

// −log softmax(logits)[label] for a single logit vector.
inline Tensor cross_entropy(const Tensor& logits, std::size_t label) {
    const std::size_t k = logits.numel();
    if (label >= k) {
        throw DimensionError("cross_entropy: label " + std::to_string(label) + " outside " + std::to_string(k) +
                             " classes");
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : logits.values()) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : logits.values()) z += std::exp(v - mx);
    const double lse = mx + std::log(z);
    std::vector<double> prob(k);
    for (std::size_t c = 0; c < k; ++c) prob[c] = std::exp(logits[c] - lse);
    return detail::make_result({}, {lse - logits[label]}, {logits},
                               [logits, label, prob = std::move(prob)](const std::vector<double>& g) {
                                   auto* gl = detail::grad_sink(logits);
                                   if (!gl) return;
                                   for (std::size_t c = 0; c < prob.size(); ++c)
                                       (*gl)[c] += g[0] * (prob[c] - (c == label ? 1.0 : 0.0));
                               });
}

// KL(target ‖ softmax(logits)) = Σ_c p_c (log p_c − log_softmax(logits)_c).
// `target` is a constant probability vector; gradient flows to logits only.
inline Tensor kl_to_target(std::span<const double> target, const Tensor& logits) {
    const std::size_t k = logits.numel();
    if (target.size() != k) {
        throw DimensionError("kl_to_target: " + std::to_string(target.size()) + " target classes vs " +
                             std::to_string(k) + " logits");
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : logits.values()) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : logits.values()) z += std::exp(v - mx);
    const double lse = mx + std::log(z);
    double kl = 0.0, mass = 0.0;
    std::vector<double> prob(k);
    for (std::size_t c = 0; c < k; ++c) {
        const double logq = logits[c] - lse;
        prob[c] = std::exp(logq);
        mass += target[c];
        if (target[c] > 0.0) kl += target[c] * (std::log(target[c]) - logq);
    }
    std::vector<double> p(target.begin(), target.end());
    return detail::make_result({}, {kl}, {logits},
                               [logits, mass, p = std::move(p), prob = std::move(prob)](const std::vector<double>& g) {
                                   auto* gl = detail::grad_sink(logits);
                                   if (!gl) return;
                                   for (std::size_t c = 0; c < p.size(); ++c) (*gl)[c] += g[0] * (mass * prob[c] - p[c]);
                               });
}

} // namespace clmm
