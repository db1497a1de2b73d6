#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "sammp/tensor.hpp"

namespace sammp {

// ============================================================
// Broadcasting
// ============================================================

namespace detail {

// Right-aligned NumPy-style broadcast of two shapes. Strides are per output
// dimension, zero where the input is broadcast.
struct Bcast {
    Shape out;
    std::vector<std::size_t> sa, sb;
};

inline std::vector<std::size_t> row_major_strides(const Shape& s) {
    std::vector<std::size_t> st(s.size(), 1);
    for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

inline Bcast broadcast_shapes(const char* op, const Shape& a, const Shape& b) {
    std::size_t nd = std::max(a.size(), b.size());
    Bcast r;
    r.out.resize(nd);
    r.sa.assign(nd, 0);
    r.sb.assign(nd, 0);
    auto stra = row_major_strides(a);
    auto strb = row_major_strides(b);
    for (std::size_t i = 0; i < nd; ++i) {
        std::size_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
        std::size_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
        if (da != db && da != 1 && db != 1)
            throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                             shape_str(b));
        std::size_t d = nd - 1 - i;
        r.out[d] = std::max(da, db);
        if (i < a.size() && !(da == 1 && r.out[d] > 1)) r.sa[d] = stra[a.size() - 1 - i];
        if (i < b.size() && !(db == 1 && r.out[d] > 1)) r.sb[d] = strb[b.size() - 1 - i];
    }
    return r;
}

// Calls f(out_index, a_index, b_index) for every output element.
template <class F>
inline void for_each_bcast(const Bcast& m, F&& f) {
    std::size_t nd = m.out.size();
    std::size_t total = shape_numel(m.out);
    if (nd == 0) {
        f(0, 0, 0);
        return;
    }
    std::vector<std::size_t> idx(nd, 0);
    std::size_t ia = 0, ib = 0;
    for (std::size_t io = 0; io < total; ++io) {
        f(io, ia, ib);
        for (std::size_t d = nd; d-- > 0;) {
            ++idx[d];
            ia += m.sa[d];
            ib += m.sb[d];
            if (idx[d] < m.out[d]) break;
            ia -= m.sa[d] * m.out[d];
            ib -= m.sb[d] * m.out[d];
            idx[d] = 0;
        }
    }
}

template <class Fwd, class Dfa, class Dfb>
inline Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, Dfa dfa,
                        Dfb dfb) {
    Bcast bc = broadcast_shapes(name, a.shape(), b.shape());
    const std::vector<double>& av = a.data();
    const std::vector<double>& bv = b.data();
    std::vector<double> out(shape_numel(bc.out));
    for_each_bcast(bc, [&](std::size_t io, std::size_t ia, std::size_t ib) {
        out[io] = fwd(av[ia], bv[ib]);
    });
    return make_op(name, bc.out, std::move(out), {a, b}, [bc, dfa, dfb](TensorNode& self) {
        TensorNode& A = *self.parents[0];
        TensorNode& B = *self.parents[1];
        bool wa = A.needs_grad, wb = B.needs_grad;
        if (wa) grad_buf(A);
        if (wb) grad_buf(B);
        for_each_bcast(bc, [&](std::size_t io, std::size_t ia, std::size_t ib) {
            double g = self.grad[io];
            if (wa) A.grad[ia] += g * dfa(A.value[ia], B.value[ib], self.value[io]);
            if (wb) B.grad[ib] += g * dfb(A.value[ia], B.value[ib], self.value[io]);
        });
    });
}

template <class Fwd, class Dfdx>
inline Tensor unary_op(const char* name, const Tensor& x, Fwd fwd, Dfdx dfdx) {
    const std::vector<double>& xv = x.data();
    std::vector<double> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
    return make_op(name, x.shape(), std::move(out), {x}, [dfdx](TensorNode& self) {
        TensorNode& X = *self.parents[0];
        if (!X.needs_grad) return;
        grad_buf(X);
        for (std::size_t i = 0; i < self.value.size(); ++i)
            X.grad[i] += self.grad[i] * dfdx(X.value[i], self.value[i]);
    });
}

}  // namespace detail

// ============================================================
// Elementwise ops (broadcasting where binary)
// ============================================================

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        "add", a, b, [](double x, double y) { return x + y; },
        [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        "sub", a, b, [](double x, double y) { return x - y; },
        [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        "mul", a, b, [](double x, double y) { return x * y; },
        [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        "div", a, b, [](double x, double y) { return x / y; },
        [](double, double y, double) { return 1.0 / y; },
        [](double, double y, double out) { return -out / y; });
}

inline Tensor scale(const Tensor& x, double c) {
    return detail::unary_op(
        "scale", x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

inline Tensor offset(const Tensor& x, double c) {
    return detail::unary_op(
        "offset", x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

inline Tensor neg(const Tensor& x) { return scale(x, -1.0); }

inline Tensor tanh(const Tensor& x) {
    return detail::unary_op(
        "tanh", x, [](double v) { return std::tanh(v); },
        [](double, double y) { return 1.0 - y * y; });
}

inline Tensor sigmoid(const Tensor& x) {
    return detail::unary_op(
        "sigmoid", x,
        [](double v) {
            if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
            double e = std::exp(v);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

inline Tensor exp(const Tensor& x) {
    return detail::unary_op(
        "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
    return detail::unary_op(
        "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Tensor sqrt(const Tensor& x) {
    return detail::unary_op(
        "sqrt", x, [](double v) { return std::sqrt(v); },
        [](double, double y) { return 0.5 / y; });
}

// Subgradient at 0 is 0.
inline Tensor relu(const Tensor& x) {
    return detail::unary_op(
        "relu", x, [](double v) { return v > 0 ? v : 0.0; },
        [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

// max(x, c); zero gradient where clipped.
inline Tensor clamp_min(const Tensor& x, double c) {
    return detail::unary_op(
        "clamp_min", x, [c](double v) { return v > c ? v : c; },
        [c](double v, double) { return v > c ? 1.0 : 0.0; });
}

// ============================================================
// Matrix multiply, batched with broadcast over leading dims
// ============================================================

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() < 2 || sb.size() < 2)
        throw ShapeError("matmul: need rank >= 2, got " + shape_str(sa) + " and " + shape_str(sb));
    std::size_t m = sa[sa.size() - 2], k = sa[sa.size() - 1];
    std::size_t kb = sb[sb.size() - 2], n = sb[sb.size() - 1];
    if (k != kb)
        throw ShapeError("matmul: inner dimensions disagree, " + shape_str(sa) + " x " +
                         shape_str(sb));
    Shape batch_a(sa.begin(), sa.end() - 2), batch_b(sb.begin(), sb.end() - 2);
    detail::Bcast bc = detail::broadcast_shapes("matmul", batch_a, batch_b);

    Shape out_shape = bc.out;
    out_shape.push_back(m);
    out_shape.push_back(n);
    std::vector<double> out(shape_numel(out_shape), 0.0);

    const std::vector<double>& av = a.data();
    const std::vector<double>& bv = b.data();
    std::size_t mk = m * k, kn = k * n, mn = m * n;
    detail::for_each_bcast(bc, [&](std::size_t io, std::size_t ia, std::size_t ib) {
        const double* A = av.data() + ia * mk;
        const double* B = bv.data() + ib * kn;
        double* C = out.data() + io * mn;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t kk = 0; kk < k; ++kk) {
                double x = A[i * k + kk];
                if (x == 0.0) continue;
                const double* Brow = B + kk * n;
                double* Crow = C + i * n;
                for (std::size_t j = 0; j < n; ++j) Crow[j] += x * Brow[j];
            }
    });

    return make_op("matmul", out_shape, std::move(out), {a, b},
                   [bc, m, k, n, mk, kn, mn](detail::TensorNode& self) {
                       detail::TensorNode& A = *self.parents[0];
                       detail::TensorNode& B = *self.parents[1];
                       bool wa = A.needs_grad, wb = B.needs_grad;
                       if (wa) detail::grad_buf(A);
                       if (wb) detail::grad_buf(B);
                       detail::for_each_bcast(bc, [&](std::size_t io, std::size_t ia,
                                                      std::size_t ib) {
                           const double* G = self.grad.data() + io * mn;
                           const double* Av = A.value.data() + ia * mk;
                           const double* Bv = B.value.data() + ib * kn;
                           if (wa) {
                               double* GA = A.grad.data() + ia * mk;
                               // dA = G * B^T
                               for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t kk = 0; kk < k; ++kk) {
                                       double acc = 0.0;
                                       const double* Grow = G + i * n;
                                       const double* Brow = Bv + kk * n;
                                       for (std::size_t j = 0; j < n; ++j) acc += Grow[j] * Brow[j];
                                       GA[i * k + kk] += acc;
                                   }
                           }
                           if (wb) {
                               double* GB = B.grad.data() + ib * kn;
                               // dB = A^T * G
                               for (std::size_t kk = 0; kk < k; ++kk)
                                   for (std::size_t i = 0; i < m; ++i) {
                                       double x = Av[i * k + kk];
                                       if (x == 0.0) continue;
                                       const double* Grow = G + i * n;
                                       double* GBrow = GB + kk * n;
                                       for (std::size_t j = 0; j < n; ++j) GBrow[j] += x * Grow[j];
                                   }
                           }
                       });
                   });
}

// Swap the last two dimensions.
inline Tensor transpose_last(const Tensor& x) {
    const Shape& s = x.shape();
    if (s.size() < 2) throw ShapeError("transpose_last: need rank >= 2, got " + shape_str(s));
    std::size_t m = s[s.size() - 2], n = s[s.size() - 1];
    Shape out_shape = s;
    std::swap(out_shape[s.size() - 2], out_shape[s.size() - 1]);
    std::size_t batch = shape_numel(s) / (m * n);
    const std::vector<double>& xv = x.data();
    std::vector<double> out(xv.size());
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j)
                out[b * m * n + j * m + i] = xv[b * m * n + i * n + j];
    return make_op("transpose_last", out_shape, std::move(out), {x},
                   [batch, m, n](detail::TensorNode& self) {
                       detail::TensorNode& X = *self.parents[0];
                       if (!X.needs_grad) return;
                       detail::grad_buf(X);
                       for (std::size_t b = 0; b < batch; ++b)
                           for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t j = 0; j < n; ++j)
                                   X.grad[b * m * n + i * n + j] +=
                                       self.grad[b * m * n + j * m + i];
                   });
}

// ============================================================
// Shape ops
// ============================================================

inline Tensor reshape(const Tensor& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.numel())
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(new_shape));
    return make_op("reshape", std::move(new_shape), x.data(), {x}, [](detail::TensorNode& self) {
        detail::TensorNode& X = *self.parents[0];
        if (!X.needs_grad) return;
        detail::grad_buf(X);
        for (std::size_t i = 0; i < self.grad.size(); ++i) X.grad[i] += self.grad[i];
    });
}

// Contiguous sub-range along one dimension.
inline Tensor narrow(const Tensor& x, std::size_t dim, std::size_t start, std::size_t len) {
    const Shape& s = x.shape();
    if (dim >= s.size() || start + len > s[dim])
        throw ShapeError("narrow: range [" + std::to_string(start) + "," +
                         std::to_string(start + len) + ") out of bounds for dim " +
                         std::to_string(dim) + " of " + shape_str(s));
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < dim; ++i) outer *= s[i];
    for (std::size_t i = dim + 1; i < s.size(); ++i) inner *= s[i];
    std::size_t d = s[dim];
    Shape out_shape = s;
    out_shape[dim] = len;
    const std::vector<double>& xv = x.data();
    std::vector<double> out(outer * len * inner);
    for (std::size_t o = 0; o < outer; ++o)
        std::memcpy(out.data() + o * len * inner, xv.data() + (o * d + start) * inner,
                    len * inner * sizeof(double));
    return make_op("narrow", out_shape, std::move(out), {x},
                   [outer, inner, d, start, len](detail::TensorNode& self) {
                       detail::TensorNode& X = *self.parents[0];
                       if (!X.needs_grad) return;
                       detail::grad_buf(X);
                       for (std::size_t o = 0; o < outer; ++o) {
                           const double* g = self.grad.data() + o * len * inner;
                           double* gx = X.grad.data() + (o * d + start) * inner;
                           for (std::size_t i = 0; i < len * inner; ++i) gx[i] += g[i];
                       }
                   });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t dim) {
    if (parts.empty()) throw UsageError("concat: no tensors given");
    const Shape& s0 = parts[0].shape();
    if (dim >= s0.size()) throw ShapeError("concat: dim out of range for " + shape_str(s0));
    std::size_t total_d = 0;
    for (const Tensor& p : parts) {
        const Shape& s = p.shape();
        if (s.size() != s0.size())
            throw ShapeError("concat: rank mismatch " + shape_str(s0) + " vs " + shape_str(s));
        for (std::size_t i = 0; i < s.size(); ++i)
            if (i != dim && s[i] != s0[i])
                throw ShapeError("concat: shape mismatch " + shape_str(s0) + " vs " + shape_str(s));
        total_d += s[dim];
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < dim; ++i) outer *= s0[i];
    for (std::size_t i = dim + 1; i < s0.size(); ++i) inner *= s0[i];
    Shape out_shape = s0;
    out_shape[dim] = total_d;
    std::vector<double> out(outer * total_d * inner);
    std::vector<std::size_t> part_d(parts.size());
    std::size_t off = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        std::size_t dp = parts[p].shape()[dim];
        part_d[p] = dp;
        const std::vector<double>& pv = parts[p].data();
        for (std::size_t o = 0; o < outer; ++o)
            std::memcpy(out.data() + (o * total_d + off) * inner, pv.data() + o * dp * inner,
                        dp * inner * sizeof(double));
        off += dp;
    }
    return make_op("concat", out_shape, std::move(out), parts,
                   [outer, inner, total_d, part_d](detail::TensorNode& self) {
                       std::size_t off = 0;
                       for (std::size_t p = 0; p < self.parents.size(); ++p) {
                           detail::TensorNode& P = *self.parents[p];
                           std::size_t dp = part_d[p];
                           if (P.needs_grad) {
                               detail::grad_buf(P);
                               for (std::size_t o = 0; o < outer; ++o) {
                                   const double* g = self.grad.data() + (o * total_d + off) * inner;
                                   double* gp = P.grad.data() + o * dp * inner;
                                   for (std::size_t i = 0; i < dp * inner; ++i) gp[i] += g[i];
                               }
                           }
                           off += dp;
                       }
                   });
}

// [a, d] -> [a, n_steps, d], repeating each row.
inline Tensor tile_steps(const Tensor& z, std::size_t n_steps) {
    const Shape& s = z.shape();
    if (s.size() != 2) throw ShapeError("tile_steps: need rank 2, got " + shape_str(s));
    if (n_steps == 0) throw UsageError("tile_steps: n_steps must be >= 1");
    std::size_t a = s[0], d = s[1];
    const std::vector<double>& zv = z.data();
    std::vector<double> out(a * n_steps * d);
    for (std::size_t v = 0; v < a; ++v)
        for (std::size_t t = 0; t < n_steps; ++t)
            std::memcpy(out.data() + (v * n_steps + t) * d, zv.data() + v * d, d * sizeof(double));
    return make_op("tile_steps", {a, n_steps, d}, std::move(out), {z},
                   [a, n_steps, d](detail::TensorNode& self) {
                       detail::TensorNode& Z = *self.parents[0];
                       if (!Z.needs_grad) return;
                       detail::grad_buf(Z);
                       for (std::size_t v = 0; v < a; ++v)
                           for (std::size_t t = 0; t < n_steps; ++t) {
                               const double* g = self.grad.data() + (v * n_steps + t) * d;
                               double* gz = Z.grad.data() + v * d;
                               for (std::size_t i = 0; i < d; ++i) gz[i] += g[i];
                           }
                   });
}

// ============================================================
// Reductions and normalizations
// ============================================================

inline Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    return make_op("sum", {1}, {acc}, {x}, [](detail::TensorNode& self) {
        detail::TensorNode& X = *self.parents[0];
        if (!X.needs_grad) return;
        detail::grad_buf(X);
        double g = self.grad[0];
        for (double& gx : X.grad) gx += g;
    });
}

inline Tensor mean(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    std::size_t n = x.numel();
    acc /= static_cast<double>(n);
    return make_op("mean", {1}, {acc}, {x}, [n](detail::TensorNode& self) {
        detail::TensorNode& X = *self.parents[0];
        if (!X.needs_grad) return;
        detail::grad_buf(X);
        double g = self.grad[0] / static_cast<double>(n);
        for (double& gx : X.grad) gx += g;
    });
}

namespace detail {

// Decompose a shape around `dim` into (outer, d, inner) lanes.
struct Lanes {
    std::size_t outer, d, inner;
};

inline Lanes lanes_for(const char* op, const Shape& s, std::size_t dim) {
    if (dim >= s.size())
        throw ShapeError(std::string(op) + ": dim " + std::to_string(dim) + " out of range for " +
                         shape_str(s));
    Lanes l{1, s[dim], 1};
    for (std::size_t i = 0; i < dim; ++i) l.outer *= s[i];
    for (std::size_t i = dim + 1; i < s.size(); ++i) l.inner *= s[i];
    return l;
}

}  // namespace detail

// Exp-normalization along `dim` with max-subtraction stabilization.
inline Tensor softmax(const Tensor& x, std::size_t dim) {
    detail::Lanes l = detail::lanes_for("softmax", x.shape(), dim);
    const std::vector<double>& xv = x.data();
    std::vector<double> out(xv.size());
    for (std::size_t o = 0; o < l.outer; ++o)
        for (std::size_t i = 0; i < l.inner; ++i) {
            double m = -1e308;
            for (std::size_t j = 0; j < l.d; ++j)
                m = std::max(m, xv[(o * l.d + j) * l.inner + i]);
            double s = 0.0;
            for (std::size_t j = 0; j < l.d; ++j) {
                std::size_t idx = (o * l.d + j) * l.inner + i;
                out[idx] = std::exp(xv[idx] - m);
                s += out[idx];
            }
            for (std::size_t j = 0; j < l.d; ++j) out[(o * l.d + j) * l.inner + i] /= s;
        }
    return make_op("softmax", x.shape(), std::move(out), {x}, [l](detail::TensorNode& self) {
        detail::TensorNode& X = *self.parents[0];
        if (!X.needs_grad) return;
        detail::grad_buf(X);
        for (std::size_t o = 0; o < l.outer; ++o)
            for (std::size_t i = 0; i < l.inner; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < l.d; ++j) {
                    std::size_t idx = (o * l.d + j) * l.inner + i;
                    dot += self.grad[idx] * self.value[idx];
                }
                for (std::size_t j = 0; j < l.d; ++j) {
                    std::size_t idx = (o * l.d + j) * l.inner + i;
                    X.grad[idx] += self.value[idx] * (self.grad[idx] - dot);
                }
            }
    });
}

// log(sum(exp(x))) along `dim`, keeping the dimension with extent 1.
// Max-shifted, so confident components cannot underflow to -inf.
inline Tensor logsumexp(const Tensor& x, std::size_t dim) {
    detail::Lanes l = detail::lanes_for("logsumexp", x.shape(), dim);
    const std::vector<double>& xv = x.data();
    std::vector<double> out(l.outer * l.inner);
    for (std::size_t o = 0; o < l.outer; ++o)
        for (std::size_t i = 0; i < l.inner; ++i) {
            double m = -1e308;
            for (std::size_t j = 0; j < l.d; ++j)
                m = std::max(m, xv[(o * l.d + j) * l.inner + i]);
            double s = 0.0;
            for (std::size_t j = 0; j < l.d; ++j)
                s += std::exp(xv[(o * l.d + j) * l.inner + i] - m);
            out[o * l.inner + i] = m + std::log(s);
        }
    Shape out_shape = x.shape();
    out_shape[dim] = 1;
    return make_op("logsumexp", out_shape, std::move(out), {x}, [l](detail::TensorNode& self) {
        detail::TensorNode& X = *self.parents[0];
        if (!X.needs_grad) return;
        detail::grad_buf(X);
        for (std::size_t o = 0; o < l.outer; ++o)
            for (std::size_t i = 0; i < l.inner; ++i) {
                double g = self.grad[o * l.inner + i];
                double lse = self.value[o * l.inner + i];
                for (std::size_t j = 0; j < l.d; ++j) {
                    std::size_t idx = (o * l.d + j) * l.inner + i;
                    X.grad[idx] += g * std::exp(X.value[idx] - lse);
                }
            }
    });
}

// ============================================================
// Sequence ops
// ============================================================

// Length-preserving 1-d convolution over the time axis, kernel size 3,
// zero padding of one sample at each end.
// x: [n_veh, T, c_in], w: [3, c_in, c_out], b: [c_out] -> [n_veh, T, c_out]
inline Tensor conv1d_k3(const Tensor& x, const Tensor& w, const Tensor& b) {
    const Shape& sx = x.shape();
    const Shape& sw = w.shape();
    const Shape& sb = b.shape();
    if (sx.size() != 3) throw ShapeError("conv1d_k3: input must be rank 3, got " + shape_str(sx));
    if (sw.size() != 3 || sw[0] != 3)
        throw ShapeError("conv1d_k3: kernel must be [3, c_in, c_out], got " + shape_str(sw));
    if (sx[2] != sw[1])
        throw ShapeError("conv1d_k3: channel mismatch, input " + shape_str(sx) + " vs kernel " +
                         shape_str(sw));
    if (sb.size() != 1 || sb[0] != sw[2])
        throw ShapeError("conv1d_k3: bias must be [c_out], got " + shape_str(sb));
    std::size_t nv = sx[0], T = sx[1], ci = sx[2], co = sw[2];
    const std::vector<double>& xv = x.data();
    const std::vector<double>& wv = w.data();
    const std::vector<double>& bv = b.data();
    std::vector<double> out(nv * T * co);
    for (std::size_t v = 0; v < nv; ++v)
        for (std::size_t t = 0; t < T; ++t) {
            double* y = out.data() + (v * T + t) * co;
            for (std::size_t o = 0; o < co; ++o) y[o] = bv[o];
            for (std::size_t tap = 0; tap < 3; ++tap) {
                std::ptrdiff_t ts = static_cast<std::ptrdiff_t>(t + tap) - 1;
                if (ts < 0 || ts >= static_cast<std::ptrdiff_t>(T)) continue;
                const double* xr = xv.data() + (v * T + ts) * ci;
                const double* wr = wv.data() + tap * ci * co;
                for (std::size_t i = 0; i < ci; ++i) {
                    double xi = xr[i];
                    if (xi == 0.0) continue;
                    const double* wrow = wr + i * co;
                    for (std::size_t o = 0; o < co; ++o) y[o] += xi * wrow[o];
                }
            }
        }
    return make_op(
        "conv1d_k3", {nv, T, co}, std::move(out), {x, w, b},
        [nv, T, ci, co](detail::TensorNode& self) {
            detail::TensorNode& X = *self.parents[0];
            detail::TensorNode& W = *self.parents[1];
            detail::TensorNode& B = *self.parents[2];
            bool wx = X.needs_grad, ww = W.needs_grad, wb = B.needs_grad;
            if (wx) detail::grad_buf(X);
            if (ww) detail::grad_buf(W);
            if (wb) detail::grad_buf(B);
            for (std::size_t v = 0; v < nv; ++v)
                for (std::size_t t = 0; t < T; ++t) {
                    const double* g = self.grad.data() + (v * T + t) * co;
                    if (wb)
                        for (std::size_t o = 0; o < co; ++o) B.grad[o] += g[o];
                    for (std::size_t tap = 0; tap < 3; ++tap) {
                        std::ptrdiff_t ts = static_cast<std::ptrdiff_t>(t + tap) - 1;
                        if (ts < 0 || ts >= static_cast<std::ptrdiff_t>(T)) continue;
                        std::size_t xoff = (v * T + ts) * ci;
                        std::size_t woff = tap * ci * co;
                        for (std::size_t i = 0; i < ci; ++i) {
                            double acc = 0.0;
                            for (std::size_t o = 0; o < co; ++o) {
                                double go = g[o];
                                if (ww) W.grad[woff + i * co + o] += go * X.value[xoff + i];
                                acc += go * W.value[woff + i * co + o];
                            }
                            if (wx) X.grad[xoff + i] += acc;
                        }
                    }
                }
        });
}

struct LstmResult {
    Tensor outputs;  // [n_veh, T, d_h]
    Tensor h_last;   // [n_veh, d_h]
    Tensor c_last;   // [n_veh, d_h]
};

// Standard LSTM over the time axis; the vehicle axis is batch. Gate layout
// in the 4*d_h dimension is (input, forget, cell, output). Composed from
// primitive ops, so the backward pass comes from the tape.
inline LstmResult lstm_sequence(const Tensor& x, const Tensor& w_ih, const Tensor& w_hh,
                                const Tensor& bias, const Tensor& h0, const Tensor& c0) {
    const Shape& sx = x.shape();
    if (sx.size() != 3) throw ShapeError("lstm: input must be rank 3, got " + shape_str(sx));
    std::size_t nv = sx[0], T = sx[1], di = sx[2];
    const Shape& si = w_ih.shape();
    const Shape& sh = w_hh.shape();
    if (si.size() != 2 || si[0] != di)
        throw ShapeError("lstm: w_ih " + shape_str(si) + " does not accept input " + shape_str(sx));
    std::size_t dh = sh.size() == 2 ? sh[0] : 0;
    if (sh.size() != 2 || si[1] != 4 * dh || sh[1] != 4 * dh)
        throw ShapeError("lstm: w_hh must be [d_h, 4*d_h] consistent with w_ih, got " +
                         shape_str(sh) + " vs " + shape_str(si));
    if (bias.shape() != Shape{4 * dh})
        throw ShapeError("lstm: bias must be [4*d_h], got " + shape_str(bias.shape()));
    if (h0.shape() != Shape{nv, dh} || c0.shape() != Shape{nv, dh})
        throw ShapeError("lstm: state must be [n_veh, d_h], got " + shape_str(h0.shape()));
    if (T == 0) throw ShapeError("lstm: empty time axis");

    Tensor h = h0, c = c0;
    std::vector<Tensor> outs;
    outs.reserve(T);
    for (std::size_t t = 0; t < T; ++t) {
        Tensor xt = reshape(narrow(x, 1, t, 1), {nv, di});
        Tensor gates = add(add(matmul(xt, w_ih), matmul(h, w_hh)), bias);
        Tensor ig = sigmoid(narrow(gates, 1, 0, dh));
        Tensor fg = sigmoid(narrow(gates, 1, dh, dh));
        Tensor gg = tanh(narrow(gates, 1, 2 * dh, dh));
        Tensor og = sigmoid(narrow(gates, 1, 3 * dh, dh));
        c = add(mul(fg, c), mul(ig, gg));
        h = mul(og, tanh(c));
        outs.push_back(reshape(h, {nv, 1, dh}));
    }
    return {concat(outs, 1), h, c};
}

}  // namespace sammp
