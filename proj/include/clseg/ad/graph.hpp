#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "clseg/core/error.hpp"
#include "clseg/core/tensor.hpp"

namespace clseg::ad {

struct Value {
    int32_t id = -1;
    bool valid() const { return id >= 0; }
};

/// Reverse-mode autodiff tape over dense tensors. Nodes are appended in
/// evaluation order; backward() walks the tape once in reverse, so gradient
/// accumulation order is fixed and runs are reproducible. One Graph instance
/// lives for one forward/backward pass.
template <typename T>
class Graph {
public:
    explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) { nodes_.reserve(256); }

    bool grad_enabled() const { return grad_enabled_; }

    Value leaf(Tensor<T> v, bool requires_grad = true) {
        return make(std::move(v), requires_grad && grad_enabled_, nullptr);
    }

    Value constant(Tensor<T> v) { return make(std::move(v), false, nullptr); }

    const Tensor<T>& val(Value v) const { return nodes_[v.id].value; }
    const Tensor<T>& grad(Value v) const { return nodes_[v.id].grad; }
    bool requires_grad(Value v) const { return nodes_[v.id].requires_grad; }
    size_t size() const { return nodes_.size(); }

    void backward(Value root) {
        CLSEG_CHECK(root.valid() && nodes_[root.id].value.numel() == 1, ErrorCode::DimMismatch,
                    "backward root must be a scalar");
        for (auto& n : nodes_)
            if (n.requires_grad) n.grad = Tensor<T>(n.value.shape());
        if (!nodes_[root.id].requires_grad) return;
        nodes_[root.id].grad[0] = T(1);
        for (int32_t i = root.id; i >= 0; --i) {
            if (nodes_[i].backward && nodes_[i].requires_grad) nodes_[i].backward(*this);
        }
    }

    // ---- elementwise ----

    Value add(Value a, Value b) {
        check_same_shape(a, b);
        Tensor<T> out = val(a);
        const Tensor<T>& bv = val(b);
        for (size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
        return unary_binary(std::move(out), a, b, [](Graph& g, Value a, Value b, const Tensor<T>& dy) {
            if (g.wants(a)) g.acc(a, dy);
            if (g.wants(b)) g.acc(b, dy);
        });
    }

    Value sub(Value a, Value b) {
        check_same_shape(a, b);
        Tensor<T> out = val(a);
        const Tensor<T>& bv = val(b);
        for (size_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
        return unary_binary(std::move(out), a, b, [](Graph& g, Value a, Value b, const Tensor<T>& dy) {
            if (g.wants(a)) g.acc(a, dy);
            if (g.wants(b)) {
                Tensor<T>& gb = g.mutable_grad(b);
                for (size_t i = 0; i < dy.numel(); ++i) gb[i] -= dy[i];
            }
        });
    }

    Value mul(Value a, Value b) {
        check_same_shape(a, b);
        Tensor<T> out = val(a);
        const Tensor<T>& bv = val(b);
        for (size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
        return unary_binary(std::move(out), a, b, [](Graph& g, Value a, Value b, const Tensor<T>& dy) {
            if (g.wants(a)) {
                Tensor<T>& ga = g.mutable_grad(a);
                const Tensor<T>& bv = g.val(b);
                for (size_t i = 0; i < dy.numel(); ++i) ga[i] += dy[i] * bv[i];
            }
            if (g.wants(b)) {
                Tensor<T>& gb = g.mutable_grad(b);
                const Tensor<T>& av = g.val(a);
                for (size_t i = 0; i < dy.numel(); ++i) gb[i] += dy[i] * av[i];
            }
        });
    }

    Value scale(Value a, double s) {
        Tensor<T> out = val(a);
        for (size_t i = 0; i < out.numel(); ++i) out[i] = static_cast<T>(out[i] * s);
        return unary(std::move(out), a, [s](Graph& g, Value a, const Tensor<T>& dy) {
            Tensor<T>& ga = g.mutable_grad(a);
            for (size_t i = 0; i < dy.numel(); ++i) ga[i] += static_cast<T>(dy[i] * s);
        });
    }

    Value add_scalar(Value a, double s) {
        Tensor<T> out = val(a);
        for (size_t i = 0; i < out.numel(); ++i) out[i] = static_cast<T>(out[i] + s);
        return unary(std::move(out), a, [](Graph& g, Value a, const Tensor<T>& dy) { g.acc(a, dy); });
    }

    Value leaky_relu(Value a, double slope) {
        Tensor<T> out = val(a);
        for (size_t i = 0; i < out.numel(); ++i)
            if (out[i] < T(0)) out[i] = static_cast<T>(out[i] * slope);
        return unary(std::move(out), a, [slope](Graph& g, Value a, const Tensor<T>& dy) {
            Tensor<T>& ga = g.mutable_grad(a);
            const Tensor<T>& x = g.val(a);
            for (size_t i = 0; i < dy.numel(); ++i) ga[i] += x[i] >= T(0) ? dy[i] : static_cast<T>(dy[i] * slope);
        });
    }

    Value gelu(Value a) {
        const Tensor<T>& x = val(a);
        Tensor<T> out(x.shape());
        for (size_t i = 0; i < x.numel(); ++i) {
            double v = static_cast<double>(x[i]);
            out[i] = static_cast<T>(0.5 * v * (1.0 + std::erf(v * 0.7071067811865475)));
        }
        return unary(std::move(out), a, [](Graph& g, Value a, const Tensor<T>& dy) {
            Tensor<T>& ga = g.mutable_grad(a);
            const Tensor<T>& x = g.val(a);
            for (size_t i = 0; i < dy.numel(); ++i) {
                double v = static_cast<double>(x[i]);
                double cdf = 0.5 * (1.0 + std::erf(v * 0.7071067811865475));
                double pdf = 0.3989422804014327 * std::exp(-0.5 * v * v);
                ga[i] += static_cast<T>(static_cast<double>(dy[i]) * (cdf + v * pdf));
            }
        });
    }

    /// Sum of all elements, as a scalar node.
    Value sum_all(Value a) {
        Tensor<T> out = Tensor<T>::scalar(val(a).sum());
        return unary(std::move(out), a, [](Graph& g, Value a, const Tensor<T>& dy) {
            Tensor<T>& ga = g.mutable_grad(a);
            for (size_t i = 0; i < ga.numel(); ++i) ga[i] += dy[0];
        });
    }

    Value mean_all(Value a) { return scale(sum_all(a), 1.0 / static_cast<double>(val(a).numel())); }

    // ---- shape ----

    Value reshape(Value a, std::vector<int> shape) {
        Tensor<T> out = val(a).reshaped(shape);
        return unary(std::move(out), a, [](Graph& g, Value a, const Tensor<T>& dy) {
            Tensor<T>& ga = g.mutable_grad(a);
            for (size_t i = 0; i < dy.numel(); ++i) ga[i] += dy[i];
        });
    }

    /// [A,B,C,D] -> [A,C,B,D]; self-inverse, used for head split/merge.
    Value permute_0213(Value a) {
        const Tensor<T>& x = val(a);
        CLSEG_CHECK(x.ndim() == 4, ErrorCode::DimMismatch, "permute_0213 expects 4-d input");
        int A = x.dim(0), B = x.dim(1), C = x.dim(2), D = x.dim(3);
        Tensor<T> out({A, C, B, D});
        permute_0213_copy(x.data(), out.data(), A, B, C, D);
        return unary(std::move(out), a, [A, B, C, D](Graph& g, Value a, const Tensor<T>& dy) {
            Tensor<T> tmp({A, B, C, D});
            permute_0213_copy(dy.data(), tmp.data(), A, C, B, D);
            g.acc(a, tmp);
        });
    }

    /// [N,T,D] -> [N,D,T].
    Value permute_021(Value a) {
        const Tensor<T>& x = val(a);
        CLSEG_CHECK(x.ndim() == 3, ErrorCode::DimMismatch, "permute_021 expects 3-d input");
        int N = x.dim(0), A = x.dim(1), B = x.dim(2);
        Tensor<T> out({N, B, A});
        for (int n = 0; n < N; ++n)
            for (int i = 0; i < A; ++i)
                for (int j = 0; j < B; ++j) out[(static_cast<size_t>(n) * B + j) * A + i] = x[(static_cast<size_t>(n) * A + i) * B + j];
        return unary(std::move(out), a, [N, A, B](Graph& g, Value a, const Tensor<T>& dy) {
            Tensor<T>& ga = g.mutable_grad(a);
            for (int n = 0; n < N; ++n)
                for (int i = 0; i < A; ++i)
                    for (int j = 0; j < B; ++j)
                        ga[(static_cast<size_t>(n) * A + i) * B + j] += dy[(static_cast<size_t>(n) * B + j) * A + i];
        });
    }

    Value concat_channels(const std::vector<Value>& parts) {
        CLSEG_CHECK(!parts.empty(), ErrorCode::DimMismatch, "concat of zero tensors");
        const Tensor<T>& first = val(parts[0]);
        CLSEG_CHECK(first.ndim() == 4, ErrorCode::DimMismatch, "concat_channels expects 4-d inputs");
        int N = first.dim(0), H = first.dim(2), W = first.dim(3);
        int Ctot = 0;
        bool req = false;
        for (Value p : parts) {
            const Tensor<T>& t = val(p);
            CLSEG_CHECK(t.dim(0) == N && t.dim(2) == H && t.dim(3) == W, ErrorCode::ShapeMismatch,
                        "concat_channels spatial/batch mismatch");
            Ctot += t.dim(1);
            req = req || requires_grad(p);
        }
        Tensor<T> out({N, Ctot, H, W});
        size_t plane = static_cast<size_t>(H) * W;
        for (int n = 0; n < N; ++n) {
            size_t off = static_cast<size_t>(n) * Ctot * plane;
            for (Value p : parts) {
                const Tensor<T>& t = val(p);
                int c = t.dim(1);
                const T* src = t.data() + static_cast<size_t>(n) * c * plane;
                std::copy(src, src + static_cast<size_t>(c) * plane, out.data() + off);
                off += static_cast<size_t>(c) * plane;
            }
        }
        std::vector<Value> held = parts;
        return make(std::move(out), req && grad_enabled_, [held, N, Ctot, H, W](Graph& g) {
            Value self = g.last_emitted_;
            const Tensor<T>& dy = g.grad(self);
            size_t plane = static_cast<size_t>(H) * W;
            for (int n = 0; n < N; ++n) {
                size_t off = static_cast<size_t>(n) * Ctot * plane;
                for (Value p : held) {
                    const Tensor<T>& t = g.val(p);
                    int c = t.dim(1);
                    if (g.wants(p)) {
                        Tensor<T>& gp = g.mutable_grad(p);
                        T* dst = gp.data() + static_cast<size_t>(n) * c * plane;
                        const T* src = dy.data() + off;
                        for (size_t i = 0; i < static_cast<size_t>(c) * plane; ++i) dst[i] += src[i];
                    }
                    off += static_cast<size_t>(c) * plane;
                }
            }
        });
    }

    // ---- linear algebra ----

    Value matmul(Value a, Value b) {
        const Tensor<T>& av = val(a);
        const Tensor<T>& bv = val(b);
        CLSEG_CHECK(av.ndim() == 2 && bv.ndim() == 2 && av.dim(1) == bv.dim(0), ErrorCode::DimMismatch,
                    "matmul shape mismatch");
        int M = av.dim(0), K = av.dim(1), N = bv.dim(1);
        Tensor<T> out({M, N});
        gemm(av.data(), bv.data(), out.data(), M, K, N);
        return unary_binary(std::move(out), a, b, [M, K, N](Graph& g, Value a, Value b, const Tensor<T>& dy) {
            if (g.wants(a)) gemm_acc(dy.data(), g.val(b).data(), g.mutable_grad(a).data(), M, N, K, false, true);
            if (g.wants(b)) gemm_acc(g.val(a).data(), dy.data(), g.mutable_grad(b).data(), K, M, N, true, false);
        });
    }

    /// y[M,N] = x[M,N] + row[N] broadcast over rows.
    Value add_rowvec(Value a, Value b) {
        const Tensor<T>& av = val(a);
        const Tensor<T>& bv = val(b);
        int N = bv.dim(static_cast<size_t>(0));
        CLSEG_CHECK(bv.ndim() == 1 && av.numel() % static_cast<size_t>(N) == 0, ErrorCode::DimMismatch,
                    "add_rowvec shape mismatch");
        Tensor<T> out = av;
        size_t rows = av.numel() / static_cast<size_t>(N);
        for (size_t r = 0; r < rows; ++r)
            for (int j = 0; j < N; ++j) out[r * N + j] += bv[j];
        return unary_binary(std::move(out), a, b, [N](Graph& g, Value a, Value b, const Tensor<T>& dy) {
            if (g.wants(a)) g.acc(a, dy);
            if (g.wants(b)) {
                Tensor<T>& gb = g.mutable_grad(b);
                size_t rows = dy.numel() / static_cast<size_t>(N);
                for (size_t r = 0; r < rows; ++r)
                    for (int j = 0; j < N; ++j) gb[j] += dy[r * N + j];
            }
        });
    }

    /// Batched matmul a[B,M,K] x b[B,K,N] (or b[B,N,K] when trans_b).
    Value bmm(Value a, Value b, bool trans_b = false) {
        const Tensor<T>& av = val(a);
        const Tensor<T>& bv = val(b);
        CLSEG_CHECK(av.ndim() == 3 && bv.ndim() == 3 && av.dim(0) == bv.dim(0), ErrorCode::DimMismatch,
                    "bmm expects matching 3-d inputs");
        int B = av.dim(0), M = av.dim(1), K = av.dim(2);
        int N = trans_b ? bv.dim(1) : bv.dim(2);
        CLSEG_CHECK((trans_b ? bv.dim(2) : bv.dim(1)) == K, ErrorCode::DimMismatch, "bmm inner dim mismatch");
        Tensor<T> out({B, M, N});
        for (int i = 0; i < B; ++i)
            gemm(av.data() + static_cast<size_t>(i) * M * K, bv.data() + static_cast<size_t>(i) * (trans_b ? N * K : K * N),
                 out.data() + static_cast<size_t>(i) * M * N, M, K, N, false, trans_b);
        return unary_binary(std::move(out), a, b,
                            [B, M, K, N, trans_b](Graph& g, Value a, Value b, const Tensor<T>& dy) {
            for (int i = 0; i < B; ++i) {
                const T* dyp = dy.data() + static_cast<size_t>(i) * M * N;
                const T* ap = g.val(a).data() + static_cast<size_t>(i) * M * K;
                const T* bp = g.val(b).data() + static_cast<size_t>(i) * (trans_b ? N * K : K * N);
                if (g.wants(a)) {
                    T* gap = g.mutable_grad(a).data() + static_cast<size_t>(i) * M * K;
                    // y = a b (or a b^T): da = dy b^T (or dy b)
                    gemm_acc(dyp, bp, gap, M, N, K, false, !trans_b);
                }
                if (g.wants(b)) {
                    T* gbp = g.mutable_grad(b).data() + static_cast<size_t>(i) * (trans_b ? N * K : K * N);
                    if (trans_b)
                        gemm_acc(dyp, ap, gbp, N, M, K, true, false);  // db[N,K] = dy^T a
                    else
                        gemm_acc(ap, dyp, gbp, K, M, N, true, false);  // db[K,N] = a^T dy
                }
            }
        });
    }

    /// y = a / s with s a learnable scalar node.
    Value div_by_scalar(Value a, Value s) {
        const Tensor<T>& sv = val(s);
        CLSEG_CHECK(sv.numel() == 1, ErrorCode::DimMismatch, "div_by_scalar expects scalar divisor");
        T d = sv[0];
        Tensor<T> out = val(a);
        for (size_t i = 0; i < out.numel(); ++i) out[i] /= d;
        return unary_binary(std::move(out), a, s, [](Graph& g, Value a, Value s, const Tensor<T>& dy) {
            T d = g.val(s)[0];
            if (g.wants(a)) {
                Tensor<T>& ga = g.mutable_grad(a);
                for (size_t i = 0; i < dy.numel(); ++i) ga[i] += dy[i] / d;
            }
            if (g.wants(s)) {
                const Tensor<T>& av = g.val(a);
                T acc = T(0);
                for (size_t i = 0; i < dy.numel(); ++i) acc += dy[i] * av[i];
                g.mutable_grad(s)[0] += -acc / (d * d);
            }
        });
    }

    // ---- normalization / activation over structured dims ----

    Value softmax_last(Value a) {
        const Tensor<T>& x = val(a);
        int N = x.dim(static_cast<int>(x.ndim()) - 1);
        size_t rows = x.numel() / static_cast<size_t>(N);
        Tensor<T> out(x.shape());
        for (size_t r = 0; r < rows; ++r) {
            const T* xin = x.data() + r * N;
            T* y = out.data() + r * N;
            T m = xin[0];
            for (int j = 1; j < N; ++j) m = std::max(m, xin[j]);
            T sum = T(0);
            for (int j = 0; j < N; ++j) {
                y[j] = std::exp(xin[j] - m);
                sum += y[j];
            }
            for (int j = 0; j < N; ++j) y[j] /= sum;
        }
        return unary(std::move(out), a, [N, rows](Graph& g, Value a, const Tensor<T>& dy) {
            Value self = g.last_emitted_;
            const Tensor<T>& y = g.val(self);
            Tensor<T>& ga = g.mutable_grad(a);
            for (size_t r = 0; r < rows; ++r) {
                const T* yr = y.data() + r * N;
                const T* dyr = dy.data() + r * N;
                T dot = T(0);
                for (int j = 0; j < N; ++j) dot += yr[j] * dyr[j];
                T* gar = ga.data() + r * N;
                for (int j = 0; j < N; ++j) gar[j] += yr[j] * (dyr[j] - dot);
            }
        });
    }

    /// Sets the diagonal of each [T,T] slice to a large negative constant so
    /// that it drops out of a following softmax. Gradient on the diagonal is
    /// discarded.
    Value mask_diagonal(Value a) {
        const Tensor<T>& x = val(a);
        CLSEG_CHECK(x.ndim() == 3 && x.dim(1) == x.dim(2), ErrorCode::DimMismatch, "mask_diagonal expects [B,T,T]");
        int B = x.dim(0), Tn = x.dim(1);
        Tensor<T> out = x;
        for (int b = 0; b < B; ++b)
            for (int i = 0; i < Tn; ++i) out[(static_cast<size_t>(b) * Tn + i) * Tn + i] = T(-1e30);
        return unary(std::move(out), a, [B, Tn](Graph& g, Value a, const Tensor<T>& dy) {
            Tensor<T>& ga = g.mutable_grad(a);
            for (int b = 0; b < B; ++b)
                for (int i = 0; i < Tn; ++i)
                    for (int j = 0; j < Tn; ++j)
                        if (i != j) ga[(static_cast<size_t>(b) * Tn + i) * Tn + j] += dy[(static_cast<size_t>(b) * Tn + i) * Tn + j];
        });
    }

    /// Per-(item, channel) normalization over H,W with affine parameters.
    Value instance_norm(Value x, Value gamma, Value beta, double eps = 1e-5) {
        const Tensor<T>& xv = val(x);
        CLSEG_CHECK(xv.ndim() == 4, ErrorCode::DimMismatch, "instance_norm expects [N,C,H,W]");
        int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
        CLSEG_CHECK(val(gamma).numel() == static_cast<size_t>(C) && val(beta).numel() == static_cast<size_t>(C),
                    ErrorCode::DimMismatch, "instance_norm affine size mismatch");
        size_t plane = static_cast<size_t>(H) * W;
        auto xhat = std::make_shared<Tensor<T>>(xv.shape());
        auto invstd = std::make_shared<Tensor<T>>(std::vector<int>{N, C});
        Tensor<T> out(xv.shape());
        const Tensor<T>& gv = val(gamma);
        const Tensor<T>& bv = val(beta);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const T* xp = xv.data() + (static_cast<size_t>(n) * C + c) * plane;
                T mean = T(0);
                for (size_t i = 0; i < plane; ++i) mean += xp[i];
                mean /= static_cast<T>(plane);
                T var = T(0);
                for (size_t i = 0; i < plane; ++i) {
                    T d = xp[i] - mean;
                    var += d * d;
                }
                var /= static_cast<T>(plane);
                T is = T(1) / std::sqrt(var + static_cast<T>(eps));
                (*invstd)[static_cast<size_t>(n) * C + c] = is;
                T* xh = xhat->data() + (static_cast<size_t>(n) * C + c) * plane;
                T* yp = out.data() + (static_cast<size_t>(n) * C + c) * plane;
                for (size_t i = 0; i < plane; ++i) {
                    xh[i] = (xp[i] - mean) * is;
                    yp[i] = xh[i] * gv[c] + bv[c];
                }
            }
        return ternary(std::move(out), x, gamma, beta,
                       [N, C, plane, xhat, invstd](Graph& g, Value x, Value gamma, Value beta, const Tensor<T>& dy) {
            const Tensor<T>& gv = g.val(gamma);
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const T* dyp = dy.data() + (static_cast<size_t>(n) * C + c) * plane;
                    const T* xh = xhat->data() + (static_cast<size_t>(n) * C + c) * plane;
                    T sum_dy = T(0), sum_dy_xh = T(0);
                    for (size_t i = 0; i < plane; ++i) {
                        sum_dy += dyp[i];
                        sum_dy_xh += dyp[i] * xh[i];
                    }
                    if (g.wants(gamma)) g.mutable_grad(gamma)[c] += sum_dy_xh;
                    if (g.wants(beta)) g.mutable_grad(beta)[c] += sum_dy;
                    if (g.wants(x)) {
                        T* gx = g.mutable_grad(x).data() + (static_cast<size_t>(n) * C + c) * plane;
                        T is = (*invstd)[static_cast<size_t>(n) * C + c];
                        T k = gv[c] * is;
                        T m_dy = sum_dy / static_cast<T>(plane);
                        T m_dy_xh = sum_dy_xh / static_cast<T>(plane);
                        for (size_t i = 0; i < plane; ++i) gx[i] += k * (dyp[i] - m_dy - xh[i] * m_dy_xh);
                    }
                }
        });
    }

    /// Normalization over the last dimension with affine parameters.
    Value layer_norm(Value x, Value gamma, Value beta, double eps = 1e-5) {
        const Tensor<T>& xv = val(x);
        int D = xv.dim(static_cast<int>(xv.ndim()) - 1);
        size_t rows = xv.numel() / static_cast<size_t>(D);
        CLSEG_CHECK(val(gamma).numel() == static_cast<size_t>(D) && val(beta).numel() == static_cast<size_t>(D),
                    ErrorCode::DimMismatch, "layer_norm affine size mismatch");
        auto xhat = std::make_shared<Tensor<T>>(xv.shape());
        auto invstd = std::make_shared<std::vector<T>>(rows);
        Tensor<T> out(xv.shape());
        const Tensor<T>& gv = val(gamma);
        const Tensor<T>& bv = val(beta);
        for (size_t r = 0; r < rows; ++r) {
            const T* xp = xv.data() + r * D;
            T mean = T(0);
            for (int i = 0; i < D; ++i) mean += xp[i];
            mean /= static_cast<T>(D);
            T var = T(0);
            for (int i = 0; i < D; ++i) {
                T d = xp[i] - mean;
                var += d * d;
            }
            var /= static_cast<T>(D);
            T is = T(1) / std::sqrt(var + static_cast<T>(eps));
            (*invstd)[r] = is;
            T* xh = xhat->data() + r * D;
            T* yp = out.data() + r * D;
            for (int i = 0; i < D; ++i) {
                xh[i] = (xp[i] - mean) * is;
                yp[i] = xh[i] * gv[i] + bv[i];
            }
        }
        return ternary(std::move(out), x, gamma, beta,
                       [D, rows, xhat, invstd](Graph& g, Value x, Value gamma, Value beta, const Tensor<T>& dy) {
            const Tensor<T>& gv = g.val(gamma);
            for (size_t r = 0; r < rows; ++r) {
                const T* dyp = dy.data() + r * D;
                const T* xh = xhat->data() + r * D;
                T sum_dg = T(0), sum_dg_xh = T(0);
                for (int i = 0; i < D; ++i) {
                    T dgi = dyp[i] * gv[i];
                    sum_dg += dgi;
                    sum_dg_xh += dgi * xh[i];
                }
                if (g.wants(gamma)) {
                    Tensor<T>& gg = g.mutable_grad(gamma);
                    for (int i = 0; i < D; ++i) gg[i] += dyp[i] * xh[i];
                }
                if (g.wants(beta)) {
                    Tensor<T>& gb = g.mutable_grad(beta);
                    for (int i = 0; i < D; ++i) gb[i] += dyp[i];
                }
                if (g.wants(x)) {
                    T* gx = g.mutable_grad(x).data() + r * D;
                    T is = (*invstd)[r];
                    T m1 = sum_dg / static_cast<T>(D);
                    T m2 = sum_dg_xh / static_cast<T>(D);
                    for (int i = 0; i < D; ++i) gx[i] += is * (dyp[i] * gv[i] - m1 - xh[i] * m2);
                }
            }
        });
    }

    // ---- convolution / pooling ----

    /// Stride-1 2-d convolution with symmetric zero padding.
    Value conv2d(Value x, Value w, Value b, int pad) {
        const Tensor<T>& xv = val(x);
        const Tensor<T>& wv = val(w);
        CLSEG_CHECK(xv.ndim() == 4 && wv.ndim() == 4, ErrorCode::DimMismatch, "conv2d expects 4-d tensors");
        int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
        int F = wv.dim(0), KH = wv.dim(2), KW = wv.dim(3);
        CLSEG_CHECK(wv.dim(1) == C, ErrorCode::DimMismatch, "conv2d channel mismatch");
        int OH = H + 2 * pad - KH + 1, OW = W + 2 * pad - KW + 1;
        CLSEG_CHECK(OH >= 1 && OW >= 1, ErrorCode::BadInputShape, "conv2d output would be empty");
        int ck = C * KH * KW;
        auto col = std::make_shared<Tensor<T>>(std::vector<int>{N * OH * OW, ck});
        im2col(xv.data(), col->data(), N, C, H, W, KH, KW, pad);
        Tensor<T> out({N, F, OH, OW});
        // out rows are (n,oh,ow) x F, then transposed into NCHW
        Tensor<T> rows({N * OH * OW, F});
        gemm(col->data(), wv.data(), rows.data(), N * OH * OW, ck, F, false, true);
        const Tensor<T>& bv = val(b);
        for (int n = 0; n < N; ++n)
            for (int f = 0; f < F; ++f) {
                T* dst = out.data() + (static_cast<size_t>(n) * F + f) * OH * OW;
                const T* src = rows.data() + static_cast<size_t>(n) * OH * OW * F + f;
                T bias = bv[f];
                for (int i = 0; i < OH * OW; ++i) dst[i] = src[static_cast<size_t>(i) * F] + bias;
            }
        return ternary(std::move(out), x, w, b,
                       [col, N, C, H, W, F, KH, KW, pad, OH, OW, ck](Graph& g, Value x, Value w, Value b,
                                                                     const Tensor<T>& dy) {
            // regroup dy into (n,oh,ow) x F rows
            Tensor<T> dyr({N * OH * OW, F});
            for (int n = 0; n < N; ++n)
                for (int f = 0; f < F; ++f) {
                    const T* src = dy.data() + (static_cast<size_t>(n) * F + f) * OH * OW;
                    T* dst = dyr.data() + static_cast<size_t>(n) * OH * OW * F + f;
                    for (int i = 0; i < OH * OW; ++i) dst[static_cast<size_t>(i) * F] = src[i];
                }
            if (g.wants(b)) {
                Tensor<T>& gb = g.mutable_grad(b);
                for (int r = 0; r < N * OH * OW; ++r)
                    for (int f = 0; f < F; ++f) gb[f] += dyr[static_cast<size_t>(r) * F + f];
            }
            if (g.wants(w)) gemm_acc(dyr.data(), col->data(), g.mutable_grad(w).data(), F, N * OH * OW, ck, true, false);
            if (g.wants(x)) {
                Tensor<T> dcol({N * OH * OW, ck});
                gemm(dyr.data(), g.val(w).data(), dcol.data(), N * OH * OW, F, ck);
                col2im_acc(dcol.data(), g.mutable_grad(x).data(), N, C, H, W, KH, KW, pad);
            }
        });
    }

    /// 2x2 stride-2 transposed convolution (non-overlapping upsampling).
    /// Weights are [Cin, Cout, 2, 2].
    Value conv_transpose2x2(Value x, Value w, Value b) {
        const Tensor<T>& xv = val(x);
        const Tensor<T>& wv = val(w);
        int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
        CLSEG_CHECK(wv.ndim() == 4 && wv.dim(0) == C && wv.dim(2) == 2 && wv.dim(3) == 2, ErrorCode::DimMismatch,
                    "conv_transpose2x2 weight mismatch");
        int F = wv.dim(1);
        // rows: x as [N*H*W, C]
        Tensor<T> xr({N * H * W, C});
        nchw_to_rows(xv.data(), xr.data(), N, C, H, W);
        Tensor<T> yr({N * H * W, F * 4});
        gemm(xr.data(), wv.data(), yr.data(), N * H * W, C, F * 4);  // w viewed as [C, F*4]
        Tensor<T> out({N, F, 2 * H, 2 * W});
        const Tensor<T>& bv = val(b);
        for (size_t i = 0; i < out.numel(); ++i) out[i] = T(0);
        for (int n = 0; n < N; ++n)
            for (int h = 0; h < H; ++h)
                for (int w2 = 0; w2 < W; ++w2) {
                    const T* src = yr.data() + ((static_cast<size_t>(n) * H + h) * W + w2) * F * 4;
                    for (int f = 0; f < F; ++f) {
                        T* dst = out.data() + ((static_cast<size_t>(n) * F + f) * 2 * H + 2 * h) * 2 * W + 2 * w2;
                        dst[0] = src[f * 4 + 0];
                        dst[1] = src[f * 4 + 1];
                        dst[2 * W] = src[f * 4 + 2];
                        dst[2 * W + 1] = src[f * 4 + 3];
                    }
                }
        for (int n = 0; n < N; ++n)
            for (int f = 0; f < F; ++f) {
                T* dst = out.data() + (static_cast<size_t>(n) * F + f) * 4 * H * W;
                T bias = bv[f];
                for (int i = 0; i < 4 * H * W; ++i) dst[i] += bias;
            }
        return ternary(std::move(out), x, w, b,
                       [N, C, H, W, F](Graph& g, Value x, Value w, Value b, const Tensor<T>& dy) {
            Tensor<T> dyr({N * H * W, F * 4});
            for (int n = 0; n < N; ++n)
                for (int h = 0; h < H; ++h)
                    for (int w2 = 0; w2 < W; ++w2) {
                        T* dst = dyr.data() + ((static_cast<size_t>(n) * H + h) * W + w2) * F * 4;
                        for (int f = 0; f < F; ++f) {
                            const T* src =
                                dy.data() + ((static_cast<size_t>(n) * F + f) * 2 * H + 2 * h) * 2 * W + 2 * w2;
                            dst[f * 4 + 0] = src[0];
                            dst[f * 4 + 1] = src[1];
                            dst[f * 4 + 2] = src[2 * W];
                            dst[f * 4 + 3] = src[2 * W + 1];
                        }
                    }
            if (g.wants(b)) {
                Tensor<T>& gb = g.mutable_grad(b);
                for (int n = 0; n < N; ++n)
                    for (int f = 0; f < F; ++f) {
                        const T* src = dy.data() + (static_cast<size_t>(n) * F + f) * 4 * H * W;
                        T acc = T(0);
                        for (int i = 0; i < 4 * H * W; ++i) acc += src[i];
                        gb[f] += acc;
                    }
            }
            Tensor<T> xr({N * H * W, C});
            nchw_to_rows(g.val(x).data(), xr.data(), N, C, H, W);
            if (g.wants(w)) gemm_acc(xr.data(), dyr.data(), g.mutable_grad(w).data(), C, N * H * W, F * 4, true, false);
            if (g.wants(x)) {
                Tensor<T> dxr({N * H * W, C});
                gemm(dyr.data(), g.val(w).data(), dxr.data(), N * H * W, F * 4, C, false, true);
                rows_to_nchw_acc(dxr.data(), g.mutable_grad(x).data(), N, C, H, W);
            }
        });
    }

    Value maxpool2(Value x) {
        const Tensor<T>& xv = val(x);
        int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
        CLSEG_CHECK(H % 2 == 0 && W % 2 == 0, ErrorCode::BadInputShape, "maxpool2 needs even spatial dims");
        int OH = H / 2, OW = W / 2;
        Tensor<T> out({N, C, OH, OW});
        auto argmax = std::make_shared<std::vector<int32_t>>(out.numel());
        size_t o = 0;
        for (int nc = 0; nc < N * C; ++nc) {
            const T* xp = xv.data() + static_cast<size_t>(nc) * H * W;
            for (int i = 0; i < OH; ++i)
                for (int j = 0; j < OW; ++j, ++o) {
                    int base = 2 * i * W + 2 * j;
                    int cand[4] = {base, base + 1, base + W, base + W + 1};
                    int best = cand[0];
                    for (int k = 1; k < 4; ++k)
                        if (xp[cand[k]] > xp[best]) best = cand[k];
                    (*argmax)[o] = nc * H * W + best;
                    out[o] = xp[best];
                }
        }
        return unary(std::move(out), x, [argmax](Graph& g, Value x, const Tensor<T>& dy) {
            Tensor<T>& gx = g.mutable_grad(x);
            for (size_t i = 0; i < dy.numel(); ++i) gx[(*argmax)[i]] += dy[i];
        });
    }

    Value avgpool2(Value x) {
        const Tensor<T>& xv = val(x);
        int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
        CLSEG_CHECK(H % 2 == 0 && W % 2 == 0, ErrorCode::BadInputShape, "avgpool2 needs even spatial dims");
        int OH = H / 2, OW = W / 2;
        Tensor<T> out({N, C, OH, OW});
        size_t o = 0;
        for (int nc = 0; nc < N * C; ++nc) {
            const T* xp = xv.data() + static_cast<size_t>(nc) * H * W;
            for (int i = 0; i < OH; ++i)
                for (int j = 0; j < OW; ++j, ++o) {
                    int base = 2 * i * W + 2 * j;
                    out[o] = (xp[base] + xp[base + 1] + xp[base + W] + xp[base + W + 1]) * T(0.25);
                }
        }
        return unary(std::move(out), x, [N, C, H, W, OH, OW](Graph& g, Value x, const Tensor<T>& dy) {
            Tensor<T>& gx = g.mutable_grad(x);
            size_t o = 0;
            for (int nc = 0; nc < N * C; ++nc) {
                T* gp = gx.data() + static_cast<size_t>(nc) * H * W;
                for (int i = 0; i < OH; ++i)
                    for (int j = 0; j < OW; ++j, ++o) {
                        T v = dy[o] * T(0.25);
                        int base = 2 * i * W + 2 * j;
                        gp[base] += v;
                        gp[base + 1] += v;
                        gp[base + W] += v;
                        gp[base + W + 1] += v;
                    }
            }
        });
    }

    /// Spatial shift by (dy_off, dx_off) with zero fill, same shape.
    Value shift2d(Value x, int dy_off, int dx_off) {
        const Tensor<T>& xv = val(x);
        int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
        Tensor<T> out({N, C, H, W});
        for (int nc = 0; nc < N * C; ++nc) {
            const T* xp = xv.data() + static_cast<size_t>(nc) * H * W;
            T* yp = out.data() + static_cast<size_t>(nc) * H * W;
            for (int i = 0; i < H; ++i) {
                int si = i + dy_off;
                for (int j = 0; j < W; ++j) {
                    int sj = j + dx_off;
                    yp[i * W + j] = (si >= 0 && si < H && sj >= 0 && sj < W) ? xp[si * W + sj] : T(0);
                }
            }
        }
        return unary(std::move(out), x, [N, C, H, W, dy_off, dx_off](Graph& g, Value x, const Tensor<T>& dy) {
            Tensor<T>& gx = g.mutable_grad(x);
            for (int nc = 0; nc < N * C; ++nc) {
                T* gp = gx.data() + static_cast<size_t>(nc) * H * W;
                const T* dp = dy.data() + static_cast<size_t>(nc) * H * W;
                for (int i = 0; i < H; ++i) {
                    int si = i + dy_off;
                    if (si < 0 || si >= H) continue;
                    for (int j = 0; j < W; ++j) {
                        int sj = j + dx_off;
                        if (sj >= 0 && sj < W) gp[si * W + sj] += dp[i * W + j];
                    }
                }
            }
        });
    }

    /// Non-overlapping patch extraction: [N,C,H,W] -> [N, T, C*p*p] with
    /// T = (H/p)*(W/p), patches scanned row-major.
    Value extract_patches(Value x, int p) {
        const Tensor<T>& xv = val(x);
        int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
        CLSEG_CHECK(H % p == 0 && W % p == 0, ErrorCode::IncompatiblePatchSize,
                    "patch size must divide feature map dims");
        int GH = H / p, GW = W / p, Tn = GH * GW, L = C * p * p;
        Tensor<T> out({N, Tn, L});
        for (int n = 0; n < N; ++n)
            for (int gi = 0; gi < GH; ++gi)
                for (int gj = 0; gj < GW; ++gj) {
                    T* dst = out.data() + ((static_cast<size_t>(n) * Tn) + gi * GW + gj) * L;
                    for (int c = 0; c < C; ++c) {
                        const T* src = xv.data() + ((static_cast<size_t>(n) * C + c) * H + gi * p) * W + gj * p;
                        for (int i = 0; i < p; ++i)
                            for (int j = 0; j < p; ++j) *dst++ = src[i * W + j];
                    }
                }
        return unary(std::move(out), x, [N, C, H, W, p](Graph& g, Value x, const Tensor<T>& dy) {
            int GH = H / p, GW = W / p, Tn = GH * GW, L = C * p * p;
            Tensor<T>& gx = g.mutable_grad(x);
            for (int n = 0; n < N; ++n)
                for (int gi = 0; gi < GH; ++gi)
                    for (int gj = 0; gj < GW; ++gj) {
                        const T* src = dy.data() + ((static_cast<size_t>(n) * Tn) + gi * GW + gj) * L;
                        for (int c = 0; c < C; ++c) {
                            T* dst = gx.data() + ((static_cast<size_t>(n) * C + c) * H + gi * p) * W + gj * p;
                            for (int i = 0; i < p; ++i)
                                for (int j = 0; j < p; ++j) dst[i * W + j] += *src++;
                        }
                    }
        });
    }

    /// x[N,T,D] + pos[T,D] broadcast over N.
    Value add_pos_embedding(Value x, Value pos) {
        const Tensor<T>& xv = val(x);
        const Tensor<T>& pv = val(pos);
        CLSEG_CHECK(xv.ndim() == 3 && pv.numel() * xv.dim(0) == xv.numel(), ErrorCode::DimMismatch,
                    "pos embedding shape mismatch");
        int N = xv.dim(0);
        size_t td = pv.numel();
        Tensor<T> out = xv;
        for (int n = 0; n < N; ++n)
            for (size_t i = 0; i < td; ++i) out[static_cast<size_t>(n) * td + i] += pv[i];
        return unary_binary(std::move(out), x, pos, [N, td](Graph& g, Value x, Value pos, const Tensor<T>& dy) {
            if (g.wants(x)) g.acc(x, dy);
            if (g.wants(pos)) {
                Tensor<T>& gp = g.mutable_grad(pos);
                for (int n = 0; n < N; ++n)
                    for (size_t i = 0; i < td; ++i) gp[i] += dy[static_cast<size_t>(n) * td + i];
            }
        });
    }

    // ---- helpers used by op implementations ----

    bool wants(Value v) const { return nodes_[v.id].requires_grad; }

    Tensor<T>& mutable_grad(Value v) { return nodes_[v.id].grad; }

    void acc(Value v, const Tensor<T>& dy) {
        Tensor<T>& g = nodes_[v.id].grad;
        for (size_t i = 0; i < dy.numel(); ++i) g[i] += dy[i];
    }

    Value unary(Tensor<T> out, Value a, std::function<void(Graph&, Value, const Tensor<T>&)> back) {
        bool req = requires_grad(a) && grad_enabled_;
        if (!req) return make(std::move(out), false, nullptr);
        return make(std::move(out), true, [a, back](Graph& g) {
            Value self = g.last_emitted_;
            back(g, a, g.grad(self));
        });
    }

    Value unary_binary(Tensor<T> out, Value a, Value b,
                       std::function<void(Graph&, Value, Value, const Tensor<T>&)> back) {
        bool req = (requires_grad(a) || requires_grad(b)) && grad_enabled_;
        if (!req) return make(std::move(out), false, nullptr);
        return make(std::move(out), true, [a, b, back](Graph& g) {
            Value self = g.last_emitted_;
            back(g, a, b, g.grad(self));
        });
    }

    Value ternary(Tensor<T> out, Value a, Value b, Value c,
                  std::function<void(Graph&, Value, Value, Value, const Tensor<T>&)> back) {
        bool req = (requires_grad(a) || requires_grad(b) || requires_grad(c)) && grad_enabled_;
        if (!req) return make(std::move(out), false, nullptr);
        return make(std::move(out), true, [a, b, c, back](Graph& g) {
            Value self = g.last_emitted_;
            back(g, a, b, c, g.grad(self));
        });
    }

    Value make(Tensor<T> v, bool requires_grad, std::function<void(Graph&)> back) {
        Node n;
        n.value = std::move(v);
        n.requires_grad = requires_grad;
        n.backward_outer = std::move(back);
        nodes_.push_back(std::move(n));
        Value out{static_cast<int32_t>(nodes_.size() - 1)};
        // wire the self id into the closure via last_emitted_ at call time
        if (nodes_.back().backward_outer) {
            nodes_.back().backward = [id = out.id](Graph& g) {
                g.last_emitted_ = Value{id};
                g.nodes_[id].backward_outer(g);
            };
        }
        return out;
    }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        bool requires_grad = false;
        std::function<void(Graph&)> backward;
        std::function<void(Graph&)> backward_outer;
    };

    static void permute_0213_copy(const T* src, T* dst, int A, int B, int C, int D) {
        for (int a = 0; a < A; ++a)
            for (int b = 0; b < B; ++b)
                for (int c = 0; c < C; ++c) {
                    const T* s = src + ((static_cast<size_t>(a) * B + b) * C + c) * D;
                    T* d = dst + ((static_cast<size_t>(a) * C + c) * B + b) * D;
                    std::copy(s, s + D, d);
                }
    }

    static void im2col(const T* x, T* col, int N, int C, int H, int W, int KH, int KW, int pad) {
        int OH = H + 2 * pad - KH + 1, OW = W + 2 * pad - KW + 1;
        int ck = C * KH * KW;
        for (int n = 0; n < N; ++n)
            for (int oh = 0; oh < OH; ++oh)
                for (int ow = 0; ow < OW; ++ow) {
                    T* dst = col + ((static_cast<size_t>(n) * OH + oh) * OW + ow) * ck;
                    for (int c = 0; c < C; ++c) {
                        const T* xp = x + (static_cast<size_t>(n) * C + c) * H * W;
                        for (int ki = 0; ki < KH; ++ki) {
                            int ih = oh - pad + ki;
                            if (ih < 0 || ih >= H) {
                                for (int kj = 0; kj < KW; ++kj) *dst++ = T(0);
                                continue;
                            }
                            for (int kj = 0; kj < KW; ++kj) {
                                int iw = ow - pad + kj;
                                *dst++ = (iw >= 0 && iw < W) ? xp[ih * W + iw] : T(0);
                            }
                        }
                    }
                }
    }

    static void col2im_acc(const T* col, T* gx, int N, int C, int H, int W, int KH, int KW, int pad) {
        int OH = H + 2 * pad - KH + 1, OW = W + 2 * pad - KW + 1;
        int ck = C * KH * KW;
        for (int n = 0; n < N; ++n)
            for (int oh = 0; oh < OH; ++oh)
                for (int ow = 0; ow < OW; ++ow) {
                    const T* src = col + ((static_cast<size_t>(n) * OH + oh) * OW + ow) * ck;
                    for (int c = 0; c < C; ++c) {
                        T* gp = gx + (static_cast<size_t>(n) * C + c) * H * W;
                        for (int ki = 0; ki < KH; ++ki) {
                            int ih = oh - pad + ki;
                            if (ih < 0 || ih >= H) {
                                src += KW;
                                continue;
                            }
                            for (int kj = 0; kj < KW; ++kj) {
                                int iw = ow - pad + kj;
                                if (iw >= 0 && iw < W) gp[ih * W + iw] += *src;
                                ++src;
                            }
                        }
                    }
                }
    }

    static void nchw_to_rows(const T* x, T* rows, int N, int C, int H, int W) {
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const T* xp = x + (static_cast<size_t>(n) * C + c) * H * W;
                T* rp = rows + static_cast<size_t>(n) * H * W * C + c;
                for (int i = 0; i < H * W; ++i) rp[static_cast<size_t>(i) * C] = xp[i];
            }
    }

    static void rows_to_nchw_acc(const T* rows, T* x, int N, int C, int H, int W) {
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                T* xp = x + (static_cast<size_t>(n) * C + c) * H * W;
                const T* rp = rows + static_cast<size_t>(n) * H * W * C + c;
                for (int i = 0; i < H * W; ++i) xp[i] += rp[static_cast<size_t>(i) * C];
            }
    }

    void check_same_shape(Value a, Value b) const {
        CLSEG_CHECK(val(a).same_shape(val(b)), ErrorCode::ShapeMismatch,
                    "elementwise op shape mismatch: " + Tensor<T>::shape_string(val(a).shape()) + " vs " +
                        Tensor<T>::shape_string(val(b).shape()));
    }

    std::vector<Node> nodes_;
    bool grad_enabled_;
    Value last_emitted_{-1};
};

}  // namespace clseg::ad
