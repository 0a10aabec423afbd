#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "xmic/common.hpp"
#include "xmic/rng.hpp"

namespace xmic {

namespace autograd {

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

// Disables graph recording for the current thread; pure inference runs under
// this guard so forward passes allocate no autograd state.
struct NoGradGuard {
    NoGradGuard() : prev_(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGradGuard() { grad_mode_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

// Per-thread instrumentation: total scalar activations produced by recorded
// (grad-tracked) operations. Cost profiling reads deltas of this counter
// around real forward passes.
inline std::uint64_t& activation_counter() {
    thread_local std::uint64_t count = 0;
    return count;
}

inline std::uint64_t activation_count() { return activation_counter(); }
inline void reset_activation_count() { activation_counter() = 0; }

}  // namespace autograd

struct TensorImpl;
using TensorImplPtr = std::shared_ptr<TensorImpl>;

struct TensorImpl {
    Shape shape;
    std::vector<Scalar> data;
    std::vector<Scalar> grad;  // sized lazily; only ever allocated when requires_grad
    bool requires_grad = false;
    std::uint64_t seq = 0;  // creation order; parents always precede children
    std::vector<TensorImplPtr> parents;
    std::function<void(TensorImpl&)> backward_fn;

    std::size_t numel() const { return data.size(); }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

inline std::uint64_t next_seq() {
    static std::atomic<std::uint64_t> counter{0};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

class Tensor {
  public:
    Tensor() : impl_(nullptr) {}
    explicit Tensor(TensorImplPtr impl) : impl_(std::move(impl)) {}

    static Tensor from(Shape shape, std::vector<Scalar> data, bool requires_grad = false) {
        if (shape_numel(shape) != data.size())
            throw BadShapeError("data length " + std::to_string(data.size()) +
                                " does not match shape " + shape_to_string(shape));
        auto impl = std::make_shared<TensorImpl>();
        impl->shape = std::move(shape);
        impl->data = std::move(data);
        impl->requires_grad = requires_grad;
        impl->seq = next_seq();
        return Tensor(std::move(impl));
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::size_t n = shape_numel(shape);
        return from(std::move(shape), std::vector<Scalar>(n, 0.0), requires_grad);
    }

    static Tensor full(Shape shape, Scalar value, bool requires_grad = false) {
        std::size_t n = shape_numel(shape);
        return from(std::move(shape), std::vector<Scalar>(n, value), requires_grad);
    }

    static Tensor scalar(Scalar value, bool requires_grad = false) {
        return from({}, {value}, requires_grad);
    }

    static Tensor randn(Shape shape, Rng& rng, Scalar stddev = 1.0, bool requires_grad = false) {
        std::size_t n = shape_numel(shape);
        return from(std::move(shape), draw_normal(rng, n, stddev), requires_grad);
    }

    // Identity matrix, used for projections that should start as a no-op.
    static Tensor eye(std::size_t n, bool requires_grad = false) {
        std::vector<Scalar> d(n * n, 0.0);
        for (std::size_t i = 0; i < n; ++i) d[i * n + i] = 1.0;
        return from({n, n}, std::move(d), requires_grad);
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
    std::size_t numel() const { return impl_->data.size(); }

    const std::vector<Scalar>& data() const { return impl_->data; }
    std::vector<Scalar>& mutable_data() { return impl_->data; }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool value) {
        if (value && impl_->backward_fn)
            throw Error("requires_grad can only be toggled on leaf tensors");
        impl_->requires_grad = value;
        if (!value) impl_->grad.clear();
    }

    bool has_grad() const { return impl_->grad.size() == impl_->data.size(); }
    const std::vector<Scalar>& grad() const {
        if (!has_grad()) throw Error("tensor has no gradient; run backward first");
        return impl_->grad;
    }
    void zero_grad() { impl_->grad.clear(); }

    Scalar item() const {
        if (numel() != 1) throw NotScalarError("item() on tensor of shape " + shape_to_string(shape()));
        return impl_->data[0];
    }

    Scalar at(std::size_t i) const { return impl_->data.at(i); }
    Scalar at(std::size_t i, std::size_t j) const {
        if (rank() != 2) throw BadShapeError("2-index access on rank-" + std::to_string(rank()) + " tensor");
        return impl_->data.at(i * dim(1) + j);
    }

    // Same data, detached from the graph. Shares no autograd state.
    Tensor detach() const {
        return Tensor::from(impl_->shape, impl_->data, false);
    }

    TensorImpl& impl() const { return *impl_; }
    const TensorImplPtr& ptr() const { return impl_; }

  private:
    TensorImplPtr impl_;
};

namespace detail {

inline Tensor make_op(Shape shape, std::vector<Scalar> data, std::vector<Tensor> inputs,
                      std::function<void(TensorImpl&)> backward_fn) {
    Tensor out = Tensor::from(std::move(shape), std::move(data), false);
    if (autograd::grad_enabled()) {
        bool any = false;
        for (const auto& t : inputs)
            if (t.requires_grad()) any = true;
        if (any) {
            auto& impl = out.impl();
            impl.requires_grad = true;
            impl.parents.reserve(inputs.size());
            for (auto& t : inputs) impl.parents.push_back(t.ptr());
            impl.backward_fn = std::move(backward_fn);
            autograd::activation_counter() += impl.numel();
        }
    }
    return out;
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimMismatchError(std::string(op) + ": " + shape_to_string(a.shape()) + " vs " +
                               shape_to_string(b.shape()));
}

// Rows/last-dim view of an arbitrary-rank tensor: [..., D] treated as R x D.
inline std::pair<std::size_t, std::size_t> rows_view(const Tensor& t, const char* op) {
    if (t.rank() == 0) throw BadShapeError(std::string(op) + ": scalar input");
    std::size_t d = t.shape().back();
    if (d == 0) throw BadShapeError(std::string(op) + ": zero-width last axis");
    return {t.numel() / d, d};
}

inline Scalar sigmoid(Scalar x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<Scalar> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return detail::make_op(a.shape(), std::move(out), {a, b}, [](TensorImpl& o) {
        for (int k = 0; k < 2; ++k) {
            TensorImpl& p = *o.parents[k];
            if (!p.requires_grad) continue;
            p.ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) p.grad[i] += o.grad[i];
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<Scalar> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    return detail::make_op(a.shape(), std::move(out), {a, b}, [](TensorImpl& o) {
        if (TensorImpl& p = *o.parents[0]; p.requires_grad) {
            p.ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) p.grad[i] += o.grad[i];
        }
        if (TensorImpl& p = *o.parents[1]; p.requires_grad) {
            p.ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) p.grad[i] -= o.grad[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<Scalar> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return detail::make_op(a.shape(), std::move(out), {a, b}, [](TensorImpl& o) {
        TensorImpl& pa = *o.parents[0];
        TensorImpl& pb = *o.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) pa.grad[i] += o.grad[i] * pb.data[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) pb.grad[i] += o.grad[i] * pa.data[i];
        }
    });
}

inline Tensor scale(const Tensor& a, Scalar c) {
    std::vector<Scalar> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
    return detail::make_op(a.shape(), std::move(out), {a}, [c](TensorImpl& o) {
        if (TensorImpl& p = *o.parents[0]; p.requires_grad) {
            p.ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) p.grad[i] += c * o.grad[i];
        }
    });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

// Scales x by a single-element tensor (trainable scalar coefficient).
inline Tensor scale_by(const Tensor& x, const Tensor& s) {
    if (s.numel() != 1) throw NotScalarError("scale_by coefficient has shape " + shape_to_string(s.shape()));
    Scalar c = s.data()[0];
    std::vector<Scalar> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * c;
    return detail::make_op(x.shape(), std::move(out), {x, s}, [](TensorImpl& o) {
        TensorImpl& px = *o.parents[0];
        TensorImpl& ps = *o.parents[1];
        Scalar c = ps.data[0];
        if (px.requires_grad) {
            px.ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) px.grad[i] += c * o.grad[i];
        }
        if (ps.requires_grad) {
            ps.ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) ps.grad[0] += o.grad[i] * px.data[i];
        }
    });
}

// Adds a length-D vector to every row of an [..., D] tensor.
inline Tensor add_rowvec(const Tensor& x, const Tensor& v) {
    auto [rows, d] = detail::rows_view(x, "add_rowvec");
    if (v.rank() != 1 || v.dim(0) != d)
        throw DimMismatchError("add_rowvec: vector " + shape_to_string(v.shape()) +
                               " vs rows of width " + std::to_string(d));
    std::vector<Scalar> out(x.numel());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = x.data()[r * d + j] + v.data()[j];
    return detail::make_op(x.shape(), std::move(out), {x, v}, [rows = rows, d = d](TensorImpl& o) {
        if (TensorImpl& px = *o.parents[0]; px.requires_grad) {
            px.ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) px.grad[i] += o.grad[i];
        }
        if (TensorImpl& pv = *o.parents[1]; pv.requires_grad) {
            pv.ensure_grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < d; ++j) pv.grad[j] += o.grad[r * d + j];
        }
    });
}

// ---------------------------------------------------------------------------
// Matrix products

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw BadShapeError("matmul expects rank-2 inputs");
    std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k)
        throw DimMismatchError("matmul: " + shape_to_string(a.shape()) + " x " +
                               shape_to_string(b.shape()));
    std::vector<Scalar> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            Scalar av = a.data()[i * k + p];
            if (av == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * b.data()[p * n + j];
        }
    return detail::make_op({m, n}, std::move(out), {a, b}, [m, k, n](TensorImpl& o) {
        TensorImpl& pa = *o.parents[0];
        TensorImpl& pb = *o.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    Scalar g = o.grad[i * n + j];
                    if (g == 0.0) continue;
                    for (std::size_t p = 0; p < k; ++p) pa.grad[i * k + p] += g * pb.data[p * n + j];
                }
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    Scalar av = pa.data[i * k + p];
                    if (av == 0.0) continue;
                    for (std::size_t j = 0; j < n; ++j) pb.grad[p * n + j] += av * o.grad[i * n + j];
                }
        }
    });
}

// a [m,k] times b^T where b is [n,k]; avoids materializing transposes.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw BadShapeError("matmul_nt expects rank-2 inputs");
    std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    if (b.dim(1) != k)
        throw DimMismatchError("matmul_nt: " + shape_to_string(a.shape()) + " x " +
                               shape_to_string(b.shape()) + "^T");
    std::vector<Scalar> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            Scalar s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += a.data()[i * k + p] * b.data()[j * k + p];
            out[i * n + j] = s;
        }
    return detail::make_op({m, n}, std::move(out), {a, b}, [m, k, n](TensorImpl& o) {
        TensorImpl& pa = *o.parents[0];
        TensorImpl& pb = *o.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    Scalar g = o.grad[i * n + j];
                    if (g == 0.0) continue;
                    for (std::size_t p = 0; p < k; ++p) pa.grad[i * k + p] += g * pb.data[j * k + p];
                }
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    Scalar g = o.grad[i * n + j];
                    if (g == 0.0) continue;
                    for (std::size_t p = 0; p < k; ++p) pb.grad[j * k + p] += g * pa.data[i * k + p];
                }
        }
    });
}

inline Tensor matvec(const Tensor& w, const Tensor& x) {
    if (w.rank() != 2 || x.rank() != 1)
        throw BadShapeError("matvec expects [m,n] and [n]");
    std::size_t m = w.dim(0), n = w.dim(1);
    if (x.dim(0) != n)
        throw DimMismatchError("matvec: " + shape_to_string(w.shape()) + " x " +
                               shape_to_string(x.shape()));
    std::vector<Scalar> out(m, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        Scalar s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += w.data()[i * n + j] * x.data()[j];
        out[i] = s;
    }
    return detail::make_op({m}, std::move(out), {w, x}, [m, n](TensorImpl& o) {
        TensorImpl& pw = *o.parents[0];
        TensorImpl& px = *o.parents[1];
        if (pw.requires_grad) {
            pw.ensure_grad();
            for (std::size_t i = 0; i < m; ++i) {
                Scalar g = o.grad[i];
                if (g == 0.0) continue;
                for (std::size_t j = 0; j < n; ++j) pw.grad[i * n + j] += g * px.data[j];
            }
        }
        if (px.requires_grad) {
            px.ensure_grad();
            for (std::size_t i = 0; i < m; ++i) {
                Scalar g = o.grad[i];
                if (g == 0.0) continue;
                for (std::size_t j = 0; j < n; ++j) px.grad[j] += g * pw.data[i * n + j];
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Shape surgery

// Concatenates parts along axis 0. Rank-1 parts count as single rows.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw EmptySequenceError("concat_rows of zero parts");
    std::size_t d = parts[0].shape().back();
    std::size_t rows = 0;
    for (const auto& p : parts) {
        if (p.rank() == 1) {
            if (p.dim(0) != d) throw DimMismatchError("concat_rows: width mismatch");
            rows += 1;
        } else if (p.rank() == 2) {
            if (p.dim(1) != d) throw DimMismatchError("concat_rows: width mismatch");
            rows += p.dim(0);
        } else {
            throw BadShapeError("concat_rows expects rank-1 or rank-2 parts");
        }
    }
    std::vector<Scalar> out;
    out.reserve(rows * d);
    for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    return detail::make_op({rows, d}, std::move(out), parts, [](TensorImpl& o) {
        std::size_t offset = 0;
        for (auto& pp : o.parents) {
            TensorImpl& p = *pp;
            if (p.requires_grad) {
                p.ensure_grad();
                for (std::size_t i = 0; i < p.data.size(); ++i) p.grad[i] += o.grad[offset + i];
            }
            offset += p.data.size();
        }
    });
}

inline Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t len) {
    if (x.rank() != 2) throw BadShapeError("slice_rows expects rank-2 input");
    std::size_t r = x.dim(0), d = x.dim(1);
    if (start + len > r) throw BadShapeError("slice_rows out of range");
    std::vector<Scalar> out(x.data().begin() + start * d, x.data().begin() + (start + len) * d);
    return detail::make_op({len, d}, std::move(out), {x}, [start, len, d](TensorImpl& o) {
        if (TensorImpl& p = *o.parents[0]; p.requires_grad) {
            p.ensure_grad();
            for (std::size_t i = 0; i < len * d; ++i) p.grad[start * d + i] += o.grad[i];
        }
    });
}

// Row i of a matrix as a rank-1 vector.
inline Tensor row(const Tensor& x, std::size_t i) {
    if (x.rank() != 2) throw BadShapeError("row expects rank-2 input");
    std::size_t d = x.dim(1);
    if (i >= x.dim(0)) throw BadShapeError("row index out of range");
    std::vector<Scalar> out(x.data().begin() + i * d, x.data().begin() + (i + 1) * d);
    return detail::make_op({d}, std::move(out), {x}, [i, d](TensorImpl& o) {
        if (TensorImpl& p = *o.parents[0]; p.requires_grad) {
            p.ensure_grad();
            for (std::size_t j = 0; j < d; ++j) p.grad[i * d + j] += o.grad[j];
        }
    });
}

inline Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t len) {
    if (x.rank() != 2) throw BadShapeError("slice_cols expects rank-2 input");
    std::size_t r = x.dim(0), d = x.dim(1);
    if (start + len > d) throw BadShapeError("slice_cols out of range");
    std::vector<Scalar> out(r * len);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < len; ++j) out[i * len + j] = x.data()[i * d + start + j];
    return detail::make_op({r, len}, std::move(out), {x}, [r, d, start, len](TensorImpl& o) {
        if (TensorImpl& p = *o.parents[0]; p.requires_grad) {
            p.ensure_grad();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < len; ++j) p.grad[i * d + start + j] += o.grad[i * len + j];
        }
    });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw EmptySequenceError("concat_cols of zero parts");
    std::size_t r = parts[0].dim(0);
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(0) != r) throw DimMismatchError("concat_cols: row mismatch");
        total += p.dim(1);
    }
    std::vector<Scalar> out(r * total);
    std::size_t col = 0;
    for (const auto& p : parts) {
        std::size_t w = p.dim(1);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < w; ++j) out[i * total + col + j] = p.data()[i * w + j];
        col += w;
    }
    return detail::make_op({r, total}, std::move(out), parts, [r, total](TensorImpl& o) {
        std::size_t col = 0;
        for (auto& pp : o.parents) {
            TensorImpl& p = *pp;
            std::size_t w = p.shape[1];
            if (p.requires_grad) {
                p.ensure_grad();
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < w; ++j) p.grad[i * w + j] += o.grad[i * total + col + j];
            }
            col += w;
        }
    });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw BadShapeError("reshape " + shape_to_string(x.shape()) + " -> " + shape_to_string(shape));
    return detail::make_op(std::move(shape), x.data(), {x}, [](TensorImpl& o) {
        if (TensorImpl& p = *o.parents[0]; p.requires_grad) {
            p.ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) p.grad[i] += o.grad[i];
        }
    });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
    Scalar s = 0.0;
    for (Scalar v : x.data()) s += v;
    return detail::make_op({}, {s}, {x}, [](TensorImpl& o) {
        if (TensorImpl& p = *o.parents[0]; p.requires_grad) {
            p.ensure_grad();
            for (auto& g : p.grad) g += o.grad[0];
        }
    });
}

inline Tensor dot(const Tensor& a, const Tensor& b) {
    if (a.rank() != 1 || b.rank() != 1 || a.dim(0) != b.dim(0))
        throw DimMismatchError("dot: " + shape_to_string(a.shape()) + " . " + shape_to_string(b.shape()));
    Scalar s = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) s += a.data()[i] * b.data()[i];
    return detail::make_op({}, {s}, {a, b}, [](TensorImpl& o) {
        TensorImpl& pa = *o.parents[0];
        TensorImpl& pb = *o.parents[1];
        Scalar g = o.grad[0];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < pa.data.size(); ++i) pa.grad[i] += g * pb.data[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < pb.data.size(); ++i) pb.grad[i] += g * pa.data[i];
        }
    });
}

// Arithmetic mean over axis 0 of an [N, D] matrix.
inline Tensor mean_pool(const Tensor& x) {
    if (x.rank() != 2) throw BadShapeError("mean_pool expects [N, D]");
    std::size_t n = x.dim(0), d = x.dim(1);
    if (n == 0) throw EmptySequenceError("mean_pool over zero rows");
    std::vector<Scalar> out(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) out[j] += x.data()[i * d + j];
    for (auto& v : out) v /= static_cast<Scalar>(n);
    return detail::make_op({d}, std::move(out), {x}, [n, d](TensorImpl& o) {
        if (TensorImpl& p = *o.parents[0]; p.requires_grad) {
            p.ensure_grad();
            Scalar inv = 1.0 / static_cast<Scalar>(n);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < d; ++j) p.grad[i * d + j] += o.grad[j] * inv;
        }
    });
}

// ---------------------------------------------------------------------------
// Nonlinear primitives

inline constexpr Scalar kL2NormEpsilon = 1e-12;

inline Tensor l2_normalize(const Tensor& x) {
    auto [rows, d] = detail::rows_view(x, "l2_normalize");
    std::vector<Scalar> out(x.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        Scalar norm2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            Scalar v = x.data()[r * d + j];
            norm2 += v * v;
        }
        Scalar norm = std::sqrt(norm2);
        if (norm <= kL2NormEpsilon)
            throw ZeroNormError("l2_normalize: slice " + std::to_string(r) + " has norm " +
                                std::to_string(norm));
        Scalar inv = 1.0 / norm;
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = x.data()[r * d + j] * inv;
    }
    return detail::make_op(x.shape(), std::move(out), {x}, [rows = rows, d = d](TensorImpl& o) {
        if (TensorImpl& p = *o.parents[0]; p.requires_grad) {
            p.ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                Scalar norm2 = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    Scalar v = p.data[r * d + j];
                    norm2 += v * v;
                }
                Scalar inv = 1.0 / std::sqrt(norm2);
                Scalar gy = 0.0;  // <grad, y> for this row
                for (std::size_t j = 0; j < d; ++j) gy += o.grad[r * d + j] * o.data[r * d + j];
                for (std::size_t j = 0; j < d; ++j)
                    p.grad[r * d + j] += (o.grad[r * d + j] - o.data[r * d + j] * gy) * inv;
            }
        }
    });
}

inline constexpr Scalar kLayerNormEpsilon = 1e-5;

inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
    auto [rows, d] = detail::rows_view(x, "layer_norm");
    if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 || bias.dim(0) != d)
        throw DimMismatchError("layer_norm: gain/bias must be length " + std::to_string(d));
    std::vector<Scalar> out(x.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        Scalar mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += x.data()[r * d + j];
        mean /= static_cast<Scalar>(d);
        Scalar var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            Scalar c = x.data()[r * d + j] - mean;
            var += c * c;
        }
        var /= static_cast<Scalar>(d);
        Scalar inv = 1.0 / std::sqrt(var + kLayerNormEpsilon);
        for (std::size_t j = 0; j < d; ++j) {
            Scalar xhat = (x.data()[r * d + j] - mean) * inv;
            out[r * d + j] = gain.data()[j] * xhat + bias.data()[j];
        }
    }
    return detail::make_op(x.shape(), std::move(out), {x, gain, bias},
                           [rows = rows, d = d](TensorImpl& o) {
        TensorImpl& px = *o.parents[0];
        TensorImpl& pg = *o.parents[1];
        TensorImpl& pb = *o.parents[2];
        if (px.requires_grad) px.ensure_grad();
        if (pg.requires_grad) pg.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        std::vector<Scalar> xhat(d), dxhat(d);
        for (std::size_t r = 0; r < rows; ++r) {
            Scalar mean = 0.0;
            for (std::size_t j = 0; j < d; ++j) mean += px.data[r * d + j];
            mean /= static_cast<Scalar>(d);
            Scalar var = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                Scalar c = px.data[r * d + j] - mean;
                var += c * c;
            }
            var /= static_cast<Scalar>(d);
            Scalar inv = 1.0 / std::sqrt(var + kLayerNormEpsilon);
            for (std::size_t j = 0; j < d; ++j) xhat[j] = (px.data[r * d + j] - mean) * inv;
            if (pg.requires_grad || pb.requires_grad) {
                for (std::size_t j = 0; j < d; ++j) {
                    Scalar g = o.grad[r * d + j];
                    if (pg.requires_grad) pg.grad[j] += g * xhat[j];
                    if (pb.requires_grad) pb.grad[j] += g;
                }
            }
            if (px.requires_grad) {
                Scalar sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    dxhat[j] = o.grad[r * d + j] * pg.data[j];
                    sum_dxhat += dxhat[j];
                    sum_dxhat_xhat += dxhat[j] * xhat[j];
                }
                Scalar invd = 1.0 / static_cast<Scalar>(d);
                for (std::size_t j = 0; j < d; ++j)
                    px.grad[r * d + j] +=
                        inv * (dxhat[j] - sum_dxhat * invd - xhat[j] * sum_dxhat_xhat * invd);
            }
        }
    });
}

inline constexpr Scalar kQuickGeluSlope = 1.702;

inline Tensor quick_gelu(const Tensor& x) {
    std::vector<Scalar> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        Scalar v = x.data()[i];
        out[i] = v * detail::sigmoid(kQuickGeluSlope * v);
    }
    return detail::make_op(x.shape(), std::move(out), {x}, [](TensorImpl& o) {
        if (TensorImpl& p = *o.parents[0]; p.requires_grad) {
            p.ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) {
                Scalar v = p.data[i];
                Scalar s = detail::sigmoid(kQuickGeluSlope * v);
                p.grad[i] += o.grad[i] * (s + kQuickGeluSlope * v * s * (1.0 - s));
            }
        }
    });
}

inline Tensor softmax_rows(const Tensor& x) {
    auto [rows, d] = detail::rows_view(x, "softmax_rows");
    std::vector<Scalar> out(x.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        Scalar m = x.data()[r * d];
        for (std::size_t j = 1; j < d; ++j) m = std::max(m, x.data()[r * d + j]);
        Scalar z = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            out[r * d + j] = std::exp(x.data()[r * d + j] - m);
            z += out[r * d + j];
        }
        Scalar inv = 1.0 / z;
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] *= inv;
    }
    return detail::make_op(x.shape(), std::move(out), {x}, [rows = rows, d = d](TensorImpl& o) {
        if (TensorImpl& p = *o.parents[0]; p.requires_grad) {
            p.ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                Scalar gy = 0.0;
                for (std::size_t j = 0; j < d; ++j) gy += o.grad[r * d + j] * o.data[r * d + j];
                for (std::size_t j = 0; j < d; ++j)
                    p.grad[r * d + j] += o.data[r * d + j] * (o.grad[r * d + j] - gy);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Classification heads

inline constexpr Scalar kRowNormTolerance = 1e-4;

namespace detail {
inline void check_unit_rows(const Tensor& t, const char* which) {
    auto [rows, d] = rows_view(t, "cosine_logits");
    for (std::size_t r = 0; r < rows; ++r) {
        Scalar norm2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            Scalar v = t.data()[r * d + j];
            norm2 += v * v;
        }
        if (std::abs(std::sqrt(norm2) - 1.0) > kRowNormTolerance)
            throw NotNormalizedError(std::string(which) + " row " + std::to_string(r) +
                                     " has norm " + std::to_string(std::sqrt(norm2)));
    }
}
}  // namespace detail

// logits[b][c] = <q_b, k_c> / temperature; both operand matrices must carry
// unit-norm rows (tolerance 1e-4).
inline Tensor cosine_logits(const Tensor& queries, const Tensor& classifier, Scalar temperature) {
    if (temperature <= 0.0) throw Error("cosine_logits: temperature must be positive");
    if (queries.rank() != 2 || classifier.rank() != 2 || queries.dim(1) != classifier.dim(1))
        throw DimMismatchError("cosine_logits: " + shape_to_string(queries.shape()) + " vs " +
                               shape_to_string(classifier.shape()));
    detail::check_unit_rows(queries, "queries");
    detail::check_unit_rows(classifier, "classifier");
    return scale(matmul_nt(queries, classifier), 1.0 / temperature);
}

// Mean over the batch of -log softmax(logits)[label].
inline Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels) {
    if (logits.rank() != 2) throw BadShapeError("cross_entropy expects [B, C] logits");
    std::size_t b = logits.dim(0), c = logits.dim(1);
    if (labels.size() != b)
        throw DimMismatchError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
                               std::to_string(b));
    if (b == 0) throw EmptySequenceError("cross_entropy on empty batch");
    for (std::size_t label : labels)
        if (label >= c)
            throw BadLabelError("label " + std::to_string(label) + " out of range [0, " +
                                std::to_string(c) + ")");
    Scalar loss = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        Scalar m = logits.data()[i * c];
        for (std::size_t j = 1; j < c; ++j) m = std::max(m, logits.data()[i * c + j]);
        Scalar z = 0.0;
        for (std::size_t j = 0; j < c; ++j) z += std::exp(logits.data()[i * c + j] - m);
        loss += m + std::log(z) - logits.data()[i * c + labels[i]];
    }
    loss /= static_cast<Scalar>(b);
    return detail::make_op({}, {loss}, {logits}, [b, c, labels](TensorImpl& o) {
        if (TensorImpl& p = *o.parents[0]; p.requires_grad) {
            p.ensure_grad();
            Scalar g = o.grad[0] / static_cast<Scalar>(b);
            for (std::size_t i = 0; i < b; ++i) {
                Scalar m = p.data[i * c];
                for (std::size_t j = 1; j < c; ++j) m = std::max(m, p.data[i * c + j]);
                Scalar z = 0.0;
                for (std::size_t j = 0; j < c; ++j) z += std::exp(p.data[i * c + j] - m);
                for (std::size_t j = 0; j < c; ++j) {
                    Scalar softmax = std::exp(p.data[i * c + j] - m) / z;
                    p.grad[i * c + j] += g * (softmax - (j == labels[i] ? 1.0 : 0.0));
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Reverse pass

// Recorded operations reachable from one root, in forward (insertion) order.
class Graph {
  public:
    static Graph trace(const Tensor& root) {
        Graph g;
        if (!root.defined()) return g;
        std::unordered_set<const TensorImpl*> seen;
        std::vector<TensorImplPtr> stack{root.ptr()};
        seen.insert(root.ptr().get());
        while (!stack.empty()) {
            TensorImplPtr node = std::move(stack.back());
            stack.pop_back();
            g.nodes_.push_back(node);
            for (const auto& parent : node->parents)
                if (seen.insert(parent.get()).second) stack.push_back(parent);
        }
        std::sort(g.nodes_.begin(), g.nodes_.end(),
                  [](const TensorImplPtr& a, const TensorImplPtr& b) { return a->seq < b->seq; });
        return g;
    }

    std::size_t size() const { return nodes_.size(); }
    const std::vector<TensorImplPtr>& nodes() const { return nodes_; }

    // Seeds d(root)/d(root) = 1 and propagates in reverse insertion order;
    // every node runs exactly once, every reachable requires_grad tensor ends
    // up with a gradient (possibly zero).
    void backward() {
        if (nodes_.empty()) throw Error("backward on empty graph");
        TensorImpl& root = *nodes_.back();
        if (root.numel() != 1)
            throw NotScalarError("backward root has shape " + shape_to_string(root.shape));
        if (!root.requires_grad)
            throw Error("backward on a tensor that does not require grad");
        for (auto& node : nodes_)
            if (node->requires_grad) node->ensure_grad();
        root.grad[0] += 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it)
            if ((*it)->backward_fn) (*it)->backward_fn(**it);
    }

  private:
    std::vector<TensorImplPtr> nodes_;
};

inline void backward(const Tensor& loss) { Graph::trace(loss).backward(); }

}  // namespace xmic
