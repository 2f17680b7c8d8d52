#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "codl/tensor.hpp"

namespace codl {

// Reverse-mode tape over Tensor. Graphs are rebuilt every step
// (define-by-run); parameters are long-lived leaf nodes.

using EMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

struct VarNode;
using NodePtr = std::shared_ptr<VarNode>;

struct VarNode {
    Tensor val;
    Tensor grad;
    bool requires_grad = false;
    bool grad_ready = false;
    std::vector<NodePtr> parents;
    std::function<void(VarNode&)> backward_fn;

    Tensor& ensure_grad() {
        if (!grad_ready) {
            grad = Tensor(val.shape());
            grad_ready = true;
        }
        return grad;
    }
};

class Var {
public:
    Var() = default;
    explicit Var(NodePtr n) : n_(std::move(n)) {}

    static Var leaf(Tensor t, bool requires_grad = false) {
        auto n = std::make_shared<VarNode>();
        n->val = std::move(t);
        n->requires_grad = requires_grad;
        return Var(n);
    }

    bool defined() const { return n_ != nullptr; }
    const Tensor& val() const { return n_->val; }
    Tensor& val_mut() { return n_->val; }
    const Tensor& grad() const { return n_->grad; }
    bool has_grad() const { return n_->grad_ready; }
    bool requires_grad() const { return n_->requires_grad; }
    void set_requires_grad(bool r) { n_->requires_grad = r; }
    const std::vector<int>& shape() const { return n_->val.shape(); }
    int dim(int i) const { return n_->val.dim(i); }
    int64_t numel() const { return n_->val.numel(); }

    void zero_grad() {
        if (n_->grad_ready) std::fill(n_->grad.vec().begin(), n_->grad.vec().end(), 0.0);
    }

    NodePtr node() const { return n_; }

private:
    NodePtr n_;
};

namespace detail {

inline NodePtr make_op(Tensor val, std::vector<NodePtr> parents,
                       std::function<void(VarNode&)> backward) {
    auto n = std::make_shared<VarNode>();
    n->val = std::move(val);
    n->parents = std::move(parents);
    for (const auto& p : n->parents)
        if (p->requires_grad) n->requires_grad = true;
    if (n->requires_grad) n->backward_fn = std::move(backward);
    return n;
}

inline void topo_sort(const NodePtr& root, std::vector<VarNode*>& order) {
    std::unordered_set<VarNode*> seen;
    std::vector<std::pair<VarNode*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            VarNode* p = node->parents[idx].get();
            ++idx;
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
}

}  // namespace detail

// Backpropagate from a scalar loss. Grads accumulate; callers zero params
// between steps.
inline void backward(const Var& loss) {
    CODL_CHECK(loss.numel() == 1, ShapeError, "backward: loss must be scalar");
    if (!loss.requires_grad()) return;
    std::vector<VarNode*> order;
    detail::topo_sort(loss.node(), order);
    loss.node()->ensure_grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        VarNode* n = *it;
        if (n->backward_fn && n->grad_ready) n->backward_fn(*n);
    }
}

// ---- elementwise ----

inline Var add(const Var& a, const Var& b) {
    CODL_CHECK(a.val().same_shape(b.val()), ShapeError, "add: shape mismatch");
    Tensor out(a.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.val()[i] + b.val()[i];
    auto pa = a.node(), pb = b.node();
    return Var(detail::make_op(std::move(out), {pa, pb}, [pa, pb](VarNode& n) {
        if (pa->requires_grad) {
            Tensor& g = pa->ensure_grad();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
        }
        if (pb->requires_grad) {
            Tensor& g = pb->ensure_grad();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
        }
    }));
}

inline Var sub(const Var& a, const Var& b) {
    CODL_CHECK(a.val().same_shape(b.val()), ShapeError, "sub: shape mismatch");
    Tensor out(a.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.val()[i] - b.val()[i];
    auto pa = a.node(), pb = b.node();
    return Var(detail::make_op(std::move(out), {pa, pb}, [pa, pb](VarNode& n) {
        if (pa->requires_grad) {
            Tensor& g = pa->ensure_grad();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
        }
        if (pb->requires_grad) {
            Tensor& g = pb->ensure_grad();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] -= n.grad[i];
        }
    }));
}

inline Var mul(const Var& a, const Var& b) {
    CODL_CHECK(a.val().same_shape(b.val()), ShapeError, "mul: shape mismatch");
    Tensor out(a.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.val()[i] * b.val()[i];
    auto pa = a.node(), pb = b.node();
    return Var(detail::make_op(std::move(out), {pa, pb}, [pa, pb](VarNode& n) {
        if (pa->requires_grad) {
            Tensor& g = pa->ensure_grad();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * pb->val[i];
        }
        if (pb->requires_grad) {
            Tensor& g = pb->ensure_grad();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * pa->val[i];
        }
    }));
}

inline Var mul_scalar(const Var& a, Scalar s) {
    Tensor out(a.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.val()[i] * s;
    auto pa = a.node();
    return Var(detail::make_op(std::move(out), {pa}, [pa, s](VarNode& n) {
        Tensor& g = pa->ensure_grad();
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * s;
    }));
}

inline Var add_scalar(const Var& a, Scalar s) {
    Tensor out(a.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.val()[i] + s;
    auto pa = a.node();
    return Var(detail::make_op(std::move(out), {pa}, [pa](VarNode& n) {
        Tensor& g = pa->ensure_grad();
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    }));
}

inline Var neg(const Var& a) { return mul_scalar(a, -1.0); }

inline Var abs_op(const Var& a) {
    Tensor out(a.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::abs(a.val()[i]);
    auto pa = a.node();
    return Var(detail::make_op(std::move(out), {pa}, [pa](VarNode& n) {
        Tensor& g = pa->ensure_grad();
        for (int64_t i = 0; i < g.numel(); ++i) {
            Scalar x = pa->val[i];
            g[i] += n.grad[i] * (x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0));
        }
    }));
}

inline Var square(const Var& a) { return mul(a, a); }

inline Var silu(const Var& a) {
    Tensor out(a.shape());
    for (int64_t i = 0; i < out.numel(); ++i) {
        Scalar x = a.val()[i];
        out[i] = x / (1.0 + std::exp(-x));
    }
    auto pa = a.node();
    return Var(detail::make_op(std::move(out), {pa}, [pa](VarNode& n) {
        Tensor& g = pa->ensure_grad();
        for (int64_t i = 0; i < g.numel(); ++i) {
            Scalar x = pa->val[i];
            Scalar s = 1.0 / (1.0 + std::exp(-x));
            g[i] += n.grad[i] * s * (1.0 + x * (1.0 - s));
        }
    }));
}

inline Var relu(const Var& a) {
    Tensor out(a.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::max(0.0, a.val()[i]);
    auto pa = a.node();
    return Var(detail::make_op(std::move(out), {pa}, [pa](VarNode& n) {
        Tensor& g = pa->ensure_grad();
        for (int64_t i = 0; i < g.numel(); ++i)
            if (pa->val[i] > 0.0) g[i] += n.grad[i];
    }));
}

inline Var sigmoid(const Var& a) {
    Tensor out(a.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = 1.0 / (1.0 + std::exp(-a.val()[i]));
    auto pa = a.node();
    auto pn = detail::make_op(std::move(out), {pa}, nullptr);
    VarNode* self = pn.get();
    if (pn->requires_grad)
        pn->backward_fn = [pa, self](VarNode& n) {
            Tensor& g = pa->ensure_grad();
            for (int64_t i = 0; i < g.numel(); ++i) {
                Scalar y = self->val[i];
                g[i] += n.grad[i] * y * (1.0 - y);
            }
        };
    return Var(pn);
}

inline Var stop_grad(const Var& a) { return Var::leaf(a.val(), false); }

inline Var constant(Tensor t) { return Var::leaf(std::move(t), false); }

// ---- shape ----

inline Var reshape(const Var& a, std::vector<int> shape) {
    Tensor out = a.val().reshaped(shape);
    auto pa = a.node();
    return Var(detail::make_op(std::move(out), {pa}, [pa](VarNode& n) {
        Tensor& g = pa->ensure_grad();
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    }));
}

inline Var permute4(const Var& a, std::array<int, 4> perm) {
    CODL_CHECK(a.val().ndim() == 4, ShapeError, "permute4 expects rank 4");
    const auto& s = a.shape();
    std::vector<int> os = {s[perm[0]], s[perm[1]], s[perm[2]], s[perm[3]]};
    Tensor out(os);
    int64_t in_stride[4];
    in_stride[3] = 1;
    in_stride[2] = s[3];
    in_stride[1] = static_cast<int64_t>(s[2]) * s[3];
    in_stride[0] = in_stride[1] * s[1];
    int64_t ps[4] = {in_stride[perm[0]], in_stride[perm[1]], in_stride[perm[2]],
                     in_stride[perm[3]]};
    int64_t idx = 0;
    for (int i0 = 0; i0 < os[0]; ++i0)
        for (int i1 = 0; i1 < os[1]; ++i1)
            for (int i2 = 0; i2 < os[2]; ++i2)
                for (int i3 = 0; i3 < os[3]; ++i3)
                    out[idx++] = a.val()[i0 * ps[0] + i1 * ps[1] + i2 * ps[2] + i3 * ps[3]];
    auto pa = a.node();
    auto os_cap = os;
    return Var(detail::make_op(std::move(out), {pa}, [pa, ps = std::array<int64_t, 4>{ps[0], ps[1], ps[2], ps[3]}, os_cap](VarNode& n) {
        Tensor& g = pa->ensure_grad();
        int64_t idx = 0;
        for (int i0 = 0; i0 < os_cap[0]; ++i0)
            for (int i1 = 0; i1 < os_cap[1]; ++i1)
                for (int i2 = 0; i2 < os_cap[2]; ++i2)
                    for (int i3 = 0; i3 < os_cap[3]; ++i3)
                        g[i0 * ps[0] + i1 * ps[1] + i2 * ps[2] + i3 * ps[3]] += n.grad[idx++];
    }));
}

inline Var concat_lastdim(const Var& a, const Var& b) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    CODL_CHECK(sa.size() == sb.size(), ShapeError, "concat: rank mismatch");
    for (size_t i = 0; i + 1 < sa.size(); ++i)
        CODL_CHECK(sa[i] == sb[i], ShapeError, "concat: leading dims mismatch");
    int ca = sa.back(), cb = sb.back();
    int64_t rows = a.numel() / ca;
    std::vector<int> os = sa;
    os.back() = ca + cb;
    Tensor out(os);
    for (int64_t r = 0; r < rows; ++r) {
        for (int j = 0; j < ca; ++j) out[r * (ca + cb) + j] = a.val()[r * ca + j];
        for (int j = 0; j < cb; ++j) out[r * (ca + cb) + ca + j] = b.val()[r * cb + j];
    }
    auto pa = a.node(), pb = b.node();
    return Var(detail::make_op(std::move(out), {pa, pb}, [pa, pb, ca, cb, rows](VarNode& n) {
        if (pa->requires_grad) {
            Tensor& g = pa->ensure_grad();
            for (int64_t r = 0; r < rows; ++r)
                for (int j = 0; j < ca; ++j) g[r * ca + j] += n.grad[r * (ca + cb) + j];
        }
        if (pb->requires_grad) {
            Tensor& g = pb->ensure_grad();
            for (int64_t r = 0; r < rows; ++r)
                for (int j = 0; j < cb; ++j) g[r * cb + j] += n.grad[r * (ca + cb) + ca + j];
        }
    }));
}

inline Var slice_lastdim(const Var& a, int start, int len) {
    const auto& s = a.shape();
    int c = s.back();
    CODL_CHECK(start >= 0 && start + len <= c, ShapeError, "slice: out of range");
    int64_t rows = a.numel() / c;
    std::vector<int> os = s;
    os.back() = len;
    Tensor out(os);
    for (int64_t r = 0; r < rows; ++r)
        for (int j = 0; j < len; ++j) out[r * len + j] = a.val()[r * c + start + j];
    auto pa = a.node();
    return Var(detail::make_op(std::move(out), {pa}, [pa, start, len, c, rows](VarNode& n) {
        Tensor& g = pa->ensure_grad();
        for (int64_t r = 0; r < rows; ++r)
            for (int j = 0; j < len; ++j) g[r * c + start + j] += n.grad[r * len + j];
    }));
}

// ---- matmul family ----

inline Var matmul(const Var& a, const Var& b) {
    CODL_CHECK(a.val().ndim() == 2 && b.val().ndim() == 2 && a.dim(1) == b.dim(0), ShapeError,
               "matmul: incompatible shapes " + a.val().shape_str() + " x " + b.val().shape_str());
    int m = a.dim(0), k = a.dim(1), n2 = b.dim(1);
    Tensor out({m, n2});
    ECMap A(a.val().data(), m, k), B(b.val().data(), k, n2);
    EMap O(out.data(), m, n2);
    O.noalias() = A * B;
    auto pa = a.node(), pb = b.node();
    return Var(detail::make_op(std::move(out), {pa, pb}, [pa, pb, m, k, n2](VarNode& n) {
        ECMap G(n.grad.data(), m, n2);
        if (pa->requires_grad) {
            EMap GA(pa->ensure_grad().data(), m, k);
            ECMap B(pb->val.data(), k, n2);
            GA.noalias() += G * B.transpose();
        }
        if (pb->requires_grad) {
            EMap GB(pb->ensure_grad().data(), k, n2);
            ECMap A(pa->val.data(), m, k);
            GB.noalias() += A.transpose() * G;
        }
    }));
}

// Batched a[G,m,k] x b[G,k,n] -> [G,m,n].
inline Var bmm(const Var& a, const Var& b) {
    CODL_CHECK(a.val().ndim() == 3 && b.val().ndim() == 3 && a.dim(0) == b.dim(0) &&
                   a.dim(2) == b.dim(1),
               ShapeError, "bmm: incompatible shapes");
    int G = a.dim(0), m = a.dim(1), k = a.dim(2), n2 = b.dim(2);
    Tensor out({G, m, n2});
    for (int g = 0; g < G; ++g) {
        ECMap A(a.val().data() + static_cast<int64_t>(g) * m * k, m, k);
        ECMap B(b.val().data() + static_cast<int64_t>(g) * k * n2, k, n2);
        EMap O(out.data() + static_cast<int64_t>(g) * m * n2, m, n2);
        O.noalias() = A * B;
    }
    auto pa = a.node(), pb = b.node();
    return Var(detail::make_op(std::move(out), {pa, pb}, [pa, pb, G, m, k, n2](VarNode& n) {
        for (int g = 0; g < G; ++g) {
            ECMap Gr(n.grad.data() + static_cast<int64_t>(g) * m * n2, m, n2);
            if (pa->requires_grad) {
                EMap GA(pa->ensure_grad().data() + static_cast<int64_t>(g) * m * k, m, k);
                ECMap B(pb->val.data() + static_cast<int64_t>(g) * k * n2, k, n2);
                GA.noalias() += Gr * B.transpose();
            }
            if (pb->requires_grad) {
                EMap GB(pb->ensure_grad().data() + static_cast<int64_t>(g) * k * n2, k, n2);
                ECMap A(pa->val.data() + static_cast<int64_t>(g) * m * k, m, k);
                GB.noalias() += A.transpose() * Gr;
            }
        }
    }));
}

// Batched a[G,m,k] x b[G,n,k]^T -> [G,m,n]. Used for query-key logits.
inline Var bmm_nt(const Var& a, const Var& b) {
    CODL_CHECK(a.val().ndim() == 3 && b.val().ndim() == 3 && a.dim(0) == b.dim(0) &&
                   a.dim(2) == b.dim(2),
               ShapeError, "bmm_nt: incompatible shapes");
    int G = a.dim(0), m = a.dim(1), k = a.dim(2), n2 = b.dim(1);
    Tensor out({G, m, n2});
    for (int g = 0; g < G; ++g) {
        ECMap A(a.val().data() + static_cast<int64_t>(g) * m * k, m, k);
        ECMap B(b.val().data() + static_cast<int64_t>(g) * n2 * k, n2, k);
        EMap O(out.data() + static_cast<int64_t>(g) * m * n2, m, n2);
        O.noalias() = A * B.transpose();
    }
    auto pa = a.node(), pb = b.node();
    return Var(detail::make_op(std::move(out), {pa, pb}, [pa, pb, G, m, k, n2](VarNode& n) {
        for (int g = 0; g < G; ++g) {
            ECMap Gr(n.grad.data() + static_cast<int64_t>(g) * m * n2, m, n2);
            if (pa->requires_grad) {
                EMap GA(pa->ensure_grad().data() + static_cast<int64_t>(g) * m * k, m, k);
                ECMap B(pb->val.data() + static_cast<int64_t>(g) * n2 * k, n2, k);
                GA.noalias() += Gr * B;
            }
            if (pb->requires_grad) {
                EMap GB(pb->ensure_grad().data() + static_cast<int64_t>(g) * n2 * k, n2, k);
                ECMap A(pa->val.data() + static_cast<int64_t>(g) * m * k, m, k);
                GB.noalias() += Gr.transpose() * A;
            }
        }
    }));
}

// ---- broadcast helpers ----

// a[..., C] + v[C]
inline Var add_rowvec(const Var& a, const Var& v) {
    int c = a.shape().back();
    CODL_CHECK(v.val().ndim() == 1 && v.dim(0) == c, ShapeError, "add_rowvec: dim mismatch");
    int64_t rows = a.numel() / c;
    Tensor out(a.shape());
    for (int64_t r = 0; r < rows; ++r)
        for (int j = 0; j < c; ++j) out[r * c + j] = a.val()[r * c + j] + v.val()[j];
    auto pa = a.node(), pv = v.node();
    return Var(detail::make_op(std::move(out), {pa, pv}, [pa, pv, rows, c](VarNode& n) {
        if (pa->requires_grad) {
            Tensor& g = pa->ensure_grad();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
        }
        if (pv->requires_grad) {
            Tensor& g = pv->ensure_grad();
            for (int64_t r = 0; r < rows; ++r)
                for (int j = 0; j < c; ++j) g[j] += n.grad[r * c + j];
        }
    }));
}

// a[..., C] * v[C]
inline Var mul_rowvec(const Var& a, const Var& v) {
    int c = a.shape().back();
    CODL_CHECK(v.val().ndim() == 1 && v.dim(0) == c, ShapeError, "mul_rowvec: dim mismatch");
    int64_t rows = a.numel() / c;
    Tensor out(a.shape());
    for (int64_t r = 0; r < rows; ++r)
        for (int j = 0; j < c; ++j) out[r * c + j] = a.val()[r * c + j] * v.val()[j];
    auto pa = a.node(), pv = v.node();
    return Var(detail::make_op(std::move(out), {pa, pv}, [pa, pv, rows, c](VarNode& n) {
        if (pa->requires_grad) {
            Tensor& g = pa->ensure_grad();
            for (int64_t r = 0; r < rows; ++r)
                for (int j = 0; j < c; ++j) g[r * c + j] += n.grad[r * c + j] * pv->val[j];
        }
        if (pv->requires_grad) {
            Tensor& g = pv->ensure_grad();
            for (int64_t r = 0; r < rows; ++r)
                for (int j = 0; j < c; ++j) g[j] += n.grad[r * c + j] * pa->val[r * c + j];
        }
    }));
}

// x[B,T,C] * g[B,C] broadcast over T (channel gating / AdaLN scale).
inline Var mul_bcast_tokens(const Var& x, const Var& gate) {
    CODL_CHECK(x.val().ndim() == 3 && gate.val().ndim() == 2 && x.dim(0) == gate.dim(0) &&
                   x.dim(2) == gate.dim(1),
               ShapeError, "mul_bcast_tokens: shape mismatch");
    int B = x.dim(0), T = x.dim(1), C = x.dim(2);
    Tensor out({B, T, C});
    for (int b = 0; b < B; ++b)
        for (int t = 0; t < T; ++t)
            for (int c = 0; c < C; ++c) out.at3(b, t, c) = x.val().at3(b, t, c) * gate.val().at2(b, c);
    auto px = x.node(), pg = gate.node();
    return Var(detail::make_op(std::move(out), {px, pg}, [px, pg, B, T, C](VarNode& n) {
        if (px->requires_grad) {
            Tensor& g = px->ensure_grad();
            for (int b = 0; b < B; ++b)
                for (int t = 0; t < T; ++t)
                    for (int c = 0; c < C; ++c)
                        g.at3(b, t, c) += n.grad.at3(b, t, c) * pg->val.at2(b, c);
        }
        if (pg->requires_grad) {
            Tensor& g = pg->ensure_grad();
            for (int b = 0; b < B; ++b)
                for (int t = 0; t < T; ++t)
                    for (int c = 0; c < C; ++c)
                        g.at2(b, c) += n.grad.at3(b, t, c) * px->val.at3(b, t, c);
        }
    }));
}

// x[B,T,C] + s[B,C] broadcast over T.
inline Var add_bcast_tokens(const Var& x, const Var& shift) {
    CODL_CHECK(x.val().ndim() == 3 && shift.val().ndim() == 2 && x.dim(0) == shift.dim(0) &&
                   x.dim(2) == shift.dim(1),
               ShapeError, "add_bcast_tokens: shape mismatch");
    int B = x.dim(0), T = x.dim(1), C = x.dim(2);
    Tensor out({B, T, C});
    for (int b = 0; b < B; ++b)
        for (int t = 0; t < T; ++t)
            for (int c = 0; c < C; ++c) out.at3(b, t, c) = x.val().at3(b, t, c) + shift.val().at2(b, c);
    auto px = x.node(), ps = shift.node();
    return Var(detail::make_op(std::move(out), {px, ps}, [px, ps, B, T, C](VarNode& n) {
        if (px->requires_grad) {
            Tensor& g = px->ensure_grad();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
        }
        if (ps->requires_grad) {
            Tensor& g = ps->ensure_grad();
            for (int b = 0; b < B; ++b)
                for (int t = 0; t < T; ++t)
                    for (int c = 0; c < C; ++c) g.at2(b, c) += n.grad.at3(b, t, c);
        }
    }));
}

// a[G,R,C] + m[R,C] broadcast over the leading dim (attention masks).
inline Var add_bcast_batch(const Var& a, const Var& m) {
    CODL_CHECK(a.val().ndim() == 3 && m.val().ndim() == 2 && a.dim(1) == m.dim(0) &&
                   a.dim(2) == m.dim(1),
               ShapeError, "add_bcast_batch: shape mismatch");
    int G = a.dim(0), R = a.dim(1), C = a.dim(2);
    Tensor out({G, R, C});
    for (int g = 0; g < G; ++g)
        for (int r = 0; r < R; ++r)
            for (int c = 0; c < C; ++c) out.at3(g, r, c) = a.val().at3(g, r, c) + m.val().at2(r, c);
    auto pa = a.node(), pm = m.node();
    return Var(detail::make_op(std::move(out), {pa, pm}, [pa, pm, G, R, C](VarNode& n) {
        if (pa->requires_grad) {
            Tensor& g = pa->ensure_grad();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
        }
        if (pm->requires_grad) {
            Tensor& g = pm->ensure_grad();
            for (int gi = 0; gi < G; ++gi)
                for (int r = 0; r < R; ++r)
                    for (int c = 0; c < C; ++c) g.at2(r, c) += n.grad.at3(gi, r, c);
        }
    }));
}

// ---- reductions ----

inline Var sum_all(const Var& a) {
    Scalar s = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) s += a.val()[i];
    auto pa = a.node();
    return Var(detail::make_op(Tensor::scalar(s), {pa}, [pa](VarNode& n) {
        Tensor& g = pa->ensure_grad();
        Scalar gs = n.grad[0];
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += gs;
    }));
}

inline Var mean_all(const Var& a) {
    return mul_scalar(sum_all(a), 1.0 / static_cast<Scalar>(a.numel()));
}

// x[B,T,C] -> mean over T -> [B,C] (squeeze pooling).
inline Var mean_tokens(const Var& x) {
    CODL_CHECK(x.val().ndim() == 3, ShapeError, "mean_tokens expects rank 3");
    int B = x.dim(0), T = x.dim(1), C = x.dim(2);
    Tensor out({B, C});
    for (int b = 0; b < B; ++b)
        for (int t = 0; t < T; ++t)
            for (int c = 0; c < C; ++c) out.at2(b, c) += x.val().at3(b, t, c);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] /= T;
    auto px = x.node();
    return Var(detail::make_op(std::move(out), {px}, [px, B, T, C](VarNode& n) {
        Tensor& g = px->ensure_grad();
        Scalar inv = 1.0 / T;
        for (int b = 0; b < B; ++b)
            for (int t = 0; t < T; ++t)
                for (int c = 0; c < C; ++c) g.at3(b, t, c) += n.grad.at2(b, c) * inv;
    }));
}

// ---- normalization / softmax ----

// Normalize over the last dim (no affine; pair with mul_rowvec/add_rowvec).
inline Var layer_norm_lastdim(const Var& a, Scalar eps = 1e-6) {
    int c = a.shape().back();
    int64_t rows = a.numel() / c;
    Tensor out(a.shape());
    Tensor inv_sigma({static_cast<int>(rows)});
    for (int64_t r = 0; r < rows; ++r) {
        const Scalar* x = a.val().data() + r * c;
        Scalar mu = 0.0;
        for (int j = 0; j < c; ++j) mu += x[j];
        mu /= c;
        Scalar var = 0.0;
        for (int j = 0; j < c; ++j) var += (x[j] - mu) * (x[j] - mu);
        var /= c;
        Scalar is = 1.0 / std::sqrt(var + eps);
        inv_sigma[r] = is;
        for (int j = 0; j < c; ++j) out[r * c + j] = (x[j] - mu) * is;
    }
    auto pa = a.node();
    auto pn = detail::make_op(std::move(out), {pa}, nullptr);
    VarNode* self = pn.get();
    if (pn->requires_grad)
        pn->backward_fn = [pa, self, rows, c, inv_sigma = std::move(inv_sigma)](VarNode& n) {
            Tensor& g = pa->ensure_grad();
            for (int64_t r = 0; r < rows; ++r) {
                const Scalar* y = self->val.data() + r * c;
                const Scalar* dy = n.grad.data() + r * c;
                Scalar mean_dy = 0.0, mean_dyy = 0.0;
                for (int j = 0; j < c; ++j) {
                    mean_dy += dy[j];
                    mean_dyy += dy[j] * y[j];
                }
                mean_dy /= c;
                mean_dyy /= c;
                Scalar is = inv_sigma[r];
                for (int j = 0; j < c; ++j)
                    g[r * c + j] += is * (dy[j] - mean_dy - y[j] * mean_dyy);
            }
        };
    return Var(pn);
}

inline Var softmax_lastdim(const Var& a) {
    int c = a.shape().back();
    int64_t rows = a.numel() / c;
    Tensor out(a.shape());
    for (int64_t r = 0; r < rows; ++r) {
        const Scalar* x = a.val().data() + r * c;
        Scalar* y = out.data() + r * c;
        Scalar mx = x[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, x[j]);
        Scalar z = 0.0;
        for (int j = 0; j < c; ++j) {
            y[j] = std::exp(x[j] - mx);
            z += y[j];
        }
        for (int j = 0; j < c; ++j) y[j] /= z;
    }
    auto pa = a.node();
    auto pn = detail::make_op(std::move(out), {pa}, nullptr);
    VarNode* self = pn.get();
    if (pn->requires_grad)
        pn->backward_fn = [pa, self, rows, c](VarNode& n) {
            Tensor& g = pa->ensure_grad();
            for (int64_t r = 0; r < rows; ++r) {
                const Scalar* y = self->val.data() + r * c;
                const Scalar* dy = n.grad.data() + r * c;
                Scalar dot = 0.0;
                for (int j = 0; j < c; ++j) dot += dy[j] * y[j];
                for (int j = 0; j < c; ++j) g[r * c + j] += y[j] * (dy[j] - dot);
            }
        };
    return Var(pn);
}

// ---- convolution ----

namespace detail {

struct ConvDims {
    int B, H, W, Cin, Cout, kh, kw, cg, cog, groups, stride, pad, Ho, Wo;
    int64_t patch, npix;
};

inline void im2col(const Tensor& src, int b, int g, const ConvDims& d, Tensor& col) {
    int64_t idx = 0;
    for (int oy = 0; oy < d.Ho; ++oy)
        for (int ox = 0; ox < d.Wo; ++ox)
            for (int ky = 0; ky < d.kh; ++ky)
                for (int kx = 0; kx < d.kw; ++kx) {
                    int iy = oy * d.stride - d.pad + ky;
                    int ix = ox * d.stride - d.pad + kx;
                    if (iy >= 0 && iy < d.H && ix >= 0 && ix < d.W) {
                        const Scalar* px = src.data() +
                            (((static_cast<int64_t>(b) * d.H + iy) * d.W + ix) * d.Cin +
                             g * d.cg);
                        for (int c = 0; c < d.cg; ++c) col[idx++] = px[c];
                    } else {
                        for (int c = 0; c < d.cg; ++c) col[idx++] = 0.0;
                    }
                }
}

}  // namespace detail

// x [B,H,W,Cin], w [Cout, kh, kw, Cin/groups], bias [Cout] (optional, pass
// undefined Var to skip). Zero padding, output H' = (H + 2p - kh)/stride + 1.
inline Var conv2d(const Var& x, const Var& w, const Var& bias, int stride, int pad, int groups) {
    CODL_CHECK(x.val().ndim() == 4 && w.val().ndim() == 4, ShapeError, "conv2d: bad ranks");
    int B = x.dim(0), H = x.dim(1), W = x.dim(2), Cin = x.dim(3);
    int Cout = w.dim(0), kh = w.dim(1), kw = w.dim(2), cg = w.dim(3);
    CODL_CHECK(Cin % groups == 0 && Cout % groups == 0 && cg == Cin / groups, ShapeError,
               "conv2d: channel/group mismatch");
    detail::ConvDims d;
    d.B = B;
    d.H = H;
    d.W = W;
    d.Cin = Cin;
    d.Cout = Cout;
    d.kh = kh;
    d.kw = kw;
    d.cg = cg;
    d.cog = Cout / groups;
    d.groups = groups;
    d.stride = stride;
    d.pad = pad;
    d.Ho = (H + 2 * pad - kh) / stride + 1;
    d.Wo = (W + 2 * pad - kw) / stride + 1;
    CODL_CHECK(d.Ho > 0 && d.Wo > 0, ShapeError, "conv2d: empty output");
    d.patch = static_cast<int64_t>(kh) * kw * cg;
    d.npix = static_cast<int64_t>(d.Ho) * d.Wo;

    Tensor out({B, d.Ho, d.Wo, Cout});
    Tensor col({static_cast<int>(d.npix), static_cast<int>(d.patch)});
    for (int b = 0; b < B; ++b) {
        for (int g = 0; g < groups; ++g) {
            detail::im2col(x.val(), b, g, d, col);
            ECMap C(col.data(), d.npix, d.patch);
            ECMap Wm(w.val().data() + static_cast<int64_t>(g) * d.cog * d.patch, d.cog, d.patch);
            EMat O = C * Wm.transpose();  // [npix, cog]
            for (int64_t p = 0; p < d.npix; ++p) {
                Scalar* dst =
                    out.data() + ((static_cast<int64_t>(b) * d.npix + p) * Cout + g * d.cog);
                for (int c = 0; c < d.cog; ++c) dst[c] = O(p, c);
            }
        }
    }
    if (bias.defined()) {
        CODL_CHECK(bias.val().ndim() == 1 && bias.dim(0) == Cout, ShapeError, "conv2d: bias dim");
        for (int64_t p = 0; p < static_cast<int64_t>(B) * d.npix; ++p)
            for (int c = 0; c < Cout; ++c) out[p * Cout + c] += bias.val()[c];
    }

    std::vector<NodePtr> parents = {x.node(), w.node()};
    if (bias.defined()) parents.push_back(bias.node());
    auto px = x.node();
    auto pw = w.node();
    NodePtr pb = bias.defined() ? bias.node() : nullptr;
    return Var(detail::make_op(
        std::move(out), std::move(parents), [px, pw, pb, d](VarNode& n) {
            Tensor col({static_cast<int>(d.npix), static_cast<int>(d.patch)});
            Tensor gcol({static_cast<int>(d.npix), static_cast<int>(d.patch)});
            for (int b = 0; b < d.B; ++b) {
                for (int g = 0; g < d.groups; ++g) {
                    // dy for this (b, group): [npix, cog]
                    EMat dy(d.npix, d.cog);
                    for (int64_t p = 0; p < d.npix; ++p) {
                        const Scalar* src = n.grad.data() +
                            ((static_cast<int64_t>(b) * d.npix + p) * d.Cout + g * d.cog);
                        for (int c = 0; c < d.cog; ++c) dy(p, c) = src[c];
                    }
                    if (pw->requires_grad) {
                        detail::im2col(px->val, b, g, d, col);
                        ECMap C(col.data(), d.npix, d.patch);
                        EMap GW(pw->ensure_grad().data() + static_cast<int64_t>(g) * d.cog * d.patch,
                                d.cog, d.patch);
                        GW.noalias() += dy.transpose() * C;
                    }
                    if (px->requires_grad) {
                        ECMap Wm(pw->val.data() + static_cast<int64_t>(g) * d.cog * d.patch, d.cog,
                                 d.patch);
                        EMap GC(gcol.data(), d.npix, d.patch);
                        GC.noalias() = dy * Wm;
                        // col2im scatter
                        Tensor& gx = px->ensure_grad();
                        int64_t idx = 0;
                        for (int oy = 0; oy < d.Ho; ++oy)
                            for (int ox = 0; ox < d.Wo; ++ox)
                                for (int ky = 0; ky < d.kh; ++ky)
                                    for (int kx = 0; kx < d.kw; ++kx) {
                                        int iy = oy * d.stride - d.pad + ky;
                                        int ix = ox * d.stride - d.pad + kx;
                                        if (iy >= 0 && iy < d.H && ix >= 0 && ix < d.W) {
                                            Scalar* dst = gx.data() +
                                                (((static_cast<int64_t>(b) * d.H + iy) * d.W + ix) *
                                                     d.Cin +
                                                 g * d.cg);
                                            for (int c = 0; c < d.cg; ++c) dst[c] += gcol[idx++];
                                        } else {
                                            idx += d.cg;
                                        }
                                    }
                    }
                }
            }
            if (pb && pb->requires_grad) {
                Tensor& gb = pb->ensure_grad();
                for (int64_t p = 0; p < static_cast<int64_t>(d.B) * d.npix; ++p)
                    for (int c = 0; c < d.Cout; ++c) gb[c] += n.grad[p * d.Cout + c];
            }
        }));
}

// ---- spatial rearrangement ----

// [B,h,w,C] -> [B, h*f, w*f, C], each cell replicated f x f.
inline Var upsample_nearest(const Var& x, int f) {
    CODL_CHECK(x.val().ndim() == 4, ShapeError, "upsample_nearest expects rank 4");
    int B = x.dim(0), h = x.dim(1), w = x.dim(2), C = x.dim(3);
    Tensor out({B, h * f, w * f, C});
    for (int b = 0; b < B; ++b)
        for (int y = 0; y < h * f; ++y)
            for (int xx = 0; xx < w * f; ++xx) {
                const Scalar* src = x.val().data() +
                    (((static_cast<int64_t>(b) * h + y / f) * w + xx / f) * C);
                Scalar* dst = out.data() +
                    (((static_cast<int64_t>(b) * h * f + y) * (w * f) + xx) * C);
                for (int c = 0; c < C; ++c) dst[c] = src[c];
            }
    auto px = x.node();
    return Var(detail::make_op(std::move(out), {px}, [px, B, h, w, C, f](VarNode& n) {
        Tensor& g = px->ensure_grad();
        for (int b = 0; b < B; ++b)
            for (int y = 0; y < h * f; ++y)
                for (int xx = 0; xx < w * f; ++xx) {
                    Scalar* dst = g.data() +
                        (((static_cast<int64_t>(b) * h + y / f) * w + xx / f) * C);
                    const Scalar* src = n.grad.data() +
                        (((static_cast<int64_t>(b) * h * f + y) * (w * f) + xx) * C);
                    for (int c = 0; c < C; ++c) dst[c] += src[c];
                }
    }));
}

// [B,H,W,C] -> [B, H/p, W/p, p*p*C]; cell layout is (ky, kx, c).
inline Var space_to_depth(const Var& x, int p) {
    CODL_CHECK(x.val().ndim() == 4 && x.dim(1) % p == 0 && x.dim(2) % p == 0, ShapeError,
               "space_to_depth: dims not divisible by patch");
    int B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
    int h = H / p, w = W / p;
    Tensor out({B, h, w, p * p * C});
    for (int b = 0; b < B; ++b)
        for (int y = 0; y < H; ++y)
            for (int xx = 0; xx < W; ++xx) {
                int ty = y / p, tx = xx / p, ky = y % p, kx = xx % p;
                const Scalar* src = x.val().data() +
                    (((static_cast<int64_t>(b) * H + y) * W + xx) * C);
                Scalar* dst = out.data() +
                    (((static_cast<int64_t>(b) * h + ty) * w + tx) * (p * p * C) +
                     (ky * p + kx) * C);
                for (int c = 0; c < C; ++c) dst[c] = src[c];
            }
    auto px = x.node();
    return Var(detail::make_op(std::move(out), {px}, [px, B, H, W, C, p, h, w](VarNode& n) {
        Tensor& g = px->ensure_grad();
        for (int b = 0; b < B; ++b)
            for (int y = 0; y < H; ++y)
                for (int xx = 0; xx < W; ++xx) {
                    int ty = y / p, tx = xx / p, ky = y % p, kx = xx % p;
                    Scalar* dst = g.data() +
                        (((static_cast<int64_t>(b) * H + y) * W + xx) * C);
                    const Scalar* src = n.grad.data() +
                        (((static_cast<int64_t>(b) * h + ty) * w + tx) * (p * p * C) +
                         (ky * p + kx) * C);
                    for (int c = 0; c < C; ++c) dst[c] += src[c];
                }
    }));
}

// [B,h,w,p*p*C] -> [B, h*p, w*p, C]; inverse of space_to_depth.
inline Var depth_to_space(const Var& x, int p) {
    CODL_CHECK(x.val().ndim() == 4 && x.dim(3) % (p * p) == 0, ShapeError,
               "depth_to_space: channel dim not divisible");
    int B = x.dim(0), h = x.dim(1), w = x.dim(2);
    int C = x.dim(3) / (p * p);
    Tensor out({B, h * p, w * p, C});
    for (int b = 0; b < B; ++b)
        for (int y = 0; y < h * p; ++y)
            for (int xx = 0; xx < w * p; ++xx) {
                int ty = y / p, tx = xx / p, ky = y % p, kx = xx % p;
                const Scalar* src = x.val().data() +
                    (((static_cast<int64_t>(b) * h + ty) * w + tx) * (p * p * C) +
                     (ky * p + kx) * C);
                Scalar* dst = out.data() +
                    (((static_cast<int64_t>(b) * h * p + y) * (w * p) + xx) * C);
                for (int c = 0; c < C; ++c) dst[c] = src[c];
            }
    auto px = x.node();
    return Var(detail::make_op(std::move(out), {px}, [px, B, h, w, C, p](VarNode& n) {
        Tensor& g = px->ensure_grad();
        for (int b = 0; b < B; ++b)
            for (int y = 0; y < h * p; ++y)
                for (int xx = 0; xx < w * p; ++xx) {
                    int ty = y / p, tx = xx / p, ky = y % p, kx = xx % p;
                    Scalar* dst = g.data() +
                        (((static_cast<int64_t>(b) * h + ty) * w + tx) * (p * p * C) +
                         (ky * p + kx) * C);
                    const Scalar* src = n.grad.data() +
                        (((static_cast<int64_t>(b) * h * p + y) * (w * p) + xx) * C);
                    for (int c = 0; c < C; ++c) dst[c] += src[c];
                }
    }));
}

// table[K,C] gathered by flat indices -> [n, C] (n = indices.size()).
inline Var embedding(const Var& table, const std::vector<int>& indices) {
    CODL_CHECK(table.val().ndim() == 2, ShapeError, "embedding: table must be rank 2");
    int K = table.dim(0), C = table.dim(1);
    for (int idx : indices)
        CODL_CHECK(idx >= 0 && idx < K, ShapeError, "embedding: index out of range");
    int n = static_cast<int>(indices.size());
    Tensor out({n, C});
    for (int i = 0; i < n; ++i)
        for (int c = 0; c < C; ++c) out.at2(i, c) = table.val().at2(indices[i], c);
    auto pt = table.node();
    return Var(detail::make_op(std::move(out), {pt}, [pt, indices, C](VarNode& n2) {
        Tensor& g = pt->ensure_grad();
        for (size_t i = 0; i < indices.size(); ++i)
            for (int c = 0; c < C; ++c)
                g.at2(indices[i], c) += n2.grad.at2(static_cast<int>(i), c);
    }));
}

// ---- composite losses ----

inline Var mse_loss(const Var& a, const Var& b) { return mean_all(square(sub(a, b))); }

inline Var l1_loss(const Var& a, const Var& b) { return mean_all(abs_op(sub(a, b))); }

// Straight-through: value of `hard`, gradient routed to `soft`.
inline Var straight_through(const Var& soft, const Var& hard) {
    return add(soft, stop_grad(sub(hard, soft)));
}

}  // namespace codl
