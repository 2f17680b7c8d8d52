#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "codl/autodiff.hpp"
#include "codl/rng.hpp"

namespace codl {

// Ordered registry of named trainable tensors. Networks register their
// parameters here; the optimizer, checkpointing and freeze/copy logic all
// walk the same ordered list.
class ParamStore {
public:
    Var add(const std::string& name, Tensor init, bool requires_grad = true) {
        CODL_CHECK(!index_.count(name), ShapeError, "duplicate parameter name: " + name);
        Var v = Var::leaf(std::move(init), requires_grad);
        index_[name] = params_.size();
        params_.emplace_back(name, v);
        return v;
    }

    Var get(const std::string& name) const {
        auto it = index_.find(name);
        CODL_CHECK(it != index_.end(), ShapeError, "unknown parameter: " + name);
        return params_[it->second].second;
    }

    bool has(const std::string& name) const { return index_.count(name) > 0; }

    const std::vector<std::pair<std::string, Var>>& entries() const { return params_; }
    size_t size() const { return params_.size(); }

    void zero_grads() {
        for (auto& [name, v] : params_) v.zero_grad();
    }

    void set_requires_grad(bool r) {
        for (auto& [name, v] : params_) v.set_requires_grad(r);
    }

    int64_t total_elements() const {
        int64_t n = 0;
        for (const auto& [name, v] : params_) n += v.numel();
        return n;
    }

    // Copy values from another store; names and shapes must match exactly.
    void copy_values_from(const ParamStore& src) {
        CODL_CHECK(src.size() == size(), ShapeError, "copy_values_from: size mismatch");
        for (size_t i = 0; i < params_.size(); ++i) {
            CODL_CHECK(params_[i].first == src.params_[i].first, ShapeError,
                       "copy_values_from: name mismatch at " + params_[i].first);
            CODL_CHECK(params_[i].second.val().same_shape(src.params_[i].second.val()), ShapeError,
                       "copy_values_from: shape mismatch at " + params_[i].first);
            params_[i].second.val_mut() = src.params_[i].second.val();
        }
    }

    // Copy values by name where both stores have the parameter with the same
    // shape; returns names (of `this`) that were not filled.
    std::vector<std::string> copy_matching_from(const ParamStore& src) {
        std::vector<std::string> missing;
        for (auto& [name, v] : params_) {
            auto it = src.index_.find(name);
            if (it != src.index_.end() &&
                src.params_[it->second].second.val().same_shape(v.val())) {
                v.val_mut() = src.params_[it->second].second.val();
            } else {
                missing.push_back(name);
            }
        }
        return missing;
    }

private:
    std::vector<std::pair<std::string, Var>> params_;
    std::map<std::string, size_t> index_;
};

namespace init {

inline Tensor he_normal(std::vector<int> shape, int fan_in, Rng& rng) {
    return Tensor::randn(std::move(shape), rng, std::sqrt(2.0 / fan_in));
}

inline Tensor xavier(std::vector<int> shape, int fan_in, int fan_out, Rng& rng) {
    return Tensor::randn(std::move(shape), rng, std::sqrt(2.0 / (fan_in + fan_out)));
}

}  // namespace init

struct Linear {
    Var w;  // [in, out]
    Var b;  // [out]
    int in = 0, out = 0;

    Linear() = default;
    Linear(ParamStore& ps, const std::string& name, int in_dim, int out_dim, Rng& rng,
           bool zero_init = false)
        : in(in_dim), out(out_dim) {
        Tensor wt = zero_init ? Tensor({in_dim, out_dim})
                              : init::xavier({in_dim, out_dim}, in_dim, out_dim, rng);
        w = ps.add(name + ".w", std::move(wt));
        b = ps.add(name + ".b", Tensor({out_dim}));
    }

    Var forward(const Var& x) const {
        const auto& s = x.shape();
        CODL_CHECK(s.back() == in, ShapeError, "Linear: input dim mismatch");
        int64_t rows = x.numel() / in;
        Var flat = reshape(x, {static_cast<int>(rows), in});
        Var y = add_rowvec(matmul(flat, w), b);
        std::vector<int> os = s;
        os.back() = out;
        return reshape(y, os);
    }
};

struct Conv2dLayer {
    Var w;  // [Cout, kh, kw, Cin/groups]
    Var b;  // [Cout]
    int stride = 1, pad = 0, groups = 1;

    Conv2dLayer() = default;
    Conv2dLayer(ParamStore& ps, const std::string& name, int cin, int cout, int k, int stride_,
                int pad_, int groups_, Rng& rng)
        : stride(stride_), pad(pad_), groups(groups_) {
        int fan_in = k * k * (cin / groups_);
        w = ps.add(name + ".w", init::he_normal({cout, k, k, cin / groups_}, fan_in, rng));
        b = ps.add(name + ".b", Tensor({cout}));
    }

    Var forward(const Var& x) const { return conv2d(x, w, b, stride, pad, groups); }
};

struct LayerNorm {
    Var gamma, beta;

    LayerNorm() = default;
    LayerNorm(ParamStore& ps, const std::string& name, int dim) {
        gamma = ps.add(name + ".g", Tensor::full({dim}, 1.0));
        beta = ps.add(name + ".b", Tensor({dim}));
    }

    Var forward(const Var& x) const {
        return add_rowvec(mul_rowvec(layer_norm_lastdim(x), gamma), beta);
    }
};

// Adam with global-norm gradient clipping and optional cosine decay.
class Adam {
public:
    struct Options {
        Scalar lr = 1e-4;
        Scalar beta1 = 0.9;
        Scalar beta2 = 0.999;
        Scalar eps = 1e-8;
        Scalar clip_norm = 1.0;  // <= 0 disables clipping
    };

    Adam() = default;
    explicit Adam(Options opt) : opt_(opt) {}

    void attach(const ParamStore& ps) {
        for (const auto& [name, v] : ps.entries()) {
            params_.push_back(v);
            m_.emplace_back(v.val().shape());
            v2_.emplace_back(v.val().shape());
        }
    }

    Scalar global_grad_norm() const {
        Scalar s = 0.0;
        for (const auto& p : params_) {
            if (!p.has_grad()) continue;
            for (int64_t i = 0; i < p.grad().numel(); ++i) s += p.grad()[i] * p.grad()[i];
        }
        return std::sqrt(s);
    }

    void step(Scalar lr_override = -1.0) {
        Scalar lr = lr_override > 0.0 ? lr_override : opt_.lr;
        ++t_;
        Scalar scale = 1.0;
        if (opt_.clip_norm > 0.0) {
            Scalar norm = global_grad_norm();
            if (norm > opt_.clip_norm) scale = opt_.clip_norm / norm;
        }
        Scalar bc1 = 1.0 - std::pow(opt_.beta1, static_cast<Scalar>(t_));
        Scalar bc2 = 1.0 - std::pow(opt_.beta2, static_cast<Scalar>(t_));
        for (size_t i = 0; i < params_.size(); ++i) {
            Var& p = params_[i];
            if (!p.has_grad()) continue;
            Tensor& mval = m_[i];
            Tensor& vval = v2_[i];
            Tensor& w = p.val_mut();
            const Tensor& g = p.grad();
            for (int64_t j = 0; j < w.numel(); ++j) {
                Scalar gj = g[j] * scale;
                mval[j] = opt_.beta1 * mval[j] + (1.0 - opt_.beta1) * gj;
                vval[j] = opt_.beta2 * vval[j] + (1.0 - opt_.beta2) * gj * gj;
                Scalar mhat = mval[j] / bc1;
                Scalar vhat = vval[j] / bc2;
                w[j] -= lr * mhat / (std::sqrt(vhat) + opt_.eps);
            }
        }
    }

    int64_t steps() const { return t_; }
    void set_steps(int64_t t) { t_ = t; }
    const Options& options() const { return opt_; }

    // Flat views of moment buffers for checkpointing (order = attach order).
    std::vector<Tensor>& moments1() { return m_; }
    std::vector<Tensor>& moments2() { return v2_; }

private:
    Options opt_;
    std::vector<Var> params_;
    std::vector<Tensor> m_;
    std::vector<Tensor> v2_;
    int64_t t_ = 0;
};

inline Scalar cosine_lr(Scalar base_lr, int64_t step, int64_t total_steps,
                        Scalar floor_frac = 0.05) {
    if (total_steps <= 0) return base_lr;
    Scalar x = std::min<Scalar>(1.0, static_cast<Scalar>(step) / total_steps);
    Scalar c = 0.5 * (1.0 + std::cos(3.14159265358979323846 * x));
    return base_lr * (floor_frac + (1.0 - floor_frac) * c);
}

}  // namespace codl
