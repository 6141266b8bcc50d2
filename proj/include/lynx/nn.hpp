#pragma once

// Layers and training machinery shared by the backbone and adapters.

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "lynx/common.hpp"
#include "lynx/rope_pack.hpp"
#include "lynx/tensor.hpp"

namespace lynx {

// Named parameter collection. Names are hierarchical dotted paths
// ("blocks.2.self_attn.q.weight") and double as checkpoint keys.
class ParamRegistry {
public:
    void add(const std::string& name, Tensor t) {
        for (const auto& [n, _] : items_)
            if (n == name) throw runtime_error("param registry: duplicate name " + name);
        items_.emplace_back(name, std::move(t));
    }

    void merge(const ParamRegistry& other) {
        for (const auto& [n, t] : other.items_) add(n, t);
    }

    const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
    std::vector<std::pair<std::string, Tensor>>& items_mut() { return items_; }

    Tensor* find(const std::string& name) {
        for (auto& [n, t] : items_)
            if (n == name) return &t;
        return nullptr;
    }

    void set_requires_grad(bool v) {
        for (auto& [_, t] : items_) t.set_requires_grad(v);
    }

    void zero_grad() {
        for (auto& [_, t] : items_) t.zero_grad();
    }

    int64_t total_size() const {
        int64_t n = 0;
        for (const auto& [_, t] : items_) n += t.size();
        return n;
    }

    // FNV-1a over the raw little-endian bytes of every tensor, in registry
    // order. Used for frozen-copy immutability checks.
    uint64_t content_hash() const {
        uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& [name, t] : items_) {
            h = fnv1a_str(name, h);
            h = fnv1a(t.data().data(), t.data().size() * sizeof(double), h);
        }
        return h;
    }

private:
    std::vector<std::pair<std::string, Tensor>> items_;
};

struct Linear {
    Tensor weight;  // (in, out)
    Tensor bias;    // (1, out); undefined when bias-less
    int64_t in_dim = 0, out_dim = 0;

    Linear() = default;

    // init_std < 0 selects 1/sqrt(in); 0 zero-initializes (adaLN heads, gates)
    Linear(Rng& rng, int64_t in, int64_t out, double init_std = -1.0, bool with_bias = true)
        : in_dim(in), out_dim(out) {
        const double std = init_std < 0.0 ? 1.0 / std::sqrt(double(in)) : init_std;
        weight = std == 0.0 ? Tensor::zeros(in, out) : Tensor::randn(rng, in, out, std);
        if (with_bias) bias = Tensor::zeros(1, out);
    }

    Tensor forward(const Tensor& x) const {
        Tensor y = matmul(x, weight);
        if (bias.defined()) y = add_rowvec(y, bias);
        return y;
    }

    void collect_params(const std::string& prefix, ParamRegistry& reg) const {
        reg.add(prefix + ".weight", weight);
        if (bias.defined()) reg.add(prefix + ".bias", bias);
    }
};

// q/k/v/out projections of one multi-head attention. kv_dim may differ from
// the query stream width (text cross-attention).
struct AttentionWeights {
    Linear q, k, v, out;
    int64_t num_heads = 1;

    AttentionWeights() = default;

    AttentionWeights(Rng& rng, int64_t dim, int64_t kv_dim, int64_t heads)
        : q(rng, dim, dim), k(rng, kv_dim, dim), v(rng, kv_dim, dim), out(rng, dim, dim),
          num_heads(heads) {
        if (dim % heads != 0)
            throw config_error("attention: dim " + std::to_string(dim) +
                               " not divisible by heads " + std::to_string(heads));
    }

    void collect_params(const std::string& prefix, ParamRegistry& reg) const {
        q.collect_params(prefix + ".q", reg);
        k.collect_params(prefix + ".k", reg);
        v.collect_params(prefix + ".v", reg);
        out.collect_params(prefix + ".out", reg);
    }
};

// Multi-head scaled dot-product attention. rope (when given) rotates q and k
// per head; seg (when given) restricts attention block-diagonally with exact
// zero weights across segments.
inline Tensor attention(const AttentionWeights& w, const Tensor& x_q, const Tensor& x_kv,
                        const RopeTable* rope = nullptr,
                        const std::vector<int32_t>* seg = nullptr) {
    if (x_kv.rows() < 1) throw runtime_error("attention: empty key/value sequence");
    const int64_t dim = w.q.out_dim;
    const int64_t heads = w.num_heads;
    const int64_t hd = dim / heads;
    Tensor q = w.q.forward(x_q);
    Tensor k = w.k.forward(x_kv);
    Tensor v = w.v.forward(x_kv);
    const double inv_scale = 1.0 / std::sqrt(double(hd));

    std::vector<Tensor> head_out;
    head_out.reserve(size_t(heads));
    for (int64_t h = 0; h < heads; ++h) {
        Tensor qh = slice_cols(q, h * hd, hd);
        Tensor kh = slice_cols(k, h * hd, hd);
        Tensor vh = slice_cols(v, h * hd, hd);
        if (rope) {
            qh = apply_rope(qh, *rope);
            kh = apply_rope(kh, *rope);
        }
        Tensor scores = scale(matmul_nt(qh, kh), inv_scale);
        Tensor probs = seg ? softmax_rows(scores, seg, seg) : softmax_rows(scores);
        head_out.push_back(matmul(probs, vh));
    }
    return w.out.forward(concat_cols(head_out));
}

// (1, D) vector repeated over n rows; gradient sums back into the vector.
inline Tensor broadcast_rows(const Tensor& v, int64_t n) {
    return matmul(Tensor::full(n, 1, 1.0), v);
}

// First-order adaptive-moment optimizer over an explicit trainable set.
class Adam {
public:
    Adam(std::vector<Tensor> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
         double eps = 1e-8)
        : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (const auto& p : params_)
            slots_.push_back({std::vector<double>(size_t(p.size()), 0.0),
                              std::vector<double>(size_t(p.size()), 0.0)});
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    double grad_norm() const {
        double acc = 0.0;
        for (const auto& p : params_)
            for (double g : p.grad()) acc += g * g;
        return std::sqrt(acc);
    }

    void step() {
        ++step_count_;
        const double bc1 = 1.0 - std::pow(beta1_, double(step_count_));
        const double bc2 = 1.0 - std::pow(beta2_, double(step_count_));
        for (size_t i = 0; i < params_.size(); ++i) {
            auto& value = params_[i].data_mut();
            const auto& grad = params_[i].grad();
            auto& m = slots_[i].m;
            auto& v = slots_[i].v;
            for (size_t j = 0; j < value.size(); ++j) {
                m[j] = beta1_ * m[j] + (1.0 - beta1_) * grad[j];
                v[j] = beta2_ * v[j] + (1.0 - beta2_) * grad[j] * grad[j];
                const double mhat = m[j] / bc1;
                const double vhat = v[j] / bc2;
                value[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }
    int64_t step_count() const { return step_count_; }
    void set_step_count(int64_t n) { step_count_ = n; }

    struct Slot {
        std::vector<double> m, v;
    };
    const std::vector<Slot>& slots() const { return slots_; }
    std::vector<Slot>& slots_mut() { return slots_; }
    const std::vector<Tensor>& params() const { return params_; }

private:
    std::vector<Tensor> params_;
    std::vector<Slot> slots_;
    double lr_, beta1_, beta2_, eps_;
    int64_t step_count_ = 0;
};

}  // namespace lynx
