#pragma once

// Minimal reverse-mode autodiff engine over 2-D double tensors.
//
// Everything the model touches is a (rows, cols) matrix of doubles: token
// sequences are (len, dim), vectors are (1, dim), losses are (1, 1). Ops
// record a backward closure when grad mode is on and an input requires grad;
// Tensor::backward() runs the tape in reverse topological order. All loops
// are single-threaded with a fixed iteration order, so results are bitwise
// reproducible for identical inputs.

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "lynx/common.hpp"

namespace lynx {

namespace detail {
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

// RAII guard disabling graph recording (frozen/reference passes, sampling).
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

struct TensorNode {
    int64_t rows = 0;
    int64_t cols = 0;
    std::vector<double> value;
    std::vector<double> grad;  // allocated lazily, same extent as value
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward;

    int64_t size() const { return rows * cols; }
    std::vector<double>& grad_buf() {
        if (grad.empty()) grad.assign(value.size(), 0.0);
        return grad;
    }
};

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(int64_t rows, int64_t cols) {
        return from_data(std::vector<double>(size_t(rows * cols), 0.0), rows, cols);
    }

    static Tensor full(int64_t rows, int64_t cols, double v) {
        return from_data(std::vector<double>(size_t(rows * cols), v), rows, cols);
    }

    static Tensor from_data(std::vector<double> data, int64_t rows, int64_t cols) {
        if (int64_t(data.size()) != rows * cols)
            throw runtime_error("tensor: data size " + std::to_string(data.size()) +
                                " does not match shape (" + std::to_string(rows) + ", " +
                                std::to_string(cols) + ")");
        auto node = std::make_shared<TensorNode>();
        node->rows = rows;
        node->cols = cols;
        node->value = std::move(data);
        return Tensor(std::move(node));
    }

    static Tensor randn(Rng& rng, int64_t rows, int64_t cols, double stddev = 1.0) {
        std::vector<double> d(size_t(rows * cols));
        for (auto& x : d) x = rng.normal(0.0, stddev);
        return from_data(std::move(d), rows, cols);
    }

    bool defined() const { return node_ != nullptr; }
    int64_t rows() const { return node_->rows; }
    int64_t cols() const { return node_->cols; }
    int64_t size() const { return node_->size(); }

    double at(int64_t i, int64_t j) const { return node_->value[size_t(i * cols() + j)]; }
    double item() const {
        if (size() != 1) throw runtime_error("tensor: item() on non-scalar");
        return node_->value[0];
    }

    const std::vector<double>& data() const { return node_->value; }
    // In-place mutation is reserved for leaves (parameter updates / test
    // perturbations); the graph is rebuilt every forward pass.
    std::vector<double>& data_mut() { return node_->value; }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        node_->requires_grad = v;
        return *this;
    }

    const std::vector<double>& grad() const { return node_->grad_buf(); }
    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }

    Tensor detached_copy() const {
        return from_data(node_->value, node_->rows, node_->cols);
    }

    // Reverse pass from a scalar. Seeds d(this)/d(this) = 1 and walks the
    // recorded tape once in reverse topological order.
    void backward() const {
        if (size() != 1) throw runtime_error("backward: root must be scalar");
        if (!node_->requires_grad)
            throw runtime_error("backward: root does not require grad");
        std::vector<TensorNode*> order;
        std::unordered_set<TensorNode*> seen;
        topo(node_.get(), seen, order);
        node_->grad_buf()[0] = 1.0;
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            TensorNode* n = *it;
            if (n->backward) n->backward(*n);
        }
    }

    std::shared_ptr<TensorNode> node() const { return node_; }
    explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

private:
    static void topo(TensorNode* n, std::unordered_set<TensorNode*>& seen,
                     std::vector<TensorNode*>& order) {
        if (!n->requires_grad || seen.count(n)) return;
        // iterative DFS; graphs for long training runs can be deep
        struct Frame {
            TensorNode* node;
            size_t next_parent;
        };
        std::vector<Frame> stack{{n, 0}};
        seen.insert(n);
        while (!stack.empty()) {
            Frame& f = stack.back();
            if (f.next_parent < f.node->parents.size()) {
                TensorNode* p = f.node->parents[f.next_parent++].get();
                if (p->requires_grad && !seen.count(p)) {
                    seen.insert(p);
                    stack.push_back({p, 0});
                }
            } else {
                order.push_back(f.node);
                stack.pop_back();
            }
        }
    }

    std::shared_ptr<TensorNode> node_;
};

namespace detail {

inline Tensor make_op(int64_t rows, int64_t cols, std::vector<double> value,
                      std::vector<Tensor> parents,
                      std::function<void(TensorNode&)> backward) {
    auto node = std::make_shared<TensorNode>();
    node->rows = rows;
    node->cols = cols;
    node->value = std::move(value);
    bool rec = grad_mode();
    bool any = false;
    if (rec)
        for (const auto& p : parents) any = any || p.requires_grad();
    if (rec && any) {
        node->requires_grad = true;
        for (auto& p : parents) node->parents.push_back(p.node());
        node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw runtime_error(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) +
                            ", " + std::to_string(a.cols()) + ") vs (" + std::to_string(b.rows()) +
                            ", " + std::to_string(b.cols()) + ")");
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<double> out(a.data());
    const auto& bv = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return detail::make_op(a.rows(), a.cols(), std::move(out), {a, b}, [](TensorNode& n) {
        const auto& g = n.grad;
        for (int k = 0; k < 2; ++k) {
            auto& p = *n.parents[k];
            if (!p.requires_grad) continue;
            auto& pg = p.grad_buf();
            for (size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<double> out(a.data());
    const auto& bv = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    return detail::make_op(a.rows(), a.cols(), std::move(out), {a, b}, [](TensorNode& n) {
        const auto& g = n.grad;
        if (n.parents[0]->requires_grad) {
            auto& pg = n.parents[0]->grad_buf();
            for (size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
        }
        if (n.parents[1]->requires_grad) {
            auto& pg = n.parents[1]->grad_buf();
            for (size_t i = 0; i < g.size(); ++i) pg[i] -= g[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<double> out(a.data());
    const auto& bv = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    return detail::make_op(a.rows(), a.cols(), std::move(out), {a, b}, [](TensorNode& n) {
        const auto& g = n.grad;
        const auto& av = n.parents[0]->value;
        const auto& bvv = n.parents[1]->value;
        if (n.parents[0]->requires_grad) {
            auto& pg = n.parents[0]->grad_buf();
            for (size_t i = 0; i < g.size(); ++i) pg[i] += g[i] * bvv[i];
        }
        if (n.parents[1]->requires_grad) {
            auto& pg = n.parents[1]->grad_buf();
            for (size_t i = 0; i < g.size(); ++i) pg[i] += g[i] * av[i];
        }
    });
}

inline Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.data());
    for (auto& x : out) x *= c;
    return detail::make_op(a.rows(), a.cols(), std::move(out), {a}, [c](TensorNode& n) {
        auto& pg = n.parents[0]->grad_buf();
        for (size_t i = 0; i < n.grad.size(); ++i) pg[i] += n.grad[i] * c;
    });
}

inline Tensor add_const(const Tensor& a, double c) {
    std::vector<double> out(a.data());
    for (auto& x : out) x += c;
    return detail::make_op(a.rows(), a.cols(), std::move(out), {a}, [](TensorNode& n) {
        auto& pg = n.parents[0]->grad_buf();
        for (size_t i = 0; i < n.grad.size(); ++i) pg[i] += n.grad[i];
    });
}

// x: (L, D) + v: (1, D), broadcast over rows
inline Tensor add_rowvec(const Tensor& x, const Tensor& v) {
    if (v.rows() != 1 || v.cols() != x.cols())
        throw runtime_error("add_rowvec: vector shape (" + std::to_string(v.rows()) + ", " +
                            std::to_string(v.cols()) + ") does not broadcast over (" +
                            std::to_string(x.rows()) + ", " + std::to_string(x.cols()) + ")");
    std::vector<double> out(x.data());
    const auto& vv = v.data();
    const int64_t L = x.rows(), D = x.cols();
    for (int64_t i = 0; i < L; ++i)
        for (int64_t j = 0; j < D; ++j) out[size_t(i * D + j)] += vv[size_t(j)];
    return detail::make_op(L, D, std::move(out), {x, v}, [L, D](TensorNode& n) {
        const auto& g = n.grad;
        if (n.parents[0]->requires_grad) {
            auto& pg = n.parents[0]->grad_buf();
            for (size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
        }
        if (n.parents[1]->requires_grad) {
            auto& pg = n.parents[1]->grad_buf();
            for (int64_t i = 0; i < L; ++i)
                for (int64_t j = 0; j < D; ++j) pg[size_t(j)] += g[size_t(i * D + j)];
        }
    });
}

// x: (L, D) * v: (1, D), broadcast over rows
inline Tensor mul_rowvec(const Tensor& x, const Tensor& v) {
    if (v.rows() != 1 || v.cols() != x.cols())
        throw runtime_error("mul_rowvec: vector shape (" + std::to_string(v.rows()) + ", " +
                            std::to_string(v.cols()) + ") does not broadcast over (" +
                            std::to_string(x.rows()) + ", " + std::to_string(x.cols()) + ")");
    std::vector<double> out(x.data());
    const auto& vv = v.data();
    const int64_t L = x.rows(), D = x.cols();
    for (int64_t i = 0; i < L; ++i)
        for (int64_t j = 0; j < D; ++j) out[size_t(i * D + j)] *= vv[size_t(j)];
    return detail::make_op(L, D, std::move(out), {x, v}, [L, D](TensorNode& n) {
        const auto& g = n.grad;
        const auto& xv = n.parents[0]->value;
        const auto& vv2 = n.parents[1]->value;
        if (n.parents[0]->requires_grad) {
            auto& pg = n.parents[0]->grad_buf();
            for (int64_t i = 0; i < L; ++i)
                for (int64_t j = 0; j < D; ++j)
                    pg[size_t(i * D + j)] += g[size_t(i * D + j)] * vv2[size_t(j)];
        }
        if (n.parents[1]->requires_grad) {
            auto& pg = n.parents[1]->grad_buf();
            for (int64_t i = 0; i < L; ++i)
                for (int64_t j = 0; j < D; ++j)
                    pg[size_t(j)] += g[size_t(i * D + j)] * xv[size_t(i * D + j)];
        }
    });
}

// (M, K) x (K, N) -> (M, N)
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.rows())
        throw runtime_error("matmul: inner dims " + std::to_string(a.cols()) + " vs " +
                            std::to_string(b.rows()));
    const int64_t M = a.rows(), K = a.cols(), N = b.cols();
    std::vector<double> out(size_t(M * N), 0.0);
    const auto& av = a.data();
    const auto& bv = b.data();
    for (int64_t i = 0; i < M; ++i) {
        double* crow = out.data() + i * N;
        const double* arow = av.data() + i * K;
        for (int64_t k = 0; k < K; ++k) {
            const double aik = arow[k];
            if (aik == 0.0) continue;
            const double* brow = bv.data() + k * N;
            for (int64_t j = 0; j < N; ++j) crow[j] += aik * brow[j];
        }
    }
    return detail::make_op(M, N, std::move(out), {a, b}, [M, K, N](TensorNode& n) {
        const auto& g = n.grad;
        const auto& av2 = n.parents[0]->value;
        const auto& bv2 = n.parents[1]->value;
        if (n.parents[0]->requires_grad) {
            // dA = G B^T
            auto& pg = n.parents[0]->grad_buf();
            for (int64_t i = 0; i < M; ++i) {
                const double* grow = g.data() + i * N;
                double* arow = pg.data() + i * K;
                for (int64_t k = 0; k < K; ++k) {
                    const double* brow = bv2.data() + k * N;
                    double acc = 0.0;
                    for (int64_t j = 0; j < N; ++j) acc += grow[j] * brow[j];
                    arow[k] += acc;
                }
            }
        }
        if (n.parents[1]->requires_grad) {
            // dB = A^T G
            auto& pg = n.parents[1]->grad_buf();
            for (int64_t i = 0; i < M; ++i) {
                const double* arow = av2.data() + i * K;
                const double* grow = g.data() + i * N;
                for (int64_t k = 0; k < K; ++k) {
                    const double aik = arow[k];
                    if (aik == 0.0) continue;
                    double* brow = pg.data() + k * N;
                    for (int64_t j = 0; j < N; ++j) brow[j] += aik * grow[j];
                }
            }
        }
    });
}

// (M, K) x (N, K)^T -> (M, N); rows of b are the keys
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.cols())
        throw runtime_error("matmul_nt: inner dims " + std::to_string(a.cols()) + " vs " +
                            std::to_string(b.cols()));
    const int64_t M = a.rows(), K = a.cols(), N = b.rows();
    std::vector<double> out(size_t(M * N), 0.0);
    const auto& av = a.data();
    const auto& bv = b.data();
    for (int64_t i = 0; i < M; ++i) {
        const double* arow = av.data() + i * K;
        double* crow = out.data() + i * N;
        for (int64_t j = 0; j < N; ++j) {
            const double* brow = bv.data() + j * K;
            double acc = 0.0;
            for (int64_t k = 0; k < K; ++k) acc += arow[k] * brow[k];
            crow[j] = acc;
        }
    }
    return detail::make_op(M, N, std::move(out), {a, b}, [M, K, N](TensorNode& n) {
        const auto& g = n.grad;
        const auto& av2 = n.parents[0]->value;
        const auto& bv2 = n.parents[1]->value;
        if (n.parents[0]->requires_grad) {
            // dA = G B
            auto& pg = n.parents[0]->grad_buf();
            for (int64_t i = 0; i < M; ++i) {
                const double* grow = g.data() + i * N;
                double* arow = pg.data() + i * K;
                for (int64_t j = 0; j < N; ++j) {
                    const double gij = grow[j];
                    if (gij == 0.0) continue;
                    const double* brow = bv2.data() + j * K;
                    for (int64_t k = 0; k < K; ++k) arow[k] += gij * brow[k];
                }
            }
        }
        if (n.parents[1]->requires_grad) {
            // dB = G^T A
            auto& pg = n.parents[1]->grad_buf();
            for (int64_t i = 0; i < M; ++i) {
                const double* grow = g.data() + i * N;
                const double* arow = av2.data() + i * K;
                for (int64_t j = 0; j < N; ++j) {
                    const double gij = grow[j];
                    if (gij == 0.0) continue;
                    double* brow = pg.data() + j * K;
                    for (int64_t k = 0; k < K; ++k) brow[k] += gij * arow[k];
                }
            }
        }
    });
}

inline Tensor slice_rows(const Tensor& x, int64_t start, int64_t len) {
    if (start < 0 || len < 0 || start + len > x.rows())
        throw runtime_error("slice_rows: range [" + std::to_string(start) + ", " +
                            std::to_string(start + len) + ") out of " + std::to_string(x.rows()));
    const int64_t D = x.cols();
    std::vector<double> out(x.data().begin() + start * D, x.data().begin() + (start + len) * D);
    return detail::make_op(len, D, std::move(out), {x}, [start, D](TensorNode& n) {
        auto& pg = n.parents[0]->grad_buf();
        for (size_t i = 0; i < n.grad.size(); ++i) pg[size_t(start * D) + i] += n.grad[i];
    });
}

inline Tensor slice_cols(const Tensor& x, int64_t start, int64_t len) {
    if (start < 0 || len < 0 || start + len > x.cols())
        throw runtime_error("slice_cols: range [" + std::to_string(start) + ", " +
                            std::to_string(start + len) + ") out of " + std::to_string(x.cols()));
    const int64_t L = x.rows(), D = x.cols();
    std::vector<double> out(size_t(L * len));
    const auto& xv = x.data();
    for (int64_t i = 0; i < L; ++i)
        for (int64_t j = 0; j < len; ++j) out[size_t(i * len + j)] = xv[size_t(i * D + start + j)];
    return detail::make_op(L, len, std::move(out), {x}, [start, len, L, D](TensorNode& n) {
        auto& pg = n.parents[0]->grad_buf();
        for (int64_t i = 0; i < L; ++i)
            for (int64_t j = 0; j < len; ++j)
                pg[size_t(i * D + start + j)] += n.grad[size_t(i * len + j)];
    });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw runtime_error("concat_rows: empty input");
    const int64_t D = parts[0].cols();
    int64_t L = 0;
    for (const auto& p : parts) {
        if (p.cols() != D) throw runtime_error("concat_rows: column mismatch");
        L += p.rows();
    }
    std::vector<double> out;
    out.reserve(size_t(L * D));
    for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    std::vector<int64_t> lens;
    for (const auto& p : parts) lens.push_back(p.rows());
    return detail::make_op(L, D, std::move(out), parts, [lens, D](TensorNode& n) {
        int64_t off = 0;
        for (size_t k = 0; k < n.parents.size(); ++k) {
            auto& p = *n.parents[k];
            if (p.requires_grad) {
                auto& pg = p.grad_buf();
                for (int64_t i = 0; i < lens[k] * D; ++i)
                    pg[size_t(i)] += n.grad[size_t(off * D + i)];
            }
            off += lens[k];
        }
    });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw runtime_error("concat_cols: empty input");
    const int64_t L = parts[0].rows();
    int64_t D = 0;
    for (const auto& p : parts) {
        if (p.rows() != L) throw runtime_error("concat_cols: row mismatch");
        D += p.cols();
    }
    std::vector<double> out(size_t(L * D));
    int64_t off = 0;
    for (const auto& p : parts) {
        const int64_t pc = p.cols();
        for (int64_t i = 0; i < L; ++i)
            for (int64_t j = 0; j < pc; ++j)
                out[size_t(i * D + off + j)] = p.data()[size_t(i * pc + j)];
        off += pc;
    }
    std::vector<int64_t> widths;
    for (const auto& p : parts) widths.push_back(p.cols());
    return detail::make_op(L, D, std::move(out), parts, [widths, L, D](TensorNode& n) {
        int64_t off2 = 0;
        for (size_t k = 0; k < n.parents.size(); ++k) {
            auto& p = *n.parents[k];
            const int64_t pc = widths[k];
            if (p.requires_grad) {
                auto& pg = p.grad_buf();
                for (int64_t i = 0; i < L; ++i)
                    for (int64_t j = 0; j < pc; ++j)
                        pg[size_t(i * pc + j)] += n.grad[size_t(i * D + off2 + j)];
            }
            off2 += pc;
        }
    });
}

// Row softmax with max subtraction. When segment ids are given (same length
// as rows of a square score matrix), entries whose row/column segments differ
// get probability exactly 0.0 and never receive gradient, so packed samples
// cannot leak into each other even at the ulp level.
inline Tensor softmax_rows(const Tensor& x, const std::vector<int32_t>* row_seg = nullptr,
                           const std::vector<int32_t>* col_seg = nullptr) {
    const int64_t L = x.rows(), N = x.cols();
    if (row_seg && int64_t(row_seg->size()) != L)
        throw runtime_error("softmax_rows: row segment ids size " +
                            std::to_string(row_seg->size()) + " != rows " + std::to_string(L));
    if (col_seg && int64_t(col_seg->size()) != N)
        throw runtime_error("softmax_rows: col segment ids size " +
                            std::to_string(col_seg->size()) + " != cols " + std::to_string(N));
    if (bool(row_seg) != bool(col_seg))
        throw runtime_error("softmax_rows: need both or neither segment id set");
    std::vector<double> out(size_t(L * N), 0.0);
    const auto& xv = x.data();
    for (int64_t i = 0; i < L; ++i) {
        const double* row = xv.data() + i * N;
        double* orow = out.data() + i * N;
        double mx = -std::numeric_limits<double>::infinity();
        for (int64_t j = 0; j < N; ++j) {
            if (row_seg && (*row_seg)[size_t(i)] != (*col_seg)[size_t(j)]) continue;
            mx = std::max(mx, row[j]);
        }
        if (!std::isfinite(mx))
            throw runtime_error("softmax_rows: row " + std::to_string(i) + " has no allowed entry");
        double denom = 0.0;
        for (int64_t j = 0; j < N; ++j) {
            if (row_seg && (*row_seg)[size_t(i)] != (*col_seg)[size_t(j)]) continue;
            const double e = std::exp(row[j] - mx);
            orow[j] = e;
            denom += e;
        }
        for (int64_t j = 0; j < N; ++j) orow[j] /= denom;
    }
    return detail::make_op(L, N, std::move(out), {x}, [L, N](TensorNode& n) {
        // dS = P * (G - rowsum(G * P)); masked entries have P == 0
        auto& pg = n.parents[0]->grad_buf();
        for (int64_t i = 0; i < L; ++i) {
            const double* p = n.value.data() + i * N;
            const double* g = n.grad.data() + i * N;
            double dot = 0.0;
            for (int64_t j = 0; j < N; ++j) dot += g[j] * p[j];
            double* d = pg.data() + i * N;
            for (int64_t j = 0; j < N; ++j) d[j] += p[j] * (g[j] - dot);
        }
    });
}

// LayerNorm over each row, no learned affine (modulation is applied outside).
inline Tensor layer_norm_rows(const Tensor& x, double eps = 1e-6) {
    const int64_t L = x.rows(), D = x.cols();
    std::vector<double> out(size_t(L * D));
    std::vector<double> inv_sigma(static_cast<size_t>(L));
    const auto& xv = x.data();
    for (int64_t i = 0; i < L; ++i) {
        const double* row = xv.data() + i * D;
        double mean = 0.0;
        for (int64_t j = 0; j < D; ++j) mean += row[j];
        mean /= double(D);
        double var = 0.0;
        for (int64_t j = 0; j < D; ++j) {
            const double c = row[j] - mean;
            var += c * c;
        }
        var /= double(D);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_sigma[size_t(i)] = is;
        double* orow = out.data() + i * D;
        for (int64_t j = 0; j < D; ++j) orow[j] = (row[j] - mean) * is;
    }
    return detail::make_op(L, D, std::move(out), {x},
                           [L, D, inv_sigma = std::move(inv_sigma)](TensorNode& n) {
                               auto& pg = n.parents[0]->grad_buf();
                               for (int64_t i = 0; i < L; ++i) {
                                   const double* y = n.value.data() + i * D;
                                   const double* g = n.grad.data() + i * D;
                                   double gm = 0.0, gym = 0.0;
                                   for (int64_t j = 0; j < D; ++j) {
                                       gm += g[j];
                                       gym += g[j] * y[j];
                                   }
                                   gm /= double(D);
                                   gym /= double(D);
                                   const double is = inv_sigma[size_t(i)];
                                   double* d = pg.data() + i * D;
                                   for (int64_t j = 0; j < D; ++j)
                                       d[j] += is * (g[j] - gm - y[j] * gym);
                               }
                           });
}

inline Tensor silu(const Tensor& x) {
    std::vector<double> out(x.data());
    for (auto& v : out) {
        const double s = 1.0 / (1.0 + std::exp(-v));
        v = v * s;
    }
    return detail::make_op(x.rows(), x.cols(), std::move(out), {x}, [](TensorNode& n) {
        auto& pg = n.parents[0]->grad_buf();
        const auto& xv = n.parents[0]->value;
        for (size_t i = 0; i < n.grad.size(); ++i) {
            const double s = 1.0 / (1.0 + std::exp(-xv[i]));
            pg[i] += n.grad[i] * s * (1.0 + xv[i] * (1.0 - s));
        }
    });
}

// Pairwise rotation: columns (2k, 2k+1) rotated by the per-row angle whose
// (cos, sin) live at pair index k. Tables are (rows * cols/2) row-major and
// shared so training steps do not copy them into every closure. Rotations are
// orthogonal, so the backward pass rotates the gradient by the negated angle.
inline Tensor rope_rotate(const Tensor& x, std::shared_ptr<const std::vector<double>> cos_tab,
                          std::shared_ptr<const std::vector<double>> sin_tab) {
    const int64_t L = x.rows(), D = x.cols();
    if (D % 2 != 0) throw runtime_error("rope_rotate: odd width " + std::to_string(D));
    const int64_t H = D / 2;
    if (int64_t(cos_tab->size()) != L * H || int64_t(sin_tab->size()) != L * H)
        throw runtime_error("rope_rotate: table size mismatch (" + std::to_string(cos_tab->size()) +
                            " vs " + std::to_string(L * H) + ")");
    std::vector<double> out(size_t(L * D));
    const auto& xv = x.data();
    for (int64_t i = 0; i < L; ++i) {
        const double* row = xv.data() + i * D;
        double* orow = out.data() + i * D;
        const double* c = cos_tab->data() + i * H;
        const double* s = sin_tab->data() + i * H;
        for (int64_t k = 0; k < H; ++k) {
            const double a = row[2 * k], b = row[2 * k + 1];
            orow[2 * k] = a * c[k] - b * s[k];
            orow[2 * k + 1] = a * s[k] + b * c[k];
        }
    }
    return detail::make_op(L, D, std::move(out), {x}, [L, D, H, cos_tab, sin_tab](TensorNode& n) {
        auto& pg = n.parents[0]->grad_buf();
        for (int64_t i = 0; i < L; ++i) {
            const double* g = n.grad.data() + i * D;
            double* d = pg.data() + i * D;
            const double* c = cos_tab->data() + i * H;
            const double* s = sin_tab->data() + i * H;
            for (int64_t k = 0; k < H; ++k) {
                const double ga = g[2 * k], gb = g[2 * k + 1];
                d[2 * k] += ga * c[k] + gb * s[k];
                d[2 * k + 1] += -ga * s[k] + gb * c[k];
            }
        }
    });
}

inline Tensor sum_all(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    return detail::make_op(1, 1, {acc}, {x}, [](TensorNode& n) {
        auto& pg = n.parents[0]->grad_buf();
        const double g = n.grad[0];
        for (auto& v : pg) v += g;
    });
}

// Mean squared error over rows with mask weight 1; rows with weight 0 are
// excluded exactly (their term is never added). target carries no gradient.
inline Tensor mse_masked(const Tensor& pred, const Tensor& target,
                         const std::vector<double>& row_mask) {
    detail::check_same_shape(pred, target, "mse_masked");
    const int64_t L = pred.rows(), D = pred.cols();
    if (int64_t(row_mask.size()) != L)
        throw runtime_error("mse_masked: mask size " + std::to_string(row_mask.size()) +
                            " != rows " + std::to_string(L));
    int64_t active = 0;
    for (double m : row_mask)
        if (m != 0.0) ++active;
    if (active == 0) throw runtime_error("mse_masked: empty mask");
    const double denom = double(active * D);
    double acc = 0.0;
    const auto& pv = pred.data();
    const auto& tv = target.data();
    for (int64_t i = 0; i < L; ++i) {
        if (row_mask[size_t(i)] == 0.0) continue;
        for (int64_t j = 0; j < D; ++j) {
            const double d = pv[size_t(i * D + j)] - tv[size_t(i * D + j)];
            acc += d * d;
        }
    }
    return detail::make_op(1, 1, {acc / denom}, {pred, target},
                           [L, D, denom, row_mask](TensorNode& n) {
                               const double g = n.grad[0];
                               const auto& pv2 = n.parents[0]->value;
                               const auto& tv2 = n.parents[1]->value;
                               if (n.parents[0]->requires_grad) {
                                   auto& pg = n.parents[0]->grad_buf();
                                   for (int64_t i = 0; i < L; ++i) {
                                       if (row_mask[size_t(i)] == 0.0) continue;
                                       for (int64_t j = 0; j < D; ++j) {
                                           const size_t k = size_t(i * D + j);
                                           pg[k] += g * 2.0 * (pv2[k] - tv2[k]) / denom;
                                       }
                                   }
                               }
                           });
}

inline void check_finite(const Tensor& t, const std::string& context) {
    for (double v : t.data())
        if (!std::isfinite(v))
            throw runtime_error(context + ": non-finite activation detected");
}

}  // namespace lynx
