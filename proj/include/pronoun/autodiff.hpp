#pragma once

#include <cmath>
#include <functional>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pronoun/error.hpp"
#include "pronoun/rng.hpp"

namespace pronoun {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// A named trainable tensor. Vectors are stored as 1 x n rows.
struct Parameter {
    std::string name;
    Mat value;
    Mat grad;
    bool is_vector = false;
    bool trainable = true;

    void zero_grad() { grad = Mat::Zero(value.rows(), value.cols()); }
};

class Tape;

struct Var {
    Tape* tape = nullptr;
    int id = -1;

    const Mat& value() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
};

// Records operations in evaluation order; backward() replays them in reverse.
class Tape {
public:
    Tape() = default;
    // record == false: evaluation only, no gradients are tracked.
    explicit Tape(bool record) : record_(record) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Mat v) { return push(std::move(v), false, nullptr); }

    Var param(Parameter& p) {
        Node n;
        n.external = &p.value;
        n.requires_grad = record_ && p.trainable;
        n.sink = n.requires_grad ? &p : nullptr;
        nodes_.push_back(std::move(n));
        return {this, static_cast<int>(nodes_.size() - 1)};
    }

    const Mat& value(int id) const {
        const Node& n = nodes_[static_cast<std::size_t>(id)];
        return n.external ? *n.external : n.own;
    }

    bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

    // Gradient buffer of a node, allocated on first use.
    Mat& grad(int id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.grad.size() == 0) {
            const Mat& v = value(id);
            n.grad = Mat::Zero(v.rows(), v.cols());
        }
        return n.grad;
    }

    bool has_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad.size() != 0; }

    // Appends an op output. `back` reads the output gradient and accumulates
    // into its inputs; it is dropped when no input requires a gradient.
    Var push(Mat v, bool requires_grad, std::function<void(Tape&, int)> back) {
        Node n;
        n.own = std::move(v);
        n.requires_grad = requires_grad;
        if (requires_grad) n.backward = std::move(back);
        nodes_.push_back(std::move(n));
        return {this, static_cast<int>(nodes_.size() - 1)};
    }

    // Reverse sweep from a 1 x 1 loss with upstream gradient `seed`. Parameter
    // gradients are added into Parameter::grad.
    void backward(Var loss, double seed = 1.0) {
        if (loss.tape != this || loss.id < 0) throw UsageError("backward called without a recorded forward");
        if (done_) throw UsageError("backward already run on this tape");
        const Mat& lv = value(loss.id);
        if (lv.rows() != 1 || lv.cols() != 1) throw UsageError("backward expects a scalar loss");
        done_ = true;
        if (!requires_grad(loss.id)) return;
        grad(loss.id)(0, 0) += seed;
        for (int id = loss.id; id >= 0; --id) {
            Node& n = nodes_[static_cast<std::size_t>(id)];
            if (!n.requires_grad || n.grad.size() == 0) continue;
            if (n.backward) n.backward(*this, id);
            if (n.sink) {
                if (n.sink->grad.rows() != n.grad.rows() || n.sink->grad.cols() != n.grad.cols())
                    n.sink->zero_grad();
                n.sink->grad += n.grad;
            }
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Mat own;
        const Mat* external = nullptr;
        Mat grad;
        bool requires_grad = false;
        Parameter* sink = nullptr;
        std::function<void(Tape&, int)> backward;
    };
    std::vector<Node> nodes_;
    bool record_ = true;
    bool done_ = false;
};

inline const Mat& Var::value() const {
    if (!tape) throw UsageError("uninitialized variable");
    return tape->value(id);
}

namespace detail {

inline Tape& same_tape(Var a, Var b) {
    if (a.tape != b.tape || !a.tape) throw UsageError("variables from different tapes");
    return *a.tape;
}

inline void check_shape(bool ok, const char* op) {
    if (!ok) throw UsageError(std::string("shape mismatch in ") + op);
}

} // namespace detail

// A * B
inline Var matmul(Var a, Var b) {
    Tape& t = detail::same_tape(a, b);
    detail::check_shape(a.cols() == b.rows(), "matmul");
    Mat out = a.value() * b.value();
    const bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
    return t.push(std::move(out), rg, [a, b](Tape& t, int self) {
        const Mat& g = t.grad(self);
        if (t.requires_grad(a.id)) t.grad(a.id).noalias() += g * t.value(b.id).transpose();
        if (t.requires_grad(b.id)) t.grad(b.id).noalias() += t.value(a.id).transpose() * g;
    });
}

// A * B^T
inline Var matmul_nt(Var a, Var b) {
    Tape& t = detail::same_tape(a, b);
    detail::check_shape(a.cols() == b.cols(), "matmul_nt");
    Mat out = a.value() * b.value().transpose();
    const bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
    return t.push(std::move(out), rg, [a, b](Tape& t, int self) {
        const Mat& g = t.grad(self);
        if (t.requires_grad(a.id)) t.grad(a.id).noalias() += g * t.value(b.id);
        if (t.requires_grad(b.id)) t.grad(b.id).noalias() += g.transpose() * t.value(a.id);
    });
}

inline Var add(Var a, Var b) {
    Tape& t = detail::same_tape(a, b);
    detail::check_shape(a.rows() == b.rows() && a.cols() == b.cols(), "add");
    Mat out = a.value() + b.value();
    const bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
    return t.push(std::move(out), rg, [a, b](Tape& t, int self) {
        const Mat& g = t.grad(self);
        if (t.requires_grad(a.id)) t.grad(a.id) += g;
        if (t.requires_grad(b.id)) t.grad(b.id) += g;
    });
}

// Adds a 1 x n row to every row of a.
inline Var add_row(Var a, Var row) {
    Tape& t = detail::same_tape(a, row);
    detail::check_shape(row.rows() == 1 && row.cols() == a.cols(), "add_row");
    Mat out = a.value().rowwise() + row.value().row(0);
    const bool rg = t.requires_grad(a.id) || t.requires_grad(row.id);
    return t.push(std::move(out), rg, [a, row](Tape& t, int self) {
        const Mat& g = t.grad(self);
        if (t.requires_grad(a.id)) t.grad(a.id) += g;
        if (t.requires_grad(row.id)) t.grad(row.id) += g.colwise().sum();
    });
}

inline Var scale(Var a, double s) {
    Tape& t = *a.tape;
    return t.push(a.value() * s, t.requires_grad(a.id), [a, s](Tape& t, int self) { t.grad(a.id) += t.grad(self) * s; });
}

// Exact GELU: x * Phi(x).
inline Var gelu(Var a) {
    Tape& t = *a.tape;
    const Mat& x = a.value();
    Mat out = x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2)); });
    return t.push(std::move(out), t.requires_grad(a.id), [a](Tape& t, int self) {
        const Mat& x = t.value(a.id);
        const Mat d = x.unaryExpr([](double v) {
            const double pdf = std::exp(-0.5 * v * v) * std::numbers::inv_sqrtpi / std::numbers::sqrt2;
            return 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2)) + v * pdf;
        });
        t.grad(a.id).array() += t.grad(self).array() * d.array();
    });
}

// Row-wise LayerNorm with affine gamma, beta (both 1 x n).
inline Var layer_norm(Var x, Var gamma, Var beta, double eps) {
    Tape& t = detail::same_tape(x, gamma);
    detail::same_tape(x, beta);
    const Eigen::Index n = x.cols();
    detail::check_shape(gamma.rows() == 1 && gamma.cols() == n && beta.rows() == 1 && beta.cols() == n, "layer_norm");
    const Mat& xv = x.value();
    Mat xhat(xv.rows(), n);
    Eigen::VectorXd inv_std(xv.rows());
    for (Eigen::Index r = 0; r < xv.rows(); ++r) {
        const double mu = xv.row(r).mean();
        const double var = (xv.row(r).array() - mu).square().mean();
        inv_std(r) = 1.0 / std::sqrt(var + eps);
        xhat.row(r) = (xv.row(r).array() - mu) * inv_std(r);
    }
    Mat out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
    const bool rg = t.requires_grad(x.id) || t.requires_grad(gamma.id) || t.requires_grad(beta.id);
    return t.push(std::move(out), rg,
                  [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, int self) {
                      const Mat& g = t.grad(self);
                      if (t.requires_grad(gamma.id)) t.grad(gamma.id) += (g.array() * xhat.array()).colwise().sum().matrix();
                      if (t.requires_grad(beta.id)) t.grad(beta.id) += g.colwise().sum();
                      if (!t.requires_grad(x.id)) return;
                      const double n = static_cast<double>(g.cols());
                      const Mat gx = g.array().rowwise() * t.value(gamma.id).row(0).array();
                      Mat& dx = t.grad(x.id);
                      for (Eigen::Index r = 0; r < g.rows(); ++r) {
                          const double m1 = gx.row(r).sum() / n;
                          const double m2 = gx.row(r).dot(xhat.row(r)) / n;
                          dx.row(r).array() += inv_std(r) * (gx.row(r).array() - m1 - xhat.row(r).array() * m2);
                      }
                  });
}

// Row softmax where columns with key_valid[c] == false get probability 0.
inline Var masked_softmax_rows(Var s, const std::vector<bool>& key_valid) {
    Tape& t = *s.tape;
    const Mat& v = s.value();
    detail::check_shape(static_cast<Eigen::Index>(key_valid.size()) == v.cols(), "masked_softmax_rows");
    Mat p(v.rows(), v.cols());
    for (Eigen::Index r = 0; r < v.rows(); ++r) {
        double mx = -INFINITY;
        for (Eigen::Index c = 0; c < v.cols(); ++c)
            if (key_valid[static_cast<std::size_t>(c)]) mx = std::max(mx, v(r, c));
        if (mx == -INFINITY) throw UsageError("softmax row with every key masked");
        double z = 0.0;
        for (Eigen::Index c = 0; c < v.cols(); ++c) {
            const double e = key_valid[static_cast<std::size_t>(c)] ? std::exp(v(r, c) - mx) : 0.0;
            p(r, c) = e;
            z += e;
        }
        p.row(r) /= z;
    }
    return t.push(std::move(p), t.requires_grad(s.id), [s](Tape& t, int self) {
        const Mat& g = t.grad(self);
        const Mat& p = t.value(self);
        const Eigen::VectorXd dot = (g.array() * p.array()).rowwise().sum();
        t.grad(s.id).array() += p.array() * (g.array().colwise() - dot.array());
    });
}

// Inverted dropout; identity when p == 0.
inline Var dropout(Var a, double p, Rng& rng) {
    if (p <= 0.0) return a;
    if (p >= 1.0) throw ConfigError("dropout probability must be < 1");
    Tape& t = *a.tape;
    const Mat& v = a.value();
    Mat mask(v.rows(), v.cols());
    const double keep = 1.0 / (1.0 - p);
    for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = rng.uniform() < p ? 0.0 : keep;
    Mat out = v.cwiseProduct(mask);
    return t.push(std::move(out), t.requires_grad(a.id), [a, mask = std::move(mask)](Tape& t, int self) {
        t.grad(a.id) += t.grad(self).cwiseProduct(mask);
    });
}

inline Var cols(Var a, Eigen::Index start, Eigen::Index count) {
    Tape& t = *a.tape;
    detail::check_shape(start >= 0 && start + count <= a.cols(), "cols");
    Mat out = a.value().middleCols(start, count);
    return t.push(std::move(out), t.requires_grad(a.id), [a, start, count](Tape& t, int self) {
        t.grad(a.id).middleCols(start, count) += t.grad(self);
    });
}

inline Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw UsageError("concat_cols of nothing");
    Tape& t = *parts.front().tape;
    Eigen::Index total = 0;
    bool rg = false;
    for (const auto& p : parts) {
        detail::same_tape(parts.front(), p);
        detail::check_shape(p.rows() == parts.front().rows(), "concat_cols");
        total += p.cols();
        rg |= t.requires_grad(p.id);
    }
    Mat out(parts.front().rows(), total);
    Eigen::Index at = 0;
    for (const auto& p : parts) {
        out.middleCols(at, p.cols()) = p.value();
        at += p.cols();
    }
    return t.push(std::move(out), rg, [parts](Tape& t, int self) {
        const Mat& g = t.grad(self);
        Eigen::Index at = 0;
        for (const auto& p : parts) {
            const auto w = t.value(p.id).cols();
            if (t.requires_grad(p.id)) t.grad(p.id) += g.middleCols(at, w);
            at += w;
        }
    });
}

// Rows of a table selected by index.
inline Var gather_rows(Var table, std::vector<Eigen::Index> idx) {
    Tape& t = *table.tape;
    const Mat& v = table.value();
    Mat out(static_cast<Eigen::Index>(idx.size()), v.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= v.rows()) throw UsageError("gather_rows index out of range");
        out.row(static_cast<Eigen::Index>(i)) = v.row(idx[i]);
    }
    return t.push(std::move(out), t.requires_grad(table.id), [table, idx = std::move(idx)](Tape& t, int self) {
        const Mat& g = t.grad(self);
        Mat& d = t.grad(table.id);
        for (std::size_t i = 0; i < idx.size(); ++i) d.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
    });
}

// 1 x n mean of the selected rows.
inline Var mean_rows(Var a, std::vector<Eigen::Index> idx) {
    if (idx.empty()) throw UsageError("mean_rows over no rows");
    Tape& t = *a.tape;
    const Mat& v = a.value();
    Mat out = Mat::Zero(1, v.cols());
    for (auto r : idx) {
        if (r < 0 || r >= v.rows()) throw UsageError("mean_rows index out of range");
        out.row(0) += v.row(r);
    }
    const double inv = 1.0 / static_cast<double>(idx.size());
    out *= inv;
    return t.push(std::move(out), t.requires_grad(a.id), [a, idx = std::move(idx), inv](Tape& t, int self) {
        const Mat& g = t.grad(self);
        Mat& d = t.grad(a.id);
        for (auto r : idx) d.row(r) += g.row(0) * inv;
    });
}

// Stacks 1 x n rows into a k x n matrix.
inline Var stack_rows(const std::vector<Var>& rows) {
    if (rows.empty()) throw UsageError("stack_rows of nothing");
    Tape& t = *rows.front().tape;
    const auto n = rows.front().cols();
    bool rg = false;
    Mat out(static_cast<Eigen::Index>(rows.size()), n);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        detail::same_tape(rows.front(), rows[i]);
        detail::check_shape(rows[i].rows() == 1 && rows[i].cols() == n, "stack_rows");
        out.row(static_cast<Eigen::Index>(i)) = rows[i].value().row(0);
        rg |= t.requires_grad(rows[i].id);
    }
    return t.push(std::move(out), rg, [rows](Tape& t, int self) {
        const Mat& g = t.grad(self);
        for (std::size_t i = 0; i < rows.size(); ++i)
            if (t.requires_grad(rows[i].id)) t.grad(rows[i].id).row(0) += g.row(static_cast<Eigen::Index>(i));
    });
}

// Elementwise sum of all entries, as a 1 x 1.
inline Var sum_all(Var a) {
    Tape& t = *a.tape;
    Mat out(1, 1);
    out(0, 0) = a.value().sum();
    return t.push(std::move(out), t.requires_grad(a.id),
                  [a](Tape& t, int self) { t.grad(a.id).array() += t.grad(self)(0, 0); });
}

// Elementwise product.
inline Var mul(Var a, Var b) {
    Tape& t = detail::same_tape(a, b);
    detail::check_shape(a.rows() == b.rows() && a.cols() == b.cols(), "mul");
    Mat out = a.value().cwiseProduct(b.value());
    const bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
    return t.push(std::move(out), rg, [a, b](Tape& t, int self) {
        const Mat& g = t.grad(self);
        if (t.requires_grad(a.id)) t.grad(a.id) += g.cwiseProduct(t.value(b.id));
        if (t.requires_grad(b.id)) t.grad(b.id) += g.cwiseProduct(t.value(a.id));
    });
}

// Row-wise softmax probabilities of k x C logits, numerically stable.
inline Mat softmax_rows(const Mat& logits) {
    Mat p(logits.rows(), logits.cols());
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        const double mx = logits.row(r).maxCoeff();
        p.row(r) = (logits.row(r).array() - mx).exp();
        p.row(r) /= p.row(r).sum();
    }
    return p;
}

// Mean softmax cross-entropy over the rows of k x C logits.
inline Var softmax_cross_entropy_mean(Var logits, std::span<const int> labels) {
    Tape& t = *logits.tape;
    const Mat& z = logits.value();
    detail::check_shape(static_cast<std::size_t>(z.rows()) == labels.size() && z.rows() > 0, "cross_entropy");
    double loss = 0.0;
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
        const int y = labels[static_cast<std::size_t>(r)];
        if (y < 0 || y >= z.cols()) throw UsageError("label out of range");
        const double mx = z.row(r).maxCoeff();
        const double lse = mx + std::log((z.row(r).array() - mx).exp().sum());
        loss += lse - z(r, y);
    }
    Mat out(1, 1);
    out(0, 0) = loss / static_cast<double>(z.rows());
    std::vector<int> y(labels.begin(), labels.end());
    return t.push(std::move(out), t.requires_grad(logits.id), [logits, y = std::move(y)](Tape& t, int self) {
        const double g = t.grad(self)(0, 0);
        Mat d = softmax_rows(t.value(logits.id));
        for (std::size_t r = 0; r < y.size(); ++r) d(static_cast<Eigen::Index>(r), y[r]) -= 1.0;
        t.grad(logits.id) += d * (g / static_cast<double>(y.size()));
    });
}

} // namespace pronoun
