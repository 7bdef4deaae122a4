#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. A Tape records every operation of one forward pass; calling
// backward() on a 1x1 result walks the record in reverse and accumulates
// gradients into every node that needs one.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <numbers>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace spkmask::ag {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class Tape;

class Var {
public:
    Var() = default;
    Var(Tape* tape, int id) : tape_(tape), id_(id) {}

    Tape* tape() const { return tape_; }
    int id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

    const Mat& value() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
    double scalar() const { return value()(0, 0); }

private:
    Tape* tape_ = nullptr;
    int id_ = -1;
};

class Tape {
public:
    using Backward = std::function<void(Tape&, int self)>;

    // With record == false no backward closures are kept; used for inference.
    explicit Tape(bool record = true) : record_(record) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const { return record_; }

    Var constant(Mat value) { return push(std::move(value), false, {}); }

    Var leaf(Mat value) { return push(std::move(value), record_, {}); }

    // Leaf bound to an external parameter tensor. Repeated requests for the
    // same index reuse one node so gradients accumulate in one place.
    Var parameter(std::size_t index, const Mat& value) {
        if (auto it = param_nodes_.find(index); it != param_nodes_.end()) return Var(this, it->second);
        Var v = push(value, record_, {});
        param_nodes_.emplace(index, v.id());
        return v;
    }

    Var push(Mat value, bool needs_grad, Backward backward) {
        nodes_.push_back(Node{std::move(value), Mat(), needs_grad && record_,
                              (needs_grad && record_) ? std::move(backward) : Backward{}});
        return Var(this, static_cast<int>(nodes_.size()) - 1);
    }

    const Mat& value(int id) const { return nodes_[id].value; }
    bool needs_grad(int id) const { return nodes_[id].needs_grad; }
    bool needs_grad(Var v) const { return nodes_[v.id()].needs_grad; }

    const Mat& grad(int id) const { return nodes_[id].grad; }
    bool has_grad(int id) const { return nodes_[id].grad.size() > 0; }

    // Adds delta into the gradient of node id (no-op if it needs none).
    template <typename Derived>
    void accumulate(int id, const Eigen::MatrixBase<Derived>& delta) {
        Node& n = nodes_[id];
        if (!n.needs_grad) return;
        if (n.grad.size() == 0) {
            n.grad = delta;
        } else {
            n.grad += delta;
        }
    }

    Mat& grad_ref(int id) {
        Node& n = nodes_[id];
        if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
        return n.grad;
    }

    void backward(Var output) {
        if (!record_) throw std::logic_error("backward() on a non-recording tape");
        const int out = output.id();
        if (nodes_[out].value.size() != 1) throw std::invalid_argument("backward() needs a 1x1 output");
        nodes_[out].grad = Mat::Ones(1, 1);
        for (int i = out; i >= 0; --i) {
            Node& n = nodes_[i];
            if (n.backward && n.grad.size() > 0) n.backward(*this, i);
        }
    }

    // Parameter index -> node id for every parameter touched by this pass.
    const std::unordered_map<std::size_t, int>& parameter_nodes() const { return param_nodes_; }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Mat value;
        Mat grad;
        bool needs_grad;
        Backward backward;
    };

    bool record_;
    std::vector<Node> nodes_;
    std::unordered_map<std::size_t, int> param_nodes_;
};

inline const Mat& Var::value() const { return tape_->value(id_); }

namespace detail {

inline void check_same_tape(Var a, Var b) {
    if (a.tape() != b.tape()) throw std::invalid_argument("operands recorded on different tapes");
}

inline void check_shape(bool ok, const char* op) {
    if (!ok) throw std::invalid_argument(std::string("shape mismatch in ") + op);
}

constexpr double kGeluC = 0.7978845608028654; // sqrt(2/pi)

} // namespace detail

inline Var matmul(Var a, Var b) {
    detail::check_same_tape(a, b);
    detail::check_shape(a.cols() == b.rows(), "matmul");
    Tape& t = *a.tape();
    const int ia = a.id(), ib = b.id();
    return t.push(a.value() * b.value(), t.needs_grad(ia) || t.needs_grad(ib), [ia, ib](Tape& t, int self) {
        const Mat& g = t.grad(self);
        if (t.needs_grad(ia)) t.grad_ref(ia).noalias() += g * t.value(ib).transpose();
        if (t.needs_grad(ib)) t.grad_ref(ib).noalias() += t.value(ia).transpose() * g;
    });
}

// a * b^T
inline Var matmul_nt(Var a, Var b) {
    detail::check_same_tape(a, b);
    detail::check_shape(a.cols() == b.cols(), "matmul_nt");
    Tape& t = *a.tape();
    const int ia = a.id(), ib = b.id();
    return t.push(a.value() * b.value().transpose(), t.needs_grad(ia) || t.needs_grad(ib),
                  [ia, ib](Tape& t, int self) {
                      const Mat& g = t.grad(self);
                      if (t.needs_grad(ia)) t.grad_ref(ia).noalias() += g * t.value(ib);
                      if (t.needs_grad(ib)) t.grad_ref(ib).noalias() += g.transpose() * t.value(ia);
                  });
}

inline Var add(Var a, Var b) {
    detail::check_same_tape(a, b);
    detail::check_shape(a.rows() == b.rows() && a.cols() == b.cols(), "add");
    Tape& t = *a.tape();
    const int ia = a.id(), ib = b.id();
    return t.push(a.value() + b.value(), t.needs_grad(ia) || t.needs_grad(ib), [ia, ib](Tape& t, int self) {
        t.accumulate(ia, t.grad(self));
        t.accumulate(ib, t.grad(self));
    });
}

// a (n x m) + row (1 x m) broadcast over rows.
inline Var add_row(Var a, Var row) {
    detail::check_same_tape(a, row);
    detail::check_shape(row.rows() == 1 && row.cols() == a.cols(), "add_row");
    Tape& t = *a.tape();
    const int ia = a.id(), ib = row.id();
    Mat out = a.value();
    out.rowwise() += row.value().row(0);
    return t.push(std::move(out), t.needs_grad(ia) || t.needs_grad(ib), [ia, ib](Tape& t, int self) {
        t.accumulate(ia, t.grad(self));
        if (t.needs_grad(ib)) t.accumulate(ib, t.grad(self).colwise().sum());
    });
}

inline Var mul(Var a, Var b) {
    detail::check_same_tape(a, b);
    detail::check_shape(a.rows() == b.rows() && a.cols() == b.cols(), "mul");
    Tape& t = *a.tape();
    const int ia = a.id(), ib = b.id();
    return t.push(a.value().cwiseProduct(b.value()), t.needs_grad(ia) || t.needs_grad(ib),
                  [ia, ib](Tape& t, int self) {
                      const Mat& g = t.grad(self);
                      if (t.needs_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
                      if (t.needs_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
                  });
}

inline Var scale(Var a, double s) {
    Tape& t = *a.tape();
    const int ia = a.id();
    return t.push(a.value() * s, t.needs_grad(ia), [ia, s](Tape& t, int self) { t.accumulate(ia, t.grad(self) * s); });
}

// tanh approximation; smooth everywhere, which finite-difference checks need.
inline Var gelu(Var a) {
    Tape& t = *a.tape();
    const int ia = a.id();
    const Mat& x = a.value();
    Mat th = (detail::kGeluC * (x.array() + 0.044715 * x.array().cube())).tanh().matrix();
    Mat out = (0.5 * x.array() * (1.0 + th.array())).matrix();
    return t.push(std::move(out), t.needs_grad(ia), [ia, th = std::move(th)](Tape& t, int self) {
        const auto x = t.value(ia).array();
        const auto dinner = detail::kGeluC * (1.0 + 3.0 * 0.044715 * x.square());
        const auto d = 0.5 * (1.0 + th.array()) + 0.5 * x * (1.0 - th.array().square()) * dinner;
        t.accumulate(ia, (t.grad(self).array() * d).matrix());
    });
}

inline Var sigmoid(Var a) {
    Tape& t = *a.tape();
    const int ia = a.id();
    Mat out = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
    return t.push(std::move(out), t.needs_grad(ia), [ia](Tape& t, int self) {
        const auto y = t.value(self).array();
        t.accumulate(ia, (t.grad(self).array() * y * (1.0 - y)).matrix());
    });
}

// Row-wise softmax. With causal == true, entry (i, j) for j > i is masked out.
inline Var softmax_rows(Var a, bool causal = false) {
    Tape& t = *a.tape();
    const int ia = a.id();
    const Mat& x = a.value();
    Mat y = Mat::Zero(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const Eigen::Index n = causal ? std::min<Eigen::Index>(i + 1, x.cols()) : x.cols();
        auto row = x.row(i).head(n);
        const double mx = row.maxCoeff();
        auto e = (row.array() - mx).exp();
        y.row(i).head(n) = e / e.sum();
    }
    return t.push(std::move(y), t.needs_grad(ia), [ia](Tape& t, int self) {
        const Mat& y = t.value(self);
        const Mat& g = t.grad(self);
        Mat gy = g.cwiseProduct(y);
        Eigen::VectorXd dots = gy.rowwise().sum();
        Mat dx = gy - (y.array().colwise() * dots.array()).matrix();
        t.accumulate(ia, dx);
    });
}

// Row-wise layer normalization with affine gain and bias (both 1 x n).
inline Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5) {
    detail::check_same_tape(x, gamma);
    detail::check_shape(gamma.cols() == x.cols() && beta.cols() == x.cols(), "layer_norm");
    Tape& t = *x.tape();
    const int ix = x.id(), ig = gamma.id(), ib = beta.id();
    const Mat& v = x.value();
    const Eigen::Index n = v.cols();
    Eigen::VectorXd mean = v.rowwise().mean();
    Mat centered = v.colwise() - mean;
    Eigen::VectorXd inv_std = ((centered.array().square().rowwise().sum() / double(n)) + eps).rsqrt();
    Mat xhat = (centered.array().colwise() * inv_std.array()).matrix();
    Mat out = (xhat.array().rowwise() * gamma.value().row(0).array()).matrix();
    out.rowwise() += beta.value().row(0);
    const bool needs = t.needs_grad(ix) || t.needs_grad(ig) || t.needs_grad(ib);
    return t.push(std::move(out), needs,
                  [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, int self) {
                      const Mat& g = t.grad(self);
                      if (t.needs_grad(ig)) t.accumulate(ig, g.cwiseProduct(xhat).colwise().sum());
                      if (t.needs_grad(ib)) t.accumulate(ib, g.colwise().sum());
                      if (t.needs_grad(ix)) {
                          const double n = static_cast<double>(g.cols());
                          Mat gx = (g.array().rowwise() * t.value(ig).row(0).array()).matrix();
                          Eigen::VectorXd m1 = gx.rowwise().mean();
                          Eigen::VectorXd m2 = gx.cwiseProduct(xhat).rowwise().sum() / n;
                          Mat dx = gx.colwise() - m1;
                          dx -= (xhat.array().colwise() * m2.array()).matrix();
                          dx = (dx.array().colwise() * inv_std.array()).matrix();
                          t.accumulate(ix, dx);
                      }
                  });
}

inline Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
    detail::check_shape(start >= 0 && start + count <= a.cols(), "slice_cols");
    Tape& t = *a.tape();
    const int ia = a.id();
    return t.push(a.value().middleCols(start, count), t.needs_grad(ia), [ia, start, count](Tape& t, int self) {
        t.grad_ref(ia).middleCols(start, count) += t.grad(self);
    });
}

inline Var slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
    detail::check_shape(start >= 0 && start + count <= a.rows(), "slice_rows");
    Tape& t = *a.tape();
    const int ia = a.id();
    return t.push(a.value().middleRows(start, count), t.needs_grad(ia), [ia, start, count](Tape& t, int self) {
        t.grad_ref(ia).middleRows(start, count) += t.grad(self);
    });
}

inline Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols of nothing");
    Tape& t = *parts.front().tape();
    const Eigen::Index rows = parts.front().rows();
    Eigen::Index cols = 0;
    bool needs = false;
    for (const Var& p : parts) {
        detail::check_shape(p.rows() == rows, "concat_cols");
        cols += p.cols();
        needs = needs || t.needs_grad(p);
    }
    Mat out(rows, cols);
    std::vector<std::pair<int, Eigen::Index>> spans;
    Eigen::Index c = 0;
    for (const Var& p : parts) {
        out.middleCols(c, p.cols()) = p.value();
        spans.emplace_back(p.id(), c);
        c += p.cols();
    }
    return t.push(std::move(out), needs, [spans = std::move(spans)](Tape& t, int self) {
        const Mat& g = t.grad(self);
        for (auto [id, start] : spans) {
            if (t.needs_grad(id)) t.accumulate(id, g.middleCols(start, t.value(id).cols()));
        }
    });
}

inline Var transpose(Var a) {
    Tape& t = *a.tape();
    const int ia = a.id();
    return t.push(a.value().transpose(), t.needs_grad(ia),
                  [ia](Tape& t, int self) { t.accumulate(ia, t.grad(self).transpose()); });
}

// Row-major reinterpretation to rows x cols.
inline Var reshape(Var a, Eigen::Index rows, Eigen::Index cols) {
    detail::check_shape(rows * cols == a.value().size(), "reshape");
    Tape& t = *a.tape();
    const int ia = a.id();
    Mat out = Eigen::Map<const Mat>(a.value().data(), rows, cols);
    return t.push(std::move(out), t.needs_grad(ia), [ia](Tape& t, int self) {
        const Mat& src = t.value(ia);
        t.accumulate(ia, Eigen::Map<const Mat>(t.grad(self).data(), src.rows(), src.cols()));
    });
}

// y[i] = a[i + 1], last row zero. Second tap of a width-2 convolution.
inline Var shift_rows_up(Var a) {
    Tape& t = *a.tape();
    const int ia = a.id();
    const Eigen::Index n = a.rows();
    Mat out = Mat::Zero(n, a.cols());
    if (n > 1) out.topRows(n - 1) = a.value().bottomRows(n - 1);
    return t.push(std::move(out), t.needs_grad(ia), [ia, n](Tape& t, int self) {
        if (n > 1) t.grad_ref(ia).bottomRows(n - 1) += t.grad(self).topRows(n - 1);
    });
}

// Inverted dropout with a caller-supplied keep mask already scaled by 1/(1-p).
inline Var apply_mask(Var a, Mat mask) {
    Tape& t = *a.tape();
    const int ia = a.id();
    Mat out = a.value().cwiseProduct(mask);
    return t.push(std::move(out), t.needs_grad(ia), [ia, mask = std::move(mask)](Tape& t, int self) {
        t.accumulate(ia, t.grad(self).cwiseProduct(mask));
    });
}

// Embedding lookup: row ids[i] of table.
inline Var gather_rows(Var table, const std::vector<int>& ids) {
    Tape& t = *table.tape();
    const int it = table.id();
    const Mat& tab = table.value();
    Mat out(static_cast<Eigen::Index>(ids.size()), tab.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= tab.rows()) throw std::out_of_range("token id out of vocabulary");
        out.row(static_cast<Eigen::Index>(i)) = tab.row(ids[i]);
    }
    return t.push(std::move(out), t.needs_grad(it), [it, ids](Tape& t, int self) {
        Mat& g = t.grad_ref(it);
        const Mat& gs = t.grad(self);
        for (std::size_t i = 0; i < ids.size(); ++i) g.row(ids[i]) += gs.row(static_cast<Eigen::Index>(i));
    });
}

// Sum over rows i with targets[i] != ignore of -log softmax(logits[i])[targets[i]].
inline Var cross_entropy_sum(Var logits, const std::vector<int>& targets, int ignore) {
    detail::check_shape(static_cast<std::size_t>(logits.rows()) == targets.size(), "cross_entropy_sum");
    Tape& t = *logits.tape();
    const int il = logits.id();
    const Mat& z = logits.value();
    Mat probs(z.rows(), z.cols());
    double total = 0.0;
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
        const double mx = z.row(i).maxCoeff();
        auto e = (z.row(i).array() - mx).exp();
        const double s = e.sum();
        probs.row(i) = e / s;
        const int y = targets[static_cast<std::size_t>(i)];
        if (y == ignore) continue;
        if (y < 0 || y >= z.cols()) throw std::out_of_range("target id out of vocabulary");
        total -= z(i, y) - mx - std::log(s);
    }
    Mat out(1, 1);
    out(0, 0) = total;
    return t.push(std::move(out), t.needs_grad(il), [il, targets, ignore, probs = std::move(probs)](Tape& t, int self) {
        const double g = t.grad(self)(0, 0);
        Mat d = probs;
        for (Eigen::Index i = 0; i < d.rows(); ++i) {
            const int y = targets[static_cast<std::size_t>(i)];
            if (y == ignore) {
                d.row(i).setZero();
            } else {
                d(i, y) -= 1.0;
            }
        }
        t.accumulate(il, d * g);
    });
}

// Mean binary cross-entropy between probabilities p and binary targets y,
// with p clipped to [clip, 1 - clip]. Gradient is zero where clipping binds.
inline Var bce_mean(Var probs, const Mat& targets, double clip) {
    detail::check_shape(probs.rows() == targets.rows() && probs.cols() == targets.cols(), "bce_mean");
    Tape& t = *probs.tape();
    const int ip = probs.id();
    const Mat& p = probs.value();
    const double n = static_cast<double>(p.size());
    double total = 0.0;
    Mat d(p.rows(), p.cols());
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
        for (Eigen::Index j = 0; j < p.cols(); ++j) {
            const double raw = p(i, j);
            const double pc = std::clamp(raw, clip, 1.0 - clip);
            const double y = targets(i, j);
            total += y * std::log(pc) + (1.0 - y) * std::log(1.0 - pc);
            const bool clipped = raw < clip || raw > 1.0 - clip;
            d(i, j) = clipped ? 0.0 : -(y / pc - (1.0 - y) / (1.0 - pc)) / n;
        }
    }
    Mat out(1, 1);
    out(0, 0) = -total / n;
    return t.push(std::move(out), t.needs_grad(ip), [ip, d = std::move(d)](Tape& t, int self) {
        t.accumulate(ip, d * t.grad(self)(0, 0));
    });
}

} // namespace spkmask::ag
