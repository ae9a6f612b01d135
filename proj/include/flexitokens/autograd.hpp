#pragma once

// Small tape-based reverse-mode autodiff over Eigen double matrices.
// The graph is rebuilt per sequence (segmentation changes every forward), so
// nodes are append-only and backward just walks the tape in reverse. Values
// are computed eagerly; each node keeps a closure that scatters its upstream
// gradient to its parents.

#include <Eigen/Dense>

#include <cmath>
#include <deque>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "flexitokens/common.hpp"

namespace ftok {

using Mat = Eigen::MatrixXd;

// Gradients for named parameters land here, indexed by parameter id.
class GradSink {
public:
    explicit GradSink(std::size_t n_params) : grads_(n_params) {}

    void add(std::size_t pid, const Mat& g) {
        Mat& slot = grads_[pid];
        if (slot.size() == 0)
            slot = g;
        else
            slot += g;
    }

    const Mat& grad(std::size_t pid) const { return grads_[pid]; }
    Mat& grad(std::size_t pid) { return grads_[pid]; }
    std::size_t size() const { return grads_.size(); }

    void clear() {
        for (auto& g : grads_) g.resize(0, 0);
    }

    // fixed-order merge keeps batch reductions bit-deterministic
    void merge(const GradSink& other) {
        for (std::size_t i = 0; i < grads_.size(); ++i)
            if (other.grads_[i].size() != 0) add(i, other.grads_[i]);
    }

private:
    std::vector<Mat> grads_;
};

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

class Tape {
public:
    // sink == nullptr means inference: params enter as plain constants and
    // backward() must not be called.
    explicit Tape(GradSink* sink = nullptr) : sink_(sink) {}

    bool grad_enabled() const { return sink_ != nullptr; }

    const Mat& val(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }

    std::size_t num_nodes() const { return nodes_.size(); }

    Var constant(Mat v) { return push(std::move(v), false, nullptr); }

    Var param(std::size_t pid, const Mat& value) {
        if (!grad_enabled()) return constant(value);
        GradSink* sink = sink_;
        return push(value, true, [sink, pid](Tape&, const Mat& g) { sink->add(pid, g); });
    }

    // ---- arithmetic ----

    Var add(Var a, Var b) {
        Mat v = val(a) + val(b);
        return push(std::move(v), needs(a) || needs(b), [a, b](Tape& t, const Mat& g) {
            t.accum(a, g);
            t.accum(b, g);
        });
    }

    // x: r x c, bias: 1 x c broadcast over rows
    Var add_bias(Var x, Var bias) {
        Mat v = val(x);
        v.rowwise() += val(bias).row(0);
        return push(std::move(v), needs(x) || needs(bias), [x, bias](Tape& t, const Mat& g) {
            t.accum(x, g);
            t.accum(bias, g.colwise().sum());
        });
    }

    Var scale(Var a, double s) {
        Mat v = val(a) * s;
        return push(std::move(v), needs(a), [a, s](Tape& t, const Mat& g) { t.accum(a, (g * s).eval()); });
    }

    Var matmul(Var a, Var b) {
        Mat v = val(a) * val(b);
        return push(std::move(v), needs(a) || needs(b), [a, b](Tape& t, const Mat& g) {
            if (t.needs(a)) t.accum(a, (g * t.val(b).transpose()).eval());
            if (t.needs(b)) t.accum(b, (t.val(a).transpose() * g).eval());
        });
    }

    // a * b^T
    Var matmul_nt(Var a, Var b) {
        Mat v = val(a) * val(b).transpose();
        return push(std::move(v), needs(a) || needs(b), [a, b](Tape& t, const Mat& g) {
            if (t.needs(a)) t.accum(a, (g * t.val(b)).eval());
            if (t.needs(b)) t.accum(b, (g.transpose() * t.val(a)).eval());
        });
    }

    Var mul_elem(Var a, Var b) {
        Mat v = val(a).cwiseProduct(val(b));
        return push(std::move(v), needs(a) || needs(b), [a, b](Tape& t, const Mat& g) {
            if (t.needs(a)) t.accum(a, g.cwiseProduct(t.val(b)).eval());
            if (t.needs(b)) t.accum(b, g.cwiseProduct(t.val(a)).eval());
        });
    }

    // ---- shape ops ----

    Var slice_cols(Var x, int c0, int n) {
        Mat v = val(x).middleCols(c0, n);
        int rows = static_cast<int>(val(x).rows());
        int cols = static_cast<int>(val(x).cols());
        return push(std::move(v), needs(x), [x, c0, n, rows, cols](Tape& t, const Mat& g) {
            t.accum_block(x, rows, cols, 0, c0, g);
        });
    }

    Var slice_rows(Var x, int r0, int n) {
        Mat v = val(x).middleRows(r0, n);
        int rows = static_cast<int>(val(x).rows());
        int cols = static_cast<int>(val(x).cols());
        return push(std::move(v), needs(x), [x, r0, rows, cols](Tape& t, const Mat& g) {
            t.accum_block(x, rows, cols, r0, 0, g);
        });
    }

    Var concat_cols(const std::vector<Var>& parts) {
        if (parts.empty()) throw ConfigError("concat_cols: empty input");
        Eigen::Index rows = val(parts[0]).rows();
        Eigen::Index cols = 0;
        bool any = false;
        for (Var p : parts) {
            cols += val(p).cols();
            any = any || needs(p);
        }
        Mat v(rows, cols);
        Eigen::Index off = 0;
        std::vector<int> offs;
        offs.reserve(parts.size());
        for (Var p : parts) {
            offs.push_back(static_cast<int>(off));
            v.middleCols(off, val(p).cols()) = val(p);
            off += val(p).cols();
        }
        std::vector<Var> ps = parts;
        return push(std::move(v), any, [ps, offs](Tape& t, const Mat& g) {
            for (std::size_t i = 0; i < ps.size(); ++i) {
                Eigen::Index w = t.val(ps[i]).cols();
                t.accum(ps[i], g.middleCols(offs[i], w).eval());
            }
        });
    }

    Var concat_rows(Var a, Var b) {
        Mat v(val(a).rows() + val(b).rows(), val(a).cols());
        v.topRows(val(a).rows()) = val(a);
        v.bottomRows(val(b).rows()) = val(b);
        return push(std::move(v), needs(a) || needs(b), [a, b](Tape& t, const Mat& g) {
            Eigen::Index ra = t.val(a).rows();
            t.accum(a, g.topRows(ra).eval());
            t.accum(b, g.bottomRows(g.rows() - ra).eval());
        });
    }

    // out.row(t) = x.row(idx[t]); rows may repeat (embedding lookup / upsample)
    Var gather_rows(Var x, std::vector<int> idx) {
        const Mat& xv = val(x);
        Mat v(static_cast<Eigen::Index>(idx.size()), xv.cols());
        for (std::size_t t = 0; t < idx.size(); ++t) v.row(static_cast<Eigen::Index>(t)) = xv.row(idx[t]);
        int rows = static_cast<int>(xv.rows());
        int cols = static_cast<int>(xv.cols());
        return push(std::move(v), needs(x), [x, idx = std::move(idx), rows, cols](Tape& t, const Mat& g) {
            if (!t.needs(x)) return;
            Mat& slot = t.grad_slot(x, rows, cols);
            for (std::size_t r = 0; r < idx.size(); ++r)
                slot.row(idx[r]) += g.row(static_cast<Eigen::Index>(r));
        });
    }

    // ---- nonlinearities ----

    Var gelu(Var x) {
        const Mat& xv = val(x);
        Mat v(xv.rows(), xv.cols());
        Mat dv(xv.rows(), xv.cols());
        const double c = 0.7978845608028654;  // sqrt(2/pi)
        const double a = 0.044715;
        for (Eigen::Index i = 0; i < xv.size(); ++i) {
            double u = xv(i);
            double inner = c * (u + a * u * u * u);
            double th = std::tanh(inner);
            v(i) = 0.5 * u * (1.0 + th);
            double sech2 = 1.0 - th * th;
            dv(i) = 0.5 * (1.0 + th) + 0.5 * u * sech2 * c * (1.0 + 3.0 * a * u * u);
        }
        return push(std::move(v), needs(x), [x, dv = std::move(dv)](Tape& t, const Mat& g) {
            t.accum(x, g.cwiseProduct(dv).eval());
        });
    }

    Var sigmoid(Var x) {
        const Mat& xv = val(x);
        Mat v = xv.unaryExpr([](double u) { return 1.0 / (1.0 + std::exp(-u)); });
        Mat y = v;
        return push(std::move(v), needs(x), [x, y = std::move(y)](Tape& t, const Mat& g) {
            t.accum(x, g.cwiseProduct((y.array() * (1.0 - y.array())).matrix()).eval());
        });
    }

    // scores: T x T; row i is normalized over columns 0..i, upper triangle -> 0
    Var softmax_causal(Var scores) {
        const Mat& s = val(scores);
        Eigen::Index T = s.rows();
        Mat a = Mat::Zero(T, T);
        for (Eigen::Index i = 0; i < T; ++i) {
            double m = s.row(i).head(i + 1).maxCoeff();
            double z = 0.0;
            for (Eigen::Index j = 0; j <= i; ++j) {
                a(i, j) = std::exp(s(i, j) - m);
                z += a(i, j);
            }
            a.row(i).head(i + 1) /= z;
        }
        Mat saved = a;
        return push(std::move(a), needs(scores), [scores, saved = std::move(saved)](Tape& t, const Mat& g) {
            Eigen::Index T = saved.rows();
            Mat ds(T, T);
            for (Eigen::Index i = 0; i < T; ++i) {
                double dot = saved.row(i).dot(g.row(i));
                ds.row(i) = saved.row(i).cwiseProduct((g.row(i).array() - dot).matrix());
            }
            t.accum(scores, ds);
        });
    }

    Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5) {
        const Mat& xv = val(x);
        Eigen::Index R = xv.rows(), C = xv.cols();
        Mat xhat(R, C);
        Eigen::VectorXd inv_std(R);
        for (Eigen::Index r = 0; r < R; ++r) {
            double mean = xv.row(r).mean();
            double var = (xv.row(r).array() - mean).square().sum() / static_cast<double>(C);
            double inv = 1.0 / std::sqrt(var + eps);
            inv_std(r) = inv;
            xhat.row(r) = (xv.row(r).array() - mean).matrix() * inv;
        }
        Mat v = (xhat.array().rowwise() * val(gamma).row(0).array()).matrix();
        v.rowwise() += val(beta).row(0);
        Mat gsave = val(gamma);
        return push(std::move(v), needs(x) || needs(gamma) || needs(beta),
                    [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std),
                     gsave = std::move(gsave)](Tape& t, const Mat& g) {
                        Eigen::Index R = xhat.rows(), C = xhat.cols();
                        if (t.needs(gamma)) t.accum(gamma, (g.cwiseProduct(xhat)).colwise().sum().eval());
                        if (t.needs(beta)) t.accum(beta, g.colwise().sum().eval());
                        if (!t.needs(x)) return;
                        Mat dx(R, C);
                        for (Eigen::Index r = 0; r < R; ++r) {
                            Eigen::RowVectorXd dxhat = g.row(r).cwiseProduct(gsave.row(0));
                            double s1 = dxhat.sum();
                            double s2 = dxhat.dot(xhat.row(r));
                            dx.row(r) = inv_std(r) *
                                        (dxhat.array() - s1 / static_cast<double>(C) -
                                         xhat.row(r).array() * (s2 / static_cast<double>(C)))
                                            .matrix();
                        }
                        t.accum(x, dx);
                    });
    }

    // inverted dropout; mask entries are 0 or 1/keep
    Var dropout(Var x, double p_drop, Rng& rng) {
        if (p_drop <= 0.0) return x;
        if (p_drop >= 1.0) throw ConfigError("dropout probability must be < 1");
        const Mat& xv = val(x);
        double keep = 1.0 - p_drop;
        Mat mask(xv.rows(), xv.cols());
        for (Eigen::Index i = 0; i < mask.size(); ++i)
            mask(i) = rng.uniform01() < keep ? 1.0 / keep : 0.0;
        Mat v = xv.cwiseProduct(mask);
        return push(std::move(v), needs(x), [x, mask = std::move(mask)](Tape& t, const Mat& g) {
            t.accum(x, g.cwiseProduct(mask).eval());
        });
    }

    // ---- pooling over byte segments ----

    // ends[s] = index of the last row of segment s (inclusive); ends must be
    // strictly increasing and ends.back() == x.rows()-1.
    Var segment_mean_pool(Var x, std::vector<int> ends) {
        const Mat& xv = val(x);
        if (ends.empty()) throw ConfigError("segment_mean_pool: no segments");
        if (ends.back() != static_cast<int>(xv.rows()) - 1)
            throw ConfigError("segment_mean_pool: last segment must end at final row");
        Mat v(static_cast<Eigen::Index>(ends.size()), xv.cols());
        int start = 0;
        for (std::size_t s = 0; s < ends.size(); ++s) {
            int len = ends[s] - start + 1;
            if (len <= 0) throw ConfigError("segment_mean_pool: ends not strictly increasing");
            v.row(static_cast<Eigen::Index>(s)) =
                xv.middleRows(start, len).colwise().mean();
            start = ends[s] + 1;
        }
        int rows = static_cast<int>(xv.rows());
        int cols = static_cast<int>(xv.cols());
        return push(std::move(v), needs(x), [x, ends = std::move(ends), rows, cols](Tape& t, const Mat& g) {
            if (!t.needs(x)) return;
            Mat& slot = t.grad_slot(x, rows, cols);
            int start = 0;
            for (std::size_t s = 0; s < ends.size(); ++s) {
                int len = ends[s] - start + 1;
                double w = 1.0 / static_cast<double>(len);
                for (int r = start; r <= ends[s]; ++r)
                    slot.row(r) += g.row(static_cast<Eigen::Index>(s)) * w;
                start = ends[s] + 1;
            }
        });
    }

    // ---- scalar reductions ----

    Var sum(Var x) {
        Mat v(1, 1);
        v(0, 0) = val(x).sum();
        int rows = static_cast<int>(val(x).rows());
        int cols = static_cast<int>(val(x).cols());
        return push(std::move(v), needs(x), [x, rows, cols](Tape& t, const Mat& g) {
            t.accum(x, Mat::Constant(rows, cols, g(0, 0)).eval());
        });
    }

    // y = f(x) for 1x1 x, with df supplied by the caller (closed-form losses)
    Var apply_scalar(Var x, double value, double dvalue) {
        Mat v(1, 1);
        v(0, 0) = value;
        return push(std::move(v), needs(x), [x, dvalue](Tape& t, const Mat& g) {
            Mat d(1, 1);
            d(0, 0) = g(0, 0) * dvalue;
            t.accum(x, d);
        });
    }

    // ---- fused losses ----

    // Sum of -log softmax(logits.row(r))[targets[r]] over rows with target >= 0.
    // Returns the summed nats as a 1x1 Var plus the number of counted rows.
    struct CrossEntropyOut {
        Var nll_sum;
        int count = 0;
    };

    CrossEntropyOut cross_entropy_rows(Var logits, const std::vector<int>& targets) {
        const Mat& L = val(logits);
        if (static_cast<Eigen::Index>(targets.size()) != L.rows())
            throw ConfigError("cross_entropy_rows: one target per row required");
        Eigen::Index R = L.rows(), C = L.cols();
        Mat probs(R, C);
        double nll = 0.0;
        int count = 0;
        for (Eigen::Index r = 0; r < R; ++r) {
            int tgt = targets[static_cast<std::size_t>(r)];
            if (tgt < 0) {
                probs.row(r).setZero();
                continue;
            }
            if (tgt >= C) throw DataError("cross_entropy_rows: target out of range");
            double m = L.row(r).maxCoeff();
            Eigen::RowVectorXd e = (L.row(r).array() - m).exp();
            double z = e.sum();
            probs.row(r) = e / z;
            nll += -(L(r, tgt) - m - std::log(z));
            ++count;
        }
        Mat v(1, 1);
        v(0, 0) = nll;
        std::vector<int> tg = targets;
        Var out = push(std::move(v), needs(logits),
                       [logits, probs = std::move(probs), tg = std::move(tg)](Tape& t, const Mat& g) {
                           if (!t.needs(logits)) return;
                           Mat d = probs * g(0, 0);
                           for (Eigen::Index r = 0; r < d.rows(); ++r) {
                               int tgt = tg[static_cast<std::size_t>(r)];
                               if (tgt >= 0) d(r, tgt) -= g(0, 0);
                           }
                           t.accum(logits, d);
                       });
        return {out, count};
    }

    // ---- custom escape hatch ----

    using BackFn = std::function<void(Tape&, const Mat&)>;

    Var custom(Mat value, bool needs_grad, BackFn back) {
        return push(std::move(value), needs_grad, std::move(back));
    }

    // ---- gradient propagation ----

    void backward(Var loss) {
        if (!grad_enabled()) throw ConfigError("backward() on an inference tape");
        Node& root = node(loss);
        if (root.value.rows() != 1 || root.value.cols() != 1)
            throw ConfigError("backward() expects a scalar loss node");
        root.grad = Mat::Ones(1, 1);
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (n.grad.size() != 0 && n.back) n.back(*this, n.grad);
            n.grad.resize(0, 0);  // free as we go; graphs are per-sequence
        }
    }

    bool needs(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].needs_grad; }

    void accum(Var v, const Mat& g) {
        Node& n = node(v);
        if (!n.needs_grad) return;
        if (n.grad.size() == 0)
            n.grad = g;
        else
            n.grad += g;
    }

private:
    struct Node {
        Mat value;
        Mat grad;
        bool needs_grad = false;
        BackFn back;
    };

    Node& node(Var v) { return nodes_[static_cast<std::size_t>(v.id)]; }

    Mat& grad_slot(Var v, int rows, int cols) {
        Node& n = node(v);
        if (n.grad.size() == 0) n.grad = Mat::Zero(rows, cols);
        return n.grad;
    }

    void accum_block(Var v, int rows, int cols, int r0, int c0, const Mat& g) {
        if (!needs(v)) return;
        Mat& slot = grad_slot(v, rows, cols);
        slot.block(r0, c0, g.rows(), g.cols()) += g;
    }

    Var push(Mat value, bool needs_grad, BackFn back) {
        Node n;
        n.value = std::move(value);
        n.needs_grad = needs_grad && grad_enabled();
        if (n.needs_grad) n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    GradSink* sink_ = nullptr;
    // deque, not vector: references handed out by val() must survive later
    // node pushes (ops routinely hold one while building their result)
    std::deque<Node> nodes_;
};

// Named parameter registry shared by the model, optimizer, and checkpoints.
// Ids are dense indices; GradSink slots align with them.
class ParamStore {
public:
    std::size_t add(const std::string& name, Mat value) {
        if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
        index_[name] = values_.size();
        names_.push_back(name);
        values_.push_back(std::move(value));
        return values_.size() - 1;
    }

    std::size_t size() const { return values_.size(); }
    const std::string& name(std::size_t id) const { return names_[id]; }
    Mat& value(std::size_t id) { return values_[id]; }
    const Mat& value(std::size_t id) const { return values_[id]; }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    std::size_t id_of(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
        return it->second;
    }

    Var var(Tape& t, std::size_t id) const { return t.param(id, values_[id]); }

    GradSink make_sink() const { return GradSink(values_.size()); }

private:
    std::vector<std::string> names_;
    std::vector<Mat> values_;
    std::map<std::string, std::size_t> index_;
};

}  // namespace ftok
