#pragma once

// Minimal reverse-mode differentiation over dense matrices. A Tape records
// the forward computation; backward() replays it in reverse from any node
// with an arbitrary seed, so the same tape can be swept once per output class.

#include <cmath>
#include <cstddef>
#include <functional>
#include <numbers>
#include <span>
#include <utility>
#include <vector>

#include "stab/numeric.hpp"

namespace stab::ad {

struct Var {
    std::size_t id = 0;
};

class Tape {
public:
    Var leaf(Matrix value, bool needs_grad = false) {
        return push(std::move(value), needs_grad, nullptr);
    }

    const Matrix& value(Var v) const { return nodes_[v.id].value; }
    bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }

    /// Gradient of the last backward() seed w.r.t. v (empty if v does not need grad).
    const Matrix& grad(Var v) const { return nodes_[v.id].grad; }

    void backward(Var out, const Matrix& seed) {
        require(seed.same_shape(nodes_[out.id].value), "backward: seed shape mismatch");
        for (auto& n : nodes_)
            if (n.needs_grad) std::fill(n.grad.data.begin(), n.grad.data.end(), 0.0);
        if (!nodes_[out.id].needs_grad) return;
        nodes_[out.id].grad.data = seed.data;
        for (std::size_t i = out.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (n.needs_grad && n.back) n.back(*this, i);
        }
    }

    // ---- operations -----------------------------------------------------

    Var matmul(Var a, Var b) {
        Matrix out = stab::matmul(value(a), value(b));
        return push(std::move(out), any(a, b), [a, b](Tape& t, std::size_t self) {
            const Matrix& g = t.nodes_[self].grad;
            if (t.needs_grad(a)) add_matmul_nt(g, t.value(b), t.gref(a));
            if (t.needs_grad(b)) add_matmul_tn(t.value(a), g, t.gref(b));
        });
    }

    Var transpose(Var a) {
        return push(stab::transpose(value(a)), needs_grad(a), [a](Tape& t, std::size_t self) {
            const Matrix& g = t.nodes_[self].grad;
            Matrix& ga = t.gref(a);
            for (std::size_t r = 0; r < g.rows; ++r)
                for (std::size_t c = 0; c < g.cols; ++c) ga(c, r) += g(r, c);
        });
    }

    Var add(Var a, Var b) {
        require(value(a).same_shape(value(b)), "add: shape mismatch");
        Matrix out = value(a);
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += value(b).data[i];
        return push(std::move(out), any(a, b), [a, b](Tape& t, std::size_t self) {
            const Matrix& g = t.nodes_[self].grad;
            if (t.needs_grad(a)) accumulate(t.gref(a), g);
            if (t.needs_grad(b)) accumulate(t.gref(b), g);
        });
    }

    /// Adds a 1 x cols row vector to every row of a.
    Var add_row(Var a, Var r) {
        const Matrix& av = value(a);
        const Matrix& rv = value(r);
        require(rv.rows == 1 && rv.cols == av.cols, "add_row: bias shape mismatch");
        Matrix out = av;
        for (std::size_t i = 0; i < out.rows; ++i)
            for (std::size_t j = 0; j < out.cols; ++j) out(i, j) += rv.data[j];
        return push(std::move(out), any(a, r), [a, r](Tape& t, std::size_t self) {
            const Matrix& g = t.nodes_[self].grad;
            if (t.needs_grad(a)) accumulate(t.gref(a), g);
            if (t.needs_grad(r)) {
                Matrix& gr = t.gref(r);
                for (std::size_t i = 0; i < g.rows; ++i)
                    for (std::size_t j = 0; j < g.cols; ++j) gr.data[j] += g(i, j);
            }
        });
    }

    Var scale(Var a, double c) {
        Matrix out = value(a);
        for (double& x : out.data) x *= c;
        return push(std::move(out), needs_grad(a), [a, c](Tape& t, std::size_t self) {
            const Matrix& g = t.nodes_[self].grad;
            Matrix& ga = t.gref(a);
            for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += c * g.data[i];
        });
    }

    Var tanh(Var a) {
        Matrix out = value(a);
        for (double& x : out.data) x = std::tanh(x);
        return push(std::move(out), needs_grad(a), [a](Tape& t, std::size_t self) {
            const Node& n = t.nodes_[self];
            Matrix& ga = t.gref(a);
            for (std::size_t i = 0; i < n.grad.data.size(); ++i) {
                const double y = n.value.data[i];
                ga.data[i] += n.grad.data[i] * (1.0 - y * y);
            }
        });
    }

    /// GELU, tanh approximation.
    Var gelu(Var a) {
        static constexpr double k = 0.7978845608028654; // sqrt(2/pi)
        static constexpr double c3 = 0.044715;
        Matrix out = value(a);
        for (double& x : out.data) x = 0.5 * x * (1.0 + std::tanh(k * (x + c3 * x * x * x)));
        return push(std::move(out), needs_grad(a), [a](Tape& t, std::size_t self) {
            const Matrix& g = t.nodes_[self].grad;
            const Matrix& x = t.value(a);
            Matrix& ga = t.gref(a);
            for (std::size_t i = 0; i < g.data.size(); ++i) {
                const double xi = x.data[i];
                const double th = std::tanh(k * (xi + c3 * xi * xi * xi));
                const double d = 0.5 * (1.0 + th) + 0.5 * xi * (1.0 - th * th) * k * (1.0 + 3.0 * c3 * xi * xi);
                ga.data[i] += g.data[i] * d;
            }
        });
    }

    /// Row-wise layer normalization with learned gain and bias (both 1 x cols).
    Var layer_norm(Var a, Var gain, Var bias, double eps = 1e-5) {
        const Matrix& x = value(a);
        const Matrix& gv = value(gain);
        const Matrix& bv = value(bias);
        require(gv.cols == x.cols && bv.cols == x.cols, "layer_norm: parameter shape mismatch");
        Matrix xhat(x.rows, x.cols);
        Vector inv_std(x.rows);
        Matrix out(x.rows, x.cols);
        const double n = static_cast<double>(x.cols);
        for (std::size_t r = 0; r < x.rows; ++r) {
            double mean = 0.0;
            for (double v : x.row(r)) mean += v;
            mean /= n;
            double var = 0.0;
            for (double v : x.row(r)) var += (v - mean) * (v - mean);
            var /= n;
            inv_std[r] = 1.0 / std::sqrt(var + eps);
            for (std::size_t c = 0; c < x.cols; ++c) {
                xhat(r, c) = (x(r, c) - mean) * inv_std[r];
                out(r, c) = xhat(r, c) * gv.data[c] + bv.data[c];
            }
        }
        const bool ng = needs_grad(a) || needs_grad(gain) || needs_grad(bias);
        return push(std::move(out), ng,
                    [a, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, std::size_t self) {
                        const Matrix& g = t.nodes_[self].grad;
                        const Matrix& gv = t.value(gain);
                        const double n = static_cast<double>(g.cols);
                        if (t.needs_grad(gain) || t.needs_grad(bias)) {
                            for (std::size_t r = 0; r < g.rows; ++r)
                                for (std::size_t c = 0; c < g.cols; ++c) {
                                    if (t.needs_grad(gain)) t.gref(gain).data[c] += g(r, c) * xhat(r, c);
                                    if (t.needs_grad(bias)) t.gref(bias).data[c] += g(r, c);
                                }
                        }
                        if (!t.needs_grad(a)) return;
                        Matrix& ga = t.gref(a);
                        for (std::size_t r = 0; r < g.rows; ++r) {
                            double m1 = 0.0, m2 = 0.0;
                            for (std::size_t c = 0; c < g.cols; ++c) {
                                const double dxh = g(r, c) * gv.data[c];
                                m1 += dxh;
                                m2 += dxh * xhat(r, c);
                            }
                            m1 /= n;
                            m2 /= n;
                            for (std::size_t c = 0; c < g.cols; ++c) {
                                const double dxh = g(r, c) * gv.data[c];
                                ga(r, c) += inv_std[r] * (dxh - m1 - xhat(r, c) * m2);
                            }
                        }
                    });
    }

    /// Row-wise softmax over the causal prefix (column j <= row i); masked entries are 0.
    Var causal_softmax(Var a) {
        const Matrix& x = value(a);
        require(x.rows <= x.cols, "causal_softmax: more rows than columns");
        Matrix out(x.rows, x.cols);
        for (std::size_t r = 0; r < x.rows; ++r) {
            const std::size_t lim = r + 1 + (x.cols - x.rows);
            double mx = x(r, 0);
            for (std::size_t c = 1; c < lim; ++c) mx = std::max(mx, x(r, c));
            double s = 0.0;
            for (std::size_t c = 0; c < lim; ++c) {
                out(r, c) = std::exp(x(r, c) - mx);
                s += out(r, c);
            }
            for (std::size_t c = 0; c < lim; ++c) out(r, c) /= s;
        }
        return push(std::move(out), needs_grad(a), [a](Tape& t, std::size_t self) {
            const Node& n = t.nodes_[self];
            Matrix& ga = t.gref(a);
            for (std::size_t r = 0; r < n.value.rows; ++r) {
                double s = 0.0;
                for (std::size_t c = 0; c < n.value.cols; ++c) s += n.value(r, c) * n.grad(r, c);
                for (std::size_t c = 0; c < n.value.cols; ++c) ga(r, c) += n.value(r, c) * (n.grad(r, c) - s);
            }
        });
    }

    Var log_softmax(Var a) {
        const Matrix& x = value(a);
        Matrix out(x.rows, x.cols);
        for (std::size_t r = 0; r < x.rows; ++r) {
            double mx = x(r, 0);
            for (double v : x.row(r)) mx = std::max(mx, v);
            double s = 0.0;
            for (double v : x.row(r)) s += std::exp(v - mx);
            const double lse = mx + std::log(s);
            for (std::size_t c = 0; c < x.cols; ++c) out(r, c) = x(r, c) - lse;
        }
        return push(std::move(out), needs_grad(a), [a](Tape& t, std::size_t self) {
            const Node& n = t.nodes_[self];
            Matrix& ga = t.gref(a);
            for (std::size_t r = 0; r < n.value.rows; ++r) {
                double s = 0.0;
                for (std::size_t c = 0; c < n.value.cols; ++c) s += n.grad(r, c);
                for (std::size_t c = 0; c < n.value.cols; ++c)
                    ga(r, c) += n.grad(r, c) - std::exp(n.value(r, c)) * s;
            }
        });
    }

    /// Rows of `table` selected by ids (embedding lookup).
    Var gather_rows(Var table, std::vector<std::size_t> ids) {
        const Matrix& tv = value(table);
        Matrix out(ids.size(), tv.cols);
        for (std::size_t r = 0; r < ids.size(); ++r) {
            require(ids[r] < tv.rows, "gather_rows: index out of range");
            std::copy(tv.row(ids[r]).begin(), tv.row(ids[r]).end(), out.row(r).begin());
        }
        return push(std::move(out), needs_grad(table), [table, ids = std::move(ids)](Tape& t, std::size_t self) {
            const Matrix& g = t.nodes_[self].grad;
            Matrix& gt = t.gref(table);
            for (std::size_t r = 0; r < ids.size(); ++r)
                for (std::size_t c = 0; c < g.cols; ++c) gt(ids[r], c) += g(r, c);
        });
    }

    Var slice_rows(Var a, std::size_t r0, std::size_t r1) {
        const Matrix& x = value(a);
        require(r0 <= r1 && r1 <= x.rows, "slice_rows: bad range");
        Matrix out(r1 - r0, x.cols);
        std::copy(x.data.begin() + static_cast<std::ptrdiff_t>(r0 * x.cols),
                  x.data.begin() + static_cast<std::ptrdiff_t>(r1 * x.cols), out.data.begin());
        return push(std::move(out), needs_grad(a), [a, r0](Tape& t, std::size_t self) {
            const Matrix& g = t.nodes_[self].grad;
            Matrix& ga = t.gref(a);
            for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[r0 * g.cols + i] += g.data[i];
        });
    }

    Var slice_cols(Var a, std::size_t c0, std::size_t c1) {
        const Matrix& x = value(a);
        require(c0 <= c1 && c1 <= x.cols, "slice_cols: bad range");
        Matrix out(x.rows, c1 - c0);
        for (std::size_t r = 0; r < x.rows; ++r)
            for (std::size_t c = c0; c < c1; ++c) out(r, c - c0) = x(r, c);
        return push(std::move(out), needs_grad(a), [a, c0](Tape& t, std::size_t self) {
            const Matrix& g = t.nodes_[self].grad;
            Matrix& ga = t.gref(a);
            for (std::size_t r = 0; r < g.rows; ++r)
                for (std::size_t c = 0; c < g.cols; ++c) ga(r, c + c0) += g(r, c);
        });
    }

    Var concat_cols(const std::vector<Var>& parts) {
        require(!parts.empty(), "concat_cols: no inputs");
        const std::size_t rows = value(parts.front()).rows;
        std::size_t cols = 0;
        bool ng = false;
        for (Var p : parts) {
            require(value(p).rows == rows, "concat_cols: row mismatch");
            cols += value(p).cols;
            ng = ng || needs_grad(p);
        }
        Matrix out(rows, cols);
        std::size_t off = 0;
        for (Var p : parts) {
            const Matrix& x = value(p);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < x.cols; ++c) out(r, off + c) = x(r, c);
            off += x.cols;
        }
        return push(std::move(out), ng, [parts](Tape& t, std::size_t self) {
            const Matrix& g = t.nodes_[self].grad;
            std::size_t off = 0;
            for (Var p : parts) {
                const std::size_t w = t.value(p).cols;
                if (t.needs_grad(p)) {
                    Matrix& gp = t.gref(p);
                    for (std::size_t r = 0; r < g.rows; ++r)
                        for (std::size_t c = 0; c < w; ++c) gp(r, c) += g(r, off + c);
                }
                off += w;
            }
        });
    }

    /// Mean negative log-likelihood of per-row targets given row log-probabilities (1 x 1).
    Var nll_mean(Var logp, std::vector<std::size_t> targets) {
        const Matrix& lp = value(logp);
        require(targets.size() == lp.rows, "nll_mean: target count mismatch");
        double s = 0.0;
        for (std::size_t r = 0; r < lp.rows; ++r) {
            require(targets[r] < lp.cols, "nll_mean: target out of range");
            s -= lp(r, targets[r]);
        }
        Matrix out(1, 1, s / static_cast<double>(lp.rows));
        return push(std::move(out), needs_grad(logp), [logp, targets = std::move(targets)](Tape& t, std::size_t self) {
            const double g = t.nodes_[self].grad.data[0] / static_cast<double>(targets.size());
            Matrix& gl = t.gref(logp);
            for (std::size_t r = 0; r < targets.size(); ++r) gl(r, targets[r]) -= g;
        });
    }

    std::size_t size() const { return nodes_.size(); }

private:
    using Backward = std::function<void(Tape&, std::size_t)>;

    struct Node {
        Matrix value;
        Matrix grad;
        bool needs_grad = false;
        Backward back;
    };

    bool any(Var a, Var b) const { return needs_grad(a) || needs_grad(b); }

    Var push(Matrix value, bool ng, Backward back) {
        Node n;
        if (ng) n.grad = Matrix(value.rows, value.cols);
        n.value = std::move(value);
        n.needs_grad = ng;
        if (ng) n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return Var{nodes_.size() - 1};
    }

    Matrix& gref(Var v) { return nodes_[v.id].grad; }

    static void accumulate(Matrix& dst, const Matrix& src) {
        for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += src.data[i];
    }

    // dst += g * b^T
    static void add_matmul_nt(const Matrix& g, const Matrix& b, Matrix& dst) {
        for (std::size_t i = 0; i < g.rows; ++i) {
            const double* gr = g.data.data() + i * g.cols;
            double* dr = dst.data.data() + i * dst.cols;
            for (std::size_t k = 0; k < b.rows; ++k) {
                const double* br = b.data.data() + k * b.cols;
                double s = 0.0;
                for (std::size_t j = 0; j < g.cols; ++j) s += gr[j] * br[j];
                dr[k] += s;
            }
        }
    }

    // dst += a^T * g
    static void add_matmul_tn(const Matrix& a, const Matrix& g, Matrix& dst) {
        for (std::size_t i = 0; i < a.rows; ++i) {
            const double* gr = g.data.data() + i * g.cols;
            for (std::size_t k = 0; k < a.cols; ++k) {
                const double aik = a(i, k);
                if (aik == 0.0) continue;
                double* dr = dst.data.data() + k * dst.cols;
                for (std::size_t j = 0; j < g.cols; ++j) dr[j] += aik * gr[j];
            }
        }
    }

    std::vector<Node> nodes_;
};

} // namespace stab::ad
