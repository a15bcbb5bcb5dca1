#ifndef TPG_CORE_GRAPH_HPP
#define TPG_CORE_GRAPH_HPP

#include <Eigen/Core>
#include <cmath>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "tpg/core/tensor.hpp"

namespace tpg {

// Trainable tensor. Gradients accumulate across backward passes until the
// optimizer consumes and clears them.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;

    Parameter() = default;
    Parameter(std::string n, Tensor v)
        : name(std::move(n)), value(std::move(v)), grad(value.shape) {}

    void zero_grad() { grad.fill(0.0); }
};

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

enum class Pad { zero, circular };

// Reverse-mode autodiff tape. One Graph per forward pass; insertion order is
// the topological order. Backward functions pull the node's grad and push
// contributions into parent grads.
class Graph {
public:
    struct Node {
        Tensor val;
        Tensor grad;
        bool has_grad = false;
        bool needs_grad = false;
        Parameter* param = nullptr;
        std::function<void(Graph&, int)> back;
    };

    std::vector<Node> nodes;
    bool grad_enabled = true;

    explicit Graph(bool with_grad = true) : grad_enabled(with_grad) { nodes.reserve(256); }

    struct Var {
        Graph* g = nullptr;
        int id = -1;
        const Tensor& val() const { return g->nodes[size_t(id)].val; }
        const Tensor& grad() const {
            TPG_REQUIRE(g->nodes[size_t(id)].has_grad, errc::state, "no gradient at this node");
            return g->nodes[size_t(id)].grad;
        }
        bool valid() const { return g != nullptr && id >= 0; }
    };

    // ---- leaves ------------------------------------------------------------

    Var input(Tensor t) { return push(std::move(t), false, nullptr, {}); }

    // grad-tracked leaf not tied to a Parameter (for d loss / d input probes)
    Var leaf(Tensor t) { return push(std::move(t), grad_enabled, nullptr, {}); }

    Var param(Parameter& p) { return push(p.value, grad_enabled, &p, {}); }

    // frozen parameter: value participates, gradient does not reach it
    Var frozen(const Parameter& p) { return push(p.value, false, nullptr, {}); }

    // stop-gradient: value copied, graph edge severed
    Var detach(Var x) { return push(x.val(), false, nullptr, {}); }

    // ---- generic node construction (used by domain-specific custom ops) ----

    Var make_node(Tensor value, const std::vector<Var>& parents,
                  std::function<void(Graph&, int)> back) {
        bool ng = false;
        if (grad_enabled)
            for (const Var& p : parents) ng = ng || nodes[size_t(p.id)].needs_grad;
        return push(std::move(value), ng, nullptr, ng ? std::move(back) : nullptr);
    }

    bool wants_grad(Var x) const { return nodes[size_t(x.id)].needs_grad; }

    // grad buffer of a node, allocated on first touch
    Tensor& grad_buf(int id) {
        Node& n = nodes[size_t(id)];
        if (!n.has_grad) {
            n.grad = Tensor(n.val.shape);
            n.has_grad = true;
        }
        return n.grad;
    }

    bool grad_wanted(int id) const { return nodes[size_t(id)].needs_grad; }

    // ---- elementwise -------------------------------------------------------

    Var add(Var a, Var b) {
        require_same(a, b, "add");
        Tensor out = a.val();
        const Tensor& bv = b.val();
        for (size_t i = 0; i < out.v.size(); ++i) out.v[i] += bv.v[i];
        int pa = a.id, pb = b.id;
        return make_node(std::move(out), {a, b}, [pa, pb](Graph& g, int id) {
            const Tensor& gr = g.nodes[size_t(id)].grad;
            if (g.grad_wanted(pa)) {
                Tensor& ga = g.grad_buf(pa);
                for (size_t i = 0; i < gr.v.size(); ++i) ga.v[i] += gr.v[i];
            }
            if (g.grad_wanted(pb)) {
                Tensor& gb = g.grad_buf(pb);
                for (size_t i = 0; i < gr.v.size(); ++i) gb.v[i] += gr.v[i];
            }
        });
    }

    Var sub(Var a, Var b) {
        require_same(a, b, "sub");
        Tensor out = a.val();
        const Tensor& bv = b.val();
        for (size_t i = 0; i < out.v.size(); ++i) out.v[i] -= bv.v[i];
        int pa = a.id, pb = b.id;
        return make_node(std::move(out), {a, b}, [pa, pb](Graph& g, int id) {
            const Tensor& gr = g.nodes[size_t(id)].grad;
            if (g.grad_wanted(pa)) {
                Tensor& ga = g.grad_buf(pa);
                for (size_t i = 0; i < gr.v.size(); ++i) ga.v[i] += gr.v[i];
            }
            if (g.grad_wanted(pb)) {
                Tensor& gb = g.grad_buf(pb);
                for (size_t i = 0; i < gr.v.size(); ++i) gb.v[i] -= gr.v[i];
            }
        });
    }

    Var mul(Var a, Var b) {
        require_same(a, b, "mul");
        Tensor out = a.val();
        const Tensor& bv = b.val();
        for (size_t i = 0; i < out.v.size(); ++i) out.v[i] *= bv.v[i];
        int pa = a.id, pb = b.id;
        return make_node(std::move(out), {a, b}, [pa, pb](Graph& g, int id) {
            const Tensor& gr = g.nodes[size_t(id)].grad;
            const Tensor& av = g.nodes[size_t(pa)].val;
            const Tensor& bv2 = g.nodes[size_t(pb)].val;
            if (g.grad_wanted(pa)) {
                Tensor& ga = g.grad_buf(pa);
                for (size_t i = 0; i < gr.v.size(); ++i) ga.v[i] += gr.v[i] * bv2.v[i];
            }
            if (g.grad_wanted(pb)) {
                Tensor& gb = g.grad_buf(pb);
                for (size_t i = 0; i < gr.v.size(); ++i) gb.v[i] += gr.v[i] * av.v[i];
            }
        });
    }

    Var divide(Var a, Var b) {
        require_same(a, b, "div");
        Tensor out = a.val();
        const Tensor& bv = b.val();
        for (size_t i = 0; i < out.v.size(); ++i) out.v[i] /= bv.v[i];
        int pa = a.id, pb = b.id;
        return make_node(std::move(out), {a, b}, [pa, pb](Graph& g, int id) {
            const Tensor& gr = g.nodes[size_t(id)].grad;
            const Tensor& av = g.nodes[size_t(pa)].val;
            const Tensor& bv2 = g.nodes[size_t(pb)].val;
            if (g.grad_wanted(pa)) {
                Tensor& ga = g.grad_buf(pa);
                for (size_t i = 0; i < gr.v.size(); ++i) ga.v[i] += gr.v[i] / bv2.v[i];
            }
            if (g.grad_wanted(pb)) {
                Tensor& gb = g.grad_buf(pb);
                for (size_t i = 0; i < gr.v.size(); ++i)
                    gb.v[i] -= gr.v[i] * av.v[i] / (bv2.v[i] * bv2.v[i]);
            }
        });
    }

    // y = a*x + b
    Var affine(Var x, double a, double b) {
        Tensor out = x.val();
        for (auto& e : out.v) e = a * e + b;
        int p = x.id;
        return make_node(std::move(out), {x}, [p, a](Graph& g, int id) {
            if (!g.grad_wanted(p)) return;
            const Tensor& gr = g.nodes[size_t(id)].grad;
            Tensor& gp = g.grad_buf(p);
            for (size_t i = 0; i < gr.v.size(); ++i) gp.v[i] += a * gr.v[i];
        });
    }

    Var scale(Var x, double a) { return affine(x, a, 0.0); }
    Var neg(Var x) { return affine(x, -1.0, 0.0); }
    Var add_scalar(Var x, double b) { return affine(x, 1.0, b); }

    Var relu(Var x) {
        Tensor out = x.val();
        for (auto& e : out.v) e = e > 0.0 ? e : 0.0;
        int p = x.id;
        return make_node(std::move(out), {x}, [p](Graph& g, int id) {
            if (!g.grad_wanted(p)) return;
            const Tensor& gr = g.nodes[size_t(id)].grad;
            const Tensor& xv = g.nodes[size_t(p)].val;
            Tensor& gp = g.grad_buf(p);
            for (size_t i = 0; i < gr.v.size(); ++i)
                if (xv.v[i] > 0.0) gp.v[i] += gr.v[i];
        });
    }

    Var sigmoid(Var x) {
        Tensor out = x.val();
        for (auto& e : out.v) e = 1.0 / (1.0 + std::exp(-e));
        int p = x.id;
        return make_node(std::move(out), {x}, [p](Graph& g, int id) {
            if (!g.grad_wanted(p)) return;
            const Tensor& gr = g.nodes[size_t(id)].grad;
            const Tensor& y = g.nodes[size_t(id)].val;
            Tensor& gp = g.grad_buf(p);
            for (size_t i = 0; i < gr.v.size(); ++i)
                gp.v[i] += gr.v[i] * y.v[i] * (1.0 - y.v[i]);
        });
    }

    Var silu(Var x) {
        Tensor out = x.val();
        for (auto& e : out.v) e = e / (1.0 + std::exp(-e));
        int p = x.id;
        return make_node(std::move(out), {x}, [p](Graph& g, int id) {
            if (!g.grad_wanted(p)) return;
            const Tensor& gr = g.nodes[size_t(id)].grad;
            const Tensor& xv = g.nodes[size_t(p)].val;
            Tensor& gp = g.grad_buf(p);
            for (size_t i = 0; i < gr.v.size(); ++i) {
                double s = 1.0 / (1.0 + std::exp(-xv.v[i]));
                gp.v[i] += gr.v[i] * s * (1.0 + xv.v[i] * (1.0 - s));
            }
        });
    }

    // clamp to [0,1]; subgradient passes inside the closed interval
    Var clamp01(Var x) {
        Tensor out = x.val();
        for (auto& e : out.v) e = e < 0.0 ? 0.0 : (e > 1.0 ? 1.0 : e);
        int p = x.id;
        return make_node(std::move(out), {x}, [p](Graph& g, int id) {
            if (!g.grad_wanted(p)) return;
            const Tensor& gr = g.nodes[size_t(id)].grad;
            const Tensor& xv = g.nodes[size_t(p)].val;
            Tensor& gp = g.grad_buf(p);
            for (size_t i = 0; i < gr.v.size(); ++i)
                if (xv.v[i] >= 0.0 && xv.v[i] <= 1.0) gp.v[i] += gr.v[i];
        });
    }

    // ---- reductions ---------------------------------------------------------

    Var sum(Var x) {
        Tensor out({1});
        out.v[0] = x.val().sum();
        int p = x.id;
        return make_node(std::move(out), {x}, [p](Graph& g, int id) {
            if (!g.grad_wanted(p)) return;
            double gr = g.nodes[size_t(id)].grad.v[0];
            Tensor& gp = g.grad_buf(p);
            for (auto& e : gp.v) e += gr;
        });
    }

    Var mean(Var x) {
        int64_t n = x.val().numel();
        TPG_REQUIRE(n > 0, errc::shape, "mean of empty tensor");
        Tensor out({1});
        out.v[0] = x.val().sum() / double(n);
        int p = x.id;
        return make_node(std::move(out), {x}, [p, n](Graph& g, int id) {
            if (!g.grad_wanted(p)) return;
            double gr = g.nodes[size_t(id)].grad.v[0] / double(n);
            Tensor& gp = g.grad_buf(p);
            for (auto& e : gp.v) e += gr;
        });
    }

    // sum(a ⊙ b) — the workhorse for squared norms and cosine numerators
    Var dot(Var a, Var b) {
        require_same(a, b, "dot");
        double s = 0.0;
        const Tensor& av = a.val();
        const Tensor& bv = b.val();
        for (size_t i = 0; i < av.v.size(); ++i) s += av.v[i] * bv.v[i];
        Tensor out({1});
        out.v[0] = s;
        int pa = a.id, pb = b.id;
        return make_node(std::move(out), {a, b}, [pa, pb](Graph& g, int id) {
            double gr = g.nodes[size_t(id)].grad.v[0];
            const Tensor& av2 = g.nodes[size_t(pa)].val;
            const Tensor& bv2 = g.nodes[size_t(pb)].val;
            if (g.grad_wanted(pa)) {
                Tensor& ga = g.grad_buf(pa);
                for (size_t i = 0; i < ga.v.size(); ++i) ga.v[i] += gr * bv2.v[i];
            }
            if (g.grad_wanted(pb)) {
                Tensor& gb = g.grad_buf(pb);
                for (size_t i = 0; i < gb.v.size(); ++i) gb.v[i] += gr * av2.v[i];
            }
        });
    }

    // mean squared difference over all elements
    Var mse(Var a, Var b) {
        Var d = sub(a, b);
        return scale(dot(d, d), 1.0 / double(a.val().numel()));
    }

    // (L,D) -> (D), mean over rows
    Var mean_rows(Var x) {
        TPG_REQUIRE(x.val().ndim() == 2, errc::shape, "mean_rows expects 2D");
        int L = x.val().dim(0), D = x.val().dim(1);
        Tensor out({D});
        for (int i = 0; i < L; ++i)
            for (int j = 0; j < D; ++j) out.v[size_t(j)] += x.val().at(i, j);
        for (auto& e : out.v) e /= double(L);
        int p = x.id;
        return make_node(std::move(out), {x}, [p, L, D](Graph& g, int id) {
            if (!g.grad_wanted(p)) return;
            const Tensor& gr = g.nodes[size_t(id)].grad;
            Tensor& gp = g.grad_buf(p);
            for (int i = 0; i < L; ++i)
                for (int j = 0; j < D; ++j) gp.at(i, j) += gr.v[size_t(j)] / double(L);
        });
    }

    // ---- vector / matrix ----------------------------------------------------

    Var matmul(Var a, Var b) {
        const Tensor& av = a.val();
        const Tensor& bv = b.val();
        TPG_REQUIRE(av.ndim() == 2 && bv.ndim() == 2 && av.dim(1) == bv.dim(0), errc::shape,
                    "matmul " + shape_str(av.shape) + " x " + shape_str(bv.shape));
        int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
        Tensor out({m, n});
        ECMap A(av.v.data(), m, k), B(bv.v.data(), k, n);
        EMap C(out.v.data(), m, n);
        C.noalias() = A * B;
        int pa = a.id, pb = b.id;
        return make_node(std::move(out), {a, b}, [pa, pb, m, k, n](Graph& g, int id) {
            const Tensor& gr = g.nodes[size_t(id)].grad;
            ECMap G(gr.v.data(), m, n);
            if (g.grad_wanted(pa)) {
                ECMap B2(g.nodes[size_t(pb)].val.v.data(), k, n);
                EMap GA(g.grad_buf(pa).v.data(), m, k);
                GA.noalias() += G * B2.transpose();
            }
            if (g.grad_wanted(pb)) {
                ECMap A2(g.nodes[size_t(pa)].val.v.data(), m, k);
                EMap GB(g.grad_buf(pb).v.data(), k, n);
                GB.noalias() += A2.transpose() * G;
            }
        });
    }

    Var transpose(Var x) {
        const Tensor& xv = x.val();
        TPG_REQUIRE(xv.ndim() == 2, errc::shape, "transpose expects 2D");
        int m = xv.dim(0), n = xv.dim(1);
        Tensor out({n, m});
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) out.at(j, i) = xv.at(i, j);
        int p = x.id;
        return make_node(std::move(out), {x}, [p, m, n](Graph& g, int id) {
            if (!g.grad_wanted(p)) return;
            const Tensor& gr = g.nodes[size_t(id)].grad;
            Tensor& gp = g.grad_buf(p);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) gp.at(i, j) += gr.at(j, i);
        });
    }

    // y = x + 1·vᵀ broadcast over rows; x (L,D), v (D)
    Var add_rowvec(Var x, Var v) {
        const Tensor& xv = x.val();
        TPG_REQUIRE(xv.ndim() == 2 && v.val().ndim() == 1 && v.val().dim(0) == xv.dim(1),
                    errc::shape, "add_rowvec shape mismatch");
        int L = xv.dim(0), D = xv.dim(1);
        Tensor out = xv;
        for (int i = 0; i < L; ++i)
            for (int j = 0; j < D; ++j) out.at(i, j) += v.val().v[size_t(j)];
        int px = x.id, pv = v.id;
        return make_node(std::move(out), {x, v}, [px, pv, L, D](Graph& g, int id) {
            const Tensor& gr = g.nodes[size_t(id)].grad;
            if (g.grad_wanted(px)) {
                Tensor& gx = g.grad_buf(px);
                for (size_t i = 0; i < gr.v.size(); ++i) gx.v[i] += gr.v[i];
            }
            if (g.grad_wanted(pv)) {
                Tensor& gv = g.grad_buf(pv);
                for (int i = 0; i < L; ++i)
                    for (int j = 0; j < D; ++j) gv.v[size_t(j)] += gr.at(i, j);
            }
        });
    }

    // per-channel ops on (C,H,W)
    Var add_cvec(Var x, Var v) { return cvec_op(x, v, false); }
    Var mul_cvec(Var x, Var v) { return cvec_op(x, v, true); }

    // softmax along rows of (L,M)
    Var softmax_rows(Var x) {
        const Tensor& xv = x.val();
        TPG_REQUIRE(xv.ndim() == 2, errc::shape, "softmax_rows expects 2D");
        int L = xv.dim(0), M = xv.dim(1);
        Tensor out({L, M});
        for (int i = 0; i < L; ++i) {
            double mx = -1e300;
            for (int j = 0; j < M; ++j) mx = std::max(mx, xv.at(i, j));
            double s = 0.0;
            for (int j = 0; j < M; ++j) {
                double e = std::exp(xv.at(i, j) - mx);
                out.at(i, j) = e;
                s += e;
            }
            for (int j = 0; j < M; ++j) out.at(i, j) /= s;
        }
        int p = x.id;
        return make_node(std::move(out), {x}, [p, L, M](Graph& g, int id) {
            if (!g.grad_wanted(p)) return;
            const Tensor& gr = g.nodes[size_t(id)].grad;
            const Tensor& y = g.nodes[size_t(id)].val;
            Tensor& gp = g.grad_buf(p);
            for (int i = 0; i < L; ++i) {
                double dy = 0.0;
                for (int j = 0; j < M; ++j) dy += gr.at(i, j) * y.at(i, j);
                for (int j = 0; j < M; ++j)
                    gp.at(i, j) += y.at(i, j) * (gr.at(i, j) - dy);
            }
        });
    }

    // rows divided by their sum. Rows with (near-)zero sum become uniform with
    // zero gradient — the L=1 reversed-attention degenerate rule.
    Var normalize_rows_sum(Var x) {
        const Tensor& xv = x.val();
        TPG_REQUIRE(xv.ndim() == 2, errc::shape, "normalize_rows_sum expects 2D");
        int L = xv.dim(0), M = xv.dim(1);
        Tensor out({L, M});
        auto sums = std::make_shared<std::vector<double>>(size_t(L), 0.0);
        for (int i = 0; i < L; ++i) {
            double s = 0.0;
            for (int j = 0; j < M; ++j) s += xv.at(i, j);
            (*sums)[size_t(i)] = s;
            if (std::fabs(s) < 1e-12) {
                for (int j = 0; j < M; ++j) out.at(i, j) = 1.0 / double(M);
            } else {
                for (int j = 0; j < M; ++j) out.at(i, j) = xv.at(i, j) / s;
            }
        }
        int p = x.id;
        return make_node(std::move(out), {x}, [p, L, M, sums](Graph& g, int id) {
            if (!g.grad_wanted(p)) return;
            const Tensor& gr = g.nodes[size_t(id)].grad;
            const Tensor& y = g.nodes[size_t(id)].val;
            Tensor& gp = g.grad_buf(p);
            for (int i = 0; i < L; ++i) {
                double s = (*sums)[size_t(i)];
                if (std::fabs(s) < 1e-12) continue;
                double acc = 0.0;
                for (int j = 0; j < M; ++j) acc += gr.at(i, j) * y.at(i, j);
                for (int j = 0; j < M; ++j) gp.at(i, j) += (gr.at(i, j) - acc) / s;
            }
        });
    }

    // x / ||x||₂ over all elements; errors on (near-)zero norm
    Var l2_normalize(Var x) {
        const Tensor& xv = x.val();
        double n = xv.norm2();
        TPG_REQUIRE(n > 1e-12, errc::domain, "l2_normalize: zero-norm vector");
        Tensor out = xv;
        for (auto& e : out.v) e /= n;
        int p = x.id;
        return make_node(std::move(out), {x}, [p, n](Graph& g, int id) {
            if (!g.grad_wanted(p)) return;
            const Tensor& gr = g.nodes[size_t(id)].grad;
            const Tensor& y = g.nodes[size_t(id)].val;
            Tensor& gp = g.grad_buf(p);
            double gy = 0.0;
            for (size_t i = 0; i < gr.v.size(); ++i) gy += gr.v[i] * y.v[i];
            for (size_t i = 0; i < gr.v.size(); ++i)
                gp.v[i] += (gr.v[i] - y.v[i] * gy) / n;
        });
    }

    // ---- shape --------------------------------------------------------------

    Var reshape(Var x, Shape s) {
        Tensor out = x.val().reshaped(std::move(s));
        int p = x.id;
        Shape ps = x.val().shape;
        return make_node(std::move(out), {x}, [p, ps](Graph& g, int id) {
            if (!g.grad_wanted(p)) return;
            const Tensor& gr = g.nodes[size_t(id)].grad;
            Tensor& gp = g.grad_buf(p);
            for (size_t i = 0; i < gr.v.size(); ++i) gp.v[i] += gr.v[i];
        });
    }

    Var concat_channels(const std::vector<Var>& xs) {
        TPG_REQUIRE(!xs.empty(), errc::shape, "concat_channels of nothing");
        int H = xs[0].val().dim(1), W = xs[0].val().dim(2);
        int C = 0;
        for (const Var& x : xs) {
            TPG_REQUIRE(x.val().ndim() == 3 && x.val().dim(1) == H && x.val().dim(2) == W,
                        errc::shape, "concat_channels: spatial dims differ");
            C += x.val().dim(0);
        }
        Tensor out({C, H, W});
        size_t off = 0;
        std::vector<int> pids;
        std::vector<size_t> sizes;
        for (const Var& x : xs) {
            std::copy(x.val().v.begin(), x.val().v.end(), out.v.begin() + long(off));
            pids.push_back(x.id);
            sizes.push_back(x.val().v.size());
            off += x.val().v.size();
        }
        return make_node(std::move(out), xs, [pids, sizes](Graph& g, int id) {
            const Tensor& gr = g.nodes[size_t(id)].grad;
            size_t off2 = 0;
            for (size_t k = 0; k < pids.size(); ++k) {
                if (g.grad_wanted(pids[k])) {
                    Tensor& gp = g.grad_buf(pids[k]);
                    for (size_t i = 0; i < sizes[k]; ++i) gp.v[i] += gr.v[off2 + i];
                }
                off2 += sizes[k];
            }
        });
    }

    Var slice_channels(Var x, int c0, int c1) {
        const Tensor& xv = x.val();
        TPG_REQUIRE(xv.ndim() == 3 && 0 <= c0 && c0 < c1 && c1 <= xv.dim(0), errc::shape,
                    "slice_channels range");
        int H = xv.dim(1), W = xv.dim(2);
        size_t plane = size_t(H) * size_t(W);
        Tensor out({c1 - c0, H, W});
        std::copy(xv.v.begin() + long(size_t(c0) * plane), xv.v.begin() + long(size_t(c1) * plane),
                  out.v.begin());
        int p = x.id;
        return make_node(std::move(out), {x}, [p, c0, plane](Graph& g, int id) {
            if (!g.grad_wanted(p)) return;
            const Tensor& gr = g.nodes[size_t(id)].grad;
            Tensor& gp = g.grad_buf(p);
            size_t base = size_t(c0) * plane;
            for (size_t i = 0; i < gr.v.size(); ++i) gp.v[base + i] += gr.v[i];
        });
    }

    // (C,H,W) -> (H·W, C) token layout
    Var chw_to_tokens(Var x) {
        const Tensor& xv = x.val();
        TPG_REQUIRE(xv.ndim() == 3, errc::shape, "chw_to_tokens expects 3D");
        int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
        Tensor out({H * W, C});
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H; ++y)
                for (int x2 = 0; x2 < W; ++x2) out.at(y * W + x2, c) = xv.at(c, y, x2);
        int p = x.id;
        return make_node(std::move(out), {x}, [p, C, H, W](Graph& g, int id) {
            if (!g.grad_wanted(p)) return;
            const Tensor& gr = g.nodes[size_t(id)].grad;
            Tensor& gp = g.grad_buf(p);
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < H; ++y)
                    for (int x2 = 0; x2 < W; ++x2) gp.at(c, y, x2) += gr.at(y * W + x2, c);
        });
    }

    // (H·W, C) -> (C, H, W)
    Var tokens_to_chw(Var x, int H, int W) {
        const Tensor& xv = x.val();
        TPG_REQUIRE(xv.ndim() == 2 && xv.dim(0) == H * W, errc::shape, "tokens_to_chw shape");
        int C = xv.dim(1);
        Tensor out({C, H, W});
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H; ++y)
                for (int x2 = 0; x2 < W; ++x2) out.at(c, y, x2) = xv.at(y * W + x2, c);
        int p = x.id;
        return make_node(std::move(out), {x}, [p, C, H, W](Graph& g, int id) {
            if (!g.grad_wanted(p)) return;
            const Tensor& gr = g.nodes[size_t(id)].grad;
            Tensor& gp = g.grad_buf(p);
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < H; ++y)
                    for (int x2 = 0; x2 < W; ++x2) gp.at(y * W + x2, c) += gr.at(c, y, x2);
        });
    }

    // crop rows [y0,y0+h) and cols [x0,x0+w) of an (H,W,C) tensor
    Var crop_hw(Var x, int y0, int x0, int h, int w) {
        const Tensor& xv = x.val();
        TPG_REQUIRE(xv.ndim() == 3, errc::shape, "crop_hw expects 3D");
        int H = xv.dim(0), W = xv.dim(1), C = xv.dim(2);
        TPG_REQUIRE(y0 >= 0 && x0 >= 0 && h > 0 && w > 0 && y0 + h <= H && x0 + w <= W,
                    errc::shape, "crop_hw window out of bounds");
        Tensor out({h, w, C});
        for (int y = 0; y < h; ++y)
            for (int x2 = 0; x2 < w; ++x2)
                for (int c = 0; c < C; ++c) out.at(y, x2, c) = xv.at(y0 + y, x0 + x2, c);
        int p = x.id;
        return make_node(std::move(out), {x}, [p, y0, x0, h, w, C](Graph& g, int id) {
            if (!g.grad_wanted(p)) return;
            const Tensor& gr = g.nodes[size_t(id)].grad;
            Tensor& gp = g.grad_buf(p);
            for (int y = 0; y < h; ++y)
                for (int x2 = 0; x2 < w; ++x2)
                    for (int c = 0; c < C; ++c) gp.at(y0 + y, x0 + x2, c) += gr.at(y, x2, c);
        });
    }

    // subtract the global mean from every element
    Var center_all(Var x) {
        const Tensor& xv = x.val();
        int64_t n = xv.numel();
        TPG_REQUIRE(n > 0, errc::shape, "center_all of empty tensor");
        double m = xv.sum() / double(n);
        Tensor out = xv;
        for (auto& e : out.v) e -= m;
        int p = x.id;
        return make_node(std::move(out), {x}, [p, n](Graph& g, int id) {
            if (!g.grad_wanted(p)) return;
            const Tensor& gr = g.nodes[size_t(id)].grad;
            Tensor& gp = g.grad_buf(p);
            double gm = 0.0;
            for (auto e : gr.v) gm += e;
            gm /= double(n);
            for (size_t i = 0; i < gr.v.size(); ++i) gp.v[i] += gr.v[i] - gm;
        });
    }

    // ---- spatial ------------------------------------------------------------

    // 2D convolution, stride 1, same padding. x (IC,H,W), w (OC,IC,KH,KW), b (OC).
    Var conv2d(Var x, Var w, Var b, Pad pad = Pad::zero) {
        const Tensor& xv = x.val();
        const Tensor& wv = w.val();
        TPG_REQUIRE(xv.ndim() == 3 && wv.ndim() == 4 && wv.dim(1) == xv.dim(0), errc::shape,
                    "conv2d shapes " + shape_str(xv.shape) + " w " + shape_str(wv.shape));
        int IC = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
        int OC = wv.dim(0), KH = wv.dim(2), KW = wv.dim(3);
        TPG_REQUIRE(b.val().ndim() == 1 && b.val().dim(0) == OC, errc::shape, "conv2d bias");
        int K = IC * KH * KW, HW = H * W;

        auto cols = std::make_shared<Tensor>(Shape{K, HW});
        im2col(xv, KH, KW, pad, *cols);

        Tensor out({OC, H, W});
        {
            ECMap Wm(wv.v.data(), OC, K), Cm(cols->v.data(), K, HW);
            EMap Y(out.v.data(), OC, HW);
            Y.noalias() = Wm * Cm;
        }
        for (int oc = 0; oc < OC; ++oc) {
            double bias = b.val().v[size_t(oc)];
            double* row = out.v.data() + size_t(oc) * size_t(HW);
            for (int i = 0; i < HW; ++i) row[i] += bias;
        }

        int px = x.id, pw = w.id, pb = b.id;
        if (!grad_enabled) return make_node(std::move(out), {x, w, b}, nullptr);
        return make_node(std::move(out), {x, w, b},
                         [px, pw, pb, IC, H, W, OC, KH, KW, K, HW, pad, cols](Graph& g, int id) {
            const Tensor& gr = g.nodes[size_t(id)].grad;
            ECMap G(gr.v.data(), OC, HW);
            if (g.grad_wanted(pw)) {
                ECMap Cm(cols->v.data(), K, HW);
                EMap GW(g.grad_buf(pw).v.data(), OC, K);
                GW.noalias() += G * Cm.transpose();
            }
            if (g.grad_wanted(pb)) {
                Tensor& gb = g.grad_buf(pb);
                for (int oc = 0; oc < OC; ++oc) {
                    double s = 0.0;
                    const double* row = gr.v.data() + size_t(oc) * size_t(HW);
                    for (int i = 0; i < HW; ++i) s += row[i];
                    gb.v[size_t(oc)] += s;
                }
            }
            if (g.grad_wanted(px)) {
                Tensor dcols({K, HW});
                ECMap Wm(g.nodes[size_t(pw)].val.v.data(), OC, K);
                EMap DC(dcols.v.data(), K, HW);
                DC.noalias() = Wm.transpose() * G;
                col2im_add(dcols, IC, H, W, KH, KW, pad, g.grad_buf(px));
            }
        });
    }

    // depthwise conv, one KHxKW kernel per channel, circular padding
    Var conv_depthwise_circular(Var x, Var k) {
        const Tensor& xv = x.val();
        const Tensor& kv = k.val();
        TPG_REQUIRE(xv.ndim() == 3 && kv.ndim() == 3 && kv.dim(0) == xv.dim(0), errc::shape,
                    "depthwise conv shapes");
        int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
        int KH = kv.dim(1), KW = kv.dim(2);
        int ay = KH / 2, ax = KW / 2;
        Tensor out({C, H, W});
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H; ++y)
                for (int x2 = 0; x2 < W; ++x2) {
                    double s = 0.0;
                    for (int ky = 0; ky < KH; ++ky)
                        for (int kx = 0; kx < KW; ++kx) {
                            int sy = wrap(y + ky - ay, H);
                            int sx = wrap(x2 + kx - ax, W);
                            s += xv.at(c, sy, sx) * kv.at(c, ky, kx);
                        }
                    out.at(c, y, x2) = s;
                }
        int px = x.id, pk = k.id;
        return make_node(std::move(out), {x, k}, [px, pk, C, H, W, KH, KW, ay, ax](Graph& g, int id) {
            const Tensor& gr = g.nodes[size_t(id)].grad;
            const Tensor& xv2 = g.nodes[size_t(px)].val;
            const Tensor& kv2 = g.nodes[size_t(pk)].val;
            bool wx = g.grad_wanted(px), wk = g.grad_wanted(pk);
            if (!wx && !wk) return;
            Tensor* gx = wx ? &g.grad_buf(px) : nullptr;
            Tensor* gk = wk ? &g.grad_buf(pk) : nullptr;
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < H; ++y)
                    for (int x2 = 0; x2 < W; ++x2) {
                        double go = gr.at(c, y, x2);
                        if (go == 0.0) continue;
                        for (int ky = 0; ky < KH; ++ky)
                            for (int kx = 0; kx < KW; ++kx) {
                                int sy = wrap(y + ky - ay, H);
                                int sx = wrap(x2 + kx - ax, W);
                                if (wx) gx->at(c, sy, sx) += go * kv2.at(c, ky, kx);
                                if (wk) gk->at(c, ky, kx) += go * xv2.at(c, sy, sx);
                            }
                    }
        });
    }

    Var avg_pool2(Var x) {
        const Tensor& xv = x.val();
        TPG_REQUIRE(xv.ndim() == 3 && xv.dim(1) % 2 == 0 && xv.dim(2) % 2 == 0, errc::shape,
                    "avg_pool2 expects even dims");
        int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
        Tensor out({C, H / 2, W / 2});
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H / 2; ++y)
                for (int x2 = 0; x2 < W / 2; ++x2)
                    out.at(c, y, x2) = 0.25 * (xv.at(c, 2 * y, 2 * x2) + xv.at(c, 2 * y, 2 * x2 + 1) +
                                               xv.at(c, 2 * y + 1, 2 * x2) + xv.at(c, 2 * y + 1, 2 * x2 + 1));
        int p = x.id;
        return make_node(std::move(out), {x}, [p, C, H, W](Graph& g, int id) {
            if (!g.grad_wanted(p)) return;
            const Tensor& gr = g.nodes[size_t(id)].grad;
            Tensor& gp = g.grad_buf(p);
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < H / 2; ++y)
                    for (int x2 = 0; x2 < W / 2; ++x2) {
                        double gq = 0.25 * gr.at(c, y, x2);
                        gp.at(c, 2 * y, 2 * x2) += gq;
                        gp.at(c, 2 * y, 2 * x2 + 1) += gq;
                        gp.at(c, 2 * y + 1, 2 * x2) += gq;
                        gp.at(c, 2 * y + 1, 2 * x2 + 1) += gq;
                    }
        });
    }

    Var upsample_nearest2(Var x) {
        const Tensor& xv = x.val();
        TPG_REQUIRE(xv.ndim() == 3, errc::shape, "upsample expects 3D");
        int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
        Tensor out({C, 2 * H, 2 * W});
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < 2 * H; ++y)
                for (int x2 = 0; x2 < 2 * W; ++x2) out.at(c, y, x2) = xv.at(c, y / 2, x2 / 2);
        int p = x.id;
        return make_node(std::move(out), {x}, [p, C, H, W](Graph& g, int id) {
            if (!g.grad_wanted(p)) return;
            const Tensor& gr = g.nodes[size_t(id)].grad;
            Tensor& gp = g.grad_buf(p);
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < 2 * H; ++y)
                    for (int x2 = 0; x2 < 2 * W; ++x2) gp.at(c, y / 2, x2 / 2) += gr.at(c, y, x2);
        });
    }

    // GroupNorm over (C,H,W): per group, normalize over (C/G)·H·W elements
    Var group_norm(Var x, Var gamma, Var beta, int groups, double eps = 1e-5) {
        const Tensor& xv = x.val();
        TPG_REQUIRE(xv.ndim() == 3 && xv.dim(0) % groups == 0, errc::shape, "group_norm dims");
        int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
        TPG_REQUIRE(gamma.val().dim(0) == C && beta.val().dim(0) == C, errc::shape,
                    "group_norm affine dims");
        int CG = C / groups;
        int64_t n = int64_t(CG) * H * W;
        size_t plane = size_t(H) * size_t(W);

        auto xhat = std::make_shared<Tensor>(Shape{C, H, W});
        auto istd = std::make_shared<std::vector<double>>(size_t(groups), 0.0);
        Tensor out({C, H, W});
        for (int g0 = 0; g0 < groups; ++g0) {
            size_t base = size_t(g0) * size_t(CG) * plane;
            double mu = 0.0;
            for (int64_t i = 0; i < n; ++i) mu += xv.v[base + size_t(i)];
            mu /= double(n);
            double var = 0.0;
            for (int64_t i = 0; i < n; ++i) {
                double d = xv.v[base + size_t(i)] - mu;
                var += d * d;
            }
            var /= double(n);
            double is = 1.0 / std::sqrt(var + eps);
            (*istd)[size_t(g0)] = is;
            for (int64_t i = 0; i < n; ++i)
                xhat->v[base + size_t(i)] = (xv.v[base + size_t(i)] - mu) * is;
        }
        for (int c = 0; c < C; ++c) {
            double ga = gamma.val().v[size_t(c)], be = beta.val().v[size_t(c)];
            for (size_t i = 0; i < plane; ++i)
                out.v[size_t(c) * plane + i] = ga * xhat->v[size_t(c) * plane + i] + be;
        }
        int px = x.id, pg = gamma.id, pb = beta.id;
        return make_node(std::move(out), {x, gamma, beta},
                         [px, pg, pb, groups, CG, n, plane, xhat, istd](Graph& g, int id) {
            const Tensor& gr = g.nodes[size_t(id)].grad;
            const Tensor& gav = g.nodes[size_t(pg)].val;
            int C2 = CG * groups;
            if (g.grad_wanted(pg)) {
                Tensor& gg = g.grad_buf(pg);
                for (int c = 0; c < C2; ++c) {
                    double s = 0.0;
                    for (size_t i = 0; i < plane; ++i)
                        s += gr.v[size_t(c) * plane + i] * xhat->v[size_t(c) * plane + i];
                    gg.v[size_t(c)] += s;
                }
            }
            if (g.grad_wanted(pb)) {
                Tensor& gb = g.grad_buf(pb);
                for (int c = 0; c < C2; ++c) {
                    double s = 0.0;
                    for (size_t i = 0; i < plane; ++i) s += gr.v[size_t(c) * plane + i];
                    gb.v[size_t(c)] += s;
                }
            }
            if (g.grad_wanted(px)) {
                Tensor& gx = g.grad_buf(px);
                for (int g0 = 0; g0 < groups; ++g0) {
                    size_t base = size_t(g0) * size_t(CG) * plane;
                    double is = (*istd)[size_t(g0)];
                    double m1 = 0.0, m2 = 0.0;
                    for (int64_t i = 0; i < n; ++i) {
                        int c = g0 * CG + int(size_t(i) / plane);
                        double dxh = gr.v[base + size_t(i)] * gav.v[size_t(c)];
                        m1 += dxh;
                        m2 += dxh * xhat->v[base + size_t(i)];
                    }
                    m1 /= double(n);
                    m2 /= double(n);
                    for (int64_t i = 0; i < n; ++i) {
                        int c = g0 * CG + int(size_t(i) / plane);
                        double dxh = gr.v[base + size_t(i)] * gav.v[size_t(c)];
                        gx.v[base + size_t(i)] +=
                            is * (dxh - m1 - xhat->v[base + size_t(i)] * m2);
                    }
                }
            }
        });
    }

    // ---- backward -----------------------------------------------------------

    void backward(Var loss) {
        TPG_REQUIRE(grad_enabled, errc::state, "backward on a no-grad graph");
        TPG_REQUIRE(loss.val().numel() == 1, errc::shape, "backward expects scalar loss");
        Tensor& g0 = grad_buf(loss.id);
        g0.v[0] += 1.0;
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes[size_t(i)];
            if (n.has_grad && n.back) n.back(*this, i);
        }
        // fold leaf grads into their Parameters
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes[size_t(i)];
            if (n.param && n.has_grad)
                for (size_t j = 0; j < n.grad.v.size(); ++j) n.param->grad.v[j] += n.grad.v[j];
        }
    }

private:
    Var push(Tensor val, bool needs_grad, Parameter* p,
             std::function<void(Graph&, int)> back) {
        Node n;
        n.val = std::move(val);
        n.needs_grad = needs_grad || (p != nullptr && grad_enabled);
        n.param = grad_enabled ? p : nullptr;
        n.back = std::move(back);
        nodes.push_back(std::move(n));
        return Var{this, int(nodes.size()) - 1};
    }

    void require_same(Var a, Var b, const char* what) {
        TPG_REQUIRE(a.val().shape == b.val().shape, errc::shape,
                    std::string(what) + ": " + shape_str(a.val().shape) + " vs " +
                        shape_str(b.val().shape));
    }

    Var cvec_op(Var x, Var v, bool is_mul) {
        const Tensor& xv = x.val();
        TPG_REQUIRE(xv.ndim() == 3 && v.val().ndim() == 1 && v.val().dim(0) == xv.dim(0),
                    errc::shape, "cvec op shape mismatch");
        int C = xv.dim(0);
        size_t plane = size_t(xv.dim(1)) * size_t(xv.dim(2));
        Tensor out = xv;
        for (int c = 0; c < C; ++c) {
            double vc = v.val().v[size_t(c)];
            double* row = out.v.data() + size_t(c) * plane;
            if (is_mul)
                for (size_t i = 0; i < plane; ++i) row[i] *= vc;
            else
                for (size_t i = 0; i < plane; ++i) row[i] += vc;
        }
        int px = x.id, pv = v.id;
        return make_node(std::move(out), {x, v}, [px, pv, C, plane, is_mul](Graph& g, int id) {
            const Tensor& gr = g.nodes[size_t(id)].grad;
            const Tensor& xv2 = g.nodes[size_t(px)].val;
            const Tensor& vv = g.nodes[size_t(pv)].val;
            if (g.grad_wanted(px)) {
                Tensor& gx = g.grad_buf(px);
                for (int c = 0; c < C; ++c) {
                    double vc = is_mul ? vv.v[size_t(c)] : 1.0;
                    for (size_t i = 0; i < plane; ++i)
                        gx.v[size_t(c) * plane + i] += gr.v[size_t(c) * plane + i] * vc;
                }
            }
            if (g.grad_wanted(pv)) {
                Tensor& gv = g.grad_buf(pv);
                for (int c = 0; c < C; ++c) {
                    double s = 0.0;
                    for (size_t i = 0; i < plane; ++i) {
                        double gi = gr.v[size_t(c) * plane + i];
                        s += is_mul ? gi * xv2.v[size_t(c) * plane + i] : gi;
                    }
                    gv.v[size_t(c)] += s;
                }
            }
        });
    }

    static int wrap(int i, int n) {
        i %= n;
        return i < 0 ? i + n : i;
    }

    static void im2col(const Tensor& x, int KH, int KW, Pad pad, Tensor& cols) {
        int IC = x.dim(0), H = x.dim(1), W = x.dim(2);
        int ay = KH / 2, ax = KW / 2, HW = H * W;
        for (int ic = 0; ic < IC; ++ic)
            for (int ky = 0; ky < KH; ++ky)
                for (int kx = 0; kx < KW; ++kx) {
                    int r = (ic * KH + ky) * KW + kx;
                    double* row = cols.v.data() + size_t(r) * size_t(HW);
                    for (int y = 0; y < H; ++y) {
                        int sy = y + ky - ay;
                        bool oy = sy < 0 || sy >= H;
                        if (pad == Pad::circular) sy = wrap(sy, H);
                        for (int x2 = 0; x2 < W; ++x2) {
                            int sx = x2 + kx - ax;
                            bool ox = sx < 0 || sx >= W;
                            if (pad == Pad::circular) sx = wrap(sx, W);
                            double v = 0.0;
                            if (pad == Pad::circular || (!oy && !ox)) v = x.at(ic, sy, sx);
                            row[y * W + x2] = v;
                        }
                    }
                }
    }

    static void col2im_add(const Tensor& dcols, int IC, int H, int W, int KH, int KW, Pad pad,
                           Tensor& dx) {
        int ay = KH / 2, ax = KW / 2, HW = H * W;
        for (int ic = 0; ic < IC; ++ic)
            for (int ky = 0; ky < KH; ++ky)
                for (int kx = 0; kx < KW; ++kx) {
                    int r = (ic * KH + ky) * KW + kx;
                    const double* row = dcols.v.data() + size_t(r) * size_t(HW);
                    for (int y = 0; y < H; ++y) {
                        int sy = y + ky - ay;
                        bool oy = sy < 0 || sy >= H;
                        if (pad == Pad::circular) sy = wrap(sy, H);
                        for (int x2 = 0; x2 < W; ++x2) {
                            int sx = x2 + kx - ax;
                            bool ox = sx < 0 || sx >= W;
                            if (pad == Pad::circular) sx = wrap(sx, W);
                            if (pad == Pad::circular || (!oy && !ox))
                                dx.at(ic, sy, sx) += row[y * W + x2];
                        }
                    }
                }
    }
};

using Var = Graph::Var;

}  // namespace tpg

#endif
