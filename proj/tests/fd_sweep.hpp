#ifndef TPG_TESTS_FD_SWEEP_HPP
#define TPG_TESTS_FD_SWEEP_HPP

// Central-difference gradient checks for every differentiable operation in the
// tape. Shared between the unit suite and the acceptance gate.

#include <utility>
#include <vector>

#include "oracle_utils.hpp"
#include "tpg/codec.hpp"
#include "tpg/core/graph.hpp"
#include "tpg/core/nn.hpp"

namespace oracle {

using tpg::Graph;
using tpg::Pad;
using tpg::Parameter;
using tpg::Tensor;
using tpg::Var;

struct SweepEntry {
    std::string name;
    FdReport rep;
};

namespace detail {

// keep inputs away from kinks of relu/clamp so central differences are valid
inline Tensor nudged(tpg::Shape s, uint64_t seed, std::vector<double> kinks, double margin = 5e-3) {
    Tensor t = rand_tensor(std::move(s), seed, -0.5, 1.5);
    for (auto& e : t.v)
        for (double k : kinks)
            if (std::fabs(e - k) < margin) e += (e >= k ? margin : -margin);
    return t;
}

inline double weighted(Graph& g, Var out, const Tensor& wts, bool with_grad) {
    Var w = g.input(wts);
    Var l = g.dot(out, w);
    if (with_grad) g.backward(l);
    return l.val().v[0];
}

}  // namespace detail

inline std::vector<SweepEntry> run_fd_sweep() {
    using detail::weighted;
    std::vector<SweepEntry> out;

    auto check1 = [&](const std::string& name, Parameter& a,
                      const std::function<Var(Graph&, Var)>& op) {
        Tensor wts;
        {
            Graph g;
            Var y = op(g, g.param(a));
            wts = rand_tensor(y.val().shape, 999);
        }
        LossFn fn = [&](bool wg) {
            Graph g;
            return weighted(g, op(g, g.param(a)), wts, wg);
        };
        out.push_back({name, fd_check_params(fn, {&a})});
    };

    auto check2 = [&](const std::string& name, Parameter& a, Parameter& b,
                      const std::function<Var(Graph&, Var, Var)>& op) {
        Tensor wts;
        {
            Graph g;
            Var y = op(g, g.param(a), g.param(b));
            wts = rand_tensor(y.val().shape, 998);
        }
        LossFn fn = [&](bool wg) {
            Graph g;
            return weighted(g, op(g, g.param(a), g.param(b)), wts, wg);
        };
        out.push_back({name, fd_check_params(fn, {&a, &b})});
    };

    Parameter a34("a34", rand_tensor({3, 4}, 1));
    Parameter b34("b34", rand_tensor({3, 4}, 2));
    Parameter bpos("bpos", rand_tensor({3, 4}, 3, 0.5, 1.5));
    Parameter v4("v4", rand_tensor({4}, 4));
    Parameter chw("chw", rand_tensor({3, 4, 6}, 5));
    Parameter cv3("cv3", rand_tensor({3}, 6, 0.5, 1.5));

    check2("add", a34, b34, [](Graph& g, Var x, Var y) { return g.add(x, y); });
    check2("sub", a34, b34, [](Graph& g, Var x, Var y) { return g.sub(x, y); });
    check2("mul", a34, b34, [](Graph& g, Var x, Var y) { return g.mul(x, y); });
    check2("div", a34, bpos, [](Graph& g, Var x, Var y) { return g.divide(x, y); });
    check1("affine", a34, [](Graph& g, Var x) { return g.affine(x, 1.7, -0.3); });
    check1("sigmoid", a34, [](Graph& g, Var x) { return g.sigmoid(x); });
    check1("silu", a34, [](Graph& g, Var x) { return g.silu(x); });

    Parameter akink("akink", detail::nudged({3, 4}, 7, {0.0, 1.0}));
    check1("relu", akink, [](Graph& g, Var x) { return g.relu(x); });
    check1("clamp01", akink, [](Graph& g, Var x) { return g.clamp01(x); });

    {
        LossFn fn = [&](bool wg) {
            Graph g;
            Var l = g.sum(g.param(a34));
            if (wg) g.backward(l);
            return l.val().v[0];
        };
        out.push_back({"sum", fd_check_params(fn, {&a34})});
    }
    {
        LossFn fn = [&](bool wg) {
            Graph g;
            Var l = g.mean(g.param(a34));
            if (wg) g.backward(l);
            return l.val().v[0];
        };
        out.push_back({"mean", fd_check_params(fn, {&a34})});
    }
    {
        LossFn fn = [&](bool wg) {
            Graph g;
            Var l = g.dot(g.param(a34), g.param(b34));
            if (wg) g.backward(l);
            return l.val().v[0];
        };
        out.push_back({"dot", fd_check_params(fn, {&a34, &b34})});
    }
    {
        LossFn fn = [&](bool wg) {
            Graph g;
            Var l = g.mse(g.param(a34), g.param(b34));
            if (wg) g.backward(l);
            return l.val().v[0];
        };
        out.push_back({"mse", fd_check_params(fn, {&a34, &b34})});
    }

    check1("mean_rows", a34, [](Graph& g, Var x) { return g.mean_rows(x); });

    Parameter m45("m45", rand_tensor({4, 5}, 8));
    check2("matmul", a34, m45, [](Graph& g, Var x, Var y) { return g.matmul(x, y); });
    check1("transpose", a34, [](Graph& g, Var x) { return g.transpose(x); });
    check2("add_rowvec", a34, v4, [](Graph& g, Var x, Var y) { return g.add_rowvec(x, y); });
    check2("add_cvec", chw, cv3, [](Graph& g, Var x, Var y) { return g.add_cvec(x, y); });
    check2("mul_cvec", chw, cv3, [](Graph& g, Var x, Var y) { return g.mul_cvec(x, y); });

    Parameter sm("sm", rand_tensor({4, 6}, 9, -2.0, 2.0));
    check1("softmax_rows", sm, [](Graph& g, Var x) { return g.softmax_rows(x); });

    Parameter nr("nr", rand_tensor({4, 6}, 10, 0.1, 1.0));
    check1("normalize_rows_sum", nr, [](Graph& g, Var x) { return g.normalize_rows_sum(x); });

    Parameter v7("v7", rand_tensor({7}, 11, 0.3, 1.0));
    check1("l2_normalize", v7, [](Graph& g, Var x) { return g.l2_normalize(x); });

    check1("reshape", chw, [](Graph& g, Var x) { return g.reshape(x, {4, 18}); });
    Parameter cc2("cc2", rand_tensor({2, 4, 6}, 12));
    check2("concat+slice_channels", chw, cc2, [](Graph& g, Var x, Var y) {
        return g.slice_channels(g.concat_channels({x, y}), 1, 4);
    });
    check1("chw_to_tokens", chw, [](Graph& g, Var x) { return g.chw_to_tokens(x); });
    Parameter t43("t43", rand_tensor({4, 3}, 34));
    check1("tokens_to_chw", t43, [](Graph& g, Var x) { return g.tokens_to_chw(x, 2, 2); });

    Parameter cx("cx", rand_tensor({3, 6, 6}, 13));
    Parameter cw("cw", rand_tensor({4, 3, 3, 3}, 14, -0.4, 0.4));
    Parameter cb("cb", rand_tensor({4}, 15));
    {
        Tensor wts = rand_tensor({4, 6, 6}, 997);
        for (Pad pad : {Pad::zero, Pad::circular}) {
            LossFn fn = [&, pad](bool wg) {
                Graph g;
                return weighted(g, g.conv2d(g.param(cx), g.param(cw), g.param(cb), pad), wts, wg);
            };
            out.push_back({pad == Pad::zero ? "conv2d_zero" : "conv2d_circular",
                           fd_check_params(fn, {&cx, &cw, &cb})});
        }
    }

    Parameter dk("dk", rand_tensor({3, 5, 5}, 16, -0.3, 0.3));
    check2("conv_depthwise_circular", cx, dk,
           [](Graph& g, Var x, Var k) { return g.conv_depthwise_circular(x, k); });

    check1("avg_pool2", cx, [](Graph& g, Var x) { return g.avg_pool2(x); });
    check1("upsample_nearest2", cx, [](Graph& g, Var x) { return g.upsample_nearest2(x); });

    Parameter hw8("hw8", rand_tensor({8, 8, 3}, 35));
    check1("crop_hw", hw8, [](Graph& g, Var x) { return g.crop_hw(x, 2, 3, 4, 4); });
    check1("center_all", a34, [](Graph& g, Var x) { return g.center_all(x); });

    Parameter gx("gx", rand_tensor({6, 4, 4}, 17));
    Parameter gg("gg", rand_tensor({6}, 18, 0.7, 1.3));
    Parameter gb("gb", rand_tensor({6}, 19, -0.2, 0.2));
    {
        Tensor wts = rand_tensor({6, 4, 4}, 996);
        LossFn fn = [&](bool wg) {
            Graph g;
            return weighted(g, g.group_norm(g.param(gx), g.param(gg), g.param(gb), 2), wts, wg);
        };
        out.push_back({"group_norm", fd_check_params(fn, {&gx, &gg, &gb})});
    }

    {
        Parameter img8("img8", detail::nudged({8, 8, 3}, 36, {0.0, 1.0}));
        Tensor wts = rand_tensor({48, 2, 2}, 994);
        LossFn fn = [&](bool wg) {
            Graph g;
            return weighted(g, tpg::encode_var(g, g.param(img8)), wts, wg);
        };
        out.push_back({"encode_var", fd_check_params(fn, {&img8})});
    }
    {
        Parameter lat8("lat8", detail::nudged({48, 2, 2}, 37, {-1.0, 1.0}));
        Tensor wts = rand_tensor({8, 8, 3}, 993);
        LossFn fn = [&](bool wg) {
            Graph g;
            return weighted(g, tpg::decode_var(g, g.param(lat8)), wts, wg);
        };
        out.push_back({"decode_var", fd_check_params(fn, {&lat8})});
    }

    // small composite network: conv -> norm -> silu -> pool -> tokens -> linear
    {
        tpg::Rng rng(20);
        tpg::Conv2dLayer conv("net.conv", 3, 4, 3, rng);
        tpg::GroupNormLayer norm("net.norm", 4, 2);
        tpg::Linear lin("net.lin", 4, 2, rng);
        tpg::ParamSet ps;
        conv.collect(ps);
        norm.collect(ps);
        lin.collect(ps);
        ps.add(cx);
        Tensor wts = rand_tensor({9, 2}, 995);
        LossFn fn = [&](bool wg) {
            Graph g;
            Var h = conv.forward(g, g.param(cx));
            h = norm.forward(g, h);
            h = g.silu(h);
            h = g.avg_pool2(h);
            Var tok = g.chw_to_tokens(h);
            Var y = lin.forward(g, tok);
            return weighted(g, y, wts, wg);
        };
        out.push_back({"composite_net", fd_check_params(fn, ps.items)});
    }

    return out;
}

}  // namespace oracle

#endif
