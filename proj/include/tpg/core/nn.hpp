#ifndef TPG_CORE_NN_HPP
#define TPG_CORE_NN_HPP

#include <cmath>
#include <string>
#include <vector>

#include "tpg/core/graph.hpp"
#include "tpg/core/rng.hpp"
#include "tpg/core/tensor.hpp"

namespace tpg {

struct ParamSet {
    std::vector<Parameter*> items;

    void add(Parameter& p) { items.push_back(&p); }

    int64_t count() const {
        int64_t n = 0;
        for (auto* p : items) n += p->value.numel();
        return n;
    }

    void zero_grad() {
        for (auto* p : items) p->zero_grad();
    }

    Parameter* find(const std::string& name) const {
        for (auto* p : items)
            if (p->name == name) return p;
        return nullptr;
    }
};

inline void init_uniform(Parameter& p, Rng& rng, double s) {
    for (auto& e : p.value.v) e = rng.uniform(-s, s);
}

inline void init_normal(Parameter& p, Rng& rng, double sd) {
    for (auto& e : p.value.v) e = sd * rng.normal();
}

// y = x·W + b with x (L,in), W (in,out), b (out)
struct Linear {
    Parameter W, b;

    Linear() = default;
    Linear(const std::string& name, int in, int out, Rng& rng, bool zero_out = false)
        : W(name + ".W", Tensor({in, out})), b(name + ".b", Tensor({out})) {
        if (!zero_out) init_uniform(W, rng, std::sqrt(1.0 / double(in)));
    }

    Var forward(Graph& g, Var x) const {
        return g.add_rowvec(g.matmul(x, g.param(const_cast<Parameter&>(W))),
                            g.param(const_cast<Parameter&>(b)));
    }

    Var forward(Graph& g, Var x, bool frozen) const {
        if (!frozen) return forward(g, x);
        return g.add_rowvec(g.matmul(x, g.frozen(W)), g.frozen(b));
    }

    void collect(ParamSet& ps) {
        ps.add(W);
        ps.add(b);
    }
};

struct Conv2dLayer {
    Parameter W, b;
    Pad pad = Pad::zero;

    Conv2dLayer() = default;
    Conv2dLayer(const std::string& name, int in_ch, int out_ch, int k, Rng& rng,
                Pad p = Pad::zero, bool zero_out = false)
        : W(name + ".W", Tensor({out_ch, in_ch, k, k})), b(name + ".b", Tensor({out_ch})), pad(p) {
        if (!zero_out) init_uniform(W, rng, std::sqrt(1.0 / double(in_ch * k * k)));
    }

    Var forward(Graph& g, Var x, bool frozen = false) const {
        if (frozen) return g.conv2d(x, g.frozen(W), g.frozen(b), pad);
        return g.conv2d(x, g.param(const_cast<Parameter&>(W)), g.param(const_cast<Parameter&>(b)),
                        pad);
    }

    void collect(ParamSet& ps) {
        ps.add(W);
        ps.add(b);
    }
};

struct GroupNormLayer {
    Parameter gamma, beta;
    int groups = 8;

    GroupNormLayer() = default;
    GroupNormLayer(const std::string& name, int ch, int g)
        : gamma(name + ".gamma", Tensor({ch}, 1.0)), beta(name + ".beta", Tensor({ch})), groups(g) {}

    Var forward(Graph& g, Var x, bool frozen = false) const {
        if (frozen) return g.group_norm(x, g.frozen(gamma), g.frozen(beta), groups);
        return g.group_norm(x, g.param(const_cast<Parameter&>(gamma)),
                            g.param(const_cast<Parameter&>(beta)), groups);
    }

    void collect(ParamSet& ps) {
        ps.add(gamma);
        ps.add(beta);
    }
};

// Adam with bias correction. Moment state is tied to the parameter list order
// and travels through checkpoints so a resumed run continues bit-identically.
struct Adam {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int64_t t = 0;
    std::vector<Parameter*> params;
    std::vector<Tensor> m, v;

    Adam() = default;
    explicit Adam(const ParamSet& ps, double learning_rate) : lr(learning_rate), params(ps.items) {
        for (auto* p : params) {
            m.emplace_back(p->value.shape);
            v.emplace_back(p->value.shape);
        }
    }

    void step() {
        ++t;
        double c1 = 1.0 - std::pow(beta1, double(t));
        double c2 = 1.0 - std::pow(beta2, double(t));
        for (size_t k = 0; k < params.size(); ++k) {
            Parameter& p = *params[k];
            for (size_t i = 0; i < p.value.v.size(); ++i) {
                double gi = p.grad.v[i];
                m[k].v[i] = beta1 * m[k].v[i] + (1.0 - beta1) * gi;
                v[k].v[i] = beta2 * v[k].v[i] + (1.0 - beta2) * gi * gi;
                double mh = m[k].v[i] / c1;
                double vh = v[k].v[i] / c2;
                p.value.v[i] -= lr * mh / (std::sqrt(vh) + eps);
            }
            p.zero_grad();
        }
    }
};

// classic sinusoidal embedding for integer timesteps
inline Tensor timestep_embedding(int t, int dim) {
    TPG_REQUIRE(dim % 2 == 0, errc::config, "timestep embedding dim must be even");
    Tensor e({dim});
    int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * double(i) / double(half));
        e.v[size_t(i)] = std::sin(double(t) * freq);
        e.v[size_t(half + i)] = std::cos(double(t) * freq);
    }
    return e;
}

}  // namespace tpg

#endif
