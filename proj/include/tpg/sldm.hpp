#ifndef TPG_SLDM_HPP
#define TPG_SLDM_HPP

#include <cmath>
#include <string>
#include <vector>

#include "tpg/codec.hpp"
#include "tpg/config.hpp"
#include "tpg/core/graph.hpp"
#include "tpg/core/nn.hpp"
#include "tpg/core/rng.hpp"

namespace tpg {

// ---- schedule -----------------------------------------------------------------

struct NoiseSchedule {
    int T = 1000;
    std::vector<double> beta;       // index 1..T
    std::vector<double> alpha_bar;  // index 0..T, alpha_bar[0] = 1

    NoiseSchedule() : NoiseSchedule(1000, 1e-4, 2e-2) {}
    NoiseSchedule(int T_, double beta_start, double beta_end) : T(T_) {
        TPG_REQUIRE(T >= 1, errc::config, "schedule needs T >= 1");
        beta.assign(size_t(T) + 1, 0.0);
        alpha_bar.assign(size_t(T) + 1, 1.0);
        for (int t = 1; t <= T; ++t) {
            double frac = T == 1 ? 0.0 : double(t - 1) / double(T - 1);
            double b = beta_start + (beta_end - beta_start) * frac;
            TPG_REQUIRE(b > 0.0 && b < 1.0, errc::config, "beta outside (0,1)");
            beta[size_t(t)] = b;
            alpha_bar[size_t(t)] = alpha_bar[size_t(t) - 1] * (1.0 - b);
            TPG_REQUIRE(alpha_bar[size_t(t)] < alpha_bar[size_t(t) - 1], errc::config,
                        "alpha_bar must strictly decrease");
        }
    }

    double bar(int t) const {
        TPG_REQUIRE(t >= 0 && t <= T, errc::domain, "timestep out of range");
        return alpha_bar[size_t(t)];
    }
};

// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps; t = 0 is the identity
inline Tensor add_noise(const NoiseSchedule& sched, const Tensor& z0, const Tensor& eps, int t) {
    TPG_REQUIRE(z0.shape == eps.shape, errc::shape, "noise shape mismatch");
    double ab = sched.bar(t);
    double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
    Tensor out = z0;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = sa * out.v[i] + sb * eps.v[i];
    return out;
}

// closed-form clean-latent estimate from a noised latent and a noise estimate
inline Tensor predict_latent0(const NoiseSchedule& sched, const Tensor& z_t, const Tensor& eps,
                              int t) {
    TPG_REQUIRE(z_t.shape == eps.shape, errc::shape, "noise shape mismatch");
    double ab = sched.bar(t);
    double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
    Tensor out = z_t;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = (out.v[i] - sb * eps.v[i]) / sa;
    return out;
}

inline Var predict_latent0_var(Graph& g, const NoiseSchedule& sched, Var z_t, Var eps_hat, int t) {
    double ab = sched.bar(t);
    double sb = std::sqrt(1.0 - ab), inv_sa = 1.0 / std::sqrt(ab);
    return g.scale(g.sub(z_t, g.scale(eps_hat, sb)), inv_sa);
}

// ---- conditioning ----------------------------------------------------------------

// (C,H,W) -> (H*W, C) without touching a graph
inline Tensor tokens_from_chw(const Tensor& x) {
    TPG_REQUIRE(x.ndim() == 3, errc::shape, "tokens_from_chw expects 3D");
    int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    Tensor out({H * W, C});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
            for (int x2 = 0; x2 < W; ++x2) out.at(y * W + x2, c) = x.at(c, y, x2);
    return out;
}

// empty tensors mean "slot is null"; the denoiser substitutes its learned null
// tokens for empty slots
struct ConditioningBundle {
    Tensor content_tokens;    // (L, d)
    Tensor structure_tokens;  // (L, c)
    Tensor defect_tokens;     // (L, c)
    Tensor global_vec;        // (d)

    bool has_content() const { return content_tokens.numel() > 0; }
    bool has_structure() const { return structure_tokens.numel() > 0; }
    bool has_defect() const { return defect_tokens.numel() > 0; }
    bool has_global() const { return global_vec.numel() > 0; }
};

// channel concat [z_t, z_c, M]; order fixed
inline Tensor assemble_input(const Tensor& z_t, const Tensor& z_c, const Tensor& mask_lat) {
    TPG_REQUIRE(z_t.ndim() == 3 && z_c.ndim() == 3 && mask_lat.ndim() == 2, errc::shape,
                "assemble_input expects (c,h,w), (c,h,w), (h,w)");
    int h = z_t.dim(1), w = z_t.dim(2);
    TPG_REQUIRE(z_c.dim(1) == h && z_c.dim(2) == w && mask_lat.dim(0) == h &&
                    mask_lat.dim(1) == w,
                errc::shape, "assemble_input spatial mismatch");
    int c1 = z_t.dim(0), c2 = z_c.dim(0);
    Tensor phi({c1 + c2 + 1, h, w});
    std::copy(z_t.v.begin(), z_t.v.end(), phi.v.begin());
    std::copy(z_c.v.begin(), z_c.v.end(), phi.v.begin() + z_t.numel());
    std::copy(mask_lat.v.begin(), mask_lat.v.end(), phi.v.begin() + z_t.numel() + z_c.numel());
    return phi;
}

// ---- denoiser -------------------------------------------------------------------

struct DenoiserProbe {
    struct Entry {
        std::string name;
        Tensor tokens_in;   // pre-attention tokens
        Tensor attn_raw;    // summed slot attention before the output projection
        Tensor block_out;   // post-residual feature map
    };
    std::vector<Entry> entries;
};

namespace denoiser_detail {

struct ResBlock {
    GroupNormLayer gn1, gn2;
    Conv2dLayer c1, c2, skip;
    Linear temb;
    bool has_skip = false;
    int te_dim = 0, out_ch = 0;

    ResBlock() = default;
    ResBlock(const std::string& name, int in_ch, int out_ch_, int te_dim_, Rng& rng)
        : gn1(name + ".gn1", in_ch, 8),
          gn2(name + ".gn2", out_ch_, 8),
          c1(name + ".c1", in_ch, out_ch_, 3, rng),
          c2(name + ".c2", out_ch_, out_ch_, 3, rng, Pad::zero, true),
          temb(name + ".temb", te_dim_, out_ch_, rng),
          has_skip(in_ch != out_ch_),
          te_dim(te_dim_),
          out_ch(out_ch_) {
        if (has_skip) skip = Conv2dLayer(name + ".skip", in_ch, out_ch_, 1, rng);
    }

    void collect(ParamSet& ps) {
        gn1.collect(ps);
        gn2.collect(ps);
        c1.collect(ps);
        c2.collect(ps);
        temb.collect(ps);
        if (has_skip) skip.collect(ps);
    }

    Var forward(Graph& g, Var x, Var te, bool frozen) const {
        Var h = c1.forward(g, g.silu(gn1.forward(g, x, frozen)), frozen);
        Var tvec = g.reshape(temb.forward(g, g.reshape(te, {1, te_dim}), frozen), {out_ch});
        h = g.add_cvec(h, tvec);
        h = c2.forward(g, g.silu(gn2.forward(g, h, frozen)), frozen);
        Var s = has_skip ? skip.forward(g, x, frozen) : x;
        return g.add(s, h);
    }
};

struct SlotAttn {
    Linear wq, wk, wv;
    bool active = false;

    SlotAttn() = default;
    SlotAttn(const std::string& name, int ch, int slot_dim, int d_head, Rng& rng)
        : wq(name + ".q", ch, d_head, rng),
          wk(name + ".k", slot_dim, d_head, rng),
          wv(name + ".v", slot_dim, ch, rng),
          active(true) {}

    void collect(ParamSet& ps) {
        if (!active) return;
        wq.collect(ps);
        wk.collect(ps);
        wv.collect(ps);
    }

    Var forward(Graph& g, Var x_tokens, Var slot_tokens, int d_head, bool frozen) const {
        Var q = wq.forward(g, x_tokens, frozen);
        Var k = wk.forward(g, slot_tokens, frozen);
        Var v = wv.forward(g, slot_tokens, frozen);
        Var A = g.softmax_rows(g.scale(g.matmul(q, g.transpose(k)), 1.0 / std::sqrt(double(d_head))));
        return g.matmul(A, v);
    }
};

struct BundleVars {
    Var content, structure, defect;
};

struct AttnBlock {
    std::string name;
    GroupNormLayer gn;
    SlotAttn content, structure, defect;
    Linear wo;
    int d_head = 32;

    AttnBlock() = default;
    AttnBlock(const std::string& name_, int ch, bool use_content, bool use_structure,
              bool use_defect, int d_content, int d_latent, int d_head_, Rng& rng)
        : name(name_), gn(name_ + ".gn", ch, 8), wo(name_ + ".wo", ch, ch, rng, true),
          d_head(d_head_) {
        if (use_content) content = SlotAttn(name_ + ".content", ch, d_content, d_head_, rng);
        if (use_structure) structure = SlotAttn(name_ + ".structure", ch, d_latent, d_head_, rng);
        if (use_defect) defect = SlotAttn(name_ + ".defect", ch, d_latent, d_head_, rng);
    }

    void collect(ParamSet& ps) {
        gn.collect(ps);
        content.collect(ps);
        structure.collect(ps);
        defect.collect(ps);
        wo.collect(ps);
    }

    Var forward(Graph& g, Var x, const BundleVars& b, bool frozen, DenoiserProbe* probe) const {
        int h = x.val().dim(1), w = x.val().dim(2);
        Var tok = g.chw_to_tokens(gn.forward(g, x, frozen));
        Var acc{};
        auto add_slot = [&](const SlotAttn& s, Var slot_tokens) {
            if (!s.active) return;
            Var piece = s.forward(g, tok, slot_tokens, d_head, frozen);
            acc = acc.valid() ? g.add(acc, piece) : piece;
        };
        add_slot(content, b.content);
        add_slot(structure, b.structure);
        add_slot(defect, b.defect);
        TPG_REQUIRE(acc.valid(), errc::state, "attention block with no active slots");
        Var out = g.add(x, g.tokens_to_chw(wo.forward(g, acc, frozen), h, w));
        if (probe)
            probe->entries.push_back({name, tok.val(), acc.val(), out.val()});
        return out;
    }
};

}  // namespace denoiser_detail

// U-shaped noise predictor, resolutions 16/8/4 with channels b/2b/3b. Cross
// attention routing: structure tokens feed the 16x16 blocks, content tokens the
// 4x4 block, defect tokens every block; the global vector joins the timestep
// embedding.
struct DenoiserNet {
    int base = 32, te_dim = 64, d_content = 64, d_latent = 48, d_head = 32;
    Linear te1, te2, glob_proj;
    Parameter null_content, null_structure, null_defect, null_global;
    Conv2dLayer stem;
    denoiser_detail::ResBlock rb_d1, rb_d2, rb_mid1, rb_mid2, rb_u2, rb_u1;
    denoiser_detail::AttnBlock at16_down, at8_down, at4_mid, at8_up, at16_up;
    GroupNormLayer gn_out;
    Conv2dLayer head;

    DenoiserNet() = default;
    DenoiserNet(int base_, int d_content_, int d_latent_, int d_head_, uint64_t seed)
        : base(base_), te_dim(2 * base_), d_content(d_content_), d_latent(d_latent_),
          d_head(d_head_) {
        Rng rng = rng_stream(seed, "denoiser_init");
        te1 = Linear("den.te1", 64, te_dim, rng);
        te2 = Linear("den.te2", te_dim, te_dim, rng);
        glob_proj = Linear("den.glob", d_content, te_dim, rng);
        null_content = Parameter("den.null_content", Tensor({1, d_content}));
        null_structure = Parameter("den.null_structure", Tensor({1, d_latent}));
        null_defect = Parameter("den.null_defect", Tensor({1, d_latent}));
        null_global = Parameter("den.null_global", Tensor({d_content}));
        init_normal(null_content, rng, 0.02);
        init_normal(null_structure, rng, 0.02);
        init_normal(null_defect, rng, 0.02);
        init_normal(null_global, rng, 0.02);

        int in_ch = 2 * d_latent + 1;
        stem = Conv2dLayer("den.stem", in_ch, base, 3, rng);
        using denoiser_detail::AttnBlock;
        using denoiser_detail::ResBlock;
        rb_d1 = ResBlock("den.rb_d1", base, base, te_dim, rng);
        at16_down = AttnBlock("attn16_down", base, false, true, true, d_content, d_latent,
                              d_head, rng);
        rb_d2 = ResBlock("den.rb_d2", base, 2 * base, te_dim, rng);
        at8_down = AttnBlock("attn8_down", 2 * base, false, false, true, d_content, d_latent,
                             d_head, rng);
        rb_mid1 = ResBlock("den.rb_mid1", 2 * base, 3 * base, te_dim, rng);
        rb_mid2 = ResBlock("den.rb_mid2", 3 * base, 3 * base, te_dim, rng);
        at4_mid = AttnBlock("attn4_mid", 3 * base, true, false, true, d_content, d_latent,
                            d_head, rng);
        rb_u2 = ResBlock("den.rb_u2", 3 * base + 2 * base, 2 * base, te_dim, rng);
        at8_up = AttnBlock("attn8_up", 2 * base, false, false, true, d_content, d_latent,
                           d_head, rng);
        rb_u1 = ResBlock("den.rb_u1", 2 * base + base, base, te_dim, rng);
        at16_up = AttnBlock("attn16_up", base, false, true, true, d_content, d_latent, d_head,
                            rng);
        gn_out = GroupNormLayer("den.gn_out", base, 8);
        head = Conv2dLayer("den.head", base, d_latent, 3, rng, Pad::zero, true);
    }

    void collect(ParamSet& ps) {
        te1.collect(ps);
        te2.collect(ps);
        glob_proj.collect(ps);
        ps.add(null_content);
        ps.add(null_structure);
        ps.add(null_defect);
        ps.add(null_global);
        stem.collect(ps);
        rb_d1.collect(ps);
        at16_down.collect(ps);
        rb_d2.collect(ps);
        at8_down.collect(ps);
        rb_mid1.collect(ps);
        rb_mid2.collect(ps);
        at4_mid.collect(ps);
        rb_u2.collect(ps);
        at8_up.collect(ps);
        rb_u1.collect(ps);
        at16_up.collect(ps);
        gn_out.collect(ps);
        head.collect(ps);
    }

    Var forward(Graph& g, Var phi, const ConditioningBundle& bundle, int t, bool frozen = false,
                DenoiserProbe* probe = nullptr) const {
        TPG_REQUIRE(phi.val().ndim() == 3 && phi.val().dim(0) == 2 * d_latent + 1, errc::shape,
                    "denoiser input channels mismatch");

        auto param_or = [&](const Parameter& p) {
            return frozen ? g.frozen(p) : g.param(const_cast<Parameter&>(p));
        };
        denoiser_detail::BundleVars bv;
        bv.content = bundle.has_content() ? g.input(bundle.content_tokens)
                                          : param_or(null_content);
        bv.structure = bundle.has_structure() ? g.input(bundle.structure_tokens)
                                              : param_or(null_structure);
        bv.defect = bundle.has_defect() ? g.input(bundle.defect_tokens) : param_or(null_defect);

        Var te = g.input(timestep_embedding(t, 64));
        te = g.reshape(te2.forward(g, g.silu(te1.forward(g, g.reshape(te, {1, 64}), frozen)),
                                   frozen),
                       {te_dim});
        Var gv = bundle.has_global() ? g.input(bundle.global_vec) : param_or(null_global);
        Var gproj = g.reshape(glob_proj.forward(g, g.reshape(gv, {1, d_content}), frozen),
                              {te_dim});
        te = g.add(te, gproj);

        Var x16 = stem.forward(g, phi, frozen);
        x16 = rb_d1.forward(g, x16, te, frozen);
        x16 = at16_down.forward(g, x16, bv, frozen, probe);

        Var x8 = rb_d2.forward(g, g.avg_pool2(x16), te, frozen);
        x8 = at8_down.forward(g, x8, bv, frozen, probe);

        Var x4 = rb_mid1.forward(g, g.avg_pool2(x8), te, frozen);
        x4 = rb_mid2.forward(g, x4, te, frozen);
        x4 = at4_mid.forward(g, x4, bv, frozen, probe);

        Var u8 = g.concat_channels({g.upsample_nearest2(x4), x8});
        u8 = rb_u2.forward(g, u8, te, frozen);
        u8 = at8_up.forward(g, u8, bv, frozen, probe);

        Var u16 = g.concat_channels({g.upsample_nearest2(u8), x16});
        u16 = rb_u1.forward(g, u16, te, frozen);
        u16 = at16_up.forward(g, u16, bv, frozen, probe);

        return head.forward(g, g.silu(gn_out.forward(g, u16, frozen)), frozen);
    }

    // convenience no-grad pass
    Tensor predict_eps(const Tensor& phi, const ConditioningBundle& bundle, int t,
                       DenoiserProbe* probe = nullptr) const {
        Graph g(false);
        return forward(g, g.input(phi), bundle, t, true, probe).val();
    }
};

// mean over elements of ||eps_theta - eps||^2
inline Var loss_dp(Graph& g, const DenoiserNet& net, Var phi, const ConditioningBundle& bundle,
                   int t, const Tensor& eps_true, bool frozen = false) {
    Var pred = net.forward(g, phi, bundle, t, frozen);
    return g.mse(pred, g.input(eps_true));
}

// eps_neg + s * (eps_pos - eps_neg); s in {0, 1} short-circuits to one pass
inline Tensor cfg_epsilon(const DenoiserNet& net, const Tensor& phi,
                          const ConditioningBundle& pos, const ConditioningBundle& neg, double s,
                          int t) {
    TPG_REQUIRE(s >= 0.0, errc::config, "guidance scale must be >= 0");
    if (s == 0.0) return net.predict_eps(phi, neg, t);
    if (s == 1.0) return net.predict_eps(phi, pos, t);
    Tensor ep = net.predict_eps(phi, pos, t);
    Tensor en = net.predict_eps(phi, neg, t);
    Tensor out = en;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = en.v[i] + s * (ep.v[i] - en.v[i]);
    return out;
}

// deterministic-variance reverse process over a strided timestep ladder
inline Tensor sample_latent(const DenoiserNet& net, const NoiseSchedule& sched, const Tensor& z_c,
                            const Tensor& mask_lat, const ConditioningBundle& pos,
                            const ConditioningBundle& neg, const SamplerConfig& cfg,
                            uint64_t seed) {
    cfg.validate();
    Rng rng = rng_stream(seed, "sample_init");
    Tensor z(z_c.shape);
    for (auto& e : z.v) e = rng.normal();

    std::vector<int> ladder;
    int steps = std::min(cfg.steps, sched.T);
    for (int i = 0; i < steps; ++i) {
        double frac = steps == 1 ? 0.0 : double(i) / double(steps - 1);
        int t = int(std::lround(sched.T - frac * (sched.T - 1)));
        if (ladder.empty() || t < ladder.back()) ladder.push_back(t);
    }

    for (size_t i = 0; i < ladder.size(); ++i) {
        int t = ladder[i];
        int t_next = (i + 1 < ladder.size()) ? ladder[i + 1] : 0;
        Tensor phi = assemble_input(z, z_c, mask_lat);
        Tensor eps = cfg_epsilon(net, phi, pos, neg, cfg.guidance, t);
        Tensor z0 = predict_latent0(sched, z, eps, t);
        double ab = sched.bar(t_next);
        double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
        for (size_t j = 0; j < z.v.size(); ++j) z.v[j] = sa * z0.v[j] + sb * eps.v[j];
    }
    return z;
}

inline Tensor sample_image(const DenoiserNet& net, const NoiseSchedule& sched, const Tensor& z_c,
                           const Tensor& mask_lat, const ConditioningBundle& pos,
                           const ConditioningBundle& neg, const SamplerConfig& cfg,
                           uint64_t seed) {
    return decode_latent(sample_latent(net, sched, z_c, mask_lat, pos, neg, cfg, seed));
}

}  // namespace tpg

#endif
