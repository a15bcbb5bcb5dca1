#ifndef TPG_LDN_HPP
#define TPG_LDN_HPP

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "tpg/codec.hpp"
#include "tpg/config.hpp"
#include "tpg/core/graph.hpp"
#include "tpg/core/image.hpp"
#include "tpg/core/nn.hpp"
#include "tpg/core/rng.hpp"

namespace tpg {

// ---- augmentation -----------------------------------------------------------

struct AugmentParams {
    double crop_scale = 1.0;  // area fraction
    int off_y = 0, off_x = 0;
    bool hflip = false, vflip = false;
    int rot90 = 0;
    double contrast = 1.0;
    double brightness = 1.0;

    static AugmentParams draw(int image_size, Rng& rng) {
        AugmentParams p;
        p.crop_scale = rng.uniform(0.6, 1.0);
        int side = std::max(1, int(std::lround(image_size * std::sqrt(p.crop_scale))));
        side = std::min(side, image_size);
        p.off_y = int(rng.uniform_int(uint64_t(image_size - side + 1)));
        p.off_x = int(rng.uniform_int(uint64_t(image_size - side + 1)));
        p.hflip = rng.bernoulli(0.5);
        p.vflip = rng.bernoulli(0.5);
        p.rot90 = int(rng.uniform_int(4));
        p.contrast = rng.uniform(0.9, 1.1);
        p.brightness = rng.uniform(0.9, 1.1);
        return p;
    }
};

inline Tensor apply_augment(const Tensor& img, const AugmentParams& p) {
    require_image(img, "apply_augment");
    int n = img.dim(0);
    TPG_REQUIRE(img.dim(1) == n, errc::shape, "augment expects square images");

    int side = std::max(1, std::min(n, int(std::lround(n * std::sqrt(p.crop_scale)))));
    Tensor out({n, n, 3});
    if (side == n && p.off_y == 0 && p.off_x == 0) {
        out = img;
    } else {
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x) {
                double sy = (y + 0.5) * side / double(n) - 0.5 + p.off_y;
                double sx = (x + 0.5) * side / double(n) - 0.5 + p.off_x;
                sy = std::min(std::max(sy, 0.0), double(n - 1));
                sx = std::min(std::max(sx, 0.0), double(n - 1));
                int y0 = int(sy), x0 = int(sx);
                int y1 = std::min(y0 + 1, n - 1), x1 = std::min(x0 + 1, n - 1);
                double ty = sy - y0, tx = sx - x0;
                for (int c = 0; c < 3; ++c)
                    out.at(y, x, c) =
                        (1 - ty) * ((1 - tx) * img.at(y0, x0, c) + tx * img.at(y0, x1, c)) +
                        ty * ((1 - tx) * img.at(y1, x0, c) + tx * img.at(y1, x1, c));
            }
    }

    auto flipped = [&](int y, int x) {
        int yy = p.vflip ? n - 1 - y : y;
        int xx = p.hflip ? n - 1 - x : x;
        return std::pair<int, int>(yy, xx);
    };
    Tensor fl({n, n, 3});
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            auto [sy, sx] = flipped(y, x);
            for (int c = 0; c < 3; ++c) fl.at(y, x, c) = out.at(sy, sx, c);
        }

    Tensor rot({n, n, 3});
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            int sy = y, sx = x;
            for (int r = 0; r < p.rot90 % 4; ++r) {
                int ny = sx, nx = n - 1 - sy;
                sy = ny;
                sx = nx;
            }
            for (int c = 0; c < 3; ++c) rot.at(y, x, c) = fl.at(sy, sx, c);
        }

    if (p.contrast == 1.0 && p.brightness == 1.0) return rot;
    for (auto& e : rot.v) e = clamp01d(((e - 0.5) * p.contrast + 0.5) * p.brightness);
    return rot;
}

inline Tensor augment_view(const Tensor& img, uint64_t seed) {
    Rng rng = rng_stream(seed, "augment");
    return apply_augment(img, AugmentParams::draw(img.dim(0), rng));
}

// ---- SCM ---------------------------------------------------------------------

struct ContentFeature {
    Tensor token_map;  // (L, d)
    Tensor pooled;     // (d), unit L2 norm
};

// SimSiam-style content extractor over latents: 3 resolution-preserving conv
// stages, a pointwise projector, a 2-layer predictor.
struct ScmNetwork {
    int d = 64;
    Conv2dLayer e1, e2, e3;
    Linear projector, pred1, pred2;

    ScmNetwork() = default;
    ScmNetwork(int d_, Rng& rng)
        : d(d_),
          e1("scm.e1", latent_channels(), 64, 3, rng),
          e2("scm.e2", 64, 64, 3, rng),
          e3("scm.e3", 64, d_, 3, rng),
          projector("scm.proj", d_, d_, rng),
          pred1("scm.pred1", d_, d_, rng),
          pred2("scm.pred2", d_, d_, rng) {}

    void collect(ParamSet& ps) {
        e1.collect(ps);
        e2.collect(ps);
        e3.collect(ps);
        projector.collect(ps);
        pred1.collect(ps);
        pred2.collect(ps);
    }

    std::array<Var, 3> stages_var(Graph& g, Var z, bool frozen) const {
        Var s1 = g.silu(e1.forward(g, z, frozen));
        Var s2 = g.silu(e2.forward(g, s1, frozen));
        Var s3 = e3.forward(g, s2, frozen);
        return {s1, s2, s3};
    }

    Var tokens_var(Graph& g, Var z, bool frozen) const {
        return g.chw_to_tokens(stages_var(g, z, frozen)[2]);
    }

    // mean over tokens of the projector output, before normalization
    Var pooled_raw_var(Graph& g, Var tokens, bool frozen) const {
        return g.mean_rows(projector.forward(g, tokens, frozen));
    }

    Var predict_var(Graph& g, Var pooled_raw, bool frozen) const {
        Var h = g.reshape(pooled_raw, {1, d});
        h = g.silu(pred1.forward(g, h, frozen));
        h = pred2.forward(g, h, frozen);
        return g.reshape(h, {d});
    }
};

// cosine of unit-normalized vectors
inline Var cosine_var(Graph& g, Var a, Var b) {
    return g.dot(g.l2_normalize(a), g.l2_normalize(b));
}

// Contrastive loss with the stop-gradient targets supplied by net_stop. The
// production loss passes the same network twice; tests pass twins to observe
// that parameters reachable only through the stopped branch get zero gradient.
inline Var loss_scm_dual(Graph& g, const ScmNetwork& net_pred, const ScmNetwork& net_stop,
                         Var z_c, Var z_p, bool frozen = false) {
    Var tok_c = net_pred.tokens_var(g, z_c, frozen);
    Var tok_p = net_pred.tokens_var(g, z_p, frozen);
    Var raw_c = net_pred.pooled_raw_var(g, tok_c, frozen);
    Var raw_p = net_pred.pooled_raw_var(g, tok_p, frozen);
    Var sp_c = net_pred.predict_var(g, raw_c, frozen);
    Var sp_p = net_pred.predict_var(g, raw_p, frozen);

    Var stok_c = net_stop.tokens_var(g, z_c, frozen);
    Var stok_p = net_stop.tokens_var(g, z_p, frozen);
    Var se_c = g.detach(net_stop.pooled_raw_var(g, stok_c, frozen));
    Var se_p = g.detach(net_stop.pooled_raw_var(g, stok_p, frozen));

    Var sim1 = cosine_var(g, sp_p, se_c);
    Var sim2 = cosine_var(g, sp_c, se_p);
    return g.scale(g.add(sim1, sim2), -0.5);
}

inline Var loss_scm(Graph& g, const ScmNetwork& net, Var z_c, Var z_p, bool frozen = false) {
    return loss_scm_dual(g, net, net, z_c, z_p, frozen);
}

// ---- RAM ----------------------------------------------------------------------

// plain-tensor reversed-attention rows: (1 - a) / sum(1 - a), uniform on
// degenerate rows
inline Tensor reversed_attention_rows(const Tensor& A) {
    TPG_REQUIRE(A.ndim() == 2, errc::shape, "expected 2D attention matrix");
    int L = A.dim(0), M = A.dim(1);
    Tensor out({L, M});
    for (int i = 0; i < L; ++i) {
        double s = 0.0;
        for (int j = 0; j < M; ++j) s += 1.0 - A.at(i, j);
        if (std::fabs(s) < 1e-12) {
            for (int j = 0; j < M; ++j) out.at(i, j) = 1.0 / double(M);
        } else {
            for (int j = 0; j < M; ++j) out.at(i, j) = (1.0 - A.at(i, j)) / s;
        }
    }
    return out;
}

struct RamProbe {
    std::vector<Tensor> A;
    std::vector<Tensor> Ar;
};

// Cross-attention stack with reversed weights: each layer queries with content
// tokens and aggregates the latent-token values most dissimilar to them.
struct RamStack {
    int n_layers = 2;
    int d_head = 32;
    std::vector<Linear> wq, wk, wv;

    RamStack() = default;
    RamStack(int n, int d, int d_head_, int c, Rng& rng) : n_layers(n), d_head(d_head_) {
        for (int i = 0; i < n; ++i) {
            std::string base = "ram." + std::to_string(i);
            wq.emplace_back(base + ".q", d, d_head_, rng);
            wk.emplace_back(base + ".k", c, d_head_, rng);
            wv.emplace_back(base + ".v", c, c, rng);
        }
    }

    void collect(ParamSet& ps) {
        for (int i = 0; i < n_layers; ++i) {
            wq[size_t(i)].collect(ps);
            wk[size_t(i)].collect(ps);
            wv[size_t(i)].collect(ps);
        }
    }

    Var forward(Graph& g, Var content_tokens, Var z, bool frozen = false,
                RamProbe* probe = nullptr) const {
        const Tensor& zt = z.val();
        TPG_REQUIRE(zt.ndim() == 3, errc::shape, "ram expects latent (c,h,w)");
        int h = zt.dim(1), w = zt.dim(2);
        int L = h * w;
        TPG_REQUIRE(L > 0, errc::shape, "empty token set");
        TPG_REQUIRE(content_tokens.val().dim(0) == L, errc::shape,
                    "content token count must match latent tokens");

        Var z_tokens = g.chw_to_tokens(z);
        Var out = z;
        double inv_sqrt = 1.0 / std::sqrt(double(d_head));
        for (int i = 0; i < n_layers; ++i) {
            Var q = wq[size_t(i)].forward(g, content_tokens, frozen);
            Var k = wk[size_t(i)].forward(g, z_tokens, frozen);
            Var v = wv[size_t(i)].forward(g, z_tokens, frozen);
            Var scores = g.scale(g.matmul(q, g.transpose(k)), inv_sqrt);
            Var A = g.softmax_rows(scores);
            Var Ar = g.normalize_rows_sum(g.affine(A, -1.0, 1.0));
            if (probe) {
                probe->A.push_back(A.val());
                probe->Ar.push_back(Ar.val());
            }
            out = g.add(out, g.tokens_to_chw(g.matmul(Ar, v), h, w));
        }
        return out;
    }
};

// ---- SATs ---------------------------------------------------------------------

namespace sat_detail {

inline Tensor identity_kernel(int c) {
    Tensor k({c, 5, 5});
    for (int i = 0; i < c; ++i) k.at(i, 2, 2) = 1.0;
    return k;
}

inline Tensor gaussian_kernel(int c, double sigma = 1.0) {
    Tensor k({c, 5, 5});
    double s = 0.0;
    for (int y = 0; y < 5; ++y)
        for (int x = 0; x < 5; ++x) {
            double d2 = (y - 2) * (y - 2) + (x - 2) * (x - 2);
            double w = std::exp(-d2 / (2.0 * sigma * sigma));
            k.at(0, y, x) = w;
            s += w;
        }
    for (int y = 0; y < 5; ++y)
        for (int x = 0; x < 5; ++x) k.at(0, y, x) /= s;
    for (int i = 1; i < c; ++i)
        for (int y = 0; y < 5; ++y)
            for (int x = 0; x < 5; ++x) k.at(i, y, x) = k.at(0, y, x);
    return k;
}

// 2*identity - gaussian; sums to 1, sharpens
inline Tensor unsharp_kernel(int c) {
    Tensor k = gaussian_kernel(c);
    for (auto& e : k.v) e = -e;
    for (int i = 0; i < c; ++i) k.at(i, 2, 2) += 2.0;
    return k;
}

}  // namespace sat_detail

// Learnable filter units: out = x + scale (.) (k * x - x) + shift, applied in
// sequence. Normalized kernels plus this residual form keep constants constant
// and make the all-default stack the identity when later units are zeroed.
struct SatStack {
    struct Unit {
        Parameter kernel, scale, shift;
    };
    std::vector<Unit> units;

    SatStack() = default;
    SatStack(int k_sat, int c) {
        for (int i = 0; i < k_sat; ++i) {
            std::string base = "sat." + std::to_string(i);
            Tensor k;
            if (i == 1) k = sat_detail::unsharp_kernel(c);
            else if (i == 2) k = sat_detail::gaussian_kernel(c);
            else k = sat_detail::identity_kernel(c);
            Unit u{Parameter(base + ".kernel", std::move(k)),
                   Parameter(base + ".scale", Tensor({c}, 1.0)),
                   Parameter(base + ".shift", Tensor({c}))};
            units.push_back(std::move(u));
        }
    }

    void collect(ParamSet& ps) {
        for (auto& u : units) {
            ps.add(u.kernel);
            ps.add(u.scale);
            ps.add(u.shift);
        }
    }

    Var forward(Graph& g, Var x, bool frozen = false) const {
        Var out = x;
        for (const auto& u : units) {
            Var k = frozen ? g.frozen(u.kernel) : g.param(const_cast<Parameter&>(u.kernel));
            Var sc = frozen ? g.frozen(u.scale) : g.param(const_cast<Parameter&>(u.scale));
            Var sh = frozen ? g.frozen(u.shift) : g.param(const_cast<Parameter&>(u.shift));
            Var conv = g.conv_depthwise_circular(out, k);
            Var delta = g.mul_cvec(g.sub(conv, out), sc);
            out = g.add_cvec(g.add(out, delta), sh);
        }
        return out;
    }
};

// ---- stage-I losses -------------------------------------------------------------

// max(0, ||fA_c - fT_p||^2 - ||fT_c - fT_p||^2 + alpha)
inline Var loss_triplet(Graph& g, Var fA_c, Var fT_c, Var fT_p, double alpha) {
    TPG_REQUIRE(fA_c.val().shape == fT_c.val().shape && fT_c.val().shape == fT_p.val().shape,
                errc::shape, "triplet inputs must share a shape");
    Var d1 = g.sub(fA_c, fT_p);
    Var d2 = g.sub(fT_c, fT_p);
    Var gap = g.sub(g.dot(d1, d1), g.dot(d2, d2));
    return g.relu(g.add_scalar(gap, alpha));
}

// ---- assembled model --------------------------------------------------------------

struct LdnFeatures {
    Tensor content_tokens;  // (L, d)
    Tensor content_pooled;  // (d)
    Tensor defect;          // (c, h, w)
    Tensor structured;      // (c, h, w)
};

struct LdnModel {
    LdnConfig cfg;
    ScmNetwork scm;
    RamStack ram;
    SatStack sats;
    bool trained = false;  // set once a stage-I checkpoint is produced or loaded

    LdnModel() = default;
    LdnModel(const LdnConfig& c, uint64_t seed) : cfg(c) {
        Rng rng = rng_stream(seed, "ldn_init");
        scm = ScmNetwork(c.d, rng);
        ram = RamStack(c.n_ram, c.d, c.d_head, latent_channels(), rng);
        sats = SatStack(c.k_sat, latent_channels());
    }

    ParamSet scm_params() {
        ParamSet ps;
        scm.collect(ps);
        return ps;
    }

    ParamSet ram_sat_params() {
        ParamSet ps;
        ram.collect(ps);
        if (cfg.sats_enabled) sats.collect(ps);
        return ps;
    }

    ParamSet all_params() {
        ParamSet ps;
        scm.collect(ps);
        ram.collect(ps);
        sats.collect(ps);
        return ps;
    }

    // frozen content feature for downstream consumers
    ContentFeature extract_content(const Tensor& latent) const {
        TPG_REQUIRE(trained, errc::state, "stage-I checkpoint not loaded");
        Graph g(false);
        Var z = g.input(latent);
        Var tok = scm.tokens_var(g, z, true);
        Var pooled = g.l2_normalize(scm.pooled_raw_var(g, tok, true));
        return ContentFeature{tok.val(), pooled.val()};
    }

    // full frozen feature split of one latent
    LdnFeatures extract_all(const Tensor& latent) const {
        TPG_REQUIRE(trained, errc::state, "stage-I checkpoint not loaded");
        Graph g(false);
        Var z = g.input(latent);
        Var tok = scm.tokens_var(g, z, true);
        Var pooled = g.l2_normalize(scm.pooled_raw_var(g, tok, true));
        Var ft = ram.forward(g, tok, z, true);
        Var fa = cfg.sats_enabled ? sats.forward(g, ft, true) : ft;
        return LdnFeatures{tok.val(), pooled.val(), ft.val(), fa.val()};
    }
};

}  // namespace tpg

#endif
