#ifndef TPG_ALIGNMENT_HPP
#define TPG_ALIGNMENT_HPP

#include <algorithm>
#include <cmath>
#include <vector>

#include "tpg/codec.hpp"
#include "tpg/core/graph.hpp"
#include "tpg/core/image.hpp"
#include "tpg/core/rng.hpp"
#include "tpg/ldn.hpp"
#include "tpg/sldm.hpp"

namespace tpg {

inline constexpr double kClsTau = 0.05;
inline constexpr double kClsEps = 1e-6;

inline int cls_kernel_size(int image_size) {
    return std::max(1, int(std::lround(double(image_size) / 8.0)));
}

inline int cls_stride(int k) { return std::max(1, k / 2); }

// ---- shift consistency ----------------------------------------------------------

// squared error between the real content shift (reference pair) and the
// predicted shift; both printed forms are evaluated and summed
inline Var loss_std(Graph& g, Var fs_c, Var fs_phat, Var fs_cr, Var fs_pr) {
    Var d1 = g.sub(g.sub(fs_pr, fs_cr), g.sub(fs_phat, fs_c));
    Var d2 = g.sub(g.sub(fs_phat, fs_pr), g.sub(fs_c, fs_cr));
    return g.add(g.dot(d1, d1), g.dot(d2, d2));
}

inline double loss_std_value(const Tensor& fs_c, const Tensor& fs_phat, const Tensor& fs_cr,
                             const Tensor& fs_pr) {
    Graph g(false);
    return loss_std(g, g.input(fs_c), g.input(fs_phat), g.input(fs_cr), g.input(fs_pr))
        .val()
        .v[0];
}

// ---- local similarity maps ------------------------------------------------------

struct PatternKernel {
    Tensor crop;  // (k,k,3)
    int y0 = 0, x0 = 0;
};

struct SimilarityMapResult {
    int kernel_id = 0;  // 1-based
    Tensor map;         // (ny,nx)
};

enum class MapMode { hard, soft };

namespace cls_detail {

inline Tensor crop_image(const Tensor& img, int y0, int x0, int k) {
    Tensor out({k, k, 3});
    for (int y = 0; y < k; ++y)
        for (int x = 0; x < k; ++x)
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(y0 + y, x0 + x, c);
    return out;
}

struct CenteredKernel {
    Tensor unit;  // mean-centered, unit L2 norm
    bool degenerate = false;
};

inline CenteredKernel center_unit(const Tensor& crop) {
    CenteredKernel ck;
    ck.unit = crop;
    double m = crop.sum() / double(crop.numel());
    for (auto& e : ck.unit.v) e -= m;
    double n = ck.unit.norm2();
    if (n <= 1e-12) {
        ck.degenerate = true;
        return ck;
    }
    for (auto& e : ck.unit.v) e /= n;
    return ck;
}

// cosine between the centered kernel and the centered window at (y0,x0);
// zero-variance window or kernel gives 0
inline double window_cosine(const Tensor& img, int y0, int x0, int k, const CenteredKernel& ck) {
    if (ck.degenerate) return 0.0;
    double m = 0.0;
    for (int y = 0; y < k; ++y)
        for (int x = 0; x < k; ++x)
            for (int c = 0; c < 3; ++c) m += img.at(y0 + y, x0 + x, c);
    m /= double(k * k * 3);
    double num = 0.0, ss = 0.0;
    size_t j = 0;
    for (int y = 0; y < k; ++y)
        for (int x = 0; x < k; ++x)
            for (int c = 0; c < 3; ++c) {
                double w = img.at(y0 + y, x0 + x, c) - m;
                num += w * ck.unit.v[j++];
                ss += w * w;
            }
    double nrm = std::sqrt(ss);
    if (nrm <= 1e-12) return 0.0;
    return num / nrm;
}

inline double soft_of_sim(double sim, double threshold) {
    return 1.0 / (1.0 + std::exp(-(sim - threshold) / kClsTau));
}

}  // namespace cls_detail

// positions are drawn on the response-grid lattice (stride k/2) so each
// kernel's source window shows up in its own map
inline std::vector<PatternKernel> sample_kernels(const Tensor& pattern, int N, int k,
                                                 uint64_t seed) {
    require_image(pattern, "sample_kernels");
    int H = pattern.dim(0), W = pattern.dim(1);
    TPG_REQUIRE(N >= 1, errc::config, "need at least one kernel");
    TPG_REQUIRE(k >= 1 && k <= std::min(H, W), errc::config, "kernel size exceeds image");
    int s = cls_stride(k);
    uint64_t ny = uint64_t((H - k) / s + 1), nx = uint64_t((W - k) / s + 1);
    Rng rng = rng_stream(seed, "cls_kernels");
    std::vector<PatternKernel> out;
    out.reserve(size_t(N));
    for (int i = 0; i < N; ++i) {
        int y0 = int(rng.uniform_int(ny)) * s;
        int x0 = int(rng.uniform_int(nx)) * s;
        out.push_back({cls_detail::crop_image(pattern, y0, x0, k), y0, x0});
    }
    return out;
}

inline std::vector<SimilarityMapResult> similarity_maps(const Tensor& image,
                                                        const std::vector<PatternKernel>& kernels,
                                                        int stride, double threshold,
                                                        MapMode mode) {
    require_image(image, "similarity_maps");
    TPG_REQUIRE(!kernels.empty(), errc::config, "no kernels");
    int H = image.dim(0), W = image.dim(1);
    int k = kernels.front().crop.dim(0);
    TPG_REQUIRE(stride >= 1 && k <= std::min(H, W), errc::config, "bad stride or kernel");
    int ny = (H - k) / stride + 1, nx = (W - k) / stride + 1;
    std::vector<SimilarityMapResult> maps;
    maps.reserve(kernels.size());
    for (size_t i = 0; i < kernels.size(); ++i) {
        auto ck = cls_detail::center_unit(kernels[i].crop);
        Tensor m({ny, nx});
        for (int iy = 0; iy < ny; ++iy)
            for (int ix = 0; ix < nx; ++ix) {
                double sim =
                    cls_detail::window_cosine(image, iy * stride, ix * stride, k, ck);
                m.at(iy, ix) = mode == MapMode::hard
                                   ? (sim > threshold ? 1.0 : 0.0)
                                   : cls_detail::soft_of_sim(sim, threshold);
            }
        maps.push_back({int(i) + 1, std::move(m)});
    }
    return maps;
}

inline double dice_overlap(const Tensor& pred, const Tensor& target) {
    TPG_REQUIRE(pred.shape == target.shape, errc::shape, "dice map shape mismatch");
    double inter = 0.0, sp = 0.0, st = 0.0;
    for (size_t i = 0; i < pred.v.size(); ++i) {
        inter += pred.v[i] * target.v[i];
        sp += pred.v[i];
        st += target.v[i];
    }
    return (2.0 * inter + kClsEps) / (sp + st + kClsEps);
}

// plain evaluation used by tests and metrics; target maps are always hard,
// predicted maps use pred_mode
inline double loss_cls_value(const Tensor& P_hat, const Tensor& P_ref, int N, int k,
                             double threshold, uint64_t seed, MapMode pred_mode) {
    require_image(P_hat, "loss_cls");
    TPG_REQUIRE(P_hat.shape == P_ref.shape, errc::shape, "loss_cls image sizes differ");
    int s = cls_stride(k);
    auto kernels = sample_kernels(P_ref, N, k, seed);
    auto hard = similarity_maps(P_ref, kernels, s, threshold, MapMode::hard);
    auto pred = similarity_maps(P_hat, kernels, s, threshold, pred_mode);
    double loss = 0.0;
    for (int i = 0; i < N; ++i) loss -= dice_overlap(pred[size_t(i)].map, hard[size_t(i)].map);
    return loss;
}

// differentiable form: kernels and hard target maps come from P_ref, the
// predicted side uses the sigmoid relaxation so gradients reach P_hat
inline Var loss_cls(Graph& g, Var P_hat, const Tensor& P_ref, int N, int k, double threshold,
                    uint64_t seed) {
    const Tensor pv = P_hat.val();
    require_image(pv, "loss_cls");
    TPG_REQUIRE(pv.shape == P_ref.shape, errc::shape, "loss_cls image sizes differ");
    int H = pv.dim(0), W = pv.dim(1);
    int s = cls_stride(k);
    auto kernels = sample_kernels(P_ref, N, k, seed);
    auto hard = similarity_maps(P_ref, kernels, s, threshold, MapMode::hard);
    int ny = (H - k) / s + 1, nx = (W - k) / s + 1;
    double elems = double(k * k * 3);

    Var dice_acc{};
    double dice_const = 0.0;
    for (int i = 0; i < N; ++i) {
        auto ck = cls_detail::center_unit(kernels[size_t(i)].crop);
        Tensor unit = ck.unit;
        double w_sum = hard[size_t(i)].map.sum();
        Var num{}, den{};
        double num_c = 0.0, den_c = 0.0;
        for (int iy = 0; iy < ny; ++iy)
            for (int ix = 0; ix < nx; ++ix) {
                int y0 = iy * s, x0 = ix * s;
                bool on = hard[size_t(i)].map.at(iy, ix) > 0.5;
                double m = 0.0, ss = 0.0;
                for (int y = 0; y < k; ++y)
                    for (int x = 0; x < k; ++x)
                        for (int c = 0; c < 3; ++c) m += pv.at(y0 + y, x0 + x, c);
                m /= elems;
                for (int y = 0; y < k; ++y)
                    for (int x = 0; x < k; ++x)
                        for (int c = 0; c < 3; ++c) {
                            double w = pv.at(y0 + y, x0 + x, c) - m;
                            ss += w * w;
                        }
                if (ck.degenerate || std::sqrt(ss) <= 1e-12) {
                    double sv = cls_detail::soft_of_sim(0.0, threshold);
                    den_c += sv;
                    if (on) num_c += sv;
                    continue;
                }
                Var cw = g.center_all(g.crop_hw(P_hat, y0, x0, k, k));
                Var sim = g.dot(g.l2_normalize(cw), g.input(unit));
                Var sv = g.sigmoid(g.affine(sim, 1.0 / kClsTau, -threshold / kClsTau));
                den = den.valid() ? g.add(den, sv) : sv;
                if (on) num = num.valid() ? g.add(num, sv) : sv;
            }
        if (!den.valid()) {
            dice_const += (2.0 * num_c + kClsEps) / (den_c + w_sum + kClsEps);
            continue;
        }
        Var numer = num.valid() ? g.affine(num, 2.0, 2.0 * num_c + kClsEps)
                                : g.input(Tensor({1}, 2.0 * num_c + kClsEps));
        Var denom = g.affine(den, 1.0, den_c + w_sum + kClsEps);
        Var dice = g.divide(numer, denom);
        dice_acc = dice_acc.valid() ? g.add(dice_acc, dice) : dice;
    }
    if (!dice_acc.valid()) return g.input(Tensor({1}, -dice_const));
    return g.add_scalar(g.neg(dice_acc), -dice_const);
}

// ---- pixel and feature consistency ------------------------------------------------

inline Var loss_mse(Graph& g, Var P_hat, const Tensor& target) {
    TPG_REQUIRE(P_hat.val().shape == target.shape, errc::shape, "loss_mse shape mismatch");
    return g.mse(P_hat, g.input(target));
}

// mean over the three frozen content-encoder stages of the per-stage MSE
inline Var loss_perceptual(Graph& g, const ScmNetwork& scm, Var P_hat, const Tensor& target) {
    TPG_REQUIRE(P_hat.val().shape == target.shape, errc::shape,
                "loss_perceptual shape mismatch");
    auto sa = scm.stages_var(g, encode_var(g, P_hat), true);
    auto sb = scm.stages_var(g, g.input(encode_image(target)), true);
    Var acc = g.mse(sa[0], sb[0]);
    acc = g.add(acc, g.mse(sa[1], sb[1]));
    acc = g.add(acc, g.mse(sa[2], sb[2]));
    return g.scale(acc, 1.0 / 3.0);
}

inline double loss_perceptual_value(const ScmNetwork& scm, const Tensor& a, const Tensor& b) {
    Graph g(false);
    return loss_perceptual(g, scm, g.input(a), b).val().v[0];
}

// ---- per-sample alignment objective -----------------------------------------------

struct ApContext {
    const ScmNetwork* scm = nullptr;
    double lambda1 = 1e-4, lambda2 = 1e-4, lambda3 = 1e-2, lambda4 = 1e-1;
    int n_kernels = 4;
    int kernel_size = 8;
    double threshold = 0.7;
};

struct ApSample {
    Tensor clothing;  // (H,W,3)
    Tensor pattern;   // (H,W,3), empty when unlabeled
    bool labeled = false;
    Tensor fs_c;  // pooled content of the clothing image
};

struct ApReference {
    Tensor clothing, pattern;
    Tensor fs_cr, fs_pr;
};

struct ApBreakdown {
    Var total{};
    double std_v = 0.0, cls_v = 0.0, perc_v = 0.0, mse_v = 0.0;
};

// lambda1*STD + lambda2*CLS + lambda3*perceptual + lambda4*MSE; labeled samples
// align to their own pattern, unlabeled ones borrow the reference pattern for
// CLS and fall back to the clothing image for pixel/feature consistency
inline ApBreakdown loss_ap(Graph& g, const ApContext& ctx, Var P_hat, const ApSample& s,
                           const ApReference& ref, uint64_t kernel_seed) {
    TPG_REQUIRE(ctx.scm != nullptr, errc::state, "alignment needs the content encoder");
    TPG_REQUIRE(ref.clothing.numel() > 0 && ref.pattern.numel() > 0, errc::batch,
                "alignment requires a labeled reference pair");
    if (s.labeled)
        TPG_REQUIRE(s.pattern.numel() > 0, errc::batch, "labeled sample without pattern");

    ApBreakdown out;
    Var acc{};
    auto fold = [&](Var term, double lam) {
        Var w = g.scale(term, lam);
        acc = acc.valid() ? g.add(acc, w) : w;
    };

    Var fs_phat{};
    std::array<Var, 3> st_hat{};
    if (ctx.lambda1 != 0.0 || ctx.lambda3 != 0.0) {
        st_hat = ctx.scm->stages_var(g, encode_var(g, P_hat), true);
        Var tok = g.chw_to_tokens(st_hat[2]);
        fs_phat = g.l2_normalize(ctx.scm->pooled_raw_var(g, tok, true));
    }

    if (ctx.lambda1 != 0.0) {
        Var t = loss_std(g, g.input(s.fs_c), fs_phat, g.input(ref.fs_cr), g.input(ref.fs_pr));
        out.std_v = t.val().v[0];
        fold(t, ctx.lambda1);
    }
    if (ctx.lambda2 != 0.0) {
        const Tensor& cls_ref = s.labeled ? s.pattern : ref.pattern;
        Var t = loss_cls(g, P_hat, cls_ref, ctx.n_kernels, ctx.kernel_size, ctx.threshold,
                         kernel_seed);
        out.cls_v = t.val().v[0];
        fold(t, ctx.lambda2);
    }
    const Tensor& target = s.labeled ? s.pattern : s.clothing;
    if (ctx.lambda3 != 0.0) {
        auto sb = ctx.scm->stages_var(g, g.input(encode_image(target)), true);
        Var t = g.mse(st_hat[0], sb[0]);
        t = g.add(t, g.mse(st_hat[1], sb[1]));
        t = g.add(t, g.mse(st_hat[2], sb[2]));
        t = g.scale(t, 1.0 / 3.0);
        out.perc_v = t.val().v[0];
        fold(t, ctx.lambda3);
    }
    if (ctx.lambda4 != 0.0) {
        Var t = loss_mse(g, P_hat, target);
        out.mse_v = t.val().v[0];
        fold(t, ctx.lambda4);
    }
    out.total = acc.valid() ? acc : g.input(Tensor({1}));
    return out;
}

// ---- full mixed-batch objective ----------------------------------------------------

struct SldmBatchSample {
    Tensor clothing, pattern, mask;  // mask (H,W); pattern empty when unlabeled
    bool labeled = false;
    Tensor z_c, z_p;    // latents; z_p empty when unlabeled
    Tensor mask_lat;    // pooled mask
    Tensor fs_c, fs_p;  // pooled content vectors; fs_p empty when unlabeled
    ConditioningBundle bundle;
    uint64_t seed = 0;
};

struct SldmStepReport {
    double dp = 0.0, std_t = 0.0, cls = 0.0, perceptual = 0.0, mse = 0.0, ap = 0.0,
           total = 0.0;
    int labeled_count = 0, unlabeled_count = 0;
};

// mean denoising loss over labeled samples plus mean alignment loss over all
// samples; ref_choice[i] names the labeled batch index aligned against
inline Var loss_sldm_total(Graph& g, const DenoiserNet& net, const NoiseSchedule& sched,
                           const ApContext& ctx, const std::vector<SldmBatchSample>& batch,
                           const std::vector<int>& ref_choice, int align_t_cap, bool include_ap,
                           SldmStepReport* report = nullptr) {
    TPG_REQUIRE(!batch.empty(), errc::batch, "empty batch");
    int n = int(batch.size());
    int n_labeled = 0;
    for (const auto& s : batch) n_labeled += s.labeled ? 1 : 0;
    TPG_REQUIRE(n_labeled > 0, errc::batch, "batch needs at least one labeled sample");
    TPG_REQUIRE(!include_ap || int(ref_choice.size()) == n, errc::batch,
                "reference choice per sample required");
    TPG_REQUIRE(align_t_cap >= 1 && align_t_cap <= sched.T, errc::config,
                "align timestep cap out of range");

    SldmStepReport rep;
    rep.labeled_count = n_labeled;
    rep.unlabeled_count = n - n_labeled;

    Var dp_acc{};
    for (const auto& s : batch) {
        if (!s.labeled) continue;
        TPG_REQUIRE(s.z_p.numel() > 0, errc::batch, "labeled sample missing pattern latent");
        Rng tr = rng_stream(s.seed, "dp_t");
        int t = int(tr.uniform_int(int64_t(1), int64_t(sched.T)));
        Rng er = rng_stream(s.seed, "dp_eps");
        Tensor eps(s.z_p.shape);
        for (auto& e : eps.v) e = er.normal();
        Tensor phi = assemble_input(add_noise(sched, s.z_p, eps, t), s.z_c, s.mask_lat);
        Var term = loss_dp(g, net, g.input(phi), s.bundle, t, eps);
        dp_acc = dp_acc.valid() ? g.add(dp_acc, term) : term;
        rep.dp += term.val().v[0];
    }
    rep.dp /= double(n_labeled);
    Var total = g.scale(dp_acc, 1.0 / double(n_labeled));

    if (include_ap) {
        Var ap_acc{};
        for (int i = 0; i < n; ++i) {
            const auto& s = batch[size_t(i)];
            int r = ref_choice[size_t(i)];
            TPG_REQUIRE(r >= 0 && r < n && batch[size_t(r)].labeled, errc::batch,
                        "reference must point at a labeled sample");
            TPG_REQUIRE(n_labeled < 2 || r != i || !s.labeled, errc::batch,
                        "reference must differ from the sample when possible");
            const auto& rs = batch[size_t(r)];

            Rng tr = rng_stream(s.seed, "align_t");
            int t = int(tr.uniform_int(int64_t(1), int64_t(align_t_cap)));
            Rng er = rng_stream(s.seed, "align_eps");
            const Tensor& z_star = s.labeled ? s.z_p : s.z_c;
            Tensor eps(z_star.shape);
            for (auto& e : eps.v) e = er.normal();
            Tensor z_star_t = add_noise(sched, z_star, eps, t);
            Tensor phi = assemble_input(z_star_t, s.z_c, s.mask_lat);
            Var eps_hat = net.forward(g, g.input(phi), s.bundle, t);
            Var p_hat = decode_var(g, predict_latent0_var(g, sched, g.input(z_star_t), eps_hat, t));

            ApSample as{s.clothing, s.pattern, s.labeled, s.fs_c};
            ApReference ar{rs.clothing, rs.pattern, rs.fs_c, rs.fs_p};
            ApBreakdown b = loss_ap(g, ctx, p_hat, as, ar, s.seed);
            ap_acc = ap_acc.valid() ? g.add(ap_acc, b.total) : b.total;
            rep.std_t += b.std_v;
            rep.cls += b.cls_v;
            rep.perceptual += b.perc_v;
            rep.mse += b.mse_v;
            rep.ap += b.total.val().v[0];
        }
        rep.std_t /= double(n);
        rep.cls /= double(n);
        rep.perceptual /= double(n);
        rep.mse /= double(n);
        rep.ap /= double(n);
        total = g.add(total, g.scale(ap_acc, 1.0 / double(n)));
    }

    rep.total = total.val().v[0];
    if (report) *report = rep;
    return total;
}

}  // namespace tpg

#endif
