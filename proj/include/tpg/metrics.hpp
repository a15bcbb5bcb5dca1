#ifndef TPG_METRICS_HPP
#define TPG_METRICS_HPP

#include <array>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tpg/alignment.hpp"
#include "tpg/codec.hpp"
#include "tpg/core/dft.hpp"
#include "tpg/core/image.hpp"
#include "tpg/ldn.hpp"
#include "tpg/synth.hpp"

namespace tpg {

// ---- SSIM --------------------------------------------------------------------------

namespace metric_detail {

inline const std::vector<double>& ssim_window() {
    static const std::vector<double> w = [] {
        std::vector<double> v(11);
        double s = 0.0;
        for (int i = 0; i < 11; ++i) {
            double d = double(i - 5);
            v[size_t(i)] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
            s += v[size_t(i)];
        }
        for (auto& e : v) e /= s;
        return v;
    }();
    return w;
}

}  // namespace metric_detail

// windowed structural similarity, 11x11 Gaussian weights, valid positions only,
// averaged over channels
inline double ssim(const Tensor& a, const Tensor& b) {
    require_image(a, "ssim");
    TPG_REQUIRE(a.shape == b.shape, errc::shape, "ssim shape mismatch");
    int H = a.dim(0), W = a.dim(1);
    TPG_REQUIRE(H >= 11 && W >= 11, errc::shape, "ssim needs at least 11x11 images");
    const auto& win = metric_detail::ssim_window();
    const double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;

    double total = 0.0;
    int64_t count = 0;
    for (int c = 0; c < 3; ++c)
        for (int y0 = 0; y0 + 11 <= H; ++y0)
            for (int x0 = 0; x0 + 11 <= W; ++x0) {
                double ma = 0.0, mb = 0.0;
                for (int dy = 0; dy < 11; ++dy)
                    for (int dx = 0; dx < 11; ++dx) {
                        double w = win[size_t(dy)] * win[size_t(dx)];
                        ma += w * a.at(y0 + dy, x0 + dx, c);
                        mb += w * b.at(y0 + dy, x0 + dx, c);
                    }
                double va = 0.0, vb = 0.0, cov = 0.0;
                for (int dy = 0; dy < 11; ++dy)
                    for (int dx = 0; dx < 11; ++dx) {
                        double w = win[size_t(dy)] * win[size_t(dx)];
                        double da = a.at(y0 + dy, x0 + dx, c) - ma;
                        double db = b.at(y0 + dy, x0 + dx, c) - mb;
                        va += w * da * da;
                        vb += w * db * db;
                        cov += w * da * db;
                    }
                double num = (2.0 * ma * mb + C1) * (2.0 * cov + C2);
                double den = (ma * ma + mb * mb + C1) * (va + vb + C2);
                total += num / den;
                ++count;
            }
    return total / double(count);
}

// ---- Fourier periodicity -------------------------------------------------------------

// unit vector of log-scaled spectrum magnitudes of the grayscale image, DC bin
// dropped and conjugate-mirror bins folded to one representative each
inline Tensor periodicity_signature(const Tensor& img) {
    require_image(img, "periodicity_signature");
    Tensor mag = dft2_magnitude(to_gray(img));
    int H = mag.dim(0), W = mag.dim(1);
    std::vector<double> sig;
    sig.reserve(size_t(H) * size_t(W) / 2 + 2);
    for (int u = 0; u < H; ++u)
        for (int v = 0; v < W; ++v) {
            if (u == 0 && v == 0) continue;
            int mu = (H - u) % H, mv = (W - v) % W;
            if (std::make_pair(u, v) > std::make_pair(mu, mv)) continue;
            sig.push_back(std::log1p(mag.at(u, v)));
        }
    Tensor out({int(sig.size())});
    std::copy(sig.begin(), sig.end(), out.v.begin());
    double n = out.norm2();
    TPG_REQUIRE(n > 1e-12, errc::domain, "constant image has no periodicity signature");
    for (auto& e : out.v) e /= n;
    return out;
}

inline double fps(const Tensor& generated, const Tensor& reference) {
    TPG_REQUIRE(generated.shape == reference.shape, errc::shape, "fps shape mismatch");
    Tensor sa = periodicity_signature(generated);
    Tensor sb = periodicity_signature(reference);
    double d = 0.0;
    for (size_t i = 0; i < sa.v.size(); ++i) d += sa.v[i] * sb.v[i];
    return d;
}

// ---- content and visual similarity ----------------------------------------------------

// cosine of the pooled content features of the two images
inline double cts(const Tensor& image_a, const Tensor& image_b, const LdnModel& model) {
    ContentFeature fa = model.extract_content(encode_image(image_a));
    ContentFeature fb = model.extract_content(encode_image(image_b));
    double d = 0.0;
    for (size_t i = 0; i < fa.pooled.v.size(); ++i) d += fa.pooled.v[i] * fb.pooled.v[i];
    return d;
}

struct VlsResult {
    double mse = 0.0;
    double perceptual = 0.0;
};

inline VlsResult vls(const Tensor& generated, const Tensor& reference, const ScmNetwork& scm) {
    TPG_REQUIRE(generated.shape == reference.shape, errc::shape, "vls shape mismatch");
    VlsResult r;
    double s = 0.0;
    for (size_t i = 0; i < generated.v.size(); ++i) {
        double d = generated.v[i] - reference.v[i];
        s += d * d;
    }
    r.mse = s / double(generated.numel());
    r.perceptual = loss_perceptual_value(scm, generated, reference);
    return r;
}

// ---- feature distribution distances ----------------------------------------------------

inline double mean_feature_distance(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
    TPG_REQUIRE(!a.empty() && !b.empty(), errc::data, "empty feature set");
    Tensor ma(a.front().shape), mb(b.front().shape);
    for (const auto& t : a) {
        TPG_REQUIRE(t.shape == ma.shape, errc::shape, "inconsistent feature shapes");
        for (size_t i = 0; i < t.v.size(); ++i) ma.v[i] += t.v[i];
    }
    for (const auto& t : b) {
        TPG_REQUIRE(t.shape == mb.shape, errc::shape, "inconsistent feature shapes");
        for (size_t i = 0; i < t.v.size(); ++i) mb.v[i] += t.v[i];
    }
    TPG_REQUIRE(ma.shape == mb.shape, errc::shape, "feature sets differ in shape");
    double s = 0.0;
    for (size_t i = 0; i < ma.v.size(); ++i) {
        double d = ma.v[i] / double(a.size()) - mb.v[i] / double(b.size());
        s += d * d;
    }
    return std::sqrt(s);
}

// top-2 principal directions by power iteration with deflation; rows of the
// result are the 2D coordinates of the inputs in original order
inline std::vector<std::array<double, 2>> pca2(const std::vector<Tensor>& feats) {
    TPG_REQUIRE(!feats.empty(), errc::data, "empty feature set");
    size_t n = feats.size(), dim = feats.front().v.size();
    std::vector<double> mean(dim, 0.0);
    for (const auto& f : feats) {
        TPG_REQUIRE(f.v.size() == dim, errc::shape, "inconsistent feature shapes");
        for (size_t i = 0; i < dim; ++i) mean[i] += f.v[i];
    }
    for (auto& e : mean) e /= double(n);

    std::vector<std::vector<double>> centered(n, std::vector<double>(dim));
    for (size_t r = 0; r < n; ++r)
        for (size_t i = 0; i < dim; ++i) centered[r][i] = feats[r].v[i] - mean[i];

    auto power_dir = [&](const std::vector<double>* deflate) {
        Rng rng = rng_stream(7, "pca_init");
        std::vector<double> v(dim);
        for (auto& e : v) e = rng.normal();
        for (int it = 0; it < 64; ++it) {
            if (deflate) {
                double d = 0.0;
                for (size_t i = 0; i < dim; ++i) d += v[i] * (*deflate)[i];
                for (size_t i = 0; i < dim; ++i) v[i] -= d * (*deflate)[i];
            }
            std::vector<double> nv(dim, 0.0);
            for (size_t r = 0; r < n; ++r) {
                double d = 0.0;
                for (size_t i = 0; i < dim; ++i) d += centered[r][i] * v[i];
                for (size_t i = 0; i < dim; ++i) nv[i] += d * centered[r][i];
            }
            double nn = 0.0;
            for (auto e : nv) nn += e * e;
            nn = std::sqrt(nn);
            if (nn <= 1e-12) return std::vector<double>(dim, 0.0);
            for (size_t i = 0; i < dim; ++i) v[i] = nv[i] / nn;
        }
        return v;
    };
    std::vector<double> p1 = power_dir(nullptr);
    std::vector<double> p2 = power_dir(&p1);

    std::vector<std::array<double, 2>> out(n);
    for (size_t r = 0; r < n; ++r) {
        double a = 0.0, b = 0.0;
        for (size_t i = 0; i < dim; ++i) {
            a += centered[r][i] * p1[i];
            b += centered[r][i] * p2[i];
        }
        out[r] = {a, b};
    }
    return out;
}

struct FeatureDistanceReport {
    double structured_to_pattern = 0.0;  // mean structured clothing feature vs mean pattern defect feature
    double clothing_to_pattern = 0.0;    // mean clothing defect feature vs mean pattern defect feature
    std::vector<std::array<double, 2>> proj_structured_c, proj_defect_p, proj_defect_c;
};

inline FeatureDistanceReport feature_distance_report(
    const LdnModel& model, const std::vector<std::pair<Tensor, Tensor>>& clothing_pattern) {
    TPG_REQUIRE(!clothing_pattern.empty(), errc::data, "no image pairs given");
    std::vector<Tensor> fa_c, ft_p, ft_c;
    for (const auto& [cimg, pimg] : clothing_pattern) {
        LdnFeatures fc = model.extract_all(encode_image(cimg));
        LdnFeatures fp = model.extract_all(encode_image(pimg));
        fa_c.push_back(fc.structured);
        ft_c.push_back(fc.defect);
        ft_p.push_back(fp.defect);
    }
    FeatureDistanceReport rep;
    rep.structured_to_pattern = mean_feature_distance(fa_c, ft_p);
    rep.clothing_to_pattern = mean_feature_distance(ft_c, ft_p);

    std::vector<Tensor> all;
    all.insert(all.end(), fa_c.begin(), fa_c.end());
    all.insert(all.end(), ft_p.begin(), ft_p.end());
    all.insert(all.end(), ft_c.begin(), ft_c.end());
    auto proj = pca2(all);
    size_t n = clothing_pattern.size();
    rep.proj_structured_c.assign(proj.begin(), proj.begin() + long(n));
    rep.proj_defect_p.assign(proj.begin() + long(n), proj.begin() + 2 * long(n));
    rep.proj_defect_c.assign(proj.begin() + 2 * long(n), proj.end());
    return rep;
}

// ---- dataset evaluation -----------------------------------------------------------------

using SampleGenerator = std::function<Tensor(const Sample&)>;

// runs the generator over the split and scores each result; per-sample failures
// are recorded in the report instead of aborting the run
inline nlohmann::json evaluate_dataset(const std::vector<Sample>& split, SampleGenerator generate,
                                       const LdnModel& model, const nlohmann::json& config_echo) {
    nlohmann::json samples = nlohmann::json::array();
    double s_ssim = 0, s_fps = 0, s_cts = 0, s_mse = 0, s_perc = 0;
    int n_ssim = 0, n_fps = 0, n_cts = 0, n_vls = 0;

    for (const auto& smp : split) {
        nlohmann::json entry;
        entry["sample_id"] = smp.sample_id;
        nlohmann::json m = nlohmann::json::object();
        try {
            Tensor gen = generate(smp);
            double c = cts(gen, smp.clothing, model);
            m["cts"] = c;
            s_cts += c;
            ++n_cts;
            if (smp.labeled) {
                double s = ssim(gen, smp.pattern);
                m["ssim"] = s;
                s_ssim += s;
                ++n_ssim;
                VlsResult v = vls(gen, smp.pattern, model.scm);
                m["vls_mse"] = v.mse;
                m["vls_perceptual"] = v.perceptual;
                s_mse += v.mse;
                s_perc += v.perceptual;
                ++n_vls;
                try {
                    double f = fps(gen, smp.pattern);
                    m["fps"] = f;
                    s_fps += f;
                    ++n_fps;
                } catch (const error& e) {
                    m["fps_error"] = e.what();
                }
            } else {
                entry["error"] = "no ground-truth pattern; only cts computed";
            }
        } catch (const std::exception& e) {
            entry["error"] = e.what();
        }
        entry["metrics"] = m;
        samples.push_back(entry);
    }

    nlohmann::json means = nlohmann::json::object();
    if (n_ssim > 0) means["ssim"] = s_ssim / n_ssim;
    if (n_fps > 0) means["fps"] = s_fps / n_fps;
    if (n_cts > 0) means["cts"] = s_cts / n_cts;
    if (n_vls > 0) {
        means["vls_mse"] = s_mse / n_vls;
        means["vls_perceptual"] = s_perc / n_vls;
    }
    nlohmann::json report;
    report["config"] = config_echo;
    report["count"] = int(split.size());
    report["means"] = means;
    report["samples"] = samples;
    return report;
}

}  // namespace tpg

#endif
