#ifndef TPG_SYNTH_HPP
#define TPG_SYNTH_HPP

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "tpg/config.hpp"
#include "tpg/core/image.hpp"
#include "tpg/core/png_io.hpp"
#include "tpg/core/rng.hpp"
#include "tpg/core/tensor.hpp"

namespace tpg {

struct Sample {
    std::string sample_id;
    Tensor clothing;  // (H,W,3)
    Tensor pattern;   // (H,W,3); empty when unlabeled
    Tensor mask;      // (H,W) 0/1
    bool labeled = false;
    uint64_t seed = 0;
};

namespace synth_detail {

struct Rgb {
    double r, g, b;
};

inline Rgb hsv(double h, double s, double v) {
    h = h - std::floor(h);
    double c = v * s;
    double hp = h * 6.0;
    double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
    double r = 0, g = 0, b = 0;
    if (hp < 1) { r = c; g = x; }
    else if (hp < 2) { r = x; g = c; }
    else if (hp < 3) { g = c; b = x; }
    else if (hp < 4) { g = x; b = c; }
    else if (hp < 5) { r = x; b = c; }
    else { r = c; b = x; }
    double m = v - c;
    return {r + m, g + m, b + m};
}

inline double smoothstep(double e0, double e1, double x) {
    double t = (x - e0) / (e1 - e0);
    t = t < 0.0 ? 0.0 : (t > 1.0 ? 1.0 : t);
    return t * t * (3.0 - 2.0 * t);
}

inline void put(Tensor& img, int y, int x, const Rgb& c) {
    img.at(y, x, 0) = clamp01d(c.r);
    img.at(y, x, 1) = clamp01d(c.g);
    img.at(y, x, 2) = clamp01d(c.b);
}

inline Rgb mix(const Rgb& a, const Rgb& b, double t) {
    return {a.r + (b.r - a.r) * t, a.g + (b.g - a.g) * t, a.b + (b.b - a.b) * t};
}

// sum of integer-frequency waves over an HxW torus, rescaled to max |.| = 1
inline Tensor periodic_field(int H, int W, int max_k, int n_waves, Rng& rng) {
    Tensor f({H, W});
    for (int i = 0; i < n_waves; ++i) {
        int kx = int(rng.uniform_int(uint64_t(2 * max_k + 1))) - max_k;
        int ky = int(rng.uniform_int(uint64_t(2 * max_k + 1))) - max_k;
        if (kx == 0 && ky == 0) ky = 1;
        double phase = rng.uniform(0.0, 2.0 * M_PI);
        double amp = rng.uniform(0.5, 1.0);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                f.at(y, x) += amp * std::cos(2.0 * M_PI *
                                                 (double(kx) * x / W + double(ky) * y / H) +
                                             phase);
    }
    double mx = 1e-12;
    for (double v : f.v) mx = std::max(mx, std::fabs(v));
    for (double& v : f.v) v /= mx;
    return f;
}

// bilinear lookup with toroidal wrap
inline double sample_wrap(const Tensor& img, double y, double x, int c) {
    int H = img.dim(0), W = img.dim(1);
    double fy = std::floor(y), fx = std::floor(x);
    double ty = y - fy, tx = x - fx;
    int y0 = ((int(fy) % H) + H) % H, x0 = ((int(fx) % W) + W) % W;
    int y1 = (y0 + 1) % H, x1 = (x0 + 1) % W;
    double v00 = img.at(y0, x0, c), v01 = img.at(y0, x1, c);
    double v10 = img.at(y1, x0, c), v11 = img.at(y1, x1, c);
    return (1 - ty) * ((1 - tx) * v00 + tx * v01) + ty * ((1 - tx) * v10 + tx * v11);
}

inline void paint_tile(Tensor& tile, const std::string& family, const Rgb& bg, const Rgb& fg,
                       Rng& rng) {
    int p = tile.dim(0);
    if (family == "dots") {
        double cx = p / 2.0, cy = p / 2.0;
        double rad = p * rng.uniform(0.18, 0.32);
        for (int y = 0; y < p; ++y)
            for (int x = 0; x < p; ++x) {
                double d = std::hypot(x + 0.5 - cx, y + 0.5 - cy);
                put(tile, y, x, mix(fg, bg, smoothstep(rad - 0.8, rad + 0.8, d)));
            }
    } else if (family == "stripes") {
        bool horiz = rng.bernoulli(0.5);
        double phase = rng.uniform(0.0, 2.0 * M_PI);
        for (int y = 0; y < p; ++y)
            for (int x = 0; x < p; ++x) {
                double u = horiz ? y : x;
                double t = 0.5 + 0.5 * std::sin(2.0 * M_PI * u / p + phase);
                put(tile, y, x, mix(bg, fg, t));
            }
    } else if (family == "blobs") {
        Tensor f = periodic_field(p, p, 2, 4, rng);
        double level = rng.uniform(-0.2, 0.2);
        for (int y = 0; y < p; ++y)
            for (int x = 0; x < p; ++x) {
                double t = smoothstep(level - 0.15, level + 0.15, f.at(y, x));
                put(tile, y, x, mix(bg, fg, t));
            }
    } else if (family == "grid") {
        int lw = std::max(1, p / 8);
        for (int y = 0; y < p; ++y)
            for (int x = 0; x < p; ++x) {
                bool line = (x < lw) || (y < lw);
                put(tile, y, x, line ? fg : bg);
            }
    } else {
        fail(errc::config, "unknown motif family: " + family);
    }
}

}  // namespace synth_detail

// mean-of-masked-region color gap, max over channels
inline double palette_gap(const Tensor& clothing, const Tensor& pattern, const Tensor& mask) {
    int H = clothing.dim(0), W = clothing.dim(1);
    double gap = 0.0;
    for (int c = 0; c < 3; ++c) {
        double sc = 0.0, sp = 0.0, n = 0.0;
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                if (mask.at(y, x) > 0.5) {
                    sc += clothing.at(y, x, c);
                    sp += pattern.at(y, x, c);
                    n += 1.0;
                }
        if (n > 0.0) gap = std::max(gap, std::fabs(sc / n - sp / n));
    }
    return gap;
}

inline Tensor generate_pattern(const SyntheticConfig& cfg, uint64_t seed) {
    cfg.validate();
    using namespace synth_detail;
    Rng rng = rng_stream(seed, "pattern");

    std::string family = cfg.motif_family;
    if (family == "mixed") {
        static const char* fams[4] = {"dots", "stripes", "blobs", "grid"};
        family = fams[rng.uniform_int(4)];
    }

    double hue = rng.uniform();
    Rgb bg = hsv(hue, rng.uniform(0.15, 0.45), rng.uniform(0.55, 0.9));
    Rgb fg = hsv(hue + rng.uniform(0.25, 0.75), rng.uniform(0.45, 0.9), rng.uniform(0.25, 0.6));

    int p = cfg.tile_period, n = cfg.image_size;
    Tensor tile({p, p, 3});
    paint_tile(tile, family, bg, fg, rng);

    Tensor img({n, n, 3});
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x)
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = tile.at(y % p, x % p, c);
    return img;
}

// garment silhouette with coverage steered into [0.3, 0.9] by bisection
inline Tensor garment_mask(int n, Rng& rng) {
    using namespace synth_detail;
    double cx = n * rng.uniform(0.4, 0.6), cy = n * rng.uniform(0.4, 0.6);
    double ax = rng.uniform(0.7, 1.3), ay = rng.uniform(0.7, 1.3);
    int lobes = 2 + int(rng.uniform_int(3));
    double phase = rng.uniform(0.0, 2.0 * M_PI);
    double wob = rng.uniform(0.1, 0.25);

    auto coverage_at = [&](double R, Tensor* out) {
        double cover = 0.0;
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x) {
                double dx = (x + 0.5 - cx) / ax, dy = (y + 0.5 - cy) / ay;
                double r = std::hypot(dx, dy);
                double th = std::atan2(dy, dx);
                double edge = R * (1.0 + wob * std::cos(lobes * th + phase));
                double v = r <= edge ? 1.0 : 0.0;
                if (out) out->at(y, x) = v;
                cover += v;
            }
        return cover / double(n * n);
    };

    double lo = 0.0, hi = 1.5 * n;
    for (int it = 0; it < 40; ++it) {
        double mid = 0.5 * (lo + hi);
        if (coverage_at(mid, nullptr) < 0.6) lo = mid;
        else hi = mid;
    }
    Tensor mask({n, n});
    double cov = coverage_at(0.5 * (lo + hi), &mask);
    TPG_REQUIRE(cov >= 0.3 && cov <= 0.9, errc::data, "mask coverage escaped [0.3,0.9]");
    return mask;
}

inline std::pair<Tensor, Tensor> degrade_to_clothing(const Tensor& pattern,
                                                     const SyntheticConfig& cfg, uint64_t seed) {
    using namespace synth_detail;
    require_image(pattern, "degrade_to_clothing");
    int n = pattern.dim(0);
    Rng rng = rng_stream(seed, "degrade");

    // smooth displacement warp, wrap-sampled
    Tensor warped = pattern;
    if (cfg.warp_amplitude > 0.0) {
        Tensor dx = periodic_field(n, n, 2, 3, rng);
        Tensor dy = periodic_field(n, n, 2, 3, rng);
        double mx = 1e-12;
        for (int i = 0; i < n * n; ++i)
            mx = std::max(mx, std::hypot(dx.v[size_t(i)], dy.v[size_t(i)]));
        double s = cfg.warp_amplitude / mx;
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x)
                for (int c = 0; c < 3; ++c)
                    warped.at(y, x, c) = sample_wrap(pattern, y + s * dy.at(y, x),
                                                     x + s * dx.at(y, x), c);
    } else {
        // consume the same stream draws so later stages see identical randomness
        (void)periodic_field(n, n, 2, 3, rng);
        (void)periodic_field(n, n, 2, 3, rng);
    }

    // patchwise gaussian blur: one sigma per 4x4 patch grid cell
    Tensor blurred = warped;
    {
        int cells = 4;
        std::vector<double> sig(size_t(cells * cells));
        for (auto& s : sig) s = rng.uniform(cfg.blur_sigma_min, cfg.blur_sigma_max);
        int cell = (n + cells - 1) / cells;
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x) {
                double s = sig[size_t((y / cell) * cells + (x / cell))];
                if (s < 0.05) continue;
                int rad = std::min(4, int(std::ceil(3.0 * s)));
                double acc[3] = {0, 0, 0}, wsum = 0.0;
                for (int oy = -rad; oy <= rad; ++oy)
                    for (int ox = -rad; ox <= rad; ++ox) {
                        double w = std::exp(-(oy * oy + ox * ox) / (2.0 * s * s));
                        int sy = ((y + oy) % n + n) % n, sx = ((x + ox) % n + n) % n;
                        for (int c = 0; c < 3; ++c) acc[c] += w * warped.at(sy, sx, c);
                        wsum += w;
                    }
                for (int c = 0; c < 3; ++c) blurred.at(y, x, c) = acc[c] / wsum;
            }
    }

    // dark occlusion folds
    int n_occ = cfg.occlusion_min + int(rng.uniform_int(uint64_t(cfg.occlusion_max - cfg.occlusion_min + 1)));
    std::vector<std::array<double, 5>> occ;
    for (int i = 0; i < n_occ; ++i)
        occ.push_back({rng.uniform(0.0, double(n)), rng.uniform(0.0, double(n)),
                       rng.uniform(cfg.tile_period * 0.5, cfg.tile_period * 1.5),
                       rng.uniform(cfg.tile_period * 0.25, cfg.tile_period * 0.75),
                       rng.uniform(0.3, 0.6)});

    // multiplicative shading field
    Tensor shade = periodic_field(n, n, 2, 3, rng);

    Tensor mask = garment_mask(n, rng);

    double shade_amp = cfg.shading_amplitude;
    double occ_strength = 1.0;
    Tensor clothing({n, n, 3});
    for (int attempt = 0; attempt < 4; ++attempt) {
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x) {
                if (mask.at(y, x) < 0.5) {
                    for (int c = 0; c < 3; ++c) clothing.at(y, x, c) = 0.5;
                    continue;
                }
                double dark = 1.0;
                for (const auto& o : occ) {
                    double d = std::hypot((x + 0.5 - o[0]) / o[2], (y + 0.5 - o[1]) / o[3]);
                    if (d < 1.0) {
                        double f = 1.0 - (1.0 - o[4]) * occ_strength * smoothstep(1.0, 0.7, d);
                        dark = std::min(dark, f);
                    }
                }
                double sh = 1.0 + shade_amp * shade.at(y, x);
                for (int c = 0; c < 3; ++c)
                    clothing.at(y, x, c) = clamp01d(blurred.at(y, x, c) * dark * sh);
            }
        if (palette_gap(clothing, pattern, mask) <= 0.1) break;
        shade_amp *= 0.5;
        occ_strength *= 0.5;
    }
    TPG_REQUIRE(palette_gap(clothing, pattern, mask) <= 0.1, errc::data,
                "degradation drifted palette beyond tolerance");
    return {clothing, mask};
}

inline uint64_t sample_seed(uint64_t base, int index) {
    uint64_t x = base + 0x9e3779b97f4a7c15ull * uint64_t(index + 1);
    return hash_tag("sample") ^ Rng::splitmix64(x);
}

inline std::string build_dataset(const SyntheticConfig& cfg, const std::string& out_dir) {
    cfg.validate();
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    std::string manifest_path = (fs::path(out_dir) / "manifest.jsonl").string();
    std::ofstream mf(manifest_path, std::ios::trunc);
    TPG_REQUIRE(mf.good(), errc::io, "cannot write manifest: " + manifest_path);

    int total = cfg.labeled_count + cfg.unlabeled_count;
    for (int i = 0; i < total; ++i) {
        bool labeled = i < cfg.labeled_count;
        uint64_t seed = sample_seed(cfg.seed, i);
        char idbuf[16];
        std::snprintf(idbuf, sizeof idbuf, "s%05d", i);
        std::string sid = idbuf;

        Tensor pattern = generate_pattern(cfg, seed);
        auto [clothing, mask] = degrade_to_clothing(pattern, cfg, seed);

        std::string cpath = sid + "_clothing.png";
        std::string ppath = sid + "_pattern.png";
        std::string mpath = sid + "_mask.png";
        write_png((fs::path(out_dir) / cpath).string(), clothing);
        if (labeled) write_png((fs::path(out_dir) / ppath).string(), pattern);
        write_png_gray((fs::path(out_dir) / mpath).string(), mask);

        json rec{{"sample_id", sid},
                 {"clothing_path", cpath},
                 {"pattern_path", labeled ? json(ppath) : json(nullptr)},
                 {"mask_path", mpath},
                 {"labeled", labeled},
                 {"seed", seed}};
        mf << rec.dump() << "\n";
    }
    mf.close();
    return manifest_path;
}

struct ManifestRecord {
    std::string sample_id;
    std::string clothing_path, pattern_path, mask_path;  // resolved; pattern empty when unlabeled
    bool labeled = false;
    uint64_t seed = 0;
};

inline std::vector<ManifestRecord> load_manifest(const std::string& manifest_path) {
    namespace fs = std::filesystem;
    std::ifstream mf(manifest_path);
    TPG_REQUIRE(mf.good(), errc::io, "cannot read manifest: " + manifest_path);
    fs::path root = fs::path(manifest_path).parent_path();

    std::vector<ManifestRecord> out;
    std::string line;
    while (std::getline(mf, line)) {
        if (line.empty()) continue;
        json rec;
        try {
            rec = json::parse(line);
        } catch (const std::exception& e) {
            fail(errc::data, std::string("manifest parse: ") + e.what());
        }
        ManifestRecord r;
        r.sample_id = rec.at("sample_id").get<std::string>();
        r.labeled = rec.at("labeled").get<bool>();
        r.seed = rec.at("seed").get<uint64_t>();
        auto resolve = [&](const std::string& rel) {
            fs::path p = root / rel;
            TPG_REQUIRE(fs::exists(p), errc::data,
                        "missing file for sample " + r.sample_id + ": " + rel);
            return p.string();
        };
        r.clothing_path = resolve(rec.at("clothing_path").get<std::string>());
        if (!rec.at("pattern_path").is_null())
            r.pattern_path = resolve(rec.at("pattern_path").get<std::string>());
        TPG_REQUIRE(!r.labeled || !r.pattern_path.empty(), errc::data,
                    "labeled sample without pattern: " + r.sample_id);
        r.mask_path = resolve(rec.at("mask_path").get<std::string>());
        out.push_back(std::move(r));
    }
    return out;
}

inline Sample load_sample(const ManifestRecord& rec) {
    Sample s;
    s.sample_id = rec.sample_id;
    s.labeled = rec.labeled;
    s.seed = rec.seed;
    s.clothing = read_png(rec.clothing_path);
    if (!rec.pattern_path.empty()) s.pattern = read_png(rec.pattern_path);
    Tensor mrgb = read_png(rec.mask_path);
    int H = mrgb.dim(0), W = mrgb.dim(1);
    s.mask = Tensor({H, W});
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            s.mask.at(y, x) = mrgb.at(y, x, 0) >= 128.0 / 255.0 ? 1.0 : 0.0;
    return s;
}

inline std::vector<Sample> load_dataset(const std::string& manifest_path) {
    std::vector<Sample> out;
    for (const auto& rec : load_manifest(manifest_path)) out.push_back(load_sample(rec));
    return out;
}

}  // namespace tpg

#endif
