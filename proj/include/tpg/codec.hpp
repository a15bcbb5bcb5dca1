#ifndef TPG_CODEC_HPP
#define TPG_CODEC_HPP

#include <cmath>

#include "tpg/core/graph.hpp"
#include "tpg/core/image.hpp"
#include "tpg/core/tensor.hpp"

namespace tpg {

// Deterministic invertible image <-> latent codec: space-to-depth by factor r
// plus the value map v -> 2v-1. Channel layout: latent channel (c*r + dy)*r + dx
// holds image channel c at block offset (dy,dx).

inline constexpr int kSpaceToDepth = 4;

inline int latent_channels(int r = kSpaceToDepth) { return 3 * r * r; }

inline void require_divisible(const Tensor& img, int r) {
    require_image(img, "codec");
    TPG_REQUIRE(img.dim(0) % r == 0 && img.dim(1) % r == 0, errc::shape,
                "image dims must be divisible by the space-to-depth factor");
}

inline Tensor encode_image(const Tensor& img, int r = kSpaceToDepth) {
    require_divisible(img, r);
    int H = img.dim(0), W = img.dim(1), h = H / r, w = W / r;
    Tensor lat({3 * r * r, h, w});
    for (int c = 0; c < 3; ++c)
        for (int dy = 0; dy < r; ++dy)
            for (int dx = 0; dx < r; ++dx) {
                int cc = (c * r + dy) * r + dx;
                for (int by = 0; by < h; ++by)
                    for (int bx = 0; bx < w; ++bx)
                        lat.at(cc, by, bx) = std::fma(2.0, img.at(by * r + dy, bx * r + dx, c), -1.0);
            }
    return lat;
}

inline Tensor decode_latent(const Tensor& lat, int r = kSpaceToDepth) {
    TPG_REQUIRE(lat.ndim() == 3 && lat.dim(0) == 3 * r * r, errc::shape,
                "latent channel count mismatch");
    int h = lat.dim(1), w = lat.dim(2);
    Tensor img({h * r, w * r, 3});
    for (int c = 0; c < 3; ++c)
        for (int dy = 0; dy < r; ++dy)
            for (int dx = 0; dx < r; ++dx) {
                int cc = (c * r + dy) * r + dx;
                for (int by = 0; by < h; ++by)
                    for (int bx = 0; bx < w; ++bx)
                        img.at(by * r + dy, bx * r + dx, c) =
                            clamp01d(std::fma(0.5, lat.at(cc, by, bx), 0.5));
            }
    return img;
}

// area pool then threshold; exact 0.5 resolves to 1
inline Tensor resize_mask(const Tensor& mask, int r = kSpaceToDepth) {
    TPG_REQUIRE(mask.ndim() == 2, errc::shape, "mask must be (H,W)");
    TPG_REQUIRE(mask.dim(0) % r == 0 && mask.dim(1) % r == 0, errc::shape,
                "mask dims must be divisible by the pooling factor");
    int h = mask.dim(0) / r, w = mask.dim(1) / r;
    Tensor out({h, w});
    for (int by = 0; by < h; ++by)
        for (int bx = 0; bx < w; ++bx) {
            double s = 0.0;
            for (int dy = 0; dy < r; ++dy)
                for (int dx = 0; dx < r; ++dx) s += mask.at(by * r + dy, bx * r + dx);
            out.at(by, bx) = (s / double(r * r) >= 0.5) ? 1.0 : 0.0;
        }
    return out;
}

// differentiable decode for the alignment path; returns (H,W,3) clamped
inline Var decode_var(Graph& g, Var lat, int r = kSpaceToDepth) {
    const Tensor& lv = lat.val();
    TPG_REQUIRE(lv.ndim() == 3 && lv.dim(0) == 3 * r * r, errc::shape,
                "latent channel count mismatch");
    int h = lv.dim(1), w = lv.dim(2);

    Var mapped = g.affine(lat, 0.5, 0.5);
    Tensor img({h * r, w * r, 3});
    for (int c = 0; c < 3; ++c)
        for (int dy = 0; dy < r; ++dy)
            for (int dx = 0; dx < r; ++dx) {
                int cc = (c * r + dy) * r + dx;
                for (int by = 0; by < h; ++by)
                    for (int bx = 0; bx < w; ++bx)
                        img.at(by * r + dy, bx * r + dx, c) = mapped.val().at(cc, by, bx);
            }
    int p = mapped.id;
    Var spread = g.make_node(std::move(img), {mapped}, [p, r, h, w](Graph& gg, int id) {
        if (!gg.grad_wanted(p)) return;
        const Tensor& gr = gg.nodes[size_t(id)].grad;
        Tensor& gp = gg.grad_buf(p);
        for (int c = 0; c < 3; ++c)
            for (int dy = 0; dy < r; ++dy)
                for (int dx = 0; dx < r; ++dx) {
                    int cc = (c * r + dy) * r + dx;
                    for (int by = 0; by < h; ++by)
                        for (int bx = 0; bx < w; ++bx)
                            gp.at(cc, by, bx) += gr.at(by * r + dy, bx * r + dx, c);
                }
    });
    return g.clamp01(spread);
}

// differentiable encode for losses computed on predicted images; input (H,W,3)
inline Var encode_var(Graph& g, Var img, int r = kSpaceToDepth) {
    const Tensor& iv = img.val();
    require_divisible(iv, r);
    int H = iv.dim(0), W = iv.dim(1), h = H / r, w = W / r;

    Var mapped = g.affine(img, 2.0, -1.0);
    Tensor lat({3 * r * r, h, w});
    for (int c = 0; c < 3; ++c)
        for (int dy = 0; dy < r; ++dy)
            for (int dx = 0; dx < r; ++dx) {
                int cc = (c * r + dy) * r + dx;
                for (int by = 0; by < h; ++by)
                    for (int bx = 0; bx < w; ++bx)
                        lat.at(cc, by, bx) = mapped.val().at(by * r + dy, bx * r + dx, c);
            }
    int p = mapped.id;
    return g.make_node(std::move(lat), {mapped}, [p, r, h, w](Graph& gg, int id) {
        if (!gg.grad_wanted(p)) return;
        const Tensor& gr = gg.nodes[size_t(id)].grad;
        Tensor& gp = gg.grad_buf(p);
        for (int c = 0; c < 3; ++c)
            for (int dy = 0; dy < r; ++dy)
                for (int dx = 0; dx < r; ++dx) {
                    int cc = (c * r + dy) * r + dx;
                    for (int by = 0; by < h; ++by)
                        for (int bx = 0; bx < w; ++bx)
                            gp.at(by * r + dy, bx * r + dx, c) += gr.at(cc, by, bx);
                }
    });
}

}  // namespace tpg

#endif
