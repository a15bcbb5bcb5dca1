#ifndef TPG_CORE_IMAGE_HPP
#define TPG_CORE_IMAGE_HPP

#include <algorithm>
#include <cmath>

#include "tpg/core/tensor.hpp"

namespace tpg {

// Images are (H,W,3) tensors with values in [0,1].

inline void require_image(const Tensor& t, const char* what) {
    TPG_REQUIRE(t.ndim() == 3 && t.dim(2) == 3, errc::shape,
                std::string(what) + ": expected (H,W,3), got " + shape_str(t.shape));
}

inline double clamp01d(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

inline uint8_t to_u8(double v) {
    return uint8_t(std::lround(clamp01d(v) * 255.0));
}

// snap to the 8-bit grid; files on disk are the canonical precision
inline Tensor quantize8(const Tensor& img) {
    Tensor out = img;
    for (auto& e : out.v) e = double(to_u8(e)) / 255.0;
    return out;
}

// Rec.601 luma
inline Tensor to_gray(const Tensor& img) {
    require_image(img, "to_gray");
    int H = img.dim(0), W = img.dim(1);
    Tensor g({H, W});
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            g.at(y, x) = 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) +
                         0.114 * img.at(y, x, 2);
    return g;
}

// (H,W,3) -> (3,H,W)
inline Tensor hwc_to_chw(const Tensor& img) {
    require_image(img, "hwc_to_chw");
    int H = img.dim(0), W = img.dim(1);
    Tensor out({3, H, W});
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < 3; ++c) out.at(c, y, x) = img.at(y, x, c);
    return out;
}

// (3,H,W) -> (H,W,3)
inline Tensor chw_to_hwc(const Tensor& t) {
    TPG_REQUIRE(t.ndim() == 3 && t.dim(0) == 3, errc::shape, "chw_to_hwc expects (3,H,W)");
    int H = t.dim(1), W = t.dim(2);
    Tensor out({H, W, 3});
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = t.at(c, y, x);
    return out;
}

}  // namespace tpg

#endif
