#ifndef TPG_CORE_DFT_HPP
#define TPG_CORE_DFT_HPP

#include <cmath>
#include <complex>
#include <vector>

#include "tpg/core/tensor.hpp"

namespace tpg {

// Dense 1D DFT, X[k] = Σ_n x[n]·exp(-2πi·kn/N). Row-column application keeps
// the 2D cost at O(N³), fine at the image sizes used here.
inline void dft1(const std::vector<std::complex<double>>& in,
                 std::vector<std::complex<double>>& out) {
    size_t n = in.size();
    out.assign(n, {0.0, 0.0});
    double w = -2.0 * M_PI / double(n);
    for (size_t k = 0; k < n; ++k) {
        std::complex<double> s{0.0, 0.0};
        for (size_t j = 0; j < n; ++j) {
            double a = w * double(k) * double(j);
            s += in[j] * std::complex<double>(std::cos(a), std::sin(a));
        }
        out[k] = s;
    }
}

// magnitude spectrum of a real (H,W) field
inline Tensor dft2_magnitude(const Tensor& x) {
    TPG_REQUIRE(x.ndim() == 2, errc::shape, "dft2 expects (H,W)");
    int H = x.dim(0), W = x.dim(1);
    std::vector<std::vector<std::complex<double>>> stage(static_cast<size_t>(H));
    std::vector<std::complex<double>> row(static_cast<size_t>(W)), out;
    for (int y = 0; y < H; ++y) {
        for (int c = 0; c < W; ++c) row[size_t(c)] = {x.at(y, c), 0.0};
        dft1(row, out);
        stage[size_t(y)] = out;
    }
    Tensor mag({H, W});
    std::vector<std::complex<double>> col(static_cast<size_t>(H));
    for (int c = 0; c < W; ++c) {
        for (int y = 0; y < H; ++y) col[size_t(y)] = stage[size_t(y)][size_t(c)];
        dft1(col, out);
        for (int y = 0; y < H; ++y) mag.at(y, c) = std::abs(out[size_t(y)]);
    }
    return mag;
}

}  // namespace tpg

#endif
