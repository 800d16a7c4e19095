#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "memseg/errors.hpp"
#include "memseg/raster.hpp"

namespace memseg {

/// 64-bit perceptual hash: one bit per retained DCT coefficient.
struct PerceptualHash {
    std::uint64_t bits = 0;

    bool operator==(const PerceptualHash& o) const { return bits == o.bits; }
};

struct KeyframeSelection {
    std::vector<int> kept;  // strictly increasing frame indices
    int threshold = 12;
};

namespace detail {

/// Orthonormal DCT-II basis: row k, column n = c_k cos(pi (2n+1) k / 2N).
inline const Eigen::MatrixXd& dct_basis_32() {
    static const Eigen::MatrixXd basis = [] {
        const int n = 32;
        Eigen::MatrixXd t(n, n);
        const double c0 = std::sqrt(1.0 / n);
        const double ck = std::sqrt(2.0 / n);
        for (int k = 0; k < n; ++k)
            for (int j = 0; j < n; ++j)
                t(k, j) = (k == 0 ? c0 : ck) *
                          std::cos(std::numbers::pi * (2.0 * j + 1.0) * k / (2.0 * n));
        return t;
    }();
    return basis;
}

/// 2-D DCT-II of a 32x32 raster: T X T^t.
inline Eigen::MatrixXd dct2d_32(const GrayRaster& g) {
    if (g.width != 32 || g.height != 32)
        throw DimensionError("dct2d_32: raster must be 32x32");
    // flat rasters transform exactly: every AC term cancels, DC = N * value
    if (std::all_of(g.data.begin(), g.data.end(),
                    [&](double v) { return v == g.data.front(); })) {
        Eigen::MatrixXd c = Eigen::MatrixXd::Zero(32, 32);
        c(0, 0) = 32.0 * g.data.front();
        return c;
    }
    Eigen::MatrixXd x(32, 32);
    for (int r = 0; r < 32; ++r)
        for (int c = 0; c < 32; ++c) x(r, c) = g.at(c, r);
    const Eigen::MatrixXd& t = dct_basis_32();
    return t * x * t.transpose();
}

/// Median of an even-length block: mean of the two middle order statistics.
inline double median64(std::array<double, 64> v) {
    std::sort(v.begin(), v.end());
    return 0.5 * (v[31] + v[32]);
}

}  // namespace detail

inline PerceptualHash phash_gray(const GrayRaster& g) {
    const GrayRaster small = (g.width == 32 && g.height == 32) ? g : resize_area(g, 32, 32);
    const Eigen::MatrixXd coeff = detail::dct2d_32(small);
    std::array<double, 64> block{};
    for (int r = 0; r < 8; ++r)
        for (int c = 0; c < 8; ++c) block[r * 8 + c] = coeff(r, c);
    const double med = detail::median64(block);
    PerceptualHash h;
    for (int i = 0; i < 64; ++i)
        if (block[i] > med) h.bits |= std::uint64_t{1} << i;
    return h;
}

inline PerceptualHash phash(const Frame& f) { return phash_gray(to_grayscale(f)); }

inline int hamming(PerceptualHash a, PerceptualHash b) {
    return std::popcount(a.bits ^ b.bits);
}

/// Greedy temporal scan over precomputed hashes: index t survives iff its
/// distance to every already-kept hash exceeds the threshold.
inline KeyframeSelection dedup_hashes(const std::vector<PerceptualHash>& hashes,
                                      int threshold = 12) {
    if (hashes.empty()) throw ValueError("dedup: no frames");
    KeyframeSelection sel;
    sel.threshold = threshold;
    sel.kept.push_back(0);
    for (int t = 1; t < static_cast<int>(hashes.size()); ++t) {
        bool novel = true;
        for (int k : sel.kept) {
            if (hamming(hashes[t], hashes[k]) <= threshold) {
                novel = false;
                break;
            }
        }
        if (novel) sel.kept.push_back(t);
    }
    return sel;
}

inline KeyframeSelection dedup(const std::vector<Frame>& frames, int threshold = 12) {
    if (frames.empty()) throw ValueError("dedup: no frames");
    std::vector<PerceptualHash> hashes(frames.size());
    for (std::size_t i = 0; i < frames.size(); ++i) hashes[i] = phash(frames[i]);
    return dedup_hashes(hashes, threshold);
}

}  // namespace memseg
