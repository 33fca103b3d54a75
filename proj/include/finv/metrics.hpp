#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "finv/array.hpp"
#include "finv/camera.hpp"

namespace finv {

constexpr double kPsnrCap = 99.0;  // reported for exactly zero MSE

struct RegionRect {
    int x0 = 0, y0 = 0, width = 0, height = 0;
    bool empty() const { return width <= 0 || height <= 0; }
};

inline RegionRect full_region(const Array& img) { return {0, 0, img.shape()[1], img.shape()[0]}; }

/// Peak signal-to-noise ratio in dB over a region of [0,1] images.
inline double psnr(const Array& a, const Array& b, const RegionRect& region) {
    if (region.empty()) throw std::invalid_argument("psnr: empty region");
    if (!same_shape(a.shape(), b.shape())) throw std::invalid_argument("psnr: shape mismatch");
    const int w = a.shape()[1];
    const int channels = a.rank() == 3 ? a.shape()[2] : 1;
    double acc = 0.0;
    int64_t n = 0;
    for (int y = region.y0; y < region.y0 + region.height; ++y)
        for (int x = region.x0; x < region.x0 + region.width; ++x)
            for (int c = 0; c < channels; ++c) {
                const double d = a[(static_cast<int64_t>(y) * w + x) * channels + c] -
                                 b[(static_cast<int64_t>(y) * w + x) * channels + c];
                acc += d * d;
                ++n;
            }
    const double mse = acc / n;
    if (mse == 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

namespace detail {

inline std::vector<double> gaussian_window(int radius, double sigma) {
    std::vector<double> k(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
        sum += k[i + radius];
    }
    for (auto& v : k) v /= sum;
    return k;
}

inline Array to_gray(const Array& img) {
    if (img.rank() == 2) return img;
    const int h = img.shape()[0], w = img.shape()[1];
    Array g({h, w});
    for (int64_t i = 0; i < g.size(); ++i)
        g[i] = (img[i * 3] + img[i * 3 + 1] + img[i * 3 + 2]) / 3.0;
    return g;
}

}  // namespace detail

/// Mean local SSIM with an 11x11 Gaussian window (sigma 1.5) over window
/// placements fully inside the region; C1 = 0.01^2, C2 = 0.03^2. Color
/// images are averaged to grayscale first.
inline double ssim(const Array& a, const Array& b, const RegionRect& region) {
    constexpr int kRadius = 5;  // 11x11
    constexpr double kC1 = 0.01 * 0.01, kC2 = 0.03 * 0.03;
    if (!same_shape(a.shape(), b.shape())) throw std::invalid_argument("ssim: shape mismatch");
    if (region.width < 2 * kRadius + 1 || region.height < 2 * kRadius + 1)
        throw std::invalid_argument("ssim: region smaller than the 11x11 window");
    const Array ga = detail::to_gray(a);
    const Array gb = detail::to_gray(b);
    const int w = ga.shape()[1];
    const auto kernel = detail::gaussian_window(kRadius, 1.5);

    double acc = 0.0;
    int64_t count = 0;
    for (int cy = region.y0 + kRadius; cy < region.y0 + region.height - kRadius; ++cy)
        for (int cx = region.x0 + kRadius; cx < region.x0 + region.width - kRadius; ++cx) {
            double mu_a = 0, mu_b = 0, aa = 0, bb = 0, ab = 0;
            for (int dy = -kRadius; dy <= kRadius; ++dy)
                for (int dx = -kRadius; dx <= kRadius; ++dx) {
                    const double kw = kernel[dy + kRadius] * kernel[dx + kRadius];
                    const double va = ga[static_cast<int64_t>(cy + dy) * w + cx + dx];
                    const double vb = gb[static_cast<int64_t>(cy + dy) * w + cx + dx];
                    mu_a += kw * va;
                    mu_b += kw * vb;
                    aa += kw * va * va;
                    bb += kw * vb * vb;
                    ab += kw * va * vb;
                }
            const double var_a = aa - mu_a * mu_a;
            const double var_b = bb - mu_b * mu_b;
            const double cov = ab - mu_a * mu_b;
            acc += ((2 * mu_a * mu_b + kC1) * (2 * cov + kC2)) /
                   ((mu_a * mu_a + mu_b * mu_b + kC1) * (var_a + var_b + kC2));
            ++count;
        }
    return acc / count;
}

// ---------------------------------------------------------------------------
// Point-cloud metrics

namespace detail {

/// Uniform-grid nearest-neighbor index over a [n,3] cloud.
class PointGrid {
public:
    explicit PointGrid(const Array& points) : pts_(points) {
        const int64_t n = points.shape()[0];
        for (int a = 0; a < 3; ++a) {
            lo_[a] = std::numeric_limits<double>::infinity();
            hi_[a] = -std::numeric_limits<double>::infinity();
        }
        for (int64_t i = 0; i < n; ++i)
            for (int a = 0; a < 3; ++a) {
                lo_[a] = std::min(lo_[a], points[i * 3 + a]);
                hi_[a] = std::max(hi_[a], points[i * 3 + a]);
            }
        const double vol = std::max(1e-30, (hi_[0] - lo_[0]) * (hi_[1] - lo_[1]) * (hi_[2] - lo_[2]));
        cell_ = std::max(1e-6, std::cbrt(vol / static_cast<double>(n)));
        for (int a = 0; a < 3; ++a)
            dims_[a] = std::max<int64_t>(1, static_cast<int64_t>((hi_[a] - lo_[a]) / cell_) + 1);
        cells_.reserve(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) cells_[key(cell_of(i))].push_back(i);
    }

    /// Squared distance to the nearest stored point.
    double nearest_sq(const double* q) const {
        std::array<int64_t, 3> c{};
        for (int a = 0; a < 3; ++a)
            c[a] = std::clamp<int64_t>(static_cast<int64_t>((q[a] - lo_[a]) / cell_), 0, dims_[a] - 1);
        double best = std::numeric_limits<double>::infinity();
        const int64_t max_ring = *std::max_element(dims_.begin(), dims_.end());
        for (int64_t ring = 0; ring <= max_ring; ++ring) {
            // points in ring r are at least (r-1)*cell away
            if (ring > 1 && best <= (ring - 1) * cell_ * ((ring - 1) * cell_)) break;
            bool visited_any = false;
            for (int64_t x = c[0] - ring; x <= c[0] + ring; ++x)
                for (int64_t y = c[1] - ring; y <= c[1] + ring; ++y)
                    for (int64_t z = c[2] - ring; z <= c[2] + ring; ++z) {
                        if (std::max({std::abs(x - c[0]), std::abs(y - c[1]), std::abs(z - c[2])}) != ring)
                            continue;
                        if (x < 0 || y < 0 || z < 0 || x >= dims_[0] || y >= dims_[1] || z >= dims_[2])
                            continue;
                        visited_any = true;
                        auto it = cells_.find(key({x, y, z}));
                        if (it == cells_.end()) continue;
                        for (int64_t i : it->second) {
                            const double dx = q[0] - pts_[i * 3];
                            const double dy = q[1] - pts_[i * 3 + 1];
                            const double dz = q[2] - pts_[i * 3 + 2];
                            best = std::min(best, dx * dx + dy * dy + dz * dz);
                        }
                    }
            if (!visited_any && best < std::numeric_limits<double>::infinity() && ring > 0) break;
        }
        return best;
    }

private:
    std::array<int64_t, 3> cell_of(int64_t i) const {
        std::array<int64_t, 3> c{};
        for (int a = 0; a < 3; ++a)
            c[a] = std::clamp<int64_t>(static_cast<int64_t>((pts_[i * 3 + a] - lo_[a]) / cell_), 0,
                                       dims_[a] - 1);
        return c;
    }
    int64_t key(const std::array<int64_t, 3>& c) const { return (c[0] * dims_[1] + c[1]) * dims_[2] + c[2]; }

    const Array& pts_;
    std::array<double, 3> lo_{}, hi_{};
    std::array<int64_t, 3> dims_{};
    double cell_ = 1.0;
    std::unordered_map<int64_t, std::vector<int64_t>> cells_;
};

}  // namespace detail

/// Symmetric mean squared nearest-neighbor distance between [n,3] clouds.
inline double chamfer_l2(const Array& p, const Array& q) {
    if (p.rank() != 2 || q.rank() != 2 || p.shape()[1] != 3 || q.shape()[1] != 3)
        throw std::invalid_argument("chamfer_l2: clouds must be [n,3]");
    if (p.shape()[0] == 0 || q.shape()[0] == 0) throw std::invalid_argument("chamfer_l2: empty cloud");
    detail::PointGrid gq(q), gp(p);
    double acc_pq = 0.0, acc_qp = 0.0;
    for (int64_t i = 0; i < p.shape()[0]; ++i) acc_pq += gq.nearest_sq(p.data() + i * 3);
    for (int64_t i = 0; i < q.shape()[0]; ++i) acc_qp += gp.nearest_sq(q.data() + i * 3);
    return acc_pq / p.shape()[0] + acc_qp / q.shape()[0];
}

/// F1 at distance threshold tau: harmonic mean of precision (P within tau of
/// Q) and recall (Q within tau of P).
inline double f1(const Array& p, const Array& q, double tau) {
    if (p.shape()[0] == 0 || q.shape()[0] == 0) throw std::invalid_argument("f1: empty cloud");
    detail::PointGrid gq(q), gp(p);
    const double tau2 = tau * tau;
    int64_t near_p = 0, near_q = 0;
    for (int64_t i = 0; i < p.shape()[0]; ++i) near_p += gq.nearest_sq(p.data() + i * 3) <= tau2;
    for (int64_t i = 0; i < q.shape()[0]; ++i) near_q += gp.nearest_sq(q.data() + i * 3) <= tau2;
    const double precision = static_cast<double>(near_p) / p.shape()[0];
    const double recall = static_cast<double>(near_q) / q.shape()[0];
    if (precision + recall == 0.0) return 0.0;
    return 2.0 * precision * recall / (precision + recall);
}

// ---------------------------------------------------------------------------
// Pose metrics

namespace detail {

/// Rotation matrix (rows of the upper-left 3x3) to unit quaternion (w,x,y,z).
inline std::array<double, 4> rotation_to_quat(const Mat4& m) {
    const double r00 = m[0], r01 = m[1], r02 = m[2];
    const double r10 = m[4], r11 = m[5], r12 = m[6];
    const double r20 = m[8], r21 = m[9], r22 = m[10];
    const double trace = r00 + r11 + r22;
    std::array<double, 4> q{};
    if (trace > 0.0) {
        const double s = std::sqrt(trace + 1.0) * 2.0;
        q = {0.25 * s, (r21 - r12) / s, (r02 - r20) / s, (r10 - r01) / s};
    } else if (r00 > r11 && r00 > r22) {
        const double s = std::sqrt(1.0 + r00 - r11 - r22) * 2.0;
        q = {(r21 - r12) / s, 0.25 * s, (r01 + r10) / s, (r02 + r20) / s};
    } else if (r11 > r22) {
        const double s = std::sqrt(1.0 + r11 - r00 - r22) * 2.0;
        q = {(r02 - r20) / s, (r01 + r10) / s, 0.25 * s, (r12 + r21) / s};
    } else {
        const double s = std::sqrt(1.0 + r22 - r00 - r11) * 2.0;
        q = {(r10 - r01) / s, (r02 + r20) / s, (r12 + r21) / s, 0.25 * s};
    }
    double n = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
    for (auto& v : q) v /= n;
    return q;
}

}  // namespace detail

/// Geodesic angle between the rotation blocks of two rigid transforms, in
/// degrees (quaternion double cover handled by the absolute dot product).
inline double rotation_delta(const Camera& a, const Camera& b) {
    if (a.rotation_error() > 1e-9 || b.rotation_error() > 1e-9)
        throw std::invalid_argument("rotation_delta: non-orthonormal rotation");
    const auto qa = detail::rotation_to_quat(a.world_to_camera);
    const auto qb = detail::rotation_to_quat(b.world_to_camera);
    double dot = 0.0;
    for (int i = 0; i < 4; ++i) dot += qa[i] * qb[i];
    dot = std::clamp(std::abs(dot), 0.0, 1.0);
    return 2.0 * std::acos(dot) * 180.0 / M_PI;
}

/// Least-squares slope of y against x.
inline double linear_slope(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("linear_slope: need >= 2 points");
    double mx = 0, my = 0;
    for (size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= x.size();
    my /= y.size();
    double num = 0, den = 0;
    for (size_t i = 0; i < x.size(); ++i) {
        num += (x[i] - mx) * (y[i] - my);
        den += (x[i] - mx) * (x[i] - mx);
    }
    if (den == 0.0) throw std::invalid_argument("linear_slope: degenerate x values");
    return num / den;
}

}  // namespace finv
