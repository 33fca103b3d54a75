#pragma once

// Shared fixtures for tests: analytic sphere fields and frames rendered from
// them with the production renderer.

#include <limits>
#include <vector>

#include "finv/generator.hpp"
#include "finv/observation.hpp"
#include "finv/renderer.hpp"

namespace finv::testutil {

constexpr double kEmptyLogit = -30.0;
constexpr double kSolidLogit = 30.0;

struct Sphere {
    Vec3 center;
    double radius;
    Vec3 color;
};

inline VoxelFields sphere_fields(const std::vector<Sphere>& spheres, int V) {
    VoxelFields f;
    f.grid = V;
    f.occupancy_logits = Array::full({V * V * V}, kEmptyLogit);
    f.colors = Array::full({V * V * V, 3}, 0.5);
    Array pts = grid_points(V);
    for (int64_t i = 0; i < f.occupancy_logits.size(); ++i) {
        const Vec3 p{pts[i * 3 + 0], pts[i * 3 + 1], pts[i * 3 + 2]};
        double best = std::numeric_limits<double>::infinity();
        for (const auto& s : spheres) {
            const double d = norm(p - s.center) - s.radius;
            if (d <= 0.0) f.occupancy_logits[i] = kSolidLogit;
            if (d < best) {
                best = d;
                for (int c = 0; c < 3; ++c) f.colors[i * 3 + c] = s.color[c];
            }
        }
    }
    return f;
}

inline Camera orbit_test_camera(int size, double azimuth_deg, double elevation_deg = 22.0) {
    return orbit_camera(1.6, elevation_deg, azimuth_deg, 1.1 * size, size, size);
}

/// Frame rendered from ground-truth fields; mask thresholded at 0.5, all
/// pixels valid.
inline ObservationFrame frame_from_fields(const VoxelFields& fields, const Camera& cam,
                                          const RenderConfig& cfg, int index = 0) {
    RenderOutput out = render(fields, cam, cfg);
    ObservationFrame f;
    f.rgb = out.rgb;
    f.object_mask = Array({cam.height, cam.width});
    f.validity_mask = Array::full({cam.height, cam.width}, 1.0);
    for (int64_t i = 0; i < out.mask.size(); ++i) f.object_mask[i] = out.mask[i] >= 0.5 ? 1.0 : 0.0;
    f.camera = cam;
    f.index = index;
    return f;
}

}  // namespace finv::testutil
