#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>
#include <vector>

#include "finv/array.hpp"
#include "finv/camera.hpp"
#include "finv/generator.hpp"
#include "finv/graph.hpp"

namespace finv {

struct RenderConfig {
    int samples_per_ray = 64;
    double density_scale = 25.0;
    Vec3 background{0.0, 0.0, 0.0};
};

struct RenderOutput {
    Array rgb;   // [H, W, 3], in [0,1]
    Array mask;  // [H, W], in [0,1]
};

/// Fixed per-(camera, grid, config) ray geometry: which pixels hit the unit
/// cube, the per-pixel step length, and the trilinear stencil of every ray
/// sample. Shared across graphs and particles.
struct RenderPlan {
    int width = 0, height = 0, samples = 0, grid = 0;
    double density_scale = 25.0;
    Vec3 background{0.0, 0.0, 0.0};
    int n_hit = 0;
    std::shared_ptr<const ScatterSpec> scatter;    // hit row -> pixel row (v*W + u)
    std::shared_ptr<const InterpStencil> stencil;  // n_hit*samples rows, 8 taps
    Array delta;                                   // [n_hit, 1] step length per ray
};

namespace detail {

/// Intersection of a ray with the cube [-0.5, 0.5]^3 (slab method).
inline bool ray_cube(const Vec3& origin, const Vec3& dir, double& t0, double& t1) {
    t0 = 0.0;
    t1 = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
        if (std::abs(dir[a]) < 1e-15) {
            if (origin[a] < -0.5 || origin[a] > 0.5) return false;
            continue;
        }
        double ta = (-0.5 - origin[a]) / dir[a];
        double tb = (0.5 - origin[a]) / dir[a];
        if (ta > tb) std::swap(ta, tb);
        t0 = std::max(t0, ta);
        t1 = std::min(t1, tb);
    }
    return t1 > t0;
}

/// Trilinear taps over a cell-center grid; coordinates clamp at the border.
inline void trilinear_taps(const Vec3& p, int V, int32_t* index, double* weight) {
    double g[3], f[3];
    int i0[3];
    for (int a = 0; a < 3; ++a) {
        g[a] = (p[a] + 0.5) * V - 0.5;
        double base = std::floor(g[a]);
        int i = static_cast<int>(base);
        double fr = g[a] - base;
        if (i < 0) {
            i = 0;
            fr = 0.0;
        }
        if (i > V - 2) {
            i = V - 2;
            fr = 1.0;
        }
        i0[a] = i;
        f[a] = fr;
    }
    int t = 0;
    for (int dx = 0; dx < 2; ++dx)
        for (int dy = 0; dy < 2; ++dy)
            for (int dz = 0; dz < 2; ++dz) {
                const int ix = i0[0] + dx, iy = i0[1] + dy, iz = i0[2] + dz;
                index[t] = static_cast<int32_t>((static_cast<int64_t>(ix) * V + iy) * V + iz);
                weight[t] = (dx ? f[0] : 1.0 - f[0]) * (dy ? f[1] : 1.0 - f[1]) * (dz ? f[2] : 1.0 - f[2]);
                ++t;
            }
}

}  // namespace detail

inline RenderPlan make_render_plan(const Camera& cam, int grid, const RenderConfig& cfg) {
    if (!cam.valid()) throw std::invalid_argument("make_render_plan: invalid camera");
    RenderPlan plan;
    plan.width = cam.width;
    plan.height = cam.height;
    plan.samples = cfg.samples_per_ray;
    plan.grid = grid;
    plan.density_scale = cfg.density_scale;
    plan.background = cfg.background;

    const Vec3 origin = cam.position();
    const int S = cfg.samples_per_ray;
    auto scatter = std::make_shared<ScatterSpec>();
    scatter->out_rows = static_cast<int64_t>(cam.width) * cam.height;
    auto stencil = std::make_shared<InterpStencil>();
    stencil->taps = 8;
    std::vector<double> deltas;

    for (int v = 0; v < cam.height; ++v)
        for (int u = 0; u < cam.width; ++u) {
            const Vec3 dir = cam.ray_direction(u + 0.5, v + 0.5);
            double t0, t1;
            if (!detail::ray_cube(origin, dir, t0, t1)) continue;
            t0 = std::max(t0, 1e-9);
            if (t1 <= t0) continue;
            const double delta = (t1 - t0) / S;
            scatter->row.push_back(static_cast<int32_t>(v * cam.width + u));
            deltas.push_back(delta);
            for (int i = 0; i < S; ++i) {
                const double t = t0 + (i + 0.5) * delta;
                const Vec3 p = origin + t * dir;
                int32_t idx[8];
                double w[8];
                detail::trilinear_taps(p, grid, idx, w);
                stencil->index.insert(stencil->index.end(), idx, idx + 8);
                stencil->weight.insert(stencil->weight.end(), w, w + 8);
            }
        }
    plan.n_hit = static_cast<int>(scatter->row.size());
    stencil->rows = static_cast<int64_t>(plan.n_hit) * S;
    plan.scatter = std::move(scatter);
    plan.stencil = std::move(stencil);
    plan.delta = Array({plan.n_hit, 1}, std::move(deltas));
    return plan;
}

/// Image-space nodes of an emitted render; rgb planes are -1 when the render
/// was emitted mask-only.
struct RenderNodes {
    int mask = -1;           // [H, W]
    int rgb[3] = {-1, -1, -1};  // [H, W] each
};

/// Emits alpha compositing over the plan's rays.
///
/// For sample i on a ray: opacity alpha_i = 1 - exp(-sigma * o_i * delta),
/// transmittance T_i = prod_{j<i}(1 - alpha_j) = exp(-sigma * delta *
/// sum_{j<i} o_j). The exponential-sum form is exact and keeps the backward
/// pass free of divisions. rgb = sum_i T_i alpha_i c_i + T_final * bg, mask =
/// 1 - T_final. Pixels whose ray misses the cube get background and mask 0.
inline RenderNodes emit_render(Graph& g, const RenderPlan& plan, int occupancy, int colors) {
    RenderNodes out;
    const int P = plan.n_hit;
    const int S = plan.samples;
    const int H = plan.height, W = plan.width;

    if (P == 0) {
        Array mask({H, W});
        out.mask = g.constant(std::move(mask));
        if (colors >= 0)
            for (int c = 0; c < 3; ++c) out.rgb[c] = g.constant(Array::full({H, W}, plan.background[c]));
        return out;
    }

    int occ_s = g.gather_interp(occupancy, plan.stencil);      // [P*S]
    int occ_m = g.reshape(occ_s, {P, S});
    int solidity = g.sigmoid(occ_m);
    int delta_b = g.broadcast(g.constant(plan.delta), {P, S});
    int ext = g.mul_scalar(g.mul(solidity, delta_b), plan.density_scale);  // sigma * o * delta
    int cum = g.cumsum_exclusive(ext);
    int trans = g.exp(g.mul_scalar(cum, -1.0));                            // T_i
    int alpha = g.add_scalar(g.mul_scalar(g.exp(g.mul_scalar(ext, -1.0)), -1.0), 1.0);
    int weight = g.mul(trans, alpha);                                      // T_i * alpha_i

    int total = g.sum_axis(ext, 1);                             // [P]
    int t_final = g.exp(g.mul_scalar(total, -1.0));
    int mask_hit = g.add_scalar(g.mul_scalar(t_final, -1.0), 1.0);

    out.mask = g.reshape(g.scatter_rows(mask_hit, plan.scatter), {H, W});

    if (colors >= 0) {
        int color_s = g.gather_interp(colors, plan.stencil);   // [P*S, 3]
        for (int c = 0; c < 3; ++c) {
            int plane = g.reshape(g.slice_cols(color_s, c, c + 1), {P, S});
            int comp = g.sum_axis(g.mul(weight, plane), 1);    // [P]
            int hit = comp;
            const double bg = plan.background[c];
            if (bg != 0.0) hit = g.add(comp, g.mul_scalar(mask_hit, -bg));
            int img = g.scatter_rows(hit, plan.scatter);
            if (bg != 0.0) img = g.add_scalar(img, bg);
            out.rgb[c] = g.reshape(img, {H, W});
        }
    }
    return out;
}

namespace detail {

inline RenderOutput collect_render(const Workspace& ws, const RenderNodes& nodes, int H, int W) {
    RenderOutput out;
    out.mask = ws.value(nodes.mask);
    out.rgb = Array({H, W, 3});
    for (int c = 0; c < 3; ++c) {
        const Array& plane = ws.value(nodes.rgb[c]);
        for (int64_t i = 0; i < plane.size(); ++i) out.rgb[i * 3 + c] = plane[i];
    }
    return out;
}

}  // namespace detail

/// Renders voxel fields from a camera (forward only).
inline RenderOutput render(const VoxelFields& fields, const Camera& cam, const RenderConfig& cfg) {
    RenderPlan plan = make_render_plan(cam, fields.grid, cfg);
    Graph g;
    int occ = g.constant(fields.occupancy_logits);
    int col = g.constant(fields.colors);
    RenderNodes nodes = emit_render(g, plan, occ, col);
    Workspace ws;
    g.forward(ws, {});
    return detail::collect_render(ws, nodes, cam.height, cam.width);
}

/// Decode-then-render of a latent pair under the given prior parameters.
inline RenderOutput render_object(const LatentPair& w, const GeneratorParams& params, const Camera& cam,
                                  int grid, const RenderConfig& cfg) {
    return render(decode(w, params, grid), cam, cfg);
}

}  // namespace finv
