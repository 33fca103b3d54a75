#pragma once

#include <array>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "finv/generator.hpp"
#include "finv/graph.hpp"
#include "finv/observation.hpp"
#include "finv/renderer.hpp"

namespace finv {

constexpr double kProbClamp = 1e-6;  // BCE probability floor/ceiling

struct ObjectiveConfig {
    double lambda_mse = 1.0;
    double mask_weight = 1.0;
    std::string perceptual = "pyramid_l1";
    int pyramid_levels = 3;
    double blur_sigma = 1.0;
};

/// Grid resolution plus render and loss settings shared by every objective.
struct PipelineConfig {
    int grid = 32;
    RenderConfig render;
    ObjectiveConfig objective;
};

namespace detail {

inline Array channel_plane(const Array& rgb, int c) {
    const int h = rgb.shape()[0], w = rgb.shape()[1];
    Array p({h, w});
    for (int64_t i = 0; i < p.size(); ++i) p[i] = rgb[i * 3 + c];
    return p;
}

/// GT composited on the render background outside the object mask.
inline Array composite_gt(const Array& rgb, const Array& object_mask, const Vec3& background) {
    Array out = rgb;
    for (int64_t i = 0; i < object_mask.size(); ++i)
        if (object_mask[i] == 0.0)
            for (int c = 0; c < 3; ++c) out[i * 3 + c] = background[c];
    return out;
}

/// One-dimensional Gaussian blur + factor-2 decimation matrix [ceil(n/2), n].
/// The kernel is renormalized at the borders so constants stay constant.
inline Array blur_decimate_matrix(int n, double sigma) {
    const int radius = 2;
    double k[2 * radius + 1];
    for (int i = -radius; i <= radius; ++i) k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    const int m = (n + 1) / 2;
    Array d({m, n});
    for (int r = 0; r < m; ++r) {
        const int c0 = 2 * r;
        double norm = 0.0;
        for (int i = -radius; i <= radius; ++i)
            if (c0 + i >= 0 && c0 + i < n) norm += k[i + radius];
        for (int i = -radius; i <= radius; ++i)
            if (c0 + i >= 0 && c0 + i < n) d[static_cast<int64_t>(r) * n + c0 + i] = k[i + radius] / norm;
    }
    return d;
}

inline Array transpose(const Array& a) {
    const int r = a.shape()[0], c = a.shape()[1];
    Array t({c, r});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) t[static_cast<int64_t>(j) * r + i] = a[static_cast<int64_t>(i) * c + j];
    return t;
}

inline Array matmul_const(const Array& a, const Array& b) {
    using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    Array y({m, n});
    Eigen::Map<EMat>(y.data(), m, n).noalias() =
        Eigen::Map<const EMat>(a.data(), m, k) * Eigen::Map<const EMat>(b.data(), k, n);
    return y;
}

}  // namespace detail

/// Perceptual-loss implementations are pluggable; emit() appends the loss of
/// rendered channel planes against a fixed ground-truth image to a graph and
/// returns the scalar node.
class PerceptualMetric {
public:
    virtual ~PerceptualMetric() = default;
    virtual int emit(Graph& g, const std::array<int, 3>& pred_planes, const Array& gt_rgb,
                     const Array& valid) const = 0;
};

/// Validity-weighted multi-scale L1. The difference image is masked by the
/// validity weights first and then blurred/decimated down the pyramid, so
/// invalid pixels can never leak into coarser levels; each level contributes
/// sum(|diff_level|) / (3 * sum(valid_level)).
class PyramidL1 : public PerceptualMetric {
public:
    PyramidL1(int levels, double sigma) : levels_(levels), sigma_(sigma) {
        if (levels < 1) throw std::invalid_argument("pyramid: levels must be >= 1");
    }

    int emit(Graph& g, const std::array<int, 3>& pred_planes, const Array& gt_rgb,
             const Array& valid) const override {
        int h = gt_rgb.shape()[0], w = gt_rgb.shape()[1];
        int vnode = g.constant(valid);
        std::array<int, 3> diff;
        for (int c = 0; c < 3; ++c)
            diff[c] = g.mul(g.sub(pred_planes[c], g.constant(detail::channel_plane(gt_rgb, c))), vnode);
        Array weight = valid;
        int total = -1;
        for (int level = 0; level < levels_; ++level) {
            double wsum = 0.0;
            for (int64_t i = 0; i < weight.size(); ++i) wsum += weight[i];
            if (wsum <= 0.0) throw std::invalid_argument("perceptual_loss: zero valid weight");
            int level_acc = -1;
            for (int c = 0; c < 3; ++c) {
                int term = g.sum_all(g.abs(diff[c]));
                level_acc = level_acc < 0 ? term : g.add(level_acc, term);
            }
            int level_loss = g.mul_scalar(level_acc, 1.0 / (3.0 * wsum));
            total = total < 0 ? level_loss : g.add(total, level_loss);
            if (level + 1 == levels_) break;
            Array dr = detail::blur_decimate_matrix(h, sigma_);
            Array dct = detail::transpose(detail::blur_decimate_matrix(w, sigma_));
            int drn = g.constant(dr), dctn = g.constant(dct);
            for (int c = 0; c < 3; ++c) diff[c] = g.matmul(g.matmul(drn, diff[c]), dctn);
            weight = detail::matmul_const(detail::matmul_const(dr, weight), dct);
            h = (h + 1) / 2;
            w = (w + 1) / 2;
        }
        return total;
    }

private:
    int levels_;
    double sigma_;
};

inline std::shared_ptr<const PerceptualMetric> make_perceptual(const ObjectiveConfig& cfg) {
    if (cfg.perceptual == "pyramid_l1")
        return std::make_shared<PyramidL1>(cfg.pyramid_levels, cfg.blur_sigma);
    throw std::invalid_argument("unknown perceptual metric '" + cfg.perceptual + "'");
}

// ---------------------------------------------------------------------------
// Loss emitters (pred values are graph nodes, ground truth is constant)

/// Mean binary cross entropy over valid pixels; predictions are clamped to
/// [1e-6, 1 - 1e-6] first.
inline int emit_mask_loss(Graph& g, int pred_mask, const Array& gt_mask, const Array& valid) {
    double count = 0.0;
    for (int64_t i = 0; i < valid.size(); ++i) count += valid[i];
    if (count <= 0.0) throw std::invalid_argument("mask_loss: no valid pixels");
    Array gt_valid(gt_mask.shape());       // g * v
    Array inv_gt_valid(gt_mask.shape());   // (1-g) * v
    for (int64_t i = 0; i < gt_mask.size(); ++i) {
        gt_valid[i] = gt_mask[i] * valid[i];
        inv_gt_valid[i] = (1.0 - gt_mask[i]) * valid[i];
    }
    int p = g.clamp(pred_mask, kProbClamp, 1.0 - kProbClamp);
    int one_minus_p = g.add_scalar(g.mul_scalar(p, -1.0), 1.0);
    int pos = g.mul(g.log(p), g.constant(gt_valid));
    int neg = g.mul(g.log(one_minus_p), g.constant(inv_gt_valid));
    return g.mul_scalar(g.sum_all(g.add(pos, neg)), -1.0 / count);
}

/// Mean squared difference over valid pixel-channel entries.
inline int emit_mse_loss(Graph& g, const std::array<int, 3>& pred_planes, const Array& gt_rgb,
                         const Array& valid) {
    double count = 0.0;
    for (int64_t i = 0; i < valid.size(); ++i) count += valid[i];
    if (count <= 0.0) throw std::invalid_argument("mse_loss: no valid pixels");
    int vnode = g.constant(valid);
    int acc = -1;
    for (int c = 0; c < 3; ++c) {
        int diff = g.sub(pred_planes[c], g.constant(detail::channel_plane(gt_rgb, c)));
        int term = g.sum_all(g.mul(g.mul(diff, diff), vnode));
        acc = acc < 0 ? term : g.add(acc, term);
    }
    return g.mul_scalar(acc, 1.0 / (3.0 * count));
}

// ---------------------------------------------------------------------------
// Eager loss functions (the graph path with constant predictions)

inline double mask_loss(const Array& pred_mask, const Array& gt_mask, const Array& valid) {
    Graph g;
    int loss = emit_mask_loss(g, g.constant(pred_mask), gt_mask, valid);
    return g.evaluate({}).at(loss).value();
}

inline double mse_loss(const Array& pred_rgb, const Array& gt_rgb, const Array& valid) {
    Graph g;
    std::array<int, 3> planes;
    for (int c = 0; c < 3; ++c) planes[c] = g.constant(detail::channel_plane(pred_rgb, c));
    int loss = emit_mse_loss(g, planes, gt_rgb, valid);
    return g.evaluate({}).at(loss).value();
}

inline double perceptual_loss(const Array& pred_rgb, const Array& gt_rgb, const Array& valid,
                              const ObjectiveConfig& cfg = {}) {
    Graph g;
    std::array<int, 3> planes;
    for (int c = 0; c < 3; ++c) planes[c] = g.constant(detail::channel_plane(pred_rgb, c));
    int loss = make_perceptual(cfg)->emit(g, planes, gt_rgb, valid);
    return g.evaluate({}).at(loss).value();
}

// ---------------------------------------------------------------------------
// Composed objectives

struct FrameLossNodes {
    int perceptual = -1;
    int mask_bce = -1;
};

/// Inversion objective: latents are leaves, generator parameters are folded
/// constants. total = sum_t (perceptual + mask_weight * bce); perceptual_sum
/// is the ranking criterion (perceptual term only).
struct Phase1Graph {
    Graph g;
    DecodeNodes decode;
    std::vector<FrameLossNodes> frames;
    int total = -1;
    int perceptual_sum = -1;
    int mask_sum = -1;
};

namespace detail {

/// Renders one frame's losses given decoded field nodes.
inline FrameLossNodes emit_frame_losses(Graph& g, const ObservationFrame& frame, const RenderPlan& plan,
                                        int occupancy, int colors, const PerceptualMetric& metric) {
    RenderNodes rn = emit_render(g, plan, occupancy, colors);
    FrameLossNodes out;
    if (colors >= 0) {
        const Array gt = composite_gt(frame.rgb, frame.object_mask, plan.background);
        out.perceptual = metric.emit(g, {rn.rgb[0], rn.rgb[1], rn.rgb[2]}, gt, frame.validity_mask);
    }
    out.mask_bce = emit_mask_loss(g, rn.mask, frame.object_mask, frame.validity_mask);
    return out;
}

inline std::vector<RenderPlan> make_plans(std::span<const ObservationFrame> frames,
                                          const PipelineConfig& pipe) {
    std::vector<RenderPlan> plans;
    plans.reserve(frames.size());
    for (const auto& f : frames) plans.push_back(make_render_plan(f.camera, pipe.grid, pipe.render));
    return plans;
}

}  // namespace detail

inline Phase1Graph build_phase1_graph(const GeneratorParams& params,
                                      std::span<const ObservationFrame> frames,
                                      std::span<const RenderPlan> plans, const PipelineConfig& pipe) {
    if (frames.empty()) throw std::invalid_argument("phase1: need at least one frame");
    auto metric = make_perceptual(pipe.objective);
    Phase1Graph out;
    Array fourier = fourier_features(grid_points(pipe.grid), params.arch.fourier_bands);
    DecodeOptions opt;  // latents leaves, params folded
    out.decode = emit_decode(out.g, params, fourier, opt);
    int total = -1, perc = -1, bce = -1;
    for (size_t t = 0; t < frames.size(); ++t) {
        FrameLossNodes fl = detail::emit_frame_losses(out.g, frames[t], plans[t], out.decode.occupancy,
                                                      out.decode.colors, *metric);
        out.frames.push_back(fl);
        int frame_total = out.g.add(fl.perceptual, out.g.mul_scalar(fl.mask_bce, pipe.objective.mask_weight));
        total = total < 0 ? frame_total : out.g.add(total, frame_total);
        perc = perc < 0 ? fl.perceptual : out.g.add(perc, fl.perceptual);
        bce = bce < 0 ? fl.mask_bce : out.g.add(bce, fl.mask_bce);
    }
    out.total = total;
    out.perceptual_sum = perc;
    out.mask_sum = bce;
    return out;
}

/// Geometry refinement (mask BCE only): phi are leaves, w_geo is a constant.
struct GeoRefineGraph {
    Graph g;
    DecodeNodes decode;  // phi_w/phi_b leaves, occupancy node
    int total = -1;
};

inline GeoRefineGraph build_geometry_refine_graph(const LatentPair& w, const GeneratorParams& params,
                                                  std::span<const ObservationFrame> frames,
                                                  std::span<const RenderPlan> plans,
                                                  const PipelineConfig& pipe) {
    if (frames.empty()) throw std::invalid_argument("geometry refine: need at least one frame");
    GeoRefineGraph out;
    Array fourier = fourier_features(grid_points(pipe.grid), params.arch.fourier_bands);
    DecodeOptions opt;
    opt.latents_are_leaves = false;
    opt.w = &w;
    opt.geo_params_are_leaves = true;
    opt.want_colors = false;
    out.decode = emit_decode(out.g, params, fourier, opt);
    int total = -1;
    for (size_t t = 0; t < frames.size(); ++t) {
        RenderNodes rn = emit_render(out.g, plans[t], out.decode.occupancy, -1);
        int bce = emit_mask_loss(out.g, rn.mask, frames[t].object_mask, frames[t].validity_mask);
        total = total < 0 ? bce : out.g.add(total, bce);
    }
    out.total = total;
    return out;
}

/// Texture refinement (perceptual + lambda * MSE): theta are leaves, w is
/// constant, and the occupancy grid enters as an updatable constant that the
/// owner refreshes whenever phi changes.
struct TexRefineGraph {
    Graph g;
    DecodeNodes decode;  // theta_w/theta_b leaves, colors node
    int occupancy_const = -1;
    int total = -1;
};

inline TexRefineGraph build_texture_refine_graph(const LatentPair& w, const GeneratorParams& params,
                                                 std::span<const ObservationFrame> frames,
                                                 std::span<const RenderPlan> plans,
                                                 const PipelineConfig& pipe,
                                                 const Array& initial_occupancy) {
    if (frames.empty()) throw std::invalid_argument("texture refine: need at least one frame");
    auto metric = make_perceptual(pipe.objective);
    TexRefineGraph out;
    Array fourier = fourier_features(grid_points(pipe.grid), params.arch.fourier_bands);
    DecodeOptions opt;
    opt.latents_are_leaves = false;
    opt.w = &w;
    opt.tex_params_are_leaves = true;
    opt.want_occupancy = false;
    out.decode = emit_decode(out.g, params, fourier, opt);
    out.occupancy_const = out.g.constant(initial_occupancy);
    int total = -1;
    for (size_t t = 0; t < frames.size(); ++t) {
        RenderNodes rn = emit_render(out.g, plans[t], out.occupancy_const, out.decode.colors);
        const Array gt = detail::composite_gt(frames[t].rgb, frames[t].object_mask, plans[t].background);
        int perc = metric->emit(out.g, {rn.rgb[0], rn.rgb[1], rn.rgb[2]}, gt, frames[t].validity_mask);
        int frame_total = perc;
        if (pipe.objective.lambda_mse != 0.0) {
            int mse = emit_mse_loss(out.g, {rn.rgb[0], rn.rgb[1], rn.rgb[2]}, gt, frames[t].validity_mask);
            frame_total = out.g.add(perc, out.g.mul_scalar(mse, pipe.objective.lambda_mse));
        }
        total = total < 0 ? frame_total : out.g.add(total, frame_total);
    }
    out.total = total;
    return out;
}

// ---------------------------------------------------------------------------
// Eager objective values (spec-level entry points)

inline double phase1_objective(const LatentPair& w, const GeneratorParams& params,
                               std::span<const ObservationFrame> frames, const PipelineConfig& pipe) {
    auto plans = detail::make_plans(frames, pipe);
    Phase1Graph p1 = build_phase1_graph(params, frames, plans, pipe);
    std::map<int, Array> leaves;
    feed_latents(leaves, p1.decode, w);
    Workspace ws;
    p1.g.forward(ws, leaves);
    return ws.value(p1.total).value();
}

inline double geometry_refine_objective(const LatentPair& w, const GeneratorParams& params,
                                        std::span<const ObservationFrame> frames,
                                        const PipelineConfig& pipe) {
    auto plans = detail::make_plans(frames, pipe);
    GeoRefineGraph gr = build_geometry_refine_graph(w, params, frames, plans, pipe);
    std::map<int, Array> leaves;
    feed_mlp(leaves, gr.decode.phi_w, gr.decode.phi_b, params.geo);
    Workspace ws;
    gr.g.forward(ws, leaves);
    return ws.value(gr.total).value();
}

inline double texture_refine_objective(const LatentPair& w, const GeneratorParams& params,
                                       std::span<const ObservationFrame> frames,
                                       const PipelineConfig& pipe) {
    auto plans = detail::make_plans(frames, pipe);
    // occupancy from the current phi
    VoxelFields fields = decode(w, params, pipe.grid);
    TexRefineGraph tr = build_texture_refine_graph(w, params, frames, plans, pipe, fields.occupancy_logits);
    std::map<int, Array> leaves;
    feed_mlp(leaves, tr.decode.theta_w, tr.decode.theta_b, params.tex);
    Workspace ws;
    tr.g.forward(ws, leaves);
    return ws.value(tr.total).value();
}

}  // namespace finv
