#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "finv/adam.hpp"
#include "finv/camera.hpp"
#include "finv/generator.hpp"
#include "finv/graph.hpp"
#include "finv/rng.hpp"

namespace finv {

enum class PrimitiveKind { kBox, kSphere, kCylinder };

/// One solid primitive inside the unit cube. Boxes use all three half
/// extents; spheres use extent[0] as the radius; cylinders are z-aligned
/// with radius extent[0] and half-height extent[2].
struct Primitive {
    PrimitiveKind kind = PrimitiveKind::kSphere;
    Vec3 center{0, 0, 0};
    Vec3 extent{0.2, 0.2, 0.2};
    Vec3 color{0.5, 0.5, 0.5};

    bool contains(const Vec3& p) const {
        const Vec3 d = p - center;
        switch (kind) {
            case PrimitiveKind::kBox:
                return std::abs(d[0]) <= extent[0] && std::abs(d[1]) <= extent[1] && std::abs(d[2]) <= extent[2];
            case PrimitiveKind::kSphere:
                return norm(d) <= extent[0];
            case PrimitiveKind::kCylinder:
                return std::hypot(d[0], d[1]) <= extent[0] && std::abs(d[2]) <= extent[2];
        }
        return false;
    }

    /// Signed distance (negative inside); exact for all three kinds.
    double signed_distance(const Vec3& p) const {
        const Vec3 d = p - center;
        switch (kind) {
            case PrimitiveKind::kBox: {
                const double qx = std::abs(d[0]) - extent[0];
                const double qy = std::abs(d[1]) - extent[1];
                const double qz = std::abs(d[2]) - extent[2];
                const double ox = std::max(qx, 0.0), oy = std::max(qy, 0.0), oz = std::max(qz, 0.0);
                return std::sqrt(ox * ox + oy * oy + oz * oz) +
                       std::min(std::max(qx, std::max(qy, qz)), 0.0);
            }
            case PrimitiveKind::kSphere:
                return norm(d) - extent[0];
            case PrimitiveKind::kCylinder: {
                const double qr = std::hypot(d[0], d[1]) - extent[0];
                const double qz = std::abs(d[2]) - extent[2];
                const double orr = std::max(qr, 0.0), oz = std::max(qz, 0.0);
                return std::sqrt(orr * orr + oz * oz) + std::min(std::max(qr, qz), 0.0);
            }
        }
        return 0.0;
    }

    double surface_area() const {
        switch (kind) {
            case PrimitiveKind::kBox:
                return 8.0 * (extent[0] * extent[1] + extent[1] * extent[2] + extent[0] * extent[2]);
            case PrimitiveKind::kSphere:
                return 4.0 * M_PI * extent[0] * extent[0];
            case PrimitiveKind::kCylinder:
                return 2.0 * M_PI * extent[0] * (2.0 * extent[2]) + 2.0 * M_PI * extent[0] * extent[0];
        }
        return 0.0;
    }

    Vec3 sample_surface(Rng& rng) const {
        switch (kind) {
            case PrimitiveKind::kSphere: {
                Vec3 dir{rng.normal(), rng.normal(), rng.normal()};
                const double n = norm(dir);
                if (n < 1e-12) return center + Vec3{extent[0], 0, 0};
                return center + (extent[0] / n) * dir;
            }
            case PrimitiveKind::kBox: {
                const double areas[3] = {extent[1] * extent[2], extent[0] * extent[2], extent[0] * extent[1]};
                const double total = areas[0] + areas[1] + areas[2];
                double pick = rng.uniform() * total;
                int axis = 0;
                while (axis < 2 && pick > areas[axis]) pick -= areas[axis++];
                Vec3 p;
                for (int a = 0; a < 3; ++a) p[a] = rng.uniform(-extent[a], extent[a]);
                p[axis] = rng.uniform() < 0.5 ? -extent[axis] : extent[axis];
                return center + p;
            }
            case PrimitiveKind::kCylinder: {
                const double side = 2.0 * M_PI * extent[0] * (2.0 * extent[2]);
                const double caps = 2.0 * M_PI * extent[0] * extent[0];
                if (rng.uniform() * (side + caps) < side) {
                    const double ang = rng.uniform(0, 2.0 * M_PI);
                    return center + Vec3{extent[0] * std::cos(ang), extent[0] * std::sin(ang),
                                         rng.uniform(-extent[2], extent[2])};
                }
                const double ang = rng.uniform(0, 2.0 * M_PI);
                const double r = extent[0] * std::sqrt(rng.uniform());
                const double z = rng.uniform() < 0.5 ? -extent[2] : extent[2];
                return center + Vec3{r * std::cos(ang), r * std::sin(ang), z};
            }
        }
        return center;
    }
};

struct ShapeSpec {
    std::vector<Primitive> primitives;  // 1..3, inside the unit cube
    uint64_t seed = 0;

    void check() const {
        if (primitives.empty() || primitives.size() > 3)
            throw std::invalid_argument("shape: must have 1..3 primitives");
        for (const auto& pr : primitives) {
            for (int a = 0; a < 3; ++a) {
                const double reach = pr.kind == PrimitiveKind::kSphere ? pr.extent[0] : pr.extent[a];
                if (std::abs(pr.center[a]) + reach > 0.5)
                    throw std::invalid_argument("shape: primitive leaves the unit cube");
                if (pr.color[a] < 0.0 || pr.color[a] > 1.0)
                    throw std::invalid_argument("shape: color out of range");
            }
            if (pr.extent[0] <= 0.0) throw std::invalid_argument("shape: nonpositive extent");
        }
    }
};

constexpr double kHardEmptyLogit = -30.0;
constexpr double kHardSolidLogit = 30.0;

struct GroundTruthShape {
    VoxelFields fields;   // hard occupancy (logits +/-30), flooded colors
    Array surface_points; // [n, 3]
};

/// Voxelizes the primitive union at cell centers and samples a surface point
/// cloud. Every voxel takes the color of its nearest primitive so surface
/// interpolation stays clean.
inline GroundTruthShape generate_shape(const ShapeSpec& spec, int grid, int n_surface_points = 2048) {
    spec.check();
    GroundTruthShape out;
    const int V = grid;
    out.fields.grid = V;
    out.fields.occupancy_logits = Array::full({V * V * V}, kHardEmptyLogit);
    out.fields.colors = Array({V * V * V, 3});
    Array pts = grid_points(V);
    for (int64_t i = 0; i < out.fields.occupancy_logits.size(); ++i) {
        const Vec3 p{pts[i * 3 + 0], pts[i * 3 + 1], pts[i * 3 + 2]};
        double best = std::numeric_limits<double>::infinity();
        bool inside = false;
        for (const auto& pr : spec.primitives) {
            const double d = pr.signed_distance(p);
            inside = inside || pr.contains(p);
            if (d < best) {
                best = d;
                for (int c = 0; c < 3; ++c) out.fields.colors[i * 3 + c] = pr.color[c];
            }
        }
        if (inside) out.fields.occupancy_logits[i] = kHardSolidLogit;
    }

    // area-weighted union surface sampling with rejection of interior points
    Rng rng(mix_seed(spec.seed, 0x73757266));
    std::vector<double> cumulative;
    double total = 0.0;
    for (const auto& pr : spec.primitives) {
        total += pr.surface_area();
        cumulative.push_back(total);
    }
    out.surface_points = Array({n_surface_points, 3});
    for (int i = 0; i < n_surface_points; ++i) {
        Vec3 p{};
        for (int attempt = 0; attempt < 64; ++attempt) {
            const double pick = rng.uniform() * total;
            size_t j = 0;
            while (j + 1 < cumulative.size() && pick > cumulative[j]) ++j;
            p = spec.primitives[j].sample_surface(rng);
            bool interior = false;
            for (size_t q = 0; q < spec.primitives.size(); ++q)
                if (q != j && spec.primitives[q].signed_distance(p) < -1e-9) interior = true;
            if (!interior) break;
        }
        for (int a = 0; a < 3; ++a) out.surface_points[static_cast<int64_t>(i) * 3 + a] = p[a];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Random shape distributions

inline std::vector<Vec3> training_palette() {
    return {{0.85, 0.15, 0.10}, {0.10, 0.35, 0.80}, {0.15, 0.65, 0.20}, {0.90, 0.60, 0.10},
            {0.55, 0.25, 0.65}, {0.45, 0.45, 0.45}, {0.80, 0.75, 0.20}, {0.20, 0.60, 0.60}};
}

/// Colors outside the training palette; exercises refinement on textures the
/// prior has never seen.
inline std::vector<Vec3> novel_palette() {
    return {{0.95, 0.20, 0.75}, {0.10, 0.90, 0.85}, {0.98, 0.95, 0.90}, {0.05, 0.05, 0.30},
            {0.60, 0.95, 0.15}, {0.95, 0.45, 0.45}};
}

/// Draws a 1-3 primitive shape with colors from the palette; everything stays
/// inside the unit cube with margin.
inline ShapeSpec random_shape_spec(uint64_t seed, const std::vector<Vec3>& palette) {
    Rng rng(mix_seed(seed, 0x73686170));
    ShapeSpec spec;
    spec.seed = seed;
    const int count = 1 + static_cast<int>(rng.uniform_int(3));
    for (int i = 0; i < count; ++i) {
        Primitive pr;
        const double kind_pick = rng.uniform();
        pr.kind = kind_pick < 0.34   ? PrimitiveKind::kBox
                  : kind_pick < 0.67 ? PrimitiveKind::kSphere
                                     : PrimitiveKind::kCylinder;
        for (int a = 0; a < 3; ++a) pr.center[a] = rng.uniform(-0.18, 0.18);
        if (pr.kind == PrimitiveKind::kSphere) {
            const double r = rng.uniform(0.10, 0.26);
            pr.extent = {r, r, r};
        } else {
            for (int a = 0; a < 3; ++a) pr.extent[a] = rng.uniform(0.08, 0.26);
        }
        // shrink to keep the primitive inside the cube
        for (int a = 0; a < 3; ++a) {
            const double reach = pr.kind == PrimitiveKind::kSphere ? pr.extent[0] : pr.extent[a];
            const double room = 0.48 - std::abs(pr.center[a]);
            if (reach > room) {
                if (pr.kind == PrimitiveKind::kSphere)
                    pr.extent = {room, room, room};
                else
                    pr.extent[a] = room;
            }
        }
        const Vec3 base = palette[rng.uniform_int(static_cast<int64_t>(palette.size()))];
        for (int a = 0; a < 3; ++a)
            pr.color[a] = std::clamp(base[a] + rng.uniform(-0.05, 0.05), 0.0, 1.0);
        spec.primitives.push_back(pr);
    }
    return spec;
}

// ---------------------------------------------------------------------------
// Prior pretraining (latent-table optimization)

struct PretrainConfig {
    int num_shapes = 64;
    int steps = 2000;
    int batch = 8;
    int point_subsample = 1024;
    double boundary_fraction = 0.5;  // share of points drawn near occupancy boundaries
    double beta = 1e-3;              // latent norm regularizer
    double latent_lr = 2e-2;
    double param_lr = 3e-3;
    double lr_decay_floor = 0.1;     // cosine decay to this fraction of the initial rate
    int grid = 32;
    double variance_floor = 1e-4;
};

/// The pretrained prior: decoder weights, the per-training-shape latent
/// table, and the Gaussian sampler fitted to that table.
struct PriorBundle {
    GeneratorParams params;
    std::vector<LatentPair> latent_table;
    PriorSampler sampler;
    PretrainConfig config;
};

namespace detail {

inline Array gather_rows_const(const Array& src, const std::vector<int64_t>& rows) {
    const int c = src.shape()[1];
    Array out({static_cast<int>(rows.size()), c});
    for (size_t i = 0; i < rows.size(); ++i)
        std::copy(src.data() + rows[i] * c, src.data() + (rows[i] + 1) * c, out.data() + i * c);
    return out;
}

}  // namespace detail

/// Jointly optimizes {latent table, decoder weights} on occupancy BCE +
/// color MSE (occupied points only) + beta * ||w||^2 over stochastically
/// subsampled grid points. Aborts with diagnostics if the loss diverges.
inline PriorBundle pretrain_prior(const std::vector<ShapeSpec>& dataset, const ArchConfig& arch,
                                  const PretrainConfig& cfg, uint64_t seed,
                                  std::vector<double>* loss_history = nullptr) {
    if (dataset.size() < 16) throw std::invalid_argument("pretrain_prior: need at least 16 shapes");
    if (!arch.valid()) throw std::invalid_argument("pretrain_prior: invalid architecture");
    const int n_shapes = static_cast<int>(dataset.size());
    const int batch = std::min(cfg.batch, n_shapes);
    const int V = cfg.grid;
    const int64_t n_grid = static_cast<int64_t>(V) * V * V;
    const int M = static_cast<int>(std::min<int64_t>(cfg.point_subsample, n_grid));

    PriorBundle bundle;
    bundle.config = cfg;
    bundle.params = init_params(arch, mix_seed(seed, 0x70726574));

    // ground-truth occupancy/colors for every shape
    std::vector<GroundTruthShape> gt;
    gt.reserve(n_shapes);
    for (const auto& spec : dataset) gt.push_back(generate_shape(spec, V, 8));

    // latent table init
    Rng init_rng(mix_seed(seed, 0x7461626c));
    bundle.latent_table.resize(n_shapes);
    for (auto& w : bundle.latent_table) {
        w.w_geo = Array({arch.d_latent});
        w.w_tex = Array({arch.d_latent});
        for (int i = 0; i < arch.d_latent; ++i) {
            w.w_geo[i] = 0.3 * init_rng.normal();
            w.w_tex[i] = 0.3 * init_rng.normal();
        }
    }

    const Array fourier_full = fourier_features(grid_points(V), arch.fourier_bands);

    detail::MlpAdamState adam_phi(bundle.params.geo, cfg.param_lr);
    detail::MlpAdamState adam_theta(bundle.params.tex, cfg.param_lr);
    std::vector<Adam> adam_table;
    adam_table.reserve(n_shapes);
    for (int i = 0; i < n_shapes; ++i) adam_table.emplace_back(2 * arch.d_latent, cfg.latent_lr);

    // voxels adjacent to an occupancy flip; half the subsample concentrates
    // there so the decoder spends its capacity on the decision boundary
    std::vector<std::vector<int64_t>> boundary(n_shapes);
    for (int s = 0; s < n_shapes; ++s) {
        const Array& occ = gt[s].fields.occupancy_logits;
        auto at = [&](int x, int y, int z) { return occ[(static_cast<int64_t>(x) * V + y) * V + z] > 0.0; };
        for (int x = 0; x < V; ++x)
            for (int y = 0; y < V; ++y)
                for (int z = 0; z < V; ++z) {
                    const bool o = at(x, y, z);
                    const bool flip = (x > 0 && at(x - 1, y, z) != o) || (x + 1 < V && at(x + 1, y, z) != o) ||
                                      (y > 0 && at(x, y - 1, z) != o) || (y + 1 < V && at(x, y + 1, z) != o) ||
                                      (z > 0 && at(x, y, z - 1) != o) || (z + 1 < V && at(x, y, z + 1) != o);
                    if (flip) boundary[s].push_back((static_cast<int64_t>(x) * V + y) * V + z);
                }
    }

    // the graph is built once; per-slot point subsamples and ground truth
    // enter as constants refreshed every step
    Graph g;
    const Array zeros_mf({M, arch.fourier_dim()});
    struct Slot {
        DecodeNodes dec;
        int fourier = -1;
        int gt_pos = -1, gt_neg = -1, gt_col = -1, occ_weight = -1, cmse_norm = -1;
    };
    DecodeNodes shared;
    std::vector<Slot> slots(batch);
    int total = -1;
    for (int b = 0; b < batch; ++b) {
        slots[b].fourier = g.constant(zeros_mf);
        DecodeOptions opt;
        opt.geo_params_are_leaves = true;
        opt.tex_params_are_leaves = true;
        opt.fourier_node = slots[b].fourier;
        if (b > 0) opt.share_params = &shared;
        slots[b].dec = emit_decode(g, bundle.params, zeros_mf, opt);
        if (b == 0) shared = slots[b].dec;

        // occupancy BCE over sampled points
        int prob = g.clamp(g.sigmoid(slots[b].dec.occupancy), 1e-6, 1.0 - 1e-6);
        int one_minus = g.add_scalar(g.mul_scalar(prob, -1.0), 1.0);
        slots[b].gt_pos = g.constant(Array({M}));
        slots[b].gt_neg = g.constant(Array({M}));
        int bce = g.mul_scalar(g.sum_all(g.add(g.mul(g.log(prob), slots[b].gt_pos),
                                               g.mul(g.log(one_minus), slots[b].gt_neg))),
                               -1.0 / M);

        // color MSE on occupied samples
        slots[b].gt_col = g.constant(Array({M, 3}));
        slots[b].occ_weight = g.constant(Array({M, 1}));
        slots[b].cmse_norm = g.constant(Array::scalar(0.0));
        int diff = g.sub(slots[b].dec.colors, slots[b].gt_col);
        int weighted = g.mul(g.mul(diff, diff), g.broadcast(slots[b].occ_weight, {M, 3}));
        int cmse = g.mul(g.sum_all(weighted), slots[b].cmse_norm);

        // latent regularizer
        int reg = g.mul_scalar(g.add(g.sum_all(g.mul(slots[b].dec.w_geo, slots[b].dec.w_geo)),
                                     g.sum_all(g.mul(slots[b].dec.w_tex, slots[b].dec.w_tex))),
                               cfg.beta);

        int slot_loss = g.add(g.add(bce, cmse), reg);
        total = total < 0 ? slot_loss : g.add(total, slot_loss);
    }
    total = g.mul_scalar(total, 1.0 / batch);

    Rng sample_rng(mix_seed(seed, 0x73616d70));
    Workspace ws;
    std::vector<int64_t> rows(M);
    for (int step = 0; step < cfg.steps; ++step) {
        // cosine learning-rate decay
        const double decay = cfg.lr_decay_floor +
                             (1.0 - cfg.lr_decay_floor) * 0.5 *
                                 (1.0 + std::cos(M_PI * step / std::max(1, cfg.steps - 1)));
        adam_phi.set_lr(cfg.param_lr * decay);
        adam_theta.set_lr(cfg.param_lr * decay);

        // deterministic cyclic batching, stochastic per-slot point subsample
        std::vector<int> shape_ids(batch);
        for (int b = 0; b < batch; ++b) shape_ids[b] = (step * batch + b) % n_shapes;

        for (int b = 0; b < batch; ++b) {
            const GroundTruthShape& s = gt[shape_ids[b]];
            const auto& bnd = boundary[shape_ids[b]];
            const int n_boundary = bnd.empty() ? 0 : static_cast<int>(cfg.boundary_fraction * M);
            for (int i = 0; i < M; ++i)
                rows[i] = i < n_boundary ? bnd[sample_rng.uniform_int(static_cast<int64_t>(bnd.size()))]
                                         : sample_rng.uniform_int(n_grid);
            g.set_constant(slots[b].fourier, detail::gather_rows_const(fourier_full, rows));
            Array gt_pos({M}), gt_neg({M}), occ_weight({M, 1}), gt_col({M, 3});
            double occ_mass = 0.0;
            for (int i = 0; i < M; ++i) {
                const double occupied = s.fields.occupancy_logits[rows[i]] > 0.0 ? 1.0 : 0.0;
                gt_pos[i] = occupied;
                gt_neg[i] = 1.0 - occupied;
                occ_weight[i] = occupied;
                occ_mass += occupied;
                for (int c = 0; c < 3; ++c)
                    gt_col[static_cast<int64_t>(i) * 3 + c] = s.fields.colors[rows[i] * 3 + c];
            }
            g.set_constant(slots[b].gt_pos, std::move(gt_pos));
            g.set_constant(slots[b].gt_neg, std::move(gt_neg));
            g.set_constant(slots[b].gt_col, std::move(gt_col));
            g.set_constant(slots[b].occ_weight, std::move(occ_weight));
            g.set_constant(slots[b].cmse_norm, Array::scalar(1.0 / (3.0 * std::max(occ_mass, 1.0))));
        }

        std::map<int, Array> leaves;
        feed_mlp(leaves, shared.phi_w, shared.phi_b, bundle.params.geo);
        feed_mlp(leaves, shared.theta_w, shared.theta_b, bundle.params.tex);
        for (int b = 0; b < batch; ++b) feed_latents(leaves, slots[b].dec, bundle.latent_table[shape_ids[b]]);

        double loss_value;
        try {
            g.forward(ws, leaves);
            loss_value = ws.value(total).value();
        } catch (const NonFiniteError& e) {
            throw NonFiniteError(e.node, "pretrain_prior: diverged at step " + std::to_string(step) + ": " +
                                             e.what());
        }
        if (loss_history) loss_history->push_back(loss_value);

        auto grads = g.backward(ws, total);
        adam_phi.step(bundle.params.geo, grads, shared.phi_w, shared.phi_b);
        adam_theta.step(bundle.params.tex, grads, shared.theta_w, shared.theta_b);
        const int d = arch.d_latent;
        for (int b = 0; b < batch; ++b) {
            LatentPair& w = bundle.latent_table[shape_ids[b]];
            const Array& gg = grads.at(slots[b].dec.w_geo);
            const Array& gtx = grads.at(slots[b].dec.w_tex);
            Array flat_w({2 * d}), flat_g({2 * d});
            std::copy(w.w_geo.data(), w.w_geo.data() + d, flat_w.data());
            std::copy(w.w_tex.data(), w.w_tex.data() + d, flat_w.data() + d);
            std::copy(gg.data(), gg.data() + d, flat_g.data());
            std::copy(gtx.data(), gtx.data() + d, flat_g.data() + d);
            adam_table[shape_ids[b]].set_lr(cfg.latent_lr * decay);
            adam_table[shape_ids[b]].step(flat_w, flat_g);
            std::copy(flat_w.data(), flat_w.data() + d, w.w_geo.data());
            std::copy(flat_w.data() + d, flat_w.data() + 2 * d, w.w_tex.data());
        }
    }

    // fit the sampler to the final table with a variance floor
    const int d = arch.d_latent;
    bundle.sampler.mean_geo = Array({d});
    bundle.sampler.mean_tex = Array({d});
    bundle.sampler.scale_geo = Array({d});
    bundle.sampler.scale_tex = Array({d});
    for (int pass = 0; pass < 2; ++pass) {
        Array& mean = pass == 0 ? bundle.sampler.mean_geo : bundle.sampler.mean_tex;
        Array& scale = pass == 0 ? bundle.sampler.scale_geo : bundle.sampler.scale_tex;
        for (int i = 0; i < d; ++i) {
            double m = 0.0;
            for (const auto& w : bundle.latent_table) m += (pass == 0 ? w.w_geo : w.w_tex)[i];
            m /= n_shapes;
            double var = 0.0;
            for (const auto& w : bundle.latent_table) {
                const double dv = (pass == 0 ? w.w_geo : w.w_tex)[i] - m;
                var += dv * dv;
            }
            var /= n_shapes;
            mean[i] = m;
            scale[i] = std::sqrt(std::max(var, cfg.variance_floor));
        }
    }
    return bundle;
}

/// Intersection-over-union of thresholded occupancy (logit > 0) vs hard GT.
inline double occupancy_iou(const Array& logits, const Array& gt_logits) {
    int64_t inter = 0, uni = 0;
    for (int64_t i = 0; i < logits.size(); ++i) {
        const bool a = logits[i] > 0.0;
        const bool b = gt_logits[i] > 0.0;
        inter += a && b;
        uni += a || b;
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

inline double mean_training_iou(const PriorBundle& bundle, const std::vector<ShapeSpec>& dataset) {
    double acc = 0.0;
    for (size_t i = 0; i < dataset.size(); ++i) {
        GroundTruthShape gt = generate_shape(dataset[i], bundle.config.grid, 8);
        VoxelFields dec = decode(bundle.latent_table[i], bundle.params, bundle.config.grid);
        acc += occupancy_iou(dec.occupancy_logits, gt.fields.occupancy_logits);
    }
    return acc / dataset.size();
}

// ---------------------------------------------------------------------------
// Bundle I/O: directory with params checkpoint, flat latent table, sampler
// statistics, and a config snapshot.

inline void save_prior_bundle(const PriorBundle& bundle, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    save_params(bundle.params, dir + "/params.finvprior");
    {
        std::ofstream os(dir + "/latent_table.bin", std::ios::binary);
        for (const auto& w : bundle.latent_table) {
            os.write(reinterpret_cast<const char*>(w.w_geo.data()), w.w_geo.size() * sizeof(double));
            os.write(reinterpret_cast<const char*>(w.w_tex.data()), w.w_tex.size() * sizeof(double));
        }
        if (!os) throw std::runtime_error("save_prior_bundle: latent table write failed");
    }
    nlohmann::json sampler{{"mean_geo", bundle.sampler.mean_geo.vec()},
                           {"mean_tex", bundle.sampler.mean_tex.vec()},
                           {"scale_geo", bundle.sampler.scale_geo.vec()},
                           {"scale_tex", bundle.sampler.scale_tex.vec()}};
    std::ofstream(dir + "/sampler.json") << sampler.dump(2) << "\n";
    nlohmann::json cfg{{"num_shapes", bundle.config.num_shapes},
                       {"steps", bundle.config.steps},
                       {"batch", bundle.config.batch},
                       {"point_subsample", bundle.config.point_subsample},
                       {"beta", bundle.config.beta},
                       {"latent_lr", bundle.config.latent_lr},
                       {"param_lr", bundle.config.param_lr},
                       {"grid", bundle.config.grid},
                       {"variance_floor", bundle.config.variance_floor}};
    std::ofstream(dir + "/config.json") << cfg.dump(2) << "\n";
}

inline PriorBundle load_prior_bundle(const std::string& dir) {
    PriorBundle bundle;
    bundle.params = load_params(dir + "/params.finvprior");
    std::ifstream cfg_in(dir + "/config.json");
    if (!cfg_in) throw std::runtime_error("load_prior_bundle: missing config.json in " + dir);
    nlohmann::json cfg = nlohmann::json::parse(cfg_in);
    bundle.config.num_shapes = cfg.at("num_shapes");
    bundle.config.steps = cfg.at("steps");
    bundle.config.batch = cfg.at("batch");
    bundle.config.point_subsample = cfg.at("point_subsample");
    bundle.config.beta = cfg.at("beta");
    bundle.config.latent_lr = cfg.at("latent_lr");
    bundle.config.param_lr = cfg.at("param_lr");
    bundle.config.grid = cfg.at("grid");
    bundle.config.variance_floor = cfg.at("variance_floor");

    const int d = bundle.params.arch.d_latent;
    std::ifstream is(dir + "/latent_table.bin", std::ios::binary);
    if (!is) throw std::runtime_error("load_prior_bundle: missing latent_table.bin in " + dir);
    is.seekg(0, std::ios::end);
    const int64_t bytes = is.tellg();
    is.seekg(0);
    const int64_t n = bytes / (2 * d * static_cast<int64_t>(sizeof(double)));
    bundle.latent_table.resize(n);
    for (auto& w : bundle.latent_table) {
        w.w_geo = Array({d});
        w.w_tex = Array({d});
        is.read(reinterpret_cast<char*>(w.w_geo.data()), d * sizeof(double));
        is.read(reinterpret_cast<char*>(w.w_tex.data()), d * sizeof(double));
    }
    if (!is) throw std::runtime_error("load_prior_bundle: truncated latent table");

    std::ifstream samp_in(dir + "/sampler.json");
    if (!samp_in) throw std::runtime_error("load_prior_bundle: missing sampler.json in " + dir);
    nlohmann::json samp = nlohmann::json::parse(samp_in);
    auto load_vec = [&](const char* key) {
        std::vector<double> v = samp.at(key).get<std::vector<double>>();
        return Array({static_cast<int>(v.size())}, std::move(v));
    };
    bundle.sampler.mean_geo = load_vec("mean_geo");
    bundle.sampler.mean_tex = load_vec("mean_tex");
    bundle.sampler.scale_geo = load_vec("scale_geo");
    bundle.sampler.scale_tex = load_vec("scale_tex");
    return bundle;
}

}  // namespace finv
