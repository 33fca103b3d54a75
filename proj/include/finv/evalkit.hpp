#pragma once

#include <functional>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "finv/finv.hpp"
#include "finv/harness.hpp"
#include "finv/mesh.hpp"
#include "finv/metrics.hpp"
#include "finv/objectives.hpp"
#include "finv/threads.hpp"

namespace finv {

/// What a reconstruction must expose for evaluation: novel-view rendering
/// and a field representation for shape metrics.
struct ReconstructedObject {
    std::function<RenderOutput(const Camera&)> render_view;
    VoxelFields fields;
};

/// Builds a reconstruction from an observation prefix. Evaluation hands the
/// reconstructor exactly the first k frames, which keeps input/eval frames
/// structurally isolated (tests trace this through the callable).
using Reconstructor = std::function<ReconstructedObject(std::span<const ObservationFrame>)>;

struct ViewRecord {
    int frame_index = 0;
    double rotation_delta_deg = 0.0;
    double psnr = 0.0;
    double ssim = 0.0;
    double perceptual = 0.0;
};

struct EvalReport {
    int k_inputs = 0;
    std::vector<ViewRecord> records;
    double mean_psnr = 0.0, mean_ssim = 0.0, mean_perceptual = 0.0;
    double chamfer = 0.0, f1_at_tau = 0.0;
    double tau = 0.0;
};

struct EvalOptions {
    double bbox_dilation = 0.10;   // per side, fraction of the bbox extent
    double f1_tau_fraction = 0.05; // of the GT surface-cloud bbox diagonal
    int mesh_sample_points = 2048;
    uint64_t seed = 7;
};

namespace detail {

/// Bounding box of silhouette pixels (mask >= 0.5), dilated per side and
/// clamped to the image. Empty when there is no silhouette.
inline RegionRect silhouette_region(const Array& mask, double dilation) {
    const int h = mask.shape()[0], w = mask.shape()[1];
    int x0 = w, y0 = h, x1 = -1, y1 = -1;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (mask[static_cast<int64_t>(y) * w + x] >= 0.5) {
                x0 = std::min(x0, x);
                x1 = std::max(x1, x);
                y0 = std::min(y0, y);
                y1 = std::max(y1, y);
            }
    if (x1 < x0) return {};
    const int dx = static_cast<int>(dilation * (x1 - x0 + 1) + 0.5);
    const int dy = static_cast<int>(dilation * (y1 - y0 + 1) + 0.5);
    x0 = std::max(0, x0 - dx);
    y0 = std::max(0, y0 - dy);
    x1 = std::min(w - 1, x1 + dx);
    y1 = std::min(h - 1, y1 + dy);
    // grow tiny regions to the SSIM window so every record is scorable
    constexpr int kMin = 11;
    auto widen = [](int& lo, int& hi, int limit) {
        while (hi - lo + 1 < kMin && (lo > 0 || hi < limit - 1)) {
            if (lo > 0) --lo;
            if (hi - lo + 1 < kMin && hi < limit - 1) ++hi;
        }
    };
    widen(x0, x1, w);
    widen(y0, y1, h);
    return {x0, y0, x1 - x0 + 1, y1 - y0 + 1};
}

inline Array crop(const Array& img, const RegionRect& r) {
    const int w = img.shape()[1];
    const int channels = img.rank() == 3 ? img.shape()[2] : 1;
    Array out(channels == 3 ? Shape{r.height, r.width, 3} : Shape{r.height, r.width});
    for (int y = 0; y < r.height; ++y)
        for (int x = 0; x < r.width; ++x)
            for (int c = 0; c < channels; ++c)
                out[(static_cast<int64_t>(y) * r.width + x) * channels + c] =
                    img[(static_cast<int64_t>(r.y0 + y) * w + (r.x0 + x)) * channels + c];
    return out;
}

inline double cloud_bbox_diagonal(const Array& points) {
    Vec3 lo{1e30, 1e30, 1e30}, hi{-1e30, -1e30, -1e30};
    for (int64_t i = 0; i < points.shape()[0]; ++i)
        for (int a = 0; a < 3; ++a) {
            lo[a] = std::min(lo[a], points[i * 3 + a]);
            hi[a] = std::max(hi[a], points[i * 3 + a]);
        }
    return norm(hi - lo);
}

}  // namespace detail

/// Scores an already-built reconstruction on every frame with index >= 5:
/// PSNR/SSIM/perceptual proxy over the GT object bbox dilated 10%, rotation
/// delta to the nearest of the k input views, and shape metrics from
/// extracted-mesh samples against the GT surface cloud.
inline EvalReport score_reconstruction(const SequenceData& seq, int k, const ReconstructedObject& result,
                                       const PipelineConfig& pipe, const EvalOptions& opts = {}) {
    if (static_cast<int>(seq.frames.size()) < 6)
        throw std::invalid_argument("evaluate_sequence: need at least 6 frames");
    if (k != 1 && k != 3 && k != 5) throw std::invalid_argument("evaluate_sequence: k must be 1, 3, or 5");

    EvalReport report;
    report.k_inputs = k;
    ObjectiveConfig proxy_cfg = pipe.objective;
    for (size_t t = 5; t < seq.frames.size(); ++t) {
        const Camera& cam = seq.frames[t].camera;
        RenderOutput gt_view = render(seq.gt.fields, cam, pipe.render);  // clean, unoccluded
        const RegionRect region = detail::silhouette_region(gt_view.mask, opts.bbox_dilation);
        if (region.empty()) continue;
        RenderOutput pred = result.render_view(cam);

        ViewRecord rec;
        rec.frame_index = static_cast<int>(t);
        rec.psnr = psnr(pred.rgb, gt_view.rgb, region);
        rec.ssim = ssim(pred.rgb, gt_view.rgb, region);
        const Array pc = detail::crop(pred.rgb, region);
        const Array gc = detail::crop(gt_view.rgb, region);
        rec.perceptual = perceptual_loss(pc, gc, Array::full({region.height, region.width}, 1.0), proxy_cfg);
        rec.rotation_delta_deg = 1e30;
        for (int i = 0; i < k; ++i)
            rec.rotation_delta_deg =
                std::min(rec.rotation_delta_deg, rotation_delta(cam, seq.frames[i].camera));
        report.records.push_back(rec);
    }
    if (report.records.empty()) throw std::runtime_error("evaluate_sequence: no scorable eval frames");
    for (const auto& r : report.records) {
        report.mean_psnr += r.psnr;
        report.mean_ssim += r.ssim;
        report.mean_perceptual += r.perceptual;
    }
    report.mean_psnr /= report.records.size();
    report.mean_ssim /= report.records.size();
    report.mean_perceptual /= report.records.size();

    report.tau = opts.f1_tau_fraction * detail::cloud_bbox_diagonal(seq.gt.surface_points);
    Mesh mesh = extract_mesh(result.fields);
    if (mesh.empty()) {
        report.chamfer = std::numeric_limits<double>::infinity();
        report.f1_at_tau = 0.0;
    } else {
        Array samples = sample_mesh_points(mesh, opts.mesh_sample_points, opts.seed);
        report.chamfer = chamfer_l2(samples, seq.gt.surface_points);
        report.f1_at_tau = f1(samples, seq.gt.surface_points, report.tau);
    }
    return report;
}

/// Hands the reconstructor exactly the first k frames, then scores. The
/// eval frames stay structurally out of reach of the reconstruction.
inline EvalReport evaluate_sequence(const SequenceData& seq, int k, const Reconstructor& reconstruct_fn,
                                    const PipelineConfig& pipe, const EvalOptions& opts = {}) {
    if (static_cast<int>(seq.frames.size()) < 6)
        throw std::invalid_argument("evaluate_sequence: need at least 6 frames");
    if (k != 1 && k != 3 && k != 5) throw std::invalid_argument("evaluate_sequence: k must be 1, 3, or 5");
    ReconstructedObject result = reconstruct_fn(std::span(seq.frames).first(k));
    return score_reconstruction(seq, k, result, pipe, opts);
}

// ---------------------------------------------------------------------------
// Ablation running

enum class Variant { kInversionOnly, kNoRefine, kFull, kBaseline };

inline const char* variant_name(Variant v) {
    switch (v) {
        case Variant::kInversionOnly: return "inversion_only";
        case Variant::kNoRefine: return "filter_no_refine";
        case Variant::kFull: return "full";
        case Variant::kBaseline: return "baseline_direct_fit";
    }
    return "?";
}

/// Reconstruction entry point for one ablation variant.
inline ReconstructedObject run_variant(Variant variant, std::span<const ObservationFrame> frames,
                                       const PriorBundle& prior, const FinvConfig& config,
                                       const PipelineConfig& pipe, uint64_t seed) {
    FinvConfig cfg = config;
    switch (variant) {
        case Variant::kInversionOnly:
            cfg.population_size = 1;
            cfg.refine_steps = 0;
            cfg.refine_top_k = 1;
            break;
        case Variant::kNoRefine:
            cfg.refine_steps = 0;
            break;
        case Variant::kFull:
            break;
        case Variant::kBaseline: {
            VoxelFields fields = baseline_direct_fit(frames, pipe, cfg);
            auto shared = std::make_shared<VoxelFields>(std::move(fields));
            ReconstructedObject out;
            out.fields = *shared;
            out.render_view = [shared, pipe](const Camera& cam) { return render(*shared, cam, pipe.render); };
            return out;
        }
    }
    ReconstructionResult res = reconstruct(frames, prior.params, prior.sampler, cfg, pipe, seed);
    auto shared = std::make_shared<ReconstructionResult>(std::move(res));
    ReconstructedObject out;
    out.fields = decode(shared->w, shared->params, pipe.grid);
    auto fields = std::make_shared<VoxelFields>(out.fields);
    out.render_view = [fields, pipe](const Camera& cam) { return render(*fields, cam, pipe.render); };
    return out;
}

struct AblationRecord {
    int sequence = 0;
    Variant variant = Variant::kFull;
    int k = 1;
    EvalReport report;
};

struct AblationResult {
    std::vector<AblationRecord> records;

    /// Mean over sequences of a per-sequence metric.
    double mean(Variant v, int k, const std::function<double(const EvalReport&)>& metric) const {
        double acc = 0;
        int n = 0;
        for (const auto& r : records)
            if (r.variant == v && r.k == k) {
                acc += metric(r.report);
                ++n;
            }
        return n ? acc / n : 0.0;
    }
};

/// Runs every (sequence, variant, k) cell of the comparison. Sequences are
/// processed in parallel; records come out in deterministic order.
inline AblationResult run_ablation(const std::vector<SequenceData>& sequences,
                                   const std::vector<Variant>& variants, const std::vector<int>& ks,
                                   const PriorBundle& prior, const FinvConfig& config,
                                   const PipelineConfig& pipe, uint64_t seed, int threads,
                                   const EvalOptions& opts = {}) {
    struct Item {
        int seq, vi, ki;
    };
    std::vector<Item> items;
    for (int s = 0; s < static_cast<int>(sequences.size()); ++s)
        for (int vi = 0; vi < static_cast<int>(variants.size()); ++vi)
            for (int ki = 0; ki < static_cast<int>(ks.size()); ++ki) items.push_back({s, vi, ki});

    AblationResult out;
    out.records.resize(items.size());
    FinvConfig inner = config;
    inner.threads = 1;  // parallelism lives at the sequence level here
    parallel_for(static_cast<int64_t>(items.size()), threads, [&](int64_t i, int) {
        const Item& it = items[i];
        const Variant v = variants[it.vi];
        const int k = ks[it.ki];
        const uint64_t run_seed = mix_seed(seed, 0xab1a0000ULL + static_cast<uint64_t>(it.seq));
        Reconstructor rec = [&](std::span<const ObservationFrame> frames) {
            return run_variant(v, frames, prior, inner, pipe, run_seed);
        };
        AblationRecord& record = out.records[i];
        record.sequence = it.seq;
        record.variant = v;
        record.k = k;
        record.report = evaluate_sequence(sequences[it.seq], k, rec, pipe, opts);
    });
    return out;
}

// ---------------------------------------------------------------------------
// CSV emission

/// Per-view CSV: one row per (sequence, variant, k, eval frame), with
/// rotation-delta columns for slope analysis.
inline std::string ablation_csv(const AblationResult& result) {
    std::ostringstream os;
    os.precision(17);
    os << "sequence,variant,k,frame,rotation_delta_deg,psnr,ssim,perceptual,chamfer_l2,f1_at_tau\n";
    for (const auto& r : result.records)
        for (const auto& view : r.report.records)
            os << r.sequence << "," << variant_name(r.variant) << "," << r.k << "," << view.frame_index
               << "," << view.rotation_delta_deg << "," << view.psnr << "," << view.ssim << ","
               << view.perceptual << "," << r.report.chamfer << "," << r.report.f1_at_tau << "\n";
    return os.str();
}

/// Aggregate CSV: per (variant, k) means plus the fitted perceptual-vs-delta
/// slope across all eval views.
inline std::string ablation_summary_csv(const AblationResult& result, const std::vector<Variant>& variants,
                                        const std::vector<int>& ks) {
    std::ostringstream os;
    os.precision(17);
    os << "variant,k,mean_psnr,mean_ssim,mean_perceptual,mean_chamfer_l2,mean_f1,perceptual_delta_slope\n";
    for (Variant v : variants)
        for (int k : ks) {
            std::vector<double> deltas, perceptuals;
            for (const auto& r : result.records)
                if (r.variant == v && r.k == k)
                    for (const auto& view : r.report.records) {
                        deltas.push_back(view.rotation_delta_deg);
                        perceptuals.push_back(view.perceptual);
                    }
            if (deltas.empty()) continue;
            const double slope = deltas.size() >= 2 ? linear_slope(deltas, perceptuals) : 0.0;
            os << variant_name(v) << "," << k << ","
               << result.mean(v, k, [](const EvalReport& e) { return e.mean_psnr; }) << ","
               << result.mean(v, k, [](const EvalReport& e) { return e.mean_ssim; }) << ","
               << result.mean(v, k, [](const EvalReport& e) { return e.mean_perceptual; }) << ","
               << result.mean(v, k, [](const EvalReport& e) { return e.chamfer; }) << ","
               << result.mean(v, k, [](const EvalReport& e) { return e.f1_at_tau; }) << "," << slope
               << "\n";
        }
    return os.str();
}

}  // namespace finv
