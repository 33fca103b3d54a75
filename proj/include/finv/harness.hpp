#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "finv/image_io.hpp"
#include "finv/observation.hpp"
#include "finv/priorlab.hpp"
#include "finv/renderer.hpp"

namespace finv {

struct TrajectorySpec {
    double radius = 1.6;
    double elevation_deg = 25.0;
    double azimuth_start_deg = 0.0;
    double azimuth_span_deg = 160.0;  // <= 30 degrees models the similar-views condition
};

struct CropRect {
    int x0 = 0, y0 = 0, width = 0, height = 0;  // pixels that stay valid
};

/// Recipe for one synthetic observation sequence: the object, a camera arc,
/// and the partial-view conditions (occluder fraction and viewport crop).
struct SequenceSpec {
    ShapeSpec shape;
    TrajectorySpec trajectory;
    int n_frames = 10;
    int width = 64, height = 64;
    double focal_scale = 1.1;  // fx = fy = focal_scale * width
    double occlusion_q = 0.0;  // fraction of the object bbox covered by the occluder
    std::optional<CropRect> crop;
    uint64_t seed = 0;
    int grid = 32;  // ground-truth voxelization
    int surface_points = 2048;

    void check() const {
        shape.check();
        if (n_frames < 6)
            throw std::invalid_argument("sequence: need at least 6 frames for the evaluation protocol");
        if (occlusion_q < 0.0 || occlusion_q >= 1.0)
            throw std::invalid_argument("sequence: occlusion fraction must be in [0,1)");
        if (width < 8 || height < 8) throw std::invalid_argument("sequence: image too small");
    }

    Camera camera_at(int t) const {
        const double az = trajectory.azimuth_start_deg +
                          trajectory.azimuth_span_deg * (n_frames > 1 ? static_cast<double>(t) / (n_frames - 1) : 0.0);
        return orbit_camera(trajectory.radius, trajectory.elevation_deg, az, focal_scale * width, width,
                            height);
    }
};

struct SequenceData {
    std::vector<ObservationFrame> frames;
    GroundTruthShape gt;
    SequenceSpec spec;
};

constexpr double kOccluderGray = 0.5;

/// Renders the ground-truth fields along the arc and applies the
/// partial-view conditions. Frame rgb/masks are deterministic per seed;
/// valid object pixels reproduce the renderer's output exactly.
inline SequenceData make_sequence(const SequenceSpec& spec, const RenderConfig& render_cfg = {}) {
    spec.check();
    SequenceData out;
    out.spec = spec;
    out.gt = generate_shape(spec.shape, spec.grid, spec.surface_points);

    bool any_silhouette = false;
    for (int t = 0; t < spec.n_frames; ++t) {
        const Camera cam = spec.camera_at(t);
        RenderOutput ro = render(out.gt.fields, cam, render_cfg);
        ObservationFrame frame;
        frame.rgb = ro.rgb;
        frame.camera = cam;
        frame.index = t;
        frame.object_mask = Array({spec.height, spec.width});
        frame.validity_mask = Array::full({spec.height, spec.width}, 1.0);
        for (int64_t i = 0; i < ro.mask.size(); ++i)
            frame.object_mask[i] = ro.mask[i] >= 0.5 ? 1.0 : 0.0;

        if (spec.occlusion_q > 0.0) {
            // bbox of the silhouette
            int bx0 = spec.width, by0 = spec.height, bx1 = -1, by1 = -1;
            for (int y = 0; y < spec.height; ++y)
                for (int x = 0; x < spec.width; ++x)
                    if (frame.object_mask[static_cast<int64_t>(y) * spec.width + x] > 0.0) {
                        bx0 = std::min(bx0, x);
                        bx1 = std::max(bx1, x);
                        by0 = std::min(by0, y);
                        by1 = std::max(by1, y);
                    }
            if (bx1 >= bx0) {
                Rng rng(mix_seed(spec.seed, 0x6f63636cULL + static_cast<uint64_t>(t)));
                const double bw = bx1 - bx0 + 1, bh = by1 - by0 + 1;
                double wf = std::sqrt(spec.occlusion_q) * rng.uniform(0.85, 1.2);
                wf = std::min(wf, 1.0);
                const double hf = std::min(1.0, spec.occlusion_q / wf);
                const int rw = std::max(1, static_cast<int>(wf * bw + 0.5));
                const int rh = std::max(1, static_cast<int>(hf * bh + 0.5));
                const int rx = bx0 + static_cast<int>(rng.uniform() * std::max(1.0, bw - rw + 1));
                const int ry = by0 + static_cast<int>(rng.uniform() * std::max(1.0, bh - rh + 1));
                for (int y = ry; y < std::min(spec.height, ry + rh); ++y)
                    for (int x = rx; x < std::min(spec.width, rx + rw); ++x) {
                        const int64_t i = static_cast<int64_t>(y) * spec.width + x;
                        frame.validity_mask[i] = 0.0;
                        frame.object_mask[i] = 0.0;
                        for (int c = 0; c < 3; ++c) frame.rgb[i * 3 + c] = kOccluderGray;
                    }
            }
        }

        if (spec.crop) {
            const CropRect& cr = *spec.crop;
            for (int y = 0; y < spec.height; ++y)
                for (int x = 0; x < spec.width; ++x) {
                    const bool inside =
                        x >= cr.x0 && x < cr.x0 + cr.width && y >= cr.y0 && y < cr.y0 + cr.height;
                    if (!inside) {
                        const int64_t i = static_cast<int64_t>(y) * spec.width + x;
                        frame.validity_mask[i] = 0.0;
                        frame.object_mask[i] = 0.0;
                    }
                }
        }

        for (int64_t i = 0; i < frame.object_mask.size(); ++i) any_silhouette |= frame.object_mask[i] > 0.0;
        frame.check();
        out.frames.push_back(std::move(frame));
    }
    if (!any_silhouette) throw std::runtime_error("make_sequence: object silhouette empty in every frame");
    return out;
}

// ---------------------------------------------------------------------------
// Shape/sequence JSON

inline void to_json(nlohmann::json& j, const Primitive& p) {
    const char* kind = p.kind == PrimitiveKind::kBox ? "box" : p.kind == PrimitiveKind::kSphere ? "sphere" : "cylinder";
    j = {{"kind", kind},
         {"center", p.center},
         {"extent", p.extent},
         {"color", p.color}};
}

inline void from_json(const nlohmann::json& j, Primitive& p) {
    const std::string kind = j.at("kind");
    p.kind = kind == "box"      ? PrimitiveKind::kBox
             : kind == "sphere" ? PrimitiveKind::kSphere
                                : PrimitiveKind::kCylinder;
    j.at("center").get_to(p.center);
    j.at("extent").get_to(p.extent);
    j.at("color").get_to(p.color);
}

inline void to_json(nlohmann::json& j, const ShapeSpec& s) {
    j = {{"primitives", s.primitives}, {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, ShapeSpec& s) {
    j.at("primitives").get_to(s.primitives);
    j.at("seed").get_to(s.seed);
}

// ---------------------------------------------------------------------------
// Dataset directory: manifest + per-frame PNGs

namespace detail {

inline std::string frame_file(const char* prefix, int t) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s_%04d.png", prefix, t);
    return buf;
}

}  // namespace detail

/// Writes `manifest` plus rgb_####.png / mask_####.png / valid_####.png.
/// When a spec is given, it is embedded so ground truth can be regenerated
/// exactly on load.
inline void save_sequence(const std::vector<ObservationFrame>& frames, const std::string& dir,
                          const SequenceSpec* spec = nullptr) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json manifest;
    manifest["schema"] = "FINVSEQ1";
    nlohmann::json frame_list = nlohmann::json::array();
    for (const auto& f : frames) {
        const std::string rgb = detail::frame_file("rgb", f.index);
        const std::string mask = detail::frame_file("mask", f.index);
        const std::string valid = detail::frame_file("valid", f.index);
        save_png(f.rgb, dir + "/" + rgb);
        save_png(f.object_mask, dir + "/" + mask);
        save_png(f.validity_mask, dir + "/" + valid);
        frame_list.push_back({{"rgb", rgb},
                              {"mask", mask},
                              {"valid", valid},
                              {"world_to_camera", f.camera.world_to_camera},
                              {"fx", f.camera.fx},
                              {"fy", f.camera.fy},
                              {"cx", f.camera.cx},
                              {"cy", f.camera.cy},
                              {"width", f.camera.width},
                              {"height", f.camera.height},
                              {"index", f.index}});
    }
    manifest["frames"] = std::move(frame_list);
    if (spec) {
        manifest["gt"] = {{"shape", spec->shape},
                          {"grid", spec->grid},
                          {"surface_points", spec->surface_points},
                          {"n_frames", spec->n_frames},
                          {"width", spec->width},
                          {"height", spec->height},
                          {"focal_scale", spec->focal_scale},
                          {"occlusion_q", spec->occlusion_q},
                          {"seed", spec->seed},
                          {"radius", spec->trajectory.radius},
                          {"elevation_deg", spec->trajectory.elevation_deg},
                          {"azimuth_start_deg", spec->trajectory.azimuth_start_deg},
                          {"azimuth_span_deg", spec->trajectory.azimuth_span_deg}};
    }
    std::ofstream os(dir + "/manifest");
    if (!os) throw std::runtime_error("save_sequence: cannot write manifest in " + dir);
    os << manifest.dump(1) << "\n";
}

struct LoadedSequence {
    std::vector<ObservationFrame> frames;
    std::optional<SequenceSpec> spec;  // present when the manifest embeds ground truth
    int total_frames = 0;
};

/// Reads the manifest and the first `max_frames` frames (all by default).
/// Only the referenced files for those frames are touched.
inline LoadedSequence load_sequence(const std::string& dir, int max_frames = -1) {
    std::ifstream is(dir + "/manifest");
    if (!is) throw std::runtime_error("load_sequence: missing manifest in " + dir);
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("load_sequence: malformed manifest in " + dir + ": " + e.what());
    }
    if (manifest.value("schema", "") != std::string("FINVSEQ1"))
        throw std::runtime_error("load_sequence: unsupported schema in " + dir);

    LoadedSequence out;
    const auto& frame_list = manifest.at("frames");
    out.total_frames = static_cast<int>(frame_list.size());
    const int count = max_frames < 0 ? out.total_frames : std::min<int>(max_frames, out.total_frames);
    for (int t = 0; t < count; ++t) {
        const auto& e = frame_list[t];
        ObservationFrame f;
        const std::string rgb_path = dir + "/" + e.at("rgb").get<std::string>();
        if (!std::filesystem::exists(rgb_path))
            throw std::runtime_error("load_sequence: missing frame file " + rgb_path);
        f.rgb = load_png(rgb_path);
        Array mask = load_png(dir + "/" + e.at("mask").get<std::string>());
        Array valid = load_png(dir + "/" + e.at("valid").get<std::string>());
        f.object_mask = Array(mask.shape());
        f.validity_mask = Array(valid.shape());
        for (int64_t i = 0; i < mask.size(); ++i) f.object_mask[i] = mask[i] >= 0.5 ? 1.0 : 0.0;
        for (int64_t i = 0; i < valid.size(); ++i) f.validity_mask[i] = valid[i] >= 0.5 ? 1.0 : 0.0;
        e.at("world_to_camera").get_to(f.camera.world_to_camera);
        f.camera.fx = e.at("fx");
        f.camera.fy = e.at("fy");
        f.camera.cx = e.at("cx");
        f.camera.cy = e.at("cy");
        f.camera.width = e.at("width");
        f.camera.height = e.at("height");
        f.index = e.at("index");
        f.check();
        out.frames.push_back(std::move(f));
    }
    if (manifest.contains("gt")) {
        const auto& g = manifest["gt"];
        SequenceSpec spec;
        g.at("shape").get_to(spec.shape);
        spec.grid = g.at("grid");
        spec.surface_points = g.at("surface_points");
        spec.n_frames = g.at("n_frames");
        spec.width = g.at("width");
        spec.height = g.at("height");
        spec.focal_scale = g.at("focal_scale");
        spec.occlusion_q = g.at("occlusion_q");
        spec.seed = g.at("seed");
        spec.trajectory.radius = g.at("radius");
        spec.trajectory.elevation_deg = g.at("elevation_deg");
        spec.trajectory.azimuth_start_deg = g.at("azimuth_start_deg");
        spec.trajectory.azimuth_span_deg = g.at("azimuth_span_deg");
        out.spec = spec;
    }
    return out;
}

}  // namespace finv
