#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "finv/evalkit.hpp"
#include "finv/finv.hpp"
#include "finv/harness.hpp"
#include "finv/priorlab.hpp"

namespace finv {

// Exit codes shared by every subcommand.
constexpr int kExitOk = 0;
constexpr int kExitValidation = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumerical = 4;

/// Everything a run needs, serialized into each run directory so reloading
/// the snapshot reproduces the run bit-exactly.
struct RunConfig {
    ArchConfig arch;
    PipelineConfig pipe;
    FinvConfig finv;
    PretrainConfig pretrain;

    // benchmark/harness settings
    int benchmark_sequences = 20;
    int frames_per_sequence = 10;
    int image_size = 64;
    double focal_scale = 1.1;
    double occlusion_q = 0.3;
    double radius = 1.6;
    double elevation_deg = 25.0;
    double azimuth_start_deg = 0.0;
    double azimuth_span_deg = 160.0;
    std::string benchmark_palette = "novel";  // "novel" or "training"
    uint64_t training_shape_seed0 = 1000;     // pretraining shapes
    uint64_t heldout_shape_seed0 = 5000;      // benchmark shapes, disjoint range
    int surface_points = 2048;

    uint64_t seed = 1;
    int threads = 2;
};

inline void to_json(nlohmann::json& j, const RunConfig& c) {
    j = nlohmann::json{
        {"arch",
         {{"d_latent", c.arch.d_latent},
          {"hidden", c.arch.hidden},
          {"hidden_layers", c.arch.hidden_layers},
          {"fourier_bands", c.arch.fourier_bands}}},
        {"render",
         {{"grid", c.pipe.grid},
          {"samples_per_ray", c.pipe.render.samples_per_ray},
          {"density_scale", c.pipe.render.density_scale},
          {"background", c.pipe.render.background}}},
        {"objective",
         {{"lambda_mse", c.pipe.objective.lambda_mse},
          {"mask_weight", c.pipe.objective.mask_weight},
          {"perceptual", c.pipe.objective.perceptual},
          {"pyramid_levels", c.pipe.objective.pyramid_levels},
          {"blur_sigma", c.pipe.objective.blur_sigma}}},
        {"finv",
         {{"population_size", c.finv.population_size},
          {"gamma", c.finv.gamma},
          {"steps_t0", c.finv.steps_t0},
          {"steps_per_obs", c.finv.steps_per_obs},
          {"refine_steps", c.finv.refine_steps},
          {"geometry_step_cap", c.finv.geometry_step_cap},
          {"latent_lr", c.finv.latent_lr},
          {"param_lr", c.finv.param_lr},
          {"resample_sigma", c.finv.resample_sigma},
          {"refine_top_k", c.finv.refine_top_k},
          {"baseline_steps", c.finv.baseline_steps},
          {"baseline_lr", c.finv.baseline_lr}}},
        {"pretrain",
         {{"num_shapes", c.pretrain.num_shapes},
          {"steps", c.pretrain.steps},
          {"batch", c.pretrain.batch},
          {"point_subsample", c.pretrain.point_subsample},
          {"boundary_fraction", c.pretrain.boundary_fraction},
          {"beta", c.pretrain.beta},
          {"latent_lr", c.pretrain.latent_lr},
          {"param_lr", c.pretrain.param_lr},
          {"lr_decay_floor", c.pretrain.lr_decay_floor},
          {"grid", c.pretrain.grid},
          {"variance_floor", c.pretrain.variance_floor}}},
        {"benchmark",
         {{"sequences", c.benchmark_sequences},
          {"frames_per_sequence", c.frames_per_sequence},
          {"image_size", c.image_size},
          {"focal_scale", c.focal_scale},
          {"occlusion_q", c.occlusion_q},
          {"radius", c.radius},
          {"elevation_deg", c.elevation_deg},
          {"azimuth_start_deg", c.azimuth_start_deg},
          {"azimuth_span_deg", c.azimuth_span_deg},
          {"palette", c.benchmark_palette},
          {"training_shape_seed0", c.training_shape_seed0},
          {"heldout_shape_seed0", c.heldout_shape_seed0},
          {"surface_points", c.surface_points}}},
        {"seed", c.seed},
        {"threads", c.threads}};
}

inline void from_json(const nlohmann::json& j, RunConfig& c) {
    const auto& a = j.at("arch");
    a.at("d_latent").get_to(c.arch.d_latent);
    a.at("hidden").get_to(c.arch.hidden);
    a.at("hidden_layers").get_to(c.arch.hidden_layers);
    a.at("fourier_bands").get_to(c.arch.fourier_bands);
    const auto& r = j.at("render");
    r.at("grid").get_to(c.pipe.grid);
    r.at("samples_per_ray").get_to(c.pipe.render.samples_per_ray);
    r.at("density_scale").get_to(c.pipe.render.density_scale);
    r.at("background").get_to(c.pipe.render.background);
    const auto& o = j.at("objective");
    o.at("lambda_mse").get_to(c.pipe.objective.lambda_mse);
    o.at("mask_weight").get_to(c.pipe.objective.mask_weight);
    o.at("perceptual").get_to(c.pipe.objective.perceptual);
    o.at("pyramid_levels").get_to(c.pipe.objective.pyramid_levels);
    o.at("blur_sigma").get_to(c.pipe.objective.blur_sigma);
    const auto& f = j.at("finv");
    f.at("population_size").get_to(c.finv.population_size);
    f.at("gamma").get_to(c.finv.gamma);
    f.at("steps_t0").get_to(c.finv.steps_t0);
    f.at("steps_per_obs").get_to(c.finv.steps_per_obs);
    f.at("refine_steps").get_to(c.finv.refine_steps);
    f.at("geometry_step_cap").get_to(c.finv.geometry_step_cap);
    f.at("latent_lr").get_to(c.finv.latent_lr);
    f.at("param_lr").get_to(c.finv.param_lr);
    f.at("resample_sigma").get_to(c.finv.resample_sigma);
    f.at("refine_top_k").get_to(c.finv.refine_top_k);
    f.at("baseline_steps").get_to(c.finv.baseline_steps);
    f.at("baseline_lr").get_to(c.finv.baseline_lr);
    const auto& p = j.at("pretrain");
    p.at("num_shapes").get_to(c.pretrain.num_shapes);
    p.at("steps").get_to(c.pretrain.steps);
    p.at("batch").get_to(c.pretrain.batch);
    p.at("point_subsample").get_to(c.pretrain.point_subsample);
    p.at("boundary_fraction").get_to(c.pretrain.boundary_fraction);
    p.at("beta").get_to(c.pretrain.beta);
    p.at("latent_lr").get_to(c.pretrain.latent_lr);
    p.at("param_lr").get_to(c.pretrain.param_lr);
    p.at("lr_decay_floor").get_to(c.pretrain.lr_decay_floor);
    p.at("grid").get_to(c.pretrain.grid);
    p.at("variance_floor").get_to(c.pretrain.variance_floor);
    const auto& b = j.at("benchmark");
    b.at("sequences").get_to(c.benchmark_sequences);
    b.at("frames_per_sequence").get_to(c.frames_per_sequence);
    b.at("image_size").get_to(c.image_size);
    b.at("focal_scale").get_to(c.focal_scale);
    b.at("occlusion_q").get_to(c.occlusion_q);
    b.at("radius").get_to(c.radius);
    b.at("elevation_deg").get_to(c.elevation_deg);
    b.at("azimuth_start_deg").get_to(c.azimuth_start_deg);
    b.at("azimuth_span_deg").get_to(c.azimuth_span_deg);
    b.at("palette").get_to(c.benchmark_palette);
    b.at("training_shape_seed0").get_to(c.training_shape_seed0);
    b.at("heldout_shape_seed0").get_to(c.heldout_shape_seed0);
    b.at("surface_points").get_to(c.surface_points);
    j.at("seed").get_to(c.seed);
    j.at("threads").get_to(c.threads);
}

/// Loads a config file (when given), then applies dotted --set overrides
/// like "finv.population_size=16".
inline RunConfig load_run_config(const std::string& config_path, const std::vector<std::string>& overrides) {
    nlohmann::json j;
    {
        RunConfig defaults;
        j = defaults;
    }
    if (!config_path.empty()) {
        std::ifstream is(config_path);
        if (!is) throw std::runtime_error("config: cannot open " + config_path);
        nlohmann::json file_json;
        try {
            file_json = nlohmann::json::parse(is);
        } catch (const nlohmann::json::exception& e) {
            throw std::invalid_argument("config: malformed JSON in " + config_path + ": " + e.what());
        }
        j.merge_patch(file_json);
    }
    for (const auto& kv : overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
        std::string key = "/" + kv.substr(0, eq);
        for (auto& ch : key)
            if (ch == '.') ch = '/';
        nlohmann::json value;
        try {
            value = nlohmann::json::parse(kv.substr(eq + 1));
        } catch (const nlohmann::json::exception&) {
            value = kv.substr(eq + 1);  // bare strings
        }
        j[nlohmann::json::json_pointer(key)] = value;
    }
    RunConfig out;
    try {
        from_json(j, out);
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument(std::string("config: ") + e.what());
    }
    return out;
}

namespace detail {

inline void write_text(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path);
    os << text;
}

inline void ensure_fresh_dir(const std::string& dir, bool force) {
    namespace fs = std::filesystem;
    if (fs::exists(dir)) {
        if (!force)
            throw std::invalid_argument("output directory exists: " + dir + " (use --force to overwrite)");
        fs::remove_all(dir);
    }
    fs::create_directories(dir);
}

inline void write_config_snapshot(const RunConfig& cfg, const std::string& dir) {
    nlohmann::json j = cfg;
    write_text(dir + "/config.json", j.dump(1) + "\n");
}

inline SequenceSpec benchmark_sequence_spec(const RunConfig& cfg, int index) {
    const auto& palette = cfg.benchmark_palette == "training" ? training_palette() : novel_palette();
    SequenceSpec spec;
    spec.shape = random_shape_spec(cfg.heldout_shape_seed0 + static_cast<uint64_t>(index), palette);
    spec.n_frames = cfg.frames_per_sequence;
    spec.width = spec.height = cfg.image_size;
    spec.focal_scale = cfg.focal_scale;
    spec.occlusion_q = cfg.occlusion_q;
    spec.seed = mix_seed(cfg.heldout_shape_seed0, static_cast<uint64_t>(index));
    spec.grid = cfg.pipe.grid;
    spec.surface_points = cfg.surface_points;
    spec.trajectory.radius = cfg.radius;
    spec.trajectory.elevation_deg = cfg.elevation_deg;
    spec.trajectory.azimuth_start_deg = cfg.azimuth_start_deg;
    spec.trajectory.azimuth_span_deg = cfg.azimuth_span_deg;
    return spec;
}

inline std::string seq_dir_name(int index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "seq_%03d", index);
    return buf;
}

/// Cameras of every frame in a stored sequence, reading only the manifest.
inline std::vector<Camera> load_sequence_cameras(const std::string& dir) {
    std::ifstream is(dir + "/manifest");
    if (!is) throw std::runtime_error("load_sequence_cameras: missing manifest in " + dir);
    nlohmann::json manifest = nlohmann::json::parse(is);
    std::vector<Camera> cams;
    for (const auto& e : manifest.at("frames")) {
        Camera cam;
        e.at("world_to_camera").get_to(cam.world_to_camera);
        cam.fx = e.at("fx");
        cam.fy = e.at("fy");
        cam.cx = e.at("cx");
        cam.cy = e.at("cy");
        cam.width = e.at("width");
        cam.height = e.at("height");
        cams.push_back(cam);
    }
    return cams;
}

inline SequenceData sequence_from_loaded(LoadedSequence&& loaded) {
    if (!loaded.spec) throw std::runtime_error("sequence has no embedded ground truth");
    SequenceData seq;
    seq.spec = *loaded.spec;
    seq.frames = std::move(loaded.frames);
    seq.gt = generate_shape(seq.spec.shape, seq.spec.grid, seq.spec.surface_points);
    return seq;
}

inline std::string steps_csv(const std::vector<StepRecord>& log) {
    std::ostringstream os;
    os.precision(17);
    os << "t,step,particle_id,objective,perceptual,mask\n";
    for (const auto& r : log)
        os << r.t << "," << r.step << "," << r.particle_id << "," << r.objective << "," << r.perceptual
           << "," << r.mask << "\n";
    return os.str();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Subcommands. Each returns a process exit code.

/// `synth`: writes the benchmark sequences under out/seq_###/.
inline int cmd_synth(const RunConfig& cfg, const std::string& out_dir, bool force) {
    if (cfg.frames_per_sequence < 6) {
        std::cerr << "synth: frames_per_sequence must be >= 6 for the evaluation protocol\n";
        return kExitValidation;
    }
    detail::ensure_fresh_dir(out_dir, force);
    detail::write_config_snapshot(cfg, out_dir);
    for (int i = 0; i < cfg.benchmark_sequences; ++i) {
        SequenceSpec spec = detail::benchmark_sequence_spec(cfg, i);
        SequenceData seq = make_sequence(spec, cfg.pipe.render);
        save_sequence(seq.frames, out_dir + "/" + detail::seq_dir_name(i), &spec);
    }
    std::cout << "synth: wrote " << cfg.benchmark_sequences << " sequences to " << out_dir << "\n";
    return kExitOk;
}

/// `pretrain`: trains the prior bundle and reports the final training IoU.
inline int cmd_pretrain(const RunConfig& cfg, const std::string& out_dir, bool force) {
    detail::ensure_fresh_dir(out_dir, force);
    detail::write_config_snapshot(cfg, out_dir);
    std::vector<ShapeSpec> dataset;
    for (int i = 0; i < cfg.pretrain.num_shapes; ++i)
        dataset.push_back(
            random_shape_spec(cfg.training_shape_seed0 + static_cast<uint64_t>(i), training_palette()));
    PretrainConfig pt = cfg.pretrain;
    pt.grid = cfg.pipe.grid;
    PriorBundle bundle = pretrain_prior(dataset, cfg.arch, pt, cfg.seed);
    save_prior_bundle(bundle, out_dir);
    const double iou = mean_training_iou(bundle, dataset);
    std::cout << "pretrain: mean training IoU " << iou << ", bundle in " << out_dir << "\n";
    return kExitOk;
}

/// `reconstruct`: runs the two-phase pipeline on the first k frames of a
/// stored sequence; writes the result bundle, novel-view PNGs for the eval
/// cameras, and the exported mesh.
inline int cmd_reconstruct(const RunConfig& cfg, const std::string& sequence_dir,
                           const std::string& prior_dir, int k, const std::string& out_dir, bool force) {
    if (k < 1) {
        std::cerr << "reconstruct: k must be >= 1\n";
        return kExitValidation;
    }
    PriorBundle prior = load_prior_bundle(prior_dir);
    LoadedSequence loaded = load_sequence(sequence_dir, k);  // reads exactly k frames
    if (static_cast<int>(loaded.frames.size()) < k) {
        std::cerr << "reconstruct: sequence has only " << loaded.frames.size() << " frames\n";
        return kExitValidation;
    }
    detail::ensure_fresh_dir(out_dir, force);
    detail::write_config_snapshot(cfg, out_dir);

    ReconstructionResult result =
        reconstruct(loaded.frames, prior.params, prior.sampler, cfg.finv, cfg.pipe, cfg.seed);

    save_params(result.params, out_dir + "/params.finvprior");
    nlohmann::json latent{{"w_geo", result.w.w_geo.vec()}, {"w_tex", result.w.w_tex.vec()}};
    detail::write_text(out_dir + "/latent.json", latent.dump(1) + "\n");
    detail::write_text(out_dir + "/steps.csv", detail::steps_csv(result.log));
    nlohmann::json meta{{"sequence", sequence_dir},
                        {"prior", prior_dir},
                        {"k", k},
                        {"seed", cfg.seed},
                        {"chosen_particle", result.chosen_particle},
                        {"final_loss", result.final_loss}};
    nlohmann::json cands = nlohmann::json::array();
    for (const auto& c : result.candidates)
        cands.push_back({{"particle_id", c.particle_id}, {"final_loss", c.final_loss}});
    meta["candidates"] = std::move(cands);
    detail::write_text(out_dir + "/result.json", meta.dump(1) + "\n");

    // novel-view renders for the eval cameras (frame index >= 5)
    VoxelFields fields = decode(result.w, result.params, cfg.pipe.grid);
    std::filesystem::create_directories(out_dir + "/views");
    const auto cameras = detail::load_sequence_cameras(sequence_dir);
    for (size_t t = 5; t < cameras.size(); ++t) {
        RenderOutput view = render(fields, cameras[t], cfg.pipe.render);
        char name[32];
        std::snprintf(name, sizeof(name), "/views/view_%04zu.png", t);
        save_png(view.rgb, out_dir + name);
    }
    Mesh mesh = extract_mesh(fields);
    save_obj(mesh, out_dir + "/mesh.obj");
    std::cout << "reconstruct: final objective " << result.final_loss << ", run in " << out_dir << "\n";
    return kExitOk;
}

/// `evaluate`: scores stored reconstruction runs against their sequences.
inline int cmd_evaluate(const std::vector<std::string>& run_dirs, const std::string& out_dir, bool force) {
    if (run_dirs.empty()) {
        std::cerr << "evaluate: no run directories given\n";
        return kExitValidation;
    }
    detail::ensure_fresh_dir(out_dir, force);
    std::ostringstream csv;
    csv.precision(17);
    csv << "run,k,frame,rotation_delta_deg,psnr,ssim,perceptual,chamfer_l2,f1_at_tau\n";
    std::ostringstream summary;
    summary.precision(17);
    summary << "run,k,mean_psnr,mean_ssim,mean_perceptual,chamfer_l2,f1_at_tau\n";
    for (const auto& run_dir : run_dirs) {
        std::ifstream meta_in(run_dir + "/result.json");
        if (!meta_in) throw std::runtime_error("evaluate: missing result.json in " + run_dir);
        nlohmann::json meta = nlohmann::json::parse(meta_in);
        std::ifstream cfg_in(run_dir + "/config.json");
        if (!cfg_in) throw std::runtime_error("evaluate: missing config.json in " + run_dir);
        RunConfig cfg;
        from_json(nlohmann::json::parse(cfg_in), cfg);

        SequenceData seq = detail::sequence_from_loaded(load_sequence(meta.at("sequence")));
        GeneratorParams params = load_params(run_dir + "/params.finvprior");
        nlohmann::json latent = nlohmann::json::parse(std::ifstream(run_dir + "/latent.json"));
        LatentPair w;
        std::vector<double> wg = latent.at("w_geo").get<std::vector<double>>();
        std::vector<double> wt = latent.at("w_tex").get<std::vector<double>>();
        w.w_geo = Array({static_cast<int>(wg.size())}, wg);
        w.w_tex = Array({static_cast<int>(wt.size())}, wt);

        ReconstructedObject obj;
        obj.fields = decode(w, params, cfg.pipe.grid);
        auto fields = std::make_shared<VoxelFields>(obj.fields);
        RenderConfig rc = cfg.pipe.render;
        obj.render_view = [fields, rc](const Camera& cam) { return render(*fields, cam, rc); };

        const int k = meta.at("k");
        EvalReport report = score_reconstruction(seq, k, obj, cfg.pipe);
        const std::string run_name = std::filesystem::path(run_dir).filename().string();
        for (const auto& r : report.records)
            csv << run_name << "," << k << "," << r.frame_index << "," << r.rotation_delta_deg << ","
                << r.psnr << "," << r.ssim << "," << r.perceptual << "," << report.chamfer << ","
                << report.f1_at_tau << "\n";
        summary << run_name << "," << k << "," << report.mean_psnr << "," << report.mean_ssim << ","
                << report.mean_perceptual << "," << report.chamfer << "," << report.f1_at_tau << "\n";
    }
    detail::write_text(out_dir + "/views.csv", csv.str());
    detail::write_text(out_dir + "/summary.csv", summary.str());
    std::cout << "evaluate: reports in " << out_dir << "\n";
    return kExitOk;
}

/// `ablate`: the full comparison table over a stored benchmark.
inline int cmd_ablate(const RunConfig& cfg, const std::string& dataset_dir, const std::string& prior_dir,
                      const std::string& out_dir, bool force) {
    PriorBundle prior = load_prior_bundle(prior_dir);
    std::vector<SequenceData> sequences;
    for (int i = 0;; ++i) {
        const std::string dir = dataset_dir + "/" + detail::seq_dir_name(i);
        if (!std::filesystem::exists(dir + "/manifest")) break;
        sequences.push_back(detail::sequence_from_loaded(load_sequence(dir)));
    }
    if (sequences.empty()) {
        std::cerr << "ablate: no sequences under " << dataset_dir << "\n";
        return kExitValidation;
    }
    detail::ensure_fresh_dir(out_dir, force);
    detail::write_config_snapshot(cfg, out_dir);
    const std::vector<Variant> variants{Variant::kInversionOnly, Variant::kNoRefine, Variant::kFull,
                                        Variant::kBaseline};
    const std::vector<int> ks{1, 3, 5};
    AblationResult result =
        run_ablation(sequences, variants, ks, prior, cfg.finv, cfg.pipe, cfg.seed, cfg.threads);
    detail::write_text(out_dir + "/ablation.csv", ablation_csv(result));
    detail::write_text(out_dir + "/summary.csv", ablation_summary_csv(result, variants, ks));
    std::cout << "ablate: " << result.records.size() << " cells, reports in " << out_dir << "\n";
    return kExitOk;
}

/// `export-mesh`: re-exports the mesh of a stored run.
inline int cmd_export_mesh(const std::string& run_dir, const std::string& out_path) {
    std::ifstream cfg_in(run_dir + "/config.json");
    if (!cfg_in) throw std::runtime_error("export-mesh: missing config.json in " + run_dir);
    RunConfig cfg;
    from_json(nlohmann::json::parse(cfg_in), cfg);
    GeneratorParams params = load_params(run_dir + "/params.finvprior");
    nlohmann::json latent = nlohmann::json::parse(std::ifstream(run_dir + "/latent.json"));
    LatentPair w;
    std::vector<double> wg = latent.at("w_geo").get<std::vector<double>>();
    std::vector<double> wt = latent.at("w_tex").get<std::vector<double>>();
    w.w_geo = Array({static_cast<int>(wg.size())}, wg);
    w.w_tex = Array({static_cast<int>(wt.size())}, wt);
    Mesh mesh = extract_mesh(decode(w, params, cfg.pipe.grid));
    save_obj(mesh, out_path);
    std::cout << "export-mesh: " << mesh.triangles.size() << " triangles to " << out_path << "\n";
    return kExitOk;
}

/// Maps exceptions to the documented exit codes.
template <typename Fn>
int run_command(Fn&& fn) {
    try {
        return fn();
    } catch (const NonFiniteError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const std::invalid_argument& e) {
        std::cerr << "invalid input: " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    }
}

}  // namespace finv
