#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "finv/cli.hpp"

using namespace finv;
namespace fs = std::filesystem;

namespace {

// small configuration so the end-to-end commands stay fast
RunConfig tiny_config() {
    RunConfig cfg;
    cfg.arch.d_latent = 8;
    cfg.arch.hidden = 16;
    cfg.arch.hidden_layers = 2;
    cfg.arch.fourier_bands = 3;
    cfg.pipe.grid = 16;
    cfg.pipe.render.samples_per_ray = 24;
    cfg.finv.population_size = 3;
    cfg.finv.steps_t0 = 8;
    cfg.finv.steps_per_obs = 4;
    cfg.finv.refine_steps = 6;
    cfg.finv.geometry_step_cap = 2;
    cfg.finv.refine_top_k = 2;
    cfg.finv.baseline_steps = 12;
    cfg.pretrain.num_shapes = 16;
    cfg.pretrain.steps = 60;
    cfg.pretrain.point_subsample = 384;
    cfg.benchmark_sequences = 2;
    cfg.frames_per_sequence = 7;
    cfg.image_size = 32;
    cfg.surface_points = 256;
    cfg.seed = 12;
    cfg.threads = 2;
    return cfg;
}

struct TempTree {
    fs::path root;
    explicit TempTree(const char* name) : root(fs::temp_directory_path() / name) {
        fs::remove_all(root);
        fs::create_directories(root);
    }
    ~TempTree() { fs::remove_all(root); }
    std::string operator/(const char* sub) const { return (root / sub).string(); }
};

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(is), {});
}

}  // namespace

TEST(Config, RoundTripAndOverrides) {
    RunConfig cfg = tiny_config();
    nlohmann::json j = cfg;
    RunConfig back;
    from_json(j, back);
    nlohmann::json j2 = back;
    EXPECT_EQ(j.dump(), j2.dump());

    TempTree tmp("finv_cli_cfg");
    const std::string path = tmp / "config.json";
    std::ofstream(path) << j.dump();
    RunConfig loaded = load_run_config(path, {"finv.population_size=9", "objective.lambda_mse=0.25",
                                              "benchmark.palette=training"});
    EXPECT_EQ(loaded.finv.population_size, 9);
    EXPECT_EQ(loaded.pipe.objective.lambda_mse, 0.25);
    EXPECT_EQ(loaded.benchmark_palette, "training");
    EXPECT_EQ(loaded.arch.hidden, cfg.arch.hidden);
    EXPECT_THROW(load_run_config(path, {"no-equals-sign"}), std::invalid_argument);
    EXPECT_THROW(load_run_config(tmp / "missing.json", {}), std::runtime_error);
}

TEST(Cli, SynthValidatesAndIsIdempotent) {
    TempTree tmp("finv_cli_synth");
    RunConfig cfg = tiny_config();

    RunConfig bad = cfg;
    bad.frames_per_sequence = 4;
    EXPECT_EQ(cmd_synth(bad, tmp / "bad", true), kExitValidation);

    ASSERT_EQ(cmd_synth(cfg, tmp / "data", false), kExitOk);
    for (int i = 0; i < cfg.benchmark_sequences; ++i)
        EXPECT_TRUE(fs::exists(fs::path(tmp / "data") / detail::seq_dir_name(i) / "manifest"));
    // refuses to overwrite without --force
    EXPECT_EQ(run_command([&] { return cmd_synth(cfg, tmp / "data", false); }), kExitValidation);

    ASSERT_EQ(cmd_synth(cfg, tmp / "data2", false), kExitOk);
    EXPECT_EQ(slurp(std::string(tmp / "data") + "/seq_000/manifest"),
              slurp(std::string(tmp / "data2") + "/seq_000/manifest"));
    EXPECT_EQ(slurp(std::string(tmp / "data") + "/seq_001/rgb_0003.png"),
              slurp(std::string(tmp / "data2") + "/seq_001/rgb_0003.png"));
}

TEST(Cli, EndToEndPipeline) {
    TempTree tmp("finv_cli_e2e");
    RunConfig cfg = tiny_config();
    ASSERT_EQ(cmd_synth(cfg, tmp / "data", false), kExitOk);
    ASSERT_EQ(cmd_pretrain(cfg, tmp / "prior", false), kExitOk);

    const std::string seq0 = std::string(tmp / "data") + "/seq_000";
    ASSERT_EQ(cmd_reconstruct(cfg, seq0, tmp / "prior", 1, tmp / "run1", false), kExitOk);
    for (const char* f : {"config.json", "result.json", "latent.json", "steps.csv", "params.finvprior",
                          "mesh.obj"})
        EXPECT_TRUE(fs::exists(fs::path(tmp / "run1") / f)) << f;
    // novel views for eval cameras (frames 5..6 of a 7-frame sequence)
    EXPECT_TRUE(fs::exists(fs::path(tmp / "run1") / "views/view_0005.png"));
    EXPECT_TRUE(fs::exists(fs::path(tmp / "run1") / "views/view_0006.png"));

    // the steps CSV has the documented column header and the step budget
    const std::string steps = slurp(std::string(tmp / "run1") + "/steps.csv");
    EXPECT_EQ(steps.substr(0, steps.find('\n')), "t,step,particle_id,objective,perceptual,mask");
    const auto rows = std::count(steps.begin(), steps.end(), '\n') - 1;
    EXPECT_EQ(rows, cfg.finv.population_size * cfg.finv.steps_t0);

    // config snapshot equals the input config
    nlohmann::json snap = nlohmann::json::parse(slurp(std::string(tmp / "run1") + "/config.json"));
    nlohmann::json orig = cfg;
    EXPECT_EQ(snap.dump(), orig.dump());

    ASSERT_EQ(cmd_evaluate({tmp / "run1"}, tmp / "eval", false), kExitOk);
    const std::string summary = slurp(std::string(tmp / "eval") + "/summary.csv");
    EXPECT_NE(summary.find("run1,1,"), std::string::npos);
    const std::string views = slurp(std::string(tmp / "eval") + "/views.csv");
    EXPECT_EQ(std::count(views.begin(), views.end(), '\n'), 1 + 2);  // header + 2 eval frames

    ASSERT_EQ(cmd_export_mesh(tmp / "run1", tmp / "exported.obj"), kExitOk);
    EXPECT_EQ(slurp(tmp / "exported.obj"), slurp(std::string(tmp / "run1") + "/mesh.obj"));
}

TEST(Cli, ReconstructReadsOnlyKFrames) {
    TempTree tmp("finv_cli_prefix");
    RunConfig cfg = tiny_config();
    ASSERT_EQ(cmd_synth(cfg, tmp / "data", false), kExitOk);
    ASSERT_EQ(cmd_pretrain(cfg, tmp / "prior", false), kExitOk);
    const std::string seq0 = std::string(tmp / "data") + "/seq_000";
    // remove the image files of frames 1..4; the manifest (poses) stays
    for (int t = 1; t < 5; ++t) {
        fs::remove(fs::path(seq0) / detail::frame_file("rgb", t));
        fs::remove(fs::path(seq0) / detail::frame_file("mask", t));
        fs::remove(fs::path(seq0) / detail::frame_file("valid", t));
    }
    // k=1 touches only frame 0 (plus eval-camera poses from the manifest)
    EXPECT_EQ(cmd_reconstruct(cfg, seq0, tmp / "prior", 1, tmp / "run", false), kExitOk);
    // k=3 would need the deleted frames
    EXPECT_EQ(run_command([&] { return cmd_reconstruct(cfg, seq0, tmp / "prior", 3, tmp / "run3", false); }),
              kExitIo);
}

TEST(Cli, ReconstructIsByteDeterministicAcrossThreadCounts) {
    TempTree tmp("finv_cli_det");
    RunConfig cfg = tiny_config();
    ASSERT_EQ(cmd_synth(cfg, tmp / "data", false), kExitOk);
    ASSERT_EQ(cmd_pretrain(cfg, tmp / "prior", false), kExitOk);
    const std::string seq0 = std::string(tmp / "data") + "/seq_000";
    RunConfig one = cfg;
    one.finv.threads = 1;
    RunConfig two = cfg;
    two.finv.threads = 2;
    ASSERT_EQ(cmd_reconstruct(one, seq0, tmp / "prior", 3, tmp / "runA", false), kExitOk);
    ASSERT_EQ(cmd_reconstruct(two, seq0, tmp / "prior", 3, tmp / "runB", false), kExitOk);
    for (const char* f : {"steps.csv", "latent.json", "params.finvprior", "result.json", "mesh.obj"})
        EXPECT_EQ(slurp(std::string(tmp / "runA") + "/" + f), slurp(std::string(tmp / "runB") + "/" + f))
            << f;
    EXPECT_EQ(slurp(std::string(tmp / "runA") + "/views/view_0005.png"),
              slurp(std::string(tmp / "runB") + "/views/view_0005.png"));
}

TEST(Cli, MissingInputsGiveIoExit) {
    TempTree tmp("finv_cli_missing");
    RunConfig cfg = tiny_config();
    const int code = run_command(
        [&] { return cmd_reconstruct(cfg, tmp / "nowhere", tmp / "noprior", 1, tmp / "out", false); });
    EXPECT_EQ(code, kExitIo);
}

TEST(Cli, AblateSmoke) {
    TempTree tmp("finv_cli_ablate");
    RunConfig cfg = tiny_config();
    cfg.benchmark_sequences = 1;
    ASSERT_EQ(cmd_synth(cfg, tmp / "data", false), kExitOk);
    ASSERT_EQ(cmd_pretrain(cfg, tmp / "prior", false), kExitOk);
    ASSERT_EQ(cmd_ablate(cfg, tmp / "data", tmp / "prior", tmp / "ab", false), kExitOk);
    const std::string summary = slurp(std::string(tmp / "ab") + "/summary.csv");
    for (const char* name : {"inversion_only", "filter_no_refine", "full", "baseline_direct_fit"})
        EXPECT_NE(summary.find(name), std::string::npos) << name;
    const std::string csv = slurp(std::string(tmp / "ab") + "/ablation.csv");
    // 1 sequence x 4 variants x 3 ks x 2 eval frames + header
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 4 * 3 * 2);
}
