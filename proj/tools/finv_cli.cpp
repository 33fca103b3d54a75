// Command-line front end: dataset synthesis, prior pretraining,
// reconstruction, evaluation, ablation, and mesh export.

#include <CLI11.hpp>

#include "finv/cli.hpp"

using namespace finv;

int main(int argc, char** argv) {
    CLI::App app{"finv: partial-view object reconstruction by filtering inversion"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    std::string out_dir = "out";
    bool force = false;
    uint64_t seed_flag = 0;
    bool seed_set = false;
    int threads_flag = 0;

    app.add_option("--config", config_path, "JSON config file (defaults used when omitted)");
    app.add_option("--set", overrides, "override a config entry, e.g. --set finv.population_size=16")
        ->take_all();
    app.add_option("--out", out_dir, "output directory");
    app.add_flag("--force", force, "overwrite an existing output directory");
    app.add_option("--seed", seed_flag, "master seed")->each([&](const std::string&) { seed_set = true; });
    app.add_option("--threads", threads_flag, "worker thread cap (does not change results)");

    auto* synth = app.add_subcommand("synth", "generate benchmark sequences");
    auto* pretrain = app.add_subcommand("pretrain", "train the prior bundle");

    std::string sequence_dir, prior_dir;
    int k = 1;
    auto* rec = app.add_subcommand("reconstruct", "run the two-phase reconstruction");
    rec->add_option("--sequence", sequence_dir, "sequence directory")->required();
    rec->add_option("--prior", prior_dir, "prior bundle directory")->required();
    rec->add_option("--k", k, "number of input frames");

    std::vector<std::string> run_dirs;
    auto* eval = app.add_subcommand("evaluate", "score stored reconstruction runs");
    eval->add_option("--run", run_dirs, "run directory (repeatable)")->required()->take_all();

    std::string dataset_dir;
    auto* ablate = app.add_subcommand("ablate", "run the variant comparison over a benchmark");
    ablate->add_option("--dataset", dataset_dir, "benchmark dataset directory")->required();
    ablate->add_option("--prior", prior_dir, "prior bundle directory")->required();

    std::string mesh_run_dir, mesh_out = "mesh.obj";
    auto* exp = app.add_subcommand("export-mesh", "export a stored run's mesh as OBJ");
    exp->add_option("--run", mesh_run_dir, "run directory")->required();
    exp->add_option("--output", mesh_out, "output OBJ path");

    CLI11_PARSE(app, argc, argv);

    return run_command([&]() -> int {
        RunConfig cfg = load_run_config(config_path, overrides);
        if (seed_set) cfg.seed = seed_flag;
        if (threads_flag > 0) cfg.threads = threads_flag;
        cfg.finv.threads = cfg.threads;

        if (synth->parsed()) return cmd_synth(cfg, out_dir, force);
        if (pretrain->parsed()) return cmd_pretrain(cfg, out_dir, force);
        if (rec->parsed()) return cmd_reconstruct(cfg, sequence_dir, prior_dir, k, out_dir, force);
        if (eval->parsed()) return cmd_evaluate(run_dirs, out_dir, force);
        if (ablate->parsed()) return cmd_ablate(cfg, dataset_dir, prior_dir, out_dir, force);
        if (exp->parsed()) return cmd_export_mesh(mesh_run_dir, mesh_out);
        return kExitValidation;
    });
}
