#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <stdexcept>
#include <tuple>
#include <vector>

#include "finv/adam.hpp"
#include "finv/objectives.hpp"
#include "finv/threads.hpp"

namespace finv {

constexpr double kInf = std::numeric_limits<double>::infinity();

/// One latent-code hypothesis in the filtering population.
struct Particle {
    int id = 0;
    LatentPair w;
    double cumulative_loss = kInf;  // full inversion objective over seen frames
    double perceptual = kInf;       // perceptual term only; the filter criterion
    std::optional<int> lineage;     // parent id for resampled clones
    uint64_t rng_seed = 0;
    bool dead = false;  // produced a non-finite loss; ranks worst
};

struct FinvConfig {
    int population_size = 8;
    double gamma = 0.30;
    int steps_t0 = 150;
    int steps_per_obs = 100;
    int refine_steps = 500;
    int geometry_step_cap = 100;  // early stopping on the geometry objective
    double latent_lr = 1e-2;
    double param_lr = 1e-3;
    double resample_sigma = 0.1;
    int refine_top_k = 3;
    int baseline_steps = 300;
    double baseline_lr = 0.05;
    int threads = 2;

    int survivor_count() const {
        return std::max(1, static_cast<int>(std::ceil(gamma * population_size)));
    }
    void check() const {
        if (population_size < 1) throw std::invalid_argument("config: population_size must be >= 1");
        if (gamma <= 0.0 || gamma > 1.0) throw std::invalid_argument("config: gamma must be in (0, 1]");
        if (refine_top_k < 1) throw std::invalid_argument("config: refine_top_k must be >= 1");
        if (latent_lr <= 0.0 || param_lr <= 0.0) throw std::invalid_argument("config: learning rates must be > 0");
        if (resample_sigma < 0.0) throw std::invalid_argument("config: resample_sigma must be >= 0");
    }
};

/// One row of the per-step diagnostics log.
struct StepRecord {
    int t = 0;
    int step = 0;
    int particle_id = 0;
    double objective = 0.0;
    double perceptual = 0.0;
    double mask = 0.0;
};

struct FinvState {
    FinvConfig config;
    PipelineConfig pipe;
    GeneratorParams prior;  // frozen throughout Phase I
    std::vector<Particle> particles;
    std::vector<ObservationFrame> frames;
    std::vector<RenderPlan> plans;
    int t = -1;
    uint64_t master_seed = 0;
    int next_id = 0;
    uint64_t seed_counter = 0;
    std::vector<StepRecord> log;
    std::shared_ptr<Phase1Graph> graph;  // for the current frame set
};

namespace detail {

inline void perturb_latents(LatentPair& w, double sigma, Rng& rng) {
    for (int64_t i = 0; i < w.w_geo.size(); ++i) w.w_geo[i] += sigma * rng.normal();
    for (int64_t i = 0; i < w.w_tex.size(); ++i) w.w_tex[i] += sigma * rng.normal();
}

inline bool latents_finite(const LatentPair& w) { return w.w_geo.all_finite() && w.w_tex.all_finite(); }

/// Forward the shared Phase-I graph for one particle; returns false (and
/// marks it dead) on a non-finite evaluation.
inline bool eval_particle(const Phase1Graph& g, Workspace& ws, Particle& p) {
    if (p.dead || !latents_finite(p.w)) {
        p.dead = true;
        p.cumulative_loss = kInf;
        p.perceptual = kInf;
        return false;
    }
    std::map<int, Array> leaves;
    feed_latents(leaves, g.decode, p.w);
    try {
        g.g.forward(ws, leaves);
    } catch (const NonFiniteError&) {
        p.dead = true;
        p.cumulative_loss = kInf;
        p.perceptual = kInf;
        return false;
    }
    p.cumulative_loss = ws.value(g.total).value();
    p.perceptual = ws.value(g.perceptual_sum).value();
    return true;
}

}  // namespace detail

/// Samples the initial population from the prior; particle draws are derived
/// deterministically from the master seed.
inline FinvState init_population(const FinvConfig& config, const PipelineConfig& pipe,
                                 const GeneratorParams& prior, const PriorSampler& sampler, uint64_t seed) {
    config.check();
    FinvState state;
    state.config = config;
    state.pipe = pipe;
    state.prior = prior;
    state.master_seed = seed;
    for (int i = 0; i < config.population_size; ++i) {
        Particle p;
        p.id = i;
        p.w = sample_latent(sampler, mix_seed(seed, 0x696e6974 + static_cast<uint64_t>(i)));
        p.rng_seed = mix_seed(seed, 0x70657274 + static_cast<uint64_t>(i));
        p.cumulative_loss = kInf;
        p.perceptual = kInf;
        state.particles.push_back(std::move(p));
    }
    state.next_id = config.population_size;
    return state;
}

/// Recomputes every particle's objective and perceptual sum on the frames
/// seen so far (forward passes only).
inline void evaluate_population(FinvState& state) {
    if (!state.graph) throw std::logic_error("evaluate_population: no frames seen");
    std::vector<Workspace> ws(std::max(1, state.config.threads));
    parallel_for(static_cast<int64_t>(state.particles.size()), state.config.threads,
                 [&](int64_t i, int worker) { detail::eval_particle(*state.graph, ws[worker], state.particles[i]); });
}

/// Runs `steps` adaptive-moment updates of every particle's latent pair on
/// the inversion objective over all frames seen; generator parameters stay
/// untouched. Losses are recorded from a final forward pass, so steps = 0
/// only refreshes them.
inline void optimize_particles(FinvState& state, int steps) {
    if (!state.graph) throw std::invalid_argument("optimize_particles: no frames seen");
    const Phase1Graph& graph = *state.graph;
    const int d = state.prior.arch.d_latent;
    const int n = static_cast<int>(state.particles.size());
    std::vector<Workspace> ws(std::max(1, state.config.threads));
    std::vector<std::vector<StepRecord>> logs(n);

    parallel_for(n, state.config.threads, [&](int64_t i, int worker) {
        Particle& p = state.particles[i];
        if (p.dead) return;
        Adam adam(2 * d, state.config.latent_lr);
        Workspace& w = ws[worker];
        for (int step = 0; step < steps; ++step) {
            if (!detail::eval_particle(graph, w, p)) return;
            logs[i].push_back({state.t, step, p.id, p.cumulative_loss, p.perceptual,
                               w.value(graph.mask_sum).value()});
            auto grads = graph.g.backward(w, graph.total);
            const Array& gg = grads.at(graph.decode.w_geo);
            const Array& gt = grads.at(graph.decode.w_tex);
            Array flat_g({2 * d});
            std::copy(gg.data(), gg.data() + d, flat_g.data());
            std::copy(gt.data(), gt.data() + d, flat_g.data() + d);
            Array flat_w({2 * d});
            std::copy(p.w.w_geo.data(), p.w.w_geo.data() + d, flat_w.data());
            std::copy(p.w.w_tex.data(), p.w.w_tex.data() + d, flat_w.data() + d);
            adam.step(flat_w, flat_g);
            std::copy(flat_w.data(), flat_w.data() + d, p.w.w_geo.data());
            std::copy(flat_w.data() + d, flat_w.data() + 2 * d, p.w.w_tex.data());
            if (!detail::latents_finite(p.w)) {
                p.dead = true;
                p.cumulative_loss = kInf;
                p.perceptual = kInf;
                return;
            }
        }
        detail::eval_particle(graph, w, p);  // record the final objective
    });
    for (auto& rows : logs)
        for (auto& r : rows) state.log.push_back(r);
}

/// Keeps the k = max(1, ceil(gamma*N)) particles with the smallest summed
/// perceptual loss (the ranking criterion); ties break toward the smaller
/// particle id. With frames seen, losses are recomputed first so the newest
/// observation participates in the ranking.
inline void rank_and_filter(FinvState& state) {
    if (!state.frames.empty()) evaluate_population(state);
    const int k = state.config.survivor_count();
    std::vector<int> order(state.particles.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        const Particle& pa = state.particles[a];
        const Particle& pb = state.particles[b];
        return std::tie(pa.perceptual, pa.id) < std::tie(pb.perceptual, pb.id);
    });
    std::vector<Particle> survivors;
    for (int i = 0; i < k && i < static_cast<int>(order.size()); ++i)
        survivors.push_back(state.particles[order[i]]);
    std::sort(survivors.begin(), survivors.end(), [](const Particle& a, const Particle& b) { return a.id < b.id; });
    state.particles = std::move(survivors);
}

/// Replenishes the population to N by cloning survivors round-robin with
/// Gaussian latent perturbation; survivors themselves stay untouched.
inline void resample(FinvState& state) {
    const int n = state.config.population_size;
    const int k = static_cast<int>(state.particles.size());
    if (k == 0) throw std::logic_error("resample: empty population");
    std::vector<Particle> clones;
    for (int c = 0; c < n - k; ++c) {
        const Particle& parent = state.particles[c % k];
        Particle clone;
        clone.id = state.next_id++;
        clone.w = parent.w;
        clone.lineage = parent.id;
        clone.rng_seed = mix_seed(state.master_seed ^ 0x636c6f6eULL, ++state.seed_counter);
        clone.dead = parent.dead;
        Rng rng(clone.rng_seed);
        detail::perturb_latents(clone.w, state.config.resample_sigma, rng);
        if (detail::latents_finite(clone.w)) clone.dead = false;
        clones.push_back(std::move(clone));
    }
    for (auto& c : clones) state.particles.push_back(std::move(c));
}

/// One sequential step: append the observation; at t = 0 only optimize, at
/// t > 0 filter on all frames including the new one, resample, then optimize.
inline void step_observation(FinvState& state, const ObservationFrame& frame) {
    frame.check();
    state.frames.push_back(frame);
    state.plans.push_back(make_render_plan(frame.camera, state.pipe.grid, state.pipe.render));
    state.t = static_cast<int>(state.frames.size()) - 1;
    state.graph = std::make_shared<Phase1Graph>(
        build_phase1_graph(state.prior, state.frames, state.plans, state.pipe));
    if (state.t == 0) {
        optimize_particles(state, state.config.steps_t0);
    } else {
        rank_and_filter(state);
        resample(state);
        optimize_particles(state, state.config.steps_per_obs);
    }
}

// ---------------------------------------------------------------------------
// Phase II

struct RefineResult {
    int particle_id = -1;
    LatentPair w;
    GeneratorParams params;
    double final_loss = kInf;  // full inversion objective with refined params
};

/// Fine-tunes the generator around each of the refine_top_k best latent
/// codes. Texture parameters take refine_steps updates on the texture
/// objective; geometry parameters take at most geometry_step_cap updates on
/// the mask objective (early stopping as regularization). The pivot latent
/// is never modified.
inline std::vector<RefineResult> refine(const FinvState& state) {
    if (state.frames.empty()) throw std::invalid_argument("refine: no observations");
    std::vector<int> order(state.particles.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        const Particle& pa = state.particles[a];
        const Particle& pb = state.particles[b];
        return std::tie(pa.cumulative_loss, pa.id) < std::tie(pb.cumulative_loss, pb.id);
    });
    const int k = std::min<int>(state.config.refine_top_k, static_cast<int>(order.size()));
    std::vector<RefineResult> results(k);

    parallel_for(k, state.config.threads, [&](int64_t c, int) {
        const Particle& particle = state.particles[order[c]];
        RefineResult& res = results[c];
        res.particle_id = particle.id;
        res.w = particle.w;
        res.params = state.prior;

        const int steps = state.config.refine_steps;
        const int geo_cap = std::min(state.config.geometry_step_cap, steps);
        GeoRefineGraph geo = build_geometry_refine_graph(res.w, res.params, state.frames, state.plans,
                                                         state.pipe);
        Workspace geo_ws;
        std::map<int, Array> geo_leaves;
        feed_mlp(geo_leaves, geo.decode.phi_w, geo.decode.phi_b, res.params.geo);
        geo.g.forward(geo_ws, geo_leaves);

        TexRefineGraph tex = build_texture_refine_graph(res.w, res.params, state.frames, state.plans,
                                                        state.pipe, geo_ws.value(geo.decode.occupancy));
        Workspace tex_ws;
        detail::MlpAdamState adam_phi(res.params.geo, state.config.param_lr);
        detail::MlpAdamState adam_theta(res.params.tex, state.config.param_lr);

        for (int step = 0; step < steps; ++step) {
            if (step < geo_cap) {
                // geo_ws holds the forward pass for the current phi
                auto grads = geo.g.backward(geo_ws, geo.total);
                adam_phi.step(res.params.geo, grads, geo.decode.phi_w, geo.decode.phi_b);
                geo_leaves.clear();
                feed_mlp(geo_leaves, geo.decode.phi_w, geo.decode.phi_b, res.params.geo);
                geo.g.forward(geo_ws, geo_leaves);
                tex.g.set_constant(tex.occupancy_const, geo_ws.value(geo.decode.occupancy));
            }
            std::map<int, Array> tex_leaves;
            feed_mlp(tex_leaves, tex.decode.theta_w, tex.decode.theta_b, res.params.tex);
            tex.g.forward(tex_ws, tex_leaves);
            auto grads = tex.g.backward(tex_ws, tex.total);
            adam_theta.step(res.params.tex, grads, tex.decode.theta_w, tex.decode.theta_b);
        }
        res.final_loss = phase1_objective(res.w, res.params, state.frames, state.pipe);
    });
    return results;
}

// ---------------------------------------------------------------------------
// Full pipeline

struct ReconstructionResult {
    LatentPair w;
    GeneratorParams params;
    double final_loss = kInf;
    int chosen_particle = -1;
    std::vector<RefineResult> candidates;
    std::vector<StepRecord> log;
    std::vector<Particle> population;  // Phase I end state, diagnostics
};

/// Folds the observations through the sequential filter-and-optimize loop,
/// refines the best candidates, and returns the lowest-objective result.
inline ReconstructionResult reconstruct(std::span<const ObservationFrame> frames,
                                        const GeneratorParams& prior, const PriorSampler& sampler,
                                        const FinvConfig& config, const PipelineConfig& pipe,
                                        uint64_t seed) {
    if (frames.empty()) throw std::invalid_argument("reconstruct: no observations");
    FinvState state = init_population(config, pipe, prior, sampler, seed);
    for (const auto& frame : frames) step_observation(state, frame);
    ReconstructionResult out;
    out.candidates = refine(state);
    int best = 0;
    for (size_t i = 1; i < out.candidates.size(); ++i)
        if (out.candidates[i].final_loss < out.candidates[best].final_loss) best = static_cast<int>(i);
    out.w = out.candidates[best].w;
    out.params = out.candidates[best].params;
    out.final_loss = out.candidates[best].final_loss;
    out.chosen_particle = out.candidates[best].particle_id;
    out.log = state.log;
    out.population = state.particles;
    return out;
}

// ---------------------------------------------------------------------------
// No-prior baseline: direct optimization of raw grids with the same renderer.

/// Optimizes occupancy logits and color logits directly against the
/// inversion losses. No decoder, no prior.
inline VoxelFields baseline_direct_fit(std::span<const ObservationFrame> frames, const PipelineConfig& pipe,
                                       const FinvConfig& config, std::vector<double>* loss_trace = nullptr) {
    if (frames.empty()) throw std::invalid_argument("baseline_direct_fit: no observations");
    const int V = pipe.grid;
    const int64_t n = static_cast<int64_t>(V) * V * V;
    auto plans = detail::make_plans(frames, pipe);
    auto metric = make_perceptual(pipe.objective);

    Graph g;
    int occ_leaf = g.input({static_cast<int>(n)});
    int col_leaf = g.input({static_cast<int>(n), 3});
    int colors = g.sigmoid(col_leaf);
    int total = -1;
    for (size_t t = 0; t < frames.size(); ++t) {
        FrameLossNodes fl =
            detail::emit_frame_losses(g, frames[t], plans[t], occ_leaf, colors, *metric);
        int frame_total = g.add(fl.perceptual, g.mul_scalar(fl.mask_bce, pipe.objective.mask_weight));
        total = total < 0 ? frame_total : g.add(total, frame_total);
    }

    Array occ = Array::full({static_cast<int>(n)}, -3.0);  // mostly empty start
    Array col({static_cast<int>(n), 3});                   // sigmoid(0) = mid gray
    Adam adam_occ(n, config.baseline_lr);
    Adam adam_col(3 * n, config.baseline_lr);
    Workspace ws;
    for (int step = 0; step < config.baseline_steps; ++step) {
        g.forward(ws, {{occ_leaf, occ}, {col_leaf, col}});
        if (loss_trace) loss_trace->push_back(ws.value(total).value());
        auto grads = g.backward(ws, total);
        adam_occ.step(occ, grads.at(occ_leaf));
        adam_col.step(col, grads.at(col_leaf));
    }
    VoxelFields out;
    out.grid = V;
    out.occupancy_logits = std::move(occ);
    g.forward(ws, {{occ_leaf, out.occupancy_logits}, {col_leaf, col}});
    if (loss_trace) loss_trace->push_back(ws.value(total).value());
    out.colors = ws.value(colors);
    return out;
}

}  // namespace finv
