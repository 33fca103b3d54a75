#include <gtest/gtest.h>

#include <cmath>

#include "finv/finv.hpp"
#include "helpers.hpp"

using namespace finv;
using namespace finv::testutil;

namespace {

PriorSampler unit_sampler(int d, double scale = 1.0) {
    PriorSampler s;
    s.mean_geo = Array({d});
    s.mean_tex = Array({d});
    s.scale_geo = Array::full({d}, scale);
    s.scale_tex = Array::full({d}, scale);
    return s;
}

struct SmallSetup {
    ArchConfig arch;
    GeneratorParams prior;
    PriorSampler sampler;
    FinvConfig config;
    PipelineConfig pipe;
    std::vector<ObservationFrame> frames;

    explicit SmallSetup(int n_frames = 3) {
        arch.d_latent = 6;
        arch.hidden = 10;
        arch.hidden_layers = 2;
        arch.fourier_bands = 2;
        prior = init_params(arch, 17);
        sampler = unit_sampler(arch.d_latent, 0.7);
        config.population_size = 4;
        config.steps_t0 = 6;
        config.steps_per_obs = 4;
        config.refine_steps = 5;
        config.geometry_step_cap = 2;
        config.refine_top_k = 2;
        config.threads = 2;
        pipe.grid = 8;
        pipe.render.samples_per_ray = 12;
        VoxelFields gt = sphere_fields({{{0.0, 0.05, 0.0}, 0.28, {0.9, 0.4, 0.1}}}, pipe.grid);
        for (int t = 0; t < n_frames; ++t)
            frames.push_back(frame_from_fields(gt, orbit_test_camera(16, 15.0 + 40.0 * t), pipe.render, t));
    }
};

FinvState make_state_with_losses(const std::vector<double>& perceptual, double gamma) {
    // mechanics-only state: no frames, losses preset
    SmallSetup su;
    su.config.population_size = static_cast<int>(perceptual.size());
    su.config.gamma = gamma;
    FinvState state = init_population(su.config, su.pipe, su.prior, su.sampler, 1);
    for (size_t i = 0; i < perceptual.size(); ++i) {
        state.particles[i].perceptual = perceptual[i];
        state.particles[i].cumulative_loss = perceptual[i];
    }
    return state;
}

}  // namespace

TEST(InitPopulation, SizeAndUniqueIds) {
    SmallSetup su;
    su.config.population_size = 8;
    FinvState state = init_population(su.config, su.pipe, su.prior, su.sampler, 5);
    ASSERT_EQ(state.particles.size(), 8u);
    for (int i = 0; i < 8; ++i) EXPECT_EQ(state.particles[i].id, i);
}

TEST(InitPopulation, DeterministicPerSeed) {
    SmallSetup su;
    FinvState a = init_population(su.config, su.pipe, su.prior, su.sampler, 11);
    FinvState b = init_population(su.config, su.pipe, su.prior, su.sampler, 11);
    for (size_t i = 0; i < a.particles.size(); ++i)
        for (int64_t j = 0; j < a.particles[i].w.w_geo.size(); ++j) {
            ASSERT_EQ(a.particles[i].w.w_geo[j], b.particles[i].w.w_geo[j]);
            ASSERT_EQ(a.particles[i].w.w_tex[j], b.particles[i].w.w_tex[j]);
        }
}

TEST(InitPopulation, DegenerateSamplerCollapses) {
    SmallSetup su;
    su.sampler = unit_sampler(su.arch.d_latent, 0.0);
    FinvState state = init_population(su.config, su.pipe, su.prior, su.sampler, 3);
    for (const auto& p : state.particles)
        for (int64_t j = 0; j < p.w.w_geo.size(); ++j) {
            ASSERT_EQ(p.w.w_geo[j], 0.0);
            ASSERT_EQ(p.w.w_tex[j], 0.0);
        }
}

TEST(InitPopulation, RejectsEmptyPopulation) {
    SmallSetup su;
    su.config.population_size = 0;
    EXPECT_THROW(init_population(su.config, su.pipe, su.prior, su.sampler, 1), std::invalid_argument);
}

TEST(RankAndFilter, KeepsSmallestLosses) {
    FinvState state = make_state_with_losses({7, 2, 9, 1, 5, 10, 3, 8, 6, 4}, 0.3);
    rank_and_filter(state);
    ASSERT_EQ(state.particles.size(), 3u);  // ceil(0.3 * 10)
    // survivors are the particles with losses {1, 2, 3}, i.e. ids 3, 1, 6
    EXPECT_EQ(state.particles[0].id, 1);
    EXPECT_EQ(state.particles[1].id, 3);
    EXPECT_EQ(state.particles[2].id, 6);
}

TEST(RankAndFilter, TiesBreakTowardSmallerId) {
    FinvState state = make_state_with_losses(std::vector<double>(6, 1.5), 0.5);
    rank_and_filter(state);
    ASSERT_EQ(state.particles.size(), 3u);
    EXPECT_EQ(state.particles[0].id, 0);
    EXPECT_EQ(state.particles[1].id, 1);
    EXPECT_EQ(state.particles[2].id, 2);
}

TEST(RankAndFilter, AtLeastOneSurvivor) {
    FinvState state = make_state_with_losses({3, 1, 2}, 0.3);
    rank_and_filter(state);  // ceil(0.9) = 1
    ASSERT_EQ(state.particles.size(), 1u);
    EXPECT_EQ(state.particles[0].id, 1);
}

TEST(RankAndFilter, DeadParticlesRankWorst) {
    FinvState state = make_state_with_losses({1, 2, 3, 4}, 0.5);
    state.particles[0].dead = true;
    state.particles[0].perceptual = kInf;
    rank_and_filter(state);
    ASSERT_EQ(state.particles.size(), 2u);
    EXPECT_EQ(state.particles[0].id, 1);
    EXPECT_EQ(state.particles[1].id, 2);
}

TEST(Resample, ZeroSigmaClonesExactly) {
    FinvState state = make_state_with_losses({1, 2, 3, 4, 5, 6, 7, 8}, 0.25);
    state.config.resample_sigma = 0.0;
    rank_and_filter(state);
    ASSERT_EQ(state.particles.size(), 2u);
    resample(state);
    ASSERT_EQ(state.particles.size(), 8u);
    for (size_t i = 2; i < 8; ++i) {
        const Particle& clone = state.particles[i];
        ASSERT_TRUE(clone.lineage.has_value());
        const Particle& parent = *std::find_if(state.particles.begin(), state.particles.end(),
                                               [&](const Particle& p) { return p.id == *clone.lineage; });
        for (int64_t j = 0; j < clone.w.w_geo.size(); ++j) ASSERT_EQ(clone.w.w_geo[j], parent.w.w_geo[j]);
    }
}

TEST(Resample, RoundRobinCloneCounts) {
    FinvState state = make_state_with_losses({1, 2, 3, 4, 5, 6, 7, 8}, 0.375);  // ceil(3)
    rank_and_filter(state);
    ASSERT_EQ(state.particles.size(), 3u);
    const int id0 = state.particles[0].id, id1 = state.particles[1].id, id2 = state.particles[2].id;
    resample(state);
    ASSERT_EQ(state.particles.size(), 8u);
    int counts[3] = {0, 0, 0};
    for (const auto& p : state.particles)
        if (p.lineage) {
            if (*p.lineage == id0) ++counts[0];
            if (*p.lineage == id1) ++counts[1];
            if (*p.lineage == id2) ++counts[2];
        }
    EXPECT_EQ(counts[0], 2);
    EXPECT_EQ(counts[1], 2);
    EXPECT_EQ(counts[2], 1);
}

// Population cardinality across randomized filter/resample cycles.
TEST(Filtering, PopulationCardinalityProperty) {
    Rng rng(99);
    for (int trial = 0; trial < 200; ++trial) {
        const int n = 1 + static_cast<int>(rng.uniform_int(12));
        const double gamma = rng.uniform(0.05, 1.0);
        std::vector<double> losses(n);
        for (auto& l : losses) l = rng.uniform();
        FinvState state = make_state_with_losses(losses, gamma);
        rank_and_filter(state);
        const int k = std::max(1, static_cast<int>(std::ceil(gamma * n)));
        ASSERT_EQ(static_cast<int>(state.particles.size()), k);
        // brute-force survivor check
        std::vector<int> order(n);
        for (int i = 0; i < n; ++i) order[i] = i;
        std::sort(order.begin(), order.end(),
                  [&](int a, int b) { return std::tie(losses[a], a) < std::tie(losses[b], b); });
        std::vector<int> expected(order.begin(), order.begin() + k);
        std::sort(expected.begin(), expected.end());
        for (int i = 0; i < k; ++i) ASSERT_EQ(state.particles[i].id, expected[i]);
        resample(state);
        ASSERT_EQ(static_cast<int>(state.particles.size()), n);
    }
}

TEST(OptimizeParticles, ZeroStepsOnlyRefreshesLosses) {
    SmallSetup su;
    FinvState state = init_population(su.config, su.pipe, su.prior, su.sampler, 7);
    state.frames.push_back(su.frames[0]);
    state.plans.push_back(make_render_plan(su.frames[0].camera, su.pipe.grid, su.pipe.render));
    state.t = 0;
    state.graph =
        std::make_shared<Phase1Graph>(build_phase1_graph(state.prior, state.frames, state.plans, state.pipe));
    auto before = state.particles;
    optimize_particles(state, 0);
    for (size_t i = 0; i < state.particles.size(); ++i) {
        for (int64_t j = 0; j < before[i].w.w_geo.size(); ++j)
            ASSERT_EQ(state.particles[i].w.w_geo[j], before[i].w.w_geo[j]);
        EXPECT_TRUE(std::isfinite(state.particles[i].cumulative_loss));
    }
}

TEST(OptimizeParticles, IdenticalParticlesStayIdentical) {
    SmallSetup su;
    su.sampler = unit_sampler(su.arch.d_latent, 0.0);  // all particles identical
    FinvState state = init_population(su.config, su.pipe, su.prior, su.sampler, 7);
    step_observation(state, su.frames[0]);
    for (size_t i = 1; i < state.particles.size(); ++i)
        for (int64_t j = 0; j < state.particles[0].w.w_geo.size(); ++j) {
            ASSERT_EQ(state.particles[i].w.w_geo[j], state.particles[0].w.w_geo[j]);
            ASSERT_EQ(state.particles[i].w.w_tex[j], state.particles[0].w.w_tex[j]);
        }
}

// Convex surrogate: the baseline's identity parameterization (loss directly
// in the optimized grids) must descend monotonically at a small step size.
TEST(OptimizeParticles, ConvexSurrogateDescends) {
    SmallSetup su(1);
    FinvConfig cfg = su.config;
    cfg.baseline_steps = 30;
    cfg.baseline_lr = 5e-3;
    std::vector<double> trace;
    baseline_direct_fit(su.frames, su.pipe, cfg, &trace);
    ASSERT_EQ(trace.size(), 31u);
    for (size_t i = 1; i < trace.size(); ++i) ASSERT_LT(trace[i], trace[i - 1] + 1e-12);
}

TEST(StepObservation, FirstFrameSkipsFiltering) {
    SmallSetup su;
    FinvState state = init_population(su.config, su.pipe, su.prior, su.sampler, 7);
    step_observation(state, su.frames[0]);
    ASSERT_EQ(static_cast<int>(state.particles.size()), su.config.population_size);
    for (int i = 0; i < su.config.population_size; ++i) EXPECT_EQ(state.particles[i].id, i);  // no clones
}

// Step budget across three observations matches steps_t0 + 2*steps_per_obs;
// with the defaults (150, 100) that is the documented 350-step budget.
TEST(StepObservation, StepBudgetAccounting) {
    SmallSetup su;
    FinvState state = init_population(su.config, su.pipe, su.prior, su.sampler, 7);
    for (int t = 0; t < 3; ++t) step_observation(state, su.frames[t]);
    int per_t[3] = {0, 0, 0};
    for (const auto& r : state.log)
        if (r.particle_id == state.particles[0].id) ++per_t[r.t];
    // the surviving first particle saw every optimization step
    EXPECT_EQ(per_t[0], su.config.steps_t0);
    EXPECT_EQ(per_t[1], su.config.steps_per_obs);
    EXPECT_EQ(per_t[2], su.config.steps_per_obs);
    FinvConfig defaults;
    EXPECT_EQ(defaults.steps_t0 + 2 * defaults.steps_per_obs, 350);
}

TEST(StepObservation, PopulationCycleAtLaterSteps) {
    SmallSetup su;
    su.config.population_size = 5;
    su.config.gamma = 0.4;  // ceil(2)
    FinvState state = init_population(su.config, su.pipe, su.prior, su.sampler, 7);
    step_observation(state, su.frames[0]);
    step_observation(state, su.frames[1]);
    ASSERT_EQ(state.particles.size(), 5u);
    int clones = 0;
    for (const auto& p : state.particles) clones += p.lineage.has_value();
    EXPECT_EQ(clones, 3);
}

// Optimization at a new timestep should not make the best particle worse
// (statistically over seeds).
TEST(StepObservation, OptimizationImprovesBestStatistically) {
    double improvement = 0.0;
    for (uint64_t seed : {1u, 2u, 3u}) {
        SmallSetup su;
        su.config.steps_t0 = 12;
        su.config.steps_per_obs = 12;
        FinvState state = init_population(su.config, su.pipe, su.prior, su.sampler, seed);
        step_observation(state, su.frames[0]);
        // second frame arrives: measure the best objective before optimizing
        state.frames.push_back(su.frames[1]);
        state.plans.push_back(make_render_plan(su.frames[1].camera, su.pipe.grid, su.pipe.render));
        state.t = 1;
        state.graph = std::make_shared<Phase1Graph>(
            build_phase1_graph(state.prior, state.frames, state.plans, state.pipe));
        rank_and_filter(state);
        resample(state);
        evaluate_population(state);
        double before = kInf;
        for (const auto& p : state.particles) before = std::min(before, p.cumulative_loss);
        optimize_particles(state, su.config.steps_per_obs);
        double after = kInf;
        for (const auto& p : state.particles) after = std::min(after, p.cumulative_loss);
        improvement += before - after;
    }
    EXPECT_GT(improvement, 0.0);
}

TEST(Refine, ZeroStepsReturnsPriorAndPhase1Loss) {
    SmallSetup su;
    su.config.refine_steps = 0;
    FinvState state = init_population(su.config, su.pipe, su.prior, su.sampler, 7);
    for (const auto& f : su.frames) step_observation(state, f);
    auto results = refine(state);
    ASSERT_EQ(results.size(), 2u);
    for (const auto& r : results) {
        for (size_t l = 0; l < su.prior.geo.weights.size(); ++l)
            for (int64_t i = 0; i < su.prior.geo.weights[l].size(); ++i)
                ASSERT_EQ(r.params.geo.weights[l][i], su.prior.geo.weights[l][i]);
        const Particle& p = *std::find_if(state.particles.begin(), state.particles.end(),
                                          [&](const Particle& q) { return q.id == r.particle_id; });
        EXPECT_NEAR(r.final_loss, p.cumulative_loss, 1e-12);
    }
}

TEST(Refine, GeometryCapZeroKeepsPhiBitExact) {
    SmallSetup su;
    su.config.geometry_step_cap = 0;
    su.config.refine_steps = 4;
    FinvState state = init_population(su.config, su.pipe, su.prior, su.sampler, 7);
    for (const auto& f : su.frames) step_observation(state, f);
    auto results = refine(state);
    for (const auto& r : results) {
        for (size_t l = 0; l < su.prior.geo.weights.size(); ++l) {
            for (int64_t i = 0; i < su.prior.geo.weights[l].size(); ++i)
                ASSERT_EQ(r.params.geo.weights[l][i], su.prior.geo.weights[l][i]);
            for (int64_t i = 0; i < su.prior.geo.biases[l].size(); ++i)
                ASSERT_EQ(r.params.geo.biases[l][i], su.prior.geo.biases[l][i]);
        }
        // texture parameters did move
        bool theta_moved = false;
        for (size_t l = 0; l < su.prior.tex.weights.size() && !theta_moved; ++l)
            for (int64_t i = 0; i < su.prior.tex.weights[l].size() && !theta_moved; ++i)
                theta_moved = r.params.tex.weights[l][i] != su.prior.tex.weights[l][i];
        EXPECT_TRUE(theta_moved);
    }
}

TEST(Refine, PivotLatentAndPriorUntouched) {
    SmallSetup su;
    FinvState state = init_population(su.config, su.pipe, su.prior, su.sampler, 7);
    for (const auto& f : su.frames) step_observation(state, f);
    auto pop_before = state.particles;
    auto results = refine(state);
    // Phase II does not mutate the population or the prior
    for (size_t i = 0; i < pop_before.size(); ++i)
        for (int64_t j = 0; j < pop_before[i].w.w_geo.size(); ++j)
            ASSERT_EQ(state.particles[i].w.w_geo[j], pop_before[i].w.w_geo[j]);
    for (size_t l = 0; l < su.prior.geo.weights.size(); ++l)
        for (int64_t i = 0; i < su.prior.geo.weights[l].size(); ++i)
            ASSERT_EQ(state.prior.geo.weights[l][i], su.prior.geo.weights[l][i]);
    // each result's pivot matches its particle bit-exactly
    for (const auto& r : results) {
        const Particle& p = *std::find_if(state.particles.begin(), state.particles.end(),
                                          [&](const Particle& q) { return q.id == r.particle_id; });
        for (int64_t j = 0; j < p.w.w_geo.size(); ++j) ASSERT_EQ(r.w.w_geo[j], p.w.w_geo[j]);
    }
}

TEST(Refine, ReducesObservedViewMse) {
    SmallSetup su(1);
    su.config.refine_steps = 50;
    su.config.geometry_step_cap = 10;
    su.config.refine_top_k = 1;
    su.config.steps_t0 = 25;
    FinvState state = init_population(su.config, su.pipe, su.prior, su.sampler, 21);
    step_observation(state, su.frames[0]);
    auto results = refine(state);
    ASSERT_EQ(results.size(), 1u);
    const RefineResult& r = results[0];

    const ObservationFrame& frame = su.frames[0];
    const Array gt = finv::detail::composite_gt(frame.rgb, frame.object_mask, su.pipe.render.background);
    RenderOutput before = render(decode(r.w, su.prior, su.pipe.grid), frame.camera, su.pipe.render);
    RenderOutput after = render(decode(r.w, r.params, su.pipe.grid), frame.camera, su.pipe.render);
    EXPECT_LT(mse_loss(after.rgb, gt, frame.validity_mask), mse_loss(before.rgb, gt, frame.validity_mask));
}

TEST(Reconstruct, DeterministicAcrossRunsAndThreads) {
    SmallSetup su;
    ReconstructionResult a, b;
    {
        FinvConfig cfg = su.config;
        cfg.threads = 1;
        a = reconstruct(su.frames, su.prior, su.sampler, cfg, su.pipe, 31);
    }
    {
        FinvConfig cfg = su.config;
        cfg.threads = 2;
        b = reconstruct(su.frames, su.prior, su.sampler, cfg, su.pipe, 31);
    }
    EXPECT_EQ(a.chosen_particle, b.chosen_particle);
    EXPECT_EQ(a.final_loss, b.final_loss);
    for (int64_t j = 0; j < a.w.w_geo.size(); ++j) ASSERT_EQ(a.w.w_geo[j], b.w.w_geo[j]);
    for (size_t l = 0; l < a.params.tex.weights.size(); ++l)
        for (int64_t i = 0; i < a.params.tex.weights[l].size(); ++i)
            ASSERT_EQ(a.params.tex.weights[l][i], b.params.tex.weights[l][i]);
    ASSERT_EQ(a.log.size(), b.log.size());
    for (size_t i = 0; i < a.log.size(); ++i) {
        ASSERT_EQ(a.log[i].particle_id, b.log[i].particle_id);
        ASSERT_EQ(a.log[i].objective, b.log[i].objective);
    }
}

TEST(Reconstruct, EmptyFramesRejected) {
    SmallSetup su;
    std::vector<ObservationFrame> none;
    EXPECT_THROW(reconstruct(none, su.prior, su.sampler, su.config, su.pipe, 1), std::invalid_argument);
}

TEST(Baseline, ZeroStepsGivesInitialConstantField) {
    SmallSetup su(1);
    FinvConfig cfg = su.config;
    cfg.baseline_steps = 0;
    VoxelFields f = baseline_direct_fit(su.frames, su.pipe, cfg);
    for (int64_t i = 0; i < f.occupancy_logits.size(); ++i) ASSERT_EQ(f.occupancy_logits[i], -3.0);
    for (int64_t i = 0; i < f.colors.size(); ++i) ASSERT_EQ(f.colors[i], 0.5);
}

TEST(Baseline, LossDropsSubstantially) {
    SmallSetup su(2);
    FinvConfig cfg = su.config;
    cfg.baseline_steps = 120;
    cfg.baseline_lr = 0.05;
    std::vector<double> trace;
    baseline_direct_fit(su.frames, su.pipe, cfg, &trace);
    EXPECT_LT(trace.back(), 0.5 * trace.front());
}
