#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "finv/priorlab.hpp"

using namespace finv;

namespace {

ShapeSpec centered_sphere(double radius, Vec3 color = {0.8, 0.2, 0.2}) {
    ShapeSpec spec;
    Primitive pr;
    pr.kind = PrimitiveKind::kSphere;
    pr.center = {0, 0, 0};
    pr.extent = {radius, radius, radius};
    pr.color = color;
    spec.primitives.push_back(pr);
    return spec;
}

std::vector<ShapeSpec> training_set(int n, uint64_t seed0 = 1000) {
    std::vector<ShapeSpec> out;
    for (int i = 0; i < n; ++i) out.push_back(random_shape_spec(seed0 + i, training_palette()));
    return out;
}

int64_t grid_index(int x, int y, int z, int V) { return (static_cast<int64_t>(x) * V + y) * V + z; }

}  // namespace

TEST(GenerateShape, SphereOccupancyGeometry) {
    const int V = 16;
    GroundTruthShape gt = generate_shape(centered_sphere(0.25), V);
    // center voxel occupied, corner voxels empty
    EXPECT_GT(gt.fields.occupancy_logits[grid_index(V / 2, V / 2, V / 2, V)], 0.0);
    EXPECT_LT(gt.fields.occupancy_logits[grid_index(0, 0, 0, V)], 0.0);
    EXPECT_LT(gt.fields.occupancy_logits[grid_index(V - 1, V - 1, V - 1, V)], 0.0);
    // surface points lie on the sphere
    for (int i = 0; i < gt.surface_points.shape()[0]; ++i) {
        const Vec3 p{gt.surface_points[i * 3], gt.surface_points[i * 3 + 1], gt.surface_points[i * 3 + 2]};
        ASSERT_NEAR(norm(p), 0.25, 1e-9);
    }
}

TEST(GenerateShape, DisjointBoxUnionCountsAdd) {
    ShapeSpec a, b, both;
    Primitive box1;
    box1.kind = PrimitiveKind::kBox;
    box1.center = {-0.25, 0, 0};
    box1.extent = {0.12, 0.1, 0.1};
    Primitive box2 = box1;
    box2.center = {0.25, 0, 0};
    box2.extent = {0.15, 0.12, 0.08};
    box2.color = {0.1, 0.2, 0.9};
    a.primitives = {box1};
    b.primitives = {box2};
    both.primitives = {box1, box2};
    const int V = 24;
    auto count = [&](const ShapeSpec& s) {
        GroundTruthShape gt = generate_shape(s, V, 8);
        int64_t n = 0;
        for (int64_t i = 0; i < gt.fields.occupancy_logits.size(); ++i)
            n += gt.fields.occupancy_logits[i] > 0.0;
        return n;
    };
    EXPECT_EQ(count(both), count(a) + count(b));
}

// Voxelized volume of a r=0.25 sphere vs (4/3) pi r^3 at V=32.
TEST(GenerateShape, SphereVolumeFraction) {
    const int V = 32;
    GroundTruthShape gt = generate_shape(centered_sphere(0.25), V, 8);
    int64_t occupied = 0;
    for (int64_t i = 0; i < gt.fields.occupancy_logits.size(); ++i)
        occupied += gt.fields.occupancy_logits[i] > 0.0;
    const double fraction = static_cast<double>(occupied) / (V * V * V);
    const double analytic = 4.0 / 3.0 * M_PI * 0.25 * 0.25 * 0.25;
    EXPECT_NEAR(fraction, analytic, 0.1 * analytic);
}

TEST(GenerateShape, InvalidSpecsRejected) {
    ShapeSpec empty;
    EXPECT_THROW(generate_shape(empty, 8), std::invalid_argument);
    ShapeSpec outside = centered_sphere(0.3);
    outside.primitives[0].center = {0.4, 0, 0};  // reaches past the cube wall
    EXPECT_THROW(generate_shape(outside, 8), std::invalid_argument);
    ShapeSpec many = centered_sphere(0.1);
    many.primitives.resize(4, many.primitives[0]);
    EXPECT_THROW(generate_shape(many, 8), std::invalid_argument);
}

TEST(GenerateShape, RandomSpecsAreValidAndDeterministic) {
    for (uint64_t seed = 0; seed < 50; ++seed) {
        ShapeSpec a = random_shape_spec(seed, training_palette());
        EXPECT_NO_THROW(a.check());
        ShapeSpec b = random_shape_spec(seed, training_palette());
        ASSERT_EQ(a.primitives.size(), b.primitives.size());
        for (size_t i = 0; i < a.primitives.size(); ++i)
            for (int c = 0; c < 3; ++c) ASSERT_EQ(a.primitives[i].center[c], b.primitives[i].center[c]);
    }
}

TEST(Pretrain, RequiresSixteenShapes) {
    ArchConfig arch;
    PretrainConfig cfg;
    EXPECT_THROW(pretrain_prior(training_set(8), arch, cfg, 1), std::invalid_argument);
}

TEST(Pretrain, ZeroStepsLeavesRandomDecoderAtChance) {
    ArchConfig arch;
    arch.hidden = 16;
    arch.hidden_layers = 2;
    PretrainConfig cfg;
    cfg.num_shapes = 16;
    cfg.steps = 0;
    cfg.grid = 16;
    auto dataset = training_set(16);
    PriorBundle bundle = pretrain_prior(dataset, arch, cfg, 5);
    const double iou = mean_training_iou(bundle, dataset);
    EXPECT_LT(iou, 0.3);
}

// Larger latent regularizers shrink the table norm monotonically.
TEST(Pretrain, BetaSweepShrinksLatentNorms) {
    ArchConfig arch;
    arch.d_latent = 16;
    arch.hidden = 24;
    arch.hidden_layers = 2;
    auto dataset = training_set(16);
    double last_norm = std::numeric_limits<double>::infinity();
    for (double beta : {1e-3, 1e-1, 10.0}) {
        PretrainConfig cfg;
        cfg.num_shapes = 16;
        cfg.steps = 250;
        cfg.grid = 16;
        cfg.point_subsample = 512;
        cfg.beta = beta;
        PriorBundle bundle = pretrain_prior(dataset, arch, cfg, 7);
        double norm2 = 0.0;
        for (const auto& w : bundle.latent_table)
            for (int i = 0; i < arch.d_latent; ++i) norm2 += w.w_geo[i] * w.w_geo[i] + w.w_tex[i] * w.w_tex[i];
        EXPECT_LT(norm2, last_norm);
        last_norm = norm2;
    }
}

TEST(Pretrain, DeterministicPerSeed) {
    ArchConfig arch;
    arch.d_latent = 8;
    arch.hidden = 16;
    arch.hidden_layers = 2;
    PretrainConfig cfg;
    cfg.num_shapes = 16;
    cfg.steps = 40;
    cfg.grid = 12;
    cfg.point_subsample = 256;
    auto dataset = training_set(16);
    PriorBundle a = pretrain_prior(dataset, arch, cfg, 11);
    PriorBundle b = pretrain_prior(dataset, arch, cfg, 11);
    for (size_t l = 0; l < a.params.geo.weights.size(); ++l)
        for (int64_t i = 0; i < a.params.geo.weights[l].size(); ++i)
            ASSERT_EQ(a.params.geo.weights[l][i], b.params.geo.weights[l][i]);
    for (int i = 0; i < 16; ++i)
        for (int j = 0; j < arch.d_latent; ++j)
            ASSERT_EQ(a.latent_table[i].w_geo[j], b.latent_table[i].w_geo[j]);
}

// Full-scale pretraining: fit quality, loss trend, smoothness, and sampler
// statistics, all from one (expensive) run.
TEST(Pretrain, FullRunQualityAndInvariants) {
    ArchConfig arch;     // defaults: d 32, hidden 64, 3 hidden layers
    PretrainConfig cfg;  // defaults: 64 shapes, 2000 steps, batch 8
    auto dataset = training_set(cfg.num_shapes);
    std::vector<double> history;
    PriorBundle bundle = pretrain_prior(dataset, arch, cfg, 42, &history);

    // fit quality: mean training IoU beyond 0.85
    const double iou = mean_training_iou(bundle, dataset);
    EXPECT_GT(iou, 0.85);

    // moving-average loss (window 50) is non-increasing up to optimizer noise
    ASSERT_EQ(history.size(), static_cast<size_t>(cfg.steps));
    const int W = 50;
    double prev = std::numeric_limits<double>::infinity();
    for (size_t i = 0; i + W <= history.size(); i += 1) {
        double ma = 0.0;
        for (int j = 0; j < W; ++j) ma += history[i + j];
        ma /= W;
        ASSERT_LT(ma, prev * 1.02 + 1e-9);  // plateau noise stays under 2%
        prev = ma;
    }
    // and the overall trend is strongly down
    EXPECT_LT(history.back(), 0.5 * history.front());

    // sampler scales respect the variance floor
    for (int i = 0; i < arch.d_latent; ++i) {
        ASSERT_GE(bundle.sampler.scale_geo[i], std::sqrt(cfg.variance_floor) - 1e-12);
        ASSERT_GE(bundle.sampler.scale_tex[i], std::sqrt(cfg.variance_floor) - 1e-12);
    }

    // latent-space smoothness proxy: midpoints of training latents decode to
    // occupancy overlapping at least one endpoint. Random pairs satisfy the
    // >0.3 criterion for a solid majority (not universally; distant pairs can
    // miss), and comfortably in the mean.
    int pass = 0;
    double acc = 0.0;
    const int trials = 20;
    for (int i = 0; i < trials; ++i) {
        const int a = (13 * i) % cfg.num_shapes;
        const int b = (13 * i + 7 + i) % cfg.num_shapes;
        LatentPair mid;
        mid.w_geo = Array({arch.d_latent});
        mid.w_tex = Array({arch.d_latent});
        for (int j = 0; j < arch.d_latent; ++j) {
            mid.w_geo[j] = 0.5 * (bundle.latent_table[a].w_geo[j] + bundle.latent_table[b].w_geo[j]);
            mid.w_tex[j] = 0.5 * (bundle.latent_table[a].w_tex[j] + bundle.latent_table[b].w_tex[j]);
        }
        VoxelFields dec = decode(mid, bundle.params, cfg.grid);
        const double ia = occupancy_iou(dec.occupancy_logits,
                                        generate_shape(dataset[a], cfg.grid, 8).fields.occupancy_logits);
        const double ib = occupancy_iou(dec.occupancy_logits,
                                        generate_shape(dataset[b], cfg.grid, 8).fields.occupancy_logits);
        acc += std::max(ia, ib);
        if (std::max(ia, ib) > 0.3) ++pass;
    }
    EXPECT_GE(pass, static_cast<int>(0.6 * trials));
    EXPECT_GT(acc / trials, 0.3);

    // bundle round-trip through the directory format
    const std::string dir = (std::filesystem::temp_directory_path() / "finv_test_bundle").string();
    std::filesystem::remove_all(dir);
    save_prior_bundle(bundle, dir);
    PriorBundle loaded = load_prior_bundle(dir);
    ASSERT_EQ(loaded.latent_table.size(), bundle.latent_table.size());
    for (size_t i = 0; i < bundle.latent_table.size(); ++i)
        for (int j = 0; j < arch.d_latent; ++j)
            ASSERT_EQ(loaded.latent_table[i].w_geo[j], bundle.latent_table[i].w_geo[j]);
    for (int j = 0; j < arch.d_latent; ++j)
        ASSERT_EQ(loaded.sampler.scale_geo[j], bundle.sampler.scale_geo[j]);
    for (size_t l = 0; l < bundle.params.tex.weights.size(); ++l)
        for (int64_t i = 0; i < bundle.params.tex.weights[l].size(); ++i)
            ASSERT_EQ(loaded.params.tex.weights[l][i], bundle.params.tex.weights[l][i]);
    std::filesystem::remove_all(dir);
    EXPECT_THROW(load_prior_bundle(dir), std::runtime_error);
}
