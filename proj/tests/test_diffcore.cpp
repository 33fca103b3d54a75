#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "finv/array.hpp"
#include "finv/graph.hpp"
#include "finv/rng.hpp"

using namespace finv;

namespace {

Array random_array(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Array a(std::move(shape));
    for (int64_t i = 0; i < a.size(); ++i) a[i] = rng.uniform(lo, hi);
    return a;
}

}  // namespace

TEST(Array, ShapeInvariant) {
    Array a({2, 3});
    EXPECT_EQ(a.size(), 6);
    EXPECT_THROW(Array(Shape{2, 3}, std::vector<double>(5, 0.0)), std::invalid_argument);
    EXPECT_EQ(Array::scalar(4.0).value(), 4.0);
    EXPECT_EQ(numel(Shape{}), 1);
}

TEST(Evaluate, SquareAtThree) {
    Graph g;
    int x = g.input({1});
    int y = g.mul(x, x);
    auto vals = g.evaluate({{x, Array({1}, {3.0})}});
    EXPECT_DOUBLE_EQ(vals.at(y)[0], 9.0);
}

TEST(Evaluate, SigmoidAtZero) {
    Graph g;
    int x = g.input({1});
    int y = g.sigmoid(x);
    auto vals = g.evaluate({{x, Array({1}, {0.0})}});
    EXPECT_DOUBLE_EQ(vals.at(y)[0], 0.5);
}

TEST(Evaluate, MatmulShapeRule) {
    Graph g;
    int a = g.input({2, 3});
    int b = g.input({3, 4});
    int c = g.matmul(a, b);
    EXPECT_EQ(g.node(c).shape, (Shape{2, 4}));
    EXPECT_THROW(g.matmul(a, a), std::invalid_argument);
}

TEST(Evaluate, ShapeMismatchRejected) {
    Graph g;
    int a = g.input({2, 3});
    int b = g.input({3, 2});
    EXPECT_THROW(g.add(a, b), std::invalid_argument);
}

TEST(Evaluate, NonFiniteIntermediateIsError) {
    Graph g;
    int x = g.input({1});
    int e = g.exp(x);
    (void)e;
    EXPECT_THROW(g.evaluate({{x, Array({1}, {1000.0})}}), NonFiniteError);
    // log of a negative number -> NaN
    Graph g2;
    int x2 = g2.input({1});
    (void)g2.log(x2);
    EXPECT_THROW(g2.evaluate({{x2, Array({1}, {-1.0})}}), NonFiniteError);
}

TEST(Backward, SquareDerivative) {
    Graph g;
    int x = g.input({1});
    int y = g.mul(x, x);
    int loss = g.sum_all(y);
    Workspace ws;
    g.forward(ws, {{x, Array({1}, {3.0})}});
    auto grads = g.backward(ws, loss);
    EXPECT_DOUBLE_EQ(grads.at(x)[0], 6.0);
}

TEST(Backward, SigmoidDerivativeAtZero) {
    Graph g;
    int x = g.input({1});
    int loss = g.sum_all(g.sigmoid(x));
    Workspace ws;
    g.forward(ws, {{x, Array({1}, {0.0})}});
    auto grads = g.backward(ws, loss);
    EXPECT_DOUBLE_EQ(grads.at(x)[0], 0.25);
}

TEST(Backward, NonScalarOutputRejected) {
    Graph g;
    int x = g.input({2});
    int y = g.tanh(x);
    Workspace ws;
    g.forward(ws, {{x, Array({2}, {0.1, 0.2})}});
    EXPECT_THROW(g.backward(ws, y), std::invalid_argument);
}

TEST(Backward, UnreachableLeafGetsZeroGradient) {
    Graph g;
    int x = g.input({2});
    int unused = g.input({3});
    int loss = g.sum_all(g.mul(x, x));
    Workspace ws;
    g.forward(ws, {{x, Array({2}, {1.0, 2.0})}, {unused, Array({3})}});
    auto grads = g.backward(ws, loss);
    EXPECT_EQ(grads.at(unused).shape(), (Shape{3}));
    for (int i = 0; i < 3; ++i) EXPECT_EQ(grads.at(unused)[i], 0.0);
}

TEST(FiniteDifference, QuadraticIsNearlyExact) {
    Graph g;
    int x = g.input({4});
    int loss = g.sum_all(g.mul(x, x));
    Rng rng(7);
    std::map<int, Array> leaves{{x, random_array({4}, rng)}};
    EXPECT_LT(g.finite_difference_check(leaves, x, loss, 1e-5), 1e-8);
}

TEST(FiniteDifference, TanhChain) {
    Graph g;
    int x = g.input({4});
    int loss = g.sum_all(g.tanh(g.tanh(x)));
    Rng rng(9);
    std::map<int, Array> leaves{{x, random_array({4}, rng)}};
    EXPECT_LT(g.finite_difference_check(leaves, x, loss, 1e-5), 1e-6);
}

TEST(FiniteDifference, ZeroConstantGraph) {
    Graph g;
    int x = g.input({3});
    int zero = g.constant(Array({3}));
    int loss = g.sum_all(g.mul(zero, g.add(x, x)));
    std::map<int, Array> leaves{{x, Array({3}, {1.0, 2.0, 3.0})}};
    EXPECT_EQ(g.finite_difference_check(leaves, x, loss, 1e-5), 0.0);
}

TEST(FiniteDifference, StepMustBePositive) {
    Graph g;
    int x = g.input({1});
    int loss = g.sum_all(x);
    std::map<int, Array> leaves{{x, Array({1}, {1.0})}};
    EXPECT_THROW(g.finite_difference_check(leaves, x, loss, 0.0), std::invalid_argument);
}

// Every supported op, 20 seeds, step 1e-5, relative error < 1e-5.
TEST(FiniteDifference, AllOpsTwentySeeds) {
    for (uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(mix_seed(1234, seed));
        struct Case {
            const char* name;
            Graph g;
            int leaf;
            int loss;
            std::map<int, Array> leaves;
        };
        std::vector<Case> cases;

        {
            Case c{"add_sub_mul"};
            int x = c.g.input({3, 4});
            int y = c.g.constant(random_array({3, 4}, rng));
            int z = c.g.mul(c.g.sub(c.g.add(x, y), c.g.mul(x, y)), x);
            c.loss = c.g.sum_all(z);
            c.leaf = x;
            c.leaves = {{x, random_array({3, 4}, rng)}};
            cases.push_back(std::move(c));
        }
        {
            Case c{"scalar_ops"};
            int x = c.g.input({5});
            c.loss = c.g.sum_all(c.g.add_scalar(c.g.mul_scalar(x, 2.5), -0.75));
            c.leaf = x;
            c.leaves = {{x, random_array({5}, rng)}};
            cases.push_back(std::move(c));
        }
        {
            Case c{"matmul"};
            int a = c.g.input({3, 4});
            int b = c.g.constant(random_array({4, 2}, rng));
            c.loss = c.g.sum_all(c.g.tanh(c.g.matmul(a, b)));
            c.leaf = a;
            c.leaves = {{a, random_array({3, 4}, rng)}};
            cases.push_back(std::move(c));
        }
        {
            Case c{"matmul_rhs"};
            int a = c.g.constant(random_array({2, 3}, rng));
            int b = c.g.input({3, 3});
            c.loss = c.g.sum_all(c.g.sigmoid(c.g.matmul(a, b)));
            c.leaf = b;
            c.leaves = {{b, random_array({3, 3}, rng)}};
            cases.push_back(std::move(c));
        }
        {
            Case c{"broadcast"};
            int x = c.g.input({1, 4});
            int big = c.g.broadcast(x, {3, 4});
            int w = c.g.constant(random_array({3, 4}, rng));
            c.loss = c.g.mean_all(c.g.mul(big, w));
            c.leaf = x;
            c.leaves = {{x, random_array({1, 4}, rng)}};
            cases.push_back(std::move(c));
        }
        {
            Case c{"reshape_concat"};
            int x = c.g.input({6});
            int y = c.g.input({2, 3});
            int xr = c.g.reshape(x, {2, 3});
            int cat = c.g.concat({xr, y}, 1);
            c.loss = c.g.sum_all(c.g.mul(cat, cat));
            c.leaf = x;
            c.leaves = {{x, random_array({6}, rng)}, {y, random_array({2, 3}, rng)}};
            cases.push_back(std::move(c));
        }
        {
            Case c{"reductions"};
            int x = c.g.input({3, 4});
            int s = c.g.sum_axis(x, 1);
            c.loss = c.g.add(c.g.mean_all(c.g.mul(s, s)), c.g.sum_all(x));
            c.leaf = x;
            c.leaves = {{x, random_array({3, 4}, rng)}};
            cases.push_back(std::move(c));
        }
        {
            Case c{"unary_chain"};
            int x = c.g.input({6});
            int t = c.g.softplus(c.g.tanh(x));
            int u = c.g.exp(c.g.mul_scalar(x, 0.3));
            int v = c.g.log(c.g.add_scalar(c.g.mul(u, u), 1.5));
            c.loss = c.g.sum_all(c.g.add(t, v));
            c.leaf = x;
            c.leaves = {{x, random_array({6}, rng)}};
            cases.push_back(std::move(c));
        }
        {
            Case c{"trig"};
            int x = c.g.input({5});
            c.loss = c.g.sum_all(c.g.mul(c.g.sin(x), c.g.cos(x)));
            c.leaf = x;
            c.leaves = {{x, random_array({5}, rng, -2.0, 2.0)}};
            cases.push_back(std::move(c));
        }
        {
            Case c{"abs_clamp"};
            int x = c.g.input({8});
            int a = c.g.abs(x);
            int cl = c.g.clamp(x, -0.5, 0.5);
            c.loss = c.g.sum_all(c.g.add(a, c.g.mul(cl, cl)));
            c.leaf = x;
            // keep entries away from kink points so central differences are valid
            Array init({8});
            for (int i = 0; i < 8; ++i) {
                double v = rng.uniform(0.05, 0.45);
                if (rng.uniform() < 0.5) v = -v;
                if (rng.uniform() < 0.5) v += v > 0 ? 0.6 : -0.6;
                init[i] = v;
            }
            c.leaves = {{x, init}};
            cases.push_back(std::move(c));
        }
        {
            Case c{"gather_interp"};
            auto st = std::make_shared<InterpStencil>();
            st->rows = 6;
            st->taps = 2;
            for (int i = 0; i < 6; ++i) {
                st->index.push_back(static_cast<int32_t>(rng.uniform_int(5)));
                st->index.push_back(static_cast<int32_t>(rng.uniform_int(5)));
                const double w = rng.uniform();
                st->weight.push_back(w);
                st->weight.push_back(1.0 - w);
            }
            int x = c.g.input({5, 2});
            int yv = c.g.gather_interp(x, st);
            c.loss = c.g.sum_all(c.g.mul(yv, yv));
            c.leaf = x;
            c.leaves = {{x, random_array({5, 2}, rng)}};
            cases.push_back(std::move(c));
        }
        {
            Case c{"slice_cols"};
            int x = c.g.input({3, 5});
            int s = c.g.slice_cols(x, 1, 4);
            c.loss = c.g.sum_all(c.g.mul(s, s));
            c.leaf = x;
            c.leaves = {{x, random_array({3, 5}, rng)}};
            cases.push_back(std::move(c));
        }
        {
            Case c{"scatter_cumsum"};
            auto sp = std::make_shared<ScatterSpec>();
            sp->out_rows = 7;
            sp->row = {1, 3, 6};
            int x = c.g.input({3, 4});
            int sc = c.g.scatter_rows(x, sp);
            int cs = c.g.cumsum_exclusive(sc);
            c.loss = c.g.sum_all(c.g.mul(cs, cs));
            c.leaf = x;
            c.leaves = {{x, random_array({3, 4}, rng)}};
            cases.push_back(std::move(c));
        }

        for (auto& c : cases) {
            const double err = c.g.finite_difference_check(c.leaves, c.leaf, c.loss, 1e-5);
            EXPECT_LT(err, 1e-5) << c.name << " seed " << seed;
        }
    }
}

// backward(a*f + b*g) == a*backward(f) + b*backward(g), entrywise to 1e-12.
TEST(Backward, Linearity) {
    Rng rng(42);
    const double a = 1.7, b = -0.6;
    auto build = [&](double ca, double cb, Array& gout) {
        Graph g;
        int x = g.input({4});
        int f = g.sum_all(g.tanh(g.mul(x, x)));
        int h = g.sum_all(g.sigmoid(x));
        int loss = g.add(g.mul_scalar(f, ca), g.mul_scalar(h, cb));
        Workspace ws;
        g.forward(ws, {{x, Array({4}, {0.3, -0.8, 1.2, 0.05})}});
        gout = g.backward(ws, loss).at(x);
    };
    Array gf, gg, gcombo;
    build(1.0, 0.0, gf);
    build(0.0, 1.0, gg);
    build(a, b, gcombo);
    for (int i = 0; i < 4; ++i) EXPECT_NEAR(gcombo[i], a * gf[i] + b * gg[i], 1e-12);
}

TEST(Backward, Deterministic) {
    Rng rng(5);
    Graph g;
    int x = g.input({16});
    int w = g.constant(random_array({16}, rng));
    int loss = g.mean_all(g.exp(g.mul(g.tanh(x), w)));
    std::map<int, Array> leaves{{x, random_array({16}, rng)}};
    Workspace ws1, ws2;
    g.forward(ws1, leaves);
    auto g1 = g.backward(ws1, loss);
    g.forward(ws2, leaves);
    auto g2 = g.backward(ws2, loss);
    for (int64_t i = 0; i < 16; ++i) {
        EXPECT_EQ(g1.at(x)[i], g2.at(x)[i]);  // bit-identical
    }
}

TEST(Graph, ClampZeroGradientOutsideInterval) {
    Graph g;
    int x = g.input({3});
    int loss = g.sum_all(g.clamp(x, -1.0, 1.0));
    Workspace ws;
    g.forward(ws, {{x, Array({3}, {-2.0, 0.0, 2.0})}});
    auto grads = g.backward(ws, loss);
    EXPECT_EQ(grads.at(x)[0], 0.0);
    EXPECT_EQ(grads.at(x)[1], 1.0);
    EXPECT_EQ(grads.at(x)[2], 0.0);
}

TEST(Graph, CumsumExclusiveValues) {
    Graph g;
    int x = g.input({1, 4});
    int y = g.cumsum_exclusive(x);
    auto vals = g.evaluate({{x, Array({1, 4}, {1.0, 2.0, 3.0, 4.0})}});
    const Array& out = vals.at(y);
    EXPECT_DOUBLE_EQ(out[0], 0.0);
    EXPECT_DOUBLE_EQ(out[1], 1.0);
    EXPECT_DOUBLE_EQ(out[2], 3.0);
    EXPECT_DOUBLE_EQ(out[3], 6.0);
}

TEST(Graph, MissingLeafValueRejected) {
    Graph g;
    int x = g.input({2});
    (void)g.sum_all(x);
    Workspace ws;
    EXPECT_THROW(g.forward(ws, {}), std::invalid_argument);
    EXPECT_THROW(g.forward(ws, {{x, Array({3})}}), std::invalid_argument);
}
