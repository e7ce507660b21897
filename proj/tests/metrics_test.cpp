// Copyright (c) 2026, The linmerge Authors
// SPDX-License-Identifier: Apache-2.0
//

#include <cmath>

#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace linmerge;
using linmerge::testing::tiny_config;
using linmerge::testing::tiny_spec;

namespace {

Matrix column(std::vector<double> v) {
    Matrix m(v.size(), 1);
    m.data = std::move(v);
    return m;
}

Matrix random_matrix(std::size_t rows, std::size_t cols, Rng & rng) {
    Matrix m(rows, cols);
    for (auto & v : m.data) v = rng.normal();
    return m;
}

Matrix scaled(const Matrix & m, double c) {
    Matrix out = m;
    for (auto & v : out.data) v *= c;
    return out;
}

/// Hand enumeration of the score for scalar samples.
double reference_score(const std::vector<double> & f) {
    const double n = static_cast<double>(f.size() - 1);
    const double denom = std::abs(f.back() - f.front());
    double s = 0;
    for (std::size_t i = 0; i < f.size(); ++i)
        for (std::size_t j = 0; j < f.size(); ++j) {
            const double r = std::abs(f[i] - f[j]) / denom - std::abs(double(i) - double(j)) / n;
            s += r * r;
        }
    return s;
}

} // namespace

TEST(NonLinearityScore, ScalarSquareToy) {
    // f(theta) = theta^2 at theta = 0, 0.5, 1.
    const std::vector<Matrix> outs{column({0.0}), column({0.25}), column({1.0})};
    const auto r = non_linearity_score(outs);
    EXPECT_NEAR(r.mean, 0.25, 1e-12);
    EXPECT_NEAR(r.mean, reference_score({0.0, 0.25, 1.0}), 1e-15);
    EXPECT_EQ(r.samples, 1u);
}

TEST(NonLinearityScore, LinearPathScoresZero) {
    std::vector<Matrix> outs;
    for (int k = 0; k <= 10; ++k) outs.push_back(column({1.0 + 0.3 * k, -2.0 + 0.1 * k}));
    EXPECT_LE(non_linearity_score(outs).mean, 1e-20);
}

TEST(NonLinearityScore, MatchesEnumerationOnRandomPaths) {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> f(6);
        for (auto & v : f) v = rng.normal();
        std::vector<Matrix> outs;
        for (double v : f) outs.push_back(column({v}));
        EXPECT_NEAR(non_linearity_score(outs).mean, reference_score(f), 1e-12);
    }
}

TEST(NonLinearityScore, ScaleFreeAndNonNegative) {
    Rng rng(4);
    std::vector<Matrix> outs, big;
    for (int k = 0; k <= 10; ++k) {
        outs.push_back(random_matrix(5, 3, rng));
        big.push_back(scaled(outs.back(), 37.5));
    }
    const double a = non_linearity_score(outs).mean;
    EXPECT_GE(a, 0.0);
    EXPECT_NEAR(non_linearity_score(big).mean, a, 1e-10);
}

TEST(NonLinearityScore, DegenerateRowsSkipped) {
    const std::vector<Matrix> outs{column({0.0, 1.0}), column({0.5, 1.0}), column({0.0, 1.0})};
    EXPECT_THROW(non_linearity_score(outs), DegenerateError);
    const std::vector<Matrix> mixed{column({0.0, 1.0}), column({0.25, 1.0}), column({1.0, 1.0})};
    const auto r = non_linearity_score(mixed);
    EXPECT_EQ(r.degenerate, 1u);
    EXPECT_EQ(r.samples, 1u);
    EXPECT_NEAR(r.mean, 0.25, 1e-12);
    const std::vector<Matrix> two{column({0.0}), column({1.0})};
    EXPECT_THROW(non_linearity_score(two), InputError);
}

TEST(NonLinearityScore, EmbedGroupIsLinear) {
    const auto fx = make_fixture(tiny_spec());
    const auto plan = plan_decomposition(tiny_config(), Granularity::Layer);
    const auto store = collect_base_features(bind_weights(fx.base, tiny_config()), fx.datasets, plan, 3, 0);
    const Weights base = widen(fx.base);
    const Weights tau = weight_delta(widen(fx.fine_tuned[0]), base);
    const auto r = non_linearity_score(store, base, tau, plan.group("embed"), 0, 10);
    EXPECT_LE(r.mean, 1e-10);
    EXPECT_GT(non_linearity_score(store, base, tau, plan.group("layer.0"), 0, 10).mean, 1e-6);
    EXPECT_THROW(non_linearity_score(store, base, tau, plan.group("embed"), 0, 1), InputError);
}

TEST(CosineMerge, Examples) {
    Rng rng(5);
    const std::vector<Matrix> d{random_matrix(6, 4, rng)};
    const std::vector<double> one{1.0};
    EXPECT_NEAR(cosine_merge(d, one, d[0]).mean, 1.0, 1e-15);
    EXPECT_NEAR(cosine_merge(d, one, scaled(d[0], 2.0)).mean, 1.0, 1e-15);

    Matrix a(1, 2), b(1, 2);
    a.data = {1.0, 0.0};
    b.data = {0.0, 3.0};
    const std::vector<Matrix> da{a};
    EXPECT_NEAR(cosine_merge(da, one, b).mean, 0.0, 1e-15);
    EXPECT_THROW(cosine_merge(da, one, Matrix(1, 2)), DegenerateError);
}

TEST(ProjectionDistance, Examples) {
    Rng rng(6);
    const std::vector<Matrix> d{random_matrix(6, 4, rng)};
    const std::vector<double> one{1.0};
    EXPECT_EQ(projection_distance(d, one, d[0]).value, 0.0);
    EXPECT_NEAR(projection_distance(d, one, scaled(d[0], 2.0)).value, 1.0, 1e-14);
    EXPECT_THROW(projection_distance(d, one, Matrix(6, 4)), DegenerateError);
}

TEST(MergeMetrics, PermutationSymmetry) {
    Rng rng(7);
    const std::vector<Matrix> d{random_matrix(5, 3, rng), random_matrix(5, 3, rng), random_matrix(5, 3, rng)};
    const Matrix merged = random_matrix(5, 3, rng);
    const std::vector<double> alpha{0.3, 0.5, 0.7};
    const std::vector<Matrix> dp{d[2], d[0], d[1]};
    const std::vector<double> ap{0.7, 0.3, 0.5};
    const auto c = cosine_merge(d, alpha, merged);
    EXPECT_NEAR(cosine_merge(dp, ap, merged).mean, c.mean, 1e-12);
    EXPECT_GE(c.mean, -1.0);
    EXPECT_LE(c.mean, 1.0);
    const auto p = projection_distance(d, alpha, merged);
    EXPECT_NEAR(projection_distance(dp, ap, merged).value, p.value, 1e-12);
    EXPECT_GE(p.value, 0.0);
}

TEST(CosineBase, Examples) {
    Matrix a(2, 2), b(2, 2);
    a.data = {1, 0, 0, 2};
    b.data = {0, 5, 3, 0};
    EXPECT_NEAR(cosine_base(std::vector<Matrix>{a, b}).value, 0.0, 1e-15);
    EXPECT_NEAR(cosine_base(std::vector<Matrix>{a, a}).value, 1.0, 1e-15);
    EXPECT_NEAR(cosine_base(std::vector<Matrix>{a, scaled(a, -1.0)}).value, -1.0, 1e-15);
    // Three models, pairs (a,a)=1, (a,b)=0, (a,b)=0: unordered-pair mean 1/3.
    EXPECT_NEAR(cosine_base(std::vector<Matrix>{a, a, b}).value, 1.0 / 3.0, 1e-15);
    EXPECT_THROW(cosine_base(std::vector<Matrix>{a}), InputError);
}

TEST(AlphaGrid, Sizes) {
    const auto g2 = AlphaGrid::default_for(2);
    EXPECT_EQ(g2.alphas.size(), 25u);
    EXPECT_EQ(g2.alphas.front(), (std::vector<double>{0.2, 0.2}));
    EXPECT_EQ(g2.alphas[1], (std::vector<double>{0.2, 0.4}));
    EXPECT_EQ(g2.alphas.back(), (std::vector<double>{1.0, 1.0}));
    const auto g3 = AlphaGrid::default_for(3);
    EXPECT_EQ(g3.alphas.size(), 27u);
    for (const auto & a : g3.alphas) EXPECT_EQ(a.size(), 3u);
    EXPECT_EQ(AlphaGrid::default_for(1).alphas.size(), 5u);
}

namespace {

std::size_t count_metric(const std::vector<LinearityRecord> & recs, const std::string & m) {
    return static_cast<std::size_t>(std::count_if(recs.begin(), recs.end(), [&](const auto & r) { return r.metric == m; }));
}

struct Sweep {
    FeatureStore store;
    DecompositionPlan plan;
    DeltaStore deltas;
    Weights base;
    std::vector<Weights> taus;
};

Sweep make_sweep(int tasks) {
    const auto fx = make_fixture(tiny_spec(tasks));
    Sweep s;
    s.plan = plan_decomposition(tiny_config(), Granularity::AttnMlp);
    s.store = collect_base_features(bind_weights(fx.base, tiny_config()), fx.datasets, s.plan, 2, 0);
    s.deltas = compute_delta_outputs(s.store, fx.base, fx.fine_tuned, s.plan);
    s.base = widen(fx.base);
    for (const auto & ft : fx.fine_tuned) s.taus.push_back(weight_delta(widen(ft), s.base));
    return s;
}

} // namespace

TEST(MetricSweep, RecordCounts) {
    for (int tasks : {2, 3}) {
        const auto s = make_sweep(tasks);
        const auto & g = s.plan.group("mlp.0");
        const auto recs = metric_sweep(s.store, g, s.base, s.taus, s.deltas.at(g.id), AlphaGrid::default_for(tasks));
        const std::size_t expected = tasks == 2 ? 25u : 27u;
        EXPECT_EQ(count_metric(recs, "cosine_merge"), expected);
        EXPECT_EQ(count_metric(recs, "projection_distance"), expected);
        EXPECT_EQ(count_metric(recs, "cosine_merge_grid_mean"), 1u);
        for (const auto & r : recs) {
            ASSERT_TRUE(r.value.has_value()) << r.metric;
            EXPECT_TRUE(std::isfinite(*r.value));
        }
    }
}

TEST(MetricSweep, EmbedHitsIdealValues) {
    const auto s = make_sweep(2);
    const auto & g = s.plan.group("embed");
    for (const auto & r : metric_sweep(s.store, g, s.base, s.taus, s.deltas.at(g.id), AlphaGrid::default_for(2))) {
        if (r.metric.starts_with("cosine_merge")) {
            EXPECT_GE(*r.value, 1.0 - 1e-6);
        }
        if (r.metric.starts_with("projection_distance")) {
            EXPECT_LE(*r.value, 1e-6);
        }
    }
}

TEST(MetricSweep, ZeroAlphaSurfacesDegenerate) {
    const auto s = make_sweep(2);
    const auto & g = s.plan.group("attn.1");
    AlphaGrid grid{{{0.0, 0.0}}};
    const auto recs = metric_sweep(s.store, g, s.base, s.taus, s.deltas.at(g.id), grid);
    ASSERT_EQ(recs.size(), 4u);
    for (const auto & r : recs) {
        EXPECT_FALSE(r.value.has_value());
        EXPECT_TRUE(r.aux.contains("error"));
    }
    EXPECT_THROW(metric_sweep(s.store, g, s.base, s.taus, s.deltas.at(g.id), AlphaGrid{}), InputError);
}

TEST(RatioMatrixCsv, Shape) {
    Matrix m(3, 3);
    m(1, 2) = 0.5;
    const auto csv = ratio_matrix_csv(m);
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
    EXPECT_NE(csv.find("1,0,0,0.5"), std::string::npos);
}
