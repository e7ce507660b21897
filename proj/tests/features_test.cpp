// Copyright (c) 2026, The linmerge Authors
// SPDX-License-Identifier: Apache-2.0
//

#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace linmerge;
using linmerge::testing::max_abs_diff;
using linmerge::testing::tiny_config;
using linmerge::testing::tiny_spec;

namespace {

struct Setup {
    Fixture fx;
    BoundModel base;
    DecompositionPlan plan;
    FeatureStore store;
};

Setup make_setup(Granularity level, int tasks = 2, std::size_t n = 3, std::uint64_t seed = 4) {
    auto fx = make_fixture(tiny_spec(tasks, 0.5, seed));
    auto base = bind_weights(fx.base, tiny_config());
    auto plan = plan_decomposition(tiny_config(), level);
    auto store = collect_base_features(base, fx.datasets, plan, n, seed);
    return {std::move(fx), std::move(base), std::move(plan), std::move(store)};
}

} // namespace

TEST(CollectBaseFeatures, SamplesRequestedCount) {
    const auto s = make_setup(Granularity::AttnMlp, 2, 4);
    ASSERT_EQ(s.store.tasks.size(), 2u);
    for (const auto & tf : s.store.tasks) {
        EXPECT_EQ(tf.sequences.size(), 4u);
        for (const auto & [tap, mats] : tf.inputs) EXPECT_EQ(mats.size(), 4u) << tap.str();
    }
}

TEST(CollectBaseFeatures, LayerPlanTaps) {
    auto fx = make_fixture(tiny_spec(1));
    const auto base = bind_weights(fx.base, tiny_config());
    const auto plan = plan_decomposition(tiny_config(), Granularity::Layer);
    const auto store = collect_base_features(base, fx.datasets, plan, 1, 0);
    std::set<TapId> taps;
    for (const auto & [tap, m] : store.tasks[0].inputs) taps.insert(tap);
    // The lm_head group reads the last residual stream (layer_out[1]), see the decomposer.
    EXPECT_EQ(taps, (std::set<TapId>{TapId::tokens(), TapId::at(TapKind::LayerIn, 0), TapId::at(TapKind::LayerIn, 1),
                                     TapId::at(TapKind::LayerOut, 1)}));
    EXPECT_EQ(store.tasks[0].sequences.size(), 1u);
}

TEST(CollectBaseFeatures, DeterministicPerSeed) {
    const auto a = make_setup(Granularity::HeadMlp, 2, 3, 9);
    const auto b = make_setup(Granularity::HeadMlp, 2, 3, 9);
    for (std::size_t t = 0; t < 2; ++t) {
        EXPECT_EQ(a.store.tasks[t].sequences, b.store.tasks[t].sequences);
        EXPECT_EQ(a.store.tasks[t].inputs, b.store.tasks[t].inputs);
        EXPECT_EQ(a.store.tasks[t].base_outputs, b.store.tasks[t].base_outputs);
    }
}

TEST(CollectBaseFeatures, TooFewSequences) {
    auto fx = make_fixture(tiny_spec(1));
    const auto base = bind_weights(fx.base, tiny_config());
    const auto plan = plan_decomposition(tiny_config(), Granularity::Layer);
    EXPECT_THROW(collect_base_features(base, fx.datasets, plan, 7, 0), SampleError);
    EXPECT_THROW(collect_base_features(base, fx.datasets, plan, 0, 0), SampleError);
}

TEST(ApplyGroup, BaseParamsReproduceStoredOutputs) {
    for (auto level : {Granularity::Model, Granularity::Layer, Granularity::AttnMlp, Granularity::HeadMlp}) {
        const auto s = make_setup(level);
        const WeightView view(s.base.weights);
        for (const auto & g : s.plan.groups)
            for (std::size_t t = 0; t < 2; ++t)
                EXPECT_EQ(apply_group(s.base.config, g, view, s.store.inputs(g, t)), s.store.base_outputs(g, t)) << g.id;
    }
}

TEST(ApplyGroup, LayerGroupMatchesForwardPass) {
    const auto s = make_setup(Granularity::Layer);
    const auto & seq = s.store.tasks[0].sequences[0];
    const auto tr = forward_with_taps(s.base, seq, all_taps(tiny_config()));
    const auto & g = s.plan.group("layer.1");
    EXPECT_LE(max_abs_diff(s.store.base_outputs(g, 0)[0], tr.taps.at(TapId::at(TapKind::LayerOut, 1))), 1e-12);
    EXPECT_LE(max_abs_diff(s.store.base_outputs(s.plan.group("lm_head"), 0)[0], tr.logits), 1e-12);
}

TEST(ApplyGroup, HeadOutputsSumToAttentionBranch) {
    const auto heads = make_setup(Granularity::HeadMlp);
    const auto attn = make_setup(Granularity::AttnMlp);
    for (int l = 0; l < 2; ++l) {
        const auto & ref = attn.store.base_outputs(attn.plan.group("attn." + std::to_string(l)), 0);
        for (std::size_t s = 0; s < ref.size(); ++s) {
            Matrix sum(ref[s].rows, ref[s].cols);
            for (int h = 0; h < 2; ++h)
                sum = kernels::add(sum, heads.store.base_outputs(
                                            heads.plan.group("head." + std::to_string(l) + "." + std::to_string(h)), 0)[s]);
            EXPECT_LE(max_abs_diff(sum, ref[s]), 1e-5);
        }
    }
}

TEST(ApplyGroup, ZeroDownProjGivesZeroMlpOutput) {
    const auto s = make_setup(Granularity::AttnMlp);
    Weights over;
    over.tensors[names::layer(0, "mlp.down_proj")] = std::vector<double>(8 * 16, 0.0);
    const auto outs = apply_group(s.base.config, s.plan.group("mlp.0"), WeightView(s.base.weights, &over),
                                  s.store.inputs(s.plan.group("mlp.0"), 0));
    for (const auto & m : outs)
        for (double v : m.data) EXPECT_EQ(v, 0.0);
}

TEST(ApplyGroup, WidthMismatch) {
    const auto s = make_setup(Granularity::AttnMlp);
    std::vector<Matrix> bad{Matrix(3, 5)};
    EXPECT_THROW(apply_group(s.base.config, s.plan.group("mlp.0"), WeightView(s.base.weights), bad), InputError);
}

TEST(DeltaOutputs, IdenticalFineTuneGivesZeroDelta) {
    const auto s = make_setup(Granularity::AttnMlp);
    std::vector<TensorArchive> fts{s.fx.base, s.fx.fine_tuned[1]};
    const auto d = compute_delta_outputs(s.store, s.fx.base, fts, s.plan);
    for (const auto & [id, gd] : d.groups)
        for (const auto & per_model : gd.by_task) {
            for (double v : per_model[0].data) EXPECT_EQ(v, 0.0) << id;
        }
}

TEST(DeltaOutputs, RowCountsFollowSequenceLengths) {
    auto fx = make_fixture(tiny_spec(1));
    fx.datasets[0].sequences = {{1, 2, 3}, {4, 5, 6, 7, 8}};
    const auto base = bind_weights(fx.base, tiny_config());
    const auto plan = plan_decomposition(tiny_config(), Granularity::HeadMlp);
    const auto store = collect_base_features(base, fx.datasets, plan, 2, 0);
    const auto d = compute_delta_outputs(store, fx.base, fx.fine_tuned, plan);
    for (const auto & g : plan.groups) {
        const auto & m = d.at(g.id).by_task[0][0];
        EXPECT_EQ(m.rows, 8u) << g.id;
        EXPECT_EQ(m.cols, g.output_width(tiny_config())) << g.id;
    }
}

TEST(DeltaOutputs, EmbedDeltaIsGatheredTaskVector) {
    const auto s = make_setup(Granularity::Layer);
    const auto d = compute_delta_outputs(s.store, s.fx.base, s.fx.fine_tuned, s.plan);
    for (std::size_t t = 0; t < 2; ++t) {
        const auto toks = vstack(s.store.tasks[t].inputs.at(TapId::tokens()));
        for (std::size_t m = 0; m < 2; ++m) {
            const auto & delta = d.at("embed").by_task[t][m];
            for (std::size_t r = 0; r < toks.rows; ++r) {
                const auto tok = static_cast<std::size_t>(toks(r, 0));
                for (std::size_t e = 0; e < 8; ++e) {
                    const double expect = static_cast<double>(s.fx.fine_tuned[m].at("embed").data[tok * 8 + e]) -
                                          static_cast<double>(s.fx.base.at("embed").data[tok * 8 + e]);
                    ASSERT_EQ(delta(r, e), expect);
                }
            }
        }
    }
}

TEST(DeltaOutputs, RowCountsEqualAcrossModels) {
    const auto s = make_setup(Granularity::HeadMlp, 3);
    const auto d = compute_delta_outputs(s.store, s.fx.base, s.fx.fine_tuned, s.plan);
    for (const auto & [id, gd] : d.groups)
        for (std::size_t t = 0; t < 3; ++t) {
            ASSERT_EQ(gd.by_task[t].size(), 3u);
            for (const auto & m : gd.by_task[t]) EXPECT_EQ(m.rows, s.store.tasks[t].rows()) << id;
        }
}

TEST(DeltaOutputs, EmbedCombinationIsExactlyLinear) {
    const auto s = make_setup(Granularity::AttnMlp);
    const Weights base = widen(s.fx.base);
    std::vector<Weights> taus;
    for (const auto & ft : s.fx.fine_tuned) taus.push_back(weight_delta(widen(ft), base));
    const auto & g = s.plan.group("embed");
    const std::vector<double> alpha{0.3, -0.7};
    const Matrix combined = group_delta_rows(s.store, g, 0, base, taus, alpha);
    const Matrix d0 = group_delta_rows(s.store, g, 0, base, taus, std::vector<double>{1.0, 0.0});
    const Matrix d1 = group_delta_rows(s.store, g, 0, base, taus, std::vector<double>{0.0, 1.0});
    for (std::size_t i = 0; i < combined.data.size(); ++i)
        EXPECT_NEAR(combined.data[i], 0.3 * d0.data[i] - 0.7 * d1.data[i], 1e-5);
}

TEST(InterpolatedOutputs, EndpointsAndMidpoint) {
    const auto s = make_setup(Granularity::AttnMlp);
    const Weights base = widen(s.fx.base);
    const Weights tau = weight_delta(widen(s.fx.fine_tuned[0]), base);
    const auto & attn = s.plan.group("attn.0");
    const auto outs = interpolated_outputs(s.store, base, tau, attn, 0, std::vector<double>{0.0, 1.0});
    EXPECT_EQ(outs[0], vstack(s.store.base_outputs(attn, 0)));
    const Weights ft = widen(s.fx.fine_tuned[0]);
    EXPECT_LE(max_abs_diff(outs[1], vstack(apply_group(tiny_config(), attn, WeightView(ft), s.store.inputs(attn, 0)))),
              1e-12);

    const auto & embed = s.plan.group("embed");
    const auto lin = interpolated_outputs(s.store, base, tau, embed, 1, std::vector<double>{0.0, 0.5, 1.0});
    for (std::size_t i = 0; i < lin[1].data.size(); ++i)
        EXPECT_NEAR(lin[1].data[i], 0.5 * (lin[0].data[i] + lin[2].data[i]), 1e-12);
}

TEST(BaseInputDiscipline, InputsIndependentOfFineTunes) {
    // Stored inputs come from theta_0 only: the same store serves any set of fine-tunes.
    const auto s = make_setup(Granularity::Layer);
    auto fx2 = make_fixture(tiny_spec(2, 2.0, 4));
    const auto store2 =
        collect_base_features(bind_weights(fx2.base, tiny_config()), fx2.datasets, s.plan, 3, 4);
    EXPECT_EQ(s.store.tasks[0].inputs, store2.tasks[0].inputs);
}
