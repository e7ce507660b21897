// Copyright (c) 2026, The linmerge Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "linmerge/decomposer.hpp"
#include "linmerge/error.hpp"
#include "linmerge/matrix.hpp"
#include "linmerge/model.hpp"
#include "linmerge/random.hpp"

namespace linmerge {

/// One task's pre-tokenized dataset.
struct TaskDataset {
    std::string task;
    std::vector<Sequence> sequences;
};

/// Group inputs and base outputs for one task's sampled sequences. Inputs are
/// keyed by tap so groups that read the same point share storage.
struct TaskFeatures {
    std::string task;
    std::vector<Sequence> sequences;
    std::map<TapId, std::vector<Matrix>> inputs;
    std::map<std::string, std::vector<Matrix>> base_outputs;

    std::size_t rows() const {
        std::size_t n = 0;
        for (const auto & s : sequences) {
            n += s.size();
        }
        return n;
    }
};

struct FeatureStore {
    ModelConfig config;
    std::vector<TaskFeatures> tasks;

    const std::vector<Matrix> & inputs(const SubmoduleGroup & g, std::size_t task) const {
        return tasks.at(task).inputs.at(g.input_tap);
    }

    const std::vector<Matrix> & base_outputs(const SubmoduleGroup & g, std::size_t task) const {
        return tasks.at(task).base_outputs.at(g.id);
    }
};

/// Per group: deltas[data task][model] = flattened rows of f(x; theta_model) - f(x; theta_0)
/// for x drawn from the data task's inputs.
struct GroupDeltas {
    std::string group_id;
    std::vector<std::vector<Matrix>> by_task;

    std::size_t n_models() const { return by_task.empty() ? 0 : by_task.front().size(); }
};

struct DeltaStore {
    std::map<std::string, GroupDeltas> groups;

    const GroupDeltas & at(std::string_view id) const {
        auto it = groups.find(std::string(id));
        if (it == groups.end()) {
            throw PlanError("no deltas for group '" + std::string(id) + "'");
        }
        return it->second;
    }
};

/// theta_0 + coeffs . (theta_t - theta_0), restricted to the group's tensors, in double.
/// `taus[t]` holds theta_t - theta_0 for every tensor.
inline Weights group_parameters(const SubmoduleGroup & g, const Weights & base, std::span<const Weights> taus,
                                std::span<const double> coeffs) {
    if (coeffs.size() != taus.size()) {
        throw CoeffError("expected " + std::to_string(taus.size()) + " coefficients, got " +
                         std::to_string(coeffs.size()));
    }
    Weights out;
    for (const auto & name : g.param_names) {
        const auto b = base.at(name);
        std::vector<double> v(b.begin(), b.end());
        for (std::size_t t = 0; t < taus.size(); ++t) {
            if (coeffs[t] == 0.0) {
                continue;
            }
            const auto tau = taus[t].at(name);
            for (std::size_t i = 0; i < v.size(); ++i) {
                v[i] += coeffs[t] * tau[i];
            }
        }
        out.tensors.emplace(name, std::move(v));
    }
    return out;
}

/// theta_t - theta_0 in double for every tensor.
inline Weights weight_delta(const Weights & fine_tuned, const Weights & base) {
    Weights out;
    for (const auto & [name, b] : base.tensors) {
        const auto f = fine_tuned.at(name);
        if (f.size() != b.size()) {
            throw CompatError("tensor '" + name + "' differs in size");
        }
        std::vector<double> d(b.size());
        for (std::size_t i = 0; i < d.size(); ++i) {
            d[i] = f[i] - b[i];
        }
        out.tensors.emplace(name, std::move(d));
    }
    return out;
}

namespace detail {

inline std::vector<Token> tokens_of(const Matrix & m) {
    std::vector<Token> out(m.rows);
    for (std::size_t r = 0; r < m.rows; ++r) {
        out[r] = static_cast<Token>(m(r, 0));
    }
    return out;
}

inline std::size_t tap_width(const TapId & tap, const ModelConfig & c) {
    switch (tap.kind) {
    case TapKind::Tokens: return 1;
    case TapKind::Logits: return static_cast<std::size_t>(c.vocab_size);
    default: return static_cast<std::size_t>(c.d_model);
    }
}

} // namespace detail

/// Evaluates a group's function on fixed per-sequence inputs with parameters taken
/// from `params` (group tensors overridden, everything else at theta_0).
inline std::vector<Matrix> apply_group(const ModelConfig & c, const SubmoduleGroup & g, const WeightView & params,
                                       std::span<const Matrix> inputs) {
    const std::size_t width = detail::tap_width(g.input_tap, c);
    std::vector<Matrix> out;
    out.reserve(inputs.size());
    for (const auto & x : inputs) {
        if (x.cols != width) {
            throw InputError("group '" + g.id + "' expects width " + std::to_string(width) + ", got " +
                             std::to_string(x.cols));
        }
        switch (g.output_kind) {
        case OutputKind::LayerOut: {
            auto a = kernels::add(x, kernels::attention_branch(x, params, c, g.layer).out);
            out.push_back(kernels::add(a, kernels::mlp_branch(a, params, c, g.layer)));
            break;
        }
        case OutputKind::AttnBranch: out.push_back(kernels::attention_branch(x, params, c, g.layer).out); break;
        case OutputKind::HeadBranch: {
            const int h = *g.head_index;
            const Matrix normed = kernels::rmsnorm(x, params(names::layer(g.layer, "norm1")), c.norm_eps);
            const Matrix ho = kernels::attention_head(normed, params(names::layer(g.layer, "attn.q_proj")),
                                                      params(names::layer(g.layer, "attn.k_proj")),
                                                      params(names::layer(g.layer, "attn.v_proj")), c, h);
            out.push_back(kernels::project_head(ho, params(names::layer(g.layer, "attn.o_proj")), c, h));
            break;
        }
        case OutputKind::MlpBranch: out.push_back(kernels::mlp_branch(x, params, c, g.layer)); break;
        case OutputKind::EmbedRows: {
            const auto toks = detail::tokens_of(x);
            check_tokens(toks, c);
            out.push_back(kernels::embed_rows(toks, params(names::embed), c));
            break;
        }
        case OutputKind::Logits: out.push_back(kernels::unembed(x, params, c, nullptr)); break;
        case OutputKind::ModelLogits: out.push_back(forward_view(c, params, detail::tokens_of(x), {}).logits); break;
        }
    }
    return out;
}

/// Seeded draw of `sample_n` sequences per task, one forward pass of theta_0 per
/// sequence, and every group's input tap and base output recorded.
inline FeatureStore collect_base_features(const BoundModel & base, std::span<const TaskDataset> datasets,
                                          const DecompositionPlan & plan, std::size_t sample_n, std::uint64_t seed) {
    if (sample_n == 0) {
        throw SampleError("sample count must be positive");
    }
    TapSpec taps;
    for (const auto & g : plan.groups) {
        taps.insert(g.input_tap);
    }
    FeatureStore store{base.config, {}};
    for (std::size_t t = 0; t < datasets.size(); ++t) {
        const auto & ds = datasets[t];
        if (ds.sequences.size() < sample_n) {
            throw SampleError("task '" + ds.task + "' has " + std::to_string(ds.sequences.size()) +
                              " sequences, need " + std::to_string(sample_n));
        }
        Rng rng(derive_seed(seed, t));
        TaskFeatures tf;
        tf.task = ds.task;
        for (auto idx : sample_without_replacement(ds.sequences.size(), sample_n, rng)) {
            tf.sequences.push_back(ds.sequences[idx]);
        }
        for (const auto & seq : tf.sequences) {
            auto trace = forward_with_taps(base, seq, taps);
            for (const auto & tap : taps) {
                tf.inputs[tap].push_back(std::move(trace.taps.at(tap)));
            }
        }
        const WeightView view(base.weights);
        for (const auto & g : plan.groups) {
            tf.base_outputs[g.id] = apply_group(base.config, g, view, tf.inputs.at(g.input_tap));
        }
        store.tasks.push_back(std::move(tf));
    }
    return store;
}

/// Group outputs at theta_0 + coeffs . tau on one task's stored inputs, flattened
/// sequence-major, minus the stored base outputs.
inline Matrix group_delta_rows(const FeatureStore & store, const SubmoduleGroup & g, std::size_t task,
                               const Weights & base, std::span<const Weights> taus, std::span<const double> coeffs) {
    const Weights params = group_parameters(g, base, taus, coeffs);
    const auto outs = apply_group(store.config, g, WeightView(base, &params), store.inputs(g, task));
    return subtract(vstack(outs), vstack(store.base_outputs(g, task)));
}

/// Delta rows for every (group, data task, model). Inputs always come from theta_0's
/// forward pass; fine-tuned models only ever see them through their own group.
inline DeltaStore compute_delta_outputs(const FeatureStore & store, const Weights & base,
                                        std::span<const Weights> taus, const DecompositionPlan & plan) {
    DeltaStore out;
    std::vector<double> onehot(taus.size(), 0.0);
    for (const auto & g : plan.groups) {
        GroupDeltas gd{g.id, {}};
        for (std::size_t t = 0; t < store.tasks.size(); ++t) {
            std::vector<Matrix> per_model;
            for (std::size_t m = 0; m < taus.size(); ++m) {
                std::fill(onehot.begin(), onehot.end(), 0.0);
                onehot[m] = 1.0;
                per_model.push_back(group_delta_rows(store, g, t, base, taus, onehot));
            }
            gd.by_task.push_back(std::move(per_model));
        }
        out.groups.emplace(g.id, std::move(gd));
    }
    return out;
}

inline DeltaStore compute_delta_outputs(const FeatureStore & store, const TensorArchive & base,
                                        std::span<const TensorArchive> fine_tuned, const DecompositionPlan & plan) {
    const Weights b = widen(base);
    std::vector<Weights> taus;
    for (const auto & ft : fine_tuned) {
        require_compatible(base, ft, "compute_delta_outputs");
        taus.push_back(weight_delta(widen(ft), b));
    }
    return compute_delta_outputs(store, b, taus, plan);
}

/// Group outputs at theta_0 + c * tau for each c, on one task's stored inputs
/// (per-sequence matrices, flattened).
inline std::vector<Matrix> interpolated_outputs(const FeatureStore & store, const Weights & base, const Weights & tau,
                                                const SubmoduleGroup & g, std::size_t task,
                                                std::span<const double> coeffs) {
    std::vector<Matrix> out;
    const std::span<const Weights> taus(&tau, 1);
    for (double c : coeffs) {
        const double coeff[1] = {c};
        const Weights params = group_parameters(g, base, taus, coeff);
        out.push_back(vstack(apply_group(store.config, g, WeightView(base, &params), store.inputs(g, task))));
    }
    return out;
}

} // namespace linmerge
