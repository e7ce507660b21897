// Copyright (c) 2026, The linmerge Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <span>
#include <string>
#include <vector>

#include "linmerge/decomposer.hpp"
#include "linmerge/error.hpp"
#include "linmerge/features.hpp"
#include "linmerge/random.hpp"
#include "linmerge/solver.hpp"
#include "linmerge/tensor_archive.hpp"

namespace linmerge {

enum class MergeMethod { WeightAverage, TaskArithmetic, Dare, LinearSolve };

inline std::string to_string(MergeMethod m) {
    switch (m) {
    case MergeMethod::WeightAverage: return "weight_avg";
    case MergeMethod::TaskArithmetic: return "task_arithmetic";
    case MergeMethod::Dare: return "dare";
    case MergeMethod::LinearSolve: return "linear_solve";
    }
    return "?";
}

inline MergeMethod parse_method(std::string_view s) {
    if (s == "weight_avg") return MergeMethod::WeightAverage;
    if (s == "task_arithmetic") return MergeMethod::TaskArithmetic;
    if (s == "dare") return MergeMethod::Dare;
    if (s == "linear_solve") return MergeMethod::LinearSolve;
    throw ConfigError("unknown merge method '" + std::string(s) + "'");
}

namespace detail {

inline void require_nonempty(std::span<const TensorArchive> fine_tuned) {
    if (fine_tuned.empty()) {
        throw InputError("need at least one fine-tuned archive");
    }
}

inline void require_all_compatible(const TensorArchive & base, std::span<const TensorArchive> fine_tuned,
                                   std::string_view what) {
    for (const auto & ft : fine_tuned) {
        require_compatible(base, ft, what);
    }
}

/// base + sum_t coeffs[t] * tau_t(i), where tau_t(i) = transform(t, theta_t[i] - base[i]).
/// Differences stay in double, so no task vector is rounded to f32 on the way.
template <class Transform>
float combine_fine_tuned(float base, std::span<const float * const> fts, std::span<const double> coeffs, std::size_t i,
                         Transform && transform) {
    double acc = base;
    for (std::size_t t = 0; t < fts.size(); ++t) {
        acc += coeffs[t] * transform(t, static_cast<double>(fts[t][i]) - static_cast<double>(base));
    }
    return static_cast<float>(acc);
}

inline std::vector<const float *> tensor_ptrs(std::span<const TensorArchive> archives, const std::string & name) {
    std::vector<const float *> ptrs;
    for (const auto & a : archives) {
        ptrs.push_back(a.at(name).data.data());
    }
    return ptrs;
}

inline constexpr auto kIdentity = [](std::size_t, double d) { return d; };

inline void stamp(TensorArchive & a, MergeMethod m) {
    a.meta["kind"] = "merged";
    a.meta["method"] = to_string(m);
}

} // namespace detail

/// Elementwise mean of the fine-tuned archives; base contributes only metadata.
inline TensorArchive merge_weight_average(const TensorArchive & base, std::span<const TensorArchive> fine_tuned) {
    detail::require_nonempty(fine_tuned);
    for (const auto & ft : fine_tuned) {
        require_compatible(base, ft, "weight_avg");
    }
    TensorArchive out;
    out.meta = base.meta;
    const double inv = 1.0 / static_cast<double>(fine_tuned.size());
    for (const auto & [name, b] : base.tensors) {
        NamedTensor t{name, b.shape, std::vector<float>(b.data.size())};
        for (std::size_t i = 0; i < t.data.size(); ++i) {
            double acc = 0.0;
            for (const auto & ft : fine_tuned) {
                acc += ft.at(name).data[i];
            }
            t.data[i] = static_cast<float>(acc * inv);
        }
        out.tensors.emplace(name, std::move(t));
    }
    detail::stamp(out, MergeMethod::WeightAverage);
    return out;
}

/// theta_0 + alpha * sum_t tau_t.
inline TensorArchive merge_task_arithmetic(const TensorArchive & base, std::span<const TensorArchive> fine_tuned,
                                           double alpha) {
    detail::require_nonempty(fine_tuned);
    detail::require_all_compatible(base, fine_tuned, "task_arithmetic");
    const std::vector<double> coeffs(fine_tuned.size(), alpha);
    TensorArchive out = base;
    for (auto & [name, t] : out.tensors) {
        const auto ptrs = detail::tensor_ptrs(fine_tuned, name);
        const auto & b = base.at(name).data;
        for (std::size_t i = 0; i < t.data.size(); ++i) {
            t.data[i] = detail::combine_fine_tuned(b[i], ptrs, coeffs, i, detail::kIdentity);
        }
    }
    detail::stamp(out, MergeMethod::TaskArithmetic);
    return out;
}

/// Drops each task-vector entry with probability drop_p and rescales survivors by
/// 1 / (1 - drop_p). Task t draws from its own seeded stream, tensors in name order.
inline TensorArchive dare_drop(const TensorArchive & tau, double drop_p, std::uint64_t seed) {
    if (!(drop_p >= 0.0 && drop_p < 1.0)) {
        throw ParamError("drop_p must lie in [0, 1), got " + std::to_string(drop_p));
    }
    TensorArchive out = tau;
    Rng rng(seed);
    const double keep_scale = 1.0 / (1.0 - drop_p);
    for (auto & [name, t] : out.tensors) {
        for (auto & v : t.data) {
            const bool keep = rng.uniform() >= drop_p;
            v = keep ? static_cast<float>(static_cast<double>(v) * keep_scale) : 0.0f;
        }
    }
    return out;
}

/// Task arithmetic on DARE-dropped task vectors. Task t draws from stream
/// derive_seed(seed, t) in the same order as dare_drop, so the two agree.
inline TensorArchive merge_dare(const TensorArchive & base, std::span<const TensorArchive> fine_tuned, double alpha,
                                double drop_p, std::uint64_t seed) {
    if (!(drop_p >= 0.0 && drop_p < 1.0)) {
        throw ParamError("drop_p must lie in [0, 1), got " + std::to_string(drop_p));
    }
    detail::require_nonempty(fine_tuned);
    detail::require_all_compatible(base, fine_tuned, "dare");
    std::vector<Rng> rngs;
    for (std::size_t t = 0; t < fine_tuned.size(); ++t) {
        rngs.emplace_back(derive_seed(seed, t));
    }
    const double keep_scale = 1.0 / (1.0 - drop_p);
    const auto dropped = [&](std::size_t t, double d) { return rngs[t].uniform() >= drop_p ? d * keep_scale : 0.0; };
    const std::vector<double> coeffs(fine_tuned.size(), alpha);
    TensorArchive out = base;
    for (auto & [name, t] : out.tensors) {
        const auto ptrs = detail::tensor_ptrs(fine_tuned, name);
        const auto & b = base.at(name).data;
        for (std::size_t i = 0; i < t.data.size(); ++i) {
            t.data[i] = detail::combine_fine_tuned(b[i], ptrs, coeffs, i, dropped);
        }
    }
    detail::stamp(out, MergeMethod::Dare);
    return out;
}

/// Applies each group's alpha to exactly the parameter slices it owns. Every
/// element must be owned by one group.
inline TensorArchive merge_with_weights(const TensorArchive & base, std::span<const TensorArchive> fine_tuned,
                                        const DecompositionPlan & plan, const MergeWeights & weights) {
    detail::require_nonempty(fine_tuned);
    detail::require_all_compatible(base, fine_tuned, "merge_with_weights");
    TensorArchive out = base;
    std::map<std::string, std::vector<std::uint8_t>, std::less<>> touched;
    for (const auto & [name, t] : base.tensors) {
        touched[name].assign(t.data.size(), 0);
    }
    for (const auto & g : plan.groups) {
        const auto & alpha = weights.at(g.id).alpha;
        if (alpha.size() != fine_tuned.size()) {
            throw CoeffError("group '" + g.id + "' has " + std::to_string(alpha.size()) + " weights for " +
                             std::to_string(fine_tuned.size()) + " models");
        }
        for (const auto & ps : module_parameters(plan, g.id)) {
            const auto & b = base.at(ps.tensor);
            auto & o = out.at(ps.tensor);
            auto & mark = touched.at(ps.tensor);
            const auto ptrs = detail::tensor_ptrs(fine_tuned, ps.tensor);
            for_each_element(ps, b.shape, [&](std::size_t i) {
                if (mark[i]++ != 0) {
                    throw PlanError("element " + std::to_string(i) + " of '" + ps.tensor + "' owned twice");
                }
                o.data[i] = detail::combine_fine_tuned(b.data[i], ptrs, alpha, i, detail::kIdentity);
            });
        }
    }
    for (const auto & [name, mark] : touched) {
        for (auto m : mark) {
            if (m != 1) {
                throw PlanError("tensor '" + name + "' is not fully covered by the plan");
            }
        }
    }
    detail::stamp(out, MergeMethod::LinearSolve);
    out.meta["level"] = to_string(plan.granularity);
    return out;
}

struct LinearSolveOptions {
    Granularity level = Granularity::AttnMlp;
    std::size_t samples_per_task = 30;
    std::uint64_t seed = 0;
    bool normalized = true;
    double ridge_rel = 1e-8;
};

struct LinearSolveResult {
    TensorArchive merged;
    MergeWeights weights;
};

/// Decompose, gather theta_0 features, measure per-model output deltas, solve one
/// alpha per group, then merge group by group.
inline LinearSolveResult merge_linear_solve(const TensorArchive & base, std::span<const TensorArchive> fine_tuned,
                                            std::span<const TaskDataset> datasets, const LinearSolveOptions & opt) {
    detail::require_nonempty(fine_tuned);
    if (datasets.size() != fine_tuned.size()) {
        throw InputError("need one task dataset per fine-tuned archive (" + std::to_string(datasets.size()) +
                         " vs " + std::to_string(fine_tuned.size()) + ")");
    }
    const auto config = config_from_archive(base);
    const auto model = bind_weights(base, config);
    const auto plan = plan_decomposition(config, opt.level);
    const auto store = collect_base_features(model, datasets, plan, opt.samples_per_task, opt.seed);
    const auto deltas = compute_delta_outputs(store, base, fine_tuned, plan);
    auto weights = solve_plan(plan, deltas, opt.normalized, opt.ridge_rel);
    auto merged = merge_with_weights(base, fine_tuned, plan, weights);
    return {std::move(merged), std::move(weights)};
}

} // namespace linmerge
