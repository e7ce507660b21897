// Copyright (c) 2026, The linmerge Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "linmerge/decomposer.hpp"
#include "linmerge/error.hpp"
#include "linmerge/features.hpp"
#include "linmerge/matrix.hpp"

namespace linmerge {

/// Rows whose reference norm falls below this are treated as carrying no signal.
inline constexpr double kDegenerateNorm = 1e-12;

struct LinearityRecord {
    std::string group_id;
    std::string family;
    std::string metric;
    std::optional<double> value;  ///< empty when the metric was undefined (see aux["error"])
    nlohmann::json aux = nlohmann::json::object();
};

inline nlohmann::json to_json(const LinearityRecord & r) {
    return {{"group", r.group_id},
            {"family", r.family},
            {"metric", r.metric},
            {"value", r.value ? nlohmann::json(*r.value) : nlohmann::json(nullptr)},
            {"aux", r.aux}};
}

struct AlphaGrid {
    std::vector<std::vector<double>> alphas;

    /// Every T-tuple drawn from `values` (|values|^T configurations), first task slowest.
    static AlphaGrid cartesian(const std::vector<double> & values, std::size_t n_tasks) {
        AlphaGrid g;
        std::vector<std::size_t> idx(n_tasks, 0);
        while (true) {
            std::vector<double> a(n_tasks);
            for (std::size_t t = 0; t < n_tasks; ++t) {
                a[t] = values[idx[t]];
            }
            g.alphas.push_back(std::move(a));
            std::size_t t = n_tasks;
            while (t > 0) {
                --t;
                if (++idx[t] < values.size()) {
                    break;
                }
                idx[t] = 0;
                if (t == 0) {
                    return g;
                }
            }
            if (n_tasks == 0) {
                return g;
            }
        }
    }

    /// Five-point grid for two tasks, three-point grid otherwise.
    static AlphaGrid default_for(std::size_t n_tasks) {
        if (n_tasks <= 2) {
            return cartesian({0.2, 0.4, 0.6, 0.8, 1.0}, n_tasks);
        }
        return cartesian({0.3, 0.5, 0.7}, n_tasks);
    }
};

// ---------------------------------------------------------------------------
// Non-linearity score

struct NonLinearityResult {
    double mean = 0.0;
    double stddev = 0.0;          ///< across retained samples
    std::size_t samples = 0;      ///< retained rows
    std::size_t degenerate = 0;   ///< rows with ||f_N - f_0|| below kDegenerateNorm
    Matrix mean_ratio;            ///< (N+1)x(N+1) mean of D(f_i, f_j) / D(f_N, f_0)
};

/// outputs[k] holds, row per sample, the output at theta_0 + (k/N) tau for k = 0..N.
/// Per sample: sum_{i,j} (||f_i - f_j|| / ||f_N - f_0|| - |i - j| / N)^2, then the
/// mean over non-degenerate samples.
inline NonLinearityResult non_linearity_score(std::span<const Matrix> outputs) {
    if (outputs.size() < 3) {
        throw InputError("non-linearity score needs N >= 2 (at least 3 interpolation points)");
    }
    const std::size_t n_pts = outputs.size();
    const double n = static_cast<double>(n_pts - 1);
    const std::size_t rows = outputs.front().rows;
    const std::size_t width = outputs.front().cols;
    for (const auto & m : outputs) {
        if (m.rows != rows || m.cols != width) {
            throw InputError("interpolated outputs differ in shape");
        }
    }

    auto dist = [&](std::size_t i, std::size_t j, std::size_t r) {
        const auto a = outputs[i].row(r);
        const auto b = outputs[j].row(r);
        double s = 0.0;
        for (std::size_t k = 0; k < width; ++k) {
            const double d = a[k] - b[k];
            s += d * d;
        }
        return std::sqrt(s);
    };

    NonLinearityResult res;
    res.mean_ratio = Matrix(n_pts, n_pts);
    std::vector<double> scores;
    for (std::size_t r = 0; r < rows; ++r) {
        const double denom = dist(n_pts - 1, 0, r);
        if (denom < kDegenerateNorm) {
            ++res.degenerate;
            continue;
        }
        double score = 0.0;
        for (std::size_t i = 0; i < n_pts; ++i) {
            for (std::size_t j = 0; j < n_pts; ++j) {
                const double ratio = dist(i, j, r) / denom;
                const double ideal = std::abs(static_cast<double>(i) - static_cast<double>(j)) / n;
                score += (ratio - ideal) * (ratio - ideal);
                res.mean_ratio(i, j) += ratio;
            }
        }
        scores.push_back(score);
    }
    if (scores.empty()) {
        throw DegenerateError("every sample has ||f(theta) - f(theta_0)|| = 0");
    }
    res.samples = scores.size();
    double sum = 0.0;
    for (double s : scores) {
        sum += s;
    }
    res.mean = sum / static_cast<double>(scores.size());
    double var = 0.0;
    for (double s : scores) {
        var += (s - res.mean) * (s - res.mean);
    }
    res.stddev = std::sqrt(var / static_cast<double>(scores.size()));
    for (auto & v : res.mean_ratio.data) {
        v /= static_cast<double>(scores.size());
    }
    return res;
}

/// Interpolates the group between theta_0 and theta_0 + tau in N steps on one task's
/// stored inputs and scores the result.
inline NonLinearityResult non_linearity_score(const FeatureStore & store, const Weights & base, const Weights & tau,
                                              const SubmoduleGroup & g, std::size_t task, int n_steps) {
    if (n_steps < 2) {
        throw InputError("N must be >= 2");
    }
    std::vector<double> coeffs;
    for (int k = 0; k <= n_steps; ++k) {
        coeffs.push_back(static_cast<double>(k) / static_cast<double>(n_steps));
    }
    const auto outs = interpolated_outputs(store, base, tau, g, task, coeffs);
    return non_linearity_score(outs);
}

// ---------------------------------------------------------------------------
// Merge linearity

namespace detail {

inline Matrix weighted_sum(std::span<const Matrix> deltas, std::span<const double> alpha) {
    if (deltas.empty() || deltas.size() != alpha.size()) {
        throw InputError("need one alpha per task delta");
    }
    Matrix s(deltas.front().rows, deltas.front().cols);
    for (std::size_t t = 0; t < deltas.size(); ++t) {
        if (deltas[t].rows != s.rows || deltas[t].cols != s.cols) {
            throw InputError("task deltas differ in shape");
        }
        for (std::size_t i = 0; i < s.data.size(); ++i) {
            s.data[i] += alpha[t] * deltas[t].data[i];
        }
    }
    return s;
}

} // namespace detail

struct CosineResult {
    std::vector<double> per_row;  ///< retained rows only
    double mean = 0.0;
    std::size_t skipped = 0;
};

/// cos(delta_merged(x), sum_t alpha_t delta_t(x)) per row and its mean.
inline CosineResult cosine_merge(std::span<const Matrix> deltas, std::span<const double> alpha, const Matrix & merged) {
    const Matrix s = detail::weighted_sum(deltas, alpha);
    if (merged.rows != s.rows || merged.cols != s.cols) {
        throw InputError("merged deltas do not match task deltas in shape");
    }
    CosineResult res;
    double sum = 0.0;
    for (std::size_t r = 0; r < s.rows; ++r) {
        const double nm = norm2(merged.row(r));
        const double ns = norm2(s.row(r));
        if (nm < kDegenerateNorm || ns < kDegenerateNorm) {
            ++res.skipped;
            continue;
        }
        const double c = std::clamp(dot(merged.row(r), s.row(r)) / (nm * ns), -1.0, 1.0);
        res.per_row.push_back(c);
        sum += c;
    }
    if (res.per_row.empty()) {
        throw DegenerateError("every row has a zero-norm delta");
    }
    res.mean = sum / static_cast<double>(res.per_row.size());
    return res;
}

struct ProjectionResult {
    double value = 0.0;
    std::size_t samples = 0;
    std::size_t skipped = 0;
};

/// |1 - E_x[ ||delta_merged|| cos / ||sum_t alpha_t delta_t|| ]|; the ratio equals
/// <merged, s> / ||s||^2.
inline ProjectionResult projection_distance(std::span<const Matrix> deltas, std::span<const double> alpha,
                                            const Matrix & merged) {
    const Matrix s = detail::weighted_sum(deltas, alpha);
    if (merged.rows != s.rows || merged.cols != s.cols) {
        throw InputError("merged deltas do not match task deltas in shape");
    }
    ProjectionResult res;
    double sum = 0.0;
    for (std::size_t r = 0; r < s.rows; ++r) {
        const double nm = norm2(merged.row(r));
        const double ns = norm2(s.row(r));
        if (nm < kDegenerateNorm || ns < kDegenerateNorm) {
            ++res.skipped;
            continue;
        }
        sum += dot(merged.row(r), s.row(r)) / (ns * ns);
        ++res.samples;
    }
    if (res.samples == 0) {
        throw DegenerateError("every row has a zero-norm delta");
    }
    res.value = std::abs(1.0 - sum / static_cast<double>(res.samples));
    return res;
}

struct PairCosineResult {
    double value = 0.0;
    std::size_t samples = 0;
    std::size_t skipped = 0;
};

/// Mean over rows of the average pairwise cosine between per-model deltas
/// (unordered pairs).
inline PairCosineResult cosine_base(std::span<const Matrix> deltas) {
    const std::size_t n_models = deltas.size();
    if (n_models < 2) {
        throw InputError("pairwise cosine needs at least two models");
    }
    const std::size_t rows = deltas.front().rows;
    for (const auto & d : deltas) {
        if (d.rows != rows || d.cols != deltas.front().cols) {
            throw InputError("task deltas differ in shape");
        }
    }
    PairCosineResult res;
    double sum = 0.0;
    const double pairs = static_cast<double>(n_models * (n_models - 1) / 2);
    for (std::size_t r = 0; r < rows; ++r) {
        std::vector<double> norms(n_models);
        bool skip = false;
        for (std::size_t t = 0; t < n_models; ++t) {
            norms[t] = norm2(deltas[t].row(r));
            skip = skip || norms[t] < kDegenerateNorm;
        }
        if (skip) {
            ++res.skipped;
            continue;
        }
        double row_sum = 0.0;
        for (std::size_t a = 0; a < n_models; ++a) {
            for (std::size_t b = a + 1; b < n_models; ++b) {
                row_sum += dot(deltas[a].row(r), deltas[b].row(r)) / (norms[a] * norms[b]);
            }
        }
        sum += row_sum / pairs;
        ++res.samples;
    }
    if (res.samples == 0) {
        throw DegenerateError("every row has a zero-norm delta");
    }
    res.value = sum / static_cast<double>(res.samples);
    return res;
}

/// Per-model delta rows pooled over all data tasks (task-major).
inline std::vector<Matrix> pooled_deltas(const GroupDeltas & gd) {
    std::vector<Matrix> out;
    for (std::size_t m = 0; m < gd.n_models(); ++m) {
        std::vector<Matrix> parts;
        for (const auto & per_model : gd.by_task) {
            parts.push_back(per_model[m]);
        }
        out.push_back(vstack(parts));
    }
    return out;
}

/// Merged-group delta rows at coefficient vector `alpha`, pooled over all data tasks.
inline Matrix merged_deltas(const FeatureStore & store, const SubmoduleGroup & g, const Weights & base,
                            std::span<const Weights> taus, std::span<const double> alpha) {
    std::vector<Matrix> parts;
    for (std::size_t t = 0; t < store.tasks.size(); ++t) {
        parts.push_back(group_delta_rows(store, g, t, base, taus, alpha));
    }
    return vstack(parts);
}

/// cosine_merge and projection_distance for every alpha in the grid, plus their
/// grid means.
inline std::vector<LinearityRecord> metric_sweep(const FeatureStore & store, const SubmoduleGroup & g,
                                                 const Weights & base, std::span<const Weights> taus,
                                                 const GroupDeltas & deltas, const AlphaGrid & grid) {
    if (grid.alphas.empty()) {
        throw InputError("alpha grid is empty");
    }
    const auto pooled = pooled_deltas(deltas);
    std::vector<LinearityRecord> out;
    double cos_sum = 0.0;
    double proj_sum = 0.0;
    std::size_t ok = 0;
    for (const auto & alpha : grid.alphas) {
        LinearityRecord cos_rec{g.id, g.family, "cosine_merge", std::nullopt, {{"alpha", alpha}}};
        LinearityRecord proj_rec{g.id, g.family, "projection_distance", std::nullopt, {{"alpha", alpha}}};
        try {
            const Matrix merged = merged_deltas(store, g, base, taus, alpha);
            const auto c = cosine_merge(pooled, alpha, merged);
            const auto p = projection_distance(pooled, alpha, merged);
            cos_rec.value = c.mean;
            cos_rec.aux["samples"] = c.per_row.size();
            cos_rec.aux["skipped"] = c.skipped;
            proj_rec.value = p.value;
            proj_rec.aux["samples"] = p.samples;
            proj_rec.aux["skipped"] = p.skipped;
            cos_sum += c.mean;
            proj_sum += p.value;
            ++ok;
        } catch (const DegenerateError & e) {
            cos_rec.aux["error"] = e.what();
            proj_rec.aux["error"] = e.what();
        }
        out.push_back(std::move(cos_rec));
        out.push_back(std::move(proj_rec));
    }
    LinearityRecord cos_mean{g.id, g.family, "cosine_merge_grid_mean", std::nullopt, {{"configs", ok}}};
    LinearityRecord proj_mean{g.id, g.family, "projection_distance_grid_mean", std::nullopt, {{"configs", ok}}};
    if (ok > 0) {
        cos_mean.value = cos_sum / static_cast<double>(ok);
        proj_mean.value = proj_sum / static_cast<double>(ok);
    } else {
        cos_mean.aux["error"] = "DegenerateError: no alpha configuration produced a usable delta";
        proj_mean.aux["error"] = cos_mean.aux["error"];
    }
    out.push_back(std::move(cos_mean));
    out.push_back(std::move(proj_mean));
    return out;
}

/// (N+1)x(N+1) ratio matrix as CSV, header row i/j indices.
inline std::string ratio_matrix_csv(const Matrix & m) {
    std::string out = "i\\j";
    for (std::size_t j = 0; j < m.cols; ++j) {
        out += "," + std::to_string(j);
    }
    out += "\n";
    char buf[32];
    for (std::size_t i = 0; i < m.rows; ++i) {
        out += std::to_string(i);
        for (std::size_t j = 0; j < m.cols; ++j) {
            std::snprintf(buf, sizeof(buf), ",%.9g", m(i, j));
            out += buf;
        }
        out += "\n";
    }
    return out;
}

} // namespace linmerge
