// Copyright (c) 2026, The linmerge Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "linmerge/decomposer.hpp"
#include "linmerge/error.hpp"
#include "linmerge/features.hpp"
#include "linmerge/matrix.hpp"

namespace linmerge {

/// B[a][b][c] = E_{x in task a} <delta_b(x), delta_c(x)>, optionally with every
/// sample divided by its mean delta energy (1/T) sum_t ||delta_t(x)||^2.
struct GramTensor {
    std::string group_id;
    std::size_t n_tasks = 0;
    bool normalized = false;
    std::vector<double> values;          ///< n^3, [a][b][c] row-major
    std::vector<std::size_t> samples;    ///< retained rows per data task
    std::vector<std::size_t> skipped;    ///< rows dropped for zero energy (normalized only)

    double operator()(std::size_t a, std::size_t b, std::size_t c) const {
        return values[(a * n_tasks + b) * n_tasks + c];
    }
    double & operator()(std::size_t a, std::size_t b, std::size_t c) {
        return values[(a * n_tasks + b) * n_tasks + c];
    }
};

/// Energy below which a sample carries no usable signal for the normalized Gram.
inline constexpr double kZeroEnergy = 1e-12;

/// `by_task[a][m]` holds model m's delta rows on data task a (as in GroupDeltas).
inline GramTensor compute_gram(const std::vector<std::vector<Matrix>> & by_task, bool normalized,
                               std::string group_id = {}) {
    const std::size_t n = by_task.size();
    if (n == 0) {
        throw InputError("Gram tensor needs at least one task");
    }
    GramTensor g{std::move(group_id), n, normalized, std::vector<double>(n * n * n, 0.0),
                 std::vector<std::size_t>(n, 0), std::vector<std::size_t>(n, 0)};
    std::size_t retained_total = 0;
    std::vector<double> inner(n * n);
    for (std::size_t a = 0; a < n; ++a) {
        const auto & models = by_task[a];
        if (models.size() != n) {
            throw InputError("data task " + std::to_string(a) + " has deltas for " + std::to_string(models.size()) +
                             " models, expected " + std::to_string(n));
        }
        const std::size_t rows = models.front().rows;
        for (const auto & m : models) {
            if (m.rows != rows || m.cols != models.front().cols) {
                throw InputError("inconsistent delta row counts within data task " + std::to_string(a));
            }
        }
        for (std::size_t r = 0; r < rows; ++r) {
            double energy = 0.0;
            for (std::size_t b = 0; b < n; ++b) {
                for (std::size_t c = b; c < n; ++c) {
                    const double v = dot(models[b].row(r), models[c].row(r));
                    inner[b * n + c] = v;
                    inner[c * n + b] = v;
                }
                energy += inner[b * n + b];
            }
            double scale = 1.0;
            if (normalized) {
                energy /= static_cast<double>(n);
                if (energy < kZeroEnergy) {
                    ++g.skipped[a];
                    continue;
                }
                scale = 1.0 / energy;
            }
            for (std::size_t bc = 0; bc < n * n; ++bc) {
                g.values[a * n * n + bc] += inner[bc] * scale;
            }
            ++g.samples[a];
        }
        if (g.samples[a] > 0) {
            for (std::size_t bc = 0; bc < n * n; ++bc) {
                g.values[a * n * n + bc] /= static_cast<double>(g.samples[a]);
            }
        }
        retained_total += g.samples[a];
    }
    if (retained_total == 0) {
        throw DegenerateError("no sample retained for the Gram tensor");
    }
    return g;
}

struct LinearSystem {
    Eigen::MatrixXd a;
    Eigen::VectorXd b;
};

/// A[j][k] = sum_t B[t][j][k], b[j] = sum_t B[t][j][t]: the normal equations of
/// sum_t E_{x in task t} || sum_m alpha_m delta_m(x) - delta_t(x) ||^2.
inline LinearSystem assemble_system(const GramTensor & g) {
    const auto n = static_cast<Eigen::Index>(g.n_tasks);
    LinearSystem sys{Eigen::MatrixXd::Zero(n, n), Eigen::VectorXd::Zero(n)};
    for (std::size_t t = 0; t < g.n_tasks; ++t) {
        for (std::size_t j = 0; j < g.n_tasks; ++j) {
            for (std::size_t k = 0; k < g.n_tasks; ++k) {
                sys.a(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(k)) += g(t, j, k);
            }
            sys.b(static_cast<Eigen::Index>(j)) += g(t, j, t);
        }
    }
    return sys;
}

struct SolveDiagnostics {
    double condition = 0.0;   ///< lambda_max / lambda_min of A (inf when singular)
    double ridge = 0.0;       ///< lambda added to the diagonal, 0 on the direct path
    double residual = 0.0;    ///< ||A alpha - b||
    bool fallback = false;
    bool zero_signal = false;
    std::string error;
};

struct SolveResult {
    std::vector<double> alpha;
    SolveDiagnostics diag;
};

inline constexpr double kMaxCondition = 1e12;

inline std::vector<double> uniform_alpha(std::size_t n) { return std::vector<double>(n, 1.0 / static_cast<double>(n)); }

/// Solves A alpha = b. Ill-conditioned systems (condition > 1e12 or a failed
/// factorization) are re-solved with ridge lambda = ridge_rel * trace(A) / T; a
/// system without signal (trace < 1e-12) returns uniform weights.
inline SolveResult solve_alpha(const Eigen::MatrixXd & a, const Eigen::VectorXd & b, double ridge_rel = 1e-8) {
    const auto n = a.rows();
    if (n == 0 || a.cols() != n || b.size() != n) {
        throw InputError("system must be square and match b");
    }
    if (!a.allFinite() || !b.allFinite()) {
        throw NumericError("non-finite entry in A or b");
    }
    SolveResult res;
    const double trace = a.trace();
    if (trace < 1e-12) {
        res.alpha = uniform_alpha(static_cast<std::size_t>(n));
        res.diag.fallback = true;
        res.diag.zero_signal = true;
        res.diag.condition = std::numeric_limits<double>::infinity();
        Eigen::Map<const Eigen::VectorXd> al(res.alpha.data(), n);
        res.diag.residual = (a * al - b).norm();
        return res;
    }

    const Eigen::MatrixXd sym = 0.5 * (a + a.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sym, Eigen::EigenvaluesOnly);
    const double lmax = eig.eigenvalues().maxCoeff();
    const double lmin = eig.eigenvalues().minCoeff();
    res.diag.condition = lmin > 0.0 ? lmax / lmin : std::numeric_limits<double>::infinity();

    Eigen::VectorXd x;
    bool direct_ok = false;
    if (res.diag.condition <= kMaxCondition) {
        Eigen::LDLT<Eigen::MatrixXd> ldlt(sym);
        if (ldlt.info() == Eigen::Success) {
            x = ldlt.solve(b);
            direct_ok = x.allFinite();
        }
    }
    if (!direct_ok) {
        res.diag.fallback = true;
        res.diag.ridge = ridge_rel * trace / static_cast<double>(n);
        const Eigen::MatrixXd reg = sym + res.diag.ridge * Eigen::MatrixXd::Identity(n, n);
        x = reg.ldlt().solve(b);
        if (!x.allFinite()) {
            throw NumericError("ridge solve produced non-finite weights");
        }
    }
    res.alpha.assign(x.data(), x.data() + n);
    res.diag.residual = (a * x - b).norm();
    return res;
}

/// sum_t E_{x in task t} w(x) || sum_m alpha_m delta_m(x) - delta_t(x) ||^2, written
/// through the Gram tensor (w = 1 plain, 1/energy normalized).
inline double surrogate_objective(const GramTensor & g, std::span<const double> alpha) {
    const std::size_t n = g.n_tasks;
    double total = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
        double quad = 0.0;
        double lin = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            lin += alpha[j] * g(t, j, t);
            for (std::size_t k = 0; k < n; ++k) {
                quad += alpha[j] * alpha[k] * g(t, j, k);
            }
        }
        total += quad - 2.0 * lin + g(t, t, t);
    }
    return total;
}

struct GroupWeights {
    std::string group_id;
    std::vector<double> alpha;
    SolveDiagnostics diag;
};

struct MergeWeights {
    Granularity level = Granularity::Layer;
    bool normalized = true;
    std::vector<GroupWeights> groups;

    const GroupWeights & at(std::string_view id) const {
        for (const auto & g : groups) {
            if (g.group_id == id) {
                return g;
            }
        }
        throw PlanError("no weights for group '" + std::string(id) + "'");
    }

    bool any_fallback() const {
        for (const auto & g : groups) {
            if (g.diag.fallback) {
                return true;
            }
        }
        return false;
    }

    /// Same alpha for every group of `plan`.
    static MergeWeights constant(const DecompositionPlan & plan, std::vector<double> alpha) {
        MergeWeights w{plan.granularity, false, {}};
        for (const auto & g : plan.groups) {
            w.groups.push_back({g.id, alpha, {}});
        }
        return w;
    }
};

inline nlohmann::json to_json(const MergeWeights & w) {
    nlohmann::json groups = nlohmann::json::array();
    for (const auto & g : w.groups) {
        nlohmann::json j = {{"id", g.group_id},
                            {"alpha", g.alpha},
                            {"fallback", g.diag.fallback},
                            {"residual", g.diag.residual},
                            {"ridge", g.diag.ridge},
                            {"zero_signal", g.diag.zero_signal}};
        j["condition"] = std::isfinite(g.diag.condition) ? nlohmann::json(g.diag.condition) : nlohmann::json(nullptr);
        if (!g.diag.error.empty()) {
            j["error"] = g.diag.error;
        }
        groups.push_back(std::move(j));
    }
    return {{"level", to_string(w.level)}, {"normalized", w.normalized}, {"groups", std::move(groups)}};
}

inline MergeWeights merge_weights_from_json(const nlohmann::json & j) {
    MergeWeights w;
    try {
        w.level = parse_granularity(j.at("level").get<std::string>());
        w.normalized = j.at("normalized").get<bool>();
        for (const auto & g : j.at("groups")) {
            GroupWeights gw{g.at("id").get<std::string>(), g.at("alpha").get<std::vector<double>>(), {}};
            gw.diag.fallback = g.value("fallback", false);
            gw.diag.residual = g.value("residual", 0.0);
            w.groups.push_back(std::move(gw));
        }
    } catch (const nlohmann::json::exception & e) {
        throw ConfigError(std::string("bad weights JSON: ") + e.what());
    }
    return w;
}

/// One alpha per group. Failures never abort the plan: the group falls back to
/// uniform weights and the reason lands in its diagnostics.
inline MergeWeights solve_plan(const DecompositionPlan & plan, const DeltaStore & deltas, bool normalized,
                               double ridge_rel = 1e-8) {
    MergeWeights w{plan.granularity, normalized, {}};
    for (const auto & g : plan.groups) {
        const auto & gd = deltas.at(g.id);
        GroupWeights gw{g.id, {}, {}};
        try {
            const auto gram = compute_gram(gd.by_task, normalized, g.id);
            const auto sys = assemble_system(gram);
            auto sol = solve_alpha(sys.a, sys.b, ridge_rel);
            gw.alpha = std::move(sol.alpha);
            gw.diag = sol.diag;
        } catch (const DegenerateError & e) {
            gw.alpha = uniform_alpha(gd.n_models());
            gw.diag.fallback = true;
            gw.diag.zero_signal = true;
            gw.diag.condition = std::numeric_limits<double>::infinity();
            gw.diag.error = e.what();
        } catch (const NumericError & e) {
            gw.alpha = uniform_alpha(gd.n_models());
            gw.diag.fallback = true;
            gw.diag.error = e.what();
        }
        w.groups.push_back(std::move(gw));
    }
    return w;
}

} // namespace linmerge
