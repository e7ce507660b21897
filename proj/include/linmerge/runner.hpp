// Copyright (c) 2026, The linmerge Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "linmerge/dataset.hpp"
#include "linmerge/decomposer.hpp"
#include "linmerge/error.hpp"
#include "linmerge/features.hpp"
#include "linmerge/fixture.hpp"
#include "linmerge/merge.hpp"
#include "linmerge/metrics.hpp"
#include "linmerge/model.hpp"
#include "linmerge/solver.hpp"
#include "linmerge/tensor_archive.hpp"

namespace linmerge {

namespace fs = std::filesystem;

/// Everything a command needs. Mirrors the --config JSON object key for key.
struct RunConfig {
    fs::path base;
    std::vector<fs::path> fine_tuned;
    std::vector<fs::path> datasets;
    fs::path model;     ///< archive to evaluate (eval)
    fs::path out = ".";

    MergeMethod method = MergeMethod::LinearSolve;
    Granularity level = Granularity::AttnMlp;
    std::vector<Granularity> levels{Granularity::Model, Granularity::Layer, Granularity::AttnMlp,
                                    Granularity::HeadMlp};
    double alpha = 0.5;
    double drop_p = 0.0;
    std::uint64_t seed = 0;
    std::size_t samples_per_task = 30;
    bool normalized = true;
    bool strict = false;
    int n_interp = 10;
    bool emit_plan = false;
    double ridge_rel = 1e-8;
};

inline RunConfig run_config_from_json(const nlohmann::json & j, RunConfig cfg = {}) {
    try {
        if (j.contains("base")) cfg.base = j["base"].get<std::string>();
        if (j.contains("fine_tuned")) {
            cfg.fine_tuned.clear();
            for (const auto & p : j["fine_tuned"]) cfg.fine_tuned.emplace_back(p.get<std::string>());
        }
        if (j.contains("datasets")) {
            cfg.datasets.clear();
            for (const auto & p : j["datasets"]) cfg.datasets.emplace_back(p.get<std::string>());
        }
        if (j.contains("model")) cfg.model = j["model"].get<std::string>();
        if (j.contains("out")) cfg.out = j["out"].get<std::string>();
        if (j.contains("method")) cfg.method = parse_method(j["method"].get<std::string>());
        if (j.contains("level")) cfg.level = parse_granularity(j["level"].get<std::string>());
        if (j.contains("levels")) {
            cfg.levels.clear();
            for (const auto & l : j["levels"]) cfg.levels.push_back(parse_granularity(l.get<std::string>()));
        }
        if (j.contains("alpha")) cfg.alpha = j["alpha"].get<double>();
        if (j.contains("drop_p")) cfg.drop_p = j["drop_p"].get<double>();
        if (j.contains("seed")) cfg.seed = j["seed"].get<std::uint64_t>();
        if (j.contains("samples_per_task")) cfg.samples_per_task = j["samples_per_task"].get<std::size_t>();
        if (j.contains("normalized")) cfg.normalized = j["normalized"].get<bool>();
        if (j.contains("strict")) cfg.strict = j["strict"].get<bool>();
        if (j.contains("n_interp")) cfg.n_interp = j["n_interp"].get<int>();
        if (j.contains("emit_plan")) cfg.emit_plan = j["emit_plan"].get<bool>();
        if (j.contains("ridge_rel")) cfg.ridge_rel = j["ridge_rel"].get<double>();
    } catch (const nlohmann::json::exception & e) {
        throw ConfigError(std::string("bad run config: ") + e.what());
    }
    return cfg;
}

inline nlohmann::json to_json(const RunConfig & c) {
    auto paths = [](const std::vector<fs::path> & ps) {
        nlohmann::json a = nlohmann::json::array();
        for (const auto & p : ps) a.push_back(p.string());
        return a;
    };
    nlohmann::json levels = nlohmann::json::array();
    for (auto l : c.levels) levels.push_back(to_string(l));
    return {{"base", c.base.string()},
            {"fine_tuned", paths(c.fine_tuned)},
            {"datasets", paths(c.datasets)},
            {"model", c.model.string()},
            {"out", c.out.string()},
            {"method", to_string(c.method)},
            {"level", to_string(c.level)},
            {"levels", levels},
            {"alpha", c.alpha},
            {"drop_p", c.drop_p},
            {"seed", c.seed},
            {"samples_per_task", c.samples_per_task},
            {"normalized", c.normalized},
            {"strict", c.strict},
            {"n_interp", c.n_interp},
            {"emit_plan", c.emit_plan},
            {"ridge_rel", c.ridge_rel}};
}

namespace detail {

inline void write_text(const fs::path & path, const std::string & text) {
    if (path.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(path.parent_path(), ec);
        if (ec) {
            throw IoError("cannot create '" + path.parent_path().string() + "': " + ec.message());
        }
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw IoError("cannot open '" + path.string() + "' for writing");
    }
    out << text;
    if (!out) {
        throw IoError("write to '" + path.string() + "' failed");
    }
}

inline void write_json(const fs::path & path, const nlohmann::json & j) { write_text(path, j.dump(2) + "\n"); }

inline void require_file(const fs::path & p, std::string_view what) {
    if (p.empty()) {
        throw ConfigError(std::string(what) + " path not given");
    }
    if (!fs::exists(p)) {
        throw ConfigError(std::string(what) + " '" + p.string() + "' does not exist");
    }
}

struct Inputs {
    TensorArchive base;
    std::vector<TensorArchive> fine_tuned;
    std::vector<TaskDataset> datasets;
};

inline Inputs load_inputs(const RunConfig & c, bool need_datasets) {
    require_file(c.base, "base archive");
    if (c.fine_tuned.empty()) {
        throw ConfigError("no fine-tuned archives given");
    }
    Inputs in;
    in.base = read_archive(c.base);
    for (const auto & p : c.fine_tuned) {
        require_file(p, "fine-tuned archive");
        in.fine_tuned.push_back(read_archive(p));
        require_compatible(in.base, in.fine_tuned.back(), p.string());
    }
    if (need_datasets) {
        for (const auto & p : c.datasets) {
            require_file(p, "dataset");
        }
        in.datasets = load_datasets(c.datasets);
        if (in.datasets.size() != in.fine_tuned.size()) {
            throw ConfigError("got " + std::to_string(in.datasets.size()) + " task datasets for " +
                              std::to_string(in.fine_tuned.size()) + " fine-tuned archives");
        }
    }
    return in;
}

inline nlohmann::json manifest(const RunConfig & c, std::string_view command) {
    nlohmann::json digests = nlohmann::json::object();
    auto add = [&](const fs::path & p) {
        if (!p.empty() && fs::exists(p)) digests[p.string()] = file_digest(p);
    };
    add(c.base);
    add(c.model);
    for (const auto & p : c.fine_tuned) add(p);
    for (const auto & p : c.datasets) add(p);
    return {{"command", command}, {"config", to_json(c)}, {"digests_fnv1a64", digests}};
}

inline double mean_of(const std::vector<double> & v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

inline double std_of(const std::vector<double> & v) {
    if (v.empty()) return 0.0;
    const double m = mean_of(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size()));
}

} // namespace detail

struct CommandResult {
    nlohmann::json summary;
    bool fallback = false;  ///< some group hit a numeric fallback
};

// ---------------------------------------------------------------------------

inline CommandResult cmd_gen_fixture(const FixtureSpec & spec, const fs::path & out) {
    const auto fx = make_fixture(spec);
    const auto paths = write_fixture(fx, out);
    RunConfig rc;
    rc.base = paths.base;
    rc.fine_tuned = paths.fine_tuned;
    rc.datasets = paths.datasets;
    rc.seed = spec.seed;
    rc.out = out;
    nlohmann::json cfg = to_json(rc);
    detail::write_json(out / "run_config.json", cfg);
    nlohmann::json fixture = {{"model_config", spec.config}, {"tasks", spec.tasks},
                              {"tau_scale", spec.tau_scale}, {"dataset_size", spec.dataset_size},
                              {"seq_len", spec.seq_len},     {"seed", spec.seed},
                              {"trained_style", spec.trained_style}};
    detail::write_json(out / "fixture.json", fixture);
    return {{{"fixture", fixture}, {"run_config", cfg}}, false};
}

/// Linearity report for every requested level: per-task non-linearity scores with
/// heatmap CSVs, pairwise base cosine, and the alpha sweep of merge cosine and
/// projection distance.
inline CommandResult cmd_analyze(const RunConfig & c) {
    const auto in = detail::load_inputs(c, true);
    const auto config = config_from_archive(in.base);
    const auto model = bind_weights(in.base, config);
    std::vector<Weights> taus;
    for (const auto & ft : in.fine_tuned) {
        taus.push_back(weight_delta(widen(ft), model.weights));
    }
    const auto grid = AlphaGrid::default_for(taus.size());

    nlohmann::json levels = nlohmann::json::object();
    std::size_t usable = 0;
    std::size_t failed = 0;
    for (auto level : c.levels) {
        const auto plan = plan_decomposition(config, level);
        const auto lname = to_string(level);
        if (c.emit_plan) {
            detail::write_json(c.out / ("plan_" + lname + ".json"), plan_to_json(plan));
        }
        const auto store = collect_base_features(model, in.datasets, plan, c.samples_per_task, c.seed);
        const auto deltas = compute_delta_outputs(store, model.weights, taus, plan);

        std::vector<LinearityRecord> records;
        // family -> metric -> per-group values
        std::map<std::string, std::map<std::string, std::vector<double>>> per_family;
        std::map<std::string, std::map<std::string, std::vector<double>>> per_family_sample_std;
        for (const auto & g : plan.groups) {
            std::vector<double> task_scores;
            std::vector<double> task_stds;
            for (std::size_t t = 0; t < taus.size(); ++t) {
                LinearityRecord r{g.id, g.family, "non_linearity_score", std::nullopt,
                                  {{"task", in.datasets[t].task}, {"N", c.n_interp}}};
                try {
                    const auto nls = non_linearity_score(store, model.weights, taus[t], g, t, c.n_interp);
                    r.value = nls.mean;
                    r.aux["samples"] = nls.samples;
                    r.aux["degenerate"] = nls.degenerate;
                    r.aux["std_across_samples"] = nls.stddev;
                    task_scores.push_back(nls.mean);
                    task_stds.push_back(nls.stddev);
                    detail::write_text(c.out / "heatmaps" / lname / (g.id + "__" + in.datasets[t].task + ".csv"),
                                       ratio_matrix_csv(nls.mean_ratio));
                } catch (const DegenerateError & e) {
                    r.aux["error"] = e.what();
                    ++failed;
                }
                records.push_back(std::move(r));
            }
            if (!task_scores.empty()) {
                per_family[g.family]["non_linearity_score"].push_back(detail::mean_of(task_scores));
                per_family_sample_std[g.family]["non_linearity_score"].push_back(detail::mean_of(task_stds));
                ++usable;
            }
            const auto & gd = deltas.at(g.id);
            if (taus.size() >= 2) {
                LinearityRecord r{g.id, g.family, "cosine_base", std::nullopt,
                                  {{"pairs", "mean over unordered task pairs"}}};
                try {
                    const auto cb = cosine_base(pooled_deltas(gd));
                    r.value = cb.value;
                    r.aux["samples"] = cb.samples;
                    r.aux["skipped"] = cb.skipped;
                    per_family[g.family]["cosine_base"].push_back(cb.value);
                } catch (const DegenerateError & e) {
                    r.aux["error"] = e.what();
                }
                records.push_back(std::move(r));
            }
            for (auto & r : metric_sweep(store, g, model.weights, taus, gd, grid)) {
                if (r.value && (r.metric == "cosine_merge_grid_mean" || r.metric == "projection_distance_grid_mean")) {
                    per_family[g.family][r.metric].push_back(*r.value);
                    ++usable;
                }
                records.push_back(std::move(r));
            }
        }

        nlohmann::json summary = nlohmann::json::object();
        for (const auto & [family, metrics] : per_family) {
            for (const auto & [metric, values] : metrics) {
                nlohmann::json s = {{"mean", detail::mean_of(values)},
                                    {"std_across_modules", detail::std_of(values)},
                                    {"modules", values.size()}};
                auto it = per_family_sample_std[family].find(metric);
                if (it != per_family_sample_std[family].end()) {
                    s["mean_std_across_samples"] = detail::mean_of(it->second);
                }
                summary[family][metric] = std::move(s);
            }
        }
        nlohmann::json recs = nlohmann::json::array();
        for (const auto & r : records) {
            recs.push_back(to_json(r));
        }
        levels[lname] = {{"summary", summary}, {"records", std::move(recs)}};

        std::string csv = "group,family,metric,alpha,value\n";
        char buf[64];
        for (const auto & r : records) {
            if (!r.value || !r.aux.contains("alpha")) continue;
            std::string a;
            for (const auto & x : r.aux["alpha"]) {
                std::snprintf(buf, sizeof(buf), "%s%.3g", a.empty() ? "" : ";", x.get<double>());
                a += buf;
            }
            std::snprintf(buf, sizeof(buf), "%.9g", *r.value);
            csv += r.group_id + "," + r.family + "," + r.metric + "," + a + "," + buf + "\n";
        }
        detail::write_text(c.out / ("sweep_" + lname + ".csv"), csv);
    }
    if (usable == 0) {
        throw DegenerateError("no group produced a usable metric at any level");
    }
    nlohmann::json report = {{"levels", levels},
                             {"settings",
                              {{"N", c.n_interp},
                               {"samples_per_task", c.samples_per_task},
                               {"seed", c.seed},
                               {"alpha_grid_size", grid.alphas.size()},
                               {"cosine_base_normalization", "mean over unordered pairs"}}},
                             {"degenerate_scores", failed}};
    detail::write_json(c.out / "report.json", report);
    detail::write_json(c.out / "manifest.json", detail::manifest(c, "analyze"));
    return {report, false};
}

inline CommandResult cmd_solve(const RunConfig & c) {
    const auto in = detail::load_inputs(c, true);
    const auto config = config_from_archive(in.base);
    const auto model = bind_weights(in.base, config);
    const auto plan = plan_decomposition(config, c.level);
    const auto store = collect_base_features(model, in.datasets, plan, c.samples_per_task, c.seed);
    const auto deltas = compute_delta_outputs(store, in.base, in.fine_tuned, plan);
    const auto weights = solve_plan(plan, deltas, c.normalized, c.ridge_rel);
    const auto j = to_json(weights);
    detail::write_json(c.out / "weights.json", j);
    if (c.emit_plan) {
        detail::write_json(c.out / ("plan_" + to_string(c.level) + ".json"), plan_to_json(plan));
    }
    return {j, weights.any_fallback()};
}

/// Runs one merge method with the config's hyperparameters.
inline std::pair<TensorArchive, std::optional<MergeWeights>> run_merge(const RunConfig & c,
                                                                      const detail::Inputs & in) {
    switch (c.method) {
    case MergeMethod::WeightAverage: return {merge_weight_average(in.base, in.fine_tuned), std::nullopt};
    case MergeMethod::TaskArithmetic: return {merge_task_arithmetic(in.base, in.fine_tuned, c.alpha), std::nullopt};
    case MergeMethod::Dare: return {merge_dare(in.base, in.fine_tuned, c.alpha, c.drop_p, c.seed), std::nullopt};
    case MergeMethod::LinearSolve: {
        LinearSolveOptions opt{c.level, c.samples_per_task, c.seed, c.normalized, c.ridge_rel};
        auto res = merge_linear_solve(in.base, in.fine_tuned, in.datasets, opt);
        return {std::move(res.merged), std::move(res.weights)};
    }
    }
    throw ConfigError("unknown merge method");
}

inline CommandResult cmd_merge(const RunConfig & c) {
    const auto in = detail::load_inputs(c, c.method == MergeMethod::LinearSolve);
    auto [merged, weights] = run_merge(c, in);
    std::error_code ec;
    fs::create_directories(c.out, ec);
    write_archive(merged, c.out / "merged.lmt");
    auto man = detail::manifest(c, "merge");
    man["output_digest_fnv1a64"] = file_digest(c.out / "merged.lmt");
    bool fallback = false;
    if (weights) {
        detail::write_json(c.out / "weights.json", to_json(*weights));
        fallback = weights->any_fallback();
    }
    detail::write_json(c.out / "manifest.json", man);
    return {man, fallback};
}

/// Per-task and mean cross-entropy of one archive over the full task datasets.
inline nlohmann::json evaluate_archive(const TensorArchive & archive, std::span<const TaskDataset> datasets) {
    const auto model = bind_weights(archive, config_from_archive(archive));
    nlohmann::json per_task = nlohmann::json::object();
    std::vector<double> losses;
    for (const auto & ds : datasets) {
        const double l = eval_cross_entropy(model, ds.sequences);
        per_task[ds.task] = l;
        losses.push_back(l);
    }
    if (losses.empty()) {
        throw InputError("no datasets to evaluate on");
    }
    return {{"per_task", per_task}, {"mean", detail::mean_of(losses)}};
}

inline CommandResult cmd_eval(const RunConfig & c) {
    detail::require_file(c.model, "model archive");
    for (const auto & p : c.datasets) {
        detail::require_file(p, "dataset");
    }
    const auto datasets = load_datasets(c.datasets);
    const auto j = evaluate_archive(read_archive(c.model), datasets);
    detail::write_json(c.out / "eval.json", j);
    return {j, false};
}

struct CompareRow {
    std::string method;
    nlohmann::json params;
    std::vector<double> losses;
    double mean = 0.0;
};

/// Task-arithmetic scaling grid; 1/T is added when it is not already a grid point
/// so the weight-average identity is visible in the table.
inline std::vector<double> task_arithmetic_grid(std::size_t n_tasks) {
    std::vector<double> g;
    for (int i = 1; i <= 10; ++i) g.push_back(i / 10.0);
    const double inv = 1.0 / static_cast<double>(n_tasks);
    if (std::none_of(g.begin(), g.end(), [&](double a) { return std::abs(a - inv) < 1e-12; })) {
        g.push_back(inv);
        std::sort(g.begin(), g.end());
    }
    return g;
}

inline const std::vector<double> kDareDropGrid{0.6, 0.7, 0.8, 0.9};
inline const std::vector<double> kDareAlphaGrid{0.6, 0.8, 1.0};

/// Every method over its hyperparameter grid, each merged archive scored on every
/// task; best (lowest) loss per column is marked.
inline CommandResult cmd_compare(const RunConfig & c) {
    const auto in = detail::load_inputs(c, true);
    std::vector<CompareRow> rows;
    auto score = [&](std::string method, nlohmann::json params, const TensorArchive & merged) {
        const auto j = evaluate_archive(merged, in.datasets);
        CompareRow r{std::move(method), std::move(params), {}, j["mean"].get<double>()};
        for (const auto & ds : in.datasets) {
            r.losses.push_back(j["per_task"][ds.task].get<double>());
        }
        rows.push_back(std::move(r));
    };

    score("weight_avg", nlohmann::json::object(), merge_weight_average(in.base, in.fine_tuned));
    for (double a : task_arithmetic_grid(in.fine_tuned.size())) {
        score("task_arithmetic", {{"alpha", a}}, merge_task_arithmetic(in.base, in.fine_tuned, a));
    }
    for (double p : kDareDropGrid) {
        for (double a : kDareAlphaGrid) {
            score("dare", {{"drop_p", p}, {"alpha", a}}, merge_dare(in.base, in.fine_tuned, a, p, c.seed));
        }
    }
    LinearSolveOptions opt{c.level, c.samples_per_task, c.seed, c.normalized, c.ridge_rel};
    const auto ls = merge_linear_solve(in.base, in.fine_tuned, in.datasets, opt);
    score("linear_solve", {{"level", to_string(c.level)}, {"normalized", c.normalized}}, ls.merged);

    const std::size_t n_cols = in.datasets.size() + 1;
    std::vector<std::size_t> best(n_cols, 0);
    auto col = [&](const CompareRow & r, std::size_t k) { return k < r.losses.size() ? r.losses[k] : r.mean; };
    for (std::size_t k = 0; k < n_cols; ++k) {
        for (std::size_t i = 1; i < rows.size(); ++i) {
            if (col(rows[i], k) < col(rows[best[k]], k)) best[k] = i;
        }
    }

    nlohmann::json table = nlohmann::json::array();
    std::string csv = "method,params";
    for (const auto & ds : in.datasets) csv += "," + ds.task;
    csv += ",mean,best_columns\n";
    char buf[64];
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto & r = rows[i];
        nlohmann::json per_task = nlohmann::json::object();
        std::vector<std::string> best_cols;
        for (std::size_t k = 0; k < in.datasets.size(); ++k) {
            per_task[in.datasets[k].task] = r.losses[k];
            if (best[k] == i) best_cols.push_back(in.datasets[k].task);
        }
        if (best[n_cols - 1] == i) best_cols.push_back("mean");
        table.push_back({{"method", r.method}, {"params", r.params}, {"per_task", per_task}, {"mean", r.mean},
                         {"best", best_cols}});
        std::string p;
        for (auto it = r.params.begin(); it != r.params.end(); ++it) {
            p += (p.empty() ? "" : ";") + it.key() + "=" + it.value().dump();
        }
        csv += r.method + "," + p;
        for (double l : r.losses) {
            std::snprintf(buf, sizeof(buf), ",%.9g", l);
            csv += buf;
        }
        std::snprintf(buf, sizeof(buf), ",%.9g,", r.mean);
        csv += buf;
        for (std::size_t b = 0; b < best_cols.size(); ++b) csv += (b ? ";" : "") + best_cols[b];
        csv += "\n";
    }
    nlohmann::json out = {{"rows", table}, {"linear_solve_weights", to_json(ls.weights)}};
    detail::write_json(c.out / "compare.json", out);
    detail::write_text(c.out / "compare.csv", csv);
    detail::write_json(c.out / "manifest.json", detail::manifest(c, "compare"));
    return {out, ls.weights.any_fallback()};
}

} // namespace linmerge
