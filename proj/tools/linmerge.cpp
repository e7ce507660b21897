// Copyright (c) 2026, The linmerge Authors
// SPDX-License-Identifier: Apache-2.0
//

#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "linmerge/linmerge.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitDegraded = 3;

struct Flags {
    std::string config;
    std::uint64_t seed = 0;
    std::size_t samples_per_task = 30;
    std::string level;
    bool normalized = false;
    bool plain_gram = false;
    bool strict = false;
    std::string out;

    std::string base;
    std::vector<std::string> fine_tuned;
    std::vector<std::string> datasets;
    std::string model;
    std::string method;
    std::vector<std::string> levels;
    double alpha = 0.5;
    double drop_p = 0.0;
    int n_interp = 10;
    bool emit_plan = false;
};

linmerge::RunConfig build_config(const CLI::App & app, const CLI::App & sub, const Flags & f) {
    linmerge::RunConfig cfg;
    if (!f.config.empty()) {
        std::ifstream in(f.config);
        if (!in) {
            throw linmerge::ConfigError("cannot open config '" + f.config + "'");
        }
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(in);
        } catch (const nlohmann::json::exception & e) {
            throw linmerge::ConfigError(std::string("config is not JSON: ") + e.what());
        }
        cfg = linmerge::run_config_from_json(j);
    }
    auto given = [&](const char * name) {
        const auto * opt = sub.get_option_no_throw(name);
        if (opt != nullptr && opt->count() > 0) {
            return true;
        }
        opt = app.get_option_no_throw(name);
        return opt != nullptr && opt->count() > 0;
    };
    if (given("--seed")) cfg.seed = f.seed;
    if (given("--samples-per-task")) cfg.samples_per_task = f.samples_per_task;
    if (given("--level")) cfg.level = linmerge::parse_granularity(f.level);
    if (given("--normalized")) cfg.normalized = true;
    if (given("--plain-gram")) cfg.normalized = false;
    if (given("--strict")) cfg.strict = true;
    if (given("--out")) cfg.out = f.out;
    if (given("--base")) cfg.base = f.base;
    if (given("--fine-tuned")) cfg.fine_tuned.assign(f.fine_tuned.begin(), f.fine_tuned.end());
    if (given("--data")) cfg.datasets.assign(f.datasets.begin(), f.datasets.end());
    if (given("--model")) cfg.model = f.model;
    if (given("--method")) cfg.method = linmerge::parse_method(f.method);
    if (given("--levels")) {
        cfg.levels.clear();
        for (const auto & l : f.levels) cfg.levels.push_back(linmerge::parse_granularity(l));
    }
    if (given("--alpha")) cfg.alpha = f.alpha;
    if (given("--drop-p")) cfg.drop_p = f.drop_p;
    if (given("--n-interp")) cfg.n_interp = f.n_interp;
    if (given("--emit-plan")) cfg.emit_plan = true;
    return cfg;
}

void add_inputs(CLI::App * sub, Flags & f, bool datasets) {
    sub->add_option("--base", f.base, "Base (pre-trained) archive");
    sub->add_option("--fine-tuned", f.fine_tuned, "Fine-tuned archives, one per task")->expected(1, -1);
    if (datasets) {
        sub->add_option("--data", f.datasets, "Task datasets (JSON lines), one per task")->expected(1, -1);
    }
}

} // namespace

int main(int argc, char ** argv) {
    CLI::App app{"Merge fine-tuned transformer checkpoints with per-submodule closed-form weights"};
    app.require_subcommand(1);
    app.fallthrough();

    Flags f;
    app.add_option("--config", f.config, "JSON run config; explicit flags override it");
    app.add_option("--seed", f.seed, "Sampling / fixture / dropout seed");
    app.add_option("--samples-per-task", f.samples_per_task, "Sequences sampled per task (default 30)");
    app.add_option("--level", f.level, "Granularity: model | layer | attn_mlp | head_mlp");
    auto * norm_flag = app.add_flag("--normalized", f.normalized, "Energy-normalized Gram tensor (default)");
    app.add_flag("--plain-gram", f.plain_gram, "Unnormalized Gram tensor")->excludes(norm_flag);
    app.add_flag("--strict", f.strict, "Exit 3 when any group needed a numeric fallback");
    app.add_option("--out", f.out, "Output directory");

    linmerge::FixtureSpec spec;
    spec.config = {32, 4, 4, 64, 64, 32, 1e-5, 10000.0};
    auto * gen = app.add_subcommand("gen-fixture", "Write a seeded base model, perturbation fine-tunes and datasets");
    gen->add_option("--d-model", spec.config.d_model);
    gen->add_option("--n-heads", spec.config.n_heads);
    gen->add_option("--n-layers", spec.config.n_layers);
    gen->add_option("--d-ff", spec.config.d_ff);
    gen->add_option("--vocab", spec.config.vocab_size);
    gen->add_option("--max-seq", spec.config.max_seq);
    gen->add_option("--tasks", spec.tasks);
    gen->add_option("--tau-scale", spec.tau_scale);
    gen->add_option("--dataset-size", spec.dataset_size);
    gen->add_option("--seq-len", spec.seq_len);
    gen->add_flag("--trained-style", spec.trained_style, "Use each task's lm_head loss-descent direction");

    auto * analyze = app.add_subcommand("analyze", "Linearity report at each granularity");
    add_inputs(analyze, f, true);
    analyze->add_option("--levels", f.levels, "Levels to analyze (default: all)")->expected(1, -1);
    analyze->add_option("--n-interp", f.n_interp, "Interpolation steps N for the non-linearity score");
    analyze->add_flag("--emit-plan", f.emit_plan, "Also write each decomposition plan as JSON");

    auto * solve = app.add_subcommand("solve", "Solve per-group merging weights without merging");
    add_inputs(solve, f, true);
    solve->add_flag("--emit-plan", f.emit_plan, "Also write the decomposition plan as JSON");

    auto * merge = app.add_subcommand("merge", "Produce a merged archive");
    add_inputs(merge, f, true);
    merge->add_option("--method", f.method, "weight_avg | task_arithmetic | dare | linear_solve");
    merge->add_option("--alpha", f.alpha, "Task-vector scale (task_arithmetic, dare)");
    merge->add_option("--drop-p", f.drop_p, "DARE drop probability in [0, 1)");

    auto * eval = app.add_subcommand("eval", "Per-task next-token cross-entropy of one archive");
    eval->add_option("--model", f.model, "Archive to evaluate");
    eval->add_option("--data", f.datasets, "Task datasets (JSON lines)")->expected(1, -1);

    auto * compare = app.add_subcommand("compare", "All methods over their grids, scored on every task");
    add_inputs(compare, f, true);

    CLI11_PARSE(app, argc, argv);

    try {
        linmerge::CommandResult result;
        linmerge::RunConfig cfg;
        if (gen->parsed()) {
            cfg = build_config(app, *gen, f);
            spec.seed = cfg.seed;
            result = linmerge::cmd_gen_fixture(spec, cfg.out);
        } else if (analyze->parsed()) {
            cfg = build_config(app, *analyze, f);
            result = linmerge::cmd_analyze(cfg);
        } else if (solve->parsed()) {
            cfg = build_config(app, *solve, f);
            result = linmerge::cmd_solve(cfg);
        } else if (merge->parsed()) {
            cfg = build_config(app, *merge, f);
            result = linmerge::cmd_merge(cfg);
        } else if (eval->parsed()) {
            cfg = build_config(app, *eval, f);
            result = linmerge::cmd_eval(cfg);
        } else if (compare->parsed()) {
            cfg = build_config(app, *compare, f);
            result = linmerge::cmd_compare(cfg);
        }
        if (!analyze->parsed()) {
            std::cout << result.summary.dump(2) << "\n";
        } else {
            std::cout << result.summary["settings"].dump(2) << "\nreport written to "
                      << (cfg.out / "report.json").string() << "\n";
        }
        if (cfg.strict && result.fallback) {
            std::cerr << "strict: at least one group needed a numeric fallback\n";
            return kExitDegraded;
        }
        return kExitOk;
    } catch (const linmerge::ConfigError & e) {
        std::cerr << e.what() << "\n";
        return kExitConfig;
    } catch (const linmerge::Error & e) {
        std::cerr << e.what() << "\n";
        return kExitFailure;
    }
}
