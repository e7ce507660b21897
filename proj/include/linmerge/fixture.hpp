// Copyright (c) 2026, The linmerge Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cmath>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "linmerge/dataset.hpp"
#include "linmerge/error.hpp"
#include "linmerge/model.hpp"
#include "linmerge/random.hpp"
#include "linmerge/tensor_archive.hpp"

namespace linmerge {

/// Desk-scale stand-in for a base model and T fine-tunes: theta_t = theta_0 +
/// tau_scale * G_t with G_t a seeded direction of unit Frobenius norm per tensor.
/// tau_scale is the linearity knob.
struct FixtureSpec {
    ModelConfig config;
    int tasks = 2;
    double tau_scale = 0.5;
    int dataset_size = 40;
    int seq_len = 16;
    std::uint64_t seed = 0;
    /// Replace the random lm_head direction with the descent direction of each
    /// task's next-token loss, so fine-tunes actually help on their own task.
    bool trained_style = false;

    void validate() const {
        config.validate();
        if (tasks < 1 || dataset_size < 1 || seq_len < 2) {
            throw ConfigError("fixture needs tasks >= 1, dataset_size >= 1, seq_len >= 2");
        }
        if (seq_len > config.max_seq) {
            throw ConfigError("seq_len exceeds max_seq");
        }
        if (!(tau_scale >= 0.0) || !std::isfinite(tau_scale)) {
            throw ConfigError("tau_scale must be finite and non-negative");
        }
    }
};

inline TensorArchive init_base(const ModelConfig & c, std::uint64_t seed) {
    Rng rng(seed);
    TensorArchive a;
    nlohmann::json cj = c;
    a.meta["model_config"] = cj.dump();
    a.meta["kind"] = "base";
    const double sd = 0.02 / std::sqrt(static_cast<double>(c.d_model));
    for (const auto & [name, shape] : parameter_shapes(c)) {
        NamedTensor t{name, shape, {}};
        t.data.resize(t.numel());
        if (shape.size() == 1) {
            std::fill(t.data.begin(), t.data.end(), 1.0f);
        } else {
            for (auto & v : t.data) {
                v = static_cast<float>(rng.normal() * sd);
            }
        }
        a.insert(std::move(t));
    }
    return a;
}

/// Per-tensor direction of unit Frobenius norm.
inline std::map<std::string, std::vector<double>> random_direction(const TensorArchive & like, std::uint64_t seed) {
    Rng rng(seed);
    std::map<std::string, std::vector<double>> out;
    for (const auto & [name, t] : like.tensors) {
        std::vector<double> v(t.data.size());
        double ss = 0.0;
        for (auto & x : v) {
            x = rng.normal();
            ss += x * x;
        }
        const double inv = 1.0 / std::sqrt(ss);
        for (auto & x : v) {
            x *= inv;
        }
        out.emplace(name, std::move(v));
    }
    return out;
}

/// Token distribution for task t: Zipf weights over a task-specific permutation.
inline std::vector<double> task_token_weights(int vocab, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<std::size_t> perm(static_cast<std::size_t>(vocab));
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    for (std::size_t i = perm.size(); i > 1; --i) {
        std::swap(perm[i - 1], perm[static_cast<std::size_t>(rng.below(i))]);
    }
    std::vector<double> w(perm.size());
    for (std::size_t rank = 0; rank < perm.size(); ++rank) {
        w[perm[rank]] = 1.0 / static_cast<double>(rank + 1);
    }
    return w;
}

inline TaskDataset make_dataset(const FixtureSpec & spec, int task) {
    const auto weights = task_token_weights(spec.config.vocab_size, derive_seed(spec.seed, 300 + task));
    Rng rng(derive_seed(spec.seed, 200 + task));
    TaskDataset ds{"task_" + std::to_string(task), {}};
    for (int s = 0; s < spec.dataset_size; ++s) {
        Sequence seq(static_cast<std::size_t>(spec.seq_len));
        for (auto & tok : seq) {
            tok = static_cast<Token>(rng.categorical(weights));
        }
        ds.sequences.push_back(std::move(seq));
    }
    return ds;
}

/// Negative gradient of the pooled next-token loss w.r.t. lm_head, unit Frobenius norm.
inline std::vector<double> lm_head_descent(const BoundModel & model, const TaskDataset & ds) {
    const auto & c = model.config;
    const auto v = static_cast<std::size_t>(c.vocab_size);
    const auto d = static_cast<std::size_t>(c.d_model);
    std::vector<double> grad(v * d, 0.0);
    for (const auto & seq : ds.sequences) {
        const auto trace = forward_with_taps(model, seq, {TapId::final_hidden()});
        const auto & h = trace.taps.at(TapId::final_hidden());
        for (std::size_t p = 0; p + 1 < seq.size(); ++p) {
            const auto logits = trace.logits.row(p);
            const double mx = *std::max_element(logits.begin(), logits.end());
            double z = 0.0;
            for (double l : logits) {
                z += std::exp(l - mx);
            }
            for (std::size_t k = 0; k < v; ++k) {
                double g = std::exp(logits[k] - mx) / z;
                if (k == static_cast<std::size_t>(seq[p + 1])) {
                    g -= 1.0;
                }
                for (std::size_t e = 0; e < d; ++e) {
                    grad[k * d + e] -= g * h(p, e);
                }
            }
        }
    }
    double ss = 0.0;
    for (double g : grad) {
        ss += g * g;
    }
    const double inv = ss > 0.0 ? 1.0 / std::sqrt(ss) : 0.0;
    for (auto & g : grad) {
        g *= inv;
    }
    return grad;
}

struct Fixture {
    TensorArchive base;
    std::vector<TensorArchive> fine_tuned;
    std::vector<TaskDataset> datasets;
};

inline Fixture make_fixture(const FixtureSpec & spec) {
    spec.validate();
    Fixture fx;
    fx.base = init_base(spec.config, derive_seed(spec.seed, 0));
    for (int t = 0; t < spec.tasks; ++t) {
        fx.datasets.push_back(make_dataset(spec, t));
    }
    const auto bound = bind_weights(fx.base, spec.config);
    for (int t = 0; t < spec.tasks; ++t) {
        auto dir = random_direction(fx.base, derive_seed(spec.seed, 100 + t));
        if (spec.trained_style) {
            dir[names::lm_head] = lm_head_descent(bound, fx.datasets[static_cast<std::size_t>(t)]);
        }
        TensorArchive ft = fx.base;
        ft.meta["kind"] = "fine_tuned";
        ft.meta["task"] = fx.datasets[static_cast<std::size_t>(t)].task;
        for (auto & [name, tensor] : ft.tensors) {
            const auto & g = dir.at(name);
            for (std::size_t i = 0; i < tensor.data.size(); ++i) {
                tensor.data[i] = static_cast<float>(static_cast<double>(tensor.data[i]) + spec.tau_scale * g[i]);
            }
        }
        fx.fine_tuned.push_back(std::move(ft));
    }
    return fx;
}

struct FixturePaths {
    std::filesystem::path base;
    std::vector<std::filesystem::path> fine_tuned;
    std::vector<std::filesystem::path> datasets;
};

inline FixturePaths write_fixture(const Fixture & fx, const std::filesystem::path & dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) {
        throw IoError("cannot create '" + dir.string() + "': " + ec.message());
    }
    FixturePaths paths{dir / "base.lmt", {}, {}};
    write_archive(fx.base, paths.base);
    for (std::size_t t = 0; t < fx.fine_tuned.size(); ++t) {
        paths.fine_tuned.push_back(dir / ("ft_" + std::to_string(t) + ".lmt"));
        write_archive(fx.fine_tuned[t], paths.fine_tuned.back());
        paths.datasets.push_back(dir / ("data_" + std::to_string(t) + ".jsonl"));
        write_dataset(fx.datasets[t], paths.datasets.back());
    }
    return paths;
}

} // namespace linmerge
