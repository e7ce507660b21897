// Copyright (c) 2026, The linmerge Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <filesystem>
#include <string>

#include "linmerge/linmerge.hpp"

namespace linmerge::testing {

inline ModelConfig tiny_config() { return {8, 2, 2, 16, 11, 16, 1e-5, 10000.0}; }

inline FixtureSpec tiny_spec(int tasks = 2, double tau_scale = 0.5, std::uint64_t seed = 1) {
    FixtureSpec s;
    s.config = tiny_config();
    s.tasks = tasks;
    s.tau_scale = tau_scale;
    s.dataset_size = 6;
    s.seq_len = 5;
    s.seed = seed;
    return s;
}

inline TensorArchive with_config(TensorArchive a, const ModelConfig & c = tiny_config()) {
    nlohmann::json j = c;
    a.meta["model_config"] = j.dump();
    return a;
}

inline std::filesystem::path temp_dir(const std::string & name) {
    auto p = std::filesystem::temp_directory_path() / ("linmerge_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

inline double max_abs_diff(const TensorArchive & a, const TensorArchive & b) {
    double m = 0.0;
    for (const auto & [name, t] : a.tensors) {
        const auto & u = b.at(name);
        for (std::size_t i = 0; i < t.data.size(); ++i) {
            m = std::max(m, std::abs(static_cast<double>(t.data[i]) - static_cast<double>(u.data[i])));
        }
    }
    return m;
}

inline double max_abs_diff(const Matrix & a, const Matrix & b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        m = std::max(m, std::abs(a.data[i] - b.data[i]));
    }
    return m;
}

} // namespace linmerge::testing
