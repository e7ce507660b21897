// Copyright (c) 2026, The linmerge Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "linmerge/error.hpp"
#include "linmerge/features.hpp"

namespace linmerge {

// JSON-lines, one {"task": string, "tokens": [ints]} object per line.

inline void append_datasets(const std::filesystem::path & path, std::vector<TaskDataset> & out) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open dataset '" + path.string() + "'");
    }
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        std::string task;
        Sequence tokens;
        try {
            const auto j = nlohmann::json::parse(line);
            task = j.at("task").get<std::string>();
            tokens = j.at("tokens").get<Sequence>();
        } catch (const nlohmann::json::exception & e) {
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
        auto it = std::find_if(out.begin(), out.end(), [&](const auto & d) { return d.task == task; });
        if (it == out.end()) {
            out.push_back({task, {}});
            it = std::prev(out.end());
        }
        it->sequences.push_back(std::move(tokens));
    }
}

/// Tasks in order of first appearance across the files.
inline std::vector<TaskDataset> load_datasets(std::span<const std::filesystem::path> paths) {
    std::vector<TaskDataset> out;
    for (const auto & p : paths) {
        append_datasets(p, out);
    }
    return out;
}

inline void write_dataset(const TaskDataset & ds, const std::filesystem::path & path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw IoError("cannot open '" + path.string() + "' for writing");
    }
    for (const auto & seq : ds.sequences) {
        out << nlohmann::json{{"task", ds.task}, {"tokens", seq}}.dump() << '\n';
    }
    if (!out) {
        throw IoError("write to '" + path.string() + "' failed");
    }
}

} // namespace linmerge
