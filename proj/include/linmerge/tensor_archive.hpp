// Copyright (c) 2026, The linmerge Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "linmerge/error.hpp"

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

namespace linmerge {

struct NamedTensor {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<float> data;

    std::size_t numel() const {
        std::size_t n = 1;
        for (auto d : shape) {
            n *= d;
        }
        return n;
    }

    bool operator==(const NamedTensor &) const = default;
};

/// Named f32 tensors plus string metadata. `std::map` keeps names in lexicographic
/// order, which is also the on-disk payload order.
struct TensorArchive {
    std::map<std::string, NamedTensor, std::less<>> tensors;
    std::map<std::string, std::string, std::less<>> meta;

    const NamedTensor & at(std::string_view name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) {
            throw CompatError("archive has no tensor '" + std::string(name) + "'");
        }
        return it->second;
    }

    NamedTensor & at(std::string_view name) {
        auto it = tensors.find(name);
        if (it == tensors.end()) {
            throw CompatError("archive has no tensor '" + std::string(name) + "'");
        }
        return it->second;
    }

    void insert(NamedTensor t) {
        auto key = t.name;
        tensors.insert_or_assign(std::move(key), std::move(t));
    }

    bool operator==(const TensorArchive &) const = default;
};

namespace detail {

inline void validate_tensor(const NamedTensor & t) {
    for (auto d : t.shape) {
        if (d == 0) {
            throw DataError("tensor '" + t.name + "' has a zero extent");
        }
    }
    if (t.numel() != t.data.size()) {
        throw DataError("tensor '" + t.name + "': shape implies " + std::to_string(t.numel()) +
                        " elements, data has " + std::to_string(t.data.size()));
    }
    for (std::size_t i = 0; i < t.data.size(); ++i) {
        if (!std::isfinite(t.data[i])) {
            throw DataError("tensor '" + t.name + "' has a non-finite value at element " + std::to_string(i));
        }
    }
}

inline void validate_archive(const TensorArchive & a) {
    for (const auto & [name, t] : a.tensors) {
        if (name != t.name) {
            throw DataError("tensor keyed '" + name + "' is named '" + t.name + "'");
        }
        validate_tensor(t);
    }
    if (!a.meta.contains("model_config")) {
        throw DataError("archive meta lacks 'model_config'");
    }
}

} // namespace detail

/// Canonical byte image of an archive: u64 header length, minified JSON header
/// with sorted keys, then tensors back to back in name order.
inline std::vector<std::uint8_t> serialize_archive(const TensorArchive & archive) {
    detail::validate_archive(archive);

    nlohmann::json tensors = nlohmann::json::object();
    std::uint64_t offset = 0;
    for (const auto & [name, t] : archive.tensors) {
        const std::uint64_t bytes = t.data.size() * sizeof(float);
        tensors[name] = {{"dtype", "f32"}, {"shape", t.shape}, {"offsets", {offset, offset + bytes}}};
        offset += bytes;
    }
    nlohmann::json meta = nlohmann::json::object();
    for (const auto & [k, v] : archive.meta) {
        meta[k] = v;
    }
    const nlohmann::json header = {{"tensors", tensors}, {"meta", meta}};
    const std::string header_text = header.dump();

    std::vector<std::uint8_t> out(8 + header_text.size() + offset);
    const std::uint64_t n = header_text.size();
    std::memcpy(out.data(), &n, 8);
    std::memcpy(out.data() + 8, header_text.data(), header_text.size());
    std::size_t at = 8 + header_text.size();
    for (const auto & [name, t] : archive.tensors) {
        const std::size_t bytes = t.data.size() * sizeof(float);
        if (bytes > 0) {
            std::memcpy(out.data() + at, t.data.data(), bytes);
        }
        at += bytes;
    }
    return out;
}

inline TensorArchive deserialize_archive(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 8) {
        throw TruncationError("file shorter than the 8-byte header length");
    }
    std::uint64_t n = 0;
    std::memcpy(&n, bytes.data(), 8);
    if (n > bytes.size() - 8) {
        throw TruncationError("header length " + std::to_string(n) + " exceeds file size");
    }
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(n));
    } catch (const nlohmann::json::exception & e) {
        throw FormatError(std::string("header is not valid JSON: ") + e.what());
    }
    if (!header.is_object() || !header.contains("tensors") || !header.contains("meta") ||
        !header["tensors"].is_object() || !header["meta"].is_object() || header.size() != 2) {
        throw FormatError("header must be an object with exactly 'tensors' and 'meta' objects");
    }

    const auto payload = bytes.subspan(8 + n);
    TensorArchive archive;
    for (auto it = header["meta"].begin(); it != header["meta"].end(); ++it) {
        if (!it.value().is_string()) {
            throw FormatError("meta value '" + it.key() + "' is not a string");
        }
        archive.meta[it.key()] = it.value().get<std::string>();
    }
    if (!archive.meta.contains("model_config")) {
        throw FormatError("meta lacks 'model_config'");
    }

    std::uint64_t expected_begin = 0;
    for (auto it = header["tensors"].begin(); it != header["tensors"].end(); ++it) {
        const auto & entry = it.value();
        if (!entry.is_object() || entry.value("dtype", "") != "f32" || !entry.contains("shape") ||
            !entry.contains("offsets") || !entry["shape"].is_array() || !entry["offsets"].is_array() ||
            entry["offsets"].size() != 2) {
            throw FormatError("tensor '" + it.key() + "' has a malformed entry");
        }
        NamedTensor t;
        t.name = it.key();
        for (const auto & d : entry["shape"]) {
            if (!d.is_number_unsigned() || d.get<std::uint64_t>() == 0) {
                throw FormatError("tensor '" + t.name + "' has a non-positive extent");
            }
            t.shape.push_back(d.get<std::size_t>());
        }
        if (!entry["offsets"][0].is_number_unsigned() || !entry["offsets"][1].is_number_unsigned()) {
            throw FormatError("tensor '" + t.name + "' has non-integer offsets");
        }
        const auto begin = entry["offsets"][0].get<std::uint64_t>();
        const auto end = entry["offsets"][1].get<std::uint64_t>();
        // nlohmann iterates object keys in sorted order, so contiguity here is the
        // "lexicographic, no gaps" layout rule.
        if (begin != expected_begin || end < begin) {
            throw FormatError("tensor '" + t.name + "' is not laid out contiguously in name order");
        }
        if ((end - begin) != t.numel() * sizeof(float)) {
            throw FormatError("tensor '" + t.name + "' byte range does not match its shape");
        }
        if (end > payload.size()) {
            throw TruncationError("tensor '" + t.name + "' ends at byte " + std::to_string(end) +
                                  " but payload has " + std::to_string(payload.size()));
        }
        t.data.resize(t.numel());
        std::memcpy(t.data.data(), payload.data() + begin, end - begin);
        expected_begin = end;
        archive.tensors.emplace(t.name, std::move(t));
    }
    if (expected_begin != payload.size()) {
        throw FormatError("payload has " + std::to_string(payload.size() - expected_begin) + " trailing bytes");
    }
    detail::validate_archive(archive);
    return archive;
}

inline TensorArchive read_archive(const std::filesystem::path & path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open '" + path.string() + "'");
    }
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize_archive(bytes);
}

inline void write_archive(const TensorArchive & archive, const std::filesystem::path & path) {
    const auto bytes = serialize_archive(archive);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open '" + path.string() + "' for writing");
    }
    out.write(reinterpret_cast<const char *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw IoError("write to '" + path.string() + "' failed");
    }
}

inline bool shape_compatible(const TensorArchive & a, const TensorArchive & b) {
    if (a.tensors.size() != b.tensors.size()) {
        return false;
    }
    for (const auto & [name, t] : a.tensors) {
        auto it = b.tensors.find(name);
        if (it == b.tensors.end() || it->second.shape != t.shape) {
            return false;
        }
    }
    return true;
}

inline void require_compatible(const TensorArchive & a, const TensorArchive & b, std::string_view what) {
    if (!shape_compatible(a, b)) {
        for (const auto & [name, t] : a.tensors) {
            auto it = b.tensors.find(name);
            if (it == b.tensors.end()) {
                throw CompatError(std::string(what) + ": tensor '" + name + "' missing");
            }
            if (it->second.shape != t.shape) {
                throw CompatError(std::string(what) + ": tensor '" + name + "' has mismatched shape");
            }
        }
        throw CompatError(std::string(what) + ": tensor name sets differ");
    }
}

/// tau = fine_tuned - base, elementwise.
inline TensorArchive task_vector(const TensorArchive & fine_tuned, const TensorArchive & base) {
    require_compatible(base, fine_tuned, "task_vector");
    TensorArchive out;
    out.meta = base.meta;
    out.meta["kind"] = "task_vector";
    for (const auto & [name, b] : base.tensors) {
        const auto & f = fine_tuned.at(name);
        NamedTensor t{name, b.shape, std::vector<float>(b.data.size())};
        for (std::size_t i = 0; i < t.data.size(); ++i) {
            t.data[i] = f.data[i] - b.data[i];
        }
        out.tensors.emplace(name, std::move(t));
    }
    return out;
}

/// base[i] + sum_t coeffs[t] * vectors[t][i], accumulated in double. Every merge
/// path funnels through this kernel so that equal coefficients give equal bits.
inline float combine_element(float base, std::span<const float * const> vectors, std::span<const double> coeffs,
                             std::size_t i) {
    double acc = base;
    for (std::size_t t = 0; t < coeffs.size(); ++t) {
        acc += coeffs[t] * static_cast<double>(vectors[t][i]);
    }
    return static_cast<float>(acc);
}

using CoeffMap = std::map<std::string, std::vector<double>, std::less<>>;

/// out[n] = base[n] + sum_t coeffs[n][t] * vectors[t][n].
inline TensorArchive linear_combine(const TensorArchive & base, std::span<const TensorArchive> vectors,
                                    const CoeffMap & coeffs) {
    for (const auto & v : vectors) {
        require_compatible(base, v, "linear_combine");
    }
    TensorArchive out;
    out.meta = base.meta;
    std::vector<const float *> ptrs(vectors.size());
    for (const auto & [name, b] : base.tensors) {
        auto c = coeffs.find(name);
        if (c == coeffs.end()) {
            throw CoeffError("no coefficients for tensor '" + name + "'");
        }
        if (c->second.size() != vectors.size()) {
            throw CoeffError("tensor '" + name + "' has " + std::to_string(c->second.size()) +
                             " coefficients, expected " + std::to_string(vectors.size()));
        }
        for (std::size_t t = 0; t < vectors.size(); ++t) {
            ptrs[t] = vectors[t].at(name).data.data();
        }
        NamedTensor t{name, b.shape, std::vector<float>(b.data.size())};
        for (std::size_t i = 0; i < t.data.size(); ++i) {
            t.data[i] = combine_element(b.data[i], ptrs, c->second, i);
        }
        out.tensors.emplace(name, std::move(t));
    }
    return out;
}

/// Same coefficient list for every tensor in `archive`.
inline CoeffMap uniform_coeffs(const TensorArchive & archive, std::vector<double> coeffs) {
    CoeffMap out;
    for (const auto & [name, t] : archive.tensors) {
        out.emplace(name, coeffs);
    }
    return out;
}

/// FNV-1a over a byte range; used for input digests in run manifests.
inline std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (auto b : bytes) {
        h ^= b;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string file_digest(const std::filesystem::path & path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open '" + path.string() + "'");
    }
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(bytes)));
    return buf;
}

} // namespace linmerge
