// Copyright (c) 2026, The linmerge Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "linmerge/error.hpp"
#include "linmerge/model.hpp"

namespace linmerge {

enum class Granularity { Model, Layer, AttnMlp, HeadMlp };

inline std::string to_string(Granularity g) {
    switch (g) {
    case Granularity::Model: return "model";
    case Granularity::Layer: return "layer";
    case Granularity::AttnMlp: return "attn_mlp";
    case Granularity::HeadMlp: return "head_mlp";
    }
    return "?";
}

inline Granularity parse_granularity(std::string_view s) {
    if (s == "model") return Granularity::Model;
    if (s == "layer") return Granularity::Layer;
    if (s == "attn_mlp" || s == "attn-mlp") return Granularity::AttnMlp;
    if (s == "head_mlp" || s == "head-mlp") return Granularity::HeadMlp;
    throw ConfigError("unknown granularity '" + std::string(s) + "' (model|layer|attn_mlp|head_mlp)");
}

enum class OutputKind { LayerOut, AttnBranch, MlpBranch, HeadBranch, EmbedRows, Logits, ModelLogits };

inline std::string to_string(OutputKind k) {
    switch (k) {
    case OutputKind::LayerOut: return "layer_out";
    case OutputKind::AttnBranch: return "attn_branch";
    case OutputKind::MlpBranch: return "mlp_branch";
    case OutputKind::HeadBranch: return "head_branch";
    case OutputKind::EmbedRows: return "embed_rows";
    case OutputKind::Logits: return "logits";
    case OutputKind::ModelLogits: return "model_logits";
    }
    return "?";
}

struct SubmoduleGroup {
    std::string id;
    /// Coarse family used when aggregating reports: model, layer, attn, mlp, head, embed, lm_head.
    std::string family;
    std::vector<std::string> param_names;
    TapId input_tap;
    OutputKind output_kind = OutputKind::LayerOut;
    int layer = -1;
    std::optional<int> head_index;

    std::size_t output_width(const ModelConfig & c) const {
        return (output_kind == OutputKind::Logits || output_kind == OutputKind::ModelLogits)
                   ? static_cast<std::size_t>(c.vocab_size)
                   : static_cast<std::size_t>(c.d_model);
    }
};

struct DecompositionPlan {
    Granularity granularity = Granularity::Layer;
    ModelConfig config;
    std::vector<SubmoduleGroup> groups;

    const SubmoduleGroup & group(std::string_view id) const {
        auto it = std::find_if(groups.begin(), groups.end(), [&](const auto & g) { return g.id == id; });
        if (it == groups.end()) {
            throw PlanError("unknown group '" + std::string(id) + "'");
        }
        return *it;
    }
};

/// Half-open element range of a tensor along one axis. Rows index the output
/// dimension of an [out x in] matrix, columns the input dimension.
struct Slice {
    enum class Axis { Rows, Cols } axis = Axis::Rows;
    std::size_t begin = 0;
    std::size_t end = 0;

    bool operator==(const Slice &) const = default;
};

struct ParamSlice {
    std::string tensor;
    std::optional<Slice> slice;

    bool operator==(const ParamSlice &) const = default;
};

struct HeadSlices {
    std::string q_proj, k_proj, v_proj, o_proj;
    Slice rows;  // of q/k/v
    Slice cols;  // of o_proj
};

inline HeadSlices head_slices(const ModelConfig & c, int layer, int head) {
    if (head < 0 || head >= c.n_heads) {
        throw PlanError("head " + std::to_string(head) + " out of range for " + std::to_string(c.n_heads) + " heads");
    }
    if (layer < 0 || layer >= c.n_layers) {
        throw PlanError("layer " + std::to_string(layer) + " out of range");
    }
    const auto dh = static_cast<std::size_t>(c.head_dim());
    const auto b = static_cast<std::size_t>(head) * dh;
    return {names::layer(layer, "attn.q_proj"),
            names::layer(layer, "attn.k_proj"),
            names::layer(layer, "attn.v_proj"),
            names::layer(layer, "attn.o_proj"),
            {Slice::Axis::Rows, b, b + dh},
            {Slice::Axis::Cols, b, b + dh}};
}

namespace detail {

inline std::vector<std::string> attn_params(int i) {
    return {names::layer(i, "norm1"), names::layer(i, "attn.q_proj"), names::layer(i, "attn.k_proj"),
            names::layer(i, "attn.v_proj"), names::layer(i, "attn.o_proj")};
}

inline std::vector<std::string> mlp_params(int i) {
    return {names::layer(i, "norm2"), names::layer(i, "mlp.gate_proj"), names::layer(i, "mlp.up_proj"),
            names::layer(i, "mlp.down_proj")};
}

inline SubmoduleGroup embed_group() {
    return {"embed", "embed", {names::embed}, TapId::tokens(), OutputKind::EmbedRows, -1, std::nullopt};
}

inline SubmoduleGroup lm_head_group(const ModelConfig & c) {
    // Input is the last residual stream; norm_final belongs to this group.
    return {"lm_head", "lm_head", {names::lm_head, names::norm_final},
            TapId::at(TapKind::LayerOut, c.n_layers - 1), OutputKind::Logits, -1, std::nullopt};
}

inline SubmoduleGroup mlp_group(int i) {
    return {"mlp." + std::to_string(i), "mlp", mlp_params(i), TapId::at(TapKind::MlpIn, i), OutputKind::MlpBranch,
            i, std::nullopt};
}

} // namespace detail

inline DecompositionPlan plan_decomposition(const ModelConfig & c, Granularity level) {
    c.validate();
    DecompositionPlan plan{level, c, {}};
    if (level == Granularity::Model) {
        SubmoduleGroup g{"model", "model", {}, TapId::tokens(), OutputKind::ModelLogits, -1, std::nullopt};
        for (const auto & [name, shape] : parameter_shapes(c)) {
            g.param_names.push_back(name);
        }
        plan.groups.push_back(std::move(g));
        return plan;
    }

    plan.groups.push_back(detail::embed_group());
    for (int i = 0; i < c.n_layers; ++i) {
        const auto li = std::to_string(i);
        const TapId layer_in = TapId::at(TapKind::LayerIn, i);
        switch (level) {
        case Granularity::Layer: {
            auto params = detail::attn_params(i);
            for (auto & p : detail::mlp_params(i)) {
                params.push_back(std::move(p));
            }
            plan.groups.push_back({"layer." + li, "layer", params, layer_in, OutputKind::LayerOut, i, std::nullopt});
            break;
        }
        case Granularity::AttnMlp:
            plan.groups.push_back(
                {"attn." + li, "attn", detail::attn_params(i), layer_in, OutputKind::AttnBranch, i, std::nullopt});
            plan.groups.push_back(detail::mlp_group(i));
            break;
        case Granularity::HeadMlp:
            for (int h = 0; h < c.n_heads; ++h) {
                std::vector<std::string> params;
                if (h == 0) {
                    params.push_back(names::layer(i, "norm1"));
                }
                for (const char * p : {"attn.q_proj", "attn.k_proj", "attn.v_proj", "attn.o_proj"}) {
                    params.push_back(names::layer(i, p));
                }
                plan.groups.push_back({"head." + li + "." + std::to_string(h), "head", params, layer_in,
                                       OutputKind::HeadBranch, i, h});
            }
            plan.groups.push_back(detail::mlp_group(i));
            break;
        case Granularity::Model: break;
        }
    }
    plan.groups.push_back(detail::lm_head_group(c));
    return plan;
}

/// Exact parameter slices a group owns.
inline std::vector<ParamSlice> module_parameters(const DecompositionPlan & plan, std::string_view group_id) {
    const auto & g = plan.group(group_id);
    std::vector<ParamSlice> out;
    if (g.output_kind != OutputKind::HeadBranch) {
        for (const auto & n : g.param_names) {
            out.push_back({n, std::nullopt});
        }
        return out;
    }
    const auto hs = head_slices(plan.config, g.layer, *g.head_index);
    if (*g.head_index == 0) {
        out.push_back({names::layer(g.layer, "norm1"), std::nullopt});
    }
    out.push_back({hs.q_proj, hs.rows});
    out.push_back({hs.k_proj, hs.rows});
    out.push_back({hs.v_proj, hs.rows});
    out.push_back({hs.o_proj, hs.cols});
    return out;
}

/// Calls fn(flat_index) for every element a ParamSlice covers in a tensor of `shape`.
template <class Fn>
void for_each_element(const ParamSlice & ps, const std::vector<std::size_t> & shape, Fn && fn) {
    std::size_t total = 1;
    for (auto d : shape) {
        total *= d;
    }
    if (!ps.slice) {
        for (std::size_t i = 0; i < total; ++i) {
            fn(i);
        }
        return;
    }
    const std::size_t cols = shape.size() == 2 ? shape[1] : 1;
    const std::size_t rows = total / cols;
    const auto & s = *ps.slice;
    if (s.axis == Slice::Axis::Rows) {
        for (std::size_t r = s.begin; r < s.end; ++r) {
            for (std::size_t c = 0; c < cols; ++c) {
                fn(r * cols + c);
            }
        }
    } else {
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = s.begin; c < s.end; ++c) {
                fn(r * cols + c);
            }
        }
    }
}

inline nlohmann::json plan_to_json(const DecompositionPlan & plan) {
    nlohmann::json groups = nlohmann::json::array();
    for (const auto & g : plan.groups) {
        nlohmann::json params = nlohmann::json::array();
        for (const auto & ps : module_parameters(plan, g.id)) {
            nlohmann::json p = {{"tensor", ps.tensor}};
            if (ps.slice) {
                p["axis"] = ps.slice->axis == Slice::Axis::Rows ? "rows" : "cols";
                p["range"] = {ps.slice->begin, ps.slice->end};
            }
            params.push_back(std::move(p));
        }
        nlohmann::json j = {{"id", g.id},
                            {"family", g.family},
                            {"input_tap", g.input_tap.str()},
                            {"output_kind", to_string(g.output_kind)},
                            {"params", std::move(params)}};
        if (g.head_index) {
            j["head_index"] = *g.head_index;
        }
        groups.push_back(std::move(j));
    }
    return {{"level", to_string(plan.granularity)}, {"groups", std::move(groups)}};
}

} // namespace linmerge
