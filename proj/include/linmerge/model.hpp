// Copyright (c) 2026, The linmerge Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "linmerge/error.hpp"
#include "linmerge/matrix.hpp"
#include "linmerge/tensor_archive.hpp"

namespace linmerge {

using Token = std::int32_t;
using Sequence = std::vector<Token>;

struct ModelConfig {
    int d_model = 0;
    int n_heads = 0;
    int n_layers = 0;
    int d_ff = 0;
    int vocab_size = 0;
    int max_seq = 0;
    double norm_eps = 1e-5;
    double rope_theta = 10000.0;

    int head_dim() const { return d_model / n_heads; }

    void validate() const {
        if (d_model < 1 || n_heads < 1 || n_layers < 1 || d_ff < 1 || vocab_size < 1 || max_seq < 1) {
            throw ConfigError("every model dimension must be >= 1");
        }
        if (d_model % n_heads != 0) {
            throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                              std::to_string(n_heads));
        }
        if (head_dim() % 2 != 0) {
            throw ConfigError("rotary embedding needs an even head dimension");
        }
        if (!(norm_eps > 0.0) || !(rope_theta > 0.0)) {
            throw ConfigError("norm_eps and rope_theta must be positive");
        }
    }

    bool operator==(const ModelConfig &) const = default;
};

inline void to_json(nlohmann::json & j, const ModelConfig & c) {
    j = {{"d_model", c.d_model},   {"n_heads", c.n_heads},       {"n_layers", c.n_layers},
         {"d_ff", c.d_ff},         {"vocab_size", c.vocab_size}, {"max_seq", c.max_seq},
         {"norm_eps", c.norm_eps}, {"rope_theta", c.rope_theta}};
}

inline void from_json(const nlohmann::json & j, ModelConfig & c) {
    try {
        j.at("d_model").get_to(c.d_model);
        j.at("n_heads").get_to(c.n_heads);
        j.at("n_layers").get_to(c.n_layers);
        j.at("d_ff").get_to(c.d_ff);
        j.at("vocab_size").get_to(c.vocab_size);
        j.at("max_seq").get_to(c.max_seq);
        c.norm_eps = j.value("norm_eps", 1e-5);
        c.rope_theta = j.value("rope_theta", 10000.0);
    } catch (const nlohmann::json::exception & e) {
        throw ConfigError(std::string("bad model config: ") + e.what());
    }
    c.validate();
}

inline ModelConfig config_from_archive(const TensorArchive & archive) {
    auto it = archive.meta.find("model_config");
    if (it == archive.meta.end()) {
        throw BindError("model_config");
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(it->second);
    } catch (const nlohmann::json::exception & e) {
        throw ConfigError(std::string("model_config is not JSON: ") + e.what());
    }
    return j.get<ModelConfig>();
}

namespace names {

inline std::string layer(int i, std::string_view leaf) { return "layers." + std::to_string(i) + "." + std::string(leaf); }

inline const std::string embed = "embed";
inline const std::string norm_final = "norm_final";
inline const std::string lm_head = "lm_head";

} // namespace names

/// Canonical parameter names and shapes ([out x in] for matrices).
inline std::map<std::string, std::vector<std::size_t>> parameter_shapes(const ModelConfig & c) {
    const auto d = static_cast<std::size_t>(c.d_model);
    const auto f = static_cast<std::size_t>(c.d_ff);
    const auto v = static_cast<std::size_t>(c.vocab_size);
    std::map<std::string, std::vector<std::size_t>> out;
    out[names::embed] = {v, d};
    for (int i = 0; i < c.n_layers; ++i) {
        out[names::layer(i, "norm1")] = {d};
        for (const char * p : {"attn.q_proj", "attn.k_proj", "attn.v_proj", "attn.o_proj"}) {
            out[names::layer(i, p)] = {d, d};
        }
        out[names::layer(i, "norm2")] = {d};
        out[names::layer(i, "mlp.gate_proj")] = {f, d};
        out[names::layer(i, "mlp.up_proj")] = {f, d};
        out[names::layer(i, "mlp.down_proj")] = {d, f};
    }
    out[names::norm_final] = {d};
    out[names::lm_head] = {v, d};
    return out;
}

/// Parameters widened to double, keyed by canonical name.
struct Weights {
    std::map<std::string, std::vector<double>, std::less<>> tensors;

    std::span<const double> at(std::string_view name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) {
            throw BindError(std::string(name));
        }
        return it->second;
    }
};

inline Weights widen(const TensorArchive & archive) {
    Weights w;
    for (const auto & [name, t] : archive.tensors) {
        w.tensors.emplace(name, std::vector<double>(t.data.begin(), t.data.end()));
    }
    return w;
}

/// Looks a name up in `overrides` first, then in `base`. Lets a submodule be
/// evaluated at arbitrary parameter settings without copying the whole model.
class WeightView {
public:
    explicit WeightView(const Weights & base, const Weights * overrides = nullptr)
        : base_(&base), overrides_(overrides) {}

    std::span<const double> operator()(std::string_view name) const {
        if (overrides_ != nullptr) {
            auto it = overrides_->tensors.find(name);
            if (it != overrides_->tensors.end()) {
                return it->second;
            }
        }
        return base_->at(name);
    }

private:
    const Weights * base_;
    const Weights * overrides_;
};

struct BoundModel {
    ModelConfig config;
    Weights weights;
};

inline BoundModel bind_weights(const TensorArchive & archive, const ModelConfig & config) {
    config.validate();
    const auto shapes = parameter_shapes(config);
    for (const auto & [name, shape] : shapes) {
        auto it = archive.tensors.find(name);
        if (it == archive.tensors.end()) {
            throw BindError(name);
        }
        if (it->second.shape != shape) {
            throw BindError(name + " (shape mismatch)");
        }
    }
    for (const auto & [name, t] : archive.tensors) {
        if (!shapes.contains(name)) {
            throw BindError(name + " (unexpected tensor)");
        }
    }
    return BoundModel{config, widen(archive)};
}

// ---------------------------------------------------------------------------
// Taps

enum class TapKind { Tokens, LayerIn, AttnIn, AttnOut, OprojIn, MlpIn, MlpOut, LayerOut, FinalHidden, Logits };

struct TapId {
    TapKind kind = TapKind::Tokens;
    int layer = -1;

    auto operator<=>(const TapId &) const = default;

    std::string str() const {
        switch (kind) {
        case TapKind::Tokens: return "tokens";
        case TapKind::FinalHidden: return "final_hidden";
        case TapKind::Logits: return "logits";
        case TapKind::LayerIn: return "layer_in." + std::to_string(layer);
        case TapKind::AttnIn: return "attn_in." + std::to_string(layer);
        case TapKind::AttnOut: return "attn_out." + std::to_string(layer);
        case TapKind::OprojIn: return "oproj_in." + std::to_string(layer);
        case TapKind::MlpIn: return "mlp_in." + std::to_string(layer);
        case TapKind::MlpOut: return "mlp_out." + std::to_string(layer);
        case TapKind::LayerOut: return "layer_out." + std::to_string(layer);
        }
        return "?";
    }

    bool valid_for(const ModelConfig & c) const {
        const bool per_layer = kind != TapKind::Tokens && kind != TapKind::FinalHidden && kind != TapKind::Logits;
        return per_layer ? (layer >= 0 && layer < c.n_layers) : layer == -1;
    }

    static TapId tokens() { return {TapKind::Tokens, -1}; }
    static TapId final_hidden() { return {TapKind::FinalHidden, -1}; }
    static TapId logits() { return {TapKind::Logits, -1}; }
    static TapId at(TapKind k, int layer) { return {k, layer}; }
};

using TapSpec = std::set<TapId>;

/// Every tap the model can emit.
inline TapSpec all_taps(const ModelConfig & c) {
    TapSpec s{TapId::final_hidden(), TapId::logits()};
    for (int i = 0; i < c.n_layers; ++i) {
        for (auto k : {TapKind::LayerIn, TapKind::AttnIn, TapKind::AttnOut, TapKind::OprojIn, TapKind::MlpIn,
                       TapKind::MlpOut, TapKind::LayerOut}) {
            s.insert(TapId::at(k, i));
        }
    }
    return s;
}

struct ForwardTrace {
    Matrix logits;
    std::map<TapId, Matrix> taps;
};

// ---------------------------------------------------------------------------
// Kernels. Shared by the full forward pass and by per-submodule evaluation so the
// two agree bit for bit on identical inputs.

namespace kernels {

inline Matrix rmsnorm(const Matrix & x, std::span<const double> weight, double eps) {
    Matrix out(x.rows, x.cols);
    for (std::size_t r = 0; r < x.rows; ++r) {
        const auto row = x.row(r);
        const double ms = dot(row, row) / static_cast<double>(x.cols);
        const double inv = 1.0 / std::sqrt(ms + eps);
        for (std::size_t c = 0; c < x.cols; ++c) {
            out(r, c) = row[c] * inv * weight[c];
        }
    }
    return out;
}

/// y = x * W[rows]^T for a row-major [out x in] weight, restricted to rows
/// [row_begin, row_begin + n_rows).
inline Matrix linear(const Matrix & x, std::span<const double> w, std::size_t in, std::size_t row_begin,
                     std::size_t n_rows) {
    assert(x.cols == in);
    Matrix out(x.rows, n_rows);
    for (std::size_t r = 0; r < x.rows; ++r) {
        const auto xr = x.row(r);
        for (std::size_t o = 0; o < n_rows; ++o) {
            out(r, o) = dot(xr, w.subspan((row_begin + o) * in, in));
        }
    }
    return out;
}

inline Matrix linear(const Matrix & x, std::span<const double> w, std::size_t out_dim) {
    return linear(x, w, x.cols, 0, out_dim);
}

/// Rotates consecutive pairs (2i, 2i+1) of every row by position * theta^(-2i/d).
inline void apply_rope(Matrix & x, double theta) {
    const std::size_t d = x.cols;
    for (std::size_t pos = 0; pos < x.rows; ++pos) {
        for (std::size_t i = 0; i < d / 2; ++i) {
            const double freq = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(d));
            const double angle = static_cast<double>(pos) * freq;
            const double cs = std::cos(angle);
            const double sn = std::sin(angle);
            const double a = x(pos, 2 * i);
            const double b = x(pos, 2 * i + 1);
            x(pos, 2 * i) = a * cs - b * sn;
            x(pos, 2 * i + 1) = a * sn + b * cs;
        }
    }
}

/// Causal single-head attention over a normalized sequence. Returns [seq x d_head].
inline Matrix attention_head(const Matrix & normed, std::span<const double> wq, std::span<const double> wk,
                             std::span<const double> wv, const ModelConfig & c, int head) {
    const auto d = static_cast<std::size_t>(c.d_model);
    const auto dh = static_cast<std::size_t>(c.head_dim());
    const std::size_t begin = static_cast<std::size_t>(head) * dh;
    Matrix q = linear(normed, wq, d, begin, dh);
    Matrix k = linear(normed, wk, d, begin, dh);
    const Matrix v = linear(normed, wv, d, begin, dh);
    apply_rope(q, c.rope_theta);
    apply_rope(k, c.rope_theta);

    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const std::size_t n = normed.rows;
    Matrix out(n, dh);
    std::vector<double> p(n);
    for (std::size_t i = 0; i < n; ++i) {
        double mx = -INFINITY;
        for (std::size_t j = 0; j <= i; ++j) {
            p[j] = dot(q.row(i), k.row(j)) * scale;
            mx = std::max(mx, p[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
            p[j] = std::exp(p[j] - mx);
            z += p[j];
        }
        for (std::size_t j = 0; j <= i; ++j) {
            const double wgt = p[j] / z;
            for (std::size_t e = 0; e < dh; ++e) {
                out(i, e) += wgt * v(j, e);
            }
        }
    }
    return out;
}

/// Applies the o_proj column block belonging to `head` to that head's output.
inline Matrix project_head(const Matrix & head_out, std::span<const double> wo, const ModelConfig & c, int head) {
    const auto d = static_cast<std::size_t>(c.d_model);
    const auto dh = static_cast<std::size_t>(c.head_dim());
    const std::size_t col0 = static_cast<std::size_t>(head) * dh;
    Matrix out(head_out.rows, d);
    for (std::size_t r = 0; r < head_out.rows; ++r) {
        const auto hr = head_out.row(r);
        for (std::size_t o = 0; o < d; ++o) {
            out(r, o) = dot(hr, wo.subspan(o * d + col0, dh));
        }
    }
    return out;
}

struct AttnResult {
    Matrix oproj_in;
    Matrix out;
};

inline AttnResult attention_branch(const Matrix & x, const WeightView & w, const ModelConfig & c, int layer) {
    const Matrix normed = rmsnorm(x, w(names::layer(layer, "norm1")), c.norm_eps);
    const auto wq = w(names::layer(layer, "attn.q_proj"));
    const auto wk = w(names::layer(layer, "attn.k_proj"));
    const auto wv = w(names::layer(layer, "attn.v_proj"));
    const auto dh = static_cast<std::size_t>(c.head_dim());
    AttnResult res{Matrix(x.rows, static_cast<std::size_t>(c.d_model)), {}};
    for (int h = 0; h < c.n_heads; ++h) {
        const Matrix ho = attention_head(normed, wq, wk, wv, c, h);
        for (std::size_t r = 0; r < x.rows; ++r) {
            for (std::size_t e = 0; e < dh; ++e) {
                res.oproj_in(r, static_cast<std::size_t>(h) * dh + e) = ho(r, e);
            }
        }
    }
    res.out = linear(res.oproj_in, w(names::layer(layer, "attn.o_proj")), static_cast<std::size_t>(c.d_model));
    return res;
}

inline double silu(double v) { return v / (1.0 + std::exp(-v)); }

inline Matrix mlp_branch(const Matrix & a, const WeightView & w, const ModelConfig & c, int layer) {
    const Matrix normed = rmsnorm(a, w(names::layer(layer, "norm2")), c.norm_eps);
    const auto ff = static_cast<std::size_t>(c.d_ff);
    const Matrix gate = linear(normed, w(names::layer(layer, "mlp.gate_proj")), ff);
    const Matrix up = linear(normed, w(names::layer(layer, "mlp.up_proj")), ff);
    Matrix act(a.rows, ff);
    for (std::size_t i = 0; i < act.data.size(); ++i) {
        act.data[i] = silu(gate.data[i]) * up.data[i];
    }
    return linear(act, w(names::layer(layer, "mlp.down_proj")), static_cast<std::size_t>(c.d_model));
}

inline Matrix add(const Matrix & a, const Matrix & b) {
    Matrix out = a;
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        out.data[i] += b.data[i];
    }
    return out;
}

inline Matrix embed_rows(std::span<const Token> tokens, std::span<const double> embed, const ModelConfig & c) {
    const auto d = static_cast<std::size_t>(c.d_model);
    Matrix x(tokens.size(), d);
    for (std::size_t s = 0; s < tokens.size(); ++s) {
        const auto row = embed.subspan(static_cast<std::size_t>(tokens[s]) * d, d);
        std::copy(row.begin(), row.end(), x.row(s).begin());
    }
    return x;
}

/// norm_final followed by the unembedding, applied to the last residual stream.
inline Matrix unembed(const Matrix & resid, const WeightView & w, const ModelConfig & c, Matrix * final_hidden) {
    Matrix h = rmsnorm(resid, w(names::norm_final), c.norm_eps);
    Matrix logits = linear(h, w(names::lm_head), static_cast<std::size_t>(c.vocab_size));
    if (final_hidden != nullptr) {
        *final_hidden = std::move(h);
    }
    return logits;
}

} // namespace kernels

inline void check_tokens(std::span<const Token> tokens, const ModelConfig & c) {
    if (tokens.empty() || tokens.size() > static_cast<std::size_t>(c.max_seq)) {
        throw InputError("sequence length " + std::to_string(tokens.size()) + " outside [1, " +
                         std::to_string(c.max_seq) + "]");
    }
    for (auto t : tokens) {
        if (t < 0 || t >= c.vocab_size) {
            throw InputError("token id " + std::to_string(t) + " outside vocabulary of " +
                             std::to_string(c.vocab_size));
        }
    }
}

/// Full forward pass through an arbitrary weight view. Records each tap in `taps`.
inline ForwardTrace forward_view(const ModelConfig & c, const WeightView & w, std::span<const Token> tokens,
                                 const TapSpec & taps) {
    check_tokens(tokens, c);
    for (const auto & t : taps) {
        if (!t.valid_for(c)) {
            throw InputError("tap '" + t.str() + "' is not valid for this model");
        }
    }
    ForwardTrace trace;
    auto record = [&](TapId id, const Matrix & m) {
        if (taps.contains(id)) {
            trace.taps[id] = m;
        }
    };
    if (taps.contains(TapId::tokens())) {
        Matrix tm(tokens.size(), 1);
        for (std::size_t s = 0; s < tokens.size(); ++s) {
            tm(s, 0) = tokens[s];
        }
        trace.taps[TapId::tokens()] = std::move(tm);
    }

    Matrix x = kernels::embed_rows(tokens, w(names::embed), c);
    for (int i = 0; i < c.n_layers; ++i) {
        record(TapId::at(TapKind::LayerIn, i), x);
        record(TapId::at(TapKind::AttnIn, i), x);
        auto attn = kernels::attention_branch(x, w, c, i);
        record(TapId::at(TapKind::OprojIn, i), attn.oproj_in);
        record(TapId::at(TapKind::AttnOut, i), attn.out);
        Matrix a = kernels::add(x, attn.out);
        record(TapId::at(TapKind::MlpIn, i), a);
        Matrix m = kernels::mlp_branch(a, w, c, i);
        record(TapId::at(TapKind::MlpOut, i), m);
        x = kernels::add(a, m);
        record(TapId::at(TapKind::LayerOut, i), x);
    }
    Matrix final_hidden;
    trace.logits = kernels::unembed(x, w, c, &final_hidden);
    record(TapId::final_hidden(), final_hidden);
    record(TapId::logits(), trace.logits);
    return trace;
}

inline ForwardTrace forward_with_taps(const BoundModel & model, std::span<const Token> tokens, const TapSpec & taps) {
    return forward_view(model.config, WeightView(model.weights), tokens, taps);
}

/// Mean next-token cross-entropy (nats), pooled over every predictable position
/// of every sequence.
inline double eval_cross_entropy(const BoundModel & model, std::span<const Sequence> dataset) {
    if (dataset.empty()) {
        throw InputError("empty dataset");
    }
    double total = 0.0;
    std::size_t count = 0;
    for (const auto & seq : dataset) {
        if (seq.size() < 2) {
            throw InputError("sequences need at least 2 tokens to score");
        }
        const auto trace = forward_with_taps(model, seq, {});
        for (std::size_t p = 0; p + 1 < seq.size(); ++p) {
            const auto row = trace.logits.row(p);
            double mx = -INFINITY;
            for (double v : row) {
                mx = std::max(mx, v);
            }
            double z = 0.0;
            for (double v : row) {
                z += std::exp(v - mx);
            }
            total += (mx + std::log(z)) - row[static_cast<std::size_t>(seq[p + 1])];
            ++count;
        }
    }
    return total / static_cast<double>(count);
}

} // namespace linmerge
