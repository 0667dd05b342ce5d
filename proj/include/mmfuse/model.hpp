#pragma once

// The fusion networks. Every modality feeds two token streams, the
// time-ordered patches and the transposed feature rows, each with its
// own learned class token, encoder stack and classification head. The
// teacher additionally threads a small block of shared fusion tokens
// through every pair of temporal streams so cross-modal information is
// exchanged mid-extraction; the student is the same dual-stream design
// with a shallower stack and no fusion stage.

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mmfuse/nn.hpp"
#include "mmfuse/tensor.hpp"

namespace mmfuse::model {

struct ModalitySpec {
    std::string name;
    std::size_t patches = 0;  // P_m: aligned patch count
    std::size_t dim = 0;      // D_m: channels per patch
};

struct ModelConfig {
    std::vector<ModalitySpec> modalities;
    std::size_t classes = 0;
    std::size_t d_model = 64;
    std::size_t heads = 4;
    std::size_t teacher_mstt_layers = 4;
    std::size_t student_mstt_layers = 1;
    std::size_t tmt_layers = 2;
    std::size_t fusion_tokens = 4;

    std::size_t ff_dim() const { return 4 * d_model; }

    void validate() const {
        if (modalities.empty()) throw ConfigError("model config: no modalities");
        for (const auto& m : modalities) {
            if (m.name.empty()) throw ConfigError("model config: empty modality name");
            if (m.patches < 1 || m.dim < 1)
                throw ConfigError("model config: modality \"" + m.name + "\" needs patches >= 1 and dim >= 1");
            for (const auto& other : modalities)
                if (&m != &other && m.name == other.name)
                    throw ConfigError("model config: duplicate modality \"" + m.name + "\"");
        }
        if (classes < 1) throw ConfigError("model config: classes must be >= 1");
        if (heads < 1 || d_model < 1 || d_model % heads != 0)
            throw ConfigError("model config: d_model " + std::to_string(d_model) +
                              " not divisible into " + std::to_string(heads) + " heads");
        if (teacher_mstt_layers < 1 || student_mstt_layers < 1)
            throw ConfigError("model config: encoder stacks need at least one layer");
        if (tmt_layers < 1) throw ConfigError("model config: tmt_layers must be >= 1");
        if (fusion_tokens < 1) throw ConfigError("model config: fusion_tokens must be >= 1");
    }
};

// One stream (spatial or temporal) of one modality.
template <typename S>
struct StreamParamsT {
    nn::LinearParamsT<S> in_proj;  // raw width -> d_model
    TensorT<S> cls;                // [raw width]
    std::vector<nn::EncoderLayerParamsT<S>> layers;
    nn::LinearParamsT<S> head;  // d_model -> classes
    TensorT<S> pos;             // spatial only: constant sinusoid table [seq, raw width]
};

template <typename S>
struct ModalityNetT {
    std::string name;
    StreamParamsT<S> spatial;
    StreamParamsT<S> temporal;
};

// Shared fusion state for one modality pair: the learned tokens, the
// projection bridging them onto the second stream, and one encoder layer
// per fusion round per side.
template <typename S>
struct FusionPairT {
    std::size_t a = 0, b = 0;  // modality indices, a < b
    TensorT<S> tokens;         // [F, d_model]
    nn::LinearParamsT<S> bridge;
    std::vector<nn::EncoderLayerParamsT<S>> a_layers, b_layers;
};

// ==================== parameter counting ====================

namespace detail {

inline std::size_t linear_param_count(std::size_t in, std::size_t out) { return in * out + out; }

inline std::size_t encoder_layer_param_count(std::size_t d, std::size_t ff) {
    return 4 * linear_param_count(d, d) + linear_param_count(d, ff) + linear_param_count(ff, d) + 4 * d;
}

inline std::size_t stream_param_count(const ModelConfig& cfg, std::size_t raw_width, std::size_t layers) {
    return linear_param_count(raw_width, cfg.d_model) + raw_width +
           layers * encoder_layer_param_count(cfg.d_model, cfg.ff_dim()) +
           linear_param_count(cfg.d_model, cfg.classes);
}

}  // namespace detail

inline std::size_t student_parameter_count(const ModelConfig& cfg) {
    std::size_t total = 0;
    for (const auto& m : cfg.modalities)
        total += detail::stream_param_count(cfg, m.patches, cfg.student_mstt_layers) +
                 detail::stream_param_count(cfg, m.dim, cfg.student_mstt_layers);
    return total;
}

inline std::size_t teacher_parameter_count(const ModelConfig& cfg) {
    std::size_t total = 0;
    for (const auto& m : cfg.modalities)
        total += detail::stream_param_count(cfg, m.patches, cfg.teacher_mstt_layers) +
                 detail::stream_param_count(cfg, m.dim, cfg.teacher_mstt_layers);
    const std::size_t pairs = cfg.modalities.size() * (cfg.modalities.size() - 1) / 2;
    total += pairs * (cfg.fusion_tokens * cfg.d_model +
                      detail::linear_param_count(cfg.d_model, cfg.d_model) +
                      2 * cfg.tmt_layers * detail::encoder_layer_param_count(cfg.d_model, cfg.ff_dim()));
    return total;
}

// ==================== model construction ====================

namespace detail {

template <typename S>
StreamParamsT<S> make_stream(const ModelConfig& cfg, std::size_t raw_width, std::size_t seq_len,
                             std::size_t layers, bool with_pos, std::mt19937& rng) {
    StreamParamsT<S> s;
    s.in_proj = nn::make_linear<S>(raw_width, cfg.d_model, rng);
    s.cls = TensorT<S>::normal({raw_width}, rng, S(0), S(0.02), true);
    for (std::size_t l = 0; l < layers; ++l)
        s.layers.push_back(nn::make_encoder_layer<S>(cfg.d_model, cfg.heads, cfg.ff_dim(), rng));
    s.head = nn::make_linear<S>(cfg.d_model, cfg.classes, rng);
    // Odd raw widths occur whenever a patch count is odd, so the table is
    // built with the any-parity fill rather than the even-only entry point.
    if (with_pos) s.pos = nn::sinusoid_table<S>(seq_len, raw_width);
    return s;
}

template <typename S, typename Visitor>
void visit_stream(StreamParamsT<S>& s, const std::string& prefix, Visitor&& visit) {
    visit(prefix + ".in_proj.weight", s.in_proj.weight);
    visit(prefix + ".in_proj.bias", s.in_proj.bias);
    visit(prefix + ".cls", s.cls);
    for (std::size_t l = 0; l < s.layers.size(); ++l) {
        const std::string lp = prefix + ".layers." + std::to_string(l);
        auto& layer = s.layers[l];
        visit(lp + ".attn.wq.weight", layer.wq.weight);
        visit(lp + ".attn.wq.bias", layer.wq.bias);
        visit(lp + ".attn.wk.weight", layer.wk.weight);
        visit(lp + ".attn.wk.bias", layer.wk.bias);
        visit(lp + ".attn.wv.weight", layer.wv.weight);
        visit(lp + ".attn.wv.bias", layer.wv.bias);
        visit(lp + ".attn.wo.weight", layer.wo.weight);
        visit(lp + ".attn.wo.bias", layer.wo.bias);
        visit(lp + ".ff1.weight", layer.ff1.weight);
        visit(lp + ".ff1.bias", layer.ff1.bias);
        visit(lp + ".ff2.weight", layer.ff2.weight);
        visit(lp + ".ff2.bias", layer.ff2.bias);
        visit(lp + ".ln1.gain", layer.ln1_gain);
        visit(lp + ".ln1.shift", layer.ln1_shift);
        visit(lp + ".ln2.gain", layer.ln2_gain);
        visit(lp + ".ln2.shift", layer.ln2_shift);
    }
    visit(prefix + ".head.weight", s.head.weight);
    visit(prefix + ".head.bias", s.head.bias);
}

}  // namespace detail

template <typename S>
class StudentModelT;

template <typename S>
class TeacherModelT {
public:
    TeacherModelT(const ModelConfig& cfg, std::uint64_t seed) : config_(cfg) {
        cfg.validate();
        std::mt19937 rng(static_cast<std::uint32_t>(seed));
        for (const auto& spec : cfg.modalities) {
            ModalityNetT<S> net;
            net.name = spec.name;
            net.spatial =
                detail::make_stream<S>(cfg, spec.patches, spec.dim + 1, cfg.teacher_mstt_layers, true, rng);
            net.temporal =
                detail::make_stream<S>(cfg, spec.dim, spec.patches + 1, cfg.teacher_mstt_layers, false, rng);
            modalities_.push_back(std::move(net));
        }
        for (std::size_t i = 0; i < cfg.modalities.size(); ++i)
            for (std::size_t j = i + 1; j < cfg.modalities.size(); ++j) {
                FusionPairT<S> pair;
                pair.a = i;
                pair.b = j;
                pair.tokens =
                    TensorT<S>::normal({cfg.fusion_tokens, cfg.d_model}, rng, S(0), S(0.02), true);
                pair.bridge = nn::make_identity_linear<S>(cfg.d_model);
                for (std::size_t l = 0; l < cfg.tmt_layers; ++l) {
                    pair.a_layers.push_back(nn::make_encoder_layer<S>(cfg.d_model, cfg.heads, cfg.ff_dim(), rng));
                    pair.b_layers.push_back(nn::make_encoder_layer<S>(cfg.d_model, cfg.heads, cfg.ff_dim(), rng));
                }
                pairs_.push_back(std::move(pair));
            }
    }

    const ModelConfig& config() const { return config_; }
    std::vector<ModalityNetT<S>>& modalities() { return modalities_; }
    const std::vector<ModalityNetT<S>>& modalities() const { return modalities_; }
    std::vector<FusionPairT<S>>& pairs() { return pairs_; }
    const std::vector<FusionPairT<S>>& pairs() const { return pairs_; }

    template <typename Visitor>
    void visit_parameters(Visitor&& visit) {
        for (auto& net : modalities_) {
            detail::visit_stream(net.spatial, "mod." + net.name + ".spatial", visit);
            detail::visit_stream(net.temporal, "mod." + net.name + ".temporal", visit);
        }
        for (auto& pair : pairs_) {
            const std::string prefix =
                "pair." + modalities_[pair.a].name + "+" + modalities_[pair.b].name;
            visit(prefix + ".tokens", pair.tokens);
            visit(prefix + ".bridge.weight", pair.bridge.weight);
            visit(prefix + ".bridge.bias", pair.bridge.bias);
            for (std::size_t l = 0; l < pair.a_layers.size(); ++l) {
                nn::EncoderLayerParamsT<S>* sides[2] = {&pair.a_layers[l], &pair.b_layers[l]};
                const std::string names[2] = {modalities_[pair.a].name, modalities_[pair.b].name};
                for (int side = 0; side < 2; ++side) {
                    const std::string lp =
                        prefix + "." + names[side] + ".layers." + std::to_string(l);
                    auto& layer = *sides[side];
                    visit(lp + ".attn.wq.weight", layer.wq.weight);
                    visit(lp + ".attn.wq.bias", layer.wq.bias);
                    visit(lp + ".attn.wk.weight", layer.wk.weight);
                    visit(lp + ".attn.wk.bias", layer.wk.bias);
                    visit(lp + ".attn.wv.weight", layer.wv.weight);
                    visit(lp + ".attn.wv.bias", layer.wv.bias);
                    visit(lp + ".attn.wo.weight", layer.wo.weight);
                    visit(lp + ".attn.wo.bias", layer.wo.bias);
                    visit(lp + ".ff1.weight", layer.ff1.weight);
                    visit(lp + ".ff1.bias", layer.ff1.bias);
                    visit(lp + ".ff2.weight", layer.ff2.weight);
                    visit(lp + ".ff2.bias", layer.ff2.bias);
                    visit(lp + ".ln1.gain", layer.ln1_gain);
                    visit(lp + ".ln1.shift", layer.ln1_shift);
                    visit(lp + ".ln2.gain", layer.ln2_gain);
                    visit(lp + ".ln2.shift", layer.ln2_shift);
                }
            }
        }
    }

    std::vector<std::pair<std::string, TensorT<S>*>> named_parameters() {
        std::vector<std::pair<std::string, TensorT<S>*>> out;
        visit_parameters([&](const std::string& name, TensorT<S>& t) { out.emplace_back(name, &t); });
        return out;
    }

    std::size_t parameter_count() {
        std::size_t n = 0;
        visit_parameters([&](const std::string&, TensorT<S>& t) { n += t.size(); });
        return n;
    }

    void zero_grad() {
        visit_parameters([](const std::string&, TensorT<S>& t) { t.zero_grad(); });
    }

private:
    ModelConfig config_;
    std::vector<ModalityNetT<S>> modalities_;
    std::vector<FusionPairT<S>> pairs_;
};

template <typename S>
class StudentModelT {
public:
    StudentModelT(const ModelConfig& cfg, std::uint64_t seed) : config_(cfg) {
        cfg.validate();
        std::mt19937 rng(static_cast<std::uint32_t>(seed));
        for (const auto& spec : cfg.modalities) {
            ModalityNetT<S> net;
            net.name = spec.name;
            net.spatial =
                detail::make_stream<S>(cfg, spec.patches, spec.dim + 1, cfg.student_mstt_layers, true, rng);
            net.temporal =
                detail::make_stream<S>(cfg, spec.dim, spec.patches + 1, cfg.student_mstt_layers, false, rng);
            modalities_.push_back(std::move(net));
        }
        if (cfg.modalities.size() >= 2 &&
            student_parameter_count(cfg) >= teacher_parameter_count(cfg))
            throw ConfigError("student model is not smaller than its paired teacher (" +
                              std::to_string(student_parameter_count(cfg)) + " vs " +
                              std::to_string(teacher_parameter_count(cfg)) + " parameters)");
    }

    const ModelConfig& config() const { return config_; }
    std::vector<ModalityNetT<S>>& modalities() { return modalities_; }
    const std::vector<ModalityNetT<S>>& modalities() const { return modalities_; }

    template <typename Visitor>
    void visit_parameters(Visitor&& visit) {
        for (auto& net : modalities_) {
            detail::visit_stream(net.spatial, "mod." + net.name + ".spatial", visit);
            detail::visit_stream(net.temporal, "mod." + net.name + ".temporal", visit);
        }
    }

    std::vector<std::pair<std::string, TensorT<S>*>> named_parameters() {
        std::vector<std::pair<std::string, TensorT<S>*>> out;
        visit_parameters([&](const std::string& name, TensorT<S>& t) { out.emplace_back(name, &t); });
        return out;
    }

    std::size_t parameter_count() {
        std::size_t n = 0;
        visit_parameters([&](const std::string&, TensorT<S>& t) { n += t.size(); });
        return n;
    }

    void zero_grad() {
        visit_parameters([](const std::string&, TensorT<S>& t) { t.zero_grad(); });
    }

private:
    ModelConfig config_;
    std::vector<ModalityNetT<S>> modalities_;
};

// ==================== forward ====================

// Class token ahead of the time-ordered patches; no position table, the
// temporal order is carried by the patch sequence itself.
template <typename S>
TensorT<S> temporal_tokens(const TensorT<S>& x, const TensorT<S>& cls) {
    const std::size_t batch = x.extent(0);
    auto lead = reshape(repeat0(cls, batch), {batch, 1, cls.extent(0)});
    return concat_axis({lead, x}, 1);
}

// Class token ahead of the transposed feature rows, plus the sinusoid
// table over the whole token sequence.
template <typename S>
TensorT<S> spatial_tokens(const TensorT<S>& x, const TensorT<S>& cls, const TensorT<S>& pos) {
    const std::size_t batch = x.extent(0);
    auto rows = transpose_last2(x);
    auto lead = reshape(repeat0(cls, batch), {batch, 1, cls.extent(0)});
    auto seq = concat_axis({lead, rows}, 1);
    return add(seq, repeat0(pos, batch));
}

template <typename S>
struct StreamPairT {
    TensorT<S> spatial;   // [B, D_m+1, d_model]
    TensorT<S> temporal;  // [B, P_m+1, d_model]
};

template <typename S>
StreamPairT<S> prepare_streams(const TensorT<S>& x, const ModalityNetT<S>& net) {
    StreamPairT<S> out;
    out.spatial = nn::linear(spatial_tokens(x, net.spatial.cls, net.spatial.pos), net.spatial.in_proj);
    out.temporal = nn::linear(temporal_tokens(x, net.temporal.cls), net.temporal.in_proj);
    return out;
}

// Runs every modality's two encoder stacks. No cross-modality interaction
// happens here: modality m's outputs depend only on modality m's input.
template <typename S>
std::vector<StreamPairT<S>> mstt_forward(const std::vector<ModalityNetT<S>>& nets,
                                         const std::vector<TensorT<S>>& inputs) {
    if (nets.size() != inputs.size())
        throw ConfigError("mstt_forward: " + std::to_string(inputs.size()) + " inputs for " +
                          std::to_string(nets.size()) + " modalities");
    std::vector<StreamPairT<S>> out;
    out.reserve(nets.size());
    for (std::size_t m = 0; m < nets.size(); ++m) {
        auto streams = prepare_streams(inputs[m], nets[m]);
        streams.spatial = nn::encoder_stack(streams.spatial, nets[m].spatial.layers);
        streams.temporal = nn::encoder_stack(streams.temporal, nets[m].temporal.layers);
        out.push_back(std::move(streams));
    }
    return out;
}

template <typename S>
struct TmtLayerOutT {
    TensorT<S> a, b;       // fused streams, token block removed
    TensorT<S> tokens;     // [B, F, d_model] shared tokens for the next round
};

// One fusion round for one pair: tokens are prepended to both streams
// (bridged onto the second), each augmented stream passes its own encoder
// layer, and the two resulting token blocks are averaged into the shared
// tokens for the next round.
template <typename S>
TmtLayerOutT<S> tmt_fuse_layer(const TensorT<S>& h_a, const TensorT<S>& h_b, const TensorT<S>& tokens,
                               const nn::EncoderLayerParamsT<S>& layer_a,
                               const nn::EncoderLayerParamsT<S>& layer_b,
                               const nn::LinearParamsT<S>& bridge) {
    const std::size_t f = tokens.extent(1);
    if (f < 1) throw ConfigError("tmt_fuse_layer: no fusion tokens");
    auto out_a = nn::encoder_layer(concat_axis({tokens, h_a}, 1), layer_a);
    auto out_b = nn::encoder_layer(concat_axis({nn::linear(tokens, bridge), h_b}, 1), layer_b);
    TmtLayerOutT<S> out;
    out.tokens = scale(add(slice_axis(out_a, 1, 0, f), slice_axis(out_b, 1, 0, f)), 0.5);
    out.a = slice_axis(out_a, 1, f, h_a.extent(1));
    out.b = slice_axis(out_b, 1, f, h_b.extent(1));
    return out;
}

// Averages each modality's fused temporal stream over every pair that
// contains it. pair_members[k] gives the two modality indices of the k-th
// entry in pair_streams.
template <typename S>
std::vector<TensorT<S>> tmt_aggregate(const std::vector<std::pair<std::size_t, std::size_t>>& pair_members,
                                      const std::vector<std::pair<TensorT<S>, TensorT<S>>>& pair_streams,
                                      std::size_t modality_count) {
    if (modality_count < 2)
        throw ConfigError("tmt_aggregate: temporal mid-fusion needs at least 2 modalities");
    if (pair_members.size() != pair_streams.size() ||
        pair_members.size() != modality_count * (modality_count - 1) / 2)
        throw ConfigError("tmt_aggregate: expected one fused stream per modality pair");
    std::vector<TensorT<S>> out(modality_count);
    for (std::size_t m = 0; m < modality_count; ++m) {
        TensorT<S> acc;
        std::size_t count = 0;
        for (std::size_t k = 0; k < pair_members.size(); ++k) {
            const TensorT<S>* contribution = nullptr;
            if (pair_members[k].first == m) contribution = &pair_streams[k].first;
            if (pair_members[k].second == m) contribution = &pair_streams[k].second;
            if (!contribution) continue;
            acc = acc.defined() ? add(acc, *contribution) : *contribution;
            ++count;
        }
        if (count == 0) throw ConfigError("tmt_aggregate: modality " + std::to_string(m) + " is in no pair");
        out[m] = count == 1 ? acc : scale(acc, 1.0 / static_cast<double>(count));
    }
    return out;
}

template <typename S>
struct StreamOutputsT {
    TensorT<S> spatial_cls, temporal_cls;        // [B, d_model]
    TensorT<S> spatial_logits, temporal_logits;  // [B, classes]
    TensorT<S> spatial_probs, temporal_probs;    // [B, classes]
    TensorT<S> combined;                         // sum of the two probability vectors, mass 2
};

template <typename S>
struct ForwardResultT {
    std::vector<StreamOutputsT<S>> per_modality;
    TensorT<S> ensemble;               // [B, classes], normalized
    std::vector<int> predicted_labels;  // argmax, lowest class index wins ties
};

// Reads the class-token embedding of both streams and produces the
// per-modality score vector: softmax of each stream's head logits, summed.
template <typename S>
StreamOutputsT<S> modality_head(const TensorT<S>& spatial_seq, const TensorT<S>& temporal_seq,
                                const ModalityNetT<S>& net) {
    const std::size_t batch = spatial_seq.extent(0);
    const std::size_t width = spatial_seq.shape().back();
    StreamOutputsT<S> out;
    out.spatial_cls = reshape(slice_axis(spatial_seq, 1, 0, 1), {batch, width});
    out.temporal_cls = reshape(slice_axis(temporal_seq, 1, 0, 1), {batch, width});
    out.spatial_logits = nn::linear(out.spatial_cls, net.spatial.head);
    out.temporal_logits = nn::linear(out.temporal_cls, net.temporal.head);
    out.spatial_probs = softmax_lastdim(out.spatial_logits);
    out.temporal_probs = softmax_lastdim(out.temporal_logits);
    out.combined = add(out.spatial_probs, out.temporal_probs);
    return out;
}

template <typename S>
std::vector<int> argmax_rows(const TensorT<S>& t) {
    const std::size_t width = t.shape().back();
    const std::size_t rows = t.size() / width;
    std::vector<int> out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const S* row = t.values().data() + r * width;
        std::size_t best = 0;
        for (std::size_t j = 1; j < width; ++j)
            if (row[j] > row[best]) best = j;
        out[r] = static_cast<int>(best);
    }
    return out;
}

// Mean of the per-modality score vectors, rescaled so the result is a
// probability vector. The argmax matches the plain sum's argmax exactly,
// positive scaling being order preserving.
template <typename S>
std::pair<TensorT<S>, std::vector<int>> ensemble_predict(const std::vector<TensorT<S>>& per_modality) {
    if (per_modality.empty()) throw ConfigError("ensemble_predict: no modality outputs");
    TensorT<S> sum = per_modality[0];
    for (std::size_t m = 1; m < per_modality.size(); ++m) sum = add(sum, per_modality[m]);
    auto probs = scale(sum, 1.0 / (2.0 * static_cast<double>(per_modality.size())));
    return {probs, argmax_rows(probs)};
}

namespace detail {

template <typename S>
void check_inputs(const ModelConfig& cfg, const std::vector<TensorT<S>>& inputs) {
    if (inputs.size() != cfg.modalities.size())
        throw ConfigError("forward: got " + std::to_string(inputs.size()) + " modalities, config has " +
                          std::to_string(cfg.modalities.size()));
    for (std::size_t m = 0; m < inputs.size(); ++m) {
        const auto& spec = cfg.modalities[m];
        const auto& shape = inputs[m].shape();
        if (shape.size() != 3 || shape[1] != spec.patches || shape[2] != spec.dim)
            throw DimensionError("forward: modality \"" + spec.name + "\" expects [B," +
                                 std::to_string(spec.patches) + "," + std::to_string(spec.dim) + "], got " +
                                 shape_str(shape));
        if (shape[0] != inputs[0].shape()[0])
            throw DimensionError("forward: batch extents differ across modalities");
    }
}

template <typename S>
ForwardResultT<S> finish_heads(const std::vector<ModalityNetT<S>>& nets,
                               const std::vector<StreamPairT<S>>& spatial_streams,
                               const std::vector<TensorT<S>>& temporal_final) {
    ForwardResultT<S> result;
    std::vector<TensorT<S>> combined;
    for (std::size_t m = 0; m < nets.size(); ++m) {
        result.per_modality.push_back(modality_head(spatial_streams[m].spatial, temporal_final[m], nets[m]));
        combined.push_back(result.per_modality.back().combined);
    }
    auto [probs, labels] = ensemble_predict(combined);
    result.ensemble = std::move(probs);
    result.predicted_labels = std::move(labels);
    return result;
}

}  // namespace detail

template <typename S>
ForwardResultT<S> teacher_forward(const TeacherModelT<S>& model, const std::vector<TensorT<S>>& inputs) {
    detail::check_inputs(model.config(), inputs);
    const std::size_t batch = inputs[0].extent(0);
    auto streams = mstt_forward(model.modalities(), inputs);

    std::vector<TensorT<S>> temporal_final;
    if (model.pairs().empty()) {
        for (auto& s : streams) temporal_final.push_back(s.temporal);
    } else {
        std::vector<std::pair<std::size_t, std::size_t>> members;
        std::vector<std::pair<TensorT<S>, TensorT<S>>> fused;
        for (const auto& pair : model.pairs()) {
            TensorT<S> h_a = streams[pair.a].temporal;
            TensorT<S> h_b = streams[pair.b].temporal;
            TensorT<S> tokens = repeat0(pair.tokens, batch);
            for (std::size_t l = 0; l < pair.a_layers.size(); ++l) {
                auto round = tmt_fuse_layer(h_a, h_b, tokens, pair.a_layers[l], pair.b_layers[l], pair.bridge);
                h_a = std::move(round.a);
                h_b = std::move(round.b);
                tokens = std::move(round.tokens);
            }
            members.emplace_back(pair.a, pair.b);
            fused.emplace_back(std::move(h_a), std::move(h_b));
        }
        temporal_final = tmt_aggregate(members, fused, model.modalities().size());
    }
    return detail::finish_heads(model.modalities(), streams, temporal_final);
}

template <typename S>
ForwardResultT<S> student_forward(const StudentModelT<S>& model, const std::vector<TensorT<S>>& inputs) {
    detail::check_inputs(model.config(), inputs);
    auto streams = mstt_forward(model.modalities(), inputs);
    std::vector<TensorT<S>> temporal_final;
    for (auto& s : streams) temporal_final.push_back(s.temporal);
    return detail::finish_heads(model.modalities(), streams, temporal_final);
}

using TeacherModel = TeacherModelT<float>;
using StudentModel = StudentModelT<float>;

}  // namespace mmfuse::model
