#pragma once

#include <array>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "xmic/datastore.hpp"
#include "xmic/nn.hpp"
#include "xmic/text_encoder.hpp"

namespace xmic {

// Inner-normalization toggles of the conditioning rule. n1: l2-normalize the
// V_II features before the adapter; n2: l2-normalize a_v before the sum;
// n3: l2-normalize the text features before the sum. The final normalization
// of the summed row is always applied.
struct NormFlags {
    bool n1 = true;
    bool n2 = false;
    bool n3 = false;

    bool operator==(const NormFlags&) const = default;

    std::string to_string() const {
        std::string s;
        if (n1) s += "n1";
        if (n2) s += (s.empty() ? "" : ",") + std::string("n2");
        if (n3) s += (s.empty() ? "" : ",") + std::string("n3");
        return s.empty() ? "none" : s;
    }
};

inline NormFlags parse_norm_flags(const std::string& text) {
    NormFlags f{false, false, false};
    if (text == "none" || text.empty()) return f;
    std::string token;
    auto consume = [&]() {
        if (token.empty()) return;
        if (token == "n1")
            f.n1 = true;
        else if (token == "n2")
            f.n2 = true;
        else if (token == "n3")
            f.n3 = true;
        else
            throw ConfigError("unknown norm flag '" + token + "' (expected n1,n2,n3 or none)");
        token.clear();
    };
    for (char c : text) {
        if (c == ',')
            consume();
        else if (c != ' ')
            token.push_back(c);
    }
    consume();
    return f;
}

// Which streams feed the per-frame spatial attention pair. Both is the
// full-frame + hand-crop module; FullOnly/HandOnly duplicate one stream into
// both token slots.
enum class SpatialMode { Both, FullOnly, HandOnly };

inline std::string spatial_mode_name(SpatialMode m) {
    switch (m) {
        case SpatialMode::Both: return "F+H";
        case SpatialMode::FullOnly: return "F";
        case SpatialMode::HandOnly: return "H";
    }
    throw Error("unreachable spatial mode");
}

inline SpatialMode parse_spatial_mode(const std::string& s) {
    if (s == "F+H" || s == "both") return SpatialMode::Both;
    if (s == "F" || s == "full") return SpatialMode::FullOnly;
    if (s == "H" || s == "hand") return SpatialMode::HandOnly;
    throw ConfigError("unknown spatial mode '" + s + "' (expected F, H or F+H)");
}

// ---------------------------------------------------------------------------
// X-MIC adapter

struct XmicAdapter {
    std::size_t dim = 0;
    Scalar alpha = 1.0;
    NormFlags norms;
    bool temporal_enabled = true;  // false replaces b_T with a plain average
    TransformerBlockParams b_s;
    TransformerBlockParams b_t1, b_t2;
    // Output projection of the adapter. Zero-initialized (flag on) it pins
    // a_v = 0 at the start of training so predictions begin exactly at
    // zero-shot; identity otherwise.
    Tensor w_out, b_out;

    NamedParams named(const std::string& prefix = "xmic") const {
        NamedParams p = b_s.named(prefix + ".b_s");
        NamedParams t1 = b_t1.named(prefix + ".b_t1");
        NamedParams t2 = b_t2.named(prefix + ".b_t2");
        p.insert(p.end(), t1.begin(), t1.end());
        p.insert(p.end(), t2.begin(), t2.end());
        p.emplace_back(prefix + ".w_out", w_out);
        p.emplace_back(prefix + ".b_out", b_out);
        return p;
    }
};

inline XmicAdapter make_xmic_adapter(std::size_t dim, Rng& rng, bool zero_init = true,
                                     Scalar alpha = 1.0, NormFlags norms = NormFlags{}) {
    if (alpha <= 0) throw BadSpecError("alpha must be positive");
    XmicAdapter a;
    a.dim = dim;
    a.alpha = alpha;
    a.norms = norms;
    a.b_s = make_transformer_block(dim, rng, zero_init);
    a.b_t1 = make_transformer_block(dim, rng, zero_init);
    a.b_t2 = make_transformer_block(dim, rng, zero_init);
    a.w_out = zero_init ? Tensor::zeros({dim, dim}, true) : Tensor::eye(dim, true);
    a.b_out = Tensor::zeros({dim}, true);
    return a;
}

// Per frame i, b_S runs on the length-2 sequence [x_i; x_i_hand] and the two
// updated tokens are averaged. Frames are independent of each other here.
inline Tensor ego_spatial_block(const Tensor& frames, const Tensor& hands,
                                const TransformerBlockParams& b_s) {
    if (frames.rank() != 2 || hands.rank() != 2 || frames.shape() != hands.shape())
        throw DimMismatchError("ego_spatial_block: frames " + shape_to_string(frames.shape()) +
                               " vs hands " + shape_to_string(hands.shape()));
    std::size_t n = frames.dim(0);
    if (n == 0) throw EmptySequenceError("ego_spatial_block on zero frames");
    std::vector<Tensor> updated;
    updated.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Tensor pair = concat_rows({row(frames, i), row(hands, i)});
        updated.push_back(mean_pool(transformer_block(pair, b_s)));
    }
    return n == 1 ? reshape(updated[0], {std::size_t{1}, frames.dim(1)}) : concat_rows(updated);
}

inline Tensor temporal_block(const Tensor& seq, const TransformerBlockParams& b_t1,
                             const TransformerBlockParams& b_t2) {
    if (seq.rank() != 2) throw BadShapeError("temporal_block expects [N, D]");
    if (seq.dim(0) == 0) throw EmptySequenceError("temporal_block on empty sequence");
    return mean_pool(transformer_block(transformer_block(seq, b_t1), b_t2));
}

// Full adapter: optional input normalization (n1), spatial block, temporal
// aggregation, output projection. Returns the X-MIC vector a_v.
inline Tensor xmic_forward(const Tensor& frames_v2, const Tensor& hands_v2,
                           const XmicAdapter& adapter) {
    if (frames_v2.rank() != 2 || frames_v2.dim(1) != adapter.dim)
        throw DimMismatchError("xmic_forward: frames " + shape_to_string(frames_v2.shape()) +
                               " vs adapter dim " + std::to_string(adapter.dim));
    Tensor f = adapter.norms.n1 ? l2_normalize(frames_v2) : frames_v2;
    Tensor h = adapter.norms.n1 ? l2_normalize(hands_v2) : hands_v2;
    Tensor spatial = ego_spatial_block(f, h, adapter.b_s);
    Tensor pooled = adapter.temporal_enabled ? temporal_block(spatial, adapter.b_t1, adapter.b_t2)
                                             : mean_pool(spatial);
    return add(matvec(adapter.w_out, pooled), adapter.b_out);
}

namespace detail {
inline Scalar vector_norm(const Tensor& t) {
    Scalar s = 0.0;
    for (Scalar v : t.data()) s += v * v;
    return std::sqrt(s);
}
}  // namespace detail

// Adapted rows per the conditioning rule: l2_normalize(maybe_n3(e_t) +
// alpha * maybe_n2(a_v)). n2 on an (exactly) zero a_v is the identity rather
// than an error, so zero-initialized adapters can take their first step.
inline Tensor condition_rows(const Tensor& raw_rows, const Tensor& a_v, Scalar alpha,
                             const NormFlags& norms) {
    if (raw_rows.rank() != 2 || a_v.rank() != 1 || a_v.dim(0) != raw_rows.dim(1))
        throw DimMismatchError("condition_rows: a_v " + shape_to_string(a_v.shape()) + " vs rows " +
                               shape_to_string(raw_rows.shape()));
    if (alpha <= 0) throw BadSpecError("alpha must be positive");
    Tensor e = norms.n3 ? l2_normalize(raw_rows) : raw_rows;
    Tensor a = a_v;
    if (norms.n2 && detail::vector_norm(a_v) > kL2NormEpsilon) a = l2_normalize(a_v);
    return l2_normalize(add_rowvec(e, scale(a, alpha)));
}

inline TextClassifier condition_classifier(const TextClassifier& classifier, const Tensor& a_v,
                                           const XmicAdapter& adapter) {
    Tensor adapted = condition_rows(classifier.raw, a_v, adapter.alpha, adapter.norms);
    TextClassifier out;
    out.raw = adapted;
    out.normalized = adapted;  // already unit rows
    out.vocab = classifier.vocab;
    return out;
}

// ---------------------------------------------------------------------------
// Baseline adapters

struct PromptLearner {
    Tensor vectors;  // [P, D_tok]

    std::size_t count() const { return vectors.dim(0); }

    NamedParams named(const std::string& prefix = "prompts") const {
        return {{prefix + ".vectors", vectors}};
    }
};

inline PromptLearner make_prompt_learner(std::size_t count, std::size_t token_dim, Rng& rng) {
    PromptLearner p;
    p.vectors = count == 0 ? Tensor::zeros({0, token_dim}, true)
                           : Tensor::randn({count, token_dim}, rng, kInitStddev, true);
    return p;
}

// CoCoOp-style conditioning: a small trainable map from the video embedding
// into token space; its output, gated by a zero-initialized blend, is added
// to every prompt vector. Zero map or zero blend reduces exactly to CoOp.
struct ConditionalPromptAdapter {
    PromptLearner prompts;
    Tensor w_map;  // [D_tok, D]
    Tensor b_map;  // [D_tok]
    Tensor blend;  // [1], init 0

    Tensor conditional_vector(const Tensor& video_embedding) const {
        return scale_by(add(matvec(w_map, video_embedding), b_map), blend);
    }

    NamedParams named(const std::string& prefix = "cocoop") const {
        NamedParams p = prompts.named(prefix + ".prompts");
        p.emplace_back(prefix + ".w_map", w_map);
        p.emplace_back(prefix + ".b_map", b_map);
        p.emplace_back(prefix + ".blend", blend);
        return p;
    }
};

inline ConditionalPromptAdapter make_conditional_prompt_adapter(std::size_t prompt_count,
                                                                std::size_t token_dim,
                                                                std::size_t dim, Rng& rng) {
    if (prompt_count == 0)
        throw IncompatibleCompositionError("cross-modal prompts need at least one prompt vector");
    ConditionalPromptAdapter a;
    a.prompts = make_prompt_learner(prompt_count, token_dim, rng);
    a.w_map = Tensor::randn({token_dim, dim}, rng, kInitStddev, true);
    a.b_map = Tensor::zeros({token_dim}, true);
    a.blend = Tensor::zeros({1}, true);
    return a;
}

// CLIP-Adapter style bottleneck: blend of the input with a D -> D/4 -> D
// MLP output, re-normalized.
struct BottleneckAdapter {
    Scalar blend_r = 0.2;  // share of the original features
    Tensor w_down, b_down, w_up, b_up;

    NamedParams named(const std::string& prefix) const {
        return {{prefix + ".w_down", w_down},
                {prefix + ".b_down", b_down},
                {prefix + ".w_up", w_up},
                {prefix + ".b_up", b_up}};
    }
};

inline BottleneckAdapter make_bottleneck_adapter(std::size_t dim, Rng& rng, Scalar blend_r = 0.2) {
    if (blend_r < 0.0 || blend_r > 1.0) throw BadSpecError("bottleneck blend must be in [0, 1]");
    std::size_t hidden = std::max<std::size_t>(1, dim / 4);
    BottleneckAdapter a;
    a.blend_r = blend_r;
    a.w_down = Tensor::randn({dim, hidden}, rng, kInitStddev, true);
    a.b_down = Tensor::zeros({hidden}, true);
    a.w_up = Tensor::randn({hidden, dim}, rng, kInitStddev, true);
    a.b_up = Tensor::zeros({dim}, true);
    return a;
}

// Rows in, unit rows out: r * x + (1 - r) * Up(QuickGELU(Down(x))), normalized.
inline Tensor bottleneck_forward(const BottleneckAdapter& a, const Tensor& x) {
    if (x.rank() != 2 || x.dim(1) != a.w_down.dim(0))
        throw DimMismatchError("bottleneck_forward: input " + shape_to_string(x.shape()) +
                               " vs adapter dim " + std::to_string(a.w_down.dim(0)));
    Tensor adapted = add_rowvec(matmul(quick_gelu(add_rowvec(matmul(x, a.w_down), a.b_down)), a.w_up),
                                a.b_up);
    return l2_normalize(add(scale(x, a.blend_r), scale(adapted, 1.0 - a.blend_r)));
}

// ---------------------------------------------------------------------------
// Strategy / composition

struct Strategy {
    bool xmic = false;
    bool early_uni = false;    // CoOp: shared learnable prompts
    bool early_cross = false;  // CoCoOp: video-conditioned prompts
    bool tt = false;           // late-fusion uni-modal text adapter
    bool vv = false;           // late-fusion uni-modal video adapter

    bool zero_shot() const { return !(xmic || early_uni || early_cross || tt || vv); }
    bool early_fusion() const { return early_uni || early_cross; }

    std::string to_string() const {
        if (zero_shot()) return "zero-shot";
        std::string s;
        auto append = [&](const char* part) {
            if (!s.empty()) s += "+";
            s += part;
        };
        if (early_uni) append("early-uni");
        if (early_cross) append("early-cross");
        if (xmic) append("xmic");
        if (tt) append("tt");
        if (vv) append("vv");
        return s;
    }
};

inline Strategy parse_strategy(const std::string& text) {
    Strategy s;
    std::string token;
    bool saw_zero_shot = false;
    auto consume = [&]() {
        if (token.empty()) return;
        if (token == "zero-shot" || token == "no-fusion")
            saw_zero_shot = true;
        else if (token == "xmic")
            s.xmic = true;
        else if (token == "early-uni" || token == "coop")
            s.early_uni = true;
        else if (token == "early-cross" || token == "cocoop")
            s.early_cross = true;
        else if (token == "tt")
            s.tt = true;
        else if (token == "vv")
            s.vv = true;
        else if (token == "clip-adapter")
            s.tt = s.vv = true;
        else
            throw ConfigError("unknown strategy component '" + token + "'");
        token.clear();
    };
    for (char c : text) {
        if (c == '+')
            consume();
        else if (c != ' ')
            token.push_back(c);
    }
    consume();
    if (saw_zero_shot && !s.zero_shot())
        throw IncompatibleCompositionError("zero-shot cannot be combined with adapters");
    if (s.early_uni && s.early_cross)
        throw IncompatibleCompositionError(
            "early-uni and early-cross prompts are mutually exclusive");
    return s;
}

// ---------------------------------------------------------------------------
// Composed model

struct ModelConfig {
    std::size_t dim = 32;
    Strategy strategy;
    Scalar alpha = 1.0;
    NormFlags norms;
    bool zero_init = true;
    bool temporal_enabled = true;
    SpatialMode spatial = SpatialMode::Both;
    std::size_t prompt_count = 4;
    Scalar bottleneck_blend = 0.2;
    std::uint64_t seed = 0;
    std::uint64_t encoder_seed = 0;  // 0: derive from seed
};

// Batch-shared text state: the classifier work that does not depend on the
// clip is done once here — name encoding (unless conditioned per clip), the
// Tt bottleneck, and the final normalization when no per-clip conditioning
// follows. This hoisting is what makes the uni-modal paths batch-independent.
struct TextState {
    Tensor shared_raw;   // [C, D] post-Tt rows; undefined when prompts are clip-conditioned
    Tensor shared_unit;  // [C, D] unit rows; defined only when no per-clip adaptation remains
};

struct Model {
    ModelConfig config;
    std::optional<XmicAdapter> xmic;
    std::optional<PromptLearner> prompts;
    std::optional<ConditionalPromptAdapter> cocoop;
    std::optional<BottleneckAdapter> tt, vv;
    std::shared_ptr<ToyTextEncoder> encoder;

    NamedParams trainable() const {
        NamedParams out;
        auto extend = [&](NamedParams p) { out.insert(out.end(), p.begin(), p.end()); };
        if (xmic) extend(xmic->named());
        if (prompts) extend(prompts->named());
        if (cocoop) extend(cocoop->named());
        if (tt) extend(tt->named("tt"));
        if (vv) extend(vv->named("vv"));
        return out;
    }

    bool classifier_from_encoder(bool have_fixed_rows) const {
        return config.strategy.early_fusion() || !have_fixed_rows;
    }

    // Base (pre-Tt, pre-conditioning) raw rows for a vocabulary. `fixed` may
    // be null when the encoder is the source. For early-cross the conditional
    // vector is supplied per clip via `conditional`.
    Tensor base_raw_rows(const ClassVocabulary& vocab, const TextClassifier* fixed,
                         const Tensor& conditional = Tensor()) const {
        if (classifier_from_encoder(fixed != nullptr)) {
            if (!encoder) throw IncompatibleCompositionError("strategy needs a text encoder");
            Tensor prompt_vectors;
            if (config.strategy.early_cross) {
                prompt_vectors = cocoop->prompts.vectors;
            } else if (config.strategy.early_uni) {
                prompt_vectors = prompts->vectors;
            }
            return encoder->encode_rows(vocab.names, prompt_vectors, conditional);
        }
        if (conditional.defined())
            throw IncompatibleCompositionError("conditional prompts need the encoder path");
        return fixed->raw;
    }

    // Per-clip text rows for the video-conditioned prompt path, post-Tt.
    Tensor clip_text_rows(const ClassVocabulary& vocab, const TextClassifier* fixed,
                          const Tensor& conditional) const {
        Tensor raw = base_raw_rows(vocab, fixed, conditional);
        if (tt) raw = bottleneck_forward(*tt, raw);
        return raw;
    }

    TextState make_text_state(const ClassVocabulary& vocab, const TextClassifier* fixed) const {
        TextState state;
        if (config.strategy.early_cross) return state;
        state.shared_raw = base_raw_rows(vocab, fixed);
        if (tt) state.shared_raw = bottleneck_forward(*tt, state.shared_raw);
        if (!xmic) state.shared_unit = l2_normalize(state.shared_raw);
        return state;
    }

    // Unit-norm video query from the V stream (plus Vv when composed).
    Tensor video_query(const Tensor& sampled_frames) const {
        Tensor e = l2_normalize(mean_pool(l2_normalize(sampled_frames)));
        if (vv) {
            Tensor rows = bottleneck_forward(*vv, reshape(e, {std::size_t{1}, e.dim(0)}));
            e = row(rows, 0);
        }
        return e;
    }

    // The adapter input pair after spatial-stream masking.
    std::pair<Tensor, Tensor> spatial_streams(const Tensor& full, const Tensor& hand) const {
        switch (config.spatial) {
            case SpatialMode::Both: return {full, hand};
            case SpatialMode::FullOnly: return {full, full};
            case SpatialMode::HandOnly: return {hand, hand};
        }
        throw Error("unreachable spatial mode");
    }

    Tensor xmic_vector(const Tensor& full_v2, const Tensor& hand_v2) const {
        auto [f, h] = spatial_streams(full_v2, hand_v2);
        return xmic_forward(f, h, *xmic);
    }
};

inline Model make_model(const ModelConfig& config_in, bool need_encoder) {
    ModelConfig config = config_in;
    if (config.encoder_seed == 0) config.encoder_seed = derive_seed(config.seed, 0x73c0de);
    Model m;
    m.config = config;
    Rng rng = make_rng(derive_seed(config.seed, 0xada97e));
    if (config.strategy.xmic)
        m.xmic = make_xmic_adapter(config.dim, rng, config.zero_init, config.alpha, config.norms);
    if (m.xmic) m.xmic->temporal_enabled = config.temporal_enabled;
    if (need_encoder || config.strategy.early_fusion())
        m.encoder = std::make_shared<ToyTextEncoder>(config.dim, config.encoder_seed);
    if (config.strategy.early_uni)
        m.prompts = make_prompt_learner(config.prompt_count, m.encoder->token_dim(), rng);
    if (config.strategy.early_cross)
        m.cocoop = make_conditional_prompt_adapter(config.prompt_count, m.encoder->token_dim(),
                                                   config.dim, rng);
    if (config.strategy.tt) m.tt = make_bottleneck_adapter(config.dim, rng, config.bottleneck_blend);
    if (config.strategy.vv) m.vv = make_bottleneck_adapter(config.dim, rng, config.bottleneck_blend);
    return m;
}

}  // namespace xmic
