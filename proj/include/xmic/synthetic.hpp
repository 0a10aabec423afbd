#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xmic/datastore.hpp"
#include "xmic/text_encoder.hpp"

namespace xmic {

// Desk-scale stand-in for the frozen encoders: class prototypes on the unit
// sphere, noisy frame/hand embeddings around them, and text rows displaced
// along per-class shift directions (the synthetic domain gap). Each direction
// mixes one global component with a pull toward a confusable neighbour class,
// so a large enough shift genuinely breaks zero-shot ranking instead of adding
// an offset that cancels in the argmax.
struct SyntheticSpec {
    std::size_t classes = 16;
    std::size_t dim = 32;
    std::size_t clips_per_class = 50;
    std::size_t frames_per_clip = 16;
    Scalar noise_sigma = 0.4;
    Scalar text_shift = 1.5;
    Scalar hand_shift = 0.0;
    std::uint64_t seed = 1;
    std::string dataset = "synthetic";

    void validate() const {
        if (dim < 8 || dim % 8 != 0)
            throw BadSpecError("dim must be >= 8 and divisible by 8, got " + std::to_string(dim));
        if (classes == 0 || clips_per_class == 0 || frames_per_clip == 0)
            throw BadSpecError("classes, clips_per_class and frames_per_clip must be positive");
        if (noise_sigma < 0 || text_shift < 0 || hand_shift < 0)
            throw BadSpecError("noise_sigma, text_shift and hand_shift must be non-negative");
    }
};

inline SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j) {
    SyntheticSpec s;
    s.classes = j.value("classes", s.classes);
    s.dim = j.value("dim", s.dim);
    s.clips_per_class = j.value("clips_per_class", s.clips_per_class);
    s.frames_per_clip = j.value("frames_per_clip", s.frames_per_clip);
    s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
    s.text_shift = j.value("text_shift", s.text_shift);
    s.hand_shift = j.value("hand_shift", s.hand_shift);
    s.seed = j.value("seed", s.seed);
    s.dataset = j.value("dataset", s.dataset);
    return s;
}

inline nlohmann::json synthetic_spec_to_json(const SyntheticSpec& s) {
    return {{"classes", s.classes},
            {"dim", s.dim},
            {"clips_per_class", s.clips_per_class},
            {"frames_per_clip", s.frames_per_clip},
            {"noise_sigma", s.noise_sigma},
            {"text_shift", s.text_shift},
            {"hand_shift", s.hand_shift},
            {"seed", s.seed},
            {"dataset", s.dataset}};
}

struct SyntheticData {
    SyntheticSpec spec;
    EmbeddingStore store;  // labels filled
    std::vector<ManifestEntry> manifest;
    ClassVocabulary vocab;
    std::vector<std::vector<Scalar>> prototypes;  // C x D, unit
    std::vector<Scalar> shift_dir;                // D, unit (global component)
    std::vector<std::vector<Scalar>> hand_dirs;   // C x D, unit
    std::vector<std::vector<Scalar>> text_dirs;   // C x D, unit per-class shift directions
    Tensor text_rows_raw;                         // C x D: u_c + text_shift * dir_c

    TextClassifier classifier() const { return build_text_classifier(text_rows_raw, vocab); }
};

namespace detail {

// Frames are stored at encoder-native scale: a per-frame scale jitter stands in
// for the unnormalized magnitudes a real backbone emits. The classification
// pipeline re-normalizes every frame, so Eq. 1 behavior is unaffected; only the
// adapter input stream sees the raw scales (tamed by the n1 flag).
inline std::vector<float> noisy_point(const std::vector<Scalar>& center, Scalar sigma,
                                      Rng& rng, std::size_t dim) {
    std::vector<Scalar> v(dim);
    fill_normal(rng, v);
    std::uniform_real_distribution<Scalar> scale_dist(0.5, 2.0);
    Scalar scale = scale_dist(rng);
    std::vector<float> out(dim);
    for (std::size_t j = 0; j < dim; ++j)
        out[j] = static_cast<float>(scale * (center[j] + sigma * v[j]));
    return out;
}

}  // namespace detail

// Core generator over externally supplied prototypes/directions, so paired
// domains can share class geometry (including the per-class text residuals —
// a shared class keeps its text row across domains, up to the confuser term).
// One sequential RNG drives all noise.
inline SyntheticData synth_generate_with_prototypes(
    const SyntheticSpec& spec, const std::vector<std::string>& class_names,
    std::vector<std::vector<Scalar>> prototypes, std::vector<Scalar> shift_dir,
    std::vector<std::vector<Scalar>> hand_dirs,
    std::vector<std::vector<Scalar>> text_residuals, Rng& rng) {
    spec.validate();
    if (class_names.size() != spec.classes || prototypes.size() != spec.classes ||
        hand_dirs.size() != spec.classes || text_residuals.size() != spec.classes)
        throw BadSpecError(
            "class name/prototype/hand/text-residual counts must equal spec.classes");

    SyntheticData data;
    data.spec = spec;
    data.vocab = make_vocabulary(class_names, Task::Noun);
    data.prototypes = std::move(prototypes);
    data.shift_dir = std::move(shift_dir);
    data.hand_dirs = std::move(hand_dirs);

    // Per-class shift direction: global component + pull toward the next class
    // + a per-class residual. Weighted so the pinned shift magnitude sits past
    // the point where the confusable neighbour overtakes the true class.
    constexpr Scalar kConfuserWeight = 1.5;
    data.text_dirs.resize(spec.classes);
    for (std::size_t c = 0; c < spec.classes; ++c) {
        const auto& residual = text_residuals[c];
        const auto& confuser = data.prototypes[(c + 1) % spec.classes];
        std::vector<Scalar> dir(spec.dim);
        Scalar norm2 = 0.0;
        for (std::size_t j = 0; j < spec.dim; ++j) {
            dir[j] = kConfuserWeight * confuser[j] + residual[j] + data.shift_dir[j];
            norm2 += dir[j] * dir[j];
        }
        Scalar inv = 1.0 / std::sqrt(norm2);
        for (auto& v : dir) v *= inv;
        data.text_dirs[c] = std::move(dir);
    }

    // Raw text rows sit at the text encoder's native scale, smaller than the
    // video features. Zero-shot normalizes rows so this is invisible to Eq. 1,
    // but conditioning adds a_v to the raw rows, so the scale decides how large
    // a correction must grow and how much a unit-norm one overshoots.
    constexpr Scalar kTextRowScale = 1.8;
    std::vector<Scalar> text(spec.classes * spec.dim);
    for (std::size_t c = 0; c < spec.classes; ++c)
        for (std::size_t j = 0; j < spec.dim; ++j)
            text[c * spec.dim + j] = kTextRowScale * (data.prototypes[c][j] +
                                                      spec.text_shift * data.text_dirs[c][j]);
    data.text_rows_raw = Tensor::from({spec.classes, spec.dim}, std::move(text));

    data.store.dim = spec.dim;
    std::vector<Scalar> hand_center(spec.dim);
    for (std::size_t c = 0; c < spec.classes; ++c) {
        for (std::size_t j = 0; j < spec.dim; ++j)
            hand_center[j] = data.prototypes[c][j] + spec.hand_shift * data.hand_dirs[c][j];
        for (std::size_t k = 0; k < spec.clips_per_class; ++k) {
            ClipRecord r;
            r.id = spec.dataset + "_" + data.vocab.names[c] + "_" + std::to_string(k);
            r.frames = spec.frames_per_clip;
            r.dim = spec.dim;
            r.full.reserve(r.frames * r.dim);
            r.hand.reserve(r.frames * r.dim);
            for (std::size_t f = 0; f < spec.frames_per_clip; ++f) {
                auto frame = detail::noisy_point(data.prototypes[c], spec.noise_sigma, rng, spec.dim);
                r.full.insert(r.full.end(), frame.begin(), frame.end());
                auto hand = detail::noisy_point(hand_center, spec.noise_sigma, rng, spec.dim);
                r.hand.insert(r.hand.end(), hand.begin(), hand.end());
            }
            r.noun_label = data.vocab.names[c];
            r.verb_label = data.vocab.names[c];
            r.dataset = spec.dataset;
            data.manifest.push_back(
                {r.id, r.noun_label, r.verb_label, r.dataset, r.frames});
            data.store.records.push_back(std::move(r));
        }
    }
    return data;
}

// Companion V_II-stream store: the same clips seen by a second frozen encoder.
// Class geometry is shared with the base store, but the per-frame noise is an
// independent draw, as two different backbones would produce.
inline EmbeddingStore synth_second_stream(const SyntheticData& data, std::uint64_t salt) {
    Rng rng = make_rng(derive_seed(data.spec.seed, salt));
    const SyntheticSpec& spec = data.spec;
    EmbeddingStore v2;
    v2.dim = spec.dim;
    v2.records.reserve(data.store.records.size());
    std::vector<Scalar> hand_center(spec.dim);
    std::size_t idx = 0;
    for (std::size_t c = 0; c < spec.classes; ++c) {
        for (std::size_t j = 0; j < spec.dim; ++j)
            hand_center[j] = data.prototypes[c][j] + spec.hand_shift * data.hand_dirs[c][j];
        for (std::size_t k = 0; k < spec.clips_per_class; ++k, ++idx) {
            const ClipRecord& base = data.store.records[idx];
            ClipRecord r;
            r.id = base.id;
            r.frames = base.frames;
            r.dim = spec.dim;
            r.full.reserve(r.frames * r.dim);
            r.hand.reserve(r.frames * r.dim);
            for (std::size_t f = 0; f < spec.frames_per_clip; ++f) {
                auto frame = detail::noisy_point(data.prototypes[c], spec.noise_sigma, rng, spec.dim);
                r.full.insert(r.full.end(), frame.begin(), frame.end());
                auto hand = detail::noisy_point(hand_center, spec.noise_sigma, rng, spec.dim);
                r.hand.insert(r.hand.end(), hand.begin(), hand.end());
            }
            r.noun_label = base.noun_label;
            r.verb_label = base.verb_label;
            r.dataset = base.dataset;
            v2.records.push_back(std::move(r));
        }
    }
    return v2;
}

inline std::string default_class_name(std::size_t index) {
    std::string n = std::to_string(index);
    while (n.size() < 3) n.insert(n.begin(), '0');
    return "cls_" + n;
}

inline SyntheticData synth_generate(const SyntheticSpec& spec) {
    spec.validate();
    Rng rng = make_rng(spec.seed);
    std::vector<std::vector<Scalar>> prototypes(spec.classes);
    for (auto& p : prototypes) p = draw_unit_vector(rng, spec.dim);
    std::vector<Scalar> shift = draw_unit_vector(rng, spec.dim);
    std::vector<std::vector<Scalar>> hand_dirs(spec.classes);
    for (auto& h : hand_dirs) h = draw_unit_vector(rng, spec.dim);
    std::vector<std::vector<Scalar>> residuals(spec.classes);
    for (auto& r : residuals) r = draw_unit_vector(rng, spec.dim);
    std::vector<std::string> names(spec.classes);
    for (std::size_t c = 0; c < spec.classes; ++c) names[c] = default_class_name(c);
    return synth_generate_with_prototypes(spec, names, std::move(prototypes), std::move(shift),
                                          std::move(hand_dirs), std::move(residuals), rng);
}

// Two domains sharing a prefix of class prototypes (and their names), for the
// cross-dataset protocol. The global shift component is common to both domains
// (one shared text encoder); the per-class residuals are drawn per domain, so
// corrections learned on one domain transfer only partially to the other.
struct SyntheticPair {
    SyntheticData a;
    SyntheticData b;
    std::vector<std::string> shared_names;
};

inline SyntheticPair generate_pair(SyntheticSpec spec_a, SyntheticSpec spec_b,
                                   std::size_t shared_classes, std::uint64_t seed) {
    spec_a.validate();
    spec_b.validate();
    if (spec_a.dim != spec_b.dim) throw BadSpecError("paired domains must share dim");
    if (shared_classes > spec_a.classes || shared_classes > spec_b.classes)
        throw BadSpecError("shared_classes exceeds a domain's class count");
    if (spec_a.dataset == spec_b.dataset) {
        spec_a.dataset = spec_a.dataset + "_a";
        spec_b.dataset = spec_b.dataset + "_b";
    }

    Rng geom = make_rng(derive_seed(seed, 1));
    std::size_t dim = spec_a.dim;
    std::vector<std::vector<Scalar>> shared_protos(shared_classes);
    for (auto& p : shared_protos) p = draw_unit_vector(geom, dim);
    std::vector<Scalar> shift = draw_unit_vector(geom, dim);
    std::vector<std::vector<Scalar>> shared_hands(shared_classes);
    for (auto& h : shared_hands) h = draw_unit_vector(geom, dim);
    std::vector<std::vector<Scalar>> shared_residuals(shared_classes);
    for (auto& r : shared_residuals) r = draw_unit_vector(geom, dim);

    SyntheticPair pair;
    auto build = [&](const SyntheticSpec& spec, const std::string& tag,
                     std::uint64_t stream) {
        std::vector<std::vector<Scalar>> protos = shared_protos;
        std::vector<std::vector<Scalar>> hands = shared_hands;
        std::vector<std::vector<Scalar>> residuals = shared_residuals;
        std::vector<std::string> names;
        for (std::size_t c = 0; c < shared_classes; ++c)
            names.push_back("shared " + default_class_name(c));
        for (std::size_t c = shared_classes; c < spec.classes; ++c) {
            protos.push_back(draw_unit_vector(geom, dim));
            hands.push_back(draw_unit_vector(geom, dim));
            residuals.push_back(draw_unit_vector(geom, dim));
            names.push_back(tag + " " + default_class_name(c));
        }
        Rng noise = make_rng(derive_seed(seed, stream));
        return synth_generate_with_prototypes(spec, names, std::move(protos), shift,
                                              std::move(hands), std::move(residuals), noise);
    };
    pair.a = build(spec_a, "only a", 2);
    pair.b = build(spec_b, "only b", 3);
    for (std::size_t c = 0; c < shared_classes; ++c)
        pair.shared_names.push_back("shared " + default_class_name(c));
    return pair;
}

// ---------------------------------------------------------------------------
// Sidecar: records the spec and ground truth so oracles (and the CLI) can
// reuse the exact classifier rows without re-deriving them.

inline nlohmann::json sidecar_json(const SyntheticData& data) {
    nlohmann::json j;
    j["spec"] = synthetic_spec_to_json(data.spec);
    j["vocab"] = data.vocab.names;
    j["prototypes"] = data.prototypes;
    j["shift_dir"] = data.shift_dir;
    j["hand_dirs"] = data.hand_dirs;
    j["text_dirs"] = data.text_dirs;
    std::vector<std::vector<Scalar>> rows(data.spec.classes, std::vector<Scalar>(data.spec.dim));
    for (std::size_t c = 0; c < data.spec.classes; ++c)
        for (std::size_t d = 0; d < data.spec.dim; ++d)
            rows[c][d] = data.text_rows_raw.at(c, d);
    j["text_rows"] = rows;
    return j;
}

inline void write_sidecar(const SyntheticData& data, const std::string& path) {
    io::atomic_write(path, [&](std::ostream& os) { os << sidecar_json(data).dump(2) << "\n"; });
}

// Loads classifier rows (pre-normalization) plus vocabulary from a sidecar.
inline TextClassifier load_classifier_rows(const std::string& path, Task task) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": " + e.what());
    }
    if (!j.contains("vocab") || !j.contains("text_rows"))
        throw FormatError(path + ": missing vocab/text_rows");
    std::vector<std::string> names = j["vocab"].get<std::vector<std::string>>();
    auto rows = j["text_rows"].get<std::vector<std::vector<Scalar>>>();
    if (rows.size() != names.size()) throw DimMismatchError(path + ": rows vs vocab size");
    if (rows.empty()) throw FormatError(path + ": empty classifier");
    std::size_t dim = rows[0].size();
    std::vector<Scalar> flat;
    flat.reserve(rows.size() * dim);
    for (const auto& r : rows) {
        if (r.size() != dim) throw DimMismatchError(path + ": ragged text_rows");
        flat.insert(flat.end(), r.begin(), r.end());
    }
    ClassVocabulary vocab = make_vocabulary(names, task);
    return build_text_classifier(Tensor::from({rows.size(), dim}, std::move(flat)), vocab);
}

}  // namespace xmic
