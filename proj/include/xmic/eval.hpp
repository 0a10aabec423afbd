#pragma once

#include <algorithm>
#include <cstdio>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "xmic/threads.hpp"
#include "xmic/training.hpp"

namespace xmic {

// ---------------------------------------------------------------------------
// Metrics

inline Scalar top1_accuracy(const std::vector<std::size_t>& preds,
                            const std::vector<std::size_t>& labels) {
    if (preds.empty()) throw EmptySequenceError("top1_accuracy on empty predictions");
    if (preds.size() != labels.size())
        throw DimMismatchError("top1_accuracy: " + std::to_string(preds.size()) +
                               " predictions vs " + std::to_string(labels.size()) + " labels");
    std::size_t matches = 0;
    for (std::size_t i = 0; i < preds.size(); ++i)
        if (preds[i] == labels[i]) ++matches;
    return 100.0 * static_cast<Scalar>(matches) / static_cast<Scalar>(preds.size());
}

inline Scalar harmonic_mean(Scalar a, Scalar b) {
    if (a < 0 || b < 0) throw BadSpecError("harmonic_mean needs non-negative inputs");
    if (a + b == 0) return 0.0;
    return 2.0 * a * b / (a + b);
}

// ---------------------------------------------------------------------------
// Per-clip classification

struct ClipPrediction {
    std::size_t cls = 0;
    std::vector<Scalar> scores;
};

// Uniform frame sampling, no gradient tape, argmax with lowest-index ties.
inline ClipPrediction classify_clip(const Model& model, const ClipPair& pair,
                                    const ClassVocabulary& vocab, const TextClassifier* fixed,
                                    const TextState& state, std::size_t frames,
                                    Scalar temperature) {
    autograd::NoGradGuard guard;
    auto idx = sample_frames(pair.v->frames, frames, SampleMode::Uniform);
    auto idx2 = pair.v2->frames == pair.v->frames
                    ? idx
                    : sample_frames(pair.v2->frames, frames, SampleMode::Uniform);
    Tensor logits = clip_logits(model, pair, idx, idx2, vocab, fixed, state, temperature);
    ClipPrediction out;
    out.scores = logits.data();
    out.cls = 0;
    for (std::size_t c = 1; c < out.scores.size(); ++c)
        if (out.scores[c] > out.scores[out.cls]) out.cls = c;
    return out;
}

// ---------------------------------------------------------------------------
// Cross-dataset protocol

struct EvalConfig {
    Task task = Task::Noun;
    std::size_t frames = 16;
    Scalar temperature = 0.01;
    // When true, the shared/novel cells restrict the classifier rows to the
    // subset's classes instead of only restricting the scored clips.
    bool restrict_rows_to_subset = false;
};

struct SubsetResult {
    Scalar top1 = 0.0;
    std::size_t count = 0;
    std::size_t matches = 0;
};

struct EvalReport {
    Task task = Task::Noun;
    std::string within_dataset;
    std::string cross_dataset;
    SubsetResult within_all;
    bool has_cross = false;
    SubsetResult cross_all, cross_shared, cross_novel;
    Scalar hm_within_cross = 0.0;
    Scalar hm_shared_novel = 0.0;

    nlohmann::json to_json() const {
        auto cell = [](const SubsetResult& r) {
            return nlohmann::json{{"top1", r.top1}, {"count", r.count}, {"matches", r.matches}};
        };
        nlohmann::json j;
        j["task"] = task_name(task);
        j["within"] = {{"dataset", within_dataset}, {"all", cell(within_all)}};
        if (has_cross) {
            j["cross"] = {{"dataset", cross_dataset},
                          {"all", cell(cross_all)},
                          {"shared", cell(cross_shared)},
                          {"novel", cell(cross_novel)}};
            j["hm"] = {{"within_cross", hm_within_cross}, {"shared_novel", hm_shared_novel}};
        }
        return j;
    }

    std::string to_table() const {
        char buf[160];
        std::string out;
        out += "task=" + task_name(task) + " within=" + within_dataset;
        if (has_cross) out += " cross=" + cross_dataset;
        out += "\n";
        std::snprintf(buf, sizeof(buf), "%-10s %10s %10s %10s\n", "", "within", "cross", "hm");
        out += buf;
        if (has_cross) {
            std::snprintf(buf, sizeof(buf), "%-10s %10.2f %10.2f %10.2f\n", "all",
                          within_all.top1, cross_all.top1, hm_within_cross);
            out += buf;
            std::snprintf(buf, sizeof(buf), "%-10s %10s %10s %10s\n", "", "shared", "novel", "hm");
            out += buf;
            std::snprintf(buf, sizeof(buf), "%-10s %10.2f %10.2f %10.2f\n", "cross",
                          cross_shared.top1, cross_novel.top1, hm_shared_novel);
            out += buf;
            std::snprintf(buf, sizeof(buf), "counts: within=%zu cross=%zu shared=%zu novel=%zu\n",
                          within_all.count, cross_all.count, cross_shared.count,
                          cross_novel.count);
            out += buf;
        } else {
            std::snprintf(buf, sizeof(buf), "%-10s %10.2f %10s %10s\n", "all", within_all.top1,
                          "-", "-");
            out += buf;
            std::snprintf(buf, sizeof(buf), "counts: within=%zu\n", within_all.count);
            out += buf;
        }
        return out;
    }

    std::string to_csv() const {
        std::string out =
            "task,within_dataset,cross_dataset,within_top1,cross_top1,hm_within_cross,"
            "cross_shared_top1,cross_novel_top1,hm_shared_novel,within_count,cross_count,"
            "shared_count,novel_count\n";
        char buf[256];
        if (has_cross) {
            std::snprintf(buf, sizeof(buf), "%s,%s,%s,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%zu,%zu,%zu,%zu\n",
                          task_name(task).c_str(), within_dataset.c_str(), cross_dataset.c_str(),
                          within_all.top1, cross_all.top1, hm_within_cross, cross_shared.top1,
                          cross_novel.top1, hm_shared_novel, within_all.count, cross_all.count,
                          cross_shared.count, cross_novel.count);
        } else {
            std::snprintf(buf, sizeof(buf), "%s,%s,,%.6f,,,,,,%zu,,,\n", task_name(task).c_str(),
                          within_dataset.c_str(), within_all.top1, within_all.count);
        }
        out += buf;
        return out;
    }
};

struct EvalDataset {
    std::string name;
    std::vector<ClipPair> clips;
    ClassVocabulary vocab;
    const TextClassifier* fixed = nullptr;  // optional fixed classifier rows
};

namespace detail {

struct ClipOutcomes {
    std::vector<std::size_t> preds;
    std::vector<std::size_t> labels;
};

inline ClipOutcomes evaluate_clips(const Model& model, const std::vector<ClipPair>& clips,
                                   const ClassVocabulary& vocab, const TextClassifier* fixed,
                                   const EvalConfig& cfg) {
    ClipOutcomes out;
    out.preds.assign(clips.size(), 0);
    out.labels.assign(clips.size(), 0);
    for (std::size_t i = 0; i < clips.size(); ++i) {
        const std::string& label = clips[i].v->label(cfg.task);
        std::string canonical = canonicalize_class_name(label);
        if (!vocab.contains(canonical))
            throw VocabularyMismatchError("clip '" + clips[i].v->id + "' has " +
                                          task_name(cfg.task) + " label '" + label +
                                          "' outside the evaluation vocabulary");
        out.labels[i] = vocab.index_of(canonical);
    }
    TextState state;
    {
        autograd::NoGradGuard guard;
        state = model.make_text_state(vocab, fixed);
    }
    parallel_for(clips.size(), [&](std::size_t i) {
        out.preds[i] = classify_clip(model, clips[i], vocab, fixed, state, cfg.frames,
                                     cfg.temperature)
                           .cls;
    });
    return out;
}

inline SubsetResult subset_from_outcomes(const ClipOutcomes& o,
                                         const std::vector<std::size_t>& indices) {
    SubsetResult r;
    r.count = indices.size();
    for (std::size_t i : indices)
        if (o.preds[i] == o.labels[i]) ++r.matches;
    r.top1 = r.count == 0 ? 0.0
                          : 100.0 * static_cast<Scalar>(r.matches) / static_cast<Scalar>(r.count);
    return r;
}

inline TextClassifier subset_fixed_classifier(const TextClassifier& full,
                                              const ClassVocabulary& sub_vocab) {
    std::size_t d = full.dim();
    std::vector<Scalar> data;
    data.reserve(sub_vocab.names.size() * d);
    for (const auto& name : sub_vocab.names) {
        std::size_t row = full.vocab.index_of(name);
        const auto& src = full.raw.data();
        data.insert(data.end(), src.begin() + static_cast<std::ptrdiff_t>(row * d),
                    src.begin() + static_cast<std::ptrdiff_t>((row + 1) * d));
    }
    return build_text_classifier(Tensor::from({sub_vocab.names.size(), d}, std::move(data)),
                                 sub_vocab);
}

}  // namespace detail

inline EvalReport evaluate_cross_dataset(const Model& model, const EvalDataset& within,
                                         const EvalDataset* cross, const Partition* partition,
                                         const EvalConfig& cfg) {
    if (within.clips.empty()) throw EmptySequenceError("no clips in the within dataset");
    EvalReport report;
    report.task = cfg.task;
    report.within_dataset = within.name;
    detail::ClipOutcomes within_out =
        detail::evaluate_clips(model, within.clips, within.vocab, within.fixed, cfg);
    std::vector<std::size_t> all_idx(within.clips.size());
    std::iota(all_idx.begin(), all_idx.end(), 0);
    report.within_all = detail::subset_from_outcomes(within_out, all_idx);
    if (!cross) return report;
    if (cross->clips.empty()) throw EmptySequenceError("no clips in the cross dataset");
    if (!partition) throw BadSpecError("cross-dataset evaluation needs a partition");
    report.has_cross = true;
    report.cross_dataset = cross->name;
    detail::ClipOutcomes cross_out =
        detail::evaluate_clips(model, cross->clips, cross->vocab, cross->fixed, cfg);
    std::unordered_set<std::string> shared_set(partition->shared.begin(),
                                               partition->shared.end());
    std::vector<std::size_t> idx_all(cross->clips.size()), idx_shared, idx_novel;
    std::iota(idx_all.begin(), idx_all.end(), 0);
    for (std::size_t i = 0; i < cross->clips.size(); ++i) {
        const std::string name =
            canonicalize_class_name(cross->clips[i].v->label(cfg.task));
        (shared_set.count(name) ? idx_shared : idx_novel).push_back(i);
    }
    report.cross_all = detail::subset_from_outcomes(cross_out, idx_all);
    if (!cfg.restrict_rows_to_subset) {
        report.cross_shared = detail::subset_from_outcomes(cross_out, idx_shared);
        report.cross_novel = detail::subset_from_outcomes(cross_out, idx_novel);
    } else {
        // Alternative protocol: the classifier itself is restricted to the
        // subset's classes and the subset's clips are re-scored against it.
        auto subset_eval = [&](const std::vector<std::size_t>& indices,
                               const std::vector<std::string>& subset_names) {
            SubsetResult r;
            r.count = indices.size();
            if (indices.empty()) return r;
            std::vector<std::string> names;
            for (const auto& n : subset_names)
                if (cross->vocab.contains(n)) names.push_back(n);
            ClassVocabulary sub_vocab = make_vocabulary(names, cross->vocab.task);
            std::optional<TextClassifier> sub_fixed;
            if (cross->fixed) sub_fixed = detail::subset_fixed_classifier(*cross->fixed, sub_vocab);
            std::vector<ClipPair> clips;
            clips.reserve(indices.size());
            for (std::size_t i : indices) clips.push_back(cross->clips[i]);
            detail::ClipOutcomes o = detail::evaluate_clips(
                model, clips, sub_vocab, sub_fixed ? &*sub_fixed : nullptr, cfg);
            std::vector<std::size_t> all(clips.size());
            std::iota(all.begin(), all.end(), 0);
            return detail::subset_from_outcomes(o, all);
        };
        report.cross_shared = subset_eval(idx_shared, partition->shared);
        report.cross_novel = subset_eval(idx_novel, partition->novel_b);
    }
    report.hm_within_cross = harmonic_mean(report.within_all.top1, report.cross_all.top1);
    report.hm_shared_novel = harmonic_mean(report.cross_shared.top1, report.cross_novel.top1);
    return report;
}

// ---------------------------------------------------------------------------
// Activation-cost profiling

struct CostRecord {
    std::string strategy;
    std::size_t batch = 0, classes = 0, prompts = 0, dim = 0, frames = 0;
    std::uint64_t conditioning_activations = 0;

    nlohmann::json to_json() const {
        return {{"strategy", strategy},      {"B", batch},
                {"C", classes},              {"P", prompts},
                {"D", dim},                  {"N", frames},
                {"conditioning_activations", conditioning_activations}};
    }
};

// Instrumented count of gradient-tracked activations on the classifier
// conditioning path for an actual forward pass over a B-clip batch. Batch-
// shared work (uni-modal paths) is built once; per-clip work (conditional
// prompts, X-MIC conditioning) runs once per clip.
inline CostRecord activation_cost_profile(const std::string& strategy_text, std::size_t B,
                                          std::size_t C, std::size_t P, std::size_t D,
                                          std::size_t N) {
    if (B == 0 || C == 0 || D == 0 || N == 0)
        throw BadSpecError("profile dimensions must be positive");
    Strategy s = parse_strategy(strategy_text);
    ModelConfig mc;
    mc.dim = D;
    mc.strategy = s;
    mc.prompt_count = P;
    mc.zero_init = false;
    mc.seed = 77;
    Model model = make_model(mc, /*need_encoder=*/s.early_fusion());

    std::vector<std::string> names;
    names.reserve(C);
    for (std::size_t c = 0; c < C; ++c) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "class_%03zu", c);
        names.emplace_back(buf);
    }
    ClassVocabulary vocab = make_vocabulary(names, Task::Noun);

    Rng rng = make_rng(derive_seed(77, 0xc057));
    std::optional<TextClassifier> fixed;
    if (!s.early_fusion()) {
        Tensor rows = Tensor::randn({C, D}, rng);
        fixed = build_text_classifier(rows, vocab);
    }
    const TextClassifier* fixed_ptr = fixed ? &*fixed : nullptr;

    std::vector<Tensor> clip_frames, clip_queries;
    for (std::size_t b = 0; b < B; ++b) {
        clip_frames.push_back(Tensor::randn({N, D}, rng));
        clip_queries.push_back(Tensor::from({D}, draw_unit_vector(rng, D)));
    }

    autograd::reset_activation_count();
    TextState state = model.make_text_state(vocab, fixed_ptr);
    if (s.early_cross || s.xmic) {
        for (std::size_t b = 0; b < B; ++b) {
            Tensor raw = state.shared_raw;
            if (s.early_cross)
                raw = model.clip_text_rows(vocab, fixed_ptr,
                                           model.cocoop->conditional_vector(clip_queries[b]));
            if (model.xmic) {
                Tensor a_v = model.xmic_vector(clip_frames[b], clip_frames[b]);
                (void)condition_rows(raw, a_v, model.xmic->alpha, model.xmic->norms);
            } else {
                (void)l2_normalize(raw);
            }
        }
    }
    CostRecord record;
    record.strategy = s.to_string();
    record.batch = B;
    record.classes = C;
    record.prompts = P;
    record.dim = D;
    record.frames = N;
    record.conditioning_activations = autograd::activation_count();
    return record;
}

}  // namespace xmic
