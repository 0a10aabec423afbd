#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "xmic/adapters.hpp"
#include "xmic/datastore.hpp"

namespace xmic {

// ---------------------------------------------------------------------------
// AdamW (decoupled weight decay)

struct AdamWConfig {
    Scalar lr = 1e-6;
    Scalar beta1 = 0.9;
    Scalar beta2 = 0.999;
    Scalar eps = 1e-8;
    Scalar weight_decay = 0.01;
};

struct OptimizerState {
    struct Slot {
        std::vector<Scalar> m, v;
    };
    std::unordered_map<std::string, Slot> slots;
    std::uint64_t t = 0;
};

// One update over named parameters. A parameter without a gradient is treated
// as g = 0, so at t = 1 it decays exactly to w * (1 - lr * wd).
inline void adamw_step(const NamedParams& params, OptimizerState& state, const AdamWConfig& cfg) {
    state.t += 1;
    Scalar bc1 = 1.0 - std::pow(cfg.beta1, static_cast<Scalar>(state.t));
    Scalar bc2 = 1.0 - std::pow(cfg.beta2, static_cast<Scalar>(state.t));
    for (const auto& [name, param] : params) {
        Tensor p = param;
        std::size_t n = p.numel();
        auto& slot = state.slots[name];
        if (slot.m.empty()) {
            slot.m.assign(n, 0.0);
            slot.v.assign(n, 0.0);
        } else if (slot.m.size() != n) {
            throw DimMismatchError("optimizer slot '" + name + "' holds " +
                                   std::to_string(slot.m.size()) + " values, parameter has " +
                                   std::to_string(n));
        }
        const std::vector<Scalar>* grad = p.has_grad() ? &p.grad() : nullptr;
        auto& w = p.mutable_data();
        for (std::size_t i = 0; i < n; ++i) {
            Scalar g = grad ? (*grad)[i] : 0.0;
            slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * g;
            slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * g * g;
            Scalar m_hat = slot.m[i] / bc1;
            Scalar v_hat = slot.v[i] / bc2;
            w[i] -= cfg.lr * (m_hat / (std::sqrt(v_hat) + cfg.eps) + cfg.weight_decay * w[i]);
        }
    }
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
    Task task = Task::Noun;
    std::string strategy = "xmic";
    Scalar alpha = 1.0;
    NormFlags norms;
    bool zero_init = true;
    bool temporal = true;
    SpatialMode spatial = SpatialMode::Both;
    std::size_t prompt_count = 4;
    Scalar bottleneck_blend = 0.2;
    std::size_t frames = 16;
    std::size_t epochs = 15;
    std::size_t batch_size = 64;
    Scalar lr = 1e-6;
    Scalar beta1 = 0.9;
    Scalar beta2 = 0.999;
    Scalar weight_decay = 0.01;
    Scalar temperature = 0.01;
    std::uint64_t seed = 1;

    void validate() const {
        if (frames == 0) throw BadSpecError("frames must be positive");
        if (batch_size == 0) throw BadSpecError("batch size must be positive");
        if (lr <= 0) throw BadSpecError("learning rate must be positive");
        if (temperature <= 0) throw BadSpecError("temperature must be positive");
        if (alpha <= 0) throw BadSpecError("alpha must be positive");
        if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
            throw BadSpecError("betas must be in [0, 1)");
        if (weight_decay < 0) throw BadSpecError("weight decay must be non-negative");
    }

    ModelConfig model_config() const {
        ModelConfig mc;
        mc.strategy = parse_strategy(strategy);
        mc.alpha = alpha;
        mc.norms = norms;
        mc.zero_init = zero_init;
        mc.temporal_enabled = temporal;
        mc.spatial = spatial;
        mc.prompt_count = prompt_count;
        mc.bottleneck_blend = bottleneck_blend;
        mc.seed = seed;
        return mc;
    }
};

// Logits [1, C] for one clip through the composed text/video pipeline.
// `state` carries the batch-shared classifier work; only clip-dependent
// adaptation (conditional prompts, X-MIC conditioning) happens here.
inline Tensor clip_logits(const Model& model, const ClipPair& pair,
                          const std::vector<std::size_t>& idx_v,
                          const std::vector<std::size_t>& idx_v2,
                          const ClassVocabulary& vocab, const TextClassifier* fixed,
                          const TextState& state, Scalar temperature) {
    Tensor e_v = model.video_query(pair.v->full_rows(idx_v));
    Tensor adapted;
    if (model.config.strategy.early_cross) {
        Tensor raw = model.clip_text_rows(vocab, fixed, model.cocoop->conditional_vector(e_v));
        adapted = model.xmic ? condition_rows(raw,
                                              model.xmic_vector(pair.v2->full_rows(idx_v2),
                                                                pair.v2->hand_rows(idx_v2)),
                                              model.xmic->alpha, model.xmic->norms)
                             : l2_normalize(raw);
    } else if (model.xmic) {
        Tensor a_v = model.xmic_vector(pair.v2->full_rows(idx_v2), pair.v2->hand_rows(idx_v2));
        adapted = condition_rows(state.shared_raw, a_v, model.xmic->alpha, model.xmic->norms);
    } else {
        adapted = state.shared_unit;
    }
    return cosine_logits(reshape(e_v, {std::size_t{1}, e_v.dim(0)}), adapted, temperature);
}

inline Scalar train_step(Model& model, const std::vector<const ClipPair*>& batch,
                         const ClassVocabulary& vocab, const TextClassifier* fixed,
                         const TrainConfig& cfg, Rng& sample_rng, OptimizerState& opt,
                         const AdamWConfig& adam) {
    if (batch.empty()) throw EmptySequenceError("train_step on empty batch");
    NamedParams params = model.trainable();
    for (auto& [name, p] : params) p.zero_grad();
    TextState state = model.make_text_state(vocab, fixed);
    std::vector<Tensor> logit_rows;
    std::vector<std::size_t> labels;
    logit_rows.reserve(batch.size());
    labels.reserve(batch.size());
    for (const ClipPair* pair : batch) {
        auto idx = sample_frames(pair->v->frames, cfg.frames, SampleMode::Random, &sample_rng);
        auto idx2 = pair->v2->frames == pair->v->frames
                        ? idx
                        : sample_frames(pair->v2->frames, cfg.frames, SampleMode::Random,
                                        &sample_rng);
        logit_rows.push_back(
            clip_logits(model, *pair, idx, idx2, vocab, fixed, state, cfg.temperature));
        labels.push_back(vocab.index_of(pair->v->label(cfg.task)));
    }
    Tensor loss = cross_entropy(concat_rows(logit_rows), labels);
    if (loss.requires_grad()) {
        backward(loss);
        adamw_step(params, opt, adam);
    }
    return loss.item();
}

struct TrainResult {
    std::vector<nlohmann::json> metrics;  // one JSON object per step plus epoch summaries
    Scalar first_loss = 0.0;
    Scalar final_mean_loss = 0.0;
    std::uint64_t steps = 0;
};

inline TrainResult train_run(Model& model, const std::vector<ClipPair>& clips,
                             const ClassVocabulary& vocab, const TextClassifier* fixed,
                             const TrainConfig& cfg) {
    cfg.validate();
    if (clips.empty()) throw EmptySequenceError("train_run on empty dataset");
    Rng order_rng = make_rng(derive_seed(cfg.seed, 0x0bde5));
    Rng sample_rng = make_rng(derive_seed(cfg.seed, 0x5a9b1e));
    AdamWConfig adam{cfg.lr, cfg.beta1, cfg.beta2, 1e-8, cfg.weight_decay};
    OptimizerState opt;
    TrainResult result;
    std::vector<std::size_t> order(clips.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), order_rng);
        Scalar loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            std::size_t stop = std::min(order.size(), start + cfg.batch_size);
            std::vector<const ClipPair*> batch;
            batch.reserve(stop - start);
            for (std::size_t i = start; i < stop; ++i) batch.push_back(&clips[order[i]]);
            Scalar loss = train_step(model, batch, vocab, fixed, cfg, sample_rng, opt, adam);
            if (result.steps == 0) result.first_loss = loss;
            result.steps += 1;
            loss_sum += loss;
            batches += 1;
            result.metrics.push_back({{"epoch", epoch},
                                      {"step", result.steps},
                                      {"loss", loss},
                                      {"lr", cfg.lr}});
        }
        result.final_mean_loss = loss_sum / static_cast<Scalar>(batches);
        result.metrics.push_back({{"epoch", epoch},
                                  {"step", result.steps},
                                  {"mean_loss", result.final_mean_loss},
                                  {"lr", cfg.lr},
                                  {"event", "epoch_end"}});
    }
    return result;
}

}  // namespace xmic
