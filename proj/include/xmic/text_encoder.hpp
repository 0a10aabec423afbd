#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "xmic/datastore.hpp"
#include "xmic/nn.hpp"
#include "xmic/tensor.hpp"

namespace xmic {

inline std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

// Byte hash of parameter values; used to assert the frozen contract.
inline std::uint64_t hash_params(const NamedParams& params) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& [name, t] : params) {
        for (unsigned char c : name) {
            h ^= c;
            h *= 0x100000001b3ull;
        }
        for (Scalar v : t.data()) {
            std::uint64_t bits;
            static_assert(sizeof(bits) == sizeof(v));
            std::memcpy(&bits, &v, sizeof bits);
            for (int k = 0; k < 8; ++k) {
                h ^= (bits >> (8 * k)) & 0xff;
                h *= 0x100000001b3ull;
            }
        }
    }
    return h;
}

// Row-normalized class-embedding matrix (the text-based classifier). `raw`
// keeps the pre-normalization rows so the inner-normalization variants can
// start from unnormalized text features.
struct TextClassifier {
    Tensor raw;         // [C, D]
    Tensor normalized;  // [C, D], unit rows
    ClassVocabulary vocab;

    std::size_t classes() const { return normalized.dim(0); }
    std::size_t dim() const { return normalized.dim(1); }
};

inline TextClassifier build_text_classifier(const Tensor& rows, const ClassVocabulary& vocab) {
    if (rows.rank() != 2)
        throw BadShapeError("text classifier rows must be [C, D]");
    if (rows.dim(0) != vocab.size())
        throw DimMismatchError("classifier has " + std::to_string(rows.dim(0)) + " rows for " +
                               std::to_string(vocab.size()) + " classes");
    TextClassifier tc;
    tc.raw = rows;
    tc.normalized = l2_normalize(rows);
    tc.vocab = vocab;
    return tc;
}

// Frozen stand-in for a pretrained text encoder: hashed token embeddings, a
// 2-block transformer and a projection to the shared embedding space. None
// of its parameters ever require gradients; adaptation signals enter only
// through prompt vectors prepended to the token sequence.
class ToyTextEncoder {
  public:
    ToyTextEncoder(std::size_t dim, std::uint64_t seed, std::size_t context_length = 16)
        : dim_(dim), token_dim_(dim), context_length_(context_length), seed_(seed) {
        if (dim % kNumHeads != 0)
            throw BadShapeError("text encoder dim must be divisible by " + std::to_string(kNumHeads));
        if (context_length_ == 0) throw BadSpecError("context length must be positive");
        Rng rng = make_rng(derive_seed(seed, 0x7e57));
        block1_ = make_transformer_block(token_dim_, rng, /*zero_init=*/false, /*requires_grad=*/false);
        block2_ = make_transformer_block(token_dim_, rng, /*zero_init=*/false, /*requires_grad=*/false);
        projection_ = Tensor::randn({dim_, token_dim_}, rng, kInitStddev);
    }

    std::size_t dim() const { return dim_; }
    std::size_t token_dim() const { return token_dim_; }

    Tensor token_embedding(const std::string& token) const {
        Rng rng = make_rng(derive_seed(seed_, fnv1a(token)));
        return Tensor::from({token_dim_}, draw_normal(rng, token_dim_));
    }

    // Pre-normalization embedding of one class name. The optional prompt
    // matrix [P, D_tok] is prepended to the hashed class tokens; `conditional`
    // (a D_tok vector) is added to every prompt row — the cross-modal
    // conditioning path. Gradients reach prompts and conditional only.
    Tensor encode_name(const std::string& name, const Tensor& prompts = Tensor(),
                       const Tensor& conditional = Tensor()) const {
        std::vector<Tensor> parts;
        if (prompts.defined() && prompts.numel() > 0) {
            if (prompts.rank() != 2 || prompts.dim(1) != token_dim_)
                throw DimMismatchError("prompts must be [P, " + std::to_string(token_dim_) + "]");
            parts.push_back(conditional.defined() ? add_rowvec(prompts, conditional) : prompts);
        } else if (conditional.defined()) {
            throw IncompatibleCompositionError(
                "conditional prompt vector needs at least one learnable prompt to condition");
        }
        std::size_t prompt_rows = parts.empty() ? 0 : parts[0].dim(0);
        if (prompt_rows >= context_length_)
            throw BadSpecError("prompt rows exceed context length");
        std::vector<std::string> tokens = tokenize(name);
        if (tokens.empty()) throw EmptyClassNameError("class name '" + name + "' has no tokens");
        std::size_t budget = context_length_ - prompt_rows;
        if (tokens.size() > budget) tokens.resize(budget);
        for (const auto& tok : tokens) parts.push_back(token_embedding(tok));
        Tensor seq = concat_rows(parts);
        seq = transformer_block(seq, block1_);
        seq = transformer_block(seq, block2_);
        return matvec(projection_, mean_pool(seq));
    }

    // Pre-normalization rows for a list of class names, [C, D].
    Tensor encode_rows(const std::vector<std::string>& names, const Tensor& prompts = Tensor(),
                       const Tensor& conditional = Tensor()) const {
        if (names.empty()) throw EmptySequenceError("no class names to encode");
        std::vector<Tensor> rows;
        rows.reserve(names.size());
        for (const auto& name : names) rows.push_back(encode_name(name, prompts, conditional));
        return concat_rows(rows);
    }

    TextClassifier encode(const ClassVocabulary& vocab, const Tensor& prompts = Tensor(),
                          const Tensor& conditional = Tensor()) const {
        return build_text_classifier(encode_rows(vocab.names, prompts, conditional), vocab);
    }

    NamedParams frozen_params() const {
        NamedParams p = block1_.named("text_encoder.block1");
        NamedParams p2 = block2_.named("text_encoder.block2");
        p.insert(p.end(), p2.begin(), p2.end());
        p.emplace_back("text_encoder.projection", projection_);
        return p;
    }

    std::uint64_t param_hash() const { return hash_params(frozen_params()); }

  private:
    static std::vector<std::string> tokenize(const std::string& name) {
        std::vector<std::string> tokens;
        std::string current;
        for (char c : name) {
            if (c == ' ' || c == '\t') {
                if (!current.empty()) tokens.push_back(std::move(current));
                current.clear();
            } else {
                current.push_back(c);
            }
        }
        if (!current.empty()) tokens.push_back(std::move(current));
        return tokens;
    }

    std::size_t dim_;
    std::size_t token_dim_;
    std::size_t context_length_;
    std::uint64_t seed_;
    TransformerBlockParams block1_, block2_;
    Tensor projection_;
};

}  // namespace xmic
