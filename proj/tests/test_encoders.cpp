#include <catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>
#include <vector>

#include <xmic/gradcheck.hpp>
#include <xmic/synthetic.hpp>
#include <xmic/text_encoder.hpp>

using namespace xmic;
namespace fs = std::filesystem;

namespace {

std::string temp_file(const std::string& name) {
    static fs::path dir = [] {
        fs::path p = fs::temp_directory_path() / ("xmic_encoders_" + std::to_string(::getpid()));
        fs::create_directories(p);
        return p;
    }();
    return (dir / name).string();
}

// Straight-line zero-shot classification of one clip's frame block against
// pre-normalized classifier rows; no tensor ops.
std::size_t flat_zero_shot(const std::vector<Scalar>& frames, std::size_t n, std::size_t d,
                           const std::vector<std::vector<Scalar>>& unit_rows) {
    std::vector<Scalar> mean(d, 0.0);
    for (std::size_t f = 0; f < n; ++f) {
        Scalar norm2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) norm2 += frames[f * d + j] * frames[f * d + j];
        Scalar inv = 1.0 / std::sqrt(norm2);
        for (std::size_t j = 0; j < d; ++j) mean[j] += frames[f * d + j] * inv;
    }
    Scalar norm2 = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
        mean[j] /= static_cast<Scalar>(n);
        norm2 += mean[j] * mean[j];
    }
    Scalar inv = 1.0 / std::sqrt(norm2);
    std::size_t best = 0;
    Scalar best_score = -2.0;
    for (std::size_t c = 0; c < unit_rows.size(); ++c) {
        Scalar s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += mean[j] * inv * unit_rows[c][j];
        if (s > best_score) {
            best_score = s;
            best = c;
        }
    }
    return best;
}

// Independent re-derivation of the generator's class geometry and raw text
// rows from its seed: the same draw order (prototypes, global shift, hand
// dirs, text residuals) and the same direction/row formulas, written out
// straight-line.
struct FlatGeometry {
    std::vector<std::vector<Scalar>> protos;
    std::vector<std::vector<Scalar>> unit_rows;
};

FlatGeometry flat_geometry(std::uint64_t seed, std::size_t classes, std::size_t dim,
                           Scalar text_shift) {
    Rng rng = make_rng(seed);
    FlatGeometry g;
    g.protos.resize(classes);
    for (auto& p : g.protos) p = draw_unit_vector(rng, dim);
    std::vector<Scalar> shift = draw_unit_vector(rng, dim);
    for (std::size_t c = 0; c < classes; ++c) draw_unit_vector(rng, dim);  // hand dirs unused
    std::vector<std::vector<Scalar>> residuals(classes);
    for (auto& r : residuals) r = draw_unit_vector(rng, dim);
    g.unit_rows.resize(classes);
    for (std::size_t c = 0; c < classes; ++c) {
        std::vector<Scalar> dir(dim);
        Scalar n2 = 0.0;
        for (std::size_t j = 0; j < dim; ++j) {
            dir[j] = 1.5 * g.protos[(c + 1) % classes][j] + residuals[c][j] + shift[j];
            n2 += dir[j] * dir[j];
        }
        Scalar inv = 1.0 / std::sqrt(n2);
        std::vector<Scalar> row(dim);
        Scalar r2 = 0.0;
        for (std::size_t j = 0; j < dim; ++j) {
            row[j] = g.protos[c][j] + text_shift * dir[j] * inv;
            r2 += row[j] * row[j];
        }
        Scalar rinv = 1.0 / std::sqrt(r2);
        for (auto& v : row) v *= rinv;
        g.unit_rows[c] = std::move(row);
    }
    return g;
}

// Monte-Carlo zero-shot accuracy: fresh clips drawn around the prototypes,
// classified by the straight-line pipeline.
Scalar mc_zero_shot(const FlatGeometry& g, std::size_t dim, Scalar sigma, std::size_t frames,
                    std::size_t clips, std::uint64_t mc_seed) {
    Rng rng = make_rng(mc_seed);
    std::size_t classes = g.protos.size();
    std::size_t hits = 0;
    std::vector<Scalar> block(frames * dim);
    for (std::size_t k = 0; k < clips; ++k) {
        std::size_t c = k % classes;
        for (std::size_t f = 0; f < frames; ++f) {
            std::vector<Scalar> gnoise = draw_normal(rng, dim);
            for (std::size_t j = 0; j < dim; ++j)
                block[f * dim + j] = g.protos[c][j] + sigma * gnoise[j];
        }
        if (flat_zero_shot(block, frames, dim, g.unit_rows) == c) ++hits;
    }
    return 100.0 * static_cast<Scalar>(hits) / static_cast<Scalar>(clips);
}

Scalar store_zero_shot(const SyntheticData& data) {
    std::size_t d = data.spec.dim;
    std::vector<std::vector<Scalar>> unit_rows(data.spec.classes, std::vector<Scalar>(d));
    for (std::size_t c = 0; c < data.spec.classes; ++c) {
        Scalar n2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) n2 += data.text_rows_raw.at(c, j) * data.text_rows_raw.at(c, j);
        Scalar inv = 1.0 / std::sqrt(n2);
        for (std::size_t j = 0; j < d; ++j) unit_rows[c][j] = data.text_rows_raw.at(c, j) * inv;
    }
    std::size_t hits = 0;
    for (const auto& r : data.store.records) {
        std::vector<Scalar> block(r.full.begin(), r.full.end());
        std::size_t got = flat_zero_shot(block, r.frames, d, unit_rows);
        if (data.vocab.names[got] == r.noun_label) ++hits;
    }
    return 100.0 * static_cast<Scalar>(hits) / static_cast<Scalar>(data.store.records.size());
}

}  // namespace

TEST_CASE("generator is deterministic") {
    SyntheticSpec spec;
    spec.classes = 8;
    spec.dim = 16;
    spec.clips_per_class = 3;
    spec.frames_per_clip = 4;
    spec.seed = 9;
    SyntheticData a = synth_generate(spec);
    SyntheticData b = synth_generate(spec);
    REQUIRE(a.store.records.size() == 24);
    REQUIRE(a.vocab.names == b.vocab.names);
    REQUIRE(a.text_rows_raw.data() == b.text_rows_raw.data());
    for (std::size_t i = 0; i < a.store.records.size(); ++i) {
        REQUIRE(a.store.records[i].id == b.store.records[i].id);
        REQUIRE(a.store.records[i].full == b.store.records[i].full);
        REQUIRE(a.store.records[i].hand == b.store.records[i].hand);
    }

    SECTION("different seed moves the data") {
        spec.seed = 10;
        SyntheticData c = synth_generate(spec);
        REQUIRE(c.store.records[0].full != a.store.records[0].full);
    }

    SECTION("second stream is deterministic but independent") {
        EmbeddingStore v2a = synth_second_stream(a, 0xb2);
        EmbeddingStore v2b = synth_second_stream(a, 0xb2);
        REQUIRE(v2a.records.size() == a.store.records.size());
        for (std::size_t i = 0; i < v2a.records.size(); ++i) {
            REQUIRE(v2a.records[i].id == a.store.records[i].id);
            REQUIRE(v2a.records[i].full == v2b.records[i].full);
            REQUIRE(v2a.records[i].full != a.store.records[i].full);
        }
        EmbeddingStore other_salt = synth_second_stream(a, 0xb3);
        REQUIRE(other_salt.records[0].full != v2a.records[0].full);
    }
}

TEST_CASE("generator spec validation") {
    SyntheticSpec spec;
    spec.dim = 12;
    REQUIRE_THROWS_AS(spec.validate(), BadSpecError);
    spec.dim = 4;
    REQUIRE_THROWS_AS(spec.validate(), BadSpecError);
    spec.dim = 16;
    spec.clips_per_class = 0;
    REQUIRE_THROWS_AS(spec.validate(), BadSpecError);
    spec.clips_per_class = 1;
    spec.text_shift = -0.1;
    REQUIRE_THROWS_AS(spec.validate(), BadSpecError);

    nlohmann::json j{{"classes", 4}, {"dim", 16}, {"text_shift", 0.25}};
    SyntheticSpec s = synthetic_spec_from_json(j);
    REQUIRE(s.classes == 4);
    REQUIRE(s.dim == 16);
    REQUIRE(s.text_shift == 0.25);
    REQUIRE(s.clips_per_class == 50);  // default preserved
    nlohmann::json back = synthetic_spec_to_json(s);
    REQUIRE(back["classes"] == 4);
    REQUIRE(back["text_shift"] == 0.25);
}

TEST_CASE("no shift and no noise gives perfect zero-shot") {
    SyntheticSpec spec;
    spec.classes = 8;
    spec.dim = 16;
    spec.clips_per_class = 5;
    spec.frames_per_clip = 4;
    spec.noise_sigma = 0.0;
    spec.text_shift = 0.0;
    spec.seed = 3;
    SyntheticData data = synth_generate(spec);
    REQUIRE(store_zero_shot(data) == 100.0);
}

TEST_CASE("store zero-shot accuracy matches the Monte-Carlo oracle") {
    SyntheticSpec spec;
    spec.seed = 2;  // classes=16, dim=32, sigma=0.4, shift=1.5, 50 clips/class
    SyntheticData data = synth_generate(spec);
    Scalar store_acc = store_zero_shot(data);

    FlatGeometry g = flat_geometry(spec.seed, spec.classes, spec.dim, spec.text_shift);
    for (std::size_t c = 0; c < spec.classes; ++c)
        for (std::size_t j = 0; j < spec.dim; ++j)
            REQUIRE(std::abs(g.protos[c][j] - data.prototypes[c][j]) < 1e-12);

    Scalar mc_acc = mc_zero_shot(g, spec.dim, spec.noise_sigma, spec.frames_per_clip,
                                 12000, /*mc_seed=*/77);
    INFO("store " << store_acc << " vs mc " << mc_acc);
    REQUIRE(std::abs(store_acc - mc_acc) <= 3.0);
}

TEST_CASE("zero-shot accuracy is non-increasing in text_shift") {
    const Scalar shifts[] = {0.0, 0.75, 1.5, 2.25, 3.0};
    std::vector<Scalar> accs;
    for (Scalar shift : shifts) {
        FlatGeometry g = flat_geometry(2, 16, 32, shift);
        accs.push_back(mc_zero_shot(g, 32, 0.4, 16, 2000, /*mc_seed=*/55));
    }
    INFO("accuracy grid " << accs[0] << " " << accs[1] << " " << accs[2] << " " << accs[3] << " "
                          << accs[4]);
    for (std::size_t i = 1; i < accs.size(); ++i) REQUIRE(accs[i] <= accs[i - 1]);
    REQUIRE(accs[0] > 90.0);
    REQUIRE(accs[4] < 50.0);
}

TEST_CASE("paired domains share geometry on shared classes only") {
    SyntheticSpec sa, sb;
    sa.classes = sb.classes = 6;
    sa.dim = sb.dim = 16;
    sa.clips_per_class = sb.clips_per_class = 2;
    sa.frames_per_clip = sb.frames_per_clip = 4;
    sa.dataset = "left";
    sb.dataset = "right";
    SyntheticPair pair = generate_pair(sa, sb, 4, 21);

    REQUIRE(pair.shared_names.size() == 4);
    for (std::size_t c = 0; c < 4; ++c) {
        REQUIRE(pair.a.vocab.names[c] == pair.b.vocab.names[c]);
        for (std::size_t j = 0; j < 16; ++j)
            REQUIRE(pair.a.prototypes[c][j] == pair.b.prototypes[c][j]);
    }
    // Shared residuals mean shared text rows, except at the boundary class
    // whose confuser (the next class) is already domain-specific.
    for (std::size_t c = 0; c + 1 < 4; ++c)
        for (std::size_t j = 0; j < 16; ++j)
            REQUIRE(std::abs(pair.a.text_rows_raw.at(c, j) - pair.b.text_rows_raw.at(c, j)) <
                    1e-12);
    for (std::size_t c = 4; c < 6; ++c) {
        REQUIRE(pair.a.vocab.names[c] != pair.b.vocab.names[c]);
        REQUIRE(pair.a.prototypes[c] != pair.b.prototypes[c]);
    }
    Partition p = partition_shared_novel(pair.a.vocab, pair.b.vocab);
    REQUIRE(p.shared.size() == 4);
    REQUIRE(p.novel_a.size() == 2);
    REQUIRE(p.novel_b.size() == 2);

    SECTION("same dataset names get disambiguated") {
        sa.dataset = sb.dataset = "both";
        SyntheticPair q = generate_pair(sa, sb, 2, 22);
        REQUIRE(q.a.spec.dataset == "both_a");
        REQUIRE(q.b.spec.dataset == "both_b");
    }
    SECTION("too many shared classes rejected") {
        REQUIRE_THROWS_AS(generate_pair(sa, sb, 7, 23), BadSpecError);
    }
}

TEST_CASE("sidecar roundtrip") {
    SyntheticSpec spec;
    spec.classes = 5;
    spec.dim = 16;
    spec.clips_per_class = 2;
    spec.frames_per_clip = 3;
    spec.seed = 14;
    SyntheticData data = synth_generate(spec);
    std::string path = temp_file("side.meta.json");
    write_sidecar(data, path);

    TextClassifier tc = load_classifier_rows(path, Task::Noun);
    REQUIRE(tc.vocab.names == data.vocab.names);
    REQUIRE(tc.raw.shape() == data.text_rows_raw.shape());
    for (std::size_t c = 0; c < 5; ++c)
        for (std::size_t j = 0; j < 16; ++j)
            REQUIRE(tc.raw.at(c, j) == data.text_rows_raw.at(c, j));

    TextClassifier direct = data.classifier();
    for (std::size_t c = 0; c < 5; ++c)
        for (std::size_t j = 0; j < 16; ++j)
            REQUIRE(tc.normalized.at(c, j) == direct.normalized.at(c, j));

    SECTION("missing keys rejected") {
        std::string bad = temp_file("bad.meta.json");
        io::atomic_write(bad, [](std::ostream& os) { os << "{\"vocab\": [\"a\"]}"; });
        REQUIRE_THROWS_AS(load_classifier_rows(bad, Task::Noun), FormatError);
    }
    SECTION("missing file") {
        REQUIRE_THROWS_AS(load_classifier_rows(temp_file("absent.json"), Task::Noun), IoError);
    }
}

TEST_CASE("build_text_classifier") {
    ClassVocabulary vocab = make_vocabulary({"cup", "plate"}, Task::Noun);
    Tensor rows = Tensor::from({2, 2}, {3, 4, 0, 2});
    TextClassifier tc = build_text_classifier(rows, vocab);
    REQUIRE(tc.classes() == 2);
    REQUIRE(tc.dim() == 2);
    REQUIRE(std::abs(tc.normalized.at(0, 0) - 0.6) < 1e-12);
    REQUIRE(std::abs(tc.normalized.at(0, 1) - 0.8) < 1e-12);
    REQUIRE(tc.normalized.at(1, 1) == 1.0);
    REQUIRE(tc.raw.at(0, 0) == 3.0);

    REQUIRE_THROWS_AS(build_text_classifier(Tensor::from({2}, {1, 0}), vocab), BadShapeError);
    REQUIRE_THROWS_AS(
        build_text_classifier(Tensor::from({3, 2}, {1, 0, 0, 1, 1, 0}), vocab),
        DimMismatchError);
    REQUIRE_THROWS_AS(build_text_classifier(Tensor::from({2, 2}, {1, 0, 0, 0}), vocab),
                      ZeroNormError);

    SECTION("already-unit rows unchanged within 1e-7") {
        Rng rng = make_rng(15);
        Tensor unit = l2_normalize(Tensor::randn({2, 8}, rng));
        TextClassifier t2 = build_text_classifier(
            unit, make_vocabulary({"a", "b"}, Task::Noun));
        for (std::size_t i = 0; i < unit.numel(); ++i)
            REQUIRE(std::abs(t2.normalized.data()[i] - unit.data()[i]) < 1e-7);
    }
}

TEST_CASE("toy text encoder basics") {
    ToyTextEncoder enc(32, 42);
    REQUIRE(enc.dim() == 32);

    SECTION("deterministic per name and seed") {
        Tensor a = enc.encode_name("cup");
        Tensor b = enc.encode_name("cup");
        REQUIRE(a.data() == b.data());
        ToyTextEncoder enc2(32, 42);
        REQUIRE(enc2.encode_name("cup").data() == a.data());
        ToyTextEncoder enc3(32, 43);
        REQUIRE(enc3.encode_name("cup").data() != a.data());
        REQUIRE(enc.encode_name("plate").data() != a.data());
    }
    SECTION("tokenization is whitespace driven") {
        REQUIRE(enc.encode_name("cutting board").data() ==
                enc.encode_name("cutting\tboard").data());
    }
    SECTION("empty names rejected") {
        REQUIRE_THROWS_AS(enc.encode_name(""), EmptyClassNameError);
        REQUIRE_THROWS_AS(enc.encode_name("   "), EmptyClassNameError);
    }
    SECTION("token overflow truncates against the context budget") {
        std::string long_name = "a";
        for (int i = 0; i < 30; ++i) long_name += " a";  // 31 tokens
        std::string capped = "a";
        for (int i = 0; i < 15; ++i) capped += " a";  // context length 16
        REQUIRE(enc.encode_name(long_name).data() == enc.encode_name(capped).data());
    }
    SECTION("encode_rows stacks name encodings") {
        Tensor rows = enc.encode_rows({"cup", "plate"});
        REQUIRE(rows.shape() == (Shape{2, 32}));
        Tensor one = enc.encode_name("plate");
        for (std::size_t j = 0; j < 32; ++j) REQUIRE(rows.at(1, j) == one.at(j));
        REQUIRE_THROWS_AS(enc.encode_rows({}), EmptySequenceError);
    }
    SECTION("encode produces a unit-row classifier") {
        ClassVocabulary vocab = make_vocabulary({"cup", "plate", "knife"}, Task::Noun);
        TextClassifier tc = enc.encode(vocab);
        REQUIRE(tc.classes() == 3);
        for (std::size_t c = 0; c < 3; ++c) {
            Scalar n2 = 0.0;
            for (std::size_t j = 0; j < 32; ++j) n2 += tc.normalized.at(c, j) * tc.normalized.at(c, j);
            REQUIRE(std::abs(std::sqrt(n2) - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("prompt composition rules") {
    ToyTextEncoder enc(32, 7);
    Rng rng = make_rng(8);
    Tensor prompts = Tensor::randn({2, 32}, rng, 0.02);

    SECTION("prompts change the encoding") {
        REQUIRE(enc.encode_name("cup", prompts).data() != enc.encode_name("cup").data());
    }
    SECTION("zero-row prompts are a no-op") {
        REQUIRE(enc.encode_name("cup", Tensor::zeros({0, 32})).data() ==
                enc.encode_name("cup").data());
    }
    SECTION("conditional requires prompts") {
        Tensor cond = Tensor::randn({32}, rng, 0.02);
        REQUIRE_THROWS_AS(enc.encode_name("cup", Tensor(), cond),
                          IncompatibleCompositionError);
        REQUIRE_THROWS_AS(enc.encode_name("cup", Tensor::zeros({0, 32}), cond),
                          IncompatibleCompositionError);
        REQUIRE(enc.encode_name("cup", prompts, cond).data() !=
                enc.encode_name("cup", prompts).data());
    }
    SECTION("prompt rows bounded by context length") {
        Tensor wide = Tensor::randn({16, 32}, rng, 0.02);
        REQUIRE_THROWS_AS(enc.encode_name("cup", wide), BadSpecError);
    }
    SECTION("wrong prompt width") {
        Tensor bad = Tensor::randn({2, 16}, rng, 0.02);
        REQUIRE_THROWS_AS(enc.encode_name("cup", bad), DimMismatchError);
    }
}

TEST_CASE("frozen contract and prompt gradients") {
    ToyTextEncoder enc(32, 11);
    std::uint64_t before = enc.param_hash();
    for (const auto& [name, t] : enc.frozen_params()) REQUIRE_FALSE(t.requires_grad());

    Rng rng = make_rng(12);
    Tensor prompts = Tensor::randn({2, 32}, rng, 0.1, /*requires_grad=*/true);
    Tensor cond = Tensor::randn({32}, rng, 0.1, /*requires_grad=*/true);
    Tensor probe = Tensor::randn({2, 32}, rng);

    SECTION("gradients reach prompts and conditional, never the encoder") {
        Tensor loss = sum(mul(enc.encode_rows({"cup", "plate"}, prompts, cond), probe));
        backward(loss);
        REQUIRE(prompts.has_grad());
        REQUIRE(cond.has_grad());
        for (const auto& [name, t] : enc.frozen_params()) REQUIRE_FALSE(t.has_grad());
        REQUIRE(enc.param_hash() == before);
    }

    SECTION("prompt gradients pass finite differences") {
        auto f = [&]() {
            return sum(mul(enc.encode_rows({"cup", "plate"}, prompts, cond), probe));
        };
        GradCheckReport report = grad_check(f, {{"prompts", prompts}, {"cond", cond}}, 1e-5, 1e-5);
        INFO("max rel err " << report.max_rel_err);
        REQUIRE(report.pass);
    }

    SECTION("hash is sensitive to parameter bytes") {
        NamedParams params = enc.frozen_params();
        Tensor copy = Tensor::from(params[0].second.shape(), params[0].second.data());
        copy.mutable_data()[0] += 1e-9;
        NamedParams mutated = params;
        mutated[0].second = copy;
        REQUIRE(hash_params(mutated) != hash_params(params));
    }
}
