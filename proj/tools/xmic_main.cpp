#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "xmic/xmic.hpp"

namespace {

using nlohmann::json;
using namespace xmic;

json load_config_file(const std::string& path) {
    if (path.empty()) return json::object();
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file '" + path + "'");
    try {
        json j;
        is >> j;
        if (!j.is_object()) throw ConfigError("config file must hold a JSON object");
        return j;
    } catch (const json::exception& e) {
        throw ConfigError("config file '" + path + "': " + e.what());
    }
}

// Overlay precedence: CLI flag > config file key > built-in default. The
// variable already holds CLI-or-default; a config key replaces it only when
// the flag was not given on the command line.
template <typename T>
void merge_config(const CLI::App& cmd, const std::string& flag, const json& cfg,
                  const std::string& key, T& value) {
    if (cmd.count(flag) > 0) return;
    if (!cfg.contains(key)) return;
    try {
        value = cfg.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError("config key '" + key + "': " + e.what());
    }
}

void print_resolved(const std::string& verb, const json& resolved) {
    std::cout << "resolved_config " << json{{"verb", verb}, {"config", resolved}}.dump() << "\n";
}

std::string strip_suffix(const std::string& path, const std::string& suffix) {
    if (path.size() >= suffix.size() &&
        path.compare(path.size() - suffix.size(), suffix.size(), suffix) == 0)
        return path.substr(0, path.size() - suffix.size());
    return path;
}

void write_text_atomic(const std::string& path, const std::string& text) {
    io::atomic_write(path, [&](std::ostream& os) { os << text; });
}

struct LoadedDataset {
    EmbeddingStore store_v;
    EmbeddingStore store_v2;
    bool two_streams = false;
    std::vector<ClipPair> pairs;
    ClassVocabulary vocab;
    std::optional<TextClassifier> fixed;

    const TextClassifier* fixed_ptr() const { return fixed ? &*fixed : nullptr; }
};

LoadedDataset load_dataset(const std::string& store_path, const std::string& store_v2_path,
                           const std::string& manifest_path, const std::string& vocab_path,
                           const std::string& classifier_rows_path, Task task) {
    LoadedDataset d;
    d.store_v = read_store(store_path);
    if (!manifest_path.empty()) apply_manifest(d.store_v, read_manifest(manifest_path));
    if (!store_v2_path.empty()) {
        d.store_v2 = read_store(store_v2_path);
        d.two_streams = true;
        d.pairs = pair_streams(d.store_v, d.store_v2);
    } else {
        d.pairs = pair_streams(d.store_v);
    }
    if (!classifier_rows_path.empty()) {
        d.fixed = load_classifier_rows(classifier_rows_path, task);
        d.vocab = d.fixed->vocab;
    }
    if (!vocab_path.empty()) d.vocab = load_vocabulary(vocab_path, task);
    if (d.vocab.names.empty())
        throw ConfigError("no vocabulary: pass --vocab or a classifier_rows config key");
    return d;
}

// --------------------------------------------------------------------------
// gen-synth

int run_gen_synth(const CLI::App& cmd, const json& cfg, std::uint64_t seed,
                  const std::string& out, std::string manifest_path, std::string vocab_path) {
    if (out.empty()) throw ConfigError("gen-synth needs --out for the store path");
    std::string base = strip_suffix(out, ".bin");
    if (manifest_path.empty()) manifest_path = base + ".jsonl";
    if (vocab_path.empty()) vocab_path = base + ".vocab.txt";

    SyntheticSpec spec = synthetic_spec_from_json(cfg);
    if (cmd.count("--seed")) spec.seed = seed;

    bool second_stream = cfg.value("second_stream", false);
    auto emit = [&](const SyntheticData& data, const std::string& stem,
                    const std::string& man_path, const std::string& voc_path,
                    std::uint64_t v2_salt) {
        write_store(data.store, stem + ".bin");
        if (second_stream) write_store(synth_second_stream(data, v2_salt), stem + "_v2.bin");
        write_manifest(data.manifest, man_path);
        std::string names;
        for (const auto& n : data.vocab.names) names += n + "\n";
        write_text_atomic(voc_path, names);
        write_sidecar(data, stem + ".meta.json");
    };

    if (cfg.contains("pair")) {
        const json& pj = cfg.at("pair");
        SyntheticSpec spec_a = spec;
        SyntheticSpec spec_b = spec;
        if (pj.contains("classes_b")) spec_b.classes = pj.at("classes_b").get<std::size_t>();
        if (pj.contains("clips_per_class_b"))
            spec_b.clips_per_class = pj.at("clips_per_class_b").get<std::size_t>();
        spec_a.dataset = pj.value("dataset_a", spec.dataset + "_a");
        spec_b.dataset = pj.value("dataset_b", spec.dataset + "_b");
        std::size_t shared = pj.value("shared_classes", spec.classes / 2);
        SyntheticPair pair = generate_pair(spec_a, spec_b, shared, spec.seed);
        emit(pair.a, base + "_a", strip_suffix(manifest_path, ".jsonl") + "_a.jsonl",
             strip_suffix(vocab_path, ".txt") + "_a.txt", 0xb2a);
        emit(pair.b, base + "_b", strip_suffix(manifest_path, ".jsonl") + "_b.jsonl",
             strip_suffix(vocab_path, ".txt") + "_b.txt", 0xb2b);
        Partition p = partition_shared_novel(pair.a.vocab, pair.b.vocab);
        json resolved = synthetic_spec_to_json(spec);
        resolved["pair"] = pj;
        resolved["out"] = out;
        print_resolved("gen-synth", resolved);
        std::printf("shared=%zu novel_a=%zu novel_b=%zu\n", p.shared.size(), p.novel_a.size(),
                    p.novel_b.size());
        std::printf("wrote %s_a.bin (%zu clips) and %s_b.bin (%zu clips)\n", base.c_str(),
                    pair.a.store.records.size(), base.c_str(), pair.b.store.records.size());
        return 0;
    }

    SyntheticData data = synth_generate(spec);
    emit(data, base, manifest_path, vocab_path, 0xb2);
    json resolved = synthetic_spec_to_json(spec);
    resolved["out"] = out;
    resolved["manifest"] = manifest_path;
    resolved["vocab"] = vocab_path;
    print_resolved("gen-synth", resolved);
    std::printf("wrote %s (%zu clips, dim %zu)\n", out.c_str(), data.store.records.size(),
                data.store.dim);
    return 0;
}

// --------------------------------------------------------------------------
// ingest

int run_ingest(const std::string& store_path, const std::string& store_v2_path,
               const std::string& manifest_path, const std::string& out) {
    if (store_path.empty()) throw ConfigError("ingest needs --store-v");
    EmbeddingStore store = read_store(store_path);
    std::size_t labeled = 0;
    if (!manifest_path.empty()) {
        apply_manifest(store, read_manifest(manifest_path));
        for (const auto& r : store.records)
            if (!r.noun_label.empty() || !r.verb_label.empty()) ++labeled;
    }
    json summary{{"store", store_path},
                 {"dim", store.dim},
                 {"clips", store.records.size()},
                 {"labeled", labeled}};
    if (!store_v2_path.empty()) {
        EmbeddingStore v2 = read_store(store_v2_path);
        std::vector<ClipPair> pairs = pair_streams(store, v2);  // validates dim + id coverage
        summary["store_v2"] = store_v2_path;
        summary["paired"] = pairs.size();
    }
    if (!out.empty()) write_store(store, out);
    print_resolved("ingest", summary);
    std::cout << summary.dump() << "\n";
    return 0;
}

// --------------------------------------------------------------------------
// train

struct TrainFlags {
    std::string config_path, store_v, store_v2, manifest, vocab, out;
    std::string task = "noun";
    std::string strategy = "xmic";
    std::string norm = "n1";
    Scalar alpha = 1.0, lr = 1e-6, temperature = 0.01;
    std::size_t frames = 16, epochs = 15, batch = 64;
    std::uint64_t seed = 1;
};

TrainConfig build_train_config(const TrainFlags& f, const json& cfg) {
    TrainConfig tc;
    tc.task = parse_task(f.task);
    tc.strategy = f.strategy;
    tc.alpha = f.alpha;
    tc.norms = parse_norm_flags(f.norm);
    tc.frames = f.frames;
    tc.epochs = f.epochs;
    tc.batch_size = f.batch;
    tc.lr = f.lr;
    tc.temperature = f.temperature;
    tc.seed = f.seed;
    tc.zero_init = cfg.value("zero_init", tc.zero_init);
    tc.temporal = cfg.value("temporal", tc.temporal);
    if (cfg.contains("spatial")) tc.spatial = parse_spatial_mode(cfg.at("spatial").get<std::string>());
    tc.prompt_count = cfg.value("prompt_count", tc.prompt_count);
    tc.bottleneck_blend = cfg.value("bottleneck_blend", tc.bottleneck_blend);
    tc.weight_decay = cfg.value("weight_decay", tc.weight_decay);
    tc.beta1 = cfg.value("beta1", tc.beta1);
    tc.beta2 = cfg.value("beta2", tc.beta2);
    tc.validate();
    return tc;
}

json train_config_json(const TrainFlags& f, const TrainConfig& tc, const json& cfg) {
    return json{{"store_v", f.store_v},
                {"store_v2", f.store_v2},
                {"manifest", f.manifest},
                {"vocab", f.vocab},
                {"classifier_rows", cfg.value("classifier_rows", std::string())},
                {"task", task_name(tc.task)},
                {"strategy", tc.strategy},
                {"alpha", tc.alpha},
                {"norm", tc.norms.to_string()},
                {"frames", tc.frames},
                {"epochs", tc.epochs},
                {"batch", tc.batch_size},
                {"lr", tc.lr},
                {"temperature", tc.temperature},
                {"seed", tc.seed},
                {"zero_init", tc.zero_init},
                {"temporal", tc.temporal},
                {"spatial", spatial_mode_name(tc.spatial)},
                {"prompt_count", tc.prompt_count},
                {"bottleneck_blend", tc.bottleneck_blend},
                {"weight_decay", tc.weight_decay},
                {"out", f.out}};
}

int run_train(const TrainFlags& f, const json& cfg) {
    if (f.store_v.empty()) throw ConfigError("train needs --store-v");
    TrainConfig tc = build_train_config(f, cfg);
    std::string rows_path = cfg.value("classifier_rows", std::string());
    LoadedDataset data =
        load_dataset(f.store_v, f.store_v2, f.manifest, f.vocab, rows_path, tc.task);
    print_resolved("train", train_config_json(f, tc, cfg));

    ModelConfig mc = tc.model_config();
    mc.dim = data.store_v.dim;
    Model model = make_model(mc, /*need_encoder=*/!data.fixed);
    TrainResult result = train_run(model, data.pairs, data.vocab, data.fixed_ptr(), tc);

    for (const auto& line : result.metrics)
        if (line.contains("event")) std::cout << line.dump() << "\n";
    if (!f.out.empty()) {
        save_checkpoint(f.out, model, tc.task, tc.temperature, tc.frames);
        std::string metrics_text;
        for (const auto& line : result.metrics) metrics_text += line.dump() + "\n";
        write_text_atomic(f.out + ".metrics.jsonl", metrics_text);
        std::printf("wrote %s (%llu steps)\n", f.out.c_str(),
                    static_cast<unsigned long long>(result.steps));
    }
    return 0;
}

// --------------------------------------------------------------------------
// eval

struct EvalFlags {
    std::string config_path, ckpt, store_v, store_v2, manifest, vocab;
    std::string eval_store, eval_manifest, eval_vocab;
    std::string out, format = "table";
    std::string task;
    std::size_t frames = 0;       // 0: take from checkpoint
    Scalar temperature = 0.0;     // 0: take from checkpoint
};

std::string format_report(const EvalReport& report, const std::string& format) {
    if (format == "json") return report.to_json().dump(2) + "\n";
    if (format == "csv") return report.to_csv();
    if (format == "table") return report.to_table();
    throw ConfigError("unknown format '" + format + "' (expected json, table or csv)");
}

int run_eval(const EvalFlags& f, const json& cfg) {
    if (f.ckpt.empty()) throw ConfigError("eval needs --ckpt");
    if (f.store_v.empty()) throw ConfigError("eval needs --store-v");
    Checkpoint ckpt = read_checkpoint(f.ckpt);
    Model model = load_model(ckpt);

    EvalConfig ec;
    ec.task = parse_task(f.task.empty() ? ckpt.metadata.value("task", std::string("noun"))
                                        : f.task);
    ec.frames = f.frames ? f.frames : ckpt.metadata.value("frames", std::size_t{16});
    ec.temperature =
        f.temperature > 0 ? f.temperature : ckpt.metadata.value("temperature", 0.01);
    ec.restrict_rows_to_subset = cfg.value("restrict_rows_to_subset", false);

    std::string rows_path = cfg.value("classifier_rows", std::string());
    LoadedDataset within =
        load_dataset(f.store_v, f.store_v2, f.manifest, f.vocab, rows_path, ec.task);
    EvalDataset within_ds{cfg.value("within_name", std::string("within")), within.pairs,
                          within.vocab, within.fixed_ptr()};

    std::optional<LoadedDataset> cross;
    std::optional<EvalDataset> cross_ds;
    std::optional<Partition> partition;
    if (!f.eval_store.empty()) {
        std::string cross_rows = cfg.value("eval_classifier_rows", std::string());
        std::string cross_v2 = cfg.value("eval_store_v2", std::string());
        cross = load_dataset(f.eval_store, cross_v2, f.eval_manifest, f.eval_vocab, cross_rows,
                             ec.task);
        cross_ds = EvalDataset{cfg.value("cross_name", std::string("cross")), cross->pairs,
                               cross->vocab, cross->fixed_ptr()};
        partition = partition_shared_novel(within.vocab, cross->vocab);
    }

    json resolved{{"ckpt", f.ckpt},
                  {"store_v", f.store_v},
                  {"eval_store", f.eval_store},
                  {"task", task_name(ec.task)},
                  {"frames", ec.frames},
                  {"temperature", ec.temperature},
                  {"format", f.format},
                  {"restrict_rows_to_subset", ec.restrict_rows_to_subset},
                  {"out", f.out}};
    print_resolved("eval", resolved);

    EvalReport report = evaluate_cross_dataset(model, within_ds, cross_ds ? &*cross_ds : nullptr,
                                               partition ? &*partition : nullptr, ec);
    std::string text = format_report(report, f.format);
    std::cout << text;
    if (!f.out.empty()) write_text_atomic(f.out, text);
    return 0;
}

// --------------------------------------------------------------------------
// ablate

struct AblateVariant {
    std::string label;
    TrainConfig tc;
};

std::vector<AblateVariant> ablate_variants(const std::string& kind, const TrainConfig& base) {
    std::vector<AblateVariant> out;
    auto push = [&](const std::string& label, TrainConfig tc) { out.push_back({label, std::move(tc)}); };
    if (kind == "norm") {
        for (const char* n : {"n1", "none", "n2,n3", "n1,n2,n3", "n1,n2", "n1,n3"}) {
            TrainConfig tc = base;
            tc.norms = parse_norm_flags(n);
            push(std::string("norm=") + parse_norm_flags(n).to_string(), tc);
        }
    } else if (kind == "alpha") {
        for (Scalar a : {0.1, 0.5, 1.0, 2.0, 5.0}) {
            TrainConfig tc = base;
            tc.alpha = a;
            char buf[32];
            std::snprintf(buf, sizeof(buf), "alpha=%g", a);
            push(buf, tc);
        }
    } else if (kind == "frames") {
        for (std::size_t n : {2, 4, 8, 16, 32}) {
            TrainConfig tc = base;
            tc.frames = n;
            push("frames=" + std::to_string(n), tc);
        }
    } else if (kind == "spatial") {
        for (SpatialMode m : {SpatialMode::FullOnly, SpatialMode::HandOnly, SpatialMode::Both}) {
            TrainConfig tc = base;
            tc.spatial = m;
            push("spatial=" + spatial_mode_name(m), tc);
        }
    } else if (kind == "compose") {
        for (const char* s : {"early-uni+xmic", "early-cross+xmic", "xmic", "xmic+tt", "xmic+vv",
                              "xmic+tt+vv"}) {
            TrainConfig tc = base;
            tc.strategy = s;
            push(std::string("compose=") + s, tc);
        }
    } else {
        throw ConfigError("unknown ablation kind '" + kind +
                          "' (expected norm, alpha, frames, spatial or compose)");
    }
    return out;
}

struct AblateRow {
    std::string variant;
    Scalar within = 0, cross = 0, hm = 0;
    bool has_cross = false;
};

std::string format_ablate_rows(const std::vector<AblateRow>& rows, const std::string& format) {
    if (format == "json") {
        json arr = json::array();
        for (const auto& r : rows) {
            json j{{"variant", r.variant}, {"within", r.within}};
            if (r.has_cross) {
                j["cross"] = r.cross;
                j["hm"] = r.hm;
            }
            arr.push_back(j);
        }
        return arr.dump(2) + "\n";
    }
    if (format == "csv") {
        std::string out = "variant,within,cross,hm\n";
        char buf[160];
        for (const auto& r : rows) {
            if (r.has_cross)
                std::snprintf(buf, sizeof(buf), "%s,%.6f,%.6f,%.6f\n", r.variant.c_str(),
                              r.within, r.cross, r.hm);
            else
                std::snprintf(buf, sizeof(buf), "%s,%.6f,,\n", r.variant.c_str(), r.within);
            out += buf;
        }
        return out;
    }
    if (format == "table") {
        char buf[160];
        std::string out;
        std::snprintf(buf, sizeof(buf), "%-28s %10s %10s %10s\n", "variant", "within", "cross",
                      "hm");
        out += buf;
        for (const auto& r : rows) {
            if (r.has_cross)
                std::snprintf(buf, sizeof(buf), "%-28s %10.2f %10.2f %10.2f\n",
                              r.variant.c_str(), r.within, r.cross, r.hm);
            else
                std::snprintf(buf, sizeof(buf), "%-28s %10.2f %10s %10s\n", r.variant.c_str(),
                              r.within, "-", "-");
            out += buf;
        }
        return out;
    }
    throw ConfigError("unknown format '" + format + "' (expected json, table or csv)");
}

int run_ablate(const std::string& kind, const TrainFlags& f, const EvalFlags& ef,
               const json& cfg) {
    if (f.store_v.empty()) throw ConfigError("ablate needs --store-v");
    TrainConfig base = build_train_config(f, cfg);
    std::vector<AblateVariant> variants = ablate_variants(kind, base);

    std::string rows_path = cfg.value("classifier_rows", std::string());
    LoadedDataset data =
        load_dataset(f.store_v, f.store_v2, f.manifest, f.vocab, rows_path, base.task);
    std::optional<LoadedDataset> cross;
    std::optional<Partition> partition;
    if (!ef.eval_store.empty()) {
        std::string cross_rows = cfg.value("eval_classifier_rows", std::string());
        cross = load_dataset(ef.eval_store, cfg.value("eval_store_v2", std::string()),
                             ef.eval_manifest, ef.eval_vocab, cross_rows, base.task);
        partition = partition_shared_novel(data.vocab, cross->vocab);
    }

    json resolved = train_config_json(f, base, cfg);
    resolved["kind"] = kind;
    resolved["eval_store"] = ef.eval_store;
    resolved["format"] = ef.format;
    print_resolved("ablate", resolved);

    std::vector<AblateRow> rows;
    for (const auto& variant : variants) {
        ModelConfig mc = variant.tc.model_config();
        mc.dim = data.store_v.dim;
        Model model = make_model(mc, /*need_encoder=*/!data.fixed);
        train_run(model, data.pairs, data.vocab, data.fixed_ptr(), variant.tc);

        EvalConfig ec;
        ec.task = variant.tc.task;
        ec.frames = variant.tc.frames;
        ec.temperature = variant.tc.temperature;
        EvalDataset within_ds{"within", data.pairs, data.vocab, data.fixed_ptr()};
        std::optional<EvalDataset> cross_ds;
        if (cross)
            cross_ds = EvalDataset{"cross", cross->pairs, cross->vocab, cross->fixed_ptr()};
        EvalReport report = evaluate_cross_dataset(model, within_ds,
                                                   cross_ds ? &*cross_ds : nullptr,
                                                   partition ? &*partition : nullptr, ec);
        AblateRow row;
        row.variant = variant.label;
        row.within = report.within_all.top1;
        row.has_cross = report.has_cross;
        if (report.has_cross) {
            row.cross = report.cross_all.top1;
            row.hm = report.hm_within_cross;
        }
        rows.push_back(row);
        std::cout << "variant " << row.variant << " done\n";
    }
    std::string text = format_ablate_rows(rows, ef.format);
    std::cout << text;
    if (!ef.out.empty()) write_text_atomic(ef.out, text);
    return 0;
}

// --------------------------------------------------------------------------
// partition / gradcheck / profile

int run_partition(const std::string& vocab_a, const std::string& vocab_b,
                  const std::string& task_text, const std::string& out) {
    if (vocab_a.empty() || vocab_b.empty())
        throw ConfigError("partition needs --vocab-a and --vocab-b");
    Task task = parse_task(task_text);
    ClassVocabulary a = load_vocabulary(vocab_a, task);
    ClassVocabulary b = load_vocabulary(vocab_b, task);
    Partition p = partition_shared_novel(a, b);
    print_resolved("partition",
                   json{{"vocab_a", vocab_a}, {"vocab_b", vocab_b}, {"task", task_text}});
    std::printf("shared=%zu novel_a=%zu novel_b=%zu\n", p.shared.size(), p.novel_a.size(),
                p.novel_b.size());
    if (!out.empty()) {
        json j{{"shared", p.shared}, {"novel_a", p.novel_a}, {"novel_b", p.novel_b}};
        write_text_atomic(out, j.dump(2) + "\n");
    }
    return 0;
}

int run_gradcheck(std::uint64_t seed) {
    print_resolved("gradcheck", json{{"seed", seed}});
    std::vector<std::pair<std::string, GradCheckReport>> reports = full_grad_check_suite(seed);
    bool ok = true;
    for (const auto& [name, report] : reports) {
        std::printf("%-32s max_rel_err=%.3e %s\n", name.c_str(), report.max_rel_err,
                    report.pass ? "ok" : "FAIL");
        ok = ok && report.pass;
    }
    if (!ok) throw Error("gradient check failed");
    return 0;
}

int run_profile(const std::string& strategy, const json& cfg, const std::string& format,
                const std::string& out) {
    std::size_t C = cfg.value("classes", std::size_t{8});
    std::size_t P = cfg.value("prompts", std::size_t{4});
    std::size_t D = cfg.value("dim", std::size_t{32});
    std::size_t N = cfg.value("frames", std::size_t{8});
    std::vector<std::size_t> batches = cfg.value("batch_list", std::vector<std::size_t>{});
    if (batches.empty()) batches.push_back(cfg.value("batch", std::size_t{2}));
    print_resolved("profile", json{{"strategy", strategy},
                                   {"classes", C},
                                   {"prompts", P},
                                   {"dim", D},
                                   {"frames", N},
                                   {"batches", batches}});
    json arr = json::array();
    std::string table = "strategy,B,C,P,D,N,conditioning_activations\n";
    for (std::size_t B : batches) {
        CostRecord r = activation_cost_profile(strategy, B, C, P, D, N);
        arr.push_back(r.to_json());
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%s,%zu,%zu,%zu,%zu,%zu,%llu\n", r.strategy.c_str(),
                      r.batch, r.classes, r.prompts, r.dim, r.frames,
                      static_cast<unsigned long long>(r.conditioning_activations));
        table += buf;
    }
    std::string text = format == "json" ? arr.dump(2) + "\n" : table;
    std::cout << text;
    if (!out.empty()) write_text_atomic(out, text);
    return 0;
}

// --------------------------------------------------------------------------

int dispatch(int argc, char** argv) {
    CLI::App app{"Cross-modal adaptation of frozen vision-language embeddings"};
    app.require_subcommand(1);

    // gen-synth
    auto* gen = app.add_subcommand("gen-synth", "Generate a synthetic embedding dataset");
    std::string gen_config, gen_out, gen_manifest, gen_vocab;
    std::uint64_t gen_seed = 1;
    gen->add_option("--config", gen_config, "JSON config file");
    gen->add_option("--seed", gen_seed, "generator seed");
    gen->add_option("--out", gen_out, "output store path (.bin)");
    gen->add_option("--manifest", gen_manifest, "output manifest path (.jsonl)");
    gen->add_option("--vocab", gen_vocab, "output vocabulary path (.txt)");

    // ingest
    auto* ingest = app.add_subcommand("ingest", "Validate stores and manifests");
    std::string in_store, in_store2, in_manifest, in_out;
    ingest->add_option("--store-v", in_store, "V-stream store");
    ingest->add_option("--store-v2", in_store2, "V_II-stream store");
    ingest->add_option("--manifest", in_manifest, "label manifest");
    ingest->add_option("--out", in_out, "rewrite validated store here");

    // train
    auto* train = app.add_subcommand("train", "Train an adapter");
    TrainFlags tf;
    train->add_option("--config", tf.config_path, "JSON config file");
    train->add_option("--store-v", tf.store_v, "V-stream store");
    train->add_option("--store-v2", tf.store_v2, "V_II-stream store");
    train->add_option("--manifest", tf.manifest, "label manifest");
    train->add_option("--vocab", tf.vocab, "class vocabulary");
    train->add_option("--task", tf.task, "noun or verb");
    train->add_option("--strategy", tf.strategy, "adaptation strategy");
    train->add_option("--alpha", tf.alpha, "conditioning scale");
    train->add_option("--norm", tf.norm, "norm flags (n1,n2,n3 or none)");
    train->add_option("--frames", tf.frames, "frames per clip");
    train->add_option("--epochs", tf.epochs, "training epochs");
    train->add_option("--lr", tf.lr, "learning rate");
    train->add_option("--batch", tf.batch, "batch size");
    train->add_option("--temperature", tf.temperature, "logit temperature");
    train->add_option("--seed", tf.seed, "training seed");
    train->add_option("--out", tf.out, "checkpoint output path");

    // eval
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
    EvalFlags ef;
    eval->add_option("--config", ef.config_path, "JSON config file");
    eval->add_option("--ckpt", ef.ckpt, "checkpoint path");
    eval->add_option("--store-v", ef.store_v, "within-dataset V store");
    eval->add_option("--store-v2", ef.store_v2, "within-dataset V_II store");
    eval->add_option("--manifest", ef.manifest, "within-dataset manifest");
    eval->add_option("--vocab", ef.vocab, "within-dataset vocabulary");
    eval->add_option("--eval-store", ef.eval_store, "cross-dataset V store");
    eval->add_option("--eval-manifest", ef.eval_manifest, "cross-dataset manifest");
    eval->add_option("--eval-vocab", ef.eval_vocab, "cross-dataset vocabulary");
    eval->add_option("--task", ef.task, "noun or verb");
    eval->add_option("--frames", ef.frames, "frames per clip");
    eval->add_option("--temperature", ef.temperature, "logit temperature");
    eval->add_option("--format", ef.format, "json, table or csv");
    eval->add_option("--out", ef.out, "report output path");

    // ablate
    auto* ablate = app.add_subcommand("ablate", "Run an ablation sweep");
    std::string ab_kind;
    TrainFlags af;
    EvalFlags aef;
    ablate->add_option("kind", ab_kind, "norm, alpha, frames, spatial or compose")->required();
    ablate->add_option("--config", af.config_path, "JSON config file");
    ablate->add_option("--store-v", af.store_v, "V-stream store");
    ablate->add_option("--store-v2", af.store_v2, "V_II-stream store");
    ablate->add_option("--manifest", af.manifest, "label manifest");
    ablate->add_option("--vocab", af.vocab, "class vocabulary");
    ablate->add_option("--eval-store", aef.eval_store, "cross-dataset V store");
    ablate->add_option("--eval-manifest", aef.eval_manifest, "cross-dataset manifest");
    ablate->add_option("--eval-vocab", aef.eval_vocab, "cross-dataset vocabulary");
    ablate->add_option("--task", af.task, "noun or verb");
    ablate->add_option("--strategy", af.strategy, "adaptation strategy");
    ablate->add_option("--alpha", af.alpha, "conditioning scale");
    ablate->add_option("--norm", af.norm, "norm flags");
    ablate->add_option("--frames", af.frames, "frames per clip");
    ablate->add_option("--epochs", af.epochs, "training epochs");
    ablate->add_option("--lr", af.lr, "learning rate");
    ablate->add_option("--batch", af.batch, "batch size");
    ablate->add_option("--temperature", af.temperature, "logit temperature");
    ablate->add_option("--seed", af.seed, "training seed");
    ablate->add_option("--format", aef.format, "json, table or csv");
    ablate->add_option("--out", aef.out, "sweep report output path");

    // partition
    auto* partition = app.add_subcommand("partition", "Shared/novel class partition");
    std::string pa, pb, ptask = "noun", pout;
    partition->add_option("--vocab-a", pa, "first vocabulary");
    partition->add_option("--vocab-b", pb, "second vocabulary");
    partition->add_option("--task", ptask, "noun or verb");
    partition->add_option("--out", pout, "partition JSON output path");

    // gradcheck
    auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
    std::uint64_t gc_seed = 7;
    gradcheck->add_option("--seed", gc_seed, "seed for test points");

    // profile
    auto* profile = app.add_subcommand("profile", "Conditioning activation-cost profile");
    std::string pf_strategy = "xmic", pf_config, pf_format = "csv", pf_out;
    profile->add_option("--strategy", pf_strategy, "strategy to profile");
    profile->add_option("--config", pf_config, "JSON config file (classes, prompts, dim, ...)");
    profile->add_option("--format", pf_format, "json or csv");
    profile->add_option("--out", pf_out, "profile output path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    if (gen->parsed()) {
        json cfg = load_config_file(gen_config);
        return run_gen_synth(*gen, cfg, gen_seed, gen_out, gen_manifest, gen_vocab);
    }
    if (ingest->parsed()) return run_ingest(in_store, in_store2, in_manifest, in_out);
    if (train->parsed()) {
        json cfg = load_config_file(tf.config_path);
        merge_config(*train, "--store-v", cfg, "store_v", tf.store_v);
        merge_config(*train, "--store-v2", cfg, "store_v2", tf.store_v2);
        merge_config(*train, "--manifest", cfg, "manifest", tf.manifest);
        merge_config(*train, "--vocab", cfg, "vocab", tf.vocab);
        merge_config(*train, "--task", cfg, "task", tf.task);
        merge_config(*train, "--strategy", cfg, "strategy", tf.strategy);
        merge_config(*train, "--alpha", cfg, "alpha", tf.alpha);
        merge_config(*train, "--norm", cfg, "norm", tf.norm);
        merge_config(*train, "--frames", cfg, "frames", tf.frames);
        merge_config(*train, "--epochs", cfg, "epochs", tf.epochs);
        merge_config(*train, "--lr", cfg, "lr", tf.lr);
        merge_config(*train, "--batch", cfg, "batch", tf.batch);
        merge_config(*train, "--temperature", cfg, "temperature", tf.temperature);
        merge_config(*train, "--seed", cfg, "seed", tf.seed);
        merge_config(*train, "--out", cfg, "out", tf.out);
        return run_train(tf, cfg);
    }
    if (eval->parsed()) {
        json cfg = load_config_file(ef.config_path);
        merge_config(*eval, "--frames", cfg, "frames", ef.frames);
        merge_config(*eval, "--temperature", cfg, "temperature", ef.temperature);
        merge_config(*eval, "--format", cfg, "format", ef.format);
        return run_eval(ef, cfg);
    }
    if (ablate->parsed()) {
        json cfg = load_config_file(af.config_path);
        merge_config(*ablate, "--strategy", cfg, "strategy", af.strategy);
        merge_config(*ablate, "--alpha", cfg, "alpha", af.alpha);
        merge_config(*ablate, "--norm", cfg, "norm", af.norm);
        merge_config(*ablate, "--frames", cfg, "frames", af.frames);
        merge_config(*ablate, "--epochs", cfg, "epochs", af.epochs);
        merge_config(*ablate, "--lr", cfg, "lr", af.lr);
        merge_config(*ablate, "--batch", cfg, "batch", af.batch);
        merge_config(*ablate, "--temperature", cfg, "temperature", af.temperature);
        merge_config(*ablate, "--seed", cfg, "seed", af.seed);
        return run_ablate(ab_kind, af, aef, cfg);
    }
    if (partition->parsed()) return run_partition(pa, pb, ptask, pout);
    if (gradcheck->parsed()) return run_gradcheck(gc_seed);
    if (profile->parsed()) {
        json cfg = load_config_file(pf_config);
        return run_profile(pf_strategy, cfg, pf_format, pf_out);
    }
    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return dispatch(argc, argv);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const BadSpecError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const TaskMismatchError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const IncompatibleCompositionError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
