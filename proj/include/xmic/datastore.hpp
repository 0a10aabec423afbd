#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "xmic/common.hpp"
#include "xmic/rng.hpp"
#include "xmic/tensor.hpp"

namespace xmic {

enum class Task { Noun, Verb };

inline std::string task_name(Task t) { return t == Task::Noun ? "noun" : "verb"; }

inline Task parse_task(const std::string& s) {
    if (s == "noun") return Task::Noun;
    if (s == "verb") return Task::Verb;
    throw ConfigError("unknown task '" + s + "' (expected noun|verb)");
}

// Embeddings are kept as float32 — the on-disk representation — so a
// write/read roundtrip is bit-exact; they widen to Scalar only when a
// Tensor is built.
struct ClipRecord {
    std::string id;
    std::size_t frames = 0;
    std::size_t dim = 0;
    std::vector<float> full;  // frames x dim, row-major
    std::vector<float> hand;  // empty, or frames x dim
    std::string noun_label;
    std::string verb_label;
    std::string dataset;

    bool has_hand() const { return !hand.empty(); }

    const std::string& label(Task task) const {
        const std::string& l = task == Task::Noun ? noun_label : verb_label;
        if (l.empty())
            throw MissingLabelError("clip " + id + " has no " + task_name(task) + " label");
        return l;
    }

    Tensor full_rows(const std::vector<std::size_t>& idx) const { return rows(full, idx); }

    // Hand stream, falling back to the full-frame stream when absent.
    Tensor hand_rows(const std::vector<std::size_t>& idx) const {
        return rows(has_hand() ? hand : full, idx);
    }

  private:
    Tensor rows(const std::vector<float>& src, const std::vector<std::size_t>& idx) const {
        std::vector<Scalar> out(idx.size() * dim);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            if (idx[i] >= frames) throw BadShapeError("frame index out of range in clip " + id);
            for (std::size_t j = 0; j < dim; ++j)
                out[i * dim + j] = static_cast<Scalar>(src[idx[i] * dim + j]);
        }
        return Tensor::from({idx.size(), dim}, std::move(out));
    }
};

struct EmbeddingStore {
    std::size_t dim = 0;
    std::vector<ClipRecord> records;
};

namespace io {

inline void write_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline void write_u64(std::ostream& os, std::uint64_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline void write_u8(std::ostream& os, std::uint8_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline std::uint32_t read_u32(std::istream& is, const char* what) {
    std::uint32_t v;
    if (!is.read(reinterpret_cast<char*>(&v), sizeof v))
        throw FormatError(std::string("truncated file while reading ") + what);
    return v;
}
inline std::uint64_t read_u64(std::istream& is, const char* what) {
    std::uint64_t v;
    if (!is.read(reinterpret_cast<char*>(&v), sizeof v))
        throw FormatError(std::string("truncated file while reading ") + what);
    return v;
}
inline std::uint8_t read_u8(std::istream& is, const char* what) {
    std::uint8_t v;
    if (!is.read(reinterpret_cast<char*>(&v), sizeof v))
        throw FormatError(std::string("truncated file while reading ") + what);
    return v;
}

inline std::string read_bytes(std::istream& is, std::size_t n, const char* what) {
    std::string s(n, '\0');
    if (!is.read(s.data(), static_cast<std::streamsize>(n)))
        throw FormatError(std::string("truncated file while reading ") + what);
    return s;
}

// All outputs go through a temp file + rename so readers never observe a
// partially written file.
template <typename WriteFn>
void atomic_write(const std::string& path, WriteFn&& fn) {
    namespace fs = std::filesystem;
    fs::path target(path);
    if (target.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(target.parent_path(), ec);
    }
    fs::path tmp = target;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("cannot open " + tmp.string() + " for writing");
        fn(os);
        os.flush();
        if (!os) throw IoError("write failed for " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    if (ec) throw IoError("rename " + tmp.string() + " -> " + path + ": " + ec.message());
}

}  // namespace io

inline constexpr char kStoreMagic[4] = {'X', 'M', 'I', 'C'};
inline constexpr std::uint32_t kStoreVersion = 1;

inline void write_store(const EmbeddingStore& store, const std::string& path) {
    std::unordered_set<std::string> ids;
    for (const auto& r : store.records) {
        if (r.full.size() != r.frames * r.dim)
            throw DimMismatchError("clip " + r.id + ": full stream is not F x D");
        if (r.has_hand() && r.hand.size() != r.frames * r.dim)
            throw DimMismatchError("clip " + r.id + ": hand stream is not F x D");
        if (r.dim != store.dim)
            throw DimMismatchError("clip " + r.id + ": dim " + std::to_string(r.dim) +
                                   " vs store dim " + std::to_string(store.dim));
        if (!ids.insert(r.id).second) throw FormatError("duplicate clip id " + r.id);
    }
    io::atomic_write(path, [&](std::ostream& os) {
        os.write(kStoreMagic, 4);
        io::write_u32(os, kStoreVersion);
        io::write_u32(os, static_cast<std::uint32_t>(store.dim));
        io::write_u32(os, static_cast<std::uint32_t>(store.records.size()));
        for (const auto& r : store.records) {
            io::write_u32(os, static_cast<std::uint32_t>(r.id.size()));
            os.write(r.id.data(), static_cast<std::streamsize>(r.id.size()));
            io::write_u32(os, static_cast<std::uint32_t>(r.frames));
            io::write_u8(os, r.has_hand() ? 1 : 0);
            os.write(reinterpret_cast<const char*>(r.full.data()),
                     static_cast<std::streamsize>(r.full.size() * sizeof(float)));
            if (r.has_hand())
                os.write(reinterpret_cast<const char*>(r.hand.data()),
                         static_cast<std::streamsize>(r.hand.size() * sizeof(float)));
        }
    });
}

inline EmbeddingStore read_store(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kStoreMagic, 4) != 0)
        throw FormatError("bad magic bytes in " + path);
    std::uint32_t version = io::read_u32(is, "version");
    if (version != kStoreVersion)
        throw FormatError("unsupported store version " + std::to_string(version));
    EmbeddingStore store;
    store.dim = io::read_u32(is, "dim");
    if (store.dim == 0) throw FormatError("store dim is zero");
    std::uint32_t count = io::read_u32(is, "record count");
    store.records.reserve(count);
    std::unordered_set<std::string> ids;
    for (std::uint32_t k = 0; k < count; ++k) {
        ClipRecord r;
        std::uint32_t id_len = io::read_u32(is, "id length");
        r.id = io::read_bytes(is, id_len, "id");
        if (!ids.insert(r.id).second) throw FormatError("duplicate clip id " + r.id);
        r.frames = io::read_u32(is, "frame count");
        if (r.frames == 0) throw FormatError("clip " + r.id + " has zero frames");
        r.dim = store.dim;
        bool has_hand = io::read_u8(is, "hand flag") != 0;
        r.full.resize(r.frames * store.dim);
        if (!is.read(reinterpret_cast<char*>(r.full.data()),
                     static_cast<std::streamsize>(r.full.size() * sizeof(float))))
            throw FormatError("truncated full embeddings for clip " + r.id);
        if (has_hand) {
            r.hand.resize(r.frames * store.dim);
            if (!is.read(reinterpret_cast<char*>(r.hand.data()),
                         static_cast<std::streamsize>(r.hand.size() * sizeof(float))))
                throw FormatError("truncated hand embeddings for clip " + r.id);
        }
        store.records.push_back(std::move(r));
    }
    return store;
}

// ---------------------------------------------------------------------------
// Labels manifest: one JSON object per line {id, noun, verb, dataset, frames}.

struct ManifestEntry {
    std::string id;
    std::string noun;
    std::string verb;
    std::string dataset;
    std::size_t frames = 0;
};

inline void write_manifest(const std::vector<ManifestEntry>& entries, const std::string& path) {
    io::atomic_write(path, [&](std::ostream& os) {
        for (const auto& e : entries) {
            nlohmann::json j{{"id", e.id},
                             {"noun", e.noun},
                             {"verb", e.verb},
                             {"dataset", e.dataset},
                             {"frames", e.frames}};
            os << j.dump() << "\n";
        }
    });
}

inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path);
    std::vector<ManifestEntry> entries;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
        ManifestEntry e;
        try {
            e.id = j.at("id").get<std::string>();
            e.noun = j.value("noun", "");
            e.verb = j.value("verb", "");
            e.dataset = j.value("dataset", "");
            e.frames = j.value("frames", std::size_t{0});
        } catch (const nlohmann::json::exception& ex) {
            throw FormatError(path + ":" + std::to_string(line_no) + ": " + ex.what());
        }
        entries.push_back(std::move(e));
    }
    return entries;
}

// Joins labels onto store records; a clip without a manifest row keeps empty
// labels and trips MissingLabel only if a task later needs it.
inline void apply_manifest(EmbeddingStore& store, const std::vector<ManifestEntry>& manifest) {
    std::unordered_map<std::string, const ManifestEntry*> by_id;
    for (const auto& e : manifest) by_id[e.id] = &e;
    for (auto& r : store.records) {
        auto it = by_id.find(r.id);
        if (it == by_id.end()) continue;
        const ManifestEntry& e = *it->second;
        if (e.frames != 0 && e.frames != r.frames)
            throw FormatError("clip " + r.id + ": manifest frames " + std::to_string(e.frames) +
                              " vs store frames " + std::to_string(r.frames));
        r.noun_label = e.noun;
        r.verb_label = e.verb;
        r.dataset = e.dataset;
    }
}

// ---------------------------------------------------------------------------
// Class vocabularies and the shared/novel partition.

inline std::string canonicalize_class_name(const std::string& raw) {
    std::string out;
    out.reserve(raw.size());
    bool in_space = false;
    for (char c : raw) {
        unsigned char u = static_cast<unsigned char>(c);
        if (u == ' ' || u == '\t' || u == '\r' || u == '\n' || u == '\f' || u == '\v') {
            in_space = true;
            continue;
        }
        if (in_space && !out.empty()) out.push_back(' ');
        in_space = false;
        out.push_back(static_cast<char>(std::tolower(u)));
    }
    return out;
}

struct ClassVocabulary {
    Task task = Task::Noun;
    std::vector<std::string> names;  // canonical, ordered
    std::unordered_map<std::string, std::size_t> index;

    std::size_t size() const { return names.size(); }

    std::size_t index_of(const std::string& name) const {
        auto it = index.find(canonicalize_class_name(name));
        if (it == index.end())
            throw BadLabelError("class '" + name + "' not in " + task_name(task) + " vocabulary");
        return it->second;
    }

    bool contains(const std::string& name) const {
        return index.count(canonicalize_class_name(name)) != 0;
    }
};

inline ClassVocabulary make_vocabulary(const std::vector<std::string>& raw_names, Task task) {
    ClassVocabulary v;
    v.task = task;
    for (const auto& raw : raw_names) {
        std::string name = canonicalize_class_name(raw);
        if (name.empty()) continue;
        if (!v.index.emplace(name, v.names.size()).second)
            throw FormatError("duplicate class name '" + name + "' after canonicalization");
        v.names.push_back(name);
    }
    if (v.names.empty()) throw FormatError("vocabulary is empty");
    return v;
}

inline ClassVocabulary load_vocabulary(const std::string& path, Task task) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(is, line)) lines.push_back(line);
    try {
        return make_vocabulary(lines, task);
    } catch (const FormatError& e) {
        throw FormatError(path + ": " + e.what());
    }
}

struct Partition {
    std::vector<std::string> shared;
    std::vector<std::string> novel_a;
    std::vector<std::string> novel_b;
};

inline Partition partition_shared_novel(const ClassVocabulary& a, const ClassVocabulary& b) {
    if (a.task != b.task)
        throw TaskMismatchError("cannot partition " + task_name(a.task) + " against " +
                                task_name(b.task));
    Partition p;
    for (const auto& name : a.names)
        (b.index.count(name) ? p.shared : p.novel_a).push_back(name);
    for (const auto& name : b.names)
        if (!a.index.count(name)) p.novel_b.push_back(name);
    return p;
}

// ---------------------------------------------------------------------------
// Frame sampling

enum class SampleMode { Uniform, Random };

inline std::vector<std::size_t> sample_frames(std::size_t total, std::size_t want,
                                              SampleMode mode, Rng* rng = nullptr) {
    if (total == 0) throw EmptySequenceError("sample_frames on clip with zero frames");
    if (want == 0) throw BadSpecError("sample_frames: zero frames requested");
    std::vector<std::size_t> idx(want);
    if (mode == SampleMode::Uniform) {
        for (std::size_t i = 0; i < want; ++i) idx[i] = i * total / want;
        return idx;
    }
    if (!rng) throw BadSpecError("sample_frames: random mode needs an rng");
    if (want <= total) {
        // In-order selection sampling: output is sorted without replacement.
        std::size_t chosen = 0;
        for (std::size_t i = 0; i < total && chosen < want; ++i) {
            std::uniform_int_distribution<std::size_t> dist(0, total - i - 1);
            if (dist(*rng) < want - chosen) idx[chosen++] = i;
        }
        return idx;
    }
    std::uniform_int_distribution<std::size_t> dist(0, total - 1);
    for (auto& v : idx) v = dist(*rng);
    std::sort(idx.begin(), idx.end());
    return idx;
}

// ---------------------------------------------------------------------------
// Pairing of the two encoder streams

// One clip as seen by both encoders. `v` feeds the video embedding, `v2`
// feeds the adapter; with a single store both point to the same record.
struct ClipPair {
    const ClipRecord* v = nullptr;
    const ClipRecord* v2 = nullptr;
};

inline std::vector<ClipPair> pair_streams(const EmbeddingStore& store_v,
                                          const EmbeddingStore& store_v2) {
    if (store_v.dim != store_v2.dim)
        throw DimMismatchError("stream dims differ: " + std::to_string(store_v.dim) + " vs " +
                               std::to_string(store_v2.dim));
    std::unordered_map<std::string, const ClipRecord*> by_id;
    by_id.reserve(store_v2.records.size());
    for (const auto& r : store_v2.records) by_id.emplace(r.id, &r);
    std::vector<ClipPair> pairs;
    pairs.reserve(store_v.records.size());
    for (const auto& r : store_v.records) {
        auto it = by_id.find(r.id);
        if (it == by_id.end())
            throw FormatError("clip '" + r.id + "' missing from the second stream");
        pairs.push_back({&r, it->second});
    }
    return pairs;
}

inline std::vector<ClipPair> pair_streams(const EmbeddingStore& store) {
    std::vector<ClipPair> pairs;
    pairs.reserve(store.records.size());
    for (const auto& r : store.records) pairs.push_back({&r, &r});
    return pairs;
}

}  // namespace xmic
