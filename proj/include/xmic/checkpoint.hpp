#pragma once

#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xmic/adapters.hpp"
#include "xmic/datastore.hpp"

namespace xmic {

inline constexpr char kCheckpointMagic[8] = {'X', 'M', 'I', 'C', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline nlohmann::json model_metadata(const Model& m, Task task, Scalar temperature,
                                     std::size_t frames) {
    const ModelConfig& c = m.config;
    nlohmann::json meta;
    meta["dim"] = c.dim;
    meta["strategy"] = c.strategy.to_string();
    meta["alpha"] = c.alpha;
    meta["norm"] = c.norms.to_string();
    meta["zero_init"] = c.zero_init;
    meta["temporal"] = c.temporal_enabled;
    meta["spatial"] = spatial_mode_name(c.spatial);
    meta["prompt_count"] = c.prompt_count;
    meta["bottleneck_blend"] = c.bottleneck_blend;
    meta["seed"] = c.seed;
    meta["encoder_seed"] = c.encoder_seed;
    meta["has_encoder"] = m.encoder != nullptr;
    meta["task"] = task_name(task);
    meta["temperature"] = temperature;
    meta["frames"] = frames;
    return meta;
}

inline void save_checkpoint(const std::string& path, const Model& model, Task task,
                            Scalar temperature, std::size_t frames) {
    nlohmann::json meta = model_metadata(model, task, temperature, frames);
    std::string meta_text = meta.dump();
    NamedParams params = model.trainable();
    io::atomic_write(path, [&](std::ostream& out) {
        out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
        io::write_u32(out, kCheckpointVersion);
        io::write_u32(out, static_cast<std::uint32_t>(meta_text.size()));
        out.write(meta_text.data(), static_cast<std::streamsize>(meta_text.size()));
        for (const auto& [name, tensor] : params) {
            io::write_u32(out, static_cast<std::uint32_t>(name.size()));
            out.write(name.data(), static_cast<std::streamsize>(name.size()));
            std::vector<float> blob(tensor.numel());
            const auto& data = tensor.data();
            for (std::size_t i = 0; i < blob.size(); ++i) blob[i] = static_cast<float>(data[i]);
            io::write_u64(out, static_cast<std::uint64_t>(blob.size() * sizeof(float)));
            out.write(reinterpret_cast<const char*>(blob.data()),
                      static_cast<std::streamsize>(blob.size() * sizeof(float)));
        }
    });
}

struct Checkpoint {
    nlohmann::json metadata;
    std::vector<std::pair<std::string, std::vector<float>>> blobs;

    const std::vector<float>* find(const std::string& name) const {
        for (const auto& [n, b] : blobs)
            if (n == name) return &b;
        return nullptr;
    }
};

inline Checkpoint read_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint '" + path + "'");
    char magic[sizeof(kCheckpointMagic)];
    in.read(magic, sizeof(magic));
    if (in.gcount() != sizeof(magic) ||
        std::string(magic, sizeof(magic)) != std::string(kCheckpointMagic, sizeof(kCheckpointMagic)))
        throw FormatError("bad checkpoint magic in '" + path + "'");
    std::uint32_t version = io::read_u32(in, "checkpoint version");
    if (version != kCheckpointVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    std::uint32_t meta_len = io::read_u32(in, "metadata length");
    std::string meta_text = io::read_bytes(in, meta_len, "checkpoint metadata");
    Checkpoint ckpt;
    try {
        ckpt.metadata = nlohmann::json::parse(meta_text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint metadata is not valid JSON: ") + e.what());
    }
    while (true) {
        in.peek();
        if (in.eof()) break;
        std::uint32_t name_len = io::read_u32(in, "parameter name length");
        std::string name = io::read_bytes(in, name_len, "parameter name");
        std::uint64_t byte_len = io::read_u64(in, "parameter byte length");
        if (byte_len % sizeof(float) != 0)
            throw FormatError("parameter blob '" + name + "' has odd byte length");
        std::string raw = io::read_bytes(in, byte_len, "parameter blob");
        std::vector<float> blob(byte_len / sizeof(float));
        std::memcpy(blob.data(), raw.data(), byte_len);
        ckpt.blobs.emplace_back(std::move(name), std::move(blob));
    }
    return ckpt;
}

inline ModelConfig model_config_from_metadata(const nlohmann::json& meta) {
    ModelConfig c;
    try {
        c.dim = meta.at("dim").get<std::size_t>();
        c.strategy = parse_strategy(meta.at("strategy").get<std::string>());
        c.alpha = meta.at("alpha").get<Scalar>();
        c.norms = parse_norm_flags(meta.at("norm").get<std::string>());
        c.zero_init = meta.at("zero_init").get<bool>();
        c.temporal_enabled = meta.at("temporal").get<bool>();
        c.spatial = parse_spatial_mode(meta.at("spatial").get<std::string>());
        c.prompt_count = meta.at("prompt_count").get<std::size_t>();
        c.bottleneck_blend = meta.at("bottleneck_blend").get<Scalar>();
        c.seed = meta.at("seed").get<std::uint64_t>();
        c.encoder_seed = meta.at("encoder_seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint metadata is missing fields: ") + e.what());
    }
    return c;
}

// Rebuild the model from checkpoint metadata (frozen parts come from the
// recorded seeds) and overwrite every trainable parameter from its blob.
inline Model load_model(const Checkpoint& ckpt) {
    ModelConfig config = model_config_from_metadata(ckpt.metadata);
    bool has_encoder = ckpt.metadata.value("has_encoder", false);
    Model model = make_model(config, has_encoder);
    for (auto& [name, tensor] : model.trainable()) {
        const std::vector<float>* blob = ckpt.find(name);
        if (!blob) throw FormatError("checkpoint is missing parameter '" + name + "'");
        if (blob->size() != tensor.numel())
            throw FormatError("checkpoint parameter '" + name + "' has " +
                              std::to_string(blob->size()) + " values, expected " +
                              std::to_string(tensor.numel()));
        auto& data = tensor.mutable_data();
        for (std::size_t i = 0; i < blob->size(); ++i) data[i] = static_cast<Scalar>((*blob)[i]);
    }
    return model;
}

inline Model load_model(const std::string& path) { return load_model(read_checkpoint(path)); }

}  // namespace xmic
