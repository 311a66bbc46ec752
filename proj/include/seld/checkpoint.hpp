// Model checkpoints on top of the archive container. A checkpoint is
// self-describing: model config, epoch, seed, and metric history travel in
// the metadata JSON next to every named parameter and buffer.
#pragma once

#include <string>

#include "json.hpp"
#include "seld/archive.hpp"
#include "seld/model.hpp"

namespace seld {

struct CheckpointInfo {
    ModelConfig config;
    std::int64_t epoch = 0;
    std::uint64_t seed = 0;
    nlohmann::json meta;
};

template <typename T>
void save_checkpoint(const std::string& path, CstFormer<T>& model, std::int64_t epoch,
                     const nlohmann::json& history = nlohmann::json::array()) {
    Archive a;
    nlohmann::json meta{{"kind", "checkpoint"},
                        {"model_config", model.cfg.to_json()},
                        {"epoch", epoch},
                        {"seed", model.seed},
                        {"scalar", std::is_same_v<T, float> ? "f32" : "f64"},
                        {"history", history}};
    a.meta_json = meta.dump();
    for (const auto& nt : model.named_tensors())
        a.entries.push_back(ArchiveEntry::from_tensor(nt.name, nt.tensor, nt.trainable));
    write_archive(path, a);
}

inline CheckpointInfo read_checkpoint_info(const std::string& path) {
    Archive a = read_archive(path);
    const nlohmann::json meta = nlohmann::json::parse(a.meta_json);
    if (meta.value("kind", "") != "checkpoint")
        throw ArchiveError(path + ": not a checkpoint archive");
    CheckpointInfo info;
    info.config = ModelConfig::from_json(meta.at("model_config"));
    info.epoch = meta.value("epoch", std::int64_t{0});
    info.seed = meta.value("seed", std::uint64_t{0});
    info.meta = meta;
    return info;
}

template <typename T>
void load_checkpoint_weights(const Archive& a, CstFormer<T>& model) {
    auto tensors = model.named_tensors();
    for (auto& nt : tensors) {
        const ArchiveEntry* e = a.find(nt.name);
        if (!e) throw ArchiveError("checkpoint is missing tensor '" + nt.name + "'");
        if (e->shape != nt.tensor.shape())
            throw ArchiveError("checkpoint tensor '" + nt.name + "' has shape " +
                               shape_str(e->shape) + ", model expects " +
                               shape_str(nt.tensor.shape()));
        TensorT<T> loaded = e->template to_tensor<T>();
        std::copy(loaded.vec().begin(), loaded.vec().end(), nt.tensor.vec().begin());
    }
}

template <typename T>
CstFormer<T> load_checkpoint(const std::string& path, CheckpointInfo* info_out = nullptr) {
    Archive a = read_archive(path);
    const nlohmann::json meta = nlohmann::json::parse(a.meta_json);
    if (meta.value("kind", "") != "checkpoint")
        throw ArchiveError(path + ": not a checkpoint archive");
    CheckpointInfo info;
    info.config = ModelConfig::from_json(meta.at("model_config"));
    info.epoch = meta.value("epoch", std::int64_t{0});
    info.seed = meta.value("seed", std::uint64_t{0});
    info.meta = meta;
    CstFormer<T> model(info.config, info.seed == 0 ? 1 : info.seed);
    load_checkpoint_weights(a, model);
    if (info_out) *info_out = info;
    return model;
}

}  // namespace seld
