// Versioned binary container shared by model checkpoints and feature caches:
// a JSON metadata blob plus a flat list of named tensors (raw little-endian
// payloads) guarded by a CRC32 trailer. Round-trips are bit-exact.
//
// layout:
//   magic   "SELDARC1"                        8 bytes
//   u32     format version (currently 1)
//   u32     meta length, followed by UTF-8 JSON
//   u32     entry count
//   entry*  u16 name length, name bytes,
//           u8 dtype (0 = f32, 1 = f64), u8 flags (bit0: trainable),
//           u32 ndim, u64 extents[ndim],
//           u64 payload bytes, payload
//   u32     CRC32 of everything after the magic
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "seld/tensor.hpp"

namespace seld {

enum class ArchiveDType : std::uint8_t { F32 = 0, F64 = 1 };

struct ArchiveEntry {
    std::string name;
    ArchiveDType dtype = ArchiveDType::F32;
    bool trainable = true;
    Shape shape;
    std::vector<char> payload;

    template <typename T>
    static ArchiveEntry from_tensor(const std::string& name, const TensorT<T>& t, bool trainable);

    template <typename T>
    TensorT<T> to_tensor() const;
};

struct Archive {
    std::string meta_json;
    std::vector<ArchiveEntry> entries;

    const ArchiveEntry* find(const std::string& name) const {
        for (const auto& e : entries)
            if (e.name == name) return &e;
        return nullptr;
    }
};

struct ArchiveError : std::runtime_error {
    explicit ArchiveError(const std::string& msg) : std::runtime_error(msg) {}
};

void write_archive(const std::string& path, const Archive& archive);
Archive read_archive(const std::string& path);

std::uint32_t crc32(const void* data, std::size_t len, std::uint32_t seed = 0);

// ---------------------------------------------------------------------------

template <typename T>
ArchiveEntry ArchiveEntry::from_tensor(const std::string& name, const TensorT<T>& t,
                                       bool trainable) {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    ArchiveEntry e;
    e.name = name;
    e.dtype = std::is_same_v<T, float> ? ArchiveDType::F32 : ArchiveDType::F64;
    e.trainable = trainable;
    e.shape = t.shape();
    e.payload.resize(static_cast<std::size_t>(t.numel()) * sizeof(T));
    std::memcpy(e.payload.data(), t.data(), e.payload.size());
    return e;
}

template <typename T>
TensorT<T> ArchiveEntry::to_tensor() const {
    const std::int64_t n = shape_numel(shape);
    std::vector<T> data(static_cast<std::size_t>(n));
    if (dtype == ArchiveDType::F32) {
        if (payload.size() != static_cast<std::size_t>(n) * 4)
            throw ArchiveError("archive entry '" + name + "': payload size mismatch");
        if constexpr (std::is_same_v<T, float>) {
            std::memcpy(data.data(), payload.data(), payload.size());
        } else {
            const float* src = reinterpret_cast<const float*>(payload.data());
            for (std::int64_t i = 0; i < n; ++i) data[static_cast<std::size_t>(i)] = src[i];
        }
    } else {
        if (payload.size() != static_cast<std::size_t>(n) * 8)
            throw ArchiveError("archive entry '" + name + "': payload size mismatch");
        if constexpr (std::is_same_v<T, double>) {
            std::memcpy(data.data(), payload.data(), payload.size());
        } else {
            const double* src = reinterpret_cast<const double*>(payload.data());
            for (std::int64_t i = 0; i < n; ++i)
                data[static_cast<std::size_t>(i)] = static_cast<float>(src[i]);
        }
    }
    return TensorT<T>::from(shape, std::move(data));
}

}  // namespace seld
