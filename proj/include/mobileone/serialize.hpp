#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "mobileone/model.hpp"

// Weight container, little-endian throughout:
//
//   "MOB1"            4-byte magic
//   u32               format version (1)
//   u32               tensor count
//   per tensor:       u32 name length, UTF-8 name, u8 dtype tag (0 f32, 1 f64, 2 u8),
//                     u32 rank, u64 dims[rank], u64 byte offset into the data section
//   data section      raw tensor bytes, starting right after the last record
//
// The first tensor, "__meta__", is a u8 blob holding the JSON layer description
// needed to rebuild the model skeleton. save_model also writes a "<path>.json"
// sidecar with the same description plus the tensor table, for inspection only.

namespace mobileone {

inline constexpr char kContainerMagic[4] = {'M', 'O', 'B', '1'};
inline constexpr std::uint32_t kContainerVersion = 1;

enum class DType : std::uint8_t { f32 = 0, f64 = 1, u8 = 2 };

template <typename T>
void save_model(const Model<T>& model, const std::filesystem::path& path);

/// Loads a container written with either precision, converting to T. Throws
/// FormatError on bad magic, unknown version, truncation or missing tensors;
/// nothing is returned unless the whole model was read and validated.
template <typename T>
Model<T> load_model(const std::filesystem::path& path);

/// Precision the container was written with.
DType stored_dtype(const std::filesystem::path& path);

/// JSON layer description (the "__meta__" payload) of a model.
template <typename T>
std::string describe_model(const Model<T>& model);

}  // namespace mobileone
