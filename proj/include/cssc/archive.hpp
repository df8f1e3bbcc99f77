#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "cssc/layers.hpp"
#include "cssc/tensor.hpp"

namespace cssc {

// Version-tagged name -> tensor container used for weight files and
// checkpoints. Binary layout (little-endian):
//
//   8 bytes  magic "CSSCARCH"
//   u32      format version (kArchiveVersion)
//   u32      metadata length, then that many bytes of UTF-8 JSON
//   u64      tensor count
//   per tensor, in name order:
//     u32 name length, name bytes (dotted module path)
//     u32 rank, rank x u64 dims
//     f64 values, row-major
//
// Convolution weights are stored (kh, kw, in, out); linear weights (out, in).
inline constexpr std::uint32_t kArchiveVersion = 1;

struct Archive {
  std::string metadata = "{}";
  std::map<std::string, Tensor> tensors;
};

void write_archive(const std::filesystem::path& path, const Archive& archive);
Archive read_archive(const std::filesystem::path& path);

// Adds every parameter and buffer of `m` under `prefix`.
void store_module(Module& m, const std::string& prefix, Archive& archive);

// Copies archive tensors whose names match parameters/buffers of `m` (looked
// up as `source_prefix.suffix` for each module name `prefix.suffix`).
// Shape mismatches throw. Returns the number of tensors copied.
std::size_t load_module(Module& m, const std::string& prefix, const Archive& archive,
                        const std::string& source_prefix);

}  // namespace cssc
