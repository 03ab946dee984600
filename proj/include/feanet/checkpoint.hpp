#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "feanet/tensor.hpp"

namespace feanet {

/// Flat binary tensor container:
///   "FEAN1"
///   repeated until EOF:
///     u32 name_length, name bytes,
///     u32 n, u32 c, u32 h, u32 w,
///     n*c*h*w little-endian IEEE-754 doubles.
/// All integers are little-endian.
struct NamedTensor {
  std::string name;
  Tensor tensor;
};

inline constexpr char kCheckpointMagic[] = "FEAN1";

void write_tensors(std::ostream& out, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_tensors(std::istream& in);

void save_tensors(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_tensors(const std::filesystem::path& path);

}  // namespace feanet
