#pragma once

#include "dw0/tensor.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace dw0 {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// One named f32 tensor as stored in a checkpoint.
struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

/// Layout: "DW0C", u32 version, u32 count, then per tensor u16 name length,
/// UTF-8 name, u8 dtype (0 = f32), u8 rank, u32 dims, raw LE values.
void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path);

template <typename Scalar>
std::vector<NamedTensor> export_params(const ParamSet<Scalar>& params, const std::string& prefix = "");

/// Copies every checkpoint tensor whose name starts with prefix into the
/// matching parameter (prefix stripped). Shapes must agree. Returns the
/// number of tensors loaded.
template <typename Scalar>
std::size_t import_params(ParamSet<Scalar>& params, const std::vector<NamedTensor>& tensors,
                          const std::string& prefix = "");

const NamedTensor* find_tensor(const std::vector<NamedTensor>& tensors, const std::string& name);

}  // namespace dw0
