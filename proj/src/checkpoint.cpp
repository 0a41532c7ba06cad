#include "dw0/checkpoint.hpp"

#include "dw0/binary_io.hpp"

#include <fstream>
#include <limits>

namespace dw0 {

void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write checkpoint " + path.string());
  io::put_magic(os, "DW0C");
  io::put<std::uint32_t>(os, kCheckpointVersion);
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (t.name.size() > std::numeric_limits<std::uint16_t>::max()) throw DataError("tensor name too long");
    if (t.shape.size() > 255) throw DataError("tensor rank too large");
    if (shape_numel(t.shape) != static_cast<std::int64_t>(t.values.size()))
      throw DataError("tensor " + t.name + ": shape/value count mismatch");
    io::put<std::uint16_t>(os, static_cast<std::uint16_t>(t.name.size()));
    os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    io::put<std::uint8_t>(os, 0);
    io::put<std::uint8_t>(os, static_cast<std::uint8_t>(t.shape.size()));
    for (int d : t.shape) io::put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    for (float v : t.values) io::put<float>(os, v);
  }
  if (!os) throw DataError("failed writing checkpoint " + path.string());
}

std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path.string());
  io::expect_magic(is, "DW0C", "checkpoint");
  const auto version = io::get<std::uint32_t>(is);
  if (version != kCheckpointVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
  const auto count = io::get<std::uint32_t>(is);
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name.resize(io::get<std::uint16_t>(is));
    if (!is.read(t.name.data(), static_cast<std::streamsize>(t.name.size()))) throw DataError("truncated name");
    const auto dtype = io::get<std::uint8_t>(is);
    if (dtype != 0) throw DataError("unsupported dtype code " + std::to_string(dtype) + " for " + t.name);
    const auto rank = io::get<std::uint8_t>(is);
    for (int r = 0; r < rank; ++r) t.shape.push_back(static_cast<int>(io::get<std::uint32_t>(is)));
    t.values.resize(static_cast<std::size_t>(shape_numel(t.shape)));
    for (auto& v : t.values) v = io::get<float>(is);
    out.push_back(std::move(t));
  }
  return out;
}

template <typename Scalar>
std::vector<NamedTensor> export_params(const ParamSet<Scalar>& params, const std::string& prefix) {
  std::vector<NamedTensor> out;
  for (const auto& [name, p] : params) {
    NamedTensor t;
    t.name = prefix + name;
    t.shape = p.shape;
    t.values.resize(static_cast<std::size_t>(p.value.size()));
    for (Eigen::Index i = 0; i < p.value.size(); ++i) t.values[i] = static_cast<float>(p.value.data()[i]);
    out.push_back(std::move(t));
  }
  return out;
}

template <typename Scalar>
std::size_t import_params(ParamSet<Scalar>& params, const std::vector<NamedTensor>& tensors,
                          const std::string& prefix) {
  std::size_t loaded = 0;
  for (const auto& t : tensors) {
    if (t.name.rfind(prefix, 0) != 0) continue;
    const std::string name = t.name.substr(prefix.size());
    if (!params.contains(name)) continue;
    auto& p = params.at(name);
    if (p.shape != t.shape)
      throw DataError("checkpoint tensor " + t.name + " has shape " + shape_str(t.shape) + ", expected " +
                      shape_str(p.shape));
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = static_cast<Scalar>(t.values[i]);
    ++loaded;
  }
  return loaded;
}

const NamedTensor* find_tensor(const std::vector<NamedTensor>& tensors, const std::string& name) {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

template std::vector<NamedTensor> export_params(const ParamSet<float>&, const std::string&);
template std::vector<NamedTensor> export_params(const ParamSet<double>&, const std::string&);
template std::size_t import_params(ParamSet<float>&, const std::vector<NamedTensor>&, const std::string&);
template std::size_t import_params(ParamSet<double>&, const std::vector<NamedTensor>&, const std::string&);

}  // namespace dw0
