#include "hbfp/checkpoint.hpp"

#include <fstream>

#include "hbfp/serialize.hpp"

namespace hbfp {

namespace {

constexpr const char* kCheckpointMagic = "HBFPCK1";
constexpr std::uint32_t kCheckpointVersion = 1;

void write_tensor(std::ostream& os, const std::string& name, const Tensor& t) {
  io::write_u32(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  io::write_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t i = 0; i < t.rank(); ++i) io::write_u64(os, t.dim(i));
  for (double v : t.values()) io::write_f64(os, v);
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamRegistry& registry,
                     const RunConfig& cfg) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("save_checkpoint: cannot open '" + path + "'");
  io::write_magic(os, kCheckpointMagic);
  io::write_u32(os, kCheckpointVersion);
  const std::string config_text = config_to_text(cfg);
  io::write_u64(os, config_text.size());
  os.write(config_text.data(), static_cast<std::streamsize>(config_text.size()));
  const auto entries = registry.all();
  io::write_u64(os, entries.size());
  for (const auto& [name, tensor] : entries) write_tensor(os, name, tensor);
  if (!os) throw IoError("save_checkpoint: write failed for '" + path + "'");
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("load_checkpoint: cannot open '" + path + "'");
  io::expect_magic(is, kCheckpointMagic, "load_checkpoint");
  const std::uint32_t version = io::read_u32(is);
  if (version != kCheckpointVersion)
    throw IoError("load_checkpoint: version " + std::to_string(version) + " unsupported (want " +
                  std::to_string(kCheckpointVersion) + ")");
  const std::uint64_t config_len = io::read_u64(is);
  std::string config_text(config_len, '\0');
  if (!is.read(config_text.data(), static_cast<std::streamsize>(config_len)))
    throw IoError("load_checkpoint: truncated config block");
  LoadedCheckpoint ck;
  ck.config = parse_config_text(config_text);
  const std::uint64_t count = io::read_u64(is);
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = io::read_u32(is);
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) throw IoError("load_checkpoint: truncated tensor name");
    const std::uint32_t rank = io::read_u32(is);
    Shape dims(rank);
    std::size_t numel = 1;
    for (auto& d : dims) {
      d = io::read_u64(is);
      numel *= d;
    }
    std::vector<double> values(numel);
    for (double& v : values) v = io::read_f64(is);
    ck.tensors.emplace(std::move(name), Tensor::from_data(std::move(dims), std::move(values)));
  }
  return ck;
}

void restore_registry(const LoadedCheckpoint& ck, ParamRegistry& registry) {
  for (auto& [name, tensor] : registry.all()) {
    const auto it = ck.tensors.find(name);
    if (it == ck.tensors.end())
      throw ContractError("restore: checkpoint is missing tensor '" + name + "'");
    if (it->second.shape() != tensor.shape())
      throw ContractError("restore: '" + name + "' is " + shape_str(it->second.shape()) +
                          " in the checkpoint but " + shape_str(tensor.shape()) +
                          " in the model");
    Tensor dst = tensor;  // shared storage with the registry entry
    dst.values() = it->second.values();
  }
}

}  // namespace hbfp
