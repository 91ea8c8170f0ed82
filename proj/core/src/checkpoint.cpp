#include "cart/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "cart/errors.hpp"

namespace cart::ad {

namespace {

constexpr char kMagic[8] = {'C', 'A', 'R', 'T', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }

std::uint32_t read_u32(std::istream& in) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 4);
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParamStore& params, const std::string& config) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FileNotFoundError("cannot write checkpoint: " + path.string());
  out.write(kMagic, 8);
  write_u32(out, kVersion);
  write_u32(out, static_cast<std::uint32_t>(config.size()));
  out.write(config.data(), static_cast<std::streamsize>(config.size()));
  write_u32(out, static_cast<std::uint32_t>(params.entries().size()));
  for (const auto& [name, t] : params.entries()) {  // std::map iterates sorted by name
    write_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    const auto& shape = t.shape();
    write_u32(out, static_cast<std::uint32_t>(shape.size()));
    for (int d : shape) write_u32(out, static_cast<std::uint32_t>(d));
    out.write(reinterpret_cast<const char*>(t.value().data()),
              static_cast<std::streamsize>(t.value().size() * sizeof(float)));
  }
  if (!out) throw Error("checkpoint write failed: " + path.string());
}

std::string load_checkpoint(const std::filesystem::path& path, ParamStore& params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileNotFoundError("cannot open checkpoint: " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) throw MalformedInputError("not a checkpoint file: " + path.string());
  const std::uint32_t version = read_u32(in);
  if (version != kVersion) throw UnsupportedFormatError("unsupported checkpoint version " + std::to_string(version));
  std::string config(read_u32(in), '\0');
  in.read(config.data(), static_cast<std::streamsize>(config.size()));
  const std::uint32_t count = read_u32(in);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(read_u32(in), '\0');
    in.read(name.data(), static_cast<std::streamsize>(name.size()));
    const std::uint32_t ndim = read_u32(in);
    Shape shape(ndim);
    for (auto& d : shape) d = static_cast<int>(read_u32(in));
    std::vector<float> data(static_cast<size_t>(shape_numel(shape)));
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
    if (!in) throw MalformedInputError("truncated checkpoint: " + path.string());
    if (params.contains(name)) {
      Tensor t = params.get(name);
      if (t.shape() != shape) {
        throw ShapeError("checkpoint record " + name + " has shape " + shape_str(shape) + ", model expects " + shape_str(t.shape()));
      }
      t.value() = std::move(data);
    } else {
      params.create(name, Tensor::from_vector(shape, std::move(data)));
    }
  }
  return config;
}

std::string read_checkpoint_config(const std::filesystem::path& path) {
  ParamStore scratch;
  return load_checkpoint(path, scratch);
}

}  // namespace cart::ad
