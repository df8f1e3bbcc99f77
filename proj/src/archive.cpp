#include "cssc/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "cssc/error.hpp"

namespace cssc {

namespace {

constexpr char kMagic[8] = {'C', 'S', 'S', 'C', 'A', 'R', 'C', 'H'};

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& is, const std::filesystem::path& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw Error("archive: truncated file " + path.string());
  return v;
}

std::string get_string(std::istream& is, std::size_t n, const std::filesystem::path& path) {
  std::string s(n, '\0');
  if (n && !is.read(s.data(), static_cast<std::streamsize>(n))) throw Error("archive: truncated file " + path.string());
  return s;
}

}  // namespace

void write_archive(const std::filesystem::path& path, const Archive& archive) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("archive: cannot open " + tmp.string() + " for writing");
    os.write(kMagic, sizeof kMagic);
    put<std::uint32_t>(os, kArchiveVersion);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(archive.metadata.size()));
    os.write(archive.metadata.data(), static_cast<std::streamsize>(archive.metadata.size()));
    put<std::uint64_t>(os, archive.tensors.size());
    for (const auto& [name, t] : archive.tensors) {
      put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
      for (auto d : t.shape()) put<std::uint64_t>(os, d);
      os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
    os.flush();
    if (!os) throw Error("archive: write failed for " + tmp.string() + " (disk full?)");
  }
  std::filesystem::rename(tmp, path);
}

Archive read_archive(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("archive: cannot open " + path.string());
  char magic[8];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0)
    throw Error("archive: " + path.string() + " is not a weight archive");
  const auto version = get<std::uint32_t>(is, path);
  if (version != kArchiveVersion)
    throw Error("archive: unsupported version " + std::to_string(version) + " in " + path.string());
  Archive a;
  a.metadata = get_string(is, get<std::uint32_t>(is, path), path);
  const auto count = get<std::uint64_t>(is, path);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = get_string(is, get<std::uint32_t>(is, path), path);
    const auto rank = get<std::uint32_t>(is, path);
    Shape shape(rank);
    for (auto& d : shape) d = get<std::uint64_t>(is, path);
    Tensor t(shape);
    if (!is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double))))
      throw Error("archive: truncated tensor '" + name + "' in " + path.string());
    a.tensors.emplace(std::move(name), std::move(t));
  }
  return a;
}

void store_module(Module& m, const std::string& prefix, Archive& archive) {
  for (const auto& p : named_parameters(m, prefix)) archive.tensors[p.name] = p.param->value;
  for (const auto& b : named_buffers(m, prefix)) archive.tensors[b.name] = *b.tensor;
}

std::size_t load_module(Module& m, const std::string& prefix, const Archive& archive,
                        const std::string& source_prefix) {
  std::size_t loaded = 0;
  auto copy = [&](const std::string& name, Tensor& dst) {
    const std::string suffix = prefix.empty() ? name : name.substr(prefix.size() + 1);
    const auto it = archive.tensors.find(join_path(source_prefix, suffix));
    if (it == archive.tensors.end()) return;
    if (it->second.shape() != dst.shape())
      throw Error("archive: tensor '" + it->first + "' has shape " + shape_string(it->second.shape()) +
                  " but '" + name + "' expects " + shape_string(dst.shape()));
    dst = it->second;
    ++loaded;
  };
  for (const auto& p : named_parameters(m, prefix)) copy(p.name, p.param->value);
  for (const auto& b : named_buffers(m, prefix)) copy(b.name, *b.tensor);
  return loaded;
}

}  // namespace cssc
