#include "capsworld/dataset.hpp"

#include <fstream>
#include <iterator>

#include "capsworld/binio.hpp"

namespace capsworld {

namespace io {

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, std::span<const unsigned char> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write to '" + path + "' failed");
}

}  // namespace io

namespace sim {

std::vector<unsigned char> encode_dataset(const std::vector<Trajectory>& episodes) {
  io::ByteWriter w;
  w.put_bytes("CTRJ");
  w.put<std::uint32_t>(kDatasetVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(episodes.size()));
  const std::size_t T = episodes.empty() ? 0 : episodes.front().length;
  const std::size_t W = episodes.empty() ? 0 : episodes.front().width;
  const std::size_t n = episodes.empty() ? 0 : episodes.front().n_objects;
  w.put<std::uint32_t>(static_cast<std::uint32_t>(T));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(W));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(n));
  for (const auto& e : episodes) {
    if (e.length != T || e.width != W || e.n_objects != n) {
      throw DimensionError("dataset episodes must share length, width and object count");
    }
    if (e.objects.size() != n * 6 || e.observations.size() != T * W * 3 || e.commands.size() != T * 3 ||
        e.poses.size() != T * 3 || e.relative.size() != T * n * 2) {
      throw DimensionError("trajectory arrays inconsistent with its declared sizes");
    }
    w.put_f32s(e.objects);
    w.put_f32s(e.observations);
    w.put_f32s(e.commands);
    w.put_f32s(e.poses);
    w.put_f32s(e.relative);
  }
  return w.bytes();
}

std::vector<Trajectory> decode_dataset(std::span<const unsigned char> bytes) {
  io::ByteReader r(bytes);
  if (r.get_bytes(4, "magic") != "CTRJ") throw FormatError("bad dataset magic", 0);
  const auto version = r.get<std::uint32_t>("version");
  if (version != kDatasetVersion) {
    throw FormatError("unsupported dataset version " + std::to_string(version), r.offset() - 4);
  }
  const auto count = r.get<std::uint32_t>("episode count");
  const auto T = r.get<std::uint32_t>("trajectory length");
  const auto W = r.get<std::uint32_t>("width");
  const auto n = r.get<std::uint32_t>("object count");
  const std::uint64_t per_episode =
      4ull * (std::uint64_t{n} * 6 + std::uint64_t{T} * W * 3 + std::uint64_t{T} * 3 * 2 + std::uint64_t{T} * n * 2);
  if (count > 0 && per_episode * count > r.remaining()) {
    throw FormatError("dataset truncated: header declares " + std::to_string(count) + " episodes", r.offset());
  }
  std::vector<Trajectory> out(count);
  for (auto& e : out) {
    e.length = T;
    e.width = W;
    e.n_objects = n;
    r.get_f32s(e.objects, std::uint64_t{n} * 6, "objects");
    r.get_f32s(e.observations, std::uint64_t{T} * W * 3, "observations");
    r.get_f32s(e.commands, std::uint64_t{T} * 3, "commands");
    r.get_f32s(e.poses, std::uint64_t{T} * 3, "poses");
    r.get_f32s(e.relative, std::uint64_t{T} * n * 2, "relative coordinates");
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after last episode", r.offset());
  return out;
}

void dataset_write(const std::vector<Trajectory>& episodes, const std::string& path) {
  io::write_file(path, encode_dataset(episodes));
}

std::vector<Trajectory> dataset_read(const std::string& path) { return decode_dataset(io::read_file(path)); }

}  // namespace sim
}  // namespace capsworld
