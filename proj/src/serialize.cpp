#include <bit>
#include <cstdint>
#include <fstream>

#include "tnkit/error.hpp"
#include "tnkit/network.hpp"

namespace tnkit::graph {

namespace {

constexpr char kMagic[5] = {'T', 'K', 'R', 'O', '1'};

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xFF),
                        static_cast<unsigned char>((v >> 8) & 0xFF),
                        static_cast<unsigned char>((v >> 16) & 0xFF),
                        static_cast<unsigned char>((v >> 24) & 0xFF)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_f64(std::ostream& os, double d) {
  std::uint64_t v = std::bit_cast<std::uint64_t>(d);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(b), 8);
}

bool get_u32(std::istream& is, std::uint32_t& out) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
  out = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
        (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  return true;
}

double get_f64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) {
    detail::fail_state("tensor file: truncated payload");
  }
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(v);
}

}  // namespace

void write_tensor_map(const std::string& path, const std::map<std::string, Tensor>& entries) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) detail::fail_state("cannot open '", path, "' for writing");
  os.write(kMagic, sizeof(kMagic));
  for (const auto& [name, tensor] : entries) {
    put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(os, static_cast<std::uint32_t>(tensor.rank()));
    for (std::size_t i = 0; i < tensor.rank(); ++i) {
      put_u32(os, static_cast<std::uint32_t>(tensor.dim(i)));
    }
    for (std::size_t i = 0; i < tensor.size(); ++i) put_f64(os, tensor[i]);
  }
  if (!os) detail::fail_state("write to '", path, "' failed");
}

std::map<std::string, Tensor> read_tensor_map(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) detail::fail_state("cannot open '", path, "' for reading");
  char magic[5];
  if (!is.read(magic, sizeof(magic)) || !std::equal(magic, magic + 5, kMagic)) {
    detail::fail_state("'", path, "' is not a tensor file (bad magic)");
  }
  std::map<std::string, Tensor> out;
  std::uint32_t name_len = 0;
  while (get_u32(is, name_len)) {
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) detail::fail_state("tensor file: truncated name");
    std::uint32_t rank = 0;
    if (!get_u32(is, rank)) detail::fail_state("tensor file: truncated rank");
    Shape shape(rank);
    std::size_t numel = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      std::uint32_t d = 0;
      if (!get_u32(is, d)) detail::fail_state("tensor file: truncated dims");
      shape[i] = d;
      numel *= d;
    }
    std::vector<double> data(numel);
    for (std::size_t i = 0; i < numel; ++i) data[i] = get_f64(is);
    if (!out.emplace(std::move(name), Tensor::from_data(std::move(shape), std::move(data))).second) {
      detail::fail_state("tensor file: duplicate entry name");
    }
  }
  return out;
}

void save_state_dict(const TensorNetwork& net, const std::string& path) {
  write_tensor_map(path, net.state_dict());
}

void load_state_dict(TensorNetwork& net, const std::string& path) {
  net.load_state_dict(read_tensor_map(path));
}

}  // namespace tnkit::graph
