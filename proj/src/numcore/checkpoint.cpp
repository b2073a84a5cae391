#include "loraloop/numcore/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "loraloop/numcore/rng.hpp"

namespace loraloop::num {

namespace {

template <class T>
void put_le(std::ostream& out, T value) {
  std::array<unsigned char, sizeof(T)> bytes{};
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    bytes[i] = static_cast<unsigned char>((value >> (8 * i)) & 0xFF);
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), bytes.size());
}

template <class T>
T get_le(std::istream& in, const char* what) {
  std::array<unsigned char, sizeof(T)> bytes{};
  in.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  if (!in) throw std::runtime_error(std::string("checkpoint truncated while reading ") + what);
  T value = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) value |= static_cast<T>(bytes[i]) << (8 * i);
  return value;
}

}  // namespace

void write_checkpoint(std::ostream& out, const NamedTensors& tensors) {
  out.write("LLCP", 4);
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (name.size() > std::numeric_limits<std::uint16_t>::max()) {
      throw std::invalid_argument("checkpoint: parameter name too long");
    }
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (double v : t.values()) {
      std::uint64_t bits = 0;
      std::memcpy(&bits, &v, sizeof bits);
      put_le<std::uint64_t>(out, bits);
    }
  }
  if (!out) throw std::runtime_error("checkpoint: write failed");
}

NamedTensors read_checkpoint(std::istream& in) {
  char magic[4] = {};
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "LLCP", 4) != 0) throw std::runtime_error("checkpoint: bad magic");
  const auto version = get_le<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto count = get_le<std::uint32_t>(in, "count");
  NamedTensors out;
  out.reserve(count);
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto len = get_le<std::uint16_t>(in, "name length");
    std::string name(len, '\0');
    in.read(name.data(), len);
    if (!in) throw std::runtime_error("checkpoint truncated while reading a name");
    const auto rank = get_le<std::uint8_t>(in, "rank");
    Shape shape;
    for (std::uint8_t r = 0; r < rank; ++r) shape.push_back(get_le<std::uint32_t>(in, "dims"));
    std::vector<double> values(shape_size(shape));
    for (auto& v : values) {
      const auto bits = get_le<std::uint64_t>(in, "values");
      std::memcpy(&v, &bits, sizeof v);
    }
    out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_checkpoint(out, tensors);
}

NamedTensors load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  return read_checkpoint(in);
}

NamedTensors to_named(const ParamStore& store) {
  NamedTensors out;
  store.for_each([&](const std::string& name, const Tensor& t) {
    out.emplace_back(name, Tensor(t.shape(), t.data()));
  });
  return out;
}

void restore(ParamStore& store, const NamedTensors& tensors) {
  if (tensors.size() != store.size()) {
    throw std::runtime_error("checkpoint has " + std::to_string(tensors.size()) +
                             " tensors, model expects " + std::to_string(store.size()));
  }
  for (const auto& [name, t] : tensors) store.assign(name, t);
}

std::string checkpoint_bytes(const NamedTensors& tensors) {
  std::ostringstream out(std::ios::binary);
  write_checkpoint(out, tensors);
  return out.str();
}

std::uint64_t checkpoint_hash(const ParamStore& store) {
  return fnv1a(checkpoint_bytes(to_named(store)));
}

}  // namespace loraloop::num
