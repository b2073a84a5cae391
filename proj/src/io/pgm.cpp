#include "loraloop/io/pgm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace loraloop::io {

void write_pgm(const std::filesystem::path& path, const num::Tensor& pixels, std::size_t side) {
  if (pixels.size() != side * side) {
    throw num::ShapeError("write_pgm: " + std::to_string(pixels.size()) + " values for a " +
                          std::to_string(side) + "x" + std::to_string(side) + " image");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "P5\n" << side << ' ' << side << "\n255\n";
  std::vector<char> bytes(pixels.size());
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    const double v = std::clamp(pixels[i], 0.0, 1.0);
    bytes[i] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0)));
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

num::Tensor read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P5" || w == 0 || h == 0 || maxval != 255) {
    throw std::runtime_error(path.string() + ": not an 8-bit P5 PGM");
  }
  in.get();
  std::vector<unsigned char> bytes(w * h);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!in) throw std::runtime_error(path.string() + ": truncated pixel data");
  std::vector<double> values(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) values[i] = bytes[i] / 255.0;
  return num::Tensor(num::Shape{w * h}, std::move(values));
}

}  // namespace loraloop::io
