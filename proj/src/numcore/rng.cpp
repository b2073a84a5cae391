#include "loraloop/numcore/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace loraloop::num {

std::uint64_t stream_id(std::string_view label, std::initializer_list<std::uint64_t> coords) {
  std::uint64_t h = fnv1a(label);
  for (auto c : coords) h = mix64(h ^ mix64(c));
  return h;
}

RngStream::RngStream(std::uint64_t seed, std::uint64_t stream)
    : seed_(seed), stream_(stream), key_(mix64(mix64(seed) ^ mix64(stream ^ 0xA5A5A5A5A5A5A5A5ull))) {}

std::uint64_t RngStream::next_u64() noexcept {
  const auto c = counter_++;
  return mix64(key_ ^ mix64(c + 0x632BE59BD9B4E019ull));
}

double RngStream::uniform() noexcept {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::normal() noexcept {
  const double u1 = 1.0 - uniform();  // (0, 1]
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::size_t RngStream::index(std::size_t n) {
  if (n == 0) throw std::invalid_argument("RngStream::index: empty range");
  const auto wide = static_cast<unsigned __int128>(next_u64()) * n;
  return static_cast<std::size_t>(wide >> 64);
}

std::vector<std::size_t> RngStream::permutation(std::size_t n) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[index(i)]);
  return p;
}

RngStream RngStream::split(std::uint64_t child) const {
  return RngStream(seed_, mix64(stream_ ^ mix64(child + 0x1F123BB5ull)));
}

}  // namespace loraloop::num
