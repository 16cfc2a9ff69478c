#include "ocd/rng.hpp"

#include <numbers>

namespace ocd {

std::uint64_t mix64(std::uint64_t x) {
  // splitmix64 finalizer
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

RngStream::RngStream(std::uint64_t seed, std::uint64_t stream)
    : seed_(seed), stream_(stream), key_(mix64(mix64(seed) ^ mix64(~stream))) {}

std::uint64_t RngStream::next_u64() {
  const std::uint64_t c = counter_++;
  return mix64(key_ ^ mix64(c * 0xD1B54A32D192ED03ULL + 1));
}

double RngStream::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t RngStream::uniform_index(std::uint64_t n) {
  // Rejection keeps the draw unbiased for any n.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t r;
  do {
    r = next_u64();
  } while (r >= limit);
  return r % n;
}

double RngStream::gaussian() {
  if (spare_) {
    const double v = *spare_;
    spare_.reset();
    return v;
  }
  const double u1 = 1.0 - uniform();  // (0, 1]
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(angle);
  return r * std::cos(angle);
}

Vector RngStream::gaussian_vector(Index n) {
  Vector v(n);
  for (Index i = 0; i < n; ++i) v[i] = gaussian();
  return v;
}

Matrix RngStream::gaussian_matrix(Index rows, Index cols) {
  // Filled in row-major order so the draw sequence matches TensorF layout.
  Matrix m(rows, cols);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) m(r, c) = gaussian();
  return m;
}

RngStream RngStream::substream(std::uint64_t id) const {
  return RngStream(seed_, mix64(stream_ * 0x9E3779B97F4A7C15ULL + mix64(id)));
}

TensorF rng_gaussian(RngStream& stream, const TensorF::Shape& shape) {
  TensorF t(shape);
  for (Index i = 0; i < t.size(); ++i) t[i] = stream.gaussian();
  return t;
}

}  // namespace ocd
