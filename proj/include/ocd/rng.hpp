#pragma once

#include <cstdint>
#include <optional>

#include "ocd/tensor.hpp"

namespace ocd {

/// Counter-based random stream.
///
/// Output i of a stream is a pure function of (seed, stream id, i), so two
/// streams with the same key replay the same sequence regardless of what
/// other streams did in between. Independent pipeline stages each take
/// their own stream id; per-sample work takes a substream.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64();
  /// Uniform on [0, 1) with 53 random bits.
  double uniform();
  /// Uniform integer on [0, n).
  std::uint64_t uniform_index(std::uint64_t n);
  /// Standard normal via Box-Muller; draws come in cached pairs.
  double gaussian();

  Vector gaussian_vector(Index n);
  Matrix gaussian_matrix(Index rows, Index cols);

  /// Independent child stream keyed by (seed, stream, id).
  RngStream substream(std::uint64_t id) const;

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  std::optional<double> spare_;
};

/// i.i.d. standard normal tensor of the given shape.
TensorF rng_gaussian(RngStream& stream, const TensorF::Shape& shape);

std::uint64_t mix64(std::uint64_t x);

}  // namespace ocd
