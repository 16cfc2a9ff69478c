#pragma once

#include <memory>
#include <vector>

#include "ocd/mlp.hpp"
#include "ocd/rng.hpp"
#include "ocd/tensor.hpp"

namespace ocd {

struct UNetConfig {
  Index side = 8;        // input is side x side, one channel
  Index channels = 16;
  int levels = 2;        // side must be divisible by 2^levels
  bool attention = true;
  Index cond_dim = 32;
  Index spatial_hidden = 64;  // width of the conditioning-to-map hidden layer

  void validate() const;
  friend bool operator==(const UNetConfig&, const UNetConfig&) = default;
};

/// Batched single-channel U-Net: residual blocks with an additive affine
/// injection of a conditioning vector, average-pool downsampling, nearest
/// upsampling with skip concatenation, and self-attention at the bottleneck.
/// After the input convolution, a learned map P + A silu(M e + m) adds a
/// conditioning-dependent spatial pattern to the features.
///
/// Inputs are (side*side, B) matrices whose columns are row-major maps;
/// the conditioning is (cond_dim, B). forward() keeps the activations that
/// the following backward() needs.
class UNet {
 public:
  UNet(const UNetConfig& cfg, RngStream& init);
  ~UNet();
  UNet(const UNet&);
  UNet& operator=(const UNet&);
  UNet(UNet&&) noexcept;
  UNet& operator=(UNet&&) noexcept;

  const UNetConfig& config() const { return cfg_; }

  Matrix forward(const Matrix& x, const Matrix& cond);
  /// Backpropagates d loss / d output, accumulating parameter gradients.
  /// Returns d loss / d cond.
  Matrix backward(const Matrix& grad_out);
  void zero_grad();

  std::vector<ParamSpan> parameters(const std::string& prefix = "unet.");
  std::vector<ParamSpan> gradients(const std::string& prefix = "unet.");

 private:
  struct Impl;
  UNetConfig cfg_;
  std::unique_ptr<Impl> impl_;
};

}  // namespace ocd
