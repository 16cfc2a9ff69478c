#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ocd/rng.hpp"
#include "ocd/tensor.hpp"

namespace ocd {

enum class Activation { Tanh, Relu };
enum class OutputHead { SoftmaxClassifier, LinearRegressor };

std::string to_string(Activation a);
std::string to_string(OutputHead h);
Activation activation_from_string(const std::string& s);
OutputHead output_head_from_string(const std::string& s);

struct MlpSpec {
  std::vector<Index> layer_sizes;
  Activation hidden_activation = Activation::Tanh;
  OutputHead output_head = OutputHead::SoftmaxClassifier;

  Index num_layers() const {
    return static_cast<Index>(layer_sizes.size()) - 1;
  }
  Index input_size() const { return layer_sizes.front(); }
  Index output_size() const { return layer_sizes.back(); }

  /// Throws DimensionError unless there are >= 2 sizes, all positive.
  void validate() const;

  friend bool operator==(const MlpSpec&, const MlpSpec&) = default;
};

/// One affine layer, y = W x + b. W is (out, in).
struct DenseLayer {
  Matrix weight;
  Vector bias;

  Index in_size() const { return weight.cols(); }
  Index out_size() const { return weight.rows(); }

  /// [W | b] as an (out, in + 1) matrix.
  Matrix augmented() const;
  void set_augmented(const Matrix& wb);

  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

struct MlpModel {
  MlpSpec spec;
  std::vector<DenseLayer> layers;

  Index num_layers() const { return static_cast<Index>(layers.size()); }
  void check_layer_index(Index layer) const;

  friend bool operator==(const MlpModel&, const MlpModel&) = default;
};

/// Glorot-uniform weights, zero biases.
MlpModel init_mlp(const MlpSpec& spec, RngStream& rng);

struct ForwardTrace {
  std::vector<Vector> inputs;  // input to each layer
  std::vector<Vector> pre;     // W x + b per layer
  std::vector<Vector> post;    // activation per layer; identity on the last
  Vector output;               // softmax(post.back()) or post.back()

  Index num_layers() const { return static_cast<Index>(pre.size()); }
  const Vector& logits() const { return post.back(); }
};

/// Evaluates layers [first, num_layers) starting from `input`, which must be
/// the input of layer `first`. Used to replay only the tail of a network.
ForwardTrace mlp_forward_from(const MlpModel& model, Index first,
                              const Vector& input);

ForwardTrace mlp_forward(const MlpModel& model, const Vector& x);

/// Applies the output head to a final-layer value.
Vector apply_head(OutputHead head, const Vector& last);

using MlpGradients = std::vector<DenseLayer>;

/// Backpropagates d loss / d post.back() through the network.
///
/// With `only_layer` set, gradients are produced for that layer alone (all
/// other entries are left empty) and backpropagation stops there.
MlpGradients mlp_backward(const MlpModel& model, const ForwardTrace& trace,
                          const Vector& grad_output,
                          std::optional<Index> only_layer = std::nullopt);

double activate(Activation a, double z);
double activate_derivative(Activation a, double z);

/// Flat parameter access in (W_0, b_0, W_1, b_1, ...) order, used by the
/// optimizer and by finite-difference checks.
struct ParamSpan {
  std::string name;
  std::span<double> values;
};
std::vector<ParamSpan> parameter_spans(MlpModel& model,
                                       const std::string& prefix = "");
std::vector<ParamSpan> gradient_spans(MlpGradients& grads,
                                      const std::string& prefix = "");

/// Order-sensitive 64-bit FNV-1a digest over spec and parameter bytes.
std::string model_checksum(const MlpModel& model);

/// 64-bit FNV-1a of `bytes`, as 16 lowercase hex digits.
std::string fnv1a_hex(std::string_view bytes);

}  // namespace ocd
