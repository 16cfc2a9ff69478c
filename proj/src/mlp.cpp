#include "ocd/mlp.hpp"

#include <bit>
#include <cstdio>

namespace ocd {

std::string to_string(Activation a) {
  return a == Activation::Tanh ? "tanh" : "relu";
}

std::string to_string(OutputHead h) {
  return h == OutputHead::SoftmaxClassifier ? "softmax-classifier"
                                            : "linear-regressor";
}

Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::Tanh;
  if (s == "relu") return Activation::Relu;
  throw std::invalid_argument("unknown activation '" + s + "'");
}

OutputHead output_head_from_string(const std::string& s) {
  if (s == "softmax-classifier") return OutputHead::SoftmaxClassifier;
  if (s == "linear-regressor") return OutputHead::LinearRegressor;
  throw std::invalid_argument("unknown output head '" + s + "'");
}

void MlpSpec::validate() const {
  if (layer_sizes.size() < 2) {
    throw DimensionError("an MLP needs at least two layer sizes");
  }
  for (Index s : layer_sizes) {
    if (s <= 0) throw DimensionError("layer sizes must be positive");
  }
}

Matrix DenseLayer::augmented() const {
  Matrix wb(weight.rows(), weight.cols() + 1);
  wb << weight, bias;
  return wb;
}

void DenseLayer::set_augmented(const Matrix& wb) {
  if (wb.rows() != weight.rows() || wb.cols() != weight.cols() + 1) {
    throw DimensionError("augmented layer matrix has the wrong shape");
  }
  weight = wb.leftCols(weight.cols());
  bias = wb.col(weight.cols());
}

void MlpModel::check_layer_index(Index layer) const {
  if (layer < 0 || layer >= num_layers()) {
    throw std::out_of_range("layer index " + std::to_string(layer) +
                            " outside [0, " + std::to_string(num_layers()) +
                            ")");
  }
}

MlpModel init_mlp(const MlpSpec& spec, RngStream& rng) {
  spec.validate();
  MlpModel model{spec, {}};
  for (Index l = 0; l < spec.num_layers(); ++l) {
    const Index in = spec.layer_sizes[l];
    const Index out = spec.layer_sizes[l + 1];
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    DenseLayer layer{Matrix(out, in), Vector::Zero(out)};
    for (Index r = 0; r < out; ++r)
      for (Index c = 0; c < in; ++c)
        layer.weight(r, c) = limit * (2.0 * rng.uniform() - 1.0);
    model.layers.push_back(std::move(layer));
  }
  return model;
}

double activate(Activation a, double z) {
  return a == Activation::Tanh ? std::tanh(z) : (z > 0.0 ? z : 0.0);
}

double activate_derivative(Activation a, double z) {
  if (a == Activation::Tanh) {
    const double t = std::tanh(z);
    return 1.0 - t * t;
  }
  return z > 0.0 ? 1.0 : 0.0;
}

Vector apply_head(OutputHead head, const Vector& last) {
  if (head == OutputHead::LinearRegressor) return last;
  const double peak = last.maxCoeff();
  Vector p = (last.array() - peak).exp();
  return p / p.sum();
}

ForwardTrace mlp_forward_from(const MlpModel& model, Index first,
                              const Vector& input) {
  const Index n = model.num_layers();
  ForwardTrace trace;
  trace.inputs.reserve(n - first);
  trace.pre.reserve(n - first);
  trace.post.reserve(n - first);
  Vector h = input;
  for (Index l = first; l < n; ++l) {
    const DenseLayer& layer = model.layers[l];
    if (h.size() != layer.in_size()) {
      throw DimensionError("layer " + std::to_string(l) + " expects input of length " +
                           std::to_string(layer.in_size()) + ", got " +
                           std::to_string(h.size()));
    }
    Vector z = layer.weight * h + layer.bias;
    Vector a = z;
    if (l + 1 < n) {
      a = z.unaryExpr(
          [act = model.spec.hidden_activation](double v) { return activate(act, v); });
    }
    trace.inputs.push_back(std::move(h));
    trace.pre.push_back(std::move(z));
    trace.post.push_back(a);
    h = std::move(a);
  }
  trace.output = apply_head(model.spec.output_head, trace.post.back());
  return trace;
}

ForwardTrace mlp_forward(const MlpModel& model, const Vector& x) {
  return mlp_forward_from(model, 0, x);
}

MlpGradients mlp_backward(const MlpModel& model, const ForwardTrace& trace,
                          const Vector& grad_output,
                          std::optional<Index> only_layer) {
  const Index n = model.num_layers();
  if (trace.num_layers() != n) {
    throw DimensionError("trace has " + std::to_string(trace.num_layers()) +
                         " layers but the model has " + std::to_string(n));
  }
  for (Index l = 0; l < n; ++l) {
    const DenseLayer& layer = model.layers[l];
    if (trace.inputs[l].size() != layer.in_size() ||
        trace.pre[l].size() != layer.out_size()) {
      throw DimensionError("stale trace: layer " + std::to_string(l) +
                           " shapes disagree with the model");
    }
  }
  if (grad_output.size() != model.spec.output_size()) {
    throw DimensionError("output gradient has length " +
                         std::to_string(grad_output.size()) + ", expected " +
                         std::to_string(model.spec.output_size()));
  }
  if (only_layer) model.check_layer_index(*only_layer);

  MlpGradients grads(n);
  const Index stop = only_layer.value_or(0);
  Vector delta = grad_output;  // d loss / d pre[l]; last layer is linear
  for (Index l = n - 1; l >= stop; --l) {
    if (!only_layer || *only_layer == l) {
      grads[l].weight = delta * trace.inputs[l].transpose();
      grads[l].bias = delta;
    }
    if (l == stop) break;
    Vector back = model.layers[l].weight.transpose() * delta;
    const Vector& z = trace.pre[l - 1];
    for (Index i = 0; i < back.size(); ++i) {
      back[i] *= activate_derivative(model.spec.hidden_activation, z[i]);
    }
    delta = std::move(back);
  }
  return grads;
}

std::vector<ParamSpan> parameter_spans(MlpModel& model,
                                       const std::string& prefix) {
  std::vector<ParamSpan> spans;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    auto& layer = model.layers[l];
    spans.push_back({prefix + "W" + std::to_string(l),
                     {layer.weight.data(), static_cast<std::size_t>(layer.weight.size())}});
    spans.push_back({prefix + "b" + std::to_string(l),
                     {layer.bias.data(), static_cast<std::size_t>(layer.bias.size())}});
  }
  return spans;
}

std::vector<ParamSpan> gradient_spans(MlpGradients& grads,
                                      const std::string& prefix) {
  std::vector<ParamSpan> spans;
  for (std::size_t l = 0; l < grads.size(); ++l) {
    auto& g = grads[l];
    spans.push_back({prefix + "W" + std::to_string(l),
                     {g.weight.data(), static_cast<std::size_t>(g.weight.size())}});
    spans.push_back({prefix + "b" + std::to_string(l),
                     {g.bias.data(), static_cast<std::size_t>(g.bias.size())}});
  }
  return spans;
}

namespace {

struct Fnv1a {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= c[i];
      h *= 0x100000001b3ULL;
    }
  }
  void value(double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) {
      const unsigned char b = static_cast<unsigned char>(bits >> (8 * i));
      bytes(&b, 1);
    }
  }
};

}  // namespace

std::string model_checksum(const MlpModel& model) {
  Fnv1a f;
  for (Index s : model.spec.layer_sizes) f.value(static_cast<double>(s));
  f.value(static_cast<double>(model.spec.hidden_activation));
  f.value(static_cast<double>(model.spec.output_head));
  for (const auto& layer : model.layers) {
    // row-major order, matching the on-disk layout
    for (Index r = 0; r < layer.weight.rows(); ++r)
      for (Index c = 0; c < layer.weight.cols(); ++c) f.value(layer.weight(r, c));
    for (Index r = 0; r < layer.bias.size(); ++r) f.value(layer.bias[r]);
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(f.h));
  return buf;
}

std::string fnv1a_hex(std::string_view bytes) {
  Fnv1a f;
  f.bytes(bytes.data(), bytes.size());
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(f.h));
  return buf;
}

}  // namespace ocd
