#include "ocd/overfit.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include <nlohmann/json.hpp>

#include "ocd/checkpoint.hpp"
#include "ocd/error.hpp"

namespace ocd {

namespace fs = std::filesystem;
using nlohmann::json;

ConditioningTuple make_conditioning(const MlpModel& model, Index layer, const Vector& x) {
  model.check_layer_index(layer);
  const auto trace = mlp_forward(model, x);
  const auto l = static_cast<std::size_t>(layer);
  return {trace.inputs[l], trace.post[l], trace.output};
}

namespace {

LossResult sample_loss(const MlpModel& model, const ForwardTrace& trace,
                       const Target& target, std::size_t sample_index) {
  auto r = trace_loss(model, trace, target);
  if (!std::isfinite(r.loss)) {
    throw NumericalError("finetune: non-finite loss on sample " + std::to_string(sample_index));
  }
  return r;
}

}  // namespace

FinetuneResult finetune_sample(const MlpModel& model, std::optional<Index> layer,
                               const Vector& x, const Target& target,
                               const FinetuneOptions& opts, std::size_t sample_index) {
  if (opts.steps < 1) throw std::invalid_argument("finetune: steps must be >= 1");
  if (layer) model.check_layer_index(*layer);

  FinetuneResult res{model, 0.0, 0.0, 0};
  auto trace = mlp_forward(res.model, x);
  auto loss = sample_loss(res.model, trace, target, sample_index);
  res.loss_before = loss.loss;

  const int limit = opts.max_steps > 0 ? opts.max_steps : opts.steps;
  for (int step = 0; step < limit; ++step) {
    const auto grads = mlp_backward(res.model, trace, loss.grad, layer);
    for (std::size_t l = 0; l < grads.size(); ++l) {
      if (layer && static_cast<Index>(l) != *layer) continue;
      res.model.layers[l].weight -= opts.lr * grads[l].weight;
      res.model.layers[l].bias -= opts.lr * grads[l].bias;
    }
    ++res.steps_taken;
    const double previous = loss.loss;
    trace = mlp_forward(res.model, x);
    loss = sample_loss(res.model, trace, target, sample_index);
    if (opts.max_steps > 0 && std::abs(previous - loss.loss) < opts.tol) break;
  }
  res.loss_after = loss.loss;
  return res;
}

std::optional<NormalizedDelta> normalize_delta(const Matrix& delta) {
  const double rho = delta.norm();
  if (!(rho > kMinDeltaNorm)) return std::nullopt;
  return NormalizedDelta{delta / rho, rho};
}

std::optional<NormalizedDelta> normalize_delta(const DenseLayer& tuned, const DenseLayer& base) {
  if (tuned.weight.rows() != base.weight.rows() || tuned.weight.cols() != base.weight.cols()) {
    throw DimensionError("normalize_delta: layer shapes differ");
  }
  return normalize_delta(tuned.augmented() - base.augmented());
}

void RecordStore::validate() const {
  const auto& m = manifest;
  if (static_cast<Index>(records.size()) != m.num_records) {
    throw DimensionError("record store: manifest lists " + std::to_string(m.num_records) +
                         " records, found " + std::to_string(records.size()));
  }
  for (const auto& r : records) {
    const bool ok = r.x.size() == m.input_dim && r.cond.layer_input.size() == m.layer_in &&
                    r.cond.activation.size() == m.layer_out &&
                    r.cond.output.size() == m.output_dim &&
                    r.delta_norm.rows() == m.delta_rows() &&
                    r.delta_norm.cols() == m.delta_cols();
    if (!ok) {
      throw DimensionError("record store: record for sample " +
                           std::to_string(r.sample_index) + " has the wrong shape");
    }
  }
}

double RecordStore::mean_rho() const {
  if (records.empty()) throw std::invalid_argument("mean_rho: empty record store");
  double s = 0.0;
  for (const auto& r : records) s += r.rho;
  return s / static_cast<double>(records.size());
}

RecordStore collect(const MlpModel& model, Index layer, const Dataset& train,
                    const FinetuneOptions& opts) {
  model.check_layer_index(layer);
  if (train.size() == 0) throw std::invalid_argument("collect: empty training set");
  const auto& base = model.layers[static_cast<std::size_t>(layer)];

  RecordStore store;
  auto& m = store.manifest;
  m.layer = layer;
  m.input_dim = model.spec.input_size();
  m.layer_in = base.in_size();
  m.layer_out = base.out_size();
  m.output_dim = model.spec.output_size();
  m.base_checksum = model_checksum(model);
  m.steps = opts.max_steps > 0 ? opts.max_steps : opts.steps;
  m.lr = opts.lr;

  for (Index i = 0; i < train.size(); ++i) {
    const auto idx = static_cast<std::size_t>(i);
    const Vector x = train.input(i);
    const auto tuned = finetune_sample(model, layer, x, train.target(i), opts, idx);
    const auto nd = normalize_delta(tuned.model.layers[static_cast<std::size_t>(layer)], base);
    if (!nd) {
      ++m.num_excluded;
      continue;
    }
    store.records.push_back({idx, x, make_conditioning(model, layer, x), nd->direction,
                             nd->scale, tuned.loss_before, tuned.loss_after});
  }
  m.num_records = static_cast<Index>(store.records.size());
  return store;
}

namespace {

json manifest_to_json(const RecordManifest& m) {
  return {{"layer", m.layer},           {"input_dim", m.input_dim},
          {"layer_in", m.layer_in},     {"layer_out", m.layer_out},
          {"output_dim", m.output_dim}, {"num_records", m.num_records},
          {"num_excluded", m.num_excluded}, {"base_checksum", m.base_checksum},
          {"steps", m.steps},           {"lr", m.lr}};
}

RecordManifest manifest_from_json(const json& j) {
  RecordManifest m;
  m.layer = j.at("layer").get<Index>();
  m.input_dim = j.at("input_dim").get<Index>();
  m.layer_in = j.at("layer_in").get<Index>();
  m.layer_out = j.at("layer_out").get<Index>();
  m.output_dim = j.at("output_dim").get<Index>();
  m.num_records = j.at("num_records").get<Index>();
  m.num_excluded = j.at("num_excluded").get<Index>();
  m.base_checksum = j.at("base_checksum").get<std::string>();
  m.steps = j.at("steps").get<int>();
  m.lr = j.at("lr").get<double>();
  return m;
}

std::string chunk_name(std::size_t c) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "chunk_%04zu", c);
  return buf;
}

// One row per record.
template <typename Get>
TensorF stack_rows(const std::vector<OverfitRecord>& recs, std::size_t begin, std::size_t end,
                   Index width, Get get) {
  TensorF t({static_cast<Index>(end - begin), width});
  for (std::size_t r = begin; r < end; ++r) {
    const Vector v = get(recs[r]);
    for (Index k = 0; k < width; ++k) t[static_cast<Index>(r - begin) * width + k] = v[k];
  }
  return t;
}

Vector row_of(const TensorF& t, Index r) {
  const Index w = t.shape()[1];
  return t.data().segment(r * w, w);
}

Vector flatten_row_major(const Matrix& m) {
  Vector v(m.size());
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c) v[r * m.cols() + c] = m(r, c);
  return v;
}

}  // namespace

void save_records(const fs::path& dir, const RecordStore& store) {
  store.validate();
  const auto& m = store.manifest;
  fs::create_directories(dir);
  const std::size_t n = store.records.size();
  const std::size_t chunks = (n + kRecordChunk - 1) / kRecordChunk;
  const Index dsize = m.delta_rows() * m.delta_cols();
  const auto& recs = store.records;

  for (std::size_t c = 0; c < chunks; ++c) {
    const std::size_t b = c * kRecordChunk, e = std::min(n, b + kRecordChunk);
    Checkpoint ck;
    ck.meta = {{"first", b}, {"count", e - b}};
    ck.tensors.emplace("sample_index", stack_rows(recs, b, e, 1, [](const auto& r) {
                         return Vector::Constant(1, static_cast<double>(r.sample_index)).eval();
                       }));
    ck.tensors.emplace("x", stack_rows(recs, b, e, m.input_dim, [](const auto& r) { return r.x; }));
    ck.tensors.emplace("layer_input", stack_rows(recs, b, e, m.layer_in,
                                                 [](const auto& r) { return r.cond.layer_input; }));
    ck.tensors.emplace("activation", stack_rows(recs, b, e, m.layer_out,
                                                [](const auto& r) { return r.cond.activation; }));
    ck.tensors.emplace("output", stack_rows(recs, b, e, m.output_dim,
                                            [](const auto& r) { return r.cond.output; }));
    ck.tensors.emplace("delta_norm", stack_rows(recs, b, e, dsize, [](const auto& r) {
                         return flatten_row_major(r.delta_norm);
                       }));
    ck.tensors.emplace("rho", stack_rows(recs, b, e, 1, [](const auto& r) {
                         return Vector::Constant(1, r.rho).eval();
                       }));
    ck.tensors.emplace("loss", stack_rows(recs, b, e, 2, [](const auto& r) {
                         Vector v(2);
                         v << r.loss_before, r.loss_after;
                         return v;
                       }));
    save_checkpoint(dir / chunk_name(c), ck);
  }

  json j = manifest_to_json(m);
  j["format"] = "ocd-records/1";
  j["chunks"] = chunks;
  j["chunk_size"] = kRecordChunk;
  std::ofstream out(dir / "manifest.json");
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
}

RecordStore load_records(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw FormatError("no record manifest in " + dir.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError("record manifest: " + std::string(e.what()));
  }
  if (j.value("format", "") != "ocd-records/1") throw FormatError("not a record store: " + dir.string());

  RecordStore store;
  store.manifest = manifest_from_json(j);
  const auto& m = store.manifest;
  const auto chunks = j.at("chunks").get<std::size_t>();
  for (std::size_t c = 0; c < chunks; ++c) {
    const auto ck = load_checkpoint(dir / chunk_name(c));
    const Index count = ck.meta.at("count").get<Index>();
    const auto& delta = ck.tensor("delta_norm");
    for (Index r = 0; r < count; ++r) {
      OverfitRecord rec;
      rec.sample_index = static_cast<std::size_t>(ck.tensor("sample_index")[r]);
      rec.x = row_of(ck.tensor("x"), r);
      rec.cond = {row_of(ck.tensor("layer_input"), r), row_of(ck.tensor("activation"), r),
                  row_of(ck.tensor("output"), r)};
      const Vector d = row_of(delta, r);
      rec.delta_norm = Eigen::Map<const RowMajorMat<double>>(d.data(), m.delta_rows(), m.delta_cols());
      rec.rho = ck.tensor("rho")[r];
      rec.loss_before = ck.tensor("loss")[2 * r];
      rec.loss_after = ck.tensor("loss")[2 * r + 1];
      store.records.push_back(std::move(rec));
    }
  }
  try {
    store.validate();
  } catch (const DimensionError& e) {
    throw FormatError(e.what());
  }
  return store;
}

}  // namespace ocd
