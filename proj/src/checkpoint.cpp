#include "ocd/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace ocd {

namespace fs = std::filesystem;
using nlohmann::json;

const TensorF& Checkpoint::tensor(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) {
    throw FormatError("checkpoint has no tensor named '" + name + "'");
  }
  return it->second;
}

void write_raw_f64(const fs::path& file, const Vector& data) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  std::vector<unsigned char> bytes(static_cast<std::size_t>(data.size()) * 8);
  for (Index i = 0; i < data.size(); ++i) {
    auto bits = std::bit_cast<std::uint64_t>(data[i]);
    for (int b = 0; b < 8; ++b) {
      bytes[static_cast<std::size_t>(i) * 8 + b] =
          static_cast<unsigned char>(bits >> (8 * b));
    }
  }
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("short write to " + file.string());
}

Vector read_raw_f64(const fs::path& file, Index expected) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw FormatError("cannot open " + file.string());
  std::vector<unsigned char> bytes(static_cast<std::size_t>(expected) * 8);
  in.read(reinterpret_cast<char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size()) ||
      in.peek() != std::char_traits<char>::eof()) {
    throw FormatError(file.string() + ": expected exactly " +
                      std::to_string(expected) + " float64 values");
  }
  Vector v(expected);
  for (Index i = 0; i < expected; ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) {
      bits |= static_cast<std::uint64_t>(bytes[static_cast<std::size_t>(i) * 8 + b])
              << (8 * b);
    }
    v[i] = std::bit_cast<double>(bits);
  }
  return v;
}

void save_checkpoint(const fs::path& dir, const Checkpoint& ckpt) {
  fs::create_directories(dir);
  json manifest;
  manifest["format"] = "ocd-checkpoint/1";
  manifest["meta"] = ckpt.meta;
  manifest["tensors"] = json::array();
  for (const auto& [name, t] : ckpt.tensors) {
    const std::string file = name + ".f64";
    write_raw_f64(dir / file, t.data());
    manifest["tensors"].push_back({{"name", name}, {"file", file}, {"shape", t.shape()}});
  }
  std::ofstream out(dir / "manifest.json");
  out << manifest.dump(2) << '\n';
  if (!out) throw std::runtime_error("cannot write manifest in " + dir.string());
}

Checkpoint load_checkpoint(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw FormatError("no manifest.json in " + dir.string());
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError(dir.string() + "/manifest.json: " + e.what());
  }
  Checkpoint ckpt;
  ckpt.meta = manifest.at("meta");
  for (const auto& entry : manifest.at("tensors")) {
    auto shape = entry.at("shape").get<TensorF::Shape>();
    Index n = 1;
    for (Index s : shape) n *= s;
    Vector data = read_raw_f64(dir / entry.at("file").get<std::string>(), n);
    ckpt.tensors.emplace(entry.at("name").get<std::string>(),
                         TensorF(std::move(shape), std::move(data)));
  }
  return ckpt;
}

json spec_to_json(const MlpSpec& spec) {
  return {{"layer_sizes", spec.layer_sizes},
          {"hidden_activation", to_string(spec.hidden_activation)},
          {"output_head", to_string(spec.output_head)}};
}

MlpSpec spec_from_json(const json& j) {
  MlpSpec spec;
  spec.layer_sizes = j.at("layer_sizes").get<std::vector<Index>>();
  spec.hidden_activation = activation_from_string(j.at("hidden_activation"));
  spec.output_head = output_head_from_string(j.at("output_head"));
  spec.validate();
  return spec;
}

void put_model(Checkpoint& ckpt, const std::string& prefix, const MlpModel& model) {
  ckpt.meta[prefix + "spec"] = spec_to_json(model.spec);
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const auto& layer = model.layers[l];
    ckpt.tensors[prefix + "W" + std::to_string(l)] = TensorF::from_matrix(layer.weight);
    ckpt.tensors[prefix + "b" + std::to_string(l)] =
        TensorF({layer.bias.size()}, layer.bias);
  }
}

MlpModel get_model(const Checkpoint& ckpt, const std::string& prefix) {
  MlpModel model;
  model.spec = spec_from_json(ckpt.meta.at(prefix + "spec"));
  for (Index l = 0; l < model.spec.num_layers(); ++l) {
    const TensorF& w = ckpt.tensor(prefix + "W" + std::to_string(l));
    const TensorF& b = ckpt.tensor(prefix + "b" + std::to_string(l));
    DenseLayer layer{w.to_matrix(), b.data()};
    if (layer.out_size() != model.spec.layer_sizes[l + 1] ||
        layer.in_size() != model.spec.layer_sizes[l] ||
        layer.bias.size() != layer.out_size()) {
      throw FormatError("checkpoint layer " + std::to_string(l) +
                        " disagrees with the stored spec");
    }
    model.layers.push_back(std::move(layer));
  }
  return model;
}

void save_model(const fs::path& dir, const MlpModel& model, const std::string& stage,
                std::uint64_t seed) {
  Checkpoint ckpt;
  put_model(ckpt, "", model);
  ckpt.meta["stage"] = stage;
  ckpt.meta["seed"] = seed;
  ckpt.meta["checksum"] = model_checksum(model);
  save_checkpoint(dir, ckpt);
}

MlpModel load_model(const fs::path& dir) {
  return get_model(load_checkpoint(dir), "");
}

}  // namespace ocd
