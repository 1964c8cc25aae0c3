#include "cai/model_io.hpp"

#include <fstream>

#include "cai/hash.hpp"

namespace cai {

using nlohmann::json;

json matrix_to_json(const Matrix& m) {
  return json(std::vector<double>(m.data(), m.data() + m.size()));
}

Matrix matrix_from_json(const json& j, Eigen::Index rows, Eigen::Index cols,
                        const std::string& what) {
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != rows * cols) {
    throw ShapeError(what + ": expected " + std::to_string(rows * cols) + " values");
  }
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows * cols; ++i) m.data()[i] = j[i].get<double>();
  return m;
}

json vector_to_json(const Vector& v) {
  return json(std::vector<double>(v.data(), v.data() + v.size()));
}

Vector vector_from_json(const json& j, Eigen::Index size, const std::string& what) {
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != size) {
    throw ShapeError(what + ": expected " + std::to_string(size) + " values");
  }
  Vector v(size);
  for (Eigen::Index i = 0; i < size; ++i) v[i] = j[i].get<double>();
  return v;
}

json config_to_json(const ModelConfig& c) {
  return json{{"num_layers", c.num_layers}, {"num_heads", c.num_heads},
              {"head_dim", c.head_dim},     {"model_dim", c.model_dim()},
              {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  try {
    c.num_layers = j.at("num_layers").get<int>();
    c.num_heads = j.at("num_heads").get<int>();
    c.head_dim = j.at("head_dim").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    if (j.contains("model_dim") && j.at("model_dim").get<int>() != c.model_dim()) {
      throw ConfigError("model config: model_dim must equal num_heads * head_dim");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

json weights_to_json(const DecoderWeights& w) {
  json layers = json::array();
  for (const auto& layer : w.layers) {
    json heads = json::array();
    for (const auto& head : layer.heads) {
      heads.push_back(
          {{"wq", matrix_to_json(head.wq)}, {"wk", matrix_to_json(head.wk)}, {"wv", matrix_to_json(head.wv)}});
    }
    layers.push_back({{"heads", std::move(heads)}, {"wo", matrix_to_json(layer.wo)}});
  }
  return json{{"config", config_to_json(w.config)},
              {"layers", std::move(layers)},
              {"embedding", matrix_to_json(w.embedding)},
              {"readout", vector_to_json(w.readout)}};
}

DecoderWeights weights_from_json(const json& j) {
  DecoderWeights w;
  try {
    w.config = config_from_json(j.at("config"));
    const int dim = w.config.model_dim();
    const int d = w.config.head_dim;
    const auto& layers = j.at("layers");
    if (!layers.is_array() || static_cast<int>(layers.size()) != w.config.num_layers) {
      throw ShapeError("weights: layer count does not match config");
    }
    for (int l = 0; l < w.config.num_layers; ++l) {
      const auto& lj = layers[l];
      const auto& heads = lj.at("heads");
      if (!heads.is_array() || static_cast<int>(heads.size()) != w.config.num_heads) {
        throw ShapeError("weights: head count does not match config in layer " + std::to_string(l));
      }
      LayerWeights layer;
      for (int h = 0; h < w.config.num_heads; ++h) {
        const std::string tag = "head " + to_string(HeadIndex{l, h});
        layer.heads.push_back({matrix_from_json(heads[h].at("wq"), dim, d, tag + " wq"),
                               matrix_from_json(heads[h].at("wk"), dim, d, tag + " wk"),
                               matrix_from_json(heads[h].at("wv"), dim, d, tag + " wv")});
      }
      layer.wo = matrix_from_json(lj.at("wo"), dim, dim, "layer " + std::to_string(l) + " wo");
      w.layers.push_back(std::move(layer));
    }
    w.embedding = matrix_from_json(j.at("embedding"), w.config.vocab_size, dim, "embedding");
    w.readout = vector_from_json(j.at("readout"), dim, "readout");
  } catch (const json::exception& e) {
    throw ConfigError(std::string("weights: ") + e.what());
  }
  w.validate();
  return w;
}

void save_weights(const DecoderWeights& weights, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << weights_to_json(weights).dump() << '\n';
}

DecoderWeights load_weights(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read model file " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("model file " + path.string() + ": " + e.what());
  }
  return weights_from_json(j);
}

std::string model_hash(const DecoderWeights& weights) {
  return sha256_hex(weights_to_json(weights).dump());
}

}  // namespace cai
