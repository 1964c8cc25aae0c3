#pragma once

// JSON form of DecoderWeights (schema: docs/weights.schema.json).
//   {config, layers: [{heads: [{wq, wk, wv}], wo}], embedding, readout}
// Matrices are flat row-major float arrays; shapes come from config.

#include <filesystem>
#include <string>

#include <json.hpp>

#include "cai/model.hpp"

namespace cai {

nlohmann::json config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const nlohmann::json& j);

nlohmann::json weights_to_json(const DecoderWeights& weights);
DecoderWeights weights_from_json(const nlohmann::json& j);

void save_weights(const DecoderWeights& weights, const std::filesystem::path& path);
DecoderWeights load_weights(const std::filesystem::path& path);

// SHA-256 of the canonical (compact) JSON serialization.
std::string model_hash(const DecoderWeights& weights);

nlohmann::json matrix_to_json(const Matrix& m);  // flat row-major
Matrix matrix_from_json(const nlohmann::json& j, Eigen::Index rows, Eigen::Index cols,
                        const std::string& what);
nlohmann::json vector_to_json(const Vector& v);
Vector vector_from_json(const nlohmann::json& j, Eigen::Index size, const std::string& what);

}  // namespace cai
