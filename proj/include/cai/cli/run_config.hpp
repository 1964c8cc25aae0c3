#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cai/harness.hpp"
#include "cai/probe.hpp"

namespace cai::cli {

inline constexpr int kRunConfigVersion = 1;

struct ModelSection {
  std::optional<std::filesystem::path> path;  // load weights instead of planting
  int num_layers = 5;
  int num_heads = 8;
  int head_dim = 8;
  int num_objects = 6;
  int num_fillers = 12;
  int slots = 4;
  double noise_scale = 0.3;
  int num_planted = 4;
  double strength = 6.0;
};

struct CorpusSection {
  int probe_scenes = 100;
  int eval_scenes = 200;
};

struct SearchSection {
  std::vector<std::vector<int>> candidates;  // empty means the harness defaults
  int scenes = 20;
  bool signed_shift = false;
};

struct SweepSection {
  std::vector<double> alphas{-0.5, 0.0, 0.75, 1.5, 3.0};
  std::vector<long> ks;  // empty means {0, K/2, K, LH/4, LH/2, LH}
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::vector<std::uint64_t> seeds;  // pipeline repeats; empty means {seed}
  ModelSection model;
  CorpusSection corpus;
  SearchSection search;
  SvmOptions probe;
  double alpha = 1.5;
  std::optional<long> top_k;  // unset means default_top_k
  InjectionSite injection = InjectionSite::kAllPositions;
  SweepSection sweep;
  std::filesystem::path out = "cai_out";

  HarnessSpec harness_spec() const;
  PlantedModelSpec planted_spec() const;
  long resolved_top_k(const ModelConfig& model) const;
  std::vector<long> resolved_k_grid(const ModelConfig& model) const;
  void validate() const;
};

// Unknown keys anywhere in the document are ConfigErrors.
RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json run_config_to_json(const RunConfig& config);
RunConfig load_run_config(const std::filesystem::path& path);

// Per-stage seeds derived from the run seed.
struct StageSeeds {
  std::uint64_t model;
  std::uint64_t probe_corpus;
  std::uint64_t eval_corpus;
  std::uint64_t classifier;
};
StageSeeds stage_seeds(std::uint64_t seed);

}  // namespace cai::cli
