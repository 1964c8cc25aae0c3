#include "cai/cli/run_config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "cai/errors.hpp"
#include "cai/rng.hpp"

namespace cai::cli {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::string& where, std::initializer_list<const char*> known) {
  if (!j.is_object()) throw ConfigError("run config: " + where + " must be an object");
  const std::set<std::string> allowed(known.begin(), known.end());
  for (const auto& item : j.items()) {
    if (!allowed.count(item.key())) {
      throw ConfigError("run config: unknown key \"" + item.key() + "\" in " + where);
    }
  }
}

template <typename T>
void read(const json& j, const char* key, T& into) {
  if (j.contains(key)) into = j.at(key).get<T>();
}

InjectionSite parse_site(const std::string& s) {
  if (s == "all_positions") return InjectionSite::kAllPositions;
  if (s == "last_token") return InjectionSite::kLastToken;
  throw ConfigError("run config: injection must be \"all_positions\" or \"last_token\", got \"" + s + "\"");
}

std::string site_name(InjectionSite site) {
  return site == InjectionSite::kLastToken ? "last_token" : "all_positions";
}

}  // namespace

HarnessSpec RunConfig::harness_spec() const {
  VocabSpec vocab{model.num_objects, model.num_fillers};
  HarnessSpec spec = HarnessSpec::make(model.num_layers, model.num_heads, model.head_dim, vocab, model.slots);
  spec.noise_scale = model.noise_scale;
  return spec;
}

PlantedModelSpec RunConfig::planted_spec() const {
  PlantedModelSpec spec;
  spec.harness = harness_spec();
  spec.num_planted = model.num_planted;
  spec.strength = model.strength;
  return spec;
}

long RunConfig::resolved_top_k(const ModelConfig& m) const {
  return top_k ? *top_k : default_top_k(m);
}

std::vector<long> RunConfig::resolved_k_grid(const ModelConfig& m) const {
  if (!sweep.ks.empty()) return sweep.ks;
  const long all = m.head_count();
  const long k = resolved_top_k(m);
  std::vector<long> grid{0, k / 2, k, all / 4, all / 2, all};
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  return grid;
}

void RunConfig::validate() const {
  if (corpus.probe_scenes < 2 || corpus.eval_scenes < 1) {
    throw ConfigError("run config: corpus.probe_scenes must be >= 2 and eval_scenes >= 1");
  }
  if (search.scenes < 1) throw ConfigError("run config: search.scenes must be >= 1");
  if (top_k && *top_k < 0) throw ConfigError("run config: top_k must be >= 0");
  for (long k : sweep.ks) {
    if (k < 0) throw ConfigError("run config: sweep.ks entries must be >= 0");
  }
  if (sweep.alphas.empty()) throw UsageError("run config: sweep.alphas is empty");
  if (!std::isfinite(alpha)) throw ConfigError("run config: alpha must be finite");
  if (probe.folds < 2 || probe.iterations < 1 || !(probe.lambda > 0.0) || !(probe.learning_rate > 0.0)) {
    throw ConfigError("run config: probe needs folds >= 2, iterations >= 1, lambda > 0, learning_rate > 0");
  }
  if (!model.path) planted_spec().validate();
}

RunConfig run_config_from_json(const json& j) {
  reject_unknown(j, "top level",
                 {"schema_version", "seed", "seeds", "model", "corpus", "search", "probe", "alpha",
                  "top_k", "injection", "sweep", "out"});
  if (!j.contains("schema_version")) throw ConfigError("run config: missing schema_version");
  const int version = j.at("schema_version").get<int>();
  if (version != kRunConfigVersion) {
    throw ConfigError("run config: unsupported schema_version " + std::to_string(version));
  }

  RunConfig c;
  try {
    read(j, "seed", c.seed);
    read(j, "seeds", c.seeds);
    if (j.contains("model")) {
      const json& m = j.at("model");
      reject_unknown(m, "model",
                     {"path", "num_layers", "num_heads", "head_dim", "num_objects", "num_fillers",
                      "slots", "noise_scale", "num_planted", "strength"});
      if (m.contains("path") && !m.at("path").is_null()) {
        c.model.path = m.at("path").get<std::string>();
      }
      read(m, "num_layers", c.model.num_layers);
      read(m, "num_heads", c.model.num_heads);
      read(m, "head_dim", c.model.head_dim);
      read(m, "num_objects", c.model.num_objects);
      read(m, "num_fillers", c.model.num_fillers);
      read(m, "slots", c.model.slots);
      read(m, "noise_scale", c.model.noise_scale);
      read(m, "num_planted", c.model.num_planted);
      read(m, "strength", c.model.strength);
    }
    if (j.contains("corpus")) {
      const json& s = j.at("corpus");
      reject_unknown(s, "corpus", {"probe_scenes", "eval_scenes"});
      read(s, "probe_scenes", c.corpus.probe_scenes);
      read(s, "eval_scenes", c.corpus.eval_scenes);
    }
    if (j.contains("search")) {
      const json& s = j.at("search");
      reject_unknown(s, "search", {"candidates", "scenes", "signed"});
      read(s, "candidates", c.search.candidates);
      read(s, "scenes", c.search.scenes);
      read(s, "signed", c.search.signed_shift);
    }
    if (j.contains("probe")) {
      const json& s = j.at("probe");
      reject_unknown(s, "probe", {"lambda", "iterations", "learning_rate", "folds", "standardize"});
      read(s, "lambda", c.probe.lambda);
      read(s, "iterations", c.probe.iterations);
      read(s, "learning_rate", c.probe.learning_rate);
      read(s, "folds", c.probe.folds);
      read(s, "standardize", c.probe.standardize);
    }
    read(j, "alpha", c.alpha);
    if (j.contains("top_k") && !j.at("top_k").is_null()) c.top_k = j.at("top_k").get<long>();
    if (j.contains("injection")) c.injection = parse_site(j.at("injection").get<std::string>());
    if (j.contains("sweep")) {
      const json& s = j.at("sweep");
      reject_unknown(s, "sweep", {"alphas", "ks"});
      read(s, "alphas", c.sweep.alphas);
      read(s, "ks", c.sweep.ks);
    }
    if (j.contains("out")) c.out = j.at("out").get<std::string>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  }
  c.validate();
  return c;
}

json run_config_to_json(const RunConfig& c) {
  json model{{"path", c.model.path ? json(c.model.path->string()) : json(nullptr)},
             {"num_layers", c.model.num_layers},
             {"num_heads", c.model.num_heads},
             {"head_dim", c.model.head_dim},
             {"num_objects", c.model.num_objects},
             {"num_fillers", c.model.num_fillers},
             {"slots", c.model.slots},
             {"noise_scale", c.model.noise_scale},
             {"num_planted", c.model.num_planted},
             {"strength", c.model.strength}};
  return json{{"schema_version", kRunConfigVersion},
              {"seed", c.seed},
              {"seeds", c.seeds},
              {"model", model},
              {"corpus", {{"probe_scenes", c.corpus.probe_scenes}, {"eval_scenes", c.corpus.eval_scenes}}},
              {"search",
               {{"candidates", c.search.candidates},
                {"scenes", c.search.scenes},
                {"signed", c.search.signed_shift}}},
              {"probe",
               {{"lambda", c.probe.lambda},
                {"iterations", c.probe.iterations},
                {"learning_rate", c.probe.learning_rate},
                {"folds", c.probe.folds},
                {"standardize", c.probe.standardize}}},
              {"alpha", c.alpha},
              {"top_k", c.top_k ? json(*c.top_k) : json(nullptr)},
              {"injection", site_name(c.injection)},
              {"sweep", {{"alphas", c.sweep.alphas}, {"ks", c.sweep.ks}}},
              {"out", c.out.string()}};
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("run config " + path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

StageSeeds stage_seeds(std::uint64_t seed) {
  return {mix_seed(seed, 11), mix_seed(seed, 12), mix_seed(seed, 13), mix_seed(seed, 14)};
}

}  // namespace cai::cli
