#pragma once

// Desk-scale stand-in for caption/non-caption data and a POPE-style
// object-presence benchmark, with a planted model whose designated heads
// attend to the image far more when the caption marker ends the query.
//
// The residual stream is partitioned into named channels (HarnessLayout).
// Visual slots carry a visual flag, an object code and a slot code; text
// tokens carry a text flag and, for object tokens, a text-side object code.
// The planted model routes information through those channels:
//   planted heads (layers < L-2): the marker query pulls attention onto the
//     visual slots; the visual flag is copied into the `look` channel.
//   reader head (L-2, 0): matches the probed object against visual object
//     codes; `look` raises all visual scores; writes object evidence.
//   comparison head (L-1, 0): attends to the last token iff the evidence for
//     its object clears a threshold; writes the `answer` channel.
//   every other head reads and writes only the junk subspace.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cai/intervention.hpp"
#include "cai/model.hpp"
#include "cai/probe.hpp"
#include "cai/query_search.hpp"

namespace cai {

struct VocabSpec {
  int num_objects = 6;
  int num_fillers = 12;

  int marker_token() const { return 0; }
  int filler_token(int i) const { return 1 + i; }
  int object_token(int object) const { return 1 + num_fillers + object; }
  int vocab_size() const { return 1 + num_fillers + num_objects; }
  bool is_object_token(int token) const {
    return token >= 1 + num_fillers && token < vocab_size();
  }
  int object_of(int token) const { return token - 1 - num_fillers; }
  std::string token_name(int token) const;
};

struct HarnessSpec {
  ModelConfig model;
  VocabSpec vocab;
  int slots = 4;               // m, visual tokens per scene
  double noise_scale = 0.3;    // distractor noise on visual embeddings
  int noncaption_length = 4;   // fillers followed by the probed object token

  // Model sized to the vocabulary, slots and the longest query.
  static HarnessSpec make(int num_layers, int num_heads, int head_dim, VocabSpec vocab = {},
                          int slots = 4);
  void validate() const;
};

struct HarnessLayout {
  int bias = 0;
  int visual = 1;
  int text = 2;
  int marker = 3;
  int object_token = 4;
  int look = 5;
  int answer = 6;
  int visual_object = 7;  // num_objects channels
  int text_object = 0;    // num_objects channels
  int slot = 0;           // slots channels
  int evidence = 0;       // num_objects channels
  int junk_begin = 0;
  int junk_end = 0;

  int junk_size() const { return junk_end - junk_begin; }

  // Throws ConfigError when the model is too narrow for the channels.
  static HarnessLayout make(const HarnessSpec& spec);
};

struct SyntheticScene {
  std::uint64_t seed = 0;
  std::vector<int> objects;  // object id per slot
  Matrix embeddings;         // slots x model_dim, unit-norm rows
  double noise_scale = 0.0;

  bool contains(int object) const;
};

// Deterministic in (objects, seed, noise).
SyntheticScene make_scene(const HarnessSpec& spec, std::vector<int> objects, std::uint64_t seed);

struct QueryPair {
  std::vector<int> caption_tokens;     // ends with the marker token
  std::vector<int> noncaption_tokens;  // fillers then the probed object's token
  int probed_object = 0;
  bool gold_yes = false;
};

struct CorpusRecord {
  SyntheticScene scene;
  QueryPair query;

  SequenceInput caption_input() const { return {scene.embeddings, query.caption_tokens}; }
  SequenceInput noncaption_input() const { return {scene.embeddings, query.noncaption_tokens}; }
};

using Corpus = std::vector<CorpusRecord>;

// Caption candidates: short token strings ending in the marker.
QueryCandidateSet default_caption_candidates(const VocabSpec& vocab);

// Yes/no answers alternate, so yes-count is exactly ceil(num_scenes / 2).
Corpus generate_corpus(const HarnessSpec& spec, std::uint64_t seed, int num_scenes,
                       const std::vector<int>& caption_tokens = {});

// Same corpus with every caption query replaced.
Corpus with_caption(Corpus corpus, const std::vector<int>& caption_tokens);

std::vector<ProbePair> probe_pairs(const Corpus& corpus);

// JSON Lines: {scene_seed, objects, caption_tokens, noncaption_tokens, gold}.
void write_corpus(std::ostream& out, const Corpus& corpus);
Corpus read_corpus(std::istream& in, const HarnessSpec& spec);
void save_corpus(const Corpus& corpus, const std::filesystem::path& path);
Corpus load_corpus(const std::filesystem::path& path, const HarnessSpec& spec);

// Hand-set constants of the planted circuit.
struct PlantedCircuit {
  double slot_preference = 1.5;    // spread of marker-driven attention across slots
  double planted_text_bias = 3.0;  // planted heads' default pull toward text
  double look_gain_total = 4.0;    // look-channel gain, split across planted heads
  double reader_match = 6.0;
  double reader_text = 2.0;
  double reader_boost = 2.0;       // visual-score boost per unit of look
  double reader_noise = 0.1;       // junk leaking into reader values
  double compare_gain = 12.0;
  double compare_threshold = 1.0;
  double readout_threshold = 0.5;
  double noise_weight = 0.15;      // query/key scale of non-circuit heads
  double noise_output = 0.5;
  double filler_scale = 2.0;       // norm of filler tokens' junk embedding
};

struct PlantedModelSpec {
  HarnessSpec harness;
  std::vector<HeadIndex> planted;  // explicit set; empty means draw num_planted from the seed
  int num_planted = 4;
  double strength = 6.0;           // marker-query alignment with visual keys
  PlantedCircuit circuit;

  void validate() const;
};

struct PlantedModel {
  DecoderWeights weights;
  std::vector<HeadIndex> planted;  // sorted
  HeadIndex reader;
  HeadIndex comparison;
};

PlantedModel build_planted_model(const PlantedModelSpec& spec, std::uint64_t seed);

struct EvalRecord {
  double logit = 0.0;
  bool predicted_yes = false;
  bool gold_yes = false;
};

struct EvalResult {
  double accuracy = 0.0;
  double f1 = 0.0;
  double yes_rate = 0.0;
  std::vector<EvalRecord> records;
};

// POPE-style scoring on the non-caption queries; logit > 0 answers yes.
EvalResult evaluate(const DecoderWeights& weights, const Corpus& corpus,
                    const InterventionConfig* config = nullptr);

EvalResult score_records(std::vector<EvalRecord> records);

struct SweepCell {
  double alpha = 0.0;
  long k = 0;
  EvalResult result;
};

// One cell per (alpha, K), alpha-major.
std::vector<SweepCell> sweep(const DecoderWeights& weights, const Corpus& corpus,
                             const ProbeArtifact& artifact, std::span<const double> alpha_grid,
                             std::span<const long> k_grid,
                             InjectionSite site = InjectionSite::kAllPositions);

// Highest accuracy; first cell wins ties.
std::size_t argmax_cell(std::span<const SweepCell> cells);

void write_sweep_csv(std::ostream& out, std::span<const SweepCell> cells);  // alpha,k,accuracy,f1,yes_rate

// Greedy multi-step continuation with tied embeddings, one single-step
// forward per token; an intervention applies at every step. Qualitative only.
struct Description {
  std::vector<int> tokens;
  int object_mentions = 0;
  int hallucinated_mentions = 0;  // mentioned objects absent from the scene
};

Description describe_scene(const DecoderWeights& weights, const VocabSpec& vocab,
                           const SyntheticScene& scene, const std::vector<int>& prompt, int steps,
                           const InterventionConfig* config = nullptr);

// K default: ceil(0.098 * L * H), the 100-of-1024 head fraction.
long default_top_k(const ModelConfig& model);

}  // namespace cai
