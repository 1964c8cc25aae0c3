#pragma once

// Caption-sensitive head probing.
//
// For every head, the last token's attention row is re-computed with all text
// positions masked out, so the head output only mixes visual value rows. A
// linear max-margin classifier per head then tells caption runs from
// non-caption runs on those masked outputs; the best-separating heads are the
// caption-sensitive ones. Shift vectors come from the unmasked outputs.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cai/model.hpp"

namespace cai {

struct MaskedAttention {
  Vector weights;  // last row after masking, length m + n; text positions are exactly 0
  Vector output;   // head_dim
};

// `hidden` is the head's layer input H^l (rows = m + n).
MaskedAttention masked_last_token_attention(const HeadWeights& head, const Matrix& hidden,
                                            int num_visual);

Vector masked_last_token_output(const DecoderWeights& weights, const Matrix& hidden, int num_visual,
                                const HeadIndex& index);
Vector masked_last_token_output(const DecoderWeights& weights, const SequenceInput& input,
                                const HeadIndex& index);

struct ProbePair {
  SequenceInput caption;
  SequenceInput non_caption;
};

struct HeadProbeData {
  Matrix features;           // 2B x d; row 2b is the caption run, row 2b+1 the non-caption run
  std::vector<int> labels;   // 1 = caption, 0 = non-caption
  Matrix caption_outputs;    // B x d, unmasked last-token outputs
  Matrix non_caption_outputs;
};

struct ProbeDataset {
  int num_layers = 0;
  int num_heads = 0;
  int head_dim = 0;
  std::size_t pairs = 0;
  std::vector<HeadProbeData> heads;  // flat head index

  const HeadProbeData& at(const HeadIndex& index) const {
    return heads[index.layer * num_heads + index.head];
  }
};

ProbeDataset build_probe_dataset(const DecoderWeights& weights, std::span<const ProbePair> pairs);

struct SvmOptions {
  double lambda = 1e-2;
  int iterations = 500;
  double learning_rate = 0.1;  // step at iteration t is learning_rate / t
  int folds = 2;
  std::uint64_t seed = 0;      // fold assignment
  bool standardize = true;     // per fold, from training-fold statistics
};

struct LinearSvm {
  Vector weights;
  double bias = 0.0;
  Vector mean;   // standardization applied before the linear score
  Vector scale;

  double decision(const Eigen::Ref<const Eigen::RowVectorXd>& x) const;
  int predict(const Eigen::Ref<const Eigen::RowVectorXd>& x) const { return decision(x) > 0.0 ? 1 : 0; }
};

// Hinge loss + L2, full-batch subgradient descent from zero.
LinearSvm fit_linear_svm(const Matrix& points, std::span<const int> labels,
                         const SvmOptions& options);

// Fold id per point, stratified by label.
std::vector<int> stratified_folds(std::span<const int> labels, int folds, std::uint64_t seed);

// Mean held-out accuracy over the folds.
double train_head_classifier(const Matrix& points, std::span<const int> labels,
                             const SvmOptions& options = {});

Matrix probe_accuracies(const ProbeDataset& dataset, const SvmOptions& options = {});

struct HeadRanking {
  Matrix accuracies;              // L x H
  std::vector<HeadIndex> order;   // every head, best first
  std::vector<HeadIndex> top;     // first min(K, L*H) of order
  std::string model_hash;

  int k() const { return static_cast<int>(top.size()); }
};

// Descending accuracy; ties by (layer, head) ascending. Negative K is a config error.
HeadRanking rank_heads(const Matrix& accuracies, long k);

struct ShiftVectorBank {
  int num_layers = 0;
  int num_heads = 0;
  int head_dim = 0;
  std::vector<Vector> shifts;  // flat head index
  std::string model_hash;

  const Vector& at(const HeadIndex& index) const { return shifts[index.layer * num_heads + index.head]; }
};

ShiftVectorBank compute_shift_vectors(const ProbeDataset& dataset);

struct ProbeArtifact {
  std::string model_hash;
  Matrix accuracies;
  std::vector<HeadIndex> top_k;
  ShiftVectorBank bank;
  SvmOptions classifier;
  std::string loss = "hinge";

  HeadRanking ranking(long k) const;
  HeadRanking ranking() const { return ranking(static_cast<long>(top_k.size())); }
};

// Full probe: dataset, per-head accuracies, ranking and shift vectors.
ProbeArtifact run_probe(const DecoderWeights& weights, std::span<const ProbePair> pairs, long k,
                        const SvmOptions& options = {});

nlohmann::json probe_artifact_to_json(const ProbeArtifact& artifact);
ProbeArtifact probe_artifact_from_json(const nlohmann::json& j);
void save_probe_artifact(const ProbeArtifact& artifact, const std::filesystem::path& path);
ProbeArtifact load_probe_artifact(const std::filesystem::path& path);

}  // namespace cai
