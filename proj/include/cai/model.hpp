#pragma once

// Toy L-layer, H-head causal decoder over a visual-embedding prefix plus text
// tokens. Attention-only residual blocks:
//   H^{l+1} = H^l + concat_h(O_(l,h)) * W_o^l
// with an optional hook that adds alpha * S_(l,h) to gated heads' outputs
// before the W_o projection.

#include <compare>
#include <cstddef>
#include <string>
#include <vector>

#include "cai/tensor.hpp"

namespace cai {

struct HeadIndex {
  int layer = 0;
  int head = 0;

  auto operator<=>(const HeadIndex&) const = default;
};

std::string to_string(const HeadIndex& index);  // "l:h"

struct ModelConfig {
  int num_layers = 1;
  int num_heads = 1;
  int head_dim = 1;
  int vocab_size = 1;
  int max_seq_len = 2;

  int model_dim() const { return num_heads * head_dim; }
  int head_count() const { return num_layers * num_heads; }
  int flat_index(const HeadIndex& index) const { return index.layer * num_heads + index.head; }
  bool contains(const HeadIndex& index) const {
    return index.layer >= 0 && index.layer < num_layers && index.head >= 0 &&
           index.head < num_heads;
  }

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct HeadWeights {
  Matrix wq;  // model_dim x head_dim
  Matrix wk;
  Matrix wv;
};

struct LayerWeights {
  std::vector<HeadWeights> heads;
  Matrix wo;  // (num_heads * head_dim) x model_dim; rows [h*d, (h+1)*d) belong to head h
};

struct DecoderWeights {
  ModelConfig config;
  std::vector<LayerWeights> layers;
  Matrix embedding;  // vocab_size x model_dim
  Vector readout;    // model_dim

  static DecoderWeights zeros(const ModelConfig& config);

  const HeadWeights& head(const HeadIndex& index) const {
    return layers[index.layer].heads[index.head];
  }
  HeadWeights& head(const HeadIndex& index) { return layers[index.layer].heads[index.head]; }

  // Throws ShapeError on inconsistent dimensions, ConfigError on non-finite entries.
  void validate() const;
};

struct SequenceInput {
  Matrix visual;            // m x model_dim
  std::vector<int> tokens;  // n token ids

  int num_visual() const { return static_cast<int>(visual.rows()); }
  int num_text() const { return static_cast<int>(tokens.size()); }
  int length() const { return num_visual() + num_text(); }
};

struct CaptureFlags {
  bool attention = true;
  bool hidden = true;
};

enum class InjectionSite {
  kAllPositions,
  kLastToken,
};

struct HeadShift {
  HeadIndex head;
  Vector shift;  // head_dim
};

// Additive intervention applied inside forward(). Owns its shift vectors and
// is bound to one model shape at construction.
class InterventionHook {
 public:
  // Throws ConfigError for heads outside the model or duplicated heads,
  // ShapeError for shift vectors that are not head_dim long.
  InterventionHook(const ModelConfig& config, double alpha, std::vector<HeadShift> shifts,
                   InjectionSite site = InjectionSite::kAllPositions);

  const ModelConfig& config() const { return config_; }
  double alpha() const { return alpha_; }
  InjectionSite site() const { return site_; }
  const std::vector<HeadShift>& shifts() const { return shifts_; }
  bool is_identity() const { return shifts_.empty() || alpha_ == 0.0; }
  int min_layer() const;

  // Shift for (l,h), or nullptr when the head is not gated.
  const Vector* find(const HeadIndex& index) const;
  // alpha * shift as a row, precomputed at construction.
  const Eigen::RowVectorXd* scaled(const HeadIndex& index) const;

 private:
  ModelConfig config_;
  double alpha_;
  std::vector<HeadShift> shifts_;
  InjectionSite site_;
  std::vector<int> lookup_;  // flat head index -> position in shifts_, or -1
  std::vector<Eigen::RowVectorXd> scaled_;
};

struct ForwardTrace {
  int num_layers = 0;
  int num_heads = 0;
  int num_visual = 0;
  int num_text = 0;

  std::vector<Matrix> attention;     // per flat head index; empty unless captured
  std::vector<Vector> last_outputs;  // per flat head index; O_(l,h) at the last position, as projected
  std::vector<Matrix> hidden;        // H^1 .. H^{L+1}; empty unless captured
  Vector final_hidden;
  double answer_logit = 0.0;

  int length() const { return num_visual + num_text; }
  const Matrix& attention_at(const HeadIndex& index) const;
  const Vector& last_output(const HeadIndex& index) const {
    return last_outputs[index.layer * num_heads + index.head];
  }
  bool has_attention() const { return !attention.empty(); }
};

struct AttentionResult {
  Matrix weights;  // A
  Matrix output;   // O = A V
};

/// Scaled dot-product scores Q K^T / sqrt(d), causally masked when asked.
Matrix attention_scores(const Matrix& q, const Matrix& k, bool causal);

AttentionResult single_head_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                                      bool causal);

/// Validates the input and builds H^1 = concat(V, embed(T)).
Matrix initial_hidden(const DecoderWeights& weights, const SequenceInput& input);

ForwardTrace forward(const DecoderWeights& weights, const SequenceInput& input,
                     CaptureFlags capture = {}, const InterventionHook* hook = nullptr);

}  // namespace cai
