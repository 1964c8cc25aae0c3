#include "cai/model.hpp"

#include <algorithm>
#include <cmath>

namespace cai {

std::string to_string(const HeadIndex& index) {
  return std::to_string(index.layer) + ":" + std::to_string(index.head);
}

void ModelConfig::validate() const {
  if (num_layers < 1 || num_heads < 1 || head_dim < 1 || vocab_size < 1) {
    throw ConfigError("model config: all counts must be >= 1");
  }
  if (max_seq_len < 2) throw ConfigError("model config: max_seq_len must be >= 2");
}

DecoderWeights DecoderWeights::zeros(const ModelConfig& config) {
  config.validate();
  const int dim = config.model_dim();
  DecoderWeights w;
  w.config = config;
  w.layers.resize(config.num_layers);
  for (auto& layer : w.layers) {
    layer.heads.resize(config.num_heads);
    for (auto& head : layer.heads) {
      head.wq = Matrix::Zero(dim, config.head_dim);
      head.wk = Matrix::Zero(dim, config.head_dim);
      head.wv = Matrix::Zero(dim, config.head_dim);
    }
    layer.wo = Matrix::Zero(dim, dim);
  }
  w.embedding = Matrix::Zero(config.vocab_size, dim);
  w.readout = Vector::Zero(dim);
  return w;
}

namespace {

void expect_shape(const Matrix& m, Eigen::Index rows, Eigen::Index cols, const std::string& what) {
  if (m.rows() != rows || m.cols() != cols) {
    throw ShapeError(what + ": expected " + shape_string(rows, cols) + ", got " +
                     shape_string(m.rows(), m.cols()));
  }
  if (!m.allFinite()) throw ConfigError(what + ": non-finite entry");
}

}  // namespace

void DecoderWeights::validate() const {
  config.validate();
  const int dim = config.model_dim();
  const int d = config.head_dim;
  if (static_cast<int>(layers.size()) != config.num_layers) {
    throw ShapeError("weights: layer count does not match config");
  }
  for (int l = 0; l < config.num_layers; ++l) {
    const auto& layer = layers[l];
    if (static_cast<int>(layer.heads.size()) != config.num_heads) {
      throw ShapeError("weights: head count does not match config in layer " + std::to_string(l));
    }
    for (int h = 0; h < config.num_heads; ++h) {
      const std::string tag = "head " + to_string(HeadIndex{l, h});
      expect_shape(layer.heads[h].wq, dim, d, tag + " wq");
      expect_shape(layer.heads[h].wk, dim, d, tag + " wk");
      expect_shape(layer.heads[h].wv, dim, d, tag + " wv");
    }
    expect_shape(layer.wo, dim, dim, "layer " + std::to_string(l) + " wo");
  }
  expect_shape(embedding, config.vocab_size, dim, "embedding");
  if (readout.size() != dim) throw ShapeError("readout: expected length " + std::to_string(dim));
  if (!readout.allFinite()) throw ConfigError("readout: non-finite entry");
}

InterventionHook::InterventionHook(const ModelConfig& config, double alpha,
                                   std::vector<HeadShift> shifts, InjectionSite site)
    : config_(config), alpha_(alpha), shifts_(std::move(shifts)), site_(site) {
  if (!std::isfinite(alpha_)) throw ConfigError("intervention: alpha must be finite");
  lookup_.assign(config_.head_count(), -1);
  for (std::size_t i = 0; i < shifts_.size(); ++i) {
    const auto& s = shifts_[i];
    if (!config_.contains(s.head)) {
      throw ConfigError("intervention: head " + to_string(s.head) + " is outside the model");
    }
    if (s.shift.size() != config_.head_dim) {
      throw ShapeError("intervention: shift for head " + to_string(s.head) + " has length " +
                       std::to_string(s.shift.size()) + ", expected " +
                       std::to_string(config_.head_dim));
    }
    int& slot = lookup_[config_.flat_index(s.head)];
    if (slot >= 0) throw ConfigError("intervention: head " + to_string(s.head) + " listed twice");
    slot = static_cast<int>(i);
    scaled_.push_back(alpha_ * s.shift.transpose());
  }
}

int InterventionHook::min_layer() const {
  int best = config_.num_layers;
  for (const auto& s : shifts_) best = std::min(best, s.head.layer);
  return best;
}

const Vector* InterventionHook::find(const HeadIndex& index) const {
  const int slot = lookup_[config_.flat_index(index)];
  return slot < 0 ? nullptr : &shifts_[slot].shift;
}

const Eigen::RowVectorXd* InterventionHook::scaled(const HeadIndex& index) const {
  const int slot = lookup_[config_.flat_index(index)];
  return slot < 0 ? nullptr : &scaled_[slot];
}

const Matrix& ForwardTrace::attention_at(const HeadIndex& index) const {
  if (attention.empty()) throw ShapeError("trace: attention weights were not captured");
  return attention[index.layer * num_heads + index.head];
}

Matrix attention_scores(const Matrix& q, const Matrix& k, bool causal) {
  if (q.cols() != k.cols()) {
    throw ShapeError("attention: Q is " + shape_string(q.rows(), q.cols()) + ", K is " +
                     shape_string(k.rows(), k.cols()));
  }
  Matrix scores = q * k.transpose();
  scores /= std::sqrt(static_cast<double>(q.cols()));
  if (causal) apply_causal_mask(scores);
  return scores;
}

AttentionResult single_head_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                                      bool causal) {
  if (q.rows() != k.rows() || k.rows() != v.rows()) {
    throw ShapeError("attention: Q, K, V row counts differ");
  }
  AttentionResult r;
  r.weights = row_softmax(attention_scores(q, k, causal));
  r.output = r.weights * v;
  return r;
}

Matrix initial_hidden(const DecoderWeights& weights, const SequenceInput& input) {
  const auto& cfg = weights.config;
  const int m = input.num_visual();
  const int n = input.num_text();
  if (m < 1 || n < 1) throw ShapeError("input: need at least one visual and one text token");
  if (m + n > cfg.max_seq_len) {
    throw ShapeError("input: sequence length " + std::to_string(m + n) + " exceeds max_seq_len " +
                     std::to_string(cfg.max_seq_len));
  }
  if (input.visual.cols() != cfg.model_dim()) {
    throw ShapeError("input: visual embeddings have " + std::to_string(input.visual.cols()) +
                     " columns, model_dim is " + std::to_string(cfg.model_dim()));
  }
  Matrix x(m + n, cfg.model_dim());
  x.topRows(m) = input.visual;
  for (int t = 0; t < n; ++t) {
    const int id = input.tokens[t];
    if (id < 0 || id >= cfg.vocab_size) {
      throw ConfigError("input: token id " + std::to_string(id) + " outside vocabulary");
    }
    x.row(m + t) = weights.embedding.row(id);
  }
  return x;
}

ForwardTrace forward(const DecoderWeights& weights, const SequenceInput& input,
                     CaptureFlags capture, const InterventionHook* hook) {
  const auto& cfg = weights.config;
  if (hook != nullptr && !(hook->config() == cfg)) {
    throw ConfigError("forward: intervention hook was built for a different model shape");
  }
  const bool intervene = hook != nullptr && !hook->is_identity();

  Matrix x = initial_hidden(weights, input);
  const Eigen::Index n = x.rows();
  const int d = cfg.head_dim;

  ForwardTrace trace;
  trace.num_layers = cfg.num_layers;
  trace.num_heads = cfg.num_heads;
  trace.num_visual = input.num_visual();
  trace.num_text = input.num_text();
  trace.last_outputs.resize(cfg.head_count());
  if (capture.attention) trace.attention.resize(cfg.head_count());
  if (capture.hidden) {
    trace.hidden.reserve(cfg.num_layers + 1);
    trace.hidden.push_back(x);
  }

  Matrix concat(n, cfg.model_dim());
  for (int l = 0; l < cfg.num_layers; ++l) {
    const auto& layer = weights.layers[l];
    for (int h = 0; h < cfg.num_heads; ++h) {
      const auto& hw = layer.heads[h];
      const Matrix q = x * hw.wq;
      const Matrix k = x * hw.wk;
      const Matrix v = x * hw.wv;
      AttentionResult r = single_head_attention(q, k, v, /*causal=*/true);

      const HeadIndex index{l, h};
      if (intervene) {
        if (const Eigen::RowVectorXd* delta = hook->scaled(index)) {
          if (hook->site() == InjectionSite::kAllPositions) {
            r.output.rowwise() += *delta;
          } else {
            r.output.row(n - 1) += *delta;
          }
        }
      }
      const int flat = cfg.flat_index(index);
      trace.last_outputs[flat] = r.output.row(n - 1).transpose();
      concat.middleCols(static_cast<Eigen::Index>(h) * d, d) = r.output;
      if (capture.attention) trace.attention[flat] = std::move(r.weights);
    }
    x.noalias() += concat * layer.wo;
    if (capture.hidden) trace.hidden.push_back(x);
  }

  trace.final_hidden = x.row(n - 1).transpose();
  trace.answer_logit = weights.readout.dot(trace.final_hidden);
  return trace;
}

}  // namespace cai
