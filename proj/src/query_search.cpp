#include "cai/query_search.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace cai {

void QueryCandidateSet::validate() const {
  if (candidates.empty()) throw EmptyDatasetError("query search: no candidate queries");
  if (!labels.empty() && labels.size() != candidates.size()) {
    throw ShapeError("query search: label count does not match candidate count");
  }
  for (const auto& c : candidates) {
    if (c.empty()) throw ConfigError("query search: empty candidate query");
  }
}

double attention_shift(const ForwardTrace& caption, const ForwardTrace& non_caption,
                       int num_visual, ShiftMode mode) {
  if (caption.num_visual != num_visual || non_caption.num_visual != num_visual) {
    throw ShapeError("attention_shift: traces do not share a visual prefix of length " +
                     std::to_string(num_visual));
  }
  if (caption.num_layers != non_caption.num_layers || caption.num_heads != non_caption.num_heads) {
    throw ShapeError("attention_shift: traces come from differently shaped models");
  }
  double total = 0.0;
  for (int l = 0; l < caption.num_layers; ++l) {
    for (int h = 0; h < caption.num_heads; ++h) {
      const Matrix& a = caption.attention_at({l, h});
      const Matrix& b = non_caption.attention_at({l, h});
      const auto diff = a.row(a.rows() - 1).head(num_visual) - b.row(b.rows() - 1).head(num_visual);
      total += mode == ShiftMode::kAbsolute ? diff.cwiseAbs().sum() : diff.sum();
    }
  }
  return total;
}

QuerySearchResult best_query_search(const DecoderWeights& weights,
                                    const std::vector<Matrix>& images,
                                    const std::vector<std::vector<int>>& non_caption_queries,
                                    const QueryCandidateSet& candidates, ShiftMode mode) {
  if (images.empty()) throw EmptyDatasetError("query search: empty batch");
  if (images.size() != non_caption_queries.size()) {
    throw PairingError("query search: every image needs exactly one non-caption query");
  }
  candidates.validate();

  const CaptureFlags capture{.attention = true, .hidden = false};
  const auto batch = static_cast<Eigen::Index>(images.size());
  const auto count = static_cast<Eigen::Index>(candidates.size());

  QuerySearchResult result;
  result.scores.per_sample = Matrix::Zero(batch, count);
  for (Eigen::Index b = 0; b < batch; ++b) {
    const int m = static_cast<int>(images[b].rows());
    const ForwardTrace baseline = forward(weights, {images[b], non_caption_queries[b]}, capture);
    for (Eigen::Index j = 0; j < count; ++j) {
      const ForwardTrace trace = forward(weights, {images[b], candidates.candidates[j]}, capture);
      result.scores.per_sample(b, j) = attention_shift(trace, baseline, m, mode);
    }
  }
  result.scores.aggregate = result.scores.per_sample.colwise().sum().transpose();

  Eigen::Index best = 0;
  for (Eigen::Index j = 1; j < count; ++j) {
    if (result.scores.aggregate[j] < result.scores.aggregate[best]) best = j;
  }
  result.best_index = static_cast<std::size_t>(best);
  return result;
}

std::vector<std::size_t> rank_candidates(const ShiftScore& scores) {
  std::vector<std::size_t> order(static_cast<std::size_t>(scores.aggregate.size()));
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores.aggregate[static_cast<Eigen::Index>(a)] < scores.aggregate[static_cast<Eigen::Index>(b)];
  });
  return order;
}

}  // namespace cai
