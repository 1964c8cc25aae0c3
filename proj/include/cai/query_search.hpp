#pragma once

// Best caption-query search: for every candidate caption query, measure how
// far the last token's visual attention moves away from the non-caption run
// on the same image, summed over heads and samples, and keep the candidate
// with the smallest total.

#include <string>
#include <vector>

#include "cai/model.hpp"

namespace cai {

struct QueryCandidateSet {
  std::vector<std::vector<int>> candidates;
  std::vector<std::string> labels;

  std::size_t size() const { return candidates.size(); }
  void validate() const;
};

enum class ShiftMode {
  kAbsolute,  // L1 of the restricted difference
  kSigned,    // plain sum of the restricted difference
};

// Sum over (l,h) and visual positions i < m of A[last][i] - A'[last][i]
// (absolute values in kAbsolute mode).
double attention_shift(const ForwardTrace& caption, const ForwardTrace& non_caption,
                       int num_visual, ShiftMode mode = ShiftMode::kAbsolute);

struct ShiftScore {
  Matrix per_sample;  // B x J
  Vector aggregate;   // J; column sums of per_sample
};

struct QuerySearchResult {
  std::size_t best_index = 0;
  ShiftScore scores;
};

// images[b] is the visual prefix of sample b, non_caption_queries[b] its query.
// Ties go to the lowest candidate index.
QuerySearchResult best_query_search(const DecoderWeights& weights,
                                    const std::vector<Matrix>& images,
                                    const std::vector<std::vector<int>>& non_caption_queries,
                                    const QueryCandidateSet& candidates,
                                    ShiftMode mode = ShiftMode::kAbsolute);

// Candidate indices ordered by ascending aggregate shift (stable on ties).
std::vector<std::size_t> rank_candidates(const ShiftScore& scores);

}  // namespace cai
