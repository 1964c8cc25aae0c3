#pragma once

// Visual-attention analysis: how much of the last token's attention lands on
// the m visual positions, accumulated over a dataset, and the relative change
// between caption and non-caption queries.

#include <cmath>
#include <cstddef>
#include <iosfwd>
#include <span>
#include <string>

#include "cai/model.hpp"

namespace cai {

// L x H grid; entry (l,h) = sum of the last attention row over positions [0, m).
Matrix visual_attention_sum(const ForwardTrace& trace, int num_visual);

struct VisualAttentionProfile {
  Matrix sums;  // L x H
  std::size_t sample_count = 0;
};

// Elementwise sum of per-trace grids. Each trace carries its own m.
VisualAttentionProfile accumulate_profile(std::span<const ForwardTrace> traces);

// Merges two partial profiles over disjoint samples.
VisualAttentionProfile merge_profiles(const VisualAttentionProfile& a,
                                      const VisualAttentionProfile& b);

struct ChangeRateReport {
  Matrix delta;        // S^cap - S^non, L x H
  Matrix head_rates;   // delta / S^non; NaN where S^non == 0
  Vector layer_rates;  // sum_h delta / sum_h S^non; NaN where the denominator is 0
  double fraction_enhanced = 0.0;         // over defined head rates
  double fraction_layers_enhanced = 0.0;  // over defined layer rates

  static bool defined(double rate) { return !std::isnan(rate); }
};

ChangeRateReport change_rates(const VisualAttentionProfile& caption,
                              const VisualAttentionProfile& non_caption);

// CSV writers. Floats use 9 significant digits; undefined entries are `null`.
void write_head_csv(std::ostream& out, const Matrix& grid);      // layer,head,value
void write_layer_csv(std::ostream& out, const Vector& rates);    // layer,rate
std::string format_value(double v);

}  // namespace cai
