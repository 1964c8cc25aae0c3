#include "cai/analysis.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>

namespace cai {

Matrix visual_attention_sum(const ForwardTrace& trace, int num_visual) {
  if (!trace.has_attention()) throw ShapeError("visual_attention_sum: attention not captured");
  if (num_visual < 0 || num_visual > trace.length()) {
    throw ShapeError("visual_attention_sum: m = " + std::to_string(num_visual) +
                     " exceeds sequence length " + std::to_string(trace.length()));
  }
  Matrix grid(trace.num_layers, trace.num_heads);
  for (int l = 0; l < trace.num_layers; ++l) {
    for (int h = 0; h < trace.num_heads; ++h) {
      const Matrix& a = trace.attention_at({l, h});
      grid(l, h) = a.row(a.rows() - 1).head(num_visual).sum();
    }
  }
  return grid;
}

VisualAttentionProfile accumulate_profile(std::span<const ForwardTrace> traces) {
  if (traces.empty()) throw EmptyDatasetError("accumulate_profile: no traces");
  VisualAttentionProfile profile;
  profile.sums = Matrix::Zero(traces.front().num_layers, traces.front().num_heads);
  for (const auto& trace : traces) {
    const Matrix grid = visual_attention_sum(trace, trace.num_visual);
    if (grid.rows() != profile.sums.rows() || grid.cols() != profile.sums.cols()) {
      throw ShapeError("accumulate_profile: traces come from differently shaped models");
    }
    profile.sums += grid;
  }
  profile.sample_count = traces.size();
  return profile;
}

VisualAttentionProfile merge_profiles(const VisualAttentionProfile& a,
                                      const VisualAttentionProfile& b) {
  if (a.sums.rows() != b.sums.rows() || a.sums.cols() != b.sums.cols()) {
    throw ShapeError("merge_profiles: grid shapes differ");
  }
  return {a.sums + b.sums, a.sample_count + b.sample_count};
}

ChangeRateReport change_rates(const VisualAttentionProfile& caption,
                              const VisualAttentionProfile& non_caption) {
  if (caption.sums.rows() != non_caption.sums.rows() ||
      caption.sums.cols() != non_caption.sums.cols()) {
    throw ShapeError("change_rates: profile grids differ in shape");
  }
  if (caption.sample_count != non_caption.sample_count) {
    throw ShapeError("change_rates: profiles have different sample counts");
  }
  constexpr double kUndefined = std::numeric_limits<double>::quiet_NaN();
  const Matrix& cap = caption.sums;
  const Matrix& non = non_caption.sums;

  ChangeRateReport report;
  report.delta = cap - non;
  report.head_rates.resize(cap.rows(), cap.cols());
  std::size_t defined = 0;
  std::size_t enhanced = 0;
  for (Eigen::Index l = 0; l < cap.rows(); ++l) {
    for (Eigen::Index h = 0; h < cap.cols(); ++h) {
      if (non(l, h) > 0.0) {
        const double rate = report.delta(l, h) / non(l, h);
        report.head_rates(l, h) = rate;
        ++defined;
        if (rate > 0.0) ++enhanced;
      } else {
        report.head_rates(l, h) = kUndefined;
      }
    }
  }
  report.fraction_enhanced = defined == 0 ? 0.0 : static_cast<double>(enhanced) / defined;

  report.layer_rates.resize(cap.rows());
  std::size_t layers_defined = 0;
  std::size_t layers_enhanced = 0;
  for (Eigen::Index l = 0; l < cap.rows(); ++l) {
    const double denominator = non.row(l).sum();
    if (denominator > 0.0) {
      report.layer_rates[l] = report.delta.row(l).sum() / denominator;
      ++layers_defined;
      if (report.layer_rates[l] > 0.0) ++layers_enhanced;
    } else {
      report.layer_rates[l] = kUndefined;
    }
  }
  report.fraction_layers_enhanced =
      layers_defined == 0 ? 0.0 : static_cast<double>(layers_enhanced) / layers_defined;
  return report;
}

std::string format_value(double v) {
  if (std::isnan(v)) return "null";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

void write_head_csv(std::ostream& out, const Matrix& grid) {
  out << "layer,head,value\n";
  for (Eigen::Index l = 0; l < grid.rows(); ++l) {
    for (Eigen::Index h = 0; h < grid.cols(); ++h) {
      out << l << ',' << h << ',' << format_value(grid(l, h)) << '\n';
    }
  }
}

void write_layer_csv(std::ostream& out, const Vector& rates) {
  out << "layer,rate\n";
  for (Eigen::Index l = 0; l < rates.size(); ++l) out << l << ',' << format_value(rates[l]) << '\n';
}

}  // namespace cai
