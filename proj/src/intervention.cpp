#include "cai/intervention.hpp"

#include <algorithm>
#include <chrono>
#include <limits>
#include <vector>

namespace cai {

InterventionConfig build_gate(const HeadRanking& ranking, const ShiftVectorBank& bank, double alpha,
                              InjectionSite site) {
  if (ranking.model_hash != bank.model_hash) {
    throw ProvenanceError("build_gate: ranking model hash '" + ranking.model_hash +
                          "' does not match shift bank hash '" + bank.model_hash + "'");
  }
  if (ranking.accuracies.rows() != bank.num_layers || ranking.accuracies.cols() != bank.num_heads) {
    throw ShapeError("build_gate: ranking and shift bank cover different head grids");
  }
  if (!std::isfinite(alpha)) throw ConfigError("build_gate: alpha must be finite");
  InterventionConfig config;
  config.alpha = alpha;
  config.gated = ranking.top;
  config.gate = Matrix::Zero(bank.num_layers, bank.num_heads);
  for (const auto& index : ranking.top) config.gate(index.layer, index.head) = 1.0;
  config.bank = bank;
  config.site = site;
  return config;
}

InterventionConfig config_from_artifact(const ProbeArtifact& artifact, long k, double alpha,
                                        InjectionSite site) {
  return build_gate(artifact.ranking(k), artifact.bank, alpha, site);
}

InterventionHook make_hook(const ModelConfig& model, const InterventionConfig& config) {
  if (config.bank.num_layers != model.num_layers || config.bank.num_heads != model.num_heads) {
    throw ShapeError("intervention: shift bank grid does not match the model");
  }
  std::vector<HeadShift> shifts;
  shifts.reserve(config.gated.size());
  for (const auto& index : config.gated) {
    if (!model.contains(index)) {
      throw ConfigError("intervention: head " + to_string(index) + " is outside the model");
    }
    shifts.push_back({index, config.bank.at(index)});
  }
  return InterventionHook(model, config.alpha, std::move(shifts), config.site);
}

ForwardTrace intervened_forward(const DecoderWeights& weights, const SequenceInput& input,
                                const InterventionConfig& config, CaptureFlags capture) {
  const InterventionHook hook = make_hook(weights.config, config);
  return forward(weights, input, capture, &hook);
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

}  // namespace

InterventionReport report_intervention(const DecoderWeights& weights, const SequenceInput& input,
                                       const InterventionConfig& config, int repetitions) {
  const InterventionHook hook = make_hook(weights.config, config);
  const CaptureFlags capture{.attention = false, .hidden = true};
  const ForwardTrace base = forward(weights, input, capture);
  const ForwardTrace hooked = forward(weights, input, capture, &hook);

  InterventionReport report;
  report.gated = config.gated;
  for (const auto& index : config.gated) {
    report.applied_shift_norms.push_back(std::abs(config.alpha) * config.bank.at(index).norm());
  }
  for (int l = 0; l < weights.config.num_layers; ++l) {
    report.layer_delta_norms.push_back((hooked.hidden[l + 1] - base.hidden[l + 1]).norm());
  }

  if (repetitions > 0) {
    const CaptureFlags none{.attention = false, .hidden = false};
    volatile double sink = 0.0;
    double base_total = 0.0;
    double hooked_total = 0.0;
    for (int r = 0; r < repetitions; ++r) {
      auto start = Clock::now();
      sink = sink + forward(weights, input, none).answer_logit;
      base_total += seconds_since(start);
      start = Clock::now();
      sink = sink + forward(weights, input, none, &hook).answer_logit;
      hooked_total += seconds_since(start);
    }
    report.baseline_seconds = base_total / repetitions;
    report.intervened_seconds = hooked_total / repetitions;
  }
  return report;
}

OverheadMeasurement measure_overhead(const DecoderWeights& weights,
                                     std::span<const SequenceInput> inputs,
                                     const InterventionConfig& config, int trials) {
  const InterventionHook hook = make_hook(weights.config, config);
  const CaptureFlags none{.attention = false, .hidden = false};
  OverheadMeasurement best{std::numeric_limits<double>::infinity(),
                           std::numeric_limits<double>::infinity()};
  volatile double sink = 0.0;
  const auto timed_pass = [&](const InterventionHook* h) {
    const auto start = Clock::now();
    for (const auto& input : inputs) sink = sink + forward(weights, input, none, h).answer_logit;
    return seconds_since(start);
  };
  std::vector<double> ratios;
  for (int t = 0; t < trials; ++t) {
    double base = 0.0;
    double hooked = 0.0;
    // even trials: baseline first; odd trials: intervened first
    if (t % 2 == 0) {
      base = timed_pass(nullptr);
      hooked = timed_pass(&hook);
    } else {
      hooked = timed_pass(&hook);
      base = timed_pass(nullptr);
    }
    best.baseline_seconds = std::min(best.baseline_seconds, base);
    best.intervened_seconds = std::min(best.intervened_seconds, hooked);
    ratios.push_back(hooked / base);
  }
  if (!ratios.empty()) {
    const auto mid = ratios.begin() + static_cast<std::ptrdiff_t>(ratios.size() / 2);
    std::nth_element(ratios.begin(), mid, ratios.end());
    best.paired_ratio = *mid;
  }
  return best;
}

}  // namespace cai
