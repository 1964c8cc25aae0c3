#pragma once

// Inference-time intervention: gated heads contribute O + alpha * S to the
// W_o projection, where S is the head's caption-vs-non-caption shift vector.

#include <span>
#include <string>
#include <vector>

#include "cai/model.hpp"
#include "cai/probe.hpp"

namespace cai {

struct InterventionConfig {
  double alpha = 1.5;
  std::vector<HeadIndex> gated;  // ranking's top-K, best first
  Matrix gate;                   // L x H indicator (1.0 on gated heads)
  ShiftVectorBank bank;
  InjectionSite site = InjectionSite::kAllPositions;

  int k() const { return static_cast<int>(gated.size()); }
  bool is_gated(const HeadIndex& index) const { return gate(index.layer, index.head) != 0.0; }
};

// Throws ProvenanceError when ranking and bank disagree on model_hash.
InterventionConfig build_gate(const HeadRanking& ranking, const ShiftVectorBank& bank, double alpha,
                              InjectionSite site = InjectionSite::kAllPositions);

// Convenience: ranking(K) from the artifact, then build_gate.
InterventionConfig config_from_artifact(const ProbeArtifact& artifact, long k, double alpha,
                                        InjectionSite site = InjectionSite::kAllPositions);

InterventionHook make_hook(const ModelConfig& model, const InterventionConfig& config);

ForwardTrace intervened_forward(const DecoderWeights& weights, const SequenceInput& input,
                                const InterventionConfig& config, CaptureFlags capture = {});

struct InterventionReport {
  std::vector<HeadIndex> gated;
  std::vector<double> applied_shift_norms;  // |alpha * S| per gated head
  std::vector<double> layer_delta_norms;    // Frobenius |H^{l+1} - H^{l+1}_baseline| per layer
  double baseline_seconds = 0.0;            // mean wall-clock per forward
  double intervened_seconds = 0.0;

  double overhead_ratio() const {
    return baseline_seconds > 0.0 ? intervened_seconds / baseline_seconds : 0.0;
  }
};

// Compares one intervened forward against the baseline and times both over
// `repetitions` interleaved runs (0 skips timing).
InterventionReport report_intervention(const DecoderWeights& weights, const SequenceInput& input,
                                       const InterventionConfig& config, int repetitions = 0);

struct OverheadMeasurement {
  double baseline_seconds = 0.0;    // best-of-trials total over all inputs
  double intervened_seconds = 0.0;
  double paired_ratio = 0.0;        // median over trials of intervened / baseline

  double ratio() const { return paired_ratio; }
};

// Times the no-capture forward over `inputs` with and without the hook.
// Each trial runs one pass per side back to back, alternating which goes first.
OverheadMeasurement measure_overhead(const DecoderWeights& weights,
                                     std::span<const SequenceInput> inputs,
                                     const InterventionConfig& config, int trials);

}  // namespace cai
