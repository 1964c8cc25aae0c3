#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "cai/analysis.hpp"
#include "cai/cli/manifest.hpp"
#include "cai/cli/run_config.hpp"
#include "cai/harness.hpp"
#include "cai/probe.hpp"
#include "cai/query_search.hpp"

namespace cai::cli {

// A failure inside one pipeline stage; what() starts with "[stage] ".
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& message)
      : Error("[" + stage + "] " + message), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

// Everything one command needs: resolved config, the directory it reads and
// writes, the manifest to update and the command line to record.
struct Context {
  RunConfig config;
  std::filesystem::path dir;
  std::optional<std::filesystem::path> probe_artifact;
  ArtifactIndex* manifest = nullptr;
  std::filesystem::path manifest_root;
  std::string command_line;
  std::ostream* log = nullptr;
};

struct GenOutput {
  DecoderWeights weights;
  std::vector<HeadIndex> planted;  // empty for loaded weights
  Corpus probe_corpus;
  Corpus eval_corpus;
};

struct AnalyzeOutput {
  VisualAttentionProfile caption;
  VisualAttentionProfile non_caption;
  VisualAttentionProfile non_caption_alt;  // second non-caption phrasing
  ChangeRateReport rates;
  ChangeRateReport rates_alt;
};

struct SearchOutput {
  QueryCandidateSet candidates;
  QuerySearchResult result;
};

struct EvalOutput {
  long k = 0;
  double alpha = 0.0;
  std::vector<HeadIndex> gated;
  EvalResult baseline;
  EvalResult intervened;
};

struct SweepOutput {
  std::vector<SweepCell> cells;
  std::size_t best = 0;
};

struct PipelineSeedOutput {
  std::uint64_t seed = 0;
  ProbeArtifact artifact;
  EvalOutput eval;
};

struct PipelineOutput {
  std::vector<PipelineSeedOutput> runs;
  double mean_baseline_accuracy = 0.0;
  double mean_intervened_accuracy = 0.0;
};

GenOutput cmd_gen(const Context& ctx);
AnalyzeOutput cmd_analyze(const Context& ctx);
SearchOutput cmd_search_query(const Context& ctx);
ProbeArtifact cmd_probe(const Context& ctx);
EvalOutput cmd_eval(const Context& ctx);
SweepOutput cmd_sweep(const Context& ctx);
PipelineOutput cmd_pipeline(const Context& ctx);

// Second non-caption phrasing: a fixed filler prefix before the object token.
std::vector<int> alternate_noncaption_query(const HarnessSpec& spec, int object);

// Parses argv, runs the subcommand and returns the process exit code:
// 0 on success, 2 for usage errors, 1 for any other failure.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace cai::cli
