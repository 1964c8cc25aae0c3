#include "cai/cli/commands.hpp"

#include <algorithm>
#include <functional>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "cai/errors.hpp"
#include "cai/model_io.hpp"

namespace cai::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::ostream& log_of(const Context& ctx) {
  static std::ostream null_stream(nullptr);
  return ctx.log ? *ctx.log : null_stream;
}

void emit(const Context& ctx, const std::string& name, const std::string& content) {
  fs::create_directories(ctx.dir);
  const fs::path path = ctx.dir / name;
  {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out << content;
  }
  if (ctx.manifest) {
    const fs::path root = ctx.manifest_root.empty() ? ctx.dir : ctx.manifest_root;
    ctx.manifest->record(root, fs::relative(path, root).generic_string(), ctx.command_line);
  }
}

fs::path require_input(const fs::path& path, const char* producer) {
  if (!fs::exists(path)) {
    throw UsageError("missing input " + path.string() + " (produced by `cai " + producer + "`)");
  }
  return path;
}

HarnessSpec harness_for(const RunConfig& config, const DecoderWeights& weights) {
  HarnessSpec spec = config.harness_spec();
  spec.model = weights.config;
  spec.validate();
  return spec;
}

DecoderWeights load_model(const Context& ctx) {
  return load_weights(require_input(ctx.dir / "model.json", "gen"));
}

std::string heads_json_list(const std::vector<HeadIndex>& heads) {
  json list = json::array();
  for (const auto& h : heads) list.push_back(to_string(h));
  return list.dump();
}

json metrics_json(const EvalResult& r) {
  return {{"accuracy", r.accuracy}, {"f1", r.f1}, {"yes_rate", r.yes_rate}, {"records", r.records.size()}};
}

ProbeArtifact load_artifact_for(const Context& ctx, const DecoderWeights& weights) {
  const fs::path path = ctx.probe_artifact ? *ctx.probe_artifact : ctx.dir / "probe_artifact.json";
  ProbeArtifact artifact = load_probe_artifact(require_input(path, "probe"));
  const std::string hash = model_hash(weights);
  if (artifact.model_hash != hash) {
    throw ProvenanceError("probe artifact " + path.string() + " was built for model " +
                          artifact.model_hash + ", current model is " + hash);
  }
  return artifact;
}

std::string head_grid_csv(const Matrix& grid) {
  std::ostringstream s;
  write_head_csv(s, grid);
  return s.str();
}

std::string layer_csv(const Vector& rates) {
  std::ostringstream s;
  write_layer_csv(s, rates);
  return s.str();
}

VisualAttentionProfile profile_of(const DecoderWeights& weights, const Corpus& corpus,
                                  const std::function<std::vector<int>(const CorpusRecord&)>& query) {
  const CaptureFlags capture{.attention = true, .hidden = false};
  std::vector<ForwardTrace> traces;
  traces.reserve(corpus.size());
  for (const auto& r : corpus) traces.push_back(forward(weights, {r.scene.embeddings, query(r)}, capture));
  return accumulate_profile(traces);
}

json rates_summary(const ChangeRateReport& r) {
  return {{"fraction_enhanced", r.fraction_enhanced}, {"fraction_layers_enhanced", r.fraction_layers_enhanced}};
}

}  // namespace

std::vector<int> alternate_noncaption_query(const HarnessSpec& spec, int object) {
  std::vector<int> tokens;
  const int fillers = spec.vocab.num_fillers;
  for (int t = 0; t + 1 < spec.noncaption_length; ++t) {
    tokens.push_back(spec.vocab.filler_token(fillers - 1 - (t % fillers)));
  }
  tokens.push_back(spec.vocab.object_token(object));
  return tokens;
}

GenOutput cmd_gen(const Context& ctx) {
  const RunConfig& c = ctx.config;
  const StageSeeds seeds = stage_seeds(c.seed);
  GenOutput out;
  json planted = nullptr;
  if (c.model.path) {
    out.weights = load_weights(*c.model.path);
  } else {
    PlantedModel pm = build_planted_model(c.planted_spec(), seeds.model);
    out.weights = std::move(pm.weights);
    out.planted = pm.planted;
    planted = json{{"planted", json::parse(heads_json_list(pm.planted))},
                   {"reader", to_string(pm.reader)},
                   {"comparison", to_string(pm.comparison)}};
  }
  const HarnessSpec spec = harness_for(c, out.weights);
  out.probe_corpus = generate_corpus(spec, seeds.probe_corpus, c.corpus.probe_scenes);
  out.eval_corpus = generate_corpus(spec, seeds.eval_corpus, c.corpus.eval_scenes);

  emit(ctx, "model.json", weights_to_json(out.weights).dump() + "\n");
  if (!planted.is_null()) emit(ctx, "planted_heads.json", planted.dump(2) + "\n");
  std::ostringstream probe_lines, eval_lines;
  write_corpus(probe_lines, out.probe_corpus);
  write_corpus(eval_lines, out.eval_corpus);
  emit(ctx, "probe_corpus.jsonl", probe_lines.str());
  emit(ctx, "eval_corpus.jsonl", eval_lines.str());
  log_of(ctx) << "gen: model " << model_hash(out.weights).substr(0, 12) << ", "
              << out.probe_corpus.size() << " probe + " << out.eval_corpus.size() << " eval records\n";
  return out;
}

AnalyzeOutput cmd_analyze(const Context& ctx) {
  const DecoderWeights weights = load_model(ctx);
  const HarnessSpec spec = harness_for(ctx.config, weights);
  const Corpus corpus = load_corpus(require_input(ctx.dir / "probe_corpus.jsonl", "gen"), spec);

  AnalyzeOutput out;
  out.caption = profile_of(weights, corpus, [](const CorpusRecord& r) { return r.query.caption_tokens; });
  out.non_caption = profile_of(weights, corpus, [](const CorpusRecord& r) { return r.query.noncaption_tokens; });
  out.non_caption_alt = profile_of(weights, corpus, [&](const CorpusRecord& r) {
    return alternate_noncaption_query(spec, r.query.probed_object);
  });
  out.rates = change_rates(out.caption, out.non_caption);
  out.rates_alt = change_rates(out.caption, out.non_caption_alt);

  emit(ctx, "visual_sums_caption.csv", head_grid_csv(out.caption.sums));
  emit(ctx, "visual_sums_noncaption.csv", head_grid_csv(out.non_caption.sums));
  emit(ctx, "visual_sums_noncaption_alt.csv", head_grid_csv(out.non_caption_alt.sums));
  emit(ctx, "change_rate_heads.csv", head_grid_csv(out.rates.head_rates));
  emit(ctx, "change_rate_layers.csv", layer_csv(out.rates.layer_rates));
  emit(ctx, "change_rate_heads_alt.csv", head_grid_csv(out.rates_alt.head_rates));
  emit(ctx, "change_rate_layers_alt.csv", layer_csv(out.rates_alt.layer_rates));
  const json summary{{"samples", corpus.size()},
                     {"noncaption", rates_summary(out.rates)},
                     {"noncaption_alt", rates_summary(out.rates_alt)}};
  emit(ctx, "analysis_summary.json", summary.dump(2) + "\n");
  log_of(ctx) << "analyze: fraction_enhanced=" << format_value(out.rates.fraction_enhanced)
              << " fraction_enhanced_alt=" << format_value(out.rates_alt.fraction_enhanced)
              << " fraction_layers_enhanced=" << format_value(out.rates.fraction_layers_enhanced) << "\n";
  return out;
}

SearchOutput cmd_search_query(const Context& ctx) {
  const RunConfig& c = ctx.config;
  const DecoderWeights weights = load_model(ctx);
  const HarnessSpec spec = harness_for(c, weights);
  const Corpus corpus = load_corpus(require_input(ctx.dir / "probe_corpus.jsonl", "gen"), spec);

  SearchOutput out;
  if (c.search.candidates.empty()) {
    out.candidates = default_caption_candidates(spec.vocab);
  } else {
    out.candidates.candidates = c.search.candidates;
    for (const auto& cand : c.search.candidates) {
      std::string label;
      for (int t : cand) label += (label.empty() ? "" : " ") + spec.vocab.token_name(t);
      out.candidates.labels.push_back(label);
    }
  }
  const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(c.search.scenes), corpus.size());
  std::vector<Matrix> images;
  std::vector<std::vector<int>> queries;
  for (std::size_t i = 0; i < n; ++i) {
    images.push_back(corpus[i].scene.embeddings);
    queries.push_back(corpus[i].query.noncaption_tokens);
  }
  const ShiftMode mode = c.search.signed_shift ? ShiftMode::kSigned : ShiftMode::kAbsolute;
  out.result = best_query_search(weights, images, queries, out.candidates, mode);

  std::ostringstream csv;
  csv << "candidate_index,label,aggregate_shift\n";
  for (std::size_t j : rank_candidates(out.result.scores)) {
    csv << j << ',' << out.candidates.labels[j] << ',' << format_value(out.result.scores.aggregate[j]) << '\n';
  }
  emit(ctx, "query_scores.csv", csv.str());
  const std::size_t best = out.result.best_index;
  const json best_json{{"index", best},
                       {"label", out.candidates.labels[best]},
                       {"tokens", out.candidates.candidates[best]},
                       {"aggregate_shift", out.result.scores.aggregate[best]},
                       {"mode", c.search.signed_shift ? "signed" : "absolute"},
                       {"scenes", n}};
  emit(ctx, "best_query.json", best_json.dump(2) + "\n");
  log_of(ctx) << "search-query: best candidate " << best << " (" << out.candidates.labels[best]
              << ") shift=" << format_value(out.result.scores.aggregate[best]) << "\n";
  return out;
}

ProbeArtifact cmd_probe(const Context& ctx) {
  const RunConfig& c = ctx.config;
  const DecoderWeights weights = load_model(ctx);
  const HarnessSpec spec = harness_for(c, weights);
  Corpus corpus = load_corpus(require_input(ctx.dir / "probe_corpus.jsonl", "gen"), spec);

  const fs::path best_path = ctx.dir / "best_query.json";
  if (fs::exists(best_path)) {
    std::ifstream in(best_path);
    const json best = json::parse(in);
    corpus = with_caption(std::move(corpus), best.at("tokens").get<std::vector<int>>());
  }
  SvmOptions options = c.probe;
  options.seed = stage_seeds(c.seed).classifier;
  const long k = c.resolved_top_k(weights.config);
  const ProbeArtifact artifact = run_probe(weights, probe_pairs(corpus), k, options);
  emit(ctx, "probe_artifact.json", probe_artifact_to_json(artifact).dump(2) + "\n");
  log_of(ctx) << "probe: top-" << k << " heads " << heads_json_list(artifact.top_k) << "\n";
  return artifact;
}

EvalOutput cmd_eval(const Context& ctx) {
  const RunConfig& c = ctx.config;
  const DecoderWeights weights = load_model(ctx);
  const HarnessSpec spec = harness_for(c, weights);
  const Corpus corpus = load_corpus(require_input(ctx.dir / "eval_corpus.jsonl", "gen"), spec);
  const ProbeArtifact artifact = load_artifact_for(ctx, weights);

  EvalOutput out;
  out.k = c.resolved_top_k(weights.config);
  out.alpha = c.alpha;
  const InterventionConfig config = config_from_artifact(artifact, out.k, c.alpha, c.injection);
  out.gated = config.gated;
  out.baseline = evaluate(weights, corpus);
  out.intervened = evaluate(weights, corpus, &config);

  const json report{{"alpha", out.alpha},
                    {"k", out.k},
                    {"gated", json::parse(heads_json_list(out.gated))},
                    {"baseline", metrics_json(out.baseline)},
                    {"intervened", metrics_json(out.intervened)}};
  emit(ctx, "eval.json", report.dump(2) + "\n");
  std::ostringstream csv;
  csv << "index,gold,baseline_logit,intervened_logit\n";
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    csv << i << ',' << (corpus[i].query.gold_yes ? "yes" : "no") << ','
        << format_value(out.baseline.records[i].logit) << ','
        << format_value(out.intervened.records[i].logit) << '\n';
  }
  emit(ctx, "eval_records.csv", csv.str());
  log_of(ctx) << "eval: alpha=" << format_value(out.alpha) << " K=" << out.k
              << " baseline accuracy=" << format_value(out.baseline.accuracy)
              << " intervened accuracy=" << format_value(out.intervened.accuracy) << "\n";
  return out;
}

SweepOutput cmd_sweep(const Context& ctx) {
  const RunConfig& c = ctx.config;
  const DecoderWeights weights = load_model(ctx);
  const HarnessSpec spec = harness_for(c, weights);
  const Corpus corpus = load_corpus(require_input(ctx.dir / "eval_corpus.jsonl", "gen"), spec);
  const ProbeArtifact artifact = load_artifact_for(ctx, weights);
  const std::vector<long> ks = c.resolved_k_grid(weights.config);
  if (c.sweep.alphas.empty() || ks.empty()) throw UsageError("sweep: empty alpha or K grid");

  SweepOutput out;
  out.cells = sweep(weights, corpus, artifact, c.sweep.alphas, ks, c.injection);
  out.best = argmax_cell(out.cells);
  std::ostringstream csv;
  write_sweep_csv(csv, out.cells);
  emit(ctx, "sweep.csv", csv.str());
  const SweepCell& b = out.cells[out.best];
  const json summary{{"argmax",
                      {{"row", out.best},
                       {"alpha", b.alpha},
                       {"k", b.k},
                       {"accuracy", b.result.accuracy},
                       {"f1", b.result.f1},
                       {"yes_rate", b.result.yes_rate}}},
                     {"cells", out.cells.size()}};
  emit(ctx, "sweep_summary.json", summary.dump(2) + "\n");
  log_of(ctx) << "sweep: " << out.cells.size() << " cells; argmax alpha=" << format_value(b.alpha)
              << " k=" << b.k << " accuracy=" << format_value(b.result.accuracy) << "\n";
  return out;
}

PipelineOutput cmd_pipeline(const Context& ctx) {
  const RunConfig& base = ctx.config;
  const std::vector<std::uint64_t> seeds = base.seeds.empty() ? std::vector<std::uint64_t>{base.seed} : base.seeds;
  PipelineOutput out;
  json per_seed = json::array();
  for (std::uint64_t seed : seeds) {
    Context stage = ctx;
    stage.config.seed = seed;
    stage.probe_artifact.reset();
    if (!base.seeds.empty()) stage.dir = ctx.dir / ("seed-" + std::to_string(seed));
    stage.manifest_root = ctx.manifest_root.empty() ? ctx.dir : ctx.manifest_root;

    const auto run_stage = [&](const char* name, auto&& fn) {
      try {
        return fn(stage);
      } catch (const StageError&) {
        throw;
      } catch (const std::exception& e) {
        throw StageError(name, e.what());
      }
    };
    run_stage("gen", cmd_gen);
    run_stage("search-query", cmd_search_query);
    PipelineSeedOutput run;
    run.seed = seed;
    run.artifact = run_stage("probe", cmd_probe);
    run.eval = run_stage("eval", cmd_eval);
    per_seed.push_back({{"seed", seed},
                        {"baseline_accuracy", run.eval.baseline.accuracy},
                        {"intervened_accuracy", run.eval.intervened.accuracy}});
    out.mean_baseline_accuracy += run.eval.baseline.accuracy;
    out.mean_intervened_accuracy += run.eval.intervened.accuracy;
    out.runs.push_back(std::move(run));
  }
  out.mean_baseline_accuracy /= static_cast<double>(seeds.size());
  out.mean_intervened_accuracy /= static_cast<double>(seeds.size());
  const json summary{{"runs", per_seed},
                     {"mean_baseline_accuracy", out.mean_baseline_accuracy},
                     {"mean_intervened_accuracy", out.mean_intervened_accuracy}};
  emit(ctx, "pipeline_summary.json", summary.dump(2) + "\n");
  log_of(ctx) << "pipeline: mean baseline accuracy=" << format_value(out.mean_baseline_accuracy)
              << " mean intervened accuracy=" << format_value(out.mean_intervened_accuracy) << "\n";
  return out;
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Caption-sensitive attention intervention toolkit"};
  app.require_subcommand(1, 1);

  std::string config_path, out_dir, artifact_path;
  std::uint64_t seed = 0;
  double alpha = 0.0;
  long top_k = 0;
  std::vector<CLI::Option*> options;
  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "Run config JSON")->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "Run seed (overrides the config)");
    sub->add_option("--alpha", alpha, "Intervention intensity");
    sub->add_option("--top-k", top_k, "Number of gated heads");
    sub->add_option("--out", out_dir, "Output directory");
    sub->add_option("--probe-artifact", artifact_path, "Probe artifact JSON");
  };
  const std::vector<std::pair<std::string, std::string>> commands{
      {"gen", "Build the model and the probe/eval corpora"},
      {"analyze", "Visual-attention change rates, caption vs non-caption"},
      {"search-query", "Rank caption query candidates by attention shift"},
      {"probe", "Train per-head probes and compute shift vectors"},
      {"eval", "Baseline vs intervened object-presence evaluation"},
      {"sweep", "Alpha x K evaluation grid"},
      {"pipeline", "search-query, probe and eval from one invocation"}};
  for (const auto& [name, help] : commands) add_common(app.add_subcommand(name, help));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }
  CLI::App* sub = app.get_subcommands().front();

  std::string command_line = "cai";
  for (int i = 1; i < argc; ++i) command_line += std::string(" ") + argv[i];

  try {
    RunConfig config = config_path.empty() ? RunConfig{} : load_run_config(config_path);
    if (sub->count("--seed")) {
      config.seed = seed;
      config.seeds.clear();
    }
    if (sub->count("--alpha")) config.alpha = alpha;
    if (sub->count("--top-k")) config.top_k = top_k;
    if (sub->count("--out")) config.out = out_dir;
    config.validate();

    ArtifactIndex manifest = ArtifactIndex::load(config.out / kManifestName);
    Context ctx;
    ctx.config = config;
    ctx.dir = config.out;
    ctx.manifest_root = config.out;
    ctx.manifest = &manifest;
    ctx.command_line = command_line;
    ctx.log = &out;
    if (sub->count("--probe-artifact")) ctx.probe_artifact = artifact_path;

    const std::string name = sub->get_name();
    if (name == "pipeline") {
      emit(ctx, "run_config.json", run_config_to_json(config).dump(2) + "\n");
    }
    if (name == "gen") cmd_gen(ctx);
    else if (name == "analyze") cmd_analyze(ctx);
    else if (name == "search-query") cmd_search_query(ctx);
    else if (name == "probe") cmd_probe(ctx);
    else if (name == "eval") cmd_eval(ctx);
    else if (name == "sweep") cmd_sweep(ctx);
    else cmd_pipeline(ctx);

    manifest.save(config.out / kManifestName);
    return 0;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace cai::cli
