// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cai/analysis.hpp"
#include "cai/cli/commands.hpp"
#include "cai/harness.hpp"
#include "cai/intervention.hpp"
#include "cai/model_io.hpp"
#include "cai/probe.hpp"
#include "cai/query_search.hpp"
#include "support.hpp"

using namespace cai;
using namespace cai::testing;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

constexpr int kSeeds = 10;

struct SeedRun {
  PlantedModel model;
  Corpus probe;
  Corpus eval;
  ProbeArtifact artifact;
};

// Planted harness runs shared by the probe, effect, sweep and rate criteria.
const std::vector<SeedRun>& planted_runs(int planted) {
  static std::map<int, std::vector<SeedRun>> cache;
  auto& runs = cache[planted];
  if (!runs.empty()) return runs;
  for (int s = 0; s < kSeeds; ++s) {
    PlantedModelSpec spec;
    spec.harness = HarnessSpec::make(planted == 4 ? 5 : 10, 8, 8);
    spec.num_planted = planted;
    SeedRun r;
    r.model = build_planted_model(spec, 1000 + s);
    r.probe = generate_corpus(spec.harness, mix_seed(2000 + s, 1), 100);
    r.eval = generate_corpus(spec.harness, mix_seed(2000 + s, 2), 200);
    SvmOptions opts;
    opts.seed = static_cast<std::uint64_t>(s);
    r.artifact = run_probe(r.model.weights, probe_pairs(r.probe), planted, opts);
    runs.push_back(std::move(r));
  }
  return runs;
}

Outcome attention_correctness() {
  Outcome o;
  double worst_row = 0.0, worst_causal = 0.0, worst_oracle = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const ModelConfig cfg = small_config(2, 2, 4, 7, 16);
    const DecoderWeights w = random_weights(cfg, seed);
    const SequenceInput in = random_input(cfg, 3, 2, seed + 50);
    const ForwardTrace t = forward(w, in);
    const OracleRun ref = oracle_forward(w, in);
    for (std::size_t l = 0; l < ref.hidden.size(); ++l)
      for (int i = 0; i < in.length(); ++i)
        for (int c = 0; c < cfg.model_dim(); ++c)
          worst_oracle = std::max(worst_oracle, std::abs(t.hidden[l](i, c) - ref.hidden[l][i][c]));
    worst_oracle = std::max(worst_oracle, std::abs(t.answer_logit - ref.logit));
  }
  const auto& run = planted_runs(4).front();
  std::vector<ForwardTrace> traces;
  for (std::size_t i = 0; i < 20; ++i) {
    traces.push_back(forward(run.model.weights, run.probe[i].caption_input()));
    traces.push_back(forward(run.model.weights, run.probe[i].noncaption_input()));
  }
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const ModelConfig cfg = small_config(3, 4, 4, 11, 24);
    traces.push_back(forward(random_weights(cfg, seed, 2.0), random_input(cfg, 1 + seed % 4, 7, seed)));
  }
  for (const auto& t : traces) {
    for (const Matrix& a : t.attention) {
      for (int i = 0; i < a.rows(); ++i) {
        worst_row = std::max(worst_row, std::abs(a.row(i).sum() - 1.0));
        for (int j = i + 1; j < a.cols(); ++j) worst_causal = std::max(worst_causal, std::abs(a(i, j)));
      }
    }
  }
  o.pass = worst_row <= 1e-12 && worst_causal == 0.0 && worst_oracle <= 1e-10;
  o.detail = "max |row sum - 1| " + fmt("%.2e", worst_row) + ", max future mass " + fmt("%.1e", worst_causal) +
             ", max |forward - oracle| " + fmt("%.2e", worst_oracle);
  return o;
}

Outcome masking_exactness() {
  Outcome o;
  double text_mass = 0.0, single_gap = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const ModelConfig cfg = small_config(2, 3, 4, 9, 16);
    const DecoderWeights w = random_weights(cfg, seed, 1.5);
    for (int m : {1, 2, 4}) {
      const SequenceInput in = random_input(cfg, m, 5, seed * 10 + m);
      const ForwardTrace t = forward(w, in);
      for (int l = 0; l < cfg.num_layers; ++l) {
        for (int h = 0; h < cfg.num_heads; ++h) {
          const MaskedAttention r = masked_last_token_attention(w.head({l, h}), t.hidden[l], m);
          for (int j = m; j < in.length(); ++j) text_mass = std::max(text_mass, std::abs(r.weights[j]));
          if (m == 1) {
            const Eigen::RowVectorXd value = t.hidden[l].row(0) * w.head({l, h}).wv;
            single_gap = std::max(single_gap, (r.output.transpose() - value).cwiseAbs().maxCoeff());
          }
        }
      }
    }
  }
  o.pass = text_mass == 0.0 && single_gap <= 1e-15;
  o.detail = "max text mass " + fmt("%.1e", text_mass) + ", m=1 output vs value row " + fmt("%.2e", single_gap);
  return o;
}

bool same_trace(const ForwardTrace& a, const ForwardTrace& b) {
  if (a.answer_logit != b.answer_logit || a.final_hidden != b.final_hidden) return false;
  for (std::size_t i = 0; i < a.hidden.size(); ++i)
    if (a.hidden[i] != b.hidden[i]) return false;
  for (std::size_t i = 0; i < a.attention.size(); ++i)
    if (a.attention[i] != b.attention[i]) return false;
  for (std::size_t i = 0; i < a.last_outputs.size(); ++i)
    if (a.last_outputs[i] != b.last_outputs[i]) return false;
  return true;
}

Outcome identity_at_zero() {
  Outcome o;
  const auto& run = planted_runs(4).front();
  const DecoderWeights& w = run.model.weights;
  bool bitwise = true;
  for (std::size_t i = 0; i < 20; ++i) {
    const SequenceInput in = run.eval[i].noncaption_input();
    const ForwardTrace base = forward(w, in);
    bitwise &= same_trace(base, intervened_forward(w, in, config_from_artifact(run.artifact, 4, 0.0)));
    bitwise &= same_trace(base, intervened_forward(w, in, config_from_artifact(run.artifact, 0, 1.5)));
  }
  double worst = 0.0;
  const int d = w.config.head_dim;
  for (const HeadIndex& g : run.artifact.ranking(w.config.head_count()).order) {
    HeadRanking one = run.artifact.ranking(0);
    one.top = {g};
    const InterventionConfig c = build_gate(one, run.artifact.bank, 1.5);
    const SequenceInput in = run.eval[static_cast<std::size_t>(w.config.flat_index(g))].noncaption_input();
    const ForwardTrace base = forward(w, in);
    const ForwardTrace hooked = intervened_forward(w, in, c);
    const Eigen::RowVectorXd expected =
        1.5 * run.artifact.bank.at(g).transpose() * w.layers[g.layer].wo.middleRows(g.head * d, d);
    for (int i = 0; i < in.length(); ++i) {
      const Eigen::RowVectorXd delta = hooked.hidden[g.layer + 1].row(i) - base.hidden[g.layer + 1].row(i);
      worst = std::max(worst, (delta - expected).cwiseAbs().maxCoeff());
    }
  }
  o.pass = bitwise && worst <= 1e-12;
  o.detail = std::string("alpha=0 and K=0 traces bitwise equal: ") + (bitwise ? "yes" : "no") +
             ", single-head layer delta vs alpha*S*W_o " + fmt("%.2e", worst);
  return o;
}

Outcome shift_vector_oracle() {
  Outcome o;
  const ModelConfig cfg = small_config(2, 2, 4, 7, 16);
  const DecoderWeights w = random_weights(cfg, 91);
  Rng rng(92);
  std::vector<ProbePair> pairs;
  for (int b = 0; b < 50; ++b) {
    const Matrix image = random_matrix(rng, 3, cfg.model_dim(), 1.0);
    pairs.push_back({{image, {0, static_cast<int>(rng.index(7))}},
                     {image, {static_cast<int>(rng.index(7)), 2, static_cast<int>(rng.index(7))}}});
  }
  const ShiftVectorBank bank = compute_shift_vectors(build_probe_dataset(w, pairs));
  double worst = 0.0;
  for (int f = 0; f < cfg.head_count(); ++f) {
    std::vector<std::vector<double>> diffs;
    for (const auto& p : pairs) {
      const auto a = oracle_forward(w, p.caption).last[f];
      const auto b = oracle_forward(w, p.non_caption).last[f];
      std::vector<double> d(4);
      for (int c = 0; c < 4; ++c) d[c] = a[c] - b[c];
      diffs.push_back(d);
    }
    for (int c = 0; c < 4; ++c) {
      double mean = 0.0;
      for (const auto& d : diffs) mean += d[c];
      mean /= 50.0;
      double correction = 0.0;  // second pass
      for (const auto& d : diffs) correction += d[c] - mean;
      mean += correction / 50.0;
      worst = std::max(worst, std::abs(bank.shifts[f][c] - mean));
    }
  }
  o.pass = worst <= 1e-12;
  o.detail = "B=50 pairs, max |bank - two-pass mean| " + fmt("%.2e", worst);
  return o;
}

Outcome query_search_oracle() {
  Outcome o;
  bool match = true, equivariant = true;
  double worst = 0.0;
  for (int j : {3, 4, 5}) {
    const ModelConfig cfg = small_config(2, 2, 4, 9, 16);
    const DecoderWeights w = random_weights(cfg, 100 + j, 1.2);
    Rng rng(200 + j);
    std::vector<Matrix> images;
    std::vector<std::vector<int>> queries;
    for (int b = 0; b < 20; ++b) {
      images.push_back(random_matrix(rng, 3, cfg.model_dim(), 1.0));
      queries.push_back({static_cast<int>(rng.index(9)), static_cast<int>(rng.index(9))});
    }
    QueryCandidateSet set;
    for (int c = 0; c < j; ++c) {
      std::vector<int> q;
      for (int t = 0; t <= c % 3; ++t) q.push_back(static_cast<int>(rng.index(9)));
      set.candidates.push_back(q);
      set.labels.push_back("c" + std::to_string(c));
    }
    const QuerySearchResult r = best_query_search(w, images, queries, set);
    std::vector<double> totals(j, 0.0);
    for (int c = 0; c < j; ++c) {
      for (int b = 0; b < 20; ++b) {
        const OracleRun a = oracle_forward(w, {images[b], set.candidates[c]});
        const OracleRun n = oracle_forward(w, {images[b], queries[b]});
        for (std::size_t f = 0; f < a.attention.size(); ++f)
          for (int i = 0; i < 3; ++i) totals[c] += std::abs(a.attention[f].back()[i] - n.attention[f].back()[i]);
      }
      worst = std::max(worst, std::abs(totals[c] - r.scores.aggregate[c]));
    }
    const auto best = static_cast<std::size_t>(std::min_element(totals.begin(), totals.end()) - totals.begin());
    match &= r.best_index == best;

    std::vector<std::size_t> perm(j);
    for (int c = 0; c < j; ++c) perm[c] = static_cast<std::size_t>((j - 1 - c + 2) % j);
    QueryCandidateSet moved;
    for (std::size_t p : perm) {
      moved.candidates.push_back(set.candidates[p]);
      moved.labels.push_back(set.labels[p]);
    }
    const QuerySearchResult rp = best_query_search(w, images, queries, moved);
    for (int c = 0; c < j; ++c) equivariant &= rp.scores.aggregate[c] == r.scores.aggregate[perm[c]];
    equivariant &= moved.candidates[rp.best_index] == set.candidates[r.best_index];
  }
  o.pass = match && equivariant && worst <= 1e-9;
  o.detail = std::string("argmin matches exhaustive search: ") + (match ? "yes" : "no") +
             ", permutation equivariant: " + (equivariant ? "yes" : "no") + ", max score gap " + fmt("%.2e", worst);
  return o;
}

Outcome probe_recovery() {
  Outcome o;
  std::string detail;
  for (int planted : {4, 8}) {
    double recovered = 0.0;
    for (const auto& r : planted_runs(planted)) {
      int hits = 0;
      for (const auto& h : r.artifact.ranking(planted).top)
        hits += std::binary_search(r.model.planted.begin(), r.model.planted.end(), h);
      recovered += static_cast<double>(hits) / planted;
    }
    recovered /= kSeeds;
    o.pass &= recovered >= 0.9;
    detail += "P=" + std::to_string(planted) + " recovery " + fmt("%.3f", recovered) + ", ";
  }
  Rng rng(314);
  Matrix x(120, 6);
  std::vector<int> labels(120);
  for (int i = 0; i < 120; ++i) {
    labels[i] = i % 2;
    for (int c = 0; c < 6; ++c) x(i, c) = rng.normal();
    x(i, 0) = (labels[i] ? 1.0 : -1.0) * (1.0 + rng.uniform());  // margin 1 along the first axis
  }
  const double separable = train_head_classifier(x, labels);
  double shuffled = 0.0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    std::vector<int> y = labels;
    Rng shuffle_rng(mix_seed(77, s));
    shuffle_rng.shuffle(y);
    SvmOptions opts;
    opts.seed = s;
    shuffled += train_head_classifier(x, y, opts) / 20.0;
  }
  o.pass &= separable >= 0.95 && std::abs(shuffled - 0.5) <= 0.08;
  o.detail = detail + "separable accuracy " + fmt("%.3f", separable) + ", shuffled-label mean " + fmt("%.3f", shuffled);
  return o;
}

double mean_accuracy(int planted, long k, double alpha) {
  double total = 0.0;
  for (const auto& r : planted_runs(planted)) {
    const InterventionConfig c = config_from_artifact(r.artifact, k, alpha);
    total += evaluate(r.model.weights, r.eval, &c).accuracy;
  }
  return total / kSeeds;
}

Outcome effect_direction() {
  Outcome o;
  const long k = default_top_k(planted_runs(4).front().model.weights.config);
  double baseline = 0.0;
  for (const auto& r : planted_runs(4)) baseline += evaluate(r.model.weights, r.eval).accuracy / kSeeds;
  const double zero = mean_accuracy(4, k, 0.0);
  const double intervened = mean_accuracy(4, k, 1.5);
  const double negative = mean_accuracy(4, k, -0.5);
  o.pass = intervened >= baseline && negative < zero;
  o.detail = "K=" + std::to_string(k) + " mean accuracy: baseline " + fmt("%.4f", baseline) + ", alpha=1.5 " +
             fmt("%.4f", intervened) + ", alpha=0 " + fmt("%.4f", zero) + ", alpha=-0.5 " + fmt("%.4f", negative);
  return o;
}

Outcome sweep_shape() {
  Outcome o;
  const ModelConfig& cfg = planted_runs(4).front().model.weights.config;
  const long all = cfg.head_count();
  const std::vector<long> ks{0, 2, 4, all / 4, all / 2, all};
  std::vector<double> acc;
  std::string detail = "alpha=1.5:";
  for (long k : ks) {
    acc.push_back(mean_accuracy(4, k, 1.5));
    detail += " K=" + std::to_string(k) + " " + fmt("%.4f", acc.back());
  }
  const auto best = static_cast<std::size_t>(std::max_element(acc.begin() + 1, acc.end() - 1) - acc.begin());
  o.pass = acc[best] > acc.front() && acc[best] > acc.back();
  o.detail = detail;
  return o;
}

Outcome change_rate_analysis() {
  Outcome o;
  const auto& runs = planted_runs(4);
  bool zero = true;
  double min_fraction = 1.0;
  int top_decile_seeds = 0;
  for (const auto& r : runs) {
    const DecoderWeights& w = r.model.weights;
    const CaptureFlags capture{.attention = true, .hidden = false};
    std::vector<ForwardTrace> cap, non;
    for (const auto& rec : r.probe) {
      cap.push_back(forward(w, rec.caption_input(), capture));
      non.push_back(forward(w, rec.noncaption_input(), capture));
    }
    const auto pc = accumulate_profile(cap), pn = accumulate_profile(non);
    const ChangeRateReport same = change_rates(pn, pn);
    zero &= same.head_rates.cwiseAbs().maxCoeff() == 0.0 && same.layer_rates.cwiseAbs().maxCoeff() == 0.0;

    const ChangeRateReport rep = change_rates(pc, pn);
    min_fraction = std::min(min_fraction, rep.fraction_enhanced);
    std::vector<std::pair<double, HeadIndex>> ranked;
    for (int l = 0; l < w.config.num_layers; ++l)
      for (int h = 0; h < w.config.num_heads; ++h) ranked.push_back({-rep.head_rates(l, h), {l, h}});
    std::sort(ranked.begin(), ranked.end());
    const auto decile = static_cast<std::size_t>(std::ceil(0.1 * static_cast<double>(ranked.size())));
    bool all_in = true;
    for (const auto& p : r.model.planted) {
      const auto pos = std::find_if(ranked.begin(), ranked.end(), [&](const auto& e) { return e.second == p; });
      all_in &= static_cast<std::size_t>(pos - ranked.begin()) < decile;
    }
    top_decile_seeds += all_in;
  }
  o.pass = zero && min_fraction > 0.5 && top_decile_seeds == kSeeds;
  o.detail = std::string("identical-query rates all zero: ") + (zero ? "yes" : "no") + ", min fraction_enhanced " +
             fmt("%.3f", min_fraction) + ", planted heads in top decile on " + std::to_string(top_decile_seeds) +
             "/" + std::to_string(kSeeds) + " seeds";
  return o;
}

constexpr int kOverheadTrials = 41;

Outcome overhead() {
  Outcome o;
  const auto& r = planted_runs(4).front();
  std::vector<SequenceInput> inputs;
  for (const auto& rec : r.eval) inputs.push_back(rec.noncaption_input());
  const InterventionConfig c = config_from_artifact(r.artifact, 4, 1.5);
  const OverheadMeasurement m = measure_overhead(r.model.weights, inputs, c, kOverheadTrials);
  o.pass = m.ratio() <= 1.05;
  o.detail = std::to_string(kOverheadTrials) + " trials over " + std::to_string(inputs.size()) + " forwards: baseline " +
             fmt("%.3f", m.baseline_seconds * 1e3) + " ms, intervened " + fmt("%.3f", m.intervened_seconds * 1e3) +
             " ms, median paired ratio " + fmt("%.3f", m.ratio());
  return o;
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    files[fs::relative(e.path(), dir).generic_string()] = s.str();
  }
  return files;
}

Outcome determinism() {
  Outcome o;
  const fs::path root = fs::temp_directory_path() / "cai_acceptance_determinism";
  fs::remove_all(root);
  fs::create_directories(root);
  const fs::path config = root / "config.json";
  std::ofstream(config) << R"({"schema_version": 1, "seed": 11, "seeds": [11, 12], "out": ")"
                        << (root / "out").generic_string() << "\"}";
  const std::string cfg = config.string();
  const char* argv[] = {"cai", "pipeline", "--config", cfg.c_str()};
  std::ostringstream out, err;
  const int first_code = cli::run_cli(4, argv, out, err);
  const auto first = snapshot(root / "out");
  const int second_code = cli::run_cli(4, argv, out, err);
  const auto second = snapshot(root / "out");
  const cli::ArtifactIndex index = cli::ArtifactIndex::load(root / "out" / cli::kManifestName);
  const auto bad = index.mismatches(root / "out");
  std::size_t unlisted = 0;
  for (const auto& [name, body] : second) unlisted += name != cli::kManifestName && !index.files.count(name);
  o.pass = first_code == 0 && second_code == 0 && first == second && bad.empty() && unlisted == 0 && !first.empty();
  o.detail = std::to_string(second.size()) + " files, byte-identical: " + (first == second ? "yes" : "no") +
             ", manifest hash mismatches " + std::to_string(bad.size()) + ", unlisted files " + std::to_string(unlisted);
  if (first_code != 0 || second_code != 0) o.detail += ", cli error: " + err.str();
  fs::remove_all(root);
  return o;
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"attention correctness", attention_correctness},
      {"masking exactness", masking_exactness},
      {"identity at zero intervention", identity_at_zero},
      {"shift-vector oracle", shift_vector_oracle},
      {"query-search oracle", query_search_oracle},
      {"probe recovery", probe_recovery},
      {"end-to-end effect direction", effect_direction},
      {"sweep shape", sweep_shape},
      {"change-rate analysis", change_rate_analysis},
      {"overhead", overhead},
      {"determinism", determinism},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    failures += !o.pass;
    std::printf("criterion %2zu %s  %s: %s (%.1fs)\n", i + 1, o.pass ? "PASS" : "FAIL", criteria[i].first.c_str(),
                o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
