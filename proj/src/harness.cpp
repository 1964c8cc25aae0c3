#include "cai/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <set>

#include <json.hpp>

#include "cai/analysis.hpp"
#include "cai/rng.hpp"

namespace cai {

using nlohmann::json;

std::string VocabSpec::token_name(int token) const {
  if (token == marker_token()) return "<caption>";
  if (token >= 1 && token <= num_fillers) return "w" + std::to_string(token - 1);
  if (is_object_token(token)) return "obj" + std::to_string(object_of(token));
  return "<unk" + std::to_string(token) + ">";
}

namespace {

constexpr int kMaxCaptionLength = 4;
constexpr int kSequenceHeadroom = 12;  // room for multi-step continuation

}  // namespace

HarnessSpec HarnessSpec::make(int num_layers, int num_heads, int head_dim, VocabSpec vocab,
                              int slots) {
  HarnessSpec spec;
  spec.vocab = vocab;
  spec.slots = slots;
  spec.model.num_layers = num_layers;
  spec.model.num_heads = num_heads;
  spec.model.head_dim = head_dim;
  spec.model.vocab_size = vocab.vocab_size();
  spec.model.max_seq_len =
      slots + std::max(spec.noncaption_length, kMaxCaptionLength) + kSequenceHeadroom;
  return spec;
}

void HarnessSpec::validate() const {
  model.validate();
  if (vocab.num_objects < 2 || vocab.num_fillers < 1) {
    throw ConfigError("harness: need at least 2 objects and 1 filler token");
  }
  if (slots < 1) throw ConfigError("harness: scenes need at least one slot");
  if (vocab.num_objects <= slots) {
    throw ConfigError("harness: vocabulary has " + std::to_string(vocab.num_objects) +
                      " object ids, need more than the " + std::to_string(slots) +
                      " slots so absent objects exist");
  }
  if (model.vocab_size != vocab.vocab_size()) {
    throw ConfigError("harness: model vocab_size " + std::to_string(model.vocab_size) +
                      " does not match the token vocabulary (" +
                      std::to_string(vocab.vocab_size()) + ")");
  }
  if (noncaption_length < 1) throw ConfigError("harness: non-caption queries need a token");
  if (slots + std::max(noncaption_length, kMaxCaptionLength) > model.max_seq_len) {
    throw ConfigError("harness: max_seq_len too small for scenes plus queries");
  }
  if (!(noise_scale >= 0.0) || !std::isfinite(noise_scale)) {
    throw ConfigError("harness: noise_scale must be finite and >= 0");
  }
}

HarnessLayout HarnessLayout::make(const HarnessSpec& spec) {
  spec.validate();
  HarnessLayout layout;
  const int objects = spec.vocab.num_objects;
  layout.text_object = layout.visual_object + objects;
  layout.slot = layout.text_object + objects;
  layout.evidence = layout.slot + spec.slots;
  layout.junk_begin = layout.evidence + objects;
  layout.junk_end = spec.model.model_dim();
  if (layout.junk_size() < 8) {
    throw ConfigError("harness: model_dim " + std::to_string(spec.model.model_dim()) +
                      " leaves fewer than 8 junk channels; need at least " +
                      std::to_string(layout.junk_begin + 8));
  }
  if (spec.model.head_dim < objects + 2) {
    throw ConfigError("harness: head_dim must be at least num_objects + 2");
  }
  return layout;
}

bool SyntheticScene::contains(int object) const {
  return std::find(objects.begin(), objects.end(), object) != objects.end();
}

SyntheticScene make_scene(const HarnessSpec& spec, std::vector<int> objects, std::uint64_t seed) {
  const HarnessLayout layout = HarnessLayout::make(spec);
  if (static_cast<int>(objects.size()) != spec.slots) {
    throw ShapeError("scene: expected " + std::to_string(spec.slots) + " objects");
  }
  for (int o : objects) {
    if (o < 0 || o >= spec.vocab.num_objects) {
      throw ConfigError("scene: object id " + std::to_string(o) + " outside vocabulary");
    }
  }
  SyntheticScene scene;
  scene.seed = seed;
  scene.noise_scale = spec.noise_scale;
  scene.embeddings = Matrix::Zero(spec.slots, spec.model.model_dim());
  Rng rng(mix_seed(seed, 2));
  const double junk_sd = 2.0 * spec.noise_scale / std::sqrt(layout.junk_size());
  for (int s = 0; s < spec.slots; ++s) {
    auto row = scene.embeddings.row(s);
    row[layout.visual] = 1.0;
    row[layout.visual_object + objects[s]] = 1.0;
    row[layout.slot + s] = 1.0;
    for (int c = layout.junk_begin; c < layout.junk_end; ++c) row[c] = junk_sd * rng.normal();
    row /= row.norm();
  }
  scene.objects = std::move(objects);
  return scene;
}

QueryCandidateSet default_caption_candidates(const VocabSpec& vocab) {
  const auto filler = [&](int i) { return vocab.filler_token(i % vocab.num_fillers); };
  const int marker = vocab.marker_token();
  QueryCandidateSet set;
  set.candidates = {
      {marker},
      {filler(0), marker},
      {filler(1), filler(2), marker},
      {filler(3), filler(4), filler(5), marker},
      {filler(6), marker},
  };
  for (const auto& c : set.candidates) {
    std::string label;
    for (int t : c) label += (label.empty() ? "" : " ") + vocab.token_name(t);
    set.labels.push_back(label);
  }
  return set;
}

Corpus generate_corpus(const HarnessSpec& spec, std::uint64_t seed, int num_scenes,
                       const std::vector<int>& caption_tokens) {
  spec.validate();
  if (num_scenes < 1) throw ConfigError("corpus: num_scenes must be >= 1");
  const std::vector<int> caption =
      caption_tokens.empty() ? default_caption_candidates(spec.vocab).candidates.front()
                             : caption_tokens;

  Corpus corpus;
  corpus.reserve(static_cast<std::size_t>(num_scenes));
  for (int i = 0; i < num_scenes; ++i) {
    const std::uint64_t scene_seed = mix_seed(seed, static_cast<std::uint64_t>(i));
    Rng pick(mix_seed(scene_seed, 1));

    std::vector<int> all(static_cast<std::size_t>(spec.vocab.num_objects));
    std::iota(all.begin(), all.end(), 0);
    pick.shuffle(all);
    std::vector<int> present(all.begin(), all.begin() + spec.slots);
    std::vector<int> absent(all.begin() + spec.slots, all.end());

    QueryPair q;
    q.gold_yes = i % 2 == 0;
    q.probed_object = q.gold_yes ? present[pick.index(present.size())] : absent[pick.index(absent.size())];
    q.caption_tokens = caption;
    for (int t = 0; t + 1 < spec.noncaption_length; ++t) {
      q.noncaption_tokens.push_back(spec.vocab.filler_token(
          static_cast<int>(pick.index(static_cast<std::uint64_t>(spec.vocab.num_fillers)))));
    }
    q.noncaption_tokens.push_back(spec.vocab.object_token(q.probed_object));

    corpus.push_back({make_scene(spec, std::move(present), scene_seed), std::move(q)});
  }
  return corpus;
}

Corpus with_caption(Corpus corpus, const std::vector<int>& caption_tokens) {
  for (auto& record : corpus) record.query.caption_tokens = caption_tokens;
  return corpus;
}

std::vector<ProbePair> probe_pairs(const Corpus& corpus) {
  std::vector<ProbePair> pairs;
  pairs.reserve(corpus.size());
  for (const auto& r : corpus) pairs.push_back({r.caption_input(), r.noncaption_input()});
  return pairs;
}

void write_corpus(std::ostream& out, const Corpus& corpus) {
  for (const auto& r : corpus) {
    const json line{{"scene_seed", r.scene.seed},
                    {"objects", r.scene.objects},
                    {"caption_tokens", r.query.caption_tokens},
                    {"noncaption_tokens", r.query.noncaption_tokens},
                    {"gold", r.query.gold_yes ? "yes" : "no"}};
    out << line.dump() << '\n';
  }
}

Corpus read_corpus(std::istream& in, const HarnessSpec& spec) {
  Corpus corpus;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      CorpusRecord r;
      const auto seed = j.at("scene_seed").get<std::uint64_t>();
      r.scene = make_scene(spec, j.at("objects").get<std::vector<int>>(), seed);
      r.query.caption_tokens = j.at("caption_tokens").get<std::vector<int>>();
      r.query.noncaption_tokens = j.at("noncaption_tokens").get<std::vector<int>>();
      const auto gold = j.at("gold").get<std::string>();
      if (gold != "yes" && gold != "no") throw ConfigError("gold must be \"yes\" or \"no\"");
      r.query.gold_yes = gold == "yes";
      if (r.query.noncaption_tokens.empty() ||
          !spec.vocab.is_object_token(r.query.noncaption_tokens.back())) {
        throw ConfigError("non-caption query must end with an object token");
      }
      r.query.probed_object = spec.vocab.object_of(r.query.noncaption_tokens.back());
      corpus.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw ConfigError("corpus line " + std::to_string(line_no) + ": " + e.what());
    } catch (const Error& e) {
      throw ConfigError("corpus line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (corpus.empty()) throw EmptyDatasetError("corpus: no records");
  return corpus;
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  write_corpus(out, corpus);
}

Corpus load_corpus(const std::filesystem::path& path, const HarnessSpec& spec) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read corpus " + path.string());
  return read_corpus(in, spec);
}

void PlantedModelSpec::validate() const {
  harness.validate();
  HarnessLayout::make(harness);
  const auto& cfg = harness.model;
  if (cfg.num_layers < 3) throw ConfigError("planted model: need at least 3 layers");
  if (!(strength > 0.0) || !std::isfinite(strength)) {
    throw ConfigError("planted model: strength must be > 0");
  }
  const int eligible = (cfg.num_layers - 2) * cfg.num_heads;
  if (planted.empty()) {
    if (num_planted < 1 || num_planted > eligible) {
      throw ConfigError("planted model: num_planted must be in [1, " + std::to_string(eligible) + "]");
    }
  } else {
    std::set<HeadIndex> seen;
    for (const auto& index : planted) {
      if (!cfg.contains(index) || index.layer >= cfg.num_layers - 2) {
        throw ConfigError("planted model: head " + to_string(index) +
                          " must sit in a layer below L-2");
      }
      if (!seen.insert(index).second) {
        throw ConfigError("planted model: head " + to_string(index) + " listed twice");
      }
    }
  }
}

PlantedModel build_planted_model(const PlantedModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  const HarnessSpec& hs = spec.harness;
  const ModelConfig& cfg = hs.model;
  const HarnessLayout lay = HarnessLayout::make(hs);
  const PlantedCircuit& c = spec.circuit;
  const int d = cfg.head_dim;
  const int objects = hs.vocab.num_objects;
  const int junk = lay.junk_size();
  const double sd = std::sqrt(static_cast<double>(d));

  PlantedModel model;
  model.weights = DecoderWeights::zeros(cfg);
  model.reader = {cfg.num_layers - 2, 0};
  model.comparison = {cfg.num_layers - 1, 0};
  model.planted = spec.planted;
  if (model.planted.empty()) {
    std::vector<HeadIndex> eligible;
    for (int l = 0; l < cfg.num_layers - 2; ++l) {
      for (int h = 0; h < cfg.num_heads; ++h) eligible.push_back({l, h});
    }
    Rng rng(mix_seed(seed, 0));
    rng.shuffle(eligible);
    model.planted.assign(eligible.begin(), eligible.begin() + spec.num_planted);
  }
  std::sort(model.planted.begin(), model.planted.end());
  const double look_gain = c.look_gain_total / static_cast<double>(model.planted.size());

  auto& w = model.weights;
  for (int l = 0; l < cfg.num_layers; ++l) {
    for (int h = 0; h < cfg.num_heads; ++h) {
      const HeadIndex index{l, h};
      Rng rng(mix_seed(seed, 100 + static_cast<std::uint64_t>(cfg.flat_index(index))));
      HeadWeights& hw = w.head(index);
      Matrix& wo = w.layers[l].wo;
      const int row0 = h * d;

      if (std::binary_search(model.planted.begin(), model.planted.end(), index)) {
        hw.wq(lay.marker, 0) = spec.strength;
        hw.wk(lay.visual, 0) = sd;
        for (int s = 0; s < hs.slots; ++s) {
          hw.wk(lay.slot + s, 0) = c.slot_preference * rng.normal() * sd / spec.strength;
        }
        hw.wq(lay.bias, 1) = c.planted_text_bias;
        hw.wk(lay.text, 1) = sd;
        hw.wv(lay.visual, 0) = 1.0;
        for (int s = 0; s < hs.slots; ++s) {
          for (int k = 1; k < d; ++k) hw.wv(lay.slot + s, k) = rng.normal();
        }
        for (int r = lay.junk_begin; r < lay.junk_end; ++r) {
          for (int k = 1; k < d; ++k) hw.wv(r, k) = 0.1 * rng.normal();
        }
        wo(row0, lay.look) = look_gain;
      } else if (index == model.reader) {
        for (int k = 0; k < objects; ++k) {
          hw.wq(lay.text_object + k, k) = c.reader_match;
          hw.wk(lay.visual_object + k, k) = sd;
          hw.wv(lay.visual_object + k, k) = 1.0;
          wo(row0 + k, lay.evidence + k) = 1.0;
        }
        hw.wq(lay.look, objects) = c.reader_boost;
        hw.wk(lay.visual, objects) = sd;
        hw.wq(lay.bias, objects + 1) = c.reader_text;
        hw.wk(lay.text, objects + 1) = sd;
        for (int r = lay.junk_begin; r < lay.junk_end; ++r) {
          for (int k = 0; k < objects; ++k) hw.wv(r, k) = c.reader_noise * rng.normal();
        }
      } else if (index == model.comparison) {
        for (int k = 0; k < objects; ++k) {
          hw.wq(lay.evidence + k, k) = c.compare_gain;
          hw.wk(lay.text_object + k, k) = sd;
        }
        hw.wq(lay.bias, objects) = 1.0;
        hw.wk(lay.object_token, objects) = -c.compare_threshold * sd;
        hw.wv(lay.object_token, 0) = 1.0;
        wo(row0, lay.answer) = 1.0;
      } else {
        for (int r = lay.junk_begin; r < lay.junk_end; ++r) {
          for (int k = 0; k < d; ++k) hw.wq(r, k) = c.noise_weight * rng.normal();
        }
        for (int k = 0; k < d; ++k) hw.wq(lay.bias, k) = c.noise_weight * rng.normal();
        for (int r = lay.junk_begin; r < lay.junk_end; ++r) {
          for (int k = 0; k < d; ++k) hw.wk(r, k) = c.noise_weight * rng.normal();
        }
        for (int k = 0; k < d; ++k) hw.wk(lay.visual, k) = c.noise_weight * rng.normal();
        for (int k = 0; k < d; ++k) hw.wk(lay.text, k) = c.noise_weight * rng.normal();
        for (int r = lay.junk_begin; r < lay.junk_end; ++r) {
          for (int k = 0; k < d; ++k) hw.wv(r, k) = rng.normal() / std::sqrt(junk);
        }
        for (int k = 0; k < d; ++k) hw.wv(lay.visual, k) = 0.3 * rng.normal();
        const double out_sd = c.noise_output / std::sqrt(static_cast<double>(d * cfg.num_heads));
        for (int k = 0; k < d; ++k) {
          for (int col = lay.junk_begin; col < lay.junk_end; ++col) {
            wo(row0 + k, col) = out_sd * rng.normal();
          }
        }
      }
    }
  }

  Rng rng(mix_seed(seed, 1));
  const auto& vocab = hs.vocab;
  for (int t = 0; t < vocab.vocab_size(); ++t) {
    w.embedding(t, lay.bias) = 1.0;
    w.embedding(t, lay.text) = 1.0;
  }
  w.embedding(vocab.marker_token(), lay.marker) = 1.0;
  for (int f = 0; f < vocab.num_fillers; ++f) {
    for (int col = lay.junk_begin; col < lay.junk_end; ++col) {
      w.embedding(vocab.filler_token(f), col) = c.filler_scale * rng.normal() / std::sqrt(junk);
    }
  }
  for (int o = 0; o < objects; ++o) {
    w.embedding(vocab.object_token(o), lay.object_token) = 1.0;
    w.embedding(vocab.object_token(o), lay.text_object + o) = 1.0;
  }
  w.readout[lay.answer] = 1.0;
  w.readout[lay.bias] = -c.readout_threshold;
  w.validate();
  return model;
}

EvalResult score_records(std::vector<EvalRecord> records) {
  EvalResult r;
  std::size_t correct = 0, yes = 0, tp = 0, fp = 0, fn = 0;
  for (const auto& e : records) {
    if (e.predicted_yes == e.gold_yes) ++correct;
    if (e.predicted_yes) ++yes;
    if (e.predicted_yes && e.gold_yes) ++tp;
    if (e.predicted_yes && !e.gold_yes) ++fp;
    if (!e.predicted_yes && e.gold_yes) ++fn;
  }
  const double n = static_cast<double>(records.size());
  r.accuracy = records.empty() ? 0.0 : correct / n;
  r.yes_rate = records.empty() ? 0.0 : yes / n;
  const std::size_t f1_denominator = 2 * tp + fp + fn;
  r.f1 = f1_denominator == 0 ? 0.0 : 2.0 * tp / static_cast<double>(f1_denominator);
  r.records = std::move(records);
  return r;
}

EvalResult evaluate(const DecoderWeights& weights, const Corpus& corpus,
                    const InterventionConfig* config) {
  if (corpus.empty()) throw EmptyDatasetError("evaluate: empty corpus");
  std::optional<InterventionHook> hook;
  if (config != nullptr) hook.emplace(make_hook(weights.config, *config));
  const CaptureFlags none{.attention = false, .hidden = false};

  std::vector<EvalRecord> records;
  records.reserve(corpus.size());
  for (const auto& r : corpus) {
    const ForwardTrace trace =
        forward(weights, r.noncaption_input(), none, hook ? &*hook : nullptr);
    records.push_back({trace.answer_logit, trace.answer_logit > 0.0, r.query.gold_yes});
  }
  return score_records(std::move(records));
}

std::vector<SweepCell> sweep(const DecoderWeights& weights, const Corpus& corpus,
                             const ProbeArtifact& artifact, std::span<const double> alpha_grid,
                             std::span<const long> k_grid, InjectionSite site) {
  if (alpha_grid.empty() || k_grid.empty()) throw UsageError("sweep: empty alpha or K grid");
  std::vector<SweepCell> cells;
  for (double alpha : alpha_grid) {
    for (long k : k_grid) {
      const InterventionConfig config = config_from_artifact(artifact, k, alpha, site);
      cells.push_back({alpha, k, evaluate(weights, corpus, &config)});
    }
  }
  return cells;
}

std::size_t argmax_cell(std::span<const SweepCell> cells) {
  if (cells.empty()) throw EmptyDatasetError("sweep: no cells");
  std::size_t best = 0;
  for (std::size_t i = 1; i < cells.size(); ++i) {
    if (cells[i].result.accuracy > cells[best].result.accuracy) best = i;
  }
  return best;
}

void write_sweep_csv(std::ostream& out, std::span<const SweepCell> cells) {
  out << "alpha,k,accuracy,f1,yes_rate\n";
  for (const auto& c : cells) {
    out << format_value(c.alpha) << ',' << c.k << ',' << format_value(c.result.accuracy) << ','
        << format_value(c.result.f1) << ',' << format_value(c.result.yes_rate) << '\n';
  }
}

Description describe_scene(const DecoderWeights& weights, const VocabSpec& vocab,
                           const SyntheticScene& scene, const std::vector<int>& prompt, int steps,
                           const InterventionConfig* config) {
  std::optional<InterventionHook> hook;
  if (config != nullptr) hook.emplace(make_hook(weights.config, *config));
  const CaptureFlags none{.attention = false, .hidden = false};
  const int room = weights.config.max_seq_len - static_cast<int>(scene.embeddings.rows());

  Description out;
  SequenceInput input{scene.embeddings, prompt};
  for (int step = 0; step < steps && input.num_text() < room; ++step) {
    const ForwardTrace trace = forward(weights, input, none, hook ? &*hook : nullptr);
    const Vector logits = weights.embedding * trace.final_hidden;
    Eigen::Index next = 0;
    logits.maxCoeff(&next);
    const int token = static_cast<int>(next);
    input.tokens.push_back(token);
    out.tokens.push_back(token);
    if (vocab.is_object_token(token)) {
      ++out.object_mentions;
      if (!scene.contains(vocab.object_of(token))) ++out.hallucinated_mentions;
    }
  }
  return out;
}

long default_top_k(const ModelConfig& model) {
  const long heads = model.head_count();
  return (98 * heads + 999) / 1000;
}

}  // namespace cai
