#include "cai/probe.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "cai/model_io.hpp"
#include "cai/rng.hpp"

namespace cai {

using nlohmann::json;

MaskedAttention masked_last_token_attention(const HeadWeights& head, const Matrix& hidden,
                                            int num_visual) {
  const Eigen::Index rows = hidden.rows();
  if (num_visual < 0 || num_visual > rows) {
    throw ShapeError("masked attention: m = " + std::to_string(num_visual) +
                     " outside sequence of length " + std::to_string(rows));
  }
  const Eigen::RowVectorXd query = hidden.row(rows - 1) * head.wq;
  const Matrix keys = hidden * head.wk;
  Eigen::RowVectorXd scores = (keys * query.transpose()).transpose();
  scores /= std::sqrt(static_cast<double>(head.wq.cols()));
  for (Eigen::Index j = num_visual; j < rows; ++j) scores[j] = mask_value();

  MaskedAttention r;
  const Matrix weights = row_softmax(scores);
  r.weights = weights.row(0).transpose();
  r.output = (weights * (hidden * head.wv)).row(0).transpose();
  return r;
}

Vector masked_last_token_output(const DecoderWeights& weights, const Matrix& hidden, int num_visual,
                                const HeadIndex& index) {
  if (!weights.config.contains(index)) {
    throw ConfigError("masked output: head " + to_string(index) + " is outside the model");
  }
  return masked_last_token_attention(weights.head(index), hidden, num_visual).output;
}

Vector masked_last_token_output(const DecoderWeights& weights, const SequenceInput& input,
                                const HeadIndex& index) {
  if (!weights.config.contains(index)) {
    throw ConfigError("masked output: head " + to_string(index) + " is outside the model");
  }
  const ForwardTrace trace = forward(weights, input, {.attention = false, .hidden = true});
  return masked_last_token_output(weights, trace.hidden[index.layer], input.num_visual(), index);
}

ProbeDataset build_probe_dataset(const DecoderWeights& weights, std::span<const ProbePair> pairs) {
  if (pairs.empty()) throw EmptyDatasetError("probe dataset: no pairs");
  const auto& cfg = weights.config;
  const int d = cfg.head_dim;
  const auto batch = static_cast<Eigen::Index>(pairs.size());

  ProbeDataset ds;
  ds.num_layers = cfg.num_layers;
  ds.num_heads = cfg.num_heads;
  ds.head_dim = d;
  ds.pairs = pairs.size();
  ds.heads.resize(cfg.head_count());
  for (auto& head : ds.heads) {
    head.features.resize(2 * batch, d);
    head.labels.resize(2 * pairs.size());
    head.caption_outputs.resize(batch, d);
    head.non_caption_outputs.resize(batch, d);
  }

  const CaptureFlags capture{.attention = false, .hidden = true};
  for (Eigen::Index b = 0; b < batch; ++b) {
    const auto& pair = pairs[b];
    if (pair.caption.visual.rows() != pair.non_caption.visual.rows() ||
        pair.caption.visual.cols() != pair.non_caption.visual.cols() ||
        pair.caption.visual != pair.non_caption.visual) {
      throw PairingError("probe dataset: pair " + std::to_string(b) +
                         " does not share one visual prefix");
    }
    const int m = pair.caption.num_visual();
    const ForwardTrace cap = forward(weights, pair.caption, capture);
    const ForwardTrace non = forward(weights, pair.non_caption, capture);
    for (int l = 0; l < cfg.num_layers; ++l) {
      for (int h = 0; h < cfg.num_heads; ++h) {
        const HeadIndex index{l, h};
        auto& head = ds.heads[cfg.flat_index(index)];
        const auto& hw = weights.head(index);
        head.features.row(2 * b) = masked_last_token_attention(hw, cap.hidden[l], m).output.transpose();
        head.features.row(2 * b + 1) =
            masked_last_token_attention(hw, non.hidden[l], m).output.transpose();
        head.labels[2 * b] = 1;
        head.labels[2 * b + 1] = 0;
        head.caption_outputs.row(b) = cap.last_output(index).transpose();
        head.non_caption_outputs.row(b) = non.last_output(index).transpose();
      }
    }
  }
  return ds;
}

double LinearSvm::decision(const Eigen::Ref<const Eigen::RowVectorXd>& x) const {
  const Eigen::RowVectorXd z = (x - mean.transpose()).cwiseQuotient(scale.transpose());
  return z.dot(weights.transpose()) + bias;
}

namespace {

void check_labels(std::span<const int> labels, Eigen::Index rows, int min_per_class) {
  if (static_cast<Eigen::Index>(labels.size()) != rows) {
    throw ShapeError("classifier: label count does not match point count");
  }
  std::size_t positives = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw ConfigError("classifier: labels must be 0 or 1");
    positives += static_cast<std::size_t>(y);
  }
  const std::size_t negatives = labels.size() - positives;
  if (positives == 0 || negatives == 0) {
    throw ClassImbalanceError("classifier: only one class present");
  }
  if (positives < static_cast<std::size_t>(min_per_class) ||
      negatives < static_cast<std::size_t>(min_per_class)) {
    throw ClassImbalanceError("classifier: need at least " + std::to_string(min_per_class) +
                              " points per class");
  }
}

}  // namespace

LinearSvm fit_linear_svm(const Matrix& points, std::span<const int> labels,
                         const SvmOptions& options) {
  check_labels(labels, points.rows(), 1);
  const Eigen::Index n = points.rows();
  const Eigen::Index dim = points.cols();

  LinearSvm svm;
  svm.mean = Vector::Zero(dim);
  svm.scale = Vector::Ones(dim);
  if (options.standardize) {
    svm.mean = points.colwise().mean().transpose();
    for (Eigen::Index c = 0; c < dim; ++c) {
      const double var = (points.col(c).array() - svm.mean[c]).square().mean();
      const double sd = std::sqrt(var);
      svm.scale[c] = sd > 1e-12 ? sd : 1.0;
    }
  }
  const Matrix z = (points.rowwise() - svm.mean.transpose()).array().rowwise() /
                   svm.scale.transpose().array();
  Vector y(n);
  for (Eigen::Index i = 0; i < n; ++i) y[i] = labels[i] == 1 ? 1.0 : -1.0;

  svm.weights = Vector::Zero(dim);
  svm.bias = 0.0;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (int t = 1; t <= options.iterations; ++t) {
    const double step = options.learning_rate / t;
    const Vector margins = y.cwiseProduct((z * svm.weights).array().matrix() +
                                          Vector::Constant(n, svm.bias));
    Vector grad_w = options.lambda * svm.weights;
    double grad_b = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (margins[i] < 1.0) {
        grad_w.noalias() -= (inv_n * y[i]) * z.row(i).transpose();
        grad_b -= inv_n * y[i];
      }
    }
    svm.weights -= step * grad_w;
    svm.bias -= step * grad_b;
  }
  return svm;
}

std::vector<int> stratified_folds(std::span<const int> labels, int folds, std::uint64_t seed) {
  if (folds < 2) throw ConfigError("cross-validation: need at least 2 folds");
  std::vector<int> assignment(labels.size(), 0);
  Rng rng(seed);
  for (int cls : {0, 1}) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == cls) members.push_back(i);
    }
    rng.shuffle(members);
    for (std::size_t p = 0; p < members.size(); ++p) {
      assignment[members[p]] = static_cast<int>(p % static_cast<std::size_t>(folds));
    }
  }
  return assignment;
}

double train_head_classifier(const Matrix& points, std::span<const int> labels,
                             const SvmOptions& options) {
  check_labels(labels, points.rows(), std::max(2, options.folds));
  const std::vector<int> fold_of = stratified_folds(labels, options.folds, options.seed);

  double accuracy_sum = 0.0;
  for (int f = 0; f < options.folds; ++f) {
    std::vector<Eigen::Index> train;
    std::vector<Eigen::Index> test;
    for (std::size_t i = 0; i < fold_of.size(); ++i) {
      (fold_of[i] == f ? test : train).push_back(static_cast<Eigen::Index>(i));
    }
    const Matrix train_x = points(train, Eigen::all);
    std::vector<int> train_y;
    train_y.reserve(train.size());
    for (auto i : train) train_y.push_back(labels[i]);

    const LinearSvm svm = fit_linear_svm(train_x, train_y, options);
    std::size_t correct = 0;
    for (auto i : test) {
      if (svm.predict(points.row(i)) == labels[i]) ++correct;
    }
    accuracy_sum += static_cast<double>(correct) / static_cast<double>(test.size());
  }
  return accuracy_sum / options.folds;
}

Matrix probe_accuracies(const ProbeDataset& dataset, const SvmOptions& options) {
  Matrix acc(dataset.num_layers, dataset.num_heads);
  for (int l = 0; l < dataset.num_layers; ++l) {
    for (int h = 0; h < dataset.num_heads; ++h) {
      const auto& head = dataset.at({l, h});
      acc(l, h) = train_head_classifier(head.features, head.labels, options);
    }
  }
  return acc;
}

HeadRanking rank_heads(const Matrix& accuracies, long k) {
  if (k < 0) throw ConfigError("rank_heads: K must be non-negative");
  HeadRanking ranking;
  ranking.accuracies = accuracies;
  for (int l = 0; l < accuracies.rows(); ++l) {
    for (int h = 0; h < accuracies.cols(); ++h) ranking.order.push_back({l, h});
  }
  std::stable_sort(ranking.order.begin(), ranking.order.end(),
                   [&](const HeadIndex& a, const HeadIndex& b) {
                     return accuracies(a.layer, a.head) > accuracies(b.layer, b.head);
                   });
  const auto take = std::min<std::size_t>(static_cast<std::size_t>(k), ranking.order.size());
  ranking.top.assign(ranking.order.begin(), ranking.order.begin() + static_cast<long>(take));
  return ranking;
}

ShiftVectorBank compute_shift_vectors(const ProbeDataset& dataset) {
  if (dataset.pairs == 0 || dataset.heads.empty()) {
    throw EmptyDatasetError("shift vectors: empty dataset");
  }
  ShiftVectorBank bank;
  bank.num_layers = dataset.num_layers;
  bank.num_heads = dataset.num_heads;
  bank.head_dim = dataset.head_dim;
  bank.shifts.reserve(dataset.heads.size());
  const double inv_b = 1.0 / static_cast<double>(dataset.pairs);
  for (const auto& head : dataset.heads) {
    Vector sum = Vector::Zero(dataset.head_dim);
    for (Eigen::Index b = 0; b < head.caption_outputs.rows(); ++b) {
      sum += (head.caption_outputs.row(b) - head.non_caption_outputs.row(b)).transpose();
    }
    bank.shifts.push_back(sum * inv_b);
  }
  return bank;
}

HeadRanking ProbeArtifact::ranking(long k) const {
  HeadRanking r = rank_heads(accuracies, k);
  r.model_hash = model_hash;
  return r;
}

ProbeArtifact run_probe(const DecoderWeights& weights, std::span<const ProbePair> pairs, long k,
                        const SvmOptions& options) {
  const ProbeDataset dataset = build_probe_dataset(weights, pairs);
  ProbeArtifact artifact;
  artifact.model_hash = model_hash(weights);
  artifact.accuracies = probe_accuracies(dataset, options);
  artifact.top_k = rank_heads(artifact.accuracies, k).top;
  artifact.bank = compute_shift_vectors(dataset);
  artifact.bank.model_hash = artifact.model_hash;
  artifact.classifier = options;
  return artifact;
}

json probe_artifact_to_json(const ProbeArtifact& a) {
  json accuracies = json::array();
  for (Eigen::Index l = 0; l < a.accuracies.rows(); ++l) {
    json row = json::array();
    for (Eigen::Index h = 0; h < a.accuracies.cols(); ++h) row.push_back(a.accuracies(l, h));
    accuracies.push_back(std::move(row));
  }
  json top = json::array();
  for (const auto& index : a.top_k) {
    top.push_back({{"layer", index.layer},
                   {"head", index.head},
                   {"accuracy", a.accuracies(index.layer, index.head)}});
  }
  json shifts = json::object();
  for (int l = 0; l < a.bank.num_layers; ++l) {
    for (int h = 0; h < a.bank.num_heads; ++h) {
      shifts[to_string(HeadIndex{l, h})] = vector_to_json(a.bank.at({l, h}));
    }
  }
  const auto& c = a.classifier;
  return json{{"model_hash", a.model_hash},
              {"accuracies", std::move(accuracies)},
              {"top_k", std::move(top)},
              {"shift_vectors", std::move(shifts)},
              {"classifier_meta",
               {{"family", "linear_svm"},
                {"loss", a.loss},
                {"lambda", c.lambda},
                {"iterations", c.iterations},
                {"learning_rate", c.learning_rate},
                {"learning_rate_decay", "1/t"},
                {"folds", c.folds},
                {"seed", c.seed},
                {"standardize", c.standardize}}}};
}

ProbeArtifact probe_artifact_from_json(const json& j) {
  ProbeArtifact a;
  try {
    a.model_hash = j.at("model_hash").get<std::string>();
    const auto& acc = j.at("accuracies");
    const auto layers = static_cast<Eigen::Index>(acc.size());
    if (layers == 0) throw ShapeError("probe artifact: empty accuracy grid");
    const auto heads = static_cast<Eigen::Index>(acc.at(0).size());
    a.accuracies.resize(layers, heads);
    for (Eigen::Index l = 0; l < layers; ++l) {
      if (static_cast<Eigen::Index>(acc.at(l).size()) != heads) {
        throw ShapeError("probe artifact: ragged accuracy grid");
      }
      for (Eigen::Index h = 0; h < heads; ++h) a.accuracies(l, h) = acc.at(l).at(h).get<double>();
    }
    for (const auto& t : j.at("top_k")) {
      a.top_k.push_back({t.at("layer").get<int>(), t.at("head").get<int>()});
    }
    const auto& shifts = j.at("shift_vectors");
    a.bank.num_layers = static_cast<int>(layers);
    a.bank.num_heads = static_cast<int>(heads);
    a.bank.model_hash = a.model_hash;
    for (int l = 0; l < layers; ++l) {
      for (int h = 0; h < heads; ++h) {
        const std::string key = to_string(HeadIndex{l, h});
        const auto& v = shifts.at(key);
        if (l == 0 && h == 0) a.bank.head_dim = static_cast<int>(v.size());
        a.bank.shifts.push_back(vector_from_json(v, a.bank.head_dim, "shift vector " + key));
      }
    }
    const auto& meta = j.at("classifier_meta");
    a.loss = meta.at("loss").get<std::string>();
    a.classifier.lambda = meta.at("lambda").get<double>();
    a.classifier.iterations = meta.at("iterations").get<int>();
    a.classifier.learning_rate = meta.at("learning_rate").get<double>();
    a.classifier.folds = meta.at("folds").get<int>();
    a.classifier.seed = meta.at("seed").get<std::uint64_t>();
    a.classifier.standardize = meta.at("standardize").get<bool>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("probe artifact: ") + e.what());
  }
  return a;
}

void save_probe_artifact(const ProbeArtifact& artifact, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << probe_artifact_to_json(artifact).dump(2) << '\n';
}

ProbeArtifact load_probe_artifact(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read probe artifact " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("probe artifact " + path.string() + ": " + e.what());
  }
  return probe_artifact_from_json(j);
}

}  // namespace cai
