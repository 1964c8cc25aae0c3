#pragma once

// Independent reference computations for the tests: plain loops over
// std::vector, no Eigen expressions, no library helpers beyond the types.

#include <cmath>
#include <limits>
#include <vector>

#include "cai/model.hpp"
#include "cai/rng.hpp"

namespace cai::testing {

using Grid = std::vector<std::vector<double>>;

inline Grid to_grid(const Matrix& m) {
  Grid g(m.rows(), std::vector<double>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) g[i][j] = m(i, j);
  return g;
}

inline Grid naive_matmul(const Grid& a, const Grid& b) {
  const std::size_t n = a.size(), k = b.size(), p = b.empty() ? 0 : b[0].size();
  Grid c(n, std::vector<double>(p, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < p; ++j)
      for (std::size_t t = 0; t < k; ++t) c[i][j] += a[i][t] * b[t][j];
  return c;
}

inline std::vector<double> scalar_softmax(const std::vector<double>& row) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : row) mx = std::max(mx, v);
  std::vector<double> out(row.size());
  double total = 0.0;
  for (std::size_t j = 0; j < row.size(); ++j) {
    out[j] = std::isinf(row[j]) && row[j] < 0 ? 0.0 : std::exp(row[j] - mx);
    total += out[j];
  }
  for (double& v : out) v /= total;
  return out;
}

inline Matrix random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = scale * rng.normal();
  return m;
}

inline DecoderWeights random_weights(const ModelConfig& cfg, std::uint64_t seed, double scale = 0.4) {
  Rng rng(seed);
  DecoderWeights w = DecoderWeights::zeros(cfg);
  const int D = cfg.model_dim(), d = cfg.head_dim;
  for (auto& layer : w.layers) {
    for (auto& h : layer.heads) {
      h.wq = random_matrix(rng, D, d, scale);
      h.wk = random_matrix(rng, D, d, scale);
      h.wv = random_matrix(rng, D, d, scale);
    }
    layer.wo = random_matrix(rng, D, D, scale / std::sqrt(D));
  }
  w.embedding = random_matrix(rng, cfg.vocab_size, D, 1.0);
  for (int c = 0; c < D; ++c) w.readout[c] = rng.normal();
  return w;
}

inline SequenceInput random_input(const ModelConfig& cfg, int m, int n, std::uint64_t seed) {
  Rng rng(seed);
  SequenceInput in;
  in.visual = random_matrix(rng, m, cfg.model_dim(), 1.0);
  for (int i = 0; i < n; ++i) in.tokens.push_back(static_cast<int>(rng.index(cfg.vocab_size)));
  return in;
}

struct OracleRun {
  std::vector<Grid> attention;              // flat head index
  std::vector<std::vector<double>> last;    // flat head index
  std::vector<Grid> hidden;                 // H^1 .. H^{L+1}
  double logit = 0.0;
};

// Straight-line decoder: every product and softmax written out.
inline OracleRun oracle_forward(const DecoderWeights& w, const SequenceInput& in) {
  const ModelConfig& cfg = w.config;
  const int D = cfg.model_dim(), d = cfg.head_dim, m = in.num_visual(), T = in.length();
  Grid x(T, std::vector<double>(D));
  for (int i = 0; i < m; ++i)
    for (int c = 0; c < D; ++c) x[i][c] = in.visual(i, c);
  for (int t = 0; t < in.num_text(); ++t)
    for (int c = 0; c < D; ++c) x[m + t][c] = w.embedding(in.tokens[t], c);

  OracleRun run;
  run.hidden.push_back(x);
  for (int l = 0; l < cfg.num_layers; ++l) {
    Grid concat(T, std::vector<double>(D, 0.0));
    for (int h = 0; h < cfg.num_heads; ++h) {
      const HeadWeights& hw = w.layers[l].heads[h];
      const Grid q = naive_matmul(x, to_grid(hw.wq));
      const Grid k = naive_matmul(x, to_grid(hw.wk));
      const Grid v = naive_matmul(x, to_grid(hw.wv));
      Grid a(T);
      for (int i = 0; i < T; ++i) {
        std::vector<double> row(T);
        for (int j = 0; j < T; ++j) {
          double s = 0.0;
          for (int c = 0; c < d; ++c) s += q[i][c] * k[j][c];
          row[j] = j > i ? -std::numeric_limits<double>::infinity() : s / std::sqrt(double(d));
        }
        a[i] = scalar_softmax(row);
      }
      const Grid o = naive_matmul(a, v);
      for (int i = 0; i < T; ++i)
        for (int c = 0; c < d; ++c) concat[i][h * d + c] = o[i][c];
      run.attention.push_back(a);
      run.last.push_back(o[T - 1]);
    }
    const Grid delta = naive_matmul(concat, to_grid(w.layers[l].wo));
    for (int i = 0; i < T; ++i)
      for (int c = 0; c < D; ++c) x[i][c] += delta[i][c];
    run.hidden.push_back(x);
  }
  for (int c = 0; c < D; ++c) run.logit += x[T - 1][c] * w.readout[c];
  return run;
}

inline ModelConfig small_config(int L = 2, int H = 2, int d = 4, int vocab = 7, int max_len = 16) {
  ModelConfig cfg;
  cfg.num_layers = L;
  cfg.num_heads = H;
  cfg.head_dim = d;
  cfg.vocab_size = vocab;
  cfg.max_seq_len = max_len;
  return cfg;
}

}  // namespace cai::testing
