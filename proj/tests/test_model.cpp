#include <doctest.h>

#include <cmath>

#include "cai/errors.hpp"
#include "cai/model.hpp"
#include "cai/model_io.hpp"
#include "support.hpp"

using namespace cai;
using namespace cai::testing;

TEST_CASE("forward matches the straight-line decoder") {
  const ModelConfig cfg = small_config(2, 2, 4);
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const DecoderWeights w = random_weights(cfg, seed);
    const SequenceInput in = random_input(cfg, 3, 2, seed + 100);
    const ForwardTrace t = forward(w, in);
    const OracleRun ref = oracle_forward(w, in);

    REQUIRE(t.hidden.size() == ref.hidden.size());
    for (std::size_t l = 0; l < ref.hidden.size(); ++l)
      for (int i = 0; i < 5; ++i)
        for (int c = 0; c < cfg.model_dim(); ++c)
          CHECK(std::abs(t.hidden[l](i, c) - ref.hidden[l][i][c]) < 1e-10);
    for (int f = 0; f < cfg.head_count(); ++f) {
      for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j) CHECK(std::abs(t.attention[f](i, j) - ref.attention[f][i][j]) < 1e-10);
      for (int c = 0; c < cfg.head_dim; ++c) CHECK(std::abs(t.last_outputs[f][c] - ref.last[f][c]) < 1e-10);
    }
    CHECK(std::abs(t.answer_logit - ref.logit) < 1e-10);
  }
}

TEST_CASE("captured attention is causal and row-stochastic") {
  const ModelConfig cfg = small_config(3, 4, 4, 11, 20);
  const DecoderWeights w = random_weights(cfg, 42, 1.5);
  const ForwardTrace t = forward(w, random_input(cfg, 5, 6, 7));
  for (const Matrix& a : t.attention) {
    for (int i = 0; i < a.rows(); ++i) {
      CHECK(std::abs(a.row(i).sum() - 1.0) < 1e-12);
      for (int j = i + 1; j < a.cols(); ++j) CHECK(a(i, j) == 0.0);
    }
  }
}

TEST_CASE("capture flags control what the trace keeps") {
  const ModelConfig cfg = small_config();
  const DecoderWeights w = random_weights(cfg, 3);
  const SequenceInput in = random_input(cfg, 2, 2, 4);
  const ForwardTrace lean = forward(w, in, {.attention = false, .hidden = false});
  const ForwardTrace full = forward(w, in);
  CHECK_FALSE(lean.has_attention());
  CHECK(lean.hidden.empty());
  REQUIRE_THROWS_AS(lean.attention_at({0, 0}), Error);
  CHECK(lean.answer_logit == full.answer_logit);
  CHECK(lean.final_hidden == full.final_hidden);
}

TEST_CASE("bad inputs are rejected") {
  const ModelConfig cfg = small_config(2, 2, 4, 7, 6);
  const DecoderWeights w = random_weights(cfg, 1);
  SUBCASE("no visual prefix") { REQUIRE_THROWS_AS(forward(w, random_input(cfg, 0, 2, 1)), ShapeError); }
  SUBCASE("no text") { REQUIRE_THROWS_AS(forward(w, random_input(cfg, 2, 0, 1)), ShapeError); }
  SUBCASE("too long") { REQUIRE_THROWS_AS(forward(w, random_input(cfg, 4, 3, 1)), ShapeError); }
  SUBCASE("token out of range") {
    SequenceInput in = random_input(cfg, 2, 2, 1);
    in.tokens[1] = 7;
    REQUIRE_THROWS_AS(forward(w, in), ConfigError);
  }
  SUBCASE("visual width") {
    SequenceInput in = random_input(cfg, 2, 2, 1);
    in.visual = Matrix::Zero(2, 5);
    REQUIRE_THROWS_AS(forward(w, in), ShapeError);
  }
  SUBCASE("inconsistent weights") {
    DecoderWeights bad = w;
    bad.layers[1].wo = Matrix::Zero(8, 7);
    REQUIRE_THROWS_AS(bad.validate(), ShapeError);
  }
}

TEST_CASE("hook validation") {
  const ModelConfig cfg = small_config();
  const Vector s = Vector::Ones(4);
  REQUIRE_THROWS_AS(InterventionHook(cfg, 1.0, {{{2, 0}, s}}), ConfigError);
  REQUIRE_THROWS_AS(InterventionHook(cfg, 1.0, {{{0, 1}, s}, {{0, 1}, s}}), ConfigError);
  REQUIRE_THROWS_AS(InterventionHook(cfg, 1.0, {{{0, 1}, Vector::Ones(3)}}), ShapeError);

  ModelConfig other = cfg;
  other.num_layers = 3;
  const InterventionHook hook(other, 1.0, {{{2, 0}, s}});
  REQUIRE_THROWS_AS(forward(random_weights(cfg, 1), random_input(cfg, 2, 2, 2), {}, &hook), ConfigError);
}

TEST_CASE("hook adds alpha times the shift before the output projection") {
  const ModelConfig cfg = small_config();
  const DecoderWeights w = random_weights(cfg, 8);
  const SequenceInput in = random_input(cfg, 3, 2, 9);
  Vector s(4);
  s << 0.5, -1.0, 2.0, 0.25;
  const double alpha = 0.75;
  const InterventionHook hook(cfg, alpha, {{{1, 1}, s}});
  const ForwardTrace base = forward(w, in);
  const ForwardTrace hooked = forward(w, in, {}, &hook);

  // Layer 0 is untouched; layer 1 receives alpha * s * W_o[head rows] on every row.
  CHECK(hooked.hidden[1] == base.hidden[1]);
  const Eigen::RowVectorXd expected = alpha * s.transpose() * w.layers[1].wo.middleRows(4, 4);
  for (int i = 0; i < 5; ++i) {
    const Eigen::RowVectorXd diff = hooked.hidden[2].row(i) - base.hidden[2].row(i);
    CHECK((diff - expected).cwiseAbs().maxCoeff() < 1e-12);
  }
  CHECK((hooked.last_output({1, 1}) - base.last_output({1, 1}) - alpha * s).cwiseAbs().maxCoeff() < 1e-15);

  const InterventionHook last_only(cfg, alpha, {{{1, 1}, s}}, InjectionSite::kLastToken);
  const ForwardTrace tail = forward(w, in, {}, &last_only);
  for (int i = 0; i < 4; ++i) CHECK(tail.hidden[2].row(i) == base.hidden[2].row(i));
  CHECK(((tail.hidden[2].row(4) - base.hidden[2].row(4)) - expected).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("weights round-trip through JSON bit for bit") {
  const ModelConfig cfg = small_config(2, 3, 2, 5, 9);
  const DecoderWeights w = random_weights(cfg, 77);
  const DecoderWeights back = weights_from_json(weights_to_json(w));
  CHECK(back.config == cfg);
  CHECK(back.embedding == w.embedding);
  CHECK(back.readout == w.readout);
  for (int l = 0; l < 2; ++l) {
    CHECK(back.layers[l].wo == w.layers[l].wo);
    for (int h = 0; h < 3; ++h) {
      CHECK(back.layers[l].heads[h].wq == w.layers[l].heads[h].wq);
      CHECK(back.layers[l].heads[h].wv == w.layers[l].heads[h].wv);
    }
  }
  CHECK(model_hash(back) == model_hash(w));
  CHECK(model_hash(random_weights(cfg, 78)) != model_hash(w));
}

TEST_CASE("weights JSON with wrong array length is rejected") {
  const DecoderWeights w = random_weights(small_config(), 1);
  auto j = weights_to_json(w);
  j["layers"][0]["heads"][1]["wk"].erase(0);
  REQUIRE_THROWS_AS(weights_from_json(j), ShapeError);
}
