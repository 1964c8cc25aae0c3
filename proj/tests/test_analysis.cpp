#include <doctest.h>

#include <sstream>

#include "cai/analysis.hpp"
#include "cai/errors.hpp"
#include "support.hpp"

using namespace cai;
using namespace cai::testing;

namespace {

VisualAttentionProfile profile_from(const Matrix& sums, std::size_t count) {
  return {sums, count};
}

}  // namespace

TEST_CASE("visual attention sum reads the last row over the visual prefix") {
  const ModelConfig cfg = small_config(2, 2, 4);
  const DecoderWeights w = random_weights(cfg, 4, 1.0);
  const SequenceInput in = random_input(cfg, 3, 3, 5);
  const ForwardTrace t = forward(w, in);
  const OracleRun ref = oracle_forward(w, in);
  const Matrix s = visual_attention_sum(t, 3);
  for (int l = 0; l < 2; ++l) {
    for (int h = 0; h < 2; ++h) {
      const auto& last = ref.attention[l * 2 + h][5];
      CHECK(std::abs(s(l, h) - (last[0] + last[1] + last[2])) < 1e-12);
      CHECK(s(l, h) >= 0.0);
      CHECK(s(l, h) <= 1.0 + 1e-12);
    }
  }
}

TEST_CASE("profiles accumulate and merge like plain sums") {
  const ModelConfig cfg = small_config(2, 3, 2, 5, 12);
  const DecoderWeights w = random_weights(cfg, 6, 1.0);
  std::vector<ForwardTrace> traces;
  Matrix manual = Matrix::Zero(2, 3);
  for (int b = 0; b < 6; ++b) {
    traces.push_back(forward(w, random_input(cfg, 1 + b % 3, 2, 50 + b)));
    manual += visual_attention_sum(traces.back(), 1 + b % 3);
  }
  const auto all = accumulate_profile(traces);
  CHECK(all.sample_count == 6);
  CHECK((all.sums - manual).cwiseAbs().maxCoeff() < 1e-14);

  const auto first = accumulate_profile(std::span(traces).first(2));
  const auto rest = accumulate_profile(std::span(traces).subspan(2));
  const auto merged = merge_profiles(first, rest);
  CHECK(merged.sample_count == 6);
  CHECK((merged.sums - all.sums).cwiseAbs().maxCoeff() < 1e-14);

  REQUIRE_THROWS_AS(accumulate_profile({}), EmptyDatasetError);
}

TEST_CASE("identical profiles give zero rates everywhere") {
  Matrix s(2, 2);
  s << 0.4, 0.1, 0.7, 0.9;
  const auto r = change_rates(profile_from(s, 3), profile_from(s, 3));
  CHECK(r.delta.cwiseAbs().maxCoeff() == 0.0);
  CHECK(r.head_rates.cwiseAbs().maxCoeff() == 0.0);
  CHECK(r.layer_rates.cwiseAbs().maxCoeff() == 0.0);
  CHECK(r.fraction_enhanced == 0.0);
  CHECK(r.fraction_layers_enhanced == 0.0);
}

TEST_CASE("change rates against a hand computation") {
  Matrix cap(2, 2), non(2, 2);
  cap << 0.6, 0.2, 0.3, 0.5;
  non << 0.3, 0.4, 0.0, 0.5;
  const auto r = change_rates(profile_from(cap, 1), profile_from(non, 1));
  CHECK(r.head_rates(0, 0) == doctest::Approx(1.0));
  CHECK(r.head_rates(0, 1) == doctest::Approx(-0.5));
  CHECK(std::isnan(r.head_rates(1, 0)));
  CHECK(r.head_rates(1, 1) == 0.0);
  CHECK(r.layer_rates[0] == doctest::Approx(0.1 / 0.7));
  CHECK(r.layer_rates[1] == doctest::Approx(0.3 / 0.5));
  // defined rates: 1.0, -0.5, 0.0 -> one of three strictly enhanced
  CHECK(r.fraction_enhanced == doctest::Approx(1.0 / 3.0));
  CHECK(r.fraction_layers_enhanced == 1.0);

  std::ostringstream heads, layers;
  write_head_csv(heads, r.head_rates);
  write_layer_csv(layers, r.layer_rates);
  CHECK(heads.str() == "layer,head,value\n0,0,1\n0,1,-0.5\n1,0,null\n1,1,0\n");
  CHECK(layers.str() == "layer,rate\n0,0.142857143\n1,0.6\n");
}

TEST_CASE("rates need matching shapes and sample counts") {
  const auto a = profile_from(Matrix::Ones(2, 2), 4);
  REQUIRE_THROWS_AS(change_rates(a, profile_from(Matrix::Ones(2, 3), 4)), ShapeError);
  REQUIRE_THROWS_AS(change_rates(a, profile_from(Matrix::Ones(2, 2), 5)), ShapeError);
}

TEST_CASE("format_value uses nine significant digits") {
  CHECK(format_value(1.0 / 3.0) == "0.333333333");
  CHECK(format_value(123456789.25) == "123456789");
  CHECK(format_value(std::nan("")) == "null");
}
