#include <numeric>
#include <random>

#include "avsink/errors.hpp"
#include "avsink/guidance.hpp"
#include "avsink/halleval.hpp"
#include "doctest.h"
#include "fixtures.hpp"

using namespace avsink;
using avsink::testing::caption_samples;
using avsink::testing::planted;

namespace {
SinkSets sets_for(const Sample& s) {
  const Model& m = planted();
  return sink_sets(caption_sink_report(m, s, caption_prompt(), SinkConfig{m.truth.d_sink, 3.0, 2}));
}
}  // namespace

TEST_CASE("default parameters") {
  const AsdParams p;
  CHECK(p.alpha == 0.6);
  CHECK(p.gamma_max == 0.6);
  CHECK(p.gate == 0.6);
  CHECK(p.text_mass == 0.5);
  CHECK(p.momentum == 0.7);
}

TEST_CASE("modulate_row arithmetic") {
  Vec row(4);
  row << 0.2, 0.2, 0.3, 0.3;
  const Vec raw = modulate_row_raw(row, {0}, {1}, 0.6, 1);
  CHECK(raw[0] == doctest::Approx(0.32).epsilon(1e-15));
  CHECK(raw[1] == doctest::Approx(0.08).epsilon(1e-15));
  CHECK(raw[2] == 0.3);
  const Vec mod = modulate_row(row, {0}, {1}, 0.6, 1);
  CHECK(std::abs(mod.sum() - 1) < 1e-12);
  const Vec same = modulate_row(row, {0}, {1}, 0.0, 1);
  CHECK(same == row);
  const Vec rev = modulate_row_raw(row, {0}, {1}, 0.6, -1);
  CHECK(rev[0] == doctest::Approx(0.08).epsilon(1e-15));
  CHECK_THROWS_AS(modulate_row(row, {0, 1}, {1}, 0.6, 1), ConfigError);
  CHECK_THROWS_AS(modulate_row(row, {7}, {1}, 0.6, 1), DataError);
}

TEST_CASE("property: modulated rows stay stochastic") {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 500; ++trial) {
    const int n = 4 + trial % 10;
    Vec row(n);
    for (int i = 0; i < n; ++i) row[i] = u(rng);
    row /= row.sum();
    const Vec m = modulate_row(row, {0, 2}, {1, 3}, 2.0 * u(rng), trial % 2 ? 1 : -1);
    CHECK(std::abs(m.sum() - 1) < 1e-9);
    CHECK(m.minCoeff() >= 0);
  }
}

TEST_CASE("gamma functions") {
  CHECK(gamma_base(0.3, 0.1, 1e-8) == doctest::Approx(0.75).epsilon(1e-7));
  CHECK(gamma_base(0.0, 0.4, 1e-8) == 0.0);
  CHECK(gamma_base(0.0, 0.0, 1e-8) == 0.0);
  const AsdParams p;
  CHECK(std::abs(gamma_target(0.75, 0.3, p) - 0.45) < 1e-12);
  CHECK(gamma_target(0.5, 0.1, p) == 0.0);
  CHECK(gamma_target(0.9, 0.6, p) == 0.0);
  CHECK(std::abs(gamma_smooth(0.0, 0.45, 0.7) - 0.135) < 1e-12);
  CHECK(gamma_smooth(0.2, 0.45, 0.0) == 0.45);
  double g = 0;
  for (int i = 0; i < 200; ++i) g = gamma_smooth(g, 0.3, 0.7);
  CHECK(std::abs(g - 0.3) < 1e-12);
}

TEST_CASE("alpha = 0 and gamma forced to 0 reproduce vanilla") {
  const Model& m = planted();
  AsdParams zero_alpha;
  zero_alpha.alpha = 0;
  AsdParams no_gamma;
  no_gamma.gamma_max = 0;
  for (int i = 0; i < 10; ++i) {
    const Sample& s = caption_samples()[i];
    const auto van = vanilla_decode(m, s, caption_prompt(), 6).tokens;
    CHECK(asd_decode(m, s, caption_prompt(), sets_for(s), zero_alpha, 6).tokens == van);
    CHECK(asd_decode(m, s, caption_prompt(), sets_for(s), no_gamma, 6).tokens == van);
    CHECK(pai_decode(m, s, caption_prompt(), 0.0, 6).tokens == van);
    CHECK(vcd_decode(m, s, caption_prompt(), 5, 0.0, 6).tokens == van);
  }
}

TEST_CASE("ASD traces") {
  const Model& m = planted();
  const Sample& s = caption_samples()[0];
  const DecodeResult r = asd_decode(m, s, caption_prompt(), sets_for(s), AsdParams{}, 6);
  CHECK_FALSE(r.trace.fallback);
  REQUIRE(!r.trace.steps.empty());
  double prev = 0;
  for (const auto& st : r.trace.steps) {
    CHECK(st.gamma >= 0);
    CHECK(st.gamma <= 0.6);
    CHECK(std::abs(st.gamma - (0.7 * prev + 0.3 * st.gamma_hat)) < 1e-12);
    prev = st.gamma;
  }
  const DecodeResult again = asd_decode(m, s, caption_prompt(), sets_for(s), AsdParams{}, 6);
  CHECK(again.tokens == r.tokens);
  const DecodeResult fb = asd_decode(m, s, caption_prompt(), SinkSets{}, AsdParams{}, 6);
  CHECK(fb.trace.fallback);
  CHECK(fb.tokens == vanilla_decode(m, s, caption_prompt(), 6).tokens);
}

TEST_CASE("baselines are deterministic") {
  const Model& m = planted();
  const Sample& s = caption_samples()[3];
  CHECK(vcd_decode(m, s, caption_prompt(), 5, 1.0, 6).tokens == vcd_decode(m, s, caption_prompt(), 5, 1.0, 6).tokens);
  CHECK(pai_decode(m, s, caption_prompt(), 0.6, 6).tokens == pai_decode(m, s, caption_prompt(), 0.6, 6).tokens);
  CHECK(parse_guidance("reverse-asd") == GuidanceMethod::ReverseAsd);
  CHECK_THROWS_AS(parse_guidance("greedy"), ConfigError);
}

TEST_CASE("ASD lowers hallucination on the planted corpus") {
  const Model& m = planted();
  ObjectVocabulary vocab;
  for (int k = 0; k < m.n_classes(); ++k) vocab.objects.push_back(class_name(k));
  std::vector<std::string> van, asd;
  std::vector<std::set<std::string>> gt;
  for (const auto& s : caption_samples()) {
    van.push_back(render_caption(m, vanilla_decode(m, s, caption_prompt(), 6).tokens));
    asd.push_back(render_caption(m, asd_decode(m, s, caption_prompt(), sets_for(s), AsdParams{}, 6).tokens));
    gt.push_back({class_name(s.label)});
  }
  CHECK(chair(asd, gt, vocab).c_i < chair(van, gt, vocab).c_i);
}

TEST_CASE("hallucinated mentions lean on unimodal sinks") {
  const Model& m = planted();
  AsdParams observe;
  observe.alpha = 0;  // records attention statistics without steering
  std::vector<std::vector<StepMasses>> traces;
  std::vector<ObjectEvent> events;
  for (const auto& s : caption_samples()) {
    const DecodeResult r = asd_decode(m, s, caption_prompt(), sets_for(s), observe, 6);
    std::vector<StepMasses> steps;
    for (size_t t = 0; t < r.trace.steps.size(); ++t) {
      const auto& st = r.trace.steps[t];
      steps.push_back({st.layer_uni, st.layer_cross});
      for (int k = 0; k < m.n_classes(); ++k)
        if (st.token_id == m.object_token(k))
          events.push_back({traces.size(), t, k == s.label ? ObjectKind::Genuine : ObjectKind::Hallucinated});
    }
    traces.push_back(std::move(steps));
  }
  const AttentionMassReport rep = attention_mass_report(traces, events);
  REQUIRE(rep.n_genuine > 0);
  REQUIRE(rep.n_hallucinated > 0);
  auto share = [](const std::vector<double>& u, const std::vector<double>& c) {
    const double su = std::accumulate(u.begin(), u.end(), 0.0), sc = std::accumulate(c.begin(), c.end(), 0.0);
    return su / (su + sc);
  };
  CHECK(share(rep.hallucinated_uni, rep.hallucinated_cross) > share(rep.genuine_uni, rep.genuine_cross));
  for (const auto* v : {&rep.genuine_uni, &rep.genuine_cross, &rep.hallucinated_uni, &rep.hallucinated_cross})
    for (double x : *v) {
      CHECK(x >= 0);
      CHECK(x <= 1);
    }
}
