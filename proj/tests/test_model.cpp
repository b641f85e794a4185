#include <algorithm>
#include <sstream>

#include "avsink/errors.hpp"
#include "avsink/model.hpp"
#include "avsink/sinks.hpp"
#include "avsink/tracing.hpp"
#include "doctest.h"
#include "fixtures.hpp"

using namespace avsink;
using avsink::testing::planted;
using avsink::testing::task_samples;

namespace {
std::string bytes_of(const Model& m) {
  std::ostringstream os;
  save_model(m, os);
  return os.str();
}
}  // namespace

TEST_CASE("model build is deterministic and round-trips") {
  const Model a = build_planted_model(ModelConfig{}, 7, PlantSpec{});
  const Model b = build_planted_model(ModelConfig{}, 7, PlantSpec{});
  const std::string sa = bytes_of(a);
  CHECK(sa == bytes_of(b));
  CHECK(sa != bytes_of(build_planted_model(ModelConfig{}, 8, PlantSpec{})));
  std::istringstream in(sa);
  const Model c = load_model(in);
  CHECK(bytes_of(c) == sa);
  CHECK(c.truth.d_sink == a.truth.d_sink);
}

TEST_CASE("model file corruption is reported") {
  std::string s = bytes_of(planted());
  {
    std::istringstream in(s.substr(0, s.size() / 2));
    CHECK_THROWS_AS(load_model(in), DataError);
  }
  s[0] = 'X';
  std::istringstream in(s);
  CHECK_THROWS_AS(load_model(in), DataError);
}

TEST_CASE("infeasible plants are rejected") {
  PlantSpec p;
  p.sinks_per_modality = 30;
  CHECK_THROWS_AS(build_planted_model(ModelConfig{}, 1, p), ConfigError);
  PlantSpec q;
  q.d_sink = {5, 500};
  CHECK_THROWS_AS(build_planted_model(ModelConfig{}, 1, q), ConfigError);
  ModelConfig c;
  c.n_layers = 3;
  CHECK_THROWS_AS(build_planted_model(c, 1, PlantSpec{}), ConfigError);
}

TEST_CASE("planted sink dims {5,17} are recovered") {
  PlantSpec p;
  p.d_sink = {5, 17};
  const Model m = build_planted_model(ModelConfig{}, 21, p);
  CHECK(m.truth.d_sink == std::vector<int>{5, 17});
  const auto samples = generate_dataset(m, TaskSpec{}, 6, 2);
  CHECK(discover_sink_dims(m, samples, 2) == std::vector<int>{5, 17});
}

TEST_CASE("dataset generation") {
  const Model& m = planted();
  CHECK_THROWS_AS(generate_dataset(m, TaskSpec{}, 0, 1), ConfigError);
  auto dump = [&](std::uint64_t seed) {
    std::ostringstream os;
    for (const auto& s : generate_dataset(m, TaskSpec{}, 200, seed)) write_sample_jsonl(os, s);
    return os.str();
  };
  const std::string a = dump(1);
  CHECK(a == dump(1));
  std::istringstream in(a);
  const auto back = read_samples_jsonl(in);
  REQUIRE(back.size() == 200);
  std::ostringstream again;
  for (const auto& s : back) write_sample_jsonl(again, s);
  CHECK(again.str() == a);
  CHECK(m.n_classes() == 20);
  for (const auto& s : back) CHECK(s.options.size() == 20u);
}

TEST_CASE("sample JSONL errors") {
  std::istringstream bad("{\"id\": \"x\"\n");
  CHECK_THROWS_AS(read_samples_jsonl(bad), DataError);
  std::istringstream meta("{\"_meta\": {\"seed\": 1}}\n");
  CHECK(read_samples_jsonl(meta).empty());
}

TEST_CASE("audio-dominant accuracy on 200 samples") {
  const Model& m = planted();
  TaskSpec task;
  task.class_dominance.assign(m.n_classes(), Modality::Audio);
  const auto samples = generate_dataset(m, task, 200, 5);
  int audio_ok = 0, video_ok = 0, kept = 0;
  for (const auto& s : samples) {
    const Predictions p = predict_modalities(m, s);
    audio_ok += p.y_a == s.label;
    video_ok += p.y_v == s.label;
    kept += classify_dominance(p.y_av, p.y_a, p.y_v) == Dominance::AudioDominant;
  }
  CHECK(audio_ok >= 190);
  CHECK(video_ok <= static_cast<int>(200 * (1.0 / 20 + 0.15)));
  CHECK(kept >= 100);
}

TEST_CASE("encode layout and corruption") {
  const Model& m = planted();
  const Sample& s = task_samples().front();
  const Encoded e = encode(m, s, mcq_prompt(m));
  const int T = m.n_frames();
  CHECK(e.layout.audio_positions.size() == static_cast<size_t>(T));
  CHECK(e.layout.video_positions.size() == static_cast<size_t>(T));
  CHECK(e.layout.size() == 1 + 2 * T + static_cast<int>(mcq_prompt(m).size()));
  CHECK(e.layout.option_positions.size() == 20u);
  CHECK(e.layout.answer_position == e.layout.size() - 1);

  CorruptionSpec zero{CorruptionMethod::ZeroInput, true, false};
  Sample zeroed = s;
  zeroed.audio.setZero();
  CHECK(encode(m, s, mcq_prompt(m), zero).x == encode(m, zeroed, mcq_prompt(m)).x);

  const Encoded mean = encode(m, s, mcq_prompt(m), CorruptionSpec{CorruptionMethod::MeanEmbedding, true, false});
  const Vec first = mean.x.row(e.layout.audio_positions[0]) - m.pos.row(e.layout.audio_positions[0]);
  Vec avg = Vec::Zero(m.config.d_model);
  for (int p : e.layout.audio_positions) avg += (e.x.row(p) - m.pos.row(p)).transpose();
  avg /= T;
  for (int p : e.layout.audio_positions) {
    CHECK(((mean.x.row(p) - m.pos.row(p)).transpose() - first).cwiseAbs().maxCoeff() == 0.0);
    CHECK(((mean.x.row(p) - m.pos.row(p)).transpose() - avg).cwiseAbs().maxCoeff() < 1e-12);
  }
  for (int p : e.layout.video_positions) CHECK(mean.x.row(p) == e.x.row(p));

  const CorruptionSpec g{CorruptionMethod::GaussianNoise, true, false, 3.0, 99};
  CHECK(encode(m, s, mcq_prompt(m), g).x == encode(m, s, mcq_prompt(m), g).x);

  Sample wrong = s;
  wrong.audio = Mat::Zero(T, 3);
  CHECK_THROWS_AS(encode(m, wrong, mcq_prompt(m)), DataError);
}

TEST_CASE("forward interventions") {
  const Model& m = planted();
  const Sample& s = task_samples()[1];
  const Encoded clean = encode(m, s, mcq_prompt(m));
  const ForwardRecord a = forward(m, clean.x, clean.layout);
  const ForwardRecord b = forward(m, clean.x, clean.layout, InterventionPlan{});
  CHECK(a.logits == b.logits);

  InterventionPlan self;
  for (int l = 0; l < m.config.n_layers; ++l)
    for (int p = 0; p < clean.layout.size(); ++p) self.patches.push_back({l, Site::PreAttn, p, a.pre_attn(l).row(p)});
  CHECK((forward(m, clean.x, clean.layout, self).logits - a.logits).cwiseAbs().maxCoeff() < 1e-12);

  const Encoded bad = encode(m, s, mcq_prompt(m), CorruptionSpec{CorruptionMethod::ZeroInput, true, false});
  CHECK((forward(m, bad.x, bad.layout, self).logits - a.logits).cwiseAbs().maxCoeff() < 1e-9);

  InterventionPlan oob;
  oob.patches.push_back({m.config.n_layers, Site::PreAttn, 0, a.pre_attn(0).row(0)});
  CHECK_THROWS_AS(forward(m, clean.x, clean.layout, oob), DataError);
  InterventionPlan oob2;
  oob2.patches.push_back({0, Site::PreAttn, clean.layout.size(), a.pre_attn(0).row(0)});
  CHECK_THROWS_AS(forward(m, clean.x, clean.layout, oob2), DataError);

  for (const auto& layer : a.attn)
    for (const auto& h : layer)
      for (Eigen::Index r = 0; r < h.rows(); ++r) CHECK(std::abs(h.row(r).sum() - 1) < 1e-12);
}

TEST_CASE("answer distribution") {
  const Model& m = planted();
  int correct = 0;
  for (const auto& s : task_samples()) {
    const Encoded e = encode(m, s, mcq_prompt(m));
    const ForwardRecord r = forward(m, e.x, e.layout);
    const Vec p = answer_distribution(m, r, e.layout);
    CHECK(p.size() == 20);
    CHECK(std::abs(p.sum() - 1) < 1e-9);
    correct += argmax_first(p) == s.label;
  }
  CHECK(correct == static_cast<int>(task_samples().size()));

  ForwardRecord flat;
  const Encoded e = encode(m, task_samples()[0], mcq_prompt(m));
  flat.logits = Mat::Zero(e.layout.size(), m.config.vocab_size);
  const Vec u = answer_distribution(m, flat, e.layout);
  for (int i = 0; i < 20; ++i) CHECK(u[i] == doctest::Approx(1.0 / 20).epsilon(1e-15));

  TokenLayout no_answer = e.layout;
  no_answer.answer_position = -1;
  CHECK_THROWS_AS(answer_distribution(m, flat, no_answer), DataError);
  CHECK(argmax_first(Vec::Ones(4).eval()) == 0);
}
