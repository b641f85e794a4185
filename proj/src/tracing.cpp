#include "avsink/tracing.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

namespace avsink {

const char* dominance_name(Dominance d) {
  switch (d) {
    case Dominance::AudioDominant: return "audio";
    case Dominance::VideoDominant: return "video";
    case Dominance::NoDominance: return "none";
  }
  return "?";
}

Dominance classify_dominance(int p_av, int p_a, int p_v) {
  if (p_av == p_a && p_a != p_v) return Dominance::AudioDominant;
  if (p_av == p_v && p_v != p_a) return Dominance::VideoDominant;
  return Dominance::NoDominance;
}

Predictions predict_modalities(const Model& model, const Sample& sample) {
  const auto prompt = mcq_prompt(model);
  auto run = [&](const CorruptionSpec& c) {
    Encoded e = encode(model, sample, prompt, c);
    return answer_distribution(model, forward(model, e.x, e.layout), e.layout);
  };
  Predictions p;
  p.p_av = run({});
  p.p_a = run({CorruptionMethod::ZeroInput, false, true});
  p.p_v = run({CorruptionMethod::ZeroInput, true, false});
  p.y_av = argmax_first(p.p_av);
  p.y_a = argmax_first(p.p_a);
  p.y_v = argmax_first(p.p_v);
  return p;
}

TraceTriplet run_triplet(const Model& model, const Sample& sample, Dominance dominance,
                         const CorruptionOptions& corruption) {
  if (dominance == Dominance::NoDominance) throw DataError("run_triplet: sample has no dominant modality");
  if (corruption.method == CorruptionMethod::None) throw ConfigError("run_triplet: a corruption method is required");
  const auto prompt = mcq_prompt(model);
  TraceTriplet t;
  t.dominance = dominance;
  t.clean_input = encode(model, sample, prompt);
  CorruptionSpec cspec;
  cspec.method = corruption.method;
  cspec.audio = dominance == Dominance::AudioDominant;
  cspec.video = dominance == Dominance::VideoDominant;
  cspec.noise_scale = corruption.noise_scale;
  cspec.noise_seed = corruption.noise_seed;
  t.corrupt_input = encode(model, sample, prompt, cspec);
  t.clean = forward(model, t.clean_input.x, t.clean_input.layout);
  t.corrupt = forward(model, t.corrupt_input.x, t.corrupt_input.layout);
  t.p_clean = answer_distribution(model, t.clean, t.clean_input.layout);
  t.p_corrupt = answer_distribution(model, t.corrupt, t.corrupt_input.layout);
  t.o_clean = argmax_first(t.p_clean);
  t.o_corrupt = argmax_first(t.p_corrupt);
  return t;
}

const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::All: return "all";
    case Strategy::Object: return "object";
    case Strategy::Sink: return "sink";
    case Strategy::Random: return "random";
    case Strategy::UnimodalSink: return "unimodal_sink";
    case Strategy::CrossmodalSink: return "crossmodal_sink";
  }
  return "?";
}

Strategy parse_strategy(const std::string& s) {
  for (Strategy st : {Strategy::All, Strategy::Object, Strategy::Sink, Strategy::Random, Strategy::UnimodalSink,
                      Strategy::CrossmodalSink})
    if (s == strategy_name(st)) return st;
  throw ConfigError("unknown tracing strategy: " + s);
}

Segment non_dominant_segment(Dominance d) {
  if (d == Dominance::AudioDominant) return Segment::Video;
  if (d == Dominance::VideoDominant) return Segment::Audio;
  throw DataError("no non-dominant modality without a dominance label");
}

TokenSubset select_subset(const SubsetRequest& req, const TokenLayout& layout, const SinkReport* report,
                          Dominance dominance) {
  const Segment seg = non_dominant_segment(dominance);
  const std::vector<int> segment = layout.positions_of(seg);
  TokenSubset out;
  out.strategy = req.strategy;
  out.n = req.n;
  auto need_report = [&]() -> const SinkReport& {
    if (!report) throw ConfigError(std::string("strategy ") + strategy_name(req.strategy) + " needs a sink report");
    if (report->config.n != req.n)
      throw ConfigError("sink report was built with N=" + std::to_string(report->config.n) + ", requested N=" +
                        std::to_string(req.n));
    return *report;
  };
  switch (req.strategy) {
    case Strategy::All:
      out.positions = segment;
      break;
    case Strategy::Object:
      for (int p : segment)
        if (layout.object[p]) out.positions.push_back(p);
      break;
    case Strategy::Sink: {
      const SinkReport& r = need_report();
      for (int p : r.global)
        if (layout.segment.at(p) == seg) out.positions.push_back(p);
      std::sort(out.positions.begin(), out.positions.end());
      break;
    }
    case Strategy::UnimodalSink: {
      const SinkReport& r = need_report();
      out.positions = seg == Segment::Audio ? r.audio.uni : r.video.uni;
      break;
    }
    case Strategy::CrossmodalSink: {
      const SinkReport& r = need_report();
      out.positions = seg == Segment::Audio ? r.audio.cross : r.video.cross;
      break;
    }
    case Strategy::Random: {
      if (req.count < 0 || req.count > static_cast<int>(segment.size()))
        throw ConfigError("random subset count exceeds the segment length");
      std::vector<int> pool = segment;
      std::mt19937_64 rng(req.seed);
      std::shuffle(pool.begin(), pool.end(), rng);
      out.positions.assign(pool.begin(), pool.begin() + req.count);
      std::sort(out.positions.begin(), out.positions.end());
      break;
    }
  }
  return out;
}

namespace {
void check_triplet(const TraceTriplet& t) {
  if (t.clean.hidden.empty() || t.corrupt.hidden.empty() || t.p_corrupt.size() == 0)
    throw DataError("indirect_effects: empty triplet");
}
}  // namespace

IndirectEffect indirect_effects(const Model& model, const TraceTriplet& triplet, const TokenSubset& subset,
                                Site site, std::optional<LayerWindow> window) {
  check_triplet(triplet);
  const int L = model.config.n_layers;
  LayerWindow w = window.value_or(LayerWindow{0, L});
  if (w.begin < 0 || w.end > L || w.begin > w.end) throw ConfigError("indirect_effects: bad layer window");
  InterventionPlan plan;
  for (int l = w.begin; l < w.end; ++l)
    for (int p : subset.positions)
      plan.patches.push_back({l, site, p, triplet.clean.hidden[l][static_cast<int>(site)].row(p).transpose()});
  const ForwardRecord restored =
      forward(model, triplet.corrupt_input.x, triplet.corrupt_input.layout, plan);
  const Vec p_r = answer_distribution(model, restored, triplet.corrupt_input.layout);
  IndirectEffect ie;
  ie.ie_clean = p_r(triplet.o_clean) - triplet.p_corrupt(triplet.o_clean);
  ie.ie_corrupt = triplet.p_corrupt(triplet.o_corrupt) - p_r(triplet.o_corrupt);
  ie.n_tokens = subset.count();
  return ie;
}

std::vector<std::pair<int, IndirectEffect>> layer_window_sweep(const Model& model, const TraceTriplet& triplet,
                                                              const TokenSubset& subset, int window, Site site) {
  const int L = model.config.n_layers;
  if (window <= 0) throw ConfigError("layer_window_sweep: window must be >= 1");
  if (window > L) throw ConfigError("layer_window_sweep: window exceeds layer count");
  std::vector<std::pair<int, IndirectEffect>> out;
  for (int s = 0; s + window <= L; ++s)
    out.push_back({s, indirect_effects(model, triplet, subset, site, LayerWindow{s, s + window})});
  return out;
}

TokenRank token_rank(const Model& model, const TraceTriplet& triplet, const SinkReport& report,
                     const std::vector<double>& k_percents) {
  const TokenLayout& lay = triplet.clean_input.layout;
  const Segment seg = non_dominant_segment(triplet.dominance);
  const std::set<int> sinks(report.global.begin(), report.global.end());
  TokenRank tr;
  for (int p : lay.positions_of(seg)) {
    TokenSubset one;
    one.strategy = Strategy::All;
    one.positions = {p};
    tr.ranked.push_back({p, indirect_effects(model, triplet, one).ie_clean});
  }
  std::stable_sort(tr.ranked.begin(), tr.ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  for (double k : k_percents) {
    if (!(k > 0 && k <= 100)) throw ConfigError("token_rank: k percent must be in (0,100]");
    TokenRank::Composition c;
    c.k_percent = k;
    c.top = std::max(1, static_cast<int>(std::ceil(k / 100.0 * double(tr.ranked.size()))));
    int hit = 0;
    for (int i = 0; i < c.top; ++i) {
      const int p = tr.ranked[i].first;
      if (sinks.count(p) || lay.object[p]) ++hit;
    }
    c.sink_or_object = double(hit) / double(c.top);
    c.neither = double(c.top - hit) / double(c.top);
    tr.composition.push_back(c);
  }
  return tr;
}

}  // namespace avsink
