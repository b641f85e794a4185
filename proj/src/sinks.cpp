#include "avsink/sinks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace avsink {

void SinkConfig::validate(int d_model) const {
  if (d_sink.empty()) throw ConfigError("sink config: D_sink is empty");
  std::set<int> uniq(d_sink.begin(), d_sink.end());
  if (uniq.size() != d_sink.size()) throw ConfigError("sink config: D_sink dims must be distinct");
  for (int d : d_sink)
    if (d < 0 || d >= d_model) throw ConfigError("sink config: D_sink dim out of range");
  if (!(tau > 0)) throw ConfigError("sink config: tau must be > 0");
  if (n < 1) throw ConfigError("sink config: N must be >= 1");
}

double phi(const Vec& hidden, const std::vector<int>& dims, double rms_eps) {
  if (dims.empty()) throw ConfigError("phi: empty D_sink");
  const Vec xn = rms_norm(hidden, Vec::Ones(hidden.size()).eval(), rms_eps);
  double best = 0;
  for (int d : dims) {
    if (d < 0 || d >= xn.size()) throw ConfigError("phi: sink dim out of range");
    best = std::max(best, std::abs(xn(d)));
  }
  return best;
}

std::vector<int> layer_sinks(const ForwardRecord& rec, const SinkConfig& cfg, int layer, double rms_eps) {
  if (layer < 0 || layer >= static_cast<int>(rec.hidden.size())) throw ConfigError("layer_sinks: layer out of range");
  const Mat& h = rec.pre_attn(layer);
  std::vector<int> out;
  for (Eigen::Index j = 0; j < h.rows(); ++j)
    if (phi(h.row(j).transpose(), cfg.d_sink, rms_eps) >= cfg.tau) out.push_back(static_cast<int>(j));
  return out;
}

std::vector<int> sink_frequency(const ForwardRecord& rec, const SinkConfig& cfg, double rms_eps) {
  const int n = static_cast<int>(rec.pre_attn(0).rows());
  std::vector<int> s(n, 0);
  for (int l = 0; l < static_cast<int>(rec.hidden.size()); ++l)
    for (int j : layer_sinks(rec, cfg, l, rms_eps)) ++s[j];
  return s;
}

std::vector<int> rank_global_sinks(const std::vector<int>& frequency, int n) {
  if (n < 1) throw ConfigError("global sinks: N must be >= 1");
  const size_t keep = frequency.size() / static_cast<size_t>(n);
  std::vector<int> idx;
  for (size_t j = 0; j < frequency.size(); ++j)
    if (frequency[j] > 0) idx.push_back(static_cast<int>(j));
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return frequency[a] > frequency[b]; });
  if (idx.size() > keep) idx.resize(keep);
  return idx;
}

std::vector<int> global_sinks(const ForwardRecord& rec, const SinkConfig& cfg, double rms_eps) {
  return rank_global_sinks(sink_frequency(rec, cfg, rms_eps), cfg.n);
}

std::vector<int> discover_sink_dims(const std::vector<const ForwardRecord*>& probes, int bos, int k, double rms_eps) {
  if (probes.empty()) throw ConfigError("discover_sink_dims: empty probe set");
  if (k < 1) throw ConfigError("discover_sink_dims: k must be >= 1");
  const Eigen::Index D = probes.front()->pre_attn(0).cols();
  if (k > D) throw ConfigError("discover_sink_dims: k exceeds d_model");
  std::vector<double> score(static_cast<size_t>(D), 0.0);
  size_t count = 0;
  for (const ForwardRecord* r : probes) {
    for (size_t l = 0; l < r->hidden.size(); ++l) {
      const Vec h = r->pre_attn(static_cast<int>(l)).row(bos).transpose();
      const Vec xn = rms_norm(h, Vec::Ones(h.size()).eval(), rms_eps);
      for (Eigen::Index d = 0; d < D; ++d) score[d] += std::abs(xn(d));
      ++count;
    }
  }
  for (double& s : score) s /= double(count);
  std::vector<int> idx(static_cast<size_t>(D));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return score[a] > score[b]; });
  idx.resize(static_cast<size_t>(k));
  return idx;
}

std::vector<int> discover_sink_dims(const Model& model, const std::vector<Sample>& probes, int k) {
  std::vector<ForwardRecord> recs;
  int bos = 0;
  for (const auto& s : probes) {
    Encoded e = encode(model, s, mcq_prompt(model));
    bos = e.layout.bos;
    recs.push_back(forward(model, e.x, e.layout));
  }
  std::vector<const ForwardRecord*> ptrs;
  for (const auto& r : recs) ptrs.push_back(&r);
  return discover_sink_dims(ptrs, bos, k, model.config.rms_eps);
}

double quantile_linear(std::vector<double> values, double q) {
  if (values.empty()) throw DataError("quantile of empty list");
  std::sort(values.begin(), values.end());
  const double h = (double(values.size()) - 1.0) * q;
  const size_t lo = static_cast<size_t>(std::floor(h));
  const size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (h - double(lo)) * (values[hi] - values[lo]);
}

double calibrate_tau(const std::vector<const ForwardRecord*>& probes, double percentile, double rms_eps) {
  if (probes.empty()) throw ConfigError("calibrate_tau: empty probe set");
  if (!(percentile >= 0 && percentile <= 100)) throw ConfigError("calibrate_tau: percentile must be in [0,100]");
  std::vector<double> vals;
  for (const ForwardRecord* r : probes)
    for (size_t l = 0; l < r->hidden.size(); ++l) {
      const Mat xn = rms_norm_rows(r->pre_attn(static_cast<int>(l)), rms_eps);
      for (Eigen::Index i = 0; i < xn.size(); ++i) vals.push_back(std::abs(xn.data()[i]));
    }
  return quantile_linear(std::move(vals), percentile / 100.0);
}

double mds_value(double a_video, double a_audio) {
  const double den = a_video + a_audio;
  if (den == 0.0) return 0.0;
  return (a_video - a_audio) / den;
}

namespace {
double mean_attention_to(const ForwardRecord& rec, int layer, int key, const std::vector<int>& queries) {
  if (queries.empty()) return 0.0;
  double s = 0;
  for (const Mat& a : rec.attn.at(layer))
    for (int q : queries) s += a(q, key);
  return s / double(rec.attn.at(layer).size() * queries.size());
}
}  // namespace

double mds(const ForwardRecord& rec, int sink_pos, int layer, const TokenLayout& layout) {
  if (sink_pos < 0 || sink_pos >= layout.size()) throw DataError("mds: sink position out of range");
  const double av = mean_attention_to(rec, layer, sink_pos, layout.positions_of(Segment::Video));
  const double aa = mean_attention_to(rec, layer, sink_pos, layout.positions_of(Segment::Audio));
  return mds_value(av, aa);
}

std::vector<int> SinkReport::unimodal() const {
  std::vector<int> out = audio.uni;
  out.insert(out.end(), video.uni.begin(), video.uni.end());
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<int> SinkReport::crossmodal() const {
  std::vector<int> out = audio.cross;
  out.insert(out.end(), video.cross.begin(), video.cross.end());
  std::sort(out.begin(), out.end());
  return out;
}

double SinkReport::mean_mds_of(int pos) const {
  for (size_t i = 0; i < global.size(); ++i)
    if (global[i] == pos) return mean_mds[i];
  throw DataError("position is not a global sink");
}

namespace {
Partition split_modality(std::vector<std::pair<double, int>> items, bool cross_is_top) {
  Partition p;
  if (items.size() < 2) return p;
  // Descending MDS, ties by position.
  std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  const size_t half = items.size() / 2;
  std::vector<int> top, bottom;
  for (size_t i = 0; i < half; ++i) top.push_back(items[i].second);
  for (size_t i = items.size() - half; i < items.size(); ++i) bottom.push_back(items[i].second);
  std::sort(top.begin(), top.end());
  std::sort(bottom.begin(), bottom.end());
  p.cross = cross_is_top ? top : bottom;
  p.uni = cross_is_top ? bottom : top;
  return p;
}
}  // namespace

std::pair<Partition, Partition> partition_sinks(const SinkReport& report, const TokenLayout& layout) {
  if (report.mean_mds.size() != report.global.size()) throw DataError("partition: MDS missing for global sinks");
  std::vector<std::pair<double, int>> a, v;
  for (size_t i = 0; i < report.global.size(); ++i) {
    const int p = report.global[i];
    if (layout.segment.at(p) == Segment::Audio) a.push_back({report.mean_mds[i], p});
    if (layout.segment.at(p) == Segment::Video) v.push_back({report.mean_mds[i], p});
  }
  // Audio sinks attended mostly by video are cross-modal, and the reverse for video sinks.
  return {split_modality(a, true), split_modality(v, false)};
}

SinkReport build_sink_report(const ForwardRecord& rec, const TokenLayout& layout, const SinkConfig& cfg,
                             double rms_eps) {
  cfg.validate(static_cast<int>(rec.pre_attn(0).cols()));
  SinkReport r;
  r.config = cfg;
  r.seq_len = layout.size();
  const int L = static_cast<int>(rec.hidden.size());
  r.frequency.assign(static_cast<size_t>(r.seq_len), 0);
  for (int l = 0; l < L; ++l) {
    r.layer_sets.push_back(layer_sinks(rec, cfg, l, rms_eps));
    for (int j : r.layer_sets.back()) ++r.frequency[j];
  }
  r.global = rank_global_sinks(r.frequency, cfg.n);
  for (int p : r.global) {
    std::vector<double> per_layer;
    double s = 0;
    for (int l = 0; l < L; ++l) {
      per_layer.push_back(mds(rec, p, l, layout));
      s += per_layer.back();
    }
    r.layer_mds.push_back(std::move(per_layer));
    r.mean_mds.push_back(s / double(L));
  }
  std::tie(r.audio, r.video) = partition_sinks(r, layout);
  return r;
}

MdsStats mds_stats(const std::vector<double>& values) {
  if (values.empty()) throw DataError("mds_stats: empty list");
  MdsStats s;
  s.median = quantile_linear(values, 0.5);
  s.iqr = quantile_linear(values, 0.75) - quantile_linear(values, 0.25);
  double mean = 0;
  for (double v : values) mean += v;
  mean /= double(values.size());
  double var = 0;
  for (double v : values) var += (v - mean) * (v - mean);
  s.std = std::sqrt(var / double(values.size()));
  return s;
}

}  // namespace avsink
