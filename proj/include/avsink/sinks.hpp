#pragma once
#include <vector>

#include "avsink/model.hpp"

namespace avsink {

struct SinkConfig {
  std::vector<int> d_sink;
  double tau = 1.0;
  int n = 2;  // global sinks keep the top floor(|T|/n) tokens
  void validate(int d_model) const;
};

// max over d in dims of |rms_norm(hidden)[d]| with unit gain.
double phi(const Vec& hidden, const std::vector<int>& dims, double rms_eps);

std::vector<int> layer_sinks(const ForwardRecord& rec, const SinkConfig& cfg, int layer, double rms_eps);

// s_j: number of layers in which position j is a layer-wise sink.
std::vector<int> sink_frequency(const ForwardRecord& rec, const SinkConfig& cfg, double rms_eps);

// Top floor(|T|/n) positions by frequency, ties to the lower index. Positions
// that are never a sink are not ranked.
std::vector<int> rank_global_sinks(const std::vector<int>& frequency, int n);
std::vector<int> global_sinks(const ForwardRecord& rec, const SinkConfig& cfg, double rms_eps);

// Top-k hidden dims by mean |rms_norm| of the BOS PreAttn state over probes and layers.
std::vector<int> discover_sink_dims(const std::vector<const ForwardRecord*>& probes, int bos, int k, double rms_eps);
std::vector<int> discover_sink_dims(const Model& model, const std::vector<Sample>& probes, int k);

// Percentile (linear interpolation) of |rms_norm| entries over PreAttn states of all layers.
double calibrate_tau(const std::vector<const ForwardRecord*>& probes, double percentile, double rms_eps);

double quantile_linear(std::vector<double> values, double q);

// (Av - Aa) / (Av + Aa), 0 when both are 0.
double mds_value(double a_video, double a_audio);
// Flat mean over heads and video (audio) query positions of attention to sink_pos.
double mds(const ForwardRecord& rec, int sink_pos, int layer, const TokenLayout& layout);

struct Partition {
  std::vector<int> uni, cross;
};

struct SinkReport {
  SinkConfig config;
  int seq_len = 0;
  std::vector<std::vector<int>> layer_sets;
  std::vector<int> frequency;
  std::vector<int> global;                   // ranked
  std::vector<std::vector<double>> layer_mds;  // per global sink, per layer
  std::vector<double> mean_mds;              // per global sink
  Partition audio, video;

  std::vector<int> unimodal() const;
  std::vector<int> crossmodal() const;
  double mean_mds_of(int pos) const;
};

std::pair<Partition, Partition> partition_sinks(const SinkReport& report, const TokenLayout& layout);

SinkReport build_sink_report(const ForwardRecord& rec, const TokenLayout& layout, const SinkConfig& cfg,
                             double rms_eps);

struct MdsStats {
  double median = 0, iqr = 0, std = 0;
};
MdsStats mds_stats(const std::vector<double>& values);

}  // namespace avsink
