#pragma once
#include <optional>
#include <string>
#include <vector>

#include "avsink/model.hpp"
#include "avsink/sinks.hpp"

namespace avsink {

enum class Dominance { AudioDominant, VideoDominant, NoDominance };
const char* dominance_name(Dominance d);

Dominance classify_dominance(int p_av, int p_a, int p_v);

struct Predictions {
  Vec p_av, p_a, p_v;
  int y_av = 0, y_a = 0, y_v = 0;
};
// Joint, audio-only (video zeroed) and video-only (audio zeroed) predictions.
Predictions predict_modalities(const Model& model, const Sample& sample);

struct TraceTriplet {
  Dominance dominance = Dominance::NoDominance;
  Encoded clean_input, corrupt_input;
  ForwardRecord clean, corrupt;
  Vec p_clean, p_corrupt;
  int o_clean = 0, o_corrupt = 0;
};

struct CorruptionOptions {
  CorruptionMethod method = CorruptionMethod::ZeroInput;
  double noise_scale = 3.0;
  std::uint64_t noise_seed = 0;
};

TraceTriplet run_triplet(const Model& model, const Sample& sample, Dominance dominance,
                         const CorruptionOptions& corruption = {});

enum class Strategy { All, Object, Sink, Random, UnimodalSink, CrossmodalSink };
const char* strategy_name(Strategy s);
Strategy parse_strategy(const std::string& s);

struct SubsetRequest {
  Strategy strategy = Strategy::All;
  int n = 2;                // sparsity divisor for sink strategies
  int count = 0;            // Random only
  std::uint64_t seed = 0;   // Random only
};

struct TokenSubset {
  Strategy strategy = Strategy::All;
  int n = 0;
  std::vector<int> positions;
  int count() const { return static_cast<int>(positions.size()); }
};

Segment non_dominant_segment(Dominance d);

TokenSubset select_subset(const SubsetRequest& req, const TokenLayout& layout, const SinkReport* report,
                          Dominance dominance);

struct IndirectEffect {
  double ie_clean = 0, ie_corrupt = 0;
  int n_tokens = 0;
};

struct LayerWindow {
  int begin = 0, end = 0;  // [begin, end)
};

IndirectEffect indirect_effects(const Model& model, const TraceTriplet& triplet, const TokenSubset& subset,
                                Site site = Site::PreAttn, std::optional<LayerWindow> window = std::nullopt);

std::vector<std::pair<int, IndirectEffect>> layer_window_sweep(const Model& model, const TraceTriplet& triplet,
                                                              const TokenSubset& subset, int window,
                                                              Site site = Site::PreAttn);

struct TokenRank {
  std::vector<std::pair<int, double>> ranked;  // (position, delta) descending
  struct Composition {
    double k_percent = 0;
    int top = 0;
    double sink_or_object = 0, neither = 0;
  };
  std::vector<Composition> composition;
};

TokenRank token_rank(const Model& model, const TraceTriplet& triplet, const SinkReport& report,
                     const std::vector<double>& k_percents);

}  // namespace avsink
