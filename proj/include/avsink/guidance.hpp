#pragma once
#include <string>
#include <vector>

#include "avsink/model.hpp"
#include "avsink/sinks.hpp"

namespace avsink {

struct AsdParams {
  double alpha = 0.6;
  double gamma_max = 0.6;
  double gate = 0.6;       // gamma_base below this disables guidance
  double text_mass = 0.5;  // text attention above this disables guidance
  double momentum = 0.7;
  double eps = 1e-8;
  void validate() const;
};

// Row with cross columns moved by +sign*alpha*|A| and uni columns by -sign*alpha*|A|,
// before clamping and renormalization.
Vec modulate_row_raw(const Vec& row, const std::vector<int>& cross, const std::vector<int>& uni, double alpha,
                     int sign);
Vec modulate_row(const Vec& row, const std::vector<int>& cross, const std::vector<int>& uni, double alpha, int sign);

double gamma_base(double a_uni, double a_cross, double eps);
double gamma_target(double gamma_base, double r_t, const AsdParams& p);
double gamma_smooth(double gamma_prev, double gamma_hat, double beta);

struct GuidanceStep {
  int t = 0;
  double a_uni = 0, a_cross = 0, r_t = 0;
  double gamma_base = 0, gamma_hat = 0, gamma = 0;
  int token_id = -1;
  Vec logp_orig, logp_cali;
  std::vector<double> layer_uni, layer_cross;  // mean over heads, per layer
};

struct GuidanceTrace {
  std::vector<GuidanceStep> steps;
  bool fallback = false;  // no sink sets: decoded as vanilla
};

struct DecodeResult {
  std::vector<int> tokens;  // generated tokens, EOS included when emitted
  GuidanceTrace trace;
};

enum class GuidanceMethod { Vanilla, Asd, ReverseAsd, Pai, Vcd };
const char* guidance_name(GuidanceMethod g);
GuidanceMethod parse_guidance(const std::string& s);

struct SinkSets {
  std::vector<int> uni, cross;
};
SinkSets sink_sets(const SinkReport& report);

DecodeResult vanilla_decode(const Model& model, const Sample& sample, const std::vector<int>& prompt, int max_tokens);

// Runs the original pass, derives gamma from its attention, runs the calibrated
// pass and decodes greedily from the blended log-distribution. reverse flips the
// modulation sign and scales alpha by the cross-modal attention share.
DecodeResult asd_decode(const Model& model, const Sample& sample, const std::vector<int>& prompt,
                        const SinkSets& sinks, const AsdParams& params, int max_tokens, bool reverse = false);

DecodeResult pai_decode(const Model& model, const Sample& sample, const std::vector<int>& prompt, double alpha,
                        int max_tokens);

DecodeResult vcd_decode(const Model& model, const Sample& sample, const std::vector<int>& prompt,
                        std::uint64_t noise_seed, double strength, int max_tokens, double noise_scale = 3.0);

// Sink sets from the sample's prompt-only forward pass.
SinkReport caption_sink_report(const Model& model, const Sample& sample, const std::vector<int>& prompt,
                               const SinkConfig& cfg);

std::string render_caption(const Model& model, const std::vector<int>& tokens);

}  // namespace avsink
