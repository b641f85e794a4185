#pragma once
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "avsink/guidance.hpp"
#include "avsink/model.hpp"
#include "avsink/tracing.hpp"

namespace avsink {

extern const char* const kToolVersion;
constexpr const char* kOutEnvVar = "AVSINK_OUT";

std::uint64_t fnv1a64(const std::string& bytes);

struct SinkSettings {
  std::vector<int> n{2, 3, 4};
  std::optional<double> tau;  // fixed threshold; unset means percentile calibration
  double tau_percentile = 99.0;
  int d_sink_k = 2;
  int probe_count = 8;
};

struct GuidanceSettings {
  std::string method = "asd";
  AsdParams asd;
  double pai_alpha = 0.6;
  double vcd_strength = 1.0;
  double vcd_noise_scale = 3.0;
  int max_tokens = 6;
};

struct RunConfig {
  std::string model = "model.bin";
  std::string dataset = "dataset.jsonl";
  std::string captions = "captions.jsonl";
  std::string vocabulary = "vocab.json";
  std::string detector;  // optional detector JSONL
  std::uint64_t seed = 7;
  int n_samples = 120;
  int n_captions = 40;
  std::vector<int> d_sink;  // planted dims; empty draws from the seed
  SinkSettings sink;
  std::vector<std::string> strategies{"all", "object", "sink", "random", "unimodal_sink", "crossmodal_sink"};
  std::string corruption = "zero";
  GuidanceSettings guidance;
  std::string out;
  int threads = 1;

  void validate() const;
  // Canonical JSON of everything that affects outputs (paths to the output
  // directory and thread count excluded).
  std::string canonical_json() const;
  std::string config_hash() const;
  std::string resolve(const std::string& path) const;
};

RunConfig load_run_config(const std::string& path);
RunConfig run_config_from_json_text(const std::string& text);

// Output directory: explicit value, else the environment variable, else "out".
std::string default_out_dir();

void cmd_gen(const RunConfig& cfg, std::ostream& log);
void cmd_trace(const RunConfig& cfg, std::ostream& log);
void cmd_sinks(const RunConfig& cfg, std::ostream& log);
void cmd_decode(const RunConfig& cfg, std::ostream& log);
void cmd_eval(const RunConfig& cfg, std::ostream& log);

// Runs fn(i) for i in [0, n) on up to `threads` workers.
void parallel_for(int n, int threads, const std::function<void(int)>& fn);

}  // namespace avsink
