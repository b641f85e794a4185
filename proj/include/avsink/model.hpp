#pragma once
#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "avsink/numkernel.hpp"

namespace avsink {

enum class Segment { Audio, Video, Text };
enum class Modality { Audio, Video };
enum class Site { PreAttn = 0, PostAttn = 1, PostMlp = 2 };
constexpr int kNumSites = 3;

const char* segment_name(Segment s);
const char* modality_name(Modality m);
const char* site_name(Site s);
Site parse_site(const std::string& s);

struct ModelConfig {
  int n_layers = 8;
  int n_heads = 8;
  int d_model = 192;
  int d_head = 24;
  int d_mlp = 64;
  int vocab_size = 48;
  int max_seq_len = 80;
  double rms_eps = 1e-6;

  void validate() const;
};

// What to plant. Dimension indices in d_sink are physical hidden indices; when
// empty, d_sink_size indices are drawn from the seed.
struct PlantSpec {
  int n_classes = 20;
  int n_frames = 20;
  int d_audio = 32;
  int d_video = 32;
  int sinks_per_modality = 4;
  double cross_fraction = 0.5;
  std::vector<int> d_sink;
  int d_sink_size = 2;
};

// Fixed token ids of the synthetic vocabulary.
namespace tok {
constexpr int kBos = 0;
constexpr int kEos = 1;
constexpr int kQuestion = 2;
constexpr int kAnswer = 3;
constexpr int kCaption = 4;
constexpr int kArticle = 5;  // "a"
constexpr int kAnd = 6;
constexpr int kOptionBase = 8;
}  // namespace tok

// Raw-feature directions the planted encoders respond to. Samples are built
// from these so they line up with the model.
struct FeatureBank {
  Mat audio_proto;  // n_classes x d_audio
  Mat video_proto;  // n_classes x d_video
  Vec audio_salience;
  Vec audio_presence;
  Vec video_presence;
};

struct PlantedTruth {
  std::vector<int> d_sink;
  int planting_layer = 1;
  int bos_position = 0;
  // Sink frames (time steps) per modality, split by routing role.
  std::vector<int> audio_uni_steps, audio_cross_steps;
  std::vector<int> video_uni_steps, video_cross_steps;
  // Cross-modal routing: each cross sink position gathers content of this modality.
  std::vector<std::pair<int, Modality>> routing;
  std::vector<Modality> class_dominance;
  int object_step_begin = 0, object_step_end = 10;
  FeatureBank features;

  std::vector<int> audio_sink_positions() const;
  std::vector<int> video_sink_positions() const;
  std::vector<int> crossmodal_positions() const;
  std::vector<int> unimodal_positions() const;
  // Every position carrying massive activations from the planting layer on (BOS included).
  std::vector<int> all_sink_positions() const;
};

struct HeadWeights {
  Mat wq, wk, wv;  // d_head x d_model
  Mat wo;          // d_model x d_head
};

struct LayerWeights {
  std::vector<HeadWeights> heads;
  Mat mlp_in;  // d_mlp x d_model
  Vec mlp_bias;
  Mat mlp_out;  // d_model x d_mlp
};

struct Model {
  ModelConfig config;
  PlantSpec plant;
  std::uint64_t seed = 0;
  std::string meta;  // free-form provenance JSON, stored verbatim
  std::vector<LayerWeights> layers;
  Mat audio_enc;  // d_model x d_audio
  Mat video_enc;  // d_model x d_video
  Vec audio_bias, video_bias;
  Mat embed;    // vocab x d_model
  Mat unembed;  // vocab x d_model
  Mat pos;      // max_seq_len x d_model
  PlantedTruth truth;

  int n_classes() const { return plant.n_classes; }
  int n_frames() const { return plant.n_frames; }
  int option_token(int cls) const { return tok::kOptionBase + cls; }
  int object_token(int cls) const { return tok::kOptionBase + plant.n_classes + cls; }
  int audio_position(int step) const { return 1 + 2 * step; }
  int video_position(int step) const { return 2 + 2 * step; }
};

Model build_planted_model(const ModelConfig& config, std::uint64_t seed, const PlantSpec& plant);

void save_model(const Model& m, std::ostream& out);
Model load_model(std::istream& in);
void save_model_file(const Model& m, const std::string& path);
Model load_model_file(const std::string& path);

struct ObjectSpan {
  Modality modality = Modality::Audio;
  int cls = 0;
  int begin = 0;  // frame index, inclusive
  int end = 0;    // exclusive
};

struct Sample {
  std::string id;
  Mat audio;  // n_frames x d_audio
  Mat video;  // n_frames x d_video
  int label = 0;
  std::vector<int> options;
  std::vector<ObjectSpan> object_spans;
  std::optional<Modality> dominant;

  void validate() const;
};

struct TaskSpec {
  std::vector<Modality> class_dominance;  // empty: use the model's planted map
  double ambiguity = 0.35;
};

std::vector<Sample> generate_dataset(const Model& model, const TaskSpec& task, int n, std::uint64_t seed);

// Captioning corpus where most clips carry a salient off-screen sound of a
// different object than the visible one.
struct CaptionTaskSpec {
  double mismatch_rate = 0.7;
  double salience_lo = 0.5, salience_hi = 2.0;
};
std::vector<Sample> generate_caption_corpus(const Model& model, const CaptionTaskSpec& task, int n,
                                            std::uint64_t seed);

void write_sample_jsonl(std::ostream& out, const Sample& s);
std::vector<Sample> read_samples_jsonl(std::istream& in);

struct TokenLayout {
  std::vector<Segment> segment;
  std::vector<bool> object;
  std::vector<int> option_positions;
  int bos = 0;
  int answer_position = -1;
  std::vector<int> audio_positions;  // indexed by frame
  std::vector<int> video_positions;
  std::vector<int> tokens;  // token id per text position, -1 elsewhere

  int size() const { return static_cast<int>(segment.size()); }
  std::vector<int> positions_of(Segment s) const;
  std::vector<int> text_positions() const { return positions_of(Segment::Text); }
};

enum class CorruptionMethod { None, ZeroInput, GaussianNoise, MeanEmbedding };
const char* corruption_name(CorruptionMethod c);
CorruptionMethod parse_corruption(const std::string& s);

struct CorruptionSpec {
  CorruptionMethod method = CorruptionMethod::None;
  bool audio = false;
  bool video = false;
  double noise_scale = 3.0;  // multiples of the empirical feature std
  std::uint64_t noise_seed = 0;
};

struct Encoded {
  Mat x;  // |T| x d_model
  TokenLayout layout;
};

std::vector<int> mcq_prompt(const Model& m);
std::vector<int> caption_prompt();

Encoded encode(const Model& model, const Sample& sample, const std::vector<int>& prompt,
               const CorruptionSpec& corruption = {});

struct Patch {
  int layer = 0;
  Site site = Site::PreAttn;
  int position = 0;
  Vec value;
};

// Adds sign*alpha*|A| to the selected key columns of post-softmax rows, clamps at
// zero and renormalizes. Empty rows/layers select everything.
struct AttentionMod {
  std::vector<int> columns;
  double alpha = 0.0;
  std::vector<int> rows;
  std::vector<int> layers;
};

struct InterventionPlan {
  std::vector<Patch> patches;
  std::vector<AttentionMod> mods;
  // Apply mods to the raw scores before softmax instead.
  bool pre_softmax = false;
  bool empty() const { return patches.empty() && mods.empty(); }
  void validate(const Model& m, int seq_len) const;
};

struct ForwardRecord {
  // hidden[l][site] is |T| x d_model
  std::vector<std::array<Mat, kNumSites>> hidden;
  // attn[l][h] is |T| x |T|
  std::vector<std::vector<Mat>> attn;
  Mat final_hidden;
  Mat logits;  // |T| x vocab
  const Mat& pre_attn(int layer) const { return hidden.at(layer)[0]; }
};

ForwardRecord forward(const Model& model, const Mat& x, const TokenLayout& layout,
                      const InterventionPlan& plan = {});

// Softmax over option-token logits at the answer position.
Vec answer_distribution(const Model& model, const ForwardRecord& rec, const TokenLayout& layout);
int argmax_first(const Vec& v);

std::string class_name(int cls);

}  // namespace avsink
