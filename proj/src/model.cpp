#include "avsink/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <set>

namespace avsink {

const char* segment_name(Segment s) {
  switch (s) {
    case Segment::Audio: return "audio";
    case Segment::Video: return "video";
    case Segment::Text: return "text";
  }
  return "?";
}

const char* modality_name(Modality m) { return m == Modality::Audio ? "audio" : "video"; }

const char* site_name(Site s) {
  switch (s) {
    case Site::PreAttn: return "pre_attn";
    case Site::PostAttn: return "post_attn";
    case Site::PostMlp: return "post_mlp";
  }
  return "?";
}

Site parse_site(const std::string& s) {
  if (s == "pre_attn") return Site::PreAttn;
  if (s == "post_attn") return Site::PostAttn;
  if (s == "post_mlp") return Site::PostMlp;
  throw ConfigError("unknown patch site: " + s);
}

const char* corruption_name(CorruptionMethod c) {
  switch (c) {
    case CorruptionMethod::None: return "none";
    case CorruptionMethod::ZeroInput: return "zero";
    case CorruptionMethod::GaussianNoise: return "gaussian";
    case CorruptionMethod::MeanEmbedding: return "mean";
  }
  return "?";
}

CorruptionMethod parse_corruption(const std::string& s) {
  if (s == "none") return CorruptionMethod::None;
  if (s == "zero") return CorruptionMethod::ZeroInput;
  if (s == "gaussian") return CorruptionMethod::GaussianNoise;
  if (s == "mean") return CorruptionMethod::MeanEmbedding;
  throw ConfigError("unknown corruption method: " + s);
}

void ModelConfig::validate() const {
  if (n_layers < 2) throw ConfigError("n_layers must be >= 2");
  if (n_heads <= 0 || d_model <= 0 || d_head <= 0 || d_mlp <= 0 || vocab_size <= 0 || max_seq_len <= 0)
    throw ConfigError("model dimensions must be positive");
  if (d_model != n_heads * d_head) throw ConfigError("d_model must equal n_heads * d_head");
  if (!(rms_eps >= 0) || !std::isfinite(rms_eps)) throw ConfigError("rms_eps must be finite and >= 0");
}

std::vector<int> PlantedTruth::audio_sink_positions() const {
  std::vector<int> out;
  for (int t : audio_uni_steps) out.push_back(1 + 2 * t);
  for (int t : audio_cross_steps) out.push_back(1 + 2 * t);
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<int> PlantedTruth::video_sink_positions() const {
  std::vector<int> out;
  for (int t : video_uni_steps) out.push_back(2 + 2 * t);
  for (int t : video_cross_steps) out.push_back(2 + 2 * t);
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<int> PlantedTruth::crossmodal_positions() const {
  std::vector<int> out;
  for (int t : audio_cross_steps) out.push_back(1 + 2 * t);
  for (int t : video_cross_steps) out.push_back(2 + 2 * t);
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<int> PlantedTruth::unimodal_positions() const {
  std::vector<int> out;
  for (int t : audio_uni_steps) out.push_back(1 + 2 * t);
  for (int t : video_uni_steps) out.push_back(2 + 2 * t);
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<int> PlantedTruth::all_sink_positions() const {
  std::vector<int> out = audio_sink_positions();
  for (int p : video_sink_positions()) out.push_back(p);
  out.push_back(bos_position);
  std::sort(out.begin(), out.end());
  return out;
}

std::string class_name(int cls) {
  static const char* names[] = {"dog",    "cat",   "car",       "piano",      "guitar", "bird",    "horse",
                                "train",  "baby",  "drum",      "violin",     "cow",    "siren",   "helicopter",
                                "rooster", "frog", "trumpet",   "lion",       "sheep",  "motorcycle"};
  if (cls >= 0 && cls < 20) return names[cls];
  return "object" + std::to_string(cls);
}

namespace {

// Gains of the planted circuit. Chosen so that dominant-modality evidence wins
// the multiple-choice task and salient off-screen sounds can leak into captions.
struct Gains {
  double massive = 16.0;        // per-dim massive activation for two sink dims
  double pos_norm = 8.0;        // norm of positional carriers
  double enc = 1.5;             // encoder gain on class and presence directions
  double dump = 10.0;
  double cross_dump = 1.1;
  double dump_salience = 3.0;
  double gather_key = 16.0;
  double presence_key = 8.0;
  double gather_gain = 2.0;
  double fusion_threshold = 0.5;
  double fusion_gain = 4.0;
  double reader_sink_key = 20.0;
  double reader_salience = 0.6;
  double read_audio = 1.0, read_video = 1.0, read_fused = 6.0, read_inhibit = 3.0;
  double claim_gain = 1.0;
  double cap_audio = 1.0, cap_video = 1.0, cap_fused = 6.0, cap_claim = 3.0;
  double repeat_suppress = -12.0;
  double unembed = 20.0;
  double eos = 6.0;
  double gate = 12.0;
};

struct Features {
  int n_ds = 2, n_cls = 20;
  int ds, aud, vid, sum, fus, ment, claim;
  int is_a, is_v, is_t, is_bos, s_au, s_ac, s_vu, s_vc, sal, t_ans, t_cap, t_a, t_obj, t_and, seen, pres;
  int n_logical;

  Features(int n_sink_dims, int classes) : n_ds(n_sink_dims), n_cls(classes) {
    int c = 0;
    ds = c, c += n_ds;
    aud = c, c += n_cls;
    vid = c, c += n_cls;
    sum = c, c += n_cls;
    fus = c, c += n_cls;
    ment = c, c += n_cls;
    claim = c, c += n_cls;
    int* singles[] = {&is_a, &is_v, &is_t, &is_bos, &s_au, &s_ac, &s_vu, &s_vc,
                      &sal,  &t_ans, &t_cap, &t_a,  &t_obj, &t_and, &seen, &pres};
    for (int* p : singles) *p = c++;
    n_logical = c;
  }
};

class HeadBuilder {
 public:
  HeadBuilder(const ModelConfig& cfg, const std::vector<int>& phys) : phys_(phys), sqrt_dh_(std::sqrt(double(cfg.d_head))) {
    w_.wq = Mat::Zero(cfg.d_head, cfg.d_model);
    w_.wk = Mat::Zero(cfg.d_head, cfg.d_model);
    w_.wv = Mat::Zero(cfg.d_head, cfg.d_model);
    w_.wo = Mat::Zero(cfg.d_model, cfg.d_head);
  }

  void qk(std::initializer_list<int> query, std::initializer_list<std::pair<int, double>> keys) {
    const int c = next_qk_++;
    if (c >= w_.wq.rows()) throw ConfigError("plant infeasible: d_head too small for query channels");
    for (int f : query) w_.wq(c, phys_[f]) = 1.0;
    for (auto [f, w] : keys) w_.wk(c, phys_[f]) = w * sqrt_dh_;
  }

  int vo(int src, int dst, double gain) {
    const int c = next_v_++;
    if (c >= w_.wv.rows()) throw ConfigError("plant infeasible: d_head too small for value channels");
    w_.wv(c, phys_[src]) = 1.0;
    w_.wo(phys_[dst], c) = gain;
    return c;
  }

  void value(int channel, int src, double w) { w_.wv(channel, phys_[src]) = w; }

  HeadWeights take() { return std::move(w_); }

 private:
  const std::vector<int>& phys_;
  double sqrt_dh_;
  HeadWeights w_;
  int next_qk_ = 0, next_v_ = 0;
};

std::vector<int> choose_sorted(std::mt19937_64& rng, int lo, int hi, int k) {
  std::vector<int> pool(hi - lo);
  std::iota(pool.begin(), pool.end(), lo);
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(k);
  return pool;
}

Mat orthonormal(std::mt19937_64& rng, int n) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Eigen::MatrixXd g(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) g(i, j) = nd(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(n, n);
  return q;
}

}  // namespace

Model build_planted_model(const ModelConfig& config, std::uint64_t seed, const PlantSpec& plant) {
  config.validate();
  const int C = plant.n_classes;
  const int T = plant.n_frames;
  if (C < 2) throw ConfigError("plant infeasible: need at least 2 classes");
  if (config.n_layers < 5) throw ConfigError("plant infeasible: planted circuit needs n_layers >= 5");
  if (config.n_heads < 5) throw ConfigError("plant infeasible: planted circuit needs n_heads >= 5");
  if (config.d_head < C) throw ConfigError("plant infeasible: d_head must be >= n_classes");
  if (config.d_mlp < C) throw ConfigError("plant infeasible: d_mlp must be >= n_classes");
  if (config.vocab_size != tok::kOptionBase + 2 * C)
    throw ConfigError("plant infeasible: vocab_size must equal " + std::to_string(tok::kOptionBase + 2 * C));
  if (plant.d_audio < C + 2 || plant.d_video < C + 1)
    throw ConfigError("plant infeasible: feature dims too small for class directions");
  if (T < 4) throw ConfigError("plant infeasible: need at least 4 frames");
  const int sink_lo = T / 2, sink_hi = T;
  if (plant.sinks_per_modality < 1 || plant.sinks_per_modality > sink_hi - sink_lo)
    throw ConfigError("plant infeasible: more sink positions than the sink window of the segment");
  if (!(plant.cross_fraction >= 0.0 && plant.cross_fraction <= 1.0))
    throw ConfigError("plant infeasible: cross_fraction must be in [0,1]");
  const int need_len = 1 + 2 * T + C + 2;
  if (config.max_seq_len < need_len)
    throw ConfigError("plant infeasible: max_seq_len must be >= " + std::to_string(need_len));

  const int n_ds = plant.d_sink.empty() ? plant.d_sink_size : static_cast<int>(plant.d_sink.size());
  if (n_ds < 2) throw ConfigError("plant infeasible: D_sink size must be >= 2");
  Features F(n_ds, C);
  if (config.d_model < F.n_logical + 8)
    throw ConfigError("plant infeasible: d_model must be >= " + std::to_string(F.n_logical + 8));

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  const Gains G;
  const int D = config.d_model;

  // Logical feature -> physical hidden index.
  std::vector<int> sink_dims = plant.d_sink;
  if (sink_dims.empty()) {
    sink_dims = choose_sorted(rng, 0, D, n_ds);
  }
  {
    std::set<int> uniq(sink_dims.begin(), sink_dims.end());
    if (static_cast<int>(uniq.size()) != n_ds) throw ConfigError("plant infeasible: D_sink dims must be distinct");
    for (int d : sink_dims)
      if (d < 0 || d >= D) throw ConfigError("plant infeasible: D_sink dim out of range");
  }
  std::vector<int> phys(D, -1);
  {
    std::vector<bool> used(D, false);
    for (int i = 0; i < n_ds; ++i) {
      phys[F.ds + i] = sink_dims[i];
      used[sink_dims[i]] = true;
    }
    std::vector<int> rest;
    for (int d = 0; d < D; ++d)
      if (!used[d]) rest.push_back(d);
    std::shuffle(rest.begin(), rest.end(), rng);
    int r = 0;
    for (int f = n_ds; f < D; ++f) phys[f] = rest[r++];
  }

  Model m;
  m.config = config;
  m.plant = plant;
  m.plant.d_sink = sink_dims;
  m.plant.d_sink_size = n_ds;
  m.seed = seed;
  PlantedTruth& truth = m.truth;
  truth.d_sink = sink_dims;
  std::sort(truth.d_sink.begin(), truth.d_sink.end());
  truth.planting_layer = 1;
  truth.bos_position = 0;
  truth.object_step_begin = 0;
  truth.object_step_end = T / 2;

  const int n_cross = static_cast<int>(std::lround(plant.cross_fraction * plant.sinks_per_modality));
  auto split = [&](std::vector<int>& uni, std::vector<int>& cross) {
    std::vector<int> s = choose_sorted(rng, sink_lo, sink_hi, plant.sinks_per_modality);
    cross.assign(s.begin(), s.begin() + n_cross);
    uni.assign(s.begin() + n_cross, s.end());
    std::sort(cross.begin(), cross.end());
    std::sort(uni.begin(), uni.end());
  };
  split(truth.audio_uni_steps, truth.audio_cross_steps);
  split(truth.video_uni_steps, truth.video_cross_steps);
  for (int t : truth.audio_cross_steps) truth.routing.push_back({m.audio_position(t), Modality::Video});
  for (int t : truth.video_cross_steps) truth.routing.push_back({m.video_position(t), Modality::Audio});
  std::sort(truth.routing.begin(), truth.routing.end());
  for (int k = 0; k < C; ++k) truth.class_dominance.push_back(k % 2 == 0 ? Modality::Audio : Modality::Video);

  const double massive = G.massive * std::sqrt(2.0 / n_ds);
  // Normalized value of a unit sink flag before and after the massive
  // activations land: positional carrier, flag and segment bit dominate the norm.
  const double base_sq = G.pos_norm * G.pos_norm + 2.0;
  const double flag_hat = std::sqrt(D / base_sq);
  const double flag_hat2 = std::sqrt(D / (base_sq + 2.0 * G.massive * G.massive));
  const int ncar = D - F.n_logical;

  // Positional carriers plus sink-type flags at the planted positions.
  m.pos = Mat::Zero(config.max_seq_len, D);
  for (int p = 0; p < config.max_seq_len; ++p) {
    Vec v(ncar);
    for (int i = 0; i < ncar; ++i) v(i) = nd(rng);
    v *= G.pos_norm / v.norm();
    for (int i = 0; i < ncar; ++i) m.pos(p, phys[F.n_logical + i]) = v(i);
  }
  for (int t : truth.audio_uni_steps) m.pos(m.audio_position(t), phys[F.s_au]) = 1.0;
  for (int t : truth.audio_cross_steps) m.pos(m.audio_position(t), phys[F.s_ac]) = 1.0;
  for (int t : truth.video_uni_steps) m.pos(m.video_position(t), phys[F.s_vu]) = 1.0;
  for (int t : truth.video_cross_steps) m.pos(m.video_position(t), phys[F.s_vc]) = 1.0;

  // Raw feature directions and encoders.
  const Mat qa = orthonormal(rng, plant.d_audio);
  const Mat qv = orthonormal(rng, plant.d_video);
  FeatureBank& fb = truth.features;
  fb.audio_proto = qa.leftCols(C).transpose();
  fb.video_proto = qv.leftCols(C).transpose();
  fb.audio_salience = qa.col(C);
  fb.audio_presence = qa.col(C + 1);
  fb.video_presence = qv.col(C);
  m.audio_enc = Mat::Zero(D, plant.d_audio);
  m.video_enc = Mat::Zero(D, plant.d_video);
  for (int k = 0; k < C; ++k) {
    m.audio_enc.row(phys[F.aud + k]) = G.enc * fb.audio_proto.row(k);
    m.video_enc.row(phys[F.vid + k]) = G.enc * fb.video_proto.row(k);
  }
  m.audio_enc.row(phys[F.sal]) = fb.audio_salience.transpose();
  m.audio_enc.row(phys[F.pres]) = G.enc * fb.audio_presence.transpose();
  m.video_enc.row(phys[F.pres]) = G.enc * fb.video_presence.transpose();
  m.audio_bias = Vec::Zero(D);
  m.audio_bias(phys[F.is_a]) = 1.0;
  m.video_bias = Vec::Zero(D);
  m.video_bias(phys[F.is_v]) = 1.0;

  // Token embeddings.
  const int V = config.vocab_size;
  m.embed = Mat::Zero(V, D);
  for (int t = 0; t < V; ++t) m.embed(t, phys[F.is_t]) = 1.0;
  m.embed(tok::kBos, phys[F.is_bos]) = 1.0;
  for (int i = 0; i < n_ds; ++i) m.embed(tok::kBos, phys[F.ds + i]) = massive;
  m.embed(tok::kAnswer, phys[F.t_ans]) = 1.0;
  m.embed(tok::kCaption, phys[F.t_cap]) = 1.0;
  m.embed(tok::kArticle, phys[F.t_a]) = 1.0;
  m.embed(tok::kAnd, phys[F.t_and]) = 1.0;
  for (int k = 0; k < C; ++k) {
    m.embed(m.object_token(k), phys[F.t_obj]) = 1.0;
    m.embed(m.object_token(k), phys[F.ment + k]) = 1.0;
  }

  // Background heads: every query parks its attention on sink tokens, with
  // audio queries preferring audio-unimodal and video-cross sinks and vice versa.
  auto dump_head = [&](double scale) {
    HeadBuilder h(config, phys);
    const double w = G.dump * scale;
    h.qk({F.is_a}, {{F.s_au, w}, {F.s_vc, w}, {F.is_bos, 5.0}});
    h.qk({F.is_v}, {{F.s_vu, w}, {F.s_ac, w}, {F.is_bos, 5.0}});
    h.qk({F.is_t}, {{F.s_au, w},
                    {F.s_vu, w},
                    {F.s_ac, w * G.cross_dump},
                    {F.s_vc, w * G.cross_dump},
                    {F.sal, G.dump_salience},
                    {F.is_bos, 3.0}});
    return h.take();
  };
  auto park_on_bos = [&](HeadBuilder& h, double w) { h.qk({F.is_a, F.is_v, F.is_t}, {{F.is_bos, w}}); };

  m.layers.resize(config.n_layers);
  for (int l = 0; l < config.n_layers; ++l) {
    LayerWeights& lw = m.layers[l];
    for (int h = 0; h < config.n_heads; ++h) lw.heads.push_back(dump_head(1.0 + 0.05 * h));
    lw.mlp_in = Mat::Zero(config.d_mlp, D);
    lw.mlp_bias = Vec::Zero(config.d_mlp);
    lw.mlp_out = Mat::Zero(D, config.d_mlp);

    if (l == 0) {
      // Massive activations at planted sink positions.
      for (int f : {F.s_au, F.s_ac, F.s_vu, F.s_vc}) lw.mlp_in(0, phys[f]) = 1.0;
      lw.mlp_bias(0) = -0.5;
      for (int i = 0; i < n_ds; ++i) lw.mlp_out(phys[F.ds + i], 0) = massive / (flag_hat - 0.5);
    }
    if (l == 2) {
      // Cross-modal sinks gather class evidence from both modalities.
      HeadBuilder g(config, phys);
      park_on_bos(g, 24.0);
      g.qk({F.s_ac, F.s_vc}, {{F.is_a, G.gather_key}, {F.is_v, G.gather_key}, {F.pres, G.presence_key}});
      for (int k = 0; k < C; ++k) {
        const int c = g.vo(F.aud + k, F.sum + k, G.gather_gain);
        g.value(c, F.vid + k, 1.0);
      }
      lw.heads[0] = g.take();
      // Audio-unimodal sinks gather audio evidence and salience; video-unimodal sinks gather video.
      HeadBuilder ga(config, phys);
      park_on_bos(ga, 24.0);
      ga.qk({F.s_au}, {{F.is_a, G.gather_key}, {F.pres, G.presence_key}});
      for (int k = 0; k < C; ++k) ga.vo(F.aud + k, F.aud + k, 1.0);
      lw.heads[1] = ga.take();
      HeadBuilder gv(config, phys);
      park_on_bos(gv, 24.0);
      gv.qk({F.s_vu}, {{F.is_v, G.gather_key}, {F.pres, G.presence_key}});
      for (int k = 0; k < C; ++k) gv.vo(F.vid + k, F.vid + k, 1.0);
      lw.heads[2] = gv.take();
      HeadBuilder gs(config, phys);
      park_on_bos(gs, 24.0);
      gs.qk({F.s_au}, {{F.is_a, G.gather_key}, {F.pres, G.presence_key}});
      gs.vo(F.sal, F.sal, 1.0);
      lw.heads[3] = gs.take();
      // Cross sinks also record what the audio alone claims.
      HeadBuilder gc(config, phys);
      park_on_bos(gc, 24.0);
      gc.qk({F.s_ac, F.s_vc}, {{F.is_a, G.gather_key}, {F.pres, G.presence_key}});
      for (int k = 0; k < C; ++k) gc.vo(F.aud + k, F.claim + k, G.claim_gain);
      lw.heads[4] = gc.take();
      // Fusion: only classes with enough joint evidence survive at cross sinks.
      for (int k = 0; k < C; ++k) {
        lw.mlp_in(k, phys[F.sum + k]) = 1.0;
        lw.mlp_in(k, phys[F.s_ac]) = 20.0;
        lw.mlp_in(k, phys[F.s_vc]) = 20.0;
        lw.mlp_bias(k) = -20.0 * flag_hat2 - G.fusion_threshold;
        lw.mlp_out(phys[F.fus + k], k) = G.fusion_gain;
      }
    }
    if (l == 4) {
      // Answer reader: the answer slot reads class evidence from the sinks.
      HeadBuilder r(config, phys);
      park_on_bos(r, 8.0);
      r.qk({F.t_ans}, {{F.s_au, G.reader_sink_key},
                                       {F.s_vu, G.reader_sink_key},
                                       {F.s_ac, G.reader_sink_key},
                                       {F.s_vc, G.reader_sink_key},
                                       {F.sal, G.reader_salience}});
      for (int k = 0; k < C; ++k) {
        const int c = r.vo(F.aud + k, F.sum + k, 1.0);
        r.value(c, F.aud + k, G.read_audio);
        r.value(c, F.vid + k, G.read_video);
        r.value(c, F.fus + k, G.read_fused);
        r.value(c, F.sum + k, -G.read_inhibit);
      }
      lw.heads[0] = r.take();
      // Caption reader: object slots; cross sinks veto audio-only claims.
      HeadBuilder cr(config, phys);
      park_on_bos(cr, 8.0);
      cr.qk({F.t_a, F.t_and}, {{F.s_au, G.reader_sink_key},
                               {F.s_vu, G.reader_sink_key},
                               {F.s_ac, G.reader_sink_key},
                               {F.s_vc, G.reader_sink_key},
                               {F.sal, G.reader_salience}});
      for (int k = 0; k < C; ++k) {
        const int c = cr.vo(F.aud + k, F.sum + k, 1.0);
        cr.value(c, F.aud + k, G.cap_audio);
        cr.value(c, F.vid + k, G.cap_video);
        cr.value(c, F.fus + k, G.cap_fused);
        cr.value(c, F.claim + k, -G.cap_claim);
      }
      lw.heads[3] = cr.take();
      HeadBuilder seen(config, phys);
      park_on_bos(seen, 24.0);
      seen.qk({F.t_obj}, {{F.t_and, 10.0}, {F.is_bos, 4.0}});
      seen.vo(F.t_and, F.seen, 3.0);
      lw.heads[1] = seen.take();
      HeadBuilder rep(config, phys);
      park_on_bos(rep, 24.0);
      rep.qk({F.t_and}, {{F.t_obj, 10.0}, {F.is_bos, 4.0}});
      for (int k = 0; k < C; ++k) rep.vo(F.ment + k, F.sum + k, G.repeat_suppress);
      lw.heads[2] = rep.take();
    }
  }

  m.unembed = Mat::Zero(V, D);
  for (int k = 0; k < C; ++k) {
    const int o = m.option_token(k), b = m.object_token(k);
    m.unembed(o, phys[F.sum + k]) = G.unembed;
    m.unembed(o, phys[F.is_t]) = -G.gate;
    m.unembed(o, phys[F.t_ans]) = G.gate;
    m.unembed(b, phys[F.sum + k]) = G.unembed;
    m.unembed(b, phys[F.is_t]) = -G.gate;
    m.unembed(b, phys[F.t_a]) = G.gate;
    m.unembed(b, phys[F.t_and]) = G.gate;
  }
  m.unembed(tok::kArticle, phys[F.t_cap]) = G.gate;
  m.unembed(tok::kAnd, phys[F.t_obj]) = G.gate;
  m.unembed(tok::kAnd, phys[F.seen]) = -2.0 * G.gate;
  m.unembed(tok::kEos, phys[F.t_and]) = G.eos;
  m.unembed(tok::kEos, phys[F.seen]) = G.gate;
  return m;
}

std::vector<int> TokenLayout::positions_of(Segment s) const {
  std::vector<int> out;
  for (int i = 0; i < size(); ++i)
    if (segment[i] == s) out.push_back(i);
  return out;
}

std::vector<int> mcq_prompt(const Model& m) {
  std::vector<int> p{tok::kQuestion};
  for (int k = 0; k < m.n_classes(); ++k) p.push_back(m.option_token(k));
  p.push_back(tok::kAnswer);
  return p;
}

std::vector<int> caption_prompt() { return {tok::kCaption}; }

void Sample::validate() const {
  if (!all_finite(audio) || !all_finite(video)) throw DataError("sample " + id + ": non-finite features");
  if (std::find(options.begin(), options.end(), label) == options.end())
    throw DataError("sample " + id + ": label is not one of the options");
  for (const auto& s : object_spans)
    if (s.begin < 0 || s.end < s.begin) throw DataError("sample " + id + ": bad object span");
}

namespace {

Mat corrupt_raw(const Mat& f, const CorruptionSpec& c, std::mt19937_64& rng) {
  if (c.method == CorruptionMethod::ZeroInput) return Mat::Zero(f.rows(), f.cols());
  if (c.method == CorruptionMethod::GaussianNoise) {
    double mean = 0;
    for (Eigen::Index i = 0; i < f.size(); ++i) mean += f.data()[i];
    mean /= double(f.size());
    double var = 0;
    for (Eigen::Index i = 0; i < f.size(); ++i) var += (f.data()[i] - mean) * (f.data()[i] - mean);
    const double sd = std::sqrt(var / double(f.size()));
    std::normal_distribution<double> nd(0.0, 1.0);
    Mat out = f;
    for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] += c.noise_scale * sd * nd(rng);
    return out;
  }
  return f;
}

Mat project(const Mat& f, const Mat& enc, const Vec& bias) {
  Mat e = matmul_nt(f, enc);
  for (Eigen::Index r = 0; r < e.rows(); ++r) e.row(r) += bias.transpose();
  return e;
}

void replace_with_mean(Mat& e) {
  Vec mean = Vec::Zero(e.cols());
  for (Eigen::Index r = 0; r < e.rows(); ++r) mean += e.row(r).transpose();
  mean /= double(e.rows());
  for (Eigen::Index r = 0; r < e.rows(); ++r) e.row(r) = mean.transpose();
}

}  // namespace

Encoded encode(const Model& model, const Sample& sample, const std::vector<int>& prompt,
               const CorruptionSpec& corruption) {
  const int T = model.n_frames();
  if (sample.audio.rows() != T || sample.video.rows() != T)
    throw DataError("sample " + sample.id + ": frame count does not match the model");
  if (sample.audio.cols() != model.audio_enc.cols() || sample.video.cols() != model.video_enc.cols())
    throw DataError("sample " + sample.id + ": feature dims do not match the encoders");
  const int n = 1 + 2 * T + static_cast<int>(prompt.size());
  if (n > model.config.max_seq_len) throw DataError("sequence longer than max_seq_len");
  for (int t : prompt)
    if (t < 0 || t >= model.config.vocab_size) throw DataError("prompt token out of range");

  std::mt19937_64 rng(corruption.noise_seed);
  Mat fa = sample.audio, fv = sample.video;
  if (corruption.method == CorruptionMethod::ZeroInput || corruption.method == CorruptionMethod::GaussianNoise) {
    if (corruption.audio) fa = corrupt_raw(fa, corruption, rng);
    if (corruption.video) fv = corrupt_raw(fv, corruption, rng);
  }
  Mat ea = project(fa, model.audio_enc, model.audio_bias);
  Mat ev = project(fv, model.video_enc, model.video_bias);
  if (corruption.method == CorruptionMethod::MeanEmbedding) {
    if (corruption.audio) replace_with_mean(ea);
    if (corruption.video) replace_with_mean(ev);
  }

  Encoded out;
  const int D = model.config.d_model;
  out.x = Mat::Zero(n, D);
  TokenLayout& lay = out.layout;
  lay.segment.assign(n, Segment::Text);
  lay.object.assign(n, false);
  lay.tokens.assign(n, -1);
  lay.bos = 0;
  out.x.row(0) = model.embed.row(tok::kBos);
  lay.tokens[0] = tok::kBos;
  for (int t = 0; t < T; ++t) {
    const int pa = model.audio_position(t), pv = model.video_position(t);
    out.x.row(pa) = ea.row(t);
    out.x.row(pv) = ev.row(t);
    lay.segment[pa] = Segment::Audio;
    lay.segment[pv] = Segment::Video;
    lay.audio_positions.push_back(pa);
    lay.video_positions.push_back(pv);
  }
  for (const auto& s : sample.object_spans) {
    for (int t = std::max(0, s.begin); t < std::min(T, s.end); ++t)
      lay.object[s.modality == Modality::Audio ? model.audio_position(t) : model.video_position(t)] = true;
  }
  const int base = 1 + 2 * T;
  const int C = model.n_classes();
  for (size_t i = 0; i < prompt.size(); ++i) {
    const int p = base + static_cast<int>(i);
    out.x.row(p) = model.embed.row(prompt[i]);
    lay.tokens[p] = prompt[i];
    if (prompt[i] >= tok::kOptionBase && prompt[i] < tok::kOptionBase + C) lay.option_positions.push_back(p);
    if (prompt[i] == tok::kAnswer) lay.answer_position = p;
  }
  out.x += model.pos.topRows(n);
  return out;
}

void InterventionPlan::validate(const Model& m, int seq_len) const {
  for (const auto& p : patches) {
    if (p.layer < 0 || p.layer >= m.config.n_layers) throw DataError("patch layer out of range");
    if (p.position < 0 || p.position >= seq_len) throw DataError("patch position out of range");
    if (p.value.size() != m.config.d_model) throw DataError("patch vector has wrong size");
  }
  for (const auto& md : mods) {
    if (!std::isfinite(md.alpha)) throw DataError("modulation strength must be finite");
    for (int c : md.columns)
      if (c < 0 || c >= seq_len) throw DataError("modulated column out of range");
    for (int r : md.rows)
      if (r < 0 || r >= seq_len) throw DataError("modulated row out of range");
    for (int l : md.layers)
      if (l < 0 || l >= m.config.n_layers) throw DataError("modulated layer out of range");
  }
}

namespace {

bool selects(const std::vector<int>& set, int v) {
  return set.empty() || std::find(set.begin(), set.end(), v) != set.end();
}

void apply_patches(Mat& x, const std::vector<const Patch*>& ps) {
  for (const Patch* p : ps) x.row(p->position) = p->value.transpose();
}

}  // namespace

ForwardRecord forward(const Model& model, const Mat& x0, const TokenLayout& layout, const InterventionPlan& plan) {
  const ModelConfig& cfg = model.config;
  const int n = static_cast<int>(x0.rows());
  if (x0.cols() != cfg.d_model) throw DataError("embedding width does not match d_model");
  if (layout.size() != n) throw DataError("layout length does not match embeddings");
  plan.validate(model, n);

  std::map<std::pair<int, int>, std::vector<const Patch*>> patches;
  for (const auto& p : plan.patches) patches[{p.layer, int(p.site)}].push_back(&p);
  auto patch_at = [&](Mat& x, int l, Site s) {
    auto it = patches.find({l, int(s)});
    if (it != patches.end()) apply_patches(x, it->second);
  };

  ForwardRecord rec;
  rec.hidden.resize(cfg.n_layers);
  rec.attn.resize(cfg.n_layers);
  const double scale = std::sqrt(double(cfg.d_head));
  Mat x = x0;
  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerWeights& lw = model.layers[l];
    patch_at(x, l, Site::PreAttn);
    rec.hidden[l][0] = x;
    const Mat xn = rms_norm_rows(x, cfg.rms_eps);

    // Mods active at this layer, grouped per query row.
    std::vector<const AttentionMod*> active;
    for (const auto& md : plan.mods)
      if (selects(md.layers, l)) active.push_back(&md);

    Mat out = Mat::Zero(n, cfg.d_model);
    for (int h = 0; h < cfg.n_heads; ++h) {
      const HeadWeights& hw = lw.heads[h];
      const Mat q = matmul_nt(xn, hw.wq);
      const Mat k = matmul_nt(xn, hw.wk);
      const Mat v = matmul_nt(xn, hw.wv);
      Mat s = matmul_nt(q, k);
      Mat a = Mat::Zero(n, n);
      for (int r = 0; r < n; ++r) {
        for (int c = 0; c <= r; ++c) s(r, c) /= scale;
        if (plan.pre_softmax) {
          for (const AttentionMod* md : active) {
            if (!selects(md->rows, r)) continue;
            for (int c : md->columns)
              if (c <= r) s(r, c) += md->alpha * std::abs(s(r, c));
          }
        }
        double mx = s(r, 0);
        for (int c = 1; c <= r; ++c) mx = std::max(mx, s(r, c));
        double z = 0;
        for (int c = 0; c <= r; ++c) {
          a(r, c) = std::exp(s(r, c) - mx);
          z += a(r, c);
        }
        for (int c = 0; c <= r; ++c) a(r, c) /= z;
        if (!plan.pre_softmax && !active.empty()) {
          bool changed = false;
          for (const AttentionMod* md : active) {
            if (!selects(md->rows, r)) continue;
            for (int c : md->columns) {
              if (c > r) continue;
              const double nv = a(r, c) + md->alpha * std::abs(a(r, c));
              if (nv != a(r, c)) changed = true;
              a(r, c) = nv;
            }
          }
          if (changed) {
            double t = 0;
            for (int c = 0; c <= r; ++c) {
              a(r, c) = std::max(a(r, c), 0.0);
              t += a(r, c);
            }
            if (!(t > 0)) throw InvariantError("attention row vanished after modulation");
            for (int c = 0; c <= r; ++c) a(r, c) /= t;
          }
        }
      }
      const Mat ctx = matmul(a, v);
      out += matmul_nt(ctx, hw.wo);
      rec.attn[l].push_back(std::move(a));
    }
    x += out;
    patch_at(x, l, Site::PostAttn);
    rec.hidden[l][1] = x;

    const Mat xn2 = rms_norm_rows(x, cfg.rms_eps);
    Mat hmid = matmul_nt(xn2, lw.mlp_in);
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < hmid.cols(); ++c) hmid(r, c) = std::max(hmid(r, c) + lw.mlp_bias(c), 0.0);
    x += matmul_nt(hmid, lw.mlp_out);
    patch_at(x, l, Site::PostMlp);
    rec.hidden[l][2] = x;
  }
  rec.final_hidden = rms_norm_rows(x, cfg.rms_eps);
  rec.logits = matmul_nt(rec.final_hidden, model.unembed);
  return rec;
}

int argmax_first(const Vec& v) {
  if (v.size() == 0) throw DataError("argmax of empty vector");
  int best = 0;
  for (int i = 1; i < v.size(); ++i)
    if (v(i) > v(best)) best = i;
  return best;
}

Vec answer_distribution(const Model& model, const ForwardRecord& rec, const TokenLayout& layout) {
  if (layout.answer_position < 0 || layout.answer_position >= rec.logits.rows())
    throw DataError("record has no answer position");
  const int C = model.n_classes();
  Vec o(C);
  for (int k = 0; k < C; ++k) o(k) = rec.logits(layout.answer_position, model.option_token(k));
  return softmax(o);
}

namespace {

std::pair<int, int> draw_span(std::mt19937_64& rng, int window) {
  const int lo = std::min(4, window), hi = std::min(7, window);
  const int len = std::uniform_int_distribution<int>(lo, hi)(rng);
  const int start = std::uniform_int_distribution<int>(0, window - len)(rng);
  return {start, len};
}

std::string make_id(const char* prefix, int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s-%05d", prefix, i);
  return buf;
}

}  // namespace

std::vector<Sample> generate_dataset(const Model& model, const TaskSpec& task, int n, std::uint64_t seed) {
  if (n <= 0) throw ConfigError("generate_dataset: n must be positive");
  const int C = model.n_classes(), T = model.n_frames();
  const std::vector<Modality>& dom = task.class_dominance.empty() ? model.truth.class_dominance : task.class_dominance;
  if (static_cast<int>(dom.size()) != C) throw ConfigError("task class list does not match the model");
  const FeatureBank& fb = model.truth.features;
  const int window = model.truth.object_step_end - model.truth.object_step_begin;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 0.1);
  std::uniform_real_distribution<double> strong(0.8, 1.2);
  std::vector<Sample> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    Sample s;
    s.id = make_id("clip", i);
    s.audio = Mat(T, fb.audio_proto.cols());
    s.video = Mat(T, fb.video_proto.cols());
    for (Eigen::Index j = 0; j < s.audio.size(); ++j) s.audio.data()[j] = nd(rng);
    for (Eigen::Index j = 0; j < s.video.size(); ++j) s.video.data()[j] = nd(rng);
    const int y = std::uniform_int_distribution<int>(0, C - 1)(rng);
    int other = std::uniform_int_distribution<int>(0, C - 2)(rng);
    if (other >= y) ++other;
    auto [sa, la] = draw_span(rng, window);
    auto [sv, lv] = draw_span(rng, window);
    sa += model.truth.object_step_begin;
    sv += model.truth.object_step_begin;
    const bool audio_dom = dom[y] == Modality::Audio;
    const int ya = audio_dom ? y : other, yv = audio_dom ? other : y;
    const double str = strong(rng);
    const double wa = audio_dom ? str : task.ambiguity, wv = audio_dom ? task.ambiguity : str;
    for (int t = sa; t < sa + la; ++t)
      s.audio.row(t) += wa * (fb.audio_proto.row(ya) + fb.audio_presence.transpose());
    for (int t = sv; t < sv + lv; ++t)
      s.video.row(t) += wv * (fb.video_proto.row(yv) + fb.video_presence.transpose());
    s.label = y;
    s.options.resize(C);
    std::iota(s.options.begin(), s.options.end(), 0);
    s.object_spans = {{Modality::Audio, ya, sa, sa + la}, {Modality::Video, yv, sv, sv + lv}};
    s.dominant = dom[y];
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<Sample> generate_caption_corpus(const Model& model, const CaptionTaskSpec& task, int n,
                                            std::uint64_t seed) {
  if (n <= 0) throw ConfigError("generate_caption_corpus: n must be positive");
  const int C = model.n_classes(), T = model.n_frames();
  const FeatureBank& fb = model.truth.features;
  const int window = model.truth.object_step_end - model.truth.object_step_begin;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 0.1);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::vector<Sample> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    Sample s;
    s.id = make_id("cap", i);
    s.audio = Mat(T, fb.audio_proto.cols());
    s.video = Mat(T, fb.video_proto.cols());
    for (Eigen::Index j = 0; j < s.audio.size(); ++j) s.audio.data()[j] = nd(rng);
    for (Eigen::Index j = 0; j < s.video.size(); ++j) s.video.data()[j] = nd(rng);
    const int c = std::uniform_int_distribution<int>(0, C - 1)(rng);
    auto [sa, la] = draw_span(rng, window);
    auto [sv, lv] = draw_span(rng, window);
    sa += model.truth.object_step_begin;
    sv += model.truth.object_step_begin;
    const double vs = 0.8 + 0.4 * u01(rng);
    for (int t = sv; t < sv + lv; ++t) s.video.row(t) += vs * (fb.video_proto.row(c) + fb.video_presence.transpose());
    const bool mismatch = u01(rng) < task.mismatch_rate;
    int d = c;
    if (mismatch) {
      d = std::uniform_int_distribution<int>(0, C - 2)(rng);
      if (d >= c) ++d;
    }
    const double sal = mismatch ? task.salience_lo + (task.salience_hi - task.salience_lo) * u01(rng) : 0.3 * u01(rng);
    const double as = mismatch ? 0.4 + 0.3 * u01(rng) : 0.6 + 0.4 * u01(rng);
    for (int t = sa; t < sa + la; ++t)
      s.audio.row(t) += as * (fb.audio_proto.row(d) + fb.audio_presence.transpose()) + sal * fb.audio_salience.transpose();
    s.label = c;
    s.options.resize(C);
    std::iota(s.options.begin(), s.options.end(), 0);
    s.object_spans = {{Modality::Audio, d, sa, sa + la}, {Modality::Video, c, sv, sv + lv}};
    s.dominant = std::nullopt;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace avsink
