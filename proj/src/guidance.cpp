#include "avsink/guidance.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace avsink {

void AsdParams::validate() const {
  if (!std::isfinite(alpha) || alpha < 0) throw ConfigError("asd: alpha must be finite and >= 0");
  if (!(gamma_max >= 0 && gamma_max <= 1)) throw ConfigError("asd: gamma_max must be in [0,1]");
  if (!(momentum >= 0 && momentum < 1)) throw ConfigError("asd: momentum must be in [0,1)");
  if (!std::isfinite(gate) || !std::isfinite(text_mass) || !std::isfinite(eps) || eps < 0)
    throw ConfigError("asd: thresholds must be finite");
}

Vec modulate_row_raw(const Vec& row, const std::vector<int>& cross, const std::vector<int>& uni, double alpha,
                     int sign) {
  if (sign != 1 && sign != -1) throw ConfigError("modulate_row: sign must be +1 or -1");
  std::set<int> c(cross.begin(), cross.end());
  for (int u : uni)
    if (c.count(u)) throw ConfigError("modulate_row: cross and uni sets overlap");
  Vec out = row;
  for (int j : cross) {
    if (j < 0 || j >= row.size()) throw DataError("modulate_row: column out of range");
    out(j) = row(j) + sign * alpha * std::abs(row(j));
  }
  for (int j : uni) {
    if (j < 0 || j >= row.size()) throw DataError("modulate_row: column out of range");
    out(j) = row(j) - sign * alpha * std::abs(row(j));
  }
  return out;
}

Vec modulate_row(const Vec& row, const std::vector<int>& cross, const std::vector<int>& uni, double alpha, int sign) {
  Vec out = modulate_row_raw(row, cross, uni, alpha, sign);
  if (out == row) return out;
  double t = 0;
  for (Eigen::Index i = 0; i < out.size(); ++i) {
    out(i) = std::max(out(i), 0.0);
    t += out(i);
  }
  if (!(t > 0)) throw InvariantError("modulate_row: row vanished");
  out /= t;
  return out;
}

double gamma_base(double a_uni, double a_cross, double eps) {
  const double den = a_uni + a_cross + eps;
  if (den == 0.0) return 0.0;
  return a_uni / den;
}

double gamma_target(double gb, double r_t, const AsdParams& p) {
  if (gb < p.gate || r_t > p.text_mass) return 0.0;
  return p.gamma_max * gb;
}

double gamma_smooth(double gamma_prev, double gamma_hat, double beta) {
  return beta * gamma_prev + (1.0 - beta) * gamma_hat;
}

const char* guidance_name(GuidanceMethod g) {
  switch (g) {
    case GuidanceMethod::Vanilla: return "vanilla";
    case GuidanceMethod::Asd: return "asd";
    case GuidanceMethod::ReverseAsd: return "reverse-asd";
    case GuidanceMethod::Pai: return "pai";
    case GuidanceMethod::Vcd: return "vcd";
  }
  return "?";
}

GuidanceMethod parse_guidance(const std::string& s) {
  for (GuidanceMethod g : {GuidanceMethod::Vanilla, GuidanceMethod::Asd, GuidanceMethod::ReverseAsd,
                           GuidanceMethod::Pai, GuidanceMethod::Vcd})
    if (s == guidance_name(g)) return g;
  throw ConfigError("unknown guidance method: " + s);
}

SinkSets sink_sets(const SinkReport& report) { return {report.unimodal(), report.crossmodal()}; }

namespace {

struct Pass {
  Encoded input;
  ForwardRecord rec;
  Vec logits;  // last position
};

Pass run(const Model& model, const Sample& sample, const std::vector<int>& seq, const InterventionPlan& plan,
         const CorruptionSpec& c = {}) {
  Pass p;
  p.input = encode(model, sample, seq, c);
  p.rec = forward(model, p.input.x, p.input.layout, plan);
  p.logits = p.rec.logits.row(p.rec.logits.rows() - 1).transpose();
  return p;
}

bool can_extend(const Model& model, const std::vector<int>& seq) {
  return 1 + 2 * model.n_frames() + static_cast<int>(seq.size()) < model.config.max_seq_len;
}

void check_budget(int max_tokens) {
  if (max_tokens < 0) throw ConfigError("max_tokens must be >= 0");
}

double row_mass(const Mat& a, int row, const std::vector<int>& cols) {
  double s = 0;
  for (int c : cols) s += a(row, c);
  return s;
}

}  // namespace

DecodeResult vanilla_decode(const Model& model, const Sample& sample, const std::vector<int>& prompt, int max_tokens) {
  check_budget(max_tokens);
  DecodeResult out;
  std::vector<int> seq = prompt;
  for (int t = 0; t < max_tokens && can_extend(model, seq); ++t) {
    const Pass p = run(model, sample, seq, {});
    const int next = argmax_first(p.logits);
    seq.push_back(next);
    out.tokens.push_back(next);
    if (next == tok::kEos) break;
  }
  return out;
}

DecodeResult asd_decode(const Model& model, const Sample& sample, const std::vector<int>& prompt,
                        const SinkSets& sinks, const AsdParams& params, int max_tokens, bool reverse) {
  params.validate();
  check_budget(max_tokens);
  if (sinks.uni.empty() && sinks.cross.empty()) {
    DecodeResult r = vanilla_decode(model, sample, prompt, max_tokens);
    r.trace.fallback = true;
    return r;
  }
  {
    std::set<int> c(sinks.cross.begin(), sinks.cross.end());
    for (int u : sinks.uni)
      if (c.count(u)) throw ConfigError("asd: cross and uni sink sets overlap");
  }
  const int L = model.config.n_layers, H = model.config.n_heads;
  DecodeResult out;
  std::vector<int> seq = prompt;
  double gamma = 0.0;
  for (int t = 0; t < max_tokens && can_extend(model, seq); ++t) {
    const Pass orig = run(model, sample, seq, {});
    const int last = orig.input.layout.size() - 1;
    const std::vector<int> text = orig.input.layout.text_positions();
    GuidanceStep st;
    st.t = t;
    double au = 0, ac = 0, rt = 0;
    for (int l = 0; l < L; ++l) {
      double lu = 0, lc = 0;
      for (int h = 0; h < H; ++h) {
        const Mat& a = orig.rec.attn[l][h];
        const double u = row_mass(a, last, sinks.uni), c = row_mass(a, last, sinks.cross);
        au += u;
        ac += c;
        lu += u;
        lc += c;
        rt += row_mass(a, last, text);
      }
      st.layer_uni.push_back(lu / H);
      st.layer_cross.push_back(lc / H);
    }
    st.a_uni = au / (L * H);
    st.a_cross = ac / (L * H);
    st.r_t = rt / (L * H);
    st.gamma_base = gamma_base(st.a_uni, st.a_cross, params.eps);
    st.gamma_hat = gamma_target(st.gamma_base, st.r_t, params);
    gamma = gamma_smooth(gamma, st.gamma_hat, params.momentum);
    st.gamma = gamma;
    if (!(gamma >= 0.0 && gamma <= params.gamma_max + 1e-15))
      throw InvariantError("asd: gamma left [0, gamma_max]");

    const int sign = reverse ? -1 : 1;
    const double alpha = reverse ? params.alpha * st.a_cross / (st.a_uni + st.a_cross + params.eps) : params.alpha;
    InterventionPlan plan;
    plan.mods.push_back({sinks.cross, sign * alpha, {last}, {}});
    plan.mods.push_back({sinks.uni, -sign * alpha, {last}, {}});
    const Pass cali = run(model, sample, seq, plan);

    st.logp_orig = log_softmax(orig.logits);
    st.logp_cali = log_softmax(cali.logits);
    const Vec blended = log_softmax(Vec(gamma * st.logp_cali + (1.0 - gamma) * st.logp_orig));
    const int next = argmax_first(blended);
    st.token_id = next;
    out.trace.steps.push_back(std::move(st));
    seq.push_back(next);
    out.tokens.push_back(next);
    if (next == tok::kEos) break;
  }
  return out;
}

DecodeResult pai_decode(const Model& model, const Sample& sample, const std::vector<int>& prompt, double alpha,
                        int max_tokens) {
  if (!std::isfinite(alpha) || alpha < 0) throw ConfigError("pai: alpha must be finite and >= 0");
  check_budget(max_tokens);
  DecodeResult out;
  std::vector<int> seq = prompt;
  for (int t = 0; t < max_tokens && can_extend(model, seq); ++t) {
    const int n = 1 + 2 * model.n_frames() + static_cast<int>(seq.size());
    std::vector<int> av;
    for (int i = 1; i < 1 + 2 * model.n_frames(); ++i) av.push_back(i);
    InterventionPlan plan;
    plan.mods.push_back({av, alpha, {n - 1}, {}});
    const Pass p = run(model, sample, seq, plan);
    const int next = argmax_first(p.logits);
    seq.push_back(next);
    out.tokens.push_back(next);
    if (next == tok::kEos) break;
  }
  return out;
}

DecodeResult vcd_decode(const Model& model, const Sample& sample, const std::vector<int>& prompt,
                        std::uint64_t noise_seed, double strength, int max_tokens, double noise_scale) {
  if (!std::isfinite(strength) || strength < 0) throw ConfigError("vcd: strength must be finite and >= 0");
  check_budget(max_tokens);
  CorruptionSpec noise;
  noise.method = CorruptionMethod::GaussianNoise;
  noise.audio = noise.video = true;
  noise.noise_scale = noise_scale;
  noise.noise_seed = noise_seed;
  DecodeResult out;
  std::vector<int> seq = prompt;
  for (int t = 0; t < max_tokens && can_extend(model, seq); ++t) {
    const Pass orig = run(model, sample, seq, {});
    Vec blended = orig.logits;
    if (strength != 0.0) {
      const Pass dist = run(model, sample, seq, {}, noise);
      blended = (1.0 + strength) * orig.logits - strength * dist.logits;
    }
    const int next = argmax_first(blended);
    seq.push_back(next);
    out.tokens.push_back(next);
    if (next == tok::kEos) break;
  }
  return out;
}

SinkReport caption_sink_report(const Model& model, const Sample& sample, const std::vector<int>& prompt,
                               const SinkConfig& cfg) {
  Encoded e = encode(model, sample, prompt);
  const ForwardRecord rec = forward(model, e.x, e.layout);
  return build_sink_report(rec, e.layout, cfg, model.config.rms_eps);
}

std::string render_caption(const Model& model, const std::vector<int>& tokens) {
  std::string out;
  for (int t : tokens) {
    if (t == tok::kEos) break;
    std::string w;
    if (t == tok::kArticle)
      w = "a";
    else if (t == tok::kAnd)
      w = "and";
    else if (t >= model.object_token(0) && t < model.object_token(0) + model.n_classes())
      w = class_name(t - model.object_token(0));
    else
      w = "<" + std::to_string(t) + ">";
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

}  // namespace avsink
