#include "avsink/pipeline.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "avsink/halleval.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace avsink {

const char* const kToolVersion = "0.3.0";

std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t mix_seed(std::uint64_t seed, const std::string& tag) {
  return fnv1a64(std::to_string(seed) + "/" + tag);
}

}  // namespace

void RunConfig::validate() const {
  if (n_samples <= 0) throw ConfigError("n_samples must be positive");
  if (n_captions <= 0) throw ConfigError("n_captions must be positive");
  if (sink.n.empty()) throw ConfigError("sink.n must list at least one divisor");
  for (int n : sink.n)
    if (n < 1) throw ConfigError("sink.n entries must be >= 1");
  if (sink.tau && !(*sink.tau > 0)) throw ConfigError("sink.tau must be > 0");
  if (!(sink.tau_percentile > 0 && sink.tau_percentile <= 100)) throw ConfigError("sink.tau_percentile out of range");
  if (sink.d_sink_k < 1) throw ConfigError("sink.d_sink_k must be >= 1");
  if (sink.probe_count < 1) throw ConfigError("sink.probe_count must be >= 1");
  for (const auto& s : strategies) parse_strategy(s);
  const CorruptionMethod c = parse_corruption(corruption);
  if (c == CorruptionMethod::None) throw ConfigError("corruption must not be none");
  parse_guidance(guidance.method);
  guidance.asd.validate();
  if (guidance.max_tokens < 1) throw ConfigError("guidance.max_tokens must be >= 1");
  if (!(guidance.pai_alpha >= 0) || !(guidance.vcd_strength >= 0)) throw ConfigError("guidance strengths must be >= 0");
  if (threads < 1) throw ConfigError("threads must be >= 1");
}

std::string RunConfig::canonical_json() const {
  ojson j;
  j["model"] = model;
  j["dataset"] = dataset;
  j["captions"] = captions;
  j["vocabulary"] = vocabulary;
  j["detector"] = detector;
  j["seed"] = seed;
  j["n_samples"] = n_samples;
  j["n_captions"] = n_captions;
  j["d_sink"] = d_sink;
  ojson s;
  s["n"] = sink.n;
  if (sink.tau)
    s["tau"] = *sink.tau;
  else
    s["tau"] = "auto";
  s["tau_percentile"] = sink.tau_percentile;
  s["d_sink_k"] = sink.d_sink_k;
  s["probe_count"] = sink.probe_count;
  j["sink"] = s;
  j["strategies"] = strategies;
  j["corruption"] = corruption;
  ojson g;
  g["method"] = guidance.method;
  g["alpha"] = guidance.asd.alpha;
  g["gamma_max"] = guidance.asd.gamma_max;
  g["gate"] = guidance.asd.gate;
  g["text_mass"] = guidance.asd.text_mass;
  g["momentum"] = guidance.asd.momentum;
  g["eps"] = guidance.asd.eps;
  g["pai_alpha"] = guidance.pai_alpha;
  g["vcd_strength"] = guidance.vcd_strength;
  g["vcd_noise_scale"] = guidance.vcd_noise_scale;
  g["max_tokens"] = guidance.max_tokens;
  j["guidance"] = g;
  return j.dump();
}

std::string RunConfig::config_hash() const { return hex64(fnv1a64(canonical_json())); }

std::string RunConfig::resolve(const std::string& path) const {
  if (path.empty()) return path;
  fs::path p(path);
  if (p.is_absolute()) return path;
  return (fs::path(out.empty() ? default_out_dir() : out) / p).string();
}

std::string default_out_dir() {
  if (const char* v = std::getenv(kOutEnvVar); v && *v) return v;
  return "out";
}

RunConfig run_config_from_json_text(const std::string& text) {
  RunConfig c;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  try {
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string& k = it.key();
      const auto& v = it.value();
      if (k == "model") c.model = v.get<std::string>();
      else if (k == "dataset") c.dataset = v.get<std::string>();
      else if (k == "captions") c.captions = v.get<std::string>();
      else if (k == "vocabulary") c.vocabulary = v.get<std::string>();
      else if (k == "detector") c.detector = v.is_null() ? "" : v.get<std::string>();
      else if (k == "seed") c.seed = v.get<std::uint64_t>();
      else if (k == "n_samples") c.n_samples = v.get<int>();
      else if (k == "n_captions") c.n_captions = v.get<int>();
      else if (k == "d_sink") c.d_sink = v.get<std::vector<int>>();
      else if (k == "strategies") c.strategies = v.get<std::vector<std::string>>();
      else if (k == "corruption") c.corruption = v.get<std::string>();
      else if (k == "out") c.out = v.get<std::string>();
      else if (k == "threads") c.threads = v.get<int>();
      else if (k == "sink") {
        for (auto s = v.begin(); s != v.end(); ++s) {
          const std::string& sk = s.key();
          if (sk == "n") c.sink.n = s->is_array() ? s->get<std::vector<int>>() : std::vector<int>{s->get<int>()};
          else if (sk == "tau") {
            if (s->is_string()) {
              if (s->get<std::string>() != "auto") throw ConfigError("config: sink.tau must be a number or \"auto\"");
              c.sink.tau.reset();
            } else {
              c.sink.tau = s->get<double>();
            }
          } else if (sk == "tau_percentile") c.sink.tau_percentile = s->get<double>();
          else if (sk == "d_sink_k") c.sink.d_sink_k = s->get<int>();
          else if (sk == "probe_count") c.sink.probe_count = s->get<int>();
          else throw ConfigError("config: unknown field sink." + sk);
        }
      } else if (k == "guidance") {
        for (auto g = v.begin(); g != v.end(); ++g) {
          const std::string& gk = g.key();
          if (gk == "method") c.guidance.method = g->get<std::string>();
          else if (gk == "alpha") c.guidance.asd.alpha = g->get<double>();
          else if (gk == "gamma_max") c.guidance.asd.gamma_max = g->get<double>();
          else if (gk == "gate") c.guidance.asd.gate = g->get<double>();
          else if (gk == "text_mass") c.guidance.asd.text_mass = g->get<double>();
          else if (gk == "momentum") c.guidance.asd.momentum = g->get<double>();
          else if (gk == "eps") c.guidance.asd.eps = g->get<double>();
          else if (gk == "pai_alpha") c.guidance.pai_alpha = g->get<double>();
          else if (gk == "vcd_strength") c.guidance.vcd_strength = g->get<double>();
          else if (gk == "vcd_noise_scale") c.guidance.vcd_noise_scale = g->get<double>();
          else if (gk == "max_tokens") c.guidance.max_tokens = g->get<int>();
          else throw ConfigError("config: unknown field guidance." + gk);
        }
      } else {
        throw ConfigError("config: unknown field " + k);
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return run_config_from_json_text(ss.str());
}

void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr err;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (int w = 0; w < std::min(threads, n); ++w) {
    pool.emplace_back([&] {
      for (;;) {
        const int i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lk(mu);
          if (!err) err = std::current_exception();
          next.store(n);
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

namespace {

ojson meta_json(const RunConfig& cfg) {
  ojson m;
  m["seed"] = cfg.seed;
  m["config_hash"] = cfg.config_hash();
  m["version"] = kToolVersion;
  return m;
}

std::string meta_line(const RunConfig& cfg) {
  ojson j;
  j["_meta"] = meta_json(cfg);
  return j.dump() + "\n";
}

std::string csv_meta(const RunConfig& cfg) {
  return "# seed=" + std::to_string(cfg.seed) + " config_hash=" + cfg.config_hash() + " version=" + kToolVersion + "\n";
}

std::string out_dir(const RunConfig& cfg) { return cfg.out.empty() ? default_out_dir() : cfg.out; }

void ensure_out_dir(const RunConfig& cfg) {
  std::error_code ec;
  fs::create_directories(out_dir(cfg), ec);
  if (ec || !fs::is_directory(out_dir(cfg))) throw ConfigError("cannot create output directory: " + out_dir(cfg));
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write: " + path);
  f << text;
  if (!f) throw ConfigError("failed writing: " + path);
}

std::string read_text(const std::string& path, bool config_error = false) {
  std::ifstream f(path, std::ios::binary);
  if (!f) {
    if (config_error) throw ConfigError("cannot read: " + path);
    throw DataError("cannot read: " + path);
  }
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::vector<Sample> load_samples(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot read dataset: " + path);
  return read_samples_jsonl(f);
}

std::string fmt(double v) {
  char buf[64];
  if (std::abs(v) < 5e-7) v = 0.0;  // no "-0.000000"
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

ObjectVocabulary default_vocabulary(const Model& m) {
  ObjectVocabulary v;
  for (int k = 0; k < m.n_classes(); ++k) v.objects.push_back(class_name(k));
  const std::map<std::string, std::string> syn = {{"puppy", "dog"},     {"kitten", "cat"},     {"automobile", "car"},
                                                  {"infant", "baby"},   {"motorbike", "motorcycle"},
                                                  {"chopper", "helicopter"}, {"cockerel", "rooster"}};
  std::set<std::string> canon(v.objects.begin(), v.objects.end());
  for (const auto& [s, t] : syn)
    if (canon.count(t)) v.synonyms[s] = t;
  return v;
}

struct SinkSetup {
  std::vector<int> dims;
  double tau = 0;
};

SinkSetup sink_setup(const Model& model, const std::vector<Sample>& samples, const SinkSettings& s) {
  std::vector<Sample> probes(samples.begin(), samples.begin() + std::min<size_t>(samples.size(), s.probe_count));
  if (probes.empty()) throw DataError("no samples available to probe sink dimensions");
  std::vector<ForwardRecord> recs;
  int bos = 0;
  for (const auto& p : probes) {
    Encoded e = encode(model, p, mcq_prompt(model));
    bos = e.layout.bos;
    recs.push_back(forward(model, e.x, e.layout));
  }
  std::vector<const ForwardRecord*> ptrs;
  for (const auto& r : recs) ptrs.push_back(&r);
  SinkSetup out;
  out.dims = discover_sink_dims(ptrs, bos, s.d_sink_k, model.config.rms_eps);
  out.tau = s.tau ? *s.tau : calibrate_tau(ptrs, s.tau_percentile, model.config.rms_eps);
  return out;
}

struct FilterEntry {
  std::string id;
  Dominance dominance = Dominance::NoDominance;
};

std::vector<FilterEntry> run_filter(const Model& model, const std::vector<Sample>& samples, int threads) {
  std::vector<FilterEntry> out(samples.size());
  parallel_for(static_cast<int>(samples.size()), threads, [&](int i) {
    const Predictions p = predict_modalities(model, samples[i]);
    out[i] = {samples[i].id, classify_dominance(p.y_av, p.y_a, p.y_v)};
  });
  return out;
}

std::string filter_json(const RunConfig& cfg, const std::vector<Sample>& samples, const std::vector<FilterEntry>& f) {
  ojson j;
  j["_meta"] = meta_json(cfg);
  int na = 0, nv = 0, nn = 0, task_audio = 0, task_audio_kept = 0;
  auto retained = ojson::array();
  for (size_t i = 0; i < f.size(); ++i) {
    if (f[i].dominance == Dominance::AudioDominant) ++na;
    else if (f[i].dominance == Dominance::VideoDominant) ++nv;
    else ++nn;
    if (samples[i].dominant == Modality::Audio) {
      ++task_audio;
      if (f[i].dominance == Dominance::AudioDominant) ++task_audio_kept;
    }
    if (f[i].dominance != Dominance::NoDominance) {
      ojson r;
      r["id"] = f[i].id;
      r["dominance"] = dominance_name(f[i].dominance);
      retained.push_back(r);
    }
  }
  j["counts"] = {{"audio", na}, {"video", nv}, {"none", nn}};
  j["audio_task_retained_fraction"] = task_audio ? double(task_audio_kept) / task_audio : 0.0;
  j["retained"] = retained;
  return j.dump(2) + "\n";
}

Dominance parse_dominance(const std::string& s) {
  if (s == "audio") return Dominance::AudioDominant;
  if (s == "video") return Dominance::VideoDominant;
  if (s == "none") return Dominance::NoDominance;
  throw DataError("unknown dominance label: " + s);
}

std::vector<FilterEntry> load_or_run_filter(const RunConfig& cfg, const Model& model,
                                            const std::vector<Sample>& samples) {
  const std::string path = (fs::path(out_dir(cfg)) / "filter.json").string();
  if (!fs::exists(path)) return run_filter(model, samples, cfg.threads);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("filter.json: ") + e.what());
  }
  std::map<std::string, Dominance> kept;
  for (const auto& r : j.at("retained")) kept[r.at("id").get<std::string>()] = parse_dominance(r.at("dominance"));
  std::vector<FilterEntry> out;
  for (const auto& s : samples) {
    auto it = kept.find(s.id);
    out.push_back({s.id, it == kept.end() ? Dominance::NoDominance : it->second});
  }
  return out;
}

}  // namespace

void cmd_gen(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  ensure_out_dir(cfg);
  PlantSpec plant;
  plant.d_sink = cfg.d_sink;
  Model model = build_planted_model(ModelConfig{}, cfg.seed, plant);
  model.meta = meta_json(cfg).dump();
  save_model_file(model, cfg.resolve(cfg.model));

  const auto samples = generate_dataset(model, TaskSpec{}, cfg.n_samples, cfg.seed);
  {
    std::ostringstream os;
    os << meta_line(cfg);
    for (const auto& s : samples) write_sample_jsonl(os, s);
    write_text(cfg.resolve(cfg.dataset), os.str());
  }
  const auto caps = generate_caption_corpus(model, CaptionTaskSpec{}, cfg.n_captions, mix_seed(cfg.seed, "captions"));
  {
    std::ostringstream os;
    os << meta_line(cfg);
    for (const auto& s : caps) write_sample_jsonl(os, s);
    write_text(cfg.resolve(cfg.captions), os.str());
  }
  write_text(cfg.resolve(cfg.vocabulary), default_vocabulary(model).to_json_text());

  const auto filter = run_filter(model, samples, cfg.threads);
  write_text((fs::path(out_dir(cfg)) / "filter.json").string(), filter_json(cfg, samples, filter));

  const PlantedTruth& t = model.truth;
  auto list = [](const std::vector<int>& v) {
    std::string s;
    for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return "{" + s + "}";
  };
  int na = 0, nv = 0, nn = 0;
  for (const auto& f : filter)
    (f.dominance == Dominance::AudioDominant ? na : f.dominance == Dominance::VideoDominant ? nv : nn) += 1;
  log << "planted D_sink " << list(t.d_sink) << " at layer " << t.planting_layer << "\n";
  log << "audio sinks " << list(t.audio_sink_positions()) << " video sinks " << list(t.video_sink_positions()) << "\n";
  log << "cross-modal sinks " << list(t.crossmodal_positions()) << " unimodal sinks " << list(t.unimodal_positions())
      << "\n";
  log << "dataset " << samples.size() << " samples, captions " << caps.size() << "\n";
  log << "dominance filter: audio " << na << " video " << nv << " none " << nn << "\n";
}

void cmd_trace(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  ensure_out_dir(cfg);
  const Model model = load_model_file(cfg.resolve(cfg.model));
  const auto samples = load_samples(cfg.resolve(cfg.dataset));
  const auto filter = load_or_run_filter(cfg, model, samples);
  std::vector<int> kept;
  int na = 0, nv = 0, nn = 0;
  for (size_t i = 0; i < filter.size(); ++i) {
    if (filter[i].dominance != Dominance::NoDominance) kept.push_back(static_cast<int>(i));
    (filter[i].dominance == Dominance::AudioDominant ? na : filter[i].dominance == Dominance::VideoDominant ? nv : nn) += 1;
  }
  if (kept.empty())
    throw DataError("no samples survive the dominance filter (audio " + std::to_string(na) + ", video " +
                    std::to_string(nv) + ", none " + std::to_string(nn) + ")");
  const SinkSetup setup = sink_setup(model, samples, cfg.sink);
  const CorruptionMethod method = parse_corruption(cfg.corruption);

  std::vector<Strategy> strategies;
  for (const auto& s : cfg.strategies) strategies.push_back(parse_strategy(s));
  auto wants = [&](Strategy s) { return std::find(strategies.begin(), strategies.end(), s) != strategies.end(); };

  struct Row {
    std::string ablation;
    int n = 0;
    IndirectEffect ie;
  };
  std::vector<std::vector<Row>> rows(kept.size());
  parallel_for(static_cast<int>(kept.size()), cfg.threads, [&](int k) {
    const Sample& s = samples[kept[k]];
    const Dominance dom = filter[kept[k]].dominance;
    CorruptionOptions co;
    co.method = method;
    co.noise_seed = mix_seed(cfg.seed, "noise/" + s.id);
    const TraceTriplet t = run_triplet(model, s, dom, co);
    const TokenLayout& lay = t.clean_input.layout;
    auto& out = rows[k];
    for (Strategy st : {Strategy::All, Strategy::Object}) {
      if (!wants(st)) continue;
      SubsetRequest req;
      req.strategy = st;
      out.push_back({strategy_name(st), 0, indirect_effects(model, t, select_subset(req, lay, nullptr, dom))});
    }
    for (int n : cfg.sink.n) {
      const SinkReport rep = build_sink_report(t.clean, lay, SinkConfig{setup.dims, setup.tau, n}, model.config.rms_eps);
      SubsetRequest sink_req;
      sink_req.strategy = Strategy::Sink;
      sink_req.n = n;
      const TokenSubset sink = select_subset(sink_req, lay, &rep, dom);
      for (Strategy st : {Strategy::Sink, Strategy::Random, Strategy::UnimodalSink, Strategy::CrossmodalSink}) {
        if (!wants(st)) continue;
        SubsetRequest req;
        req.strategy = st;
        req.n = n;
        req.count = sink.count();
        req.seed = mix_seed(cfg.seed, "random/" + s.id + "/" + std::to_string(n));
        const TokenSubset sub = st == Strategy::Sink ? sink : select_subset(req, lay, &rep, dom);
        out.push_back({std::string(strategy_name(st)) + "_n" + std::to_string(n), n, indirect_effects(model, t, sub)});
      }
    }
  });

  std::ostringstream jl;
  jl << meta_line(cfg);
  // (dominance, ablation) -> sums, in first-seen order
  std::vector<std::pair<std::string, std::string>> order;
  std::map<std::pair<std::string, std::string>, std::array<double, 4>> acc;
  for (size_t k = 0; k < kept.size(); ++k) {
    const std::string dom = dominance_name(filter[kept[k]].dominance);
    for (const auto& r : rows[k]) {
      ojson j;
      j["id"] = samples[kept[k]].id;
      j["modality_dominance"] = dom;
      j["ablation"] = r.ablation;
      j["n"] = r.n;
      j["ie_clean"] = r.ie.ie_clean;
      j["ie_corr"] = r.ie.ie_corrupt;
      j["n_tokens"] = r.ie.n_tokens;
      jl << j.dump() << "\n";
      auto key = std::make_pair(dom, r.ablation);
      if (!acc.count(key)) {
        order.push_back(key);
        acc[key] = {0, 0, 0, 0};
      }
      auto& a = acc[key];
      a[0] += r.ie.ie_clean;
      a[1] += r.ie.ie_corrupt;
      a[2] += r.ie.n_tokens;
      a[3] += 1;
    }
  }
  std::stable_sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  std::ostringstream csv;
  csv << csv_meta(cfg) << "modality,ablation,ie_clean,ie_corr,n_tokens\n";
  for (const auto& key : order) {
    const auto& a = acc[key];
    csv << key.first << "," << key.second << "," << fmt(a[0] / a[3]) << "," << fmt(a[1] / a[3]) << ","
        << fmt(a[2] / a[3]) << "\n";
  }
  write_text((fs::path(out_dir(cfg)) / "traces.jsonl").string(), jl.str());
  write_text((fs::path(out_dir(cfg)) / "table.csv").string(), csv.str());
  log << "traced " << kept.size() << " samples (audio " << na << ", video " << nv << "), d_sink {" << setup.dims[0];
  for (size_t i = 1; i < setup.dims.size(); ++i) log << "," << setup.dims[i];
  log << "} tau " << fmt(setup.tau) << "\n";
}

void cmd_sinks(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  ensure_out_dir(cfg);
  const Model model = load_model_file(cfg.resolve(cfg.model));
  const auto samples = load_samples(cfg.resolve(cfg.dataset));
  if (samples.empty()) throw DataError("dataset is empty");
  const SinkSetup setup = sink_setup(model, samples, cfg.sink);
  const int n = cfg.sink.n.front();
  const Sample& s = samples.front();
  const Encoded e = encode(model, s, mcq_prompt(model));
  const ForwardRecord rec = forward(model, e.x, e.layout);
  const SinkReport rep = build_sink_report(rec, e.layout, SinkConfig{setup.dims, setup.tau, n}, model.config.rms_eps);

  ojson j;
  j["_meta"] = meta_json(cfg);
  j["sample"] = s.id;
  j["d_sink"] = setup.dims;
  j["tau"] = setup.tau;
  j["n"] = n;
  j["global_sinks"] = rep.global;
  auto per = ojson::array();
  std::vector<double> audio_vals, video_vals;
  for (size_t i = 0; i < rep.global.size(); ++i) {
    const int p = rep.global[i];
    ojson o;
    o["position"] = p;
    o["segment"] = segment_name(e.layout.segment[p]);
    o["layers"] = rep.layer_mds[i];
    o["mean"] = rep.mean_mds[i];
    per.push_back(o);
    if (e.layout.segment[p] == Segment::Audio) audio_vals.push_back(rep.mean_mds[i]);
    if (e.layout.segment[p] == Segment::Video) video_vals.push_back(rep.mean_mds[i]);
  }
  j["per_sink_mds"] = per;
  j["partition"] = {{"audio", {{"uni", rep.audio.uni}, {"cross", rep.audio.cross}}},
                    {"video", {{"uni", rep.video.uni}, {"cross", rep.video.cross}}}};
  auto stats_json = [](const std::vector<double>& v) -> ojson {
    if (v.empty()) return nullptr;
    const MdsStats st = mds_stats(v);
    return {{"median", st.median}, {"iqr", st.iqr}, {"std", st.std}};
  };
  j["mds_stats"] = {{"audio", stats_json(audio_vals)}, {"video", stats_json(video_vals)}};
  write_text((fs::path(out_dir(cfg)) / "sinks.json").string(), j.dump(2) + "\n");

  // Plot data: one row per sink, sorted by layer-averaged MDS within each modality.
  struct Line {
    Segment seg;
    double mean;
    int pos;
    std::string role;
    const std::vector<double>* layers;
  };
  std::vector<Line> lines;
  auto role_of = [&](int p) -> std::string {
    for (const auto* v : {&rep.audio.cross, &rep.video.cross})
      if (std::find(v->begin(), v->end(), p) != v->end()) return "cross";
    for (const auto* v : {&rep.audio.uni, &rep.video.uni})
      if (std::find(v->begin(), v->end(), p) != v->end()) return "uni";
    return "none";
  };
  for (size_t i = 0; i < rep.global.size(); ++i) {
    const int p = rep.global[i];
    if (e.layout.segment[p] == Segment::Text) continue;
    lines.push_back({e.layout.segment[p], rep.mean_mds[i], p, role_of(p), &rep.layer_mds[i]});
  }
  std::sort(lines.begin(), lines.end(), [](const Line& a, const Line& b) {
    if (a.seg != b.seg) return a.seg < b.seg;
    if (a.mean != b.mean) return a.mean < b.mean;
    return a.pos < b.pos;
  });
  std::ostringstream csv;
  csv << csv_meta(cfg) << "position,modality,role,mean_mds";
  for (int l = 0; l < model.config.n_layers; ++l) csv << ",layer_" << l;
  csv << "\n";
  for (const auto& ln : lines) {
    csv << ln.pos << "," << segment_name(ln.seg) << "," << ln.role << "," << fmt(ln.mean);
    for (double v : *ln.layers) csv << "," << fmt(v);
    csv << "\n";
  }
  write_text((fs::path(out_dir(cfg)) / "mds.csv").string(), csv.str());

  const auto truth_cross = model.truth.crossmodal_positions();
  const bool match = rep.crossmodal() == truth_cross && rep.unimodal() == model.truth.unimodal_positions();
  log << "global sinks " << rep.global.size() << ", partition " << (match ? "matches" : "differs from")
      << " the planted routing\n";
}

void cmd_decode(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  ensure_out_dir(cfg);
  const GuidanceMethod method = parse_guidance(cfg.guidance.method);
  const Model model = load_model_file(cfg.resolve(cfg.model));
  const auto caps = load_samples(cfg.resolve(cfg.captions));
  if (caps.empty()) throw DataError("caption corpus is empty");
  const SinkSetup setup = sink_setup(model, caps, cfg.sink);
  const int n = cfg.sink.n.front();
  const auto prompt = caption_prompt();
  std::vector<DecodeResult> results(caps.size());
  parallel_for(static_cast<int>(caps.size()), cfg.threads, [&](int i) {
    const Sample& s = caps[i];
    switch (method) {
      case GuidanceMethod::Vanilla:
        results[i] = vanilla_decode(model, s, prompt, cfg.guidance.max_tokens);
        break;
      case GuidanceMethod::Asd:
      case GuidanceMethod::ReverseAsd: {
        const SinkReport rep = caption_sink_report(model, s, prompt, SinkConfig{setup.dims, setup.tau, n});
        results[i] = asd_decode(model, s, prompt, sink_sets(rep), cfg.guidance.asd, cfg.guidance.max_tokens,
                                method == GuidanceMethod::ReverseAsd);
        break;
      }
      case GuidanceMethod::Pai:
        results[i] = pai_decode(model, s, prompt, cfg.guidance.pai_alpha, cfg.guidance.max_tokens);
        break;
      case GuidanceMethod::Vcd:
        results[i] = vcd_decode(model, s, prompt, mix_seed(cfg.seed, "vcd/" + s.id), cfg.guidance.vcd_strength,
                                cfg.guidance.max_tokens, cfg.guidance.vcd_noise_scale);
        break;
    }
  });
  const std::string name = guidance_name(method);
  std::ostringstream cj, gj;
  cj << meta_line(cfg);
  gj << meta_line(cfg);
  int fallbacks = 0;
  for (size_t i = 0; i < caps.size(); ++i) {
    ojson c;
    c["id"] = caps[i].id;
    c["tokens"] = results[i].tokens;
    c["caption"] = render_caption(model, results[i].tokens);
    cj << c.dump() << "\n";
    if (results[i].trace.fallback) ++fallbacks;
    for (const auto& st : results[i].trace.steps) {
      ojson g;
      g["id"] = caps[i].id;
      g["t"] = st.t;
      g["a_uni"] = st.a_uni;
      g["a_cross"] = st.a_cross;
      g["r_t"] = st.r_t;
      g["gamma_base"] = st.gamma_base;
      g["gamma_hat"] = st.gamma_hat;
      g["gamma"] = st.gamma;
      g["token_id"] = st.token_id;
      gj << g.dump() << "\n";
    }
  }
  write_text((fs::path(out_dir(cfg)) / ("captions_" + name + ".jsonl")).string(), cj.str());
  if (method == GuidanceMethod::Asd || method == GuidanceMethod::ReverseAsd)
    write_text((fs::path(out_dir(cfg)) / ("guidance_" + name + ".jsonl")).string(), gj.str());
  log << "decoded " << caps.size() << " captions with " << name;
  if (fallbacks) log << " (" << fallbacks << " fell back to vanilla: no sink sets)";
  log << "\n";
}

void cmd_eval(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  ensure_out_dir(cfg);
  const std::string vocab_path = cfg.resolve(cfg.vocabulary);
  if (!fs::exists(vocab_path)) throw ConfigError("vocabulary missing: " + vocab_path);
  const ObjectVocabulary vocab = ObjectVocabulary::from_json_text(read_text(vocab_path, true));
  const auto caps = load_samples(cfg.resolve(cfg.captions));
  std::optional<DetectorFile> det;
  if (!cfg.detector.empty()) det = read_detector_jsonl(read_text(cfg.resolve(cfg.detector)));

  std::map<std::string, std::set<std::string>> gt;
  int dropped = 0;
  for (const auto& s : caps) {
    const std::vector<std::string>* d = nullptr;
    if (det) {
      auto it = det->detections.find(s.id);
      if (it != det->detections.end()) d = &it->second;
    }
    GroundTruth g = build_ground_truth({class_name(s.label)}, d, vocab);
    dropped += g.dropped;
    gt[s.id] = std::move(g.objects);
  }

  std::ostringstream csv;
  csv << csv_meta(cfg) << "method,c_s,c_i,f1\n";
  int evaluated = 0;
  for (GuidanceMethod m : {GuidanceMethod::Vanilla, GuidanceMethod::Asd, GuidanceMethod::ReverseAsd,
                           GuidanceMethod::Pai, GuidanceMethod::Vcd}) {
    const std::string name = guidance_name(m);
    const fs::path path = fs::path(out_dir(cfg)) / ("captions_" + name + ".jsonl");
    if (!fs::exists(path)) continue;
    std::vector<std::string> ids, texts;
    std::vector<std::set<std::string>> truths;
    std::istringstream in(read_text(path.string()));
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
        if (j.contains("_meta")) continue;
        const std::string id = j.at("id").get<std::string>();
        auto it = gt.find(id);
        if (it == gt.end()) throw DataError(path.string() + " line " + std::to_string(lineno) + ": unknown id " + id);
        ids.push_back(id);
        texts.push_back(j.at("caption").get<std::string>());
        truths.push_back(it->second);
      } catch (const nlohmann::json::exception& e) {
        throw DataError(path.string() + " line " + std::to_string(lineno) + ": " + e.what());
      }
    }
    const EvalResult r = evaluate(ids, texts, truths, vocab);
    if (!(r.c_s >= 0 && r.c_s <= 1 && r.c_i >= 0 && r.c_i <= 1 && r.f1 >= 0 && r.f1 <= 1))
      throw InvariantError("evaluation metrics left [0,1]");
    ojson j;
    j["_meta"] = meta_json(cfg);
    j["method"] = name;
    j["c_s"] = r.c_s;
    j["c_i"] = r.c_i;
    j["f1"] = r.f1;
    auto per = ojson::array();
    for (const auto& pc : r.per_caption) {
      ojson o;
      o["id"] = pc.id;
      o["mentioned"] = pc.mentioned;
      o["hallucinated"] = pc.hallucinated;
      per.push_back(o);
    }
    j["per_caption"] = per;
    write_text((fs::path(out_dir(cfg)) / ("eval_" + name + ".json")).string(), j.dump(2) + "\n");
    csv << name << "," << fmt(r.c_s) << "," << fmt(r.c_i) << "," << fmt(r.f1) << "\n";
    log << name << ": C_s " << fmt(r.c_s) << " C_i " << fmt(r.c_i) << " F1 " << fmt(r.f1) << "\n";
    ++evaluated;
  }
  if (!evaluated) throw DataError("no caption files to evaluate in " + out_dir(cfg) + " (run decode first)");
  if (dropped) log << "dropped " << dropped << " detector names not in the vocabulary\n";
  write_text((fs::path(out_dir(cfg)) / "eval.csv").string(), csv.str());
}

}  // namespace avsink
