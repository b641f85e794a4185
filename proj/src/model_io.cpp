#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "avsink/model.hpp"
#include "json.hpp"

namespace avsink {

static_assert(std::endian::native == std::endian::little, "model files are written little-endian");

namespace {

constexpr char kMagic[8] = {'A', 'V', 'S', 'I', 'N', 'K', 'M', 'D'};
constexpr std::uint32_t kFormatVersion = 1;

class Writer {
 public:
  explicit Writer(std::ostream& o) : o_(o) {}
  void raw(const void* p, size_t n) { o_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  void u32(std::uint32_t v) { raw(&v, 4); }
  void u64(std::uint64_t v) { raw(&v, 8); }
  void i64(std::int64_t v) { raw(&v, 8); }
  void f64(double v) { raw(&v, 8); }
  void ints(const std::vector<int>& v) {
    u64(v.size());
    for (int x : v) i64(x);
  }
  void mat(const Mat& m) {
    u64(static_cast<std::uint64_t>(m.rows()));
    u64(static_cast<std::uint64_t>(m.cols()));
    raw(m.data(), sizeof(double) * static_cast<size_t>(m.size()));
  }
  void str(const std::string& s) {
    u64(s.size());
    raw(s.data(), s.size());
  }
  void vec(const Vec& v) {
    u64(static_cast<std::uint64_t>(v.size()));
    raw(v.data(), sizeof(double) * static_cast<size_t>(v.size()));
  }

 private:
  std::ostream& o_;
};

class Reader {
 public:
  explicit Reader(std::istream& i) : i_(i) {}
  void raw(void* p, size_t n) {
    i_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!i_) throw DataError("model file truncated");
  }
  std::uint32_t u32() { std::uint32_t v; raw(&v, 4); return v; }
  std::uint64_t u64() { std::uint64_t v; raw(&v, 8); return v; }
  std::int64_t i64() { std::int64_t v; raw(&v, 8); return v; }
  double f64() { double v; raw(&v, 8); return v; }
  int small_int() {
    const std::int64_t v = i64();
    if (v < -(1 << 30) || v > (1 << 30)) throw DataError("model file: integer field out of range");
    return static_cast<int>(v);
  }
  std::uint64_t count(std::uint64_t limit = 1u << 24) {
    const std::uint64_t n = u64();
    if (n > limit) throw DataError("model file: implausible block size");
    return n;
  }
  std::vector<int> ints() {
    std::vector<int> v(count());
    for (auto& x : v) x = small_int();
    return v;
  }
  Mat mat() {
    const auto r = count(), c = count();
    if (r * c > (1u << 26)) throw DataError("model file: implausible matrix size");
    Mat m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
    raw(m.data(), sizeof(double) * static_cast<size_t>(m.size()));
    return m;
  }
  std::string str() {
    std::string s(count(1u << 20), '\0');
    if (!s.empty()) raw(s.data(), s.size());
    return s;
  }
  Vec vec() {
    Vec v(static_cast<Eigen::Index>(count()));
    raw(v.data(), sizeof(double) * static_cast<size_t>(v.size()));
    return v;
  }

 private:
  std::istream& i_;
};

}  // namespace

void save_model(const Model& m, std::ostream& out) {
  Writer w(out);
  w.raw(kMagic, 8);
  w.u32(kFormatVersion);
  const ModelConfig& c = m.config;
  for (int v : {c.n_layers, c.n_heads, c.d_model, c.d_head, c.d_mlp, c.vocab_size, c.max_seq_len}) w.i64(v);
  w.f64(c.rms_eps);
  const PlantSpec& p = m.plant;
  for (int v : {p.n_classes, p.n_frames, p.d_audio, p.d_video, p.sinks_per_modality, p.d_sink_size}) w.i64(v);
  w.f64(p.cross_fraction);
  w.ints(p.d_sink);
  w.u64(m.seed);
  w.str(m.meta);

  const PlantedTruth& t = m.truth;
  w.ints(t.d_sink);
  w.i64(t.planting_layer);
  w.i64(t.bos_position);
  w.ints(t.audio_uni_steps);
  w.ints(t.audio_cross_steps);
  w.ints(t.video_uni_steps);
  w.ints(t.video_cross_steps);
  w.u64(t.routing.size());
  for (auto [pos, mod] : t.routing) {
    w.i64(pos);
    w.i64(mod == Modality::Audio ? 0 : 1);
  }
  std::vector<int> dom;
  for (Modality d : t.class_dominance) dom.push_back(d == Modality::Audio ? 0 : 1);
  w.ints(dom);
  w.i64(t.object_step_begin);
  w.i64(t.object_step_end);
  w.mat(t.features.audio_proto);
  w.mat(t.features.video_proto);
  w.vec(t.features.audio_salience);
  w.vec(t.features.audio_presence);
  w.vec(t.features.video_presence);

  w.u64(m.layers.size());
  for (const auto& l : m.layers) {
    w.u64(l.heads.size());
    for (const auto& h : l.heads) {
      w.mat(h.wq);
      w.mat(h.wk);
      w.mat(h.wv);
      w.mat(h.wo);
    }
    w.mat(l.mlp_in);
    w.vec(l.mlp_bias);
    w.mat(l.mlp_out);
  }
  w.mat(m.audio_enc);
  w.mat(m.video_enc);
  w.vec(m.audio_bias);
  w.vec(m.video_bias);
  w.mat(m.embed);
  w.mat(m.unembed);
  w.mat(m.pos);
  if (!out) throw DataError("failed writing model");
}

Model load_model(std::istream& in) {
  Reader r(in);
  char magic[8];
  r.raw(magic, 8);
  if (std::memcmp(magic, kMagic, 8) != 0) throw DataError("not a model file (bad magic)");
  const auto ver = r.u32();
  if (ver != kFormatVersion) throw DataError("unsupported model file version " + std::to_string(ver));
  Model m;
  ModelConfig& c = m.config;
  for (int* v : {&c.n_layers, &c.n_heads, &c.d_model, &c.d_head, &c.d_mlp, &c.vocab_size, &c.max_seq_len})
    *v = r.small_int();
  c.rms_eps = r.f64();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw DataError(std::string("model file: ") + e.what());
  }
  PlantSpec& p = m.plant;
  for (int* v : {&p.n_classes, &p.n_frames, &p.d_audio, &p.d_video, &p.sinks_per_modality, &p.d_sink_size})
    *v = r.small_int();
  p.cross_fraction = r.f64();
  p.d_sink = r.ints();
  m.seed = r.u64();
  m.meta = r.str();

  PlantedTruth& t = m.truth;
  t.d_sink = r.ints();
  t.planting_layer = r.small_int();
  t.bos_position = r.small_int();
  t.audio_uni_steps = r.ints();
  t.audio_cross_steps = r.ints();
  t.video_uni_steps = r.ints();
  t.video_cross_steps = r.ints();
  const auto nr = r.count();
  for (std::uint64_t i = 0; i < nr; ++i) {
    const int pos = r.small_int();
    const int mod = r.small_int();
    t.routing.push_back({pos, mod == 0 ? Modality::Audio : Modality::Video});
  }
  for (int d : r.ints()) t.class_dominance.push_back(d == 0 ? Modality::Audio : Modality::Video);
  t.object_step_begin = r.small_int();
  t.object_step_end = r.small_int();
  t.features.audio_proto = r.mat();
  t.features.video_proto = r.mat();
  t.features.audio_salience = r.vec();
  t.features.audio_presence = r.vec();
  t.features.video_presence = r.vec();

  const auto nl = r.count();
  if (static_cast<int>(nl) != c.n_layers) throw DataError("model file: layer count mismatch");
  m.layers.resize(nl);
  for (auto& l : m.layers) {
    const auto nh = r.count();
    if (static_cast<int>(nh) != c.n_heads) throw DataError("model file: head count mismatch");
    l.heads.resize(nh);
    for (auto& h : l.heads) {
      h.wq = r.mat();
      h.wk = r.mat();
      h.wv = r.mat();
      h.wo = r.mat();
    }
    l.mlp_in = r.mat();
    l.mlp_bias = r.vec();
    l.mlp_out = r.mat();
  }
  m.audio_enc = r.mat();
  m.video_enc = r.mat();
  m.audio_bias = r.vec();
  m.video_bias = r.vec();
  m.embed = r.mat();
  m.unembed = r.mat();
  m.pos = r.mat();

  // Shape and finiteness checks so a damaged file fails here rather than mid-forward.
  auto shape = [](const Mat& x, Eigen::Index rr, Eigen::Index cc, const char* what) {
    if (x.rows() != rr || x.cols() != cc) throw DataError(std::string("model file: bad shape for ") + what);
    if (!all_finite(x)) throw DataError(std::string("model file: non-finite weights in ") + what);
  };
  const int D = c.d_model;
  for (const auto& l : m.layers) {
    for (const auto& h : l.heads) {
      shape(h.wq, c.d_head, D, "wq");
      shape(h.wk, c.d_head, D, "wk");
      shape(h.wv, c.d_head, D, "wv");
      shape(h.wo, D, c.d_head, "wo");
    }
    shape(l.mlp_in, c.d_mlp, D, "mlp_in");
    shape(l.mlp_out, D, c.d_mlp, "mlp_out");
    if (l.mlp_bias.size() != c.d_mlp) throw DataError("model file: bad mlp bias");
  }
  shape(m.embed, c.vocab_size, D, "embed");
  shape(m.unembed, c.vocab_size, D, "unembed");
  shape(m.pos, c.max_seq_len, D, "pos");
  shape(m.audio_enc, D, p.d_audio, "audio_enc");
  shape(m.video_enc, D, p.d_video, "video_enc");
  return m;
}

void save_model_file(const Model& m, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open for writing: " + path);
  save_model(m, f);
}

Model load_model_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open model file: " + path);
  return load_model(f);
}

namespace {

nlohmann::ordered_json frames_json(const Mat& m) {
  auto a = nlohmann::ordered_json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    auto row = nlohmann::ordered_json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    a.push_back(std::move(row));
  }
  return a;
}

Mat frames_from_json(const nlohmann::json& j, const std::string& what) {
  if (!j.is_array() || j.empty()) throw DataError(what + ": expected a non-empty array of frames");
  const size_t cols = j[0].size();
  Mat m(static_cast<Eigen::Index>(j.size()), static_cast<Eigen::Index>(cols));
  for (size_t r = 0; r < j.size(); ++r) {
    if (!j[r].is_array() || j[r].size() != cols) throw DataError(what + ": ragged frame array");
    for (size_t c = 0; c < cols; ++c) {
      if (!j[r][c].is_number()) throw DataError(what + ": non-numeric feature");
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = j[r][c].get<double>();
    }
  }
  return m;
}

Modality parse_modality(const std::string& s) {
  if (s == "audio") return Modality::Audio;
  if (s == "video") return Modality::Video;
  throw DataError("unknown modality: " + s);
}

}  // namespace

void write_sample_jsonl(std::ostream& out, const Sample& s) {
  nlohmann::ordered_json j;
  j["id"] = s.id;
  j["audio"] = frames_json(s.audio);
  j["video"] = frames_json(s.video);
  j["label"] = s.label;
  j["options"] = s.options;
  auto spans = nlohmann::ordered_json::array();
  for (const auto& sp : s.object_spans) {
    nlohmann::ordered_json o;
    o["modality"] = modality_name(sp.modality);
    o["class"] = sp.cls;
    o["begin"] = sp.begin;
    o["end"] = sp.end;
    spans.push_back(std::move(o));
  }
  j["object_spans"] = std::move(spans);
  j["dominant_modality"] = s.dominant ? modality_name(*s.dominant) : "none";
  out << j.dump() << '\n';
}

std::vector<Sample> read_samples_jsonl(std::istream& in) {
  std::vector<Sample> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = "dataset line " + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(where + ": " + e.what());
    }
    if (j.contains("_meta")) continue;
    try {
      Sample s;
      s.id = j.at("id").get<std::string>();
      s.audio = frames_from_json(j.at("audio"), where);
      s.video = frames_from_json(j.at("video"), where);
      s.label = j.at("label").get<int>();
      s.options = j.at("options").get<std::vector<int>>();
      for (const auto& o : j.at("object_spans"))
        s.object_spans.push_back({parse_modality(o.at("modality").get<std::string>()), o.at("class").get<int>(),
                                  o.at("begin").get<int>(), o.at("end").get<int>()});
      const std::string dm = j.at("dominant_modality").get<std::string>();
      if (dm != "none") s.dominant = parse_modality(dm);
      s.validate();
      out.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(where + ": " + e.what());
    }
  }
  return out;
}

}  // namespace avsink
