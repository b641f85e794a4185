#include "avsink/halleval.hpp"

#include <algorithm>
#include <cctype>

#include "avsink/errors.hpp"
#include "json.hpp"

namespace avsink {

namespace {

std::vector<std::string> words(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char ch : s) {
    if (std::isalnum(ch)) {
      cur += static_cast<char>(std::tolower(ch));
    } else if (!cur.empty()) {
      out.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

std::string lower(const std::string& s) {
  std::string out;
  for (unsigned char ch : s) out += static_cast<char>(std::tolower(ch));
  return out;
}

bool contains_phrase(const std::vector<std::string>& text, const std::vector<std::string>& phrase) {
  if (phrase.empty() || phrase.size() > text.size()) return false;
  for (size_t i = 0; i + phrase.size() <= text.size(); ++i)
    if (std::equal(phrase.begin(), phrase.end(), text.begin() + static_cast<long>(i))) return true;
  return false;
}

void check_aligned(size_t a, size_t b) {
  if (a != b) throw DataError("captions and ground truths have different lengths");
}

}  // namespace

void ObjectVocabulary::validate() const {
  if (objects.empty()) throw ConfigError("object vocabulary is empty");
  std::set<std::string> canon(objects.begin(), objects.end());
  for (const auto& [surface, target] : synonyms)
    if (!canon.count(target)) throw ConfigError("synonym '" + surface + "' maps to unknown object '" + target + "'");
}

ObjectVocabulary ObjectVocabulary::from_json_text(const std::string& text) {
  ObjectVocabulary v;
  try {
    const auto j = nlohmann::json::parse(text);
    v.objects = j.at("objects").get<std::vector<std::string>>();
    if (j.contains("synonyms")) v.synonyms = j.at("synonyms").get<std::map<std::string, std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("vocabulary: ") + e.what());
  }
  v.validate();
  return v;
}

std::string ObjectVocabulary::to_json_text() const {
  nlohmann::ordered_json j;
  j["objects"] = objects;
  nlohmann::ordered_json syn = nlohmann::ordered_json::object();
  for (const auto& [k, t] : synonyms) syn[k] = t;
  j["synonyms"] = syn;
  return j.dump(2) + "\n";
}

std::set<std::string> extract_objects(const std::string& caption, const ObjectVocabulary& vocab) {
  if (vocab.objects.empty()) throw ConfigError("object vocabulary is empty");
  const auto text = words(caption);
  std::set<std::string> out;
  for (const auto& o : vocab.objects)
    if (contains_phrase(text, words(o))) out.insert(o);
  for (const auto& [surface, target] : vocab.synonyms)
    if (contains_phrase(text, words(surface))) out.insert(target);
  return out;
}

EvalResult evaluate(const std::vector<std::string>& ids, const std::vector<std::string>& captions,
                    const std::vector<std::set<std::string>>& ground_truths, const ObjectVocabulary& vocab) {
  check_aligned(captions.size(), ground_truths.size());
  check_aligned(captions.size(), ids.size());
  EvalResult r;
  r.n_captions = static_cast<int>(captions.size());
  long matched = 0, gt_total = 0;
  int with_hall = 0;
  for (size_t i = 0; i < captions.size(); ++i) {
    CaptionEval ce;
    ce.id = ids[i];
    ce.mentioned = extract_objects(captions[i], vocab);
    for (const auto& o : ce.mentioned) {
      if (ground_truths[i].count(o))
        ++matched;
      else
        ce.hallucinated.insert(o);
    }
    r.n_mentions += static_cast<int>(ce.mentioned.size());
    r.n_hallucinated += static_cast<int>(ce.hallucinated.size());
    gt_total += static_cast<long>(ground_truths[i].size());
    if (!ce.hallucinated.empty()) ++with_hall;
    r.per_caption.push_back(std::move(ce));
  }
  r.c_i = r.n_mentions ? double(r.n_hallucinated) / double(r.n_mentions) : 0.0;
  r.c_s = r.n_captions ? double(with_hall) / double(r.n_captions) : 0.0;
  const double p = r.n_mentions ? double(matched) / double(r.n_mentions) : 0.0;
  const double rc = gt_total ? double(matched) / double(gt_total) : 0.0;
  r.f1 = (p + rc) > 0 ? 2.0 * p * rc / (p + rc) : 0.0;
  return r;
}

ChairScore chair(const std::vector<std::string>& captions, const std::vector<std::set<std::string>>& ground_truths,
                 const ObjectVocabulary& vocab) {
  const EvalResult r = evaluate(std::vector<std::string>(captions.size()), captions, ground_truths, vocab);
  return {r.c_s, r.c_i};
}

double f1(const std::vector<std::string>& captions, const std::vector<std::set<std::string>>& ground_truths,
          const ObjectVocabulary& vocab) {
  return evaluate(std::vector<std::string>(captions.size()), captions, ground_truths, vocab).f1;
}

DetectorFile read_detector_jsonl(const std::string& text) {
  DetectorFile d;
  size_t start = 0;
  int lineno = 0;
  while (start <= text.size()) {
    size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    const std::string line = text.substr(start, end - start);
    ++lineno;
    start = end + 1;
    if (line.find_first_not_of(" \t\r") == std::string::npos) {
      if (end == text.size()) break;
      continue;
    }
    try {
      const auto j = nlohmann::json::parse(line);
      auto& dst = d.detections[j.at("id").get<std::string>()];
      for (const auto& o : j.at("objects")) dst.push_back(o.get<std::string>());
    } catch (const nlohmann::json::exception& e) {
      throw DataError("detector file line " + std::to_string(lineno) + ": " + e.what());
    }
    if (end == text.size()) break;
  }
  return d;
}

GroundTruth build_ground_truth(const std::set<std::string>& label_objects, const std::vector<std::string>* detected,
                               const ObjectVocabulary& vocab) {
  GroundTruth g;
  g.objects = label_objects;
  if (!detected) return g;
  std::set<std::string> canon(vocab.objects.begin(), vocab.objects.end());
  for (const auto& raw : *detected) {
    const std::string name = lower(raw);
    if (canon.count(name)) {
      g.objects.insert(name);
    } else if (auto it = vocab.synonyms.find(name); it != vocab.synonyms.end()) {
      g.objects.insert(it->second);
    } else {
      ++g.dropped;
    }
  }
  return g;
}

AttentionMassReport attention_mass_report(const std::vector<std::vector<StepMasses>>& traces,
                                          const std::vector<ObjectEvent>& events) {
  if (events.empty()) throw DataError("attention_mass_report: no object events");
  AttentionMassReport r;
  size_t L = 0;
  for (const auto& e : events) {
    if (e.trace >= traces.size() || e.step >= traces[e.trace].size())
      throw DataError("attention_mass_report: event refers to a missing step");
    L = std::max(L, traces[e.trace][e.step].uni.size());
  }
  r.genuine_uni.assign(L, 0.0);
  r.genuine_cross.assign(L, 0.0);
  r.hallucinated_uni.assign(L, 0.0);
  r.hallucinated_cross.assign(L, 0.0);
  for (const auto& e : events) {
    const StepMasses& m = traces[e.trace][e.step];
    if (m.uni.size() != L || m.cross.size() != L) throw DataError("attention_mass_report: ragged layer masses");
    const bool g = e.kind == ObjectKind::Genuine;
    auto& u = g ? r.genuine_uni : r.hallucinated_uni;
    auto& c = g ? r.genuine_cross : r.hallucinated_cross;
    for (size_t l = 0; l < L; ++l) {
      u[l] += m.uni[l];
      c[l] += m.cross[l];
    }
    (g ? r.n_genuine : r.n_hallucinated) += 1;
  }
  for (size_t l = 0; l < L; ++l) {
    if (r.n_genuine) {
      r.genuine_uni[l] /= r.n_genuine;
      r.genuine_cross[l] /= r.n_genuine;
    }
    if (r.n_hallucinated) {
      r.hallucinated_uni[l] /= r.n_hallucinated;
      r.hallucinated_cross[l] /= r.n_hallucinated;
    }
  }
  return r;
}

}  // namespace avsink
