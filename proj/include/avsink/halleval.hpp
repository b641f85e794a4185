#pragma once
#include <map>
#include <set>
#include <string>
#include <vector>

namespace avsink {

struct ObjectVocabulary {
  std::vector<std::string> objects;
  std::map<std::string, std::string> synonyms;  // surface form -> canonical

  void validate() const;
  static ObjectVocabulary from_json_text(const std::string& text);
  std::string to_json_text() const;
};

// Canonical objects whose name or synonym occurs as a whole-word,
// case-insensitive match.
std::set<std::string> extract_objects(const std::string& caption, const ObjectVocabulary& vocab);

struct ChairScore {
  double c_s = 0, c_i = 0;
};

ChairScore chair(const std::vector<std::string>& captions, const std::vector<std::set<std::string>>& ground_truths,
                 const ObjectVocabulary& vocab);

double f1(const std::vector<std::string>& captions, const std::vector<std::set<std::string>>& ground_truths,
          const ObjectVocabulary& vocab);

struct CaptionEval {
  std::string id;
  std::set<std::string> mentioned, hallucinated;
};

struct EvalResult {
  double c_s = 0, c_i = 0, f1 = 0;
  int n_captions = 0, n_mentions = 0, n_hallucinated = 0;
  std::vector<CaptionEval> per_caption;
};

EvalResult evaluate(const std::vector<std::string>& ids, const std::vector<std::string>& captions,
                    const std::vector<std::set<std::string>>& ground_truths, const ObjectVocabulary& vocab);

struct DetectorFile {
  std::map<std::string, std::vector<std::string>> detections;  // sample id -> raw names
};
DetectorFile read_detector_jsonl(const std::string& text);

struct GroundTruth {
  std::set<std::string> objects;
  int dropped = 0;  // detected names not in the vocabulary
};
// Union of the label objects and the detected objects mapped through the vocabulary.
GroundTruth build_ground_truth(const std::set<std::string>& label_objects, const std::vector<std::string>* detected,
                               const ObjectVocabulary& vocab);

enum class ObjectKind { Genuine, Hallucinated };

struct ObjectEvent {
  size_t trace = 0;  // index into the trace list
  size_t step = 0;
  ObjectKind kind = ObjectKind::Genuine;
};

// Per-layer attention masses of one decode step toward uni and cross sinks.
struct StepMasses {
  std::vector<double> uni, cross;
};

struct AttentionMassReport {
  std::vector<double> genuine_uni, genuine_cross, hallucinated_uni, hallucinated_cross;
  int n_genuine = 0, n_hallucinated = 0;
};

AttentionMassReport attention_mass_report(const std::vector<std::vector<StepMasses>>& traces,
                                          const std::vector<ObjectEvent>& events);

}  // namespace avsink
