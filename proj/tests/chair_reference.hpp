#pragma once
// Brute-force CHAIR / F1 used as a cross-check. Deliberately written without
// sharing code with the library: mentions are found by substring search in a
// space-padded, lower-cased copy of the caption.
#include <cctype>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace chair_ref {

struct Scores {
  double c_s = 0, c_i = 0, f1 = 0;
};

inline std::string padded(const std::string& s) {
  std::string out = " ";
  for (unsigned char c : s) out += std::isalnum(c) ? static_cast<char>(std::tolower(c)) : ' ';
  out += ' ';
  std::string squeezed;
  for (char c : out)
    if (!(c == ' ' && !squeezed.empty() && squeezed.back() == ' ')) squeezed += c;
  return squeezed;
}

inline std::set<std::string> mentions(const std::string& caption, const std::vector<std::string>& objects,
                                      const std::map<std::string, std::string>& synonyms) {
  const std::string text = padded(caption);
  std::set<std::string> out;
  for (const auto& o : objects)
    if (text.find(padded(o)) != std::string::npos) out.insert(o);
  for (const auto& [s, t] : synonyms)
    if (text.find(padded(s)) != std::string::npos) out.insert(t);
  return out;
}

inline Scores score(const std::vector<std::string>& captions, const std::vector<std::set<std::string>>& gts,
                    const std::vector<std::string>& objects, const std::map<std::string, std::string>& synonyms) {
  int mentioned = 0, hallucinated = 0, bad_captions = 0, matched = 0, gt_total = 0;
  for (size_t i = 0; i < captions.size(); ++i) {
    int h = 0;
    for (const auto& o : mentions(captions[i], objects, synonyms)) {
      ++mentioned;
      if (gts[i].count(o))
        ++matched;
      else
        ++h;
    }
    hallucinated += h;
    bad_captions += h > 0;
    gt_total += static_cast<int>(gts[i].size());
  }
  Scores s;
  s.c_i = mentioned ? double(hallucinated) / double(mentioned) : 0.0;
  s.c_s = captions.empty() ? 0.0 : double(bad_captions) / double(captions.size());
  const double p = mentioned ? double(matched) / double(mentioned) : 0.0;
  const double r = gt_total ? double(matched) / double(gt_total) : 0.0;
  s.f1 = p + r > 0 ? 2.0 * p * r / (p + r) : 0.0;
  return s;
}

}  // namespace chair_ref
