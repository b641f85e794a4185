#pragma once
// Twelve captions scored by hand.
//
//  #  caption                          truth               mentioned              hallucinated
//  1  A dog runs on the grass.         dog grass           dog grass              -
//  2  A zebra stands near a tree.      zebra               zebra tree             tree
//  3  A puppy chases a kitten.         dog cat             dog cat                -
//  4  (empty)                          car                 -                      -
//  5  The fire truck passes a car.     car                 fire truck, car        fire truck
//  6  Birds fly.                       bird                - ("birds" != "bird")  -
//  7  A dog and a dog.                 cat                 dog                    dog
//  8  A CAT on GRASS                   cat grass tree      cat grass              -
//  9  A truck.                         car                 -                      -
// 10  zebra, dog, grass                zebra grass         zebra dog grass        dog
// 11  a bird in a tree near the car    bird tree car       bird tree car          -
// 12  the dogcat                       dog                 -                      -
//
// mentions 17, hallucinated 4, captions with a hallucination 4 of 12,
// matched 13, truth objects 19.
//   C_i = 4/17, C_s = 4/12, P = 13/17, R = 13/19, F1 = 26/36 = 13/18.
#include <set>
#include <string>
#include <vector>

#include "avsink/halleval.hpp"

namespace chair_corpus {

inline avsink::ObjectVocabulary vocabulary() {
  avsink::ObjectVocabulary v;
  v.objects = {"dog", "cat", "zebra", "grass", "tree", "car", "fire truck", "bird"};
  v.synonyms = {{"puppy", "dog"}, {"kitten", "cat"}};
  return v;
}

inline std::vector<std::string> captions() {
  return {"A dog runs on the grass.",     "A zebra stands near a tree.", "A puppy chases a kitten.",
          "",                             "The fire truck passes a car.", "Birds fly.",
          "A dog and a dog.",             "A CAT on GRASS",              "A truck.",
          "zebra, dog, grass",            "a bird in a tree near the car", "the dogcat"};
}

inline std::vector<std::set<std::string>> truths() {
  return {{"dog", "grass"}, {"zebra"},        {"dog", "cat"},          {"car"},
          {"car"},          {"bird"},         {"cat"},                 {"cat", "grass", "tree"},
          {"car"},          {"zebra", "grass"}, {"bird", "tree", "car"}, {"dog"}};
}

constexpr double kCi = 4.0 / 17.0;
constexpr double kCs = 4.0 / 12.0;
inline double f1() {
  const double p = 13.0 / 17.0, r = 13.0 / 19.0;
  return 2.0 * p * r / (p + r);
}

}  // namespace chair_corpus
