#pragma once

// Template grammar behind the synthetic instruction videos, and the toy
// knowledge base / scripted completer that go with it.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vidcap/text.hpp"

namespace vidcap {

struct ParsedInstruction {
  std::size_t action = 0;
  std::size_t object = 0;
};

struct Grammar {
  // Verb phrases, in the order used for one-hot features and labels.
  std::vector<std::string> actions;
  std::vector<std::string> objects;
  std::vector<std::string> pseudo_classes;
  // pseudo class of every object
  std::vector<std::size_t> object_pseudo;
  // canonical successor action for the scripted completer
  std::vector<std::size_t> canonical_next;
  // how many later actions a step may jump ahead to when sampling scripts
  std::size_t max_jump = 3;

  std::string instantiate(std::size_t action, std::size_t object) const {
    return actions.at(action) + " the " + objects.at(object);
  }

  /// Recognises "<verb phrase> the <object> ..." (case and trailing
  /// punctuation insensitive). The longest matching object name wins.
  std::optional<ParsedInstruction> parse(const std::string& sentence) const {
    const std::string norm = normalize_text(sentence);
    std::optional<ParsedInstruction> best;
    std::size_t best_len = 0;
    for (std::size_t a = 0; a < actions.size(); ++a) {
      const std::string prefix = normalize_text(actions[a]) + " the ";
      if (norm.rfind(prefix, 0) != 0) continue;
      const std::string rest = norm.substr(prefix.size());
      for (std::size_t o = 0; o < objects.size(); ++o) {
        const std::string obj = normalize_text(objects[o]);
        if (rest.rfind(obj, 0) == 0 && (rest.size() == obj.size() || rest[obj.size()] == ' ') &&
            obj.size() > best_len) {
          best = ParsedInstruction{a, o};
          best_len = obj.size();
        }
      }
    }
    return best;
  }

  /// Every sentence the grammar can produce.
  std::vector<std::string> all_sentences() const {
    std::vector<std::string> out;
    for (std::size_t a = 0; a < actions.size(); ++a)
      for (std::size_t o = 0; o < objects.size(); ++o) out.push_back(instantiate(a, o));
    return out;
  }

  std::size_t terminal_count() const {
    std::map<std::string, int> seen;
    for (const auto& s : all_sentences())
      for (const auto& w : split_words(s)) seen[w] = 1;
    return seen.size();
  }
};

inline Grammar default_grammar() {
  Grammar g;
  g.actions = {"walk to", "open", "pick up", "slice", "wash", "put down"};
  g.objects = {"mug", "apple", "bowl", "rag", "knife", "tomato", "coffee maker", "sponge"};
  g.pseudo_classes = {"container", "food", "tool", "appliance"};
  g.object_pseudo = {0, 1, 0, 2, 2, 1, 3, 2};
  // walk to -> pick up, open -> pick up, pick up -> wash, slice -> put down,
  // wash -> put down, put down -> walk to
  g.canonical_next = {2, 2, 4, 5, 5, 0};
  return g;
}

/// Relation texts for the toy knowledge base. "{obj}" in a verb entry is
/// replaced by the object name; object entries override verb entries.
struct ToyKnowledgeBase {
  std::map<std::string, std::map<std::string, std::string>> by_verb;
  std::map<std::string, std::map<std::string, std::string>> by_object;
};

inline ToyKnowledgeBase default_toy_kb() {
  ToyKnowledgeBase kb;
  kb.by_verb["walk to"] = {{"xIntent", "to reach the {obj}"},     {"xNeed", "to stand up"},
                           {"xEffect", "arrives at the {obj}"},   {"xWant", "to use the {obj}"},
                           {"isAfter", "stand up"},               {"isBefore", "pick something up"},
                           {"HasSubEvent", "take steps"},         {"Causes", "movement"}};
  kb.by_verb["open"] = {{"xIntent", "to look inside"},       {"xNeed", "to reach the handle"},
                        {"xEffect", "sees inside the {obj}"}, {"xWant", "to take something out"},
                        {"isAfter", "walk to the {obj}"},     {"isBefore", "close the {obj}"},
                        {"HasSubEvent", "pull the door"},     {"Causes", "access"}};
  kb.by_verb["pick up"] = {{"xIntent", "to hold the {obj}"},   {"xNeed", "to reach the {obj}"},
                           {"xEffect", "holds the {obj}"},     {"xWant", "to clean the {obj}"},
                           {"isAfter", "walk to the {obj}"},   {"isBefore", "put down the {obj}"},
                           {"HasSubEvent", "grab"},            {"Causes", "lifting"}};
  kb.by_verb["slice"] = {{"xIntent", "to prepare food"},     {"xNeed", "a knife"},
                         {"xEffect", "has sliced {obj}"},    {"xWant", "to eat"},
                         {"isAfter", "pick up the knife"},   {"isBefore", "put down the {obj}"},
                         {"HasSubEvent", "cut"},             {"Causes", "pieces"}};
  kb.by_verb["wash"] = {{"xIntent", "to clean the {obj}"},   {"xNeed", "water"},
                        {"xEffect", "the {obj} is clean"},    {"xWant", "to dry the {obj}"},
                        {"isAfter", "pick up the {obj}"},     {"isBefore", "put down the {obj}"},
                        {"HasSubEvent", "rinse"},             {"Causes", "cleanliness"}};
  kb.by_verb["put down"] = {{"xIntent", "to free hands"},        {"xNeed", "to hold the {obj}"},
                            {"xEffect", "the {obj} rests"},      {"xWant", "to move on"},
                            {"isAfter", "pick up the {obj}"},    {"isBefore", "walk away"},
                            {"HasSubEvent", "release"},          {"Causes", "rest"}};
  kb.by_object["mug"] = {{"AtLocation", "cabinet"}, {"ObjectUse", "drink coffee"}};
  kb.by_object["apple"] = {{"AtLocation", "fridge"}, {"ObjectUse", "eat"}};
  kb.by_object["bowl"] = {{"AtLocation", "cupboard"}, {"ObjectUse", "hold soup"}};
  kb.by_object["rag"] = {{"AtLocation", "bathroom"}, {"ObjectUse", "wipe"}};
  kb.by_object["knife"] = {{"AtLocation", "drawer"}, {"ObjectUse", "cut"}};
  kb.by_object["tomato"] = {{"AtLocation", "counter"}, {"ObjectUse", "make salad"}};
  kb.by_object["coffee maker"] = {{"AtLocation", "kitchen"}, {"ObjectUse", "brew coffee"},
                                  {"xEffect", "gets coffee"}};
  kb.by_object["sponge"] = {{"AtLocation", "sink"}, {"ObjectUse", "scrub"}};
  return kb;
}

}  // namespace vidcap
