#pragma once

#include <cctype>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmkn/common.hpp"

namespace mmkn {

// Closed word-level vocabulary. Captions are whitespace-tokenized and
// case-folded; anything outside the list maps to <unk>.
inline const std::vector<std::string>& default_word_list() {
  static const std::vector<std::string> words = {
      "<unk>", "<eos>",
      // articles, connectives
      "the", "a", "an", "and", "with", "on", "in", "of", "to", "is", "are", "there", "this",
      "that", "it", "its", "at", "by", "near", "next",
      // spatial terms
      "left", "right", "above", "below", "beside", "behind", "front", "top", "bottom", "middle",
      "side", "corner",
      // scene nouns
      "image", "picture", "photo", "scene", "background", "foreground", "canvas", "view", "room",
      "field", "sky", "water", "grass", "wall", "floor", "window", "table", "road", "tree",
      "house",
      // verbs
      "shows", "stands", "sits", "lies", "rests", "appears", "floats", "moves", "looks", "seems",
      // adjectives
      "small", "large", "big", "little", "bright", "dark", "light", "plain", "empty", "full",
      "round", "flat", "tall", "short", "wide", "narrow",
      // colors
      "red", "green", "blue", "yellow", "purple", "orange", "white", "black", "gray",
      // shape nouns
      "ball", "box", "star", "circle", "square", "triangle",
      // object catalog
      "bear", "horse", "dog", "bus", "car", "train", "banana", "pizza", "cake",
      // numerals
      "one", "two", "three", "four", "five",
      // misc
      "object", "objects", "shape", "shapes", "thing", "things", "group", "pair", "row", "line",
      "spot"};
  return words;
}

inline std::string fold_token(const std::string& tok) {
  std::string out;
  out.reserve(tok.size());
  for (char c : tok) out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  return out;
}

// Equality up to case folding and a trailing plural 's'.
inline bool tokens_match(const std::string& a, const std::string& b) {
  std::string fa = fold_token(a), fb = fold_token(b);
  if (fa == fb) return true;
  if (fa.size() == fb.size() + 1 && fa.back() == 's' && fa.compare(0, fb.size(), fb) == 0)
    return true;
  if (fb.size() == fa.size() + 1 && fb.back() == 's' && fb.compare(0, fa.size(), fa) == 0)
    return true;
  return false;
}

class Vocabulary {
 public:
  explicit Vocabulary(std::vector<std::string> words = default_word_list()) : words_(std::move(words)) {
    require(!words_.empty(), "empty vocabulary");
    for (std::size_t i = 0; i < words_.size(); ++i) ids_[words_[i]] = static_cast<int>(i);
    require(ids_.count("<unk>") && ids_.count("<eos>"), "vocabulary missing specials");
    unk_ = ids_.at("<unk>");
    eos_ = ids_.at("<eos>");
  }

  int size() const { return static_cast<int>(words_.size()); }
  int unk_id() const { return unk_; }
  int eos_id() const { return eos_; }

  int id_of(const std::string& word) const {
    auto it = ids_.find(fold_token(word));
    return it == ids_.end() ? unk_ : it->second;
  }

  bool contains(const std::string& word) const { return ids_.count(fold_token(word)) > 0; }

  const std::string& word(int id) const {
    require(id >= 0 && id < size(), "token id out of range");
    return words_[static_cast<std::size_t>(id)];
  }

  std::vector<int> tokenize(const std::string& text) const {
    std::vector<int> out;
    std::istringstream ss(text);
    std::string tok;
    while (ss >> tok) out.push_back(id_of(tok));
    return out;
  }

  // Specials are dropped when rendering back to text.
  std::string detokenize(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
      if (id == eos_ || id == unk_) continue;
      if (!out.empty()) out.push_back(' ');
      out += word(id);
    }
    return out;
  }

  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> ids_;
  int unk_ = 0;
  int eos_ = 0;
};

}  // namespace mmkn
