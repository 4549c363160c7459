#include "flowact/vocab.hpp"

#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace flowact {
namespace vocab {

namespace {

const std::vector<std::string>& words() {
  static const std::vector<std::string> list = {
      "done",  "pick",  "place",  "reach", "stack",  "sort", "fold",   "go",
      "red",   "blue",  "green",  "yellow", "left",  "right", "bin",   "target",
      "towel", "first", "second", "object", "base",  "arm",   "hold",  "open",
  };
  return list;
}

const std::unordered_map<std::string, int>& index() {
  static const std::unordered_map<std::string, int> map = [] {
    std::unordered_map<std::string, int> m;
    for (size_t i = 0; i < words().size(); ++i) m[words()[i]] = static_cast<int>(i);
    return m;
  }();
  return map;
}

}  // namespace

int size() { return static_cast<int>(words().size()); }

int id(const std::string& word) {
  auto it = index().find(word);
  if (it == index().end()) throw std::invalid_argument("vocab: unknown word '" + word + "'");
  return it->second;
}

const std::string& word(int id) {
  if (id < 0 || id >= size()) throw std::invalid_argument("vocab: id out of range");
  return words()[id];
}

std::vector<int> tokenize(const std::string& sentence) {
  std::vector<int> out;
  std::istringstream is(sentence);
  std::string w;
  while (is >> w) out.push_back(id(w));
  return out;
}

std::string detokenize(const std::vector<int>& ids) {
  std::string out;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (i) out += " ";
    out += word(ids[i]);
  }
  return out;
}

}  // namespace vocab
}  // namespace flowact
