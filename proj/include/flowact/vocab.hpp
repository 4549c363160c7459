#pragma once

#include <string>
#include <vector>

namespace flowact {

// Fixed toy command vocabulary shared by the simulator, the data pipeline and
// the policy. Sentences are whitespace-separated words.
namespace vocab {

int size();
int id(const std::string& word);            // throws on unknown words
const std::string& word(int id);            // throws on out-of-range ids
std::vector<int> tokenize(const std::string& sentence);
std::string detokenize(const std::vector<int>& ids);

}  // namespace vocab

}  // namespace flowact
