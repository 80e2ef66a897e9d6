#pragma once

#include <string>
#include <vector>

namespace jointlk {

// One multiple-choice question: tokens for the question and each choice, the
// grounded concept sets, and the gold answer index.
struct DatasetRecord {
  std::string id;
  std::vector<int> question_tokens;
  std::vector<std::vector<int>> choice_tokens;
  std::vector<std::string> vq;                // grounded question concepts
  std::vector<std::vector<std::string>> va;   // grounded concepts per choice
  std::size_t gold = 0;

  void validate() const;  // gold < #choices, vq nonempty, >= 2 choices
};

// JSON lines with a schema header line.
void save_dataset(const std::string& path, const std::vector<DatasetRecord>& records);
std::vector<DatasetRecord> load_dataset(const std::string& path);

}  // namespace jointlk
