#pragma once

#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace circuitlab {

/// Word-level tokenizer over a closed vocabulary. Numbers are split into one
/// token per digit. Label synonyms share a token: "valid", "correct" and
/// "right" map to VALID; "invalid", "incorrect" and "wrong" to INVALID.
class Tokenizer {
 public:
  /// The vocabulary covering every built-in template and variable list.
  static const Tokenizer& standard();

  explicit Tokenizer(std::vector<std::string> words);

  std::size_t size() const { return words_.size(); }
  /// Throws std::out_of_range for a word outside the vocabulary.
  int id(std::string_view word) const;
  bool contains(std::string_view word) const;
  const std::string& word(int id) const;

  std::vector<int> encode(std::string_view text) const;
  std::string decode(std::span<const int> ids) const;

  int bos() const { return id("<bos>"); }
  int valid() const { return id("VALID"); }
  int invalid() const { return id("INVALID"); }
  int digit(int d) const;
  /// Digit value of a token, or -1 for non-digit tokens.
  int digit_value(int id) const;

 private:
  std::vector<std::string> words_;
  std::map<std::string, int, std::less<>> index_;
};

}  // namespace circuitlab
