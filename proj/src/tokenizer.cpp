#include "circuitlab/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>
#include <stdexcept>

namespace circuitlab {

std::vector<std::string> vocabulary_words();  // dataset.cpp

namespace {

std::string_view canonical(std::string_view word) {
  if (word == "valid" || word == "correct" || word == "right") return "VALID";
  if (word == "invalid" || word == "incorrect" || word == "wrong") return "INVALID";
  return word;
}

}  // namespace

const Tokenizer& Tokenizer::standard() {
  static const Tokenizer tok(vocabulary_words());
  return tok;
}

Tokenizer::Tokenizer(std::vector<std::string> words) : words_(std::move(words)) {
  for (std::size_t i = 0; i < words_.size(); ++i) {
    if (!index_.emplace(words_[i], static_cast<int>(i)).second) {
      throw std::invalid_argument("duplicate vocabulary word '" + words_[i] + "'");
    }
  }
}

int Tokenizer::id(std::string_view word) const {
  auto it = index_.find(canonical(word));
  if (it == index_.end()) throw std::out_of_range("word '" + std::string(word) + "' is not in the vocabulary");
  return it->second;
}

bool Tokenizer::contains(std::string_view word) const { return index_.find(canonical(word)) != index_.end(); }

const std::string& Tokenizer::word(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) throw std::out_of_range("token id out of range");
  return words_[static_cast<std::size_t>(id)];
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
  std::vector<int> out;
  std::istringstream in{std::string(text)};
  std::string piece;
  while (in >> piece) {
    const bool numeric = std::all_of(piece.begin(), piece.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); });
    if (numeric) {
      for (char c : piece) out.push_back(digit(c - '0'));
    } else {
      out.push_back(id(piece));
    }
  }
  return out;
}

std::string Tokenizer::decode(std::span<const int> ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += word(ids[i]);
  }
  return out;
}

int Tokenizer::digit(int d) const {
  if (d < 0 || d > 9) throw std::out_of_range("digit out of range");
  return id(std::string(1, static_cast<char>('0' + d)));
}

int Tokenizer::digit_value(int token) const {
  const std::string& w = word(token);
  if (w.size() == 1 && w[0] >= '0' && w[0] <= '9') return w[0] - '0';
  return -1;
}

}  // namespace circuitlab
