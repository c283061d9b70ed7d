#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace circuitlab {

enum class Operation { Add, Sub, Mul, Div };
enum class ErrorType { Result, Answer, Both, None };
enum class TaskKind { Validation, Computation };

std::string to_string(Operation op);
std::string to_string(ErrorType e);
Operation parse_operation(std::string_view s);
ErrorType parse_error_type(std::string_view s);

/// Abstract position labels shared across templates.
namespace labels {
inline constexpr const char* kBos = "bos";
inline constexpr const char* kOp1 = "op1";
inline constexpr const char* kOp2 = "op2";
inline constexpr const char* kOp1InEq = "op1-in-eq";
inline constexpr const char* kOperator = "operator";
inline constexpr const char* kOp2InEq = "op2-in-eq";
inline constexpr const char* kEquals = "equals";
inline constexpr const char* kResultFirst = "result-first";
inline constexpr const char* kResultSecond = "result-second";
inline constexpr const char* kAnswerFirst = "answer-first";
inline constexpr const char* kAnswerSecond = "answer-second";
inline constexpr const char* kFinal = "final";
}  // namespace labels

/// Abstract label -> token index for one template layout. Positions without
/// an abstract label are named "T<template>@<index>" and never match across
/// templates.
struct TokenLabelMap {
  std::map<std::string, std::size_t> positions;
  std::size_t seq_len = 0;
  int template_id = 0;

  /// Throws std::out_of_range for a label the map does not contain.
  std::size_t at(const std::string& label) const;
  std::optional<std::size_t> find(const std::string& label) const;
  /// Label of a position: its abstract label if any, else the template-local name.
  std::string label_of(std::size_t position) const;
  /// Inverse of label_of for this template; nullopt for foreign labels.
  std::optional<std::size_t> position_of(const std::string& label) const;
  friend bool operator==(const TokenLabelMap&, const TokenLabelMap&) = default;
};

struct Template {
  int id = 0;  // 1..8
  Operation operation = Operation::Add;
  std::string text;

  /// Token count of any filled instance (with the leading <bos>).
  std::size_t token_length() const;
};

/// The eight built-in templates for an operation.
const std::vector<Template>& templates(Operation op);
const Template& get_template(Operation op, int id);

struct VariableAssignment {
  std::string person, object, verb, pronoun, instruction;
  int num1 = 0;
  int num2 = 0;
  int result = 0;  // correct result of the equation
  int wrong = 0;   // error value used by the clean prompt (equals result for ErrorType::None)
  friend bool operator==(const VariableAssignment&, const VariableAssignment&) = default;
};

struct PromptPair {
  int template_id = 0;
  Operation operation = Operation::Add;
  ErrorType error_type = ErrorType::Result;
  TaskKind task = TaskKind::Validation;
  std::vector<int> clean_tokens;
  std::vector<int> corrupt_tokens;
  std::vector<int> clean_labels;    // token ids counted as correct for the clean prompt
  std::vector<int> corrupt_labels;  // token ids counted as correct for the corrupt prompt
  VariableAssignment assignment;
  std::optional<VariableAssignment> corrupt_assignment;  // computation pairs only
  TokenLabelMap position_labels;
  friend bool operator==(const PromptPair&, const PromptPair&) = default;
};

/// Legal operand pairs for an operation (two-digit results throughout).
std::vector<std::pair<int, int>> legal_operands(Operation op);
int apply(Operation op, int a, int b);
/// Two-digit wrong values for a result: same tens digit, different units digit.
std::vector<int> error_values(int result);

/// Fills a template. `shown_result` and `shown_answer` are the values printed
/// at the result and answer sites.
std::vector<int> render(const Template& t, const VariableAssignment& a, int shown_result, int shown_answer);

std::vector<PromptPair> generate_pairs(const Template& t, std::size_t n, ErrorType error_type, std::uint64_t seed);

TokenLabelMap label_positions(const Template& t);

/// Cuts each pair right after the equals sign and replaces the corrupt
/// operands so the correct result differs. When every legal result of the
/// operation shares a leading digit (addition: 10..18), that shared digit is
/// appended so the next-token labels are the first differing digits.
std::vector<PromptPair> make_computation_pairs(const std::vector<PromptPair>& pairs, std::uint64_t seed,
                                               std::size_t resample_budget = 200);

nlohmann::json to_json(const PromptPair& p);
PromptPair pair_from_json(const nlohmann::json& j);

void write_jsonl(const std::string& path, const std::vector<PromptPair>& pairs);
std::vector<PromptPair> read_jsonl(const std::string& path);

}  // namespace circuitlab
