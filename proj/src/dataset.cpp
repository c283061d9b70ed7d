#include "circuitlab/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "circuitlab/io.hpp"
#include "circuitlab/rng.hpp"
#include "circuitlab/tokenizer.hpp"

namespace circuitlab {

namespace {

struct Person {
  const char* name;
  const char* pronoun;
};

const Person kPersons[] = {{"jane", "she"}, {"mary", "she"}, {"anna", "she"}, {"lisa", "she"},
                           {"john", "he"},  {"tom", "he"},   {"paul", "he"},  {"mark", "he"}};
const char* const kObjects[] = {"apples", "pens", "books", "toys", "cards", "coins", "cups", "hats"};
const char* const kAddVerbs[] = {"buys", "gets", "finds", "collects"};
const char* const kSubVerbs[] = {"lost", "sold", "donated", "gave"};
const char* const kInstructions[] = {"check reasoning", "verify reasoning", "assess reasoning", "judge reasoning"};

const char* const kAddText[8] = {
    "[instruction] problem : [person] has [num1] [object] . [pronoun] [verb] [num2] more . how many does [pronoun] "
    "have now ? reasoning : [person] has [num1] + [num2] = [num3] [object] . so [pronoun] has [num3] [object] in "
    "total . answer : the above reasoning is",
    "[instruction] problem : [person] starts with [num1] [object] . after [pronoun] [verb] [num2] more , how many "
    "does [pronoun] have in total ? reasoning : we add [num1] and [num2] : [num1] + [num2] = [num3] . therefore "
    "[person] now has [num3] [object] . answer : the above reasoning is",
    "[instruction] problem : initially [person] possesses [num1] [object] . [pronoun] then [verb] [num2] additional "
    "[object] . what is the new total ? reasoning : we calculate : [num1] ( original ) + [num2] ( added ) = [num3] "
    "( total ) . so [person] now has [num3] [object] . answer : the above reasoning is",
    "[instruction] problem : [person] 's collection of [object] grows from [num1] after [pronoun] [verb] [num2] more "
    ". reasoning : to find the new total , we add : [num1] + [num2] = [num3] ( final amount ) . thus [person] ends "
    "up with [num3] [object] . answer : the above reasoning is",
    "[instruction] problem : [person] originally owns [num1] [object] . after [pronoun] [verb] [num2] additional "
    "[object] , how many does [pronoun] have altogether ? reasoning : a simple addition gives us [num1] + [num2] = "
    "[num3] . therefore [person] has [num3] [object] now . answer : the above reasoning is",
    "[instruction] problem : [person] possesses [num1] [object] at first . if [pronoun] [verb] [num2] more [object] "
    ", what is the total count ? reasoning : adding them gives : [num1] + [num2] = [num3] . consequently [person] has "
    "a total of [num3] [object] . answer : the above reasoning is",
    "[instruction] problem : [num1] [object] belong to [person] . [pronoun] [verb] [num2] additional ones . what is "
    "the total ? reasoning : by addition , we get [num1] + [num2] = [num3] . thus [person] has [num3] [object] in "
    "total . answer : the above reasoning is",
    "[instruction] problem : [person] begins with [num1] [object] and then [verb] [num2] more . how many [object] "
    "does [pronoun] have now ? reasoning : let 's add them up : [num1] + [num2] = [num3] . therefore [person] has a "
    "total of [num3] [object] . answer : the above reasoning is",
};

const char* const kSubText[8] = {
    "[instruction] problem : [person] has [num1] [object] . [pronoun] [verb] [num2] [object] . how many does "
    "[pronoun] have now ? reasoning : [person] has [num1] - [num2] = [num3] [object] . so [pronoun] has [num3] "
    "[object] remaining . answer : the above reasoning is",
    "[instruction] problem : [person] starts with [num1] [object] . after [pronoun] [verb] [num2] , how many does "
    "[pronoun] have left ? reasoning : we subtract [num2] from [num1] : [num1] - [num2] = [num3] . therefore "
    "[person] now has [num3] [object] . answer : the above reasoning is",
    "[instruction] problem : initially [person] possesses [num1] [object] . [pronoun] then [verb] [num2] [object] . "
    "what is the remaining amount ? reasoning : we calculate : [num1] ( original ) - [num2] ( removed ) = [num3] ( "
    "remaining ) . so [person] now has [num3] [object] . answer : the above reasoning is",
    "[instruction] problem : [person] 's collection of [object] decreases from [num1] after [pronoun] [verb] [num2] "
    "[object] . reasoning : to find the remaining total , we subtract : [num1] - [num2] = [num3] ( final amount ) . "
    "thus [person] ends up with [num3] [object] . answer : the above reasoning is",
    "[instruction] problem : [person] originally owns [num1] [object] . after [pronoun] [verb] [num2] [object] , how "
    "many does [pronoun] have left ? reasoning : a simple subtraction gives us [num1] - [num2] = [num3] . therefore "
    "[person] has [num3] [object] remaining . answer : the above reasoning is",
    "[instruction] problem : [person] possesses [num1] [object] at first . if [pronoun] [verb] [num2] [object] , what "
    "is the remaining count ? reasoning : subtracting them gives : [num1] - [num2] = [num3] . consequently [person] "
    "has [num3] [object] left . answer : the above reasoning is",
    "[instruction] problem : [num1] [object] belong to [person] . [pronoun] [verb] [num2] of them . what is the "
    "remainder ? reasoning : by subtraction , we get [num1] - [num2] = [num3] . thus [person] has [num3] [object] "
    "remaining . answer : the above reasoning is",
    "[instruction] problem : [person] begins with [num1] [object] and then [verb] [num2] of them . how many [object] "
    "does [pronoun] have left ? reasoning : let 's subtract them : [num1] - [num2] = [num3] . therefore [person] has "
    "[num3] [object] remaining . answer : the above reasoning is",
};

const char* const kMulText[8] = {
    "[instruction] problem : [person] has [num1] [object] per day . after [num2] days , how many [object] does "
    "[pronoun] have in total ? reasoning : [person] has [num1] * [num2] = [num3] [object] . so [pronoun] has [num3] "
    "[object] in total . answer : the above reasoning is",
    "[instruction] problem : [person] buys [num1] [object] each time [pronoun] goes shopping . if [pronoun] goes "
    "shopping [num2] times , how many does [pronoun] buy ? reasoning : we multiply [num1] and [num2] : [num1] * "
    "[num2] = [num3] . therefore [person] buys [num3] [object] in total . answer : the above reasoning is",
    "[instruction] problem : [person] collects [num1] [object] each week . after [num2] weeks , how many has "
    "[pronoun] collected ? reasoning : we calculate : [num1] ( per week ) * [num2] ( weeks ) = [num3] ( total ) . so "
    "[pronoun] has collected [num3] [object] . answer : the above reasoning is",
    "[instruction] problem : initially [person] receives [num1] [object] each month . after [num2] months , what is "
    "the total ? reasoning : we calculate : [num1] ( per month ) * [num2] ( months ) = [num3] ( total ) . so "
    "[person] has received [num3] [object] . answer : the above reasoning is",
    "[instruction] problem : [person] originally gets [num1] [object] per visit . after [num2] visits , how many has "
    "[pronoun] gotten altogether ? reasoning : a simple multiplication gives us [num1] * [num2] = [num3] . therefore "
    "[person] has gotten [num3] [object] in total . answer : the above reasoning is",
    "[instruction] problem : [person] earns [num1] [object] per task at first . if [pronoun] completes [num2] tasks , "
    "what is the total count ? reasoning : multiplying them gives : [num1] * [num2] = [num3] . consequently "
    "[pronoun] earns [num3] [object] in total . answer : the above reasoning is",
    "[instruction] problem : [person] finds [num1] [object] each time [pronoun] searches . after [num2] searches , "
    "what is the total ? reasoning : by multiplication , we get [num1] * [num2] = [num3] . thus [person] finds "
    "[num3] [object] in total . answer : the above reasoning is",
    "[instruction] problem : [person] produces [num1] [object] per session and then has [num2] sessions . how many "
    "[object] are there in total ? reasoning : let 's multiply them : [num1] * [num2] = [num3] . therefore there are "
    "[num3] [object] altogether . answer : the above reasoning is",
};

const char* const kDivText[8] = {
    "[instruction] problem : [person] has [num1] [object] . [pronoun] wants equal groups of [num2] [object] each . "
    "how many groups can [pronoun] make ? reasoning : [person] can make [num1] / [num2] = [num3] groups . so "
    "[pronoun] can make [num3] groups . answer : the above reasoning is",
    "[instruction] problem : [person] starts with [num1] [object] . if [pronoun] puts [num2] [object] in each "
    "container , how many containers can [pronoun] fill ? reasoning : we divide [num1] by [num2] : [num1] / [num2] "
    "= [num3] . therefore [person] can fill [num3] containers . answer : the above reasoning is",
    "[instruction] problem : [person] has [num1] [object] to share equally . if each person gets [num2] [object] , "
    "how many people can receive [object] ? reasoning : we calculate : [num1] ( total ) / [num2] ( per person ) = "
    "[num3] ( people ) . so [num3] people can receive [object] . answer : the above reasoning is",
    "[instruction] problem : initially [person] possesses [num1] [object] . [pronoun] arranges them in rows with "
    "[num2] [object] per row . how many rows can be formed ? reasoning : we calculate : [num1] ( total ) / [num2] ( "
    "per row ) = [num3] ( rows ) . so [person] can form [num3] rows . answer : the above reasoning is",
    "[instruction] problem : [person] originally owns [num1] [object] . if [pronoun] distributes [num2] [object] to "
    "each recipient , how many recipients can get [object] ? reasoning : a simple division gives us [num1] / [num2] "
    "= [num3] . therefore [num3] recipients can get [object] . answer : the above reasoning is",
    "[instruction] problem : [person] possesses [num1] [object] at first . if [pronoun] arranges [num2] [object] in "
    "each pile , what is the total number of piles ? reasoning : dividing them gives : [num1] / [num2] = [num3] . "
    "consequently [person] can make [num3] piles . answer : the above reasoning is",
    "[instruction] problem : [num1] [object] belong to [person] . [pronoun] places [num2] [object] in each box . what "
    "is the total number of boxes ? reasoning : by division , we get [num1] / [num2] = [num3] . thus [person] needs "
    "[num3] boxes . answer : the above reasoning is",
    "[instruction] problem : [person] begins with [num1] [object] and then organizes [num2] [object] per shelf . how "
    "many shelves does [pronoun] need ? reasoning : let 's divide them : [num1] / [num2] = [num3] . therefore "
    "[person] needs [num3] shelves . answer : the above reasoning is",
};

const char* const* texts_for(Operation op) {
  switch (op) {
    case Operation::Add: return kAddText;
    case Operation::Sub: return kSubText;
    case Operation::Mul: return kMulText;
    case Operation::Div: return kDivText;
  }
  throw std::invalid_argument("unknown operation");
}

const char* operator_symbol(Operation op) {
  switch (op) {
    case Operation::Add: return "+";
    case Operation::Sub: return "-";
    case Operation::Mul: return "*";
    case Operation::Div: return "/";
  }
  return "?";
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

bool is_placeholder(const std::string& w) { return w.size() > 2 && w.front() == '[' && w.back() == ']'; }

int num1_digits(Operation op) { return op == Operation::Add ? 1 : 2; }

// Token width of one template piece.
std::size_t piece_width(const std::string& piece, Operation op) {
  if (piece == "[instruction]") return 2;
  if (piece == "[num1]") return static_cast<std::size_t>(num1_digits(op));
  if (piece == "[num2]") return 1;
  if (piece == "[num3]") return 2;
  return 1;
}

void append_number(std::vector<int>& out, const Tokenizer& tok, int value, int width) {
  std::string s = std::to_string(value);
  if (static_cast<int>(s.size()) != width) {
    throw std::invalid_argument("number " + s + " does not fit a " + std::to_string(width) + "-digit slot");
  }
  for (char c : s) out.push_back(tok.digit(c - '0'));
}

}  // namespace

std::vector<std::string> vocabulary_words() {
  std::vector<std::string> words = {"<bos>"};
  for (int d = 0; d <= 9; ++d) words.emplace_back(1, static_cast<char>('0' + d));
  words.emplace_back("VALID");
  words.emplace_back("INVALID");
  std::set<std::string> rest;
  for (Operation op : {Operation::Add, Operation::Sub, Operation::Mul, Operation::Div}) {
    const char* const* t = texts_for(op);
    for (int i = 0; i < 8; ++i)
      for (auto& w : split_words(t[i]))
        if (!is_placeholder(w)) rest.insert(w);
  }
  for (const auto& p : kPersons) {
    rest.insert(p.name);
    rest.insert(p.pronoun);
  }
  for (auto* w : kObjects) rest.insert(w);
  for (auto* w : kAddVerbs) rest.insert(w);
  for (auto* w : kSubVerbs) rest.insert(w);
  for (auto* ins : kInstructions)
    for (auto& w : split_words(ins)) rest.insert(w);
  words.insert(words.end(), rest.begin(), rest.end());
  return words;
}

std::string to_string(Operation op) {
  switch (op) {
    case Operation::Add: return "add";
    case Operation::Sub: return "sub";
    case Operation::Mul: return "mul";
    case Operation::Div: return "div";
  }
  return "?";
}

std::string to_string(ErrorType e) {
  switch (e) {
    case ErrorType::Result: return "result";
    case ErrorType::Answer: return "answer";
    case ErrorType::Both: return "both";
    case ErrorType::None: return "none";
  }
  return "?";
}

Operation parse_operation(std::string_view s) {
  if (s == "add") return Operation::Add;
  if (s == "sub") return Operation::Sub;
  if (s == "mul") return Operation::Mul;
  if (s == "div") return Operation::Div;
  throw std::invalid_argument("unknown operation '" + std::string(s) + "'");
}

ErrorType parse_error_type(std::string_view s) {
  if (s == "result") return ErrorType::Result;
  if (s == "answer") return ErrorType::Answer;
  if (s == "both") return ErrorType::Both;
  if (s == "none") return ErrorType::None;
  throw std::invalid_argument("unknown error type '" + std::string(s) + "'");
}

std::size_t TokenLabelMap::at(const std::string& label) const {
  auto it = positions.find(label);
  if (it == positions.end()) throw std::out_of_range("label '" + label + "' not in template " + std::to_string(template_id));
  return it->second;
}

std::optional<std::size_t> TokenLabelMap::find(const std::string& label) const {
  auto it = positions.find(label);
  if (it == positions.end()) return std::nullopt;
  return it->second;
}

std::string TokenLabelMap::label_of(std::size_t position) const {
  for (const auto& [label, pos] : positions)
    if (pos == position) return label;
  return "T" + std::to_string(template_id) + "@" + std::to_string(position);
}

std::optional<std::size_t> TokenLabelMap::position_of(const std::string& label) const {
  if (auto p = find(label)) return p;
  const std::string prefix = "T" + std::to_string(template_id) + "@";
  if (label.rfind(prefix, 0) != 0) return std::nullopt;
  const std::string rest = label.substr(prefix.size());
  if (rest.empty() || !std::all_of(rest.begin(), rest.end(), [](char c) { return c >= '0' && c <= '9'; }))
    return std::nullopt;
  const std::size_t pos = std::stoul(rest);
  if (pos >= seq_len) return std::nullopt;
  for (const auto& [l, p] : positions)
    if (p == pos) return std::nullopt;
  return pos;
}

std::size_t Template::token_length() const {
  std::size_t n = 1;
  for (const auto& w : split_words(text)) n += piece_width(w, operation);
  return n;
}

const std::vector<Template>& templates(Operation op) {
  static const auto all = [] {
    std::map<Operation, std::vector<Template>> m;
    for (Operation o : {Operation::Add, Operation::Sub, Operation::Mul, Operation::Div}) {
      const char* const* t = texts_for(o);
      for (int i = 0; i < 8; ++i) m[o].push_back(Template{i + 1, o, t[i]});
    }
    return m;
  }();
  return all.at(op);
}

const Template& get_template(Operation op, int id) {
  if (id < 1 || id > 8) throw std::out_of_range("template id must be 1..8, got " + std::to_string(id));
  return templates(op)[static_cast<std::size_t>(id - 1)];
}

int apply(Operation op, int a, int b) {
  switch (op) {
    case Operation::Add: return a + b;
    case Operation::Sub: return a - b;
    case Operation::Mul: return a * b;
    case Operation::Div:
      if (b == 0 || a % b != 0) throw std::invalid_argument("inexact division");
      return a / b;
  }
  throw std::invalid_argument("unknown operation");
}

std::vector<std::pair<int, int>> legal_operands(Operation op) {
  std::vector<std::pair<int, int>> out;
  switch (op) {
    case Operation::Add:
      for (int a = 1; a <= 9; ++a)
        for (int b = 1; b <= 9; ++b)
          if (a + b >= 10) out.emplace_back(a, b);
      break;
    case Operation::Sub:
      for (int a = 11; a <= 99; ++a)
        for (int b = 1; b <= 9; ++b)
          if (a - b >= 10) out.emplace_back(a, b);
      break;
    case Operation::Mul:
      for (int a = 10; a <= 49; ++a)
        for (int b = 2; b <= 9; ++b)
          if (a * b <= 99) out.emplace_back(a, b);
      break;
    case Operation::Div:
      for (int b = 2; b <= 9; ++b)
        for (int q = 10; q * b <= 99; ++q) out.emplace_back(q * b, b);
      std::sort(out.begin(), out.end());
      break;
  }
  return out;
}

std::vector<int> error_values(int result) {
  if (result < 10 || result > 99) throw std::invalid_argument("result must be two-digit, got " + std::to_string(result));
  std::vector<int> out;
  const int tens = result / 10 * 10;
  for (int u = 0; u <= 9; ++u)
    if (tens + u != result) out.push_back(tens + u);
  return out;
}

std::vector<int> render(const Template& t, const VariableAssignment& a, int shown_result, int shown_answer) {
  const Tokenizer& tok = Tokenizer::standard();
  std::vector<int> out{tok.bos()};
  int num3_seen = 0;
  for (const auto& w : split_words(t.text)) {
    if (w == "[instruction]") {
      for (auto& p : split_words(a.instruction)) out.push_back(tok.id(p));
    } else if (w == "[person]") {
      out.push_back(tok.id(a.person));
    } else if (w == "[pronoun]") {
      out.push_back(tok.id(a.pronoun));
    } else if (w == "[object]") {
      out.push_back(tok.id(a.object));
    } else if (w == "[verb]") {
      out.push_back(tok.id(a.verb));
    } else if (w == "[num1]") {
      append_number(out, tok, a.num1, num1_digits(t.operation));
    } else if (w == "[num2]") {
      append_number(out, tok, a.num2, 1);
    } else if (w == "[num3]") {
      append_number(out, tok, num3_seen++ == 0 ? shown_result : shown_answer, 2);
    } else {
      out.push_back(tok.id(w));
    }
  }
  if (out.size() != t.token_length()) throw std::logic_error("instruction does not have two tokens");
  return out;
}

std::vector<PromptPair> generate_pairs(const Template& t, std::size_t n, ErrorType error_type, std::uint64_t seed) {
  if (n == 0) throw std::invalid_argument("generate_pairs: n must be at least 1");
  if (t.text != get_template(t.operation, t.id).text) {
    throw std::invalid_argument("template " + std::to_string(t.id) + " does not belong to operation " +
                                to_string(t.operation));
  }
  const auto operands = legal_operands(t.operation);
  if (operands.empty()) throw std::invalid_argument("no legal operands");
  const Tokenizer& tok = Tokenizer::standard();
  auto rng = make_rng(seed, "pairs/" + to_string(t.operation) + "/" + std::to_string(t.id) + "/" + to_string(error_type));
  const TokenLabelMap map = label_positions(t);

  std::vector<PromptPair> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    VariableAssignment a;
    const auto& person = kPersons[uniform_int(rng, 0, 7)];
    a.person = person.name;
    a.pronoun = person.pronoun;
    a.object = kObjects[uniform_int(rng, 0, 7)];
    a.verb = t.operation == Operation::Sub ? kSubVerbs[uniform_int(rng, 0, 3)] : kAddVerbs[uniform_int(rng, 0, 3)];
    a.instruction = kInstructions[uniform_int(rng, 0, 3)];
    const auto [x, y] = operands[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(operands.size()) - 1))];
    a.num1 = x;
    a.num2 = y;
    a.result = apply(t.operation, x, y);
    const auto wrong = error_values(a.result);
    a.wrong = error_type == ErrorType::None ? a.result
                                            : wrong[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(wrong.size()) - 1))];

    PromptPair p;
    p.template_id = t.id;
    p.operation = t.operation;
    p.error_type = error_type;
    p.task = TaskKind::Validation;
    const bool bad_result = error_type == ErrorType::Result || error_type == ErrorType::Both;
    const bool bad_answer = error_type == ErrorType::Answer || error_type == ErrorType::Both;
    p.clean_tokens = render(t, a, bad_result ? a.wrong : a.result, bad_answer ? a.wrong : a.result);
    p.corrupt_tokens = render(t, a, a.result, a.result);
    p.clean_labels = {error_type == ErrorType::None ? tok.valid() : tok.invalid()};
    p.corrupt_labels = {tok.valid()};
    p.assignment = a;
    p.position_labels = map;
    out.push_back(std::move(p));
  }
  return out;
}

TokenLabelMap label_positions(const Template& t) {
  struct Span {
    std::string piece;
    std::size_t start, width;
  };
  std::vector<Span> spans;
  std::size_t pos = 1;
  for (const auto& w : split_words(t.text)) {
    const std::size_t width = piece_width(w, t.operation);
    spans.push_back({w, pos, width});
    pos += width;
  }
  TokenLabelMap m;
  m.seq_len = pos;
  m.template_id = t.id;
  auto fail = [&](const std::string& what) {
    return std::invalid_argument("template " + std::to_string(t.id) + " (" + to_string(t.operation) +
                                 "): cannot locate " + what);
  };

  std::size_t eq = spans.size();
  for (std::size_t i = 0; i < spans.size(); ++i) {
    if (spans[i].piece == "=") {
      if (eq != spans.size()) throw fail("a unique equals sign");
      eq = i;
    }
  }
  if (eq == spans.size()) throw fail("equals");
  auto last_before = [&](const std::string& piece) -> const Span& {
    for (std::size_t i = eq; i-- > 0;)
      if (spans[i].piece == piece) return spans[i];
    throw fail(piece + " in the equation");
  };
  auto first_of = [&](const std::string& piece) -> const Span& {
    for (const auto& s : spans)
      if (s.piece == piece) return s;
    throw fail(piece);
  };
  const Span& op1_eq = last_before("[num1]");
  const Span& op2_eq = last_before("[num2]");
  const Span& op = last_before(operator_symbol(t.operation));
  const Span& op1 = first_of("[num1]");
  const Span& op2 = first_of("[num2]");
  std::vector<const Span*> num3;
  for (std::size_t i = eq + 1; i < spans.size(); ++i)
    if (spans[i].piece == "[num3]") num3.push_back(&spans[i]);
  if (num3.size() != 2) throw fail("result and answer sites");
  if (&op1 == &op1_eq || &op2 == &op2_eq) throw fail("operands in the problem statement");

  m.positions[labels::kBos] = 0;
  m.positions[labels::kOp1] = op1.start + op1.width - 1;
  m.positions[labels::kOp2] = op2.start;
  m.positions[labels::kOp1InEq] = op1_eq.start + op1_eq.width - 1;
  m.positions[labels::kOperator] = op.start;
  m.positions[labels::kOp2InEq] = op2_eq.start;
  m.positions[labels::kEquals] = spans[eq].start;
  m.positions[labels::kResultFirst] = num3[0]->start;
  m.positions[labels::kResultSecond] = num3[0]->start + 1;
  m.positions[labels::kAnswerFirst] = num3[1]->start;
  m.positions[labels::kAnswerSecond] = num3[1]->start + 1;
  m.positions[labels::kFinal] = m.seq_len - 1;
  std::set<std::size_t> seen;
  for (const auto& [l, p] : m.positions)
    if (!seen.insert(p).second) throw fail("distinct positions for every label");
  return m;
}

std::vector<PromptPair> make_computation_pairs(const std::vector<PromptPair>& pairs, std::uint64_t seed,
                                               std::size_t resample_budget) {
  const Tokenizer& tok = Tokenizer::standard();
  std::vector<PromptPair> out;
  out.reserve(pairs.size());
  auto rng = make_rng(seed, "computation");
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const PromptPair& src = pairs[i];
    const Template& t = get_template(src.operation, src.template_id);
    const TokenLabelMap full = label_positions(t);
    const std::size_t cut = full.at(labels::kEquals) + 1;
    const auto operands = legal_operands(src.operation);
    // Addition results all start with 1; the shared digit is given and the units digit is predicted.
    const bool shared_lead = src.operation == Operation::Add;

    const VariableAssignment& a = src.assignment;
    VariableAssignment b = a;
    bool found = false;
    for (std::size_t attempt = 0; attempt < resample_budget && !found; ++attempt) {
      const auto [x, y] = operands[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(operands.size()) - 1))];
      if (x == a.num1 && y == a.num2) continue;
      const int r = apply(src.operation, x, y);
      const bool differs = shared_lead ? r % 10 != a.result % 10 : r / 10 != a.result / 10;
      if (!differs) continue;
      b.num1 = x;
      b.num2 = y;
      b.result = r;
      b.wrong = r;
      found = true;
    }
    if (!found) {
      throw std::runtime_error("make_computation_pairs: no differing result for pair " + std::to_string(i) + " within " +
                               std::to_string(resample_budget) + " resamples");
    }
    VariableAssignment ca = a;
    ca.wrong = ca.result;

    PromptPair p;
    p.template_id = src.template_id;
    p.operation = src.operation;
    p.error_type = ErrorType::None;
    p.task = TaskKind::Computation;
    p.clean_tokens = render(t, ca, ca.result, ca.result);
    p.corrupt_tokens = render(t, b, b.result, b.result);
    p.clean_tokens.resize(cut);
    p.corrupt_tokens.resize(cut);
    if (shared_lead) {
      p.clean_tokens.push_back(tok.digit(ca.result / 10));
      p.corrupt_tokens.push_back(tok.digit(b.result / 10));
      p.clean_labels = {tok.digit(ca.result % 10)};
      p.corrupt_labels = {tok.digit(b.result % 10)};
    } else {
      p.clean_labels = {tok.digit(ca.result / 10)};
      p.corrupt_labels = {tok.digit(b.result / 10)};
    }
    p.assignment = ca;
    p.corrupt_assignment = b;

    TokenLabelMap m;
    m.template_id = t.id;
    m.seq_len = p.clean_tokens.size();
    for (const auto& [label, pos] : full.positions)
      if (pos < m.seq_len - 1 || (pos == m.seq_len - 1 && label != labels::kResultFirst)) m.positions[label] = pos;
    m.positions[labels::kFinal] = m.seq_len - 1;
    p.position_labels = std::move(m);
    out.push_back(std::move(p));
  }
  return out;
}

namespace {

nlohmann::json assignment_json(const VariableAssignment& a) {
  return {{"person", a.person}, {"object", a.object}, {"verb", a.verb}, {"pronoun", a.pronoun},
          {"instruction", a.instruction}, {"num1", a.num1}, {"num2", a.num2}, {"result", a.result},
          {"wrong", a.wrong}};
}

VariableAssignment assignment_from(const nlohmann::json& j) {
  VariableAssignment a;
  a.person = j.at("person").get<std::string>();
  a.object = j.at("object").get<std::string>();
  a.verb = j.at("verb").get<std::string>();
  a.pronoun = j.at("pronoun").get<std::string>();
  a.instruction = j.at("instruction").get<std::string>();
  a.num1 = j.at("num1").get<int>();
  a.num2 = j.at("num2").get<int>();
  a.result = j.at("result").get<int>();
  a.wrong = j.at("wrong").get<int>();
  return a;
}

}  // namespace

nlohmann::json to_json(const PromptPair& p) {
  nlohmann::json j;
  j["template_id"] = p.template_id;
  j["operation"] = to_string(p.operation);
  j["error_type"] = to_string(p.error_type);
  j["task"] = p.task == TaskKind::Validation ? "validation" : "computation";
  j["clean_tokens"] = p.clean_tokens;
  j["corrupt_tokens"] = p.corrupt_tokens;
  j["labels"] = {{"clean", p.clean_labels}, {"corrupt", p.corrupt_labels}};
  j["assignment"] = assignment_json(p.assignment);
  if (p.corrupt_assignment) j["corrupt_assignment"] = assignment_json(*p.corrupt_assignment);
  j["position_labels"] = p.position_labels.positions;
  j["seq_len"] = p.position_labels.seq_len;
  return j;
}

PromptPair pair_from_json(const nlohmann::json& j) {
  PromptPair p;
  p.template_id = j.at("template_id").get<int>();
  p.operation = parse_operation(j.at("operation").get<std::string>());
  p.error_type = parse_error_type(j.at("error_type").get<std::string>());
  const auto task = j.at("task").get<std::string>();
  if (task == "validation") p.task = TaskKind::Validation;
  else if (task == "computation") p.task = TaskKind::Computation;
  else throw std::invalid_argument("unknown task '" + task + "'");
  p.clean_tokens = j.at("clean_tokens").get<std::vector<int>>();
  p.corrupt_tokens = j.at("corrupt_tokens").get<std::vector<int>>();
  p.clean_labels = j.at("labels").at("clean").get<std::vector<int>>();
  p.corrupt_labels = j.at("labels").at("corrupt").get<std::vector<int>>();
  p.assignment = assignment_from(j.at("assignment"));
  if (j.contains("corrupt_assignment")) p.corrupt_assignment = assignment_from(j.at("corrupt_assignment"));
  p.position_labels.positions = j.at("position_labels").get<std::map<std::string, std::size_t>>();
  p.position_labels.seq_len = j.at("seq_len").get<std::size_t>();
  p.position_labels.template_id = p.template_id;
  if (p.clean_tokens.size() != p.corrupt_tokens.size() || p.clean_tokens.size() != p.position_labels.seq_len) {
    throw std::invalid_argument("pair has inconsistent token lengths");
  }
  return p;
}

void write_jsonl(const std::string& path, const std::vector<PromptPair>& pairs) {
  std::string text;
  for (const auto& p : pairs) text += to_json(p).dump() + '\n';
  write_file_atomic(path, text);
}

std::vector<PromptPair> read_jsonl(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open '" + path + "'");
  std::vector<PromptPair> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(pair_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace circuitlab
