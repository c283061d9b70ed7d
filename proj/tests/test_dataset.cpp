#include <doctest.h>

#include <filesystem>
#include <set>

#include "circuitlab/dataset.hpp"
#include "circuitlab/io.hpp"
#include "circuitlab/tokenizer.hpp"

using namespace circuitlab;

namespace {

const Tokenizer& tok() { return Tokenizer::standard(); }

int number_at(const std::vector<int>& toks, std::size_t first) {
  return 10 * tok().digit_value(toks[first]) + tok().digit_value(toks[first + 1]);
}

}  // namespace

TEST_CASE("tokenizer") {
  CHECK(tok().encode("jane has 13 apples") ==
        std::vector<int>{tok().id("jane"), tok().id("has"), tok().digit(1), tok().digit(3), tok().id("apples")});
  CHECK(tok().id("correct") == tok().valid());
  CHECK(tok().id("right") == tok().valid());
  CHECK(tok().id("wrong") == tok().invalid());
  CHECK(tok().id("incorrect") == tok().invalid());
  CHECK(tok().digit_value(tok().digit(7)) == 7);
  CHECK(tok().digit_value(tok().valid()) == -1);
  CHECK_THROWS_AS(tok().id("zebra"), std::out_of_range);
  for (auto op : {Operation::Add, Operation::Sub, Operation::Mul, Operation::Div})
    for (const auto& t : templates(op)) CHECK(tok().decode(generate_pairs(t, 1, ErrorType::None, 0)[0].clean_tokens).size() > 0);
}

TEST_CASE("the 5 + 8 example") {
  const Template& t = get_template(Operation::Add, 1);
  VariableAssignment a{"jane", "apples", "buys", "she", "check reasoning", 5, 8, 13, 16};
  auto clean = render(t, a, 16, 13);
  auto corrupt = render(t, a, 13, 13);
  const std::string text = tok().decode(clean);
  CHECK(text.find("5 + 8 = 1 6") != std::string::npos);
  CHECK(tok().decode(corrupt).find("5 + 8 = 1 3") != std::string::npos);
  auto m = label_positions(t);
  CHECK(number_at(clean, m.at(labels::kAnswerFirst)) == 13);
  CHECK(number_at(corrupt, m.at(labels::kResultFirst)) == 13);

  // consistent error: the wrong value at both sites
  auto both = render(t, a, 16, 16);
  CHECK(number_at(both, m.at(labels::kResultFirst)) == 16);
  CHECK(number_at(both, m.at(labels::kAnswerFirst)) == 16);
}

TEST_CASE("error sites of generated pairs") {
  for (auto e : {ErrorType::Result, ErrorType::Answer, ErrorType::Both, ErrorType::None}) {
    for (const auto& t : templates(Operation::Add)) {
      for (const auto& p : generate_pairs(t, 50, e, 3)) {
        const auto& m = p.position_labels;
        const std::size_t rf = m.at(labels::kResultFirst), af = m.at(labels::kAnswerFirst);
        const int r = p.assignment.result, w = p.assignment.wrong;
        CHECK(number_at(p.corrupt_tokens, rf) == r);
        CHECK(number_at(p.corrupt_tokens, af) == r);
        CHECK(number_at(p.clean_tokens, rf) == ((e == ErrorType::Result || e == ErrorType::Both) ? w : r));
        CHECK(number_at(p.clean_tokens, af) == ((e == ErrorType::Answer || e == ErrorType::Both) ? w : r));
        if (e == ErrorType::None) {
          CHECK(p.clean_tokens == p.corrupt_tokens);
          CHECK(p.clean_labels == std::vector<int>{tok().valid()});
        } else {
          CHECK(w != r);
          CHECK(w / 10 == r / 10);
          CHECK(p.clean_labels == std::vector<int>{tok().invalid()});
        }
        CHECK(p.corrupt_labels == std::vector<int>{tok().valid()});
        // alignment: only error-site digits differ
        std::set<std::size_t> sites{rf, rf + 1, af, af + 1};
        for (std::size_t i = 0; i < p.clean_tokens.size(); ++i)
          if (!sites.count(i)) CHECK(p.clean_tokens[i] == p.corrupt_tokens[i]);
      }
    }
  }
}

TEST_CASE("label positions") {
  for (auto op : {Operation::Add, Operation::Sub, Operation::Mul, Operation::Div}) {
    for (const auto& t : templates(op)) {
      auto m = label_positions(t);
      auto p = generate_pairs(t, 1, ErrorType::Result, 1)[0];
      CHECK(m.seq_len == p.clean_tokens.size());
      CHECK(m.seq_len == t.token_length());
      CHECK(m.at(labels::kResultSecond) == m.at(labels::kResultFirst) + 1);
      CHECK(m.at(labels::kFinal) == m.seq_len - 1);
      CHECK(tok().word(p.clean_tokens[m.at(labels::kFinal)]) == "is");
      CHECK(tok().word(p.clean_tokens[m.at(labels::kEquals)]) == "=");
      CHECK(p.clean_tokens[m.at(labels::kBos)] == tok().bos());
      CHECK(tok().digit_value(p.clean_tokens[m.at(labels::kOp1)]) == p.assignment.num1 % 10);
      CHECK(tok().digit_value(p.clean_tokens[m.at(labels::kOp2InEq)]) == p.assignment.num2);
      CHECK(m.label_of(m.at(labels::kOperator)) == labels::kOperator);
      CHECK(m.position_of(m.label_of(3)) == 3u);
      CHECK_FALSE(m.position_of("T99@3").has_value());
    }
  }
  // same label, different index across layouts
  auto m1 = label_positions(get_template(Operation::Add, 1));
  auto m2 = label_positions(get_template(Operation::Add, 2));
  CHECK(m1.at(labels::kResultFirst) != m2.at(labels::kResultFirst));
  CHECK(m1.label_of(m1.at(labels::kResultFirst)) == m2.label_of(m2.at(labels::kResultFirst)));
}

TEST_CASE("every legal operand pair appears") {
  for (auto op : {Operation::Add, Operation::Sub, Operation::Mul, Operation::Div}) {
    const auto legal = legal_operands(op);
    // enough draws for the coupon collector on the largest operand set
    const std::size_t n = std::max<std::size_t>(1000, 12 * legal.size());
    for (const auto& t : templates(op)) {
      std::set<std::pair<int, int>> seen;
      for (const auto& p : generate_pairs(t, n, ErrorType::Result, 4)) seen.insert({p.assignment.num1, p.assignment.num2});
      INFO(to_string(op) << " template " << t.id);
      CHECK(seen.size() == legal.size());
    }
    for (auto [a, b] : legal) {
      const int r = apply(op, a, b);
      CHECK(r >= 10);
      CHECK(r <= 99);
    }
  }
}

TEST_CASE("computation pairs") {
  const Template& t = get_template(Operation::Add, 1);
  auto src = generate_pairs(t, 200, ErrorType::Result, 6);
  auto comp = make_computation_pairs(src, 6);
  const std::size_t eq = label_positions(t).at(labels::kEquals);
  for (std::size_t i = 0; i < comp.size(); ++i) {
    const auto& c = comp[i];
    CHECK(c.task == TaskKind::Computation);
    // truncated after "=", plus the shared leading digit of every sum
    CHECK(c.clean_tokens.size() == eq + 2);
    CHECK(c.clean_tokens.back() == tok().digit(1));
    const auto& b = *c.corrupt_assignment;
    CHECK(std::make_pair(b.num1, b.num2) != std::make_pair(c.assignment.num1, c.assignment.num2));
    CHECK(c.clean_labels == std::vector<int>{tok().digit(c.assignment.result % 10)});
    CHECK(c.corrupt_labels == std::vector<int>{tok().digit(b.result % 10)});
    CHECK(c.clean_labels != c.corrupt_labels);
    CHECK(c.position_labels.at(labels::kFinal) == c.clean_tokens.size() - 1);
    CHECK_FALSE(c.position_labels.find(labels::kAnswerFirst).has_value());
  }

  // 5 + 8 against 3 + 9: labels 13 and 12, i.e. units 3 and 2 after the shared 1
  VariableAssignment a{"jane", "apples", "buys", "she", "check reasoning", 5, 8, 13, 13};
  PromptPair p = src[0];
  p.assignment = a;
  bool found = false;
  for (std::uint64_t seed = 0; seed < 5000 && !found; ++seed) {
    auto c = make_computation_pairs({p}, seed)[0];
    if (c.corrupt_assignment->num1 == 3 && c.corrupt_assignment->num2 == 9) {
      CHECK(c.clean_labels == std::vector<int>{tok().digit(3)});
      CHECK(c.corrupt_labels == std::vector<int>{tok().digit(2)});
      found = true;
    }
  }
  CHECK(found);

  // non-additive operations predict the leading digit, which must differ
  auto sub = make_computation_pairs(generate_pairs(get_template(Operation::Sub, 2), 50, ErrorType::Result, 1), 2);
  for (const auto& c : sub) CHECK(c.assignment.result / 10 != c.corrupt_assignment->result / 10);
}

TEST_CASE("dataset files are deterministic and round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "circuitlab_test_data";
  auto pairs = generate_pairs(get_template(Operation::Mul, 3), 40, ErrorType::Answer, 9);
  auto comp = make_computation_pairs(pairs, 9);
  pairs.insert(pairs.end(), comp.begin(), comp.end());
  write_jsonl((dir / "a.jsonl").string(), pairs);
  write_jsonl((dir / "b.jsonl").string(), generate_pairs(get_template(Operation::Mul, 3), 40, ErrorType::Answer, 9));
  auto back = read_jsonl((dir / "a.jsonl").string());
  CHECK(back == pairs);
  write_jsonl((dir / "c.jsonl").string(), std::vector<PromptPair>(back.begin(), back.begin() + 40));
  CHECK(read_file((dir / "b.jsonl").string()) == read_file((dir / "c.jsonl").string()));
  CHECK(generate_pairs(get_template(Operation::Mul, 3), 40, ErrorType::Answer, 10) != std::vector<PromptPair>(back.begin(), back.begin() + 40));
  std::filesystem::remove_all(dir);
}

TEST_CASE("argument errors") {
  CHECK_THROWS_AS(get_template(Operation::Add, 9), std::out_of_range);
  CHECK_THROWS_AS(generate_pairs(get_template(Operation::Add, 1), 0, ErrorType::Result, 0), std::invalid_argument);
  Template fake = get_template(Operation::Add, 1);
  fake.operation = Operation::Sub;
  CHECK_THROWS_AS(generate_pairs(fake, 1, ErrorType::Result, 0), std::invalid_argument);
  CHECK_THROWS_AS(error_values(7), std::invalid_argument);
  CHECK(parse_error_type("both") == ErrorType::Both);
  CHECK(parse_operation(to_string(Operation::Div)) == Operation::Div);
}
