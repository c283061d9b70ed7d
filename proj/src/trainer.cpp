#include "circuitlab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "circuitlab/rng.hpp"
#include "circuitlab/tokenizer.hpp"

namespace circuitlab {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || batch_size < 2 || !(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) ||
      !(epsilon > 0.0) || grad_clip < 0.0 || validation_weight < 0.0 || computation_weight < 0.0 ||
      answer_weight < 0.0) {
    throw std::invalid_argument("train config: learning rate, batch size (>= 2), betas and epsilon must be valid");
  }
  if (validation_weight + computation_weight + answer_weight <= 0.0) throw std::invalid_argument("train config: task weights are all zero");
}

namespace {

struct Site {
  std::size_t batch_row;
  std::size_t position;
  int target;
  double weight;
};

// Adds w * (softmax - onehot) at one logit row and returns w * cross-entropy.
double cross_entropy_row(std::span<const double> logits, int target, double w, std::span<double> seed) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double v : logits) z += std::exp(v - mx);
  const double log_z = mx + std::log(z);
  for (std::size_t i = 0; i < logits.size(); ++i) seed[i] += w * std::exp(logits[i] - log_z);
  seed[static_cast<std::size_t>(target)] -= w;
  return w * (log_z - logits[static_cast<std::size_t>(target)]);
}

std::map<std::size_t, std::vector<std::size_t>> group_by_length(const std::vector<PromptPair>& pairs) {
  std::map<std::size_t, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (pairs[i].clean_tokens.size() != pairs[i].corrupt_tokens.size()) {
      throw std::invalid_argument("pair " + std::to_string(i) + " has members of different lengths");
    }
    groups[pairs[i].clean_tokens.size()].push_back(i);
  }
  return groups;
}

int argmax_row(std::span<const double> row) {
  return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
}

bool in_set(const std::vector<int>& set, int id) { return std::find(set.begin(), set.end(), id) != set.end(); }

}  // namespace

TrainResult train(const Parameters& init, const std::vector<PromptPair>& data, const TrainConfig& cfg,
                  const ProgressFn& progress) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("train: dataset is empty");
  const std::size_t V = init.config.vocab_size;
  for (const auto& p : data) {
    for (int id : p.clean_labels)
      if (id < 0 || static_cast<std::size_t>(id) >= V) throw std::invalid_argument("train: label token outside vocabulary");
    for (int id : p.corrupt_labels)
      if (id < 0 || static_cast<std::size_t>(id) >= V) throw std::invalid_argument("train: label token outside vocabulary");
    if (p.clean_labels.empty() || p.corrupt_labels.empty()) throw std::invalid_argument("train: pair without labels");
  }
  const Tokenizer& tok = Tokenizer::standard();

  TrainResult result{init, {}};
  Parameters& params = result.params;
  std::vector<Tensor*> slots;
  params.visit([&](const std::string&, Tensor& t) { slots.push_back(&t); });
  std::vector<Tensor> m, v;
  for (auto* t : slots) {
    m.emplace_back(t->shape());
    v.emplace_back(t->shape());
  }

  const auto groups = group_by_length(data);
  std::vector<std::size_t> group_of(data.size());
  for (const auto& [len, members] : groups)
    for (std::size_t i : members) group_of[i] = len;

  auto rng = make_rng(cfg.seed, "train/batches");
  const std::size_t n_pairs = cfg.batch_size / 2;
  double running = 0.0;
  std::size_t running_n = 0;

  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    const std::size_t anchor = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(data.size()) - 1));
    const auto& members = groups.at(group_of[anchor]);
    std::vector<const PromptPair*> batch;
    std::vector<int> tokens;
    for (std::size_t i = 0; i < n_pairs; ++i) {
      const PromptPair& p =
          data[members[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(members.size()) - 1))]];
      batch.push_back(&p);
      tokens.insert(tokens.end(), p.clean_tokens.begin(), p.clean_tokens.end());
      tokens.insert(tokens.end(), p.corrupt_tokens.begin(), p.corrupt_tokens.end());
    }
    const std::size_t B = 2 * n_pairs;
    const std::size_t T = batch.front()->clean_tokens.size();

    std::vector<Site> sites;
    std::size_t n_comp = 0;
    std::size_t n_ans = 0;
    for (std::size_t i = 0; i < n_pairs; ++i) {
      const PromptPair& p = *batch[i];
      sites.push_back({2 * i, T - 1, p.clean_labels.front(), cfg.validation_weight});
      sites.push_back({2 * i + 1, T - 1, p.corrupt_labels.front(), cfg.validation_weight});
      if (p.task == TaskKind::Validation && cfg.computation_weight > 0.0) {
        const int r = p.assignment.result;
        const std::size_t eq = p.position_labels.at(labels::kEquals);
        const std::size_t rf = p.position_labels.at(labels::kResultFirst);
        for (std::size_t row : {2 * i, 2 * i + 1}) {
          sites.push_back({row, eq, tok.digit(r / 10), -1.0});
          sites.push_back({row, rf, tok.digit(r % 10), -1.0});
          n_comp += 2;
        }
      }
      // next-token targets for the answer digits of the valid member
      if (p.task == TaskKind::Validation && cfg.answer_weight > 0.0) {
        const std::size_t af = p.position_labels.at(labels::kAnswerFirst);
        const std::size_t as = p.position_labels.at(labels::kAnswerSecond);
        sites.push_back({2 * i + 1, af - 1, p.corrupt_tokens[af], -2.0});
        sites.push_back({2 * i + 1, af, p.corrupt_tokens[as], -2.0});
        n_ans += 2;
      }
    }
    for (auto& s : sites) {
      if (s.weight == -1.0)
        s.weight = cfg.computation_weight / static_cast<double>(n_comp);
      else if (s.weight == -2.0)
        s.weight = cfg.answer_weight / static_cast<double>(n_ans);
      else
        s.weight /= static_cast<double>(B);
    }

    double loss = 0.0;
    std::vector<Tensor> grads;
    try {
      Trace tr = trace(params, tokens, B, {}, false);
      const Tensor& logits = tr.tape.value(tr.logits);
      Tensor seed(logits.shape());
      for (const auto& s : sites) {
        const std::size_t r = s.batch_row * T + s.position;
        loss += cross_entropy_row(logits.row(r), s.target, s.weight, seed.row(r));
      }
      if (!std::isfinite(loss)) throw NonFiniteError("loss is not finite");
      Gradients g = tr.tape.backward(tr.logits, seed, tr.params);
      for (Var pv : tr.params) grads.push_back(g[pv]);
    } catch (const NonFiniteError& e) {
      throw DivergenceError(step, e.what());
    }

    double norm2 = 0.0;
    for (const auto& g : grads)
      for (double x : g.values()) norm2 += x * x;
    if (!std::isfinite(norm2)) throw DivergenceError(step, "gradient is not finite");
    const double clip = (cfg.grad_clip > 0.0 && std::sqrt(norm2) > cfg.grad_clip) ? cfg.grad_clip / std::sqrt(norm2) : 1.0;

    const double warm = cfg.warmup_steps == 0 ? 1.0 : std::min(1.0, static_cast<double>(step) / cfg.warmup_steps);
    const double lr = cfg.learning_rate * warm;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    for (std::size_t k = 0; k < slots.size(); ++k) {
      auto w = slots[k]->values();
      auto g = grads[k].values();
      auto mk = m[k].values();
      auto vk = v[k].values();
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = g[i] * clip;
        mk[i] = cfg.beta1 * mk[i] + (1.0 - cfg.beta1) * gi;
        vk[i] = cfg.beta2 * vk[i] + (1.0 - cfg.beta2) * gi * gi;
        w[i] -= lr * (mk[i] / bc1) / (std::sqrt(vk[i] / bc2) + cfg.epsilon);
      }
    }

    running += loss;
    ++running_n;
    if (cfg.log_every == 0 || step % cfg.log_every == 0 || step == cfg.steps) {
      LossPoint pt{step, running / static_cast<double>(running_n)};
      result.curve.push_back(pt);
      if (progress) progress(pt);
      running = 0.0;
      running_n = 0;
    }
  }
  return result;
}

std::vector<char> classify_pairs(const Parameters& params, const std::vector<PromptPair>& pairs) {
  std::vector<char> out(pairs.size(), 0);
  constexpr std::size_t kChunk = 32;
  for (const auto& [T, members] : group_by_length(pairs)) {
    for (std::size_t start = 0; start < members.size(); start += kChunk) {
      const std::size_t end = std::min(members.size(), start + kChunk);
      std::vector<int> tokens;
      for (std::size_t i = start; i < end; ++i) {
        const auto& p = pairs[members[i]];
        tokens.insert(tokens.end(), p.clean_tokens.begin(), p.clean_tokens.end());
        tokens.insert(tokens.end(), p.corrupt_tokens.begin(), p.corrupt_tokens.end());
      }
      const Trace tr = trace(params, tokens, 2 * (end - start), {}, false);
      const Tensor& logits = tr.tape.value(tr.logits);
      for (std::size_t i = start; i < end; ++i) {
        const auto& p = pairs[members[i]];
        const std::size_t b = 2 * (i - start);
        const int clean_pred = argmax_row(logits.row(b * T + T - 1));
        const int corrupt_pred = argmax_row(logits.row((b + 1) * T + T - 1));
        out[members[i]] = in_set(p.clean_labels, clean_pred) && in_set(p.corrupt_labels, corrupt_pred);
      }
    }
  }
  return out;
}

bool pair_correct(const Parameters& params, const PromptPair& pair) { return classify_pairs(params, {pair}).front() != 0; }

AccuracyReport evaluate_detection_accuracy(const Parameters& params, const std::vector<PromptPair>& pairs) {
  AccuracyReport rep;
  rep.n_pairs = pairs.size();
  if (pairs.empty()) return rep;
  const auto ok = classify_pairs(params, pairs);
  std::map<int, std::pair<std::size_t, std::size_t>> counts;  // template -> (correct, total)
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    auto& c = counts[pairs[i].template_id];
    c.first += ok[i] ? 1 : 0;
    c.second += 1;
    correct += ok[i] ? 1 : 0;
  }
  for (const auto& [id, c] : counts) {
    rep.per_template.push_back({id, c.second, 100.0 * static_cast<double>(c.first) / static_cast<double>(c.second)});
  }
  double sum = 0.0;
  for (const auto& t : rep.per_template) sum += t.accuracy;
  rep.mean = sum / static_cast<double>(rep.per_template.size());
  double var = 0.0;
  for (const auto& t : rep.per_template) var += (t.accuracy - rep.mean) * (t.accuracy - rep.mean);
  rep.stddev = std::sqrt(var / static_cast<double>(rep.per_template.size()));
  rep.overall = 100.0 * static_cast<double>(correct) / static_cast<double>(pairs.size());
  return rep;
}

std::vector<PromptPair> filter_correct(const Parameters& params, const std::vector<PromptPair>& pairs) {
  const auto ok = classify_pairs(params, pairs);
  std::vector<PromptPair> out;
  for (std::size_t i = 0; i < pairs.size(); ++i)
    if (ok[i]) out.push_back(pairs[i]);
  return out;
}

std::string loss_curve_csv(const std::vector<LossPoint>& curve) {
  std::ostringstream os;
  os.precision(17);
  os << "step,loss\n";
  for (const auto& p : curve) os << p.step << ',' << p.loss << '\n';
  return os.str();
}

}  // namespace circuitlab
