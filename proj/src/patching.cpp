#include "circuitlab/patching.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>

namespace circuitlab {

void MetricSpec::validate() const {
  if (clean_tokens.empty() || corrupt_tokens.empty()) throw std::invalid_argument("metric: empty answer token set");
  for (int c : clean_tokens)
    if (std::find(corrupt_tokens.begin(), corrupt_tokens.end(), c) != corrupt_tokens.end()) {
      throw std::invalid_argument("metric: clean and corrupt answer sets overlap");
    }
}

MetricSpec metric_for(const PromptPair& pair) {
  MetricSpec m;
  m.clean_tokens = pair.clean_labels;
  m.corrupt_tokens = pair.corrupt_labels;
  m.validate();
  return m;
}

double logit_diff(const Tensor& logits, const MetricSpec& metric) {
  metric.validate();
  if (logits.rank() != 2) throw ShapeError("logit_diff expects (seq_len, vocab) logits");
  const std::size_t pos = metric.position.value_or(logits.dim(0) - 1);
  if (pos >= logits.dim(0)) throw std::out_of_range("metric position out of range");
  const auto row = logits.row(pos);
  auto mean_of = [&](const std::vector<int>& ids) {
    double s = 0.0;
    for (int id : ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= row.size()) throw std::out_of_range("metric token out of range");
      s += row[static_cast<std::size_t>(id)];
    }
    return s / static_cast<double>(ids.size());
  };
  return metric.scale * (mean_of(metric.clean_tokens) - mean_of(metric.corrupt_tokens));
}

double logit_diff(std::span<const Tensor> logits, std::span<const MetricSpec> metrics) {
  if (logits.empty() || logits.size() != metrics.size()) throw std::invalid_argument("logit_diff: batch size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) s += logit_diff(logits[i], metrics[i]);
  return s / static_cast<double>(logits.size());
}

namespace {

void check_pair(const PromptPair& pair) {
  if (pair.clean_tokens.size() != pair.corrupt_tokens.size()) {
    throw std::invalid_argument("clean and corrupt prompts differ in length");
  }
}

}  // namespace

double exact_patch_effect(const Parameters& params, const PromptPair& pair, std::size_t edge, std::size_t position,
                          const MetricSpec& metric) {
  check_pair(pair);
  const ComputationGraph graph(params.config);
  if (edge >= graph.num_edges()) throw std::out_of_range("edge index out of range");
  if (position >= pair.clean_tokens.size()) throw std::out_of_range("position out of range");
  const auto [clean_logits, clean] = run_with_cache(params, pair.clean_tokens);
  const auto row = clean.source_outputs[graph.edge_source(edge)].row(position);
  const double base = logit_diff(run_logits(params, pair.corrupt_tokens), metric);
  const Tensor patched = run_with_edge_patch(
      params, pair.corrupt_tokens, {EdgePatch{edge, position, Tensor({params.config.d_model}, {row.begin(), row.end()})}});
  return logit_diff(patched, metric) - base;
}

std::vector<double> eap_pair_scores(const Parameters& params, const PromptPair& pair, const MetricSpec& metric) {
  check_pair(pair);
  metric.validate();
  const ComputationGraph graph(params.config);
  const std::size_t T = pair.clean_tokens.size();
  const std::size_t d = params.config.d_model;
  const std::size_t V = params.config.vocab_size;

  const Trace clean = trace(params, pair.clean_tokens);
  const Trace corrupt = trace(params, pair.corrupt_tokens);

  // d(metric)/d(logits) is constant: +scale/|clean| and -scale/|corrupt| at one position.
  const std::size_t pos = metric.position.value_or(T - 1);
  if (pos >= T) throw std::out_of_range("metric position out of range");
  Tensor seed({1, T, V});
  for (int id : metric.clean_tokens) seed[pos * V + static_cast<std::size_t>(id)] += metric.scale / metric.clean_tokens.size();
  for (int id : metric.corrupt_tokens)
    seed[pos * V + static_cast<std::size_t>(id)] -= metric.scale / metric.corrupt_tokens.size();
  const Gradients g = corrupt.tape.backward(corrupt.logits, seed, corrupt.destinations);

  std::vector<double> out(graph.num_edges() * T, 0.0);
  for (std::size_t e = 0; e < graph.num_edges(); ++e) {
    const std::size_t s = graph.edge_source(e);
    const Tensor& zc = clean.tape.value(clean.sources[s]);
    const Tensor& zk = corrupt.tape.value(corrupt.sources[s]);
    const Tensor& grad = g[corrupt.destinations[graph.edge_destination(e)]];
    for (std::size_t t = 0; t < T; ++t) {
      double acc = 0.0;
      for (std::size_t j = 0; j < d; ++j) acc += (zc[t * d + j] - zk[t * d + j]) * grad[t * d + j];
      out[e * T + t] = acc;
    }
  }
  return out;
}

std::vector<std::size_t> AttributionTable::ranked() const {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return idx;
}

AttributionTable eap_scores(const Parameters& params, const std::vector<PromptPair>& pairs, AbsMode mode,
                            double metric_scale) {
  if (pairs.empty()) throw std::invalid_argument("eap_scores: no pairs");
  if (!(metric_scale > 0.0)) throw std::invalid_argument("eap_scores: metric scale must be positive");
  const ComputationGraph graph(params.config);
  const std::size_t T = pairs.front().clean_tokens.size();
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (pairs[i].clean_tokens.size() != T || pairs[i].template_id != pairs.front().template_id ||
        pairs[i].operation != pairs.front().operation) {
      throw std::invalid_argument("eap_scores: pair " + std::to_string(i) + " has a different template layout");
    }
  }
  AttributionTable table;
  table.n_edges = graph.num_edges();
  table.seq_len = T;
  table.scores.assign(table.n_edges * T, 0.0);
  table.labels = pairs.front().position_labels;
  table.n_pairs = pairs.size();
  table.mode = mode;
  table.model_fingerprint = params.fingerprint();
  for (const auto& p : pairs) {
    MetricSpec m = metric_for(p);
    m.scale = metric_scale;
    const auto s = eap_pair_scores(params, p, m);
    for (std::size_t i = 0; i < s.size(); ++i) table.scores[i] += mode == AbsMode::AbsThenMean ? std::abs(s[i]) : s[i];
  }
  for (auto& x : table.scores) {
    x /= static_cast<double>(pairs.size());
    if (mode == AbsMode::MeanThenAbs) x = std::abs(x);
  }
  return table;
}

nlohmann::json to_json(const AttributionTable& table, const ComputationGraph& graph) {
  nlohmann::json entries = nlohmann::json::array();
  for (std::size_t i : table.ranked()) {
    const std::size_t e = i / table.seq_len;
    const std::size_t pos = i % table.seq_len;
    entries.push_back({{"edge", graph.edges()[e].name()}, {"pos_label", table.labels.label_of(pos)}, {"score", table.scores[i]}});
  }
  return {{"n_pairs", table.n_pairs},
          {"metric", table.metric},
          {"seed", table.seed},
          {"abs_mode", table.mode == AbsMode::AbsThenMean ? "abs_then_mean" : "mean_then_abs"},
          {"model_fingerprint", table.model_fingerprint},
          {"template_id", table.labels.template_id},
          {"seq_len", table.seq_len},
          {"position_labels", table.labels.positions},
          {"entries", entries}};
}

AttributionTable attribution_from_json(const nlohmann::json& j, const ComputationGraph& graph) {
  AttributionTable t;
  t.n_edges = graph.num_edges();
  t.seq_len = j.at("seq_len").get<std::size_t>();
  t.n_pairs = j.at("n_pairs").get<std::size_t>();
  t.metric = j.at("metric").get<std::string>();
  t.seed = j.at("seed").get<std::uint64_t>();
  t.mode = j.at("abs_mode").get<std::string>() == "abs_then_mean" ? AbsMode::AbsThenMean : AbsMode::MeanThenAbs;
  t.model_fingerprint = j.at("model_fingerprint").get<std::string>();
  t.labels.template_id = j.at("template_id").get<int>();
  t.labels.seq_len = t.seq_len;
  t.labels.positions = j.at("position_labels").get<std::map<std::string, std::size_t>>();
  t.scores.assign(t.n_edges * t.seq_len, 0.0);
  std::vector<char> seen(t.scores.size(), 0);
  for (const auto& e : j.at("entries")) {
    const std::size_t edge = graph.edge_index(parse_edge(e.at("edge").get<std::string>()));
    const auto pos = t.labels.position_of(e.at("pos_label").get<std::string>());
    if (!pos) throw std::invalid_argument("attribution entry has unknown position label");
    const std::size_t i = edge * t.seq_len + *pos;
    t.scores[i] = e.at("score").get<double>();
    seen[i] = 1;
  }
  if (std::find(seen.begin(), seen.end(), 0) != seen.end()) throw std::invalid_argument("attribution table is incomplete");
  return t;
}

namespace {

std::vector<double> ranks(std::span<const double> x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw std::invalid_argument("spearman: need two equal-length samples");
  const auto ra = ranks(a);
  const auto rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double num = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    num += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (va == 0.0 || vb == 0.0) throw std::invalid_argument("spearman: constant sample");
  return num / std::sqrt(va * vb);
}

}  // namespace circuitlab
