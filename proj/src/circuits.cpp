#include "circuitlab/circuits.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace circuitlab {

namespace {

void check_model(const Parameters& params, const Circuit& c) {
  if (c.model_fingerprint != params.fingerprint()) {
    throw std::invalid_argument("circuit belongs to model " + c.model_fingerprint + ", not " + params.fingerprint());
  }
}

void check_compatible(const Circuit& a, const Circuit& b) {
  if (a.model_fingerprint != b.model_fingerprint) throw std::invalid_argument("circuits come from different models");
  if (a.label_domain != b.label_domain) {
    throw std::invalid_argument("mismatched label domains: '" + a.label_domain + "' vs '" + b.label_domain + "'");
  }
}

std::vector<int> merged_templates(const std::vector<int>& a, const std::vector<int>& b) {
  std::set<int> s(a.begin(), a.end());
  s.insert(b.begin(), b.end());
  return {s.begin(), s.end()};
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

std::string label_domain_of(const PromptPair& pair) {
  return to_string(pair.operation) + (pair.task == TaskKind::Validation ? "/validation" : "/computation");
}

Circuit full_circuit(const ComputationGraph& graph, const TokenLabelMap& labels, std::string fingerprint,
                     std::string domain) {
  Circuit c;
  c.template_ids = {labels.template_id};
  c.model_fingerprint = std::move(fingerprint);
  c.label_domain = std::move(domain);
  for (const auto& e : graph.edges())
    for (std::size_t t = 0; t < labels.seq_len; ++t) c.members.insert({e, labels.label_of(t)});
  return c;
}

std::vector<char> off_circuit_mask(const ComputationGraph& graph, const Circuit& circuit, const TokenLabelMap& labels) {
  const std::size_t T = labels.seq_len;
  std::vector<char> mask(graph.num_edges() * T, 1);
  for (const auto& m : circuit.members) {
    const auto pos = labels.position_of(m.pos_label);
    if (!pos) continue;
    mask[graph.edge_index(m.edge) * T + *pos] = 0;
  }
  return mask;
}

Tensor run_circuit(const Parameters& params, const Circuit& circuit, const PromptPair& pair) {
  check_model(params, circuit);
  if (pair.clean_tokens.size() != pair.corrupt_tokens.size()) throw std::invalid_argument("pair lengths differ");
  const ComputationGraph graph(params.config);
  const auto corrupt = run_with_cache(params, pair.corrupt_tokens).second;
  Interventions iv;
  iv.edge_mask = EdgeMaskPatch{&corrupt, off_circuit_mask(graph, circuit, pair.position_labels)};
  return run_logits(params, pair.clean_tokens, iv);
}

FaithfulnessEvaluator::FaithfulnessEvaluator(const Parameters& params, std::vector<PromptPair> pairs)
    : params_(params), graph_(params.config), pairs_(std::move(pairs)) {
  if (pairs_.empty()) throw std::invalid_argument("faithfulness: no pairs");
  for (std::size_t i = 0; i < pairs_.size(); ++i) {
    const auto& p = pairs_[i];
    if (p.clean_tokens.size() != p.corrupt_tokens.size()) throw std::invalid_argument("pair lengths differ");
    const MetricSpec metric = metric_for(p);
    const double mc = logit_diff(run_logits(params_, p.clean_tokens), metric);
    auto [logits, cache] = run_with_cache(params_, p.corrupt_tokens);
    const double mk = logit_diff(logits, metric);
    if (std::abs(mc - mk) < 1e-9) {
      throw std::invalid_argument("faithfulness: pair " + std::to_string(i) +
                                  " has a degenerate denominator (clean and corrupt logit differences coincide)");
    }
    m_clean_.push_back(mc);
    m_corrupt_.push_back(mk);
    corrupt_.push_back(std::move(cache));
  }
}

FaithfulnessReport FaithfulnessEvaluator::evaluate(const Circuit& circuit) const {
  check_model(params_, circuit);
  FaithfulnessReport rep;
  for (std::size_t i = 0; i < pairs_.size(); ++i) {
    const auto& p = pairs_[i];
    Interventions iv;
    iv.edge_mask = EdgeMaskPatch{&corrupt_[i], off_circuit_mask(graph_, circuit, p.position_labels)};
    const double c = logit_diff(run_logits(params_, p.clean_tokens, iv), metric_for(p));
    rep.per_pair.push_back(100.0 * (c - m_corrupt_[i]) / (m_clean_[i] - m_corrupt_[i]));
  }
  rep.mean = mean_of(rep.per_pair);
  double var = 0.0;
  for (double x : rep.per_pair) var += (x - rep.mean) * (x - rep.mean);
  rep.stddev = std::sqrt(var / static_cast<double>(rep.per_pair.size()));
  return rep;
}

FaithfulnessReport faithfulness(const Parameters& params, const Circuit& circuit, const std::vector<PromptPair>& pairs) {
  return FaithfulnessEvaluator(params, pairs).evaluate(circuit);
}

void SearchConfig::validate() const {
  if (k < 1 || n < 1) throw std::invalid_argument("search config: k and n must be at least 1");
  if (!(band_lo < band_hi)) throw std::invalid_argument("search config: band lower bound must be below the upper");
}

Circuit circuit_from_ranking(const AttributionTable& table, const ComputationGraph& graph, std::size_t size,
                             std::string domain) {
  const auto order = table.ranked();
  Circuit c;
  c.template_ids = {table.labels.template_id};
  c.model_fingerprint = table.model_fingerprint;
  c.label_domain = std::move(domain);
  for (std::size_t i = 0; i < std::min(size, order.size()); ++i) {
    const std::size_t e = order[i] / table.seq_len;
    const std::size_t pos = order[i] % table.seq_len;
    c.members.insert({graph.edges()[e], table.labels.label_of(pos)});
  }
  return c;
}

SearchResult search_minimal_circuit(const AttributionTable& table, const Parameters& params,
                                    const std::vector<PromptPair>& pairs, const SearchConfig& cfg) {
  cfg.validate();
  if (pairs.empty()) throw std::invalid_argument("search: no evaluation pairs");
  if (table.model_fingerprint != params.fingerprint()) throw std::invalid_argument("search: table belongs to another model");
  for (const auto& p : pairs) {
    if (p.template_id != table.labels.template_id || p.clean_tokens.size() != table.seq_len) {
      throw std::invalid_argument("search: pairs and attribution table come from different templates");
    }
  }
  const ComputationGraph graph(params.config);
  std::vector<PromptPair> eval(pairs.begin(),
                               pairs.begin() + static_cast<std::ptrdiff_t>(cfg.eval_pairs == 0
                                                                               ? pairs.size()
                                                                               : std::min(cfg.eval_pairs, pairs.size())));
  const std::string domain = label_domain_of(eval.front());
  const FaithfulnessEvaluator evaluator(params, std::move(eval));
  const std::size_t total = table.scores.size();
  const std::size_t limit = cfg.max_edges == 0 ? total : std::min(cfg.max_edges, total);

  SearchResult best;
  double best_gap = INFINITY;
  for (std::size_t size = std::min(cfg.k, limit);; size = std::min(size + cfg.n, limit)) {
    Circuit c = circuit_from_ranking(table, graph, size, domain);
    const double f = evaluator.evaluate(c).mean;
    best.trajectory.push_back({size, f});
    if (f >= cfg.band_lo && f <= cfg.band_hi) {
      best.circuit = std::move(c);
      best.faithfulness = f;
      best.in_band = true;
      return best;
    }
    if (std::abs(f - 100.0) < best_gap) {
      best_gap = std::abs(f - 100.0);
      best.circuit = std::move(c);
      best.faithfulness = f;
    }
    if (size >= limit) break;
  }
  best.circuit.flagged = true;
  return best;
}

Circuit soft_intersection(const std::vector<Circuit>& circuits, double tau) {
  if (circuits.empty()) throw std::invalid_argument("soft intersection: no circuits");
  const double n = static_cast<double>(circuits.size());
  const double steps = tau * n;
  if (!(tau > 0.0 && tau <= 1.0) || std::abs(steps - std::round(steps)) > 1e-9) {
    throw std::invalid_argument("soft intersection: tau must be a multiple of 1/" + std::to_string(circuits.size()));
  }
  const std::size_t need = static_cast<std::size_t>(std::llround(steps));
  std::map<CircuitMember, std::size_t> counts;
  Circuit out;
  out.model_fingerprint = circuits.front().model_fingerprint;
  out.label_domain = circuits.front().label_domain;
  out.tau = tau;
  for (const auto& c : circuits) {
    check_compatible(circuits.front(), c);
    out.template_ids = merged_templates(out.template_ids, c.template_ids);
    for (const auto& m : c.members) ++counts[m];
  }
  for (const auto& [m, k] : counts)
    if (k >= need) out.members.insert(m);
  return out;
}

Overlap overlap(const Circuit& a, const Circuit& b) {
  check_compatible(a, b);
  if (a.empty() || b.empty()) throw std::invalid_argument("overlap: empty circuit (intersection over minimum undefined)");
  std::size_t inter = 0;
  for (const auto& m : a.members) inter += b.contains(m) ? 1 : 0;
  const std::size_t uni = a.size() + b.size() - inter;
  return {static_cast<double>(inter) / static_cast<double>(uni),
          static_cast<double>(inter) / static_cast<double>(std::min(a.size(), b.size()))};
}

Circuit set_op(const Circuit& a, const Circuit& b, SetOp op) {
  check_compatible(a, b);
  Circuit out;
  out.model_fingerprint = a.model_fingerprint;
  out.label_domain = a.label_domain;
  out.template_ids = merged_templates(a.template_ids, b.template_ids);
  if (op == SetOp::Union) {
    out.members = a.members;
    out.members.insert(b.members.begin(), b.members.end());
  } else {
    for (const auto& m : a.members)
      if (b.contains(m)) out.members.insert(m);
  }
  return out;
}

nlohmann::json to_json(const Circuit& c) {
  nlohmann::json members = nlohmann::json::array();
  for (const auto& m : c.members) {
    members.push_back({{"src", m.edge.src.name()}, {"dst", m.edge.dst.name()}, {"pos_label", m.pos_label}});
  }
  nlohmann::json prov = {{"templates", c.template_ids}, {"label_domain", c.label_domain}, {"flagged", c.flagged}};
  prov["tau"] = c.tau ? nlohmann::json(*c.tau) : nlohmann::json(nullptr);
  return {{"model_fingerprint", c.model_fingerprint}, {"provenance", prov}, {"members", members}};
}

Circuit circuit_from_json(const nlohmann::json& j) {
  Circuit c;
  c.model_fingerprint = j.at("model_fingerprint").get<std::string>();
  const auto& prov = j.at("provenance");
  c.template_ids = prov.at("templates").get<std::vector<int>>();
  c.label_domain = prov.at("label_domain").get<std::string>();
  c.flagged = prov.value("flagged", false);
  if (prov.contains("tau") && !prov.at("tau").is_null()) c.tau = prov.at("tau").get<double>();
  for (const auto& m : j.at("members")) {
    c.members.insert({Edge{parse_node(m.at("src").get<std::string>()), parse_node(m.at("dst").get<std::string>())},
                      m.at("pos_label").get<std::string>()});
  }
  return c;
}

}  // namespace circuitlab
