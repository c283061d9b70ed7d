#pragma once

#include <compare>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "circuitlab/dataset.hpp"
#include "circuitlab/model.hpp"
#include "circuitlab/patching.hpp"
#include "json.hpp"

namespace circuitlab {

struct CircuitMember {
  Edge edge;
  std::string pos_label;
  friend auto operator<=>(const CircuitMember&, const CircuitMember&) = default;
};

/// A set of (edge, position label) instances. Labels are abstract labels or
/// template-local names, so circuits from different templates can be compared.
struct Circuit {
  std::set<CircuitMember> members;
  std::vector<int> template_ids;
  std::optional<double> tau;
  std::string model_fingerprint;
  std::string label_domain;  // e.g. "add/validation"
  bool flagged = false;      // best-effort search result outside the faithfulness band

  std::size_t size() const { return members.size(); }
  bool empty() const { return members.empty(); }
  bool contains(const CircuitMember& m) const { return members.count(m) > 0; }
};

std::string label_domain_of(const PromptPair& pair);

/// Every edge at every position of a template layout.
Circuit full_circuit(const ComputationGraph& graph, const TokenLabelMap& labels, std::string fingerprint,
                     std::string domain);

/// Patch mask for one layout: 1 where the instance is NOT in the circuit.
/// Members whose label does not occur in the layout are ignored.
std::vector<char> off_circuit_mask(const ComputationGraph& graph, const Circuit& circuit, const TokenLabelMap& labels);

/// Clean run with every off-circuit edge instance carrying its corrupt-run value.
/// Throws std::invalid_argument for a circuit of another model.
Tensor run_circuit(const Parameters& params, const Circuit& circuit, const PromptPair& pair);

struct FaithfulnessReport {
  double mean = 0.0;  // percent
  double stddev = 0.0;
  std::vector<double> per_pair;
};

/// Caches the clean/corrupt runs of a pair set so many circuits can be scored.
class FaithfulnessEvaluator {
 public:
  /// Throws std::invalid_argument naming the first pair whose clean and
  /// corrupt logit differences coincide (|M_clean - M_corrupt| < 1e-9).
  FaithfulnessEvaluator(const Parameters& params, std::vector<PromptPair> pairs);

  FaithfulnessReport evaluate(const Circuit& circuit) const;
  std::size_t size() const { return pairs_.size(); }

 private:
  const Parameters& params_;
  ComputationGraph graph_;
  std::vector<PromptPair> pairs_;
  std::vector<ActivationCache> corrupt_;
  std::vector<double> m_clean_, m_corrupt_;
};

FaithfulnessReport faithfulness(const Parameters& params, const Circuit& circuit, const std::vector<PromptPair>& pairs);

struct SearchConfig {
  std::size_t k = 100;
  std::size_t n = 20;
  double band_lo = 99.0;
  double band_hi = 101.0;
  std::size_t eval_pairs = 0;  // 0: all pairs
  std::size_t max_edges = 0;   // 0: every edge instance

  void validate() const;
};

struct SearchStep {
  std::size_t size = 0;
  double faithfulness = 0.0;
};

struct SearchResult {
  Circuit circuit;
  double faithfulness = 0.0;
  bool in_band = false;
  std::vector<SearchStep> trajectory;
};

/// Evaluates top-k, top-(k+n), ... prefixes of the ranked table and returns the
/// first inside the band. When none is, returns the prefix closest to 100%
/// with circuit.flagged set.
SearchResult search_minimal_circuit(const AttributionTable& table, const Parameters& params,
                                    const std::vector<PromptPair>& pairs, const SearchConfig& config);

Circuit circuit_from_ranking(const AttributionTable& table, const ComputationGraph& graph, std::size_t size,
                             std::string domain);

/// Members whose membership fraction across the circuits is at least tau.
/// tau must be one of 1/N, ..., N/N for N circuits.
Circuit soft_intersection(const std::vector<Circuit>& circuits, double tau);

struct Overlap {
  double iou = 0.0;
  double iom = 0.0;
};

/// Throws std::invalid_argument when either circuit is empty or the label
/// domains differ.
Overlap overlap(const Circuit& a, const Circuit& b);

enum class SetOp { Union, Intersection };
Circuit set_op(const Circuit& a, const Circuit& b, SetOp op);

nlohmann::json to_json(const Circuit& c);
Circuit circuit_from_json(const nlohmann::json& j);

}  // namespace circuitlab
