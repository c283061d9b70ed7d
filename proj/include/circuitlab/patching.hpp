#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "circuitlab/dataset.hpp"
#include "circuitlab/model.hpp"
#include "json.hpp"

namespace circuitlab {

/// Logit difference between two disjoint answer-token sets at one position.
struct MetricSpec {
  std::vector<int> clean_tokens;
  std::vector<int> corrupt_tokens;
  std::optional<std::size_t> position;  // default: last position
  double scale = 1.0;

  /// Throws std::invalid_argument for empty or overlapping token sets.
  void validate() const;
};

/// Clean labels against corrupt labels at the final position.
MetricSpec metric_for(const PromptPair& pair);

/// mean(logits[pos, clean]) - mean(logits[pos, corrupt]), times scale.
/// `logits` is (seq_len, vocab).
double logit_diff(const Tensor& logits, const MetricSpec& metric);
/// Mean of per-prompt logit differences.
double logit_diff(std::span<const Tensor> logits, std::span<const MetricSpec> metrics);

/// metric(corrupt run with the edge at `position` carrying its clean value)
/// minus metric(corrupt run).
double exact_patch_effect(const Parameters& params, const PromptPair& pair, std::size_t edge, std::size_t position,
                          const MetricSpec& metric);

/// Signed first-order estimate for every (edge, position) of one pair,
/// edge-major. Uses one clean forward, one corrupt forward and one backward.
std::vector<double> eap_pair_scores(const Parameters& params, const PromptPair& pair, const MetricSpec& metric);

enum class AbsMode {
  AbsThenMean,  // |score| per pair, then averaged
  MeanThenAbs,  // signed scores averaged, then |.|
};

struct AttributionTable {
  std::size_t n_edges = 0;
  std::size_t seq_len = 0;
  std::vector<double> scores;  // edge-major, non-negative
  TokenLabelMap labels;
  std::size_t n_pairs = 0;
  std::string metric = "logit_diff";
  std::uint64_t seed = 0;
  AbsMode mode = AbsMode::AbsThenMean;
  std::string model_fingerprint;

  double score(std::size_t edge, std::size_t position) const { return scores[edge * seq_len + position]; }
  /// Instance indices (edge * seq_len + position) by descending score; ties
  /// keep graph order (edge, then position).
  std::vector<std::size_t> ranked() const;
};

/// Averages EAP scores over pairs that share one template layout.
AttributionTable eap_scores(const Parameters& params, const std::vector<PromptPair>& pairs,
                            AbsMode mode = AbsMode::AbsThenMean, double metric_scale = 1.0);

nlohmann::json to_json(const AttributionTable& table, const ComputationGraph& graph);
AttributionTable attribution_from_json(const nlohmann::json& j, const ComputationGraph& graph);

double spearman(std::span<const double> a, std::span<const double> b);

}  // namespace circuitlab
