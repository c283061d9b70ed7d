#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "circuitlab/circuits.hpp"
#include "circuitlab/dataset.hpp"
#include "circuitlab/model.hpp"

namespace circuitlab {

struct HeadRef {
  std::size_t layer = 0;
  std::size_t head = 0;
  std::string name() const;  // "L1H2"
  friend auto operator<=>(const HeadRef&, const HeadRef&) = default;
};

/// Parses "L1H2" (also accepts "A.1.2").
HeadRef parse_head(std::string_view text);
std::vector<HeadRef> parse_head_list(std::string_view comma_separated);

struct AccuracyDelta {
  double before = 0.0;  // percent
  double after = 0.0;
  std::size_t n = 0;
  double delta() const { return after - before; }
};

struct HeadPatchReport {
  AccuracyDelta pair_accuracy;   // both members correct
  AccuracyDelta detection_rate;  // clean (erroneous) member flagged INVALID
};

/// Patches the listed heads of each target pair's clean prompt with alpha
/// times the attention of the aligned source prompt. The corrupt member runs
/// unpatched. Source and target prompts must share a layout.
HeadPatchReport patch_heads_eval(const Parameters& params, const std::vector<PromptPair>& target_pairs,
                                 const std::vector<std::vector<int>>& source_prompts, const std::vector<HeadRef>& heads,
                                 double alpha);

/// The clean prompt of `pair` re-rendered with a single error of `kind`
/// (Result or Answer) using the pair's own wrong value.
std::vector<int> single_error_variant(const PromptPair& pair, ErrorType kind);

/// Uniform sample without replacement from heads not in `exclude`.
std::vector<HeadRef> random_control_heads(const ComputationGraph& graph, const std::vector<HeadRef>& exclude,
                                          std::size_t count, std::uint64_t seed);

struct ResidualLocus {
  std::size_t layer = 0;  // residual index in [0, n_layers]
  std::string pos_label;
};

struct BridgeReport {
  AccuracyDelta consistent;  // Both-error pairs
  AccuracyDelta single;      // single-error pairs
};

/// Adds each prompt's own residual at `src` (times scale) to its residual at
/// `dst`, on both members of every pair, and reports pair accuracy.
BridgeReport residual_bridge_eval(const Parameters& params, const std::vector<PromptPair>& consistent_pairs,
                                  const std::vector<PromptPair>& single_pairs, const ResidualLocus& src,
                                  const ResidualLocus& dst, double scale = 1.0);

/// Logits of one prompt with the residual bridge applied.
Tensor run_bridged(const Parameters& params, const std::vector<int>& tokens, const TokenLabelMap& labels,
                   const ResidualLocus& src, const ResidualLocus& dst, double scale = 1.0);

/// Elementwise mean of a head's attention pattern over equal-length prompts.
Tensor average_attention(const Parameters& params, const std::vector<std::vector<int>>& prompts, std::size_t layer,
                         std::size_t head);

struct HeadScore {
  HeadRef head;
  double score = 0.0;  // match-condition minus mismatch-condition attention
  double match_attention = 0.0;
  double mismatch_attention = 0.0;
  /// condition -> {answer-first->result-first, answer-second->result-second}
  std::map<std::string, std::pair<double, double>> per_condition;
};

/// Scores one head from its mean pattern under each of the four conditions.
HeadScore score_head_patterns(const HeadRef& head, const std::map<std::string, Tensor>& mean_pattern_by_condition,
                              const TokenLabelMap& labels);

/// Ranks heads (those touched by `circuit`, or all heads when it is null) by
/// |score|. prompt_sets holds prompts of every error condition ("result",
/// "answer", "both", "none"), all of one template.
std::vector<HeadScore> detect_consistency_heads(const Parameters& params, const Circuit* circuit,
                                                const std::map<std::string, std::vector<std::vector<int>>>& prompt_sets,
                                                const TokenLabelMap& labels);

}  // namespace circuitlab
