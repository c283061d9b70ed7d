#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "circuitlab/dataset.hpp"
#include "circuitlab/model.hpp"

namespace circuitlab {

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t batch_size = 32;  // prompts per step (pairs contribute both prompts)
  std::size_t steps = 5000;
  std::size_t warmup_steps = 100;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double grad_clip = 1.0;  // global norm; 0 disables
  std::uint64_t seed = 0;
  /// Weight of the final-position VALID/INVALID loss (and of computation pairs).
  double validation_weight = 1.0;
  /// Weight of next-token loss on the true result digits inside validation prompts.
  double computation_weight = 0.5;
  double answer_weight = 0.5;  // next-token loss on the answer digits of valid prompts
  std::size_t log_every = 50;

  void validate() const;
};

struct LossPoint {
  std::size_t step = 0;
  double loss = 0.0;
};

struct TrainResult {
  Parameters params;
  std::vector<LossPoint> curve;
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(std::size_t step, const std::string& what)
      : std::runtime_error("training diverged at step " + std::to_string(step) + ": " + what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

using ProgressFn = std::function<void(const LossPoint&)>;

/// Adam on cross-entropy. Each step draws pairs from one (operation,
/// template) group so prompts share a length.
TrainResult train(const Parameters& init, const std::vector<PromptPair>& data, const TrainConfig& config,
                  const ProgressFn& progress = {});

/// Final-position prediction is correct for both members of the pair.
bool pair_correct(const Parameters& params, const PromptPair& pair);
/// Batched version of pair_correct over a list of pairs.
std::vector<char> classify_pairs(const Parameters& params, const std::vector<PromptPair>& pairs);

struct TemplateAccuracy {
  int template_id = 0;
  std::size_t n = 0;
  double accuracy = 0.0;  // percent
};

struct AccuracyReport {
  double mean = 0.0;    // mean over templates, percent
  double stddev = 0.0;  // population stddev over templates
  double overall = 0.0; // pooled over all pairs, percent
  std::size_t n_pairs = 0;
  std::vector<TemplateAccuracy> per_template;
};

AccuracyReport evaluate_detection_accuracy(const Parameters& params, const std::vector<PromptPair>& pairs);

/// Keeps only the pairs the model classifies correctly.
std::vector<PromptPair> filter_correct(const Parameters& params, const std::vector<PromptPair>& pairs);

std::string loss_curve_csv(const std::vector<LossPoint>& curve);

}  // namespace circuitlab
