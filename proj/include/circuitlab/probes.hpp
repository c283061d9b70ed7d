#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "circuitlab/dataset.hpp"
#include "circuitlab/model.hpp"
#include "json.hpp"

namespace circuitlab {

struct ProbeConfig {
  double learning_rate = 1e-3;
  std::size_t epochs = 1;
  std::size_t batch_size = 32;  // 0: full batch
  std::uint64_t seed = 0;
};

/// Softmax-regression probe over the distinct classes seen in training.
struct ProbeWeights {
  Tensor weight;  // (d, n_classes)
  Tensor bias;    // (n_classes)
  std::vector<int> classes;
  std::size_t layer = 0;
  std::string position;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;

  int predict(std::span<const double> x) const;
  double accuracy(const std::vector<std::vector<double>>& x, const std::vector<int>& y) const;
};

/// Adam on multinomial cross-entropy. Samples are put in a canonical order and
/// then shuffled from the seed, so the input order does not matter.
/// Throws std::invalid_argument when fewer than two classes are present.
ProbeWeights train_probe(const std::vector<std::vector<double>>& x, const std::vector<int>& y, const ProbeConfig& config);

struct ProbeGrid {
  std::vector<std::string> positions;
  std::size_t n_states = 0;  // residual indices 0..n_layers
  /// accuracy[state][position]: test accuracy in [0, 1]
  std::vector<std::vector<double>> accuracy;
  std::vector<std::vector<double>> train_accuracy;

  std::string to_csv() const;
  nlohmann::json to_json() const;
};

/// Trains one probe per (residual index, position label) on the clean
/// prompts of `train`, tests on `test`, predicting the correct result.
ProbeGrid probe_layer_sweep(const Parameters& params, const std::vector<PromptPair>& train,
                            const std::vector<PromptPair>& test, const std::vector<std::string>& positions,
                            const ProbeConfig& config);

}  // namespace circuitlab
