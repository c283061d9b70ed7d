#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "circuitlab/circuits.hpp"
#include "json.hpp"

namespace circuitlab {

struct TauRow {
  std::size_t numerator = 0;  // tau = numerator / n_circuits
  double tau = 0.0;
  std::size_t edges = 0;
  double mean_faithfulness = 0.0;  // averaged over templates
  double std_faithfulness = 0.0;
  bool best = false;
};

/// One row per tau in {1/N, ..., N/N}. Faithfulness of each soft
/// intersection is measured on every template's pairs and averaged. The
/// flagged row is the largest tau whose mean faithfulness is at least 99%.
/// Throws std::invalid_argument with fewer than two circuits.
std::vector<TauRow> tau_sweep_report(const Parameters& params, const std::vector<Circuit>& circuits,
                                     const std::map<int, std::vector<PromptPair>>& pairs_by_template);

std::string tau_sweep_csv(const std::vector<TauRow>& rows);
nlohmann::json to_json(const std::vector<TauRow>& rows);

/// Graphviz text: one column (cluster) per position label, nodes named as in
/// the computation graph ("A.1.2.K", "MLP in 0", ...). Deterministic.
std::string export_dot(const Circuit& circuit);

struct RunManifest {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string checkpoint_id;
  std::map<std::string, std::string> dataset_ids;  // path -> content hash
  std::vector<std::string> commands;
  std::vector<std::string> outputs;

  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
};

/// 64-bit FNV-1a of a byte string, as 16 hex digits.
std::string content_hash(const std::string& bytes);
std::string file_hash(const std::string& path);

}  // namespace circuitlab
