#include "circuitlab/report.hpp"

#include <cmath>
#include <iomanip>
#include <set>
#include <sstream>
#include <stdexcept>

#include "circuitlab/io.hpp"

namespace circuitlab {

std::vector<TauRow> tau_sweep_report(const Parameters& params, const std::vector<Circuit>& circuits,
                                     const std::map<int, std::vector<PromptPair>>& pairs_by_template) {
  if (circuits.size() < 2) throw std::invalid_argument("tau sweep needs circuits from at least two templates");
  if (pairs_by_template.empty()) throw std::invalid_argument("tau sweep needs evaluation pairs");
  std::vector<FaithfulnessEvaluator> evaluators;
  for (const auto& [id, pairs] : pairs_by_template) evaluators.emplace_back(params, pairs);

  const std::size_t n = circuits.size();
  std::vector<TauRow> rows;
  for (std::size_t k = 1; k <= n; ++k) {
    TauRow row;
    row.numerator = k;
    row.tau = static_cast<double>(k) / static_cast<double>(n);
    const Circuit c = soft_intersection(circuits, row.tau);
    row.edges = c.size();
    std::vector<double> per_template;
    for (const auto& ev : evaluators) per_template.push_back(ev.evaluate(c).mean);
    double sum = 0.0;
    for (double f : per_template) sum += f;
    row.mean_faithfulness = sum / static_cast<double>(per_template.size());
    double var = 0.0;
    for (double f : per_template) var += (f - row.mean_faithfulness) * (f - row.mean_faithfulness);
    row.std_faithfulness = std::sqrt(var / static_cast<double>(per_template.size()));
    rows.push_back(row);
  }
  for (std::size_t i = rows.size(); i-- > 0;) {
    if (rows[i].mean_faithfulness >= 99.0) {
      rows[i].best = true;
      break;
    }
  }
  return rows;
}

std::string tau_sweep_csv(const std::vector<TauRow>& rows) {
  std::ostringstream os;
  os << "tau,edges,mean_faithfulness,std_faithfulness,best\n";
  for (const auto& r : rows) {
    os << r.numerator << '/' << rows.size() << ',' << r.edges << ',' << std::setprecision(10) << r.mean_faithfulness
       << ',' << r.std_faithfulness << ',' << (r.best ? 1 : 0) << '\n';
  }
  return os.str();
}

nlohmann::json to_json(const std::vector<TauRow>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows) {
    out.push_back({{"tau", r.tau},
                   {"numerator", r.numerator},
                   {"edges", r.edges},
                   {"mean_faithfulness", r.mean_faithfulness},
                   {"std_faithfulness", r.std_faithfulness},
                   {"best", r.best}});
  }
  return out;
}

namespace {

// Abstract labels in prompt order, then template-local names.
int label_rank(const std::string& label) {
  static const char* const order[] = {labels::kBos,         labels::kOp1,         labels::kOp2,
                                      labels::kOp1InEq,     labels::kOperator,    labels::kOp2InEq,
                                      labels::kEquals,      labels::kResultFirst, labels::kResultSecond,
                                      labels::kAnswerFirst, labels::kAnswerSecond, labels::kFinal};
  for (int i = 0; i < 12; ++i)
    if (label == order[i]) return i;
  return 12;
}

std::string quoted(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out + "\"";
}

}  // namespace

std::string export_dot(const Circuit& circuit) {
  std::ostringstream os;
  os << "digraph circuit {\n  rankdir=BT;\n  node [shape=box, fontsize=10];\n";
  std::map<std::pair<int, std::string>, std::set<NodeId>> columns;
  for (const auto& m : circuit.members) {
    auto& col = columns[{label_rank(m.pos_label), m.pos_label}];
    col.insert(m.edge.src);
    col.insert(m.edge.dst);
  }
  std::size_t i = 0;
  for (const auto& [key, nodes] : columns) {
    os << "  subgraph cluster_" << i++ << " {\n    label=" << quoted(key.second) << ";\n";
    for (const auto& n : nodes) {
      os << "    " << quoted(key.second + "/" + n.name()) << " [label=" << quoted(n.name()) << "];\n";
    }
    os << "  }\n";
  }
  for (const auto& m : circuit.members) {
    os << "  " << quoted(m.pos_label + "/" + m.edge.src.name()) << " -> " << quoted(m.pos_label + "/" + m.edge.dst.name())
       << ";\n";
  }
  os << "}\n";
  return os.str();
}

nlohmann::json RunManifest::to_json() const {
  return {{"config_hash", config_hash}, {"seed", seed},         {"checkpoint_id", checkpoint_id},
          {"dataset_ids", dataset_ids}, {"commands", commands}, {"outputs", outputs}};
}

RunManifest RunManifest::from_json(const nlohmann::json& j) {
  RunManifest m;
  m.config_hash = j.at("config_hash").get<std::string>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.checkpoint_id = j.at("checkpoint_id").get<std::string>();
  m.dataset_ids = j.at("dataset_ids").get<std::map<std::string, std::string>>();
  m.commands = j.at("commands").get<std::vector<std::string>>();
  m.outputs = j.at("outputs").get<std::vector<std::string>>();
  return m;
}

std::string content_hash(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

std::string file_hash(const std::string& path) { return content_hash(read_file(path)); }

}  // namespace circuitlab
