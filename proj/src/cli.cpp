#include "circuitlab/cli.hpp"

#include <filesystem>
#include <iostream>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "circuitlab/checkpoint.hpp"
#include "circuitlab/circuits.hpp"
#include "circuitlab/interventions.hpp"
#include "circuitlab/io.hpp"
#include "circuitlab/patching.hpp"
#include "circuitlab/probes.hpp"
#include "circuitlab/report.hpp"
#include "circuitlab/tokenizer.hpp"
#include "circuitlab/trainer.hpp"

namespace circuitlab {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? sep : "") + parts[i];
  return out;
}

// Shell-style quoting for the command list in manifests.
std::string shell_quote(const std::string& s) {
  if (!s.empty() && s.find_first_of(" \t\n'\"\\$`*?;&|<>()") == std::string::npos) return s;
  std::string out = "'";
  for (char c : s) out += c == '\'' ? std::string("'\\''") : std::string(1, c);
  return out + "'";
}

std::vector<PromptPair> load_pairs(const std::vector<std::string>& paths) {
  std::vector<PromptPair> out;
  for (const auto& p : paths) {
    auto v = read_jsonl(p);
    out.insert(out.end(), v.begin(), v.end());
  }
  if (out.empty()) throw std::runtime_error("no pairs in " + join(paths, ","));
  return out;
}

Circuit load_circuit(const std::string& path) { return circuit_from_json(json::parse(read_file(path))); }

void write_json(const std::string& path, const json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

double parse_tau(const std::string& s) {
  if (auto slash = s.find('/'); slash != std::string::npos) {
    return std::stod(s.substr(0, slash)) / std::stod(s.substr(slash + 1));
  }
  return std::stod(s);
}

json accuracy_json(const AccuracyReport& r) {
  json per = json::array();
  for (const auto& t : r.per_template) per.push_back({{"template_id", t.template_id}, {"n", t.n}, {"accuracy", t.accuracy}});
  return {{"mean", r.mean}, {"stddev", r.stddev}, {"overall", r.overall}, {"n_pairs", r.n_pairs}, {"per_template", per}};
}

json delta_json(const AccuracyDelta& d) {
  return {{"before", d.before}, {"after", d.after}, {"delta", d.delta()}, {"n", d.n}};
}

struct Context {
  std::vector<std::string> argv;
  std::ostream& out;
  CLI::App* sub = nullptr;
  std::uint64_t seed = 0;
  std::string checkpoint_id;
  std::map<std::string, std::string> datasets;
  std::vector<std::string> outputs;

  void dataset(const std::string& path) { datasets[path] = file_hash(path); }
  void dataset(const std::vector<std::string>& paths) {
    for (const auto& p : paths) dataset(p);
  }
  Parameters checkpoint(const std::string& path) {
    if (path.empty()) throw std::runtime_error("a checkpoint path is required (--checkpoint)");
    if (!fs::exists(path)) throw std::runtime_error("checkpoint not found: " + path);
    Parameters p = load_checkpoint(path);
    checkpoint_id = p.fingerprint();
    return p;
  }

  json resolved_options() const {
    json j = json::object();
    for (const CLI::Option* opt : sub->get_options()) {
      if (opt->get_name() == "--help" || opt->get_lnames().empty()) continue;
      const std::string key = opt->get_lnames().front();
      if (key == "config") continue;
      const auto& res = opt->results();
      j[key] = res.empty() ? json(opt->get_default_str()) : json(join(res, ","));
    }
    return j;
  }

  void write_manifest(const std::string& path) {
    RunManifest m;
    m.config_hash = content_hash(resolved_options().dump());
    m.seed = seed;
    m.checkpoint_id = checkpoint_id;
    m.dataset_ids = datasets;
    std::vector<std::string> quoted;
    for (const auto& a : argv) quoted.push_back(shell_quote(a));
    m.commands = {join(quoted, " ")};
    m.outputs = outputs;
    write_json(path, m.to_json());
  }
};

// Turns a JSON config object into "--key value" arguments, skipping keys the
// command line already sets.
std::vector<std::string> config_args(const std::string& path, const std::set<std::string>& given) {
  const json j = json::parse(read_file(path));
  if (!j.is_object()) throw std::runtime_error("config file must hold a JSON object");
  std::vector<std::string> out;
  for (const auto& [key, value] : j.items()) {
    if (given.count(key)) continue;
    const std::string flag = "--" + key;
    if (value.is_boolean()) {
      if (value.get<bool>()) out.push_back(flag);
    } else if (value.is_array()) {
      std::vector<std::string> parts;
      for (const auto& v : value) parts.push_back(v.is_string() ? v.get<std::string>() : v.dump());
      out.push_back(flag);
      out.push_back(join(parts, ","));
    } else {
      out.push_back(flag);
      out.push_back(value.is_string() ? value.get<std::string>() : value.dump());
    }
  }
  return out;
}

}  // namespace

int cli_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Circuit discovery and intervention toolkit for arithmetic-error detection", "circuitlab"};
  app.require_subcommand(1);
  app.fallthrough(false);

  // Shared option storage.
  std::string config_path, checkpoint_path, out_path;
  std::uint64_t seed = 0;
  std::vector<std::string> data_paths;

  auto add_common = [&](CLI::App* s) {
    s->add_option("--config", config_path, "JSON file with defaults for any flag");
    s->add_option("--seed", seed, "run seed")->capture_default_str();
  };

  // gen
  std::string op = "add", template_sel = "all", error = "result";
  std::size_t n = 1000;
  bool computation = false;
  auto* gen = app.add_subcommand("gen", "generate clean/corrupt prompt pairs (JSONL)");
  add_common(gen);
  gen->add_option("--op", op, "add|sub|mul|div")->capture_default_str();
  gen->add_option("--template", template_sel, "1..8 or all")->capture_default_str();
  gen->add_option("--error", error, "result|answer|both|none")->capture_default_str();
  gen->add_option("--n", n, "pairs per template")->capture_default_str();
  gen->add_flag("--computation", computation, "emit computation pairs (cut after the equals sign)");
  gen->add_option("--out", out_path, "output JSONL")->required();

  // train
  TrainConfig tc;
  ModelConfig mc;
  mc.max_seq_len = 80;
  std::string init_path, loss_csv;
  auto* train_cmd = app.add_subcommand("train", "train the desk transformer");
  add_common(train_cmd);
  train_cmd->add_option("--data", data_paths, "training JSONL files")->delimiter(',')->required();
  train_cmd->add_option("--out", out_path, "checkpoint path")->required();
  train_cmd->add_option("--steps", tc.steps)->capture_default_str();
  train_cmd->add_option("--batch-size", tc.batch_size)->capture_default_str();
  train_cmd->add_option("--lr", tc.learning_rate)->capture_default_str();
  train_cmd->add_option("--warmup", tc.warmup_steps)->capture_default_str();
  train_cmd->add_option("--beta1", tc.beta1)->capture_default_str();
  train_cmd->add_option("--beta2", tc.beta2)->capture_default_str();
  train_cmd->add_option("--eps", tc.epsilon)->capture_default_str();
  train_cmd->add_option("--grad-clip", tc.grad_clip)->capture_default_str();
  train_cmd->add_option("--validation-weight", tc.validation_weight)->capture_default_str();
  train_cmd->add_option("--computation-weight", tc.computation_weight)->capture_default_str();
  train_cmd->add_option("--answer-weight", tc.answer_weight)->capture_default_str();
  train_cmd->add_option("--layers", mc.n_layers)->capture_default_str();
  train_cmd->add_option("--heads", mc.n_heads)->capture_default_str();
  train_cmd->add_option("--d-model", mc.d_model)->capture_default_str();
  train_cmd->add_option("--d-mlp", mc.d_mlp)->capture_default_str();
  train_cmd->add_option("--max-seq-len", mc.max_seq_len)->capture_default_str();
  train_cmd->add_option("--init", init_path, "start from this checkpoint");
  train_cmd->add_option("--loss-csv", loss_csv, "write the loss curve here");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "detection accuracy per template");
  add_common(eval_cmd);
  eval_cmd->add_option("--checkpoint", checkpoint_path);
  eval_cmd->add_option("--data", data_paths)->delimiter(',')->required();
  eval_cmd->add_option("--out", out_path, "JSON report (default: stdout)");

  // eap
  bool filter = false;
  std::string abs_mode = "abs_then_mean";
  std::size_t max_pairs = 0;
  auto* eap_cmd = app.add_subcommand("eap", "edge attribution patching scores");
  add_common(eap_cmd);
  eap_cmd->add_option("--checkpoint", checkpoint_path);
  eap_cmd->add_option("--data", data_paths)->delimiter(',')->required();
  eap_cmd->add_option("--out", out_path)->required();
  eap_cmd->add_flag("--filter", filter, "drop pairs the model misclassifies");
  eap_cmd->add_option("--max-pairs", max_pairs, "use at most this many pairs (0: all)")->capture_default_str();
  eap_cmd->add_option("--abs-mode", abs_mode, "abs_then_mean|mean_then_abs")->capture_default_str();

  // search
  SearchConfig sc;
  std::string table_path;
  auto* search_cmd = app.add_subcommand("search", "faithfulness-banded minimal circuit search");
  add_common(search_cmd);
  search_cmd->add_option("--checkpoint", checkpoint_path);
  search_cmd->add_option("--table", table_path)->required();
  search_cmd->add_option("--data", data_paths, "held-out pairs")->delimiter(',')->required();
  search_cmd->add_option("--out", out_path)->required();
  search_cmd->add_option("--k", sc.k)->capture_default_str();
  search_cmd->add_option("--n", sc.n)->capture_default_str();
  search_cmd->add_option("--band-lo", sc.band_lo)->capture_default_str();
  search_cmd->add_option("--band-hi", sc.band_hi)->capture_default_str();
  search_cmd->add_option("--eval-pairs", sc.eval_pairs)->capture_default_str();
  search_cmd->add_option("--max-edges", sc.max_edges)->capture_default_str();
  search_cmd->add_flag("--filter", filter, "drop pairs the model misclassifies");

  // intersect
  std::vector<std::string> circuit_paths;
  std::string tau_text = "1";
  auto* inter_cmd = app.add_subcommand("intersect", "soft intersection of template circuits");
  add_common(inter_cmd);
  inter_cmd->add_option("--circuits", circuit_paths)->delimiter(',')->required();
  inter_cmd->add_option("--tau", tau_text, "membership threshold, e.g. 5/8")->capture_default_str();
  inter_cmd->add_option("--out", out_path)->required();

  // overlap
  std::string a_path, b_path;
  auto* overlap_cmd = app.add_subcommand("overlap", "IoU and IoM of two circuits");
  add_common(overlap_cmd);
  overlap_cmd->add_option("--a", a_path)->required();
  overlap_cmd->add_option("--b", b_path)->required();
  overlap_cmd->add_option("--out", out_path);

  // patch-heads
  std::string heads_text, source_sel = "single-error";
  double alpha = 3.1;
  auto* patch_cmd = app.add_subcommand("patch-heads", "scaled attention-pattern patching");
  add_common(patch_cmd);
  patch_cmd->add_option("--checkpoint", checkpoint_path);
  patch_cmd->add_option("--data", data_paths, "target pairs")->delimiter(',')->required();
  patch_cmd->add_option("--heads", heads_text, "e.g. L1H2,L0H3")->required();
  patch_cmd->add_option("--alpha", alpha)->capture_default_str();
  patch_cmd->add_option("--source", source_sel, "single-error|answer-error|consistent-error|self")->capture_default_str();
  patch_cmd->add_option("--out", out_path);

  // bridge
  std::vector<std::string> single_paths;
  ResidualLocus src{2, labels::kResultFirst}, dst{1, labels::kResultSecond};
  double scale = 1.0;
  auto* bridge_cmd = app.add_subcommand("bridge", "residual-stream bridging");
  add_common(bridge_cmd);
  bridge_cmd->add_option("--checkpoint", checkpoint_path);
  bridge_cmd->add_option("--consistent", data_paths, "consistent-error pairs")->delimiter(',')->required();
  bridge_cmd->add_option("--single", single_paths, "single-error pairs")->delimiter(',')->required();
  bridge_cmd->add_option("--src-layer", src.layer)->capture_default_str();
  bridge_cmd->add_option("--src-pos", src.pos_label)->capture_default_str();
  bridge_cmd->add_option("--dst-layer", dst.layer)->capture_default_str();
  bridge_cmd->add_option("--dst-pos", dst.pos_label)->capture_default_str();
  bridge_cmd->add_option("--scale", scale)->capture_default_str();
  bridge_cmd->add_option("--out", out_path);

  // probe
  ProbeConfig pc;
  std::vector<std::string> test_paths, positions{labels::kEquals, labels::kResultFirst, labels::kResultSecond,
                                                 labels::kAnswerSecond};
  std::string layers_text = "all", grid_json;
  auto* probe_cmd = app.add_subcommand("probe", "linear probes on residual states");
  add_common(probe_cmd);
  probe_cmd->add_option("--checkpoint", checkpoint_path);
  probe_cmd->add_option("--train", data_paths)->delimiter(',')->required();
  probe_cmd->add_option("--test", test_paths)->delimiter(',')->required();
  probe_cmd->add_option("--layers", layers_text, "all or comma-separated residual indices")->capture_default_str();
  probe_cmd->add_option("--positions", positions)->delimiter(',')->capture_default_str();
  probe_cmd->add_option("--lr", pc.learning_rate)->capture_default_str();
  probe_cmd->add_option("--epochs", pc.epochs)->capture_default_str();
  probe_cmd->add_option("--batch-size", pc.batch_size)->capture_default_str();
  probe_cmd->add_option("--out", out_path, "grid CSV")->required();
  probe_cmd->add_option("--out-json", grid_json, "grid JSON");

  // report
  std::string out_dir;
  std::vector<std::string> accuracy_paths;
  auto* report_cmd = app.add_subcommand("report", "tau sweep, DOT graphs and accuracy tables");
  add_common(report_cmd);
  report_cmd->add_option("--checkpoint", checkpoint_path);
  report_cmd->add_option("--circuits", circuit_paths, "one circuit per template")->delimiter(',')->required();
  report_cmd->add_option("--data", data_paths, "held-out pairs, one file per template")->delimiter(',')->required();
  report_cmd->add_option("--accuracy-data", accuracy_paths, "pairs for accuracy tables")->delimiter(',');
  report_cmd->add_option("--out-dir", out_dir)->required();

  // Config-file defaults go first; command-line flags are never overridden.
  std::vector<std::string> argv = args;
  for (std::size_t i = 1; i + 1 < argv.size(); ++i) {
    if (argv[i] != "--config") continue;
    std::set<std::string> given;
    for (const auto& a : argv)
      if (a.rfind("--", 0) == 0) given.insert(a.substr(2, a.find('=') == std::string::npos ? std::string::npos : a.find('=') - 2));
    try {
      const auto extra = config_args(argv[i + 1], given);
      argv.insert(argv.begin() + 2, extra.begin(), extra.end());
    } catch (const std::exception& e) {
      err << "error: " << e.what() << "\n";
      return 1;
    }
    break;
  }

  std::vector<std::string> rev(argv.rbegin(), argv.rend() - 1);
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    const CLI::App* target = &app;
    for (auto* s : app.get_subcommands()) target = s;
    out << target->help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    const CLI::App* target = &app;
    for (auto* s : app.get_subcommands()) target = s;
    err << "error: " << e.what() << "\n" << target->help();
    return 2;
  }

  Context ctx{args, out, nullptr, 0, {}, {}, {}};
  ctx.sub = app.get_subcommands().front();
  ctx.seed = seed;
  const std::string cmd = ctx.sub->get_name();
  try {
    if (cmd == "gen") {
      const Operation operation = parse_operation(op);
      const ErrorType et = parse_error_type(error);
      std::vector<int> ids;
      if (template_sel == "all") {
        for (int i = 1; i <= 8; ++i) ids.push_back(i);
      } else {
        ids.push_back(std::stoi(template_sel));
      }
      std::vector<PromptPair> pairs;
      for (int id : ids) {
        auto v = generate_pairs(get_template(operation, id), n, et, seed);
        if (computation) v = make_computation_pairs(v, seed);
        pairs.insert(pairs.end(), v.begin(), v.end());
      }
      write_jsonl(out_path, pairs);
      ctx.outputs.push_back(out_path);
      out << "wrote " << pairs.size() << " pairs to " << out_path << "\n";
      ctx.write_manifest(out_path + ".manifest.json");
    } else if (cmd == "train") {
      const auto data = load_pairs(data_paths);
      ctx.dataset(data_paths);
      tc.seed = seed;
      Parameters init;
      if (!init_path.empty()) {
        init = ctx.checkpoint(init_path);
      } else {
        mc.vocab_size = Tokenizer::standard().size();
        mc.d_head = mc.n_heads == 0 ? 0 : mc.d_model / mc.n_heads;
        mc.seed = seed;
        init = init_model(mc);
      }
      const auto result = train(init, data, tc, [&](const LossPoint& p) {
        out << "step " << p.step << " loss " << p.loss << "\n";
      });
      save_checkpoint(out_path, result.params);
      ctx.checkpoint_id = result.params.fingerprint();
      ctx.outputs.push_back(out_path);
      if (!loss_csv.empty()) {
        write_file_atomic(loss_csv, loss_curve_csv(result.curve));
        ctx.outputs.push_back(loss_csv);
      }
      ctx.write_manifest(out_path + ".manifest.json");
    } else if (cmd == "eval") {
      const Parameters params = ctx.checkpoint(checkpoint_path);
      const auto data = load_pairs(data_paths);
      ctx.dataset(data_paths);
      const json j = accuracy_json(evaluate_detection_accuracy(params, data));
      if (out_path.empty()) {
        out << j.dump(2) << "\n";
      } else {
        write_json(out_path, j);
        ctx.outputs.push_back(out_path);
        ctx.write_manifest(out_path + ".manifest.json");
      }
    } else if (cmd == "eap") {
      const Parameters params = ctx.checkpoint(checkpoint_path);
      auto data = load_pairs(data_paths);
      ctx.dataset(data_paths);
      if (filter) data = filter_correct(params, data);
      if (max_pairs > 0 && data.size() > max_pairs) data.resize(max_pairs);
      if (data.empty()) throw std::runtime_error("no pairs left after filtering");
      if (abs_mode != "abs_then_mean" && abs_mode != "mean_then_abs") throw std::runtime_error("unknown --abs-mode " + abs_mode);
      AttributionTable table =
          eap_scores(params, data, abs_mode == "abs_then_mean" ? AbsMode::AbsThenMean : AbsMode::MeanThenAbs);
      table.seed = seed;
      write_json(out_path, to_json(table, ComputationGraph(params.config)));
      ctx.outputs.push_back(out_path);
      out << "scored " << table.scores.size() << " edge instances over " << table.n_pairs << " pairs\n";
      ctx.write_manifest(out_path + ".manifest.json");
    } else if (cmd == "search") {
      const Parameters params = ctx.checkpoint(checkpoint_path);
      const ComputationGraph graph(params.config);
      const AttributionTable table = attribution_from_json(json::parse(read_file(table_path)), graph);
      ctx.dataset(table_path);
      auto data = load_pairs(data_paths);
      ctx.dataset(data_paths);
      if (filter) data = filter_correct(params, data);
      const SearchResult r = search_minimal_circuit(table, params, data, sc);
      json j = to_json(r.circuit);
      json traj = json::array();
      for (const auto& s : r.trajectory) traj.push_back({{"size", s.size}, {"faithfulness", s.faithfulness}});
      j["search"] = {{"faithfulness", r.faithfulness}, {"in_band", r.in_band}, {"trajectory", traj},
                     {"edge_instances", table.scores.size()}};
      write_json(out_path, j);
      ctx.outputs.push_back(out_path);
      out << "circuit with " << r.circuit.size() << " members, faithfulness " << r.faithfulness
          << (r.in_band ? "" : " (outside band, flagged)") << "\n";
      ctx.write_manifest(out_path + ".manifest.json");
    } else if (cmd == "intersect") {
      std::vector<Circuit> circuits;
      for (const auto& p : circuit_paths) {
        circuits.push_back(load_circuit(p));
        ctx.dataset(p);
      }
      const Circuit c = soft_intersection(circuits, parse_tau(tau_text));
      write_json(out_path, to_json(c));
      ctx.outputs.push_back(out_path);
      out << "soft intersection has " << c.size() << " members\n";
      ctx.write_manifest(out_path + ".manifest.json");
    } else if (cmd == "overlap") {
      const Overlap o = overlap(load_circuit(a_path), load_circuit(b_path));
      ctx.dataset(a_path);
      ctx.dataset(b_path);
      const json j = {{"iou", o.iou}, {"iom", o.iom}};
      if (out_path.empty()) {
        out << j.dump(2) << "\n";
      } else {
        write_json(out_path, j);
        ctx.outputs.push_back(out_path);
        ctx.write_manifest(out_path + ".manifest.json");
      }
    } else if (cmd == "patch-heads") {
      const Parameters params = ctx.checkpoint(checkpoint_path);
      const auto targets = load_pairs(data_paths);
      ctx.dataset(data_paths);
      std::vector<std::vector<int>> sources;
      for (const auto& p : targets) {
        if (source_sel == "single-error") {
          sources.push_back(single_error_variant(p, ErrorType::Result));
        } else if (source_sel == "answer-error") {
          sources.push_back(single_error_variant(p, ErrorType::Answer));
        } else if (source_sel == "consistent-error") {
          const auto& a = p.assignment;
          sources.push_back(render(get_template(p.operation, p.template_id), a, a.wrong, a.wrong));
        } else if (source_sel == "self") {
          sources.push_back(p.clean_tokens);
        } else {
          throw std::runtime_error("unknown --source " + source_sel);
        }
      }
      const auto heads = parse_head_list(heads_text);
      const HeadPatchReport r = patch_heads_eval(params, targets, sources, heads, alpha);
      std::vector<std::string> names;
      for (const auto& h : heads) names.push_back(h.name());
      const json j = {{"heads", names},
                      {"alpha", alpha},
                      {"source", source_sel},
                      {"pair_accuracy", delta_json(r.pair_accuracy)},
                      {"detection_rate", delta_json(r.detection_rate)}};
      if (out_path.empty()) {
        out << j.dump(2) << "\n";
      } else {
        write_json(out_path, j);
        ctx.outputs.push_back(out_path);
        ctx.write_manifest(out_path + ".manifest.json");
      }
    } else if (cmd == "bridge") {
      const Parameters params = ctx.checkpoint(checkpoint_path);
      const auto consistent = load_pairs(data_paths);
      const auto single = load_pairs(single_paths);
      ctx.dataset(data_paths);
      ctx.dataset(single_paths);
      const BridgeReport r = residual_bridge_eval(params, consistent, single, src, dst, scale);
      const json j = {{"src", {{"layer", src.layer}, {"pos_label", src.pos_label}}},
                      {"dst", {{"layer", dst.layer}, {"pos_label", dst.pos_label}}},
                      {"scale", scale},
                      {"consistent", delta_json(r.consistent)},
                      {"single", delta_json(r.single)}};
      if (out_path.empty()) {
        out << j.dump(2) << "\n";
      } else {
        write_json(out_path, j);
        ctx.outputs.push_back(out_path);
        ctx.write_manifest(out_path + ".manifest.json");
      }
    } else if (cmd == "probe") {
      const Parameters params = ctx.checkpoint(checkpoint_path);
      const auto train_pairs = load_pairs(data_paths);
      const auto test_pairs = load_pairs(test_paths);
      ctx.dataset(data_paths);
      ctx.dataset(test_paths);
      pc.seed = seed;
      ProbeGrid grid = probe_layer_sweep(params, train_pairs, test_pairs, positions, pc);
      if (layers_text != "all") {
        std::vector<std::size_t> keep;
        std::stringstream ss(layers_text);
        std::string item;
        while (std::getline(ss, item, ',')) keep.push_back(std::stoul(item));
        ProbeGrid sub = grid;
        sub.accuracy.clear();
        sub.train_accuracy.clear();
        for (std::size_t l : keep) {
          if (l >= grid.n_states) throw std::runtime_error("probe layer out of range");
          sub.accuracy.push_back(grid.accuracy[l]);
          sub.train_accuracy.push_back(grid.train_accuracy[l]);
        }
        sub.n_states = keep.size();
        grid = sub;
      }
      write_file_atomic(out_path, grid.to_csv());
      ctx.outputs.push_back(out_path);
      if (!grid_json.empty()) {
        write_json(grid_json, grid.to_json());
        ctx.outputs.push_back(grid_json);
      }
      ctx.write_manifest(out_path + ".manifest.json");
    } else if (cmd == "report") {
      const Parameters params = ctx.checkpoint(checkpoint_path);
      fs::create_directories(out_dir);
      std::vector<Circuit> circuits;
      for (const auto& p : circuit_paths) {
        circuits.push_back(load_circuit(p));
        ctx.dataset(p);
      }
      std::map<int, std::vector<PromptPair>> by_template;
      for (const auto& p : load_pairs(data_paths)) by_template[p.template_id].push_back(p);
      ctx.dataset(data_paths);
      const auto rows = tau_sweep_report(params, circuits, by_template);
      const std::string dir = fs::path(out_dir).string();
      write_file_atomic(dir + "/tau_sweep.csv", tau_sweep_csv(rows));
      write_json(dir + "/tau_sweep.json", to_json(rows));
      ctx.outputs.push_back(dir + "/tau_sweep.csv");
      ctx.outputs.push_back(dir + "/tau_sweep.json");
      for (std::size_t i = 0; i < circuits.size(); ++i) {
        const std::string dot = dir + "/circuit_" + std::to_string(i + 1) + ".dot";
        write_file_atomic(dot, export_dot(circuits[i]));
        ctx.outputs.push_back(dot);
      }
      std::ostringstream md;
      md << "# Circuit report\n\nCheckpoint: `" << checkpoint_path << "` (" << ctx.checkpoint_id << ")\n\n";
      for (const auto& r : rows) {
        if (!r.best) continue;
        const Circuit best = soft_intersection(circuits, r.tau);
        write_file_atomic(dir + "/best_balance.dot", export_dot(best));
        write_json(dir + "/best_balance.json", to_json(best));
        ctx.outputs.push_back(dir + "/best_balance.dot");
        ctx.outputs.push_back(dir + "/best_balance.json");
      }
      md << "## Soft intersection sweep\n\n| tau | edges | faithfulness | |\n|---|---|---|---|\n";
      for (const auto& r : rows) {
        md << "| " << r.numerator << "/" << rows.size() << " | " << r.edges << " | " << r.mean_faithfulness << " ± "
           << r.std_faithfulness << " | " << (r.best ? "best balance" : "") << " |\n";
      }
      if (!accuracy_paths.empty()) {
        const auto acc = evaluate_detection_accuracy(params, load_pairs(accuracy_paths));
        ctx.dataset(accuracy_paths);
        write_json(dir + "/accuracy.json", accuracy_json(acc));
        ctx.outputs.push_back(dir + "/accuracy.json");
        md << "\n## Detection accuracy\n\n" << acc.mean << " ± " << acc.stddev << " (pooled " << acc.overall << ", "
           << acc.n_pairs << " pairs)\n";
      }
      md << "\n## Inputs\n\n";
      std::vector<std::string> inputs = circuit_paths;
      inputs.insert(inputs.end(), data_paths.begin(), data_paths.end());
      inputs.insert(inputs.end(), accuracy_paths.begin(), accuracy_paths.end());
      inputs.push_back(checkpoint_path);
      for (const auto& p : inputs) {
        md << "- `" << p << "`";
        if (fs::exists(p + ".manifest.json")) md << " (manifest `" << p << ".manifest.json`)";
        md << "\n";
      }
      md << "\n## Outputs\n\n";
      for (const auto& o : ctx.outputs) md << "- `" << o << "`\n";
      write_file_atomic(dir + "/report.md", md.str());
      ctx.outputs.push_back(dir + "/report.md");
      ctx.write_manifest(dir + "/manifest.json");
      out << "report written to " << dir << "/report.md\n";
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace circuitlab
