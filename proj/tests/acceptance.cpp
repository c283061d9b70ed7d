// Acceptance suite: one PASS/FAIL line per criterion, details indented below.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "circuitlab/checkpoint.hpp"
#include "circuitlab/circuits.hpp"
#include "circuitlab/gradcheck.hpp"
#include "circuitlab/interventions.hpp"
#include "circuitlab/io.hpp"
#include "circuitlab/patching.hpp"
#include "circuitlab/probes.hpp"
#include "circuitlab/report.hpp"
#include "circuitlab/trainer.hpp"
#include "gradcases.hpp"
#include "helpers.hpp"

using namespace circuitlab;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

struct Outcome {
  std::string id;
  std::string title;
  bool pass = false;
  bool gating = true;
  std::vector<std::string> details;
};

void note(Outcome& o, const std::string& line) {
  o.details.push_back(line);
  std::cerr << "  [" << o.id << "] " << line << std::endl;
}

std::vector<PromptPair> pairs_for(const std::vector<int>& template_ids, std::size_t n, ErrorType e, std::uint64_t seed) {
  std::vector<PromptPair> out;
  for (int id : template_ids) {
    auto v = generate_pairs(get_template(Operation::Add, id), n, e, seed);
    out.insert(out.end(), v.begin(), v.end());
  }
  return out;
}

const std::vector<int> kAllTemplates{1, 2, 3, 4, 5, 6, 7, 8};

double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

// ---------------------------------------------------------------------------
// 1. gradients

// Reverse-mode parameter gradients of sum(logits * w) against central
// differences of the same function evaluated with run_logits.
double model_gradcheck(Rng& rng) {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_head = 4;
  c.d_mlp = 16;
  c.vocab_size = 11;
  c.max_seq_len = 6;
  c.seed = rng();
  Parameters p = init_model(c);
  p.visit([&](const std::string&, Tensor& t) {
    for (double& x : t.values()) x = 0.6 * standard_normal(rng);
  });
  std::vector<int> tokens(5);
  for (int& tk : tokens) tk = static_cast<int>(uniform_int(rng, 0, 10));
  const Tensor w = testutil::random_tensor({5, 11}, rng);
  auto objective = [&](const Parameters& q) {
    const Tensor l = run_logits(q, tokens);
    double s = 0.0;
    for (std::size_t i = 0; i < l.numel(); ++i) s += l[i] * w[i];
    return s;
  };

  Trace t = trace(p, tokens);
  const Tensor seed(t.tape.value(t.logits).shape(), std::vector<double>(w.values().begin(), w.values().end()));
  const Gradients g = t.tape.backward(t.logits, seed, t.params);

  std::vector<Tensor*> tensors;
  p.visit([&](const std::string&, Tensor& x) { tensors.push_back(&x); });
  const double step = 1e-5;
  const double floor = std::max(1e-6, 1e-5 * std::abs(objective(p)));
  double worst = 0.0;
  for (std::size_t k = 0; k < tensors.size(); ++k) {
    const Tensor& analytic = g[t.params[k]];
    for (std::size_t i = 0; i < tensors[k]->numel(); ++i) {
      const double orig = (*tensors[k])[i];
      (*tensors[k])[i] = orig + step;
      const double up = objective(p);
      (*tensors[k])[i] = orig - step;
      const double down = objective(p);
      (*tensors[k])[i] = orig;
      const double fd = (up - down) / (2.0 * step);
      const double rel = std::abs(fd - analytic[i]) / std::max({std::abs(fd), std::abs(analytic[i]), floor});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

Outcome criterion_gradients() {
  Outcome o{"1", "gradient soundness"};
  const auto t0 = Clock::now();
  Rng rng(101);
  double worst_prim = 0.0;
  std::string worst_name;
  for (const auto& c : testutil::primitive_cases()) {
    auto body = c.body;
    Program p = [body](Tape& t, const NamedVars& in) {
      return NamedVars{{"y", testutil::scalarize(t, body(t, in), in.at("w"))}};
    };
    for (int trial = 0; trial < 100; ++trial) {
      const double e = finite_difference_check(p, c.point(rng), 1e-5).max_relative_error;
      if (e > worst_prim) {
        worst_prim = e;
        worst_name = c.name;
      }
    }
  }
  note(o, "primitives: " + std::to_string(testutil::primitive_cases().size()) + " ops x 100 trials, worst " +
              fmt("%.2e", worst_prim) + " (" + worst_name + ")");
  double worst_model = 0.0;
  for (int trial = 0; trial < 100; ++trial) worst_model = std::max(worst_model, model_gradcheck(rng));
  note(o, "random 2-layer transformer, all parameters, 100 trials: worst " + fmt("%.2e", worst_model));
  const double secs = seconds_since(t0);
  note(o, "runtime " + fmt("%.1f", secs) + " s (limit 30 s)");
  o.pass = worst_prim < 1e-4 && worst_model < 1e-4 && secs < 30.0;
  return o;
}

// ---------------------------------------------------------------------------
// 2. EAP on the linear surrogate

Outcome criterion_linear_eap() {
  Outcome o{"2", "EAP exactness on a linear surrogate"};
  ModelConfig c;
  c.vocab_size = Tokenizer::standard().size();
  c.max_seq_len = 80;
  c.linear = true;
  c.seed = 202;
  Parameters p = init_model(c);
  for (auto& L : p.layers) {
    for (auto& w : L.w_o)
      for (double& x : w.values()) x *= 4.0;
    for (double& x : L.w_out.values()) x *= 4.0;
  }
  const ComputationGraph g(c);
  Rng rng(202);
  double worst = 0.0, largest = 0.0;
  for (int i = 0; i < 50; ++i) {
    const int tid = static_cast<int>(uniform_int(rng, 1, 8));
    const ErrorType e = uniform_int(rng, 0, 1) ? ErrorType::Result : ErrorType::Answer;
    const PromptPair pr = generate_pairs(get_template(Operation::Add, tid), 1, e, 202 + static_cast<std::uint64_t>(i))[0];
    const MetricSpec m = metric_for(pr);
    const auto scores = eap_pair_scores(p, pr, m);
    const std::size_t T = pr.clean_tokens.size();
    const std::size_t edge = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(g.num_edges()) - 1));
    const std::size_t lo = pr.position_labels.at(labels::kResultFirst);
    const std::size_t pos = static_cast<std::size_t>(uniform_int(rng, static_cast<std::int64_t>(lo), static_cast<std::int64_t>(T) - 1));
    const double exact = exact_patch_effect(p, pr, edge, pos, m);
    worst = std::max(worst, std::abs(scores[edge * T + pos] - exact));
    largest = std::max(largest, std::abs(exact));
  }
  note(o, "50 instances, max |EAP - exact| = " + fmt("%.2e", worst) + ", largest |effect| " + fmt("%.3g", largest));
  o.pass = worst < 1e-6;
  return o;
}

// ---------------------------------------------------------------------------
// 5 and 6. set laws

Circuit random_circuit(Rng& rng, const std::vector<Edge>& edges, double density) {
  static const char* const pos[] = {labels::kEquals, labels::kResultFirst, labels::kAnswerSecond, labels::kFinal};
  Circuit c;
  c.model_fingerprint = "family";
  for (std::size_t e = 0; e < 24; ++e)
    for (const char* p : pos)
      if (uniform01(rng) < density) c.members.insert({edges[e], p});
  return c;
}

Outcome criterion_soft_intersection() {
  Outcome o{"5", "soft-intersection laws"};
  ComputationGraph g(testutil::small_config(2, 2));
  Rng rng(505);
  std::size_t bad_union = 0, bad_inter = 0, bad_mono = 0, bad_count = 0;
  for (int fam = 0; fam < 1000; ++fam) {
    std::vector<Circuit> cs;
    const double density = 0.2 + 0.6 * uniform01(rng);
    for (int i = 0; i < 8; ++i) cs.push_back(random_circuit(rng, g.edges(), density));
    std::set<CircuitMember> uni, inter = cs[0].members;
    std::map<CircuitMember, int> count;
    for (const auto& c : cs) {
      uni.insert(c.members.begin(), c.members.end());
      std::set<CircuitMember> next;
      std::set_intersection(inter.begin(), inter.end(), c.members.begin(), c.members.end(), std::inserter(next, next.end()));
      inter = next;
      for (const auto& m : c.members) ++count[m];
    }
    if (soft_intersection(cs, 1.0 / 8.0).members != uni) ++bad_union;
    if (soft_intersection(cs, 1.0).members != inter) ++bad_inter;
    std::set<CircuitMember> prev = uni;
    for (int k = 1; k <= 8; ++k) {
      const auto cur = soft_intersection(cs, k / 8.0).members;
      if (!std::includes(prev.begin(), prev.end(), cur.begin(), cur.end())) ++bad_mono;
      // membership fraction oracle
      std::set<CircuitMember> expect;
      for (const auto& [m, n] : count)
        if (n >= k) expect.insert(m);
      if (cur != expect) ++bad_count;
      prev = cur;
    }
  }
  note(o, "1000 families of 8: union mismatches " + std::to_string(bad_union) + ", intersection mismatches " +
              std::to_string(bad_inter) + ", non-nested steps " + std::to_string(bad_mono) + ", count-oracle mismatches " +
              std::to_string(bad_count));
  o.pass = bad_union == 0 && bad_inter == 0 && bad_mono == 0 && bad_count == 0;
  return o;
}

Outcome criterion_overlap() {
  Outcome o{"6", "overlap identities"};
  ComputationGraph g(testutil::small_config(2, 2));
  const auto& e = g.edges();
  Circuit abc, bc;
  abc.model_fingerprint = bc.model_fingerprint = "family";
  for (std::size_t i : {0, 1, 2}) abc.members.insert({e[i], labels::kFinal});
  for (std::size_t i : {1, 2}) bc.members.insert({e[i], labels::kFinal});
  const Overlap ex = overlap(abc, bc);
  note(o, "{a,b,c} vs {b,c}: IoU " + fmt("%.6f", ex.iou) + ", IoM " + fmt("%.6f", ex.iom));
  bool ok = std::abs(ex.iou - 2.0 / 3.0) < 1e-12 && ex.iom == 1.0;

  Rng rng(606);
  std::size_t bad_self = 0, bad_order = 0, bad_oracle = 0;
  for (int i = 0; i < 1000; ++i) {
    Circuit a = random_circuit(rng, e, 0.3), b = random_circuit(rng, e, 0.1 + 0.5 * uniform01(rng));
    if (a.empty() || b.empty()) continue;
    const Overlap self = overlap(a, a);
    if (self.iou != 1.0 || self.iom != 1.0) ++bad_self;
    const Overlap ab = overlap(a, b);
    if (ab.iou > ab.iom) ++bad_order;
    std::set<CircuitMember> in, un;
    std::set_intersection(a.members.begin(), a.members.end(), b.members.begin(), b.members.end(), std::inserter(in, in.end()));
    std::set_union(a.members.begin(), a.members.end(), b.members.begin(), b.members.end(), std::inserter(un, un.end()));
    const double iou = static_cast<double>(in.size()) / static_cast<double>(un.size());
    const double iom = static_cast<double>(in.size()) / static_cast<double>(std::min(a.size(), b.size()));
    if (std::abs(ab.iou - iou) > 1e-12 || std::abs(ab.iom - iom) > 1e-12) ++bad_oracle;
  }
  note(o, "1000 random pairs: self-overlap failures " + std::to_string(bad_self) + ", IoU > IoM " +
              std::to_string(bad_order) + ", oracle mismatches " + std::to_string(bad_oracle));
  o.pass = ok && bad_self == 0 && bad_order == 0 && bad_oracle == 0;
  return o;
}

// ---------------------------------------------------------------------------
// desk model

struct Desk {
  Parameters params;
  std::uint64_t seed = 0;
  double train_seconds = 0.0;
  double single_accuracy = 0.0;
  std::vector<PromptPair> held_single;
};

// Training prompts with the same clean text as a held-out prompt are dropped
// from the held-out side.
std::vector<PromptPair> without_overlap(const std::vector<PromptPair>& held, const std::vector<PromptPair>& train) {
  std::set<std::vector<int>> seen;
  for (const auto& p : train) seen.insert(p.clean_tokens);
  std::vector<PromptPair> out;
  for (const auto& p : held)
    if (!seen.count(p.clean_tokens)) out.push_back(p);
  return out;
}

Desk train_desk(std::uint64_t seed, const fs::path& artifacts, Outcome& o) {
  Desk d;
  d.seed = seed;
  auto train_set = pairs_for(kAllTemplates, 500, ErrorType::Result, seed);
  auto more = pairs_for(kAllTemplates, 500, ErrorType::Answer, seed);
  train_set.insert(train_set.end(), more.begin(), more.end());
  auto held = pairs_for(kAllTemplates, 60, ErrorType::Result, 1000 + seed);
  more = pairs_for(kAllTemplates, 60, ErrorType::Answer, 1000 + seed);
  held.insert(held.end(), more.begin(), more.end());
  d.held_single = without_overlap(held, train_set);

  ModelConfig mc;
  mc.vocab_size = Tokenizer::standard().size();
  mc.max_seq_len = 80;
  mc.seed = seed;
  TrainConfig tc;
  tc.seed = seed;
  tc.log_every = 500;
  const auto t0 = Clock::now();
  auto result = train(init_model(mc), train_set, tc, [&](const LossPoint& p) {
    std::cerr << "    seed " << seed << " step " << p.step << " loss " << p.loss << std::endl;
  });
  d.train_seconds = seconds_since(t0);
  d.params = std::move(result.params);
  d.single_accuracy = evaluate_detection_accuracy(d.params, d.held_single).overall;
  save_checkpoint((artifacts / ("desk_seed" + std::to_string(seed) + ".json")).string(), d.params);
  write_file_atomic((artifacts / ("loss_seed" + std::to_string(seed) + ".csv")).string(), loss_curve_csv(result.curve));
  note(o, "seed " + std::to_string(seed) + ": " + std::to_string(tc.steps) + " steps in " + fmt("%.0f", d.train_seconds) +
              " s, held-out single-error pair accuracy " + fmt("%.2f", d.single_accuracy) + "% over " +
              std::to_string(d.held_single.size()) + " pairs");
  return d;
}

struct Discovery {
  AttributionTable table;
  std::vector<PromptPair> eap_pairs;
  std::vector<PromptPair> held;
  SearchResult search;
  double seconds = 0.0;
};

Discovery discover(const Parameters& params, int template_id, std::uint64_t seed, std::size_t n_eap) {
  Discovery d;
  const auto t0 = Clock::now();
  const Template& t = get_template(Operation::Add, template_id);
  auto pool = filter_correct(params, generate_pairs(t, n_eap + n_eap / 2, ErrorType::Result, seed));
  if (pool.size() > n_eap) pool.resize(n_eap);
  d.eap_pairs = pool;
  d.held = filter_correct(params, generate_pairs(t, 60, ErrorType::Result, seed + 1));
  d.table = eap_scores(params, d.eap_pairs);
  d.search = search_minimal_circuit(d.table, params, d.held, SearchConfig{});
  d.seconds = seconds_since(t0);
  return d;
}

// ---------------------------------------------------------------------------
// 3. EAP fidelity

Outcome criterion_eap_fidelity(const Parameters& params) {
  Outcome o{"3", "EAP fidelity on the desk model"};
  const auto t0 = Clock::now();
  const Template& t = get_template(Operation::Add, 1);
  auto pairs = filter_correct(params, generate_pairs(t, 150, ErrorType::Result, 3003));
  if (pairs.size() > 100) pairs.resize(100);
  const AttributionTable table = eap_scores(params, pairs);
  const auto order = table.ranked();
  std::vector<double> eap, exact;
  for (std::size_t i = 0; i < 200; ++i) {
    const std::size_t e = order[i] / table.seq_len, pos = order[i] % table.seq_len;
    double s = 0.0;
    for (const auto& p : pairs) s += std::abs(exact_patch_effect(params, p, e, pos, metric_for(p)));
    eap.push_back(table.scores[order[i]]);
    exact.push_back(s / static_cast<double>(pairs.size()));
  }
  const double rho = spearman(eap, exact);
  const double secs = seconds_since(t0);
  note(o, std::to_string(pairs.size()) + " correctly classified pairs, top-200 instances: Spearman " + fmt("%.4f", rho));
  note(o, "runtime " + fmt("%.1f", secs) + " s (limit 300 s)");
  o.pass = pairs.size() == 100 && rho >= 0.8 && secs < 300.0;
  return o;
}

// ---------------------------------------------------------------------------
// 4. faithfulness machinery

Outcome criterion_faithfulness(const Parameters& params, const Discovery& disc) {
  Outcome o{"4", "faithfulness machinery"};
  const ComputationGraph g(params.config);
  double worst_full = 0.0, worst_empty = 0.0;
  for (int id : kAllTemplates) {
    auto pairs = filter_correct(params, generate_pairs(get_template(Operation::Add, id), 20, ErrorType::Result, 4004));
    const FaithfulnessEvaluator ev(params, pairs);
    const Circuit full = full_circuit(g, pairs[0].position_labels, params.fingerprint(), "add/validation");
    Circuit empty;
    empty.model_fingerprint = params.fingerprint();
    worst_full = std::max(worst_full, std::abs(ev.evaluate(full).mean - 100.0));
    worst_empty = std::max(worst_empty, std::abs(ev.evaluate(empty).mean));
  }
  note(o, "8 templates: full circuit max |F - 100| = " + fmt("%.2e", worst_full) + ", empty circuit max |F| = " +
              fmt("%.3f", worst_empty));
  bool ok = worst_full <= 0.01 && worst_empty <= 5.0;

  // every search outcome is either in the band (re-measured) or flagged
  auto check = [&](const std::string& what, const SearchResult& r, const std::vector<PromptPair>& held, const SearchConfig& sc) {
    const double f = faithfulness(params, r.circuit, held).mean;
    const bool in_band = f >= sc.band_lo && f <= sc.band_hi;
    const bool good = (r.in_band && in_band && !r.circuit.flagged) || (!r.in_band && r.circuit.flagged);
    note(o, what + ": " + std::to_string(r.circuit.size()) + " instances, held-out faithfulness " + fmt("%.3f", f) +
                (r.in_band ? " (in band)" : " (flagged)") + (good ? "" : " INCONSISTENT"));
    return good;
  };
  ok = check("template 1 search (k=100, n=20)", disc.search, disc.held, SearchConfig{}) && ok;
  SearchConfig tight;
  tight.max_edges = 40;
  ok = check("search capped at 40 instances", search_minimal_circuit(disc.table, params, disc.held, tight), disc.held, tight) && ok;
  for (int id : {2, 5}) {
    const Discovery d = discover(params, id, 4100 + static_cast<std::uint64_t>(id), 40);
    ok = check("template " + std::to_string(id) + " search", d.search, d.held, SearchConfig{}) && ok;
  }
  o.pass = ok;
  return o;
}

// ---------------------------------------------------------------------------
// 8. intervention identities

Outcome criterion_identities(const Parameters& params) {
  Outcome o{"8", "intervention identities"};
  auto prompts = pairs_for(kAllTemplates, 13, ErrorType::Result, 8008);
  prompts.resize(100);
  std::vector<std::pair<std::size_t, std::size_t>> heads;
  for (auto h : ComputationGraph(params.config).heads()) heads.push_back(h);
  double worst_head = 0.0, worst_bridge = 0.0, worst_zero = 0.0;
  for (const auto& p : prompts) {
    const auto [logits, cache] = run_with_cache(params, p.clean_tokens);
    std::vector<Tensor> own;
    for (auto [l, h] : heads) own.push_back(cache.pattern(l, h, params.config.n_heads));
    worst_head = std::max(worst_head, max_abs_diff(run_with_head_pattern_patch(params, p.clean_tokens, heads, own, 1.0), logits));
    worst_bridge = std::max(worst_bridge, max_abs_diff(run_bridged(params, p.clean_tokens, p.position_labels,
                                                                   {2, labels::kResultFirst}, {1, labels::kResultSecond}, 0.0),
                                                       logits));
    Interventions iv;
    iv.residual.push_back({1, p.position_labels.at(labels::kAnswerFirst), Tensor({params.config.d_model})});
    worst_zero = std::max(worst_zero, max_abs_diff(run_logits(params, p.clean_tokens, iv), logits));
  }
  note(o, "100 prompts: self-source alpha=1 patch of all heads " + fmt("%.2e", worst_head) + ", zero-scale bridge " +
              fmt("%.2e", worst_bridge) + ", zero-vector residual add " + fmt("%.2e", worst_zero));
  o.pass = worst_head <= 1e-9 && worst_bridge <= 1e-9 && worst_zero <= 1e-9;
  return o;
}

// ---------------------------------------------------------------------------
// 9. validation-gap signature

struct GapResults {
  Outcome a{"9a", "consistent errors are detected less often"};
  Outcome b{"9b", "consistency heads beat random control heads", false, true};
  Outcome c{"9c", "result probes peak in the upper half", false, false};
  Outcome d{"9d", "residual bridging", false, false};
};

GapResults criterion_gap(const Desk& desk, const Circuit* circuit) {
  GapResults r;
  const Parameters& params = desk.params;
  const ComputationGraph g(params.config);
  const auto both = pairs_for(kAllTemplates, 70, ErrorType::Both, 9009);

  // (a)
  const double both_acc = evaluate_detection_accuracy(params, both).overall;
  note(r.a, "single-error " + fmt("%.2f", desk.single_accuracy) + "%, consistent-error " + fmt("%.2f", both_acc) + "% (" +
                std::to_string(both.size()) + " pairs), gap " + fmt("%.2f", desk.single_accuracy - both_acc) + " points");
  r.a.pass = desk.single_accuracy - both_acc >= 20.0;

  // (b)
  const Template& t1 = get_template(Operation::Add, 1);
  std::map<std::string, std::vector<std::vector<int>>> sets;
  const std::vector<std::pair<std::string, ErrorType>> conditions{
      {"none", ErrorType::None}, {"both", ErrorType::Both}, {"result", ErrorType::Result}, {"answer", ErrorType::Answer}};
  std::uint64_t s = 9100;
  for (const auto& [name, e] : conditions)
    for (const auto& p : generate_pairs(t1, 200, e, s++)) sets[name].push_back(p.clean_tokens);
  auto ranked = detect_consistency_heads(params, circuit, sets, label_positions(t1));
  if (ranked.size() < 2) ranked = detect_consistency_heads(params, nullptr, sets, label_positions(t1));
  std::ostringstream rs;
  for (const auto& h : ranked) rs << ' ' << h.head.name() << '=' << fmt("%.3f", h.score);
  note(r.b, std::string(circuit && ranked.size() >= 2 ? "circuit heads" : "all heads") + " by consistency score:" + rs.str());
  const std::vector<HeadRef> top{ranked[0].head, ranked[1].head};
  std::vector<std::vector<int>> sources;
  for (const auto& p : both) sources.push_back(single_error_variant(p, ErrorType::Result));

  // alpha is model-specific: pick it on separate tuning pairs by the consistency-head gain alone
  const auto tune = without_overlap(pairs_for(kAllTemplates, 40, ErrorType::Both, 9010), both);
  std::vector<std::vector<int>> tune_sources;
  for (const auto& p : tune) tune_sources.push_back(single_error_variant(p, ErrorType::Result));
  double alpha = 3.1, best_gain = -1e300;
  std::ostringstream ts;
  for (double a : {3.1, 2.0, 1.0}) {
    const double gain = patch_heads_eval(params, tune, tune_sources, top, a).pair_accuracy.delta();
    ts << " alpha " << fmt("%.1f", a) << ' ' << fmt("%+.2f", gain);
    if (gain > best_gain) {
      best_gain = gain;
      alpha = a;
    }
  }
  note(r.b, "tuning on " + std::to_string(tune.size()) + " pairs:" + ts.str() + ", chose alpha " + fmt("%.1f", alpha));

  bool primary = false;
  for (double a : {3.1, 2.0, 1.0}) {
    const auto cons = patch_heads_eval(params, both, sources, top, a);
    double control = 0.0;
    int wins = 0;
    const int draws = 10;
    for (int k = 0; k < draws; ++k) {
      const auto heads = random_control_heads(g, top, top.size(), 9200 + static_cast<std::uint64_t>(k));
      const double dlt = patch_heads_eval(params, both, sources, heads, a).pair_accuracy.delta();
      control += dlt / draws;
      wins += cons.pair_accuracy.delta() > dlt;
    }
    note(r.b, std::string(a == alpha ? "[chosen] " : "") + "alpha " + fmt("%.1f", a) + ": " + top[0].name() + "," +
                  top[1].name() + " " + fmt("%+.2f", cons.pair_accuracy.delta()) + " points (" +
                  fmt("%.2f", cons.pair_accuracy.before) + " -> " + fmt("%.2f", cons.pair_accuracy.after) +
                  "), random pairs mean " + fmt("%+.2f", control) + ", beaten in " + std::to_string(wins) + "/" +
                  std::to_string(draws) + " draws");
    if (a == alpha) primary = cons.pair_accuracy.delta() > control;
  }
  r.b.pass = primary && both.size() >= 500;

  // (c)
  auto ptrain = pairs_for(kAllTemplates, 500, ErrorType::Both, 9300);
  auto ptest = without_overlap(pairs_for(kAllTemplates, 100, ErrorType::Both, 9301), ptrain);
  const std::vector<std::string> positions{labels::kOp2InEq, labels::kEquals, labels::kResultFirst, labels::kResultSecond,
                                           labels::kAnswerSecond, labels::kFinal};
  const ProbeGrid grid = probe_layer_sweep(params, ptrain, ptest, positions, ProbeConfig{});
  std::size_t best_state = 0;
  double best = -1.0;
  std::string best_pos;
  for (std::size_t l = 0; l < grid.n_states; ++l)
    for (std::size_t k = 0; k < positions.size(); ++k)
      if (grid.accuracy[l][k] > best) {
        best = grid.accuracy[l][k];
        best_state = l;
        best_pos = positions[k];
      }
  std::istringstream csv(grid.to_csv());
  for (std::string line; std::getline(csv, line);) note(r.c, line);
  note(r.c, "peak " + fmt("%.3f", best) + " at residual " + std::to_string(best_state) + " / " + best_pos);
  r.c.pass = 2 * best_state > params.config.n_layers;

  // (d)
  const auto single = pairs_for(kAllTemplates, 30, ErrorType::Result, 9400);
  const ResidualLocus src{params.config.n_layers, labels::kResultFirst}, dst{1, labels::kResultSecond};
  const BridgeReport br = residual_bridge_eval(params, both, single, src, dst);
  note(r.d, "residual " + std::to_string(src.layer) + "@" + src.pos_label + " -> residual " + std::to_string(dst.layer) + "@" +
                dst.pos_label + ": consistent " + fmt("%.2f", br.consistent.before) + " -> " + fmt("%.2f", br.consistent.after) +
                ", single " + fmt("%.2f", br.single.before) + " -> " + fmt("%.2f", br.single.after));
  r.d.pass = br.consistent.delta() > 0.0 && br.single.delta() >= -10.0;
  return r;
}

void print(const Outcome& o) {
  std::cout << (o.pass ? "PASS" : "FAIL") << "  " << o.id << "  " << o.title << (o.gating ? "" : " (diagnostic)") << "\n";
  for (const auto& d : o.details) std::cout << "        " << d << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"circuitlab acceptance suite"};
  std::string artifacts = "acceptance_artifacts";
  std::string reuse;
  bool skip_desk = false;
  app.add_option("--artifacts", artifacts, "directory for checkpoints and logs")->capture_default_str();
  app.add_option("--checkpoint", reuse, "reuse a trained desk model; criterion 7 is then not evaluated");
  app.add_flag("--skip-desk", skip_desk, "run only the criteria that need no trained model");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(artifacts);

  std::vector<Outcome> out;
  out.push_back(criterion_gradients());
  out.push_back(criterion_linear_eap());
  out.push_back(criterion_soft_intersection());
  out.push_back(criterion_overlap());

  if (skip_desk) {
    std::sort(out.begin(), out.end(), [](const Outcome& x, const Outcome& y) { return x.id < y.id; });
    for (const auto& o : out) print(o);
    return 0;
  }

  // 7: desk pipeline, up to three seeds for the accuracy target
  Outcome seven{"7", "desk pipeline end to end"};
  const auto t7 = Clock::now();
  Desk desk;
  if (!reuse.empty()) {
    desk.params = load_checkpoint(reuse);
    auto train_set = pairs_for(kAllTemplates, 500, ErrorType::Result, desk.params.config.seed);
    auto more = pairs_for(kAllTemplates, 500, ErrorType::Answer, desk.params.config.seed);
    train_set.insert(train_set.end(), more.begin(), more.end());
    auto held = pairs_for(kAllTemplates, 60, ErrorType::Result, 1000 + desk.params.config.seed);
    more = pairs_for(kAllTemplates, 60, ErrorType::Answer, 1000 + desk.params.config.seed);
    held.insert(held.end(), more.begin(), more.end());
    desk.held_single = without_overlap(held, train_set);
    desk.single_accuracy = evaluate_detection_accuracy(desk.params, desk.held_single).overall;
    note(seven, "not evaluated: reused " + reuse + " (held-out accuracy " + fmt("%.2f", desk.single_accuracy) + "%)");
  } else {
    for (std::uint64_t seed : {0, 1, 2}) {
      desk = train_desk(seed, artifacts, seven);
      if (desk.single_accuracy >= 95.0) break;
    }
  }
  const Discovery disc = discover(desk.params, 1, 7007, 100);
  const std::size_t instances = disc.table.scores.size();
  const double fraction = static_cast<double>(disc.search.circuit.size()) / static_cast<double>(instances);
  write_file_atomic((fs::path(artifacts) / "circuit_template1.json").string(), to_json(disc.search.circuit).dump(2));
  write_file_atomic((fs::path(artifacts) / "circuit_template1.dot").string(), export_dot(disc.search.circuit));
  const double secs7 = seconds_since(t7);
  note(seven, "template 1 circuit: " + std::to_string(disc.search.circuit.size()) + " of " + std::to_string(instances) +
                  " edge instances (" + fmt("%.2f", 100.0 * fraction) + "%), held-out faithfulness " +
                  fmt("%.2f", disc.search.faithfulness) + "% on " + std::to_string(disc.held.size()) + " pairs (" +
                  fmt("%.0f", disc.seconds) + " s)");
  note(seven, "runtime " + fmt("%.0f", secs7) + " s (limit 900 s)");
  seven.pass = reuse.empty() && desk.single_accuracy >= 95.0 && fraction <= 0.10 && disc.search.in_band && secs7 < 900.0;

  out.push_back(criterion_eap_fidelity(desk.params));
  out.push_back(criterion_faithfulness(desk.params, disc));
  out.push_back(seven);
  out.push_back(criterion_identities(desk.params));
  GapResults gap = criterion_gap(desk, &disc.search.circuit);
  Outcome nine{"9", "validation-gap signature (gated on 9a and 9b)"};
  nine.pass = gap.a.pass && gap.b.pass;

  std::sort(out.begin(), out.end(), [](const Outcome& x, const Outcome& y) { return x.id < y.id; });
  out.push_back(nine);
  out.push_back(gap.a);
  out.push_back(gap.b);
  out.push_back(gap.c);
  out.push_back(gap.d);

  std::cout << "\n";
  bool ok = true;
  for (const auto& o : out) {
    print(o);
    if (o.gating && !o.pass) ok = false;
  }
  std::cout << (ok ? "acceptance: all gating criteria pass" : "acceptance: gating failures") << std::endl;
  return ok ? 0 : 1;
}
