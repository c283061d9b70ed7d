#include <doctest.h>

#include <cmath>

#include "circuitlab/circuits.hpp"
#include "circuitlab/patching.hpp"
#include "helpers.hpp"

using namespace circuitlab;

namespace {

using Mat = std::vector<std::vector<double>>;  // [position][feature]

Mat zeros(std::size_t T, std::size_t d) { return Mat(T, std::vector<double>(d, 0.0)); }

Mat from_tensor(const Tensor& t) {
  Mat m(t.rows());
  for (std::size_t r = 0; r < t.rows(); ++r) m[r].assign(t.row(r).begin(), t.row(r).end());
  return m;
}

Mat norm_mul(const Mat& x, const Tensor& gain, const Tensor& w) {
  const std::size_t d = x[0].size(), n = w.cols();
  Mat out(x.size(), std::vector<double>(n, 0.0));
  for (std::size_t t = 0; t < x.size(); ++t) {
    double ms = 0.0;
    for (double v : x[t]) ms += v * v;
    const double inv = 1.0 / std::sqrt(ms / static_cast<double>(d) + 1e-6);
    for (std::size_t i = 0; i < d; ++i) {
      const double xi = x[t][i] * inv * gain[i];
      for (std::size_t j = 0; j < n; ++j) out[t][j] += xi * w[i * n + j];
    }
  }
  return out;
}

Mat mul(const Mat& x, const Tensor& w) {
  const std::size_t n = w.cols();
  Mat out(x.size(), std::vector<double>(n, 0.0));
  for (std::size_t t = 0; t < x.size(); ++t)
    for (std::size_t i = 0; i < x[t].size(); ++i)
      for (std::size_t j = 0; j < n; ++j) out[t][j] += x[t][i] * w[i * n + j];
  return out;
}

// Forward of a one-layer model where each destination reads, per incoming
// edge and position, either the run's own source value (edge in `keep`) or the
// value cached from the corrupt run.
Tensor mixed_forward_1layer(const Parameters& p, const std::vector<int>& tokens, const ActivationCache& corrupt,
                            const std::vector<char>& keep) {
  const ComputationGraph g(p.config);
  const std::size_t T = tokens.size(), d = p.config.d_model, H = p.config.n_heads, dh = p.config.d_head;
  const auto& L = p.layers[0];
  std::vector<Mat> src(g.sources().size());
  Mat embed = zeros(T, d);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t i = 0; i < d; ++i)
      embed[t][i] = p.tok_embed[static_cast<std::size_t>(tokens[t]) * d + i] + p.pos_embed[t * d + i];
  src[0] = embed;

  auto input_of = [&](const NodeId& dst) {
    const std::size_t di = g.destination_index(dst);
    Mat in = zeros(T, d);
    for (std::size_t e : g.incoming(di)) {
      const std::size_t s = g.edge_source(e);
      const Mat corr = from_tensor(corrupt.source_outputs[s]);
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t i = 0; i < d; ++i) in[t][i] += keep[e * T + t] ? src[s][t][i] : corr[t][i];
    }
    return in;
  };

  for (std::size_t h = 0; h < H; ++h) {
    Mat q = norm_mul(input_of({NodeKind::AttnQ, 0, h}), L.ln_attn, L.w_q[h]);
    Mat k = norm_mul(input_of({NodeKind::AttnK, 0, h}), L.ln_attn, L.w_k[h]);
    Mat v = norm_mul(input_of({NodeKind::AttnV, 0, h}), L.ln_attn, L.w_v[h]);
    Mat z = zeros(T, dh);
    for (std::size_t t = 0; t < T; ++t) {
      std::vector<double> s(t + 1);
      double mx = -1e300;
      for (std::size_t u = 0; u <= t; ++u) {
        double dot = 0.0;
        for (std::size_t j = 0; j < dh; ++j) dot += q[t][j] * k[u][j];
        s[u] = dot / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, s[u]);
      }
      double sum = 0.0;
      for (double& x : s) sum += (x = std::exp(x - mx));
      for (std::size_t u = 0; u <= t; ++u)
        for (std::size_t j = 0; j < dh; ++j) z[t][j] += s[u] / sum * v[u][j];
    }
    src[g.source_index({NodeKind::AttnO, 0, h})] = mul(z, L.w_o[h]);
  }
  Mat hid = norm_mul(input_of({NodeKind::MlpIn, 0, 0}), L.ln_mlp, L.w_in);
  for (auto& row : hid)
    for (std::size_t j = 0; j < row.size(); ++j) {
      const double x = row[j] + L.b_in[j];
      row[j] = 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
    }
  src[g.source_index({NodeKind::MlpOut, 0, 0})] = mul(hid, L.w_out);
  Mat logits = norm_mul(input_of({NodeKind::ResidFinal, 0, 0}), p.ln_final, p.unembed);
  Tensor out({T, p.config.vocab_size});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t j = 0; j < logits[t].size(); ++j) out[t * logits[t].size() + j] = logits[t][j];
  return out;
}

CircuitMember member(const char* edge, const char* label) { return {parse_edge(edge), label}; }

Circuit make(std::initializer_list<CircuitMember> ms) {
  Circuit c;
  c.members = ms;
  c.model_fingerprint = "m";
  c.label_domain = "add/validation";
  return c;
}

Circuit random_circuit(Rng& rng, const std::vector<CircuitMember>& universe, double keep) {
  Circuit c = make({});
  for (const auto& m : universe)
    if (uniform_int(rng, 0, 999) < static_cast<std::int64_t>(keep * 1000)) c.members.insert(m);
  return c;
}

}  // namespace

TEST_CASE("full and empty circuits") {
  auto p = testutil::small_model(2, 2, 3);
  ComputationGraph g(p.config);
  auto pairs = testutil::add_pairs(1, 6, ErrorType::Result, 3);
  const auto domain = label_domain_of(pairs[0]);
  CHECK(domain == "add/validation");
  Circuit full = full_circuit(g, pairs[0].position_labels, p.fingerprint(), domain);
  CHECK(full.size() == g.num_instances(pairs[0].clean_tokens.size()));
  for (const auto& pr : pairs) CHECK(max_abs_diff(run_circuit(p, full, pr), run_logits(p, pr.clean_tokens)) < 1e-6);

  Circuit empty = full;
  empty.members.clear();
  CHECK(max_abs_diff(run_circuit(p, empty, pairs[0]), run_logits(p, pairs[0].corrupt_tokens)) < 1e-6);

  auto f_full = faithfulness(p, full, pairs);
  auto f_empty = faithfulness(p, empty, pairs);
  CHECK(std::abs(f_full.mean - 100.0) < 0.01);
  CHECK(std::abs(f_empty.mean) < 5.0);
  CHECK(f_full.per_pair.size() == pairs.size());

  Circuit foreign = full;
  foreign.model_fingerprint = "other";
  CHECK_THROWS_AS(run_circuit(p, foreign, pairs[0]), std::invalid_argument);
}

TEST_CASE("faithfulness is the recovered share of the logit difference") {
  auto p = testutil::small_model(2, 2, 4);
  ComputationGraph g(p.config);
  auto pairs = testutil::add_pairs(2, 4, ErrorType::Answer, 4);
  auto table = eap_scores(p, pairs);
  Circuit c = circuit_from_ranking(table, g, 300, label_domain_of(pairs[0]));
  auto rep = faithfulness(p, c, pairs);
  double mean = 0.0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const MetricSpec m = metric_for(pairs[i]);
    const double mc = logit_diff(run_logits(p, pairs[i].clean_tokens), m);
    const double mk = logit_diff(run_logits(p, pairs[i].corrupt_tokens), m);
    const double v = 100.0 * (logit_diff(run_circuit(p, c, pairs[i]), m) - mk) / (mc - mk);
    CHECK(std::abs(v - rep.per_pair[i]) < 1e-9);
    mean += v / static_cast<double>(pairs.size());
  }
  CHECK(std::abs(mean - rep.mean) < 1e-9);

  // a pair whose two prompts give the same metric is rejected by index
  auto bad = pairs;
  bad.push_back(testutil::add_pairs(2, 1, ErrorType::None, 4)[0]);
  bad.back().clean_labels = {Tokenizer::standard().invalid()};
  try {
    FaithfulnessEvaluator ev(p, bad);
    FAIL("expected rejection");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("pair 4") != std::string::npos);
  }
}

TEST_CASE("singleton circuits match a hand-written mixed forward pass") {
  auto p = testutil::small_model(1, 2, 5);
  ComputationGraph g(p.config);
  auto pr = testutil::add_pairs(3, 1, ErrorType::Result, 5)[0];
  const std::size_t T = pr.clean_tokens.size();
  const auto [lk, corrupt] = run_with_cache(p, pr.corrupt_tokens);
  const std::size_t rs = pr.position_labels.at(labels::kResultSecond);
  const std::vector<std::pair<std::size_t, std::size_t>> picks{{0, rs}, {3, T - 1}, {g.num_edges() - 1, T - 1},
                                                               {7, rs + 2}, {g.num_edges() / 2, rs}};
  for (auto [e, pos] : picks) {
    Circuit c;
    c.model_fingerprint = p.fingerprint();
    c.label_domain = label_domain_of(pr);
    c.members.insert({g.edges()[e], pr.position_labels.label_of(pos)});
    std::vector<char> keep(g.num_instances(T), 0);
    keep[e * T + pos] = 1;
    INFO(g.edges()[e].name() << " @ " << pos);
    CHECK(max_abs_diff(run_circuit(p, c, pr), mixed_forward_1layer(p, pr.clean_tokens, corrupt, keep)) < 1e-9);
  }
}

TEST_CASE("off-circuit mask ignores foreign labels") {
  ModelConfig cfg = testutil::small_config(1, 2);
  ComputationGraph g(cfg);
  auto labels = label_positions(get_template(Operation::Add, 1));
  Circuit c = make({member("embed->logits", "final"), member("embed->logits", "T5@3")});
  auto mask = off_circuit_mask(g, c, labels);
  const std::size_t e = g.edge_index(parse_edge("embed->logits"));
  std::size_t on = 0;
  for (char m : mask) on += m ? 0 : 1;
  CHECK(on == 1);
  CHECK(mask[e * labels.seq_len + labels.at("final")] == 0);
}

TEST_CASE("soft intersection laws") {
  std::vector<CircuitMember> universe;
  for (const char* e : {"embed->logits", "embed->MLP in 0", "A.0.1.O->logits", "MLP out 0->A.1.0.Q", "A.1.1.O->MLP in 1"})
    for (const char* l : {"final", "equals", "result-first", "T1@4"}) universe.push_back(member(e, l));
  Rng rng(7);
  for (int family = 0; family < 1000; ++family) {
    std::vector<Circuit> cs;
    for (int i = 0; i < 8; ++i) cs.push_back(random_circuit(rng, universe, 0.6));
    Circuit uni = cs[0], inter = cs[0];
    for (const auto& c : cs) {
      uni = set_op(uni, c, SetOp::Union);
      inter = set_op(inter, c, SetOp::Intersection);
    }
    CHECK(soft_intersection(cs, 1.0 / 8).members == uni.members);
    CHECK(soft_intersection(cs, 8.0 / 8).members == inter.members);
    Circuit prev = soft_intersection(cs, 1.0 / 8);
    for (int k = 2; k <= 8; ++k) {
      Circuit cur = soft_intersection(cs, k / 8.0);
      for (const auto& m : cur.members) CHECK(prev.contains(m));
      prev = cur;
    }
  }
  // a member of exactly five circuits survives up to tau = 5/8
  std::vector<Circuit> cs(8, make({member("embed->logits", "final")}));
  for (int i = 5; i < 8; ++i) cs[static_cast<std::size_t>(i)].members.clear();
  for (int k = 1; k <= 8; ++k) CHECK(soft_intersection(cs, k / 8.0).size() == (k <= 5 ? 1u : 0u));
  CHECK_THROWS_AS(soft_intersection(cs, 0.3), std::invalid_argument);
  CHECK_THROWS_AS(soft_intersection(cs, 0.0), std::invalid_argument);
  cs[1].model_fingerprint = "other";
  CHECK_THROWS_AS(soft_intersection(cs, 0.5), std::invalid_argument);
}

TEST_CASE("overlap and set operations") {
  Circuit abc = make({member("embed->logits", "final"), member("embed->logits", "equals"), member("embed->MLP in 0", "final")});
  Circuit bc = make({member("embed->logits", "equals"), member("embed->MLP in 0", "final")});
  auto o = overlap(abc, bc);
  CHECK(std::abs(o.iou - 2.0 / 3.0) < 1e-15);
  CHECK(o.iom == 1.0);
  auto self = overlap(abc, abc);
  CHECK(self.iou == 1.0);
  CHECK(self.iom == 1.0);
  CHECK_THROWS_AS(overlap(abc, make({})), std::invalid_argument);
  Circuit other_domain = bc;
  other_domain.label_domain = "sub/validation";
  CHECK_THROWS_AS(overlap(abc, other_domain), std::invalid_argument);

  CHECK(set_op(abc, make({}), SetOp::Union).members == abc.members);
  CHECK(set_op(abc, abc, SetOp::Intersection).members == abc.members);

  std::vector<CircuitMember> universe;
  for (const char* e : {"embed->logits", "embed->MLP in 0", "A.0.1.O->logits"})
    for (const char* l : {"final", "equals", "op1", "T2@7"}) universe.push_back(member(e, l));
  Rng rng(9);
  for (int i = 0; i < 500; ++i) {
    Circuit a = random_circuit(rng, universe, 0.5), b = random_circuit(rng, universe, 0.5);
    CHECK(set_op(a, b, SetOp::Intersection).size() + set_op(a, b, SetOp::Union).size() == a.size() + b.size());
    if (a.empty() || b.empty()) continue;
    auto ov = overlap(a, b);
    CHECK(ov.iou <= ov.iom);
    CHECK(ov.iom <= 1.0);
  }
}

TEST_CASE("circuit search") {
  auto p = testutil::small_model(2, 2, 6);
  auto pairs = testutil::add_pairs(4, 6, ErrorType::Result, 6);
  auto table = eap_scores(p, pairs);
  std::vector<PromptPair> held = testutil::add_pairs(4, 4, ErrorType::Result, 60);

  SearchConfig wide;
  wide.k = 40;
  wide.n = 20;
  wide.band_lo = -1e9;
  wide.band_hi = 1e9;
  auto r = search_minimal_circuit(table, p, held, wide);
  CHECK(r.in_band);
  CHECK_FALSE(r.circuit.flagged);
  CHECK(r.circuit.size() == 40);
  CHECK(r.trajectory.size() == 1);

  SearchConfig impossible = wide;
  impossible.band_lo = 1000.0;
  impossible.band_hi = 1001.0;
  impossible.max_edges = 200;
  auto f = search_minimal_circuit(table, p, held, impossible);
  CHECK_FALSE(f.in_band);
  CHECK(f.circuit.flagged);
  CHECK(f.trajectory.size() == 9);
  double best = 1e300;
  for (const auto& s : f.trajectory) best = std::min(best, std::abs(s.faithfulness - 100.0));
  CHECK(std::abs(f.faithfulness - 100.0) == best);

  SearchConfig normal;
  normal.k = 100;
  normal.n = 100;
  auto n = search_minimal_circuit(table, p, held, normal);
  if (!n.circuit.flagged) {
    CHECK(n.faithfulness >= 99.0);
    CHECK(n.faithfulness <= 101.0);
  }
  // the returned circuit is the first in-band prefix
  for (std::size_t i = 0; i + 1 < n.trajectory.size(); ++i) {
    const double v = n.trajectory[i].faithfulness;
    CHECK_FALSE((v >= 99.0 && v <= 101.0));
  }

  SearchConfig bad;
  bad.k = 0;
  CHECK_THROWS_AS(search_minimal_circuit(table, p, held, bad), std::invalid_argument);
}

TEST_CASE("circuits round trip through JSON") {
  Circuit c = make({member("embed->logits", "final"), member("A.0.1.O->MLP in 1", "T3@9")});
  c.template_ids = {1, 3};
  c.tau = 0.375;
  c.flagged = true;
  Circuit back = circuit_from_json(to_json(c));
  CHECK(back.members == c.members);
  CHECK(back.template_ids == c.template_ids);
  CHECK(back.tau == c.tau);
  CHECK(back.flagged);
  CHECK(back.label_domain == c.label_domain);
  CHECK(back.model_fingerprint == c.model_fingerprint);
}
