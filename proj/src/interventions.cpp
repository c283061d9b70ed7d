#include "circuitlab/interventions.hpp"

#include <algorithm>
#include <cmath>
#include <regex>
#include <sstream>
#include <stdexcept>

#include "circuitlab/rng.hpp"

namespace circuitlab {

std::string HeadRef::name() const { return "L" + std::to_string(layer) + "H" + std::to_string(head); }

HeadRef parse_head(std::string_view text) {
  static const std::regex lh(R"(L(\d+)H(\d+))");
  static const std::regex dotted(R"(A\.(\d+)\.(\d+))");
  const std::string s(text);
  std::smatch m;
  if (std::regex_match(s, m, lh) || std::regex_match(s, m, dotted)) {
    return {std::stoul(m[1].str()), std::stoul(m[2].str())};
  }
  throw std::invalid_argument("cannot parse head '" + s + "' (expected e.g. L1H2)");
}

std::vector<HeadRef> parse_head_list(std::string_view comma_separated) {
  std::vector<HeadRef> out;
  std::stringstream ss{std::string(comma_separated)};
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(parse_head(item));
  }
  return out;
}

namespace {

bool predicts(const Tensor& logits, const std::vector<int>& labels) {
  const auto row = logits.row(logits.dim(0) - 1);
  const int arg = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  return std::find(labels.begin(), labels.end(), arg) != labels.end();
}

double percent(std::size_t k, std::size_t n) { return n == 0 ? 0.0 : 100.0 * static_cast<double>(k) / static_cast<double>(n); }

void check_heads(const ModelConfig& cfg, const std::vector<HeadRef>& heads) {
  for (const auto& h : heads) {
    if (h.layer >= cfg.n_layers || h.head >= cfg.n_heads) throw std::out_of_range("head " + h.name() + " out of range");
  }
}

}  // namespace

HeadPatchReport patch_heads_eval(const Parameters& params, const std::vector<PromptPair>& targets,
                                 const std::vector<std::vector<int>>& sources, const std::vector<HeadRef>& heads,
                                 double alpha) {
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw std::invalid_argument("alpha must be positive");
  if (targets.size() != sources.size()) throw std::invalid_argument("target and source prompts must align one-to-one");
  check_heads(params.config, heads);
  const std::size_t H = params.config.n_heads;
  std::size_t pair_before = 0, pair_after = 0, det_before = 0, det_after = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto& p = targets[i];
    if (sources[i].size() != p.clean_tokens.size()) {
      throw std::invalid_argument("source prompt " + std::to_string(i) + " has a different length than its target");
    }
    const bool corrupt_ok = predicts(run_logits(params, p.corrupt_tokens), p.corrupt_labels);
    const bool clean_ok = predicts(run_logits(params, p.clean_tokens), p.clean_labels);
    Interventions iv;
    if (!heads.empty()) {
      const auto cache = run_with_cache(params, sources[i]).second;
      for (const auto& h : heads) iv.heads.push_back({h.layer, h.head, cache.pattern(h.layer, h.head, H), alpha});
    }
    const bool patched_ok = predicts(run_logits(params, p.clean_tokens, iv), p.clean_labels);
    pair_before += clean_ok && corrupt_ok;
    pair_after += patched_ok && corrupt_ok;
    det_before += clean_ok;
    det_after += patched_ok;
  }
  const std::size_t n = targets.size();
  return {{percent(pair_before, n), percent(pair_after, n), n}, {percent(det_before, n), percent(det_after, n), n}};
}

std::vector<int> single_error_variant(const PromptPair& pair, ErrorType kind) {
  if (pair.task != TaskKind::Validation) throw std::invalid_argument("single_error_variant needs a validation pair");
  const Template& t = get_template(pair.operation, pair.template_id);
  const auto& a = pair.assignment;
  switch (kind) {
    case ErrorType::Result: return render(t, a, a.wrong, a.result);
    case ErrorType::Answer: return render(t, a, a.result, a.wrong);
    default: throw std::invalid_argument("single_error_variant: kind must be result or answer");
  }
}

std::vector<HeadRef> random_control_heads(const ComputationGraph& graph, const std::vector<HeadRef>& exclude,
                                          std::size_t count, std::uint64_t seed) {
  std::vector<HeadRef> pool;
  for (const auto& [l, h] : graph.heads()) {
    const HeadRef r{l, h};
    if (std::find(exclude.begin(), exclude.end(), r) == exclude.end()) pool.push_back(r);
  }
  if (count > pool.size()) {
    throw std::invalid_argument("random_control_heads: asked for " + std::to_string(count) + " heads but only " +
                                std::to_string(pool.size()) + " are available");
  }
  auto rng = make_rng(seed, "control-heads");
  // Partial Fisher-Yates with the library-independent sampler.
  for (std::size_t i = 0; i < count; ++i) {
    const auto j = static_cast<std::size_t>(uniform_int(rng, static_cast<std::int64_t>(i), static_cast<std::int64_t>(pool.size()) - 1));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(count);
  std::sort(pool.begin(), pool.end());
  return pool;
}

Tensor run_bridged(const Parameters& params, const std::vector<int>& tokens, const TokenLabelMap& labels,
                   const ResidualLocus& src, const ResidualLocus& dst, double scale) {
  const auto& cfg = params.config;
  if (src.layer > cfg.n_layers || dst.layer > cfg.n_layers) throw std::out_of_range("residual layer out of range");
  const auto sp = labels.position_of(src.pos_label);
  const auto dp = labels.position_of(dst.pos_label);
  if (!sp) throw std::invalid_argument("unknown source position label '" + src.pos_label + "'");
  if (!dp) throw std::invalid_argument("unknown destination position label '" + dst.pos_label + "'");
  const auto cache = run_with_cache(params, tokens).second;
  const auto row = cache.residuals[src.layer].row(*sp);
  Tensor v({cfg.d_model}, {row.begin(), row.end()});
  for (auto& x : v.values()) x *= scale;
  Interventions iv;
  iv.residual.push_back({dst.layer, *dp, std::move(v)});
  return run_logits(params, tokens, iv);
}

BridgeReport residual_bridge_eval(const Parameters& params, const std::vector<PromptPair>& consistent_pairs,
                                  const std::vector<PromptPair>& single_pairs, const ResidualLocus& src,
                                  const ResidualLocus& dst, double scale) {
  auto eval = [&](const std::vector<PromptPair>& pairs) {
    std::size_t before = 0, after = 0;
    for (const auto& p : pairs) {
      before += predicts(run_logits(params, p.clean_tokens), p.clean_labels) &&
                predicts(run_logits(params, p.corrupt_tokens), p.corrupt_labels);
      after += predicts(run_bridged(params, p.clean_tokens, p.position_labels, src, dst, scale), p.clean_labels) &&
               predicts(run_bridged(params, p.corrupt_tokens, p.position_labels, src, dst, scale), p.corrupt_labels);
    }
    return AccuracyDelta{percent(before, pairs.size()), percent(after, pairs.size()), pairs.size()};
  };
  return {eval(consistent_pairs), eval(single_pairs)};
}

namespace {

// Mean pattern of every head (layer * n_heads + head) over the prompts.
std::vector<Tensor> mean_patterns(const Parameters& params, const std::vector<std::vector<int>>& prompts) {
  if (prompts.empty()) throw std::invalid_argument("average_attention: no prompts");
  std::vector<Tensor> sum;
  for (const auto& p : prompts) {
    if (p.size() != prompts.front().size()) throw std::invalid_argument("average_attention: prompts differ in length");
    const auto cache = run_with_cache(params, p).second;
    if (sum.empty()) {
      sum = cache.patterns;
      continue;
    }
    for (std::size_t h = 0; h < sum.size(); ++h) {
      auto dst = sum[h].values();
      auto src = cache.patterns[h].values();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
  }
  for (auto& t : sum)
    for (auto& x : t.values()) x /= static_cast<double>(prompts.size());
  return sum;
}

}  // namespace

Tensor average_attention(const Parameters& params, const std::vector<std::vector<int>>& prompts, std::size_t layer,
                         std::size_t head) {
  check_heads(params.config, {{layer, head}});
  return mean_patterns(params, prompts)[layer * params.config.n_heads + head];
}

HeadScore score_head_patterns(const HeadRef& head, const std::map<std::string, Tensor>& patterns,
                              const TokenLabelMap& labels) {
  for (const char* c : {"none", "both", "result", "answer"}) {
    if (patterns.count(c) == 0) throw std::invalid_argument(std::string("missing condition set '") + c + "'");
  }
  const std::size_t T = labels.seq_len;
  const std::size_t af = labels.at(labels::kAnswerFirst), as = labels.at(labels::kAnswerSecond);
  const std::size_t rf = labels.at(labels::kResultFirst), rs = labels.at(labels::kResultSecond);
  HeadScore s;
  s.head = head;
  for (const auto& [cond, a] : patterns) {
    if (a.numel() != T * T) throw ShapeError("pattern does not match the template layout");
    s.per_condition[cond] = {a[af * T + rf], a[as * T + rs]};
  }
  auto digit_mean = [&](const char* cond) {
    const auto& [first, second] = s.per_condition.at(cond);
    return 0.5 * (first + second);
  };
  s.match_attention = 0.5 * (digit_mean("none") + digit_mean("both"));
  s.mismatch_attention = 0.5 * (digit_mean("result") + digit_mean("answer"));
  s.score = s.match_attention - s.mismatch_attention;
  return s;
}

std::vector<HeadScore> detect_consistency_heads(const Parameters& params, const Circuit* circuit,
                                                const std::map<std::string, std::vector<std::vector<int>>>& prompt_sets,
                                                const TokenLabelMap& labels) {
  for (const char* c : {"none", "both", "result", "answer"}) {
    if (prompt_sets.count(c) == 0 || prompt_sets.at(c).empty()) {
      throw std::invalid_argument(std::string("detect_consistency_heads: missing condition set '") + c + "'");
    }
  }
  const ComputationGraph graph(params.config);
  std::vector<HeadRef> heads;
  for (const auto& [l, h] : graph.heads()) {
    bool in = circuit == nullptr;
    if (circuit) {
      for (const auto& m : circuit->members) {
        for (const NodeId& n : {m.edge.src, m.edge.dst}) {
          const bool attn = n.kind == NodeKind::AttnQ || n.kind == NodeKind::AttnK || n.kind == NodeKind::AttnV ||
                            n.kind == NodeKind::AttnO;
          if (attn && n.layer == l && n.head == h) in = true;
        }
        if (in) break;
      }
    }
    if (in) heads.push_back({l, h});
  }

  std::map<std::string, std::vector<Tensor>> means;
  for (const auto& [cond, prompts] : prompt_sets) {
    for (const auto& p : prompts)
      if (p.size() != labels.seq_len) throw std::invalid_argument("detect_consistency_heads: prompt layout mismatch");
    means[cond] = mean_patterns(params, prompts);
  }

  std::vector<HeadScore> out;
  for (const auto& h : heads) {
    std::map<std::string, Tensor> per;
    for (const auto& [cond, pats] : means) per[cond] = pats[h.layer * params.config.n_heads + h.head];
    out.push_back(score_head_patterns(h, per, labels));
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const HeadScore& a, const HeadScore& b) { return std::abs(a.score) > std::abs(b.score); });
  return out;
}

}  // namespace circuitlab
