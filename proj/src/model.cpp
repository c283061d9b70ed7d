#include "circuitlab/model.hpp"

#include <cmath>
#include <cstring>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>

#include "circuitlab/rng.hpp"

namespace circuitlab {

void ModelConfig::validate() const {
  if (n_layers == 0 || n_heads == 0 || d_model == 0 || d_head == 0 || d_mlp == 0 || vocab_size == 0 ||
      max_seq_len == 0) {
    throw std::invalid_argument("model config: all dimensions must be positive");
  }
  if (d_model != n_heads * d_head) {
    throw std::invalid_argument("model config: d_model (" + std::to_string(d_model) + ") must equal n_heads * d_head (" +
                                std::to_string(n_heads) + " * " + std::to_string(d_head) + ")");
  }
}

// ---- node and edge names ----

std::string NodeId::name() const {
  auto head_name = [&](char slot) {
    return "A." + std::to_string(layer) + "." + std::to_string(head) + "." + std::string(1, slot);
  };
  switch (kind) {
    case NodeKind::Embed: return "embed";
    case NodeKind::AttnQ: return head_name('Q');
    case NodeKind::AttnK: return head_name('K');
    case NodeKind::AttnV: return head_name('V');
    case NodeKind::AttnO: return head_name('O');
    case NodeKind::MlpIn: return "MLP in " + std::to_string(layer);
    case NodeKind::MlpOut: return "MLP out " + std::to_string(layer);
    case NodeKind::ResidFinal: return "logits";
  }
  return "?";
}

NodeId parse_node(std::string_view text) {
  auto fail = [&]() -> NodeId { throw std::invalid_argument("unrecognized node name '" + std::string(text) + "'"); };
  auto to_index = [&](std::string_view s) -> std::size_t {
    if (s.empty()) fail();
    std::size_t v = 0;
    for (char c : s) {
      if (c < '0' || c > '9') fail();
      v = v * 10 + static_cast<std::size_t>(c - '0');
    }
    return v;
  };
  if (text == "embed") return {NodeKind::Embed, 0, 0};
  if (text == "logits") return {NodeKind::ResidFinal, 0, 0};
  if (text.starts_with("MLP in ")) return {NodeKind::MlpIn, to_index(text.substr(7)), 0};
  if (text.starts_with("MLP out ")) return {NodeKind::MlpOut, to_index(text.substr(8)), 0};
  if (text.starts_with("A.")) {
    auto rest = text.substr(2);
    auto d1 = rest.find('.');
    if (d1 == std::string_view::npos) return fail();
    auto d2 = rest.find('.', d1 + 1);
    if (d2 == std::string_view::npos || d2 + 2 != rest.size()) return fail();
    NodeId n;
    n.layer = to_index(rest.substr(0, d1));
    n.head = to_index(rest.substr(d1 + 1, d2 - d1 - 1));
    switch (rest.back()) {
      case 'Q': n.kind = NodeKind::AttnQ; break;
      case 'K': n.kind = NodeKind::AttnK; break;
      case 'V': n.kind = NodeKind::AttnV; break;
      case 'O': n.kind = NodeKind::AttnO; break;
      default: return fail();
    }
    return n;
  }
  return fail();
}

std::string Edge::name() const { return src.name() + "->" + dst.name(); }

Edge parse_edge(std::string_view text) {
  auto arrow = text.find("->");
  if (arrow == std::string_view::npos) throw std::invalid_argument("edge name needs '->': '" + std::string(text) + "'");
  return Edge{parse_node(text.substr(0, arrow)), parse_node(text.substr(arrow + 2))};
}

// ---- graph ----

namespace {

// Position of a source in the forward order; a destination may read any
// source with a strictly smaller stage than its own.
std::size_t source_stage(const NodeId& n) {
  switch (n.kind) {
    case NodeKind::Embed: return 0;
    case NodeKind::AttnO: return 2 * n.layer + 1;
    case NodeKind::MlpOut: return 2 * n.layer + 2;
    default: throw std::logic_error("not a source node");
  }
}

std::size_t destination_stage(const NodeId& n, std::size_t n_layers) {
  switch (n.kind) {
    case NodeKind::AttnQ:
    case NodeKind::AttnK:
    case NodeKind::AttnV: return 2 * n.layer + 1;
    case NodeKind::MlpIn: return 2 * n.layer + 2;
    case NodeKind::ResidFinal: return 2 * n_layers + 1;
    default: throw std::logic_error("not a destination node");
  }
}

}  // namespace

ComputationGraph::ComputationGraph(const ModelConfig& config) : config_(config) {
  config_.validate();
  const std::size_t L = config_.n_layers;
  const std::size_t H = config_.n_heads;
  sources_.push_back({NodeKind::Embed, 0, 0});
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t h = 0; h < H; ++h) sources_.push_back({NodeKind::AttnO, l, h});
    sources_.push_back({NodeKind::MlpOut, l, 0});
  }
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t h = 0; h < H; ++h) {
      destinations_.push_back({NodeKind::AttnQ, l, h});
      destinations_.push_back({NodeKind::AttnK, l, h});
      destinations_.push_back({NodeKind::AttnV, l, h});
    }
    destinations_.push_back({NodeKind::MlpIn, l, 0});
  }
  destinations_.push_back({NodeKind::ResidFinal, 0, 0});

  incoming_.resize(destinations_.size());
  for (std::size_t d = 0; d < destinations_.size(); ++d) {
    const std::size_t limit = destination_stage(destinations_[d], L);
    for (std::size_t s = 0; s < sources_.size(); ++s) {
      if (source_stage(sources_[s]) >= limit) continue;
      incoming_[d].push_back(edges_.size());
      edge_lookup_.emplace(Edge{sources_[s], destinations_[d]}, edges_.size());
      edges_.push_back({sources_[s], destinations_[d]});
      edge_src_.push_back(s);
      edge_dst_.push_back(d);
    }
  }
}

std::size_t ComputationGraph::source_index(const NodeId& n) const {
  for (std::size_t i = 0; i < sources_.size(); ++i) {
    if (sources_[i] == n) return i;
  }
  throw std::out_of_range("node " + n.name() + " is not a source of this graph");
}

std::size_t ComputationGraph::destination_index(const NodeId& n) const {
  for (std::size_t i = 0; i < destinations_.size(); ++i) {
    if (destinations_[i] == n) return i;
  }
  throw std::out_of_range("node " + n.name() + " is not a destination of this graph");
}

std::optional<std::size_t> ComputationGraph::find_edge(const Edge& e) const {
  auto it = edge_lookup_.find(e);
  if (it == edge_lookup_.end()) return std::nullopt;
  return it->second;
}

std::size_t ComputationGraph::edge_index(const Edge& e) const {
  if (auto i = find_edge(e)) return *i;
  throw std::out_of_range("unknown edge " + e.name());
}

std::vector<std::pair<std::size_t, std::size_t>> ComputationGraph::heads() const {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    for (std::size_t h = 0; h < config_.n_heads; ++h) out.emplace_back(l, h);
  }
  return out;
}

// ---- parameters ----

namespace {

Tensor normal_tensor(Rng& rng, Shape shape, double stddev) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = stddev * standard_normal(rng);
  return t;
}

}  // namespace

Parameters init_model(const ModelConfig& config) {
  config.validate();
  Rng rng = make_rng(config.seed, "init");
  const double d = static_cast<double>(config.d_model);
  const double residual_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(config.n_layers));
  Parameters p;
  p.config = config;
  p.tok_embed = normal_tensor(rng, {config.vocab_size, config.d_model}, 1.0);
  p.pos_embed = normal_tensor(rng, {config.max_seq_len, config.d_model}, 1.0);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    LayerParams L;
    L.ln_attn = Tensor::full({config.d_model}, 1.0);
    for (std::size_t h = 0; h < config.n_heads; ++h) {
      L.w_q.push_back(normal_tensor(rng, {config.d_model, config.d_head}, 1.0 / std::sqrt(d)));
      L.w_k.push_back(normal_tensor(rng, {config.d_model, config.d_head}, 1.0 / std::sqrt(d)));
      L.w_v.push_back(normal_tensor(rng, {config.d_model, config.d_head}, 1.0 / std::sqrt(d)));
      L.w_o.push_back(normal_tensor(rng, {config.d_head, config.d_model},
                                    residual_scale / std::sqrt(static_cast<double>(config.d_model))));
    }
    L.ln_mlp = Tensor::full({config.d_model}, 1.0);
    L.w_in = normal_tensor(rng, {config.d_model, config.d_mlp}, 1.0 / std::sqrt(d));
    L.b_in = Tensor({config.d_mlp});
    L.w_out = normal_tensor(rng, {config.d_mlp, config.d_model},
                            residual_scale / std::sqrt(static_cast<double>(config.d_mlp)));
    p.layers.push_back(std::move(L));
  }
  p.ln_final = Tensor::full({config.d_model}, 1.0);
  p.unembed = normal_tensor(rng, {config.d_model, config.vocab_size}, 1.0 / std::sqrt(d));
  return p;
}

std::size_t Parameters::count() const {
  std::size_t n = 0;
  visit([&](const std::string&, const Tensor& t) { n += t.numel(); });
  return n;
}

std::string Parameters::fingerprint() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](const void* data, std::size_t bytes) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < bytes; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  const std::uint64_t dims[] = {config.n_layers, config.n_heads,    config.d_model, config.d_head,
                                config.d_mlp,    config.vocab_size, config.max_seq_len, config.linear ? 1u : 0u};
  mix(dims, sizeof(dims));
  visit([&](const std::string& name, const Tensor& t) {
    mix(name.data(), name.size());
    mix(t.values().data(), t.numel() * sizeof(double));
  });
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

// ---- forward ----

std::span<const double> ActivationCache::at(const ComputationGraph& graph, const NodeId& node,
                                            std::size_t position) const {
  if (position >= seq_len) throw std::out_of_range("cache position out of range");
  if (node.is_source()) return source_outputs.at(graph.source_index(node)).row(position);
  return destination_inputs.at(graph.destination_index(node)).row(position);
}

namespace {

struct LayerVars {
  Var ln_attn;
  std::vector<Var> w_q, w_k, w_v, w_o;
  Var ln_mlp, w_in, b_in, w_out;
};

Tensor uniform_causal(std::size_t batch, std::size_t T) {
  Tensor p({batch, T, T});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < T; ++i) {
      for (std::size_t j = 0; j <= i; ++j) p[(b * T + i) * T + j] = 1.0 / static_cast<double>(i + 1);
    }
  }
  return p;
}

void check_row_causal(const Tensor& pattern, std::size_t T) {
  if (pattern.numel() != T * T) {
    throw ShapeError("attention pattern " + to_string(pattern.shape()) + " does not match sequence length " +
                     std::to_string(T));
  }
  for (std::size_t i = 0; i < T; ++i) {
    for (std::size_t j = i + 1; j < T; ++j) {
      if (pattern[i * T + j] != 0.0) throw std::invalid_argument("attention pattern is not row-causal");
    }
  }
}

}  // namespace

Trace trace(const Parameters& params, std::span<const int> tokens, std::size_t batch,
            const Interventions& iv, bool node_inputs) {
  const ModelConfig& cfg = params.config;
  cfg.validate();
  if (batch == 0 || tokens.empty() || tokens.size() % batch != 0) {
    throw std::invalid_argument("token count must be a positive multiple of the batch size");
  }
  const std::size_t T = tokens.size() / batch;
  if (T > cfg.max_seq_len) {
    throw std::out_of_range("sequence length " + std::to_string(T) + " exceeds max_seq_len " +
                            std::to_string(cfg.max_seq_len));
  }
  for (int id : tokens) {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
      throw std::out_of_range("token id " + std::to_string(id) + " out of range for vocabulary of " +
                              std::to_string(cfg.vocab_size));
    }
  }
  if (!iv.empty() && batch != 1) throw std::invalid_argument("interventions need a single sequence");
  if (!iv.empty() && !node_inputs) throw std::invalid_argument("interventions need per-node inputs");

  const ComputationGraph graph(cfg);
  const std::size_t d = cfg.d_model;
  const std::size_t H = cfg.n_heads;

  // Validate and index interventions up front.
  std::map<std::size_t, std::vector<const EdgePatch*>> patches_by_edge;
  for (const auto& p : iv.edges) {
    if (p.edge >= graph.num_edges()) throw std::out_of_range("unknown edge index " + std::to_string(p.edge));
    if (p.position >= T) throw std::out_of_range("edge patch position out of range");
    if (p.value.numel() != d) throw ShapeError("edge patch value must have d_model elements");
    patches_by_edge[p.edge].push_back(&p);
  }
  if (iv.edge_mask) {
    const auto& m = *iv.edge_mask;
    if (m.source == nullptr || m.source->seq_len != T) throw std::invalid_argument("edge mask source cache length mismatch");
    if (m.mask.size() != graph.num_edges() * T) throw ShapeError("edge mask size mismatch");
  }
  std::map<std::pair<std::size_t, std::size_t>, const HeadPatternPatch*> head_patches;
  for (const auto& hp : iv.heads) {
    if (hp.layer >= cfg.n_layers || hp.head >= H) throw std::out_of_range("head index out of range");
    if (!(hp.alpha >= 0.0) || !std::isfinite(hp.alpha)) throw std::invalid_argument("alpha must be finite and non-negative");
    check_row_causal(hp.pattern, T);
    head_patches[{hp.layer, hp.head}] = &hp;
  }
  std::map<std::size_t, std::vector<const ResidualAdd*>> residual_adds;
  for (const auto& ra : iv.residual) {
    if (ra.layer > cfg.n_layers) throw std::out_of_range("residual layer out of range");
    if (ra.position >= T) throw std::out_of_range("residual position out of range");
    if (ra.vector.numel() != d) throw ShapeError("residual vector must have d_model elements");
    residual_adds[ra.layer].push_back(&ra);
  }

  Trace t;
  t.batch = batch;
  t.seq_len = T;
  Tape& tape = t.tape;
  params.visit([&](const std::string&, const Tensor& value) { t.params.push_back(tape.leaf(value)); });

  std::size_t cursor = 0;
  auto next = [&] { return t.params[cursor++]; };
  const Var tok_embed = next();
  const Var pos_embed = next();
  std::vector<LayerVars> lv(cfg.n_layers);
  for (auto& L : lv) {
    L.ln_attn = next();
    for (std::size_t h = 0; h < H; ++h) {
      L.w_q.push_back(next());
      L.w_k.push_back(next());
      L.w_v.push_back(next());
      L.w_o.push_back(next());
    }
    L.ln_mlp = next();
    L.w_in = next();
    L.b_in = next();
    L.w_out = next();
  }
  const Var ln_final = next();
  const Var unembed = next();

  t.sources.resize(graph.sources().size());
  t.destinations.resize(graph.destinations().size());

  auto normalize = [&](Var x, Var gain) { return cfg.linear ? x : tape.mul(tape.rms_norm(x), gain); };

  auto with_residual_adds = [&](Var resid, std::size_t layer) {
    auto it = residual_adds.find(layer);
    if (it == residual_adds.end()) return resid;
    Tensor extra({1, T, d});
    for (const ResidualAdd* ra : it->second) {
      for (std::size_t j = 0; j < d; ++j) extra[ra->position * d + j] += ra->vector[j];
    }
    return tape.add(resid, tape.leaf(std::move(extra)));
  };

  auto destination_input = [&](std::size_t dst, Var resid) {
    if (!node_inputs) {
      t.destinations[dst] = resid;
      return resid;
    }
    Tensor delta;
    for (std::size_t e : graph.incoming(dst)) {
      const Tensor& natural = tape.value(t.sources[graph.edge_source(e)]);
      auto add_delta = [&](std::size_t pos, std::span<const double> replacement) {
        if (delta.empty()) delta = Tensor({1, T, d});
        for (std::size_t j = 0; j < d; ++j) delta[pos * d + j] += replacement[j] - natural[pos * d + j];
      };
      if (auto it = patches_by_edge.find(e); it != patches_by_edge.end()) {
        for (const EdgePatch* p : it->second) add_delta(p->position, p->value.values());
      }
      if (iv.edge_mask) {
        const auto& m = *iv.edge_mask;
        for (std::size_t pos = 0; pos < T; ++pos) {
          if (m.mask[e * T + pos]) add_delta(pos, m.source->source_outputs[graph.edge_source(e)].row(pos));
        }
      }
    }
    const Var in = delta.empty() ? tape.scale(resid, 1.0) : tape.add(resid, tape.leaf(std::move(delta)));
    t.destinations[dst] = in;
    return in;
  };

  std::vector<int> positions(T);
  for (std::size_t i = 0; i < T; ++i) positions[i] = static_cast<int>(i);
  const Var tok = tape.embedding(tok_embed, tokens, {batch, T});
  const Var pos = tape.embedding(pos_embed, positions, {T});
  const Var embed = tape.add(tok, pos);
  t.sources[0] = embed;
  Var resid = with_residual_adds(embed, 0);
  t.residuals.push_back(resid);

  const double score_scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_head));
  std::size_t src_cursor = 1;
  std::size_t dst_cursor = 0;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const LayerVars& L = lv[l];
    Var mid = resid;
    // Without per-node inputs every head reads one shared normalized residual.
    std::optional<Var> shared;
    if (!node_inputs) shared = normalize(resid, L.ln_attn);
    auto head_input = [&](Var in) { return shared ? *shared : normalize(in, L.ln_attn); };
    for (std::size_t h = 0; h < H; ++h) {
      const Var q_in = destination_input(dst_cursor++, resid);
      const Var k_in = destination_input(dst_cursor++, resid);
      const Var v_in = destination_input(dst_cursor++, resid);
      const Var v = tape.matmul(head_input(v_in), L.w_v[h]);
      Var pattern;
      if (auto it = head_patches.find({l, h}); it != head_patches.end()) {
        Tensor p = it->second->pattern.reshaped({1, T, T});
        for (auto& x : p.values()) x *= it->second->alpha;
        pattern = tape.leaf(std::move(p));
      } else if (cfg.linear) {
        pattern = tape.leaf(uniform_causal(batch, T));
      } else {
        const Var q = tape.matmul(head_input(q_in), L.w_q[h]);
        const Var k = tape.matmul(head_input(k_in), L.w_k[h]);
        pattern = tape.softmax(tape.scale(tape.matmul(q, k, true), score_scale), true);
      }
      t.patterns.push_back(pattern);
      const Var out = tape.matmul(tape.matmul(pattern, v), L.w_o[h]);
      t.sources[src_cursor++] = out;
      mid = tape.add(mid, out);
    }
    const Var mlp_in = destination_input(dst_cursor++, mid);
    Var hidden = tape.add(tape.matmul(normalize(mlp_in, L.ln_mlp), L.w_in), L.b_in);
    if (!cfg.linear) hidden = tape.gelu(hidden);
    const Var mlp_out = tape.matmul(hidden, L.w_out);
    t.sources[src_cursor++] = mlp_out;
    resid = with_residual_adds(tape.add(mid, mlp_out), l + 1);
    t.residuals.push_back(resid);
  }
  const Var final_in = destination_input(dst_cursor++, resid);
  t.logits = tape.matmul(normalize(final_in, ln_final), unembed);
  return t;
}

ActivationCache cache_from_trace(const Trace& t, const ComputationGraph& graph) {
  if (t.batch != 1) throw std::invalid_argument("activation caches hold a single sequence");
  const std::size_t T = t.seq_len;
  const std::size_t d = graph.config().d_model;
  ActivationCache c;
  c.seq_len = T;
  for (Var v : t.sources) c.source_outputs.push_back(t.tape.value(v).reshaped({T, d}));
  for (Var v : t.destinations) c.destination_inputs.push_back(t.tape.value(v).reshaped({T, d}));
  for (Var v : t.residuals) c.residuals.push_back(t.tape.value(v).reshaped({T, d}));
  for (Var v : t.patterns) c.patterns.push_back(t.tape.value(v).reshaped({T, T}));
  c.logits = t.tape.value(t.logits).reshaped({T, graph.config().vocab_size});
  return c;
}

std::pair<Tensor, ActivationCache> run_with_cache(const Parameters& params, std::span<const int> tokens) {
  const Trace t = trace(params, tokens);
  ActivationCache cache = cache_from_trace(t, ComputationGraph(params.config));
  Tensor logits = cache.logits;
  return {std::move(logits), std::move(cache)};
}

Tensor run_logits(const Parameters& params, std::span<const int> tokens, const Interventions& interventions) {
  const Trace t = trace(params, tokens, 1, interventions);
  return t.tape.value(t.logits).reshaped({t.seq_len, params.config.vocab_size});
}

Tensor run_with_edge_patch(const Parameters& params, std::span<const int> tokens, std::vector<EdgePatch> patches) {
  Interventions iv;
  iv.edges = std::move(patches);
  return run_logits(params, tokens, iv);
}

Tensor run_with_head_pattern_patch(const Parameters& params, std::span<const int> tokens,
                                   std::span<const std::pair<std::size_t, std::size_t>> heads,
                                   std::span<const Tensor> source_patterns, double alpha) {
  if (heads.size() != source_patterns.size()) {
    throw std::invalid_argument("one source pattern is needed per patched head");
  }
  Interventions iv;
  for (std::size_t i = 0; i < heads.size(); ++i) {
    iv.heads.push_back({heads[i].first, heads[i].second, source_patterns[i], alpha});
  }
  return run_logits(params, tokens, iv);
}

Tensor run_with_residual_add(const Parameters& params, std::span<const int> tokens, ResidualSite source,
                             ResidualSite dest, std::span<const int> vector_source_tokens) {
  const auto& cfg = params.config;
  if (source.layer > cfg.n_layers || dest.layer > cfg.n_layers) throw std::out_of_range("residual layer out of range");
  if (source.position >= vector_source_tokens.size()) throw std::out_of_range("source position out of range");
  if (dest.position >= tokens.size()) throw std::out_of_range("destination position out of range");
  const auto [unused, source_cache] = run_with_cache(params, vector_source_tokens);
  Interventions iv;
  auto row = source_cache.residuals[source.layer].row(source.position);
  iv.residual.push_back({dest.layer, dest.position, Tensor({cfg.d_model}, {row.begin(), row.end()})});
  return run_logits(params, tokens, iv);
}

}  // namespace circuitlab
