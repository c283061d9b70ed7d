#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "circuitlab/autodiff.hpp"
#include "circuitlab/tensor.hpp"

namespace circuitlab {

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_model = 64;
  std::size_t d_head = 16;
  std::size_t d_mlp = 128;
  std::size_t vocab_size = 0;
  std::size_t max_seq_len = 0;
  std::uint64_t seed = 0;
  /// Linear surrogate: no normalization, identity MLP activation and
  /// attention fixed to the uniform causal average. Every node is then an
  /// affine function of its input, so first-order attribution is exact.
  bool linear = false;

  /// Throws std::invalid_argument on inconsistent dimensions.
  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class NodeKind { Embed, AttnQ, AttnK, AttnV, AttnO, MlpIn, MlpOut, ResidFinal };

/// A node of the computation graph. Sources (embed, attention-head outputs,
/// MLP outputs) write into the residual stream; destinations (head Q/K/V
/// inputs, MLP inputs, final logits input) read the sum of their incoming
/// edges.
struct NodeId {
  NodeKind kind = NodeKind::Embed;
  std::size_t layer = 0;
  std::size_t head = 0;

  bool is_source() const { return kind == NodeKind::Embed || kind == NodeKind::AttnO || kind == NodeKind::MlpOut; }
  /// "embed", "A.1.3.Q", "MLP in 0", "MLP out 1", "logits".
  std::string name() const;
  friend auto operator<=>(const NodeId&, const NodeId&) = default;
};

NodeId parse_node(std::string_view text);

struct Edge {
  NodeId src;
  NodeId dst;
  std::string name() const;  // "src->dst"
  friend auto operator<=>(const Edge&, const Edge&) = default;
};

Edge parse_edge(std::string_view text);

class ComputationGraph {
 public:
  explicit ComputationGraph(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  const std::vector<NodeId>& sources() const { return sources_; }
  const std::vector<NodeId>& destinations() const { return destinations_; }
  const std::vector<Edge>& edges() const { return edges_; }
  std::size_t num_edges() const { return edges_.size(); }
  std::size_t num_instances(std::size_t seq_len) const { return edges_.size() * seq_len; }

  std::size_t source_index(const NodeId& n) const;
  std::size_t destination_index(const NodeId& n) const;
  /// Throws std::out_of_range for an edge not in the graph.
  std::size_t edge_index(const Edge& e) const;
  std::optional<std::size_t> find_edge(const Edge& e) const;

  std::size_t edge_source(std::size_t edge) const { return edge_src_[edge]; }
  std::size_t edge_destination(std::size_t edge) const { return edge_dst_[edge]; }
  std::span<const std::size_t> incoming(std::size_t destination) const { return incoming_[destination]; }

  /// Every attention head as (layer, head), layer-major.
  std::vector<std::pair<std::size_t, std::size_t>> heads() const;

 private:
  ModelConfig config_;
  std::vector<NodeId> sources_;
  std::vector<NodeId> destinations_;
  std::vector<Edge> edges_;
  std::vector<std::size_t> edge_src_;
  std::vector<std::size_t> edge_dst_;
  std::vector<std::vector<std::size_t>> incoming_;
  std::map<Edge, std::size_t> edge_lookup_;
};

struct LayerParams {
  Tensor ln_attn;
  std::vector<Tensor> w_q, w_k, w_v;  // per head, (d_model, d_head)
  std::vector<Tensor> w_o;            // per head, (d_head, d_model)
  Tensor ln_mlp;
  Tensor w_in;   // (d_model, d_mlp)
  Tensor b_in;   // (d_mlp)
  Tensor w_out;  // (d_mlp, d_model)

  friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

struct Parameters {
  ModelConfig config;
  Tensor tok_embed;  // (vocab, d_model)
  Tensor pos_embed;  // (max_seq_len, d_model)
  std::vector<LayerParams> layers;
  Tensor ln_final;
  Tensor unembed;  // (d_model, vocab)

  /// Calls fn(name, tensor) for every parameter tensor in a fixed order.
  template <class Fn>
  void visit(Fn&& fn);
  template <class Fn>
  void visit(Fn&& fn) const;

  std::size_t count() const;
  /// Stable content hash of config and parameter bits (hex).
  std::string fingerprint() const;
  friend bool operator==(const Parameters&, const Parameters&) = default;
};

Parameters init_model(const ModelConfig& config);

/// Per-run record of every node activation. Source nodes store their
/// output, destination nodes the total input they received; each is
/// (seq_len, d_model).
struct ActivationCache {
  std::size_t seq_len = 0;
  std::vector<Tensor> source_outputs;
  std::vector<Tensor> destination_inputs;
  std::vector<Tensor> residuals;  // n_layers + 1 states; index l enters block l, last is final
  std::vector<Tensor> patterns;   // layer * n_heads + head, (seq_len, seq_len)
  Tensor logits;                  // (seq_len, vocab)

  std::span<const double> at(const ComputationGraph& graph, const NodeId& node, std::size_t position) const;
  const Tensor& pattern(std::size_t layer, std::size_t head, std::size_t n_heads) const {
    return patterns[layer * n_heads + head];
  }
};

struct EdgePatch {
  std::size_t edge = 0;
  std::size_t position = 0;
  Tensor value;  // (d_model)
};

/// Marks (edge, position) instances whose contribution is taken from
/// another run's cache instead of the run's own source output.
struct EdgeMaskPatch {
  const ActivationCache* source = nullptr;
  std::vector<char> mask;  // edge-major: mask[edge * seq_len + position]
};

struct HeadPatternPatch {
  std::size_t layer = 0;
  std::size_t head = 0;
  Tensor pattern;  // (seq_len, seq_len), row-causal
  double alpha = 1.0;
};

struct ResidualAdd {
  std::size_t layer = 0;  // residual index in [0, n_layers]
  std::size_t position = 0;
  Tensor vector;  // (d_model)
};

struct Interventions {
  std::vector<EdgePatch> edges;
  std::optional<EdgeMaskPatch> edge_mask;
  std::vector<HeadPatternPatch> heads;
  std::vector<ResidualAdd> residual;
  bool empty() const { return edges.empty() && !edge_mask && heads.empty() && residual.empty(); }
};

/// Everything recorded while running a token batch through the model.
struct Trace {
  Tape tape;
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  Var logits;                      // (batch, seq_len, vocab)
  std::vector<Var> params;         // Parameters::visit order
  std::vector<Var> sources;        // graph source order, (batch, seq_len, d_model)
  std::vector<Var> destinations;   // graph destination order
  std::vector<Var> residuals;
  std::vector<Var> patterns;
};

/// Runs `batch` sequences of equal length (tokens is batch-major). Interventions
/// require batch == 1. With node_inputs off, destinations share the residual
/// var instead of getting their own input nodes; the logits are identical and
/// the tape is smaller (training path).
Trace trace(const Parameters& params, std::span<const int> tokens, std::size_t batch = 1,
            const Interventions& interventions = {}, bool node_inputs = true);

ActivationCache cache_from_trace(const Trace& t, const ComputationGraph& graph);

/// Logits (seq_len, vocab) and a complete activation cache.
std::pair<Tensor, ActivationCache> run_with_cache(const Parameters& params, std::span<const int> tokens);

Tensor run_logits(const Parameters& params, std::span<const int> tokens, const Interventions& interventions = {});

Tensor run_with_edge_patch(const Parameters& params, std::span<const int> tokens, std::vector<EdgePatch> patches);

Tensor run_with_head_pattern_patch(const Parameters& params, std::span<const int> tokens,
                                   std::span<const std::pair<std::size_t, std::size_t>> heads,
                                   std::span<const Tensor> source_patterns, double alpha);

struct ResidualSite {
  std::size_t layer = 0;
  std::size_t position = 0;
};

/// The residual at `dest` becomes its natural value plus the residual cached
/// at `source` from a run on `vector_source_tokens`.
Tensor run_with_residual_add(const Parameters& params, std::span<const int> tokens, ResidualSite source,
                             ResidualSite dest, std::span<const int> vector_source_tokens);

// ---- template definitions ----

template <class Fn>
void Parameters::visit(Fn&& fn) {
  fn(std::string("tok_embed"), tok_embed);
  fn(std::string("pos_embed"), pos_embed);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    auto& L = layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    fn(p + "ln_attn", L.ln_attn);
    for (std::size_t h = 0; h < L.w_q.size(); ++h) {
      const std::string ph = p + "head." + std::to_string(h) + ".";
      fn(ph + "w_q", L.w_q[h]);
      fn(ph + "w_k", L.w_k[h]);
      fn(ph + "w_v", L.w_v[h]);
      fn(ph + "w_o", L.w_o[h]);
    }
    fn(p + "ln_mlp", L.ln_mlp);
    fn(p + "w_in", L.w_in);
    fn(p + "b_in", L.b_in);
    fn(p + "w_out", L.w_out);
  }
  fn(std::string("ln_final"), ln_final);
  fn(std::string("unembed"), unembed);
}

template <class Fn>
void Parameters::visit(Fn&& fn) const {
  const_cast<Parameters*>(this)->visit([&](const std::string& name, Tensor& t) { fn(name, static_cast<const Tensor&>(t)); });
}

}  // namespace circuitlab
