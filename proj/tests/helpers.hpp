#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "circuitlab/dataset.hpp"
#include "circuitlab/model.hpp"
#include "circuitlab/rng.hpp"
#include "circuitlab/tensor.hpp"
#include "circuitlab/tokenizer.hpp"

namespace testutil {

using namespace circuitlab;

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& x : t.values()) x = scale * standard_normal(rng);
  return t;
}

/// Small model over the standard vocabulary, long enough for every template.
inline ModelConfig small_config(std::size_t layers = 2, std::size_t heads = 2, std::uint64_t seed = 1) {
  ModelConfig c;
  c.n_layers = layers;
  c.n_heads = heads;
  c.d_model = 16;
  c.d_head = 8;
  c.d_mlp = 32;
  c.vocab_size = Tokenizer::standard().size();
  c.max_seq_len = 80;
  c.seed = seed;
  return c;
}

/// Random model with enlarged output projections, so heads and MLPs move the logits.
inline Parameters small_model(std::size_t layers = 2, std::size_t heads = 2, std::uint64_t seed = 1,
                              bool linear = false) {
  ModelConfig c = small_config(layers, heads, seed);
  c.linear = linear;
  Parameters p = init_model(c);
  for (auto& L : p.layers) {
    for (auto& w : L.w_o)
      for (double& x : w.values()) x *= 4.0;
    for (double& x : L.w_out.values()) x *= 4.0;
  }
  return p;
}

inline std::vector<PromptPair> add_pairs(int template_id, std::size_t n, ErrorType e, std::uint64_t seed) {
  return generate_pairs(get_template(Operation::Add, template_id), n, e, seed);
}

}  // namespace testutil
