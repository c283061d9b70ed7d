#include "circuitlab/checkpoint.hpp"

#include <stdexcept>

#include "circuitlab/io.hpp"

namespace circuitlab {

namespace {
constexpr int kFormatVersion = 1;
}

nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers}, {"n_heads", c.n_heads},       {"d_model", c.d_model},
          {"d_head", c.d_head},     {"d_mlp", c.d_mlp},           {"vocab_size", c.vocab_size},
          {"max_seq_len", c.max_seq_len}, {"seed", c.seed},       {"linear", c.linear}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.d_head = j.at("d_head").get<std::size_t>();
  c.d_mlp = j.at("d_mlp").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  c.seed = j.value("seed", std::uint64_t{0});
  c.linear = j.value("linear", false);
  c.validate();
  return c;
}

nlohmann::json checkpoint_to_json(const Parameters& p) {
  nlohmann::json params = nlohmann::json::array();
  p.visit([&](const std::string& name, const Tensor& t) {
    params.push_back({{"name", name}, {"shape", t.shape()}, {"data", t.data()}});
  });
  return {{"format_version", kFormatVersion}, {"config", config_to_json(p.config)}, {"params", params}};
}

Parameters checkpoint_from_json(const nlohmann::json& j) {
  if (j.at("format_version").get<int>() != kFormatVersion) throw std::runtime_error("unsupported checkpoint version");
  Parameters p = init_model(config_from_json(j.at("config")));
  const auto& list = j.at("params");
  std::size_t i = 0;
  p.visit([&](const std::string& name, Tensor& t) {
    if (i >= list.size()) throw std::runtime_error("checkpoint is missing parameter '" + name + "'");
    const auto& e = list[i++];
    if (e.at("name").get<std::string>() != name) {
      throw std::runtime_error("checkpoint parameter order mismatch at '" + name + "'");
    }
    Tensor loaded(e.at("shape").get<Shape>(), e.at("data").get<std::vector<double>>());
    if (loaded.shape() != t.shape()) throw std::runtime_error("shape mismatch for '" + name + "'");
    t = std::move(loaded);
  });
  if (i != list.size()) throw std::runtime_error("checkpoint has extra parameters");
  return p;
}

void save_checkpoint(const std::string& path, const Parameters& p) {
  write_file_atomic(path, checkpoint_to_json(p).dump());
}

Parameters load_checkpoint(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
    return checkpoint_from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed checkpoint '" + path + "': " + e.what());
  }
}

}  // namespace circuitlab
