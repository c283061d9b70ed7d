#include "circuitlab/probes.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "circuitlab/rng.hpp"

namespace circuitlab {

int ProbeWeights::predict(std::span<const double> x) const {
  const std::size_t C = classes.size();
  const std::size_t d = weight.dim(0);
  if (x.size() != d) throw ShapeError("probe input has the wrong width");
  std::size_t best = 0;
  double best_v = -INFINITY;
  for (std::size_t c = 0; c < C; ++c) {
    double z = bias[c];
    for (std::size_t j = 0; j < d; ++j) z += x[j] * weight[j * C + c];
    if (z > best_v) {
      best_v = z;
      best = c;
    }
  }
  return classes[best];
}

double ProbeWeights::accuracy(const std::vector<std::vector<double>>& x, const std::vector<int>& y) const {
  if (x.size() != y.size()) throw std::invalid_argument("probe accuracy: size mismatch");
  if (x.empty()) return 0.0;
  std::size_t ok = 0;
  for (std::size_t i = 0; i < x.size(); ++i) ok += predict(x[i]) == y[i];
  return static_cast<double>(ok) / static_cast<double>(x.size());
}

ProbeWeights train_probe(const std::vector<std::vector<double>>& x, const std::vector<int>& y, const ProbeConfig& cfg) {
  if (x.size() != y.size() || x.empty()) throw std::invalid_argument("train_probe: need equally many states and labels");
  if (!(cfg.learning_rate > 0.0) || cfg.epochs == 0) throw std::invalid_argument("train_probe: invalid config");
  const std::size_t d = x.front().size();
  for (const auto& r : x)
    if (r.size() != d) throw ShapeError("train_probe: ragged states");
  const std::set<int> class_set(y.begin(), y.end());
  if (class_set.size() < 2) throw std::invalid_argument("train_probe: single-class data");

  ProbeWeights p;
  p.classes.assign(class_set.begin(), class_set.end());
  const std::size_t C = p.classes.size();
  p.weight = Tensor({d, C});
  p.bias = Tensor({C});
  std::vector<std::size_t> target(y.size());
  for (std::size_t i = 0; i < y.size(); ++i)
    target[i] = static_cast<std::size_t>(std::lower_bound(p.classes.begin(), p.classes.end(), y[i]) - p.classes.begin());

  // Canonical order first, so the seed alone decides the visiting order.
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (y[a] != y[b]) return y[a] < y[b];
    return x[a] < x[b];
  });
  auto rng = make_rng(cfg.seed, "probe");

  std::vector<double> mw(d * C, 0.0), vw(d * C, 0.0), mb(C, 0.0), vb(C, 0.0);
  std::vector<double> gw(d * C), gb(C), z(C);
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  std::size_t t = 0;
  const std::size_t bs = cfg.batch_size == 0 ? x.size() : cfg.batch_size;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(i) - 1));
      std::swap(order[i - 1], order[j]);
    }
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t end = std::min(order.size(), start + bs);
      std::fill(gw.begin(), gw.end(), 0.0);
      std::fill(gb.begin(), gb.end(), 0.0);
      for (std::size_t k = start; k < end; ++k) {
        const auto& xi = x[order[k]];
        for (std::size_t c = 0; c < C; ++c) {
          double s = p.bias[c];
          for (std::size_t j = 0; j < d; ++j) s += xi[j] * p.weight[j * C + c];
          z[c] = s;
        }
        const double mx = *std::max_element(z.begin(), z.end());
        double sum = 0.0;
        for (auto& v : z) sum += (v = std::exp(v - mx));
        for (std::size_t c = 0; c < C; ++c) {
          const double g = (z[c] / sum - (c == target[order[k]] ? 1.0 : 0.0)) / static_cast<double>(end - start);
          gb[c] += g;
          for (std::size_t j = 0; j < d; ++j) gw[j * C + c] += g * xi[j];
        }
      }
      ++t;
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
      const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
      auto step = [&](double& w, double& m, double& v, double g) {
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        w -= cfg.learning_rate * (m / c1) / (std::sqrt(v / c2) + eps);
      };
      for (std::size_t i = 0; i < d * C; ++i) step(p.weight[i], mw[i], vw[i], gw[i]);
      for (std::size_t c = 0; c < C; ++c) step(p.bias[c], mb[c], vb[c], gb[c]);
    }
  }
  p.train_accuracy = p.accuracy(x, y);
  return p;
}

std::string ProbeGrid::to_csv() const {
  std::ostringstream os;
  os << "layer";
  for (const auto& p : positions) os << ',' << p;
  os << '\n';
  for (std::size_t l = 0; l < n_states; ++l) {
    os << l;
    for (double a : accuracy[l]) os << ',' << a;
    os << '\n';
  }
  return os.str();
}

nlohmann::json ProbeGrid::to_json() const {
  return {{"positions", positions}, {"layers", n_states}, {"test_accuracy", accuracy}, {"train_accuracy", train_accuracy}};
}

ProbeGrid probe_layer_sweep(const Parameters& params, const std::vector<PromptPair>& train,
                            const std::vector<PromptPair>& test, const std::vector<std::string>& positions,
                            const ProbeConfig& cfg) {
  if (train.empty() || test.empty()) throw std::invalid_argument("probe_layer_sweep: empty split");
  ProbeGrid grid;
  grid.positions = positions;
  grid.n_states = params.config.n_layers + 1;
  grid.accuracy.assign(grid.n_states, std::vector<double>(positions.size(), 0.0));
  grid.train_accuracy = grid.accuracy;

  // states[split][state][position] -> rows
  using Rows = std::vector<std::vector<double>>;
  auto collect = [&](const std::vector<PromptPair>& pairs, std::vector<std::vector<Rows>>& states, std::vector<int>& y) {
    states.assign(grid.n_states, std::vector<Rows>(positions.size()));
    for (const auto& p : pairs) {
      const auto cache = run_with_cache(params, p.clean_tokens).second;
      for (std::size_t k = 0; k < positions.size(); ++k) {
        const auto pos = p.position_labels.position_of(positions[k]);
        if (!pos) throw std::invalid_argument("probe_layer_sweep: position '" + positions[k] + "' not in template");
        for (std::size_t l = 0; l < grid.n_states; ++l) {
          const auto row = cache.residuals[l].row(*pos);
          states[l][k].emplace_back(row.begin(), row.end());
        }
      }
      y.push_back(p.assignment.result);
    }
  };
  std::vector<std::vector<Rows>> train_states, test_states;
  std::vector<int> train_y, test_y;
  collect(train, train_states, train_y);
  collect(test, test_states, test_y);
  for (std::size_t l = 0; l < grid.n_states; ++l) {
    for (std::size_t k = 0; k < positions.size(); ++k) {
      ProbeWeights w = train_probe(train_states[l][k], train_y, cfg);
      grid.train_accuracy[l][k] = w.train_accuracy;
      grid.accuracy[l][k] = w.accuracy(test_states[l][k], test_y);
    }
  }
  return grid;
}

}  // namespace circuitlab
