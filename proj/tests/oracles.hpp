#pragma once

// Independent reference computations shared by the unit and acceptance tests.
// Nothing here calls into the code it checks except to build inputs.

#include <algorithm>
#include <cmath>
#include <functional>
#include <queue>
#include <random>
#include <set>
#include <vector>

#include "pkd/distill.hpp"
#include "pkd/gta.hpp"
#include "pkd/models.hpp"
#include "pkd/ngs.hpp"

namespace oracle {

using pkd::Matrix;
using pkd::Rng;

/// Erdos-Renyi graph with every class present and nonempty texts.
inline pkd::TagGraph random_graph(int n, double p, int features, int classes, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  pkd::EdgeList edges;
  for (int u = 0; u < n; ++u) {
    for (int v = u + 1; v < n; ++v) {
      if (unit(rng) < p) edges.emplace_back(u, v);
    }
  }
  Matrix x(n, features);
  for (int i = 0; i < n; ++i) {
    for (int f = 0; f < features; ++f) x(i, f) = gauss(rng);
  }
  std::vector<int> labels(n);
  for (int i = 0; i < n; ++i) labels[i] = i < classes ? i : std::uniform_int_distribution<int>(0, classes - 1)(rng);
  std::vector<std::string> texts(n);
  for (int i = 0; i < n; ++i) texts[i] = "Title " + std::to_string(i) + ". Abstract of node " + std::to_string(i);
  return pkd::build_graph(std::move(edges), std::move(x), std::move(labels), std::move(texts), classes);
}

/// Random strictly positive distribution with occasional near-degenerate mass.
inline pkd::RowVector random_distribution(int c, Rng& rng) {
  std::gamma_distribution<double> shape(std::uniform_real_distribution<double>(0.1, 3.0)(rng), 1.0);
  pkd::RowVector p(c);
  for (int k = 0; k < c; ++k) p(k) = shape(rng);
  p /= p.sum();
  p = p.cwiseMax(2e-12);
  return p / p.sum();
}

inline Matrix random_prob_matrix(int rows, int c, Rng& rng) {
  Matrix m(rows, c);
  for (int i = 0; i < rows; ++i) m.row(i) = random_distribution(c, rng);
  return m;
}

inline Matrix random_matrix(int rows, int cols, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> gauss(0.0, scale);
  Matrix m(rows, cols);
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) m(i, j) = gauss(rng);
  }
  return m;
}

/// Plain softmax without clamping, long double accumulation.
inline Matrix softmax(const Matrix& z) {
  Matrix p(z.rows(), z.cols());
  for (int i = 0; i < z.rows(); ++i) {
    const double m = z.row(i).maxCoeff();
    long double s = 0;
    for (int k = 0; k < z.cols(); ++k) s += std::exp(static_cast<long double>(z(i, k) - m));
    for (int k = 0; k < z.cols(); ++k) p(i, k) = static_cast<double>(std::exp(static_cast<long double>(z(i, k) - m)) / s);
  }
  return p;
}

inline double kl(const pkd::RowVector& p, const pkd::RowVector& q) {
  long double s = 0;
  for (int k = 0; k < p.size(); ++k) s += static_cast<long double>(p(k)) * std::log(static_cast<long double>(p(k)) / q(k));
  return static_cast<double>(s);
}

// ---------------------------------------------------------------------------
// Finite differences

inline constexpr double kStep = 1e-5;
/// Entries whose gradients are both below this are compared absolutely.
inline constexpr double kMagnitudeFloor = 1e-3;

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), kMagnitudeFloor});
}

/// Max relative error between `grad` and central differences of `f` over
/// every entry of `params`.
inline double check_params(pkd::ModelParams& params, const pkd::ModelParams& grad, const std::function<double()>& f) {
  double worst = 0;
  for (std::size_t t = 0; t < params.tensors().size(); ++t) {
    Matrix& w = params.tensors()[t].value;
    const Matrix& g = grad.tensors()[t].value;
    for (Eigen::Index k = 0; k < w.size(); ++k) {
      const double keep = w.data()[k];
      w.data()[k] = keep + kStep;
      const double up = f();
      w.data()[k] = keep - kStep;
      const double down = f();
      w.data()[k] = keep;
      worst = std::max(worst, relative_error(g.data()[k], (up - down) / (2 * kStep)));
    }
  }
  return worst;
}

inline double check_matrix(Matrix& x, const Matrix& grad, const std::function<double()>& f) {
  double worst = 0;
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    const double keep = x.data()[k];
    x.data()[k] = keep + kStep;
    const double up = f();
    x.data()[k] = keep - kStep;
    const double down = f();
    x.data()[k] = keep;
    worst = std::max(worst, relative_error(grad.data()[k], (up - down) / (2 * kStep)));
  }
  return worst;
}

/// backward() against finite differences of sum(U .* logits) for a random
/// 12-node instance.
inline double model_gradient_error(pkd::ModelKind kind, Rng& rng) {
  const auto g = random_graph(12, 0.3, 5, 3, rng);
  const auto ops = pkd::GraphOperators::build(g);
  pkd::ModelDims d;
  d.input_dim = g.feature_dim();
  d.hidden_dim = 6;
  d.output_dim = g.class_count();
  d.appnp_steps = 4;
  pkd::Model m = pkd::init_model(kind, d, rng);
  // Nonzero biases so that their gradients are exercised too.
  for (auto& t : m.params.tensors()) t.value += random_matrix(t.value.rows(), t.value.cols(), rng, 0.1);
  const Matrix u = random_matrix(g.node_count(), g.class_count(), rng);
  const auto fwd = pkd::forward(m, g.features(), &ops);
  const auto grad = pkd::backward(m, g.features(), &ops, fwd, u);
  return check_params(m.params, grad, [&] { return (pkd::forward(m, g.features(), &ops).logits.array() * u.array()).sum(); });
}

/// kd_loss gradients w.r.t. logits and targets against finite differences.
inline double kd_gradient_error(Rng& rng) {
  const int n = 12;
  const int c = 4;
  Matrix z = random_matrix(n, c, rng, 2.0);
  Matrix targets = random_prob_matrix(n, c, rng);
  std::vector<pkd::LabeledNode> gold;
  for (int i = 0; i < n; i += 3) gold.push_back({i, std::uniform_int_distribution<int>(0, c - 1)(rng)});
  std::vector<int> scope;
  for (int i = 0; i < n; ++i) {
    if (i % 4 != 1) scope.push_back(i);
  }
  std::uniform_real_distribution<double> w(0.05, 2.0);
  const pkd::KdWeights kw{w(rng), w(rng), w(rng)};
  auto loss = [&] { return pkd::kd_loss(softmax(z), targets, gold, kw, scope, nullptr).total; };
  Matrix grad;
  Matrix tgrad;
  pkd::kd_loss(softmax(z), targets, gold, kw, scope, &grad, &tgrad);
  return std::max(check_matrix(z, grad, loss), check_matrix(targets, tgrad, loss));
}

/// policy_objective and value_objective gradients against finite differences.
inline double ppo_gradient_error(Rng& rng) {
  const int dim = 6;
  const int b = 3;
  pkd::RlConfig cfg;
  cfg.hidden_dim = 5;
  cfg.head_init_scale = 1.0;
  pkd::Model policy = pkd::init_policy(dim, b, cfg, rng);
  pkd::Model value = pkd::init_value(dim, cfg, rng);
  std::vector<pkd::PpoTransition> batch;
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int i = 0; i < 12; ++i) {
    pkd::PpoTransition t;
    t.node = i;
    t.state = random_matrix(1, dim, rng).row(0);
    t.action = std::uniform_int_distribution<int>(0, b - 1)(rng);
    t.reward = gauss(rng);
    t.value = gauss(rng);
    const auto probs = pkd::forward(policy, t.state, nullptr).probs;
    t.old_log_prob = std::log(probs(0, t.action)) + 0.5 * gauss(rng);
    batch.push_back(t);
  }
  pkd::ModelParams pg;
  pkd::policy_objective(policy, value, batch, cfg, &pg);
  const double ep =
      check_params(policy.params, pg, [&] { return pkd::policy_objective(policy, value, batch, cfg, nullptr).total; });
  pkd::ModelParams vg;
  pkd::value_objective(value, batch, &vg);
  const double ev = check_params(value.params, vg, [&] { return pkd::value_objective(value, batch, nullptr); });
  return std::max(ep, ev);
}

// ---------------------------------------------------------------------------
// Brute-force graph facts

inline std::vector<std::vector<bool>> adjacency(const pkd::TagGraph& g) {
  std::vector<std::vector<bool>> a(g.node_count(), std::vector<bool>(g.node_count(), false));
  for (auto [u, v] : g.edges()) a[u][v] = a[v][u] = true;
  return a;
}

/// All-pairs hop distances (Floyd-Warshall); -1 when unreachable.
inline std::vector<std::vector<int>> distances(const pkd::TagGraph& g) {
  const int n = g.node_count();
  const int inf = 1 << 28;
  std::vector<std::vector<int>> d(n, std::vector<int>(n, inf));
  for (int i = 0; i < n; ++i) d[i][i] = 0;
  for (auto [u, v] : g.edges()) d[u][v] = d[v][u] = 1;
  for (int k = 0; k < n; ++k) {
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) d[i][j] = std::min(d[i][j], d[i][k] + d[k][j]);
    }
  }
  for (auto& row : d) {
    for (int& x : row) {
      if (x >= inf) x = -1;
    }
  }
  return d;
}

inline bool has_repeat(const std::vector<int>& walk) {
  for (std::size_t i = 0; i < walk.size(); ++i) {
    for (std::size_t j = i + 1; j < walk.size(); ++j) {
      if (walk[i] == walk[j]) return true;
    }
  }
  return false;
}

/// Expected record count of the degree task: ceil(|group| / 3) per group.
inline int degree_record_count(const pkd::TagGraph& g) {
  std::vector<int> groups(g.node_count() + 1, 0);
  for (int v = 0; v < g.node_count(); ++v) {
    int deg = 0;
    for (int u = 0; u < g.node_count(); ++u) deg += u != v && g.has_edge(u, v);
    ++groups[deg];
  }
  int total = 0;
  for (int s : groups) total += (s + 2) / 3;
  return total;
}

/// Verdict on a list of GTA records against brute-force recomputation.
/// Returns the number of records that disagree.
inline int check_gta(const pkd::TagGraph& g, const std::vector<pkd::GtaRecord>& records, int t, int walk_len) {
  const auto a = adjacency(g);
  const auto d = distances(g);
  int bad = 0;
  for (const auto& r : records) {
    bool ok = true;
    switch (r.task) {
      case pkd::GtaTask::kConnectivity: {
        ok = r.nodes.size() == 2 && r.nodes[0] < r.nodes[1];
        if (ok) {
          const bool e = a[r.nodes[0]][r.nodes[1]];
          ok = std::get<bool>(r.structured) == e && r.answer == (e ? "True" : "False");
        }
        break;
      }
      case pkd::GtaTask::kDegree: {
        ok = r.nodes.size() == 1;
        if (ok) {
          int deg = 0;
          for (int u = 0; u < g.node_count(); ++u) deg += a[r.nodes[0]][u];
          ok = std::get<int>(r.structured) == deg && r.answer == std::to_string(deg);
        }
        break;
      }
      case pkd::GtaTask::kCycle: {
        const auto& w = r.nodes;
        ok = static_cast<int>(w.size()) > 10 && static_cast<int>(w.size()) <= walk_len;
        for (std::size_t i = 1; ok && i < w.size(); ++i) ok = a[w[i - 1]][w[i]];
        for (std::size_t i = 2; ok && i < w.size(); ++i) ok = w[i] != w[i - 2];
        // A short walk must have ended at a dead end.
        if (ok && static_cast<int>(w.size()) < walk_len) {
          int exits = 0;
          for (int u = 0; u < g.node_count(); ++u) exits += a[w.back()][u] && u != w[w.size() - 2];
          ok = exits == 0;
        }
        const bool rep = has_repeat(w);
        ok = ok && std::get<bool>(r.structured) == rep && r.answer == (rep ? "True" : "False");
        break;
      }
      case pkd::GtaTask::kTextgen: {
        const auto& p = r.nodes;
        ok = p.size() >= 2;
        if (ok) {
          const int s = p.front();
          const int target = p.back();
          ok = d[s][target] == static_cast<int>(p.size()) - 1 && d[s][target] > t &&
               r.answer == g.texts()[target];
          for (std::size_t i = 1; ok && i < p.size(); ++i) ok = a[p[i - 1]][p[i]];
        }
        break;
      }
    }
    bad += !ok;
  }
  return bad;
}

}  // namespace oracle
