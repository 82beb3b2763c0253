#include "pkd/graph.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include <json.hpp>

#include "pkd/io.hpp"

namespace pkd {

using json = nlohmann::ordered_json;

bool TagGraph::has_edge(int u, int v) const {
  const auto& nb = adjacency_.at(u);
  return std::binary_search(nb.begin(), nb.end(), v);
}

TagGraph build_graph(EdgeList edges, Matrix features, std::vector<int> labels,
                     std::vector<std::string> texts, int class_count) {
  const int n = static_cast<int>(labels.size());
  if (features.rows() != n) {
    throw std::invalid_argument("feature rows (" + std::to_string(features.rows()) +
                                ") != label count (" + std::to_string(n) + ")");
  }
  if (features.cols() < 1) throw std::invalid_argument("feature dimension must be >= 1");
  if (texts.empty()) texts.assign(n, "");
  if (static_cast<int>(texts.size()) != n) throw std::invalid_argument("text count != node count");
  if (!features.allFinite()) throw std::invalid_argument("features contain non-finite values");

  int max_label = -1;
  for (int y : labels) {
    if (y < 0) throw std::out_of_range("negative label");
    max_label = std::max(max_label, y);
  }
  if (class_count == 0) class_count = max_label + 1;
  if (class_count < 2) throw std::invalid_argument("class count must be >= 2");
  if (max_label >= class_count) throw std::out_of_range("label >= class count");

  for (auto& [u, v] : edges) {
    if (u < 0 || v < 0 || u >= n || v >= n) {
      throw std::out_of_range("edge (" + std::to_string(u) + "," + std::to_string(v) +
                              ") outside [0," + std::to_string(n) + ")");
    }
    if (u == v) throw std::invalid_argument("self-loop on node " + std::to_string(u));
    if (u > v) std::swap(u, v);
  }
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());

  TagGraph g;
  g.adjacency_.assign(n, {});
  for (const auto& [u, v] : edges) {
    g.adjacency_[u].push_back(v);
    g.adjacency_[v].push_back(u);
  }
  for (auto& nb : g.adjacency_) std::sort(nb.begin(), nb.end());
  g.edges_ = std::move(edges);
  g.features_ = std::move(features);
  g.labels_ = std::move(labels);
  g.texts_ = std::move(texts);
  g.class_count_ = class_count;
  return g;
}

void SbmConfig::validate() const {
  if (node_count < 1) throw std::invalid_argument("sbm: node_count must be >= 1");
  if (class_count < 2) throw std::invalid_argument("sbm: class_count must be >= 2");
  if (feature_dim < 1) throw std::invalid_argument("sbm: feature_dim must be >= 1");
  if (!(0.0 <= p_out && p_out <= p_in && p_in <= 1.0)) {
    throw std::invalid_argument("sbm: require 0 <= p_out <= p_in <= 1");
  }
  if (!(feature_noise >= 0.0) || !std::isfinite(class_separation)) {
    throw std::invalid_argument("sbm: invalid feature parameters");
  }
}

std::vector<std::string> default_class_names(int class_count) {
  std::vector<std::string> names;
  names.reserve(class_count);
  for (int c = 0; c < class_count; ++c) names.push_back("Class " + std::to_string(c));
  return names;
}

TagGraph generate_sbm(const SbmConfig& cfg) {
  cfg.validate();
  const int n = cfg.node_count;
  const int classes = cfg.class_count;
  Rng rng(derive_seed(cfg.seed, "sbm"));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  std::vector<int> labels(n);
  for (int i = 0; i < n; ++i) labels[i] = i % classes;

  EdgeList edges;
  for (int u = 0; u < n; ++u) {
    for (int v = u + 1; v < n; ++v) {
      const double p = labels[u] == labels[v] ? cfg.p_in : cfg.p_out;
      if (unit(rng) < p) edges.emplace_back(u, v);
    }
  }

  // Class centres: random directions scaled to the configured separation.
  Matrix centers(classes, cfg.feature_dim);
  for (int c = 0; c < classes; ++c) {
    for (int f = 0; f < cfg.feature_dim; ++f) centers(c, f) = gauss(rng);
    const double norm = centers.row(c).norm();
    if (norm > 0) centers.row(c) *= cfg.class_separation / norm;
  }
  Matrix features(n, cfg.feature_dim);
  for (int i = 0; i < n; ++i) {
    for (int f = 0; f < cfg.feature_dim; ++f) {
      features(i, f) = centers(labels[i], f) + cfg.feature_noise * gauss(rng);
    }
  }

  const auto names = default_class_names(classes);
  std::vector<std::string> texts(n);
  for (int i = 0; i < n; ++i) {
    texts[i] = "Document " + std::to_string(i) + " on topic " + names[labels[i]] +
               ". This synthetic abstract discusses " + names[labels[i]] +
               " and cites related documents of the collection.";
  }
  return build_graph(std::move(edges), std::move(features), std::move(labels), std::move(texts),
                     classes);
}

double homophily_ratio(const TagGraph& g) {
  if (g.edge_count() == 0) throw std::invalid_argument("homophily_ratio: graph has no edges");
  std::size_t same = 0;
  for (const auto& [u, v] : g.edges()) same += g.labels()[u] == g.labels()[v];
  return static_cast<double>(same) / static_cast<double>(g.edge_count());
}

Split split_nodes(const TagGraph& g, int labels_per_class, double val_frac, double test_frac,
                  std::uint64_t seed) {
  const int n = g.node_count();
  if (labels_per_class < 0) throw std::invalid_argument("labels_per_class must be >= 0");
  if (val_frac < 0 || test_frac < 0) throw std::invalid_argument("fractions must be >= 0");
  Rng rng(derive_seed(seed, "split"));

  std::vector<std::vector<int>> members(g.class_count());
  for (int i = 0; i < n; ++i) members[g.labels()[i]].push_back(i);

  Split split;
  std::vector<char> used(n, 0);
  for (int c = 0; c < g.class_count(); ++c) {
    auto& m = members[c];
    if (static_cast<int>(m.size()) < labels_per_class) {
      throw std::invalid_argument("class " + std::to_string(c) + " has " +
                                  std::to_string(m.size()) + " members, need " +
                                  std::to_string(labels_per_class));
    }
    std::shuffle(m.begin(), m.end(), rng);
    for (int k = 0; k < labels_per_class; ++k) {
      split.train.push_back(m[k]);
      used[m[k]] = 1;
    }
  }

  std::vector<int> rest;
  for (int i = 0; i < n; ++i) {
    if (!used[i]) rest.push_back(i);
  }
  std::shuffle(rest.begin(), rest.end(), rng);
  const auto n_val = static_cast<std::size_t>(std::llround(val_frac * n));
  const auto n_test = static_cast<std::size_t>(std::llround(test_frac * n));
  if (n_val + n_test > rest.size()) {
    throw std::invalid_argument("split: train + validation + test exceed node count");
  }
  split.validation.assign(rest.begin(), rest.begin() + n_val);
  split.test.assign(rest.begin() + n_val, rest.begin() + n_val + n_test);
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.validation.begin(), split.validation.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

Matrix normalized_adjacency(const TagGraph& g) {
  const int n = g.node_count();
  Matrix a = Matrix::Identity(n, n);
  for (const auto& [u, v] : g.edges()) {
    a(u, v) = 1.0;
    a(v, u) = 1.0;
  }
  Eigen::VectorXd inv_sqrt(n);
  for (int i = 0; i < n; ++i) inv_sqrt(i) = 1.0 / std::sqrt(g.degree(i) + 1.0);
  return inv_sqrt.asDiagonal() * a * inv_sqrt.asDiagonal();
}

const Matrix* GraphOperators::propagated(const Matrix& inputs) const {
  if (inputs.rows() != feature_cache.rows() || inputs.cols() != feature_cache.cols()) return nullptr;
  return inputs == feature_cache ? &propagated_features : nullptr;
}

GraphOperators GraphOperators::build(const TagGraph& g) {
  const int n = g.node_count();
  GraphOperators ops;
  using Triplet = Eigen::Triplet<double>;

  std::vector<Triplet> norm;
  std::vector<Triplet> hop1;
  std::vector<Triplet> hop2;
  ops.attention_offsets.assign(1, 0);
  std::vector<int> mark(n, -1);
  std::vector<int> two_hop;
  for (int i = 0; i < n; ++i) {
    const auto& nb = g.neighbors(i);
    const double di = 1.0 / std::sqrt(nb.size() + 1.0);
    norm.emplace_back(i, i, di * di);

    // Self first, then sorted neighbours.
    ops.attention_targets.push_back(i);
    for (int j : nb) {
      norm.emplace_back(i, j, di / std::sqrt(g.degree(j) + 1.0));
      hop1.emplace_back(i, j, 1.0 / static_cast<double>(nb.size()));
      ops.attention_targets.push_back(j);
    }
    ops.attention_offsets.push_back(static_cast<int>(ops.attention_targets.size()));

    mark[i] = i;
    for (int j : nb) mark[j] = i;
    two_hop.clear();
    for (int j : nb) {
      for (int k : g.neighbors(j)) {
        if (mark[k] != i) {
          mark[k] = i;
          two_hop.push_back(k);
        }
      }
    }
    std::sort(two_hop.begin(), two_hop.end());
    for (int k : two_hop) hop2.emplace_back(i, k, 1.0 / static_cast<double>(two_hop.size()));
  }
  ops.norm_adj.resize(n, n);
  ops.norm_adj.setFromTriplets(norm.begin(), norm.end());
  ops.hop1_mean.resize(n, n);
  ops.hop1_mean.setFromTriplets(hop1.begin(), hop1.end());
  ops.hop2_mean.resize(n, n);
  ops.hop2_mean.setFromTriplets(hop2.begin(), hop2.end());
  ops.feature_cache = g.features();
  ops.propagated_features = ops.norm_adj * g.features();
  return ops;
}

// ---------------------------------------------------------------------------
// JSON

std::string graph_to_json(const TagGraph& g) {
  json j;
  j["n"] = g.node_count();
  j["c"] = g.class_count();
  json edges = json::array();
  for (const auto& [u, v] : g.edges()) edges.push_back({u, v});
  j["edges"] = std::move(edges);
  json feats = json::array();
  for (int i = 0; i < g.node_count(); ++i) {
    json row = json::array();
    for (int f = 0; f < g.feature_dim(); ++f) row.push_back(g.features()(i, f));
    feats.push_back(std::move(row));
  }
  j["features"] = std::move(feats);
  j["labels"] = g.labels();
  j["texts"] = g.texts();
  return j.dump();
}

TagGraph graph_from_json(const std::string& text) {
  const json j = json::parse(text);
  if (!j.is_object()) throw std::invalid_argument("graph json: expected an object");
  static const std::set<std::string> allowed = {"n", "c", "edges", "features", "labels", "texts"};
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) throw std::invalid_argument("graph json: unknown key '" + key + "'");
  }
  for (const auto& key : allowed) {
    if (!j.contains(key)) throw std::invalid_argument("graph json: missing key '" + key + "'");
  }
  const int n = j.at("n").get<int>();
  const int c = j.at("c").get<int>();
  EdgeList edges;
  for (const auto& e : j.at("edges")) {
    if (!e.is_array() || e.size() != 2) throw std::invalid_argument("graph json: bad edge");
    edges.emplace_back(e[0].get<int>(), e[1].get<int>());
  }
  const auto& feats = j.at("features");
  if (static_cast<int>(feats.size()) != n) throw std::invalid_argument("graph json: features rows != n");
  const int f = n > 0 ? static_cast<int>(feats[0].size()) : 0;
  Matrix x(n, f);
  for (int i = 0; i < n; ++i) {
    if (static_cast<int>(feats[i].size()) != f) throw std::invalid_argument("graph json: ragged features");
    for (int k = 0; k < f; ++k) x(i, k) = feats[i][k].get<double>();
  }
  auto labels = j.at("labels").get<std::vector<int>>();
  auto texts = j.at("texts").get<std::vector<std::string>>();
  if (static_cast<int>(labels.size()) != n) throw std::invalid_argument("graph json: labels length != n");
  return build_graph(std::move(edges), std::move(x), std::move(labels), std::move(texts), c);
}

void save_graph(const TagGraph& g, const std::filesystem::path& path) {
  write_text_file(path, graph_to_json(g) + "\n");
}

TagGraph load_graph(const std::filesystem::path& path) { return graph_from_json(read_text_file(path)); }

std::string split_to_json(const Split& s) {
  json j;
  j["train"] = s.train;
  j["validation"] = s.validation;
  j["test"] = s.test;
  return j.dump();
}

Split split_from_json(const std::string& text) {
  const json j = json::parse(text);
  Split s;
  s.train = j.at("train").get<std::vector<int>>();
  s.validation = j.at("validation").get<std::vector<int>>();
  s.test = j.at("test").get<std::vector<int>>();
  return s;
}

}  // namespace pkd
