#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "pkd/common.hpp"

namespace pkd {

using EdgeList = std::vector<std::pair<int, int>>;

/// Immutable text-attributed graph. Edges are undirected, stored once as
/// (u, v) with u < v, sorted; self-loops are never stored.
class TagGraph {
 public:
  TagGraph() = default;

  int node_count() const noexcept { return static_cast<int>(labels_.size()); }
  int class_count() const noexcept { return class_count_; }
  int feature_dim() const noexcept { return static_cast<int>(features_.cols()); }
  std::size_t edge_count() const noexcept { return edges_.size(); }

  const EdgeList& edges() const noexcept { return edges_; }
  const Matrix& features() const noexcept { return features_; }
  const std::vector<int>& labels() const noexcept { return labels_; }
  const std::vector<std::string>& texts() const noexcept { return texts_; }

  /// Sorted neighbour list of `node`.
  const std::vector<int>& neighbors(int node) const { return adjacency_.at(node); }
  int degree(int node) const { return static_cast<int>(adjacency_.at(node).size()); }
  bool has_edge(int u, int v) const;

  friend TagGraph build_graph(EdgeList, Matrix, std::vector<int>, std::vector<std::string>, int);

 private:
  EdgeList edges_;
  Matrix features_;
  std::vector<int> labels_;
  std::vector<std::string> texts_;
  int class_count_ = 0;
  std::vector<std::vector<int>> adjacency_;
};

/// Validates and canonicalises the inputs. `class_count` of 0 infers
/// C = max(label) + 1. Throws std::invalid_argument on dimension mismatch or
/// self-loops and std::out_of_range on bad indices.
TagGraph build_graph(EdgeList edges, Matrix features, std::vector<int> labels,
                     std::vector<std::string> texts, int class_count = 0);

struct SbmConfig {
  int node_count = 300;
  int class_count = 5;
  double p_in = 0.1;
  double p_out = 0.01;
  int feature_dim = 32;
  double class_separation = 1.0;
  double feature_noise = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Stochastic block model with Gaussian class-centred features. Node i
/// belongs to class i mod C. Pure function of the config.
TagGraph generate_sbm(const SbmConfig& cfg);

/// Names used for the classes of synthetic graphs ("Class 0", ...).
std::vector<std::string> default_class_names(int class_count);

/// Fraction of edges whose endpoints share a label.
double homophily_ratio(const TagGraph& g);

struct Split {
  std::vector<int> train;
  std::vector<int> validation;
  std::vector<int> test;
};

/// Stratified split: exactly `labels_per_class` training nodes per class,
/// then round(val_frac * N) validation and round(test_frac * N) test nodes
/// drawn from the remainder.
Split split_nodes(const TagGraph& g, int labels_per_class, double val_frac, double test_frac,
                  std::uint64_t seed);

/// Dense D^{-1/2}(A+I)D^{-1/2}.
Matrix normalized_adjacency(const TagGraph& g);

/// Sparse propagation operators shared by the GNN kinds. Built once per graph.
struct GraphOperators {
  SparseMatrix norm_adj;    // D^{-1/2}(A+I)D^{-1/2}
  SparseMatrix hop1_mean;   // row-mean over exact 1-hop neighbours
  SparseMatrix hop2_mean;   // row-mean over nodes at shortest distance exactly 2
  std::vector<int> attention_offsets;  // CSR rows over self + neighbours
  std::vector<int> attention_targets;
  // norm_adj * X for the graph's own features, reused by GCN layers.
  Matrix feature_cache;
  Matrix propagated_features;

  /// Cached norm_adj * inputs when `inputs` equals the graph features.
  const Matrix* propagated(const Matrix& inputs) const;

  static GraphOperators build(const TagGraph& g);
  int node_count() const noexcept { return static_cast<int>(norm_adj.rows()); }
};

// Persistence: {"n","c","edges","features","labels","texts"}; unknown keys rejected.
std::string graph_to_json(const TagGraph& g);
TagGraph graph_from_json(const std::string& text);
void save_graph(const TagGraph& g, const std::filesystem::path& path);
TagGraph load_graph(const std::filesystem::path& path);

std::string split_to_json(const Split& s);
Split split_from_json(const std::string& text);

}  // namespace pkd
