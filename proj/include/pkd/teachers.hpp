#pragma once

#include <string>
#include <vector>

#include "pkd/models.hpp"

namespace pkd {

/// B teachers with their per-node class distributions and penultimate
/// embeddings. `models` may be empty for synthetic ensembles built directly
/// from probability tables.
struct TeacherEnsemble {
  std::vector<std::string> names;
  std::vector<Matrix> probs;       // B x (N x C)
  std::vector<Matrix> embeddings;  // B x (N x d_b)
  std::vector<Model> models;

  int size() const noexcept { return static_cast<int>(probs.size()); }
  int node_count() const noexcept { return probs.empty() ? 0 : static_cast<int>(probs[0].rows()); }
  int class_count() const noexcept { return probs.empty() ? 0 : static_cast<int>(probs[0].cols()); }

  /// B x C matrix whose row b is teacher b's distribution for `node`.
  Matrix node_rows(int node) const;
  /// Per-teacher predicted class for `node`.
  std::vector<int> predictions(int node) const;
};

/// Runs each model on the graph and collects its outputs.
TeacherEnsemble make_ensemble(std::vector<Model> models, const TagGraph& g, const GraphOperators& ops);

}  // namespace pkd
