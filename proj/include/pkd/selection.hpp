#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pkd/teachers.hpp"

namespace pkd {

/// KL(p || q) in nats. Rows must be equal length, entries >= kProbFloor and
/// each sum to 1 within 1e-9.
double kl_divergence(const RowVector& p, const RowVector& q);

/// K-uncertainty: sum over teacher pairs i<j of KL(P_i||P_j) + KL(P_j||P_i).
/// `rows` is B x C with B >= 2.
double k_uncertainty(const Matrix& rows);

/// Mean KL of each teacher row from the ensemble mean distribution.
double node_uncertainty(const Matrix& rows);

/// Shannon entropy (nats) of the mean teacher distribution.
double mean_entropy(const Matrix& rows);

struct UncertaintyScore {
  int node = 0;
  double delta_k = 0;
  double delta_v = 0;
};

/// Pool nodes sorted by descending delta_k, ties by ascending node index.
struct PreferenceRank {
  std::vector<UncertaintyScore> entries;
};

PreferenceRank preference_rank(const TeacherEnsemble& teachers, std::span<const int> pool);

struct Selection {
  std::vector<int> nodes;            // in rank order
  std::optional<double> threshold;   // delta_k of the last selected node
};

/// Top-`budget` prefix of the rank. Throws when budget exceeds the pool.
Selection select_nodes(const PreferenceRank& rank, int budget);

/// max(0, floor(ratio * N) - Q), capped by the pool size.
int expansion_budget(int node_count, int labeled_count, double ratio, int pool_size);

struct DnsResult {
  int target = 0;
  std::vector<std::vector<int>> per_teacher;  // K nearest per embedding space
  std::vector<int> merged;                    // ascending node index
};

/// Euclidean K-nearest neighbours of `node` in each embedding space, merged
/// without duplicates. For B >= 2, nodes found in every space are dropped.
DnsResult dns_neighbors(int node, std::span<const Matrix> embeddings, int k_nn);

/// Mean distance from `node` to its K nearest neighbours in `embedding`.
double mean_knn_distance(int node, const Matrix& embedding, int k_nn);

/// CSV: node_id,delta_k,delta_v,selected
std::string rank_to_csv(const PreferenceRank& rank, const Selection& selection);

}  // namespace pkd
