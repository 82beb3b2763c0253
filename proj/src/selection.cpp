#include "pkd/selection.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "pkd/training.hpp"

namespace pkd {
namespace {

void check_distribution(const RowVector& p, const char* what) {
  if (!p.allFinite() || p.minCoeff() < kProbFloor * (1.0 - 1e-9) || std::abs(p.sum() - 1.0) > 1e-9) {
    throw std::invalid_argument(std::string(what) + " is not a clamped probability row");
  }
}

void check_rows(const Matrix& rows) {
  if (rows.rows() < 2) throw std::invalid_argument("need at least two teacher rows");
}

}  // namespace

double kl_divergence(const RowVector& p, const RowVector& q) {
  if (p.size() != q.size()) throw std::invalid_argument("kl_divergence: length mismatch");
  check_distribution(p, "p");
  check_distribution(q, "q");
  double kl = 0;
  for (Eigen::Index c = 0; c < p.size(); ++c) kl += p(c) * std::log(p(c) / q(c));
  return kl;
}

double k_uncertainty(const Matrix& rows) {
  check_rows(rows);
  double total = 0;
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < rows.rows(); ++j) {
      total += kl_divergence(rows.row(i), rows.row(j)) + kl_divergence(rows.row(j), rows.row(i));
    }
  }
  return total;
}

double node_uncertainty(const Matrix& rows) {
  check_rows(rows);
  const RowVector mean = rows.colwise().mean();
  double total = 0;
  for (Eigen::Index i = 0; i < rows.rows(); ++i) total += kl_divergence(rows.row(i), mean);
  return total / static_cast<double>(rows.rows());
}

double mean_entropy(const Matrix& rows) {
  const RowVector mean = rows.colwise().mean();
  double h = 0;
  for (Eigen::Index c = 0; c < mean.size(); ++c) h -= mean(c) * std::log(mean(c));
  return h;
}

PreferenceRank preference_rank(const TeacherEnsemble& teachers, std::span<const int> pool) {
  if (pool.empty()) throw std::invalid_argument("preference_rank: empty pool");
  PreferenceRank rank;
  rank.entries.reserve(pool.size());
  for (int v : pool) {
    if (v < 0 || v >= teachers.node_count()) throw std::out_of_range("preference_rank: pool node out of range");
    const Matrix rows = teachers.node_rows(v);
    rank.entries.push_back({v, k_uncertainty(rows), node_uncertainty(rows)});
  }
  std::sort(rank.entries.begin(), rank.entries.end(),
            [](const UncertaintyScore& a, const UncertaintyScore& b) {
              if (a.delta_k != b.delta_k) return a.delta_k > b.delta_k;
              return a.node < b.node;
            });
  return rank;
}

Selection select_nodes(const PreferenceRank& rank, int budget) {
  if (budget < 0) throw std::invalid_argument("select_nodes: negative budget");
  if (budget > static_cast<int>(rank.entries.size())) {
    throw std::invalid_argument("select_nodes: budget " + std::to_string(budget) +
                                " exceeds pool size " + std::to_string(rank.entries.size()));
  }
  Selection s;
  for (int w = 0; w < budget; ++w) s.nodes.push_back(rank.entries[w].node);
  if (budget > 0) s.threshold = rank.entries[budget - 1].delta_k;
  return s;
}

int expansion_budget(int node_count, int labeled_count, double ratio, int pool_size) {
  // The epsilon keeps products such as 0.48 * 300 from flooring to 143.
  const auto target = static_cast<int>(std::floor(ratio * node_count + 1e-9));
  return std::clamp(target - labeled_count, 0, std::max(pool_size, 0));
}

namespace {

std::vector<int> nearest(int node, const Matrix& emb, int k_nn) {
  const int n = static_cast<int>(emb.rows());
  std::vector<std::pair<double, int>> dist;
  dist.reserve(n - 1);
  for (int j = 0; j < n; ++j) {
    if (j != node) dist.emplace_back((emb.row(j) - emb.row(node)).squaredNorm(), j);
  }
  std::partial_sort(dist.begin(), dist.begin() + k_nn, dist.end());
  std::vector<int> out;
  out.reserve(k_nn);
  for (int k = 0; k < k_nn; ++k) out.push_back(dist[k].second);
  return out;
}

void check_knn(int node, const Matrix& emb, int k_nn) {
  if (k_nn < 1) throw std::invalid_argument("K_nn must be >= 1");
  if (k_nn >= emb.rows()) throw std::invalid_argument("K_nn must be smaller than the node count");
  if (node < 0 || node >= emb.rows()) throw std::out_of_range("DNS target out of range");
}

}  // namespace

DnsResult dns_neighbors(int node, std::span<const Matrix> embeddings, int k_nn) {
  if (embeddings.empty()) throw std::invalid_argument("dns_neighbors: no embedding spaces");
  DnsResult r;
  r.target = node;
  for (const auto& emb : embeddings) {
    if (emb.rows() != embeddings[0].rows()) throw std::invalid_argument("embedding row counts differ");
    check_knn(node, emb, k_nn);
    r.per_teacher.push_back(nearest(node, emb, k_nn));
  }
  std::vector<int> all;
  for (const auto& list : r.per_teacher) all.insert(all.end(), list.begin(), list.end());
  std::sort(all.begin(), all.end());
  const auto b = static_cast<std::ptrdiff_t>(r.per_teacher.size());
  for (auto it = all.begin(); it != all.end();) {
    const auto run_end = std::upper_bound(it, all.end(), *it);
    // A node listed in every space appears exactly B times (lists have no repeats).
    if (b < 2 || std::distance(it, run_end) < b) r.merged.push_back(*it);
    it = run_end;
  }
  return r;
}

double mean_knn_distance(int node, const Matrix& embedding, int k_nn) {
  check_knn(node, embedding, k_nn);
  double total = 0;
  for (int j : nearest(node, embedding, k_nn)) total += (embedding.row(j) - embedding.row(node)).norm();
  return total / k_nn;
}

std::string rank_to_csv(const PreferenceRank& rank, const Selection& selection) {
  std::vector<int> chosen = selection.nodes;
  std::sort(chosen.begin(), chosen.end());
  std::ostringstream out;
  out << "node_id,delta_k,delta_v,selected\n";
  for (const auto& e : rank.entries) {
    out << e.node << ',' << format_double(e.delta_k) << ',' << format_double(e.delta_v) << ','
        << (std::binary_search(chosen.begin(), chosen.end(), e.node) ? 1 : 0) << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// TeacherEnsemble

Matrix TeacherEnsemble::node_rows(int node) const {
  Matrix rows(size(), class_count());
  for (int b = 0; b < size(); ++b) rows.row(b) = probs[b].row(node);
  return rows;
}

std::vector<int> TeacherEnsemble::predictions(int node) const {
  std::vector<int> out;
  out.reserve(size());
  for (const auto& p : probs) out.push_back(argmax(p.row(node)));
  return out;
}

TeacherEnsemble make_ensemble(std::vector<Model> models, const TagGraph& g, const GraphOperators& ops) {
  TeacherEnsemble e;
  for (auto& m : models) {
    ForwardResult fwd = forward(m, g.features(), &ops);
    e.names.emplace_back(display_name(m.kind));
    e.probs.push_back(std::move(fwd.probs));
    e.embeddings.push_back(std::move(fwd.embedding));
  }
  e.models = std::move(models);
  return e;
}

}  // namespace pkd
