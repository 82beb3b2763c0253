#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "pkd/graph.hpp"

namespace pkd {

// Graph-topology instruction records for fine-tuning a language model.

enum class GtaTask { kConnectivity, kDegree, kCycle, kTextgen };
std::string_view to_string(GtaTask task);

using GtaAnswer = std::variant<bool, int, std::string>;

struct GtaRecord {
  GtaTask task = GtaTask::kConnectivity;
  std::string instruction;
  std::string answer;
  GtaAnswer structured;
  std::vector<int> nodes;
};

/// floor(N(N-1)/6) distinct pairs; the answer is whether the edge exists.
std::vector<GtaRecord> gen_connectivity(const TagGraph& g, std::uint64_t seed);
/// ceil(|group|/3) nodes from every degree group; the answer is the degree.
std::vector<GtaRecord> gen_degree(const TagGraph& g, std::uint64_t seed);
/// Non-backtracking random walks of `walk_len` nodes (> 10). A walk stops at
/// a node whose only exit is the way it came; walks of 10 nodes or fewer are
/// dropped. The answer is whether some node repeats.
std::vector<GtaRecord> gen_cycle(const TagGraph& g, std::uint64_t seed, int num_walks, int walk_len);
/// floor(N/3) sources; for each, one node at BFS distance > t is drawn and
/// the texts along the shortest path condition the target's text.
std::vector<GtaRecord> gen_textgen(const TagGraph& g, std::uint64_t seed, int t);

/// Shortest path from `source` to every node (BFS over sorted neighbours);
/// empty when unreachable.
std::vector<std::vector<int>> bfs_paths(const TagGraph& g, int source);

std::string gta_record_to_json(const GtaRecord& r);

struct GtaCounts {
  int connectivity = 0;
  int degree = 0;
  int cycle = 0;
  int textgen = 0;
};

/// Runs all four generators and writes one JSONL file. Graphs without node
/// texts produce no text-generation records.
GtaCounts emit_gta(const TagGraph& g, const std::filesystem::path& out, std::uint64_t seed, int t, int walk_len,
                   int num_walks);

}  // namespace pkd
