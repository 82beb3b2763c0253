#pragma once

#include <algorithm>

#include "pkd/ngs.hpp"

// Two teachers: one returns the true labels, the other is uniform. The oracle
// sits at index `oracle_slot` so that argmax ties (which go to index 0) don't
// favour it.
struct SanityEnv {
  pkd::TagGraph graph;
  pkd::GraphOperators ops;
  pkd::TeacherEnsemble teachers;
  pkd::ExpandedDataset expanded;
  std::vector<int> val;
  int oracle_slot = 0;

  SanityEnv(std::uint64_t seed, int oracle_slot_, int expanded_size = 60)
      : graph(make_graph()), ops(pkd::GraphOperators::build(graph)), oracle_slot(oracle_slot_) {
    const int n = graph.node_count();
    const int c = graph.class_count();
    pkd::Matrix truth = pkd::Matrix::Constant(n, c, pkd::kProbFloor);
    for (int i = 0; i < n; ++i) truth(i, graph.labels()[i]) = 1.0;
    for (int i = 0; i < n; ++i) truth.row(i) /= truth.row(i).sum();
    const pkd::Matrix flat = pkd::Matrix::Constant(n, c, 1.0 / c);
    teachers.names = {"ORACLE", "UNIFORM"};
    teachers.probs = {truth, flat};
    teachers.embeddings = {graph.features(), graph.features()};
    if (oracle_slot == 1) {
      std::swap(teachers.names[0], teachers.names[1]);
      std::swap(teachers.probs[0], teachers.probs[1]);
    }

    pkd::Rng rng(pkd::derive_seed(seed, "sanity-nodes"));
    std::vector<int> nodes = pkd::all_nodes(n);
    std::shuffle(nodes.begin(), nodes.end(), rng);
    std::vector<pkd::LabeledNode> gold;
    std::vector<pkd::LabeledNode> ann;
    for (int k = 0; k < expanded_size; ++k) (k < 15 ? gold : ann).push_back({nodes[k], graph.labels()[nodes[k]]});
    expanded = pkd::ExpandedDataset(gold, ann, c);
    val.assign(nodes.begin() + expanded_size, nodes.begin() + expanded_size + 60);
  }

  pkd::NgsInputs inputs() const { return {graph, ops, teachers, expanded, val, pkd::ModelKind::kGcn, 4}; }

  double oracle_fraction(const pkd::TeacherMask& mask) const {
    int hit = 0;
    for (const auto& e : expanded.entries()) hit += mask.teacher[e.node] == oracle_slot;
    return static_cast<double>(hit) / expanded.size();
  }

 private:
  static pkd::TagGraph make_graph() {
    pkd::SbmConfig c;
    c.seed = 7;
    c.p_in = 0.1085;
    c.p_out = 0.00667;
    return pkd::generate_sbm(c);
  }
};
