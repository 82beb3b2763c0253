#include <doctest.h>

#include <algorithm>
#include <set>

#include "oracles.hpp"
#include "pkd/graph.hpp"

using namespace pkd;

namespace {

TagGraph path3() {
  return build_graph({{0, 1}, {1, 2}}, Matrix::Zero(3, 2), {0, 0, 1}, {"", "", ""});
}

}  // namespace

TEST_CASE("build_graph canonicalises edges") {
  const TagGraph g = path3();
  CHECK(g.node_count() == 3);
  CHECK(g.class_count() == 2);
  CHECK(g.edges() == EdgeList{{0, 1}, {1, 2}});

  const TagGraph dup = build_graph({{0, 1}, {1, 0}}, Matrix::Zero(2, 1), {0, 1}, {"", ""});
  CHECK(dup.edge_count() == 1);
  CHECK(dup.has_edge(1, 0));

  CHECK_THROWS_AS(build_graph({{0, 5}}, Matrix::Zero(3, 1), {0, 0, 1}, {"", "", ""}), std::out_of_range);
  CHECK_THROWS_AS(build_graph({{1, 1}}, Matrix::Zero(3, 1), {0, 0, 1}, {"", "", ""}), std::invalid_argument);
  CHECK_THROWS_AS(build_graph({}, Matrix::Zero(2, 1), {0, 0, 1}, {"", "", ""}), std::invalid_argument);
  CHECK_THROWS(build_graph({}, Matrix::Zero(3, 1), {0, 0, 0}, {"", "", ""}));  // C >= 2
}

TEST_CASE("edge order does not matter") {
  Rng rng(11);
  const auto g = oracle::random_graph(20, 0.3, 3, 3, rng);
  EdgeList shuffled = g.edges();
  for (auto& [u, v] : shuffled) {
    if (rng() % 2) std::swap(u, v);
  }
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  const auto h = build_graph(shuffled, g.features(), g.labels(), g.texts(), g.class_count());
  CHECK(graph_to_json(h) == graph_to_json(g));
}

TEST_CASE("homophily ratio") {
  CHECK(homophily_ratio(path3()) == doctest::Approx(0.5));
  const TagGraph same = build_graph({{0, 1}, {1, 2}, {0, 2}}, Matrix::Zero(3, 1), {1, 1, 1}, {"", "", ""}, 2);
  CHECK(homophily_ratio(same) == 1.0);
  const TagGraph empty = build_graph({}, Matrix::Zero(2, 1), {0, 1}, {"", ""});
  CHECK_THROWS(homophily_ratio(empty));
}

TEST_CASE("SBM with p_in=1, p_out=0 gives disjoint cliques") {
  SbmConfig c;
  c.node_count = 4;
  c.class_count = 2;
  c.p_in = 1.0;
  c.p_out = 0.0;
  const TagGraph g = generate_sbm(c);
  CHECK(g.edge_count() == 2);
  CHECK(homophily_ratio(g) == 1.0);
  for (auto [u, v] : g.edges()) CHECK(g.labels()[u] == g.labels()[v]);
}

TEST_CASE("SBM is a pure function of its config") {
  SbmConfig c;
  c.seed = 5;
  CHECK(graph_to_json(generate_sbm(c)) == graph_to_json(generate_sbm(c)));
  SbmConfig d = c;
  d.seed = 6;
  CHECK(graph_to_json(generate_sbm(c)) != graph_to_json(generate_sbm(d)));
  SbmConfig bad;
  bad.p_in = 0.1;
  bad.p_out = 0.2;
  CHECK_THROWS(generate_sbm(bad));
}

TEST_CASE("SBM with p_in = p_out has homophily near 1/C") {
  for (int classes : {2, 5}) {
    double sum = 0;
    for (int s = 0; s < 20; ++s) {
      SbmConfig c;
      c.node_count = 500;
      c.class_count = classes;
      c.p_in = c.p_out = 0.02;
      c.seed = static_cast<std::uint64_t>(s);
      sum += homophily_ratio(generate_sbm(c));
    }
    // Same-class pairs are a fraction (N/C - 1)/(N - 1) of all pairs.
    const double expected = (500.0 / classes - 1.0) / 499.0;
    CHECK(std::abs(sum / 20 - expected) < 0.05);
    CHECK(std::abs(sum / 20 - 1.0 / classes) < 0.05);
  }
}

TEST_CASE("SBM texts name the class") {
  SbmConfig c;
  c.node_count = 10;
  const TagGraph g = generate_sbm(c);
  const auto names = default_class_names(c.class_count);
  for (int i = 0; i < g.node_count(); ++i) CHECK(g.texts()[i].find(names[g.labels()[i]]) != std::string::npos);
}

TEST_CASE("split_nodes") {
  SbmConfig c;
  c.node_count = 100;
  const TagGraph g = generate_sbm(c);
  const Split s = split_nodes(g, 3, 0.2, 0.2, 1);
  CHECK(s.train.size() == 15);
  CHECK(s.validation.size() == 20);
  CHECK(s.test.size() == 20);
  std::vector<int> per_class(5, 0);
  for (int v : s.train) ++per_class[g.labels()[v]];
  CHECK(per_class == std::vector<int>(5, 3));
  std::set<int> all(s.train.begin(), s.train.end());
  all.insert(s.validation.begin(), s.validation.end());
  all.insert(s.test.begin(), s.test.end());
  CHECK(all.size() == 55);

  CHECK(split_nodes(g, 1, 0, 0, 0).train.size() == 5);
  CHECK(split_from_json(split_to_json(s)).test == s.test);
  const Split again = split_nodes(g, 3, 0.2, 0.2, 1);
  CHECK(again.train == s.train);
  CHECK(again.test == s.test);
  CHECK_THROWS(split_nodes(g, 21, 0, 0, 0));
}

TEST_CASE("normalized adjacency") {
  const TagGraph single = build_graph({}, Matrix::Zero(1, 1), {0}, {""}, 2);
  CHECK(normalized_adjacency(single)(0, 0) == doctest::Approx(1.0));

  const TagGraph edge = build_graph({{0, 1}}, Matrix::Zero(2, 1), {0, 1}, {"", ""});
  const Matrix a = normalized_adjacency(edge);
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) CHECK(a(i, j) == doctest::Approx(0.5));
  }

  Rng rng(3);
  for (int t = 0; t < 5; ++t) {
    const auto g = oracle::random_graph(30, 0.2, 2, 3, rng);
    const Matrix m = normalized_adjacency(g);
    CHECK((m - m.transpose()).cwiseAbs().maxCoeff() <= 1e-12);
    const auto ops = GraphOperators::build(g);
    CHECK((Matrix(ops.norm_adj) - m).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("graph JSON round trip and unknown keys") {
  SbmConfig c;
  c.node_count = 30;
  const TagGraph g = generate_sbm(c);
  const std::string text = graph_to_json(g);
  CHECK(graph_to_json(graph_from_json(text)) == text);
  CHECK(graph_from_json(text).features() == g.features());
  CHECK_THROWS(graph_from_json(R"({"n":1,"c":2,"edges":[],"features":[[0]],"labels":[0],"texts":[""],"x":1})"));
}
