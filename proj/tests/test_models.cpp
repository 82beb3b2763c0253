#include <doctest.h>

#include <filesystem>

#include "oracles.hpp"
#include "pkd/io.hpp"
#include "pkd/training.hpp"

using namespace pkd;

namespace {

constexpr ModelKind kAllKinds[] = {ModelKind::kGcn, ModelKind::kGat, ModelKind::kAppnp, ModelKind::kH2gcn,
                                   ModelKind::kMlp};

ModelDims small_dims(const TagGraph& g) {
  ModelDims d;
  d.input_dim = g.feature_dim();
  d.hidden_dim = 6;
  d.output_dim = g.class_count();
  return d;
}

}  // namespace

TEST_CASE("backward matches finite differences for every kind") {
  Rng rng(2024);
  for (ModelKind kind : kAllKinds) {
    CAPTURE(to_string(kind));
    for (int trial = 0; trial < 3; ++trial) CHECK(oracle::model_gradient_error(kind, rng) <= 1e-4);
  }
}

TEST_CASE("backward is linear in the upstream gradient") {
  Rng rng(7);
  const auto g = oracle::random_graph(12, 0.3, 4, 3, rng);
  const auto ops = GraphOperators::build(g);
  for (ModelKind kind : kAllKinds) {
    CAPTURE(to_string(kind));
    const Model m = init_model(kind, small_dims(g), rng);
    const auto fwd = forward(m, g.features(), &ops);
    const Matrix u = oracle::random_matrix(12, 3, rng);
    const auto zero = backward(m, g.features(), &ops, fwd, Matrix::Zero(12, 3));
    for (const auto& t : zero.tensors()) CHECK(t.value.cwiseAbs().maxCoeff() == 0.0);
    const auto once = backward(m, g.features(), &ops, fwd, u);
    const auto twice = backward(m, g.features(), &ops, fwd, 2.0 * u);
    for (std::size_t k = 0; k < once.tensors().size(); ++k) {
      CHECK((twice.tensors()[k].value - 2.0 * once.tensors()[k].value).cwiseAbs().maxCoeff() <= 1e-12);
    }
  }
}

TEST_CASE("forward special cases") {
  Rng rng(1);
  const auto g = oracle::random_graph(8, 0.4, 3, 2, rng);
  const auto ops = GraphOperators::build(g);

  SUBCASE("zero-weight MLP is uniform") {
    Model m = init_model(ModelKind::kMlp, small_dims(g), rng);
    for (auto& t : m.params.tensors()) t.value.setZero();
    const auto r = forward(m, g.features(), nullptr);
    CHECK(r.logits.cwiseAbs().maxCoeff() == 0.0);
    CHECK((r.probs.array() - 0.5).abs().maxCoeff() <= 1e-15);
  }
  SUBCASE("GCN on an isolated node is a perceptron") {
    const TagGraph one = build_graph({}, Matrix::Constant(1, 3, 0.7), {0}, {""}, 2);
    const auto one_ops = GraphOperators::build(one);
    Model m = init_model(ModelKind::kGcn, small_dims(one), rng);
    m.params.at("b1") = oracle::random_matrix(1, 6, rng);
    const auto r = forward(m, one.features(), &one_ops);
    const Matrix hidden = (one.features() * m.params.at("W1") + m.params.at("b1")).cwiseMax(0.0);
    const Matrix expected = hidden * m.params.at("W2") + m.params.at("b2");
    CHECK((r.logits - expected).cwiseAbs().maxCoeff() <= 1e-12);
  }
  SUBCASE("APPNP with teleport 1 equals the MLP") {
    ModelDims d = small_dims(g);
    d.appnp_alpha = 1.0;
    Model appnp = init_model(ModelKind::kAppnp, d, rng);
    Model mlp = appnp;
    mlp.kind = ModelKind::kMlp;
    const auto a = forward(appnp, g.features(), &ops);
    const auto b = forward(mlp, g.features(), nullptr);
    CHECK((a.logits - b.logits).cwiseAbs().maxCoeff() <= 1e-12);
  }
  SUBCASE("H2GCN ignores edge order") {
    EdgeList reversed = g.edges();
    std::reverse(reversed.begin(), reversed.end());
    for (auto& [u, v] : reversed) std::swap(u, v);
    const auto h = build_graph(reversed, g.features(), g.labels(), g.texts(), g.class_count());
    const auto h_ops = GraphOperators::build(h);
    const Model m = init_model(ModelKind::kH2gcn, small_dims(g), rng);
    CHECK(forward(m, g.features(), &ops).logits == forward(m, h.features(), &h_ops).logits);
  }
  SUBCASE("graph kinds need operators") {
    const Model m = init_model(ModelKind::kGcn, small_dims(g), rng);
    CHECK_THROWS(forward(m, g.features(), nullptr));
    CHECK_THROWS(forward(m, Matrix::Zero(8, 5), &ops));
  }
}

TEST_CASE("softmax") {
  RowVector a(2);
  a << 0, 0;
  CHECK(softmax(a)(0) == doctest::Approx(0.5));
  a << 1000, 0;
  const RowVector s = softmax(a);
  CHECK(s(0) == doctest::Approx(1.0));
  CHECK(s(1) >= kProbFloor);
  CHECK(std::isfinite(s(1)));
  Rng rng(4);
  for (int t = 0; t < 50; ++t) {
    const RowVector v = oracle::random_matrix(1, 6, rng, 5.0).row(0);
    const RowVector p = softmax(v);
    const RowVector q = softmax(v.array() + 123.4);
    CHECK((p - q).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK(std::abs(p.sum() - 1.0) <= 1e-9);
    CHECK(p.minCoeff() >= kProbFloor);
  }
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  Rng rng(9);
  const auto g = oracle::random_graph(10, 0.3, 4, 3, rng);
  const auto dir = std::filesystem::temp_directory_path() / "pkd_model_test";
  for (ModelKind kind : kAllKinds) {
    const Model m = init_model(kind, small_dims(g), rng);
    save_model(m, dir / "m.json");
    const Model back = load_model(dir / "m.json");
    CHECK(back.kind == m.kind);
    CHECK(back.params == m.params);
    CHECK(model_to_json(back) == model_to_json(m));
  }
  std::filesystem::remove_all(dir);
  CHECK_THROWS(model_from_json(R"({"kind":"GCN","dims":{},"tensors":{},"extra":1})"));
}

TEST_CASE("Adam step matches hand computation") {
  ModelParams p;
  Matrix w(1, 2);
  w << 1.0, -2.0;
  p.add("w", w);
  ModelParams g = p.zeros_like();
  g.at("w") << 0.5, -0.25;
  Adam adam(p, {0.1, 0.9, 0.999, 1e-8, 0.0});
  adam.step(p, g);
  // First bias-corrected step moves each entry by lr * sign(g) (up to eps).
  CHECK(p.at("w")(0) == doctest::Approx(0.9).epsilon(1e-7));
  CHECK(p.at("w")(1) == doctest::Approx(-1.9).epsilon(1e-7));
  CHECK(adam.steps_taken() == 1);
}

TEST_CASE("training") {
  SbmConfig c;
  c.node_count = 60;
  c.class_count = 2;
  c.p_in = 0.9;
  c.p_out = 0.05;
  c.class_separation = 6.0;
  c.feature_dim = 8;
  const TagGraph g = generate_sbm(c);
  const auto ops = GraphOperators::build(g);
  const Split s = split_nodes(g, 5, 0.3, 0.3, 0);
  const auto labels = with_true_labels(g, s.train);
  TrainConfig tc;
  tc.hidden_dim = 16;

  SUBCASE("separable graph is fit exactly") {
    const auto r = train(ModelKind::kGcn, g, ops, labels, s.validation, tc);
    const auto probs = forward(r.model, g.features(), &ops).probs;
    CHECK(accuracy(probs, labels) == 1.0);
    for (const auto& h : r.history) CHECK(std::isfinite(h.loss));
  }
  SUBCASE("zero steps keeps the initial parameters") {
    tc.max_steps = 0;
    Rng rng(3);
    const Model m = init_model(ModelKind::kGcn, dims_for(g, tc), rng);
    const auto r = fit(
        m, g.features(), &ops, [&](const ForwardResult& f, Matrix& grad) { return cross_entropy(f.probs, labels, &grad); },
        [](const ForwardResult&) { return ValidationScore{}; }, tc);
    CHECK(r.history.empty());
    CHECK(r.model.params == m.params);
  }
  SUBCASE("same seed gives the same history") {
    tc.max_steps = 50;
    const auto a = train(ModelKind::kGat, g, ops, labels, s.validation, tc);
    const auto b = train(ModelKind::kGat, g, ops, labels, s.validation, tc);
    CHECK(a.history == b.history);
    CHECK(a.model.params == b.model.params);
  }
}

TEST_CASE("cross entropy and accuracy") {
  Matrix p(2, 2);
  p << 0.8, 0.2, 0.4, 0.6;
  const std::vector<LabeledNode> l{{0, 0}, {1, 0}};
  CHECK(cross_entropy(p, l, nullptr) == doctest::Approx(-(std::log(0.8) + std::log(0.4)) / 2));
  CHECK(accuracy(p, l) == 0.5);
  RowVector tie(3);
  tie << 0.4, 0.4, 0.2;
  CHECK(argmax(tie) == 0);
}
