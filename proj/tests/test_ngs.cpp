#include <doctest.h>

#include <numeric>
#include <set>

#include "oracles.hpp"
#include "pkd/ngs.hpp"
#include "sanity_env.hpp"

using namespace pkd;

namespace {

Matrix one_hot_rows(const std::vector<int>& labels, int c) {
  Matrix m = Matrix::Constant(static_cast<Eigen::Index>(labels.size()), c, kProbFloor);
  for (std::size_t i = 0; i < labels.size(); ++i) m(static_cast<Eigen::Index>(i), labels[i]) = 1.0;
  for (Eigen::Index i = 0; i < m.rows(); ++i) m.row(i) /= m.row(i).sum();
  return m;
}

TrainConfig small_train(std::uint64_t seed) {
  TrainConfig tc;
  tc.hidden_dim = 32;
  tc.seed = seed;
  return tc;
}

}  // namespace

TEST_CASE("reward") {
  const std::vector<int> labels{0, 1, 2, 1, 0, 2};
  const ExpandedDataset d(std::vector<LabeledNode>{{0, 0}, {1, 1}},
                          std::vector<LabeledNode>{{2, 2}, {3, 1}, {5, 2}}, 3);
  const Matrix perfect = one_hot_rows(labels, 3);
  const Reward r = compute_reward(perfect, d, perfect, 0.3, RewardMode::kNegatedLosses);
  CHECK(r.acc == 1.0);
  CHECK(r.reward == doctest::Approx(0.7).epsilon(1e-9));
  CHECK(compute_reward(perfect, d, perfect, 0.3, RewardMode::kAsEq4).reward == doctest::Approx(0.7).epsilon(1e-9));

  Rng rng(8);
  for (int t = 0; t < 100; ++t) {
    const Matrix s = oracle::random_prob_matrix(6, 3, rng);
    const Matrix z = oracle::random_prob_matrix(6, 3, rng);
    const Reward plain = compute_reward(s, d, z, 0.0, RewardMode::kNegatedLosses);
    CHECK(plain.reward == plain.acc);
    const Reward neg = compute_reward(s, d, z, 0.3, RewardMode::kNegatedLosses);
    const Reward lit = compute_reward(s, d, z, 0.3, RewardMode::kAsEq4);
    CHECK(lit.reward - neg.reward == doctest::Approx(2 * 0.3 * neg.l_dl).epsilon(1e-12));
    CHECK(neg.reward <= 0.7 + 1e-12);
    CHECK(std::isfinite(neg.reward));

    // L_DL' over the expanded nodes only, by direct summation.
    double l_dl = 0;
    for (int v : d.nodes()) {
      for (int c = 0; c < 3; ++c) l_dl -= z(v, c) * std::log(s(v, c));
    }
    CHECK(neg.l_dl == doctest::Approx(l_dl / 5).epsilon(1e-12));
  }
  CHECK_THROWS(compute_reward(perfect, ExpandedDataset{}, perfect, 0.3, RewardMode::kAsEq4));
  CHECK(parse_reward_mode(to_string(RewardMode::kAsEq4)) == RewardMode::kAsEq4);
  CHECK_THROWS(parse_reward_mode("nope"));
}

TEST_CASE("advantages") {
  const std::vector<double> r{0.5, -1.0, 2.0};
  CHECK(advantages(r, r) == std::vector<double>(3, 0.0));
  CHECK(advantages(r, std::vector<double>(3, 0.0)) == r);

  std::vector<double> big(10);
  std::iota(big.begin(), big.end(), 1.0);
  const std::vector<double> v(10, 0.5);
  const auto a = advantages(big, v);
  double mean = 0;
  for (int i = 0; i < 10; ++i) mean += big[i] - v[i];
  mean /= 10;
  double var = 0;
  for (int i = 0; i < 10; ++i) var += (big[i] - v[i] - mean) * (big[i] - v[i] - mean);
  const double sd = std::sqrt(var / 10);
  for (int i = 0; i < 10; ++i) CHECK(a[i] == doctest::Approx((big[i] - v[i] - mean) / sd).epsilon(1e-7));
  CHECK(std::accumulate(a.begin(), a.end(), 0.0) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("clipped policy loss") {
  const double up = std::log(1.5);
  const double down = std::log(0.5);
  std::vector<double> d;
  const std::vector<double> zero{0.0};
  CHECK(ppo_policy_loss(std::vector<double>{up}, zero, std::vector<double>{1.0}, 0.2, &d) ==
        doctest::Approx(-1.2).epsilon(1e-12));
  CHECK(d[0] == 0.0);
  CHECK(ppo_policy_loss(std::vector<double>{down}, zero, std::vector<double>{-1.0}, 0.2, &d) ==
        doctest::Approx(0.8).epsilon(1e-12));
  CHECK(d[0] == 0.0);

  // Inside the clip range the gradient is -r A / n.
  CHECK(ppo_policy_loss(std::vector<double>{std::log(1.1)}, zero, std::vector<double>{2.0}, 0.2, &d) ==
        doctest::Approx(-2.2));
  CHECK(d[0] == doctest::Approx(-2.2));

  const std::vector<double> same{-0.3, -1.2, -0.7};
  const std::vector<double> adv{0.5, -2.0, 1.0};
  CHECK(ppo_policy_loss(same, same, adv, 0.2) == doctest::Approx(0.5 / 3));

  CHECK(ppo_value_loss(adv, adv) == 0.0);
  std::vector<double> dv;
  CHECK(ppo_value_loss(std::vector<double>{1.0, 3.0}, std::vector<double>{0.0, 0.0}, &dv) == doctest::Approx(5.0));
  CHECK(dv == std::vector<double>{1.0, 3.0});
}

TEST_CASE("dead zone gives an exactly zero parameter gradient") {
  Rng rng(12);
  RlConfig cfg;
  cfg.c2 = 0.0;
  cfg.head_init_scale = 1.0;
  const Model policy = init_policy(5, 3, cfg, rng);
  const Model value = init_value(5, cfg, rng);
  for (auto [ratio, adv] : {std::pair{1.5, 1.0}, std::pair{0.5, -1.0}}) {
    PpoTransition t;
    t.state = oracle::random_matrix(1, 5, rng).row(0);
    t.action = 1;
    t.value = 0.0;
    t.reward = adv;
    const double logp = std::log(policy_forward(policy, t.state, nullptr).probs(1));
    t.old_log_prob = logp - std::log(ratio);
    ModelParams g;
    const PpoObjective obj = policy_objective(policy, value, std::vector<PpoTransition>{t}, cfg, &g);
    CHECK(obj.policy_loss == doctest::Approx(ratio > 1 ? -1.2 : 0.8).epsilon(1e-9));
    for (const auto& tensor : g.tensors()) CHECK(tensor.value.cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("policy entropy") {
  Matrix flat = Matrix::Constant(3, 4, 0.25);
  CHECK(policy_entropy(flat) == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  CHECK(policy_entropy(one_hot_rows({0, 3, 2}, 4)) <= 1e-10);
  Matrix dl;
  policy_entropy(flat, &dl);
  CHECK(dl.cwiseAbs().maxCoeff() <= 1e-15);
}

TEST_CASE("policy and value heads") {
  Rng rng(4);
  const RlConfig cfg;
  Model zero = init_policy(7, 4, cfg, rng);
  for (auto& t : zero.params.tensors()) t.value.setZero();
  const RowVector s = oracle::random_matrix(1, 7, rng).row(0);
  const PolicyOutput u = policy_forward(zero, s, nullptr);
  for (int b = 0; b < 4; ++b) CHECK(u.probs(b) == doctest::Approx(0.25));
  CHECK(u.action == 0);
  CHECK(u.log_prob == doctest::Approx(std::log(0.25)));

  const Model p = init_policy(7, 4, cfg, rng);
  auto draw = [&](std::uint64_t seed) {
    Rng r(seed);
    std::vector<int> acts;
    for (int k = 0; k < 50; ++k) acts.push_back(policy_forward(zero, s, &r).action);
    for (int k = 0; k < 50; ++k) acts.push_back(policy_forward(p, s, &r).action);
    return acts;
  };
  CHECK(draw(3) == draw(3));
  const auto acts = draw(3);
  CHECK(std::set<int>(acts.begin(), acts.end()).size() > 1);
  const PolicyOutput greedy = policy_forward(p, s, nullptr);
  CHECK(greedy.probs(greedy.action) == greedy.probs.maxCoeff());
  CHECK(greedy.probs.sum() == doctest::Approx(1.0));
  CHECK(greedy.probs.minCoeff() >= 1e-12);
  CHECK(std::isfinite(value_forward(init_value(7, cfg, rng), s)));
  CHECK_THROWS(policy_forward(p, RowVector::Zero(6), nullptr));
}

TEST_CASE("PPO objective gradients match finite differences") {
  Rng rng(31);
  for (int trial = 0; trial < 10; ++trial) CHECK(oracle::ppo_gradient_error(rng) <= 1e-4);
}

TEST_CASE("objective reductions") {
  Rng rng(6);
  RlConfig cfg;
  cfg.head_init_scale = 1.0;
  const Model policy = init_policy(4, 3, cfg, rng);
  const Model value = init_value(4, cfg, rng);
  std::vector<PpoTransition> batch;
  for (int i = 0; i < 10; ++i) {
    PpoTransition t;
    t.state = oracle::random_matrix(1, 4, rng).row(0);
    t.action = i % 3;
    t.reward = 0.1 * i;
    t.value = 0.1 * i;
    t.old_log_prob = std::log(policy_forward(policy, t.state, nullptr).probs(t.action));
    batch.push_back(t);
  }
  ModelParams g;
  const PpoObjective obj = policy_objective(policy, value, batch, cfg, &g);
  CHECK(obj.total == doctest::Approx(obj.policy_loss + cfg.c1 * obj.value_loss - cfg.c2 * obj.entropy));

  // Zero advantages: only the entropy bonus moves the policy.
  RlConfig no_bonus = cfg;
  no_bonus.c2 = 0.0;
  ModelParams g0;
  policy_objective(policy, value, batch, no_bonus, &g0);
  for (const auto& t : g0.tensors()) CHECK(t.value.cwiseAbs().maxCoeff() <= 1e-15);

  RlConfig pure = cfg;
  pure.c1 = pure.c2 = 0.0;
  const PpoObjective p = policy_objective(policy, value, batch, pure, nullptr);
  CHECK(p.total == p.policy_loss);
}

TEST_CASE("state encoder and selector prompt") {
  // Nodes 0 and 1 share features, neighbours and teacher rows.
  Matrix x(6, 3);
  x << 1, 0, 2, 1, 0, 2, 0, 1, 0, 3, 1, 1, 0, 0, 1, 2, 2, 2;
  const TagGraph g = build_graph({{0, 2}, {1, 2}, {2, 3}, {3, 4}, {4, 5}}, x, {0, 0, 1, 1, 4, 3},
                                 {"A. a", "B. b", "C. c", "D. d", "E. e", "F. f"}, 5);
  Rng rng(2);
  TeacherEnsemble t;
  t.names = {"GCN", "GAT", "APPNP", "H2GCN"};
  for (int b = 0; b < 4; ++b) {
    Matrix p = oracle::random_prob_matrix(6, 5, rng);
    p.row(1) = p.row(0);
    t.probs.push_back(p);
    Matrix e = oracle::random_matrix(6, 2, rng);
    e.row(1) = e.row(0);
    t.embeddings.push_back(e);
  }
  const ExpandedDataset d(std::vector<LabeledNode>{{2, 1}, {3, 1}}, std::vector<LabeledNode>{{5, 3}}, 5);
  const StateEncoder enc(g, t, d, 2);
  CHECK(enc.dim() - enc.prediction_offset() == 20);
  CHECK(enc.encode(0) == enc.encode(1));
  CHECK(enc.encode(0) != enc.encode(2));
  CHECK(enc.table().allFinite());
  for (int b = 0; b < 4; ++b) {
    CHECK(enc.encode(4).segment(enc.prediction_offset() + 5 * b, 5) == t.probs[b].row(4));
  }

  const DnsResult nb = dns_neighbors(2, t.embeddings, 2);
  const std::string prompt = render_selector_prompt(g, t, 2, nb);
  for (const auto& name : t.names) {
    CHECK(prompt.find("The " + name + "'s logits output of this target paper is ") != std::string::npos);
  }
  CHECK(prompt.find("Semantic attributes") != std::string::npos);
  CHECK(prompt.find("C. c") != std::string::npos);
}

TEST_CASE("run_ngs degenerate cases") {
  const SanityEnv env(0, 1);
  const KdWeights kd;
  TrainConfig tc = small_train(0);
  tc.max_steps = 60;

  SUBCASE("single teacher is plain distillation") {
    TeacherEnsemble one;
    one.names = {"ORACLE"};
    one.probs = {env.teachers.probs[1]};
    one.embeddings = {env.teachers.embeddings[1]};
    NgsInputs in{env.graph, env.ops, one, env.expanded, env.val, ModelKind::kGcn, 4};
    const NgsResult r = run_ngs(in, RlConfig{}, kd, tc, 0);
    const auto direct =
        train_student(ModelKind::kGcn, env.graph, env.ops, one.probs[0], env.expanded.gold(), kd, env.val, tc);
    CHECK(r.student.params == direct.model.params);
    CHECK(r.mask.histogram() == std::vector<int>{env.graph.node_count()});
  }
  SUBCASE("zero epochs uses the initial policy's argmax") {
    RlConfig rl;
    rl.epochs = 0;
    const NgsResult r = run_ngs(env.inputs(), rl, kd, tc, 0);
    const StateEncoder enc(env.graph, env.teachers, env.expanded, 4);
    const Matrix probs = policy_probs(r.policy, enc.table());
    for (int v = 0; v < env.graph.node_count(); ++v) CHECK(r.mask.teacher[v] == argmax(probs.row(v)));
    CHECK(r.log.empty());
    // Near-uniform start.
    CHECK((probs.array() - 0.5).abs().maxCoeff() < 0.05);
  }
  SUBCASE("same seed, same result") {
    RlConfig rl;
    rl.epochs = 3;
    const NgsResult a = run_ngs(env.inputs(), rl, kd, tc, 5);
    const NgsResult b = run_ngs(env.inputs(), rl, kd, tc, 5);
    CHECK(a.mask.teacher == b.mask.teacher);
    CHECK(a.student.params == b.student.params);
    CHECK(a.policy.params == b.policy.params);
    CHECK(a.log.size() == 3);
    CHECK(assignments_to_csv(a).rfind("node_id,teacher_index,policy_prob\n", 0) == 0);
    CHECK(ngs_log_to_jsonl(a.log).find("\"policy_entropy\"") != std::string::npos);
  }
}

TEST_CASE("entropy bonus keeps the policy more spread out") {
  double without = 0;
  double with = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const SanityEnv env(seed, static_cast<int>(seed % 2));
    RlConfig rl;
    rl.epochs = 20;
    rl.c2 = 0.0;
    without += run_ngs(env.inputs(), rl, {}, small_train(seed), seed).log.back().policy_entropy;
    rl.c2 = 0.1;
    with += run_ngs(env.inputs(), rl, {}, small_train(seed), seed).log.back().policy_entropy;
  }
  CHECK(with >= without);
}
