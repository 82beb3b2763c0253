#include "pkd/ngs.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include <json.hpp>

namespace pkd {

std::string_view to_string(RewardMode mode) {
  return mode == RewardMode::kAsEq4 ? "as_eq4" : "negated_losses";
}

RewardMode parse_reward_mode(std::string_view tag) {
  if (tag == "as_eq4") return RewardMode::kAsEq4;
  if (tag == "negated_losses") return RewardMode::kNegatedLosses;
  throw std::invalid_argument("unknown reward mode '" + std::string(tag) + "'");
}

void RlConfig::validate() const {
  if (!(eta >= 0.0 && eta <= 1.0)) throw std::invalid_argument("eta must lie in [0, 1]");
  if (!(clip > 0.0 && clip < 1.0)) throw std::invalid_argument("clip must lie in (0, 1)");
  if (c1 < 0 || c2 < 0) throw std::invalid_argument("c1 and c2 must be nonnegative");
  if (!(policy_lr > 0 && value_lr > 0)) throw std::invalid_argument("agent learning rates must be positive");
  if (epochs < 0 || student_steps < 0) throw std::invalid_argument("epoch counts must be nonnegative");
  if (hidden_dim < 1) throw std::invalid_argument("agent hidden_dim must be positive");
}

// ---------------------------------------------------------------------------
// State encoding

StateEncoder::StateEncoder(const TagGraph& g, const TeacherEnsemble& teachers, const ExpandedDataset& expanded,
                           int k_nn) {
  const int n = g.node_count();
  const int f = g.feature_dim();
  const int b = teachers.size();
  const int c = teachers.class_count();
  if (b < 1 || teachers.node_count() != n) throw std::invalid_argument("state encoder: teacher/graph mismatch");

  std::vector<int> known(n, -1);
  for (const auto& e : expanded.entries()) known.at(e.node) = e.label;

  prediction_offset_ = f + 2 + b;
  table_.setZero(n, prediction_offset_ + b * c);
  table_.leftCols(f) = g.features();

  Matrix dist(n, b);
  for (int t = 0; t < b; ++t) {
    for (int i = 0; i < n; ++i) dist(i, t) = mean_knn_distance(i, teachers.embeddings[t], k_nn);
    const double scale = dist.col(t).mean();
    if (scale > 0) dist.col(t) /= scale;
  }

  for (int i = 0; i < n; ++i) {
    table_(i, f) = std::log1p(static_cast<double>(g.degree(i)));
    int reference = known[i];
    if (reference < 0) {
      RowVector mean = RowVector::Zero(c);
      for (int t = 0; t < b; ++t) mean += teachers.probs[t].row(i);
      reference = argmax(mean);
    }
    int seen = 0;
    int agree = 0;
    for (int j : g.neighbors(i)) {
      if (known[j] < 0) continue;
      ++seen;
      agree += known[j] == reference;
    }
    table_(i, f + 1) = seen == 0 ? 0.5 : static_cast<double>(agree) / seen;
    table_.block(i, f + 2, 1, b) = dist.row(i);
    for (int t = 0; t < b; ++t) table_.block(i, prediction_offset_ + t * c, 1, c) = teachers.probs[t].row(i);
  }
}

namespace {

std::string format_row(const RowVector& row) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(4) << '[';
  for (Eigen::Index k = 0; k < row.size(); ++k) out << (k ? ", " : "") << row(k);
  out << ']';
  return out.str();
}

}  // namespace

std::string render_selector_prompt(const TagGraph& g, const TeacherEnsemble& teachers, int node,
                                   const DnsResult& neighbors) {
  if (node < 0 || node >= g.node_count()) throw std::out_of_range("selector prompt: node out of range");
  std::string names = "[";
  for (int t = 0; t < teachers.size(); ++t) names += (t ? ", " : "") + teachers.names[t];
  names += "]";
  const std::string count = std::to_string(teachers.size());

  std::ostringstream p;
  p << "[System]\n"
    << "There are " << count << " names of teacher networks: " << names
    << ". We need to perform knowledge distillation for each node in this graph consist of nodes (papers) and"
       " edges (citation relationships). You will serve as an assistant to help me to assign the best teacher"
       " network for the target node (paper) based on the following information. I will provide you with three"
       " kinds of attributes of the target node (paper).\n"
    << "Here are the instructions:\n"
    << "I will provide you with information in the form of a JSON string that describes the node (paper):\n"
    << "Semantic attributes: the title and abstract of this paper.\n"
    << "Structure attributes: important neighbors (papers), which are closely related the target node (paper)"
       " and their contents.\n"
    << "Prediction attributes: " << count << " teacher networks' logit output of this target node.\n"
    << "Requirements:\n"
    << "1. Please provide your response in JSON format, following this structure:\n"
    << "Reasoning: Briefly explain your reasoning process for the selected teacher network.\n"
    << "Teacher network: The best teacher network you assign for this node (paper), this result must belong to"
       " these "
    << count << " teachers: " << names << ";\n"
    << "2. There are 2000 words limits for the reasoning;\n"
    << "3. Do not provide any other text outside the JSON string;\n"
    << "4. Focus only on content in the actual text and avoid making false associations;\n"
    << "5. The output can only contain teacher network and reasoning.\n"
    << "[User]\n"
    << "Semantic attributes: It is the content description of this target paper: " << g.texts()[node] << "\n"
    << "Structure attributes: It has following important neighbors (papers), which are closely related the"
       " target paper. Their content descriptions are:";
  for (int r : neighbors.merged) p << ' ' << g.texts().at(r);
  p << "\nPrediction attributes:\n";
  for (int t = 0; t < teachers.size(); ++t) {
    p << "The " << teachers.names[t] << "'s logits output of this target paper is "
      << format_row(teachers.probs[t].row(node)) << (t + 1 < teachers.size() ? ",\n" : "\n");
  }
  return p.str();
}

// ---------------------------------------------------------------------------
// Policy and value models

namespace {

void shrink_head(Model& m, double scale) {
  m.params.at("W2") *= scale;
  m.params.at("b2").setZero();
}

Matrix as_matrix(const RowVector& row) { return Matrix(row); }

}  // namespace

Model init_policy(int state_dim, int teacher_count, const RlConfig& cfg, Rng& rng) {
  ModelDims d;
  d.input_dim = state_dim;
  d.hidden_dim = cfg.hidden_dim;
  d.output_dim = teacher_count;
  Model m = init_model(ModelKind::kMlp, d, rng);
  shrink_head(m, cfg.head_init_scale);
  return m;
}

Model init_value(int state_dim, const RlConfig& cfg, Rng& rng) {
  ModelDims d;
  d.input_dim = state_dim;
  d.hidden_dim = cfg.hidden_dim;
  d.output_dim = 1;
  Model m = init_model(ModelKind::kMlp, d, rng);
  shrink_head(m, cfg.head_init_scale);
  return m;
}

PolicyOutput policy_forward(const Model& policy, const RowVector& state, Rng* rng) {
  PolicyOutput out;
  out.probs = forward(policy, as_matrix(state), nullptr).probs.row(0);
  if (rng == nullptr) {
    out.action = argmax(out.probs);
  } else {
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(*rng);
    double cumulative = 0;
    out.action = static_cast<int>(out.probs.size()) - 1;
    for (Eigen::Index k = 0; k < out.probs.size(); ++k) {
      cumulative += out.probs(k);
      if (u < cumulative) {
        out.action = static_cast<int>(k);
        break;
      }
    }
  }
  out.log_prob = std::log(out.probs(out.action));
  return out;
}

Matrix policy_probs(const Model& policy, const Matrix& states) { return forward(policy, states, nullptr).probs; }

double value_forward(const Model& value, const RowVector& state) {
  return forward(value, as_matrix(state), nullptr).logits(0, 0);
}

// ---------------------------------------------------------------------------
// Reward and PPO objective

Reward compute_reward(const Matrix& student_probs, const ExpandedDataset& expanded, const Matrix& targets,
                      double eta, RewardMode mode) {
  if (expanded.size() == 0) throw std::invalid_argument("compute_reward: empty expanded set");
  const auto labeled = expanded.labeled();
  const auto gold = expanded.gold();
  Reward r;
  for (const auto& l : labeled) {
    r.l_dl -= (targets.row(l.node).array() * student_probs.row(l.node).array().log()).sum();
  }
  r.l_dl /= static_cast<double>(labeled.size());
  r.l_ce = cross_entropy(student_probs, gold, nullptr);
  r.acc = accuracy(student_probs, labeled);
  const double losses = mode == RewardMode::kAsEq4 ? r.l_dl - r.l_ce : -r.l_dl - r.l_ce;
  r.reward = eta * losses + (1.0 - eta) * r.acc;
  return r;
}

std::vector<double> advantages(std::span<const double> rewards, std::span<const double> values) {
  if (rewards.size() != values.size()) throw std::invalid_argument("advantages: length mismatch");
  std::vector<double> adv(rewards.size());
  for (std::size_t i = 0; i < adv.size(); ++i) adv[i] = rewards[i] - values[i];
  if (adv.size() >= 8) {
    const double n = static_cast<double>(adv.size());
    double mean = 0;
    for (double a : adv) mean += a;
    mean /= n;
    double var = 0;
    for (double a : adv) var += (a - mean) * (a - mean);
    const double sd = std::sqrt(var / n);
    for (double& a : adv) a = (a - mean) / (sd + 1e-8);
  }
  return adv;
}

double ppo_policy_loss(std::span<const double> new_logp, std::span<const double> old_logp,
                       std::span<const double> adv, double clip, std::vector<double>* dlogp) {
  const std::size_t n = new_logp.size();
  if (old_logp.size() != n || adv.size() != n) throw std::invalid_argument("ppo_policy_loss: length mismatch");
  if (n == 0) throw std::invalid_argument("ppo_policy_loss: empty batch");
  if (dlogp != nullptr) dlogp->assign(n, 0.0);
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = std::exp(new_logp[i] - old_logp[i]);
    if (!std::isfinite(r)) throw DivergenceError("non-finite probability ratio");
    const double unclipped = r * adv[i];
    const double clipped = std::clamp(r, 1.0 - clip, 1.0 + clip) * adv[i];
    total += std::min(unclipped, clipped);
    // Only the unclipped branch depends on the parameters.
    if (dlogp != nullptr && unclipped <= clipped) (*dlogp)[i] = -unclipped / static_cast<double>(n);
  }
  return -total / static_cast<double>(n);
}

double ppo_value_loss(std::span<const double> values, std::span<const double> targets,
                      std::vector<double>* dvalues) {
  const std::size_t n = values.size();
  if (targets.size() != n) throw std::invalid_argument("ppo_value_loss: length mismatch");
  if (n == 0) return 0.0;
  if (dvalues != nullptr) dvalues->assign(n, 0.0);
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = values[i] - targets[i];
    total += d * d;
    if (dvalues != nullptr) (*dvalues)[i] = 2.0 * d / static_cast<double>(n);
  }
  return total / static_cast<double>(n);
}

double policy_entropy(const Matrix& probs, Matrix* dlogits) {
  if (probs.rows() == 0) return 0.0;
  const double inv = 1.0 / static_cast<double>(probs.rows());
  const RowVector h = row_entropies(probs);
  if (dlogits != nullptr) {
    dlogits->resize(probs.rows(), probs.cols());
    for (Eigen::Index i = 0; i < probs.rows(); ++i) {
      dlogits->row(i).array() = -inv * probs.row(i).array() * (probs.row(i).array().log() + h(i));
    }
  }
  return h.mean();
}

namespace {

Matrix stack_states(std::span<const PpoTransition> batch) {
  if (batch.empty()) throw std::invalid_argument("empty transition batch");
  Matrix s(static_cast<Eigen::Index>(batch.size()), batch[0].state.size());
  for (std::size_t i = 0; i < batch.size(); ++i) s.row(static_cast<Eigen::Index>(i)) = batch[i].state;
  return s;
}

std::vector<double> rewards_of(std::span<const PpoTransition> batch) {
  std::vector<double> r;
  for (const auto& t : batch) r.push_back(t.reward);
  return r;
}

}  // namespace

double value_objective(const Model& value, std::span<const PpoTransition> batch, ModelParams* grad) {
  const Matrix states = stack_states(batch);
  const ForwardResult fwd = forward(value, states, nullptr);
  std::vector<double> v(batch.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = fwd.logits(static_cast<Eigen::Index>(i), 0);
  const auto targets = rewards_of(batch);
  std::vector<double> dv;
  const double loss = ppo_value_loss(v, targets, grad != nullptr ? &dv : nullptr);
  if (grad != nullptr) {
    Matrix upstream(static_cast<Eigen::Index>(dv.size()), 1);
    for (std::size_t i = 0; i < dv.size(); ++i) upstream(static_cast<Eigen::Index>(i), 0) = dv[i];
    *grad = backward(value, states, nullptr, fwd, upstream);
  }
  return loss;
}

PpoObjective policy_objective(const Model& policy, const Model& value, std::span<const PpoTransition> batch,
                              const RlConfig& cfg, ModelParams* grad) {
  const Matrix states = stack_states(batch);
  const ForwardResult fwd = forward(policy, states, nullptr);
  const std::size_t n = batch.size();
  std::vector<double> new_logp(n);
  std::vector<double> old_logp(n);
  std::vector<double> stored_values(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& t = batch[i];
    if (t.action < 0 || t.action >= fwd.probs.cols()) throw std::out_of_range("transition action out of range");
    new_logp[i] = std::log(fwd.probs(static_cast<Eigen::Index>(i), t.action));
    old_logp[i] = t.old_log_prob;
    stored_values[i] = t.value;
  }
  const auto rewards = rewards_of(batch);
  const auto adv = advantages(rewards, stored_values);

  PpoObjective obj;
  std::vector<double> dlogp;
  Matrix dentropy;
  obj.policy_loss = ppo_policy_loss(new_logp, old_logp, adv, cfg.clip, grad != nullptr ? &dlogp : nullptr);
  obj.entropy = policy_entropy(fwd.probs, grad != nullptr ? &dentropy : nullptr);
  obj.value_loss = value_objective(value, batch, nullptr);
  obj.total = obj.policy_loss + cfg.c1 * obj.value_loss - cfg.c2 * obj.entropy;
  if (grad != nullptr) {
    // d log pi(a) / d z = onehot(a) - pi; the value term has no policy dependence.
    Matrix upstream = -cfg.c2 * dentropy;
    for (std::size_t i = 0; i < n; ++i) {
      const auto row = static_cast<Eigen::Index>(i);
      upstream.row(row) -= dlogp[i] * fwd.probs.row(row);
      upstream(row, batch[i].action) += dlogp[i];
    }
    *grad = backward(policy, states, nullptr, fwd, upstream);
  }
  return obj;
}

Agent::Agent(Model p, Model v, const RlConfig& cfg)
    : policy(std::move(p)),
      value(std::move(v)),
      policy_opt(policy.params, {cfg.policy_lr, 0.9, 0.999, 1e-8, 0.0}),
      value_opt(value.params, {cfg.value_lr, 0.9, 0.999, 1e-8, 0.0}) {}

PpoObjective ppo_update(Agent& agent, std::span<const PpoTransition> batch, const RlConfig& cfg) {
  if (batch.empty()) throw std::invalid_argument("ppo_update: empty batch");
  ModelParams pg;
  ModelParams vg;
  const PpoObjective obj = policy_objective(agent.policy, agent.value, batch, cfg, &pg);
  value_objective(agent.value, batch, &vg);
  agent.policy_opt.step(agent.policy.params, pg);
  agent.value_opt.step(agent.value.params, vg);
  if (!agent.policy.params.all_finite() || !agent.value.params.all_finite()) {
    throw DivergenceError("agent parameters became non-finite");
  }
  return obj;
}

// ---------------------------------------------------------------------------
// Agent loop

namespace {

void fill_argmax_mask(const Model& policy, const Matrix& states, TeacherMask& mask,
                      std::vector<double>* probs_out, const std::vector<char>* skip) {
  const Matrix probs = policy_probs(policy, states);
  if (probs_out != nullptr) probs_out->assign(probs.rows(), 0.0);
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    if (skip != nullptr && (*skip)[i]) continue;
    mask.teacher[i] = argmax(probs.row(i));
    if (probs_out != nullptr) (*probs_out)[i] = probs(i, mask.teacher[i]);
  }
}

}  // namespace

NgsResult run_ngs(const NgsInputs& in, const RlConfig& rl, const KdWeights& kd, const TrainConfig& train,
                  std::uint64_t seed) {
  rl.validate();
  kd.validate();
  const TagGraph& g = in.graph;
  const int n = g.node_count();
  const int b = in.teachers.size();
  if (b < 1) throw std::invalid_argument("run_ngs: no teachers");
  if (in.expanded.size() == 0) throw std::invalid_argument("run_ngs: empty expanded set");
  const auto gold = in.expanded.gold();
  const auto scope = all_nodes(n);
  const auto val = with_true_labels(g, in.val_nodes);

  NgsResult result;
  result.mask = TeacherMask::uniform_choice(n, b, 0);
  Rng init_rng(derive_seed(seed, "agent-init"));
  std::optional<StateEncoder> encoder;
  int state_dim = 1;
  if (b > 1) {
    encoder.emplace(g, in.teachers, in.expanded, in.k_nn);
    state_dim = encoder->dim();
  }
  Model policy = init_policy(state_dim, b, rl, init_rng);
  Model value = init_value(state_dim, rl, init_rng);

  if (b == 1 || rl.epochs == 0) {
    if (b > 1) {
      fill_argmax_mask(policy, encoder->table(), result.mask, &result.mask_prob, nullptr);
    } else {
      result.mask_prob.assign(n, 1.0);
    }
    const Matrix targets = assemble_teacher_targets(in.teachers.probs, result.mask);
    TrainResult tr = train_student(in.student_kind, g, in.ops, targets, gold, kd, in.val_nodes, train);
    result.student = std::move(tr.model);
    result.best_val_accuracy = tr.best_val_accuracy;
    result.student_updates = static_cast<int>(tr.history.size());
    result.policy = std::move(policy);
    result.value = std::move(value);
    return result;
  }

  const Matrix& states = encoder->table();
  Agent agent(std::move(policy), std::move(value), rl);
  StudentTrainer student(init_student(in.student_kind, g, train), g.features(), &in.ops, train);

  std::vector<char> in_expanded(n, 0);
  for (int v : in.expanded.nodes()) in_expanded.at(v) = 1;
  fill_argmax_mask(agent.policy, states, result.mask, nullptr, nullptr);
  Matrix targets = assemble_teacher_targets(in.teachers.probs, result.mask);

  auto score_of = [&](const ForwardResult& fwd) {
    return ValidationScore{accuracy(fwd.probs, val), cross_entropy(fwd.probs, val, nullptr)};
  };
  ValidationScore best = score_of(student.predict());
  ModelParams best_params = student.model().params;

  Rng rng(derive_seed(seed, "ngs"));
  std::vector<int> order = in.expanded.nodes();
  std::vector<PpoTransition> batch;
  for (int epoch = 0; epoch < rl.epochs; ++epoch) {
    // Nodes outside the expanded set follow the current policy's argmax.
    fill_argmax_mask(agent.policy, states, result.mask, nullptr, &in_expanded);
    for (int i = 0; i < n; ++i) {
      if (!in_expanded[i]) targets.row(i) = in.teachers.probs[result.mask.teacher[i]].row(i);
    }
    std::shuffle(order.begin(), order.end(), rng);
    batch.clear();
    Reward last;
    double reward_sum = 0;
    for (int node : order) {
      const RowVector state = states.row(node);
      const PolicyOutput act = policy_forward(agent.policy, state, &rng);
      const double v = value_forward(agent.value, state);
      result.mask.teacher[node] = act.action;
      targets.row(node) = in.teachers.probs[act.action].row(node);

      student.train(targets, gold, kd, scope, rl.student_steps);
      result.student_updates += rl.student_steps;
      const ForwardResult& fwd = student.predict();
      last = compute_reward(fwd.probs, in.expanded, targets, rl.eta, rl.reward_mode);
      reward_sum += last.reward;
      if (!val.empty()) {
        const ValidationScore s = score_of(fwd);
        if (s.better_than(best)) {
          best = s;
          best_params = student.model().params;
        }
      }
      batch.push_back({node, state, act.action, last.reward, v, act.log_prob});
    }
    const PpoObjective obj = ppo_update(agent, batch, rl);
    result.log.push_back({epoch, reward_sum / static_cast<double>(batch.size()), last.acc, last.l_dl, last.l_ce,
                          obj.entropy});
  }

  fill_argmax_mask(agent.policy, states, result.mask, &result.mask_prob, nullptr);
  result.student = student.model();
  if (!val.empty()) result.student.params = std::move(best_params);
  result.best_val_accuracy = best.accuracy;
  result.policy = std::move(agent.policy);
  result.value = std::move(agent.value);
  return result;
}

std::string assignments_to_csv(const NgsResult& r) {
  std::ostringstream out;
  out << "node_id,teacher_index,policy_prob\n";
  for (std::size_t i = 0; i < r.mask.teacher.size(); ++i) {
    out << i << ',' << r.mask.teacher[i] << ',' << format_double(i < r.mask_prob.size() ? r.mask_prob[i] : 0.0)
        << '\n';
  }
  return out.str();
}

std::string ngs_log_to_jsonl(std::span<const NgsEpochLog> log) {
  std::string out;
  for (const auto& e : log) {
    nlohmann::ordered_json j;
    j["epoch"] = e.epoch;
    j["mean_reward"] = e.mean_reward;
    j["acc"] = e.acc;
    j["l_dl"] = e.l_dl;
    j["l_ce"] = e.l_ce;
    j["policy_entropy"] = e.policy_entropy;
    out += j.dump() + "\n";
  }
  return out;
}

}  // namespace pkd
