#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pkd/distill.hpp"
#include "pkd/selection.hpp"

namespace pkd {

// Node-preference-driven teacher selection trained with clipped PPO.

enum class RewardMode { kAsEq4, kNegatedLosses };
std::string_view to_string(RewardMode mode);
RewardMode parse_reward_mode(std::string_view tag);

struct RlConfig {
  double eta = 0.3;
  double c1 = 0.5;
  double c2 = 0.01;
  double clip = 0.2;
  double policy_lr = 1e-3;
  double value_lr = 1e-3;
  int epochs = 200;        // agent epochs L1
  int student_steps = 5;   // student updates after each assignment
  int hidden_dim = 64;     // policy/value perceptron width
  double head_init_scale = 0.01;  // keeps the initial policy near uniform
  RewardMode reward_mode = RewardMode::kNegatedLosses;
  void validate() const;
};

/// Numeric state per node: features, log-degree, label agreement among
/// expanded neighbours, normalised mean DNS distance per teacher, and the
/// concatenated teacher distributions.
class StateEncoder {
 public:
  StateEncoder(const TagGraph& g, const TeacherEnsemble& teachers, const ExpandedDataset& expanded, int k_nn);

  int dim() const noexcept { return static_cast<int>(table_.cols()); }
  /// Offset of the teacher-distribution block inside a state row.
  int prediction_offset() const noexcept { return prediction_offset_; }
  RowVector encode(int node) const { return table_.row(node); }
  const Matrix& table() const noexcept { return table_; }

 private:
  Matrix table_;
  int prediction_offset_ = 0;
};

/// Selector prompt for an external policy service: semantic, structure and
/// prediction sections for `node`.
std::string render_selector_prompt(const TagGraph& g, const TeacherEnsemble& teachers, int node,
                                   const DnsResult& neighbors);

struct PolicyOutput {
  RowVector probs;
  int action = 0;
  double log_prob = 0;
};

Model init_policy(int state_dim, int teacher_count, const RlConfig& cfg, Rng& rng);
Model init_value(int state_dim, const RlConfig& cfg, Rng& rng);

/// Samples an action when `rng` is given, otherwise takes the argmax
/// (ties to the lowest index).
PolicyOutput policy_forward(const Model& policy, const RowVector& state, Rng* rng);
Matrix policy_probs(const Model& policy, const Matrix& states);
double value_forward(const Model& value, const RowVector& state);

struct Reward {
  double reward = 0;
  double l_dl = 0;  // distillation loss over the expanded nodes
  double l_ce = 0;  // gold-label cross-entropy
  double acc = 0;   // student accuracy on the expanded labels
};

Reward compute_reward(const Matrix& student_probs, const ExpandedDataset& expanded, const Matrix& targets,
                      double eta, RewardMode mode);

/// R - V, standardised when the batch has at least 8 entries.
std::vector<double> advantages(std::span<const double> rewards, std::span<const double> values);

/// Clipped surrogate loss. `dlogp` receives d(loss)/d(new_logp) when non-null.
double ppo_policy_loss(std::span<const double> new_logp, std::span<const double> old_logp,
                       std::span<const double> adv, double clip, std::vector<double>* dlogp = nullptr);
double ppo_value_loss(std::span<const double> values, std::span<const double> targets,
                      std::vector<double>* dvalues = nullptr);
/// Mean Shannon entropy of the rows of `probs`; `dlogits` receives the
/// gradient w.r.t. the logits that produced them.
double policy_entropy(const Matrix& probs, Matrix* dlogits = nullptr);

struct PpoTransition {
  int node = 0;
  RowVector state;
  int action = 0;
  double reward = 0;
  double value = 0;
  double old_log_prob = 0;
};

struct PpoObjective {
  double policy_loss = 0;  // L_A
  double value_loss = 0;   // L_V
  double entropy = 0;      // H
  double total = 0;        // L_A + c1 L_V - c2 H
};

/// Objective of the policy model on a batch and its parameter gradient.
/// Advantages are derived from the stored rewards and values.
PpoObjective policy_objective(const Model& policy, const Model& value, std::span<const PpoTransition> batch,
                              const RlConfig& cfg, ModelParams* grad);
/// L_V on a batch and its gradient w.r.t. the value parameters.
double value_objective(const Model& value, std::span<const PpoTransition> batch, ModelParams* grad);

/// Policy/value pair with their optimisers.
struct Agent {
  Model policy;
  Model value;
  Adam policy_opt;
  Adam value_opt;
  Agent(Model p, Model v, const RlConfig& cfg);
};

/// One optimiser step for each model on the batch.
PpoObjective ppo_update(Agent& agent, std::span<const PpoTransition> batch, const RlConfig& cfg);

struct NgsEpochLog {
  int epoch = 0;
  double mean_reward = 0;
  double acc = 0;
  double l_dl = 0;
  double l_ce = 0;
  double policy_entropy = 0;
};

struct NgsResult {
  TeacherMask mask;                  // argmax of the final policy, every node
  std::vector<double> mask_prob;     // policy probability of the chosen teacher
  Model policy;
  Model value;
  Model student;                     // best validation snapshot
  double best_val_accuracy = 0;
  int student_updates = 0;
  std::vector<NgsEpochLog> log;
};

struct NgsInputs {
  const TagGraph& graph;
  const GraphOperators& ops;
  const TeacherEnsemble& teachers;
  const ExpandedDataset& expanded;
  std::span<const int> val_nodes;
  ModelKind student_kind = ModelKind::kGcn;
  int k_nn = 4;
};

/// Agent loop: each epoch shuffles the expanded nodes; for each one the
/// policy picks a teacher, the student takes `student_steps` updates on the
/// KD objective and the reward is recorded. One PPO update per epoch.
/// With a single teacher or zero epochs the student is distilled directly
/// under the resulting mask via train_student.
NgsResult run_ngs(const NgsInputs& in, const RlConfig& rl, const KdWeights& kd, const TrainConfig& train,
                  std::uint64_t seed);

std::string assignments_to_csv(const NgsResult& r);
std::string ngs_log_to_jsonl(std::span<const NgsEpochLog> log);

}  // namespace pkd
