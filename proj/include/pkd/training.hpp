#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "pkd/models.hpp"

namespace pkd {

struct LabeledNode {
  int node = 0;
  int label = 0;
  bool operator==(const LabeledNode&) const = default;
};

struct AdamConfig {
  double learning_rate = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;  // L2 term added to the gradient
};

/// Adam with bias correction; moments share the parameter layout.
class Adam {
 public:
  Adam(const ModelParams& layout, AdamConfig cfg);
  void step(ModelParams& params, const ModelParams& grads);
  int steps_taken() const noexcept { return t_; }
  const AdamConfig& config() const noexcept { return cfg_; }

 private:
  AdamConfig cfg_;
  ModelParams m_;
  ModelParams v_;
  int t_ = 0;
};

struct TrainConfig {
  int hidden_dim = 128;
  double learning_rate = 1e-2;
  double weight_decay = 5e-4;
  int max_steps = 600;
  int patience = 100;  // steps without validation improvement before stopping
  std::uint64_t seed = 0;
};

struct TrainRecord {
  int step = 0;
  double loss = 0;
  double val_accuracy = 0;
  double val_loss = 0;
  bool operator==(const TrainRecord&) const = default;
};

struct TrainResult {
  Model model;  // parameters at the best validation step
  std::vector<TrainRecord> history;
  int best_step = 0;
  double best_val_accuracy = 0;
};

/// Validation quality: higher accuracy wins, lower loss breaks ties.
struct ValidationScore {
  double accuracy = 0;
  double loss = 0;
  bool better_than(const ValidationScore& other) const;
};

/// Writes d(loss)/d(logits) into `grad` and returns the loss.
using LossFn = std::function<double(const ForwardResult&, Matrix& grad)>;
using ValidationFn = std::function<ValidationScore(const ForwardResult&)>;

/// Full-graph Adam loop with early stopping on the validation callback.
/// Returns the parameters that scored best on validation.
TrainResult fit(Model model, const Matrix& inputs, const GraphOperators* ops, const LossFn& loss,
                const ValidationFn& validate, const TrainConfig& cfg);

/// Index of the largest entry; ties go to the lowest index.
int argmax(const RowVector& row);

/// Mean negative log-likelihood of `labels` under `probs`, with gradient
/// w.r.t. the logits that produced `probs`.
double cross_entropy(const Matrix& probs, std::span<const LabeledNode> labels, Matrix* grad);
double accuracy(const Matrix& probs, std::span<const LabeledNode> labels);
/// Labeled view of `nodes` under the graph's ground truth.
std::vector<LabeledNode> with_true_labels(const TagGraph& g, std::span<const int> nodes);

/// Supervised cross-entropy training of one model kind on the given labels,
/// early-stopped on validation accuracy over `val_nodes` (true labels).
TrainResult train(ModelKind kind, const TagGraph& g, const GraphOperators& ops,
                  std::span<const LabeledNode> labels, std::span<const int> val_nodes,
                  const TrainConfig& cfg);

ModelDims dims_for(const TagGraph& g, const TrainConfig& cfg);

}  // namespace pkd
