#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pkd/teachers.hpp"
#include "pkd/training.hpp"

namespace pkd {

struct KdWeights {
  double alpha = 0.5;  // distillation term
  double beta = 1.0;   // gold-label cross-entropy
  double gamma = 0.1;  // prediction entropy
  void validate() const;
};

/// Teacher choice per node, stored as indices; the one-hot form is m_i.
struct TeacherMask {
  std::vector<int> teacher;
  int teacher_count = 0;

  static TeacherMask uniform_choice(int node_count, int teacher_count, int b);
  /// Throws unless every row has exactly one entry equal to 1 and the rest 0.
  static TeacherMask from_one_hot(const Matrix& one_hot);
  Matrix one_hot() const;
  std::vector<int> histogram() const;
};

/// Row i is teacher mask.teacher[i]'s distribution for node i.
Matrix assemble_teacher_targets(std::span<const Matrix> teacher_probs, const TeacherMask& mask);

struct KdLoss {
  double total = 0;
  double distill = 0;  // L_DL
  double ce = 0;       // L_CE
  double entropy = 0;  // L_E
};

/// alpha * L_DL + beta * L_CE + gamma * L_E. L_DL and L_E average over
/// `scope`; L_CE averages over `gold`. Writes d(total)/d(logits) into
/// `grad` and d(total)/d(targets) into `target_grad` when non-null.
KdLoss kd_loss(const Matrix& student_probs, const Matrix& targets, std::span<const LabeledNode> gold,
               const KdWeights& weights, std::span<const int> scope, Matrix* grad,
               Matrix* target_grad = nullptr);

/// Shannon entropy of each row, in nats.
RowVector row_entropies(const Matrix& probs);
double mean_row_entropy(const Matrix& probs);

std::vector<int> all_nodes(int node_count);

enum class Provenance { kGold, kAnnotated };
std::string_view to_string(Provenance p);

struct ExpandedEntry {
  int node = 0;
  int label = 0;
  Provenance provenance = Provenance::kGold;
  bool operator==(const ExpandedEntry&) const = default;
};

/// Gold training labels plus annotator labels, sorted by node.
class ExpandedDataset {
 public:
  ExpandedDataset() = default;
  /// Throws on overlapping node sets or labels outside [0, class_count).
  ExpandedDataset(std::span<const LabeledNode> gold, std::span<const LabeledNode> annotated, int class_count);

  const std::vector<ExpandedEntry>& entries() const noexcept { return entries_; }
  int size() const noexcept { return static_cast<int>(entries_.size()); }
  int class_count() const noexcept { return class_count_; }
  std::vector<LabeledNode> labeled() const;
  std::vector<LabeledNode> gold() const;
  std::vector<int> nodes() const;

  std::string to_csv() const;
  static ExpandedDataset from_csv(const std::string& text, int class_count);

 private:
  std::vector<ExpandedEntry> entries_;
  int class_count_ = 0;
};

/// Retrains each teacher kind from a fresh initialisation on the expanded
/// labels and rebuilds the ensemble outputs.
TeacherEnsemble retrain_teachers(std::span<const ModelKind> kinds, const TagGraph& g, const GraphOperators& ops,
                                 const ExpandedDataset& expanded, std::span<const int> val_nodes,
                                 const TrainConfig& cfg);

/// Trains one teacher per kind on `labels`.
TeacherEnsemble train_teachers(std::span<const ModelKind> kinds, const TagGraph& g, const GraphOperators& ops,
                               std::span<const LabeledNode> labels, std::span<const int> val_nodes,
                               const TrainConfig& cfg);

/// Incremental full-graph Adam training of a student on the KD objective.
/// Keeps its optimiser state between calls.
class StudentTrainer {
 public:
  StudentTrainer(Model model, const Matrix& inputs, const GraphOperators* ops, const TrainConfig& cfg);

  /// `steps` updates on the given targets; returns the loss before the last one.
  double train(const Matrix& targets, std::span<const LabeledNode> gold, const KdWeights& weights,
               std::span<const int> scope, int steps);
  /// Forward pass of the current parameters (cached until the next update).
  const ForwardResult& predict();

  const Model& model() const noexcept { return model_; }

 private:
  Model model_;
  const Matrix& inputs_;
  const GraphOperators* ops_;
  Adam adam_;
  std::optional<ForwardResult> current_;
};

Model init_student(ModelKind kind, const TagGraph& g, const TrainConfig& cfg);

/// Distills `targets` into a freshly initialised student for cfg.max_steps
/// with early stopping on validation accuracy (true labels of `val_nodes`).
TrainResult train_student(ModelKind kind, const TagGraph& g, const GraphOperators& ops, const Matrix& targets,
                          std::span<const LabeledNode> gold, const KdWeights& weights,
                          std::span<const int> val_nodes, const TrainConfig& cfg);

}  // namespace pkd
