#include "pkd/distill.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <sstream>

namespace pkd {

void KdWeights::validate() const {
  if (!(alpha >= 0 && beta >= 0 && gamma >= 0)) {
    throw std::invalid_argument("KD weights must be nonnegative");
  }
}

TeacherMask TeacherMask::uniform_choice(int node_count, int teacher_count, int b) {
  if (b < 0 || b >= teacher_count) throw std::out_of_range("teacher index out of range");
  return {std::vector<int>(node_count, b), teacher_count};
}

TeacherMask TeacherMask::from_one_hot(const Matrix& one_hot) {
  TeacherMask m;
  m.teacher_count = static_cast<int>(one_hot.cols());
  for (Eigen::Index i = 0; i < one_hot.rows(); ++i) {
    int hot = -1;
    for (Eigen::Index b = 0; b < one_hot.cols(); ++b) {
      const double x = one_hot(i, b);
      if (x == 1.0 && hot < 0) {
        hot = static_cast<int>(b);
      } else if (x != 0.0) {
        throw std::invalid_argument("teacher mask row " + std::to_string(i) + " is not one-hot");
      }
    }
    if (hot < 0) throw std::invalid_argument("teacher mask row " + std::to_string(i) + " is not one-hot");
    m.teacher.push_back(hot);
  }
  return m;
}

Matrix TeacherMask::one_hot() const {
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(teacher.size()), teacher_count);
  for (std::size_t i = 0; i < teacher.size(); ++i) out(static_cast<Eigen::Index>(i), teacher[i]) = 1.0;
  return out;
}

std::vector<int> TeacherMask::histogram() const {
  std::vector<int> h(teacher_count, 0);
  for (int b : teacher) ++h.at(b);
  return h;
}

Matrix assemble_teacher_targets(std::span<const Matrix> teacher_probs, const TeacherMask& mask) {
  if (teacher_probs.empty()) throw std::invalid_argument("no teacher distributions");
  if (static_cast<int>(teacher_probs.size()) != mask.teacher_count) {
    throw std::invalid_argument("mask width differs from teacher count");
  }
  const Eigen::Index n = teacher_probs[0].rows();
  if (static_cast<Eigen::Index>(mask.teacher.size()) != n) {
    throw std::invalid_argument("mask does not cover every node");
  }
  Matrix out(n, teacher_probs[0].cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const int b = mask.teacher[i];
    if (b < 0 || b >= mask.teacher_count) throw std::invalid_argument("mask entry is not a teacher index");
    out.row(i) = teacher_probs[b].row(i);
  }
  return out;
}

RowVector row_entropies(const Matrix& probs) {
  RowVector h(probs.rows());
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    h(i) = -(probs.row(i).array() * probs.row(i).array().log()).sum();
  }
  return h;
}

double mean_row_entropy(const Matrix& probs) { return row_entropies(probs).mean(); }

KdLoss kd_loss(const Matrix& student_probs, const Matrix& targets, std::span<const LabeledNode> gold,
               const KdWeights& weights, std::span<const int> scope, Matrix* grad, Matrix* target_grad) {
  weights.validate();
  if (targets.rows() != student_probs.rows() || targets.cols() != student_probs.cols()) {
    throw std::invalid_argument("kd_loss: target shape differs from student output");
  }
  if (weights.beta > 0 && gold.empty()) throw std::invalid_argument("kd_loss: no gold labels with beta > 0");
  if (scope.empty() && (weights.alpha > 0 || weights.gamma > 0)) {
    throw std::invalid_argument("kd_loss: empty distillation scope");
  }
  if (grad != nullptr) grad->setZero(student_probs.rows(), student_probs.cols());
  if (target_grad != nullptr) target_grad->setZero(targets.rows(), targets.cols());

  KdLoss out;
  const double inv_scope = scope.empty() ? 0.0 : 1.0 / static_cast<double>(scope.size());
  const Eigen::ArrayXXd log_probs = student_probs.array().log();
  for (int i : scope) {
    if (i < 0 || i >= student_probs.rows()) throw std::out_of_range("kd_loss: scope node out of range");
    const auto p = student_probs.row(i).array();
    const auto t = targets.row(i).array();
    const auto logp = log_probs.row(i);
    out.distill -= (t * logp).sum() * inv_scope;
    const double h = -(p * logp).sum();
    out.entropy += h * inv_scope;
    if (grad != nullptr) {
      // d/dz of -t.log softmax(z) is p * sum(t) - t; of H(softmax(z)) is -p (log p + H).
      grad->row(i).array() += weights.alpha * inv_scope * (p * t.sum() - t);
      grad->row(i).array() -= weights.gamma * inv_scope * p * (logp + h);
    }
    if (target_grad != nullptr) target_grad->row(i).array() -= weights.alpha * inv_scope * logp;
  }
  Matrix ce_grad;
  out.ce = gold.empty() ? 0.0 : cross_entropy(student_probs, gold, grad != nullptr ? &ce_grad : nullptr);
  if (grad != nullptr && !gold.empty()) *grad += weights.beta * ce_grad;
  out.total = weights.alpha * out.distill + weights.beta * out.ce + weights.gamma * out.entropy;
  return out;
}

std::vector<int> all_nodes(int node_count) {
  std::vector<int> v(node_count);
  for (int i = 0; i < node_count; ++i) v[i] = i;
  return v;
}

std::string_view to_string(Provenance p) { return p == Provenance::kGold ? "gold" : "annotated"; }

ExpandedDataset::ExpandedDataset(std::span<const LabeledNode> gold, std::span<const LabeledNode> annotated,
                                 int class_count)
    : class_count_(class_count) {
  for (const auto& l : gold) entries_.push_back({l.node, l.label, Provenance::kGold});
  for (const auto& l : annotated) entries_.push_back({l.node, l.label, Provenance::kAnnotated});
  std::sort(entries_.begin(), entries_.end(),
            [](const ExpandedEntry& a, const ExpandedEntry& b) { return a.node < b.node; });
  for (std::size_t k = 0; k < entries_.size(); ++k) {
    const auto& e = entries_[k];
    if (e.label < 0 || e.label >= class_count) {
      throw std::invalid_argument("expanded label " + std::to_string(e.label) + " outside class range");
    }
    if (e.node < 0) throw std::out_of_range("expanded node index negative");
    if (k > 0 && entries_[k - 1].node == e.node) {
      throw std::invalid_argument("node " + std::to_string(e.node) + " listed twice in expanded dataset");
    }
  }
}

std::vector<LabeledNode> ExpandedDataset::labeled() const {
  std::vector<LabeledNode> out;
  for (const auto& e : entries_) out.push_back({e.node, e.label});
  return out;
}

std::vector<LabeledNode> ExpandedDataset::gold() const {
  std::vector<LabeledNode> out;
  for (const auto& e : entries_) {
    if (e.provenance == Provenance::kGold) out.push_back({e.node, e.label});
  }
  return out;
}

std::vector<int> ExpandedDataset::nodes() const {
  std::vector<int> out;
  for (const auto& e : entries_) out.push_back(e.node);
  return out;
}

std::string ExpandedDataset::to_csv() const {
  std::ostringstream out;
  out << "node_id,label,provenance\n";
  for (const auto& e : entries_) out << e.node << ',' << e.label << ',' << to_string(e.provenance) << '\n';
  return out.str();
}

ExpandedDataset ExpandedDataset::from_csv(const std::string& text, int class_count) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "node_id,label,provenance") {
    throw std::invalid_argument("expanded CSV: missing header");
  }
  std::vector<LabeledNode> gold;
  std::vector<LabeledNode> annotated;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string node;
    std::string label;
    std::string prov;
    if (!std::getline(row, node, ',') || !std::getline(row, label, ',') || !std::getline(row, prov)) {
      throw std::invalid_argument("expanded CSV: malformed row '" + line + "'");
    }
    const LabeledNode l{std::stoi(node), std::stoi(label)};
    if (prov == "gold") {
      gold.push_back(l);
    } else if (prov == "annotated") {
      annotated.push_back(l);
    } else {
      throw std::invalid_argument("expanded CSV: unknown provenance '" + prov + "'");
    }
  }
  return ExpandedDataset(gold, annotated, class_count);
}

TeacherEnsemble train_teachers(std::span<const ModelKind> kinds, const TagGraph& g, const GraphOperators& ops,
                               std::span<const LabeledNode> labels, std::span<const int> val_nodes,
                               const TrainConfig& cfg) {
  if (kinds.empty()) throw std::invalid_argument("at least one teacher kind is required");
  std::vector<std::future<TrainResult>> jobs;
  for (ModelKind kind : kinds) {
    jobs.push_back(std::async(std::launch::async, [&, kind] { return train(kind, g, ops, labels, val_nodes, cfg); }));
  }
  std::vector<Model> models;
  for (auto& j : jobs) models.push_back(j.get().model);
  return make_ensemble(std::move(models), g, ops);
}

TeacherEnsemble retrain_teachers(std::span<const ModelKind> kinds, const TagGraph& g, const GraphOperators& ops,
                                 const ExpandedDataset& expanded, std::span<const int> val_nodes,
                                 const TrainConfig& cfg) {
  if (expanded.size() == 0) throw std::invalid_argument("retrain_teachers: expanded dataset is empty");
  const auto labels = expanded.labeled();
  return train_teachers(kinds, g, ops, labels, val_nodes, cfg);
}

StudentTrainer::StudentTrainer(Model model, const Matrix& inputs, const GraphOperators* ops,
                               const TrainConfig& cfg)
    : model_(std::move(model)),
      inputs_(inputs),
      ops_(ops),
      adam_(model_.params, {cfg.learning_rate, 0.9, 0.999, 1e-8, cfg.weight_decay}) {}

double StudentTrainer::train(const Matrix& targets, std::span<const LabeledNode> gold, const KdWeights& weights,
                             std::span<const int> scope, int steps) {
  double last = 0;
  Matrix grad;
  for (int s = 0; s < steps; ++s) {
    const ForwardResult& fwd = predict();
    last = kd_loss(fwd.probs, targets, gold, weights, scope, &grad).total;
    if (!std::isfinite(last)) throw DivergenceError("student training diverged");
    const ModelParams g = backward(model_, inputs_, ops_, fwd, grad);
    current_.reset();
    adam_.step(model_.params, g);
  }
  if (!model_.params.all_finite()) throw DivergenceError("student parameters became non-finite");
  return last;
}

const ForwardResult& StudentTrainer::predict() {
  if (!current_) current_ = forward(model_, inputs_, ops_);
  return *current_;
}

Model init_student(ModelKind kind, const TagGraph& g, const TrainConfig& cfg) {
  Rng rng(derive_seed(cfg.seed, "student", static_cast<std::uint64_t>(kind)));
  return init_model(kind, dims_for(g, cfg), rng);
}

TrainResult train_student(ModelKind kind, const TagGraph& g, const GraphOperators& ops, const Matrix& targets,
                          std::span<const LabeledNode> gold, const KdWeights& weights,
                          std::span<const int> val_nodes, const TrainConfig& cfg) {
  const std::vector<int> scope = all_nodes(g.node_count());
  const std::vector<LabeledNode> gold_copy(gold.begin(), gold.end());
  const std::vector<LabeledNode> val = with_true_labels(g, val_nodes);
  auto loss = [&](const ForwardResult& fwd, Matrix& grad) {
    return kd_loss(fwd.probs, targets, gold_copy, weights, scope, &grad).total;
  };
  auto validate = [&](const ForwardResult& fwd) {
    return ValidationScore{accuracy(fwd.probs, val), cross_entropy(fwd.probs, val, nullptr)};
  };
  return fit(init_student(kind, g, cfg), g.features(), &ops, loss, validate, cfg);
}

}  // namespace pkd
