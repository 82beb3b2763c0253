#include "pkd/training.hpp"

#include <cmath>

namespace pkd {

Adam::Adam(const ModelParams& layout, AdamConfig cfg)
    : cfg_(cfg), m_(layout.zeros_like()), v_(layout.zeros_like()) {}

void Adam::step(ModelParams& params, const ModelParams& grads) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
  auto& ps = params.tensors();
  const auto& gs = grads.tensors();
  auto& ms = m_.tensors();
  auto& vs = v_.tensors();
  if (ps.size() != gs.size() || ps.size() != ms.size()) {
    throw std::invalid_argument("Adam: parameter layout mismatch");
  }
  for (std::size_t k = 0; k < ps.size(); ++k) {
    auto& p = ps[k].value;
    Matrix g = gs[k].value;
    if (cfg_.weight_decay != 0.0) g += cfg_.weight_decay * p;
    auto& m = ms[k].value;
    auto& v = vs[k].value;
    m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
    v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
    p.array() -= cfg_.learning_rate * (m.array() / bc1) /
                 ((v.array() / bc2).sqrt() + cfg_.epsilon);
  }
}

bool ValidationScore::better_than(const ValidationScore& other) const {
  if (accuracy != other.accuracy) return accuracy > other.accuracy;
  return loss < other.loss;
}

TrainResult fit(Model model, const Matrix& inputs, const GraphOperators* ops, const LossFn& loss,
                const ValidationFn& validate, const TrainConfig& cfg) {
  TrainResult result;
  Adam adam(model.params,
            {cfg.learning_rate, 0.9, 0.999, 1e-8, cfg.weight_decay});
  ModelParams best = model.params;
  ValidationScore best_score{-1.0, std::numeric_limits<double>::infinity()};
  int since_best = 0;
  Matrix grad;
  for (int step = 0; step < cfg.max_steps; ++step) {
    const ForwardResult fwd = forward(model, inputs, ops);
    const double l = loss(fwd, grad);
    if (!std::isfinite(l)) {
      throw DivergenceError(std::string(to_string(model.kind)) + " training diverged at step " +
                            std::to_string(step) + " (loss=" + std::to_string(l) + ")");
    }
    const ValidationScore score = validate(fwd);
    result.history.push_back({step, l, score.accuracy, score.loss});
    if (score.better_than(best_score)) {
      best_score = score;
      best = model.params;
      result.best_step = step;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
    adam.step(model.params, backward(model, inputs, ops, fwd, grad));
  }
  if (cfg.max_steps > 0) {
    // Score the parameters produced by the last update as well.
    const ForwardResult fwd = forward(model, inputs, ops);
    const ValidationScore score = validate(fwd);
    if (score.better_than(best_score)) {
      best_score = score;
      best = model.params;
      result.best_step = static_cast<int>(result.history.size());
    }
    model.params = std::move(best);
    result.best_val_accuracy = best_score.accuracy;
  } else {
    result.best_val_accuracy = validate(forward(model, inputs, ops)).accuracy;
  }
  result.model = std::move(model);
  return result;
}

int argmax(const RowVector& row) {
  int best = 0;
  for (int c = 1; c < row.size(); ++c) {
    if (row(c) > row(best)) best = c;
  }
  return best;
}

double cross_entropy(const Matrix& probs, std::span<const LabeledNode> labels, Matrix* grad) {
  if (grad != nullptr) grad->setZero(probs.rows(), probs.cols());
  if (labels.empty()) return 0.0;
  const double inv = 1.0 / static_cast<double>(labels.size());
  double loss = 0;
  for (const auto& [node, label] : labels) {
    loss -= std::log(probs(node, label));
    if (grad != nullptr) {
      grad->row(node) += inv * probs.row(node);
      (*grad)(node, label) -= inv;
    }
  }
  return loss * inv;
}

double accuracy(const Matrix& probs, std::span<const LabeledNode> labels) {
  if (labels.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& [node, label] : labels) hits += argmax(probs.row(node)) == label;
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

std::vector<LabeledNode> with_true_labels(const TagGraph& g, std::span<const int> nodes) {
  std::vector<LabeledNode> out;
  out.reserve(nodes.size());
  for (int v : nodes) out.push_back({v, g.labels().at(v)});
  return out;
}

ModelDims dims_for(const TagGraph& g, const TrainConfig& cfg) {
  ModelDims d;
  d.input_dim = g.feature_dim();
  d.hidden_dim = cfg.hidden_dim;
  d.output_dim = g.class_count();
  return d;
}

TrainResult train(ModelKind kind, const TagGraph& g, const GraphOperators& ops,
                  std::span<const LabeledNode> labels, std::span<const int> val_nodes,
                  const TrainConfig& cfg) {
  if (labels.empty()) throw std::invalid_argument("train: no labeled nodes");
  for (const auto& l : labels) {
    if (l.node < 0 || l.node >= g.node_count() || l.label < 0 || l.label >= g.class_count()) {
      throw std::out_of_range("train: labeled node out of range");
    }
  }
  Rng rng(derive_seed(cfg.seed, "init", static_cast<std::uint64_t>(kind)));
  Model model = init_model(kind, dims_for(g, cfg), rng);
  const std::vector<LabeledNode> labeled(labels.begin(), labels.end());
  const std::vector<LabeledNode> val = with_true_labels(g, val_nodes);
  auto loss = [&](const ForwardResult& fwd, Matrix& grad) {
    return cross_entropy(fwd.probs, labeled, &grad);
  };
  auto validate = [&](const ForwardResult& fwd) {
    return ValidationScore{accuracy(fwd.probs, val), cross_entropy(fwd.probs, val, nullptr)};
  };
  return fit(std::move(model), g.features(), &ops, loss, validate, cfg);
}

}  // namespace pkd
