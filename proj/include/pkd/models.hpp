#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "pkd/common.hpp"
#include "pkd/graph.hpp"

namespace pkd {

enum class ModelKind { kGcn, kGat, kAppnp, kH2gcn, kMlp };

/// Serialised tag: "GCN", "GAT1", "APPNP", "H2GCN", "MLP".
std::string_view to_string(ModelKind kind);
ModelKind parse_model_kind(std::string_view tag);
/// Human-facing name used in prompts ("GAT" rather than "GAT1").
std::string_view display_name(ModelKind kind);
/// True when the kind reads the graph operators.
bool uses_graph(ModelKind kind);

struct ModelDims {
  int input_dim = 0;
  int hidden_dim = 128;
  int output_dim = 0;
  double appnp_alpha = 0.1;  // teleport probability
  int appnp_steps = 10;
};

struct NamedTensor {
  std::string name;
  Matrix value;
};

/// Ordered list of named parameter tensors. Also used to hold gradients and
/// optimiser moments, which share the layout of the parameters.
class ModelParams {
 public:
  void add(std::string name, Matrix value);
  Matrix& at(std::string_view name);
  const Matrix& at(std::string_view name) const;

  std::vector<NamedTensor>& tensors() noexcept { return tensors_; }
  const std::vector<NamedTensor>& tensors() const noexcept { return tensors_; }
  std::size_t scalar_count() const;
  bool all_finite() const;
  ModelParams zeros_like() const;
  /// this += scale * other (layouts must match).
  void add_scaled(const ModelParams& other, double scale);

  bool operator==(const ModelParams& other) const;

 private:
  std::vector<NamedTensor> tensors_;
};

struct Model {
  ModelKind kind = ModelKind::kMlp;
  ModelDims dims;
  ModelParams params;
};

/// Glorot-uniform weights, zero biases and attention vectors drawn the same way.
Model init_model(ModelKind kind, const ModelDims& dims, Rng& rng);

/// Forward activations. `saved` holds kind-specific intermediates consumed by
/// backward(); callers should treat it as opaque.
struct ForwardResult {
  Matrix logits;
  Matrix probs;
  Matrix embedding;  // penultimate-layer representation
  std::vector<Matrix> saved;
};

/// Runs the model on `inputs` (N x input_dim). Graph kinds require `ops`
/// for the same N; MLP ignores it. Throws on shape mismatch or non-finite output.
ForwardResult forward(const Model& model, const Matrix& inputs, const GraphOperators* ops);

/// Gradient of sum(upstream .* logits) with respect to every parameter.
ModelParams backward(const Model& model, const Matrix& inputs, const GraphOperators* ops,
                     const ForwardResult& fwd, const Matrix& upstream);

/// Max-shifted softmax, clamped to kProbFloor and renormalised.
RowVector softmax(const RowVector& row);
Matrix softmax_rows(const Matrix& logits);

std::string model_to_json(const Model& model);
Model model_from_json(const std::string& text);
void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

}  // namespace pkd
