#include "pkd/models.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "pkd/io.hpp"

namespace pkd {
namespace {

constexpr double kLeakySlope = 0.2;

Matrix glorot(int rows, int cols, Rng& rng) {
  const double s = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> dist(-s, s);
  Matrix m(rows, cols);
  for (int c = 0; c < cols; ++c) {
    for (int r = 0; r < rows; ++r) m(r, c) = dist(rng);
  }
  return m;
}

Matrix relu(const Matrix& a) { return a.cwiseMax(0.0); }

Matrix relu_mask(const Matrix& grad, const Matrix& pre) {
  return grad.array() * (pre.array() > 0.0).cast<double>();
}

Matrix col_sum(const Matrix& m) { return m.colwise().sum(); }

void add_bias(Matrix& m, const Matrix& bias) { m.rowwise() += bias.row(0); }

// Moves intermediates into `saved`; a braced list would copy them.
template <typename... Ms>
void keep(std::vector<Matrix>& saved, Ms&&... ms) {
  saved.reserve(sizeof...(ms));
  (saved.push_back(std::move(ms)), ...);
}

void require_ops(const GraphOperators* ops, const Matrix& inputs, ModelKind kind) {
  if (ops == nullptr) {
    throw std::invalid_argument(std::string(to_string(kind)) + " requires graph operators");
  }
  if (ops->node_count() != inputs.rows()) {
    throw std::invalid_argument("graph operators cover " + std::to_string(ops->node_count()) +
                                " nodes but inputs have " + std::to_string(inputs.rows()) + " rows");
  }
}

// Two dense layers; shared by MLP and the APPNP predictor.
struct Perceptron {
  static Matrix forward(const ModelParams& p, const Matrix& x, Matrix& a1, Matrix& h1) {
    a1 = x * p.at("W1");
    add_bias(a1, p.at("b1"));
    h1 = relu(a1);
    Matrix out = h1 * p.at("W2");
    add_bias(out, p.at("b2"));
    return out;
  }

  static void backward(const ModelParams& p, const Matrix& x, const Matrix& a1, const Matrix& h1,
                       const Matrix& g, ModelParams& grads) {
    grads.at("W2") = h1.transpose() * g;
    grads.at("b2") = col_sum(g);
    const Matrix da1 = relu_mask(g * p.at("W2").transpose(), a1);
    grads.at("W1") = x.transpose() * da1;
    grads.at("b1") = col_sum(da1);
  }
};

// Single-head additive attention over self + neighbours.
struct AttentionLayer {
  struct Saved {
    Matrix h;      // x W
    Matrix pre;    // nnz x 1, s_i + d_j before LeakyReLU
    Matrix alpha;  // nnz x 1
  };

  static Matrix forward(const GraphOperators& ops, const Matrix& x, const Matrix& w,
                        const Matrix& a_src, const Matrix& a_dst, const Matrix& b, Saved& s) {
    s.h = x * w;
    const Eigen::VectorXd src = s.h * a_src;
    const Eigen::VectorXd dst = s.h * a_dst;
    const int n = static_cast<int>(x.rows());
    const auto nnz = static_cast<Eigen::Index>(ops.attention_targets.size());
    s.pre.resize(nnz, 1);
    s.alpha.resize(nnz, 1);
    Matrix out = Matrix::Zero(n, w.cols());
    for (int i = 0; i < n; ++i) {
      const int begin = ops.attention_offsets[i];
      const int end = ops.attention_offsets[i + 1];
      double mx = -std::numeric_limits<double>::infinity();
      for (int e = begin; e < end; ++e) {
        const double pre = src(i) + dst(ops.attention_targets[e]);
        s.pre(e, 0) = pre;
        const double act = pre > 0 ? pre : kLeakySlope * pre;
        s.alpha(e, 0) = act;
        mx = std::max(mx, act);
      }
      double z = 0;
      for (int e = begin; e < end; ++e) {
        s.alpha(e, 0) = std::exp(s.alpha(e, 0) - mx);
        z += s.alpha(e, 0);
      }
      for (int e = begin; e < end; ++e) {
        s.alpha(e, 0) /= z;
        out.row(i) += s.alpha(e, 0) * s.h.row(ops.attention_targets[e]);
      }
    }
    add_bias(out, b);
    return out;
  }

  // Returns d(input); writes parameter gradients.
  static Matrix backward(const GraphOperators& ops, const Matrix& x, const Matrix& w,
                         const Matrix& a_src, const Matrix& a_dst, const Saved& s,
                         const Matrix& g, Matrix& dw, Matrix& da_src, Matrix& da_dst, Matrix& db) {
    const int n = static_cast<int>(x.rows());
    db = col_sum(g);
    Matrix dh = Matrix::Zero(s.h.rows(), s.h.cols());
    Eigen::VectorXd dsrc = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd ddst = Eigen::VectorXd::Zero(n);
    std::vector<double> dalpha;
    for (int i = 0; i < n; ++i) {
      const int begin = ops.attention_offsets[i];
      const int end = ops.attention_offsets[i + 1];
      dalpha.assign(end - begin, 0.0);
      double weighted = 0;
      for (int e = begin; e < end; ++e) {
        const int j = ops.attention_targets[e];
        dalpha[e - begin] = g.row(i).dot(s.h.row(j));
        weighted += s.alpha(e, 0) * dalpha[e - begin];
        dh.row(j) += s.alpha(e, 0) * g.row(i);
      }
      for (int e = begin; e < end; ++e) {
        const int j = ops.attention_targets[e];
        const double de = s.alpha(e, 0) * (dalpha[e - begin] - weighted);
        const double dpre = s.pre(e, 0) > 0 ? de : kLeakySlope * de;
        dsrc(i) += dpre;
        ddst(j) += dpre;
      }
    }
    dh += dsrc * a_src.transpose();
    dh += ddst * a_dst.transpose();
    da_src = s.h.transpose() * dsrc;
    da_dst = s.h.transpose() * ddst;
    dw = x.transpose() * dh;
    return dh * w.transpose();
  }
};

void check_dims(const Model& m, const Matrix& inputs) {
  if (inputs.cols() != m.dims.input_dim) {
    throw std::invalid_argument("input has " + std::to_string(inputs.cols()) +
                                " columns, model expects " + std::to_string(m.dims.input_dim));
  }
}

void finish(ForwardResult& r, ModelKind kind) {
  if (!r.logits.allFinite()) {
    throw std::runtime_error(std::string(to_string(kind)) + " forward produced non-finite logits");
  }
  r.probs = softmax_rows(r.logits);
}

}  // namespace

std::string_view to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::kGcn: return "GCN";
    case ModelKind::kGat: return "GAT1";
    case ModelKind::kAppnp: return "APPNP";
    case ModelKind::kH2gcn: return "H2GCN";
    case ModelKind::kMlp: return "MLP";
  }
  return "?";
}

ModelKind parse_model_kind(std::string_view tag) {
  if (tag == "GCN") return ModelKind::kGcn;
  if (tag == "GAT1" || tag == "GAT") return ModelKind::kGat;
  if (tag == "APPNP") return ModelKind::kAppnp;
  if (tag == "H2GCN") return ModelKind::kH2gcn;
  if (tag == "MLP") return ModelKind::kMlp;
  throw std::invalid_argument("unknown model kind '" + std::string(tag) + "'");
}

std::string_view display_name(ModelKind kind) {
  return kind == ModelKind::kGat ? "GAT" : to_string(kind);
}

bool uses_graph(ModelKind kind) { return kind != ModelKind::kMlp; }

// ---------------------------------------------------------------------------
// ModelParams

void ModelParams::add(std::string name, Matrix value) {
  tensors_.push_back({std::move(name), std::move(value)});
}

Matrix& ModelParams::at(std::string_view name) {
  for (auto& t : tensors_) {
    if (t.name == name) return t.value;
  }
  throw std::out_of_range("no parameter named '" + std::string(name) + "'");
}

const Matrix& ModelParams::at(std::string_view name) const {
  return const_cast<ModelParams*>(this)->at(name);
}

std::size_t ModelParams::scalar_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += static_cast<std::size_t>(t.value.size());
  return n;
}

bool ModelParams::all_finite() const {
  return std::all_of(tensors_.begin(), tensors_.end(),
                     [](const NamedTensor& t) { return t.value.allFinite(); });
}

ModelParams ModelParams::zeros_like() const {
  ModelParams z;
  for (const auto& t : tensors_) z.add(t.name, Matrix::Zero(t.value.rows(), t.value.cols()));
  return z;
}

void ModelParams::add_scaled(const ModelParams& other, double scale) {
  if (other.tensors_.size() != tensors_.size()) throw std::invalid_argument("parameter layout mismatch");
  for (std::size_t k = 0; k < tensors_.size(); ++k) tensors_[k].value += scale * other.tensors_[k].value;
}

bool ModelParams::operator==(const ModelParams& other) const {
  if (tensors_.size() != other.tensors_.size()) return false;
  for (std::size_t k = 0; k < tensors_.size(); ++k) {
    const auto& a = tensors_[k];
    const auto& b = other.tensors_[k];
    if (a.name != b.name || a.value.rows() != b.value.rows() || a.value.cols() != b.value.cols() ||
        a.value != b.value) {
      return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------------------

Model init_model(ModelKind kind, const ModelDims& dims, Rng& rng) {
  if (dims.input_dim < 1 || dims.hidden_dim < 1 || dims.output_dim < 1) {
    throw std::invalid_argument("model dimensions must be positive");
  }
  const int f = dims.input_dim;
  const int h = dims.hidden_dim;
  const int c = dims.output_dim;
  Model m{kind, dims, {}};
  auto& p = m.params;
  switch (kind) {
    case ModelKind::kGcn:
    case ModelKind::kMlp:
    case ModelKind::kAppnp:
      p.add("W1", glorot(f, h, rng));
      p.add("b1", Matrix::Zero(1, h));
      p.add("W2", glorot(h, c, rng));
      p.add("b2", Matrix::Zero(1, c));
      break;
    case ModelKind::kGat:
      p.add("W1", glorot(f, h, rng));
      p.add("a1_src", glorot(h, 1, rng));
      p.add("a1_dst", glorot(h, 1, rng));
      p.add("b1", Matrix::Zero(1, h));
      p.add("W2", glorot(h, c, rng));
      p.add("a2_src", glorot(c, 1, rng));
      p.add("a2_dst", glorot(c, 1, rng));
      p.add("b2", Matrix::Zero(1, c));
      break;
    case ModelKind::kH2gcn:
      p.add("We", glorot(f, h, rng));
      p.add("be", Matrix::Zero(1, h));
      p.add("Wo", glorot(3 * h, c, rng));
      p.add("bo", Matrix::Zero(1, c));
      break;
  }
  return m;
}

ForwardResult forward(const Model& model, const Matrix& inputs, const GraphOperators* ops) {
  check_dims(model, inputs);
  const auto& p = model.params;
  ForwardResult r;
  switch (model.kind) {
    case ModelKind::kMlp: {
      Matrix a1, h1;
      r.logits = Perceptron::forward(p, inputs, a1, h1);
      r.embedding = h1;
      keep(r.saved, std::move(a1), std::move(h1));
      break;
    }
    case ModelKind::kGcn: {
      require_ops(ops, inputs, model.kind);
      const Matrix* cached = ops->propagated(inputs);
      Matrix ax = cached != nullptr ? *cached : Matrix(ops->norm_adj * inputs);
      Matrix a1 = ax * p.at("W1");
      add_bias(a1, p.at("b1"));
      Matrix h1 = relu(a1);
      r.logits = ops->norm_adj * (h1 * p.at("W2"));
      add_bias(r.logits, p.at("b2"));
      r.embedding = h1;
      keep(r.saved, std::move(ax), std::move(a1), std::move(h1));
      break;
    }
    case ModelKind::kAppnp: {
      require_ops(ops, inputs, model.kind);
      Matrix a1, h1;
      const Matrix z0 = Perceptron::forward(p, inputs, a1, h1);
      const double alpha = model.dims.appnp_alpha;
      Matrix z = z0;
      for (int k = 0; k < model.dims.appnp_steps; ++k) {
        z = (1.0 - alpha) * (ops->norm_adj * z) + alpha * z0;
      }
      r.logits = std::move(z);
      r.embedding = h1;
      keep(r.saved, std::move(a1), std::move(h1));
      break;
    }
    case ModelKind::kH2gcn: {
      require_ops(ops, inputs, model.kind);
      const int h = model.dims.hidden_dim;
      Matrix a0 = inputs * p.at("We");
      add_bias(a0, p.at("be"));
      Matrix h0 = relu(a0);
      Matrix cat(inputs.rows(), 3 * h);
      cat.leftCols(h) = h0;
      cat.middleCols(h, h) = ops->hop1_mean * h0;
      cat.rightCols(h) = ops->hop2_mean * h0;
      r.logits = cat * p.at("Wo");
      add_bias(r.logits, p.at("bo"));
      r.embedding = cat;
      keep(r.saved, std::move(a0), std::move(h0), std::move(cat));
      break;
    }
    case ModelKind::kGat: {
      require_ops(ops, inputs, model.kind);
      AttentionLayer::Saved s1, s2;
      Matrix o1 = AttentionLayer::forward(*ops, inputs, p.at("W1"), p.at("a1_src"), p.at("a1_dst"),
                                          p.at("b1"), s1);
      Matrix h1 = relu(o1);
      r.logits = AttentionLayer::forward(*ops, h1, p.at("W2"), p.at("a2_src"), p.at("a2_dst"),
                                         p.at("b2"), s2);
      r.embedding = h1;
      keep(r.saved, std::move(s1.h), std::move(s1.pre), std::move(s1.alpha), std::move(o1),
                 std::move(h1), std::move(s2.h), std::move(s2.pre), std::move(s2.alpha));
      break;
    }
  }
  finish(r, model.kind);
  return r;
}

ModelParams backward(const Model& model, const Matrix& inputs, const GraphOperators* ops,
                     const ForwardResult& fwd, const Matrix& upstream) {
  if (upstream.rows() != fwd.logits.rows() || upstream.cols() != fwd.logits.cols()) {
    throw std::invalid_argument("upstream gradient shape does not match logits");
  }
  const auto& p = model.params;
  ModelParams grads = p.zeros_like();
  switch (model.kind) {
    case ModelKind::kMlp:
      Perceptron::backward(p, inputs, fwd.saved[0], fwd.saved[1], upstream, grads);
      break;
    case ModelKind::kGcn: {
      require_ops(ops, inputs, model.kind);
      const Matrix& ax = fwd.saved[0];
      const Matrix& a1 = fwd.saved[1];
      const Matrix& h1 = fwd.saved[2];
      grads.at("b2") = col_sum(upstream);
      const Matrix dt = ops->norm_adj.transpose() * upstream;
      grads.at("W2") = h1.transpose() * dt;
      const Matrix da1 = relu_mask(dt * p.at("W2").transpose(), a1);
      grads.at("b1") = col_sum(da1);
      grads.at("W1") = ax.transpose() * da1;
      break;
    }
    case ModelKind::kAppnp: {
      require_ops(ops, inputs, model.kind);
      const double alpha = model.dims.appnp_alpha;
      Matrix g = upstream;
      Matrix dz0 = Matrix::Zero(g.rows(), g.cols());
      for (int k = 0; k < model.dims.appnp_steps; ++k) {
        dz0 += alpha * g;
        g = (1.0 - alpha) * (ops->norm_adj.transpose() * g);
      }
      dz0 += g;
      Perceptron::backward(p, inputs, fwd.saved[0], fwd.saved[1], dz0, grads);
      break;
    }
    case ModelKind::kH2gcn: {
      require_ops(ops, inputs, model.kind);
      const int h = model.dims.hidden_dim;
      const Matrix& a0 = fwd.saved[0];
      const Matrix& cat = fwd.saved[2];
      grads.at("Wo") = cat.transpose() * upstream;
      grads.at("bo") = col_sum(upstream);
      const Matrix dcat = upstream * p.at("Wo").transpose();
      Matrix dh0 = dcat.leftCols(h);
      dh0 += ops->hop1_mean.transpose() * dcat.middleCols(h, h);
      dh0 += ops->hop2_mean.transpose() * dcat.rightCols(h);
      const Matrix da0 = relu_mask(dh0, a0);
      grads.at("We") = inputs.transpose() * da0;
      grads.at("be") = col_sum(da0);
      break;
    }
    case ModelKind::kGat: {
      require_ops(ops, inputs, model.kind);
      AttentionLayer::Saved s1{fwd.saved[0], fwd.saved[1], fwd.saved[2]};
      const Matrix& o1 = fwd.saved[3];
      const Matrix& h1 = fwd.saved[4];
      AttentionLayer::Saved s2{fwd.saved[5], fwd.saved[6], fwd.saved[7]};
      const Matrix dh1 = AttentionLayer::backward(
          *ops, h1, p.at("W2"), p.at("a2_src"), p.at("a2_dst"), s2, upstream, grads.at("W2"),
          grads.at("a2_src"), grads.at("a2_dst"), grads.at("b2"));
      const Matrix do1 = relu_mask(dh1, o1);
      AttentionLayer::backward(*ops, inputs, p.at("W1"), p.at("a1_src"), p.at("a1_dst"), s1, do1,
                               grads.at("W1"), grads.at("a1_src"), grads.at("a1_dst"),
                               grads.at("b1"));
      break;
    }
  }
  if (!grads.all_finite()) {
    throw DivergenceError(std::string(to_string(model.kind)) + " backward produced non-finite gradients");
  }
  return grads;
}

RowVector softmax(const RowVector& row) {
  RowVector p = (row.array() - row.maxCoeff()).exp();
  p /= p.sum();
  p = p.cwiseMax(kProbFloor);
  p /= p.sum();
  return p.cwiseMax(kProbFloor);
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) p.row(i) = softmax(logits.row(i));
  return p;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {
using json = nlohmann::ordered_json;

json matrix_to_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix matrix_from_json(const json& j, Eigen::Index rows, Eigen::Index cols, const std::string& name) {
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != rows) {
    throw std::invalid_argument("checkpoint tensor '" + name + "' has wrong row count");
  }
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    if (static_cast<Eigen::Index>(j[r].size()) != cols) {
      throw std::invalid_argument("checkpoint tensor '" + name + "' has wrong column count");
    }
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = j[r][c].get<double>();
  }
  return m;
}
}  // namespace

std::string model_to_json(const Model& model) {
  json j;
  j["kind"] = std::string(to_string(model.kind));
  j["dims"] = {{"input_dim", model.dims.input_dim},
               {"hidden_dim", model.dims.hidden_dim},
               {"output_dim", model.dims.output_dim},
               {"appnp_alpha", model.dims.appnp_alpha},
               {"appnp_steps", model.dims.appnp_steps}};
  json tensors = json::object();
  for (const auto& t : model.params.tensors()) tensors[t.name] = matrix_to_json(t.value);
  j["tensors"] = std::move(tensors);
  return j.dump();
}

Model model_from_json(const std::string& text) {
  const json j = json::parse(text);
  ModelDims dims;
  const auto& d = j.at("dims");
  dims.input_dim = d.at("input_dim").get<int>();
  dims.hidden_dim = d.at("hidden_dim").get<int>();
  dims.output_dim = d.at("output_dim").get<int>();
  dims.appnp_alpha = d.at("appnp_alpha").get<double>();
  dims.appnp_steps = d.at("appnp_steps").get<int>();
  Rng layout_rng(0);
  Model m = init_model(parse_model_kind(j.at("kind").get<std::string>()), dims, layout_rng);
  const auto& tensors = j.at("tensors");
  if (tensors.size() != m.params.tensors().size()) {
    throw std::invalid_argument("checkpoint tensor count does not match model kind");
  }
  for (auto& t : m.params.tensors()) {
    t.value = matrix_from_json(tensors.at(t.name), t.value.rows(), t.value.cols(), t.name);
  }
  return m;
}

void save_model(const Model& model, const std::filesystem::path& path) {
  write_text_file(path, model_to_json(model) + "\n");
}

Model load_model(const std::filesystem::path& path) { return model_from_json(read_text_file(path)); }

}  // namespace pkd
