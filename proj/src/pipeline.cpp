#include "pkd/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "pkd/io.hpp"

namespace pkd {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

void reject_unknown(const json& j, std::initializer_list<std::string_view> keys, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + " must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (std::find(keys.begin(), keys.end(), k) == keys.end()) {
      throw std::invalid_argument("unknown config field '" + where + "." + k + "'");
    }
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

std::string_view annotator_tag(const AnnotatorKind& a) {
  if (std::holds_alternative<GroundTruthOracle>(a)) return "oracle";
  if (std::holds_alternative<MajorityTeacherVote>(a)) return "majority_vote";
  return "http";
}

}  // namespace

void PipelineConfig::validate() const {
  if (!graph.path) graph.sbm.validate();
  if (labels_per_class < 1) throw std::invalid_argument("labels_per_class must be positive");
  if (!(test_frac >= 0.0 && test_frac < 1.0)) throw std::invalid_argument("test_frac must lie in [0, 1)");
  if (!(expansion_ratio > 0.0 && expansion_ratio <= 1.0)) {
    throw std::invalid_argument("expansion_ratio must lie in (0, 1]");
  }
  if (teachers.empty()) throw std::invalid_argument("at least one teacher is required");
  if (student_hidden_dim < 1) throw std::invalid_argument("student_hidden_dim must be positive");
  if (k_nn < 1) throw std::invalid_argument("k_nn must be positive");
  if (seeds.empty()) throw std::invalid_argument("at least one seed is required");
  if (train.max_steps < 0 || train.patience < 1 || train.hidden_dim < 1) {
    throw std::invalid_argument("invalid training settings");
  }
  kd.validate();
  rl.validate();
  if (const auto* o = std::get_if<GroundTruthOracle>(&annotator)) {
    if (!(o->noise_rate >= 0.0 && o->noise_rate <= 1.0)) throw std::invalid_argument("noise_rate must lie in [0, 1]");
  }
  if (const auto* h = std::get_if<ExternalHttp>(&annotator)) {
    if (h->endpoint.empty()) throw std::invalid_argument("http annotator needs an endpoint");
  }
}

PipelineConfig config_from_json(const std::string& text) {
  const json j = json::parse(text);
  reject_unknown(j,
                 {"graph", "labels_per_class", "test_frac", "expansion_ratio", "teachers", "student",
                  "student_hidden_dim", "annotator", "kd", "rl", "train", "k_nn", "seeds", "output_dir"},
                 "config");
  PipelineConfig c;
  if (j.contains("graph")) {
    const json& g = j.at("graph");
    reject_unknown(g, {"path", "sbm"}, "graph");
    if (g.contains("path") && g.contains("sbm")) throw std::invalid_argument("graph: give either path or sbm");
    if (g.contains("path")) c.graph.path = g.at("path").get<std::string>();
    if (g.contains("sbm")) {
      const json& s = g.at("sbm");
      reject_unknown(s,
                     {"node_count", "class_count", "p_in", "p_out", "feature_dim", "class_separation",
                      "feature_noise", "seed"},
                     "graph.sbm");
      read(s, "node_count", c.graph.sbm.node_count);
      read(s, "class_count", c.graph.sbm.class_count);
      read(s, "p_in", c.graph.sbm.p_in);
      read(s, "p_out", c.graph.sbm.p_out);
      read(s, "feature_dim", c.graph.sbm.feature_dim);
      read(s, "class_separation", c.graph.sbm.class_separation);
      read(s, "feature_noise", c.graph.sbm.feature_noise);
      read(s, "seed", c.graph.sbm.seed);
    }
  }
  read(j, "labels_per_class", c.labels_per_class);
  read(j, "test_frac", c.test_frac);
  read(j, "expansion_ratio", c.expansion_ratio);
  if (j.contains("teachers")) {
    c.teachers.clear();
    for (const auto& t : j.at("teachers")) c.teachers.push_back(parse_model_kind(t.get<std::string>()));
  }
  if (j.contains("student")) c.student = parse_model_kind(j.at("student").get<std::string>());
  read(j, "student_hidden_dim", c.student_hidden_dim);
  if (j.contains("annotator")) {
    const json& a = j.at("annotator");
    const std::string kind = a.value("kind", "oracle");
    if (kind == "oracle") {
      reject_unknown(a, {"kind", "noise_rate"}, "annotator");
      GroundTruthOracle o;
      read(a, "noise_rate", o.noise_rate);
      c.annotator = o;
    } else if (kind == "majority_vote") {
      reject_unknown(a, {"kind"}, "annotator");
      c.annotator = MajorityTeacherVote{};
    } else if (kind == "http") {
      reject_unknown(a, {"kind", "endpoint", "timeout_seconds", "max_retries", "max_concurrency"}, "annotator");
      ExternalHttp h;
      read(a, "endpoint", h.endpoint);
      read(a, "timeout_seconds", h.timeout_seconds);
      read(a, "max_retries", h.max_retries);
      read(a, "max_concurrency", h.max_concurrency);
      c.annotator = h;
    } else {
      throw std::invalid_argument("unknown annotator kind '" + kind + "'");
    }
  }
  if (j.contains("kd")) {
    const json& k = j.at("kd");
    reject_unknown(k, {"alpha", "beta", "gamma"}, "kd");
    read(k, "alpha", c.kd.alpha);
    read(k, "beta", c.kd.beta);
    read(k, "gamma", c.kd.gamma);
  }
  if (j.contains("rl")) {
    const json& r = j.at("rl");
    reject_unknown(r,
                   {"eta", "c1", "c2", "clip", "policy_lr", "value_lr", "epochs", "student_steps", "hidden_dim",
                    "head_init_scale", "reward_mode"},
                   "rl");
    read(r, "eta", c.rl.eta);
    read(r, "c1", c.rl.c1);
    read(r, "c2", c.rl.c2);
    read(r, "clip", c.rl.clip);
    read(r, "policy_lr", c.rl.policy_lr);
    read(r, "value_lr", c.rl.value_lr);
    read(r, "epochs", c.rl.epochs);
    read(r, "student_steps", c.rl.student_steps);
    read(r, "hidden_dim", c.rl.hidden_dim);
    read(r, "head_init_scale", c.rl.head_init_scale);
    if (r.contains("reward_mode")) c.rl.reward_mode = parse_reward_mode(r.at("reward_mode").get<std::string>());
  }
  if (j.contains("train")) {
    const json& t = j.at("train");
    reject_unknown(t, {"hidden_dim", "learning_rate", "weight_decay", "max_steps", "patience"}, "train");
    read(t, "hidden_dim", c.train.hidden_dim);
    read(t, "learning_rate", c.train.learning_rate);
    read(t, "weight_decay", c.train.weight_decay);
    read(t, "max_steps", c.train.max_steps);
    read(t, "patience", c.train.patience);
  }
  read(j, "k_nn", c.k_nn);
  read(j, "seeds", c.seeds);
  read(j, "output_dir", c.output_dir);
  c.validate();
  return c;
}

std::string config_to_json(const PipelineConfig& c) {
  ojson j;
  if (c.graph.path) {
    j["graph"]["path"] = *c.graph.path;
  } else {
    const auto& s = c.graph.sbm;
    j["graph"]["sbm"] = {{"node_count", s.node_count}, {"class_count", s.class_count}, {"p_in", s.p_in},
                         {"p_out", s.p_out}, {"feature_dim", s.feature_dim},
                         {"class_separation", s.class_separation}, {"feature_noise", s.feature_noise},
                         {"seed", s.seed}};
  }
  j["labels_per_class"] = c.labels_per_class;
  j["test_frac"] = c.test_frac;
  j["expansion_ratio"] = c.expansion_ratio;
  j["teachers"] = ojson::array();
  for (ModelKind k : c.teachers) j["teachers"].push_back(std::string(to_string(k)));
  j["student"] = std::string(to_string(c.student));
  j["student_hidden_dim"] = c.student_hidden_dim;
  ojson a;
  a["kind"] = std::string(annotator_tag(c.annotator));
  if (const auto* o = std::get_if<GroundTruthOracle>(&c.annotator)) a["noise_rate"] = o->noise_rate;
  if (const auto* h = std::get_if<ExternalHttp>(&c.annotator)) {
    a["endpoint"] = h->endpoint;
    a["timeout_seconds"] = h->timeout_seconds;
    a["max_retries"] = h->max_retries;
    a["max_concurrency"] = h->max_concurrency;
  }
  j["annotator"] = a;
  j["kd"] = {{"alpha", c.kd.alpha}, {"beta", c.kd.beta}, {"gamma", c.kd.gamma}};
  j["rl"] = {{"eta", c.rl.eta},
             {"c1", c.rl.c1},
             {"c2", c.rl.c2},
             {"clip", c.rl.clip},
             {"policy_lr", c.rl.policy_lr},
             {"value_lr", c.rl.value_lr},
             {"epochs", c.rl.epochs},
             {"student_steps", c.rl.student_steps},
             {"hidden_dim", c.rl.hidden_dim},
             {"head_init_scale", c.rl.head_init_scale},
             {"reward_mode", std::string(to_string(c.rl.reward_mode))}};
  j["train"] = {{"hidden_dim", c.train.hidden_dim},
                {"learning_rate", c.train.learning_rate},
                {"weight_decay", c.train.weight_decay},
                {"max_steps", c.train.max_steps},
                {"patience", c.train.patience}};
  j["k_nn"] = c.k_nn;
  j["seeds"] = c.seeds;
  j["output_dir"] = c.output_dir;
  return j.dump(2);
}

PipelineConfig load_config(const std::filesystem::path& path) {
  try {
    return config_from_json(read_text_file(path));
  } catch (const std::exception& e) {
    throw StageError("config", e.what());
  }
}

TagGraph load_or_generate_graph(const GraphSource& source) {
  try {
    return source.path ? load_graph(*source.path) : generate_sbm(source.sbm);
  } catch (const std::exception& e) {
    throw StageError("graph", e.what());
  }
}

// ---------------------------------------------------------------------------
// Stages

namespace {

template <typename F>
auto stage(const char* name, F&& body) -> decltype(body()) {
  try {
    return body();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

TrainConfig teacher_config(const PipelineConfig& cfg, std::uint64_t seed) {
  TrainConfig t = cfg.train;
  t.seed = seed;
  return t;
}

TrainConfig student_config(const PipelineConfig& cfg, std::uint64_t seed) {
  TrainConfig t = cfg.train;
  t.seed = seed;
  t.hidden_dim = cfg.student_hidden_dim;
  return t;
}

std::vector<int> set_difference(std::vector<int> a, std::vector<int> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::vector<int> out;
  std::set_difference(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
  return out;
}

}  // namespace

InitialStage run_initial_stage(const PipelineConfig& cfg, const TagGraph& g, const GraphOperators& ops,
                               std::uint64_t seed) {
  InitialStage s;
  s.seed = seed;
  stage("split", [&] {
    s.split = split_nodes(g, cfg.labels_per_class, 0.0, cfg.test_frac, seed);
    std::vector<int> taken = s.split.train;
    taken.insert(taken.end(), s.split.test.begin(), s.split.test.end());
    s.split.validation = set_difference(all_nodes(g.node_count()), taken);
    s.gold = with_true_labels(g, s.split.train);
    return 0;
  });
  s.teachers = stage("train-teachers", [&] {
    return train_teachers(cfg.teachers, g, ops, s.gold, s.split.validation, teacher_config(cfg, seed));
  });
  return s;
}

PreferenceRank rank_pool(const TeacherEnsemble& teachers, std::span<const int> pool, NodeRanking ranking,
                         std::uint64_t seed) {
  PreferenceRank rank;
  if (teachers.size() >= 2) {
    rank = preference_rank(teachers, pool);
  } else {
    // A single teacher cannot disagree with itself: every score is zero.
    for (int v : pool) rank.entries.push_back({v, 0.0, 0.0});
    std::sort(rank.entries.begin(), rank.entries.end(),
              [](const UncertaintyScore& a, const UncertaintyScore& b) { return a.node < b.node; });
  }
  if (ranking == NodeRanking::kRandom) {
    std::sort(rank.entries.begin(), rank.entries.end(),
              [](const UncertaintyScore& a, const UncertaintyScore& b) { return a.node < b.node; });
    Rng rng(derive_seed(seed, "random-ranking"));
    std::shuffle(rank.entries.begin(), rank.entries.end(), rng);
  } else if (ranking == NodeRanking::kEntropy) {
    std::vector<std::pair<double, UncertaintyScore>> keyed;
    for (const auto& e : rank.entries) keyed.emplace_back(mean_entropy(teachers.node_rows(e.node)), e);
    std::sort(keyed.begin(), keyed.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second.node < b.second.node;
    });
    for (std::size_t k = 0; k < keyed.size(); ++k) rank.entries[k] = keyed[k].second;
  }
  return rank;
}

void rank_stage(const PipelineConfig& cfg, const TagGraph& g, const InitialStage& init, NodeRanking ranking,
                ExpansionStage& s) {
  stage("rank", [&] {
    const auto& pool = init.split.validation;
    s.rank = rank_pool(init.teachers, pool, ranking, init.seed);
    s.budget = expansion_budget(g.node_count(), static_cast<int>(init.gold.size()), cfg.expansion_ratio,
                                static_cast<int>(pool.size()));
    s.selection = select_nodes(s.rank, s.budget);
    return 0;
  });
}

void annotate_stage(const PipelineConfig& cfg, const TagGraph& g, const InitialStage& init, ExpansionStage& s) {
  stage("annotate", [&] {
    const auto names = default_class_names(g.class_count());
    AnnotatorKind kind = cfg.annotator;
    if (auto* o = std::get_if<GroundTruthOracle>(&kind)) o->seed = derive_seed(init.seed, "annotator");
    const auto annotator = make_annotator(kind, g, &init.teachers, names);
    std::vector<int> nodes = s.selection.nodes;
    std::sort(nodes.begin(), nodes.end());
    std::vector<std::string> prompts;
    for (int v : nodes) {
      const DnsResult dns = dns_neighbors(v, init.teachers.embeddings, cfg.k_nn);
      prompts.push_back(render_classification_prompt(g, v, dns, names));
    }
    s.annotations = annotate_all(*annotator, nodes, prompts);
    std::vector<LabeledNode> annotated;
    for (const auto& r : s.annotations) {
      if (r.status == AnnotationStatus::kOk) annotated.push_back({r.node, r.category});
    }
    s.expanded = ExpandedDataset(init.gold, annotated, g.class_count());
    s.val_nodes = set_difference(init.split.validation, s.selection.nodes);
    return 0;
  });
}

void retrain_stage(const PipelineConfig& cfg, const TagGraph& g, const GraphOperators& ops, const InitialStage& init,
                   ExpansionStage& s) {
  s.teachers = stage("retrain", [&] {
    return retrain_teachers(cfg.teachers, g, ops, s.expanded, s.val_nodes, teacher_config(cfg, init.seed));
  });
}

ExpansionStage run_expansion_stage(const PipelineConfig& cfg, const TagGraph& g, const GraphOperators& ops,
                                   const InitialStage& init, NodeRanking ranking) {
  ExpansionStage s;
  rank_stage(cfg, g, init, ranking, s);
  annotate_stage(cfg, g, init, s);
  retrain_stage(cfg, g, ops, init, s);
  return s;
}

// ---------------------------------------------------------------------------
// Student stages

SeedResult evaluate_student(const TagGraph& g, const GraphOperators& ops, const InitialStage& init,
                            const ExpansionStage& exp, const Model& student, std::string method) {
  SeedResult r;
  r.seed = init.seed;
  r.method = std::move(method);
  const ForwardResult fwd = forward(student, g.features(), &ops);
  const auto test = with_true_labels(g, init.split.test);
  const auto val = with_true_labels(g, exp.val_nodes);
  r.test_accuracy = accuracy(fwd.probs, test);
  r.val_accuracy = accuracy(fwd.probs, val);
  r.student_entropy = mean_row_entropy(fwd.probs);
  r.budget = exp.budget;
  int hits = 0;
  for (const auto& a : exp.annotations) {
    if (a.status != AnnotationStatus::kOk) continue;
    ++r.annotated;
    hits += a.category == g.labels()[a.node];
  }
  r.annotation_accuracy = r.annotated ? static_cast<double>(hits) / r.annotated : 0.0;
  for (const auto& p : exp.teachers.probs) r.teacher_test_accuracy.push_back(accuracy(p, test));
  for (const auto& e : exp.rank.entries) r.delta_k.push_back(e.delta_k);
  r.threshold = exp.selection.threshold;
  return r;
}

Matrix voting_targets(const TeacherEnsemble& t) {
  Matrix out = Matrix::Zero(t.node_count(), t.class_count());
  for (int i = 0; i < t.node_count(); ++i) {
    std::vector<int> votes(t.class_count(), 0);
    for (int c : t.predictions(i)) ++votes[c];
    out(i, std::max_element(votes.begin(), votes.end()) - votes.begin()) = 1.0;
  }
  return out;
}

namespace {

// Student trained jointly with a softmax gate that mixes the teachers.
struct GatedResult {
  Model student;
  TeacherMask mask;
  int steps = 0;
};

GatedResult train_gated_student(const PipelineConfig& cfg, const TagGraph& g, const GraphOperators& ops,
                                const InitialStage& init, const ExpansionStage& exp) {
  const TrainConfig tc = student_config(cfg, init.seed);
  const TeacherEnsemble& t = exp.teachers;
  const int b = t.size();
  const StateEncoder encoder(g, t, exp.expanded, cfg.k_nn);
  const Matrix& states = encoder.table();
  Rng rng(derive_seed(init.seed, "gate-init"));
  Model gate = init_policy(encoder.dim(), b, cfg.rl, rng);
  Model student = init_student(cfg.student, g, tc);
  const AdamConfig opt{tc.learning_rate, 0.9, 0.999, 1e-8, tc.weight_decay};
  Adam gate_opt(gate.params, opt);
  Adam student_opt(student.params, opt);
  const auto gold = exp.expanded.gold();
  const auto scope = all_nodes(g.node_count());
  const auto val = with_true_labels(g, exp.val_nodes);

  auto mix = [&](const Matrix& weights) {
    Matrix z = Matrix::Zero(g.node_count(), g.class_count());
    for (int k = 0; k < b; ++k) z += (weights.col(k).asDiagonal() * t.probs[k]);
    return z;
  };

  GatedResult out;
  ValidationScore best{-1.0, std::numeric_limits<double>::infinity()};
  ModelParams best_params = student.params;
  int since_best = 0;
  Matrix grad;
  Matrix target_grad;
  for (int step = 0; step < tc.max_steps; ++step) {
    const ForwardResult gfwd = forward(gate, states, nullptr);
    const Matrix targets = mix(gfwd.probs);
    const ForwardResult sfwd = forward(student, g.features(), &ops);
    const double loss = kd_loss(sfwd.probs, targets, gold, cfg.kd, scope, &grad, &target_grad).total;
    if (!std::isfinite(loss)) throw DivergenceError("gated student diverged");
    const ValidationScore score{accuracy(sfwd.probs, val), cross_entropy(sfwd.probs, val, nullptr)};
    if (score.better_than(best)) {
      best = score;
      best_params = student.params;
      since_best = 0;
    } else if (++since_best >= tc.patience) {
      break;
    }
    // dL/dw_ib = sum_c dL/dz_ic * p_ibc, then through the gate softmax.
    Matrix dweights(g.node_count(), b);
    for (int k = 0; k < b; ++k) dweights.col(k) = (target_grad.array() * t.probs[k].array()).rowwise().sum();
    const Eigen::VectorXd inner = (gfwd.probs.array() * dweights.array()).rowwise().sum();
    const Matrix dgate = gfwd.probs.array() * (dweights.colwise() - inner).array();
    student_opt.step(student.params, backward(student, g.features(), &ops, sfwd, grad));
    gate_opt.step(gate.params, backward(gate, states, nullptr, gfwd, dgate));
    out.steps = step + 1;
  }
  if (!val.empty()) student.params = std::move(best_params);
  out.student = std::move(student);
  out.mask = TeacherMask::uniform_choice(g.node_count(), b, 0);
  const Matrix w = policy_probs(gate, states);
  for (int i = 0; i < g.node_count(); ++i) out.mask.teacher[i] = argmax(w.row(i));
  return out;
}

}  // namespace

SeedResult finish_pkd(const PipelineConfig& cfg, const TagGraph& g, const GraphOperators& ops,
                      const InitialStage& init, const ExpansionStage& exp, NgsResult* ngs_out) {
  NgsResult ngs = stage("assign", [&] {
    const NgsInputs in{g, ops, exp.teachers, exp.expanded, exp.val_nodes, cfg.student, cfg.k_nn};
    return run_ngs(in, cfg.rl, cfg.kd, student_config(cfg, init.seed), derive_seed(init.seed, "ngs"));
  });
  SeedResult r = stage("evaluate", [&] { return evaluate_student(g, ops, init, exp, ngs.student, "pkd"); });
  r.assignment_histogram = ngs.mask.histogram();
  r.student_updates = ngs.student_updates;
  if (ngs_out != nullptr) *ngs_out = std::move(ngs);
  return r;
}

SeedResult finish_baseline(const PipelineConfig& cfg, const TagGraph& g, const GraphOperators& ops,
                           const InitialStage& init, const ExpansionStage& exp, const Baseline& baseline) {
  const TeacherEnsemble& t = exp.teachers;
  const int n = g.node_count();
  const TrainConfig tc = student_config(cfg, init.seed);
  const auto gold = exp.expanded.gold();
  auto distill = [&](const Matrix& targets, const TeacherMask* mask) {
    TrainResult tr = train_student(cfg.student, g, ops, targets, gold, cfg.kd, exp.val_nodes, tc);
    SeedResult r = evaluate_student(g, ops, init, exp, tr.model, baseline.label());
    if (mask != nullptr) r.assignment_histogram = mask->histogram();
    r.student_updates = static_cast<int>(tr.history.size());
    return r;
  };
  return stage("distill", [&]() -> SeedResult {
    switch (baseline.kind) {
      case BaselineKind::kRandomTeacher: {
        Rng rng(derive_seed(init.seed, "random-teacher"));
        std::uniform_int_distribution<int> pick(0, t.size() - 1);
        TeacherMask mask = TeacherMask::uniform_choice(n, t.size(), 0);
        for (int& m : mask.teacher) m = pick(rng);
        return distill(assemble_teacher_targets(t.probs, mask), &mask);
      }
      case BaselineKind::kVotingTeacher:
        return distill(voting_targets(t), nullptr);
      case BaselineKind::kFixedTeacher: {
        const TeacherMask mask = TeacherMask::uniform_choice(n, t.size(), baseline.teacher);
        return distill(assemble_teacher_targets(t.probs, mask), &mask);
      }
      case BaselineKind::kEndToEndGate: {
        if (t.size() == 1) {
          const TeacherMask mask = TeacherMask::uniform_choice(n, 1, 0);
          return distill(assemble_teacher_targets(t.probs, mask), &mask);
        }
        GatedResult gr = train_gated_student(cfg, g, ops, init, exp);
        SeedResult r = evaluate_student(g, ops, init, exp, gr.student, baseline.label());
        r.assignment_histogram = gr.mask.histogram();
        r.student_updates = gr.steps;
        return r;
      }
      case BaselineKind::kRandomNodeSelection:
      case BaselineKind::kEntropyNodeSelection:
        break;
    }
    throw std::invalid_argument("node-selection baselines replace the ranking stage, not the student stage");
  });
}

std::string_view to_string(BaselineKind kind) {
  switch (kind) {
    case BaselineKind::kRandomNodeSelection: return "random_node_selection";
    case BaselineKind::kEntropyNodeSelection: return "entropy_node_selection";
    case BaselineKind::kRandomTeacher: return "random_teacher";
    case BaselineKind::kVotingTeacher: return "voting_teacher";
    case BaselineKind::kFixedTeacher: return "fixed_teacher";
    case BaselineKind::kEndToEndGate: return "end_to_end_gate";
  }
  return "?";
}

BaselineKind parse_baseline_kind(std::string_view tag) {
  for (auto k : {BaselineKind::kRandomNodeSelection, BaselineKind::kEntropyNodeSelection,
                 BaselineKind::kRandomTeacher, BaselineKind::kVotingTeacher, BaselineKind::kFixedTeacher,
                 BaselineKind::kEndToEndGate}) {
    if (to_string(k) == tag) return k;
  }
  throw std::invalid_argument("unknown baseline '" + std::string(tag) + "'");
}

std::string Baseline::label() const {
  std::string s(to_string(kind));
  if (kind == BaselineKind::kFixedTeacher) s += "(" + std::to_string(teacher) + ")";
  return s;
}

// ---------------------------------------------------------------------------
// Reports

RunReport summarize(std::string method, std::vector<SeedResult> seeds) {
  RunReport r;
  r.method = std::move(method);
  r.seeds = std::move(seeds);
  if (!r.seeds.empty()) {
    double sum = 0;
    for (const auto& s : r.seeds) sum += s.test_accuracy;
    r.mean_accuracy = sum / static_cast<double>(r.seeds.size());
    double var = 0;
    for (const auto& s : r.seeds) var += (s.test_accuracy - r.mean_accuracy) * (s.test_accuracy - r.mean_accuracy);
    r.std_accuracy = std::sqrt(var / static_cast<double>(r.seeds.size()));
  }
  return r;
}

namespace {

ojson seed_to_json(const SeedResult& s) {
  ojson j;
  j["seed"] = s.seed;
  j["method"] = s.method;
  j["test_accuracy"] = s.test_accuracy;
  j["val_accuracy"] = s.val_accuracy;
  j["student_entropy"] = s.student_entropy;
  j["budget"] = s.budget;
  j["annotated"] = s.annotated;
  j["annotation_accuracy"] = s.annotation_accuracy;
  j["teacher_test_accuracy"] = s.teacher_test_accuracy;
  j["assignment_histogram"] = s.assignment_histogram;
  ojson sel;
  sel["pool"] = s.delta_k.size();
  sel["selected"] = s.budget;
  sel["threshold"] = s.threshold ? ojson(*s.threshold) : ojson(nullptr);
  if (!s.delta_k.empty()) {
    std::vector<double> d = s.delta_k;
    std::sort(d.begin(), d.end());
    const std::size_t m = d.size();
    sel["delta_k"] = {{"min", d.front()},
                      {"max", d.back()},
                      {"mean", std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(m)},
                      {"median", m % 2 ? d[m / 2] : 0.5 * (d[m / 2 - 1] + d[m / 2])}};
  }
  j["selection"] = sel;
  j["student_updates"] = s.student_updates;
  return j;
}

}  // namespace

std::string report_to_json(const RunReport& r) {
  ojson j;
  j["method"] = r.method;
  j["mean_accuracy"] = r.mean_accuracy;
  j["std_accuracy"] = r.std_accuracy;
  j["seeds"] = ojson::array();
  for (const auto& s : r.seeds) j["seeds"].push_back(seed_to_json(s));
  return j.dump(2) + "\n";
}

std::string summary_csv(const RunReport& r) {
  std::ostringstream out;
  out << "seed,accuracy\n";
  for (const auto& s : r.seeds) out << s.seed << ',' << format_double(s.test_accuracy) << '\n';
  return out.str();
}

// ---------------------------------------------------------------------------
// Artifacts

std::filesystem::path seed_dir(const PipelineConfig& cfg, std::uint64_t seed) {
  return std::filesystem::path(cfg.output_dir) / ("seed_" + std::to_string(seed));
}

void save_teachers(const std::filesystem::path& dir, const TeacherEnsemble& t) {
  for (int b = 0; b < static_cast<int>(t.models.size()); ++b) {
    save_model(t.models[b], dir / (std::to_string(b) + "_" + std::string(to_string(t.models[b].kind)) + ".json"));
  }
}

TeacherEnsemble load_teachers(const std::filesystem::path& dir, std::span<const ModelKind> kinds,
                              const TagGraph& g, const GraphOperators& ops) {
  std::vector<Model> models;
  for (std::size_t b = 0; b < kinds.size(); ++b) {
    models.push_back(load_model(dir / (std::to_string(b) + "_" + std::string(to_string(kinds[b])) + ".json")));
    if (models.back().kind != kinds[b]) throw std::invalid_argument("teacher checkpoint kind mismatch");
  }
  return make_ensemble(std::move(models), g, ops);
}

void save_initial_stage(const std::filesystem::path& dir, const InitialStage& s) {
  write_text_file(dir / "split.json", split_to_json(s.split));
  save_teachers(dir / "teachers_initial", s.teachers);
}

InitialStage load_initial_stage(const std::filesystem::path& dir, const TagGraph& g, const GraphOperators& ops,
                                std::uint64_t seed) {
  return stage("load", [&] {
    InitialStage s;
    s.seed = seed;
    s.split = split_from_json(read_text_file(dir / "split.json"));
    s.gold = with_true_labels(g, s.split.train);
    std::vector<std::pair<int, std::filesystem::path>> files;
    for (const auto& e : std::filesystem::directory_iterator(dir / "teachers_initial")) {
      const std::string name = e.path().filename().string();
      files.emplace_back(std::stoi(name.substr(0, name.find('_'))), e.path());
    }
    std::sort(files.begin(), files.end());
    std::vector<Model> models;
    for (const auto& [b, path] : files) models.push_back(load_model(path));
    s.teachers = make_ensemble(std::move(models), g, ops);
    return s;
  });
}

void save_expansion_stage(const std::filesystem::path& dir, const ExpansionStage& s) {
  write_text_file(dir / "rank.csv", rank_to_csv(s.rank, s.selection));
  std::string lines;
  for (const auto& a : s.annotations) lines += annotation_to_json(a) + "\n";
  write_text_file(dir / "annotations.jsonl", lines);
  write_text_file(dir / "expanded.csv", s.expanded.to_csv());
  save_teachers(dir / "teachers", s.teachers);
}

ExpansionStage load_expansion_stage(const std::filesystem::path& dir, const PipelineConfig& cfg, const TagGraph& g,
                                    const GraphOperators& ops, const InitialStage& init) {
  return stage("load", [&] {
    ExpansionStage s;
    s.rank = rank_from_csv(read_text_file(dir / "rank.csv"), &s.selection);
    s.budget = static_cast<int>(s.selection.nodes.size());
    s.annotations = annotations_from_jsonl(read_text_file(dir / "annotations.jsonl"));
    s.expanded = ExpandedDataset::from_csv(read_text_file(dir / "expanded.csv"), g.class_count());
    s.val_nodes = set_difference(init.split.validation, s.selection.nodes);
    s.teachers = load_teachers(dir / "teachers", cfg.teachers, g, ops);
    return s;
  });
}

void save_ngs(const std::filesystem::path& dir, const NgsResult& r) {
  write_text_file(dir / "assignments.csv", assignments_to_csv(r));
  write_text_file(dir / "ngs_log.jsonl", ngs_log_to_jsonl(r.log));
  save_model(r.student, dir / "student.json");
  save_model(r.policy, dir / "policy.json");
  save_model(r.value, dir / "value.json");
}

PreferenceRank rank_from_csv(const std::string& text, Selection* selection) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "node_id,delta_k,delta_v,selected") {
    throw std::invalid_argument("rank CSV: missing header");
  }
  PreferenceRank rank;
  if (selection != nullptr) *selection = {};
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string f[4];
    for (int k = 0; k < 4; ++k) {
      if (!std::getline(row, f[k], ',')) throw std::invalid_argument("rank CSV: malformed row '" + line + "'");
    }
    rank.entries.push_back({std::stoi(f[0]), std::stod(f[1]), std::stod(f[2])});
    if (selection != nullptr && f[3] == "1") {
      selection->nodes.push_back(rank.entries.back().node);
      selection->threshold = rank.entries.back().delta_k;
    }
  }
  return rank;
}

std::vector<AnnotationRecord> annotations_from_jsonl(const std::string& text) {
  std::vector<AnnotationRecord> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    AnnotationRecord r;
    r.node = j.at("node").get<int>();
    r.category = j.at("category").get<int>();
    r.raw_response = j.at("raw_response").get<std::string>();
    r.prompt = j.at("prompt").get<std::string>();
    const auto status = j.at("status").get<std::string>();
    if (status == "ok") {
      r.status = AnnotationStatus::kOk;
    } else if (status == "parse_failed") {
      r.status = AnnotationStatus::kParseFailed;
    } else if (status == "timeout") {
      r.status = AnnotationStatus::kTimeout;
    } else {
      throw std::invalid_argument("annotations: unknown status '" + status + "'");
    }
    out.push_back(std::move(r));
  }
  return out;
}

TeacherMask assignments_from_csv(const std::string& text, int teacher_count) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "node_id,teacher_index,policy_prob") {
    throw std::invalid_argument("assignments CSV: missing header");
  }
  TeacherMask m;
  m.teacher_count = teacher_count;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string node;
    std::string teacher;
    if (!std::getline(row, node, ',') || !std::getline(row, teacher, ',')) {
      throw std::invalid_argument("assignments CSV: malformed row '" + line + "'");
    }
    if (std::stoi(node) != static_cast<int>(m.teacher.size())) {
      throw std::invalid_argument("assignments CSV: rows must list nodes 0..N-1 in order");
    }
    const int b = std::stoi(teacher);
    if (b < 0 || b >= teacher_count) throw std::invalid_argument("assignments CSV: teacher index out of range");
    m.teacher.push_back(b);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Drivers

namespace {

class Timer {
 public:
  void record(const std::string& name, const std::function<void()>& body) {
    const auto t0 = std::chrono::steady_clock::now();
    body();
    totals_[name] += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
  std::string to_json() const { return ojson(totals_).dump(2) + "\n"; }

 private:
  std::map<std::string, double> totals_;
};

void write_report(const PipelineConfig& cfg, const RunReport& report) {
  const std::filesystem::path out(cfg.output_dir);
  write_text_file(out / "report.json", report_to_json(report));
  write_text_file(out / "summary.csv", summary_csv(report));
  write_text_file(out / "config.json", config_to_json(cfg) + "\n");
}

}  // namespace

void save_seed_result(const std::filesystem::path& dir, const SeedResult& r) {
  write_text_file(dir / "result.json", seed_to_json(r).dump(2) + "\n");
}

RunReport run_pipeline(const PipelineConfig& cfg) {
  cfg.validate();
  const TagGraph g = load_or_generate_graph(cfg.graph);
  const GraphOperators ops = GraphOperators::build(g);
  Timer timer;
  std::vector<SeedResult> results;
  for (std::uint64_t seed : cfg.seeds) {
    const auto dir = seed_dir(cfg, seed);
    InitialStage init;
    ExpansionStage exp;
    NgsResult ngs;
    timer.record("initial", [&] { init = run_initial_stage(cfg, g, ops, seed); });
    save_initial_stage(dir, init);
    timer.record("expansion", [&] { exp = run_expansion_stage(cfg, g, ops, init, NodeRanking::kPreference); });
    save_expansion_stage(dir, exp);
    timer.record("ngs", [&] { results.push_back(finish_pkd(cfg, g, ops, init, exp, &ngs)); });
    save_ngs(dir, ngs);
    save_seed_result(seed_dir(cfg, seed), results.back());
  }
  RunReport report = summarize("pkd", std::move(results));
  write_report(cfg, report);
  write_text_file(std::filesystem::path(cfg.output_dir) / "timings.json", timer.to_json());
  return report;
}

RunReport run_baseline(const PipelineConfig& cfg, const Baseline& baseline) {
  cfg.validate();
  if (baseline.kind == BaselineKind::kFixedTeacher &&
      (baseline.teacher < 0 || baseline.teacher >= static_cast<int>(cfg.teachers.size()))) {
    throw StageError("config", "fixed teacher index out of range");
  }
  const TagGraph g = load_or_generate_graph(cfg.graph);
  const GraphOperators ops = GraphOperators::build(g);
  std::vector<SeedResult> results;
  for (std::uint64_t seed : cfg.seeds) {
    const InitialStage init = run_initial_stage(cfg, g, ops, seed);
    if (baseline.kind == BaselineKind::kRandomNodeSelection || baseline.kind == BaselineKind::kEntropyNodeSelection) {
      const auto ranking =
          baseline.kind == BaselineKind::kRandomNodeSelection ? NodeRanking::kRandom : NodeRanking::kEntropy;
      const ExpansionStage exp = run_expansion_stage(cfg, g, ops, init, ranking);
      SeedResult r = finish_pkd(cfg, g, ops, init, exp);
      r.method = baseline.label();
      results.push_back(std::move(r));
    } else {
      const ExpansionStage exp = run_expansion_stage(cfg, g, ops, init, NodeRanking::kPreference);
      results.push_back(finish_baseline(cfg, g, ops, init, exp, baseline));
    }
    save_seed_result(seed_dir(cfg, seed), results.back());
  }
  RunReport report = summarize(baseline.label(), std::move(results));
  write_report(cfg, report);
  return report;
}

std::vector<SweepRow> run_ratio_sweep(const PipelineConfig& cfg, std::span<const double> ratios) {
  cfg.validate();
  if (ratios.empty()) throw StageError("config", "sweep needs at least one ratio");
  for (double r : ratios) {
    if (!(r > 0.0 && r <= 1.0)) throw StageError("config", "sweep ratios must lie in (0, 1]");
  }
  const TagGraph g = load_or_generate_graph(cfg.graph);
  const GraphOperators ops = GraphOperators::build(g);
  std::vector<std::vector<SeedResult>> per_ratio(ratios.size());
  for (std::uint64_t seed : cfg.seeds) {
    // The gold-label stage does not depend on the ratio.
    const InitialStage init = run_initial_stage(cfg, g, ops, seed);
    for (std::size_t k = 0; k < ratios.size(); ++k) {
      PipelineConfig c = cfg;
      c.expansion_ratio = ratios[k];
      const ExpansionStage exp = run_expansion_stage(c, g, ops, init, NodeRanking::kPreference);
      per_ratio[k].push_back(finish_pkd(c, g, ops, init, exp));
    }
  }
  std::vector<SweepRow> rows;
  for (std::size_t k = 0; k < ratios.size(); ++k) {
    const RunReport r = summarize("pkd", per_ratio[k]);
    rows.push_back({ratios[k], r.mean_accuracy, r.std_accuracy});
  }
  write_text_file(std::filesystem::path(cfg.output_dir) / "sweep.csv", sweep_to_csv(rows));
  return rows;
}

std::string sweep_to_csv(std::span<const SweepRow> rows) {
  std::ostringstream out;
  out << "ratio,mean_accuracy,std_accuracy\n";
  for (const auto& r : rows) {
    out << format_double(r.ratio) << ',' << format_double(r.mean_accuracy) << ',' << format_double(r.std_accuracy)
        << '\n';
  }
  return out.str();
}

}  // namespace pkd
