#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "pkd/annotator.hpp"
#include "pkd/distill.hpp"
#include "pkd/ngs.hpp"

namespace pkd {

struct GraphSource {
  std::optional<std::string> path;  // graph JSON; SBM generation otherwise
  SbmConfig sbm;
};

struct PipelineConfig {
  GraphSource graph;
  int labels_per_class = 5;
  double test_frac = 0.2;
  double expansion_ratio = 0.48;
  std::vector<ModelKind> teachers{ModelKind::kGcn, ModelKind::kGat, ModelKind::kAppnp, ModelKind::kH2gcn};
  ModelKind student = ModelKind::kGcn;
  int student_hidden_dim = 32;
  AnnotatorKind annotator = GroundTruthOracle{};
  KdWeights kd;
  RlConfig rl;
  TrainConfig train;
  int k_nn = 4;
  std::vector<std::uint64_t> seeds{0};
  std::string output_dir = "out";

  void validate() const;
};

/// JSON mirror of PipelineConfig. Missing fields keep their defaults;
/// unknown fields are rejected.
PipelineConfig config_from_json(const std::string& text);
std::string config_to_json(const PipelineConfig& cfg);
PipelineConfig load_config(const std::filesystem::path& path);

TagGraph load_or_generate_graph(const GraphSource& source);

enum class NodeRanking { kPreference, kRandom, kEntropy };

/// Split and the teachers trained on the gold labels for one seed.
struct InitialStage {
  std::uint64_t seed = 0;
  Split split;  // validation holds the selection pool
  std::vector<LabeledNode> gold;
  TeacherEnsemble teachers;
};

/// Node selection, annotation and teacher retraining.
struct ExpansionStage {
  PreferenceRank rank;
  Selection selection;
  int budget = 0;
  std::vector<AnnotationRecord> annotations;
  ExpandedDataset expanded;
  std::vector<int> val_nodes;  // pool minus the selected nodes
  TeacherEnsemble teachers;    // retrained
};

InitialStage run_initial_stage(const PipelineConfig& cfg, const TagGraph& g, const GraphOperators& ops,
                               std::uint64_t seed);
ExpansionStage run_expansion_stage(const PipelineConfig& cfg, const TagGraph& g, const GraphOperators& ops,
                                   const InitialStage& init, NodeRanking ranking);

// The three parts of the expansion stage, in order.
void rank_stage(const PipelineConfig& cfg, const TagGraph& g, const InitialStage& init, NodeRanking ranking,
                ExpansionStage& s);
void annotate_stage(const PipelineConfig& cfg, const TagGraph& g, const InitialStage& init, ExpansionStage& s);
void retrain_stage(const PipelineConfig& cfg, const TagGraph& g, const GraphOperators& ops, const InitialStage& init,
                   ExpansionStage& s);

/// Node ranking by the requested criterion over `pool`.
PreferenceRank rank_pool(const TeacherEnsemble& teachers, std::span<const int> pool, NodeRanking ranking,
                         std::uint64_t seed);

enum class BaselineKind {
  kRandomNodeSelection,
  kEntropyNodeSelection,
  kRandomTeacher,
  kVotingTeacher,
  kFixedTeacher,
  kEndToEndGate,
};
std::string_view to_string(BaselineKind kind);
BaselineKind parse_baseline_kind(std::string_view tag);

struct Baseline {
  BaselineKind kind = BaselineKind::kRandomTeacher;
  int teacher = 0;  // for kFixedTeacher
  std::string label() const;
};

struct SeedResult {
  std::uint64_t seed = 0;
  std::string method;
  double test_accuracy = 0;
  double val_accuracy = 0;
  double student_entropy = 0;   // mean prediction entropy over all nodes
  int budget = 0;
  int annotated = 0;            // successful annotations
  double annotation_accuracy = 0;
  std::vector<double> teacher_test_accuracy;  // retrained teachers
  std::vector<int> assignment_histogram;      // final mask over all nodes
  std::vector<double> delta_k;                // pool scores in rank order
  std::optional<double> threshold;
  int student_updates = 0;
};

/// Test/validation accuracy and bookkeeping for a trained student.
SeedResult evaluate_student(const TagGraph& g, const GraphOperators& ops, const InitialStage& init,
                            const ExpansionStage& exp, const Model& student, std::string method);

/// NGS teacher selection and student distillation on a prepared expansion.
SeedResult finish_pkd(const PipelineConfig& cfg, const TagGraph& g, const GraphOperators& ops,
                      const InitialStage& init, const ExpansionStage& exp, NgsResult* ngs_out = nullptr);
/// One-hot modal argmax across teachers per node; ties go to the lowest class.
Matrix voting_targets(const TeacherEnsemble& t);

/// Student-side baselines on a prepared expansion (teacher-choice baselines).
SeedResult finish_baseline(const PipelineConfig& cfg, const TagGraph& g, const GraphOperators& ops,
                           const InitialStage& init, const ExpansionStage& exp, const Baseline& baseline);

struct RunReport {
  std::string method;
  std::vector<SeedResult> seeds;
  double mean_accuracy = 0;
  double std_accuracy = 0;
};

RunReport summarize(std::string method, std::vector<SeedResult> seeds);
std::string report_to_json(const RunReport& r);
std::string summary_csv(const RunReport& r);

/// Full pipeline for every configured seed. Writes per-seed artifacts under
/// output_dir/seed_<s>/ plus report.json, summary.csv and timings.json.
RunReport run_pipeline(const PipelineConfig& cfg);
RunReport run_baseline(const PipelineConfig& cfg, const Baseline& baseline);

struct SweepRow {
  double ratio = 0;
  double mean_accuracy = 0;
  double std_accuracy = 0;
};
std::vector<SweepRow> run_ratio_sweep(const PipelineConfig& cfg, std::span<const double> ratios);
std::string sweep_to_csv(std::span<const SweepRow> rows);

// Stage artifacts, so that each stage can be rerun from files alone.
std::filesystem::path seed_dir(const PipelineConfig& cfg, std::uint64_t seed);
void save_initial_stage(const std::filesystem::path& dir, const InitialStage& s);
InitialStage load_initial_stage(const std::filesystem::path& dir, const TagGraph& g, const GraphOperators& ops,
                                std::uint64_t seed);
void save_expansion_stage(const std::filesystem::path& dir, const ExpansionStage& s);
/// Rebuilds the expansion stage from rank.csv, annotations.jsonl,
/// expanded.csv and teachers/.
ExpansionStage load_expansion_stage(const std::filesystem::path& dir, const PipelineConfig& cfg, const TagGraph& g,
                                    const GraphOperators& ops, const InitialStage& init);
void save_seed_result(const std::filesystem::path& dir, const SeedResult& r);
void save_ngs(const std::filesystem::path& dir, const NgsResult& r);

PreferenceRank rank_from_csv(const std::string& text, Selection* selection);
std::vector<AnnotationRecord> annotations_from_jsonl(const std::string& text);
TeacherMask assignments_from_csv(const std::string& text, int teacher_count);
TeacherEnsemble load_teachers(const std::filesystem::path& dir, std::span<const ModelKind> kinds,
                              const TagGraph& g, const GraphOperators& ops);
void save_teachers(const std::filesystem::path& dir, const TeacherEnsemble& t);

}  // namespace pkd
