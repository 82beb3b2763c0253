// pkd: command-line driver for the distillation pipeline and its stages.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pkd/gta.hpp"
#include "pkd/io.hpp"
#include "pkd/pipeline.hpp"

namespace fs = std::filesystem;
using namespace pkd;

namespace {

struct Common {
  std::string config;
  std::vector<std::uint64_t> seeds;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON config file (defaults apply when omitted)");
  cmd->add_option("--seed", c.seeds, "Run seed(s); overrides the config's seed list");
  cmd->add_option("--out", c.out, "Output directory; overrides the config");
}

PipelineConfig resolve(const Common& c) {
  PipelineConfig cfg = c.config.empty() ? PipelineConfig{} : load_config(c.config);
  if (!c.seeds.empty()) cfg.seeds = c.seeds;
  if (!c.out.empty()) cfg.output_dir = c.out;
  try {
    cfg.validate();
  } catch (const std::exception& e) {
    throw StageError("config", e.what());
  }
  return cfg;
}

// Graph and operators shared by the stage commands.
struct Context {
  PipelineConfig cfg;
  TagGraph graph;
  GraphOperators ops;
  explicit Context(const Common& c)
      : cfg(resolve(c)), graph(load_or_generate_graph(cfg.graph)), ops(GraphOperators::build(graph)) {}
};

void print_report(const RunReport& r) {
  for (const auto& s : r.seeds) std::printf("seed %llu  test accuracy %.4f\n", (unsigned long long)s.seed, s.test_accuracy);
  std::printf("%s: %.4f +- %.4f over %zu seed(s)\n", r.method.c_str(), r.mean_accuracy, r.std_accuracy,
              r.seeds.size());
}

NodeRanking parse_ranking(const std::string& s) {
  if (s == "preference") return NodeRanking::kPreference;
  if (s == "random") return NodeRanking::kRandom;
  if (s == "entropy") return NodeRanking::kEntropy;
  throw StageError("config", "unknown ranking '" + s + "'");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pkd: node annotation, teacher assignment and student distillation"};
  app.require_subcommand(1);

  Common common;
  std::string ranking = "preference";
  std::string baseline_kind;
  int fixed_teacher = 0;
  std::vector<double> ratios{0.1, 0.2, 0.3, 0.4, 0.48};
  int gta_t = 2;
  int walk_len = 12;
  int num_walks = 100;

  auto* generate = app.add_subcommand("generate", "Write the configured graph to <out>/graph.json");
  auto* train = app.add_subcommand("train-teachers", "Split the nodes and train teachers on the gold labels");
  auto* rank = app.add_subcommand("rank", "Rank the selection pool and choose the nodes to annotate");
  rank->add_option("--ranking", ranking, "preference | random | entropy")->capture_default_str();
  auto* annotate = app.add_subcommand("annotate", "Annotate the selected nodes and build the expanded set");
  auto* retrain = app.add_subcommand("retrain", "Retrain the teachers on the expanded set");
  auto* assign = app.add_subcommand("assign", "Learn per-node teacher assignments and distill the student");
  auto* distill = app.add_subcommand("distill", "Distill a student under the saved teacher assignments");
  auto* evaluate = app.add_subcommand("evaluate", "Evaluate the saved student on the test split");
  auto* pipeline = app.add_subcommand("pipeline", "Run every stage for every seed");
  auto* baseline = app.add_subcommand("baseline", "Run a comparison method");
  baseline->add_option("--kind", baseline_kind,
                       "random_node_selection | entropy_node_selection | random_teacher | voting_teacher | "
                       "fixed_teacher | end_to_end_gate")
      ->required();
  baseline->add_option("--teacher", fixed_teacher, "Teacher index for fixed_teacher")->capture_default_str();
  auto* sweep = app.add_subcommand("sweep", "Mean accuracy across expansion ratios");
  sweep->add_option("--ratios", ratios, "Expansion ratios")->capture_default_str();
  auto* gta = app.add_subcommand("gta", "Emit graph-topology instruction records as JSONL");
  gta->add_option("--t", gta_t, "Minimum hop distance for text generation")->capture_default_str();
  gta->add_option("--walk-len", walk_len, "Random-walk length for the cycle task (> 10)")->capture_default_str();
  gta->add_option("--num-walks", num_walks, "Random walks for the cycle task")->capture_default_str();

  for (auto* cmd : app.get_subcommands({})) add_common(cmd, common);

  CLI11_PARSE(app, argc, argv);

  try {
    if (generate->parsed()) {
      const PipelineConfig cfg = resolve(common);
      const TagGraph g = load_or_generate_graph(cfg.graph);
      save_graph(g, fs::path(cfg.output_dir) / "graph.json");
      std::printf("nodes %d  edges %zu  classes %d  homophily %.4f\n", g.node_count(), g.edge_count(),
                  g.class_count(), g.edge_count() ? homophily_ratio(g) : 0.0);
    } else if (train->parsed()) {
      Context ctx(common);
      for (auto seed : ctx.cfg.seeds) {
        const InitialStage init = run_initial_stage(ctx.cfg, ctx.graph, ctx.ops, seed);
        save_initial_stage(seed_dir(ctx.cfg, seed), init);
        std::printf("seed %llu  gold %zu  pool %zu  test %zu\n", (unsigned long long)seed, init.gold.size(),
                    init.split.validation.size(), init.split.test.size());
      }
    } else if (rank->parsed()) {
      Context ctx(common);
      const NodeRanking r = parse_ranking(ranking);
      for (auto seed : ctx.cfg.seeds) {
        const auto dir = seed_dir(ctx.cfg, seed);
        const InitialStage init = load_initial_stage(dir, ctx.graph, ctx.ops, seed);
        ExpansionStage exp;
        rank_stage(ctx.cfg, ctx.graph, init, r, exp);
        write_text_file(dir / "rank.csv", rank_to_csv(exp.rank, exp.selection));
        std::printf("seed %llu  selected %zu of %zu\n", (unsigned long long)seed, exp.selection.nodes.size(),
                    exp.rank.entries.size());
      }
    } else if (annotate->parsed()) {
      Context ctx(common);
      for (auto seed : ctx.cfg.seeds) {
        const auto dir = seed_dir(ctx.cfg, seed);
        const InitialStage init = load_initial_stage(dir, ctx.graph, ctx.ops, seed);
        ExpansionStage exp;
        exp.rank = rank_from_csv(read_text_file(dir / "rank.csv"), &exp.selection);
        annotate_stage(ctx.cfg, ctx.graph, init, exp);
        std::string lines;
        int ok = 0;
        for (const auto& a : exp.annotations) {
          lines += annotation_to_json(a) + "\n";
          ok += a.status == AnnotationStatus::kOk;
        }
        write_text_file(dir / "annotations.jsonl", lines);
        write_text_file(dir / "expanded.csv", exp.expanded.to_csv());
        std::printf("seed %llu  annotated %d of %zu\n", (unsigned long long)seed, ok, exp.annotations.size());
      }
    } else if (retrain->parsed()) {
      Context ctx(common);
      for (auto seed : ctx.cfg.seeds) {
        const auto dir = seed_dir(ctx.cfg, seed);
        const InitialStage init = load_initial_stage(dir, ctx.graph, ctx.ops, seed);
        ExpansionStage exp;
        exp.rank = rank_from_csv(read_text_file(dir / "rank.csv"), &exp.selection);
        exp.expanded = ExpandedDataset::from_csv(read_text_file(dir / "expanded.csv"), ctx.graph.class_count());
        std::vector<int> selected = exp.selection.nodes;
        std::sort(selected.begin(), selected.end());
        for (int v : init.split.validation) {
          if (!std::binary_search(selected.begin(), selected.end(), v)) exp.val_nodes.push_back(v);
        }
        retrain_stage(ctx.cfg, ctx.graph, ctx.ops, init, exp);
        save_teachers(dir / "teachers", exp.teachers);
        std::printf("seed %llu  retrained %d teacher(s) on %d labels\n", (unsigned long long)seed,
                    exp.teachers.size(), exp.expanded.size());
      }
    } else if (assign->parsed()) {
      Context ctx(common);
      for (auto seed : ctx.cfg.seeds) {
        const auto dir = seed_dir(ctx.cfg, seed);
        const InitialStage init = load_initial_stage(dir, ctx.graph, ctx.ops, seed);
        const ExpansionStage exp = load_expansion_stage(dir, ctx.cfg, ctx.graph, ctx.ops, init);
        NgsResult ngs;
        const SeedResult r = finish_pkd(ctx.cfg, ctx.graph, ctx.ops, init, exp, &ngs);
        save_ngs(dir, ngs);
        save_seed_result(dir, r);
        std::printf("seed %llu  test accuracy %.4f\n", (unsigned long long)seed, r.test_accuracy);
      }
    } else if (distill->parsed()) {
      Context ctx(common);
      for (auto seed : ctx.cfg.seeds) {
        const auto dir = seed_dir(ctx.cfg, seed);
        const InitialStage init = load_initial_stage(dir, ctx.graph, ctx.ops, seed);
        const ExpansionStage exp = load_expansion_stage(dir, ctx.cfg, ctx.graph, ctx.ops, init);
        const TeacherMask mask = assignments_from_csv(read_text_file(dir / "assignments.csv"), exp.teachers.size());
        TrainConfig tc = ctx.cfg.train;
        tc.seed = seed;
        tc.hidden_dim = ctx.cfg.student_hidden_dim;
        const TrainResult tr =
            train_student(ctx.cfg.student, ctx.graph, ctx.ops, assemble_teacher_targets(exp.teachers.probs, mask),
                          exp.expanded.gold(), ctx.cfg.kd, exp.val_nodes, tc);
        save_model(tr.model, dir / "student.json");
        std::printf("seed %llu  student trained for %zu steps\n", (unsigned long long)seed, tr.history.size());
      }
    } else if (evaluate->parsed()) {
      Context ctx(common);
      std::vector<SeedResult> results;
      for (auto seed : ctx.cfg.seeds) {
        const auto dir = seed_dir(ctx.cfg, seed);
        const InitialStage init = load_initial_stage(dir, ctx.graph, ctx.ops, seed);
        const ExpansionStage exp = load_expansion_stage(dir, ctx.cfg, ctx.graph, ctx.ops, init);
        const Model student = load_model(dir / "student.json");
        results.push_back(evaluate_student(ctx.graph, ctx.ops, init, exp, student, "pkd"));
        if (fs::exists(dir / "assignments.csv")) {
          results.back().assignment_histogram =
              assignments_from_csv(read_text_file(dir / "assignments.csv"), exp.teachers.size()).histogram();
        }
        save_seed_result(dir, results.back());
      }
      const RunReport r = summarize("pkd", std::move(results));
      write_text_file(fs::path(ctx.cfg.output_dir) / "report.json", report_to_json(r));
      write_text_file(fs::path(ctx.cfg.output_dir) / "summary.csv", summary_csv(r));
      print_report(r);
    } else if (pipeline->parsed()) {
      print_report(run_pipeline(resolve(common)));
    } else if (baseline->parsed()) {
      Baseline b;
      try {
        b.kind = parse_baseline_kind(baseline_kind);
      } catch (const std::exception& e) {
        throw StageError("config", e.what());
      }
      b.teacher = fixed_teacher;
      print_report(run_baseline(resolve(common), b));
    } else if (sweep->parsed()) {
      const PipelineConfig cfg = resolve(common);
      for (const auto& row : run_ratio_sweep(cfg, ratios)) {
        std::printf("ratio %.2f  %.4f +- %.4f\n", row.ratio, row.mean_accuracy, row.std_accuracy);
      }
    } else if (gta->parsed()) {
      const PipelineConfig cfg = resolve(common);
      const TagGraph g = load_or_generate_graph(cfg.graph);
      const fs::path out = fs::path(cfg.output_dir) / "gta.jsonl";
      const GtaCounts n = [&] {
        try {
          return emit_gta(g, out, cfg.seeds.front(), gta_t, walk_len, num_walks);
        } catch (const std::exception& e) {
          throw StageError("gta", e.what());
        }
      }();
      std::printf("connectivity %d\ndegree %d\ncycle %d\ntextgen %d\n", n.connectivity, n.degree, n.cycle,
                  n.textgen);
    }
  } catch (const StageError& e) {
    std::cerr << "pkd: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "pkd: [internal] " << e.what() << '\n';
    return 1;
  }
  return 0;
}
