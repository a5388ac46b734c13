#include "ckd/cli.hpp"

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "ckd/config.hpp"
#include "ckd/mapper.hpp"
#include "ckd/trainer.hpp"

namespace ckd {

namespace {

using nlohmann::json;

std::string mapping_to_text(const LayerMapping& m) {
  std::string s = "mapping " + m.variant + ":";
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    s += " M(" + std::to_string(i + 1) + ")={";
    for (std::size_t j = 0; j < m.entries[i].size(); ++j) {
      if (j) s += ",";
      s += std::to_string(m.entries[i][j]);
    }
    s += "}";
  }
  return s;
}

void maybe_dump_corpus(const ExperimentConfig& cfg) {
  if (cfg.paths.corpus_dump.empty()) return;
  TaskData data = generate_corpus(cfg.task);
  dump_corpus(data.train, cfg.paths.corpus_dump);
}

int cmd_train_teacher(const std::string& config_path, const std::string& out_dir) {
  ExperimentConfig cfg = load_experiment_config(config_path);
  maybe_dump_corpus(cfg);
  RunResult result = train_teacher(cfg.teacher, cfg.task, cfg.train, out_dir, cfg.paths.metrics_log);
  json summary{{"best_step", result.best.step},
               {"dev_acc", result.best.dev_acc},
               {"dev_bleu", result.best.dev_bleu},
               {"dev_loss", result.best.loss},
               {"params", count_params(result.best_model)}};
  std::cout << summary.dump() << '\n';
  return 0;
}

int cmd_distill(const std::string& config_path, const std::string& teacher_dir, const std::string& out_dir) {
  ExperimentConfig cfg = load_experiment_config(config_path);
  if (cfg.distill.wants_mapping()) {
    LoadedCheckpoint teacher = load_checkpoint(teacher_dir);
    LayerMapping m = cfg.distill.resolve_mapping(teacher.model.config.enc_layers, cfg.student.enc_layers);
    std::cout << mapping_to_text(m) << '\n';
  }
  RunResult result =
      distill_student(cfg.student, teacher_dir, cfg.distill, cfg.task, cfg.train, out_dir, cfg.paths.metrics_log);
  const LossReport& last = result.steps.empty() ? LossReport{} : result.steps.back().report;
  json components{{"hard", last.hard}, {"soft", last.soft}, {"layer", last.layer},
                  {"attn", last.attn}, {"total", last.total}};
  json summary{{"best_step", result.best.step},
               {"dev_acc", result.best.dev_acc},
               {"dev_bleu", result.best.dev_bleu},
               {"final_losses", components}};
  std::cout << summary.dump() << '\n';
  return 0;
}

int cmd_eval(const std::string& ckpt_dir, const std::string& config_path, const std::string& split) {
  if (split != "dev" && split != "test") {
    throw ConfigError("eval: --split must be dev or test, got '" + split + "'");
  }
  ExperimentConfig cfg = load_experiment_config(config_path);
  LoadedCheckpoint ckpt = load_checkpoint(ckpt_dir);
  TaskData data = generate_corpus(cfg.task);
  const Corpus& corpus = split == "dev" ? data.dev : data.test;
  EvalResult res = evaluate(ckpt.model, corpus, std::max(cfg.train.batch_size, 64));
  json out{{"token_accuracy", res.token_accuracy}, {"bleu", res.bleu}};
  std::cout << out.dump() << '\n';
  return 0;
}

int cmd_plan_mapping(const std::string& variant, int n_teacher, int n_student, int d) {
  LayerMapping m = generate_mapping(variant, n_teacher, n_student);
  std::vector<FusionShape> shapes = fusion_param_shapes(m, d);
  const std::int64_t added = fusion_param_count(m, d);

  std::cout << mapping_to_text(m) << '\n';
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    std::printf("student %zu: W [%d x %d], b [%d]\n", i + 1, shapes[i].weight[0], shapes[i].weight[1],
                shapes[i].bias[0]);
  }
  std::printf("added parameters: %lld\n", static_cast<long long>(added));

  json j{{"variant", m.variant},
         {"n_teacher", m.n_teacher},
         {"n_student", m.n_student},
         {"d_model", d},
         {"entries", m.entries},
         {"added_params", added}};
  json jshapes = json::array();
  for (const auto& s : shapes) jshapes.push_back(json{{"W", s.weight}, {"b", s.bias}});
  j["fusion_shapes"] = jshapes;
  std::cout << j.dump() << '\n';
  return 0;
}

int cmd_repro(const std::string& config_path, const std::string& out_dir) {
  ExperimentConfig cfg = load_experiment_config(config_path);
  maybe_dump_corpus(cfg);
  TaskData data = generate_corpus(cfg.task);

  const std::string teacher_dir = out_dir + "/teacher";
  std::cout << "training teacher..." << std::endl;
  RunResult teacher = train_teacher(cfg.teacher, cfg.task, cfg.train, teacher_dir, out_dir + "/teacher.jsonl");
  EvalResult teacher_test = evaluate(teacher.best_model, data.test, 128);
  const std::int64_t teacher_params = count_params(teacher.best_model);

  struct Row {
    std::string name;
    double dev_acc, test_acc, test_bleu;
    std::int64_t params;
  };
  std::vector<Row> rows;
  rows.push_back({"teacher", teacher.best.dev_acc, teacher_test.token_accuracy, teacher_test.bleu, teacher_params});

  struct Recipe {
    std::string name, method, variant;
    double eta, lambda;
  };
  const std::vector<Recipe> recipes = {
      {"no-kd", "none", "", 0.0, 0.0},       {"rkd", "rkd", "", 0.1, 0.0},
      {"pkd", "pkd", "PKD", 0.1, 0.7},       {"ckd-rc", "ckd", "RC", 0.1, 0.7},
      {"ckd-oc", "ckd", "OC", 0.1, 0.7},     {"ckd-sc", "ckd", "SC", 0.1, 0.7},
      {"ckd-cc", "ckd", "CC", 0.1, 0.7},
  };
  for (const Recipe& r : recipes) {
    std::cout << "distilling " << r.name << "..." << std::endl;
    DistillConfig dc;
    dc.method = r.method;
    dc.eta = r.eta;
    dc.lambda = r.lambda;
    dc.mapping_variant = r.variant;
    RunResult run = distill_student(cfg.student, teacher_dir, dc, cfg.task, cfg.train, out_dir + "/" + r.name,
                                    out_dir + "/" + r.name + ".jsonl");
    EvalResult test = evaluate(run.best_model, data.test, 128);
    rows.push_back({r.name, run.best.dev_acc, test.token_accuracy, test.bleu, count_params(run.best_model)});
  }

  std::printf("\n%-10s %9s %9s %10s %10s %7s\n", "model", "dev_acc", "test_acc", "test_bleu", "params", "ratio");
  for (const Row& r : rows) {
    std::printf("%-10s %9.4f %9.4f %10.2f %10lld %7.3f\n", r.name.c_str(), r.dev_acc, r.test_acc, r.test_bleu,
                static_cast<long long>(r.params), double(r.params) / double(teacher_params));
  }
  return 0;
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"knowledge-distillation workbench for toy sequence transduction"};
  app.require_subcommand(1);

  std::string config_path, out_dir, teacher_dir, ckpt_dir, split = "dev", variant;
  int n_teacher = 6, n_student = 2, d_model = 64;

  CLI::App* train = app.add_subcommand("train-teacher", "train a teacher from scratch (hard loss only)");
  train->add_option("--config", config_path, "experiment JSON")->required();
  train->add_option("--out", out_dir, "checkpoint directory")->required();

  CLI::App* distill = app.add_subcommand("distill", "train a student against a frozen teacher");
  distill->add_option("--config", config_path, "experiment JSON")->required();
  distill->add_option("--teacher", teacher_dir, "teacher checkpoint directory")->required();
  distill->add_option("--out", out_dir, "student checkpoint directory")->required();

  CLI::App* eval = app.add_subcommand("eval", "decode a checkpoint and report metrics");
  eval->add_option("--ckpt", ckpt_dir, "checkpoint directory")->required();
  eval->add_option("--config", config_path, "experiment JSON")->required();
  eval->add_option("--split", split, "dev or test");

  CLI::App* plan = app.add_subcommand("plan-mapping", "show a mapping variant and its fusion shapes");
  plan->add_option("--variant", variant, "RC, OC, SC, CC, or PKD")->required();
  plan->add_option("--teacher-layers", n_teacher, "teacher encoder depth");
  plan->add_option("--student-layers", n_student, "student encoder depth");
  plan->add_option("--d", d_model, "model width");

  CLI::App* repro = app.add_subcommand("repro", "teacher + all students + comparison table");
  repro->add_option("--config", config_path, "experiment JSON")->required();
  repro->add_option("--out", out_dir, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (train->parsed()) return cmd_train_teacher(config_path, out_dir);
    if (distill->parsed()) return cmd_distill(config_path, teacher_dir, out_dir);
    if (eval->parsed()) return cmd_eval(ckpt_dir, config_path, split);
    if (plan->parsed()) return cmd_plan_mapping(variant, n_teacher, n_student, d_model);
    if (repro->parsed()) return cmd_repro(config_path, out_dir);
  } catch (const TrainError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
  return 0;
}

}  // namespace ckd
