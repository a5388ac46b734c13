#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ckd/distill.hpp"
#include "ckd/tasks.hpp"
#include "ckd/transformer.hpp"

namespace ckd {

struct TrainConfig {
  int epochs = 5;
  int batch_size = 64;
  int warmup_steps = 400;
  double lr_factor = 1.0;  // multiplies the inverse-sqrt schedule
  double grad_clip = 1.0;  // global-norm clip; <= 0 disables
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_eps = 1e-9;
  int model_seed = 1;
  int data_seed = 2;   // dropout stream
  int epoch_seed = 3;  // per-epoch shuffle base
  int eval_every = 0;  // extra dev evals every N steps; 0 = epoch ends only

  void validate() const;
};

// lr = lr_factor * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5), step >= 1.
double lr_at(const TrainConfig& tc, int d_model, int step);

// Adam over shared-storage tensors; call after gradients are accumulated.
class Adam {
 public:
  Adam(std::vector<Tensor> params, double beta1, double beta2, double eps);
  void step(double lr);
  void zero_grad();

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  double beta1_, beta2_, eps_;
  long t_ = 0;
};

// Scales all gradients so their global L2 norm is at most max_norm.
// Returns the pre-clip norm.
double clip_global_norm(const std::vector<Tensor>& params, double max_norm);

// FNV-1a over all parameter bytes in name order.
std::uint64_t param_hash(const TransformerModel& model);

// ---- checkpointing -----------------------------------------------------------
// Directory layout: manifest.json (format_version, config echo, step, metrics,
// ordered param table of {name, shape, byte_offset, byte_len}) + params.bin
// (little-endian float32, concatenated in table order).

struct MetricsSnapshot {
  int step = 0;
  double dev_acc = 0.0;
  double dev_bleu = 0.0;
  double loss = 0.0;
};

void save_checkpoint(const std::string& dir, const TransformerModel& model, const FusionParams* fusion,
                     const MetricsSnapshot& metrics);

struct LoadedCheckpoint {
  TransformerModel model;
  FusionParams fusion;  // empty when the checkpoint has none
  MetricsSnapshot metrics;
};

LoadedCheckpoint load_checkpoint(const std::string& dir);

// ---- evaluation ----------------------------------------------------------------

struct EvalResult {
  double token_accuracy = 0.0;
  double bleu = 0.0;
  double loss = 0.0;  // unsmoothed NLL under teacher forcing
};

EvalResult evaluate(const TransformerModel& model, const Corpus& corpus, int batch_size);

// ---- training loops ------------------------------------------------------------

struct StepRecord {
  int step = 0;
  LossReport report;
};

struct RunResult {
  TransformerModel best_model;
  MetricsSnapshot best;
  std::vector<StepRecord> steps;  // every optimizer step, in order
};

// Hard-loss-only training; writes the best-dev checkpoint to out_dir and a
// JSONL metrics log to metrics_path (either may be empty to skip).
RunResult train_teacher(const ModelConfig& model_cfg, const TaskSpec& task, const TrainConfig& tc,
                        const std::string& out_dir, const std::string& metrics_path);

// Student training against a frozen teacher checkpoint. The optimizer covers
// student params plus trainable fusion params; the teacher runs eval-mode,
// gradient-free. Weight/width/mapping problems raise before any step.
RunResult distill_student(const ModelConfig& student_cfg, const std::string& teacher_ckpt_dir, const DistillConfig& dc,
                          const TaskSpec& task, const TrainConfig& tc, const std::string& out_dir,
                          const std::string& metrics_path);

}  // namespace ckd
