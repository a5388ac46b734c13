#pragma once

#include <string>

#include "ckd/distill.hpp"
#include "ckd/tasks.hpp"
#include "ckd/trainer.hpp"
#include "ckd/transformer.hpp"

namespace ckd {

struct Paths {
  std::string metrics_log;   // JSONL per-eval metrics; empty = don't write
  std::string corpus_dump;   // write the generated training corpus here
};

// One experiment file drives every command: teacher/student model sections,
// the synthetic task, the optimizer schedule, and the distillation recipe.
struct ExperimentConfig {
  ModelConfig teacher;  // preset: 6 encoder + 6 decoder layers
  ModelConfig student;  // preset: 2 encoder + 2 decoder layers
  TaskSpec task;
  TrainConfig train;
  DistillConfig distill;
  Paths paths;
};

// Parses and cross-validates a JSON experiment file. Errors carry the dotted
// field path ("train.warmup_steps", ...). When either model section omits
// vocab_size it is derived from the task (content tokens + pad/bos/eos).
// CKD_SEED in the environment overrides every seed in the file.
ExperimentConfig load_experiment_config(const std::string& path);

// Same, but from an already-parsed JSON string (used by tests).
ExperimentConfig parse_experiment_config(const std::string& json_text);

}  // namespace ckd
