// Full-model gradient check: analytic gradients of the combined distillation
// objective against central finite differences, on a micro model. Built with
// the double-precision core so truncation error is measurable. Exits 0 only
// if every sampled element agrees to the required relative tolerance.
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <vector>

#include "ckd/distill.hpp"
#include "ckd/tasks.hpp"
#include "ckd/transformer.hpp"

using namespace ckd;

static_assert(sizeof(real) == 8, "finite differences need the double-precision build");

namespace {

struct Probe {
  Tensor tensor;
  std::int64_t index;
};

// All (tensor, element) pairs reachable by the optimizer.
std::vector<Probe> all_elements(const TransformerModel& model, const FusionParams* fusion) {
  std::vector<Probe> out;
  for (const auto& name : model.param_names) {
    Tensor t = model.params.at(name);
    for (std::int64_t i = 0; i < t.size(); ++i) out.push_back({t, i});
  }
  if (fusion && fusion->trainable) {
    for (const auto& W : fusion->W)
      for (std::int64_t i = 0; i < W.size(); ++i) out.push_back({W, i});
    for (const auto& b : fusion->b)
      for (std::int64_t i = 0; i < b.size(); ++i) out.push_back({b, i});
  }
  return out;
}

// max relative error over `samples` elements drawn without replacement.
// Every probed tensor's grad is dropped afterwards so successive checks
// never see gradients accumulated by an earlier objective.
double check(const std::function<Tensor()>& loss_fn, const std::vector<Probe>& all, int samples, unsigned seed) {
  {
    Tape tape;
    TapeScope scope(tape);
    backward(loss_fn());
  }
  std::vector<Probe> probes = all;
  std::mt19937 rng(seed);
  std::shuffle(probes.begin(), probes.end(), rng);
  probes.resize(std::min<std::size_t>(probes.size(), samples));

  const double h = 1e-4;
  double worst = 0;
  for (auto& p : probes) {
    const real keep = p.tensor.data()[p.index];
    p.tensor.data()[p.index] = keep + h;
    const double up = loss_fn().item();
    p.tensor.data()[p.index] = keep - h;
    const double down = loss_fn().item();
    p.tensor.data()[p.index] = keep;
    const double numeric = (up - down) / (2 * h);
    const double analytic = p.tensor.has_grad() ? double(p.tensor.grad()[p.index]) : 0.0;
    const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-3});
    worst = std::max(worst, rel);
  }
  for (const auto& p : all) {
    Tensor t = p.tensor;  // cheap shared handle
    t.drop_grad();
  }
  return worst;
}

}  // namespace

int main() {
  TaskSpec task;
  task.kind = "reverse";
  task.vocab_size = 8;
  task.min_len = 2;
  task.max_len = 4;
  task.n_train = 16;
  task.n_dev = 8;
  task.n_test = 8;
  task.seed = 31;

  ModelConfig teacher_cfg;
  teacher_cfg.enc_layers = 2;
  teacher_cfg.dec_layers = 2;
  teacher_cfg.d_model = 8;
  teacher_cfg.n_heads = 2;
  teacher_cfg.d_ff = 16;
  teacher_cfg.vocab_size = task.model_vocab();
  teacher_cfg.max_len = 8;

  ModelConfig student_cfg = teacher_cfg;
  student_cfg.enc_layers = 1;
  student_cfg.dec_layers = 1;

  auto teacher = init_model(teacher_cfg, 5);
  auto student = init_model(student_cfg, 6);

  auto data = generate_corpus(task);
  auto batches = make_batches(data.train, 8, 0);
  const TokenBatch& batch = batches.front();

  std::mt19937 silent(0);  // eval mode never touches it
  auto teacher_trace = forward(teacher, batch, RunMode::eval, silent);

  int failures = 0;
  auto report = [&](const char* name, double got, double limit) {
    const bool ok = got < limit;
    std::printf("%s: max rel err %.3e (limit %.0e) [%s]\n", name, got, limit, ok ? "ok" : "FAIL");
    if (!ok) ++failures;
  };

  // grouped mapping with a trainable fusion: hard + soft + layer
  {
    auto mapping = generate_mapping("RC", teacher_cfg.enc_layers, student_cfg.enc_layers);
    auto fusion = init_fusion(mapping, teacher_cfg.d_model);
    LossWeights w(0.1, 0.7);
    auto loss_fn = [&]() {
      auto trace = forward(student, batch, RunMode::eval, silent);
      Tensor hard = hard_loss(trace.logits, batch.tgt_out, trace.tgt_valid, 0.1);
      Tensor soft = soft_loss(trace.logits, teacher_trace.logits, trace.tgt_valid);
      Tensor layer = layer_loss(trace.enc_hiddens, teacher_trace.enc_hiddens, mapping, fusion, trace.src_valid);
      return total_loss(&hard, &soft, &layer, nullptr, w).total;
    };
    report("fused-mapping objective", check(loss_fn, all_elements(student, &fusion), 110, 17), 1e-3);
  }

  // singleton mapping with identity fusion and the attention term on top
  {
    auto mapping = generate_mapping("PKD", teacher_cfg.enc_layers, student_cfg.enc_layers);
    auto fusion = identity_fusion(mapping, teacher_cfg.d_model);
    LossWeights w(0.1, 0.5);
    auto loss_fn = [&]() {
      auto trace = forward(student, batch, RunMode::eval, silent);
      Tensor hard = hard_loss(trace.logits, batch.tgt_out, trace.tgt_valid, 0.1);
      Tensor soft = soft_loss(trace.logits, teacher_trace.logits, trace.tgt_valid);
      Tensor layer = layer_loss(trace.enc_hiddens, teacher_trace.enc_hiddens, mapping, fusion, trace.src_valid);
      Tensor attn = attention_loss(trace.enc_self_attn, teacher_trace.enc_self_attn, mapping, trace.src_valid);
      return total_loss(&hard, &soft, &layer, &attn, w).total;
    };
    report("singleton+attention objective", check(loss_fn, all_elements(student, nullptr), 60, 23), 1e-3);
  }

  if (failures == 0) std::printf("gradient check passed\n");
  return failures == 0 ? 0 : 1;
}
