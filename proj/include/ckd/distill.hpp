#pragma once

#include <optional>
#include <vector>

#include "ckd/mapper.hpp"
#include "ckd/tensor.hpp"

namespace ckd {

// One fusion projection per student encoder layer: W_i [d, k_i*d], b_i [d].
struct FusionParams {
  std::vector<Tensor> W;
  std::vector<Tensor> b;
  bool trainable = true;
};

// Scaled-identity initialization W_i = (1/k_i)[I | I | ... | I], b_i = 0, so
// the initial fused output is the mean of the selected teacher layers.
FusionParams init_fusion(const LayerMapping& mapping, int d_model);

// Frozen identity fusion for singleton mappings (the per-layer MSE preset).
FusionParams identity_fusion(const LayerMapping& mapping, int d_model);

struct LossWeights {
  double beta = 1.0;
  double eta = 0.0;
  double lambda = 0.0;

  LossWeights() = default;
  LossWeights(double eta_, double lambda_);  // beta = 1 - eta - lambda, all in [0,1]
};

struct LossReport {
  double hard = 0.0;
  double soft = 0.0;
  double layer = 0.0;
  double attn = 0.0;
  bool soft_enabled = false;
  bool layer_enabled = false;
  bool attn_enabled = false;
  double total = 0.0;
};

// Mean over non-pad target tokens of the label-smoothed negative
// log-likelihood; smoothing 0 is plain NLL.
Tensor hard_loss(Tensor logits, const std::vector<int>& targets, Tensor tgt_valid, double smoothing);

// Mean over non-pad target tokens of the teacher-student cross-entropy
// -sum_v q(v) log p(v). Teacher logits are detached internally.
Tensor soft_loss(Tensor student_logits, Tensor teacher_logits, Tensor tgt_valid);

// Per position: W * concat(teacher layers) + b. Gradients flow to W and b
// only; the incoming layers are detached.
Tensor fuse(const std::vector<Tensor>& teacher_layers, Tensor W, Tensor b);

// Sum over student encoder layers of the MSE between the student hidden and
// the fused teacher hiddens its mapping entry selects. MSE averages over
// non-pad positions and channels.
Tensor layer_loss(const std::vector<Tensor>& student_hiddens, const std::vector<Tensor>& teacher_hiddens,
                  const LayerMapping& mapping, const FusionParams& fusion, Tensor src_valid);

// Sum over student encoder layers of the MSE between self-attention maps,
// averaged over heads and valid (query, key) pairs. Requires a singleton
// mapping: attention maps cannot be concatenated and projected.
Tensor attention_loss(const std::vector<Tensor>& student_attn, const std::vector<Tensor>& teacher_attn,
                      const LayerMapping& mapping, Tensor src_valid);

// How a student is trained: which losses are on, their weights, and which
// teacher layers feed which student layers.
struct DistillConfig {
  std::string method = "none";  // none | rkd | pkd | ckd
  double eta = 0.0;
  double lambda = 0.0;
  std::string mapping_variant;                     // RC|OC|SC|CC|PKD; defaults per method
  std::vector<std::vector<int>> mapping_explicit;  // verbatim override when nonempty
  bool attention_loss = false;
  bool decoder_mapping = false;  // also match decoder hiddens (off by default)

  void validate() const;
  LossWeights weights() const { return LossWeights(eta, lambda); }
  bool wants_mapping() const { return method == "pkd" || method == "ckd"; }
  // Mapping against the given encoder (or decoder) depths.
  LayerMapping resolve_mapping(int n_teacher, int n_student) const;
};

struct TotalLoss {
  Tensor total;
  LossReport report;
};

// total = beta*hard + eta*soft + lambda*(layer + attn). Null components are
// genuinely absent from the graph, not multiplied by zero, so degenerate
// weights reproduce the simpler objectives bit for bit. The report's values
// are accumulated in double regardless of the tensor scalar type.
TotalLoss total_loss(const Tensor* hard, const Tensor* soft, const Tensor* layer, const Tensor* attn,
                     const LossWeights& weights);

}  // namespace ckd
