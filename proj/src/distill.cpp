#include "ckd/distill.hpp"

#include <cmath>
#include <string>

namespace ckd {

namespace {

double mask_sum(const Tensor& mask) {
  double s = 0.0;
  const real* p = mask.data();
  const std::int64_t n = mask.size();
  for (std::int64_t i = 0; i < n; ++i) s += p[i];
  return s;
}

// [B, S] {0,1} -> [B, S, d] with the flag repeated across channels.
Tensor expand_mask_channels(const Tensor& mask, int d) {
  const int B = mask.dim(0), S = mask.dim(1);
  Tensor out = Tensor::zeros({B, S, d});
  const real* pm = mask.data();
  real* po = out.data();
  for (std::int64_t r = 0; r < static_cast<std::int64_t>(B) * S; ++r) {
    const real v = pm[r];
    for (int j = 0; j < d; ++j) po[r * d + j] = v;
  }
  return out;
}

// [B, S] {0,1} -> [B, H, S, S] with pair (q, k) valid iff both positions are.
Tensor pair_mask(const Tensor& mask, int n_heads) {
  const int B = mask.dim(0), S = mask.dim(1);
  Tensor out = Tensor::zeros({B, n_heads, S, S});
  const real* pm = mask.data();
  real* po = out.data();
  for (int b = 0; b < B; ++b) {
    for (int h = 0; h < n_heads; ++h) {
      for (int q = 0; q < S; ++q) {
        const real vq = pm[b * S + q];
        real* row = po + ((static_cast<std::int64_t>(b) * n_heads + h) * S + q) * S;
        for (int k = 0; k < S; ++k) row[k] = vq * pm[b * S + k];
      }
    }
  }
  return out;
}

void require_validated(const LayerMapping& mapping, int n_teacher, int n_student, const char* who) {
  MappingReport rep = validate_mapping(mapping, n_teacher, n_student);
  if (!rep.ok) {
    std::string msg = std::string(who) + ": invalid mapping:";
    for (const auto& v : rep.violations) msg += " " + v + ";";
    throw ContractError(msg);
  }
}

}  // namespace

FusionParams init_fusion(const LayerMapping& mapping, int d_model) {
  FusionParams fp;
  for (const auto& entry : mapping.entries) {
    const int k = static_cast<int>(entry.size());
    Tensor W = Tensor::zeros({d_model, k * d_model});
    real* pw = W.data();
    const real v = real(1) / real(k);
    for (int r = 0; r < d_model; ++r) {
      for (int j = 0; j < k; ++j) pw[static_cast<std::int64_t>(r) * k * d_model + j * d_model + r] = v;
    }
    fp.W.push_back(W.set_requires_grad(true));
    fp.b.push_back(Tensor::zeros({d_model}).set_requires_grad(true));
  }
  fp.trainable = true;
  return fp;
}

FusionParams identity_fusion(const LayerMapping& mapping, int d_model) {
  for (const auto& entry : mapping.entries) {
    if (entry.size() != 1) {
      throw ConfigError("identity_fusion: mapping entry with " + std::to_string(entry.size()) +
                        " teacher layers; identity fusion needs singletons");
    }
  }
  FusionParams fp = init_fusion(mapping, d_model);  // k=1 scaled identity is I
  for (auto& W : fp.W) W.set_requires_grad(false);
  for (auto& b : fp.b) b.set_requires_grad(false);
  fp.trainable = false;
  return fp;
}

LossWeights::LossWeights(double eta_, double lambda_) {
  if (eta_ < 0.0 || lambda_ < 0.0 || eta_ + lambda_ > 1.0) {
    throw ConfigError("loss weights: need eta, lambda >= 0 and eta + lambda <= 1, got eta=" + std::to_string(eta_) +
                      " lambda=" + std::to_string(lambda_));
  }
  eta = eta_;
  lambda = lambda_;
  beta = 1.0 - eta_ - lambda_;
}

Tensor hard_loss(Tensor logits, const std::vector<int>& targets, Tensor tgt_valid, double smoothing) {
  if (logits.rank() != 3) {
    throw DimError("hard_loss: logits must be [batch, len, vocab], got " + shape_str(logits.shape()));
  }
  const int V = logits.dim(2);
  const double n_valid = mask_sum(tgt_valid);
  if (n_valid == 0.0) {
    throw DataError("hard_loss: batch has no non-pad target tokens");
  }
  Tensor lp = log_softmax_lastdim(logits);                    // [B, T, V]
  Tensor picked = gather_lastdim(lp, targets);                // [B, T]
  Tensor per_tok = scale(picked, -(1.0 - smoothing));
  if (smoothing > 0.0) {
    per_tok = add(per_tok, scale(sum_lastdim(lp), -smoothing / V));
  }
  Tensor masked = mul(per_tok, tgt_valid);
  return scale(sum_all(masked), 1.0 / n_valid);
}

Tensor soft_loss(Tensor student_logits, Tensor teacher_logits, Tensor tgt_valid) {
  if (student_logits.shape() != teacher_logits.shape()) {
    throw DimError("soft_loss: shape mismatch " + shape_str(student_logits.shape()) + " vs " +
                   shape_str(teacher_logits.shape()));
  }
  const double n_valid = mask_sum(tgt_valid);
  if (n_valid == 0.0) {
    throw DataError("soft_loss: batch has no non-pad target tokens");
  }
  Tensor q = softmax_lastdim(detach(teacher_logits));
  Tensor lp = log_softmax_lastdim(student_logits);
  Tensor per_tok = scale(sum_lastdim(mul(lp, q)), -1.0);  // [B, T]
  Tensor masked = mul(per_tok, tgt_valid);
  return scale(sum_all(masked), 1.0 / n_valid);
}

Tensor fuse(const std::vector<Tensor>& teacher_layers, Tensor W, Tensor b) {
  if (teacher_layers.empty()) {
    throw ContractError("fuse: no teacher layers");
  }
  const int k = static_cast<int>(teacher_layers.size());
  const int d = teacher_layers[0].shape().back();
  if (W.rank() != 2 || W.dim(0) != d || W.dim(1) != k * d) {
    throw DimError("fuse: weight " + shape_str(W.shape()) + " does not match " + std::to_string(k) +
                   " layers of width " + std::to_string(d) + " (want [" + std::to_string(d) + ", " +
                   std::to_string(k * d) + "])");
  }
  std::vector<Tensor> detached;
  detached.reserve(teacher_layers.size());
  for (const Tensor& l : teacher_layers) detached.push_back(detach(l));
  Tensor cat = concat_lastdim(detached);                 // [B, S, k*d]
  return add(matmul(cat, transpose_last2(W)), b);        // [B, S, d]
}

Tensor layer_loss(const std::vector<Tensor>& student_hiddens, const std::vector<Tensor>& teacher_hiddens,
                  const LayerMapping& mapping, const FusionParams& fusion, Tensor src_valid) {
  require_validated(mapping, static_cast<int>(teacher_hiddens.size()), static_cast<int>(student_hiddens.size()),
                    "layer_loss");
  if (fusion.W.size() != mapping.entries.size() || fusion.b.size() != mapping.entries.size()) {
    throw ContractError("layer_loss: fusion has " + std::to_string(fusion.W.size()) + " projections for " +
                        std::to_string(mapping.entries.size()) + " mapping entries");
  }
  const int d = student_hiddens[0].shape().back();
  const double denom = mask_sum(src_valid) * d;
  if (denom == 0.0) {
    throw DataError("layer_loss: batch has no non-pad source positions");
  }
  Tensor mask3 = expand_mask_channels(src_valid, d);

  Tensor total;
  for (std::size_t i = 0; i < mapping.entries.size(); ++i) {
    std::vector<Tensor> selected;
    for (int t : mapping.entries[i]) selected.push_back(teacher_hiddens[static_cast<std::size_t>(t - 1)]);
    Tensor fused = fuse(selected, fusion.W[i], fusion.b[i]);
    Tensor diff = sub(student_hiddens[i], fused);
    Tensor sq = mul(diff, diff);
    Tensor mse = scale(sum_all(mul(sq, mask3)), 1.0 / denom);
    total = total.defined() ? add(total, mse) : mse;
  }
  return total;
}

Tensor attention_loss(const std::vector<Tensor>& student_attn, const std::vector<Tensor>& teacher_attn,
                      const LayerMapping& mapping, Tensor src_valid) {
  for (const auto& entry : mapping.entries) {
    if (entry.size() != 1) {
      throw ConfigError("attention_loss: mapping entry selects " + std::to_string(entry.size()) +
                        " teacher layers; attention matching needs singleton entries");
    }
  }
  require_validated(mapping, static_cast<int>(teacher_attn.size()), static_cast<int>(student_attn.size()),
                    "attention_loss");
  const int H = student_attn[0].dim(1);
  Tensor mask4 = pair_mask(src_valid, H);
  const double denom = mask_sum(mask4);
  if (denom == 0.0) {
    throw DataError("attention_loss: batch has no valid (query, key) pairs");
  }

  Tensor total;
  for (std::size_t i = 0; i < mapping.entries.size(); ++i) {
    const Tensor& t_map = teacher_attn[static_cast<std::size_t>(mapping.entries[i][0] - 1)];
    if (student_attn[i].shape() != t_map.shape()) {
      throw DimError("attention_loss: map shape mismatch " + shape_str(student_attn[i].shape()) + " vs " +
                     shape_str(t_map.shape()));
    }
    Tensor diff = sub(student_attn[i], detach(t_map));
    Tensor sq = mul(diff, diff);
    Tensor mse = scale(sum_all(mul(sq, mask4)), 1.0 / denom);
    total = total.defined() ? add(total, mse) : mse;
  }
  return total;
}

void DistillConfig::validate() const {
  if (method != "none" && method != "rkd" && method != "pkd" && method != "ckd") {
    throw ConfigError("distill: method must be none, rkd, pkd, or ckd, got '" + method + "'");
  }
  LossWeights check(eta, lambda);  // range validation
  (void)check;
  if (method == "none" && (eta != 0.0 || lambda != 0.0)) {
    throw ConfigError("distill: method none requires eta = lambda = 0");
  }
  if (method == "rkd" && lambda != 0.0) {
    throw ConfigError("distill: method rkd requires lambda = 0");
  }
  if (!wants_mapping() && (!mapping_variant.empty() || !mapping_explicit.empty())) {
    throw ConfigError("distill: mapping given but method '" + method + "' uses none");
  }
  if (method == "pkd" && !mapping_variant.empty() && mapping_variant != "PKD" && mapping_explicit.empty()) {
    throw ConfigError("distill: method pkd allows only singleton mappings (variant PKD or an explicit list)");
  }
  if (attention_loss && !wants_mapping()) {
    throw ConfigError("distill: attention_loss requires a layer-mapping method (pkd or ckd)");
  }
  if (decoder_mapping && !wants_mapping()) {
    throw ConfigError("distill: decoder_mapping requires a layer-mapping method (pkd or ckd)");
  }
  if (decoder_mapping && !mapping_explicit.empty()) {
    throw ConfigError("distill: decoder_mapping works with variant mappings only, not explicit lists");
  }
}

static LayerMapping resolve_mapping_impl(const DistillConfig& dc, int n_teacher, int n_student) {
  if (!dc.mapping_explicit.empty()) {
    return explicit_mapping(dc.mapping_explicit, n_teacher);
  }
  std::string variant = dc.mapping_variant;
  if (variant.empty()) variant = dc.method == "pkd" ? "PKD" : "RC";
  return generate_mapping(variant, n_teacher, n_student);
}

LayerMapping DistillConfig::resolve_mapping(int n_teacher, int n_student) const {
  LayerMapping m = resolve_mapping_impl(*this, n_teacher, n_student);
  if (method == "pkd") {
    for (const auto& e : m.entries) {
      if (e.size() != 1) {
        throw ConfigError("distill: method pkd requires singleton mapping entries");
      }
    }
  }
  return m;
}

TotalLoss total_loss(const Tensor* hard, const Tensor* soft, const Tensor* layer, const Tensor* attn,
                     const LossWeights& weights) {
  TotalLoss out;
  auto contribute = [&out](const Tensor* part, double w) {
    if (!part) return;
    Tensor scaled = ckd::scale(*part, w);
    out.total = out.total.defined() ? add(out.total, scaled) : scaled;
  };
  contribute(hard, weights.beta);
  contribute(soft, weights.eta);
  contribute(layer, weights.lambda);
  contribute(attn, weights.lambda);
  if (!out.total.defined()) {
    throw ContractError("total_loss: no loss components supplied");
  }

  LossReport& rep = out.report;
  if (hard) rep.hard = static_cast<double>(hard->item());
  if (soft) {
    rep.soft = static_cast<double>(soft->item());
    rep.soft_enabled = true;
  }
  if (layer) {
    rep.layer = static_cast<double>(layer->item());
    rep.layer_enabled = true;
  }
  if (attn) {
    rep.attn = static_cast<double>(attn->item());
    rep.attn_enabled = true;
  }
  rep.total = weights.beta * rep.hard + weights.eta * rep.soft + weights.lambda * (rep.layer + rep.attn);
  return out;
}

}  // namespace ckd
