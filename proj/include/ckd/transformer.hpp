#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "ckd/tensor.hpp"

namespace ckd {

struct ModelConfig {
  int enc_layers = 6;
  int dec_layers = 6;
  int d_model = 64;
  int n_heads = 4;
  int d_ff = 128;
  int vocab_size = 0;
  int max_len = 64;
  double dropout = 0.1;
  double label_smoothing = 0.1;

  void validate() const;  // throws ConfigError naming the offending field
};

// Post-norm encoder-decoder transformer with sinusoidal positions and a
// shared source/target embedding table. Parameters live in a name->Tensor
// map with a stable ordering, which checkpointing and the optimizer rely on.
struct TransformerModel {
  ModelConfig config;
  std::vector<std::string> param_names;
  std::unordered_map<std::string, Tensor> params;
  Tensor pe;  // [max_len, d_model] positional table, not trained

  Tensor& param(const std::string& name);
  const Tensor& param(const std::string& name) const;
};

TransformerModel init_model(const ModelConfig& config, int seed);

std::int64_t count_params(const TransformerModel& model);

// Right-padded token batch. tgt_in is the decoder input (bos-prefixed),
// tgt_out the gold next tokens; *_valid are {0,1} masks of real positions.
struct TokenBatch {
  int batch = 0;
  int src_len = 0;
  int tgt_len = 0;
  std::vector<int> src;      // batch * src_len
  std::vector<int> tgt_in;   // batch * tgt_len
  std::vector<int> tgt_out;  // batch * tgt_len
  Tensor src_valid;          // [batch, src_len]
  Tensor tgt_valid;          // [batch, tgt_len]
};

enum class RunMode { train, eval };

struct ForwardTrace {
  Tensor logits;                      // [batch, tgt_len, vocab]
  std::vector<Tensor> enc_hiddens;    // per layer, [batch, src_len, d_model]
  std::vector<Tensor> dec_hiddens;    // per layer, [batch, tgt_len, d_model]
  std::vector<Tensor> enc_self_attn;  // per layer, [batch, heads, src, src]
  Tensor src_valid;
  Tensor tgt_valid;
};

// Full pass. Dropout fires only in train mode (and only then consumes rng).
// Hidden states are each block's output after its final residual+norm.
ForwardTrace forward(const TransformerModel& model, const TokenBatch& batch, RunMode mode, std::mt19937& rng);

// Batched argmax decoding with a cached encoder pass; stops each sequence at
// eos or after max_len generated tokens. Returns content tokens (no bos/eos).
std::vector<std::vector<int>> greedy_decode(const TransformerModel& model, const std::vector<int>& src,
                                            const Tensor& src_valid, int batch, int src_len, int max_len, int bos,
                                            int eos);

}  // namespace ckd
