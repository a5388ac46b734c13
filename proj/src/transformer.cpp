#include "ckd/transformer.hpp"

#include <cmath>

#include "ckd/errors.hpp"

namespace ckd {

namespace {

constexpr double kNormEps = 1e-5;

Tensor xavier_uniform(int rows, int cols, std::mt19937& rng) {
  const real limit = static_cast<real>(std::sqrt(6.0 / (rows + cols)));
  return Tensor::rand_uniform({rows, cols}, rng, -limit, limit).set_requires_grad(true);
}

Tensor sinusoid_table(int max_len, int d_model) {
  Tensor pe = Tensor::zeros({max_len, d_model});
  real* p = pe.data();
  for (int pos = 0; pos < max_len; ++pos) {
    for (int i = 0; i < d_model; i += 2) {
      const double angle = pos / std::pow(10000.0, double(i) / d_model);
      p[pos * d_model + i] = static_cast<real>(std::sin(angle));
      if (i + 1 < d_model) p[pos * d_model + i + 1] = static_cast<real>(std::cos(angle));
    }
  }
  return pe;
}

// valid[b, q, k] = key_valid[b, k] for every query row.
Tensor broadcast_key_valid(const Tensor& key_valid, int n_queries) {
  const int B = key_valid.dim(0), K = key_valid.dim(1);
  Tensor out = Tensor::zeros({B, n_queries, K});
  const real* src = key_valid.data();
  real* dst = out.data();
  for (int b = 0; b < B; ++b)
    for (int q = 0; q < n_queries; ++q)
      for (int k = 0; k < K; ++k) dst[(static_cast<std::int64_t>(b) * n_queries + q) * K + k] = src[b * K + k];
  return out;
}

Tensor causal_valid(int batch, int len) {
  Tensor out = Tensor::zeros({batch, len, len});
  real* dst = out.data();
  for (int b = 0; b < batch; ++b)
    for (int q = 0; q < len; ++q)
      for (int k = 0; k <= q; ++k) dst[(static_cast<std::int64_t>(b) * len + q) * len + k] = real(1);
  return out;
}

struct PassCtx {
  const TransformerModel& m;
  RunMode mode;
  std::mt19937& rng;

  Tensor drop(Tensor t) const {
    if (mode == RunMode::train && m.config.dropout > 0.0) {
      return dropout(t, m.config.dropout, rng);
    }
    return t;
  }
};

Tensor pe_prefix(const TransformerModel& m, int len) {
  const int d = m.config.d_model;
  std::vector<real> rows(m.pe.data(), m.pe.data() + static_cast<std::int64_t>(len) * d);
  return Tensor::from({len, d}, std::move(rows));
}

Tensor embed_tokens(const PassCtx& ctx, const std::vector<int>& ids, int batch, int len) {
  const auto& cfg = ctx.m.config;
  if (len > cfg.max_len) {
    throw DataError("forward: sequence length " + std::to_string(len) + " exceeds max_len " +
                    std::to_string(cfg.max_len));
  }
  Tensor e = embedding_lookup(ctx.m.param("embed.weight"), ids, batch, len);
  e = scale(e, std::sqrt(double(cfg.d_model)));
  e = add(e, pe_prefix(ctx.m, len));
  return ctx.drop(e);
}

Tensor mha(const PassCtx& ctx, const std::string& prefix, Tensor xq, Tensor xkv, const Tensor& valid,
           Tensor* attn_store) {
  const auto& m = ctx.m;
  const int H = m.config.n_heads;
  const int dh = m.config.d_model / H;
  Tensor q = split_heads(add(matmul(xq, m.param(prefix + ".wq")), m.param(prefix + ".bq")), H);
  Tensor k = split_heads(add(matmul(xkv, m.param(prefix + ".wk")), m.param(prefix + ".bk")), H);
  Tensor v = split_heads(add(matmul(xkv, m.param(prefix + ".wv")), m.param(prefix + ".bv")), H);
  Tensor scores = scale(matmul(q, transpose_last2(k)), 1.0 / std::sqrt(double(dh)));
  Tensor attn = masked_softmax_lastdim(scores, valid);
  if (attn_store) *attn_store = attn;
  Tensor ctxv = merge_heads(matmul(attn, v));
  return add(matmul(ctxv, m.param(prefix + ".wo")), m.param(prefix + ".bo"));
}

Tensor ffn(const PassCtx& ctx, const std::string& prefix, Tensor x) {
  const auto& m = ctx.m;
  Tensor h = relu(add(matmul(x, m.param(prefix + ".w1")), m.param(prefix + ".b1")));
  return add(matmul(h, m.param(prefix + ".w2")), m.param(prefix + ".b2"));
}

Tensor norm(const PassCtx& ctx, const std::string& prefix, Tensor x) {
  return layer_norm(x, ctx.m.param(prefix + ".gamma"), ctx.m.param(prefix + ".beta"), kNormEps);
}

Tensor run_encoder(const PassCtx& ctx, const std::vector<int>& src, const Tensor& src_valid, int batch, int src_len,
                   ForwardTrace* trace) {
  Tensor x = embed_tokens(ctx, src, batch, src_len);
  Tensor enc_attn_valid = broadcast_key_valid(src_valid, src_len);
  for (int i = 0; i < ctx.m.config.enc_layers; ++i) {
    const std::string li = "enc." + std::to_string(i);
    Tensor attn_map;
    Tensor a = mha(ctx, li + ".attn", x, x, enc_attn_valid, &attn_map);
    x = norm(ctx, li + ".norm1", add(x, ctx.drop(a)));
    Tensor f = ffn(ctx, li + ".ffn", x);
    x = norm(ctx, li + ".norm2", add(x, ctx.drop(f)));
    if (trace) {
      trace->enc_hiddens.push_back(x);
      trace->enc_self_attn.push_back(attn_map);
    }
  }
  return x;
}

Tensor run_decoder(const PassCtx& ctx, Tensor enc_out, const Tensor& src_valid, const std::vector<int>& tgt_in,
                   int batch, int tgt_len, ForwardTrace* trace) {
  Tensor x = embed_tokens(ctx, tgt_in, batch, tgt_len);
  Tensor self_valid = causal_valid(batch, tgt_len);
  Tensor cross_valid = broadcast_key_valid(src_valid, tgt_len);
  for (int i = 0; i < ctx.m.config.dec_layers; ++i) {
    const std::string li = "dec." + std::to_string(i);
    Tensor a = mha(ctx, li + ".self", x, x, self_valid, nullptr);
    x = norm(ctx, li + ".norm1", add(x, ctx.drop(a)));
    Tensor c = mha(ctx, li + ".cross", x, enc_out, cross_valid, nullptr);
    x = norm(ctx, li + ".norm2", add(x, ctx.drop(c)));
    Tensor f = ffn(ctx, li + ".ffn", x);
    x = norm(ctx, li + ".norm3", add(x, ctx.drop(f)));
    if (trace) trace->dec_hiddens.push_back(x);
  }
  return add(matmul(x, ctx.m.param("out.weight")), ctx.m.param("out.bias"));
}

}  // namespace

void ModelConfig::validate() const {
  auto positive = [](const char* field, int v) {
    if (v < 1) throw ConfigError(std::string("model config: ") + field + " must be positive, got " + std::to_string(v));
  };
  positive("enc_layers", enc_layers);
  positive("dec_layers", dec_layers);
  positive("d_model", d_model);
  positive("n_heads", n_heads);
  positive("d_ff", d_ff);
  positive("vocab_size", vocab_size);
  positive("max_len", max_len);
  if (d_model % n_heads != 0) {
    throw ConfigError("model config: n_heads " + std::to_string(n_heads) + " must divide d_model " +
                      std::to_string(d_model));
  }
  if (dropout < 0.0 || dropout >= 1.0) {
    throw ConfigError("model config: dropout must be in [0, 1), got " + std::to_string(dropout));
  }
  if (label_smoothing < 0.0 || label_smoothing >= 1.0) {
    throw ConfigError("model config: label_smoothing must be in [0, 1), got " + std::to_string(label_smoothing));
  }
}

Tensor& TransformerModel::param(const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw ContractError("unknown parameter '" + name + "'");
  return it->second;
}

const Tensor& TransformerModel::param(const std::string& name) const {
  auto it = params.find(name);
  if (it == params.end()) throw ContractError("unknown parameter '" + name + "'");
  return it->second;
}

TransformerModel init_model(const ModelConfig& config, int seed) {
  config.validate();
  TransformerModel m;
  m.config = config;
  m.pe = sinusoid_table(config.max_len, config.d_model);
  std::mt19937 rng(static_cast<std::uint32_t>(seed));

  const int d = config.d_model, ff = config.d_ff, V = config.vocab_size;
  auto put = [&m](const std::string& name, Tensor t) {
    m.param_names.push_back(name);
    m.params.emplace(name, std::move(t));
  };
  auto put_bias = [&](const std::string& name, int n) { put(name, Tensor::zeros({n}).set_requires_grad(true)); };
  auto put_norm = [&](const std::string& prefix) {
    put(prefix + ".gamma", Tensor::full({d}, real(1)).set_requires_grad(true));
    put_bias(prefix + ".beta", d);
  };
  auto put_attn = [&](const std::string& prefix) {
    for (const char* w : {"wq", "wk", "wv", "wo"}) put(prefix + "." + w, xavier_uniform(d, d, rng));
    for (const char* b : {"bq", "bk", "bv", "bo"}) put_bias(prefix + "." + b, d);
  };
  auto put_ffn = [&](const std::string& prefix) {
    put(prefix + ".w1", xavier_uniform(d, ff, rng));
    put_bias(prefix + ".b1", ff);
    put(prefix + ".w2", xavier_uniform(ff, d, rng));
    put_bias(prefix + ".b2", d);
  };

  put("embed.weight",
      Tensor::rand_normal({V, d}, rng, real(0), static_cast<real>(1.0 / std::sqrt(double(d)))).set_requires_grad(true));
  for (int i = 0; i < config.enc_layers; ++i) {
    const std::string li = "enc." + std::to_string(i);
    put_attn(li + ".attn");
    put_norm(li + ".norm1");
    put_ffn(li + ".ffn");
    put_norm(li + ".norm2");
  }
  for (int i = 0; i < config.dec_layers; ++i) {
    const std::string li = "dec." + std::to_string(i);
    put_attn(li + ".self");
    put_norm(li + ".norm1");
    put_attn(li + ".cross");
    put_norm(li + ".norm2");
    put_ffn(li + ".ffn");
    put_norm(li + ".norm3");
  }
  put("out.weight", xavier_uniform(d, V, rng));
  put_bias("out.bias", V);
  return m;
}

std::int64_t count_params(const TransformerModel& model) {
  std::int64_t total = 0;
  for (const auto& name : model.param_names) total += model.param(name).size();
  return total;
}

ForwardTrace forward(const TransformerModel& model, const TokenBatch& batch, RunMode mode, std::mt19937& rng) {
  PassCtx ctx{model, mode, rng};
  ForwardTrace trace;
  trace.src_valid = batch.src_valid;
  trace.tgt_valid = batch.tgt_valid;
  Tensor enc_out = run_encoder(ctx, batch.src, batch.src_valid, batch.batch, batch.src_len, &trace);
  trace.logits = run_decoder(ctx, enc_out, batch.src_valid, batch.tgt_in, batch.batch, batch.tgt_len, &trace);
  return trace;
}

std::vector<std::vector<int>> greedy_decode(const TransformerModel& model, const std::vector<int>& src,
                                            const Tensor& src_valid, int batch, int src_len, int max_len, int bos,
                                            int eos) {
  std::mt19937 rng(0);  // eval mode consumes no randomness
  PassCtx ctx{model, RunMode::eval, rng};
  Tensor enc_out = run_encoder(ctx, src, src_valid, batch, src_len, nullptr);

  std::vector<std::vector<int>> prefix(static_cast<std::size_t>(batch), std::vector<int>{bos});
  std::vector<std::vector<int>> out(static_cast<std::size_t>(batch));
  std::vector<bool> done(static_cast<std::size_t>(batch), false);
  const int V = model.config.vocab_size;

  for (int step = 0; step < max_len; ++step) {
    const int T = static_cast<int>(prefix[0].size());
    if (T > model.config.max_len) break;
    std::vector<int> tgt_in;
    tgt_in.reserve(static_cast<std::size_t>(batch) * T);
    for (const auto& p : prefix) tgt_in.insert(tgt_in.end(), p.begin(), p.end());
    Tensor logits = run_decoder(ctx, enc_out, src_valid, tgt_in, batch, T, nullptr);
    const real* pl = logits.data();
    bool all_done = true;
    for (int b = 0; b < batch; ++b) {
      const real* row = pl + ((static_cast<std::int64_t>(b) * T) + (T - 1)) * V;
      int best = 0;
      for (int v = 1; v < V; ++v) {
        if (row[v] > row[best]) best = v;
      }
      if (!done[static_cast<std::size_t>(b)]) {
        if (best == eos) {
          done[static_cast<std::size_t>(b)] = true;
        } else {
          out[static_cast<std::size_t>(b)].push_back(best);
          all_done = false;
        }
      }
      prefix[static_cast<std::size_t>(b)].push_back(best);
    }
    if (all_done) break;
  }
  return out;
}

}  // namespace ckd
