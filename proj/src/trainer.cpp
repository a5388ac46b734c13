#include "ckd/trainer.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "json.hpp"

namespace ckd {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

static_assert(sizeof(float) == 4, "checkpoint format assumes 4-byte floats");

json config_to_json(const ModelConfig& c) {
  return json{{"enc_layers", c.enc_layers},
              {"dec_layers", c.dec_layers},
              {"d_model", c.d_model},
              {"n_heads", c.n_heads},
              {"d_ff", c.d_ff},
              {"vocab_size", c.vocab_size},
              {"max_len", c.max_len},
              {"dropout", c.dropout},
              {"label_smoothing", c.label_smoothing}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  try {
    c.enc_layers = j.at("enc_layers").get<int>();
    c.dec_layers = j.at("dec_layers").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_len = j.at("max_len").get<int>();
    c.dropout = j.at("dropout").get<double>();
    c.label_smoothing = j.at("label_smoothing").get<double>();
  } catch (const json::exception& e) {
    throw LoadError(std::string("checkpoint manifest: bad config block: ") + e.what());
  }
  return c;
}

void append_floats(std::ofstream& out, const Tensor& t) {
  // On-disk format is float32 regardless of the build's scalar type.
  std::vector<float> buf(t.vec().begin(), t.vec().end());
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

void read_floats(const std::vector<char>& blob, std::int64_t offset, Tensor& t) {
  std::vector<float> buf(static_cast<std::size_t>(t.size()));
  std::memcpy(buf.data(), blob.data() + offset, buf.size() * sizeof(float));
  for (std::int64_t i = 0; i < t.size(); ++i) t.data()[i] = static_cast<real>(buf[static_cast<std::size_t>(i)]);
}

struct EvalBatchView {
  TokenBatch batch;
  std::vector<std::vector<int>> refs;
};

EvalBatchView eval_batch(const Corpus& corpus, std::size_t begin, std::size_t end) {
  EvalBatchView view;
  view.refs.assign(corpus.tgt.begin() + static_cast<std::ptrdiff_t>(begin),
                   corpus.tgt.begin() + static_cast<std::ptrdiff_t>(end));
  view.batch = pack_batch(corpus, begin, end);
  return view;
}

// The per-run mutable state shared by the teacher and student loops.
struct TrainDriver {
  const TrainConfig& tc;
  TransformerModel& model;
  std::vector<Tensor> opt_params;
  Adam optimizer;
  std::mt19937 drop_rng;
  std::ofstream metrics;
  std::string out_dir;
  const Corpus* dev = nullptr;
  const FusionParams* fusion_to_save = nullptr;

  RunResult result;
  int step = 0;
  LossReport last_report;

  TrainDriver(const TrainConfig& tc_, TransformerModel& model_, std::vector<Tensor> params, const std::string& out_dir_,
              const std::string& metrics_path)
      : tc(tc_),
        model(model_),
        opt_params(std::move(params)),
        optimizer(opt_params, tc_.adam_beta1, tc_.adam_beta2, tc_.adam_eps),
        drop_rng(static_cast<std::uint32_t>(tc_.data_seed)),
        out_dir(out_dir_) {
    if (!metrics_path.empty()) {
      metrics.open(metrics_path);
      if (!metrics) throw DataError("metrics log: cannot open '" + metrics_path + "' for writing");
    }
  }

  void apply_step(const TotalLoss& tl) {
    ++step;
    if (!std::isfinite(tl.report.total)) {
      throw TrainError("training diverged: non-finite loss at step " + std::to_string(step));
    }
    backward(tl.total);
    clip_global_norm(opt_params, tc.grad_clip);
    optimizer.step(lr_at(tc, model.config.d_model, step));
    optimizer.zero_grad();
    last_report = tl.report;
    result.steps.push_back({step, tl.report});
  }

  void eval_and_maybe_save() {
    EvalResult ev = evaluate(model, *dev, std::max(tc.batch_size, 64));
    if (metrics.is_open()) {
      json line{{"step", step},         {"hard", last_report.hard},     {"soft", last_report.soft},
                {"layer", last_report.layer}, {"attn", last_report.attn}, {"total", last_report.total},
                {"dev_acc", ev.token_accuracy}, {"dev_bleu", ev.bleu}};
      metrics << line.dump() << '\n';
      metrics.flush();
    }
    if (!best_seen_ || ev.token_accuracy > result.best.dev_acc) {
      result.best = MetricsSnapshot{step, ev.token_accuracy, ev.bleu, ev.loss};
      result.best_model = snapshot(model);
      if (!out_dir.empty()) save_checkpoint(out_dir, model, fusion_to_save, result.best);
    }
    best_seen_ = true;
  }

  static TransformerModel snapshot(const TransformerModel& m) {
    TransformerModel copy;
    copy.config = m.config;
    copy.param_names = m.param_names;
    copy.pe = m.pe.clone();
    for (const auto& name : m.param_names) copy.params.emplace(name, m.param(name).clone());
    return copy;
  }

 private:
  bool best_seen_ = false;
};

std::vector<Tensor> model_params(TransformerModel& m) {
  std::vector<Tensor> ps;
  for (const auto& name : m.param_names) ps.push_back(m.param(name));
  return ps;
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("train: epochs must be >= 0, got " + std::to_string(epochs));
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1, got " + std::to_string(batch_size));
  if (warmup_steps < 1) throw ConfigError("train: warmup_steps must be >= 1, got " + std::to_string(warmup_steps));
  if (lr_factor <= 0.0) throw ConfigError("train: lr_factor must be > 0");
  if (eval_every < 0) throw ConfigError("train: eval_every must be >= 0");
}

double lr_at(const TrainConfig& tc, int d_model, int step) {
  const double s = double(step);
  const double w = double(tc.warmup_steps);
  return tc.lr_factor / std::sqrt(double(d_model)) * std::min(1.0 / std::sqrt(s), s / (w * std::sqrt(w)));
}

Adam::Adam(std::vector<Tensor> params, double beta1, double beta2, double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(static_cast<std::size_t>(p.size()), 0.0);
    v_.emplace_back(static_cast<std::size_t>(p.size()), 0.0);
  }
}

void Adam::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, double(t_));
  const double bc2 = 1.0 - std::pow(beta2_, double(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    if (!p.has_grad()) continue;
    const real* g = p.grad();
    real* w = p.data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::int64_t j = 0; j < p.size(); ++j) {
      const double gj = double(g[j]);
      m[static_cast<std::size_t>(j)] = beta1_ * m[static_cast<std::size_t>(j)] + (1.0 - beta1_) * gj;
      v[static_cast<std::size_t>(j)] = beta2_ * v[static_cast<std::size_t>(j)] + (1.0 - beta2_) * gj * gj;
      const double mhat = m[static_cast<std::size_t>(j)] / bc1;
      const double vhat = v[static_cast<std::size_t>(j)] / bc2;
      w[j] = static_cast<real>(double(w[j]) - lr * mhat / (std::sqrt(vhat) + eps_));
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.drop_grad();
}

double clip_global_norm(const std::vector<Tensor>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    const real* g = p.grad();
    for (std::int64_t j = 0; j < p.size(); ++j) sq += double(g[j]) * double(g[j]);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const real f = static_cast<real>(max_norm / norm);
    for (const auto& p : params) {
      if (!p.has_grad()) continue;
      real* g = const_cast<real*>(p.grad());
      for (std::int64_t j = 0; j < p.size(); ++j) g[j] *= f;
    }
  }
  return norm;
}

std::uint64_t param_hash(const TransformerModel& model) {
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a
  auto mix = [&h](const void* data, std::size_t len) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= p[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& name : model.param_names) {
    const Tensor& t = model.param(name);
    mix(name.data(), name.size());
    mix(t.data(), static_cast<std::size_t>(t.size()) * sizeof(real));
  }
  return h;
}

// ---- checkpointing -----------------------------------------------------------

void save_checkpoint(const std::string& dir, const TransformerModel& model, const FusionParams* fusion,
                     const MetricsSnapshot& metrics) {
  fs::create_directories(dir);

  json params = json::array();
  std::int64_t offset = 0;
  auto add_entry = [&params, &offset](const std::string& name, const Tensor& t) {
    const std::int64_t bytes = t.size() * 4;
    params.push_back(json{{"name", name}, {"shape", t.shape()}, {"byte_offset", offset}, {"byte_len", bytes}});
    offset += bytes;
  };
  for (const auto& name : model.param_names) add_entry(name, model.param(name));
  if (fusion) {
    for (std::size_t i = 0; i < fusion->W.size(); ++i) {
      add_entry("fusion." + std::to_string(i) + ".W", fusion->W[i]);
      add_entry("fusion." + std::to_string(i) + ".b", fusion->b[i]);
    }
  }

  json manifest{{"format_version", 1},
                {"config", config_to_json(model.config)},
                {"step", metrics.step},
                {"metrics", {{"dev_acc", metrics.dev_acc}, {"dev_bleu", metrics.dev_bleu}, {"loss", metrics.loss}}},
                {"params", params}};

  std::ofstream mf(dir + "/manifest.json");
  if (!mf) throw DataError("save_checkpoint: cannot write '" + dir + "/manifest.json'");
  mf << manifest.dump(2) << '\n';
  mf.close();

  std::ofstream bf(dir + "/params.bin", std::ios::binary);
  if (!bf) throw DataError("save_checkpoint: cannot write '" + dir + "/params.bin'");
  for (const auto& name : model.param_names) append_floats(bf, model.param(name));
  if (fusion) {
    for (std::size_t i = 0; i < fusion->W.size(); ++i) {
      append_floats(bf, fusion->W[i]);
      append_floats(bf, fusion->b[i]);
    }
  }
  if (!bf) throw DataError("save_checkpoint: write to '" + dir + "/params.bin' failed");
}

LoadedCheckpoint load_checkpoint(const std::string& dir) {
  std::ifstream mf(dir + "/manifest.json");
  if (!mf) throw LoadError("load_checkpoint: cannot open '" + dir + "/manifest.json'");
  json manifest;
  try {
    mf >> manifest;
  } catch (const json::exception& e) {
    throw LoadError(std::string("load_checkpoint: manifest is not valid JSON: ") + e.what());
  }
  const int version = manifest.value("format_version", -1);
  if (version != 1) {
    throw LoadError("load_checkpoint: unsupported format_version " + std::to_string(version));
  }

  LoadedCheckpoint out;
  ModelConfig cfg = config_from_json(manifest.at("config"));
  out.model = init_model(cfg, 0);
  out.metrics.step = manifest.value("step", 0);
  if (manifest.contains("metrics")) {
    const json& m = manifest["metrics"];
    out.metrics.dev_acc = m.value("dev_acc", 0.0);
    out.metrics.dev_bleu = m.value("dev_bleu", 0.0);
    out.metrics.loss = m.value("loss", 0.0);
  }

  std::ifstream bf(dir + "/params.bin", std::ios::binary);
  if (!bf) throw LoadError("load_checkpoint: cannot open '" + dir + "/params.bin'");
  std::vector<char> blob((std::istreambuf_iterator<char>(bf)), std::istreambuf_iterator<char>());

  std::set<std::string> seen;
  std::vector<std::pair<int, Shape>> fusion_entries;  // index -> W shape, gathered in order
  std::int64_t expected_end = 0;
  for (const json& e : manifest.at("params")) {
    const std::string name = e.at("name").get<std::string>();
    const Shape shape = e.at("shape").get<Shape>();
    const std::int64_t off = e.at("byte_offset").get<std::int64_t>();
    const std::int64_t len = e.at("byte_len").get<std::int64_t>();
    if (!seen.insert(name).second) throw LoadError("load_checkpoint: duplicate parameter '" + name + "'");
    if (len != numel(shape) * 4) {
      throw LoadError("load_checkpoint: parameter '" + name + "' byte_len " + std::to_string(len) +
                      " does not match shape " + shape_str(shape));
    }
    if (off < 0 || off + len > static_cast<std::int64_t>(blob.size())) {
      throw LoadError("load_checkpoint: parameter '" + name + "' lies outside params.bin (truncated blob?)");
    }
    expected_end = std::max(expected_end, off + len);

    if (name.rfind("fusion.", 0) == 0) {
      Tensor t = Tensor::zeros(shape);
      read_floats(blob, off, t);
      if (name.size() > 2 && name.substr(name.size() - 2) == ".W") {
        out.fusion.W.push_back(t.set_requires_grad(true));
      } else {
        out.fusion.b.push_back(t.set_requires_grad(true));
      }
      continue;
    }
    auto it = out.model.params.find(name);
    if (it == out.model.params.end()) {
      throw LoadError("load_checkpoint: parameter '" + name + "' not part of the configured model");
    }
    if (it->second.shape() != shape) {
      throw LoadError("load_checkpoint: parameter '" + name + "' shape " + shape_str(shape) +
                      " does not match model shape " + shape_str(it->second.shape()));
    }
    read_floats(blob, off, it->second);
  }
  if (expected_end != static_cast<std::int64_t>(blob.size())) {
    throw LoadError("load_checkpoint: params.bin has " + std::to_string(blob.size()) + " bytes but manifest covers " +
                    std::to_string(expected_end));
  }
  for (const auto& name : out.model.param_names) {
    if (!seen.count(name)) throw LoadError("load_checkpoint: parameter '" + name + "' missing from manifest");
  }
  return out;
}

// ---- evaluation ----------------------------------------------------------------

EvalResult evaluate(const TransformerModel& model, const Corpus& corpus, int batch_size) {
  EvalResult res;
  if (corpus.size() == 0) throw DataError("evaluate: empty corpus");
  std::vector<std::vector<int>> hyps, refs;
  double loss_sum = 0.0, token_sum = 0.0;
  std::mt19937 rng(0);  // eval mode: never consulted
  for (std::size_t begin = 0; begin < corpus.size(); begin += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(corpus.size(), begin + static_cast<std::size_t>(batch_size));
    EvalBatchView view = eval_batch(corpus, begin, end);
    const TokenBatch& b = view.batch;

    ForwardTrace trace = forward(model, b, RunMode::eval, rng);
    Tensor nll = hard_loss(trace.logits, b.tgt_out, b.tgt_valid, 0.0);
    double n_tokens = 0.0;
    for (std::int64_t i = 0; i < b.tgt_valid.size(); ++i) n_tokens += double(b.tgt_valid.data()[i]);
    loss_sum += double(nll.item()) * n_tokens;
    token_sum += n_tokens;

    auto decoded = greedy_decode(model, b.src, b.src_valid, b.batch, b.src_len, model.config.max_len - 1, kBos, kEos);
    for (auto& h : decoded) hyps.push_back(std::move(h));
    for (auto& r : view.refs) refs.push_back(std::move(r));
  }
  res.token_accuracy = token_accuracy(hyps, refs);
  res.bleu = corpus_bleu(hyps, refs);
  res.loss = loss_sum / token_sum;
  return res;
}

// ---- training loops ------------------------------------------------------------

RunResult train_teacher(const ModelConfig& model_cfg, const TaskSpec& task, const TrainConfig& tc,
                        const std::string& out_dir, const std::string& metrics_path) {
  model_cfg.validate();
  task.validate();
  tc.validate();
  if (task.max_len + 2 > model_cfg.max_len) {
    throw ConfigError("train: task max_len " + std::to_string(task.max_len) + " needs model max_len >= " +
                      std::to_string(task.max_len + 2));
  }
  if (task.model_vocab() != model_cfg.vocab_size) {
    throw ConfigError("train: task needs vocab_size " + std::to_string(task.model_vocab()) + ", model has " +
                      std::to_string(model_cfg.vocab_size));
  }

  TaskData data = generate_corpus(task);
  TransformerModel model = init_model(model_cfg, tc.model_seed);
  TrainDriver driver(tc, model, model_params(model), out_dir, metrics_path);
  driver.dev = &data.dev;

  driver.eval_and_maybe_save();  // step-0 baseline; also makes 0 epochs == init
  const LossWeights weights(0.0, 0.0);
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    auto batches = make_batches(data.train, tc.batch_size, tc.epoch_seed + epoch);
    for (const TokenBatch& b : batches) {
      Tape tape;
      TapeScope scope(tape);
      ForwardTrace trace = forward(model, b, RunMode::train, driver.drop_rng);
      Tensor hard = hard_loss(trace.logits, b.tgt_out, b.tgt_valid, model_cfg.label_smoothing);
      TotalLoss tl = total_loss(&hard, nullptr, nullptr, nullptr, weights);
      driver.apply_step(tl);
      if (tc.eval_every > 0 && driver.step % tc.eval_every == 0) driver.eval_and_maybe_save();
    }
    driver.eval_and_maybe_save();
  }
  return std::move(driver.result);
}

RunResult distill_student(const ModelConfig& student_cfg, const std::string& teacher_ckpt_dir, const DistillConfig& dc,
                          const TaskSpec& task, const TrainConfig& tc, const std::string& out_dir,
                          const std::string& metrics_path) {
  student_cfg.validate();
  task.validate();
  tc.validate();
  dc.validate();

  LoadedCheckpoint teacher = load_checkpoint(teacher_ckpt_dir);
  const ModelConfig& tcfg = teacher.model.config;
  if (tcfg.d_model != student_cfg.d_model) {
    throw ConfigError("distill: teacher d_model " + std::to_string(tcfg.d_model) + " != student d_model " +
                      std::to_string(student_cfg.d_model));
  }
  if (tcfg.vocab_size != student_cfg.vocab_size) {
    throw ConfigError("distill: teacher vocab_size " + std::to_string(tcfg.vocab_size) + " != student vocab_size " +
                      std::to_string(student_cfg.vocab_size));
  }
  if (tcfg.n_heads != student_cfg.n_heads && dc.attention_loss) {
    throw ConfigError("distill: attention_loss needs equal head counts, teacher has " + std::to_string(tcfg.n_heads) +
                      ", student " + std::to_string(student_cfg.n_heads));
  }
  if (task.model_vocab() != student_cfg.vocab_size) {
    throw ConfigError("distill: task needs vocab_size " + std::to_string(task.model_vocab()) + ", student has " +
                      std::to_string(student_cfg.vocab_size));
  }
  if (task.max_len + 2 > student_cfg.max_len) {
    throw ConfigError("distill: task max_len " + std::to_string(task.max_len) + " needs student max_len >= " +
                      std::to_string(task.max_len + 2));
  }

  const bool use_soft = dc.eta > 0.0;
  const bool use_layer = dc.lambda > 0.0 && dc.wants_mapping();
  const bool use_attn = dc.attention_loss && dc.lambda > 0.0;
  const bool need_teacher = use_soft || use_layer || use_attn;

  LayerMapping enc_mapping, dec_mapping;
  FusionParams enc_fusion, dec_fusion;
  if (use_layer || use_attn) {
    enc_mapping = dc.resolve_mapping(tcfg.enc_layers, student_cfg.enc_layers);
    MappingReport rep = validate_mapping(enc_mapping, tcfg.enc_layers, student_cfg.enc_layers);
    if (!rep.ok) {
      std::string msg = "distill: mapping invalid for teacher depth " + std::to_string(tcfg.enc_layers) +
                        ", student depth " + std::to_string(student_cfg.enc_layers) + ":";
      for (const auto& v : rep.violations) msg += " " + v + ";";
      throw ConfigError(msg);
    }
    if (use_layer) {
      enc_fusion = dc.method == "pkd" ? identity_fusion(enc_mapping, student_cfg.d_model)
                                      : init_fusion(enc_mapping, student_cfg.d_model);
    }
    if (dc.decoder_mapping && use_layer) {
      dec_mapping = dc.resolve_mapping(tcfg.dec_layers, student_cfg.dec_layers);
      dec_fusion = dc.method == "pkd" ? identity_fusion(dec_mapping, student_cfg.d_model)
                                      : init_fusion(dec_mapping, student_cfg.d_model);
    }
  }

  TransformerModel student = init_model(student_cfg, tc.model_seed);
  std::vector<Tensor> opt_params = model_params(student);
  FusionParams all_fusion;  // what gets saved in the checkpoint
  auto adopt_fusion = [&](FusionParams& fp) {
    for (std::size_t i = 0; i < fp.W.size(); ++i) {
      all_fusion.W.push_back(fp.W[i]);
      all_fusion.b.push_back(fp.b[i]);
      if (fp.trainable) {
        opt_params.push_back(fp.W[i]);
        opt_params.push_back(fp.b[i]);
      }
    }
  };
  adopt_fusion(enc_fusion);
  adopt_fusion(dec_fusion);

  TaskData data = generate_corpus(task);
  TrainDriver driver(tc, student, opt_params, out_dir, metrics_path);
  driver.dev = &data.dev;
  driver.fusion_to_save = all_fusion.W.empty() ? nullptr : &all_fusion;

  const LossWeights weights = dc.weights();
  std::mt19937 teacher_rng(0);  // teacher runs eval mode; never consulted

  driver.eval_and_maybe_save();
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    auto batches = make_batches(data.train, tc.batch_size, tc.epoch_seed + epoch);
    for (const TokenBatch& b : batches) {
      ForwardTrace teacher_trace;
      if (need_teacher) {
        teacher_trace = forward(teacher.model, b, RunMode::eval, teacher_rng);
      }

      Tape tape;
      TapeScope scope(tape);
      ForwardTrace trace = forward(student, b, RunMode::train, driver.drop_rng);
      Tensor hard = hard_loss(trace.logits, b.tgt_out, b.tgt_valid, student_cfg.label_smoothing);
      Tensor soft, layer, attn;
      if (use_soft) soft = soft_loss(trace.logits, teacher_trace.logits, b.tgt_valid);
      if (use_layer) {
        layer = layer_loss(trace.enc_hiddens, teacher_trace.enc_hiddens, enc_mapping, enc_fusion, b.src_valid);
        if (dc.decoder_mapping) {
          Tensor dec = layer_loss(trace.dec_hiddens, teacher_trace.dec_hiddens, dec_mapping, dec_fusion, b.tgt_valid);
          layer = add(layer, dec);
        }
      }
      if (use_attn) {
        attn = attention_loss(trace.enc_self_attn, teacher_trace.enc_self_attn, enc_mapping, b.src_valid);
      }
      TotalLoss tl = total_loss(&hard, use_soft ? &soft : nullptr, use_layer ? &layer : nullptr,
                                use_attn ? &attn : nullptr, weights);
      driver.apply_step(tl);
      if (tc.eval_every > 0 && driver.step % tc.eval_every == 0) driver.eval_and_maybe_save();
    }
    driver.eval_and_maybe_save();
  }
  return std::move(driver.result);
}

}  // namespace ckd
