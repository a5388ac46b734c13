#include "ckd/config.hpp"

#include <cstdlib>
#include <fstream>

#include "json.hpp"

namespace ckd {

using nlohmann::json;

namespace {

[[noreturn]] void bad_field(const std::string& path, const std::string& why) {
  throw ConfigError("config: " + path + " " + why);
}

class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) bad_field(path_, "must be a JSON object");
  }

  ~Section() = default;

  int get_int(const char* key, int fallback) {
    mark(key);
    if (!j_.contains(key)) return fallback;
    if (!j_[key].is_number_integer()) bad_field(path_ + "." + key, "must be an integer");
    return j_[key].get<int>();
  }

  double get_real(const char* key, double fallback) {
    mark(key);
    if (!j_.contains(key)) return fallback;
    if (!j_[key].is_number()) bad_field(path_ + "." + key, "must be a number");
    return j_[key].get<double>();
  }

  bool get_bool(const char* key, bool fallback) {
    mark(key);
    if (!j_.contains(key)) return fallback;
    if (!j_[key].is_boolean()) bad_field(path_ + "." + key, "must be true or false");
    return j_[key].get<bool>();
  }

  std::string get_string(const char* key, const std::string& fallback) {
    mark(key);
    if (!j_.contains(key)) return fallback;
    if (!j_[key].is_string()) bad_field(path_ + "." + key, "must be a string");
    return j_[key].get<std::string>();
  }

  bool has(const char* key) const { return j_.contains(key); }

  const json& raw(const char* key) {
    mark(key);
    return j_.at(key);
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      (void)value;
      bool known = false;
      for (const auto& k : seen_) known = known || k == key;
      if (!known) bad_field(path_ + "." + key, "is not a recognized field");
    }
  }

 private:
  void mark(const char* key) { seen_.emplace_back(key); }
  const json& j_;
  std::string path_;
  std::vector<std::string> seen_;
};

void read_model(const json& j, const std::string& path, ModelConfig& m) {
  Section s(j, path);
  m.enc_layers = s.get_int("enc_layers", m.enc_layers);
  m.dec_layers = s.get_int("dec_layers", m.dec_layers);
  m.d_model = s.get_int("d_model", m.d_model);
  m.n_heads = s.get_int("n_heads", m.n_heads);
  m.d_ff = s.get_int("d_ff", m.d_ff);
  m.vocab_size = s.get_int("vocab_size", m.vocab_size);
  m.max_len = s.get_int("max_len", m.max_len);
  m.dropout = s.get_real("dropout", m.dropout);
  m.label_smoothing = s.get_real("label_smoothing", m.label_smoothing);
  s.finish();
}

void read_task(const json& j, TaskSpec& t) {
  Section s(j, "task");
  t.kind = s.get_string("kind", t.kind);
  t.vocab_size = s.get_int("vocab_size", t.vocab_size);
  t.min_len = s.get_int("min_len", t.min_len);
  t.max_len = s.get_int("max_len", t.max_len);
  t.n_train = s.get_int("n_train", t.n_train);
  t.n_dev = s.get_int("n_dev", t.n_dev);
  t.n_test = s.get_int("n_test", t.n_test);
  t.seed = s.get_int("seed", t.seed);
  s.finish();
}

void read_train(const json& j, TrainConfig& t) {
  Section s(j, "train");
  t.epochs = s.get_int("epochs", t.epochs);
  t.batch_size = s.get_int("batch_size", t.batch_size);
  t.warmup_steps = s.get_int("warmup_steps", t.warmup_steps);
  t.lr_factor = s.get_real("lr_factor", t.lr_factor);
  t.grad_clip = s.get_real("grad_clip", t.grad_clip);
  t.model_seed = s.get_int("model_seed", t.model_seed);
  t.data_seed = s.get_int("data_seed", t.data_seed);
  t.epoch_seed = s.get_int("epoch_seed", t.epoch_seed);
  t.eval_every = s.get_int("eval_every", t.eval_every);
  s.finish();
}

void read_mapping(const json& j, DistillConfig& d) {
  Section s(j, "distill.mapping");
  if (s.has("variant")) {
    d.mapping_variant = s.get_string("variant", "");
  }
  if (s.has("explicit")) {
    const json& e = s.raw("explicit");
    if (!e.is_array()) bad_field("distill.mapping.explicit", "must be an array of index lists");
    for (const json& entry : e) {
      if (!entry.is_array()) bad_field("distill.mapping.explicit", "must contain arrays of teacher indices");
      std::vector<int> ids;
      for (const json& v : entry) {
        if (!v.is_number_integer()) bad_field("distill.mapping.explicit", "must contain integers");
        ids.push_back(v.get<int>());
      }
      d.mapping_explicit.push_back(std::move(ids));
    }
  }
  s.finish();
}

void read_distill(const json& j, DistillConfig& d) {
  Section s(j, "distill");
  d.method = s.get_string("method", d.method);
  d.eta = s.get_real("eta", d.eta);
  d.lambda = s.get_real("lambda", d.lambda);
  d.attention_loss = s.get_bool("attention_loss", d.attention_loss);
  d.decoder_mapping = s.get_bool("decoder_mapping", d.decoder_mapping);
  if (s.has("mapping")) read_mapping(s.raw("mapping"), d);
  s.finish();
}

void read_paths(const json& j, Paths& p) {
  Section s(j, "paths");
  p.metrics_log = s.get_string("metrics_log", p.metrics_log);
  p.corpus_dump = s.get_string("corpus_dump", p.corpus_dump);
  s.finish();
}

ExperimentConfig from_json(const json& root) {
  if (!root.is_object()) throw ConfigError("config: top level must be a JSON object");
  ExperimentConfig cfg;
  cfg.student.enc_layers = 2;
  cfg.student.dec_layers = 2;

  Section top(root, "config");
  if (top.has("task")) read_task(top.raw("task"), cfg.task);
  if (top.has("teacher")) read_model(top.raw("teacher"), "teacher", cfg.teacher);
  if (top.has("student")) read_model(top.raw("student"), "student", cfg.student);
  if (top.has("train")) read_train(top.raw("train"), cfg.train);
  if (top.has("distill")) read_distill(top.raw("distill"), cfg.distill);
  if (top.has("paths")) read_paths(top.raw("paths"), cfg.paths);
  top.finish();

  if (cfg.teacher.vocab_size == 0) cfg.teacher.vocab_size = cfg.task.model_vocab();
  if (cfg.student.vocab_size == 0) cfg.student.vocab_size = cfg.task.model_vocab();

  if (const char* env = std::getenv("CKD_SEED")) {
    try {
      const int seed = std::stoi(env);
      cfg.train.model_seed = seed;
      cfg.train.data_seed = seed + 1;
      cfg.train.epoch_seed = seed + 2;
      cfg.task.seed = seed + 3;
    } catch (const std::exception&) {
      throw ConfigError("config: CKD_SEED environment variable is not an integer: '" + std::string(env) + "'");
    }
  }

  cfg.task.validate();
  cfg.teacher.validate();
  cfg.student.validate();
  cfg.train.validate();
  cfg.distill.validate();
  return cfg;
}

}  // namespace

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");
  json root;
  try {
    in >> root;
  } catch (const json::exception& e) {
    throw ConfigError("config: '" + path + "' is not valid JSON: " + e.what());
  }
  return from_json(root);
}

ExperimentConfig parse_experiment_config(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: not valid JSON: ") + e.what());
  }
  return from_json(root);
}

}  // namespace ckd
