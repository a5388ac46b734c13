#include "ckd/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "ckd/errors.hpp"

namespace ckd {

namespace {

// Number of distinct sequences available, saturating to avoid overflow.
double sequence_capacity(int vocab, int min_len, int max_len) {
  double total = 0.0;
  for (int len = min_len; len <= max_len; ++len) {
    total += std::pow(double(vocab), double(len));
    if (total > 1e18) return 1e18;
  }
  return total;
}

std::vector<int> sample_sentence(const TaskSpec& spec, std::mt19937& rng) {
  std::uniform_int_distribution<int> len_dist(spec.min_len, spec.max_len);
  std::uniform_int_distribution<int> tok_dist(kSpecialTokens, spec.vocab_size + kSpecialTokens - 1);
  std::vector<int> s(static_cast<std::size_t>(len_dist(rng)));
  for (auto& t : s) t = tok_dist(rng);
  return s;
}

// Packs the given corpus rows, in the order given, into one right-padded batch.
TokenBatch pack_rows(const Corpus& corpus, const std::size_t* order, int B) {
  int src_len = 0, tgt_len = 0;
  for (int j = 0; j < B; ++j) {
    src_len = std::max(src_len, static_cast<int>(corpus.src[order[j]].size()) + 1);  // + eos
    tgt_len = std::max(tgt_len, static_cast<int>(corpus.tgt[order[j]].size()) + 1);  // + bos or eos
  }
  TokenBatch b;
  b.batch = B;
  b.src_len = src_len;
  b.tgt_len = tgt_len;
  b.src.assign(static_cast<std::size_t>(B) * src_len, kPad);
  b.tgt_in.assign(static_cast<std::size_t>(B) * tgt_len, kPad);
  b.tgt_out.assign(static_cast<std::size_t>(B) * tgt_len, kPad);
  b.src_valid = Tensor::zeros({B, src_len});
  b.tgt_valid = Tensor::zeros({B, tgt_len});
  real* sv = b.src_valid.data();
  real* tv = b.tgt_valid.data();
  for (int r = 0; r < B; ++r) {
    const auto& src = corpus.src[order[r]];
    const auto& tgt = corpus.tgt[order[r]];
    for (std::size_t j = 0; j < src.size(); ++j) b.src[r * src_len + static_cast<int>(j)] = src[j];
    b.src[r * src_len + static_cast<int>(src.size())] = kEos;
    for (std::size_t j = 0; j <= src.size(); ++j) sv[r * src_len + static_cast<int>(j)] = real(1);

    b.tgt_in[r * tgt_len] = kBos;
    for (std::size_t j = 0; j < tgt.size(); ++j) {
      b.tgt_in[r * tgt_len + static_cast<int>(j) + 1] = tgt[j];
      b.tgt_out[r * tgt_len + static_cast<int>(j)] = tgt[j];
    }
    b.tgt_out[r * tgt_len + static_cast<int>(tgt.size())] = kEos;
    for (std::size_t j = 0; j <= tgt.size(); ++j) tv[r * tgt_len + static_cast<int>(j)] = real(1);
  }
  return b;
}

Corpus make_split(const TaskSpec& spec, int n, std::set<std::vector<int>>& seen, std::mt19937& rng) {
  Corpus c;
  long attempts_left = 1000L * n + 1000;
  while (static_cast<int>(c.size()) < n) {
    if (--attempts_left < 0) {
      throw ConfigError("generate_corpus: could not draw " + std::to_string(n) +
                        " more unique sentences; vocabulary or length range too small");
    }
    std::vector<int> src = sample_sentence(spec, rng);
    if (!seen.insert(src).second) continue;
    c.tgt.push_back(apply_task(spec.kind, src));
    c.src.push_back(std::move(src));
  }
  return c;
}

}  // namespace

void TaskSpec::validate() const {
  if (kind != "copy" && kind != "reverse" && kind != "sort") {
    throw ConfigError("task: kind must be copy, reverse, or sort, got '" + kind + "'");
  }
  if (vocab_size < 1) throw ConfigError("task: vocab_size must be positive, got " + std::to_string(vocab_size));
  if (min_len < 1 || max_len < min_len) {
    throw ConfigError("task: need 1 <= min_len <= max_len, got min_len=" + std::to_string(min_len) +
                      " max_len=" + std::to_string(max_len));
  }
  if (n_train < 1 || n_dev < 1 || n_test < 1) {
    throw ConfigError("task: n_train, n_dev, n_test must all be positive");
  }
}

std::vector<int> apply_task(const std::string& kind, const std::vector<int>& src) {
  std::vector<int> tgt = src;
  if (kind == "reverse") {
    std::reverse(tgt.begin(), tgt.end());
  } else if (kind == "sort") {
    std::sort(tgt.begin(), tgt.end());
  } else if (kind != "copy") {
    throw ConfigError("apply_task: unknown kind '" + kind + "'");
  }
  return tgt;
}

TaskData generate_corpus(const TaskSpec& spec) {
  spec.validate();
  const double need = double(spec.n_train) + spec.n_dev + spec.n_test;
  const double capacity = sequence_capacity(spec.vocab_size, spec.min_len, spec.max_len);
  if (capacity < need) {
    throw ConfigError("generate_corpus: " + std::to_string(static_cast<long>(need)) + " sentences requested but only " +
                      std::to_string(static_cast<long>(capacity)) + " distinct sequences exist");
  }
  std::mt19937 rng(static_cast<std::uint32_t>(spec.seed));
  std::set<std::vector<int>> seen;
  TaskData data;
  data.train = make_split(spec, spec.n_train, seen, rng);
  data.dev = make_split(spec, spec.n_dev, seen, rng);
  data.test = make_split(spec, spec.n_test, seen, rng);
  return data;
}

std::vector<TokenBatch> make_batches(const Corpus& corpus, int batch_size, int seed) {
  if (batch_size < 1) throw ConfigError("make_batches: batch_size must be >= 1");
  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937 rng(static_cast<std::uint32_t>(seed));
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<TokenBatch> batches;
  for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(batch_size));
    batches.push_back(pack_rows(corpus, order.data() + begin, static_cast<int>(end - begin)));
  }
  return batches;
}

TokenBatch pack_batch(const Corpus& corpus, std::size_t begin, std::size_t end) {
  if (begin >= end || end > corpus.size()) {
    throw DataError("pack_batch: bad row range [" + std::to_string(begin) + ", " + std::to_string(end) + ") of " +
                    std::to_string(corpus.size()));
  }
  std::vector<std::size_t> order(end - begin);
  std::iota(order.begin(), order.end(), begin);
  return pack_rows(corpus, order.data(), static_cast<int>(end - begin));
}

double token_accuracy(const std::vector<std::vector<int>>& hyp, const std::vector<std::vector<int>>& ref) {
  if (hyp.size() != ref.size()) {
    throw DataError("token_accuracy: " + std::to_string(hyp.size()) + " hypotheses vs " + std::to_string(ref.size()) +
                    " references");
  }
  long long matches = 0, total = 0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    total += static_cast<long long>(ref[i].size());
    const std::size_t upto = std::min(hyp[i].size(), ref[i].size());
    for (std::size_t j = 0; j < upto; ++j) {
      if (hyp[i][j] == ref[i][j]) ++matches;
    }
  }
  if (total == 0) throw DataError("token_accuracy: reference corpus has no tokens");
  return double(matches) / double(total);
}

double corpus_bleu(const std::vector<std::vector<int>>& hyp, const std::vector<std::vector<int>>& ref) {
  if (hyp.empty() || hyp.size() != ref.size()) {
    throw DataError("corpus_bleu: need equal nonempty corpora, got " + std::to_string(hyp.size()) + " vs " +
                    std::to_string(ref.size()));
  }
  constexpr int max_n = 4;
  long long hyp_len = 0, ref_len = 0;
  long long matched[max_n] = {0, 0, 0, 0};
  long long totals[max_n] = {0, 0, 0, 0};

  for (std::size_t i = 0; i < hyp.size(); ++i) {
    hyp_len += static_cast<long long>(hyp[i].size());
    ref_len += static_cast<long long>(ref[i].size());
    for (int n = 1; n <= max_n; ++n) {
      std::map<std::vector<int>, long long> ref_counts;
      for (std::size_t j = 0; j + n <= ref[i].size(); ++j) {
        ref_counts[std::vector<int>(ref[i].begin() + j, ref[i].begin() + j + n)]++;
      }
      std::map<std::vector<int>, long long> hyp_counts;
      for (std::size_t j = 0; j + n <= hyp[i].size(); ++j) {
        hyp_counts[std::vector<int>(hyp[i].begin() + j, hyp[i].begin() + j + n)]++;
      }
      for (const auto& [gram, cnt] : hyp_counts) {
        totals[n - 1] += cnt;
        auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) matched[n - 1] += std::min(cnt, it->second);
      }
    }
  }

  double log_sum = 0.0;
  for (int n = 1; n <= max_n; ++n) {
    double num = double(matched[n - 1]);
    double den = double(totals[n - 1]);
    if (n >= 2) {  // add-one smoothing keeps short toy sentences off zero
      num += 1.0;
      den += 1.0;
    }
    if (num == 0.0 || den == 0.0) return 0.0;
    log_sum += std::log(num / den);
  }
  const double geo = std::exp(log_sum / max_n);
  const double bp = hyp_len < ref_len ? std::exp(1.0 - double(ref_len) / double(hyp_len)) : 1.0;
  return 100.0 * geo * bp;
}

void dump_corpus(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("dump_corpus: cannot open '" + path + "' for writing");
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    for (std::size_t j = 0; j < corpus.src[i].size(); ++j) {
      if (j) out << ' ';
      out << corpus.src[i][j];
    }
    out << '\t';
    for (std::size_t j = 0; j < corpus.tgt[i].size(); ++j) {
      if (j) out << ' ';
      out << corpus.tgt[i][j];
    }
    out << '\n';
  }
  if (!out) throw DataError("dump_corpus: write to '" + path + "' failed");
}

Corpus load_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("load_corpus: cannot open '" + path + "'");
  Corpus c;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw DataError("load_corpus: line " + std::to_string(line_no) + " of '" + path + "' has no tab separator");
    }
    auto parse_ids = [&](const std::string& text) {
      std::vector<int> ids;
      std::istringstream is(text);
      int v;
      while (is >> v) ids.push_back(v);
      if (!is.eof()) {
        throw DataError("load_corpus: line " + std::to_string(line_no) + " of '" + path + "' has a non-integer token");
      }
      return ids;
    };
    c.src.push_back(parse_ids(line.substr(0, tab)));
    c.tgt.push_back(parse_ids(line.substr(tab + 1)));
  }
  return c;
}

}  // namespace ckd
