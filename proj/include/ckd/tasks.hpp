#pragma once

#include <string>
#include <vector>

#include "ckd/transformer.hpp"

namespace ckd {

// Special token ids shared by every task; content tokens start at 3.
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kSpecialTokens = 3;

struct TaskSpec {
  std::string kind = "reverse";  // "copy", "reverse", or "sort"
  int vocab_size = 16;           // content tokens, excluding pad/bos/eos
  int min_len = 4;
  int max_len = 12;
  int n_train = 20000;
  int n_dev = 1000;
  int n_test = 1000;
  int seed = 7;

  void validate() const;
  int model_vocab() const { return vocab_size + kSpecialTokens; }
};

// Parallel content-token sequences; tgt[i] is the task applied to src[i].
struct Corpus {
  std::vector<std::vector<int>> src;
  std::vector<std::vector<int>> tgt;
  std::size_t size() const { return src.size(); }
};

struct TaskData {
  Corpus train, dev, test;
};

// Deterministic given spec.seed. Source sequences are unique across all three
// splits (resampled on collision); lengths uniform in [min_len, max_len],
// tokens uniform in [3, vocab_size + 2].
TaskData generate_corpus(const TaskSpec& spec);

// The task function itself (what tgt is for a given src).
std::vector<int> apply_task(const std::string& kind, const std::vector<int>& src);

// Shuffles deterministically, then pads each batch to its own max lengths.
// src rows are content+eos; decoder input is bos+content, gold is content+eos.
std::vector<TokenBatch> make_batches(const Corpus& corpus, int batch_size, int seed);

// One batch from rows [begin, end) in corpus order, no shuffling. Evaluation
// depends on this: decoded row i must line up with reference i.
TokenBatch pack_batch(const Corpus& corpus, std::size_t begin, std::size_t end);

// Position-wise matches divided by total reference tokens; length mismatches
// count as errors.
double token_accuracy(const std::vector<std::vector<int>>& hyp, const std::vector<std::vector<int>>& ref);

// Corpus-level BLEU in [0, 100]: geometric mean of modified n-gram precisions
// (n = 1..4, add-one smoothing for n >= 2) times the brevity penalty.
double corpus_bleu(const std::vector<std::vector<int>>& hyp, const std::vector<std::vector<int>>& ref);

// One pair per line: space-separated src ids, a tab, space-separated tgt ids.
void dump_corpus(const Corpus& corpus, const std::string& path);
Corpus load_corpus(const std::string& path);

}  // namespace ckd
