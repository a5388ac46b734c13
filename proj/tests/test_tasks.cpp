#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>

#include "ckd/tasks.hpp"

using namespace ckd;

namespace {

TaskSpec small_spec(const std::string& kind) {
  TaskSpec s;
  s.kind = kind;
  s.vocab_size = 10;
  s.min_len = 3;
  s.max_len = 6;
  s.n_train = 200;
  s.n_dev = 40;
  s.n_test = 40;
  s.seed = 5;
  return s;
}

}  // namespace

TEST_CASE("task functions: copy, reverse, sort") {
  std::vector<int> src = {7, 3, 9, 3};
  CHECK(apply_task("copy", src) == src);
  CHECK(apply_task("reverse", src) == std::vector<int>{3, 9, 3, 7});
  CHECK(apply_task("sort", src) == std::vector<int>{3, 3, 7, 9});
  CHECK_THROWS_AS(apply_task("shuffle", src), ConfigError);
}

TEST_CASE("corpus generation: sizes, ranges, pairing, determinism") {
  auto spec = small_spec("reverse");
  auto data = generate_corpus(spec);
  CHECK(data.train.size() == 200);
  CHECK(data.dev.size() == 40);
  CHECK(data.test.size() == 40);

  auto check_split = [&](const Corpus& c) {
    for (std::size_t i = 0; i < c.size(); ++i) {
      const auto& s = c.src[i];
      CHECK(int(s.size()) >= spec.min_len);
      CHECK(int(s.size()) <= spec.max_len);
      for (int tok : s) {
        CHECK(tok >= kSpecialTokens);
        CHECK(tok < spec.model_vocab());
      }
      CHECK(c.tgt[i] == apply_task(spec.kind, s));
    }
  };
  check_split(data.train);
  check_split(data.dev);
  check_split(data.test);

  auto again = generate_corpus(spec);
  CHECK(again.train.src == data.train.src);
  CHECK(again.test.tgt == data.test.tgt);

  auto shifted = small_spec("reverse");
  shifted.seed = 6;
  CHECK(generate_corpus(shifted).train.src != data.train.src);
}

TEST_CASE("source sequences are unique across all splits") {
  auto data = generate_corpus(small_spec("copy"));
  std::set<std::vector<int>> seen;
  for (const Corpus* c : {&data.train, &data.dev, &data.test})
    for (const auto& s : c->src) CHECK(seen.insert(s).second);
}

TEST_CASE("generation fails when the space cannot hold the corpus") {
  TaskSpec tiny = small_spec("copy");
  tiny.vocab_size = 2;
  tiny.min_len = 1;
  tiny.max_len = 2;  // 2 + 4 = 6 possible sources
  tiny.n_train = 100;
  CHECK_THROWS_AS(generate_corpus(tiny), ConfigError);
}

TEST_CASE("batches carry eos/bos framing and exact masks") {
  auto data = generate_corpus(small_spec("reverse"));
  auto batches = make_batches(data.dev, 16, 3);
  std::size_t total = 0;
  std::multiset<std::vector<int>> batched, original;
  for (const auto& s : data.dev.src) original.insert(s);

  for (const auto& b : batches) {
    total += b.batch;
    for (int i = 0; i < b.batch; ++i) {
      // find the content length from the mask
      int slen = 0;
      while (slen < b.src_len && b.src_valid.data()[i * b.src_len + slen] == real(1)) ++slen;
      REQUIRE(slen >= 1);
      std::vector<int> content(b.src.begin() + i * b.src_len, b.src.begin() + i * b.src_len + slen - 1);
      CHECK(b.src[i * b.src_len + slen - 1] == kEos);
      batched.insert(content);
      // pad region is all kPad with zero mask
      for (int j = slen; j < b.src_len; ++j) {
        CHECK(b.src[i * b.src_len + j] == kPad);
        CHECK(b.src_valid.data()[i * b.src_len + j] == real(0));
      }
      // decoder side: tgt_in = bos + y, tgt_out = y + eos, same mask length
      int tlen = 0;
      while (tlen < b.tgt_len && b.tgt_valid.data()[i * b.tgt_len + tlen] == real(1)) ++tlen;
      CHECK(b.tgt_in[i * b.tgt_len] == kBos);
      CHECK(b.tgt_out[i * b.tgt_len + tlen - 1] == kEos);
      for (int j = 1; j < tlen; ++j)
        CHECK(b.tgt_in[i * b.tgt_len + j] == b.tgt_out[i * b.tgt_len + j - 1]);
      // the content must be this batch entry's task output
      std::vector<int> y(b.tgt_out.begin() + i * b.tgt_len, b.tgt_out.begin() + i * b.tgt_len + tlen - 1);
      CHECK(y == apply_task("reverse", content));
    }
  }
  CHECK(total == data.dev.size());
  CHECK(batched == original);  // a permutation, nothing lost or duplicated

  // shuffling is seed-driven
  auto b1 = make_batches(data.dev, 16, 3);
  auto b2 = make_batches(data.dev, 16, 4);
  CHECK(b1.front().src != b2.front().src);
  auto b3 = make_batches(data.dev, 16, 3);
  CHECK(b1.front().src == b3.front().src);
}

TEST_CASE("pack_batch keeps corpus order, row for row") {
  // Evaluation decodes a packed batch and scores row i against reference i,
  // so any reordering here silently wrecks accuracy and BLEU.
  auto data = generate_corpus(small_spec("reverse"));
  const std::size_t lo = 3, hi = 11;
  TokenBatch b = pack_batch(data.dev, lo, hi);
  REQUIRE(b.batch == static_cast<int>(hi - lo));
  for (int i = 0; i < b.batch; ++i) {
    const auto& src = data.dev.src[lo + static_cast<std::size_t>(i)];
    const auto& tgt = data.dev.tgt[lo + static_cast<std::size_t>(i)];
    for (std::size_t j = 0; j < src.size(); ++j) CHECK(b.src[i * b.src_len + static_cast<int>(j)] == src[j]);
    CHECK(b.src[i * b.src_len + static_cast<int>(src.size())] == kEos);
    for (std::size_t j = 0; j < tgt.size(); ++j) CHECK(b.tgt_out[i * b.tgt_len + static_cast<int>(j)] == tgt[j]);
  }
  CHECK_THROWS_AS(pack_batch(data.dev, 5, 5), DataError);
  CHECK_THROWS_AS(pack_batch(data.dev, 0, data.dev.size() + 1), DataError);
}

TEST_CASE("token accuracy counts position-wise matches over ref length") {
  // 2 of 3 positions right
  CHECK(token_accuracy({{5, 6, 7}}, {{5, 6, 8}}) == doctest::Approx(2.0 / 3));
  // short hypothesis: missing tail positions are wrong
  CHECK(token_accuracy({{5}}, {{5, 6, 8}}) == doctest::Approx(1.0 / 3));
  // long hypothesis: extra tokens earn nothing
  CHECK(token_accuracy({{5, 6, 8, 9, 9}}, {{5, 6, 8}}) == doctest::Approx(1.0));
  CHECK(token_accuracy({{1, 2}, {3}}, {{1, 2}, {4}}) == doctest::Approx(2.0 / 3));
  CHECK_THROWS_AS(token_accuracy({}, {}), DataError);  // no reference tokens
  CHECK_THROWS_AS(token_accuracy({{1}}, {{1}, {2}}), DataError);
}

TEST_CASE("bleu: perfect match scores 100, disjoint scores 0") {
  std::vector<std::vector<int>> ref = {{3, 4, 5, 6, 7}, {8, 9, 3, 4}};
  CHECK(corpus_bleu(ref, ref) == doctest::Approx(100.0));
  std::vector<std::vector<int>> junk = {{10, 10, 10, 10, 10}, {11, 11, 11, 11}};
  CHECK(corpus_bleu(junk, ref) == doctest::Approx(0.0));
}

TEST_CASE("bleu agrees with a worked example") {
  // hyp "a b c d" vs ref "a b c e" with ids
  std::vector<std::vector<int>> hyp = {{3, 4, 5, 6}};
  std::vector<std::vector<int>> ref = {{3, 4, 5, 7}};
  // p1 = 3/4; higher orders get add-one smoothing:
  // p2 = (2+1)/(3+1), p3 = (1+1)/(2+1), p4 = (0+1)/(1+1); BP = 1
  const double want = 100.0 * std::pow(0.75 * 0.75 * (2.0 / 3.0) * 0.5, 0.25);
  CHECK(corpus_bleu(hyp, ref) == doctest::Approx(want).epsilon(1e-6));
  CHECK(corpus_bleu(hyp, ref) == doctest::Approx(65.8037).epsilon(1e-3));
}

TEST_CASE("bleu applies the brevity penalty and clips counts") {
  // short hypothesis: BP = exp(1 - r/c)
  std::vector<std::vector<int>> ref = {{3, 4, 5, 6, 7, 8}};
  std::vector<std::vector<int>> hyp = {{3, 4, 5}};
  double full = corpus_bleu({{3, 4, 5, 6, 7, 8}}, ref);
  double cut = corpus_bleu(hyp, ref);
  CHECK(cut < full);
  // repeated unigrams are clipped to the reference count
  std::vector<std::vector<int>> spam = {{3, 3, 3, 3, 3, 3}};
  std::vector<std::vector<int>> one = {{3, 4, 5, 6, 7, 8}};
  double spam_score = corpus_bleu(spam, one);
  CHECK(spam_score < 30.0);  // p1 clipped to 1/6
  CHECK(corpus_bleu(spam, one) >= 0.0);
}

TEST_CASE("bleu is bounded and degrades with corruption") {
  auto data = generate_corpus(small_spec("reverse"));
  auto& ref = data.dev.tgt;
  auto corrupt = ref;
  for (std::size_t i = 0; i < corrupt.size(); i += 2)
    if (!corrupt[i].empty()) corrupt[i][0] = (corrupt[i][0] == 3) ? 4 : 3;
  const double clean = corpus_bleu(ref, ref);
  const double dirty = corpus_bleu(corrupt, ref);
  CHECK(clean == doctest::Approx(100.0));
  CHECK(dirty < clean);
  CHECK(dirty > 0.0);
}

TEST_CASE("corpus dump and load round-trip") {
  auto data = generate_corpus(small_spec("sort"));
  const std::string path = "test_tasks_corpus.tsv";
  dump_corpus(data.dev, path);
  Corpus back = load_corpus(path);
  CHECK(back.src == data.dev.src);
  CHECK(back.tgt == data.dev.tgt);
  std::remove(path.c_str());
  CHECK_THROWS_AS(load_corpus("no_such_file.tsv"), DataError);
}

TEST_CASE("spec validation rejects nonsense") {
  TaskSpec s = small_spec("reverse");
  CHECK_NOTHROW(s.validate());
  s.kind = "nope";
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = small_spec("copy");
  s.min_len = 0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = small_spec("copy");
  s.min_len = 8;
  s.max_len = 4;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = small_spec("copy");
  s.vocab_size = 0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = small_spec("copy");
  s.n_train = 0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
}
