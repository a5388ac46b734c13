#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <set>

#include "ckd/mapper.hpp"

using namespace ckd;

namespace {
using Entries = std::vector<std::vector<int>>;
}

TEST_CASE("regular chunking splits layers into contiguous blocks") {
  CHECK(generate_mapping("RC", 6, 2).entries == Entries{{1, 2, 3}, {4, 5, 6}});
  CHECK(generate_mapping("RC", 6, 3).entries == Entries{{1, 2}, {3, 4}, {5, 6}});
  // uneven split puts the larger blocks first
  CHECK(generate_mapping("RC", 7, 2).entries == Entries{{1, 2, 3, 4}, {5, 6, 7}});
  CHECK(generate_mapping("RC", 5, 3).entries == Entries{{1, 2}, {3, 4}, {5}});
  // identity when sizes match
  CHECK(generate_mapping("RC", 3, 3).entries == Entries{{1}, {2}, {3}});
}

TEST_CASE("overlapping chunking uses wide strided windows") {
  CHECK(generate_mapping("OC", 6, 2).entries == Entries{{1, 2, 3, 4}, {3, 4, 5, 6}});
  auto one = generate_mapping("OC", 6, 1);
  CHECK(one.entries == Entries{{1, 2, 3, 4, 5, 6}});
  // windows always fit inside [1, n_teacher]
  for (int nt = 2; nt <= 12; ++nt)
    for (int ns = 1; ns <= nt; ++ns) {
      auto m = generate_mapping("OC", nt, ns);
      REQUIRE(int(m.entries.size()) == ns);
      for (auto& e : m.entries) {
        CHECK(e.front() >= 1);
        CHECK(e.back() <= nt);
      }
    }
}

TEST_CASE("skipping chunking anchors first and last windows") {
  auto m = generate_mapping("SC", 6, 2);
  CHECK(m.entries == Entries{{1, 2}, {5, 6}});
  CHECK(generate_mapping("SC", 6, 1).entries == Entries{{4, 5, 6}});
  CHECK(generate_mapping("SC", 9, 2).entries == Entries{{1, 2, 3}, {7, 8, 9}});
  // window would be empty -> reject
  CHECK_THROWS_AS(generate_mapping("SC", 3, 3), ConfigError);
}

TEST_CASE("cross chunking thins blocks with stride two") {
  CHECK(generate_mapping("CC", 6, 2).entries == Entries{{1, 3}, {4, 6}});
  CHECK(generate_mapping("CC", 5, 2).entries == Entries{{1, 3, 5}, {2, 4}});
  CHECK(generate_mapping("CC", 8, 2).entries == Entries{{1, 3}, {5, 7}});
}

TEST_CASE("uniform skip picks evenly spaced single layers") {
  CHECK(generate_mapping("PKD", 6, 2).entries == Entries{{3}, {6}});
  CHECK(generate_mapping("PKD", 6, 3).entries == Entries{{2}, {4}, {6}});
  CHECK(generate_mapping("PKD", 12, 4).entries == Entries{{3}, {6}, {9}, {12}});
  for (auto& e : generate_mapping("PKD", 9, 4).entries) CHECK(e.size() == 1);
}

TEST_CASE("generator rejects bad inputs") {
  CHECK_THROWS_AS(generate_mapping("XX", 6, 2), ConfigError);
  CHECK_THROWS_AS(generate_mapping("RC", 2, 4), ConfigError);
  CHECK_THROWS_AS(generate_mapping("RC", 0, 0), ConfigError);
}

TEST_CASE("explicit mappings are taken verbatim") {
  auto m = explicit_mapping({{1, 3}, {4, 6}}, 6);
  CHECK(m.entries == Entries{{1, 3}, {4, 6}});
  CHECK(m.variant == "explicit");
  CHECK(m.n_teacher == 6);
  CHECK(m.n_student == 2);
}

TEST_CASE("validation accepts every generated mapping") {
  for (const char* v : {"RC", "OC", "CC", "PKD"})
    for (int nt = 1; nt <= 10; ++nt)
      for (int ns = 1; ns <= nt; ++ns) {
        auto m = generate_mapping(v, nt, ns);
        auto rep = validate_mapping(m, nt, ns);
        INFO(v << " " << nt << " " << ns);
        CHECK(rep.ok);
        CHECK(rep.violations.empty());
      }
  // SC needs nt large enough for a nonzero window
  for (int nt = 2; nt <= 10; ++nt)
    for (int ns = 1; ns <= nt / 2; ++ns) {
      auto rep = validate_mapping(generate_mapping("SC", nt, ns), nt, ns);
      CHECK(rep.ok);
    }
}

TEST_CASE("regular chunking partitions the teacher exactly") {
  for (int nt = 1; nt <= 12; ++nt)
    for (int ns = 1; ns <= nt; ++ns) {
      auto m = generate_mapping("RC", nt, ns);
      std::set<int> seen;
      for (auto& e : m.entries) seen.insert(e.begin(), e.end());
      CHECK(int(seen.size()) == nt);  // full coverage, no overlap
      auto rep = validate_mapping(m, nt, ns);
      CHECK(rep.coverage);
      CHECK(rep.skipped_teacher_layers.empty());
    }
}

TEST_CASE("validation reports skips and coverage gaps") {
  auto m = generate_mapping("SC", 6, 2);  // {1,2},{5,6}: layers 3,4 unused
  auto rep = validate_mapping(m, 6, 2);
  CHECK(rep.ok);
  CHECK_FALSE(rep.coverage);
  CHECK(rep.skipped_teacher_layers == std::vector<int>{3, 4});
}

TEST_CASE("validation flags structural violations") {
  auto bad = explicit_mapping({{0, 2}, {3, 4}}, 6);  // 0 out of range
  auto rep = validate_mapping(bad, 6, 2);
  CHECK_FALSE(rep.ok);
  CHECK_FALSE(rep.violations.empty());

  auto wrong_count = explicit_mapping({{1, 2}}, 6);
  CHECK_FALSE(validate_mapping(wrong_count, 6, 2).ok);

  auto not_increasing = explicit_mapping({{2, 1}, {3, 4}}, 6);
  CHECK_FALSE(validate_mapping(not_increasing, 6, 2).ok);

  auto empty_entry = explicit_mapping({{}, {3, 4}}, 6);
  CHECK_FALSE(validate_mapping(empty_entry, 6, 2).ok);

  auto too_high = explicit_mapping({{1, 2}, {3, 7}}, 6);
  CHECK_FALSE(validate_mapping(too_high, 6, 2).ok);
}

TEST_CASE("fusion parameter shapes follow group sizes") {
  auto m = generate_mapping("RC", 6, 2);  // k = 3 per student layer
  auto shapes = fusion_param_shapes(m, 4);
  REQUIRE(shapes.size() == 2);
  CHECK(shapes[0].weight == std::vector<int>{4, 12});
  CHECK(shapes[0].bias == std::vector<int>{4});
  CHECK(shapes[1].weight == std::vector<int>{4, 12});

  auto cc5 = generate_mapping("CC", 5, 2);  // k = 3 then k = 2
  auto s5 = fusion_param_shapes(cc5, 4);
  CHECK(s5[0].weight == std::vector<int>{4, 12});
  CHECK(s5[1].weight == std::vector<int>{4, 8});
}

TEST_CASE("fusion parameter count sums weight and bias sizes") {
  auto m = generate_mapping("RC", 6, 2);
  // per layer: 4*12 + 4 = 52, two layers
  CHECK(fusion_param_count(m, 4) == 104);

  auto cc = generate_mapping("CC", 6, 2);
  // k=2 each: 2 * (512*1024 + 512) = 1,049,600
  CHECK(fusion_param_count(cc, 512) == 1049600);

  auto pkd = generate_mapping("PKD", 6, 2);
  // singletons: 2 * (8*8 + 8)
  CHECK(fusion_param_count(pkd, 8) == 144);
}
