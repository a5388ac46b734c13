#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ckd/errors.hpp"

namespace ckd {

// Assignment of teacher layers to student layers. entries[i] lists the
// 1-based teacher layer indices feeding student layer i+1, strictly ascending.
struct LayerMapping {
  int n_teacher = 0;
  int n_student = 0;
  std::string variant;  // "RC", "OC", "SC", "CC", "PKD", or "explicit"
  std::vector<std::vector<int>> entries;
};

// Built-in mapping families:
//   RC  - contiguous blocks covering all teacher layers, as equal as
//         possible, larger blocks first
//   OC  - overlapping windows of width 2*ceil(n_t/(n_s+1)) (clamped to n_t),
//         starts evenly spaced
//   SC  - disjoint windows of width floor(n_t/(n_s+1)), first anchored at the
//         start, last at the end, interior evenly spaced
//   CC  - the RC blocks thinned to every second layer
//   PKD - one teacher layer per student layer: floor(i * n_t / n_s)
LayerMapping generate_mapping(const std::string& variant, int n_teacher, int n_student);

// Verbatim index lists, one per student layer; overrides any variant.
LayerMapping explicit_mapping(std::vector<std::vector<int>> entries, int n_teacher);

struct MappingReport {
  bool ok = false;
  std::vector<std::string> violations;
  bool coverage = false;                    // union of entries == 1..n_teacher
  std::vector<int> skipped_teacher_layers;  // teacher layers no entry uses
};

// Structural checks against the given depths: entry count, index bounds,
// strict ascending order, non-emptiness. Violations are reported, not thrown.
MappingReport validate_mapping(const LayerMapping& m, int n_teacher, int n_student);

// Shapes of the fusion parameters implied by the mapping for width d:
// one [d, k_i * d] weight and one [d] bias per student layer.
struct FusionShape {
  std::vector<int> weight;  // [d, k_i * d]
  std::vector<int> bias;    // [d]
};
std::vector<FusionShape> fusion_param_shapes(const LayerMapping& m, int d_model);

// Trainable parameters the fusion layers add: sum_i d*(k_i*d) + d.
std::int64_t fusion_param_count(const LayerMapping& m, int d_model);

}  // namespace ckd
