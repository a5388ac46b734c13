#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "ckd/errors.hpp"
#include "ckd/real.hpp"

namespace ckd {

using Shape = std::vector<int>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Storage {
  Shape shape;
  std::vector<real> data;
  std::vector<real> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  bool on_tape = false;  // true while a producing node lives on the active tape
};

}  // namespace detail

// Dense row-major tensor. Copies are shallow: they alias the same storage,
// which is what lets tape closures hold on to operands cheaply.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, real value);
  static Tensor from(Shape shape, std::vector<real> values);
  static Tensor scalar(real value);
  // Uniform / normal fills, deterministic given the generator state.
  static Tensor rand_uniform(Shape shape, std::mt19937& rng, real lo, real hi);
  static Tensor rand_normal(Shape shape, std::mt19937& rng, real mean, real stddev);

  bool defined() const { return st_ != nullptr; }
  const Shape& shape() const;
  int rank() const;
  int dim(int axis) const;
  std::int64_t size() const;

  real* data();
  const real* data() const;
  std::vector<real>& vec();
  const std::vector<real>& vec() const;
  real item() const;  // requires size() == 1

  bool requires_grad() const;
  Tensor& set_requires_grad(bool value);
  bool on_tape() const;

  bool has_grad() const;
  real* grad();
  const real* grad() const;
  const std::vector<real>& grad_vec() const;
  void ensure_grad();                         // allocate zero-filled grad buffer
  void accumulate_grad(const real* g, std::int64_t n);
  void drop_grad();                           // absent grad means zero

  Tensor clone() const;  // deep copy of data, leaf, no grad

  std::shared_ptr<detail::Storage> storage() const { return st_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Storage> st) : st_(std::move(st)) {}
  std::shared_ptr<detail::Storage> st_;
  friend class Tape;
};

// True when gradients must flow into t: either a trainable leaf or an
// intermediate produced on the active tape.
bool needs_grad(Tensor t);

// Reverse-mode tape. Nodes are appended in execution order, which is a
// topological order by construction; backward() replays them once in reverse
// and then resets the tape.
class Tape {
 public:
  Tape() = default;
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  // Called by ops: marks `output` as tape-resident and appends the node.
  void record(Tensor output, std::function<void()> backward_fn);

  // Seeds d(loss)/d(loss) = 1 and runs all nodes in reverse order. The loss
  // must be a scalar produced on this tape. Consumes the tape.
  void backward(Tensor loss);

  std::size_t node_count() const { return nodes_.size(); }
  void reset();

 private:
  struct Node {
    std::shared_ptr<detail::Storage> out;
    std::function<void()> fn;
  };
  std::vector<Node> nodes_;
  friend class TapeScope;
};

// Activates a tape for the current thread for the scope's lifetime. Ops
// record onto the active tape only; with no scope open they are pure compute.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;
};

// ---- operations ------------------------------------------------------------
// All ops allocate fresh output storage (no views) and record a backward
// closure when an input needs gradients and a tape is active.

// b must have the same shape as a, or a shape that is a suffix of a's
// (bias over the last axis, positional table over [S, d], ...).
Tensor add(Tensor a, Tensor b);
Tensor sub(Tensor a, Tensor b);
Tensor mul(Tensor a, Tensor b);
Tensor scale(Tensor a, double factor);
Tensor relu(Tensor a);

Tensor reshape(Tensor a, Shape new_shape);
Tensor transpose_last2(Tensor a);
// [B, S, H*dh] -> [B, H, S, dh] and back.
Tensor split_heads(Tensor a, int n_heads);
Tensor merge_heads(Tensor a);
Tensor concat_lastdim(const std::vector<Tensor>& parts);
Tensor slice_lastdim(Tensor a, int offset, int length);

// 2D x 2D, ND x 2D (leading dims flattened), or batched ND x ND with equal
// leading dims.
Tensor matmul(Tensor a, Tensor b);

Tensor softmax_lastdim(Tensor a);
Tensor log_softmax_lastdim(Tensor a);
// scores: [B, H, Q, K]; valid: [B, Q, K] with entries in {0, 1}, not
// differentiated. Rows normalize over valid keys only; invalid keys get
// exactly zero. A fully invalid row yields zeros.
Tensor masked_softmax_lastdim(Tensor scores, Tensor valid);
Tensor layer_norm(Tensor x, Tensor gamma, Tensor beta, double eps);

Tensor sum_all(Tensor a);   // -> shape {1}
Tensor mean_all(Tensor a);  // -> shape {1}
Tensor sum_lastdim(Tensor a);
// x: [..., V], ids: one index per leading position -> [...]
Tensor gather_lastdim(Tensor x, const std::vector<int>& ids);
// table: [V, d], ids: batch*seq entries -> [batch, seq, d]
Tensor embedding_lookup(Tensor table, const std::vector<int>& ids, int batch, int seq);
// Inverted dropout; p == 0 is the identity and consumes no randomness.
Tensor dropout(Tensor a, double p, std::mt19937& rng);

// Deep copy that participates in no gradient flow.
Tensor detach(Tensor a);

// Convenience: computes loss.backward() on the active tape.
void backward(Tensor loss);

}  // namespace ckd
