#include "ckd/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <mutex>
#include <sstream>
#include <utility>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace ckd {

namespace {

using Mat = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<Mat>;
using CMatMap = Eigen::Map<const Mat>;

thread_local Tape* g_active_tape = nullptr;

// Activation buffers are a few hundred KB and churn once per op; with glibc
// defaults they sit above the mmap threshold, so every tensor costs an
// mmap/munmap round trip plus fresh page faults. Keep them on the free list.
void tune_allocator() {
#if defined(__GLIBC__)
  static std::once_flag once;
  std::call_once(once, [] {
    mallopt(M_MMAP_THRESHOLD, 64 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 64 * 1024 * 1024);
  });
#endif
}

std::shared_ptr<detail::Storage> make_storage(Shape shape, real fill) {
  tune_allocator();
  auto st = std::make_shared<detail::Storage>();
  const std::int64_t n = numel(shape);
  st->shape = std::move(shape);
  st->data.assign(static_cast<std::size_t>(n), fill);
  return st;
}

void check_positive_dims(const Shape& shape, const char* who) {
  for (int d : shape) {
    if (d <= 0) {
      throw DimError(std::string(who) + ": dimensions must be positive, got " + shape_str(shape));
    }
  }
}

// b broadcasts over a when b's shape equals a trailing slice of a's shape.
bool is_suffix_shape(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  return std::equal(b.rbegin(), b.rend(), a.rbegin());
}

void require_finite_lastdim(Tensor t, const char* who) {
  const real* p = t.data();
  const std::int64_t n = t.size();
  for (std::int64_t i = 0; i < n; ++i) {
    if (!std::isfinite(p[i])) {
      throw NumericError(std::string(who) + ": non-finite input at flat index " + std::to_string(i));
    }
  }
}

}  // namespace

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---- Tensor -----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape) {
  check_positive_dims(shape, "zeros");
  return Tensor(make_storage(std::move(shape), real(0)));
}

Tensor Tensor::full(Shape shape, real value) {
  check_positive_dims(shape, "full");
  return Tensor(make_storage(std::move(shape), value));
}

Tensor Tensor::from(Shape shape, std::vector<real> values) {
  check_positive_dims(shape, "from");
  if (numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw DimError("from: shape " + shape_str(shape) + " wants " + std::to_string(numel(shape)) +
                   " values, got " + std::to_string(values.size()));
  }
  auto st = std::make_shared<detail::Storage>();
  st->shape = std::move(shape);
  st->data = std::move(values);
  return Tensor(std::move(st));
}

Tensor Tensor::scalar(real value) { return full({1}, value); }

Tensor Tensor::rand_uniform(Shape shape, std::mt19937& rng, real lo, real hi) {
  Tensor t = zeros(std::move(shape));
  std::uniform_real_distribution<real> dist(lo, hi);
  for (auto& v : t.vec()) v = dist(rng);
  return t;
}

Tensor Tensor::rand_normal(Shape shape, std::mt19937& rng, real mean, real stddev) {
  Tensor t = zeros(std::move(shape));
  std::normal_distribution<real> dist(mean, stddev);
  for (auto& v : t.vec()) v = dist(rng);
  return t;
}

const Shape& Tensor::shape() const { return st_->shape; }
int Tensor::rank() const { return static_cast<int>(st_->shape.size()); }
int Tensor::dim(int axis) const { return st_->shape.at(static_cast<std::size_t>(axis)); }
std::int64_t Tensor::size() const { return st_ ? static_cast<std::int64_t>(st_->data.size()) : 0; }

real* Tensor::data() { return st_->data.data(); }
const real* Tensor::data() const { return st_->data.data(); }
std::vector<real>& Tensor::vec() { return st_->data; }
const std::vector<real>& Tensor::vec() const { return st_->data; }

real Tensor::item() const {
  if (!defined() || size() != 1) {
    throw ContractError("item: tensor is not scalar, shape " + (defined() ? shape_str(shape()) : std::string("<undefined>")));
  }
  return st_->data[0];
}

bool Tensor::requires_grad() const { return st_ && st_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool value) {
  st_->requires_grad = value;
  return *this;
}

bool Tensor::on_tape() const { return st_ && st_->on_tape; }

bool Tensor::has_grad() const { return st_ && !st_->grad.empty(); }
real* Tensor::grad() { return st_->grad.data(); }
const real* Tensor::grad() const { return st_->grad.data(); }
const std::vector<real>& Tensor::grad_vec() const { return st_->grad; }

void Tensor::ensure_grad() {
  if (st_->grad.empty()) st_->grad.assign(st_->data.size(), real(0));
}

void Tensor::accumulate_grad(const real* g, std::int64_t n) {
  ensure_grad();
  real* dst = st_->grad.data();
  for (std::int64_t i = 0; i < n; ++i) dst[i] += g[i];
}

void Tensor::drop_grad() {
  if (st_) st_->grad.clear();
}

Tensor Tensor::clone() const {
  auto st = std::make_shared<detail::Storage>();
  st->shape = st_->shape;
  st->data = st_->data;
  return Tensor(std::move(st));
}

bool needs_grad(Tensor t) { return t.requires_grad() || t.on_tape(); }

// ---- Tape -------------------------------------------------------------------

Tape* Tape::active() { return g_active_tape; }

Tape::~Tape() { reset(); }

void Tape::record(Tensor output, std::function<void()> backward_fn) {
  output.st_->on_tape = true;
  nodes_.push_back(Node{output.st_, std::move(backward_fn)});
}

void Tape::reset() {
  for (auto& node : nodes_) node.out->on_tape = false;
  nodes_.clear();
}

void Tape::backward(Tensor loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.on_tape()) {
    throw ContractError("backward: loss was not produced on this tape");
  }
  // Ops must not re-record while closures replay.
  Tape* prev = g_active_tape;
  g_active_tape = nullptr;
  loss.st_->grad.assign(1, real(1));
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    it->fn();
  }
  g_active_tape = prev;
  reset();
}

TapeScope::TapeScope(Tape& tape) {
  if (g_active_tape != nullptr) {
    throw ContractError("TapeScope: a tape is already active on this thread");
  }
  g_active_tape = &tape;
}

TapeScope::~TapeScope() { g_active_tape = nullptr; }

void backward(Tensor loss) {
  if (g_active_tape == nullptr) {
    throw ContractError("backward: no active tape");
  }
  g_active_tape->backward(loss);
}

// ---- elementwise ------------------------------------------------------------

Tensor add(Tensor a, Tensor b) {
  if (!is_suffix_shape(a.shape(), b.shape())) {
    throw DimError("add: shape " + shape_str(b.shape()) + " does not broadcast over " + shape_str(a.shape()));
  }
  const std::int64_t an = a.size(), bn = b.size();
  Tensor out = Tensor::zeros(a.shape());
  const real* pa = a.data();
  const real* pb = b.data();
  real* po = out.data();
  for (std::int64_t r = 0; r < an; r += bn) {
    for (std::int64_t i = 0; i < bn; ++i) po[r + i] = pa[r + i] + pb[i];
  }

  Tape* tape = Tape::active();
  if (tape && (needs_grad(a) || needs_grad(b))) {
    tape->record(out, [a, b, out, an, bn]() mutable {
      if (!out.has_grad()) return;
      const real* g = out.grad();
      if (needs_grad(a)) a.accumulate_grad(g, an);
      if (needs_grad(b)) {
        b.ensure_grad();
        real* gb = b.grad();
        for (std::int64_t r = 0; r < an; r += bn) {
          for (std::int64_t i = 0; i < bn; ++i) gb[i] += g[r + i];
        }
      }
    });
  }
  return out;
}

Tensor sub(Tensor a, Tensor b) {
  if (a.shape() != b.shape()) {
    throw DimError("sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::int64_t n = a.size();
  Tensor out = Tensor::zeros(a.shape());
  const real* pa = a.data();
  const real* pb = b.data();
  real* po = out.data();
  for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];

  Tape* tape = Tape::active();
  if (tape && (needs_grad(a) || needs_grad(b))) {
    tape->record(out, [a, b, out, n]() mutable {
      if (!out.has_grad()) return;
      const real* g = out.grad();
      if (needs_grad(a)) a.accumulate_grad(g, n);
      if (needs_grad(b)) {
        b.ensure_grad();
        real* gb = b.grad();
        for (std::int64_t i = 0; i < n; ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

Tensor mul(Tensor a, Tensor b) {
  if (!is_suffix_shape(a.shape(), b.shape())) {
    throw DimError("mul: shape " + shape_str(b.shape()) + " does not broadcast over " + shape_str(a.shape()));
  }
  const std::int64_t an = a.size(), bn = b.size();
  Tensor out = Tensor::zeros(a.shape());
  const real* pa = a.data();
  const real* pb = b.data();
  real* po = out.data();
  for (std::int64_t r = 0; r < an; r += bn) {
    for (std::int64_t i = 0; i < bn; ++i) po[r + i] = pa[r + i] * pb[i];
  }

  Tape* tape = Tape::active();
  if (tape && (needs_grad(a) || needs_grad(b))) {
    tape->record(out, [a, b, out, an, bn]() mutable {
      if (!out.has_grad()) return;
      const real* g = out.grad();
      const real* pa = a.data();
      const real* pb = b.data();
      if (needs_grad(a)) {
        a.ensure_grad();
        real* ga = a.grad();
        for (std::int64_t r = 0; r < an; r += bn) {
          for (std::int64_t i = 0; i < bn; ++i) ga[r + i] += g[r + i] * pb[i];
        }
      }
      if (needs_grad(b)) {
        b.ensure_grad();
        real* gb = b.grad();
        for (std::int64_t r = 0; r < an; r += bn) {
          for (std::int64_t i = 0; i < bn; ++i) gb[i] += g[r + i] * pa[r + i];
        }
      }
    });
  }
  return out;
}

Tensor scale(Tensor a, double factor) {
  const std::int64_t n = a.size();
  const real f = static_cast<real>(factor);
  Tensor out = Tensor::zeros(a.shape());
  const real* pa = a.data();
  real* po = out.data();
  for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] * f;

  Tape* tape = Tape::active();
  if (tape && needs_grad(a)) {
    tape->record(out, [a, out, n, f]() mutable {
      if (!out.has_grad()) return;
      const real* g = out.grad();
      a.ensure_grad();
      real* ga = a.grad();
      for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i] * f;
    });
  }
  return out;
}

Tensor relu(Tensor a) {
  const std::int64_t n = a.size();
  Tensor out = Tensor::zeros(a.shape());
  const real* pa = a.data();
  real* po = out.data();
  for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] > real(0) ? pa[i] : real(0);

  Tape* tape = Tape::active();
  if (tape && needs_grad(a)) {
    tape->record(out, [a, out, n]() mutable {
      if (!out.has_grad()) return;
      const real* g = out.grad();
      const real* pa = a.data();
      a.ensure_grad();
      real* ga = a.grad();
      for (std::int64_t i = 0; i < n; ++i) {
        if (pa[i] > real(0)) ga[i] += g[i];
      }
    });
  }
  return out;
}

// ---- shape ops --------------------------------------------------------------

Tensor reshape(Tensor a, Shape new_shape) {
  check_positive_dims(new_shape, "reshape");
  if (numel(new_shape) != a.size()) {
    throw DimError("reshape: cannot reshape " + shape_str(a.shape()) + " to " + shape_str(new_shape));
  }
  Tensor out = Tensor::from(std::move(new_shape), a.vec());

  Tape* tape = Tape::active();
  if (tape && needs_grad(a)) {
    const std::int64_t n = a.size();
    tape->record(out, [a, out, n]() mutable {
      if (!out.has_grad()) return;
      a.accumulate_grad(out.grad(), n);
    });
  }
  return out;
}

Tensor transpose_last2(Tensor a) {
  if (a.rank() < 2) {
    throw DimError("transpose_last2: rank >= 2 required, got " + shape_str(a.shape()));
  }
  Shape out_shape = a.shape();
  const int m = out_shape[out_shape.size() - 2];
  const int n = out_shape[out_shape.size() - 1];
  std::swap(out_shape[out_shape.size() - 2], out_shape[out_shape.size() - 1]);
  const std::int64_t batches = a.size() / (static_cast<std::int64_t>(m) * n);

  Tensor out = Tensor::zeros(out_shape);
  const real* pa = a.data();
  real* po = out.data();
  for (std::int64_t b = 0; b < batches; ++b) {
    const real* src = pa + b * m * n;
    real* dst = po + b * m * n;
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
  }

  Tape* tape = Tape::active();
  if (tape && needs_grad(a)) {
    tape->record(out, [a, out, batches, m, n]() mutable {
      if (!out.has_grad()) return;
      const real* g = out.grad();
      a.ensure_grad();
      real* ga = a.grad();
      for (std::int64_t b = 0; b < batches; ++b) {
        const real* gsrc = g + b * m * n;
        real* gdst = ga + b * m * n;
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) gdst[i * n + j] += gsrc[j * m + i];
      }
    });
  }
  return out;
}

Tensor split_heads(Tensor a, int n_heads) {
  if (a.rank() != 3) {
    throw DimError("split_heads: expected [batch, seq, width], got " + shape_str(a.shape()));
  }
  const int B = a.dim(0), S = a.dim(1), W = a.dim(2);
  if (n_heads <= 0 || W % n_heads != 0) {
    throw DimError("split_heads: width " + std::to_string(W) + " not divisible by heads " + std::to_string(n_heads));
  }
  const int dh = W / n_heads;
  Tensor out = Tensor::zeros({B, n_heads, S, dh});
  const real* pa = a.data();
  real* po = out.data();
  for (int b = 0; b < B; ++b)
    for (int h = 0; h < n_heads; ++h)
      for (int s = 0; s < S; ++s) {
        const real* src = pa + (static_cast<std::int64_t>(b) * S + s) * W + h * dh;
        real* dst = po + ((static_cast<std::int64_t>(b) * n_heads + h) * S + s) * dh;
        std::memcpy(dst, src, sizeof(real) * static_cast<std::size_t>(dh));
      }

  Tape* tape = Tape::active();
  if (tape && needs_grad(a)) {
    tape->record(out, [a, out, B, S, W, n_heads, dh]() mutable {
      if (!out.has_grad()) return;
      const real* g = out.grad();
      a.ensure_grad();
      real* ga = a.grad();
      for (int b = 0; b < B; ++b)
        for (int h = 0; h < n_heads; ++h)
          for (int s = 0; s < S; ++s) {
            const real* gsrc = g + ((static_cast<std::int64_t>(b) * n_heads + h) * S + s) * dh;
            real* gdst = ga + (static_cast<std::int64_t>(b) * S + s) * W + h * dh;
            for (int d = 0; d < dh; ++d) gdst[d] += gsrc[d];
          }
    });
  }
  return out;
}

Tensor merge_heads(Tensor a) {
  if (a.rank() != 4) {
    throw DimError("merge_heads: expected [batch, heads, seq, dh], got " + shape_str(a.shape()));
  }
  const int B = a.dim(0), H = a.dim(1), S = a.dim(2), dh = a.dim(3);
  const int W = H * dh;
  Tensor out = Tensor::zeros({B, S, W});
  const real* pa = a.data();
  real* po = out.data();
  for (int b = 0; b < B; ++b)
    for (int h = 0; h < H; ++h)
      for (int s = 0; s < S; ++s) {
        const real* src = pa + ((static_cast<std::int64_t>(b) * H + h) * S + s) * dh;
        real* dst = po + (static_cast<std::int64_t>(b) * S + s) * W + h * dh;
        std::memcpy(dst, src, sizeof(real) * static_cast<std::size_t>(dh));
      }

  Tape* tape = Tape::active();
  if (tape && needs_grad(a)) {
    tape->record(out, [a, out, B, H, S, dh, W]() mutable {
      if (!out.has_grad()) return;
      const real* g = out.grad();
      a.ensure_grad();
      real* ga = a.grad();
      for (int b = 0; b < B; ++b)
        for (int h = 0; h < H; ++h)
          for (int s = 0; s < S; ++s) {
            const real* gsrc = g + (static_cast<std::int64_t>(b) * S + s) * W + h * dh;
            real* gdst = ga + ((static_cast<std::int64_t>(b) * H + h) * S + s) * dh;
            for (int d = 0; d < dh; ++d) gdst[d] += gsrc[d];
          }
    });
  }
  return out;
}

Tensor concat_lastdim(const std::vector<Tensor>& parts) {
  if (parts.empty()) {
    throw ContractError("concat_lastdim: no parts");
  }
  const Shape& first = parts[0].shape();
  Shape lead(first.begin(), first.end() - 1);
  int total_last = 0;
  for (Tensor p : parts) {
    Shape plead(p.shape().begin(), p.shape().end() - 1);
    if (p.rank() < 1 || plead != lead) {
      throw DimError("concat_lastdim: leading shape mismatch " + shape_str(parts[0].shape()) + " vs " +
                     shape_str(p.shape()));
    }
    total_last += p.shape().back();
  }
  Shape out_shape = lead;
  out_shape.push_back(total_last);
  const std::int64_t rows = numel(lead);

  Tensor out = Tensor::zeros(out_shape);
  real* po = out.data();
  int off = 0;
  for (Tensor p : parts) {
    const int w = p.shape().back();
    const real* pp = p.data();
    for (std::int64_t r = 0; r < rows; ++r) {
      std::memcpy(po + r * total_last + off, pp + r * w, sizeof(real) * static_cast<std::size_t>(w));
    }
    off += w;
  }

  Tape* tape = Tape::active();
  bool any = false;
  for (Tensor p : parts) any = any || needs_grad(p);
  if (tape && any) {
    std::vector<Tensor> held = parts;
    tape->record(out, [held, out, rows, total_last]() mutable {
      if (!out.has_grad()) return;
      const real* g = out.grad();
      int off = 0;
      for (Tensor& p : held) {
        const int w = p.shape().back();
        if (needs_grad(p)) {
          p.ensure_grad();
          real* gp = p.grad();
          for (std::int64_t r = 0; r < rows; ++r) {
            const real* gs = g + r * total_last + off;
            real* gd = gp + r * w;
            for (int j = 0; j < w; ++j) gd[j] += gs[j];
          }
        }
        off += w;
      }
    });
  }
  return out;
}

Tensor slice_lastdim(Tensor a, int offset, int length) {
  const int w = a.shape().back();
  if (offset < 0 || length <= 0 || offset + length > w) {
    throw DimError("slice_lastdim: slice [" + std::to_string(offset) + ", " + std::to_string(offset + length) +
                   ") out of range for width " + std::to_string(w));
  }
  Shape out_shape = a.shape();
  out_shape.back() = length;
  const std::int64_t rows = a.size() / w;

  Tensor out = Tensor::zeros(out_shape);
  const real* pa = a.data();
  real* po = out.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    std::memcpy(po + r * length, pa + r * w + offset, sizeof(real) * static_cast<std::size_t>(length));
  }

  Tape* tape = Tape::active();
  if (tape && needs_grad(a)) {
    tape->record(out, [a, out, rows, w, offset, length]() mutable {
      if (!out.has_grad()) return;
      const real* g = out.grad();
      a.ensure_grad();
      real* ga = a.grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        const real* gs = g + r * length;
        real* gd = ga + r * w + offset;
        for (int j = 0; j < length; ++j) gd[j] += gs[j];
      }
    });
  }
  return out;
}

// ---- matmul -----------------------------------------------------------------

Tensor matmul(Tensor a, Tensor b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw DimError("matmul: rank >= 2 required, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const int k_a = a.shape()[a.rank() - 1];
  const int m = a.shape()[a.rank() - 2];
  const int k_b = b.shape()[b.rank() - 2];
  const int n = b.shape()[b.rank() - 1];
  if (k_a != k_b) {
    throw DimError("matmul: inner dimensions differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const int k = k_a;

  if (b.rank() == 2) {
    // Flatten a's leading dims: [M, k] x [k, n].
    const std::int64_t M = a.size() / k;
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    out_shape.push_back(n);
    Tensor out = Tensor::zeros(out_shape);
    CMatMap A(a.data(), M, k);
    CMatMap B(b.data(), k, n);
    MatMap O(out.data(), M, n);
    O.noalias() = A * B;

    Tape* tape = Tape::active();
    if (tape && (needs_grad(a) || needs_grad(b))) {
      tape->record(out, [a, b, out, M, k, n]() mutable {
        if (!out.has_grad()) return;
        CMatMap G(out.grad(), M, n);
        if (needs_grad(a)) {
          a.ensure_grad();
          MatMap GA(a.grad(), M, k);
          CMatMap B(b.data(), k, n);
          GA.noalias() += G * B.transpose();
        }
        if (needs_grad(b)) {
          b.ensure_grad();
          MatMap GB(b.grad(), k, n);
          CMatMap A(a.data(), M, k);
          GB.noalias() += A.transpose() * G;
        }
      });
    }
    return out;
  }

  // Batched: equal leading dims.
  Shape lead_a(a.shape().begin(), a.shape().end() - 2);
  Shape lead_b(b.shape().begin(), b.shape().end() - 2);
  if (lead_a != lead_b) {
    throw DimError("matmul: batch dimensions differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::int64_t batches = numel(lead_a);
  Shape out_shape = lead_a;
  out_shape.push_back(m);
  out_shape.push_back(n);

  Tensor out = Tensor::zeros(out_shape);
  for (std::int64_t i = 0; i < batches; ++i) {
    CMatMap A(a.data() + i * m * k, m, k);
    CMatMap B(b.data() + i * k * n, k, n);
    MatMap O(out.data() + i * m * n, m, n);
    O.noalias() = A * B;
  }

  Tape* tape = Tape::active();
  if (tape && (needs_grad(a) || needs_grad(b))) {
    tape->record(out, [a, b, out, batches, m, k, n]() mutable {
      if (!out.has_grad()) return;
      if (needs_grad(a)) a.ensure_grad();
      if (needs_grad(b)) b.ensure_grad();
      for (std::int64_t i = 0; i < batches; ++i) {
        CMatMap G(out.grad() + i * m * n, m, n);
        if (needs_grad(a)) {
          MatMap GA(a.grad() + i * m * k, m, k);
          CMatMap B(b.data() + i * k * n, k, n);
          GA.noalias() += G * B.transpose();
        }
        if (needs_grad(b)) {
          MatMap GB(b.grad() + i * k * n, k, n);
          CMatMap A(a.data() + i * m * k, m, k);
          GB.noalias() += A.transpose() * G;
        }
      }
    });
  }
  return out;
}

// ---- softmax family ---------------------------------------------------------

Tensor softmax_lastdim(Tensor a) {
  require_finite_lastdim(a, "softmax");
  const int w = a.shape().back();
  const std::int64_t rows = a.size() / w;
  Tensor out = Tensor::zeros(a.shape());
  const real* pa = a.data();
  real* po = out.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const real* x = pa + r * w;
    real* y = po + r * w;
    real mx = x[0];
    for (int j = 1; j < w; ++j) mx = std::max(mx, x[j]);
    real sum = 0;
    for (int j = 0; j < w; ++j) {
      y[j] = std::exp(x[j] - mx);
      sum += y[j];
    }
    const real inv = real(1) / sum;
    for (int j = 0; j < w; ++j) y[j] *= inv;
  }

  Tape* tape = Tape::active();
  if (tape && needs_grad(a)) {
    tape->record(out, [a, out, rows, w]() mutable {
      if (!out.has_grad()) return;
      const real* g = out.grad();
      const real* y = out.data();
      a.ensure_grad();
      real* ga = a.grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        const real* gr = g + r * w;
        const real* yr = y + r * w;
        real dot = 0;
        for (int j = 0; j < w; ++j) dot += gr[j] * yr[j];
        real* gar = ga + r * w;
        for (int j = 0; j < w; ++j) gar[j] += yr[j] * (gr[j] - dot);
      }
    });
  }
  return out;
}

Tensor log_softmax_lastdim(Tensor a) {
  require_finite_lastdim(a, "log_softmax");
  const int w = a.shape().back();
  const std::int64_t rows = a.size() / w;
  Tensor out = Tensor::zeros(a.shape());
  const real* pa = a.data();
  real* po = out.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const real* x = pa + r * w;
    real* y = po + r * w;
    real mx = x[0];
    for (int j = 1; j < w; ++j) mx = std::max(mx, x[j]);
    real sum = 0;
    for (int j = 0; j < w; ++j) sum += std::exp(x[j] - mx);
    const real lse = mx + std::log(sum);
    for (int j = 0; j < w; ++j) y[j] = x[j] - lse;
  }

  Tape* tape = Tape::active();
  if (tape && needs_grad(a)) {
    tape->record(out, [a, out, rows, w]() mutable {
      if (!out.has_grad()) return;
      const real* g = out.grad();
      const real* y = out.data();
      a.ensure_grad();
      real* ga = a.grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        const real* gr = g + r * w;
        const real* yr = y + r * w;
        real gsum = 0;
        for (int j = 0; j < w; ++j) gsum += gr[j];
        real* gar = ga + r * w;
        for (int j = 0; j < w; ++j) gar[j] += gr[j] - std::exp(yr[j]) * gsum;
      }
    });
  }
  return out;
}

Tensor masked_softmax_lastdim(Tensor scores, Tensor valid) {
  if (scores.rank() != 4) {
    throw DimError("masked_softmax: scores must be [B, H, Q, K], got " + shape_str(scores.shape()));
  }
  const int B = scores.dim(0), H = scores.dim(1), Q = scores.dim(2), K = scores.dim(3);
  if (valid.rank() != 3 || valid.dim(0) != B || valid.dim(1) != Q || valid.dim(2) != K) {
    throw DimError("masked_softmax: valid mask " + shape_str(valid.shape()) + " incompatible with scores " +
                   shape_str(scores.shape()));
  }

  Tensor out = Tensor::zeros(scores.shape());
  const real* ps = scores.data();
  const real* pm = valid.data();
  real* po = out.data();
  for (int b = 0; b < B; ++b) {
    for (int h = 0; h < H; ++h) {
      for (int q = 0; q < Q; ++q) {
        const real* x = ps + ((static_cast<std::int64_t>(b) * H + h) * Q + q) * K;
        const real* mrow = pm + (static_cast<std::int64_t>(b) * Q + q) * K;
        real* y = po + ((static_cast<std::int64_t>(b) * H + h) * Q + q) * K;
        real mx = -std::numeric_limits<real>::infinity();
        for (int j = 0; j < K; ++j) {
          if (mrow[j] != real(0)) {
            if (!std::isfinite(x[j])) {
              throw NumericError("masked_softmax: non-finite score at a valid position");
            }
            mx = std::max(mx, x[j]);
          }
        }
        if (mx == -std::numeric_limits<real>::infinity()) continue;  // fully masked row -> zeros
        real sum = 0;
        for (int j = 0; j < K; ++j) {
          if (mrow[j] != real(0)) {
            y[j] = std::exp(x[j] - mx);
            sum += y[j];
          }
        }
        const real inv = real(1) / sum;
        for (int j = 0; j < K; ++j) y[j] *= inv;
      }
    }
  }

  Tape* tape = Tape::active();
  if (tape && needs_grad(scores)) {
    tape->record(out, [scores, out, valid, B, H, Q, K]() mutable {
      if (!out.has_grad()) return;
      const real* g = out.grad();
      const real* y = out.data();
      const real* pm = valid.data();
      scores.ensure_grad();
      real* gs = scores.grad();
      for (int b = 0; b < B; ++b) {
        for (int h = 0; h < H; ++h) {
          for (int q = 0; q < Q; ++q) {
            const std::int64_t base = ((static_cast<std::int64_t>(b) * H + h) * Q + q) * K;
            const real* mrow = pm + (static_cast<std::int64_t>(b) * Q + q) * K;
            const real* gr = g + base;
            const real* yr = y + base;
            real dot = 0;
            for (int j = 0; j < K; ++j) {
              if (mrow[j] != real(0)) dot += gr[j] * yr[j];
            }
            real* gsr = gs + base;
            for (int j = 0; j < K; ++j) {
              if (mrow[j] != real(0)) gsr[j] += yr[j] * (gr[j] - dot);
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor layer_norm(Tensor x, Tensor gamma, Tensor beta, double eps) {
  const int d = x.shape().back();
  if (gamma.rank() != 1 || gamma.dim(0) != d || beta.rank() != 1 || beta.dim(0) != d) {
    throw DimError("layer_norm: gamma " + shape_str(gamma.shape()) + " / beta " + shape_str(beta.shape()) +
                   " must be [" + std::to_string(d) + "]");
  }
  const std::int64_t rows = x.size() / d;
  Tensor out = Tensor::zeros(x.shape());
  // Normalized values are kept for the backward pass.
  std::vector<real> norm(static_cast<std::size_t>(x.size()));
  std::vector<real> inv_std(static_cast<std::size_t>(rows));

  const real* px = x.data();
  const real* pg = gamma.data();
  const real* pb = beta.data();
  real* po = out.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const real* xr = px + r * d;
    real mean = 0;
    for (int j = 0; j < d; ++j) mean += xr[j];
    mean /= real(d);
    real var = 0;
    for (int j = 0; j < d; ++j) {
      const real c = xr[j] - mean;
      var += c * c;
    }
    var /= real(d);
    const real inv = real(1) / std::sqrt(var + static_cast<real>(eps));
    inv_std[static_cast<std::size_t>(r)] = inv;
    real* nr = norm.data() + r * d;
    real* yr = po + r * d;
    for (int j = 0; j < d; ++j) {
      nr[j] = (xr[j] - mean) * inv;
      yr[j] = pg[j] * nr[j] + pb[j];
    }
  }

  Tape* tape = Tape::active();
  if (tape && (needs_grad(x) || needs_grad(gamma) || needs_grad(beta))) {
    auto norm_p = std::make_shared<std::vector<real>>(std::move(norm));
    auto inv_p = std::make_shared<std::vector<real>>(std::move(inv_std));
    tape->record(out, [x, gamma, beta, out, norm_p, inv_p, rows, d]() mutable {
      if (!out.has_grad()) return;
      const real* g = out.grad();
      const real* pg = gamma.data();
      const real* nr_all = norm_p->data();
      if (needs_grad(gamma)) gamma.ensure_grad();
      if (needs_grad(beta)) beta.ensure_grad();
      if (needs_grad(x)) x.ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        const real* gr = g + r * d;
        const real* nr = nr_all + r * d;
        if (needs_grad(gamma)) {
          real* gg = gamma.grad();
          for (int j = 0; j < d; ++j) gg[j] += gr[j] * nr[j];
        }
        if (needs_grad(beta)) {
          real* gb = beta.grad();
          for (int j = 0; j < d; ++j) gb[j] += gr[j];
        }
        if (needs_grad(x)) {
          const real inv = (*inv_p)[static_cast<std::size_t>(r)];
          real mean_gy = 0, mean_gyn = 0;
          for (int j = 0; j < d; ++j) {
            const real gy = gr[j] * pg[j];
            mean_gy += gy;
            mean_gyn += gy * nr[j];
          }
          mean_gy /= real(d);
          mean_gyn /= real(d);
          real* gx = x.grad() + r * d;
          for (int j = 0; j < d; ++j) {
            const real gy = gr[j] * pg[j];
            gx[j] += inv * (gy - mean_gy - nr[j] * mean_gyn);
          }
        }
      }
    });
  }
  return out;
}

// ---- reductions & indexing --------------------------------------------------

Tensor sum_all(Tensor a) {
  const std::int64_t n = a.size();
  const real* pa = a.data();
  real s = 0;
  for (std::int64_t i = 0; i < n; ++i) s += pa[i];
  Tensor out = Tensor::scalar(s);

  Tape* tape = Tape::active();
  if (tape && needs_grad(a)) {
    tape->record(out, [a, out, n]() mutable {
      if (!out.has_grad()) return;
      const real g = out.grad()[0];
      a.ensure_grad();
      real* ga = a.grad();
      for (std::int64_t i = 0; i < n; ++i) ga[i] += g;
    });
  }
  return out;
}

Tensor mean_all(Tensor a) {
  const std::int64_t n = a.size();
  const real* pa = a.data();
  real s = 0;
  for (std::int64_t i = 0; i < n; ++i) s += pa[i];
  Tensor out = Tensor::scalar(s / real(n));

  Tape* tape = Tape::active();
  if (tape && needs_grad(a)) {
    tape->record(out, [a, out, n]() mutable {
      if (!out.has_grad()) return;
      const real g = out.grad()[0] / real(n);
      a.ensure_grad();
      real* ga = a.grad();
      for (std::int64_t i = 0; i < n; ++i) ga[i] += g;
    });
  }
  return out;
}

Tensor sum_lastdim(Tensor a) {
  if (a.rank() < 2) {
    throw DimError("sum_lastdim: rank >= 2 required, got " + shape_str(a.shape()));
  }
  const int w = a.shape().back();
  const std::int64_t rows = a.size() / w;
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  Tensor out = Tensor::zeros(out_shape);
  const real* pa = a.data();
  real* po = out.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    real s = 0;
    const real* xr = pa + r * w;
    for (int j = 0; j < w; ++j) s += xr[j];
    po[r] = s;
  }

  Tape* tape = Tape::active();
  if (tape && needs_grad(a)) {
    tape->record(out, [a, out, rows, w]() mutable {
      if (!out.has_grad()) return;
      const real* g = out.grad();
      a.ensure_grad();
      real* ga = a.grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        real* gr = ga + r * w;
        for (int j = 0; j < w; ++j) gr[j] += g[r];
      }
    });
  }
  return out;
}

Tensor gather_lastdim(Tensor x, const std::vector<int>& ids) {
  if (x.rank() < 2) {
    throw DimError("gather_lastdim: rank >= 2 required, got " + shape_str(x.shape()));
  }
  const int w = x.shape().back();
  const std::int64_t rows = x.size() / w;
  if (static_cast<std::int64_t>(ids.size()) != rows) {
    throw DimError("gather_lastdim: " + std::to_string(rows) + " rows but " + std::to_string(ids.size()) + " indices");
  }
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= w) {
      throw DataError("gather_lastdim: index " + std::to_string(ids[i]) + " out of range [0, " + std::to_string(w) +
                      ") at row " + std::to_string(i));
    }
  }
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  Tensor out = Tensor::zeros(out_shape);
  const real* px = x.data();
  real* po = out.data();
  for (std::int64_t r = 0; r < rows; ++r) po[r] = px[r * w + ids[static_cast<std::size_t>(r)]];

  Tape* tape = Tape::active();
  if (tape && needs_grad(x)) {
    auto ids_p = std::make_shared<std::vector<int>>(ids);
    tape->record(out, [x, out, ids_p, rows, w]() mutable {
      if (!out.has_grad()) return;
      const real* g = out.grad();
      x.ensure_grad();
      real* gx = x.grad();
      for (std::int64_t r = 0; r < rows; ++r) gx[r * w + (*ids_p)[static_cast<std::size_t>(r)]] += g[r];
    });
  }
  return out;
}

Tensor embedding_lookup(Tensor table, const std::vector<int>& ids, int batch, int seq) {
  if (table.rank() != 2) {
    throw DimError("embedding_lookup: table must be [vocab, width], got " + shape_str(table.shape()));
  }
  const int V = table.dim(0), d = table.dim(1);
  if (static_cast<std::int64_t>(ids.size()) != static_cast<std::int64_t>(batch) * seq) {
    throw DimError("embedding_lookup: expected " + std::to_string(batch * seq) + " ids, got " +
                   std::to_string(ids.size()));
  }
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= V) {
      throw DataError("embedding_lookup: token id " + std::to_string(ids[i]) + " out of range [0, " +
                      std::to_string(V) + ")");
    }
  }
  Tensor out = Tensor::zeros({batch, seq, d});
  const real* pt = table.data();
  real* po = out.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::memcpy(po + static_cast<std::int64_t>(i) * d, pt + static_cast<std::int64_t>(ids[i]) * d,
                sizeof(real) * static_cast<std::size_t>(d));
  }

  Tape* tape = Tape::active();
  if (tape && needs_grad(table)) {
    auto ids_p = std::make_shared<std::vector<int>>(ids);
    tape->record(out, [table, out, ids_p, d]() mutable {
      if (!out.has_grad()) return;
      const real* g = out.grad();
      table.ensure_grad();
      real* gt = table.grad();
      for (std::size_t i = 0; i < ids_p->size(); ++i) {
        const real* gs = g + static_cast<std::int64_t>(i) * d;
        real* gd = gt + static_cast<std::int64_t>((*ids_p)[i]) * d;
        for (int j = 0; j < d; ++j) gd[j] += gs[j];
      }
    });
  }
  return out;
}

Tensor dropout(Tensor a, double p, std::mt19937& rng) {
  if (p < 0.0 || p >= 1.0) {
    throw ConfigError("dropout: p must be in [0, 1), got " + std::to_string(p));
  }
  if (p == 0.0) return a;
  const std::int64_t n = a.size();
  const real keep_scale = static_cast<real>(1.0 / (1.0 - p));
  auto mask = std::make_shared<std::vector<real>>(static_cast<std::size_t>(n));
  std::uniform_real_distribution<float> unit(0.0f, 1.0f);
  const float pf = static_cast<float>(p);
  for (auto& m : *mask) m = unit(rng) < pf ? real(0) : keep_scale;

  Tensor out = Tensor::zeros(a.shape());
  const real* pa = a.data();
  real* po = out.data();
  for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] * (*mask)[static_cast<std::size_t>(i)];

  Tape* tape = Tape::active();
  if (tape && needs_grad(a)) {
    tape->record(out, [a, out, mask, n]() mutable {
      if (!out.has_grad()) return;
      const real* g = out.grad();
      a.ensure_grad();
      real* ga = a.grad();
      for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i] * (*mask)[static_cast<std::size_t>(i)];
    });
  }
  return out;
}

Tensor detach(Tensor a) { return a.clone(); }

}  // namespace ckd
