#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace tnkit {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Deterministic random source. Draws are fully specified (mt19937_64 bit
// stream + explicit ldexp/Box-Muller transforms) so same-seed runs produce
// identical doubles on any conforming platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  // Uniform on [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller; pairs are cached.
  double normal();

  // Uniform integer in [0, n).
  std::size_t uniform_index(std::size_t n);

 private:
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Dense row-major tensor of doubles. Values are immutable after
// construction; copies share the underlying buffer, so a Tensor is a cheap
// value type and safe to hand between threads. Views (reshape, leading-axis
// slices) share the buffer with an offset instead of copying.
class Tensor {
 public:
  Tensor() : Tensor(zeros(Shape{})) {}  // rank-0 zero

  static Tensor zeros(Shape shape);
  static Tensor ones(Shape shape);
  static Tensor constant(Shape shape, double value);
  static Tensor gaussian(Shape shape, Rng& rng, double mean = 0.0, double stddev = 1.0);
  static Tensor uniform(Shape shape, Rng& rng, double low = 0.0, double high = 1.0);
  static Tensor from_data(Shape shape, std::vector<double> data);
  static Tensor scalar(double value);
  static Tensor eye(std::size_t n);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return size_; }
  std::size_t dim(std::size_t axis) const;

  // Unique id per constructed tensor value (views included), for tracking.
  std::uint64_t id() const { return id_; }

  // Identity and byte size of the underlying buffer; shared views agree.
  const void* buffer_key() const { return static_cast<const void*>(buf_.get()); }
  std::size_t buffer_bytes() const { return buf_->size() * sizeof(double); }

  const double* data() const { return buf_->data() + offset_; }
  double operator[](std::size_t flat) const { return data()[flat]; }
  double at(std::span<const std::size_t> index) const;
  double at(std::initializer_list<std::size_t> index) const;

  bool all_finite() const;

  // Same buffer, new shape (element count must match).
  Tensor reshaped(Shape shape) const;
  // Zero-copy slice of the leading axis.
  Tensor slice_leading(std::size_t index) const;

 private:
  Tensor(Shape shape, std::shared_ptr<const std::vector<double>> buf, std::size_t offset);

  Shape shape_;
  std::shared_ptr<const std::vector<double>> buf_;
  std::size_t offset_ = 0;
  std::size_t size_ = 0;
  std::uint64_t id_ = 0;
};

// Running multiply-add counter for the dense kernels; used by tests to pin
// asymptotic cost bounds. Single-threaded by design.
struct KernelCounters {
  static std::uint64_t multiply_adds();
  static void reset();
};

struct SvdResult {
  Tensor u;               // m x k, orthonormal columns
  std::vector<double> s;  // k singular values, non-increasing, >= 0
  Tensor vt;              // k x n, orthonormal rows
  double truncation_error = 0.0;  // sqrt(sum of squares of discarded values)
};

// --- kernels ---------------------------------------------------------------

// Sum over the paired axes: result axes are the remaining axes of a (in
// original order) followed by the remaining axes of b. Empty axis lists give
// the outer product.
Tensor tensordot(const Tensor& a, const Tensor& b,
                 std::span<const std::size_t> axes_a,
                 std::span<const std::size_t> axes_b);

Tensor matmul(const Tensor& a, const Tensor& b);          // (m,k) x (k,n)
Tensor batched_matmul(const Tensor& a, const Tensor& b);  // (b,m,k) x (b,k,n)

// Scatter convention: axis k of the input becomes axis perm[k] of the result
// (result[i_perm(0), i_perm(1), ...] == a[i_0, i_1, ...]). Materializes.
Tensor permute(const Tensor& a, std::span<const std::size_t> perm);

Tensor reshape(const Tensor& a, Shape shape);

Tensor outer(const Tensor& a, const Tensor& b);

enum class BinaryOp { Add, Sub, Mul, Div };
Tensor elementwise(BinaryOp op, const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

// One-sided Jacobi SVD of a rank-2 tensor, applied on the side with fewer
// vectors. Keeps rank k = min(m, n) unless truncated: max_rank caps k;
// cum_percentage keeps the smallest k whose leading energy fraction
// sum(s[0..k)^2) / sum(s^2) reaches the threshold; when both are given the
// smaller rank wins. Sign convention: the largest-magnitude entry of each u
// column is non-negative. Equal singular values keep their first-seen order.
SvdResult svd(const Tensor& m,
              std::optional<std::size_t> max_rank = std::nullopt,
              std::optional<double> cum_percentage = std::nullopt);

// Householder QR of a rank-2 tensor: q is m x k with orthonormal columns,
// r is k x n upper-triangular with non-negative diagonal, k = min(m, n).
std::pair<Tensor, Tensor> qr(const Tensor& m);

double frobenius_norm(const Tensor& a);
double max_abs_diff(const Tensor& a, const Tensor& b);

// New leading axis; inputs must share one shape.
Tensor stack_tensors(std::span<const Tensor> tensors);
// Split the leading axis; views share the buffer, otherwise copies.
std::vector<Tensor> unbind_tensor(const Tensor& a, bool views = false);

// Fix one axis to an index and drop it.
Tensor slice_index(const Tensor& a, std::size_t axis, std::size_t index);

Tensor sum_over_axis(const Tensor& a, std::size_t axis);
Tensor sum_all(const Tensor& a);  // rank-0

}  // namespace tnkit
