#include "tnkit/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>

#include "tnkit/error.hpp"

namespace tnkit {

namespace {

std::atomic<std::uint64_t> g_next_tensor_id{1};
std::uint64_t g_multiply_adds = 0;

std::vector<std::size_t> row_major_strides(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) {
    strides[i - 1] = strides[i] * shape[i];
  }
  return strides;
}

void check_axis(const Tensor& t, std::size_t axis, const char* op) {
  if (axis >= t.rank()) {
    detail::fail_arg(op, ": axis ", axis, " out of range for rank ", t.rank());
  }
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  s += ")";
  return s;
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  // Box-Muller on (0,1] x [0,1): u1 never zero so log is finite.
  double u1 = (static_cast<double>(eng_() >> 11) + 1.0) * 0x1.0p-53;
  double u2 = static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  double r = std::sqrt(-2.0 * std::log(u1));
  double theta = 2.0 * 3.14159265358979323846 * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

std::size_t Rng::uniform_index(std::size_t n) {
  if (n == 0) detail::fail_arg("Rng::uniform_index: n must be positive");
  // Rejection sampling for an unbiased draw.
  std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t x = eng_();
  while (x >= limit) x = eng_();
  return static_cast<std::size_t>(x % n);
}

Tensor::Tensor(Shape shape, std::shared_ptr<const std::vector<double>> buf, std::size_t offset)
    : shape_(std::move(shape)),
      buf_(std::move(buf)),
      offset_(offset),
      size_(shape_numel(shape_)),
      id_(g_next_tensor_id.fetch_add(1, std::memory_order_relaxed)) {
  if (offset_ + size_ > buf_->size()) {
    detail::fail_arg("Tensor: buffer of ", buf_->size(), " doubles too small for shape ",
                     shape_str(shape_), " at offset ", offset_);
  }
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data) {
  if (data.size() != shape_numel(shape)) {
    detail::fail_arg("Tensor::from_data: ", data.size(), " values for shape ", shape_str(shape));
  }
  return Tensor(std::move(shape), std::make_shared<const std::vector<double>>(std::move(data)), 0);
}

Tensor Tensor::zeros(Shape shape) {
  std::vector<double> data(shape_numel(shape), 0.0);
  return from_data(std::move(shape), std::move(data));
}

Tensor Tensor::ones(Shape shape) { return constant(std::move(shape), 1.0); }

Tensor Tensor::constant(Shape shape, double value) {
  std::vector<double> data(shape_numel(shape), value);
  return from_data(std::move(shape), std::move(data));
}

Tensor Tensor::gaussian(Shape shape, Rng& rng, double mean, double stddev) {
  std::vector<double> data(shape_numel(shape));
  for (double& x : data) x = mean + stddev * rng.normal();
  return from_data(std::move(shape), std::move(data));
}

Tensor Tensor::uniform(Shape shape, Rng& rng, double low, double high) {
  std::vector<double> data(shape_numel(shape));
  for (double& x : data) x = low + (high - low) * rng.uniform();
  return from_data(std::move(shape), std::move(data));
}

Tensor Tensor::scalar(double value) { return from_data(Shape{}, {value}); }

Tensor Tensor::eye(std::size_t n) {
  std::vector<double> data(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) data[i * n + i] = 1.0;
  return from_data(Shape{n, n}, std::move(data));
}

std::size_t Tensor::dim(std::size_t axis) const {
  check_axis(*this, axis, "Tensor::dim");
  return shape_[axis];
}

double Tensor::at(std::span<const std::size_t> index) const {
  if (index.size() != rank()) {
    detail::fail_arg("Tensor::at: ", index.size(), " indices for rank ", rank());
  }
  std::size_t flat = 0;
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= shape_[i]) {
      detail::fail_arg("Tensor::at: index ", index[i], " out of range for axis ", i,
                       " of shape ", shape_str(shape_));
    }
    flat = flat * shape_[i] + index[i];
  }
  return data()[flat];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  std::vector<std::size_t> idx(index);
  return at(std::span<const std::size_t>(idx));
}

bool Tensor::all_finite() const {
  const double* p = data();
  for (std::size_t i = 0; i < size_; ++i) {
    if (!std::isfinite(p[i])) return false;
  }
  return true;
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != size_) {
    detail::fail_arg("reshape: cannot view ", shape_str(shape_), " as ", shape_str(shape),
                     " (element counts ", size_, " vs ", shape_numel(shape), ")");
  }
  return Tensor(std::move(shape), buf_, offset_);
}

Tensor Tensor::slice_leading(std::size_t index) const {
  if (rank() == 0) detail::fail_arg("slice_leading: rank-0 tensor has no leading axis");
  if (index >= shape_[0]) {
    detail::fail_arg("slice_leading: index ", index, " out of range for axis of size ", shape_[0]);
  }
  Shape rest(shape_.begin() + 1, shape_.end());
  std::size_t block = shape_numel(rest);
  return Tensor(std::move(rest), buf_, offset_ + index * block);
}

std::uint64_t KernelCounters::multiply_adds() { return g_multiply_adds; }
void KernelCounters::reset() { g_multiply_adds = 0; }

// --- kernels ---------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    detail::fail_arg("matmul: incompatible shapes ", shape_str(a.shape()), " x ",
                     shape_str(b.shape()));
  }
  std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<double> out(m * n, 0.0);
  const double* pa = a.data();
  const double* pb = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* po = out.data() + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      double av = pa[i * k + kk];
      const double* pr = pb + kk * n;
      for (std::size_t j = 0; j < n; ++j) po[j] += av * pr[j];
    }
  }
  g_multiply_adds += m * n * k;
  return Tensor::from_data(Shape{m, n}, std::move(out));
}

Tensor batched_matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3) {
    detail::fail_arg("batched_matmul: expected rank-3 inputs, got ", shape_str(a.shape()), " and ",
                     shape_str(b.shape()));
  }
  if (a.shape()[0] != b.shape()[0] || a.shape()[2] != b.shape()[1]) {
    detail::fail_arg("batched_matmul: incompatible shapes ", shape_str(a.shape()), " x ",
                     shape_str(b.shape()));
  }
  std::size_t nb = a.shape()[0], m = a.shape()[1], k = a.shape()[2], n = b.shape()[2];
  std::vector<double> out(nb * m * n, 0.0);
  const double* pa = a.data();
  const double* pb = b.data();
  for (std::size_t bb = 0; bb < nb; ++bb) {
    const double* sa = pa + bb * m * k;
    const double* sb = pb + bb * k * n;
    double* so = out.data() + bb * m * n;
    for (std::size_t i = 0; i < m; ++i) {
      double* po = so + i * n;
      for (std::size_t kk = 0; kk < k; ++kk) {
        double av = sa[i * k + kk];
        const double* pr = sb + kk * n;
        for (std::size_t j = 0; j < n; ++j) po[j] += av * pr[j];
      }
    }
  }
  g_multiply_adds += nb * m * n * k;
  return Tensor::from_data(Shape{nb, m, n}, std::move(out));
}

Tensor permute(const Tensor& a, std::span<const std::size_t> perm) {
  if (perm.size() != a.rank()) {
    detail::fail_arg("permute: permutation of length ", perm.size(), " for rank ", a.rank());
  }
  std::vector<bool> seen(perm.size(), false);
  for (std::size_t p : perm) {
    if (p >= perm.size() || seen[p]) {
      detail::fail_arg("permute: invalid permutation for rank ", a.rank());
    }
    seen[p] = true;
  }
  Shape out_shape(a.rank());
  for (std::size_t src = 0; src < a.rank(); ++src) out_shape[perm[src]] = a.shape()[src];
  std::vector<std::size_t> out_strides = row_major_strides(out_shape);
  // Walking the input in order and scattering keeps reads contiguous.
  std::vector<std::size_t> scatter(a.rank());
  for (std::size_t src = 0; src < a.rank(); ++src) scatter[src] = out_strides[perm[src]];
  std::vector<double> out(a.size());
  const double* pa = a.data();
  std::vector<std::size_t> idx(a.rank(), 0);
  std::size_t dst = 0;
  for (std::size_t flat = 0; flat < a.size(); ++flat) {
    out[dst] = pa[flat];
    for (std::size_t ax = a.rank(); ax-- > 0;) {
      dst += scatter[ax];
      if (++idx[ax] < a.shape()[ax]) break;
      dst -= idx[ax] * scatter[ax];
      idx[ax] = 0;
    }
  }
  return Tensor::from_data(std::move(out_shape), std::move(out));
}

Tensor reshape(const Tensor& a, Shape shape) { return a.reshaped(std::move(shape)); }

Tensor outer(const Tensor& a, const Tensor& b) {
  Shape out_shape = a.shape();
  out_shape.insert(out_shape.end(), b.shape().begin(), b.shape().end());
  std::vector<double> out(a.size() * b.size());
  const double* pa = a.data();
  const double* pb = b.data();
  std::size_t pos = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < b.size(); ++j) out[pos++] = pa[i] * pb[j];
  }
  g_multiply_adds += a.size() * b.size();
  return Tensor::from_data(std::move(out_shape), std::move(out));
}

Tensor tensordot(const Tensor& a, const Tensor& b,
                 std::span<const std::size_t> axes_a,
                 std::span<const std::size_t> axes_b) {
  if (axes_a.size() != axes_b.size()) {
    detail::fail_arg("tensordot: axis lists differ in length (", axes_a.size(), " vs ",
                     axes_b.size(), ")");
  }
  std::vector<bool> used_a(a.rank(), false), used_b(b.rank(), false);
  for (std::size_t i = 0; i < axes_a.size(); ++i) {
    std::size_t pa = axes_a[i], pb = axes_b[i];
    if (pa >= a.rank() || pb >= b.rank()) {
      detail::fail_arg("tensordot: axis pair (", pa, ",", pb, ") out of range for ranks ",
                       a.rank(), "/", b.rank());
    }
    if (used_a[pa] || used_b[pb]) {
      detail::fail_arg("tensordot: axis repeated in contraction list");
    }
    used_a[pa] = used_b[pb] = true;
    if (a.shape()[pa] != b.shape()[pb]) {
      detail::fail_arg("tensordot: size mismatch on pair (", pa, ",", pb, "): ", a.shape()[pa],
                       " vs ", b.shape()[pb]);
    }
  }
  std::vector<std::size_t> free_a, free_b;
  for (std::size_t i = 0; i < a.rank(); ++i) {
    if (!used_a[i]) free_a.push_back(i);
  }
  for (std::size_t i = 0; i < b.rank(); ++i) {
    if (!used_b[i]) free_b.push_back(i);
  }
  // Group to matrices: a -> (free, contracted), b -> (contracted, free).
  std::vector<std::size_t> perm_a(a.rank()), perm_b(b.rank());
  std::size_t dst = 0;
  for (std::size_t ax : free_a) perm_a[ax] = dst++;
  for (std::size_t ax : axes_a) perm_a[ax] = dst++;
  dst = 0;
  for (std::size_t ax : axes_b) perm_b[ax] = dst++;
  for (std::size_t ax : free_b) perm_b[ax] = dst++;

  std::size_t m = 1, k = 1, n = 1;
  Shape out_shape;
  for (std::size_t ax : free_a) {
    m *= a.shape()[ax];
    out_shape.push_back(a.shape()[ax]);
  }
  for (std::size_t ax : axes_a) k *= a.shape()[ax];
  for (std::size_t ax : free_b) {
    n *= b.shape()[ax];
    out_shape.push_back(b.shape()[ax]);
  }
  Tensor am = permute(a, perm_a).reshaped(Shape{m, k});
  Tensor bm = permute(b, perm_b).reshaped(Shape{k, n});
  return matmul(am, bm).reshaped(std::move(out_shape));
}

Tensor elementwise(BinaryOp op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    detail::fail_arg("elementwise: shape mismatch ", shape_str(a.shape()), " vs ",
                     shape_str(b.shape()), " (no broadcasting)");
  }
  const double* pa = a.data();
  const double* pb = b.data();
  std::vector<double> out(a.size());
  switch (op) {
    case BinaryOp::Add:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] + pb[i];
      break;
    case BinaryOp::Sub:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] - pb[i];
      break;
    case BinaryOp::Mul:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * pb[i];
      break;
    case BinaryOp::Div:
      for (std::size_t i = 0; i < out.size(); ++i) {
        if (pb[i] == 0.0) detail::fail_arg("div: zero entry in divisor at flat index ", i);
        out[i] = pa[i] / pb[i];
      }
      break;
  }
  return Tensor::from_data(a.shape(), std::move(out));
}

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::Mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::Div, a, b); }

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.size());
  const double* pa = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * factor;
  return Tensor::from_data(a.shape(), std::move(out));
}

double frobenius_norm(const Tensor& a) {
  double acc = 0.0;
  const double* p = a.data();
  for (std::size_t i = 0; i < a.size(); ++i) acc += p[i] * p[i];
  return std::sqrt(acc);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    detail::fail_arg("max_abs_diff: shape mismatch ", shape_str(a.shape()), " vs ",
                     shape_str(b.shape()));
  }
  double m = 0.0;
  const double* pa = a.data();
  const double* pb = b.data();
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(pa[i] - pb[i]));
  return m;
}

Tensor stack_tensors(std::span<const Tensor> tensors) {
  if (tensors.empty()) detail::fail_arg("stack_tensors: empty input list");
  const Shape& s0 = tensors[0].shape();
  for (const Tensor& t : tensors) {
    if (t.shape() != s0) {
      detail::fail_arg("stack_tensors: shape mismatch ", shape_str(t.shape()), " vs ",
                       shape_str(s0));
    }
  }
  std::size_t block = tensors[0].size();
  std::vector<double> out(tensors.size() * block);
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    std::copy(tensors[i].data(), tensors[i].data() + block, out.data() + i * block);
  }
  Shape out_shape{tensors.size()};
  out_shape.insert(out_shape.end(), s0.begin(), s0.end());
  return Tensor::from_data(std::move(out_shape), std::move(out));
}

std::vector<Tensor> unbind_tensor(const Tensor& a, bool views) {
  if (a.rank() == 0) detail::fail_arg("unbind_tensor: rank-0 tensor has no leading axis");
  std::vector<Tensor> out;
  out.reserve(a.shape()[0]);
  for (std::size_t i = 0; i < a.shape()[0]; ++i) {
    Tensor view = a.slice_leading(i);
    if (views) {
      out.push_back(view);
    } else {
      std::vector<double> copy(view.data(), view.data() + view.size());
      out.push_back(Tensor::from_data(view.shape(), std::move(copy)));
    }
  }
  return out;
}

Tensor slice_index(const Tensor& a, std::size_t axis, std::size_t index) {
  check_axis(a, axis, "slice_index");
  if (index >= a.shape()[axis]) {
    detail::fail_arg("slice_index: index ", index, " out of range for axis ", axis, " of size ",
                     a.shape()[axis]);
  }
  Shape out_shape;
  for (std::size_t i = 0; i < a.rank(); ++i) {
    if (i != axis) out_shape.push_back(a.shape()[i]);
  }
  std::size_t outer_n = 1, inner_n = 1;
  for (std::size_t i = 0; i < axis; ++i) outer_n *= a.shape()[i];
  for (std::size_t i = axis + 1; i < a.rank(); ++i) inner_n *= a.shape()[i];
  std::size_t axis_n = a.shape()[axis];
  std::vector<double> out(outer_n * inner_n);
  const double* pa = a.data();
  for (std::size_t o = 0; o < outer_n; ++o) {
    const double* src = pa + (o * axis_n + index) * inner_n;
    std::copy(src, src + inner_n, out.data() + o * inner_n);
  }
  return Tensor::from_data(std::move(out_shape), std::move(out));
}

Tensor sum_over_axis(const Tensor& a, std::size_t axis) {
  check_axis(a, axis, "sum_over_axis");
  Shape out_shape;
  for (std::size_t i = 0; i < a.rank(); ++i) {
    if (i != axis) out_shape.push_back(a.shape()[i]);
  }
  std::size_t outer_n = 1, inner_n = 1;
  for (std::size_t i = 0; i < axis; ++i) outer_n *= a.shape()[i];
  for (std::size_t i = axis + 1; i < a.rank(); ++i) inner_n *= a.shape()[i];
  std::size_t axis_n = a.shape()[axis];
  std::vector<double> out(outer_n * inner_n, 0.0);
  const double* pa = a.data();
  for (std::size_t o = 0; o < outer_n; ++o) {
    for (std::size_t k = 0; k < axis_n; ++k) {
      const double* src = pa + (o * axis_n + k) * inner_n;
      double* dst = out.data() + o * inner_n;
      for (std::size_t j = 0; j < inner_n; ++j) dst[j] += src[j];
    }
  }
  return Tensor::from_data(std::move(out_shape), std::move(out));
}

Tensor sum_all(const Tensor& a) {
  double acc = 0.0;
  const double* p = a.data();
  for (std::size_t i = 0; i < a.size(); ++i) acc += p[i];
  return Tensor::scalar(acc);
}

}  // namespace tnkit
