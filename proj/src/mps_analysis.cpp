#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tnkit/models.hpp"

// Chain analysis: canonical forms, entanglement measures, densification,
// operator application, and matrix tensorization. These routines work on the
// stored core tensors with raw kernels (no recorded operations, no gradients)
// and write results back through set_tensor, so any cached contraction plan is
// dropped first.

namespace tnkit::models {

using graph::Node;

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

Tensor td(const Tensor& a, const Tensor& b, const std::vector<std::size_t>& axes_a,
          const std::vector<std::size_t>& axes_b) {
  return tensordot(a, b, axes_a, axes_b);
}

Tensor transpose2(const Tensor& m) {
  const std::size_t perm[] = {1, 0};
  return permute(m, perm);
}

// First k columns of an (m, n) matrix.
Tensor take_cols(const Tensor& m, std::size_t k) {
  const std::size_t rows = m.dim(0), cols = m.dim(1);
  if (k == cols) return m;
  std::vector<double> v(rows * k);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < k; ++j) v[i * k + j] = m[i * cols + j];
  return Tensor::from_data({rows, k}, std::move(v));
}

// First k rows of an (m, n) matrix, row i scaled by w[i] (pass empty w to skip).
Tensor take_rows_scaled(const Tensor& m, std::size_t k, const std::vector<double>& w) {
  const std::size_t cols = m.dim(1);
  std::vector<double> v(k * cols);
  for (std::size_t i = 0; i < k; ++i) {
    const double f = w.empty() ? 1.0 : w[i];
    for (std::size_t j = 0; j < cols; ++j) v[i * cols + j] = f * m[i * cols + j];
  }
  return Tensor::from_data({k, cols}, std::move(v));
}

// Columns of an (m, n) matrix scaled by w (n == w.size()).
Tensor scale_cols(const Tensor& m, const std::vector<double>& w) {
  const std::size_t rows = m.dim(0), cols = m.dim(1);
  std::vector<double> v(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) v[i * cols + j] = m[i * cols + j] * w[j];
  return Tensor::from_data({rows, cols}, std::move(v));
}

// One <psi|psi> transfer step from the left: L'[a,b] = sum L[a',b'] A[a',x,a] A[b',x,b].
Tensor env_step_left(const Tensor& l, const Tensor& a) {
  Tensor t = td(l, a, {0}, {0});      // (b', x, a)
  return td(t, a, {0, 1}, {0, 1});    // (a, b)
}

// ... and from the right: R'[a,b] = sum A[a,x,a'] A[b,x,b'] R[a',b'].
Tensor env_step_right(const Tensor& r, const Tensor& a) {
  Tensor t = td(a, r, {2}, {0});      // (a, x, b')
  return td(t, a, {1, 2}, {1, 2});    // (a, b)
}

// Dense (out^n, in^n) matrix of an operator chain closed by boundary vectors.
Tensor dense_operator(const std::vector<Tensor>& cores, const Tensor& lcap, const Tensor& rcap) {
  const std::size_t n = cores.size();
  std::size_t total = 1;
  for (const Tensor& c : cores) {
    total *= c.dim(1) * c.dim(2);
    if (total > (1u << 24)) fail("dense_matrix: result too large to densify");
  }
  Tensor cur = td(lcap, cores[0], {0}, {0});  // (o1, i1, bond)
  for (std::size_t k = 1; k < n; ++k) cur = td(cur, cores[k], {cur.rank() - 1}, {0});
  cur = td(cur, rcap, {cur.rank() - 1}, {0});  // (o1, i1, o2, i2, ...)
  std::vector<std::size_t> perm(2 * n);
  for (std::size_t k = 0; k < n; ++k) {
    perm[2 * k] = k;          // o_k -> position k
    perm[2 * k + 1] = n + k;  // i_k -> position n + k
  }
  cur = permute(cur, perm);
  std::size_t out_total = 1, in_total = 1;
  for (const Tensor& c : cores) {
    out_total *= c.dim(1);
    in_total *= c.dim(2);
  }
  return reshape(cur, {out_total, in_total});
}

}  // namespace

// --- densification ---------------------------------------------------------------

Tensor Mps::dense_vector() const {
  std::size_t total = 1;
  for (std::size_t k = 0; k < n_sites(); ++k) {
    total *= core(k).dim(1);
    if (total > (1u << 22)) fail("dense_vector: state too large to densify");
  }
  Tensor cur = td(net_.get_tensor(cap_left_), core(0), {0}, {0});  // (x1, bond)
  for (std::size_t k = 1; k < n_sites(); ++k) cur = td(cur, core(k), {cur.rank() - 1}, {0});
  cur = td(cur, net_.get_tensor(cap_right_), {cur.rank() - 1}, {0});
  return reshape(cur, {total});
}

double Mps::norm() const {
  const Tensor lcap = net_.get_tensor(cap_left_), rcap = net_.get_tensor(cap_right_);
  Tensor l = outer(lcap, lcap);
  for (std::size_t k = 0; k < n_sites(); ++k) l = env_step_left(l, core(k));
  const double n2 = td(td(l, rcap, {1}, {0}), rcap, {0}, {0})[0];
  return std::sqrt(std::max(n2, 0.0));
}

Tensor Mpo::dense_matrix() const {
  std::vector<Tensor> cores;
  cores.reserve(n_sites());
  for (std::size_t k = 0; k < n_sites(); ++k) cores.push_back(core(k));
  return dense_operator(cores, Tensor::ones({cores.front().dim(0)}),
                        Tensor::ones({cores.back().dim(3)}));
}

Tensor UMpo::dense_matrix() const {
  std::vector<Tensor> cores(n_sites(), core());
  return dense_operator(cores, Tensor::ones({core().dim(0)}), Tensor::ones({core().dim(3)}));
}

// --- canonical form ---------------------------------------------------------------

void Mps::canonicalize(std::size_t center, CanonMode mode, std::optional<std::size_t> max_rank,
                       std::optional<double> cum_energy) {
  if (center >= n_sites()) fail("canonicalize: center out of range");
  const bool truncating = max_rank.has_value() || cum_energy.has_value();
  if (truncating && mode == CanonMode::Qr)
    fail("canonicalize: qr does not truncate; use svd with max_rank or cum_energy");
  if (max_rank && *max_rank == 0) fail("canonicalize: max_rank must be positive");

  // Cached operations capture the current core shapes; drop them before the
  // sweep rewrites bonds.
  net_.reset();

  // Replaces cores k and k+1, resizing the bond between them when needed.
  auto apply_pair = [&](std::size_t k, const Tensor& left, const Tensor& right) {
    const graph::EdgePtr bond = sites_[k].edge("right");
    if (bond->size != left.dim(2)) net_.disconnect(bond);
    net_.set_tensor(sites_[k], left);
    net_.set_tensor(sites_[k + 1], right);
    if (!sites_[k].edge("right")->connected)
      net_.connect(sites_[k], "right", sites_[k + 1], "left");
  };

  // Left-to-right: make sites 0 .. center-1 left-isometries.
  for (std::size_t k = 0; k < center; ++k) {
    const Tensor a = core(k);
    const std::size_t dl = a.dim(0), d = a.dim(1), dr = a.dim(2);
    Tensor m = reshape(a, {dl * d, dr});
    Tensor iso, carry;
    if (mode == CanonMode::Svd) {
      SvdResult r = svd(m, max_rank, cum_energy);
      iso = reshape(r.u, {dl, d, r.s.size()});
      carry = take_rows_scaled(r.vt, r.s.size(), r.s);  // diag(s) vt
    } else {
      auto [q, rfac] = qr(m);
      iso = reshape(q, {dl, d, q.dim(1)});
      carry = rfac;
    }
    Tensor nxt = td(carry, core(k + 1), {1}, {0});
    apply_pair(k, iso, nxt);
  }

  // Right-to-left: make sites n-1 .. center+1 right-isometries.
  for (std::size_t k = n_sites() - 1; k > center; --k) {
    const Tensor a = core(k);
    const std::size_t dl = a.dim(0), d = a.dim(1), dr = a.dim(2);
    Tensor m = reshape(a, {dl, d * dr});
    Tensor iso, carry;
    if (mode == CanonMode::Svd) {
      SvdResult r = svd(m, max_rank, cum_energy);
      iso = reshape(r.vt, {r.s.size(), d, dr});
      carry = scale_cols(r.u, r.s);  // u diag(s)
    } else {
      auto [q, rfac] = qr(transpose2(m));
      iso = reshape(transpose2(q), {q.dim(1), d, dr});
      carry = transpose2(rfac);
    }
    Tensor nxt = td(core(k - 1), carry, {2}, {0});
    apply_pair(k - 1, nxt, iso);
  }
}

// --- entanglement -----------------------------------------------------------------

double Mps::entanglement_entropy(std::size_t cut) {
  if (cut == 0 || cut >= n_sites())
    fail("entanglement_entropy: cut must lie between 1 and n_sites-1");
  canonicalize(cut, CanonMode::Qr);
  const Tensor c = core(cut);
  SvdResult r = svd(reshape(c, {c.dim(0), c.dim(1) * c.dim(2)}));
  double total = 0.0;
  for (double s : r.s) total += s * s;
  if (!(total > 0.0)) throw std::runtime_error("entanglement_entropy: zero-norm state");
  double h = 0.0;
  for (double s : r.s) {
    const double p = s * s / total;  // normalized Schmidt weight
    if (p > 1e-18) h -= p * std::log(p);
  }
  return h;
}

Tensor Mps::reduced_density_matrix(std::size_t first, std::size_t count) const {
  if (count == 0) fail("reduced_density_matrix: count must be positive");
  if (first + count > n_sites()) fail("reduced_density_matrix: site range out of bounds");
  std::size_t p = 1;
  for (std::size_t k = first; k < first + count; ++k) {
    p *= core(k).dim(1);
    if (p > 64) fail("reduced_density_matrix: kept dimension exceeds 64");
  }

  const Tensor lcap = net_.get_tensor(cap_left_), rcap = net_.get_tensor(cap_right_);
  Tensor l = outer(lcap, lcap);
  for (std::size_t k = 0; k < first; ++k) l = env_step_left(l, core(k));
  Tensor r = outer(rcap, rcap);
  for (std::size_t k = n_sites(); k-- > first + count;) r = env_step_right(r, core(k));

  // Merge the kept cores into one (bond_l, p, bond_r) block.
  Tensor block = core(first);
  for (std::size_t k = first + 1; k < first + count; ++k)
    block = td(block, core(k), {block.rank() - 1}, {0});
  block = reshape(block, {block.dim(0), p, block.shape().back()});

  // rho[s,s'] = sum L[al,bl] M[al,s,ar] M[bl,s',br] R[ar,br]
  Tensor t = td(l, block, {0}, {0});   // (bl, s, ar)
  t = td(t, r, {2}, {0});              // (bl, s, br)
  Tensor rho = td(block, t, {0, 2}, {0, 2});  // (s', s); symmetric

  double trace = 0.0;
  for (std::size_t i = 0; i < p; ++i) trace += rho[i * p + i];
  if (!(trace > 0.0)) throw std::runtime_error("reduced_density_matrix: zero-norm state");
  return scale(rho, 1.0 / trace);
}

// --- operator application ----------------------------------------------------------

std::unique_ptr<Mps> mps_mpo_contract(const Mps& mps, const Mpo& mpo) {
  if (mps.n_sites() != mpo.n_sites())
    fail("mps_mpo_contract: chain lengths differ (" + std::to_string(mps.n_sites()) + " vs " +
         std::to_string(mpo.n_sites()) + ")");
  std::vector<Tensor> cores;
  cores.reserve(mps.n_sites());
  for (std::size_t k = 0; k < mps.n_sites(); ++k) {
    const Tensor m = mps.core(k);  // (a, x, b)
    const Tensor o = mpo.core(k);  // (e, q, x, f)
    if (o.dim(2) != m.dim(1))
      fail("mps_mpo_contract: operator input dimension does not match the state at site " +
           std::to_string(k));
    Tensor t = td(m, o, {1}, {2});  // (a, b, e, q, f)
    const std::size_t perm[] = {0, 3, 1, 2, 4};
    t = permute(t, perm);           // (a, e, q, b, f)
    cores.push_back(reshape(t, {m.dim(0) * o.dim(0), o.dim(1), m.dim(2) * o.dim(3)}));
  }
  return std::make_unique<Mps>(std::move(cores));
}

// --- matrix tensorization ------------------------------------------------------------

TensorizeResult tensorize_matrix(const Tensor& w, std::size_t n, std::size_t d,
                                 std::optional<std::size_t> max_rank) {
  if (n == 0) fail("tensorize_matrix: n must be positive");
  if (d < 2) fail("tensorize_matrix: d must be at least 2");
  if (max_rank && *max_rank == 0) fail("tensorize_matrix: max_rank must be positive");
  std::size_t side = 1;
  for (std::size_t k = 0; k < n; ++k) {
    if (side > (1u << 20) / d) fail("tensorize_matrix: d^n overflows the supported range");
    side *= d;
  }
  if (w.rank() != 2 || w.dim(0) != side || w.dim(1) != side)
    fail("tensorize_matrix: expected a (" + std::to_string(side) + ", " + std::to_string(side) +
         ") matrix");

  // Regroup w[(i1..in),(j1..jn)] into the interleaved order (i1,j1,...,in,jn).
  Shape split(2 * n, d);
  Tensor t = reshape(w, split);
  std::vector<std::size_t> perm(2 * n);
  for (std::size_t k = 0; k < n; ++k) {
    perm[k] = 2 * k;          // row index of site k
    perm[n + k] = 2 * k + 1;  // column index of site k
  }
  t = permute(t, perm);

  TensorizeResult result;
  double err2 = 0.0;
  std::size_t dl = 1;
  std::size_t rest = side * side / (d * d);
  Tensor m = reshape(t, {d * d, rest});
  for (std::size_t k = 0; k + 1 < n; ++k) {
    SvdResult r = svd(m, max_rank);
    // Drop the numerically-zero tail so exact low-rank structure yields
    // minimal bonds.
    std::size_t keep = r.s.size();
    const double tol = r.s.empty() ? 0.0 : 1e-12 * r.s.front();
    while (keep > 1 && r.s[keep - 1] <= tol) --keep;
    err2 += r.truncation_error * r.truncation_error;
    for (std::size_t i = keep; i < r.s.size(); ++i) err2 += r.s[i] * r.s[i];

    result.cores.push_back(reshape(take_cols(r.u, keep), {dl, d, d, keep}));
    Tensor carry = take_rows_scaled(r.vt, keep, r.s);  // diag(s) vt
    rest /= d * d;
    m = reshape(carry, {keep * d * d, rest});
    dl = keep;
  }
  result.cores.push_back(reshape(m, {dl, d, d, 1}));
  result.truncation_error = std::sqrt(err2);
  return result;
}

}  // namespace tnkit::models
