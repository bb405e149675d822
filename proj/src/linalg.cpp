#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "tnkit/error.hpp"
#include "tnkit/tensor.hpp"

namespace tnkit {

namespace {

constexpr double kJacobiTol = 1e-12;
constexpr int kJacobiMaxSweeps = 60;

// Column-major working copy of a row-major rank-2 tensor.
std::vector<double> to_columns(const Tensor& t, std::size_t rows, std::size_t cols,
                               bool transpose) {
  std::vector<double> w(rows * cols);
  const double* p = t.data();
  if (!transpose) {
    // t is rows x cols.
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < cols; ++j) w[j * rows + i] = p[i * cols + j];
    }
  } else {
    // t is cols x rows; we want its transpose.
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < cols; ++j) w[j * rows + i] = p[j * rows + i];
    }
  }
  return w;
}

// One-sided Jacobi on the columns of w (rows x cols, rows >= cols):
// repeatedly rotates column pairs until the implicit Gram matrix is diagonal
// to kJacobiTol. v accumulates the applied rotations (cols x cols,
// column-major, starts as identity), so w_in * v = w_out.
void jacobi_orthogonalize(std::vector<double>& w, std::vector<double>& v, std::size_t rows,
                          std::size_t cols) {
  v.assign(cols * cols, 0.0);
  for (std::size_t j = 0; j < cols; ++j) v[j * cols + j] = 1.0;
  for (int sweep = 0; sweep < kJacobiMaxSweeps; ++sweep) {
    bool converged = true;
    for (std::size_t p = 0; p + 1 < cols; ++p) {
      for (std::size_t q = p + 1; q < cols; ++q) {
        double* cp = w.data() + p * rows;
        double* cq = w.data() + q * rows;
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < rows; ++i) {
          alpha += cp[i] * cp[i];
          beta += cq[i] * cq[i];
          gamma += cp[i] * cq[i];
        }
        if (alpha == 0.0 || beta == 0.0) continue;  // a zero column is orthogonal already
        if (std::abs(gamma) / std::sqrt(alpha * beta) < kJacobiTol) continue;
        converged = false;
        double zeta = (beta - alpha) / (2.0 * gamma);
        double t = (zeta >= 0.0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        double c = 1.0 / std::sqrt(1.0 + t * t);
        double s = c * t;
        for (std::size_t i = 0; i < rows; ++i) {
          double wp = cp[i], wq = cq[i];
          cp[i] = c * wp - s * wq;
          cq[i] = s * wp + c * wq;
        }
        double* vp = v.data() + p * cols;
        double* vq = v.data() + q * cols;
        for (std::size_t i = 0; i < cols; ++i) {
          double xp = vp[i], xq = vq[i];
          vp[i] = c * xp - s * xq;
          vq[i] = s * xp + c * xq;
        }
      }
    }
    if (converged) break;
  }
}

// Replace zero-norm columns of u (rows x kept, column-major) with unit
// vectors orthogonal to all other columns, so u always has orthonormal
// columns even for rank-deficient inputs.
void complete_orthonormal(std::vector<double>& u, std::size_t rows,
                          const std::vector<std::size_t>& zero_cols, std::size_t kept) {
  for (std::size_t zc : zero_cols) {
    double best_norm = -1.0;
    std::vector<double> best;
    for (std::size_t cand = 0; cand < rows; ++cand) {
      std::vector<double> r(rows, 0.0);
      r[cand] = 1.0;
      for (std::size_t j = 0; j < kept; ++j) {
        if (j == zc) continue;
        const double* cj = u.data() + j * rows;
        double dot = cj[cand];  // <e_cand, col_j>
        for (std::size_t i = 0; i < rows; ++i) r[i] -= dot * cj[i];
      }
      double nrm = 0.0;
      for (double x : r) nrm += x * x;
      if (nrm > best_norm) {
        best_norm = nrm;
        best = std::move(r);
      }
    }
    double nrm = std::sqrt(best_norm);
    double* cz = u.data() + zc * rows;
    for (std::size_t i = 0; i < rows; ++i) cz[i] = best[i] / nrm;
  }
}

}  // namespace

SvdResult svd(const Tensor& m, std::optional<std::size_t> max_rank,
              std::optional<double> cum_percentage) {
  if (m.rank() != 2) detail::fail_arg("svd: expected rank-2 tensor, got ", shape_str(m.shape()));
  if (max_rank && *max_rank == 0) detail::fail_arg("svd: max_rank must be positive");
  if (cum_percentage && (*cum_percentage <= 0.0 || *cum_percentage > 1.0)) {
    detail::fail_arg("svd: cum_percentage must lie in (0, 1], got ", *cum_percentage);
  }
  const std::size_t rows_a = m.shape()[0];
  const std::size_t cols_a = m.shape()[1];
  if (rows_a == 0 || cols_a == 0) detail::fail_arg("svd: empty matrix");

  // Work on the side with fewer vectors: for rows >= cols orthogonalize the
  // columns of A, otherwise the columns of A^T, and swap factors at the end.
  const bool transposed = rows_a < cols_a;
  const std::size_t rows = transposed ? cols_a : rows_a;
  const std::size_t cols = transposed ? rows_a : cols_a;

  std::vector<double> w = to_columns(m, rows, cols, transposed);
  std::vector<double> v;
  jacobi_orthogonalize(w, v, rows, cols);

  std::vector<double> norms(cols);
  for (std::size_t j = 0; j < cols; ++j) {
    double acc = 0.0;
    const double* cj = w.data() + j * rows;
    for (std::size_t i = 0; i < rows; ++i) acc += cj[i] * cj[i];
    norms[j] = std::sqrt(acc);
  }
  // Stable descending order: equal values keep their original column order.
  std::vector<std::size_t> order(cols);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return norms[a] > norms[b]; });

  const std::size_t k_full = cols;  // min(rows_a, cols_a)
  double total = 0.0;
  for (double nv : norms) total += nv * nv;
  std::size_t k = k_full;
  if (max_rank) k = std::min(k, *max_rank);
  if (cum_percentage) {
    std::size_t kp = k_full;
    if (total == 0.0) {
      kp = 1;
    } else {
      double acc = 0.0;
      for (std::size_t i = 0; i < k_full; ++i) {
        acc += norms[order[i]] * norms[order[i]];
        if (acc / total >= *cum_percentage) {
          kp = i + 1;
          break;
        }
      }
    }
    k = std::min(k, kp);
  }

  double discarded = 0.0;
  for (std::size_t i = k; i < k_full; ++i) discarded += norms[order[i]] * norms[order[i]];

  // Left factor: normalized kept columns of w (completing zero columns), in
  // sorted order. Right factor rows: matching columns of v.
  std::vector<double> left(rows * k);
  std::vector<double> right(cols * k);
  std::vector<double> s(k);
  std::vector<std::size_t> zero_cols;
  for (std::size_t jj = 0; jj < k; ++jj) {
    std::size_t src = order[jj];
    s[jj] = norms[src];
    const double* cw = w.data() + src * rows;
    double* cl = left.data() + jj * rows;
    if (norms[src] == 0.0) {
      zero_cols.push_back(jj);
      std::fill(cl, cl + rows, 0.0);
    } else {
      for (std::size_t i = 0; i < rows; ++i) cl[i] = cw[i] / norms[src];
    }
    const double* cv = v.data() + src * cols;
    double* cr = right.data() + jj * cols;
    std::copy(cv, cv + cols, cr);
  }
  if (!zero_cols.empty()) complete_orthonormal(left, rows, zero_cols, k);

  // Sign convention on the u side (left factor before any transpose swap when
  // not transposed; after the swap the u factor is `right`).
  // u columns live in `left` when !transposed, in `right` when transposed.
  std::vector<double>& u_cols = transposed ? right : left;
  std::vector<double>& v_cols = transposed ? left : right;
  const std::size_t u_rows = transposed ? cols : rows;
  const std::size_t v_rows = transposed ? rows : cols;
  for (std::size_t j = 0; j < k; ++j) {
    double* cu = u_cols.data() + j * u_rows;
    std::size_t arg = 0;
    double best = -1.0;
    for (std::size_t i = 0; i < u_rows; ++i) {
      if (std::abs(cu[i]) > best) {
        best = std::abs(cu[i]);
        arg = i;
      }
    }
    if (cu[arg] < 0.0) {
      for (std::size_t i = 0; i < u_rows; ++i) cu[i] = -cu[i];
      double* cv2 = v_cols.data() + j * v_rows;
      for (std::size_t i = 0; i < v_rows; ++i) cv2[i] = -cv2[i];
    }
  }

  // Assemble row-major u (rows_a x k) and vt (k x cols_a).
  std::vector<double> u_data(rows_a * k);
  for (std::size_t i = 0; i < rows_a; ++i) {
    for (std::size_t j = 0; j < k; ++j) u_data[i * k + j] = u_cols[j * rows_a + i];
  }
  std::vector<double> vt_data(k * cols_a);
  for (std::size_t j = 0; j < k; ++j) {
    for (std::size_t i = 0; i < cols_a; ++i) vt_data[j * cols_a + i] = v_cols[j * cols_a + i];
  }

  SvdResult out;
  out.u = Tensor::from_data(Shape{rows_a, k}, std::move(u_data));
  out.s = std::move(s);
  out.vt = Tensor::from_data(Shape{k, cols_a}, std::move(vt_data));
  out.truncation_error = std::sqrt(discarded);
  return out;
}

std::pair<Tensor, Tensor> qr(const Tensor& m) {
  if (m.rank() != 2) detail::fail_arg("qr: expected rank-2 tensor, got ", shape_str(m.shape()));
  const std::size_t rows = m.shape()[0];
  const std::size_t cols = m.shape()[1];
  if (rows == 0 || cols == 0) detail::fail_arg("qr: empty matrix");
  const std::size_t k = std::min(rows, cols);

  std::vector<double> r(m.data(), m.data() + rows * cols);  // row-major working copy
  std::vector<std::vector<double>> reflectors;
  reflectors.reserve(k);
  for (std::size_t j = 0; j < k; ++j) {
    double nrm = 0.0;
    for (std::size_t i = j; i < rows; ++i) nrm += r[i * cols + j] * r[i * cols + j];
    nrm = std::sqrt(nrm);
    std::vector<double> v(rows, 0.0);
    if (nrm != 0.0) {
      double x0 = r[j * cols + j];
      double alpha = (x0 >= 0.0 ? -nrm : nrm);
      for (std::size_t i = j; i < rows; ++i) v[i] = r[i * cols + j];
      v[j] -= alpha;
      double vnorm2 = 0.0;
      for (std::size_t i = j; i < rows; ++i) vnorm2 += v[i] * v[i];
      if (vnorm2 > 0.0) {
        double beta = 2.0 / vnorm2;
        for (std::size_t col = j; col < cols; ++col) {
          double dot = 0.0;
          for (std::size_t i = j; i < rows; ++i) dot += v[i] * r[i * cols + col];
          dot *= beta;
          for (std::size_t i = j; i < rows; ++i) r[i * cols + col] -= dot * v[i];
        }
      } else {
        v.assign(rows, 0.0);
      }
    }
    reflectors.push_back(std::move(v));
  }

  // Thin Q: apply the reflectors in reverse to the first k identity columns.
  std::vector<double> q(rows * k, 0.0);
  for (std::size_t j = 0; j < k; ++j) q[j * k + j] = 1.0;
  for (std::size_t jj = k; jj-- > 0;) {
    const std::vector<double>& v = reflectors[jj];
    double vnorm2 = 0.0;
    for (std::size_t i = jj; i < rows; ++i) vnorm2 += v[i] * v[i];
    if (vnorm2 == 0.0) continue;
    double beta = 2.0 / vnorm2;
    for (std::size_t col = 0; col < k; ++col) {
      double dot = 0.0;
      for (std::size_t i = jj; i < rows; ++i) dot += v[i] * q[i * k + col];
      dot *= beta;
      for (std::size_t i = jj; i < rows; ++i) q[i * k + col] -= dot * v[i];
    }
  }

  // Non-negative diagonal of R (flip matching Q columns), exact zeros below.
  for (std::size_t j = 0; j < k; ++j) {
    if (r[j * cols + j] < 0.0) {
      for (std::size_t col = 0; col < cols; ++col) r[j * cols + col] = -r[j * cols + col];
      for (std::size_t i = 0; i < rows; ++i) q[i * k + j] = -q[i * k + j];
    }
  }
  std::vector<double> r_out(k * cols, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t jcol = i; jcol < cols; ++jcol) r_out[i * cols + jcol] = r[i * cols + jcol];
  }
  return {Tensor::from_data(Shape{rows, k}, std::move(q)),
          Tensor::from_data(Shape{k, cols}, std::move(r_out))};
}

}  // namespace tnkit
