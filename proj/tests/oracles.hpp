// Brute-force reference implementations used to generate expected values in
// tests. Everything here is written with plain nested loops and index
// arithmetic, independent of the library's kernels.
#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "tnkit/tensor.hpp"

namespace oracles {

using tnkit::Shape;
using tnkit::Tensor;

inline std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> st(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) st[i - 1] = st[i] * shape[i];
  return st;
}

// result[free_a..., free_b...] = sum over paired axes of a[..] * b[..],
// evaluated by walking every output and summation index tuple.
inline Tensor naive_tensordot(const Tensor& a, const Tensor& b,
                              const std::vector<std::size_t>& axes_a,
                              const std::vector<std::size_t>& axes_b) {
  std::vector<bool> used_a(a.rank(), false), used_b(b.rank(), false);
  for (std::size_t ax : axes_a) used_a[ax] = true;
  for (std::size_t ax : axes_b) used_b[ax] = true;
  std::vector<std::size_t> free_a, free_b;
  for (std::size_t i = 0; i < a.rank(); ++i)
    if (!used_a[i]) free_a.push_back(i);
  for (std::size_t i = 0; i < b.rank(); ++i)
    if (!used_b[i]) free_b.push_back(i);

  Shape out_shape;
  for (std::size_t ax : free_a) out_shape.push_back(a.shape()[ax]);
  for (std::size_t ax : free_b) out_shape.push_back(b.shape()[ax]);
  Shape sum_shape;
  for (std::size_t ax : axes_a) sum_shape.push_back(a.shape()[ax]);

  auto sa = strides_of(a.shape());
  auto sb = strides_of(b.shape());
  std::size_t out_n = 1;
  for (std::size_t d : out_shape) out_n *= d;
  std::size_t sum_n = 1;
  for (std::size_t d : sum_shape) sum_n *= d;

  std::vector<double> out(out_n, 0.0);
  std::vector<std::size_t> oidx(out_shape.size(), 0);
  for (std::size_t of = 0; of < out_n; ++of) {
    // Decode output index.
    {
      std::size_t rem = of;
      for (std::size_t i = out_shape.size(); i-- > 0;) {
        oidx[i] = rem % out_shape[i];
        rem /= out_shape[i];
      }
    }
    std::size_t base_a = 0, base_b = 0;
    for (std::size_t i = 0; i < free_a.size(); ++i) base_a += oidx[i] * sa[free_a[i]];
    for (std::size_t i = 0; i < free_b.size(); ++i)
      base_b += oidx[free_a.size() + i] * sb[free_b[i]];
    double acc = 0.0;
    std::vector<std::size_t> sidx(sum_shape.size(), 0);
    for (std::size_t sf = 0; sf < sum_n; ++sf) {
      std::size_t rem = sf;
      for (std::size_t i = sum_shape.size(); i-- > 0;) {
        sidx[i] = rem % sum_shape[i];
        rem /= sum_shape[i];
      }
      std::size_t ia = base_a, ib = base_b;
      for (std::size_t i = 0; i < axes_a.size(); ++i) {
        ia += sidx[i] * sa[axes_a[i]];
        ib += sidx[i] * sb[axes_b[i]];
      }
      acc += a[ia] * b[ib];
    }
    out[of] = acc;
  }
  return Tensor::from_data(out_shape, std::move(out));
}

inline Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) acc += a[i * k + kk] * b[kk * n + j];
      out[i * n + j] = acc;
    }
  return Tensor::from_data(Shape{m, n}, std::move(out));
}

inline Tensor naive_batched_matmul(const Tensor& a, const Tensor& b) {
  std::size_t nb = a.shape()[0], m = a.shape()[1], k = a.shape()[2], n = b.shape()[2];
  std::vector<double> out(nb * m * n, 0.0);
  for (std::size_t bb = 0; bb < nb; ++bb)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t kk = 0; kk < k; ++kk)
          acc += a[bb * m * k + i * k + kk] * b[bb * k * n + kk * n + j];
        out[bb * m * n + i * n + j] = acc;
      }
  return Tensor::from_data(Shape{nb, m, n}, std::move(out));
}

inline Tensor naive_outer(const Tensor& a, const Tensor& b) {
  Shape out_shape = a.shape();
  out_shape.insert(out_shape.end(), b.shape().begin(), b.shape().end());
  std::vector<double> out(a.size() * b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) out[i * b.size() + j] = a[i] * b[j];
  return Tensor::from_data(out_shape, std::move(out));
}

// Dense state vector of an open-boundary core chain. cores[k] has shape
// (D_left, d_k, D_right) with size-1 bonds at both ends. The amplitude of a
// basis tuple is the product of the chain matrices, accumulated directly.
inline Tensor dense_chain_vector(const std::vector<Tensor>& cores) {
  std::size_t n = cores.size();
  Shape phys(n);
  std::size_t total = 1;
  for (std::size_t k = 0; k < n; ++k) {
    phys[k] = cores[k].shape()[1];
    total *= phys[k];
  }
  std::vector<double> out(total);
  std::vector<std::size_t> idx(n, 0);
  for (std::size_t flat = 0; flat < total; ++flat) {
    std::size_t rem = flat;
    for (std::size_t i = n; i-- > 0;) {
      idx[i] = rem % phys[i];
      rem /= phys[i];
    }
    std::vector<double> env{1.0};
    for (std::size_t k = 0; k < n; ++k) {
      std::size_t dl = cores[k].shape()[0], d = cores[k].shape()[1], dr = cores[k].shape()[2];
      std::vector<double> nxt(dr, 0.0);
      for (std::size_t al = 0; al < dl; ++al)
        for (std::size_t ar = 0; ar < dr; ++ar)
          nxt[ar] += env[al] * cores[k][al * d * dr + idx[k] * dr + ar];
      env = std::move(nxt);
    }
    out[flat] = env[0];
  }
  return Tensor::from_data(phys, std::move(out));
}

// Dense matrix of an operator core chain. cores[k] has shape
// (D_left, out_k, in_k, D_right) with size-1 bonds at the ends; the result is
// (prod out) x (prod in), rows indexed by the output tuple.
inline Tensor dense_chain_matrix(const std::vector<Tensor>& cores) {
  std::size_t n = cores.size();
  std::vector<std::size_t> outs(n), ins(n);
  std::size_t rows = 1, cols = 1;
  for (std::size_t k = 0; k < n; ++k) {
    outs[k] = cores[k].shape()[1];
    ins[k] = cores[k].shape()[2];
    rows *= outs[k];
    cols *= ins[k];
  }
  std::vector<double> out(rows * cols);
  std::vector<std::size_t> oidx(n, 0), iidx(n, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t rem = r;
    for (std::size_t i = n; i-- > 0;) {
      oidx[i] = rem % outs[i];
      rem /= outs[i];
    }
    for (std::size_t c = 0; c < cols; ++c) {
      std::size_t rem2 = c;
      for (std::size_t i = n; i-- > 0;) {
        iidx[i] = rem2 % ins[i];
        rem2 /= ins[i];
      }
      std::vector<double> env{1.0};
      for (std::size_t k = 0; k < n; ++k) {
        std::size_t dl = cores[k].shape()[0], dr = cores[k].shape()[3];
        std::size_t din = ins[k];
        std::vector<double> nxt(dr, 0.0);
        for (std::size_t al = 0; al < dl; ++al)
          for (std::size_t ar = 0; ar < dr; ++ar)
            nxt[ar] += env[al] *
                       cores[k][((al * outs[k] + oidx[k]) * din + iidx[k]) * dr + ar];
        env = std::move(nxt);
      }
      out[r * cols + c] = env[0];
    }
  }
  return Tensor::from_data(Shape{rows, cols}, std::move(out));
}

// Reduced density matrix of a dense state vector psi over sites
// [first, last], all sites of physical dimension d, by direct partial trace.
inline Tensor naive_reduced_density(const Tensor& psi, std::size_t n, std::size_t d,
                                    std::size_t first, std::size_t last) {
  std::size_t keep = last - first + 1;
  std::size_t dim_keep = 1;
  for (std::size_t i = 0; i < keep; ++i) dim_keep *= d;
  std::size_t dim_env = psi.size() / dim_keep;
  // Split a flat basis index into (left, kept, right) blocks.
  std::size_t right_n = 1;
  for (std::size_t i = last + 1; i < n; ++i) right_n *= d;
  std::vector<double> rho(dim_keep * dim_keep, 0.0);
  for (std::size_t ka = 0; ka < dim_keep; ++ka)
    for (std::size_t kb = 0; kb < dim_keep; ++kb) {
      double acc = 0.0;
      for (std::size_t e = 0; e < dim_env; ++e) {
        std::size_t left = e / right_n, right = e % right_n;
        std::size_t ia = (left * dim_keep + ka) * right_n + right;
        std::size_t ib = (left * dim_keep + kb) * right_n + right;
        acc += psi[ia] * psi[ib];
      }
      rho[ka * dim_keep + kb] = acc;
    }
  return Tensor::from_data(Shape{dim_keep, dim_keep}, std::move(rho));
}

// Central-difference gradient of a scalar function of one tensor entry.
inline double central_diff(const std::function<double(double)>& f, double x, double h = 1e-5) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

inline double rel_err(double analytic, double numeric) {
  double denom = std::abs(analytic) + std::abs(numeric);
  if (denom < 1e-8) denom = 1e-8;
  return std::abs(analytic - numeric) / denom;
}

}  // namespace oracles
