#pragma once

// Centered kernel alignment between two representations of the same points.

#include <Eigen/Dense>
#include <cmath>
#include <cstddef>

#include "dtopo/dataset.hpp"
#include "dtopo/error.hpp"
#include "dtopo/knn_graph.hpp"
#include "dtopo/parallel.hpp"

namespace dtopo {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Eigen::Map<const RowMatrix> as_eigen(const ActivationMatrix& x) {
  return {x.values().data(), static_cast<Eigen::Index>(x.n_points()), static_cast<Eigen::Index>(x.n_features())};
}

inline RowMatrix center_columns(const ActivationMatrix& x) {
  RowMatrix c = as_eigen(x);
  c.rowwise() -= c.colwise().mean();
  return c;
}

/// Linear CKA with column-centred inputs. Uses D x D feature products when
/// both feature counts are below N and N x N Gram matrices otherwise.
inline double linear_cka(const ActivationMatrix& x, const ActivationMatrix& y) {
  if (x.n_points() != y.n_points()) throw DataError("CKA: representations have different N");
  const RowMatrix xc = center_columns(x);
  const RowMatrix yc = center_columns(y);
  double numerator, denominator;
  if (x.n_features() < x.n_points() && y.n_features() < y.n_points()) {
    numerator = (yc.transpose() * xc).squaredNorm();
    denominator = (xc.transpose() * xc).norm() * (yc.transpose() * yc).norm();
  } else {
    const RowMatrix k = xc * xc.transpose();
    const RowMatrix l = yc * yc.transpose();
    numerator = k.cwiseProduct(l).sum();
    denominator = k.norm() * l.norm();
  }
  if (!(denominator > 0.0)) throw NumericalError("CKA: zero-variance representation");
  return numerator / denominator;
}

/// exp(-|xi - xj|^2 / (2 sigma^2)) for all pairs.
inline RowMatrix gaussian_gram(const ActivationMatrix& x, double sigma, unsigned workers = 1) {
  const std::size_t n = x.n_points();
  RowMatrix k(n, n);
  const double scale = -1.0 / (2.0 * sigma * sigma);
  parallel_for(n, workers, [&](std::size_t i) {
    k(i, i) = 1.0;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) k(i, j) = std::exp(scale * squared_distance(x.row(i), x.row(j)));
  });
  return k;
}

/// Centring of a Gram matrix as in the unbiased HSIC estimator: zero the
/// diagonal, subtract corrected row/column means, zero the diagonal again.
inline void center_gram_unbiased(RowMatrix& k) {
  const auto n = k.rows();
  if (n < 3) throw DataError("unbiased Gram centring needs at least 3 points");
  k.diagonal().setZero();
  Eigen::VectorXd means = k.colwise().sum().transpose() / static_cast<double>(n - 2);
  means.array() -= means.sum() / (2.0 * static_cast<double>(n - 1));
  k.colwise() -= means;
  k.rowwise() -= means.transpose();
  k.diagonal().setZero();
}

/// Kernel bandwidth: `fraction` times the mean first-neighbour distance.
inline double gaussian_bandwidth(const ActivationMatrix& x, double fraction, unsigned workers = 1) {
  if (!(fraction > 0.0)) throw UsageError("CKA bandwidth fraction must be positive");
  const double sigma = fraction * mean_first_nn_distance(build_knn_graph(x, 1, workers));
  if (!(sigma > 0.0)) throw NumericalError("Gaussian CKA: every point has an identical twin; bandwidth is zero");
  return sigma;
}

inline double gaussian_cka(const ActivationMatrix& x, const ActivationMatrix& y, double bandwidth_fraction,
                           unsigned workers = 1) {
  if (x.n_points() != y.n_points()) throw DataError("CKA: representations have different N");
  RowMatrix k = gaussian_gram(x, gaussian_bandwidth(x, bandwidth_fraction, workers), workers);
  RowMatrix l = gaussian_gram(y, gaussian_bandwidth(y, bandwidth_fraction, workers), workers);
  center_gram_unbiased(k);
  center_gram_unbiased(l);
  const double denominator = k.norm() * l.norm();
  if (!(denominator > 0.0)) throw NumericalError("Gaussian CKA: degenerate Gram matrix");
  return k.cwiseProduct(l).sum() / denominator;
}

}  // namespace dtopo
