#ifndef SPEAR_LOWRANK_HPP
#define SPEAR_LOWRANK_HPP

#include <cmath>
#include <stdexcept>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "spear/common.hpp"

// Exact reconstruction algebra: the weight gradient of a linear layer
// factors as dW = dZ * X^T, so any rank-b factorization dW = L * R is linked
// to the true one by an invertible b x b disaggregation matrix Q with
// dZ = L * Q and X^T = Q^{-1} * R.
namespace spear::lowrank {

struct LowRankFactors {
  Matrix left;             // L = U * S^{1/2}, m x b, orthogonal columns
  Matrix right;            // R = S^{1/2} * V^T, b x n
  Vector singular_values;  // full non-increasing spectrum of dW
  int inferred_b = 0;
};

struct DisaggregationMatrix {
  Matrix q;              // Q = directions * diag(column_scales)
  Vector column_scales;  // recovered s_i
  Matrix directions;     // unit-norm columns q̄_i
};

struct Reconstruction {
  Matrix inputs;       // X', n x b
  Matrix preact_grad;  // dZ', m x b
  double condition = 0.0;
  bool ill_conditioned = false;  // condition number above 1e12
};

// Reduced SVD factorization of the observed weight gradient. The batch size
// is inferred as the number of singular values above rank_rel_tol * sigma_1;
// noisy or DP gradients need a looser tolerance than the 1e-6 default.
inline LowRankFactors decompose(const Matrix& weight_grad, double rank_rel_tol = 1e-6) {
  require(rank_rel_tol > 0.0 && rank_rel_tol < 1.0, "rank_rel_tol must be in (0,1)");
  require(weight_grad.allFinite(), "weight gradient contains non-finite entries");

  Eigen::BDCSVD<Matrix> svd(weight_grad, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vector& sv = svd.singularValues();
  if (sv.size() == 0 || sv(0) <= 0.0)
    throw std::runtime_error("decompose: all-zero gradient, nothing to recover");

  int b = 0;
  while (b < sv.size() && sv(b) > rank_rel_tol * sv(0)) ++b;

  LowRankFactors factors;
  factors.singular_values = sv;
  factors.inferred_b = b;
  const Vector root = sv.head(b).array().sqrt();
  factors.left = svd.matrixU().leftCols(b) * root.asDiagonal();
  factors.right = root.asDiagonal() * svd.matrixV().leftCols(b).transpose();
  return factors;
}

// Scale recovery from the bias gradient: s = Qbar^{-1} * L^{-L} * db. Any
// left inverse of L works; L from decompose has orthogonal columns with
// squared norm sigma_i, so L^{-L} = diag(1/sigma_i) * L^T is used directly.
inline Vector recover_scales(const Matrix& directions, const Matrix& left,
                             const Vector& bias_grad) {
  const Index b = directions.cols();
  require(directions.rows() == b, "direction matrix must be square");
  require(left.cols() == b, "left factor width mismatch");
  require(left.rows() == bias_grad.size(), "bias gradient length mismatch");

  const Vector col_sq = left.colwise().squaredNorm();
  require(col_sq.minCoeff() > 0.0, "left factor has a zero column");
  const Vector projected = col_sq.cwiseInverse().asDiagonal() * (left.transpose() * bias_grad);

  Eigen::FullPivLU<Matrix> lu(directions);
  lu.setThreshold(1e-12);
  if (!lu.isInvertible())
    throw std::runtime_error("recover_scales: singular direction set");
  return lu.solve(projected);
}

inline DisaggregationMatrix assemble_disaggregation(const Matrix& directions,
                                                    const Vector& scales) {
  DisaggregationMatrix d;
  d.directions = directions;
  d.column_scales = scales;
  d.q = directions * scales.asDiagonal();
  return d;
}

// X'^T = Q^{-1} * R and dZ' = L * Q. An ill-conditioned Q (> 1e12) is
// flagged, not rejected: the result may still be usable.
inline Reconstruction reconstruct(const DisaggregationMatrix& disagg,
                                  const LowRankFactors& factors) {
  const Index b = disagg.q.cols();
  require(disagg.q.rows() == b, "Q must be square");
  require(factors.left.cols() == b && factors.right.rows() == b,
          "factor shapes do not match Q");

  Eigen::JacobiSVD<Matrix> svd(disagg.q, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const double smin = svd.singularValues()(b - 1);
  const double smax = svd.singularValues()(0);
  if (smin <= 0.0) throw std::runtime_error("reconstruct: singular Q");

  Reconstruction rec;
  rec.condition = smax / smin;
  rec.ill_conditioned = rec.condition > 1e12;
  rec.inputs = svd.solve(factors.right).transpose();
  rec.preact_grad = factors.left * disagg.q;
  return rec;
}

}  // namespace spear::lowrank

#endif  // SPEAR_LOWRANK_HPP
