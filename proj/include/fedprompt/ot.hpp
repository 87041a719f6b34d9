#ifndef FEDPROMPT_OT_HPP
#define FEDPROMPT_OT_HPP

#include <Eigen/Dense>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "fedprompt/errors.hpp"

// Entropic partial optimal transport between image patch features and the
// two text features (shared and private prompt). Row marginals are upper
// bounds (each patch may ship at most alpha_i mass), column marginals are
// exact (each text atom receives beta_j). Solved by alternating scaling:
//   Q = exp(-C / lambda),  u <- min(1, alpha / (Q v)),  v <- beta / (Q^T u)
// which is block coordinate ascent on the dual of the entropic program and
// converges to T* = diag(u) Q diag(v).

namespace fedprompt {

inline constexpr double kScalingFloor = 1e-300;  // denominator floor

struct TransportProblem {
  Eigen::MatrixXd cost;   // V x 2, entries in [0, 2]
  Eigen::VectorXd alpha;  // V row caps, nonnegative
  Eigen::Vector2d beta{0.5, 0.5};  // column masses, nonnegative, sum to 1
  double lambda = 0.1;    // entropic regularization strength
  int max_iters = 100;
  double tol = 1e-8;  // stop when the sup-norm change in v drops below

  void validate() const {
    const Eigen::Index v = cost.rows();
    if (v < 1 || cost.cols() != 2) {
      throw ConfigError("transport: cost must be V x 2 with V >= 1");
    }
    if (!cost.allFinite()) throw ConfigError("transport: non-finite cost");
    if (cost.minCoeff() < -1e-9 || cost.maxCoeff() > 2.0 + 1e-9) {
      throw ConfigError("transport: cost entries must lie in [0, 2]");
    }
    if (alpha.size() != v) {
      throw ConfigError("transport: alpha size must match cost rows");
    }
    if (!alpha.allFinite() || alpha.minCoeff() < 0.0) {
      throw ConfigError("transport: alpha must be finite and nonnegative");
    }
    if (!beta.allFinite() || beta.minCoeff() < 0.0) {
      throw ConfigError("transport: beta must be finite and nonnegative");
    }
    if (std::abs(beta.sum() - 1.0) > 1e-12) {
      throw ConfigError("transport: beta must sum to 1");
    }
    if (alpha.sum() + 1e-12 < beta.sum()) {
      throw ConfigError("transport: total row capacity below total demand");
    }
    if (!(lambda > 0.0)) throw ConfigError("transport: lambda must be > 0");
    if (max_iters < 1) throw ConfigError("transport: max_iters must be >= 1");
    if (!(tol > 0.0)) throw ConfigError("transport: tol must be > 0");
  }
};

struct TransportPlan {
  Eigen::MatrixXd plan;  // V x 2
  Eigen::VectorXd u;     // final row scalings, in (0, 1]
  Eigen::Vector2d v;     // final column scalings
  int iterations_used = 0;
  bool converged = false;
  std::vector<double> v_change;  // sup-norm change in v per iteration
};

// Cosine cost between unit-row feature matrices, clamped to [0, 2] so
// rounding in the dot products cannot push entries outside the valid range.
inline Eigen::MatrixXd cost_matrix(const Eigen::MatrixXd& image_features,
                                   const Eigen::MatrixXd& text_features) {
  if (image_features.cols() != text_features.cols()) {
    throw ConfigError("cost_matrix: feature dimension mismatch");
  }
  if (!image_features.allFinite() || !text_features.allFinite()) {
    throw ConfigError("cost_matrix: non-finite features");
  }
  for (Eigen::Index i = 0; i < image_features.rows(); ++i) {
    if (std::abs(image_features.row(i).norm() - 1.0) > 1e-6) {
      throw ConfigError("cost_matrix: image feature row " + std::to_string(i) +
                        " is not unit norm");
    }
  }
  for (Eigen::Index j = 0; j < text_features.rows(); ++j) {
    if (std::abs(text_features.row(j).norm() - 1.0) > 1e-6) {
      throw ConfigError("cost_matrix: text feature row " + std::to_string(j) +
                        " is not unit norm");
    }
  }
  Eigen::MatrixXd c =
      (1.0 - (image_features * text_features.transpose()).array())
          .cwiseMax(0.0)
          .cwiseMin(2.0);
  return c;
}

inline TransportPlan solve_transport(const TransportProblem& p) {
  p.validate();
  const Eigen::Index n = p.cost.rows();

  // Scalar std::exp per entry: Eigen's vectorized exp returns junk subnormals
  // for arguments far below the underflow threshold, which would defeat the
  // dead-column detection below.
  Eigen::MatrixXd q(n, 2);
  for (Eigen::Index i = 0; i < n; ++i) {
    q(i, 0) = std::exp(-p.cost(i, 0) / p.lambda);
    q(i, 1) = std::exp(-p.cost(i, 1) / p.lambda);
  }
  for (int j = 0; j < 2; ++j) {
    if (q.col(j).maxCoeff() <= 0.0 && p.beta(j) > 0.0) {
      std::ostringstream msg;
      msg << "transport kernel column " << j
          << " underflowed to zero: exp(-C/lambda) vanished at lambda = "
          << p.lambda << "; increase lambda or reduce costs";
      throw NumericalError(msg.str());
    }
  }

  TransportPlan out;
  out.u = Eigen::VectorXd::Ones(n);
  out.v = Eigen::Vector2d::Ones();
  out.v_change.reserve(static_cast<std::size_t>(p.max_iters));

  for (int it = 0; it < p.max_iters; ++it) {
    Eigen::VectorXd qv = q * out.v;
    out.u = (p.alpha.array() / qv.array().max(kScalingFloor)).min(1.0);
    Eigen::Vector2d qtu = q.transpose() * out.u;
    Eigen::Vector2d v_new = p.beta.array() / qtu.array().max(kScalingFloor);
    double delta = (v_new - out.v).cwiseAbs().maxCoeff();
    out.v = v_new;
    out.v_change.push_back(delta);
    out.iterations_used = it + 1;
    if (delta < p.tol) {
      out.converged = true;
      break;
    }
  }

  out.plan = out.u.asDiagonal() * q * out.v.asDiagonal();
  if (!out.plan.allFinite()) {
    throw NumericalError("transport plan has non-finite entries");
  }
  return out;
}

// Regularized transport objective <C, T> + lambda <T, log T>, with the
// convention 0 log 0 = 0. lambda = 0 gives the plain linear cost exactly.
inline double transport_distance(const Eigen::MatrixXd& cost,
                                 const Eigen::MatrixXd& plan, double lambda) {
  if (cost.rows() != plan.rows() || cost.cols() != plan.cols()) {
    throw ConfigError("transport_distance: shape mismatch");
  }
  if (!cost.allFinite() || !plan.allFinite()) {
    throw ConfigError("transport_distance: non-finite input");
  }
  double linear = (cost.array() * plan.array()).sum();
  if (lambda == 0.0) return linear;
  double entropy = 0.0;
  for (Eigen::Index i = 0; i < plan.rows(); ++i) {
    for (Eigen::Index j = 0; j < plan.cols(); ++j) {
      double t = plan(i, j);
      if (t > 0.0) entropy += t * std::log(t);
    }
  }
  return linear + lambda * entropy;
}

inline double transport_distance(const TransportProblem& p,
                                 const TransportPlan& plan) {
  return transport_distance(p.cost, plan.plan, p.lambda);
}

// Class posterior from per-class transport distances:
// p_k proportional to exp((1 - d_k) / tau).
inline Eigen::VectorXd predict_from_distances(const Eigen::VectorXd& distances,
                                              double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("predict: temperature must be > 0");
  if (distances.size() < 1) throw ConfigError("predict: empty distances");
  if (!distances.allFinite()) throw ConfigError("predict: non-finite distances");
  Eigen::VectorXd logits = (1.0 - distances.array()) / temperature;
  double m = logits.maxCoeff();
  Eigen::VectorXd p = (logits.array() - m).exp();
  return p / p.sum();
}

struct TransportTextGradient {
  Eigen::MatrixXd shared;   // h_s x e
  Eigen::MatrixXd private_grad;  // h_p x e
  bool from_unconverged = false;
};

// Gradient of the transport distance with respect to the two prompt blocks,
// holding the plan fixed. By the envelope theorem the optimal plan T* is
// exactly dd/dC for the regularized optimum, and dC(i,j)/dE_T(j,:) =
// -image_features(i,:), so column j of the plan pulls its text feature
// toward the patches it matched. Chained through the encoder jacobians.
inline TransportTextGradient grad_distance_wrt_text(
    const TransportPlan& plan, const Eigen::MatrixXd& image_features,
    const Eigen::MatrixXd& jac_shared, const Eigen::MatrixXd& jac_private,
    Eigen::Index h_shared, Eigen::Index h_private) {
  if (plan.plan.rows() != image_features.rows() || plan.plan.cols() != 2) {
    throw ConfigError("grad_distance_wrt_text: plan/image shape mismatch");
  }
  const Eigen::Index d = image_features.cols();
  if (jac_shared.rows() != d || jac_private.rows() != d) {
    throw ConfigError("grad_distance_wrt_text: jacobian feature dim mismatch");
  }
  if (h_shared < 1 || jac_shared.cols() % h_shared != 0 || h_private < 1 ||
      jac_private.cols() % h_private != 0) {
    throw ConfigError("grad_distance_wrt_text: jacobian width mismatch");
  }
  const Eigen::Index e_s = jac_shared.cols() / h_shared;
  const Eigen::Index e_p = jac_private.cols() / h_private;

  // d distance / d text feature j = -sum_i T(i,j) * image_row_i.
  Eigen::VectorXd g_shared_feat =
      -(image_features.transpose() * plan.plan.col(0));
  Eigen::VectorXd g_private_feat =
      -(image_features.transpose() * plan.plan.col(1));

  Eigen::VectorXd flat_s = jac_shared.transpose() * g_shared_feat;
  Eigen::VectorXd flat_p = jac_private.transpose() * g_private_feat;

  TransportTextGradient out;
  out.shared = Eigen::Map<
      const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                          Eigen::RowMajor>>(flat_s.data(), h_shared, e_s);
  out.private_grad = Eigen::Map<
      const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                          Eigen::RowMajor>>(flat_p.data(), h_private, e_p);
  out.from_unconverged = !plan.converged;
  return out;
}

}  // namespace fedprompt

#endif  // FEDPROMPT_OT_HPP
