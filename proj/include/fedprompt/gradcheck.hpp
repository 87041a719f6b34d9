#ifndef FEDPROMPT_GRADCHECK_HPP
#define FEDPROMPT_GRADCHECK_HPP

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <vector>

#include "fedprompt/encoders.hpp"
#include "fedprompt/objective.hpp"
#include "fedprompt/rng.hpp"

// Finite-difference verification of the analytic gradients. The checker
// differentiates the loss value itself (central differences, step 1e-5) and
// never touches the analytic gradient code, so it is an independent oracle
// for that path.

namespace fedprompt {

inline Eigen::VectorXd central_difference(
    const std::function<double(const Eigen::VectorXd&)>& f,
    const Eigen::VectorXd& x0, double step) {
  if (!(step > 0.0)) throw ConfigError("central_difference: step must be > 0");
  Eigen::VectorXd g(x0.size());
  Eigen::VectorXd x = x0;
  for (Eigen::Index i = 0; i < x0.size(); ++i) {
    x(i) = x0(i) + step;
    double up = f(x);
    x(i) = x0(i) - step;
    double down = f(x);
    x(i) = x0(i);
    g(i) = (up - down) / (2.0 * step);
  }
  return g;
}

// Scale-free comparison: sup-norm of the difference over the larger
// sup-norm, floored so two near-zero gradients compare equal.
inline double max_relative_error(const Eigen::VectorXd& a,
                                 const Eigen::VectorXd& b) {
  double denom = std::max({a.cwiseAbs().maxCoeff(), b.cwiseAbs().maxCoeff(),
                           1e-10});
  return (a - b).cwiseAbs().maxCoeff() / denom;
}

inline Eigen::VectorXd flatten_rowmajor(const Eigen::MatrixXd& m) {
  Eigen::VectorXd out(m.size());
  Eigen::Index idx = 0;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) out(idx++) = m(i, j);
  }
  return out;
}

struct GradCheckReport {
  double softmax_shared = 0.0;   // plain cosine-softmax path, shared block
  double softmax_private = 0.0;  // same path, private block
  double dpac_private = 0.0;     // alignment term alone, private block
  double full_shared = 0.0;      // transport path with alignment, shared
  double full_private = 0.0;     // same, private block
};

// Builds a small seeded problem and compares every analytic gradient block
// against central differences of the corresponding loss. The temperature is
// kept moderate so no probability reaches the cross entropy floor, and the
// transport solver runs to a tight tolerance so the fixed-plan gradient is
// exact up to the envelope approximation.
inline GradCheckReport run_gradcheck(std::uint64_t seed) {
  const int h_s = 2, h_p = 2, e = 6, d = 7, v = 5, k = 3, batch = 2;
  EncoderConfig ecfg;
  ecfg.feature_dim = d;
  ecfg.patch_count = v;
  ecfg.embed_dim = e;
  ecfg.seed = derive_seed(seed, "gradcheck.encoders");
  auto [image_enc, text_enc] = build_encoders(ecfg);

  PromptSet ps = init_prompts(h_s, h_p, e, k, derive_seed(seed, "gradcheck.prompts"));
  Eigen::MatrixXd raw =
      gaussian_matrix(batch, e, 1.0, derive_seed(seed, "gradcheck.samples"));
  std::vector<int> labels;
  std::mt19937_64 rng(derive_seed(seed, "gradcheck.labels"));
  for (int b = 0; b < batch; ++b) {
    labels.push_back(static_cast<int>(rng() % k));
  }

  ObjectiveContext base;
  base.image_encoder = &image_enc;
  base.text_encoder = &text_enc;
  base.prediction.temperature = 0.5;
  base.ot.lambda = 0.1;
  base.ot.max_iters = 5000;
  base.ot.tol = 1e-13;
  base.align.scale = 4.0;
  base.align.dpac_weight = 1.0;
  base.dual_prompt = true;
  base.dpac_reference_shared =
      gaussian_matrix(h_s, e, 0.05, derive_seed(seed, "gradcheck.reference"));
  base.dpac_other_shared = {
      gaussian_matrix(h_s, e, 0.05, derive_seed(seed, "gradcheck.other", 0)),
      gaussian_matrix(h_s, e, 0.05, derive_seed(seed, "gradcheck.other", 1))};

  const double step = 1e-5;
  GradCheckReport report;

  auto check_blocks = [&](const ObjectiveContext& ctx, double* out_shared,
                          double* out_private) {
    LossReport analytic = total_loss_and_grad(ctx, ps, raw, labels);
    auto loss_at_shared = [&](const Eigen::VectorXd& flat) {
      PromptSet probe = ps;
      probe.shared = reshape_rowmajor(flat, h_s, e);
      return total_loss_and_grad(ctx, probe, raw, labels).total;
    };
    Eigen::VectorXd fd_shared =
        central_difference(loss_at_shared, flatten_rowmajor(ps.shared), step);
    *out_shared =
        max_relative_error(flatten_rowmajor(analytic.grad_shared), fd_shared);
    auto loss_at_private = [&](const Eigen::VectorXd& flat) {
      PromptSet probe = ps;
      probe.private_prompt = reshape_rowmajor(flat, h_p, e);
      return total_loss_and_grad(ctx, probe, raw, labels).total;
    };
    Eigen::VectorXd fd_private = central_difference(
        loss_at_private, flatten_rowmajor(ps.private_prompt), step);
    *out_private = max_relative_error(flatten_rowmajor(analytic.grad_private),
                                      fd_private);
  };

  {
    ObjectiveContext ctx = base;
    ctx.align.cmfac_enabled = false;
    ctx.align.dpac_enabled = false;
    check_blocks(ctx, &report.softmax_shared, &report.softmax_private);
  }
  {
    // Alignment term in isolation, differenced through the text encoder so
    // the chain rule across the normalization is covered.
    Eigen::VectorXd probe_class = ps.class_embeddings.row(0).transpose();
    Eigen::VectorXd own_shared =
        text_enc.encode(base.dpac_reference_shared, probe_class).feature;
    std::vector<Eigen::VectorXd> others;
    for (const auto& s : base.dpac_other_shared) {
      others.push_back(text_enc.encode(s, probe_class).feature);
    }
    auto dpac_at = [&](const Eigen::VectorXd& flat) {
      Eigen::MatrixXd prompt = reshape_rowmajor(flat, h_p, e);
      TextEncoding enc = text_enc.encode(prompt, probe_class);
      return dpac_client_term(enc.feature, own_shared, others,
                              base.align.scale)
          .loss;
    };
    Eigen::VectorXd fd = central_difference(
        dpac_at, flatten_rowmajor(ps.private_prompt), step);
    TextEncoding enc = text_enc.encode(ps.private_prompt, probe_class);
    DpacTerm term = dpac_client_term(enc.feature, own_shared, others,
                                     base.align.scale);
    Eigen::VectorXd analytic = enc.jacobian.transpose() * term.grad;
    report.dpac_private = max_relative_error(analytic, fd);
  }
  {
    ObjectiveContext ctx = base;
    ctx.align.cmfac_enabled = true;
    ctx.align.dpac_enabled = true;
    check_blocks(ctx, &report.full_shared, &report.full_private);
  }
  return report;
}

}  // namespace fedprompt

#endif  // FEDPROMPT_GRADCHECK_HPP
