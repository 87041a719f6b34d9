#ifndef FEDPROMPT_OBJECTIVE_HPP
#define FEDPROMPT_OBJECTIVE_HPP

#include <Eigen/Dense>
#include <cmath>
#include <string>
#include <vector>

#include "fedprompt/encoders.hpp"
#include "fedprompt/errors.hpp"
#include "fedprompt/ot.hpp"
#include "fedprompt/prompts.hpp"

// Local training objective: cross entropy over the class posterior (either
// the transport-distance path or the plain cosine-softmax path) plus a
// weighted alignment term that pulls each client's private prompt toward
// the broadcast shared prompt and away from the other clients' snapshots.
// Gradients flow to the prompt vectors only; encoders and class embeddings
// are frozen.

namespace fedprompt {

struct OtParams {
  double lambda = 0.1;
  int max_iters = 100;
  double tol = 1e-8;
  double alpha_total = 2.0;  // row caps are alpha_total / V each
  Eigen::Vector2d beta{0.5, 0.5};

  void validate() const {
    if (!(lambda > 0.0)) throw ConfigError("ot.lambda must be > 0");
    if (max_iters < 1) throw ConfigError("ot.max_iters must be >= 1");
    if (!(tol > 0.0)) throw ConfigError("ot.tol must be > 0");
    if (!(alpha_total > 0.0)) throw ConfigError("ot.alpha_total must be > 0");
    if (!beta.allFinite() || beta.minCoeff() < 0.0 ||
        std::abs(beta.sum() - 1.0) > 1e-12) {
      throw ConfigError("ot.beta must be nonnegative and sum to 1");
    }
  }
};

struct AlignmentConfig {
  double scale = 10.0;       // exponent scale s in the contrastive term
  double dpac_weight = 1.0;  // mu, weight of the alignment term in the total
  bool dpac_enabled = true;
  bool cmfac_enabled = true;  // transport prediction path on/off

  void validate() const {
    if (!(scale > 0.0)) throw ConfigError("dpac_scale must be > 0");
    if (!(dpac_weight >= 0.0) || !std::isfinite(dpac_weight)) {
      throw ConfigError("dpac_weight must be finite and >= 0");
    }
  }
};

// Everything a local step needs beyond the prompt state. The two snapshot
// fields are constants within a round: the broadcast global shared prompt
// and the other clients' shared prompts from the previous aggregation.
struct ObjectiveContext {
  const ImageEncoder* image_encoder = nullptr;
  const TextEncoder* text_encoder = nullptr;
  PredictionConfig prediction;
  OtParams ot;
  AlignmentConfig align;
  bool dual_prompt = true;
  Eigen::MatrixXd dpac_reference_shared;           // h_s x e
  std::vector<Eigen::MatrixXd> dpac_other_shared;  // excludes own client

  void validate() const {
    if (image_encoder == nullptr || text_encoder == nullptr) {
      throw ConfigError("objective: encoders not set");
    }
    prediction.validate();
    ot.validate();
    align.validate();
  }
};

inline Eigen::MatrixXd reshape_rowmajor(const Eigen::VectorXd& flat,
                                        Eigen::Index rows, Eigen::Index cols) {
  if (flat.size() != rows * cols) {
    throw ConfigError("reshape: size mismatch");
  }
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                        Eigen::RowMajor>>(flat.data(), rows,
                                                          cols);
}

// Per-class text features for both prompt roles. With dual_prompt off the
// private slots alias the shared ones: the second transport atom duplicates
// the shared feature and its gradient chains back to the shared prompt.
struct ClassTextFeatures {
  Eigen::MatrixXd shared_features;   // K x d, unit rows
  Eigen::MatrixXd private_features;  // K x d, unit rows
  std::vector<Eigen::MatrixXd> shared_jacobians;   // d x (h_s * e) each
  std::vector<Eigen::MatrixXd> private_jacobians;  // d x (h_p * e) each
};

inline ClassTextFeatures encode_class_texts(const ObjectiveContext& ctx,
                                            const PromptSet& ps,
                                            bool want_jacobians) {
  const Eigen::Index n_classes = ps.class_embeddings.rows();
  const Eigen::Index d = ctx.text_encoder->config().feature_dim;
  ClassTextFeatures out;
  out.shared_features.resize(n_classes, d);
  out.private_features.resize(n_classes, d);
  if (want_jacobians) {
    out.shared_jacobians.resize(static_cast<std::size_t>(n_classes));
    out.private_jacobians.resize(static_cast<std::size_t>(n_classes));
  }
  for (Eigen::Index k = 0; k < n_classes; ++k) {
    auto [sp, ce] = assemble_prompt(ps, static_cast<int>(k), PromptRole::Shared);
    TextEncoding enc_s = ctx.text_encoder->encode(sp, ce);
    out.shared_features.row(k) = enc_s.feature.transpose();
    if (want_jacobians) {
      out.shared_jacobians[static_cast<std::size_t>(k)] =
          std::move(enc_s.jacobian);
    }
    if (ctx.dual_prompt) {
      auto [pp, ce2] =
          assemble_prompt(ps, static_cast<int>(k), PromptRole::Private);
      TextEncoding enc_p = ctx.text_encoder->encode(pp, ce2);
      out.private_features.row(k) = enc_p.feature.transpose();
      if (want_jacobians) {
        out.private_jacobians[static_cast<std::size_t>(k)] =
            std::move(enc_p.jacobian);
      }
    } else {
      out.private_features.row(k) = out.shared_features.row(k);
      if (want_jacobians) {
        out.private_jacobians[static_cast<std::size_t>(k)] =
            out.shared_jacobians[static_cast<std::size_t>(k)];
      }
    }
  }
  return out;
}

struct SampleForward {
  ImageEncoding image;
  Eigen::VectorXd probs;   // K
  Eigen::VectorXd scores;  // K: transport distances, or cosines on the
                           // softmax path
  std::vector<TransportPlan> plans;  // K entries on the transport path
  bool any_unconverged = false;
};

inline SampleForward forward_sample(const ObjectiveContext& ctx,
                                    const ClassTextFeatures& feats,
                                    const Eigen::VectorXd& raw) {
  const Eigen::Index n_classes = feats.shared_features.rows();
  SampleForward out;
  out.image = ctx.image_encoder->encode(raw);
  if (ctx.align.cmfac_enabled) {
    const Eigen::Index v = out.image.patch_features.rows();
    Eigen::VectorXd alpha = Eigen::VectorXd::Constant(
        v, ctx.ot.alpha_total / static_cast<double>(v));
    out.scores.resize(n_classes);
    out.plans.resize(static_cast<std::size_t>(n_classes));
    for (Eigen::Index k = 0; k < n_classes; ++k) {
      Eigen::MatrixXd text_atoms(2, feats.shared_features.cols());
      text_atoms.row(0) = feats.shared_features.row(k);
      text_atoms.row(1) = feats.private_features.row(k);
      TransportProblem prob;
      prob.cost = cost_matrix(out.image.patch_features, text_atoms);
      prob.alpha = alpha;
      prob.beta = ctx.ot.beta;
      prob.lambda = ctx.ot.lambda;
      prob.max_iters = ctx.ot.max_iters;
      prob.tol = ctx.ot.tol;
      TransportPlan plan = solve_transport(prob);
      out.scores(k) = transport_distance(prob, plan);
      if (!plan.converged) out.any_unconverged = true;
      out.plans[static_cast<std::size_t>(k)] = std::move(plan);
    }
    out.probs = predict_from_distances(out.scores, ctx.prediction.temperature);
  } else if (ctx.dual_prompt) {
    // Dual prompts without the transport path: classes score by the mean of
    // the shared and private cosines.
    Eigen::VectorXd cos_s = feats.shared_features * out.image.pooled_feature;
    Eigen::VectorXd cos_p = feats.private_features * out.image.pooled_feature;
    out.scores = 0.5 * (cos_s + cos_p);
    out.probs = stable_softmax(out.scores / ctx.prediction.temperature);
  } else {
    out.scores = feats.shared_features * out.image.pooled_feature;
    out.probs = predict_softmax_cosine(feats.shared_features,
                                       out.image.pooled_feature,
                                       ctx.prediction);
  }
  return out;
}

// Cross entropy -log p[label] with the probability floored at 1e-12 so a
// fully confident wrong prediction cannot produce an infinite loss. The
// clamped flag reports whether the floor engaged.
inline double cross_entropy(const Eigen::VectorXd& probs, int label,
                            bool* clamped = nullptr) {
  if (label < 0 || label >= probs.size()) {
    throw ConfigError("cross_entropy: label " + std::to_string(label) +
                      " out of range [0, " + std::to_string(probs.size()) +
                      ")");
  }
  if (!probs.allFinite()) {
    throw ConfigError("cross_entropy: non-finite probabilities");
  }
  double p = probs(label);
  if (p < 1e-12) {
    p = 1e-12;
    if (clamped != nullptr) *clamped = true;
  }
  return -std::log(p);
}

struct DpacTerm {
  double loss = 0.0;
  Eigen::VectorXd grad;  // wrt the un-normalized private text feature
};

// Contrastive alignment of one client's private text feature against the
// broadcast shared feature (positive) and the other clients' shared
// features (negatives): log(1 + sum_j exp(s * (a_j - a_own))). Inputs are
// raw feature vectors; both sides are L2 normalized here.
inline DpacTerm dpac_client_term(const Eigen::VectorXd& private_feature,
                                 const Eigen::VectorXd& own_shared_feature,
                                 const std::vector<Eigen::VectorXd>& others,
                                 double scale) {
  if (!(scale > 0.0)) throw ConfigError("dpac: scale must be > 0");
  if (private_feature.size() != own_shared_feature.size()) {
    throw ConfigError("dpac: feature dimension mismatch");
  }
  const double pn = private_feature.norm();
  if (pn < 1e-300) throw NumericalError("dpac: zero private feature");
  Eigen::VectorXd np = private_feature / pn;

  auto normalized = [](const Eigen::VectorXd& x) {
    double n = x.norm();
    if (n < 1e-300) throw NumericalError("dpac: zero shared feature");
    return Eigen::VectorXd(x / n);
  };
  Eigen::VectorXd own = normalized(own_shared_feature);

  DpacTerm out;
  out.grad = Eigen::VectorXd::Zero(private_feature.size());
  if (others.empty()) return out;

  double a_own = np.dot(own);
  double sum = 0.0;
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(private_feature.size());
  for (const auto& other : others) {
    if (other.size() != private_feature.size()) {
      throw ConfigError("dpac: feature dimension mismatch");
    }
    Eigen::VectorXd oj = normalized(other);
    double w = std::exp(scale * (np.dot(oj) - a_own));
    sum += w;
    acc += w * (oj - own);
  }
  out.loss = std::log1p(sum);
  // d loss / d np, then through the normalization of private_feature.
  Eigen::VectorXd g_np = (scale / (1.0 + sum)) * acc;
  out.grad = (g_np - np * np.dot(g_np)) / pn;
  return out;
}

inline double dpac_aggregate(const std::vector<double>& client_losses) {
  if (client_losses.empty()) {
    throw ConfigError("dpac_aggregate: no client losses");
  }
  double s = 0.0;
  for (double v : client_losses) s += v;
  return s / static_cast<double>(client_losses.size());
}

struct LossReport {
  double ce = 0.0;    // mean cross entropy over the batch
  double dpac = 0.0;  // unweighted alignment term (zero when disabled)
  double total = 0.0;
  Eigen::MatrixXd grad_shared;   // h_s x e
  Eigen::MatrixXd grad_private;  // h_p x e, zero when dual_prompt is off
  bool ce_clamped = false;
  bool ot_unconverged = false;
};

// Batch loss and analytic gradients. raw_batch holds one sample per row.
// Transport plans are treated as constants of the gradient (the envelope
// theorem makes that exact at the regularized optimum).
inline LossReport total_loss_and_grad(const ObjectiveContext& ctx,
                                      const PromptSet& ps,
                                      const Eigen::MatrixXd& raw_batch,
                                      const std::vector<int>& labels) {
  ctx.validate();
  const Eigen::Index batch = raw_batch.rows();
  if (batch < 1) throw ConfigError("total_loss_and_grad: empty batch");
  if (static_cast<Eigen::Index>(labels.size()) != batch) {
    throw ConfigError("total_loss_and_grad: labels/batch size mismatch");
  }
  const Eigen::Index n_classes = ps.class_embeddings.rows();
  const Eigen::Index h_s = ps.shared.rows();
  const Eigen::Index h_p = ps.private_prompt.rows();
  const double inv_tau = 1.0 / ctx.prediction.temperature;

  ClassTextFeatures feats = encode_class_texts(ctx, ps, true);

  LossReport report;
  report.grad_shared = Eigen::MatrixXd::Zero(h_s, ps.shared.cols());
  report.grad_private =
      Eigen::MatrixXd::Zero(h_p, ps.private_prompt.cols());

  double ce_sum = 0.0;
  for (Eigen::Index b = 0; b < batch; ++b) {
    const int y = labels[static_cast<std::size_t>(b)];
    if (y < 0 || y >= n_classes) {
      throw ConfigError("total_loss_and_grad: label out of range");
    }
    SampleForward fwd = forward_sample(ctx, feats, raw_batch.row(b).transpose());
    if (fwd.any_unconverged) report.ot_unconverged = true;
    ce_sum += cross_entropy(fwd.probs, y, &report.ce_clamped);

    if (ctx.align.cmfac_enabled) {
      for (Eigen::Index k = 0; k < n_classes; ++k) {
        // d CE / d distance_k = -(p_k - [k == y]) / tau.
        double coeff = -(fwd.probs(k) - (k == y ? 1.0 : 0.0)) * inv_tau;
        TransportTextGradient g = grad_distance_wrt_text(
            fwd.plans[static_cast<std::size_t>(k)], fwd.image.patch_features,
            feats.shared_jacobians[static_cast<std::size_t>(k)],
            feats.private_jacobians[static_cast<std::size_t>(k)], h_s,
            ctx.dual_prompt ? h_p : h_s);
        report.grad_shared += coeff * g.shared;
        if (ctx.dual_prompt) {
          report.grad_private += coeff * g.private_grad;
        } else {
          report.grad_shared += coeff * g.private_grad;
        }
      }
    } else {
      const double weight = ctx.dual_prompt ? 0.5 : 1.0;
      for (Eigen::Index k = 0; k < n_classes; ++k) {
        // d CE / d cosine_k = (p_k - [k == y]) / tau.
        double coeff = (fwd.probs(k) - (k == y ? 1.0 : 0.0)) * inv_tau * weight;
        Eigen::VectorXd flat =
            feats.shared_jacobians[static_cast<std::size_t>(k)].transpose() *
            fwd.image.pooled_feature;
        report.grad_shared +=
            coeff * reshape_rowmajor(flat, h_s, ps.shared.cols());
        if (ctx.dual_prompt) {
          Eigen::VectorXd flat_p =
              feats.private_jacobians[static_cast<std::size_t>(k)]
                  .transpose() *
              fwd.image.pooled_feature;
          report.grad_private +=
              coeff * reshape_rowmajor(flat_p, h_p, ps.private_prompt.cols());
        }
      }
    }
  }
  report.grad_shared /= static_cast<double>(batch);
  report.grad_private /= static_cast<double>(batch);
  report.ce = ce_sum / static_cast<double>(batch);

  const bool dpac_active = ctx.align.dpac_enabled && ctx.dual_prompt;
  if (dpac_active) {
    if (ctx.dpac_reference_shared.size() == 0) {
      throw ConfigError("dpac enabled but no reference shared prompt set");
    }
    // Probe class 0 carries the alignment: one feature per prompt set.
    Eigen::VectorXd probe_class = ps.class_embeddings.row(0).transpose();
    TextEncoding enc_p =
        ctx.text_encoder->encode(ps.private_prompt, probe_class);
    Eigen::VectorXd own_shared =
        ctx.text_encoder->encode(ctx.dpac_reference_shared, probe_class)
            .feature;
    std::vector<Eigen::VectorXd> others;
    others.reserve(ctx.dpac_other_shared.size());
    for (const auto& s : ctx.dpac_other_shared) {
      others.push_back(ctx.text_encoder->encode(s, probe_class).feature);
    }
    DpacTerm term = dpac_client_term(enc_p.feature, own_shared, others,
                                     ctx.align.scale);
    report.dpac = term.loss;
    if (ctx.align.dpac_weight != 0.0) {
      Eigen::VectorXd flat = enc_p.jacobian.transpose() * term.grad;
      report.grad_private += ctx.align.dpac_weight *
                             reshape_rowmajor(flat, h_p,
                                              ps.private_prompt.cols());
    }
  }

  report.total = report.ce +
                 (dpac_active ? ctx.align.dpac_weight * report.dpac : 0.0);
  return report;
}

inline void sgd_step(Eigen::MatrixXd& params, const Eigen::MatrixXd& grad,
                     double learning_rate) {
  if (params.rows() != grad.rows() || params.cols() != grad.cols()) {
    throw ConfigError("sgd_step: parameter/gradient shape mismatch");
  }
  if (!std::isfinite(learning_rate)) {
    throw ConfigError("sgd_step: learning rate must be finite");
  }
  params -= learning_rate * grad;
}

// Fraction of samples whose argmax class matches the label. Ties resolve to
// the lowest class index.
inline double evaluate_accuracy(const ObjectiveContext& ctx,
                                const PromptSet& ps,
                                const Eigen::MatrixXd& samples,
                                const std::vector<int>& labels,
                                const std::vector<int>& indices) {
  ctx.validate();
  if (indices.empty()) {
    throw ConfigError("evaluate_accuracy: empty index list");
  }
  ClassTextFeatures feats = encode_class_texts(ctx, ps, false);
  int correct = 0;
  for (int idx : indices) {
    if (idx < 0 || idx >= samples.rows()) {
      throw ConfigError("evaluate_accuracy: sample index out of range");
    }
    SampleForward fwd =
        forward_sample(ctx, feats, samples.row(idx).transpose());
    int best = 0;
    for (Eigen::Index k = 1; k < fwd.probs.size(); ++k) {
      if (fwd.probs(k) > fwd.probs(best)) best = static_cast<int>(k);
    }
    if (best == labels[static_cast<std::size_t>(idx)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(indices.size());
}

}  // namespace fedprompt

#endif  // FEDPROMPT_OBJECTIVE_HPP
