// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>

#include "kdpl/autodiff.hpp"
#include "kdpl/errors.hpp"
#include "kdpl/zero_shot.hpp"

namespace kdpl {

enum class KlMode { forward, reverse, symmetric };

inline std::string kl_mode_name(KlMode m) {
  switch (m) {
    case KlMode::forward: return "forward";
    case KlMode::reverse: return "reverse";
    case KlMode::symmetric: return "symmetric";
  }
  throw ContractViolation("unknown kl mode");
}

inline KlMode kl_mode_from_name(const std::string& s) {
  if (s == "forward") return KlMode::forward;
  if (s == "reverse") return KlMode::reverse;
  if (s == "symmetric") return KlMode::symmetric;
  throw ConfigError("unknown kl_mode: " + s);
}

struct DistillationConfig {
  KlMode kl_mode = KlMode::symmetric;
  double tau_student = 0.01;
  double tau_teacher = 0.01;
  double eps_floor = 1e-12;

  void validate() const {
    if (!(tau_student > 0.0) || !(tau_teacher > 0.0))
      throw ConfigError("temperatures must be positive");
    if (!(eps_floor > 0.0)) throw ConfigError("eps_floor must be positive");
  }
};

/// D_KL(p || q) = sum_i p_i ln((p_i + eps) / (q_i + eps)), natural log.
/// The eps floor keeps near-zero entries (routine at tau = 0.01) finite.
inline double kl_divergence(const ProbabilityDistribution& p, const ProbabilityDistribution& q,
                            double eps = 1e-12) {
  require_same_class_set(p, q);
  if (!(eps > 0.0)) throw ContractViolation("eps must be positive");
  double kl = 0.0;
  for (Eigen::Index i = 0; i < p.probs.size(); ++i)
    kl += p.probs(i) * std::log((p.probs(i) + eps) / (q.probs(i) + eps));
  return kl;
}

inline double kdpl_loss(const ProbabilityDistribution& p_teacher,
                        const ProbabilityDistribution& p_student, KlMode mode,
                        double eps = 1e-12) {
  switch (mode) {
    case KlMode::forward: return kl_divergence(p_teacher, p_student, eps);
    case KlMode::reverse: return kl_divergence(p_student, p_teacher, eps);
    case KlMode::symmetric:
      return kl_divergence(p_teacher, p_student, eps) + kl_divergence(p_student, p_teacher, eps);
  }
  throw ContractViolation("unknown kl mode");
}

/// Pseudo-label cross entropy: -ln(p_S[label] + eps).
inline double upl_star_loss(const ProbabilityDistribution& p_student, int pseudo_label,
                            double eps = 1e-12) {
  if (pseudo_label < 0 || pseudo_label >= p_student.size())
    throw ContractViolation("pseudo-label index out of range");
  return -std::log(p_student.probs(pseudo_label) + eps);
}

namespace ad {

/// KL between a constant teacher row and a gradient-bearing student row.
/// Both are 1 x C probability rows on the same tape.
inline Value kl_divergence(Tape& t, const Value& p, const Value& q, double eps) {
  if (p->value.cols() != q->value.cols()) throw ContractViolation("kl class-count mismatch");
  auto ratio = sub(t, log_eps(t, p, eps), log_eps(t, q, eps));
  return sum_all(t, hadamard(t, p, ratio));
}

inline Value kdpl_loss(Tape& t, const Value& p_teacher, const Value& p_student, KlMode mode,
                       double eps) {
  switch (mode) {
    case KlMode::forward: return kl_divergence(t, p_teacher, p_student, eps);
    case KlMode::reverse: return kl_divergence(t, p_student, p_teacher, eps);
    case KlMode::symmetric:
      return add(t, kl_divergence(t, p_teacher, p_student, eps),
                 kl_divergence(t, p_student, p_teacher, eps));
  }
  throw ContractViolation("unknown kl mode");
}

/// -ln(p[label] + eps) for cross-entropy style objectives.
inline Value nll_loss(Tape& t, const Value& probs, int label, double eps) {
  if (label < 0 || label >= probs->value.cols())
    throw ContractViolation("label index out of range");
  auto picked = t.make(probs->value.block(0, label, 1, 1), {probs}, [probs, label](const Matrix& g) {
    if (!probs->requires_grad) return;
    Matrix gin = Matrix::Zero(probs->value.rows(), probs->value.cols());
    gin(0, label) = g(0, 0);
    probs->accumulate(gin);
  });
  return scale(t, log_eps(t, picked, eps), -1.0);
}

}  // namespace ad
}  // namespace kdpl
