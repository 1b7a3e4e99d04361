#pragma once

// Exact soft-MDP computations on small finite MDPs, used to certify the
// guidance-selection improvement bounds numerically.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "iob/errors.hpp"
#include "iob/rng.hpp"

namespace iob::tabular {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Finite MDP (S, A, p, r, gamma). transition[a](s, s') = p(s'|s,a).
struct TabularMDP {
  std::size_t num_states = 0;
  std::size_t num_actions = 0;
  std::vector<Matrix> transition;
  Matrix reward;  // |S| x |A|
  double gamma = 0.9;

  double p(std::size_t s, std::size_t a, std::size_t next) const { return transition[a](s, next); }

  void validate() const {
    if (num_states == 0 || num_actions == 0) throw DomainError("TabularMDP: empty state or action set");
    if (!(gamma >= 0.0 && gamma < 1.0)) throw DomainError("TabularMDP: discount must lie in [0, 1)");
    if (transition.size() != num_actions) throw ShapeError("TabularMDP: one transition matrix per action");
    if (reward.rows() != static_cast<Eigen::Index>(num_states) ||
        reward.cols() != static_cast<Eigen::Index>(num_actions))
      throw ShapeError("TabularMDP: reward table shape");
    if (!reward.allFinite()) throw DomainError("TabularMDP: non-finite reward");
    for (const auto& t : transition) {
      if (t.rows() != static_cast<Eigen::Index>(num_states) || t.cols() != static_cast<Eigen::Index>(num_states))
        throw ShapeError("TabularMDP: transition matrix shape");
      if ((t.array() < 0.0).any() || (t.array() > 1.0).any())
        throw DomainError("TabularMDP: probability outside [0, 1]");
      for (Eigen::Index s = 0; s < t.rows(); ++s)
        if (std::abs(t.row(s).sum() - 1.0) > 1e-12) throw DomainError("TabularMDP: transition row does not sum to 1");
    }
  }
};

/// pi(a|s) as an |S| x |A| row-stochastic table.
struct TabularPolicy {
  Matrix prob;

  std::size_t num_states() const { return static_cast<std::size_t>(prob.rows()); }
  std::size_t num_actions() const { return static_cast<std::size_t>(prob.cols()); }

  static TabularPolicy uniform(std::size_t states, std::size_t actions) {
    return {Matrix::Constant(static_cast<Eigen::Index>(states), static_cast<Eigen::Index>(actions),
                             1.0 / static_cast<double>(actions))};
  }

  void validate(const TabularMDP& mdp) const {
    if (num_states() != mdp.num_states || num_actions() != mdp.num_actions)
      throw ShapeError("TabularPolicy: shape does not match MDP");
    for (Eigen::Index s = 0; s < prob.rows(); ++s) validate_row(prob.row(s));
  }

  template <class Row>
  static void validate_row(const Row& row) {
    if (!row.allFinite() || (row.array() < 0.0).any())
      throw DomainError("TabularPolicy: negative or non-finite probability");
    if (std::abs(row.sum() - 1.0) > 1e-12) throw DomainError("TabularPolicy: row does not sum to 1");
  }
};

struct SoftEval {
  Matrix q;  // |S| x |A|
  Vector v;  // |S|
  double alpha = 0.0;
  double residual = 0.0;
};

// 0 log 0 = 0
inline double xlogx(double x) { return x > 0.0 ? x * std::log(x) : 0.0; }

template <class Row>
double entropy(const Row& dist) {
  double h = 0.0;
  for (Eigen::Index a = 0; a < dist.size(); ++a) h -= xlogx(dist(a));
  return h;
}

/// E_{a~dist}[q(a) - alpha log dist(a)]
template <class Row, class QRow>
double soft_value_of(const Row& dist, const QRow& q, double alpha) {
  double v = 0.0;
  for (Eigen::Index a = 0; a < dist.size(); ++a)
    if (dist(a) > 0.0) v += dist(a) * (q(a) - alpha * std::log(dist(a)));
  return v;
}

inline Vector soft_v_from_q(const Matrix& q, const TabularPolicy& pi, double alpha) {
  Vector v(q.rows());
  for (Eigen::Index s = 0; s < q.rows(); ++s) v(s) = soft_value_of(pi.prob.row(s), q.row(s), alpha);
  return v;
}

inline Matrix q_from_v(const TabularMDP& mdp, const Vector& v) {
  Matrix q = mdp.reward;
  for (std::size_t a = 0; a < mdp.num_actions; ++a) q.col(static_cast<Eigen::Index>(a)) += mdp.gamma * mdp.transition[a] * v;
  return q;
}

/// Exact solve of (I - gamma P_pi) V = r_pi + alpha H_pi.
inline SoftEval soft_policy_evaluation_linear(const TabularMDP& mdp, const TabularPolicy& pi, double alpha) {
  const auto n = static_cast<Eigen::Index>(mdp.num_states);
  Matrix p_pi = Matrix::Zero(n, n);
  Vector rhs = Vector::Zero(n);
  for (Eigen::Index s = 0; s < n; ++s) {
    for (std::size_t a = 0; a < mdp.num_actions; ++a) {
      const double w = pi.prob(s, static_cast<Eigen::Index>(a));
      p_pi.row(s) += w * mdp.transition[a].row(s);
      rhs(s) += w * mdp.reward(s, static_cast<Eigen::Index>(a)) - alpha * xlogx(w);
    }
  }
  Matrix lhs = Matrix::Identity(n, n) - mdp.gamma * p_pi;
  SoftEval out;
  out.alpha = alpha;
  out.v = lhs.fullPivLu().solve(rhs);
  out.q = q_from_v(mdp, out.v);
  out.residual = (soft_v_from_q(out.q, pi, alpha) - out.v).cwiseAbs().maxCoeff();
  return out;
}

/// Fixed point of the soft Bellman equations by iteration, to `tolerance` in
/// sup norm. Falls back to the exact linear solve if the iteration cap is hit
/// and `allow_fallback` is set; otherwise throws ConvergenceError.
inline SoftEval soft_policy_evaluation(const TabularMDP& mdp, const TabularPolicy& pi, double alpha,
                                       double tolerance = 1e-10, std::size_t max_iterations = 1'000'000,
                                       bool allow_fallback = true) {
  mdp.validate();
  pi.validate(mdp);
  if (!std::isfinite(alpha) || alpha < 0.0) throw DomainError("soft_policy_evaluation: alpha must be finite and >= 0");
  Vector v = Vector::Zero(static_cast<Eigen::Index>(mdp.num_states));
  Matrix q;
  double residual = std::numeric_limits<double>::infinity();
  // Contraction factor gamma: stop once the a-posteriori bound
  // |V - V*| <= gamma/(1-gamma) |V_k - V_{k-1}| is below tolerance.
  for (std::size_t it = 0; it < max_iterations; ++it) {
    q = q_from_v(mdp, v);
    Vector next = soft_v_from_q(q, pi, alpha);
    const double step = (next - v).cwiseAbs().maxCoeff();
    v = std::move(next);
    residual = step;
    if (step * std::max(1.0, mdp.gamma / (1.0 - mdp.gamma)) <= tolerance) {
      SoftEval out{q_from_v(mdp, v), v, alpha, 0.0};
      out.residual = (soft_v_from_q(out.q, pi, alpha) - out.v).cwiseAbs().maxCoeff();
      return out;
    }
  }
  if (allow_fallback) return soft_policy_evaluation_linear(mdp, pi, alpha);
  throw ConvergenceError("soft_policy_evaluation: no convergence, residual " + std::to_string(residual), residual);
}

/// sum_a pi_i(a|s)[Q_j(s,a) - alpha log pi_i(a|s)] - V_j(s)
template <class Row>
double soft_expected_advantage(const SoftEval& eval_j, std::size_t s, const Row& pi_i_row) {
  if (pi_i_row.size() != eval_j.q.cols()) throw ShapeError("soft_expected_advantage: action count mismatch");
  TabularPolicy::validate_row(pi_i_row);
  const auto si = static_cast<Eigen::Index>(s);
  return soft_value_of(pi_i_row, eval_j.q.row(si), eval_j.alpha) - eval_j.v(si);
}

struct GuidanceSelection {
  std::size_t index = 0;
  Vector distribution;
};

/// argmax over candidates of E_{a~pi}[Q(s,a) - alpha log pi(a|s)] under an
/// arbitrary action-value table. Ties go to the lowest index.
inline std::size_t argmax_candidate(const Matrix& q, double alpha, std::span<const TabularPolicy> candidates,
                                    std::size_t s) {
  if (candidates.empty()) throw DomainError("guidance selection: empty candidate list");
  const auto si = static_cast<Eigen::Index>(s);
  std::size_t best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    const double score = soft_value_of(candidates[c].prob.row(si), q.row(si), alpha);
    if (score > best_score) {
      best_score = score;
      best = c;
    }
  }
  return best;
}

/// Exact guidance choice at state s. The caller places the target policy last.
inline GuidanceSelection exact_guidance_select(const SoftEval& eval_tar, std::span<const TabularPolicy> candidates,
                                               std::size_t s) {
  const auto idx = argmax_candidate(eval_tar.q, eval_tar.alpha, candidates, s);
  return {idx, candidates[idx].prob.row(static_cast<Eigen::Index>(s)).transpose()};
}

// ---------------------------------------------------------------------------
// Random instances

/// Uniform draw from the probability simplex (flat Dirichlet).
inline Vector random_simplex(std::size_t n, Rng& rng) {
  Vector x(static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < x.size(); ++i) x(i) = -std::log(1.0 - rng.uniform());
  return x / x.sum();
}

/// Rows on the flat simplex, renormalized so each sums to 1 within 1e-12.
inline TabularMDP make_random_mdp(std::uint64_t seed, std::size_t num_states, std::size_t num_actions, double gamma) {
  if (num_states < 1 || num_actions < 1) throw DomainError("make_random_mdp: need at least one state and action");
  Rng rng(seed);
  TabularMDP mdp;
  mdp.num_states = num_states;
  mdp.num_actions = num_actions;
  mdp.gamma = gamma;
  const auto ns = static_cast<Eigen::Index>(num_states);
  for (std::size_t a = 0; a < num_actions; ++a) {
    Matrix t(ns, ns);
    for (Eigen::Index s = 0; s < ns; ++s) t.row(s) = random_simplex(num_states, rng).transpose();
    mdp.transition.push_back(std::move(t));
  }
  mdp.reward.resize(ns, static_cast<Eigen::Index>(num_actions));
  for (Eigen::Index s = 0; s < ns; ++s)
    for (Eigen::Index a = 0; a < mdp.reward.cols(); ++a) mdp.reward(s, a) = rng.uniform(-1.0, 1.0);
  mdp.validate();
  return mdp;
}

/// Full-support random policy.
inline TabularPolicy make_random_policy(Rng& rng, std::size_t num_states, std::size_t num_actions) {
  TabularPolicy pi{Matrix(static_cast<Eigen::Index>(num_states), static_cast<Eigen::Index>(num_actions))};
  for (Eigen::Index s = 0; s < pi.prob.rows(); ++s) {
    Vector row = random_simplex(num_actions, rng);
    // keep away from zero so KL terms stay defined
    row = (row.array() + 1e-3).matrix();
    pi.prob.row(s) = (row / row.sum()).transpose();
  }
  return pi;
}

// ---------------------------------------------------------------------------
// Improvement-bound certification

enum class PerturbationKind { Adversarial, Random };

/// Noise added to the exact action values: alternating +-mu per (s,a), or
/// uniform in [-mu, mu] from a seed.
struct Perturbation {
  PerturbationKind kind = PerturbationKind::Adversarial;
  std::uint64_t seed = 0;
};

inline Matrix perturbation_noise(std::size_t states, std::size_t actions, double mu, const Perturbation& p) {
  Matrix noise(static_cast<Eigen::Index>(states), static_cast<Eigen::Index>(actions));
  Rng rng(p.seed);
  for (Eigen::Index s = 0; s < noise.rows(); ++s)
    for (Eigen::Index a = 0; a < noise.cols(); ++a) {
      if (p.kind == PerturbationKind::Adversarial)
        noise(s, a) = ((s * noise.cols() + a) % 2 == 0) ? mu : -mu;
      else
        noise(s, a) = rng.uniform(-mu, mu);
    }
  return noise;
}

struct TheoremBoundReport {
  std::string theorem;
  double mu = 0.0;
  double delta = 0.0;
  double alpha = 0.0;
  double gamma = 0.0;
  Vector margins;
  double reward_max = 0.0;         // max |r(s,a)|
  double entropy_max_next = 0.0;   // max_s H(pi^{l+1}(.|s))
  double entropy_diff_max = 0.0;   // max_s |H(pi^l(.|s)) - H(pi^{l+1}(.|s))|
  bool pass = false;

  static constexpr double kTolerance = -1e-9;

  double worst_margin() const { return margins.size() ? margins.minCoeff() : 0.0; }
  std::size_t violations() const {
    std::size_t n = 0;
    for (Eigen::Index s = 0; s < margins.size(); ++s) n += margins(s) < kTolerance;
    return n;
  }
  void finalize() { pass = violations() == 0; }
};

/// One header line followed by one line per state margin.
inline void write_report(std::ostream& os, const TheoremBoundReport& r, const std::string& label = {}) {
  std::ostringstream hdr;
  hdr.precision(12);
  hdr << "report theorem=" << r.theorem;
  if (!label.empty()) hdr << " instance=" << label;
  hdr << " mu=" << r.mu << " delta=" << r.delta << " alpha=" << r.alpha << " gamma=" << r.gamma
      << " reward_max=" << r.reward_max << " entropy_max_next=" << r.entropy_max_next
      << " entropy_diff_max=" << r.entropy_diff_max << " pass=" << (r.pass ? 1 : 0);
  os << hdr.str() << '\n';
  for (Eigen::Index s = 0; s < r.margins.size(); ++s) {
    std::ostringstream line;
    line.precision(17);
    line << "  state=" << s << " margin=" << r.margins(s);
    os << line.str() << '\n';
  }
}

/// State-wise argmax over `sources` followed by `target` under an
/// approximate action-value table q_approx.
inline TabularPolicy guidance_policy(const Matrix& q_approx, double alpha, const TabularPolicy& target,
                                     std::span<const TabularPolicy> sources) {
  std::vector<TabularPolicy> cands(sources.begin(), sources.end());
  cands.push_back(target);
  TabularPolicy g{Matrix(target.prob.rows(), target.prob.cols())};
  for (std::size_t s = 0; s < target.num_states(); ++s) {
    const auto idx = argmax_candidate(q_approx, alpha, cands, s);
    g.prob.row(static_cast<Eigen::Index>(s)) = cands[idx].prob.row(static_cast<Eigen::Index>(s));
  }
  return g;
}

struct Theorem1Result {
  TheoremBoundReport report;
  TabularPolicy guidance;  // the perturbed-greedy guidance policy
};

/// Builds Q~ = Q_tar + noise (|noise| <= mu), forms the guidance policy from
/// Q~ over sources + target, and reports V_g(s) - V_tar(s) + 2mu/(1-gamma).
inline Theorem1Result check_theorem1(const TabularMDP& mdp, const TabularPolicy& target,
                                     std::span<const TabularPolicy> sources, double mu, double alpha,
                                     const Perturbation& perturbation) {
  if (!(mu >= 0.0)) throw DomainError("check_theorem1: mu must be >= 0");
  for (const auto& c : sources) c.validate(mdp);
  const SoftEval tar = soft_policy_evaluation(mdp, target, alpha);
  const Matrix q_approx = tar.q + perturbation_noise(mdp.num_states, mdp.num_actions, mu, perturbation);
  Theorem1Result out{{}, guidance_policy(q_approx, alpha, target, sources)};
  const SoftEval g = soft_policy_evaluation(mdp, out.guidance, alpha);
  auto& r = out.report;
  r.theorem = "1";
  r.mu = mu;
  r.alpha = alpha;
  r.gamma = mdp.gamma;
  r.margins = (g.v - tar.v).array() + 2.0 * mu / (1.0 - mdp.gamma);
  r.finalize();
  return out;
}

/// KL(p || q) in nats; throws DomainError when p puts mass where q has none.
template <class RowP, class RowQ>
double kl_divergence(const RowP& p, const RowQ& q) {
  double kl = 0.0;
  for (Eigen::Index a = 0; a < p.size(); ++a) {
    if (p(a) <= 0.0) continue;
    if (q(a) <= 0.0) throw DomainError("kl_divergence: support violation (q = 0 where p > 0)");
    kl += p(a) * (std::log(p(a)) - std::log(q(a)));
  }
  return std::max(kl, 0.0);
}

/// Checks V_{l+1}(s) >= V_l(s) - sqrt(2 ln2 delta)(R + alpha H_{l+1})/(1-gamma)^2
///                                - (2 mu + alpha H~)/(1-gamma)
/// with delta = max_s KL(pi^{l+1}(.|s) || guidance^l(.|s)).
inline TheoremBoundReport check_theorem2(const TabularMDP& mdp, const TabularPolicy& target_l,
                                         const TabularPolicy& guidance_l, const TabularPolicy& target_next, double mu,
                                         double alpha) {
  if (!(mu >= 0.0)) throw DomainError("check_theorem2: mu must be >= 0");
  guidance_l.validate(mdp);
  target_next.validate(mdp);
  TheoremBoundReport r;
  r.theorem = "2";
  r.mu = mu;
  r.alpha = alpha;
  r.gamma = mdp.gamma;
  for (std::size_t s = 0; s < mdp.num_states; ++s) {
    const auto si = static_cast<Eigen::Index>(s);
    r.delta = std::max(r.delta, kl_divergence(target_next.prob.row(si), guidance_l.prob.row(si)));
    const double h_next = entropy(target_next.prob.row(si));
    r.entropy_max_next = std::max(r.entropy_max_next, h_next);
    r.entropy_diff_max = std::max(r.entropy_diff_max, std::abs(entropy(target_l.prob.row(si)) - h_next));
  }
  r.reward_max = mdp.reward.cwiseAbs().maxCoeff();
  const SoftEval v_l = soft_policy_evaluation(mdp, target_l, alpha);
  const SoftEval v_next = soft_policy_evaluation(mdp, target_next, alpha);
  const double one_minus = 1.0 - mdp.gamma;
  const double kl_term = std::sqrt(2.0 * std::numbers::ln2 * r.delta) * (r.reward_max + alpha * r.entropy_max_next) /
                         (one_minus * one_minus);
  const double slack_term = (2.0 * mu + alpha * r.entropy_diff_max) / one_minus;
  const Vector rhs = v_l.v.array() - kl_term - slack_term;
  r.margins = v_next.v - rhs;
  r.finalize();
  return r;
}

}  // namespace iob::tabular
