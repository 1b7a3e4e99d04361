#pragma once

// Multi-policy reuse on top of SAC: critic-guided choice of a guidance
// policy among the source policies and a synchronized copy of the target,
// used both to regularize the actor (optimization transfer) and to collect
// data epsilon of the time (behavior transfer).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "iob/sac_loop.hpp"

namespace iob {

enum class KlEstimator { MonteCarlo, ClosedForm };

struct IobHyper {
  SacHyper sac = [] {
    SacHyper s;
    s.ensemble = 4;
    return s;
  }();
  double beta = 30.0;                 // KL regularization weight
  double epsilon = 0.2;               // probability of acting from the guidance policy
  std::size_t advantage_samples = 5;  // actions per candidate when scoring for optimization
  std::optional<long> warmup_steps;   // default: warmup_fraction * budget
  double warmup_fraction = 0.05;
  KlEstimator kl = KlEstimator::MonteCarlo;
  double log_density_floor = -40.0;
  bool cache_source_outputs = true;

  void validate() const {
    if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ConfigError("IobHyper: epsilon must lie in [0, 1]");
    if (!(beta >= 0.0)) throw ConfigError("IobHyper: beta must be >= 0");
    if (advantage_samples < 1) throw ConfigError("IobHyper: need at least one advantage sample");
  }
  long warmup(long budget) const {
    return warmup_steps.value_or(static_cast<long>(std::llround(warmup_fraction * static_cast<double>(budget))));
  }
};

/// Frozen sources followed by a hard copy of the target policy.
struct CandidateSet {
  std::vector<GaussianPolicy> sources;
  GaussianPolicy target_copy;

  std::size_t size() const { return sources.size() + 1; }
  std::size_t target_index() const { return sources.size(); }

  void synchronize(const GaussianPolicy& target) { target_copy = target; }

  bool synchronized_with(const GaussianPolicy& target) const {
    if (!target_copy.trunk.same_shape(target.trunk)) return false;
    for (std::size_t l = 0; l < target.trunk.layers.size(); ++l)
      if (target_copy.trunk.layers[l].weight != target.trunk.layers[l].weight ||
          target_copy.trunk.layers[l].bias != target.trunk.layers[l].bias)
        return false;
    return true;
  }
};

/// Source heads at one state. Sources are frozen, so these are computed once
/// per stored state and read back at training time.
inline std::vector<SourceOutput> cache_source_outputs(std::span<const GaussianPolicy> sources, const Vector& state) {
  std::vector<SourceOutput> out;
  out.reserve(sources.size());
  for (const auto& p : sources) {
    const auto h = policy_heads(p, Matrix(state));
    out.push_back({h.mean.col(0), h.log_std.col(0)});
  }
  return out;
}

/// Monte Carlo estimate of E_{a~pi(.|s)}[min_k Q_k(s,a) - alpha log pi(a|s)]
/// from `samples` draws. Critic is anything with min_q(states, actions).
template <class Critic>
double candidate_score(const Vector& mean, const Vector& log_std, const Vector& state, const Critic& critic,
                       double alpha, std::size_t samples, Rng& rng) {
  if (samples < 1) throw DomainError("candidate_score: need at least one sample");
  const auto m = static_cast<Eigen::Index>(samples);
  const Matrix noise = standard_normal(mean.size(), m, rng);
  const Matrix means = mean.replicate(1, m);
  const Matrix log_stds = log_std.replicate(1, m);
  const Matrix u = means + (log_stds.array().exp() * noise.array()).matrix();
  const RowVector logp = squashed_log_prob_from_noise(log_stds, noise, u);
  const RowVector q = critic.min_q(state.replicate(1, m), Matrix(u.array().tanh()));
  return (q.array() - alpha * logp.array()).mean();
}

struct GuidanceChoice {
  std::vector<std::size_t> index;  // per state
  Matrix score;                    // candidates x states; empty when not computed
};

inline GuidanceChoice target_only_guidance(Eigen::Index states, std::size_t target_index) {
  return {std::vector<std::size_t>(static_cast<std::size_t>(states), target_index), Matrix()};
}

/// Per-state argmax of the candidate score. All candidates at a state are
/// scored on the same standard-normal draws; ties go to the lowest index.
template <class Critic>
GuidanceChoice select_guidance(std::span<const GaussianHeads> candidates, const Matrix& states, const Critic& critic,
                               double alpha, std::size_t samples, Rng& rng) {
  if (candidates.empty()) throw DomainError("select_guidance: empty candidate set");
  const auto n = states.cols();
  const auto c_count = static_cast<Eigen::Index>(candidates.size());
  if (c_count == 1) return target_only_guidance(n, 0);
  const auto m = static_cast<Eigen::Index>(samples);
  const auto ad = candidates.front().action_dim();
  const Matrix noise = standard_normal(ad, m * n, rng);  // column j * n + b

  const Eigen::Index cols = c_count * m * n;
  Matrix u(ad, cols);
  Matrix log_std(ad, cols);
  Matrix noise_all(ad, cols);
  for (Eigen::Index c = 0; c < c_count; ++c) {
    const auto& h = candidates[static_cast<std::size_t>(c)];
    for (Eigen::Index j = 0; j < m; ++j) {
      const Eigen::Index off = (c * m + j) * n;
      const auto xi = noise.middleCols(j * n, n);
      u.middleCols(off, n) = h.mean + (h.log_std.array().exp() * xi.array()).matrix();
      log_std.middleCols(off, n) = h.log_std;
      noise_all.middleCols(off, n) = xi;
    }
  }
  const RowVector logp = squashed_log_prob_from_noise(log_std, noise_all, u);
  const RowVector q = critic.min_q(states.replicate(1, c_count * m), Matrix(u.array().tanh()));
  const RowVector value = q.array() - alpha * logp.array();

  GuidanceChoice g;
  g.score = Matrix::Zero(c_count, n);
  for (Eigen::Index c = 0; c < c_count; ++c)
    for (Eigen::Index j = 0; j < m; ++j) g.score.row(c) += value.segment((c * m + j) * n, n);
  g.score /= static_cast<double>(m);
  g.index.resize(static_cast<std::size_t>(n));
  for (Eigen::Index b = 0; b < n; ++b) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < c_count; ++c)
      if (g.score(c, b) > g.score(best, b)) best = c;
    g.index[static_cast<std::size_t>(b)] = static_cast<std::size_t>(best);
  }
  return g;
}

/// Candidate heads at a batch of states: sources (cached or recomputed),
/// then the target copy.
inline std::vector<GaussianHeads> candidate_heads(const CandidateSet& set, const Matrix& states,
                                                  const std::vector<GaussianHeads>* cached_sources = nullptr) {
  std::vector<GaussianHeads> heads;
  heads.reserve(set.size());
  if (cached_sources && cached_sources->size() == set.sources.size()) {
    heads = *cached_sources;
  } else {
    for (const auto& s : set.sources) heads.push_back(policy_heads(s, states));
  }
  heads.push_back(policy_heads(set.target_copy, states));
  return heads;
}

/// Guidance for a state batch; before warm-up the target copy is returned for
/// every state without consulting the critic.
template <class Critic>
GuidanceChoice select_guidance(const CandidateSet& set, const Matrix& states, const Critic& critic, double alpha,
                               std::size_t samples, bool warmed_up, Rng& rng,
                               const std::vector<GaussianHeads>* cached_sources = nullptr) {
  if (!warmed_up || set.sources.empty()) return target_only_guidance(states.cols(), set.target_index());
  const auto heads = candidate_heads(set, states, cached_sources);
  return select_guidance(std::span<const GaussianHeads>(heads), states, critic, alpha, samples, rng);
}

struct RegularizedActorLoss {
  ActorLoss actor;
  double base_loss = 0.0;  // plain actor loss
  double kl_mean = 0.0;    // mean per-state KL estimate (target-copy states count as 0)
  std::size_t floor_hits = 0;
};

/// Actor loss plus beta * mean_s KL(pi_tar(.|s) || pi_g(.|s)). States whose
/// guidance is the target copy contribute exactly zero. Gradients flow only
/// through the target policy.
inline RegularizedActorLoss regularized_actor_loss(const CriticEnsemble& critics, const GaussianPolicy& policy,
                                                   double alpha, const Matrix& states, const GuidanceChoice& guidance,
                                                   std::span<const GaussianHeads> candidates, std::size_t target_index,
                                                   double beta, std::size_t samples, Rng& update_rng, Rng& kl_rng,
                                                   KlEstimator estimator = KlEstimator::MonteCarlo,
                                                   ActorCritic mode = ActorCritic::MinOverEnsemble,
                                                   double log_density_floor = -40.0) {
  auto t = actor_terms(critics, policy, alpha, states, update_rng, mode);
  RegularizedActorLoss out;
  out.base_loss = t.loss;
  double loss = t.loss;
  const auto n = states.cols();
  if (beta > 0.0) {
    if (guidance.index.size() != static_cast<std::size_t>(n)) throw ShapeError("regularized_actor_loss: guidance size");
    const auto ad = policy.action_dim;
    const Matrix pass = t.heads.log_std_pass();
    const double w = beta / static_cast<double>(n);
    const double inv_m = 1.0 / static_cast<double>(samples);
    double kl_sum = 0.0;
    for (Eigen::Index b = 0; b < n; ++b) {
      const auto g = guidance.index[static_cast<std::size_t>(b)];
      if (g == target_index) continue;
      const auto& gh = candidates[g];
      double kl_b = 0.0;
      Vector dmean = Vector::Zero(ad);
      Vector dls = Vector::Zero(ad);
      if (estimator == KlEstimator::ClosedForm) {
        for (Eigen::Index i = 0; i < ad; ++i) {
          const double ls_t = t.heads.log_std(i, b), ls_g = gh.log_std(i, b);
          const double var_ratio = std::exp(2.0 * (ls_t - ls_g));
          const double diff = t.heads.mean(i, b) - gh.mean(i, b);
          const double inv_var_g = std::exp(-2.0 * ls_g);
          kl_b += ls_g - ls_t + 0.5 * (var_ratio + diff * diff * inv_var_g) - 0.5;
          dmean(i) = diff * inv_var_g;
          dls(i) = -1.0 + var_ratio;
        }
      } else {
        for (std::size_t j = 0; j < samples; ++j) {
          double logp_t = 0.0, logp_g = 0.0;
          Vector xi(ad), u(ad), dlogg_du(ad);
          for (Eigen::Index i = 0; i < ad; ++i) {
            xi(i) = kl_rng.normal();
            u(i) = t.heads.mean(i, b) + std::exp(t.heads.log_std(i, b)) * xi(i);
            const double corr = log1m_tanh_sq(u(i));
            const double z_g = (u(i) - gh.mean(i, b)) * std::exp(-gh.log_std(i, b));
            logp_t += -0.5 * xi(i) * xi(i) - t.heads.log_std(i, b) - kHalfLog2Pi - corr;
            logp_g += -0.5 * z_g * z_g - gh.log_std(i, b) - kHalfLog2Pi - corr;
            dlogg_du(i) = -z_g * std::exp(-gh.log_std(i, b)) + 2.0 * std::tanh(u(i));
          }
          const bool floored = logp_g < log_density_floor;
          if (floored) {
            logp_g = log_density_floor;
            ++out.floor_hits;
          }
          kl_b += inv_m * (logp_t - logp_g);
          for (Eigen::Index i = 0; i < ad; ++i) {
            const double two_tanh = 2.0 * std::tanh(u(i));
            const double sx = std::exp(t.heads.log_std(i, b)) * xi(i);
            const double dg = floored ? 0.0 : dlogg_du(i);
            dmean(i) += inv_m * (two_tanh - dg);
            dls(i) += inv_m * ((-1.0 + two_tanh * sx) - dg * sx);
          }
        }
      }
      kl_sum += kl_b;
      for (Eigen::Index i = 0; i < ad; ++i) {
        t.head_grad(i, b) += w * dmean(i);
        t.head_grad(ad + i, b) += w * dls(i) * pass(i, b);
      }
    }
    out.kl_mean = kl_sum / static_cast<double>(n);
    loss += beta * out.kl_mean;
  }
  out.actor = finish_actor(policy, t, loss);
  return out;
}

/// Closed-form KL between diagonal Gaussians before squashing. The tanh
/// bijection leaves KL unchanged, so this is also the squashed KL.
inline double gaussian_kl(const Vector& mean_p, const Vector& log_std_p, const Vector& mean_q, const Vector& log_std_q) {
  double kl = 0.0;
  for (Eigen::Index i = 0; i < mean_p.size(); ++i) {
    const double d = mean_p(i) - mean_q(i);
    kl += log_std_q(i) - log_std_p(i) + 0.5 * (std::exp(2.0 * (log_std_p(i) - log_std_q(i))) +
                                               d * d * std::exp(-2.0 * log_std_q(i))) -
          0.5;
  }
  return kl;
}

/// Monte Carlo KL(p || q) between squashed Gaussians from `samples` draws of p.
inline double squashed_kl_monte_carlo(const Vector& mean_p, const Vector& log_std_p, const Vector& mean_q,
                                      const Vector& log_std_q, std::size_t samples, Rng& rng) {
  const auto m = static_cast<Eigen::Index>(samples);
  const Matrix noise = standard_normal(mean_p.size(), m, rng);
  const Matrix mp = mean_p.replicate(1, m), lp = log_std_p.replicate(1, m);
  const Matrix u = mp + (lp.array().exp() * noise.array()).matrix();
  const RowVector log_p = squashed_log_prob_from_noise(lp, noise, u);
  const RowVector log_q = squashed_log_density(mean_q.replicate(1, m), log_std_q.replicate(1, m), u);
  return (log_p - log_q).mean();
}

struct BehaviorDecision {
  Vector action;
  bool guidance_branch = false;  // the epsilon coin came up
  std::size_t candidate = 0;     // policy the action was drawn from
};

/// Epsilon-mixed behavior policy. With probability epsilon, one action is
/// drawn per candidate and scored by min Q - alpha log pi; the action is then
/// drawn from the best candidate. Otherwise it is drawn from the target copy
/// (the last candidate). Before warm-up the target copy is always used.
template <class Critic>
BehaviorDecision behavior_action(double epsilon, const Vector& state, std::span<const SourceOutput> candidates,
                                 const Critic& critic, double alpha, bool warmed_up, Rng& branch_rng,
                                 Rng& action_rng) {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw DomainError("behavior_action: epsilon must lie in [0, 1]");
  if (candidates.empty()) throw DomainError("behavior_action: empty candidate set");
  BehaviorDecision d;
  d.candidate = candidates.size() - 1;
  d.guidance_branch = branch_rng.uniform() < epsilon;
  if (d.guidance_branch && warmed_up && candidates.size() > 1) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < candidates.size(); ++c) {
      const auto s = sample_from_heads(candidates[c].mean, candidates[c].log_std, branch_rng);
      const double score = critic.min_q(Matrix(state), Matrix(s.action))(0) - alpha * s.log_prob;
      if (score > best) {
        best = score;
        d.candidate = c;
      }
    }
  }
  d.action = sample_from_heads(candidates[d.candidate].mean, candidates[d.candidate].log_std, action_rng).action;
  return d;
}

// ---------------------------------------------------------------------------
// Training loop

struct IobState {
  TrainState train;
  CandidateSet candidates;
};

/// One gradient step: K critic minibatches, soft targets, guidance on a
/// fresh actor minibatch, regularized actor update, temperature update and
/// synchronization of the target copy.
inline void iob_gradient_step(IobState& st, const IobHyper& h, RunStreams& rs, bool warmed_up,
                              const std::function<void(GradBuffer&)>& filter, std::vector<double>& selection_counts) {
  auto& agent = st.train.agent;
  update_critics(agent, st.train.buffer, h.sac, rs.batch, rs.update);
  const Batch b = gather_batch(st.train.buffer, st.train.buffer.sample_indices(h.sac.batch_size, rs.batch));
  const double alpha = agent.temperature.alpha();
  const auto& set = st.candidates;
  const auto* cached = h.cache_source_outputs ? &b.sources : nullptr;

  GuidanceChoice g;
  std::vector<GaussianHeads> heads;
  if (warmed_up && !set.sources.empty()) {
    heads = candidate_heads(set, b.states, cached);
    g = select_guidance(std::span<const GaussianHeads>(heads), b.states, agent.critics, alpha, h.advantage_samples,
                        rs.guidance);
  } else {
    g = target_only_guidance(b.size(), set.target_index());
  }
  for (auto idx : g.index) selection_counts[idx] += 1.0;

  auto rl = regularized_actor_loss(agent.critics, agent.policy, alpha, b.states, g, heads, set.target_index(), h.beta,
                                   h.advantage_samples, rs.update, rs.guidance, h.kl, h.sac.actor_critic,
                                   h.log_density_floor);
  if (filter) filter(rl.actor.grads);
  adam_step(agent.policy.trunk, rl.actor.grads, agent.policy_optim);
  entropy_update(agent.temperature, rl.actor.log_probs);
  st.candidates.synchronize(agent.policy);
}

/// IOB training run on `prototype` with frozen `sources`. A resumed state
/// keeps its critics and replay data and skips the guidance warm-up.
template <class Env>
TrainResult iob_train(const Env& prototype, std::span<const GaussianPolicy> sources, const IobHyper& h,
                      std::uint64_t seed, const TrainOptions& opt, std::optional<TrainState> resume = std::nullopt) {
  h.validate();
  for (const auto& s : sources) check_env_dims(prototype, s);
  RunStreams rs(seed);
  IobState st;
  const bool resumed = resume.has_value();
  if (resumed) {
    st.train = std::move(*resume);
  } else {
    st.train = {make_agent(prototype.state_dim(), prototype.action_dim(), h.sac, rs.init),
                ReplayBuffer(h.sac.buffer_capacity)};
    if (opt.initial_policy) {
      st.train.agent.policy = *opt.initial_policy;
      st.train.agent.policy_optim = AdamState::for_net(st.train.agent.policy.trunk, h.sac.policy_lr);
    }
  }
  auto& agent = st.train.agent;
  check_env_dims(prototype, agent.policy);
  st.candidates.sources.assign(sources.begin(), sources.end());
  st.candidates.synchronize(agent.policy);

  const long start_steps = opt.start_steps.value_or(h.sac.start_steps);
  const long update_after = opt.update_after.value_or(h.sac.update_after);
  const long warmup = resumed ? 0 : h.warmup(opt.budget);
  const long every = opt.cadence();

  TrainResult out;
  std::vector<double> counts(st.candidates.size(), 0.0);
  auto flush_selection = [&] {
    double total = 0.0;
    for (double c : counts) total += c;
    std::vector<double> frac(counts.size(), 0.0);
    if (total > 0.0)
      for (std::size_t i = 0; i < counts.size(); ++i) frac[i] = counts[i] / total;
    out.selection.push_back(std::move(frac));
    std::fill(counts.begin(), counts.end(), 0.0);
  };

  Env env = prototype;
  Vector s = env.reset(rs.env);
  int episode_len = 0;
  std::size_t point = 0;
  out.curve.add(0, evaluate_policy(prototype, agent.policy, opt.eval_episodes, rs.eval(point++)));
  flush_selection();
  try {
    for (long t = 1; t <= opt.budget; ++t) {
      const bool warmed_up = t > warmup;
      std::vector<SourceOutput> cached = cache_source_outputs(st.candidates.sources, s);
      Vector a;
      if (t <= start_steps) {
        a = uniform_action(prototype.action_dim(), rs.explore);
      } else {
        std::vector<SourceOutput> cands = cached;
        const auto th = policy_heads(st.candidates.target_copy, Matrix(s));
        cands.push_back({th.mean.col(0), th.log_std.col(0)});
        a = behavior_action(h.epsilon, s, std::span<const SourceOutput>(cands), agent.critics,
                            agent.temperature.alpha(), warmed_up, rs.behavior, rs.explore)
                .action;
      }
      const auto r = env.step(a);
      ++episode_len;
      if (!h.cache_source_outputs) cached.clear();
      st.train.buffer.push({s, a, r.reward, r.next_state, r.terminal, std::move(cached)});
      s = r.next_state;
      if (r.terminal || episode_len >= env.horizon()) {
        s = env.reset(rs.env);
        episode_len = 0;
      }
      out.env_steps = t;
      if (t >= update_after) {
        iob_gradient_step(st, h, rs, warmed_up, opt.policy_grad_filter, counts);
        ++out.gradient_steps;
      }
      if (t % every == 0) {
        out.curve.add(t, evaluate_policy(prototype, agent.policy, opt.eval_episodes, rs.eval(point++)));
        flush_selection();
      }
    }
  } catch (const NonFiniteError& e) {
    out.failed = true;
    out.failure = e.what();
  }
  out.state = std::move(st.train);
  return out;
}

}  // namespace iob
