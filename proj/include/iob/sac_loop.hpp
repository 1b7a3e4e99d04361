#pragma once

// Plain SAC training loop and the pieces every loop shares: named random
// streams, evaluation episodes and resumable training state.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "iob/metrics.hpp"
#include "iob/sac.hpp"

namespace iob {

/// Independent substreams of one master seed. Each consumer draws from its
/// own stream, so e.g. the behavior-branch coin never shifts action noise.
struct RunStreams {
  explicit RunStreams(std::uint64_t seed)
      : master(seed),
        init(master.substream("init")),
        env(master.substream("env")),
        explore(master.substream("explore")),
        batch(master.substream("batch")),
        update(master.substream("update")),
        behavior(master.substream("behavior")),
        guidance(master.substream("guidance")) {}

  Rng eval(std::size_t point) const { return master.substream("eval", point); }

  Rng master;
  Rng init;
  Rng env;
  Rng explore;
  Rng batch;
  Rng update;
  Rng behavior;
  Rng guidance;
};

/// Fraction of episodes in which the deterministic policy tanh(mean) reaches
/// success within the horizon.
template <class Env>
double evaluate_policy(const Env& prototype, const GaussianPolicy& policy, int episodes, Rng rng) {
  int successes = 0;
  for (int e = 0; e < episodes; ++e) {
    Env env = prototype;
    Vector s = env.reset(rng);
    for (int t = 0; t < env.horizon(); ++t) {
      const auto r = env.step(deterministic_action(policy, s));
      s = r.next_state;
      if (r.success) {
        ++successes;
        break;
      }
      if (r.terminal) break;
    }
  }
  return episodes > 0 ? static_cast<double>(successes) / episodes : 0.0;
}

struct TrainOptions {
  long budget = 20'000;
  long eval_every = 0;  // 0: budget / 50
  int eval_episodes = 10;
  /// Replaces the freshly initialized policy (continual learning).
  std::optional<GaussianPolicy> initial_policy;
  /// Applied to every policy gradient before the optimizer step.
  std::function<void(GradBuffer&)> policy_grad_filter;
  /// Env steps between the first environment step and here use uniform
  /// random actions; overrides SacHyper::start_steps when set.
  std::optional<long> start_steps;
  std::optional<long> update_after;

  long cadence() const { return eval_every > 0 ? eval_every : std::max<long>(1, budget / 50); }
};

struct TrainState {
  SacAgent agent;
  ReplayBuffer buffer;
};

struct TrainResult {
  TrainState state;
  LearningCurve curve;
  /// Per evaluation point: fraction of actor-minibatch states whose guidance
  /// was candidate c since the previous point (sources first, target copy last).
  std::vector<std::vector<double>> selection;
  long env_steps = 0;
  long gradient_steps = 0;
  bool failed = false;
  std::string failure;
};

inline Vector uniform_action(Eigen::Index dim, Rng& rng) {
  Vector a(dim);
  for (Eigen::Index i = 0; i < dim; ++i) a(i) = rng.uniform(-1.0, 1.0);
  return a;
}

/// Critic updates, soft target update, one actor step and one temperature step.
inline void sac_gradient_step(SacAgent& agent, const ReplayBuffer& buffer, const SacHyper& h, RunStreams& rs,
                              const std::function<void(GradBuffer&)>& filter) {
  update_critics(agent, buffer, h, rs.batch, rs.update);
  const Batch b = gather_batch(buffer, buffer.sample_indices(h.batch_size, rs.batch));
  auto al = actor_loss(agent.critics, agent.policy, agent.temperature.alpha(), b.states, rs.update, h.actor_critic);
  if (filter) filter(al.grads);
  adam_step(agent.policy.trunk, al.grads, agent.policy_optim);
  entropy_update(agent.temperature, al.log_probs);
}

template <class Env>
void check_env_dims(const Env& env, const GaussianPolicy& policy) {
  if (policy.state_dim() != env.state_dim() || policy.action_dim != env.action_dim())
    throw ConfigError("policy and environment dimensions differ");
}

/// Soft actor-critic without transfer.
template <class Env>
TrainResult sac_train(const Env& prototype, const SacHyper& h, std::uint64_t seed, const TrainOptions& opt,
                      std::optional<TrainState> resume = std::nullopt) {
  RunStreams rs(seed);
  TrainResult out;
  if (resume) {
    out.state = std::move(*resume);
  } else {
    out.state = {make_agent(prototype.state_dim(), prototype.action_dim(), h, rs.init),
                 ReplayBuffer(h.buffer_capacity)};
    if (opt.initial_policy) {
      out.state.agent.policy = *opt.initial_policy;
      out.state.agent.policy_optim = AdamState::for_net(out.state.agent.policy.trunk, h.policy_lr);
    }
  }
  auto& agent = out.state.agent;
  check_env_dims(prototype, agent.policy);
  const long start_steps = opt.start_steps.value_or(h.start_steps);
  const long update_after = opt.update_after.value_or(h.update_after);
  const long every = opt.cadence();

  Env env = prototype;
  Vector s = env.reset(rs.env);
  int episode_len = 0;
  std::size_t point = 0;
  out.curve.add(0, evaluate_policy(prototype, agent.policy, opt.eval_episodes, rs.eval(point++)));
  try {
    for (long t = 1; t <= opt.budget; ++t) {
      const Vector a = t <= start_steps ? uniform_action(prototype.action_dim(), rs.explore)
                                        : sample_action(agent.policy, s, rs.explore).action;
      const auto r = env.step(a);
      ++episode_len;
      out.state.buffer.push({s, a, r.reward, r.next_state, r.terminal, {}});
      s = r.next_state;
      if (r.terminal || episode_len >= env.horizon()) {
        s = env.reset(rs.env);
        episode_len = 0;
      }
      out.env_steps = t;
      if (t >= update_after && out.state.buffer.size() > 0) {
        sac_gradient_step(agent, out.state.buffer, h, rs, opt.policy_grad_filter);
        ++out.gradient_steps;
      }
      if (t % every == 0) out.curve.add(t, evaluate_policy(prototype, agent.policy, opt.eval_episodes, rs.eval(point++)));
    }
  } catch (const NonFiniteError& e) {
    out.failed = true;
    out.failure = e.what();
  }
  return out;
}

}  // namespace iob
