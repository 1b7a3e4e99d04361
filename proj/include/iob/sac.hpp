#pragma once

// Soft actor-critic backbone: squashed-Gaussian policy, critic ensemble with
// per-member target networks, entropy temperature and replay buffer.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <optional>
#include <utility>
#include <vector>

#include "iob/errors.hpp"
#include "iob/nn.hpp"
#include "iob/rng.hpp"

namespace iob {

inline constexpr double kLogStdMin = -20.0;
inline constexpr double kLogStdMax = 2.0;
inline const double kHalfLog2Pi = 0.5 * std::log(2.0 * std::numbers::pi);

inline double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

/// log(1 - tanh(u)^2) without cancellation for large |u|.
inline double log1m_tanh_sq(double u) { return 2.0 * (std::numbers::ln2 - u - softplus(-2.0 * u)); }

// ---------------------------------------------------------------------------
// Squashed Gaussian

/// Action distribution parameters for a batch; columns are samples.
struct GaussianHeads {
  Matrix mean;
  Matrix log_std;      // clamped to [kLogStdMin, kLogStdMax]
  Matrix raw_log_std;  // pre-clamp network output

  Eigen::Index action_dim() const { return mean.rows(); }
  Eigen::Index batch() const { return mean.cols(); }
  /// 1 where the clamp is inactive, so gradients pass.
  Matrix log_std_pass() const {
    return ((raw_log_std.array() >= kLogStdMin) && (raw_log_std.array() <= kLogStdMax)).cast<double>().matrix();
  }
};

/// Log-density of a = tanh(u) under tanh(N(mean, exp(log_std))), per column.
inline RowVector squashed_log_density(const Matrix& mean, const Matrix& log_std, const Matrix& pre_squash) {
  RowVector out(pre_squash.cols());
  for (Eigen::Index b = 0; b < pre_squash.cols(); ++b) {
    double lp = 0.0;
    for (Eigen::Index i = 0; i < pre_squash.rows(); ++i) {
      const double z = (pre_squash(i, b) - mean(i, b)) * std::exp(-log_std(i, b));
      lp += -0.5 * z * z - log_std(i, b) - kHalfLog2Pi - log1m_tanh_sq(pre_squash(i, b));
    }
    out(b) = lp;
  }
  return out;
}

/// Same density when u = mean + exp(log_std) * noise; uses the noise directly.
inline RowVector squashed_log_prob_from_noise(const Matrix& log_std, const Matrix& noise, const Matrix& pre_squash) {
  RowVector out(noise.cols());
  for (Eigen::Index b = 0; b < noise.cols(); ++b) {
    double lp = 0.0;
    for (Eigen::Index i = 0; i < noise.rows(); ++i)
      lp += -0.5 * noise(i, b) * noise(i, b) - log_std(i, b) - kHalfLog2Pi - log1m_tanh_sq(pre_squash(i, b));
    out(b) = lp;
  }
  return out;
}

inline Matrix standard_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c)
    for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = rng.normal();
  return m;
}

struct ActionSample {
  Vector action;
  double log_prob = 0.0;
};

/// a = tanh(mean + std * noise) for a single state.
inline ActionSample sample_from_heads(const Vector& mean, const Vector& log_std, const Vector& noise) {
  Matrix u = mean + (log_std.array().exp() * noise.array()).matrix();
  ActionSample s;
  s.action = u.array().tanh().matrix();
  s.log_prob = squashed_log_prob_from_noise(log_std, noise, u)(0);
  return s;
}
inline ActionSample sample_from_heads(const Vector& mean, const Vector& log_std, Rng& rng) {
  return sample_from_heads(mean, log_std, Vector(standard_normal(mean.size(), 1, rng)));
}

// ---------------------------------------------------------------------------
// Policy

/// Trunk maps state to [mean; raw log-std]. The output layer starts at zero so
/// the initial action distribution is tanh of a standard Gaussian.
struct GaussianPolicy {
  DenseNet trunk;
  Eigen::Index action_dim = 0;

  Eigen::Index state_dim() const { return trunk.input_dim(); }

  static GaussianPolicy make(Eigen::Index state_dim, Eigen::Index action_dim, const std::vector<Eigen::Index>& hidden,
                             Rng& rng) {
    std::vector<Eigen::Index> dims{state_dim};
    dims.insert(dims.end(), hidden.begin(), hidden.end());
    dims.push_back(2 * action_dim);
    return {DenseNet::make(dims, rng, /*zero_output_layer=*/true), action_dim};
  }
};

inline GaussianHeads split_heads(const Matrix& out, Eigen::Index action_dim) {
  GaussianHeads h;
  h.mean = out.topRows(action_dim);
  h.raw_log_std = out.bottomRows(action_dim);
  h.log_std = h.raw_log_std.cwiseMax(kLogStdMin).cwiseMin(kLogStdMax);
  return h;
}

inline GaussianHeads policy_heads(const GaussianPolicy& policy, const Matrix& states) {
  return split_heads(forward(policy.trunk, states), policy.action_dim);
}
inline GaussianHeads policy_heads(const GaussianPolicy& policy, const Matrix& states, ForwardCache& cache) {
  return split_heads(forward(policy.trunk, states, cache), policy.action_dim);
}

inline ActionSample sample_action(const GaussianPolicy& policy, const Vector& state, Rng& rng) {
  if (!state.allFinite()) throw DomainError("sample_action: non-finite state");
  const auto h = policy_heads(policy, Matrix(state));
  return sample_from_heads(Vector(h.mean.col(0)), Vector(h.log_std.col(0)), rng);
}

/// tanh(mean): the evaluation-time action.
inline Vector deterministic_action(const GaussianPolicy& policy, const Vector& state) {
  const auto h = policy_heads(policy, Matrix(state));
  return h.mean.col(0).array().tanh().matrix();
}

// ---------------------------------------------------------------------------
// Critic ensemble

inline Matrix stack_state_action(const Matrix& states, const Matrix& actions) {
  if (states.cols() != actions.cols()) throw ShapeError("critic input: state/action batch sizes differ");
  Matrix x(states.rows() + actions.rows(), states.cols());
  x.topRows(states.rows()) = states;
  x.bottomRows(actions.rows()) = actions;
  return x;
}

struct CriticEnsemble {
  std::vector<DenseNet> online;
  std::vector<DenseNet> target;
  std::vector<AdamState> optim;
  double tau = 0.005;

  std::size_t size() const { return online.size(); }

  static CriticEnsemble make(Eigen::Index state_dim, Eigen::Index action_dim, const std::vector<Eigen::Index>& hidden,
                             std::size_t members, Rng& rng, double learning_rate = 3e-4, double tau = 0.005) {
    if (members < 1) throw ConfigError("CriticEnsemble: need at least one member");
    CriticEnsemble e;
    e.tau = tau;
    std::vector<Eigen::Index> dims{state_dim + action_dim};
    dims.insert(dims.end(), hidden.begin(), hidden.end());
    dims.push_back(1);
    for (std::size_t k = 0; k < members; ++k) {
      e.online.push_back(DenseNet::make(dims, rng));
      e.target.push_back(e.online.back());
      e.optim.push_back(AdamState::for_net(e.online.back(), learning_rate));
    }
    return e;
  }

  RowVector q(std::size_t k, const Matrix& states, const Matrix& actions) const {
    return forward(online[k], stack_state_action(states, actions)).row(0);
  }

  /// Pointwise minimum over the online members.
  RowVector min_q(const Matrix& states, const Matrix& actions) const {
    const Matrix x = stack_state_action(states, actions);
    RowVector m = forward(online[0], x).row(0);
    for (std::size_t k = 1; k < online.size(); ++k) m = m.cwiseMin(forward(online[k], x).row(0));
    return m;
  }
  double min_q(const Vector& state, const Vector& action) const { return min_q(Matrix(state), Matrix(action))(0); }
};

/// target <- tau * online + (1 - tau) * target, per parameter and member.
inline void soft_update(CriticEnsemble& e, double tau) {
  if (!(tau > 0.0 && tau <= 1.0)) throw DomainError("soft_update: tau must lie in (0, 1]");
  for (std::size_t k = 0; k < e.size(); ++k)
    for (std::size_t b = 0; b < block_count(e.online[k]); ++b) {
      auto t = param_block(e.target[k], b);
      t = tau * param_block(std::as_const(e.online[k]), b) + (1.0 - tau) * t;
    }
}

// ---------------------------------------------------------------------------
// Entropy temperature

struct EntropyTemperature {
  double log_alpha = 0.0;
  double target_entropy = -1.0;
  AdamState optim = AdamState::for_scalar();

  double alpha() const { return std::exp(log_alpha); }
};

struct EntropyLoss {
  double loss = 0.0;
  double grad_log_alpha = 0.0;
};

/// mean(-alpha (log_prob + target_entropy)), differentiated w.r.t. log alpha.
inline EntropyLoss entropy_loss(const EntropyTemperature& t, const RowVector& log_probs) {
  if (log_probs.size() == 0) throw ShapeError("entropy_loss: empty batch");
  const double gap = (log_probs.array() + t.target_entropy).mean();
  return {-t.alpha() * gap, -t.alpha() * gap};
}

inline EntropyLoss entropy_update(EntropyTemperature& t, const RowVector& log_probs) {
  auto l = entropy_loss(t, log_probs);
  adam_step(t.log_alpha, l.grad_log_alpha, t.optim);
  return l;
}

// ---------------------------------------------------------------------------
// Replay

struct SourceOutput {
  Vector mean;
  Vector log_std;
};

struct Transition {
  Vector state;
  Vector action;
  double reward = 0.0;
  Vector next_state;
  bool terminal = false;
  std::vector<SourceOutput> cached;  // one per source policy, evaluated at `state`

  std::size_t cached_scalar_count() const {
    std::size_t n = 0;
    for (const auto& c : cached) n += c.mean.size() + c.log_std.size();
    return n;
  }
};

/// Ring buffer; the oldest transition is evicted at capacity.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity = 1'000'000) : capacity_(capacity) {
    if (capacity == 0) throw ConfigError("ReplayBuffer: capacity must be positive");
  }

  void push(Transition t) {
    if (slots_.size() < capacity_) slots_.push_back(std::move(t));
    else slots_[inserted_ % capacity_] = std::move(t);
    ++inserted_;
  }

  /// Uniform with replacement over occupied slots.
  std::vector<std::size_t> sample_indices(std::size_t batch_size, Rng& rng) const {
    if (slots_.empty()) throw DomainError("ReplayBuffer: sampling from an empty buffer");
    std::vector<std::size_t> idx(batch_size);
    for (auto& i : idx) i = rng.index(slots_.size());
    return idx;
  }

  const Transition& operator[](std::size_t i) const { return slots_[i]; }
  std::size_t size() const { return slots_.size(); }
  std::size_t capacity() const { return capacity_; }
  std::size_t inserted() const { return inserted_; }
  bool empty() const { return slots_.empty(); }

 private:
  std::size_t capacity_;
  std::size_t inserted_ = 0;
  std::vector<Transition> slots_;
};

struct Batch {
  Matrix states;
  Matrix actions;
  RowVector rewards;
  Matrix next_states;
  RowVector not_done;
  std::vector<GaussianHeads> sources;  // cached source outputs at `states`

  Eigen::Index size() const { return states.cols(); }
};

inline Batch gather_batch(const ReplayBuffer& buffer, const std::vector<std::size_t>& indices) {
  const auto& first = buffer[indices.front()];
  const auto n = static_cast<Eigen::Index>(indices.size());
  const auto sd = first.state.size();
  const auto ad = first.action.size();
  Batch b;
  b.states.resize(sd, n);
  b.actions.resize(ad, n);
  b.rewards.resize(n);
  b.next_states.resize(sd, n);
  b.not_done.resize(n);
  // transitions stored without cache (or with a different source count) drop the block
  bool uniform_cache = true;
  for (auto i : indices) uniform_cache = uniform_cache && buffer[i].cached.size() == first.cached.size();
  b.sources.resize(uniform_cache ? first.cached.size() : 0);
  for (auto& s : b.sources) {
    s.mean.resize(ad, n);
    s.log_std.resize(ad, n);
  }
  for (Eigen::Index j = 0; j < n; ++j) {
    const auto& t = buffer[indices[static_cast<std::size_t>(j)]];
    b.states.col(j) = t.state;
    b.actions.col(j) = t.action;
    b.rewards(j) = t.reward;
    b.next_states.col(j) = t.next_state;
    b.not_done(j) = t.terminal ? 0.0 : 1.0;
    for (std::size_t i = 0; i < b.sources.size(); ++i) {
      b.sources[i].mean.col(j) = t.cached[i].mean;
      b.sources[i].log_std.col(j) = t.cached[i].log_std;
    }
  }
  for (auto& s : b.sources) s.raw_log_std = s.log_std;
  return b;
}

// ---------------------------------------------------------------------------
// Losses

struct LossResult {
  double loss = 0.0;
  GradBuffer grads;
};

/// Squared Bellman error of member k against its own target network:
/// y = r + gamma * not_done * (Qbar_k(s', a') - alpha log pi(a'|s')), a' ~ pi.
inline LossResult critic_loss(const CriticEnsemble& e, const GaussianPolicy& policy, double alpha, const Batch& batch,
                              std::size_t k, double gamma, Rng& rng) {
  const auto n = batch.size();
  const auto next = policy_heads(policy, batch.next_states);
  const Matrix noise = standard_normal(policy.action_dim, n, rng);
  const Matrix u = next.mean + (next.log_std.array().exp() * noise.array()).matrix();
  const Matrix a_next = u.array().tanh().matrix();
  const RowVector logp_next = squashed_log_prob_from_noise(next.log_std, noise, u);
  const RowVector q_next = forward(e.target[k], stack_state_action(batch.next_states, a_next)).row(0);
  const RowVector y =
      batch.rewards.array() + gamma * batch.not_done.array() * (q_next.array() - alpha * logp_next.array());
  if (!y.allFinite()) throw NonFiniteError("critic_loss: non-finite Bellman target");

  ForwardCache cache;
  const RowVector q = forward(e.online[k], stack_state_action(batch.states, batch.actions), cache).row(0);
  const RowVector diff = q - y;
  LossResult out{diff.squaredNorm() / static_cast<double>(n), GradBuffer::zeros_like(e.online[k])};
  backward(e.online[k], cache, Matrix(2.0 * diff / static_cast<double>(n)), &out.grads);
  return out;
}

enum class ActorCritic { MinOverEnsemble, FirstMember };

/// Everything the actor step needs to finish the backward pass.
struct ActorTerms {
  double loss = 0.0;
  ForwardCache cache;
  GaussianHeads heads;
  Matrix noise;
  Matrix pre_squash;
  Matrix actions;
  RowVector log_probs;  // detached, for the temperature update
  Matrix head_grad;     // d loss / d [mean; raw log-std]
};

/// mean_b[alpha log pi(a_b|s_b) - Q(s_b, a_b)] with one reparameterized sample
/// per state; Q is the online ensemble minimum (or member 0).
inline ActorTerms actor_terms(const CriticEnsemble& e, const GaussianPolicy& policy, double alpha,
                              const Matrix& states, Rng& rng, ActorCritic mode = ActorCritic::MinOverEnsemble) {
  ActorTerms t;
  const auto n = states.cols();
  const auto ad = policy.action_dim;
  const double inv_n = 1.0 / static_cast<double>(n);
  t.heads = policy_heads(policy, states, t.cache);
  t.noise = standard_normal(ad, n, rng);
  const Matrix std_dev = t.heads.log_std.array().exp().matrix();
  t.pre_squash = t.heads.mean + (std_dev.array() * t.noise.array()).matrix();
  t.actions = t.pre_squash.array().tanh().matrix();
  t.log_probs = squashed_log_prob_from_noise(t.heads.log_std, t.noise, t.pre_squash);

  // Minimum over critics; the gradient flows through the arg-min member.
  const Matrix x = stack_state_action(states, t.actions);
  const std::size_t members = mode == ActorCritic::MinOverEnsemble ? e.size() : 1;
  std::vector<ForwardCache> caches(members);
  RowVector qmin;
  std::vector<int> owner(static_cast<std::size_t>(n), 0);
  for (std::size_t k = 0; k < members; ++k) {
    const RowVector qk = forward(e.online[k], x, caches[k]).row(0);
    if (k == 0) {
      qmin = qk;
      continue;
    }
    for (Eigen::Index b = 0; b < n; ++b)
      if (qk(b) < qmin(b)) {
        qmin(b) = qk(b);
        owner[static_cast<std::size_t>(b)] = static_cast<int>(k);
      }
  }
  t.loss = (alpha * t.log_probs - qmin).mean();

  Matrix d_action = Matrix::Zero(ad, n);
  for (std::size_t k = 0; k < members; ++k) {
    Matrix dq = Matrix::Zero(1, n);
    bool any = false;
    for (Eigen::Index b = 0; b < n; ++b)
      if (owner[static_cast<std::size_t>(b)] == static_cast<int>(k)) {
        dq(0, b) = -inv_n;
        any = true;
      }
    if (!any) continue;
    Matrix dx;
    backward(e.online[k], caches[k], dq, nullptr, &dx);
    d_action += dx.bottomRows(ad);
  }

  const Matrix tanh_u = t.actions;
  const Matrix dtanh = (1.0 - tanh_u.array().square()).matrix();
  t.head_grad.resize(2 * ad, n);
  const Matrix pass = t.heads.log_std_pass();
  for (Eigen::Index b = 0; b < n; ++b)
    for (Eigen::Index i = 0; i < ad; ++i) {
      const double sx = std_dev(i, b) * t.noise(i, b);
      // d log pi / d mean = 2 tanh(u); d log pi / d log_std = -1 + 2 tanh(u) std noise
      const double dmean = inv_n * alpha * 2.0 * tanh_u(i, b) + d_action(i, b) * dtanh(i, b);
      const double dls = inv_n * alpha * (-1.0 + 2.0 * tanh_u(i, b) * sx) + d_action(i, b) * dtanh(i, b) * sx;
      t.head_grad(i, b) = dmean;
      t.head_grad(ad + i, b) = dls * pass(i, b);
    }
  return t;
}

struct ActorLoss {
  double loss = 0.0;
  GradBuffer grads;
  RowVector log_probs;
};

inline ActorLoss finish_actor(const GaussianPolicy& policy, const ActorTerms& t, double loss) {
  ActorLoss out{loss, GradBuffer::zeros_like(policy.trunk), t.log_probs};
  backward(policy.trunk, t.cache, t.head_grad, &out.grads);
  return out;
}

inline ActorLoss actor_loss(const CriticEnsemble& e, const GaussianPolicy& policy, double alpha, const Matrix& states,
                            Rng& rng, ActorCritic mode = ActorCritic::MinOverEnsemble) {
  auto t = actor_terms(e, policy, alpha, states, rng, mode);
  return finish_actor(policy, t, t.loss);
}

// ---------------------------------------------------------------------------
// Agent

struct SacHyper {
  std::vector<Eigen::Index> hidden{64, 64};
  double gamma = 0.99;
  double policy_lr = 3e-4;
  double critic_lr = 3e-4;
  double alpha_lr = 3e-4;
  double tau = 0.005;
  std::size_t ensemble = 1;
  std::size_t batch_size = 256;
  std::size_t buffer_capacity = 1'000'000;
  double init_alpha = 0.1;
  std::optional<double> target_entropy;  // defaults to -action_dim
  long start_steps = 1000;               // uniform-random actions before this
  long update_after = 1000;              // first gradient step
  ActorCritic actor_critic = ActorCritic::MinOverEnsemble;
};

struct SacAgent {
  GaussianPolicy policy;
  AdamState policy_optim;
  CriticEnsemble critics;
  EntropyTemperature temperature;
};

inline SacAgent make_agent(Eigen::Index state_dim, Eigen::Index action_dim, const SacHyper& h, Rng& rng) {
  SacAgent a;
  a.policy = GaussianPolicy::make(state_dim, action_dim, h.hidden, rng);
  a.policy_optim = AdamState::for_net(a.policy.trunk, h.policy_lr);
  a.critics = CriticEnsemble::make(state_dim, action_dim, h.hidden, h.ensemble, rng, h.critic_lr, h.tau);
  a.temperature.log_alpha = std::log(h.init_alpha);
  a.temperature.target_entropy = h.target_entropy.value_or(-static_cast<double>(action_dim));
  a.temperature.optim = AdamState::for_scalar(h.alpha_lr);
  return a;
}

/// Fresh critics and temperature, keeping the policy network.
inline void reset_critics(SacAgent& a, const SacHyper& h, Rng& rng) {
  const auto sd = a.policy.state_dim();
  const auto ad = a.policy.action_dim;
  a.critics = CriticEnsemble::make(sd, ad, h.hidden, h.ensemble, rng, h.critic_lr, h.tau);
  a.temperature.log_alpha = std::log(h.init_alpha);
  a.temperature.target_entropy = h.target_entropy.value_or(-static_cast<double>(ad));
  a.temperature.optim = AdamState::for_scalar(h.alpha_lr);
  a.policy_optim = AdamState::for_net(a.policy.trunk, h.policy_lr);
}

/// Algorithm step shared by the plain and transfer loops: K independent
/// critic minibatches and updates, then soft target updates.
inline void update_critics(SacAgent& a, const ReplayBuffer& buffer, const SacHyper& h, Rng& batch_rng,
                           Rng& update_rng) {
  const double alpha = a.temperature.alpha();
  for (std::size_t k = 0; k < a.critics.size(); ++k) {
    const Batch b = gather_batch(buffer, buffer.sample_indices(h.batch_size, batch_rng));
    auto l = critic_loss(a.critics, a.policy, alpha, b, k, h.gamma, update_rng);
    adam_step(a.critics.online[k], l.grads, a.critics.optim[k]);
  }
  soft_update(a.critics, h.tau);
}

}  // namespace iob
