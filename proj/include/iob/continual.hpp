#pragma once

// Sequential tasks with one shared policy network. After each task the
// smallest free weights of every layer are pruned, the survivors are retrained
// briefly and then frozen as owned by that task. Earlier tasks are executed
// through mask snapshots and are offered to later tasks as sources.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "iob/envs.hpp"
#include "iob/metrics.hpp"
#include "iob/transfer.hpp"

namespace iob {

/// Owner task per policy parameter, laid out like param_block():
/// 0 = free, t >= 1 = owned by task t.
struct TaskMask {
  std::vector<std::vector<int>> owner;
  std::vector<std::vector<double>> prune_history;  // per task, per weight layer

  static TaskMask for_net(const DenseNet& net) {
    TaskMask m;
    for (std::size_t b = 0; b < block_count(net); ++b)
      m.owner.emplace_back(static_cast<std::size_t>(param_block(net, b).size()), 0);
    return m;
  }

  bool matches(const DenseNet& net) const {
    if (owner.size() != block_count(net)) return false;
    for (std::size_t b = 0; b < owner.size(); ++b)
      if (owner[b].size() != static_cast<std::size_t>(param_block(net, b).size())) return false;
    return true;
  }

  std::size_t count(int task) const {
    std::size_t c = 0;
    for (const auto& blk : owner) c += static_cast<std::size_t>(std::count(blk.begin(), blk.end(), task));
    return c;
  }
};

inline bool is_weight_block(std::size_t b) { return b % 2 == 0; }

inline double prune_fraction(int t, int n) {
  if (t < 1 || t > n) throw DomainError("prune_fraction: need 1 <= t <= n");
  return static_cast<double>(n - t) / static_cast<double>(n - t + 1);
}

/// Zeroes the smallest-magnitude fraction (n-t)/(n-t+1) of the free weights
/// in every layer (they stay free) and assigns the surviving free weights to
/// task t. Free biases go to task t as well and are never pruned.
inline TaskMask& prune_and_freeze(DenseNet& net, TaskMask& mask, int t, int n) {
  if (t < 1 || t > n) throw DomainError("prune_and_freeze: task index out of range");
  if (!mask.matches(net)) throw ShapeError("prune_and_freeze: mask does not match network");
  const double frac = prune_fraction(t, n);
  std::vector<double> history;
  for (std::size_t b = 0; b < block_count(net); ++b) {
    auto p = param_block(net, b);
    auto& own = mask.owner[b];
    std::vector<std::size_t> free;
    for (std::size_t i = 0; i < own.size(); ++i)
      if (own[i] == 0) free.push_back(i);
    std::size_t pruned = 0;
    if (is_weight_block(b)) {
      pruned = static_cast<std::size_t>(std::llround(frac * static_cast<double>(free.size())));
      std::stable_sort(free.begin(), free.end(), [&](std::size_t x, std::size_t y) {
        return std::abs(p(static_cast<Eigen::Index>(x))) < std::abs(p(static_cast<Eigen::Index>(y)));
      });
      for (std::size_t k = 0; k < pruned; ++k) p(static_cast<Eigen::Index>(free[k])) = 0.0;
      history.push_back(frac);
    }
    for (std::size_t k = pruned; k < free.size(); ++k) own[free[k]] = t;
  }
  mask.prune_history.push_back(std::move(history));
  return mask;
}

/// Zeroes gradients of parameters owned by tasks before `t`.
inline GradBuffer& masked_gradient_filter(GradBuffer& grads, const TaskMask& mask, int t) {
  for (std::size_t b = 0; b < mask.owner.size(); ++b) {
    auto g = grads.block(b);
    for (std::size_t i = 0; i < mask.owner[b].size(); ++i) {
      const int o = mask.owner[b][i];
      if (o >= 1 && o < t) g(static_cast<Eigen::Index>(i)) = 0.0;
    }
  }
  return grads;
}

/// Passes only gradients of parameters owned by exactly task `t`.
inline GradBuffer& owned_gradient_filter(GradBuffer& grads, const TaskMask& mask, int t) {
  for (std::size_t b = 0; b < mask.owner.size(); ++b) {
    auto g = grads.block(b);
    for (std::size_t i = 0; i < mask.owner[b].size(); ++i)
      if (mask.owner[b][i] != t) g(static_cast<Eigen::Index>(i)) = 0.0;
  }
  return grads;
}

/// Network as task i sees it: parameters owned by tasks 1..i kept, all
/// others (free or owned by later tasks) zeroed.
inline DenseNet masked_snapshot(const DenseNet& net, const TaskMask& mask, int i) {
  if (!mask.matches(net)) throw ShapeError("masked_snapshot: mask does not match network");
  DenseNet out = net;
  for (std::size_t b = 0; b < block_count(out); ++b) {
    auto p = param_block(out, b);
    for (std::size_t k = 0; k < mask.owner[b].size(); ++k) {
      const int o = mask.owner[b][k];
      if (o < 1 || o > i) p(static_cast<Eigen::Index>(k)) = 0.0;
    }
  }
  return out;
}

inline GaussianPolicy masked_policy(const GaussianPolicy& p, const TaskMask& mask, int i) {
  GaussianPolicy out = p;
  out.trunk = masked_snapshot(p.trunk, mask, i);
  return out;
}

/// Parameters owned by task `t`, in block order.
inline std::vector<double> owned_values(const DenseNet& net, const TaskMask& mask, int t) {
  std::vector<double> v;
  for (std::size_t b = 0; b < block_count(net); ++b) {
    const auto p = param_block(net, b);
    for (std::size_t k = 0; k < mask.owner[b].size(); ++k)
      if (mask.owner[b][k] == t) v.push_back(p(static_cast<Eigen::Index>(k)));
  }
  return v;
}

struct RetrainResult {
  TrainResult run;
  double before = 0.0;  // success after pruning, before retraining
  double after = 0.0;
};

/// Short fine-tuning that only moves parameters owned by task `t`, with the
/// same objective and sources the task was trained with. Reuses the task's
/// critics and replay data; the policy optimizer starts fresh so that masked
/// parameters receive exactly zero updates.
template <class Env>
RetrainResult retrain_masked(const Env& env, TrainState state, const TaskMask& mask, int t, long steps,
                             const IobHyper& h, std::span<const GaussianPolicy> sources, std::uint64_t seed,
                             int eval_episodes) {
  RetrainResult out;
  RunStreams rs(seed);
  out.before = evaluate_policy(env, state.agent.policy, eval_episodes, rs.eval(0));
  state.agent.policy_optim = AdamState::for_net(state.agent.policy.trunk, h.sac.policy_lr);
  if (steps <= 0) {
    out.after = out.before;
    out.run.state = std::move(state);
    return out;
  }
  TrainOptions opt;
  opt.budget = steps;
  opt.eval_every = steps;
  opt.eval_episodes = eval_episodes;
  opt.start_steps = 0;
  opt.update_after = 0;
  opt.policy_grad_filter = [&mask, t](GradBuffer& g) { owned_gradient_filter(g, mask, t); };
  out.run = iob_train(env, sources, h, seed, opt, std::move(state));
  out.after = out.run.curve.final_success();
  return out;
}

enum class ContinualMethod { PackNetIob, PackNet, FineTune };

inline std::string_view to_string(ContinualMethod m) {
  switch (m) {
    case ContinualMethod::PackNetIob: return "packnet-iob";
    case ContinualMethod::PackNet: return "packnet";
    case ContinualMethod::FineTune: return "finetune";
  }
  return "?";
}

inline ContinualMethod parse_continual_method(std::string_view s) {
  for (auto m : {ContinualMethod::PackNetIob, ContinualMethod::PackNet, ContinualMethod::FineTune})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown continual method '" + std::string(s) + "'");
}

struct ContinualHyper {
  IobHyper iob;
  ContinualMethod method = ContinualMethod::PackNetIob;
  long task_budget = 20'000;
  double retrain_fraction = 0.1;
  long eval_every = 0;  // 0: task_budget / 50
  int eval_episodes = 10;
  int matrix_episodes = 50;  // per cell of the evaluation matrix
  double restore_tolerance = 0.05;
};

struct ContinualReport {
  std::vector<std::string> tasks;
  std::vector<LearningCurve> curves;  // per task, during its own training phase
  Eigen::MatrixXd eval;               // task x boundary; last column is the end of training
  std::vector<std::optional<double>> forward_transfer;
  Forgetting forgetting;
  double success = 0.0;  // mean of the last column
  std::optional<double> average_transfer;
  bool frozen_audit = true;
  std::vector<std::string> warnings;

  void write_csv(std::ostream& os) const {
    os << "task";
    for (Eigen::Index j = 0; j < eval.cols(); ++j) os << ",after_" << (j + 1);
    os << '\n';
    for (Eigen::Index i = 0; i < eval.rows(); ++i) {
      os << tasks[static_cast<std::size_t>(i)];
      for (Eigen::Index j = 0; j < eval.cols(); ++j) os << ',' << eval(i, j);
      os << '\n';
    }
  }

  void write_summary(std::ostream& os) const {
    os << "success " << success << '\n';
    os << "forgetting " << forgetting.average << '\n';
    os << "transfer ";
    if (average_transfer) os << *average_transfer; else os << "missing";
    os << '\n';
    os << "frozen_audit " << (frozen_audit ? "pass" : "fail") << '\n';
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      os << "task " << tasks[i] << " forgetting " << forgetting.per_task[i] << " ft ";
      if (forward_transfer[i]) os << *forward_transfer[i]; else os << "missing";
      os << '\n';
    }
    for (const auto& w : warnings) os << "warning " << w << '\n';
  }
};

inline std::uint64_t task_seed(std::uint64_t seed, std::size_t task) { return Rng(seed).substream("task", task).seed(); }

/// Fresh SAC on every task with the seeds continual_run uses, for FT.
template <class Env>
std::vector<LearningCurve> reference_curves(const std::vector<Env>& tasks, const ContinualHyper& h,
                                            std::uint64_t seed) {
  std::vector<LearningCurve> out;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    TrainOptions opt;
    opt.budget = h.task_budget;
    opt.eval_every = h.eval_every;
    opt.eval_episodes = h.eval_episodes;
    out.push_back(sac_train(tasks[i], h.iob.sac, task_seed(seed, i), opt).curve);
  }
  return out;
}

template <class Env>
ContinualReport continual_run(const std::vector<Env>& tasks, const ContinualHyper& h, std::uint64_t seed,
                              const std::vector<LearningCurve>* reference = nullptr) {
  if (tasks.empty()) throw ConfigError("continual_run: empty task sequence");
  for (const auto& e : tasks)
    if (e.state_dim() != tasks.front().state_dim() || e.action_dim() != tasks.front().action_dim())
      throw ConfigError("continual_run: tasks must share state and action spaces");
  const int n = static_cast<int>(tasks.size());
  const bool masked = h.method != ContinualMethod::FineTune;
  IobHyper inner = h.iob;
  if (h.method != ContinualMethod::PackNetIob) {
    inner.beta = 0.0;
    inner.epsilon = 0.0;
  }

  ContinualReport rep;
  rep.eval = Eigen::MatrixXd::Zero(n, n);
  std::optional<GaussianPolicy> policy;
  TaskMask mask;
  std::vector<GaussianPolicy> sources;
  std::vector<std::vector<double>> frozen(static_cast<std::size_t>(n));

  for (int t = 1; t <= n; ++t) {
    const auto& env = tasks[static_cast<std::size_t>(t - 1)];
    rep.tasks.emplace_back(to_string(env.kind()));
    const std::uint64_t s = task_seed(seed, static_cast<std::size_t>(t - 1));
    TrainOptions opt;
    opt.budget = h.task_budget;
    opt.eval_every = h.eval_every;
    opt.eval_episodes = h.eval_episodes;
    opt.initial_policy = policy;
    if (masked && t > 1) opt.policy_grad_filter = [&mask, t](GradBuffer& g) { masked_gradient_filter(g, mask, t); };
    const std::vector<GaussianPolicy> offered = h.method == ContinualMethod::PackNetIob ? sources
                                                                                        : std::vector<GaussianPolicy>{};
    auto run = iob_train(env, std::span<const GaussianPolicy>(offered), inner, s, opt);
    if (run.failed) rep.warnings.push_back("task " + std::to_string(t) + ": " + run.failure);
    rep.curves.push_back(run.curve);

    if (masked) {
      if (t == 1) mask = TaskMask::for_net(run.state.agent.policy.trunk);
      prune_and_freeze(run.state.agent.policy.trunk, mask, t, n);
      const long steps = std::llround(h.retrain_fraction * static_cast<double>(h.task_budget));
      const double pre = run.curve.final_success();
      auto rt = retrain_masked(env, std::move(run.state), mask, t, steps, inner,
                               std::span<const GaussianPolicy>(offered), Rng(s).substream("retrain").seed(),
                               h.eval_episodes);
      if (rt.after < pre - h.restore_tolerance)
        rep.warnings.push_back("task " + std::to_string(t) + ": retraining restored " + std::to_string(rt.after) +
                               " of " + std::to_string(pre));
      policy = rt.run.state.agent.policy;
      frozen[static_cast<std::size_t>(t - 1)] = owned_values(policy->trunk, mask, t);
      sources.push_back(masked_policy(*policy, mask, t));
    } else {
      policy = run.state.agent.policy;
      sources.push_back(*policy);
    }

    // evaluation column for this boundary
    for (int i = 1; i <= n; ++i) {
      const auto& ev = tasks[static_cast<std::size_t>(i - 1)];
      const GaussianPolicy p = masked && i <= t ? masked_policy(*policy, mask, i) : *policy;
      rep.eval(i - 1, t - 1) = evaluate_policy(ev, p, h.matrix_episodes, Rng(seed).substream("matrix", i));
    }
  }

  if (masked)
    for (int t = 1; t <= n; ++t)
      if (owned_values(policy->trunk, mask, t) != frozen[static_cast<std::size_t>(t - 1)]) rep.frozen_audit = false;

  rep.forgetting = compute_forgetting(rep.eval);
  rep.success = rep.eval.col(n - 1).mean();
  if (reference) {
    double sum = 0.0;
    int count = 0;
    for (int t = 0; t < n; ++t) {
      auto ft = compute_forward_transfer(rep.curves[static_cast<std::size_t>(t)], (*reference)[static_cast<std::size_t>(t)]);
      rep.forward_transfer.push_back(ft);
      if (ft) {
        sum += *ft;
        ++count;
      }
    }
    if (count > 0) rep.average_transfer = sum / count;
  } else {
    rep.forward_transfer.assign(static_cast<std::size_t>(n), std::nullopt);
  }
  return rep;
}

}  // namespace iob
