#include <gtest/gtest.h>

#include "iob/envs.hpp"
#include "iob/transfer.hpp"
#include "test_util.hpp"

using namespace iob;
using iob::testing::finite_difference;
using iob::testing::max_rel_err;
using iob::testing::random_policy;
using iob::testing::uniform_matrix;

namespace {

// Q(s, a) = w . a, independent of the state.
struct LinearCritic {
  Vector w;
  RowVector min_q(const Matrix&, const Matrix& actions) const { return w.transpose() * actions; }
};

GaussianHeads constant_heads(const Vector& mean, const Vector& log_std, Eigen::Index n) {
  GaussianHeads h;
  h.mean = mean.replicate(1, n);
  h.log_std = log_std.replicate(1, n);
  h.raw_log_std = h.log_std;
  return h;
}

IobHyper small_hyper() {
  IobHyper h;
  h.sac.hidden = {16, 16};
  h.sac.batch_size = 32;
  h.sac.start_steps = 100;
  h.sac.update_after = 100;
  h.sac.ensemble = 2;
  return h;
}

}  // namespace

TEST(Candidates, TargetCopyIsLastAndSynchronized) {
  Rng rng(1);
  CandidateSet set;
  set.sources = {random_policy(3, 2, 8, rng), random_policy(3, 2, 8, rng)};
  auto target = random_policy(3, 2, 8, rng);
  set.synchronize(target);
  EXPECT_EQ(set.size(), 3u);
  EXPECT_EQ(set.target_index(), 2u);
  EXPECT_TRUE(set.synchronized_with(target));
  target.trunk.layers[0].bias(0) += 1e-12;
  EXPECT_FALSE(set.synchronized_with(target));
}

TEST(Candidates, CachedOutputsMatchForward) {
  Rng rng(2);
  std::vector<GaussianPolicy> src{random_policy(4, 2, 8, rng), random_policy(4, 2, 8, rng)};
  const Vector s = Vector::Random(4);
  const auto c = cache_source_outputs(src, s);
  ASSERT_EQ(c.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    const auto h = policy_heads(src[i], Matrix(s));
    EXPECT_TRUE(c[i].mean.isApprox(h.mean.col(0), 1e-15));
    EXPECT_TRUE(c[i].log_std.isApprox(h.log_std.col(0), 1e-15));
  }
}

TEST(Score, MatchesDirectMonteCarlo) {
  const LinearCritic q{(Vector(2) << 1.0, -0.5).finished()};
  const Vector mean = (Vector(2) << 0.3, -0.2).finished(), ls = (Vector(2) << -0.5, 0.1).finished();
  Rng a(3), b(3);
  const double score = candidate_score(mean, ls, Vector::Zero(1), q, 0.2, 7, a);
  double expect = 0.0;
  for (int j = 0; j < 7; ++j) {
    const auto smp = sample_from_heads(mean, ls, b);
    expect += (q.w.dot(smp.action) - 0.2 * smp.log_prob) / 7.0;
  }
  EXPECT_NEAR(score, expect, 1e-12);
  EXPECT_THROW(candidate_score(mean, ls, Vector::Zero(1), q, 0.2, 0, a), DomainError);
}

TEST(Select, PicksBestAndBreaksTiesLow) {
  const LinearCritic q{Vector::Constant(1, 1.0)};
  const Eigen::Index n = 6;
  std::vector<GaussianHeads> c{constant_heads(Vector::Constant(1, -2.0), Vector::Constant(1, -1.0), n),
                               constant_heads(Vector::Constant(1, 2.0), Vector::Constant(1, -1.0), n),
                               constant_heads(Vector::Constant(1, 2.0), Vector::Constant(1, -1.0), n),
                               constant_heads(Vector::Constant(1, 0.0), Vector::Constant(1, -1.0), n)};
  Rng rng(4);
  const auto g = select_guidance(std::span<const GaussianHeads>(c), Matrix::Zero(1, n), q, 0.1, 5, rng);
  for (auto i : g.index) EXPECT_EQ(i, 1u);  // 1 and 2 score identically on shared noise
  for (Eigen::Index b = 0; b < n; ++b) EXPECT_EQ(g.score(1, b), g.score(2, b));
  for (Eigen::Index b = 0; b < n; ++b)
    for (Eigen::Index k = 0; k < 4; ++k) EXPECT_GE(g.score(static_cast<Eigen::Index>(g.index[b]), b), g.score(k, b));
  EXPECT_THROW(select_guidance(std::span<const GaussianHeads>{}, Matrix::Zero(1, n), q, 0.1, 5, rng), DomainError);
}

TEST(Select, WarmupAndNoSourcesReturnTarget) {
  Rng rng(5);
  CandidateSet set;
  set.sources = {random_policy(3, 1, 8, rng)};
  set.synchronize(random_policy(3, 1, 8, rng));
  const LinearCritic q{Vector::Constant(1, 1.0)};
  const Matrix states = Matrix::Random(3, 10);
  const auto cold = select_guidance(set, states, q, 0.1, 5, false, rng);
  for (auto i : cold.index) EXPECT_EQ(i, set.target_index());
  CandidateSet alone;
  alone.synchronize(set.target_copy);
  for (auto i : select_guidance(alone, states, q, 0.1, 5, true, rng).index) EXPECT_EQ(i, 0u);
}

TEST(Kl, ClosedFormMatchesMonteCarloUnderSquash) {
  Rng rng(6);
  for (int t = 0; t < 5; ++t) {
    const Vector mp = Vector::Random(2), lp = 0.5 * Vector::Random(2);
    const Vector mq = Vector::Random(2), lq = 0.5 * Vector::Random(2);
    const double exact = gaussian_kl(mp, lp, mq, lq);
    const double mc = squashed_kl_monte_carlo(mp, lp, mq, lq, 200000, rng);
    EXPECT_NEAR(mc, exact, 0.02 + 0.02 * exact);
  }
  const Vector z = Vector::Zero(2);
  EXPECT_EQ(gaussian_kl(z, z, z, z), 0.0);
}

TEST(Regularized, ZeroBetaIsPlainActorLoss) {
  Rng rng(7);
  const auto e = CriticEnsemble::make(3, 2, {8, 8}, 2, rng);
  const auto p = random_policy(3, 2, 8, rng);
  const Matrix s = Matrix::Random(3, 16);
  const auto src = random_policy(3, 2, 8, rng);
  std::vector<GaussianHeads> heads{policy_heads(src, s), policy_heads(p, s)};
  GuidanceChoice g{std::vector<std::size_t>(16, 0), Matrix()};
  Rng u1(8), u2(8), k1(9);
  const auto reg = regularized_actor_loss(e, p, 0.2, s, g, heads, 1, 0.0, 5, u1, k1);
  const auto base = actor_loss(e, p, 0.2, s, u2);
  EXPECT_EQ(reg.actor.loss, base.loss);
  for (std::size_t l = 0; l < p.trunk.layers.size(); ++l) EXPECT_EQ(reg.actor.grads.weight[l], base.grads.weight[l]);
  EXPECT_EQ(k1.uniform(), Rng(9).uniform());  // KL stream untouched
}

TEST(Regularized, TargetGuidedStatesContributeNothing) {
  Rng rng(10);
  const auto e = CriticEnsemble::make(3, 2, {8, 8}, 1, rng);
  const auto p = random_policy(3, 2, 8, rng);
  const Matrix s = Matrix::Random(3, 8);
  const auto src = random_policy(3, 2, 8, rng);
  std::vector<GaussianHeads> heads{policy_heads(src, s), policy_heads(p, s)};
  GuidanceChoice g{std::vector<std::size_t>(8, 1), Matrix()};
  Rng u1(11), u2(11), k1(12);
  const auto reg = regularized_actor_loss(e, p, 0.2, s, g, heads, 1, 30.0, 5, u1, k1);
  EXPECT_EQ(reg.kl_mean, 0.0);
  EXPECT_EQ(reg.actor.loss, actor_loss(e, p, 0.2, s, u2).loss);
}

TEST(Regularized, GradientMatchesFiniteDifferences) {
  Rng rng(13);
  for (int trial = 0; trial < 24; ++trial) {
    const Eigen::Index sd = 3, ad = 2, n = 8;
    const auto w = static_cast<Eigen::Index>(4 + rng.index(13));
    const auto e = CriticEnsemble::make(sd, ad, {w, w}, 1 + trial % 2, rng);
    auto p = random_policy(sd, ad, w, rng);
    const Matrix s = uniform_matrix(sd, n, rng);
    const auto src = random_policy(sd, ad, w, rng);
    const std::vector<GaussianHeads> heads{policy_heads(src, s), policy_heads(p, s)};
    GuidanceChoice g;
    for (Eigen::Index b = 0; b < n; ++b) g.index.push_back(rng.uniform() < 0.7 ? 0 : 1);
    const auto est = trial % 2 ? KlEstimator::ClosedForm : KlEstimator::MonteCarlo;
    const Rng u0(rng.index(1u << 30)), k0(rng.index(1u << 30));
    auto loss = [&] {
      Rng u = u0, k = k0;
      return regularized_actor_loss(e, p, 0.2, s, g, heads, 1, 3.0, 5, u, k, est).actor.loss;
    };
    Rng u = u0, k = k0;
    const auto r = regularized_actor_loss(e, p, 0.2, s, g, heads, 1, 3.0, 5, u, k, est);
    EXPECT_EQ(r.floor_hits, 0u);
    EXPECT_GT(r.kl_mean, 0.0);
    EXPECT_LE(max_rel_err(r.actor.grads, finite_difference(p.trunk, loss)), 1e-3) << "trial " << trial;
  }
}

TEST(Behavior, BranchRatesAtEndpoints) {
  const LinearCritic q{Vector::Constant(1, 1.0)};
  std::vector<SourceOutput> c{{Vector::Constant(1, 3.0), Vector::Constant(1, -2.0)},
                              {Vector::Constant(1, -3.0), Vector::Constant(1, -2.0)}};
  Rng br(1), ar(2);
  for (int i = 0; i < 200; ++i) {
    const auto d0 = behavior_action(0.0, Vector::Zero(1), c, q, 0.1, true, br, ar);
    EXPECT_FALSE(d0.guidance_branch);
    EXPECT_EQ(d0.candidate, 1u);
    const auto d1 = behavior_action(1.0, Vector::Zero(1), c, q, 0.1, true, br, ar);
    EXPECT_TRUE(d1.guidance_branch);
    EXPECT_EQ(d1.candidate, 0u);  // the critic prefers positive actions
    EXPECT_GT(d1.action(0), 0.9);
    const auto cold = behavior_action(1.0, Vector::Zero(1), c, q, 0.1, false, br, ar);
    EXPECT_EQ(cold.candidate, 1u);
  }
  EXPECT_THROW(behavior_action(1.5, Vector::Zero(1), c, q, 0.1, true, br, ar), DomainError);
}

TEST(Behavior, ElseBranchDrawsLikeSampleAction) {
  Rng rng(3);
  const auto p = random_policy(3, 2, 8, rng);
  const Vector s = Vector::Random(3);
  const auto h = policy_heads(p, Matrix(s));
  const std::vector<SourceOutput> c{{h.mean.col(0), h.log_std.col(0)}};
  const LinearCritic q{Vector::Zero(2)};
  Rng br(4), a1(5), a2(5);
  for (int i = 0; i < 20; ++i)
    EXPECT_EQ(behavior_action(0.0, s, c, q, 0.1, true, br, a1).action, sample_action(p, s, a2).action);
}

TEST(Train, ReductionToSacIsBitIdentical) {
  auto h = small_hyper();
  h.beta = 0.0;
  h.epsilon = 0.0;
  TrainOptions o;
  o.budget = 600;
  o.eval_every = 200;
  o.eval_episodes = 2;
  const PointMassTask env(TaskKind::Reach);
  Rng rng(6);
  const std::vector<GaussianPolicy> src{random_policy(8, 2, 16, rng)};
  const auto a = iob_train(env, src, h, 17, o);
  const auto b = sac_train(env, h.sac, 17, o);
  ASSERT_FALSE(a.failed);
  EXPECT_EQ(a.curve.success, b.curve.success);
  for (std::size_t l = 0; l < b.state.agent.policy.trunk.layers.size(); ++l) {
    EXPECT_EQ(a.state.agent.policy.trunk.layers[l].weight, b.state.agent.policy.trunk.layers[l].weight);
    EXPECT_EQ(a.state.agent.critics.online[0].layers[l].weight, b.state.agent.critics.online[0].layers[l].weight);
  }
  EXPECT_EQ(a.state.agent.temperature.log_alpha, b.state.agent.temperature.log_alpha);
}

TEST(Train, ResumeReducesToSacResumeAndSkipsWarmup) {
  auto h = small_hyper();
  TrainOptions o;
  o.budget = 400;
  o.eval_every = 200;
  o.eval_episodes = 1;
  const PointMassTask env(TaskKind::PushAnalog);
  Rng rng(16);
  const std::vector<GaussianPolicy> src{random_policy(8, 2, 16, rng)};
  const auto base = iob_train(env, src, h, 21, o);
  ASSERT_FALSE(base.failed);

  auto zero = h;
  zero.beta = 0.0;
  zero.epsilon = 0.0;
  o.budget = 200;
  o.start_steps = 0;
  o.update_after = 0;
  const auto a = iob_train(env, src, zero, 22, o, base.state);
  const auto b = sac_train(env, zero.sac, 22, o, base.state);
  EXPECT_EQ(a.curve.success, b.curve.success);
  for (std::size_t l = 0; l < b.state.agent.policy.trunk.layers.size(); ++l)
    EXPECT_EQ(a.state.agent.policy.trunk.layers[l].weight, b.state.agent.policy.trunk.layers[l].weight);
  EXPECT_EQ(a.state.agent.temperature.log_alpha, b.state.agent.temperature.log_alpha);

  auto late = h;
  late.warmup_steps = 1000;
  const auto c = iob_train(env, src, late, 22, o, base.state);
  ASSERT_GE(c.selection.size(), 2u);
  EXPECT_GT(c.selection[1][0], 0.0);
}

TEST(Train, NoSourceBeforeWarmup) {
  auto h = small_hyper();
  h.warmup_steps = 400;
  TrainOptions o;
  o.budget = 600;
  o.eval_every = 100;
  o.eval_episodes = 1;
  Rng rng(7);
  const std::vector<GaussianPolicy> src{random_policy(8, 2, 16, rng), random_policy(8, 2, 16, rng)};
  const auto r = iob_train(PointMassTask(TaskKind::PushAnalog), src, h, 3, o);
  ASSERT_EQ(r.selection.size(), r.curve.size());
  for (std::size_t i = 0; i < r.curve.size(); ++i) {
    if (r.curve.steps[i] > 400) continue;
    EXPECT_EQ(r.selection[i][0], 0.0);
    EXPECT_EQ(r.selection[i][1], 0.0);
  }
  double after = 0.0;
  for (std::size_t i = 0; i < r.curve.size(); ++i)
    if (r.curve.steps[i] > 400) after += r.selection[i][0] + r.selection[i][1] + r.selection[i][2];
  EXPECT_GT(after, 0.0);
}

TEST(Train, DimensionMismatchIsConfigError) {
  Rng rng(8);
  const std::vector<GaussianPolicy> src{random_policy(5, 2, 8, rng)};
  EXPECT_THROW(iob_train(PointMassTask(TaskKind::Reach), src, small_hyper(), 1, TrainOptions{}), ConfigError);
  auto bad = small_hyper();
  bad.epsilon = 2.0;
  EXPECT_THROW(iob_train(PointMassTask(TaskKind::Reach), {}, bad, 1, TrainOptions{}), ConfigError);
}

TEST(Train, CachingOffStillRuns) {
  auto h = small_hyper();
  h.cache_source_outputs = false;
  h.warmup_steps = 0;
  TrainOptions o;
  o.budget = 300;
  o.eval_every = 150;
  o.eval_episodes = 1;
  Rng rng(9);
  const std::vector<GaussianPolicy> src{random_policy(8, 2, 16, rng)};
  const auto r = iob_train(PointMassTask(TaskKind::Reach), src, h, 4, o);
  EXPECT_FALSE(r.failed);
  EXPECT_TRUE(r.state.buffer[0].cached.empty());
  EXPECT_EQ(r.gradient_steps, 201);
}
