#include <gtest/gtest.h>

#include <sstream>

#include "iob/envs.hpp"

using namespace iob;

namespace {

Eigen::VectorXd act(double x, double y) { return (Eigen::VectorXd(2) << x, y).finished(); }

}  // namespace

TEST(Suite, SharedSpacesAndOrder) {
  const auto suite = make_task_suite();
  ASSERT_EQ(suite.size(), 5u);
  const TaskKind order[] = {TaskKind::Reach, TaskKind::PushAnalog, TaskKind::PushWallAnalog, TaskKind::PushBackAnalog,
                            TaskKind::PickAnalog};
  for (std::size_t i = 0; i < suite.size(); ++i) {
    EXPECT_EQ(suite[i].kind(), order[i]);
    EXPECT_EQ(suite[i].state_dim(), 8);
    EXPECT_EQ(suite[i].action_dim(), 2);
    EXPECT_EQ(parse_task_kind(to_string(order[i])), order[i]);
  }
  EXPECT_THROW(parse_task_kind("door"), ConfigError);
}

TEST(Suite, WallCrossesTheStraightCorridor) {
  const auto spec = TaskSpec::make(TaskKind::PushWallAnalog);
  ASSERT_FALSE(spec.walls.empty());
  const Vec2 centre = 0.5 * (spec.goal_lo + spec.goal_hi);
  EXPECT_TRUE(crosses_any(spec.object_start, centre, spec.walls));
  EXPECT_TRUE(crosses_any(spec.agent_start, centre, spec.walls));
}

TEST(Reset, LayoutAndGoalRegion) {
  Rng rng(1);
  PointMassTask reach(TaskKind::Reach);
  const auto a = reach.reset(rng);
  const auto b = reach.reset(rng);
  EXPECT_NE(a.segment<2>(6), b.segment<2>(6));
  const auto& spec = reach.spec();
  EXPECT_EQ(Vec2(a.segment<2>(0)), spec.agent_start);
  EXPECT_TRUE(a.segment<2>(2).isZero(0.0));
  EXPECT_EQ(Vec2(a.segment<2>(4)), spec.agent_start);  // placeholder object
  for (const auto& s : {a, b})
    for (int i = 0; i < 2; ++i) {
      EXPECT_GE(s(6 + i), spec.goal_lo(i));
      EXPECT_LE(s(6 + i), spec.goal_hi(i));
    }
  PointMassTask push(TaskKind::PushAnalog);
  EXPECT_EQ(Vec2(push.reset(rng).segment<2>(4)), push.spec().object_start);
}

TEST(Reset, GoalsUniformChiSquare) {
  PointMassTask t(TaskKind::PushAnalog);
  Rng rng(2);
  const int n = 10000, bins = 5;
  std::vector<double> cells(bins * bins, 0.0);
  const auto& s = t.spec();
  for (int i = 0; i < n; ++i) {
    const auto x = t.reset(rng);
    const int bx = std::min(bins - 1, static_cast<int>((x(6) - s.goal_lo.x()) / (s.goal_hi.x() - s.goal_lo.x()) * bins));
    const int by = std::min(bins - 1, static_cast<int>((x(7) - s.goal_lo.y()) / (s.goal_hi.y() - s.goal_lo.y()) * bins));
    cells[by * bins + bx] += 1.0;
  }
  const double e = static_cast<double>(n) / (bins * bins);
  double chi2 = 0.0;
  for (double c : cells) chi2 += (c - e) * (c - e) / e;
  EXPECT_LT(chi2, 42.98);  // chi-square 24 dof at 1%
}

TEST(Step, ZeroActionAtRestStaysPut) {
  Rng rng(3);
  PointMassTask t(TaskKind::Reach);
  const auto s0 = t.reset(rng);
  const auto r = t.step(act(0, 0));
  EXPECT_EQ(r.next_state.segment<2>(0), s0.segment<2>(0));
  EXPECT_TRUE(r.next_state.segment<2>(2).isZero(0.0));
}

TEST(Step, OnGoalIsSuccessWithBonus) {
  const auto spec = TaskSpec::make(TaskKind::Reach);
  const auto s = PointMassTask::make_state({0.1, 0.2}, Vec2::Zero(), spec.agent_start, {0.1, 0.2});
  const auto r = PointMassTask::transition(spec, s, act(0, 0));
  EXPECT_TRUE(r.success);
  EXPECT_TRUE(r.terminal);
  EXPECT_DOUBLE_EQ(r.reward, spec.success_bonus);
}

TEST(Step, SuccessImpliesWithinRadius) {
  Rng rng(4);
  for (auto t : make_task_suite())
    for (int e = 0; e < 20; ++e) {
      auto s = t.reset(rng);
      for (int k = 0; k < t.horizon(); ++k) {
        const auto r = t.step(act(rng.uniform(-1, 1), rng.uniform(-1, 1)));
        const Vec2 tracked = t.spec().has_object() ? Vec2(r.next_state.segment<2>(4)) : Vec2(r.next_state.segment<2>(0));
        if (r.success) {
          EXPECT_LE((tracked - Vec2(r.next_state.segment<2>(6))).norm(), t.spec().success_radius);
        }
        if (r.terminal) break;
      }
    }
}

TEST(Step, HeadingToGoalBeatsStayingStill) {
  const auto spec = TaskSpec::make(TaskKind::Reach);
  const auto start = PointMassTask::make_state(spec.agent_start, Vec2::Zero(), spec.agent_start, {0.0, 0.5});
  auto rollout = [&](bool move) {
    auto s = start;
    double ret = 0.0;
    for (int k = 0; k < 30; ++k) {
      const auto r = PointMassTask::transition(spec, s, move ? scripted_action(spec, s) : act(0, 0));
      ret += r.reward;
      s = r.next_state;
      if (r.terminal) break;
    }
    return ret;
  };
  EXPECT_GT(rollout(true), rollout(false));
}

TEST(Step, ActionsAreClippedAndArenaBounded) {
  const auto spec = TaskSpec::make(TaskKind::Reach);
  auto s = PointMassTask::make_state({0.95, 0.95}, Vec2::Zero(), spec.agent_start, {0.0, 0.0});
  const auto big = PointMassTask::transition(spec, s, act(50, 50));
  const auto one = PointMassTask::transition(spec, s, act(1, 1));
  EXPECT_EQ(big.next_state, one.next_state);
  for (int k = 0; k < 50; ++k) s = PointMassTask::transition(spec, s, act(1, 1)).next_state;
  EXPECT_LE(s.segment<2>(0).maxCoeff(), 1.0);
}

TEST(Step, DeterministicGivenActions) {
  Rng a(5), b(5), acts(6);
  PointMassTask x(TaskKind::PushWallAnalog), y(TaskKind::PushWallAnalog);
  x.reset(a);
  y.reset(b);
  for (int k = 0; k < 100; ++k) {
    const auto u = act(acts.uniform(-1, 1), acts.uniform(-1, 1));
    EXPECT_EQ(x.step(u).next_state, y.step(u).next_state);
  }
}

TEST(Step, ContactPushesObject) {
  const auto spec = TaskSpec::make(TaskKind::PushAnalog);
  const Vec2 obj = spec.object_start;
  const auto s = PointMassTask::make_state(obj - Vec2(0, 0.05), Vec2::Zero(), obj, {0, 0.5});
  const auto r = PointMassTask::transition(spec, s, act(0, 1));
  EXPECT_GT(r.next_state(5), obj.y());
  const auto far = PointMassTask::make_state(obj - Vec2(0, 0.5), Vec2::Zero(), obj, {0, 0.5});
  EXPECT_EQ(PointMassTask::transition(spec, far, act(0, 1)).next_state(5), obj.y());
}

TEST(Walls, NoTrajectoryCrossesAWall) {
  Rng rng(7);
  PointMassTask t(TaskKind::PushWallAnalog);
  const auto& walls = t.spec().walls;
  std::vector<TrajectoryRow> log;
  for (int e = 0; e < 200; ++e) {
    auto s = t.reset(rng);
    for (int k = 0; k < t.horizon(); ++k) {
      // bias upward so the wall is hit often
      const auto u = act(rng.uniform(-1, 1), rng.uniform(-0.2, 1));
      const auto r = t.step(u);
      EXPECT_FALSE(crosses_any(s.segment<2>(0), r.next_state.segment<2>(0), walls));
      EXPECT_FALSE(crosses_any(s.segment<2>(4), r.next_state.segment<2>(4), walls));
      if (e == 0) log.push_back({k, r.next_state, u, r.reward, r.success});
      s = r.next_state;
      if (r.terminal) break;
    }
  }
  std::ostringstream os;
  write_trajectory_csv(os, log);
  const std::string csv = os.str();
  EXPECT_EQ(csv.rfind("step,ax,ay", 0), 0u);
  EXPECT_EQ(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')), log.size() + 1);
}

TEST(Walls, SlideAlongWall) {
  const auto spec = TaskSpec::make(TaskKind::PushWallAnalog);
  const auto s = PointMassTask::make_state({0.0, -0.02}, Vec2(0.03, 0.05), spec.object_start, {0, 0.5});
  const auto r = PointMassTask::transition(spec, s, act(1, 1));
  EXPECT_LT(r.next_state(1), 0.0);
  EXPECT_GT(r.next_state(0), 0.0);
}

TEST(Scripted, SolvesReach) {
  Rng rng(8);
  PointMassTask t(TaskKind::Reach);
  int wins = 0;
  for (int e = 0; e < 100; ++e) {
    auto s = t.reset(rng);
    for (int k = 0; k < t.horizon(); ++k) {
      const auto r = t.step(scripted_action(t.spec(), s));
      s = r.next_state;
      if (r.success) {
        ++wins;
        break;
      }
    }
  }
  EXPECT_GE(wins, 95);
}
