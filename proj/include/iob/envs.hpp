#pragma once

// 2-D point-mass tasks sharing one state/action space:
//   state  = [agent x, agent y, agent vx, agent vy, object x, object y, goal x, goal y]
//   action = 2-D acceleration command in [-1, 1]^2
//
// Object kinds use sticky contact: while the agent is within the contact
// radius of the object at the start of a step, the object is dragged by the
// agent's displacement. Reach has no object; its object fields hold the
// agent start position as a constant placeholder.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "iob/errors.hpp"
#include "iob/rng.hpp"

namespace iob {

using Vec2 = Eigen::Vector2d;

enum class TaskKind { Reach, PushAnalog, PushWallAnalog, PushBackAnalog, PickAnalog };

inline std::string_view to_string(TaskKind k) {
  switch (k) {
    case TaskKind::Reach: return "reach";
    case TaskKind::PushAnalog: return "push";
    case TaskKind::PushWallAnalog: return "push-wall";
    case TaskKind::PushBackAnalog: return "push-back";
    case TaskKind::PickAnalog: return "pick";
  }
  return "?";
}

inline TaskKind parse_task_kind(std::string_view s) {
  for (auto k : {TaskKind::Reach, TaskKind::PushAnalog, TaskKind::PushWallAnalog, TaskKind::PushBackAnalog,
                 TaskKind::PickAnalog})
    if (to_string(k) == s) return k;
  throw ConfigError("unknown task '" + std::string(s) + "'");
}

struct Segment {
  Vec2 a;
  Vec2 b;
};

/// Parameter t in [0,1] along p->q where it crosses segment w, if it does.
inline std::optional<double> crossing(const Vec2& p, const Vec2& q, const Segment& w) {
  const Vec2 r = q - p;
  const Vec2 s = w.b - w.a;
  const double denom = r.x() * s.y() - r.y() * s.x();
  if (std::abs(denom) < 1e-15) return std::nullopt;  // parallel
  const Vec2 d = w.a - p;
  const double t = (d.x() * s.y() - d.y() * s.x()) / denom;
  const double u = (d.x() * r.y() - d.y() * r.x()) / denom;
  if (t < 0.0 || t > 1.0 || u < 0.0 || u > 1.0) return std::nullopt;
  return t;
}

inline bool crosses_any(const Vec2& p, const Vec2& q, const std::vector<Segment>& walls) {
  for (const auto& w : walls)
    if (crossing(p, q, w)) return true;
  return false;
}

struct StepResult {
  Eigen::VectorXd next_state;
  double reward = 0.0;
  bool terminal = false;
  bool success = false;
};

struct TaskSpec {
  TaskKind kind = TaskKind::Reach;
  Vec2 agent_start{0.0, -0.7};
  Vec2 object_start{0.0, -0.7};
  Vec2 goal_lo{-0.6, -0.2};
  Vec2 goal_hi{0.6, 0.6};
  std::vector<Segment> walls;
  int horizon = 100;
  double success_radius = 0.12;
  double contact_radius = 0.1;
  double place_speed = 0.0;  // > 0: success also needs agent speed below this
  double drag = 0.3;         // v' = drag v + accel a
  double accel = 0.07;
  double success_bonus = 5.0;

  bool has_object() const { return kind != TaskKind::Reach; }

  static TaskSpec make(TaskKind kind) {
    TaskSpec t;
    t.kind = kind;
    switch (kind) {
      case TaskKind::Reach:
        t.object_start = t.agent_start;
        break;
      case TaskKind::PushAnalog:
        t.object_start = {0.0, -0.35};
        t.goal_lo = {-0.5, 0.1};
        t.goal_hi = {0.5, 0.6};
        break;
      case TaskKind::PushWallAnalog:
        t.object_start = {0.0, -0.35};
        t.goal_lo = {-0.5, 0.1};
        t.goal_hi = {0.5, 0.6};
        t.walls = {{{-0.2, 0.0}, {0.2, 0.0}}};
        break;
      case TaskKind::PushBackAnalog:
        t.object_start = {0.0, -0.35};
        t.goal_lo = {-0.8, -0.95};
        t.goal_hi = {0.8, -0.8};
        break;
      case TaskKind::PickAnalog:
        t.object_start = {0.0, -0.35};
        t.goal_lo = {-0.5, 0.1};
        t.goal_hi = {0.5, 0.6};
        t.place_speed = 0.03;
        break;
    }
    return t;
  }
};

/// One episode's worth of mutable state over an immutable TaskSpec.
class PointMassTask {
 public:
  static constexpr Eigen::Index kStateDim = 8;
  static constexpr Eigen::Index kActionDim = 2;

  PointMassTask() : PointMassTask(TaskKind::Reach) {}
  explicit PointMassTask(TaskKind kind) : spec_(TaskSpec::make(kind)) {}
  explicit PointMassTask(TaskSpec spec) : spec_(std::move(spec)) {}

  const TaskSpec& spec() const { return spec_; }
  TaskKind kind() const { return spec_.kind; }
  Eigen::Index state_dim() const { return kStateDim; }
  Eigen::Index action_dim() const { return kActionDim; }
  int horizon() const { return spec_.horizon; }
  const Eigen::VectorXd& state() const { return state_; }

  /// Agent at the fixed start at rest, object at its kind-specific start,
  /// goal uniform over the goal box.
  Eigen::VectorXd reset(Rng& rng) {
    const Vec2 goal{rng.uniform(spec_.goal_lo.x(), spec_.goal_hi.x()),
                    rng.uniform(spec_.goal_lo.y(), spec_.goal_hi.y())};
    state_ = make_state(spec_.agent_start, Vec2::Zero(), spec_.object_start, goal);
    return state_;
  }

  StepResult step(const Eigen::VectorXd& action) {
    auto r = transition(spec_, state_, action);
    state_ = r.next_state;
    return r;
  }

  static Eigen::VectorXd make_state(const Vec2& pos, const Vec2& vel, const Vec2& obj, const Vec2& goal) {
    Eigen::VectorXd s(kStateDim);
    s << pos, vel, obj, goal;
    return s;
  }

  /// Deterministic dynamics: drag-damped velocity integration, walls stop
  /// motion at the crossing (remaining motion slides along the wall), arena
  /// clipping, sticky object contact.
  static StepResult transition(const TaskSpec& spec, const Eigen::VectorXd& state, const Eigen::VectorXd& action) {
    if (state.size() != kStateDim || action.size() != kActionDim) throw ShapeError("PointMassTask: bad dimensions");
    const Vec2 pos = state.segment<2>(0);
    Vec2 vel = state.segment<2>(2);
    Vec2 obj = state.segment<2>(4);
    const Vec2 goal = state.segment<2>(6);
    const Vec2 a = action.cwiseMax(-1.0).cwiseMin(1.0);

    vel = spec.drag * vel + spec.accel * a;
    Vec2 next = move(spec.walls, pos, pos + vel);
    for (int i = 0; i < 2; ++i)
      if (next(i) < -1.0 || next(i) > 1.0) next(i) = std::clamp(next(i), -1.0, 1.0);
    vel = next - pos;

    if (spec.has_object() && (pos - obj).norm() <= spec.contact_radius) {
      Vec2 moved = move(spec.walls, obj, obj + (next - pos));
      obj = moved.cwiseMax(-1.0).cwiseMin(1.0);
    }

    const Vec2 tracked = spec.has_object() ? obj : next;
    const double goal_dist = (tracked - goal).norm();
    bool success = goal_dist <= spec.success_radius;
    if (spec.place_speed > 0.0) success = success && vel.norm() <= spec.place_speed;

    StepResult r;
    r.next_state = make_state(next, vel, obj, goal);
    r.reward = -goal_dist;
    if (spec.has_object()) r.reward -= (next - obj).norm();
    if (success) r.reward += spec.success_bonus;
    r.success = success;
    r.terminal = success;
    return r;
  }

 private:
  static constexpr double kWallGap = 1e-6;

  static Vec2 move(const std::vector<Segment>& walls, const Vec2& from, const Vec2& to) {
    double t_hit = 2.0;
    const Segment* hit = nullptr;
    for (const auto& w : walls)
      if (auto t = crossing(from, to, w); t && *t < t_hit) {
        t_hit = *t;
        hit = &w;
      }
    if (!hit) return to;
    const Vec2 delta = to - from;
    const double len = delta.norm();
    const double back = len > 0.0 ? std::min(t_hit, kWallGap / len) : 0.0;
    Vec2 stop = from + (t_hit - back) * delta;
    if (crosses_any(from, stop, walls)) return from;
    // slide along the wall with the tangential part of the remaining motion
    const Vec2 dir = (hit->b - hit->a).normalized();
    const Vec2 slide = stop + dir * dir.dot((1.0 - t_hit) * delta);
    if (!crosses_any(stop, slide, walls)) return slide;
    return stop;
  }

  TaskSpec spec_;
  Eigen::VectorXd state_ = Eigen::VectorXd::Zero(kStateDim);
};

/// Reach -> Push -> PushWall -> PushBack -> Pick.
inline std::vector<PointMassTask> make_task_suite() {
  return {PointMassTask(TaskKind::Reach), PointMassTask(TaskKind::PushAnalog), PointMassTask(TaskKind::PushWallAnalog),
          PointMassTask(TaskKind::PushBackAnalog), PointMassTask(TaskKind::PickAnalog)};
}

/// Proportional-derivative controller toward the goal (Reach) or toward the
/// object and then the goal (object kinds). Solvability check only.
inline Eigen::VectorXd scripted_action(const TaskSpec& spec, const Eigen::VectorXd& state) {
  const Vec2 pos = state.segment<2>(0);
  const Vec2 vel = state.segment<2>(2);
  const Vec2 obj = state.segment<2>(4);
  const Vec2 goal = state.segment<2>(6);
  Vec2 aim = goal;
  if (spec.has_object()) aim = (pos - obj).norm() > 0.5 * spec.contact_radius ? obj : goal;
  Vec2 a = 25.0 * (aim - pos) - 10.0 * vel;
  return a.cwiseMax(-1.0).cwiseMin(1.0);
}

struct TrajectoryRow {
  int step = 0;
  Eigen::VectorXd state;
  Eigen::VectorXd action;
  double reward = 0.0;
  bool success = false;
};

inline void write_trajectory_csv(std::ostream& os, const std::vector<TrajectoryRow>& rows) {
  os << "step,ax,ay,vx,vy,ox,oy,gx,gy,act_x,act_y,reward,success\n";
  os.precision(10);
  for (const auto& r : rows) {
    os << r.step;
    for (Eigen::Index i = 0; i < r.state.size(); ++i) os << ',' << r.state(i);
    for (Eigen::Index i = 0; i < r.action.size(); ++i) os << ',' << r.action(i);
    os << ',' << r.reward << ',' << (r.success ? 1 : 0) << '\n';
  }
}

}  // namespace iob
