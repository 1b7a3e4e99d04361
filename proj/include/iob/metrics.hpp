#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "iob/errors.hpp"

namespace iob {

/// Evaluation success rate sampled at increasing environment steps.
struct LearningCurve {
  std::vector<long> steps;
  std::vector<double> success;

  std::size_t size() const { return steps.size(); }
  void add(long step, double s) {
    steps.push_back(step);
    success.push_back(s);
  }
  double final_success() const { return success.empty() ? 0.0 : success.back(); }
};

/// Trapezoidal area under the curve with the step axis rescaled to [0, 1].
inline double area_under_curve(const LearningCurve& c) {
  if (c.size() < 2) throw DomainError("area_under_curve: need at least two points");
  const double span = static_cast<double>(c.steps.back() - c.steps.front());
  if (!(span > 0.0)) throw DomainError("area_under_curve: steps must increase");
  double auc = 0.0;
  for (std::size_t i = 1; i < c.size(); ++i)
    auc += 0.5 * (c.success[i] + c.success[i - 1]) * static_cast<double>(c.steps[i] - c.steps[i - 1]) / span;
  return auc;
}

/// (AUC_transfer - AUC_ref) / (1 - AUC_ref). Empty when the reference
/// already has area 1.
inline std::optional<double> compute_forward_transfer(const LearningCurve& transfer, const LearningCurve& reference) {
  if (transfer.steps != reference.steps) throw DomainError("compute_forward_transfer: mismatched step grids");
  const double auc_ref = area_under_curve(reference);
  if (auc_ref >= 1.0) return std::nullopt;
  return (area_under_curve(transfer) - auc_ref) / (1.0 - auc_ref);
}

struct Forgetting {
  std::vector<double> per_task;
  double average = 0.0;
};

/// eval(i, j): success on task i after task j finished; the last column is
/// the end of training. Forgetting_i = eval(i, i) - eval(i, last).
inline Forgetting compute_forgetting(const Eigen::MatrixXd& eval) {
  if (eval.rows() == 0 || eval.cols() < eval.rows())
    throw DomainError("compute_forgetting: need a column per task boundary");
  Forgetting f;
  for (Eigen::Index i = 0; i < eval.rows(); ++i) f.per_task.push_back(eval(i, i) - eval(i, eval.cols() - 1));
  double sum = 0.0;
  for (double v : f.per_task) sum += v;
  f.average = sum / static_cast<double>(f.per_task.size());
  return f;
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // spread over the n values, divisor n
  std::size_t n = 0;
};

inline MeanStd mean_std(const std::vector<double>& xs) {
  MeanStd m;
  m.n = xs.size();
  if (xs.empty()) return m;
  for (double x : xs) m.mean += x;
  m.mean /= static_cast<double>(xs.size());
  double ss = 0.0;
  for (double x : xs) ss += (x - m.mean) * (x - m.mean);
  m.std = std::sqrt(ss / static_cast<double>(xs.size()));
  return m;
}

}  // namespace iob
