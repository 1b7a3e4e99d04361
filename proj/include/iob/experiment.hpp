#pragma once

// Experiment orchestration: flat key=value configs, per-seed runs that write
// metrics.csv / summary.txt / checkpoints, theorem certification sweeps, and
// aggregation of per-seed summaries into mean +- std tables.

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <istream>
#include <map>
#include <mutex>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "iob/continual.hpp"
#include "iob/envs.hpp"
#include "iob/tabular.hpp"
#include "iob/transfer.hpp"

namespace iob {

namespace fs = std::filesystem;

enum class Mode { TrainSource, Transfer, Continual, CertifyTheorems, Ablation };

inline std::string_view to_string(Mode m) {
  switch (m) {
    case Mode::TrainSource: return "train-source";
    case Mode::Transfer: return "transfer";
    case Mode::Continual: return "continual";
    case Mode::CertifyTheorems: return "certify-theorems";
    case Mode::Ablation: return "ablation";
  }
  return "?";
}

inline Mode parse_mode(std::string_view s) {
  for (auto m : {Mode::TrainSource, Mode::Transfer, Mode::Continual, Mode::CertifyTheorems, Mode::Ablation})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown mode '" + std::string(s) + "'");
}

enum class Ablation { ExtraSources, RandomSources, EpsilonSweep };

inline std::string_view to_string(Ablation a) {
  switch (a) {
    case Ablation::ExtraSources: return "extra-sources";
    case Ablation::RandomSources: return "random-sources";
    case Ablation::EpsilonSweep: return "epsilon-sweep";
  }
  return "?";
}

inline Ablation parse_ablation(std::string_view s) {
  for (auto a : {Ablation::ExtraSources, Ablation::RandomSources, Ablation::EpsilonSweep})
    if (to_string(a) == s) return a;
  throw ConfigError("unknown ablation '" + std::string(s) + "'");
}

struct ExperimentConfig {
  Mode mode = Mode::Transfer;
  std::vector<TaskKind> tasks{TaskKind::Reach};
  std::vector<std::string> sources;  // checkpoint paths
  IobHyper hyper;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  long budget = 20'000;
  long eval_every = 0;  // 0: budget / 50
  int eval_episodes = 10;
  std::string out = "runs";
  int jobs = 1;

  ContinualMethod method = ContinualMethod::PackNetIob;
  double retrain_fraction = 0.1;

  Ablation ablation = Ablation::EpsilonSweep;
  std::vector<double> epsilons{0.0, 0.1, 0.2, 0.5, 1.0};
  int random_sources = 3;

  int instances = 100;  // certify-theorems

  void validate() const {
    if (seeds.empty()) throw ConfigError("config: seeds must be non-empty");
    auto sorted = seeds;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
      throw ConfigError("config: seeds must be distinct");
    if (budget <= 0) throw ConfigError("config: budget must be > 0");
    if (tasks.empty()) throw ConfigError("config: no task given");
    if (jobs < 1) throw ConfigError("config: jobs must be >= 1");
    if (instances < 1) throw ConfigError("config: instances must be >= 1");
    hyper.validate();
  }

  TrainOptions train_options() const {
    TrainOptions o;
    o.budget = budget;
    o.eval_every = eval_every;
    o.eval_episodes = eval_episodes;
    return o;
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto pos = s.find(sep, start);
    const auto piece = trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (!piece.empty()) out.push_back(piece);
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T x{};
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, x);
  if (ec != std::errc() || ptr != end) throw ConfigError("config: bad value '" + v + "' for " + key);
  return x;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "no") return false;
  throw ConfigError("config: bad boolean '" + v + "' for " + key);
}

}  // namespace detail

/// Applies one key=value setting; unknown keys are an error.
inline void apply_setting(ExperimentConfig& c, const std::string& key, const std::string& value) {
  using detail::parse_number;
  auto& h = c.hyper;
  if (key == "mode") c.mode = parse_mode(value);
  else if (key == "task" || key == "tasks") {
    c.tasks.clear();
    for (const auto& t : detail::split(value, ',')) c.tasks.push_back(parse_task_kind(t));
  } else if (key == "sources") c.sources = detail::split(value, ',');
  else if (key == "seeds") {
    c.seeds.clear();
    for (const auto& s : detail::split(value, ',')) c.seeds.push_back(parse_number<std::uint64_t>(key, s));
  } else if (key == "steps") c.budget = parse_number<long>(key, value);
  else if (key == "eval_every") c.eval_every = parse_number<long>(key, value);
  else if (key == "eval_episodes") c.eval_episodes = parse_number<int>(key, value);
  else if (key == "out") c.out = value;
  else if (key == "jobs") c.jobs = parse_number<int>(key, value);
  else if (key == "beta") h.beta = parse_number<double>(key, value);
  else if (key == "epsilon") h.epsilon = parse_number<double>(key, value);
  else if (key == "samples") h.advantage_samples = parse_number<std::size_t>(key, value);
  else if (key == "warmup") h.warmup_steps = parse_number<long>(key, value);
  else if (key == "warmup_fraction") h.warmup_fraction = parse_number<double>(key, value);
  else if (key == "kl") {
    if (value == "mc") h.kl = KlEstimator::MonteCarlo;
    else if (value == "closed") h.kl = KlEstimator::ClosedForm;
    else throw ConfigError("config: kl must be mc or closed");
  } else if (key == "cache") h.cache_source_outputs = detail::parse_bool(key, value);
  else if (key == "ensemble") h.sac.ensemble = parse_number<std::size_t>(key, value);
  else if (key == "batch") h.sac.batch_size = parse_number<std::size_t>(key, value);
  else if (key == "buffer") h.sac.buffer_capacity = parse_number<std::size_t>(key, value);
  else if (key == "hidden") {
    h.sac.hidden.clear();
    for (const auto& d : detail::split(value, 'x')) h.sac.hidden.push_back(parse_number<Eigen::Index>(key, d));
  } else if (key == "gamma") h.sac.gamma = parse_number<double>(key, value);
  else if (key == "lr") h.sac.policy_lr = h.sac.critic_lr = h.sac.alpha_lr = parse_number<double>(key, value);
  else if (key == "tau") h.sac.tau = parse_number<double>(key, value);
  else if (key == "init_alpha") h.sac.init_alpha = parse_number<double>(key, value);
  else if (key == "target_entropy") h.sac.target_entropy = parse_number<double>(key, value);
  else if (key == "start_steps") h.sac.start_steps = parse_number<long>(key, value);
  else if (key == "update_after") h.sac.update_after = parse_number<long>(key, value);
  else if (key == "actor_critic") {
    if (value == "min") h.sac.actor_critic = ActorCritic::MinOverEnsemble;
    else if (value == "first") h.sac.actor_critic = ActorCritic::FirstMember;
    else throw ConfigError("config: actor_critic must be min or first");
  } else if (key == "method") c.method = parse_continual_method(value);
  else if (key == "retrain_fraction") c.retrain_fraction = parse_number<double>(key, value);
  else if (key == "ablation") c.ablation = parse_ablation(value);
  else if (key == "epsilons") {
    c.epsilons.clear();
    for (const auto& e : detail::split(value, ',')) c.epsilons.push_back(parse_number<double>(key, e));
  } else if (key == "random_sources") c.random_sources = parse_number<int>(key, value);
  else if (key == "instances") c.instances = parse_number<int>(key, value);
  else throw ConfigError("config: unknown key '" + key + "'");
}

/// Flat "key = value" lines; '#' starts a comment.
inline void read_config(std::istream& is, ExperimentConfig& c) {
  std::string line;
  int n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto t = detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(n) + ": expected key = value");
    apply_setting(c, detail::trim(std::string_view(t).substr(0, eq)), detail::trim(std::string_view(t).substr(eq + 1)));
  }
}

inline void write_config(std::ostream& os, const ExperimentConfig& c) {
  os << std::setprecision(17);
  os << "mode = " << to_string(c.mode) << '\n';
  os << "tasks = ";
  for (std::size_t i = 0; i < c.tasks.size(); ++i) os << (i ? "," : "") << to_string(c.tasks[i]);
  os << "\nseeds = ";
  for (std::size_t i = 0; i < c.seeds.size(); ++i) os << (i ? "," : "") << c.seeds[i];
  os << "\nsources = ";
  for (std::size_t i = 0; i < c.sources.size(); ++i) os << (i ? "," : "") << c.sources[i];
  os << "\nsteps = " << c.budget << "\nbeta = " << c.hyper.beta << "\nepsilon = " << c.hyper.epsilon
     << "\nsamples = " << c.hyper.advantage_samples << "\nensemble = " << c.hyper.sac.ensemble
     << "\nbatch = " << c.hyper.sac.batch_size << '\n';
}

// ---------------------------------------------------------------------------
// Checkpoints

inline void save_policy(const fs::path& path, const GaussianPolicy& p) {
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot write checkpoint " + path.string());
  save_net(f, p.trunk);
}

inline GaussianPolicy load_policy(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("missing checkpoint " + path.string());
  GaussianPolicy p;
  p.trunk = load_net(f);
  if (p.trunk.output_dim() % 2 != 0) throw ShapeError("checkpoint " + path.string() + ": odd output width");
  p.action_dim = p.trunk.output_dim() / 2;
  return p;
}

/// Randomly initialized policy whose output layer is not zeroed, so its
/// actions carry no task knowledge but are not uniform either.
inline GaussianPolicy random_source_policy(Eigen::Index state_dim, Eigen::Index action_dim,
                                           const std::vector<Eigen::Index>& hidden, Rng& rng) {
  std::vector<Eigen::Index> dims{state_dim};
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(2 * action_dim);
  return {DenseNet::make(dims, rng, /*zero_output_layer=*/false), action_dim};
}

// ---------------------------------------------------------------------------
// Per-seed outputs

inline void write_metrics_csv(std::ostream& os, const TrainResult& r) {
  const std::size_t width = r.selection.empty() ? 0 : r.selection.front().size();
  os << "step,success";
  for (std::size_t c = 0; c < width; ++c) os << ",sel_" << c;
  os << '\n' << std::setprecision(10);
  for (std::size_t i = 0; i < r.curve.size(); ++i) {
    os << r.curve.steps[i] << ',' << r.curve.success[i];
    for (std::size_t c = 0; c < width; ++c) os << ',' << (i < r.selection.size() ? r.selection[i][c] : 0.0);
    os << '\n';
  }
}

inline void write_curve_csv(std::ostream& os, const LearningCurve& c) {
  os << "step,success\n" << std::setprecision(10);
  for (std::size_t i = 0; i < c.size(); ++i) os << c.steps[i] << ',' << c.success[i] << '\n';
}

inline LearningCurve read_curve_csv(std::istream& is) {
  LearningCurve c;
  std::string line;
  if (!std::getline(is, line)) throw ConfigError("metrics: empty file");
  while (std::getline(is, line)) {
    const auto f = detail::split(line, ',');
    if (f.size() < 2) throw ConfigError("metrics: malformed row '" + line + "'");
    c.add(detail::parse_number<long>("step", f[0]), detail::parse_number<double>("success", f[1]));
  }
  return c;
}

/// Summary records are "key value" lines.
using Summary = std::map<std::string, std::string>;

inline void write_summary(const fs::path& path, const Summary& s) {
  std::ofstream f(path);
  for (const auto& [k, v] : s) f << k << ' ' << v << '\n';
}

inline Summary read_summary(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("missing summary " + path.string());
  Summary s;
  std::string line;
  while (std::getline(f, line)) {
    const auto sp = line.find(' ');
    if (sp == std::string::npos) continue;
    s[line.substr(0, sp)] = line.substr(sp + 1);
  }
  return s;
}

inline std::string fmt(double x) {
  std::ostringstream os;
  os << std::setprecision(10) << x;
  return os.str();
}

inline std::string fmt(const std::optional<double>& x) { return x ? fmt(*x) : std::string("missing"); }

/// IOB run and its paired plain-SAC reference on the same seed.
struct TransferSeedResult {
  TrainResult iob;
  TrainResult reference;
  std::optional<double> ft;
};

inline TransferSeedResult transfer_seed(const PointMassTask& task, std::span<const GaussianPolicy> sources,
                                        const IobHyper& h, std::uint64_t seed, const TrainOptions& opt) {
  TransferSeedResult r;
  r.iob = iob_train(task, sources, h, seed, opt);
  r.reference = sac_train(task, h.sac, seed, opt);
  if (!r.iob.failed && !r.reference.failed) r.ft = compute_forward_transfer(r.iob.curve, r.reference.curve);
  return r;
}

// ---------------------------------------------------------------------------
// Bound certification sweep

struct CertificationSummary {
  std::size_t reports = 0;
  std::size_t violations = 0;
  double worst_margin_1 = std::numeric_limits<double>::infinity();
  double worst_margin_2 = std::numeric_limits<double>::infinity();
};

/// Random instances with |S| in [2, 6], |A| in [2, 4], gamma in {0.9, 0.99}.
/// check_theorem1: mu in {0, 0.01, 0.1, 1}, adversarial and random noise.
/// check_theorem2: next target = (1 - lambda) target + lambda guidance,
/// lambda in {0.01, 0.1}, mu in {0, 0.1}.
inline CertificationSummary certify_theorems(int instances, std::uint64_t seed, std::ostream* report = nullptr,
                                             bool theorem1 = true, bool theorem2 = true, double alpha = 0.1) {
  using namespace tabular;
  CertificationSummary out;
  Rng master(seed);
  for (int i = 0; i < instances; ++i) {
    Rng rng = master.substream("instance", static_cast<std::uint64_t>(i));
    const auto ns = static_cast<std::size_t>(2 + rng.index(5));
    const auto na = static_cast<std::size_t>(2 + rng.index(3));
    const double gamma = i % 2 == 0 ? 0.9 : 0.99;
    const auto mdp = make_random_mdp(rng.substream("mdp").seed(), ns, na, gamma);
    const auto target = make_random_policy(rng, ns, na);
    std::vector<TabularPolicy> sources;
    const auto n_sources = 1 + rng.index(3);
    for (std::size_t k = 0; k < n_sources; ++k) sources.push_back(make_random_policy(rng, ns, na));
    const std::string label = std::to_string(i);

    auto record = [&](const TheoremBoundReport& r, double& worst) {
      ++out.reports;
      out.violations += r.violations();
      worst = std::min(worst, r.worst_margin());
      if (report) write_report(*report, r, label);
    };
    if (theorem1)
      for (double mu : {0.0, 0.01, 0.1, 1.0})
        for (auto kind : {PerturbationKind::Adversarial, PerturbationKind::Random})
          record(check_theorem1(mdp, target, sources, mu, alpha, {kind, rng.substream("noise").seed()}).report,
                 out.worst_margin_1);
    if (theorem2)
      for (double mu : {0.0, 0.1})
        for (double lambda : {0.01, 0.1}) {
          const auto g = check_theorem1(mdp, target, sources, mu, alpha,
                                        {PerturbationKind::Adversarial, 0}).guidance;
          TabularPolicy next{(1.0 - lambda) * target.prob.array() + lambda * g.prob.array()};
          record(check_theorem2(mdp, target, g, next, mu, alpha), out.worst_margin_2);
        }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Runner

struct RunOutcome {
  std::size_t seeds_run = 0;
  std::size_t seeds_failed = 0;
  std::size_t violations = 0;
  std::vector<fs::path> cells;  // directories holding seed_* subdirectories

  bool ok() const { return seeds_failed == 0 && violations == 0; }
};

namespace detail {

/// Runs fn(i) for i in [0, n) on up to `jobs` threads.
template <class Fn>
void parallel_for(std::size_t n, int jobs, Fn fn) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::jthread> pool;
  for (int j = 0; j < jobs && static_cast<std::size_t>(j) < n; ++j)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
}

inline fs::path seed_dir(const fs::path& cell, std::uint64_t seed) {
  return cell / ("seed_" + std::to_string(seed));
}

}  // namespace detail

struct TransferCell {
  std::string label;
  std::vector<GaussianPolicy> sources;
  IobHyper hyper;
};

inline void run_transfer_cells(const ExperimentConfig& c, const PointMassTask& task,
                               const std::vector<TransferCell>& cells, RunOutcome& out) {
  struct Job {
    std::size_t cell;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (std::size_t k = 0; k < cells.size(); ++k)
    for (auto s : c.seeds) jobs.push_back({k, s});
  std::mutex mu;
  detail::parallel_for(jobs.size(), c.jobs, [&](std::size_t j) {
    const auto& cell = cells[jobs[j].cell];
    const auto dir = detail::seed_dir(fs::path(c.out) / cell.label, jobs[j].seed);
    fs::create_directories(dir);
    const auto r = transfer_seed(task, cell.sources, cell.hyper, jobs[j].seed, c.train_options());
    {
      std::ofstream f(dir / "metrics.csv");
      write_metrics_csv(f, r.iob);
      std::ofstream g(dir / "reference.csv");
      write_curve_csv(g, r.reference.curve);
    }
    save_policy(dir / "policy.txt", r.iob.state.agent.policy);
    const bool failed = r.iob.failed || r.reference.failed;
    Summary s{{"status", failed ? "failed" : "ok"},
              {"task", std::string(to_string(task.kind()))},
              {"seed", std::to_string(jobs[j].seed)},
              {"sources", std::to_string(cell.sources.size())},
              {"epsilon", fmt(cell.hyper.epsilon)},
              {"beta", fmt(cell.hyper.beta)},
              {"final_success", fmt(r.iob.curve.final_success())},
              {"reference_final_success", fmt(r.reference.curve.final_success())},
              {"ft", fmt(r.ft)}};
    if (!r.iob.curve.success.empty() && r.iob.curve.size() > 1) s["auc"] = fmt(area_under_curve(r.iob.curve));
    if (failed) s["failure"] = r.iob.failed ? r.iob.failure : r.reference.failure;
    write_summary(dir / "summary.txt", s);
    std::lock_guard lock(mu);
    ++out.seeds_run;
    if (failed) ++out.seeds_failed;
  });
  for (const auto& cell : cells) out.cells.push_back(fs::path(c.out) / cell.label);
}

/// Executes the configured mode. Missing checkpoints are reported before
/// any run starts; a seed that hits a non-finite loss is marked failed and
/// the remaining seeds still run.
inline RunOutcome run_experiment(const ExperimentConfig& c) {
  c.validate();
  std::vector<GaussianPolicy> sources;
  for (const auto& p : c.sources) sources.push_back(load_policy(p));
  fs::create_directories(c.out);
  {
    std::ofstream f(fs::path(c.out) / "config.txt");
    write_config(f, c);
  }
  RunOutcome out;
  const PointMassTask task(c.tasks.front());
  for (const auto& s : sources) check_env_dims(task, s);

  switch (c.mode) {
    case Mode::TrainSource: {
      std::mutex mu;
      std::vector<std::pair<TaskKind, std::uint64_t>> jobs;
      for (auto k : c.tasks)
        for (auto s : c.seeds) jobs.emplace_back(k, s);
      detail::parallel_for(jobs.size(), c.jobs, [&](std::size_t j) {
        const PointMassTask env(jobs[j].first);
        const auto dir = detail::seed_dir(fs::path(c.out) / std::string(to_string(jobs[j].first)), jobs[j].second);
        fs::create_directories(dir);
        const auto r = sac_train(env, c.hyper.sac, jobs[j].second, c.train_options());
        {
          std::ofstream f(dir / "metrics.csv");
          write_metrics_csv(f, r);
        }
        save_policy(dir / "policy.txt", r.state.agent.policy);
        Summary s{{"status", r.failed ? "failed" : "ok"},
                  {"task", std::string(to_string(jobs[j].first))},
                  {"seed", std::to_string(jobs[j].second)},
                  {"final_success", fmt(r.curve.final_success())},
                  {"auc", fmt(area_under_curve(r.curve))}};
        if (r.failed) s["failure"] = r.failure;
        write_summary(dir / "summary.txt", s);
        std::lock_guard lock(mu);
        ++out.seeds_run;
        if (r.failed) ++out.seeds_failed;
      });
      for (auto k : c.tasks) out.cells.push_back(fs::path(c.out) / std::string(to_string(k)));
      break;
    }
    case Mode::Transfer:
      run_transfer_cells(c, task, {{std::string(to_string(task.kind())), sources, c.hyper}}, out);
      break;
    case Mode::Ablation: {
      std::vector<TransferCell> cells;
      auto randoms = [&](int count) {
        std::vector<GaussianPolicy> r;
        Rng rng = Rng(0).substream("random-sources");
        for (int i = 0; i < count; ++i)
          r.push_back(random_source_policy(task.state_dim(), task.action_dim(), c.hyper.sac.hidden, rng));
        return r;
      };
      switch (c.ablation) {
        case Ablation::EpsilonSweep:
          for (double e : c.epsilons) {
            IobHyper h = c.hyper;
            h.epsilon = e;
            cells.push_back({"epsilon_" + fmt(e), sources, h});
          }
          break;
        case Ablation::RandomSources:
          cells.push_back({"random_" + std::to_string(c.random_sources), randoms(c.random_sources), c.hyper});
          break;
        case Ablation::ExtraSources: {
          cells.push_back({"given", sources, c.hyper});
          auto extra = sources;
          for (auto& p : randoms(c.random_sources)) extra.push_back(std::move(p));
          cells.push_back({"given_plus_" + std::to_string(c.random_sources), extra, c.hyper});
          break;
        }
      }
      run_transfer_cells(c, task, cells, out);
      break;
    }
    case Mode::Continual: {
      std::vector<PointMassTask> seq;
      for (auto k : c.tasks) seq.emplace_back(k);
      ContinualHyper ch;
      ch.iob = c.hyper;
      ch.method = c.method;
      ch.task_budget = c.budget;
      ch.retrain_fraction = c.retrain_fraction;
      ch.eval_every = c.eval_every;
      ch.eval_episodes = c.eval_episodes;
      const fs::path cell = fs::path(c.out) / std::string(to_string(c.method));
      std::mutex mu;
      detail::parallel_for(c.seeds.size(), c.jobs, [&](std::size_t j) {
        const auto seed = c.seeds[j];
        const auto dir = detail::seed_dir(cell, seed);
        fs::create_directories(dir);
        const auto ref = reference_curves(seq, ch, seed);
        const auto rep = continual_run(seq, ch, seed, &ref);
        {
          std::ofstream f(dir / "eval_matrix.csv");
          rep.write_csv(f);
          std::ofstream g(dir / "report.txt");
          rep.write_summary(g);
        }
        for (std::size_t t = 0; t < rep.curves.size(); ++t) {
          std::ofstream f(dir / ("metrics_task" + std::to_string(t + 1) + ".csv"));
          write_curve_csv(f, rep.curves[t]);
        }
        {
          std::ofstream f(dir / "metrics.csv");
          write_curve_csv(f, rep.curves.back());
        }
        Summary s{{"status", "ok"},
                  {"seed", std::to_string(seed)},
                  {"method", std::string(to_string(c.method))},
                  {"success", fmt(rep.success)},
                  {"forgetting", fmt(rep.forgetting.average)},
                  {"transfer", fmt(rep.average_transfer)},
                  {"ft", fmt(rep.average_transfer)},
                  {"frozen_audit", rep.frozen_audit ? "pass" : "fail"}};
        bool failed = false;
        for (const auto& w : rep.warnings)
          if (w.find("non-finite") != std::string::npos) failed = true;
        if (failed) s["status"] = "failed";
        write_summary(dir / "summary.txt", s);
        std::lock_guard lock(mu);
        ++out.seeds_run;
        if (failed) ++out.seeds_failed;
      });
      out.cells.push_back(cell);
      break;
    }
    case Mode::CertifyTheorems: {
      std::ofstream f(fs::path(c.out) / "theorem_report.txt");
      const auto s = certify_theorems(c.instances, c.seeds.front(), &f);
      out.violations = s.violations;
      write_summary(fs::path(c.out) / "summary.txt", {{"reports", std::to_string(s.reports)},
                                                     {"violations", std::to_string(s.violations)},
                                                     {"worst_margin_theorem1", fmt(s.worst_margin_1)},
                                                     {"worst_margin_theorem2", fmt(s.worst_margin_2)},
                                                     {"status", s.violations == 0 ? "ok" : "violations"}});
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Aggregation

struct AggregateRow {
  std::string cell;
  MeanStd ft;
  std::optional<MeanStd> success;  // continual cells
  std::optional<MeanStd> forgetting;
};

struct AggregateTable {
  std::vector<AggregateRow> rows;
  MeanStd average;  // mean and std of the per-cell FT means

  void write_csv(std::ostream& os) const {
    os << "cell,ft_mean,ft_std,seeds,success_mean,success_std,forgetting_mean,forgetting_std\n"
       << std::setprecision(10);
    auto opt = [&](const std::optional<MeanStd>& m) {
      if (m) os << ',' << m->mean << ',' << m->std;
      else os << ",,";
    };
    for (const auto& r : rows) {
      os << r.cell << ',' << r.ft.mean << ',' << r.ft.std << ',' << r.ft.n;
      opt(r.success);
      opt(r.forgetting);
      os << '\n';
    }
    os << "avg," << average.mean << ',' << average.std << ',' << average.n << ",,,,\n";
  }

  void write_text(std::ostream& os) const {
    std::size_t w = 4;
    for (const auto& r : rows) w = std::max(w, r.cell.size());
    auto pm = [](const MeanStd& m) {
      std::ostringstream s;
      s << std::fixed << std::setprecision(2) << m.mean << " +- " << m.std;
      return s.str();
    };
    os << std::left << std::setw(static_cast<int>(w)) << "cell" << "  " << std::setw(14) << "FT";
    const bool cont = std::any_of(rows.begin(), rows.end(), [](const auto& r) { return r.success.has_value(); });
    if (cont) os << "  " << std::setw(14) << "Success" << "  " << "Forgetting";
    os << '\n';
    for (const auto& r : rows) {
      os << std::setw(static_cast<int>(w)) << r.cell << "  " << std::setw(14) << pm(r.ft);
      if (cont && r.success) os << "  " << std::setw(14) << pm(*r.success) << "  " << pm(*r.forgetting);
      os << '\n';
    }
    os << std::setw(static_cast<int>(w)) << "avg" << "  " << pm(average) << '\n';
  }
};

inline std::vector<fs::path> seed_dirs(const fs::path& cell) {
  std::vector<fs::path> out;
  if (!fs::is_directory(cell)) return out;
  for (const auto& e : fs::directory_iterator(cell))
    if (e.is_directory() && e.path().filename().string().rfind("seed_", 0) == 0) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

/// Expands each path to the cells below it: a path with seed_* children is a
/// cell; otherwise its immediate subdirectories are tried.
inline std::vector<fs::path> find_cells(const std::vector<fs::path>& paths) {
  std::vector<fs::path> cells;
  for (const auto& p : paths) {
    if (!seed_dirs(p).empty()) {
      cells.push_back(p);
      continue;
    }
    if (!fs::is_directory(p)) throw ConfigError("aggregate: not a directory: " + p.string());
    std::vector<fs::path> sub;
    for (const auto& e : fs::directory_iterator(p))
      if (e.is_directory() && !seed_dirs(e.path()).empty()) sub.push_back(e.path());
    std::sort(sub.begin(), sub.end());
    if (sub.empty()) throw ConfigError("aggregate: no seed directories under " + p.string());
    cells.insert(cells.end(), sub.begin(), sub.end());
  }
  return cells;
}

inline AggregateTable aggregate(const std::vector<fs::path>& paths) {
  AggregateTable table;
  std::vector<double> cell_means;
  for (const auto& cell : find_cells(paths)) {
    const auto dirs = seed_dirs(cell);
    if (dirs.size() < 2) throw ConfigError("aggregate: need at least two seeds in " + cell.string());
    AggregateRow row;
    row.cell = cell.filename().string();
    std::vector<double> ft, success, forgetting;
    std::optional<std::vector<long>> grid;
    for (const auto& d : dirs) {
      std::ifstream m(d / "metrics.csv");
      if (m) {
        const auto steps = read_curve_csv(m).steps;
        if (grid && *grid != steps) throw ConfigError("aggregate: mismatched evaluation grids in " + cell.string());
        grid = steps;
      }
      const auto s = read_summary(d / "summary.txt");
      if (s.count("status") && s.at("status") != "ok") continue;
      if (auto it = s.find("ft"); it != s.end() && it->second != "missing")
        ft.push_back(detail::parse_number<double>("ft", it->second));
      if (auto it = s.find("forgetting"); it != s.end()) {
        forgetting.push_back(detail::parse_number<double>("forgetting", it->second));
        success.push_back(detail::parse_number<double>("success", s.at("success")));
      }
    }
    row.ft = mean_std(ft);
    if (!forgetting.empty()) {
      row.success = mean_std(success);
      row.forgetting = mean_std(forgetting);
    }
    if (row.ft.n > 0) cell_means.push_back(row.ft.mean);
    table.rows.push_back(std::move(row));
  }
  table.average = mean_std(cell_means);
  return table;
}

}  // namespace iob
