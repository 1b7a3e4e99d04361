// Command-line front end: one subcommand per experiment mode plus aggregate.
// Settings come from an optional key=value config file, then --set overrides,
// then the dedicated flags.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

#include "iob/experiment.hpp"

namespace {

struct CommonFlags {
  std::string config;
  std::vector<std::uint64_t> seeds;
  long steps = 0;
  std::string out;
  std::vector<std::string> sources;
  std::vector<std::string> tasks;
  std::vector<std::string> overrides;
  int jobs = 0;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool with_sources) {
  cmd->add_option("--config", f.config, "key = value config file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", f.seeds, "seed(s); repeat or comma-separate")->delimiter(',');
  cmd->add_option("--steps", f.steps, "environment-step budget per run");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--task", f.tasks, "task id(s) in order")->delimiter(',');
  cmd->add_option("--set", f.overrides, "extra key=value setting, repeatable");
  cmd->add_option("--jobs", f.jobs, "parallel worker threads");
  if (with_sources) cmd->add_option("--sources", f.sources, "source checkpoint(s)")->delimiter(',');
}

iob::ExperimentConfig build_config(iob::Mode mode, const CommonFlags& f) {
  iob::ExperimentConfig c;
  if (!f.config.empty()) {
    std::ifstream in(f.config);
    iob::read_config(in, c);
  }
  for (const auto& kv : f.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw iob::ConfigError("--set expects key=value, got '" + kv + "'");
    iob::apply_setting(c, iob::detail::trim(kv.substr(0, eq)), iob::detail::trim(kv.substr(eq + 1)));
  }
  c.mode = mode;
  if (!f.seeds.empty()) c.seeds = f.seeds;
  if (f.steps > 0) c.budget = f.steps;
  if (!f.out.empty()) c.out = f.out;
  if (!f.sources.empty()) c.sources = f.sources;
  if (f.jobs > 0) c.jobs = f.jobs;
  if (!f.tasks.empty()) {
    c.tasks.clear();
    for (const auto& t : f.tasks) c.tasks.push_back(iob::parse_task_kind(t));
  }
  return c;
}

int run_mode(iob::Mode mode, const CommonFlags& f) {
  const auto c = build_config(mode, f);
  const auto r = iob::run_experiment(c);
  std::cout << iob::to_string(mode) << ": " << r.seeds_run << " run(s), " << r.seeds_failed << " failed";
  if (mode == iob::Mode::CertifyTheorems) std::cout << ", " << r.violations << " bound violation(s)";
  std::cout << "\noutput in " << c.out << '\n';
  if (!r.cells.empty() && mode != iob::Mode::TrainSource && mode != iob::Mode::CertifyTheorems && c.seeds.size() >= 2) {
    std::vector<iob::fs::path> cells(r.cells.begin(), r.cells.end());
    iob::aggregate(cells).write_text(std::cout);
  }
  return r.ok() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Transfer and continual RL experiments on point-mass toy tasks"};
  app.require_subcommand(1);

  struct Sub {
    const char* name;
    const char* help;
    iob::Mode mode;
    bool sources;
    CommonFlags flags;
  };
  std::vector<Sub> subs{
      {"train-source", "train plain SAC policies to use as sources", iob::Mode::TrainSource, false, {}},
      {"transfer", "IOB on one task with the given sources, paired with SAC", iob::Mode::Transfer, true, {}},
      {"continual", "sequential tasks with pruning masks", iob::Mode::Continual, false, {}},
      {"certify-theorems", "check the improvement bounds on random tabular MDPs", iob::Mode::CertifyTheorems, false,
       {}},
      {"ablation", "extra-sources, random-sources or epsilon-sweep preset", iob::Mode::Ablation, true, {}},
  };
  std::vector<CLI::App*> cmds;
  for (auto& s : subs) {
    auto* cmd = app.add_subcommand(s.name, s.help);
    add_common(cmd, s.flags, s.sources);
    cmds.push_back(cmd);
  }

  std::vector<std::string> agg_paths;
  std::string agg_csv;
  auto* agg = app.add_subcommand("aggregate", "mean +- std over seeds for finished runs");
  agg->add_option("paths", agg_paths, "run or cell directories")->required();
  agg->add_option("--csv", agg_csv, "also write the table as CSV here");

  CLI11_PARSE(app, argc, argv);

  try {
    for (std::size_t i = 0; i < subs.size(); ++i)
      if (*cmds[i]) return run_mode(subs[i].mode, subs[i].flags);
    if (*agg) {
      std::vector<iob::fs::path> paths(agg_paths.begin(), agg_paths.end());
      const auto table = iob::aggregate(paths);
      table.write_text(std::cout);
      if (!agg_csv.empty()) {
        std::ofstream f(agg_csv);
        table.write_csv(f);
      }
      return 0;
    }
  } catch (const iob::ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
