#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "iob/experiment.hpp"

using namespace iob;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("iob_test_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

ExperimentConfig tiny(Mode mode, const fs::path& out) {
  ExperimentConfig c;
  c.mode = mode;
  c.out = out.string();
  c.seeds = {0, 1};
  c.budget = 300;
  c.eval_every = 100;
  c.eval_episodes = 2;
  c.hyper.sac.hidden = {16, 16};
  c.hyper.sac.batch_size = 32;
  c.hyper.sac.start_steps = 100;
  c.hyper.sac.update_after = 100;
  return c;
}

void fake_seed(const fs::path& cell, int seed, double ft, const std::string& grid = "0,0\n100,0.5\n") {
  const auto d = cell / ("seed_" + std::to_string(seed));
  fs::create_directories(d);
  std::ofstream(d / "metrics.csv") << "step,success\n" << grid;
  std::ofstream(d / "summary.txt") << "status ok\nft " << ft << '\n';
}

}  // namespace

TEST(Config, ParsesKeyValueLines) {
  std::istringstream in(
      "# transfer run\n"
      "mode = transfer\n"
      "task = push-wall\n"
      "sources = a.txt, b.txt\n"
      "seeds = 3,4\n"
      "steps = 5000   # short\n"
      "beta = 10\nepsilon = 0.5\nsamples = 7\nkl = closed\nhidden = 32x32\nensemble = 2\n");
  ExperimentConfig c;
  read_config(in, c);
  EXPECT_EQ(c.mode, Mode::Transfer);
  EXPECT_EQ(c.tasks, std::vector<TaskKind>{TaskKind::PushWallAnalog});
  EXPECT_EQ(c.sources, (std::vector<std::string>{"a.txt", "b.txt"}));
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{3, 4}));
  EXPECT_EQ(c.budget, 5000);
  EXPECT_EQ(c.hyper.beta, 10.0);
  EXPECT_EQ(c.hyper.epsilon, 0.5);
  EXPECT_EQ(c.hyper.advantage_samples, 7u);
  EXPECT_EQ(c.hyper.kl, KlEstimator::ClosedForm);
  EXPECT_EQ(c.hyper.sac.hidden, (std::vector<Eigen::Index>{32, 32}));
  EXPECT_EQ(c.hyper.sac.ensemble, 2u);
  c.validate();
}

TEST(Config, RejectsBadInput) {
  ExperimentConfig c;
  auto bad = [&](const std::string& text) {
    std::istringstream in(text);
    EXPECT_THROW(read_config(in, c), ConfigError) << text;
  };
  bad("colour = red\n");
  bad("steps = ten\n");
  bad("steps 10\n");
  bad("task = door\n");
  bad("mode = dance\n");
  bad("cache = maybe\n");

  ExperimentConfig v;
  v.seeds = {};
  EXPECT_THROW(v.validate(), ConfigError);
  v.seeds = {1, 2, 1};
  EXPECT_THROW(v.validate(), ConfigError);
  v.seeds = {1};
  v.budget = 0;
  EXPECT_THROW(v.validate(), ConfigError);
  v.budget = 10;
  v.hyper.epsilon = 1.5;
  EXPECT_THROW(v.validate(), ConfigError);
}

TEST(Checkpoint, RoundTripAndMissingFile) {
  const auto dir = scratch("ckpt");
  fs::create_directories(dir);
  Rng rng(1);
  const auto p = random_source_policy(8, 2, {8, 8}, rng);
  save_policy(dir / "p.txt", p);
  const auto q = load_policy(dir / "p.txt");
  EXPECT_EQ(q.action_dim, 2);
  for (std::size_t l = 0; l < p.trunk.layers.size(); ++l) EXPECT_EQ(q.trunk.layers[l].weight, p.trunk.layers[l].weight);
  EXPECT_THROW(load_policy(dir / "nope.txt"), ConfigError);
}

TEST(Run, MissingCheckpointFailsBeforeAnyOutput) {
  const auto out = scratch("missing");
  auto c = tiny(Mode::Transfer, out);
  c.sources = {(out / "absent.txt").string()};
  EXPECT_THROW(run_experiment(c), ConfigError);
  EXPECT_FALSE(fs::exists(out));
}

TEST(Run, IdenticalConfigGivesIdenticalCsv) {
  const auto a = scratch("det_a"), b = scratch("det_b");
  auto ca = tiny(Mode::TrainSource, a), cb = tiny(Mode::TrainSource, b);
  cb.jobs = 2;
  ASSERT_TRUE(run_experiment(ca).ok());
  ASSERT_TRUE(run_experiment(cb).ok());
  for (int s : {0, 1}) {
    const auto rel = fs::path("reach") / ("seed_" + std::to_string(s));
    EXPECT_EQ(slurp(a / rel / "metrics.csv"), slurp(b / rel / "metrics.csv"));
    EXPECT_EQ(slurp(a / rel / "policy.txt"), slurp(b / rel / "policy.txt"));
  }
}

TEST(Run, TransferWithoutSourcesHasZeroTransfer) {
  const auto out = scratch("self");
  const auto r = run_experiment(tiny(Mode::Transfer, out));
  ASSERT_TRUE(r.ok());
  EXPECT_EQ(r.seeds_run, 2u);
  for (int s : {0, 1}) {
    const auto d = out / "reach" / ("seed_" + std::to_string(s));
    const auto sum = read_summary(d / "summary.txt");
    EXPECT_EQ(sum.at("status"), "ok");
    if (sum.at("ft") != "missing") {
      EXPECT_EQ(std::stod(sum.at("ft")), 0.0);
    }
    EXPECT_EQ(slurp(d / "metrics.csv").rfind("step,success,sel_0\n", 0), 0u);
  }
}

TEST(Run, TransferFromTrainedSourceWritesSelection) {
  const auto src = scratch("src"), out = scratch("xfer");
  auto cs = tiny(Mode::TrainSource, src);
  cs.seeds = {0};
  ASSERT_TRUE(run_experiment(cs).ok());
  auto c = tiny(Mode::Transfer, out);
  c.tasks = {TaskKind::PushAnalog};
  c.sources = {(src / "reach" / "seed_0" / "policy.txt").string()};
  c.hyper.warmup_steps = 0;
  const auto r = run_experiment(c);
  ASSERT_TRUE(r.ok());
  const auto csv = slurp(out / "push" / "seed_0" / "metrics.csv");
  EXPECT_EQ(csv.rfind("step,success,sel_0,sel_1\n", 0), 0u);
  const auto t = aggregate({out});
  ASSERT_EQ(t.rows.size(), 1u);
  EXPECT_EQ(t.rows[0].cell, "push");
  EXPECT_LE(t.rows[0].ft.n, 2u);
}

TEST(Run, CertifyModeWritesReport) {
  const auto out = scratch("certify");
  auto c = tiny(Mode::CertifyTheorems, out);
  c.instances = 4;
  const auto r = run_experiment(c);
  EXPECT_TRUE(r.ok());
  const auto sum = read_summary(out / "summary.txt");
  EXPECT_EQ(sum.at("violations"), "0");
  EXPECT_EQ(sum.at("reports"), "48");
  EXPECT_EQ(slurp(out / "theorem_report.txt").rfind("report theorem=1 instance=0", 0), 0u);
}

TEST(Run, ContinualModeWritesMatrix) {
  const auto out = scratch("continual");
  auto c = tiny(Mode::Continual, out);
  c.tasks = {TaskKind::Reach, TaskKind::PushAnalog};
  c.seeds = {0};
  const auto r = run_experiment(c);
  ASSERT_TRUE(r.ok());
  const auto d = out / "packnet-iob" / "seed_0";
  EXPECT_EQ(slurp(d / "eval_matrix.csv").rfind("task,after_1,after_2\n", 0), 0u);
  EXPECT_EQ(read_summary(d / "summary.txt").at("frozen_audit"), "pass");
  EXPECT_EQ(read_summary(d / "summary.txt").at("forgetting"), "0");
}

TEST(Certify, SmallSweepHasNoViolations) {
  std::ostringstream os;
  const auto s = certify_theorems(6, 3, &os);
  EXPECT_EQ(s.reports, 6u * 12u);
  EXPECT_EQ(s.violations, 0u);
  EXPECT_GE(s.worst_margin_1, -1e-9);
  EXPECT_GE(s.worst_margin_2, -1e-9);
  const auto t1 = certify_theorems(3, 3, nullptr, true, false);
  EXPECT_EQ(t1.reports, 24u);
}

TEST(Aggregate, TwoSeedsMeanAndStd) {
  const auto root = scratch("agg");
  fake_seed(root / "push-wall", 0, 0.2);
  fake_seed(root / "push-wall", 1, 0.4);
  fake_seed(root / "pick", 0, 0.5);
  fake_seed(root / "pick", 1, 0.5);
  const auto t = aggregate({root});
  ASSERT_EQ(t.rows.size(), 2u);
  EXPECT_EQ(t.rows[0].cell, "pick");
  EXPECT_EQ(t.rows[0].ft.std, 0.0);
  EXPECT_DOUBLE_EQ(t.rows[1].ft.mean, 0.3);
  EXPECT_NEAR(t.rows[1].ft.std, 0.1, 1e-15);
  EXPECT_DOUBLE_EQ(t.average.mean, 0.4);
  std::ostringstream text, csv;
  t.write_text(text);
  t.write_csv(csv);
  EXPECT_NE(text.str().find("push-wall  0.30 +- 0.10"), std::string::npos);
  EXPECT_NE(csv.str().find("\navg,0.4,"), std::string::npos);
}

TEST(Aggregate, Errors) {
  const auto root = scratch("agg_bad");
  fake_seed(root / "a", 0, 0.1);
  fake_seed(root / "a", 1, 0.1, "0,0\n150,0.5\n");
  EXPECT_THROW(aggregate({root}), ConfigError);
  const auto one = scratch("agg_one");
  fake_seed(one / "a", 0, 0.1);
  EXPECT_THROW(aggregate({one}), ConfigError);
  EXPECT_THROW(aggregate({scratch("agg_none")}), ConfigError);
}

TEST(Aggregate, FailedSeedsAreSkipped) {
  const auto root = scratch("agg_failed");
  fake_seed(root / "a", 0, 0.2);
  fake_seed(root / "a", 1, 0.6);
  fake_seed(root / "a", 2, 9.0);
  std::ofstream(root / "a" / "seed_2" / "summary.txt") << "status failed\nft 9\n";
  const auto t = aggregate({root / "a"});
  EXPECT_EQ(t.rows[0].ft.n, 2u);
  EXPECT_DOUBLE_EQ(t.rows[0].ft.mean, 0.4);
}
