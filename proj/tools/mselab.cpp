// Command-line front end for the experiment harness.
//
// Exit codes: 0 success, 1 config or usage error, 2 run failure,
// 3 comparison assertion failed.

#include <exception>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "mselab/error.hpp"
#include "mselab/harness.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kRunFailure = 2;
constexpr int kAssertionFailed = 3;

int cmd_run(const std::string& path, const std::string& output, int workers, bool dry_run) {
  mselab::ExperimentConfig config;
  try {
    config = mselab::load_config(path);
  } catch (const mselab::ConfigError& e) {
    std::cerr << path << ": " << e.what() << '\n';
    return kConfigError;
  }
  if (!output.empty()) config.output_dir = output;
  if (workers > 0) config.workers = workers;
  if (dry_run) {
    std::cout << mselab::dump_config(config) << '\n';
    return kOk;
  }
  const auto result = mselab::run_experiment(config, &std::cerr);
  int failed = 0;
  for (const auto& r : result.runs) failed += r.ok ? 0 : 1;
  std::cout << result.runs.size() - static_cast<std::size_t>(failed) << '/' << result.runs.size()
            << " runs ok, artifacts in " << config.output_dir << '\n';
  return failed ? kRunFailure : kOk;
}

int cmd_compare(const std::string& a, const std::string& b, const std::string& metric, const std::string& group_a,
                const std::string& group_b, const std::string& expect) {
  mselab::CompareMetric m;
  try {
    m = mselab::parse_metric(metric);
  } catch (const mselab::DomainError& e) {
    std::cerr << e.what() << '\n';
    return kConfigError;
  }
  const auto report = mselab::compare_runs(a, b, m, group_a, group_b);
  mselab::write_report(std::cout, report);
  if (expect.empty()) return kOk;
  bool holds = false;
  if (expect == "a>b") {
    holds = report.median_a > report.median_b;
  } else if (expect == "a>=b") {
    holds = report.median_a >= report.median_b;
  } else if (expect == "a<b") {
    holds = report.median_a < report.median_b;
  } else {
    std::cerr << "--expect takes a>b, a>=b or a<b\n";
    return kConfigError;
  }
  std::cout << "expect " << expect << ": " << (holds ? "holds" : "FAILS") << '\n';
  return holds ? kOk : kAssertionFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Maximum state entropy experiments on gridworlds"};
  app.require_subcommand(1);

  std::string config_path;
  std::string output;
  int workers = 0;
  bool dry_run = false;
  auto* run = app.add_subcommand("run", "Run every (weights, seed) combination of an experiment file");
  run->add_option("config", config_path, "Experiment JSON")->required();
  run->add_option("-o,--output", output, "Override output_dir");
  run->add_option("-j,--workers", workers, "Override worker count");
  run->add_flag("--dry-run", dry_run, "Print the resolved config and exit");

  std::string agg_dir;
  auto* aggregate = app.add_subcommand("aggregate", "Rebuild aggregate curves and manifest hashes");
  aggregate->add_option("dir", agg_dir, "Experiment output directory")->required();

  std::string run_dir;
  auto* heat = app.add_subcommand("heatmap", "Write heatmap.csv for one agent run");
  heat->add_option("run", run_dir, "Run directory (runs/<key>)")->required();

  std::string dir_a;
  std::string dir_b;
  std::string metric = "final";
  std::string group_a;
  std::string group_b;
  std::string expect;
  auto* compare = app.add_subcommand("compare", "Per-seed comparison of two run sets");
  compare->add_option("dir_a", dir_a)->required();
  compare->add_option("dir_b", dir_b)->required();
  compare->add_option("--metric", metric, "auc | final | coverage");
  compare->add_option("--group-a", group_a, "Weight group in dir_a, e.g. ls0.1_lp0.1");
  compare->add_option("--group-b", group_b, "Weight group in dir_b");
  compare->add_option("--expect", expect, "Assert on medians: a>b, a>=b or a<b");

  std::string env_name = "four_rooms";
  int size = 0;
  auto* layout = app.add_subcommand("layout", "Print a built-in layout");
  layout->add_option("name", env_name, "frozen_lake | pachinko | double_slit | four_rooms");
  layout->add_option("--size", size, "Side length for frozen_lake or four_rooms");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kConfigError;
  }

  try {
    if (*run) return cmd_run(config_path, output, workers, dry_run);
    if (*aggregate) {
      mselab::aggregate_directory(agg_dir);
      return kOk;
    }
    if (*heat) {
      mselab::heatmap_for_run(run_dir);
      std::cout << run_dir << "/heatmap.csv\n";
      return kOk;
    }
    if (*compare) return cmd_compare(dir_a, dir_b, metric, group_a, group_b, expect);
    if (*layout) {
      mselab::EnvironmentConfig env;
      env.name = env_name;
      if (env_name == "four_rooms") env.size = 11;
      if (size > 0) env.size = size;
      std::cout << mselab::format_layout(mselab::make_environment(env).spec);
      return kOk;
    }
  } catch (const mselab::UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfigError;
  } catch (const mselab::DomainError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRunFailure;
  }
  return kOk;
}
