#pragma once

// Experiment runner: parses a JSON experiment file, runs every
// (weights, seed) combination, and writes per-run CSVs, aggregate curves,
// heatmap grids and a manifest with content hashes.
//
// Output layout under output_dir:
//   manifest.json
//   runs/<key>/record.csv         (+ visitation.csv, heatmap.csv, layout.txt, checkpoint.txt for agents)
//   aggregate/<group>.csv         x,mean,stderr over the seeds of one weight pair
// with key = ls<lambda_s>_lp<lambda_pi>_seed<seed> and group = ls<lambda_s>_lp<lambda_pi>.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "mselab/agents.hpp"
#include "mselab/exact_pg.hpp"
#include "mselab/gridworld.hpp"

namespace mselab {

/// Invalid experiment file. `line` is 1-based, 0 when unknown.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& what, int line) : std::runtime_error(format(what, line)), line_(line) {}
  int line() const noexcept { return line_; }

 private:
  static std::string format(const std::string& what, int line) {
    return line > 0 ? "line " + std::to_string(line) + ": " + what : what;
  }
  int line_;
};

enum class ExperimentKind { kExactFrozenLake, kCoverageGrid, kFourRoomsAc, kSweep };

std::string to_string(ExperimentKind k);

struct EnvironmentConfig {
  std::string name = "frozen_lake";  // frozen_lake | pachinko | double_slit | four_rooms
  int size = 4;                      // frozen_lake 4/8, four_rooms side
  bool slippery = true;
  int width = 21;
  int height = 21;
  int wall_period = 3;
  int room_size = 7;
  int door_width = 1;
  double discount = 0.99;
};

GridWorld make_environment(const EnvironmentConfig& env);

struct WeightPair {
  double lambda_s = 0.0;
  double lambda_pi = 0.1;
};

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::kExactFrozenLake;
  // For sweeps: the experiment kind each run follows.
  ExperimentKind base = ExperimentKind::kExactFrozenLake;
  EnvironmentConfig environment;
  ExactPGConfig exact;
  AgentConfig agent;
  std::vector<WeightPair> weights;
  double decay_s = 1.0;
  double decay_pi = 1.0;
  std::vector<std::uint64_t> seeds = {0};
  std::string output_dir = "out";
  int workers = 1;

  /// Kind that decides what a single run does.
  ExperimentKind run_kind() const { return kind == ExperimentKind::kSweep ? base : kind; }
  bool uses_agent() const { return run_kind() != ExperimentKind::kExactFrozenLake; }
};

/// Parses and validates; every error carries the offending line when known.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Fully resolved config with every default spelled out (canonical key order).
std::string dump_config(const ExperimentConfig& config);

/// Shortest round-trip decimal, used in run keys ("0.1", "0.001", "0").
std::string format_weight(double w);
std::string group_key(const WeightPair& w);
std::string run_key(const WeightPair& w, std::uint64_t seed);

struct RunStatus {
  std::string key;
  WeightPair weights;
  std::uint64_t seed = 0;
  bool ok = true;
  std::string error;
};

struct ExperimentResult {
  std::vector<RunStatus> runs;
  bool all_ok() const;
};

/// Runs everything and writes the artifact tree. Individual run failures are
/// recorded in the manifest rather than thrown.
ExperimentResult run_experiment(const ExperimentConfig& config, std::ostream* log = nullptr);

struct AggregateCurve {
  std::vector<double> x;
  std::vector<double> mean;
  std::vector<double> stderr_;  // sample std / sqrt(N)
  std::vector<std::string> runs;
};

/// Pointwise mean and standard error over equally long curves.
AggregateCurve aggregate_curves(const std::vector<std::vector<double>>& curves, std::vector<double> x,
                                std::vector<std::string> runs);
void write_aggregate(std::ostream& out, const AggregateCurve& curve);

/// Rebuilds aggregate/ from the per-run CSVs listed in the manifest and
/// refreshes the manifest hashes. Identical inputs give identical bytes.
void aggregate_directory(const std::filesystem::path& dir);

/// Max-normalized visit grid; walls are -1, floor cells in [0, 1].
Matrix heatmap(const GridSpec& layout, const std::vector<std::vector<std::int64_t>>& counts);
void write_grid(std::ostream& out, const Matrix& grid);
/// Reads layout.txt and visitation.csv from a run directory and writes heatmap.csv.
Matrix heatmap_for_run(const std::filesystem::path& run_dir);

enum class CompareMetric { kAuc, kFinal, kCoverage };
CompareMetric parse_metric(const std::string& s);
std::string to_string(CompareMetric m);

struct CompareReport {
  CompareMetric metric = CompareMetric::kFinal;
  std::vector<std::uint64_t> seeds;
  std::vector<double> a;
  std::vector<double> b;
  int wins_a = 0;
  int wins_b = 0;
  int ties = 0;
  double median_a = 0.0;
  double median_b = 0.0;
  double median_gap = 0.0;  // median(a) - median(b)
  double mean_gap = 0.0;    // mean(a - b)
};

/// Per-seed value of a record CSV under `metric`: auc is the mean of the curve,
/// final the mean of its last quarter, coverage the last coverage value.
double curve_metric(const std::filesystem::path& record_csv, CompareMetric metric);

/// Compares the runs of one weight group in each directory. `group_*` may be
/// empty when the directory holds a single group. Throws UsageError when the
/// seed sets differ.
CompareReport compare_runs(const std::filesystem::path& dir_a, const std::filesystem::path& dir_b,
                           CompareMetric metric, const std::string& group_a = "", const std::string& group_b = "");
void write_report(std::ostream& out, const CompareReport& report);

/// Lower-case hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);

/// Minimal CSV reader: header names and numeric rows.
struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;

  std::vector<double> column(const std::string& name) const;
};
Table read_csv(const std::filesystem::path& path);

}  // namespace mselab
