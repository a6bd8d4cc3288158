#include "mselab/harness.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "mselab/error.hpp"

namespace mselab {

namespace fs = std::filesystem;
using nlohmann::json;
using ordered_json = nlohmann::ordered_json;

namespace {

constexpr const char* kVersion = "0.1.0";

// --- config parsing -------------------------------------------------------------

int line_at(const std::string& text, std::size_t byte) {
  byte = std::min(byte, text.size());
  return 1 + static_cast<int>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(byte), '\n'));
}

class Parser {
 public:
  explicit Parser(const std::string& text) : text_(text) {}

  [[noreturn]] void fail(const std::string& key, const std::string& what) const {
    throw ConfigError(key.empty() ? what : "'" + key + "': " + what, line_of(key));
  }

  // First line mentioning "key"; good enough for files that do not repeat names.
  int line_of(const std::string& key) const {
    if (key.empty()) return 0;
    const std::string leaf = key.substr(key.rfind('.') + 1);
    const auto pos = text_.find('"' + leaf + '"');
    return pos == std::string::npos ? 0 : line_at(text_, pos);
  }

  void only_keys(const json& obj, const std::string& path, std::initializer_list<const char*> allowed) const {
    if (!obj.is_object()) fail(path, "expected an object");
    for (const auto& [k, v] : obj.items()) {
      bool ok = false;
      for (const char* a : allowed) ok = ok || k == a;
      if (!ok) fail(join(path, k), "unknown key");
    }
  }

  static std::string join(const std::string& path, const std::string& key) {
    return path.empty() ? key : path + "." + key;
  }

  template <typename T>
  void read(const json& obj, const std::string& path, const char* key, T& out) const {
    const auto it = obj.find(key);
    if (it == obj.end()) return;
    const std::string full = join(path, key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!it->is_boolean()) fail(full, "expected true or false");
      } else if constexpr (std::is_integral_v<T>) {
        if (!it->is_number_integer()) fail(full, "expected an integer");
        if constexpr (std::is_unsigned_v<T>) {
          if (it->get<std::int64_t>() < 0) fail(full, "expected a non-negative integer");
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!it->is_number()) fail(full, "expected a number");
      } else {
        if (!it->is_string()) fail(full, "expected a string");
      }
      out = it->get<T>();
    } catch (const json::exception& e) {
      fail(full, e.what());
    }
  }

  template <typename T>
  void read_list(const json& obj, const std::string& path, const char* key, std::vector<T>& out) const {
    const auto it = obj.find(key);
    if (it == obj.end()) return;
    const std::string full = join(path, key);
    if (!it->is_array() || it->empty()) fail(full, "expected a non-empty list");
    out.clear();
    for (const auto& v : *it) {
      if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer() || (std::is_unsigned_v<T> && v.get<std::int64_t>() < 0)) {
          fail(full, "expected non-negative integers");
        }
      } else {
        if (!v.is_number()) fail(full, "expected numbers");
      }
      out.push_back(v.get<T>());
    }
  }

 private:
  const std::string& text_;
};

ExperimentKind parse_kind(const std::string& s, const Parser& p, const std::string& key) {
  if (s == "exact_frozenlake") return ExperimentKind::kExactFrozenLake;
  if (s == "coverage_grid") return ExperimentKind::kCoverageGrid;
  if (s == "fourrooms_ac") return ExperimentKind::kFourRoomsAc;
  if (s == "sweep") return ExperimentKind::kSweep;
  p.fail(key, "unknown experiment kind '" + s + "' (exact_frozenlake, coverage_grid, fourrooms_ac, sweep)");
}

std::string to_string(PolicyInit i) { return i == PolicyInit::kZero ? "zero" : "gaussian"; }
std::string to_string(EntropyTarget t) {
  return t == EntropyTarget::kNormalizedOccupancy ? "normalized_occupancy" : "stationary";
}

ordered_json config_json(const ExperimentConfig& c) {
  ordered_json j;
  j["kind"] = to_string(c.kind);
  if (c.kind == ExperimentKind::kSweep) j["base"] = to_string(c.base);
  const auto& e = c.environment;
  ordered_json env{{"name", e.name}, {"discount", e.discount}};
  if (e.name == "frozen_lake") {
    env["size"] = e.size;
    env["slippery"] = e.slippery;
  } else if (e.name == "pachinko") {
    env["width"] = e.width;
    env["height"] = e.height;
    env["wall_period"] = e.wall_period;
  } else if (e.name == "double_slit") {
    env["room_size"] = e.room_size;
    env["door_width"] = e.door_width;
  } else {
    env["size"] = e.size;
  }
  j["environment"] = env;
  if (c.uses_agent()) {
    const auto& a = c.agent;
    j["agent"] = ordered_json{{"algorithm", to_string(a.algorithm)},
                              {"gamma", a.gamma},
                              {"gae_lambda", a.gae_lambda},
                              {"learning_rate", a.learning_rate},
                              {"rollout_batch", a.rollout_batch},
                              {"max_updates", a.max_updates},
                              {"bonus_in_critic", a.bonus_in_critic},
                              {"normalize_advantages", a.normalize_advantages},
                              {"max_grad_norm", a.max_grad_norm},
                              {"value_coef", a.value_coef},
                              {"kl_weight", a.kl_weight},
                              {"discount_entropy_reg", a.discount_entropy_reg},
                              {"count_bonus", a.count_bonus},
                              {"hidden", a.hidden},
                              {"z_dim", a.z_dim},
                              {"encoding", to_string(a.encoding)}};
  } else {
    const auto& x = c.exact;
    j["exact"] = ordered_json{{"learning_rate", x.learning_rate},
                              {"iterations", x.iterations},
                              {"init", to_string(x.init)},
                              {"init_std", x.init_std},
                              {"target", to_string(x.objective.target)},
                              {"simple_entropy_grad", x.objective.simple_entropy_grad},
                              {"stationary_damping", x.objective.stationary_damping}};
  }
  ordered_json weights = ordered_json::array();
  for (const auto& w : c.weights) weights.push_back({w.lambda_s, w.lambda_pi});
  j["weights"] = weights;
  j["decay_s"] = c.decay_s;
  j["decay_pi"] = c.decay_pi;
  j["seeds"] = c.seeds;
  j["output_dir"] = c.output_dir;
  j["workers"] = c.workers;
  return j;
}

// --- hashing and files ----------------------------------------------------------

std::string hex(const unsigned char* data, unsigned int n) {
  std::ostringstream out;
  for (unsigned int i = 0; i < n; ++i) out << std::hex << std::setw(2) << std::setfill('0') << int{data[i]};
  return out.str();
}

std::string sha256_bytes(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("SHA-256 failed");
  }
  return hex(digest, len);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

template <typename Fn>
void write_file(const fs::path& path, Fn&& fn) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  fn(out);
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::vector<std::vector<std::int64_t>> read_int_grid(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<std::vector<std::int64_t>> grid;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::int64_t> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(std::stoll(cell));
    grid.push_back(std::move(row));
  }
  return grid;
}

ordered_json read_manifest(const fs::path& dir) {
  const fs::path path = dir / "manifest.json";
  if (!fs::exists(path)) throw UsageError("no manifest.json in " + dir.string());
  return ordered_json::parse(read_file(path));
}

// --- running ----------------------------------------------------------------------

void run_one(const ExperimentConfig& config, const GridWorld& world, const RunStatus& status, const fs::path& dir) {
  fs::create_directories(dir);
  if (!config.uses_agent()) {
    ExactPGConfig exact = config.exact;
    exact.weights = {status.weights.lambda_s, status.weights.lambda_pi, config.decay_s, config.decay_pi};
    exact.seed = status.seed;
    const auto result = train_exact(world.mdp, exact);
    write_file(dir / "record.csv", [&](std::ostream& o) { write_exact_record(o, result.record); });
    return;
  }
  AgentConfig agent = config.agent;
  agent.weights = {status.weights.lambda_s, status.weights.lambda_pi, config.decay_s, config.decay_pi};
  agent.seed = status.seed;
  const auto result = train(world, agent);
  write_file(dir / "record.csv", [&](std::ostream& o) { write_train_record(o, result.record); });
  write_file(dir / "visitation.csv", [&](std::ostream& o) { write_visitation_grid(o, world, result.counts); });
  write_file(dir / "layout.txt", [&](std::ostream& o) { o << format_layout(world.spec); });
  write_file(dir / "checkpoint.txt", [&](std::ostream& o) { save_checkpoint(o, result.final_policy); });
  heatmap_for_run(dir);
  if (result.aborted) throw NumericError(result.abort_reason);
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

// --- public API -------------------------------------------------------------------

std::string to_string(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::kExactFrozenLake: return "exact_frozenlake";
    case ExperimentKind::kCoverageGrid: return "coverage_grid";
    case ExperimentKind::kFourRoomsAc: return "fourrooms_ac";
    case ExperimentKind::kSweep: return "sweep";
  }
  return "?";
}

GridWorld make_environment(const EnvironmentConfig& env) {
  if (env.name == "frozen_lake") return frozen_lake(env.size, env.slippery, env.discount);
  if (env.name == "pachinko") return make_world(pachinko(env.width, env.height, env.wall_period), env.discount);
  if (env.name == "double_slit") return make_world(double_slit(env.room_size, env.door_width), env.discount);
  if (env.name == "four_rooms") return make_world(four_rooms(env.size), env.discount);
  throw DomainError("unknown environment '" + env.name + "'");
}

ExperimentConfig parse_config(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("malformed JSON: ") + e.what(), line_at(text, e.byte == 0 ? 0 : e.byte - 1));
  }
  const Parser p(text);
  p.only_keys(root, "", {"kind", "base", "environment", "exact", "agent", "weights", "lambda_s", "lambda_pi",
                         "decay_s", "decay_pi", "seeds", "output_dir", "workers"});

  ExperimentConfig c;
  std::string kind;
  if (!root.contains("kind")) p.fail("", "missing 'kind'");
  p.read(root, "", "kind", kind);
  c.kind = parse_kind(kind, p, "kind");
  if (c.kind == ExperimentKind::kSweep) {
    std::string base = "exact_frozenlake";
    p.read(root, "", "base", base);
    c.base = parse_kind(base, p, "base");
    if (c.base == ExperimentKind::kSweep) p.fail("base", "a sweep cannot be based on another sweep");
  } else if (root.contains("base")) {
    p.fail("base", "only sweeps take a base kind");
  }

  // Kind-specific defaults, overridable below.
  switch (c.run_kind()) {
    case ExperimentKind::kExactFrozenLake:
      c.environment.name = "frozen_lake";
      break;
    case ExperimentKind::kCoverageGrid:
      c.environment.name = "pachinko";
      c.agent.algorithm = Algorithm::kReinforce;
      break;
    case ExperimentKind::kFourRoomsAc:
      c.environment.name = "four_rooms";
      c.environment.size = 11;
      c.agent.algorithm = Algorithm::kA2cGae;
      break;
    case ExperimentKind::kSweep:
      break;
  }

  if (root.contains("environment")) {
    const json& e = root["environment"];
    p.only_keys(e, "environment", {"name", "size", "slippery", "width", "height", "wall_period", "room_size",
                                   "door_width", "discount"});
    auto& env = c.environment;
    p.read(e, "environment", "name", env.name);
    if (env.name == "four_rooms" && !e.contains("size")) env.size = 11;
    p.read(e, "environment", "size", env.size);
    p.read(e, "environment", "slippery", env.slippery);
    p.read(e, "environment", "width", env.width);
    p.read(e, "environment", "height", env.height);
    p.read(e, "environment", "wall_period", env.wall_period);
    p.read(e, "environment", "room_size", env.room_size);
    p.read(e, "environment", "door_width", env.door_width);
    p.read(e, "environment", "discount", env.discount);
  }
  const std::string& env_name = c.environment.name;
  const auto allowed_env = [&]() -> std::set<std::string> {
    switch (c.run_kind()) {
      case ExperimentKind::kExactFrozenLake: return {"frozen_lake"};
      case ExperimentKind::kCoverageGrid: return {"pachinko", "double_slit", "four_rooms", "frozen_lake"};
      case ExperimentKind::kFourRoomsAc: return {"four_rooms"};
      default: return {};
    }
  }();
  if (!allowed_env.contains(env_name)) {
    p.fail("environment.name", "environment '" + env_name + "' is not valid for " + to_string(c.run_kind()));
  }
  try {
    (void)make_environment(c.environment);
  } catch (const std::exception& e) {
    p.fail("environment", e.what());
  }

  if (c.uses_agent()) {
    if (root.contains("exact")) p.fail("exact", "agent experiments take an 'agent' block");
    if (root.contains("agent")) {
      const json& a = root["agent"];
      p.only_keys(a, "agent", {"algorithm", "gamma", "gae_lambda", "learning_rate", "rollout_batch", "max_updates",
                               "bonus_in_critic", "normalize_advantages", "max_grad_norm", "value_coef",
                               "kl_weight", "discount_entropy_reg", "count_bonus", "hidden", "z_dim", "encoding"});
      auto& ag = c.agent;
      std::string algo = to_string(ag.algorithm);
      p.read(a, "agent", "algorithm", algo);
      try {
        ag.algorithm = parse_algorithm(algo);
      } catch (const DomainError& e) {
        p.fail("agent.algorithm", e.what());
      }
      p.read(a, "agent", "gamma", ag.gamma);
      p.read(a, "agent", "gae_lambda", ag.gae_lambda);
      p.read(a, "agent", "learning_rate", ag.learning_rate);
      p.read(a, "agent", "rollout_batch", ag.rollout_batch);
      p.read(a, "agent", "max_updates", ag.max_updates);
      p.read(a, "agent", "bonus_in_critic", ag.bonus_in_critic);
      p.read(a, "agent", "normalize_advantages", ag.normalize_advantages);
      p.read(a, "agent", "max_grad_norm", ag.max_grad_norm);
      p.read(a, "agent", "value_coef", ag.value_coef);
      p.read(a, "agent", "kl_weight", ag.kl_weight);
      p.read(a, "agent", "discount_entropy_reg", ag.discount_entropy_reg);
      p.read(a, "agent", "count_bonus", ag.count_bonus);
      p.read_list(a, "agent", "hidden", ag.hidden);
      p.read(a, "agent", "z_dim", ag.z_dim);
      std::string enc = to_string(ag.encoding);
      p.read(a, "agent", "encoding", enc);
      try {
        ag.encoding = parse_encoding(enc);
      } catch (const DomainError& e) {
        p.fail("agent.encoding", e.what());
      }
    }
    try {
      c.agent.validate();
    } catch (const DomainError& e) {
      p.fail("agent", e.what());
    }
  } else {
    if (root.contains("agent")) p.fail("agent", "exact experiments take an 'exact' block");
    if (root.contains("exact")) {
      const json& x = root["exact"];
      p.only_keys(x, "exact", {"learning_rate", "iterations", "init", "init_std", "target", "simple_entropy_grad",
                               "stationary_damping"});
      auto& ex = c.exact;
      p.read(x, "exact", "learning_rate", ex.learning_rate);
      p.read(x, "exact", "iterations", ex.iterations);
      std::string init = to_string(ex.init);
      p.read(x, "exact", "init", init);
      if (init == "zero") {
        ex.init = PolicyInit::kZero;
      } else if (init == "gaussian") {
        ex.init = PolicyInit::kGaussian;
      } else {
        p.fail("exact.init", "expected zero or gaussian");
      }
      p.read(x, "exact", "init_std", ex.init_std);
      std::string target = to_string(ex.objective.target);
      p.read(x, "exact", "target", target);
      if (target == "normalized_occupancy") {
        ex.objective.target = EntropyTarget::kNormalizedOccupancy;
      } else if (target == "stationary") {
        ex.objective.target = EntropyTarget::kStationary;
      } else {
        p.fail("exact.target", "expected normalized_occupancy or stationary");
      }
      p.read(x, "exact", "simple_entropy_grad", ex.objective.simple_entropy_grad);
      p.read(x, "exact", "stationary_damping", ex.objective.stationary_damping);
    }
    try {
      c.exact.validate();
    } catch (const std::exception& e) {
      p.fail("exact", e.what());
    }
  }

  if (root.contains("weights")) {
    if (root.contains("lambda_s") || root.contains("lambda_pi")) {
      p.fail("weights", "give either 'weights' pairs or 'lambda_s'/'lambda_pi' grids, not both");
    }
    const json& w = root["weights"];
    if (!w.is_array() || w.empty()) p.fail("weights", "expected a non-empty list of [lambda_s, lambda_pi] pairs");
    for (const auto& pair : w) {
      if (!pair.is_array() || pair.size() != 2 || !pair[0].is_number() || !pair[1].is_number()) {
        p.fail("weights", "expected [lambda_s, lambda_pi] pairs");
      }
      c.weights.push_back({pair[0].get<double>(), pair[1].get<double>()});
    }
  } else {
    // Baseline convention: lambda_pi = 0.1 unless overridden.
    std::vector<double> ls = {0.0};
    std::vector<double> lp = {0.1};
    p.read_list(root, "", "lambda_s", ls);
    p.read_list(root, "", "lambda_pi", lp);
    for (double s : ls) {
      for (double q : lp) c.weights.push_back({s, q});
    }
  }
  p.read(root, "", "decay_s", c.decay_s);
  p.read(root, "", "decay_pi", c.decay_pi);
  for (const auto& w : c.weights) {
    try {
      RegularizationWeights{w.lambda_s, w.lambda_pi, c.decay_s, c.decay_pi}.validate();
    } catch (const std::exception& e) {
      p.fail(root.contains("weights") ? "weights" : "lambda_s", e.what());
    }
  }
  p.read_list(root, "", "seeds", c.seeds);
  p.read(root, "", "output_dir", c.output_dir);
  if (c.output_dir.empty()) p.fail("output_dir", "must not be empty");
  p.read(root, "", "workers", c.workers);
  if (c.workers < 1) p.fail("workers", "must be >= 1");

  std::set<std::string> keys;
  for (const auto& w : c.weights) {
    for (auto s : c.seeds) {
      if (!keys.insert(run_key(w, s)).second) {
        p.fail(root.contains("weights") ? "weights" : "seeds", "duplicate run " + run_key(w, s));
      }
    }
  }
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string(), 0);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

std::string dump_config(const ExperimentConfig& config) { return config_json(config).dump(2); }

std::string format_weight(double w) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, w);
  return std::string(buf, res.ptr);
}

std::string group_key(const WeightPair& w) {
  return "ls" + format_weight(w.lambda_s) + "_lp" + format_weight(w.lambda_pi);
}

std::string run_key(const WeightPair& w, std::uint64_t seed) { return group_key(w) + "_seed" + std::to_string(seed); }

bool ExperimentResult::all_ok() const {
  return std::all_of(runs.begin(), runs.end(), [](const RunStatus& r) { return r.ok; });
}

ExperimentResult run_experiment(const ExperimentConfig& config, std::ostream* log) {
  const fs::path out(config.output_dir);
  fs::create_directories(out / "runs");
  const GridWorld world = make_environment(config.environment);

  ExperimentResult result;
  for (const auto& w : config.weights) {
    for (auto s : config.seeds) result.runs.push_back({run_key(w, s), w, s, true, {}});
  }

  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < result.runs.size(); i = next++) {
      RunStatus& st = result.runs[i];
      const fs::path dir = out / "runs" / st.key;
      try {
        run_one(config, world, st, dir);
      } catch (const std::exception& e) {
        st.ok = false;
        st.error = e.what();
        std::ofstream(dir / "error.txt") << st.error << '\n';
      }
      if (log) {
        std::lock_guard lock(log_mutex);
        *log << (st.ok ? "done   " : "FAILED ") << st.key << (st.ok ? "" : ": " + st.error) << '\n';
      }
    }
  };
  const int n_workers = std::max(1, std::min<int>(config.workers, static_cast<int>(result.runs.size())));
  if (n_workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < n_workers; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  ordered_json manifest;
  manifest["tool"] = "mselab";
  manifest["version"] = kVersion;
  const ordered_json cfg = config_json(config);
  manifest["config"] = cfg;
  manifest["config_sha256"] = sha256_bytes(cfg.dump());
  manifest["seeds"] = config.seeds;
  manifest["curve_column"] = config.uses_agent() ? "env_return_mean" : "J";
  manifest["runs"] = ordered_json::array();
  for (const auto& st : result.runs) {
    ordered_json r{{"key", st.key},
                   {"group", group_key(st.weights)},
                   {"lambda_s", st.weights.lambda_s},
                   {"lambda_pi", st.weights.lambda_pi},
                   {"seed", st.seed},
                   {"status", st.ok ? "ok" : "failed"}};
    if (!st.ok) r["error"] = st.error;
    manifest["runs"].push_back(r);
  }
  write_file(out / "manifest.json", [&](std::ostream& o) { o << manifest.dump(2) << '\n'; });
  aggregate_directory(out);
  return result;
}

AggregateCurve aggregate_curves(const std::vector<std::vector<double>>& curves, std::vector<double> x,
                                std::vector<std::string> runs) {
  if (curves.empty()) throw UsageError("nothing to aggregate");
  for (const auto& c : curves) {
    if (c.size() != x.size()) throw DimensionError("aggregate: curves differ in length");
  }
  AggregateCurve out;
  out.x = std::move(x);
  out.runs = std::move(runs);
  const auto n = static_cast<double>(curves.size());
  for (std::size_t i = 0; i < out.x.size(); ++i) {
    double mean = 0.0;
    for (const auto& c : curves) mean += c[i];
    mean /= n;
    double ss = 0.0;
    for (const auto& c : curves) ss += (c[i] - mean) * (c[i] - mean);
    out.mean.push_back(mean);
    out.stderr_.push_back(curves.size() > 1 ? std::sqrt(ss / (n - 1.0)) / std::sqrt(n) : 0.0);
  }
  return out;
}

void write_aggregate(std::ostream& out, const AggregateCurve& curve) {
  out << "x,mean,stderr\n" << std::setprecision(17);
  for (std::size_t i = 0; i < curve.x.size(); ++i) {
    out << curve.x[i] << ',' << curve.mean[i] << ',' << curve.stderr_[i] << '\n';
  }
}

void aggregate_directory(const fs::path& dir) {
  ordered_json manifest = read_manifest(dir);
  const std::string column = manifest.at("curve_column").get<std::string>();
  const std::string x_column = column == "J" ? "iter" : "update";
  fs::create_directories(dir / "aggregate");

  std::map<std::string, std::vector<std::string>> groups;  // group -> ok run keys
  for (auto& run : manifest["runs"]) {
    const std::string key = run.at("key");
    const fs::path run_dir = dir / "runs" / key;
    ordered_json files = ordered_json::object();
    if (fs::is_directory(run_dir)) {
      std::vector<fs::path> paths;
      for (const auto& entry : fs::directory_iterator(run_dir)) {
        if (entry.is_regular_file()) paths.push_back(entry.path());
      }
      std::sort(paths.begin(), paths.end());
      for (const auto& path : paths) files[path.filename().string()] = sha256_file(path);
    }
    run["files"] = files;
    if (run.at("status") == "ok") groups[run.at("group").get<std::string>()].push_back(key);
  }

  ordered_json aggregates = ordered_json::array();
  for (const auto& [group, keys] : groups) {
    std::vector<std::vector<double>> curves;
    std::vector<double> x;
    for (const auto& key : keys) {
      const Table t = read_csv(dir / "runs" / key / "record.csv");
      curves.push_back(t.column(column));
      if (x.empty()) x = t.column(x_column);
    }
    const fs::path file = dir / "aggregate" / (group + ".csv");
    write_file(file, [&](std::ostream& o) { write_aggregate(o, aggregate_curves(curves, x, keys)); });
    aggregates.push_back({{"group", group},
                          {"file", "aggregate/" + group + ".csv"},
                          {"sha256", sha256_file(file)},
                          {"runs", keys}});
  }
  manifest["aggregates"] = aggregates;
  write_file(dir / "manifest.json", [&](std::ostream& o) { o << manifest.dump(2) << '\n'; });
}

Matrix heatmap(const GridSpec& layout, const std::vector<std::vector<std::int64_t>>& counts) {
  if (static_cast<int>(counts.size()) != layout.height) throw DimensionError("heatmap: row count differs from layout");
  std::int64_t max_count = 0;
  for (int y = 0; y < layout.height; ++y) {
    if (static_cast<int>(counts[y].size()) != layout.width) {
      throw DimensionError("heatmap: column count differs from layout");
    }
    for (int x = 0; x < layout.width; ++x) {
      const std::int64_t c = counts[y][x];
      if (c < 0) throw DomainError("heatmap: negative count");
      if (!layout.is_wall({x, y})) max_count = std::max(max_count, c);
    }
  }
  Matrix grid(layout.height, layout.width);
  for (int y = 0; y < layout.height; ++y) {
    for (int x = 0; x < layout.width; ++x) {
      if (layout.is_wall({x, y})) {
        grid(y, x) = -1.0;
      } else {
        grid(y, x) = max_count > 0 ? static_cast<double>(counts[y][x]) / static_cast<double>(max_count) : 0.0;
      }
    }
  }
  return grid;
}

void write_grid(std::ostream& out, const Matrix& grid) {
  out << std::setprecision(17);
  for (Eigen::Index y = 0; y < grid.rows(); ++y) {
    for (Eigen::Index x = 0; x < grid.cols(); ++x) out << (x ? "," : "") << grid(y, x);
    out << '\n';
  }
}

Matrix heatmap_for_run(const fs::path& run_dir) {
  const GridSpec layout = parse_layout(read_file(run_dir / "layout.txt"));
  const Matrix grid = heatmap(layout, read_int_grid(run_dir / "visitation.csv"));
  write_file(run_dir / "heatmap.csv", [&](std::ostream& o) { write_grid(o, grid); });
  return grid;
}

CompareMetric parse_metric(const std::string& s) {
  if (s == "auc") return CompareMetric::kAuc;
  if (s == "final") return CompareMetric::kFinal;
  if (s == "coverage") return CompareMetric::kCoverage;
  throw DomainError("unknown metric '" + s + "' (auc, final, coverage)");
}

std::string to_string(CompareMetric m) {
  switch (m) {
    case CompareMetric::kAuc: return "auc";
    case CompareMetric::kFinal: return "final";
    case CompareMetric::kCoverage: return "coverage";
  }
  return "?";
}

double curve_metric(const fs::path& record_csv, CompareMetric metric) {
  const Table t = read_csv(record_csv);
  if (t.rows.empty()) throw DomainError(record_csv.string() + " has no rows");
  if (metric == CompareMetric::kCoverage) return t.column("coverage").back();
  const bool agent = std::find(t.header.begin(), t.header.end(), "env_return_mean") != t.header.end();
  const std::vector<double> y = t.column(agent ? "env_return_mean" : "J");
  const std::size_t from = metric == CompareMetric::kAuc ? 0 : y.size() - std::max<std::size_t>(1, y.size() / 4);
  double s = 0.0;
  for (std::size_t i = from; i < y.size(); ++i) s += y[i];
  return s / static_cast<double>(y.size() - from);
}

CompareReport compare_runs(const fs::path& dir_a, const fs::path& dir_b, CompareMetric metric,
                           const std::string& group_a, const std::string& group_b) {
  auto collect = [&](const fs::path& dir, const std::string& group) {
    const ordered_json manifest = read_manifest(dir);
    std::set<std::string> groups;
    for (const auto& run : manifest["runs"]) groups.insert(run.at("group").get<std::string>());
    std::string chosen = group;
    if (chosen.empty()) {
      if (groups.size() != 1) throw UsageError(dir.string() + " holds several weight groups; pick one");
      chosen = *groups.begin();
    } else if (!groups.contains(chosen)) {
      throw UsageError(dir.string() + " has no group " + chosen);
    }
    std::map<std::uint64_t, double> values;
    for (const auto& run : manifest["runs"]) {
      if (run.at("group") != chosen) continue;
      if (run.at("status") != "ok") throw UsageError("run " + run.at("key").get<std::string>() + " failed");
      values[run.at("seed").get<std::uint64_t>()] =
          curve_metric(dir / "runs" / run.at("key").get<std::string>() / "record.csv", metric);
    }
    return values;
  };
  const auto a = collect(dir_a, group_a);
  const auto b = collect(dir_b, group_b);
  std::set<std::uint64_t> seeds_a;
  std::set<std::uint64_t> seeds_b;
  for (const auto& [s, v] : a) seeds_a.insert(s);
  for (const auto& [s, v] : b) seeds_b.insert(s);
  if (seeds_a != seeds_b) throw UsageError("compare: the two run sets use different seeds");

  CompareReport r;
  r.metric = metric;
  double gap = 0.0;
  for (const auto& [seed, va] : a) {
    const double vb = b.at(seed);
    r.seeds.push_back(seed);
    r.a.push_back(va);
    r.b.push_back(vb);
    if (va > vb) {
      ++r.wins_a;
    } else if (vb > va) {
      ++r.wins_b;
    } else {
      ++r.ties;
    }
    gap += va - vb;
  }
  r.median_a = median(r.a);
  r.median_b = median(r.b);
  r.median_gap = r.median_a - r.median_b;
  r.mean_gap = r.seeds.empty() ? 0.0 : gap / static_cast<double>(r.seeds.size());
  return r;
}

void write_report(std::ostream& out, const CompareReport& r) {
  out << "metric," << to_string(r.metric) << '\n' << "seed,a,b,gap\n" << std::setprecision(10);
  for (std::size_t i = 0; i < r.seeds.size(); ++i) {
    out << r.seeds[i] << ',' << r.a[i] << ',' << r.b[i] << ',' << r.a[i] - r.b[i] << '\n';
  }
  out << "median_a," << r.median_a << "\nmedian_b," << r.median_b << "\nmedian_gap," << r.median_gap
      << "\nmean_gap," << r.mean_gap << "\nwins_a," << r.wins_a << "\nwins_b," << r.wins_b << "\nties," << r.ties
      << '\n';
}

std::string sha256_file(const fs::path& path) { return sha256_bytes(read_file(path)); }

std::vector<double> Table::column(const std::string& name) const {
  const auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw DomainError("CSV has no column '" + name + "'");
  const auto idx = static_cast<std::size_t>(it - header.begin());
  std::vector<double> out;
  out.reserve(rows.size());
  for (const auto& row : rows) out.push_back(row.at(idx));
  return out;
}

Table read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  Table t;
  std::string line;
  if (!std::getline(in, line)) throw DomainError(path.string() + " is empty");
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) t.header.push_back(cell);
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(std::strtod(cell.c_str(), nullptr));
    if (row.size() != t.header.size()) throw DomainError(path.string() + ": ragged row");
    t.rows.push_back(std::move(row));
  }
  return t;
}

}  // namespace mselab
