#pragma once

// Configuration-driven experiment waterfall. Each stage writes CSV tables
// into the output directory; every table starts with a manifest comment
// naming the stage, seed and configuration digest, and a stage whose
// inputs are missing or stale recomputes them first.

#include <fmt/format.h>
#include <yaml-cpp/yaml.h>

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "bayesgrid/calibration.hpp"
#include "bayesgrid/grid.hpp"
#include "bayesgrid/io.hpp"
#include "bayesgrid/lgd.hpp"
#include "bayesgrid/loss.hpp"
#include "bayesgrid/parallel.hpp"
#include "bayesgrid/projection.hpp"
#include "bayesgrid/transition.hpp"

namespace bayesgrid::experiment {

namespace fs = std::filesystem;

/// How a low-dimensional model is initialized before calibration.
struct LowModelSetup {
  std::string name;
  /// 1-based factors of the high model copied as the starting point.
  std::vector<int> init_factors;
  /// Explicit starting parameters; takes precedence over init_factors.
  std::optional<TransitionModelParams> init;
};

struct DataSettings {
  int periods = 120;
  std::int64_t population = 10000;
  PopulationMode mode = PopulationMode::kFixedCohort;
};

struct ProjectionSettings {
  int scenarios = 100;
  double pseudo_count = 1e5;
  bool point_in_time = false;
  int pca_sample = 10000;
};

struct ConvergenceSettings {
  int start_points = 100;
  std::vector<int> budgets{500, 1000, 5000, 10000};
  int benchmark_paths = 20000;
  /// Budget whose curve is checked against the envelope.
  int envelope_budget = 1000;
  double envelope = 0.05;
  /// First period included in the envelope check.
  int envelope_from = 2;
};

struct GridSettings {
  int nodes_per_dim = 15;
  double span_sigmas = 4.0;
  int fill_points = 1000;
  int paths_per_point = 1000;
  IdwOptions interpolation{};
  int test_scenarios = 1000;
  int benchmark_paths = 20000;
};

struct ElgdSettings {
  std::vector<double> ltv0{0.8, 1.0, 1.5, 2.0};
  std::vector<double> lc0{-0.1, 0.0, 0.1};
  int periods = 30;
  long paths = 1000000;
};

struct LossSettings {
  long scenarios = 1000000;
  int benchmark_paths = 1000;
  std::vector<double> quantiles{0.95, 0.99, 0.999};
};

struct ExperimentConfig {
  std::string source_text;
  std::string digest;
  std::uint64_t seed = 0;
  int threads = 1;
  int desk_divisor = 1;

  TransitionModelParams high;
  std::vector<LowModelSetup> low_models{};
  CalibrationOptions calibration{};
  CollateralParams collateral{};
  LoanSpec loan{};

  DataSettings data{};
  ProjectionSettings projection{};
  ConvergenceSettings convergence{};
  GridSettings grid{};
  ElgdSettings elgd{};
  LossSettings loss{};

  /// Loss scenarios after the desk divisor.
  long loss_scenarios() const { return std::max<long>(1, loss.scenarios / desk_divisor); }
};

class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& cause)
      : std::runtime_error("stage '" + stage + "' failed: " + cause), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

// ---------------------------------------------------------------------------
// Configuration

namespace detail {

template <class T>
T get(const YAML::Node& node, const char* key, T fallback) {
  return node && node[key] ? node[key].as<T>() : fallback;
}

inline TransitionModelParams factor_subset(const TransitionModelParams& high, const std::vector<int>& factors) {
  const int d = static_cast<int>(factors.size());
  require(d >= 1 && d <= high.dim(), "low-model factor selection is empty or too large");
  const auto& s = high.state_space();
  Matrix a = Matrix::Zero(d, d), q = Matrix::Zero(d, d), k(high.loadings().rows(), d);
  for (int i = 0; i < d; ++i) {
    const int f = factors[i] - 1;
    require(f >= 0 && f < high.dim(), "low-model factor index out of range");
    for (int j = 0; j < d; ++j) {
      a(i, j) = s.transition()(f, factors[j] - 1);
      q(i, j) = s.process_noise()(f, factors[j] - 1);
    }
    k.col(i) = high.loadings().col(f);
  }
  return {high.num_ratings(), StateSpaceSpec(a, q, Vector::Zero(d), stationary_covariance(a, q)), k, high.levels()};
}

}  // namespace detail

inline ExperimentConfig parse_config(const std::string& text, std::optional<std::uint64_t> seed_override = {}) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw io::IoError(std::string("configuration is not valid YAML: ") + e.what());
  }
  using detail::get;
  ExperimentConfig cfg{.source_text = text,
                       .digest = io::sha256_hex(text),
                       .high = io::parse_transition_model(root["transition_high"], "transition_high")};
  if (seed_override) {
    cfg.seed = *seed_override;
  } else if (root["seed"]) {
    cfg.seed = root["seed"].as<std::uint64_t>();
  } else {
    throw ContractViolation("a seed is required (config 'seed' or --seed)");
  }
  cfg.desk_divisor = get<int>(root, "desk_divisor", 1);
  require(cfg.desk_divisor >= 1, "desk_divisor must be at least 1");

  for (const char* name : {"transition_low_2f", "transition_low_1f"}) {
    const YAML::Node node = root[name];
    if (!node) continue;
    LowModelSetup setup{name == std::string("transition_low_2f") ? "2f" : "1f", {}, {}};
    if (node["A"])
      setup.init = io::parse_transition_model(node, name);
    else
      setup.init_factors = node["init_factors"].as<std::vector<int>>();
    cfg.low_models.push_back(std::move(setup));
  }

  cfg.collateral = io::parse_collateral(root["collateral"]);

  if (const YAML::Node n = root["loan"]) {
    cfg.loan.maturity = get<int>(n, "maturity", cfg.loan.maturity);
    cfg.loan.horizon = get<int>(n, "horizon", cfg.loan.horizon);
    cfg.loan.coupon = get<double>(n, "coupon", cfg.loan.coupon);
    cfg.loan.principal = get<double>(n, "principal", cfg.loan.principal);
    cfg.loan.strict_pc_term = get<bool>(n, "strict_pc_term", cfg.loan.strict_pc_term);
    cfg.loan.ltv0 = get<double>(n, "ltv0", cfg.loan.ltv0);
    const std::string ead = get<std::string>(n, "ead", "bullet");
    if (ead == "linear")
      cfg.loan.ead_schedule = LgdContext::linear_amortization(cfg.loan.ltv0, cfg.loan.maturity).ead_schedule;
    else if (ead != "bullet")
      throw ContractViolation("loan.ead must be 'bullet' or 'linear'");
  }
  cfg.loan.validate();

  if (const YAML::Node n = root["grid"]) {
    auto& g = cfg.grid;
    g.nodes_per_dim = get<int>(n, "nodes_per_dim", g.nodes_per_dim);
    g.span_sigmas = get<double>(n, "span_sigmas", g.span_sigmas);
    g.fill_points = get<int>(n, "fill_points", g.fill_points);
    g.paths_per_point = get<int>(n, "paths_per_point", g.paths_per_point);
    g.interpolation.neighbors = get<int>(n, "neighbors", g.interpolation.neighbors);
    g.interpolation.power = get<double>(n, "power", g.interpolation.power);
    g.test_scenarios = get<int>(n, "test_scenarios", g.test_scenarios);
    g.benchmark_paths = get<int>(n, "benchmark_paths", g.benchmark_paths);
    require(g.nodes_per_dim >= 2 && g.paths_per_point >= 1 && g.test_scenarios >= 1 && g.benchmark_paths >= 1,
            "grid settings out of range");
  }

  const YAML::Node ex = root["experiments"];
  if (const YAML::Node n = ex["data"]) {
    cfg.data.periods = get<int>(n, "periods", cfg.data.periods);
    cfg.data.population = get<std::int64_t>(n, "population", cfg.data.population);
    const std::string mode = get<std::string>(n, "population_mode", "fixed_cohort");
    if (mode == "dynamic")
      cfg.data.mode = PopulationMode::kDynamic;
    else if (mode != "fixed_cohort")
      throw ContractViolation("population_mode must be 'fixed_cohort' or 'dynamic'");
    require(cfg.data.periods >= 1 && cfg.data.population >= 0, "data settings out of range");
  }
  if (const YAML::Node n = ex["calibration"]) {
    auto& c = cfg.calibration;
    c.max_iterations = get<int>(n, "max_iterations", c.max_iterations);
    c.gradient_tol = get<double>(n, "gradient_tol", c.gradient_tol);
    c.fd_step = get<double>(n, "fd_step", c.fd_step);
    c.free_noise_scale = get<bool>(n, "free_noise_scale", c.free_noise_scale);
  }
  if (const YAML::Node n = ex["projection"]) {
    auto& p = cfg.projection;
    p.scenarios = get<int>(n, "scenarios", p.scenarios);
    p.pseudo_count = get<double>(n, "pseudo_count", p.pseudo_count);
    const std::string init = get<std::string>(n, "initial", "ttc");
    if (init != "ttc" && init != "pit") throw ContractViolation("projection.initial must be 'ttc' or 'pit'");
    p.point_in_time = init == "pit";
    p.pca_sample = get<int>(n, "pca_sample", p.pca_sample);
    require(p.scenarios >= 1 && p.pca_sample >= 10 * cfg.high.dim(), "projection settings out of range");
  }
  if (const YAML::Node n = ex["convergence"]) {
    auto& c = cfg.convergence;
    c.start_points = get<int>(n, "start_points", c.start_points);
    c.budgets = get<std::vector<int>>(n, "budgets", c.budgets);
    c.benchmark_paths = get<int>(n, "benchmark_paths", c.benchmark_paths);
    c.envelope_budget = get<int>(n, "envelope_budget", c.envelope_budget);
    c.envelope = get<double>(n, "envelope", c.envelope);
    c.envelope_from = get<int>(n, "envelope_from", c.envelope_from);
    require(c.start_points >= 1 && c.benchmark_paths >= 1 && !c.budgets.empty(), "convergence settings out of range");
    for (int b : c.budgets) require(b >= 1 && b <= c.benchmark_paths, "budgets must lie in 1..benchmark_paths");
  }
  if (const YAML::Node n = ex["elgd"]) {
    auto& e = cfg.elgd;
    e.ltv0 = get<std::vector<double>>(n, "ltv0", e.ltv0);
    e.lc0 = get<std::vector<double>>(n, "lc0", e.lc0);
    e.periods = get<int>(n, "periods", e.periods);
    e.paths = get<long>(n, "paths", e.paths);
    require(e.paths >= 100 && e.periods >= 1, "ELGD settings out of range");
  }
  if (const YAML::Node n = ex["loss"]) {
    auto& l = cfg.loss;
    l.scenarios = get<long>(n, "scenarios", l.scenarios);
    l.benchmark_paths = get<int>(n, "benchmark_paths", l.benchmark_paths);
    l.quantiles = get<std::vector<double>>(n, "quantiles", l.quantiles);
    require(l.scenarios >= 1 && l.benchmark_paths >= 1, "loss settings out of range");
  }
  return cfg;
}

inline ExperimentConfig load_config(const fs::path& path, std::optional<std::uint64_t> seed_override = {}) {
  return parse_config(io::read_text(path), seed_override);
}

// ---------------------------------------------------------------------------
// Stage plumbing

inline const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names{"data", "calibrate", "projection", "convergence", "grid", "elgd", "loss"};
  return names;
}

/// Decorrelated per-stage seed (splitmix64 finalizer).
inline std::uint64_t stage_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

enum : std::uint64_t {
  kSaltData = 1,
  kSaltPca = 2,
  kSaltProjection = 3,
  kSaltConvergence = 4,
  kSaltGrid = 5,
  kSaltGridTest = 6,
  kSaltElgd = 7,
  kSaltLoss = 8,
};

/// Names of the four projection methods compared in the waterfall.
struct MethodSpec {
  std::string name;
  std::string low_model;  // "2f" / "1f"
  bool bayesian;
};

inline std::vector<MethodSpec> method_specs(const ExperimentConfig& cfg) {
  std::vector<MethodSpec> out;
  for (const auto& low : cfg.low_models) {
    const int dim = low.init ? low.init->dim() : static_cast<int>(low.init_factors.size());
    out.push_back({"bayes_" + low.name, low.name, true});
    out.push_back({fmt::format("pca_{}", dim), low.name, false});
  }
  return out;
}

class Waterfall {
 public:
  Waterfall(ExperimentConfig config, fs::path out_dir) : cfg_(std::move(config)), out_(std::move(out_dir)) {
    fs::create_directories(out_);
  }

  const ExperimentConfig& config() const { return cfg_; }
  const fs::path& out_dir() const { return out_; }

  std::string manifest(const std::string& stage) const {
    return fmt::format("stage={} seed={} config_sha256={}", stage, cfg_.seed, cfg_.digest);
  }

  /// Runs a stage (or "all") and its stale dependencies.
  void run(const std::string& stage) {
    if (stage == "all") {
      for (const auto& s : stage_names()) run(s);
      return;
    }
    const auto& names = stage_names();
    if (std::find(names.begin(), names.end(), stage) == names.end())
      throw ContractViolation("unknown stage '" + stage + "'");
    guarded(stage, [&] { execute(stage); });
    done_.insert(stage);
  }

  // Stage products, recomputed or loaded on demand.

  const MigrationCounts& migrations() {
    if (!migrations_) {
      ensure("data", {"migrations.csv"});
      migrations_ = io::read_migrations(out_ / "migrations.csv", cfg_.high.num_ratings());
    }
    return *migrations_;
  }

  const TransitionModelParams& low_model(const std::string& name) {
    auto it = low_params_.find(name);
    if (it != low_params_.end()) return it->second;
    const fs::path file = out_ / ("model_" + name + ".yaml");
    ensure("calibrate", {file.filename().string()});
    YAML::Node node = YAML::LoadFile(file.string());
    return low_params_.emplace(name, io::parse_transition_model(node, name)).first->second;
  }

  const PcaBasis& pca_basis(int components) {
    auto it = pca_.find(components);
    if (it != pca_.end()) return it->second;
    const std::uint64_t seed = stage_seed(cfg_.seed, kSaltPca);
    std::vector<FactorPath> sample(cfg_.projection.pca_sample);
    parallel_for(sample.size(), cfg_.threads, [&](std::size_t i) {
      RngStream rng(seed, StreamTag::kPcaSample, i);
      FactorPath p = simulate_factors(cfg_.high, 1, StationaryDraw{}, rng);
      p.values.resize(1);
      sample[i] = std::move(p);
    });
    return pca_.emplace(components, pca_fit(sample, components)).first->second;
  }

  LowMethod method(const MethodSpec& spec) {
    const TransitionModelParams& low = low_model(spec.low_model);
    if (!spec.bayesian) return PcaMethod{pca_basis(low.dim())};
    GaussianBelief initial = through_the_cycle_initial(low);
    if (cfg_.projection.point_in_time) {
      const auto estimate = approximate_log_likelihood(low, migrations(), cfg_.calibration.mode);
      initial = point_in_time_initial(estimate.smoothed.back().mean);
    }
    return BayesianMethod{ProjectionProblem{cfg_.high, low, initial, cfg_.loan.horizon, cfg_.projection.pseudo_count,
                                            cfg_.calibration.mode}};
  }

  const ValuationGrid& grid(const MethodSpec& spec) {
    auto it = grids_.find(spec.name);
    if (it != grids_.end()) return it->second;
    const auto [points, targets] = grid_files(spec.name);
    ensure("grid", {points, targets});
    ValuationGrid g = io::read_grid(out_ / points, out_ / targets);
    g.interpolation = cfg_.grid.interpolation;
    return grids_.emplace(spec.name, std::move(g)).first->second;
  }

  static std::pair<std::string, std::string> grid_files(const std::string& method) {
    return {"grid_" + method + "_points.csv", "grid_" + method + "_targets.csv"};
  }

 private:
  template <class F>
  void guarded(const std::string& stage, F&& f) {
    try {
      f();
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(stage, e.what());
    }
  }

  bool current(const fs::path& file) const {
    if (!fs::exists(file)) return false;
    std::ifstream in(file);
    std::string first;
    std::getline(in, first);
    return first.find(fmt::format("seed={} config_sha256={}", cfg_.seed, cfg_.digest)) != std::string::npos;
  }

  /// Runs `stage` unless it already ran here or all its files are current.
  void ensure(const std::string& stage, const std::vector<std::string>& files) {
    if (done_.count(stage)) return;
    for (const auto& f : files)
      if (!current(out_ / f)) {
        run(stage);
        return;
      }
  }

  void execute(const std::string& stage) {
    const auto start = std::chrono::steady_clock::now();
    std::vector<std::string> files;
    if (stage == "data") files = stage_data();
    if (stage == "calibrate") files = stage_calibrate();
    if (stage == "projection") files = stage_projection();
    if (stage == "convergence") files = stage_convergence();
    if (stage == "grid") files = stage_grid();
    if (stage == "elgd") files = stage_elgd();
    if (stage == "loss") files = stage_loss();
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::string list;
    for (std::size_t i = 0; i < files.size(); ++i) list += fmt::format("{}\"{}\"", i ? ", " : "", files[i]);
    std::ofstream json(out_ / ("manifest_" + stage + ".json"), std::ios::trunc);
    json << fmt::format(
        "{{\n  \"stage\": \"{}\",\n  \"seed\": {},\n  \"config_sha256\": \"{}\",\n  \"wall_seconds\": {:.3f},\n  "
        "\"files\": [{}]\n}}\n",
        stage, cfg_.seed, cfg_.digest, seconds, list);
  }

  std::vector<std::string> stage_data() {
    const std::uint64_t seed = stage_seed(cfg_.seed, kSaltData);
    RngStream factor_rng(seed, StreamTag::kFactorPath, 0);
    const FactorPath path = simulate_factors(cfg_.high, cfg_.data.periods, StationaryDraw{}, factor_rng);
    std::vector<std::int64_t> population(cfg_.high.num_ratings(), cfg_.data.population);
    population.back() = 0;
    RngStream migration_rng(seed, StreamTag::kMigration, 0);
    MigrationCounts counts = simulate_migrations(cfg_.high, path, population, migration_rng, cfg_.data.mode);
    io::write_migrations(out_ / "migrations.csv", manifest("data"), counts);

    std::vector<std::string> header{"period"};
    for (int l = 0; l < cfg_.high.dim(); ++l) header.push_back(fmt::format("x_{}", l + 1));
    io::CsvWriter csv(out_ / "factor_path.csv", manifest("data"), header);
    for (int k = 0; k <= path.periods(); ++k) {
      std::vector<std::string> row{std::to_string(k)};
      for (int l = 0; l < cfg_.high.dim(); ++l) row.push_back(io::number(path.values[k](l)));
      csv.row(row);
    }
    csv.close();
    migrations_ = std::move(counts);
    return {"migrations.csv", "factor_path.csv"};
  }

  std::vector<std::string> stage_calibrate() {
    const MigrationCounts& counts = migrations();
    std::vector<std::string> files{"calibration.csv"};
    io::CsvWriter csv(out_ / "calibration.csv", manifest("calibrate"),
                      {"model", "dim", "loglik", "iterations", "evaluations"});
    for (const auto& setup : cfg_.low_models) {
      const TransitionModelParams init =
          setup.init ? *setup.init : detail::factor_subset(cfg_.high, setup.init_factors);
      const CalibrationResult result = calibrate(counts, init.dim(), init, cfg_.calibration);
      const std::string file = "model_" + setup.name + ".yaml";
      std::ofstream yaml(out_ / file, std::ios::binary | std::ios::trunc);
      yaml << "# " << manifest("calibrate") << '\n' << io::format_transition_model(result.params);
      yaml.close();
      if (!yaml) throw io::IoError("failed writing " + file);
      csv.row({setup.name, std::to_string(init.dim()), io::number(result.loglik), std::to_string(result.iterations),
               std::to_string(result.evaluations)});
      low_params_.insert_or_assign(setup.name, result.params);
      files.push_back(file);
    }
    csv.close();
    return files;
  }

  std::vector<std::string> stage_projection() {
    const int n = cfg_.projection.scenarios;
    const int h = cfg_.loan.horizon;
    const std::uint64_t seed = stage_seed(cfg_.seed, kSaltProjection);
    std::vector<FactorPath> paths(n);
    for (int s = 0; s < n; ++s) {
      RngStream rng(seed, StreamTag::kScenario, s);
      paths[s] = simulate_factors(cfg_.high, h + 1, StationaryDraw{}, rng);
    }
    const int def = cfg_.high.default_rating();
    std::vector<std::string> files{"projection_errors.csv"};
    io::CsvWriter errors(out_ / "projection_errors.csv", manifest("projection"),
                         {"scenario", "k", "method", "rel_error", "entrywise_rel_error", "row1_entrywise_rel_error"});
    for (const auto& spec : method_specs(cfg_)) {
      const LowMethod m = method(spec);
      const int dim = low_dimension(m);
      // coords[s][k-1], transition matrices implied by the method at k = 1..h.
      std::vector<std::vector<Vector>> coords(n);
      std::vector<std::vector<TransitionMatrix>> implied(n);
      parallel_for(n, cfg_.threads, [&](std::size_t s) {
        if (const auto* b = std::get_if<BayesianMethod>(&m)) {
          const FactorPath low = project_bayesian(b->problem, paths[s]);
          for (int k = 1; k <= h; ++k) {
            coords[s].push_back(low.values[k]);
            implied[s].push_back(transition_matrix(b->problem.low, low.values[k]));
          }
        } else {
          const auto& basis = std::get<PcaMethod>(m).basis;
          const PcaProjection p = project_pca(basis, paths[s]);
          for (int k = 1; k <= h; ++k) {
            coords[s].push_back(p.scores.values[k]);
            implied[s].push_back(transition_matrix(cfg_.high, p.reconstructed.values[k]));
          }
        }
      });
      std::vector<std::string> header{"scenario", "k"};
      for (int c = 0; c < dim; ++c) header.push_back(fmt::format("coord_{}", c + 1));
      header.push_back("method");
      const std::string file = "projection_" + spec.name + ".csv";
      io::CsvWriter csv(out_ / file, manifest("projection"), header);
      for (int s = 0; s < n; ++s)
        for (int k = 1; k <= h; ++k) {
          std::vector<std::string> row{std::to_string(s), std::to_string(k)};
          for (int c = 0; c < dim; ++c) row.push_back(io::number(coords[s][k - 1](c)));
          row.push_back(spec.name);
          csv.row(row);
          const TransitionMatrix truth = transition_matrix(cfg_.high, paths[s].values[k]);
          const TransitionMatrix& approx = implied[s][k - 1];
          errors.row({std::to_string(s), std::to_string(k), spec.name,
                      io::number(relative_matrix_error(approx, truth, def)),
                      io::number(relative_transition_error(approx, truth, def)),
                      io::number(relative_transition_error(approx, truth, def, 0))});
        }
      csv.close();
      files.push_back(file);
    }
    errors.close();
    return files;
  }

  std::vector<std::string> stage_convergence() {
    const auto& c = cfg_.convergence;
    const std::uint64_t seed = stage_seed(cfg_.seed, kSaltConvergence);
    const int n = cfg_.loan.maturity;
    const int perf = cfg_.high.default_rating();
    std::vector<Vector> starts(c.start_points);
    for (int p = 0; p < c.start_points; ++p) {
      RngStream rng(seed, StreamTag::kGridStart, p);
      starts[p] = simulate_factors(cfg_.high, 1, StationaryDraw{}, rng).values[0];
    }
    // Budgets reuse the first paths of the benchmark stream.
    std::vector<int> budgets = c.budgets;
    std::vector<std::vector<Matrix>> curves(c.start_points);  // [point][budget index], last = benchmark
    parallel_for(starts.size(), cfg_.threads, [&](std::size_t p) {
      for (int b : budgets) {
        RngStream rng(seed, StreamTag::kBenchmark, p);
        curves[p].push_back(expected_pd_curves(cfg_.high, starts[p], n, b, rng));
      }
      RngStream rng(seed, StreamTag::kBenchmark, p);
      curves[p].push_back(expected_pd_curves(cfg_.high, starts[p], n, c.benchmark_paths, rng));
    });
    io::CsvWriter csv(out_ / "convergence.csv", manifest("convergence"), {"budget", "rating", "k", "max_rel_diff"});
    for (std::size_t b = 0; b < budgets.size(); ++b)
      for (int r = 0; r < perf; ++r)
        for (int k = 0; k < n; ++k) {
          double worst = 0.0;
          for (std::size_t p = 0; p < starts.size(); ++p) {
            const double bench = curves[p].back()(r, k);
            if (bench > 0.0) worst = std::max(worst, std::abs(curves[p][b](r, k) - bench) / bench);
          }
          csv.row({std::to_string(budgets[b]), std::to_string(r + 1), std::to_string(k + 1), io::number(worst)});
        }
    csv.close();
    return {"convergence.csv"};
  }

  std::vector<std::string> stage_grid() {
    const auto& gs = cfg_.grid;
    const std::uint64_t seed = stage_seed(cfg_.seed, kSaltGrid);
    const GridSpec spec = GridSpec::sigma_span(cfg_.high, gs.nodes_per_dim, gs.span_sigmas, gs.fill_points);
    const auto starts = grid_start_points(spec, cfg_.high, seed);
    const auto targets =
        simulate_grid_targets(cfg_.high, starts, cfg_.loan.maturity, gs.paths_per_point, seed, cfg_.threads);
    std::vector<std::string> files;
    const auto specs = method_specs(cfg_);
    for (const auto& ms : specs) {
      ValuationGrid g = assemble_grid(method(ms), starts, targets, cfg_.high.default_rating(), cfg_.threads);
      g.interpolation = gs.interpolation;
      const auto [points, targets_file] = grid_files(ms.name);
      io::write_grid(out_ / points, out_ / targets_file, manifest("grid"), g);
      files.push_back(points);
      files.push_back(targets_file);
      grids_.insert_or_assign(ms.name, std::move(g));
    }

    // Accuracy against direct Monte Carlo at fresh horizon states.
    const std::uint64_t test_seed = stage_seed(cfg_.seed, kSaltGridTest);
    const int h = cfg_.loan.horizon;
    const int n = cfg_.loan.maturity;
    const int perf = cfg_.high.default_rating();
    const int tests = gs.test_scenarios;
    std::vector<FactorPath> paths(tests);
    std::vector<Matrix> bench(tests);
    parallel_for(tests, cfg_.threads, [&](std::size_t s) {
      RngStream rng(test_seed, StreamTag::kTestPoint, s);
      paths[s] = simulate_factors(cfg_.high, h + 1, StationaryDraw{}, rng);
      RngStream mc(test_seed, StreamTag::kBenchmark, s);
      bench[s] = expected_pd_curves(cfg_.high, paths[s].values[h], n, gs.benchmark_paths, mc);
    });
    io::CsvWriter csv(out_ / "epd_accuracy.csv", manifest("grid"), {"method", "rating", "k", "avg_rel_error"});
    for (const auto& ms : specs) {
      const LowMethod m = method(ms);
      const ValuationGrid& g = grids_.at(ms.name);
      std::vector<Matrix> err(tests, Matrix::Zero(perf, n));
      parallel_for(tests, cfg_.threads, [&](std::size_t s) {
        const Vector coords = project_path(m, paths[s], h);
        for (int r = 0; r < perf; ++r) {
          const auto q = query_grid(g, coords, r);
          for (int k = 0; k < n; ++k)
            if (bench[s](r, k) > 0.0) err[s](r, k) = std::abs(q[k] - bench[s](r, k)) / bench[s](r, k);
        }
      });
      Matrix avg = Matrix::Zero(perf, n);
      for (const auto& e : err) avg += e;
      avg /= tests;
      for (int r = 0; r < perf; ++r)
        for (int k = 0; k < n; ++k)
          csv.row({ms.name, std::to_string(r + 1), std::to_string(k + 1), io::number(avg(r, k))});
    }
    csv.close();
    files.push_back("epd_accuracy.csv");
    return files;
  }

  std::vector<std::string> stage_elgd() {
    const auto& e = cfg_.elgd;
    const std::uint64_t seed = stage_seed(cfg_.seed, kSaltElgd);
    std::vector<double> strikes;
    for (double ltv : e.ltv0) strikes.push_back(1.0 / ltv);
    io::CsvWriter csv(out_ / "elgd.csv", manifest("elgd"), {"t", "ltv0", "lc0", "elgd_closed", "elgd_mc", "se"});
    std::vector<std::vector<std::vector<MonteCarloEstimate>>> mc(e.lc0.size());
    parallel_for(e.lc0.size(), cfg_.threads, [&](std::size_t i) {
      CollateralParams p = cfg_.collateral;
      p.initial_log_return = e.lc0[i];
      RngStream rng(seed, StreamTag::kCollateral, i);
      mc[i] = elgd_monte_carlo_grid(p, strikes, e.periods, e.paths, rng);
    });
    for (std::size_t i = 0; i < e.lc0.size(); ++i) {
      CollateralParams p = cfg_.collateral;
      p.initial_log_return = e.lc0[i];
      for (std::size_t s = 0; s < strikes.size(); ++s)
        for (int t = 1; t <= e.periods; ++t) {
          const auto& est = mc[i][s][t - 1];
          csv.row({std::to_string(t), io::number(e.ltv0[s]), io::number(e.lc0[i]),
                   io::number(elgd_closed_form(p, strikes[s], t)), io::number(est.estimate),
                   io::number(est.std_error)});
        }
    }
    csv.close();
    return {"elgd.csv"};
  }

  std::vector<std::string> stage_loss() {
    const long n = cfg_.loss_scenarios();
    ScenarioSettings settings{StationaryDraw{}, stage_seed(cfg_.seed, kSaltLoss), cfg_.threads};
    std::vector<std::string> files;
    auto write_losses = [&](const std::string& name, const LossDistribution& dist) {
      const std::string file = "loss_" + name + ".csv";
      io::CsvWriter csv(out_ / file, manifest("loss"), {"scenario", "rating", "loss"});
      for (std::size_t s = 0; s < dist.scenarios(); ++s)
        for (std::size_t r = 0; r < dist.ratings.size(); ++r)
          csv.row({std::to_string(s), std::to_string(dist.ratings[r] + 1), io::number(dist.losses[r][s])});
      csv.close();
      files.push_back(file);
    };
    const LossDistribution bench = build_loss_distribution(
        cfg_.loan, DirectEpdSource{cfg_.loss.benchmark_paths}, cfg_.high, cfg_.collateral, static_cast<int>(n), settings);
    write_losses("benchmark", bench);
    const auto bench_metrics = risk_metrics(bench, cfg_.loss.quantiles);

    io::CsvWriter csv(out_ / "metrics.csv", manifest("loss"),
                      {"rating", "metric", "method", "value", "rel_diff_vs_benchmark"});
    auto emit = [&](const std::string& method, const std::vector<RatingMetrics>& metrics) {
      for (std::size_t r = 0; r < metrics.size(); ++r) {
        auto row = [&](const std::string& metric, double value, double reference) {
          const double rel = reference != 0.0 ? std::abs(value - reference) / std::abs(reference) : 0.0;
          csv.row({std::to_string(metrics[r].rating + 1), metric, method, io::number(value), io::number(rel)});
        };
        row("EL", metrics[r].expected_loss, bench_metrics[r].expected_loss);
        for (std::size_t q = 0; q < metrics[r].var.size(); ++q)
          row(fmt::format("VaR{:g}", std::round(metrics[r].var[q].first * 1000.0) / 10.0), metrics[r].var[q].second,
              bench_metrics[r].var[q].second);
      }
    };
    emit("benchmark", bench_metrics);
    for (const auto& ms : method_specs(cfg_)) {
      const LowMethod m = method(ms);
      const ValuationGrid& g = grid(ms);
      const LossDistribution dist = build_loss_distribution(cfg_.loan, GridEpdSource{&g, m}, cfg_.high,
                                                            cfg_.collateral, static_cast<int>(n), settings);
      write_losses(ms.name, dist);
      emit(ms.name, risk_metrics(dist, cfg_.loss.quantiles));
    }
    csv.close();
    files.push_back("metrics.csv");
    return files;
  }

  ExperimentConfig cfg_;
  fs::path out_;
  std::set<std::string> done_;
  std::optional<MigrationCounts> migrations_;
  std::map<std::string, TransitionModelParams> low_params_;
  std::map<int, PcaBasis> pca_;
  std::map<std::string, ValuationGrid> grids_;
};

/// Runs the selected stage ("all" for the full waterfall).
inline void run_waterfall(const ExperimentConfig& config, const std::string& stage, const fs::path& out_dir) {
  Waterfall(config, out_dir).run(stage);
}

}  // namespace bayesgrid::experiment
