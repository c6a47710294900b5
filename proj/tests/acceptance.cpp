// End-to-end acceptance run: executes the desk waterfall and prints one
// PASS/FAIL line per criterion. Exits 0 whenever the run itself completes;
// the verdicts are in the output.

#include <CLI11.hpp>
#include <fmt/core.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>

#include "bayesgrid/experiment.hpp"
#include "bayesgrid/reference_models.hpp"
#include "oracles.hpp"

using namespace bayesgrid;
using namespace bayesgrid::experiment;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances.
constexpr double kElgdSigmas = 3.0;
constexpr double kElgdCoverage = 0.99;
constexpr double kElgdSeconds = 120.0;
constexpr double kOracleTol = 1e-4;
constexpr double kModeTol = 1e-3;
constexpr double kOracleSeconds = 30.0;
constexpr double kRowSumTol = 1e-12;
constexpr int kRandomFactors = 10000;
constexpr double kProjectionSeconds = 600.0;
constexpr double kRowOneShare = 0.6;
constexpr int kConvergenceSeeds = 5;
constexpr double kPairedT = 2.132;  // one-sided 5%, 4 degrees of freedom
constexpr double kGeometricTol = 1e-12;
constexpr double kMomentSigmas = 3.0;
constexpr int kMomentPaths = 1000000;
constexpr long kVar999MinScenarios = 100000;

int passed = 0;

void verdict(int id, bool ok, const std::string& what) {
  passed += ok;
  fmt::print("{} criterion {}: {}\n", ok ? "PASS" : "FAIL", id, what);
  std::fflush(stdout);
}

double seconds_since(std::chrono::steady_clock::time_point t) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

double timed(const std::function<void()>& f) {
  const auto t = std::chrono::steady_clock::now();
  f();
  return seconds_since(t);
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// ---------------------------------------------------------------------------

void criterion_elgd(const fs::path& dir, double secs) {
  const auto t = io::read_csv(dir / "elgd.csv");
  const auto cc = t.column("elgd_closed"), cm = t.column("elgd_mc"), cs = t.column("se");
  int within = 0;
  for (const auto& r : t.rows)
    within += std::abs(io::to_double(r[cc]) - io::to_double(r[cm])) <= kElgdSigmas * io::to_double(r[cs]);
  const double share = t.rows.empty() ? 0.0 : static_cast<double>(within) / t.rows.size();
  verdict(1, t.rows.size() == 360 && share >= kElgdCoverage && secs <= kElgdSeconds,
          fmt::format("ELGD closed form within 3 SE of MC at {}/{} points ({:.1f}%), {:.1f} s", within, t.rows.size(),
                      100 * share, secs));
}

Matrix scalar(double v) { return Matrix::Constant(1, 1, v); }

void criterion_oracles() {
  const auto start = std::chrono::steady_clock::now();
  double worst = 0.0;
  const std::vector<oracle::ScalarModel> fixtures{{0.9, 0.1, 1.0, 0.2, 0.0, 0.1 / 0.19}, {-0.5, 0.3, 1.4, 0.6, 0.5, 0.3}};
  for (std::size_t f = 0; f < fixtures.size(); ++f) {
    const auto& m = fixtures[f];
    RngStream rng(31 + f, StreamTag::kGeneric, 0);
    double x = m.m0 + std::sqrt(m.p0) * rng.normal();
    std::vector<double> ys;
    std::vector<LinearObservation> obs;
    for (int k = 0; k < 10; ++k) {
      x = m.a * x + std::sqrt(m.q) * rng.normal();
      ys.push_back(m.h * x + std::sqrt(m.r) * rng.normal());
      obs.push_back({scalar(m.h), scalar(m.r), Vector::Constant(1, ys.back())});
    }
    const StateSpaceSpec spec(scalar(m.a), scalar(m.q), Vector::Constant(1, m.m0), scalar(m.p0));
    const auto ref = oracle::discretized_bayes(m, ys, -10.0, 10.0);
    const auto steps = kalman_filter(obs, spec);
    const auto smooth = rts_smoother(steps, spec);
    for (std::size_t k = 0; k < ys.size(); ++k) {
      worst = std::max(worst, std::abs(steps[k].filtered.mean(0) - ref.filtered_mean[k]));
      worst = std::max(worst, std::abs(smooth[k].mean(0) - ref.smoothed_mean[k]));
    }
  }

  const double a = 0.8, q = 0.36;
  Matrix k = Matrix::Zero(4, 1);
  k(1, 0) = 0.8;
  Matrix g(2, 2);
  g << 0.9, 0.1, 0.0, 1.0;
  const TransitionModelParams params(2, StateSpaceSpec(scalar(a), scalar(q), Vector::Zero(1), scalar(q / (1 - a * a))),
                                     k, g);
  const std::vector<std::pair<double, double>> counts{{45, 5}, {38, 12}, {49, 1}, {30, 20}, {44, 6}};
  std::vector<MultinomialLogitObservation> models;
  std::vector<std::function<double(double)>> log_obs;
  for (auto [stay, move] : counts) {
    Matrix c = Matrix::Zero(2, 2);
    c(0, 0) = stay;
    c(0, 1) = move;
    models.emplace_back(params, c);
    log_obs.push_back([stay, move](double x) {
      const double w = 0.1 * std::exp(0.8 * x);
      const double p = w / (0.9 + w);
      return oracle::multinomial_log_pmf({stay, move}, {1 - p, p});
    });
  }
  const auto est = mode_estimate(models, params.state_space(), {1e-10, 50, {}});
  const auto ref = oracle::path_mode(a, q, 0.0, q / (1 - a * a), log_obs);
  double mode_err = 0.0;
  for (std::size_t t = 0; t < counts.size(); ++t) mode_err = std::max(mode_err, std::abs(est.smoothed[t].mean(0) - ref[t]));
  const double secs = seconds_since(start);
  verdict(2, worst <= kOracleTol && mode_err <= kModeTol && secs <= kOracleSeconds,
          fmt::format("filter/smoother max |diff| vs grid oracle {:.2e}, mode max |diff| {:.2e}, {:.1f} s", worst,
                      mode_err, secs));
}

void criterion_transition_identities() {
  const auto params = benchmark_four_factor_model();
  const int r = params.num_ratings();
  double worst_sum = 0.0;
  bool default_ok = true;
  RngStream rng(11, StreamTag::kGeneric, 0);
  for (int i = 0; i < kRandomFactors; ++i) {
    Vector x(params.dim());
    for (int l = 0; l < x.size(); ++l) x(l) = 3.0 * rng.normal();
    const TransitionMatrix t = transition_matrix(params, x);
    for (int row = 0; row < r; ++row) worst_sum = std::max(worst_sum, std::abs(t.row(row).sum() - 1.0));
    for (int j = 0; j < r; ++j) default_ok &= t(r - 1, j) == (j == r - 1 ? 1.0 : 0.0);
  }
  const TransitionMatrix at_zero = transition_matrix(params, Vector::Zero(params.dim()));
  Matrix g = params.levels();
  for (int row = 0; row < r; ++row) g.row(row) /= g.row(row).sum();
  const double zero_err = (at_zero - g).cwiseAbs().maxCoeff();
  verdict(3, worst_sum <= kRowSumTol && default_ok && zero_err <= kRowSumTol,
          fmt::format("{} random x: max |row sum - 1| {:.1e}, absorbing default {}, T(0) vs G {:.1e}", kRandomFactors,
                      worst_sum, default_ok ? "exact" : "violated", zero_err));
}

// Per-scenario errors from projection_errors.csv keyed by method.
std::map<std::string, std::vector<double>> projection_column(const fs::path& dir, const std::string& column) {
  const auto t = io::read_csv(dir / "projection_errors.csv");
  const auto cm = t.column("method"), cv = t.column(column);
  std::map<std::string, std::vector<double>> out;
  for (const auto& r : t.rows) out[r[cm]].push_back(io::to_double(r[cv]));
  return out;
}

void criterion_projection(const fs::path& dir, double secs) {
  const auto entry = projection_column(dir, "entrywise_rel_error");
  const auto frob = projection_column(dir, "rel_error");
  const double be = median(entry.at("bayes_2f")), pe = median(entry.at("pca_2"));
  const double bf = median(frob.at("bayes_2f")), pf = median(frob.at("pca_2"));
  verdict(4, be < pe && bf < pf && secs <= kProjectionSeconds,
          fmt::format("median rel T error over {} scenarios: entrywise bayes_2f {:.4f} vs pca_2 {:.4f}, "
                      "Frobenius {:.4f} vs {:.4f}, {:.0f} s incl. calibration",
                      entry.at("bayes_2f").size(), be, pe, bf, pf, secs));

  const auto row1 = projection_column(dir, "row1_entrywise_rel_error");
  const auto& b1 = row1.at("bayes_1f");
  const auto& p1 = row1.at("pca_1");
  int wins = 0;
  for (std::size_t s = 0; s < b1.size(); ++s) wins += b1[s] < p1[s];
  const bool ok = wins >= kRowOneShare * b1.size();
  fmt::print("{} property: bayes_1f row-1 error below pca_1 in {}/{} scenarios (need {:.0f}%)\n", ok ? "PASS" : "FAIL",
             wins, b1.size(), 100 * kRowOneShare);
}

void criterion_epd(const fs::path& dir) {
  const auto t = io::read_csv(dir / "epd_accuracy.csv");
  const auto cm = t.column("method"), cr = t.column("rating"), ck = t.column("k"), ce = t.column("avg_rel_error");
  std::map<std::pair<long long, long long>, std::map<std::string, double>> err;
  for (const auto& r : t.rows) err[{io::to_int(r[cr]), io::to_int(r[ck])}][r[cm]] = io::to_double(r[ce]);
  bool ok = true;
  std::string detail;
  for (long long rating = 1; rating <= 3; ++rating)
    for (long long k : {5, 10, 20, 30}) {
      const auto& e = err.at({rating, k});
      const bool win = e.at("bayes_2f") < e.at("pca_2");
      ok &= win;
      if (!win) detail += fmt::format(" r{}k{} {:.4f}>={:.4f}", rating, k, e.at("bayes_2f"), e.at("pca_2"));
    }
  verdict(5, ok, ok ? "bayes_2f grid beats pca_2 for every rating at k = 5, 10, 20, 30"
                    : "bayes_2f grid not below pca_2 at" + detail);
}

void criterion_risk(const fs::path& dir, long scenarios) {
  const auto t = io::read_csv(dir / "metrics.csv");
  const auto cr = t.column("rating"), cm = t.column("metric"), cd = t.column("method"),
             cv = t.column("rel_diff_vs_benchmark");
  std::map<std::pair<std::string, std::string>, std::map<std::string, double>> diff;
  for (const auto& r : t.rows) diff[{r[cr], r[cm]}][r[cd]] = io::to_double(r[cv]);
  std::vector<std::string> metrics{"EL", "VaR95", "VaR99"};
  if (scenarios >= kVar999MinScenarios) metrics.push_back("VaR99.9");
  bool ok = true;
  std::string detail;
  for (const std::string rating : {"1", "2", "3"})
    for (const auto& m : metrics) {
      const auto& d = diff.at({rating, m});
      const bool win = d.at("bayes_2f") < d.at("pca_2");
      ok &= win;
      detail += fmt::format(" r{}:{} {:.4f}{}{:.4f}", rating, m, d.at("bayes_2f"), win ? "<" : ">=", d.at("pca_2"));
    }
  verdict(6, ok, fmt::format("{} scenarios, bayes_2f vs pca_2 rel diff:{}", scenarios, detail));
}

// Mean over ratings and periods >= from of the per-point max relative
// difference, plus the max, keyed by budget.
struct ConvergenceSummary {
  std::map<int, double> mean, max;
};

ConvergenceSummary summarize_convergence(const fs::path& dir, int from) {
  const auto t = io::read_csv(dir / "convergence.csv");
  const auto cb = t.column("budget"), ck = t.column("k"), cd = t.column("max_rel_diff");
  ConvergenceSummary s;
  std::map<int, int> count;
  for (const auto& r : t.rows) {
    if (io::to_int(r[ck]) < from) continue;
    const int b = static_cast<int>(io::to_int(r[cb]));
    const double v = io::to_double(r[cd]);
    s.mean[b] += v;
    ++count[b];
    s.max[b] = std::max(s.max[b], v);
  }
  for (auto& [b, v] : s.mean) v /= count[b];
  return s;
}

void criterion_convergence(const ExperimentConfig& cfg, const fs::path& root, const fs::path& main_run) {
  const auto& c = cfg.convergence;
  std::vector<ConvergenceSummary> seeds{summarize_convergence(main_run, c.envelope_from)};
  for (int i = 1; i < kConvergenceSeeds; ++i) {
    const auto dir = root / fmt::format("convergence_seed{}", i);
    auto seeded = parse_config(cfg.source_text, cfg.seed + i);
    seeded.threads = cfg.threads;
    Waterfall(seeded, dir).run("convergence");
    seeds.push_back(summarize_convergence(dir, c.envelope_from));
  }
  bool ok = true;
  std::string detail;
  for (std::size_t b = 0; b + 1 < c.budgets.size(); ++b) {
    std::vector<double> d;
    for (const auto& s : seeds) d.push_back(s.mean.at(c.budgets[b]) - s.mean.at(c.budgets[b + 1]));
    double mean = 0.0, var = 0.0;
    for (double v : d) mean += v / d.size();
    for (double v : d) var += (v - mean) * (v - mean) / (d.size() - 1);
    const double t = var > 0.0 ? mean / std::sqrt(var / d.size()) : (mean > 0.0 ? INFINITY : 0.0);
    ok &= t > kPairedT;
    detail += fmt::format(" {}->{} t={:.1f};", c.budgets[b], c.budgets[b + 1], t);
  }
  double envelope_worst = 0.0;
  for (const auto& s : seeds) envelope_worst = std::max(envelope_worst, s.max.at(c.envelope_budget));
  ok &= envelope_worst <= c.envelope;
  std::string means;
  for (int b : c.budgets) {
    double m = 0.0;
    for (const auto& s : seeds) m += s.mean.at(b) / seeds.size();
    means += fmt::format(" {}:{:.4f}", b, m);
  }
  verdict(7, ok,
          fmt::format("{} seeds, mean max-rel-diff by budget{};{} paired t vs {}; {}-path worst {:.4f} vs envelope {}",
                      seeds.size(), means, detail, kPairedT, c.envelope_budget, envelope_worst, c.envelope));
}

void criterion_determinism(const fs::path& first, const fs::path& second) {
  int compared = 0, differing = 0;
  std::string detail;
  for (const auto& entry : fs::directory_iterator(first)) {
    const auto ext = entry.path().extension();
    if (ext != ".csv" && ext != ".yaml") continue;
    ++compared;
    const auto other = second / entry.path().filename();
    if (!fs::exists(other) || bytes(entry.path()) != bytes(other)) {
      ++differing;
      detail += " " + entry.path().filename().string();
    }
  }
  verdict(8, compared > 0 && differing == 0,
          fmt::format("{} output files compared between a 1-thread and a 2-thread rerun, {} differ{}", compared,
                      differing, detail));
}

void criterion_appendix() {
  RngStream rng(5, StreamTag::kGeneric, 0);
  double geo = 0.0;
  for (int i = 0; i < 50; ++i) {
    const double x = -0.99 + 1.98 * rng.uniform();
    const auto a = a_sequence(x, 30);
    for (int k = 1; k <= 30; ++k) geo = std::max(geo, std::abs(a[k - 1] - (1.0 - std::pow(x, k)) / (1.0 - x)));
  }
  CollateralParams p = benchmark_collateral();
  p.initial_log_return = 0.1;
  const int ts[] = {1, 5, 15, 30};
  double s[4] = {}, s2[4] = {};
  std::vector<double> levels;
  for (int i = 0; i < kMomentPaths; ++i) {
    RngStream path_rng(6, StreamTag::kCollateral, i);
    simulate_collateral_log_levels(p, 30, path_rng, levels);
    for (int j = 0; j < 4; ++j) {
      s[j] += levels[ts[j] - 1];
      s2[j] += levels[ts[j] - 1] * levels[ts[j] - 1];
    }
  }
  double worst_z = 0.0;
  for (int j = 0; j < 4; ++j) {
    const auto m = collateral_log_moments(p, ts[j]);
    const double mean = s[j] / kMomentPaths, var = s2[j] / kMomentPaths - mean * mean;
    worst_z = std::max(worst_z, std::abs(mean - m.mean) / std::sqrt(m.variance / kMomentPaths));
    worst_z = std::max(worst_z, std::abs(var - m.variance) / (m.variance * std::sqrt(2.0 / kMomentPaths)));
  }
  verdict(9, geo <= kGeometricTol && worst_z <= kMomentSigmas,
          fmt::format("a_sequence vs geometric sum max |diff| {:.1e}; AR(1) log-level moments worst {:.2f} SE", geo,
                      worst_z));
}

void pseudo_count_sensitivity(Waterfall& w) {
  const auto& cfg = w.config();
  const auto base = std::get<BayesianMethod>(w.method({"bayes_2f", "2f", true}));
  const int h = cfg.loan.horizon, def = cfg.high.default_rating();
  const std::uint64_t seed = stage_seed(cfg.seed, kSaltProjection);
  std::string line;
  for (double n0 : {1e4, 1e5, 1e6}) {
    ProjectionProblem problem = base.problem;
    problem.pseudo_count = n0;
    std::vector<double> errors;
    for (int s = 0; s < cfg.projection.scenarios; ++s) {
      RngStream rng(seed, StreamTag::kScenario, s);
      const FactorPath high = simulate_factors(cfg.high, h + 1, StationaryDraw{}, rng);
      const FactorPath low = project_bayesian(problem, high);
      for (int k = 1; k <= h; ++k)
        errors.push_back(relative_transition_error(transition_matrix(problem.low, low.values[k]),
                                                   transition_matrix(cfg.high, high.values[k]), def));
    }
    line += fmt::format(" N0={:g}: {:.4f}", n0, median(errors));
  }
  fmt::print("INFO pseudo-count sensitivity, median entrywise bayes_2f error:{}\n", line);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance run over the desk-scale waterfall"};
  std::string config_path = "configs/desk.yaml";
  std::string out = "acceptance_out";
  app.add_option("--config", config_path, "Experiment configuration")->capture_default_str();
  app.add_option("--out", out, "Scratch directory (wiped first)")->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  try {
    const ExperimentConfig cfg = load_config(config_path);
    const fs::path root(out);
    fs::remove_all(root);
    const fs::path main_run = root / "run_threads1";

    Waterfall w(cfg, main_run);
    double upstream = 0.0, elgd_secs = 0.0;
    upstream += timed([&] { w.run("data"); });
    upstream += timed([&] { w.run("calibrate"); });
    upstream += timed([&] { w.run("projection"); });
    w.run("convergence");
    w.run("grid");
    elgd_secs = timed([&] { w.run("elgd"); });
    w.run("loss");

    criterion_elgd(main_run, elgd_secs);
    criterion_oracles();
    criterion_transition_identities();
    criterion_projection(main_run, upstream);
    criterion_epd(main_run);
    criterion_risk(main_run, cfg.loss_scenarios());
    criterion_convergence(cfg, root, main_run);

    ExperimentConfig two = cfg;
    two.threads = 2;
    Waterfall(two, root / "run_threads2").run("all");
    criterion_determinism(main_run, root / "run_threads2");
    criterion_appendix();
    pseudo_count_sensitivity(w);

    fmt::print("{}/9 criteria passed\n", passed);
  } catch (const std::exception& e) {
    fmt::print(stderr, "acceptance run aborted: {}\n", e.what());
    return 1;
  }
  return 0;
}
