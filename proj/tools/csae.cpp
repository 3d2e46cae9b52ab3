// csae: simulate | estimate | ci | benchmark | coverage
#include "csae/config.hpp"
#include "csae/error.hpp"
#include "csae/harness.hpp"
#include "csae/io.hpp"
#include "csae/rng.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace csae;

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::size_t workers = 1;
  std::string input;
  std::vector<std::string> contextual;
  std::vector<std::string> estimators;
  std::optional<std::size_t> replications;
  std::optional<std::size_t> B, C;
  std::optional<double> alpha;
  std::string scheme;
  bool no_interactions = false;
};

RunConfig resolve(const Flags& f) {
  auto c = f.config.empty() ? RunConfig::parse("{}") : RunConfig::load(f.config);
  if (f.seed) c.seed = *f.seed;
  if (!f.input.empty()) c.input = f.input;
  if (!f.contextual.empty()) c.contextual = f.contextual;
  if (!f.estimators.empty()) {
    c.estimators.clear();
    for (const auto& name : f.estimators) c.estimators.push_back(parse_spec(name));
  }
  if (f.no_interactions) c.interactions = false;
  if (f.replications) c.replications = *f.replications;
  if (f.B) c.bootstrap.replicates = *f.B;
  if (f.C) c.bootstrap.inner = *f.C;
  if (f.alpha) c.bootstrap.alpha = *f.alpha;
  if (!f.scheme.empty()) c.scheme = parse_scheme(f.scheme);
  if (c.replications == 0) throw Error("invalid-config", "replications must be positive");
  return c;
}

// Every file written by a run: header comment first for CSVs.
class Outputs {
 public:
  Outputs(const fs::path& dir, const RunConfig& config) : dir_(dir), config_(config.canonical()) {
    fs::create_directories(dir_);
    header_ = header_comment(config.seed, config_);
    std::ofstream(dir_ / "config.json") << config_ << '\n';
  }

  std::ofstream csv(const std::string& name) const {
    std::ofstream out(dir_ / name);
    if (!out) throw Error("io-error", "cannot write '" + (dir_ / name).string() + "'");
    out << header_ << '\n';
    return out;
  }

  std::ofstream text(const std::string& name) const { return std::ofstream(dir_ / name); }

 private:
  fs::path dir_;
  std::string config_;
  std::string header_;
};

Ingested load_input(const RunConfig& c) {
  if (!c.input) throw Error("invalid-config", "no input frame (use --input or \"input\" in the config)");
  return ingest(*c.input, {.contextual = c.contextual});
}

void describe_population(const SyntheticPopulation& pop, const PopulationFrame& sample) {
  const auto [lo, hi] = std::minmax_element(pop.tau().begin(), pop.tau().end());
  std::printf("population: N=%zu, areas=%zu, var(Y0)=%.4f, var(Y1)=%.4f, tau in [%.4f, %.4f]\n", pop.size(),
              pop.tau().size(), pop.outcome_variance(0), pop.outcome_variance(1), *lo, *hi);
  std::printf("sample: n=%zu\n", sample.sample_size());
}

int simulate(const Flags& f) {
  const auto c = resolve(f);
  Outputs out(f.out, c);
  const auto sim = c.population_config();
  const auto pop = generate_population(sim);
  const auto sample = draw_sample(pop, sim, derive_seed(c.seed, {1}));
  auto frame_csv = out.csv("frame.csv");
  write_frame_csv(frame_csv, sample);
  auto truth = out.csv("truth.csv");
  write_truth_csv(truth, sample.area_labels(), pop.tau());
  describe_population(pop, sample);
  std::printf("guard redraws: %zu, clamps: %zu\n", pop.diagnostics().guard_redraws, pop.diagnostics().guard_clamps);
  return 0;
}

int estimate_cmd(const Flags& f) {
  const auto c = resolve(f);
  const auto data = load_input(c);
  Outputs out(f.out, c);
  auto report = out.text("ingest_report.txt");
  write_report(report, data.frame, data.report);
  auto labels = out.csv("label_map.csv");
  write_label_map(labels, data.frame);
  auto csv = out.csv("estimates.csv");
  write_estimates_header(csv);
  PropensityCache cache;
  for (const auto& spec : c.specs()) write_estimates(csv, data.frame, estimate(data.frame, spec, &cache));
  return 0;
}

int ci_cmd(const Flags& f) {
  const auto c = resolve(f);
  const auto data = load_input(c);
  Outputs out(f.out, c);
  auto csv = out.csv("intervals.csv");
  write_estimates_header(csv);
  auto diagnostics = out.text("bootstrap_diagnostics.txt");
  PropensityCache cache;
  auto options = c.bootstrap;
  options.seed = c.seed;
  options.workers = f.workers;
  for (const auto& spec : c.specs()) {
    const auto r = c.scheme == Scheme::Double ? double_bootstrap_ci(data.frame, spec, options, &cache)
                                              : bootstrap_ci(data.frame, spec, options, &cache);
    write_estimates(csv, data.frame, r.point);
    diagnostics << spec.name() << ": scheme=" << to_string(r.scheme) << " B=" << r.replicates << " C=" << r.inner
                << (r.unstable ? " unstable" : "") << '\n';
    for (const auto& line : r.diagnostics) diagnostics << "  " << line << '\n';
  }
  return 0;
}

int study(const Flags& f, bool coverage) {
  const auto c = resolve(f);
  Outputs out(f.out, c);
  const auto sim = c.population_config();
  const auto pop = generate_population(sim);
  PropensityCache cache;
  ReplicationPlan plan;
  plan.replications = c.replications;
  plan.seed = c.seed;
  plan.workers = f.workers;
  for (const auto& spec : c.specs()) plan.methods.push_back(Method::from_spec(spec, &cache));
  if (coverage) plan.coverage = CoverageSettings{.options = c.bootstrap, .scheme = c.scheme};
  const auto target = simulation_target(pop, sim);
  const auto results = coverage ? run_coverage(plan, target) : run_replications(plan, target);

  const auto labels = pop.population()->area_labels;
  auto truth = out.csv("truth.csv");
  write_truth_csv(truth, labels, pop.tau());
  auto summary = out.csv("results.csv");
  write_results_csv(summary, results);
  auto areas = out.csv("area_results.csv");
  write_area_results_csv(areas, results, labels);
  // wall-clock, so never byte-identical between runs
  auto timing = out.csv("timing.csv");
  write_timing_csv(timing, results);
  std::cout << format_table(results);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Causal small area estimation: simulation, estimation, bootstrap intervals, Monte Carlo studies"};
  app.require_subcommand(1);
  Flags flags;

  auto common = [&](CLI::App* cmd) {
    cmd->add_option("--config", flags.config, "JSON run configuration")->check(CLI::ExistingFile);
    cmd->add_option("--seed", flags.seed, "master seed (overrides the config)");
    cmd->add_option("--out", flags.out, "output directory")->capture_default_str();
    cmd->add_option("--workers", flags.workers, "worker threads")->check(CLI::PositiveNumber)->capture_default_str();
    cmd->add_option("--estimator", flags.estimators, "estimator name, e.g. global-AIPW[H2r,Gb,M] (repeatable)");
    cmd->add_flag("--no-interactions", flags.no_interactions, "drop treatment x covariate terms");
  };
  auto bootstrap = [&](CLI::App* cmd) {
    cmd->add_option("--B", flags.B, "outer bootstrap replicates");
    cmd->add_option("--C", flags.C, "inner replicates (double scheme)");
    cmd->add_option("--alpha", flags.alpha, "1 - confidence level");
    cmd->add_option("--scheme", flags.scheme, "single or double")->check(CLI::IsMember({"single", "double"}));
  };
  auto data = [&](CLI::App* cmd) {
    cmd->add_option("--input", flags.input, "frame CSV")->check(CLI::ExistingFile);
    cmd->add_option("--contextual", flags.contextual, "contextual covariate columns");
  };

  auto* sim = app.add_subcommand("simulate", "synthetic population, one sample, true effects");
  common(sim);
  auto* est = app.add_subcommand("estimate", "point estimates per area and estimator");
  common(est);
  data(est);
  auto* ci = app.add_subcommand("ci", "bootstrap confidence intervals");
  common(ci);
  data(ci);
  bootstrap(ci);
  auto* bench = app.add_subcommand("benchmark", "MSE over K simulated samples");
  common(bench);
  bench->add_option("--K", flags.replications, "replications");
  auto* cov = app.add_subcommand("coverage", "interval coverage over K simulated samples");
  common(cov);
  cov->add_option("--K", flags.replications, "replications");
  bootstrap(cov);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*sim) return simulate(flags);
    if (*est) return estimate_cmd(flags);
    if (*ci) return ci_cmd(flags);
    if (*bench) return study(flags, false);
    if (*cov) return study(flags, true);
  } catch (const Error& e) {
    std::string message = e.what();
    message.erase(0, e.code().size() + 2);
    std::cerr << nlohmann::json{{"error", {{"code", e.code()}, {"message", message}}}}.dump() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << nlohmann::json{{"error", {{"code", "internal"}, {"message", e.what()}}}}.dump() << '\n';
    return 3;
  }
  return 1;
}
