#pragma once

#include "csae/bootstrap.hpp"
#include "csae/estimators.hpp"
#include "csae/simgen.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace csae {

/// One row of an evaluation grid. `estimate` serves MSE runs, `bootstrap`
/// coverage runs; either may be empty when the method is not used that way.
struct Method {
  std::string name;
  std::string mu = "-", e1 = "-", mu_a = "-";
  AreaEstimator estimate;
  std::function<BootstrapResult(const PopulationFrame&, const BootstrapOptions&, Scheme)> bootstrap;

  static Method from_spec(const EstimatorSpec& spec, PropensityCache* cache = nullptr);
};

struct CoverageSettings {
  BootstrapOptions options;  // seed and workers are set per replication
  Scheme scheme = Scheme::Double;
};

struct ReplicationPlan {
  std::size_t replications = 1;  // K
  std::vector<Method> methods;
  std::optional<CoverageSettings> coverage;
  std::uint64_t seed = 0;
  std::size_t workers = 1;

  /// Throws "invalid-plan".
  void check() const;
};

/// True effects plus a sampler; replication k uses draw(derive_seed(seed, {k})).
struct SimulationTarget {
  std::vector<double> tau;
  std::function<PopulationFrame(std::uint64_t)> draw;
};

SimulationTarget simulation_target(const SyntheticPopulation& population, const SimConfig& config);

struct MethodResult {
  std::string name;
  std::string mu = "-", e1 = "-", mu_a = "-";
  std::vector<double> area_bias;
  std::vector<double> area_mse;
  std::vector<std::size_t> area_count;  // replications with an estimate
  double mean_mse = 0.0;
  double mean_bias = 0.0;
  double percent_error = 0.0;  // +inf when the best MSE is 0 and this one is not
  std::size_t attempts = 0;    // K m
  std::size_t absent = 0;
  bool valid = true;           // absent share below the failure threshold
  double seconds = 0.0;        // estimation calls only, summed over replications
  std::optional<double> coverage_single;
  std::optional<double> coverage_double;

  double failure_rate() const { return attempts ? double(absent) / double(attempts) : 0.0; }
  double seconds_per_replication(std::size_t k) const { return k ? seconds / double(k) : 0.0; }
};

struct ResultsTable {
  std::size_t replications = 0;
  std::size_t areas = 0;
  std::vector<MethodResult> methods;  // plan order
};

/// Absent estimates are dropped from the averages while their share stays
/// below this; at or above it the method is marked invalid.
inline constexpr double kFailureThreshold = 0.01;

ResultsTable run_replications(const ReplicationPlan& plan, const SimulationTarget& target);
ResultsTable run_coverage(const ReplicationPlan& plan, const SimulationTarget& target);

/// tau-hat minus tau of replication k (1-based) per method and area, absent
/// where flagged. Exactly what run_replications accumulates for that k.
std::vector<std::vector<std::optional<double>>> replication_errors(const ReplicationPlan& plan,
                                                                   const SimulationTarget& target, std::size_t k);

/// Valid methods by mean MSE (compared at 1e-6, then by name), invalid ones last.
std::vector<MethodResult> rank_table(const ResultsTable& results);

}  // namespace csae
