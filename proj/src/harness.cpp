#include "csae/harness.hpp"

#include "csae/error.hpp"
#include "csae/parallel.hpp"
#include "csae/rng.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <sstream>

namespace csae {

namespace {

constexpr std::uint64_t kBootstrapStream = 0xb0075ULL;

// One method on one replication.
struct Cell {
  std::vector<std::optional<double>> error;  // tau-hat minus tau
  std::vector<std::optional<bool>> single, dual;
  double seconds = 0.0;
};

std::vector<std::string> split_tag(const std::string& tag) {
  std::vector<std::string> parts;
  std::stringstream in(tag);
  for (std::string part; std::getline(in, part, ',');) parts.push_back(part);
  return parts;
}

bool covers(const std::optional<Interval>& interval, double tau) {
  return interval && interval->lower <= tau && tau <= interval->upper;
}

Cell run_cell(const Method& method, const PopulationFrame& frame, const SimulationTarget& target,
              const ReplicationPlan& plan, std::size_t k) {
  const std::size_t m = target.tau.size();
  Cell cell;
  cell.error.assign(m, std::nullopt);
  const bool coverage = plan.coverage.has_value();
  if (coverage) {
    cell.single.assign(m, std::nullopt);
    cell.dual.assign(m, std::nullopt);
  }
  const auto start = std::chrono::steady_clock::now();
  try {
    std::vector<AreaEstimate> point;
    std::optional<BootstrapResult> boot;
    if (coverage) {
      auto options = plan.coverage->options;
      options.seed = derive_seed(plan.seed, {k, kBootstrapStream});
      options.workers = 1;
      boot = method.bootstrap(frame, options, plan.coverage->scheme);
      point = boot->point;
    } else {
      point = method.estimate(frame);
    }
    if (point.size() != m) throw Error("invalid-plan", method.name + " returned the wrong number of areas");
    for (std::size_t j = 0; j < m; ++j) {
      if (!point[j].tau) continue;
      const double tau = target.tau[j];
      if (coverage) {
        const bool dual = plan.coverage->scheme == Scheme::Double;
        const auto& single = boot->single_intervals.size() == m ? boot->single_intervals[j] : point[j].interval;
        if (!single || (dual && !point[j].interval)) continue;
        cell.single[j] = covers(single, tau);
        if (dual) cell.dual[j] = covers(point[j].interval, tau);
      }
      cell.error[j] = *point[j].tau - tau;
    }
  } catch (const Error&) {
    // every area of this replication counts as absent
  }
  cell.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return cell;
}

ResultsTable reduce(const ReplicationPlan& plan, std::size_t m, const std::vector<std::vector<Cell>>& cells) {
  const std::size_t K = plan.replications;
  ResultsTable table;
  table.replications = K;
  table.areas = m;
  for (std::size_t i = 0; i < plan.methods.size(); ++i) {
    const auto& method = plan.methods[i];
    MethodResult r;
    r.name = method.name;
    r.mu = method.mu;
    r.e1 = method.e1;
    r.mu_a = method.mu_a;
    r.area_bias.assign(m, 0.0);
    r.area_mse.assign(m, 0.0);
    r.area_count.assign(m, 0);
    r.attempts = K * m;
    std::size_t hits_single = 0, hits_dual = 0, scored = 0;
    for (std::size_t k = 0; k < K; ++k) {
      const auto& cell = cells[k][i];
      r.seconds += cell.seconds;
      for (std::size_t j = 0; j < m; ++j) {
        if (!cell.error[j]) {
          ++r.absent;
          continue;
        }
        const double e = *cell.error[j];
        r.area_bias[j] += e;
        r.area_mse[j] += e * e;
        ++r.area_count[j];
        if (plan.coverage) {
          ++scored;
          hits_single += *cell.single[j];
          if (cell.dual[j]) hits_dual += *cell.dual[j];
        }
      }
    }
    const double nan = std::numeric_limits<double>::quiet_NaN();
    for (std::size_t j = 0; j < m; ++j) {
      const double c = static_cast<double>(r.area_count[j]);
      r.area_bias[j] = c > 0 ? r.area_bias[j] / c : nan;
      r.area_mse[j] = c > 0 ? r.area_mse[j] / c : nan;
    }
    r.valid = r.failure_rate() < kFailureThreshold;
    if (r.valid) {
      for (std::size_t j = 0; j < m; ++j) {
        r.mean_mse += r.area_mse[j] / double(m);
        r.mean_bias += r.area_bias[j] / double(m);
      }
      if (plan.coverage && scored > 0) {
        r.coverage_single = double(hits_single) / double(scored);
        if (plan.coverage->scheme == Scheme::Double) r.coverage_double = double(hits_dual) / double(scored);
      }
    } else {
      r.mean_mse = r.mean_bias = nan;
    }
    table.methods.push_back(std::move(r));
  }

  double best = std::numeric_limits<double>::infinity();
  for (const auto& r : table.methods) {
    if (r.valid) best = std::min(best, r.mean_mse);
  }
  for (auto& r : table.methods) {
    if (!r.valid || !std::isfinite(best)) {
      r.percent_error = std::numeric_limits<double>::quiet_NaN();
    } else if (best > 0) {
      r.percent_error = (r.mean_mse - best) / best * 100.0;
    } else {
      r.percent_error = r.mean_mse > 0 ? std::numeric_limits<double>::infinity() : 0.0;
    }
  }
  return table;
}

void check_target(const SimulationTarget& target) {
  if (!target.draw || target.tau.empty()) throw Error("invalid-plan", "simulation target has no sampler or no areas");
}

std::vector<Cell> run_replication(const ReplicationPlan& plan, const SimulationTarget& target, std::size_t k) {
  const auto frame = target.draw(derive_seed(plan.seed, {k}));
  if (frame.area_count() != target.tau.size()) {
    throw Error("invalid-plan", "sample has " + std::to_string(frame.area_count()) + " areas, target has " +
                                    std::to_string(target.tau.size()));
  }
  std::vector<Cell> row;
  for (const auto& method : plan.methods) row.push_back(run_cell(method, frame, target, plan, k));
  return row;
}

ResultsTable run(const ReplicationPlan& plan, const SimulationTarget& target) {
  plan.check();
  check_target(target);
  std::vector<std::vector<Cell>> cells(plan.replications);
  parallel_for(plan.replications, plan.workers,
               [&](std::size_t slot) { cells[slot] = run_replication(plan, target, slot + 1); });
  return reduce(plan, target.tau.size(), cells);
}

}  // namespace

Method Method::from_spec(const EstimatorSpec& spec, PropensityCache* cache) {
  check_spec(spec);
  Method method;
  method.name = spec.name();
  const auto parts = split_tag(spec.nuisance_tag());
  if (parts.size() == 3) {
    method.mu = parts[0];
    method.e1 = parts[1];
    method.mu_a = parts[2];
  } else if (parts.size() == 1) {
    method.e1 = parts[0];
  }
  method.estimate = [spec, cache](const PopulationFrame& frame) { return csae::estimate(frame, spec, cache); };
  method.bootstrap = [spec, cache](const PopulationFrame& frame, const BootstrapOptions& options, Scheme scheme) {
    return scheme == Scheme::Double ? double_bootstrap_ci(frame, spec, options, cache)
                                    : bootstrap_ci(frame, spec, options, cache);
  };
  return method;
}

void ReplicationPlan::check() const {
  if (replications == 0) throw Error("invalid-plan", "at least one replication is required");
  if (methods.empty()) throw Error("invalid-plan", "the estimator grid is empty");
  for (const auto& method : methods) {
    if (coverage ? !method.bootstrap : !method.estimate) {
      throw Error("invalid-plan", method.name + " cannot run in this kind of study");
    }
  }
  if (coverage) {
    const auto& o = coverage->options;
    if (o.replicates == 0) throw Error("invalid-plan", "coverage needs B >= 1");
    if (coverage->scheme == Scheme::Double && o.inner == 0) throw Error("invalid-plan", "double scheme needs C >= 1");
    if (!(o.alpha > 0 && o.alpha < 1)) throw Error("invalid-plan", "alpha must lie in (0, 1)");
  }
}

SimulationTarget simulation_target(const SyntheticPopulation& population, const SimConfig& config) {
  return {population.tau(),
          [&population, config](std::uint64_t seed) { return draw_sample(population, config, seed); }};
}

ResultsTable run_replications(const ReplicationPlan& plan, const SimulationTarget& target) {
  if (plan.coverage) {
    auto point_only = plan;
    point_only.coverage.reset();
    return run(point_only, target);
  }
  return run(plan, target);
}

ResultsTable run_coverage(const ReplicationPlan& plan, const SimulationTarget& target) {
  if (!plan.coverage) throw Error("invalid-plan", "coverage runs need bootstrap settings");
  return run(plan, target);
}

std::vector<std::vector<std::optional<double>>> replication_errors(const ReplicationPlan& plan,
                                                                   const SimulationTarget& target, std::size_t k) {
  auto point_only = plan;
  point_only.coverage.reset();
  point_only.check();
  check_target(target);
  if (k == 0 || k > plan.replications) throw Error("invalid-plan", "replication index out of range");
  std::vector<std::vector<std::optional<double>>> out;
  for (auto& cell : run_replication(point_only, target, k)) out.push_back(std::move(cell.error));
  return out;
}

std::vector<MethodResult> rank_table(const ResultsTable& results) {
  auto rows = results.methods;
  auto key = [](const MethodResult& r) { return std::llround(r.mean_mse * 1e6); };
  std::stable_sort(rows.begin(), rows.end(), [&](const MethodResult& a, const MethodResult& b) {
    if (a.valid != b.valid) return a.valid;
    if (a.valid && key(a) != key(b)) return key(a) < key(b);
    return a.name < b.name;
  });
  return rows;
}

}  // namespace csae
