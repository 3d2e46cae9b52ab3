#pragma once

#include "csae/frame.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace csae {

/// Uniform range for the control-to-treated sampling ratio of `count`
/// consecutive areas.
struct RatioSegment {
  std::size_t count = 0;
  double lo = 0.0;
  double hi = 1.0;
};

/// Synthetic population settings. Normal parameters are (mean, variance).
/// The two presets differ in scale handling: "literal" uses the raw
/// coefficient draws; "calibrated" keeps their directions but rescales each
/// index to a fixed standard deviation under the covariate covariance.
struct SimConfig {
  std::string preset = "calibrated";
  std::size_t areas = 41;
  std::size_t area_size = 1000;
  std::size_t dimension = 10;
  double correlation = 0.5;  // off-diagonal of the covariate covariance
  double covariate_scale = 1.0;
  double c0_lo = 1.0, c0_hi = 2.0;
  double c1_lo = 2.0, c1_hi = 3.0;
  double context_sd = 0.5;  // X_s
  double beta_variance = 3.0;
  double beta_shift_mean = 4.0;
  double exp_scale = 0.1;
  bool rescale = true;
  bool common_scale = false;  // one factor per index (mean SD over areas) instead of one per area
  double linear_index_sd = 0.25;
  double exp_index_sd0 = 1.75;
  double exp_index_sd1 = 2.5;
  double noise_sd = 0.5;
  double noise_correlation = 0.0;  // between eps(0) and eps(1)
  double alpha_mean = 2.0;
  double alpha_variance = 6.0;
  double alpha_last_variance = 0.25;
  double alpha_context_variance = 0.25;
  double alpha_intercept = 8.0;
  double alpha_scale = 1.0;  // multiplies every propensity coefficient
  double treated_rate = 0.02;
  std::vector<RatioSegment> segments = {{25, 0.01, 0.5}, {10, 0.51, 1.0}, {6, 0.9, 1.0}};
  int guard_redraws = 50;
  double guard_floor = 1e-6;
  std::uint64_t seed = 1;

  static SimConfig calibrated();
  static SimConfig literal();
  static SimConfig from_preset(const std::string& name);
  /// Throws "invalid-config" on inconsistent settings.
  void check() const;
};

struct SimDiagnostics {
  std::size_t guard_redraws = 0;  // units whose noise had to be redrawn
  std::size_t guard_clamps = 0;   // units clamped after the last redraw
};

/// Population with both potential outcomes. The frame-facing part (X, A and
/// areas) is shared with every sample drawn from it; the potential outcomes
/// stay here and never enter a PopulationFrame.
class SyntheticPopulation {
 public:
  const std::shared_ptr<const Population>& population() const { return population_; }
  const std::vector<double>& tau() const { return tau_; }
  const std::vector<double>& control_ratio() const { return ratio_; }  // f01 per area
  const Eigen::VectorXd& propensity() const { return propensity_; }
  const SimDiagnostics& diagnostics() const { return diagnostics_; }
  std::size_t size() const { return population_->area_of_row.size(); }
  double potential_outcome(std::size_t row, int arm) const { return arm ? y1_(static_cast<Eigen::Index>(row)) : y0_(static_cast<Eigen::Index>(row)); }
  /// Population variance of Y(a) over all units.
  double outcome_variance(int arm) const;
  std::vector<double> treated_share() const;

 private:
  friend SyntheticPopulation generate_population(const SimConfig& config);
  friend void assign_treatment(SyntheticPopulation& population, const SimConfig& config);

  std::shared_ptr<const Population> population_;
  Eigen::VectorXd y0_, y1_;
  Eigen::VectorXd propensity_;
  std::vector<double> tau_;
  std::vector<double> ratio_;
  SimDiagnostics diagnostics_;
};

/// round-half-up(rate * treated) and ceil(ratio * n1).
std::size_t treated_sample_size(std::size_t treated, double rate);
std::size_t control_sample_size(std::size_t n1, double ratio);

/// Covariates, coefficients, potential outcomes, true effects and the
/// treatment assignment.
SyntheticPopulation generate_population(const SimConfig& config);

/// Redraws treatment from the logistic propensity; potential outcomes and
/// covariates are kept.
void assign_treatment(SyntheticPopulation& population, const SimConfig& config);

/// Stratified-by-arm sample: n_j^1 = round-half-up(rate * N_j^1) treated and
/// n_j^0 = ceil(f01_j * n_j^1) controls, uniformly without replacement within
/// each area-arm stratum; weights N_j^a / n_j^a; outcomes revealed as Y(A).
PopulationFrame draw_sample(const SyntheticPopulation& population, const SimConfig& config, std::uint64_t seed);

}  // namespace csae
