#pragma once

#include "csae/estimators.hpp"
#include "csae/frame.hpp"
#include "csae/rng.hpp"

#include <Eigen/Dense>

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace csae {

/// Marginal residuals of the sampled units (sampled_rows() order) split into
/// an area part and a unit part: r = r2[area] + r1.
struct ResidualSets {
  Eigen::VectorXd marginal;
  Eigen::VectorXd level1;
  Eigen::VectorXd level2;  // one per area; 0 for areas without sampled units
};

ResidualSets decompose_residuals(const PopulationFrame& frame, const Eigen::VectorXd& marginal);

/// Outcome model on the sample plus its fitted values and residuals.
struct ResidualModel {
  OutcomeModel model;
  Eigen::VectorXd fitted;  // sampled_rows() order
  ResidualSets residuals;
};

ResidualModel fit_residual_model(const PopulationFrame& frame, LearnerKind mu, const ModelOptions& options = {});
ResidualSets compute_residuals(const PopulationFrame& frame, LearnerKind mu, const ModelOptions& options = {});

struct ResampledResiduals {
  Eigen::VectorXd level2;  // m draws from r2, one per area
  Eigen::VectorXd level1;  // n draws from r1
};

/// Draws level-2 values first (area order), then level-1 values (sampled_rows()
/// order), each as uniform_int_distribution indices from `rng`. Level-1 draws
/// come from the pooled set unless within_area is set.
ResampledResiduals resample_residuals(const PopulationFrame& frame, const ResidualSets& sets, Rng& rng,
                                      bool within_area = false);

enum class Scheme { Single, Double };
std::string to_string(Scheme s);
Scheme parse_scheme(std::string_view name);

struct BootstrapOptions {
  std::size_t replicates = 500;  // B
  std::size_t inner = 100;       // C, double scheme only
  double alpha = 0.05;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  bool within_area = false;
  double unstable_share = 0.05;
};

struct BootstrapResult {
  Scheme scheme = Scheme::Single;
  std::size_t replicates = 0;
  std::size_t inner = 0;
  double alpha = 0.05;
  std::vector<AreaEstimate> point;  // original estimates; interval set where available
  Eigen::MatrixXd draws;            // B x m replicate estimates, NaN where dropped
  std::vector<double> bias;         // mean replicate minus estimate
  std::vector<double> inner_bias;   // double: mean over outer replicates of the inner bias
  std::vector<double> corrected_bias;  // double: 2 bias - inner_bias; single: bias
  std::vector<std::optional<Interval>> single_intervals;  // debiased by `bias`
  std::vector<std::size_t> dropped;        // outer replicates lost per area
  std::vector<std::size_t> inner_dropped;  // inner replicates lost per area
  std::vector<std::string> diagnostics;    // one line per failed replicate
  bool unstable = false;
};

/// 1-based order statistics floor(alpha/2 B) + 1 and floor((1 - alpha/2) B) + 1,
/// capped at B.
std::pair<std::size_t, std::size_t> percentile_ranks(std::size_t count, double alpha);

/// Percentile interval of `values - shift` (NaN entries ignored); nullopt if
/// every value is NaN.
std::optional<Interval> percentile_interval(std::span<const double> values, double shift, double alpha);

using AreaEstimator = std::function<std::vector<AreaEstimate>(const PopulationFrame&)>;

/// Residual block bootstrap. Replicate b rebuilds the sampled outcomes as
/// fitted + r2*[area] + r1* with the stream make_rng(seed, {b}) and reruns
/// `estimator` on the new frame. Inner replicate c of b uses {b, c}.
BootstrapResult bootstrap_ci(const PopulationFrame& frame, const AreaEstimator& estimator, LearnerKind mu,
                             const ModelOptions& model, const BootstrapOptions& options);
BootstrapResult double_bootstrap_ci(const PopulationFrame& frame, const AreaEstimator& estimator, LearnerKind mu,
                                    const ModelOptions& model, const BootstrapOptions& options);

/// Same, running `spec` through estimate(); the residual model uses spec.nuisance.mu.
BootstrapResult bootstrap_ci(const PopulationFrame& frame, const EstimatorSpec& spec,
                             const BootstrapOptions& options, PropensityCache* cache = nullptr);
BootstrapResult double_bootstrap_ci(const PopulationFrame& frame, const EstimatorSpec& spec,
                                    const BootstrapOptions& options, PropensityCache* cache = nullptr);

}  // namespace csae
