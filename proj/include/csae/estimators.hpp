#pragma once

#include "csae/design.hpp"
#include "csae/frame.hpp"
#include "csae/learners.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

namespace csae {

enum class Strategy { Global, Local, Direct };
enum class Family { OR, IPW, NIPW, AIPW, Hajek, SurveyIPW, CrossfitAIPW };

std::string to_string(Strategy s);
std::string to_string(Family f);
Strategy parse_strategy(std::string_view name);
Family parse_family(std::string_view name);

struct NuisanceTriple {
  LearnerKind mu = LearnerKind::H2r;
  LearnerKind e1 = LearnerKind::Gb;
  LearnerKind mu_a = LearnerKind::M;
  double clip_lo = 0.01;
  double clip_hi = 0.99;
};

struct ModelOptions {
  bool interactions = false;  // treatment x individual covariates in the imputation design
  GbParams gb;
};

struct EstimatorSpec {
  Strategy strategy = Strategy::Global;
  Family family = Family::AIPW;
  NuisanceTriple nuisance;
  ModelOptions model;
  std::size_t folds = 5;           // cross-fitting only
  std::uint64_t seed = 0;          // cross-fitting fold assignment
  bool allow_erratic = false;      // unlocks unnormalized IPW
  bool literal_survey_ipw = false; // 1/n_j treated term, weight-total control term

  /// e.g. "global-AIPW[H2r,Gb,M]" or "direct-Hajek".
  std::string name() const;
  std::string nuisance_tag() const;
  bool needs_outcome_model() const;
};

/// Throws "invalid-spec" for incompatible strategy/family pairs, bad clip
/// bounds or unsupported learners, and "erratic-estimator" for IPW without
/// allow_erratic.
void check_spec(const EstimatorSpec& spec);

/// Imputation model: design recipe learned on the sampled rows plus the fit.
struct OutcomeModel {
  DesignRecipe recipe;
  FittedLearner learner;
};

OutcomeModel fit_outcome_model(const PopulationFrame& frame, LearnerKind kind,
                               const ModelOptions& options = {});
Eigen::VectorXd predict_outcome(const PopulationFrame& frame, const OutcomeModel& model,
                                std::span<const std::size_t> rows);

ImputedFrame impute_outcomes(const PopulationFrame& frame, LearnerKind mu,
                             const ModelOptions& options = {});
ImputedFrame impute_outcomes(const PopulationFrame& frame, const OutcomeModel& model);

/// Population-wide propensity fits depend only on (X, A), so one fit serves
/// every sample drawn from the same population. Thread-safe.
class PropensityCache {
 public:
  std::shared_ptr<const Eigen::VectorXd> get(const PopulationFrame& frame, const NuisanceTriple& nuisance,
                                             const ModelOptions& options);

 private:
  std::mutex mutex_;
  std::map<std::string, std::pair<std::weak_ptr<const Population>, std::shared_ptr<const Eigen::VectorXd>>>
      entries_;
};

/// Unit-level ingredients of the weighting estimators over all N rows.
/// Columns that an estimator does not use may be left empty.
struct NuisanceValues {
  Eigen::VectorXd y_hat;
  Eigen::VectorXd mu1;
  Eigen::VectorXd mu0;
  Eigen::VectorXd e1;  // clipped
  std::vector<std::size_t> clipped;  // per area
};

/// Per-area OR / IPW / NIPW / AIPW from unit-level values. Areas with an
/// empty population arm are flagged "degenerate-arm".
std::vector<AreaEstimate> combine(const PopulationFrame& frame, Family family,
                                  const NuisanceValues& values);

std::vector<AreaEstimate> estimate_global(const PopulationFrame& frame, const EstimatorSpec& spec,
                                          PropensityCache* cache = nullptr);
std::vector<AreaEstimate> estimate_local(const PopulationFrame& frame, const EstimatorSpec& spec);
std::vector<AreaEstimate> estimate_crossfit_aipw(const PopulationFrame& frame, const EstimatorSpec& spec);
std::vector<AreaEstimate> estimate_hajek(const PopulationFrame& frame);
std::vector<AreaEstimate> estimate_survey_ipw(const PopulationFrame& frame, const EstimatorSpec& spec);

/// Same as above on an already imputed frame (used by the bootstrap to share
/// the imputation fit).
std::vector<AreaEstimate> estimate_local(const ImputedFrame& imputed, const EstimatorSpec& spec);
std::vector<AreaEstimate> estimate_crossfit_aipw(const ImputedFrame& imputed, const EstimatorSpec& spec);

/// Global OR / IPW / NIPW / AIPW on one fixed sample when the outcome
/// learners are linear in their design (L, M, H1r, H2r, H2m). Per-area sums
/// of the design rows are formed once; a refit on new sampled outcomes then
/// costs O(n p^2 + m p) instead of O(N p). Agrees with estimate_global up to
/// rounding.
class GlobalEvaluator {
 public:
  static bool supports(const EstimatorSpec& spec);

  /// Throws like estimate_global would for this sample ("degenerate-arm",
  /// "empty-sample", ...) and "invalid-spec" when !supports(spec).
  GlobalEvaluator(const PopulationFrame& frame, const EstimatorSpec& spec, PropensityCache* cache = nullptr);

  /// `y` holds the sampled outcomes in sampled_rows() order.
  std::vector<AreaEstimate> operator()(std::span<const double> y) const;
  /// `frame` must share the population and sample this evaluator was built on.
  std::vector<AreaEstimate> operator()(const PopulationFrame& frame) const;

  bool matches(const PopulationFrame& frame) const;

 private:
  struct AreaSums {
    Eigen::MatrixXd x;  // design-row sums, one column per area
    Eigen::VectorXd w;  // weight totals
  };
  struct ArmFit {
    DesignMatrix x;                  // training rows of this arm (T-learner) or all arms
    std::vector<std::size_t> index;  // positions in sampled_rows()
    std::vector<std::size_t> areas;
  };

  PopulationFrame frame_;
  EstimatorSpec spec_;
  bool impute_ = false;        // unsampled outcomes are imputed
  bool regressions_ = false;   // arm regressions used
  bool propensity_ = false;
  bool s_learner_ = false;     // one arm model with the treatment column
  DesignMatrix x_mu_;
  std::vector<std::size_t> areas_;  // area of each sampled row
  AreaSums unsampled_[2];           // imputation design, arm a, weighted by 1/P(A = a)
  ArmFit arm_fit_[2];               // [0] doubles as the S-learner fit
  AreaSums population_[2];          // arm-regression design at A = a, all rows
  AreaSums weighted_[2];            // same over rows with A = a, weighted by 1/P(A = a)
  Eigen::VectorXd inverse_total_[2];  // sum over rows with A = a of 1/P(A = a)
  Eigen::VectorXd inverse_weight_;    // 1/P(A = A_i) of each sampled row
  std::vector<std::size_t> clipped_;
};

/// Dispatch on spec.strategy / spec.family.
std::vector<AreaEstimate> estimate(const PopulationFrame& frame, const EstimatorSpec& spec,
                                   PropensityCache* cache = nullptr);

}  // namespace csae
