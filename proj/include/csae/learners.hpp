#pragma once

#include "csae/design.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace csae {

/// Nuisance learners. Config strings are exactly "L", "M", "H1r", "H2r",
/// "H2m" and "Gb".
enum class LearnerKind { L, M, H1r, H2r, H2m, Gb };

std::string to_string(LearnerKind kind);
LearnerKind parse_learner(std::string_view name);
bool is_mixed(LearnerKind kind);

struct FitDiagnostics {
  int iterations = 0;
  bool converged = true;
  double objective = 0.0;
  std::vector<double> trace;  // objective per iteration (M) or training loss per round (Gb)
  std::vector<std::string> warnings;
};

struct LinearModel {
  Eigen::VectorXd beta;
  bool logistic = false;
};

/// Random intercept (and optional random treatment slope) model with REML
/// variance components and BLUP area effects.
struct MixedModel {
  Eigen::VectorXd beta;
  double sigma_u2 = 0.0;  // random intercept variance
  double sigma_v2 = 0.0;  // random slope variance (H2r only)
  double sigma_e2 = 0.0;
  Eigen::VectorXd u;      // one per area
  Eigen::VectorXd v;      // one per area (H2r only)
  std::optional<Eigen::Index> slope_column;
};

/// H2m: one random-intercept model per arm over the covariate columns.
struct ArmModels {
  MixedModel control;
  MixedModel treated;
  Eigen::Index treatment_column = 0;
  std::vector<Eigen::Index> columns;
};

struct TreeNode {
  int feature = -1;        // -1 marks a leaf
  double threshold = 0.0;  // x <= threshold goes left
  int left = -1;
  int right = -1;
  double value = 0.0;
};

struct BoostedTrees {
  double base_score = 0.0;
  bool logistic = false;
  std::vector<std::vector<TreeNode>> trees;
};

enum class GbLoss { Squared, Logistic };

struct GbParams {
  int rounds = 200;
  int depth = 3;
  double learning_rate = 0.1;
  std::size_t min_leaf = 5;
  int max_bins = 64;
};

struct FittedLearner {
  LearnerKind kind = LearnerKind::L;
  std::vector<std::string> columns;
  std::variant<LinearModel, MixedModel, ArmModels, BoostedTrees> model;
  FitDiagnostics diagnostics;

  bool probability() const;
};

/// Least squares via column-pivoted QR. Throws "singular-design" when X is
/// rank deficient.
FittedLearner fit_linear(const DesignMatrix& x, std::span<const double> y);

struct MedianOptions {
  int max_iterations = 200;
  double tolerance = 1e-8;  // relative change of the L1 objective
};

/// Least absolute deviations by IRLS with weights 1 / max(|r|, eps),
/// eps = 1e-6 * sd(y). The trace holds the smoothed objective, which is
/// non-increasing.
FittedLearner fit_median(const DesignMatrix& x, std::span<const double> y,
                         const MedianOptions& options = {});

struct LogisticOptions {
  int max_iterations = 100;
  double gradient_tolerance = 1e-9;
  double separation_bound = 30.0;
  bool ridge_fallback = false;
  double ridge = 1e-4;
};

/// Logistic regression by Newton-IRLS. Throws "one-class" if a is constant and
/// "separation" when coefficients diverge, unless ridge_fallback is set, in
/// which case the ridge-penalised fit is returned with a warning.
FittedLearner fit_logistic(const DesignMatrix& x, std::span<const double> a,
                           const LogisticOptions& options = {});

enum class LmmVariant { H1r, H2r, H2m };

struct LmmOptions {
  double tolerance = 1e-8;
  int max_cycles = 100;
  bool force_zero_variance = false;
  bool newton = true;  // H2r: Newton steps after the first coordinate sweep
};

/// Nested-error regression with REML variance ratios, profiled over the
/// ratio scale (1-D for H1r; 2-D for H2r, one coordinate sweep then Newton). `areas` are dense
/// indices below `area_count`; areas without rows get a zero effect.
FittedLearner fit_lmm(const DesignMatrix& x, std::span<const double> y,
                      std::span<const std::size_t> areas, std::size_t area_count,
                      LmmVariant variant, const LmmOptions& options = {});

/// -2 x REML log-likelihood (without constants) of a random-intercept
/// (H1r) or intercept+slope (H2r) model at the given variance components.
double lmm_reml_deviance(const DesignMatrix& x, std::span<const double> y,
                         std::span<const std::size_t> areas, std::size_t area_count,
                         LmmVariant variant, double sigma_u2, double sigma_v2, double sigma_e2);

FittedLearner fit_gb(const DesignMatrix& x, std::span<const double> target, GbLoss loss,
                     const GbParams& params = {});

/// Dispatch. Mixed models need `areas` for the area effects; without them
/// (or for an area absent from the fit) the prediction is the fixed part.
/// Throws "schema-mismatch" if the columns differ from the fit.
Eigen::VectorXd predict(const FittedLearner& learner, const DesignMatrix& x,
                        std::span<const std::size_t> areas = {});

/// Clips propensities to [lo, hi]; returns the number of clipped values.
std::size_t clip_propensities(Eigen::VectorXd& p, double lo, double hi);

}  // namespace csae
