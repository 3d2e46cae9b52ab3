#pragma once

#include "csae/bootstrap.hpp"
#include "csae/estimators.hpp"
#include "csae/simgen.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace csae {

/// Inverse of EstimatorSpec::name(): "global-AIPW[H2r,Gb,M]", "direct-Hajek",
/// "direct-SurveyIPW[L]". A "-" slot keeps the default learner.
EstimatorSpec parse_spec(std::string_view name);

/// Everything a CLI run needs besides flags. Read from a JSON object:
///
///   input        frame CSV path (estimate, ci)
///   contextual   names of contextual covariate columns
///   interactions treatment x covariate terms in every outcome design (default true)
///   estimators   list of spec names or objects {strategy, family, mu, e1, mu_a,
///                clip_lo, clip_hi, folds, seed, allow_erratic, literal_survey_ipw}
///   grid         {strategy, family, mu, e1, mu_a}: lists whose product is
///                appended to estimators
///   bootstrap    {B, C, alpha, scheme, within_area, unstable_share}
///   replications K for benchmark and coverage
///   seed         master seed
///   simulation   {preset, ...any SimConfig field, segments: [[count, lo, hi], ...]};
///                its seed defaults to the master seed
///
/// Unknown keys are rejected ("invalid-config").
struct RunConfig {
  std::optional<std::filesystem::path> input;
  std::vector<std::string> contextual;
  bool interactions = true;
  std::vector<EstimatorSpec> estimators;
  BootstrapOptions bootstrap;
  Scheme scheme = Scheme::Double;
  std::size_t replications = 200;
  std::uint64_t seed = 0;
  SimConfig simulation;
  std::optional<std::uint64_t> population_seed;  // simulation.seed when given

  /// simulation with its seed resolved
  SimConfig population_config() const;

  static RunConfig parse(std::string_view json);
  static RunConfig load(const std::filesystem::path& path);

  /// Default grid when none is configured: global AIPW[H2r,Gb,M] and Hajek.
  std::vector<EstimatorSpec> specs() const;

  /// Sorted-key JSON of the effective settings (workers excluded); hashed
  /// into every output header.
  std::string canonical() const;
};

}  // namespace csae
