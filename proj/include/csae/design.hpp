#pragma once

#include "csae/frame.hpp"

#include <Eigen/Dense>

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace csae {

/// Model matrix: intercept first, then standardized covariates, then the raw
/// 0/1 treatment column and treatment x covariate interactions when requested.
struct DesignMatrix {
  Eigen::MatrixXd x;
  std::vector<std::string> names;
  std::optional<Eigen::Index> treatment_column;
  std::vector<Eigen::Index> interaction_columns;

  DesignMatrix() = default;
  DesignMatrix(Eigen::MatrixXd values, std::vector<std::string> column_names,
               std::optional<Eigen::Index> treatment = std::nullopt);

  Eigen::Index rows() const { return x.rows(); }
  Eigen::Index cols() const { return x.cols(); }

  /// Columns other than the treatment column and its interactions.
  std::vector<Eigen::Index> covariate_columns() const;
};

struct FeatureOptions {
  bool individual = true;
  bool contextual = true;
  bool treatment = false;
  bool interactions = false;  // treatment x individual covariates
};

/// Column recipe learned from a set of training rows: which covariates carry
/// variation there and their mean/SD. Constant covariates are dropped, so the
/// only constant column is the intercept.
class DesignRecipe {
 public:
  static DesignRecipe fit(const PopulationFrame& frame, std::span<const std::size_t> rows,
                          const FeatureOptions& options);

  /// Builds rows of the design. `treatment_override` replaces every unit's
  /// treatment (used to evaluate arm regressions at A = a).
  DesignMatrix build(const PopulationFrame& frame, std::span<const std::size_t> rows,
                     std::optional<int> treatment_override = std::nullopt) const;
  DesignMatrix build_all(const PopulationFrame& frame,
                         std::optional<int> treatment_override = std::nullopt) const;

  const std::vector<std::string>& names() const { return names_; }
  bool has_treatment() const { return treatment_; }

 private:
  struct Source {
    bool contextual = false;
    Eigen::Index column = 0;
    double mean = 0.0;
    double scale = 1.0;
  };
  std::vector<Source> sources_;
  std::vector<std::size_t> interacting_;  // indices into sources_
  bool treatment_ = false;
  std::vector<std::string> names_;
};

std::vector<std::size_t> all_rows(const PopulationFrame& frame);
std::vector<std::size_t> area_rows(const PopulationFrame& frame, std::size_t area);

}  // namespace csae
