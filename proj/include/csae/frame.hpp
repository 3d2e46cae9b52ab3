#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace csae {

/// One population unit as seen at ingestion. Areas are dense 0-based indices;
/// external labels live in the frame's label map.
struct UnitRecord {
  std::size_t area = 0;
  bool treated = false;
  bool sampled = false;
  std::optional<double> outcome;
  std::vector<double> individual;
  std::vector<double> contextual;
  std::optional<double> weight;

  bool operator==(const UnitRecord&) const = default;
};

/// Fixed part of a finite population: covariates, treatment and the area
/// partition. Rows are grouped by area; area j occupies [offset[j], offset[j+1]).
struct Population {
  std::vector<std::string> area_labels;
  std::vector<std::size_t> area_offsets;
  std::vector<std::size_t> area_of_row;
  std::vector<std::string> individual_names;
  std::vector<std::string> contextual_names;
  Eigen::MatrixXd individual;
  Eigen::MatrixXd contextual;
  std::vector<std::uint8_t> treated;
  std::vector<std::size_t> treated_count;  // N_j^1 per area
};

/// Sample design: which units were drawn and their optional design weights.
struct SampleDesign {
  std::vector<std::uint8_t> sampled;
  std::vector<std::optional<double>> weight;
  std::vector<std::size_t> sampled_rows;   // ascending
  std::vector<std::size_t> sampled_count;  // n_j
  std::vector<std::size_t> sampled_treated_count;  // n_j^1
};

/// Immutable finite population with its sample and observed outcomes. Copies
/// are cheap: the three parts are shared, and "mutation" builds a new frame
/// that reuses the untouched parts.
class PopulationFrame {
 public:
  PopulationFrame() = default;

  /// Groups units by area (stable) and checks structural consistency: area
  /// indices in range, covariate widths uniform, every area non-empty.
  /// Observability violations are left for validate().
  static PopulationFrame from_units(std::vector<UnitRecord> units,
                                    std::vector<std::string> area_labels,
                                    std::vector<std::string> individual_names,
                                    std::vector<std::string> contextual_names);

  static PopulationFrame from_parts(std::shared_ptr<const Population> population,
                                    std::vector<std::uint8_t> sampled,
                                    std::vector<std::optional<double>> outcome,
                                    std::vector<std::optional<double>> weight);

  std::size_t size() const { return population_->area_of_row.size(); }
  std::size_t area_count() const { return population_->area_labels.size(); }
  std::size_t area_begin(std::size_t area) const { return population_->area_offsets[area]; }
  std::size_t area_end(std::size_t area) const { return population_->area_offsets[area + 1]; }
  std::size_t area_size(std::size_t area) const { return area_end(area) - area_begin(area); }
  std::size_t area_of(std::size_t row) const { return population_->area_of_row[row]; }
  const std::string& area_label(std::size_t area) const { return population_->area_labels[area]; }
  const std::vector<std::string>& area_labels() const { return population_->area_labels; }

  bool treated(std::size_t row) const { return population_->treated[row] != 0; }
  bool sampled(std::size_t row) const { return sample_->sampled[row] != 0; }
  const std::optional<double>& outcome(std::size_t row) const { return (*outcome_)[row]; }
  const std::optional<double>& weight(std::size_t row) const { return sample_->weight[row]; }

  /// Explicit design weight, or N_j^a / n_j^a of the unit's area-arm stratum.
  double design_weight(std::size_t row) const;

  std::size_t treated_count(std::size_t area) const { return population_->treated_count[area]; }
  std::size_t sampled_count(std::size_t area) const { return sample_->sampled_count[area]; }
  std::size_t sampled_treated_count(std::size_t area) const {
    return sample_->sampled_treated_count[area];
  }
  std::size_t sample_size() const { return sample_->sampled_rows.size(); }
  const std::vector<std::size_t>& sampled_rows() const { return sample_->sampled_rows; }

  const Eigen::MatrixXd& individual() const { return population_->individual; }
  const Eigen::MatrixXd& contextual() const { return population_->contextual; }
  const std::vector<std::string>& individual_names() const { return population_->individual_names; }
  const std::vector<std::string>& contextual_names() const { return population_->contextual_names; }
  const std::vector<std::size_t>& area_of_rows() const { return population_->area_of_row; }

  UnitRecord unit(std::size_t row) const;
  std::vector<UnitRecord> units() const;

  /// Same population and sample, new outcomes for the sampled units given in
  /// sampled_rows() order. Unsampled units keep no outcome.
  PopulationFrame with_sampled_outcomes(std::span<const double> values) const;

  /// Same population, different sample.
  PopulationFrame with_sample(std::vector<std::uint8_t> sampled,
                              std::vector<std::optional<double>> outcome,
                              std::vector<std::optional<double>> weight) const;

  const std::shared_ptr<const Population>& population() const { return population_; }
  const std::shared_ptr<const SampleDesign>& sample() const { return sample_; }

  bool operator==(const PopulationFrame& other) const;

 private:
  std::shared_ptr<const Population> population_;
  std::shared_ptr<const SampleDesign> sample_;
  std::shared_ptr<const std::vector<std::optional<double>>> outcome_;
};

/// Population with every outcome filled: observed where sampled, predicted
/// elsewhere.
struct ImputedFrame {
  PopulationFrame base;
  Eigen::VectorXd y_hat;
  std::vector<std::uint8_t> imputed;

  std::size_t imputed_count() const;
};

struct Interval {
  double lower = 0.0;
  double upper = 0.0;
};

/// Per-area point estimate. A flagged estimate has no value and a non-empty
/// flag such as "degenerate-arm".
struct AreaEstimate {
  std::size_t area = 0;
  std::optional<double> tau;
  std::optional<double> tau1;
  std::optional<double> tau0;
  std::optional<Interval> interval;
  std::string estimator;
  std::string nuisance;
  std::string flag;
  std::size_t clipped = 0;

  bool ok() const { return tau.has_value(); }
};

enum class IssueKind {
  MissingOutcome,        // s = 1 without y
  OutcomeOnUnsampled,    // s = 0 with y
  InconsistentContextual,
  NonPositiveWeight,
  DegenerateArm,         // N_j^a = 0
  EmptySample,           // n_j = 0
};

struct ValidationIssue {
  IssueKind kind;
  std::size_t area = 0;
  std::optional<std::size_t> row;
  int arm = -1;

  /// e.g. "outcome-on-unsampled(row=3)" or "degenerate-arm(area=2, a=0)";
  /// areas are printed with their external labels.
  std::string describe(const PopulationFrame& frame) const;
};

std::string to_string(IssueKind kind);

/// Reports every observability violation; never throws.
std::vector<ValidationIssue> validate(const PopulationFrame& frame);

struct AreaCounts {
  std::size_t population = 0;          // N_j
  std::size_t sample = 0;              // n_j
  std::size_t population_treated = 0;  // N_j^1
  std::size_t population_control = 0;  // N_j^0
  std::size_t sample_treated = 0;      // n_j^1
  std::size_t sample_control = 0;      // n_j^0
  double fraction = 0.0;               // n_j / N_j
};

std::vector<AreaCounts> partition_counts(const PopulationFrame& frame);

}  // namespace csae
