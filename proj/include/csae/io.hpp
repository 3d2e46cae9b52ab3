#pragma once

#include "csae/frame.hpp"
#include "csae/harness.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace csae {

inline constexpr std::string_view kVersion = "0.1.0";

std::uint64_t fnv1a64(std::string_view text);

/// %.17g, with "nan", "inf" and "-inf" spelled out.
std::string format_number(double value);

/// "# csae <version> seed=<seed> config=<16 hex digits of fnv1a64(config)>"
std::string header_comment(std::uint64_t seed, std::string_view config);

/// Frame CSV: header row with area, a, s, y and optional weight; every other
/// column is a covariate, contextual when listed in `contextual`. Lines
/// starting with '#' before the header are skipped. Fields may be quoted.
struct IngestOptions {
  std::vector<std::string> contextual;
};

struct ColumnSummary {
  std::string name;
  std::size_t count = 0;
  double mean = 0.0;
  double sd = 0.0;  // n - 1 denominator
};

struct IngestReport {
  std::size_t rows = 0;
  std::vector<AreaCounts> areas;         // dense id order
  std::vector<ColumnSummary> covariates; // population-wide
  ColumnSummary outcome_treated;         // sampled units
  ColumnSummary outcome_control;
  bool weights_defaulted = false;        // no weight column, or empty cells
};

struct Ingested {
  PopulationFrame frame;
  IngestReport report;
};

/// Areas get dense ids in order of first appearance. Throws "ingest-error"
/// naming the line and column of the first offending cell.
Ingested read_frame_csv(std::istream& in, const IngestOptions& options = {});
Ingested ingest(const std::filesystem::path& path, const IngestOptions& options = {});

/// Inverse of read_frame_csv for the same contextual list. Rows come out
/// grouped by area; the weight column appears only if some unit has one.
void write_frame_csv(std::ostream& out, const PopulationFrame& frame);
void write_label_map(std::ostream& out, const PopulationFrame& frame);
void write_report(std::ostream& out, const PopulationFrame& frame, const IngestReport& report);

/// area,estimator,nuisance,tau,tau1,tau0,lower,upper,flag,clipped
void write_estimates_header(std::ostream& out);
void write_estimates(std::ostream& out, const PopulationFrame& frame, const std::vector<AreaEstimate>& estimates);

void write_truth_csv(std::ostream& out, const std::vector<std::string>& labels, const std::vector<double>& tau);

/// Ranked summary without timings, so reruns are byte-identical.
void write_results_csv(std::ostream& out, const ResultsTable& results);
void write_area_results_csv(std::ostream& out, const ResultsTable& results, const std::vector<std::string>& labels);
void write_timing_csv(std::ostream& out, const ResultsTable& results);

/// Aligned text: method, mu, e1, mu_a, MSE, %err, bias, time (and Cov).
std::string format_table(const ResultsTable& results);

}  // namespace csae
