#include "csae/frame.hpp"

#include "csae/error.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

namespace csae {

namespace {

std::shared_ptr<const SampleDesign> make_sample(const Population& pop,
                                                std::vector<std::uint8_t> sampled,
                                                std::vector<std::optional<double>> weight) {
  const std::size_t n = pop.area_of_row.size();
  if (sampled.size() != n || weight.size() != n) {
    throw Error("invalid-frame", "sample vectors do not match the population size");
  }
  auto sample = std::make_shared<SampleDesign>();
  const std::size_t m = pop.area_labels.size();
  sample->sampled_count.assign(m, 0);
  sample->sampled_treated_count.assign(m, 0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!sampled[i]) continue;
    sample->sampled_rows.push_back(i);
    ++sample->sampled_count[pop.area_of_row[i]];
    if (pop.treated[i]) ++sample->sampled_treated_count[pop.area_of_row[i]];
  }
  sample->sampled = std::move(sampled);
  sample->weight = std::move(weight);
  return sample;
}

}  // namespace

PopulationFrame PopulationFrame::from_units(std::vector<UnitRecord> units,
                                            std::vector<std::string> area_labels,
                                            std::vector<std::string> individual_names,
                                            std::vector<std::string> contextual_names) {
  const std::size_t m = area_labels.size();
  if (m == 0) throw Error("invalid-frame", "frame needs at least one area");
  const std::size_t p = individual_names.size();
  const std::size_t c = contextual_names.size();
  for (std::size_t i = 0; i < units.size(); ++i) {
    const auto& u = units[i];
    if (u.area >= m) {
      throw Error("invalid-frame", "unit " + std::to_string(i) + " has area index out of range");
    }
    if (u.individual.size() != p || u.contextual.size() != c) {
      throw Error("invalid-frame", "unit " + std::to_string(i) + " has wrong covariate width");
    }
  }
  std::stable_sort(units.begin(), units.end(),
                   [](const UnitRecord& a, const UnitRecord& b) { return a.area < b.area; });

  auto pop = std::make_shared<Population>();
  pop->area_labels = std::move(area_labels);
  pop->individual_names = std::move(individual_names);
  pop->contextual_names = std::move(contextual_names);
  const std::size_t n = units.size();
  pop->individual.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(p));
  pop->contextual.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(c));
  pop->treated.resize(n);
  pop->area_of_row.resize(n);
  pop->area_offsets.assign(m + 1, 0);
  pop->treated_count.assign(m, 0);

  std::vector<std::uint8_t> sampled(n);
  std::vector<std::optional<double>> outcome(n);
  std::vector<std::optional<double>> weight(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& u = units[i];
    const auto row = static_cast<Eigen::Index>(i);
    for (std::size_t k = 0; k < p; ++k) pop->individual(row, static_cast<Eigen::Index>(k)) = u.individual[k];
    for (std::size_t k = 0; k < c; ++k) pop->contextual(row, static_cast<Eigen::Index>(k)) = u.contextual[k];
    pop->treated[i] = u.treated ? 1 : 0;
    pop->area_of_row[i] = u.area;
    ++pop->area_offsets[u.area + 1];
    if (u.treated) ++pop->treated_count[u.area];
    sampled[i] = u.sampled ? 1 : 0;
    outcome[i] = u.outcome;
    weight[i] = u.weight;
  }
  for (std::size_t j = 0; j < m; ++j) {
    if (pop->area_offsets[j + 1] == 0) {
      throw Error("empty-area", "area '" + pop->area_labels[j] + "' has no units");
    }
    pop->area_offsets[j + 1] += pop->area_offsets[j];
  }
  return from_parts(std::move(pop), std::move(sampled), std::move(outcome), std::move(weight));
}

PopulationFrame PopulationFrame::from_parts(std::shared_ptr<const Population> population,
                                            std::vector<std::uint8_t> sampled,
                                            std::vector<std::optional<double>> outcome,
                                            std::vector<std::optional<double>> weight) {
  if (outcome.size() != population->area_of_row.size()) {
    throw Error("invalid-frame", "outcome vector does not match the population size");
  }
  PopulationFrame frame;
  frame.sample_ = make_sample(*population, std::move(sampled), std::move(weight));
  frame.population_ = std::move(population);
  frame.outcome_ = std::make_shared<const std::vector<std::optional<double>>>(std::move(outcome));
  return frame;
}

double PopulationFrame::design_weight(std::size_t row) const {
  if (const auto& w = weight(row)) return *w;
  const std::size_t j = area_of(row);
  const bool a = treated(row);
  const double big = a ? static_cast<double>(treated_count(j))
                       : static_cast<double>(area_size(j) - treated_count(j));
  const double small = a ? static_cast<double>(sampled_treated_count(j))
                         : static_cast<double>(sampled_count(j) - sampled_treated_count(j));
  return small > 0 ? big / small : 0.0;
}

UnitRecord PopulationFrame::unit(std::size_t row) const {
  UnitRecord u;
  u.area = area_of(row);
  u.treated = treated(row);
  u.sampled = sampled(row);
  u.outcome = outcome(row);
  u.weight = weight(row);
  const auto r = static_cast<Eigen::Index>(row);
  u.individual.resize(static_cast<std::size_t>(individual().cols()));
  for (Eigen::Index k = 0; k < individual().cols(); ++k) u.individual[static_cast<std::size_t>(k)] = individual()(r, k);
  u.contextual.resize(static_cast<std::size_t>(contextual().cols()));
  for (Eigen::Index k = 0; k < contextual().cols(); ++k) u.contextual[static_cast<std::size_t>(k)] = contextual()(r, k);
  return u;
}

std::vector<UnitRecord> PopulationFrame::units() const {
  std::vector<UnitRecord> out;
  out.reserve(size());
  for (std::size_t i = 0; i < size(); ++i) out.push_back(unit(i));
  return out;
}

PopulationFrame PopulationFrame::with_sampled_outcomes(std::span<const double> values) const {
  const auto& rows = sampled_rows();
  if (values.size() != rows.size()) {
    throw Error("invalid-frame", "replacement outcomes do not match the sample size");
  }
  std::vector<std::optional<double>> outcome(size());
  for (std::size_t k = 0; k < rows.size(); ++k) outcome[rows[k]] = values[k];
  PopulationFrame frame = *this;
  frame.outcome_ = std::make_shared<const std::vector<std::optional<double>>>(std::move(outcome));
  return frame;
}

PopulationFrame PopulationFrame::with_sample(std::vector<std::uint8_t> sampled,
                                             std::vector<std::optional<double>> outcome,
                                             std::vector<std::optional<double>> weight) const {
  return from_parts(population_, std::move(sampled), std::move(outcome), std::move(weight));
}

bool PopulationFrame::operator==(const PopulationFrame& other) const {
  if (size() != other.size() || area_labels() != other.area_labels() ||
      individual_names() != other.individual_names() ||
      contextual_names() != other.contextual_names()) {
    return false;
  }
  for (std::size_t i = 0; i < size(); ++i) {
    if (!(unit(i) == other.unit(i))) return false;
  }
  return true;
}

std::size_t ImputedFrame::imputed_count() const {
  return static_cast<std::size_t>(std::count(imputed.begin(), imputed.end(), std::uint8_t{1}));
}

std::string to_string(IssueKind kind) {
  switch (kind) {
    case IssueKind::MissingOutcome: return "missing-outcome";
    case IssueKind::OutcomeOnUnsampled: return "outcome-on-unsampled";
    case IssueKind::InconsistentContextual: return "inconsistent-contextual";
    case IssueKind::NonPositiveWeight: return "non-positive-weight";
    case IssueKind::DegenerateArm: return "degenerate-arm";
    case IssueKind::EmptySample: return "empty-sample";
  }
  return "unknown";
}

std::string ValidationIssue::describe(const PopulationFrame& frame) const {
  std::ostringstream os;
  os << to_string(kind) << "(area=" << frame.area_label(area);
  if (row) os << ", row=" << *row;
  if (arm >= 0) os << ", a=" << arm;
  os << ")";
  return os.str();
}

std::vector<ValidationIssue> validate(const PopulationFrame& frame) {
  std::vector<ValidationIssue> issues;
  const auto& ctx = frame.contextual();
  for (std::size_t j = 0; j < frame.area_count(); ++j) {
    const std::size_t begin = frame.area_begin(j);
    for (std::size_t i = begin; i < frame.area_end(j); ++i) {
      if (frame.sampled(i) && !frame.outcome(i)) {
        issues.push_back({IssueKind::MissingOutcome, j, i});
      }
      if (!frame.sampled(i) && frame.outcome(i)) {
        issues.push_back({IssueKind::OutcomeOnUnsampled, j, i});
      }
      if (const auto& w = frame.weight(i); w && !(*w > 0.0)) {
        issues.push_back({IssueKind::NonPositiveWeight, j, i});
      }
      if (i > begin && ctx.cols() > 0 &&
          (ctx.row(static_cast<Eigen::Index>(i)).array() !=
           ctx.row(static_cast<Eigen::Index>(begin)).array()).any()) {
        issues.push_back({IssueKind::InconsistentContextual, j, i});
      }
    }
    const std::size_t treated = frame.treated_count(j);
    if (treated == 0) issues.push_back({IssueKind::DegenerateArm, j, std::nullopt, 1});
    if (treated == frame.area_size(j)) issues.push_back({IssueKind::DegenerateArm, j, std::nullopt, 0});
    if (frame.sampled_count(j) == 0) issues.push_back({IssueKind::EmptySample, j, std::nullopt});
  }
  return issues;
}

std::vector<AreaCounts> partition_counts(const PopulationFrame& frame) {
  std::vector<AreaCounts> out(frame.area_count());
  for (std::size_t j = 0; j < frame.area_count(); ++j) {
    auto& c = out[j];
    c.population = frame.area_size(j);
    c.sample = frame.sampled_count(j);
    c.population_treated = frame.treated_count(j);
    c.population_control = c.population - c.population_treated;
    c.sample_treated = frame.sampled_treated_count(j);
    c.sample_control = c.sample - c.sample_treated;
    c.fraction = static_cast<double>(c.sample) / static_cast<double>(c.population);
  }
  return out;
}

}  // namespace csae
