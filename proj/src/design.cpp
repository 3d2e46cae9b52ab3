#include "csae/design.hpp"

#include <cmath>
#include <numeric>

namespace csae {

DesignMatrix::DesignMatrix(Eigen::MatrixXd values, std::vector<std::string> column_names,
                           std::optional<Eigen::Index> treatment)
    : x(std::move(values)), names(std::move(column_names)), treatment_column(treatment) {}

std::vector<Eigen::Index> DesignMatrix::covariate_columns() const {
  std::vector<Eigen::Index> out;
  for (Eigen::Index k = 0; k < cols(); ++k) {
    if (treatment_column && k == *treatment_column) continue;
    bool interaction = false;
    for (auto c : interaction_columns) interaction = interaction || c == k;
    if (!interaction) out.push_back(k);
  }
  return out;
}

DesignRecipe DesignRecipe::fit(const PopulationFrame& frame, std::span<const std::size_t> rows,
                               const FeatureOptions& options) {
  DesignRecipe recipe;
  recipe.names_.push_back("(intercept)");
  auto add_block = [&](const Eigen::MatrixXd& block, const std::vector<std::string>& names,
                       bool contextual) {
    for (Eigen::Index k = 0; k < block.cols(); ++k) {
      double sum = 0.0;
      for (auto r : rows) sum += block(static_cast<Eigen::Index>(r), k);
      const double mean = rows.empty() ? 0.0 : sum / static_cast<double>(rows.size());
      double ss = 0.0;
      for (auto r : rows) {
        const double d = block(static_cast<Eigen::Index>(r), k) - mean;
        ss += d * d;
      }
      const double sd = rows.empty() ? 0.0 : std::sqrt(ss / static_cast<double>(rows.size()));
      if (!(sd > 1e-12 * std::max(1.0, std::abs(mean)))) continue;
      if (!contextual) recipe.interacting_.push_back(recipe.sources_.size());
      recipe.sources_.push_back({contextual, k, mean, sd});
      recipe.names_.push_back(names[static_cast<std::size_t>(k)]);
    }
  };
  if (options.individual) add_block(frame.individual(), frame.individual_names(), false);
  if (options.contextual) add_block(frame.contextual(), frame.contextual_names(), true);
  if (!options.interactions) recipe.interacting_.clear();

  if (options.treatment) {
    std::size_t treated = 0;
    for (auto r : rows) treated += frame.treated(r) ? 1 : 0;
    recipe.treatment_ = treated > 0 && treated < rows.size();
  }
  if (!recipe.treatment_) recipe.interacting_.clear();
  if (recipe.treatment_) {
    recipe.names_.push_back("A");
    for (auto s : recipe.interacting_) recipe.names_.push_back("A:" + recipe.names_[s + 1]);
  }
  return recipe;
}

DesignMatrix DesignRecipe::build(const PopulationFrame& frame, std::span<const std::size_t> rows,
                                 std::optional<int> treatment_override) const {
  const auto n = static_cast<Eigen::Index>(rows.size());
  const auto p = static_cast<Eigen::Index>(names_.size());
  Eigen::MatrixXd x(n, p);
  x.col(0).setOnes();
  const auto& ind = frame.individual();
  const auto& ctx = frame.contextual();
  for (std::size_t s = 0; s < sources_.size(); ++s) {
    const auto& src = sources_[s];
    const auto& block = src.contextual ? ctx : ind;
    const auto col = static_cast<Eigen::Index>(s + 1);
    for (Eigen::Index i = 0; i < n; ++i) {
      x(i, col) = (block(static_cast<Eigen::Index>(rows[static_cast<std::size_t>(i)]), src.column) - src.mean) /
                  src.scale;
    }
  }
  DesignMatrix design;
  if (treatment_) {
    const auto tcol = static_cast<Eigen::Index>(sources_.size() + 1);
    for (Eigen::Index i = 0; i < n; ++i) {
      x(i, tcol) = treatment_override
                       ? static_cast<double>(*treatment_override)
                       : (frame.treated(rows[static_cast<std::size_t>(i)]) ? 1.0 : 0.0);
    }
    for (std::size_t k = 0; k < interacting_.size(); ++k) {
      const auto col = tcol + 1 + static_cast<Eigen::Index>(k);
      x.col(col) = x.col(tcol).cwiseProduct(x.col(static_cast<Eigen::Index>(interacting_[k] + 1)));
      design.interaction_columns.push_back(col);
    }
    design.treatment_column = tcol;
  }
  design.x = std::move(x);
  design.names = names_;
  return design;
}

DesignMatrix DesignRecipe::build_all(const PopulationFrame& frame,
                                     std::optional<int> treatment_override) const {
  const auto rows = all_rows(frame);
  return build(frame, rows, treatment_override);
}

std::vector<std::size_t> all_rows(const PopulationFrame& frame) {
  std::vector<std::size_t> rows(frame.size());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return rows;
}

std::vector<std::size_t> area_rows(const PopulationFrame& frame, std::size_t area) {
  std::vector<std::size_t> rows(frame.area_size(area));
  std::iota(rows.begin(), rows.end(), frame.area_begin(area));
  return rows;
}

}  // namespace csae
