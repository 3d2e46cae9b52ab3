#pragma once

#include "csae/frame.hpp"

#include <optional>
#include <string>
#include <vector>

namespace fixtures {

struct Row {
  std::size_t area = 0;
  int a = 0;
  bool s = true;
  std::optional<double> y;
  std::vector<double> x;
  std::optional<double> w;
};

/// Frame from compact rows; every row carries the same number of individual
/// covariates, named x1, x2, ... Contextual columns are optional per area.
inline csae::PopulationFrame frame(const std::vector<Row>& rows, std::size_t areas,
                                   const std::vector<std::vector<double>>& context = {}) {
  std::vector<csae::UnitRecord> units;
  const std::size_t p = rows.empty() ? 0 : rows.front().x.size();
  for (const auto& r : rows) {
    csae::UnitRecord u;
    u.area = r.area;
    u.treated = r.a != 0;
    u.sampled = r.s;
    u.outcome = r.s ? r.y : std::nullopt;
    u.individual = r.x;
    if (!context.empty()) u.contextual = context[r.area];
    u.weight = r.w;
    units.push_back(u);
  }
  std::vector<std::string> labels;
  for (std::size_t j = 0; j < areas; ++j) labels.push_back("area" + std::to_string(j + 1));
  std::vector<std::string> names;
  for (std::size_t k = 0; k < p; ++k) names.push_back("x" + std::to_string(k + 1));
  std::vector<std::string> ctx;
  if (!context.empty()) {
    for (std::size_t k = 0; k < context.front().size(); ++k) ctx.push_back("g" + std::to_string(k + 1));
  }
  return csae::PopulationFrame::from_units(units, labels, names, ctx);
}

}  // namespace fixtures
