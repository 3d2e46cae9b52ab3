#include <doctest.h>

#include "csae/design.hpp"
#include "csae/error.hpp"
#include "csae/frame.hpp"
#include "csae/rng.hpp"

#include <random>

using namespace csae;

namespace {

UnitRecord make_unit(std::size_t area, bool a, bool s, std::optional<double> y, double x = 0.0,
                     double ctx = 0.0) {
  UnitRecord u;
  u.area = area;
  u.treated = a;
  u.sampled = s;
  u.outcome = y;
  u.individual = {x};
  u.contextual = {ctx};
  return u;
}

PopulationFrame two_area_frame() {
  std::vector<UnitRecord> units = {
      make_unit(0, true, true, 1.0, 0.1, 5.0),  make_unit(0, false, true, 2.0, 0.2, 5.0),
      make_unit(0, true, false, {}, 0.3, 5.0),  make_unit(1, true, true, 3.0, 0.4, 7.0),
      make_unit(1, false, true, 4.0, 0.5, 7.0), make_unit(1, false, false, {}, 0.6, 7.0),
  };
  return PopulationFrame::from_units(units, {"north", "south"}, {"x"}, {"g"});
}

}  // namespace

TEST_CASE("valid frame has an empty report") {
  const auto frame = two_area_frame();
  CHECK(validate(frame).empty());
}

TEST_CASE("outcome on an unsampled unit is reported") {
  auto units = two_area_frame().units();
  units[2].outcome = 9.0;
  const auto frame = PopulationFrame::from_units(units, {"north", "south"}, {"x"}, {"g"});
  const auto issues = validate(frame);
  REQUIRE(issues.size() == 1);
  CHECK(issues[0].kind == IssueKind::OutcomeOnUnsampled);
  CHECK(issues[0].describe(frame) == "outcome-on-unsampled(area=north, row=2)");
}

TEST_CASE("area without controls reports a degenerate arm") {
  std::vector<UnitRecord> units = {
      make_unit(0, true, true, 1.0), make_unit(0, false, true, 2.0),
      make_unit(1, true, true, 3.0), make_unit(1, true, true, 4.0),
  };
  const auto frame = PopulationFrame::from_units(units, {"1", "2"}, {"x"}, {"g"});
  const auto issues = validate(frame);
  REQUIRE(issues.size() == 1);
  CHECK(issues[0].describe(frame) == "degenerate-arm(area=2, a=0)");
}

TEST_CASE("other validation kinds") {
  auto units = two_area_frame().units();
  units[0].outcome.reset();
  units[1].weight = -1.0;
  units[4].contextual = {8.0};
  units[3].sampled = false;
  units[3].outcome.reset();
  units[4].sampled = false;
  units[4].outcome.reset();
  const auto frame = PopulationFrame::from_units(units, {"north", "south"}, {"x"}, {"g"});
  std::vector<std::string> kinds;
  for (const auto& issue : validate(frame)) kinds.push_back(to_string(issue.kind));
  CHECK(kinds == std::vector<std::string>{"missing-outcome", "non-positive-weight",
                                          "inconsistent-contextual", "empty-sample"});
}

TEST_CASE("partition counts on a single area") {
  std::vector<UnitRecord> units = {
      make_unit(0, true, true, 1.0), make_unit(0, true, true, 2.0),
      make_unit(0, true, false, {}), make_unit(0, false, false, {}),
  };
  const auto frame = PopulationFrame::from_units(units, {"a"}, {"x"}, {"g"});
  const auto counts = partition_counts(frame);
  REQUIRE(counts.size() == 1);
  CHECK(counts[0].population == 4);
  CHECK(counts[0].sample == 2);
  CHECK(counts[0].population_treated == 3);
  CHECK(counts[0].population_control == 1);
  CHECK(counts[0].sample_treated == 2);
  CHECK(counts[0].sample_control == 0);
  CHECK(counts[0].fraction == doctest::Approx(0.5));
}

TEST_CASE("area with no sampled units has zero fraction") {
  std::vector<UnitRecord> units = {make_unit(0, true, true, 1.0), make_unit(1, false, false, {})};
  const auto frame = PopulationFrame::from_units(units, {"a", "b"}, {"x"}, {"g"});
  const auto counts = partition_counts(frame);
  CHECK(counts[1].sample == 0);
  CHECK(counts[1].fraction == 0.0);
}

TEST_CASE("partition counts equal direct recounts on random frames") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t m = 1 + rng() % 6;
    std::vector<UnitRecord> units;
    for (std::size_t j = 0; j < m; ++j) units.push_back(make_unit(j, rng() % 2, false, {}));
    const std::size_t extra = rng() % 60;
    for (std::size_t i = 0; i < extra; ++i) {
      const bool s = rng() % 3 == 0;
      units.push_back(make_unit(rng() % m, rng() % 2, s, s ? std::optional<double>(1.0) : std::nullopt));
    }
    std::shuffle(units.begin(), units.end(), rng);
    std::vector<std::string> labels;
    for (std::size_t j = 0; j < m; ++j) labels.push_back(std::to_string(j));
    const auto frame = PopulationFrame::from_units(units, labels, {"x"}, {"g"});
    const auto counts = partition_counts(frame);
    std::size_t total = 0;
    std::size_t sampled = 0;
    for (std::size_t j = 0; j < m; ++j) {
      std::size_t big = 0, small = 0, big1 = 0, small1 = 0;
      for (const auto& u : units) {
        if (u.area != j) continue;
        ++big;
        big1 += u.treated;
        small += u.sampled;
        small1 += u.sampled && u.treated;
      }
      CHECK(counts[j].population == big);
      CHECK(counts[j].sample == small);
      CHECK(counts[j].population_treated == big1);
      CHECK(counts[j].sample_treated == small1);
      CHECK(counts[j].population == counts[j].population_treated + counts[j].population_control);
      CHECK(counts[j].sample == counts[j].sample_treated + counts[j].sample_control);
      total += counts[j].population;
      sampled += counts[j].sample;
    }
    CHECK(total == frame.size());
    CHECK(sampled == frame.sample_size());
  }
}

TEST_CASE("units are grouped by area in ingestion order") {
  std::vector<UnitRecord> units = {make_unit(1, true, false, {}, 1.0), make_unit(0, true, false, {}, 2.0),
                                   make_unit(1, false, false, {}, 3.0), make_unit(0, false, false, {}, 4.0)};
  const auto frame = PopulationFrame::from_units(units, {"a", "b"}, {"x"}, {"g"});
  CHECK(frame.individual()(0, 0) == 2.0);
  CHECK(frame.individual()(1, 0) == 4.0);
  CHECK(frame.individual()(2, 0) == 1.0);
  CHECK(frame.individual()(3, 0) == 3.0);
  CHECK(frame.area_begin(1) == 2);
}

TEST_CASE("structural errors") {
  CHECK_THROWS_AS(PopulationFrame::from_units({make_unit(2, true, false, {})}, {"a"}, {"x"}, {}), Error);
  try {
    PopulationFrame::from_units({make_unit(0, true, false, {})}, {"a", "b"}, {"x"}, {"g"});
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == "empty-area");
  }
}

TEST_CASE("default design weights are stratum ratios") {
  const auto frame = two_area_frame();
  // area 0: two treated (one sampled), one control (sampled)
  CHECK(frame.design_weight(0) == 2.0);
  CHECK(frame.design_weight(1) == 1.0);
  // area 1: one treated sampled, two controls with one sampled
  CHECK(frame.design_weight(3) == 1.0);
  CHECK(frame.design_weight(4) == 2.0);
}

TEST_CASE("replacing sampled outcomes shares the population") {
  const auto frame = two_area_frame();
  const std::vector<double> values = {10, 20, 30, 40};
  const auto next = frame.with_sampled_outcomes(values);
  CHECK(next.population() == frame.population());
  CHECK(*next.outcome(0) == 10);
  CHECK(*next.outcome(4) == 40);
  CHECK_FALSE(next.outcome(2).has_value());
  CHECK(frame.with_sampled_outcomes(std::vector<double>{1, 2, 3, 4}) == frame);
}

TEST_CASE("design standardizes over training rows and drops constants") {
  const auto frame = two_area_frame();
  const std::vector<std::size_t> rows = {0, 1, 2};
  const auto recipe = DesignRecipe::fit(frame, rows, {.treatment = true, .interactions = true});
  // contextual column is constant inside area 0 and is dropped
  CHECK(recipe.names() == std::vector<std::string>{"(intercept)", "x", "A", "A:x"});
  const auto x = recipe.build(frame, rows);
  CHECK(x.x.col(1).mean() == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(x.x.col(1).squaredNorm() / 3 == doctest::Approx(1.0));
  REQUIRE(x.treatment_column);
  CHECK(x.x(0, *x.treatment_column) == 1.0);
  CHECK(x.x(1, *x.treatment_column) == 0.0);
  CHECK(x.covariate_columns() == std::vector<Eigen::Index>{0, 1});
  const auto forced = recipe.build(frame, rows, 1);
  CHECK(forced.x(1, 2) == 1.0);
  CHECK(forced.x(1, 3) == doctest::Approx(forced.x(1, 1)));

  const auto all = DesignRecipe::fit(frame, all_rows(frame), {.treatment = true});
  CHECK(all.names() == std::vector<std::string>{"(intercept)", "x", "g", "A"});
}
