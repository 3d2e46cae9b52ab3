#include <doctest.h>

#include "csae/error.hpp"
#include "csae/simgen.hpp"

#include <algorithm>
#include <cmath>
#include <set>

using namespace csae;

namespace {

SimConfig small(std::uint64_t seed = 1) {
  auto c = SimConfig::calibrated();
  c.areas = 4;
  c.area_size = 400;
  c.segments = {{2, 0.01, 0.5}, {2, 0.9, 1.0}};
  c.treated_rate = 0.05;
  c.seed = seed;
  return c;
}

}  // namespace

TEST_SUITE("simgen") {
  TEST_CASE("degenerate surface reduces to the log intercepts") {
    auto c = small();
    c.noise_sd = 0;
    c.context_sd = 0;
    c.covariate_scale = 0;
    c.exp_scale = 0;
    c.rescale = false;
    const auto pop = generate_population(c);
    for (std::size_t j = 0; j < c.areas; ++j) {
      const std::size_t first = j * c.area_size;
      const double c0 = std::exp(pop.potential_outcome(first, 0)) - 1;
      const double c1 = std::exp(pop.potential_outcome(first, 1)) - 1;
      CHECK(c0 >= 1.0);
      CHECK(c0 <= 2.0);
      CHECK(c1 >= 2.0);
      CHECK(c1 <= 3.0);
      for (std::size_t i = first; i < first + c.area_size; ++i) {
        CHECK(pop.potential_outcome(i, 0) == pop.potential_outcome(first, 0));
        CHECK(pop.potential_outcome(i, 1) == pop.potential_outcome(first, 1));
      }
      CHECK(std::abs(pop.tau()[j] - (std::log(c1 + 1) - std::log(c0 + 1))) < 1e-12);
    }
  }

  TEST_CASE("true effects are area means of the unit differences") {
    const auto pop = generate_population(small());
    for (std::size_t j = 0; j < 4; ++j) {
      double sum = 0;
      for (std::size_t i = j * 400; i < (j + 1) * 400; ++i) sum += pop.potential_outcome(i, 1) - pop.potential_outcome(i, 0);
      CHECK(std::abs(pop.tau()[j] - sum / 400) < 1e-12);
    }
  }

  TEST_CASE("zero propensity coefficients give fair coins") {
    auto c = small();
    c.alpha_scale = 0;
    const auto pop = generate_population(c);
    CHECK(pop.propensity().minCoeff() == 0.5);
    CHECK(pop.propensity().maxCoeff() == 0.5);
    std::size_t treated = 0;
    for (auto t : pop.population()->treated_count) treated += t;
    const double share = static_cast<double>(treated) / 1600.0;
    CHECK(std::abs(share - 0.5) < 4 * std::sqrt(0.25 / 1600.0));
  }

  TEST_CASE("flipping the propensity coefficients mirrors the treated shares") {
    auto c = small();
    c.alpha_intercept = 0;
    const auto pop = generate_population(c);
    c.alpha_scale = -1;
    const auto flipped = generate_population(c);
    const auto s = pop.treated_share();
    const auto t = flipped.treated_share();
    for (std::size_t j = 0; j < 4; ++j) {
      // matched uniforms: the two indicators differ only where u falls between e and 1 - e
      CHECK(std::abs(s[j] + t[j] - 1.0) < 4 * std::sqrt(0.5 / 400.0));
    }
    for (Eigen::Index i = 0; i < pop.propensity().size(); ++i) {
      CHECK(pop.propensity()(i) + flipped.propensity()(i) == doctest::Approx(1.0).epsilon(1e-12));
    }
  }

  TEST_CASE("sample sizes follow the stratified rule") {
    CHECK(treated_sample_size(300, 0.02) == 6);
    CHECK(treated_sample_size(25, 0.02) == 1);
    CHECK(treated_sample_size(24, 0.02) == 0);
    CHECK(control_sample_size(6, 1.0) == 6);
    CHECK(control_sample_size(6, 0.34) == 3);
    CHECK(control_sample_size(6, 0.01) == 1);
    CHECK(control_sample_size(0, 0.5) == 0);

    auto c = small();
    c.segments = {{4, 1.0, 1.0}};
    const auto pop = generate_population(c);
    const auto frame = draw_sample(pop, c, 3);
    for (std::size_t j = 0; j < 4; ++j) {
      const auto n1 = frame.sampled_treated_count(j);
      CHECK(n1 == treated_sample_size(frame.treated_count(j), c.treated_rate));
      CHECK(frame.sampled_count(j) - n1 == n1);
    }
  }

  TEST_CASE("samples reveal the matching potential outcome") {
    const auto c = small();
    const auto pop = generate_population(c);
    const auto frame = draw_sample(pop, c, 17);
    for (std::size_t i = 0; i < frame.size(); ++i) {
      if (!frame.sampled(i)) {
        CHECK_FALSE(frame.outcome(i).has_value());
        continue;
      }
      CHECK(*frame.outcome(i) == pop.potential_outcome(i, frame.treated(i) ? 1 : 0));
      const auto j = frame.area_of(i);
      const double big = frame.treated(i) ? static_cast<double>(frame.treated_count(j))
                                          : static_cast<double>(frame.area_size(j) - frame.treated_count(j));
      const double small_n = frame.treated(i) ? static_cast<double>(frame.sampled_treated_count(j))
                                              : static_cast<double>(frame.sampled_count(j) - frame.sampled_treated_count(j));
      CHECK(*frame.weight(i) == big / small_n);
    }
    for (std::size_t j = 0; j < 4; ++j) {
      const auto n1 = frame.sampled_treated_count(j);
      CHECK(frame.sampled_count(j) - n1 == control_sample_size(n1, pop.control_ratio()[j]));
    }
  }

  TEST_CASE("ratio segments are laid out in area order") {
    const auto c = small();
    const auto pop = generate_population(c);
    const auto& f = pop.control_ratio();
    REQUIRE(f.size() == 4);
    CHECK(f[0] <= 0.5);
    CHECK(f[1] <= 0.5);
    CHECK(f[2] >= 0.9);
    CHECK(f[3] >= 0.9);
  }

  TEST_CASE("generation and sampling are reproducible") {
    const auto c = small(5);
    const auto a = generate_population(c);
    const auto b = generate_population(c);
    CHECK(a.population()->individual == b.population()->individual);
    CHECK(a.population()->treated == b.population()->treated);
    CHECK(a.tau() == b.tau());
    CHECK(draw_sample(a, c, 9) == draw_sample(b, c, 9));
    CHECK_FALSE(draw_sample(a, c, 9) == draw_sample(a, c, 10));
    // a new sample leaves the population untouched
    CHECK(draw_sample(a, c, 9).population() == draw_sample(a, c, 10).population());
  }

  TEST_CASE("different samples of one population differ only in the draw") {
    const auto c = small(6);
    const auto pop = generate_population(c);
    const auto s1 = draw_sample(pop, c, 1);
    const auto s2 = draw_sample(pop, c, 2);
    CHECK(s1.sample_size() == s2.sample_size());
    std::set<std::size_t> r1(s1.sampled_rows().begin(), s1.sampled_rows().end());
    CHECK(r1.size() == s1.sample_size());
  }

  TEST_CASE("default population at full scale") {
    const auto c = SimConfig::calibrated();
    const auto pop = generate_population(c);
    CHECK(pop.size() == 41000);
    CHECK(*std::min_element(pop.tau().begin(), pop.tau().end()) > 0);
    CHECK(pop.outcome_variance(0) >= 0.8);
    CHECK(pop.outcome_variance(0) <= 1.5);
    CHECK(pop.outcome_variance(1) >= 0.85);
    CHECK(pop.outcome_variance(1) <= 1.6);
    const auto frame = draw_sample(pop, c, 1);
    CHECK(frame.sample_size() >= 850);
    CHECK(frame.sample_size() <= 1050);
  }

  TEST_CASE("config validation") {
    auto c = small();
    c.segments = {{3, 0.1, 0.5}};
    CHECK_THROWS_AS(generate_population(c), Error);
    c = small();
    c.treated_rate = 0;
    CHECK_THROWS_AS(generate_population(c), Error);
    c = small();
    c.correlation = 1.0;
    CHECK_THROWS_AS(generate_population(c), Error);
    CHECK_THROWS_AS(SimConfig::from_preset("reference"), Error);
    CHECK(SimConfig::from_preset("literal").noise_sd == 1.0);
  }
}
