#include <doctest.h>

#include "csae/error.hpp"
#include "csae/estimators.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

#include <cmath>
#include <random>

using namespace csae;
using fixtures::Row;

namespace {

EstimatorSpec spec_of(Strategy s, Family f, LearnerKind mu, LearnerKind e1, LearnerKind mu_a) {
  EstimatorSpec spec;
  spec.strategy = s;
  spec.family = f;
  spec.nuisance.mu = mu;
  spec.nuisance.e1 = e1;
  spec.nuisance.mu_a = mu_a;
  return spec;
}

PopulationFrame single_area(const std::vector<int>& a) {
  std::vector<Row> rows;
  for (std::size_t i = 0; i < a.size(); ++i) rows.push_back({0, a[i], true, 1.0, {static_cast<double>(i)}});
  return fixtures::frame(rows, 1);
}

NuisanceValues values_of(std::vector<double> y, std::vector<double> mu1, std::vector<double> mu0,
                         std::vector<double> e) {
  auto vec = [](const std::vector<double>& v) {
    return Eigen::VectorXd(Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
  };
  NuisanceValues out;
  out.y_hat = vec(y);
  out.mu1 = mu1.empty() ? Eigen::VectorXd() : vec(mu1);
  out.mu0 = mu0.empty() ? Eigen::VectorXd() : vec(mu0);
  out.e1 = e.empty() ? Eigen::VectorXd() : vec(e);
  return out;
}

// Two areas with different linear surfaces per arm, x uniform on a grid.
PopulationFrame linear_areas(bool all_sampled, double scale = 1.0) {
  std::vector<Row> rows;
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(-1, 1);
  for (std::size_t j = 0; j < 2; ++j) {
    for (int i = 0; i < 40; ++i) {
      const double x1 = u(rng), x2 = u(rng);
      const int a = (i % 3 == 0 || x1 > 0.6) ? 1 : 0;
      const double y0 = 1 + j + 0.5 * x1 - x2;
      const double y1 = y0 + 2 - 0.5 * j + x2;
      const bool s = all_sampled || i % 4 == 0 || i % 4 == 1;
      rows.push_back({j, a, s, scale * (a ? y1 : y0), {x1, x2}});
    }
  }
  return fixtures::frame(rows, 2, {{0.3}, {0.9}});
}

// Six areas with random intercepts and treatment slopes plus unit noise.
PopulationFrame noisy_areas() {
  std::vector<Row> rows;
  std::vector<std::vector<double>> context;
  std::mt19937_64 rng(5);
  std::normal_distribution<double> z;
  for (std::size_t j = 0; j < 6; ++j) {
    const double g = z(rng), u = 0.7 * z(rng), v = 0.4 * z(rng);
    context.push_back({g});
    for (int i = 0; i < 30; ++i) {
      const double x = z(rng);
      const int a = z(rng) + 0.5 * x > 0 ? 1 : 0;
      rows.push_back({j, a, i % 3 != 2, 1 + x + 0.5 * g + u + (1.5 + v) * a + 0.5 * z(rng), {x}});
    }
  }
  return fixtures::frame(rows, 6, context);
}

}  // namespace

TEST_SUITE("imputation") {
  TEST_CASE("fully sampled population needs no imputation") {
    const auto frame = linear_areas(true);
    const auto imputed = impute_outcomes(frame, LearnerKind::L);
    CHECK(imputed.imputed_count() == 0);
    for (std::size_t i = 0; i < frame.size(); ++i) CHECK(imputed.y_hat(static_cast<Eigen::Index>(i)) == *frame.outcome(i));
  }

  TEST_CASE("realizable linear outcome is imputed exactly") {
    std::vector<Row> rows;
    for (int i = 0; i < 30; ++i) {
      const double x = 0.1 * i - 1;
      const int a = i % 2;
      rows.push_back({static_cast<std::size_t>(i % 3), a, i % 3 != 1 || i < 6, 2 + 3 * x - a, {x}});
    }
    const auto frame = fixtures::frame(rows, 3);
    const auto imputed = impute_outcomes(frame, LearnerKind::L);
    CHECK(imputed.imputed_count() == frame.size() - frame.sample_size());
    for (std::size_t i = 0; i < frame.size(); ++i) {
      const double x = frame.individual()(static_cast<Eigen::Index>(i), 0);
      const double truth = 2 + 3 * x - (frame.treated(i) ? 1 : 0);
      CHECK(std::abs(imputed.y_hat(static_cast<Eigen::Index>(i)) - truth) < 1e-8);
      if (frame.sampled(i)) CHECK(imputed.y_hat(static_cast<Eigen::Index>(i)) == *frame.outcome(i));
      CHECK(imputed.imputed[i] == (frame.sampled(i) ? 0 : 1));
    }
  }

  TEST_CASE("random intercept imputation shifts areas by the shrunken mean residual") {
    std::vector<Row> rows;
    const double delta = 1.5;
    const std::vector<double> noise = {0.3, -0.2, 0.1, -0.4, 0.25, 0.05, -0.1, 0.2};
    for (std::size_t j = 0; j < 2; ++j) {
      for (std::size_t i = 0; i < 12; ++i) {
        const int a = i % 2;
        const bool s = i < 8;
        const double y = 1 + 0.5 * a + (j == 0 ? delta : -delta) + (s ? noise[(i + 3 * j) % 8] : 0);
        rows.push_back({j, a, s, y, {}});
      }
    }
    const auto frame = fixtures::frame(rows, 2);
    const auto model = fit_outcome_model(frame, LearnerKind::H1r);
    const auto& mm = std::get<MixedModel>(model.learner.model);
    REQUIRE(mm.sigma_u2 > 0);
    const auto imputed = impute_outcomes(frame, model);
    REQUIRE(model.recipe.names() == std::vector<std::string>{"(intercept)", "A"});
    for (std::size_t j = 0; j < 2; ++j) {
      double resid = 0;
      double n = 0;
      for (std::size_t i = frame.area_begin(j); i < frame.area_end(j); ++i) {
        if (!frame.sampled(i)) continue;
        resid += *frame.outcome(i) - mm.beta(0) - mm.beta(1) * frame.treated(i);
        ++n;
      }
      const double gamma = mm.sigma_u2 / (mm.sigma_u2 + mm.sigma_e2 / n);
      const double shift = gamma * resid / n;
      for (std::size_t i = frame.area_begin(j); i < frame.area_end(j); ++i) {
        if (frame.sampled(i)) continue;
        const double fixed = mm.beta(0) + mm.beta(1) * frame.treated(i);
        CHECK(std::abs(imputed.y_hat(static_cast<Eigen::Index>(i)) - fixed - shift) < 1e-10);
      }
      CHECK((j == 0 ? shift > 0 : shift < 0));
    }
  }
}

TEST_SUITE("weighting estimators") {
  TEST_CASE("constant propensity NIPW is the arm mean difference") {
    const auto frame = single_area({1, 1, 0, 0});
    const auto out = combine(frame, Family::NIPW, values_of({2, 4, 1, 3}, {}, {}, {0.5, 0.5, 0.5, 0.5}));
    REQUIRE(out[0].ok());
    CHECK(*out[0].tau == 1.0);
  }

  TEST_CASE("constant arm regressions make AIPW equal OR") {
    const auto frame = single_area({1, 0, 1, 0, 0});
    const std::vector<double> mu1(5, 3.5), mu0(5, 1.25);
    const std::vector<double> y = {3.5, 1.25, 3.5, 1.25, 1.25};
    for (const auto& e : {std::vector<double>{0.1, 0.3, 0.5, 0.7, 0.9}, std::vector<double>(5, 0.42)}) {
      const auto aipw = combine(frame, Family::AIPW, values_of(y, mu1, mu0, e));
      const auto ord = combine(frame, Family::OR, values_of(y, mu1, mu0, {}));
      CHECK(*aipw[0].tau == 3.5 - 1.25);
      CHECK(*ord[0].tau == 3.5 - 1.25);
    }
  }

  TEST_CASE("six-unit AIPW matches the hand evaluation") {
    // treated terms: 3.125, 9, 3.875 and mu1 = 1.5, 2, 1 on controls -> 20.5
    // control terms: 1.125, 0, -0.125 and mu0 = 1, 2, 1.5 on treated -> 5.5
    const auto frame = single_area({1, 1, 1, 0, 0, 0});
    const auto out = combine(frame, Family::AIPW,
                             values_of({3, 5, 4, 1, 2, 0}, {2.5, 4, 4.5, 1.5, 2, 1}, {1, 2, 1.5, 0.5, 2.5, 0.5},
                                       {0.8, 0.2, 0.8, 0.2, 0.8, 0.2}));
    CHECK(std::abs(*out[0].tau1 - 20.5 / 6) < 1e-14);
    CHECK(std::abs(*out[0].tau0 - 5.5 / 6) < 1e-14);
    CHECK(std::abs(*out[0].tau - 2.5) < 1e-14);
  }

  TEST_CASE("unnormalized IPW divides by the area size") {
    const auto frame = single_area({1, 0, 1, 0});
    const auto out = combine(frame, Family::IPW, values_of({2, 1, 4, 3}, {}, {}, {0.5, 0.5, 0.25, 0.25}));
    // treated: (2/0.5 + 4/0.25)/4 = 5; control: (1/0.5 + 3/0.75)/4 = 1.5
    CHECK(std::abs(*out[0].tau1 - 5.0) < 1e-14);
    CHECK(std::abs(*out[0].tau0 - 1.5) < 1e-14);
  }

  TEST_CASE("area without a population arm is flagged") {
    std::vector<Row> rows = {{0, 1, true, 1.0, {0.1}}, {0, 0, true, 2.0, {0.2}}, {1, 1, true, 3.0, {0.3}},
                             {1, 1, true, 4.0, {0.4}}};
    const auto frame = fixtures::frame(rows, 2);
    const auto out = combine(frame, Family::OR, values_of({1, 2, 3, 4}, {1, 1, 1, 1}, {0, 0, 0, 0}, {}));
    CHECK(out[0].ok());
    CHECK_FALSE(out[1].ok());
    CHECK(out[1].flag == "degenerate-arm");
  }
}

TEST_SUITE("global and local strategies") {
  TEST_CASE("a single area makes local and global NIPW agree") {
    std::vector<Row> rows;
    std::mt19937_64 rng(2);
    std::normal_distribution<double> z;
    for (int i = 0; i < 60; ++i) {
      const double x = z(rng);
      const int a = z(rng) + x > 0 ? 1 : 0;
      rows.push_back({0, a, i % 3 == 0, 1 + x + a + 0.2 * z(rng), {x}});
    }
    const auto frame = fixtures::frame(rows, 1, {{4.0}});
    const auto global = estimate(frame, spec_of(Strategy::Global, Family::NIPW, LearnerKind::L, LearnerKind::L, LearnerKind::L));
    const auto local = estimate(frame, spec_of(Strategy::Local, Family::NIPW, LearnerKind::L, LearnerKind::L, LearnerKind::L));
    CHECK(std::abs(*global[0].tau - *local[0].tau) < 1e-10);
  }

  TEST_CASE("local OR recovers per-area linear surfaces") {
    const auto frame = linear_areas(true);
    const auto out = estimate(frame, spec_of(Strategy::Local, Family::OR, LearnerKind::L, LearnerKind::L, LearnerKind::L));
    for (std::size_t j = 0; j < 2; ++j) {
      double tau = 0;
      for (std::size_t i = frame.area_begin(j); i < frame.area_end(j); ++i) {
        tau += 2 - 0.5 * static_cast<double>(j) + frame.individual()(static_cast<Eigen::Index>(i), 1);
      }
      tau /= static_cast<double>(frame.area_size(j));
      CHECK(std::abs(*out[j].tau - tau) < 1e-8);
    }
  }

  TEST_CASE("local AIPW on two areas matches per-area reference fits") {
    const auto frame = linear_areas(false);
    const auto spec = spec_of(Strategy::Local, Family::AIPW, LearnerKind::L, LearnerKind::L, LearnerKind::L);
    const auto imputed = impute_outcomes(frame, LearnerKind::L);
    const auto out = estimate_local(imputed, spec);
    for (std::size_t j = 0; j < 2; ++j) {
      // reference: own normal equations and Newton fits on raw x1 and x2
      Eigen::MatrixXd x(static_cast<Eigen::Index>(frame.area_size(j)), 3);
      Eigen::VectorXd y(x.rows());
      std::vector<int> a(static_cast<std::size_t>(x.rows()));
      for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const auto i = frame.area_begin(j) + static_cast<std::size_t>(r);
        x(r, 0) = 1;
        x(r, 1) = frame.individual()(static_cast<Eigen::Index>(i), 0);
        x(r, 2) = frame.individual()(static_cast<Eigen::Index>(i), 1);
        y(r) = imputed.y_hat(static_cast<Eigen::Index>(i));
        a[static_cast<std::size_t>(r)] = frame.treated(i);
      }
      auto arm_fit = [&](int arm) {
        Eigen::MatrixXd xtx = Eigen::MatrixXd::Zero(3, 3);
        Eigen::VectorXd xty = Eigen::VectorXd::Zero(3);
        for (Eigen::Index r = 0; r < x.rows(); ++r) {
          if (a[static_cast<std::size_t>(r)] != arm) continue;
          xtx += x.row(r).transpose() * x.row(r);
          xty += x.row(r).transpose() * y(r);
        }
        return Eigen::VectorXd(xtx.ldlt().solve(xty));
      };
      const Eigen::VectorXd b1 = arm_fit(1), b0 = arm_fit(0);
      Eigen::VectorXd g = Eigen::VectorXd::Zero(3);
      for (int it = 0; it < 100; ++it) {
        Eigen::VectorXd grad = Eigen::VectorXd::Zero(3);
        Eigen::MatrixXd h = Eigen::MatrixXd::Zero(3, 3);
        for (Eigen::Index r = 0; r < x.rows(); ++r) {
          const double p = 1 / (1 + std::exp(-x.row(r).dot(g)));
          grad += (a[static_cast<std::size_t>(r)] - p) * x.row(r).transpose();
          h += p * (1 - p) * x.row(r).transpose() * x.row(r);
        }
        g += h.ldlt().solve(grad);
      }
      double t1 = 0, t0 = 0;
      for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const double m1 = x.row(r).dot(b1), m0 = x.row(r).dot(b0);
        const double e = std::clamp(1 / (1 + std::exp(-x.row(r).dot(g))), 0.01, 0.99);
        const bool t = a[static_cast<std::size_t>(r)] == 1;
        t1 += (t ? (y(r) - m1) / e : 0.0) + m1;
        t0 += (t ? 0.0 : (y(r) - m0) / (1 - e)) + m0;
      }
      t1 /= static_cast<double>(x.rows());
      t0 /= static_cast<double>(x.rows());
      CHECK(std::abs(*out[j].tau1 - t1) < 1e-9);
      CHECK(std::abs(*out[j].tau0 - t0) < 1e-9);
    }
  }

  TEST_CASE("local fit failure is confined to its area") {
    // area 2 has a single treated unit: the treated arm regression is singular
    std::vector<Row> rows;
    for (int i = 0; i < 10; ++i) rows.push_back({0, i % 2, true, 1.0 * i, {0.3 * i - 1}});
    for (int i = 0; i < 10; ++i) rows.push_back({1, i == 0 ? 1 : 0, true, 2.0 * i, {0.2 * i}});
    const auto frame = fixtures::frame(rows, 2);
    const auto out = estimate(frame, spec_of(Strategy::Local, Family::OR, LearnerKind::L, LearnerKind::L, LearnerKind::L));
    CHECK(out[0].ok());
    CHECK_FALSE(out[1].ok());
    CHECK(out[1].flag == "local-fit-failed(area=area2)");
  }

  TEST_CASE("global AIPW uses population propensities and sample arm regressions") {
    const auto frame = linear_areas(false);
    PropensityCache cache;
    const auto spec = spec_of(Strategy::Global, Family::AIPW, LearnerKind::L, LearnerKind::L, LearnerKind::L);
    const auto first = estimate(frame, spec, &cache);
    const auto second = estimate(frame, spec, &cache);
    const auto uncached = estimate(frame, spec);
    for (std::size_t j = 0; j < 2; ++j) {
      CHECK(*first[j].tau == *second[j].tau);
      CHECK(*first[j].tau == *uncached[j].tau);
      CHECK(*first[j].tau == doctest::Approx(*first[j].tau1 - *first[j].tau0).epsilon(1e-12));
    }
    CHECK(first[0].estimator == "global-AIPW");
    CHECK(first[0].nuisance == "L,L,L");
  }

  TEST_CASE("estimates scale with the outcome") {
    const auto base = linear_areas(false);
    const auto scaled = linear_areas(false, -2.5);
    for (auto family : {Family::OR, Family::NIPW, Family::AIPW}) {
      for (auto strategy : {Strategy::Global, Strategy::Local}) {
        for (auto mu : {LearnerKind::L, LearnerKind::H1r}) {
          const auto spec = spec_of(strategy, family, mu, LearnerKind::L, LearnerKind::L);
          const auto a = estimate(base, spec);
          const auto b = estimate(scaled, spec);
          for (std::size_t j = 0; j < 2; ++j) CHECK(std::abs(*b[j].tau + 2.5 * *a[j].tau) < 1e-8);
        }
      }
    }
  }

  TEST_CASE("estimates do not depend on the order of units within an area") {
    auto units = noisy_areas().units();
    std::vector<std::string> labels;
    for (int j = 1; j <= 6; ++j) labels.push_back("area" + std::to_string(j));
    const auto frame = PopulationFrame::from_units(units, labels, {"x1"}, {"g1"});
    std::mt19937_64 rng(1);
    std::shuffle(units.begin(), units.end(), rng);
    const auto shuffled = PopulationFrame::from_units(units, labels, {"x1"}, {"g1"});
    // closed-form fits agree to rounding; Newton and REML fits to their stopping rules
    const std::vector<std::pair<EstimatorSpec, double>> specs = {
        {spec_of(Strategy::Global, Family::AIPW, LearnerKind::H2r, LearnerKind::L, LearnerKind::L), 1e-6},
        {spec_of(Strategy::Global, Family::OR, LearnerKind::H1r, LearnerKind::L, LearnerKind::H2r), 1e-6},
        {spec_of(Strategy::Global, Family::NIPW, LearnerKind::L, LearnerKind::L, LearnerKind::L), 1e-9},
        {spec_of(Strategy::Local, Family::AIPW, LearnerKind::L, LearnerKind::L, LearnerKind::L), 1e-9},
        {spec_of(Strategy::Direct, Family::Hajek, LearnerKind::L, LearnerKind::L, LearnerKind::L), 1e-12}};
    for (const auto& [spec, tol] : specs) {
      const auto a = estimate(frame, spec);
      const auto b = estimate(shuffled, spec);
      for (std::size_t j = 0; j < 6; ++j) {
        INFO(spec.name(), " area ", j);
        CHECK(std::abs(*a[j].tau - *b[j].tau) < tol);
      }
    }
  }

  TEST_CASE("spec validation") {
    auto spec = spec_of(Strategy::Global, Family::IPW, LearnerKind::L, LearnerKind::L, LearnerKind::L);
    try {
      check_spec(spec);
      FAIL("expected erratic-estimator");
    } catch (const Error& e) {
      CHECK(e.code() == "erratic-estimator");
    }
    spec.allow_erratic = true;
    CHECK_NOTHROW(check_spec(spec));
    spec.nuisance.e1 = LearnerKind::M;
    CHECK_THROWS_AS(check_spec(spec), Error);
    spec = spec_of(Strategy::Global, Family::Hajek, LearnerKind::L, LearnerKind::L, LearnerKind::L);
    CHECK_THROWS_AS(check_spec(spec), Error);
    spec = spec_of(Strategy::Global, Family::AIPW, LearnerKind::L, LearnerKind::L, LearnerKind::L);
    spec.nuisance.clip_lo = 0.6;
    spec.nuisance.clip_hi = 0.4;
    CHECK_THROWS_AS(check_spec(spec), Error);
    CHECK(spec_of(Strategy::Global, Family::AIPW, LearnerKind::H2r, LearnerKind::Gb, LearnerKind::M).name() ==
          "global-AIPW[H2r,Gb,M]");
  }
}

TEST_SUITE("cross-fitting") {
  PopulationFrame loo_frame() {
    const oracles::LooFixture fx;
    std::vector<Row> rows;
    for (std::size_t i = 0; i < fx.x.size(); ++i) rows.push_back({0, fx.a[i], true, fx.y[i], {fx.x[i]}});
    return fixtures::frame(rows, 1);
  }

  TEST_CASE("leave-one-out matches the explicit loop") {
    const oracles::LooFixture fx;
    auto spec = spec_of(Strategy::Local, Family::CrossfitAIPW, LearnerKind::L, LearnerKind::L, LearnerKind::L);
    spec.folds = fx.x.size();
    const auto out = estimate(loo_frame(), spec);
    const auto ref = oracles::loo_aipw(fx.x, fx.a, fx.y, 0.01, 0.99);
    REQUIRE(out[0].ok());
    CHECK(std::abs(*out[0].tau1 - ref.tau1) < 1e-10);
    CHECK(std::abs(*out[0].tau0 - ref.tau0) < 1e-10);
  }

  TEST_CASE("relabelling the same partition changes nothing") {
    auto spec = spec_of(Strategy::Local, Family::CrossfitAIPW, LearnerKind::L, LearnerKind::L, LearnerKind::L);
    spec.folds = 6;
    spec.seed = 1;
    const auto a = estimate(loo_frame(), spec);
    spec.seed = 999;
    const auto b = estimate(loo_frame(), spec);
    CHECK(std::abs(*a[0].tau - *b[0].tau) < 1e-12);
  }

  TEST_CASE("one fold is the local AIPW") {
    const auto frame = linear_areas(false);
    auto spec = spec_of(Strategy::Local, Family::CrossfitAIPW, LearnerKind::L, LearnerKind::L, LearnerKind::L);
    spec.folds = 1;
    const auto cf = estimate(frame, spec);
    const auto local = estimate(frame, spec_of(Strategy::Local, Family::AIPW, LearnerKind::L, LearnerKind::L, LearnerKind::L));
    for (std::size_t j = 0; j < 2; ++j) CHECK(*cf[j].tau == *local[j].tau);
  }

  TEST_CASE("fold-invariant arm regressions give the local AIPW") {
    // outcome depends on the arm only, so every fold fits the same constants
    std::vector<Row> rows;
    for (int i = 0; i < 24; ++i) {
      const int a = (i * 7) % 3 == 0 ? 1 : 0;
      rows.push_back({0, a, true, a ? 4.0 : 1.5, {std::sin(i * 1.0)}});
    }
    const auto frame = fixtures::frame(rows, 1);
    auto spec = spec_of(Strategy::Local, Family::CrossfitAIPW, LearnerKind::L, LearnerKind::L, LearnerKind::L);
    spec.folds = 4;
    const auto cf = estimate(frame, spec);
    const auto local = estimate(frame, spec_of(Strategy::Local, Family::AIPW, LearnerKind::L, LearnerKind::L, LearnerKind::L));
    CHECK(std::abs(*cf[0].tau - *local[0].tau) < 1e-12);
  }

  TEST_CASE("unfixable folds flag the area") {
    // two treated units in twelve: some fold always trains on at most one
    std::vector<Row> rows;
    for (int i = 0; i < 12; ++i) rows.push_back({0, i < 2 ? 1 : 0, true, 1.0 * i, {0.1 * i}});
    const auto frame = fixtures::frame(rows, 1);
    auto spec = spec_of(Strategy::Local, Family::CrossfitAIPW, LearnerKind::L, LearnerKind::L, LearnerKind::L);
    spec.folds = 12;
    const auto out = estimate(frame, spec);
    CHECK_FALSE(out[0].ok());
    CHECK(out[0].flag == "crossfit-failed(area=area1)");
  }
}

TEST_SUITE("direct estimators") {
  TEST_CASE("equal weights give the arm mean difference") {
    std::vector<Row> rows = {{0, 1, true, 3.0, {0}, 1.0}, {0, 1, true, 5.0, {1}, 1.0}, {0, 0, true, 1.0, {2}, 1.0},
                             {0, 0, true, 2.0, {3}, 1.0}, {0, 0, true, 6.0, {4}, 1.0}};
    const auto out = estimate_hajek(fixtures::frame(rows, 1));
    CHECK(std::abs(*out[0].tau - (4.0 - 3.0)) < 1e-14);
  }

  TEST_CASE("design weights enter the treated mean") {
    std::vector<Row> rows = {{0, 1, true, 10.0, {0}, 2.0}, {0, 1, true, 4.0, {1}, 1.0}, {0, 0, true, 1.0, {2}, 1.0}};
    const auto out = estimate_hajek(fixtures::frame(rows, 1));
    CHECK(*out[0].tau1 == 8.0);
    CHECK(*out[0].tau == 7.0);
  }

  TEST_CASE("one sampled unit per arm") {
    std::vector<Row> rows = {{0, 1, true, 2.5, {0}}, {0, 0, true, -1.0, {1}}, {0, 1, false, {}, {2}}};
    const auto frame = fixtures::frame(rows, 1);
    CHECK(*estimate_hajek(frame)[0].tau == 3.5);
    auto spec = spec_of(Strategy::Direct, Family::SurveyIPW, LearnerKind::L, LearnerKind::L, LearnerKind::L);
    CHECK(std::abs(*estimate_survey_ipw(frame, spec)[0].tau - 3.5) < 1e-14);
  }

  TEST_CASE("empty sampled arm is flagged") {
    std::vector<Row> rows = {{0, 1, true, 2.5, {0}}, {0, 0, false, {}, {1}}};
    const auto out = estimate_hajek(fixtures::frame(rows, 1));
    CHECK(out[0].flag == "degenerate-arm");
  }

  TEST_CASE("survey IPW with a constant propensity is the unweighted Hajek") {
    // no covariates: the propensity is the sampled treated share
    std::vector<Row> rows;
    const std::vector<double> ys = {1, 4, 2, 8, 3, 5, 7, 0.5, 6};
    for (std::size_t i = 0; i < ys.size(); ++i) rows.push_back({i % 2, static_cast<int>(i % 3 == 0), true, ys[i], {}, 1.0});
    const auto frame = fixtures::frame(rows, 2);
    auto spec = spec_of(Strategy::Direct, Family::SurveyIPW, LearnerKind::L, LearnerKind::L, LearnerKind::L);
    const auto ipw = estimate_survey_ipw(frame, spec);
    const auto hajek = estimate_hajek(frame);
    for (std::size_t j = 0; j < 2; ++j) CHECK(std::abs(*ipw[j].tau - *hajek[j].tau) < 1e-12);
  }

  TEST_CASE("literal survey IPW form") {
    // e = 0.5 for all: treated term 2 * sum(y1) / n_j, control term 2 * sum(y0) / sum of treated weights
    std::vector<Row> rows = {{0, 1, true, 3.0, {}, 2.0}, {0, 0, true, 1.0, {}, 1.0}, {0, 1, true, 5.0, {}, 2.0},
                             {0, 0, true, 2.0, {}, 1.0}};
    auto spec = spec_of(Strategy::Direct, Family::SurveyIPW, LearnerKind::L, LearnerKind::L, LearnerKind::L);
    spec.literal_survey_ipw = true;
    const auto out = estimate_survey_ipw(fixtures::frame(rows, 1), spec);
    CHECK(std::abs(*out[0].tau1 - 2 * 8.0 / 4) < 1e-12);
    CHECK(std::abs(*out[0].tau0 - 2 * 3.0 / 4) < 1e-12);
  }
}

TEST_SUITE("aggregate evaluator") {
  void check_same(const std::vector<AreaEstimate>& fast, const std::vector<AreaEstimate>& slow) {
    REQUIRE(fast.size() == slow.size());
    for (std::size_t j = 0; j < fast.size(); ++j) {
      CHECK(fast[j].flag == slow[j].flag);
      CHECK(fast[j].clipped == slow[j].clipped);
      CHECK(fast[j].estimator == slow[j].estimator);
      CHECK(fast[j].nuisance == slow[j].nuisance);
      REQUIRE(fast[j].ok() == slow[j].ok());
      if (!slow[j].ok()) continue;
      CHECK(std::abs(*fast[j].tau - *slow[j].tau) < 1e-10);
      CHECK(std::abs(*fast[j].tau1 - *slow[j].tau1) < 1e-10);
      CHECK(std::abs(*fast[j].tau0 - *slow[j].tau0) < 1e-10);
    }
  }

  TEST_CASE("matches the unit-level global estimators") {
    const auto frame = noisy_areas();
    const LearnerKind linear[] = {LearnerKind::L, LearnerKind::M, LearnerKind::H1r, LearnerKind::H2r, LearnerKind::H2m};
    for (auto family : {Family::OR, Family::IPW, Family::NIPW, Family::AIPW}) {
      for (auto mu : linear) {
        for (auto mu_a : linear) {
          for (bool interactions : {false, true}) {
            auto spec = spec_of(Strategy::Global, family, mu, LearnerKind::L, mu_a);
            spec.allow_erratic = true;
            spec.model.interactions = interactions;
            CAPTURE(spec.name());
            CAPTURE(interactions);
            PropensityCache cache;
            const GlobalEvaluator fast(frame, spec, &cache);
            check_same(fast(frame), estimate(frame, spec, &cache));
          }
        }
      }
    }
  }

  TEST_CASE("new outcomes on the same sample") {
    const auto frame = noisy_areas();
    auto spec = spec_of(Strategy::Global, Family::AIPW, LearnerKind::H2r, LearnerKind::L, LearnerKind::M);
    PropensityCache cache;
    const GlobalEvaluator fast(frame, spec, &cache);
    std::mt19937_64 rng(8);
    std::normal_distribution<double> z;
    for (int r = 0; r < 3; ++r) {
      std::vector<double> y;
      for (auto i : frame.sampled_rows()) y.push_back(*frame.outcome(i) + z(rng));
      const auto star = frame.with_sampled_outcomes(y);
      CHECK(fast.matches(star));
      check_same(fast(star), estimate(star, spec, &cache));
      check_same(fast(y), estimate(star, spec, &cache));
    }
  }

  TEST_CASE("degenerate areas and fully sampled populations") {
    std::vector<Row> rows;
    std::mt19937_64 rng(21);
    std::normal_distribution<double> z;
    for (std::size_t j = 0; j < 4; ++j) {
      for (int i = 0; i < 20; ++i) {
        const double x = z(rng);
        const int a = j == 3 ? 1 : (i % 2);
        rows.push_back({j, a, i % 2 == 0 || i < 6, 1 + x + a * (1 + 0.2 * j) + 0.3 * z(rng), {x}});
      }
    }
    const auto frame = fixtures::frame(rows, 4);
    std::vector<Row> full = rows;
    for (auto& r : full) r.s = true;
    for (const auto& f : {frame, fixtures::frame(full, 4)}) {
      for (auto family : {Family::NIPW, Family::AIPW}) {
        const auto spec = spec_of(Strategy::Global, family, LearnerKind::H1r, LearnerKind::L, LearnerKind::L);
        PropensityCache cache;
        const auto fast = GlobalEvaluator(f, spec, &cache)(f);
        CHECK(fast[3].flag == "degenerate-arm");
        check_same(fast, estimate(f, spec, &cache));
      }
    }
  }

  TEST_CASE("scope and sample checks") {
    CHECK_FALSE(GlobalEvaluator::supports(spec_of(Strategy::Global, Family::AIPW, LearnerKind::Gb, LearnerKind::Gb, LearnerKind::M)));
    CHECK_FALSE(GlobalEvaluator::supports(spec_of(Strategy::Global, Family::OR, LearnerKind::H2r, LearnerKind::Gb, LearnerKind::Gb)));
    CHECK(GlobalEvaluator::supports(spec_of(Strategy::Global, Family::OR, LearnerKind::Gb, LearnerKind::Gb, LearnerKind::M)));
    CHECK_FALSE(GlobalEvaluator::supports(spec_of(Strategy::Local, Family::AIPW, LearnerKind::L, LearnerKind::L, LearnerKind::L)));
    const auto frame = noisy_areas();
    const auto spec = spec_of(Strategy::Global, Family::AIPW, LearnerKind::Gb, LearnerKind::L, LearnerKind::L);
    CHECK_THROWS_WITH_AS(GlobalEvaluator(frame, spec), doctest::Contains("aggregate"), Error);
    const GlobalEvaluator fast(frame, spec_of(Strategy::Global, Family::AIPW, LearnerKind::L, LearnerKind::L, LearnerKind::L));
    CHECK_THROWS_AS(fast(linear_areas(false)), Error);
    CHECK_THROWS_AS(fast(std::vector<double>(3, 0.0)), Error);
  }
}
