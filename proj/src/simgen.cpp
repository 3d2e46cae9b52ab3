#include "csae/simgen.hpp"

#include "csae/error.hpp"
#include "csae/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace csae {

namespace {

// stream tags under the master seed
constexpr std::uint64_t kAreaStream = 1;
constexpr std::uint64_t kTreatmentStream = 2;
constexpr std::uint64_t kRatioStream = 3;
constexpr std::uint64_t kSampleStream = 4;

double normal(Rng& rng, double mean, double variance) {
  return std::normal_distribution<double>(mean, std::sqrt(variance))(rng);
}

}  // namespace

SimConfig SimConfig::calibrated() { return SimConfig{}; }

SimConfig SimConfig::literal() {
  SimConfig c;
  c.preset = "literal";
  c.rescale = false;
  c.noise_sd = 1.0;
  c.context_sd = std::sqrt(2.6);
  c.alpha_intercept = 0.0;
  return c;
}

SimConfig SimConfig::from_preset(const std::string& name) {
  if (name == "calibrated") return calibrated();
  if (name == "literal") return literal();
  throw Error("invalid-config", "unknown simulation preset '" + name + "'");
}

void SimConfig::check() const {
  auto fail = [](const std::string& what) { throw Error("invalid-config", what); };
  if (areas == 0 || area_size == 0 || dimension == 0) fail("areas, area_size and dimension must be positive");
  std::size_t total = 0;
  for (const auto& s : segments) {
    total += s.count;
    if (!(s.lo > 0 && s.lo <= s.hi && s.hi <= 1)) fail("ratio segment bounds must lie in (0, 1]");
  }
  if (total != areas) fail("ratio segment counts must add up to the number of areas");
  if (!(treated_rate > 0 && treated_rate <= 1)) fail("treated_rate must lie in (0, 1]");
  const double min_correlation = dimension > 1 ? -1.0 / static_cast<double>(dimension - 1) : -1.0;
  if (!(correlation > min_correlation && correlation < 1)) {
    fail("covariate covariance is not positive definite");
  }
  if (!(noise_sd >= 0) || !(context_sd >= 0) || !(covariate_scale >= 0)) fail("standard deviations must be non-negative");
  if (!(std::abs(noise_correlation) <= 1)) fail("noise_correlation must lie in [-1, 1]");
  if (c0_lo > c0_hi || c1_lo > c1_hi) fail("intercept ranges are reversed");
  if (guard_redraws < 0 || !(guard_floor > 0)) fail("log guard settings are invalid");
}

double SyntheticPopulation::outcome_variance(int arm) const {
  const auto& y = arm ? y1_ : y0_;
  const double mean = y.mean();
  return (y.array() - mean).square().sum() / static_cast<double>(y.size());
}

std::vector<double> SyntheticPopulation::treated_share() const {
  std::vector<double> out(population_->area_labels.size());
  for (std::size_t j = 0; j < out.size(); ++j) {
    const auto n = population_->area_offsets[j + 1] - population_->area_offsets[j];
    out[j] = static_cast<double>(population_->treated_count[j]) / static_cast<double>(n);
  }
  return out;
}

SyntheticPopulation generate_population(const SimConfig& config) {
  config.check();
  const auto m = config.areas;
  const auto nj = config.area_size;
  const auto p = static_cast<Eigen::Index>(config.dimension);
  const std::size_t total = m * nj;

  Eigen::MatrixXd sigma = Eigen::MatrixXd::Constant(p, p, config.correlation);
  sigma.diagonal().setOnes();
  const Eigen::MatrixXd chol = sigma.llt().matrixL();

  auto pop = std::make_shared<Population>();
  pop->area_offsets.resize(m + 1);
  pop->area_of_row.resize(total);
  pop->individual.resize(static_cast<Eigen::Index>(total), p);
  pop->contextual.resize(static_cast<Eigen::Index>(total), 1);
  pop->treated.assign(total, 0);
  pop->treated_count.assign(m, 0);
  for (Eigen::Index k = 0; k < p; ++k) pop->individual_names.push_back("x" + std::to_string(k + 1));
  pop->contextual_names = {"xs"};

  SyntheticPopulation out;
  out.y0_.resize(static_cast<Eigen::Index>(total));
  out.y1_.resize(static_cast<Eigen::Index>(total));
  out.tau_.assign(m, 0.0);

  // coefficients first, so a common scale can see every area
  struct Coefficients {
    double c0, c1, xs;
    Eigen::VectorXd b01, b02, b11, b12;
  };
  std::vector<Rng> rngs;
  std::vector<Coefficients> coef(m);
  for (std::size_t j = 0; j < m; ++j) {
    rngs.push_back(make_rng(config.seed, {kAreaStream, j}));
    auto& rng = rngs.back();
    auto& c = coef[j];
    c.c0 = std::uniform_real_distribution<double>(config.c0_lo, config.c0_hi)(rng);
    c.c1 = std::uniform_real_distribution<double>(config.c1_lo, config.c1_hi)(rng);
    c.xs = normal(rng, 0.0, config.context_sd * config.context_sd);
    c.b01.resize(p), c.b02.resize(p), c.b11.resize(p), c.b12.resize(p);
    for (Eigen::Index k = 0; k < p; ++k) {
      c.b01(k) = normal(rng, 0.0, config.beta_variance);
      c.b02(k) = config.exp_scale * normal(rng, 0.0, config.beta_variance);
      c.b11(k) = c.b01(k) + 2.0 * normal(rng, config.beta_shift_mean, config.beta_variance);
      c.b12(k) = c.b02(k) + config.exp_scale * normal(rng, config.beta_shift_mean, config.beta_variance);
    }
  }
  // index SD under sigma, rescaled per area or by one factor per index
  auto sd = [&](const Eigen::VectorXd& b) { return std::sqrt(b.dot(sigma * b)); };
  auto rescale = [&](Eigen::VectorXd Coefficients::*member, double target) {
    if (!config.rescale) return;
    double mean_sd = 0.0;
    for (const auto& c : coef) mean_sd += sd(c.*member) / static_cast<double>(m);
    for (auto& c : coef) {
      const double s = config.common_scale ? mean_sd : sd(c.*member);
      if (s > 0) c.*member *= target / s;
    }
  };
  rescale(&Coefficients::b01, config.linear_index_sd);
  rescale(&Coefficients::b11, config.linear_index_sd);
  rescale(&Coefficients::b02, config.exp_index_sd0);
  rescale(&Coefficients::b12, config.exp_index_sd1);

  for (std::size_t j = 0; j < m; ++j) {
    pop->area_labels.push_back(std::to_string(j + 1));
    pop->area_offsets[j] = j * nj;
    auto& rng = rngs[j];
    const auto& [c0, c1, xs, b01, b02, b11, b12] = coef[j];
    std::normal_distribution<double> z;
    const double rho = config.noise_correlation;
    const double rest = std::sqrt(1 - rho * rho);
    double sum = 0.0;
    for (std::size_t i = 0; i < nj; ++i) {
      const auto row = static_cast<Eigen::Index>(j * nj + i);
      pop->area_of_row[j * nj + i] = j;
      Eigen::VectorXd raw(p);
      for (Eigen::Index k = 0; k < p; ++k) raw(k) = z(rng);
      const Eigen::VectorXd x = config.covariate_scale * (chol * raw);
      pop->individual.row(row) = x.transpose();
      pop->contextual(row, 0) = xs;
      const double base0 = c0 + xs + x.dot(b01) + std::exp(x.dot(b02));
      const double base1 = c1 + xs + x.dot(b11) + std::exp(x.dot(b12));
      double u0 = z(rng), u1 = z(rng);
      // redraw the noise of a non-positive log argument, then clamp
      auto guarded = [&](double base, auto&& noise, auto&& redraw) {
        double arg = base + config.noise_sd * noise();
        if (arg > 0) return std::log(arg);
        ++out.diagnostics_.guard_redraws;
        for (int t = 0; t < config.guard_redraws && arg <= 0; ++t) {
          redraw();
          arg = base + config.noise_sd * noise();
        }
        if (arg <= 0) {
          ++out.diagnostics_.guard_clamps;
          arg = config.guard_floor;
        }
        return std::log(arg);
      };
      const double y0 = guarded(base0, [&] { return u0; }, [&] { u0 = z(rng); });
      const double y1 = guarded(base1, [&] { return rho * u0 + rest * u1; }, [&] { u1 = z(rng); });
      out.y0_(row) = y0;
      out.y1_(row) = y1;
      sum += y1 - y0;
    }
    out.tau_[j] = sum / static_cast<double>(nj);
  }
  pop->area_offsets[m] = total;

  auto ratio_rng = make_rng(config.seed, {kRatioStream});
  for (const auto& s : config.segments) {
    std::uniform_real_distribution<double> u(s.lo, s.hi);
    for (std::size_t k = 0; k < s.count; ++k) out.ratio_.push_back(u(ratio_rng));
  }
  out.population_ = std::move(pop);
  assign_treatment(out, config);
  return out;
}

void assign_treatment(SyntheticPopulation& population, const SimConfig& config) {
  auto pop = std::make_shared<Population>(*population.population_);
  const auto m = pop->area_labels.size();
  const auto p = pop->individual.cols();
  population.propensity_.resize(static_cast<Eigen::Index>(population.size()));
  std::fill(pop->treated_count.begin(), pop->treated_count.end(), 0);
  for (std::size_t j = 0; j < m; ++j) {
    auto rng = make_rng(config.seed, {kTreatmentStream, j});
    Eigen::VectorXd alpha(p);
    for (Eigen::Index k = 0; k < p; ++k) {
      alpha(k) = k + 1 < p ? normal(rng, config.alpha_mean, config.alpha_variance)
                           : normal(rng, 0.0, config.alpha_last_variance);
    }
    const double alpha_xs = normal(rng, 0.0, config.alpha_context_variance);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (std::size_t i = pop->area_offsets[j]; i < pop->area_offsets[j + 1]; ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      const double eta = config.alpha_scale *
                         (config.alpha_intercept + pop->individual.row(r).dot(alpha) + pop->contextual(r, 0) * alpha_xs);
      const double e = 1.0 / (1.0 + std::exp(-eta));
      population.propensity_(r) = e;
      pop->treated[i] = u(rng) < e ? 1 : 0;
      pop->treated_count[j] += pop->treated[i];
    }
  }
  population.population_ = std::move(pop);
}

std::size_t treated_sample_size(std::size_t treated, double rate) {
  return static_cast<std::size_t>(std::floor(rate * static_cast<double>(treated) + 0.5));
}

std::size_t control_sample_size(std::size_t n1, double ratio) {
  return static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(n1)));
}

PopulationFrame draw_sample(const SyntheticPopulation& population, const SimConfig& config, std::uint64_t seed) {
  const auto& pop = *population.population();
  const auto m = pop.area_labels.size();
  const auto total = population.size();
  std::vector<std::uint8_t> sampled(total, 0);
  std::vector<std::optional<double>> outcome(total);
  std::vector<std::optional<double>> weight(total);
  const auto& ratio = population.control_ratio();
  if (ratio.size() != m) throw Error("invalid-config", "ratio vector does not match the area count");
  for (std::size_t j = 0; j < m; ++j) {
    std::vector<std::size_t> arms[2];
    for (std::size_t i = pop.area_offsets[j]; i < pop.area_offsets[j + 1]; ++i) arms[pop.treated[i]].push_back(i);
    const auto n1 = treated_sample_size(arms[1].size(), config.treated_rate);
    const auto n0 = std::min(arms[0].size(), control_sample_size(n1, ratio[j]));
    const std::size_t take[2] = {n0, n1};
    auto rng = make_rng(seed, {kSampleStream, j});
    for (int a = 1; a >= 0; --a) {
      auto& rows = arms[a];
      // partial Fisher-Yates: the first take[a] positions form the draw
      for (std::size_t k = 0; k < take[a]; ++k) {
        std::uniform_int_distribution<std::size_t> pick(k, rows.size() - 1);
        std::swap(rows[k], rows[pick(rng)]);
        const auto i = rows[k];
        sampled[i] = 1;
        outcome[i] = population.potential_outcome(i, a);
        weight[i] = static_cast<double>(rows.size()) / static_cast<double>(take[a]);
      }
    }
  }
  return PopulationFrame::from_parts(population.population(), std::move(sampled), std::move(outcome),
                                     std::move(weight));
}

}  // namespace csae
