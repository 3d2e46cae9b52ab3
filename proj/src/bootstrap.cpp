#include "csae/bootstrap.hpp"

#include "csae/error.hpp"
#include "csae/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

namespace csae {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

}  // namespace

std::string to_string(Scheme s) { return s == Scheme::Single ? "single" : "double"; }

Scheme parse_scheme(std::string_view name) {
  if (name == "single") return Scheme::Single;
  if (name == "double") return Scheme::Double;
  throw Error("invalid-config", "unknown bootstrap scheme '" + std::string(name) + "'");
}

ResidualSets decompose_residuals(const PopulationFrame& frame, const Eigen::VectorXd& marginal) {
  const auto& rows = frame.sampled_rows();
  if (static_cast<std::size_t>(marginal.size()) != rows.size()) {
    throw Error("dimension-mismatch", "one residual per sampled unit expected");
  }
  ResidualSets out;
  out.marginal = marginal;
  out.level2 = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(frame.area_count()));
  for (std::size_t k = 0; k < rows.size(); ++k) out.level2(static_cast<Eigen::Index>(frame.area_of(rows[k]))) += marginal(static_cast<Eigen::Index>(k));
  for (std::size_t j = 0; j < frame.area_count(); ++j) {
    const auto n = frame.sampled_count(j);
    if (n > 0) out.level2(static_cast<Eigen::Index>(j)) /= static_cast<double>(n);
  }
  out.level1.resize(marginal.size());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto r = static_cast<Eigen::Index>(k);
    out.level1(r) = marginal(r) - out.level2(static_cast<Eigen::Index>(frame.area_of(rows[k])));
  }
  return out;
}

ResidualModel fit_residual_model(const PopulationFrame& frame, LearnerKind mu, const ModelOptions& options) {
  for (std::size_t j = 0; j < frame.area_count(); ++j) {
    if (frame.sampled_count(j) == 0) {
      throw Error("empty-sample", "area " + frame.area_label(j) + " has no sampled units");
    }
  }
  ResidualModel out{fit_outcome_model(frame, mu, options), {}, {}};
  const auto& rows = frame.sampled_rows();
  out.fitted = predict_outcome(frame, out.model, rows);
  Eigen::VectorXd marginal(out.fitted.size());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    marginal(static_cast<Eigen::Index>(k)) = *frame.outcome(rows[k]) - out.fitted(static_cast<Eigen::Index>(k));
  }
  out.residuals = decompose_residuals(frame, marginal);
  return out;
}

ResidualSets compute_residuals(const PopulationFrame& frame, LearnerKind mu, const ModelOptions& options) {
  return fit_residual_model(frame, mu, options).residuals;
}

ResampledResiduals resample_residuals(const PopulationFrame& frame, const ResidualSets& sets, Rng& rng,
                                      bool within_area) {
  const auto m = frame.area_count();
  const auto& rows = frame.sampled_rows();
  ResampledResiduals out;
  out.level2.resize(static_cast<Eigen::Index>(m));
  std::uniform_int_distribution<std::size_t> pick_area(0, m - 1);
  for (std::size_t j = 0; j < m; ++j) out.level2(static_cast<Eigen::Index>(j)) = sets.level2(static_cast<Eigen::Index>(pick_area(rng)));
  out.level1.resize(static_cast<Eigen::Index>(rows.size()));
  if (!within_area) {
    std::uniform_int_distribution<std::size_t> pick(0, rows.size() - 1);
    for (std::size_t k = 0; k < rows.size(); ++k) out.level1(static_cast<Eigen::Index>(k)) = sets.level1(static_cast<Eigen::Index>(pick(rng)));
    return out;
  }
  // sampled_rows() is ascending and rows are grouped by area, so each area's
  // residuals form one contiguous block
  std::size_t start = 0;
  while (start < rows.size()) {
    const auto j = frame.area_of(rows[start]);
    const auto n = frame.sampled_count(j);
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    for (std::size_t k = start; k < start + n; ++k) {
      out.level1(static_cast<Eigen::Index>(k)) = sets.level1(static_cast<Eigen::Index>(start + pick(rng)));
    }
    start += n;
  }
  return out;
}

std::pair<std::size_t, std::size_t> percentile_ranks(std::size_t count, double alpha) {
  // the guard keeps exact products such as 0.975 * 1000 from rounding down
  const auto rank = [&](double q) {
    const auto r = static_cast<std::size_t>(std::floor(q * static_cast<double>(count) + 1e-9)) + 1;
    return std::min(r, count);
  };
  return {rank(alpha / 2), rank(1 - alpha / 2)};
}

std::optional<Interval> percentile_interval(std::span<const double> values, double shift, double alpha) {
  std::vector<double> v;
  v.reserve(values.size());
  for (double x : values) {
    if (!std::isnan(x)) v.push_back(x - shift);
  }
  if (v.empty()) return std::nullopt;
  std::sort(v.begin(), v.end());
  const auto [lo, hi] = percentile_ranks(v.size(), alpha);
  return Interval{v[lo - 1], v[hi - 1]};
}

namespace {

void check_options(const BootstrapOptions& options, bool inner) {
  if (options.replicates < 20) throw Error("invalid-config", "the bootstrap needs B >= 20");
  if (inner && options.inner < 20) throw Error("invalid-config", "the double bootstrap needs C >= 20");
  if (!(options.alpha > 0 && options.alpha < 1)) throw Error("invalid-config", "alpha must lie in (0, 1)");
}

PopulationFrame replicate_frame(const PopulationFrame& frame, const ResidualModel& fit, const BootstrapOptions& options,
                                Rng& rng) {
  const auto draw = resample_residuals(frame, fit.residuals, rng, options.within_area);
  const auto& rows = frame.sampled_rows();
  std::vector<double> y(rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto r = static_cast<Eigen::Index>(k);
    y[k] = fit.fitted(r) + draw.level2(static_cast<Eigen::Index>(frame.area_of(rows[k]))) + draw.level1(r);
  }
  return frame.with_sampled_outcomes(y);
}

std::vector<double> taus(const std::vector<AreaEstimate>& estimates, std::size_t m) {
  std::vector<double> out(m, kNaN);
  for (const auto& e : estimates) {
    if (e.area < m && e.tau) out[e.area] = *e.tau;
  }
  return out;
}

struct OuterResult {
  std::vector<double> tau;
  std::vector<double> inner_bias;  // NaN when unavailable
  std::vector<std::size_t> inner_dropped;
  std::vector<std::string> diagnostics;
};

BootstrapResult run(const PopulationFrame& frame, const AreaEstimator& estimator, LearnerKind mu,
                    const ModelOptions& model, const BootstrapOptions& options, Scheme scheme) {
  check_options(options, scheme == Scheme::Double);
  const auto m = frame.area_count();
  const std::size_t B = options.replicates;
  const std::size_t C = scheme == Scheme::Double ? options.inner : 0;

  BootstrapResult result;
  result.scheme = scheme;
  result.replicates = B;
  result.inner = C;
  result.alpha = options.alpha;
  result.point = estimator(frame);
  const auto fit = fit_residual_model(frame, mu, model);
  const auto tau_hat = taus(result.point, m);

  std::vector<OuterResult> outer(B);
  parallel_for(B, options.workers, [&](std::size_t b) {
    auto& slot = outer[b];
    slot.tau.assign(m, kNaN);
    slot.inner_bias.assign(m, kNaN);
    slot.inner_dropped.assign(m, 0);
    auto rng = make_rng(options.seed, {b});
    const auto star = replicate_frame(frame, fit, options, rng);
    try {
      slot.tau = taus(estimator(star), m);
    } catch (const Error& e) {
      slot.diagnostics.push_back("replicate " + std::to_string(b) + ": " + e.code() + ": " + e.what());
    }
    if (C == 0) return;
    std::vector<double> sum(m, 0.0);
    std::vector<std::size_t> kept(m, 0);
    try {
      const auto inner_fit = fit_residual_model(star, mu, model);
      for (std::size_t c = 0; c < C; ++c) {
        auto inner_rng = make_rng(options.seed, {b, c});
        const auto star2 = replicate_frame(star, inner_fit, options, inner_rng);
        std::vector<double> t;
        try {
          t = taus(estimator(star2), m);
        } catch (const Error& e) {
          slot.diagnostics.push_back("replicate " + std::to_string(b) + "." + std::to_string(c) + ": " +
                                     e.code() + ": " + e.what());
          t.assign(m, kNaN);
        }
        for (std::size_t j = 0; j < m; ++j) {
          if (std::isnan(t[j])) continue;
          sum[j] += t[j];
          ++kept[j];
        }
      }
    } catch (const Error& e) {
      slot.diagnostics.push_back("replicate " + std::to_string(b) + " inner model: " + e.code() + ": " + e.what());
    }
    for (std::size_t j = 0; j < m; ++j) {
      slot.inner_dropped[j] = C - kept[j];
      if (kept[j] > 0 && !std::isnan(slot.tau[j])) {
        slot.inner_bias[j] = sum[j] / static_cast<double>(kept[j]) - slot.tau[j];
      }
    }
  });

  result.draws.resize(static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(m));
  result.dropped.assign(m, 0);
  result.inner_dropped.assign(m, 0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t j = 0; j < m; ++j) {
      result.draws(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(j)) = outer[b].tau[j];
      if (std::isnan(outer[b].tau[j])) ++result.dropped[j];
      result.inner_dropped[j] += outer[b].inner_dropped[j];
    }
    for (auto& d : outer[b].diagnostics) result.diagnostics.push_back(std::move(d));
  }

  result.bias.assign(m, kNaN);
  result.inner_bias.assign(m, kNaN);
  result.corrected_bias.assign(m, kNaN);
  result.single_intervals.assign(m, std::nullopt);
  for (std::size_t j = 0; j < m; ++j) {
    auto& point = result.point[j];
    const auto unstable = static_cast<double>(result.dropped[j]) > options.unstable_share * static_cast<double>(B) ||
                          (C > 0 && static_cast<double>(result.inner_dropped[j]) >
                                        options.unstable_share * static_cast<double>(B * C));
    if (unstable) {
      result.unstable = true;
      if (point.flag.empty()) point.flag = "unstable";
    }
    if (std::isnan(tau_hat[j]) || result.dropped[j] == B) continue;
    const Eigen::VectorXd column = result.draws.col(static_cast<Eigen::Index>(j));
    double sum = 0.0;
    for (double t : column) {
      if (!std::isnan(t)) sum += t;
    }
    const double bias = sum / static_cast<double>(B - result.dropped[j]) - tau_hat[j];
    result.bias[j] = bias;
    const std::span<const double> values(column.data(), static_cast<std::size_t>(column.size()));
    result.single_intervals[j] = percentile_interval(values, bias, options.alpha);
    double corrected = bias;
    if (C > 0) {
      double inner_sum = 0.0;
      std::size_t inner_count = 0;
      for (std::size_t b = 0; b < B; ++b) {
        if (std::isnan(outer[b].inner_bias[j])) continue;
        inner_sum += outer[b].inner_bias[j];
        ++inner_count;
      }
      if (inner_count == 0) continue;
      result.inner_bias[j] = inner_sum / static_cast<double>(inner_count);
      corrected = 2 * bias - result.inner_bias[j];
    }
    result.corrected_bias[j] = corrected;
    point.interval = C > 0 ? percentile_interval(values, corrected, options.alpha) : result.single_intervals[j];
  }
  return result;
}

// Replicates keep the sample of `frame`, so linear global specs go through
// the aggregate evaluator; the original outcomes and anything else use
// estimate(), so point estimates match it to the last digit.
AreaEstimator spec_estimator(const PopulationFrame& frame, const EstimatorSpec& spec, PropensityCache* cache) {
  check_spec(spec);
  std::shared_ptr<const GlobalEvaluator> fast;
  if (GlobalEvaluator::supports(spec)) {
    try {
      fast = std::make_shared<const GlobalEvaluator>(frame, spec, cache);
    } catch (const Error&) {
      // estimate() reports the same failure on the point estimate
    }
  }
  auto observed = std::make_shared<std::vector<double>>();
  for (auto row : frame.sampled_rows()) observed->push_back(*frame.outcome(row));
  return [spec, cache, fast, observed](const PopulationFrame& f) {
    if (fast && fast->matches(f)) {
      const auto& rows = f.sampled_rows();
      for (std::size_t i = 0; i < rows.size(); ++i) {
        if (*f.outcome(rows[i]) != (*observed)[i]) return (*fast)(f);
      }
    }
    return estimate(f, spec, cache);
  };
}

}  // namespace

BootstrapResult bootstrap_ci(const PopulationFrame& frame, const AreaEstimator& estimator, LearnerKind mu,
                             const ModelOptions& model, const BootstrapOptions& options) {
  return run(frame, estimator, mu, model, options, Scheme::Single);
}

BootstrapResult double_bootstrap_ci(const PopulationFrame& frame, const AreaEstimator& estimator, LearnerKind mu,
                                    const ModelOptions& model, const BootstrapOptions& options) {
  return run(frame, estimator, mu, model, options, Scheme::Double);
}

BootstrapResult bootstrap_ci(const PopulationFrame& frame, const EstimatorSpec& spec,
                             const BootstrapOptions& options, PropensityCache* cache) {
  PropensityCache local;
  return bootstrap_ci(frame, spec_estimator(frame, spec, cache ? cache : &local), spec.nuisance.mu, spec.model, options);
}

BootstrapResult double_bootstrap_ci(const PopulationFrame& frame, const EstimatorSpec& spec,
                                    const BootstrapOptions& options, PropensityCache* cache) {
  PropensityCache local;
  return double_bootstrap_ci(frame, spec_estimator(frame, spec, cache ? cache : &local), spec.nuisance.mu, spec.model,
                             options);
}

}  // namespace csae
