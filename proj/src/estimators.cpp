#include "csae/estimators.hpp"

#include "csae/error.hpp"
#include "csae/rng.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

namespace csae {

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::Global: return "global";
    case Strategy::Local: return "local";
    case Strategy::Direct: return "direct";
  }
  return "?";
}

std::string to_string(Family f) {
  switch (f) {
    case Family::OR: return "OR";
    case Family::IPW: return "IPW";
    case Family::NIPW: return "NIPW";
    case Family::AIPW: return "AIPW";
    case Family::Hajek: return "Hajek";
    case Family::SurveyIPW: return "SurveyIPW";
    case Family::CrossfitAIPW: return "CrossfitAIPW";
  }
  return "?";
}

Strategy parse_strategy(std::string_view name) {
  for (auto s : {Strategy::Global, Strategy::Local, Strategy::Direct}) {
    if (name == to_string(s)) return s;
  }
  throw Error("invalid-spec", "unknown strategy '" + std::string(name) + "'");
}

Family parse_family(std::string_view name) {
  for (auto f : {Family::OR, Family::IPW, Family::NIPW, Family::AIPW, Family::Hajek, Family::SurveyIPW,
                 Family::CrossfitAIPW}) {
    if (name == to_string(f)) return f;
  }
  throw Error("invalid-spec", "unknown estimator family '" + std::string(name) + "'");
}

namespace {

bool uses_outcome_regressions(Family f) {
  return f == Family::OR || f == Family::AIPW || f == Family::CrossfitAIPW;
}

bool uses_propensity(Family f) {
  return f == Family::IPW || f == Family::NIPW || f == Family::AIPW || f == Family::CrossfitAIPW ||
         f == Family::SurveyIPW;
}

bool propensity_learner(LearnerKind k) { return k == LearnerKind::L || k == LearnerKind::Gb; }

}  // namespace

std::string EstimatorSpec::nuisance_tag() const {
  const auto& n = nuisance;
  switch (family) {
    case Family::Hajek: return "";
    case Family::SurveyIPW: return to_string(n.e1);
    default: break;
  }
  return to_string(n.mu) + "," + (uses_propensity(family) ? to_string(n.e1) : "-") + "," +
         (uses_outcome_regressions(family) ? to_string(n.mu_a) : "-");
}

std::string EstimatorSpec::name() const {
  std::string out = to_string(strategy) + "-" + to_string(family);
  const auto tag = nuisance_tag();
  if (!tag.empty()) out += "[" + tag + "]";
  return out;
}

bool EstimatorSpec::needs_outcome_model() const {
  if (strategy == Strategy::Direct) return false;
  if (strategy == Strategy::Global && family == Family::OR) return false;
  return true;
}

void check_spec(const EstimatorSpec& spec) {
  const auto& n = spec.nuisance;
  if (!(n.clip_lo > 0.0 && n.clip_lo < n.clip_hi && n.clip_hi < 1.0)) {
    throw Error("invalid-spec", "propensity clip bounds must satisfy 0 < lo < hi < 1");
  }
  const bool direct_family = spec.family == Family::Hajek || spec.family == Family::SurveyIPW;
  if (direct_family != (spec.strategy == Strategy::Direct)) {
    throw Error("invalid-spec", to_string(spec.family) + " cannot run under the " +
                                    to_string(spec.strategy) + " strategy");
  }
  if (spec.family == Family::CrossfitAIPW && spec.strategy != Strategy::Local) {
    throw Error("invalid-spec", "cross-fitted AIPW runs under the local strategy");
  }
  if (spec.family == Family::IPW && !spec.allow_erratic) {
    throw Error("erratic-estimator",
                "unnormalized IPW is erratic; set allow_erratic to run it anyway");
  }
  if (uses_propensity(spec.family) && !propensity_learner(n.e1)) {
    throw Error("invalid-spec", "propensity learner must be L or Gb, got " + to_string(n.e1));
  }
  if (spec.strategy == Strategy::Local && uses_outcome_regressions(spec.family) &&
      (is_mixed(n.mu_a))) {
    throw Error("invalid-spec", "local arm regressions must be L, M or Gb");
  }
  if (spec.family == Family::CrossfitAIPW && spec.folds < 1) {
    throw Error("invalid-spec", "cross-fitting needs at least one fold");
  }
}

// ---------------------------------------------------------------------------
// learner plumbing

namespace {

std::vector<std::size_t> areas_of(const PopulationFrame& frame, std::span<const std::size_t> rows) {
  std::vector<std::size_t> out(rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k) out[k] = frame.area_of(rows[k]);
  return out;
}

FittedLearner fit_regression(LearnerKind kind, const DesignMatrix& x, std::span<const double> y,
                             std::span<const std::size_t> areas, std::size_t area_count,
                             const ModelOptions& options) {
  switch (kind) {
    case LearnerKind::L: return fit_linear(x, y);
    case LearnerKind::M: return fit_median(x, y);
    case LearnerKind::Gb: return fit_gb(x, y, GbLoss::Squared, options.gb);
    case LearnerKind::H1r: return fit_lmm(x, y, areas, area_count, LmmVariant::H1r);
    case LearnerKind::H2r: return fit_lmm(x, y, areas, area_count, LmmVariant::H2r);
    case LearnerKind::H2m: return fit_lmm(x, y, areas, area_count, LmmVariant::H2m);
  }
  throw Error("unknown-learner", "unhandled learner");
}

FittedLearner fit_propensity(LearnerKind kind, const DesignMatrix& x, std::span<const double> a,
                             const ModelOptions& options) {
  switch (kind) {
    case LearnerKind::L: return fit_logistic(x, a, {.ridge_fallback = true});
    case LearnerKind::Gb: return fit_gb(x, a, GbLoss::Logistic, options.gb);
    default: break;
  }
  throw Error("invalid-spec", "propensity learner must be L or Gb");
}

std::vector<double> treatment_of(const PopulationFrame& frame, std::span<const std::size_t> rows) {
  std::vector<double> out(rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k) out[k] = frame.treated(rows[k]) ? 1.0 : 0.0;
  return out;
}

// Propensity over `eval` from a fit on `train`, clipped.
Eigen::VectorXd propensity(const PopulationFrame& frame, std::span<const std::size_t> train,
                           std::span<const std::size_t> eval, LearnerKind kind, const FeatureOptions& features,
                           const ModelOptions& options) {
  const auto recipe = DesignRecipe::fit(frame, train, features);
  const auto a = treatment_of(frame, train);
  const auto fit = fit_propensity(kind, recipe.build(frame, train), a, options);
  return predict(fit, recipe.build(frame, eval));
}

// Arm regressions fitted on `train` with responses y (indexed like train),
// evaluated on `eval`. Returns {mu0, mu1}.
std::pair<Eigen::VectorXd, Eigen::VectorXd> arm_regressions(const PopulationFrame& frame,
                                                            std::span<const std::size_t> train,
                                                            std::span<const double> y,
                                                            std::span<const std::size_t> eval,
                                                            LearnerKind kind, FeatureOptions features,
                                                            const ModelOptions& options) {
  const auto eval_areas = areas_of(frame, eval);
  std::pair<Eigen::VectorXd, Eigen::VectorXd> out;
  if (kind == LearnerKind::H2r || kind == LearnerKind::H2m) {
    // one model with the treatment column, evaluated at A = 0 and A = 1
    features.treatment = true;
    const auto recipe = DesignRecipe::fit(frame, train, features);
    if (!recipe.has_treatment()) throw Error("degenerate-arm", "training rows hold a single arm");
    const auto train_areas = areas_of(frame, train);
    const auto fit = fit_regression(kind, recipe.build(frame, train), y, train_areas, frame.area_count(), options);
    out.first = predict(fit, recipe.build(frame, eval, 0), eval_areas);
    out.second = predict(fit, recipe.build(frame, eval, 1), eval_areas);
    return out;
  }
  features.treatment = false;
  features.interactions = false;
  const auto recipe = DesignRecipe::fit(frame, train, features);
  const auto x_eval = recipe.build(frame, eval);
  for (int arm = 0; arm <= 1; ++arm) {
    std::vector<std::size_t> rows;
    std::vector<double> ys;
    for (std::size_t k = 0; k < train.size(); ++k) {
      if (frame.treated(train[k]) == (arm == 1)) {
        rows.push_back(train[k]);
        ys.push_back(y[k]);
      }
    }
    if (rows.empty()) throw Error("degenerate-arm", "no training rows in arm " + std::to_string(arm));
    const auto areas = areas_of(frame, rows);
    const auto fit = fit_regression(kind, recipe.build(frame, rows), ys, areas, frame.area_count(), options);
    (arm == 1 ? out.second : out.first) = predict(fit, x_eval, eval_areas);
  }
  return out;
}

std::vector<double> observed_outcomes(const PopulationFrame& frame) {
  const auto& rows = frame.sampled_rows();
  std::vector<double> y(rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto& v = frame.outcome(rows[k]);
    if (!v) throw Error("missing-outcome", "sampled row " + std::to_string(rows[k]) + " has no outcome");
    y[k] = *v;
  }
  return y;
}

std::string label_flag(const std::string& kind, const PopulationFrame& frame, std::size_t area) {
  return kind + "(area=" + frame.area_label(area) + ")";
}

void tag(std::vector<AreaEstimate>& estimates, const EstimatorSpec& spec) {
  const std::string name = to_string(spec.strategy) + "-" + to_string(spec.family);
  const std::string nuisance = spec.nuisance_tag();
  for (auto& e : estimates) {
    e.estimator = name;
    e.nuisance = nuisance;
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// imputation

OutcomeModel fit_outcome_model(const PopulationFrame& frame, LearnerKind kind, const ModelOptions& options) {
  const auto& rows = frame.sampled_rows();
  if (rows.empty()) throw Error("empty-sample", "no sampled units to fit the outcome model");
  FeatureOptions features{.treatment = true, .interactions = options.interactions};
  OutcomeModel model{DesignRecipe::fit(frame, rows, features), {}};
  const auto y = observed_outcomes(frame);
  const auto areas = areas_of(frame, rows);
  model.learner = fit_regression(kind, model.recipe.build(frame, rows), y, areas, frame.area_count(), options);
  return model;
}

Eigen::VectorXd predict_outcome(const PopulationFrame& frame, const OutcomeModel& model,
                                std::span<const std::size_t> rows) {
  const auto areas = areas_of(frame, rows);
  return predict(model.learner, model.recipe.build(frame, rows), areas);
}

ImputedFrame impute_outcomes(const PopulationFrame& frame, const OutcomeModel& model) {
  ImputedFrame out;
  out.base = frame;
  out.y_hat.resize(static_cast<Eigen::Index>(frame.size()));
  out.imputed.assign(frame.size(), 0);
  std::vector<std::size_t> missing;
  for (std::size_t i = 0; i < frame.size(); ++i) {
    if (frame.sampled(i)) {
      const auto& v = frame.outcome(i);
      if (!v) throw Error("missing-outcome", "sampled row " + std::to_string(i) + " has no outcome");
      out.y_hat(static_cast<Eigen::Index>(i)) = *v;
    } else {
      missing.push_back(i);
    }
  }
  if (!missing.empty()) {
    const auto pred = predict_outcome(frame, model, missing);
    for (std::size_t k = 0; k < missing.size(); ++k) {
      out.y_hat(static_cast<Eigen::Index>(missing[k])) = pred(static_cast<Eigen::Index>(k));
      out.imputed[missing[k]] = 1;
    }
  }
  return out;
}

ImputedFrame impute_outcomes(const PopulationFrame& frame, LearnerKind mu, const ModelOptions& options) {
  if (frame.sample_size() == frame.size()) {
    // nothing to predict; skip the fit entirely
    ImputedFrame out;
    out.base = frame;
    out.y_hat = Eigen::Map<const Eigen::VectorXd>(observed_outcomes(frame).data(),
                                                  static_cast<Eigen::Index>(frame.size()));
    out.imputed.assign(frame.size(), 0);
    return out;
  }
  return impute_outcomes(frame, fit_outcome_model(frame, mu, options));
}

// ---------------------------------------------------------------------------
// propensity cache

std::shared_ptr<const Eigen::VectorXd> PropensityCache::get(const PopulationFrame& frame,
                                                            const NuisanceTriple& nuisance,
                                                            const ModelOptions& options) {
  std::ostringstream key;
  key << frame.population().get() << '|' << to_string(nuisance.e1) << '|' << nuisance.clip_lo << '|'
      << nuisance.clip_hi;
  if (nuisance.e1 == LearnerKind::Gb) {
    const auto& g = options.gb;
    key << '|' << g.rounds << '|' << g.depth << '|' << g.learning_rate << '|' << g.min_leaf << '|' << g.max_bins;
  }
  std::lock_guard lock(mutex_);
  auto it = entries_.find(key.str());
  if (it != entries_.end() && it->second.first.lock() == frame.population()) return it->second.second;
  const auto rows = all_rows(frame);
  auto e = std::make_shared<Eigen::VectorXd>(
      propensity(frame, rows, rows, nuisance.e1, FeatureOptions{}, options));
  entries_[key.str()] = {frame.population(), e};
  return e;
}

// ---------------------------------------------------------------------------
// estimators

std::vector<AreaEstimate> combine(const PopulationFrame& frame, Family family, const NuisanceValues& values) {
  std::vector<AreaEstimate> out(frame.area_count());
  for (std::size_t j = 0; j < frame.area_count(); ++j) {
    auto& est = out[j];
    est.area = j;
    if (!values.clipped.empty()) est.clipped = values.clipped[j];
    const std::size_t treated = frame.treated_count(j);
    if (treated == 0 || treated == frame.area_size(j)) {
      est.flag = "degenerate-arm";
      continue;
    }
    const auto n = static_cast<double>(frame.area_size(j));
    double s1 = 0, s0 = 0, d1 = 0, d0 = 0;
    for (std::size_t i = frame.area_begin(j); i < frame.area_end(j); ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      const bool a = frame.treated(i);
      switch (family) {
        case Family::OR:
          s1 += values.mu1(r);
          s0 += values.mu0(r);
          break;
        case Family::IPW:
        case Family::NIPW:
          if (a) {
            s1 += values.y_hat(r) / values.e1(r);
            d1 += 1.0 / values.e1(r);
          } else {
            s0 += values.y_hat(r) / (1.0 - values.e1(r));
            d0 += 1.0 / (1.0 - values.e1(r));
          }
          break;
        default:  // AIPW and its cross-fitted version
          s1 += values.mu1(r);
          s0 += values.mu0(r);
          if (a) {
            s1 += (values.y_hat(r) - values.mu1(r)) / values.e1(r);
          } else {
            s0 += (values.y_hat(r) - values.mu0(r)) / (1.0 - values.e1(r));
          }
          break;
      }
    }
    if (family == Family::NIPW) {
      est.tau1 = s1 / d1;
      est.tau0 = s0 / d0;
    } else {
      est.tau1 = s1 / n;
      est.tau0 = s0 / n;
    }
    est.tau = *est.tau1 - *est.tau0;
  }
  return out;
}

namespace {

// Population propensity from the cache, clipped; counts clipped units per area.
Eigen::VectorXd global_propensity(const PopulationFrame& frame, const EstimatorSpec& spec, PropensityCache* cache,
                                  std::vector<std::size_t>& clipped) {
  const auto& nuisance = spec.nuisance;
  std::shared_ptr<const Eigen::VectorXd> shared;
  if (cache) {
    shared = cache->get(frame, nuisance, spec.model);
  } else {
    PropensityCache local;
    shared = local.get(frame, nuisance, spec.model);
  }
  Eigen::VectorXd e = *shared;
  clipped.assign(frame.area_count(), 0);
  for (std::size_t j = 0; j < frame.area_count(); ++j) {
    for (std::size_t i = frame.area_begin(j); i < frame.area_end(j); ++i) {
      const double p = e(static_cast<Eigen::Index>(i));
      if (p <= nuisance.clip_lo || p >= nuisance.clip_hi) ++clipped[j];
    }
  }
  clip_propensities(e, nuisance.clip_lo, nuisance.clip_hi);
  return e;
}

}  // namespace

std::vector<AreaEstimate> estimate_global(const PopulationFrame& frame, const EstimatorSpec& spec,
                                          PropensityCache* cache) {
  check_spec(spec);
  if (spec.strategy != Strategy::Global) throw Error("invalid-spec", "estimate_global needs the global strategy");
  const auto& nuisance = spec.nuisance;
  NuisanceValues values;
  const auto rows = all_rows(frame);
  if (spec.needs_outcome_model()) values.y_hat = impute_outcomes(frame, nuisance.mu, spec.model).y_hat;
  if (uses_outcome_regressions(spec.family)) {
    const auto y = observed_outcomes(frame);
    FeatureOptions features{.interactions = spec.model.interactions};
    std::tie(values.mu0, values.mu1) =
        arm_regressions(frame, frame.sampled_rows(), y, rows, nuisance.mu_a, features, spec.model);
  }
  if (uses_propensity(spec.family)) values.e1 = global_propensity(frame, spec, cache, values.clipped);
  auto out = combine(frame, spec.family, values);
  tag(out, spec);
  return out;
}

namespace {

// Per-area nuisance fits on the imputed rows of one area, written into the
// full-length vectors of `values`.
void local_fits(const ImputedFrame& imputed, const EstimatorSpec& spec, std::size_t area,
                std::span<const std::size_t> train, std::span<const std::size_t> eval, NuisanceValues& values) {
  const auto& frame = imputed.base;
  const FeatureOptions features{.individual = true, .contextual = false};
  if (uses_outcome_regressions(spec.family)) {
    std::vector<double> y(train.size());
    for (std::size_t k = 0; k < train.size(); ++k) y[k] = imputed.y_hat(static_cast<Eigen::Index>(train[k]));
    auto [mu0, mu1] = arm_regressions(frame, train, y, eval, spec.nuisance.mu_a, features, spec.model);
    for (std::size_t k = 0; k < eval.size(); ++k) {
      values.mu0(static_cast<Eigen::Index>(eval[k])) = mu0(static_cast<Eigen::Index>(k));
      values.mu1(static_cast<Eigen::Index>(eval[k])) = mu1(static_cast<Eigen::Index>(k));
    }
  }
  if (uses_propensity(spec.family)) {
    auto e = propensity(frame, train, eval, spec.nuisance.e1, features, spec.model);
    for (std::size_t k = 0; k < eval.size(); ++k) {
      double p = e(static_cast<Eigen::Index>(k));
      if (p <= spec.nuisance.clip_lo || p >= spec.nuisance.clip_hi) ++values.clipped[area];
      values.e1(static_cast<Eigen::Index>(eval[k])) =
          std::clamp(p, spec.nuisance.clip_lo, spec.nuisance.clip_hi);
    }
  }
}

NuisanceValues empty_values(const ImputedFrame& imputed) {
  const auto n = static_cast<Eigen::Index>(imputed.base.size());
  NuisanceValues v;
  v.y_hat = imputed.y_hat;
  v.mu0 = Eigen::VectorXd::Zero(n);
  v.mu1 = Eigen::VectorXd::Zero(n);
  v.e1 = Eigen::VectorXd::Constant(n, 0.5);
  v.clipped.assign(imputed.base.area_count(), 0);
  return v;
}

bool degenerate(const PopulationFrame& frame, std::size_t j) {
  return frame.treated_count(j) == 0 || frame.treated_count(j) == frame.area_size(j);
}

}  // namespace

std::vector<AreaEstimate> estimate_local(const ImputedFrame& imputed, const EstimatorSpec& spec) {
  check_spec(spec);
  const auto& frame = imputed.base;
  auto values = empty_values(imputed);
  std::vector<std::string> failures(frame.area_count());
  for (std::size_t j = 0; j < frame.area_count(); ++j) {
    if (degenerate(frame, j)) continue;
    const auto rows = area_rows(frame, j);
    try {
      local_fits(imputed, spec, j, rows, rows, values);
    } catch (const Error&) {
      failures[j] = label_flag("local-fit-failed", frame, j);
    }
  }
  auto out = combine(frame, spec.family, values);
  for (std::size_t j = 0; j < out.size(); ++j) {
    if (failures[j].empty()) continue;
    out[j].tau.reset();
    out[j].tau1.reset();
    out[j].tau0.reset();
    out[j].flag = failures[j];
  }
  tag(out, spec);
  return out;
}

std::vector<AreaEstimate> estimate_local(const PopulationFrame& frame, const EstimatorSpec& spec) {
  check_spec(spec);
  if (spec.strategy != Strategy::Local) throw Error("invalid-spec", "estimate_local needs the local strategy");
  return estimate_local(impute_outcomes(frame, spec.nuisance.mu, spec.model), spec);
}

std::vector<AreaEstimate> estimate_crossfit_aipw(const ImputedFrame& imputed, const EstimatorSpec& spec) {
  check_spec(spec);
  const auto& frame = imputed.base;
  auto values = empty_values(imputed);
  std::vector<std::string> failures(frame.area_count());
  for (std::size_t j = 0; j < frame.area_count(); ++j) {
    if (degenerate(frame, j)) continue;
    const auto rows = area_rows(frame, j);
    const std::size_t folds = std::min(spec.folds, rows.size());
    bool done = false;
    for (std::uint64_t attempt = 0; attempt < 2 && !done; ++attempt) {
      if (folds == 1) {
        try {
          local_fits(imputed, spec, j, rows, rows, values);
          done = true;
        } catch (const Error&) {
        }
        break;
      }
      std::vector<std::size_t> order = rows;
      auto rng = make_rng(spec.seed, {j, attempt});
      std::shuffle(order.begin(), order.end(), rng);
      try {
        for (std::size_t k = 0; k < folds; ++k) {
          std::vector<std::size_t> train, eval;
          for (std::size_t p = 0; p < order.size(); ++p) (p % folds == k ? eval : train).push_back(order[p]);
          std::sort(train.begin(), train.end());
          std::sort(eval.begin(), eval.end());
          local_fits(imputed, spec, j, train, eval, values);
        }
        done = true;
      } catch (const Error&) {
        values.clipped[j] = 0;
      }
    }
    if (!done) failures[j] = label_flag("crossfit-failed", frame, j);
  }
  auto out = combine(frame, Family::CrossfitAIPW, values);
  for (std::size_t j = 0; j < out.size(); ++j) {
    if (failures[j].empty()) continue;
    out[j].tau.reset();
    out[j].tau1.reset();
    out[j].tau0.reset();
    out[j].flag = failures[j];
  }
  tag(out, spec);
  return out;
}

std::vector<AreaEstimate> estimate_crossfit_aipw(const PopulationFrame& frame, const EstimatorSpec& spec) {
  check_spec(spec);
  return estimate_crossfit_aipw(impute_outcomes(frame, spec.nuisance.mu, spec.model), spec);
}

namespace {

// Per-area arm ratios over sampled units: sum(w * y) / sum(w) per arm.
std::vector<AreaEstimate> sampled_ratio(const PopulationFrame& frame, const std::vector<double>& weight) {
  std::vector<AreaEstimate> out(frame.area_count());
  std::vector<double> s1(frame.area_count()), s0(frame.area_count()), d1(frame.area_count()),
      d0(frame.area_count());
  const auto& rows = frame.sampled_rows();
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto i = rows[k];
    const auto j = frame.area_of(i);
    const double y = *frame.outcome(i);
    if (frame.treated(i)) {
      s1[j] += weight[k] * y;
      d1[j] += weight[k];
    } else {
      s0[j] += weight[k] * y;
      d0[j] += weight[k];
    }
  }
  for (std::size_t j = 0; j < frame.area_count(); ++j) {
    auto& est = out[j];
    est.area = j;
    const std::size_t n1 = frame.sampled_treated_count(j);
    const std::size_t n0 = frame.sampled_count(j) - n1;
    if (n1 == 0 || n0 == 0) {
      est.flag = "degenerate-arm";
      continue;
    }
    est.tau1 = s1[j] / d1[j];
    est.tau0 = s0[j] / d0[j];
    est.tau = *est.tau1 - *est.tau0;
  }
  return out;
}

}  // namespace

std::vector<AreaEstimate> estimate_hajek(const PopulationFrame& frame) {
  const auto& rows = frame.sampled_rows();
  observed_outcomes(frame);
  std::vector<double> w(rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k) w[k] = frame.design_weight(rows[k]);
  auto out = sampled_ratio(frame, w);
  EstimatorSpec spec;
  spec.strategy = Strategy::Direct;
  spec.family = Family::Hajek;
  tag(out, spec);
  return out;
}

std::vector<AreaEstimate> estimate_survey_ipw(const PopulationFrame& frame, const EstimatorSpec& spec) {
  check_spec(spec);
  const auto& rows = frame.sampled_rows();
  const auto y = observed_outcomes(frame);
  const auto& nuisance = spec.nuisance;
  Eigen::VectorXd e = propensity(frame, rows, rows, nuisance.e1, FeatureOptions{}, spec.model);
  std::vector<std::size_t> clipped(frame.area_count(), 0);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const double p = e(static_cast<Eigen::Index>(k));
    if (p <= nuisance.clip_lo || p >= nuisance.clip_hi) ++clipped[frame.area_of(rows[k])];
  }
  clip_propensities(e, nuisance.clip_lo, nuisance.clip_hi);
  std::vector<double> w(rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const double p = e(static_cast<Eigen::Index>(k));
    w[k] = frame.treated(rows[k]) ? 1.0 / p : 1.0 / (1.0 - p);
  }
  auto out = sampled_ratio(frame, w);
  if (spec.literal_survey_ipw) {
    // treated term over n_j, control term over the design-weight total of
    // the sampled treated units
    std::vector<double> s1(frame.area_count()), s0(frame.area_count()), nh(frame.area_count());
    for (std::size_t k = 0; k < rows.size(); ++k) {
      const auto i = rows[k];
      const auto j = frame.area_of(i);
      if (frame.treated(i)) {
        s1[j] += w[k] * y[k];
        nh[j] += frame.design_weight(i);
      } else {
        s0[j] += w[k] * y[k];
      }
    }
    for (std::size_t j = 0; j < frame.area_count(); ++j) {
      if (!out[j].ok()) continue;
      out[j].tau1 = s1[j] / static_cast<double>(frame.sampled_count(j));
      out[j].tau0 = s0[j] / nh[j];
      out[j].tau = *out[j].tau1 - *out[j].tau0;
    }
  }
  for (std::size_t j = 0; j < out.size(); ++j) out[j].clipped = clipped[j];
  tag(out, spec);
  return out;
}

std::vector<AreaEstimate> estimate(const PopulationFrame& frame, const EstimatorSpec& spec,
                                   PropensityCache* cache) {
  check_spec(spec);
  switch (spec.family) {
    case Family::Hajek: return estimate_hajek(frame);
    case Family::SurveyIPW: return estimate_survey_ipw(frame, spec);
    case Family::CrossfitAIPW: return estimate_crossfit_aipw(frame, spec);
    default: break;
  }
  if (spec.strategy == Strategy::Global) return estimate_global(frame, spec, cache);
  return estimate_local(frame, spec);
}

// ---------------------------------------------------------------------------
// aggregate evaluator for the global strategy

namespace {

// sum_i w_i * prediction_i over rows of one area whose design has A = arm,
// given x = sum_i w_i x_i and weight = sum_i w_i
double prediction_sum(const FittedLearner& fit, const Eigen::Ref<const Eigen::VectorXd>& x, double weight,
                      std::size_t area, int arm) {
  const auto j = static_cast<Eigen::Index>(area);
  auto random = [&](const Eigen::VectorXd& effects) { return j < effects.size() ? effects(j) : 0.0; };
  if (const auto* lin = std::get_if<LinearModel>(&fit.model)) return x.dot(lin->beta);
  if (const auto* mixed = std::get_if<MixedModel>(&fit.model)) {
    double s = x.dot(mixed->beta) + weight * random(mixed->u);
    if (mixed->slope_column) s += random(mixed->v) * x(*mixed->slope_column);
    return s;
  }
  if (const auto* arms = std::get_if<ArmModels>(&fit.model)) {
    const auto& model = arm ? arms->treated : arms->control;
    double s = weight * random(model.u);
    for (std::size_t c = 0; c < arms->columns.size(); ++c) s += x(arms->columns[c]) * model.beta(static_cast<Eigen::Index>(c));
    return s;
  }
  throw Error("invalid-spec", "aggregate predictions need a learner that is linear in its design");
}

template <class Weight>
void accumulate(const PopulationFrame& frame, const DesignMatrix& x, std::span<const std::size_t> rows, Weight&& weight,
                Eigen::MatrixXd& sums, Eigen::VectorXd& totals) {
  if (sums.size() == 0) {
    sums = Eigen::MatrixXd::Zero(x.cols(), static_cast<Eigen::Index>(frame.area_count()));
    totals = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(frame.area_count()));
  }
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const double w = weight(rows[k]);
    if (w == 0.0) continue;
    const auto j = static_cast<Eigen::Index>(frame.area_of(rows[k]));
    sums.col(j) += w * x.x.row(static_cast<Eigen::Index>(k)).transpose();
    totals(j) += w;
  }
}

}  // namespace

bool GlobalEvaluator::supports(const EstimatorSpec& spec) {
  if (spec.strategy != Strategy::Global) return false;
  switch (spec.family) {
    case Family::OR:
    case Family::IPW:
    case Family::NIPW:
    case Family::AIPW: break;
    default: return false;
  }
  if (spec.needs_outcome_model() && spec.nuisance.mu == LearnerKind::Gb) return false;
  if (uses_outcome_regressions(spec.family) && spec.nuisance.mu_a == LearnerKind::Gb) return false;
  return true;
}

GlobalEvaluator::GlobalEvaluator(const PopulationFrame& frame, const EstimatorSpec& spec, PropensityCache* cache)
    : frame_(frame), spec_(spec) {
  check_spec(spec);
  if (!supports(spec)) throw Error("invalid-spec", spec.name() + " has no aggregate form");
  const auto& rows = frame.sampled_rows();
  const auto all = all_rows(frame);
  areas_ = areas_of(frame, rows);
  propensity_ = uses_propensity(spec.family);
  regressions_ = uses_outcome_regressions(spec.family);

  Eigen::VectorXd e;
  if (propensity_) e = global_propensity(frame, spec, cache, clipped_);
  auto inverse = [&](std::size_t i) {
    const double p = e(static_cast<Eigen::Index>(i));
    return frame.treated(i) ? 1.0 / p : 1.0 / (1.0 - p);
  };
  if (propensity_) {
    inverse_weight_.resize(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t k = 0; k < rows.size(); ++k) inverse_weight_(static_cast<Eigen::Index>(k)) = inverse(rows[k]);
    for (int a = 0; a <= 1; ++a) {
      inverse_total_[a] = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(frame.area_count()));
      for (auto i : all) {
        if (frame.treated(i) == (a == 1)) inverse_total_[a](static_cast<Eigen::Index>(frame.area_of(i))) += inverse(i);
      }
    }
  }

  if (spec.needs_outcome_model() && frame.sample_size() < frame.size()) {
    if (rows.empty()) throw Error("empty-sample", "no sampled units to fit the outcome model");
    impute_ = true;
    const auto recipe =
        DesignRecipe::fit(frame, rows, {.treatment = true, .interactions = spec.model.interactions});
    x_mu_ = recipe.build(frame, rows);
    std::vector<std::size_t> missing[2];
    for (auto i : all) {
      if (!frame.sampled(i)) missing[frame.treated(i) ? 1 : 0].push_back(i);
    }
    for (int a = 0; a <= 1; ++a) {
      accumulate(frame, recipe.build(frame, missing[a]), missing[a], inverse, unsampled_[a].x, unsampled_[a].w);
    }
  }

  if (regressions_) {
    FeatureOptions features{.interactions = spec.model.interactions};
    const auto kind = spec.nuisance.mu_a;
    auto ones = [](std::size_t) { return 1.0; };
    if (kind == LearnerKind::H2r || kind == LearnerKind::H2m) {
      s_learner_ = true;
      features.treatment = true;
      const auto recipe = DesignRecipe::fit(frame, rows, features);
      if (!recipe.has_treatment()) throw Error("degenerate-arm", "training rows hold a single arm");
      arm_fit_[0].x = recipe.build(frame, rows);
      arm_fit_[0].areas = areas_;
      for (int a = 0; a <= 1; ++a) {
        const auto x = recipe.build(frame, all, a);
        accumulate(frame, x, all, ones, population_[a].x, population_[a].w);
        if (propensity_) {
          auto own = [&](std::size_t i) { return frame.treated(i) == (a == 1) ? inverse(i) : 0.0; };
          accumulate(frame, x, all, own, weighted_[a].x, weighted_[a].w);
        }
      }
    } else {
      features.treatment = false;
      features.interactions = false;
      const auto recipe = DesignRecipe::fit(frame, rows, features);
      const auto x = recipe.build(frame, all);
      for (int a = 0; a <= 1; ++a) {
        std::vector<std::size_t> arm_rows;
        auto& fit = arm_fit_[a];
        for (std::size_t k = 0; k < rows.size(); ++k) {
          if (frame.treated(rows[k]) != (a == 1)) continue;
          arm_rows.push_back(rows[k]);
          fit.index.push_back(k);
          fit.areas.push_back(areas_[k]);
        }
        if (arm_rows.empty()) throw Error("degenerate-arm", "no training rows in arm " + std::to_string(a));
        fit.x = recipe.build(frame, arm_rows);
        accumulate(frame, x, all, ones, population_[a].x, population_[a].w);
        if (propensity_) {
          auto own = [&](std::size_t i) { return frame.treated(i) == (a == 1) ? inverse(i) : 0.0; };
          accumulate(frame, x, all, own, weighted_[a].x, weighted_[a].w);
        }
      }
    }
  }
}

bool GlobalEvaluator::matches(const PopulationFrame& frame) const {
  return frame.population() == frame_.population() && frame.sample() == frame_.sample();
}

std::vector<AreaEstimate> GlobalEvaluator::operator()(const PopulationFrame& frame) const {
  if (!matches(frame)) throw Error("dimension-mismatch", "frame does not share the evaluator's sample");
  return (*this)(observed_outcomes(frame));
}

std::vector<AreaEstimate> GlobalEvaluator::operator()(std::span<const double> y) const {
  const auto& frame = frame_;
  const auto& rows = frame.sampled_rows();
  if (y.size() != rows.size()) throw Error("dimension-mismatch", "one outcome per sampled unit expected");
  const auto m = frame.area_count();
  const auto& model = spec_.model;

  FittedLearner mu;
  if (impute_) mu = fit_regression(spec_.nuisance.mu, x_mu_, y, areas_, m, model);
  FittedLearner arm[2];
  if (regressions_) {
    if (s_learner_) {
      arm[0] = fit_regression(spec_.nuisance.mu_a, arm_fit_[0].x, y, arm_fit_[0].areas, m, model);
    } else {
      for (int a = 0; a <= 1; ++a) {
        const auto& fit = arm_fit_[a];
        std::vector<double> ys(fit.index.size());
        for (std::size_t k = 0; k < ys.size(); ++k) ys[k] = y[fit.index[k]];
        arm[a] = fit_regression(spec_.nuisance.mu_a, fit.x, ys, fit.areas, m, model);
      }
    }
  }
  const auto& arm_model = [&](int a) -> const FittedLearner& { return s_learner_ ? arm[0] : arm[a]; };

  // observed part of sum_{A = a} Y / P(A = a)
  Eigen::MatrixXd observed = Eigen::MatrixXd::Zero(2, static_cast<Eigen::Index>(m));
  if (propensity_) {
    for (std::size_t k = 0; k < rows.size(); ++k) {
      observed(frame.treated(rows[k]) ? 1 : 0, static_cast<Eigen::Index>(areas_[k])) +=
          y[k] * inverse_weight_(static_cast<Eigen::Index>(k));
    }
  }

  std::vector<AreaEstimate> out(m);
  for (std::size_t j = 0; j < m; ++j) {
    auto& est = out[j];
    est.area = j;
    if (propensity_) est.clipped = clipped_[j];
    if (degenerate(frame, j)) {
      est.flag = "degenerate-arm";
      continue;
    }
    const auto col = static_cast<Eigen::Index>(j);
    const auto n = static_cast<double>(frame.area_size(j));
    double tau[2];
    for (int a = 0; a <= 1; ++a) {
      auto sum = [&](const FittedLearner& fit, const AreaSums& s) {
        return prediction_sum(fit, s.x.col(col), s.w(col), j, a);
      };
      double total = 0.0;
      if (spec_.family == Family::OR || spec_.family == Family::AIPW) total += sum(arm_model(a), population_[a]);
      if (spec_.family != Family::OR) {
        total += observed(a, col);
        if (impute_) total += sum(mu, unsampled_[a]);
      }
      if (spec_.family == Family::AIPW) total -= sum(arm_model(a), weighted_[a]);
      tau[a] = total / (spec_.family == Family::NIPW ? inverse_total_[a](col) : n);
    }
    est.tau1 = tau[1];
    est.tau0 = tau[0];
    est.tau = tau[1] - tau[0];
  }
  tag(out, spec_);
  return out;
}

}  // namespace csae
