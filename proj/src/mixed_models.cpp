#include "csae/error.hpp"
#include "csae/learners.hpp"

#include <boost/math/tools/minima.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

namespace csae {

namespace {

// Upper end of the ratio search, rho = lambda / (1 + lambda).
constexpr double kRhoMax = 1.0 - 1e-8;
constexpr int kBrentBits = 30;

double ratio(double rho) { return rho / (1.0 - rho); }

// Sufficient statistics of y = X beta + Z_j b_j + e with Z_j = [1] or [1, a].
// The per-area cross products X'Z_j are stacked into one p x (q m) block so
// that the Woodbury downdate of X'X is a single matrix product.
class RemlProblem {
 public:
  RemlProblem(const Eigen::MatrixXd& x, std::span<const double> y,
              std::span<const std::size_t> areas, std::size_t area_count,
              std::optional<Eigen::Index> slope)
      : n_(x.rows()), p_(x.cols()), q_(slope ? 2 : 1), m_(static_cast<Eigen::Index>(area_count)) {
    const Eigen::Map<const Eigen::VectorXd> yv(y.data(), n_);
    xtx_.noalias() = x.transpose() * x;
    xty_.noalias() = x.transpose() * yv;
    yty_ = yv.squaredNorm();
    xtz_ = Eigen::MatrixXd::Zero(p_, q_ * m_);
    zty_ = Eigen::VectorXd::Zero(q_ * m_);
    ztz_.assign(area_count, {0.0, 0.0, 0.0});
    counts_.assign(area_count, 0);
    for (Eigen::Index i = 0; i < n_; ++i) {
      const auto j = static_cast<Eigen::Index>(areas[static_cast<std::size_t>(i)]);
      auto& g = ztz_[static_cast<std::size_t>(j)];
      ++counts_[static_cast<std::size_t>(j)];
      xtz_.col(j) += x.row(i).transpose();
      g[0] += 1.0;
      zty_(j) += yv(i);
      if (slope) {
        const double z1 = x(i, *slope);
        xtz_.col(m_ + j) += z1 * x.row(i).transpose();
        g[1] += z1;
        g[2] += z1 * z1;
        zty_(m_ + j) += z1 * yv(i);
      }
    }
  }

  Eigen::Index n() const { return n_; }
  Eigen::Index p() const { return p_; }
  std::size_t observed_areas() const {
    return static_cast<std::size_t>(std::count_if(counts_.begin(), counts_.end(), [](auto c) { return c > 0; }));
  }

  struct Evaluation {
    Eigen::VectorXd beta;
    double rhr = 0.0;
    double logdet_h = 0.0;
    double logdet_a = 0.0;
    bool ok = false;
  };

  Evaluation evaluate(double lambda_u, double lambda_v) const {
    Evaluation ev;
    const double su = std::sqrt(lambda_u);
    const double sv = q_ > 1 ? std::sqrt(lambda_v) : 0.0;
    // xtz W_j with W_j = S (I + S Z'Z S)^{-1} S, area by area
    Eigen::MatrixXd xw(p_, q_ * m_);
    Eigen::VectorXd wz(q_ * m_);
    double yhy = yty_;
    for (Eigen::Index j = 0; j < m_; ++j) {
      const auto& g = ztz_[static_cast<std::size_t>(j)];
      if (counts_[static_cast<std::size_t>(j)] == 0) {
        xw.col(j).setZero();
        wz(j) = 0.0;
        if (q_ > 1) {
          xw.col(m_ + j).setZero();
          wz(m_ + j) = 0.0;
        }
        continue;
      }
      const double m00 = 1.0 + su * su * g[0];
      const double m01 = su * sv * g[1];
      const double m11 = 1.0 + sv * sv * g[2];
      const double det = m00 * m11 - m01 * m01;
      if (!(det > 0.0)) return ev;
      ev.logdet_h += std::log(det);
      const double w00 = su * su * m11 / det;
      const double w01 = -su * sv * m01 / det;
      const double w11 = sv * sv * m00 / det;
      if (q_ > 1) {
        xw.col(j) = w00 * xtz_.col(j) + w01 * xtz_.col(m_ + j);
        xw.col(m_ + j) = w01 * xtz_.col(j) + w11 * xtz_.col(m_ + j);
        const double z0 = zty_(j), z1 = zty_(m_ + j);
        wz(j) = w00 * z0 + w01 * z1;
        wz(m_ + j) = w01 * z0 + w11 * z1;
        yhy -= z0 * wz(j) + z1 * wz(m_ + j);
      } else {
        xw.col(j) = w00 * xtz_.col(j);
        wz(j) = w00 * zty_(j);
        yhy -= zty_(j) * wz(j);
      }
    }
    Eigen::MatrixXd a = xtx_;
    a.noalias() -= xw * xtz_.transpose();
    Eigen::VectorXd b = xty_;
    b.noalias() -= xtz_ * wz;
    Eigen::LLT<Eigen::MatrixXd> llt(a);
    if (llt.info() != Eigen::Success) return ev;
    ev.logdet_a = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    ev.beta = llt.solve(b);
    ev.rhr = yhy - b.dot(ev.beta);
    ev.ok = std::isfinite(ev.rhr);
    return ev;
  }

  // -2 REML log-likelihood with sigma_e^2 profiled out (constants dropped).
  double profiled(double lambda_u, double lambda_v) const {
    const auto ev = evaluate(lambda_u, lambda_v);
    if (!ev.ok) return std::numeric_limits<double>::infinity();
    const double dof = static_cast<double>(n_ - p_);
    const double sigma2 = std::max(ev.rhr / dof, std::numeric_limits<double>::min());
    return dof * std::log(sigma2) + ev.logdet_h + ev.logdet_a;
  }

  // Same, at a given sigma_e^2.
  double deviance(double lambda_u, double lambda_v, double sigma_e2) const {
    const auto ev = evaluate(lambda_u, lambda_v);
    if (!ev.ok) return std::numeric_limits<double>::infinity();
    const double dof = static_cast<double>(n_ - p_);
    return dof * std::log(sigma_e2) + ev.logdet_h + ev.logdet_a + ev.rhr / sigma_e2;
  }

  // BLUPs b_j = W_j (Z_j'y - Z_j'X beta) in the original scale.
  Eigen::MatrixXd blups(double lambda_u, double lambda_v, const Eigen::VectorXd& beta) const {
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(m_, q_);
    const double su = std::sqrt(lambda_u);
    const double sv = q_ > 1 ? std::sqrt(lambda_v) : 0.0;
    for (Eigen::Index j = 0; j < m_; ++j) {
      if (counts_[static_cast<std::size_t>(j)] == 0) continue;
      const auto& g = ztz_[static_cast<std::size_t>(j)];
      const double m00 = 1.0 + su * su * g[0];
      const double m01 = su * sv * g[1];
      const double m11 = 1.0 + sv * sv * g[2];
      const double det = m00 * m11 - m01 * m01;
      const double r0 = zty_(j) - xtz_.col(j).dot(beta);
      if (q_ > 1) {
        const double r1 = zty_(m_ + j) - xtz_.col(m_ + j).dot(beta);
        out(j, 0) = (su * su * m11 * r0 - su * sv * m01 * r1) / det;
        out(j, 1) = (-su * sv * m01 * r0 + sv * sv * m00 * r1) / det;
      } else {
        out(j, 0) = su * su * r0 / m00;
      }
    }
    return out;
  }

 private:
  Eigen::Index n_, p_, q_, m_;
  Eigen::MatrixXd xtx_;
  Eigen::VectorXd xty_;
  double yty_ = 0.0;
  Eigen::MatrixXd xtz_;  // p x (q m): intercept block, then slope block
  Eigen::VectorXd zty_;
  std::vector<std::array<double, 3>> ztz_;  // (n_j, sum z, sum z^2)
  std::vector<Eigen::Index> counts_;
};

// Brent on [0, kRhoMax], also checking the boundary rho = 0.
template <class F>
std::pair<double, double> minimise_rho(F&& f) {
  auto [rho, value] = boost::math::tools::brent_find_minima(f, 0.0, kRhoMax, kBrentBits);
  const double at_zero = f(0.0);
  if (at_zero <= value) return {0.0, at_zero};
  return {rho, value};
}

// Projected Newton on the ratio box [0, kRhoMax]^2 with finite-difference
// derivatives. Coordinates pinned at a bound with an outward gradient stay
// fixed. Returns false when it stalls; (u, v, value) only ever improve.
template <class F>
bool newton_polish(F&& f, double& u, double& v, double& value, double tolerance, FitDiagnostics& diag) {
  constexpr double h = 1e-5;
  constexpr int kMaxSteps = 50;
  for (int it = 0; it < kMaxSteps; ++it) {
    double x[2] = {u, v};
    double g[2], hd[2];
    for (int k = 0; k < 2; ++k) {
      double lo[2] = {x[0], x[1]}, hi[2] = {x[0], x[1]};
      if (x[k] - h >= 0.0 && x[k] + h <= kRhoMax) {
        lo[k] -= h;
        hi[k] += h;
        const double fl = f(lo[0], lo[1]), fh = f(hi[0], hi[1]);
        g[k] = (fh - fl) / (2 * h);
        hd[k] = (fh - 2 * value + fl) / (h * h);
      } else {
        // one-sided at a bound
        const double dir = x[k] - h < 0.0 ? 1.0 : -1.0;
        lo[k] += dir * h;
        hi[k] += 2 * dir * h;
        const double f1 = f(lo[0], lo[1]), f2 = f(hi[0], hi[1]);
        g[k] = dir * (-3 * value + 4 * f1 - f2) / (2 * h);
        hd[k] = (value - 2 * f1 + f2) / (h * h);
      }
    }
    bool free[2];
    for (int k = 0; k < 2; ++k) {
      free[k] = !((x[k] <= 0.0 && g[k] > 0.0) || (x[k] >= kRhoMax && g[k] < 0.0));
    }
    double step[2] = {0.0, 0.0};
    if (free[0] && free[1]) {
      const double su = x[0] + h <= kRhoMax ? h : -h;
      const double sv = x[1] + h <= kRhoMax ? h : -h;
      const double cross = (f(x[0] + su, x[1] + sv) - f(x[0] + su, x[1]) - f(x[0], x[1] + sv) + value) / (su * sv);
      const double det = hd[0] * hd[1] - cross * cross;
      if (!(hd[0] > 0.0 && det > 0.0)) return false;
      step[0] = -(hd[1] * g[0] - cross * g[1]) / det;
      step[1] = -(hd[0] * g[1] - cross * g[0]) / det;
    } else {
      for (int k = 0; k < 2; ++k) {
        if (!free[k]) continue;
        if (!(hd[k] > 0.0)) return false;
        step[k] = -g[k] / hd[k];
      }
    }
    double scale = 1.0;
    for (int halving = 0; halving < 30; ++halving, scale *= 0.5) {
      const double nu = std::clamp(x[0] + scale * step[0], 0.0, kRhoMax);
      const double nv = std::clamp(x[1] + scale * step[1], 0.0, kRhoMax);
      const double moved = std::max(std::abs(nu - x[0]), std::abs(nv - x[1]));
      if (moved <= tolerance) {
        ++diag.iterations;
        return true;
      }
      const double next = f(nu, nv);
      if (next <= value) {
        u = nu;
        v = nv;
        value = next;
        break;
      }
    }
    ++diag.iterations;
    diag.trace.push_back(value);
    if (u == x[0] && v == x[1]) return false;
  }
  return false;
}

void check_inputs(const DesignMatrix& x, std::span<const double> y,
                  std::span<const std::size_t> areas, std::size_t area_count) {
  if (static_cast<std::size_t>(x.rows()) != y.size() || areas.size() != y.size()) {
    throw Error("dimension-mismatch", "design, response and area vectors differ in length");
  }
  for (auto a : areas) {
    if (a >= area_count) throw Error("dimension-mismatch", "area index out of range");
  }
  if (x.rows() <= x.cols()) throw Error("singular-design", "no residual degrees of freedom");
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(x.x);
  if (qr.rank() < x.cols()) throw Error("singular-design", "mixed model design is rank deficient");
}

MixedModel fit_single(const DesignMatrix& x, std::span<const double> y,
                      std::span<const std::size_t> areas, std::size_t area_count,
                      std::optional<Eigen::Index> slope, const LmmOptions& options,
                      FitDiagnostics& diag) {
  check_inputs(x, y, areas, area_count);
  const RemlProblem problem(x.x, y, areas, area_count, slope);
  if (problem.observed_areas() < 2) {
    throw Error("too-few-areas", "a random area effect needs at least two areas with data");
  }

  double lu = 0.0;
  double lv = 0.0;
  if (!options.force_zero_variance) {
    if (!slope) {
      auto [rho, value] = minimise_rho([&](double r) { return problem.profiled(ratio(r), 0.0); });
      lu = ratio(rho);
      diag.objective = value;
      diag.iterations = 1;
    } else {
      auto f = [&](double u, double v) { return problem.profiled(ratio(u), ratio(v)); };
      // one sweep brackets the optimum globally along each axis
      auto [ru, value] = minimise_rho([&](double r) { return f(r, 0.0); });
      double rv = 0.0;
      std::tie(rv, value) = minimise_rho([&](double r) { return f(ru, r); });
      diag.trace.push_back(value);
      diag.iterations = 1;
      diag.converged = options.newton && newton_polish(f, ru, rv, value, options.tolerance, diag);
      for (int cycle = 2; !diag.converged && cycle <= options.max_cycles; ++cycle) {
        const double before = value;
        const double ru_old = ru;
        const double rv_old = rv;
        std::tie(ru, value) = minimise_rho([&](double r) { return f(r, rv); });
        std::tie(rv, value) = minimise_rho([&](double r) { return f(ru, r); });
        diag.iterations = cycle;
        diag.trace.push_back(value);
        const double step = std::max(std::abs(ru - ru_old), std::abs(rv - rv_old));
        if (step <= 10 * options.tolerance ||
            std::abs(before - value) <= options.tolerance * 1e-2 * std::max(1.0, std::abs(value))) {
          diag.converged = true;
        }
      }
      if (!diag.converged) diag.warnings.push_back("variance components did not converge");
      lu = ratio(ru);
      lv = ratio(rv);
      diag.objective = value;
    }
  }

  const auto ev = problem.evaluate(lu, lv);
  if (!ev.ok) throw Error("singular-design", "mixed model normal equations are singular");
  MixedModel model;
  model.beta = ev.beta;
  model.sigma_e2 = std::max(ev.rhr, 0.0) / static_cast<double>(problem.n() - problem.p());
  model.sigma_u2 = lu * model.sigma_e2;
  model.sigma_v2 = lv * model.sigma_e2;
  model.slope_column = slope;
  const auto effects = problem.blups(lu, lv, ev.beta);
  model.u = effects.col(0);
  model.v = slope ? Eigen::VectorXd(effects.col(1))
                  : Eigen::VectorXd::Zero(static_cast<Eigen::Index>(area_count));
  if (options.force_zero_variance) diag.objective = problem.profiled(0.0, 0.0);
  return model;
}

DesignMatrix select_columns(const DesignMatrix& x, const std::vector<Eigen::Index>& rows,
                            const std::vector<Eigen::Index>& columns) {
  DesignMatrix out;
  out.x.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(columns.size()));
  for (std::size_t c = 0; c < columns.size(); ++c) {
    const auto col = static_cast<Eigen::Index>(c);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      out.x(static_cast<Eigen::Index>(r), col) = x.x(rows[r], columns[c]);
    }
    out.names.push_back(x.names[static_cast<std::size_t>(columns[c])]);
  }
  return out;
}

}  // namespace

FittedLearner fit_lmm(const DesignMatrix& x, std::span<const double> y,
                      std::span<const std::size_t> areas, std::size_t area_count,
                      LmmVariant variant, const LmmOptions& options) {
  FittedLearner out;
  out.columns = x.names;
  switch (variant) {
    case LmmVariant::H1r:
      out.kind = LearnerKind::H1r;
      out.model = fit_single(x, y, areas, area_count, std::nullopt, options, out.diagnostics);
      break;
    case LmmVariant::H2r:
      out.kind = LearnerKind::H2r;
      if (!x.treatment_column) {
        throw Error("missing-treatment", "a random treatment slope needs the treatment column");
      }
      out.model = fit_single(x, y, areas, area_count, x.treatment_column, options, out.diagnostics);
      break;
    case LmmVariant::H2m: {
      out.kind = LearnerKind::H2m;
      if (!x.treatment_column) {
        throw Error("missing-treatment", "arm-specific models need the treatment column");
      }
      ArmModels arms;
      arms.treatment_column = *x.treatment_column;
      arms.columns = x.covariate_columns();
      for (int arm = 0; arm <= 1; ++arm) {
        std::vector<Eigen::Index> rows;
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
          if ((x.x(i, arms.treatment_column) > 0.5) == (arm == 1)) rows.push_back(i);
        }
        if (rows.empty()) throw Error("degenerate-arm", "arm " + std::to_string(arm) + " has no rows");
        const DesignMatrix sub = select_columns(x, rows, arms.columns);
        std::vector<double> ys;
        std::vector<std::size_t> as;
        for (auto r : rows) {
          ys.push_back(y[static_cast<std::size_t>(r)]);
          as.push_back(areas[static_cast<std::size_t>(r)]);
        }
        FitDiagnostics diag;
        auto model = fit_single(sub, ys, as, area_count, std::nullopt, options, diag);
        (arm == 1 ? arms.treated : arms.control) = std::move(model);
        out.diagnostics.iterations += diag.iterations;
        out.diagnostics.objective += diag.objective;
        out.diagnostics.converged = out.diagnostics.converged && diag.converged;
        for (auto& w : diag.warnings) out.diagnostics.warnings.push_back(std::move(w));
      }
      out.model = std::move(arms);
      break;
    }
  }
  return out;
}

double lmm_reml_deviance(const DesignMatrix& x, std::span<const double> y,
                         std::span<const std::size_t> areas, std::size_t area_count,
                         LmmVariant variant, double sigma_u2, double sigma_v2, double sigma_e2) {
  check_inputs(x, y, areas, area_count);
  std::optional<Eigen::Index> slope;
  if (variant == LmmVariant::H2r) {
    if (!x.treatment_column) throw Error("missing-treatment", "H2r needs the treatment column");
    slope = x.treatment_column;
  }
  const RemlProblem problem(x.x, y, areas, area_count, slope);
  return problem.deviance(sigma_u2 / sigma_e2, sigma_v2 / sigma_e2, sigma_e2);
}

}  // namespace csae
