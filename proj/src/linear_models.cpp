#include "csae/error.hpp"
#include "csae/learners.hpp"

#include <algorithm>
#include <cmath>

namespace csae {

namespace {

Eigen::Map<const Eigen::VectorXd> as_vector(std::span<const double> v) {
  return {v.data(), static_cast<Eigen::Index>(v.size())};
}

void check_rows(const DesignMatrix& x, std::size_t n) {
  if (static_cast<std::size_t>(x.rows()) != n) {
    throw Error("dimension-mismatch", "design rows do not match the response length");
  }
  if (x.rows() < x.cols()) {
    throw Error("singular-design", "fewer rows than columns");
  }
}

Eigen::VectorXd least_squares(const Eigen::MatrixXd& x, const Eigen::VectorXd& y) {
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(x);
  if (qr.rank() < x.cols()) {
    throw Error("singular-design", "design matrix is rank deficient (rank " +
                                       std::to_string(qr.rank()) + " of " +
                                       std::to_string(x.cols()) + ")");
  }
  return qr.solve(y);
}

double log1pexp(double t) { return t > 0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t)); }

double sigmoid(double t) {
  if (t >= 0) return 1.0 / (1.0 + std::exp(-t));
  const double e = std::exp(t);
  return e / (1.0 + e);
}

}  // namespace

FittedLearner fit_linear(const DesignMatrix& x, std::span<const double> y) {
  check_rows(x, y.size());
  FittedLearner out;
  out.kind = LearnerKind::L;
  out.columns = x.names;
  LinearModel model;
  model.beta = least_squares(x.x, as_vector(y));
  out.diagnostics.objective = (as_vector(y) - x.x * model.beta).squaredNorm();
  out.model = std::move(model);
  return out;
}

FittedLearner fit_median(const DesignMatrix& x, std::span<const double> y,
                         const MedianOptions& options) {
  check_rows(x, y.size());
  const auto yv = as_vector(y);
  const double mean = yv.mean();
  const double sd = std::sqrt((yv.array() - mean).square().mean());
  const double eps = sd > 0 ? 1e-6 * sd : 1e-12;

  FittedLearner out;
  out.kind = LearnerKind::M;
  out.columns = x.names;
  auto& diag = out.diagnostics;

  Eigen::VectorXd beta = least_squares(x.x, yv);
  Eigen::VectorXd r = yv - x.x * beta;
  double l1 = r.cwiseAbs().sum();
  auto smoothed = [eps](const Eigen::VectorXd& res) {
    double s = 0.0;
    for (double v : res) {
      const double a = std::abs(v);
      s += a >= eps ? a : v * v / (2 * eps) + eps / 2;
    }
    return s;
  };
  diag.trace.push_back(smoothed(r));
  diag.converged = false;

  // X'WX = sum_i w_i x_i x_i' is a product with the fixed per-row outer
  // products (lower triangle packed by column).
  const Eigen::Index p = x.cols();
  const Eigen::Index n = x.rows();
  Eigen::MatrixXd outer(n, p * (p + 1) / 2);
  for (Eigen::Index c = 0, k = 0; c < p; ++c) {
    for (Eigen::Index r = c; r < p; ++r, ++k) outer.col(k) = x.x.col(r).cwiseProduct(x.x.col(c));
  }
  Eigen::MatrixXd gram(p, p);
  Eigen::VectorXd packed(outer.cols());
  Eigen::VectorXd w(n);
  for (int it = 1; it <= options.max_iterations; ++it) {
    w = r.cwiseAbs().cwiseMax(eps).cwiseInverse();
    packed.noalias() = outer.transpose() * w;
    for (Eigen::Index c = 0, k = 0; c < p; ++c) {
      for (Eigen::Index r2 = c; r2 < p; ++r2, ++k) gram(r2, c) = gram(c, r2) = packed(k);
    }
    const Eigen::VectorXd rhs = x.x.transpose() * w.cwiseProduct(yv);
    Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
    if (ldlt.info() != Eigen::Success) break;
    beta = ldlt.solve(rhs);
    r.noalias() = yv - x.x * beta;
    const double next = r.cwiseAbs().sum();
    diag.trace.push_back(smoothed(r));
    diag.iterations = it;
    const double change = std::abs(l1 - next);
    l1 = next;
    if (change <= options.tolerance * std::max(l1, 1e-300) || l1 == 0.0) {
      diag.converged = true;
      break;
    }
  }
  if (!diag.converged) diag.warnings.push_back("median regression did not converge");
  diag.objective = l1;
  out.model = LinearModel{std::move(beta), false};
  return out;
}

FittedLearner fit_logistic(const DesignMatrix& x, std::span<const double> a,
                           const LogisticOptions& options) {
  check_rows(x, a.size());
  const auto av = as_vector(a);
  const double ones = av.sum();
  if (ones <= 0.0 || ones >= static_cast<double>(a.size())) {
    throw Error("one-class", "logistic fit needs both classes");
  }
  const Eigen::Index p = x.cols();

  auto run = [&](double ridge, FitDiagnostics& diag) -> std::optional<Eigen::VectorXd> {
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
    const double share = ones / static_cast<double>(a.size());
    if (x.names.empty() || x.names.front() == "(intercept)") beta(0) = std::log(share / (1 - share));
    Eigen::VectorXd penalty = Eigen::VectorXd::Constant(p, ridge);
    if (p > 0) penalty(0) = 0.0;
    auto loglik = [&](const Eigen::VectorXd& b) {
      const Eigen::VectorXd eta = x.x * b;
      double ll = 0.0;
      for (Eigen::Index i = 0; i < eta.size(); ++i) {
        ll -= av(i) > 0.5 ? log1pexp(-eta(i)) : log1pexp(eta(i));
      }
      return ll - 0.5 * (penalty.array() * b.array().square()).sum();
    };
    double current = loglik(beta);
    double last_step = 0.0;
    Eigen::MatrixXd weighted(x.rows(), p);
    for (int it = 0; it <= options.max_iterations; ++it) {
      const Eigen::VectorXd eta = x.x * beta;
      Eigen::VectorXd prob(eta.size());
      Eigen::ArrayXd w(eta.size());
      for (Eigen::Index i = 0; i < eta.size(); ++i) {
        prob(i) = sigmoid(eta(i));
        w(i) = prob(i) * (1 - prob(i));
      }
      const Eigen::VectorXd grad =
          x.x.transpose() * (av - prob) - (penalty.array() * beta.array()).matrix();
      diag.iterations = it;
      diag.objective = -current;
      // under separation the gradient vanishes while the steps stay large
      if (grad.cwiseAbs().maxCoeff() < options.gradient_tolerance && last_step < 1e-7) {
        diag.converged = true;
        return beta;
      }
      if (it == options.max_iterations) break;
      weighted = x.x.array().colwise() * w;
      Eigen::MatrixXd hess = x.x.transpose() * weighted;
      hess.diagonal() += penalty;
      Eigen::LDLT<Eigen::MatrixXd> ldlt(hess);
      Eigen::VectorXd step = ldlt.solve(grad);
      if (ldlt.info() != Eigen::Success || !step.allFinite()) return std::nullopt;
      double scale = 1.0;
      Eigen::VectorXd next = beta + step;
      double value = loglik(next);
      for (int halving = 0; halving < 40 && !(value >= current); ++halving) {
        scale *= 0.5;
        next = beta + scale * step;
        value = loglik(next);
      }
      if (!(value >= current)) {
        // no ascent direction left at machine precision
        diag.converged = grad.cwiseAbs().maxCoeff() < 1e-6;
        return beta;
      }
      last_step = (next - beta).cwiseAbs().maxCoeff();
      beta = next;
      current = value;
      if (beta.cwiseAbs().maxCoeff() > options.separation_bound) return std::nullopt;
    }
    diag.converged = false;
    return beta;
  };

  FittedLearner out;
  out.kind = LearnerKind::L;
  out.columns = x.names;
  auto beta = run(0.0, out.diagnostics);
  if (!beta) {
    if (!options.ridge_fallback) {
      throw Error("separation",
                  "logistic coefficients diverge (perfect or quasi separation); clip the "
                  "propensity or enable the ridge fallback");
    }
    out.diagnostics = {};
    beta = run(options.ridge, out.diagnostics);
    if (!beta) throw Error("separation", "logistic fit diverges even with ridge penalty");
    out.diagnostics.warnings.push_back("separation: ridge fallback applied");
  }
  if (!out.diagnostics.converged) out.diagnostics.warnings.push_back("logistic fit did not converge");
  out.model = LinearModel{std::move(*beta), true};
  return out;
}

}  // namespace csae
