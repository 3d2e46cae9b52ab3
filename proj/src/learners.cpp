#include "csae/learners.hpp"

#include "csae/error.hpp"

#include <algorithm>
#include <cmath>

namespace csae {

std::string to_string(LearnerKind kind) {
  switch (kind) {
    case LearnerKind::L: return "L";
    case LearnerKind::M: return "M";
    case LearnerKind::H1r: return "H1r";
    case LearnerKind::H2r: return "H2r";
    case LearnerKind::H2m: return "H2m";
    case LearnerKind::Gb: return "Gb";
  }
  return "?";
}

LearnerKind parse_learner(std::string_view name) {
  for (auto kind : {LearnerKind::L, LearnerKind::M, LearnerKind::H1r, LearnerKind::H2r,
                    LearnerKind::H2m, LearnerKind::Gb}) {
    if (name == to_string(kind)) return kind;
  }
  throw Error("unknown-learner", "unknown learner '" + std::string(name) +
                                     "' (expected L, M, H1r, H2r, H2m or Gb)");
}

bool is_mixed(LearnerKind kind) {
  return kind == LearnerKind::H1r || kind == LearnerKind::H2r || kind == LearnerKind::H2m;
}

bool FittedLearner::probability() const {
  if (const auto* lin = std::get_if<LinearModel>(&model)) return lin->logistic;
  if (const auto* gb = std::get_if<BoostedTrees>(&model)) return gb->logistic;
  return false;
}

namespace {

double logistic(double t) {
  if (t >= 0) return 1.0 / (1.0 + std::exp(-t));
  const double e = std::exp(t);
  return e / (1.0 + e);
}

double effect(const Eigen::VectorXd& values, std::span<const std::size_t> areas, Eigen::Index i) {
  if (areas.empty()) return 0.0;
  const auto j = static_cast<Eigen::Index>(areas[static_cast<std::size_t>(i)]);
  return j < values.size() ? values(j) : 0.0;
}

Eigen::VectorXd predict_mixed(const MixedModel& model, const Eigen::MatrixXd& x,
                              std::span<const std::size_t> areas) {
  Eigen::VectorXd out = x * model.beta;
  for (Eigen::Index i = 0; i < out.size(); ++i) {
    out(i) += effect(model.u, areas, i);
    if (model.slope_column) out(i) += effect(model.v, areas, i) * x(i, *model.slope_column);
  }
  return out;
}

double predict_tree(const std::vector<TreeNode>& tree, const Eigen::MatrixXd& x, Eigen::Index i) {
  std::size_t node = 0;
  while (tree[node].feature >= 0) {
    const auto& t = tree[node];
    node = static_cast<std::size_t>(x(i, t.feature) <= t.threshold ? t.left : t.right);
  }
  return tree[node].value;
}

}  // namespace

Eigen::VectorXd predict(const FittedLearner& learner, const DesignMatrix& x,
                        std::span<const std::size_t> areas) {
  if (x.names != learner.columns) {
    throw Error("schema-mismatch", "prediction design columns differ from the fitted columns");
  }
  if (!areas.empty() && areas.size() != static_cast<std::size_t>(x.rows())) {
    throw Error("dimension-mismatch", "area vector does not match the design rows");
  }
  return std::visit(
      [&](const auto& model) -> Eigen::VectorXd {
        using T = std::decay_t<decltype(model)>;
        if constexpr (std::is_same_v<T, LinearModel>) {
          Eigen::VectorXd eta = x.x * model.beta;
          if (model.logistic) eta = eta.unaryExpr([](double t) { return logistic(t); });
          return eta;
        } else if constexpr (std::is_same_v<T, MixedModel>) {
          return predict_mixed(model, x.x, areas);
        } else if constexpr (std::is_same_v<T, ArmModels>) {
          Eigen::MatrixXd sub(x.rows(), static_cast<Eigen::Index>(model.columns.size()));
          for (std::size_t c = 0; c < model.columns.size(); ++c) {
            sub.col(static_cast<Eigen::Index>(c)) = x.x.col(model.columns[c]);
          }
          const Eigen::VectorXd control = predict_mixed(model.control, sub, areas);
          const Eigen::VectorXd treated = predict_mixed(model.treated, sub, areas);
          Eigen::VectorXd out(x.rows());
          for (Eigen::Index i = 0; i < x.rows(); ++i) {
            out(i) = x.x(i, model.treatment_column) > 0.5 ? treated(i) : control(i);
          }
          return out;
        } else {
          Eigen::VectorXd out(x.rows());
          for (Eigen::Index i = 0; i < x.rows(); ++i) {
            double s = model.base_score;
            for (const auto& tree : model.trees) s += predict_tree(tree, x.x, i);
            out(i) = model.logistic ? logistic(s) : s;
          }
          return out;
        }
      },
      learner.model);
}

std::size_t clip_propensities(Eigen::VectorXd& p, double lo, double hi) {
  std::size_t clipped = 0;
  for (auto& v : p) {
    if (v < lo) {
      v = lo;
      ++clipped;
    } else if (v > hi) {
      v = hi;
      ++clipped;
    }
  }
  return clipped;
}

}  // namespace csae
