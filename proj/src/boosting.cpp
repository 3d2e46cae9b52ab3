#include "csae/error.hpp"
#include "csae/learners.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace csae {

namespace {

double sigmoid(double t) {
  if (t >= 0) return 1.0 / (1.0 + std::exp(-t));
  const double e = std::exp(t);
  return e / (1.0 + e);
}

// Cut points of one feature: midpoints of the unique values when there are
// few of them, otherwise empirical quantiles. Bin b holds cut[b-1] < x <= cut[b].
std::vector<double> cut_points(const Eigen::VectorXd& column, int max_bins) {
  std::vector<double> values(column.data(), column.data() + column.size());
  std::sort(values.begin(), values.end());
  std::vector<double> unique = values;
  unique.erase(std::unique(unique.begin(), unique.end()), unique.end());
  std::vector<double> cuts;
  if (unique.size() <= static_cast<std::size_t>(max_bins)) {
    for (std::size_t k = 0; k + 1 < unique.size(); ++k) cuts.push_back(0.5 * (unique[k] + unique[k + 1]));
    return cuts;
  }
  const std::size_t n = values.size();
  for (int b = 1; b < max_bins; ++b) {
    const double q = values[static_cast<std::size_t>(b) * n / static_cast<std::size_t>(max_bins)];
    if (q < unique.back() && (cuts.empty() || q > cuts.back())) cuts.push_back(q);
  }
  return cuts;
}

class TreeBuilder {
 public:
  TreeBuilder(const std::vector<std::vector<std::uint8_t>>& bins,
              const std::vector<std::vector<double>>& cuts, const GbParams& params, bool newton)
      : bins_(bins), cuts_(cuts), params_(params), newton_(newton) {}

  // Grows one tree on gradients g (and hessians h for the Newton leaf).
  // Returns the tree and writes each row's leaf value into `update`.
  std::vector<TreeNode> grow(const std::vector<double>& g, const std::vector<double>& h,
                             std::vector<std::size_t>& index, std::vector<double>& update) {
    g_ = &g;
    h_ = &h;
    update_ = &update;
    nodes_.clear();
    build(index.begin(), index.end(), 0);
    return std::move(nodes_);
  }

 private:
  using Iter = std::vector<std::size_t>::iterator;

  int build(Iter begin, Iter end, int depth) {
    const int id = static_cast<int>(nodes_.size());
    nodes_.emplace_back();
    const auto n = static_cast<std::size_t>(end - begin);
    double gsum = 0.0;
    double hsum = 0.0;
    for (auto it = begin; it != end; ++it) {
      gsum += (*g_)[*it];
      hsum += (*h_)[*it];
    }

    int best_feature = -1;
    std::size_t best_bin = 0;
    double best_gain = 1e-12;
    if (depth < params_.depth && n >= 2 * params_.min_leaf) {
      const double parent = gsum * gsum / static_cast<double>(n);
      for (std::size_t f = 0; f < bins_.size(); ++f) {
        const std::size_t nb = cuts_[f].size() + 1;
        if (nb < 2) continue;
        hist_g_.assign(nb, 0.0);
        hist_n_.assign(nb, 0);
        const auto& fb = bins_[f];
        for (auto it = begin; it != end; ++it) {
          hist_g_[fb[*it]] += (*g_)[*it];
          ++hist_n_[fb[*it]];
        }
        double gl = 0.0;
        std::size_t nl = 0;
        for (std::size_t b = 0; b + 1 < nb; ++b) {
          gl += hist_g_[b];
          nl += hist_n_[b];
          const std::size_t nr = n - nl;
          if (nl < params_.min_leaf) continue;
          if (nr < params_.min_leaf) break;
          const double gr = gsum - gl;
          const double gain = gl * gl / static_cast<double>(nl) +
                              gr * gr / static_cast<double>(nr) - parent;
          if (gain > best_gain) {
            best_gain = gain;
            best_feature = static_cast<int>(f);
            best_bin = b;
          }
        }
      }
    }

    if (best_feature < 0) {
      double value = 0.0;
      if (newton_) {
        value = hsum > 1e-12 ? gsum / hsum : 0.0;
      } else if (n > 0) {
        value = gsum / static_cast<double>(n);
      }
      value *= params_.learning_rate;
      nodes_[static_cast<std::size_t>(id)].value = value;
      for (auto it = begin; it != end; ++it) (*update_)[*it] = value;
      return id;
    }

    const auto& fb = bins_[static_cast<std::size_t>(best_feature)];
    const auto mid = std::stable_partition(
        begin, end, [&](std::size_t r) { return fb[r] <= best_bin; });
    const int left = build(begin, mid, depth + 1);
    const int right = build(mid, end, depth + 1);
    auto& node = nodes_[static_cast<std::size_t>(id)];
    node.feature = best_feature;
    node.threshold = cuts_[static_cast<std::size_t>(best_feature)][best_bin];
    node.left = left;
    node.right = right;
    return id;
  }

  const std::vector<std::vector<std::uint8_t>>& bins_;
  const std::vector<std::vector<double>>& cuts_;
  const GbParams& params_;
  bool newton_;
  const std::vector<double>* g_ = nullptr;
  const std::vector<double>* h_ = nullptr;
  std::vector<double>* update_ = nullptr;
  std::vector<TreeNode> nodes_;
  std::vector<double> hist_g_;
  std::vector<std::size_t> hist_n_;
};

}  // namespace

FittedLearner fit_gb(const DesignMatrix& x, std::span<const double> target, GbLoss loss,
                     const GbParams& params) {
  const auto n = static_cast<std::size_t>(x.rows());
  if (target.size() != n) throw Error("dimension-mismatch", "design rows do not match the target");
  if (n == 0) throw Error("empty-training-set", "boosting needs at least one row");
  if (params.max_bins < 2 || params.max_bins > 256) {
    throw Error("invalid-config", "max_bins must lie in [2, 256]");
  }
  const bool logistic = loss == GbLoss::Logistic;

  // intercept and other constant columns never split, so bin every column
  std::vector<std::vector<double>> cuts(static_cast<std::size_t>(x.cols()));
  std::vector<std::vector<std::uint8_t>> bins(static_cast<std::size_t>(x.cols()));
  for (Eigen::Index k = 0; k < x.cols(); ++k) {
    auto& c = cuts[static_cast<std::size_t>(k)];
    c = cut_points(x.x.col(k), params.max_bins);
    auto& b = bins[static_cast<std::size_t>(k)];
    b.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double v = x.x(static_cast<Eigen::Index>(i), k);
      b[i] = static_cast<std::uint8_t>(std::lower_bound(c.begin(), c.end(), v) - c.begin());
    }
  }

  BoostedTrees model;
  model.logistic = logistic;
  const double mean = std::accumulate(target.begin(), target.end(), 0.0) / static_cast<double>(n);
  if (logistic) {
    const double p = std::clamp(mean, 1e-6, 1 - 1e-6);
    model.base_score = std::log(p / (1 - p));
  } else {
    model.base_score = mean;
  }

  FittedLearner out;
  out.kind = LearnerKind::Gb;
  out.columns = x.names;
  auto& diag = out.diagnostics;

  std::vector<double> score(n, model.base_score);
  std::vector<double> g(n), h(n, 1.0), update(n, 0.0);
  std::vector<std::size_t> index(n);
  auto training_loss = [&]() {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (logistic) {
        const double s = score[i];
        const double ll = s > 0 ? s + std::log1p(std::exp(-s)) : std::log1p(std::exp(s));
        total += ll - target[i] * s;
      } else {
        const double r = target[i] - score[i];
        total += r * r;
      }
    }
    return total / static_cast<double>(n);
  };

  const bool constant =
      std::all_of(target.begin(), target.end(), [&](double v) { return v == target[0]; });
  TreeBuilder builder(bins, cuts, params, logistic);
  for (int round = 0; round < params.rounds && !constant; ++round) {
    for (std::size_t i = 0; i < n; ++i) {
      if (logistic) {
        const double p = sigmoid(score[i]);
        g[i] = target[i] - p;
        h[i] = p * (1 - p);
      } else {
        g[i] = target[i] - score[i];
      }
    }
    std::iota(index.begin(), index.end(), std::size_t{0});
    model.trees.push_back(builder.grow(g, h, index, update));
    for (std::size_t i = 0; i < n; ++i) score[i] += update[i];
    diag.trace.push_back(training_loss());
  }
  diag.iterations = static_cast<int>(model.trees.size());
  diag.objective = training_loss();
  out.model = std::move(model);
  return out;
}

}  // namespace csae
