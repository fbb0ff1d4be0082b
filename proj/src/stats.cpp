#include "capsct/stats.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "capsct/error.hpp"
#include "capsct/rng.hpp"

namespace capsct {

std::vector<std::size_t> FoldSplit::training(std::size_t fold) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < fold_of.size(); ++i)
    if (fold_of[i] != fold) out.push_back(i);
  return out;
}

FoldSplit stratified_kfold(std::span<const int> labels, std::size_t k, std::uint64_t seed) {
  if (k < 1) throw ConfigError("k must be at least 1");
  if (labels.size() < k)
    throw ConfigError("cannot split " + std::to_string(labels.size()) + " patients into " +
                      std::to_string(k) + " folds");
  int classes = 0;
  for (int l : labels) {
    if (l < 0) throw DataError("negative class label");
    classes = std::max(classes, l + 1);
  }
  FoldSplit split;
  split.k = k;
  split.fold_of.assign(labels.size(), 0);
  split.folds.assign(k, {});
  split.class_counts.assign(k, std::vector<std::size_t>(static_cast<std::size_t>(classes), 0));
  Rng rng = make_rng(seed, "kfold");
  std::size_t next = 0;
  for (int c = 0; c < classes; ++c) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == c) members.push_back(i);
    std::shuffle(members.begin(), members.end(), rng);
    for (std::size_t i : members) {
      split.fold_of[i] = next;
      ++split.class_counts[next][static_cast<std::size_t>(c)];
      next = (next + 1) % k;
    }
  }
  for (std::size_t i = 0; i < labels.size(); ++i) split.folds[split.fold_of[i]].push_back(i);
  return split;
}

RocResult roc_auc(std::span<const double> scores, std::span<const int> positive) {
  if (scores.size() != positive.size())
    throw DimensionError("roc_auc: " + std::to_string(scores.size()) + " scores for " +
                         std::to_string(positive.size()) + " labels");
  std::size_t pos = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!std::isfinite(scores[i])) throw DataError("roc_auc: non-finite score");
    pos += positive[i] != 0;
  }
  const std::size_t neg = scores.size() - pos;
  if (pos == 0 || neg == 0) throw DataError("roc_auc needs both positive and negative cases");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  RocResult r;
  r.points.push_back({INFINITY, 0.0, 0.0});
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double t = scores[order[i]];
    for (; i < order.size() && scores[order[i]] == t; ++i) (positive[order[i]] ? tp : fp)++;
    r.points.push_back({t, static_cast<double>(fp) / static_cast<double>(neg),
                        static_cast<double>(tp) / static_cast<double>(pos)});
  }
  r.points.push_back({-INFINITY, 1.0, 1.0});
  for (std::size_t i = 1; i < r.points.size(); ++i) {
    const auto& a = r.points[i - 1];
    const auto& b = r.points[i];
    r.auc += (b.fpr - a.fpr) * (a.tpr + b.tpr) / 2.0;
  }
  return r;
}

MetricsReport compute_metrics(std::span<const int> decisions, std::span<const int> truths,
                              std::span<const double> covid_scores) {
  if (decisions.size() != truths.size())
    throw DimensionError("compute_metrics: " + std::to_string(decisions.size()) +
                         " decisions for " + std::to_string(truths.size()) + " truths");
  if (truths.empty()) throw DataError("compute_metrics: empty input");
  MetricsReport m;
  m.n = truths.size();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < truths.size(); ++i) {
    const int t = truths[i], d = decisions[i];
    if (t < 0 || t > 2 || d < 0 || d > 2) throw DataError("compute_metrics: label outside 0..2");
    ++m.confusion[static_cast<std::size_t>(t)][static_cast<std::size_t>(d)];
    correct += t == d;
  }
  for (std::size_t c = 0; c < 3; ++c) {
    const std::size_t total = m.confusion[c][0] + m.confusion[c][1] + m.confusion[c][2];
    if (total > 0) m.sensitivity[c] = static_cast<double>(m.confusion[c][c]) / static_cast<double>(total);
  }
  m.accuracy = static_cast<double>(correct) / static_cast<double>(m.n);
  if (!covid_scores.empty()) {
    std::vector<int> positive(truths.size());
    for (std::size_t i = 0; i < truths.size(); ++i) positive[i] = truths[i] == 0;
    const auto pos = std::count(positive.begin(), positive.end(), 1);
    if (pos > 0 && static_cast<std::size_t>(pos) < positive.size())
      m.roc = roc_auc(covid_scores, positive);
  }
  return m;
}

double mcnemar_exact(long b, long c) {
  if (b < 0 || c < 0) throw ContractError("mcnemar_exact: negative discordant count");
  const long n = b + c;
  if (n == 0) return 1.0;
  const long m = std::min(b, c);
  double tail = 0.0;
  if (n <= 1000) {
    double term = std::ldexp(1.0, static_cast<int>(-n));  // C(n,0) / 2^n
    for (long k = 0; k <= m; ++k) {
      tail += term;
      term *= static_cast<double>(n - k) / static_cast<double>(k + 1);
    }
  } else {
    const double ln2 = std::log(2.0);
    auto log_term = [&](long k) {
      return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) - n * ln2;
    };
    const double top = log_term(m);  // largest term of the lower tail
    double acc = 0.0;
    for (long k = 0; k <= m; ++k) acc += std::exp(log_term(k) - top);
    tail = std::exp(top + std::log(acc));
  }
  return std::min(1.0, 2.0 * tail);
}

std::string format_p_value(double p) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4) << std::round(p * 1e4) / 1e4;
  std::string s = os.str();
  while (!s.empty() && s.back() == '0') s.pop_back();
  if (!s.empty() && s.back() == '.') s.pop_back();
  return s;
}

LogisticFit logistic_fit(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                         std::vector<std::string> names) {
  const auto n = x.rows(), p = x.cols();
  if (y.size() != n)
    throw DimensionError("logistic_fit: " + std::to_string(n) + " rows but " +
                         std::to_string(y.size()) + " outcomes");
  if (n <= p)
    throw DataError("logistic_fit needs more observations than coefficients");
  for (Eigen::Index i = 0; i < n; ++i)
    if (y[i] != 0.0 && y[i] != 1.0) throw DataError("logistic_fit: outcomes must be 0 or 1");
  if (!x.allFinite()) throw DataError("logistic_fit: non-finite feature value");
  if (names.empty())
    for (Eigen::Index j = 0; j < p; ++j) names.push_back("x" + std::to_string(j + 1));
  if (static_cast<Eigen::Index>(names.size()) != p)
    throw DimensionError("logistic_fit: feature name count does not match columns");

  Eigen::MatrixXd design(n, p + 1);
  design.col(0).setOnes();
  design.rightCols(p) = x;
  for (Eigen::Index j = 1; j <= p; ++j) {
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design.leftCols(j + 1));
    if (qr.rank() != j + 1)
      throw NumericError("logistic_fit: rank-deficient design at feature '" +
                         names[static_cast<std::size_t>(j - 1)] + "'");
  }

  LogisticFit fit;
  fit.names = {"intercept"};
  fit.names.insert(fit.names.end(), names.begin(), names.end());
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p + 1);
  Eigen::MatrixXd hessian(p + 1, p + 1);
  Eigen::VectorXd eta = Eigen::VectorXd::Zero(n);
  for (std::size_t it = 0; it <= kLogisticMaxIterations; ++it) {
    eta = design * beta;
    const Eigen::VectorXd prob = eta.unaryExpr([](double e) { return 1.0 / (1.0 + std::exp(-e)); });
    const Eigen::VectorXd grad = design.transpose() * (y - prob);
    const Eigen::VectorXd w = prob.array() * (1.0 - prob.array());
    hessian = design.transpose() * w.asDiagonal() * design;
    if (grad.norm() < kLogisticTolerance) {
      fit.converged = true;
      fit.iterations = it;
      break;
    }
    if (it == kLogisticMaxIterations) {
      fit.iterations = it;
      break;
    }
    Eigen::LDLT<Eigen::MatrixXd> ldlt(hessian);
    const Eigen::VectorXd step = ldlt.solve(grad);
    if (ldlt.info() != Eigen::Success || !step.allFinite()) {
      fit.iterations = it;
      break;
    }
    beta += step;
  }
  fit.coefficients = beta;
  // Diverging coefficients drive some fitted probabilities to 0 or 1.
  fit.separated = !fit.converged || eta.cwiseAbs().maxCoeff() > 20.0;
  const Eigen::MatrixXd cov = hessian.ldlt().solve(Eigen::MatrixXd::Identity(p + 1, p + 1));
  fit.std_errors = cov.diagonal().cwiseMax(0.0).cwiseSqrt();
  fit.z = beta.cwiseQuotient(fit.std_errors);
  if (!fit.separated) {
    Eigen::VectorXd pv(p + 1);
    for (Eigen::Index j = 0; j <= p; ++j) pv[j] = std::erfc(std::abs(fit.z[j]) / std::sqrt(2.0));
    fit.p_values = pv;
  }
  return fit;
}

std::vector<SeverityRow> severity_breakdown(std::span<const int> decisions,
                                            std::span<const int> truths,
                                            std::span<const std::optional<int>> severities) {
  if (decisions.size() != truths.size() || severities.size() != truths.size())
    throw DimensionError("severity_breakdown: inputs differ in length");
  std::vector<SeverityRow> rows{{"1"}, {"2"}, {"3"}, {"4"}, {"no-findings"}};
  for (std::size_t i = 0; i < truths.size(); ++i) {
    if (truths[i] != 0) continue;
    std::size_t row = 4;
    if (severities[i]) {
      if (*severities[i] < 1 || *severities[i] > 4) throw DataError("severity outside 1..4");
      row = static_cast<std::size_t>(*severities[i] - 1);
    }
    (decisions[i] == 0 ? rows[row].correct : rows[row].incorrect)++;
  }
  return rows;
}

Summary summarize(std::span<const double> values) {
  if (values.empty()) throw DataError("summarize: no values");
  Summary s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - s.mean) * (v - s.mean);
  s.sd = std::sqrt(ss / static_cast<double>(values.size()));
  return s;
}

namespace {

nlohmann::json threshold_json(double t) {
  if (std::isinf(t)) return t > 0 ? "inf" : "-inf";
  return t;
}

}  // namespace

nlohmann::json to_json(const MetricsReport& m) {
  nlohmann::json j;
  j["n"] = m.n;
  j["accuracy"] = m.accuracy;
  j["confusion"] = m.confusion;
  const char* names[3] = {"covid", "cap", "normal"};
  for (std::size_t c = 0; c < 3; ++c)
    j["sensitivity"][names[c]] = m.sensitivity[c] ? nlohmann::json(*m.sensitivity[c]) : nlohmann::json();
  if (m.roc) {
    j["auc"] = m.roc->auc;
    auto& pts = j["roc"] = nlohmann::json::array();
    for (const auto& p : m.roc->points)
      pts.push_back({{"threshold", threshold_json(p.threshold)}, {"fpr", p.fpr}, {"tpr", p.tpr}});
  } else {
    j["auc"] = nullptr;
  }
  return j;
}

std::string roc_csv(const RocResult& roc) {
  std::ostringstream os;
  os << "threshold,fpr,tpr\n" << std::setprecision(17);
  for (const auto& p : roc.points) {
    if (std::isinf(p.threshold))
      os << (p.threshold > 0 ? "inf" : "-inf");
    else
      os << p.threshold;
    os << ',' << p.fpr << ',' << p.tpr << '\n';
  }
  return os.str();
}

}  // namespace capsct
