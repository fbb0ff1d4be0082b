#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace capsct {

struct FoldSplit {
  std::size_t k = 0;
  std::vector<std::size_t> fold_of;                // per patient
  std::vector<std::vector<std::size_t>> folds;     // patient indices, ascending
  std::vector<std::vector<std::size_t>> class_counts;  // [fold][class]

  // Indices of every patient outside `fold`, ascending.
  std::vector<std::size_t> training(std::size_t fold) const;
};

// Shuffles each class with a seeded generator, then deals its members to
// the folds round-robin. The dealing position carries over from one class
// to the next, so fold sizes differ by at most one as well.
FoldSplit stratified_kfold(std::span<const int> labels, std::size_t k, std::uint64_t seed);

struct RocPoint {
  double threshold;
  double fpr;
  double tpr;
};

struct RocResult {
  std::vector<RocPoint> points;  // from (0,0) at +inf to (1,1) at -inf
  double auc = 0.0;
};

// Sweeps every distinct score as a threshold (score >= t is positive).
RocResult roc_auc(std::span<const double> scores, std::span<const int> positive);

struct MetricsReport {
  std::array<std::array<std::size_t, 3>, 3> confusion{};  // [truth][decision]
  std::array<std::optional<double>, 3> sensitivity;       // empty without truths
  double accuracy = 0.0;
  std::size_t n = 0;
  std::optional<RocResult> roc;  // covid versus rest
};

// Labels are 0 covid, 1 cap, 2 normal. `covid_scores`, when non-empty,
// adds the covid-versus-rest ROC curve (skipped if only one side occurs).
MetricsReport compute_metrics(std::span<const int> decisions, std::span<const int> truths,
                              std::span<const double> covid_scores = {});

// Exact two-sided McNemar test on the discordant counts b and c.
double mcnemar_exact(long b, long c);

// Rounds to 4 decimals and prints without trailing zeros ("0.25", "1").
std::string format_p_value(double p);

struct LogisticFit {
  std::vector<std::string> names;  // "intercept" first
  Eigen::VectorXd coefficients;
  Eigen::VectorXd std_errors;
  Eigen::VectorXd z;
  std::optional<Eigen::VectorXd> p_values;  // absent under separation
  bool converged = false;
  bool separated = false;
  std::size_t iterations = 0;
};

inline constexpr double kLogisticTolerance = 1e-10;
inline constexpr std::size_t kLogisticMaxIterations = 100;

// Newton-Raphson maximum likelihood with an intercept; Wald p-values.
LogisticFit logistic_fit(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                         std::vector<std::string> names = {});

struct SeverityRow {
  std::string group;  // "1".."4" or "no-findings"
  std::size_t correct = 0;
  std::size_t incorrect = 0;
};

// Outcome of every covid patient grouped by severity score.
std::vector<SeverityRow> severity_breakdown(std::span<const int> decisions,
                                            std::span<const int> truths,
                                            std::span<const std::optional<int>> severities);

struct Summary {
  double mean = 0.0;
  double sd = 0.0;  // population standard deviation
};
Summary summarize(std::span<const double> values);

nlohmann::json to_json(const MetricsReport& report);
std::string roc_csv(const RocResult& roc);

}  // namespace capsct
