#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "capsct/config.hpp"
#include "capsct/data.hpp"
#include "capsct/pipeline.hpp"
#include "capsct/stats.hpp"

namespace capsct {

// A patient with every slice masked, resized and wrapped as [1×side×side].
struct PreparedPatient {
  std::string id;
  int label = 0;
  std::optional<int> severity;
  ClinicalFeatures clinical;
  std::vector<Tensor> slices;
  std::optional<std::vector<int>> infected;
};

std::vector<PreparedPatient> prepare_patients(const Dataset& dataset, std::size_t side);

// Slices of the chosen patients with their infection flags; the group of a
// slice is its patient.
SliceSet slice_set(const std::vector<PreparedPatient>& patients, std::span<const std::size_t> which);

struct Models {
  ParameterSet stage1, stage2, fusion;
  ClinicalScaler scaler;
  TrainHistory stage1_history, stage2_history, fusion_history;
};

using Logger = std::function<void(const std::string&)>;

// Trains stage 1, stage 2 and the fusion head in sequence on `train`, with
// seeds derived from `seed` and `stream`. Parameters are rounded to single
// precision so that saved checkpoints reproduce every prediction.
Models train_models(const std::vector<PreparedPatient>& patients, std::span<const std::size_t> train,
                    const RunConfig& config, std::uint64_t seed, const std::string& stream,
                    const Logger& log = {});

struct PatientPrediction {
  std::string id;
  int truth = 0;
  CandidateSet candidates;  // slices dropped
  GateResult stage2;
  FusionPrediction fusion;
};

CandidateSet candidates_for(ParameterSet& stage1, const Stage1Config& config,
                            const PreparedPatient& patient, std::size_t k);
PatientPrediction predict(Models& models, const RunConfig& config, const PreparedPatient& patient);

struct FoldReport {
  std::size_t fold = 0;
  std::vector<PatientPrediction> predictions;
  MetricsReport stage2, fusion;
  double stage1_slice_accuracy = 0.0;  // held-out slices at p_inf > 0.5
  std::size_t stage1_slices = 0;
  long mcnemar_b = 0;  // stage 2 wrong, fusion right
  long mcnemar_c = 0;  // stage 2 right, fusion wrong
  double mcnemar_p = 1.0;
  std::vector<SeverityRow> severity;
};

nlohmann::json to_json(const FoldReport& report);

struct CrossvalResult {
  std::vector<FoldReport> folds;
  nlohmann::json aggregate;
};

// The aggregate of fold reports: mean and population sd of every metric
// plus pooled totals over all held-out patients.
nlohmann::json aggregate_folds(const std::vector<FoldReport>& folds);

// K-fold protocol: per fold, train all stages on the other folds and
// evaluate on the held-out one. With `out_dir`, writes per-fold reports,
// ROC curves and checkpoints plus aggregate.json.
CrossvalResult run_crossval(const std::vector<PreparedPatient>& patients, const RunConfig& config,
                            const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                            const Logger& log = {});

// Checkpoint config blobs.
nlohmann::json fusion_checkpoint_config(const ClinicalScaler& scaler);
ClinicalScaler scaler_from_checkpoint(const nlohmann::json& config);

}  // namespace capsct
