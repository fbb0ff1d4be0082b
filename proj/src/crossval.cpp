#include "capsct/crossval.hpp"

#include <algorithm>

#include "binary_io.hpp"
#include "capsct/checkpoint.hpp"
#include "capsct/error.hpp"
#include "capsct/rng.hpp"

namespace capsct {

using nlohmann::json;

std::vector<PreparedPatient> prepare_patients(const Dataset& dataset, std::size_t side) {
  std::vector<PreparedPatient> out;
  out.reserve(dataset.size());
  for (const auto& r : dataset) {
    PreparedPatient p;
    p.id = r.id;
    p.label = static_cast<int>(r.label);
    p.severity = r.severity;
    p.clinical = r.clinical;
    for (std::size_t s = 0; s < r.slice_count(); ++s) {
      auto pre = preprocess_slice(r.slices[s], r.masks[s], r.side, side);
      p.slices.emplace_back(Shape{1, side, side}, std::move(pre.pixels));
    }
    if (r.infected) p.infected = std::vector<int>(r.infected->begin(), r.infected->end());
    out.push_back(std::move(p));
  }
  return out;
}

SliceSet slice_set(const std::vector<PreparedPatient>& patients, std::span<const std::size_t> which) {
  SliceSet s;
  for (std::size_t i : which) {
    const auto& p = patients.at(i);
    if (!p.infected) throw DataError("patient " + p.id + " has no per-slice infection labels");
    for (std::size_t k = 0; k < p.slices.size(); ++k) {
      s.images.push_back(p.slices[k]);
      s.infected.push_back((*p.infected)[k]);
      s.group.push_back(i);
    }
  }
  return s;
}

CandidateSet candidates_for(ParameterSet& stage1, const Stage1Config& config,
                            const PreparedPatient& patient, std::size_t k) {
  auto p = infer_stage1(stage1, config, patient.slices);
  CandidateSet c = select_candidates(p, k);
  c.patient_id = patient.id;
  for (std::size_t i : c.slice_index) c.slices.push_back(patient.slices[i]);
  return c;
}

json fusion_checkpoint_config(const ClinicalScaler& s) {
  return {{"scaler",
           {{"age_mean", s.age_mean},
            {"age_sd", s.age_sd},
            {"weight_mean", s.weight_mean},
            {"weight_sd", s.weight_sd}}}};
}

ClinicalScaler scaler_from_checkpoint(const json& config) {
  try {
    const auto& j = config.at("scaler");
    return {j.at("age_mean").get<double>(), j.at("age_sd").get<double>(),
            j.at("weight_mean").get<double>(), j.at("weight_sd").get<double>()};
  } catch (const json::exception& e) {
    throw DataError(std::string("fusion checkpoint config: ") + e.what());
  }
}

namespace {

TrainSpec seeded(TrainSpec spec, std::uint64_t seed, const std::string& stream) {
  spec.seed = derive_seed(seed, stream);
  return spec;
}

void log_history(const Logger& log, const std::string& what, const TrainHistory& h) {
  if (!log || h.train_loss.empty()) return;
  std::string line = what + ": " + std::to_string(h.train_loss.size()) + " epochs, train loss " +
                     std::to_string(h.train_loss.front()) + " -> " +
                     std::to_string(h.train_loss.back());
  if (!h.validation_loss.empty())
    line += ", best validation " + std::to_string(h.validation_loss[h.best_epoch]) + " at epoch " +
            std::to_string(h.best_epoch);
  log(line);
}

std::vector<double> fusion_features(const GateResult& stage2, const ClinicalScaler& scaler,
                                    const ClinicalFeatures& clinical) {
  return fusion_input(stage2.probabilities, scaler.encode(clinical));
}

}  // namespace

Models train_models(const std::vector<PreparedPatient>& patients, std::span<const std::size_t> train,
                    const RunConfig& config, std::uint64_t seed, const std::string& stream,
                    const Logger& log) {
  config.validate();
  Models m;
  auto s1 = train_stage1(slice_set(patients, train), config.stage1,
                         seeded(config.train_stage1, seed, stream + "/stage1"));
  m.stage1 = std::move(s1.params);
  m.stage1_history = std::move(s1.history);
  round_to_float(m.stage1);
  log_history(log, stream + " stage1", m.stage1_history);

  std::vector<CandidateSet> cands;
  std::vector<int> labels;
  for (std::size_t i : train) {
    cands.push_back(candidates_for(m.stage1, config.stage1, patients[i], config.stage2.candidate_count));
    labels.push_back(patients[i].label);
  }
  auto s2 = train_stage2(cands, labels, config.stage2,
                         seeded(config.train_stage2, seed, stream + "/stage2"));
  m.stage2 = std::move(s2.params);
  m.stage2_history = std::move(s2.history);
  round_to_float(m.stage2);
  log_history(log, stream + " stage2", m.stage2_history);

  std::vector<ClinicalFeatures> clinical;
  for (std::size_t i : train) clinical.push_back(patients[i].clinical);
  m.scaler = ClinicalScaler::fit(clinical);
  std::vector<std::vector<double>> inputs;
  for (std::size_t j = 0; j < train.size(); ++j)
    inputs.push_back(fusion_features(infer_stage2(m.stage2, config.stage2, cands[j]), m.scaler,
                                     patients[train[j]].clinical));
  auto f = train_fusion(inputs, labels, seeded(config.train_fusion, seed, stream + "/fusion"));
  m.fusion = std::move(f.params);
  m.fusion_history = std::move(f.history);
  round_to_float(m.fusion);
  log_history(log, stream + " fusion", m.fusion_history);
  return m;
}

PatientPrediction predict(Models& models, const RunConfig& config, const PreparedPatient& patient) {
  PatientPrediction out;
  out.id = patient.id;
  out.truth = patient.label;
  out.candidates = candidates_for(models.stage1, config.stage1, patient, config.stage2.candidate_count);
  out.stage2 = infer_stage2(models.stage2, config.stage2, out.candidates);
  out.fusion = infer_fusion(models.fusion, fusion_features(out.stage2, models.scaler, patient.clinical));
  out.candidates.slices.clear();
  return out;
}

namespace {

json prediction_json(const PatientPrediction& p) {
  return {{"id", p.id},
          {"truth", label_name(static_cast<Label>(p.truth))},
          {"candidates", p.candidates.slice_index},
          {"p_inf", p.candidates.p_inf},
          {"stage2",
           {{"scores", p.stage2.scores},
            {"probabilities", p.stage2.probabilities},
            {"decision", label_name(static_cast<Label>(p.stage2.decision))}}},
          {"fusion",
           {{"probabilities", p.fusion.probabilities},
            {"decision", label_name(static_cast<Label>(p.fusion.decision))}}}};
}

FoldReport evaluate_fold(std::size_t fold, Models& models, const RunConfig& config,
                         const std::vector<PreparedPatient>& patients,
                         std::span<const std::size_t> test) {
  FoldReport r;
  r.fold = fold;
  std::vector<int> truths, d2, df;
  std::vector<double> cov2, covf;
  std::vector<std::optional<int>> severities;
  std::size_t slice_hits = 0;
  for (std::size_t i : test) {
    const auto& p = patients[i];
    auto pred = predict(models, config, p);
    if (p.infected) {
      auto probs = infer_stage1(models.stage1, config.stage1, p.slices);
      for (std::size_t s = 0; s < probs.size(); ++s) slice_hits += (probs[s] > 0.5) == ((*p.infected)[s] == 1);
      r.stage1_slices += probs.size();
    }
    truths.push_back(p.label);
    d2.push_back(pred.stage2.decision);
    df.push_back(pred.fusion.decision);
    cov2.push_back(pred.stage2.probabilities[0]);
    covf.push_back(pred.fusion.probabilities[0]);
    severities.push_back(p.severity);
    r.predictions.push_back(std::move(pred));
  }
  r.stage1_slice_accuracy =
      r.stage1_slices ? static_cast<double>(slice_hits) / static_cast<double>(r.stage1_slices) : 0.0;
  r.stage2 = compute_metrics(d2, truths, cov2);
  r.fusion = compute_metrics(df, truths, covf);
  for (std::size_t j = 0; j < truths.size(); ++j) {
    const bool ok2 = d2[j] == truths[j], okf = df[j] == truths[j];
    r.mcnemar_b += !ok2 && okf;
    r.mcnemar_c += ok2 && !okf;
  }
  r.mcnemar_p = mcnemar_exact(r.mcnemar_b, r.mcnemar_c);
  r.severity = severity_breakdown(df, truths, severities);
  return r;
}

json severity_json(const std::vector<SeverityRow>& rows) {
  json out = json::array();
  for (const auto& s : rows) out.push_back({{"group", s.group}, {"correct", s.correct}, {"incorrect", s.incorrect}});
  return out;
}

// Metric name -> value for one report; absent values are skipped.
std::vector<std::pair<std::string, double>> metric_values(const MetricsReport& m) {
  std::vector<std::pair<std::string, double>> out{{"accuracy", m.accuracy}};
  for (std::size_t c = 0; c < 3; ++c)
    if (m.sensitivity[c])
      out.emplace_back(std::string(label_name(static_cast<Label>(c))) + "_sensitivity", *m.sensitivity[c]);
  if (m.roc) out.emplace_back("covid_auc", m.roc->auc);
  return out;
}

}  // namespace

json to_json(const FoldReport& r) {
  json preds = json::array();
  for (const auto& p : r.predictions) preds.push_back(prediction_json(p));
  return {{"fold", r.fold},
          {"stage1_slice_accuracy", r.stage1_slice_accuracy},
          {"stage1_slices", r.stage1_slices},
          {"stage2", to_json(r.stage2)},
          {"fusion", to_json(r.fusion)},
          {"mcnemar", {{"b", r.mcnemar_b}, {"c", r.mcnemar_c}, {"p", r.mcnemar_p},
                       {"p_formatted", format_p_value(r.mcnemar_p)}}},
          {"fusion_severity", severity_json(r.severity)},
          {"predictions", preds}};
}

json aggregate_folds(const std::vector<FoldReport>& folds) {
  if (folds.empty()) throw DataError("no fold reports to aggregate");
  auto summary = [](const std::vector<double>& v) {
    const Summary s = summarize(v);
    return json{{"mean", s.mean}, {"sd", s.sd}, {"folds", v}};
  };
  json out;
  out["folds"] = folds.size();
  std::vector<double> slice_acc;
  for (const auto& f : folds) slice_acc.push_back(f.stage1_slice_accuracy);
  out["stage1_slice_accuracy"] = summary(slice_acc);

  std::vector<int> truths, d2, df;
  std::vector<double> cov2, covf;
  std::vector<std::optional<int>> severities;
  long b = 0, c = 0;
  for (const auto& f : folds) {
    for (const auto& p : f.predictions) {
      truths.push_back(p.truth);
      d2.push_back(p.stage2.decision);
      df.push_back(p.fusion.decision);
      cov2.push_back(p.stage2.probabilities[0]);
      covf.push_back(p.fusion.probabilities[0]);
    }
    b += f.mcnemar_b;
    c += f.mcnemar_c;
  }
  for (const auto& [name, pick] :
       std::vector<std::pair<std::string, const MetricsReport FoldReport::*>>{
           {"stage2", &FoldReport::stage2}, {"fusion", &FoldReport::fusion}}) {
    std::vector<std::pair<std::string, std::vector<double>>> per_metric;
    for (const auto& f : folds)
      for (const auto& [metric, value] : metric_values(f.*pick)) {
        auto it = std::find_if(per_metric.begin(), per_metric.end(),
                               [&](const auto& e) { return e.first == metric; });
        if (it == per_metric.end()) {
          per_metric.push_back({metric, {}});
          it = per_metric.end() - 1;
        }
        it->second.push_back(value);
      }
    json block;
    for (const auto& [metric, values] : per_metric) block[metric] = summary(values);
    out[name] = block;
  }
  const auto pooled2 = compute_metrics(d2, truths, cov2);
  const auto pooledf = compute_metrics(df, truths, covf);
  out["pooled"] = {{"stage2", to_json(pooled2)}, {"fusion", to_json(pooledf)}};
  const double p = mcnemar_exact(b, c);
  out["mcnemar_pooled"] = {{"b", b}, {"c", c}, {"p", p}, {"p_formatted", format_p_value(p)}};
  std::vector<std::string> fold_p;
  for (const auto& f : folds) fold_p.push_back(format_p_value(f.mcnemar_p));
  out["mcnemar_folds"] = fold_p;
  return out;
}

CrossvalResult run_crossval(const std::vector<PreparedPatient>& patients, const RunConfig& config,
                            const std::optional<std::filesystem::path>& out_dir, const Logger& log) {
  config.validate();
  std::vector<int> labels;
  for (const auto& p : patients) labels.push_back(p.label);
  const FoldSplit split = stratified_kfold(labels, config.folds, derive_seed(config.seed, "kfold"));
  if (out_dir) std::filesystem::create_directories(*out_dir);
  CrossvalResult result;
  for (std::size_t f = 0; f < split.k; ++f) {
    const std::string stream = "fold" + std::to_string(f);
    if (log) log(stream + ": " + std::to_string(split.folds[f].size()) + " held-out patients");
    std::vector<std::size_t> train = split.k == 1 ? split.folds[f] : split.training(f);
    Models models = train_models(patients, train, config, config.seed, stream, log);
    FoldReport report = evaluate_fold(f, models, config, patients, split.folds[f]);
    if (log)
      log(stream + ": stage1 slice accuracy " + std::to_string(report.stage1_slice_accuracy) +
          ", stage2 accuracy " + std::to_string(report.stage2.accuracy) + ", fusion accuracy " +
          std::to_string(report.fusion.accuracy));
    if (out_dir) {
      const auto dir = *out_dir / ("fold_" + std::to_string(f));
      std::filesystem::create_directories(dir);
      save_checkpoint(dir / "stage1.cvcp", models.stage1, to_json(config.stage1));
      save_checkpoint(dir / "stage2.cvcp", models.stage2, to_json(config.stage2));
      save_checkpoint(dir / "fusion.cvcp", models.fusion, fusion_checkpoint_config(models.scaler));
      detail::write_file(dir / "report.json", to_json(report).dump(2) + "\n");
      if (report.stage2.roc) detail::write_file(dir / "roc_stage2.csv", roc_csv(*report.stage2.roc));
      if (report.fusion.roc) detail::write_file(dir / "roc_fusion.csv", roc_csv(*report.fusion.roc));
    }
    result.folds.push_back(std::move(report));
  }
  result.aggregate = aggregate_folds(result.folds);
  if (out_dir) detail::write_file(*out_dir / "aggregate.json", result.aggregate.dump(2) + "\n");
  return result;
}

}  // namespace capsct
