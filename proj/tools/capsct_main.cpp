#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "capsct/checkpoint.hpp"
#include "capsct/config.hpp"
#include "capsct/crossval.hpp"
#include "capsct/error.hpp"
#include "capsct/gradcam.hpp"
#include "capsct/phantom.hpp"
#include "capsct/rng.hpp"
#include "capsct/stats.hpp"

using namespace capsct;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr int kUsageExit = 2;

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> k;
  std::string data_dir;
  std::string out_dir;
  std::string model_dir;
  std::string stage = "1";
  std::string target = "covid";
  std::string layer;
  std::vector<std::string> patients;
  long b = 0, c = 0;
  std::string csv;
  std::string outcome;
  std::vector<std::string> features;
};

void report_error(const std::string& kind, const std::string& message) {
  std::cerr << json{{"error", kind}, {"message", message}}.dump() << "\n";
}

void log_line(const std::string& s) { std::cerr << s << "\n"; }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

RunConfig resolve(const Options& o) {
  RunConfig c = o.config_path.empty() ? RunConfig{} : load_run_config(o.config_path);
  if (o.seed) c.seed = *o.seed;
  if (o.k) c.folds = *o.k;
  c.validate();
  return c;
}

fs::path out_dir(const Options& o) {
  fs::path p(o.out_dir);
  fs::create_directories(p);
  return p;
}

void write_receipt(const fs::path& dir, const RunConfig& c) {
  write_text(dir / "run_config.json", to_json(c).dump(2) + "\n");
}

fs::path model_dir(const Options& o) { return o.model_dir.empty() ? fs::path(o.out_dir) : fs::path(o.model_dir); }

std::vector<PreparedPatient> load_prepared(const Options& o, const RunConfig& c) {
  return prepare_patients(load_dataset(o.data_dir), c.stage1.input_side);
}

std::vector<std::size_t> everyone(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

json history_json(const TrainHistory& h) {
  return {{"train_loss", h.train_loss}, {"validation_loss", h.validation_loss}, {"best_epoch", h.best_epoch}};
}

TrainSpec seeded(TrainSpec spec, const RunConfig& c, const std::string& stage) {
  spec.seed = derive_seed(c.seed, "full/" + stage);
  return spec;
}

// Models trained by the train-* commands; each stage reads its config from
// the checkpoint that holds its weights.
struct LoadedModels {
  Models models;
  RunConfig config;
};

LoadedModels load_models(const fs::path& dir, RunConfig base, bool with_stage2, bool with_fusion) {
  LoadedModels out;
  auto s1 = load_checkpoint(dir / "stage1.cvcp");
  base.stage1 = stage1_from_json(s1.config);
  out.models.stage1 = std::move(s1.params);
  if (with_stage2) {
    auto s2 = load_checkpoint(dir / "stage2.cvcp");
    base.stage2 = stage2_from_json(s2.config);
    out.models.stage2 = std::move(s2.params);
  }
  if (with_fusion) {
    auto f = load_checkpoint(dir / "fusion.cvcp");
    out.models.scaler = scaler_from_checkpoint(f.config);
    out.models.fusion = std::move(f.params);
  }
  out.config = base;
  return out;
}

int cmd_phantom(const Options& o) {
  RunConfig c = resolve(o);
  if (o.seed) c.phantom.seed = *o.seed;
  const fs::path dir = out_dir(o);
  write_dataset(dir, generate_phantom(c.phantom).dataset);
  write_receipt(dir, c);
  return 0;
}

int cmd_train_stage1(const Options& o) {
  const RunConfig c = resolve(o);
  const fs::path dir = out_dir(o);
  auto patients = load_prepared(o, c);
  auto r = train_stage1(slice_set(patients, everyone(patients.size())), c.stage1,
                        seeded(c.train_stage1, c, "stage1"));
  round_to_float(r.params);
  save_checkpoint(dir / "stage1.cvcp", r.params, to_json(c.stage1));
  write_text(dir / "stage1_history.json", history_json(r.history).dump(2) + "\n");
  write_receipt(dir, c);
  return 0;
}

int cmd_train_stage2(const Options& o) {
  RunConfig c = resolve(o);
  const fs::path dir = out_dir(o);
  auto loaded = load_models(model_dir(o), c, false, false);
  auto patients = load_prepared(o, loaded.config);
  std::vector<CandidateSet> cands;
  std::vector<int> labels;
  for (const auto& p : patients) {
    cands.push_back(candidates_for(loaded.models.stage1, loaded.config.stage1, p,
                                   c.stage2.candidate_count));
    labels.push_back(p.label);
  }
  auto r = train_stage2(cands, labels, c.stage2, seeded(c.train_stage2, c, "stage2"));
  round_to_float(r.params);
  save_checkpoint(dir / "stage2.cvcp", r.params, to_json(c.stage2));
  write_text(dir / "stage2_history.json", history_json(r.history).dump(2) + "\n");
  write_receipt(dir, c);
  return 0;
}

int cmd_train_fusion(const Options& o) {
  const RunConfig c = resolve(o);
  const fs::path dir = out_dir(o);
  auto loaded = load_models(model_dir(o), c, true, false);
  auto patients = load_prepared(o, loaded.config);
  std::vector<ClinicalFeatures> clinical;
  for (const auto& p : patients) clinical.push_back(p.clinical);
  const auto scaler = ClinicalScaler::fit(clinical);
  std::vector<std::vector<double>> inputs;
  std::vector<int> labels;
  for (const auto& p : patients) {
    auto cand = candidates_for(loaded.models.stage1, loaded.config.stage1, p,
                               loaded.config.stage2.candidate_count);
    auto g = infer_stage2(loaded.models.stage2, loaded.config.stage2, cand);
    inputs.push_back(fusion_input(g.probabilities, scaler.encode(p.clinical)));
    labels.push_back(p.label);
  }
  auto r = train_fusion(inputs, labels, seeded(c.train_fusion, c, "fusion"));
  round_to_float(r.params);
  save_checkpoint(dir / "fusion.cvcp", r.params, fusion_checkpoint_config(scaler));
  write_text(dir / "fusion_history.json", history_json(r.history).dump(2) + "\n");
  write_receipt(dir, c);
  return 0;
}

int cmd_infer(const Options& o) {
  const RunConfig c = resolve(o);
  const fs::path dir = out_dir(o);
  auto loaded = load_models(model_dir(o), c, true, true);
  auto patients = load_prepared(o, loaded.config);
  json preds = json::array();
  std::vector<int> truths, d2, df;
  std::vector<double> s2, sf;
  for (const auto& p : patients) {
    auto pred = predict(loaded.models, loaded.config, p);
    preds.push_back({{"id", pred.id},
                     {"truth", label_name(static_cast<Label>(pred.truth))},
                     {"candidates", pred.candidates.slice_index},
                     {"p_inf", pred.candidates.p_inf},
                     {"stage2", {{"probabilities", pred.stage2.probabilities},
                                 {"decision", label_name(static_cast<Label>(pred.stage2.decision))}}},
                     {"fusion", {{"probabilities", pred.fusion.probabilities},
                                 {"decision", label_name(static_cast<Label>(pred.fusion.decision))}}}});
    truths.push_back(pred.truth);
    d2.push_back(pred.stage2.decision);
    df.push_back(pred.fusion.decision);
    s2.push_back(pred.stage2.probabilities[0]);
    sf.push_back(pred.fusion.probabilities[0]);
  }
  json out{{"predictions", preds}};
  if (!patients.empty())
    out["metrics"] = {{"stage2", to_json(compute_metrics(d2, truths, s2))},
                      {"fusion", to_json(compute_metrics(df, truths, sf))}};
  write_text(dir / "predictions.json", out.dump(2) + "\n");
  write_receipt(dir, loaded.config);
  return 0;
}

int cmd_crossval(const Options& o) {
  const RunConfig c = resolve(o);
  const fs::path dir = out_dir(o);
  write_receipt(dir, c);
  auto patients = load_prepared(o, c);
  auto r = run_crossval(patients, c, dir, log_line);
  std::cout << r.aggregate.dump() << "\n";
  return 0;
}

int cmd_mcnemar(const Options& o) {
  if (o.b < 0 || o.c < 0) throw ContractError("discordant counts must be non-negative");
  std::cout << format_p_value(mcnemar_exact(o.b, o.c)) << "\n";
  return 0;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
    out.push_back(cell);
  }
  return out;
}

int cmd_logit(const Options& o) {
  std::ifstream in(o.csv);
  if (!in) throw IoError("cannot open " + o.csv);
  std::string line;
  if (!std::getline(in, line)) throw DataError(o.csv + ": empty file");
  const auto header = split_csv_line(line);
  auto column = [&](const std::string& name) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw DataError(o.csv + ": no column \"" + name + "\"");
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t y_col = column(o.outcome);
  std::vector<std::string> names = o.features;
  if (names.empty())
    for (const auto& h : header)
      if (h != o.outcome) names.push_back(h);
  std::vector<std::size_t> cols;
  for (const auto& n : names) cols.push_back(column(n));
  std::vector<std::vector<double>> rows;
  std::vector<double> y;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size())
      throw DataError(o.csv + ":" + std::to_string(line_no) + ": expected " +
                      std::to_string(header.size()) + " fields");
    auto number = [&](std::size_t col) {
      try {
        std::size_t used = 0;
        const double v = std::stod(cells[col], &used);
        if (used != cells[col].size()) throw std::invalid_argument("trailing");
        return v;
      } catch (const std::exception&) {
        throw DataError(o.csv + ":" + std::to_string(line_no) + ": \"" + cells[col] + "\" is not a number");
      }
    };
    std::vector<double> r;
    for (std::size_t col : cols) r.push_back(number(col));
    rows.push_back(std::move(r));
    const double outcome = number(y_col);
    if (outcome != 0.0 && outcome != 1.0) throw DataError(o.csv + ":" + std::to_string(line_no) + ": outcome must be 0 or 1");
    y.push_back(outcome);
  }
  Eigen::MatrixXd x(static_cast<long>(rows.size()), static_cast<long>(cols.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < cols.size(); ++j) x(static_cast<long>(i), static_cast<long>(j)) = rows[i][j];
  const auto fit = logistic_fit(x, Eigen::Map<Eigen::VectorXd>(y.data(), static_cast<long>(y.size())), names);
  json terms = json::array();
  for (long i = 0; i < fit.coefficients.size(); ++i) {
    json t{{"name", fit.names[static_cast<std::size_t>(i)]},
           {"coefficient", fit.coefficients[i]},
           {"std_error", fit.std_errors[i]},
           {"z", fit.z[i]}};
    if (fit.p_values) {
      t["p"] = (*fit.p_values)[i];
      t["p_formatted"] = format_p_value((*fit.p_values)[i]);
    }
    terms.push_back(t);
  }
  std::cout << json{{"n", rows.size()},
                    {"converged", fit.converged},
                    {"separated", fit.separated},
                    {"iterations", fit.iterations},
                    {"terms", terms}}
                   .dump()
            << "\n";
  return 0;
}

int cmd_gradcam(const Options& o) {
  const RunConfig c = resolve(o);
  const fs::path dir = out_dir(o);
  const bool fusion = o.stage == "fusion";
  const int stage = o.stage == "1" ? 1 : 2;
  const Label target = parse_label(o.target);
  gradcam_layers(stage);
  auto loaded = load_models(model_dir(o), c, stage == 2, fusion);
  const auto& cfg = loaded.config;
  auto& m = loaded.models;
  auto patients = load_prepared(o, cfg);
  std::size_t written = 0;
  for (const auto& p : patients) {
    if (!o.patients.empty() && std::find(o.patients.begin(), o.patients.end(), p.id) == o.patients.end())
      continue;
    auto cand = candidates_for(m.stage1, cfg.stage1, p, cfg.stage2.candidate_count);
    std::vector<std::size_t> seen;
    for (std::size_t k = 0; k < cand.slice_index.size(); ++k) {
      const std::size_t s = cand.slice_index[k];
      if (std::find(seen.begin(), seen.end(), s) != seen.end()) continue;  // padding repeats
      seen.push_back(s);
      Heatmap h = fusion ? gradcam_fusion(m.stage2, m.fusion, cfg.stage2, cand, k, m.scaler.encode(p.clinical),
                                          target, o.layer)
                  : stage == 1 ? gradcam_stage1(m.stage1, cfg.stage1, p.slices[s], target, o.layer)
                               : gradcam_stage2(m.stage2, cfg.stage2, cand, k, target, o.layer);
      write_pgm(dir / heatmap_filename(p.id, s, target), render_heatmap(h, cfg.stage1.input_side),
                cfg.stage1.input_side);
      ++written;
    }
  }
  if (!o.patients.empty() && written == 0) throw DataError("none of the requested patients exist");
  write_receipt(dir, cfg);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-stage capsule network CT classifier"};
  app.require_subcommand(1);
  Options o;

  auto add_config = [&](CLI::App* s) {
    s->add_option("--config", o.config_path, "JSON run configuration")->check(CLI::ExistingFile);
    s->add_option("--seed", o.seed, "master seed");
  };
  auto add_data = [&](CLI::App* s) { s->add_option("--data-dir", o.data_dir, "dataset root")->required(); };
  auto add_out = [&](CLI::App* s) { s->add_option("--out-dir", o.out_dir, "output directory")->required(); };
  auto add_models = [&](CLI::App* s) {
    s->add_option("--model-dir", o.model_dir, "directory with stage1/stage2/fusion checkpoints (default: --out-dir)");
  };

  std::function<int()> run;
  auto bind = [&](CLI::App* s, int (*fn)(const Options&)) { s->callback([&run, fn, &o] { run = [fn, &o] { return fn(o); }; }); };

  auto* phantom = app.add_subcommand("phantom", "generate a synthetic dataset");
  add_config(phantom);
  add_out(phantom);
  bind(phantom, cmd_phantom);

  auto* t1 = app.add_subcommand("train-stage1", "train the slice-level infection detector");
  add_config(t1);
  add_data(t1);
  add_out(t1);
  bind(t1, cmd_train_stage1);

  auto* t2 = app.add_subcommand("train-stage2", "train the candidate-slice classifier");
  add_config(t2);
  add_data(t2);
  add_out(t2);
  add_models(t2);
  bind(t2, cmd_train_stage2);

  auto* tf = app.add_subcommand("train-fusion", "train the clinical fusion head");
  add_config(tf);
  add_data(tf);
  add_out(tf);
  add_models(tf);
  bind(tf, cmd_train_fusion);

  auto* infer = app.add_subcommand("infer", "classify every patient of a dataset");
  add_config(infer);
  add_data(infer);
  add_out(infer);
  add_models(infer);
  bind(infer, cmd_infer);

  auto* cv = app.add_subcommand("crossval", "stratified K-fold evaluation of the full pipeline");
  add_config(cv);
  add_data(cv);
  add_out(cv);
  cv->add_option("--k", o.k, "number of folds")->check(CLI::PositiveNumber);
  bind(cv, cmd_crossval);

  auto* stats = app.add_subcommand("stats", "statistical tests");
  stats->require_subcommand(1);
  auto* mc = stats->add_subcommand("mcnemar", "exact McNemar test on discordant counts");
  mc->add_option("--b", o.b, "cases only the first classifier got wrong")->required();
  mc->add_option("--c", o.c, "cases only the second classifier got wrong")->required();
  bind(mc, cmd_mcnemar);
  auto* logit = stats->add_subcommand("logit", "logistic regression with Wald p-values");
  logit->add_option("--csv", o.csv, "CSV file with a header row")->required()->check(CLI::ExistingFile);
  logit->add_option("--outcome", o.outcome, "0/1 outcome column")->required();
  logit->add_option("--features", o.features, "feature columns (default: all others)")->delimiter(',');
  bind(logit, cmd_logit);

  auto* gc = app.add_subcommand("gradcam", "write Grad-CAM heatmaps of candidate slices");
  add_config(gc);
  add_data(gc);
  add_out(gc);
  add_models(gc);
  gc->add_option("--stage", o.stage, "1, 2 or fusion")->check(CLI::IsMember({"1", "2", "fusion"}));
  gc->add_option("--class", o.target, "covid, cap or normal")->check(CLI::IsMember({"covid", "cap", "normal"}));
  gc->add_option("--layer", o.layer, "conv1..conv4 (stage 1) or conv1..conv3 (stage 2, fusion); default last");
  gc->add_option("--patient", o.patients, "restrict to these patient ids")->delimiter(',');
  bind(gc, cmd_gradcam);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    report_error("usage", e.what());
    return kUsageExit;
  }
  try {
    return run();
  } catch (const ConfigError& e) {
    report_error(e.kind(), e.what());
    return kUsageExit;
  } catch (const Error& e) {
    report_error(e.kind(), e.what());
    return 1;
  } catch (const fs::filesystem_error& e) {
    report_error("io", e.what());
    return 1;
  } catch (const std::exception& e) {
    report_error("internal", e.what());
    return 1;
  }
}
