#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "capsct/phantom.hpp"
#include "capsct/pipeline.hpp"

namespace capsct {

// Everything a run depends on. Missing JSON keys keep these defaults;
// unknown keys are rejected.
struct RunConfig {
  std::uint64_t seed = 1;
  std::size_t folds = 10;
  PhantomConfig phantom;
  Stage1Config stage1;
  Stage2Config stage2;
  TrainSpec train_stage1{.learning_rate = 1e-4, .batch_size = 16, .epochs = 100};
  TrainSpec train_stage2{.learning_rate = 1e-4, .batch_size = 8, .epochs = 150};
  TrainSpec train_fusion{.learning_rate = 1e-4, .batch_size = 16, .epochs = 500};

  void validate() const;
};

nlohmann::json to_json(const MarginLossConfig& c);
nlohmann::json to_json(const Stage1Config& c);
nlohmann::json to_json(const Stage2Config& c);
nlohmann::json to_json(const TrainSpec& c);  // without the seed
nlohmann::json to_json(const PhantomConfig& c);
nlohmann::json to_json(const RunConfig& c);

// Each overlays `j` onto `base`.
MarginLossConfig margin_loss_from_json(const nlohmann::json& j, MarginLossConfig base = {});
Stage1Config stage1_from_json(const nlohmann::json& j, Stage1Config base = {});
Stage2Config stage2_from_json(const nlohmann::json& j, Stage2Config base = {});
TrainSpec train_spec_from_json(const nlohmann::json& j, TrainSpec base = {});
PhantomConfig phantom_from_json(const nlohmann::json& j, PhantomConfig base = {});
RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base = {});

RunConfig load_run_config(const std::string& path);

}  // namespace capsct
