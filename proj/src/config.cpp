#include "capsct/config.hpp"

#include <set>

#include "binary_io.hpp"
#include "capsct/error.hpp"

namespace capsct {

using nlohmann::json;

namespace {

template <class T>
struct is_std_array : std::false_type {};
template <class T, std::size_t N>
struct is_std_array<std::array<T, N>> : std::true_type {};

// Reads known keys of a JSON object and rejects the rest.
class Overlay {
 public:
  Overlay(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <class T>
  void read(const char* key, T& field) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    if constexpr (is_std_array<T>::value)
      if (!it->is_array() || it->size() != std::tuple_size_v<T>)
        throw ConfigError(where_ + "." + key + ": expected " + std::to_string(std::tuple_size_v<T>) +
                          " entries");
    try {
      field = it->template get<T>();
    } catch (const json::exception&) {
      throw ConfigError(where_ + "." + key + ": wrong type");
    }
  }

  template <class F>
  void nested(const char* key, F&& apply) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it != j_.end()) apply(*it, where_ + "." + key);
  }

  ~Overlay() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [k, v] : j_.items())
      if (!seen_.contains(k)) throw ConfigError(where_ + ": unknown key \"" + k + "\"");
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string, std::less<>> seen_;
};

json caps_json(std::span<const CapsuleSpec> caps) {
  json out = json::array();
  for (const auto& c : caps) out.push_back(json::array({c.count, c.dim}));
  return out;
}

template <std::size_t N>
void read_caps(const json& j, const std::string& where, std::array<CapsuleSpec, N>& caps) {
  if (!j.is_array() || j.size() != N)
    throw ConfigError(where + ": expected " + std::to_string(N) + " [count, dim] pairs");
  for (std::size_t i = 0; i < N; ++i) {
    try {
      caps[i] = {j[i].at(0).get<std::size_t>(), j[i].at(1).get<std::size_t>()};
      if (j[i].size() != 2) throw ConfigError(where + ": expected [count, dim]");
    } catch (const json::exception&) {
      throw ConfigError(where + ": expected [count, dim] pairs");
    }
  }
}

}  // namespace

json to_json(const MarginLossConfig& c) {
  return {{"m_plus", c.m_plus},
          {"m_minus", c.m_minus},
          {"lambda", c.lambda_neg},
          {"class_weights", c.class_weights}};
}

MarginLossConfig margin_loss_from_json(const json& j, MarginLossConfig base) {
  Overlay o(j, "loss");
  o.read("m_plus", base.m_plus);
  o.read("m_minus", base.m_minus);
  o.read("lambda", base.lambda_neg);
  o.read("class_weights", base.class_weights);
  return base;
}

json to_json(const Stage1Config& c) {
  json shortcuts = json::array();
  for (const auto& s : c.shortcuts) shortcuts.push_back(json::array({s.from, s.to}));
  return {{"input_side", c.input_side},
          {"conv_channels", c.conv_channels},
          {"pool_window", c.pool_window},
          {"capsules", caps_json(c.capsules)},
          {"shortcuts", shortcuts},
          {"routing_iterations", c.routing_iterations},
          {"loss", to_json(c.loss)}};
}

Stage1Config stage1_from_json(const json& j, Stage1Config base) {
  {
    Overlay o(j, "stage1");
    o.read("input_side", base.input_side);
    o.read("conv_channels", base.conv_channels);
    o.read("pool_window", base.pool_window);
    o.read("routing_iterations", base.routing_iterations);
    o.nested("capsules", [&](const json& v, const std::string& w) { read_caps(v, w, base.capsules); });
    o.nested("shortcuts", [&](const json& v, const std::string& w) {
      if (!v.is_array() || v.size() != 2) throw ConfigError(w + ": expected 2 [from, to] pairs");
      for (std::size_t i = 0; i < 2; ++i) {
        try {
          base.shortcuts[i] = {v[i].at(0).get<std::size_t>(), v[i].at(1).get<std::size_t>()};
        } catch (const json::exception&) {
          throw ConfigError(w + ": expected [from, to] pairs");
        }
      }
    });
    o.nested("loss", [&](const json& v, const std::string&) { base.loss = margin_loss_from_json(v, base.loss); });
  }
  base.validate();
  return base;
}

json to_json(const Stage2Config& c) {
  return {{"candidate_count", c.candidate_count},
          {"input_side", c.input_side},
          {"conv_channels", c.conv_channels},
          {"pool_window", c.pool_window},
          {"capsules", caps_json(c.capsules)},
          {"routing_iterations", c.routing_iterations},
          {"loss", to_json(c.loss)}};
}

Stage2Config stage2_from_json(const json& j, Stage2Config base) {
  {
    Overlay o(j, "stage2");
    o.read("candidate_count", base.candidate_count);
    o.read("input_side", base.input_side);
    o.read("conv_channels", base.conv_channels);
    o.read("pool_window", base.pool_window);
    o.read("routing_iterations", base.routing_iterations);
    o.nested("capsules", [&](const json& v, const std::string& w) { read_caps(v, w, base.capsules); });
    o.nested("loss", [&](const json& v, const std::string&) { base.loss = margin_loss_from_json(v, base.loss); });
  }
  base.validate();
  return base;
}

json to_json(const TrainSpec& c) {
  return {{"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"validation_fraction", c.validation_fraction}};
}

TrainSpec train_spec_from_json(const json& j, TrainSpec base) {
  {
    Overlay o(j, "train");
    o.read("learning_rate", base.learning_rate);
    o.read("batch_size", base.batch_size);
    o.read("epochs", base.epochs);
    o.read("validation_fraction", base.validation_fraction);
  }
  base.validate();
  return base;
}

json to_json(const PhantomConfig& c) {
  return {{"patients_per_class", c.patients_per_class},
          {"slices_per_patient", c.slices_per_patient},
          {"side", c.side},
          {"seed", c.seed},
          {"blob_intensity", {c.blob_intensity_min, c.blob_intensity_max}},
          {"blob_radius", {c.blob_radius_min, c.blob_radius_max}},
          {"noise_sd", c.noise_sd},
          {"clinical_strength", c.clinical_strength},
          {"subtle_fraction", c.subtle_fraction},
          {"subtle_scale", c.subtle_scale},
          {"min_slices", c.min_slices}};
}

PhantomConfig phantom_from_json(const json& j, PhantomConfig base) {
  {
    Overlay o(j, "phantom");
    o.read("patients_per_class", base.patients_per_class);
    o.read("slices_per_patient", base.slices_per_patient);
    o.read("side", base.side);
    o.read("seed", base.seed);
    o.read("noise_sd", base.noise_sd);
    o.read("clinical_strength", base.clinical_strength);
    o.read("subtle_fraction", base.subtle_fraction);
    o.read("subtle_scale", base.subtle_scale);
    o.read("min_slices", base.min_slices);
    auto range = [](const char* name, double& lo, double& hi) {
      return [name, &lo, &hi](const json& v, const std::string& w) {
        if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number())
          throw ConfigError(w + ": expected [min, max] for " + name);
        lo = v[0].get<double>();
        hi = v[1].get<double>();
      };
    };
    o.nested("blob_intensity", range("blob_intensity", base.blob_intensity_min, base.blob_intensity_max));
    o.nested("blob_radius", range("blob_radius", base.blob_radius_min, base.blob_radius_max));
  }
  base.validate();
  return base;
}

void RunConfig::validate() const {
  if (folds < 1) throw ConfigError("folds must be at least 1");
  phantom.validate();
  stage1.validate();
  stage2.validate();
  train_stage1.validate();
  train_stage2.validate();
  train_fusion.validate();
  if (stage1.input_side != stage2.input_side)
    throw ConfigError("stage1 and stage2 input_side must agree");
}

json to_json(const RunConfig& c) {
  return {{"seed", c.seed},
          {"folds", c.folds},
          {"phantom", to_json(c.phantom)},
          {"stage1", to_json(c.stage1)},
          {"stage2", to_json(c.stage2)},
          {"train",
           {{"stage1", to_json(c.train_stage1)},
            {"stage2", to_json(c.train_stage2)},
            {"fusion", to_json(c.train_fusion)}}}};
}

RunConfig run_config_from_json(const json& j, RunConfig base) {
  {
    Overlay o(j, "config");
    o.read("seed", base.seed);
    o.read("folds", base.folds);
    o.nested("phantom", [&](const json& v, const std::string&) { base.phantom = phantom_from_json(v, base.phantom); });
    o.nested("stage1", [&](const json& v, const std::string&) { base.stage1 = stage1_from_json(v, base.stage1); });
    o.nested("stage2", [&](const json& v, const std::string&) { base.stage2 = stage2_from_json(v, base.stage2); });
    o.nested("train", [&](const json& v, const std::string& w) {
      Overlay t(v, w);
      t.nested("stage1", [&](const json& s, const std::string&) { base.train_stage1 = train_spec_from_json(s, base.train_stage1); });
      t.nested("stage2", [&](const json& s, const std::string&) { base.train_stage2 = train_spec_from_json(s, base.train_stage2); });
      t.nested("fusion", [&](const json& s, const std::string&) { base.train_fusion = train_spec_from_json(s, base.train_fusion); });
    });
  }
  base.validate();
  return base;
}

RunConfig load_run_config(const std::string& path) {
  json j;
  try {
    j = json::parse(detail::read_file(path));
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace capsct
