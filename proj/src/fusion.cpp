#include <cmath>
#include <map>
#include <numeric>
#include <random>

#include "capsct/error.hpp"
#include "capsct/pipeline.hpp"
#include "capsct/rng.hpp"
#include "train_loop.hpp"

namespace capsct {

namespace {

std::string block(std::size_t i) { return "fusion.fc" + std::to_string(i); }
std::string norm_block(std::size_t i) { return "fusion.bn" + std::to_string(i); }

void add_dense(ParameterSet& ps, const std::string& prefix, std::size_t in, std::size_t out,
               double sd, Rng& rng) {
  Tensor w({in, out});
  std::normal_distribution<double> dist(0.0, sd);
  for (auto& v : w.mutable_data()) v = dist(rng);
  ps.add(prefix + ".weight", w.set_requires_grad());
  ps.add(prefix + ".bias", Tensor({out}).set_requires_grad());
}

void check_input(std::span<const double> x) {
  if (x.size() != kFusionInputs)
    throw DataError("fusion input must have " + std::to_string(kFusionInputs) + " features, got " +
                    std::to_string(x.size()));
}

std::pair<double, double> mean_sd(const std::vector<double>& v) {
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  const double sd = std::sqrt(ss / static_cast<double>(v.size()));
  return {m, sd > 0.0 ? sd : 1.0};
}

}  // namespace

ClinicalScaler ClinicalScaler::fit(std::span<const ClinicalFeatures> train) {
  if (train.empty()) throw DataError("cannot fit clinical scaling on an empty set");
  std::vector<double> age, weight;
  for (const auto& c : train) {
    age.push_back(c.age);
    weight.push_back(c.weight);
  }
  ClinicalScaler s;
  std::tie(s.age_mean, s.age_sd) = mean_sd(age);
  std::tie(s.weight_mean, s.weight_sd) = mean_sd(weight);
  return s;
}

std::array<double, 8> ClinicalScaler::encode(const ClinicalFeatures& c) const {
  auto flag = [](bool b) { return b ? 1.0 : 0.0; };
  return {c.sex == Sex::kFemale ? 1.0 : 0.0,
          (c.age - age_mean) / age_sd,
          (c.weight - weight_mean) / weight_sd,
          flag(c.cough),
          flag(c.fever),
          flag(c.dyspnea),
          flag(c.chest_pain),
          flag(c.fatigue)};
}

std::vector<double> fusion_input(const std::array<double, 3>& class_probs,
                                 const std::array<double, 8>& clinical) {
  std::vector<double> out(class_probs.begin(), class_probs.end());
  out.insert(out.end(), clinical.begin(), clinical.end());
  return out;
}

ParameterSet init_fusion(std::uint64_t seed) {
  Rng rng = make_rng(seed, "fusion/init");
  ParameterSet ps;
  std::size_t in = kFusionInputs;
  for (std::size_t i = 1; i <= kFusionBlocks; ++i) {
    add_dense(ps, block(i), in, kFusionHidden, std::sqrt(2.0 / static_cast<double>(in)), rng);
    const std::string bn = norm_block(i);
    ps.add(bn + ".gamma", Tensor({kFusionHidden}, 1.0).set_requires_grad());
    ps.add(bn + ".beta", Tensor({kFusionHidden}).set_requires_grad());
    ps.add(bn + ".running_mean", Tensor({kFusionHidden}), false);
    ps.add(bn + ".running_var", Tensor({kFusionHidden}, 1.0), false);
    in = kFusionHidden;
  }
  add_dense(ps, "fusion.out", kFusionHidden, 3,
            std::sqrt(2.0 / static_cast<double>(kFusionHidden + 3)), rng);
  return ps;
}

Tensor fusion_forward(ParameterSet& params, const Tensor& inputs, Mode mode) {
  if (inputs.rank() != 2 || inputs.dim(1) != kFusionInputs)
    throw DataError("fusion expects [N×" + std::to_string(kFusionInputs) + "] inputs, got " +
                    shape_str(inputs.shape()));
  Tensor h = inputs;
  for (std::size_t i = 1; i <= kFusionBlocks; ++i) {
    h = add_bias(matmul(h, params.get(block(i) + ".weight")), params.get(block(i) + ".bias"));
    const std::string bn = norm_block(i);
    h = relu(batchnorm(h, params.get(bn + ".gamma"), params.get(bn + ".beta"), mode,
                       {params.get(bn + ".running_mean").mutable_data(),
                        params.get(bn + ".running_var").mutable_data()}));
  }
  return add_bias(matmul(h, params.get("fusion.out.weight")), params.get("fusion.out.bias"));
}

FusionPrediction infer_fusion(ParameterSet& params, std::span<const double> input) {
  check_input(input);
  NoGrad off;
  Tensor logits = fusion_forward(params, Tensor({1, kFusionInputs}, {input.begin(), input.end()}),
                                 Mode::kInfer);
  Tensor probs = softmax_axis(logits, 1);
  FusionPrediction out;
  for (std::size_t c = 0; c < 3; ++c) out.probabilities[c] = probs[c];
  out.decision = static_cast<int>(std::max_element(out.probabilities.begin(), out.probabilities.end()) -
                                  out.probabilities.begin());
  return out;
}

TrainResult train_fusion(const std::vector<std::vector<double>>& inputs,
                         std::span<const int> labels, const TrainSpec& spec) {
  if (inputs.size() != labels.size()) throw DataError("fusion needs one label per patient");
  for (const auto& x : inputs) check_input(x);
  std::vector<std::size_t> group(inputs.size());
  std::iota(group.begin(), group.end(), 0);
  std::map<std::size_t, int> stratum;
  for (std::size_t i = 0; i < inputs.size(); ++i) stratum[i] = labels[i];
  Rng split_rng = make_rng(spec.seed, "fusion/split");
  auto split = detail::split_by_group(group, stratum, spec.validation_fraction, split_rng);
  if (split.train.size() < 2) throw DataError("fusion training split needs at least 2 patients");

  TrainResult result{init_fusion(spec.seed), {}};
  result.history = detail::run_training(
      result.params, split, spec, "fusion",
      [&](const std::vector<std::size_t>& batch, Mode mode) {
        std::vector<double> flat;
        std::vector<int> y;
        for (std::size_t i : batch) {
          flat.insert(flat.end(), inputs[i].begin(), inputs[i].end());
          y.push_back(labels[i]);
        }
        Tensor x({batch.size(), kFusionInputs}, std::move(flat));
        return softmax_cross_entropy(fusion_forward(result.params, x, mode), y);
      });
  return result;
}

}  // namespace capsct
