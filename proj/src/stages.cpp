#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <random>

#include "capsct/error.hpp"
#include "capsct/pipeline.hpp"
#include "capsct/rng.hpp"
#include "train_loop.hpp"

namespace capsct {

namespace {

std::string num(std::size_t v) { return std::to_string(v); }

void add_conv(ParameterSet& ps, const std::string& prefix, std::size_t cin, std::size_t cout,
              Rng& rng) {
  Tensor w({cout, cin, 3, 3});
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(cin * 9)));
  for (auto& v : w.mutable_data()) v = dist(rng);
  ps.add(prefix + ".weight", w.set_requires_grad());
  ps.add(prefix + ".bias", Tensor({cout}).set_requires_grad());
}

void add_batchnorm(ParameterSet& ps, const std::string& prefix, std::size_t features) {
  ps.add(prefix + ".gamma", Tensor({features}, 1.0).set_requires_grad());
  ps.add(prefix + ".beta", Tensor({features}).set_requires_grad());
  ps.add(prefix + ".running_mean", Tensor({features}), false);
  ps.add(prefix + ".running_var", Tensor({features}, 1.0), false);
}

void add_capsules(ParameterSet& ps, const std::string& name, const CapsuleSpec& in,
                  const CapsuleSpec& out, Rng& rng) {
  Tensor w({in.count, out.count, out.dim, in.dim});
  std::normal_distribution<double> dist(
      0.0, static_cast<double>(out.count) / std::sqrt(static_cast<double>(in.count * out.dim)));
  for (auto& v : w.mutable_data()) v = dist(rng);
  ps.add(name, w.set_requires_grad());
}

Tensor conv_relu(ParameterSet& ps, const std::string& prefix, const Tensor& x) {
  return relu(add_channel_bias(conv2d(x, ps.get(prefix + ".weight"), 1, 1), ps.get(prefix + ".bias")));
}

RunningStats stats_of(ParameterSet& ps, const std::string& prefix) {
  return {ps.get(prefix + ".running_mean").mutable_data(),
          ps.get(prefix + ".running_var").mutable_data()};
}

// Batch norm over every spatial position of a batch of [C×H×W] maps.
std::vector<Tensor> batchnorm_maps(ParameterSet& ps, const std::string& prefix,
                                   const std::vector<Tensor>& maps, Mode mode) {
  const std::size_t h = maps.front().dim(1), w = maps.front().dim(2);
  Tensor normed = batchnorm(channel_rows(maps), ps.get(prefix + ".gamma"), ps.get(prefix + ".beta"),
                            mode, stats_of(ps, prefix));
  std::vector<Tensor> out;
  out.reserve(maps.size());
  for (std::size_t i = 0; i < maps.size(); ++i) out.push_back(channel_rows_block(normed, i, h, w));
  return out;
}

Tensor as_image(const Tensor& slice, std::size_t side) {
  if (slice.rank() == 2 && slice.dim(0) == side && slice.dim(1) == side)
    return reshape(slice, {1, side, side});
  if (slice.rank() == 3 && slice.dim(0) == 1 && slice.dim(1) == side && slice.dim(2) == side)
    return slice;
  throw DimensionError("expected a " + num(side) + "x" + num(side) + " slice, got " +
                       shape_str(slice.shape()));
}

// Class capsule norms [count] of a capsule stack.
Tensor final_norms(const CapsuleStack& caps) { return row_norms(caps.values); }

Tensor mean_of(const std::vector<Tensor>& terms) {
  Tensor acc = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return scale(acc, 1.0 / static_cast<double>(terms.size()));
}

void check_capsule_spec(const CapsuleSpec& c, const char* what) {
  if (c.count == 0 || c.dim == 0) throw ConfigError(std::string(what) + " capsules must be non-empty");
}

}  // namespace

// ---------------------------------------------------------------- configs

void Stage1Config::validate() const {
  if (input_side == 0) throw ConfigError("stage1 input_side must be positive");
  for (std::size_t c : conv_channels)
    if (c == 0) throw ConfigError("stage1 conv channels must be positive");
  if (pool_window == 0 || input_side % pool_window != 0)
    throw ConfigError("stage1 pool_window must divide input_side");
  for (const auto& c : capsules) check_capsule_spec(c, "stage1");
  if (conv_channels[3] % capsules[0].dim != 0)
    throw ConfigError("stage1 conv4 channels must be a multiple of the primary capsule dim");
  const std::size_t ps = pooled_side();
  if (capsules[0].count != conv_channels[3] / capsules[0].dim * ps * ps)
    throw ConfigError("stage1 primary capsule count must be " +
                      num(conv_channels[3] / capsules[0].dim * ps * ps));
  if (capsules[2].count != 2) throw ConfigError("stage1 final capsule count must be 2");
  for (const auto& s : shortcuts)
    if (s.from < 1 || s.from + 1 >= s.to || s.to > 4)
      throw ConfigError("stage1 shortcut " + num(s.from) + "->" + num(s.to) +
                        " must skip at least one of the 4 conv layers");
  if (routing_iterations == 0) throw ConfigError("routing_iterations must be positive");
  loss.validate(2);
}

void Stage2Config::validate() const {
  if (candidate_count == 0) throw ConfigError("stage2 candidate_count must be positive");
  if (input_side == 0) throw ConfigError("stage2 input_side must be positive");
  for (std::size_t c : conv_channels)
    if (c == 0) throw ConfigError("stage2 conv channels must be positive");
  if (pool_window == 0 || input_side % pool_window != 0)
    throw ConfigError("stage2 pool_window must divide input_side");
  for (const auto& c : capsules) check_capsule_spec(c, "stage2");
  if (conv_channels[2] % capsules[0].dim != 0)
    throw ConfigError("stage2 conv3 channels must be a multiple of the primary capsule dim");
  const std::size_t ps = pooled_side();
  if (capsules[0].count != conv_channels[2] / capsules[0].dim * ps * ps)
    throw ConfigError("stage2 primary capsule count must be " +
                      num(conv_channels[2] / capsules[0].dim * ps * ps));
  if (capsules[1].count != 3) throw ConfigError("stage2 final capsule count must be 3");
  if (routing_iterations == 0) throw ConfigError("routing_iterations must be positive");
  loss.validate(3);
}

void TrainSpec::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(validation_fraction >= 0.0 && validation_fraction < 1.0))
    throw ConfigError("validation_fraction must be in [0, 1)");
}

// ---------------------------------------------------------------- stage 1

namespace {

std::size_t stage1_input_channels(const Stage1Config& c, std::size_t layer) {
  std::size_t ch = layer == 1 ? 1 : c.conv_channels[layer - 2];
  for (const auto& s : c.shortcuts)
    if (s.to == layer) ch += c.conv_channels[s.from - 1];
  return ch;
}

}  // namespace

ParameterSet init_stage1(const Stage1Config& config, std::uint64_t seed) {
  config.validate();
  Rng rng = make_rng(seed, "stage1/init");
  ParameterSet ps;
  for (std::size_t l = 1; l <= 4; ++l)
    add_conv(ps, "stage1.conv" + num(l), stage1_input_channels(config, l), config.conv_channels[l - 1],
             rng);
  add_batchnorm(ps, "stage1.bn", config.conv_channels[3]);
  add_capsules(ps, "stage1.caps1.weight", config.capsules[0], config.capsules[1], rng);
  add_capsules(ps, "stage1.caps2.weight", config.capsules[1], config.capsules[2], rng);
  return ps;
}

Stage1Forward stage1_forward(ParameterSet& params, const Stage1Config& config,
                             const std::vector<Tensor>& slices, Mode mode, RoutingTrace* trace) {
  if (slices.empty()) throw DataError("empty stage1 batch");
  Stage1Forward out;
  std::vector<Tensor> top;
  for (const auto& slice : slices) {
    std::array<Tensor, 4> a;
    std::array<std::optional<Tensor>, 2> pooled;  // layers 1-2 after the pool, on demand
    auto low = [&](std::size_t layer) -> Tensor {
      if (layer > 2) return a[layer - 1];
      if (!pooled[layer - 1])
        pooled[layer - 1] = maxpool2d(a[layer - 1], config.pool_window, config.pool_window);
      return *pooled[layer - 1];
    };
    for (std::size_t l = 1; l <= 4; ++l) {
      Tensor in = l == 1 ? as_image(slice, config.input_side) : l == 2 ? a[0] : low(l - 1);
      for (const auto& s : config.shortcuts)
        if (s.to == l) in = concat_channels(in, low(s.from));
      a[l - 1] = conv_relu(params, "stage1.conv" + num(l), in);
    }
    out.activations.push_back(a);
    top.push_back(a[3]);
  }
  auto normed = batchnorm_maps(params, "stage1.bn", top, mode);
  std::vector<Tensor> norms;
  for (const auto& m : normed) {
    CapsuleStack primary = primary_caps(m, config.capsules[0].dim);
    auto hidden = capsule_layer(primary, params.get("stage1.caps1.weight"), config.routing_iterations,
                                trace);
    auto final = capsule_layer(hidden.output, params.get("stage1.caps2.weight"),
                               config.routing_iterations, trace);
    norms.push_back(final_norms(final.output));
  }
  out.norms = stack_rows(norms);
  return out;
}

}  // namespace capsct

namespace capsct {

Tensor stage1_loss(const Tensor& norms, std::span<const int> infected,
                   const MarginLossConfig& loss) {
  if (norms.rank() != 2 || norms.dim(1) != 2 || norms.dim(0) != infected.size())
    throw DimensionError("stage1 loss expects [N×2] norms for N labels, got " +
                         shape_str(norms.shape()));
  std::vector<Tensor> terms;
  for (std::size_t i = 0; i < infected.size(); ++i)
    terms.push_back(margin_loss(select_row(norms, i), infected[i] ? 0 : 1, loss));
  return mean_of(terms);
}

double infection_probability(double inf_norm, double non_norm) {
  const double total = inf_norm + non_norm;
  return total == 0.0 ? 0.5 : inf_norm / total;
}

Tensor infection_probability(const Tensor& norms) {
  return select_row(reshape(normalize_sum(norms), {2, 1}), 0);
}

std::vector<double> infer_stage1(ParameterSet& params, const Stage1Config& config,
                                 const std::vector<Tensor>& slices) {
  constexpr std::size_t kChunk = 32;
  NoGrad off;
  std::vector<double> out;
  out.reserve(slices.size());
  for (std::size_t i = 0; i < slices.size(); i += kChunk) {
    std::vector<Tensor> chunk(slices.begin() + static_cast<long>(i),
                              slices.begin() + static_cast<long>(std::min(slices.size(), i + kChunk)));
    Tensor norms = stage1_forward(params, config, chunk, Mode::kInfer).norms;
    for (std::size_t r = 0; r < chunk.size(); ++r)
      out.push_back(infection_probability(norms[2 * r], norms[2 * r + 1]));
  }
  return out;
}

double infer_stage1(ParameterSet& params, const Stage1Config& config, const Tensor& slice) {
  return infer_stage1(params, config, std::vector<Tensor>{slice}).front();
}

TrainResult train_stage1(const SliceSet& data, const Stage1Config& config, const TrainSpec& spec) {
  config.validate();
  if (data.images.size() != data.infected.size() || data.images.size() != data.group.size())
    throw DataError("stage1 training set has mismatched images, labels and groups");
  std::map<std::size_t, int> stratum;
  for (std::size_t i = 0; i < data.group.size(); ++i)
    stratum[data.group[i]] = std::max(stratum[data.group[i]], data.infected[i] ? 1 : 0);
  Rng split_rng = make_rng(spec.seed, "stage1/split");
  auto split = detail::split_by_group(data.group, stratum, spec.validation_fraction, split_rng);

  std::vector<int> targets;
  for (std::size_t i : split.train) targets.push_back(data.infected[i] ? 0 : 1);
  if (std::count(targets.begin(), targets.end(), 0) == 0 ||
      std::count(targets.begin(), targets.end(), 1) == 0)
    throw DataError("stage1 training split needs both infected and clean slices");
  MarginLossConfig loss = config.loss;
  if (loss.class_weights.empty()) loss.class_weights = inverse_frequency_weights(targets, 2);

  TrainResult result{init_stage1(config, spec.seed), {}};
  result.history = detail::run_training(
      result.params, split, spec, "stage1",
      [&](const std::vector<std::size_t>& batch, Mode mode) {
        std::vector<Tensor> images;
        std::vector<int> labels;
        for (std::size_t i : batch) {
          images.push_back(data.images[i]);
          labels.push_back(data.infected[i]);
        }
        return stage1_loss(stage1_forward(result.params, config, images, mode).norms, labels, loss);
      });
  return result;
}

// ---------------------------------------------------------------- candidates

CandidateSet select_candidates(std::span<const double> p_infs, std::size_t k) {
  if (p_infs.empty()) throw DataError("cannot select candidates from an empty slice list");
  if (k == 0) throw ConfigError("candidate count must be positive");
  std::vector<std::size_t> order(p_infs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return p_infs[a] > p_infs[b]; });
  order.resize(std::min(k, order.size()));
  while (order.size() < k) order.push_back(order.front());
  CandidateSet out;
  out.slice_index = order;
  for (std::size_t i : order) out.p_inf.push_back(p_infs[i]);
  return out;
}

int decide(std::span<const double> scores) {
  int best = 0;
  for (std::size_t c = 1; c < scores.size(); ++c)
    if (scores[c] >= scores[static_cast<std::size_t>(best)]) best = static_cast<int>(c);
  return best;
}

namespace {

Tensor gate_matrix(std::span<const double> p_inf) {
  Tensor g({p_inf.size(), 3});
  auto d = g.mutable_data();
  for (std::size_t k = 0; k < p_inf.size(); ++k) {
    const double p = p_inf[k];
    if (!(p >= 0.0 && p <= 1.0)) throw ContractError("p_inf must lie in [0, 1]");
    d[3 * k] = p;
    d[3 * k + 1] = p;
    d[3 * k + 2] = 1.0 - p;
  }
  return g;
}

GateResult finish_gate(std::span<const double> scores) {
  GateResult r;
  double total = 0.0;
  for (std::size_t c = 0; c < 3; ++c) {
    r.scores[c] = scores[c];
    total += scores[c];
  }
  for (std::size_t c = 0; c < 3; ++c) r.probabilities[c] = total > 0.0 ? r.scores[c] / total : 1.0 / 3.0;
  r.decision = decide(r.scores);
  return r;
}

}  // namespace

Tensor gate_and_pool(const Tensor& norms, std::span<const double> p_inf) {
  if (norms.rank() != 2 || norms.dim(1) != 3 || norms.dim(0) != p_inf.size() || p_inf.empty())
    throw DimensionError("gating expects [K×3] norms for K probabilities, got " +
                         shape_str(norms.shape()));
  return max_over_rows(mul(norms, gate_matrix(p_inf)));
}

GateResult gate_and_pool(std::span<const std::array<double, 3>> norms,
                         std::span<const double> p_inf) {
  if (norms.size() != p_inf.size() || norms.empty())
    throw DimensionError("gating needs one probability per candidate");
  std::vector<double> flat;
  for (const auto& n : norms) flat.insert(flat.end(), n.begin(), n.end());
  NoGrad off;
  Tensor pooled = gate_and_pool(Tensor({norms.size(), 3}, flat), p_inf);
  return finish_gate(pooled.data());
}

// ---------------------------------------------------------------- stage 2

ParameterSet init_stage2(const Stage2Config& config, std::uint64_t seed) {
  config.validate();
  Rng rng = make_rng(seed, "stage2/init");
  ParameterSet ps;
  const auto& ch = config.conv_channels;
  add_conv(ps, "stage2.conv1", 1, ch[0], rng);
  add_conv(ps, "stage2.conv2", ch[0], ch[1], rng);
  add_batchnorm(ps, "stage2.bn", ch[1]);
  add_conv(ps, "stage2.conv3", ch[1], ch[2], rng);
  add_capsules(ps, "stage2.caps.weight", config.capsules[0], config.capsules[1], rng);
  return ps;
}

Stage2Forward stage2_forward(ParameterSet& params, const Stage2Config& config,
                             const std::vector<const CandidateSet*>& patients, Mode mode,
                             RoutingTrace* trace) {
  if (patients.empty()) throw DataError("empty stage2 batch");
  const std::size_t k = config.candidate_count;
  Stage2Forward out;
  std::vector<Tensor> second;
  for (const CandidateSet* p : patients) {
    if (p->slices.size() != k || p->p_inf.size() != k)
      throw ConfigError("patient " + p->patient_id + " has " + num(p->slices.size()) +
                        " candidates, expected " + num(k));
    auto& acts = out.activations.emplace_back();
    for (const auto& slice : p->slices) {
      Tensor a1 = conv_relu(params, "stage2.conv1", as_image(slice, config.input_side));
      Tensor a2 = conv_relu(params, "stage2.conv2", a1);
      acts.push_back({a1, a2, Tensor()});
      second.push_back(a2);
    }
  }
  auto normed = batchnorm_maps(params, "stage2.bn", second, mode);
  for (std::size_t i = 0; i < patients.size(); ++i) {
    std::vector<Tensor> rows;
    for (std::size_t c = 0; c < k; ++c) {
      Tensor pooled = maxpool2d(normed[i * k + c], config.pool_window, config.pool_window);
      Tensor a3 = conv_relu(params, "stage2.conv3", pooled);
      out.activations[i][c][2] = a3;
      CapsuleStack primary = primary_caps(a3, config.capsules[0].dim);
      auto classes = capsule_layer(primary, params.get("stage2.caps.weight"),
                                   config.routing_iterations, trace);
      rows.push_back(final_norms(classes.output));
    }
    Tensor norms = stack_rows(rows);
    out.pooled.push_back(gate_and_pool(norms, patients[i]->p_inf));
    out.norms.push_back(norms);
  }
  return out;
}

Tensor stage2_loss(const std::vector<Tensor>& pooled, std::span<const int> labels,
                   const MarginLossConfig& loss) {
  if (pooled.size() != labels.size() || pooled.empty())
    throw DimensionError("stage2 loss needs one label per patient");
  std::vector<Tensor> terms;
  for (std::size_t i = 0; i < pooled.size(); ++i)
    terms.push_back(margin_loss(pooled[i], static_cast<std::size_t>(labels[i]), loss));
  return mean_of(terms);
}

GateResult infer_stage2(ParameterSet& params, const Stage2Config& config,
                        const CandidateSet& candidates) {
  NoGrad off;
  auto fwd = stage2_forward(params, config, {&candidates}, Mode::kInfer);
  return finish_gate(fwd.pooled.front().data());
}

TrainResult train_stage2(const std::vector<CandidateSet>& data, std::span<const int> labels,
                         const Stage2Config& config, const TrainSpec& spec) {
  config.validate();
  if (data.size() != labels.size()) throw DataError("stage2 needs one label per patient");
  std::vector<std::size_t> group(data.size());
  std::iota(group.begin(), group.end(), 0);
  std::map<std::size_t, int> stratum;
  for (std::size_t i = 0; i < data.size(); ++i) stratum[i] = labels[i];
  Rng split_rng = make_rng(spec.seed, "stage2/split");
  auto split = detail::split_by_group(group, stratum, spec.validation_fraction, split_rng);

  std::vector<int> train_labels;
  for (std::size_t i : split.train) train_labels.push_back(labels[i]);
  for (int c = 0; c < 3; ++c)
    if (std::count(train_labels.begin(), train_labels.end(), c) == 0)
      throw DataError("stage2 training split has no " + std::string(label_name(static_cast<Label>(c))) +
                      " patient");
  MarginLossConfig loss = config.loss;
  if (loss.class_weights.empty()) loss.class_weights = inverse_frequency_weights(train_labels, 3);

  TrainResult result{init_stage2(config, spec.seed), {}};
  result.history = detail::run_training(
      result.params, split, spec, "stage2",
      [&](const std::vector<std::size_t>& batch, Mode mode) {
        std::vector<const CandidateSet*> patients;
        std::vector<int> y;
        for (std::size_t i : batch) {
          patients.push_back(&data[i]);
          y.push_back(labels[i]);
        }
        return stage2_loss(stage2_forward(result.params, config, patients, mode).pooled, y, loss);
      });
  return result;
}

}  // namespace capsct
