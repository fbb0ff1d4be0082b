#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "capsct/error.hpp"
#include "capsct/optim.hpp"
#include "capsct/pipeline.hpp"
#include "capsct/rng.hpp"

namespace capsct::detail {

struct ItemSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
};

// Splits items by group so that no group straddles the two sides. Groups are
// stratified by `stratum_of_group` and every stratum keeps at least one
// group on the training side.
inline ItemSplit split_by_group(std::span<const std::size_t> group_of_item,
                                const std::map<std::size_t, int>& stratum_of_group,
                                double fraction, Rng& rng) {
  std::map<int, std::vector<std::size_t>> strata;
  for (const auto& [g, s] : stratum_of_group) strata[s].push_back(g);
  std::vector<bool> held;
  std::size_t max_group = 0;
  for (const auto& [g, s] : stratum_of_group) max_group = std::max(max_group, g);
  held.assign(max_group + 1, false);
  for (auto& [s, groups] : strata) {
    std::shuffle(groups.begin(), groups.end(), rng);
    auto take = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(groups.size())));
    take = std::min(take, groups.size() - 1);
    for (std::size_t i = 0; i < take; ++i) held[groups[i]] = true;
  }
  ItemSplit out;
  for (std::size_t i = 0; i < group_of_item.size(); ++i)
    (held[group_of_item[i]] ? out.validation : out.train).push_back(i);
  return out;
}

// Batches of `size`; a trailing batch of one item joins the previous batch
// (batch statistics need two rows).
inline std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& order,
                                                          std::size_t size) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += size)
    out.emplace_back(order.begin() + static_cast<long>(i),
                     order.begin() + static_cast<long>(std::min(order.size(), i + size)));
  if (out.size() > 1 && out.back().size() == 1) {
    out[out.size() - 2].push_back(out.back().front());
    out.pop_back();
  }
  return out;
}

// Mean loss of a batch, built from `params` in the given mode.
using BatchLoss = std::function<Tensor(const std::vector<std::size_t>&, Mode)>;

// Adam over shuffled mini-batches, keeping the parameters of the epoch with
// the lowest validation loss (the last epoch without a validation split).
inline TrainHistory run_training(ParameterSet& params, const ItemSplit& split,
                                 const TrainSpec& spec, const std::string& stream,
                                 const BatchLoss& batch_loss) {
  spec.validate();
  if (split.train.empty()) throw DataError("empty training split");
  Rng rng = make_rng(spec.seed, stream + "/shuffle");
  Adam adam(params.trainable(), AdamOptions{.learning_rate = spec.learning_rate});
  TrainHistory history;
  ParameterSet best = params.snapshot();
  double best_loss = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> order = split.train;
  for (std::size_t epoch = 0; epoch < spec.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (const auto& batch : make_batches(order, spec.batch_size)) {
      Tape tape;
      Tensor loss;
      {
        Recording rec(tape);
        loss = batch_loss(batch, Mode::kTrain);
      }
      backward(tape, loss);
      adam.step();
      total += loss.item() * static_cast<double>(batch.size());
    }
    history.train_loss.push_back(total / static_cast<double>(order.size()));

    double score = history.train_loss.back();
    if (!split.validation.empty()) {
      NoGrad off;
      double v = 0.0;
      for (const auto& batch : make_batches(split.validation, spec.batch_size))
        v += batch_loss(batch, Mode::kInfer).item() * static_cast<double>(batch.size());
      score = v / static_cast<double>(split.validation.size());
      history.validation_loss.push_back(score);
    } else {
      score = -static_cast<double>(epoch);  // keep the latest
    }
    if (score < best_loss) {
      best_loss = score;
      best = params.snapshot();
      history.best_epoch = epoch;
    }
  }
  params.assign(best);
  return history;
}

}  // namespace capsct::detail
