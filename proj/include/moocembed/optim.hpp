// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "config.hpp"
#include "nn.hpp"
#include "rng.hpp"

namespace moocembed {

enum class Rule { sgd, rmsprop, adam };

inline std::string_view rule_name(Rule r) {
  switch (r) {
    case Rule::sgd: return "sgd";
    case Rule::rmsprop: return "rmsprop";
    case Rule::adam: return "adam";
  }
  return "sgd";
}

inline Rule parse_rule(const std::string& s) {
  if (s == "sgd") return Rule::sgd;
  if (s == "rmsprop") return Rule::rmsprop;
  if (s == "adam") return Rule::adam;
  throw ArgumentError("unknown optimizer '" + s + "'");
}

struct TrainConfig {
  double learning_rate = 0.001;
  std::size_t epochs = 200;
  std::size_t batch_size = 64;
  Rule optimizer = Rule::adam;
  std::uint64_t seed = 0;
  std::map<std::string, double> group_lr_multipliers;
  /// Early stopping patience in epochs on a validation callback; 0 disables it.
  std::size_t patience = 0;

  void validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
      throw ArgumentError("learning rate must be a finite non-negative number");
    if (epochs < 1) throw ArgumentError("epochs must be at least 1");
    if (batch_size < 1) throw ArgumentError("batch size must be positive");
  }

  double multiplier(const std::string& group) const {
    auto it = group_lr_multipliers.find(group);
    return it == group_lr_multipliers.end() ? 1.0 : it->second;
  }
};

/// Reads learning_rate, epochs, batch_size, optimizer, seed, patience and
/// `lr_multiplier.<group>` keys; missing keys keep the values of `base`.
inline TrainConfig train_config_from(const KeyValues& kv, TrainConfig base = {}) {
  base.learning_rate = kv.get_double("learning_rate", base.learning_rate);
  base.epochs = kv.get_size("epochs", base.epochs);
  base.batch_size = kv.get_size("batch_size", base.batch_size);
  if (auto o = kv.get("optimizer")) base.optimizer = parse_rule(*o);
  base.seed = kv.get_size("seed", base.seed);
  base.patience = kv.get_size("patience", base.patience);
  const std::string prefix = "lr_multiplier.";
  for (const auto& [k, v] : kv.entries())
    if (k.rfind(prefix, 0) == 0) base.group_lr_multipliers[k.substr(prefix.size())] = kv.get_double(k, 1.0);
  return base;
}

/// Moment accumulators for one parameter list.
class Optimizer {
 public:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kRho = 0.9;
  static constexpr double kEps = 1e-8;

  explicit Optimizer(Rule rule = Rule::adam) : rule_(rule) {}

  Rule rule() const { return rule_; }
  std::uint64_t steps() const { return step_; }

  /// Applies one update with learning rate lr * multiplier(group), then zeroes the gradients.
  void step(const ParamRefs& params, double lr, const std::map<std::string, double>& multipliers = {}) {
    for (const Param* p : params)
      if (!p->grad.all_finite()) throw NumericError("non-finite gradient in parameter " + p->name);
    ensure_state(params);
    ++step_;
    const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(step_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      Param& p = *params[k];
      auto mit = multipliers.find(p.group);
      const double rate = lr * (mit == multipliers.end() ? 1.0 : mit->second);
      double* w = p.value.raw();
      const double* g = p.grad.raw();
      const std::size_t n = p.value.size();
      switch (rule_) {
        case Rule::sgd:
          for (std::size_t i = 0; i < n; ++i) w[i] -= rate * g[i];
          break;
        case Rule::rmsprop: {
          double* v = second_[k].raw();
          for (std::size_t i = 0; i < n; ++i) {
            v[i] = kRho * v[i] + (1.0 - kRho) * g[i] * g[i];
            w[i] -= rate * g[i] / (std::sqrt(v[i]) + kEps);
          }
          break;
        }
        case Rule::adam: {
          double* m = first_[k].raw();
          double* v = second_[k].raw();
          for (std::size_t i = 0; i < n; ++i) {
            m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * g[i];
            v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * g[i] * g[i];
            w[i] -= rate * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + kEps);
          }
          break;
        }
      }
      p.zero_grad();
    }
  }

  NamedArrays state(const ParamRefs& params) const {
    NamedArrays out;
    out.emplace_back("opt.step", Array({1}, {static_cast<double>(step_)}));
    for (std::size_t k = 0; k < first_.size(); ++k) {
      out.emplace_back("opt.m." + params.at(k)->name, first_[k]);
      out.emplace_back("opt.v." + params.at(k)->name, second_[k]);
    }
    return out;
  }

  void restore(const ParamRefs& params, const NamedArrays& arrays) {
    first_.clear();
    second_.clear();
    step_ = 0;
    auto find = [&](const std::string& name) -> const Array* {
      for (const auto& [n, a] : arrays)
        if (n == name) return &a;
      return nullptr;
    };
    if (const Array* s = find("opt.step")) step_ = static_cast<std::uint64_t>((*s)(0));
    if (step_ == 0) return;
    for (const Param* p : params) {
      const Array* m = find("opt.m." + p->name);
      const Array* v = find("opt.v." + p->name);
      if (!m || !v) throw ReferenceError("optimizer state lacks " + p->name);
      first_.push_back(*m);
      second_.push_back(*v);
    }
  }

 private:
  void ensure_state(const ParamRefs& params) {
    if (first_.size() == params.size()) return;
    first_.clear();
    second_.clear();
    for (const Param* p : params) {
      first_.emplace_back(p->value.shape());
      second_.emplace_back(p->value.shape());
    }
  }

  Rule rule_;
  std::uint64_t step_ = 0;
  std::vector<Array> first_;
  std::vector<Array> second_;
};

/// Mini-batch training over sample indices 0..n-1 with a per-epoch seeded shuffle.
///
/// The batch function receives the indices of one batch, runs forward and backward,
/// accumulates gradients of the batch-mean loss and returns that mean loss.
class Trainer {
 public:
  using BatchFn = std::function<double(std::span<const std::size_t>)>;

  Trainer(ParamRefs params, std::size_t n_samples, TrainConfig config)
      : params_(std::move(params)), n_(n_samples), config_(std::move(config)),
        optimizer_(config_.optimizer), rng_(Rng(config_.seed).derive(0x5EED)) {
    config_.validate();
    if (n_ == 0) throw ArgumentError("train: empty dataset");
  }

  std::size_t epoch() const { return epoch_; }
  const TrainConfig& config() const { return config_; }

  double run_epoch(const BatchFn& batch_fn) {
    std::vector<std::size_t> order(n_);
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng_.shuffle(order);
    double total = 0.0;
    zero_grads(params_);
    for (std::size_t start = 0; start < n_; start += config_.batch_size) {
      const std::size_t len = std::min(config_.batch_size, n_ - start);
      std::span<const std::size_t> batch(order.data() + start, len);
      const double loss = batch_fn(batch);
      if (!std::isfinite(loss)) throw NumericError("non-finite training loss at epoch " + std::to_string(epoch_));
      total += loss * static_cast<double>(len);
      optimizer_.step(params_, config_.learning_rate, config_.group_lr_multipliers);
    }
    ++epoch_;
    return total / static_cast<double>(n_);
  }

  /// Optimizer moments plus loop position; combine with the parameter values to resume.
  NamedArrays state() const {
    NamedArrays out = optimizer_.state(params_);
    out.emplace_back("trainer.epoch", Array({1}, {static_cast<double>(epoch_)}));
    out.emplace_back("trainer.rng_position", Array({1}, {static_cast<double>(rng_.position())}));
    return out;
  }

  void restore(const NamedArrays& arrays) {
    optimizer_.restore(params_, arrays);
    for (const auto& [n, a] : arrays) {
      if (n == "trainer.epoch") epoch_ = static_cast<std::size_t>(a(0));
      if (n == "trainer.rng_position") rng_.set_position(static_cast<std::uint64_t>(a(0)));
    }
  }

 private:
  ParamRefs params_;
  std::size_t n_;
  TrainConfig config_;
  Optimizer optimizer_;
  Rng rng_;
  std::size_t epoch_ = 0;
};

/// Runs `config.epochs` epochs and returns the per-epoch mean training loss.
///
/// `on_epoch(epoch, train_loss)` may return a validation loss (or NaN when there is none);
/// with `config.patience > 0` training stops once it has not improved for that many epochs.
/// `stop(epoch, train_loss)` may end training early by returning true.
inline std::vector<double> train(const ParamRefs& params, std::size_t n_samples, const TrainConfig& config,
                                 const Trainer::BatchFn& batch_fn,
                                 const std::function<double(std::size_t, double)>& on_epoch = {},
                                 const std::function<bool(std::size_t, double)>& stop = {}) {
  Trainer trainer(params, n_samples, config);
  std::vector<double> history;
  double best = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  for (std::size_t e = 0; e < config.epochs; ++e) {
    const double loss = trainer.run_epoch(batch_fn);
    history.push_back(loss);
    if (on_epoch) {
      const double val = on_epoch(e, loss);
      if (config.patience > 0 && std::isfinite(val)) {
        if (val < best) {
          best = val;
          since_best = 0;
        } else if (++since_best >= config.patience) {
          break;
        }
      }
    }
    if (stop && stop(e, loss)) break;
  }
  return history;
}

}  // namespace moocembed
