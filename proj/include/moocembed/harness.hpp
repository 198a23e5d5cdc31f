// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <exception>
#include <functional>
#include <iomanip>
#include <mutex>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "analysis.hpp"
#include "config.hpp"
#include "ingest.hpp"
#include "models.hpp"
#include "optim.hpp"
#include "rng.hpp"

namespace moocembed {

// ---------------------------------------------------------------------------
// Folds
// ---------------------------------------------------------------------------

struct FoldPlan {
  std::size_t n = 0;
  std::uint64_t seed = 0;
  std::vector<std::vector<std::size_t>> folds;

  std::size_t count() const { return folds.size(); }

  const std::vector<std::size_t>& validation(std::size_t f) const { return folds.at(f); }

  /// Every index outside fold `f`, ascending.
  std::vector<std::size_t> training(std::size_t f) const {
    std::vector<bool> held(n, false);
    for (auto i : folds.at(f)) held[i] = true;
    std::vector<std::size_t> out;
    out.reserve(n - folds[f].size());
    for (std::size_t i = 0; i < n; ++i)
      if (!held[i]) out.push_back(i);
    return out;
  }
};

/// Seeded shuffle of 0..n-1 cut into k contiguous folds; the first n % k folds get one extra index.
inline FoldPlan kfold_split(std::size_t n, std::size_t k = 5, std::uint64_t seed = 0) {
  if (k < 2) throw ArgumentError("kfold_split needs at least 2 folds");
  if (n < k) throw ArgumentError("kfold_split: " + std::to_string(n) + " samples for " + std::to_string(k) + " folds");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = Rng(seed).derive(0xF01D);
  rng.shuffle(order);
  FoldPlan plan{n, seed, {}};
  std::size_t start = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t len = n / k + (f < n % k ? 1 : 0);
    plan.folds.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                            order.begin() + static_cast<std::ptrdiff_t>(start + len));
    start += len;
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Per-chapter tensors
// ---------------------------------------------------------------------------

struct ChapterData {
  std::size_t chapter = 0;  // k
  Array inputs;             // [n, k-1, F]
  Array full;               // [n, N, F]
  Array labels;             // [n], y_k
};

inline ChapterData chapter_data(const Dataset& ds, std::size_t k) {
  if (k < 2 || k > ds.chapters)
    throw ArgumentError("chapter " + std::to_string(k) + " outside 2.." + std::to_string(ds.chapters));
  if (ds.size() == 0) throw ArgumentError("empty dataset");
  const std::size_t n = ds.size(), nc = ds.chapters;
  ChapterData d;
  d.chapter = k;
  d.full = Array({n, nc, kFeatureCount});
  d.labels = Array({n});
  std::size_t valid = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = ds.students[i];
    std::copy(s.features.raw(), s.features.raw() + nc * kFeatureCount, &d.full(i, 0, 0));
    if (s.label_mask[k - 1]) {
      d.labels(i) = s.labels(k - 1);
      ++valid;
    }
  }
  if (valid == 0) throw ArgumentError("chapter " + std::to_string(k) + " has no valid labels");
  if (valid != n) throw ArgumentError("chapter " + std::to_string(k) + " has masked labels; filter the dataset first");
  d.inputs = prefix_of(d.full, k);
  return d;
}

inline ChapterData subset(const ChapterData& d, std::span<const std::size_t> idx) {
  return {d.chapter, gather(d.inputs, idx), gather(d.full, idx), gather(d.labels, idx)};
}

/// Chapters 2..N that carry an assessment.
inline std::vector<std::size_t> predictable_chapters(const Dataset& ds) {
  std::vector<std::size_t> out;
  for (std::size_t k = 2; k <= ds.chapters; ++k)
    if (ds.assessed[k - 1]) out.push_back(k);
  return out;
}

// ---------------------------------------------------------------------------
// Experiment settings
// ---------------------------------------------------------------------------

struct ExperimentConfig {
  std::uint64_t seed = 7;
  std::size_t folds = 5;
  std::size_t threads = 1;
  /// Share of each training split held back to pick the stopping epoch; 0 disables the holdout.
  double validation_fraction = 0.1;
  /// Supervised training of baselines; the optimizer follows the model kind.
  TrainConfig supervised{0.001, 200, 64, Rule::adam, 0, {}, 20};
  /// Unsupervised encoder pre-training.
  TrainConfig pretraining{0.004, 200, 64, Rule::rmsprop, 0, {}, 20};
  /// Joint fine-tuning of pre-trained encoder and head.
  TrainConfig fine_tuning{0.001, 200, 64, Rule::rmsprop, 0, {}, 20};
  double encoder_lr_multiplier = 0.1;
  /// Pre-train encoders on all students instead of the fold's training split.
  bool pooled_pretraining = false;
  /// Follow the per-kind optimizer choice rather than the configured rule for supervised runs.
  bool auto_optimizer = true;
};

/// Keys: seed, folds, threads, validation_fraction, pooled_pretraining, encoder_lr_multiplier, and
/// supervised.*, pretraining.*, fine_tuning.* training keys (learning_rate, epochs, batch_size,
/// optimizer, patience).
inline ExperimentConfig experiment_config_from(const KeyValues& kv, ExperimentConfig c = {}) {
  c.seed = kv.get_size("seed", c.seed);
  c.folds = kv.get_size("folds", c.folds);
  c.threads = kv.get_size("threads", c.threads);
  c.pooled_pretraining = kv.get_bool("pooled_pretraining", c.pooled_pretraining);
  c.encoder_lr_multiplier = kv.get_double("encoder_lr_multiplier", c.encoder_lr_multiplier);
  c.validation_fraction = kv.get_double("validation_fraction", c.validation_fraction);
  if (!(c.validation_fraction >= 0.0 && c.validation_fraction < 1.0))
    throw ArgumentError("validation_fraction must lie in [0, 1)");
  auto section = [&](const std::string& prefix, TrainConfig base) {
    KeyValues sub;
    for (const auto& [k, v] : kv.entries())
      if (k.rfind(prefix + ".", 0) == 0) sub.set(k.substr(prefix.size() + 1), v);
    const bool explicit_rule = sub.has("optimizer");
    base = train_config_from(sub, base);
    return std::pair{base, explicit_rule};
  };
  bool rule_set = false;
  std::tie(c.supervised, rule_set) = section("supervised", c.supervised);
  if (rule_set) c.auto_optimizer = false;
  c.pretraining = section("pretraining", c.pretraining).first;
  c.fine_tuning = section("fine_tuning", c.fine_tuning).first;
  return c;
}

/// Stream key for one (chapter, fold) job. Every model spec in that job starts from the same
/// key, so comparing a spec with itself gives identical numbers.
inline std::uint64_t job_seed(std::uint64_t seed, std::size_t chapter, std::size_t fold) {
  return Rng(seed).derive(chapter).derive(fold).key();
}

/// Splits `n` training indices into a fitting part and an early-stopping holdout.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> holdout_split(std::size_t n, double fraction,
                                                                                   std::uint64_t key) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto held = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  if (held == 0 || held >= n) return {order, {}};
  Rng(key).derive(6).shuffle(order);
  std::vector<std::size_t> fit(order.begin(), order.end() - static_cast<std::ptrdiff_t>(held));
  std::vector<std::size_t> hold(order.end() - static_cast<std::ptrdiff_t>(held), order.end());
  std::sort(fit.begin(), fit.end());
  std::sort(hold.begin(), hold.end());
  return {fit, hold};
}

/// Trains a predictor for one job. Part of `train_data` is held back for early stopping.
/// Embedding predictors first pre-train their encoder on the fitting part's full sequences
/// (or on `pooled_full` when given), then fine-tune jointly with the head.
inline std::unique_ptr<Predictor> fit_spec(PredictorSpec spec, const ChapterData& train_data,
                                           const ExperimentConfig& cfg, std::uint64_t key,
                                           const Array* pooled_full = nullptr) {
  spec.chapter = train_data.chapter;
  spec.encoder.chapter = train_data.chapter;
  spec.seed = Rng(key).derive(1).key();
  spec.encoder.seed = Rng(key).derive(2).key();
  spec.encoder.chapters = train_data.full.dim(1);

  const auto [fit_idx, hold_idx] = holdout_split(train_data.labels.size(), cfg.validation_fraction, key);
  const ChapterData fit = hold_idx.empty() ? train_data : subset(train_data, fit_idx);
  std::optional<ChapterData> hold;
  if (!hold_idx.empty()) hold = subset(train_data, hold_idx);
  std::optional<Holdout> supervised_hold, unsupervised_hold;
  if (hold) {
    supervised_hold = Holdout{hold->inputs, hold->labels};
    unsupervised_hold = Holdout{hold->full, {}};
  }
  const Holdout* sup = supervised_hold ? &*supervised_hold : nullptr;
  const Holdout* unsup = unsupervised_hold ? &*unsupervised_hold : nullptr;

  if (!spec.uses_embedding()) {
    auto model = build_predictor(spec);
    TrainConfig tc = cfg.supervised;
    tc.seed = Rng(key).derive(3).key();
    if (cfg.auto_optimizer) tc.optimizer = default_rule(spec.kind);
    fit_predictor(*model, fit.inputs, fit.labels, tc, sup);
    return model;
  }
  auto ae = make_autoencoder(spec.encoder);
  TrainConfig pc = cfg.pretraining;
  pc.seed = Rng(key).derive(4).key();
  pretrain(*ae, pooled_full ? *pooled_full : fit.full, pc, unsup);
  auto model = build_predictor(spec, std::move(ae));
  TrainConfig fc = cfg.fine_tuning;
  fc.seed = Rng(key).derive(5).key();
  fine_tune(static_cast<EmbeddingPredictor&>(*model), fit.inputs, fit.labels, fc, cfg.encoder_lr_multiplier, sup);
  return model;
}

// ---------------------------------------------------------------------------
// Parallel jobs
// ---------------------------------------------------------------------------

/// Runs job(0..count-1) on up to `threads` workers; results must go to per-index slots.
/// The first exception thrown by any job is rethrown after all workers finish.
inline void parallel_for(std::size_t count, std::size_t threads, const std::function<void(std::size_t)>& job) {
  threads = std::max<std::size_t>(1, std::min(threads, count));
  if (threads == 1) {
    for (std::size_t i = 0; i < count; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t)
      pool.emplace_back([&] {
        for (std::size_t i; (i = next.fetch_add(1)) < count;) {
          try {
            job(i);
          } catch (...) {
            std::lock_guard lock(error_mutex);
            if (!error) error = std::current_exception();
            next = count;
          }
        }
      });
  }
  if (error) std::rethrow_exception(error);
}

// ---------------------------------------------------------------------------
// Cross-validation
// ---------------------------------------------------------------------------

struct CvResult {
  std::string model;
  std::size_t chapter = 0;
  std::vector<double> fold_mse;
  double mean_mse = 0.0;
  /// Held-out prediction for every student, in dataset order.
  std::vector<double> predictions;
};

inline double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

namespace detail {

struct FoldOutcome {
  double mse = 0.0;
  std::vector<double> predictions;  // aligned with the fold's validation indices
};

inline FoldOutcome run_fold(const PredictorSpec& spec, const ChapterData& data, const FoldPlan& plan,
                            std::size_t fold, const ExperimentConfig& cfg) {
  const auto train_idx = plan.training(fold);
  const auto& val_idx = plan.validation(fold);
  ChapterData train_data = subset(data, train_idx);
  ChapterData val_data = subset(data, val_idx);
  auto model = fit_spec(spec, train_data, cfg, job_seed(cfg.seed, data.chapter, fold),
                        cfg.pooled_pretraining ? &data.full : nullptr);
  Array y_hat = predict_all(*model, val_data.inputs);
  FoldOutcome out;
  out.mse = squared_loss(y_hat, val_data.labels, nullptr);
  out.predictions.assign(y_hat.data().begin(), y_hat.data().end());
  return out;
}

inline CvResult assemble(const PredictorSpec& spec, std::size_t k, const FoldPlan& plan,
                         const std::vector<FoldOutcome>& folds) {
  CvResult r;
  r.model = spec.label();
  r.chapter = k;
  r.predictions.assign(plan.n, 0.0);
  for (std::size_t f = 0; f < folds.size(); ++f) {
    r.fold_mse.push_back(folds[f].mse);
    const auto& idx = plan.validation(f);
    for (std::size_t i = 0; i < idx.size(); ++i) r.predictions[idx[i]] = folds[f].predictions[i];
  }
  r.mean_mse = mean_of(r.fold_mse);
  return r;
}

}  // namespace detail

/// k-fold estimate of the chapter-k squared error of `spec`.
inline CvResult cross_validate(const PredictorSpec& spec, const Dataset& ds, std::size_t chapter,
                               const ExperimentConfig& cfg) {
  const ChapterData data = chapter_data(ds, chapter);
  const FoldPlan plan = kfold_split(ds.size(), cfg.folds, cfg.seed);
  std::vector<detail::FoldOutcome> folds(plan.count());
  parallel_for(plan.count(), cfg.threads,
               [&](std::size_t f) { folds[f] = detail::run_fold(spec, data, plan, f, cfg); });
  return detail::assemble(spec, chapter, plan, folds);
}

struct ReportRow {
  std::string model;
  std::size_t chapter = 0;
  std::vector<double> fold_mse;
  double mean_mse = 0.0;
  double improvement = 0.0;  // (MSE_ref - MSE_model) / MSE_ref
};

struct EvalReport {
  std::uint64_t seed = 0;
  std::size_t folds = 0;
  std::size_t students = 0;
  std::string reference;
  std::vector<ReportRow> rows;
  std::optional<GroupReport> groups;

  const ReportRow* find(const std::string& model, std::size_t chapter) const {
    for (const auto& r : rows)
      if (r.model == model && r.chapter == chapter) return &r;
    return nullptr;
  }
};

inline double relative_improvement(double reference_mse, double model_mse) {
  if (!(reference_mse > 0.0)) return 0.0;
  return (reference_mse - model_mse) / reference_mse;
}

struct CompareResult {
  EvalReport report;
  /// cv[s][c]: spec s at chapters[c], including held-out predictions.
  std::vector<std::vector<CvResult>> cv;
};

/// Cross-validates every (spec, chapter) pair and reports improvements over `reference`
/// (a spec label, default the first LR spec, else the first spec).
inline CompareResult compare_detailed(const std::vector<PredictorSpec>& specs, const Dataset& ds,
                                      const std::vector<std::size_t>& chapters, const ExperimentConfig& cfg,
                                      std::string reference = {}) {
  if (specs.size() < 2) throw ArgumentError("compare needs at least two model specs");
  if (chapters.empty()) throw ArgumentError("compare needs at least one chapter");
  for (const auto& s : specs) s.validate();
  if (reference.empty()) {
    reference = specs.front().label();
    for (const auto& s : specs)
      if (s.kind == PredictorKind::LR) {
        reference = s.label();
        break;
      }
  }
  const auto ref_it = std::find_if(specs.begin(), specs.end(), [&](const auto& s) { return s.label() == reference; });
  if (ref_it == specs.end()) throw ArgumentError("reference model '" + reference + "' is not among the specs");

  const FoldPlan plan = kfold_split(ds.size(), cfg.folds, cfg.seed);
  std::vector<ChapterData> data;
  for (auto k : chapters) data.push_back(chapter_data(ds, k));

  const std::size_t ns = specs.size(), nc = chapters.size(), nf = plan.count();
  std::vector<detail::FoldOutcome> outcomes(ns * nc * nf);
  parallel_for(outcomes.size(), cfg.threads, [&](std::size_t job) {
    const std::size_t f = job % nf, c = (job / nf) % nc, s = job / (nf * nc);
    outcomes[job] = detail::run_fold(specs[s], data[c], plan, f, cfg);
  });

  CompareResult out;
  auto& rep = out.report;
  rep.seed = cfg.seed;
  rep.folds = nf;
  rep.students = ds.size();
  rep.reference = reference;
  out.cv.resize(ns);
  for (std::size_t s = 0; s < ns; ++s)
    for (std::size_t c = 0; c < nc; ++c) {
      const auto first = outcomes.begin() + static_cast<std::ptrdiff_t>((s * nc + c) * nf);
      out.cv[s].push_back(detail::assemble(specs[s], chapters[c], plan, {first, first + static_cast<std::ptrdiff_t>(nf)}));
    }
  const std::size_t ref = static_cast<std::size_t>(ref_it - specs.begin());
  for (std::size_t s = 0; s < ns; ++s)
    for (std::size_t c = 0; c < nc; ++c) {
      const auto& cv = out.cv[s][c];
      rep.rows.push_back({cv.model, cv.chapter, cv.fold_mse, cv.mean_mse,
                          relative_improvement(out.cv[ref][c].mean_mse, cv.mean_mse)});
    }
  return out;
}

inline EvalReport compare(const std::vector<PredictorSpec>& specs, const Dataset& ds,
                          const std::vector<std::size_t>& chapters, const ExperimentConfig& cfg,
                          std::string reference = {}) {
  return compare_detailed(specs, ds, chapters, cfg, std::move(reference)).report;
}

/// Group breakdown of pooled held-out predictions over `chapters` of a comparison.
inline GroupReport group_report(const CompareResult& result, const Dataset& ds,
                                const std::vector<double>& edges = equal_bins(20)) {
  std::vector<double> labels, grades;
  std::vector<ModelPredictions> preds;
  for (const auto& per_spec : result.cv) {
    ModelPredictions p{per_spec.front().model, {}};
    for (const auto& cv : per_spec) p.values.insert(p.values.end(), cv.predictions.begin(), cv.predictions.end());
    preds.push_back(std::move(p));
  }
  for (const auto& cv : result.cv.front())
    for (std::size_t i = 0; i < ds.size(); ++i) {
      labels.push_back(ds.students[i].labels(cv.chapter - 1));
      grades.push_back(average_grade(ds.students[i]));
    }
  return group_mse(preds, labels, grades, edges);
}

// ---------------------------------------------------------------------------
// Bottleneck sweep
// ---------------------------------------------------------------------------

struct SweepRow {
  std::size_t bottleneck = 0;
  std::vector<double> fold_mse;
  double mean_mse = 0.0;
};

/// Fold-mean held-out auto-encoding MSE of `base` for each bottleneck size.
inline std::vector<SweepRow> bottleneck_sweep(AutoencoderSpec base, const std::vector<std::size_t>& z_values,
                                              const Dataset& ds, std::size_t chapter, const ExperimentConfig& cfg) {
  if (z_values.empty()) throw ArgumentError("bottleneck_sweep needs at least one Z");
  base.chapter = chapter;
  base.chapters = ds.chapters;
  base.validate();
  const ChapterData data = chapter_data(ds, chapter);
  const FoldPlan plan = kfold_split(ds.size(), cfg.folds, cfg.seed);
  const std::size_t nf = plan.count();
  std::vector<double> mse(z_values.size() * nf);
  parallel_for(mse.size(), cfg.threads, [&](std::size_t job) {
    const std::size_t f = job % nf, zi = job / nf;
    const std::uint64_t key = job_seed(cfg.seed, chapter, f);
    AutoencoderSpec spec = base;
    spec.bottleneck = z_values[zi];
    spec.seed = Rng(key).derive(2).key();
    auto ae = make_autoencoder(spec);
    TrainConfig pc = cfg.pretraining;
    pc.seed = Rng(key).derive(4).key();
    const Array train_full = gather(data.full, plan.training(f));
    const auto [fit_idx, hold_idx] = holdout_split(train_full.dim(0), cfg.validation_fraction, key);
    std::optional<Holdout> hold;
    if (!hold_idx.empty()) hold = Holdout{gather(train_full, hold_idx), {}};
    const Array fit_full = hold ? gather(train_full, fit_idx) : train_full;
    pretrain(*ae, cfg.pooled_pretraining ? data.full : fit_full, pc, hold ? &*hold : nullptr);
    mse[job] = ae->autoencoding_mse(gather(data.full, plan.validation(f)));
  });
  std::vector<SweepRow> rows;
  for (std::size_t zi = 0; zi < z_values.size(); ++zi) {
    SweepRow r{z_values[zi], {mse.begin() + static_cast<std::ptrdiff_t>(zi * nf),
                              mse.begin() + static_cast<std::ptrdiff_t>((zi + 1) * nf)}, 0.0};
    r.mean_mse = mean_of(r.fold_mse);
    rows.push_back(std::move(r));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Report serialization
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json to_json(const GroupReport& g) {
  nlohmann::ordered_json j;
  j["edges"] = g.edges;
  j["counts"] = g.counts;
  auto& models = j["mse"] = nlohmann::ordered_json::object();
  for (std::size_t m = 0; m < g.models.size(); ++m) {
    auto row = nlohmann::ordered_json::array();
    for (const auto& v : g.mse[m]) row.push_back(v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr));
    models[g.models[m]] = row;
  }
  return j;
}

inline nlohmann::ordered_json to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["seed"] = r.seed;
  j["folds"] = r.folds;
  j["students"] = r.students;
  j["reference"] = r.reference;
  auto rows = nlohmann::ordered_json::array();
  for (const auto& row : r.rows) {
    nlohmann::ordered_json o;
    o["model"] = row.model;
    o["chapter"] = row.chapter;
    o["mean_mse"] = row.mean_mse;
    o["fold_mse"] = row.fold_mse;
    o["improvement"] = row.improvement;
    rows.push_back(std::move(o));
  }
  j["results"] = std::move(rows);
  if (r.groups) j["groups"] = to_json(*r.groups);
  return j;
}

inline void write_report(const EvalReport& r, std::ostream& out) { out << to_json(r).dump(2) << '\n'; }

inline void write_report_csv(const EvalReport& r, std::ostream& out) {
  out << "model,chapter,mean_mse,improvement";
  for (std::size_t f = 0; f < r.folds; ++f) out << ",fold" << (f + 1);
  out << '\n' << std::setprecision(17);
  for (const auto& row : r.rows) {
    out << row.model << ',' << row.chapter << ',' << row.mean_mse << ',' << row.improvement;
    for (double v : row.fold_mse) out << ',' << v;
    out << '\n';
  }
}

inline void write_sweep_csv(const std::vector<SweepRow>& rows, std::ostream& out) {
  out << "bottleneck,mean_mse";
  if (!rows.empty())
    for (std::size_t f = 0; f < rows.front().fold_mse.size(); ++f) out << ",fold" << (f + 1);
  out << '\n' << std::setprecision(17);
  for (const auto& r : rows) {
    out << r.bottleneck << ',' << r.mean_mse;
    for (double v : r.fold_mse) out << ',' << v;
    out << '\n';
  }
}

}  // namespace moocembed
