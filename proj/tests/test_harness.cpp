// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <atomic>
#include <set>
#include <sstream>

#include "moocembed/harness.hpp"
#include "moocembed/synth.hpp"

using namespace moocembed;

namespace {

// Hand-built cohort: every feature is zero, labels alternate 0/1 at every chapter.
Dataset flat_dataset(std::size_t n, std::size_t chapters = 4) {
  Dataset ds;
  ds.chapters = chapters;
  ds.assessed.assign(chapters, true);
  for (std::size_t i = 0; i < n; ++i) {
    StudentSequence s{"s" + std::to_string(i), Array({chapters, kFeatureCount}), Array({chapters}),
                      std::vector<bool>(chapters, true)};
    s.labels.fill(i % 2 ? 1.0 : 0.0);
    ds.students.push_back(std::move(s));
  }
  return ds;
}

ExperimentConfig quick_config(std::size_t threads = 1) {
  ExperimentConfig c;
  c.seed = 11;
  c.threads = threads;
  c.supervised.epochs = 3;
  c.supervised.batch_size = 16;
  c.pretraining.epochs = 2;
  c.pretraining.batch_size = 16;
  c.fine_tuning.epochs = 2;
  c.fine_tuning.batch_size = 16;
  return c;
}

Dataset small_synth(std::size_t per_group = 20) {
  SynthConfig cfg;
  cfg.students = {per_group, per_group, per_group};
  cfg.chapters = 6;
  return synth_dataset(generate(cfg));
}

PredictorSpec narrow(PredictorKind kind, std::size_t k) {
  PredictorSpec s = predictor_spec(kind, k);
  s.fc_hidden = 8;
  s.conv_channels = 4;
  s.lstm_hidden = 4;
  s.head_hidden = 4;
  s.encoder.conv_channels = 4;
  s.encoder.bottleneck = 3;
  return s;
}

}  // namespace

TEST(KfoldSplit, SizesForEvenAndUnevenCohorts) {
  for (auto n : {10u, 11u, 37u}) {
    auto plan = kfold_split(n, 5, 3);
    ASSERT_EQ(plan.count(), 5u);
    std::vector<std::size_t> sizes;
    for (const auto& f : plan.folds) sizes.push_back(f.size());
    if (n == 10) {
      EXPECT_EQ(sizes, (std::vector<std::size_t>{2, 2, 2, 2, 2}));
    }
    if (n == 11) {
      EXPECT_EQ(sizes, (std::vector<std::size_t>{3, 2, 2, 2, 2}));
    }
    const auto [lo, hi] = std::minmax_element(sizes.begin(), sizes.end());
    EXPECT_LE(*hi - *lo, 1u);
  }
}

TEST(KfoldSplit, DisjointCoveringAndNoLeakage) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const std::size_t n = 23 + seed;
    auto plan = kfold_split(n, 5, seed);
    std::vector<int> seen(n, 0);
    for (std::size_t f = 0; f < plan.count(); ++f) {
      for (auto i : plan.validation(f)) ++seen[i];
      const auto train = plan.training(f);
      EXPECT_EQ(train.size() + plan.validation(f).size(), n);
      std::set<std::size_t> held(plan.validation(f).begin(), plan.validation(f).end());
      for (auto i : train) EXPECT_FALSE(held.count(i));
    }
    for (int c : seen) EXPECT_EQ(c, 1);
  }
}

TEST(KfoldSplit, SeededAndValidated) {
  EXPECT_EQ(kfold_split(50, 5, 9).folds, kfold_split(50, 5, 9).folds);
  EXPECT_NE(kfold_split(50, 5, 9).folds, kfold_split(50, 5, 10).folds);
  EXPECT_THROW(kfold_split(4, 5, 0), ArgumentError);
  EXPECT_THROW(kfold_split(10, 1, 0), ArgumentError);
}

TEST(ChapterData, ShapesAndErrors) {
  auto ds = flat_dataset(6);
  auto d = chapter_data(ds, 3);
  EXPECT_EQ(d.inputs.shape(), (Shape{6, 2, kFeatureCount}));
  EXPECT_EQ(d.full.shape(), (Shape{6, 4, kFeatureCount}));
  EXPECT_EQ(d.labels(1), 1.0);
  EXPECT_THROW(chapter_data(ds, 1), ArgumentError);
  EXPECT_THROW(chapter_data(ds, 5), ArgumentError);
  for (auto& s : ds.students) s.label_mask[2] = false;
  EXPECT_THROW(chapter_data(ds, 3), ArgumentError);
  ds.assessed = {true, false, true, true};
  EXPECT_EQ(predictable_chapters(ds), (std::vector<std::size_t>{3, 4}));
}

TEST(HoldoutSplit, PartitionsTrainingIndices) {
  auto [fit, hold] = holdout_split(40, 0.1, 5);
  EXPECT_EQ(fit.size(), 36u);
  EXPECT_EQ(hold.size(), 4u);
  std::vector<std::size_t> all = fit;
  all.insert(all.end(), hold.begin(), hold.end());
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < 40; ++i) EXPECT_EQ(all[i], i);
  EXPECT_TRUE(holdout_split(40, 0.0, 5).second.empty());
}

TEST(CrossValidate, FrozenHalfPredictorOnBalancedLabels) {
  auto ds = flat_dataset(20);
  ExperimentConfig cfg = quick_config();
  cfg.supervised.learning_rate = 0.0;
  // Zero features leave only the bias, which starts at 0, so every prediction is sigmoid(0).
  auto r = cross_validate(predictor_spec(PredictorKind::LR, 3), ds, 3, cfg);
  ASSERT_EQ(r.fold_mse.size(), 5u);
  for (double m : r.fold_mse) EXPECT_DOUBLE_EQ(m, 0.25);
  EXPECT_DOUBLE_EQ(r.mean_mse, 0.25);
  for (double p : r.predictions) EXPECT_EQ(p, 0.5);
}

TEST(CrossValidate, MeanIsMeanOfFolds) {
  auto ds = small_synth();
  auto r = cross_validate(narrow(PredictorKind::FC3, 4), ds, 4, quick_config());
  double s = 0.0;
  for (double m : r.fold_mse) s += m;
  EXPECT_DOUBLE_EQ(r.mean_mse, s / 5.0);
  EXPECT_EQ(r.predictions.size(), ds.size());
}

TEST(CrossValidate, LrBeatsConstantMeanBaseline) {
  auto ds = small_synth(60);
  ExperimentConfig cfg = quick_config();
  cfg.supervised.epochs = 60;
  cfg.supervised.learning_rate = 0.01;
  const std::size_t k = 5;
  auto r = cross_validate(predictor_spec(PredictorKind::LR, k), ds, k, cfg);
  // Oracle: held-out MSE of predicting each fold with its training-split label mean.
  auto data = chapter_data(ds, k);
  auto plan = kfold_split(ds.size(), cfg.folds, cfg.seed);
  double baseline = 0.0;
  for (std::size_t f = 0; f < plan.count(); ++f) {
    double mean = 0.0;
    const auto train = plan.training(f);
    for (auto i : train) mean += data.labels(i) / static_cast<double>(train.size());
    double mse = 0.0;
    for (auto i : plan.validation(f)) mse += (data.labels(i) - mean) * (data.labels(i) - mean);
    baseline += mse / static_cast<double>(plan.validation(f).size()) / 5.0;
  }
  EXPECT_LT(r.mean_mse, baseline);
}

TEST(Compare, ModelAgainstItselfHasZeroImprovement) {
  auto ds = small_synth();
  auto lr = predictor_spec(PredictorKind::LR, 2);
  auto rep = compare({lr, narrow(PredictorKind::CNN2_FC1, 2), lr}, ds, {3, 4}, quick_config());
  ASSERT_EQ(rep.rows.size(), 6u);
  EXPECT_EQ(rep.reference, "LR");
  for (const auto& row : rep.rows) {
    if (row.model == "LR") {
      EXPECT_EQ(row.improvement, 0.0);
    }
  }
  // Both LR rows use the same job streams, so their numbers agree exactly.
  EXPECT_EQ(rep.rows[0].fold_mse, rep.rows[4].fold_mse);
}

TEST(Compare, ImprovementFormula) {
  EXPECT_NEAR(relative_improvement(0.010, 0.0083), 0.17, 1e-12);
  EXPECT_DOUBLE_EQ(relative_improvement(0.02, 0.03), -0.5);
  EXPECT_EQ(relative_improvement(0.0, 0.1), 0.0);
}

TEST(Compare, ReferenceChoiceAndErrors) {
  auto ds = small_synth();
  auto specs = std::vector<PredictorSpec>{predictor_spec(PredictorKind::LR, 2), narrow(PredictorKind::FC3, 2)};
  auto rep = compare(specs, ds, {3}, quick_config(), "FC3");
  EXPECT_EQ(rep.reference, "FC3");
  const auto* fc3 = rep.find("FC3", 3);
  const auto* lr = rep.find("LR", 3);
  ASSERT_TRUE(fc3 && lr);
  EXPECT_EQ(fc3->improvement, 0.0);
  EXPECT_DOUBLE_EQ(lr->improvement, (fc3->mean_mse - lr->mean_mse) / fc3->mean_mse);
  EXPECT_THROW(compare(specs, ds, {3}, quick_config(), "LSTM1"), ArgumentError);
  EXPECT_THROW(compare({specs[0]}, ds, {3}, quick_config()), ArgumentError);
  EXPECT_THROW(compare(specs, ds, {}, quick_config()), ArgumentError);
}

TEST(Compare, ThreadCountDoesNotChangeReport) {
  auto ds = small_synth();
  std::vector<PredictorSpec> specs = {predictor_spec(PredictorKind::LR, 2), narrow(PredictorKind::LSTM1, 2),
                                      narrow(PredictorKind::EmbeddingFC, 2)};
  std::ostringstream a, b, c;
  write_report(compare(specs, ds, {3, 5}, quick_config(1)), a);
  write_report(compare(specs, ds, {3, 5}, quick_config(4)), b);
  write_report(compare(specs, ds, {3, 5}, quick_config(1)), c);
  EXPECT_EQ(a.str(), b.str());
  EXPECT_EQ(a.str(), c.str());
}

TEST(Compare, GroupReportPoolsHeldOutPredictions) {
  auto ds = small_synth();
  auto res = compare_detailed({predictor_spec(PredictorKind::LR, 2), narrow(PredictorKind::FC3, 2)}, ds, {3, 4},
                              quick_config());
  auto g = group_report(res, ds, equal_bins(3));
  std::size_t total = 0;
  for (auto c : g.counts) total += c;
  EXPECT_EQ(total, 2 * ds.size());
  ASSERT_EQ(g.models, (std::vector<std::string>{"LR", "FC3"}));
}

TEST(ParallelFor, VisitsEachIndexOnceAndPropagatesErrors) {
  std::vector<std::atomic<int>> hits(50);
  parallel_for(50, 4, [&](std::size_t i) { ++hits[i]; });
  for (auto& h : hits) EXPECT_EQ(h.load(), 1);
  EXPECT_THROW(parallel_for(20, 3,
                            [](std::size_t i) {
                              if (i == 7) throw NumericError("job 7");
                            }),
               NumericError);
  parallel_for(0, 4, [](std::size_t) { FAIL(); });
}

TEST(Sweep, OneRowPerBottleneckAndDeterministic) {
  auto ds = small_synth();
  AutoencoderSpec base;
  base.conv_channels = 4;
  ExperimentConfig cfg = quick_config();
  auto one = bottleneck_sweep(base, {2}, ds, 4, cfg);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0].fold_mse.size(), 5u);
  auto a = bottleneck_sweep(base, {2, 5}, ds, 4, cfg);
  auto b = bottleneck_sweep(base, {2, 5}, ds, 4, quick_config(3));
  ASSERT_EQ(a.size(), 2u);
  EXPECT_EQ(a[0].fold_mse, b[0].fold_mse);
  EXPECT_EQ(a[1].fold_mse, b[1].fold_mse);
  EXPECT_EQ(a[0].fold_mse, one[0].fold_mse);
  EXPECT_THROW(bottleneck_sweep(base, {}, ds, 4, cfg), ArgumentError);
}

TEST(Sweep, LargerBottleneckReconstructsBetter) {
  auto ds = small_synth(60);
  AutoencoderSpec base;
  base.conv_channels = 8;
  ExperimentConfig cfg = quick_config();
  cfg.pretraining.epochs = 40;
  cfg.pretraining.learning_rate = 0.01;
  auto rows = bottleneck_sweep(base, {2, 16}, ds, 5, cfg);
  EXPECT_LE(rows[1].mean_mse, rows[0].mean_mse);
}

TEST(ExperimentConfig, ReadsSections) {
  std::istringstream in(
      "seed = 3\nthreads = 2\nsupervised.epochs = 9\nsupervised.optimizer = sgd\n"
      "pretraining.learning_rate = 0.02\nfine_tuning.batch_size = 8\nencoder_lr_multiplier = 0.5\n");
  auto c = experiment_config_from(KeyValues::parse(in));
  EXPECT_EQ(c.seed, 3u);
  EXPECT_EQ(c.threads, 2u);
  EXPECT_EQ(c.supervised.epochs, 9u);
  EXPECT_EQ(c.supervised.optimizer, Rule::sgd);
  EXPECT_FALSE(c.auto_optimizer);
  EXPECT_DOUBLE_EQ(c.pretraining.learning_rate, 0.02);
  EXPECT_EQ(c.fine_tuning.batch_size, 8u);
  EXPECT_DOUBLE_EQ(c.encoder_lr_multiplier, 0.5);
  std::istringstream bad("validation_fraction = 1.5\n");
  EXPECT_THROW(experiment_config_from(KeyValues::parse(bad)), ArgumentError);
}

TEST(Reports, JsonAndCsvLayouts) {
  EvalReport r;
  r.seed = 4;
  r.folds = 2;
  r.students = 10;
  r.reference = "LR";
  r.rows = {{"LR", 3, {0.02, 0.04}, 0.03, 0.0}, {"CNN2-FC1", 3, {0.01, 0.02}, 0.015, 0.5}};
  std::ostringstream js, csv;
  write_report(r, js);
  auto j = nlohmann::json::parse(js.str());
  EXPECT_EQ(j["reference"], "LR");
  ASSERT_EQ(j["results"].size(), 2u);
  EXPECT_EQ(j["results"][1]["model"], "CNN2-FC1");
  EXPECT_DOUBLE_EQ(j["results"][1]["improvement"].get<double>(), 0.5);
  EXPECT_FALSE(j.contains("groups"));
  write_report_csv(r, csv);
  std::istringstream lines(csv.str());
  std::string header, first;
  std::getline(lines, header);
  std::getline(lines, first);
  EXPECT_EQ(header, "model,chapter,mean_mse,improvement,fold1,fold2");
  EXPECT_EQ(first.substr(0, 5), "LR,3,");
}
