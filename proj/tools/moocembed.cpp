// SPDX-License-Identifier: Apache-2.0
// Command-line front end: synth, ingest, train, evaluate, sweep, analyze.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "moocembed/moocembed.hpp"

namespace fs = std::filesystem;
using namespace moocembed;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::string out_dir = ".";
};

KeyValues load_config(const Common& c) { return c.config.empty() ? KeyValues{} : KeyValues::load(c.config); }

ExperimentConfig experiment(const Common& c) {
  auto cfg = experiment_config_from(load_config(c));
  if (c.seed) cfg.seed = *c.seed;
  if (c.threads) cfg.threads = *c.threads;
  return cfg;
}

std::ifstream open_in(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + p.string());
  return f;
}

std::ofstream open_out(const fs::path& dir, const std::string& name) {
  fs::create_directories(dir);
  std::ofstream f(dir / name, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + (dir / name).string());
  return f;
}

struct RawLogs {
  CourseStructure course;
  EventLog events;
  std::vector<SubmissionRecord> submissions;
};

RawLogs read_logs(const fs::path& course, const fs::path& events, const fs::path& subs) {
  RawLogs r;
  {
    auto f = open_in(course);
    r.course = parse_course(f);
  }
  {
    auto f = open_in(events);
    r.events = parse_event_log(f);
  }
  {
    auto f = open_in(subs);
    r.submissions = parse_submission_log(f);
  }
  return r;
}

/// A directory holding course.json/events.jsonl/submissions.jsonl, or a dataset CSV export
/// (directly or as dataset.csv inside a directory).
Dataset load_dataset(const fs::path& path) {
  if (fs::is_directory(path)) {
    if (fs::exists(path / "course.json")) {
      auto r = read_logs(path / "course.json", path / "events.jsonl", path / "submissions.jsonl");
      return build_dataset(r.events.records, r.submissions, r.course);
    }
    if (fs::exists(path / "dataset.csv")) return load_dataset(path / "dataset.csv");
    throw std::runtime_error(path.string() + " holds neither course logs nor dataset.csv");
  }
  auto f = open_in(path);
  return read_dataset_csv(f);
}

PredictorSpec load_predictor_spec(const std::string& path, std::optional<std::size_t> chapter) {
  KeyValues kv = KeyValues::load(path);
  if (chapter) kv.set("chapter", std::to_string(*chapter));
  return predictor_spec_from(kv);
}

SynthConfig synth_config(const KeyValues& kv, std::optional<std::uint64_t> seed) {
  SynthConfig c;
  c.chapters = kv.get_size("chapters", c.chapters);
  c.students[0] = kv.get_size("students.low", c.students[0]);
  c.students[1] = kv.get_size("students.medium", c.students[1]);
  c.students[2] = kv.get_size("students.high", c.students[2]);
  c.seed = kv.get_size("synth_seed", c.seed);
  if (seed) c.seed = *seed;
  c.engagement_spread = kv.get_double("engagement_spread", c.engagement_spread);
  c.ability_spread = kv.get_double("ability_spread", c.ability_spread);
  c.ability_coupling = kv.get_double("ability_coupling", c.ability_coupling);
  c.noise_event_rate = kv.get_double("noise_event_rate", c.noise_event_rate);
  c.skip_rate = kv.get_double("skip_rate", c.skip_rate);
  c.last_chapter_unassessed = kv.get_bool("last_chapter_unassessed", c.last_chapter_unassessed);
  return c;
}

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "key = value settings file");
  app->add_option("--seed", c.seed, "master seed");
  app->add_option("--threads", c.threads, "worker threads for cross-validation jobs");
  app->add_option("--out-dir", c.out_dir, "output directory");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Grade prediction from clickstream embeddings"};
  app.require_subcommand(1);

  Common common;
  std::string data_path;
  std::vector<std::string> spec_paths;
  std::vector<std::size_t> chapters;
  std::optional<std::size_t> chapter;
  std::string reference;
  std::size_t group_bins = 0;
  std::vector<std::size_t> z_values = {2, 4, 8, 16};
  std::size_t components = kFeatureCount;
  std::string course_path, events_path, subs_path, input_dir;

  auto* synth = app.add_subcommand("synth", "generate a synthetic course, logs and ground-truth groups");
  add_common(synth, common);

  auto* ingest = app.add_subcommand("ingest", "parse course logs into a normalized dataset export");
  add_common(ingest, common);
  ingest->add_option("--input", input_dir, "directory with course.json, events.jsonl, submissions.jsonl");
  ingest->add_option("--course", course_path, "course structure file");
  ingest->add_option("--events", events_path, "event log file");
  ingest->add_option("--submissions", subs_path, "submission log file");

  auto* trn = app.add_subcommand("train", "train one model spec for one chapter on the whole cohort");
  add_common(trn, common);
  trn->add_option("--data", data_path, "log directory or dataset CSV")->required();
  trn->add_option("--spec", spec_paths, "model spec file")->required()->expected(1);
  trn->add_option("--chapter", chapter, "chapter k to predict (overrides the spec)");

  auto* eval = app.add_subcommand("evaluate", "cross-validate and compare model specs across chapters");
  add_common(eval, common);
  eval->add_option("--data", data_path, "log directory or dataset CSV")->required();
  eval->add_option("--spec", spec_paths, "model spec files (two or more)")->required();
  eval->add_option("--chapter", chapters, "chapters to evaluate (default: every assessed chapter from 2)");
  eval->add_option("--reference", reference, "reference model label for relative improvement");
  eval->add_option("--groups", group_bins, "also report MSE per average-grade bin with this many bins");

  auto* sweep = app.add_subcommand("sweep", "auto-encoding MSE across bottleneck sizes");
  add_common(sweep, common);
  sweep->add_option("--data", data_path, "log directory or dataset CSV")->required();
  sweep->add_option("--spec", spec_paths, "autoencoder spec file")->expected(0, 1);
  sweep->add_option("--chapter", chapter, "chapter k")->required();
  sweep->add_option("--z", z_values, "bottleneck sizes");

  auto* analyze = app.add_subcommand("analyze", "PCA variance and projection exports, grade-group MSE");
  add_common(analyze, common);
  analyze->add_option("--data", data_path, "log directory or dataset CSV")->required();
  analyze->add_option("--chapter", chapter, "chapter k; embeddings and groups use the prefix before k");
  analyze->add_option("--components", components, "number of principal components to export");
  analyze->add_option("--spec", spec_paths,
                      "autoencoder spec for embedding exports, or two or more predictor specs for group MSE");
  analyze->add_option("--groups", group_bins, "bins for the grade-group table (default 20)");

  CLI11_PARSE(app, argc, argv);

  try {
    const fs::path out = common.out_dir;

    if (*synth) {
      const auto cfg = synth_config(load_config(common), common.seed);
      const auto s = generate(cfg);
      write_synth_files(s, out);
      auto f = open_out(out, "dataset.csv");
      write_dataset_csv(synth_dataset(s), f);
      std::cout << "wrote " << s.student_ids.size() << " students, " << s.events.size() << " tracked events to "
                << out.string() << '\n';
    } else if (*ingest) {
      fs::path dir = input_dir.empty() ? fs::path(".") : fs::path(input_dir);
      const fs::path c = course_path.empty() ? dir / "course.json" : fs::path(course_path);
      const fs::path e = events_path.empty() ? dir / "events.jsonl" : fs::path(events_path);
      const fs::path s = subs_path.empty() ? dir / "submissions.jsonl" : fs::path(subs_path);
      auto logs = read_logs(c, e, s);
      const Dataset raw = extract_features(logs.events.records, logs.submissions, logs.course);
      const Dataset ds = filter_valid(normalize(raw));
      auto f = open_out(out, "dataset.csv");
      write_dataset_csv(ds, f);
      nlohmann::ordered_json summary{{"students_seen", raw.size()},
                                     {"students_kept", ds.size()},
                                     {"chapters", ds.chapters},
                                     {"events", logs.events.records.size()},
                                     {"skipped_event_lines", logs.events.skipped},
                                     {"unknown_targets", raw.unknown_targets},
                                     {"submissions", logs.submissions.size()}};
      auto sf = open_out(out, "ingest_summary.json");
      sf << summary.dump(2) << '\n';
      std::cout << summary.dump() << '\n';
    } else if (*trn) {
      const auto cfg = experiment(common);
      const Dataset ds = load_dataset(data_path);
      PredictorSpec spec = load_predictor_spec(spec_paths.front(), chapter);
      const ChapterData data = chapter_data(ds, spec.chapter);
      auto model = fit_spec(spec, data, cfg, job_seed(cfg.seed, spec.chapter, 0));
      const Array y = predict_all(*model, data.inputs);
      fs::create_directories(out);
      save_params(model->params(), out / "model.ckpt");
      nlohmann::ordered_json summary{{"model", spec.label()},
                                     {"chapter", spec.chapter},
                                     {"students", ds.size()},
                                     {"parameters", parameter_count(model->params())},
                                     {"training_mse", squared_loss(y, data.labels, nullptr)}};
      auto f = open_out(out, "train_summary.json");
      f << summary.dump(2) << '\n';
      std::cout << summary.dump() << '\n';
    } else if (*eval) {
      const auto cfg = experiment(common);
      const Dataset ds = load_dataset(data_path);
      if (chapters.empty()) chapters = predictable_chapters(ds);
      std::vector<PredictorSpec> specs;
      for (const auto& p : spec_paths) specs.push_back(load_predictor_spec(p, std::nullopt));
      auto result = compare_detailed(specs, ds, chapters, cfg, reference);
      if (group_bins) result.report.groups = group_report(result, ds, equal_bins(group_bins));
      {
        auto f = open_out(out, "report.json");
        write_report(result.report, f);
      }
      {
        auto f = open_out(out, "report.csv");
        write_report_csv(result.report, f);
      }
      if (result.report.groups) {
        auto f = open_out(out, "groups.csv");
        write_group_csv(*result.report.groups, f);
      }
      for (const auto& row : result.report.rows)
        std::cout << row.model << " k=" << row.chapter << " mse=" << row.mean_mse
                  << " vs " << result.report.reference << ": " << 100.0 * row.improvement << "%\n";
    } else if (*sweep) {
      const auto cfg = experiment(common);
      const Dataset ds = load_dataset(data_path);
      AutoencoderSpec base;
      if (!spec_paths.empty()) base = autoencoder_spec_from(KeyValues::load(spec_paths.front()));
      const auto rows = bottleneck_sweep(base, z_values, ds, *chapter, cfg);
      auto f = open_out(out, "sweep.csv");
      write_sweep_csv(rows, f);
      for (const auto& r : rows) std::cout << "Z=" << r.bottleneck << " mse=" << r.mean_mse << '\n';
    } else if (*analyze) {
      const auto cfg = experiment(common);
      const Dataset ds = load_dataset(data_path);
      std::vector<std::string> ids;
      std::vector<double> grades;
      for (const auto& s : ds.students) {
        ids.push_back(s.student_id);
        grades.push_back(average_grade(s));
      }

      // Raw-feature redundancy: every (student, chapter) row, or one chapter's rows.
      Array rows;
      if (chapter) {
        if (*chapter < 1) throw ArgumentError("chapters are numbered from 1");
        rows = chapter_features(ds, *chapter - 1);
      } else {
        rows = Array({ds.size() * ds.chapters, kFeatureCount});
        for (std::size_t i = 0; i < ds.size(); ++i)
          std::copy(ds.students[i].features.raw(), ds.students[i].features.raw() + ds.chapters * kFeatureCount,
                    &rows(i * ds.chapters, 0));
      }
      const auto pca = pca_fit(rows, std::min(components, kFeatureCount));
      {
        auto f = open_out(out, "feature_variance.csv");
        write_variance_csv(pca, f);
      }

      std::vector<PredictorSpec> predictors;
      std::optional<AutoencoderSpec> encoder;
      for (const auto& p : spec_paths) {
        KeyValues kv = KeyValues::load(p);
        const std::string kind = kv.get("kind").value_or("ModifiedLSTMAE");
        if (kind == "ModifiedLSTMAE" || kind == "SymmetricVAE" || kind == "AsymmetricVAE") {
          encoder = autoencoder_spec_from(kv);
        } else {
          predictors.push_back(predictor_spec_from(kv));
        }
      }
      if (encoder || !predictors.empty()) {
        if (!chapter) throw ArgumentError("--chapter is required with --spec");
      }
      if (encoder) {
        encoder->chapter = *chapter;
        encoder->chapters = ds.chapters;
        encoder->seed = job_seed(cfg.seed, *chapter, 0);
        const ChapterData data = chapter_data(ds, *chapter);
        auto ae = make_autoencoder(*encoder);
        TrainConfig pc = cfg.pretraining;
        pc.seed = Rng(encoder->seed).derive(4).key();
        pretrain(*ae, data.full, pc);
        const Array emb = embed_all(*ae, data.inputs);
        const auto epca = pca_fit(emb, std::min(components, emb.dim(1)));
        {
          auto f = open_out(out, "embedding_variance.csv");
          write_variance_csv(epca, f);
        }
        auto f = open_out(out, "embedding_projection.csv");
        write_projection_csv(pca_project(pca_fit(emb, 2), emb), ids, grades, f);
      } else if (!chapter) {
        auto f = open_out(out, "feature_projection.csv");
        Array flat({ds.size(), ds.chapters * kFeatureCount});
        for (std::size_t i = 0; i < ds.size(); ++i)
          std::copy(ds.students[i].features.raw(), ds.students[i].features.raw() + flat.dim(1), &flat(i, 0));
        write_projection_csv(pca_project(pca_fit(flat, 2), flat), ids, grades, f);
      }
      if (predictors.size() >= 2) {
        auto result = compare_detailed(predictors, ds, {*chapter}, cfg);
        auto f = open_out(out, "groups.csv");
        write_group_csv(group_report(result, ds, equal_bins(group_bins ? group_bins : 20)), f);
      } else if (predictors.size() == 1) {
        throw ArgumentError("group MSE needs two or more predictor specs");
      }
      std::cout << "wrote analysis tables to " << out.string() << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
