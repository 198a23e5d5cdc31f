// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "ingest.hpp"
#include "rng.hpp"

namespace moocembed {

enum class Group : std::uint8_t { low, medium, high };

inline std::string_view group_name(Group g) {
  switch (g) {
    case Group::low: return "low";
    case Group::medium: return "medium";
    case Group::high: return "high";
  }
  return "low";
}

struct BehaviorProfile {
  Group group = Group::low;
  double prior_rate = 1.0;     // mean prior-event count per chapter and event type
  double post_rate = 0.2;      // mean post-event count
  double ability = 0.5;        // latent grade mean
  double ability_drift = 0.7;  // AR(1) coefficient between adjacent chapters
  double noise_std = 0.08;     // per-problem score noise
};

struct SynthConfig {
  std::size_t chapters = 12;
  std::array<std::size_t, 3> students = {1500, 500, 500};  // low / medium / high
  std::uint64_t seed = 2014;
  std::array<BehaviorProfile, 3> profiles = {
      BehaviorProfile{Group::low, 0.6, 0.08, 0.30, 0.7, 0.08},
      BehaviorProfile{Group::medium, 1.1, 0.35, 0.60, 0.7, 0.08},
      BehaviorProfile{Group::high, 1.6, 0.9, 0.85, 0.7, 0.08},
  };
  /// Std of the per-student log engagement shared by all event types. Zero makes the 20
  /// feature columns conditionally independent given ability.
  double engagement_spread = 0.4;
  /// Std of the latent ability innovations around the group mean.
  double ability_spread = 0.12;
  /// Log-rate sensitivity of event counts to the current chapter's ability deviation.
  double ability_coupling = 2.0;
  /// When set the final chapter carries no assessment, so its label is undefined.
  bool last_chapter_unassessed = true;
  /// Mean number of untracked events (unknown type or unknown target) per student and chapter.
  double noise_event_rate = 0.3;
  /// Probability that a student leaves a problem unsubmitted (it then scores 0). A weaker
  /// student skips more often: the chance is skip_rate * (1 - ability).
  double skip_rate = 0.0;
};

/// Relative frequency of each tracked event type.
inline constexpr std::array<double, kEventTypeCount> kEventTypeWeights = {
    3.0, 1.5, 2.0, 3.0, 2.0, 1.0, 0.8, 0.6, 0.4, 0.3};

/// A log line whose event kind is outside the tracked vocabulary.
struct UntrackedEvent {
  std::string student_id;
  std::int64_t timestamp = 0;
  std::string event;
  std::string target_id;
};

struct SynthOutput {
  CourseStructure course;
  std::vector<EventRecord> events;  // tracked kinds, including some on unknown targets
  std::vector<UntrackedEvent> untracked;
  std::vector<SubmissionRecord> submissions;
  std::vector<std::string> student_ids;
  std::vector<Group> groups;
  /// Per student: tracked-event counts [N x F] in the prior/post layout of the dataset.
  std::vector<Array> tally;
  /// Per student: chapter grades [N] as the grading policy computes them.
  std::vector<Array> grades;
};

inline CourseStructure synth_course(std::size_t chapters, bool last_unassessed) {
  if (chapters == 0 || chapters > kMaxChapters)
    throw ArgumentError("synth: chapter count must be 1.." + std::to_string(kMaxChapters));
  std::vector<Chapter> out;
  for (std::size_t c = 0; c < chapters; ++c) {
    std::ostringstream cid;
    cid << "ch" << std::setw(2) << std::setfill('0') << (c + 1);
    Chapter ch{cid.str(), {}};
    const bool assessed = !(last_unassessed && c + 1 == chapters && chapters > 1);
    for (int s = 1; s <= 2; ++s) {
      const std::string sid = ch.id + "-s" + std::to_string(s);
      Sequential seq{sid, {}};
      seq.verticals.push_back({sid + "-v1", VerticalKind::video, 0.0});
      seq.verticals.push_back({sid + "-v2", VerticalKind::video, 0.0});
      if (assessed) seq.verticals.push_back({sid + "-v3", VerticalKind::problem, 0.5});
      else seq.verticals.push_back({sid + "-v3", VerticalKind::other, 0.0});
      seq.verticals.push_back({sid + "-v4", VerticalKind::other, 0.0});
      ch.sequentials.push_back(std::move(seq));
    }
    out.push_back(std::move(ch));
  }
  return CourseStructure(std::move(out));
}

inline constexpr std::int64_t kCourseStart = 1402531200;  // 2014-06-12
inline constexpr std::int64_t kWeek = 7 * 24 * 3600;

/// Generates a cohort whose grades follow a per-student AR(1) latent ability and whose
/// event counts are Poisson around profile rates modulated by engagement and ability.
inline SynthOutput generate(const SynthConfig& cfg) {
  SynthOutput out;
  out.course = synth_course(cfg.chapters, cfg.last_chapter_unassessed);
  const std::size_t n = cfg.chapters;
  const Rng root(cfg.seed);

  std::vector<std::vector<const Vertical*>> videos(n), all(n), problems(n);
  std::vector<std::vector<std::string>> seqs(n);
  for (std::size_t c = 0; c < n; ++c) {
    for (const auto& s : out.course.chapters()[c].sequentials) {
      seqs[c].push_back(s.id);
      for (const auto& v : s.verticals) {
        all[c].push_back(&v);
        if (v.kind == VerticalKind::video) videos[c].push_back(&v);
        if (v.kind == VerticalKind::problem) problems[c].push_back(&v);
      }
    }
  }

  std::size_t index = 0;
  for (std::size_t gi = 0; gi < 3; ++gi) {
    const BehaviorProfile& prof = cfg.profiles[gi];
    for (std::size_t k = 0; k < cfg.students[gi]; ++k, ++index) {
      Rng rng = root.derive(index);
      std::ostringstream sid;
      sid << "u" << std::setw(5) << std::setfill('0') << (index + 1);
      const std::string id = sid.str();
      out.student_ids.push_back(id);
      out.groups.push_back(prof.group);
      Array tally({n, kFeatureCount});
      Array grades({n});

      const double spread = cfg.engagement_spread;
      const double engagement = std::exp(spread * rng.normal() - 0.5 * spread * spread);
      const double rho = prof.ability_drift;
      double dev = cfg.ability_spread * rng.normal();

      for (std::size_t c = 0; c < n; ++c) {
        if (c > 0) dev = rho * dev + std::sqrt(1.0 - rho * rho) * cfg.ability_spread * rng.normal();
        const double ability = std::clamp(prof.ability + dev, 0.0, 1.0);
        const std::int64_t open = kCourseStart + static_cast<std::int64_t>(c) * kWeek;

        // Submissions; resubmissions keep the better score.
        std::optional<std::int64_t> split;
        for (const Vertical* v : problems[c]) {
          if (rng.uniform() < cfg.skip_rate * (1.0 - ability)) continue;
          const double score = std::clamp(ability + prof.noise_std * rng.normal(), 0.0, 1.0);
          auto t = open + static_cast<std::int64_t>(rng.uniform(0.2, 0.8) * kWeek);
          if (rng.uniform() < 0.3) {
            const double first = std::clamp(score - rng.uniform(0.0, 0.3), 0.0, 1.0);
            const auto t0 = t - 3600 - static_cast<std::int64_t>(rng.below(86400));
            out.submissions.push_back({id, v->id, t0, first});
          }
          out.submissions.push_back({id, v->id, t, score});
          grades(c) += v->weight * score;
          split = std::max(split.value_or(t), t);
        }

        const double modulation = engagement * std::exp(cfg.ability_coupling * (ability - prof.ability));
        for (std::size_t e = 0; e < kEventTypeCount; ++e) {
          const auto type = static_cast<EventType>(e);
          const bool video = type != EventType::navigate_forward && type != EventType::navigate_backward;
          auto target = [&]() -> std::string {
            if (video && !videos[c].empty()) return videos[c][rng.below(videos[c].size())]->id;
            if (rng.uniform() < 0.25) return seqs[c][rng.below(seqs[c].size())];
            return all[c][rng.below(all[c].size())]->id;
          };
          const double base = kEventTypeWeights[e] * modulation;
          const auto prior = rng.poisson(prof.prior_rate * base);
          for (std::uint64_t i = 0; i < prior; ++i) {
            const std::int64_t end = split ? *split : open + kWeek - 1;
            const auto t = open + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(end - open + 1)));
            out.events.push_back({id, t, type, target()});
          }
          tally(c, feature_index(type, false)) += static_cast<double>(prior);
          if (!split) continue;
          const auto post = rng.poisson(prof.post_rate * base);
          for (std::uint64_t i = 0; i < post; ++i) {
            const auto t = *split + 1 + static_cast<std::int64_t>(rng.below(kWeek / 2));
            out.events.push_back({id, t, type, target()});
          }
          tally(c, feature_index(type, true)) += static_cast<double>(post);
        }

        // Untracked noise: unknown event kinds, or tracked kinds on materials outside the course.
        const auto noise = rng.poisson(cfg.noise_event_rate);
        for (std::uint64_t i = 0; i < noise; ++i) {
          const auto t = open + static_cast<std::int64_t>(rng.below(kWeek));
          if (rng.uniform() < 0.5) {
            out.events.push_back({id, t, EventType::play_video, "external-" + std::to_string(rng.below(50))});
          } else {
            out.untracked.push_back({id, t, rng.uniform() < 0.5 ? "mouse_move" : "page_close",
                                     all[c][rng.below(all[c].size())]->id});
          }
        }
      }
      out.tally.push_back(std::move(tally));
      out.grades.push_back(std::move(grades));
    }
  }
  std::stable_sort(out.events.begin(), out.events.end(),
                   [](const EventRecord& a, const EventRecord& b) { return a.timestamp < b.timestamp; });
  std::stable_sort(out.untracked.begin(), out.untracked.end(),
                   [](const UntrackedEvent& a, const UntrackedEvent& b) { return a.timestamp < b.timestamp; });
  std::stable_sort(out.submissions.begin(), out.submissions.end(),
                   [](const SubmissionRecord& a, const SubmissionRecord& b) { return a.timestamp < b.timestamp; });
  return out;
}

/// Event log text: tracked and untracked records merged in timestamp order.
inline void write_synth_events(const SynthOutput& s, std::ostream& out) {
  std::size_t u = 0;
  auto flush_until = [&](std::int64_t t) {
    for (; u < s.untracked.size() && s.untracked[u].timestamp < t; ++u) {
      const auto& x = s.untracked[u];
      nlohmann::json obj{{"student", x.student_id}, {"time", x.timestamp}, {"event", x.event},
                         {"target", x.target_id}};
      out << obj.dump() << '\n';
    }
  };
  for (const auto& e : s.events) {
    flush_until(e.timestamp);
    write_event(out, e);
  }
  flush_until(std::numeric_limits<std::int64_t>::max());
}

inline void write_groups_csv(const SynthOutput& s, std::ostream& out) {
  out << "student_id,group\n";
  for (std::size_t i = 0; i < s.student_ids.size(); ++i)
    out << s.student_ids[i] << ',' << group_name(s.groups[i]) << '\n';
}

/// Writes course.json, events.jsonl, submissions.jsonl and groups.csv into `dir`.
inline void write_synth_files(const SynthOutput& s, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto open = [&](const char* name) {
    std::ofstream f(dir / name, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + (dir / name).string());
    return f;
  };
  {
    auto f = open("course.json");
    write_course(s.course, f);
  }
  {
    auto f = open("events.jsonl");
    write_synth_events(s, f);
  }
  {
    auto f = open("submissions.jsonl");
    serialize_submissions(s.submissions, f);
  }
  {
    auto f = open("groups.csv");
    write_groups_csv(s, f);
  }
}

/// In-memory path from a generated cohort to the normalized, filtered dataset.
inline Dataset synth_dataset(const SynthOutput& s) {
  return build_dataset(s.events, s.submissions, s.course);
}

}  // namespace moocembed
