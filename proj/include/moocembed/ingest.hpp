// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "errors.hpp"
#include "numeric.hpp"

namespace moocembed {

// ---------------------------------------------------------------------------
// Event vocabulary
// ---------------------------------------------------------------------------

enum class EventType : std::uint8_t {
  navigate_forward,
  navigate_backward,
  load_video,
  play_video,
  pause_video,
  stop_video,
  seek_backward,
  seek_forward,
  show_subtitle,
  hide_subtitle,
};

inline constexpr std::size_t kEventTypeCount = 10;
/// Every event type contributes a prior and a post column.
inline constexpr std::size_t kFeatureCount = 2 * kEventTypeCount;
inline constexpr std::size_t kMaxChapters = 12;

inline constexpr std::array<std::string_view, kEventTypeCount> kEventNames = {
    "navigate-forward", "navigate-backward", "load-video",   "play-video",    "pause-video",
    "stop-video",       "seek-backward",     "seek-forward", "show-subtitle", "hide-subtitle"};

/// Names used in log files.
inline constexpr std::array<std::string_view, kEventTypeCount> kEventWireNames = {
    "navigate_forward", "navigate_backward", "load_video",   "play_video",    "pause_video",
    "stop_video",       "seek_backward",     "seek_forward", "show_subtitle", "hide_subtitle"};

inline std::string_view event_name(EventType t) { return kEventNames[static_cast<std::size_t>(t)]; }
inline std::string_view event_wire_name(EventType t) {
  return kEventWireNames[static_cast<std::size_t>(t)];
}

/// Accepts both the wire spelling ("play_video") and the hyphenated one ("play-video").
inline std::optional<EventType> parse_event_type(std::string_view s) {
  for (std::size_t i = 0; i < kEventTypeCount; ++i)
    if (s == kEventWireNames[i] || s == kEventNames[i]) return static_cast<EventType>(i);
  return std::nullopt;
}

/// Column index of a feature: prior and post of one event type are adjacent.
constexpr std::size_t feature_index(EventType t, bool post) {
  return 2 * static_cast<std::size_t>(t) + (post ? 1 : 0);
}

inline std::vector<std::string> feature_names() {
  std::vector<std::string> names;
  names.reserve(kFeatureCount);
  for (auto n : kEventNames) {
    names.push_back(std::string(n) + "-prior");
    names.push_back(std::string(n) + "-post");
  }
  return names;
}

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

struct EventRecord {
  std::string student_id;
  std::int64_t timestamp = 0;
  EventType type = EventType::navigate_forward;
  std::string target_id;

  friend bool operator==(const EventRecord&, const EventRecord&) = default;
};

struct SubmissionRecord {
  std::string student_id;
  std::string vertical_id;
  std::int64_t timestamp = 0;
  double score = 0.0;

  friend bool operator==(const SubmissionRecord&, const SubmissionRecord&) = default;
};

// ---------------------------------------------------------------------------
// Course structure
// ---------------------------------------------------------------------------

enum class VerticalKind { video, problem, other };

inline std::string_view kind_name(VerticalKind k) {
  switch (k) {
    case VerticalKind::video: return "video";
    case VerticalKind::problem: return "problem";
    case VerticalKind::other: return "other";
  }
  return "other";
}

struct Vertical {
  std::string id;
  VerticalKind kind = VerticalKind::other;
  double weight = 0.0;  // grading weight, problem verticals only
};

struct Sequential {
  std::string id;
  std::vector<Vertical> verticals;
};

struct Chapter {
  std::string id;
  std::vector<Sequential> sequentials;
};

/// chapter -> sequential -> vertical hierarchy with an id index over all three levels.
class CourseStructure {
 public:
  CourseStructure() = default;
  explicit CourseStructure(std::vector<Chapter> chapters) : chapters_(std::move(chapters)) {
    validate();
    build_index();
  }

  const std::vector<Chapter>& chapters() const noexcept { return chapters_; }
  std::size_t chapter_count() const noexcept { return chapters_.size(); }

  /// Chapter index (0-based) owning a chapter, sequential or vertical id.
  std::optional<std::size_t> chapter_of(const std::string& id) const {
    auto it = owner_.find(id);
    if (it == owner_.end()) return std::nullopt;
    return it->second;
  }

  const Vertical* problem_vertical(const std::string& id) const {
    auto it = problems_.find(id);
    return it == problems_.end() ? nullptr : it->second;
  }

  bool has_assessment(std::size_t chapter) const { return assessed_.at(chapter); }
  const std::vector<bool>& assessed() const noexcept { return assessed_; }

  std::vector<const Vertical*> problems_in(std::size_t chapter) const {
    std::vector<const Vertical*> out;
    for (const auto& s : chapters_.at(chapter).sequentials)
      for (const auto& v : s.verticals)
        if (v.kind == VerticalKind::problem) out.push_back(&v);
    return out;
  }

 private:
  void validate() const {
    if (chapters_.empty()) throw ValidationError("course has no chapters");
    if (chapters_.size() > kMaxChapters)
      throw ValidationError("course has " + std::to_string(chapters_.size()) + " chapters, at most " +
                            std::to_string(kMaxChapters) + " supported");
    for (const auto& c : chapters_) {
      double w = 0.0;
      bool any = false;
      for (const auto& s : c.sequentials)
        for (const auto& v : s.verticals) {
          if (v.kind == VerticalKind::problem) {
            if (!(v.weight >= 0.0)) throw ValidationError("negative weight on vertical " + v.id);
            w += v.weight;
            any = true;
          }
        }
      if (any && std::abs(w - 1.0) > 1e-9)
        throw ValidationError("problem weights of chapter " + c.id + " sum to " + std::to_string(w));
    }
  }

  void build_index() {
    assessed_.assign(chapters_.size(), false);
    auto add = [&](const std::string& id, std::size_t ch) {
      if (!owner_.emplace(id, ch).second) throw ValidationError("duplicate course id " + id);
    };
    for (std::size_t c = 0; c < chapters_.size(); ++c) {
      add(chapters_[c].id, c);
      for (const auto& s : chapters_[c].sequentials) {
        add(s.id, c);
        for (const auto& v : s.verticals) {
          add(v.id, c);
          if (v.kind == VerticalKind::problem) {
            problems_.emplace(v.id, &v);
            assessed_[c] = true;
          }
        }
      }
    }
  }

  std::vector<Chapter> chapters_;
  std::unordered_map<std::string, std::size_t> owner_;
  std::unordered_map<std::string, const Vertical*> problems_;
  std::vector<bool> assessed_;

 public:
  CourseStructure(const CourseStructure& o) : chapters_(o.chapters_) { build_index(); }
  CourseStructure& operator=(const CourseStructure& o) {
    if (this != &o) {
      chapters_ = o.chapters_;
      owner_.clear();
      problems_.clear();
      build_index();
    }
    return *this;
  }
  CourseStructure(CourseStructure&&) = default;
  CourseStructure& operator=(CourseStructure&&) = default;
};

/// Course documents are JSON:
/// {"chapters":[{"id":..,"sequentials":[{"id":..,"verticals":[{"id":..,"type":"problem","weight":0.5}]}]}]}
inline CourseStructure parse_course(std::istream& in) {
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(0, std::string("course document: ") + e.what());
  }
  try {
    std::vector<Chapter> chapters;
    for (const auto& jc : doc.at("chapters")) {
      Chapter c{jc.at("id").get<std::string>(), {}};
      for (const auto& js : jc.at("sequentials")) {
        Sequential s{js.at("id").get<std::string>(), {}};
        for (const auto& jv : js.at("verticals")) {
          Vertical v{jv.at("id").get<std::string>(), VerticalKind::other, 0.0};
          const auto type = jv.at("type").get<std::string>();
          if (type == "video") v.kind = VerticalKind::video;
          else if (type == "problem") v.kind = VerticalKind::problem;
          else if (type == "other") v.kind = VerticalKind::other;
          else throw ValidationError("unknown vertical type '" + type + "' on " + v.id);
          if (v.kind == VerticalKind::problem) v.weight = jv.at("weight").get<double>();
          s.verticals.push_back(std::move(v));
        }
        c.sequentials.push_back(std::move(s));
      }
      chapters.push_back(std::move(c));
    }
    return CourseStructure(std::move(chapters));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(0, std::string("course document: ") + e.what());
  }
}

inline void write_course(const CourseStructure& course, std::ostream& out) {
  nlohmann::json doc;
  doc["chapters"] = nlohmann::json::array();
  for (const auto& c : course.chapters()) {
    nlohmann::json jc{{"id", c.id}, {"sequentials", nlohmann::json::array()}};
    for (const auto& s : c.sequentials) {
      nlohmann::json js{{"id", s.id}, {"verticals", nlohmann::json::array()}};
      for (const auto& v : s.verticals) {
        nlohmann::json jv{{"id", v.id}, {"type", kind_name(v.kind)}};
        if (v.kind == VerticalKind::problem) jv["weight"] = v.weight;
        js["verticals"].push_back(std::move(jv));
      }
      jc["sequentials"].push_back(std::move(js));
    }
    doc["chapters"].push_back(std::move(jc));
  }
  out << doc.dump(1) << '\n';
}

// ---------------------------------------------------------------------------
// Log parsing
// ---------------------------------------------------------------------------

struct EventLog {
  std::vector<EventRecord> records;
  std::size_t skipped = 0;  // lines with event types outside the tracked vocabulary
};

namespace detail {

template <class Fn>
void for_each_json_line(std::istream& in, Fn&& fn) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
      throw ParseError(lineno, "unparseable record");
    }
    if (!obj.is_object()) throw ParseError(lineno, "record is not a key-value object");
    fn(obj, lineno);
  }
}

template <class T>
T required(const nlohmann::json& obj, const char* key, std::size_t lineno) {
  auto it = obj.find(key);
  if (it == obj.end()) throw ParseError(lineno, std::string("missing field '") + key + "'");
  try {
    return it->template get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ParseError(lineno, std::string("bad value for field '") + key + "'");
  }
}

inline std::int64_t required_time(const nlohmann::json& obj, std::size_t lineno) {
  auto it = obj.find("time");
  if (it == obj.end()) throw ParseError(lineno, "missing field 'time'");
  if (!it->is_number_integer()) throw ParseError(lineno, "field 'time' must be an integer");
  const auto t = it->get<std::int64_t>();
  if (t < 0) throw ParseError(lineno, "negative timestamp");
  return t;
}

}  // namespace detail

/// One JSON object per line with keys student, time, event, target; other keys are ignored.
inline EventLog parse_event_log(std::istream& in) {
  EventLog log;
  detail::for_each_json_line(in, [&](const nlohmann::json& obj, std::size_t lineno) {
    auto student = detail::required<std::string>(obj, "student", lineno);
    const auto time = detail::required_time(obj, lineno);
    const auto event = detail::required<std::string>(obj, "event", lineno);
    auto target = detail::required<std::string>(obj, "target", lineno);
    const auto type = parse_event_type(event);
    if (!type) {
      ++log.skipped;
      return;
    }
    log.records.push_back({std::move(student), time, *type, std::move(target)});
  });
  return log;
}

inline void write_event(std::ostream& out, const EventRecord& e) {
  nlohmann::json obj{{"student", e.student_id},
                     {"time", e.timestamp},
                     {"event", event_wire_name(e.type)},
                     {"target", e.target_id}};
  out << obj.dump() << '\n';
}

inline void serialize_events(const std::vector<EventRecord>& events, std::ostream& out) {
  for (const auto& e : events) write_event(out, e);
}

/// One JSON object per line with keys student, vertical, time, score.
inline std::vector<SubmissionRecord> parse_submission_log(std::istream& in) {
  std::vector<SubmissionRecord> subs;
  detail::for_each_json_line(in, [&](const nlohmann::json& obj, std::size_t lineno) {
    SubmissionRecord s;
    s.student_id = detail::required<std::string>(obj, "student", lineno);
    s.vertical_id = detail::required<std::string>(obj, "vertical", lineno);
    s.timestamp = detail::required_time(obj, lineno);
    s.score = detail::required<double>(obj, "score", lineno);
    if (!(s.score >= 0.0 && s.score <= 1.0)) throw ParseError(lineno, "score outside [0,1]");
    subs.push_back(std::move(s));
  });
  return subs;
}

inline void write_submission(std::ostream& out, const SubmissionRecord& s) {
  nlohmann::json obj{{"student", s.student_id},
                     {"vertical", s.vertical_id},
                     {"time", s.timestamp},
                     {"score", s.score}};
  out << obj.dump() << '\n';
}

inline void serialize_submissions(const std::vector<SubmissionRecord>& subs, std::ostream& out) {
  for (const auto& s : subs) write_submission(out, s);
}

// ---------------------------------------------------------------------------
// Grades and split times
// ---------------------------------------------------------------------------

struct ChapterGrades {
  Array values;            // [N]
  std::vector<bool> mask;  // false where a chapter has no assessment
};

/// Chapter grade = sum over the chapter's problem verticals of weight * best score.
/// Missing submissions score 0.
inline std::map<std::string, ChapterGrades> compute_grades(const std::vector<SubmissionRecord>& subs,
                                                           const CourseStructure& course) {
  const std::size_t n = course.chapter_count();
  std::map<std::string, std::unordered_map<std::string, double>> best;
  for (const auto& s : subs) {
    if (!course.problem_vertical(s.vertical_id))
      throw ReferenceError("submission to unknown problem vertical '" + s.vertical_id + "'");
    auto& slot = best[s.student_id];
    auto [it, inserted] = slot.emplace(s.vertical_id, s.score);
    if (!inserted) it->second = std::max(it->second, s.score);
  }
  std::map<std::string, ChapterGrades> out;
  for (const auto& [student, scores] : best) {
    ChapterGrades g{Array({n}), course.assessed()};
    for (std::size_t c = 0; c < n; ++c) {
      double grade = 0.0;
      for (const Vertical* v : course.problems_in(c)) {
        auto it = scores.find(v->id);
        if (it != scores.end()) grade += v->weight * it->second;
      }
      g.values(c) = grade;
    }
    out.emplace(student, std::move(g));
  }
  return out;
}

/// Timestamp of the student's last submission to any problem vertical of `chapter`.
inline std::optional<std::int64_t> split_time(const std::string& student_id, std::size_t chapter,
                                              const std::vector<SubmissionRecord>& subs,
                                              const CourseStructure& course) {
  std::optional<std::int64_t> t;
  for (const auto& s : subs) {
    if (s.student_id != student_id || !course.problem_vertical(s.vertical_id)) continue;
    if (course.chapter_of(s.vertical_id) != chapter) continue;
    if (!t || s.timestamp > *t) t = s.timestamp;
  }
  return t;
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

struct StudentSequence {
  std::string student_id;
  Array features;  // [N x F]
  Array labels;    // [N]
  std::vector<bool> label_mask;
};

/// Per-feature affine map x' = (x - offset) / scale.
struct Normalization {
  std::vector<double> offset = std::vector<double>(kFeatureCount, 0.0);
  std::vector<double> scale = std::vector<double>(kFeatureCount, 1.0);
};

struct Dataset {
  std::optional<CourseStructure> course;  // absent when loaded from a CSV export
  std::size_t chapters = 0;
  std::vector<bool> assessed;  // per chapter
  std::vector<StudentSequence> students;
  Normalization normalization;
  std::size_t unknown_targets = 0;  // events whose target is not part of the course

  std::size_t size() const noexcept { return students.size(); }
};

/// Counts every tracked event per (student, chapter, type), split into prior/post columns at
/// the student's last submission for that chapter. Without a submission everything is prior.
inline Dataset extract_features(const std::vector<EventRecord>& events,
                                const std::vector<SubmissionRecord>& subs,
                                const CourseStructure& course) {
  const std::size_t n = course.chapter_count();
  auto grades = compute_grades(subs, course);

  std::map<std::string, std::size_t> order;
  for (const auto& e : events) order.emplace(e.student_id, 0);
  for (const auto& s : subs) order.emplace(s.student_id, 0);

  Dataset ds;
  ds.course = course;
  ds.chapters = n;
  ds.assessed = course.assessed();
  ds.students.reserve(order.size());
  for (auto& [id, idx] : order) {
    idx = ds.students.size();
    StudentSequence seq{id, Array({n, kFeatureCount}), Array({n}), course.assessed()};
    if (auto it = grades.find(id); it != grades.end()) seq.labels = it->second.values;
    ds.students.push_back(std::move(seq));
  }

  constexpr auto kNone = std::numeric_limits<std::int64_t>::min();
  std::vector<std::int64_t> split(order.size() * n, kNone);
  for (const auto& s : subs) {
    const std::size_t c = *course.chapter_of(s.vertical_id);
    auto& t = split[order.at(s.student_id) * n + c];
    t = std::max(t, s.timestamp);
  }

  for (const auto& e : events) {
    const auto ch = course.chapter_of(e.target_id);
    if (!ch) {
      ++ds.unknown_targets;
      continue;
    }
    const std::size_t si = order.at(e.student_id);
    const std::int64_t t = split[si * n + *ch];
    const bool post = t != kNone && e.timestamp > t;
    ds.students[si].features(*ch, feature_index(e.type, post)) += 1.0;
  }
  return ds;
}

inline Dataset apply_normalization(Dataset ds, const Normalization& norm) {
  for (auto& s : ds.students)
    for (std::size_t c = 0; c < ds.chapters; ++c)
      for (std::size_t f = 0; f < kFeatureCount; ++f)
        s.features(c, f) = (s.features(c, f) - norm.offset[f]) / norm.scale[f];
  ds.normalization = norm;
  return ds;
}

/// Min-max scaling per feature column over all students and all chapters.
/// Constant columns become zeros with scale 1.
inline Dataset normalize(Dataset ds) {
  Normalization norm;
  for (std::size_t f = 0; f < kFeatureCount; ++f) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (const auto& s : ds.students)
      for (std::size_t c = 0; c < ds.chapters; ++c) {
        lo = std::min(lo, s.features(c, f));
        hi = std::max(hi, s.features(c, f));
      }
    if (ds.students.empty()) continue;
    norm.offset[f] = lo;
    norm.scale[f] = hi > lo ? hi - lo : 1.0;
  }
  return apply_normalization(std::move(ds), norm);
}

/// Keeps students with a computable grade in every assessed chapter.
inline Dataset filter_valid(Dataset ds) {
  std::vector<StudentSequence> kept;
  kept.reserve(ds.students.size());
  for (auto& s : ds.students) {
    bool ok = true;
    for (std::size_t c = 0; c < ds.chapters; ++c)
      if (ds.assessed[c] && (!s.label_mask[c] || !std::isfinite(s.labels(c)))) ok = false;
    if (ok) kept.push_back(std::move(s));
  }
  ds.students = std::move(kept);
  return ds;
}

/// Convenience: parse, extract, normalize and filter in one go.
inline Dataset build_dataset(const std::vector<EventRecord>& events,
                             const std::vector<SubmissionRecord>& subs, const CourseStructure& course) {
  return filter_valid(normalize(extract_features(events, subs, course)));
}

// ---------------------------------------------------------------------------
// CSV export: student_id,chapter,<20 features>,label,label_valid; chapters are 1-based.
// ---------------------------------------------------------------------------

inline void write_dataset_csv(const Dataset& ds, std::ostream& out) {
  out << "student_id,chapter";
  for (const auto& n : feature_names()) out << ',' << n;
  out << ",label,label_valid\n";
  out << std::setprecision(17);
  for (const auto& s : ds.students)
    for (std::size_t c = 0; c < ds.chapters; ++c) {
      out << s.student_id << ',' << (c + 1);
      for (std::size_t f = 0; f < kFeatureCount; ++f) out << ',' << s.features(c, f);
      out << ',' << s.labels(c) << ',' << (s.label_mask[c] ? 1 : 0) << '\n';
    }
}

inline Dataset read_dataset_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError(1, "empty dataset file");
  {
    std::string expected = "student_id,chapter";
    for (const auto& n : feature_names()) expected += "," + n;
    expected += ",label,label_valid";
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != expected) throw ParseError(1, "unexpected dataset header");
  }
  struct Row {
    std::size_t chapter;
    std::array<double, kFeatureCount> x;
    double label;
    bool valid;
  };
  std::map<std::string, std::vector<Row>> rows;
  std::vector<std::string> first_seen;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != kFeatureCount + 4) throw ParseError(lineno, "wrong column count");
    Row r{};
    try {
      r.chapter = std::stoul(cells[1]);
      for (std::size_t f = 0; f < kFeatureCount; ++f) r.x[f] = std::stod(cells[2 + f]);
      r.label = std::stod(cells[kFeatureCount + 2]);
      r.valid = std::stoi(cells[kFeatureCount + 3]) != 0;
    } catch (const std::exception&) {
      throw ParseError(lineno, "non-numeric cell");
    }
    if (r.chapter == 0 || r.chapter > kMaxChapters) throw ParseError(lineno, "chapter out of range");
    auto [it, inserted] = rows.try_emplace(cells[0]);
    if (inserted) first_seen.push_back(cells[0]);
    it->second.push_back(r);
  }
  Dataset ds;
  for (const auto& [id, rs] : rows) ds.chapters = std::max(ds.chapters, rs.size());
  ds.assessed.assign(ds.chapters, false);
  for (const auto& id : first_seen) {
    const auto& rs = rows.at(id);
    if (rs.size() != ds.chapters) throw ParseError(0, "student " + id + " has a ragged chapter count");
    StudentSequence s{id, Array({ds.chapters, kFeatureCount}), Array({ds.chapters}),
                      std::vector<bool>(ds.chapters, false)};
    for (const auto& r : rs) {
      const std::size_t c = r.chapter - 1;
      if (c >= ds.chapters) throw ParseError(0, "student " + id + " chapter out of range");
      for (std::size_t f = 0; f < kFeatureCount; ++f) s.features(c, f) = r.x[f];
      s.labels(c) = r.label;
      s.label_mask[c] = r.valid;
      if (r.valid) ds.assessed[c] = true;
    }
    ds.students.push_back(std::move(s));
  }
  return ds;
}

/// Rows of one chapter (0-based index) as an [n x F] matrix.
inline Array chapter_features(const Dataset& ds, std::size_t chapter) {
  if (ds.students.empty()) throw ArgumentError("chapter_features: empty dataset");
  if (chapter >= ds.chapters) throw ArgumentError("chapter_features: index " + std::to_string(chapter) + " out of range");
  Array out({ds.students.size(), kFeatureCount});
  for (std::size_t i = 0; i < ds.students.size(); ++i)
    for (std::size_t f = 0; f < kFeatureCount; ++f) out(i, f) = ds.students[i].features(chapter, f);
  return out;
}

}  // namespace moocembed
