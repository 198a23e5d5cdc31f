// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "errors.hpp"
#include "ingest.hpp"
#include "numeric.hpp"

namespace moocembed {

struct PcaModel {
  Array mean;                      // [d]
  Array components;                // [m x d], orthonormal rows
  Array explained_variance_ratio;  // [m], descending
  Array explained_variance;        // [m], eigenvalues of the sample covariance

  std::size_t dims() const { return mean.size(); }
  std::size_t count() const { return components.dim(0); }
};

/// Top-m principal axes of the sample covariance (divisor n-1). Each axis is signed so its
/// largest-magnitude entry is positive.
inline PcaModel pca_fit(const Array& x, std::size_t m) {
  detail::require_rank(x, 2, "pca_fit");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (n < 2) throw ArgumentError("pca_fit needs at least 2 samples");
  if (m == 0 || m > d)
    throw ArgumentError("pca_fit: component count " + std::to_string(m) + " outside 1.." + std::to_string(d));

  PcaModel model;
  model.mean = Array({d});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) model.mean(j) += x(i, j);
  for (std::size_t j = 0; j < d; ++j) model.mean(j) /= static_cast<double>(n);

  Array centered({n, d});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) centered(i, j) = x(i, j) - model.mean(j);
  Array cov = matmul_tn(centered, centered);
  for (auto& v : cov.data()) v /= static_cast<double>(n - 1);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = i + 1; j < d; ++j) cov(i, j) = cov(j, i) = 0.5 * (cov(i, j) + cov(j, i));

  auto eig = sym_eig(cov);
  double total = 0.0;
  for (std::size_t i = 0; i < d; ++i) total += std::max(0.0, eig.values(i));

  model.components = Array({m, d});
  model.explained_variance = Array({m});
  model.explained_variance_ratio = Array({m});
  for (std::size_t c = 0; c < m; ++c) {
    const double lambda = std::max(0.0, eig.values(c));
    model.explained_variance(c) = lambda;
    model.explained_variance_ratio(c) = total > 0.0 ? lambda / total : 0.0;
    std::size_t pivot = 0;
    for (std::size_t j = 1; j < d; ++j)
      if (std::abs(eig.vectors(j, c)) > std::abs(eig.vectors(pivot, c))) pivot = j;
    const double sign = eig.vectors(pivot, c) < 0.0 ? -1.0 : 1.0;
    for (std::size_t j = 0; j < d; ++j) model.components(c, j) = sign * eig.vectors(j, c);
  }
  return model;
}

/// Coordinates [n x m] of `x` on the model's axes.
inline Array pca_project(const PcaModel& model, const Array& x) {
  detail::require_rank(x, 2, "pca_project");
  if (x.dim(1) != model.dims()) throw ShapeError("pca_project: width " + std::to_string(x.dim(1)) + " vs " +
                                                 std::to_string(model.dims()));
  Array centered = x;
  for (std::size_t i = 0; i < x.dim(0); ++i)
    for (std::size_t j = 0; j < x.dim(1); ++j) centered(i, j) -= model.mean(j);
  return matmul_nt(centered, model.components);
}

/// Inverse of pca_project; exact when all d components are kept.
inline Array pca_reconstruct(const PcaModel& model, const Array& coords) {
  Array x = matmul(coords, model.components);
  for (std::size_t i = 0; i < x.dim(0); ++i)
    for (std::size_t j = 0; j < x.dim(1); ++j) x(i, j) += model.mean(j);
  return x;
}

/// Share of total variance in the first m principal components.
inline double retained_variance(const Array& embeddings, std::size_t m) {
  detail::require_rank(embeddings, 2, "retained_variance");
  if (embeddings.dim(0) <= m) throw ArgumentError("retained_variance needs more samples than components");
  const auto model = pca_fit(embeddings, std::min(m, embeddings.dim(1)));
  double r = 0.0;
  for (double v : model.explained_variance_ratio.data()) r += v;
  return std::min(r, 1.0);
}

/// Per-bin squared-error summary over students grouped by average grade.
struct GroupReport {
  std::vector<double> edges;  // bins [edges[i], edges[i+1]); the last bin is closed
  std::vector<std::size_t> counts;
  std::vector<std::string> models;
  std::vector<std::vector<std::optional<double>>> mse;  // [model][bin]; absent for empty bins

  std::size_t bins() const { return counts.size(); }
};

inline std::vector<double> equal_bins(std::size_t count) {
  if (count == 0) throw ArgumentError("need at least one bin");
  std::vector<double> edges(count + 1);
  for (std::size_t i = 0; i <= count; ++i) edges[i] = static_cast<double>(i) / static_cast<double>(count);
  return edges;
}

inline std::size_t bin_of(const std::vector<double>& edges, double v) {
  if (v < edges.front() || v > edges.back())
    throw ArgumentError("value " + std::to_string(v) + " outside the bin range");
  auto it = std::upper_bound(edges.begin(), edges.end(), v);
  const auto i = static_cast<std::size_t>(it - edges.begin());
  return std::min(i, edges.size() - 1) - 1;
}

struct ModelPredictions {
  std::string model;
  std::vector<double> values;
};

inline GroupReport group_mse(const std::vector<ModelPredictions>& predictions, const std::vector<double>& labels,
                             const std::vector<double>& avg_grades,
                             const std::vector<double>& edges = equal_bins(20)) {
  if (edges.size() < 2 || !std::is_sorted(edges.begin(), edges.end()))
    throw ArgumentError("group_mse: bin edges must be ascending with at least two entries");
  if (labels.size() != avg_grades.size()) throw ShapeError("group_mse: labels and grades differ in length");
  for (const auto& p : predictions)
    if (p.values.size() != labels.size()) throw ShapeError("group_mse: predictions for " + p.model + " differ in length");

  GroupReport r;
  r.edges = edges;
  const std::size_t nb = edges.size() - 1;
  r.counts.assign(nb, 0);
  std::vector<std::size_t> bin(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) ++r.counts[bin[i] = bin_of(edges, avg_grades[i])];
  for (const auto& p : predictions) {
    std::vector<double> total(nb, 0.0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const double d = p.values[i] - labels[i];
      total[bin[i]] += d * d;
    }
    std::vector<std::optional<double>> row(nb);
    for (std::size_t b = 0; b < nb; ++b)
      if (r.counts[b]) row[b] = total[b] / static_cast<double>(r.counts[b]);
    r.models.push_back(p.model);
    r.mse.push_back(std::move(row));
  }
  return r;
}

/// Mean grade over the student's assessed chapters.
inline double average_grade(const StudentSequence& s) {
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t c = 0; c < s.label_mask.size(); ++c)
    if (s.label_mask[c]) {
      total += s.labels(c);
      ++n;
    }
  return n ? total / static_cast<double>(n) : 0.0;
}

// ---------------------------------------------------------------------------
// CSV exports
// ---------------------------------------------------------------------------

inline void write_variance_csv(const PcaModel& model, std::ostream& out) {
  out << "component_index,ratio\n" << std::setprecision(17);
  for (std::size_t i = 0; i < model.count(); ++i) out << (i + 1) << ',' << model.explained_variance_ratio(i) << '\n';
}

inline void write_projection_csv(const Array& coords, const std::vector<std::string>& ids,
                                 const std::vector<double>& avg_grades, std::ostream& out) {
  if (coords.rank() != 2 || coords.dim(1) < 2 || coords.dim(0) != ids.size() || ids.size() != avg_grades.size())
    throw ShapeError("write_projection_csv: need [n x 2+] coordinates with n ids and grades");
  out << "pc1,pc2,student_id,avg_grade\n" << std::setprecision(17);
  for (std::size_t i = 0; i < ids.size(); ++i)
    out << coords(i, 0) << ',' << coords(i, 1) << ',' << ids[i] << ',' << avg_grades[i] << '\n';
}

inline void write_group_csv(const GroupReport& r, std::ostream& out) {
  out << "bin_lo,bin_hi,count";
  for (const auto& m : r.models) out << ",mse_" << m;
  out << '\n' << std::setprecision(17);
  for (std::size_t b = 0; b < r.bins(); ++b) {
    out << r.edges[b] << ',' << r.edges[b + 1] << ',' << r.counts[b];
    for (const auto& row : r.mse) {
      out << ',';
      if (row[b]) out << *row[b];
    }
    out << '\n';
  }
}

}  // namespace moocembed
