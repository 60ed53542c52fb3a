#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dtopo/error.hpp"
#include "dtopo/hash.hpp"
#include "dtopo/npy.hpp"
#include "dtopo/random.hpp"

namespace dtopo {

/// One layer's representation: N points by D features, row-major, all finite.
class ActivationMatrix {
 public:
  ActivationMatrix() = default;

  ActivationMatrix(std::string layer_id, std::size_t n_points, std::size_t n_features, std::vector<double> values)
      : layer_id_(std::move(layer_id)), rows_(n_points), cols_(n_features), values_(std::move(values)) {
    if (rows_ < 2) throw DataError("activation matrix '" + layer_id_ + "' needs at least 2 points");
    if (cols_ < 1) throw DataError("activation matrix '" + layer_id_ + "' needs at least 1 feature");
    if (values_.size() != rows_ * cols_) throw DataError("activation matrix '" + layer_id_ + "': size mismatch");
    for (std::size_t i = 0; i < values_.size(); ++i) {
      if (!std::isfinite(values_[i]))
        throw DataError("activation matrix '" + layer_id_ + "': non-finite value at flat index " +
                        std::to_string(i));
    }
  }

  const std::string& layer_id() const { return layer_id_; }
  std::size_t n_points() const { return rows_; }
  std::size_t n_features() const { return cols_; }
  std::span<const double> values() const { return values_; }
  std::span<const double> row(std::size_t i) const { return {values_.data() + i * cols_, cols_}; }
  double operator()(std::size_t i, std::size_t j) const { return values_[i * cols_ + j]; }

  /// Content hash over shape and values; keys the graph cache.
  std::string content_hash() const {
    ContentHash h;
    h.update_value(static_cast<std::uint64_t>(rows_));
    h.update_value(static_cast<std::uint64_t>(cols_));
    h.update(std::as_bytes(std::span(values_)));
    return h.hex();
  }

  ActivationMatrix select_rows(std::span<const std::size_t> rows) const {
    std::vector<double> out;
    out.reserve(rows.size() * cols_);
    for (std::size_t r : rows) {
      auto src = row(r);
      out.insert(out.end(), src.begin(), src.end());
    }
    return {layer_id_, rows.size(), cols_, std::move(out)};
  }

  ActivationMatrix scaled(double factor) const {
    std::vector<double> out(values_);
    for (double& v : out) v *= factor;
    return {layer_id_, rows_, cols_, std::move(out)};
  }

 private:
  std::string layer_id_;
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> values_;
};

class LabelSet {
 public:
  LabelSet() = default;

  explicit LabelSet(std::vector<std::int64_t> labels) : labels_(std::move(labels)) {
    std::set<std::int64_t> distinct;
    for (std::size_t i = 0; i < labels_.size(); ++i) {
      if (labels_[i] < 0)
        throw DataError("label at index " + std::to_string(i) + " is negative (" + std::to_string(labels_[i]) + ")");
      distinct.insert(labels_[i]);
    }
    n_classes_ = distinct.size();
  }

  std::size_t size() const { return labels_.size(); }
  std::size_t n_classes() const { return n_classes_; }
  std::span<const std::int64_t> labels() const { return labels_; }
  std::int64_t operator[](std::size_t i) const { return labels_[i]; }

  /// Distinct class ids, ascending.
  std::vector<std::int64_t> classes() const {
    std::vector<std::int64_t> c(labels_);
    std::sort(c.begin(), c.end());
    c.erase(std::unique(c.begin(), c.end()), c.end());
    return c;
  }

  LabelSet select(std::span<const std::size_t> rows) const {
    std::vector<std::int64_t> out;
    out.reserve(rows.size());
    for (std::size_t r : rows) out.push_back(labels_[r]);
    return LabelSet(std::move(out));
  }

 private:
  std::vector<std::int64_t> labels_;
  std::size_t n_classes_ = 0;
};

inline void require_paired(const ActivationMatrix& x, const LabelSet& y) {
  if (x.n_points() != y.size())
    throw DataError("labels have " + std::to_string(y.size()) + " entries but layer '" + x.layer_id() + "' has " +
                    std::to_string(x.n_points()) + " points");
}

struct SampleSpec {
  std::size_t n_classes_kept = 0;
  std::size_t n_per_class = 0;
  std::uint64_t rng_seed = 0;
};

struct AnalysisConfig {
  std::size_t k = 30;
  double z = 1.0;
  std::optional<SampleSpec> sample;
  double cka_bandwidth_fraction = 0.2;

  void validate(std::size_t n_points) const {
    if (k < 1 || k >= n_points)
      throw UsageError("k=" + std::to_string(k) + " must satisfy 1 <= k < N=" + std::to_string(n_points));
    if (!(z >= 0.0)) throw UsageError("Z must be non-negative");
    if (!(cka_bandwidth_fraction > 0.0)) throw UsageError("CKA bandwidth fraction must be positive");
  }
};

inline ActivationMatrix load_activation_matrix(const std::filesystem::path& path, std::string layer_id = {}) {
  const npy::Array arr = npy::read(path);
  if (arr.dtype.kind != npy::ElementKind::Float)
    throw DataError(path.string() + ": activations must be float32/float64, got " + arr.dtype.descr());
  if (arr.shape.size() != 2)
    throw DataError(path.string() + ": activations must be a 2-D array, got rank " + std::to_string(arr.shape.size()));
  if (layer_id.empty()) layer_id = path.stem().string();
  return {std::move(layer_id), arr.shape[0], arr.shape[1], arr.to_real()};
}

inline LabelSet load_labels(const std::filesystem::path& path) {
  const npy::Array arr = npy::read(path);
  if (arr.dtype.kind != npy::ElementKind::SignedInt)
    throw DataError(path.string() + ": labels must be int32/int64, got " + arr.dtype.descr());
  if (arr.shape.size() != 1)
    throw DataError(path.string() + ": labels must be a 1-D array, got rank " + std::to_string(arr.shape.size()));
  return LabelSet(arr.to_int());
}

inline void save_activation_matrix(const std::filesystem::path& path, const ActivationMatrix& x,
                                   npy::Dtype dtype = npy::f8) {
  npy::write_values(path, x.values(), {x.n_points(), x.n_features()}, dtype);
}

inline void save_labels(const std::filesystem::path& path, const LabelSet& y, npy::Dtype dtype = npy::i8) {
  npy::write_values(path, y.labels(), {y.size()}, dtype);
}

struct Subsample {
  ActivationMatrix x;
  LabelSet y;
  /// Original index of each kept point, ascending.
  std::vector<std::size_t> index_map;
};

/// Indices chosen by the stratified draw: classes first, then members within
/// each kept class, both by seeded Fisher-Yates. Returned ascending.
inline std::vector<std::size_t> stratified_indices(const LabelSet& y, const SampleSpec& spec) {
  if (spec.n_classes_kept == 0 || spec.n_per_class == 0) throw UsageError("sample spec must request at least one point");
  std::map<std::int64_t, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < y.size(); ++i) members[y[i]].push_back(i);
  if (spec.n_classes_kept > members.size())
    throw DataError("sample spec keeps " + std::to_string(spec.n_classes_kept) + " classes but only " +
                    std::to_string(members.size()) + " exist");

  std::mt19937_64 rng(spec.rng_seed);
  std::vector<std::int64_t> classes;
  for (const auto& [cls, _] : members) classes.push_back(cls);
  fisher_yates(std::span(classes), rng);
  classes.resize(spec.n_classes_kept);
  std::sort(classes.begin(), classes.end());

  std::vector<std::size_t> chosen;
  for (std::int64_t cls : classes) {
    std::vector<std::size_t>& pool = members[cls];
    if (pool.size() < spec.n_per_class)
      throw DataError("class " + std::to_string(cls) + " has " + std::to_string(pool.size()) + " members, fewer than " +
                      std::to_string(spec.n_per_class));
    fisher_yates(std::span(pool), rng);
    chosen.insert(chosen.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(spec.n_per_class));
  }
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

inline Subsample stratified_subsample(const ActivationMatrix& x, const LabelSet& y, const SampleSpec& spec) {
  require_paired(x, y);
  std::vector<std::size_t> idx = stratified_indices(y, spec);
  return {x.select_rows(idx), y.select(idx), std::move(idx)};
}

}  // namespace dtopo
