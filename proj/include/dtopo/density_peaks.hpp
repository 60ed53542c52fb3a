#pragma once

// Density-peak clustering on a kNN graph: log-density estimation, maxima
// detection, assignment of every point to a peak, border/saddle detection,
// and statistical merging of peaks that cannot be told apart from their
// saddles at confidence Z.
//
// Conventions:
//  * Densities are compared under a strict total order: higher log-density
//    first, ties broken by the lower point index. All "higher density" tests
//    below use this order, so results never depend on evaluation order.
//  * Peak labels are 0-based and numbered by descending peak density.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dtopo/dataset.hpp"
#include "dtopo/error.hpp"
#include "dtopo/knn_graph.hpp"
#include "dtopo/parallel.hpp"

namespace dtopo {

/// Standard error of a kNN log-density estimate at neighbour count k.
inline double log_density_error(std::size_t k) {
  const double kk = static_cast<double>(k);
  return std::sqrt((4.0 * kk + 2.0) / (kk * (kk + 1.0)));
}

/// A peak merges with a neighbour when its height above the saddle is below this.
inline double merge_threshold(std::size_t k, double z) { return 2.0 * z * log_density_error(k); }

struct DensityEstimate {
  std::vector<double> log_density;
  double error = 0.0;
  std::size_t k_used = 0;
  double intrinsic_dim = 0.0;
  /// Points whose k-th neighbour distance was zero and was perturbed.
  std::vector<std::size_t> flagged;

  std::size_t n_points() const { return log_density.size(); }
  /// True when point i sits strictly above point j in the density order.
  bool above(std::size_t i, std::size_t j) const {
    return log_density[i] > log_density[j] || (log_density[i] == log_density[j] && i < j);
  }
};

struct PeakPartition {
  /// Peak label of each point, in [0, n_peaks).
  std::vector<std::size_t> label;
  /// Point index of each peak's density maximum.
  std::vector<std::size_t> maxima;
  std::vector<double> peak_log_density;
  /// Confidence the partition was merged at; NaN before merging.
  double z_used = std::numeric_limits<double>::quiet_NaN();

  std::size_t n_peaks() const { return maxima.size(); }
  std::vector<std::size_t> sizes() const {
    std::vector<std::size_t> s(n_peaks(), 0);
    for (std::size_t l : label) ++s[l];
    return s;
  }
};

struct Saddle {
  std::size_t point = 0;
  double log_density = 0.0;
};

/// Saddles between bordering peaks, keyed by the unordered label pair.
class SaddleTable {
 public:
  using Key = std::pair<std::size_t, std::size_t>;

  static Key key(std::size_t a, std::size_t b) { return a < b ? Key{a, b} : Key{b, a}; }

  std::optional<Saddle> get(std::size_t a, std::size_t b) const {
    auto it = entries_.find(key(a, b));
    if (it == entries_.end()) return std::nullopt;
    return it->second;
  }
  void set(std::size_t a, std::size_t b, Saddle s) { entries_[key(a, b)] = s; }
  void erase(std::size_t a, std::size_t b) { entries_.erase(key(a, b)); }
  bool empty() const { return entries_.empty(); }
  std::size_t size() const { return entries_.size(); }
  const std::map<Key, Saddle>& entries() const { return entries_; }

 private:
  std::map<Key, Saddle> entries_;
};

/// TWO-NN maximum-likelihood intrinsic dimension from first/second
/// neighbour distance ratios. Points with a zero first distance are skipped.
inline double estimate_intrinsic_dimension(const NeighborGraph& g) {
  if (g.k() < 2) throw UsageError("intrinsic dimension needs a graph with k >= 2");
  double log_sum = 0.0;
  std::size_t used = 0;
  for (std::size_t i = 0; i < g.n_points(); ++i) {
    const double r1 = g.distances(i)[0];
    const double r2 = g.distances(i)[1];
    if (r1 > 0.0) {
      log_sum += std::log(r2 / r1);
      ++used;
    }
  }
  if (used == 0 || 2 * used < g.n_points())
    throw NumericalError("intrinsic dimension: fewer than half the points have a non-zero first-neighbour distance");
  if (!(log_sum > 0.0)) throw NumericalError("intrinsic dimension: all neighbour distance ratios equal 1");
  return static_cast<double>(used) / log_sum;
}

struct DensityOptions {
  /// Replace a zero k-th neighbour distance by 1e-3 times the smallest
  /// positive distance in the graph instead of failing.
  bool perturb_duplicates = true;
};

/// kNN log-density: ln k - ln N - d ln r_k. The d-ball volume constant is
/// omitted; every downstream use depends on differences only.
inline DensityEstimate estimate_log_density(const NeighborGraph& g, double d, std::size_t k,
                                            DensityOptions options = {}) {
  if (k < 1 || k > g.k()) throw UsageError("density k=" + std::to_string(k) + " exceeds graph k=" + std::to_string(g.k()));
  if (!(d > 0.0)) throw UsageError("density needs a positive intrinsic dimension");
  const std::size_t n = g.n_points();

  DensityEstimate de;
  de.k_used = k;
  de.intrinsic_dim = d;
  de.error = log_density_error(k);
  de.log_density.resize(n);

  double floor_distance = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (g.distances(i)[k - 1] > 0.0) continue;
    if (!options.perturb_duplicates)
      throw NumericalError("point " + std::to_string(i) + " has a zero k-th neighbour distance");
    if (floor_distance == 0.0) {
      double min_positive = std::numeric_limits<double>::infinity();
      for (double r : g.all_distances())
        if (r > 0.0) min_positive = std::min(min_positive, r);
      if (!std::isfinite(min_positive)) throw NumericalError("all points coincide; density is undefined");
      floor_distance = min_positive * 1e-3;
    }
    de.flagged.push_back(i);
  }

  const double offset = std::log(static_cast<double>(k)) - std::log(static_cast<double>(n));
  for (std::size_t i = 0; i < n; ++i) {
    double rk = g.distances(i)[k - 1];
    if (rk == 0.0) rk = floor_distance;
    de.log_density[i] = offset - d * std::log(rk);
  }
  return de;
}

namespace detail {

inline void require_matching(const NeighborGraph& g, const DensityEstimate& de) {
  if (g.n_points() != de.n_points()) throw DataError("graph and density estimate cover different points");
  if (de.k_used > g.k()) throw DataError("density estimate used more neighbours than the graph holds");
}

}  // namespace detail

/// Points denser than all their k neighbours that lie in no denser point's neighbourhood.
inline std::vector<std::size_t> find_density_maxima(const NeighborGraph& g, const DensityEstimate& de) {
  detail::require_matching(g, de);
  const std::size_t n = g.n_points();
  const std::size_t k = de.k_used;
  std::vector<char> candidate(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    auto nb = g.neighbors(i);
    for (std::size_t r = 0; r < k; ++r) {
      const std::size_t j = nb[r];
      if (de.above(j, i)) candidate[i] = 0;  // condition I fails for i
      if (de.above(i, j)) candidate[j] = 0;  // condition II fails for j
    }
  }
  std::vector<std::size_t> maxima;
  for (std::size_t i = 0; i < n; ++i)
    if (candidate[i]) maxima.push_back(i);
  return maxima;
}

/// Point indices sorted by descending density.
inline std::vector<std::size_t> density_order(const DensityEstimate& de) {
  std::vector<std::size_t> order(de.n_points());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return de.above(a, b); });
  return order;
}

/// Links every point to its nearest denser point, visiting points in
/// descending density. When no denser point is among the k neighbours the
/// nearest denser point in the whole data set is used.
inline PeakPartition assign_to_peaks(const ActivationMatrix& x, const NeighborGraph& g, const DensityEstimate& de,
                                     std::vector<std::size_t> maxima) {
  detail::require_matching(g, de);
  if (maxima.empty()) throw DataError("peak assignment needs at least one maximum");
  if (x.n_points() != g.n_points()) throw DataError("activation matrix and graph cover different points");
  const std::size_t n = g.n_points();
  const std::size_t k = de.k_used;
  std::sort(maxima.begin(), maxima.end(), [&](std::size_t a, std::size_t b) { return de.above(a, b); });

  constexpr std::size_t kUnset = std::numeric_limits<std::size_t>::max();
  PeakPartition p;
  p.label.assign(n, kUnset);
  p.maxima = maxima;
  for (std::size_t a = 0; a < maxima.size(); ++a) {
    p.label[maxima[a]] = a;
    p.peak_log_density.push_back(de.log_density[maxima[a]]);
  }

  for (std::size_t i : density_order(de)) {
    if (p.label[i] != kUnset) continue;
    std::size_t parent = kUnset;
    auto nb = g.neighbors(i);
    for (std::size_t r = 0; r < k; ++r) {
      if (de.above(nb[r], i)) {
        parent = nb[r];
        break;
      }
    }
    if (parent == kUnset) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) {
        if (!de.above(j, i)) continue;
        const double d2 = squared_distance(x.row(i), x.row(j));
        if (d2 < best) {
          best = d2;
          parent = j;
        }
      }
    }
    // The global maximum is always among `maxima`, so every other point has a
    // denser point and the parent was labelled earlier in this pass.
    p.label[i] = p.label[parent];
  }
  return p;
}

namespace detail {

/// True when no point of peak `a` other than i is as close to j as i is.
inline bool closest_in_peak(const ActivationMatrix& x, const NeighborGraph& g, const PeakPartition& p, std::size_t i,
                            std::size_t j, double d_ij) {
  const std::size_t a = p.label[i];
  auto nb = g.neighbors(j);
  auto dist = g.distances(j);
  for (std::size_t s = 0; s < nb.size(); ++s) {
    if (dist[s] > d_ij) return true;
    if (nb[s] != i && p.label[nb[s]] == a) return false;
  }
  // j's whole list lies within d_ij, so points outside it may still compete.
  for (std::size_t m = 0; m < g.n_points(); ++m) {
    if (m == i || m == j || p.label[m] != a) continue;
    if (std::sqrt(squared_distance(x.row(j), x.row(m))) <= d_ij) return false;
  }
  return true;
}

}  // namespace detail

/// Border points: i in peak a borders peak b when some neighbour j of i lies
/// in b and i is strictly closer to j than every other point of a. Applying
/// the rule from both sides gives the union; the saddle is the densest
/// border point, its log-density capped at the lower of the two peaks.
inline SaddleTable find_saddle_points(const ActivationMatrix& x, const NeighborGraph& g, const DensityEstimate& de,
                                      const PeakPartition& p) {
  detail::require_matching(g, de);
  if (x.n_points() != g.n_points()) throw DataError("activation matrix and graph cover different points");
  const std::size_t k = de.k_used;
  std::map<SaddleTable::Key, std::size_t> densest;
  for (std::size_t i = 0; i < g.n_points(); ++i) {
    const std::size_t a = p.label[i];
    auto nb = g.neighbors(i);
    auto dist = g.distances(i);
    for (std::size_t r = 0; r < k; ++r) {
      const std::size_t b = p.label[nb[r]];
      if (b == a) continue;
      const SaddleTable::Key key = SaddleTable::key(a, b);
      auto it = densest.find(key);
      if (it != densest.end() && !de.above(i, it->second)) continue;  // cannot improve the saddle
      if (!detail::closest_in_peak(x, g, p, i, nb[r], dist[r])) continue;
      if (it == densest.end()) {
        densest.emplace(key, i);
      } else {
        it->second = i;
      }
    }
  }
  SaddleTable table;
  for (const auto& [key, point] : densest) {
    const double cap = std::min(p.peak_log_density[key.first], p.peak_log_density[key.second]);
    table.set(key.first, key.second, {point, std::min(de.log_density[point], cap)});
  }
  return table;
}

struct MergedPeaks {
  PeakPartition partition;
  SaddleTable saddles;
};

/// Repeatedly merges the bordering pair with the smallest gap between the
/// lower peak and the saddle while that gap is below 2 Z eps. The lower peak
/// joins the higher one and saddles to third peaks take the denser of the two.
inline MergedPeaks merge_indistinguishable_peaks(const PeakPartition& p, const SaddleTable& s, const DensityEstimate& de,
                                                 double z) {
  if (!(z >= 0.0)) throw UsageError("Z must be non-negative");
  const double threshold = merge_threshold(de.k_used, z);
  const std::size_t n_peaks = p.n_peaks();

  // Labels are ordered by descending peak density, so the smaller label of a
  // pair is always the higher peak.
  std::vector<std::size_t> parent(n_peaks);
  std::iota(parent.begin(), parent.end(), std::size_t{0});
  std::map<SaddleTable::Key, Saddle> live = s.entries();

  for (;;) {
    auto best = live.end();
    double best_gap = std::numeric_limits<double>::infinity();
    for (auto it = live.begin(); it != live.end(); ++it) {
      const auto [a, b] = it->first;
      const double gap = std::min(p.peak_log_density[a], p.peak_log_density[b]) - it->second.log_density;
      if (gap < best_gap) {
        best_gap = gap;
        best = it;
      }
    }
    if (best == live.end() || !(best_gap < threshold)) break;

    const auto [winner, loser] = best->first;
    live.erase(best);
    parent[loser] = winner;
    std::map<SaddleTable::Key, Saddle> next;
    for (const auto& [key, saddle] : live) {
      std::size_t a = key.first == loser ? winner : key.first;
      std::size_t b = key.second == loser ? winner : key.second;
      auto [it, inserted] = next.try_emplace(SaddleTable::key(a, b), saddle);
      if (!inserted && saddle.log_density > it->second.log_density) it->second = saddle;
    }
    live = std::move(next);
  }

  auto root = [&](std::size_t a) {
    while (parent[a] != a) a = parent[a];
    return a;
  };
  std::vector<std::size_t> new_label(n_peaks, 0);
  MergedPeaks out;
  for (std::size_t a = 0; a < n_peaks; ++a) {
    if (root(a) != a) continue;
    new_label[a] = out.partition.maxima.size();
    out.partition.maxima.push_back(p.maxima[a]);
    out.partition.peak_log_density.push_back(p.peak_log_density[a]);
  }
  out.partition.label.resize(p.label.size());
  for (std::size_t i = 0; i < p.label.size(); ++i) out.partition.label[i] = new_label[root(p.label[i])];
  out.partition.z_used = z;
  for (const auto& [key, saddle] : live) out.saddles.set(new_label[key.first], new_label[key.second], saddle);
  return out;
}

struct DensityClustering {
  DensityEstimate density;
  PeakPartition partition;
  SaddleTable saddles;
  std::size_t n_maxima = 0;
};

/// Full pipeline on a prebuilt graph (graph k >= k).
inline DensityClustering cluster_density_peaks(const ActivationMatrix& x, const NeighborGraph& g, std::size_t k,
                                               double z) {
  if (k > g.k()) throw UsageError("cluster k exceeds graph k");
  const double d = estimate_intrinsic_dimension(g);
  DensityClustering out;
  out.density = estimate_log_density(g, d, k);
  std::vector<std::size_t> maxima = find_density_maxima(g, out.density);
  out.n_maxima = maxima.size();
  const PeakPartition raw = assign_to_peaks(x, g, out.density, std::move(maxima));
  const SaddleTable raw_saddles = find_saddle_points(x, g, out.density, raw);
  MergedPeaks merged = merge_indistinguishable_peaks(raw, raw_saddles, out.density, z);
  out.partition = std::move(merged.partition);
  out.saddles = std::move(merged.saddles);
  return out;
}

inline DensityClustering cluster_density_peaks(const ActivationMatrix& x, std::size_t k, double z,
                                               unsigned workers = 1) {
  if (k < 2) throw UsageError("density-peak clustering needs k >= 2");
  return cluster_density_peaks(x, build_knn_graph(x, k, workers), k, z);
}

}  // namespace dtopo
