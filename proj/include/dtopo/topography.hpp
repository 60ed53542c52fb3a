#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "dtopo/dataset.hpp"
#include "dtopo/density_peaks.hpp"
#include "dtopo/error.hpp"

namespace dtopo {

/// Adjusted Rand Index between two labelings of the same points. Pair
/// counts are kept as exact integers until the final division.
template <class A, class B>
double adjusted_rand_index(std::span<const A> a, std::span<const B> b) {
  if (a.size() != b.size()) throw DataError("ARI: partitions have different lengths");
  if (a.size() < 2) throw DataError("ARI needs at least 2 points");
  using Wide = __int128;
  auto pairs = [](std::int64_t m) -> Wide { return static_cast<Wide>(m) * (m - 1) / 2; };

  std::map<A, std::size_t> row_id;
  std::map<B, std::size_t> col_id;
  for (const A& v : a) row_id.try_emplace(v, row_id.size());
  for (const B& v : b) col_id.try_emplace(v, col_id.size());
  std::map<std::pair<std::size_t, std::size_t>, std::int64_t> cells;
  std::vector<std::int64_t> rows(row_id.size(), 0), cols(col_id.size(), 0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const std::size_t r = row_id[a[i]], c = col_id[b[i]];
    ++cells[{r, c}];
    ++rows[r];
    ++cols[c];
  }
  Wide index = 0, sum_rows = 0, sum_cols = 0;
  for (const auto& [_, m] : cells) index += pairs(m);
  for (std::int64_t m : rows) sum_rows += pairs(m);
  for (std::int64_t m : cols) sum_cols += pairs(m);
  const Wide total = pairs(static_cast<std::int64_t>(a.size()));

  // (index - expected) / (max - expected), scaled by 2 * total.
  const Wide numerator = 2 * total * index - 2 * sum_rows * sum_cols;
  const Wide denominator = total * (sum_rows + sum_cols) - 2 * sum_rows * sum_cols;
  // Zero only when both partitions are one cluster, or both all singletons.
  if (denominator == 0) return 1.0;
  return static_cast<double>(static_cast<long double>(numerator) / static_cast<long double>(denominator));
}

template <class A, class B>
double adjusted_rand_index(const std::vector<A>& a, const std::vector<B>& b) {
  return adjusted_rand_index(std::span<const A>(a), std::span<const B>(b));
}

struct DendrogramMerge {
  std::size_t left;
  std::size_t right;
  /// WPGMA similarity (log-density) at which the two nodes join.
  double height;
};

/// Binary tree over peaks. Nodes 0..n-1 are leaves; merge m creates node n+m.
struct Dendrogram {
  std::vector<double> leaf_height;
  std::vector<DendrogramMerge> merges;

  std::size_t n_leaves() const { return leaf_height.size(); }
  double node_height(std::size_t node) const {
    return node < n_leaves() ? leaf_height[node] : merges[node - n_leaves()].height;
  }
};

/// Similarity used between peaks without a shared border: below every
/// observed log-density by one error unit, so such peaks join last.
inline double missing_saddle_fill(const DensityEstimate& de) {
  return *std::min_element(de.log_density.begin(), de.log_density.end()) - de.error;
}

/// WPGMA on saddle log-densities: repeatedly join the most similar pair and
/// average its similarities to every other cluster with equal weight.
inline Dendrogram build_dendrogram(const PeakPartition& p, const SaddleTable& s, double fill) {
  const std::size_t n = p.n_peaks();
  if (n == 0) throw DataError("dendrogram needs at least one peak");
  Dendrogram d;
  d.leaf_height = p.peak_log_density;

  std::vector<std::vector<double>> sim(n, std::vector<double>(n, fill));
  for (const auto& [key, saddle] : s.entries()) {
    sim[key.first][key.second] = saddle.log_density;
    sim[key.second][key.first] = saddle.log_density;
  }
  std::vector<std::size_t> node(n);
  std::iota(node.begin(), node.end(), std::size_t{0});
  std::vector<char> alive(n, 1);

  for (std::size_t step = 0; step + 1 < n; ++step) {
    std::size_t bi = 0, bj = 0;
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
      if (!alive[i]) continue;
      for (std::size_t j = i + 1; j < n; ++j) {
        if (alive[j] && sim[i][j] > best) {
          best = sim[i][j];
          bi = i;
          bj = j;
        }
      }
    }
    d.merges.push_back({node[bi], node[bj], best});
    for (std::size_t x = 0; x < n; ++x) {
      if (!alive[x] || x == bi || x == bj) continue;
      sim[bi][x] = sim[x][bi] = 0.5 * (sim[bi][x] + sim[bj][x]);
    }
    alive[bj] = 0;
    node[bi] = n + step;
  }
  return d;
}

inline Dendrogram build_dendrogram(const PeakPartition& p, const SaddleTable& s, const DensityEstimate& de) {
  return build_dendrogram(p, s, missing_saddle_fill(de));
}

/// Leaf partition obtained by keeping only merges with height >= threshold.
inline std::vector<std::size_t> cut_dendrogram(const Dendrogram& d, double threshold) {
  const std::size_t n = d.n_leaves();
  std::vector<std::size_t> parent(n + d.merges.size());
  std::iota(parent.begin(), parent.end(), std::size_t{0});
  auto find = [&](std::size_t v) {
    while (parent[v] != v) v = parent[v] = parent[parent[v]];
    return v;
  };
  for (std::size_t m = 0; m < d.merges.size(); ++m) {
    const std::size_t self = n + m;
    if (d.merges[m].height >= threshold) {
      parent[find(d.merges[m].left)] = self;
      parent[find(d.merges[m].right)] = self;
    }
  }
  std::map<std::size_t, std::size_t> compact;
  std::vector<std::size_t> cluster(n);
  for (std::size_t leaf = 0; leaf < n; ++leaf) cluster[leaf] = compact.try_emplace(find(leaf), compact.size()).first->second;
  return cluster;
}

/// Newick text; branch lengths are log-density drops from child to parent,
/// and the root carries its own height as a trailing comment.
inline std::string to_newick(const Dendrogram& d, int precision = 6) {
  std::ostringstream out;
  out << std::setprecision(precision) << std::fixed;
  const std::size_t n = d.n_leaves();
  auto emit = [&](auto&& self, std::size_t node, double parent_height, bool is_root) -> void {
    if (node < n) {
      out << "peak" << node;
    } else {
      const DendrogramMerge& m = d.merges[node - n];
      out << '(';
      self(self, m.left, m.height, false);
      out << ',';
      self(self, m.right, m.height, false);
      out << ')';
    }
    if (!is_root) out << ':' << d.node_height(node) - parent_height;
  };
  const std::size_t root = n + d.merges.size() - 1;
  emit(emit, d.merges.empty() ? 0 : root, 0.0, true);
  out << ";[root_height=" << d.node_height(d.merges.empty() ? 0 : root) << "]\n";
  return out.str();
}

struct ClassCount {
  std::int64_t label;
  std::size_t count;
};

struct PeakComposition {
  std::size_t peak;
  std::size_t size;
  /// Classes with more than min_count members, by descending count.
  std::vector<ClassCount> listed;
  std::size_t elided_classes = 0;
  std::size_t elided_points = 0;
  double purity = 0.0;
};

struct PeakReport {
  std::size_t min_count = 0;
  std::vector<PeakComposition> peaks;
};

/// Half the average class size, rounded up; 150 for 300 points per class.
inline std::size_t default_min_count(const LabelSet& y) {
  const std::size_t per_class = (y.size() + y.n_classes() - 1) / y.n_classes();
  return (per_class + 1) / 2;
}

inline PeakReport peak_composition(const PeakPartition& p, const LabelSet& y, std::size_t min_count) {
  if (y.size() != p.label.size()) throw DataError("peak composition: labels and partition differ in length");
  std::vector<std::map<std::int64_t, std::size_t>> hist(p.n_peaks());
  for (std::size_t i = 0; i < y.size(); ++i) ++hist[p.label[i]][y[i]];

  PeakReport report;
  report.min_count = min_count;
  for (std::size_t a = 0; a < p.n_peaks(); ++a) {
    PeakComposition c{a, 0, {}, 0, 0, 0.0};
    std::vector<ClassCount> all;
    for (const auto& [label, count] : hist[a]) {
      all.push_back({label, count});
      c.size += count;
    }
    std::sort(all.begin(), all.end(), [](const ClassCount& l, const ClassCount& r) {
      return l.count > r.count || (l.count == r.count && l.label < r.label);
    });
    for (const ClassCount& cc : all) {
      if (cc.count > min_count) {
        c.listed.push_back(cc);
      } else {
        ++c.elided_classes;
        c.elided_points += cc.count;
      }
    }
    c.purity = c.size == 0 ? 0.0 : static_cast<double>(all.front().count) / static_cast<double>(c.size);
    report.peaks.push_back(std::move(c));
  }
  return report;
}

/// Text layout: peaks from smallest to largest, listed classes with counts,
/// "..." when classes were elided.
inline void write_peak_report(std::ostream& out, const PeakReport& r) {
  std::vector<const PeakComposition*> order;
  for (const PeakComposition& c : r.peaks) order.push_back(&c);
  std::stable_sort(order.begin(), order.end(),
                   [](const PeakComposition* a, const PeakComposition* b) { return a->size < b->size; });
  out << "# classes listed when represented by more than " << r.min_count << " points\n";
  out << std::fixed << std::setprecision(4);
  for (const PeakComposition* c : order) {
    out << "peak " << c->peak << "  size " << c->size << "  purity " << c->purity << "  classes:";
    for (const ClassCount& cc : c->listed) out << ' ' << cc.label << '(' << cc.count << ')';
    if (c->elided_classes > 0) out << " ...";
    out << '\n';
  }
}

struct AriPoint {
  double ari_macro;
  double ari_class;
};

inline std::vector<AriPoint> macro_vs_class_ari_profile(std::span<const PeakPartition> partitions,
                                                        const LabelSet& y_macro, const LabelSet& y_class) {
  if (y_macro.size() != y_class.size()) throw DataError("macro and class labels differ in length");
  std::vector<AriPoint> out;
  for (const PeakPartition& p : partitions) {
    const std::span<const std::size_t> labels(p.label);
    out.push_back({adjusted_rand_index(labels, y_macro.labels()), adjusted_rand_index(labels, y_class.labels())});
  }
  return out;
}

}  // namespace dtopo
