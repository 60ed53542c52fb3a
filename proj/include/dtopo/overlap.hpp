#pragma once

#include <algorithm>
#include <cstddef>
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

inline constexpr std::size_t kDefaultK = 30;
inline constexpr const char* kGroundTruthTag = "gt";

/// Neighbourhood overlap chi for one layer pair, or a layer against labels.
struct OverlapResult {
  double chi = 0.0;
  /// Shared neighbours per point; the per-point overlap is hits[i] / k.
  std::vector<std::size_t> hits;
  std::size_t k = 0;
  std::pair<std::string, std::string> pair;

  std::size_t n_points() const { return hits.size(); }
  double point_chi(std::size_t i) const { return static_cast<double>(hits[i]) / static_cast<double>(k); }
  std::vector<double> per_point_chi() const {
    std::vector<double> out(hits.size());
    for (std::size_t i = 0; i < hits.size(); ++i) out[i] = point_chi(i);
    return out;
  }
};

namespace detail {

inline OverlapResult finish_overlap(std::vector<std::size_t> hits, std::size_t k) {
  std::size_t total = 0;
  for (std::size_t h : hits) total += h;
  OverlapResult r;
  r.chi = static_cast<double>(total) / (static_cast<double>(hits.size()) * static_cast<double>(k));
  r.hits = std::move(hits);
  r.k = k;
  return r;
}

}  // namespace detail

inline OverlapResult layer_overlap(const NeighborGraph& gl, const NeighborGraph& gm, unsigned workers = 1) {
  if (gl.n_points() != gm.n_points())
    throw DataError("overlap: graphs have different N (" + std::to_string(gl.n_points()) + " vs " +
                    std::to_string(gm.n_points()) + ")");
  if (gl.k() != gm.k())
    throw DataError("overlap: graphs have different k (" + std::to_string(gl.k()) + " vs " + std::to_string(gm.k()) + ")");
  const std::size_t k = gl.k();
  std::vector<std::size_t> hits(gl.n_points());
  parallel_for_chunks(gl.n_points(), workers, [&](std::size_t begin, std::size_t end) {
    std::vector<std::size_t> a(k), b(k);
    for (std::size_t i = begin; i < end; ++i) {
      std::copy(gl.neighbors(i).begin(), gl.neighbors(i).end(), a.begin());
      std::copy(gm.neighbors(i).begin(), gm.neighbors(i).end(), b.begin());
      std::sort(a.begin(), a.end());
      std::sort(b.begin(), b.end());
      std::size_t common = 0;
      for (auto ia = a.begin(), ib = b.begin(); ia != a.end() && ib != b.end();) {
        if (*ia < *ib) {
          ++ia;
        } else if (*ib < *ia) {
          ++ib;
        } else {
          ++common;
          ++ia;
          ++ib;
        }
      }
      hits[i] = common;
    }
  });
  return detail::finish_overlap(std::move(hits), k);
}

/// Neighbouring hit: fraction of each point's neighbours that share its label.
inline OverlapResult ground_truth_overlap(const NeighborGraph& g, const LabelSet& y) {
  if (y.size() != g.n_points())
    throw DataError("ground-truth overlap: " + std::to_string(y.size()) + " labels for " +
                    std::to_string(g.n_points()) + " points");
  std::vector<std::size_t> hits(g.n_points(), 0);
  for (std::size_t i = 0; i < g.n_points(); ++i)
    for (std::size_t j : g.neighbors(i)) hits[i] += y[j] == y[i] ? 1 : 0;
  OverlapResult r = detail::finish_overlap(std::move(hits), g.k());
  r.pair.second = kGroundTruthTag;
  return r;
}

/// Reference for overlap_profile: a fixed layer, the labels, or the next layer.
struct ProfileReference {
  enum class Kind { Layer, GroundTruth, Consecutive };
  Kind kind = Kind::GroundTruth;
  std::size_t layer = 0;

  static ProfileReference fixed_layer(std::size_t index) { return {Kind::Layer, index}; }
  static ProfileReference ground_truth() { return {Kind::GroundTruth, 0}; }
  static ProfileReference consecutive() { return {Kind::Consecutive, 0}; }
};

struct LayerGraph {
  std::string tag;
  const NeighborGraph* graph;
};

/// One result per layer (fixed/gt reference) or per adjacent pair (consecutive).
inline std::vector<OverlapResult> overlap_profile(std::span<const LayerGraph> layers, ProfileReference ref,
                                                  const LabelSet* y = nullptr, unsigned workers = 1) {
  if (layers.empty()) throw UsageError("overlap profile needs at least one layer");
  for (const LayerGraph& l : layers) {
    if (l.graph->n_points() != layers.front().graph->n_points() || l.graph->k() != layers.front().graph->k())
      throw DataError("overlap profile: layer '" + l.tag + "' has inconsistent N or k");
  }
  std::vector<OverlapResult> out;
  switch (ref.kind) {
    case ProfileReference::Kind::GroundTruth:
      if (y == nullptr) throw UsageError("ground-truth overlap profile requires labels");
      for (const LayerGraph& l : layers) {
        out.push_back(ground_truth_overlap(*l.graph, *y));
        out.back().pair = {l.tag, kGroundTruthTag};
      }
      break;
    case ProfileReference::Kind::Layer: {
      if (ref.layer >= layers.size()) throw UsageError("overlap profile reference layer out of range");
      const LayerGraph& r = layers[ref.layer];
      for (const LayerGraph& l : layers) {
        out.push_back(layer_overlap(*l.graph, *r.graph, workers));
        out.back().pair = {l.tag, r.tag};
      }
      break;
    }
    case ProfileReference::Kind::Consecutive:
      if (layers.size() < 2) throw UsageError("consecutive overlap profile needs at least 2 layers");
      for (std::size_t i = 0; i + 1 < layers.size(); ++i) {
        out.push_back(layer_overlap(*layers[i].graph, *layers[i + 1].graph, workers));
        out.back().pair = {layers[i].tag, layers[i + 1].tag};
      }
      break;
  }
  return out;
}

struct Histogram {
  /// n_bins + 1 uniform edges on [0, 1].
  std::vector<double> edges;
  std::vector<std::size_t> counts;
};

/// Bins per-point overlaps on [0, 1]; the last bin is closed on the right.
inline Histogram chi_histogram(const OverlapResult& r, std::size_t n_bins) {
  if (n_bins < 1) throw UsageError("histogram needs at least one bin");
  Histogram h;
  h.edges.resize(n_bins + 1);
  for (std::size_t b = 0; b <= n_bins; ++b) h.edges[b] = static_cast<double>(b) / static_cast<double>(n_bins);
  h.counts.assign(n_bins, 0);
  // Exact rational binning of hits/k avoids edge misplacement from rounding.
  for (std::size_t hit : r.hits) h.counts[std::min(hit * n_bins / r.k, n_bins - 1)]++;
  return h;
}

}  // namespace dtopo
