#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dtopo/dataset.hpp"
#include "dtopo/error.hpp"
#include "dtopo/npy.hpp"
#include "dtopo/parallel.hpp"

namespace dtopo {

/// Squared Euclidean distance, summed in feature order. Every distance in
/// the library goes through this one definition.
inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t t = 0; t < a.size(); ++t) {
    const double diff = a[t] - b[t];
    s += diff * diff;
  }
  return s;
}

/// Exact k-nearest-neighbour lists. Row i holds the k points closest to i
/// (never i itself), ordered by (distance, index).
class NeighborGraph {
 public:
  NeighborGraph() = default;
  NeighborGraph(std::size_t n_points, std::size_t k, std::vector<std::size_t> neighbors, std::vector<double> distances)
      : n_(n_points), k_(k), neighbors_(std::move(neighbors)), distances_(std::move(distances)) {
    if (neighbors_.size() != n_ * k_ || distances_.size() != n_ * k_)
      throw DataError("neighbor graph arrays do not match N x k");
  }

  std::size_t n_points() const { return n_; }
  std::size_t k() const { return k_; }
  std::span<const std::size_t> neighbors(std::size_t i) const { return {neighbors_.data() + i * k_, k_}; }
  std::span<const double> distances(std::size_t i) const { return {distances_.data() + i * k_, k_}; }
  std::span<const std::size_t> all_neighbors() const { return neighbors_; }
  std::span<const double> all_distances() const { return distances_; }

  /// The graph at a smaller k; neighbour lists are nested in k.
  NeighborGraph prefix(std::size_t k) const {
    if (k < 1 || k > k_) throw UsageError("cannot truncate a k=" + std::to_string(k_) + " graph to k=" + std::to_string(k));
    if (k == k_) return *this;
    std::vector<std::size_t> nb;
    std::vector<double> dist;
    nb.reserve(n_ * k);
    dist.reserve(n_ * k);
    for (std::size_t i = 0; i < n_; ++i) {
      nb.insert(nb.end(), neighbors(i).begin(), neighbors(i).begin() + static_cast<std::ptrdiff_t>(k));
      dist.insert(dist.end(), distances(i).begin(), distances(i).begin() + static_cast<std::ptrdiff_t>(k));
    }
    return {n_, k, std::move(nb), std::move(dist)};
  }

  bool operator==(const NeighborGraph&) const = default;

 private:
  std::size_t n_ = 0;
  std::size_t k_ = 0;
  std::vector<std::size_t> neighbors_;
  std::vector<double> distances_;
};

namespace detail {

inline constexpr std::size_t kQueryBlock = 8;

struct Candidate {
  double d2;
  std::size_t index;
  bool operator<(const Candidate& o) const { return d2 < o.d2 || (d2 == o.d2 && index < o.index); }
};

}  // namespace detail

/// Brute-force exact kNN. Queries are processed in blocks that share each
/// candidate row; results are independent of `workers`.
inline NeighborGraph build_knn_graph(const ActivationMatrix& x, std::size_t k, unsigned workers = 1) {
  const std::size_t n = x.n_points();
  if (n < 2) throw DataError("kNN graph needs at least 2 points");
  if (k < 1 || k > n - 1)
    throw UsageError("k=" + std::to_string(k) + " out of range [1, " + std::to_string(n - 1) + "]");

  const std::size_t dim = x.n_features();
  const std::size_t n_blocks = (n + detail::kQueryBlock - 1) / detail::kQueryBlock;
  std::vector<std::size_t> neighbors(n * k);
  std::vector<double> distances(n * k);

  parallel_for_chunks(n_blocks, workers, [&](std::size_t block_begin, std::size_t block_end) {
    std::vector<double> d2(detail::kQueryBlock * n);
    std::vector<detail::Candidate> cand;
    cand.reserve(n);
    const double* data = x.values().data();
    for (std::size_t b = block_begin; b < block_end; ++b) {
      const std::size_t q0 = b * detail::kQueryBlock;
      const std::size_t nq = std::min(detail::kQueryBlock, n - q0);
      for (std::size_t j = 0; j < n; ++j) {
        const double* cj = data + j * dim;
        double acc[detail::kQueryBlock] = {};
        for (std::size_t t = 0; t < dim; ++t) {
          const double c = cj[t];
          for (std::size_t q = 0; q < nq; ++q) {
            const double diff = data[(q0 + q) * dim + t] - c;
            acc[q] += diff * diff;
          }
        }
        for (std::size_t q = 0; q < nq; ++q) d2[q * n + j] = acc[q];
      }
      for (std::size_t q = 0; q < nq; ++q) {
        const std::size_t i = q0 + q;
        cand.clear();
        for (std::size_t j = 0; j < n; ++j)
          if (j != i) cand.push_back({d2[q * n + j], j});
        auto kth = cand.begin() + static_cast<std::ptrdiff_t>(k);
        if (kth != cand.end()) std::nth_element(cand.begin(), kth - 1, cand.end());
        std::sort(cand.begin(), kth);
        for (std::size_t r = 0; r < k; ++r) {
          neighbors[i * k + r] = cand[r].index;
          distances[i * k + r] = std::sqrt(cand[r].d2);
        }
      }
    }
  });
  return {n, k, std::move(neighbors), std::move(distances)};
}

/// Number of neighbourhoods each point appears in; sums to N*k.
inline std::vector<std::size_t> in_degree(const NeighborGraph& g) {
  std::vector<std::size_t> deg(g.n_points(), 0);
  for (std::size_t j : g.all_neighbors()) ++deg[j];
  return deg;
}

struct Hub {
  std::size_t point;
  std::size_t in_degree;
};

/// The `count` most frequent neighbours, by descending in-degree then index.
inline std::vector<Hub> top_hubs(const NeighborGraph& g, std::size_t count) {
  const std::vector<std::size_t> deg = in_degree(g);
  std::vector<Hub> hubs;
  hubs.reserve(deg.size());
  for (std::size_t i = 0; i < deg.size(); ++i) hubs.push_back({i, deg[i]});
  count = std::min(count, hubs.size());
  std::partial_sort(hubs.begin(), hubs.begin() + static_cast<std::ptrdiff_t>(count), hubs.end(),
                    [](const Hub& a, const Hub& b) {
                      return a.in_degree > b.in_degree || (a.in_degree == b.in_degree && a.point < b.point);
                    });
  hubs.resize(count);
  return hubs;
}

inline double mean_first_nn_distance(const NeighborGraph& g) {
  double sum = 0.0;
  for (std::size_t i = 0; i < g.n_points(); ++i) sum += g.distances(i)[0];
  return sum / static_cast<double>(g.n_points());
}

// Graph cache: <stem>.neighbors.npy (N x k int64), <stem>.distances.npy
// (N x k float64) and a one-line <stem>.meta sidecar "k=<k> n=<N> x_hash=<hex>".

inline void save_graph_cache(const std::filesystem::path& stem, const NeighborGraph& g, const std::string& x_hash) {
  std::vector<std::int64_t> nb(g.all_neighbors().begin(), g.all_neighbors().end());
  npy::write_values(stem.string() + ".neighbors.npy", std::span<const std::int64_t>(nb), {g.n_points(), g.k()},
                    npy::i8);
  npy::write_values(stem.string() + ".distances.npy", g.all_distances(), {g.n_points(), g.k()}, npy::f8);
  std::ofstream meta(stem.string() + ".meta");
  meta << "k=" << g.k() << " n=" << g.n_points() << " x_hash=" << x_hash << '\n';
  if (!meta) throw DataError("cannot write graph cache " + stem.string());
}

/// Loads a cached graph built on data with hash `x_hash` and at least `k`
/// neighbours, truncated to k. Returns nullopt on any mismatch or absence.
inline std::optional<NeighborGraph> load_graph_cache(const std::filesystem::path& stem, const std::string& x_hash,
                                                     std::size_t k) {
  std::ifstream meta(stem.string() + ".meta");
  if (!meta) return std::nullopt;
  std::string line;
  std::getline(meta, line);
  std::size_t cached_k = 0, cached_n = 0;
  std::string cached_hash;
  std::istringstream fields(line);
  for (std::string tok; fields >> tok;) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) return std::nullopt;
    const std::string key = tok.substr(0, eq), value = tok.substr(eq + 1);
    if (key == "k") cached_k = std::stoull(value);
    if (key == "n") cached_n = std::stoull(value);
    if (key == "x_hash") cached_hash = value;
  }
  if (cached_hash != x_hash || cached_k < k) return std::nullopt;
  const npy::Array nb = npy::read(stem.string() + ".neighbors.npy");
  const npy::Array dist = npy::read(stem.string() + ".distances.npy");
  const std::vector<std::size_t> expected{cached_n, cached_k};
  if (nb.shape != expected || dist.shape != expected) return std::nullopt;
  std::vector<std::size_t> neighbors;
  neighbors.reserve(nb.count());
  for (std::int64_t v : nb.to_int()) {
    if (v < 0 || static_cast<std::size_t>(v) >= cached_n) return std::nullopt;
    neighbors.push_back(static_cast<std::size_t>(v));
  }
  return NeighborGraph(cached_n, cached_k, std::move(neighbors), dist.to_real()).prefix(k);
}

}  // namespace dtopo
