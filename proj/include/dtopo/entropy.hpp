#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "dtopo/error.hpp"
#include "dtopo/knn_graph.hpp"
#include "dtopo/npy.hpp"
#include "dtopo/random.hpp"

namespace dtopo {

/// 8-bit image, height x width x channels, channel-interleaved.
struct ImageTensor {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 3;
  std::vector<std::uint8_t> values;
};

/// Mean over channels of the Shannon entropy (bits) of the 256-bin
/// per-channel pixel histogram.
inline double image_shannon_entropy(std::span<const std::uint8_t> pixels, std::size_t channels) {
  if (channels == 0 || pixels.empty() || pixels.size() % channels != 0)
    throw DataError("image entropy: empty image or bad channel count");
  const std::size_t per_channel = pixels.size() / channels;
  double total = 0.0;
  for (std::size_t c = 0; c < channels; ++c) {
    std::array<std::size_t, 256> hist{};
    for (std::size_t p = c; p < pixels.size(); p += channels) ++hist[pixels[p]];
    double s = 0.0;
    for (std::size_t count : hist) {
      if (count == 0) continue;
      const double pv = static_cast<double>(count) / static_cast<double>(per_channel);
      s -= pv * std::log2(pv);
    }
    total += s;
  }
  return total / static_cast<double>(channels);
}

inline double image_shannon_entropy(const ImageTensor& img) {
  if (img.values.size() != img.height * img.width * img.channels) throw DataError("image tensor size mismatch");
  return image_shannon_entropy(img.values, img.channels);
}

/// Per-image entropies from a container: either a uint8 stack of shape
/// (N, H, W, C) / (N, H, W), or a 1-D float array of precomputed values.
inline std::vector<double> load_image_entropies(const std::filesystem::path& path) {
  const npy::Array arr = npy::read(path);
  if (arr.dtype.kind == npy::ElementKind::Float && arr.shape.size() == 1) return arr.to_real();
  if (arr.dtype.kind != npy::ElementKind::UnsignedInt || (arr.shape.size() != 3 && arr.shape.size() != 4))
    throw DataError(path.string() + ": expected a uint8 image stack (N,H,W[,C]) or 1-D float entropies");
  const std::size_t n = arr.shape[0];
  const std::size_t channels = arr.shape.size() == 4 ? arr.shape[3] : 1;
  const std::size_t per_image = arr.count() / n;
  std::vector<double> out(n);
  const auto* bytes = reinterpret_cast<const std::uint8_t*>(arr.data.data());
  for (std::size_t i = 0; i < n; ++i) out[i] = image_shannon_entropy({bytes + i * per_image, per_image}, channels);
  return out;
}

struct EntropyProfile {
  std::vector<double> per_point;
  double layer_mean = 0.0;
  double shuffled_baseline = std::numeric_limits<double>::quiet_NaN();
};

/// Mean entropy of each point's first k neighbours, and its average.
inline EntropyProfile neighborhood_entropy(const NeighborGraph& g, std::span<const double> entropy, std::size_t k) {
  if (entropy.size() != g.n_points()) throw DataError("neighbourhood entropy: entropy vector length differs from N");
  if (k < 1 || k > g.k()) throw UsageError("neighbourhood entropy: k exceeds graph k");
  EntropyProfile p;
  p.per_point.resize(g.n_points());
  double sum = 0.0;
  for (std::size_t i = 0; i < g.n_points(); ++i) {
    double s = 0.0;
    auto nb = g.neighbors(i);
    for (std::size_t r = 0; r < k; ++r) s += entropy[nb[r]];
    p.per_point[i] = s / static_cast<double>(k);
    sum += p.per_point[i];
  }
  p.layer_mean = sum / static_cast<double>(g.n_points());
  return p;
}

/// Layer mean entropy with neighbour targets relabelled by random
/// permutations, averaged over n_shuffles draws.
inline double shuffled_entropy_baseline(const NeighborGraph& g, std::span<const double> entropy, std::size_t k,
                                        std::size_t n_shuffles, std::uint64_t seed) {
  if (n_shuffles < 1) throw UsageError("shuffled baseline needs at least one shuffle");
  if (entropy.size() != g.n_points()) throw DataError("shuffled baseline: entropy vector length differs from N");
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> perm(g.n_points());
  std::vector<double> permuted(g.n_points());
  double total = 0.0;
  for (std::size_t s = 0; s < n_shuffles; ++s) {
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    fisher_yates(std::span(perm), rng);
    for (std::size_t j = 0; j < perm.size(); ++j) permuted[j] = entropy[perm[j]];
    total += neighborhood_entropy(g, permuted, k).layer_mean;
  }
  return total / static_cast<double>(n_shuffles);
}

}  // namespace dtopo
