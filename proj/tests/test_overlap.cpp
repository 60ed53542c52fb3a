#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>

#include "dtopo/overlap.hpp"
#include "test_support.hpp"

namespace {

using namespace dtopo;

NeighborGraph graph_from_lists(const std::vector<std::vector<std::size_t>>& lists) {
  std::vector<std::size_t> nb;
  for (const auto& l : lists) nb.insert(nb.end(), l.begin(), l.end());
  return {lists.size(), lists.front().size(), nb, std::vector<double>(nb.size(), 1.0)};
}

// Overlap as a dense double sum over N x N adjacency matrices: sum_i sum_j A_ij B_ij / (N k).
std::pair<std::vector<std::size_t>, double> dense_overlap(const NeighborGraph& a,
                                                          const std::function<bool(std::size_t, std::size_t)>& b) {
  const std::size_t n = a.n_points();
  std::vector<std::vector<int>> adj(n, std::vector<int>(n, 0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j : a.neighbors(i)) adj[i][j] = 1;
  std::vector<std::size_t> per_point(n, 0);
  std::size_t total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) per_point[i] += static_cast<std::size_t>(adj[i][j] * (b(i, j) ? 1 : 0));
    total += per_point[i];
  }
  return {per_point, static_cast<double>(total) / static_cast<double>(n * a.k())};
}

TEST(LayerOverlap, IdentityIsOne) {
  const NeighborGraph g = build_knn_graph(synth::uniform_cube(100, 3, 1), 8);
  const OverlapResult r = layer_overlap(g, g);
  EXPECT_EQ(r.chi, 1.0);
  for (std::size_t i = 0; i < 100; ++i) EXPECT_EQ(r.point_chi(i), 1.0);
}

TEST(LayerOverlap, HandEnumeratedExample) {
  const NeighborGraph gl = graph_from_lists({{1}, {0}, {0}});
  const NeighborGraph gm = graph_from_lists({{1}, {2}, {1}});
  const OverlapResult r = layer_overlap(gl, gm);
  EXPECT_EQ(r.per_point_chi(), (std::vector<double>{1.0, 0.0, 0.0}));
  EXPECT_DOUBLE_EQ(r.chi, 1.0 / 3.0);
}

TEST(LayerOverlap, IndependentDataNearChance) {
  const std::size_t n = 2000, k = 10;
  const NeighborGraph a = build_knn_graph(synth::gaussian_cloud(n, 5, 100), k);
  const NeighborGraph b = build_knn_graph(synth::gaussian_cloud(n, 5, 200), k);
  const double chi = layer_overlap(a, b).chi;
  // Per-point shared count is hypergeometric(N-1, k, k).
  const double m = static_cast<double>(n - 1), kk = static_cast<double>(k);
  const double mean = kk / m;
  const double var_hits = kk * (kk / m) * (1 - kk / m) * (m - kk) / (m - 1);
  const double sigma = std::sqrt(var_hits / (kk * kk) / static_cast<double>(n));
  EXPECT_NEAR(chi, mean, 3 * sigma);
}

TEST(LayerOverlap, MatchesDenseDoubleSum) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 8; ++trial) {
    const std::size_t n = 30 + rng() % 270, k = 1 + rng() % 20;
    const NeighborGraph a = build_knn_graph(synth::gaussian_cloud(n, 3, rng()), k);
    const NeighborGraph b = build_knn_graph(synth::gaussian_cloud(n, 3, rng()).scaled(1.0), k);
    std::vector<std::vector<int>> adj_b(n, std::vector<int>(n, 0));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j : b.neighbors(i)) adj_b[i][j] = 1;
    const auto [per_point, chi] = dense_overlap(a, [&](std::size_t i, std::size_t j) { return adj_b[i][j] == 1; });
    const OverlapResult r = layer_overlap(a, b, 4);
    EXPECT_EQ(r.hits, per_point);
    EXPECT_EQ(r.chi, chi);
    EXPECT_EQ(layer_overlap(b, a).chi, r.chi);
  }
}

TEST(LayerOverlap, RejectsMismatchedGraphs) {
  const ActivationMatrix x = synth::uniform_cube(50, 2, 3);
  EXPECT_THROW(layer_overlap(build_knn_graph(x, 4), build_knn_graph(x, 5)), DataError);
  EXPECT_THROW(layer_overlap(build_knn_graph(x, 4), build_knn_graph(synth::uniform_cube(51, 2, 3), 4)), DataError);
}

TEST(LayerOverlap, ValuesAreMultiplesOfOneOverK) {
  const std::size_t k = 7;
  const NeighborGraph a = build_knn_graph(synth::gaussian_cloud(200, 2, 1), k);
  const NeighborGraph b = build_knn_graph(synth::gaussian_cloud(200, 2, 1).scaled(1.0001), k);
  const OverlapResult r = layer_overlap(a, b);
  for (std::size_t i = 0; i < 200; ++i) {
    const double v = r.point_chi(i) * static_cast<double>(k);
    EXPECT_NEAR(v, std::round(v), 1e-12);
    EXPECT_GE(r.point_chi(i), 0.0);
    EXPECT_LE(r.point_chi(i), 1.0);
  }
  const std::vector<double> per_point = r.per_point_chi();
  EXPECT_NEAR(r.chi, std::accumulate(per_point.begin(), per_point.end(), 0.0) / 200.0, 1e-12);
}

TEST(GroundTruthOverlap, Extremes) {
  const NeighborGraph g = build_knn_graph(synth::uniform_cube(40, 2, 9), 5);
  EXPECT_EQ(ground_truth_overlap(g, LabelSet(std::vector<std::int64_t>(40, 3))).chi, 1.0);
  std::vector<std::int64_t> distinct(40);
  std::iota(distinct.begin(), distinct.end(), 0);
  EXPECT_EQ(ground_truth_overlap(g, LabelSet(distinct)).chi, 0.0);
}

TEST(GroundTruthOverlap, HandEnumeratedExample) {
  const NeighborGraph g = graph_from_lists({{1}, {0}, {0}});
  const OverlapResult r = ground_truth_overlap(g, LabelSet({7, 7, 2}));
  EXPECT_EQ(r.per_point_chi(), (std::vector<double>{1.0, 1.0, 0.0}));
  EXPECT_DOUBLE_EQ(r.chi, 2.0 / 3.0);
  EXPECT_EQ(r.pair.second, "gt");
}

TEST(GroundTruthOverlap, MatchesDenseDoubleSumAndRelabelling) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 8; ++trial) {
    const std::size_t n = 20 + rng() % 280, k = 1 + rng() % 15, q = 2 + rng() % 6;
    const NeighborGraph g = build_knn_graph(synth::uniform_cube(n, 4, rng()), k);
    std::vector<std::int64_t> labels(n);
    for (auto& l : labels) l = static_cast<std::int64_t>(rng() % q);
    const auto [per_point, chi] = dense_overlap(g, [&](std::size_t i, std::size_t j) { return labels[i] == labels[j]; });
    const OverlapResult r = ground_truth_overlap(g, LabelSet(labels));
    EXPECT_EQ(r.hits, per_point);
    EXPECT_EQ(r.chi, chi);

    std::vector<std::int64_t> relabelled(labels);
    for (auto& l : relabelled) l = 100 - 3 * l;  // bijective on the used ids
    EXPECT_EQ(ground_truth_overlap(g, LabelSet(relabelled)).hits, r.hits);
  }
  EXPECT_THROW(ground_truth_overlap(build_knn_graph(synth::uniform_cube(10, 2, 1), 2), LabelSet({0, 1})), DataError);
}

TEST(OverlapProfile, ConsecutiveAndFixedReference) {
  const NeighborGraph g = build_knn_graph(synth::uniform_cube(60, 3, 4), 6);
  const std::vector<LayerGraph> layers = {{"a", &g}, {"b", &g}, {"c", &g}, {"d", &g}};
  const auto consecutive = overlap_profile(layers, ProfileReference::consecutive());
  ASSERT_EQ(consecutive.size(), 3u);
  for (const auto& r : consecutive) EXPECT_EQ(r.chi, 1.0);
  EXPECT_EQ(consecutive[1].pair, (std::pair<std::string, std::string>{"b", "c"}));

  const NeighborGraph other = build_knn_graph(synth::uniform_cube(60, 3, 5), 6);
  const std::vector<LayerGraph> mixed = {{"a", &other}, {"out", &g}};
  const auto fixed = overlap_profile(mixed, ProfileReference::fixed_layer(1));
  ASSERT_EQ(fixed.size(), 2u);
  EXPECT_EQ(fixed[1].chi, 1.0);
  EXPECT_LT(fixed[0].chi, 1.0);
}

TEST(OverlapProfile, Errors) {
  const NeighborGraph g = build_knn_graph(synth::uniform_cube(60, 3, 4), 6);
  const NeighborGraph h = build_knn_graph(synth::uniform_cube(60, 3, 4), 5);
  const std::vector<LayerGraph> one = {{"a", &g}};
  EXPECT_THROW(overlap_profile(one, ProfileReference::consecutive()), UsageError);
  EXPECT_THROW(overlap_profile(one, ProfileReference::ground_truth()), UsageError);
  const std::vector<LayerGraph> mixed_k = {{"a", &g}, {"b", &h}};
  EXPECT_THROW(overlap_profile(mixed_k, ProfileReference::consecutive()), DataError);
}

TEST(OverlapProfile, StagedPipelineGroundTruthIncreases) {
  // random -> half-sorted -> label-sorted
  const std::size_t n = 400, dim = 6, q = 4;
  std::vector<std::int64_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<std::int64_t>(i % q);
  const ActivationMatrix noise = synth::gaussian_cloud(n, dim, 77);
  auto stage = [&](double signal, double noise_scale) {
    std::vector<double> v(n * dim);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t t = 0; t < dim; ++t)
        v[i * dim + t] = noise_scale * noise(i, t) + (t == static_cast<std::size_t>(labels[i]) ? signal : 0.0);
    return ActivationMatrix("s", n, dim, v);
  };
  const LabelSet y(labels);
  const std::vector<ActivationMatrix> stages = {stage(0.0, 1.0), stage(1.5, 1.0), stage(5.0, 0.2)};
  std::vector<NeighborGraph> graphs;
  for (const auto& s : stages) graphs.push_back(build_knn_graph(s, 10));
  std::vector<LayerGraph> layers;
  for (std::size_t s = 0; s < graphs.size(); ++s) layers.push_back({"s" + std::to_string(s), &graphs[s]});
  const auto profile = overlap_profile(layers, ProfileReference::ground_truth(), &y);
  ASSERT_EQ(profile.size(), 3u);
  for (std::size_t s = 0; s < 3; ++s) {
    const auto [_, chi] = dense_overlap(graphs[s], [&](std::size_t i, std::size_t j) { return labels[i] == labels[j]; });
    EXPECT_EQ(profile[s].chi, chi);
  }
  EXPECT_LT(profile[0].chi, profile[1].chi);
  EXPECT_LT(profile[1].chi, profile[2].chi);
}

TEST(ChiHistogram, Binning) {
  OverlapResult ones;
  ones.k = 4;
  ones.hits = {4, 4, 4};
  for (std::size_t bins : {1u, 3u, 10u}) {
    const Histogram h = chi_histogram(ones, bins);
    EXPECT_EQ(h.counts.back(), 3u);
    EXPECT_EQ(std::accumulate(h.counts.begin(), h.counts.end(), std::size_t{0}), 3u);
    EXPECT_EQ(h.edges.front(), 0.0);
    EXPECT_EQ(h.edges.back(), 1.0);
  }
  OverlapResult split;
  split.k = 5;
  split.hits = {0, 0, 5, 5};
  EXPECT_EQ(chi_histogram(split, 2).counts, (std::vector<std::size_t>{2, 2}));
  EXPECT_THROW(chi_histogram(split, 0), UsageError);
}

TEST(ChiHistogram, BimodalMatchesDirectBinning) {
  OverlapResult r;
  r.k = 30;
  std::mt19937_64 rng(2);
  for (int i = 0; i < 1000; ++i) r.hits.push_back(i % 2 == 0 ? rng() % 4 : 26 + rng() % 5);
  const std::size_t bins = 10;
  const Histogram h = chi_histogram(r, bins);
  std::vector<std::size_t> direct(bins, 0);
  for (std::size_t hit : r.hits) {
    // Direct binning on the rational value hit/k with the last edge closed.
    std::size_t b = 0;
    while (b + 1 < bins && hit * bins >= (b + 1) * r.k) ++b;
    ++direct[b];
  }
  EXPECT_EQ(h.counts, direct);
  EXPECT_EQ(std::max_element(h.counts.begin(), h.counts.begin() + 5) - h.counts.begin(), 0);
  EXPECT_GE(std::max_element(h.counts.begin() + 5, h.counts.end()) - h.counts.begin(), 8);
}

}  // namespace
