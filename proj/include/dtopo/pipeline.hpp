#pragma once

// Batch driver behind the command-line tool: configuration, cached kNN
// graphs per layer, and the overlap / cluster / diagnostics reports.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "json.hpp"

#include "dtopo/dataset.hpp"
#include "dtopo/density_peaks.hpp"
#include "dtopo/entropy.hpp"
#include "dtopo/hash.hpp"
#include "dtopo/knn_graph.hpp"
#include "dtopo/overlap.hpp"
#include "dtopo/similarity.hpp"
#include "dtopo/topography.hpp"

namespace dtopo {

inline constexpr const char* kToolVersion = "0.1.0";

struct LayerInput {
  std::string tag;
  std::filesystem::path path;
};

struct PipelineConfig {
  std::vector<LayerInput> layers;
  std::optional<std::filesystem::path> labels;
  std::optional<std::filesystem::path> macro_labels;
  std::optional<std::filesystem::path> images;
  std::size_t k = kDefaultK;
  std::vector<double> z_values = {1.0};
  std::vector<std::size_t> sweep_k;
  std::vector<std::size_t> sweep_n;
  /// Tags of layers used as fixed overlap references.
  std::vector<std::string> checkpoints;
  std::size_t histogram_bins = 20;
  std::size_t sample_classes = 0;
  std::size_t sample_per_class = 0;
  std::vector<double> cka_fractions = {0.1, 0.2, 0.5, 1.0, 2.0};
  /// Gaussian CKA builds N x N Gram matrices; larger layers are subsampled.
  std::size_t cka_max_points = 4000;
  std::size_t n_hubs = 10;
  std::size_t n_shuffles = 100;
  std::uint64_t seed = 0;

  // Run environment; never part of the config hash.
  std::filesystem::path out = "dtopo-out";
  std::optional<std::filesystem::path> cache;
  unsigned threads = 1;

  void validate() const {
    if (layers.empty()) throw UsageError("no layers given (use --layer TAG=PATH or a [layers] config section)");
    std::set<std::string> tags;
    for (const LayerInput& l : layers) {
      if (l.tag.empty()) throw UsageError("layer tag must not be empty");
      if (l.tag.find_first_of("/\\,") != std::string::npos) throw UsageError("layer tag '" + l.tag + "' contains / \\ or ,");
      if (!tags.insert(l.tag).second) throw UsageError("duplicate layer tag '" + l.tag + "'");
    }
    for (const std::string& c : checkpoints)
      if (!tags.count(c)) throw UsageError("checkpoint '" + c + "' is not a layer tag");
    if (k < 1) throw UsageError("k must be at least 1");
    if (z_values.empty()) throw UsageError("Z list is empty");
    for (double z : z_values)
      if (!(z >= 0.0)) throw UsageError("Z must be non-negative");
    for (std::size_t v : sweep_k)
      if (v < 1) throw UsageError("k sweep values must be at least 1");
    if (!sweep_n.empty() && !labels) throw UsageError("an N sweep needs --labels");
    if (histogram_bins < 1) throw UsageError("histogram needs at least one bin");
    if ((sample_classes == 0) != (sample_per_class == 0))
      throw UsageError("sample_classes and sample_per_class must be given together");
    if (sample_classes > 0 && !labels) throw UsageError("stratified sampling needs --labels");
    for (double f : cka_fractions)
      if (!(f > 0.0)) throw UsageError("CKA bandwidth fractions must be positive");
    if (cka_max_points < 3) throw UsageError("cka_max_points must be at least 3");
    if (n_shuffles < 1) throw UsageError("shuffles must be at least 1");
  }

  /// Everything that affects results, one key per line.
  std::string canonical() const;
  std::string hash() const {
    ContentHash h;
    h.update(canonical());
    return h.hex();
  }
};

// ---- text helpers -----------------------------------------------------------

/// Shortest text that parses back to the same double.
inline std::string format_real(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

/// Short form used in file names, e.g. 0.5 -> "0.5", 2 -> "2".
inline std::string format_short(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

inline std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return {};
  return s.substr(first, s.find_last_not_of(" \t\r\n") - first + 1);
}

inline std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <class T>
T parse_number(const std::string& text, const std::string& what) {
  const std::string t = trim(text);
  T value{};
  const auto [end, ec] = std::from_chars(t.data(), t.data() + t.size(), value);
  if (ec != std::errc() || end != t.data() + t.size() || t.empty())
    throw UsageError(what + ": cannot parse '" + text + "' as a number");
  return value;
}

template <class T>
std::vector<T> parse_list(const std::string& text, const std::string& what) {
  std::vector<T> out;
  for (const std::string& item : split_list(text)) out.push_back(parse_number<T>(item, what));
  return out;
}

inline LayerInput parse_layer_spec(const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos) throw UsageError("layer spec '" + spec + "' must look like TAG=PATH");
  return {trim(spec.substr(0, eq)), trim(spec.substr(eq + 1))};
}

inline std::string PipelineConfig::canonical() const {
  std::ostringstream c;
  auto list = [&](const auto& values, auto fmt) {
    std::string s;
    for (const auto& v : values) s += (s.empty() ? "" : ",") + fmt(v);
    return s;
  };
  auto size_fmt = [](std::size_t v) { return std::to_string(v); };
  auto path_or = [](const std::optional<std::filesystem::path>& p) { return p ? p->generic_string() : std::string{}; };
  for (const LayerInput& l : layers) c << "layer=" << l.tag << ':' << l.path.generic_string() << '\n';
  c << "labels=" << path_or(labels) << '\n';
  c << "macro_labels=" << path_or(macro_labels) << '\n';
  c << "images=" << path_or(images) << '\n';
  c << "k=" << k << '\n';
  c << "z=" << list(z_values, format_real) << '\n';
  c << "sweep_k=" << list(sweep_k, size_fmt) << '\n';
  c << "sweep_n=" << list(sweep_n, size_fmt) << '\n';
  c << "checkpoints=" << list(checkpoints, [](const std::string& s) { return s; }) << '\n';
  c << "bins=" << histogram_bins << '\n';
  c << "sample=" << sample_classes << 'x' << sample_per_class << '\n';
  c << "cka_fractions=" << list(cka_fractions, format_real) << '\n';
  c << "cka_max_points=" << cka_max_points << '\n';
  c << "hubs=" << n_hubs << '\n';
  c << "shuffles=" << n_shuffles << '\n';
  c << "seed=" << seed << '\n';
  return c.str();
}

/// Reads an INI file with sections [general] [layers] [overlap] [cluster]
/// [diagnostics]. Relative paths are taken relative to the file.
inline PipelineConfig load_config_file(const std::filesystem::path& path) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::ini_parser::read_ini(path.string(), tree);
  } catch (const pt::ini_parser_error& e) {
    throw UsageError("config: " + std::string(e.what()));
  }
  const std::filesystem::path base = path.parent_path();
  auto resolve = [&](const std::string& p) {
    const std::filesystem::path v(trim(p));
    return v.is_absolute() ? v : base / v;
  };

  PipelineConfig cfg;
  using Setter = std::function<void(const std::string&)>;
  const std::map<std::string, std::map<std::string, Setter>> known = {
      {"general",
       {{"k", [&](const std::string& v) { cfg.k = parse_number<std::size_t>(v, "general.k"); }},
        {"seed", [&](const std::string& v) { cfg.seed = parse_number<std::uint64_t>(v, "general.seed"); }},
        {"out", [&](const std::string& v) { cfg.out = resolve(v); }},
        {"threads", [&](const std::string& v) { cfg.threads = parse_number<unsigned>(v, "general.threads"); }},
        {"cache", [&](const std::string& v) { cfg.cache = resolve(v); }},
        {"labels", [&](const std::string& v) { cfg.labels = resolve(v); }},
        {"macro_labels", [&](const std::string& v) { cfg.macro_labels = resolve(v); }},
        {"images", [&](const std::string& v) { cfg.images = resolve(v); }},
        {"sample_classes",
         [&](const std::string& v) { cfg.sample_classes = parse_number<std::size_t>(v, "general.sample_classes"); }},
        {"sample_per_class",
         [&](const std::string& v) { cfg.sample_per_class = parse_number<std::size_t>(v, "general.sample_per_class"); }}}},
      {"overlap",
       {{"sweep_k", [&](const std::string& v) { cfg.sweep_k = parse_list<std::size_t>(v, "overlap.sweep_k"); }},
        {"sweep_n", [&](const std::string& v) { cfg.sweep_n = parse_list<std::size_t>(v, "overlap.sweep_n"); }},
        {"checkpoints", [&](const std::string& v) { cfg.checkpoints = split_list(v); }},
        {"bins", [&](const std::string& v) { cfg.histogram_bins = parse_number<std::size_t>(v, "overlap.bins"); }}}},
      {"cluster", {{"z", [&](const std::string& v) { cfg.z_values = parse_list<double>(v, "cluster.z"); }}}},
      {"diagnostics",
       {{"cka_fractions",
         [&](const std::string& v) { cfg.cka_fractions = parse_list<double>(v, "diagnostics.cka_fractions"); }},
        {"cka_max_points",
         [&](const std::string& v) { cfg.cka_max_points = parse_number<std::size_t>(v, "diagnostics.cka_max_points"); }},
        {"hubs", [&](const std::string& v) { cfg.n_hubs = parse_number<std::size_t>(v, "diagnostics.hubs"); }},
        {"shuffles", [&](const std::string& v) { cfg.n_shuffles = parse_number<std::size_t>(v, "diagnostics.shuffles"); }}}},
  };

  for (const auto& [section, entries] : tree) {
    if (section == "layers") {
      for (const auto& [tag, value] : entries) cfg.layers.push_back({trim(tag), resolve(value.data())});
      continue;
    }
    const auto s = known.find(section);
    if (s == known.end()) throw UsageError("config: unknown section [" + section + "]");
    for (const auto& [key, value] : entries) {
      const auto setter = s->second.find(key);
      if (setter == s->second.end()) throw UsageError("config: unknown key '" + key + "' in [" + section + "]");
      setter->second(value.data());
    }
  }
  return cfg;
}

// ---- outputs ----------------------------------------------------------------

/// Writes report files into one directory and remembers their content hashes.
class OutputDir {
 public:
  OutputDir(std::filesystem::path dir, std::string config_hash) : dir_(std::move(dir)), config_hash_(std::move(config_hash)) {
    std::error_code ec;
    std::filesystem::create_directories(dir_, ec);
    if (ec) throw DataError("cannot create output directory " + dir_.string() + ": " + ec.message());
  }

  const std::filesystem::path& path() const { return dir_; }

  void write_bytes(const std::string& name, const std::string& bytes) {
    std::ofstream out(dir_ / name, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("cannot write " + (dir_ / name).string());
    ContentHash h;
    h.update(bytes);
    files_[name] = h.hex();
  }

  /// CSV with the config-hash line and a header row.
  void write_csv(const std::string& name, const std::string& header, const std::vector<std::string>& rows) {
    std::string text = "# config_hash=" + config_hash_ + "\n" + header + "\n";
    for (const std::string& r : rows) text += r + "\n";
    write_bytes(name, text);
  }

  template <class T>
  void write_npy(const std::string& name, std::span<const T> values, std::vector<std::size_t> shape, npy::Dtype dtype) {
    std::ostringstream out;
    npy::write(out, npy::make_array<T>(values, std::move(shape), dtype));
    write_bytes(name, out.str());
  }

  const std::map<std::string, std::string>& files() const { return files_; }

 private:
  std::filesystem::path dir_;
  std::string config_hash_;
  std::map<std::string, std::string> files_;
};

inline std::string csv_row(std::initializer_list<std::string> cells) {
  std::string row;
  for (const std::string& c : cells) row += (row.empty() ? "" : ",") + c;
  return row;
}

/// Re-throws a module error with the failing stage prepended.
template <class F>
auto in_stage(const std::string& stage, F&& body) -> decltype(body()) {
  try {
    return body();
  } catch (const UsageError& e) {
    throw UsageError(stage + ": " + e.what());
  } catch (const DataError& e) {
    throw DataError(stage + ": " + e.what());
  } catch (const NumericalError& e) {
    throw NumericalError(stage + ": " + e.what());
  }
}

// ---- pipeline ---------------------------------------------------------------

class Pipeline {
 public:
  explicit Pipeline(PipelineConfig cfg) : cfg_(std::move(cfg)), out_((cfg_.validate(), cfg_.out), cfg_.hash()) { load_inputs(); }

  const PipelineConfig& config() const { return cfg_; }
  const OutputDir& outputs() const { return out_; }

  void run_overlap() {
    if (layers_.size() < 2 && !labels_) throw UsageError("overlap needs at least 2 layers or --labels");
    std::vector<LayerGraph> lg = layer_graphs(cfg_.k);

    if (labels_) {
      const auto gt = in_stage("overlap gt", [&] { return overlap_profile(lg, ProfileReference::ground_truth(), &*labels_); });
      std::vector<std::string> rows, hist;
      std::vector<double> points;
      for (const OverlapResult& r : gt) {
        rows.push_back(csv_row({r.pair.first, format_real(r.chi)}));
        const Histogram h = chi_histogram(r, cfg_.histogram_bins);
        for (std::size_t b = 0; b < h.counts.size(); ++b)
          hist.push_back(csv_row({r.pair.first, format_real(h.edges[b]), format_real(h.edges[b + 1]), std::to_string(h.counts[b])}));
        const auto pp = r.per_point_chi();
        points.insert(points.end(), pp.begin(), pp.end());
      }
      out_.write_csv("overlap_gt.csv", "layer,chi", rows);
      out_.write_csv("histogram_gt.csv", "layer,bin_lo,bin_hi,count", hist);
      out_.write_npy<double>("overlap_gt_points.npy", points, {gt.size(), n_points()}, npy::f8);
    }
    if (layers_.size() >= 2) {
      write_reference_profile("overlap_out.csv", lg, layers_.size() - 1);
      for (const std::string& c : cfg_.checkpoints) write_reference_profile("overlap_ref_" + c + ".csv", lg, index_of(c));
      const auto cons = in_stage("overlap consecutive", [&] { return overlap_profile(lg, ProfileReference::consecutive()); });
      std::vector<std::string> rows;
      for (const OverlapResult& r : cons) rows.push_back(csv_row({r.pair.first, r.pair.second, format_real(r.chi)}));
      out_.write_csv("overlap_consecutive.csv", "layer,next,chi", rows);
    }
    if (!cfg_.sweep_k.empty()) {
      std::vector<std::string> rows;
      for (std::size_t k : cfg_.sweep_k) append_sweep_rows(rows, std::to_string(k), layer_graphs(k), labels_ ? &*labels_ : nullptr);
      out_.write_csv("overlap_sweep_k.csv", "k,layer,chi_gt,chi_out", rows);
    }
    if (!cfg_.sweep_n.empty()) run_sweep_n();
  }

  void run_cluster() {
    std::vector<std::string> summary;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const ActivationMatrix& x = layers_[l];
      const std::string& tag = x.layer_id();
      const std::string stage = "cluster[" + tag + "]";
      if (cfg_.k < 2) throw UsageError(stage + ": density peaks need k >= 2");
      const NeighborGraph& g = graph(l, cfg_.k);
      const double d = in_stage(stage + " intrinsic dimension", [&] { return estimate_intrinsic_dimension(g); });
      const DensityEstimate de = in_stage(stage + " density", [&] { return estimate_log_density(g, d, cfg_.k); });
      const std::vector<std::size_t> maxima = find_density_maxima(g, de);
      const PeakPartition raw = in_stage(stage + " assignment", [&] { return assign_to_peaks(x, g, de, maxima); });
      const SaddleTable saddles = in_stage(stage + " saddles", [&] { return find_saddle_points(x, g, de, raw); });
      out_.write_npy<double>("density_" + tag + ".npy", de.log_density, {de.n_points()}, npy::f8);

      for (std::size_t zi = 0; zi < cfg_.z_values.size(); ++zi) {
        const double z = cfg_.z_values[zi];
        const std::string suffix = tag + "_z" + format_short(z);
        const MergedPeaks m = in_stage(stage + " merge", [&] { return merge_indistinguishable_peaks(raw, saddles, de, z); });
        const PeakPartition& p = m.partition;
        std::vector<std::int64_t> labels(p.label.begin(), p.label.end());
        out_.write_npy<std::int64_t>("peaks_" + suffix + ".npy", labels, {labels.size()}, npy::i8);

        std::vector<std::string> topo;
        const auto sizes = p.sizes();
        for (std::size_t a = 0; a < p.n_peaks(); ++a)
          topo.push_back(csv_row({"peak", std::to_string(a), "", std::to_string(p.maxima[a]), format_real(p.peak_log_density[a]),
                                  std::to_string(sizes[a])}));
        for (const auto& [key, s] : m.saddles.entries())
          topo.push_back(csv_row({"saddle", std::to_string(key.first), std::to_string(key.second), std::to_string(s.point),
                                  format_real(s.log_density), ""}));
        out_.write_csv("topography_" + suffix + ".csv", "kind,alpha,beta,point,log_density,size", topo);

        const Dendrogram dendro = build_dendrogram(p, m.saddles, de);
        out_.write_bytes("dendrogram_" + suffix + ".nwk", to_newick(dendro, 12));

        std::string ari_macro, ari_class;
        if (labels_) {
          std::ostringstream report;
          write_peak_report(report, peak_composition(p, *labels_, default_min_count(*labels_)));
          out_.write_bytes("composition_" + suffix + ".txt", report.str());
          ari_class = format_real(adjusted_rand_index(std::span<const std::size_t>(p.label), labels_->labels()));
        }
        if (macro_) ari_macro = format_real(adjusted_rand_index(std::span<const std::size_t>(p.label), macro_->labels()));
        summary.push_back(csv_row({tag, format_real(z), format_real(d), std::to_string(de.flagged.size()),
                                   std::to_string(maxima.size()), std::to_string(p.n_peaks()), ari_macro, ari_class}));
      }
    }
    out_.write_csv("clusters.csv", "layer,z,intrinsic_dim,n_duplicates,n_maxima,n_peaks,ari_macro,ari_class", summary);
  }

  void run_diagnostics() {
    std::vector<std::string> id_rows, hub_rows, entropy_rows, cka_rows;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const std::string& tag = layers_[l].layer_id();
      const std::string stage = "diagnostics[" + tag + "]";
      const NeighborGraph& g = graph(l, cfg_.k);
      if (g.k() >= 2) id_rows.push_back(csv_row({tag, format_real(in_stage(stage, [&] { return estimate_intrinsic_dimension(g); }))}));
      const auto hubs = top_hubs(g, cfg_.n_hubs);
      for (std::size_t r = 0; r < hubs.size(); ++r)
        hub_rows.push_back(csv_row({tag, std::to_string(r + 1), std::to_string(hubs[r].point), std::to_string(hubs[r].in_degree)}));
      if (entropies_) {
        const EntropyProfile p = in_stage(stage + " entropy", [&] { return neighborhood_entropy(g, *entropies_, cfg_.k); });
        const double base = shuffled_entropy_baseline(g, *entropies_, cfg_.k, cfg_.n_shuffles,
                                                      substream_seed(cfg_.seed, "shuffle-baseline/" + tag));
        entropy_rows.push_back(csv_row({tag, format_real(p.layer_mean), format_real(base)}));
      }
    }
    out_.write_csv("intrinsic_dim.csv", "layer,intrinsic_dim", id_rows);
    out_.write_csv("hubs.csv", "layer,rank,point,in_degree", hub_rows);
    if (entropies_) out_.write_csv("entropy.csv", "layer,mean_entropy,shuffled_baseline", entropy_rows);

    if (layers_.size() >= 2) {
      const std::vector<std::size_t> subset = cka_subset();
      auto pick = [&](const ActivationMatrix& x) { return subset.empty() ? x : x.select_rows(subset); };
      const ActivationMatrix ref = pick(layers_.back());
      for (const ActivationMatrix& layer : layers_) {
        const std::string stage = "cka[" + layer.layer_id() + "]";
        const ActivationMatrix x = pick(layer);
        cka_rows.push_back(csv_row({layer.layer_id(), ref.layer_id(), "linear", "",
                                    format_real(in_stage(stage, [&] { return linear_cka(x, ref); }))}));
        for (double f : cfg_.cka_fractions)
          cka_rows.push_back(csv_row({layer.layer_id(), ref.layer_id(), "gaussian", format_real(f),
                                      format_real(in_stage(stage, [&] { return gaussian_cka(x, ref, f, cfg_.threads); }))}));
      }
      out_.write_csv("cka.csv", "layer,reference,kind,fraction,value", cka_rows);
    }
  }

  /// Run manifest: config echo, input hashes and every output's hash.
  void write_manifest(const std::string& command) {
    nlohmann::ordered_json m;
    m["tool"] = "dtopo";
    m["version"] = kToolVersion;
    m["command"] = command;
    m["config_hash"] = cfg_.hash();
    m["config"] = cfg_.canonical();
    m["n_points"] = n_points();
    for (const ActivationMatrix& x : layers_)
      m["inputs"]["layers"].push_back({{"tag", x.layer_id()}, {"n", x.n_points()}, {"d", x.n_features()}, {"content_hash", x.content_hash()}});
    if (labels_) m["inputs"]["labels_hash"] = hash_labels(*labels_);
    if (macro_) m["inputs"]["macro_labels_hash"] = hash_labels(*macro_);
    if (!sample_index_.empty()) {
      ContentHash h;
      for (std::size_t i : sample_index_) h.update_value(static_cast<std::uint64_t>(i));
      m["inputs"]["sample_index_hash"] = h.hex();
    }
    for (const auto& [name, hash] : out_.files()) m["outputs"][name] = hash;
    std::ofstream(out_.path() / "manifest.json", std::ios::binary) << m.dump(2) << '\n';
  }

 private:
  static std::string hash_labels(const LabelSet& y) {
    ContentHash h;
    for (std::int64_t v : y.labels()) h.update_value(v);
    return h.hex();
  }

  std::size_t n_points() const { return layers_.front().n_points(); }

  std::size_t index_of(const std::string& tag) const {
    for (std::size_t l = 0; l < layers_.size(); ++l)
      if (layers_[l].layer_id() == tag) return l;
    throw UsageError("unknown layer '" + tag + "'");
  }

  void load_inputs() {
    for (const LayerInput& in : cfg_.layers)
      layers_.push_back(in_stage("load layer '" + in.tag + "'", [&] { return load_activation_matrix(in.path, in.tag); }));
    for (const ActivationMatrix& x : layers_)
      if (x.n_points() != layers_.front().n_points())
        throw DataError("layer '" + x.layer_id() + "' has " + std::to_string(x.n_points()) + " points, layer '" +
                        layers_.front().layer_id() + "' has " + std::to_string(layers_.front().n_points()));
    if (cfg_.labels) {
      labels_ = in_stage("load labels", [&] { return load_labels(*cfg_.labels); });
      require_paired(layers_.front(), *labels_);
    }
    if (cfg_.macro_labels) {
      macro_ = in_stage("load macro labels", [&] { return load_labels(*cfg_.macro_labels); });
      require_paired(layers_.front(), *macro_);
    }
    if (cfg_.images) {
      entropies_ = in_stage("load images", [&] { return load_image_entropies(*cfg_.images); });
      if (entropies_->size() != n_points())
        throw DataError("images: " + std::to_string(entropies_->size()) + " entries for " + std::to_string(n_points()) + " points");
    }
    if (cfg_.sample_classes > 0) {
      const SampleSpec spec{cfg_.sample_classes, cfg_.sample_per_class, substream_seed(cfg_.seed, "subsample")};
      sample_index_ = in_stage("subsample", [&] { return stratified_indices(*labels_, spec); });
      for (ActivationMatrix& x : layers_) x = x.select_rows(sample_index_);
      labels_ = labels_->select(sample_index_);
      if (macro_) macro_ = macro_->select(sample_index_);
      if (entropies_) {
        std::vector<double> kept;
        for (std::size_t i : sample_index_) kept.push_back((*entropies_)[i]);
        entropies_ = std::move(kept);
      }
    }
    cfg_.validate();
    const std::size_t k_max = largest_k();
    if (k_max >= n_points())
      throw UsageError("k=" + std::to_string(k_max) + " must be below the number of points N=" + std::to_string(n_points()));
  }

  std::size_t largest_k() const {
    std::size_t k = cfg_.k;
    for (std::size_t v : cfg_.sweep_k) k = std::max(k, v);
    return k;
  }

  /// Graph for layer l truncated to k; one exact build per layer at the largest k.
  const NeighborGraph& graph(std::size_t l, std::size_t k) {
    auto& full = graphs_[l];
    if (!full) {
      const ActivationMatrix& x = layers_[l];
      const std::size_t k_max = largest_k();
      const std::string hash = x.content_hash();
      const auto stem = cfg_.cache ? std::optional(*cfg_.cache / x.layer_id()) : std::nullopt;
      if (stem) full = load_graph_cache(*stem, hash, k_max);
      if (!full) {
        full = in_stage("knn[" + x.layer_id() + "]", [&] { return build_knn_graph(x, k_max, cfg_.threads); });
        if (stem) {
          std::filesystem::create_directories(*cfg_.cache);
          save_graph_cache(*stem, *full, hash);
        }
      }
    }
    if (k == full->k()) return *full;
    auto& slot = truncated_[{l, k}];
    if (!slot) slot = full->prefix(k);
    return *slot;
  }

  std::vector<LayerGraph> layer_graphs(std::size_t k) {
    std::vector<LayerGraph> out;
    for (std::size_t l = 0; l < layers_.size(); ++l) out.push_back({layers_[l].layer_id(), &graph(l, k)});
    return out;
  }

  void write_reference_profile(const std::string& name, const std::vector<LayerGraph>& lg, std::size_t ref) {
    const auto prof = in_stage("overlap " + name, [&] { return overlap_profile(lg, ProfileReference::fixed_layer(ref), nullptr, cfg_.threads); });
    std::vector<std::string> rows;
    for (const OverlapResult& r : prof) rows.push_back(csv_row({r.pair.first, r.pair.second, format_real(r.chi)}));
    out_.write_csv(name, "layer,reference,chi", rows);
  }

  void append_sweep_rows(std::vector<std::string>& rows, const std::string& key, const std::vector<LayerGraph>& lg,
                         const LabelSet* y) {
    std::vector<OverlapResult> gt, out;
    if (y) gt = overlap_profile(lg, ProfileReference::ground_truth(), y);
    if (lg.size() >= 2) out = overlap_profile(lg, ProfileReference::fixed_layer(lg.size() - 1), nullptr, cfg_.threads);
    for (std::size_t l = 0; l < lg.size(); ++l)
      rows.push_back(csv_row({key, lg[l].tag, y ? format_real(gt[l].chi) : "", out.empty() ? "" : format_real(out[l].chi)}));
  }

  /// Profiles on class-balanced subsamples of size N (all classes kept).
  void run_sweep_n() {
    std::vector<std::string> rows;
    const std::size_t q = labels_->n_classes();
    for (std::size_t n : cfg_.sweep_n) {
      const std::string stage = "sweep N=" + std::to_string(n);
      const std::size_t per_class = n / q;
      if (per_class < 1) throw UsageError(stage + ": fewer points than classes");
      const SampleSpec spec{q, per_class, substream_seed(cfg_.seed, "sweep-n/" + std::to_string(n))};
      const std::vector<std::size_t> idx = in_stage(stage, [&] { return stratified_indices(*labels_, spec); });
      if (cfg_.k >= idx.size()) throw UsageError(stage + ": k must be below the subsample size");
      const LabelSet y = labels_->select(idx);
      std::vector<NeighborGraph> graphs;
      for (const ActivationMatrix& x : layers_) graphs.push_back(build_knn_graph(x.select_rows(idx), cfg_.k, cfg_.threads));
      std::vector<LayerGraph> lg;
      for (std::size_t l = 0; l < layers_.size(); ++l) lg.push_back({layers_[l].layer_id(), &graphs[l]});
      append_sweep_rows(rows, std::to_string(idx.size()), lg, &y);
    }
    out_.write_csv("overlap_sweep_n.csv", "n,layer,chi_gt,chi_out", rows);
  }

  std::vector<std::size_t> cka_subset() const {
    if (n_points() <= cfg_.cka_max_points) return {};
    std::vector<std::size_t> idx(n_points());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::mt19937_64 rng(substream_seed(cfg_.seed, "cka-subset"));
    fisher_yates(std::span(idx), rng);
    idx.resize(cfg_.cka_max_points);
    std::sort(idx.begin(), idx.end());
    return idx;
  }

  PipelineConfig cfg_;
  OutputDir out_;
  std::vector<ActivationMatrix> layers_;
  std::optional<LabelSet> labels_;
  std::optional<LabelSet> macro_;
  std::optional<std::vector<double>> entropies_;
  std::vector<std::size_t> sample_index_;
  std::map<std::size_t, std::optional<NeighborGraph>> graphs_;
  std::map<std::pair<std::size_t, std::size_t>, std::optional<NeighborGraph>> truncated_;
};

}  // namespace dtopo
