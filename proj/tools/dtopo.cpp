// dtopo: neighbourhood overlap and density topography of layer activations.
//
//   dtopo overlap|cluster|diagnostics|all [--config FILE] [--layer TAG=PATH ...]
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

#include <CLI11.hpp>
#include <iostream>

#include "dtopo/pipeline.hpp"

namespace {

struct Flags {
  std::string config;
  std::vector<std::string> layers;
  std::string labels, macro_labels, images, out, cache;
  std::size_t k = 0;
  double z = 0.0;
  std::uint64_t seed = 0;
  unsigned threads = 0;
  std::string sweep_k, sweep_z, sweep_n;
  std::vector<std::string> checkpoints;
  std::size_t bins = 0;
  std::string cka_fractions;
};

struct Options {
  CLI::Option *k, *z, *seed, *threads, *bins;
};

Options add_flags(CLI::App& cmd, Flags& f) {
  cmd.add_option("--config", f.config, "INI file with [general] [layers] [overlap] [cluster] [diagnostics]");
  cmd.add_option("--layer", f.layers, "Layer activations as TAG=PATH.npy, in pipeline order (repeatable)");
  cmd.add_option("--labels", f.labels, "Class labels (.npy, int)");
  cmd.add_option("--macro-labels", f.macro_labels, "Coarse labels for the macro ARI profile (.npy, int)");
  cmd.add_option("--images", f.images, "uint8 image stack (N,H,W[,C]) or 1-D per-image entropies (.npy)");
  cmd.add_option("--out", f.out, "Output directory");
  cmd.add_option("--cache", f.cache, "Directory for cached kNN graphs");
  Options o;
  o.k = cmd.add_option("--k", f.k, "Neighbours per point (default 30)");
  o.z = cmd.add_option("--z", f.z, "Merge confidence Z (default 1)");
  o.seed = cmd.add_option("--seed", f.seed, "Seed for subsampling and shuffles");
  o.threads = cmd.add_option("--threads", f.threads, "Worker threads; results do not depend on it");
  cmd.add_option("--sweep-k", f.sweep_k, "Comma-separated k values for overlap profiles");
  cmd.add_option("--sweep-z", f.sweep_z, "Comma-separated Z values for clustering");
  cmd.add_option("--sweep-n", f.sweep_n, "Comma-separated subsample sizes for overlap profiles");
  cmd.add_option("--checkpoint", f.checkpoints, "Layer tag used as a fixed overlap reference (repeatable)");
  o.bins = cmd.add_option("--bins", f.bins, "Histogram bins for per-point overlap");
  cmd.add_option("--cka-fractions", f.cka_fractions, "Comma-separated Gaussian CKA bandwidth fractions");
  return o;
}

dtopo::PipelineConfig build_config(const Flags& f, const Options& o) {
  dtopo::PipelineConfig cfg = f.config.empty() ? dtopo::PipelineConfig{} : dtopo::load_config_file(f.config);
  if (!f.layers.empty()) {
    cfg.layers.clear();
    for (const std::string& spec : f.layers) cfg.layers.push_back(dtopo::parse_layer_spec(spec));
  }
  if (!f.labels.empty()) cfg.labels = f.labels;
  if (!f.macro_labels.empty()) cfg.macro_labels = f.macro_labels;
  if (!f.images.empty()) cfg.images = f.images;
  if (!f.out.empty()) cfg.out = f.out;
  if (!f.cache.empty()) cfg.cache = f.cache;
  if (o.k->count()) cfg.k = f.k;
  if (o.z->count()) cfg.z_values = {f.z};
  if (!f.sweep_z.empty()) cfg.z_values = dtopo::parse_list<double>(f.sweep_z, "--sweep-z");
  if (o.seed->count()) cfg.seed = f.seed;
  if (o.threads->count()) cfg.threads = f.threads;
  if (cfg.threads == 0) cfg.threads = 1;
  if (!f.sweep_k.empty()) cfg.sweep_k = dtopo::parse_list<std::size_t>(f.sweep_k, "--sweep-k");
  if (!f.sweep_n.empty()) cfg.sweep_n = dtopo::parse_list<std::size_t>(f.sweep_n, "--sweep-n");
  if (!f.checkpoints.empty()) cfg.checkpoints = f.checkpoints;
  if (o.bins->count()) cfg.histogram_bins = f.bins;
  if (!f.cka_fractions.empty()) cfg.cka_fractions = dtopo::parse_list<double>(f.cka_fractions, "--cka-fractions");
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neighbourhood overlap and density-peak topography of layer activations"};
  app.require_subcommand(1, 1);
  Flags flags;
  std::map<std::string, Options> options;
  for (const char* verb : {"overlap", "cluster", "diagnostics", "all"}) {
    static const std::map<std::string, std::string> help = {
        {"overlap", "Overlap profiles against labels, output layer, neighbours and checkpoints"},
        {"cluster", "Density peaks, saddles, dendrograms, composition and ARI per layer"},
        {"diagnostics", "Intrinsic dimension, hubs, neighbourhood entropy and CKA"},
        {"all", "Run overlap, cluster and diagnostics"}};
    options[verb] = add_flags(*app.add_subcommand(verb, help.at(verb)), flags);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  const std::string verb = app.get_subcommands().front()->get_name();
  try {
    dtopo::Pipeline run(build_config(flags, options.at(verb)));
    if (verb == "overlap" || verb == "all") run.run_overlap();
    if (verb == "cluster" || verb == "all") run.run_cluster();
    if (verb == "diagnostics" || verb == "all") run.run_diagnostics();
    run.write_manifest(verb);
  } catch (const dtopo::UsageError& e) {
    std::cerr << "dtopo: usage error: " << e.what() << '\n';
    return 1;
  } catch (const dtopo::DataError& e) {
    std::cerr << "dtopo: data error: " << e.what() << '\n';
    return 2;
  } catch (const dtopo::NumericalError& e) {
    std::cerr << "dtopo: numerical failure: " << e.what() << '\n';
    return 3;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "dtopo: data error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
