// sinkgate: batch driver for the sink analysis and gating pipelines.

#include <cstdlib>
#include <iostream>

#include "CLI11.hpp"
#include "sinkgate/cli/experiment.hpp"
#include "sinkgate/numerics/error.hpp"

namespace cli = sinkgate::cli;

namespace {

struct Common {
  std::string config, out, precision, data, backbone;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "experiment config (JSON)")->check(CLI::ExistingFile);
  app->add_option("--seed", c.seed, "run seed");
  app->add_option("--out", c.out, "output directory");
  app->add_option("--workers", c.workers, "worker threads")->check(CLI::PositiveNumber);
  app->add_option("--precision", c.precision, "stored tensor precision")->check(CLI::IsMember({"f32", "f64"}));
  app->add_option("--data", c.data, "eval examples manifest (examples.jsonl)");
  app->add_option("--backbone", c.backbone, "backbone checkpoint directory");
}

std::vector<int> parse_ints(const std::string& s) {
  std::vector<int> v;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      v.push_back(std::stoi(tok));
    } catch (const std::exception&) {
      throw sinkgate::ConfigError("bad layer list '" + s + "'");
    }
  }
  return v;
}

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> v;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) v.push_back(tok);
  return v;
}

// Precedence: flag, then environment, then config file, then defaults.
cli::ExperimentConfig resolve(const Common& c, cli::Pipeline p, bool keep_pipeline) {
  cli::ExperimentConfig cfg = c.config.empty() ? cli::ExperimentConfig{} : cli::load_config(c.config);
  if (!keep_pipeline) cfg.pipeline = p;
  if (const char* env = std::getenv("SINKGATE_OUT")) cfg.output = env;
  if (const char* env = std::getenv("SINKGATE_WORKERS")) {
    try {
      cfg.workers = std::stoi(env);
    } catch (const std::exception&) {
      throw sinkgate::ConfigError("SINKGATE_WORKERS: not an integer");
    }
  }
  if (c.seed) cfg.seed = *c.seed;
  if (!c.out.empty()) cfg.output = c.out;
  if (c.workers) cfg.workers = *c.workers;
  if (!c.precision.empty()) cfg.precision = c.precision;
  if (!c.data.empty()) cfg.data.manifest = c.data;
  if (!c.backbone.empty()) cfg.backbone.checkpoint = c.backbone;
  return cfg;
}

int run_guarded(const std::function<void()>& fn) {
  try {
    fn();
    return 0;
  } catch (const sinkgate::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const sinkgate::IoError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const sinkgate::InvariantError& e) {
    std::cerr << "invariant violation: " << e.what() << '\n';
    return 3;
  } catch (const sinkgate::ShapeError& e) {
    std::cerr << "invariant violation: " << e.what() << '\n';
    return 3;
  } catch (const sinkgate::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sinkgate: attention-sink analysis and layer-wise sink gating"};
  app.require_subcommand(1);

  Common common;
  std::string layers, tasks, traces, gates_dir;
  std::vector<std::string> manifests;
  std::optional<cli::Pipeline> chosen;
  bool keep_pipeline = false;

  const auto leaf = [&](CLI::App* sub, cli::Pipeline p) {
    add_common(sub, common);
    sub->callback([&chosen, p] { chosen = p; });
    return sub;
  };

  auto* run = leaf(app.add_subcommand("run", "run the pipeline named in the config"), cli::Pipeline::full);
  run->callback([&] {
    chosen = cli::Pipeline::full;
    keep_pipeline = true;
  });

  auto* data = app.add_subcommand("data", "scene datasets");
  data->require_subcommand(1);
  leaf(data->add_subcommand("gen", "generate the eval / gate / backbone splits"), cli::Pipeline::data);

  auto* bb = app.add_subcommand("backbone", "toy backbone");
  bb->require_subcommand(1);
  leaf(bb->add_subcommand("build", "build the planted backbone"), cli::Pipeline::backbone_build);
  leaf(bb->add_subcommand("train", "train the readout"), cli::Pipeline::backbone_train);
  leaf(bb->add_subcommand("eval", "evaluate on the eval split"), cli::Pipeline::backbone_eval);

  auto* analyze = leaf(app.add_subcommand("analyze", "sink partitions and salience profile"), cli::Pipeline::analyze);
  analyze->add_option("--traces", traces, "analyze dumped trace directories instead of running the model");

  auto* sweep = leaf(app.add_subcommand("sweep", "per-layer coefficient sweep"), cli::Pipeline::sweep);
  sweep->add_option("--layers", layers, "comma-separated layers (default: all)");

  auto* probe = leaf(app.add_subcommand("probe", "linear probes over sink groups"), cli::Pipeline::probe);
  probe->add_option("--tasks", tasks, "comma-separated probe tasks");

  auto* gate = app.add_subcommand("gate", "layer-wise sink gates");
  gate->require_subcommand(1);
  for (auto* g : {leaf(gate->add_subcommand("train", "train single-layer gates"), cli::Pipeline::gate_train),
                  leaf(gate->add_subcommand("stack", "greedy stacking of trained gates"), cli::Pipeline::stack),
                  leaf(gate->add_subcommand("ablate", "signal and grouping ablation"), cli::Pipeline::ablate)}) {
    g->add_option("--layers", layers, "comma-separated gate layers");
  }
  gate->get_subcommand("stack")->add_option("--gates", gates_dir, "directory of gate_L<l> checkpoints");

  std::string report_out;
  bool is_report = false;
  auto* rep = app.add_subcommand("report", "consolidate finished runs");
  rep->add_option("manifests", manifests, "run directories or manifest files")->required();
  rep->add_option("--out", report_out, "output directory")->required();
  rep->callback([&] { is_report = true; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  return run_guarded([&] {
    if (is_report) {
      std::vector<std::filesystem::path> paths(manifests.begin(), manifests.end());
      const auto m = cli::report(paths, report_out);
      std::cout << report_out << ": " << m.artifacts.size() << " artifacts\n";
      return;
    }
    cli::ExperimentConfig cfg = resolve(common, *chosen, keep_pipeline);
    if (!layers.empty()) {
      if (*chosen == cli::Pipeline::sweep) {
        cfg.sweep.layers = parse_ints(layers);
      } else {
        cfg.gate.layers = parse_ints(layers);
      }
    }
    if (!tasks.empty()) cfg.probe.tasks = split(tasks);
    if (!traces.empty()) cfg.analyze.traces = traces;
    if (!gates_dir.empty()) cfg.gate.checkpoints_dir = gates_dir;
    cli::validate(cfg);
    const auto m = cli::run(cfg);
    std::cout << cfg.output << ": " << m.pipeline << ", " << m.artifacts.size() << " artifacts, config "
              << m.config_hash << '\n';
  });
}
