#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "difflab/bp.hpp"
#include "difflab/config.hpp"
#include "difflab/harness.hpp"
#include "difflab/kernel_lab.hpp"

namespace fs = std::filesystem;
using namespace difflab;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct CommonOpts {
  std::string config_path;
  std::string out_dir;
  std::vector<std::string> sets;
  std::uint64_t seed_grammar = 0, seed_data = 0, seed_init = 0, seed_init_b = 0,
                seed_diffusion = 0, seed_gen = 0, seed_probe = 0;
  bool has_grammar = false, has_data = false, has_init = false, has_init_b = false,
       has_diffusion = false, has_gen = false, has_probe = false;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "TOML-style config file");
    app->add_option("--out", out_dir, "output directory");
    app->add_option("--set", sets, "override any config key (key=value), repeatable");
    app->add_option("--seed-grammar", seed_grammar)->each([this](const std::string&) {
      has_grammar = true;
    });
    app->add_option("--seed-data", seed_data)->each([this](const std::string&) {
      has_data = true;
    });
    app->add_option("--seed-init", seed_init)->each([this](const std::string&) {
      has_init = true;
    });
    app->add_option("--seed-init-b", seed_init_b)->each([this](const std::string&) {
      has_init_b = true;
    });
    app->add_option("--seed-diffusion", seed_diffusion)->each([this](const std::string&) {
      has_diffusion = true;
    });
    app->add_option("--seed-gen", seed_gen)->each([this](const std::string&) {
      has_gen = true;
    });
    app->add_option("--seed-probe", seed_probe)->each([this](const std::string&) {
      has_probe = true;
    });
  }

  RunConfig load() const {
    std::vector<std::string> overrides = sets;
    if (!out_dir.empty()) overrides.push_back("out_dir = \"" + out_dir + "\"");
    if (has_grammar) overrides.push_back("grammar.seed = " + std::to_string(seed_grammar));
    if (has_data) overrides.push_back("seeds.data = " + std::to_string(seed_data));
    if (has_init) overrides.push_back("seeds.init = " + std::to_string(seed_init));
    if (has_init_b) overrides.push_back("seeds.init_b = " + std::to_string(seed_init_b));
    if (has_diffusion) overrides.push_back("seeds.diffusion = " + std::to_string(seed_diffusion));
    if (has_gen) overrides.push_back("seeds.gen = " + std::to_string(seed_gen));
    if (has_probe) overrides.push_back("seeds.probe = " + std::to_string(seed_probe));
    std::string text = config_path.empty() ? "" : read_file(config_path);
    return RunConfig::parse(text, overrides);
  }
};

int cmd_grammar(const CommonOpts& opts, bool enumerate, const std::string& validate_csv) {
  RunConfig cfg = opts.load();
  Grammar grammar = Grammar::build(cfg.grammar);
  std::cout << "grammar v=" << cfg.grammar.v << " m=" << cfg.grammar.m << " L=" << cfg.grammar.L
            << " s=" << cfg.grammar.s << " d=" << cfg.grammar.dimension()
            << " total_strings=" << count_total_data(cfg.grammar).str() << '\n';
  if (!cfg.out_dir.empty()) {
    fs::create_directories(cfg.out_dir);
    std::ofstream(cfg.out_dir + "/grammar.json") << grammar.to_json();
    std::cout << "wrote " << cfg.out_dir << "/grammar.json\n";
  }
  if (enumerate) {
    Dataset all;
    all.items = grammar.enumerate_all();
    if (cfg.out_dir.empty()) {
      std::cout << dataset_to_csv(all);
    } else {
      std::ofstream(cfg.out_dir + "/strings.csv") << dataset_to_csv(all);
      std::cout << "wrote " << cfg.out_dir << "/strings.csv (" << all.items.size()
                << " strings)\n";
    }
  }
  if (!validate_csv.empty()) {
    Dataset ds = dataset_from_csv(read_file(validate_csv));
    std::vector<double> err = error_fraction_per_layer(grammar, ds.items);
    for (std::size_t l = 0; l < err.size(); ++l)
      std::cout << "layer " << l + 1 << " error_fraction " << err[l] << '\n';
  }
  return 0;
}

int cmd_train(const CommonOpts& opts) {
  RunConfig cfg = opts.load();
  TrainTrace trace = run_rhm_training(cfg);
  std::cout << "checkpoints " << trace.checkpoints.size();
  if (trace.tau_mem)
    std::cout << " tau_mem " << *trace.tau_mem;
  else
    std::cout << " tau_mem censored";
  std::cout << '\n';
  return 0;
}

int cmd_twin(const CommonOpts& opts) {
  RunConfig cfg = opts.load();
  TwinResult result = run_twin_experiment(cfg);
  auto show = [](const char* tag, const TrainTrace& t) {
    std::cout << tag << " tau_mem ";
    if (t.tau_mem)
      std::cout << *t.tau_mem;
    else
      std::cout << "censored";
    std::cout << '\n';
  };
  show("model_a", result.a);
  show("model_b", result.b);
  for (const auto& [tau, dist] : result.distance)
    std::cout << "tau " << tau << " model_distance " << dist << '\n';
  return 0;
}

int cmd_phase(const CommonOpts& opts) {
  RunConfig cfg = opts.load();
  PhaseDiagram grid = run_phase_diagram(cfg);
  std::cout << grid.to_csv(cfg.hash());
  for (const auto& cell : grid.cells)
    if (cell.failed) return 1;
  return 0;
}

int cmd_bp_validate(const CommonOpts& opts) {
  RunConfig cfg = opts.load();
  BpValidationReport report = validate_bp(cfg);
  std::cout << "cases " << report.n_cases << " max_tv " << report.max_tv << ' '
            << (report.pass ? "PASS" : "FAIL") << '\n';
  return report.pass ? 0 : 1;
}

int cmd_kernel_sweep(const CommonOpts& opts) {
  RunConfig cfg = opts.load();
  if (cfg.kernel_grid.empty()) throw std::runtime_error("kernel sweep: empty kernel.grid");
  SweepResult result = sweep_tau_mem(cfg.kernel_axis, cfg.kernel_grid, cfg.kernel, cfg.kernel_d,
                                     cfg.kernel_P, cfg.kernel_sigma, cfg.seeds.data);
  std::string csv = result.to_csv();
  std::cout << csv;
  if (!cfg.out_dir.empty()) {
    fs::create_directories(cfg.out_dir);
    std::ofstream(cfg.out_dir + "/config.effective.toml") << cfg.effective_toml();
    std::ofstream out(cfg.out_dir + "/sweep.csv");
    out << "# config_hash=" << config_hash_hex(cfg.hash()) << '\n' << csv;
  }
  return 0;
}

int cmd_kernel_eigen(const CommonOpts& opts) {
  RunConfig cfg = opts.load();
  Rng rng(cfg.seeds.data);
  GaussianCloud cloud = sample_cloud(cfg.kernel_d, cfg.kernel_P, cfg.kernel_sigma, rng);
  EigenEstimate est = eigen_oracle(cfg.kernel_spec, cloud, ModeAnsatz{}, cfg.kernel_n_mc,
                                   cfg.seeds.diffusion);
  std::cout << "lambda " << est.lambda << " stderr " << est.stderr_ << " constant_term "
            << est.constant_term << (est.resolution_warning ? " RESOLUTION_WARNING" : "")
            << '\n';
  return 0;
}

int cmd_report(const std::vector<std::string>& runs, const std::string& out_path) {
  std::ostringstream table;
  table << "run,tau,train_loss,val_loss,copy_fraction,mean_nn_hamming,rest\n";
  for (const auto& dir : runs) {
    const std::string metrics = dir + "/metrics.csv";
    const std::string trace = dir + "/trace.jsonl";
    std::uint64_t h1 = read_artifact_hash(metrics);
    if (fs::exists(trace) && read_artifact_hash(trace) != h1)
      throw std::runtime_error("config hash mismatch inside " + dir +
                               ": refusing to mix artifacts");
    std::ifstream in(metrics);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty() || line[0] == '#' || line.rfind("tau,", 0) == 0) continue;
      table << dir << ',' << line << '\n';
    }
  }
  if (out_path.empty()) {
    std::cout << table.str();
  } else {
    std::ofstream(out_path) << table.str();
    std::cout << "wrote " << out_path << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"difflab: hierarchical-grammar diffusion laboratory"};
  app.require_subcommand(1);

  CommonOpts g_opts, t_opts, w_opts, p_opts, b_opts, ks_opts, ke_opts;

  auto* grammar_cmd = app.add_subcommand("grammar", "build / enumerate / validate a grammar");
  bool enumerate = false;
  std::string validate_csv;
  g_opts.attach(grammar_cmd);
  grammar_cmd->add_flag("--enumerate", enumerate, "write every generable string");
  grammar_cmd->add_option("--validate", validate_csv, "dataset CSV to check against the rules");

  auto* train_cmd = app.add_subcommand("train", "train one diffusion model on the RHM");
  t_opts.attach(train_cmd);

  auto* twin_cmd = app.add_subcommand("twin", "twin models on disjoint datasets");
  w_opts.attach(twin_cmd);

  auto* phase_cmd = app.add_subcommand("phase-diagram", "regime grid over a P sweep");
  p_opts.attach(phase_cmd);

  auto* bp_cmd = app.add_subcommand("bp-validate", "BP vs enumeration oracle gate");
  b_opts.attach(bp_cmd);

  auto* kernel_cmd = app.add_subcommand("kernel", "Gaussian-cloud score-learning lab");
  kernel_cmd->require_subcommand(1);
  auto* sweep_cmd = kernel_cmd->add_subcommand("sweep", "tau_mem scaling sweep");
  ks_opts.attach(sweep_cmd);
  auto* eigen_cmd = kernel_cmd->add_subcommand("eigen-oracle", "Monte-Carlo eigenvalue estimate");
  ke_opts.attach(eigen_cmd);

  auto* report_cmd = app.add_subcommand("report", "aggregate run outputs into one table");
  std::vector<std::string> report_runs;
  std::string report_out;
  report_cmd->add_option("--runs", report_runs, "run directories")->required();
  report_cmd->add_option("--out", report_out, "output CSV (default: stdout)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*grammar_cmd) return cmd_grammar(g_opts, enumerate, validate_csv);
    if (*train_cmd) return cmd_train(t_opts);
    if (*twin_cmd) return cmd_twin(w_opts);
    if (*phase_cmd) return cmd_phase(p_opts);
    if (*bp_cmd) return cmd_bp_validate(b_opts);
    if (*sweep_cmd) return cmd_kernel_sweep(ks_opts);
    if (*eigen_cmd) return cmd_kernel_eigen(ke_opts);
    if (*report_cmd) return cmd_report(report_runs, report_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
