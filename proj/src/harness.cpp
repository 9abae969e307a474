#include "difflab/harness.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "difflab/bp.hpp"
#include "difflab/nets.hpp"

namespace difflab {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

/// Validation-set size: the configured default capped at half the
/// strings the grammar can still supply after the training sets.
int effective_n_val(const RunConfig& cfg, std::uint64_t train_need) {
  BigCount total = count_total_data(cfg.grammar);
  if (total.saturated) return cfg.n_val;
  if (total.value <= train_need)
    throw std::invalid_argument("training set exceeds the number of generable strings");
  unsigned __int128 spare = (total.value - train_need) / 2;
  if (spare >= static_cast<unsigned>(cfg.n_val)) return cfg.n_val;
  if (spare == 0)
    throw std::invalid_argument("no strings left for a validation set");
  return static_cast<int>(spare);
}

/// Fixed-noise evaluation batch: data cycled in order, t stratified over
/// [1, T], corruption drawn once. Reusing the same batch at every
/// checkpoint makes the train/val bifurcation visible without MC noise.
Batch make_eval_batch(const Dataset& ds, const DiffusionSpec& spec, int n, Rng& rng) {
  Batch batch;
  batch.x0.reserve(n);
  batch.xt.reserve(n);
  batch.t.reserve(n);
  for (int i = 0; i < n; ++i) {
    const TokenSequence& x0 = ds.items[i % ds.items.size()];
    int t = 1 + static_cast<int>((static_cast<std::int64_t>(i) * spec.schedule.T) / n);
    t = std::min(t, spec.schedule.T);
    TransitionKernel cum = cumulative_kernel(spec.kind, spec.v, spec.schedule, t);
    batch.x0.push_back(x0);
    batch.xt.push_back(apply_forward(x0, cum, rng));
    batch.t.push_back(t);
  }
  return batch;
}

struct TraceWriter {
  std::ofstream out;

  void open(const std::string& path, std::uint64_t hash) {
    out.open(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path);
    json header = {{"format", "difflab-trace"},
                   {"version", 1},
                   {"config_hash", config_hash_hex(hash)}};
    out << header.dump() << '\n';
    out.flush();
  }

  void row(const CheckpointRow& r) {
    if (!out.is_open()) return;
    json j = {{"tau", r.tau},
              {"train_loss", r.train_loss},
              {"val_loss", r.val_loss},
              {"copy_fraction", r.copy_fraction},
              {"mean_nn_hamming", r.mean_nn_hamming},
              {"error_fraction", r.error_fraction}};
    out << j.dump() << '\n';
    out.flush();
  }
};

void write_metrics_csv(const std::string& path, const TrainTrace& trace, int L,
                       std::uint64_t hash) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "# config_hash=" << config_hash_hex(hash) << '\n';
  out << "tau,train_loss,val_loss,copy_fraction,mean_nn_hamming";
  for (int l = 1; l <= L; ++l) out << ",error_l" << l;
  out << ",regime\n";
  out.precision(17);
  for (const auto& r : trace.checkpoints) {
    out << r.tau << ',' << r.train_loss << ',' << r.val_loss << ',' << r.copy_fraction << ','
        << r.mean_nn_hamming;
    for (double e : r.error_fraction) out << ',' << e;
    out << ',' << classify_regime(r).str() << '\n';
  }
  if (trace.tau_mem) out << "# tau_mem=" << *trace.tau_mem << '\n';
}

/// One model's training state between shared checkpoints.
struct Trainer {
  std::unique_ptr<Network> net;
  const Dataset* train = nullptr;
  Rng batch_rng{0};
  TrainTrace trace;
  Batch eval_train;
  Batch eval_val;
  std::int64_t step = 0;
  TraceWriter writer;

  void advance_to(std::int64_t target, const RunConfig& cfg, const DiffusionSpec& spec) {
    for (; step < target; ++step) {
      Batch batch = sample_batch(*train, cfg.batch, spec, batch_rng);
      train_step(*net, batch, spec, cfg.adam, cfg.hybrid_ce);
    }
  }

  CheckpointRow checkpoint(std::int64_t tau, const RunConfig& cfg, const DiffusionSpec& spec,
                           const Grammar& grammar, bool with_generation) {
    CheckpointRow row;
    row.tau = tau;
    row.train_loss = d3pm_loss_value(*net, eval_train, spec, cfg.hybrid_ce);
    row.val_loss = d3pm_loss_value(*net, eval_val, spec, cfg.hybrid_ce);
    row.error_fraction.assign(cfg.grammar.L, 0.0);
    if (with_generation && cfg.n_gen > 0) {
      Rng gen_rng = Rng(cfg.seeds.gen).split(static_cast<std::uint64_t>(tau));
      auto gen = generate(*net, spec, grammar.params().dimension(), cfg.n_gen, gen_rng);
      row.copy_fraction = copy_fraction(gen, *train);
      row.mean_nn_hamming = mean_nn_hamming(gen, *train);
      row.error_fraction = error_fraction_per_layer(grammar, gen);
    }
    trace.checkpoints.push_back(row);
    trace.tau_mem = detect_tau_mem(trace);
    writer.row(row);
    return row;
  }
};

bool past_stop(const TrainTrace& trace, std::int64_t tau, double stop_decades) {
  return stop_decades > 0.0 && trace.tau_mem &&
         tau > static_cast<double>(std::max<std::int64_t>(*trace.tau_mem, 1)) *
                   std::pow(10.0, stop_decades);
}

}  // namespace

TrainTrace run_rhm_training(const RunConfig& cfg) {
  const std::uint64_t hash = cfg.hash();
  Grammar grammar = Grammar::build(cfg.grammar);
  const int n_val = effective_n_val(cfg, static_cast<std::uint64_t>(cfg.P));

  Rng data_rng(cfg.seeds.data);
  Dataset all = grammar.sample_dataset(static_cast<std::size_t>(cfg.P) + n_val, data_rng);
  Dataset train, val;
  train.items.assign(all.items.begin(), all.items.begin() + cfg.P);
  val.items.assign(all.items.begin() + cfg.P, all.items.end());

  DiffusionSpec spec = cfg.make_diffusion_spec();

  Trainer tr;
  tr.net = Network::create(cfg.net, cfg.grammar, spec, cfg.seeds.init);
  tr.train = &train;
  tr.batch_rng = Rng(cfg.seeds.data).split(101);
  Rng eval_rng = Rng(cfg.seeds.diffusion).split(1);
  tr.eval_train = make_eval_batch(train, spec, cfg.n_eval, eval_rng);
  tr.eval_val = make_eval_batch(val, spec, cfg.n_eval, eval_rng);

  std::string ckpt_dir;
  if (!cfg.out_dir.empty()) {
    fs::create_directories(cfg.out_dir);
    std::ofstream(cfg.out_dir + "/config.effective.toml") << cfg.effective_toml();
    tr.writer.open(cfg.out_dir + "/trace.jsonl", hash);
    if (cfg.save_checkpoints) {
      ckpt_dir = cfg.out_dir + "/checkpoints";
      fs::create_directories(ckpt_dir);
    }
  }

  auto finalize = [&] {
    if (!cfg.out_dir.empty())
      write_metrics_csv(cfg.out_dir + "/metrics.csv", tr.trace, cfg.grammar.L, hash);
  };

  auto taus = checkpoint_schedule(cfg.step_cap, cfg.checkpoints_per_decade);
  try {
    for (std::int64_t tau : taus) {
      if (past_stop(tr.trace, tau, cfg.stop_decades_after_detect)) break;
      tr.advance_to(tau, cfg, spec);
      tr.checkpoint(tau, cfg, spec, grammar, /*with_generation=*/true);
      if (!ckpt_dir.empty())
        tr.net->save_checkpoint(ckpt_dir + "/ckpt_" + std::to_string(tau) + ".bin", hash);
    }
  } catch (const std::exception&) {
    finalize();  // divergence propagates with the partial trace saved
    throw;
  }
  finalize();
  return tr.trace;
}

TwinResult run_twin_experiment(const RunConfig& cfg) {
  const std::uint64_t hash = cfg.hash();
  Grammar grammar = Grammar::build(cfg.grammar);
  const std::uint64_t need = 2ULL * static_cast<std::uint64_t>(cfg.P);
  const int n_val = effective_n_val(cfg, need);

  Rng data_rng(cfg.seeds.data);
  Dataset all = grammar.sample_dataset(need + n_val, data_rng);
  Dataset train_a, train_b, val;
  train_a.items.assign(all.items.begin(), all.items.begin() + cfg.P);
  train_b.items.assign(all.items.begin() + cfg.P, all.items.begin() + 2 * cfg.P);
  val.items.assign(all.items.begin() + 2 * cfg.P, all.items.end());

  DiffusionSpec spec = cfg.make_diffusion_spec();

  Rng probe_rng(cfg.seeds.probe);
  auto probes = make_probe_set(val, spec, static_cast<std::size_t>(cfg.n_probe), probe_rng);

  auto setup = [&](Trainer& tr, const Dataset& train, std::uint64_t init_seed,
                   std::uint64_t data_stream) {
    tr.net = Network::create(cfg.net, cfg.grammar, spec, init_seed);
    tr.train = &train;
    tr.batch_rng = Rng(cfg.seeds.data).split(data_stream);
    Rng eval_rng = Rng(cfg.seeds.diffusion).split(data_stream);
    tr.eval_train = make_eval_batch(train, spec, cfg.n_eval, eval_rng);
    tr.eval_val = make_eval_batch(val, spec, cfg.n_eval, eval_rng);
  };
  Trainer a, b;
  setup(a, train_a, cfg.seeds.init, 201);
  setup(b, train_b, cfg.seeds.init_b, 202);

  TwinResult result;
  std::ofstream dist_out;
  if (!cfg.out_dir.empty()) {
    fs::create_directories(cfg.out_dir);
    std::ofstream(cfg.out_dir + "/config.effective.toml") << cfg.effective_toml();
    a.writer.open(cfg.out_dir + "/trace_a.jsonl", hash);
    b.writer.open(cfg.out_dir + "/trace_b.jsonl", hash);
    dist_out.open(cfg.out_dir + "/distance.csv", std::ios::trunc);
    dist_out << "# config_hash=" << config_hash_hex(hash) << "\ntau,model_distance\n";
    dist_out.precision(17);
  }

  auto finalize = [&] {
    if (!cfg.out_dir.empty()) {
      write_metrics_csv(cfg.out_dir + "/metrics_a.csv", a.trace, cfg.grammar.L, hash);
      write_metrics_csv(cfg.out_dir + "/metrics_b.csv", b.trace, cfg.grammar.L, hash);
    }
  };

  auto taus = checkpoint_schedule(cfg.step_cap, cfg.checkpoints_per_decade);
  try {
    for (std::int64_t tau : taus) {
      bool done_a = past_stop(a.trace, tau, cfg.stop_decades_after_detect);
      bool done_b = past_stop(b.trace, tau, cfg.stop_decades_after_detect);
      if (done_a && done_b) break;
      a.advance_to(tau, cfg, spec);
      b.advance_to(tau, cfg, spec);
      a.checkpoint(tau, cfg, spec, grammar, /*with_generation=*/true);
      b.checkpoint(tau, cfg, spec, grammar, /*with_generation=*/true);
      double dist = model_distance(*a.net, *b.net, probes);
      result.distance.emplace_back(tau, dist);
      if (dist_out.is_open()) {
        dist_out << tau << ',' << dist << '\n';
        dist_out.flush();
      }
    }
  } catch (const std::exception&) {
    result.a = a.trace;
    result.b = b.trace;
    finalize();
    throw;
  }
  result.a = a.trace;
  result.b = b.trace;
  finalize();
  return result;
}

std::string PhaseDiagram::to_csv(std::uint64_t config_hash) const {
  std::ostringstream out;
  out << "# config_hash=" << config_hash_hex(config_hash) << '\n';
  const int L = cells.empty() ? 0 : static_cast<int>(cells.front().error_fraction.size());
  out << "P,tau,regime,copy_fraction";
  for (int l = 1; l <= L; ++l) out << ",error_l" << l;
  out << ",failed\n";
  out.precision(17);
  for (const auto& c : cells) {
    out << c.P << ',' << c.tau << ',' << c.regime << ',' << c.copy_fraction;
    for (double e : c.error_fraction) out << ',' << e;
    out << ',' << (c.failed ? 1 : 0) << '\n';
  }
  return out.str();
}

PhaseDiagram run_phase_diagram(const RunConfig& cfg) {
  if (cfg.P_grid.empty()) throw std::invalid_argument("phase diagram: empty P grid");
  const std::uint64_t hash = cfg.hash();
  PhaseDiagram grid;
  for (double P : cfg.P_grid) {
    RunConfig cell_cfg = cfg;
    cell_cfg.experiment = ExperimentKind::rhm_train;
    cell_cfg.P = static_cast<int>(P);
    cell_cfg.save_checkpoints = false;
    if (!cfg.out_dir.empty())
      cell_cfg.out_dir = cfg.out_dir + "/P_" + std::to_string(cell_cfg.P);
    try {
      TrainTrace trace = run_rhm_training(cell_cfg);
      for (const auto& row : trace.checkpoints) {
        PhaseCell cell;
        cell.P = P;
        cell.tau = row.tau;
        cell.regime = classify_regime(row).str();
        cell.copy_fraction = row.copy_fraction;
        cell.error_fraction = row.error_fraction;
        grid.cells.push_back(std::move(cell));
      }
    } catch (const std::exception&) {
      PhaseCell cell;
      cell.P = P;
      cell.tau = -1;
      cell.regime = "failed";
      cell.error_fraction.assign(cfg.grammar.L, 0.0);
      cell.failed = true;
      grid.cells.push_back(std::move(cell));
    }
  }
  if (!cfg.out_dir.empty()) {
    fs::create_directories(cfg.out_dir);
    std::ofstream(cfg.out_dir + "/config.effective.toml") << cfg.effective_toml();
    std::ofstream(cfg.out_dir + "/grid.csv") << grid.to_csv(hash);
  }
  return grid;
}

BpValidationReport validate_bp(const RunConfig& cfg) {
  Grammar grammar = Grammar::build(cfg.grammar);
  BigCount total = count_total_data(cfg.grammar);
  if (!(total <= 100000))
    throw std::invalid_argument("bp validation refused: grammar has " + total.str() +
                                " strings, enumeration bound is 100000");

  NoiseSchedule sched = make_linear_schedule_auto(std::max(cfg.bp_noise_levels, 2),
                                                  cfg.abar_target);
  Rng rng(cfg.seeds.diffusion);

  BpValidationReport report;
  for (int level = 1; level <= cfg.bp_noise_levels; ++level) {
    int t = 1 + ((level - 1) * (sched.T - 1)) / std::max(cfg.bp_noise_levels - 1, 1);
    TransitionKernel cum = cumulative_kernel(cfg.kernel_kind, cfg.grammar.v, sched, t);
    for (int e = 0; e < cfg.bp_n_evidence; ++e) {
      TokenSequence x0 = grammar.sample_datum(rng);
      TokenSequence xt = apply_forward(x0, cum, rng);
      LeafEvidence ev = leaf_evidence(xt, cum);
      Eigen::MatrixXd bp = run_bp(grammar, ev).leaf_marginals;
      Eigen::MatrixXd brute = brute_force_marginals(grammar, ev);
      for (int k = 0; k < bp.cols(); ++k)
        report.max_tv = std::max(report.max_tv, 0.5 * (bp.col(k) - brute.col(k)).lpNorm<1>());
      ++report.n_cases;
    }
  }
  report.pass = report.max_tv <= cfg.bp_tv_gate;
  if (!cfg.out_dir.empty()) {
    fs::create_directories(cfg.out_dir);
    std::ofstream out(cfg.out_dir + "/bp_validation.csv");
    out << "# config_hash=" << config_hash_hex(cfg.hash()) << "\nmax_tv,n_cases,pass\n";
    out.precision(17);
    out << report.max_tv << ',' << report.n_cases << ',' << (report.pass ? 1 : 0) << '\n';
  }
  return report;
}

std::uint64_t read_artifact_hash(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty artifact: " + path);
  const std::string csv_tag = "# config_hash=";
  if (line.rfind(csv_tag, 0) == 0)
    return std::stoull(line.substr(csv_tag.size()), nullptr, 16);
  auto j = json::parse(line, nullptr, false);
  if (!j.is_discarded() && j.contains("config_hash"))
    return std::stoull(j["config_hash"].get<std::string>(), nullptr, 16);
  throw std::runtime_error("no config hash recorded in " + path);
}

}  // namespace difflab
