#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "difflab/config.hpp"
#include "difflab/metrics.hpp"

namespace difflab {

/// Trains one diffusion model on a fresh RHM instance and records the
/// full metric trace. When config.out_dir is nonempty the run directory
/// receives config.effective.toml, trace.jsonl, metrics.csv and
/// checkpoints/. Training divergence propagates after the partial trace
/// is saved.
TrainTrace run_rhm_training(const RunConfig& config);

struct TwinResult {
  TrainTrace a;
  TrainTrace b;
  std::vector<std::pair<std::int64_t, double>> distance;  // (tau, model_distance)
};

/// Two independently initialized models on disjoint datasets from one
/// frozen grammar, trained in lockstep; model_distance evaluated at
/// shared checkpoints on a shared fixed probe set.
TwinResult run_twin_experiment(const RunConfig& config);

struct PhaseCell {
  double P = 0;
  std::int64_t tau = 0;
  std::string regime;
  double copy_fraction = 0.0;
  std::vector<double> error_fraction;
  bool failed = false;
};

struct PhaseDiagram {
  std::vector<PhaseCell> cells;
  std::string to_csv(std::uint64_t config_hash) const;
};

/// One training run per value of config.P_grid; every checkpoint is
/// classified into a regime. Per-cell failures are marked in the grid
/// rather than aborting the sweep.
PhaseDiagram run_phase_diagram(const RunConfig& config);

struct BpValidationReport {
  double max_tv = 0.0;
  int n_cases = 0;
  bool pass = false;
};

/// BP-vs-enumeration gate: random evidences across noise levels, max
/// total-variation distance between leaf marginals.
BpValidationReport validate_bp(const RunConfig& config);

/// Reads the config hash recorded in a run artifact (`# config_hash=`
/// header of a CSV or the header record of a JSONL trace).
std::uint64_t read_artifact_hash(const std::string& path);

}  // namespace difflab
