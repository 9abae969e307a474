#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "difflab/grammar.hpp"
#include "difflab/kernel_lab.hpp"
#include "difflab/nets.hpp"
#include "difflab/noise.hpp"

namespace difflab {

enum class ExperimentKind { rhm_train, rhm_twin, phase_diagram, kernel_sweep, bp_validate };

/// One explicit seed per RNG stream; no stream ever falls back to a
/// shared or implicit source.
struct Seeds {
  std::uint64_t data = 1;
  std::uint64_t init = 2;
  std::uint64_t init_b = 3;  // the twin's second model
  std::uint64_t diffusion = 4;
  std::uint64_t gen = 5;
  std::uint64_t probe = 6;
};

/// Fully resolved experiment configuration. Parsed from a flat
/// TOML-style key = value document; every field has a default, and the
/// effective (fully resolved) document is what gets hashed and archived.
struct RunConfig {
  ExperimentKind experiment = ExperimentKind::rhm_train;
  std::string out_dir;  // empty = no files written

  GrammarParams grammar{8, 2, 3, 2, 0};

  // diffusion
  KernelKind kernel_kind = KernelKind::uniform;
  std::string schedule = "linear_auto";  // linear | cosine | linear_auto
  int T = 32;
  double abar_target = 1e-4;

  NetworkConfig net;
  AdamConfig adam;
  double hybrid_ce = 0.0;

  // training loop
  int P = 512;
  int batch = 32;
  std::int64_t step_cap = 100000;
  int checkpoints_per_decade = 8;
  int n_gen = 512;
  int n_val = 2048;
  int n_eval = 256;  // fixed-noise loss evaluation batch
  double stop_decades_after_detect = 1.0;  // 0 = always run to step_cap
  bool save_checkpoints = true;

  Seeds seeds;

  // phase diagram
  std::vector<double> P_grid;

  // twin experiment
  int n_probe = 512;

  // kernel lab
  ScoreNetConfig kernel;
  SweepAxis kernel_axis = SweepAxis::P;
  std::vector<double> kernel_grid;
  int kernel_d = 64;
  int kernel_P = 128;
  double kernel_sigma = 0.17888543819998318;  // sqrt(3.2e-2)
  KernelSpec kernel_spec;
  std::size_t kernel_n_mc = 1000000;

  // bp validation
  int bp_noise_levels = 10;
  int bp_n_evidence = 100;
  double bp_tv_gate = 1e-8;

  /// Parses the document and applies `overrides` (key=value pairs) on
  /// top. Throws std::invalid_argument on unknown keys or bad values.
  static RunConfig parse(const std::string& text,
                         const std::vector<std::string>& overrides = {});

  /// Every field, resolved, one key per line, sorted. Reparsing it
  /// reproduces this config exactly.
  std::string effective_toml() const;

  /// FNV-1a over the effective document.
  std::uint64_t hash() const;

  NoiseSchedule make_schedule() const;
  DiffusionSpec make_diffusion_spec() const;
};

std::string config_hash_hex(std::uint64_t hash);

/// FNV-1a 64-bit.
std::uint64_t fnv1a64(const std::string& text);

}  // namespace difflab
