#pragma once

#include <Eigen/Dense>
#include <memory>
#include <string>
#include <vector>

#include "difflab/bp.hpp"
#include "difflab/grammar.hpp"
#include "difflab/noise.hpp"
#include "difflab/rng.hpp"

namespace difflab {

enum class Arch { tree_unet, mlp };
enum class InitMode { mup, standard, lazy };

struct NetworkConfig {
  Arch arch = Arch::tree_unet;
  int channels = 256;       // per-layer width (tree_unet) / hidden width (mlp)
  int time_dim = 32;        // learned time-embedding dimension
  int mlp_hidden_layers = 2;
  InitMode init = InitMode::mup;
  int mup_base_fanin = 64;  // reference fan-in for the muP learning-rate scale
};

struct AdamConfig {
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Diffusion process a denoiser is trained against.
struct DiffusionSpec {
  KernelKind kind = KernelKind::uniform;
  NoiseSchedule schedule;
  int v = 0;

  int input_states() const { return kind == KernelKind::absorbing ? v + 1 : v; }
};

/// A named parameter with its gradient and Adam moments.
struct Tensor {
  std::string name;
  Eigen::MatrixXd value;
  Eigen::MatrixXd grad;
  Eigen::MatrixXd adam_m;
  Eigen::MatrixXd adam_v;
  double lr_mult = 1.0;
};

struct Batch {
  std::vector<TokenSequence> x0;
  std::vector<TokenSequence> xt;
  std::vector<int> t;
  std::size_t size() const { return x0.size(); }
};

/// Anything that predicts p(x_0 | x_t): trained networks and the exact
/// BP oracle alike. Columns of the returned matrix are per-leaf
/// probability vectors over the v clean states.
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual Eigen::MatrixXd predict_x0(const TokenSequence& xt, int t) = 0;
  /// Shared-t batch; the default loops over predict_x0.
  virtual std::vector<Eigen::MatrixXd> predict_x0_batch(const std::vector<TokenSequence>& xts,
                                                        int t);
};

/// From-scratch network with explicit backpropagation.
class Network : public Denoiser {
 public:
  ~Network() override = default;

  /// Deterministic given seed. Throws on a config inconsistent with the
  /// grammar (tree_unet block count must match depth).
  static std::unique_ptr<Network> create(const NetworkConfig& config,
                                         const GrammarParams& grammar,
                                         const DiffusionSpec& spec, std::uint64_t seed);

  /// Logits, v x (B*d); column b*d + k is leaf k of batch item b.
  /// Caches activations for backward().
  virtual Eigen::MatrixXd forward(const std::vector<TokenSequence>& xt,
                                  const std::vector<int>& t) = 0;

  /// Accumulates parameter gradients from d(loss)/d(logits).
  virtual void backward(const Eigen::MatrixXd& dlogits) = 0;

  /// RMS of each hidden activation block from the last forward pass.
  virtual std::vector<double> hidden_rms() const = 0;

  Eigen::MatrixXd predict_x0(const TokenSequence& xt, int t) override;
  std::vector<Eigen::MatrixXd> predict_x0_batch(const std::vector<TokenSequence>& xts,
                                                int t) override;

  std::vector<Tensor>& tensors() { return tensors_; }
  const std::vector<Tensor>& tensors() const { return tensors_; }
  std::size_t parameter_count() const;
  void zero_grad();
  void adam_step(const AdamConfig& cfg);

  std::int64_t step_count() const { return step_count_; }
  void set_step_count(std::int64_t s) { step_count_ = s; }

  /// Versioned binary checkpoint: shape-tagged tensors, little-endian
  /// 32-bit floats, header carrying `config_hash`.
  void save_checkpoint(const std::string& path, std::uint64_t config_hash) const;
  void load_checkpoint(const std::string& path, std::uint64_t* config_hash = nullptr);

  int v() const { return v_; }
  int d() const { return d_; }

 protected:
  Tensor& add_tensor(const std::string& name, int rows, int cols, double init_std,
                     double lr_mult, Rng& rng);

  std::vector<Tensor> tensors_;
  NetworkConfig config_;
  int v_ = 0;       // output states
  int v_in_ = 0;    // input states (v, or v+1 with a mask)
  int d_ = 0;
  std::int64_t step_count_ = 0;
  std::int64_t adam_t_ = 0;
};

/// Variational D3PM objective: per-token KL(q(x_{t-1}|x_t,x_0) ||
/// p_theta(x_{t-1}|x_t)) for t >= 2 and reconstruction -log p(x_0|x_1)
/// at t = 1, averaged over tokens and batch. hybrid_ce adds
/// lambda * CE(p_hat(x_0|x_t), x_0).
double d3pm_loss_value(Denoiser& den, const Batch& batch, const DiffusionSpec& spec,
                       double hybrid_ce = 0.0);

/// Same loss through a network's own forward, accumulating exact
/// gradients. Call zero_grad() first (train_step does).
double d3pm_loss_and_grad(Network& net, const Batch& batch, const DiffusionSpec& spec,
                          double hybrid_ce = 0.0);

/// One Adam update. Throws std::runtime_error on a non-finite loss.
double train_step(Network& net, const Batch& batch, const DiffusionSpec& spec,
                  const AdamConfig& adam, double hybrid_ce = 0.0);

/// Draws x_0 from the dataset, t uniform in [1, T], x_t from the forward
/// process.
Batch sample_batch(const Dataset& data, std::size_t batch_size, const DiffusionSpec& spec,
                   Rng& rng);

/// Ancestral backward sampling from stationary noise with
/// p_theta(x_{t-1}|x_t) = sum_b q(x_{t-1}|x_t, b) p_hat(b | x_t).
std::vector<TokenSequence> generate(Denoiser& den, const DiffusionSpec& spec, int d,
                                    std::size_t n, Rng& rng);

/// A frozen comparison point: a noisy string with its diffusion step.
struct Probe {
  TokenSequence xt;
  int t = 1;
};

/// Probes from diffusion trajectories of held-out data: each draws a
/// datum and a uniform t, then corrupts through the cumulative kernel.
std::vector<Probe> make_probe_set(const Dataset& heldout, const DiffusionSpec& spec,
                                  std::size_t n, Rng& rng);

/// Mean per-token Hellinger distance between two models' p(x_0 | x_t)
/// predictive distributions over the probe set.
double model_distance(Denoiser& a, Denoiser& b, const std::vector<Probe>& probes);

/// Exact-score denoiser: BP marginals under the cumulative kernel at t.
class BpOracleDenoiser : public Denoiser {
 public:
  BpOracleDenoiser(const Grammar& grammar, const DiffusionSpec& spec)
      : grammar_(grammar), spec_(spec) {}
  Eigen::MatrixXd predict_x0(const TokenSequence& xt, int t) override;

 private:
  const Grammar& grammar_;
  DiffusionSpec spec_;
};

/// Uniform-prediction baseline.
class UniformDenoiser : public Denoiser {
 public:
  UniformDenoiser(int v, int d) : v_(v), d_(d) {}
  Eigen::MatrixXd predict_x0(const TokenSequence&, int) override {
    return Eigen::MatrixXd::Constant(v_, d_, 1.0 / v_);
  }

 private:
  int v_, d_;
};

}  // namespace difflab
