#include "difflab/nets.hpp"

#include <cmath>

#include "difflab/metrics.hpp"
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace difflab {

namespace {

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }
double gelu_deriv(double x) {
  double phi = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
  return phi + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

Eigen::MatrixXd gelu_mat(const Eigen::MatrixXd& x) {
  return x.unaryExpr([](double v) { return gelu(v); });
}
Eigen::MatrixXd gelu_deriv_mat(const Eigen::MatrixXd& x) {
  return x.unaryExpr([](double v) { return gelu_deriv(v); });
}

// Stack each run of s consecutive columns into one column. Columns of one
// batch item stay contiguous, so runs never straddle item boundaries.
Eigen::MatrixXd fold_cols(const Eigen::MatrixXd& x, int s) {
  const int rows = static_cast<int>(x.rows());
  const int out_cols = static_cast<int>(x.cols()) / s;
  Eigen::MatrixXd y(rows * s, out_cols);
  for (int j = 0; j < out_cols; ++j)
    for (int c = 0; c < s; ++c) y.block(c * rows, j, rows, 1) = x.col(j * s + c);
  return y;
}

Eigen::MatrixXd unfold_cols(const Eigen::MatrixXd& y, int s) {
  const int rows = static_cast<int>(y.rows()) / s;
  const int out_cols = static_cast<int>(y.cols()) * s;
  Eigen::MatrixXd x(rows, out_cols);
  for (int j = 0; j < y.cols(); ++j)
    for (int c = 0; c < s; ++c) x.col(j * s + c) = y.block(c * rows, j, rows, 1);
  return x;
}

Eigen::MatrixXd softmax_cols(const Eigen::MatrixXd& logits) {
  Eigen::MatrixXd p(logits.rows(), logits.cols());
  for (int j = 0; j < logits.cols(); ++j) {
    Eigen::VectorXd col = logits.col(j);
    double mx = col.maxCoeff();
    Eigen::VectorXd e = (col.array() - mx).exp();
    p.col(j) = e / e.sum();
  }
  return p;
}

struct InitSpec {
  double std;
  double lr_mult;
};

enum class Role { input, hidden, readout, bias, embedding };

InitSpec init_spec(const NetworkConfig& cfg, Role role, int fan_in) {
  const double base = static_cast<double>(cfg.mup_base_fanin);
  switch (role) {
    case Role::bias: return {0.0, 1.0};
    case Role::embedding: return {1.0, 1.0};
    case Role::input: return {1.0 / std::sqrt(fan_in), 1.0};
    case Role::hidden:
      if (cfg.init == InitMode::mup) return {1.0 / std::sqrt(fan_in), base / fan_in};
      return {1.0 / std::sqrt(fan_in), 1.0};
    case Role::readout:
      if (cfg.init == InitMode::mup) return {1.0 / fan_in, base / fan_in};
      return {1.0 / std::sqrt(fan_in), 1.0};
  }
  return {0.0, 1.0};
}

// q(x_{t-1} = a | x_t, x0 = b) for every candidate clean state b; the
// mixture form of the x0-parameterized backward kernel.
Eigen::MatrixXd posterior_mix_matrix(const DiffusionSpec& spec, int t, int xt) {
  const int v = spec.v;
  TransitionKernel step = step_kernel(spec.kind, v, spec.schedule.beta(t));
  TransitionKernel cum{spec.kind, v, spec.schedule.abar(t - 1)};
  const int n = step.state_count();
  Eigen::MatrixXd M(n, v);
  double total = 0.0;
  for (int b = 0; b < v; ++b) {
    double z = 0.0;
    for (int a = 0; a < n; ++a) {
      double w = step.prob(a, xt) * cum.prob(b, a);
      M(a, b) = w;
      z += w;
    }
    // A clean state inconsistent with the observation (possible under the
    // absorbing kernel) gets a zero column: it contributes nothing to the
    // mixture, which is renormalized over the feasible states downstream.
    if (z > 0.0) M.col(b) /= z;
    total += z;
  }
  if (total <= 0.0) throw std::domain_error("impossible x_t in backward mixture");
  return M;
}

// Per-token loss and, when dp is non-null, d(loss)/d(p_hat).
double token_loss(const Eigen::VectorXd& p_hat, int x0, int xt, int t,
                  const DiffusionSpec& spec, double hybrid_ce, Eigen::VectorXd* dp) {
  // Softmax outputs can underflow to exact zero once the model grows very
  // confident late in training; flooring keeps the loss and its gradient
  // finite without affecting any normally-scaled probability.
  static constexpr double kProbFloor = 1e-30;
  auto floored = [](double p) { return std::max(p, kProbFloor); };
  double loss = 0.0;
  if (dp) dp->setZero(p_hat.size());
  if (t >= 2) {
    Eigen::MatrixXd M = posterior_mix_matrix(spec, t, xt);
    Eigen::VectorXd q_star = M.col(x0);
    if (q_star.sum() <= 0.0)
      throw std::domain_error("clean state inconsistent with the observation");
    // p_theta = M p_hat renormalized over the feasible clean states
    Eigen::VectorXd u = M * p_hat;
    Eigen::VectorXd feasible = M.colwise().sum();  // 1 per feasible column
    double s_mix = floored(feasible.dot(p_hat));
    loss += std::log(s_mix);
    for (int a = 0; a < q_star.size(); ++a) {
      if (q_star[a] <= 0.0) continue;
      loss += q_star[a] * (std::log(q_star[a]) - std::log(floored(u[a])));
    }
    if (dp) {
      Eigen::VectorXd ratio = Eigen::VectorXd::Zero(q_star.size());
      for (int a = 0; a < q_star.size(); ++a)
        if (q_star[a] > 0.0) ratio[a] = q_star[a] / floored(u[a]);
      *dp -= M.transpose() * ratio;
      *dp += feasible / s_mix;
    }
  } else {
    loss += -std::log(floored(p_hat[x0]));
    if (dp) (*dp)[x0] -= 1.0 / floored(p_hat[x0]);
  }
  if (hybrid_ce > 0.0 && t >= 2) {
    loss += hybrid_ce * -std::log(floored(p_hat[x0]));
    if (dp) (*dp)[x0] -= hybrid_ce / floored(p_hat[x0]);
  }
  return loss;
}

void write_u32(std::ostream& out, std::uint32_t x) { out.write(reinterpret_cast<char*>(&x), 4); }
void write_u64(std::ostream& out, std::uint64_t x) { out.write(reinterpret_cast<char*>(&x), 8); }
std::uint32_t read_u32(std::istream& in) {
  std::uint32_t x;
  in.read(reinterpret_cast<char*>(&x), 4);
  return x;
}
std::uint64_t read_u64(std::istream& in) {
  std::uint64_t x;
  in.read(reinterpret_cast<char*>(&x), 8);
  return x;
}

}  // namespace

// ---------------------------------------------------------------------------
// Denoiser / Network shared machinery

std::vector<Eigen::MatrixXd> Denoiser::predict_x0_batch(const std::vector<TokenSequence>& xts,
                                                        int t) {
  std::vector<Eigen::MatrixXd> out;
  out.reserve(xts.size());
  for (const auto& x : xts) out.push_back(predict_x0(x, t));
  return out;
}

Tensor& Network::add_tensor(const std::string& name, int rows, int cols, double init_std,
                            double lr_mult, Rng& rng) {
  Tensor t;
  t.name = name;
  t.value.resize(rows, cols);
  for (int j = 0; j < cols; ++j)
    for (int i = 0; i < rows; ++i) t.value(i, j) = init_std == 0.0 ? 0.0 : init_std * rng.normal();
  t.grad = Eigen::MatrixXd::Zero(rows, cols);
  t.adam_m = Eigen::MatrixXd::Zero(rows, cols);
  t.adam_v = Eigen::MatrixXd::Zero(rows, cols);
  t.lr_mult = lr_mult;
  tensors_.push_back(std::move(t));
  return tensors_.back();
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += static_cast<std::size_t>(t.value.size());
  return n;
}

void Network::zero_grad() {
  for (auto& t : tensors_) t.grad.setZero();
}

void Network::adam_step(const AdamConfig& cfg) {
  ++adam_t_;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(adam_t_));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(adam_t_));
  for (auto& t : tensors_) {
    t.adam_m = cfg.beta1 * t.adam_m + (1.0 - cfg.beta1) * t.grad;
    t.adam_v = cfg.beta2 * t.adam_v + (1.0 - cfg.beta2) * t.grad.cwiseProduct(t.grad);
    const double lr = cfg.lr * t.lr_mult;
    t.value.array() -= lr * (t.adam_m.array() / bc1) /
                       ((t.adam_v.array() / bc2).sqrt() + cfg.eps);
  }
}

Eigen::MatrixXd Network::predict_x0(const TokenSequence& xt, int t) {
  return softmax_cols(forward({xt}, {t}));
}

std::vector<Eigen::MatrixXd> Network::predict_x0_batch(const std::vector<TokenSequence>& xts,
                                                       int t) {
  Eigen::MatrixXd logits = forward(xts, std::vector<int>(xts.size(), t));
  Eigen::MatrixXd probs = softmax_cols(logits);
  std::vector<Eigen::MatrixXd> out(xts.size());
  for (std::size_t b = 0; b < xts.size(); ++b)
    out[b] = probs.middleCols(static_cast<int>(b) * d_, d_);
  return out;
}

void Network::save_checkpoint(const std::string& path, std::uint64_t config_hash) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  out.write("DLCK", 4);
  write_u32(out, 1);  // version
  write_u64(out, config_hash);
  write_u64(out, static_cast<std::uint64_t>(step_count_));
  write_u32(out, static_cast<std::uint32_t>(tensors_.size()));
  for (const auto& t : tensors_) {
    write_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    write_u32(out, static_cast<std::uint32_t>(t.value.rows()));
    write_u32(out, static_cast<std::uint32_t>(t.value.cols()));
    for (int j = 0; j < t.value.cols(); ++j)
      for (int i = 0; i < t.value.rows(); ++i) {
        float f = static_cast<float>(t.value(i, j));
        out.write(reinterpret_cast<char*>(&f), 4);
      }
  }
}

void Network::load_checkpoint(const std::string& path, std::uint64_t* config_hash) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[4];
  in.read(magic, 4);
  if (std::memcmp(magic, "DLCK", 4) != 0) throw std::runtime_error("bad checkpoint magic");
  if (read_u32(in) != 1) throw std::runtime_error("unsupported checkpoint version");
  std::uint64_t hash = read_u64(in);
  if (config_hash) *config_hash = hash;
  step_count_ = static_cast<std::int64_t>(read_u64(in));
  std::uint32_t n = read_u32(in);
  if (n != tensors_.size()) throw std::runtime_error("checkpoint tensor count mismatch");
  for (auto& t : tensors_) {
    std::uint32_t len = read_u32(in);
    std::string name(len, '\0');
    in.read(name.data(), len);
    std::uint32_t rows = read_u32(in), cols = read_u32(in);
    if (name != t.name || rows != t.value.rows() || cols != t.value.cols())
      throw std::runtime_error("checkpoint tensor mismatch at " + t.name);
    for (std::uint32_t j = 0; j < cols; ++j)
      for (std::uint32_t i = 0; i < rows; ++i) {
        float f;
        in.read(reinterpret_cast<char*>(&f), 4);
        t.value(i, j) = f;
      }
  }
}

// ---------------------------------------------------------------------------
// Tree U-Net: non-overlapping stride-s convolutions mirroring the grammar
// tree, concatenation skips, learned additive time embedding per block.

namespace {

class TreeUnet final : public Network {
 public:
  TreeUnet(const NetworkConfig& config, const GrammarParams& gp, const DiffusionSpec& spec,
           std::uint64_t seed) {
    config_ = config;
    v_ = gp.v;
    v_in_ = spec.input_states();
    d_ = gp.dimension();
    L_ = gp.L;
    s_ = gp.s;
    C_ = config.channels;
    T_ = spec.schedule.T;
    Rng rng(seed);

    auto add = [&](const std::string& name, int rows, int cols, Role role) {
      InitSpec is = init_spec(config_, role, cols);
      return static_cast<int>(&add_tensor(name, rows, cols, is.std, is.lr_mult, rng) -
                              tensors_.data());
    };

    temb_ = add("time_embed", config.time_dim, T_ + 1, Role::embedding);
    we_ = add("embed.W", C_, v_in_, Role::input);
    be_ = add("embed.b", C_, 1, Role::bias);
    for (int l = 1; l <= L_; ++l) {
      wenc_.push_back(add("enc" + std::to_string(l) + ".W", C_, s_ * C_, Role::hidden));
      benc_.push_back(add("enc" + std::to_string(l) + ".b", C_, 1, Role::bias));
      tenc_.push_back(add("enc" + std::to_string(l) + ".T", C_, config.time_dim, Role::hidden));
    }
    for (int l = 1; l <= L_; ++l) {
      const int cin = l == L_ ? C_ : 2 * C_;
      wdec_.push_back(add("dec" + std::to_string(l) + ".W", s_ * C_, cin, Role::hidden));
      bdec_.push_back(add("dec" + std::to_string(l) + ".b", s_ * C_, 1, Role::bias));
      tdec_.push_back(add("dec" + std::to_string(l) + ".T", C_, config.time_dim, Role::hidden));
    }
    wo_ = add("head.W", v_, 2 * C_, Role::readout);
    bo_ = add("head.b", v_, 1, Role::bias);
  }

  Eigen::MatrixXd forward(const std::vector<TokenSequence>& xt,
                          const std::vector<int>& t) override {
    const int B = static_cast<int>(xt.size());
    B_ = B;
    t_ = t;

    x0_.setZero(v_in_, B * d_);
    for (int b = 0; b < B; ++b)
      for (int k = 0; k < d_; ++k) x0_(xt[b][k], b * d_ + k) = 1.0;

    h_.assign(L_ + 1, {});
    p_.assign(L_ + 1, {});
    f_.assign(L_ + 1, {});
    h_[0] = val(we_) * x0_ + val(be_).replicate(1, B * d_);

    int n = d_;
    for (int l = 1; l <= L_; ++l) {
      n /= s_;
      f_[l] = fold_cols(h_[l - 1], s_);
      p_[l] = val(wenc_[l - 1]) * f_[l] + val(benc_[l - 1]).replicate(1, B * n);
      add_time(p_[l], tenc_[l - 1], n);
      h_[l] = gelu_mat(p_[l]);
    }

    pd_.assign(L_ + 1, {});
    a_.assign(L_ + 1, {});
    y_.assign(L_ + 1, {});
    dec_in_.assign(L_ + 1, {});
    dec_in_[L_] = h_[L_];
    n = 1;
    for (int l = L_; l >= 1; --l) {
      pd_[l] = val(wdec_[l - 1]) * dec_in_[l] + val(bdec_[l - 1]).replicate(1, B * n);
      a_[l] = unfold_cols(pd_[l], s_);
      n *= s_;
      add_time(a_[l], tdec_[l - 1], n);
      y_[l] = gelu_mat(a_[l]);
      if (l > 1) {
        dec_in_[l - 1].resize(2 * C_, B * n);
        dec_in_[l - 1] << y_[l], h_[l - 1];  // skip from matching resolution
      }
    }
    head_in_.resize(2 * C_, B * d_);
    head_in_ << y_[1], h_[0];
    return val(wo_) * head_in_ + val(bo_).replicate(1, B * d_);
  }

  void backward(const Eigen::MatrixXd& dlogits) override {
    grad(wo_) += dlogits * head_in_.transpose();
    grad(bo_) += dlogits.rowwise().sum();
    Eigen::MatrixXd dhead = val(wo_).transpose() * dlogits;

    std::vector<Eigen::MatrixXd> dh(L_ + 1);
    for (int l = 0; l <= L_; ++l) dh[l] = Eigen::MatrixXd::Zero(C_, h_[l].cols());

    Eigen::MatrixXd dy = dhead.topRows(C_);
    dh[0] += dhead.bottomRows(C_);

    int n = d_;
    for (int l = 1; l <= L_; ++l) {
      Eigen::MatrixXd da = dy.cwiseProduct(gelu_deriv_mat(a_[l]));
      time_grad(da, tdec_[l - 1], n);
      Eigen::MatrixXd dpd = fold_cols(da, s_);
      n /= s_;
      grad(bdec_[l - 1]) += dpd.rowwise().sum();
      grad(wdec_[l - 1]) += dpd * dec_in_[l].transpose();
      Eigen::MatrixXd din = val(wdec_[l - 1]).transpose() * dpd;
      if (l == L_) {
        dh[L_] += din;
      } else {
        dy = din.topRows(C_);
        dh[l] += din.bottomRows(C_);
      }
    }

    n = 1;
    for (int l = L_; l >= 1; --l) {
      Eigen::MatrixXd dp = dh[l].cwiseProduct(gelu_deriv_mat(p_[l]));
      time_grad(dp, tenc_[l - 1], n);
      grad(benc_[l - 1]) += dp.rowwise().sum();
      grad(wenc_[l - 1]) += dp * f_[l].transpose();
      dh[l - 1] += unfold_cols(val(wenc_[l - 1]).transpose() * dp, s_);
      n *= s_;
    }
    grad(we_) += dh[0] * x0_.transpose();
    grad(be_) += dh[0].rowwise().sum();
  }

  std::vector<double> hidden_rms() const override {
    std::vector<double> out;
    for (int l = 0; l <= L_; ++l)
      out.push_back(std::sqrt(h_[l].squaredNorm() / static_cast<double>(h_[l].size())));
    for (int l = L_; l >= 1; --l)
      out.push_back(std::sqrt(y_[l].squaredNorm() / static_cast<double>(y_[l].size())));
    return out;
  }

 private:
  Eigen::MatrixXd& val(int i) { return tensors_[i].value; }
  const Eigen::MatrixXd& val(int i) const { return tensors_[i].value; }
  Eigen::MatrixXd& grad(int i) { return tensors_[i].grad; }

  // Adds (T_proj * temb[t_b]) to every column of batch item b.
  void add_time(Eigen::MatrixXd& pre, int proj, int n_per_item) {
    for (int b = 0; b < B_; ++b) {
      Eigen::VectorXd tv = val(proj) * val(temb_).col(t_[b]);
      pre.middleCols(b * n_per_item, n_per_item).colwise() += tv;
    }
  }

  void time_grad(const Eigen::MatrixXd& dpre, int proj, int n_per_item) {
    for (int b = 0; b < B_; ++b) {
      Eigen::VectorXd dsum = dpre.middleCols(b * n_per_item, n_per_item).rowwise().sum();
      grad(proj) += dsum * val(temb_).col(t_[b]).transpose();
      grad(temb_).col(t_[b]) += val(proj).transpose() * dsum;
    }
  }

  int L_ = 0, s_ = 0, C_ = 0, T_ = 0;
  int we_ = 0, be_ = 0, wo_ = 0, bo_ = 0, temb_ = 0;
  std::vector<int> wenc_, benc_, tenc_, wdec_, bdec_, tdec_;

  // forward cache
  int B_ = 0;
  std::vector<int> t_;
  Eigen::MatrixXd x0_, head_in_;
  std::vector<Eigen::MatrixXd> h_, p_, f_, pd_, a_, y_, dec_in_;
};

// ---------------------------------------------------------------------------
// MLP baseline: flattened one-hot input, GeLU hidden stack, time embedding
// added to the first preactivation.

class Mlp final : public Network {
 public:
  Mlp(const NetworkConfig& config, const GrammarParams& gp, const DiffusionSpec& spec,
      std::uint64_t seed) {
    config_ = config;
    v_ = gp.v;
    v_in_ = spec.input_states();
    d_ = gp.dimension();
    W_ = config.channels;
    T_ = spec.schedule.T;
    n_hidden_ = std::max(1, config.mlp_hidden_layers);
    Rng rng(seed);

    auto add = [&](const std::string& name, int rows, int cols, Role role) {
      InitSpec is = init_spec(config_, role, cols);
      return static_cast<int>(&add_tensor(name, rows, cols, is.std, is.lr_mult, rng) -
                              tensors_.data());
    };
    temb_ = add("time_embed", config.time_dim, T_ + 1, Role::embedding);
    tproj_ = add("fc1.T", W_, config.time_dim, Role::hidden);
    w_.push_back(add("fc1.W", W_, v_in_ * d_, Role::input));
    b_.push_back(add("fc1.b", W_, 1, Role::bias));
    for (int i = 2; i <= n_hidden_; ++i) {
      w_.push_back(add("fc" + std::to_string(i) + ".W", W_, W_, Role::hidden));
      b_.push_back(add("fc" + std::to_string(i) + ".b", W_, 1, Role::bias));
    }
    wo_ = add("head.W", v_ * d_, W_, Role::readout);
    bo_ = add("head.b", v_ * d_, 1, Role::bias);
  }

  Eigen::MatrixXd forward(const std::vector<TokenSequence>& xt,
                          const std::vector<int>& t) override {
    const int B = static_cast<int>(xt.size());
    B_ = B;
    t_ = t;
    x0_.setZero(v_in_ * d_, B);
    for (int b = 0; b < B; ++b)
      for (int k = 0; k < d_; ++k) x0_(k * v_in_ + xt[b][k], b) = 1.0;

    pre_.assign(n_hidden_, {});
    h_.assign(n_hidden_, {});
    for (int i = 0; i < n_hidden_; ++i) {
      const Eigen::MatrixXd& in = i == 0 ? x0_ : h_[i - 1];
      pre_[i] = val(w_[i]) * in + val(b_[i]).replicate(1, B);
      if (i == 0)
        for (int b = 0; b < B; ++b) pre_[0].col(b) += val(tproj_) * val(temb_).col(t[b]);
      h_[i] = gelu_mat(pre_[i]);
    }
    Eigen::MatrixXd flat = val(wo_) * h_.back() + val(bo_).replicate(1, B);
    Eigen::MatrixXd logits(v_, B * d_);
    for (int b = 0; b < B; ++b)
      for (int k = 0; k < d_; ++k) logits.col(b * d_ + k) = flat.block(k * v_, b, v_, 1);
    return logits;
  }

  void backward(const Eigen::MatrixXd& dlogits) override {
    const int B = B_;
    Eigen::MatrixXd dflat(v_ * d_, B);
    for (int b = 0; b < B; ++b)
      for (int k = 0; k < d_; ++k) dflat.block(k * v_, b, v_, 1) = dlogits.col(b * d_ + k);

    grad(wo_) += dflat * h_.back().transpose();
    grad(bo_) += dflat.rowwise().sum();
    Eigen::MatrixXd dh = val(wo_).transpose() * dflat;
    for (int i = n_hidden_ - 1; i >= 0; --i) {
      Eigen::MatrixXd dpre = dh.cwiseProduct(gelu_deriv_mat(pre_[i]));
      if (i == 0) {
        for (int b = 0; b < B; ++b) {
          grad(tproj_) += dpre.col(b) * val(temb_).col(t_[b]).transpose();
          grad(temb_).col(t_[b]) += val(tproj_).transpose() * dpre.col(b);
        }
      }
      const Eigen::MatrixXd& in = i == 0 ? x0_ : h_[i - 1];
      grad(w_[i]) += dpre * in.transpose();
      grad(b_[i]) += dpre.rowwise().sum();
      if (i > 0) dh = val(w_[i]).transpose() * dpre;
    }
  }

  std::vector<double> hidden_rms() const override {
    std::vector<double> out;
    for (const auto& h : h_)
      out.push_back(std::sqrt(h.squaredNorm() / static_cast<double>(h.size())));
    return out;
  }

 private:
  Eigen::MatrixXd& val(int i) { return tensors_[i].value; }
  Eigen::MatrixXd& grad(int i) { return tensors_[i].grad; }

  int W_ = 0, T_ = 0, n_hidden_ = 0;
  int wo_ = 0, bo_ = 0, temb_ = 0, tproj_ = 0;
  std::vector<int> w_, b_;

  int B_ = 0;
  std::vector<int> t_;
  Eigen::MatrixXd x0_;
  std::vector<Eigen::MatrixXd> pre_, h_;
};

}  // namespace

std::unique_ptr<Network> Network::create(const NetworkConfig& config, const GrammarParams& gp,
                                         const DiffusionSpec& spec, std::uint64_t seed) {
  gp.validate();
  if (spec.v != gp.v) throw std::invalid_argument("diffusion spec vocabulary mismatch");
  if (config.channels < 1) throw std::invalid_argument("channels must be positive");
  if (config.arch == Arch::tree_unet)
    return std::make_unique<TreeUnet>(config, gp, spec, seed);
  return std::make_unique<Mlp>(config, gp, spec, seed);
}

// ---------------------------------------------------------------------------
// Loss, training, generation

double d3pm_loss_value(Denoiser& den, const Batch& batch, const DiffusionSpec& spec,
                       double hybrid_ce) {
  double total = 0.0;
  std::size_t tokens = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    Eigen::MatrixXd p_hat = den.predict_x0(batch.xt[b], batch.t[b]);
    for (int k = 0; k < p_hat.cols(); ++k) {
      total += token_loss(p_hat.col(k), batch.x0[b][k], batch.xt[b][k], batch.t[b], spec,
                          hybrid_ce, nullptr);
      ++tokens;
    }
  }
  return total / static_cast<double>(tokens);
}

double d3pm_loss_and_grad(Network& net, const Batch& batch, const DiffusionSpec& spec,
                          double hybrid_ce) {
  Eigen::MatrixXd logits = net.forward(batch.xt, batch.t);
  Eigen::MatrixXd probs = softmax_cols(logits);
  const int d = net.d();
  const double scale = 1.0 / static_cast<double>(batch.size() * d);

  Eigen::MatrixXd dlogits(logits.rows(), logits.cols());
  double total = 0.0;
  Eigen::VectorXd dp;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    for (int k = 0; k < d; ++k) {
      const int col = static_cast<int>(b) * d + k;
      Eigen::VectorXd p_hat = probs.col(col);
      total += token_loss(p_hat, batch.x0[b][k], batch.xt[b][k], batch.t[b], spec, hybrid_ce,
                          &dp);
      // softmax chain rule
      double inner = dp.dot(p_hat);
      dlogits.col(col) = (p_hat.array() * (dp.array() - inner)) * scale;
    }
  }
  net.backward(dlogits);
  return total * scale;
}

double train_step(Network& net, const Batch& batch, const DiffusionSpec& spec,
                  const AdamConfig& adam, double hybrid_ce) {
  net.zero_grad();
  double loss = d3pm_loss_and_grad(net, batch, spec, hybrid_ce);
  if (!std::isfinite(loss))
    throw std::runtime_error("training diverged: non-finite loss at step " +
                             std::to_string(net.step_count()));
  if (adam.lr != 0.0) net.adam_step(adam);
  net.set_step_count(net.step_count() + 1);
  return loss;
}

Batch sample_batch(const Dataset& data, std::size_t batch_size, const DiffusionSpec& spec,
                   Rng& rng) {
  if (data.items.empty()) throw std::invalid_argument("empty dataset");
  Batch batch;
  batch.x0.reserve(batch_size);
  batch.xt.reserve(batch_size);
  batch.t.reserve(batch_size);
  for (std::size_t i = 0; i < batch_size; ++i) {
    const TokenSequence& x0 = data.items[rng.uniform_index(data.items.size())];
    int t = 1 + static_cast<int>(rng.uniform_index(spec.schedule.T));
    TransitionKernel cum = cumulative_kernel(spec.kind, spec.v, spec.schedule, t);
    batch.x0.push_back(x0);
    batch.xt.push_back(apply_forward(x0, cum, rng));
    batch.t.push_back(t);
  }
  return batch;
}

std::vector<TokenSequence> generate(Denoiser& den, const DiffusionSpec& spec, int d,
                                    std::size_t n, Rng& rng) {
  const int v = spec.v;
  std::vector<TokenSequence> xs(n, TokenSequence(d));
  for (auto& x : xs)
    for (auto& tok : x)
      tok = spec.kind == KernelKind::absorbing ? v : static_cast<int>(rng.uniform_index(v));
  if (n == 0) return xs;

  auto sample_from = [&](const Eigen::VectorXd& p) {
    double u = rng.uniform() * p.sum();
    double acc = 0.0;
    for (int i = 0; i < p.size(); ++i) {
      acc += p[i];
      if (u <= acc) return i;
    }
    return static_cast<int>(p.size()) - 1;
  };

  for (int t = spec.schedule.T; t >= 1; --t) {
    std::vector<Eigen::MatrixXd> preds = den.predict_x0_batch(xs, t);
    if (t == 1) {
      for (std::size_t b = 0; b < n; ++b)
        for (int k = 0; k < d; ++k) xs[b][k] = sample_from(preds[b].col(k));
      break;
    }
    // One backward-mixture matrix per possible observed state.
    const int states = spec.kind == KernelKind::absorbing ? v + 1 : v;
    std::vector<Eigen::MatrixXd> mix(states);
    for (int xt = 0; xt < states; ++xt) mix[xt] = posterior_mix_matrix(spec, t, xt);
    for (std::size_t b = 0; b < n; ++b)
      for (int k = 0; k < d; ++k)
        xs[b][k] = sample_from(mix[xs[b][k]] * preds[b].col(k));
  }
  return xs;
}

std::vector<Probe> make_probe_set(const Dataset& heldout, const DiffusionSpec& spec,
                                  std::size_t n, Rng& rng) {
  if (heldout.items.empty()) throw std::invalid_argument("empty held-out set");
  std::vector<Probe> probes;
  probes.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const TokenSequence& x0 = heldout.items[rng.uniform_index(heldout.items.size())];
    int t = 1 + static_cast<int>(rng.uniform_index(spec.schedule.T));
    TransitionKernel cum = cumulative_kernel(spec.kind, spec.v, spec.schedule, t);
    probes.push_back({apply_forward(x0, cum, rng), t});
  }
  return probes;
}

double model_distance(Denoiser& a, Denoiser& b, const std::vector<Probe>& probes) {
  if (probes.empty()) throw std::invalid_argument("empty probe set");
  double total = 0.0;
  std::size_t tokens = 0;
  for (const auto& probe : probes) {
    Eigen::MatrixXd pa = a.predict_x0(probe.xt, probe.t);
    Eigen::MatrixXd pb = b.predict_x0(probe.xt, probe.t);
    if (pa.rows() != pb.rows() || pa.cols() != pb.cols())
      throw std::invalid_argument("model_distance: prediction shape mismatch");
    for (int k = 0; k < pa.cols(); ++k) {
      total += hellinger(pa.col(k), pb.col(k));
      ++tokens;
    }
  }
  return total / static_cast<double>(tokens);
}

Eigen::MatrixXd BpOracleDenoiser::predict_x0(const TokenSequence& xt, int t) {
  TransitionKernel cum = cumulative_kernel(spec_.kind, spec_.v, spec_.schedule, t);
  return run_bp(grammar_, leaf_evidence(xt, cum)).leaf_marginals;
}

}  // namespace difflab
