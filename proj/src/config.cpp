#include "difflab/config.hpp"

#include <algorithm>
#include <cstdio>
#include <set>
#include <sstream>
#include <stdexcept>

namespace difflab {

namespace {

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

/// Flat key = value document with full bookkeeping of which keys were
/// consumed, so typos fail loudly instead of silently defaulting.
class KvDoc {
 public:
  void parse_line(const std::string& raw, int lineno) {
    std::string line = raw;
    // strip comments outside quotes
    bool in_quote = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"') in_quote = !in_quote;
      if (line[i] == '#' && !in_quote) {
        line = line.substr(0, i);
        break;
      }
    }
    line = trim(line);
    if (line.empty()) return;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  ": expected key = value");
    set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }

  void set(const std::string& key, const std::string& value) {
    if (key.empty()) throw std::invalid_argument("config: empty key");
    values_[key] = value;
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  std::string raw(const std::string& key) {
    consumed_.insert(key);
    return values_.at(key);
  }

  std::string get_string(const std::string& key, const std::string& fallback) {
    if (!has(key)) return fallback;
    std::string v = raw(key);
    if (v.size() >= 2 && v.front() == '"' && v.back() == '"') return v.substr(1, v.size() - 2);
    return v;
  }

  std::int64_t get_int(const std::string& key, std::int64_t fallback) {
    if (!has(key)) return fallback;
    const std::string v = raw(key);
    std::size_t pos = 0;
    std::int64_t out;
    try {
      out = std::stoll(v, &pos);
    } catch (const std::exception&) {
      throw std::invalid_argument("config key '" + key + "': not an integer: " + v);
    }
    if (pos != v.size())
      throw std::invalid_argument("config key '" + key + "': not an integer: " + v);
    return out;
  }

  double get_double(const std::string& key, double fallback) {
    if (!has(key)) return fallback;
    const std::string v = raw(key);
    std::size_t pos = 0;
    double out;
    try {
      out = std::stod(v, &pos);
    } catch (const std::exception&) {
      throw std::invalid_argument("config key '" + key + "': not a number: " + v);
    }
    if (pos != v.size())
      throw std::invalid_argument("config key '" + key + "': not a number: " + v);
    return out;
  }

  bool get_bool(const std::string& key, bool fallback) {
    if (!has(key)) return fallback;
    const std::string v = raw(key);
    if (v == "true") return true;
    if (v == "false") return false;
    throw std::invalid_argument("config key '" + key + "': expected true/false, got " + v);
  }

  std::vector<double> get_list(const std::string& key, std::vector<double> fallback) {
    if (!has(key)) return fallback;
    const std::string v = raw(key);
    if (v.size() < 2 || v.front() != '[' || v.back() != ']')
      throw std::invalid_argument("config key '" + key + "': expected [a, b, ...]");
    std::vector<double> out;
    std::istringstream in(v.substr(1, v.size() - 2));
    std::string cell;
    while (std::getline(in, cell, ',')) {
      cell = trim(cell);
      if (cell.empty()) continue;
      out.push_back(std::stod(cell));
    }
    return out;
  }

  void check_all_consumed() const {
    for (const auto& [key, value] : values_)
      if (!consumed_.count(key))
        throw std::invalid_argument("config: unknown key '" + key + "'");
  }

 private:
  std::map<std::string, std::string> values_;
  std::set<std::string> consumed_;
};

template <typename T>
T parse_enum(const std::string& key, const std::string& value,
             std::initializer_list<std::pair<const char*, T>> table) {
  for (const auto& [name, val] : table)
    if (value == name) return val;
  std::string options;
  for (const auto& [name, val] : table) options += std::string(name) + " ";
  throw std::invalid_argument("config key '" + key + "': got '" + value + "', expected one of: " +
                              options);
}

std::string fmt_double(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

std::string fmt_list(const std::vector<double>& xs) {
  std::string out = "[";
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ", ";
    out += fmt_double(xs[i]);
  }
  return out + "]";
}

}  // namespace

RunConfig RunConfig::parse(const std::string& text, const std::vector<std::string>& overrides) {
  KvDoc doc;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) doc.parse_line(line, ++lineno);
  for (const auto& ov : overrides) {
    auto eq = ov.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("override must be key=value: " + ov);
    doc.set(trim(ov.substr(0, eq)), trim(ov.substr(eq + 1)));
  }

  RunConfig cfg;
  cfg.experiment = parse_enum<ExperimentKind>(
      "experiment", doc.get_string("experiment", "rhm_train"),
      {{"rhm_train", ExperimentKind::rhm_train},
       {"rhm_twin", ExperimentKind::rhm_twin},
       {"phase_diagram", ExperimentKind::phase_diagram},
       {"kernel_sweep", ExperimentKind::kernel_sweep},
       {"bp_validate", ExperimentKind::bp_validate}});
  cfg.out_dir = doc.get_string("out_dir", "");

  RunConfig defaults;
  cfg.grammar.v = static_cast<int>(doc.get_int("grammar.v", defaults.grammar.v));
  cfg.grammar.m = static_cast<int>(doc.get_int("grammar.m", defaults.grammar.m));
  cfg.grammar.L = static_cast<int>(doc.get_int("grammar.L", defaults.grammar.L));
  cfg.grammar.s = static_cast<int>(doc.get_int("grammar.s", defaults.grammar.s));
  cfg.grammar.seed = static_cast<std::uint64_t>(doc.get_int("grammar.seed", 0));

  cfg.kernel_kind = parse_enum<KernelKind>("diffusion.kind",
                                           doc.get_string("diffusion.kind", "uniform"),
                                           {{"uniform", KernelKind::uniform},
                                            {"absorbing", KernelKind::absorbing}});
  cfg.schedule = doc.get_string("diffusion.schedule", defaults.schedule);
  if (cfg.schedule != "linear" && cfg.schedule != "cosine" && cfg.schedule != "linear_auto")
    throw std::invalid_argument("config key 'diffusion.schedule': got '" + cfg.schedule + "'");
  cfg.T = static_cast<int>(doc.get_int("diffusion.T", defaults.T));
  cfg.abar_target = doc.get_double("diffusion.abar_target", defaults.abar_target);

  cfg.net.arch = parse_enum<Arch>("net.arch", doc.get_string("net.arch", "tree_unet"),
                                  {{"tree_unet", Arch::tree_unet}, {"mlp", Arch::mlp}});
  cfg.net.channels = static_cast<int>(doc.get_int("net.channels", defaults.net.channels));
  cfg.net.time_dim = static_cast<int>(doc.get_int("net.time_dim", defaults.net.time_dim));
  cfg.net.mlp_hidden_layers =
      static_cast<int>(doc.get_int("net.mlp_hidden_layers", defaults.net.mlp_hidden_layers));
  cfg.net.init = parse_enum<InitMode>("net.init", doc.get_string("net.init", "mup"),
                                      {{"mup", InitMode::mup},
                                       {"standard", InitMode::standard},
                                       {"lazy", InitMode::lazy}});
  cfg.net.mup_base_fanin =
      static_cast<int>(doc.get_int("net.mup_base_fanin", defaults.net.mup_base_fanin));

  cfg.adam.lr = doc.get_double("train.lr", defaults.adam.lr);
  cfg.adam.beta1 = doc.get_double("train.beta1", defaults.adam.beta1);
  cfg.adam.beta2 = doc.get_double("train.beta2", defaults.adam.beta2);
  cfg.hybrid_ce = doc.get_double("train.hybrid_ce", defaults.hybrid_ce);
  cfg.P = static_cast<int>(doc.get_int("train.P", defaults.P));
  cfg.batch = static_cast<int>(doc.get_int("train.batch", defaults.batch));
  cfg.step_cap = doc.get_int("train.step_cap", defaults.step_cap);
  cfg.checkpoints_per_decade =
      static_cast<int>(doc.get_int("train.checkpoints_per_decade",
                                   defaults.checkpoints_per_decade));
  cfg.n_gen = static_cast<int>(doc.get_int("train.n_gen", defaults.n_gen));
  cfg.n_val = static_cast<int>(doc.get_int("train.n_val", defaults.n_val));
  cfg.n_eval = static_cast<int>(doc.get_int("train.n_eval", defaults.n_eval));
  cfg.stop_decades_after_detect =
      doc.get_double("train.stop_decades_after_detect", defaults.stop_decades_after_detect);
  cfg.save_checkpoints = doc.get_bool("train.save_checkpoints", defaults.save_checkpoints);

  cfg.seeds.data = static_cast<std::uint64_t>(doc.get_int("seeds.data", defaults.seeds.data));
  cfg.seeds.init = static_cast<std::uint64_t>(doc.get_int("seeds.init", defaults.seeds.init));
  cfg.seeds.init_b =
      static_cast<std::uint64_t>(doc.get_int("seeds.init_b", defaults.seeds.init_b));
  cfg.seeds.diffusion =
      static_cast<std::uint64_t>(doc.get_int("seeds.diffusion", defaults.seeds.diffusion));
  cfg.seeds.gen = static_cast<std::uint64_t>(doc.get_int("seeds.gen", defaults.seeds.gen));
  cfg.seeds.probe = static_cast<std::uint64_t>(doc.get_int("seeds.probe", defaults.seeds.probe));

  cfg.P_grid = doc.get_list("phase.P_grid", defaults.P_grid);
  cfg.n_probe = static_cast<int>(doc.get_int("twin.n_probe", defaults.n_probe));

  cfg.kernel.width = static_cast<int>(doc.get_int("kernel.width", defaults.kernel.width));
  cfg.kernel.init = parse_enum<ScoreInit>("kernel.init", doc.get_string("kernel.init", "lazy"),
                                          {{"lazy", ScoreInit::lazy},
                                           {"meanfield", ScoreInit::meanfield}});
  cfg.kernel.lr = doc.get_double("kernel.lr", defaults.kernel.lr);
  cfg.kernel.batch = static_cast<int>(doc.get_int("kernel.batch", defaults.kernel.batch));
  cfg.kernel.step_cap = doc.get_int("kernel.step_cap", defaults.kernel.step_cap);
  cfg.kernel.n_test = static_cast<int>(doc.get_int("kernel.n_test", defaults.kernel.n_test));
  cfg.kernel.eval_batch =
      static_cast<int>(doc.get_int("kernel.eval_batch", defaults.kernel.eval_batch));
  cfg.kernel.detect_delta = doc.get_double("kernel.detect_delta", defaults.kernel.detect_delta);
  cfg.kernel.detect_k = static_cast<int>(doc.get_int("kernel.detect_k", defaults.kernel.detect_k));
  cfg.kernel.checkpoints_per_decade = static_cast<int>(
      doc.get_int("kernel.checkpoints_per_decade", defaults.kernel.checkpoints_per_decade));
  cfg.kernel_axis = parse_enum<SweepAxis>("kernel.axis", doc.get_string("kernel.axis", "P"),
                                          {{"P", SweepAxis::P},
                                           {"sigma", SweepAxis::sigma},
                                           {"batch", SweepAxis::batch}});
  cfg.kernel_grid = doc.get_list("kernel.grid", defaults.kernel_grid);
  cfg.kernel_d = static_cast<int>(doc.get_int("kernel.d", defaults.kernel_d));
  cfg.kernel_P = static_cast<int>(doc.get_int("kernel.P", defaults.kernel_P));
  cfg.kernel_sigma = doc.get_double("kernel.sigma", defaults.kernel_sigma);
  cfg.kernel_spec.form = parse_enum<KernelSpec::Form>(
      "kernel.form", doc.get_string("kernel.form", "power_law"),
      {{"power_law", KernelSpec::power_law}, {"relu_ntk", KernelSpec::relu_ntk}});
  cfg.kernel_spec.nu = doc.get_double("kernel.nu", defaults.kernel_spec.nu);
  cfg.kernel_spec.C = doc.get_double("kernel.C", defaults.kernel_spec.C);
  cfg.kernel_n_mc =
      static_cast<std::size_t>(doc.get_int("kernel.n_mc",
                                           static_cast<std::int64_t>(defaults.kernel_n_mc)));

  cfg.bp_noise_levels =
      static_cast<int>(doc.get_int("bp.noise_levels", defaults.bp_noise_levels));
  cfg.bp_n_evidence = static_cast<int>(doc.get_int("bp.n_evidence", defaults.bp_n_evidence));
  cfg.bp_tv_gate = doc.get_double("bp.tv_gate", defaults.bp_tv_gate);

  doc.check_all_consumed();
  cfg.grammar.validate();
  if (cfg.P < 1 || cfg.batch < 1 || cfg.T < 1 || cfg.step_cap < 0)
    throw std::invalid_argument("config: P, batch, T must be positive; step_cap nonnegative");
  return cfg;
}

std::string RunConfig::effective_toml() const {
  std::map<std::string, std::string> kv;
  kv["experiment"] = experiment == ExperimentKind::rhm_train      ? "\"rhm_train\""
                     : experiment == ExperimentKind::rhm_twin     ? "\"rhm_twin\""
                     : experiment == ExperimentKind::phase_diagram ? "\"phase_diagram\""
                     : experiment == ExperimentKind::kernel_sweep ? "\"kernel_sweep\""
                                                                  : "\"bp_validate\"";
  // out_dir is a runtime destination, not part of the experiment: it is
  // neither archived nor hashed, so identical runs written to different
  // directories produce bit-identical artifacts.
  kv["grammar.v"] = std::to_string(grammar.v);
  kv["grammar.m"] = std::to_string(grammar.m);
  kv["grammar.L"] = std::to_string(grammar.L);
  kv["grammar.s"] = std::to_string(grammar.s);
  kv["grammar.seed"] = std::to_string(grammar.seed);
  kv["diffusion.kind"] = kernel_kind == KernelKind::uniform ? "\"uniform\"" : "\"absorbing\"";
  kv["diffusion.schedule"] = "\"" + schedule + "\"";
  kv["diffusion.T"] = std::to_string(T);
  kv["diffusion.abar_target"] = fmt_double(abar_target);
  kv["net.arch"] = net.arch == Arch::tree_unet ? "\"tree_unet\"" : "\"mlp\"";
  kv["net.channels"] = std::to_string(net.channels);
  kv["net.time_dim"] = std::to_string(net.time_dim);
  kv["net.mlp_hidden_layers"] = std::to_string(net.mlp_hidden_layers);
  kv["net.init"] = net.init == InitMode::mup        ? "\"mup\""
                   : net.init == InitMode::standard ? "\"standard\""
                                                    : "\"lazy\"";
  kv["net.mup_base_fanin"] = std::to_string(net.mup_base_fanin);
  kv["train.lr"] = fmt_double(adam.lr);
  kv["train.beta1"] = fmt_double(adam.beta1);
  kv["train.beta2"] = fmt_double(adam.beta2);
  kv["train.hybrid_ce"] = fmt_double(hybrid_ce);
  kv["train.P"] = std::to_string(P);
  kv["train.batch"] = std::to_string(batch);
  kv["train.step_cap"] = std::to_string(step_cap);
  kv["train.checkpoints_per_decade"] = std::to_string(checkpoints_per_decade);
  kv["train.n_gen"] = std::to_string(n_gen);
  kv["train.n_val"] = std::to_string(n_val);
  kv["train.n_eval"] = std::to_string(n_eval);
  kv["train.stop_decades_after_detect"] = fmt_double(stop_decades_after_detect);
  kv["train.save_checkpoints"] = save_checkpoints ? "true" : "false";
  kv["seeds.data"] = std::to_string(seeds.data);
  kv["seeds.init"] = std::to_string(seeds.init);
  kv["seeds.init_b"] = std::to_string(seeds.init_b);
  kv["seeds.diffusion"] = std::to_string(seeds.diffusion);
  kv["seeds.gen"] = std::to_string(seeds.gen);
  kv["seeds.probe"] = std::to_string(seeds.probe);
  kv["phase.P_grid"] = fmt_list(P_grid);
  kv["twin.n_probe"] = std::to_string(n_probe);
  kv["kernel.width"] = std::to_string(kernel.width);
  kv["kernel.init"] = kernel.init == ScoreInit::lazy ? "\"lazy\"" : "\"meanfield\"";
  kv["kernel.lr"] = fmt_double(kernel.lr);
  kv["kernel.batch"] = std::to_string(kernel.batch);
  kv["kernel.step_cap"] = std::to_string(kernel.step_cap);
  kv["kernel.n_test"] = std::to_string(kernel.n_test);
  kv["kernel.eval_batch"] = std::to_string(kernel.eval_batch);
  kv["kernel.detect_delta"] = fmt_double(kernel.detect_delta);
  kv["kernel.detect_k"] = std::to_string(kernel.detect_k);
  kv["kernel.checkpoints_per_decade"] = std::to_string(kernel.checkpoints_per_decade);
  kv["kernel.axis"] = kernel_axis == SweepAxis::P       ? "\"P\""
                      : kernel_axis == SweepAxis::sigma ? "\"sigma\""
                                                        : "\"batch\"";
  kv["kernel.grid"] = fmt_list(kernel_grid);
  kv["kernel.d"] = std::to_string(kernel_d);
  kv["kernel.P"] = std::to_string(kernel_P);
  kv["kernel.sigma"] = fmt_double(kernel_sigma);
  kv["kernel.form"] = kernel_spec.form == KernelSpec::power_law ? "\"power_law\""
                                                                : "\"relu_ntk\"";
  kv["kernel.nu"] = fmt_double(kernel_spec.nu);
  kv["kernel.C"] = fmt_double(kernel_spec.C);
  kv["kernel.n_mc"] = std::to_string(kernel_n_mc);
  kv["bp.noise_levels"] = std::to_string(bp_noise_levels);
  kv["bp.n_evidence"] = std::to_string(bp_n_evidence);
  kv["bp.tv_gate"] = fmt_double(bp_tv_gate);

  std::string out;
  for (const auto& [key, value] : kv) out += key + " = " + value + "\n";
  return out;
}

std::uint64_t fnv1a64(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t RunConfig::hash() const { return fnv1a64(effective_toml()); }

std::string config_hash_hex(std::uint64_t hash) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(hash));
  return buf;
}

NoiseSchedule RunConfig::make_schedule() const {
  if (schedule == "linear") return make_linear_schedule(T);
  if (schedule == "cosine") return make_cosine_schedule(T);
  return make_linear_schedule_auto(T, abar_target);
}

DiffusionSpec RunConfig::make_diffusion_spec() const {
  DiffusionSpec spec;
  spec.kind = kernel_kind;
  spec.schedule = make_schedule();
  spec.v = grammar.v;
  return spec;
}

}  // namespace difflab
