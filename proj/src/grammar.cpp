#include "difflab/grammar.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include <nlohmann/json.hpp>

namespace difflab {

namespace {

using json = nlohmann::json;

unsigned __int128 ipow128(std::uint64_t base, int exp, bool* saturated) {
  unsigned __int128 r = 1;
  const unsigned __int128 cap = ~static_cast<unsigned __int128>(0) >> 1;
  for (int i = 0; i < exp; ++i) {
    if (r > cap / base) {
      *saturated = true;
      return cap;
    }
    r *= base;
  }
  return r;
}

std::uint64_t pack_tuple(const int* tuple, int s, int v) {
  std::uint64_t key = 0;
  for (int i = 0; i < s; ++i) key = key * static_cast<std::uint64_t>(v) + tuple[i];
  return key;
}

}  // namespace

int GrammarParams::dimension() const {
  int d = 1;
  for (int i = 0; i < L; ++i) d *= s;
  return d;
}

int GrammarParams::internal_nodes() const { return (dimension() - 1) / (s - 1); }

void GrammarParams::validate() const {
  if (v < 1 || m < 1 || L < 1 || s < 2)
    throw std::invalid_argument("grammar params: need v >= 1, m >= 1, L >= 1, s >= 2");
  bool sat = false;
  unsigned __int128 tuples = ipow128(static_cast<std::uint64_t>(v), s, &sat);
  if (!sat && static_cast<unsigned __int128>(m) * v > tuples)
    throw std::invalid_argument("grammar params: m*v > v^s, unambiguous rules impossible");
  if (s * std::log2(static_cast<double>(v)) >= 63.0)
    throw std::invalid_argument("grammar params: v^s too large to index");
  if (L * std::log2(static_cast<double>(s)) >= 31.0)
    throw std::invalid_argument("grammar params: s^L too large");
}

std::string BigCount::str() const {
  if (saturated) return ">=2^127";
  unsigned __int128 x = value;
  if (x == 0) return "0";
  std::string out;
  while (x > 0) {
    out.push_back(static_cast<char>('0' + static_cast<int>(x % 10)));
    x /= 10;
  }
  std::reverse(out.begin(), out.end());
  return out;
}

BigCount count_total_data(const GrammarParams& params) {
  params.validate();
  BigCount c;
  c.value = ipow128(static_cast<std::uint64_t>(params.m), params.internal_nodes(), &c.saturated);
  if (!c.saturated) {
    const unsigned __int128 cap = ~static_cast<unsigned __int128>(0) >> 1;
    if (c.value > cap / static_cast<unsigned>(params.v)) {
      c.saturated = true;
      c.value = cap;
    } else {
      c.value *= static_cast<unsigned>(params.v);
    }
  }
  return c;
}

Grammar Grammar::build(const GrammarParams& params) {
  params.validate();
  Grammar g;
  g.params_ = params;
  Rng rng(params.seed);

  const std::uint64_t n_tuples = [&] {
    std::uint64_t t = 1;
    for (int i = 0; i < params.s; ++i) t *= static_cast<std::uint64_t>(params.v);
    return t;
  }();
  const std::uint64_t need = static_cast<std::uint64_t>(params.m) * params.v;

  g.rules_.resize(params.L);
  for (int level = 0; level < params.L; ++level) {
    // Draw m*v distinct tuple indices without replacement. Partial
    // Fisher-Yates when the universe is enumerable, rejection otherwise.
    std::vector<std::uint64_t> picks;
    picks.reserve(need);
    if (n_tuples <= (1ULL << 24)) {
      std::vector<std::uint64_t> pool(n_tuples);
      std::iota(pool.begin(), pool.end(), 0ULL);
      for (std::uint64_t i = 0; i < need; ++i) {
        std::size_t j = i + rng.uniform_index(pool.size() - i);
        std::swap(pool[i], pool[j]);
        picks.push_back(pool[i]);
      }
    } else {
      std::unordered_set<std::uint64_t> seen;
      while (picks.size() < need) {
        std::uint64_t t = rng.next_u64() % n_tuples;
        if (seen.insert(t).second) picks.push_back(t);
      }
    }
    // Random partition into v groups of m: picks are already in uniform
    // random order, so consecutive chunks are a uniform partition.
    auto& table = g.rules_[level];
    table.assign(params.v, {});
    std::size_t idx = 0;
    for (int a = 0; a < params.v; ++a) {
      table[a].resize(params.m);
      for (int k = 0; k < params.m; ++k) {
        std::uint64_t code = picks[idx++];
        std::vector<int> tuple(params.s);
        for (int i = params.s - 1; i >= 0; --i) {
          tuple[i] = static_cast<int>(code % params.v);
          code /= params.v;
        }
        table[a][k] = std::move(tuple);
      }
    }
  }
  g.build_inverse();
  return g;
}

void Grammar::build_inverse() {
  inverse_.assign(params_.L, {});
  for (int level = 0; level < params_.L; ++level) {
    for (int a = 0; a < params_.v; ++a) {
      for (int k = 0; k < params_.m; ++k) {
        const auto& tuple = rules_[level][a][k];
        auto [it, inserted] =
            inverse_[level].emplace(pack_tuple(tuple.data(), params_.s, params_.v), a);
        if (!inserted) throw std::logic_error("ambiguous rule table");
      }
    }
  }
}

int Grammar::invert(int level, const int* tuple) const {
  const auto& table = inverse_[level - 1];
  auto it = table.find(pack_tuple(tuple, params_.s, params_.v));
  return it == table.end() ? -1 : it->second;
}

TokenSequence Grammar::sample_datum(Rng& rng, LatentTree* tree) const {
  std::vector<std::vector<int>> levels(params_.L + 1);
  levels[params_.L] = {static_cast<int>(rng.uniform_index(params_.v))};
  for (int level = params_.L; level >= 1; --level) {
    const auto& parents = levels[level];
    auto& children = levels[level - 1];
    children.reserve(parents.size() * params_.s);
    for (int a : parents) {
      int k = params_.m == 1 ? 0 : static_cast<int>(rng.uniform_index(params_.m));
      const auto& tuple = rules_[level - 1][a][k];
      children.insert(children.end(), tuple.begin(), tuple.end());
    }
  }
  TokenSequence x = levels[0];
  if (tree) tree->levels = std::move(levels);
  return x;
}

Dataset Grammar::sample_dataset(std::size_t P, Rng& rng) const {
  BigCount total = count_total_data(params_);
  if (total <= P - 1 && P > 0)
    throw std::invalid_argument("dataset size exceeds the number of generable strings (" +
                                total.str() + ")");
  Dataset ds;
  std::unordered_set<std::string> seen;
  while (ds.items.size() < P) {
    TokenSequence x = sample_datum(rng);
    std::string key(reinterpret_cast<const char*>(x.data()), x.size() * sizeof(int));
    if (seen.insert(std::move(key)).second) ds.items.push_back(std::move(x));
  }
  return ds;
}

std::vector<bool> Grammar::validate_layers(const TokenSequence& x) const {
  std::vector<bool> valid(params_.L, false);
  std::vector<int> cur = x;
  for (int level = 1; level <= params_.L; ++level) {
    std::vector<int> next(cur.size() / params_.s);
    bool ok = true;
    for (std::size_t j = 0; j < next.size(); ++j) {
      int a = invert(level, cur.data() + j * params_.s);
      if (a < 0) {
        ok = false;
        break;
      }
      next[j] = a;
    }
    if (!ok) break;
    valid[level - 1] = true;
    cur = std::move(next);
  }
  return valid;
}

std::vector<double> Grammar::block_validity_fraction(const TokenSequence& x) const {
  // Per-block propagation: a block containing an unresolved child symbol
  // (marked -1) is invalid, and stays -1 for the levels above it.
  std::vector<double> frac(params_.L, 0.0);
  std::vector<int> cur = x;
  for (int level = 1; level <= params_.L; ++level) {
    std::vector<int> next(cur.size() / params_.s);
    std::size_t good = 0;
    for (std::size_t j = 0; j < next.size(); ++j) {
      const int* block = cur.data() + j * params_.s;
      bool resolved = true;
      for (int c = 0; c < params_.s; ++c) resolved = resolved && block[c] >= 0;
      int a = resolved ? invert(level, block) : -1;
      next[j] = a;
      if (a >= 0) ++good;
    }
    frac[level - 1] = static_cast<double>(good) / static_cast<double>(next.size());
    cur = std::move(next);
  }
  return frac;
}

std::optional<LatentTree> Grammar::parse(const TokenSequence& x) const {
  LatentTree tree;
  tree.levels.resize(params_.L + 1);
  tree.levels[0] = x;
  for (int level = 1; level <= params_.L; ++level) {
    const auto& cur = tree.levels[level - 1];
    auto& next = tree.levels[level];
    next.resize(cur.size() / params_.s);
    for (std::size_t j = 0; j < next.size(); ++j) {
      int a = invert(level, cur.data() + j * params_.s);
      if (a < 0) return std::nullopt;
      next[j] = a;
    }
  }
  return tree;
}

std::vector<TokenSequence> Grammar::enumerate_all(std::uint64_t limit) const {
  BigCount total = count_total_data(params_);
  if (!(total <= limit))
    throw std::invalid_argument("enumeration refused: " + total.str() + " strings > limit");

  // Expand every root symbol through every combination of productions.
  std::vector<TokenSequence> out;
  out.reserve(static_cast<std::size_t>(total.value));
  for (int root = 0; root < params_.v; ++root) {
    // strings[level] enumerated iteratively from the top level down
    std::vector<std::vector<int>> current = {{root}};
    for (int level = params_.L; level >= 1; --level) {
      std::vector<std::vector<int>> expanded;
      for (const auto& str : current) {
        std::vector<int> choice(str.size(), 0);
        while (true) {
          std::vector<int> child;
          child.reserve(str.size() * params_.s);
          for (std::size_t i = 0; i < str.size(); ++i) {
            const auto& tuple = rules_[level - 1][str[i]][choice[i]];
            child.insert(child.end(), tuple.begin(), tuple.end());
          }
          expanded.push_back(std::move(child));
          int pos = static_cast<int>(str.size()) - 1;
          while (pos >= 0 && ++choice[pos] == params_.m) choice[pos--] = 0;
          if (pos < 0) break;
        }
      }
      current = std::move(expanded);
    }
    for (auto& x : current) out.push_back(std::move(x));
  }
  return out;
}

std::string Grammar::to_json() const {
  json j;
  j["format"] = "difflab-grammar";
  j["version"] = 1;
  j["params"] = {{"v", params_.v}, {"m", params_.m}, {"L", params_.L},
                 {"s", params_.s}, {"seed", params_.seed}};
  j["rules"] = rules_;
  return j.dump(2);
}

Grammar Grammar::from_json(const std::string& text) {
  json j = json::parse(text);
  if (j.value("format", "") != "difflab-grammar")
    throw std::invalid_argument("not a grammar document");
  Grammar g;
  g.params_.v = j["params"]["v"];
  g.params_.m = j["params"]["m"];
  g.params_.L = j["params"]["L"];
  g.params_.s = j["params"]["s"];
  g.params_.seed = j["params"]["seed"];
  g.params_.validate();
  g.rules_ = j["rules"].get<decltype(g.rules_)>();
  g.build_inverse();
  return g;
}

std::string dataset_to_csv(const Dataset& ds) {
  std::ostringstream out;
  for (const auto& x : ds.items) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (i) out << ',';
      out << x[i];
    }
    out << '\n';
  }
  return out.str();
}

Dataset dataset_from_csv(const std::string& text) {
  Dataset ds;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    TokenSequence x;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) x.push_back(std::stoi(cell));
    ds.items.push_back(std::move(x));
  }
  return ds;
}

}  // namespace difflab
