#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "difflab/rng.hpp"

namespace difflab {

/// Parameters of a Random Hierarchy Model instance: a PCFG on a regular
/// tree of depth L and branching s, with v symbols per level and m
/// unambiguous productions per symbol.
struct GrammarParams {
  int v = 0;          // vocabulary size at every level
  int m = 0;          // productions (synonyms) per symbol
  int L = 0;          // tree depth
  int s = 0;          // branching factor
  std::uint64_t seed = 0;

  int dimension() const;      // d = s^L, the leaf string length
  int internal_nodes() const; // (d - 1) / (s - 1)
  void validate() const;      // throws std::invalid_argument on bad params
};

/// Exact count of generable strings, v * m^((d-1)/(s-1)), in 128-bit
/// arithmetic with saturation.
struct BigCount {
  unsigned __int128 value = 0;
  bool saturated = false;

  bool operator<=(std::uint64_t x) const { return !saturated && value <= x; }
  std::string str() const;
};

using TokenSequence = std::vector<int>;

/// Full derivation: levels[l] holds the symbols at level l, so levels[0]
/// is the leaf string and levels[L] the (single) root symbol.
struct LatentTree {
  std::vector<std::vector<int>> levels;
};

struct Dataset {
  std::vector<TokenSequence> items;
  std::size_t size() const { return items.size(); }
};

class Grammar {
 public:
  /// Builds a frozen rule set: m*v distinct s-tuples drawn uniformly
  /// without replacement, partitioned at random into v groups of m.
  /// Unambiguity holds by construction. Deterministic given params.seed.
  static Grammar build(const GrammarParams& params);

  const GrammarParams& params() const { return params_; }

  /// Production k of symbol `a` at parent level `level` (1-based, 1..L).
  const std::vector<int>& production(int level, int a, int k) const {
    return rules_[level - 1][a][k];
  }

  /// Parent symbol producing the s-tuple at `level`, or -1 when the tuple
  /// is not a production of any symbol.
  int invert(int level, const int* tuple) const;

  TokenSequence sample_datum(Rng& rng, LatentTree* tree = nullptr) const;

  /// P pairwise-distinct strings by rejection on duplicates. Throws when
  /// P exceeds the number of generable strings.
  Dataset sample_dataset(std::size_t P, Rng& rng) const;

  /// valid[l-1] is true iff x is consistent with the rules at layer l.
  /// Failure at a layer forces failure at every deeper layer.
  std::vector<bool> validate_layers(const TokenSequence& x) const;

  /// Fraction of valid s-blocks per layer (1.0 everywhere for generated
  /// data); blocks above an invalid one are counted as invalid.
  std::vector<double> block_validity_fraction(const TokenSequence& x) const;

  /// Re-derives the internal symbols of a fully valid string.
  std::optional<LatentTree> parse(const TokenSequence& x) const;

  /// All generable strings. Refuses when the count exceeds `limit`.
  std::vector<TokenSequence> enumerate_all(std::uint64_t limit = 100000) const;

  std::string to_json() const;
  static Grammar from_json(const std::string& text);

 private:
  Grammar() = default;
  void build_inverse();

  GrammarParams params_;
  // rules_[l][a][k]: production k of level-(l+1) symbol a, an s-tuple of
  // level-l symbols.
  std::vector<std::vector<std::vector<std::vector<int>>>> rules_;
  std::vector<std::unordered_map<std::uint64_t, int>> inverse_;
};

BigCount count_total_data(const GrammarParams& params);

std::string dataset_to_csv(const Dataset& ds);
Dataset dataset_from_csv(const std::string& text);

}  // namespace difflab
