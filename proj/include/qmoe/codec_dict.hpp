#pragma once

// Static decoding dictionary: the 2^16 most probable sequences of ternary
// value pairs (1 to 14 pairs each) under an iid zero-heavy distribution.

#include <array>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

namespace qmoe {

// P(0) = p0, P(1) = P(2) = (1 - p0) / 2.
struct PairDistribution {
  double p0 = 0.885;

  double p_nonzero() const { return (1.0 - p0) / 2.0; }
  // The all-zero pair is the unique most probable pair only above 1/3.
  bool valid_for_dictionary() const { return p0 > 1.0 / 3.0 && p0 < 1.0; }
};

inline constexpr std::size_t kDictEntries = std::size_t{1} << 16;
inline constexpr std::size_t kMaxPairs = 14;
inline constexpr std::size_t kMaxValues = 2 * kMaxPairs;

// Two 32-bit words: bits [0,4) of each hold the pair count, then 14 two-bit
// value slots (word 0: values 0..13, word 1: values 14..27). Unused slots are 0.
using DecodeWords = std::array<std::uint32_t, 2>;

DecodeWords pack_decode_words(std::span<const std::uint8_t> values);
std::vector<std::uint8_t> unpack_decode_words(const DecodeWords& words);

inline std::uint32_t decode_pair_count(std::uint32_t word) { return word & 0xFu; }

// Pair (a, b) as a symbol in [0, 9).
inline std::uint8_t pair_symbol(std::uint8_t a, std::uint8_t b) { return static_cast<std::uint8_t>(3 * a + b); }

struct PrefixMatch {
  std::uint16_t codeword = 0;
  std::size_t pairs = 0;
};

class Dictionary {
 public:
  static Dictionary generate(PairDistribution dist = {});
  // Rebuilds entries and the encoding trie from a flat decode-word table.
  static Dictionary from_decode_words(double p0, std::vector<std::uint32_t> words);

  double p0() const { return p0_; }
  std::uint64_t hash() const { return hash_; }
  std::size_t size() const { return words_.size() / 2; }

  // Flat table, two words per codeword.
  std::span<const std::uint32_t> decode_table() const { return words_; }
  DecodeWords decode_words(std::uint16_t codeword) const {
    return {words_[2 * std::size_t{codeword}], words_[2 * std::size_t{codeword} + 1]};
  }
  std::size_t pair_count(std::uint16_t codeword) const { return decode_pair_count(words_[2 * std::size_t{codeword}]); }
  std::vector<std::uint8_t> entry(std::uint16_t codeword) const { return unpack_decode_words(decode_words(codeword)); }

  // Longest dictionary entry that prefixes `symbols[start..]`. Always consumes
  // at least one pair.
  PrefixMatch longest_prefix(std::span<const std::uint8_t> symbols, std::size_t start) const;

  void save(std::ostream& out) const;
  static Dictionary load(std::istream& in);

 private:
  Dictionary(double p0, std::vector<std::uint32_t> words);

  double p0_ = 0.0;
  std::uint64_t hash_ = 0;
  std::vector<std::uint32_t> words_;
  std::vector<std::array<std::uint32_t, 9>> trie_;  // child node ids, 0 = none
  std::vector<std::int32_t> trie_codeword_;         // -1 when the node is not an entry
};

// FNV-1a over the little-endian bytes of the decode table.
std::uint64_t dictionary_hash(std::span<const std::uint32_t> words);

}  // namespace qmoe
