#include "qmoe/codec_dict.hpp"

#include <cmath>
#include <istream>
#include <ostream>
#include <queue>
#include <string>

#include "qmoe/byte_io.hpp"
#include "qmoe/error.hpp"

namespace qmoe {

namespace {

constexpr std::string_view kDictMagic = "QMOEDICT";
constexpr std::uint8_t kDictVersion = 1;

// A pair sequence packed 4 bits per pair (a << 2 | b), first pair in the most
// significant position, so equal-length sequences compare lexicographically.
struct Candidate {
  double log_prob = 0.0;
  std::uint8_t pairs = 0;
  std::uint8_t zeros = 0;
  std::uint8_t nonzeros = 0;
  std::uint64_t packed = 0;
};

// Pop order: higher probability first. Probabilities that share the exponent
// vector (count of zero and non-zero values) are exactly tied; ties go to the
// shorter sequence, then lexicographically smaller values.
bool pops_before(const Candidate& a, const Candidate& b) {
  const bool same_exponents = a.zeros == b.zeros && a.nonzeros == b.nonzeros;
  if (!same_exponents && a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
  if (a.pairs != b.pairs) return a.pairs < b.pairs;
  return a.packed < b.packed;
}

struct PopsLater {
  bool operator()(const Candidate& a, const Candidate& b) const { return pops_before(b, a); }
};

std::vector<std::uint8_t> candidate_values(const Candidate& c) {
  std::vector<std::uint8_t> values;
  values.reserve(2 * c.pairs);
  for (int i = c.pairs - 1; i >= 0; --i) {
    const auto nib = static_cast<std::uint8_t>((c.packed >> (4 * i)) & 0xFu);
    values.push_back(nib >> 2);
    values.push_back(nib & 0x3u);
  }
  return values;
}

}  // namespace

DecodeWords pack_decode_words(std::span<const std::uint8_t> values) {
  require(values.size() % 2 == 0, "decode words: odd value count");
  const std::size_t pairs = values.size() / 2;
  require(pairs >= 1 && pairs <= kMaxPairs, "decode words: pair count out of range [1, 14]");
  DecodeWords w{static_cast<std::uint32_t>(pairs), static_cast<std::uint32_t>(pairs)};
  for (std::size_t i = 0; i < values.size(); ++i) {
    require(values[i] <= 2, "decode words: value is not ternary");
    w[i / 14] |= static_cast<std::uint32_t>(values[i]) << (4 + 2 * (i % 14));
  }
  return w;
}

std::vector<std::uint8_t> unpack_decode_words(const DecodeWords& words) {
  const std::size_t pairs = decode_pair_count(words[0]);
  std::vector<std::uint8_t> values(2 * pairs);
  for (std::size_t i = 0; i < values.size(); ++i)
    values[i] = static_cast<std::uint8_t>((words[i / 14] >> (4 + 2 * (i % 14))) & 0x3u);
  return values;
}

std::uint64_t dictionary_hash(std::span<const std::uint32_t> words) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::uint32_t w : words) {
    for (int b = 0; b < 4; ++b) {
      h ^= (w >> (8 * b)) & 0xFFu;
      h *= 0x100000001b3ull;
    }
  }
  return h;
}

Dictionary Dictionary::generate(PairDistribution dist) {
  require(dist.valid_for_dictionary(), "dictionary: p0 must lie in (1/3, 1)");
  const double log_zero = std::log(dist.p0);
  const double log_nonzero = std::log(dist.p_nonzero());

  std::priority_queue<Candidate, std::vector<Candidate>, PopsLater> queue;
  queue.push(Candidate{});

  std::vector<std::uint32_t> words;
  words.reserve(2 * kDictEntries);
  while (words.size() < 2 * kDictEntries) {
    const Candidate top = queue.top();
    queue.pop();
    if (top.pairs >= 1) {
      const auto w = pack_decode_words(candidate_values(top));
      words.push_back(w[0]);
      words.push_back(w[1]);
    }
    if (top.pairs == kMaxPairs) continue;
    for (std::uint8_t a = 0; a < 3; ++a) {
      for (std::uint8_t b = 0; b < 3; ++b) {
        Candidate child = top;
        child.pairs += 1;
        child.zeros += (a == 0) + (b == 0);
        child.nonzeros += (a != 0) + (b != 0);
        child.packed = (top.packed << 4) | static_cast<std::uint64_t>((a << 2) | b);
        child.log_prob = child.zeros * log_zero + child.nonzeros * log_nonzero;
        queue.push(child);
      }
    }
  }
  return Dictionary(dist.p0, std::move(words));
}

Dictionary Dictionary::from_decode_words(double p0, std::vector<std::uint32_t> words) {
  return Dictionary(p0, std::move(words));
}

Dictionary::Dictionary(double p0, std::vector<std::uint32_t> words) : p0_(p0), words_(std::move(words)) {
  if (words_.size() != 2 * kDictEntries) fail(Errc::corrupt_data, "dictionary: expected 65536 entries");
  hash_ = dictionary_hash(words_);

  trie_.assign(1, {});
  trie_codeword_.assign(1, -1);
  for (std::size_t cw = 0; cw < kDictEntries; ++cw) {
    const DecodeWords w{words_[2 * cw], words_[2 * cw + 1]};
    const std::size_t pairs = decode_pair_count(w[0]);
    if (pairs < 1 || pairs > kMaxPairs || decode_pair_count(w[1]) != pairs)
      fail(Errc::corrupt_data, "dictionary: bad pair count in entry " + std::to_string(cw));
    const auto values = unpack_decode_words(w);
    for (auto v : values)
      if (v > 2) fail(Errc::corrupt_data, "dictionary: non-ternary value in entry " + std::to_string(cw));
    if (pack_decode_words(values) != w) fail(Errc::corrupt_data, "dictionary: stray bits in entry " + std::to_string(cw));

    std::uint32_t node = 0;
    for (std::size_t p = 0; p < pairs; ++p) {
      const auto sym = pair_symbol(values[2 * p], values[2 * p + 1]);
      if (trie_[node][sym] == 0) {
        trie_[node][sym] = static_cast<std::uint32_t>(trie_.size());
        trie_.push_back({});
        trie_codeword_.push_back(-1);
      }
      node = trie_[node][sym];
    }
    if (trie_codeword_[node] >= 0) fail(Errc::corrupt_data, "dictionary: duplicate entry " + std::to_string(cw));
    trie_codeword_[node] = static_cast<std::int32_t>(cw);
  }
  for (std::size_t sym = 0; sym < 9; ++sym) {
    const auto child = trie_[0][sym];
    if (child == 0 || trie_codeword_[child] < 0) fail(Errc::corrupt_data, "dictionary: missing a single-pair entry");
  }
}

PrefixMatch Dictionary::longest_prefix(std::span<const std::uint8_t> symbols, std::size_t start) const {
  require(start < symbols.size(), "longest_prefix: start beyond end of stream");
  PrefixMatch best;
  std::uint32_t node = 0;
  for (std::size_t i = start; i < symbols.size(); ++i) {
    require(symbols[i] < 9, "longest_prefix: invalid pair symbol");
    node = trie_[node][symbols[i]];
    if (node == 0) break;
    if (trie_codeword_[node] >= 0) best = {static_cast<std::uint16_t>(trie_codeword_[node]), i - start + 1};
  }
  return best;
}

void Dictionary::save(std::ostream& out) const {
  io::write_magic(out, kDictMagic);
  io::write_le<std::uint8_t>(out, kDictVersion);
  io::write_f64(out, p0_);
  for (std::uint32_t w : words_) io::write_le(out, w);
  if (!out) fail(Errc::io, "dictionary: write failed");
}

Dictionary Dictionary::load(std::istream& in) {
  if (!io::read_magic(in, kDictMagic, "dictionary file")) fail(Errc::corrupt_data, "dictionary file is empty");
  const auto version = io::read_le<std::uint8_t>(in, "dictionary version");
  if (version != kDictVersion) fail(Errc::corrupt_data, "dictionary: unsupported version " + std::to_string(version));
  const double p0 = io::read_f64(in, "dictionary p0");
  std::vector<std::uint32_t> words(2 * kDictEntries);
  for (auto& w : words) w = io::read_le<std::uint32_t>(in, "dictionary entries");
  return Dictionary(p0, std::move(words));
}

}  // namespace qmoe
