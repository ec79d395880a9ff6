#pragma once

// Sparsity, compression-rate accounting, entropy limit, and iid sampling of
// ternary matrices.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>

#include "qmoe/codec.hpp"
#include "qmoe/tern_quant.hpp"

namespace qmoe {

// Fraction of code-0 entries.
double natural_sparsity(const QuantizedMatrix& t);

// iid values with P(0) = p0, P(1) = P(2) = (1 - p0) / 2; row min/max set to
// the placeholder (-1, 1). Deterministic in `seed` across platforms.
QuantizedMatrix sample_ternary(double p0, std::size_t rows, std::size_t cols, std::uint64_t seed);

// Bit accounting for compressed expert matrices. The shared dictionary is not
// charged to any matrix.
struct RateReport {
  std::uint64_t payload_bits = 0;   // 16 per codeword
  std::uint64_t metadata_bits = 0;  // 32 per row offset (rows + 1) and 32 per row min/max pair
  std::uint64_t original_bits = 0;  // 16 per parameter
  std::uint64_t parameters = 0;

  double rate() const;
  double bits_per_parameter() const { return 16.0 / rate(); }

  RateReport& operator+=(const RateReport& other);
};

RateReport compression_rate(const CompressedMatrix& c);

// 16 / H(p0), with H the per-value Shannon entropy of the distribution.
double theoretical_limit(double p0);

std::string to_text(const RateReport& r);

}  // namespace qmoe
