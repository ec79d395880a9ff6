#include "qmoe/stats.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "qmoe/error.hpp"
#include "random.hpp"

namespace qmoe {

double natural_sparsity(const QuantizedMatrix& t) {
  require(!t.codes.empty(), "natural_sparsity: empty matrix");
  const auto zeros = std::count(t.codes.begin(), t.codes.end(), std::uint8_t{0});
  return static_cast<double>(zeros) / static_cast<double>(t.codes.size());
}

QuantizedMatrix sample_ternary(double p0, std::size_t rows, std::size_t cols, std::uint64_t seed) {
  require(p0 >= 0.0 && p0 <= 1.0, "sample_ternary: p0 must lie in [0, 1]");
  const double p_one = p0 + (1.0 - p0) / 2.0;
  const MinMax placeholder{Bf16::from_float(-1.0f), Bf16::from_float(1.0f)};
  QuantizedMatrix t{GridMode::ternary, rows, cols, std::vector<std::uint8_t>(rows * cols),
                    std::vector<MinMax>(rows, placeholder)};
  detail::Rng rng(seed);
  for (auto& code : t.codes) {
    const double u = rng.uniform();
    code = u < p0 ? 0 : (u < p_one ? 1 : 2);
  }
  return t;
}

double RateReport::rate() const {
  const auto stored = payload_bits + metadata_bits;
  return stored == 0 ? 0.0 : static_cast<double>(original_bits) / static_cast<double>(stored);
}

RateReport& RateReport::operator+=(const RateReport& other) {
  payload_bits += other.payload_bits;
  metadata_bits += other.metadata_bits;
  original_bits += other.original_bits;
  parameters += other.parameters;
  return *this;
}

RateReport compression_rate(const CompressedMatrix& c) {
  validate(c);
  RateReport r;
  r.parameters = static_cast<std::uint64_t>(c.rows) * c.cols;
  r.payload_bits = 16ull * c.codewords.size();
  r.metadata_bits = 32ull * (c.rows + 1) + 32ull * c.rows;
  r.original_bits = 16ull * r.parameters;
  return r;
}

double theoretical_limit(double p0) {
  if (!(p0 > 0.0 && p0 < 1.0)) fail(Errc::invalid_argument, "theoretical_limit: undefined for p0 outside (0, 1)");
  const double q = 1.0 - p0;
  const double entropy = -p0 * std::log2(p0) - q * std::log2(q / 2.0);
  return 16.0 / entropy;
}

std::string to_text(const RateReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "parameters %llu\npayload_bits %llu\nmetadata_bits %llu\noriginal_bits %llu\nrate %.4f\nbits_per_parameter %.4f\n",
                static_cast<unsigned long long>(r.parameters), static_cast<unsigned long long>(r.payload_bits),
                static_cast<unsigned long long>(r.metadata_bits), static_cast<unsigned long long>(r.original_bits),
                r.rate(), r.bits_per_parameter());
  return buf;
}

}  // namespace qmoe
