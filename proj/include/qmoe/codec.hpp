#pragma once

// Sub-1-bit matrix format: each row is an independent stream of 16-bit
// dictionary codewords. Provides encoding, pure decompression, the fused
// decompress + matrix-vector product, and a lane-level replay of the
// one-warp-per-row decode schedule.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "qmoe/bf16.hpp"
#include "qmoe/codec_dict.hpp"
#include "qmoe/tern_quant.hpp"

namespace qmoe {

struct CompressedMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint16_t> codewords;
  std::vector<std::uint32_t> row_off;  // rows + 1 entries, row_off[0] == 0
  std::vector<MinMax> row_minmax;
  std::uint64_t dict_hash = 0;

  std::span<const std::uint16_t> row_codewords(std::size_t r) const {
    return {codewords.data() + row_off[r], row_off[r + 1] - row_off[r]};
  }

  friend bool operator==(const CompressedMatrix&, const CompressedMatrix&) = default;
};

// Structural checks (offsets, sizes); throws Errc::corrupt_data.
void validate(const CompressedMatrix& c);

// Greedy longest-prefix encoding of every row. Requires an even column count
// and ternary codes.
CompressedMatrix encode(const QuantizedMatrix& t, const Dictionary& dict);

QuantizedMatrix decompress(const CompressedMatrix& c, const Dictionary& dict, unsigned workers = 1);

// Variants that reuse the output's storage, for tight encode/decode loops.
void encode_into(const QuantizedMatrix& t, const Dictionary& dict, CompressedMatrix& out);
void decompress_into(const CompressedMatrix& c, const Dictionary& dict, QuantizedMatrix& out, unsigned workers = 1);

// y[r] = bf16(y[r] + bf16(sum_j dequant(t[r][j]) * x[j])), accumulated in
// float per lane and reduced like a warp shuffle-down tree.
void fused_matvec(const CompressedMatrix& c, const Dictionary& dict, std::span<const float> x, std::span<float> y,
                  unsigned workers = 1);

inline constexpr int kWarpLanes = 32;
inline constexpr int kExtractLanes = 28;

struct SymbolStep {
  std::uint16_t codeword = 0;
  std::uint32_t pair_count = 0;
  std::size_t value_offset = 0;  // idx before this symbol
  std::uint32_t active_mask = 0;     // lanes executing the extraction branch
  std::uint32_t extracting_mask = 0; // lanes whose slot holds a real value
};

struct WarpTrace {
  std::size_t row = 0;
  std::vector<std::size_t> block_fetches;  // codewords loaded per shared-memory block
  std::vector<SymbolStep> steps;
  std::vector<std::uint8_t> values;        // extracted ternary values, in order
  float lane_partials[kWarpLanes] = {};
  float result = 0.0f;                     // lane 0 after the shuffle reduction
};

// Replays the kernel's per-lane schedule for one row and checks the extracted
// values against decompress(); throws Errc::corrupt_data on disagreement.
WarpTrace simulate_warp_row(const CompressedMatrix& c, std::size_t row, const Dictionary& dict,
                            std::span<const float> x = {});

// Checkpoint container ("QMOE0001"), one or more matrices back to back.
void write_compressed(std::ostream& out, const CompressedMatrix& c);
std::vector<CompressedMatrix> read_checkpoint(std::istream& in);

// Raw dump of codes plus per-row min/max ("QMOERAW1").
void write_raw(std::ostream& out, const QuantizedMatrix& t);
std::vector<QuantizedMatrix> read_raw(std::istream& in);

}  // namespace qmoe
