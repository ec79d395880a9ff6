#include "qmoe/codec.hpp"

#include <istream>
#include <ostream>
#include <string>

#include "parallel.hpp"
#include "qmoe/byte_io.hpp"
#include "qmoe/error.hpp"

namespace qmoe {

namespace {

constexpr std::string_view kCheckpointMagic = "QMOE0001";
constexpr std::string_view kRawMagic = "QMOERAW1";
// Upper bound on header dimensions accepted from files.
constexpr std::uint64_t kMaxDim = std::uint64_t{1} << 32;

std::string row_name(std::size_t r) { return "row " + std::to_string(r); }

void check_dictionary(const CompressedMatrix& c, const Dictionary& dict) {
  if (c.dict_hash != dict.hash()) fail(Errc::dictionary_mismatch, "compressed matrix was encoded with a different dictionary");
}

inline std::uint8_t slot_value(const DecodeWords& w, std::size_t i) {
  return static_cast<std::uint8_t>((w[i / 14] >> (4 + 2 * (i % 14))) & 0x3u);
}

// Decodes one row into out[0, cols); throws on length disagreement.
void decode_row(const CompressedMatrix& c, std::size_t r, const Dictionary& dict, std::uint8_t* out) {
  std::size_t idx = 0;
  for (std::uint16_t cw : c.row_codewords(r)) {
    const auto words = dict.decode_words(cw);
    const std::size_t n = 2 * decode_pair_count(words[0]);
    if (idx + n > c.cols) fail(Errc::corrupt_data, row_name(r) + " decodes past its column count");
    for (std::size_t i = 0; i < n; ++i) out[idx + i] = slot_value(words, i);
    idx += n;
  }
  if (idx != c.cols) fail(Errc::corrupt_data, row_name(r) + " decodes to fewer values than its column count");
}

}  // namespace

void validate(const CompressedMatrix& c) {
  if (c.cols % 2 != 0) fail(Errc::corrupt_data, "compressed matrix: odd column count");
  if (c.row_off.size() != c.rows + 1) fail(Errc::corrupt_data, "compressed matrix: row offset table has wrong length");
  if (c.row_minmax.size() != c.rows) fail(Errc::corrupt_data, "compressed matrix: min/max table has wrong length");
  if (c.row_off[0] != 0) fail(Errc::corrupt_data, "compressed matrix: first row offset is not zero");
  for (std::size_t r = 0; r < c.rows; ++r)
    if (c.row_off[r + 1] < c.row_off[r]) fail(Errc::corrupt_data, "compressed matrix: row offsets decrease");
  if (c.row_off.back() != c.codewords.size()) fail(Errc::corrupt_data, "compressed matrix: codeword stream length mismatch");
}

void encode_into(const QuantizedMatrix& t, const Dictionary& dict, CompressedMatrix& c) {
  require(t.mode == GridMode::ternary, "encode: only ternary matrices can be encoded");
  require(t.cols % 2 == 0, "encode: column count must be even (pad with a zero column)");
  require(t.codes.size() == t.rows * t.cols && t.row_minmax.size() == t.rows, "encode: inconsistent matrix");

  c.rows = t.rows;
  c.cols = t.cols;
  c.row_minmax.assign(t.row_minmax.begin(), t.row_minmax.end());
  c.dict_hash = dict.hash();
  c.codewords.clear();
  c.row_off.clear();
  c.row_off.reserve(t.rows + 1);
  c.row_off.push_back(0);

  thread_local std::vector<std::uint8_t> symbols;
  symbols.resize(t.cols / 2);
  for (std::size_t r = 0; r < t.rows; ++r) {
    for (std::size_t p = 0; p < symbols.size(); ++p) {
      const auto a = t.code(r, 2 * p);
      const auto b = t.code(r, 2 * p + 1);
      require(a <= 2 && b <= 2, "encode: code outside {0, 1, 2}");
      symbols[p] = pair_symbol(a, b);
    }
    std::size_t pos = 0;
    while (pos < symbols.size()) {
      const auto m = dict.longest_prefix(symbols, pos);
      c.codewords.push_back(m.codeword);
      pos += m.pairs;
    }
    require(c.codewords.size() <= UINT32_MAX, "encode: codeword stream exceeds 32-bit offsets");
    c.row_off.push_back(static_cast<std::uint32_t>(c.codewords.size()));
  }
}

CompressedMatrix encode(const QuantizedMatrix& t, const Dictionary& dict) {
  CompressedMatrix c;
  encode_into(t, dict, c);
  return c;
}

void decompress_into(const CompressedMatrix& c, const Dictionary& dict, QuantizedMatrix& t, unsigned workers) {
  validate(c);
  check_dictionary(c, dict);
  t.mode = GridMode::ternary;
  t.rows = c.rows;
  t.cols = c.cols;
  t.codes.resize(c.rows * c.cols);
  t.row_minmax.assign(c.row_minmax.begin(), c.row_minmax.end());
  detail::parallel_ranges(c.rows, workers, [&](std::size_t begin, std::size_t end) {
    for (std::size_t r = begin; r < end; ++r) decode_row(c, r, dict, t.codes.data() + r * c.cols);
  });
}

QuantizedMatrix decompress(const CompressedMatrix& c, const Dictionary& dict, unsigned workers) {
  QuantizedMatrix t;
  decompress_into(c, dict, t, workers);
  return t;
}

void fused_matvec(const CompressedMatrix& c, const Dictionary& dict, std::span<const float> x, std::span<float> y,
                  unsigned workers) {
  require(x.size() == c.cols, "fused_matvec: input length does not match column count");
  require(y.size() == c.rows, "fused_matvec: output length does not match row count");
  validate(c);
  check_dictionary(c, dict);

  detail::parallel_ranges(c.rows, workers, [&](std::size_t begin, std::size_t end) {
    for (std::size_t r = begin; r < end; ++r) {
      const auto deq = row_levels(GridMode::ternary, c.row_minmax[r]);
      float lanes[kWarpLanes] = {};
      std::size_t idx = 0;
      for (std::uint16_t cw : c.row_codewords(r)) {
        const auto words = dict.decode_words(cw);
        const std::size_t n = 2 * decode_pair_count(words[0]);
        if (idx + n > c.cols) fail(Errc::corrupt_data, row_name(r) + " decodes past its column count");
        for (std::size_t lane = 0; lane < n; ++lane) lanes[lane] += deq[slot_value(words, lane)] * x[idx + lane];
        idx += n;
      }
      if (idx != c.cols) fail(Errc::corrupt_data, row_name(r) + " decodes to fewer values than its column count");
      for (int offset = kWarpLanes / 2; offset > 0; offset /= 2)
        for (int lane = 0; lane < offset; ++lane) lanes[lane] += lanes[lane + offset];
      y[r] = round_bf16(y[r] + round_bf16(lanes[0]));
    }
  });
}

WarpTrace simulate_warp_row(const CompressedMatrix& c, std::size_t row, const Dictionary& dict, std::span<const float> x) {
  validate(c);
  check_dictionary(c, dict);
  require(row < c.rows, "simulate_warp_row: row out of range");
  require(x.empty() || x.size() == c.cols, "simulate_warp_row: input length does not match column count");

  WarpTrace trace;
  trace.row = row;
  const auto deq = row_levels(GridMode::ternary, c.row_minmax[row]);
  const auto stream = c.row_codewords(row);
  std::size_t idx = 0;

  for (std::size_t i = 0; i < stream.size(); i += kWarpLanes) {
    const std::size_t block = std::min<std::size_t>(kWarpLanes, stream.size() - i);
    trace.block_fetches.push_back(block);
    for (std::size_t j = 0; j < block; ++j) {
      const std::uint16_t enc = stream[i + j];
      const auto words = dict.decode_words(enc);
      const std::uint32_t pairs = decode_pair_count(words[0]);
      SymbolStep step{enc, pairs, idx, 0, 0};
      for (int lane = 0; lane < kWarpLanes; ++lane) {
        if (lane >= kExtractLanes) continue;
        step.active_mask |= 1u << lane;
        const std::uint32_t wx14 = words[static_cast<std::size_t>(lane / 14)];
        const auto ter = static_cast<std::uint8_t>((wx14 >> (4 + 2 * (lane % 14))) & 0x3u);
        const bool real = static_cast<std::uint32_t>(lane) < 2 * pairs;
        if (real) {
          step.extracting_mask |= 1u << lane;
          trace.values.push_back(ter);
        } else if (ter != 0) {
          fail(Errc::corrupt_data, "dictionary entry has a non-zero padded slot");
        }
        const std::size_t pos = idx + static_cast<std::size_t>(lane);
        if (!x.empty() && pos < x.size()) trace.lane_partials[lane] += deq[ter] * x[pos];
      }
      idx += 2 * (words[0] & 0xFu);
      trace.steps.push_back(step);
    }
  }

  float reduce[kWarpLanes];
  std::copy(std::begin(trace.lane_partials), std::end(trace.lane_partials), reduce);
  for (int offset = kWarpLanes / 2; offset > 0; offset /= 2)
    for (int lane = 0; lane < offset; ++lane) reduce[lane] += reduce[lane + offset];
  trace.result = reduce[0];

  std::vector<std::uint8_t> expected(c.cols);
  decode_row(c, row, dict, expected.data());
  if (trace.values != expected) fail(Errc::corrupt_data, "warp replay disagrees with decompress on " + row_name(row));
  return trace;
}

void write_compressed(std::ostream& out, const CompressedMatrix& c) {
  validate(c);
  io::write_magic(out, kCheckpointMagic);
  io::write_le<std::uint64_t>(out, c.rows);
  io::write_le<std::uint64_t>(out, c.cols);
  io::write_le<std::uint64_t>(out, c.dict_hash);
  for (auto off : c.row_off) io::write_le(out, off);
  for (const auto& mm : c.row_minmax) {
    io::write_le(out, mm.lo.bits);
    io::write_le(out, mm.hi.bits);
  }
  for (auto cw : c.codewords) io::write_le(out, cw);
  if (!out) fail(Errc::io, "checkpoint: write failed");
}

std::vector<CompressedMatrix> read_checkpoint(std::istream& in) {
  std::vector<CompressedMatrix> out;
  while (io::read_magic(in, kCheckpointMagic, "checkpoint")) {
    CompressedMatrix c;
    const auto rows = io::read_le<std::uint64_t>(in, "checkpoint rows");
    const auto cols = io::read_le<std::uint64_t>(in, "checkpoint cols");
    if (rows >= kMaxDim || cols >= kMaxDim) fail(Errc::corrupt_data, "checkpoint: implausible matrix shape");
    c.rows = rows;
    c.cols = cols;
    c.dict_hash = io::read_le<std::uint64_t>(in, "checkpoint dictionary hash");
    for (std::uint64_t r = 0; r <= rows; ++r) c.row_off.push_back(io::read_le<std::uint32_t>(in, "checkpoint row offsets"));
    for (std::uint64_t r = 0; r < rows; ++r) {
      MinMax mm;
      mm.lo.bits = io::read_le<std::uint16_t>(in, "checkpoint min/max");
      mm.hi.bits = io::read_le<std::uint16_t>(in, "checkpoint min/max");
      c.row_minmax.push_back(mm);
    }
    for (std::uint32_t i = 0; i < c.row_off.back(); ++i) c.codewords.push_back(io::read_le<std::uint16_t>(in, "checkpoint codewords"));
    validate(c);
    out.push_back(std::move(c));
  }
  return out;
}

void write_raw(std::ostream& out, const QuantizedMatrix& t) {
  io::write_magic(out, kRawMagic);
  io::write_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.mode));
  io::write_le<std::uint64_t>(out, t.rows);
  io::write_le<std::uint64_t>(out, t.cols);
  for (const auto& mm : t.row_minmax) {
    io::write_le(out, mm.lo.bits);
    io::write_le(out, mm.hi.bits);
  }
  out.write(reinterpret_cast<const char*>(t.codes.data()), static_cast<std::streamsize>(t.codes.size()));
  if (!out) fail(Errc::io, "raw dump: write failed");
}

std::vector<QuantizedMatrix> read_raw(std::istream& in) {
  std::vector<QuantizedMatrix> out;
  while (io::read_magic(in, kRawMagic, "raw dump")) {
    QuantizedMatrix t;
    const auto mode = io::read_le<std::uint8_t>(in, "raw dump mode");
    if (mode > 1) fail(Errc::corrupt_data, "raw dump: unknown grid mode");
    t.mode = static_cast<GridMode>(mode);
    const auto rows = io::read_le<std::uint64_t>(in, "raw dump rows");
    const auto cols = io::read_le<std::uint64_t>(in, "raw dump cols");
    if (rows >= kMaxDim || cols >= kMaxDim || rows * cols > (std::uint64_t{1} << 36))
      fail(Errc::corrupt_data, "raw dump: implausible matrix shape");
    t.rows = rows;
    t.cols = cols;
    for (std::uint64_t r = 0; r < rows; ++r) {
      MinMax mm;
      mm.lo.bits = io::read_le<std::uint16_t>(in, "raw dump min/max");
      mm.hi.bits = io::read_le<std::uint16_t>(in, "raw dump min/max");
      t.row_minmax.push_back(mm);
    }
    t.codes.resize(rows * cols);
    in.read(reinterpret_cast<char*>(t.codes.data()), static_cast<std::streamsize>(t.codes.size()));
    if (in.gcount() != static_cast<std::streamsize>(t.codes.size())) fail(Errc::corrupt_data, "raw dump: truncated codes");
    const std::uint8_t max_code = t.mode == GridMode::ternary ? 2 : 3;
    for (auto code : t.codes)
      if (code > max_code) fail(Errc::corrupt_data, "raw dump: code out of range");
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace qmoe
