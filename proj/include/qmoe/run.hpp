#pragma once

// End-to-end compression run over a synthetic (or file-supplied) MoE layer,
// configured from a key = value text file.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "qmoe/calib_pipeline.hpp"
#include "qmoe/codec.hpp"
#include "qmoe/stats.hpp"

namespace qmoe {

// Config file format: one `key = value` per line; `#` starts a comment; blank
// lines ignored. Unknown keys are rejected. See README for the key list.
struct RunConfig {
  std::size_t num_experts = 16;
  std::size_t group_size = 16;
  std::size_t dim = 64;
  std::size_t samples = 100;
  std::size_t tokens_per_sample = 32;
  std::size_t fast_capacity = 4096;
  double cap_multiplier = 4.0;
  RouterRule router = RouterRule::hash;
  std::uint64_t router_seed = 1;
  double router_skew = 0.0;
  bool mask_tokens = true;
  double mask_rate = 0.05;
  double weight_std = 0.05;
  std::uint64_t data_seed = 7;
  std::uint64_t weight_seed = 11;
  std::uint64_t dense_seed = 13;
  double damping = 0.1;
  Solver solver = Solver::gptq;
  GridMode bits = GridMode::ternary;
  unsigned workers = 1;
  double max_fallback_fraction = 1.0;
  std::string weights_path;  // empty: synthetic Gaussian experts

  void set(std::string_view key, std::string_view value);
  std::string serialize() const;
  static RunConfig parse(std::string_view text);
};

RunConfig load_run_config(const std::string& path);

// Weights file ("QMOEWGT1"): num_experts, rows, cols as u64 LE, then
// num_experts * rows * cols f32 LE values, row-major per expert.
std::vector<WeightMatrix> read_weights(std::istream& in);
void write_weights(std::ostream& out, std::span<const WeightMatrix> experts);

struct ExpertSummary {
  std::size_t tokens = 0;
  std::size_t hessian_tokens = 0;
  bool fallback = false;
  double objective = 0.0;
  double sparsity = 0.0;
  RateReport rate;  // zero for two-bit runs
};

struct RunResult {
  RunConfig config;
  std::vector<QuantizedMatrix> quantized;
  std::vector<CompressedMatrix> compressed;  // ternary runs only
  std::vector<ExpertSummary> experts;
  RateReport total_rate;
  double mean_objective = 0.0;
  double sparsity = 0.0;
  std::size_t fallbacks = 0;
  std::size_t cap = 0;
  std::uint64_t tier_reads = 0;
  std::uint64_t tier_writes = 0;
  std::uint32_t min_reads_per_token = 0;
  std::uint32_t max_reads_per_token = 0;
  std::uint32_t min_writes_per_token = 0;
  std::uint32_t max_writes_per_token = 0;
  std::size_t peak_fast_occupancy = 0;

  bool fallback_threshold_exceeded() const;
  std::string report_text() const;
  std::string report_json() const;
};

// `dict` may be null for two-bit runs.
RunResult run_compression(const RunConfig& cfg, const Dictionary* dict);

}  // namespace qmoe
