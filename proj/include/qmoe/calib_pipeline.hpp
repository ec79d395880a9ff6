#pragma once

// Desk-scale compression orchestration: a contiguous list buffer of token
// hidden states, a two-tier (bulk/fast) transfer model, simulated routing,
// token capping, and the per-block dense + sparse loops.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "qmoe/tern_quant.hpp"

namespace qmoe {

inline constexpr std::int32_t kUnrouted = -1;

class ListBuffer {
 public:
  explicit ListBuffer(std::size_t dim);

  std::size_t dim() const { return dim_; }
  std::size_t token_count() const { return assignments_.size(); }
  std::size_t sample_count() const { return delimiters_.size() - 1; }

  // Appends one non-empty sample (token_count * dim floats). `mask` marks
  // tokens excluded from Hessian accumulation.
  void append_sample(std::span<const float> tokens, std::span<const std::uint8_t> mask = {});

  std::span<const std::size_t> delimiters() const { return delimiters_; }
  std::span<float> token(std::size_t i) { return {data_.data() + i * dim_, dim_}; }
  std::span<const float> token(std::size_t i) const { return {data_.data() + i * dim_, dim_}; }
  std::span<float> sample(std::size_t s);
  std::span<const float> data() const { return data_; }

  std::span<std::int32_t> assignments() { return assignments_; }
  std::span<const std::int32_t> assignments() const { return assignments_; }
  std::span<const std::uint8_t> mask() const { return mask_; }

  friend bool operator==(const ListBuffer&, const ListBuffer&) = default;

 private:
  std::size_t dim_;
  std::vector<float> data_;
  std::vector<std::size_t> delimiters_{0};
  std::vector<std::int32_t> assignments_;
  std::vector<std::uint8_t> mask_;
};

struct TokenBlock {
  std::size_t dim = 0;
  std::vector<float> tokens;          // contiguous, buffer order
  std::vector<std::size_t> positions; // buffer index of each token
  std::vector<std::uint8_t> mask;

  std::size_t size() const { return positions.size(); }
};

TokenBlock gather_expert_tokens(const ListBuffer& buf, std::int32_t expert);

// Overwrites buf tokens at `positions` with consecutive rows of `outputs`.
void scatter_expert_outputs(ListBuffer& buf, std::span<const std::size_t> positions, std::span<const float> outputs);

// Bulk (large) and fast (bounded) storage tiers; tracks per-token traffic.
class TierStore {
 public:
  explicit TierStore(std::size_t fast_capacity);

  std::size_t capacity() const { return capacity_; }
  std::size_t occupancy() const { return occupancy_; }
  std::size_t peak_occupancy() const { return peak_; }

  // Starts a block over `token_count` tokens; per-token counters restart.
  void begin_block(std::size_t token_count);
  // bulk -> fast; throws when the fast tier would overflow
  void fetch(std::span<const std::size_t> positions);
  // fast -> bulk; frees the fast-tier slots
  void write_back(std::span<const std::size_t> positions);

  std::uint64_t total_reads() const { return total_reads_; }
  std::uint64_t total_writes() const { return total_writes_; }
  std::span<const std::uint32_t> reads_per_token() const { return reads_; }
  std::span<const std::uint32_t> writes_per_token() const { return writes_; }

 private:
  std::size_t capacity_;
  std::size_t occupancy_ = 0;
  std::size_t peak_ = 0;
  std::uint64_t total_reads_ = 0;
  std::uint64_t total_writes_ = 0;
  std::vector<std::uint32_t> reads_;
  std::vector<std::uint32_t> writes_;
};

enum class RouterRule { hash, score_argmax };

class RouterSim {
 public:
  // `skew` adds a bias toward expert 0 under score_argmax.
  RouterSim(std::size_t num_experts, std::size_t dim, RouterRule rule, std::uint64_t seed, double skew = 0.0);

  std::size_t num_experts() const { return num_experts_; }
  std::int32_t route(std::span<const float> token) const;

 private:
  std::size_t num_experts_;
  std::size_t dim_;
  RouterRule rule_;
  std::uint64_t seed_;
  double skew_;
  std::vector<double> scores_;  // num_experts x dim
};

struct CapPlan {
  std::size_t cap = 0;              // ceil(multiplier * mean(count))
  std::size_t hessian_tokens = 0;   // buffer-order prefix used for the Hessian
  struct Chunk {
    std::size_t offset;
    std::size_t count;
  };
  std::vector<Chunk> chunks;        // covers every token, each <= fast capacity
};

CapPlan cap_tokens(std::size_t expert_tokens, std::span<const std::size_t> all_expert_counts,
                   std::size_t fast_capacity, double multiplier = 4.0);

// Transforms one sample in place: tokens.size() == n * dim.
using DenseFn = std::function<void(std::span<float> tokens, std::size_t dim)>;

// Fixed seeded linear map followed by tanh.
DenseFn make_random_dense(std::size_t dim, std::uint64_t seed);

enum class Solver { rtn, gptq };

struct BlockOptions {
  bool compress = true;
  GridMode mode = GridMode::ternary;
  Solver solver = Solver::gptq;
  double damping = 0.1;
  std::size_t group_size = 16;
  double cap_multiplier = 4.0;
  bool use_mask = true;
  unsigned workers = 1;
};

struct ExpertOutcome {
  std::size_t tokens = 0;
  std::size_t hessian_tokens = 0;  // unmasked tokens within the cap
  std::size_t iterations = 0;
  bool fallback = false;
  double objective = 0.0;  // ||(Q - W) X||^2 over the Hessian tokens
  QuantizedMatrix quantized;
};

struct BlockResult {
  std::vector<ExpertOutcome> experts;
  std::size_t cap = 0;
  std::size_t fallbacks = 0;
};

// Expert e maps a token x to W_e x (square dim x dim weights).
BlockResult run_block(ListBuffer& buf, const DenseFn& dense, const RouterSim& router,
                      std::span<const WeightMatrix> experts, TierStore& tier, const BlockOptions& opts);

}  // namespace qmoe
