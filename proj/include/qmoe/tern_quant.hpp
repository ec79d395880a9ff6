#pragma once

// Row-wise quantization grids, round-to-nearest, and the batched GPTQ solver
// used to compress groups of expert weight matrices.

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "qmoe/bf16.hpp"

namespace qmoe {

enum class GridMode : std::uint8_t { ternary = 0, two_bit = 1 };

// Dense row-major weight matrix (out_features x in_features).
class WeightMatrix {
 public:
  WeightMatrix() = default;
  WeightMatrix(std::size_t rows, std::size_t cols);
  WeightMatrix(std::size_t rows, std::size_t cols, std::vector<double> values);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  double operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }
  double& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
  std::span<const double> row(std::size_t r) const { return {values_.data() + r * cols_, cols_}; }
  std::span<const double> values() const { return values_; }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> values_;
};

// Quantized codes plus per-row (w_min, w_max) metadata.
//
// Code 0 always dequantizes to exactly 0. Ternary: 1 -> w_min, 2 -> w_max.
// Two-bit: 1..3 are the three non-zero levels of the zero-point grid in
// ascending order.
struct QuantizedMatrix {
  GridMode mode = GridMode::ternary;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> codes;
  std::vector<MinMax> row_minmax;

  std::uint8_t code(std::size_t r, std::size_t c) const { return codes[r * cols + c]; }
  float dequant(std::size_t r, std::size_t c) const;
  // rows x cols matrix of dequantized values
  Eigen::MatrixXd dequantized() const;

  friend bool operator==(const QuantizedMatrix&, const QuantizedMatrix&) = default;
};

// Dequantization table for one row, indexed by code.
std::array<float, 4> row_levels(GridMode mode, MinMax mm);

class QuantGrid {
 public:
  QuantGrid(GridMode mode, std::vector<MinMax> minmax);

  GridMode mode() const { return mode_; }
  std::size_t rows() const { return minmax_.size(); }
  int num_levels() const { return mode_ == GridMode::ternary ? 3 : 4; }
  const MinMax& minmax(std::size_t r) const { return minmax_[r]; }
  const std::vector<MinMax>& minmax() const { return minmax_; }
  float level(std::size_t r, std::uint8_t code) const { return levels_[r][code]; }

  // Nearest level; ties go to the smaller-magnitude level, then the lower code.
  std::uint8_t nearest(std::size_t r, double w) const;

 private:
  GridMode mode_;
  std::vector<MinMax> minmax_;
  std::vector<std::array<float, 4>> levels_;
};

QuantGrid make_grid(const WeightMatrix& w, GridMode mode);

QuantizedMatrix rtn_quantize(const WeightMatrix& w, const QuantGrid& grid);

struct Hessian {
  Eigen::MatrixXd h;
  std::size_t tokens = 0;  // number of tokens that contributed

  std::size_t dim() const { return static_cast<std::size_t>(h.rows()); }
  // No contributing tokens: callers fall back to round-to-nearest.
  bool empty() const { return tokens == 0; }

  static Hessian zero(std::size_t dim);
  static Hessian identity(std::size_t dim);
};

// Sum of x x^T over unmasked tokens. `tokens` is a contiguous block of
// token vectors of length `dim`; `mask[i] != 0` excludes token i.
Hessian accumulate_hessian(std::span<const float> tokens, std::size_t dim,
                           std::optional<std::span<const std::uint8_t>> mask = std::nullopt);

// Adds the unmasked tokens of `tokens` into `into`.
void add_to_hessian(Hessian& into, std::span<const float> tokens,
                    std::optional<std::span<const std::uint8_t>> mask = std::nullopt);

struct GptqOptions {
  GridMode mode = GridMode::ternary;
  double damping = 0.1;  // relative to mean(diag(H))
  std::size_t block_size = 128;
};

struct ExpertRef {
  const WeightMatrix& weights;
  const Hessian& hessian;
};

struct GptqResult {
  QuantizedMatrix quantized;
  bool fallback = false;  // GPTQ skipped, plain rounding used
};

// Jointly quantizes a group of same-shaped experts, column by column, with
// error feedback through each expert's inverse-Hessian Cholesky factor.
std::vector<GptqResult> gptq_quantize(std::span<const ExpertRef> group, const GptqOptions& opts = {});

// ||(Q - W) X||_F^2 expressed through H = X X^T.
double layer_objective(const WeightMatrix& w, const QuantizedMatrix& q, const Hessian& h);

}  // namespace qmoe
