#include "qmoe/tern_quant.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "qmoe/error.hpp"

namespace qmoe {

WeightMatrix::WeightMatrix(std::size_t rows, std::size_t cols)
    : rows_(rows), cols_(cols), values_(rows * cols, 0.0) {}

WeightMatrix::WeightMatrix(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), values_(std::move(values)) {
  require(values_.size() == rows_ * cols_, "weight matrix: value count does not match shape");
  for (double v : values_) require(std::isfinite(v), "weight matrix: non-finite value");
}

std::array<float, 4> row_levels(GridMode mode, MinMax mm) {
  const float lo = mm.lo.to_float();
  const float hi = mm.hi.to_float();
  if (mode == GridMode::ternary) return {0.0f, lo, hi, 0.0f};

  // Two-bit: zero-point grid with 4 steps over [lo, hi]; the zero level is exact.
  std::array<float, 4> out{0.0f, 0.0f, 0.0f, 0.0f};
  if (!(hi > lo)) return out;
  const float scale = (hi - lo) / 3.0f;
  const int zero = std::clamp(static_cast<int>(std::lround(-lo / scale)), 0, 3);
  int slot = 1;
  for (int k = 0; k < 4; ++k) {
    if (k == zero) continue;
    out[slot++] = static_cast<float>(k - zero) * scale;
  }
  return out;
}

float QuantizedMatrix::dequant(std::size_t r, std::size_t c) const {
  return row_levels(mode, row_minmax[r])[code(r, c)];
}

Eigen::MatrixXd QuantizedMatrix::dequantized() const {
  Eigen::MatrixXd out(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const auto levels = row_levels(mode, row_minmax[r]);
    for (std::size_t c = 0; c < cols; ++c) out(r, c) = levels[code(r, c)];
  }
  return out;
}

QuantGrid::QuantGrid(GridMode mode, std::vector<MinMax> minmax) : mode_(mode), minmax_(std::move(minmax)) {
  levels_.reserve(minmax_.size());
  for (const auto& mm : minmax_) levels_.push_back(row_levels(mode_, mm));
}

std::uint8_t QuantGrid::nearest(std::size_t r, double w) const {
  const auto& levels = levels_[r];
  std::uint8_t best = 0;
  double best_dist = std::abs(w - levels[0]);
  for (int c = 1; c < num_levels(); ++c) {
    const double dist = std::abs(w - static_cast<double>(levels[c]));
    if (dist < best_dist || (dist == best_dist && std::abs(levels[c]) < std::abs(levels[best]))) {
      best = static_cast<std::uint8_t>(c);
      best_dist = dist;
    }
  }
  return best;
}

QuantGrid make_grid(const WeightMatrix& w, GridMode mode) {
  std::vector<MinMax> minmax(w.rows());
  for (std::size_t r = 0; r < w.rows(); ++r) {
    const auto row = w.row(r);
    const auto [lo, hi] = std::minmax_element(row.begin(), row.end());
    // The grid always spans zero.
    minmax[r].lo = Bf16::from_float(static_cast<float>(std::min(*lo, 0.0)));
    minmax[r].hi = Bf16::from_float(static_cast<float>(std::max(*hi, 0.0)));
  }
  return QuantGrid(mode, std::move(minmax));
}

QuantizedMatrix rtn_quantize(const WeightMatrix& w, const QuantGrid& grid) {
  require(grid.rows() == w.rows(), "rtn_quantize: grid does not match weight rows");
  QuantizedMatrix q{grid.mode(), w.rows(), w.cols(), std::vector<std::uint8_t>(w.rows() * w.cols()), grid.minmax()};
  for (std::size_t r = 0; r < w.rows(); ++r)
    for (std::size_t c = 0; c < w.cols(); ++c) q.codes[r * w.cols() + c] = grid.nearest(r, w(r, c));
  return q;
}

Hessian Hessian::zero(std::size_t dim) { return Hessian{Eigen::MatrixXd::Zero(dim, dim), 0}; }

Hessian Hessian::identity(std::size_t dim) { return Hessian{Eigen::MatrixXd::Identity(dim, dim), dim}; }

void add_to_hessian(Hessian& into, std::span<const float> tokens, std::optional<std::span<const std::uint8_t>> mask) {
  const std::size_t dim = into.dim();
  require(dim > 0 && tokens.size() % dim == 0, "hessian: token block size is not a multiple of the dimension");
  const std::size_t n = tokens.size() / dim;
  if (mask) require(mask->size() == n, "hessian: mask length does not match token count");

  std::size_t kept = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (!mask || (*mask)[i] == 0) ++kept;
  if (kept == 0) return;

  Eigen::MatrixXd x(dim, kept);
  std::size_t col = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (mask && (*mask)[i] != 0) continue;
    for (std::size_t d = 0; d < dim; ++d) x(d, col) = tokens[i * dim + d];
    ++col;
  }
  Eigen::MatrixXd lower = Eigen::MatrixXd::Zero(dim, dim);
  lower.selfadjointView<Eigen::Lower>().rankUpdate(x);
  into.h += lower.selfadjointView<Eigen::Lower>();
  into.tokens += kept;
}

Hessian accumulate_hessian(std::span<const float> tokens, std::size_t dim,
                           std::optional<std::span<const std::uint8_t>> mask) {
  Hessian h = Hessian::zero(dim);
  add_to_hessian(h, tokens, mask);
  return h;
}

namespace {

// Upper Cholesky factor of the dampened inverse Hessian, or nothing when the
// Hessian cannot be inverted.
std::optional<Eigen::MatrixXd> inverse_hessian_factor(const Hessian& hessian, double damping) {
  if (hessian.empty()) return std::nullopt;
  Eigen::MatrixXd h = hessian.h;
  if (!h.allFinite()) return std::nullopt;
  const double mean_diag = h.diagonal().mean();
  if (!(mean_diag > 0.0)) return std::nullopt;
  h.diagonal().array() += damping * mean_diag;

  Eigen::LLT<Eigen::MatrixXd> llt(h);
  if (llt.info() != Eigen::Success) return std::nullopt;
  const Eigen::MatrixXd hinv = llt.solve(Eigen::MatrixXd::Identity(h.rows(), h.cols()));
  Eigen::LLT<Eigen::MatrixXd> llt_inv(hinv);
  if (llt_inv.info() != Eigen::Success) return std::nullopt;
  Eigen::MatrixXd upper = llt_inv.matrixU();
  if (!upper.allFinite() || (upper.diagonal().array() <= 0.0).any()) return std::nullopt;
  return upper;
}

struct SolverState {
  std::size_t index;
  QuantGrid grid;
  Eigen::MatrixXd w;
  Eigen::MatrixXd upper;
  Eigen::MatrixXd err;
};

}  // namespace

std::vector<GptqResult> gptq_quantize(std::span<const ExpertRef> group, const GptqOptions& opts) {
  std::vector<GptqResult> results(group.size());
  if (group.empty()) return results;
  require(opts.block_size >= 1, "gptq: block size must be positive");
  require(opts.damping >= 0.0, "gptq: damping must be non-negative");

  const std::size_t rows = group.front().weights.rows();
  const std::size_t cols = group.front().weights.cols();
  for (const auto& e : group) {
    require(e.weights.rows() == rows && e.weights.cols() == cols, "gptq: experts in a group must share one shape");
    require(e.hessian.dim() == cols, "gptq: hessian dimension does not match weight columns");
  }

  std::vector<SolverState> active;
  for (std::size_t e = 0; e < group.size(); ++e) {
    const auto& w = group[e].weights;
    QuantGrid grid = make_grid(w, opts.mode);
    auto upper = inverse_hessian_factor(group[e].hessian, opts.damping);
    results[e].quantized = QuantizedMatrix{opts.mode, rows, cols, std::vector<std::uint8_t>(rows * cols), grid.minmax()};
    if (!upper) {
      results[e].quantized = rtn_quantize(w, grid);
      results[e].fallback = true;
      continue;
    }
    Eigen::MatrixXd wm(rows, cols);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) wm(r, c) = w(r, c);
    active.push_back(SolverState{e, std::move(grid), std::move(wm), std::move(*upper), {}});
  }

  const auto n = static_cast<Eigen::Index>(cols);
  const auto block = static_cast<Eigen::Index>(opts.block_size);
  for (Eigen::Index i1 = 0; i1 < n; i1 += block) {
    const Eigen::Index i2 = std::min(i1 + block, n);
    const Eigen::Index count = i2 - i1;
    for (auto& s : active) s.err.setZero(static_cast<Eigen::Index>(rows), count);

    for (Eigen::Index i = i1; i < i2; ++i) {
      for (auto& s : active) {
        auto& codes = results[s.index].quantized.codes;
        const double d = s.upper(i, i);
        for (std::size_t r = 0; r < rows; ++r) {
          const auto ri = static_cast<Eigen::Index>(r);
          const double w = s.w(ri, i);
          const std::uint8_t code = s.grid.nearest(r, w);
          codes[r * cols + static_cast<std::size_t>(i)] = code;
          s.err(ri, i - i1) = (w - static_cast<double>(s.grid.level(r, code))) / d;
        }
        const Eigen::Index rest = i2 - i - 1;
        if (rest > 0) s.w.middleCols(i + 1, rest) -= s.err.col(i - i1) * s.upper.row(i).segment(i + 1, rest);
      }
    }
    if (i2 < n) {
      for (auto& s : active) s.w.rightCols(n - i2) -= s.err * s.upper.block(i1, i2, count, n - i2);
    }
  }
  return results;
}

double layer_objective(const WeightMatrix& w, const QuantizedMatrix& q, const Hessian& h) {
  require(q.rows == w.rows() && q.cols == w.cols(), "objective: shape mismatch");
  require(h.dim() == w.cols(), "objective: hessian dimension mismatch");
  Eigen::MatrixXd delta = q.dequantized();
  for (std::size_t r = 0; r < w.rows(); ++r)
    for (std::size_t c = 0; c < w.cols(); ++c)
      delta(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) -= w(r, c);
  return (delta * h.h).cwiseProduct(delta).sum();
}

}  // namespace qmoe
