#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <limits>
#include <random>

#include "qmoe/error.hpp"
#include "qmoe/tern_quant.hpp"
#include "test_support.hpp"

using namespace qmoe;

namespace {

WeightMatrix row_matrix(std::vector<double> v) {
  const std::size_t n = v.size();
  return WeightMatrix(1, n, std::move(v));
}

std::vector<GptqResult> solve_one(const WeightMatrix& w, const Hessian& h, GridMode mode = GridMode::ternary) {
  const ExpertRef ref{w, h};
  return gptq_quantize(std::span<const ExpertRef>(&ref, 1), GptqOptions{mode, 0.1, 128});
}

// Exhaustive minimum of (q - w)^T H (q - w) over every code assignment of a
// single row.
double brute_force_min(const WeightMatrix& w, const QuantGrid& grid, const Hessian& h) {
  const std::size_t n = w.cols();
  std::size_t total = 1;
  for (std::size_t i = 0; i < n; ++i) total *= 3;
  double best = std::numeric_limits<double>::infinity();
  std::vector<double> delta(n);
  for (std::size_t idx = 0; idx < total; ++idx) {
    std::size_t k = idx;
    for (std::size_t c = 0; c < n; ++c) {
      delta[c] = grid.level(0, static_cast<std::uint8_t>(k % 3)) - w(0, c);
      k /= 3;
    }
    double obj = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) obj += delta[i] * h.h(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) * delta[j];
    best = std::min(best, obj);
  }
  return best;
}

}  // namespace

TEST_CASE("ternary grid spans row min, zero and row max") {
  const auto w = row_matrix({-0.4, 0.1, 0.9});
  const auto grid = make_grid(w, GridMode::ternary);
  CHECK(grid.minmax(0).lo == Bf16::from_float(-0.4f));
  CHECK(grid.minmax(0).hi == Bf16::from_float(0.9f));
  CHECK(grid.level(0, 0) == 0.0f);
  CHECK(grid.level(0, 1) == Bf16::from_float(-0.4f).to_float());
  CHECK(grid.level(0, 2) == Bf16::from_float(0.9f).to_float());
}

TEST_CASE("degenerate all-zero row") {
  const WeightMatrix w(2, 3);
  const auto grid = make_grid(w, GridMode::ternary);
  CHECK(grid.minmax(0).lo.to_float() == 0.0f);
  CHECK(grid.minmax(0).hi.to_float() == 0.0f);
  const auto q = rtn_quantize(w, grid);
  for (auto c : q.codes) CHECK(c == 0);
  for (std::size_t c = 0; c < 3; ++c) CHECK(q.dequant(1, c) == 0.0f);
}

TEST_CASE("nearest level and tie-breaking") {
  const auto grid = make_grid(row_matrix({-1.0, 2.0}), GridMode::ternary);
  CHECK(grid.nearest(0, 0.4) == 0);
  CHECK(grid.nearest(0, 1.6) == 2);
  CHECK(grid.nearest(0, -0.9) == 1);
  // equidistant from 0 and 2 / from 0 and -1: the smaller magnitude wins
  CHECK(grid.nearest(0, 1.0) == 0);
  CHECK(grid.nearest(0, -0.5) == 0);

  // one-sided row: the grid is widened to include zero
  const auto pos = make_grid(row_matrix({0.5, 1.0}), GridMode::ternary);
  CHECK(pos.minmax(0).lo.to_float() == 0.0f);
  CHECK(pos.nearest(0, 0.2) == 0);
}

TEST_CASE("rtn_quantize example") {
  const auto w = row_matrix({-0.4, 0.1, 0.9});
  const auto q = rtn_quantize(w, make_grid(w, GridMode::ternary));
  CHECK(q.codes == std::vector<std::uint8_t>{1, 0, 2});
  CHECK(q.row_minmax[0].lo.to_float() == Bf16::from_float(-0.4f).to_float());
  CHECK(q.row_minmax[0].hi.to_float() == Bf16::from_float(0.9f).to_float());
}

TEST_CASE("grid correctness: codes 1 and 2 reproduce the bf16 row extremes") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const auto w = test::gaussian_weights(4, 33, rng);
    const auto q = rtn_quantize(w, make_grid(w, GridMode::ternary));
    for (std::size_t r = 0; r < w.rows(); ++r) {
      const auto row = w.row(r);
      const double lo = *std::min_element(row.begin(), row.end());
      const double hi = *std::max_element(row.begin(), row.end());
      REQUIRE(lo < 0.0);
      REQUIRE(hi > 0.0);
      CHECK(row_levels(GridMode::ternary, q.row_minmax[r])[1] == round_bf16(static_cast<float>(lo)));
      CHECK(row_levels(GridMode::ternary, q.row_minmax[r])[2] == round_bf16(static_cast<float>(hi)));
    }
  }
}

TEST_CASE("two-bit grid has an exact zero level and equal spacing") {
  const auto w = row_matrix({-3.0, 0.25, 3.0});
  const auto grid = make_grid(w, GridMode::two_bit);
  CHECK(grid.num_levels() == 4);
  CHECK(grid.level(0, 0) == 0.0f);
  std::vector<float> sorted{grid.level(0, 0), grid.level(0, 1), grid.level(0, 2), grid.level(0, 3)};
  std::sort(sorted.begin(), sorted.end());
  const float step = sorted[1] - sorted[0];
  CHECK(step == doctest::Approx(2.0f));
  CHECK(sorted[2] - sorted[1] == doctest::Approx(step));
  CHECK(sorted[3] - sorted[2] == doctest::Approx(step));
  // non-zero codes are ascending
  CHECK(grid.level(0, 1) < grid.level(0, 2));
  CHECK(grid.level(0, 2) < grid.level(0, 3));
}

TEST_CASE("two-bit natural sparsity on Gaussian rows sits in the 70-80% regime") {
  std::mt19937_64 rng(17);
  const auto w = test::gaussian_weights(64, 2048, rng);
  const auto q = rtn_quantize(w, make_grid(w, GridMode::two_bit));
  const double zeros = static_cast<double>(std::count(q.codes.begin(), q.codes.end(), 0)) / q.codes.size();
  CHECK(zeros > 0.65);
  CHECK(zeros < 0.85);
}

TEST_CASE("accumulate_hessian: outer products and masking") {
  const std::vector<float> one{1.0f, 2.0f};
  const auto h = accumulate_hessian(one, 2);
  CHECK(h.h(0, 0) == 1.0);
  CHECK(h.h(0, 1) == 2.0);
  CHECK(h.h(1, 0) == 2.0);
  CHECK(h.h(1, 1) == 4.0);
  CHECK(h.tokens == 1);

  const std::vector<float> two{1.0f, 2.0f, 7.0f, -3.0f};
  const std::vector<std::uint8_t> mask{0, 1};
  const auto hm = accumulate_hessian(two, 2, std::span<const std::uint8_t>(mask));
  CHECK(hm.h == h.h);
  CHECK(hm.tokens == 1);

  const std::vector<std::uint8_t> all{1, 1};
  CHECK(accumulate_hessian(two, 2, std::span<const std::uint8_t>(all)).empty());
  CHECK(accumulate_hessian(std::span<const float>{}, 3).empty());
  CHECK_THROWS_AS(accumulate_hessian(std::vector<float>{1, 2, 3}, 2), Error);
}

TEST_CASE("accumulate_hessian matches a naive per-token loop") {
  std::mt19937_64 rng(3);
  const std::size_t dim = 12;
  const auto tokens = test::gaussian_tokens(1000, dim, rng);
  const auto h = accumulate_hessian(tokens, dim);
  std::vector<double> naive(dim * dim, 0.0);
  for (std::size_t t = 0; t < 1000; ++t)
    for (std::size_t i = 0; i < dim; ++i)
      for (std::size_t j = 0; j < dim; ++j) naive[i * dim + j] += double(tokens[t * dim + i]) * tokens[t * dim + j];
  for (std::size_t i = 0; i < dim; ++i) {
    for (std::size_t j = 0; j < dim; ++j) {
      const double ref = naive[i * dim + j];
      CHECK(std::abs(h.h(i, j) - ref) <= 1e-6 * std::max(1.0, std::abs(ref)));
      CHECK(h.h(i, j) == h.h(j, i));
    }
  }
}

TEST_CASE("gptq with identity Hessian equals round-to-nearest") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t rows = 1 + rng() % 8;
    const std::size_t cols = 1 + rng() % 300;  // crosses the 128-column block boundary
    const auto mode = trial % 2 == 0 ? GridMode::ternary : GridMode::two_bit;
    const auto w = test::gaussian_weights(rows, cols, rng);
    const auto h = Hessian::identity(cols);
    const auto res = solve_one(w, h, mode);
    REQUIRE_FALSE(res[0].fallback);
    CHECK(res[0].quantized == rtn_quantize(w, make_grid(w, mode)));
  }
}

TEST_CASE("gptq on a 1x3 row against enumeration and rtn") {
  std::mt19937_64 rng(2024);
  const auto w = test::gaussian_weights(1, 3, rng);
  const auto tokens = test::gaussian_tokens(8, 3, rng);
  const auto h = accumulate_hessian(tokens, 3);
  const auto grid = make_grid(w, GridMode::ternary);
  const double gptq = layer_objective(w, solve_one(w, h)[0].quantized, h);
  const double rtn = layer_objective(w, rtn_quantize(w, grid), h);
  const double best = brute_force_min(w, grid, h);
  CHECK(gptq >= best - 1e-12);
  CHECK(gptq <= rtn + 1e-12);
}

TEST_CASE("gptq is never better than exhaustive search") {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t cols = 1 + rng() % 8;
    const auto w = test::gaussian_weights(1, cols, rng);
    const auto tokens = test::gaussian_tokens(3 * cols + 2, cols, rng);
    const auto h = accumulate_hessian(tokens, cols);
    const double gptq = layer_objective(w, solve_one(w, h)[0].quantized, h);
    CHECK(gptq >= brute_force_min(w, make_grid(w, GridMode::ternary), h) - 1e-9 * std::max(1.0, gptq));
  }
}

TEST_CASE("gptq beats rtn on average") {
  std::mt19937_64 rng(99);
  double sum_gptq = 0.0, sum_rtn = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t rows = 1 + rng() % 8;
    const std::size_t cols = 2 + rng() % 15;
    const auto w = test::gaussian_weights(rows, cols, rng);
    const auto tokens = test::gaussian_tokens(4 * cols, cols, rng);
    const auto h = accumulate_hessian(tokens, cols);
    sum_gptq += layer_objective(w, solve_one(w, h)[0].quantized, h);
    sum_rtn += layer_objective(w, rtn_quantize(w, make_grid(w, GridMode::ternary)), h);
  }
  CHECK(sum_gptq < sum_rtn);
}

TEST_CASE("layer_objective agrees with the direct token computation") {
  std::mt19937_64 rng(8);
  const auto w = test::gaussian_weights(5, 9, rng);
  const auto tokens = test::gaussian_tokens(40, 9, rng);
  const auto h = accumulate_hessian(tokens, 9);
  const auto q = solve_one(w, h)[0].quantized;
  const double direct = test::direct_objective(w, q, tokens);
  CHECK(layer_objective(w, q, h) == doctest::Approx(direct).epsilon(1e-6));
}

TEST_CASE("batched groups match expert-by-expert solving") {
  std::mt19937_64 rng(123);
  for (std::size_t group : {1u, 4u, 16u}) {
    const std::size_t rows = 6, cols = 160;
    std::vector<WeightMatrix> weights;
    std::vector<Hessian> hessians;
    for (std::size_t e = 0; e < group; ++e) {
      weights.push_back(test::gaussian_weights(rows, cols, rng));
      // experts see different token counts
      const auto tokens = test::gaussian_tokens(cols + 20 * e + 1, cols, rng);
      hessians.push_back(accumulate_hessian(tokens, cols));
    }
    std::vector<ExpertRef> refs;
    for (std::size_t e = 0; e < group; ++e) refs.push_back({weights[e], hessians[e]});
    const auto batched = gptq_quantize(refs);
    for (std::size_t e = 0; e < group; ++e) {
      const auto single = solve_one(weights[e], hessians[e]);
      const auto a = batched[e].quantized.dequantized();
      const auto b = single[0].quantized.dequantized();
      CHECK((a - b).cwiseAbs().maxCoeff() <= 1e-5);
    }
  }
}

TEST_CASE("group of identical experts yields identical outputs") {
  std::mt19937_64 rng(31);
  const auto w = test::gaussian_weights(4, 24, rng);
  const auto h = accumulate_hessian(test::gaussian_tokens(50, 24, rng), 24);
  std::vector<ExpertRef> refs(16, ExpertRef{w, h});
  const auto out = gptq_quantize(refs);
  for (const auto& r : out) CHECK(r.quantized == out.front().quantized);
}

TEST_CASE("masked calibration tokens leave the solver output bit-identical") {
  std::mt19937_64 rng(55);
  const std::size_t dim = 16;
  const auto w = test::gaussian_weights(3, dim, rng);
  const auto clean = test::gaussian_tokens(60, dim, rng);
  auto noisy = clean;
  std::vector<std::uint8_t> mask(60, 0);
  for (int extra = 0; extra < 500; ++extra) {
    const auto junk = test::gaussian_tokens(1, dim, rng);
    const std::size_t at = (rng() % (mask.size() + 1));
    noisy.insert(noisy.begin() + static_cast<std::ptrdiff_t>(at * dim), junk.begin(), junk.end());
    mask.insert(mask.begin() + static_cast<std::ptrdiff_t>(at), 1);
  }
  const auto h_clean = accumulate_hessian(clean, dim);
  const auto h_noisy = accumulate_hessian(noisy, dim, std::span<const std::uint8_t>(mask));
  CHECK(h_clean.h == h_noisy.h);
  CHECK(solve_one(w, h_clean)[0].quantized == solve_one(w, h_noisy)[0].quantized);
}

TEST_CASE("non-invertible Hessians fall back to rounding") {
  std::mt19937_64 rng(4);
  const auto w = test::gaussian_weights(3, 6, rng);
  const auto rtn = rtn_quantize(w, make_grid(w, GridMode::ternary));

  Hessian negative{-Eigen::MatrixXd::Identity(6, 6), 10};
  auto res = solve_one(w, negative);
  CHECK(res[0].fallback);
  CHECK(res[0].quantized == rtn);

  Hessian indefinite = Hessian::identity(6);
  indefinite.h(0, 0) = 1e-3;
  indefinite.h(0, 1) = indefinite.h(1, 0) = 5.0;
  CHECK(solve_one(w, indefinite)[0].fallback);

  Hessian nan = Hessian::identity(6);
  nan.h(2, 2) = std::numeric_limits<double>::quiet_NaN();
  CHECK(solve_one(w, nan)[0].fallback);

  CHECK(solve_one(w, Hessian::zero(6))[0].fallback);

  // a fallback in one expert does not disturb the rest of the group
  const auto good = accumulate_hessian(test::gaussian_tokens(30, 6, rng), 6);
  std::vector<ExpertRef> refs{{w, good}, {w, negative}, {w, good}};
  const auto group = gptq_quantize(refs);
  CHECK_FALSE(group[0].fallback);
  CHECK(group[1].fallback);
  CHECK(group[0].quantized == solve_one(w, good)[0].quantized);
  CHECK(group[2].quantized == group[0].quantized);
}

TEST_CASE("gptq rejects mixed shapes") {
  std::mt19937_64 rng(1);
  const auto a = test::gaussian_weights(2, 4, rng);
  const auto b = test::gaussian_weights(3, 4, rng);
  const auto h = Hessian::identity(4);
  std::vector<ExpertRef> refs{{a, h}, {b, h}};
  CHECK_THROWS_AS(gptq_quantize(refs), Error);
  const auto h5 = Hessian::identity(5);
  std::vector<ExpertRef> bad_dim{{a, h5}};
  CHECK_THROWS_AS(gptq_quantize(bad_dim), Error);
}

TEST_CASE("weight matrices reject non-finite values") {
  CHECK_THROWS_AS(WeightMatrix(1, 2, {1.0, std::numeric_limits<double>::infinity()}), Error);
  CHECK_THROWS_AS(WeightMatrix(2, 2, {1.0, 2.0}), Error);
}
