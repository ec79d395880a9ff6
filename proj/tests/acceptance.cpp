// Acceptance suite: one PASS/FAIL line per criterion.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "qmoe/calib_pipeline.hpp"
#include "qmoe/codec.hpp"
#include "qmoe/run.hpp"
#include "qmoe/stats.hpp"
#include "test_support.hpp"

using namespace qmoe;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void expect(bool cond, const std::string& what) {
    if (!cond) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + ("failed: " + what);
    }
  }
  void note(const std::string& what) { detail += (detail.empty() ? "" : "; ") + what; }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

int failures = 0;

void criterion(int id, const char* title, const std::function<Outcome()>& body) {
  const auto start = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o.pass = false;
    o.detail = std::string("exception: ") + e.what();
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::printf("criterion %d %s: %s (%s) [%.1f s]\n", id, o.pass ? "PASS" : "FAIL", title, o.detail.c_str(), secs);
  std::fflush(stdout);
  if (!o.pass) ++failures;
}

double brute_force_min(const WeightMatrix& w, const QuantGrid& grid, const Hessian& h) {
  const std::size_t n = w.cols();
  std::size_t total = 1;
  for (std::size_t i = 0; i < n; ++i) total *= 3;
  double best = std::numeric_limits<double>::infinity();
  Eigen::VectorXd delta(static_cast<Eigen::Index>(n));
  for (std::size_t idx = 0; idx < total; ++idx) {
    std::size_t k = idx;
    for (std::size_t c = 0; c < n; ++c, k /= 3)
      delta(static_cast<Eigen::Index>(c)) = grid.level(0, static_cast<std::uint8_t>(k % 3)) - w(0, c);
    best = std::min(best, delta.dot(h.h * delta));
  }
  return best;
}

std::vector<GptqResult> solve(const std::vector<ExpertRef>& refs) { return gptq_quantize(refs, GptqOptions{}); }

double log_prob(const std::vector<std::uint8_t>& values, double p0) {
  double lp = 0.0;
  for (auto v : values) lp += std::log(v == 0 ? p0 : (1 - p0) / 2);
  return lp;
}

}  // namespace

int main() {
  const auto& dict = test::default_dict();
  const double limit = theoretical_limit(0.885);

  criterion(1, "entropy limit at p0 = 0.885", [&] {
    Outcome o;
    o.note("limit " + fmt("%.4f", limit) + ", expected 25.40 +/- 0.01");
    o.expect(std::abs(limit - 25.40) <= 0.01, "limit outside tolerance");
    return o;
  });

  criterion(2, "iid 4096x16384 compression rate", [&] {
    Outcome o;
    const auto t = sample_ternary(0.885, 4096, 16384, 1);
    const auto rate = compression_rate(encode(t, dict)).rate();
    const double gap = (limit - rate) / limit;
    o.note("rate " + fmt("%.4f", rate) + " in [20.5, 21.7], gap to limit " + fmt("%.1f%%", 100 * gap) + " <= 25%");
    o.expect(rate >= 20.5 && rate <= 21.7, "rate outside band");
    o.expect(rate < limit, "rate not below the entropy limit");
    o.expect(gap <= 0.25, "gap above 25%");
    return o;
  });

  criterion(3, "GPTQ-quantized Gaussian experts vs matched-sparsity iid rate", [&] {
    Outcome o;
    RunConfig cfg;
    cfg.num_experts = 8;
    cfg.group_size = 8;
    cfg.dim = 512;
    cfg.samples = 256;
    cfg.tokens_per_sample = 32;
    const auto run = run_compression(cfg, &dict);
    RateReport iid;
    for (std::size_t e = 0; e < cfg.num_experts; ++e)
      iid += compression_rate(encode(sample_ternary(run.sparsity, cfg.dim, cfg.dim, 100 + e), dict));
    const double rq = run.total_rate.rate(), ri = iid.rate();
    const double gap = std::abs(rq - ri) / ri;
    o.note("sparsity " + fmt("%.4f", run.sparsity) + ", quantized rate " + fmt("%.3f", rq) + ", iid rate " + fmt("%.3f", ri) +
           ", gap " + fmt("%.2f%%", 100 * gap) + " <= 10%");
    o.expect(gap <= 0.10, "gap above 10%");
    o.expect(run.fallbacks == 0, "solver fell back");
    return o;
  });

  criterion(4, "natural sparsity of ternary rounding", [&] {
    Outcome o;
    std::mt19937_64 rng(4);
    double prev = 0.0;
    std::string seq;
    for (std::size_t width : {64u, 256u, 1024u, 4096u, 16384u}) {
      const auto w = test::gaussian_weights(64, width, rng, 0.05);
      const double s = natural_sparsity(rtn_quantize(w, make_grid(w, GridMode::ternary)));
      seq += (seq.empty() ? "" : " ") + std::to_string(width) + ":" + fmt("%.4f", s);
      o.expect(s >= 0.60 && s <= 0.95, "sparsity outside [0.60, 0.95] at width " + std::to_string(width));
      o.expect(s > prev, "sparsity not increasing at width " + std::to_string(width));
      prev = s;
    }
    const double sampled = natural_sparsity(sample_ternary(0.885, 1000, 1000, 4));
    o.note("RTN sparsity by width " + seq + "; sampler " + fmt("%.5f", sampled) + " vs 0.885 +/- 0.001");
    o.expect(std::abs(sampled - 0.885) <= 0.001, "sampled sparsity off");
    return o;
  });

  criterion(5, "decompress(encode(T)) == T", [&] {
    Outcome o;
    std::mt19937_64 rng(5);
    std::size_t failed = 0;
    for (int trial = 0; trial < 1000; ++trial) {
      const std::size_t rows = 1 + rng() % 257;
      const std::size_t cols = 2 * (1 + rng() % 513);
      const auto t = test::random_ternary(rows, cols, rng, 0.5 + 0.5 * std::uniform_real_distribution<double>()(rng));
      failed += decompress(encode(t, dict), dict) != t;
    }
    o.note("1000 random matrices up to 257x1026");
    // Every ternary matrix with rows <= 3 and even cols <= 6 (odd widths are
    // not encodable).
    std::size_t enumerated = 0;
    CompressedMatrix c;
    QuantizedMatrix back;
    for (std::size_t rows = 1; rows <= 3; ++rows) {
      for (std::size_t cols = 2; cols <= 6; cols += 2) {
        QuantizedMatrix t{GridMode::ternary, rows, cols, std::vector<std::uint8_t>(rows * cols, 0),
                          std::vector<MinMax>(rows, MinMax{Bf16::from_float(-1.0f), Bf16::from_float(1.0f)})};
        std::size_t total = 1;
        for (std::size_t i = 0; i < rows * cols; ++i) total *= 3;
        for (std::size_t idx = 0; idx < total; ++idx) {
          // odometer increment over base-3 digits
          if (idx > 0) {
            for (auto& v : t.codes) {
              if (++v < 3) break;
              v = 0;
            }
          }
          encode_into(t, dict, c);
          decompress_into(c, dict, back);
          failed += back.codes != t.codes;
        }
        enumerated += total;
      }
    }
    o.note("exhaustive " + std::to_string(enumerated) + " matrices (rows <= 3, cols <= 6)");
    o.note(std::to_string(failed) + " failures");
    o.expect(failed == 0, "round-trip mismatches");
    return o;
  });

  criterion(6, "GPTQ oracle equivalence", [&] {
    Outcome o;
    std::mt19937_64 rng(6);
    // (a) identity Hessian
    std::size_t mismatched = 0;
    for (int trial = 0; trial < 100; ++trial) {
      const auto w = test::gaussian_weights(1 + rng() % 16, 1 + rng() % 300, rng);
      const auto h = Hessian::identity(w.cols());
      mismatched += solve({{w, h}})[0].quantized != rtn_quantize(w, make_grid(w, GridMode::ternary));
    }
    o.note("(a) identity-Hessian mismatches " + std::to_string(mismatched) + "/100");
    o.expect(mismatched == 0, "(a)");

    // (b) batched group of 16 vs expert by expert
    std::vector<WeightMatrix> ws;
    std::vector<Hessian> hs;
    for (int e = 0; e < 16; ++e) {
      ws.push_back(test::gaussian_weights(32, 192, rng));
      hs.push_back(accumulate_hessian(test::gaussian_tokens(256 + 16 * e, 192, rng), 192));
    }
    std::vector<ExpertRef> refs;
    for (int e = 0; e < 16; ++e) refs.push_back({ws[e], hs[e]});
    const auto batched = solve(refs);
    double max_diff = 0.0;
    for (int e = 0; e < 16; ++e) {
      const auto single = solve({{ws[e], hs[e]}});
      max_diff = std::max(max_diff, (batched[e].quantized.dequantized() - single[0].quantized.dequantized()).cwiseAbs().maxCoeff());
    }
    o.note("(b) batched vs sequential max diff " + fmt("%.3g", max_diff));
    o.expect(max_diff <= 1e-5, "(b)");

    // (c) single row against enumeration and rounding
    double sum_gptq = 0.0, sum_rtn = 0.0;
    std::size_t below_optimum = 0;
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t cols = 1 + rng() % 8;
      const auto w = test::gaussian_weights(1, cols, rng);
      const auto h = accumulate_hessian(test::gaussian_tokens(4 * cols, cols, rng), cols);
      const auto grid = make_grid(w, GridMode::ternary);
      const double g = layer_objective(w, solve({{w, h}})[0].quantized, h);
      const double best = brute_force_min(w, grid, h);
      below_optimum += g < best - 1e-9 * std::max(1.0, best);
      sum_gptq += g;
      sum_rtn += layer_objective(w, rtn_quantize(w, grid), h);
    }
    o.note("(c) below optimum " + std::to_string(below_optimum) + "/100, mean objective gptq " + fmt("%.4g", sum_gptq / 100) +
           " vs rtn " + fmt("%.4g", sum_rtn / 100));
    o.expect(below_optimum == 0, "(c) objective below brute-force optimum");
    o.expect(sum_gptq <= sum_rtn, "(c) mean objective above rounding");
    return o;
  });

  criterion(7, "fused kernel fidelity", [&] {
    Outcome o;
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    double max_err = 0.0;
    std::size_t rows_traced = 0, bad_rows = 0, high_lane_extracts = 0;
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t rows = 1 + rng() % 128;
      const std::size_t cols = 2 * (1 + rng() % 1024);
      const auto t = test::random_ternary(rows, cols, rng);
      const auto c = encode(t, dict);
      std::vector<float> x(cols);
      for (auto& v : x) v = u(rng);
      std::vector<float> y(rows, 0.0f);
      fused_matvec(c, dict, x, y);
      const auto dq = decompress(c, dict).dequantized();
      for (std::size_t r = 0; r < rows; ++r) {
        double ref = 0.0;
        for (std::size_t k = 0; k < cols; ++k) ref += dq(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) * x[k];
        max_err = std::max(max_err, std::abs(ref - y[r]));
        const auto trace = simulate_warp_row(c, r, dict, x);
        ++rows_traced;
        bad_rows += !std::equal(trace.values.begin(), trace.values.end(), t.codes.begin() + static_cast<std::ptrdiff_t>(r * cols));
        for (const auto& s : trace.steps) high_lane_extracts += (s.active_mask | s.extracting_mask) >> kExtractLanes != 0;
      }
    }
    o.note("max |fused - dense| " + fmt("%.3g", max_err) + " <= 1e-2 over 100 shapes");
    o.note(std::to_string(rows_traced) + " rows replayed, " + std::to_string(bad_rows) + " mismatches, " +
           std::to_string(high_lane_extracts) + " steps using lanes 28-31");
    o.expect(max_err <= 1e-2, "fused output error");
    o.expect(bad_rows == 0, "warp replay disagrees with decompress");
    o.expect(high_lane_extracts == 0, "lanes 28-31 extracted");
    return o;
  });

  criterion(8, "pipeline transfer audit and gather oracle", [&] {
    Outcome o;
    std::mt19937_64 rng(8);
    const std::size_t dim = 16, experts_n = 8;
    ListBuffer buf(dim);
    std::vector<std::vector<float>> samples;
    std::vector<std::vector<std::uint8_t>> masks;
    std::bernoulli_distribution masked(0.05);
    for (int s = 0; s < 100; ++s) {
      const std::size_t n = 1 + rng() % 64;
      auto toks = test::gaussian_tokens(n, dim, rng);
      std::vector<std::uint8_t> m(n);
      for (auto& v : m) v = masked(rng);
      buf.append_sample(toks, m);
      samples.push_back(std::move(toks));
      masks.push_back(std::move(m));
    }
    std::vector<WeightMatrix> experts;
    for (std::size_t e = 0; e < experts_n; ++e) experts.push_back(test::gaussian_weights(dim, dim, rng, 0.2));
    TierStore tier(128);
    run_block(buf, make_random_dense(dim, 8), RouterSim(experts_n, dim, RouterRule::hash, 8), experts, tier, BlockOptions{});

    std::size_t bad_tokens = 0;
    for (std::size_t i = 0; i < buf.token_count(); ++i)
      bad_tokens += tier.reads_per_token()[i] != 2 || tier.writes_per_token()[i] != 2;
    o.note(std::to_string(buf.token_count()) + " tokens, " + std::to_string(bad_tokens) + " without exactly 2 reads + 2 writes, peak fast occupancy " +
           std::to_string(tier.peak_occupancy()) + "/128");
    o.expect(bad_tokens == 0, "transfer counts");
    o.expect(tier.peak_occupancy() <= 128, "fast tier overflow");

    // Naive oracle: walk samples in order, keep tokens routed to e.
    std::size_t gather_mismatch = 0;
    for (std::size_t e = 0; e < experts_n; ++e) {
      const auto block = gather_expert_tokens(buf, static_cast<std::int32_t>(e));
      std::vector<float> tokens;
      std::vector<std::size_t> positions;
      std::vector<std::uint8_t> mask;
      std::size_t base = 0;
      for (std::size_t s = 0; s < samples.size(); ++s) {
        for (std::size_t t = 0; t < masks[s].size(); ++t) {
          if (buf.assignments()[base + t] != static_cast<std::int32_t>(e)) continue;
          const auto tok = buf.token(base + t);
          tokens.insert(tokens.end(), tok.begin(), tok.end());
          positions.push_back(base + t);
          mask.push_back(masks[s][t]);
        }
        base += masks[s].size();
      }
      gather_mismatch += block.tokens != tokens || block.positions != positions || block.mask != mask;
    }
    o.note("gather mismatches " + std::to_string(gather_mismatch) + "/8");
    o.expect(gather_mismatch == 0, "gather oracle");
    return o;
  });

  criterion(9, "dictionary invariants", [&] {
    Outcome o;
    std::set<std::vector<std::uint8_t>> seen;
    double prev = 0.0;
    bool ordered = true;
    for (std::size_t cw = 0; cw < dict.size(); ++cw) {
      const auto e = dict.entry(static_cast<std::uint16_t>(cw));
      seen.insert(e);
      const double lp = log_prob(e, 0.885);
      ordered &= lp <= prev + 1e-12;
      prev = lp;
    }
    std::size_t singles = 0;
    for (std::uint8_t a = 0; a < 3; ++a)
      for (std::uint8_t b = 0; b < 3; ++b) singles += seen.count({a, b});
    std::ostringstream b1, b2;
    Dictionary::generate({0.885}).save(b1);
    Dictionary::generate({0.885}).save(b2);
    o.note(std::to_string(dict.size()) + " entries (" + std::to_string(seen.size()) + " distinct), " + std::to_string(singles) +
           "/9 single pairs, " + (ordered ? "non-increasing" : "NOT ordered"));
    o.expect(dict.size() == 65536 && seen.size() == 65536, "entry count");
    o.expect(ordered, "probability order");
    o.expect(singles == 9, "single pairs");
    o.expect(dict.entry(0) == std::vector<std::uint8_t>{0, 0}, "entry 0");
    o.expect(b1.str() == b2.str(), "regeneration not byte-identical");
    return o;
  });

  std::printf("criterion 10 SKIP: full-model loss, runtime and speedup tables need the real checkpoints and GPUs (declared not reproducible)\n");
  std::printf("%s: %d of 9 criteria failed\n", failures == 0 ? "ACCEPTANCE PASS" : "ACCEPTANCE FAIL", failures);
  return failures == 0 ? 0 : 1;
}
