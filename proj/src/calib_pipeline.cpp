#include "qmoe/calib_pipeline.hpp"

#include <cmath>
#include <cstring>
#include <numeric>
#include <string>

#include "parallel.hpp"
#include "qmoe/error.hpp"
#include "random.hpp"

namespace qmoe {

ListBuffer::ListBuffer(std::size_t dim) : dim_(dim) { require(dim >= 1, "list buffer: dimension must be positive"); }

void ListBuffer::append_sample(std::span<const float> tokens, std::span<const std::uint8_t> mask) {
  require(tokens.size() % dim_ == 0, "list buffer: sample size is not a multiple of the token dimension");
  const std::size_t n = tokens.size() / dim_;
  require(n > 0, "list buffer: empty sample");
  require(mask.empty() || mask.size() == n, "list buffer: mask length does not match sample length");
  data_.insert(data_.end(), tokens.begin(), tokens.end());
  delimiters_.push_back(delimiters_.back() + n);
  assignments_.insert(assignments_.end(), n, kUnrouted);
  if (mask.empty())
    mask_.insert(mask_.end(), n, 0);
  else
    mask_.insert(mask_.end(), mask.begin(), mask.end());
}

std::span<float> ListBuffer::sample(std::size_t s) {
  const std::size_t begin = delimiters_.at(s);
  const std::size_t end = delimiters_.at(s + 1);
  return {data_.data() + begin * dim_, (end - begin) * dim_};
}

TokenBlock gather_expert_tokens(const ListBuffer& buf, std::int32_t expert) {
  TokenBlock block;
  block.dim = buf.dim();
  const auto assignments = buf.assignments();
  for (std::size_t i = 0; i < assignments.size(); ++i) {
    if (assignments[i] != expert) continue;
    const auto tok = buf.token(i);
    block.tokens.insert(block.tokens.end(), tok.begin(), tok.end());
    block.positions.push_back(i);
    block.mask.push_back(buf.mask()[i]);
  }
  return block;
}

void scatter_expert_outputs(ListBuffer& buf, std::span<const std::size_t> positions, std::span<const float> outputs) {
  require(outputs.size() == positions.size() * buf.dim(), "scatter: output count does not match gathered positions");
  for (std::size_t k = 0; k < positions.size(); ++k) {
    require(positions[k] < buf.token_count(), "scatter: position out of range");
    auto dst = buf.token(positions[k]);
    std::memcpy(dst.data(), outputs.data() + k * buf.dim(), buf.dim() * sizeof(float));
  }
}

TierStore::TierStore(std::size_t fast_capacity) : capacity_(fast_capacity) {
  require(fast_capacity >= 1, "tier store: fast-tier capacity must be positive");
}

void TierStore::begin_block(std::size_t token_count) {
  require(occupancy_ == 0, "tier store: block started with tokens still resident");
  reads_.assign(token_count, 0);
  writes_.assign(token_count, 0);
}

void TierStore::fetch(std::span<const std::size_t> positions) {
  if (occupancy_ + positions.size() > capacity_)
    fail(Errc::invalid_argument, "tier store: fast-tier capacity of " + std::to_string(capacity_) + " tokens exceeded");
  for (auto p : positions) ++reads_.at(p);
  occupancy_ += positions.size();
  peak_ = std::max(peak_, occupancy_);
  total_reads_ += positions.size();
}

void TierStore::write_back(std::span<const std::size_t> positions) {
  require(positions.size() <= occupancy_, "tier store: writing back more tokens than resident");
  for (auto p : positions) ++writes_.at(p);
  occupancy_ -= positions.size();
  total_writes_ += positions.size();
}

RouterSim::RouterSim(std::size_t num_experts, std::size_t dim, RouterRule rule, std::uint64_t seed, double skew)
    : num_experts_(num_experts), dim_(dim), rule_(rule), seed_(seed), skew_(skew) {
  require(num_experts >= 1, "router: need at least one expert");
  require(num_experts <= INT32_MAX, "router: too many experts");
  if (rule_ == RouterRule::score_argmax) {
    detail::Rng rng(seed);
    scores_.resize(num_experts * dim);
    for (auto& s : scores_) s = rng.normal();
  }
}

std::int32_t RouterSim::route(std::span<const float> token) const {
  require(token.size() == dim_, "router: token dimension mismatch");
  if (rule_ == RouterRule::hash) {
    std::uint64_t h = 0xcbf29ce484222325ull ^ seed_;
    for (float v : token) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      for (int b = 0; b < 4; ++b) {
        h ^= (bits >> (8 * b)) & 0xFFu;
        h *= 0x100000001b3ull;
      }
    }
    return static_cast<std::int32_t>(detail::splitmix64(h) % num_experts_);
  }
  std::int32_t best = 0;
  double best_score = 0.0;
  for (std::size_t e = 0; e < num_experts_; ++e) {
    double s = e == 0 ? skew_ : 0.0;
    for (std::size_t d = 0; d < dim_; ++d) s += scores_[e * dim_ + d] * token[d];
    if (e == 0 || s > best_score) {
      best = static_cast<std::int32_t>(e);
      best_score = s;
    }
  }
  return best;
}

CapPlan cap_tokens(std::size_t expert_tokens, std::span<const std::size_t> all_expert_counts, std::size_t fast_capacity,
                   double multiplier) {
  require(!all_expert_counts.empty(), "cap_tokens: no expert counts");
  require(fast_capacity >= 1, "cap_tokens: fast capacity must be positive");
  require(multiplier > 0.0, "cap_tokens: multiplier must be positive");
  const double total = static_cast<double>(std::accumulate(all_expert_counts.begin(), all_expert_counts.end(), std::size_t{0}));
  CapPlan plan;
  plan.cap = static_cast<std::size_t>(std::ceil(multiplier * total / static_cast<double>(all_expert_counts.size())));
  plan.hessian_tokens = std::min(expert_tokens, plan.cap);
  for (std::size_t off = 0; off < expert_tokens; off += fast_capacity)
    plan.chunks.push_back({off, std::min(fast_capacity, expert_tokens - off)});
  return plan;
}

DenseFn make_random_dense(std::size_t dim, std::uint64_t seed) {
  detail::Rng rng(seed);
  std::vector<double> a(dim * dim);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
  for (auto& v : a) v = rng.normal() * scale;
  return [a = std::move(a)](std::span<float> tokens, std::size_t d) {
    std::vector<double> tmp(d);
    for (std::size_t t = 0; t < tokens.size() / d; ++t) {
      float* x = tokens.data() + t * d;
      for (std::size_t i = 0; i < d; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += a[i * d + j] * x[j];
        tmp[i] = std::tanh(s);
      }
      for (std::size_t i = 0; i < d; ++i) x[i] = static_cast<float>(tmp[i]);
    }
  };
}

namespace {

Eigen::MatrixXd to_eigen(const WeightMatrix& w) {
  Eigen::MatrixXd m(w.rows(), w.cols());
  for (std::size_t r = 0; r < w.rows(); ++r)
    for (std::size_t c = 0; c < w.cols(); ++c) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = w(r, c);
  return m;
}

void compress_group(std::span<const WeightMatrix> weights, std::span<const Hessian> hessians,
                    std::span<ExpertOutcome> out, const BlockOptions& opts) {
  if (opts.solver == Solver::rtn) {
    for (std::size_t e = 0; e < weights.size(); ++e) out[e].quantized = rtn_quantize(weights[e], make_grid(weights[e], opts.mode));
  } else {
    std::vector<ExpertRef> refs;
    for (std::size_t e = 0; e < weights.size(); ++e) refs.push_back({weights[e], hessians[e]});
    auto results = gptq_quantize(refs, GptqOptions{opts.mode, opts.damping, 128});
    for (std::size_t e = 0; e < weights.size(); ++e) {
      out[e].quantized = std::move(results[e].quantized);
      out[e].fallback = results[e].fallback;
    }
  }
  for (std::size_t e = 0; e < weights.size(); ++e) out[e].objective = layer_objective(weights[e], out[e].quantized, hessians[e]);
}

}  // namespace

BlockResult run_block(ListBuffer& buf, const DenseFn& dense, const RouterSim& router, std::span<const WeightMatrix> experts,
                      TierStore& tier, const BlockOptions& opts) {
  const std::size_t dim = buf.dim();
  const std::size_t num_experts = experts.size();
  require(num_experts == router.num_experts(), "run_block: router and expert counts differ");
  require(opts.group_size >= 1, "run_block: group size must be positive");
  for (const auto& w : experts) require(w.rows() == dim && w.cols() == dim, "run_block: experts must be dim x dim");

  const std::size_t n_tokens = buf.token_count();
  tier.begin_block(n_tokens);

  BlockResult result;
  result.experts.resize(num_experts);
  // Every token is routed, so the layer's mean expert count is known before
  // routing and the Hessian prefix can be selected during the dense phase.
  result.cap = static_cast<std::size_t>(
      std::ceil(opts.cap_multiplier * static_cast<double>(n_tokens) / static_cast<double>(num_experts)));

  std::vector<Hessian> hessians;
  if (opts.compress) hessians.assign(num_experts, Hessian::zero(dim));
  std::vector<std::size_t> seen(num_experts, 0);

  // Dense phase: fetch sample, apply dense layers, route, write back. The
  // expert-input Hessians are accumulated here while tokens are resident.
  std::vector<std::vector<float>> staged(num_experts);
  for (std::size_t s = 0; s < buf.sample_count(); ++s) {
    const std::size_t begin = buf.delimiters()[s];
    const std::size_t end = buf.delimiters()[s + 1];
    std::vector<std::size_t> positions(end - begin);
    std::iota(positions.begin(), positions.end(), begin);

    tier.fetch(positions);
    dense(buf.sample(s), dim);
    for (std::size_t i = begin; i < end; ++i) {
      const std::int32_t e = router.route(buf.token(i));
      buf.assignments()[i] = e;
      auto& count = seen[static_cast<std::size_t>(e)];
      if (opts.compress && count < result.cap && !(opts.use_mask && buf.mask()[i] != 0)) {
        const auto tok = buf.token(i);
        staged[static_cast<std::size_t>(e)].insert(staged[static_cast<std::size_t>(e)].end(), tok.begin(), tok.end());
      }
      ++count;
    }
    if (opts.compress) {
      for (std::size_t e = 0; e < num_experts; ++e) {
        if (staged[e].empty()) continue;
        add_to_hessian(hessians[e], staged[e]);
        staged[e].clear();
      }
    }
    tier.write_back(positions);
  }

  std::vector<std::size_t> counts(num_experts, 0);
  for (auto e : buf.assignments()) {
    require(e >= 0 && static_cast<std::size_t>(e) < num_experts, "run_block: router produced an invalid expert id");
    ++counts[static_cast<std::size_t>(e)];
  }

  // Expert compression, one job per group.
  std::vector<Eigen::MatrixXd> effective(num_experts);
  if (opts.compress) {
    const std::size_t groups = (num_experts + opts.group_size - 1) / opts.group_size;
    detail::parallel_ranges(groups, opts.workers, [&](std::size_t g_begin, std::size_t g_end) {
      for (std::size_t g = g_begin; g < g_end; ++g) {
        const std::size_t first = g * opts.group_size;
        const std::size_t n = std::min(opts.group_size, num_experts - first);
        compress_group(experts.subspan(first, n), std::span<const Hessian>(hessians).subspan(first, n),
                       std::span<ExpertOutcome>(result.experts).subspan(first, n), opts);
      }
    });
    for (std::size_t e = 0; e < num_experts; ++e) {
      effective[e] = result.experts[e].quantized.dequantized();
      if (result.experts[e].fallback) ++result.fallbacks;
    }
  } else {
    for (std::size_t e = 0; e < num_experts; ++e) effective[e] = to_eigen(experts[e]);
  }

  // Sparse phase: per expert, stream X_E through the fast tier in chunks,
  // apply the (compressed) expert and overwrite X_E in the buffer.
  for (std::size_t e = 0; e < num_experts; ++e) {
    const TokenBlock block = gather_expert_tokens(buf, static_cast<std::int32_t>(e));
    const CapPlan plan = cap_tokens(block.size(), counts, tier.capacity(), opts.cap_multiplier);
    auto& outcome = result.experts[e];
    outcome.tokens = block.size();
    outcome.hessian_tokens = opts.compress ? hessians[e].tokens : 0;
    outcome.iterations = plan.chunks.size();

    std::vector<float> outputs;
    for (const auto& chunk : plan.chunks) {
      const auto positions = std::span<const std::size_t>(block.positions).subspan(chunk.offset, chunk.count);
      tier.fetch(positions);
      Eigen::MatrixXd x(dim, chunk.count);
      for (std::size_t k = 0; k < chunk.count; ++k)
        for (std::size_t d = 0; d < dim; ++d)
          x(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(k)) = block.tokens[(chunk.offset + k) * dim + d];
      const Eigen::MatrixXd y = effective[e] * x;
      outputs.resize(chunk.count * dim);
      for (std::size_t k = 0; k < chunk.count; ++k)
        for (std::size_t d = 0; d < dim; ++d)
          outputs[k * dim + d] = static_cast<float>(y(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(k)));
      scatter_expert_outputs(buf, positions, outputs);
      tier.write_back(positions);
    }
  }
  return result;
}

}  // namespace qmoe
