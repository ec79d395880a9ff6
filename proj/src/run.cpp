#include "qmoe/run.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "qmoe/byte_io.hpp"
#include "qmoe/error.hpp"
#include "random.hpp"

namespace qmoe {

namespace {

constexpr std::string_view kWeightsMagic = "QMOEWGT1";

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::string bad_value(std::string_view key, std::string_view value) {
  return "config: invalid value '" + std::string(value) + "' for key '" + std::string(key) + "'";
}

template <typename T>
T parse_int(std::string_view key, std::string_view value) {
  T out{};
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc{} || ptr != value.data() + value.size()) fail(Errc::invalid_argument, bad_value(key, value));
  return out;
}

double parse_double(std::string_view key, std::string_view value) {
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc{} || ptr != value.data() + value.size() || !std::isfinite(out))
    fail(Errc::invalid_argument, bad_value(key, value));
  return out;
}

bool parse_bool(std::string_view key, std::string_view value) {
  if (value == "on" || value == "true" || value == "1") return true;
  if (value == "off" || value == "false" || value == "0") return false;
  fail(Errc::invalid_argument, bad_value(key, value));
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

const char* solver_name(Solver s) { return s == Solver::gptq ? "gptq" : "rtn"; }
const char* bits_name(GridMode m) { return m == GridMode::ternary ? "ternary" : "2bit"; }
const char* router_name(RouterRule r) { return r == RouterRule::hash ? "hash" : "argmax"; }

}  // namespace

void RunConfig::set(std::string_view key, std::string_view value) {
  if (key == "num_experts") num_experts = parse_int<std::size_t>(key, value);
  else if (key == "group_size") group_size = parse_int<std::size_t>(key, value);
  else if (key == "dim") dim = parse_int<std::size_t>(key, value);
  else if (key == "samples") samples = parse_int<std::size_t>(key, value);
  else if (key == "tokens_per_sample") tokens_per_sample = parse_int<std::size_t>(key, value);
  else if (key == "fast_capacity") fast_capacity = parse_int<std::size_t>(key, value);
  else if (key == "cap_multiplier") cap_multiplier = parse_double(key, value);
  else if (key == "router") {
    if (value == "hash") router = RouterRule::hash;
    else if (value == "argmax") router = RouterRule::score_argmax;
    else fail(Errc::invalid_argument, bad_value(key, value));
  }
  else if (key == "router_seed") router_seed = parse_int<std::uint64_t>(key, value);
  else if (key == "router_skew") router_skew = parse_double(key, value);
  else if (key == "mask_tokens") mask_tokens = parse_bool(key, value);
  else if (key == "mask_rate") mask_rate = parse_double(key, value);
  else if (key == "weight_std") weight_std = parse_double(key, value);
  else if (key == "data_seed") data_seed = parse_int<std::uint64_t>(key, value);
  else if (key == "weight_seed") weight_seed = parse_int<std::uint64_t>(key, value);
  else if (key == "dense_seed") dense_seed = parse_int<std::uint64_t>(key, value);
  else if (key == "damping") damping = parse_double(key, value);
  else if (key == "mode") {
    if (value == "gptq") solver = Solver::gptq;
    else if (value == "rtn") solver = Solver::rtn;
    else fail(Errc::invalid_argument, bad_value(key, value));
  }
  else if (key == "bits") {
    if (value == "ternary") bits = GridMode::ternary;
    else if (value == "2bit") bits = GridMode::two_bit;
    else fail(Errc::invalid_argument, bad_value(key, value));
  }
  else if (key == "workers") workers = parse_int<unsigned>(key, value);
  else if (key == "max_fallback_fraction") max_fallback_fraction = parse_double(key, value);
  else if (key == "weights") weights_path = std::string(value);
  else fail(Errc::invalid_argument, "config: unknown key '" + std::string(key) + "'");
}

std::string RunConfig::serialize() const {
  std::ostringstream out;
  out << "num_experts = " << num_experts << "\n"
      << "group_size = " << group_size << "\n"
      << "dim = " << dim << "\n"
      << "samples = " << samples << "\n"
      << "tokens_per_sample = " << tokens_per_sample << "\n"
      << "fast_capacity = " << fast_capacity << "\n"
      << "cap_multiplier = " << fmt_double(cap_multiplier) << "\n"
      << "router = " << router_name(router) << "\n"
      << "router_seed = " << router_seed << "\n"
      << "router_skew = " << fmt_double(router_skew) << "\n"
      << "mask_tokens = " << (mask_tokens ? "on" : "off") << "\n"
      << "mask_rate = " << fmt_double(mask_rate) << "\n"
      << "weight_std = " << fmt_double(weight_std) << "\n"
      << "data_seed = " << data_seed << "\n"
      << "weight_seed = " << weight_seed << "\n"
      << "dense_seed = " << dense_seed << "\n"
      << "damping = " << fmt_double(damping) << "\n"
      << "mode = " << solver_name(solver) << "\n"
      << "bits = " << bits_name(bits) << "\n"
      << "workers = " << workers << "\n"
      << "max_fallback_fraction = " << fmt_double(max_fallback_fraction) << "\n";
  if (!weights_path.empty()) out << "weights = " << weights_path << "\n";
  return out.str();
}

RunConfig RunConfig::parse(std::string_view text) {
  RunConfig cfg;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) fail(Errc::invalid_argument, "config: line " + std::to_string(line_no) + " has no '='");
    cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(Errc::io, "cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return RunConfig::parse(ss.str());
}

std::vector<WeightMatrix> read_weights(std::istream& in) {
  if (!io::read_magic(in, kWeightsMagic, "weights file")) fail(Errc::corrupt_data, "weights file is empty");
  const auto n = io::read_le<std::uint64_t>(in, "weights expert count");
  const auto rows = io::read_le<std::uint64_t>(in, "weights rows");
  const auto cols = io::read_le<std::uint64_t>(in, "weights cols");
  if (n == 0 || n > (1u << 20) || rows == 0 || cols == 0 || rows * cols > (std::uint64_t{1} << 32))
    fail(Errc::corrupt_data, "weights file: implausible shape");
  std::vector<WeightMatrix> out;
  for (std::uint64_t e = 0; e < n; ++e) {
    std::vector<double> values(rows * cols);
    for (auto& v : values) {
      const float f = std::bit_cast<float>(io::read_le<std::uint32_t>(in, "weights values"));
      if (!std::isfinite(f)) fail(Errc::corrupt_data, "weights file: non-finite value");
      v = f;
    }
    out.emplace_back(rows, cols, std::move(values));
  }
  return out;
}

void write_weights(std::ostream& out, std::span<const WeightMatrix> experts) {
  require(!experts.empty(), "write_weights: no experts");
  io::write_magic(out, kWeightsMagic);
  io::write_le<std::uint64_t>(out, experts.size());
  io::write_le<std::uint64_t>(out, experts.front().rows());
  io::write_le<std::uint64_t>(out, experts.front().cols());
  for (const auto& w : experts) {
    require(w.rows() == experts.front().rows() && w.cols() == experts.front().cols(), "write_weights: shape mismatch");
    for (double v : w.values()) io::write_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  if (!out) fail(Errc::io, "weights: write failed");
}

bool RunResult::fallback_threshold_exceeded() const {
  if (experts.empty()) return false;
  return static_cast<double>(fallbacks) / static_cast<double>(experts.size()) > config.max_fallback_fraction;
}

std::string RunResult::report_text() const {
  std::ostringstream out;
  char buf[256];
  out << "# config\n" << config.serialize() << "# experts\n";
  for (std::size_t e = 0; e < experts.size(); ++e) {
    const auto& x = experts[e];
    std::snprintf(buf, sizeof buf, "expert %zu tokens %zu hessian_tokens %zu fallback %d objective %.6g sparsity %.4f rate %.4f\n", e,
                  x.tokens, x.hessian_tokens, x.fallback ? 1 : 0, x.objective, x.sparsity, x.rate.rate());
    out << buf;
  }
  out << "# layer\n";
  std::snprintf(buf, sizeof buf, "sparsity %.4f\nmean_objective %.6g\nfallbacks %zu\ntoken_cap %zu\n", sparsity, mean_objective,
                fallbacks, cap);
  out << buf;
  if (!compressed.empty()) out << to_text(total_rate);
  std::snprintf(buf, sizeof buf,
                "tier_reads %llu\ntier_writes %llu\nreads_per_token %u..%u\nwrites_per_token %u..%u\npeak_fast_occupancy %zu\n",
                static_cast<unsigned long long>(tier_reads), static_cast<unsigned long long>(tier_writes), min_reads_per_token,
                max_reads_per_token, min_writes_per_token, max_writes_per_token, peak_fast_occupancy);
  out << buf;
  return out.str();
}

std::string RunResult::report_json() const {
  nlohmann::ordered_json j;
  j["config"] = config.serialize();
  auto rate_json = [](const RateReport& r) {
    return nlohmann::ordered_json{{"parameters", r.parameters},     {"payload_bits", r.payload_bits},
                                  {"metadata_bits", r.metadata_bits}, {"original_bits", r.original_bits},
                                  {"rate", r.rate()},                 {"bits_per_parameter", r.bits_per_parameter()}};
  };
  auto arr = nlohmann::ordered_json::array();
  for (const auto& x : experts) {
    nlohmann::ordered_json e{{"tokens", x.tokens},       {"hessian_tokens", x.hessian_tokens}, {"fallback", x.fallback},
                             {"objective", x.objective}, {"sparsity", x.sparsity}};
    if (!compressed.empty()) e["rate"] = rate_json(x.rate);
    arr.push_back(std::move(e));
  }
  j["experts"] = std::move(arr);
  nlohmann::ordered_json layer{{"sparsity", sparsity}, {"mean_objective", mean_objective}, {"fallbacks", fallbacks}, {"token_cap", cap}};
  if (!compressed.empty()) layer["rate"] = rate_json(total_rate);
  j["layer"] = std::move(layer);
  j["tier"] = {{"reads", tier_reads},
               {"writes", tier_writes},
               {"min_reads_per_token", min_reads_per_token},
               {"max_reads_per_token", max_reads_per_token},
               {"min_writes_per_token", min_writes_per_token},
               {"max_writes_per_token", max_writes_per_token},
               {"peak_fast_occupancy", peak_fast_occupancy}};
  return j.dump(2) + "\n";
}

RunResult run_compression(const RunConfig& cfg, const Dictionary* dict) {
  require(cfg.num_experts >= 1 && cfg.dim >= 2 && cfg.samples >= 1 && cfg.tokens_per_sample >= 1, "run: empty layer configuration");
  require(cfg.mask_rate >= 0.0 && cfg.mask_rate <= 1.0, "run: mask_rate must lie in [0, 1]");
  require(cfg.bits != GridMode::ternary || dict != nullptr, "run: ternary runs need a dictionary");
  require(cfg.bits != GridMode::ternary || cfg.dim % 2 == 0, "run: dim must be even for the ternary codec");

  std::vector<WeightMatrix> experts;
  if (cfg.weights_path.empty()) {
    detail::Rng rng(cfg.weight_seed);
    for (std::size_t e = 0; e < cfg.num_experts; ++e) {
      std::vector<double> v(cfg.dim * cfg.dim);
      for (auto& x : v) x = rng.normal() * cfg.weight_std;
      experts.emplace_back(cfg.dim, cfg.dim, std::move(v));
    }
  } else {
    std::ifstream in(cfg.weights_path, std::ios::binary);
    if (!in) fail(Errc::io, "cannot open weights file " + cfg.weights_path);
    experts = read_weights(in);
    require(experts.size() == cfg.num_experts, "run: weights file expert count differs from num_experts");
    require(experts.front().rows() == cfg.dim && experts.front().cols() == cfg.dim, "run: weights file shape differs from dim x dim");
  }

  ListBuffer buf(cfg.dim);
  {
    detail::Rng rng(cfg.data_seed);
    std::vector<float> tokens(cfg.tokens_per_sample * cfg.dim);
    std::vector<std::uint8_t> mask(cfg.tokens_per_sample);
    for (std::size_t s = 0; s < cfg.samples; ++s) {
      for (auto& t : tokens) t = static_cast<float>(rng.normal());
      for (auto& m : mask) m = rng.uniform() < cfg.mask_rate ? 1 : 0;
      buf.append_sample(tokens, mask);
    }
  }

  const RouterSim router(cfg.num_experts, cfg.dim, cfg.router, cfg.router_seed, cfg.router_skew);
  TierStore tier(cfg.fast_capacity);
  BlockOptions opts;
  opts.compress = true;
  opts.mode = cfg.bits;
  opts.solver = cfg.solver;
  opts.damping = cfg.damping;
  opts.group_size = cfg.group_size;
  opts.cap_multiplier = cfg.cap_multiplier;
  opts.use_mask = cfg.mask_tokens;
  opts.workers = cfg.workers;
  BlockResult block = run_block(buf, make_random_dense(cfg.dim, cfg.dense_seed), router, experts, tier, opts);

  RunResult res;
  res.config = cfg;
  res.cap = block.cap;
  res.fallbacks = block.fallbacks;
  double zeros = 0.0;
  double total = 0.0;
  for (auto& outcome : block.experts) {
    ExpertSummary s;
    s.tokens = outcome.tokens;
    s.hessian_tokens = outcome.hessian_tokens;
    s.fallback = outcome.fallback;
    s.objective = outcome.objective;
    s.sparsity = natural_sparsity(outcome.quantized);
    zeros += s.sparsity * static_cast<double>(outcome.quantized.codes.size());
    total += static_cast<double>(outcome.quantized.codes.size());
    if (cfg.bits == GridMode::ternary) {
      res.compressed.push_back(encode(outcome.quantized, *dict));
      s.rate = compression_rate(res.compressed.back());
      res.total_rate += s.rate;
    }
    res.mean_objective += s.objective / static_cast<double>(block.experts.size());
    res.experts.push_back(s);
    res.quantized.push_back(std::move(outcome.quantized));
  }
  res.sparsity = zeros / total;
  res.tier_reads = tier.total_reads();
  res.tier_writes = tier.total_writes();
  const auto reads = tier.reads_per_token();
  const auto writes = tier.writes_per_token();
  res.min_reads_per_token = *std::min_element(reads.begin(), reads.end());
  res.max_reads_per_token = *std::max_element(reads.begin(), reads.end());
  res.min_writes_per_token = *std::min_element(writes.begin(), writes.end());
  res.max_writes_per_token = *std::max_element(writes.begin(), writes.end());
  res.peak_fast_occupancy = tier.peak_occupancy();
  return res;
}

}  // namespace qmoe
