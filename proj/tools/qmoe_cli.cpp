// qmoe command-line tool; talks to the library only through the C API.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "qmoe/qmoe.h"

namespace {

enum ExitCode {
  kOk = 0,
  kUsage = 1,
  kCorrupt = 2,
  kFallbacks = 3,
  kDictMismatch = 4,
  kIo = 5,
  kInternal = 6,
};

struct Failure {
  int code;
};

int exit_code(qmoe_status s) {
  switch (s) {
    case QMOE_OK: return kOk;
    case QMOE_ERR_INVALID_ARGUMENT: return kUsage;
    case QMOE_ERR_CORRUPT_DATA: return kCorrupt;
    case QMOE_ERR_DICTIONARY_MISMATCH: return kDictMismatch;
    case QMOE_ERR_IO: return kIo;
    case QMOE_ERR_NUMERICAL: return kFallbacks;
    default: return kInternal;
  }
}

const char* status_label(qmoe_status s) {
  switch (s) {
    case QMOE_ERR_CORRUPT_DATA: return "data corruption";
    case QMOE_ERR_DICTIONARY_MISMATCH: return "dictionary mismatch";
    case QMOE_ERR_IO: return "i/o error";
    case QMOE_ERR_INVALID_ARGUMENT: return "invalid argument";
    default: return "error";
  }
}

void check(qmoe_status s) {
  if (s == QMOE_OK) return;
  std::fprintf(stderr, "qmoe: %s: %s\n", status_label(s), qmoe_last_error());
  throw Failure{exit_code(s)};
}

template <typename T, void (*Free)(T*)>
struct Deleter {
  void operator()(T* p) const { Free(p); }
};
using DictPtr = std::unique_ptr<qmoe_dict, Deleter<qmoe_dict, qmoe_dict_free>>;
using MatrixPtr = std::unique_ptr<qmoe_matrix, Deleter<qmoe_matrix, qmoe_matrix_free>>;
using CompressedPtr = std::unique_ptr<qmoe_compressed, Deleter<qmoe_compressed, qmoe_compressed_free>>;
using CheckpointPtr = std::unique_ptr<qmoe_checkpoint, Deleter<qmoe_checkpoint, qmoe_checkpoint_free>>;
using ConfigPtr = std::unique_ptr<qmoe_config, Deleter<qmoe_config, qmoe_config_free>>;
using RunPtr = std::unique_ptr<qmoe_run, Deleter<qmoe_run, qmoe_run_free>>;

DictPtr load_dict(const std::string& path) {
  qmoe_dict* d = nullptr;
  check(qmoe_dict_load(path.c_str(), &d));
  return DictPtr(d);
}

CheckpointPtr open_checkpoint(const std::string& path) {
  qmoe_checkpoint* ck = nullptr;
  check(qmoe_checkpoint_open(path.c_str(), &ck));
  return CheckpointPtr(ck);
}

std::vector<float> read_vector(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    std::fprintf(stderr, "qmoe: i/o error: cannot open %s\n", path.c_str());
    throw Failure{kIo};
  }
  std::vector<float> v;
  std::string line;
  while (std::getline(in, line)) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    float f;
    while (ls >> f) v.push_back(f);
    if (!ls.eof()) {
      std::fprintf(stderr, "qmoe: invalid argument: bad number in %s\n", path.c_str());
      throw Failure{kUsage};
    }
  }
  return v;
}

void write_vector(const std::string& path, const std::vector<float>& v) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) {
    std::fprintf(stderr, "qmoe: i/o error: cannot open %s for writing\n", path.c_str());
    throw Failure{kIo};
  }
  for (float x : v) std::fprintf(f, "%.9g\n", static_cast<double>(x));
  std::fclose(f);
}

void print_rate(const char* label, const qmoe_rate_report& r) {
  std::printf("%s parameters %llu payload_bits %llu metadata_bits %llu rate %.4f bits_per_parameter %.4f\n", label,
              static_cast<unsigned long long>(r.parameters), static_cast<unsigned long long>(r.payload_bits),
              static_cast<unsigned long long>(r.metadata_bits), r.rate, r.bits_per_parameter);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"qmoe: sub-1-bit mixture-of-experts compression"};
  app.require_subcommand(1);

  double gd_p0 = 0.885;
  std::string gd_out;
  auto* gen = app.add_subcommand("gen-dict", "Generate the shared decoding dictionary");
  gen->add_option("--p0", gd_p0, "Probability of the zero value")->capture_default_str();
  gen->add_option("--out", gd_out, "Dictionary output path")->required();

  std::string c_config, c_dict, c_out, c_mode, c_bits, c_json;
  unsigned c_workers = 0;
  auto* comp = app.add_subcommand("compress", "Quantize and encode a simulated MoE layer");
  comp->add_option("--config", c_config, "Run configuration file (key = value)");
  comp->add_option("--dict", c_dict, "Dictionary file (required for ternary)");
  comp->add_option("--out", c_out, "Checkpoint output (raw dump for 2bit)");
  comp->add_option("--mode", c_mode, "Solver")->check(CLI::IsMember({"rtn", "gptq"}));
  comp->add_option("--bits", c_bits, "Grid")->check(CLI::IsMember({"ternary", "2bit"}));
  comp->add_option("--workers", c_workers, "Worker threads");
  comp->add_option("--report-json", c_json, "Write the machine-readable report here");

  std::string d_in, d_dict, d_out;
  auto* dec = app.add_subcommand("decompress", "Decode a checkpoint into a raw ternary dump");
  dec->add_option("--in", d_in, "Checkpoint")->required();
  dec->add_option("--dict", d_dict, "Dictionary")->required();
  dec->add_option("--out", d_out, "Raw dump output")->required();

  std::string m_in, m_dict, m_x, m_y;
  std::size_t m_index = 0;
  unsigned m_workers = 1;
  auto* mv = app.add_subcommand("matvec", "Fused decompress + matrix-vector product");
  mv->add_option("--in", m_in, "Checkpoint")->required();
  mv->add_option("--dict", m_dict, "Dictionary")->required();
  mv->add_option("--x", m_x, "Input vector (text, one value per line)")->required();
  mv->add_option("--y", m_y, "Output vector path")->required();
  mv->add_option("--matrix", m_index, "Matrix index within the checkpoint")->capture_default_str();
  mv->add_option("--workers", m_workers, "Worker threads")->capture_default_str();

  std::string r_in, r_dict;
  auto* rates = app.add_subcommand("rates", "Report compression rates of a checkpoint");
  rates->add_option("--in", r_in, "Checkpoint")->required();
  rates->add_option("--dict", r_dict, "Dictionary")->required();

  double s_p0 = 0.885;
  std::size_t s_rows = 0, s_cols = 0;
  std::uint64_t s_seed = 0;
  std::string s_out, s_dict;
  auto* smp = app.add_subcommand("sample", "Sample an iid ternary matrix");
  smp->add_option("--p0", s_p0, "Probability of the zero value")->capture_default_str();
  smp->add_option("--rows", s_rows)->required();
  smp->add_option("--cols", s_cols)->required();
  smp->add_option("--seed", s_seed)->capture_default_str();
  smp->add_option("--out", s_out, "Raw dump output");
  smp->add_option("--dict", s_dict, "Encode with this dictionary and report the rate");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (gen->parsed()) {
      qmoe_dict* d = nullptr;
      check(qmoe_dict_generate(gd_p0, &d));
      DictPtr dict(d);
      check(qmoe_dict_save(dict.get(), gd_out.c_str()));
      std::printf("dictionary p0 %.17g hash %016llx\n", qmoe_dict_p0(dict.get()),
                  static_cast<unsigned long long>(qmoe_dict_hash(dict.get())));
    } else if (comp->parsed()) {
      qmoe_config* raw_cfg = nullptr;
      check(c_config.empty() ? qmoe_config_default(&raw_cfg) : qmoe_config_load(c_config.c_str(), &raw_cfg));
      ConfigPtr cfg(raw_cfg);
      if (!c_mode.empty()) check(qmoe_config_set(cfg.get(), "mode", c_mode.c_str()));
      if (!c_bits.empty()) check(qmoe_config_set(cfg.get(), "bits", c_bits.c_str()));
      if (c_workers > 0) check(qmoe_config_set(cfg.get(), "workers", std::to_string(c_workers).c_str()));
      const bool ternary = std::string(qmoe_config_serialize(cfg.get())).find("bits = ternary") != std::string::npos;
      DictPtr dict;
      if (ternary) {
        if (c_dict.empty()) {
          std::fprintf(stderr, "qmoe: invalid argument: ternary compression needs --dict\n");
          return kUsage;
        }
        dict = load_dict(c_dict);
      }
      qmoe_run* raw_run = nullptr;
      check(qmoe_run_compress(cfg.get(), dict.get(), &raw_run));
      RunPtr run(raw_run);
      const std::size_t n = qmoe_run_expert_count(run.get());
      if (!c_out.empty()) {
        if (ternary) {
          std::vector<const qmoe_compressed*> mats;
          for (std::size_t e = 0; e < n; ++e) mats.push_back(qmoe_run_compressed(run.get(), e));
          check(qmoe_checkpoint_write(c_out.c_str(), mats.data(), mats.size()));
        } else {
          std::vector<const qmoe_matrix*> mats;
          for (std::size_t e = 0; e < n; ++e) mats.push_back(qmoe_run_matrix(run.get(), e));
          check(qmoe_matrix_write_raw(c_out.c_str(), mats.data(), mats.size()));
        }
      }
      std::fputs(qmoe_run_report_text(run.get()), stdout);
      if (!c_json.empty()) {
        std::ofstream js(c_json);
        if (!(js << qmoe_run_report_json(run.get()))) {
          std::fprintf(stderr, "qmoe: i/o error: cannot write %s\n", c_json.c_str());
          return kIo;
        }
      }
      if (qmoe_run_fallbacks(run.get()) > 0)
        std::fprintf(stderr, "qmoe: %zu expert(s) fell back to round-to-nearest\n", qmoe_run_fallbacks(run.get()));
      if (qmoe_run_fallback_threshold_exceeded(run.get())) {
        std::fprintf(stderr, "qmoe: fallback fraction exceeds max_fallback_fraction\n");
        return kFallbacks;
      }
    } else if (dec->parsed()) {
      auto dict = load_dict(d_dict);
      auto ck = open_checkpoint(d_in);
      std::vector<MatrixPtr> owned;
      std::vector<const qmoe_matrix*> mats;
      for (std::size_t i = 0; i < qmoe_checkpoint_count(ck.get()); ++i) {
        qmoe_matrix* m = nullptr;
        check(qmoe_decompress(qmoe_checkpoint_get(ck.get(), i), dict.get(), &m));
        owned.emplace_back(m);
        mats.push_back(m);
      }
      check(qmoe_matrix_write_raw(d_out.c_str(), mats.data(), mats.size()));
      std::printf("decompressed %zu matrix(es)\n", mats.size());
    } else if (mv->parsed()) {
      auto dict = load_dict(m_dict);
      auto ck = open_checkpoint(m_in);
      const qmoe_compressed* c = qmoe_checkpoint_get(ck.get(), m_index);
      if (c == nullptr) {
        std::fprintf(stderr, "qmoe: invalid argument: checkpoint has no matrix %zu\n", m_index);
        return kUsage;
      }
      const auto x = read_vector(m_x);
      std::vector<float> y(qmoe_compressed_rows(c), 0.0f);
      check(qmoe_matvec(c, dict.get(), x.data(), x.size(), y.data(), y.size(), m_workers));
      write_vector(m_y, y);
    } else if (rates->parsed()) {
      auto dict = load_dict(r_dict);
      auto ck = open_checkpoint(r_in);
      qmoe_rate_report total{};
      for (std::size_t i = 0; i < qmoe_checkpoint_count(ck.get()); ++i) {
        const qmoe_compressed* c = qmoe_checkpoint_get(ck.get(), i);
        qmoe_matrix* m = nullptr;
        check(qmoe_decompress(c, dict.get(), &m));
        MatrixPtr decoded(m);
        double sparsity = 0.0;
        if (qmoe_matrix_rows(m) * qmoe_matrix_cols(m) > 0) check(qmoe_matrix_sparsity(m, &sparsity));
        qmoe_rate_report r{};
        check(qmoe_rate(c, &r));
        std::printf("matrix %zu rows %zu cols %zu sparsity %.4f ", i, qmoe_compressed_rows(c), qmoe_compressed_cols(c), sparsity);
        print_rate("", r);
        total.parameters += r.parameters;
        total.payload_bits += r.payload_bits;
        total.metadata_bits += r.metadata_bits;
        total.original_bits += r.original_bits;
      }
      const double stored = static_cast<double>(total.payload_bits + total.metadata_bits);
      total.rate = stored > 0 ? static_cast<double>(total.original_bits) / stored : 0.0;
      total.bits_per_parameter = total.rate > 0 ? 16.0 / total.rate : 0.0;
      print_rate("total", total);
      double limit = 0.0;
      if (qmoe_theoretical_limit(qmoe_dict_p0(dict.get()), &limit) == QMOE_OK)
        std::printf("theoretical_limit %.4f\n", limit);
    } else if (smp->parsed()) {
      qmoe_matrix* m = nullptr;
      check(qmoe_matrix_sample(s_p0, s_rows, s_cols, s_seed, &m));
      MatrixPtr mat(m);
      double sparsity = 0.0;
      if (s_rows * s_cols > 0) check(qmoe_matrix_sparsity(m, &sparsity));
      std::printf("sample rows %zu cols %zu p0 %.6g seed %llu sparsity %.6f\n", s_rows, s_cols, s_p0,
                  static_cast<unsigned long long>(s_seed), sparsity);
      if (!s_out.empty()) {
        const qmoe_matrix* one = m;
        check(qmoe_matrix_write_raw(s_out.c_str(), &one, 1));
      }
      if (!s_dict.empty()) {
        auto dict = load_dict(s_dict);
        qmoe_compressed* c = nullptr;
        check(qmoe_encode(m, dict.get(), &c));
        CompressedPtr comp_mat(c);
        qmoe_rate_report r{};
        check(qmoe_rate(c, &r));
        print_rate("encoded", r);
      }
    }
  } catch (const Failure& f) {
    return f.code;
  }
  return kOk;
}
