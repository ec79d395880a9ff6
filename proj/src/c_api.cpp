#include "qmoe/qmoe.h"

#include <fstream>
#include <memory>
#include <new>
#include <string>

#include "qmoe/codec.hpp"
#include "qmoe/error.hpp"
#include "qmoe/run.hpp"
#include "qmoe/stats.hpp"

struct qmoe_dict {
  qmoe::Dictionary dict;
};

struct qmoe_matrix {
  qmoe::QuantizedMatrix m;
  std::vector<std::uint16_t> minmax_flat;

  explicit qmoe_matrix(qmoe::QuantizedMatrix q) : m(std::move(q)) {
    minmax_flat.reserve(2 * m.row_minmax.size());
    for (const auto& mm : m.row_minmax) {
      minmax_flat.push_back(mm.lo.bits);
      minmax_flat.push_back(mm.hi.bits);
    }
  }
};

struct qmoe_compressed {
  qmoe::CompressedMatrix c;
};

struct qmoe_checkpoint {
  std::vector<qmoe_compressed> mats;
};

struct qmoe_config {
  qmoe::RunConfig cfg;
  std::string serialized;
};

struct qmoe_run {
  qmoe::RunResult result;
  std::vector<qmoe_compressed> compressed;
  std::vector<qmoe_matrix> matrices;
  std::string text;
  std::string json;
};

namespace {

thread_local std::string g_last_error;

qmoe_status to_status(qmoe::Errc code) {
  switch (code) {
    case qmoe::Errc::invalid_argument: return QMOE_ERR_INVALID_ARGUMENT;
    case qmoe::Errc::corrupt_data: return QMOE_ERR_CORRUPT_DATA;
    case qmoe::Errc::dictionary_mismatch: return QMOE_ERR_DICTIONARY_MISMATCH;
    case qmoe::Errc::io: return QMOE_ERR_IO;
    case qmoe::Errc::numerical: return QMOE_ERR_NUMERICAL;
  }
  return QMOE_ERR_INTERNAL;
}

template <typename Fn>
qmoe_status guarded(Fn&& fn) {
  try {
    fn();
    g_last_error.clear();
    return QMOE_OK;
  } catch (const qmoe::Error& e) {
    g_last_error = e.what();
    return to_status(e.code());
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return QMOE_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return QMOE_ERR_INTERNAL;
  }
}

void need(const void* p, const char* what) {
  if (p == nullptr) qmoe::fail(qmoe::Errc::invalid_argument, std::string(what) + " is null");
}

std::ofstream open_out(const char* path) {
  need(path, "path");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) qmoe::fail(qmoe::Errc::io, std::string("cannot open ") + path + " for writing");
  return out;
}

std::ifstream open_in(const char* path) {
  need(path, "path");
  std::ifstream in(path, std::ios::binary);
  if (!in) qmoe::fail(qmoe::Errc::io, std::string("cannot open ") + path);
  return in;
}

}  // namespace

extern "C" {

const char* qmoe_last_error(void) { return g_last_error.c_str(); }

const char* qmoe_version(void) { return "1.0.0"; }

qmoe_status qmoe_dict_generate(double p0, qmoe_dict** out) {
  return guarded([&] {
    need(out, "out");
    *out = new qmoe_dict{qmoe::Dictionary::generate({p0})};
  });
}

qmoe_status qmoe_dict_load(const char* path, qmoe_dict** out) {
  return guarded([&] {
    need(out, "out");
    auto in = open_in(path);
    *out = new qmoe_dict{qmoe::Dictionary::load(in)};
  });
}

qmoe_status qmoe_dict_save(const qmoe_dict* dict, const char* path) {
  return guarded([&] {
    need(dict, "dict");
    auto out = open_out(path);
    dict->dict.save(out);
  });
}

uint64_t qmoe_dict_hash(const qmoe_dict* dict) { return dict ? dict->dict.hash() : 0; }

double qmoe_dict_p0(const qmoe_dict* dict) { return dict ? dict->dict.p0() : 0.0; }

void qmoe_dict_decode_words(const qmoe_dict* dict, uint16_t codeword, uint32_t words[2]) {
  const auto w = dict->dict.decode_words(codeword);
  words[0] = w[0];
  words[1] = w[1];
}

void qmoe_dict_free(qmoe_dict* dict) { delete dict; }

qmoe_status qmoe_matrix_create(qmoe_grid_mode mode, size_t rows, size_t cols, const uint8_t* codes, const uint16_t* minmax,
                               qmoe_matrix** out) {
  return guarded([&] {
    need(out, "out");
    if (rows * cols > 0) need(codes, "codes");
    if (rows > 0) need(minmax, "minmax");
    qmoe::require(mode == QMOE_TERNARY || mode == QMOE_TWO_BIT, "matrix: unknown grid mode");
    qmoe::QuantizedMatrix m;
    m.mode = static_cast<qmoe::GridMode>(mode);
    m.rows = rows;
    m.cols = cols;
    m.codes.assign(codes, codes + rows * cols);
    const std::uint8_t max_code = mode == QMOE_TERNARY ? 2 : 3;
    for (auto c : m.codes) qmoe::require(c <= max_code, "matrix: code out of range");
    for (size_t r = 0; r < rows; ++r) m.row_minmax.push_back({{minmax[2 * r]}, {minmax[2 * r + 1]}});
    *out = new qmoe_matrix(std::move(m));
  });
}

qmoe_status qmoe_matrix_sample(double p0, size_t rows, size_t cols, uint64_t seed, qmoe_matrix** out) {
  return guarded([&] {
    need(out, "out");
    *out = new qmoe_matrix(qmoe::sample_ternary(p0, rows, cols, seed));
  });
}

size_t qmoe_matrix_rows(const qmoe_matrix* m) { return m->m.rows; }
size_t qmoe_matrix_cols(const qmoe_matrix* m) { return m->m.cols; }
qmoe_grid_mode qmoe_matrix_mode(const qmoe_matrix* m) { return static_cast<qmoe_grid_mode>(m->m.mode); }
const uint8_t* qmoe_matrix_codes(const qmoe_matrix* m) { return m->m.codes.data(); }
const uint16_t* qmoe_matrix_minmax(const qmoe_matrix* m) { return m->minmax_flat.data(); }

qmoe_status qmoe_matrix_sparsity(const qmoe_matrix* m, double* out) {
  return guarded([&] {
    need(m, "matrix");
    need(out, "out");
    *out = qmoe::natural_sparsity(m->m);
  });
}

qmoe_status qmoe_matrix_write_raw(const char* path, const qmoe_matrix* const* mats, size_t count) {
  return guarded([&] {
    if (count > 0) need(mats, "mats");
    auto out = open_out(path);
    for (size_t i = 0; i < count; ++i) {
      need(mats[i], "matrix");
      qmoe::write_raw(out, mats[i]->m);
    }
  });
}

void qmoe_matrix_free(qmoe_matrix* m) { delete m; }

qmoe_status qmoe_encode(const qmoe_matrix* m, const qmoe_dict* dict, qmoe_compressed** out) {
  return guarded([&] {
    need(m, "matrix");
    need(dict, "dict");
    need(out, "out");
    *out = new qmoe_compressed{qmoe::encode(m->m, dict->dict)};
  });
}

qmoe_status qmoe_decompress(const qmoe_compressed* c, const qmoe_dict* dict, qmoe_matrix** out) {
  return guarded([&] {
    need(c, "compressed");
    need(dict, "dict");
    need(out, "out");
    *out = new qmoe_matrix(qmoe::decompress(c->c, dict->dict));
  });
}

qmoe_status qmoe_matvec(const qmoe_compressed* c, const qmoe_dict* dict, const float* x, size_t nx, float* y, size_t ny,
                        unsigned workers) {
  return guarded([&] {
    need(c, "compressed");
    need(dict, "dict");
    if (nx > 0) need(x, "x");
    if (ny > 0) need(y, "y");
    qmoe::fused_matvec(c->c, dict->dict, {x, nx}, {y, ny}, workers);
  });
}

qmoe_status qmoe_rate(const qmoe_compressed* c, qmoe_rate_report* out) {
  return guarded([&] {
    need(c, "compressed");
    need(out, "out");
    const auto r = qmoe::compression_rate(c->c);
    *out = qmoe_rate_report{r.parameters, r.payload_bits, r.metadata_bits, r.original_bits, r.rate(), r.bits_per_parameter()};
  });
}

size_t qmoe_compressed_rows(const qmoe_compressed* c) { return c->c.rows; }
size_t qmoe_compressed_cols(const qmoe_compressed* c) { return c->c.cols; }
size_t qmoe_compressed_codeword_count(const qmoe_compressed* c) { return c->c.codewords.size(); }
const uint16_t* qmoe_compressed_codewords(const qmoe_compressed* c) { return c->c.codewords.data(); }
uint64_t qmoe_compressed_dict_hash(const qmoe_compressed* c) { return c->c.dict_hash; }
void qmoe_compressed_free(qmoe_compressed* c) { delete c; }

qmoe_status qmoe_checkpoint_write(const char* path, const qmoe_compressed* const* mats, size_t count) {
  return guarded([&] {
    if (count > 0) need(mats, "mats");
    auto out = open_out(path);
    for (size_t i = 0; i < count; ++i) {
      need(mats[i], "compressed");
      qmoe::write_compressed(out, mats[i]->c);
    }
  });
}

qmoe_status qmoe_checkpoint_open(const char* path, qmoe_checkpoint** out) {
  return guarded([&] {
    need(out, "out");
    auto in = open_in(path);
    auto ck = std::make_unique<qmoe_checkpoint>();
    for (auto& c : qmoe::read_checkpoint(in)) ck->mats.push_back({std::move(c)});
    *out = ck.release();
  });
}

size_t qmoe_checkpoint_count(const qmoe_checkpoint* ck) { return ck->mats.size(); }

const qmoe_compressed* qmoe_checkpoint_get(const qmoe_checkpoint* ck, size_t index) {
  return index < ck->mats.size() ? &ck->mats[index] : nullptr;
}

void qmoe_checkpoint_free(qmoe_checkpoint* ck) { delete ck; }

qmoe_status qmoe_theoretical_limit(double p0, double* out) {
  return guarded([&] {
    need(out, "out");
    *out = qmoe::theoretical_limit(p0);
  });
}

qmoe_status qmoe_config_default(qmoe_config** out) {
  return guarded([&] {
    need(out, "out");
    *out = new qmoe_config{};
  });
}

qmoe_status qmoe_config_load(const char* path, qmoe_config** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    *out = new qmoe_config{qmoe::load_run_config(path), {}};
  });
}

qmoe_status qmoe_config_parse(const char* text, qmoe_config** out) {
  return guarded([&] {
    need(text, "text");
    need(out, "out");
    *out = new qmoe_config{qmoe::RunConfig::parse(text), {}};
  });
}

qmoe_status qmoe_config_set(qmoe_config* cfg, const char* key, const char* value) {
  return guarded([&] {
    need(cfg, "config");
    need(key, "key");
    need(value, "value");
    cfg->cfg.set(key, value);
  });
}

const char* qmoe_config_serialize(qmoe_config* cfg) {
  cfg->serialized = cfg->cfg.serialize();
  return cfg->serialized.c_str();
}

void qmoe_config_free(qmoe_config* cfg) { delete cfg; }

qmoe_status qmoe_run_compress(const qmoe_config* cfg, const qmoe_dict* dict, qmoe_run** out) {
  return guarded([&] {
    need(cfg, "config");
    need(out, "out");
    auto run = std::make_unique<qmoe_run>();
    run->result = qmoe::run_compression(cfg->cfg, dict ? &dict->dict : nullptr);
    for (const auto& c : run->result.compressed) run->compressed.push_back({c});
    for (const auto& q : run->result.quantized) run->matrices.emplace_back(q);
    run->text = run->result.report_text();
    run->json = run->result.report_json();
    *out = run.release();
  });
}

size_t qmoe_run_expert_count(const qmoe_run* run) { return run->result.experts.size(); }
size_t qmoe_run_fallbacks(const qmoe_run* run) { return run->result.fallbacks; }
int qmoe_run_fallback_threshold_exceeded(const qmoe_run* run) { return run->result.fallback_threshold_exceeded() ? 1 : 0; }
double qmoe_run_mean_objective(const qmoe_run* run) { return run->result.mean_objective; }
double qmoe_run_sparsity(const qmoe_run* run) { return run->result.sparsity; }

const qmoe_compressed* qmoe_run_compressed(const qmoe_run* run, size_t expert) {
  return expert < run->compressed.size() ? &run->compressed[expert] : nullptr;
}

const qmoe_matrix* qmoe_run_matrix(const qmoe_run* run, size_t expert) {
  return expert < run->matrices.size() ? &run->matrices[expert] : nullptr;
}

const char* qmoe_run_report_text(const qmoe_run* run) { return run->text.c_str(); }
const char* qmoe_run_report_json(const qmoe_run* run) { return run->json.c_str(); }
void qmoe_run_free(qmoe_run* run) { delete run; }

}  // extern "C"
