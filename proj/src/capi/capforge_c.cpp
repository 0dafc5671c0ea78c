#include "capforge/capforge.h"

#include <cstring>
#include <memory>
#include <string>

#include "codec.hpp"
#include "metrics.hpp"
#include "pipeline.hpp"

using namespace capforge;

struct cf_pipeline {
  ExperimentConfig config;
  int jobs = 1;
  cf_log_fn log = nullptr;
  void* log_user = nullptr;
};

struct cf_codec {
  RvqCodec codec;
};

namespace {

thread_local std::string g_last_error;

cf_status status_of(ErrorKind k) {
  switch (k) {
    case ErrorKind::Config: return CF_ERR_CONFIG;
    case ErrorKind::Input:
    case ErrorKind::Data:
    case ErrorKind::Parse: return CF_ERR_DATA;
    case ErrorKind::Training: return CF_ERR_TRAINING;
    case ErrorKind::Metric: return CF_ERR_METRIC;
    case ErrorKind::Io: return CF_ERR_IO;
  }
  return CF_ERR_INTERNAL;
}

template <class Fn>
cf_status guarded(Fn&& fn) {
  g_last_error.clear();
  try {
    fn();
    return CF_OK;
  } catch (const Error& e) {
    g_last_error = std::string(to_string(e.kind())) + ": " + e.what();
    return status_of(e.kind());
  } catch (const std::filesystem::filesystem_error& e) {
    g_last_error = std::string("io error: ") + e.what();
    return CF_ERR_IO;
  } catch (const std::exception& e) {
    g_last_error = std::string("internal error: ") + e.what();
    return CF_ERR_INTERNAL;
  } catch (...) {
    g_last_error = "internal error: unknown exception";
    return CF_ERR_INTERNAL;
  }
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void need(const void* p, const char* what) {
  if (!p) fail(ErrorKind::Input, std::string(what) + " is NULL");
}

const EventVocab& default_vocab() {
  static const EventVocab vocab = ExperimentConfig().vocab();
  return vocab;
}

}  // namespace

extern "C" {

const char* cf_version(void) { return "0.1.0"; }

const char* cf_last_error(void) { return g_last_error.c_str(); }

void cf_string_free(char* s) { std::free(s); }

cf_status cf_pipeline_create(const char* config_path, cf_pipeline** out) {
  return guarded([&] {
    need(out, "out");
    *out = nullptr;
    auto p = std::make_unique<cf_pipeline>();
    if (config_path) p->config = ExperimentConfig::load(config_path);
    *out = p.release();
  });
}

void cf_pipeline_free(cf_pipeline* p) { delete p; }

cf_status cf_pipeline_set(cf_pipeline* p, const char* key, const char* value) {
  return guarded([&] {
    need(p, "pipeline");
    need(key, "key");
    need(value, "value");
    p->config.set(key, value);
  });
}

cf_status cf_pipeline_set_seed(cf_pipeline* p, uint64_t seed) {
  return guarded([&] {
    need(p, "pipeline");
    p->config.set_seed(seed);
  });
}

cf_status cf_pipeline_set_jobs(cf_pipeline* p, int jobs) {
  return guarded([&] {
    need(p, "pipeline");
    if (jobs < 1) fail(ErrorKind::Config, "jobs must be >= 1");
    p->jobs = jobs;
  });
}

cf_status cf_pipeline_set_logger(cf_pipeline* p, cf_log_fn fn, void* user) {
  return guarded([&] {
    need(p, "pipeline");
    p->log = fn;
    p->log_user = user;
  });
}

cf_status cf_pipeline_config_json(const cf_pipeline* p, char** out) {
  return guarded([&] {
    need(p, "pipeline");
    need(out, "out");
    *out = dup_string(p->config.json().dump(2));
  });
}

cf_status cf_pipeline_config_hash(const cf_pipeline* p, char** out) {
  return guarded([&] {
    need(p, "pipeline");
    need(out, "out");
    *out = dup_string(p->config.hash());
  });
}

namespace {

Pipeline make_pipeline(const cf_pipeline* p) {
  Pipeline pipe(p->config, p->jobs);
  if (p->log) {
    cf_log_fn fn = p->log;
    void* user = p->log_user;
    pipe.logger = [fn, user](const std::string& line) { fn(line.c_str(), user); };
  }
  return pipe;
}

}  // namespace

cf_status cf_pipeline_run(cf_pipeline* p, const char* stage) {
  return guarded([&] {
    need(p, "pipeline");
    need(stage, "stage");
    make_pipeline(p).run(stage);
  });
}

cf_status cf_pipeline_report(cf_pipeline* p, const char* const* inputs, size_t n_inputs, int allow_hash_mismatch,
                             char** table_text, char** table_json) {
  return guarded([&] {
    need(p, "pipeline");
    std::vector<std::filesystem::path> files;
    for (size_t i = 0; i < n_inputs; ++i) {
      need(inputs[i], "input path");
      files.emplace_back(inputs[i]);
    }
    const Json table = make_pipeline(p).report(files, allow_hash_mismatch != 0);
    if (table_text) *table_text = dup_string(format_report_table(table));
    if (table_json) *table_json = dup_string(table.dump(2));
  });
}

cf_status cf_codec_fit(const double* frames, size_t n_frames, size_t dim, const char* preset, int n_q,
                       int codebook_size, uint64_t seed, cf_codec** out) {
  return guarded([&] {
    need(out, "out");
    need(preset, "preset");
    if (n_frames > 0) need(frames, "frames");
    *out = nullptr;
    CodecConfig cfg = codec_preset(preset, static_cast<int>(dim));
    if (n_q > 0) cfg.n_q = n_q;
    if (codebook_size > 0) cfg.codebook_size = codebook_size;
    cfg.validate();
    FeatureSeq seq;
    seq.frame_rate_hz = cfg.frame_rate_hz;
    seq.frames = Eigen::Map<const Mat>(frames, static_cast<Eigen::Index>(n_frames), static_cast<Eigen::Index>(dim));
    const std::vector<FeatureSeq> corpus{seq};
    *out = new cf_codec{RvqCodec::fit(corpus, cfg, seed)};
  });
}

cf_status cf_codec_load(const char* path, cf_codec** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    *out = nullptr;
    Json j;
    try {
      j = Json::parse(read_text(path));
    } catch (const Json::exception& e) {
      fail(ErrorKind::Parse, std::string(path) + ": " + e.what());
    }
    *out = new cf_codec{RvqCodec::from_json(j)};
  });
}

cf_status cf_codec_save(const cf_codec* c, const char* path) {
  return guarded([&] {
    need(c, "codec");
    need(path, "path");
    write_text(path, c->codec.to_json().dump() + "\n");
  });
}

cf_status cf_codec_info(const cf_codec* c, int* n_q, int* codebook_size, int* dim) {
  return guarded([&] {
    need(c, "codec");
    const CodecConfig& cfg = c->codec.config();
    if (n_q) *n_q = cfg.n_q;
    if (codebook_size) *codebook_size = cfg.codebook_size;
    if (dim) *dim = cfg.dim;
  });
}

cf_status cf_codec_encode(const cf_codec* c, const double* frames, size_t n_frames, int32_t* codes) {
  return guarded([&] {
    need(c, "codec");
    if (n_frames > 0) {
      need(frames, "frames");
      need(codes, "codes");
    }
    const CodecConfig& cfg = c->codec.config();
    FeatureSeq seq;
    seq.frame_rate_hz = cfg.frame_rate_hz;
    seq.frames = Eigen::Map<const Mat>(frames, static_cast<Eigen::Index>(n_frames), cfg.dim);
    const CodecGrid g = c->codec.encode(seq);
    for (std::size_t q = 0; q < g.codes.size(); ++q)
      for (std::size_t t = 0; t < n_frames; ++t) codes[q * n_frames + t] = g.codes[q][t];
  });
}

cf_status cf_codec_decode(const cf_codec* c, const int32_t* codes, size_t n_frames, double* frames) {
  return guarded([&] {
    need(c, "codec");
    if (n_frames > 0) {
      need(frames, "frames");
      need(codes, "codes");
    }
    const CodecConfig& cfg = c->codec.config();
    CodecGrid g;
    g.codebook_size = cfg.codebook_size;
    g.codes.assign(static_cast<std::size_t>(cfg.n_q), std::vector<std::int32_t>(n_frames));
    for (std::size_t q = 0; q < g.codes.size(); ++q)
      for (std::size_t t = 0; t < n_frames; ++t) g.codes[q][t] = codes[q * n_frames + t];
    const FeatureSeq seq = c->codec.decode(g);
    Eigen::Map<Mat>(frames, static_cast<Eigen::Index>(n_frames), cfg.dim) = seq.frames;
  });
}

void cf_codec_free(cf_codec* c) { delete c; }

cf_status cf_evaluate_jsonl(const char* input_path, const char* output_path, char** report_json) {
  return guarded([&] {
    need(input_path, "input_path");
    const EvalCorpus corpus = eval_corpus_from_jsonl(read_jsonl(input_path));
    const EventVocab& vocab = default_vocab();
    const MetricReport report = evaluate(corpus, MetricsConfig{}, SpiceProxy{}, OracleTextEmbedder(vocab),
                                         RuleFluencyDetector(content_words(vocab)));
    const std::string text = report.to_json().dump(2);
    if (output_path) write_text(output_path, text + "\n");
    if (report_json) *report_json = dup_string(text);
  });
}

cf_status cf_fluency_flags(const char* caption, unsigned* flags) {
  return guarded([&] {
    need(caption, "caption");
    need(flags, "flags");
    *flags = RuleFluencyDetector(content_words(default_vocab())).detect(std::string(caption));
  });
}

}  // extern "C"
