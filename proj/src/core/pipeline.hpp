#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "codec.hpp"
#include "decoding.hpp"
#include "io.hpp"
#include "metrics.hpp"
#include "rerank.hpp"
#include "train.hpp"
#include "world.hpp"

namespace capforge {

/// One JSON document holding every knob of an experiment. Files and --set
/// overrides are merged over the defaults; unknown keys are rejected.
class ExperimentConfig {
 public:
  ExperimentConfig();

  static Json defaults();
  static ExperimentConfig from_json(const Json& j);
  static ExperimentConfig load(const std::filesystem::path& path);

  /// `key` is dotted ("train.lr"). `value` is parsed as JSON, except for string
  /// settings which take it verbatim. Call validate() once all overrides are in.
  void set(const std::string& key, const std::string& value);
  void set_seed(std::uint64_t seed);

  void validate() const;
  const Json& json() const { return data_; }

  /// Hash of everything except the paths section; 16 hex digits.
  std::string hash() const;

  std::uint64_t seed() const;
  std::filesystem::path out_dir() const;

  EventVocab vocab() const;
  SceneParams scene_params() const;
  CodecConfig codec_config() const;
  ModelConfig model_config(int vocab_size) const;
  TrainConfig train_config() const;
  BeamOptions beam_options() const;
  NucleusOptions nucleus_options() const;
  RerankWeights rerank_weights() const;
  RerankMode rerank_mode() const;
  MetricsConfig metrics_config() const;

 private:
  void merge(const Json& patch, const std::string& prefix, Json& target);
  Json data_;
};

/// Names accepted by Pipeline::run, in execution order ("all" runs them all).
const std::vector<std::string>& stage_names();

/// The four systems compared by the report.
const std::vector<std::string>& report_systems();

class Pipeline {
 public:
  explicit Pipeline(ExperimentConfig config, int jobs = 1);

  void synth_data();
  void rvq();
  void train();
  void generate();
  void rerank();
  void evaluate();
  /// Comparison table over report files; defaults to this run's reports.
  /// Refuses mismatched config hashes unless allowed.
  Json report(const std::vector<std::filesystem::path>& inputs = {}, bool allow_hash_mismatch = false);

  void run(const std::string& stage);

  const ExperimentConfig& config() const { return config_; }
  /// Receives progress lines; unset means silent.
  std::function<void(const std::string&)> logger;
  std::filesystem::path path(const std::string& relative) const;

 private:
  void require(const std::filesystem::path& p, const std::string& stage) const;

  ExperimentConfig config_;
  int jobs_;
  std::string hash_;
};

/// Evaluation input rows: {item_id, candidate, references}.
EvalCorpus eval_corpus_from_jsonl(const std::vector<Json>& rows);

/// Fixed-width text rendering of a report table.
std::string format_report_table(const Json& table);

}  // namespace capforge
