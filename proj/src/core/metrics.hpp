#pragma once

#include <optional>
#include <string>
#include <vector>

#include "io.hpp"
#include "rerank.hpp"
#include "world.hpp"

namespace capforge {

using Tokens = std::vector<std::string>;

struct EvalItem {
  std::string item_id;
  std::string candidate;
  std::vector<std::string> references;
};

struct EvalCorpus {
  std::vector<EvalItem> items;

  /// Unique ids, at least one reference per item.
  void validate() const;
};

/// Exact-match unigram METEOR. Tokens are aligned greedily left to right;
/// the best reference wins.
double meteor_lite(const Tokens& candidate, const std::vector<Tokens>& references);

struct CiderResult {
  std::vector<double> per_item;
  double corpus = 0.0;
};

/// CIDEr-D over a tokenised corpus. df counts items whose reference set holds
/// an n-gram; idf = ln(items) - ln(max(1, df)).
CiderResult cider_d(const std::vector<Tokens>& candidates, const std::vector<std::vector<Tokens>>& references,
                    int max_n = 4, double sigma = 6.0);

/// Pluggable SPICE backend. score() may throw; failures are reported per item.
class SpiceBackend {
 public:
  virtual ~SpiceBackend() = default;
  virtual std::string name() const = 0;
  virtual double score(const Tokens& candidate, const std::vector<Tokens>& references) const = 0;
};

/// F1 between the candidate's content-word set and the union of the
/// references' content-word sets, stop words removed.
class SpiceProxy final : public SpiceBackend {
 public:
  std::string name() const override { return "spice_proxy"; }
  double score(const Tokens& candidate, const std::vector<Tokens>& references) const override;
};

struct SpiceResult {
  std::vector<std::optional<double>> per_item;
  double corpus = 0.0;
  std::vector<std::string> warnings;
};

SpiceResult spice_score(const std::vector<Tokens>& candidates, const std::vector<std::vector<Tokens>>& references,
                        const SpiceBackend& backend, const std::vector<std::string>& item_ids = {});

double spider(double cider, double spice);
double apply_fluency_penalty(double score, FluencyFlags flags, double factor = 0.1);

/// Sentence embedder used by the FENSE composition.
class TextEmbedder {
 public:
  virtual ~TextEmbedder() = default;
  virtual std::string name() const = 0;
  virtual SeqEmbedding embed(const std::string& text) const = 0;
};

class OracleTextEmbedder final : public TextEmbedder {
 public:
  explicit OracleTextEmbedder(EventVocab vocab) : vocab_(std::move(vocab)) {}
  std::string name() const override { return "fense_toy"; }
  SeqEmbedding embed(const std::string& text) const override { return oracle_text_embedding(text, vocab_); }

 private:
  EventVocab vocab_;
};

/// Mean cosine to the references.
double sentence_similarity(const std::string& candidate, const std::vector<std::string>& references,
                           const TextEmbedder& embedder);
double fense(const std::string& candidate, const std::vector<std::string>& references, const TextEmbedder& embedder,
             const FluencyDetector& detector, double factor = 0.1);

/// Unique tokens across all candidates.
std::size_t vocab_size(const std::vector<std::string>& candidates);

struct MetricsConfig {
  int cider_n = 4;
  double cider_sigma = 6.0;
  double penalty_factor = 0.1;
  double w_enc = 0.6;  // echoed only
  double w_dec = 0.4;

  void validate() const;
  Json to_json() const;
  static MetricsConfig from_json(const Json& j);
};

struct ItemMetrics {
  std::string item_id;
  double meteor = 0.0;
  double cider_d = 0.0;
  std::optional<double> spice;
  std::optional<double> spider;
  std::optional<double> spider_fl;
  double similarity = 0.0;
  double fense = 0.0;
  FluencyFlags flags = 0;
};

struct MetricReport {
  double meteor = 0.0;
  double cider_d = 0.0;
  double spice = 0.0;
  double spider = 0.0;
  double spider_fl = 0.0;
  double fense = 0.0;
  std::size_t vocab = 0;
  std::vector<ItemMetrics> items;  // sorted by item_id
  MetricsConfig config;
  std::string spice_label;
  std::string fense_label;
  std::vector<std::string> warnings;

  Json to_json() const;
};

/// All metrics with shared tokenisation and fluency flags. Corpus values are
/// means over items in item_id order, so item order never matters. SPICE,
/// SPIDEr and SPIDEr-FL corpus means skip items whose SPICE backend failed.
MetricReport evaluate(const EvalCorpus& corpus, const MetricsConfig& config, const SpiceBackend& spice,
                      const TextEmbedder& embedder, const FluencyDetector& detector);

}  // namespace capforge
