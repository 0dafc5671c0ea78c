#pragma once

#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "common.hpp"
#include "model.hpp"

namespace capforge {

/// A position in an autoregressive decode: exposes the next-token
/// distribution and can be advanced or cloned for branching.
class DecoderCursor {
 public:
  virtual ~DecoderCursor() = default;
  virtual std::unique_ptr<DecoderCursor> clone() const = 0;
  virtual void advance(int token) = 0;
  /// Untempered, untruncated log-probabilities over the vocabulary.
  virtual RowVec log_probs() const = 0;
};

/// Cursor over the caption model; starts right after BOS.
class ModelCursor final : public DecoderCursor {
 public:
  ModelCursor(const CaptionModel& model, const Mat& encoder_inputs) : state_(model.begin_decode(encoder_inputs)) {}
  std::unique_ptr<DecoderCursor> clone() const override { return std::make_unique<ModelCursor>(*this); }
  void advance(int token) override { state_.advance(token); }
  RowVec log_probs() const override { return state_.log_probs(); }

 private:
  DecodeState state_;
};

enum class CandidateSource { Beam, Nucleus };
const char* to_string(CandidateSource s);
CandidateSource candidate_source_from_string(const std::string& s);

struct Candidate {
  std::vector<int> tokens;             // no BOS; ends with EOS unless hit_max_len
  std::vector<double> token_logprobs;  // under the distribution each token was drawn from
  std::vector<double> raw_logprobs;    // model log-probabilities, temperature 1, no truncation
  double sum_logprob = 0.0;            // sum of token_logprobs
  CandidateSource source = CandidateSource::Beam;
  bool hit_max_len = false;
};

struct BeamOptions {
  int beam_width = 4;
  int max_len = 32;
  double length_penalty = 0.0;  // score = sum_logprob / len^alpha
};

/// Beam search. Hypotheses that emit EOS retire; the result is deduplicated
/// and sorted by length-normalised score, at most beam_width long.
std::vector<Candidate> beam_search(const DecoderCursor& start, int eos, const BeamOptions& options);

struct NucleusOptions {
  double top_p = 0.95;
  double temperature = 0.5;
  int n_candidates = 30;
  int max_len = 32;
};

/// Smallest descending-probability prefix whose mass reaches p, plus any
/// tokens tied with the boundary token, renormalised. Returns (token, prob)
/// pairs in descending probability order.
std::vector<std::pair<int, double>> truncate_nucleus(std::span<const double> probs, double p);

/// Applies the temperature to log-probabilities, then truncate_nucleus.
std::vector<std::pair<int, double>> nucleus_distribution(const RowVec& log_probs, double p, double temperature);

/// Draws one token from a (token, prob) list by inverse CDF.
int sample_from(const std::vector<std::pair<int, double>>& dist, Rng& rng);

/// n_candidates independent rollouts; rollout r uses the stream derive_seed(seed, r).
/// Duplicates are kept.
std::vector<Candidate> nucleus_sample(const DecoderCursor& start, int eos, const NucleusOptions& options,
                                      std::uint64_t seed);

/// Mean raw log-probability of `tokens` under teacher forcing from `start`.
double teacher_forced_mean_logprob(const DecoderCursor& start, std::span<const int> tokens);

}  // namespace capforge
