#pragma once

#include <string>
#include <vector>

#include "decoding.hpp"
#include "world.hpp"

namespace capforge {

enum FluencyFlag : unsigned {
  kRepeatedNgram = 1u << 0,
  kIncompleteEnding = 1u << 1,
  kTooShort = 1u << 2,
  kNoContentWord = 1u << 3,
};
using FluencyFlags = unsigned;

std::vector<std::string> flag_names(FluencyFlags flags);
FluencyFlags flags_from_names(const std::vector<std::string>& names);

/// Pluggable fluency-error detector over tokenised captions.
class FluencyDetector {
 public:
  virtual ~FluencyDetector() = default;
  virtual FluencyFlags detect(const std::vector<std::string>& tokens) const = 0;
  FluencyFlags detect(const std::string& caption) const;
};

/// Rule set:
///   repeated_ngram     some n-gram (n <= 4) occurs 3+ times back to back
///   incomplete_ending  last token is an article, conjunction or preposition
///   too_short          fewer than 3 tokens
///   no_content_word    no token from the content-word list
class RuleFluencyDetector final : public FluencyDetector {
 public:
  explicit RuleFluencyDetector(std::vector<std::string> content_words);
  using FluencyDetector::detect;
  FluencyFlags detect(const std::vector<std::string>& tokens) const override;

 private:
  std::vector<std::string> content_words_;
};

/// Event keywords of the vocabulary, used as the content-word list.
std::vector<std::string> content_words(const EventVocab& vocab);

/// Cosine of two unit embeddings; 0 whenever either side is the null embedding.
double embedding_cosine(const SeqEmbedding& a, const SeqEmbedding& b);
double encoder_score(const SeqEmbedding& audio, const SeqEmbedding& text);

/// Mean per-token log-probability under teacher forcing.
double decoder_score(const DecoderCursor& start, std::span<const int> tokens);

enum class RerankMode { Encoder, Decoder, Hybrid, BeamPassthrough };
const char* to_string(RerankMode m);
RerankMode rerank_mode_from_string(const std::string& s);

struct ScoredCandidate {
  std::vector<std::string> tokens;  // caption words, special tokens removed
  double encoder_score = 0.0;
  double decoder_score = 0.0;
  FluencyFlags flags = 0;
  std::size_t source_index = 0;  // position in the generator's output
  // Filled by rank().
  double encoder_norm = 0.0;
  double decoder_norm = 0.0;
  double hybrid = 0.0;
};

struct RerankWeights {
  double encoder = 0.6;
  double decoder = 0.4;
};

/// Dedup, fluency filter (with best-decoder fallback), per-list min-max
/// normalisation, then descending order by the mode's score. Ties break on
/// higher decoder score, then lexicographic tokens. BeamPassthrough skips the
/// filter and keeps the input order.
std::vector<ScoredCandidate> rank(std::vector<ScoredCandidate> candidates, RerankMode mode,
                                  const RerankWeights& weights);

/// Scores generated candidates against the clip's audio embedding.
/// The decoder score is the mean of the recorded raw log-probabilities.
std::vector<ScoredCandidate> score_candidates(const std::vector<Candidate>& candidates,
                                              const CaptionTokenizer& tokenizer, const SeqEmbedding& audio,
                                              const EventVocab& vocab, const FluencyDetector& detector);

}  // namespace capforge
