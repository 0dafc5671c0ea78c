#include "rerank.hpp"

#include <algorithm>
#include <numeric>

#include "text.hpp"

namespace capforge {

namespace {

constexpr std::pair<FluencyFlag, const char*> kFlagNames[] = {
    {kRepeatedNgram, "repeated_ngram"},
    {kIncompleteEnding, "incomplete_ending"},
    {kTooShort, "too_short"},
    {kNoContentWord, "no_content_word"},
};

}  // namespace

std::vector<std::string> flag_names(FluencyFlags flags) {
  std::vector<std::string> out;
  for (const auto& [f, n] : kFlagNames)
    if (flags & f) out.emplace_back(n);
  return out;
}

FluencyFlags flags_from_names(const std::vector<std::string>& names) {
  FluencyFlags flags = 0;
  for (const auto& name : names) {
    bool known = false;
    for (const auto& [f, n] : kFlagNames)
      if (name == n) {
        flags |= f;
        known = true;
      }
    if (!known) fail(ErrorKind::Data, "unknown fluency flag '" + name + "'");
  }
  return flags;
}

FluencyFlags FluencyDetector::detect(const std::string& caption) const { return detect(tokenize(caption)); }

RuleFluencyDetector::RuleFluencyDetector(std::vector<std::string> content_words)
    : content_words_(std::move(content_words)) {}

FluencyFlags RuleFluencyDetector::detect(const std::vector<std::string>& tokens) const {
  FluencyFlags flags = 0;
  const std::size_t len = tokens.size();
  for (std::size_t n = 1; n <= 4 && !(flags & kRepeatedNgram); ++n) {
    for (std::size_t i = 0; i + 3 * n <= len; ++i) {
      std::size_t reps = 1;
      while (i + (reps + 1) * n <= len &&
             std::equal(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                        tokens.begin() + static_cast<std::ptrdiff_t>(i + n),
                        tokens.begin() + static_cast<std::ptrdiff_t>(i + reps * n)))
        ++reps;
      if (reps >= 3) {
        flags |= kRepeatedNgram;
        break;
      }
    }
  }
  if (len > 0) {
    const std::string& last = tokens.back();
    if (is_article(last) || is_conjunction(last) || is_preposition(last)) flags |= kIncompleteEnding;
  }
  if (len < 3) flags |= kTooShort;
  const bool has_content = std::any_of(tokens.begin(), tokens.end(), [&](const std::string& t) {
    return std::find(content_words_.begin(), content_words_.end(), t) != content_words_.end();
  });
  if (!has_content) flags |= kNoContentWord;
  return flags;
}

std::vector<std::string> content_words(const EventVocab& vocab) {
  std::vector<std::string> out;
  for (const auto& kw : vocab.keywords) out.insert(out.end(), kw.begin(), kw.end());
  return out;
}

double embedding_cosine(const SeqEmbedding& a, const SeqEmbedding& b) {
  if (a.dim() != b.dim())
    fail(ErrorKind::Input, "embedding dimensions differ: " + std::to_string(a.dim()) + " vs " + std::to_string(b.dim()));
  if (a.is_null() || b.is_null()) return 0.0;
  double dot = 0.0;
  for (std::size_t i = 0; i < a.dim(); ++i) dot += a.vector[i] * b.vector[i];
  return dot;
}

double encoder_score(const SeqEmbedding& audio, const SeqEmbedding& text) { return embedding_cosine(audio, text); }

double decoder_score(const DecoderCursor& start, std::span<const int> tokens) {
  return teacher_forced_mean_logprob(start, tokens);
}

const char* to_string(RerankMode m) {
  switch (m) {
    case RerankMode::Encoder: return "encoder";
    case RerankMode::Decoder: return "decoder";
    case RerankMode::Hybrid: return "hybrid";
    case RerankMode::BeamPassthrough: return "beam_passthrough";
  }
  return "hybrid";
}

RerankMode rerank_mode_from_string(const std::string& s) {
  if (s == "encoder") return RerankMode::Encoder;
  if (s == "decoder") return RerankMode::Decoder;
  if (s == "hybrid") return RerankMode::Hybrid;
  if (s == "beam_passthrough" || s == "beam") return RerankMode::BeamPassthrough;
  fail(ErrorKind::Config, "unknown rerank mode '" + s + "'");
}

namespace {

void min_max(std::vector<ScoredCandidate>& cs, double ScoredCandidate::*raw, double ScoredCandidate::*norm) {
  double lo = cs.front().*raw, hi = cs.front().*raw;
  for (const auto& c : cs) {
    lo = std::min(lo, c.*raw);
    hi = std::max(hi, c.*raw);
  }
  for (auto& c : cs) c.*norm = (hi > lo) ? (c.*raw - lo) / (hi - lo) : 0.5;
}

}  // namespace

std::vector<ScoredCandidate> rank(std::vector<ScoredCandidate> candidates, RerankMode mode,
                                  const RerankWeights& weights) {
  if (candidates.empty()) fail(ErrorKind::Input, "cannot rank an empty candidate list");

  std::vector<ScoredCandidate> unique;
  for (auto& c : candidates) {
    const bool dup = std::any_of(unique.begin(), unique.end(), [&](const auto& u) { return u.tokens == c.tokens; });
    if (!dup) unique.push_back(std::move(c));
  }

  std::vector<ScoredCandidate> kept;
  if (mode == RerankMode::BeamPassthrough) {
    kept = std::move(unique);
  } else {
    for (const auto& c : unique)
      if (c.flags == 0) kept.push_back(c);
    if (kept.empty()) {
      auto best = std::min_element(unique.begin(), unique.end(), [](const auto& a, const auto& b) {
        if (a.decoder_score != b.decoder_score) return a.decoder_score > b.decoder_score;
        return a.tokens < b.tokens;
      });
      kept.push_back(*best);
    }
  }

  min_max(kept, &ScoredCandidate::encoder_score, &ScoredCandidate::encoder_norm);
  min_max(kept, &ScoredCandidate::decoder_score, &ScoredCandidate::decoder_norm);
  for (auto& c : kept) c.hybrid = weights.encoder * c.encoder_norm + weights.decoder * c.decoder_norm;

  if (mode == RerankMode::BeamPassthrough) return kept;

  auto key = [mode](const ScoredCandidate& c) {
    switch (mode) {
      case RerankMode::Encoder: return c.encoder_norm;
      case RerankMode::Decoder: return c.decoder_norm;
      default: return c.hybrid;
    }
  };
  std::stable_sort(kept.begin(), kept.end(), [&](const ScoredCandidate& a, const ScoredCandidate& b) {
    const double ka = key(a), kb = key(b);
    if (ka != kb) return ka > kb;
    if (a.decoder_score != b.decoder_score) return a.decoder_score > b.decoder_score;
    return a.tokens < b.tokens;
  });
  return kept;
}

std::vector<ScoredCandidate> score_candidates(const std::vector<Candidate>& candidates,
                                              const CaptionTokenizer& tokenizer, const SeqEmbedding& audio,
                                              const EventVocab& vocab, const FluencyDetector& detector) {
  std::vector<ScoredCandidate> out;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const Candidate& c = candidates[i];
    if (c.raw_logprobs.empty()) fail(ErrorKind::Input, "candidate without log-probabilities");
    ScoredCandidate s;
    const std::string text = tokenizer.decode(c.tokens);
    s.tokens = tokenize(text);
    s.encoder_score = encoder_score(audio, oracle_text_embedding(text, vocab));
    s.decoder_score = std::accumulate(c.raw_logprobs.begin(), c.raw_logprobs.end(), 0.0) /
                      static_cast<double>(c.raw_logprobs.size());
    s.flags = detector.detect(s.tokens);
    s.source_index = i;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace capforge
