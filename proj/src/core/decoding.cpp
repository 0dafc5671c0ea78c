#include "decoding.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace capforge {

const char* to_string(CandidateSource s) { return s == CandidateSource::Beam ? "beam" : "nucleus"; }

CandidateSource candidate_source_from_string(const std::string& s) {
  if (s == "beam") return CandidateSource::Beam;
  if (s == "nucleus") return CandidateSource::Nucleus;
  fail(ErrorKind::Data, "unknown candidate source '" + s + "'");
}

namespace {

struct Hyp {
  std::unique_ptr<DecoderCursor> cursor;
  std::vector<int> tokens;
  std::vector<double> logprobs;
  double sum = 0.0;
};

double normalized_score(double sum, std::size_t len, double alpha) {
  if (alpha == 0.0 || len == 0) return sum;
  return sum / std::pow(static_cast<double>(len), alpha);
}

Candidate to_candidate(std::vector<int> tokens, std::vector<double> lps, bool hit_max) {
  Candidate c;
  c.tokens = std::move(tokens);
  c.token_logprobs = lps;
  c.raw_logprobs = std::move(lps);
  c.sum_logprob = std::accumulate(c.token_logprobs.begin(), c.token_logprobs.end(), 0.0);
  c.source = CandidateSource::Beam;
  c.hit_max_len = hit_max;
  return c;
}

}  // namespace

std::vector<Candidate> beam_search(const DecoderCursor& start, int eos, const BeamOptions& options) {
  if (options.beam_width < 1) fail(ErrorKind::Config, "beam_width must be >= 1");
  if (options.max_len < 1) fail(ErrorKind::Config, "max_len must be >= 1");
  const auto width = static_cast<std::size_t>(options.beam_width);
  const double alpha = options.length_penalty;

  std::vector<Hyp> live;
  live.push_back(Hyp{start.clone(), {}, {}, 0.0});
  std::vector<Candidate> finished;

  struct Expansion {
    double score;
    std::size_t hyp;
    int token;
    double lp;
  };

  for (int step = 0; step < options.max_len && !live.empty(); ++step) {
    std::vector<Expansion> ex;
    for (std::size_t h = 0; h < live.size(); ++h) {
      const RowVec lp = live[h].cursor->log_probs();
      for (Eigen::Index v = 0; v < lp.size(); ++v) {
        if (lp[v] == -std::numeric_limits<double>::infinity()) continue;  // impossible token
        const double s = live[h].sum + lp[v];
        ex.push_back({normalized_score(s, live[h].tokens.size() + 1, alpha), h, static_cast<int>(v), lp[v]});
      }
    }
    const std::size_t keep = std::min(width, ex.size());
    std::partial_sort(ex.begin(), ex.begin() + static_cast<std::ptrdiff_t>(keep), ex.end(),
                      [](const Expansion& a, const Expansion& b) {
                        if (a.score != b.score) return a.score > b.score;
                        if (a.hyp != b.hyp) return a.hyp < b.hyp;
                        return a.token < b.token;
                      });
    std::vector<Hyp> next;
    for (std::size_t i = 0; i < keep; ++i) {
      const Expansion& e = ex[i];
      const Hyp& parent = live[e.hyp];
      std::vector<int> tokens = parent.tokens;
      std::vector<double> lps = parent.logprobs;
      tokens.push_back(e.token);
      lps.push_back(e.lp);
      if (e.token == eos) {
        finished.push_back(to_candidate(std::move(tokens), std::move(lps), false));
      } else if (static_cast<int>(tokens.size()) >= options.max_len) {
        finished.push_back(to_candidate(std::move(tokens), std::move(lps), true));
      } else {
        Hyp child{parent.cursor->clone(), std::move(tokens), std::move(lps), parent.sum + e.lp};
        child.cursor->advance(e.token);
        next.push_back(std::move(child));
      }
    }
    live = std::move(next);

    // Without a length penalty scores only fall, so a full set of finished
    // hypotheses that beats every live prefix is final.
    if (alpha == 0.0 && finished.size() >= width && !live.empty()) {
      std::vector<double> fs;
      for (const auto& f : finished) fs.push_back(f.sum_logprob);
      std::nth_element(fs.begin(), fs.begin() + static_cast<std::ptrdiff_t>(width - 1), fs.end(), std::greater<>());
      double best_live = -std::numeric_limits<double>::infinity();
      for (const auto& h : live) best_live = std::max(best_live, h.sum);
      if (fs[width - 1] >= best_live) break;
    }
  }

  std::stable_sort(finished.begin(), finished.end(), [&](const Candidate& a, const Candidate& b) {
    const double sa = normalized_score(a.sum_logprob, a.tokens.size(), alpha);
    const double sb = normalized_score(b.sum_logprob, b.tokens.size(), alpha);
    if (sa != sb) return sa > sb;
    return a.tokens < b.tokens;
  });
  std::vector<Candidate> out;
  for (auto& c : finished) {
    if (out.size() == width) break;
    const bool dup = std::any_of(out.begin(), out.end(), [&](const Candidate& o) { return o.tokens == c.tokens; });
    if (!dup) out.push_back(std::move(c));
  }
  return out;
}

std::vector<std::pair<int, double>> truncate_nucleus(std::span<const double> probs, double p) {
  if (!(p > 0.0 && p <= 1.0)) fail(ErrorKind::Config, "top_p must be in (0, 1]");
  if (probs.empty()) fail(ErrorKind::Input, "empty distribution");
  std::vector<int> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return probs[a] > probs[b]; });

  std::size_t k = 0;
  double mass = 0.0;
  while (k < order.size()) {
    mass += probs[order[k]];
    ++k;
    if (mass >= p) break;
  }
  const double boundary = probs[order[k - 1]];
  while (k < order.size() && probs[order[k]] == boundary) {
    mass += probs[order[k]];
    ++k;
  }
  std::vector<std::pair<int, double>> kept;
  kept.reserve(k);
  double total = 0.0;
  for (std::size_t i = 0; i < k; ++i) total += probs[order[i]];
  for (std::size_t i = 0; i < k; ++i) kept.emplace_back(order[i], probs[order[i]] / total);
  return kept;
}

std::vector<std::pair<int, double>> nucleus_distribution(const RowVec& log_probs, double p, double temperature) {
  if (!(temperature > 0.0)) fail(ErrorKind::Config, "temperature must be > 0");
  RowVec scaled = log_probs / temperature;
  const double m = scaled.maxCoeff();
  scaled = (scaled.array() - m).exp();
  scaled /= scaled.sum();
  return truncate_nucleus(std::span<const double>(scaled.data(), static_cast<std::size_t>(scaled.size())), p);
}

int sample_from(const std::vector<std::pair<int, double>>& dist, Rng& rng) {
  double u = uniform01(rng);
  for (const auto& [tok, pr] : dist) {
    u -= pr;
    if (u < 0.0) return tok;
  }
  return dist.back().first;
}

std::vector<Candidate> nucleus_sample(const DecoderCursor& start, int eos, const NucleusOptions& options,
                                      std::uint64_t seed) {
  if (options.n_candidates < 1) fail(ErrorKind::Config, "n_candidates must be >= 1");
  if (options.max_len < 1) fail(ErrorKind::Config, "max_len must be >= 1");
  std::vector<Candidate> out;
  out.reserve(static_cast<std::size_t>(options.n_candidates));
  for (int r = 0; r < options.n_candidates; ++r) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(r)));
    auto cursor = start.clone();
    Candidate c;
    c.source = CandidateSource::Nucleus;
    while (true) {
      const RowVec lp = cursor->log_probs();
      const auto dist = nucleus_distribution(lp, options.top_p, options.temperature);
      const int tok = sample_from(dist, rng);
      double q = 0.0;
      for (const auto& [t, pr] : dist)
        if (t == tok) q = pr;
      c.tokens.push_back(tok);
      c.token_logprobs.push_back(std::log(q));
      c.raw_logprobs.push_back(lp[tok]);
      if (tok == eos) break;
      if (static_cast<int>(c.tokens.size()) >= options.max_len) {
        c.hit_max_len = true;
        break;
      }
      cursor->advance(tok);
    }
    c.sum_logprob = std::accumulate(c.token_logprobs.begin(), c.token_logprobs.end(), 0.0);
    out.push_back(std::move(c));
  }
  return out;
}

double teacher_forced_mean_logprob(const DecoderCursor& start, std::span<const int> tokens) {
  if (tokens.empty()) fail(ErrorKind::Input, "decoder score of an empty caption");
  auto cursor = start.clone();
  double sum = 0.0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const RowVec lp = cursor->log_probs();
    if (tokens[i] < 0 || tokens[i] >= lp.size()) fail(ErrorKind::Input, "token id out of range");
    sum += lp[tokens[i]];
    if (i + 1 < tokens.size()) cursor->advance(tokens[i]);
  }
  return sum / static_cast<double>(tokens.size());
}

}  // namespace capforge
