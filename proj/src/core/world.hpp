#pragma once

#include <set>
#include <string>
#include <vector>

#include "codec.hpp"
#include "common.hpp"

namespace capforge {

struct EventDef {
  std::string name;                   // e.g. "dog_barks"
  std::vector<std::string> articles;  // "" means no article
  std::string noun;
  std::string verb;
};

/// The closed world of sound events. Signatures are orthonormal rows.
struct EventVocab {
  std::vector<EventDef> events;
  Mat base_vectors;  // E x d
  std::vector<std::vector<std::string>> keywords;  // per event, disjoint across events

  std::size_t size() const { return events.size(); }
  std::size_t dim() const { return static_cast<std::size_t>(base_vectors.cols()); }
  int find(const std::string& name) const;  // -1 if unknown
};

/// Builds the first `n_events` of the built-in twelve events with signatures
/// drawn from `seed`. Requires 1 <= n_events <= 12 and dim >= n_events.
EventVocab make_vocab(int n_events, int dim, std::uint64_t seed);

/// Every word the caption grammar can emit, in a fixed order.
std::vector<std::string> caption_words(const EventVocab& vocab);

struct SceneEvent {
  int event = 0;
  int start = 0;  // first active frame
  int end = 0;    // one past the last active frame
};

struct Scene {
  std::vector<SceneEvent> events;
  double duration_s = 0.0;
  int num_frames = 0;

  std::set<int> event_set() const;
};

struct SceneParams {
  double min_duration_s = 0.5;
  double max_duration_s = 40.0;
  double frame_rate_hz = 1.0;
  int max_events = 4;
};

Scene sample_scene(const EventVocab& vocab, const SceneParams& params, Rng& rng);

/// Frame t is the sum of the active events' signatures plus N(0, sigma^2) noise.
FeatureSeq render_frames(const Scene& scene, const EventVocab& vocab, double noise_sigma,
                         double frame_rate_hz, Rng& rng);

/// Template captions naming every scene event exactly once.
std::vector<std::string> render_captions(const Scene& scene, const EventVocab& vocab, int n_refs, Rng& rng);

/// Set of events whose keywords occur in the caption.
std::set<int> extract_events(const std::string& caption, const EventVocab& vocab);

/// Unit vector of dimension |events| + 1. The extra axis is reserved for the
/// null embedding of captions that mention no event.
struct SeqEmbedding {
  std::vector<double> vector;

  std::size_t dim() const { return vector.size(); }
  bool is_null() const;
};

SeqEmbedding null_embedding(std::size_t n_events);
SeqEmbedding oracle_audio_embedding(const std::set<int>& events, const EventVocab& vocab);
SeqEmbedding oracle_audio_embedding(const Scene& scene, const EventVocab& vocab);
SeqEmbedding oracle_text_embedding(const std::string& caption, const EventVocab& vocab);

/// Clip-level embedding computed from frames alone: the mean frame projected on
/// each signature, clamped at zero and normalised. Conditions the caption model.
SeqEmbedding pooled_frame_embedding(const FeatureSeq& seq, const EventVocab& vocab);

}  // namespace capforge
