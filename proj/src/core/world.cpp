#include "world.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "text.hpp"

namespace capforge {

namespace {

const std::vector<EventDef>& builtin_events() {
  static const std::vector<EventDef> events = {
      {"dog_barks", {"a", "the"}, "dog", "barks"},
      {"rain_falls", {"", "the"}, "rain", "falls"},
      {"car_passes", {"a", "the"}, "car", "passes"},
      {"bird_chirps", {"a", "the"}, "bird", "chirps"},
      {"man_speaks", {"a", "the"}, "man", "speaks"},
      {"woman_sings", {"a", "the"}, "woman", "sings"},
      {"baby_cries", {"a", "the"}, "baby", "cries"},
      {"door_slams", {"a", "the"}, "door", "slams"},
      {"wind_blows", {"", "the"}, "wind", "blows"},
      {"engine_idles", {"an", "the"}, "engine", "idles"},
      {"bell_rings", {"a", "the"}, "bell", "rings"},
      {"water_flows", {"", "the"}, "water", "flows"},
  };
  return events;
}

const std::vector<std::string> kAdjectives = {"small", "large", "old", "distant", "noisy"};
const std::vector<std::string> kModifiers = {
    "loudly",  "softly",  "repeatedly", "nearby",     "outside",        "in the distance",
    "in the background", "again", "steadily", "briefly", "quietly", "constantly",
    "intermittently", "rapidly"};
const std::vector<std::string> kConnectives = {"while", "and", "as", "and then", "meanwhile"};

constexpr double kAdjectiveProb = 0.2;
constexpr double kModifierProb = 0.4;

template <typename T>
const T& pick(const std::vector<T>& v, Rng& rng) {
  return v[uniform_index(rng, v.size())];
}

std::string event_phrase(const EventDef& e, Rng& rng) {
  std::string s;
  const std::string& article = pick(e.articles, rng);
  if (!article.empty()) s += article + " ";
  if (uniform01(rng) < kAdjectiveProb) {
    const std::string& adj = pick(kAdjectives, rng);
    // "an" only fits the vowel-initial noun.
    if (article == "an") s = "a ";
    s += adj + " ";
  }
  s += e.noun + " " + e.verb;
  if (uniform01(rng) < kModifierProb) s += " " + pick(kModifiers, rng);
  return s;
}

SeqEmbedding normalized(std::vector<double> v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  for (double& x : v) x /= n;
  return SeqEmbedding{std::move(v)};
}

}  // namespace

int EventVocab::find(const std::string& name) const {
  for (std::size_t i = 0; i < events.size(); ++i)
    if (events[i].name == name) return static_cast<int>(i);
  return -1;
}

EventVocab make_vocab(int n_events, int dim, std::uint64_t seed) {
  const auto& all = builtin_events();
  if (n_events < 1 || n_events > static_cast<int>(all.size()))
    fail(ErrorKind::Config, "n_events must be in [1, " + std::to_string(all.size()) + "]");
  if (dim < n_events) fail(ErrorKind::Config, "world dim must be >= n_events for orthonormal signatures");

  EventVocab vocab;
  vocab.events.assign(all.begin(), all.begin() + n_events);
  for (const auto& e : vocab.events) vocab.keywords.push_back({e.noun, e.verb});

  Rng rng(derive_seed(seed, 0x766f636162ULL));
  Mat g(dim, n_events);
  for (Eigen::Index r = 0; r < g.rows(); ++r)
    for (Eigen::Index c = 0; c < g.cols(); ++c) g(r, c) = standard_normal(rng);
  // Modified Gram-Schmidt over the columns.
  for (int c = 0; c < n_events; ++c) {
    for (int p = 0; p < c; ++p) g.col(c) -= g.col(p).dot(g.col(c)) * g.col(p);
    g.col(c) /= g.col(c).norm();
  }
  vocab.base_vectors = g.transpose();
  return vocab;
}

std::vector<std::string> caption_words(const EventVocab& vocab) {
  std::vector<std::string> words;
  auto add = [&](const std::string& phrase) {
    for (auto& t : tokenize(phrase))
      if (std::find(words.begin(), words.end(), t) == words.end()) words.push_back(t);
  };
  for (const auto& e : vocab.events) {
    for (const auto& a : e.articles) add(a);
    add(e.noun);
    add(e.verb);
  }
  add("a");
  for (const auto& a : kAdjectives) add(a);
  for (const auto& m : kModifiers) add(m);
  for (const auto& c : kConnectives) add(c);
  return words;
}

std::set<int> Scene::event_set() const {
  std::set<int> s;
  for (const auto& e : events) s.insert(e.event);
  return s;
}

Scene sample_scene(const EventVocab& vocab, const SceneParams& params, Rng& rng) {
  if (vocab.size() == 0) fail(ErrorKind::Input, "sample_scene needs a non-empty vocabulary");
  Scene scene;
  scene.duration_s = params.min_duration_s + uniform01(rng) * (params.max_duration_s - params.min_duration_s);
  scene.num_frames = std::max(1, static_cast<int>(std::ceil(scene.duration_s * params.frame_rate_hz)));

  const int max_events = std::min<int>(std::max(1, params.max_events), static_cast<int>(vocab.size()));
  const int n = 1 + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(max_events)));
  std::vector<int> pool(vocab.size());
  std::iota(pool.begin(), pool.end(), 0);
  // Partial Fisher-Yates: draw without replacement.
  for (int i = 0; i < n; ++i) {
    const std::size_t j = static_cast<std::size_t>(i) + uniform_index(rng, pool.size() - static_cast<std::size_t>(i));
    std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
  }
  const int T = scene.num_frames;
  for (int i = 0; i < n; ++i) {
    const int min_len = std::max(1, T / 4);
    const int len = min_len + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(T - min_len + 1)));
    const int start = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(T - len + 1)));
    scene.events.push_back({pool[static_cast<std::size_t>(i)], start, start + len});
  }
  return scene;
}

FeatureSeq render_frames(const Scene& scene, const EventVocab& vocab, double noise_sigma,
                         double frame_rate_hz, Rng& rng) {
  FeatureSeq seq;
  seq.frame_rate_hz = frame_rate_hz;
  seq.frames = Mat::Zero(scene.num_frames, static_cast<Eigen::Index>(vocab.dim()));
  for (const auto& e : scene.events) {
    for (int t = e.start; t < e.end; ++t) seq.frames.row(t) += vocab.base_vectors.row(e.event);
  }
  if (noise_sigma > 0.0) {
    for (Eigen::Index t = 0; t < seq.frames.rows(); ++t)
      for (Eigen::Index k = 0; k < seq.frames.cols(); ++k) seq.frames(t, k) += noise_sigma * standard_normal(rng);
  }
  return seq;
}

std::vector<std::string> render_captions(const Scene& scene, const EventVocab& vocab, int n_refs, Rng& rng) {
  if (n_refs < 1) fail(ErrorKind::Config, "n_refs must be >= 1");
  std::vector<int> ids;
  for (const auto& e : scene.events) ids.push_back(e.event);
  std::vector<std::string> captions;
  for (int r = 0; r < n_refs; ++r) {
    std::vector<int> order = ids;
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
    std::string caption;
    for (std::size_t i = 0; i < order.size(); ++i) {
      if (i > 0) caption += " " + pick(kConnectives, rng) + " ";
      caption += event_phrase(vocab.events[static_cast<std::size_t>(order[i])], rng);
    }
    captions.push_back(std::move(caption));
  }
  return captions;
}

std::set<int> extract_events(const std::string& caption, const EventVocab& vocab) {
  std::set<int> found;
  for (const auto& tok : tokenize(caption)) {
    for (std::size_t e = 0; e < vocab.keywords.size(); ++e) {
      const auto& kw = vocab.keywords[e];
      if (std::find(kw.begin(), kw.end(), tok) != kw.end()) found.insert(static_cast<int>(e));
    }
  }
  return found;
}

bool SeqEmbedding::is_null() const { return !vector.empty() && vector.back() != 0.0; }

SeqEmbedding null_embedding(std::size_t n_events) {
  std::vector<double> v(n_events + 1, 0.0);
  v.back() = 1.0;
  return SeqEmbedding{std::move(v)};
}

SeqEmbedding oracle_audio_embedding(const std::set<int>& events, const EventVocab& vocab) {
  if (events.empty()) fail(ErrorKind::Input, "oracle audio embedding of an empty event set");
  std::vector<double> v(vocab.size() + 1, 0.0);
  for (int e : events) {
    if (e < 0 || e >= static_cast<int>(vocab.size())) fail(ErrorKind::Input, "event id out of range");
    v[static_cast<std::size_t>(e)] = 1.0;
  }
  return normalized(std::move(v));
}

SeqEmbedding oracle_audio_embedding(const Scene& scene, const EventVocab& vocab) {
  return oracle_audio_embedding(scene.event_set(), vocab);
}

SeqEmbedding oracle_text_embedding(const std::string& caption, const EventVocab& vocab) {
  const auto events = extract_events(caption, vocab);
  if (events.empty()) return null_embedding(vocab.size());
  return oracle_audio_embedding(events, vocab);
}

SeqEmbedding pooled_frame_embedding(const FeatureSeq& seq, const EventVocab& vocab) {
  if (seq.length() == 0) return null_embedding(vocab.size());
  if (seq.dim() != vocab.dim()) fail(ErrorKind::Input, "frame dimension does not match vocabulary");
  const RowVec mean = seq.frames.colwise().mean();
  std::vector<double> v(vocab.size() + 1, 0.0);
  double norm2 = 0.0;
  for (std::size_t e = 0; e < vocab.size(); ++e) {
    v[e] = std::max(0.0, mean.dot(vocab.base_vectors.row(static_cast<Eigen::Index>(e))));
    norm2 += v[e] * v[e];
  }
  if (norm2 == 0.0) return null_embedding(vocab.size());
  return normalized(std::move(v));
}

}  // namespace capforge
