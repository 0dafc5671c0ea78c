#include <doctest.h>

#include <cmath>

#include "rerank.hpp"
#include "text.hpp"
#include "world.hpp"

using namespace capforge;

TEST_CASE("tokenize") {
  CHECK(tokenize("A Dog barks.") == std::vector<std::string>{"a", "dog", "barks"});
  CHECK(tokenize("").empty());
  CHECK(tokenize("rain, rain") == std::vector<std::string>{"rain", "rain"});
}

TEST_CASE("vocabulary") {
  const EventVocab v = make_vocab(12, 16, 1);
  CHECK(v.size() == 12);
  const Mat gram = v.base_vectors * v.base_vectors.transpose();
  CHECK((gram - Mat::Identity(12, 12)).cwiseAbs().maxCoeff() < 1e-12);
  std::set<std::string> seen;
  for (const auto& kws : v.keywords)
    for (const auto& k : kws) CHECK(seen.insert(k).second);
  const auto words = caption_words(v);
  CHECK(words.size() >= 40);
  CHECK(words.size() <= 80);
  CHECK_THROWS_AS(make_vocab(12, 8, 1), Error);
}

TEST_CASE("scene sampling") {
  const EventVocab one = make_vocab(1, 4, 2);
  Rng rng(1);
  for (int i = 0; i < 20; ++i) CHECK(sample_scene(one, SceneParams{}, rng).event_set() == std::set<int>{0});

  const EventVocab v = make_vocab(12, 16, 1);
  Rng a(9), b(9);
  const Scene s1 = sample_scene(v, SceneParams{}, a), s2 = sample_scene(v, SceneParams{}, b);
  CHECK(s1.duration_s == s2.duration_s);
  CHECK(s1.event_set() == s2.event_set());

  Rng r(4);
  std::vector<int> counts(12, 0);
  int total = 0;
  for (int i = 0; i < 10000; ++i) {
    const Scene s = sample_scene(v, SceneParams{}, r);
    CHECK(s.events.size() >= 1);
    CHECK(s.events.size() <= 4);
    CHECK(s.duration_s > 0.0);
    for (const auto& e : s.events) {
      CHECK(0 <= e.start);
      CHECK(e.start < e.end);
      CHECK(e.end <= s.num_frames);
      ++counts[static_cast<std::size_t>(e.event)];
      ++total;
    }
    CHECK(s.event_set().size() == s.events.size());
  }
  const double p = 1.0 / 12.0;
  const double mean = total * p, sd = std::sqrt(total * p * (1 - p));
  for (int c : counts) CHECK(std::abs(c - mean) < 5 * sd);
}

TEST_CASE("rendering frames") {
  const EventVocab v = make_vocab(3, 5, 3);
  Scene s;
  s.num_frames = 4;
  s.duration_s = 4;
  s.events = {{1, 0, 4}};
  Rng rng(0);
  const FeatureSeq f = render_frames(s, v, 0.0, 1.0, rng);
  for (int t = 0; t < 4; ++t) CHECK((f.frames.row(t) - v.base_vectors.row(1)).norm() == 0.0);

  s.events = {{0, 0, 2}};
  const FeatureSeq g = render_frames(s, v, 0.0, 1.0, rng);
  CHECK(g.frames.row(3).isZero());

  s.events = {{0, 0, 4}, {2, 0, 4}};
  const FeatureSeq h = render_frames(s, v, 0.05, 1.0, rng);
  for (int t = 0; t < 4; ++t) {
    CHECK(h.frames.row(t).dot(v.base_vectors.row(0)) == doctest::Approx(1.0).epsilon(0.3));
    CHECK(h.frames.row(t).dot(v.base_vectors.row(2)) == doctest::Approx(1.0).epsilon(0.3));
  }
}

TEST_CASE("captions round trip to the event set") {
  const EventVocab v = make_vocab(12, 16, 1);
  Rng rng(12);
  for (int i = 0; i < 500; ++i) {
    const Scene s = sample_scene(v, SceneParams{}, rng);
    const auto caps = render_captions(s, v, 5, rng);
    CHECK(caps.size() == 5);
    for (const auto& c : caps) {
      CHECK(extract_events(c, v) == s.event_set());
      CHECK(oracle_text_embedding(c, v).vector == oracle_audio_embedding(s, v).vector);
    }
  }
  Scene dog;
  dog.num_frames = 2;
  dog.duration_s = 2;
  dog.events = {{v.find("dog_barks"), 0, 2}};
  for (const auto& c : render_captions(dog, v, 3, rng)) CHECK(c.find("dog") != std::string::npos);
}

TEST_CASE("oracle embeddings") {
  const EventVocab v = make_vocab(12, 16, 1);
  const auto e1 = oracle_audio_embedding(std::set<int>{0}, v);
  CHECK(e1.dim() == 13);
  CHECK(e1.vector[0] == 1.0);
  const auto e12 = oracle_audio_embedding(std::set<int>{0, 1}, v);
  CHECK(e12.vector[0] == doctest::Approx(1 / std::sqrt(2.0)));
  CHECK(e12.vector[1] == doctest::Approx(1 / std::sqrt(2.0)));
  CHECK(embedding_cosine(e12, e1) == doctest::Approx(0.70710678118654752).epsilon(1e-12));
  CHECK_THROWS_AS(oracle_audio_embedding(std::set<int>{}, v), Error);

  const auto none = oracle_text_embedding("something hums", v);
  CHECK(none.is_null());
  CHECK(embedding_cosine(e12, none) == 0.0);
  const auto two = oracle_text_embedding("a dog barks while rain falls", v);
  CHECK(two.vector == oracle_audio_embedding(std::set<int>{v.find("dog_barks"), v.find("rain_falls")}, v).vector);
}

TEST_CASE("retrieval soundness") {
  const EventVocab v = make_vocab(12, 16, 1);
  Rng rng(31);
  for (int i = 0; i < 300; ++i) {
    const Scene s = sample_scene(v, SceneParams{}, rng);
    const auto audio = oracle_audio_embedding(s, v);
    const std::string good = render_captions(s, v, 1, rng)[0];
    std::set<int> wrong = s.event_set();
    int extra = 0;
    while (wrong.count(extra)) ++extra;
    wrong.erase(wrong.begin());
    wrong.insert(extra);
    const auto bad = oracle_audio_embedding(wrong, v);
    CHECK(embedding_cosine(audio, oracle_text_embedding(good, v)) > embedding_cosine(audio, bad));
  }
}

TEST_CASE("pooled frame embedding tracks the active events") {
  const EventVocab v = make_vocab(12, 16, 1);
  Scene s;
  s.num_frames = 6;
  s.duration_s = 6;
  s.events = {{3, 0, 6}};
  Rng rng(2);
  const auto pooled = pooled_frame_embedding(render_frames(s, v, 0.0, 1.0, rng), v);
  CHECK(pooled.vector[3] == doctest::Approx(1.0));
  double norm = 0.0;
  for (double x : pooled.vector) norm += x * x;
  CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-6));
}
