#include "pipeline.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>

#include "dataio.hpp"
#include "parallel.hpp"
#include "text.hpp"

namespace capforge {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- config

Json ExperimentConfig::defaults() {
  return Json::parse(R"({
    "seed": 1234,
    "world": {"n_events": 12, "dim": 16, "noise_sigma": 0.1, "frame_rate_hz": 1.0,
              "min_duration_s": 0.5, "max_duration_s": 40.0, "max_events": 4, "n_refs": 5},
    "codec": {"preset": "desk4", "n_q": 0, "codebook_size": 0},
    "dataset": {"pretrain_size": 1000, "finetune_size": 1000, "overlap_size": 50,
                "split_fractions": [0.8, 0.1, 0.1], "min_duration_s": 1.0, "max_duration_s": 30.0,
                "blocklist": ""},
    "model": {"hidden": 64, "heads": 2, "ffn": 128, "enc_layers": 2, "dec_layers": 2,
              "mcm_ratio": 0.15, "mcm_weight": 1.0},
    "train": {"lr": 0.001, "batch_size": 16, "pretrain_steps": 1000, "finetune_steps": 500,
              "clip_norm": 1.0, "max_loss": 1000.0},
    "decode": {"beam_width": 4, "max_len": 32, "length_penalty": 0.0, "top_p": 0.95,
               "temperature": 0.5, "n_candidates": 30},
    "rerank": {"mode": "hybrid", "w_enc": 0.6, "w_dec": 0.4},
    "metrics": {"cider_n": 4, "cider_sigma": 6.0, "penalty_factor": 0.1},
    "paths": {"out_dir": "runs/default"}
  })");
}

ExperimentConfig::ExperimentConfig() : data_(defaults()) {}

namespace {

bool same_kind(const Json& a, const Json& b) {
  if (a.is_number() && b.is_number()) return !(a.is_number_integer() && !b.is_number_integer());
  return a.type() == b.type();
}

}  // namespace

void ExperimentConfig::merge(const Json& patch, const std::string& prefix, Json& target) {
  if (!patch.is_object()) fail(ErrorKind::Config, "config section '" + prefix + "' must be an object");
  for (const auto& [key, value] : patch.items()) {
    const std::string full = prefix.empty() ? key : prefix + "." + key;
    if (!target.contains(key)) fail(ErrorKind::Config, "unknown config key '" + full + "'");
    Json& slot = target[key];
    if (slot.is_object()) {
      merge(value, full, slot);
      continue;
    }
    if (!same_kind(slot, value)) fail(ErrorKind::Config, "config key '" + full + "' has the wrong type");
    slot = slot.is_number_float() ? Json(value.get<double>()) : value;
  }
}

ExperimentConfig ExperimentConfig::from_json(const Json& j) {
  ExperimentConfig c;
  c.merge(j, "", c.data_);
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  Json j;
  try {
    j = Json::parse(read_text(path));
  } catch (const Json::exception& e) {
    fail(ErrorKind::Config, path.string() + ": " + e.what());
  }
  return from_json(j);
}

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  std::vector<std::string> parts;
  std::string rest = key;
  for (std::size_t dot; (dot = rest.find('.')) != std::string::npos; rest = rest.substr(dot + 1))
    parts.push_back(rest.substr(0, dot));
  parts.push_back(rest);
  const Json* slot = &data_;
  for (const auto& p : parts) {
    if (!slot->is_object() || !slot->contains(p)) fail(ErrorKind::Config, "unknown config key '" + key + "'");
    slot = &(*slot)[p];
  }
  // String settings take the text verbatim; everything else is JSON.
  Json patch;
  if (slot->is_string()) {
    patch = value;
  } else {
    try {
      patch = Json::parse(value);
    } catch (const Json::exception&) {
      fail(ErrorKind::Config, "config key '" + key + "': '" + value + "' is not a valid value");
    }
  }
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = Json{{*it, patch}};
  merge(patch, "", data_);
}

void ExperimentConfig::set_seed(std::uint64_t seed) {
  data_["seed"] = seed;
}

std::uint64_t ExperimentConfig::seed() const { return data_.at("seed").get<std::uint64_t>(); }

fs::path ExperimentConfig::out_dir() const { return data_.at("paths").at("out_dir").get<std::string>(); }

std::string ExperimentConfig::hash() const {
  Json j = data_;
  j.erase("paths");
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, fnv1a64(canonical_dump(j)));
  return buf;
}

namespace {

template <class T>
T get(const Json& j, const char* section, const char* key) {
  try {
    return j.at(section).at(key).get<T>();
  } catch (const Json::exception& e) {
    fail(ErrorKind::Config, std::string("config ") + section + "." + key + ": " + e.what());
  }
}

std::uint64_t tag(const char* name) { return fnv1a64(name); }

}  // namespace

EventVocab ExperimentConfig::vocab() const {
  return make_vocab(get<int>(data_, "world", "n_events"), get<int>(data_, "world", "dim"),
                    derive_seed(seed(), tag("world")));
}

SceneParams ExperimentConfig::scene_params() const {
  SceneParams p;
  p.min_duration_s = get<double>(data_, "world", "min_duration_s");
  p.max_duration_s = get<double>(data_, "world", "max_duration_s");
  p.frame_rate_hz = get<double>(data_, "world", "frame_rate_hz");
  p.max_events = get<int>(data_, "world", "max_events");
  return p;
}

CodecConfig ExperimentConfig::codec_config() const {
  CodecConfig c = codec_preset(get<std::string>(data_, "codec", "preset"), get<int>(data_, "world", "dim"));
  if (const int n_q = get<int>(data_, "codec", "n_q"); n_q > 0) c.n_q = n_q;
  if (const int k = get<int>(data_, "codec", "codebook_size"); k > 0) c.codebook_size = k;
  c.validate();
  return c;
}

ModelConfig ExperimentConfig::model_config(int vocab_size) const {
  ModelConfig m;
  const CodecConfig c = codec_config();
  m.n_q = c.n_q;
  m.codebook_size = c.codebook_size;
  m.seq_dim = get<int>(data_, "world", "n_events") + 1;
  m.vocab_size = vocab_size;
  m.hidden = get<int>(data_, "model", "hidden");
  m.heads = get<int>(data_, "model", "heads");
  m.ffn = get<int>(data_, "model", "ffn");
  m.enc_layers = get<int>(data_, "model", "enc_layers");
  m.dec_layers = get<int>(data_, "model", "dec_layers");
  m.validate();
  return m;
}

TrainConfig ExperimentConfig::train_config() const {
  TrainConfig t;
  t.lr = get<double>(data_, "train", "lr");
  t.batch_size = get<int>(data_, "train", "batch_size");
  t.clip_norm = get<double>(data_, "train", "clip_norm");
  t.max_loss = get<double>(data_, "train", "max_loss");
  t.mcm_ratio = get<double>(data_, "model", "mcm_ratio");
  t.mcm_weight = get<double>(data_, "model", "mcm_weight");
  t.seed = derive_seed(seed(), tag("train"));
  t.validate();
  return t;
}

BeamOptions ExperimentConfig::beam_options() const {
  BeamOptions b;
  b.beam_width = get<int>(data_, "decode", "beam_width");
  b.max_len = get<int>(data_, "decode", "max_len");
  b.length_penalty = get<double>(data_, "decode", "length_penalty");
  return b;
}

NucleusOptions ExperimentConfig::nucleus_options() const {
  NucleusOptions n;
  n.top_p = get<double>(data_, "decode", "top_p");
  n.temperature = get<double>(data_, "decode", "temperature");
  n.n_candidates = get<int>(data_, "decode", "n_candidates");
  n.max_len = get<int>(data_, "decode", "max_len");
  return n;
}

RerankWeights ExperimentConfig::rerank_weights() const {
  return {get<double>(data_, "rerank", "w_enc"), get<double>(data_, "rerank", "w_dec")};
}

RerankMode ExperimentConfig::rerank_mode() const {
  return rerank_mode_from_string(get<std::string>(data_, "rerank", "mode"));
}

MetricsConfig ExperimentConfig::metrics_config() const {
  MetricsConfig m;
  m.cider_n = get<int>(data_, "metrics", "cider_n");
  m.cider_sigma = get<double>(data_, "metrics", "cider_sigma");
  m.penalty_factor = get<double>(data_, "metrics", "penalty_factor");
  const RerankWeights w = rerank_weights();
  m.w_enc = w.encoder;
  m.w_dec = w.decoder;
  m.validate();
  return m;
}

void ExperimentConfig::validate() const {
  if (!data_.at("seed").is_number_unsigned()) fail(ErrorKind::Config, "seed must be a non-negative integer");
  const EventVocab v = vocab();
  const SceneParams sp = scene_params();
  if (!(sp.min_duration_s > 0.0 && sp.min_duration_s <= sp.max_duration_s))
    fail(ErrorKind::Config, "world durations must satisfy 0 < min <= max");
  if (!(sp.frame_rate_hz > 0.0)) fail(ErrorKind::Config, "world.frame_rate_hz must be > 0");
  if (sp.max_events < 1) fail(ErrorKind::Config, "world.max_events must be >= 1");
  if (!(get<double>(data_, "world", "noise_sigma") >= 0.0)) fail(ErrorKind::Config, "world.noise_sigma must be >= 0");
  if (get<int>(data_, "world", "n_refs") < 1) fail(ErrorKind::Config, "world.n_refs must be >= 1");
  model_config(static_cast<int>(caption_words(v).size()) + 4);
  train_config();
  if (get<int>(data_, "train", "pretrain_steps") < 0 || get<int>(data_, "train", "finetune_steps") < 0)
    fail(ErrorKind::Config, "train steps must be >= 0");

  const int pt = get<int>(data_, "dataset", "pretrain_size");
  const int ft = get<int>(data_, "dataset", "finetune_size");
  const int ov = get<int>(data_, "dataset", "overlap_size");
  if (pt < 0 || ft < 1) fail(ErrorKind::Config, "dataset sizes must be >= 1 (pretrain may be 0)");
  if (ov < 0 || ov > ft) fail(ErrorKind::Config, "dataset.overlap_size must be in [0, finetune_size]");
  const auto fr = get<std::vector<double>>(data_, "dataset", "split_fractions");
  if (fr.size() != 3) fail(ErrorKind::Config, "dataset.split_fractions needs three values");
  split_sizes(1, {fr[0], fr[1], fr[2]});
  if (get<double>(data_, "dataset", "min_duration_s") > get<double>(data_, "dataset", "max_duration_s"))
    fail(ErrorKind::Config, "dataset.min_duration_s exceeds dataset.max_duration_s");

  const BeamOptions b = beam_options();
  if (b.beam_width < 1) fail(ErrorKind::Config, "decode.beam_width must be >= 1");
  if (b.max_len < 1) fail(ErrorKind::Config, "decode.max_len must be >= 1");
  const NucleusOptions n = nucleus_options();
  if (!(n.top_p > 0.0 && n.top_p <= 1.0)) fail(ErrorKind::Config, "decode.top_p must be in (0, 1]");
  if (!(n.temperature > 0.0)) fail(ErrorKind::Config, "decode.temperature must be > 0");
  if (n.n_candidates < 1) fail(ErrorKind::Config, "decode.n_candidates must be >= 1");

  const RerankWeights w = rerank_weights();
  if (w.encoder < 0.0 || w.decoder < 0.0 || std::abs(w.encoder + w.decoder - 1.0) > 1e-9)
    fail(ErrorKind::Config, "rerank weights must be non-negative and sum to 1");
  rerank_mode();
  metrics_config();
  if (get<std::string>(data_, "paths", "out_dir").empty()) fail(ErrorKind::Config, "paths.out_dir is empty");
}

const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names{"synth-data", "rvq",      "train",  "generate",
                                              "rerank",     "evaluate", "report"};
  return names;
}

const std::vector<std::string>& report_systems() {
  static const std::vector<std::string> systems{"beam", "encoder", "decoder", "hybrid"};
  return systems;
}

// ---------------------------------------------------------------- helpers

namespace {

Json with_hash(Json row, const std::string& hash) {
  row["config_hash"] = hash;
  return row;
}

void write_json(const fs::path& p, const Json& j) { write_text(p, j.dump(2) + "\n"); }

Json read_json(const fs::path& p) {
  try {
    return Json::parse(read_text(p));
  } catch (const Json::exception& e) {
    fail(ErrorKind::Parse, p.string() + ": " + e.what());
  }
}

Json frames_to_json(const std::string& id, const FeatureSeq& seq) {
  Json frames = Json::array();
  for (Eigen::Index t = 0; t < seq.frames.rows(); ++t) {
    Json row = Json::array();
    for (Eigen::Index c = 0; c < seq.frames.cols(); ++c) row.push_back(seq.frames(t, c));
    frames.push_back(std::move(row));
  }
  return Json{{"id", id}, {"frame_rate_hz", seq.frame_rate_hz}, {"dim", seq.frames.cols()}, {"frames", frames}};
}

std::map<std::string, FeatureSeq> load_frames(const fs::path& p) {
  std::map<std::string, FeatureSeq> out;
  for (const Json& row : read_jsonl(p)) {
    try {
      FeatureSeq s;
      s.frame_rate_hz = row.at("frame_rate_hz").get<double>();
      const auto dim = row.at("dim").get<Eigen::Index>();
      const auto& frames = row.at("frames");
      s.frames.resize(static_cast<Eigen::Index>(frames.size()), dim);
      for (std::size_t t = 0; t < frames.size(); ++t) {
        if (static_cast<Eigen::Index>(frames[t].size()) != dim) fail(ErrorKind::Data, "frame width mismatch");
        for (Eigen::Index c = 0; c < dim; ++c)
          s.frames(static_cast<Eigen::Index>(t), c) = frames[t][static_cast<std::size_t>(c)].get<double>();
      }
      out.emplace(row.at("id").get<std::string>(), std::move(s));
    } catch (const Json::exception& e) {
      fail(ErrorKind::Parse, p.string() + ": " + e.what());
    }
  }
  return out;
}

template <class Map>
const typename Map::mapped_type& lookup(const Map& m, const std::string& id, const char* what) {
  const auto it = m.find(id);
  if (it == m.end()) fail(ErrorKind::Data, std::string("no ") + what + " for item '" + id + "'");
  return it->second;
}

void write_manifest(const fs::path& p, const std::vector<ManifestEntry>& entries, const std::string& hash) {
  std::vector<Json> rows;
  for (const auto& e : entries) rows.push_back(with_hash(entry_to_json(e), hash));
  write_jsonl(p, rows);
}

std::set<int> event_ids(const ManifestEntry& e, const EventVocab& vocab) {
  std::set<int> out;
  for (const auto& name : e.events) {
    const int id = vocab.find(name);
    if (id < 0) fail(ErrorKind::Data, "item '" + e.id + "' names unknown event '" + name + "'");
    out.insert(id);
  }
  return out;
}

Json candidate_to_json(const std::string& id, std::size_t index, const Candidate& c, const CaptionTokenizer& tok) {
  std::vector<std::string> words;
  for (int t : c.tokens) words.push_back(tok.word(t));
  return Json{{"item_id", id},
              {"candidate_index", index},
              {"tokens", words},
              {"token_logprobs", c.token_logprobs},
              {"raw_logprobs", c.raw_logprobs},
              {"sum_logprob", c.sum_logprob},
              {"source", to_string(c.source)},
              {"hit_max_len", c.hit_max_len}};
}

Candidate candidate_from_json(const Json& row, const CaptionTokenizer& tok) {
  Candidate c;
  try {
    for (const auto& w : row.at("tokens")) c.tokens.push_back(tok.id(w.get<std::string>()));
    c.token_logprobs = row.at("token_logprobs").get<std::vector<double>>();
    c.raw_logprobs = row.at("raw_logprobs").get<std::vector<double>>();
    c.sum_logprob = row.at("sum_logprob").get<double>();
    c.source = candidate_source_from_string(row.at("source").get<std::string>());
    c.hit_max_len = row.value("hit_max_len", false);
  } catch (const Json::exception& e) {
    fail(ErrorKind::Parse, std::string("malformed candidate row: ") + e.what());
  }
  return c;
}

// Rows grouped by item_id, groups in first-appearance order.
std::vector<std::pair<std::string, std::vector<Json>>> group_by_item(const std::vector<Json>& rows) {
  std::vector<std::pair<std::string, std::vector<Json>>> groups;
  std::map<std::string, std::size_t> index;
  for (const Json& row : rows) {
    if (!row.contains("item_id") || !row["item_id"].is_string()) fail(ErrorKind::Data, "row without item_id");
    const std::string id = row["item_id"].get<std::string>();
    auto [it, fresh] = index.emplace(id, groups.size());
    if (fresh) groups.emplace_back(id, std::vector<Json>{});
    groups[it->second].second.push_back(row);
  }
  return groups;
}

}  // namespace

// ---------------------------------------------------------------- pipeline

Pipeline::Pipeline(ExperimentConfig config, int jobs)
    : config_(std::move(config)), jobs_(std::max(1, jobs)), hash_(config_.hash()) {
  config_.validate();
}

fs::path Pipeline::path(const std::string& relative) const { return config_.out_dir() / relative; }

void Pipeline::require(const fs::path& p, const std::string& stage) const {
  if (!fs::exists(p))
    fail(ErrorKind::Data, "missing input " + p.string() + " (run the '" + stage + "' stage first)");
}

void Pipeline::synth_data() {
  const Json& c = config_.json();
  const EventVocab vocab = config_.vocab();
  const SceneParams sp = config_.scene_params();
  const double sigma = c["world"]["noise_sigma"].get<double>();
  const int n_refs = c["world"]["n_refs"].get<int>();
  const auto& ds = c["dataset"];
  const int n_pt = ds["pretrain_size"].get<int>();
  const int n_ft = ds["finetune_size"].get<int>();
  const int n_ov = ds["overlap_size"].get<int>();

  struct Clip {
    ManifestEntry entry;
    FeatureSeq seq;
  };
  auto make_clips = [&](int n, const char* prefix, std::uint64_t stream) {
    std::vector<Clip> clips(static_cast<std::size_t>(n));
    parallel_for(clips.size(), jobs_, [&](std::size_t i) {
      Rng rng(derive_seed(stream, i));
      const Scene scene = sample_scene(vocab, sp, rng);
      Clip& clip = clips[i];
      clip.seq = render_frames(scene, vocab, sigma, sp.frame_rate_hz, rng);
      char id[32];
      std::snprintf(id, sizeof id, "%s-%05zu", prefix, i);
      clip.entry.id = id;
      clip.entry.duration_s = scene.duration_s;
      clip.entry.captions = render_captions(scene, vocab, n_refs, rng);
      clip.entry.codec_path = "../codec/grids.jsonl";
      clip.entry.frames_path = "frames.jsonl";
      for (int e : scene.event_set()) clip.entry.events.push_back(vocab.events[static_cast<std::size_t>(e)].name);
    });
    return clips;
  };
  const std::vector<Clip> ft_clips = make_clips(n_ft, "ft", derive_seed(config_.seed(), tag("synth/finetune")));
  std::vector<Clip> pt_clips = make_clips(n_pt, "pt", derive_seed(config_.seed(), tag("synth/pretrain")));

  // Plant copies of finetune clips in the pretraining pool; the blocklist removes them.
  {
    Rng rng(derive_seed(config_.seed(), tag("synth/overlap")));
    std::vector<std::size_t> idx(ft_clips.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    for (std::size_t i = 0; i < static_cast<std::size_t>(n_ov); ++i) {
      std::swap(idx[i], idx[i + uniform_index(rng, idx.size() - i)]);
      pt_clips.push_back(ft_clips[idx[i]]);
    }
  }

  std::vector<ManifestEntry> pt_raw, ft_raw;
  for (const auto& cl : pt_clips) pt_raw.push_back(cl.entry);
  for (const auto& cl : ft_clips) ft_raw.push_back(cl.entry);

  const fs::path data = path("data");
  std::vector<std::string> blocklist;
  const std::string block_path = ds["blocklist"].get<std::string>();
  if (block_path.empty()) {
    for (const auto& e : ft_raw) blocklist.push_back(e.id);
    save_blocklist(blocklist, data / "blocklist.txt");
  } else {
    if (!fs::exists(block_path)) fail(ErrorKind::Io, "blocklist not found: " + block_path);
    blocklist = load_blocklist(block_path);
  }

  const double lo = ds["min_duration_s"].get<double>(), hi = ds["max_duration_s"].get<double>();
  const auto pt_filtered = filter_duration(pt_raw, lo, hi);
  const auto pt_final = dedup_against(pt_filtered, blocklist);
  const auto ft_filtered = filter_duration(ft_raw, lo, hi);
  const auto fr = ds["split_fractions"].get<std::vector<double>>();
  const auto ft_final =
      make_splits(ft_filtered, {fr[0], fr[1], fr[2]}, derive_seed(config_.seed(), tag("synth/splits")));

  std::map<std::string, const FeatureSeq*> seq_of;
  for (const auto& cl : pt_clips) seq_of.emplace(cl.entry.id, &cl.seq);
  for (const auto& cl : ft_clips) seq_of.emplace(cl.entry.id, &cl.seq);
  std::vector<Json> frame_rows;
  for (const auto* list : {&pt_final, &ft_final})
    for (const auto& e : *list) frame_rows.push_back(frames_to_json(e.id, *seq_of.at(e.id)));
  write_jsonl(data / "frames.jsonl", frame_rows);
  write_manifest(data / "pretrain_manifest.jsonl", pt_final, hash_);
  write_manifest(data / "finetune_manifest.jsonl", ft_final, hash_);

  double dmin = 1e300, dmax = 0.0;
  std::size_t below = 0, above = 0;
  for (const auto* list : {&pt_raw, &ft_raw})
    for (const auto& e : *list) {
      dmin = std::min(dmin, e.duration_s);
      dmax = std::max(dmax, e.duration_s);
      below += e.duration_s < lo;
      above += e.duration_s > hi;
    }
  Json log{{"config_hash", hash_},
           {"pretrain", {{"raw", pt_raw.size()}, {"after_duration_filter", pt_filtered.size()},
                         {"after_dedup", pt_final.size()}}},
           {"finetune", {{"raw", ft_raw.size()}, {"after_duration_filter", ft_filtered.size()}}},
           {"blocklist_size", blocklist.size()},
           {"durations", {{"min", dmin}, {"max", dmax}, {"below_min", below}, {"above_max", above}}},
           {"splits",
            {{"train", select_split(ft_final, Split::Train).size()},
             {"valid", select_split(ft_final, Split::Valid).size()},
             {"test", select_split(ft_final, Split::Test).size()}}}};
  write_json(data / "synth_log.json", log);
}

void Pipeline::rvq() {
  const fs::path data = path("data");
  for (const char* f : {"pretrain_manifest.jsonl", "finetune_manifest.jsonl", "frames.jsonl"})
    require(data / f, "synth-data");
  const auto pt = load_manifest(data / "pretrain_manifest.jsonl");
  const auto ft = load_manifest(data / "finetune_manifest.jsonl");
  const auto frames = load_frames(data / "frames.jsonl");

  std::vector<FeatureSeq> corpus;
  for (const auto& e : pt) corpus.push_back(lookup(frames, e.id, "frames"));
  for (const auto& e : select_split(ft, Split::Train)) corpus.push_back(lookup(frames, e.id, "frames"));

  const CodecConfig cc = config_.codec_config();
  const RvqCodec codec = RvqCodec::fit(corpus, cc, derive_seed(config_.seed(), tag("rvq")));
  write_json(path("codec/codec.json"), with_hash(codec.to_json(), hash_));

  std::vector<Json> rows;
  for (const auto* list : {&pt, &ft})
    for (const auto& e : *list) rows.push_back(with_hash(grid_to_json(e.id, codec.encode(lookup(frames, e.id, "frames"))), hash_));
  write_jsonl(path("codec/grids.jsonl"), rows);

  Json mse = Json::array();
  for (int l = 1; l <= cc.n_q; ++l)
    mse.push_back(Json{{"levels", l}, {"mse", reconstruction_mse(codec.truncated(l), corpus)}});
  Json log{{"config_hash", hash_},
           {"preset", cc.preset},
           {"n_q", cc.n_q},
           {"codebook_size", cc.codebook_size},
           {"fit_sequences", corpus.size()},
           {"training_mse_by_levels", mse}};
  write_json(path("codec/rvq_log.json"), log);
}

namespace {

struct Loaded {
  EventVocab vocab;
  CaptionTokenizer tokenizer;
  std::vector<ManifestEntry> pretrain, finetune;
  std::map<std::string, FeatureSeq> frames;
  std::map<std::string, CodecGrid> grids;
};

TrainItem make_item(const ManifestEntry& e, const Loaded& d) {
  TrainItem it;
  it.id = e.id;
  it.grid = lookup(d.grids, e.id, "codec grid");
  it.seq = pooled_frame_embedding(lookup(d.frames, e.id, "frames"), d.vocab);
  for (const auto& cap : e.captions) it.captions.push_back(d.tokenizer.encode(cap));
  return it;
}

}  // namespace

void Pipeline::train() {
  const fs::path data = path("data");
  for (const char* f : {"pretrain_manifest.jsonl", "finetune_manifest.jsonl", "frames.jsonl"})
    require(data / f, "synth-data");
  require(path("codec/grids.jsonl"), "rvq");

  Loaded d;
  d.vocab = config_.vocab();
  d.tokenizer = CaptionTokenizer(caption_words(d.vocab));
  d.pretrain = load_manifest(data / "pretrain_manifest.jsonl");
  d.finetune = load_manifest(data / "finetune_manifest.jsonl");
  d.frames = load_frames(data / "frames.jsonl");
  const CodecConfig cc = config_.codec_config();
  for (const Json& row : read_jsonl(path("codec/grids.jsonl")))
    d.grids.emplace(row.at("id").get<std::string>(), grid_from_json(row, cc.codebook_size));

  std::vector<TrainStage> stages(2);
  stages[0].name = "pretrain";
  stages[0].steps = config_.json()["train"]["pretrain_steps"].get<int>();
  for (const auto& e : d.pretrain) stages[0].items.push_back(make_item(e, d));
  stages[1].name = "finetune";
  stages[1].steps = config_.json()["train"]["finetune_steps"].get<int>();
  for (const auto& e : select_split(d.finetune, Split::Train)) stages[1].items.push_back(make_item(e, d));

  const ModelConfig mc = config_.model_config(d.tokenizer.size());
  CaptionModel model(mc, derive_seed(config_.seed(), tag("model")));
  const TrainConfig tc = config_.train_config();

  std::vector<TraceRow> trace;
  std::vector<std::pair<std::string, int>> starts;
  TrainResult result;
  try {
    result = capforge::train(model, stages, tc, [&](const TraceRow& r) {
      if (starts.empty() || starts.back().first != r.stage) starts.emplace_back(r.stage, r.step);
      trace.push_back(r);
      if (logger && (r.step + 1) % 100 == 0) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "train step %d (%s) loss %.4f caption %.4f mcm %.4f", r.step + 1,
                      r.stage.c_str(), r.loss.total, r.loss.caption_ce, r.loss.mcm_ce);
        logger(buf);
      }
    });
  } catch (const Error&) {
    write_text(path("model/loss.csv"), trace_to_csv(trace));
    throw;
  }
  write_text(path("model/loss.csv"), trace_to_csv(result.trace));
  write_json(path("model/checkpoint.json"),
             Json{{"config_hash", hash_}, {"model", model.to_json()}, {"tokenizer", d.tokenizer.words()}});

  std::vector<TrainItem> held_out;
  for (const auto& e : select_split(d.finetune, Split::Test)) held_out.push_back(make_item(e, d));
  const McmAccuracy acc =
      mcm_accuracy(model, held_out, tc.mcm_ratio, derive_seed(config_.seed(), tag("mcm-eval")));
  Json boundaries = Json::array();
  for (const auto& [name, step] : result.stage_starts) boundaries.push_back(Json{{"stage", name}, {"first_step", step}});
  Json final_loss = Json::object();
  for (const auto& r : result.trace)
    final_loss[r.stage] = Json{{"total", r.loss.total}, {"caption_ce", r.loss.caption_ce}, {"mcm_ce", r.loss.mcm_ce}};
  Json log{{"config_hash", hash_},
           {"parameters", model.num_parameters()},
           {"total_steps", result.trace.size()},
           {"stage_boundaries", boundaries},
           {"stage_items", {{"pretrain", stages[0].items.size()}, {"finetune", stages[1].items.size()}}},
           {"final_loss", final_loss},
           {"mcm_eval",
            {{"split", "test"},
             {"mask_ratio", tc.mcm_ratio},
             {"accuracy", acc.accuracy()},
             {"correct", acc.correct},
             {"total", acc.total},
             {"per_level", acc.per_level},
             {"chance", 1.0 / mc.codebook_size}}}};
  write_json(path("model/train_log.json"), log);
}

void Pipeline::generate() {
  const fs::path data = path("data");
  require(path("model/checkpoint.json"), "train");
  require(path("codec/grids.jsonl"), "rvq");
  require(data / "finetune_manifest.jsonl", "synth-data");

  const Json ckpt = read_json(path("model/checkpoint.json"));
  const CaptionModel model = CaptionModel::from_json(ckpt.at("model"));
  const CaptionTokenizer tok(ckpt.at("tokenizer").get<std::vector<std::string>>());
  const EventVocab vocab = config_.vocab();
  const auto test = select_split(load_manifest(data / "finetune_manifest.jsonl"), Split::Test);
  if (test.empty()) fail(ErrorKind::Data, "the test split is empty");
  const auto frames = load_frames(data / "frames.jsonl");
  std::map<std::string, CodecGrid> grids;
  for (const Json& row : read_jsonl(path("codec/grids.jsonl")))
    grids.emplace(row.at("id").get<std::string>(), grid_from_json(row, model.config().codebook_size));

  const BeamOptions bo = config_.beam_options();
  const NucleusOptions no = config_.nucleus_options();
  const std::uint64_t gen_seed = derive_seed(config_.seed(), tag("generate"));
  std::vector<std::vector<Candidate>> beams(test.size()), samples(test.size());
  parallel_for(test.size(), jobs_, [&](std::size_t i) {
    const auto& e = test[i];
    const Mat x = model.compose_inputs(lookup(grids, e.id, "codec grid"),
                                       pooled_frame_embedding(lookup(frames, e.id, "frames"), vocab));
    const ModelCursor cursor(model, x);
    beams[i] = beam_search(cursor, CaptionTokenizer::kEos, bo);
    samples[i] = nucleus_sample(cursor, CaptionTokenizer::kEos, no, derive_seed(gen_seed, fnv1a64(e.id)));
  });

  std::vector<Json> beam_rows, nucleus_rows;
  std::size_t distinct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    for (std::size_t k = 0; k < beams[i].size(); ++k)
      beam_rows.push_back(with_hash(candidate_to_json(test[i].id, k, beams[i][k], tok), hash_));
    std::set<std::vector<int>> uniq;
    for (std::size_t k = 0; k < samples[i].size(); ++k) {
      nucleus_rows.push_back(with_hash(candidate_to_json(test[i].id, k, samples[i][k], tok), hash_));
      uniq.insert(samples[i][k].tokens);
    }
    distinct += uniq.size();
  }
  write_jsonl(path("gen/candidates_beam.jsonl"), beam_rows);
  write_jsonl(path("gen/candidates_nucleus.jsonl"), nucleus_rows);
  write_json(path("gen/generate_log.json"),
             Json{{"config_hash", hash_},
                  {"items", test.size()},
                  {"beam_candidates", beam_rows.size()},
                  {"nucleus_candidates", nucleus_rows.size()},
                  {"mean_distinct_nucleus", static_cast<double>(distinct) / static_cast<double>(test.size())}});
}

void Pipeline::rerank() {
  require(path("gen/candidates_beam.jsonl"), "generate");
  require(path("gen/candidates_nucleus.jsonl"), "generate");
  require(path("data/finetune_manifest.jsonl"), "synth-data");
  const EventVocab vocab = config_.vocab();
  const CaptionTokenizer tok(caption_words(vocab));
  const RuleFluencyDetector detector(content_words(vocab));
  const RerankWeights weights = config_.rerank_weights();

  std::map<std::string, SeqEmbedding> audio;
  for (const auto& e : load_manifest(path("data/finetune_manifest.jsonl")))
    if (!e.events.empty()) audio.emplace(e.id, oracle_audio_embedding(event_ids(e, vocab), vocab));

  const auto beam_groups = group_by_item(read_jsonl(path("gen/candidates_beam.jsonl")));
  const auto nucleus_groups = group_by_item(read_jsonl(path("gen/candidates_nucleus.jsonl")));

  for (const std::string& system : report_systems()) {
    const RerankMode mode = system == "beam" ? RerankMode::BeamPassthrough : rerank_mode_from_string(system);
    const auto& groups = system == "beam" ? beam_groups : nucleus_groups;
    std::vector<Json> out;
    for (const auto& [id, rows] : groups) {
      std::vector<Candidate> cands;
      for (const Json& r : rows) cands.push_back(candidate_from_json(r, tok));
      const auto ranked =
          rank(score_candidates(cands, tok, lookup(audio, id, "audio embedding"), vocab, detector), mode, weights);
      for (std::size_t k = 0; k < ranked.size(); ++k) {
        const auto& s = ranked[k];
        out.push_back(with_hash(Json{{"item_id", id},
                                     {"rank", k},
                                     {"tokens", s.tokens},
                                     {"caption", join_tokens(s.tokens)},
                                     {"encoder_score", s.encoder_score},
                                     {"decoder_score", s.decoder_score},
                                     {"encoder_norm", s.encoder_norm},
                                     {"decoder_norm", s.decoder_norm},
                                     {"hybrid", s.hybrid},
                                     {"flags", flag_names(s.flags)},
                                     {"source_index", s.source_index},
                                     {"mode", to_string(mode)}},
                                hash_));
      }
    }
    write_jsonl(path("rerank/ranked_" + system + ".jsonl"), out);
  }
}

void Pipeline::evaluate() {
  require(path("data/finetune_manifest.jsonl"), "synth-data");
  const EventVocab vocab = config_.vocab();
  const RuleFluencyDetector detector(content_words(vocab));
  const OracleTextEmbedder embedder(vocab);
  const SpiceProxy spice;
  const MetricsConfig mc = config_.metrics_config();
  const auto test = select_split(load_manifest(path("data/finetune_manifest.jsonl")), Split::Test);

  for (const std::string& system : report_systems()) {
    const fs::path ranked = path("rerank/ranked_" + system + ".jsonl");
    require(ranked, "rerank");
    std::map<std::string, std::string> top;
    for (const Json& row : read_jsonl(ranked))
      if (row.at("rank").get<int>() == 0) top[row.at("item_id").get<std::string>()] = row.at("caption").get<std::string>();
    EvalCorpus corpus;
    for (const auto& e : test) corpus.items.push_back({e.id, lookup(top, e.id, "ranked candidate"), e.captions});
    Json report = capforge::evaluate(corpus, mc, spice, embedder, detector).to_json();
    report["system"] = system;
    report["config_hash"] = hash_;
    write_json(path("eval/report_" + system + ".json"), report);
  }
}

Json Pipeline::report(const std::vector<fs::path>& inputs, bool allow_hash_mismatch) {
  std::vector<fs::path> files = inputs;
  const bool own = files.empty();
  if (own)
    for (const auto& s : report_systems()) {
      files.push_back(path("eval/report_" + s + ".json"));
      require(files.back(), "evaluate");
    }
  Json rows = Json::array();
  std::set<std::string> hashes;
  Json labels;
  for (const auto& f : files) {
    if (!fs::exists(f)) fail(ErrorKind::Io, "report input not found: " + f.string());
    const Json r = read_json(f);
    try {
      const std::string h = r.at("config_hash").get<std::string>();
      hashes.insert(h);
      const Json& c = r.at("corpus");
      rows.push_back(Json{{"system", r.value("system", f.stem().string())},
                          {"config_hash", h},
                          {"meteor", c.at("meteor")},
                          {"cider_d", c.at("cider_d")},
                          {"spice", c.at("spice")},
                          {"spider", c.at("spider")},
                          {"spider_fl", c.at("spider_fl")},
                          {"fense", c.at("fense")},
                          {"vocab", c.at("vocab")}});
      if (labels.is_null()) labels = r.at("labels");
    } catch (const Json::exception& e) {
      fail(ErrorKind::Parse, f.string() + ": " + e.what());
    }
  }
  if (hashes.size() > 1 && !allow_hash_mismatch) {
    std::string list;
    for (const auto& h : hashes) list += (list.empty() ? "" : ", ") + h;
    fail(ErrorKind::Config, "reports come from different configs (" + list + "); pass --allow-hash-mismatch to compare anyway");
  }
  Json table{{"config_hash", hashes.size() == 1 ? Json(*hashes.begin()) : Json(nullptr)},
             {"hash_mismatch", hashes.size() > 1},
             {"labels", labels},
             {"rows", rows}};
  if (own) {
    write_json(path("report.json"), table);
    write_text(path("report.txt"), format_report_table(table));
  }
  return table;
}

void Pipeline::run(const std::string& stage) {
  auto say = [&](const std::string& s) {
    if (logger) logger("stage " + s);
  };
  if (stage == "all") {
    for (const auto& s : stage_names()) run(s);
    return;
  }
  say(stage);
  if (stage == "synth-data") synth_data();
  else if (stage == "rvq") rvq();
  else if (stage == "train") train();
  else if (stage == "generate") generate();
  else if (stage == "rerank") rerank();
  else if (stage == "evaluate") evaluate();
  else if (stage == "report") report();
  else fail(ErrorKind::Config, "unknown stage '" + stage + "'");
}

EvalCorpus eval_corpus_from_jsonl(const std::vector<Json>& rows) {
  EvalCorpus corpus;
  for (const Json& row : rows) {
    try {
      corpus.items.push_back({row.at("item_id").get<std::string>(), row.at("candidate").get<std::string>(),
                              row.at("references").get<std::vector<std::string>>()});
    } catch (const Json::exception& e) {
      fail(ErrorKind::Parse, std::string("evaluation row: ") + e.what());
    }
  }
  corpus.validate();
  return corpus;
}

std::string format_report_table(const Json& table) {
  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-10s %8s %8s %8s %8s %9s %8s %6s\n", "system", "meteor", "cider_d", "spice",
                "spider", "spider_fl", "fense", "vocab");
  out += buf;
  for (const auto& r : table.at("rows")) {
    std::snprintf(buf, sizeof buf, "%-10s %8.4f %8.4f %8.4f %8.4f %9.4f %8.4f %6d\n",
                  r.at("system").get<std::string>().c_str(), r.at("meteor").get<double>(),
                  r.at("cider_d").get<double>(), r.at("spice").get<double>(), r.at("spider").get<double>(),
                  r.at("spider_fl").get<double>(), r.at("fense").get<double>(), r.at("vocab").get<int>());
    out += buf;
  }
  if (table.contains("labels") && table["labels"].is_object()) {
    out += "labels:";
    for (const auto& [k, v] : table["labels"].items()) out += " " + k + "=" + v.get<std::string>();
    out += "\n";
  }
  if (table.value("hash_mismatch", false)) out += "warning: rows come from different configs\n";
  return out;
}

}  // namespace capforge
