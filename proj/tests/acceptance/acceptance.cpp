// Acceptance suite: one PASS/FAIL line per criterion.
#include <boost/math/distributions/chi_squared.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "codec.hpp"
#include "dataio.hpp"
#include "decoding.hpp"
#include "metrics.hpp"
#include "model.hpp"
#include "oracles.hpp"
#include "pipeline.hpp"
#include "rerank.hpp"
#include "text.hpp"

using namespace capforge;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void criterion(int id, const std::string& name, double budget_s, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (budget_s > 0 && secs > budget_s) {
    o.pass = false;
    o.detail += " [over the " + std::to_string(static_cast<int>(budget_s)) + " s budget]";
  }
  if (!o.pass) ++failures;
  std::printf("%s criterion %d %s (%.1f s): %s\n", o.pass ? "PASS" : "FAIL", id, name.c_str(), secs,
              o.detail.c_str());
  std::fflush(stdout);
}

// Fixtures whose inputs or values are decimal (0.3, 0.8, 0.375) are not
// binary-exact, so there "exact" means within 4 units in the last place.
bool ulp_equal(double a, double b) {
  return std::abs(a - b) <= 4 * std::numeric_limits<double>::epsilon() * std::max(std::abs(a), std::abs(b));
}

std::string fmt(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", x);
  return buf;
}

// ---------------------------------------------------------------------------
// 1. Metrics

Outcome metric_oracles() {
  const std::vector<std::string> pool{"a", "dog", "barks", "rain", "falls", "on", "the", "roof", "car", "birds"};
  Rng rng(2024);
  auto random_tokens = [&] {
    Tokens t(uniform_index(rng, 9));
    for (auto& w : t) w = pool[uniform_index(rng, pool.size())];
    return t;
  };
  double worst = 0.0;
  for (int corpus = 0; corpus < 100; ++corpus) {
    const std::size_t n = 1 + uniform_index(rng, 10);
    std::vector<Tokens> cands;
    std::vector<std::vector<Tokens>> refs(n);
    for (std::size_t i = 0; i < n; ++i) {
      cands.push_back(random_tokens());
      for (std::size_t k = 0, nr = 1 + uniform_index(rng, 5); k < nr; ++k) refs[i].push_back(random_tokens());
    }
    const auto got = cider_d(cands, refs).per_item;
    const auto want = testing::dense_cider(cands, refs, 4, 6.0);
    for (std::size_t i = 0; i < n; ++i) worst = std::max(worst, std::abs(got[i] - want[i]));
  }
  const double m1 = meteor_lite(tokenize("a dog barks loudly"), {tokenize("a dog barks loudly")});
  const double m2 = meteor_lite(tokenize("the dog barks"), {tokenize("the dog sleeps")});
  const double sp = SpiceProxy().score(tokenize("dog barks"), {tokenize("dog barks"), tokenize("rain")});
  const auto ten = cider_d({tokenize("a dog barks loudly outside"), tokenize("rain falls on the old roof")},
                           {{tokenize("a dog barks loudly outside")}, {tokenize("rain falls on the old roof")}});
  const bool ok = worst < 1e-9 && m1 == 0.9921875 && m2 == 0.625 && ulp_equal(sp, 0.8) &&
                  ten.per_item[0] == 10.0 && ten.per_item[1] == 10.0;
  return {ok, "max |cider - dense oracle| = " + fmt(worst) + " over 100 corpora; meteor " + fmt(m1) + " (off by " +
                  fmt(m1 - 0.9921875) + "), " + fmt(m2) + " (off by " + fmt(m2 - 0.625) + "); spice_proxy " +
                  fmt(sp) + " (off by " + fmt(sp - 0.8) + "); identical-candidate cider " + fmt(ten.per_item[0]) +
                  ", " + fmt(ten.per_item[1])};
}

// ---------------------------------------------------------------------------
// 2. Gradients

Outcome gradients() {
  ModelConfig c;
  c.n_q = 2;
  c.codebook_size = 6;
  c.seq_dim = 4;
  c.vocab_size = 9;
  c.hidden = 16;
  c.heads = 2;
  c.ffn = 24;
  c.enc_layers = 2;
  c.dec_layers = 2;
  CaptionModel m(c, 31);
  // A generic point: weights well away from the small init so no tensor's
  // gradient sits at the finite-difference rounding floor.
  Rng noise(5);
  for (auto& p : m.params())
    for (Eigen::Index k = 0; k < p.size(); ++k) p.data()[k] += 0.3 * standard_normal(noise);
  Rng rng(17);
  std::vector<Example> batch;
  for (int b = 0; b < 2; ++b) {
    Example ex;
    ex.grid.codebook_size = c.codebook_size;
    ex.grid.codes.assign(2, std::vector<int>(5));
    for (auto& level : ex.grid.codes)
      for (auto& code : level) code = static_cast<int>(uniform_index(rng, 6));
    for (int i = 0; i < c.seq_dim; ++i) ex.seq.vector.push_back(standard_normal(rng));
    ex.caption = {4, 7, 5};
    ex.masked_cols = {0, 3};
    batch.push_back(ex);
  }
  const GradCheckResult r0 = grad_check(m, batch, 0.0, 1e-4);
  const GradCheckResult r1 = grad_check(m, batch, 1.0, 1e-4);
  const bool ok = r0.max_relative_error < 1e-5 && r1.max_relative_error < 1e-5 && r0.mcm_head_grad_max_abs == 0.0;
  return {ok, "h=16, eps=1e-4: lambda=0 max rel err " + fmt(r0.max_relative_error) + " (" + r0.worst_tensor +
                  "), lambda=1 " + fmt(r1.max_relative_error) + " (" + r1.worst_tensor +
                  "); lambda=0 MCM-head grad max " + fmt(r0.mcm_head_grad_max_abs)};
}

// ---------------------------------------------------------------------------
// 3. RVQ

Outcome rvq_properties() {
  std::size_t checked = 0, violations = 0;
  auto check_nearest = [&](const RvqCodec& codec, const std::vector<FeatureSeq>& seqs) {
    for (const auto& s : seqs) {
      const CodecGrid g = codec.encode(s);
      for (Eigen::Index t = 0; t < s.frames.rows(); ++t) {
        RowVec r = s.frames.row(t);
        for (std::size_t q = 0; q < codec.codebooks().size(); ++q) {
          const Mat& cb = codec.codebooks()[q];
          const int code = g.codes[q][static_cast<std::size_t>(t)];
          const double chosen = (cb.row(code) - r).squaredNorm();
          for (Eigen::Index k = 0; k < cb.rows(); ++k)
            if ((cb.row(k) - r).squaredNorm() < chosen) ++violations;
          ++checked;
          r -= cb.row(code);
        }
      }
    }
  };

  Rng rng(99);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<FeatureSeq> seqs(3);
    const int d = 2 + static_cast<int>(uniform_index(rng, 6));
    for (auto& s : seqs) {
      s.frames.resize(10 + static_cast<Eigen::Index>(uniform_index(rng, 30)), d);
      for (Eigen::Index i = 0; i < s.frames.size(); ++i) s.frames.data()[i] = 3.0 * standard_normal(rng);
    }
    CodecConfig cfg;
    cfg.n_q = 1 + static_cast<int>(uniform_index(rng, 4));
    cfg.codebook_size = 2 + static_cast<int>(uniform_index(rng, 8));
    cfg.dim = d;
    check_nearest(RvqCodec::fit(seqs, cfg, static_cast<std::uint64_t>(trial)), seqs);
  }

  const EventVocab vocab = make_vocab(12, 16, 77);
  Rng world(3);
  std::vector<FeatureSeq> corpus;
  for (int i = 0; i < 150; ++i) {
    const Scene s = sample_scene(vocab, SceneParams{}, world);
    corpus.push_back(render_frames(s, vocab, 0.1, 1.0, world));
  }
  std::vector<double> mse;
  std::string trace;
  for (int n_q : {1, 2, 4, 8}) {
    CodecConfig cfg = codec_preset("desk4", 16);
    cfg.n_q = n_q;
    const RvqCodec codec = RvqCodec::fit(corpus, cfg, 11);
    mse.push_back(reconstruction_mse(codec, corpus));
    trace += (trace.empty() ? "" : ", ") + std::to_string(n_q) + ":" + fmt(mse.back());
    if (n_q == 8) check_nearest(codec, corpus);
  }
  const bool monotone = std::is_sorted(mse.rbegin(), mse.rend());
  return {monotone && violations == 0,
          std::to_string(checked) + " level choices checked, " + std::to_string(violations) +
              " not nearest; training MSE by n_q {" + trace + "}" + (monotone ? "" : " NOT monotone")};
}

// ---------------------------------------------------------------------------
// 4. Sampler

Outcome sampler() {
  const std::vector<double> p3{0.5, 0.3, 0.2};
  const auto t = truncate_nucleus(p3, 0.7);
  const bool trunc_ok = t.size() == 2 && t[0].first == 0 && t[1].first == 1 && ulp_equal(t[0].second, 0.625) &&
                        ulp_equal(t[1].second, 0.375);

  const std::vector<double> p{0.35, 0.25, 0.2, 0.12, 0.08};
  const testing::TableCursor flat(std::make_shared<const testing::TableCursor::Table>(), p);
  NucleusOptions opt;
  opt.top_p = 1.0;
  opt.temperature = 1.0;
  opt.n_candidates = 100000;
  opt.max_len = 1;
  const auto draws = nucleus_sample(flat, 4, opt, 2025);
  std::vector<double> counts(p.size(), 0.0);
  for (const auto& c : draws) counts[static_cast<std::size_t>(c.tokens[0])] += 1.0;
  double chi2 = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double e = p[i] * static_cast<double>(draws.size());
    chi2 += (counts[i] - e) * (counts[i] - e) / e;
  }
  const double pvalue = boost::math::cdf(boost::math::complement(boost::math::chi_squared(4), chi2));

  using Table = testing::TableCursor::Table;
  const testing::TableCursor toy(
      std::make_shared<const Table>(Table{{{}, {0.5, 0.3, 0.2}}, {{0}, {0.1, 0.6, 0.3}}, {{1}, {0.7, 0.1, 0.2}}}),
      {1.0 / 3, 1.0 / 3, 1.0 / 3});
  BeamOptions bo;
  bo.beam_width = 2;
  bo.max_len = 2;
  const auto beams = beam_search(toy, 2, bo);
  const auto all = testing::enumerate_sequences(toy, 2, 2);
  bool beam_ok = beams.size() == 2;
  for (std::size_t i = 0; beam_ok && i < 2; ++i)
    beam_ok = beams[i].tokens == all[i].tokens && std::abs(beams[i].sum_logprob - all[i].logprob) < 1e-12;

  return {trunc_ok && pvalue > 0.01 && beam_ok,
          std::string("p=0.7 truncation ") + (trunc_ok ? "{0.625, 0.375}" : "wrong") + "; chi2 " + fmt(chi2) +
              " on 4 dof over 1e5 draws, p-value " + fmt(pvalue) + "; beam=2 " +
              (beam_ok ? "matches" : "differs from") + " exhaustive top-2"};
}

// ---------------------------------------------------------------------------
// 5. Reranking

Outcome reranking() {
  auto cand = [](const std::string& w, double enc, double dec, FluencyFlags f = 0) {
    ScoredCandidate c;
    c.tokens = tokenize(w);
    c.encoder_score = enc;
    c.decoder_score = dec;
    c.flags = f;
    return c;
  };
  auto order = [](const std::vector<ScoredCandidate>& cs) {
    std::vector<std::string> out;
    for (const auto& c : cs) out.push_back(join_tokens(c.tokens));
    return out;
  };
  const auto hybrid =
      order(rank({cand("c1", 1.0, -2.0), cand("c2", 0.0, -1.0), cand("c3", 0.5, -1.2)}, RerankMode::Hybrid, {0.6, 0.4}));
  const bool fixture_ok = hybrid == std::vector<std::string>{"c3", "c1", "c2"};

  Rng rng(8);
  std::size_t pure_mismatch = 0, empties = 0, lists = 0;
  for (int trial = 0; trial < 5000; ++trial) {
    std::vector<ScoredCandidate> cs;
    const std::size_t n = 1 + uniform_index(rng, 15);
    for (std::size_t i = 0; i < n; ++i) {
      FluencyFlags f = 0;
      for (unsigned b = 0; b < 4; ++b)
        if (uniform01(rng) < 0.25 * (trial % 5)) f |= 1u << b;
      cs.push_back(cand("w" + std::to_string(i), 2 * uniform01(rng) - 1, -4 * uniform01(rng), f));
    }
    ++lists;
    if (rank(cs, RerankMode::Hybrid, {0.6, 0.4}).empty()) ++empties;
    for (auto& c : cs) c.flags = 0;
    auto by = [&](double ScoredCandidate::*field) {
      auto s = cs;
      std::sort(s.begin(), s.end(), [&](const auto& a, const auto& b) {
        if (a.*field != b.*field) return a.*field > b.*field;
        if (a.decoder_score != b.decoder_score) return a.decoder_score > b.decoder_score;
        return a.tokens < b.tokens;
      });
      return order(s);
    };
    if (order(rank(cs, RerankMode::Hybrid, {1, 0})) != by(&ScoredCandidate::encoder_score)) ++pure_mismatch;
    if (order(rank(cs, RerankMode::Hybrid, {0, 1})) != by(&ScoredCandidate::decoder_score)) ++pure_mismatch;
  }
  return {fixture_ok && pure_mismatch == 0 && empties == 0,
          std::string("hand fixture ") + (fixture_ok ? "c3 > c1 > c2" : "misordered") + "; " +
              std::to_string(pure_mismatch) + " of " + std::to_string(2 * lists) +
              " pure-weight orderings differ; " + std::to_string(empties) + " of " + std::to_string(lists) +
              " fuzzed flag patterns emptied the list"};
}

// ---------------------------------------------------------------------------
// End-to-end runs shared by criteria 6-9.

struct Run {
  fs::path dir;
  std::uint64_t seed = 0;
  double seconds = 0.0;
  std::string error;
};

Run run_pipeline(const fs::path& dir, std::uint64_t seed, int jobs) {
  Run r{dir, seed, 0.0, {}};
  const auto t0 = std::chrono::steady_clock::now();
  try {
    ExperimentConfig cfg = ExperimentConfig::load(fs::path(CAPFORGE_CONFIG_DIR) / "default.json");
    cfg.set_seed(seed);
    cfg.set("paths.out_dir", dir.string());
    fs::remove_all(dir);
    Pipeline p(cfg, jobs);
    p.run("all");
  } catch (const std::exception& e) {
    r.error = e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("  run seed %llu jobs %d: %.1f s%s\n", static_cast<unsigned long long>(seed), jobs, r.seconds,
              r.error.empty() ? "" : (" error: " + r.error).c_str());
  std::fflush(stdout);
  return r;
}

Json load(const fs::path& p) { return Json::parse(read_text(p)); }

Outcome mcm_learns(const Run& ref) {
  if (!ref.error.empty()) return {false, "reference run failed: " + ref.error};
  const Json log = load(ref.dir / "model/train_log.json");
  const Json& ev = log.at("mcm_eval");
  const double acc = ev.at("accuracy"), chance = ev.at("chance");
  const auto ft = load_manifest(ref.dir / "data/finetune_manifest.jsonl");
  const auto pt = load_manifest(ref.dir / "data/pretrain_manifest.jsonl");
  const double ratio = acc / chance;
  return {ratio >= 5.0 && ev.at("split") == "test" && ref.seconds <= 600.0,
          "held-out (" + ev.at("split").get<std::string>() + ") masked-code accuracy " + fmt(acc) + " = " +
              fmt(ratio) + " x chance (1/" + std::to_string(static_cast<int>(std::lround(1 / chance))) + ") over " +
              std::to_string(ev.at("total").get<int>()) + " cells; " + std::to_string(pt.size() + ft.size()) +
              " scenes after filtering; run took " + fmt(ref.seconds) + " s"};
}

Outcome direction(const std::vector<Run>& runs) {
  int agree = 0;
  std::string detail;
  for (const auto& r : runs) {
    if (!r.error.empty()) {
      detail += " seed " + std::to_string(r.seed) + " failed;";
      continue;
    }
    const Json h = load(r.dir / "eval/report_hybrid.json").at("corpus");
    const Json b = load(r.dir / "eval/report_beam.json").at("corpus");
    const double fh = h.at("fense"), fb = b.at("fense");
    const int vh = h.at("vocab"), vb = b.at("vocab");
    const bool ok = fh >= fb && vh > vb;
    agree += ok;
    detail += " seed " + std::to_string(r.seed) + ": fense " + fmt(fh) + " vs " + fmt(fb) + ", vocab " +
              std::to_string(vh) + " vs " + std::to_string(vb) + (ok ? " agree;" : " disagree;");
  }
  return {2 * agree > static_cast<int>(runs.size()),
          std::to_string(agree) + "/" + std::to_string(runs.size()) + " seeds (hybrid vs beam)" + detail};
}

Outcome dataset_rules(const Run& ref) {
  auto entry = [](const std::string& id, double d) {
    ManifestEntry e;
    e.id = id;
    e.duration_s = d;
    e.captions = {"x"};
    return e;
  };
  const std::vector<ManifestEntry> edges{entry("below", std::nextafter(1.0, 0.0)), entry("one", 1.0),
                                         entry("mid", 15.0), entry("thirty", 30.0),
                                         entry("above", std::nextafter(30.0, 31.0)), entry("tiny", 0.5),
                                         entry("long", 31.0)};
  std::vector<std::string> kept;
  for (const auto& e : filter_duration(edges)) kept.push_back(e.id);
  const bool filter_ok = kept == std::vector<std::string>{"one", "mid", "thirty"};

  Rng rng(4);
  int dedup_bad = 0;
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<ManifestEntry> es;
    std::vector<std::string> block;
    const std::size_t n = uniform_index(rng, 40);
    for (std::size_t i = 0; i < n; ++i) es.push_back(entry("c" + std::to_string(uniform_index(rng, 1000)) + "_" +
                                                               std::to_string(i), 5.0));
    for (const auto& e : es)
      if (uniform01(rng) < 0.4) block.push_back(e.id);
    for (int k = 0; k < 3; ++k) block.push_back("absent" + std::to_string(k));
    const std::set<std::string> bs(block.begin(), block.end());
    std::vector<std::string> want, got;
    for (const auto& e : es)
      if (!bs.count(e.id)) want.push_back(e.id);
    for (const auto& e : dedup_against(es, block)) got.push_back(e.id);
    dedup_bad += got != want;
  }

  if (!ref.error.empty()) return {false, "reference run failed: " + ref.error};
  const Json log = load(ref.dir / "model/train_log.json");
  const Json& sb = log.at("stage_boundaries");
  const Json cfg = ExperimentConfig::defaults();
  const bool stages_ok = sb.size() == 2 && sb[0].at("stage") == "pretrain" && sb[1].at("stage") == "finetune" &&
                         sb[1].at("first_step") == cfg.at("train").at("pretrain_steps");
  const std::string csv = read_text(ref.dir / "model/loss.csv");
  const bool trace_ok = csv.find(",pretrain\n") != std::string::npos && csv.find(",finetune\n") != std::string::npos;
  const auto pt = load_manifest(ref.dir / "data/pretrain_manifest.jsonl");
  const auto ft = load_manifest(ref.dir / "data/finetune_manifest.jsonl");
  std::set<std::string> ft_ids;
  for (const auto& e : ft) ft_ids.insert(e.id);
  std::size_t leaks = 0, out_of_range = 0;
  for (const auto& e : pt) {
    leaks += ft_ids.count(e.id);
    out_of_range += e.duration_s < 1.0 || e.duration_s > 30.0;
  }
  for (const auto& e : ft) out_of_range += e.duration_s < 1.0 || e.duration_s > 30.0;

  const bool ok = filter_ok && dedup_bad == 0 && stages_ok && trace_ok && leaks == 0 && out_of_range == 0;
  return {ok, std::string("boundary fixture kept {") + [&] {
                std::string s;
                for (const auto& k : kept) s += (s.empty() ? "" : ", ") + k;
                return s;
              }() + "}; " + std::to_string(dedup_bad) + "/500 dedup fuzz mismatches; stage boundary " +
                  (stages_ok ? "pretrain@0, finetune@" + sb[1].at("first_step").dump() : std::string("missing")) +
                  "; " + std::to_string(pt.size()) + " pretrain / " + std::to_string(ft.size()) +
                  " finetune clips on disk, " + std::to_string(leaks) + " finetune ids in pretrain, " +
                  std::to_string(out_of_range) + " out of [1, 30] s"};
}

Outcome determinism(const Run& a, const Run& b) {
  if (!a.error.empty() || !b.error.empty()) return {false, "a run failed"};
  std::vector<std::string> differ, missing;
  std::size_t compared = 0, key_files = 0;
  for (const auto& entry : fs::recursive_directory_iterator(a.dir)) {
    if (!entry.is_regular_file()) continue;
    const fs::path rel = fs::relative(entry.path(), a.dir);
    const fs::path other = b.dir / rel;
    ++compared;
    const std::string top = rel.begin()->string();
    key_files += top == "gen" || top == "rerank" || top == "eval";
    if (!fs::exists(other)) {
      missing.push_back(rel.string());
    } else if (read_text(entry.path()) != read_text(other)) {
      differ.push_back(rel.string());
    }
  }
  std::string list;
  for (const auto& d : differ) list += " " + d;
  for (const auto& m : missing) list += " missing:" + m;
  return {differ.empty() && missing.empty() && key_files >= 10,
          std::to_string(compared) + " files compared (" + std::to_string(key_files) +
              " candidate/ranking/report files), rerun with --jobs 2; " +
              (list.empty() ? std::string("all byte-identical") : "differences:" + list)};
}

}  // namespace

int main() {
  std::printf("capforge acceptance suite\n");
  criterion(1, "metric oracle equivalence", 10, metric_oracles);
  criterion(2, "gradient correctness", 30, gradients);
  criterion(3, "RVQ properties", 30, rvq_properties);
  criterion(4, "sampler correctness", 0, sampler);
  criterion(5, "reranking algebra", 0, reranking);

  const fs::path root = fs::current_path() / "acceptance_runs";
  std::vector<Run> runs;
  for (std::uint64_t seed : {1234ull, 2025ull, 31337ull})
    runs.push_back(run_pipeline(root / ("seed_" + std::to_string(seed)), seed, 1));
  const Run rerun = run_pipeline(root / "seed_1234_rerun", 1234, 2);

  criterion(6, "MCM learns", 0, [&] { return mcm_learns(runs[0]); });
  criterion(7, "hybrid vs beam direction", 0, [&] { return direction(runs); });
  criterion(8, "dataset rules", 0, [&] { return dataset_rules(runs[0]); });
  criterion(9, "determinism", 0, [&] { return determinism(runs[0], rerun); });

  std::printf("%s: %d criteria failed\n", failures ? "FAILED" : "ALL PASSED", failures);
  return failures ? 1 : 0;
}
