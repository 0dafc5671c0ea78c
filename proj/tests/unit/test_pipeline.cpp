#include <doctest.h>

#include <filesystem>

#include "dataio.hpp"
#include "pipeline.hpp"

using namespace capforge;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "capforge_test_pipeline" / name;
  fs::remove_all(p);
  return p;
}

ExperimentConfig small(const fs::path& out) {
  ExperimentConfig c = ExperimentConfig::load(fs::path(CAPFORGE_CONFIG_DIR) / "small.json");
  c.set("paths.out_dir", out.string());
  return c;
}

}  // namespace

TEST_CASE("config merging and overrides") {
  ExperimentConfig c;
  CHECK(c.json() == ExperimentConfig::defaults());
  CHECK(c.rerank_weights().encoder == 0.6);
  CHECK(c.nucleus_options().top_p == 0.95);
  CHECK(c.nucleus_options().temperature == 0.5);
  CHECK(c.nucleus_options().n_candidates == 30);

  c.set("train.lr", "0.01");
  CHECK(c.train_config().lr == 0.01);
  c.set("rerank.mode", "encoder");
  CHECK(c.rerank_mode() == RerankMode::Encoder);
  c.set("codec.preset", "encodec8");
  CHECK(c.codec_config().n_q == 8);
  c.set("dataset.split_fractions", "[1, 0, 0]");
  CHECK_NOTHROW(c.validate());

  CHECK_THROWS_AS(c.set("train.nope", "1"), Error);
  CHECK_THROWS_AS(c.set("train.lr", "\"fast\""), Error);
  CHECK_THROWS_AS(c.set("train.lr", "{"), Error);

  c.set("rerank.w_enc", "0.7");
  CHECK_THROWS_AS(c.validate(), Error);
  c.set("rerank.w_dec", "0.3");
  CHECK_NOTHROW(c.validate());

  try {
    ExperimentConfig::from_json(Json{{"world", {{"colour", 3}}}});
    FAIL("expected a config error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Config);
    CHECK(std::string(e.what()).find("world.colour") != std::string::npos);
  }
}

TEST_CASE("config hash") {
  ExperimentConfig a, b;
  CHECK(a.hash() == b.hash());
  CHECK(a.hash().size() == 16);
  b.set("paths.out_dir", "/elsewhere");
  CHECK(a.hash() == b.hash());
  b.set_seed(99);
  CHECK(a.hash() != b.hash());
  const ExperimentConfig c = ExperimentConfig::from_json(Json::parse(a.json().dump()));
  CHECK(c.hash() == a.hash());
}

TEST_CASE("end-to-end on the small config") {
  const fs::path out = scratch("e2e");
  Pipeline p(small(out));
  p.run("all");
  for (const char* f : {"data/finetune_manifest.jsonl", "data/pretrain_manifest.jsonl", "data/blocklist.txt",
                        "codec/codec.json", "codec/grids.jsonl", "model/checkpoint.json", "model/loss.csv",
                        "model/train_log.json", "gen/candidates_beam.jsonl", "gen/candidates_nucleus.jsonl",
                        "rerank/ranked_hybrid.jsonl", "eval/report_hybrid.json", "eval/report_beam.json",
                        "report.json", "report.txt"})
    CHECK_MESSAGE(fs::exists(out / f), f);

  const auto ft = load_manifest(out / "data/finetune_manifest.jsonl");
  const auto pt = load_manifest(out / "data/pretrain_manifest.jsonl");
  for (const auto& e : pt) {
    CHECK(e.duration_s >= 1.0);
    CHECK(e.duration_s <= 30.0);
    for (const auto& f : ft) CHECK(e.id != f.id);
  }

  const Json log = Json::parse(read_text(out / "model/train_log.json"));
  CHECK(log.at("stage_boundaries").size() == 2);
  CHECK(log.at("config_hash") == p.config().hash());

  const Json table = p.report();
  CHECK(table.at("rows").size() == 4);
  CHECK_FALSE(table.at("hash_mismatch").get<bool>());
  CHECK(format_report_table(table).find("hybrid") != std::string::npos);

  SUBCASE("reports from different configs are refused unless allowed") {
    const fs::path other = scratch("other");
    ExperimentConfig oc = small(other);
    oc.set_seed(8);
    Pipeline q(oc);
    q.run("all");
    const std::vector<fs::path> mixed{out / "eval/report_beam.json", other / "eval/report_hybrid.json"};
    try {
      p.report(mixed);
      FAIL("expected a config error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Config);
    }
    const Json allowed = p.report(mixed, true);
    CHECK(allowed.at("hash_mismatch").get<bool>());
  }
}

TEST_CASE("stages fail cleanly when inputs are missing") {
  const fs::path out = scratch("missing");
  Pipeline p(small(out));
  try {
    p.run("train");
    FAIL("expected a data error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Data);
    CHECK(std::string(e.what()).find("synth-data") != std::string::npos);
  }
  CHECK_THROWS_AS(p.run("dance"), Error);
}

TEST_CASE("a divergent run raises a training error and keeps the partial trace") {
  const fs::path out = scratch("diverge");
  ExperimentConfig c = small(out);
  c.set("train.lr", "10");
  Pipeline p(c);
  p.run("synth-data");
  p.run("rvq");
  try {
    p.run("train");
    FAIL("expected divergence");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Training);
    CHECK(std::string(e.what()).find("step") != std::string::npos);
  }
  CHECK(fs::exists(out / "model/loss.csv"));
}

TEST_CASE("scoring rows") {
  const std::vector<Json> rows{Json{{"item_id", "x"}, {"candidate", "a dog barks"}, {"references", {"a dog"}}}};
  const EvalCorpus c = eval_corpus_from_jsonl(rows);
  REQUIRE(c.items.size() == 1);
  CHECK(c.items[0].references.size() == 1);
  CHECK_THROWS_AS(eval_corpus_from_jsonl({Json{{"item_id", "x"}}}), Error);
}
