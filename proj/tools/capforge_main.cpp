// capforge: command-line front end over the C API.
#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "capforge/capforge.h"

namespace {

struct Common {
  std::string config;
  std::vector<std::string> sets;
  int jobs = 1;
  long long seed = -1;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "experiment config (JSON)")->check(CLI::ExistingFile);
  sub->add_option("--set", c.sets, "override a config value, key=value (repeatable)");
  sub->add_option("--jobs", c.jobs, "worker threads")->check(CLI::PositiveNumber);
  sub->add_option("--seed", c.seed, "override the experiment seed")->check(CLI::NonNegativeNumber);
}

int report_failure(cf_status s) {
  std::fprintf(stderr, "capforge: %s\n", cf_last_error());
  return s == CF_ERR_INTERNAL ? 1 : static_cast<int>(s);
}

void log_line(const char* line, void*) { std::fprintf(stderr, "[capforge] %s\n", line); }

struct PipelineHandle {
  cf_pipeline* p = nullptr;
  ~PipelineHandle() { cf_pipeline_free(p); }
};

cf_status open_pipeline(const Common& c, PipelineHandle& h) {
  cf_status s = cf_pipeline_create(c.config.empty() ? nullptr : c.config.c_str(), &h.p);
  if (s != CF_OK) return s;
  for (const auto& kv : c.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) {
      std::fprintf(stderr, "capforge: --set expects key=value, got '%s'\n", kv.c_str());
      return CF_ERR_CONFIG;
    }
    s = cf_pipeline_set(h.p, kv.substr(0, eq).c_str(), kv.substr(eq + 1).c_str());
    if (s != CF_OK) return s;
  }
  if (c.seed >= 0 && (s = cf_pipeline_set_seed(h.p, static_cast<uint64_t>(c.seed))) != CF_OK) return s;
  if ((s = cf_pipeline_set_jobs(h.p, c.jobs)) != CF_OK) return s;
  return cf_pipeline_set_logger(h.p, log_line, nullptr);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"capforge: synthetic audio-captioning pipeline"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(cf_version()));

  Common common;
  struct StageCmd {
    const char* name;
    const char* help;
  };
  const std::vector<StageCmd> stages{
      {"synth-data", "render the synthetic dataset, filter, dedup and split it"},
      {"rvq", "fit the residual quantizer and encode every clip"},
      {"train", "two-stage caption + masked-code training"},
      {"generate", "beam and nucleus candidates for the test split"},
      {"rerank", "fluency filter and encoder/decoder/hybrid ranking"},
      {"evaluate", "metric reports for every system"},
      {"all", "run every stage in order"},
  };
  std::vector<std::pair<std::string, CLI::App*>> stage_cmds;
  for (const auto& s : stages) {
    CLI::App* sub = app.add_subcommand(s.name, s.help);
    add_common(sub, common);
    stage_cmds.emplace_back(s.name, sub);
  }

  CLI::App* report = app.add_subcommand("report", "compare systems side by side");
  add_common(report, common);
  std::vector<std::string> report_inputs;
  bool allow_mismatch = false;
  report->add_option("--inputs", report_inputs, "report files (default: this run's reports)");
  report->add_flag("--allow-hash-mismatch", allow_mismatch, "compare reports from different configs");

  CLI::App* config = app.add_subcommand("config", "print the merged config and its hash");
  add_common(config, common);

  CLI::App* score = app.add_subcommand("score", "score a JSONL file of {item_id, candidate, references}");
  std::string score_in, score_out;
  score->add_option("input", score_in, "input JSONL")->required()->check(CLI::ExistingFile);
  score->add_option("-o,--output", score_out, "write the report here instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    // Usage errors share the config exit code.
    return e.get_exit_code() == 0 ? 0 : CF_ERR_CONFIG;
  }

  if (score->parsed()) {
    char* json = nullptr;
    const cf_status s = cf_evaluate_jsonl(score_in.c_str(), score_out.empty() ? nullptr : score_out.c_str(), &json);
    if (s != CF_OK) return report_failure(s);
    if (score_out.empty()) std::printf("%s\n", json);
    cf_string_free(json);
    return 0;
  }

  PipelineHandle h;
  if (const cf_status s = open_pipeline(common, h); s != CF_OK) return report_failure(s);

  if (config->parsed()) {
    char *json = nullptr, *hash = nullptr;
    cf_status s = cf_pipeline_config_json(h.p, &json);
    if (s == CF_OK) s = cf_pipeline_config_hash(h.p, &hash);
    if (s != CF_OK) return report_failure(s);
    std::printf("%s\nconfig_hash %s\n", json, hash);
    cf_string_free(json);
    cf_string_free(hash);
    return 0;
  }

  if (report->parsed()) {
    std::vector<const char*> inputs;
    for (const auto& f : report_inputs) inputs.push_back(f.c_str());
    char* text = nullptr;
    const cf_status s =
        cf_pipeline_report(h.p, inputs.data(), inputs.size(), allow_mismatch ? 1 : 0, &text, nullptr);
    if (s != CF_OK) return report_failure(s);
    std::printf("%s", text);
    cf_string_free(text);
    return 0;
  }

  for (const auto& [name, sub] : stage_cmds) {
    if (!sub->parsed()) continue;
    if (const cf_status s = cf_pipeline_run(h.p, name.c_str()); s != CF_OK) return report_failure(s);
    if (name == "all" || name == "evaluate") {
      char* text = nullptr;
      if (const cf_status s = cf_pipeline_report(h.p, nullptr, 0, 0, &text, nullptr); s != CF_OK)
        return report_failure(s);
      std::printf("%s", text);
      cf_string_free(text);
    }
  }
  return 0;
}
