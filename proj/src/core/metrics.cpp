#include "metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "text.hpp"

namespace capforge {

void EvalCorpus::validate() const {
  std::set<std::string> seen;
  for (const auto& item : items) {
    if (!seen.insert(item.item_id).second) fail(ErrorKind::Data, "duplicate item_id '" + item.item_id + "'");
    if (item.references.empty()) fail(ErrorKind::Data, "item '" + item.item_id + "' has no references");
  }
}

namespace {

double meteor_single(const Tokens& cand, const Tokens& ref) {
  if (cand.empty() || ref.empty()) return 0.0;
  std::vector<char> used(ref.size(), 0);
  std::vector<std::ptrdiff_t> align(cand.size(), -1);
  std::size_t m = 0;
  for (std::size_t i = 0; i < cand.size(); ++i) {
    for (std::size_t j = 0; j < ref.size(); ++j) {
      if (!used[j] && ref[j] == cand[i]) {
        used[j] = 1;
        align[i] = static_cast<std::ptrdiff_t>(j);
        ++m;
        break;
      }
    }
  }
  if (m == 0) return 0.0;
  std::size_t chunks = 0;
  std::ptrdiff_t prev_ref = -2;
  bool prev_matched = false;
  for (std::size_t i = 0; i < cand.size(); ++i) {
    if (align[i] < 0) {
      prev_matched = false;
      continue;
    }
    if (!prev_matched || align[i] != prev_ref + 1) ++chunks;
    prev_ref = align[i];
    prev_matched = true;
  }
  // Fmean * (1 - 0.5 * (chunks / m)^3) over integer counts, divided once.
  const auto mi = static_cast<std::int64_t>(m);
  const auto ch = static_cast<std::int64_t>(chunks);
  const auto num = 10 * (2 * mi * mi * mi - ch * ch * ch);
  const auto den = 2 * mi * mi * static_cast<std::int64_t>(cand.size() + 9 * ref.size());
  return static_cast<double>(num) / static_cast<double>(den);
}

using NgramCounts = std::map<std::string, int>;

// One count table per order 1..max_n.
std::vector<NgramCounts> count_ngrams(const Tokens& tokens, int max_n) {
  std::vector<NgramCounts> out(static_cast<std::size_t>(max_n));
  for (int n = 1; n <= max_n; ++n) {
    const auto un = static_cast<std::size_t>(n);
    for (std::size_t i = 0; i + un <= tokens.size(); ++i) {
      std::string key = tokens[i];
      for (std::size_t k = 1; k < un; ++k) key += ' ' + tokens[i + k];
      ++out[un - 1][key];
    }
  }
  return out;
}

struct TfIdf {
  std::vector<std::map<std::string, double>> vec;
  std::vector<double> norm2;
};

TfIdf to_tfidf(const std::vector<NgramCounts>& counts, const std::map<std::string, int>& df, double log_items) {
  TfIdf t;
  t.vec.resize(counts.size());
  t.norm2.assign(counts.size(), 0.0);
  for (std::size_t n = 0; n < counts.size(); ++n) {
    for (const auto& [g, c] : counts[n]) {
      const auto it = df.find(g);
      const double d = it == df.end() ? 1.0 : std::max(1.0, static_cast<double>(it->second));
      const double w = static_cast<double>(c) * (log_items - std::log(d));
      t.vec[n][g] = w;
      t.norm2[n] += w * w;
    }
  }
  return t;
}

}  // namespace

double meteor_lite(const Tokens& candidate, const std::vector<Tokens>& references) {
  double best = 0.0;
  for (const auto& ref : references) best = std::max(best, meteor_single(candidate, ref));
  return best;
}

CiderResult cider_d(const std::vector<Tokens>& candidates, const std::vector<std::vector<Tokens>>& references,
                    int max_n, double sigma) {
  if (candidates.size() != references.size()) fail(ErrorKind::Metric, "candidate and reference counts differ");
  if (max_n < 1) fail(ErrorKind::Config, "CIDEr n must be >= 1");
  if (!(sigma > 0.0)) fail(ErrorKind::Config, "CIDEr sigma must be > 0");
  CiderResult result;
  if (candidates.empty()) return result;

  std::vector<std::vector<std::vector<NgramCounts>>> ref_counts(references.size());
  std::map<std::string, int> df;
  for (std::size_t i = 0; i < references.size(); ++i) {
    std::set<std::string> present;
    for (const auto& ref : references[i]) {
      ref_counts[i].push_back(count_ngrams(ref, max_n));
      for (const auto& order : ref_counts[i].back())
        for (const auto& [g, c] : order) present.insert(g);
    }
    for (const auto& g : present) ++df[g];
  }
  const double log_items = std::log(static_cast<double>(candidates.size()));

  double total = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const TfIdf cand = to_tfidf(count_ngrams(candidates[i], max_n), df, log_items);
    const double lc = static_cast<double>(candidates[i].size());
    double sum_refs = 0.0;
    for (std::size_t r = 0; r < references[i].size(); ++r) {
      const TfIdf ref = to_tfidf(ref_counts[i][r], df, log_items);
      const double delta = lc - static_cast<double>(references[i][r].size());
      const double lp = std::exp(-(delta * delta) / (2.0 * sigma * sigma));
      double sum_n = 0.0;
      for (std::size_t n = 0; n < cand.vec.size(); ++n) {
        if (cand.norm2[n] == 0.0 || ref.norm2[n] == 0.0) continue;
        double dot = 0.0;
        for (const auto& [g, w] : cand.vec[n]) {
          const auto it = ref.vec[n].find(g);
          if (it != ref.vec[n].end()) dot += std::min(w, it->second) * it->second;
        }
        sum_n += dot / std::sqrt(cand.norm2[n] * ref.norm2[n]) * lp;
      }
      sum_refs += sum_n / static_cast<double>(max_n);
    }
    const double score =
        references[i].empty() ? 0.0 : 10.0 * sum_refs / static_cast<double>(references[i].size());
    result.per_item.push_back(score);
    total += score;
  }
  result.corpus = total / static_cast<double>(candidates.size());
  return result;
}

namespace {

std::set<std::string> content_set(const Tokens& tokens) {
  std::set<std::string> out;
  for (const auto& t : tokens)
    if (!is_stop_word(t)) out.insert(t);
  return out;
}

}  // namespace

double SpiceProxy::score(const Tokens& candidate, const std::vector<Tokens>& references) const {
  const auto cand = content_set(candidate);
  std::set<std::string> refs;
  for (const auto& r : references) {
    const auto s = content_set(r);
    refs.insert(s.begin(), s.end());
  }
  if (cand.empty() || refs.empty()) return 0.0;
  std::size_t hit = 0;
  for (const auto& w : cand) hit += refs.count(w);
  if (hit == 0) return 0.0;
  const double p = static_cast<double>(hit) / static_cast<double>(cand.size());
  const double r = static_cast<double>(hit) / static_cast<double>(refs.size());
  return 2.0 * p * r / (p + r);
}

SpiceResult spice_score(const std::vector<Tokens>& candidates, const std::vector<std::vector<Tokens>>& references,
                        const SpiceBackend& backend, const std::vector<std::string>& item_ids) {
  if (candidates.size() != references.size()) fail(ErrorKind::Metric, "candidate and reference counts differ");
  SpiceResult result;
  double total = 0.0;
  std::size_t ok = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    try {
      const double s = backend.score(candidates[i], references[i]);
      if (!std::isfinite(s)) fail(ErrorKind::Metric, "non-finite score");
      result.per_item.emplace_back(s);
      total += s;
      ++ok;
    } catch (const std::exception& e) {
      result.per_item.emplace_back(std::nullopt);
      const std::string id = i < item_ids.size() ? item_ids[i] : std::to_string(i);
      result.warnings.push_back(backend.name() + " failed on item '" + id + "': " + e.what());
    }
  }
  result.corpus = ok ? total / static_cast<double>(ok) : 0.0;
  return result;
}

double spider(double cider, double spice) { return (cider + spice) / 2.0; }

double apply_fluency_penalty(double score, FluencyFlags flags, double factor) {
  if (!(factor > 0.0 && factor <= 1.0)) fail(ErrorKind::Config, "penalty factor must be in (0, 1]");
  return flags ? score * factor : score;
}

double sentence_similarity(const std::string& candidate, const std::vector<std::string>& references,
                           const TextEmbedder& embedder) {
  if (references.empty()) return 0.0;
  const SeqEmbedding c = embedder.embed(candidate);
  double sum = 0.0;
  for (const auto& r : references) sum += embedding_cosine(c, embedder.embed(r));
  return sum / static_cast<double>(references.size());
}

double fense(const std::string& candidate, const std::vector<std::string>& references, const TextEmbedder& embedder,
             const FluencyDetector& detector, double factor) {
  return apply_fluency_penalty(sentence_similarity(candidate, references, embedder), detector.detect(candidate),
                               factor);
}

std::size_t vocab_size(const std::vector<std::string>& candidates) {
  std::set<std::string> words;
  for (const auto& c : candidates)
    for (auto& t : tokenize(c)) words.insert(std::move(t));
  return words.size();
}

void MetricsConfig::validate() const {
  if (cider_n < 1) fail(ErrorKind::Config, "metrics.cider_n must be >= 1");
  if (!(cider_sigma > 0.0)) fail(ErrorKind::Config, "metrics.cider_sigma must be > 0");
  if (!(penalty_factor > 0.0 && penalty_factor <= 1.0))
    fail(ErrorKind::Config, "metrics.penalty_factor must be in (0, 1]");
}

Json MetricsConfig::to_json() const {
  return Json{{"cider_n", cider_n},
              {"cider_sigma", cider_sigma},
              {"penalty_factor", penalty_factor},
              {"w_enc", w_enc},
              {"w_dec", w_dec}};
}

MetricsConfig MetricsConfig::from_json(const Json& j) {
  MetricsConfig c;
  c.cider_n = j.value("cider_n", c.cider_n);
  c.cider_sigma = j.value("cider_sigma", c.cider_sigma);
  c.penalty_factor = j.value("penalty_factor", c.penalty_factor);
  c.w_enc = j.value("w_enc", c.w_enc);
  c.w_dec = j.value("w_dec", c.w_dec);
  return c;
}

namespace {

Json optional_json(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }

}  // namespace

Json MetricReport::to_json() const {
  Json items_json = Json::array();
  for (const auto& it : items) {
    items_json.push_back(Json{{"item_id", it.item_id},
                              {"meteor", it.meteor},
                              {"cider_d", it.cider_d},
                              {"spice", optional_json(it.spice)},
                              {"spider", optional_json(it.spider)},
                              {"spider_fl", optional_json(it.spider_fl)},
                              {"similarity", it.similarity},
                              {"fense", it.fense},
                              {"flags", flag_names(it.flags)}});
  }
  return Json{{"corpus",
               {{"meteor", meteor},
                {"cider_d", cider_d},
                {"spice", spice},
                {"spider", spider},
                {"spider_fl", spider_fl},
                {"fense", fense},
                {"vocab", vocab}}},
              {"labels", {{"meteor", "meteor_lite"}, {"spice", spice_label}, {"fense", fense_label}}},
              {"items", items_json},
              {"config", config.to_json()},
              {"warnings", warnings}};
}

MetricReport evaluate(const EvalCorpus& corpus, const MetricsConfig& config, const SpiceBackend& spice_backend,
                      const TextEmbedder& embedder, const FluencyDetector& detector) {
  config.validate();
  corpus.validate();
  std::vector<const EvalItem*> items;
  for (const auto& it : corpus.items) items.push_back(&it);
  std::sort(items.begin(), items.end(), [](const EvalItem* a, const EvalItem* b) { return a->item_id < b->item_id; });

  std::vector<Tokens> cands;
  std::vector<std::vector<Tokens>> refs;
  std::vector<std::string> ids, raw_cands;
  for (const EvalItem* it : items) {
    cands.push_back(tokenize(it->candidate));
    std::vector<Tokens> r;
    for (const auto& ref : it->references) r.push_back(tokenize(ref));
    refs.push_back(std::move(r));
    ids.push_back(it->item_id);
    raw_cands.push_back(it->candidate);
  }

  MetricReport report;
  report.config = config;
  report.spice_label = spice_backend.name();
  report.fense_label = embedder.name();

  const CiderResult cider = cider_d(cands, refs, config.cider_n, config.cider_sigma);
  const SpiceResult sp = spice_score(cands, refs, spice_backend, ids);
  report.warnings = sp.warnings;

  double s_meteor = 0.0, s_fense = 0.0, s_spice = 0.0, s_spider = 0.0, s_spider_fl = 0.0;
  std::size_t n_spice = 0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    ItemMetrics m;
    m.item_id = ids[i];
    m.flags = detector.detect(cands[i]);
    m.meteor = meteor_lite(cands[i], refs[i]);
    m.cider_d = cider.per_item[i];
    m.similarity = sentence_similarity(items[i]->candidate, items[i]->references, embedder);
    m.fense = apply_fluency_penalty(m.similarity, m.flags, config.penalty_factor);
    if (sp.per_item[i]) {
      m.spice = *sp.per_item[i];
      m.spider = spider(m.cider_d, *m.spice);
      m.spider_fl = apply_fluency_penalty(*m.spider, m.flags, config.penalty_factor);
      s_spice += *m.spice;
      s_spider += *m.spider;
      s_spider_fl += *m.spider_fl;
      ++n_spice;
    }
    s_meteor += m.meteor;
    s_fense += m.fense;
    report.items.push_back(std::move(m));
  }
  if (!items.empty()) {
    const double n = static_cast<double>(items.size());
    report.meteor = s_meteor / n;
    report.cider_d = cider.corpus;
    report.fense = s_fense / n;
  }
  if (n_spice) {
    const double n = static_cast<double>(n_spice);
    report.spice = s_spice / n;
    report.spider = s_spider / n;
    report.spider_fl = s_spider_fl / n;
  }
  if (n_spice < items.size())
    report.warnings.push_back(std::to_string(items.size() - n_spice) + " item(s) excluded from " +
                              spice_backend.name() + " corpus means");
  report.vocab = vocab_size(raw_cands);
  return report;
}

}  // namespace capforge
