// Independent reference implementations used by the unit and acceptance tests.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "decoding.hpp"

namespace capforge::testing {

/// Decoder whose next-token distribution is looked up by prefix.
/// Prefixes missing from the table get `fallback`.
class TableCursor final : public DecoderCursor {
 public:
  using Table = std::map<std::vector<int>, std::vector<double>>;

  TableCursor(std::shared_ptr<const Table> table, std::vector<double> fallback)
      : table_(std::move(table)), fallback_(std::move(fallback)) {}

  std::unique_ptr<DecoderCursor> clone() const override { return std::make_unique<TableCursor>(*this); }
  void advance(int token) override { prefix_.push_back(token); }
  RowVec log_probs() const override {
    const auto it = table_->find(prefix_);
    const std::vector<double>& p = it == table_->end() ? fallback_ : it->second;
    RowVec out(static_cast<Eigen::Index>(p.size()));
    for (std::size_t i = 0; i < p.size(); ++i) out[static_cast<Eigen::Index>(i)] = std::log(p[i]);
    return out;
  }

 private:
  std::shared_ptr<const Table> table_;
  std::vector<double> fallback_;
  std::vector<int> prefix_;
};

struct ScoredSequence {
  std::vector<int> tokens;
  double logprob = 0.0;
};

/// Every complete sequence (ends in eos, or reaches max_len) with its total
/// log-probability, best first; ties ordered lexicographically.
inline std::vector<ScoredSequence> enumerate_sequences(const DecoderCursor& start, int eos, int max_len) {
  std::vector<ScoredSequence> out;
  std::function<void(const DecoderCursor&, std::vector<int>&, double)> walk =
      [&](const DecoderCursor& cur, std::vector<int>& prefix, double lp) {
        const RowVec step = cur.log_probs();
        for (Eigen::Index v = 0; v < step.size(); ++v) {
          prefix.push_back(static_cast<int>(v));
          const double total = lp + step[v];
          if (v == eos || static_cast<int>(prefix.size()) == max_len) {
            out.push_back({prefix, total});
          } else {
            auto next = cur.clone();
            next->advance(static_cast<int>(v));
            walk(*next, prefix, total);
          }
          prefix.pop_back();
        }
      };
  std::vector<int> prefix;
  walk(start, prefix, 0.0);
  std::sort(out.begin(), out.end(), [](const ScoredSequence& a, const ScoredSequence& b) {
    if (a.logprob != b.logprob) return a.logprob > b.logprob;
    return a.tokens < b.tokens;
  });
  return out;
}

using TokenList = std::vector<std::string>;

/// CIDEr-D computed the slow way: one global n-gram dictionary per order,
/// dense tf-idf vectors and a direct cosine.
inline std::vector<double> dense_cider(const std::vector<TokenList>& cands,
                                       const std::vector<std::vector<TokenList>>& refs, int max_n, double sigma) {
  const std::size_t items = cands.size();
  std::vector<double> scores(items, 0.0);
  std::vector<std::vector<double>> per_order(items, std::vector<double>());
  auto grams_of = [](const TokenList& t, int n) {
    std::vector<std::vector<std::string>> g;
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= t.size(); ++i)
      g.emplace_back(t.begin() + static_cast<std::ptrdiff_t>(i), t.begin() + static_cast<std::ptrdiff_t>(i) + n);
    return g;
  };
  for (int n = 1; n <= max_n; ++n) {
    std::map<std::vector<std::string>, std::size_t> dict;
    auto index_all = [&](const TokenList& t) {
      for (auto& g : grams_of(t, n)) dict.emplace(g, dict.size());
    };
    for (const auto& c : cands) index_all(c);
    for (const auto& rs : refs)
      for (const auto& r : rs) index_all(r);
    const std::size_t dim = dict.size();

    std::vector<double> df(dim, 0.0);
    for (const auto& rs : refs) {
      std::vector<char> seen(dim, 0);
      for (const auto& r : rs)
        for (auto& g : grams_of(r, n)) seen[dict.at(g)] = 1;
      for (std::size_t k = 0; k < dim; ++k) df[k] += seen[k];
    }
    auto dense = [&](const TokenList& t) {
      std::vector<double> v(dim, 0.0);
      for (auto& g : grams_of(t, n)) v[dict.at(g)] += 1.0;
      for (std::size_t k = 0; k < dim; ++k)
        v[k] *= std::log(static_cast<double>(items)) - std::log(std::max(1.0, df[k]));
      return v;
    };
    for (std::size_t i = 0; i < items; ++i) {
      const std::vector<double> c = dense(cands[i]);
      double acc = 0.0;
      for (const auto& r : refs[i]) {
        const std::vector<double> rv = dense(r);
        double dot = 0.0, nc = 0.0, nr = 0.0;
        for (std::size_t k = 0; k < dim; ++k) {
          dot += std::min(c[k], rv[k]) * rv[k];
          nc += c[k] * c[k];
          nr += rv[k] * rv[k];
        }
        double cos = (nc > 0.0 && nr > 0.0) ? dot / (std::sqrt(nc) * std::sqrt(nr)) : 0.0;
        const double delta = static_cast<double>(cands[i].size()) - static_cast<double>(r.size());
        cos *= std::exp(-delta * delta / (2.0 * sigma * sigma));
        acc += cos;
      }
      scores[i] += acc / static_cast<double>(refs[i].size());
    }
  }
  for (auto& s : scores) s = 10.0 * s / static_cast<double>(max_n);
  return scores;
}

/// Minimum k-means SSE over every assignment of points to k clusters.
inline double exhaustive_kmeans_sse(const Mat& points, int k) {
  const auto n = static_cast<std::size_t>(points.rows());
  std::vector<int> assign(n, 0);
  double best = std::numeric_limits<double>::infinity();
  while (true) {
    double sse = 0.0;
    for (int c = 0; c < k; ++c) {
      RowVec mean = RowVec::Zero(points.cols());
      int count = 0;
      for (std::size_t i = 0; i < n; ++i)
        if (assign[i] == c) {
          mean += points.row(static_cast<Eigen::Index>(i));
          ++count;
        }
      if (count == 0) continue;
      mean /= count;
      for (std::size_t i = 0; i < n; ++i)
        if (assign[i] == c) sse += (points.row(static_cast<Eigen::Index>(i)) - mean).squaredNorm();
    }
    best = std::min(best, sse);
    std::size_t pos = 0;
    while (pos < n && ++assign[pos] == k) assign[pos++] = 0;
    if (pos == n) break;
  }
  return best;
}

}  // namespace capforge::testing
