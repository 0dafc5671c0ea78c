#include "train.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>

namespace capforge {

void TrainConfig::validate() const {
  if (!(lr >= 0.0)) fail(ErrorKind::Config, "train lr must be >= 0");
  if (batch_size < 1) fail(ErrorKind::Config, "train batch_size must be >= 1");
  if (!(mcm_ratio >= 0.0 && mcm_ratio <= 1.0)) fail(ErrorKind::Config, "mcm_ratio must be in [0, 1]");
  if (!(mcm_weight >= 0.0)) fail(ErrorKind::Config, "mcm_weight must be >= 0");
  if (!(clip_norm > 0.0)) fail(ErrorKind::Config, "clip_norm must be > 0");
}

Adam::Adam(const std::vector<Mat>& params, double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params) {
    m_.push_back(Mat::Zero(p.rows(), p.cols()));
    v_.push_back(Mat::Zero(p.rows(), p.cols()));
  }
}

void Adam::reset() {
  t_ = 0;
  for (auto& m : m_) m.setZero();
  for (auto& v : v_) v.setZero();
}

void Adam::step(std::vector<Mat>& params, const std::vector<Mat>& grads, double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grads[i];
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grads[i].cwiseProduct(grads[i]);
    params[i].array() -= lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
  }
}

double clip_global_norm(std::vector<Mat>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) sq += g.squaredNorm();
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (auto& g : grads) g *= s;
  }
  return norm;
}

TrainResult train(CaptionModel& model, std::span<const TrainStage> stages, const TrainConfig& config,
                  const std::function<void(const TraceRow&)>& on_step) {
  config.validate();
  TrainResult result;
  Adam adam(model.params(), config.beta1, config.beta2, config.adam_eps);
  Rng rng(derive_seed(config.seed, 0x747261696eULL));
  int step = 0;

  for (const auto& stage : stages) {
    if (stage.steps <= 0) continue;
    if (stage.items.empty()) fail(ErrorKind::Config, "training stage '" + stage.name + "' has no items");
    adam.reset();
    result.stage_starts.emplace_back(stage.name, step);

    std::vector<std::size_t> order(stage.items.size());
    std::size_t cursor = order.size();
    for (int s = 0; s < stage.steps; ++s, ++step) {
      std::vector<Example> batch;
      batch.reserve(static_cast<std::size_t>(config.batch_size));
      for (int b = 0; b < config.batch_size; ++b) {
        if (cursor == order.size()) {
          std::iota(order.begin(), order.end(), 0);
          for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
          cursor = 0;
        }
        const TrainItem& item = stage.items[order[cursor++]];
        if (item.captions.empty()) fail(ErrorKind::Data, "training item '" + item.id + "' has no captions");
        Example ex;
        ex.grid = item.grid;
        ex.seq = item.seq;
        ex.caption = item.captions[uniform_index(rng, item.captions.size())];
        ex.masked_cols = apply_mcm_mask(item.grid, config.mcm_ratio, rng).columns;
        batch.push_back(std::move(ex));
      }

      std::vector<Mat> grads = model.zero_grads();
      const LossParts parts = model.batch_loss(batch, config.mcm_weight, &grads);
      TraceRow row{step, stage.name, parts};
      if (!std::isfinite(parts.total) || parts.total > config.max_loss) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "training diverged at step %d (stage %s): loss %g", step, stage.name.c_str(),
                      parts.total);
        fail(ErrorKind::Training, buf);
      }
      result.trace.push_back(row);
      if (on_step) on_step(row);
      clip_global_norm(grads, config.clip_norm);
      adam.step(model.params(), grads, config.lr);
    }
  }
  return result;
}

std::string trace_to_csv(const std::vector<TraceRow>& trace) {
  std::string out = "step,total,caption_ce,mcm_ce,stage\n";
  char buf[256];
  for (const auto& r : trace) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%s\n", r.step, r.loss.total, r.loss.caption_ce,
                  r.loss.mcm_ce, r.stage.c_str());
    out += buf;
  }
  return out;
}

McmAccuracy mcm_accuracy(const CaptionModel& model, std::span<const TrainItem> items, double ratio,
                         std::uint64_t seed) {
  McmAccuracy acc;
  const int n_q = model.config().n_q;
  std::vector<std::size_t> level_correct(static_cast<std::size_t>(n_q), 0);
  std::size_t level_total = 0;
  Rng rng(derive_seed(seed, 0x6d636d616363ULL));
  const std::vector<int> bos{CaptionTokenizer::kBos};
  for (const auto& item : items) {
    MaskedGrid masked = apply_mcm_mask(item.grid, ratio, rng);
    if (masked.columns.empty()) continue;
    const Mat x = model.compose_inputs(masked.grid, item.seq);
    const ForwardOutput out = model.forward(x, bos, masked.columns);
    for (int q = 0; q < n_q; ++q) {
      const Mat& logits = out.mcm_logits[static_cast<std::size_t>(q)];
      for (std::size_t j = 0; j < masked.columns.size(); ++j) {
        Eigen::Index arg = 0;
        logits.row(static_cast<Eigen::Index>(j)).maxCoeff(&arg);
        const bool hit =
            arg == item.grid.codes[static_cast<std::size_t>(q)][static_cast<std::size_t>(masked.columns[j])];
        acc.correct += hit;
        level_correct[static_cast<std::size_t>(q)] += hit;
        ++acc.total;
      }
    }
    level_total += masked.columns.size();
  }
  for (auto c : level_correct)
    acc.per_level.push_back(level_total ? static_cast<double>(c) / static_cast<double>(level_total) : 0.0);
  return acc;
}

}  // namespace capforge
