#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "model.hpp"

namespace capforge {

struct TrainConfig {
  double lr = 3e-4;
  int batch_size = 16;
  double mcm_ratio = 0.15;
  double mcm_weight = 1.0;  // lambda
  double clip_norm = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double max_loss = 1e3;  // a finite loss above this also counts as divergence
  std::uint64_t seed = 0;

  void validate() const;
};

/// A clip ready for training: codes, clip embedding, tokenised references.
struct TrainItem {
  std::string id;
  CodecGrid grid;
  SeqEmbedding seq;
  std::vector<std::vector<int>> captions;
};

struct TrainStage {
  std::string name;
  std::vector<TrainItem> items;
  int steps = 0;
};

struct TraceRow {
  int step = 0;
  std::string stage;
  LossParts loss;
};

struct TrainResult {
  std::vector<TraceRow> trace;
  std::vector<std::pair<std::string, int>> stage_starts;  // (stage, first step)
};

class Adam {
 public:
  Adam(const std::vector<Mat>& params, double beta1, double beta2, double eps);
  void step(std::vector<Mat>& params, const std::vector<Mat>& grads, double lr);
  void reset();

 private:
  double beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<Mat> m_, v_;
};

/// Scales grads in place so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
double clip_global_norm(std::vector<Mat>& grads, double max_norm);

/// Runs the stages in order. Optimizer moments are reset at each stage start.
/// Throws a training error naming the step when the loss diverges.
TrainResult train(CaptionModel& model, std::span<const TrainStage> stages, const TrainConfig& config,
                  const std::function<void(const TraceRow&)>& on_step = {});

/// CSV with header step,total,caption_ce,mcm_ce,stage.
std::string trace_to_csv(const std::vector<TraceRow>& trace);

struct McmAccuracy {
  std::size_t correct = 0;
  std::size_t total = 0;
  std::vector<double> per_level;

  double accuracy() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

/// Argmax masked-code prediction accuracy with column masks drawn from `seed`.
McmAccuracy mcm_accuracy(const CaptionModel& model, std::span<const TrainItem> items, double ratio, std::uint64_t seed);

}  // namespace capforge
