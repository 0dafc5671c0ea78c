#pragma once

#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "codec.hpp"
#include "common.hpp"
#include "io.hpp"
#include "world.hpp"

namespace capforge {

/// Word-level caption vocabulary with reserved special tokens.
class CaptionTokenizer {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;

  CaptionTokenizer() = default;
  explicit CaptionTokenizer(const std::vector<std::string>& words);

  std::vector<int> encode(const std::string& caption) const;  // no BOS/EOS
  std::string decode(std::span<const int> ids) const;          // drops special tokens
  const std::string& word(int id) const { return words_.at(static_cast<std::size_t>(id)); }
  int id(const std::string& word) const;  // kUnk when missing
  int size() const { return static_cast<int>(words_.size()); }
  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

struct ModelConfig {
  int n_q = 4;
  int codebook_size = 64;
  int seq_dim = 13;
  int vocab_size = 64;
  int hidden = 64;
  int heads = 2;
  int ffn = 128;
  int enc_layers = 2;
  int dec_layers = 2;

  void validate() const;
  Json to_json() const;
  static ModelConfig from_json(const Json& j);
};

/// Masked copy of a grid: the listed columns hold the MASK code (index K)
/// in every level.
struct MaskedGrid {
  CodecGrid grid;
  std::vector<int> columns;  // ascending
};

/// Masks exactly round(ratio * T) whole timestep columns.
MaskedGrid apply_mcm_mask(const CodecGrid& grid, double ratio, Rng& rng);
MaskedGrid mask_columns(const CodecGrid& grid, std::vector<int> columns);

/// Sinusoidal position row for position t.
RowVec sinusoid(int t, int width);

struct LossParts {
  double total = 0.0;
  double caption_ce = 0.0;
  double mcm_ce = 0.0;
};

/// total = caption CE + lambda * MCM CE, both mean natural-log cross entropies.
/// mcm_logits[q] is (masked columns x K); mcm_targets[q] holds the true codes.
/// If gradients are requested they are written to the optional outputs.
LossParts joint_loss(const Mat& caption_logits, std::span<const int> caption_targets,
                     const std::vector<Mat>& mcm_logits, const std::vector<std::vector<int>>& mcm_targets,
                     double lambda, Mat* d_caption = nullptr, std::vector<Mat>* d_mcm = nullptr);

/// One training example. MCM labels are read from `grid` at `masked_cols`.
struct Example {
  CodecGrid grid;
  SeqEmbedding seq;
  std::vector<int> caption;  // token ids without BOS/EOS
  std::vector<int> masked_cols;
};

struct ForwardOutput {
  Mat caption_logits;            // prefix length x vocab
  std::vector<Mat> mcm_logits;   // per level: masked columns x K
  Mat memory;                    // encoder output, (T+1) x hidden
};

class DecodeState;
struct ModelLayout;

class CaptionModel {
 public:
  CaptionModel() = default;
  /// Weights ~ N(0, 0.02^2), layer-norm gains 1, biases 0.
  CaptionModel(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  std::vector<Mat>& params() { return params_; }
  const std::vector<Mat>& params() const { return params_; }
  const std::vector<std::string>& param_names() const { return names_; }
  std::size_t num_parameters() const;
  int param_index(const std::string& name) const;

  /// Encoder input rows: row 0 projects the sequence embedding; row t >= 1
  /// sums the level tables at column t-1 plus the position-t sinusoid.
  Mat compose_inputs(const CodecGrid& grid, const SeqEmbedding& seq) const;

  /// prefix must begin with BOS. masked_cols are grid columns (0-based).
  ForwardOutput forward(const Mat& encoder_inputs, std::span<const int> prefix,
                        std::span<const int> masked_cols) const;

  /// Joint loss for one example; accumulates scale * dLoss/dparams into grads
  /// when grads is non-null.
  LossParts loss(const Example& ex, double lambda, std::vector<Mat>* grads = nullptr, double scale = 1.0) const;

  /// Mean of per-example losses over the batch, and the matching gradient.
  LossParts batch_loss(std::span<const Example> batch, double lambda, std::vector<Mat>* grads = nullptr) const;

  std::vector<Mat> zero_grads() const;

  /// Incremental decoding state positioned after BOS.
  DecodeState begin_decode(const Mat& encoder_inputs) const;

  Json to_json() const;
  static CaptionModel from_json(const Json& j);

  const ModelLayout& layout() const { return *layout_; }

 private:
  void build_layout();

  ModelConfig config_;
  std::vector<std::string> names_;
  std::vector<Mat> params_;
  std::shared_ptr<const ModelLayout> layout_;

  friend class DecodeState;
};

/// Decoder state holding self-attention keys/values for the emitted prefix.
/// Copyable, so beams can branch.
class DecodeState {
 public:
  /// Log-softmax of the next-token distribution given the current prefix.
  const RowVec& log_probs() const { return log_probs_; }
  void advance(int token);
  int length() const { return position_; }  // tokens consumed, including BOS

 private:
  friend class CaptionModel;
  const CaptionModel* model_ = nullptr;
  std::shared_ptr<const std::vector<std::pair<Mat, Mat>>> cross_kv_;  // per decoder layer
  std::vector<Mat> self_k_, self_v_;                                  // per decoder layer
  int position_ = 0;
  RowVec log_probs_;
};

/// Analytic gradient vs central finite differences. Returns the maximum over
/// parameter tensors of ||g_analytic - g_numeric|| / (||g_analytic|| + ||g_numeric||),
/// with 0 for tensors where both norms sum below 1e-8. Key biases, for one,
/// have an exactly zero gradient, so only rounding noise is left there.
struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_tensor;
  double mcm_head_grad_max_abs = 0.0;  // max |analytic grad| over MCM heads
};
GradCheckResult grad_check(const CaptionModel& model, std::span<const Example> batch, double lambda, double eps);

}  // namespace capforge
