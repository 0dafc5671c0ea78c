#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "common.hpp"
#include "io.hpp"

namespace capforge {

/// Real-valued frame sequence standing in for an audio clip.
struct FeatureSeq {
  Mat frames;  // T x d
  double frame_rate_hz = 1.0;

  std::size_t length() const { return static_cast<std::size_t>(frames.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(frames.cols()); }
};

struct CodecConfig {
  std::string preset = "custom";
  int n_q = 1;
  int codebook_size = 1;
  int dim = 1;
  double frame_rate_hz = 75.0;

  void validate() const;
};

/// Named presets: encodec16, encodec8, encodec32, dac32, desk4.
/// The frame dimension is not part of a preset and is filled in by the caller.
CodecConfig codec_preset(const std::string& name, int dim);
std::vector<std::string> codec_preset_names();

/// n_q x T matrix of code indices.
struct CodecGrid {
  std::vector<std::vector<std::int32_t>> codes;  // [level][t]
  int codebook_size = 0;

  std::size_t num_levels() const { return codes.size(); }
  std::size_t length() const { return codes.empty() ? 0 : codes.front().size(); }
};

struct KMeansOptions {
  int max_iterations = 25;
  double tolerance = 1e-6;  // relative SSE improvement
};

/// Lloyd's k-means with k-means++ seeding. Rows of `points` are samples.
/// Returns the K x d centroid matrix.
Mat kmeans(const Mat& points, int k, Rng& rng, const KMeansOptions& options = {});

/// Index of the nearest row of `centroids`; ties go to the lowest index.
int nearest_centroid(const Mat& centroids, const Eigen::Ref<const RowVec>& x);

class RvqCodec {
 public:
  RvqCodec() = default;
  RvqCodec(CodecConfig config, std::vector<Mat> codebooks);

  /// Greedy residual fit: level q is k-means over the residuals left by
  /// levels 0..q-1. Level q draws from an rng stream derived from (seed, q).
  static RvqCodec fit(std::span<const FeatureSeq> corpus, const CodecConfig& config,
                      std::uint64_t seed, const KMeansOptions& options = {});

  CodecGrid encode(const FeatureSeq& seq) const;
  FeatureSeq decode(const CodecGrid& grid) const;

  /// Codec restricted to its first `levels` codebooks.
  RvqCodec truncated(int levels) const;

  const CodecConfig& config() const { return config_; }
  const std::vector<Mat>& codebooks() const { return codebooks_; }

  Json to_json() const;
  static RvqCodec from_json(const Json& j);

 private:
  CodecConfig config_;
  std::vector<Mat> codebooks_;  // each K x d
};

/// Mean over frames of the squared reconstruction error (summed over d).
double reconstruction_mse(const RvqCodec& codec, std::span<const FeatureSeq> corpus);

/// JSONL row {id, n_q, T, codes}.
Json grid_to_json(const std::string& id, const CodecGrid& grid);
CodecGrid grid_from_json(const Json& row, int codebook_size);

}  // namespace capforge
