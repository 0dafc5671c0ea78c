#include "codec.hpp"

#include <algorithm>
#include <limits>

namespace capforge {

void CodecConfig::validate() const {
  if (n_q < 1 || n_q > 64)
    fail(ErrorKind::Config, "codec n_q must be in [1, 64], got " + std::to_string(n_q));
  if (codebook_size < 1)
    fail(ErrorKind::Config, "codec codebook_size must be >= 1");
  if (dim < 1) fail(ErrorKind::Config, "codec dim must be >= 1");
  if (!(frame_rate_hz > 0)) fail(ErrorKind::Config, "codec frame_rate_hz must be > 0");
}

CodecConfig codec_preset(const std::string& name, int dim) {
  CodecConfig c;
  c.preset = name;
  c.dim = dim;
  c.frame_rate_hz = 75.0;
  c.codebook_size = 1024;
  if (name == "encodec16") {
    c.n_q = 16;
  } else if (name == "encodec8") {
    c.n_q = 8;
  } else if (name == "encodec32") {
    c.n_q = 32;
  } else if (name == "dac32") {
    c.n_q = 32;
  } else if (name == "desk4") {
    // Desk-scale variant used by the reference runs.
    c.n_q = 4;
    c.codebook_size = 64;
    c.frame_rate_hz = 1.0;
  } else {
    fail(ErrorKind::Config, "unknown codec preset '" + name + "'");
  }
  return c;
}

std::vector<std::string> codec_preset_names() {
  return {"encodec16", "encodec8", "encodec32", "dac32", "desk4"};
}

namespace {

double squared_distance(const Eigen::Ref<const RowVec>& a, const Eigen::Ref<const RowVec>& b) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double diff = a[i] - b[i];
    s += diff * diff;
  }
  return s;
}

// k-means++ seeding: first centre uniform, then proportional to D^2.
Mat kmeanspp_init(const Mat& points, int k, Rng& rng) {
  const Eigen::Index n = points.rows();
  Mat centroids(k, points.cols());
  std::vector<char> chosen(static_cast<std::size_t>(n), 0);
  std::size_t first = uniform_index(rng, static_cast<std::size_t>(n));
  centroids.row(0) = points.row(static_cast<Eigen::Index>(first));
  chosen[first] = 1;
  std::vector<double> d2(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) d2[i] = squared_distance(points.row(i), centroids.row(0));
  for (int c = 1; c < k; ++c) {
    double total = 0.0;
    for (double v : d2) total += v;
    Eigen::Index pick = -1;
    if (total > 0.0) {
      double target = uniform01(rng) * total;
      for (Eigen::Index i = 0; i < n; ++i) {
        target -= d2[i];
        if (target < 0.0 && d2[i] > 0.0) {
          pick = i;
          break;
        }
      }
      if (pick < 0) {
        for (Eigen::Index i = n - 1; i >= 0; --i)
          if (d2[i] > 0.0) {
            pick = i;
            break;
          }
      }
    } else {
      // All remaining points coincide with a centre: take the first unused one.
      for (Eigen::Index i = 0; i < n; ++i)
        if (!chosen[i]) {
          pick = i;
          break;
        }
      if (pick < 0) pick = 0;
    }
    chosen[pick] = 1;
    centroids.row(c) = points.row(pick);
    for (Eigen::Index i = 0; i < n; ++i)
      d2[i] = std::min(d2[i], squared_distance(points.row(i), centroids.row(c)));
  }
  return centroids;
}

}  // namespace

int nearest_centroid(const Mat& centroids, const Eigen::Ref<const RowVec>& x) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index c = 0; c < centroids.rows(); ++c) {
    const double d = squared_distance(centroids.row(c), x);
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(c);
    }
  }
  return best;
}

Mat kmeans(const Mat& points, int k, Rng& rng, const KMeansOptions& options) {
  const Eigen::Index n = points.rows();
  if (n == 0) fail(ErrorKind::Input, "k-means on an empty point set");
  if (k < 1) fail(ErrorKind::Config, "k-means needs k >= 1");
  if (n < k)
    fail(ErrorKind::Config, "k-means needs at least k=" + std::to_string(k) + " points, got " +
                                std::to_string(n));

  Mat centroids = kmeanspp_init(points, k, rng);
  std::vector<int> assign(static_cast<std::size_t>(n), 0);
  std::vector<double> dist(static_cast<std::size_t>(n), 0.0);
  double prev_sse = std::numeric_limits<double>::infinity();

  for (int iter = 0; iter < options.max_iterations; ++iter) {
    double sse = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      assign[i] = nearest_centroid(centroids, points.row(i));
      dist[i] = squared_distance(points.row(i), centroids.row(assign[i]));
      sse += dist[i];
    }

    Mat sums = Mat::Zero(k, points.cols());
    std::vector<std::size_t> counts(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(assign[i]) += points.row(i);
      ++counts[assign[i]];
    }
    std::vector<char> taken(static_cast<std::size_t>(n), 0);
    for (int c = 0; c < k; ++c) {
      if (counts[c] > 0) {
        centroids.row(c) = sums.row(c) / static_cast<double>(counts[c]);
        continue;
      }
      // Empty cluster: reseed with the point farthest from its centroid.
      Eigen::Index far = -1;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (taken[i]) continue;
        if (far < 0 || dist[i] > dist[far]) far = i;
      }
      if (far < 0) far = 0;
      taken[far] = 1;
      dist[far] = 0.0;
      centroids.row(c) = points.row(far);
    }

    if (prev_sse < std::numeric_limits<double>::infinity()) {
      const double improvement = prev_sse - sse;
      if (prev_sse == 0.0 || improvement <= options.tolerance * prev_sse) break;
    }
    prev_sse = sse;
  }
  return centroids;
}

RvqCodec::RvqCodec(CodecConfig config, std::vector<Mat> codebooks)
    : config_(std::move(config)), codebooks_(std::move(codebooks)) {
  config_.validate();
  if (static_cast<int>(codebooks_.size()) != config_.n_q)
    fail(ErrorKind::Data, "codec has " + std::to_string(codebooks_.size()) + " codebooks, config says " +
                              std::to_string(config_.n_q));
  for (const auto& cb : codebooks_) {
    if (cb.rows() != config_.codebook_size || cb.cols() != config_.dim)
      fail(ErrorKind::Data, "codebook shape does not match codec config");
  }
}

RvqCodec RvqCodec::fit(std::span<const FeatureSeq> corpus, const CodecConfig& config,
                       std::uint64_t seed, const KMeansOptions& options) {
  config.validate();
  if (corpus.empty()) fail(ErrorKind::Input, "cannot fit a codec on an empty corpus");
  Eigen::Index total = 0;
  for (const auto& seq : corpus) {
    if (seq.length() > 0 && static_cast<int>(seq.dim()) != config.dim)
      fail(ErrorKind::Input, "corpus frame dimension " + std::to_string(seq.dim()) +
                                 " does not match codec dim " + std::to_string(config.dim));
    total += static_cast<Eigen::Index>(seq.length());
  }
  if (total == 0) fail(ErrorKind::Input, "cannot fit a codec on a corpus with no frames");
  if (total < config.codebook_size)
    fail(ErrorKind::Config, "corpus has " + std::to_string(total) + " frames, fewer than K=" +
                                std::to_string(config.codebook_size));

  Mat residual(total, config.dim);
  Eigen::Index row = 0;
  for (const auto& seq : corpus) {
    if (seq.length() == 0) continue;
    residual.middleRows(row, seq.frames.rows()) = seq.frames;
    row += seq.frames.rows();
  }

  std::vector<Mat> codebooks;
  codebooks.reserve(static_cast<std::size_t>(config.n_q));
  for (int q = 0; q < config.n_q; ++q) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(q)));
    Mat cb = kmeans(residual, config.codebook_size, rng, options);
    for (Eigen::Index i = 0; i < total; ++i) residual.row(i) -= cb.row(nearest_centroid(cb, residual.row(i)));
    codebooks.push_back(std::move(cb));
  }
  return RvqCodec(config, std::move(codebooks));
}

CodecGrid RvqCodec::encode(const FeatureSeq& seq) const {
  if (seq.length() > 0 && static_cast<int>(seq.dim()) != config_.dim)
    fail(ErrorKind::Input, "frame dimension " + std::to_string(seq.dim()) + " does not match codec dim " +
                               std::to_string(config_.dim));
  const std::size_t T = seq.length();
  CodecGrid grid;
  grid.codebook_size = config_.codebook_size;
  grid.codes.assign(codebooks_.size(), std::vector<std::int32_t>(T, 0));
  RowVec residual(config_.dim);
  for (std::size_t t = 0; t < T; ++t) {
    residual = seq.frames.row(static_cast<Eigen::Index>(t));
    for (std::size_t q = 0; q < codebooks_.size(); ++q) {
      const int idx = nearest_centroid(codebooks_[q], residual);
      grid.codes[q][t] = idx;
      residual -= codebooks_[q].row(idx);
    }
  }
  return grid;
}

FeatureSeq RvqCodec::decode(const CodecGrid& grid) const {
  if (grid.num_levels() != codebooks_.size())
    fail(ErrorKind::Data, "grid has " + std::to_string(grid.num_levels()) + " levels, codec has " +
                              std::to_string(codebooks_.size()));
  const std::size_t T = grid.length();
  FeatureSeq out;
  out.frame_rate_hz = config_.frame_rate_hz;
  out.frames = Mat::Zero(static_cast<Eigen::Index>(T), config_.dim);
  for (std::size_t q = 0; q < codebooks_.size(); ++q) {
    if (grid.codes[q].size() != T) fail(ErrorKind::Data, "ragged codec grid");
    for (std::size_t t = 0; t < T; ++t) {
      const auto idx = grid.codes[q][t];
      if (idx < 0 || idx >= config_.codebook_size)
        fail(ErrorKind::Data, "code index " + std::to_string(idx) + " out of range at level " +
                                  std::to_string(q) + ", t=" + std::to_string(t));
      out.frames.row(static_cast<Eigen::Index>(t)) += codebooks_[q].row(idx);
    }
  }
  return out;
}

RvqCodec RvqCodec::truncated(int levels) const {
  if (levels < 1 || levels > config_.n_q) fail(ErrorKind::Config, "invalid truncation level count");
  CodecConfig c = config_;
  c.n_q = levels;
  return RvqCodec(c, std::vector<Mat>(codebooks_.begin(), codebooks_.begin() + levels));
}

Json RvqCodec::to_json() const {
  Json books = Json::array();
  for (const auto& cb : codebooks_) books.push_back(std::vector<double>(cb.data(), cb.data() + cb.size()));
  return Json{{"format_version", 1},
              {"config",
               {{"preset", config_.preset},
                {"n_q", config_.n_q},
                {"codebook_size", config_.codebook_size},
                {"dim", config_.dim},
                {"frame_rate_hz", config_.frame_rate_hz}}},
              {"codebooks", books}};
}

RvqCodec RvqCodec::from_json(const Json& j) {
  try {
    if (j.at("format_version").get<int>() != 1) fail(ErrorKind::Data, "unsupported codec format version");
    CodecConfig c;
    const auto& cj = j.at("config");
    c.preset = cj.at("preset").get<std::string>();
    c.n_q = cj.at("n_q").get<int>();
    c.codebook_size = cj.at("codebook_size").get<int>();
    c.dim = cj.at("dim").get<int>();
    c.frame_rate_hz = cj.at("frame_rate_hz").get<double>();
    c.validate();
    std::vector<Mat> books;
    for (const auto& bj : j.at("codebooks")) {
      auto flat = bj.get<std::vector<double>>();
      if (flat.size() != static_cast<std::size_t>(c.codebook_size) * static_cast<std::size_t>(c.dim))
        fail(ErrorKind::Data, "codebook array has wrong length");
      books.push_back(Eigen::Map<Mat>(flat.data(), c.codebook_size, c.dim));
    }
    return RvqCodec(c, std::move(books));
  } catch (const Json::exception& e) {
    fail(ErrorKind::Parse, std::string("malformed codec json: ") + e.what());
  }
}

double reconstruction_mse(const RvqCodec& codec, std::span<const FeatureSeq> corpus) {
  double sse = 0.0;
  std::size_t frames = 0;
  for (const auto& seq : corpus) {
    const FeatureSeq rec = codec.decode(codec.encode(seq));
    if (seq.length() == 0) continue;
    sse += (seq.frames - rec.frames).squaredNorm();
    frames += seq.length();
  }
  if (frames == 0) fail(ErrorKind::Input, "reconstruction_mse on an empty corpus");
  return sse / static_cast<double>(frames);
}

Json grid_to_json(const std::string& id, const CodecGrid& grid) {
  return Json{{"id", id},
              {"n_q", grid.num_levels()},
              {"T", grid.length()},
              {"codes", grid.codes}};
}

CodecGrid grid_from_json(const Json& row, int codebook_size) {
  CodecGrid grid;
  grid.codebook_size = codebook_size;
  try {
    grid.codes = row.at("codes").get<std::vector<std::vector<std::int32_t>>>();
    const auto n_q = row.at("n_q").get<std::size_t>();
    const auto T = row.at("T").get<std::size_t>();
    if (grid.codes.size() != n_q) fail(ErrorKind::Data, "grid row n_q mismatch");
    for (const auto& level : grid.codes) {
      if (level.size() != T) fail(ErrorKind::Data, "grid row T mismatch");
      for (auto c : level)
        if (c < 0 || c >= codebook_size) fail(ErrorKind::Data, "grid code out of range");
    }
  } catch (const Json::exception& e) {
    fail(ErrorKind::Parse, std::string("malformed grid row: ") + e.what());
  }
  return grid;
}

}  // namespace capforge
