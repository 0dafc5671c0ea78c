#include "model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "text.hpp"

namespace capforge {

// ---------------------------------------------------------------------------
// Tokenizer

CaptionTokenizer::CaptionTokenizer(const std::vector<std::string>& words) {
  words_ = {"<pad>", "<s>", "</s>", "<unk>"};
  for (const auto& w : words)
    if (std::find(words_.begin(), words_.end(), w) == words_.end()) words_.push_back(w);
  for (std::size_t i = 0; i < words_.size(); ++i) index_[words_[i]] = static_cast<int>(i);
}

int CaptionTokenizer::id(const std::string& word) const {
  auto it = index_.find(word);
  return it == index_.end() ? kUnk : it->second;
}

std::vector<int> CaptionTokenizer::encode(const std::string& caption) const {
  std::vector<int> ids;
  for (const auto& t : tokenize(caption)) ids.push_back(id(t));
  return ids;
}

std::string CaptionTokenizer::decode(std::span<const int> ids) const {
  std::vector<std::string> out;
  for (int i : ids) {
    if (i == kPad || i == kBos || i == kEos) continue;
    out.push_back(word(i));
  }
  return join_tokens(out);
}

// ---------------------------------------------------------------------------
// Config

void ModelConfig::validate() const {
  auto need = [](bool ok, const char* what) {
    if (!ok) fail(ErrorKind::Config, std::string("model config: ") + what);
  };
  need(n_q >= 1, "n_q >= 1");
  need(codebook_size >= 1, "codebook_size >= 1");
  need(seq_dim >= 1, "seq_dim >= 1");
  need(vocab_size > CaptionTokenizer::kUnk, "vocab_size must cover the special tokens");
  need(hidden >= 2, "hidden >= 2");
  need(heads >= 1 && hidden % heads == 0, "hidden divisible by heads");
  need(ffn >= 1, "ffn >= 1");
  need(enc_layers >= 0 && dec_layers >= 0, "layer counts >= 0");
}

Json ModelConfig::to_json() const {
  return Json{{"n_q", n_q},       {"codebook_size", codebook_size}, {"seq_dim", seq_dim},
              {"vocab_size", vocab_size}, {"hidden", hidden},       {"heads", heads},
              {"ffn", ffn},       {"enc_layers", enc_layers},       {"dec_layers", dec_layers}};
}

ModelConfig ModelConfig::from_json(const Json& j) {
  ModelConfig c;
  c.n_q = j.at("n_q").get<int>();
  c.codebook_size = j.at("codebook_size").get<int>();
  c.seq_dim = j.at("seq_dim").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.hidden = j.at("hidden").get<int>();
  c.heads = j.at("heads").get<int>();
  c.ffn = j.at("ffn").get<int>();
  c.enc_layers = j.at("enc_layers").get<int>();
  c.dec_layers = j.at("dec_layers").get<int>();
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Masking and positions

MaskedGrid mask_columns(const CodecGrid& grid, std::vector<int> columns) {
  std::sort(columns.begin(), columns.end());
  columns.erase(std::unique(columns.begin(), columns.end()), columns.end());
  MaskedGrid out{grid, std::move(columns)};
  for (int c : out.columns) {
    if (c < 0 || static_cast<std::size_t>(c) >= grid.length()) fail(ErrorKind::Input, "mask column out of range");
    for (auto& level : out.grid.codes) level[static_cast<std::size_t>(c)] = grid.codebook_size;
  }
  return out;
}

MaskedGrid apply_mcm_mask(const CodecGrid& grid, double ratio, Rng& rng) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) fail(ErrorKind::Config, "mcm ratio must be in [0, 1]");
  const std::size_t T = grid.length();
  const auto count = static_cast<std::size_t>(std::lround(ratio * static_cast<double>(T)));
  std::vector<int> cols(T);
  std::iota(cols.begin(), cols.end(), 0);
  for (std::size_t i = 0; i < count; ++i) std::swap(cols[i], cols[i + uniform_index(rng, T - i)]);
  cols.resize(count);
  return mask_columns(grid, std::move(cols));
}

RowVec sinusoid(int t, int width) {
  RowVec r(width);
  for (int i = 0; i < width; ++i) {
    const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / width);
    r[i] = (i % 2 == 0) ? std::sin(t * freq) : std::cos(t * freq);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Loss

namespace {

// Row-wise log-softmax.
Mat log_softmax_rows(const Mat& logits) {
  Mat out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double m = logits.row(r).maxCoeff();
    const double lse = m + std::log((logits.row(r).array() - m).exp().sum());
    out.row(r) = logits.row(r).array() - lse;
  }
  return out;
}

}  // namespace

LossParts joint_loss(const Mat& caption_logits, std::span<const int> caption_targets,
                     const std::vector<Mat>& mcm_logits, const std::vector<std::vector<int>>& mcm_targets,
                     double lambda, Mat* d_caption, std::vector<Mat>* d_mcm) {
  LossParts parts;
  const auto L = caption_logits.rows();
  if (static_cast<std::size_t>(L) != caption_targets.size())
    fail(ErrorKind::Input, "caption logits and targets disagree in length");
  if (mcm_logits.size() != mcm_targets.size()) fail(ErrorKind::Input, "mcm logits and targets disagree");

  const Mat lp = log_softmax_rows(caption_logits);
  for (Eigen::Index i = 0; i < L; ++i) parts.caption_ce -= lp(i, caption_targets[static_cast<std::size_t>(i)]);
  if (L > 0) parts.caption_ce /= static_cast<double>(L);
  if (d_caption) {
    *d_caption = lp.array().exp();
    for (Eigen::Index i = 0; i < L; ++i) (*d_caption)(i, caption_targets[static_cast<std::size_t>(i)]) -= 1.0;
    if (L > 0) *d_caption /= static_cast<double>(L);
  }

  std::size_t cells = 0;
  for (const auto& t : mcm_targets) cells += t.size();
  std::vector<Mat> mcm_lp;
  for (std::size_t q = 0; q < mcm_logits.size(); ++q) {
    if (static_cast<std::size_t>(mcm_logits[q].rows()) != mcm_targets[q].size())
      fail(ErrorKind::Input, "mcm logits and targets disagree in length");
    mcm_lp.push_back(log_softmax_rows(mcm_logits[q]));
    for (std::size_t j = 0; j < mcm_targets[q].size(); ++j)
      parts.mcm_ce -= mcm_lp.back()(static_cast<Eigen::Index>(j), mcm_targets[q][j]);
  }
  if (cells > 0) parts.mcm_ce /= static_cast<double>(cells);
  if (d_mcm) {
    d_mcm->clear();
    for (std::size_t q = 0; q < mcm_logits.size(); ++q) {
      Mat d = mcm_lp[q].array().exp();
      for (std::size_t j = 0; j < mcm_targets[q].size(); ++j) d(static_cast<Eigen::Index>(j), mcm_targets[q][j]) -= 1.0;
      if (cells > 0) d *= lambda / static_cast<double>(cells);
      else d.setZero();
      d_mcm->push_back(std::move(d));
    }
  }
  parts.total = parts.caption_ce + lambda * parts.mcm_ce;
  return parts;
}

// ---------------------------------------------------------------------------
// Layout

namespace {

struct LnIdx {
  int g = -1, b = -1;
};
struct AttnIdx {
  int wq = -1, bq = -1, wk = -1, bk = -1, wv = -1, bv = -1, wo = -1, bo = -1;
};
struct FfnIdx {
  int w1 = -1, b1 = -1, w2 = -1, b2 = -1;
};
struct EncIdx {
  LnIdx ln1;
  AttnIdx attn;
  LnIdx ln2;
  FfnIdx ffn;
};
struct DecIdx {
  LnIdx ln1;
  AttnIdx self;
  LnIdx ln2;
  AttnIdx cross;
  LnIdx ln3;
  FfnIdx ffn;
};

}  // namespace

struct ModelLayout {
  std::vector<int> code_emb;
  int seq_w = -1, seq_b = -1, tok_emb = -1;
  std::vector<EncIdx> enc;
  LnIdx enc_ln;
  std::vector<DecIdx> dec;
  LnIdx dec_ln;
  int out_w = -1, out_b = -1;
  std::vector<int> mcm_w, mcm_b;
};

void CaptionModel::build_layout() {
  const auto& c = config_;
  auto layout = std::make_shared<ModelLayout>();
  names_.clear();
  std::vector<std::pair<Eigen::Index, Eigen::Index>> shapes;
  auto add = [&](const std::string& name, Eigen::Index r, Eigen::Index k) {
    names_.push_back(name);
    shapes.emplace_back(r, k);
    return static_cast<int>(names_.size() - 1);
  };
  const int h = c.hidden;
  auto ln = [&](const std::string& p) { return LnIdx{add(p + ".g", 1, h), add(p + ".b", 1, h)}; };
  auto attn = [&](const std::string& p) {
    AttnIdx a;
    a.wq = add(p + ".wq", h, h);
    a.bq = add(p + ".bq", 1, h);
    a.wk = add(p + ".wk", h, h);
    a.bk = add(p + ".bk", 1, h);
    a.wv = add(p + ".wv", h, h);
    a.bv = add(p + ".bv", 1, h);
    a.wo = add(p + ".wo", h, h);
    a.bo = add(p + ".bo", 1, h);
    return a;
  };
  auto ffn = [&](const std::string& p) {
    return FfnIdx{add(p + ".w1", h, c.ffn), add(p + ".b1", 1, c.ffn), add(p + ".w2", c.ffn, h), add(p + ".b2", 1, h)};
  };

  for (int q = 0; q < c.n_q; ++q) layout->code_emb.push_back(add("code_emb." + std::to_string(q), c.codebook_size + 1, h));
  layout->seq_w = add("seq_proj.w", c.seq_dim, h);
  layout->seq_b = add("seq_proj.b", 1, h);
  layout->tok_emb = add("tok_emb", c.vocab_size, h);
  for (int l = 0; l < c.enc_layers; ++l) {
    const std::string p = "enc." + std::to_string(l);
    EncIdx e;
    e.ln1 = ln(p + ".ln1");
    e.attn = attn(p + ".attn");
    e.ln2 = ln(p + ".ln2");
    e.ffn = ffn(p + ".ffn");
    layout->enc.push_back(e);
  }
  layout->enc_ln = ln("enc.ln_f");
  for (int l = 0; l < c.dec_layers; ++l) {
    const std::string p = "dec." + std::to_string(l);
    DecIdx d;
    d.ln1 = ln(p + ".ln1");
    d.self = attn(p + ".self");
    d.ln2 = ln(p + ".ln2");
    d.cross = attn(p + ".cross");
    d.ln3 = ln(p + ".ln3");
    d.ffn = ffn(p + ".ffn");
    layout->dec.push_back(d);
  }
  layout->dec_ln = ln("dec.ln_f");
  layout->out_w = add("out.w", h, c.vocab_size);
  layout->out_b = add("out.b", 1, c.vocab_size);
  for (int q = 0; q < c.n_q; ++q) {
    layout->mcm_w.push_back(add("mcm." + std::to_string(q) + ".w", h, c.codebook_size));
    layout->mcm_b.push_back(add("mcm." + std::to_string(q) + ".b", 1, c.codebook_size));
  }
  if (params_.size() != shapes.size()) {
    params_.clear();
    for (auto [r, k] : shapes) params_.push_back(Mat::Zero(r, k));
  }
  layout_ = std::move(layout);
}

CaptionModel::CaptionModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  build_layout();
  Rng rng(derive_seed(seed, 0x6d6f64656cULL));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const std::string& n = names_[i];
    const bool gain = n.size() >= 2 && n.ends_with(".g");
    const bool bias = n.ends_with(".b") || n.ends_with(".bq") || n.ends_with(".bk") || n.ends_with(".bv") ||
                      n.ends_with(".bo") || n.ends_with(".b1") || n.ends_with(".b2");
    Mat& p = params_[i];
    if (gain) {
      p.setOnes();
    } else if (bias) {
      p.setZero();
    } else {
      for (Eigen::Index k = 0; k < p.size(); ++k) p.data()[k] = 0.02 * standard_normal(rng);
    }
  }
}

std::size_t CaptionModel::num_parameters() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.size());
  return n;
}

int CaptionModel::param_index(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return static_cast<int>(i);
  return -1;
}

std::vector<Mat> CaptionModel::zero_grads() const {
  std::vector<Mat> g;
  g.reserve(params_.size());
  for (const auto& p : params_) g.push_back(Mat::Zero(p.rows(), p.cols()));
  return g;
}

// ---------------------------------------------------------------------------
// Building blocks with explicit backward passes.

namespace {

constexpr double kLnEps = 1e-5;

Mat linear(const Mat& x, const Mat& w, const Mat& b) {
  Mat y = x * w;
  y.rowwise() += b.row(0);
  return y;
}

// dW += x^T dy, db += colsum(dy); returns dx = dy W^T.
Mat linear_backward(const Mat& x, const Mat& w, const Mat& dy, Mat& dw, Mat& db) {
  dw.noalias() += x.transpose() * dy;
  db.row(0) += dy.colwise().sum();
  return dy * w.transpose();
}

struct LnCache {
  Mat xhat;
  Vec inv_std;
};

Mat layer_norm(const Mat& x, const Mat& g, const Mat& b, LnCache* cache) {
  const Eigen::Index n = x.rows();
  Mat y(n, x.cols());
  Mat xhat(n, x.cols());
  Vec inv(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().mean();
    inv[r] = 1.0 / std::sqrt(var + kLnEps);
    xhat.row(r) = (x.row(r).array() - mu) * inv[r];
    y.row(r) = xhat.row(r).cwiseProduct(g.row(0)) + b.row(0);
  }
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv);
  }
  return y;
}

Mat layer_norm_backward(const Mat& dy, const Mat& g, const LnCache& c, Mat& dg, Mat& db) {
  dg.row(0) += dy.cwiseProduct(c.xhat).colwise().sum();
  db.row(0) += dy.colwise().sum();
  Mat dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const RowVec dxhat = dy.row(r).cwiseProduct(g.row(0));
    const double m1 = dxhat.mean();
    const double m2 = dxhat.cwiseProduct(c.xhat.row(r)).mean();
    dx.row(r) = c.inv_std[r] * (dxhat.array() - m1 - c.xhat.row(r).array() * m2);
  }
  return dx;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x))); }

double gelu_grad(double x) {
  const double t = std::tanh(kGeluC * (x + 0.044715 * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

struct FfnCache {
  Mat x, pre, act;
};

Mat ffn_forward(const std::vector<Mat>& P, const FfnIdx& ix, const Mat& x, FfnCache* c) {
  Mat pre = linear(x, P[ix.w1], P[ix.b1]);
  Mat act = pre.unaryExpr([](double v) { return gelu(v); });
  Mat out = linear(act, P[ix.w2], P[ix.b2]);
  if (c) {
    c->x = x;
    c->pre = std::move(pre);
    c->act = std::move(act);
  }
  return out;
}

Mat ffn_backward(const std::vector<Mat>& P, const FfnIdx& ix, const FfnCache& c, const Mat& dout,
                 std::vector<Mat>& G) {
  Mat dact = linear_backward(c.act, P[ix.w2], dout, G[ix.w2], G[ix.b2]);
  Mat dpre = dact.cwiseProduct(c.pre.unaryExpr([](double v) { return gelu_grad(v); }));
  return linear_backward(c.x, P[ix.w1], dpre, G[ix.w1], G[ix.b1]);
}

void softmax_row_inplace(Eigen::Ref<RowVec> row) {
  const double m = row.maxCoeff();
  row = (row.array() - m).exp();
  row /= row.sum();
}

struct AttnCache {
  Mat xq, xkv, q, k, v, ctx;
  std::vector<Mat> probs;  // per head, nq x nk
};

Mat attention_forward(const std::vector<Mat>& P, const AttnIdx& ix, const Mat& xq, const Mat& xkv, bool causal,
                      int heads, AttnCache* c) {
  Mat q = linear(xq, P[ix.wq], P[ix.bq]);
  Mat k = linear(xkv, P[ix.wk], P[ix.bk]);
  Mat v = linear(xkv, P[ix.wv], P[ix.bv]);
  const Eigen::Index h = q.cols();
  const Eigen::Index dh = h / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Mat ctx(q.rows(), h);
  std::vector<Mat> probs;
  for (int hd = 0; hd < heads; ++hd) {
    Mat s = (q.middleCols(hd * dh, dh) * k.middleCols(hd * dh, dh).transpose()) * scale;
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
      if (causal)
        for (Eigen::Index j = i + 1; j < s.cols(); ++j) s(i, j) = -std::numeric_limits<double>::infinity();
      softmax_row_inplace(s.row(i));
    }
    ctx.middleCols(hd * dh, dh) = s * v.middleCols(hd * dh, dh);
    if (c) probs.push_back(std::move(s));
  }
  Mat out = linear(ctx, P[ix.wo], P[ix.bo]);
  if (c) {
    c->xq = xq;
    c->xkv = xkv;
    c->q = std::move(q);
    c->k = std::move(k);
    c->v = std::move(v);
    c->ctx = std::move(ctx);
    c->probs = std::move(probs);
  }
  return out;
}

// Returns (dxq, dxkv).
std::pair<Mat, Mat> attention_backward(const std::vector<Mat>& P, const AttnIdx& ix, const AttnCache& c,
                                       const Mat& dout, int heads, std::vector<Mat>& G) {
  Mat dctx = linear_backward(c.ctx, P[ix.wo], dout, G[ix.wo], G[ix.bo]);
  const Eigen::Index h = c.q.cols();
  const Eigen::Index dh = h / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Mat dq(c.q.rows(), h), dk(c.k.rows(), h), dv(c.v.rows(), h);
  for (int hd = 0; hd < heads; ++hd) {
    const Mat& p = c.probs[static_cast<std::size_t>(hd)];
    const auto dctx_h = dctx.middleCols(hd * dh, dh);
    dv.middleCols(hd * dh, dh) = p.transpose() * dctx_h;
    Mat dp = dctx_h * c.v.middleCols(hd * dh, dh).transpose();
    const Vec rowdot = dp.cwiseProduct(p).rowwise().sum();
    Mat ds = p.cwiseProduct(dp.colwise() - rowdot);
    dq.middleCols(hd * dh, dh) = (ds * c.k.middleCols(hd * dh, dh)) * scale;
    dk.middleCols(hd * dh, dh) = (ds.transpose() * c.q.middleCols(hd * dh, dh)) * scale;
  }
  Mat dxq = linear_backward(c.xq, P[ix.wq], dq, G[ix.wq], G[ix.bq]);
  Mat dxkv = linear_backward(c.xkv, P[ix.wk], dk, G[ix.wk], G[ix.bk]);
  dxkv += linear_backward(c.xkv, P[ix.wv], dv, G[ix.wv], G[ix.bv]);
  return {std::move(dxq), std::move(dxkv)};
}

struct EncCache {
  LnCache ln1;
  AttnCache attn;
  LnCache ln2;
  FfnCache ffn;
};

struct DecCache {
  LnCache ln1;
  AttnCache self;
  LnCache ln2;
  AttnCache cross;
  LnCache ln3;
  FfnCache ffn;
};

struct Trace {
  std::vector<EncCache> enc;
  LnCache enc_ln;
  Mat memory;
  std::vector<DecCache> dec;
  LnCache dec_ln;
  Mat dec_final;
  Mat mcm_rows;
};

Mat run_encoder(const std::vector<Mat>& P, const ModelLayout& L, int heads, Mat x, Trace* t) {
  if (t) t->enc.resize(L.enc.size());
  for (std::size_t l = 0; l < L.enc.size(); ++l) {
    const EncIdx& e = L.enc[l];
    EncCache* c = t ? &t->enc[l] : nullptr;
    Mat a = layer_norm(x, P[e.ln1.g], P[e.ln1.b], c ? &c->ln1 : nullptr);
    x += attention_forward(P, e.attn, a, a, false, heads, c ? &c->attn : nullptr);
    Mat b = layer_norm(x, P[e.ln2.g], P[e.ln2.b], c ? &c->ln2 : nullptr);
    x += ffn_forward(P, e.ffn, b, c ? &c->ffn : nullptr);
  }
  return layer_norm(x, P[L.enc_ln.g], P[L.enc_ln.b], t ? &t->enc_ln : nullptr);
}

Mat run_decoder(const std::vector<Mat>& P, const ModelLayout& L, int heads, const Mat& memory,
                std::span<const int> prefix, Trace* t) {
  const Eigen::Index h = P[L.tok_emb].cols();
  Mat y(static_cast<Eigen::Index>(prefix.size()), h);
  for (std::size_t i = 0; i < prefix.size(); ++i) {
    const int tok = prefix[i];
    if (tok < 0 || tok >= P[L.tok_emb].rows()) fail(ErrorKind::Input, "caption token id out of range");
    y.row(static_cast<Eigen::Index>(i)) = P[L.tok_emb].row(tok) + sinusoid(static_cast<int>(i), static_cast<int>(h));
  }
  if (t) t->dec.resize(L.dec.size());
  for (std::size_t l = 0; l < L.dec.size(); ++l) {
    const DecIdx& d = L.dec[l];
    DecCache* c = t ? &t->dec[l] : nullptr;
    Mat a = layer_norm(y, P[d.ln1.g], P[d.ln1.b], c ? &c->ln1 : nullptr);
    y += attention_forward(P, d.self, a, a, true, heads, c ? &c->self : nullptr);
    Mat b = layer_norm(y, P[d.ln2.g], P[d.ln2.b], c ? &c->ln2 : nullptr);
    y += attention_forward(P, d.cross, b, memory, false, heads, c ? &c->cross : nullptr);
    Mat e = layer_norm(y, P[d.ln3.g], P[d.ln3.b], c ? &c->ln3 : nullptr);
    y += ffn_forward(P, d.ffn, e, c ? &c->ffn : nullptr);
  }
  Mat z = layer_norm(y, P[L.dec_ln.g], P[L.dec_ln.b], t ? &t->dec_ln : nullptr);
  if (t) t->dec_final = z;
  return linear(z, P[L.out_w], P[L.out_b]);
}

std::vector<Mat> run_mcm_heads(const std::vector<Mat>& P, const ModelLayout& L, const Mat& memory,
                               std::span<const int> masked_cols, Trace* t) {
  Mat rows(static_cast<Eigen::Index>(masked_cols.size()), memory.cols());
  for (std::size_t j = 0; j < masked_cols.size(); ++j) {
    const int col = masked_cols[j];
    if (col < 0 || col + 1 >= memory.rows()) fail(ErrorKind::Input, "masked column outside the encoder sequence");
    rows.row(static_cast<Eigen::Index>(j)) = memory.row(col + 1);
  }
  std::vector<Mat> out;
  for (std::size_t q = 0; q < L.mcm_w.size(); ++q) out.push_back(linear(rows, P[L.mcm_w[q]], P[L.mcm_b[q]]));
  if (t) t->mcm_rows = std::move(rows);
  return out;
}

}  // namespace

Mat CaptionModel::compose_inputs(const CodecGrid& grid, const SeqEmbedding& seq) const {
  const ModelLayout& L = *layout_;
  const auto& P = params_;
  if (static_cast<int>(grid.num_levels()) != config_.n_q)
    fail(ErrorKind::Input, "grid has " + std::to_string(grid.num_levels()) + " levels, model expects " +
                               std::to_string(config_.n_q));
  if (static_cast<int>(seq.dim()) != config_.seq_dim)
    fail(ErrorKind::Input, "sequence embedding has dim " + std::to_string(seq.dim()) + ", model expects " +
                               std::to_string(config_.seq_dim));
  const std::size_t T = grid.length();
  const int h = config_.hidden;
  Mat x(static_cast<Eigen::Index>(T + 1), h);
  const Eigen::Map<const RowVec> s(seq.vector.data(), static_cast<Eigen::Index>(seq.vector.size()));
  x.row(0) = s * P[L.seq_w] + P[L.seq_b].row(0);
  for (std::size_t t = 0; t < T; ++t) {
    RowVec row = sinusoid(static_cast<int>(t + 1), h);
    for (int q = 0; q < config_.n_q; ++q) {
      const auto code = grid.codes[static_cast<std::size_t>(q)][t];
      if (code < 0 || code > config_.codebook_size)
        fail(ErrorKind::Data, "code " + std::to_string(code) + " exceeds the MASK index " +
                                  std::to_string(config_.codebook_size));
      row += P[L.code_emb[static_cast<std::size_t>(q)]].row(code);
    }
    x.row(static_cast<Eigen::Index>(t + 1)) = row;
  }
  return x;
}

ForwardOutput CaptionModel::forward(const Mat& encoder_inputs, std::span<const int> prefix,
                                   std::span<const int> masked_cols) const {
  if (encoder_inputs.cols() != config_.hidden) fail(ErrorKind::Input, "encoder input width mismatch");
  if (prefix.empty() || prefix.front() != CaptionTokenizer::kBos)
    fail(ErrorKind::Input, "decoder prefix must start with BOS");
  ForwardOutput out;
  out.memory = run_encoder(params_, *layout_, config_.heads, encoder_inputs, nullptr);
  out.caption_logits = run_decoder(params_, *layout_, config_.heads, out.memory, prefix, nullptr);
  out.mcm_logits = run_mcm_heads(params_, *layout_, out.memory, masked_cols, nullptr);
  return out;
}

LossParts CaptionModel::loss(const Example& ex, double lambda, std::vector<Mat>* grads, double scale) const {
  const ModelLayout& L = *layout_;
  const auto& P = params_;
  const int heads = config_.heads;

  const MaskedGrid masked = mask_columns(ex.grid, ex.masked_cols);
  const Mat x0 = compose_inputs(masked.grid, ex.seq);

  std::vector<int> prefix{CaptionTokenizer::kBos};
  prefix.insert(prefix.end(), ex.caption.begin(), ex.caption.end());
  std::vector<int> targets(ex.caption.begin(), ex.caption.end());
  targets.push_back(CaptionTokenizer::kEos);

  std::vector<std::vector<int>> mcm_targets(static_cast<std::size_t>(config_.n_q));
  for (int q = 0; q < config_.n_q; ++q)
    for (int c : masked.columns) mcm_targets[static_cast<std::size_t>(q)].push_back(ex.grid.codes[static_cast<std::size_t>(q)][static_cast<std::size_t>(c)]);

  Trace tr;
  Trace* tp = grads ? &tr : nullptr;
  tr.memory = run_encoder(P, L, heads, x0, tp);
  const Mat logits = run_decoder(P, L, heads, tr.memory, prefix, tp);
  const std::vector<Mat> mcm_logits = run_mcm_heads(P, L, tr.memory, masked.columns, tp);

  Mat d_logits;
  std::vector<Mat> d_mcm;
  const LossParts parts = joint_loss(logits, targets, mcm_logits, mcm_targets, lambda, grads ? &d_logits : nullptr,
                                     grads ? &d_mcm : nullptr);
  if (!grads) return parts;
  auto& G = *grads;
  d_logits *= scale;
  for (auto& d : d_mcm) d *= scale;

  // Decoder.
  Mat dy = linear_backward(tr.dec_final, P[L.out_w], d_logits, G[L.out_w], G[L.out_b]);
  dy = layer_norm_backward(dy, P[L.dec_ln.g], tr.dec_ln, G[L.dec_ln.g], G[L.dec_ln.b]);
  Mat dmem = Mat::Zero(tr.memory.rows(), tr.memory.cols());
  for (std::size_t l = L.dec.size(); l-- > 0;) {
    const DecIdx& d = L.dec[l];
    const DecCache& c = tr.dec[l];
    Mat de = ffn_backward(P, d.ffn, c.ffn, dy, G);
    dy += layer_norm_backward(de, P[d.ln3.g], c.ln3, G[d.ln3.g], G[d.ln3.b]);
    auto [db, dm] = attention_backward(P, d.cross, c.cross, dy, heads, G);
    dmem += dm;
    dy += layer_norm_backward(db, P[d.ln2.g], c.ln2, G[d.ln2.g], G[d.ln2.b]);
    auto [daq, dakv] = attention_backward(P, d.self, c.self, dy, heads, G);
    daq += dakv;
    dy += layer_norm_backward(daq, P[d.ln1.g], c.ln1, G[d.ln1.g], G[d.ln1.b]);
  }
  for (std::size_t i = 0; i < prefix.size(); ++i) G[L.tok_emb].row(prefix[i]) += dy.row(static_cast<Eigen::Index>(i));

  // MCM heads read the encoder memory.
  for (std::size_t q = 0; q < L.mcm_w.size(); ++q) {
    const Mat drows = linear_backward(tr.mcm_rows, P[L.mcm_w[q]], d_mcm[q], G[L.mcm_w[q]], G[L.mcm_b[q]]);
    for (std::size_t j = 0; j < masked.columns.size(); ++j)
      dmem.row(masked.columns[j] + 1) += drows.row(static_cast<Eigen::Index>(j));
  }

  // Encoder.
  Mat dx = layer_norm_backward(dmem, P[L.enc_ln.g], tr.enc_ln, G[L.enc_ln.g], G[L.enc_ln.b]);
  for (std::size_t l = L.enc.size(); l-- > 0;) {
    const EncIdx& e = L.enc[l];
    const EncCache& c = tr.enc[l];
    Mat db = ffn_backward(P, e.ffn, c.ffn, dx, G);
    dx += layer_norm_backward(db, P[e.ln2.g], c.ln2, G[e.ln2.g], G[e.ln2.b]);
    auto [daq, dakv] = attention_backward(P, e.attn, c.attn, dx, heads, G);
    daq += dakv;
    dx += layer_norm_backward(daq, P[e.ln1.g], c.ln1, G[e.ln1.g], G[e.ln1.b]);
  }

  // Input composition.
  const Eigen::Map<const RowVec> s(ex.seq.vector.data(), static_cast<Eigen::Index>(ex.seq.vector.size()));
  G[L.seq_w].noalias() += s.transpose() * dx.row(0);
  G[L.seq_b].row(0) += dx.row(0);
  for (std::size_t t = 0; t < masked.grid.length(); ++t)
    for (int q = 0; q < config_.n_q; ++q)
      G[L.code_emb[static_cast<std::size_t>(q)]].row(masked.grid.codes[static_cast<std::size_t>(q)][t]) +=
          dx.row(static_cast<Eigen::Index>(t + 1));
  return parts;
}

LossParts CaptionModel::batch_loss(std::span<const Example> batch, double lambda, std::vector<Mat>* grads) const {
  LossParts mean;
  if (batch.empty()) return mean;
  const double w = 1.0 / static_cast<double>(batch.size());
  for (const auto& ex : batch) {
    const LossParts p = loss(ex, lambda, grads, w);
    mean.total += w * p.total;
    mean.caption_ce += w * p.caption_ce;
    mean.mcm_ce += w * p.mcm_ce;
  }
  return mean;
}

// ---------------------------------------------------------------------------
// Incremental decoding

DecodeState CaptionModel::begin_decode(const Mat& encoder_inputs) const {
  if (encoder_inputs.cols() != config_.hidden) fail(ErrorKind::Input, "encoder input width mismatch");
  const ModelLayout& L = *layout_;
  const Mat memory = run_encoder(params_, L, config_.heads, encoder_inputs, nullptr);
  auto kv = std::make_shared<std::vector<std::pair<Mat, Mat>>>();
  for (const auto& d : L.dec)
    kv->emplace_back(linear(memory, params_[d.cross.wk], params_[d.cross.bk]),
                     linear(memory, params_[d.cross.wv], params_[d.cross.bv]));
  DecodeState st;
  st.model_ = this;
  st.cross_kv_ = std::move(kv);
  st.self_k_.assign(L.dec.size(), Mat(0, config_.hidden));
  st.self_v_.assign(L.dec.size(), Mat(0, config_.hidden));
  st.advance(CaptionTokenizer::kBos);
  return st;
}

namespace {

RowVec attend_one(const RowVec& q, const Mat& k, const Mat& v, int heads) {
  const Eigen::Index h = q.size();
  const Eigen::Index dh = h / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  RowVec ctx(h);
  for (int hd = 0; hd < heads; ++hd) {
    RowVec s = (q.segment(hd * dh, dh) * k.middleCols(hd * dh, dh).transpose()) * scale;
    softmax_row_inplace(s);
    ctx.segment(hd * dh, dh) = s * v.middleCols(hd * dh, dh);
  }
  return ctx;
}

RowVec linear_row(const RowVec& x, const Mat& w, const Mat& b) { return x * w + b.row(0); }

RowVec layer_norm_row(const RowVec& x, const Mat& g, const Mat& b) {
  const double mu = x.mean();
  const double var = (x.array() - mu).square().mean();
  const double inv = 1.0 / std::sqrt(var + kLnEps);
  return ((x.array() - mu) * inv).matrix().cwiseProduct(g.row(0)) + b.row(0);
}

}  // namespace

void DecodeState::advance(int token) {
  const CaptionModel& m = *model_;
  const ModelLayout& L = *m.layout_;
  const auto& P = m.params_;
  const int h = m.config_.hidden;
  const int heads = m.config_.heads;
  if (token < 0 || token >= m.config_.vocab_size) fail(ErrorKind::Input, "token id out of range");

  RowVec y = P[L.tok_emb].row(token) + sinusoid(position_, h);
  for (std::size_t l = 0; l < L.dec.size(); ++l) {
    const DecIdx& d = L.dec[l];
    const RowVec a = layer_norm_row(y, P[d.ln1.g], P[d.ln1.b]);
    const RowVec q = linear_row(a, P[d.self.wq], P[d.self.bq]);
    Mat& K = self_k_[l];
    Mat& V = self_v_[l];
    K.conservativeResize(K.rows() + 1, Eigen::NoChange);
    V.conservativeResize(V.rows() + 1, Eigen::NoChange);
    K.row(K.rows() - 1) = linear_row(a, P[d.self.wk], P[d.self.bk]);
    V.row(V.rows() - 1) = linear_row(a, P[d.self.wv], P[d.self.bv]);
    y += linear_row(attend_one(q, K, V, heads), P[d.self.wo], P[d.self.bo]);

    const RowVec b = layer_norm_row(y, P[d.ln2.g], P[d.ln2.b]);
    const RowVec qc = linear_row(b, P[d.cross.wq], P[d.cross.bq]);
    const auto& [ck, cv] = (*cross_kv_)[l];
    y += linear_row(attend_one(qc, ck, cv, heads), P[d.cross.wo], P[d.cross.bo]);

    const RowVec e = layer_norm_row(y, P[d.ln3.g], P[d.ln3.b]);
    RowVec pre = linear_row(e, P[d.ffn.w1], P[d.ffn.b1]);
    pre = pre.unaryExpr([](double v) { return gelu(v); });
    y += linear_row(pre, P[d.ffn.w2], P[d.ffn.b2]);
  }
  const RowVec z = layer_norm_row(y, P[L.dec_ln.g], P[L.dec_ln.b]);
  RowVec logits = linear_row(z, P[L.out_w], P[L.out_b]);
  const double mx = logits.maxCoeff();
  const double lse = mx + std::log((logits.array() - mx).exp().sum());
  log_probs_ = logits.array() - lse;
  ++position_;
}

// ---------------------------------------------------------------------------
// Serialisation

Json CaptionModel::to_json() const {
  Json params = Json::object();
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const Mat& p = params_[i];
    params[names_[i]] = Json{{"rows", p.rows()},
                             {"cols", p.cols()},
                             {"data", std::vector<double>(p.data(), p.data() + p.size())}};
  }
  return Json{{"format_version", 1}, {"config", config_.to_json()}, {"params", params}};
}

CaptionModel CaptionModel::from_json(const Json& j) {
  try {
    if (j.at("format_version").get<int>() != 1) fail(ErrorKind::Data, "unsupported checkpoint format version");
    CaptionModel m;
    m.config_ = ModelConfig::from_json(j.at("config"));
    m.build_layout();
    const auto& pj = j.at("params");
    for (std::size_t i = 0; i < m.names_.size(); ++i) {
      const auto& e = pj.at(m.names_[i]);
      Mat& p = m.params_[i];
      if (e.at("rows").get<Eigen::Index>() != p.rows() || e.at("cols").get<Eigen::Index>() != p.cols())
        fail(ErrorKind::Data, "checkpoint tensor '" + m.names_[i] + "' has the wrong shape");
      const auto data = e.at("data").get<std::vector<double>>();
      if (static_cast<Eigen::Index>(data.size()) != p.size())
        fail(ErrorKind::Data, "checkpoint tensor '" + m.names_[i] + "' has the wrong length");
      std::copy(data.begin(), data.end(), p.data());
    }
    return m;
  } catch (const Json::exception& e) {
    fail(ErrorKind::Parse, std::string("malformed checkpoint: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Gradient check

namespace {
constexpr double kVanishingGrad = 1e-8;
}

GradCheckResult grad_check(const CaptionModel& model, std::span<const Example> batch, double lambda, double eps) {
  GradCheckResult result;
  std::vector<Mat> analytic = model.zero_grads();
  model.batch_loss(batch, lambda, &analytic);

  CaptionModel probe = model;
  auto& P = probe.params();
  for (std::size_t i = 0; i < P.size(); ++i) {
    Mat numeric = Mat::Zero(P[i].rows(), P[i].cols());
    for (Eigen::Index k = 0; k < P[i].size(); ++k) {
      double& w = P[i].data()[k];
      const double saved = w;
      w = saved + eps;
      const double up = probe.batch_loss(batch, lambda).total;
      w = saved - eps;
      const double down = probe.batch_loss(batch, lambda).total;
      w = saved;
      numeric.data()[k] = (up - down) / (2.0 * eps);
    }
    const double na = analytic[i].norm();
    const double nn = numeric.norm();
    const double rel = (na + nn) < kVanishingGrad ? 0.0 : (analytic[i] - numeric).norm() / (na + nn);
    if (rel > result.max_relative_error) {
      result.max_relative_error = rel;
      result.worst_tensor = probe.param_names()[i];
    }
    if (probe.param_names()[i].starts_with("mcm."))
      result.mcm_head_grad_max_abs = std::max(result.mcm_head_grad_max_abs, analytic[i].cwiseAbs().maxCoeff());
  }
  return result;
}

}  // namespace capforge
