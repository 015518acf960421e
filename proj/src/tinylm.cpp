#include "resae/tinylm.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <string>

#include "resae/binio.hpp"

namespace resae {

void LmConfig::validate() const {
  require(n_layers >= 1 && d_model >= 1 && n_heads >= 1 && d_ff >= 1 && context_len >= 1,
          ErrorCode::kInvalidArgument, "LmConfig: all counts must be >= 1");
  require(d_model % n_heads == 0, ErrorCode::kInvalidArgument,
          "LmConfig: d_model must be divisible by n_heads");
  require(vocab_size == 256, ErrorCode::kInvalidArgument, "LmConfig: vocab_size must be 256");
}

void TokenBatch::validate() const {
  require(batch >= 1 && seq_len >= 1, ErrorCode::kInvalidArgument, "TokenBatch: empty batch");
  require(tokens.size() == static_cast<std::size_t>(batch) * static_cast<std::size_t>(seq_len),
          ErrorCode::kDimensionMismatch, "TokenBatch: token count != batch * seq_len");
}

template <typename T>
HookSetT<T>& HookSetT<T>::add(int layer, HookFnT<T> fn) {
  require(layer >= 0, ErrorCode::kOutOfRange, "hook layer must be nonnegative");
  require(entries_.empty() || layer > entries_.back().layer, ErrorCode::kInvalidArgument,
          "hooks must be added in strictly increasing layer order");
  entries_.push_back({layer, std::move(fn)});
  return *this;
}

namespace {

// Offsets of every tensor inside the flat parameter vector. This is also the
// on-disk order of the TLM1 weight payload.
struct Layout {
  struct Block {
    std::size_t ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_fc, b_fc, w_proj, b_proj;
  };
  std::size_t wte, wpe;
  std::vector<Block> blocks;
  std::size_t lnf_g, lnf_b, w_out, b_out;
  std::size_t total;

  explicit Layout(const LmConfig& c) {
    const std::size_t d = c.d_model, v = c.vocab_size, t = c.context_len, f = c.d_ff;
    std::size_t off = 0;
    auto take = [&off](std::size_t n) {
      std::size_t at = off;
      off += n;
      return at;
    };
    wte = take(v * d);
    wpe = take(t * d);
    blocks.resize(c.n_layers);
    for (auto& b : blocks) {
      b.ln1_g = take(d);
      b.ln1_b = take(d);
      b.w_qkv = take(d * 3 * d);
      b.b_qkv = take(3 * d);
      b.w_o = take(d * d);
      b.b_o = take(d);
      b.ln2_g = take(d);
      b.ln2_b = take(d);
      b.w_fc = take(d * f);
      b.b_fc = take(f);
      b.w_proj = take(f * d);
      b.b_proj = take(d);
    }
    lnf_g = take(d);
    lnf_b = take(d);
    w_out = take(d * v);
    b_out = take(v);
    total = off;
  }
};

template <typename P>
auto mat_map(P* base, std::size_t off, Eigen::Index rows, Eigen::Index cols) {
  using T = std::remove_const_t<P>;
  if constexpr (std::is_const_v<P>) {
    return Eigen::Map<const MatT<T>>(base + off, rows, cols);
  } else {
    return Eigen::Map<MatT<T>>(base + off, rows, cols);
  }
}

template <typename P>
auto row_map(P* base, std::size_t off, Eigen::Index n) {
  using T = std::remove_const_t<P>;
  if constexpr (std::is_const_v<P>) {
    return Eigen::Map<const RowVecT<T>>(base + off, n);
  } else {
    return Eigen::Map<RowVecT<T>>(base + off, n);
  }
}

constexpr double kLnEps = 1e-5;

template <typename T, typename G, typename B>
void layernorm_forward(const MatT<T>& x, const G& g, const B& b, MatT<T>& y, VecT<T>& mean,
                       VecT<T>& rstd) {
  const Eigen::Index n = x.rows(), d = x.cols();
  y.resize(n, d);
  mean.resize(n);
  rstd.resize(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const T mu = x.row(r).mean();
    const T var = (x.row(r).array() - mu).square().mean();
    const T rs = T(1) / std::sqrt(var + T(kLnEps));
    mean(r) = mu;
    rstd(r) = rs;
    y.row(r) = ((x.row(r).array() - mu) * rs * g.array() + b.array()).matrix();
  }
}

// Accumulates dg, db; returns dx.
template <typename T, typename G, typename DG, typename DB>
MatT<T> layernorm_backward(const MatT<T>& x, const VecT<T>& mean, const VecT<T>& rstd,
                           const G& g, const MatT<T>& dy, DG&& dg, DB&& db) {
  const Eigen::Index n = x.rows(), d = x.cols();
  MatT<T> dx(n, d);
  RowVecT<T> xhat(d), dxhat(d);
  for (Eigen::Index r = 0; r < n; ++r) {
    xhat = (x.row(r).array() - mean(r)) * rstd(r);
    dg.array() += dy.row(r).array() * xhat.array();
    db += dy.row(r);
    dxhat = (dy.row(r).array() * g.array()).matrix();
    const T m1 = dxhat.mean();
    const T m2 = (dxhat.array() * xhat.array()).mean();
    dx.row(r) = ((dxhat.array() - m1 - xhat.array() * m2) * rstd(r)).matrix();
  }
  return dx;
}

template <typename T>
T gelu(T x) {
  const T c = T(std::sqrt(2.0 / std::numbers::pi));
  return T(0.5) * x * (T(1) + std::tanh(c * (x + T(0.044715) * x * x * x)));
}

template <typename T>
T gelu_grad(T x) {
  const T c = T(std::sqrt(2.0 / std::numbers::pi));
  const T t = std::tanh(c * (x + T(0.044715) * x * x * x));
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * c * (T(1) + T(3 * 0.044715) * x * x);
}

}  // namespace

template <typename T>
struct TransformerT<T>::Cache {
  struct Block {
    MatT<T> x_in, ln1, qkv, att, x_mid, ln2, fc_pre, fc_act;
    VecT<T> mean1, rstd1, mean2, rstd2;
    std::vector<MatT<T>> probs;  // per (sequence, head): seq_len x seq_len
  };
  std::vector<Block> blocks;
  MatT<T> x_final, lnf;
  VecT<T> meanf, rstdf;
};

template <typename T>
TransformerT<T>::TransformerT(const LmConfig& config, ZeroInit) : config_(config) {
  config_.validate();
  params_.assign(Layout(config_).total, T(0));
}

template <typename T>
TransformerT<T>::TransformerT(const LmConfig& config) : TransformerT(config, ZeroInit{}) {
  const Layout lay(config_);
  std::mt19937_64 rng(config_.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double std_base = 0.02;
  const double std_out = 0.02 / std::sqrt(2.0 * config_.n_layers);
  auto fill = [&](std::size_t off, std::size_t n, double s) {
    for (std::size_t i = 0; i < n; ++i) params_[off + i] = static_cast<T>(s * normal(rng));
  };
  auto ones = [&](std::size_t off, std::size_t n) {
    std::fill_n(params_.begin() + static_cast<std::ptrdiff_t>(off), n, T(1));
  };
  const std::size_t d = config_.d_model, v = config_.vocab_size, f = config_.d_ff;
  fill(lay.wte, v * d, std_base);
  fill(lay.wpe, static_cast<std::size_t>(config_.context_len) * d, std_base);
  for (const auto& b : lay.blocks) {
    ones(b.ln1_g, d);
    fill(b.w_qkv, d * 3 * d, std_base);
    fill(b.w_o, d * d, std_out);
    ones(b.ln2_g, d);
    fill(b.w_fc, d * f, std_base);
    fill(b.w_proj, f * d, std_out);
  }
  ones(lay.lnf_g, d);
  fill(lay.w_out, d * v, std_base);
}

template <typename T>
MatT<T> TransformerT<T>::run(const TokenBatch& tokens, const HookSetT<T>* hooks,
                             Cache* cache) const {
  tokens.validate();
  const LmConfig& c = config_;
  require(tokens.seq_len <= c.context_len, ErrorCode::kInvalidArgument,
          "sequence longer than context_len");
  const Layout lay(c);
  const T* p = params_.data();
  const Eigen::Index d = c.d_model, n = tokens.rows(), seq = tokens.seq_len;
  const Eigen::Index heads = c.n_heads, hd = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));

  std::size_t next_hook = 0;
  if (hooks != nullptr) {
    for (const auto& e : hooks->entries()) {
      require(e.layer < c.n_layers, ErrorCode::kOutOfRange,
              "hook layer " + std::to_string(e.layer) + " out of range");
    }
  }
  auto apply_hook = [&](int layer, HookPlacement where, MatT<T>& x) {
    if (hooks == nullptr || hooks->placement() != where) return;
    const auto& entries = hooks->entries();
    if (next_hook >= entries.size() || entries[next_hook].layer != layer) return;
    MatT<T> written = entries[next_hook].fn(layer, x);
    require(written.rows() == x.rows() && written.cols() == x.cols(),
            ErrorCode::kDimensionMismatch,
            "hook at layer " + std::to_string(layer) + " returned wrong dimension");
    x = std::move(written);
    ++next_hook;
  };

  const auto wte = mat_map(p, lay.wte, c.vocab_size, d);
  const auto wpe = mat_map(p, lay.wpe, c.context_len, d);
  MatT<T> x(n, d);
  for (Eigen::Index r = 0; r < n; ++r) {
    x.row(r) = wte.row(tokens.tokens[static_cast<std::size_t>(r)]) + wpe.row(r % seq);
  }

  if (cache != nullptr) cache->blocks.resize(c.n_layers);
  MatT<T> ln1, qkv, att, ln2, fc_pre, fc_act, scores;
  VecT<T> mean1, rstd1, mean2, rstd2;

  for (int l = 0; l < c.n_layers; ++l) {
    const auto& b = lay.blocks[l];
    const auto ln1_g = row_map(p, b.ln1_g, d), ln1_b = row_map(p, b.ln1_b, d);
    const auto w_qkv = mat_map(p, b.w_qkv, d, 3 * d);
    const auto b_qkv = row_map(p, b.b_qkv, 3 * d);
    const auto w_o = mat_map(p, b.w_o, d, d);
    const auto b_o = row_map(p, b.b_o, d);
    const auto ln2_g = row_map(p, b.ln2_g, d), ln2_b = row_map(p, b.ln2_b, d);
    const auto w_fc = mat_map(p, b.w_fc, d, c.d_ff);
    const auto b_fc = row_map(p, b.b_fc, c.d_ff);
    const auto w_proj = mat_map(p, b.w_proj, c.d_ff, d);
    const auto b_proj = row_map(p, b.b_proj, d);
    typename Cache::Block* bc = cache != nullptr ? &cache->blocks[l] : nullptr;

    if (bc != nullptr) bc->x_in = x;
    layernorm_forward(x, ln1_g, ln1_b, ln1, mean1, rstd1);
    apply_hook(l, HookPlacement::kPostLayerNorm, ln1);
    qkv.noalias() = ln1 * w_qkv;
    qkv.rowwise() += b_qkv;

    att.resize(n, d);
    if (bc != nullptr) bc->probs.resize(static_cast<std::size_t>(tokens.batch * heads));
    for (int s = 0; s < tokens.batch; ++s) {
      const Eigen::Index r0 = s * seq;
      for (Eigen::Index h = 0; h < heads; ++h) {
        const auto q = qkv.block(r0, h * hd, seq, hd);
        const auto k = qkv.block(r0, d + h * hd, seq, hd);
        const auto v = qkv.block(r0, 2 * d + h * hd, seq, hd);
        scores.noalias() = q * k.transpose();
        for (Eigen::Index i = 0; i < seq; ++i) {
          T mx = -std::numeric_limits<T>::infinity();
          for (Eigen::Index j = 0; j <= i; ++j) {
            scores(i, j) *= scale;
            mx = std::max(mx, scores(i, j));
          }
          T sum = 0;
          for (Eigen::Index j = 0; j <= i; ++j) {
            scores(i, j) = std::exp(scores(i, j) - mx);
            sum += scores(i, j);
          }
          for (Eigen::Index j = 0; j <= i; ++j) scores(i, j) /= sum;
          for (Eigen::Index j = i + 1; j < seq; ++j) scores(i, j) = 0;
        }
        att.block(r0, h * hd, seq, hd).noalias() = scores * v;
        if (bc != nullptr) bc->probs[static_cast<std::size_t>(s * heads + h)] = scores;
      }
    }
    x.noalias() += att * w_o;
    x.rowwise() += b_o;
    if (bc != nullptr) {
      bc->ln1 = ln1;
      bc->mean1 = mean1;
      bc->rstd1 = rstd1;
      bc->qkv = qkv;
      bc->att = att;
      bc->x_mid = x;
    }

    layernorm_forward(x, ln2_g, ln2_b, ln2, mean2, rstd2);
    fc_pre.noalias() = ln2 * w_fc;
    fc_pre.rowwise() += b_fc;
    fc_act = fc_pre.unaryExpr([](T v) { return gelu(v); });
    x.noalias() += fc_act * w_proj;
    x.rowwise() += b_proj;
    if (bc != nullptr) {
      bc->ln2 = ln2;
      bc->mean2 = mean2;
      bc->rstd2 = rstd2;
      bc->fc_pre = fc_pre;
      bc->fc_act = fc_act;
    }
    apply_hook(l, HookPlacement::kPostBlock, x);
  }

  const auto lnf_g = row_map(p, lay.lnf_g, d), lnf_b = row_map(p, lay.lnf_b, d);
  const auto w_out = mat_map(p, lay.w_out, d, c.vocab_size);
  const auto b_out = row_map(p, lay.b_out, c.vocab_size);
  MatT<T> lnf;
  VecT<T> meanf, rstdf;
  layernorm_forward(x, lnf_g, lnf_b, lnf, meanf, rstdf);
  MatT<T> logits = lnf * w_out;
  logits.rowwise() += b_out;
  if (cache != nullptr) {
    cache->x_final = std::move(x);
    cache->lnf = std::move(lnf);
    cache->meanf = std::move(meanf);
    cache->rstdf = std::move(rstdf);
  }
  return logits;
}

template <typename T>
MatT<T> TransformerT<T>::forward(const TokenBatch& tokens, const HookSetT<T>* hooks) const {
  return run(tokens, hooks, nullptr);
}

template <typename T>
double next_token_nll(const MatT<T>& logits, const TokenBatch& tokens) {
  require(tokens.seq_len >= 2, ErrorCode::kInvalidArgument,
          "cross entropy needs >= 2 tokens per sequence");
  double total = 0.0;
  std::size_t count = 0;
  for (int s = 0; s < tokens.batch; ++s) {
    for (int i = 0; i + 1 < tokens.seq_len; ++i) {
      const Eigen::Index r = static_cast<Eigen::Index>(s) * tokens.seq_len + i;
      const auto row = logits.row(r);
      const double mx = static_cast<double>(row.maxCoeff());
      double sum = 0.0;
      for (Eigen::Index j = 0; j < row.size(); ++j) sum += std::exp(static_cast<double>(row(j)) - mx);
      const int target = tokens.tokens[static_cast<std::size_t>(r + 1)];
      total += mx + std::log(sum) - static_cast<double>(row(target));
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

template <typename T>
double TransformerT<T>::loss(const TokenBatch& tokens) const {
  return next_token_nll(run(tokens, nullptr, nullptr), tokens);
}

template <typename T>
double TransformerT<T>::loss_and_grad(const TokenBatch& tokens, std::span<T> grad) const {
  require(grad.size() == params_.size(), ErrorCode::kDimensionMismatch,
          "gradient buffer size mismatch");
  require(tokens.seq_len >= 2, ErrorCode::kInvalidArgument,
          "training needs >= 2 tokens per sequence");
  Cache cache;
  MatT<T> logits = run(tokens, nullptr, &cache);
  const double loss_value = next_token_nll(logits, tokens);

  const LmConfig& c = config_;
  const Layout lay(c);
  const T* p = params_.data();
  T* g = grad.data();
  std::fill(grad.begin(), grad.end(), T(0));
  const Eigen::Index d = c.d_model, n = tokens.rows(), seq = tokens.seq_len;
  const Eigen::Index heads = c.n_heads, hd = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  const T inv_count = T(1) / static_cast<T>(tokens.batch * (tokens.seq_len - 1));

  // dL/dlogits = (softmax - onehot) / count on positions with a successor.
  MatT<T> dlogits = MatT<T>::Zero(n, c.vocab_size);
  for (Eigen::Index r = 0; r < n; ++r) {
    if (r % seq == seq - 1) continue;
    const auto row = logits.row(r);
    const T mx = row.maxCoeff();
    RowVecT<T> e = (row.array() - mx).exp().matrix();
    e /= e.sum();
    e(tokens.tokens[static_cast<std::size_t>(r + 1)]) -= T(1);
    dlogits.row(r) = e * inv_count;
  }

  auto gw_out = mat_map(g, lay.w_out, d, c.vocab_size);
  auto gb_out = row_map(g, lay.b_out, c.vocab_size);
  gw_out.noalias() += cache.lnf.transpose() * dlogits;
  gb_out += dlogits.colwise().sum();
  MatT<T> dlnf = dlogits * mat_map(p, lay.w_out, d, c.vocab_size).transpose();
  MatT<T> dx = layernorm_backward(cache.x_final, cache.meanf, cache.rstdf,
                                  row_map(p, lay.lnf_g, d), dlnf, row_map(g, lay.lnf_g, d),
                                  row_map(g, lay.lnf_b, d));

  MatT<T> dfc, dln, dqkv, datt, dscores, dp;
  for (int l = c.n_layers - 1; l >= 0; --l) {
    const auto& b = lay.blocks[l];
    const auto& bc = cache.blocks[l];

    // MLP sublayer: x_out = x_mid + gelu(ln2 W_fc + b_fc) W_proj + b_proj
    const auto w_proj = mat_map(p, b.w_proj, c.d_ff, d);
    mat_map(g, b.w_proj, c.d_ff, d).noalias() += bc.fc_act.transpose() * dx;
    row_map(g, b.b_proj, d) += dx.colwise().sum();
    dfc.noalias() = dx * w_proj.transpose();
    dfc.array() *= bc.fc_pre.unaryExpr([](T v) { return gelu_grad(v); }).array();
    mat_map(g, b.w_fc, d, c.d_ff).noalias() += bc.ln2.transpose() * dfc;
    row_map(g, b.b_fc, c.d_ff) += dfc.colwise().sum();
    dln.noalias() = dfc * mat_map(p, b.w_fc, d, c.d_ff).transpose();
    dx += layernorm_backward(bc.x_mid, bc.mean2, bc.rstd2, row_map(p, b.ln2_g, d), dln,
                             row_map(g, b.ln2_g, d), row_map(g, b.ln2_b, d));

    // Attention sublayer: x_mid = x_in + att W_o + b_o
    mat_map(g, b.w_o, d, d).noalias() += bc.att.transpose() * dx;
    row_map(g, b.b_o, d) += dx.colwise().sum();
    datt.noalias() = dx * mat_map(p, b.w_o, d, d).transpose();
    dqkv.setZero(n, 3 * d);
    for (int s = 0; s < tokens.batch; ++s) {
      const Eigen::Index r0 = s * seq;
      for (Eigen::Index h = 0; h < heads; ++h) {
        const MatT<T>& probs = bc.probs[static_cast<std::size_t>(s * heads + h)];
        const auto q = bc.qkv.block(r0, h * hd, seq, hd);
        const auto k = bc.qkv.block(r0, d + h * hd, seq, hd);
        const auto v = bc.qkv.block(r0, 2 * d + h * hd, seq, hd);
        const auto dout = datt.block(r0, h * hd, seq, hd);
        dp.noalias() = dout * v.transpose();
        dqkv.block(r0, 2 * d + h * hd, seq, hd).noalias() += probs.transpose() * dout;
        dscores.resize(seq, seq);
        for (Eigen::Index i = 0; i < seq; ++i) {
          T dot = 0;
          for (Eigen::Index j = 0; j <= i; ++j) dot += dp(i, j) * probs(i, j);
          for (Eigen::Index j = 0; j <= i; ++j) dscores(i, j) = probs(i, j) * (dp(i, j) - dot) * scale;
          for (Eigen::Index j = i + 1; j < seq; ++j) dscores(i, j) = 0;
        }
        dqkv.block(r0, h * hd, seq, hd).noalias() += dscores * k;
        dqkv.block(r0, d + h * hd, seq, hd).noalias() += dscores.transpose() * q;
      }
    }
    mat_map(g, b.w_qkv, d, 3 * d).noalias() += bc.ln1.transpose() * dqkv;
    row_map(g, b.b_qkv, 3 * d) += dqkv.colwise().sum();
    dln.noalias() = dqkv * mat_map(p, b.w_qkv, d, 3 * d).transpose();
    dx += layernorm_backward(bc.x_in, bc.mean1, bc.rstd1, row_map(p, b.ln1_g, d), dln,
                             row_map(g, b.ln1_g, d), row_map(g, b.ln1_b, d));
  }

  auto gwte = mat_map(g, lay.wte, c.vocab_size, d);
  auto gwpe = mat_map(g, lay.wpe, c.context_len, d);
  for (Eigen::Index r = 0; r < n; ++r) {
    gwte.row(tokens.tokens[static_cast<std::size_t>(r)]) += dx.row(r);
    gwpe.row(r % seq) += dx.row(r);
  }
  return loss_value;
}

template class HookSetT<float>;
template class HookSetT<double>;
template class TransformerT<float>;
template class TransformerT<double>;
template double next_token_nll<float>(const MatT<float>&, const TokenBatch&);
template double next_token_nll<double>(const MatT<double>&, const TokenBatch&);

CaptureResult forward_capture(const TinyLm& lm, const TokenBatch& tokens,
                              std::span<const int> layers, HookPlacement placement) {
  CaptureResult out;
  out.activations.resize(layers.size());
  HookSet hooks(placement);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    require(layers[i] >= 0 && layers[i] < lm.config().n_layers, ErrorCode::kOutOfRange,
            "capture layer " + std::to_string(layers[i]) + " out of range");
    hooks.add(layers[i], [&out, i](int, const Mat& arriving) {
      out.activations[i] = arriving;
      return arriving;
    });
  }
  out.logits = lm.forward(tokens, hooks.empty() ? nullptr : &hooks);
  return out;
}

Mat forward_hooked(const TinyLm& lm, const TokenBatch& tokens, const HookSet& hooks) {
  return lm.forward(tokens, &hooks);
}

double cross_entropy(const TinyLm& lm, const TokenBatch& tokens, const HookSet* hooks) {
  return next_token_nll(lm.forward(tokens, hooks), tokens);
}

TokenBatch corpus_windows(std::span<const std::uint8_t> corpus, int seq_len,
                          std::size_t first_window, std::size_t count) {
  require(seq_len >= 1, ErrorCode::kInvalidArgument, "seq_len must be >= 1");
  const std::size_t len = static_cast<std::size_t>(seq_len);
  require((first_window + count) * len <= corpus.size(), ErrorCode::kOutOfRange,
          "corpus has too few windows");
  TokenBatch b;
  b.batch = static_cast<int>(count);
  b.seq_len = seq_len;
  b.tokens.assign(corpus.begin() + static_cast<std::ptrdiff_t>(first_window * len),
                  corpus.begin() + static_cast<std::ptrdiff_t>((first_window + count) * len));
  return b;
}

double heldout_cross_entropy(const TinyLm& lm, std::span<const std::uint8_t> corpus,
                             double heldout_fraction, int max_windows) {
  const int t = lm.config().context_len;
  const std::size_t start =
      static_cast<std::size_t>(static_cast<double>(corpus.size()) * (1.0 - heldout_fraction));
  const auto held = corpus.subspan(start);
  std::size_t windows = std::min<std::size_t>(held.size() / static_cast<std::size_t>(t),
                                              static_cast<std::size_t>(max_windows));
  require(windows >= 1, ErrorCode::kInvalidArgument, "held-out split shorter than context_len");
  double total = 0.0;
  for (std::size_t w = 0; w < windows; w += 8) {
    const std::size_t cnt = std::min<std::size_t>(8, windows - w);
    const TokenBatch b = corpus_windows(held, t, w, cnt);
    total += cross_entropy(lm, b) * static_cast<double>(cnt);
  }
  return total / static_cast<double>(windows);
}

TinyLm train_lm(std::span<const std::uint8_t> corpus, const LmConfig& config,
                const TrainLmOptions& options, TrainLmResult* result) {
  config.validate();
  const std::size_t t = static_cast<std::size_t>(config.context_len);
  require(corpus.size() >= t, ErrorCode::kInvalidArgument,
          "corpus shorter than context_len");
  require(options.steps >= 0 && options.batch_size >= 1, ErrorCode::kInvalidArgument,
          "train_lm: steps must be >= 0 and batch_size >= 1");

  TinyLm lm(config);
  std::size_t n_train =
      static_cast<std::size_t>(static_cast<double>(corpus.size()) * (1.0 - options.heldout_fraction));
  if (n_train < t + 1) n_train = corpus.size();
  const bool have_heldout = corpus.size() - static_cast<std::size_t>(static_cast<double>(corpus.size()) *
                                                                     (1.0 - options.heldout_fraction)) >= t;
  if (result != nullptr && have_heldout) {
    result->initial_heldout_ce =
        heldout_cross_entropy(lm, corpus, options.heldout_fraction, options.eval_windows);
  }

  const std::size_t np = lm.num_parameters();
  AlignedVector<float> grad(np);
  std::vector<float> m(np, 0.0f), v(np, 0.0f);
  std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_int_distribution<std::size_t> start_dist(0, n_train - t);
  const double beta1 = 0.9, beta2 = 0.95, eps = 1e-8;
  double last_loss = 0.0;

  TokenBatch batch;
  batch.batch = options.batch_size;
  batch.seq_len = config.context_len;
  batch.tokens.resize(static_cast<std::size_t>(options.batch_size) * t);

  for (int step = 0; step < options.steps; ++step) {
    for (int b = 0; b < options.batch_size; ++b) {
      const std::size_t s = start_dist(rng);
      std::copy_n(corpus.begin() + static_cast<std::ptrdiff_t>(s), t,
                  batch.tokens.begin() + static_cast<std::ptrdiff_t>(b * t));
    }
    last_loss = lm.loss_and_grad(batch, grad);
    require(std::isfinite(last_loss), ErrorCode::kNumerical,
            "non-finite LM loss at step " + std::to_string(step) + " (learning rate too high?)");

    double norm2 = 0.0;
    for (float gi : grad) norm2 += static_cast<double>(gi) * gi;
    const double norm = std::sqrt(norm2);
    const double clip = (options.grad_clip > 0 && norm > options.grad_clip)
                            ? options.grad_clip / norm : 1.0;

    // Linear warmup, then cosine decay to 10% of the peak rate.
    double lr = options.lr;
    if (step < options.warmup_steps) {
      lr *= static_cast<double>(step + 1) / options.warmup_steps;
    } else {
      const double span = std::max(1, options.steps - options.warmup_steps);
      const double prog = (step - options.warmup_steps) / span;
      lr *= 0.1 + 0.9 * 0.5 * (1.0 + std::cos(std::numbers::pi * prog));
    }
    const double bc1 = 1.0 - std::pow(beta1, step + 1);
    const double bc2 = 1.0 - std::pow(beta2, step + 1);
    auto params = lm.parameters();
    for (std::size_t i = 0; i < np; ++i) {
      const double gi = grad[i] * clip;
      m[i] = static_cast<float>(beta1 * m[i] + (1 - beta1) * gi);
      v[i] = static_cast<float>(beta2 * v[i] + (1 - beta2) * gi * gi);
      params[i] -= static_cast<float>(lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps));
    }
  }

  if (result != nullptr) {
    result->final_train_loss = last_loss;
    if (have_heldout) {
      result->final_heldout_ce =
          heldout_cross_entropy(lm, corpus, options.heldout_fraction, options.eval_windows);
    }
  }
  return lm;
}

// TLM1 layout: magic, then n_layers, d_model, n_heads, d_ff, vocab_size,
// context_len as u32 and seed as u64, then every parameter as f32 in Layout
// order.
void save_lm(const TinyLm& lm, const std::filesystem::path& path) {
  const LmConfig& c = lm.config();
  binio::Writer w(path);
  w.magic("TLM1");
  for (int v : {c.n_layers, c.d_model, c.n_heads, c.d_ff, c.vocab_size, c.context_len}) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(v));
  }
  w.put<std::uint64_t>(c.seed);
  w.put_array<float>(lm.parameters());
  w.close();
}

TinyLm load_lm(const std::filesystem::path& path) {
  binio::Reader r(path);
  r.expect_magic("TLM1");
  LmConfig c;
  c.n_layers = static_cast<int>(r.get<std::uint32_t>());
  c.d_model = static_cast<int>(r.get<std::uint32_t>());
  c.n_heads = static_cast<int>(r.get<std::uint32_t>());
  c.d_ff = static_cast<int>(r.get<std::uint32_t>());
  c.vocab_size = static_cast<int>(r.get<std::uint32_t>());
  c.context_len = static_cast<int>(r.get<std::uint32_t>());
  c.seed = r.get<std::uint64_t>();
  try {
    c.validate();
  } catch (const Error& e) {
    fail(ErrorCode::kFormat, path.string() + ": invalid config in header: " + e.what());
  }
  TinyLm lm(c, ZeroInit{});
  r.get_array<float>(lm.parameters());
  r.expect_eof();
  return lm;
}

}  // namespace resae
