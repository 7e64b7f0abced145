#pragma once

#include <limits>
#include <optional>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "repa/model.hpp"
#include "repa/nn.hpp"
#include "repa/tensor.hpp"

namespace repa {

// Gradient accumulator keyed by parameter name. Slots exist only for
// trainable parameters; accumulation into a missing slot is a no-op, which is
// how frozen parameters never get gradients allocated or applied.
template <ScalarType T>
struct GradSink {
  std::unordered_map<std::string, Tensor<T>> slots;

  bool want(const std::string& name) const { return slots.count(name) != 0; }

  void accum(const std::string& name, const Tensor<T>& g) {
    auto it = slots.find(name);
    if (it == slots.end()) return;
    detail::require(it->second.same_shape(g), "grad: shape mismatch for " + name);
    for (std::size_t i = 0; i < g.numel(); ++i) it->second[i] += g[i];
  }

  void zero() {
    for (auto& [k, v] : slots) std::fill(v.data().begin(), v.data().end(), T{0});
  }
};

// ---- per-module caches ---------------------------------------------------------

template <ScalarType T>
struct LnCache {
  Tensor<T> xhat;
  std::vector<T> inv;  // per-row 1/sqrt(var + eps)
};

template <ScalarType T>
struct MhaCache {
  Tensor<T> x, Q, K, V, concat;
  std::vector<Tensor<T>> attn;  // per-head weights
};

template <ScalarType T>
struct FfnCache {
  Tensor<T> x, pre_act, act;
};

template <ScalarType T>
struct AdapterCache {
  Tensor<T> x, down_out, act_out;
};

template <ScalarType T>
struct VitBlockCache {
  Tensor<T> x;
  LnCache<T> ln1;
  Tensor<T> h1;
  std::optional<AdapterCache<T>> pre_attn;
  MhaCache<T> attn;
  std::optional<AdapterCache<T>> post_attn;
  Tensor<T> x1;
  LnCache<T> ln2;
  Tensor<T> h2;
  std::optional<AdapterCache<T>> pre_ffn;
  FfnCache<T> ffn;
  std::optional<AdapterCache<T>> post_ffn;
  std::optional<AdapterCache<T>> parallel;
};

template <ScalarType T>
struct ConvBlockCache {
  Tensor<T> x_img;    // block input image
  std::optional<AdapterCache<T>> pre;
  Tensor<T> conv_in;  // image entering the conv (post-adapter)
};

template <ScalarType T>
using BlockCache = std::variant<VitBlockCache<T>, ConvBlockCache<T>>;

template <ScalarType T>
struct ModelCache {
  std::vector<BlockCache<T>> caches;
  Tensor<T> features, pooled, logits;
};

// ---- forward passes that record what backward needs ------------------------------

template <ScalarType T>
Tensor<T> ln_forward_cached(const LayerNorm<T>& ln, const Tensor<T>& x, LnCache<T>& c) {
  const std::size_t n = x.rows(), d = x.cols();
  c.xhat = Tensor<T>({n, d});
  c.inv.assign(n, T{0});
  Tensor<T> out({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    T mean{0};
    for (std::size_t j = 0; j < d; ++j) mean += x(i, j);
    mean /= static_cast<T>(d);
    T var{0};
    for (std::size_t j = 0; j < d; ++j) {
      const T cc = x(i, j) - mean;
      var += cc * cc;
    }
    var /= static_cast<T>(d);
    const T inv = T{1} / std::sqrt(var + ln.eps);
    c.inv[i] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      c.xhat(i, j) = (x(i, j) - mean) * inv;
      out(i, j) = ln.gamma[j] * c.xhat(i, j) + ln.beta[j];
    }
  }
  return out;
}

template <ScalarType T>
Tensor<T> affine_backward(const AffineMap<T>& a, const Tensor<T>& x, const Tensor<T>& dy,
                          GradSink<T>& sink, const std::string& prefix) {
  if (sink.want(prefix + ".W")) sink.accum(prefix + ".W", matmul(transpose(x), dy));
  if (a.b && sink.want(prefix + ".b")) sink.accum(prefix + ".b", col_sums(dy));
  return matmul(dy, transpose(a.W));
}

template <ScalarType T>
Tensor<T> groupwise_backward(const GroupwiseLinear<T>& g, const Tensor<T>& x,
                             const Tensor<T>& dy, GradSink<T>& sink,
                             const std::string& prefix) {
  const std::size_t cg = g.blocks[0].dim(0), dg = g.blocks[0].dim(1);
  std::vector<Tensor<T>> dx_parts;
  dx_parts.reserve(g.groups);
  for (std::size_t i = 0; i < g.groups; ++i) {
    auto xg = slice_cols(x, i * cg, (i + 1) * cg);
    auto dyg = slice_cols(dy, i * dg, (i + 1) * dg);
    const std::string wname = prefix + ".W" + std::to_string(i);
    if (sink.want(wname)) sink.accum(wname, matmul(transpose(xg), dyg));
    dx_parts.push_back(matmul(dyg, transpose(g.blocks[i])));
  }
  if (g.b && sink.want(prefix + ".b")) sink.accum(prefix + ".b", col_sums(dy));
  return concat_cols(dx_parts);
}

template <ScalarType T>
Tensor<T> ln_backward(const LayerNorm<T>& ln, const LnCache<T>& c, const Tensor<T>& dy,
                      GradSink<T>& sink, const std::string& prefix) {
  const std::size_t n = dy.rows(), d = dy.cols();
  if (sink.want(prefix + ".gamma")) sink.accum(prefix + ".gamma", col_sums(hadamard(dy, c.xhat)));
  if (sink.want(prefix + ".beta")) sink.accum(prefix + ".beta", col_sums(dy));
  Tensor<T> dx({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    T mean_g{0}, mean_gx{0};
    for (std::size_t j = 0; j < d; ++j) {
      const T gj = dy(i, j) * ln.gamma[j];
      mean_g += gj;
      mean_gx += gj * c.xhat(i, j);
    }
    mean_g /= static_cast<T>(d);
    mean_gx /= static_cast<T>(d);
    for (std::size_t j = 0; j < d; ++j) {
      const T gj = dy(i, j) * ln.gamma[j];
      dx(i, j) = c.inv[i] * (gj - mean_g - c.xhat(i, j) * mean_gx);
    }
  }
  return dx;
}

template <ScalarType T>
Tensor<T> mha_forward_cached(const MultiHeadAttention<T>& mha, const Tensor<T>& x,
                             MhaCache<T>& c) {
  mha.validate();
  const std::size_t dk = mha.head_dim();
  const T alpha = T{1} / std::sqrt(static_cast<T>(dk));
  c.x = x;
  c.Q = mha.q.forward(x);
  c.K = mha.k.forward(x);
  c.V = mha.v.forward(x);
  c.attn.clear();
  std::vector<Tensor<T>> heads;
  for (std::size_t h = 0; h < mha.n_heads; ++h) {
    auto Qh = slice_cols(c.Q, h * dk, (h + 1) * dk);
    auto Kh = slice_cols(c.K, h * dk, (h + 1) * dk);
    auto Vh = slice_cols(c.V, h * dk, (h + 1) * dk);
    auto A = softmax_rows(scale(matmul(Qh, transpose(Kh)), alpha));
    heads.push_back(matmul(A, Vh));
    c.attn.push_back(std::move(A));
  }
  c.concat = concat_cols(heads);
  return mha.out.forward(c.concat);
}

template <ScalarType T>
Tensor<T> mha_backward(const MultiHeadAttention<T>& mha, const MhaCache<T>& c,
                       const Tensor<T>& dy, GradSink<T>& sink, const std::string& prefix) {
  const std::size_t dk = mha.head_dim();
  const T alpha = T{1} / std::sqrt(static_cast<T>(dk));
  auto dconcat = affine_backward(mha.out, c.concat, dy, sink, prefix + ".out");

  std::vector<Tensor<T>> dQ_parts, dK_parts, dV_parts;
  for (std::size_t h = 0; h < mha.n_heads; ++h) {
    auto Qh = slice_cols(c.Q, h * dk, (h + 1) * dk);
    auto Kh = slice_cols(c.K, h * dk, (h + 1) * dk);
    auto Vh = slice_cols(c.V, h * dk, (h + 1) * dk);
    auto dOh = slice_cols(dconcat, h * dk, (h + 1) * dk);
    const auto& A = c.attn[h];

    auto dA = matmul(dOh, transpose(Vh));
    dV_parts.push_back(matmul(transpose(A), dOh));

    // softmax backward: dS = A o (dA - rowsum(dA o A))
    Tensor<T> dS(A.shape());
    for (std::size_t i = 0; i < A.rows(); ++i) {
      T dot{0};
      for (std::size_t j = 0; j < A.cols(); ++j) dot += dA(i, j) * A(i, j);
      for (std::size_t j = 0; j < A.cols(); ++j) dS(i, j) = A(i, j) * (dA(i, j) - dot);
    }
    dQ_parts.push_back(scale(matmul(dS, Kh), alpha));
    dK_parts.push_back(scale(matmul(transpose(dS), Qh), alpha));
  }
  auto dQ = concat_cols(dQ_parts);
  auto dK = concat_cols(dK_parts);
  auto dV = concat_cols(dV_parts);

  auto dx = affine_backward(mha.q, c.x, dQ, sink, prefix + ".q");
  dx = add(dx, affine_backward(mha.k, c.x, dK, sink, prefix + ".k"));
  dx = add(dx, affine_backward(mha.v, c.x, dV, sink, prefix + ".v"));
  return dx;
}

template <ScalarType T>
Tensor<T> ffn_forward_cached(const FeedForward<T>& ffn, const Tensor<T>& x, FfnCache<T>& c) {
  c.x = x;
  c.pre_act = ffn.fc1.forward(x);
  c.act = gelu(c.pre_act);
  return ffn.fc2.forward(c.act);
}

template <ScalarType T>
Tensor<T> ffn_backward(const FeedForward<T>& ffn, const FfnCache<T>& c, const Tensor<T>& dy,
                       GradSink<T>& sink, const std::string& prefix) {
  auto dact = affine_backward(ffn.fc2, c.act, dy, sink, prefix + ".fc2");
  Tensor<T> dpre(dact.shape());
  for (std::size_t i = 0; i < dpre.numel(); ++i)
    dpre[i] = dact[i] * gelu_prime_scalar(c.pre_act[i]);
  return affine_backward(ffn.fc1, c.x, dpre, sink, prefix + ".fc1");
}

namespace detail {

template <ScalarType T>
Tensor<T> act_prime_times(Activation act, const Tensor<T>& pre, const Tensor<T>& dz) {
  if (act == Activation::none) return dz;
  Tensor<T> out(dz.shape());
  if (act == Activation::gelu) {
    for (std::size_t i = 0; i < dz.numel(); ++i) out[i] = dz[i] * gelu_prime_scalar(pre[i]);
  } else {
    for (std::size_t i = 0; i < dz.numel(); ++i) out[i] = pre[i] > T{0} ? dz[i] : T{0};
  }
  return out;
}

}  // namespace detail

template <ScalarType T>
Tensor<T> adapter_forward_cached(const Adapter<T>& a, const Tensor<T>& x, AdapterCache<T>& c,
                                 bool include_residual) {
  c.x = x;
  if (std::holds_alternative<RepAdapterModule<T>>(a)) {
    const auto& r = std::get<RepAdapterModule<T>>(a);
    c.down_out = groupwise_forward(r.down, x);
    c.act_out = apply_activation(r.act, c.down_out);
    auto branch = scale(groupwise_forward(r.up, c.act_out), r.scaling);
    return include_residual ? add(x, branch) : branch;
  }
  const auto& b = std::get<BaselineAdapter<T>>(a);
  c.down_out = b.down.forward(x);
  c.act_out = apply_activation(b.act, c.down_out);
  auto branch = scale(b.up.forward(c.act_out), b.scaling);
  return include_residual ? add(x, branch) : branch;
}

template <ScalarType T>
Tensor<T> adapter_backward(const Adapter<T>& a, const AdapterCache<T>& c, const Tensor<T>& dy,
                           GradSink<T>& sink, const std::string& prefix,
                           bool include_residual) {
  Tensor<T> dx_branch;
  if (std::holds_alternative<RepAdapterModule<T>>(a)) {
    const auto& r = std::get<RepAdapterModule<T>>(a);
    auto dbranch = scale(dy, r.scaling);
    auto dz = groupwise_backward(r.up, c.act_out, dbranch, sink, prefix + ".up");
    dz = detail::act_prime_times(r.act, c.down_out, dz);
    dx_branch = groupwise_backward(r.down, c.x, dz, sink, prefix + ".down");
  } else {
    const auto& b = std::get<BaselineAdapter<T>>(a);
    auto dbranch = scale(dy, b.scaling);
    auto dz = affine_backward(b.up, c.act_out, dbranch, sink, prefix + ".up");
    dz = detail::act_prime_times(b.act, c.down_out, dz);
    dx_branch = affine_backward(b.down, c.x, dz, sink, prefix + ".down");
  }
  return include_residual ? add(dy, dx_branch) : dx_branch;
}

template <ScalarType T>
Tensor<T> vit_block_forward_cached(const ViTBlock<T>& blk, const Tensor<T>& x,
                                   VitBlockCache<T>& c) {
  c.x = x;
  c.h1 = ln_forward_cached(blk.ln1, x, c.ln1);
  auto ha = c.h1;
  if (blk.has(Site::pre_attn)) {
    c.pre_attn.emplace();
    ha = adapter_forward_cached(blk.adapters.at(Site::pre_attn), ha, *c.pre_attn, true);
  }
  auto a = mha_forward_cached(blk.attn, ha, c.attn);
  if (blk.has(Site::post_attn)) {
    c.post_attn.emplace();
    a = adapter_forward_cached(blk.adapters.at(Site::post_attn), a, *c.post_attn, true);
  }
  c.x1 = add(a, x);

  c.h2 = ln_forward_cached(blk.ln2, c.x1, c.ln2);
  auto hf = c.h2;
  if (blk.has(Site::pre_ffn)) {
    c.pre_ffn.emplace();
    hf = adapter_forward_cached(blk.adapters.at(Site::pre_ffn), hf, *c.pre_ffn, true);
  }
  auto f = ffn_forward_cached(blk.ffn, hf, c.ffn);
  if (blk.has(Site::post_ffn)) {
    c.post_ffn.emplace();
    f = adapter_forward_cached(blk.adapters.at(Site::post_ffn), f, *c.post_ffn, true);
  }
  if (blk.has(Site::parallel_ffn)) {
    c.parallel.emplace();
    f = add(f, adapter_forward_cached(blk.adapters.at(Site::parallel_ffn), c.x1, *c.parallel,
                                      false));
  }
  return add(f, c.x1);
}

template <ScalarType T>
Tensor<T> vit_block_backward(const ViTBlock<T>& blk, const VitBlockCache<T>& c,
                             const Tensor<T>& dy, GradSink<T>& sink,
                             const std::string& prefix) {
  // y = f_path + x1 (+ parallel branch into f_path)
  Tensor<T> dx1 = dy;
  Tensor<T> df = dy;
  if (blk.has(Site::parallel_ffn))
    dx1 = add(dx1, adapter_backward(blk.adapters.at(Site::parallel_ffn), *c.parallel, df,
                                    sink, prefix + ".adapter.parallel_ffn", false));
  if (blk.has(Site::post_ffn))
    df = adapter_backward(blk.adapters.at(Site::post_ffn), *c.post_ffn, df, sink,
                          prefix + ".adapter.post_ffn", true);
  auto dhf = ffn_backward(blk.ffn, c.ffn, df, sink, prefix + ".ffn");
  if (blk.has(Site::pre_ffn))
    dhf = adapter_backward(blk.adapters.at(Site::pre_ffn), *c.pre_ffn, dhf, sink,
                           prefix + ".adapter.pre_ffn", true);
  dx1 = add(dx1, ln_backward(blk.ln2, c.ln2, dhf, sink, prefix + ".ln2"));

  // x1 = attn_path + x
  Tensor<T> dx = dx1;
  Tensor<T> da = dx1;
  if (blk.has(Site::post_attn))
    da = adapter_backward(blk.adapters.at(Site::post_attn), *c.post_attn, da, sink,
                          prefix + ".adapter.post_attn", true);
  auto dha = mha_backward(blk.attn, c.attn, da, sink, prefix + ".attn");
  if (blk.has(Site::pre_attn))
    dha = adapter_backward(blk.adapters.at(Site::pre_attn), *c.pre_attn, dha, sink,
                           prefix + ".adapter.pre_attn", true);
  dx = add(dx, ln_backward(blk.ln1, c.ln1, dha, sink, prefix + ".ln1"));
  return dx;
}

template <ScalarType T>
Tensor<T> conv_backward(const ConvLayer<T>& conv, const Tensor<T>& x, const Tensor<T>& dy,
                        GradSink<T>& sink, const std::string& prefix) {
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::size_t K = conv.ksize(), P = conv.padding, S = conv.stride;
  const std::size_t Co = conv.out_channels(), Ho = dy.dim(1), Wo = dy.dim(2);
  const bool want_k = sink.want(prefix + ".kernel");
  const bool want_b = conv.bias && sink.want(prefix + ".bias");
  Tensor<T> dkernel(conv.kernel.shape());
  Tensor<T> dbias({Co});
  Tensor<T> dx(x.shape());
  for (std::size_t o = 0; o < Co; ++o) {
    for (std::size_t oh = 0; oh < Ho; ++oh) {
      for (std::size_t ow = 0; ow < Wo; ++ow) {
        const T g = dy[(o * Ho + oh) * Wo + ow];
        dbias[o] += g;
        for (std::size_t c = 0; c < C; ++c) {
          for (std::size_t u = 0; u < K; ++u) {
            for (std::size_t v = 0; v < K; ++v) {
              const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * S + u) -
                                        static_cast<std::ptrdiff_t>(P);
              const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * S + v) -
                                        static_cast<std::ptrdiff_t>(P);
              if (ih < 0 || iw < 0 || ih >= static_cast<std::ptrdiff_t>(H) ||
                  iw >= static_cast<std::ptrdiff_t>(W))
                continue;
              const std::size_t xi = (c * H + static_cast<std::size_t>(ih)) * W +
                                     static_cast<std::size_t>(iw);
              dkernel[((o * C + c) * K + u) * K + v] += g * x[xi];
              dx[xi] += g * conv.kernel[((o * C + c) * K + u) * K + v];
            }
          }
        }
      }
    }
  }
  if (want_k) sink.accum(prefix + ".kernel", dkernel);
  if (want_b) sink.accum(prefix + ".bias", dbias);
  return dx;
}

// ---- whole-model passes -----------------------------------------------------------

template <ScalarType T>
Tensor<T> model_forward_cached(const BackboneGraph<T>& m, const Tensor<T>& input,
                               ModelCache<T>& cache) {
  Tensor<T> x = input;
  if (m.embed) x = patch_embed_forward(*m.embed, x);  // frozen; gradients stop here
  cache.caches.clear();
  for (const auto& blk : m.blocks) {
    if (std::holds_alternative<ViTBlock<T>>(blk)) {
      VitBlockCache<T> c;
      x = vit_block_forward_cached(std::get<ViTBlock<T>>(blk), x, c);
      cache.caches.emplace_back(std::move(c));
    } else {
      const auto& b = std::get<ConvBlock<T>>(blk);
      ConvBlockCache<T> c;
      c.x_img = x;
      Tensor<T> conv_in = x;
      if (b.pre) {
        c.pre.emplace();
        auto rows = image_to_rows(x);
        rows = adapter_forward_cached(*b.pre, rows, *c.pre, true);
        conv_in = rows_to_image(rows, x.dim(1), x.dim(2));
      }
      c.conv_in = conv_in;
      x = conv2d_forward(b.conv, conv_in);
      cache.caches.emplace_back(std::move(c));
    }
  }
  cache.features = x;
  detail::require(m.head.has_value(), "backward-capable forward requires a classifier head");
  cache.pooled = pooled_features(m, x);
  cache.logits = m.head->forward(cache.pooled);
  return cache.logits;
}

// Backpropagates dlogits through head, pooling and all blocks, accumulating
// parameter gradients into the sink. Returns d(input features).
template <ScalarType T>
Tensor<T> model_backward(const BackboneGraph<T>& m, const ModelCache<T>& cache,
                         const Tensor<T>& dlogits, GradSink<T>& sink) {
  detail::require(cache.caches.size() == m.blocks.size() && cache.features.numel() > 0,
                  "model_backward: forward cache does not match model (run forward first)");
  auto dpooled = affine_backward(*m.head, cache.pooled, dlogits, sink, "head");

  // un-pool
  Tensor<T> dfeat(cache.features.shape());
  if (cache.features.rank() == 3) {
    const std::size_t C = dfeat.dim(0), HW = dfeat.dim(1) * dfeat.dim(2);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < HW; ++p)
        dfeat[c * HW + p] = dpooled(0, c) / static_cast<T>(HW);
  } else if (m.pooling == Pooling::cls) {
    for (std::size_t j = 0; j < dfeat.cols(); ++j) dfeat(0, j) = dpooled(0, j);
  } else {
    const T invn = T{1} / static_cast<T>(dfeat.rows());
    for (std::size_t i = 0; i < dfeat.rows(); ++i)
      for (std::size_t j = 0; j < dfeat.cols(); ++j) dfeat(i, j) = dpooled(0, j) * invn;
  }

  Tensor<T> dx = dfeat;
  for (std::size_t i = m.blocks.size(); i-- > 0;) {
    const std::string bp = "blocks." + std::to_string(i);
    if (std::holds_alternative<ViTBlock<T>>(m.blocks[i])) {
      dx = vit_block_backward(std::get<ViTBlock<T>>(m.blocks[i]),
                              std::get<VitBlockCache<T>>(cache.caches[i]), dx, sink, bp);
    } else {
      const auto& b = std::get<ConvBlock<T>>(m.blocks[i]);
      const auto& c = std::get<ConvBlockCache<T>>(cache.caches[i]);
      dx = conv_backward(b.conv, c.conv_in, dx, sink, bp + ".conv");
      if (b.pre) {
        auto drows = image_to_rows(dx);
        drows = adapter_backward(*b.pre, *c.pre, drows, sink, bp + ".adapter.pre_conv", true);
        dx = rows_to_image(drows, c.x_img.dim(1), c.x_img.dim(2));
      }
    }
  }
  return dx;
}

// ---- loss -----------------------------------------------------------------------

template <ScalarType T>
struct LossGrad {
  T loss;
  Tensor<T> dlogits;
};

// softmax cross-entropy for one sample; weight scales both loss and gradient
// (pass 1/batch to accumulate batch means)
template <ScalarType T>
LossGrad<T> softmax_xent(const Tensor<T>& logits, std::size_t target, T weight = T{1}) {
  detail::require(logits.rank() == 2 && logits.rows() == 1, "loss: logits must be 1 x C");
  detail::require(target < logits.cols(), "loss: target out of range");
  const std::size_t C = logits.cols();
  T mx = logits(0, 0);
  for (std::size_t j = 1; j < C; ++j) mx = std::max(mx, logits(0, j));
  T sum{0};
  Tensor<T> p({1, C});
  for (std::size_t j = 0; j < C; ++j) {
    p(0, j) = std::exp(logits(0, j) - mx);
    sum += p(0, j);
  }
  for (std::size_t j = 0; j < C; ++j) p(0, j) /= sum;
  LossGrad<T> out;
  out.loss = -std::log(std::max(p(0, target), std::numeric_limits<T>::min())) * weight;
  out.dlogits = p;
  out.dlogits(0, target) -= T{1};
  for (std::size_t j = 0; j < C; ++j) out.dlogits(0, j) *= weight;
  return out;
}

// mean-squared-error against a target matrix; used by tests with closed forms
template <ScalarType T>
LossGrad<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  detail::require_same_shape(pred, target, "mse");
  LossGrad<T> out;
  out.loss = T{0};
  out.dlogits = Tensor<T>(pred.shape());
  const T invn = T{1} / static_cast<T>(pred.numel());
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const T d = pred[i] - target[i];
    out.loss += d * d * invn;
    out.dlogits[i] = T{2} * d * invn;
  }
  return out;
}

}  // namespace repa
