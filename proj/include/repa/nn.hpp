#pragma once

#include <optional>
#include <string>
#include <vector>

#include "repa/tensor.hpp"

namespace repa {

// y = xW + b. Missing bias is treated as zeros.
template <ScalarType T>
struct AffineMap {
  Tensor<T> W;                  // d_in x d_out
  std::optional<Tensor<T>> b;   // d_out

  std::size_t in_dim() const { return W.dim(0); }
  std::size_t out_dim() const { return W.dim(1); }

  Tensor<T> forward(const Tensor<T>& x) const {
    auto y = matmul(x, W);
    if (b) y = add_row(y, *b);
    return y;
  }
};

template <ScalarType T>
struct LayerNorm {
  Tensor<T> gamma;  // d
  Tensor<T> beta;   // d
  T eps = static_cast<T>(1e-6);

  static LayerNorm make(std::size_t d) {
    return {Tensor<T>::full({d}, T{1}), Tensor<T>::zeros({d}), static_cast<T>(1e-6)};
  }

  Tensor<T> forward(const Tensor<T>& x) const { return layernorm(x, gamma, beta, eps); }
};

// Q/K/V are stored as full d x d maps; heads are realized by column slicing.
// Keeping them whole means an adapter merge touches exactly three matrices.
template <ScalarType T>
struct MultiHeadAttention {
  std::size_t n_heads = 1;
  AffineMap<T> q, k, v, out;

  std::size_t width() const { return q.in_dim(); }
  std::size_t head_dim() const { return width() / n_heads; }

  void validate() const {
    detail::require(n_heads > 0 && width() % n_heads == 0,
                    "mha: width must be divisible by head count");
  }
};

// per-head attention weights, exposed so tests can assert the convex-combination
// property directly
template <ScalarType T>
std::vector<Tensor<T>> mha_attention_weights(const MultiHeadAttention<T>& mha,
                                             const Tensor<T>& x) {
  mha.validate();
  detail::require(x.rank() == 2 && x.cols() == mha.width(), "mha: input width mismatch");
  const std::size_t dk = mha.head_dim();
  const T inv_sqrt_dk = T{1} / std::sqrt(static_cast<T>(dk));
  auto Q = mha.q.forward(x);
  auto K = mha.k.forward(x);
  std::vector<Tensor<T>> weights;
  weights.reserve(mha.n_heads);
  for (std::size_t h = 0; h < mha.n_heads; ++h) {
    auto Qh = slice_cols(Q, h * dk, (h + 1) * dk);
    auto Kh = slice_cols(K, h * dk, (h + 1) * dk);
    auto logits = scale(matmul(Qh, transpose(Kh)), inv_sqrt_dk);
    weights.push_back(softmax_rows(logits));
  }
  return weights;
}

template <ScalarType T>
Tensor<T> mha_forward(const MultiHeadAttention<T>& mha, const Tensor<T>& x) {
  mha.validate();
  detail::require(x.rank() == 2 && x.cols() == mha.width(), "mha: input width mismatch");
  const std::size_t dk = mha.head_dim();
  auto V = mha.v.forward(x);
  auto weights = mha_attention_weights(mha, x);
  std::vector<Tensor<T>> heads;
  heads.reserve(mha.n_heads);
  for (std::size_t h = 0; h < mha.n_heads; ++h) {
    auto Vh = slice_cols(V, h * dk, (h + 1) * dk);
    heads.push_back(matmul(weights[h], Vh));
  }
  return mha.out.forward(concat_cols(heads));
}

template <ScalarType T>
struct FeedForward {
  AffineMap<T> fc1;  // d -> hidden (4d by default)
  AffineMap<T> fc2;  // hidden -> d

  Tensor<T> forward(const Tensor<T>& x) const {
    return fc2.forward(gelu(fc1.forward(x)));
  }
};

// 2-D cross-correlation with zero padding.
template <ScalarType T>
struct ConvLayer {
  Tensor<T> kernel;             // c_out x c_in x K x K
  std::optional<Tensor<T>> bias;  // c_out
  std::size_t stride = 1;
  std::size_t padding = 0;

  std::size_t out_channels() const { return kernel.dim(0); }
  std::size_t in_channels() const { return kernel.dim(1); }
  std::size_t ksize() const { return kernel.dim(2); }
};

template <ScalarType T>
Tensor<T> conv2d_forward(const ConvLayer<T>& conv, const Tensor<T>& x) {
  detail::require(x.rank() == 3, "conv2d: input must be c_in x H x W");
  detail::require(conv.kernel.rank() == 4 && conv.kernel.dim(2) == conv.kernel.dim(3),
                  "conv2d: kernel must be c_out x c_in x K x K");
  detail::require(x.dim(0) == conv.in_channels(), "conv2d: channel mismatch");
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::size_t K = conv.ksize(), P = conv.padding, S = conv.stride;
  detail::require(S >= 1, "conv2d: stride must be >= 1");
  detail::require(K <= H + 2 * P && K <= W + 2 * P, "conv2d: kernel larger than padded input");
  const std::size_t Ho = (H + 2 * P - K) / S + 1;
  const std::size_t Wo = (W + 2 * P - K) / S + 1;
  const std::size_t Co = conv.out_channels();
  Tensor<T> out({Co, Ho, Wo});
  for (std::size_t o = 0; o < Co; ++o) {
    for (std::size_t oh = 0; oh < Ho; ++oh) {
      for (std::size_t ow = 0; ow < Wo; ++ow) {
        T acc = conv.bias ? (*conv.bias)[o] : T{0};
        for (std::size_t c = 0; c < C; ++c) {
          for (std::size_t u = 0; u < K; ++u) {
            for (std::size_t v = 0; v < K; ++v) {
              const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * S + u) -
                                        static_cast<std::ptrdiff_t>(P);
              const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * S + v) -
                                        static_cast<std::ptrdiff_t>(P);
              if (ih < 0 || iw < 0 || ih >= static_cast<std::ptrdiff_t>(H) ||
                  iw >= static_cast<std::ptrdiff_t>(W))
                continue;  // zero padding contributes nothing
              acc += conv.kernel[((o * C + c) * K + u) * K + v] *
                     x[(c * H + static_cast<std::size_t>(ih)) * W +
                       static_cast<std::size_t>(iw)];
            }
          }
        }
        out[(o * Ho + oh) * Wo + ow] = acc;
      }
    }
  }
  return out;
}

// image (c x H x W) -> tokens ((n+1) x d): flattened non-overlapping patches
// through one affine map, a prepended cls token, and positional embeddings
template <ScalarType T>
struct PatchEmbed {
  AffineMap<T> proj;   // (c * p * p) -> d
  Tensor<T> cls;       // 1 x d
  Tensor<T> pos;       // (n + 1) x d
  std::size_t patch = 1;
};

template <ScalarType T>
Tensor<T> patch_embed_forward(const PatchEmbed<T>& pe, const Tensor<T>& image) {
  detail::require(image.rank() == 3, "patch_embed: input must be c x H x W");
  const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2), p = pe.patch;
  detail::require(p > 0 && H % p == 0 && W % p == 0,
                  "patch_embed: image size must be divisible by patch size");
  const std::size_t nh = H / p, nw = W / p, n = nh * nw;
  detail::require(pe.proj.in_dim() == C * p * p, "patch_embed: projection input mismatch");
  Tensor<T> patches({n, C * p * p});
  for (std::size_t ph = 0; ph < nh; ++ph)
    for (std::size_t pw = 0; pw < nw; ++pw)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t u = 0; u < p; ++u)
          for (std::size_t v = 0; v < p; ++v)
            patches(ph * nw + pw, (c * p + u) * p + v) =
                image[(c * H + ph * p + u) * W + pw * p + v];
  auto tokens = pe.proj.forward(patches);
  auto with_cls = concat_rows<T>({pe.cls, tokens});
  detail::require(pe.pos.same_shape(with_cls), "patch_embed: positional embedding mismatch");
  return add(with_cls, pe.pos);
}

}  // namespace repa
