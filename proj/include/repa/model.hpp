#pragma once

#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "repa/adapter.hpp"
#include "repa/nn.hpp"
#include "repa/rng.hpp"
#include "repa/tensor.hpp"

namespace repa {

// Residual wiring of a transformer block with one optional adapter per slot:
//   h1 = ln1(x);  [pre_attn]  -> attn -> [post_attn];  x1 = . + x
//   h2 = ln2(x1); [pre_ffn]   -> ffn  -> [post_ffn];   y  = . (+ parallel(x1)) + x1
template <ScalarType T>
struct ViTBlock {
  LayerNorm<T> ln1, ln2;
  MultiHeadAttention<T> attn;
  FeedForward<T> ffn;
  std::map<Site, Adapter<T>> adapters;

  bool has(Site s) const { return adapters.count(s) != 0; }
};

template <ScalarType T>
Tensor<T> vit_block_forward(const ViTBlock<T>& blk, const Tensor<T>& x) {
  auto h = blk.ln1.forward(x);
  if (blk.has(Site::pre_attn)) h = adapter_forward(blk.adapters.at(Site::pre_attn), h);
  auto a = mha_forward(blk.attn, h);
  if (blk.has(Site::post_attn)) a = adapter_forward(blk.adapters.at(Site::post_attn), a);
  auto x1 = add(a, x);

  auto h2 = blk.ln2.forward(x1);
  if (blk.has(Site::pre_ffn)) h2 = adapter_forward(blk.adapters.at(Site::pre_ffn), h2);
  auto f = blk.ffn.forward(h2);
  if (blk.has(Site::post_ffn)) f = adapter_forward(blk.adapters.at(Site::post_ffn), f);
  if (blk.has(Site::parallel_ffn))
    f = add(f, adapter_branch(blk.adapters.at(Site::parallel_ffn), x1));
  return add(f, x1);
}

// [optional adapter applied per pixel across channels] -> conv
template <ScalarType T>
struct ConvBlock {
  std::optional<Adapter<T>> pre;
  ConvLayer<T> conv;
};

// channels-last view of an image: (H*W) x c rows of per-pixel channel vectors
template <ScalarType T>
Tensor<T> image_to_rows(const Tensor<T>& img) {
  detail::require(img.rank() == 3, "image_to_rows: rank-3 required");
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  Tensor<T> rows({H * W, C});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t p = 0; p < H * W; ++p) rows(p, c) = img[c * H * W + p];
  return rows;
}

template <ScalarType T>
Tensor<T> rows_to_image(const Tensor<T>& rows, std::size_t H, std::size_t W) {
  detail::require(rows.rank() == 2 && rows.rows() == H * W, "rows_to_image: shape mismatch");
  const std::size_t C = rows.cols();
  Tensor<T> img({C, H, W});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t p = 0; p < H * W; ++p) img[c * H * W + p] = rows(p, c);
  return img;
}

template <ScalarType T>
Tensor<T> conv_block_forward(const ConvBlock<T>& blk, const Tensor<T>& img) {
  Tensor<T> x = img;
  if (blk.pre) {
    auto rows = image_to_rows(x);
    rows = adapter_forward(*blk.pre, rows);
    x = rows_to_image(rows, img.dim(1), img.dim(2));
  }
  return conv2d_forward(blk.conv, x);
}

template <ScalarType T>
using Block = std::variant<ViTBlock<T>, ConvBlock<T>>;

enum class Pooling : std::uint8_t { mean = 0, cls = 1 };

// Ordered list of frozen blocks plus optional patch embedding and classifier
// head. Forward is pure; training mutates parameters only through the
// ParamStore refs handed out by collect_params().
template <ScalarType T>
struct BackboneGraph {
  std::optional<PatchEmbed<T>> embed;
  std::vector<Block<T>> blocks;
  std::optional<AffineMap<T>> head;
  Pooling pooling = Pooling::mean;

  std::size_t depth() const { return blocks.size(); }
};

template <ScalarType T>
Tensor<T> backbone_features(const BackboneGraph<T>& m, const Tensor<T>& input) {
  Tensor<T> x = input;
  if (m.embed) x = patch_embed_forward(*m.embed, x);
  for (const auto& blk : m.blocks) {
    if (std::holds_alternative<ViTBlock<T>>(blk))
      x = vit_block_forward(std::get<ViTBlock<T>>(blk), x);
    else
      x = conv_block_forward(std::get<ConvBlock<T>>(blk), x);
  }
  return x;
}

template <ScalarType T>
Tensor<T> slice_rows_single(const Tensor<T>& x, std::size_t r) {
  detail::require(x.rank() == 2 && r < x.rows(), "slice_rows_single: bad row");
  Tensor<T> out({1, x.cols()});
  for (std::size_t j = 0; j < x.cols(); ++j) out(0, j) = x(r, j);
  return out;
}

// pooled feature vector (1 x d): mean over tokens / spatial positions, or the
// cls token row when the model embeds one
template <ScalarType T>
Tensor<T> pooled_features(const BackboneGraph<T>& m, const Tensor<T>& features) {
  if (features.rank() == 3) {
    auto rows = image_to_rows(features);
    auto mean = col_means(rows);
    return Tensor<T>({1, mean.numel()}, mean.data());
  }
  if (m.pooling == Pooling::cls) return slice_rows_single(features, 0);
  auto mean = col_means(features);
  return Tensor<T>({1, mean.numel()}, mean.data());
}

// logits when a head is present, otherwise the raw features
template <ScalarType T>
Tensor<T> model_forward(const BackboneGraph<T>& m, const Tensor<T>& input) {
  auto feats = backbone_features(m, input);
  if (!m.head) return feats;
  return m.head->forward(pooled_features(m, feats));
}

// ---- structural accounting ---------------------------------------------------

// Number of primitive operators in one forward pass, derived from the model
// structure. This is the hardware-independent latency proxy: merged models
// must match the plain backbone exactly.
template <ScalarType T>
std::size_t adapter_op_count(const Adapter<T>& a) {
  // down, up, branch scale, residual add (+1 for an activation if present)
  bool act = !adapter_is_linear(a);
  return 4 + (act ? 1 : 0);
}

template <ScalarType T>
std::size_t op_count(const BackboneGraph<T>& m) {
  std::size_t ops = 0;
  if (m.embed) ops += 3;  // patch projection, cls concat, pos add
  for (const auto& blk : m.blocks) {
    if (std::holds_alternative<ViTBlock<T>>(blk)) {
      const auto& b = std::get<ViTBlock<T>>(blk);
      ops += 2;  // layernorms
      ops += 4 + 3;  // q,k,v,out projections; scores, softmax, weighted sum
      ops += 3;  // fc1, gelu, fc2
      ops += 2;  // residual adds
      // parallel branches cost the same: the outer accumulate replaces the
      // inner residual add
      for (const auto& [site, a] : b.adapters) ops += adapter_op_count(a);
    } else {
      const auto& b = std::get<ConvBlock<T>>(blk);
      ops += 1;
      if (b.pre) ops += adapter_op_count(*b.pre);
    }
  }
  if (m.head) ops += 2;  // pool, projection
  return ops;
}

template <ScalarType T>
std::size_t affine_param_count(const AffineMap<T>& a) {
  return a.W.numel() + (a.b ? a.b->numel() : 0);
}

template <ScalarType T>
std::size_t groupwise_param_count(const GroupwiseLinear<T>& g) {
  std::size_t n = g.b ? g.b->numel() : 0;
  for (const auto& w : g.blocks) n += w.numel();
  return n;
}

template <ScalarType T>
std::size_t adapter_param_count(const Adapter<T>& a) {
  if (std::holds_alternative<RepAdapterModule<T>>(a)) {
    const auto& r = std::get<RepAdapterModule<T>>(a);
    return groupwise_param_count(r.down) + groupwise_param_count(r.up);
  }
  const auto& b = std::get<BaselineAdapter<T>>(a);
  return affine_param_count(b.down) + affine_param_count(b.up);
}

template <ScalarType T>
std::size_t param_count(const BackboneGraph<T>& m, bool include_adapters = true) {
  std::size_t n = 0;
  if (m.embed) {
    n += affine_param_count(m.embed->proj) + m.embed->cls.numel() + m.embed->pos.numel();
  }
  for (const auto& blk : m.blocks) {
    if (std::holds_alternative<ViTBlock<T>>(blk)) {
      const auto& b = std::get<ViTBlock<T>>(blk);
      n += b.ln1.gamma.numel() + b.ln1.beta.numel() + b.ln2.gamma.numel() + b.ln2.beta.numel();
      n += affine_param_count(b.attn.q) + affine_param_count(b.attn.k) +
           affine_param_count(b.attn.v) + affine_param_count(b.attn.out);
      n += affine_param_count(b.ffn.fc1) + affine_param_count(b.ffn.fc2);
      if (include_adapters)
        for (const auto& [site, a] : b.adapters) n += adapter_param_count(a);
    } else {
      const auto& b = std::get<ConvBlock<T>>(blk);
      n += b.conv.kernel.numel() + (b.conv.bias ? b.conv.bias->numel() : 0);
      if (include_adapters && b.pre) n += adapter_param_count(*b.pre);
    }
  }
  if (m.head) n += affine_param_count(*m.head);
  return n;
}

template <ScalarType T>
std::size_t adapter_count(const BackboneGraph<T>& m) {
  std::size_t n = 0;
  for (const auto& blk : m.blocks) {
    if (std::holds_alternative<ViTBlock<T>>(blk))
      n += std::get<ViTBlock<T>>(blk).adapters.size();
    else if (std::get<ConvBlock<T>>(blk).pre)
      n += 1;
  }
  return n;
}

// ---- construction --------------------------------------------------------------

struct ModelConfig {
  std::string kind = "vit";   // vit | conv
  std::size_t width = 64;     // token width d (vit) / channels (conv)
  std::size_t depth = 2;
  std::size_t heads = 4;
  std::size_t tokens = 8;     // token count for token-input models
  std::size_t classes = 2;    // 0 = no head
  std::size_t ffn_mult = 4;
  // conv geometry
  std::size_t image = 8;      // H = W
  std::size_t kernel = 3;
  std::size_t conv_padding = 1;
  std::size_t filters = 8;
};

namespace detail {

template <ScalarType T>
AffineMap<T> random_affine(Rng& rng, std::size_t din, std::size_t dout, bool bias,
                           T wstd, T bstd = static_cast<T>(0.01)) {
  AffineMap<T> a;
  a.W = Tensor<T>::randn(rng, {din, dout}, wstd);
  if (bias) a.b = Tensor<T>::randn(rng, {dout}, bstd);
  return a;
}

}  // namespace detail

// Frozen random stand-in for a pretrained backbone. Deterministic in the seed.
template <ScalarType T>
BackboneGraph<T> build_backbone(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  BackboneGraph<T> m;
  if (cfg.kind == "vit") {
    detail::require(cfg.width % cfg.heads == 0, "model: width must be divisible by heads");
    const T wstd = static_cast<T>(1.0 / std::sqrt(static_cast<double>(cfg.width)));
    for (std::size_t l = 0; l < cfg.depth; ++l) {
      ViTBlock<T> b;
      b.ln1 = LayerNorm<T>::make(cfg.width);
      b.ln2 = LayerNorm<T>::make(cfg.width);
      b.attn.n_heads = cfg.heads;
      b.attn.q = detail::random_affine<T>(rng, cfg.width, cfg.width, true, wstd);
      b.attn.k = detail::random_affine<T>(rng, cfg.width, cfg.width, true, wstd);
      b.attn.v = detail::random_affine<T>(rng, cfg.width, cfg.width, true, wstd);
      b.attn.out = detail::random_affine<T>(rng, cfg.width, cfg.width, true, wstd);
      b.ffn.fc1 = detail::random_affine<T>(rng, cfg.width, cfg.ffn_mult * cfg.width, true, wstd);
      b.ffn.fc2 = detail::random_affine<T>(
          rng, cfg.ffn_mult * cfg.width, cfg.width, true,
          static_cast<T>(1.0 / std::sqrt(static_cast<double>(cfg.ffn_mult * cfg.width))));
      m.blocks.push_back(std::move(b));
    }
    m.pooling = Pooling::mean;
    if (cfg.classes > 0)
      m.head = detail::random_affine<T>(rng, cfg.width, cfg.classes, true,
                                        static_cast<T>(0.05));
  } else if (cfg.kind == "conv") {
    std::size_t cin = cfg.width;
    for (std::size_t l = 0; l < cfg.depth; ++l) {
      ConvBlock<T> b;
      const std::size_t cout = cfg.filters;
      const T wstd = static_cast<T>(
          1.0 / std::sqrt(static_cast<double>(cin * cfg.kernel * cfg.kernel)));
      b.conv.kernel = Tensor<T>::randn(rng, {cout, cin, cfg.kernel, cfg.kernel}, wstd);
      b.conv.bias = Tensor<T>::randn(rng, {cout}, static_cast<T>(0.01));
      b.conv.stride = 1;
      b.conv.padding = cfg.conv_padding;
      m.blocks.push_back(std::move(b));
      cin = cout;
    }
    m.pooling = Pooling::mean;
    if (cfg.classes > 0)
      m.head = detail::random_affine<T>(rng, cin, cfg.classes, true, static_cast<T>(0.05));
  } else {
    detail::require(false, "model: unknown kind '" + cfg.kind + "'");
  }
  return m;
}

// Identity-at-init adapter: the down path gets small random weights, the up
// path starts at zero, so training begins from the pretrained function.
template <ScalarType T>
GroupwiseLinear<T> make_groupwise(Rng& rng, std::size_t din, std::size_t dout,
                                  std::size_t groups, bool bias, T wstd, bool zero_init) {
  detail::require(din % groups == 0 && dout % groups == 0,
                  "groupwise: group count must divide both widths");
  GroupwiseLinear<T> g;
  g.groups = groups;
  for (std::size_t i = 0; i < groups; ++i)
    g.blocks.push_back(zero_init ? Tensor<T>::zeros({din / groups, dout / groups})
                                 : Tensor<T>::randn(rng, {din / groups, dout / groups}, wstd));
  if (bias) g.b = Tensor<T>::zeros({dout});
  return g;
}

template <ScalarType T>
Adapter<T> make_adapter(const AdapterConfig& cfg, std::size_t width, Rng& rng) {
  const T wstd = static_cast<T>(0.02);
  if (cfg.variant == AdapterVariant::baseline || cfg.variant == AdapterVariant::parallel) {
    BaselineAdapter<T> a;
    a.down.W = Tensor<T>::randn(rng, {width, cfg.c}, wstd);
    a.up.W = Tensor<T>::zeros({cfg.c, width});
    if (cfg.bias) {
      a.down.b = Tensor<T>::zeros({cfg.c});
      a.up.b = Tensor<T>::zeros({width});
    }
    a.act = cfg.act == Activation::none ? Activation::gelu : cfg.act;
    a.scaling = static_cast<T>(cfg.s);
    return a;
  }
  RepAdapterModule<T> a;
  a.down = make_groupwise<T>(rng, width, cfg.c, cfg.full_sparse ? cfg.k : 1, cfg.bias, wstd,
                             false);
  a.up = make_groupwise<T>(rng, cfg.c, width, cfg.k, cfg.bias, wstd, true);
  a.scaling = static_cast<T>(cfg.s);
  a.act = cfg.act;
  return a;
}

// Attaches one adapter per configured site to every block. Returns a copy.
template <ScalarType T>
BackboneGraph<T> attach_adapters(const BackboneGraph<T>& model, const AdapterConfig& cfg,
                                 std::uint64_t seed) {
  BackboneGraph<T> m = model;
  if (cfg.variant == AdapterVariant::none) return m;
  Rng rng(seed);
  for (auto& blk : m.blocks) {
    if (std::holds_alternative<ViTBlock<T>>(blk)) {
      auto& b = std::get<ViTBlock<T>>(blk);
      const std::size_t width = b.attn.q.in_dim();
      cfg.validate(width);
      for (Site site : cfg.sites) {
        detail::require(site != Site::pre_conv, "attach: pre_conv site on a vit block");
        b.adapters.emplace(site, make_adapter<T>(cfg, width, rng));
      }
    } else {
      auto& b = std::get<ConvBlock<T>>(blk);
      const std::size_t width = b.conv.in_channels();
      cfg.validate(width);
      b.pre = make_adapter<T>(cfg, width, rng);
    }
  }
  return m;
}

enum class ParamClass : std::uint8_t { backbone = 0, adapter = 1, head = 2 };

namespace detail {

template <ScalarType T, class Fn>
void visit_affine(AffineMap<T>& a, const std::string& prefix, ParamClass cls, Fn&& fn) {
  fn(prefix + ".W", a.W, cls);
  if (a.b) fn(prefix + ".b", *a.b, cls);
}

template <ScalarType T, class Fn>
void visit_groupwise(GroupwiseLinear<T>& g, const std::string& prefix, ParamClass cls,
                     Fn&& fn) {
  for (std::size_t i = 0; i < g.blocks.size(); ++i)
    fn(prefix + ".W" + std::to_string(i), g.blocks[i], cls);
  if (g.b) fn(prefix + ".b", *g.b, cls);
}

template <ScalarType T, class Fn>
void visit_adapter(Adapter<T>& a, const std::string& prefix, Fn&& fn) {
  if (std::holds_alternative<RepAdapterModule<T>>(a)) {
    auto& r = std::get<RepAdapterModule<T>>(a);
    visit_groupwise(r.down, prefix + ".down", ParamClass::adapter, fn);
    visit_groupwise(r.up, prefix + ".up", ParamClass::adapter, fn);
  } else {
    auto& b = std::get<BaselineAdapter<T>>(a);
    visit_affine(b.down, prefix + ".down", ParamClass::adapter, fn);
    visit_affine(b.up, prefix + ".up", ParamClass::adapter, fn);
  }
}

}  // namespace detail

// Deterministic walk over every parameter tensor: fn(name, tensor, class).
// The walk order is the serialization order, so checkpoints are reproducible.
template <ScalarType T, class Fn>
void visit_params(BackboneGraph<T>& m, Fn&& fn) {
  if (m.embed) {
    detail::visit_affine(m.embed->proj, "embed.proj", ParamClass::backbone, fn);
    fn("embed.cls", m.embed->cls, ParamClass::backbone);
    fn("embed.pos", m.embed->pos, ParamClass::backbone);
  }
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    const std::string bp = "blocks." + std::to_string(i);
    if (std::holds_alternative<ViTBlock<T>>(m.blocks[i])) {
      auto& b = std::get<ViTBlock<T>>(m.blocks[i]);
      fn(bp + ".ln1.gamma", b.ln1.gamma, ParamClass::backbone);
      fn(bp + ".ln1.beta", b.ln1.beta, ParamClass::backbone);
      detail::visit_affine(b.attn.q, bp + ".attn.q", ParamClass::backbone, fn);
      detail::visit_affine(b.attn.k, bp + ".attn.k", ParamClass::backbone, fn);
      detail::visit_affine(b.attn.v, bp + ".attn.v", ParamClass::backbone, fn);
      detail::visit_affine(b.attn.out, bp + ".attn.out", ParamClass::backbone, fn);
      fn(bp + ".ln2.gamma", b.ln2.gamma, ParamClass::backbone);
      fn(bp + ".ln2.beta", b.ln2.beta, ParamClass::backbone);
      detail::visit_affine(b.ffn.fc1, bp + ".ffn.fc1", ParamClass::backbone, fn);
      detail::visit_affine(b.ffn.fc2, bp + ".ffn.fc2", ParamClass::backbone, fn);
      for (auto& [site, a] : b.adapters)
        detail::visit_adapter(a, bp + ".adapter." + site_name(site), fn);
    } else {
      auto& b = std::get<ConvBlock<T>>(m.blocks[i]);
      fn(bp + ".conv.kernel", b.conv.kernel, ParamClass::backbone);
      if (b.conv.bias) fn(bp + ".conv.bias", *b.conv.bias, ParamClass::backbone);
      if (b.pre) detail::visit_adapter(*b.pre, bp + ".adapter.pre_conv", fn);
    }
  }
  if (m.head) detail::visit_affine(*m.head, "head", ParamClass::head, fn);
}

template <ScalarType T, class Fn>
void visit_params(const BackboneGraph<T>& m, Fn&& fn) {
  visit_params(const_cast<BackboneGraph<T>&>(m),
               [&](const std::string& name, Tensor<T>& t, ParamClass cls) {
                 fn(name, static_cast<const Tensor<T>&>(t), cls);
               });
}

// Removes every adapter without touching backbone weights.
template <ScalarType T>
BackboneGraph<T> strip_adapters(const BackboneGraph<T>& model) {
  BackboneGraph<T> m = model;
  for (auto& blk : m.blocks) {
    if (std::holds_alternative<ViTBlock<T>>(blk))
      std::get<ViTBlock<T>>(blk).adapters.clear();
    else
      std::get<ConvBlock<T>>(blk).pre.reset();
  }
  return m;
}

}  // namespace repa
