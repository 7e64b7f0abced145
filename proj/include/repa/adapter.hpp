#pragma once

#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "repa/nn.hpp"
#include "repa/tensor.hpp"

namespace repa {

enum class Site : std::uint8_t {
  pre_attn = 0,
  post_attn = 1,
  pre_ffn = 2,
  post_ffn = 3,
  parallel_ffn = 4,
  pre_conv = 5,
};

inline const char* site_name(Site s) {
  switch (s) {
    case Site::pre_attn: return "pre_attn";
    case Site::post_attn: return "post_attn";
    case Site::pre_ffn: return "pre_ffn";
    case Site::post_ffn: return "post_ffn";
    case Site::parallel_ffn: return "parallel_ffn";
    case Site::pre_conv: return "pre_conv";
  }
  return "?";
}

inline std::optional<Site> site_from_name(const std::string& s) {
  for (Site v : {Site::pre_attn, Site::post_attn, Site::pre_ffn, Site::post_ffn,
                 Site::parallel_ffn, Site::pre_conv})
    if (s == site_name(v)) return v;
  return std::nullopt;
}

enum class Activation : std::uint8_t { none = 0, gelu = 1, relu = 2 };

template <ScalarType T>
Tensor<T> apply_activation(Activation act, const Tensor<T>& x) {
  switch (act) {
    case Activation::none: return x;
    case Activation::gelu: return gelu(x);
    case Activation::relu: return relu(x);
  }
  return x;
}

// Linear map whose weight is block-diagonal: input columns are split into k
// contiguous chunks, chunk i goes through blocks[i], outputs are concatenated
// and the bias added.
template <ScalarType T>
struct GroupwiseLinear {
  std::size_t groups = 1;
  std::vector<Tensor<T>> blocks;  // k tensors, each (c/k) x (d/k)
  std::optional<Tensor<T>> b;     // d

  std::size_t in_dim() const { return blocks.empty() ? 0 : groups * blocks[0].dim(0); }
  std::size_t out_dim() const { return blocks.empty() ? 0 : groups * blocks[0].dim(1); }

  void validate() const {
    detail::require(groups >= 1 && blocks.size() == groups,
                    "groupwise: block count must equal group count");
    for (const auto& w : blocks)
      detail::require(w.rank() == 2 && w.same_shape(blocks[0]),
                      "groupwise: blocks must share one shape");
    if (b) detail::require(b->rank() == 1 && b->dim(0) == out_dim(), "groupwise: bad bias");
  }
};

template <ScalarType T>
Tensor<T> groupwise_forward(const GroupwiseLinear<T>& g, const Tensor<T>& x) {
  g.validate();
  detail::require(x.rank() == 2 && x.cols() == g.in_dim(),
                  "groupwise: input width mismatch (" + std::to_string(x.cols()) + " vs " +
                      std::to_string(g.in_dim()) + ")");
  const std::size_t cg = g.blocks[0].dim(0);
  std::vector<Tensor<T>> parts;
  parts.reserve(g.groups);
  for (std::size_t i = 0; i < g.groups; ++i)
    parts.push_back(matmul(slice_cols(x, i * cg, (i + 1) * cg), g.blocks[i]));
  auto y = concat_cols(parts);
  if (g.b) y = add_row(y, *g.b);
  return y;
}

// The trainable unit: dense down-projection, group-wise up-projection, branch
// scaling and a residual connection. The down path is stored as a groupwise
// map too (1 group == dense) so the full-sparse variant shares all code.
// An optional activation turns it into the nonlinear (non-mergeable) variant.
template <ScalarType T>
struct RepAdapterModule {
  GroupwiseLinear<T> down;  // d -> c, dense by default (groups == 1)
  GroupwiseLinear<T> up;    // c -> d, k groups
  T scaling = T{1};         // s, multiplies the bottleneck branch only
  Activation act = Activation::none;

  std::size_t width() const { return down.in_dim(); }
  std::size_t hidden() const { return down.out_dim(); }
  bool linear() const { return act == Activation::none; }
};

template <ScalarType T>
Tensor<T> repadapter_forward(const RepAdapterModule<T>& a, const Tensor<T>& x) {
  detail::require(x.rank() == 2 && x.cols() == a.width(), "repadapter: input width mismatch");
  auto h = apply_activation(a.act, groupwise_forward(a.down, x));
  return add(x, scale(groupwise_forward(a.up, h), a.scaling));
}

// branch only (no residual): needed by the parallel deployment where the
// surrounding block supplies the residual term
template <ScalarType T>
Tensor<T> repadapter_branch(const RepAdapterModule<T>& a, const Tensor<T>& x) {
  auto h = apply_activation(a.act, groupwise_forward(a.down, x));
  return scale(groupwise_forward(a.up, h), a.scaling);
}

// Classic nonlinear bottleneck adapter: dense down, activation, dense up,
// scaled, residual.
template <ScalarType T>
struct BaselineAdapter {
  AffineMap<T> down;  // d x c
  AffineMap<T> up;    // c x d
  Activation act = Activation::gelu;
  T scaling = T{1};

  std::size_t width() const { return down.in_dim(); }
};

template <ScalarType T>
Tensor<T> baseline_forward(const BaselineAdapter<T>& a, const Tensor<T>& x) {
  detail::require(x.rank() == 2 && x.cols() == a.width(), "adapter: input width mismatch");
  return add(x, scale(a.up.forward(apply_activation(a.act, a.down.forward(x))), a.scaling));
}

template <ScalarType T>
Tensor<T> baseline_branch(const BaselineAdapter<T>& a, const Tensor<T>& x) {
  return scale(a.up.forward(apply_activation(a.act, a.down.forward(x))), a.scaling);
}

template <ScalarType T>
using Adapter = std::variant<RepAdapterModule<T>, BaselineAdapter<T>>;

template <ScalarType T>
Tensor<T> adapter_forward(const Adapter<T>& a, const Tensor<T>& x) {
  if (std::holds_alternative<RepAdapterModule<T>>(a))
    return repadapter_forward(std::get<RepAdapterModule<T>>(a), x);
  return baseline_forward(std::get<BaselineAdapter<T>>(a), x);
}

template <ScalarType T>
Tensor<T> adapter_branch(const Adapter<T>& a, const Tensor<T>& x) {
  if (std::holds_alternative<RepAdapterModule<T>>(a))
    return repadapter_branch(std::get<RepAdapterModule<T>>(a), x);
  return baseline_branch(std::get<BaselineAdapter<T>>(a), x);
}

template <ScalarType T>
bool adapter_is_linear(const Adapter<T>& a) {
  if (std::holds_alternative<RepAdapterModule<T>>(a))
    return std::get<RepAdapterModule<T>>(a).linear();
  return std::get<BaselineAdapter<T>>(a).act == Activation::none;
}

// A placement is mergeable only when the adapter sits in front of the
// projection it will be folded into and is purely linear. Parallel placement
// is never mergeable: the FFN nonlinearity stands between the branch and any
// projection weight.
struct PlacementSpec {
  Site site = Site::pre_attn;
  bool linear_adapter = true;

  bool mergeable() const {
    return linear_adapter &&
           (site == Site::pre_attn || site == Site::pre_ffn || site == Site::pre_conv);
  }
};

enum class AdapterVariant : std::uint8_t { none = 0, repadapter = 1, baseline = 2, parallel = 3 };

inline const char* variant_name(AdapterVariant v) {
  switch (v) {
    case AdapterVariant::none: return "none";
    case AdapterVariant::repadapter: return "repadapter";
    case AdapterVariant::baseline: return "baseline";
    case AdapterVariant::parallel: return "parallel";
  }
  return "?";
}

// Config schema: {c, k, s, sites, bias, variant} plus the ablation knobs.
struct AdapterConfig {
  AdapterVariant variant = AdapterVariant::repadapter;
  std::size_t c = 8;        // hidden width
  std::size_t k = 2;        // group count
  double s = 1.0;           // branch scaling
  bool bias = false;
  bool full_sparse = false; // group the down projection as well
  Activation act = Activation::none;
  std::vector<Site> sites = {Site::pre_attn};

  void validate(std::size_t width) const {
    detail::require(c >= 1 && k >= 1, "adapter config: c and k must be positive");
    detail::require(c % k == 0, "adapter config: c must be divisible by k");
    detail::require(width % k == 0, "adapter config: model width must be divisible by k");
    if (variant == AdapterVariant::parallel)
      for (Site s_ : sites)
        detail::require(s_ == Site::parallel_ffn,
                        "adapter config: parallel variant requires parallel_ffn site");
  }
};

// Exact trainable-parameter count of the adapters a config would attach
// (backbone excluded). One adapter per (layer, site).
inline std::size_t count_adapter_params(const AdapterConfig& cfg, std::size_t width,
                                        std::size_t layers) {
  if (cfg.variant == AdapterVariant::none) return 0;
  const std::size_t d = width, c = cfg.c, k = cfg.k;
  std::size_t per = 0;
  if (cfg.variant == AdapterVariant::baseline || cfg.variant == AdapterVariant::parallel) {
    per = d * c + c * d;
  } else {
    const std::size_t down = cfg.full_sparse ? (d / k) * (c / k) * k : d * c;
    const std::size_t up = (c / k) * (d / k) * k;
    per = down + up;
  }
  if (cfg.bias) per += c + d;
  return per * layers * cfg.sites.size();
}

}  // namespace repa
