#pragma once

#include <sstream>
#include <string>
#include <vector>

#include "repa/adapter.hpp"
#include "repa/model.hpp"
#include "repa/nn.hpp"
#include "repa/tensor.hpp"

namespace repa {

// Refusal to merge. Merging never silently approximates: a structure the
// algebra cannot absorb raises this with every offending site listed.
class MergeError : public std::runtime_error {
 public:
  explicit MergeError(const std::string& msg, std::vector<std::string> sites = {})
      : std::runtime_error(msg), sites_(std::move(sites)) {}
  const std::vector<std::string>& sites() const { return sites_; }

 private:
  std::vector<std::string> sites_;
};

// A linear adapter reduced to one affine map: y = x W + b reproduces the
// adapter's forward exactly (residual included, scaling folded in).
template <ScalarType T>
struct CollapsedAdapter {
  Tensor<T> W;  // d x d
  Tensor<T> b;  // d, zeros when the adapter is bias-free

  bool exact_identity() const { return is_exact_identity(W) && all_zero(b); }

  static CollapsedAdapter identity(std::size_t d) {
    return {Tensor<T>::identity(d), Tensor<T>::zeros({d})};
  }
};

// zero-pads the k blocks into one dense block-diagonal map
template <ScalarType T>
AffineMap<T> densify(const GroupwiseLinear<T>& g) {
  g.validate();
  const std::size_t cin = g.in_dim(), cout = g.out_dim(), k = g.groups;
  AffineMap<T> dense;
  dense.W = Tensor<T>::zeros({cin, cout});
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t r = 0; r < cin / k; ++r)
      for (std::size_t c = 0; c < cout / k; ++c)
        dense.W(i * (cin / k) + r, i * (cout / k) + c) = g.blocks[i](r, c);
  dense.b = g.b;
  return dense;
}

namespace detail {

// Offline folding algebra runs at double precision and rounds once into the
// target element type; at T = double this is the plain fixed-order product.
template <ScalarType T>
Tensor<T> fold_matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.cols() == b.rows(), "merge: inner dimension mismatch");
  Tensor<T> out({a.rows(), b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k)
        acc += static_cast<double>(a(i, k)) * static_cast<double>(b(k, j));
      out(i, j) = static_cast<T>(acc);
    }
  return out;
}

}  // namespace detail

template <ScalarType T>
CollapsedAdapter<T> collapse_adapter(const RepAdapterModule<T>& a) {
  if (!a.linear()) throw MergeError("non-mergeable: nonlinear");
  const std::size_t d = a.width(), c = a.hidden();
  auto down = densify(a.down);
  auto up = densify(a.up);
  const double s = static_cast<double>(a.scaling);
  CollapsedAdapter<T> ca;
  ca.W = Tensor<T>({d, d});
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < c; ++k)
        acc += static_cast<double>(down.W(i, k)) * static_cast<double>(up.W(k, j));
      ca.W(i, j) = static_cast<T>(s * acc + (i == j ? 1.0 : 0.0));
    }
  ca.b = Tensor<T>::zeros({d});
  if (down.b || up.b) {
    for (std::size_t j = 0; j < d; ++j) {
      double acc = 0.0;
      if (down.b)
        for (std::size_t k = 0; k < c; ++k)
          acc += static_cast<double>((*down.b)[k]) * static_cast<double>(up.W(k, j));
      if (up.b) acc += static_cast<double>((*up.b)[j]);
      ca.b[j] = static_cast<T>(s * acc);
    }
  }
  return ca;
}

template <ScalarType T>
CollapsedAdapter<T> collapse_adapter(const BaselineAdapter<T>& a) {
  if (a.act != Activation::none) throw MergeError("non-mergeable: nonlinear");
  RepAdapterModule<T> lin;
  lin.down.groups = 1;
  lin.down.blocks = {a.down.W};
  lin.down.b = a.down.b;
  lin.up.groups = 1;
  lin.up.blocks = {a.up.W};
  lin.up.b = a.up.b;
  lin.scaling = a.scaling;
  return collapse_adapter(lin);
}

template <ScalarType T>
CollapsedAdapter<T> collapse_adapter(const Adapter<T>& a) {
  if (std::holds_alternative<RepAdapterModule<T>>(a))
    return collapse_adapter(std::get<RepAdapterModule<T>>(a));
  return collapse_adapter(std::get<BaselineAdapter<T>>(a));
}

// (x W_ada + b_ada) W0 + b0  ==  x (W_ada W0) + (b_ada W0 + b0)
template <ScalarType T>
AffineMap<T> merge_into_affine(const CollapsedAdapter<T>& ca, const AffineMap<T>& target) {
  detail::require(ca.W.rank() == 2 && ca.W.rows() == ca.W.cols(),
                  "merge: collapsed map must be square");
  detail::require(ca.W.cols() == target.in_dim(), "merge: inner dimension mismatch");
  if (ca.exact_identity()) return target;  // bitwise no-op
  AffineMap<T> merged;
  merged.W = detail::fold_matmul(ca.W, target.W);
  if (target.b || !all_zero(ca.b)) {
    Tensor<T> b({target.out_dim()});
    for (std::size_t j = 0; j < b.numel(); ++j) {
      double acc = target.b ? static_cast<double>((*target.b)[j]) : 0.0;
      for (std::size_t k = 0; k < ca.b.numel(); ++k)
        acc += static_cast<double>(ca.b[k]) * static_cast<double>(target.W(k, j));
      b[j] = static_cast<T>(acc);
    }
    merged.b = std::move(b);
  }
  return merged;
}

// All three of Q, K, V consume the adapter output, so each absorbs the
// collapsed map; the output projection is untouched.
template <ScalarType T>
MultiHeadAttention<T> merge_into_mha(const CollapsedAdapter<T>& ca,
                                     const MultiHeadAttention<T>& mha) {
  detail::require(ca.W.rows() == mha.width(), "merge: width mismatch with attention");
  MultiHeadAttention<T> merged = mha;
  merged.q = merge_into_affine(ca, mha.q);
  merged.k = merge_into_affine(ca, mha.k);
  merged.v = merge_into_affine(ca, mha.v);
  return merged;
}

// Per-pixel adapter folded into the kernel: each spatial tap contracts the
// input-channel axis with W_ada, and the adapter bias flows into the conv
// bias. With zero padding and K > 1 the bias path is exact only when b_ada
// is zero: padded taps never saw the adapter shift.
template <ScalarType T>
ConvLayer<T> merge_into_conv(const CollapsedAdapter<T>& ca, const ConvLayer<T>& conv,
                             bool allow_approximate = false) {
  detail::require(ca.W.rows() == conv.in_channels(), "merge: width mismatch with conv");
  const bool bias_path = !all_zero(ca.b);
  if (bias_path && conv.padding > 0 && conv.ksize() > 1 && !allow_approximate)
    throw MergeError("non-mergeable: border bias mismatch");
  if (ca.exact_identity()) return conv;
  const std::size_t Co = conv.out_channels(), Ci = conv.in_channels(), K = conv.ksize();
  ConvLayer<T> merged = conv;
  merged.kernel = Tensor<T>::zeros(conv.kernel.shape());
  for (std::size_t o = 0; o < Co; ++o)
    for (std::size_t j = 0; j < Ci; ++j)
      for (std::size_t u = 0; u < K; ++u)
        for (std::size_t v = 0; v < K; ++v) {
          double acc = 0.0;
          for (std::size_t i = 0; i < Ci; ++i)
            acc += static_cast<double>(ca.W(j, i)) *
                   static_cast<double>(conv.kernel[((o * Ci + i) * K + u) * K + v]);
          merged.kernel[((o * Ci + j) * K + u) * K + v] = static_cast<T>(acc);
        }
  if (bias_path || conv.bias) {
    Tensor<T> b({Co});
    for (std::size_t o = 0; o < Co; ++o) {
      double acc = conv.bias ? static_cast<double>((*conv.bias)[o]) : 0.0;
      for (std::size_t i = 0; i < Ci; ++i)
        for (std::size_t u = 0; u < K; ++u)
          for (std::size_t v = 0; v < K; ++v)
            acc += static_cast<double>(ca.b[i]) *
                   static_cast<double>(conv.kernel[((o * Ci + i) * K + u) * K + v]);
      b[o] = static_cast<T>(acc);
    }
    merged.bias = std::move(b);
  }
  return merged;
}

struct MergeSiteRecord {
  std::size_t block = 0;
  std::string site;
  std::string target;
  std::vector<std::size_t> target_shape;
  bool approximate = false;
};

// Evidence that the merge changed nothing: per-site records, deviation on a
// probe batch, and the structural before/after accounting.
struct MergeReport {
  std::vector<MergeSiteRecord> sites;
  double max_abs_err = 0.0;
  double max_rel_err = 0.0;
  std::size_t probes = 0;
  std::size_t params_removed = 0;
  std::size_t depth_before = 0;
  std::size_t depth_after = 0;
  bool approximate = false;

  std::string to_text() const {
    std::ostringstream os;
    os << "merge sites: " << sites.size() << "\n";
    for (const auto& s : sites) {
      os << "  block " << s.block << " " << s.site << " -> " << s.target << " [";
      for (std::size_t i = 0; i < s.target_shape.size(); ++i)
        os << (i ? "x" : "") << s.target_shape[i];
      os << "]" << (s.approximate ? " (approximate)" : "") << "\n";
    }
    os << "probes: " << probes << "\n";
    os << "max abs err: " << max_abs_err << "\n";
    os << "max rel err: " << max_rel_err << "\n";
    os << "params removed: " << params_removed << "\n";
    os << "structural ops before: " << depth_before << "\n";
    os << "structural ops after: " << depth_after << "\n";
    return os.str();
  }
};

namespace detail {

template <ScalarType T>
std::vector<std::string> non_mergeable_sites(const BackboneGraph<T>& model,
                                             bool allow_approximate) {
  std::vector<std::string> bad;
  for (std::size_t bi = 0; bi < model.blocks.size(); ++bi) {
    const auto& blk = model.blocks[bi];
    if (std::holds_alternative<ViTBlock<T>>(blk)) {
      for (const auto& [site, a] : std::get<ViTBlock<T>>(blk).adapters) {
        PlacementSpec spec{site, adapter_is_linear(a)};
        if (!spec.mergeable())
          bad.push_back("block " + std::to_string(bi) + " " + site_name(site) +
                        (spec.linear_adapter ? " (placement)" : " (nonlinear)"));
      }
    } else {
      const auto& b = std::get<ConvBlock<T>>(blk);
      if (!b.pre) continue;
      if (!adapter_is_linear(*b.pre)) {
        bad.push_back("block " + std::to_string(bi) + " pre_conv (nonlinear)");
        continue;
      }
      auto ca = collapse_adapter(*b.pre);
      if (!all_zero(ca.b) && b.conv.padding > 0 && b.conv.ksize() > 1 && !allow_approximate)
        bad.push_back("block " + std::to_string(bi) + " pre_conv (border bias mismatch)");
    }
  }
  return bad;
}

}  // namespace detail

struct MergeOptions {
  bool allow_approximate = false;
};

// Folds every adapter into the frozen weights and returns the structurally
// adapter-free model plus the deviation measured on the probe batch. The
// input model is left untouched.
template <ScalarType T>
std::pair<BackboneGraph<T>, MergeReport> merge_model(const BackboneGraph<T>& model,
                                                     const std::vector<Tensor<T>>& probes,
                                                     MergeOptions opts = {}) {
  auto bad = detail::non_mergeable_sites(model, opts.allow_approximate);
  if (!bad.empty()) {
    std::string msg = "non-mergeable sites:";
    for (const auto& s : bad) msg += " [" + s + "]";
    throw MergeError(msg, bad);
  }

  BackboneGraph<T> merged = model;
  MergeReport report;
  report.depth_before = op_count(model);

  for (std::size_t bi = 0; bi < merged.blocks.size(); ++bi) {
    auto& blk = merged.blocks[bi];
    if (std::holds_alternative<ViTBlock<T>>(blk)) {
      auto& b = std::get<ViTBlock<T>>(blk);
      if (b.has(Site::pre_attn)) {
        auto ca = collapse_adapter(b.adapters.at(Site::pre_attn));
        b.attn = merge_into_mha(ca, b.attn);
        report.sites.push_back({bi, "pre_attn", "attn.qkv", b.attn.q.W.shape(), false});
      }
      if (b.has(Site::pre_ffn)) {
        auto ca = collapse_adapter(b.adapters.at(Site::pre_ffn));
        b.ffn.fc1 = merge_into_affine(ca, b.ffn.fc1);
        report.sites.push_back({bi, "pre_ffn", "ffn.fc1", b.ffn.fc1.W.shape(), false});
      }
      b.adapters.clear();
    } else {
      auto& b = std::get<ConvBlock<T>>(blk);
      if (b.pre) {
        auto ca = collapse_adapter(*b.pre);
        const bool approx = !all_zero(ca.b) && b.conv.padding > 0 && b.conv.ksize() > 1;
        b.conv = merge_into_conv(ca, b.conv, opts.allow_approximate);
        report.sites.push_back({bi, "pre_conv", "conv.kernel", b.conv.kernel.shape(), approx});
        report.approximate = report.approximate || approx;
        b.pre.reset();
      }
    }
  }

  report.depth_after = op_count(merged);
  report.params_removed = param_count(model) - param_count(merged);
  report.probes = probes.size();
  // max_rel_err is relative to the output scale of the whole probe set:
  // max |before - after| / max max(|before|, |after|). Normalizing per probe
  // would measure noise whenever one probe's outputs pass near zero.
  double abs_err = 0.0, magnitude = 0.0;
  for (const auto& probe : probes) {
    auto before = model_forward(model, probe);
    auto after = model_forward(merged, probe);
    abs_err = std::max(abs_err, static_cast<double>(max_abs_diff(before, after)));
    for (std::size_t i = 0; i < before.numel(); ++i)
      magnitude = std::max({magnitude, std::abs(static_cast<double>(before[i])),
                            std::abs(static_cast<double>(after[i]))});
  }
  report.max_abs_err = abs_err;
  report.max_rel_err = abs_err / std::max(magnitude, 1e-30);
  return {std::move(merged), std::move(report)};
}

}  // namespace repa
