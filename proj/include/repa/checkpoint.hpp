#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "repa/adapter.hpp"
#include "repa/model.hpp"
#include "repa/tensor.hpp"

namespace repa {

// Checkpoint container: magic "SREP", u16 format version, u32 entry count,
// then per entry {u16 name length, name, u8 dtype code, u8 rank, u32 dims,
// raw little-endian row-major scalars}. Everything is explicitly
// little-endian regardless of host.
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  Dtype dtype = Dtype::f32;
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> raw;

  std::size_t numel() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

namespace detail {

inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

struct ByteReader {
  const std::vector<std::uint8_t>& buf;
  std::size_t pos = 0;

  std::uint8_t u8() {
    require(pos + 1 <= buf.size(), "checkpoint: truncated file");
    return buf[pos++];
  }
  std::uint16_t u16() {
    require(pos + 2 <= buf.size(), "checkpoint: truncated file");
    std::uint16_t v = static_cast<std::uint16_t>(buf[pos]) |
                      static_cast<std::uint16_t>(buf[pos + 1]) << 8;
    pos += 2;
    return v;
  }
  std::uint32_t u32() {
    require(pos + 4 <= buf.size(), "checkpoint: truncated file");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  void bytes(std::uint8_t* dst, std::size_t n) {
    require(pos + n <= buf.size(), "checkpoint: truncated file");
    std::memcpy(dst, buf.data() + pos, n);
    pos += n;
  }
};

template <ScalarType T>
void put_scalar_le(std::vector<std::uint8_t>& out, T v) {
  if constexpr (std::same_as<T, float>) {
    put_u32(out, std::bit_cast<std::uint32_t>(v));
  } else {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    put_u32(out, static_cast<std::uint32_t>(bits & 0xffffffffull));
    put_u32(out, static_cast<std::uint32_t>(bits >> 32));
  }
}

template <ScalarType T>
T get_scalar_le(const std::uint8_t* p) {
  if constexpr (std::same_as<T, float>) {
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return std::bit_cast<float>(bits);
  } else {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return std::bit_cast<double>(bits);
  }
}

}  // namespace detail

inline void write_checkpoint(const std::string& path,
                             const std::vector<CheckpointEntry>& entries) {
  std::vector<std::uint8_t> out;
  out.insert(out.end(), {'S', 'R', 'E', 'P'});
  detail::put_u16(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    detail::require(e.name.size() <= 0xffff, "checkpoint: name too long");
    detail::require(e.dims.size() <= 0xff, "checkpoint: rank too large");
    detail::put_u16(out, static_cast<std::uint16_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    out.push_back(static_cast<std::uint8_t>(e.dtype));
    out.push_back(static_cast<std::uint8_t>(e.dims.size()));
    for (auto d : e.dims) detail::put_u32(out, d);
    const std::size_t want = e.numel() * (e.dtype == Dtype::f32 ? 4 : 8);
    detail::require(e.raw.size() == want, "checkpoint: raw size mismatch for " + e.name);
    out.insert(out.end(), e.raw.begin(), e.raw.end());
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  detail::require(f.good(), "checkpoint: cannot open '" + path + "' for writing");
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  detail::require(f.good(), "checkpoint: write failed for '" + path + "'");
}

inline std::vector<CheckpointEntry> read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f.good()) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(f)),
                                std::istreambuf_iterator<char>());
  detail::ByteReader r{buf};
  std::uint8_t magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, "SREP", 4) != 0)
    throw std::runtime_error("checkpoint: bad magic in '" + path + "'");
  const auto version = r.u16();
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unknown format version " + std::to_string(version));
  const auto count = r.u32();
  std::vector<CheckpointEntry> entries;
  entries.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const auto name_len = r.u16();
    e.name.resize(name_len);
    r.bytes(reinterpret_cast<std::uint8_t*>(e.name.data()), name_len);
    const auto dcode = r.u8();
    detail::require(dcode <= 1, "checkpoint: bad dtype code");
    e.dtype = static_cast<Dtype>(dcode);
    const auto rank = r.u8();
    for (std::uint8_t k = 0; k < rank; ++k) e.dims.push_back(r.u32());
    e.raw.resize(e.numel() * (e.dtype == Dtype::f32 ? 4 : 8));
    r.bytes(e.raw.data(), e.raw.size());
    entries.push_back(std::move(e));
  }
  detail::require(r.pos == buf.size(), "checkpoint: trailing bytes in '" + path + "'");
  return entries;
}

// ---- model <-> checkpoint --------------------------------------------------------

// Everything the tensors alone cannot describe.
struct ModelMeta {
  std::string kind = "vit";
  std::size_t heads = 1;
  Pooling pooling = Pooling::mean;
  std::size_t tokens = 8;   // probe geometry for token models
  std::size_t image = 8;    // probe geometry for conv models (H = W)
  std::size_t classes = 0;
  std::size_t patch = 0;    // nonzero when a patch embedding is present
  double ln_eps = 1e-6;
  std::size_t conv_stride = 1;
  std::size_t conv_padding = 0;
  AdapterConfig adapter;    // variant == none when the model carries no adapters
};

namespace detail {

template <ScalarType T>
CheckpointEntry tensor_entry(const std::string& name, const Tensor<T>& t) {
  CheckpointEntry e;
  e.name = name;
  e.dtype = dtype_of<T>();
  for (auto d : t.shape()) e.dims.push_back(static_cast<std::uint32_t>(d));
  e.raw.reserve(t.numel() * sizeof(T));
  for (std::size_t i = 0; i < t.numel(); ++i) put_scalar_le(e.raw, t[i]);
  return e;
}

template <ScalarType T>
CheckpointEntry meta_entry(const std::string& name, double v) {
  Tensor<T> t({1});
  t[0] = static_cast<T>(v);
  return tensor_entry("meta." + name, t);
}

template <ScalarType T>
Tensor<T> entry_tensor(const CheckpointEntry& e) {
  require(e.dtype == dtype_of<T>(), "checkpoint: dtype mismatch for " + e.name);
  std::vector<std::size_t> shape;
  for (auto d : e.dims) shape.push_back(d);
  Tensor<T> t(shape);
  for (std::size_t i = 0; i < t.numel(); ++i)
    t[i] = get_scalar_le<T>(e.raw.data() + i * sizeof(T));
  return t;
}

}  // namespace detail

template <ScalarType T>
void save_model(const std::string& path, const BackboneGraph<T>& model,
                const ModelMeta& meta) {
  std::vector<CheckpointEntry> entries;
  auto put = [&](const std::string& name, double v) {
    entries.push_back(detail::meta_entry<T>(name, v));
  };
  put("kind", meta.kind == "vit" ? 0 : 1);
  put("heads", static_cast<double>(meta.heads));
  put("pooling", meta.pooling == Pooling::mean ? 0 : 1);
  put("tokens", static_cast<double>(meta.tokens));
  put("image", static_cast<double>(meta.image));
  put("classes", static_cast<double>(meta.classes));
  put("patch", static_cast<double>(meta.patch));
  put("ln_eps", meta.ln_eps);
  put("conv_stride", static_cast<double>(meta.conv_stride));
  put("conv_padding", static_cast<double>(meta.conv_padding));
  if (adapter_count(model) > 0) {
    put("adapter.variant", static_cast<double>(meta.adapter.variant));
    put("adapter.c", static_cast<double>(meta.adapter.c));
    put("adapter.k", static_cast<double>(meta.adapter.k));
    put("adapter.s", meta.adapter.s);
    put("adapter.bias", meta.adapter.bias ? 1 : 0);
    put("adapter.full_sparse", meta.adapter.full_sparse ? 1 : 0);
    put("adapter.act", static_cast<double>(meta.adapter.act));
  }
  visit_params(model, [&](const std::string& name, const Tensor<T>& t, ParamClass) {
    entries.push_back(detail::tensor_entry(name, t));
  });
  write_checkpoint(path, entries);
}

template <ScalarType T>
struct LoadedModel {
  using value_type = T;
  BackboneGraph<T> model;
  ModelMeta meta;
};

namespace detail {

template <ScalarType T>
LoadedModel<T> assemble_model(const std::map<std::string, CheckpointEntry>& by_name) {
  auto meta_val = [&](const std::string& key, double fallback,
                      bool required = false) -> double {
    auto it = by_name.find("meta." + key);
    if (it == by_name.end()) {
      require(!required, "checkpoint: missing meta." + key);
      return fallback;
    }
    return static_cast<double>(entry_tensor<T>(it->second)[0]);
  };
  auto tensor_at = [&](const std::string& name) -> Tensor<T> {
    auto it = by_name.find(name);
    require(it != by_name.end(), "checkpoint: missing tensor " + name);
    return entry_tensor<T>(it->second);
  };
  auto has = [&](const std::string& name) { return by_name.count(name) != 0; };

  LoadedModel<T> out;
  ModelMeta& meta = out.meta;
  meta.kind = meta_val("kind", 0, true) == 0 ? "vit" : "conv";
  meta.heads = static_cast<std::size_t>(meta_val("heads", 1));
  meta.pooling = meta_val("pooling", 0) == 0 ? Pooling::mean : Pooling::cls;
  meta.tokens = static_cast<std::size_t>(meta_val("tokens", 8));
  meta.image = static_cast<std::size_t>(meta_val("image", 8));
  meta.classes = static_cast<std::size_t>(meta_val("classes", 0));
  meta.patch = static_cast<std::size_t>(meta_val("patch", 0));
  meta.ln_eps = meta_val("ln_eps", 1e-6);
  meta.conv_stride = static_cast<std::size_t>(meta_val("conv_stride", 1));
  meta.conv_padding = static_cast<std::size_t>(meta_val("conv_padding", 0));
  meta.adapter.variant = static_cast<AdapterVariant>(
      static_cast<int>(meta_val("adapter.variant", 0)));
  meta.adapter.c = static_cast<std::size_t>(meta_val("adapter.c", 8));
  meta.adapter.k = static_cast<std::size_t>(meta_val("adapter.k", 2));
  meta.adapter.s = meta_val("adapter.s", 1.0);
  meta.adapter.bias = meta_val("adapter.bias", 0) != 0;
  meta.adapter.full_sparse = meta_val("adapter.full_sparse", 0) != 0;
  meta.adapter.act = static_cast<Activation>(static_cast<int>(meta_val("adapter.act", 0)));
  meta.adapter.sites.clear();

  BackboneGraph<T>& m = out.model;
  m.pooling = meta.pooling;

  if (has("embed.proj.W")) {
    PatchEmbed<T> pe;
    pe.proj.W = tensor_at("embed.proj.W");
    if (has("embed.proj.b")) pe.proj.b = tensor_at("embed.proj.b");
    pe.cls = tensor_at("embed.cls");
    pe.pos = tensor_at("embed.pos");
    pe.patch = meta.patch;
    m.embed = std::move(pe);
  }

  auto load_affine = [&](const std::string& prefix) {
    AffineMap<T> a;
    a.W = tensor_at(prefix + ".W");
    if (has(prefix + ".b")) a.b = tensor_at(prefix + ".b");
    return a;
  };
  auto load_groupwise = [&](const std::string& prefix) {
    GroupwiseLinear<T> g;
    for (std::size_t i = 0; has(prefix + ".W" + std::to_string(i)); ++i)
      g.blocks.push_back(tensor_at(prefix + ".W" + std::to_string(i)));
    g.groups = g.blocks.size();
    require(g.groups > 0, "checkpoint: empty groupwise map at " + prefix);
    if (has(prefix + ".b")) g.b = tensor_at(prefix + ".b");
    return g;
  };
  auto load_adapter = [&](const std::string& prefix) -> Adapter<T> {
    if (has(prefix + ".down.W0")) {
      RepAdapterModule<T> a;
      a.down = load_groupwise(prefix + ".down");
      a.up = load_groupwise(prefix + ".up");
      a.scaling = static_cast<T>(meta.adapter.s);
      a.act = meta.adapter.act;
      return a;
    }
    BaselineAdapter<T> a;
    a.down = load_affine(prefix + ".down");
    a.up = load_affine(prefix + ".up");
    a.scaling = static_cast<T>(meta.adapter.s);
    a.act = meta.adapter.act == Activation::none &&
                    meta.adapter.variant != AdapterVariant::none
                ? Activation::gelu
                : meta.adapter.act;
    return a;
  };

  for (std::size_t i = 0;; ++i) {
    const std::string bp = "blocks." + std::to_string(i);
    if (has(bp + ".attn.q.W")) {
      ViTBlock<T> b;
      b.ln1.gamma = tensor_at(bp + ".ln1.gamma");
      b.ln1.beta = tensor_at(bp + ".ln1.beta");
      b.ln1.eps = static_cast<T>(meta.ln_eps);
      b.ln2.gamma = tensor_at(bp + ".ln2.gamma");
      b.ln2.beta = tensor_at(bp + ".ln2.beta");
      b.ln2.eps = static_cast<T>(meta.ln_eps);
      b.attn.n_heads = meta.heads;
      b.attn.q = load_affine(bp + ".attn.q");
      b.attn.k = load_affine(bp + ".attn.k");
      b.attn.v = load_affine(bp + ".attn.v");
      b.attn.out = load_affine(bp + ".attn.out");
      b.ffn.fc1 = load_affine(bp + ".ffn.fc1");
      b.ffn.fc2 = load_affine(bp + ".ffn.fc2");
      for (Site s : {Site::pre_attn, Site::post_attn, Site::pre_ffn, Site::post_ffn,
                     Site::parallel_ffn}) {
        const std::string ap = bp + ".adapter." + site_name(s);
        if (has(ap + ".down.W0") || has(ap + ".down.W"))
          b.adapters.emplace(s, load_adapter(ap));
      }
      m.blocks.emplace_back(std::move(b));
    } else if (has(bp + ".conv.kernel")) {
      ConvBlock<T> b;
      b.conv.kernel = tensor_at(bp + ".conv.kernel");
      if (has(bp + ".conv.bias")) b.conv.bias = tensor_at(bp + ".conv.bias");
      b.conv.stride = meta.conv_stride;
      b.conv.padding = meta.conv_padding;
      const std::string ap = bp + ".adapter.pre_conv";
      if (has(ap + ".down.W0") || has(ap + ".down.W")) b.pre = load_adapter(ap);
      m.blocks.emplace_back(std::move(b));
    } else {
      break;
    }
  }
  require(!m.blocks.empty(), "checkpoint: no blocks found");
  if (has("head.W")) m.head = load_affine("head");
  return out;
}

}  // namespace detail

using AnyModel = std::variant<LoadedModel<float>, LoadedModel<double>>;

inline AnyModel load_model(const std::string& path) {
  auto entries = read_checkpoint(path);
  detail::require(!entries.empty(), "checkpoint: empty file");
  std::map<std::string, CheckpointEntry> by_name;
  Dtype dtype = entries.front().dtype;
  for (auto& e : entries) {
    detail::require(e.dtype == dtype, "checkpoint: mixed dtypes in one model file");
    const std::string name = e.name;
    detail::require(by_name.emplace(name, std::move(e)).second,
                    "checkpoint: duplicate tensor " + name);
  }
  if (dtype == Dtype::f32) return detail::assemble_model<float>(by_name);
  return detail::assemble_model<double>(by_name);
}

inline Dtype model_dtype(const AnyModel& m) {
  return std::holds_alternative<LoadedModel<float>>(m) ? Dtype::f32 : Dtype::f64;
}

}  // namespace repa
