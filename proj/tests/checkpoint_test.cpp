#include "repa/checkpoint.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "repa/model.hpp"

using repa::BackboneGraph;
using repa::CheckpointEntry;
using repa::Dtype;
using repa::ModelMeta;
using repa::Rng;
using repa::Tensor;

namespace {

std::string tmp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

std::vector<std::uint8_t> file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

template <class T>
BackboneGraph<T> adapted_tiny(std::uint64_t seed) {
  repa::ModelConfig mc;
  mc.width = 8;
  mc.depth = 2;
  mc.heads = 2;
  mc.classes = 3;
  repa::AdapterConfig ac;
  ac.c = 4;
  ac.k = 2;
  ac.s = 0.7;
  ac.bias = true;
  ac.sites = {repa::Site::pre_attn, repa::Site::pre_ffn};
  auto model = repa::attach_adapters(repa::build_backbone<T>(mc, seed), ac, seed + 1);
  Rng rng(seed + 2);
  for (auto& blk : model.blocks) {
    auto& b = std::get<repa::ViTBlock<T>>(blk);
    for (auto& [site, ad] : b.adapters) {
      auto& rep = std::get<repa::RepAdapterModule<T>>(ad);
      for (auto& w : rep.up.blocks) w = Tensor<T>::randn(rng, w.shape());
    }
  }
  return model;
}

template <class T>
ModelMeta tiny_meta() {
  ModelMeta meta;
  meta.kind = "vit";
  meta.heads = 2;
  meta.tokens = 4;
  meta.classes = 3;
  meta.adapter.variant = repa::AdapterVariant::repadapter;
  meta.adapter.c = 4;
  meta.adapter.k = 2;
  meta.adapter.s = 0.7;
  meta.adapter.bias = true;
  return meta;
}

}  // namespace

TEST(CheckpointRaw, RoundTripPreservesEverything) {
  std::vector<CheckpointEntry> entries(2);
  entries[0].name = "alpha";
  entries[0].dtype = Dtype::f32;
  entries[0].dims = {2, 3};
  entries[0].raw.resize(24);
  for (std::size_t i = 0; i < 24; ++i) entries[0].raw[i] = static_cast<std::uint8_t>(i * 7);
  entries[1].name = "beta.gamma";
  entries[1].dtype = Dtype::f64;
  entries[1].dims = {4};
  entries[1].raw.resize(32, 0xAB);

  auto path = tmp_path("repa_ckpt_raw.srep");
  write_checkpoint(path, entries);
  auto back = repa::read_checkpoint(path);
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back[i].name, entries[i].name);
    EXPECT_EQ(back[i].dtype, entries[i].dtype);
    EXPECT_EQ(back[i].dims, entries[i].dims);
    EXPECT_EQ(back[i].raw, entries[i].raw);
  }
  std::remove(path.c_str());
}

TEST(CheckpointRaw, RejectsBadMagicAndUnknownVersion) {
  auto path = tmp_path("repa_ckpt_bad.srep");
  {
    std::ofstream f(path, std::ios::binary);
    f << "NOPE";
  }
  EXPECT_THROW(repa::read_checkpoint(path), std::runtime_error);
  {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    const char bytes[] = {'S', 'R', 'E', 'P', 9, 0, 0, 0, 0, 0};  // version 9
    f.write(bytes, sizeof(bytes));
  }
  try {
    repa::read_checkpoint(path);
    FAIL() << "expected version error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }
  std::remove(path.c_str());
}

TEST(CheckpointRaw, RejectsTruncatedFile) {
  std::vector<CheckpointEntry> entries(1);
  entries[0].name = "t";
  entries[0].dtype = Dtype::f64;
  entries[0].dims = {8};
  entries[0].raw.resize(64, 1);
  auto path = tmp_path("repa_ckpt_trunc.srep");
  write_checkpoint(path, entries);
  auto bytes = file_bytes(path);
  {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size() - 10));
  }
  EXPECT_THROW(repa::read_checkpoint(path), std::invalid_argument);
  std::remove(path.c_str());
}

template <class T>
void round_trip_case(const char* tag) {
  auto model = adapted_tiny<T>(11);
  auto meta = tiny_meta<T>();
  auto p1 = tmp_path(std::string("repa_model_1_") + tag + ".srep");
  auto p2 = tmp_path(std::string("repa_model_2_") + tag + ".srep");
  save_model(p1, model, meta);

  auto any = repa::load_model(p1);
  ASSERT_TRUE(std::holds_alternative<repa::LoadedModel<T>>(any)) << tag;
  auto& loaded = std::get<repa::LoadedModel<T>>(any);

  // loaded model computes bit-identical outputs
  Rng rng(13);
  for (int i = 0; i < 5; ++i) {
    auto x = Tensor<T>::randn(rng, {4, 8});
    EXPECT_EQ(model_forward(model, x), model_forward(loaded.model, x)) << tag;
  }
  EXPECT_EQ(loaded.meta.heads, meta.heads);
  EXPECT_EQ(loaded.meta.adapter.bias, true);

  // save -> load -> save is byte-identical
  save_model(p2, loaded.model, loaded.meta);
  EXPECT_EQ(file_bytes(p1), file_bytes(p2)) << tag;
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST(CheckpointModel, RoundTripBitExactF32) { round_trip_case<float>("f32"); }
TEST(CheckpointModel, RoundTripBitExactF64) { round_trip_case<double>("f64"); }

TEST(CheckpointModel, ConvModelRoundTrips) {
  repa::ModelConfig mc;
  mc.kind = "conv";
  mc.width = 2;
  mc.depth = 2;
  mc.filters = 4;
  mc.image = 6;
  mc.kernel = 3;
  mc.conv_padding = 1;
  mc.classes = 2;
  auto model = repa::build_backbone<double>(mc, 17);
  ModelMeta meta;
  meta.kind = "conv";
  meta.image = 6;
  meta.classes = 2;
  meta.conv_padding = 1;
  auto path = tmp_path("repa_model_conv.srep");
  save_model(path, model, meta);
  auto any = repa::load_model(path);
  auto& loaded = std::get<repa::LoadedModel<double>>(any);
  Rng rng(19);
  auto x = Tensor<double>::randn(rng, {2, 6, 6});
  EXPECT_EQ(model_forward(model, x), model_forward(loaded.model, x));
  std::remove(path.c_str());
}

TEST(CheckpointModel, MixedDtypesRejected) {
  std::vector<CheckpointEntry> entries(2);
  entries[0].name = "meta.kind";
  entries[0].dtype = Dtype::f32;
  entries[0].dims = {1};
  entries[0].raw.resize(4, 0);
  entries[1].name = "blocks.0.conv.kernel";
  entries[1].dtype = Dtype::f64;
  entries[1].dims = {1, 1, 1, 1};
  entries[1].raw.resize(8, 0);
  auto path = tmp_path("repa_ckpt_mixed.srep");
  write_checkpoint(path, entries);
  EXPECT_THROW(repa::load_model(path), std::invalid_argument);
  std::remove(path.c_str());
}
