// Acceptance suite: one pass/fail line per criterion, nonzero exit if any
// criterion fails. Tolerances are pinned here, not configurable.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <vector>

#include "repa/bench.hpp"
#include "repa/checkpoint.hpp"
#include "repa/cli.hpp"
#include "repa/config.hpp"
#include "repa/grad.hpp"
#include "repa/reparam.hpp"
#include "repa/train.hpp"

namespace {

using namespace repa;

struct Failure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void expect(bool ok, const std::string& msg) {
  if (!ok) throw Failure(msg);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---- criterion 1: merge exactness on a trained tiny ViT --------------------------

template <class T>
SyntheticTask<T> tiny_task(std::uint64_t seed) {
  TaskConfig tc;
  tc.kind = "xor";
  tc.width = 32;
  tc.tokens = 4;
  tc.train_size = 96;
  tc.val_size = 32;
  tc.separation = 1.2;
  tc.cluster_std = 0.45;
  tc.seed = seed;
  return SyntheticTask<T>::make(tc);
}

template <class T>
MergeReport trained_merge_report(double s, std::uint64_t seed) {
  ModelConfig mc;
  mc.width = 32;
  mc.depth = 2;
  mc.heads = 4;
  mc.classes = 2;
  AdapterConfig ac;
  ac.c = 8;
  ac.k = 2;
  ac.s = s;
  ac.sites = {Site::pre_attn, Site::pre_ffn};  // pre-insertion placements
  auto model = attach_adapters(build_backbone<T>(mc, seed), ac, seed + 1);
  auto task = tiny_task<T>(seed + 2);
  TrainConfig tr;
  tr.mode = TrainMode::petl;
  tr.epochs = 2;
  tr.batch = 32;
  tr.lr = 3e-3;
  tr.seed = seed + 3;
  train_adapters(model, task, tr);

  Rng prng(seed + 4);
  std::vector<Tensor<T>> probes;
  for (int i = 0; i < 100; ++i) probes.push_back(Tensor<T>::randn(prng, {4, 32}));
  return merge_model(model, probes).second;
}

void criterion_1() {
  const auto t0 = std::chrono::steady_clock::now();
  for (double s : {0.1, 1.0, 10.0}) {
    auto r64 = trained_merge_report<double>(s, 100 + static_cast<std::uint64_t>(s * 10));
    expect(r64.probes == 100, "expected 100 probe batches");
    expect(r64.max_abs_err <= 1e-12,
           "f64 max abs err " + std::to_string(r64.max_abs_err) + " > 1e-12 at s=" +
               std::to_string(s));
    auto r32 = trained_merge_report<float>(s, 200 + static_cast<std::uint64_t>(s * 10));
    expect(r32.max_rel_err <= 1e-5,
           "f32 max rel err " + std::to_string(r32.max_rel_err) + " > 1e-5 at s=" +
               std::to_string(s));
  }
  const double elapsed = seconds_since(t0);
  expect(elapsed < 5.0, "runtime " + std::to_string(elapsed) + "s exceeds 5s");
}

// ---- criterion 2: parameter audit ------------------------------------------------

void criterion_2() {
  AdapterConfig ac;
  ac.c = 8;
  ac.k = 2;
  ac.bias = false;
  ac.sites = {Site::pre_attn};
  const auto attn_only = count_adapter_params(ac, 768, 12);
  expect(attn_only == 110592,
         "attn-only count " + std::to_string(attn_only) + " != 110592");
  expect(params_m_string(attn_only) == "0.11", "attn-only label mismatch");

  ac.sites = {Site::pre_attn, Site::pre_ffn};
  const auto both = count_adapter_params(ac, 768, 12);
  expect(both == 221184, "attn+ffn count " + std::to_string(both) + " != 221184");
  expect(params_m_string(both) == "0.22", "attn+ffn label mismatch");
}

// ---- criterion 3: sparsity saving and published ablation columns ------------------

void criterion_3() {
  AdapterConfig ac;
  ac.c = 8;
  ac.bias = false;
  ac.sites = {Site::pre_attn};
  ac.k = 2;
  const auto k2 = count_adapter_params(ac, 768, 12);
  ac.k = 1;
  const auto k1 = count_adapter_params(ac, 768, 12);
  expect(static_cast<double>(k2) / static_cast<double>(k1) == 0.75,
         "params(k=2)/params(k=1) != 0.75 exactly");

  const std::string base = R"(
[model]
width = 32
depth = 1
heads = 2
tokens = 4
classes = 2
[adapter]
c = 8
k = 2
bias = false
sites = pre_attn
[task]
train_size = 32
val_size = 32
[train]
epochs = 0
)";
  std::vector<std::string> problems;
  std::size_t matched = 0, total = 0;
  auto check_axis = [&](const std::string& axis, const std::vector<std::string>& want) {
    std::istringstream in(base + "[ablate]\naxis = " + axis + "\n");
    auto cfg = Config::parse(in);
    auto rows = cli::run_ablation(cfg, nullptr);
    for (std::size_t i = 0; i < want.size(); ++i) {
      ++total;
      if (rows[i].params_m == want[i])
        ++matched;
      else
        problems.push_back(axis + " row " + rows[i].setting + ": got " + rows[i].params_m +
                           "M (count " + std::to_string(rows[i].params) + "), published " +
                           want[i] + "M");
    }
  };
  check_axis("groups", {"0.16", "0.11", "0.09", "0.08"});
  check_axis("dims", {"0.05", "0.11", "0.16", "0.22"});
  if (!problems.empty()) {
    std::string msg = std::to_string(matched) + " of " + std::to_string(total) +
                      " published cells reproduced (0.75 ratio exact); mismatches:";
    for (const auto& p : problems)
      msg += " [" + p + " - that cell matches the biased dense count 156768 rounded, "
             "which contradicts the convention fixing the other cells]";
    throw Failure(msg);
  }
}

// ---- criterion 4: zero structural overhead ----------------------------------------

void criterion_4() {
  ModelConfig mc;
  mc.width = 64;
  mc.depth = 2;
  mc.heads = 4;
  mc.classes = 2;
  mc.tokens = 16;
  auto plain = build_backbone<float>(mc, 1);

  AdapterConfig seq;
  seq.c = 8;
  seq.k = 2;
  seq.sites = {Site::pre_attn, Site::pre_ffn};
  auto adapted = attach_adapters(plain, seq, 2);

  AdapterConfig par;
  par.variant = AdapterVariant::parallel;
  par.c = 8;
  par.k = 2;
  par.sites = {Site::parallel_ffn};
  auto parallel = attach_adapters(plain, par, 3);

  Rng prng(4);
  std::vector<Tensor<float>> probes;
  for (int i = 0; i < 4; ++i) probes.push_back(Tensor<float>::randn(prng, {16, 64}));
  auto [merged, report] = merge_model(adapted, probes);

  expect(op_count(merged) == op_count(plain), "merged op count != plain op count");
  expect(op_count(adapted) > op_count(plain), "sequential op count not greater than plain");
  expect(op_count(parallel) > op_count(plain), "parallel op count not greater than plain");
  expect(param_count(merged) == param_count(plain), "merged param count != plain");

  Rng brng(5);
  std::vector<Tensor<float>> batch;
  for (int i = 0; i < 4; ++i) batch.push_back(Tensor<float>::randn(brng, {16, 64}));

  // Interleave the two variants rep-by-rep so drift on the host cancels, and
  // retry the whole measurement against transient load spikes.
  auto median_ratio = [&]() {
    const std::size_t reps = 100;
    volatile float guard{};
    auto time_one = [&](const BackboneGraph<float>& m) {
      const auto t0 = std::chrono::steady_clock::now();
      auto r = batched_forward(m, batch);
      const auto t1 = std::chrono::steady_clock::now();
      guard = guard + r.back()[0];
      return std::chrono::duration<double, std::milli>(t1 - t0).count();
    };
    for (int i = 0; i < 5; ++i) {
      time_one(plain);
      time_one(merged);
    }
    std::vector<double> tp, tm;
    for (std::size_t i = 0; i < reps; ++i) {
      if (i % 2 == 0) {
        tp.push_back(time_one(plain));
        tm.push_back(time_one(merged));
      } else {
        tm.push_back(time_one(merged));
        tp.push_back(time_one(plain));
      }
    }
    std::sort(tp.begin(), tp.end());
    std::sort(tm.begin(), tm.end());
    return tm[reps / 2] / tp[reps / 2];
  };
  double ratio = 0;
  for (int attempt = 0; attempt < 3; ++attempt) {
    ratio = median_ratio();
    if (ratio <= 1.02) break;
  }
  expect(ratio <= 1.02, "merged median latency ratio " + std::to_string(ratio) + " > 1.02");
}

// ---- criterion 5: group densification ---------------------------------------------

void criterion_5() {
  Rng rng(6);
  std::size_t cases = 0;
  for (std::size_t c = 1; c <= 16; ++c) {
    for (std::size_t d = 1; d <= 16; ++d) {
      for (std::size_t k = 1; k <= std::min(c, d); ++k) {
        if (c % k != 0 || d % k != 0) continue;
        GroupwiseLinear<double> g;
        g.groups = k;
        for (std::size_t i = 0; i < k; ++i)
          g.blocks.push_back(Tensor<double>::randn(rng, {c / k, d / k}));
        auto dense = densify(g);
        auto x = Tensor<double>::randn(rng, {3, c});
        auto a = groupwise_forward(g, x);
        auto b = matmul(x, dense.W);
        expect(max_abs_diff(a, b) == 0.0,
               "densified mismatch at c=" + std::to_string(c) + " d=" + std::to_string(d) +
                   " k=" + std::to_string(k));
        ++cases;
      }
    }
  }
  expect(cases > 300, "unexpectedly few densification cases enumerated");
}

// ---- criterion 6: mergeability rules ----------------------------------------------

void criterion_6() {
  Rng rng(7);
  // nonlinear adapters refuse to collapse
  AdapterConfig nl;
  nl.c = 4;
  nl.k = 2;
  nl.act = Activation::gelu;
  auto nonlinear = make_adapter<double>(nl, 8, rng);
  bool threw = false;
  try {
    collapse_adapter(nonlinear);
  } catch (const MergeError& e) {
    threw = std::string(e.what()).find("nonlinear") != std::string::npos;
  }
  expect(threw, "nonlinear collapse did not refuse with a diagnostic");

  // parallel placement refuses at model level, naming the site
  ModelConfig mc;
  mc.width = 8;
  mc.depth = 1;
  mc.heads = 2;
  mc.classes = 2;
  auto model = build_backbone<double>(mc, 8);
  AdapterConfig par;
  par.variant = AdapterVariant::parallel;
  par.c = 4;
  par.k = 2;
  par.sites = {Site::parallel_ffn};
  auto pmodel = attach_adapters(model, par, 9);
  std::vector<Tensor<double>> probes = {Tensor<double>::randn(rng, {3, 8})};
  threw = false;
  try {
    merge_model(pmodel, probes);
  } catch (const MergeError& e) {
    threw = std::string(e.what()).find("parallel_ffn") != std::string::npos;
  }
  expect(threw, "parallel merge did not refuse naming the site");

  // padded K>1 conv with nonzero collapsed bias refuses by default,
  // approximates on request and reports the border deviation
  ConvLayer<double> conv;
  conv.kernel = Tensor<double>::randn(rng, {2, 2, 3, 3});
  conv.padding = 1;
  RepAdapterModule<double> ad;
  ad.down.groups = 1;
  ad.down.blocks = {Tensor<double>::randn(rng, {2, 2})};
  ad.up.groups = 2;
  ad.up.blocks = {Tensor<double>::randn(rng, {1, 1}), Tensor<double>::randn(rng, {1, 1})};
  ad.up.b = Tensor<double>({2}, {0.4, -0.2});
  auto ca = collapse_adapter(ad);
  threw = false;
  try {
    merge_into_conv(ca, conv);
  } catch (const MergeError& e) {
    threw = std::string(e.what()).find("border bias") != std::string::npos;
  }
  expect(threw, "padded biased conv merge did not refuse by default");

  auto approx = merge_into_conv(ca, conv, /*allow_approximate=*/true);
  auto x = Tensor<double>::randn(rng, {2, 5, 5});
  auto adapted_in = rows_to_image(repadapter_forward(ad, image_to_rows(x)), 5, 5);
  auto want = conv2d_forward(conv, adapted_in);
  auto got = conv2d_forward(approx, x);
  double interior = 0, border = 0;
  for (std::size_t o = 0; o < 2; ++o)
    for (std::size_t h = 0; h < 5; ++h)
      for (std::size_t w = 0; w < 5; ++w) {
        const double diff = std::abs(want[(o * 5 + h) * 5 + w] - got[(o * 5 + h) * 5 + w]);
        (h == 0 || h == 4 || w == 0 || w == 4) ? border = std::max(border, diff)
                                               : interior = std::max(interior, diff);
      }
  expect(interior <= 1e-12, "approximate conv merge deviates on interior pixels");
  expect(border > 1e-8, "approximate conv merge shows no border deviation to report");

  // bias-free or unpadded or pointwise conv merges stay allowed
  conv.padding = 0;
  merge_into_conv(ca, conv);
}

// ---- criterion 7: gradient correctness --------------------------------------------

template <class T>
double batch_loss(const BackboneGraph<T>& model, const std::vector<Tensor<T>>& inputs,
                  const std::vector<std::size_t>& labels) {
  double total = 0;
  const T w = T{1} / static_cast<T>(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i)
    total += static_cast<double>(
        softmax_xent(model_forward(model, inputs[i]), labels[i], w).loss);
  return total;
}

void gradcheck(BackboneGraph<double>& model, const std::vector<Tensor<double>>& inputs,
               const std::vector<std::size_t>& labels, TrainMode mode,
               std::vector<std::string>& touched) {
  auto store = ParamStore<double>::attach(model, mode);
  const double w = 1.0 / static_cast<double>(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    ModelCache<double> cache;
    auto logits = model_forward_cached(model, inputs[i], cache);
    auto lg = softmax_xent(logits, labels[i], w);
    model_backward(model, cache, lg.dlogits, store.grads);
  }
  const double h = 1e-5;
  for (auto& e : store.entries) {
    if (!e.trainable) continue;
    touched.push_back(e.name);
    const auto& grad = store.grads.slots.at(e.name);
    for (std::size_t i = 0; i < e.value->numel(); ++i) {
      const double orig = (*e.value)[i];
      (*e.value)[i] = orig + h;
      const double lp = batch_loss(model, inputs, labels);
      (*e.value)[i] = orig - h;
      const double lm = batch_loss(model, inputs, labels);
      (*e.value)[i] = orig;
      const double numeric = (lp - lm) / (2.0 * h);
      const double analytic = grad[i];
      const double tol = 1e-4 * std::max(std::abs(numeric), std::abs(analytic)) + 1e-9;
      expect(std::abs(analytic - numeric) <= tol,
             "gradient mismatch at " + e.name + "[" + std::to_string(i) + "]: analytic " +
                 std::to_string(analytic) + " vs numeric " + std::to_string(numeric));
    }
  }
}

void criterion_7() {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<std::string> touched;

  {
    ModelConfig mc;
    mc.width = 8;
    mc.depth = 1;
    mc.heads = 2;
    mc.classes = 2;
    AdapterConfig ac;
    ac.c = 4;
    ac.k = 2;
    ac.bias = true;
    ac.sites = {Site::pre_attn, Site::pre_ffn};
    auto model = attach_adapters(build_backbone<double>(mc, 10), ac, 11);
    Rng rng(12);
    for (auto& blk : model.blocks) {
      auto& b = std::get<ViTBlock<double>>(blk);
      for (auto& [site, ad] : b.adapters) {
        auto& rep = std::get<RepAdapterModule<double>>(ad);
        for (auto& wb : rep.up.blocks) wb = Tensor<double>::randn(rng, wb.shape(), 0.3);
      }
    }
    std::vector<Tensor<double>> inputs = {Tensor<double>::randn(rng, {3, 8}),
                                          Tensor<double>::randn(rng, {3, 8})};
    gradcheck(model, inputs, {0, 1}, TrainMode::full, touched);
  }
  {
    ModelConfig mc;
    mc.kind = "conv";
    mc.width = 2;
    mc.depth = 2;
    mc.filters = 4;
    mc.image = 5;
    mc.kernel = 3;
    mc.conv_padding = 1;
    mc.classes = 2;
    AdapterConfig ac;
    ac.c = 2;
    ac.k = 2;
    ac.bias = true;
    ac.sites = {Site::pre_conv};
    auto model = attach_adapters(build_backbone<double>(mc, 13), ac, 14);
    Rng rng(15);
    for (auto& blk : model.blocks) {
      auto& b = std::get<ConvBlock<double>>(blk);
      auto& rep = std::get<RepAdapterModule<double>>(*b.pre);
      for (auto& wb : rep.up.blocks) wb = Tensor<double>::randn(rng, wb.shape(), 0.3);
    }
    std::vector<Tensor<double>> inputs = {Tensor<double>::randn(rng, {2, 5, 5}),
                                          Tensor<double>::randn(rng, {2, 5, 5})};
    gradcheck(model, inputs, {0, 1}, TrainMode::full, touched);
  }

  // every trainable parameter class must have been exercised
  for (const std::string want :
       {".adapter.", ".down.W0", ".up.W0", ".up.W1", ".down.b", ".up.b", "head.W", "head.b",
        ".ln1.gamma", ".ln1.beta", ".attn.q.W", ".attn.q.b", ".attn.out.W", ".ffn.fc1.W",
        ".ffn.fc2.b", ".conv.kernel", ".conv.bias"}) {
    bool found = false;
    for (const auto& name : touched)
      if (name.find(want) != std::string::npos) {
        found = true;
        break;
      }
    expect(found, std::string("no trainable parameter matched class '") + want + "'");
  }
  const double elapsed = seconds_since(t0);
  expect(elapsed < 30.0, "runtime " + std::to_string(elapsed) + "s exceeds 30s");
}

// ---- criterion 8: learning with a frozen backbone ----------------------------------

void criterion_8() {
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    TaskConfig tc;
    tc.kind = "xor";
    tc.width = 32;
    tc.tokens = 4;
    tc.train_size = 256;
    tc.val_size = 192;
    tc.separation = 1.2;
    tc.cluster_std = 0.45;
    tc.token_noise = 0.1;
    tc.seed = seed * 100;
    auto task = SyntheticTask<double>::make(tc);

    ModelConfig mc;
    mc.width = 32;
    mc.depth = 2;
    mc.heads = 4;
    mc.classes = 2;
    AdapterConfig ac;
    ac.c = 8;
    ac.k = 2;
    ac.s = 1.0;
    ac.sites = {Site::pre_attn, Site::pre_ffn};
    TrainConfig tr;
    tr.epochs = 12;
    tr.batch = 32;
    tr.lr = 3e-3;
    tr.seed = seed;

    auto head_model = build_backbone<double>(mc, seed);
    const auto head_sum = backbone_checksum(head_model);
    tr.mode = TrainMode::head_only;
    auto head_log = train_adapters(head_model, task, tr);
    expect(backbone_checksum(head_model) == head_sum,
           "head-only training touched the backbone (seed " + std::to_string(seed) + ")");

    auto ada_model = attach_adapters(build_backbone<double>(mc, seed), ac, seed + 50);
    const auto ada_sum = backbone_checksum(ada_model);
    tr.mode = TrainMode::petl;
    auto ada_log = train_adapters(ada_model, task, tr);
    expect(backbone_checksum(ada_model) == ada_sum,
           "adapter training touched the backbone (seed " + std::to_string(seed) + ")");

    expect(ada_log.back().val_acc > head_log.back().val_acc,
           "adapter+head (" + std::to_string(ada_log.back().val_acc) +
               ") did not beat head-only (" + std::to_string(head_log.back().val_acc) +
               ") at seed " + std::to_string(seed));
  }
}

// ---- criterion 9: checkpoint round trip --------------------------------------------

std::vector<std::uint8_t> file_bytes(const std::string& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

template <class T>
void round_trip(const std::string& tag) {
  ModelConfig mc;
  mc.width = 16;
  mc.depth = 2;
  mc.heads = 2;
  mc.classes = 3;
  AdapterConfig ac;
  ac.c = 4;
  ac.k = 2;
  ac.bias = true;
  ac.sites = {Site::pre_attn, Site::pre_ffn};
  auto model = attach_adapters(build_backbone<T>(mc, 16), ac, 17);
  ModelMeta meta;
  meta.kind = "vit";
  meta.heads = 2;
  meta.tokens = 4;
  meta.classes = 3;
  meta.adapter = ac;

  auto dir = std::filesystem::temp_directory_path() / "repa_acceptance";
  std::filesystem::create_directories(dir);
  const auto p1 = (dir / ("rt1_" + tag + ".srep")).string();
  const auto p2 = (dir / ("rt2_" + tag + ".srep")).string();
  save_model(p1, model, meta);
  auto any = load_model(p1);
  auto& loaded = std::get<LoadedModel<T>>(any);
  save_model(p2, loaded.model, loaded.meta);
  expect(file_bytes(p1) == file_bytes(p2), tag + " round trip not byte-identical");
  std::filesystem::remove(p1);
  std::filesystem::remove(p2);
}

void criterion_9() {
  round_trip<float>("f32");
  round_trip<double>("f64");
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* title;
    std::function<void()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "merge exactness (trained tiny ViT, f64 abs <= 1e-12, f32 rel <= 1e-5, 100 probes)",
       criterion_1},
      {2, "parameter audit (110592 attn-only, 221184 attn+ffn, exact)", criterion_2},
      {3, "sparsity saving (k2/k1 == 0.75 exact; published ablation columns)", criterion_3},
      {4, "zero structural overhead (op counts; merged median <= 1.02x plain)", criterion_4},
      {5, "group densification exact for all c,d <= 16", criterion_5},
      {6, "mergeability rules (nonlinear/parallel/border-bias refusals)", criterion_6},
      {7, "gradient correctness vs central differences (rel 1e-4, f64)", criterion_7},
      {8, "frozen-backbone learning: adapter+head beats head-only across 3 seeds",
       criterion_8},
      {9, "checkpoint round trip byte-identical (f32, f64)", criterion_9},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    try {
      c.run();
      std::printf("[PASS] criterion %d: %s (%.2fs)\n", c.id, c.title, seconds_since(t0));
    } catch (const std::exception& e) {
      ++failures;
      std::printf("[FAIL] criterion %d: %s (%.2fs)\n       %s\n", c.id, c.title,
                  seconds_since(t0), e.what());
    }
    std::fflush(stdout);
  }
  if (failures) std::printf("%d of %zu criteria failed\n", failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
