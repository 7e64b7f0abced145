#pragma once

#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "repa/bench.hpp"
#include "repa/checkpoint.hpp"
#include "repa/config.hpp"
#include "repa/model.hpp"
#include "repa/reparam.hpp"
#include "repa/train.hpp"

namespace repa {

// adapter parameter count for a configured model geometry; conv stacks have
// per-block widths
inline std::size_t count_adapter_params(const AdapterConfig& ac, const ModelConfig& mc) {
  if (ac.variant == AdapterVariant::none) return 0;
  if (mc.kind == "vit") return count_adapter_params(ac, mc.width, mc.depth);
  std::size_t total = 0;
  std::size_t cin = mc.width;
  for (std::size_t l = 0; l < mc.depth; ++l) {
    AdapterConfig one = ac;
    one.sites = {Site::pre_conv};
    total += count_adapter_params(one, cin, 1);
    cin = mc.filters;
  }
  return total;
}

// published convention: counts are reported in millions truncated to two
// decimals (110592 -> 0.11)
inline std::string params_m_string(std::size_t count) {
  const auto hundredths = static_cast<std::size_t>(count / 10000);
  std::ostringstream os;
  os << hundredths / 100 << "." << std::setw(2) << std::setfill('0') << hundredths % 100;
  return os.str();
}

namespace cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNonMergeable = 3;

template <ScalarType T>
std::vector<Tensor<T>> make_probes(const BackboneGraph<T>& model, const ModelMeta& meta,
                                   std::size_t count, std::uint64_t seed) {
  detail::require(!model.embed.has_value(),
                  "probe generation for patch-embed models is not supported");
  detail::require(!model.blocks.empty(), "probe generation: model has no blocks");
  Rng rng(seed);
  std::vector<Tensor<T>> probes;
  probes.reserve(count);
  if (std::holds_alternative<ViTBlock<T>>(model.blocks.front())) {
    const std::size_t width = std::get<ViTBlock<T>>(model.blocks.front()).attn.q.in_dim();
    for (std::size_t i = 0; i < count; ++i)
      probes.push_back(Tensor<T>::randn(rng, {meta.tokens, width}));
  } else {
    const std::size_t cin = std::get<ConvBlock<T>>(model.blocks.front()).conv.in_channels();
    for (std::size_t i = 0; i < count; ++i)
      probes.push_back(Tensor<T>::randn(rng, {cin, meta.image, meta.image}));
  }
  return probes;
}

inline nlohmann::json report_json(const MergeReport& r) {
  nlohmann::json sites = nlohmann::json::array();
  for (const auto& s : r.sites)
    sites.push_back({{"block", s.block},
                     {"site", s.site},
                     {"target", s.target},
                     {"target_shape", s.target_shape},
                     {"approximate", s.approximate}});
  return {{"sites", sites},
          {"probes", r.probes},
          {"max_abs_err", r.max_abs_err},
          {"max_rel_err", r.max_rel_err},
          {"params_removed", r.params_removed},
          {"structural_ops_before", r.depth_before},
          {"structural_ops_after", r.depth_after},
          {"approximate", r.approximate}};
}

struct TrainArgs {
  std::string config;
  std::string out;
  std::string metrics;  // defaults to out + ".metrics.jsonl"
};

template <ScalarType T>
void run_train(const Config& cfg, const ModelConfig& mc, const AdapterConfig& ac,
               const TrainArgs& args, std::ostream& out) {
  auto tc = task_config_from(cfg, mc);
  auto tr = train_config_from(cfg);
  auto model = build_backbone<T>(mc, tr.seed * 1000 + 1);
  if (ac.variant != AdapterVariant::none)
    model = attach_adapters(model, ac, tr.seed * 1000 + 2);
  auto task = SyntheticTask<T>::make(tc);
  const auto frozen_before = backbone_checksum(model);
  auto log = train_adapters(model, task, tr);
  detail::require(backbone_checksum(model) == frozen_before || tr.mode == TrainMode::full,
                  "train: frozen backbone changed");

  ModelMeta meta;
  meta.kind = mc.kind;
  meta.heads = mc.heads;
  meta.pooling = model.pooling;
  meta.tokens = mc.tokens;
  meta.image = mc.image;
  meta.classes = mc.classes;
  meta.ln_eps = 1e-6;
  meta.conv_stride = 1;
  meta.conv_padding = mc.conv_padding;
  meta.adapter = ac;
  save_model(args.out, model, meta);
  const std::string metrics_path =
      args.metrics.empty() ? args.out + ".metrics.jsonl" : args.metrics;
  write_metrics(metrics_path, log);

  auto store = ParamStore<T>::attach(model, tr.mode);
  out << "trained " << train_mode_name(tr.mode) << " for "
      << (log.empty() ? 0 : log.back().epoch) << " epochs\n";
  if (!log.empty())
    out << "final loss " << log.back().loss << ", train acc " << log.back().train_acc
        << ", val acc " << log.back().val_acc << "\n";
  out << "trainable params: " << store.trainable_scalars() << " / " << store.total_scalars()
      << "\n";
  out << "checkpoint: " << args.out << "\n";
  out << "metrics: " << metrics_path << "\n";
}

inline int cmd_train(const TrainArgs& args, std::ostream& out, std::ostream& err) {
  try {
    auto cfg = Config::parse_file(args.config);
    auto mc = model_config_from(cfg);
    auto ac = adapter_config_from(cfg, mc);
    if (dtype_from(cfg) == Dtype::f32)
      run_train<float>(cfg, mc, ac, args, out);
    else
      run_train<double>(cfg, mc, ac, args, out);
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

struct MergeArgs {
  std::string in;
  std::string out;
  std::string report;
  bool allow_approximate = false;
};

inline int cmd_merge(const MergeArgs& args, std::ostream& out, std::ostream& err) {
  try {
    auto any = load_model(args.in);
    auto run = [&](auto& loaded) {
      using T = typename std::remove_reference_t<decltype(loaded)>::value_type;
      auto probes = make_probes<T>(loaded.model, loaded.meta, 16, 42);
      auto [merged, report] =
          merge_model(loaded.model, probes, MergeOptions{args.allow_approximate});
      ModelMeta meta = loaded.meta;
      meta.adapter.variant = AdapterVariant::none;
      save_model(args.out, merged, meta);
      out << report.to_text();
      if (!args.report.empty()) {
        std::ofstream rf(args.report, std::ios::trunc);
        detail::require(rf.good(), "cannot open report file '" + args.report + "'");
        rf << report.to_text();
        std::ofstream jf(args.report + ".json", std::ios::trunc);
        jf << report_json(report).dump(2) << "\n";
      }
      out << "merged checkpoint: " << args.out << "\n";
    };
    std::visit(run, any);
    return kExitOk;
  } catch (const MergeError& e) {
    err << "error: " << e.what() << "\n";
    return kExitNonMergeable;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

struct VerifyArgs {
  std::string a;
  std::string b;
  std::size_t probes = 100;
  std::uint64_t seed = 42;
  double tol = 1e-12;
};

inline int cmd_verify(const VerifyArgs& args, std::ostream& out, std::ostream& err) {
  try {
    auto any_a = load_model(args.a);
    auto any_b = load_model(args.b);
    if (model_dtype(any_a) != model_dtype(any_b))
      throw std::runtime_error("models have different dtypes");
    double max_abs = 0, magnitude = 0;
    auto run = [&](auto& la) {
      using T = typename std::remove_reference_t<decltype(la)>::value_type;
      auto& lb = std::get<LoadedModel<T>>(any_b);
      auto probes = make_probes<T>(la.model, la.meta, args.probes, args.seed);
      for (const auto& p : probes) {
        auto ya = model_forward(la.model, p);
        auto yb = model_forward(lb.model, p);
        detail::require(ya.same_shape(yb), "output shape mismatch between models");
        max_abs = std::max(max_abs, static_cast<double>(max_abs_diff(ya, yb)));
        for (std::size_t i = 0; i < ya.numel(); ++i)
          magnitude = std::max({magnitude, std::abs(static_cast<double>(ya[i])),
                                std::abs(static_cast<double>(yb[i]))});
      }
    };
    std::visit(run, any_a);
    const double max_rel = max_abs / std::max(magnitude, 1e-30);
    out << "probes: " << args.probes << " (seed " << args.seed << ")\n";
    out << "max abs err: " << max_abs << "\n";
    out << "max rel err: " << max_rel << "\n";
    out << "tolerance (abs): " << args.tol << "\n";
    if (max_abs <= args.tol) {
      out << "verify: PASS\n";
      return kExitOk;
    }
    out << "verify: FAIL\n";
    return kExitFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

struct BenchArgs {
  std::string in;
  std::vector<std::size_t> batches = {1, 4, 16};
  std::size_t reps = 50;
  std::size_t threads = 1;
  std::uint64_t seed = 42;
};

template <ScalarType T>
void run_bench(const LoadedModel<T>& loaded, const BenchArgs& args, std::ostream& out) {
  std::vector<std::pair<std::string, BackboneGraph<T>>> variants;
  auto plain = strip_adapters(loaded.model);
  variants.emplace_back("plain", plain);
  if (adapter_count(loaded.model) > 0) {
    variants.emplace_back("adapter", loaded.model);
    try {
      auto probes = make_probes<T>(loaded.model, loaded.meta, 4, args.seed);
      variants.emplace_back("merged", merge_model(loaded.model, probes).first);
    } catch (const MergeError& e) {
      out << "note: merged variant skipped (" << e.what() << ")\n";
    }
  }
  out << "threads: " << args.threads << ", reps: " << args.reps << "\n";
  out << std::left << std::setw(10) << "variant" << std::right << std::setw(7) << "batch"
      << std::setw(12) << "median_ms" << std::setw(12) << "p10_ms" << std::setw(12)
      << "p90_ms" << std::setw(14) << "items_per_s" << std::setw(8) << "ops" << "\n";
  for (const auto& [name, model] : variants) {
    for (std::size_t batch : args.batches) {
      auto inputs = make_probes<T>(model, loaded.meta, batch, args.seed + batch);
      auto r = bench_forward(model, inputs, args.reps, name, args.threads);
      out << std::left << std::setw(10) << r.variant << std::right << std::setw(7) << r.batch
          << std::setw(12) << std::fixed << std::setprecision(4) << r.median_ms
          << std::setw(12) << r.p10_ms << std::setw(12) << r.p90_ms << std::setw(14)
          << std::setprecision(1) << r.throughput << std::setw(8) << r.op_count << "\n";
    }
  }
}

inline int cmd_bench(const BenchArgs& args, std::ostream& out, std::ostream& err) {
  try {
    auto any = load_model(args.in);
    std::visit([&](auto& loaded) { run_bench(loaded, args, out); }, any);
    return kExitOk;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

struct CountParamsArgs {
  std::string config;
  bool with_head = false;
};

inline int cmd_count_params(const CountParamsArgs& args, std::ostream& out,
                            std::ostream& err) {
  try {
    auto cfg = Config::parse_file(args.config);
    auto mc = model_config_from(cfg);
    auto ac = adapter_config_from(cfg, mc);
    std::size_t n = count_adapter_params(ac, mc);
    out << "adapter params: " << n << " (" << params_m_string(n) << "M)\n";
    out << "  variant=" << variant_name(ac.variant) << " c=" << ac.c << " k=" << ac.k
        << " bias=" << (ac.bias ? "true" : "false") << " sites=";
    for (std::size_t i = 0; i < ac.sites.size(); ++i)
      out << (i ? "," : "") << site_name(ac.sites[i]);
    out << " layers=" << mc.depth << " width=" << mc.width << "\n";
    if (args.with_head) {
      const std::size_t head = mc.width * mc.classes + mc.classes;
      out << "with head: " << n + head << " (" << params_m_string(n + head) << "M)\n";
    }
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

struct AblateRow {
  std::string setting;
  std::size_t params = 0;
  std::string params_m;
  double val_acc = 0;
};

inline std::vector<AblateRow> run_ablation(const Config& cfg, std::ostream* progress) {
  auto mc = model_config_from(cfg);
  auto base = adapter_config_from(cfg, mc);
  auto tc = task_config_from(cfg, mc);
  auto tr = train_config_from(cfg);
  const std::string axis = cfg.get_str("ablate", "axis", "groups");

  ModelConfig count_geom;  // geometry the published tables use
  count_geom.kind = "vit";
  count_geom.width = cfg.get_size("ablate", "count_width", 768);
  count_geom.depth = cfg.get_size("ablate", "count_depth", 12);

  struct Setting {
    std::string label;
    AdapterConfig ac;
  };
  std::vector<Setting> settings;
  auto values = split_csv(cfg.get_str("ablate", "values", ""));
  if (axis == "groups") {
    if (values.empty()) values = {"1", "2", "4", "8"};
    for (const auto& v : values) {
      AdapterConfig ac = base;
      ac.k = static_cast<std::size_t>(std::stoull(v));
      settings.push_back({"k=" + v, ac});
    }
  } else if (axis == "dims") {
    if (values.empty()) values = {"4", "8", "12", "16"};
    for (const auto& v : values) {
      AdapterConfig ac = base;
      ac.c = static_cast<std::size_t>(std::stoull(v));
      settings.push_back({"c=" + v, ac});
    }
  } else if (axis == "position") {
    if (values.empty()) values = {"pre_attn", "post_attn", "pre_ffn", "post_ffn"};
    for (const auto& v : values) {
      auto site = site_from_name(v);
      if (!site) throw ConfigError("config field ablate.values: unknown site '" + v + "'");
      AdapterConfig ac = base;
      ac.sites = {*site};
      settings.push_back({v, ac});
    }
  } else if (axis == "variant") {
    if (values.empty()) values = {"default", "with_act", "parallel", "full_sparse"};
    for (const auto& v : values) {
      AdapterConfig ac = base;
      if (v == "default") {
      } else if (v == "with_act") {
        ac.act = Activation::gelu;
      } else if (v == "parallel") {
        ac.variant = AdapterVariant::parallel;
        ac.act = Activation::gelu;
        ac.sites = {Site::parallel_ffn};
      } else if (v == "full_sparse") {
        ac.full_sparse = true;
      } else {
        throw ConfigError("config field ablate.values: unknown variant '" + v + "'");
      }
      settings.push_back({v, ac});
    }
  } else {
    throw ConfigError("config field ablate.axis: unknown sweep axis '" + axis + "'");
  }

  std::vector<AblateRow> rows;
  for (const auto& s : settings) {
    AblateRow row;
    row.setting = s.label;
    row.params = count_adapter_params(s.ac, count_geom);
    row.params_m = params_m_string(row.params);
    // accuracy on the synthetic stand-in task, reported but never asserted
    auto model = build_backbone<double>(mc, tr.seed * 1000 + 1);
    s.ac.validate(mc.kind == "vit" ? mc.width : mc.width);
    auto adapted = attach_adapters(model, s.ac, tr.seed * 1000 + 2);
    auto task = SyntheticTask<double>::make(tc);
    if (tr.epochs > 0) {
      auto log = train_adapters(adapted, task, tr);
      row.val_acc = log.back().val_acc;
    } else {
      row.val_acc = accuracy(adapted, task.val);
    }
    rows.push_back(row);
    if (progress)
      (*progress) << row.setting << "  params=" << row.params << " (" << row.params_m
                  << "M)  val_acc=" << row.val_acc << "\n";
  }
  return rows;
}

struct AblateArgs {
  std::string config;
  std::string out;  // optional table file
};

inline int cmd_ablate(const AblateArgs& args, std::ostream& out, std::ostream& err) {
  try {
    auto cfg = Config::parse_file(args.config);
    auto rows = run_ablation(cfg, nullptr);
    std::ostringstream table;
    table << std::left << std::setw(14) << "setting" << std::right << std::setw(12) << "params"
          << std::setw(12) << "params(M)" << std::setw(10) << "val_acc" << "\n";
    for (const auto& r : rows)
      table << std::left << std::setw(14) << r.setting << std::right << std::setw(12)
            << r.params << std::setw(12) << r.params_m << std::setw(10) << std::fixed
            << std::setprecision(3) << r.val_acc << "\n";
    out << table.str();
    if (!args.out.empty()) {
      std::ofstream f(args.out, std::ios::trunc);
      detail::require(f.good(), "cannot open '" + args.out + "'");
      f << table.str();
    }
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace cli
}  // namespace repa
