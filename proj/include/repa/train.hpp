#pragma once

#include <cstdint>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "repa/grad.hpp"
#include "repa/model.hpp"
#include "repa/tensor.hpp"

namespace repa {

enum class TrainMode : std::uint8_t { head_only = 0, petl = 1, full = 2 };

inline const char* train_mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::head_only: return "head_only";
    case TrainMode::petl: return "petl";
    case TrainMode::full: return "full";
  }
  return "?";
}

// PETL freezes the backbone and trains adapters plus the linear head. Full
// tuning unfreezes everything except the patch embedding.
inline bool trainable_in(ParamClass cls, TrainMode mode, const std::string& name) {
  switch (mode) {
    case TrainMode::head_only: return cls == ParamClass::head;
    case TrainMode::petl: return cls == ParamClass::adapter || cls == ParamClass::head;
    case TrainMode::full: return name.rfind("embed.", 0) != 0;
  }
  return false;
}

template <ScalarType T>
struct ParamEntry {
  std::string name;
  Tensor<T>* value = nullptr;
  bool trainable = false;
  ParamClass cls = ParamClass::backbone;
};

// Named view over a model's parameters. Gradient slots exist for trainable
// entries only, and the single-writer training loop is the only thing that
// mutates values through it.
template <ScalarType T>
struct ParamStore {
  std::vector<ParamEntry<T>> entries;
  GradSink<T> grads;

  static ParamStore attach(BackboneGraph<T>& model, TrainMode mode) {
    ParamStore store;
    visit_params(model, [&](const std::string& name, Tensor<T>& t, ParamClass cls) {
      const bool train = trainable_in(cls, mode, name);
      store.entries.push_back({name, &t, train, cls});
      if (train) store.grads.slots.emplace(name, Tensor<T>(t.shape()));
    });
    return store;
  }

  std::size_t trainable_scalars() const {
    std::size_t n = 0;
    for (const auto& e : entries)
      if (e.trainable) n += e.value->numel();
    return n;
  }

  std::size_t total_scalars() const {
    std::size_t n = 0;
    for (const auto& e : entries) n += e.value->numel();
    return n;
  }
};

// Adam with bias correction; no weight decay. Per-parameter state is keyed by
// name, and updates are elementwise, so results do not depend on iteration
// order.
template <ScalarType T>
struct AdamOptimizer {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void step(ParamStore<T>& store) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
    for (auto& e : store.entries) {
      if (!e.trainable) continue;
      const auto& g = store.grads.slots.at(e.name);
      auto& m = state(m_, e.name, g);
      auto& v = state(v_, e.name, g);
      for (std::size_t i = 0; i < g.numel(); ++i) {
        const double gi = static_cast<double>(g[i]);
        m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
        const double update = lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
        (*e.value)[i] -= static_cast<T>(update);
      }
    }
  }

 private:
  std::vector<double>& state(std::unordered_map<std::string, std::vector<double>>& s,
                             const std::string& name, const Tensor<T>& g) {
    auto it = s.find(name);
    if (it == s.end()) it = s.emplace(name, std::vector<double>(g.numel(), 0.0)).first;
    return it->second;
  }

  std::unordered_map<std::string, std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

// ---- synthetic data ---------------------------------------------------------------

// Mixture of rotated Gaussians. "xor" places four clusters in a random 2-D
// subspace with XOR labels: not linearly separable in raw space, separable by
// a two-layer map. "blobs" is the linearly separable control.
struct TaskConfig {
  std::string kind = "xor";     // xor | blobs
  std::string input = "tokens"; // tokens | image
  std::size_t classes = 2;
  std::size_t width = 64;       // feature dim (token width / image channels)
  std::size_t tokens = 4;
  std::size_t image = 6;        // H = W for image input
  std::size_t train_size = 512;
  std::size_t val_size = 256;
  double separation = 2.0;
  double cluster_std = 0.3;
  double token_noise = 0.1;
  std::uint64_t seed = 1;
};

template <ScalarType T>
struct Dataset {
  std::vector<Tensor<T>> inputs;
  std::vector<std::size_t> labels;
  std::size_t size() const { return inputs.size(); }
};

namespace detail {

inline std::vector<std::vector<double>> orthonormal_directions(Rng& rng, std::size_t count,
                                                               std::size_t d) {
  std::vector<std::vector<double>> dirs;
  for (std::size_t k = 0; k < count; ++k) {
    std::vector<double> v(d);
    for (double& x : v) x = rng.normal();
    for (const auto& u : dirs) {
      double dot = 0;
      for (std::size_t i = 0; i < d; ++i) dot += v[i] * u[i];
      for (std::size_t i = 0; i < d; ++i) v[i] -= dot * u[i];
    }
    double norm = 0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    for (double& x : v) x /= norm;
    dirs.push_back(std::move(v));
  }
  return dirs;
}

}  // namespace detail

template <ScalarType T>
struct SyntheticTask {
  TaskConfig cfg;
  Dataset<T> train, val;

  static SyntheticTask make(const TaskConfig& cfg) {
    detail::require(cfg.width >= 2, "task: width must be at least 2");
    detail::require(cfg.classes >= 2, "task: need at least two classes");
    if (cfg.kind == "xor")
      detail::require(cfg.classes == 2, "task: xor task is binary");
    else
      detail::require(cfg.kind == "blobs", "task: unknown kind '" + cfg.kind + "'");

    SyntheticTask task;
    task.cfg = cfg;
    Rng rng(cfg.seed);

    std::vector<std::vector<double>> centers;  // per cluster
    std::vector<std::size_t> cluster_label;
    if (cfg.kind == "xor") {
      auto basis = detail::orthonormal_directions(rng, 2, cfg.width);
      for (int s1 : {+1, -1}) {
        for (int s2 : {+1, -1}) {
          std::vector<double> c(cfg.width);
          for (std::size_t i = 0; i < cfg.width; ++i)
            c[i] = cfg.separation * (s1 * basis[0][i] + s2 * basis[1][i]);
          centers.push_back(std::move(c));
          cluster_label.push_back(s1 == s2 ? 0 : 1);
        }
      }
    } else {
      auto basis = detail::orthonormal_directions(rng, cfg.classes, cfg.width);
      for (std::size_t k = 0; k < cfg.classes; ++k) {
        std::vector<double> c(cfg.width);
        for (std::size_t i = 0; i < cfg.width; ++i) c[i] = 2.0 * cfg.separation * basis[k][i];
        centers.push_back(std::move(c));
        cluster_label.push_back(k);
      }
    }

    auto sample_into = [&](Dataset<T>& ds, std::size_t count) {
      for (std::size_t s = 0; s < count; ++s) {
        const std::size_t cl = static_cast<std::size_t>(rng.index(centers.size()));
        std::vector<double> z(cfg.width);
        for (std::size_t i = 0; i < cfg.width; ++i)
          z[i] = centers[cl][i] + cfg.cluster_std * rng.normal();
        if (cfg.input == "tokens") {
          Tensor<T> x({cfg.tokens, cfg.width});
          for (std::size_t t = 0; t < cfg.tokens; ++t)
            for (std::size_t i = 0; i < cfg.width; ++i)
              x(t, i) = static_cast<T>(z[i] + cfg.token_noise * rng.normal());
          ds.inputs.push_back(std::move(x));
        } else {
          Tensor<T> x({cfg.width, cfg.image, cfg.image});
          for (std::size_t i = 0; i < cfg.width; ++i)
            for (std::size_t p = 0; p < cfg.image * cfg.image; ++p)
              x[i * cfg.image * cfg.image + p] =
                  static_cast<T>(z[i] + cfg.token_noise * rng.normal());
          ds.inputs.push_back(std::move(x));
        }
        ds.labels.push_back(cluster_label[cl]);
      }
    };
    sample_into(task.train, cfg.train_size);
    sample_into(task.val, cfg.val_size);
    return task;
  }
};

// ---- training loop ------------------------------------------------------------------

struct TrainConfig {
  TrainMode mode = TrainMode::petl;
  std::size_t epochs = 10;
  std::size_t batch = 32;
  double lr = 1e-3;
  std::uint64_t seed = 7;  // batch shuffling
};

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0.0;
  double train_acc = 0.0;
  double val_acc = 0.0;
};

template <ScalarType T>
double accuracy(const BackboneGraph<T>& model, const Dataset<T>& ds) {
  if (ds.size() == 0) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto logits = model_forward(model, ds.inputs[i]);
    std::size_t best = 0;
    for (std::size_t j = 1; j < logits.cols(); ++j)
      if (logits(0, j) > logits(0, best)) best = j;
    if (best == ds.labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(ds.size());
}

// FNV-1a over the raw bytes of every frozen (backbone-class) tensor; training
// must leave this untouched.
template <ScalarType T>
std::uint64_t backbone_checksum(const BackboneGraph<T>& model) {
  std::uint64_t h = 1469598103934665603ull;
  visit_params(model, [&](const std::string&, const Tensor<T>& t, ParamClass cls) {
    if (cls != ParamClass::backbone) return;
    const auto* bytes = reinterpret_cast<const unsigned char*>(t.data().data());
    for (std::size_t i = 0; i < t.numel() * sizeof(T); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ull;
    }
  });
  return h;
}

// Trains in place and reports one record per epoch. Deterministic given
// (model, task, config).
template <ScalarType T>
std::vector<EpochRecord> train_adapters(BackboneGraph<T>& model, const SyntheticTask<T>& task,
                                        const TrainConfig& cfg) {
  auto store = ParamStore<T>::attach(model, cfg.mode);
  detail::require(store.grads.slots.size() > 0, "train: no trainable parameters");
  AdamOptimizer<T> opt;
  opt.lr = cfg.lr;
  Rng shuffle_rng(cfg.seed);

  std::vector<EpochRecord> log;
  const std::size_t n = task.train.size();
  const std::size_t steps_per_epoch = n / cfg.batch;
  detail::require(cfg.batch >= 1 && (steps_per_epoch > 0 || cfg.epochs == 0),
                  "train: batch larger than training set");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    // Fisher-Yates with the library Rng
    for (std::size_t i = n; i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(shuffle_rng.index(i));
      std::swap(order[i - 1], order[j]);
    }
    double epoch_loss = 0.0;
    for (std::size_t step = 0; step < steps_per_epoch; ++step) {
      store.grads.zero();
      double batch_loss = 0.0;
      const T w = T{1} / static_cast<T>(cfg.batch);
      for (std::size_t bi = 0; bi < cfg.batch; ++bi) {
        const std::size_t idx = order[step * cfg.batch + bi];
        ModelCache<T> cache;
        auto logits = model_forward_cached(model, task.train.inputs[idx], cache);
        auto lg = softmax_xent(logits, task.train.labels[idx], w);
        batch_loss += static_cast<double>(lg.loss);
        model_backward(model, cache, lg.dlogits, store.grads);
      }
      opt.step(store);
      epoch_loss += batch_loss;
    }
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.loss = steps_per_epoch ? epoch_loss / static_cast<double>(steps_per_epoch) : 0.0;
    rec.train_acc = accuracy(model, task.train);
    rec.val_acc = accuracy(model, task.val);
    log.push_back(rec);
  }
  return log;
}

// newline-delimited records, one JSON object per epoch
inline void write_metrics(const std::string& path, const std::vector<EpochRecord>& log) {
  std::ofstream out(path, std::ios::trunc);
  detail::require(out.good(), "metrics: cannot open '" + path + "'");
  out << std::setprecision(17);
  for (const auto& r : log)
    out << "{\"epoch\":" << r.epoch << ",\"loss\":" << r.loss
        << ",\"train_acc\":" << r.train_acc << ",\"val_acc\":" << r.val_acc << "}\n";
}

}  // namespace repa
