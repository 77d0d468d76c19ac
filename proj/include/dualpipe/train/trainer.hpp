// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdlib>
#include <filesystem>
#include <functional>
#include <optional>
#include <sstream>
#include <thread>

#include "dualpipe/core/optim.hpp"
#include "dualpipe/data/synth.hpp"
#include "dualpipe/model/dual.hpp"

namespace dualpipe {

struct TrainConfig {
  std::uint64_t steps = 1000;  // 0 leaves the initialization untouched
  std::size_t batch_size = 16;
  double peak_lr = 5e-4;
  std::uint64_t seed = 1;
  std::uint64_t checkpoint_every = 0;
  double grad_clip = 1.0;
  std::size_t threads = 0;  // 0: DUALPIPE_THREADS or hardware concurrency

  void validate() const {
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(peak_lr > 0)) throw ConfigError("peak_lr must be positive");
    if (!(grad_clip > 0)) throw ConfigError("grad_clip must be positive");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, steps, batch_size, peak_lr, seed, checkpoint_every,
                                                grad_clip, threads)

struct LossLogRow {
  std::uint64_t step = 0;
  double lr = 0;
  double loss = 0;
  double grad_norm = 0;
  bool clipped = false;
};

struct TrainResult {
  std::vector<LossLogRow> log;
  std::size_t clipped_steps = 0;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::size_t resolve_threads(std::size_t requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("DUALPIPE_THREADS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n > 0) return static_cast<std::size_t>(n);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

inline std::string loss_log_csv(const TrainResult& r) {
  std::ostringstream os;
  os.precision(9);
  os << "step,lr,loss,grad_norm,clipped\n";
  for (const auto& row : r.log)
    os << row.step << ',' << row.lr << ',' << row.loss << ',' << row.grad_norm << ',' << (row.clipped ? 1 : 0) << '\n';
  return os.str();
}

/// Per-example loss: builds the graph for example `index` and returns the
/// summed token loss and token count.
template <typename T>
using ExampleLoss = std::function<std::pair<Var, std::size_t>(Graph<T>&, std::size_t index, Rng& rng)>;

struct TrainHooks {
  std::function<void(std::uint64_t step)> checkpoint;
  std::optional<std::filesystem::path> dump_dir;
  std::function<void(const LossLogRow&)> progress;
};

/// Adam + tri-stage schedule over shuffled minibatches. Per-example gradients
/// are reduced in batch order, so results do not depend on thread count.
template <typename T>
TrainResult run_training(ParamStore<T>& params, std::size_t n_examples, const TrainConfig& cfg,
                         const ExampleLoss<T>& loss, const TrainHooks& hooks = {}) {
  cfg.validate();
  if (n_examples == 0) throw ConfigError("training set is empty");
  const TriStageSchedule sched{cfg.peak_lr, cfg.steps};
  AdamOptimizer<T> opt(params);
  const Rng root(cfg.seed);
  const std::size_t threads = std::min(resolve_threads(cfg.threads), cfg.batch_size);

  std::vector<std::size_t> order(n_examples);
  std::size_t cursor = n_examples, epoch = 0;
  auto next_index = [&] {
    if (cursor == n_examples) {
      for (std::size_t i = 0; i < n_examples; ++i) order[i] = i;
      root.derive(0xE90C0000 + epoch++).shuffle(order);
      cursor = 0;
    }
    return order[cursor++];
  };

  auto dump_and_throw = [&](std::uint64_t step, const std::string& why) {
    if (hooks.dump_dir) {
      nlohmann::json meta{{"kind", "dump"}, {"step", step}, {"reason", why}};
      if constexpr (std::is_same_v<T, float>) save_checkpoint(*hooks.dump_dir, params, meta);
      else save_checkpoint(*hooks.dump_dir, params.template cast<float>(), meta);
    }
    throw TrainingDiverged("training diverged at step " + std::to_string(step) + ": " + why);
  };

  TrainResult result;
  for (std::uint64_t step = 1; step <= cfg.steps; ++step) {
    std::vector<std::size_t> batch(cfg.batch_size);
    for (auto& b : batch) b = next_index();
    std::vector<GradBuffer<T>> grads(batch.size());
    std::vector<double> sums(batch.size(), 0.0);
    std::vector<std::size_t> counts(batch.size(), 0);
    std::vector<std::string> errors(batch.size());

    auto work = [&](std::size_t tid) {
      for (std::size_t k = tid; k < batch.size(); k += threads) {
        try {
          Rng rng = root.derive(step).derive(k);
          Graph<T> g(true);
          auto [l, n] = loss(g, batch[k], rng);
          sums[k] = static_cast<double>(g.value(l)[0]);
          counts[k] = n;
          g.backward(l);
          grads[k] = GradBuffer<T>(params);
          g.collect_param_grads(grads[k]);
        } catch (const NonFiniteError& e) {
          errors[k] = e.what();
        }
      }
    };
    if (threads <= 1) {
      work(0);
    } else {
      std::vector<std::thread> pool;
      for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work, t);
      for (auto& th : pool) th.join();
    }
    for (const auto& e : errors)
      if (!e.empty()) dump_and_throw(step, e);

    double total = 0;
    std::size_t tokens = 0;
    GradBuffer<T> sum(params);
    for (std::size_t k = 0; k < batch.size(); ++k) {
      total += sums[k];
      tokens += counts[k];
      sum.add(grads[k]);
    }
    const double mean = total / static_cast<double>(std::max<std::size_t>(tokens, 1));
    if (!std::isfinite(mean)) dump_and_throw(step, "non-finite loss");
    sum.scale(static_cast<T>(1.0 / static_cast<double>(std::max<std::size_t>(tokens, 1))));
    const double norm = clip_grad_norm(sum, cfg.grad_clip);
    if (!std::isfinite(norm)) dump_and_throw(step, "non-finite gradient norm");
    const double lr = lr_at(sched, step);
    try {
      opt.step(params, sum, static_cast<T>(lr));
    } catch (const NonFiniteError& e) {
      dump_and_throw(step, e.what());
    }
    LossLogRow row{step, lr, mean, norm, norm > cfg.grad_clip};
    result.clipped_steps += row.clipped ? 1 : 0;
    result.log.push_back(row);
    if (hooks.progress) hooks.progress(row);
    if (hooks.checkpoint && cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step != cfg.steps)
      hooks.checkpoint(step);
  }
  return result;
}

/// [language tag, text tokens..., eot]
inline std::vector<TokenId> make_target(const BpeVocab& vocab, const Utterance& u) {
  if (!vocab.has_language(u.lang)) throw ConfigError("language '" + u.lang + "' has no tag in this vocabulary");
  std::vector<TokenId> t{vocab.language_tag(u.lang)};
  const auto text = vocab.encode(u.text);
  t.insert(t.end(), text.begin(), text.end());
  t.push_back(vocab.eot());
  return t;
}

/// Trains the encoder and primary decoder from scratch, then freezes them.
inline BaseModel<float> train_base(const ModelConfig& cfg, const BpeVocab& vocab, const std::vector<Utterance>& train,
                                   const TrainConfig& tc, TrainResult* log = nullptr, const TrainHooks& hooks = {}) {
  BaseModel<float> model(cfg, vocab, Rng(tc.seed).derive(0xBA5E).next_u64());
  std::vector<std::vector<TokenId>> targets;
  for (const auto& u : train) {
    model.check_frames(u.features);
    targets.push_back(make_target(vocab, u));
  }
  TrainResult r;
  if (!train.empty()) {
    auto loss = [&](Graph<float>& g, std::size_t i, Rng& rng) {
      return model.teacher_forced_loss(g, train[i].features, targets[i], cfg.dropout > 0 ? &rng : nullptr);
    };
    r = run_training<float>(model.params(), train.size(), tc, loss, hooks);
  }
  model.freeze();
  if (log) *log = std::move(r);
  return model;
}

/// Trains the adapters, secondary layer norm and LAS decoder on pooled
/// new-language data. The base model is only read.
inline DualPipelineModel<float> extend(std::shared_ptr<const BaseModel<float>> base, const ExtensionConfig& ext,
                                       const BpeVocab& secondary_vocab, const std::vector<Utterance>& train,
                                       const TrainConfig& tc, TrainResult* log = nullptr,
                                       const std::function<void(const DualPipelineModel<float>&, std::uint64_t)>&
                                           on_checkpoint = {},
                                       const TrainHooks& extra = {}) {
  if (!base->frozen()) throw ConfigError("extend: base model is not frozen");
  const std::string digest_before = base->digest();
  if (digest_before != base->frozen_digest()) throw DigestMismatch("extend: base weights differ from frozen digest");
  DualPipelineModel<float> model(base, ext, secondary_vocab, Rng(tc.seed).derive(0xE77).next_u64());
  std::vector<std::vector<TokenId>> targets;
  for (const auto& u : train) {
    base->check_frames(u.features);
    targets.push_back(make_target(secondary_vocab, u));
  }
  auto loss = [&](Graph<float>& g, std::size_t i, Rng&) {
    return model.secondary_teacher_forced_loss(g, train[i].features, targets[i]);
  };
  TrainHooks hooks = extra;
  if (on_checkpoint) hooks.checkpoint = [&](std::uint64_t step) { on_checkpoint(model, step); };
  TrainResult r = run_training<float>(model.params(), train.size(), tc, loss, hooks);
  if (base->digest() != digest_before) throw DigestMismatch("extend: base weights changed during training");
  if (log) *log = std::move(r);
  return model;
}

}  // namespace dualpipe
