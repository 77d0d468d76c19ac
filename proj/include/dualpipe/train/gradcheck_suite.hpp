// SPDX-License-Identifier: Apache-2.0

// Finite-difference checks of the full training objectives at tiny sizes in
// double precision.

#pragma once

#include "dualpipe/core/gradcheck.hpp"
#include "dualpipe/train/trainer.hpp"

namespace dualpipe {

struct GradSuiteResult {
  std::string name;
  GradCheckReport report;
};

struct TinySetup {
  ModelConfig model;
  ExtensionConfig ext;
  std::vector<Utterance> existing, added;
  BpeVocab primary_vocab, secondary_vocab;
};

inline TinySetup tiny_setup(std::uint64_t seed, std::size_t start_layer = 1, std::size_t rank = 2) {
  TinySetup s;
  s.model.feat_dim = 6;
  s.model.d_model = 8;
  s.model.n_heads = 2;
  s.model.n_enc_layers = 3;
  s.model.n_dec_layers = 1;
  s.model.ffn_dim = 12;
  s.model.max_frames = 256;
  s.model.max_tokens = 32;
  s.ext.rank = rank;
  s.ext.alpha = 2.0;
  s.ext.start_layer = start_layer;
  s.ext.las_hidden = 6;
  s.ext.las_embed = 5;
  s.ext.attn_dim = 4;
  s.ext.attn_heads = 2;

  LanguageParams lp;
  lp.feat_dim = s.model.feat_dim;
  lp.inventory_size = 4;
  lp.n_words = 5;
  lp.word_len_min = 1;
  lp.word_len_max = 2;
  lp.dur_min = 1;
  lp.dur_max = 2;
  DatasetParams dp;
  dp.words_min = 1;
  dp.words_max = 2;
  auto make = [&](const std::string& code, std::size_t slot) {
    LanguageParams p = lp;
    p.code = code;
    p.slot = slot;
    return gen_dataset(gen_language(seed + slot, p), 6, seed, dp).train;
  };
  s.existing = make("ta", 0);
  s.added = make("tb", 1);
  auto vocab = [](const std::vector<Utterance>& utts, const std::string& lang) {
    std::vector<std::string> lines;
    for (const auto& u : utts) lines.push_back(u.text);
    return train_bpe(lines, BpeVocab::kByteTokens + BpeVocab::kCoreSpecials.size() + 1 + 3, {lang});
  };
  s.primary_vocab = vocab(s.existing, "ta");
  s.secondary_vocab = vocab(s.added, "tb");
  return s;
}

template <typename T>
void randomize(ParamStore<T>& store, Rng& rng, double sd) {
  for (std::size_t i = 0; i < store.size(); ++i)
    if (store[i].trainable)
      for (auto& v : store[i].value.vec()) v += static_cast<T>(rng.normal(0.0, sd));
}

/// Gradient of the secondary objective over every trainable extension tensor
/// (adapters, secondary layer norm, LAS decoder) with adapters made non-zero.
inline GradSuiteResult check_extension_gradients(std::uint64_t seed, std::size_t start_layer,
                                                 const GradCheckOptions& opt = {}) {
  const TinySetup s = tiny_setup(seed, start_layer);
  auto base = std::make_shared<BaseModel<double>>(s.model, s.primary_vocab, seed);
  base->freeze();
  DualPipelineModel<double> model(base, s.ext, s.secondary_vocab, seed + 1);
  Rng rng(seed + 2);
  randomize(model.params(), rng, 0.3);

  std::vector<std::vector<TokenId>> targets;
  std::vector<Tensor<double>> feats;
  for (std::size_t i = 0; i < 2 && i < s.added.size(); ++i) {
    targets.push_back(make_target(s.secondary_vocab, s.added[i]));
    feats.push_back(s.added[i].features.cast<double>());
  }
  auto build = [&](Graph<double>& g) {
    std::vector<Var> parts;
    std::size_t tokens = 0;
    for (std::size_t i = 0; i < feats.size(); ++i) {
      auto [l, n] = model.secondary_teacher_forced_loss(g, feats[i], targets[i]);
      parts.push_back(l);
      tokens += n;
    }
    return g.scale(g.sum_all(g.concat_rows(parts)), 1.0 / static_cast<double>(tokens));
  };
  auto loss = [&](const ParamStore<double>&) {
    Graph<double> g(false);
    return g.value(build(g))[0];
  };
  auto analytic = [&](const ParamStore<double>& p) {
    Graph<double> g(true);
    Var l = build(g);
    g.backward(l);
    GradBuffer<double> buf(p);
    g.collect_param_grads(buf);
    return buf;
  };
  const std::string before = base->digest();
  GradSuiteResult r{"extension loss (start layer " + std::to_string(start_layer) + ")",
                    grad_check(loss, analytic, model.params(), opt)};
  if (base->digest() != before) throw DigestMismatch("gradient check modified the frozen base");
  return r;
}

/// Gradient of the primary objective over every base-model tensor.
inline GradSuiteResult check_base_gradients(std::uint64_t seed, const GradCheckOptions& opt = {}) {
  const TinySetup s = tiny_setup(seed);
  BaseModel<double> model(s.model, s.primary_vocab, seed);
  Rng rng(seed + 3);
  randomize(model.params(), rng, 0.05);
  const auto target = make_target(s.primary_vocab, s.existing[0]);
  const Tensor<double> feats = s.existing[0].features.cast<double>();
  auto build = [&](Graph<double>& g) {
    auto [l, n] = model.teacher_forced_loss(g, feats, target);
    return g.scale(l, 1.0 / static_cast<double>(n));
  };
  auto loss = [&](const ParamStore<double>&) {
    Graph<double> g(false);
    return g.value(build(g))[0];
  };
  auto analytic = [&](const ParamStore<double>& p) {
    Graph<double> g(true);
    Var l = build(g);
    g.backward(l);
    GradBuffer<double> buf(p);
    g.collect_param_grads(buf);
    return buf;
  };
  return {"base loss", grad_check(loss, analytic, model.params(), opt)};
}

inline std::vector<GradSuiteResult> run_gradient_suite(std::uint64_t seed, const GradCheckOptions& opt = {}) {
  std::vector<GradSuiteResult> out;
  out.push_back(check_extension_gradients(seed, 0, opt));
  out.push_back(check_extension_gradients(seed, 1, opt));
  out.push_back(check_base_gradients(seed, opt));
  return out;
}

}  // namespace dualpipe
