// SPDX-License-Identifier: Apache-2.0

// The frozen multilingual model: a pre-norm Transformer encoder over feature
// frames and a Transformer decoder that first predicts a language tag and
// then the transcript. It is trained once on existing languages and frozen.

#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dualpipe/core/graph.hpp"
#include "dualpipe/core/rng.hpp"
#include "dualpipe/io/checkpoint.hpp"
#include "dualpipe/model/config.hpp"
#include "dualpipe/tokenizer/bpe.hpp"

namespace dualpipe {

/// Low-rank branch attached to one projection inside a graph. An invalid A
/// means "no adapter".
struct AdapterVars {
  Var A;
  Var B;
  double scale = 0.0;
};

/// Adapters for the six adapted matrices of one encoder layer.
struct LayerAdapterVars {
  AdapterVars q, k, v, o, w1, w2;
};

inline constexpr const char* kAdaptedMatrices[] = {"q", "k", "v", "o", "w1", "w2"};

/// Sinusoidal position table (rows = positions).
template <typename T>
Tensor<T> sinusoids(std::size_t length, std::size_t channels) {
  Tensor<T> t = Tensor<T>::matrix(length, channels);
  const std::size_t half = channels / 2;
  const double inc = half > 1 ? std::log(10000.0) / static_cast<double>(half - 1) : 0.0;
  for (std::size_t p = 0; p < length; ++p)
    for (std::size_t i = 0; i < half; ++i) {
      const double a = static_cast<double>(p) * std::exp(-inc * static_cast<double>(i));
      t.at(p, i) = static_cast<T>(std::sin(a));
      t.at(p, half + i) = static_cast<T>(std::cos(a));
    }
  return t;
}

template <typename T>
class BaseModel {
 public:
  /// Cached cross-attention keys/values per decoder layer for one utterance.
  struct CrossCache {
    std::vector<Tensor<T>> k, v;
  };
  /// Self-attention keys/values of the tokens consumed so far.
  struct DecoderState {
    std::vector<Tensor<T>> k, v;
    std::size_t pos = 0;
  };

  BaseModel(ModelConfig cfg, BpeVocab vocab, std::uint64_t seed) : cfg_(std::move(cfg)), vocab_(std::move(vocab)) {
    cfg_.primary_vocab = vocab_.size();
    cfg_.validate();
    init_params(seed);
  }

  const ModelConfig& config() const { return cfg_; }
  const BpeVocab& vocab() const { return vocab_; }
  ParamStore<T>& params() {
    if (frozen_) throw ConfigError("base model is frozen");
    return params_;
  }
  const ParamStore<T>& params() const { return params_; }

  /// Marks every weight frozen and records the digest.
  void freeze() {
    params_.set_trainable(false);
    frozen_ = true;
    frozen_digest_ = digest();
  }
  bool frozen() const { return frozen_; }
  const std::string& frozen_digest() const { return frozen_digest_; }
  std::string digest() const {
    if constexpr (std::is_same_v<T, float>) return params_digest(params_);
    else return params_digest(params_.template cast<float>());
  }

  template <typename U>
  BaseModel<U> cast() const {
    BaseModel<U> out(cfg_, vocab_, 0);
    out.params_ = params_.template cast<U>();
    out.frozen_ = frozen_;
    out.frozen_digest_ = frozen_digest_;
    return out;
  }

  // ---- encoder ----------------------------------------------------------------

  void check_frames(const Tensor<T>& features) const {
    if (features.rows() == 0) throw DimensionError("encoder input has zero frames");
    if (features.rows() > cfg_.max_frames)
      throw DimensionError("encoder input has " + std::to_string(features.rows()) + " frames, max is " +
                           std::to_string(cfg_.max_frames));
    if (features.cols() != cfg_.feat_dim)
      throw DimensionError("feature width " + std::to_string(features.cols()) + " != feat_dim " +
                           std::to_string(cfg_.feat_dim));
  }

  /// Input projection plus sinusoidal positions; the residual stream entering layer 0.
  Var encoder_input(Graph<T>& g, const Tensor<T>& features) const {
    check_frames(features);
    Var x = g.linear(g.ref(features), p("enc.in.w", g), p("enc.in.b", g));
    return g.add(x, g.constant(sinusoids<T>(features.rows(), cfg_.d_model)));
  }

  /// One pre-norm layer. With `adapters`, every MHA/FF projection gets its
  /// low-rank branch; the layer norms stay the frozen ones.
  Var encoder_layer(Graph<T>& g, std::size_t l, Var x, const LayerAdapterVars* adapters = nullptr,
                    Rng* dropout_rng = nullptr) const {
    const std::string pre = "enc." + std::to_string(l) + ".";
    Var h = g.layer_norm(x, p(pre + "ln1.g", g), p(pre + "ln1.b", g));
    Var q = proj(g, h, pre + "attn.q", adapters ? &adapters->q : nullptr);
    Var k = proj(g, h, pre + "attn.k", adapters ? &adapters->k : nullptr);
    Var v = proj(g, h, pre + "attn.v", adapters ? &adapters->v : nullptr);
    Var a = g.attention(q, k, v, cfg_.n_heads, false);
    Var o = proj(g, a, pre + "attn.o", adapters ? &adapters->o : nullptr);
    x = g.add(x, drop(g, o, dropout_rng));
    Var h2 = g.layer_norm(x, p(pre + "ln2.g", g), p(pre + "ln2.b", g));
    Var f = g.gelu(proj(g, h2, pre + "ff.w1", adapters ? &adapters->w1 : nullptr));
    f = proj(g, f, pre + "ff.w2", adapters ? &adapters->w2 : nullptr);
    return g.add(x, drop(g, f, dropout_rng));
  }

  Var encoder_final_ln(Graph<T>& g, Var x) const { return g.layer_norm(x, p("enc.ln_post.g", g), p("enc.ln_post.b", g)); }

  Var encode(Graph<T>& g, const Tensor<T>& features, Rng* dropout_rng = nullptr) const {
    Var x = encoder_input(g, features);
    for (std::size_t l = 0; l < cfg_.n_enc_layers; ++l) x = encoder_layer(g, l, x, nullptr, dropout_rng);
    return encoder_final_ln(g, x);
  }

  /// frames x d_model encoder output through frozen weights only.
  Tensor<T> encode_primary(const Tensor<T>& features) const {
    Graph<T> g(false);
    return g.value(encode(g, features));
  }

  // ---- decoder ----------------------------------------------------------------

  /// Teacher-forced logits (len x vocab) for the token sequence `ids`.
  Var decoder_logits(Graph<T>& g, Var enc_out, std::span<const TokenId> ids, Rng* dropout_rng = nullptr) const {
    check_ids(ids);
    Var x = g.embedding(p("dec.tok_emb", g), ids);
    x = g.add(x, g.slice_rows(p("dec.pos_emb", g), 0, ids.size()));
    for (std::size_t l = 0; l < cfg_.n_dec_layers; ++l) {
      const std::string pre = "dec." + std::to_string(l) + ".";
      Var h = g.layer_norm(x, p(pre + "ln1.g", g), p(pre + "ln1.b", g));
      Var a = g.attention(proj(g, h, pre + "self.q"), proj(g, h, pre + "self.k"), proj(g, h, pre + "self.v"),
                          cfg_.n_heads, true);
      x = g.add(x, drop(g, proj(g, a, pre + "self.o"), dropout_rng));
      Var h2 = g.layer_norm(x, p(pre + "ln2.g", g), p(pre + "ln2.b", g));
      Var c = g.attention(proj(g, h2, pre + "cross.q"), proj(g, enc_out, pre + "cross.k"),
                          proj(g, enc_out, pre + "cross.v"), cfg_.n_heads, false);
      x = g.add(x, drop(g, proj(g, c, pre + "cross.o"), dropout_rng));
      Var h3 = g.layer_norm(x, p(pre + "ln3.g", g), p(pre + "ln3.b", g));
      Var f = proj(g, g.gelu(proj(g, h3, pre + "ff.w1")), pre + "ff.w2");
      x = g.add(x, drop(g, f, dropout_rng));
    }
    x = g.layer_norm(x, p("dec.ln_post.g", g), p("dec.ln_post.b", g));
    return g.linear(x, p("dec.out.w", g), p("dec.out.b", g));
  }

  /// Logits (1 x vocab) for the next token after `prefix`.
  Tensor<T> primary_decoder_step(const Tensor<T>& enc_out, std::span<const TokenId> prefix) const {
    if (prefix.empty()) throw DimensionError("primary_decoder_step: empty prefix");
    Graph<T> g(false);
    const Tensor<T>& all = g.value(decoder_logits(g, g.ref(enc_out), prefix));
    Tensor<T> last = Tensor<T>::matrix(1, all.cols());
    std::copy_n(all.row_span(all.rows() - 1).data(), all.cols(), last.data());
    return last;
  }

  /// Summed cross-entropy of `target` = [tag, text..., eot] after the prompt,
  /// and the number of predicted tokens.
  std::pair<Var, std::size_t> teacher_forced_loss(Graph<T>& g, const Tensor<T>& features,
                                                  std::span<const TokenId> target, Rng* dropout_rng = nullptr) const {
    if (target.empty() || !vocab_.is_language_tag(target[0]))
      throw ConfigError("primary target must start with a registered language tag");
    std::vector<TokenId> ids = vocab_.prompt();
    const std::size_t n_prompt = ids.size();
    ids.insert(ids.end(), target.begin(), target.end() - 1);
    std::vector<std::int32_t> tgt(ids.size(), -1);
    for (std::size_t i = 0; i < target.size(); ++i) tgt[n_prompt - 1 + i] = target[i];
    Var enc = encode(g, features, dropout_rng);
    Var logits = decoder_logits(g, enc, ids, dropout_rng);
    return {g.cross_entropy_sum(logits, tgt), target.size()};
  }

  // ---- incremental decoding ------------------------------------------------------

  CrossCache cross_cache(const Tensor<T>& enc_out) const {
    Graph<T> g(false);
    Var e = g.ref(enc_out);
    CrossCache c;
    for (std::size_t l = 0; l < cfg_.n_dec_layers; ++l) {
      const std::string pre = "dec." + std::to_string(l) + ".";
      c.k.push_back(g.value(proj(g, e, pre + "cross.k")));
      c.v.push_back(g.value(proj(g, e, pre + "cross.v")));
    }
    return c;
  }

  DecoderState initial_state() const {
    DecoderState s;
    s.k.assign(cfg_.n_dec_layers, Tensor<T>::matrix(0, cfg_.d_model));
    s.v.assign(cfg_.n_dec_layers, Tensor<T>::matrix(0, cfg_.d_model));
    return s;
  }

  /// Consumes `token` at the next position and returns next-token logits.
  Tensor<T> decoder_step(const CrossCache& cross, DecoderState& state, TokenId token) const {
    const std::array<TokenId, 1> ids{token};
    check_ids(ids);
    if (state.pos >= cfg_.max_tokens) throw DimensionError("decoder ran past max_tokens");
    Graph<T> g(false);
    Var x = g.add(g.embedding(p("dec.tok_emb", g), ids), g.slice_rows(p("dec.pos_emb", g), state.pos, 1));
    for (std::size_t l = 0; l < cfg_.n_dec_layers; ++l) {
      const std::string pre = "dec." + std::to_string(l) + ".";
      Var h = g.layer_norm(x, p(pre + "ln1.g", g), p(pre + "ln1.b", g));
      append_row(state.k[l], g.value(proj(g, h, pre + "self.k")));
      append_row(state.v[l], g.value(proj(g, h, pre + "self.v")));
      Var a = g.attention(proj(g, h, pre + "self.q"), g.ref(state.k[l]), g.ref(state.v[l]), cfg_.n_heads, false);
      x = g.add(x, proj(g, a, pre + "self.o"));
      Var h2 = g.layer_norm(x, p(pre + "ln2.g", g), p(pre + "ln2.b", g));
      Var c = g.attention(proj(g, h2, pre + "cross.q"), g.ref(cross.k[l]), g.ref(cross.v[l]), cfg_.n_heads, false);
      x = g.add(x, proj(g, c, pre + "cross.o"));
      Var h3 = g.layer_norm(x, p(pre + "ln3.g", g), p(pre + "ln3.b", g));
      x = g.add(x, proj(g, g.gelu(proj(g, h3, pre + "ff.w1")), pre + "ff.w2"));
    }
    x = g.layer_norm(x, p("dec.ln_post.g", g), p("dec.ln_post.b", g));
    ++state.pos;
    return g.value(g.linear(x, p("dec.out.w", g), p("dec.out.b", g)));
  }

  // ---- persistence ---------------------------------------------------------------

  void save(const std::filesystem::path& dir) const {
    static_assert(std::is_same_v<T, float>, "checkpoints are stored in f32");
    nlohmann::json meta{{"kind", "base"}, {"config", cfg_}, {"frozen", frozen_}};
    save_checkpoint(dir, params_, meta);
    vocab_.save(dir / "vocab.json");
  }

  /// Loads a checkpoint; a frozen checkpoint comes back frozen with its
  /// recorded digest re-verified.
  static BaseModel load(const std::filesystem::path& dir) {
    static_assert(std::is_same_v<T, float>, "checkpoints are stored in f32");
    Checkpoint ck = load_checkpoint(dir);
    if (ck.meta.value("kind", "") != "base") throw FormatError(dir.string() + " is not a base-model checkpoint");
    ModelConfig cfg = ck.meta.at("config").get<ModelConfig>();
    BaseModel m(cfg, BpeVocab::load(dir / "vocab.json"), 0);
    if (m.params_.size() != ck.params.size()) throw FormatError("checkpoint tensor count does not match config");
    for (std::size_t i = 0; i < ck.params.size(); ++i) {
      auto& dst = m.params_[i];
      if (dst.name != ck.params[i].name || dst.value.shape() != ck.params[i].value.shape())
        throw FormatError("checkpoint tensor " + ck.params[i].name + " does not match the model layout");
      dst.value = ck.params[i].value;
    }
    if (ck.meta.value("frozen", false)) {
      m.freeze();
      if (m.frozen_digest_ != ck.digest) throw DigestMismatch("base checkpoint digest changed on reload");
    }
    return m;
  }

 private:
  template <typename U>
  friend class BaseModel;

  Var p(const std::string& name, Graph<T>& g) const { return g.param(params_.get(name)); }

  Var proj(Graph<T>& g, Var x, const std::string& name, const AdapterVars* ad = nullptr) const {
    Var W = p(name + ".w", g);
    Var b = params_.contains(name + ".b") ? p(name + ".b", g) : Var{};
    if (ad && ad->A.valid()) return g.lora_linear(x, W, b, ad->A, ad->B, static_cast<T>(ad->scale));
    return g.linear(x, W, b);
  }

  Var drop(Graph<T>& g, Var x, Rng* rng) const {
    if (!rng || cfg_.dropout <= 0) return x;
    return g.dropout(x, static_cast<T>(cfg_.dropout), *rng);
  }

  void check_ids(std::span<const TokenId> ids) const {
    if (ids.size() > cfg_.max_tokens) throw DimensionError("token sequence longer than max_tokens");
    for (TokenId id : ids)
      if (id < 0 || static_cast<std::size_t>(id) >= cfg_.primary_vocab)
        throw DimensionError("token id " + std::to_string(id) + " outside primary vocab of " +
                             std::to_string(cfg_.primary_vocab));
  }

  static void append_row(Tensor<T>& m, const Tensor<T>& row) {
    Tensor<T> out = Tensor<T>::matrix(m.rows() + 1, m.cols());
    std::copy_n(m.data(), m.size(), out.data());
    std::copy_n(row.data(), row.size(), out.data() + m.size());
    m = std::move(out);
  }

  void add_linear(Rng& rng, const std::string& name, std::size_t out, std::size_t in, bool bias, double gain = 1.0) {
    Tensor<T> w = Tensor<T>::matrix(out, in);
    const double sd = gain / std::sqrt(static_cast<double>(in));
    for (auto& v : w.vec()) v = static_cast<T>(rng.normal(0.0, sd));
    params_.add(name + ".w", std::move(w));
    if (bias) params_.add(name + ".b", Tensor<T>::matrix(1, out));
  }

  void add_ln(const std::string& name, std::size_t d) {
    params_.add(name + ".g", Tensor<T>({1, d}, T(1)));
    params_.add(name + ".b", Tensor<T>::matrix(1, d));
  }

  void init_params(std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t d = cfg_.d_model, f = cfg_.ffn_dim;
    const double resid_gain = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg_.n_enc_layers));
    add_linear(rng, "enc.in", d, cfg_.feat_dim, true);
    for (std::size_t l = 0; l < cfg_.n_enc_layers; ++l) {
      const std::string pre = "enc." + std::to_string(l) + ".";
      add_ln(pre + "ln1", d);
      add_linear(rng, pre + "attn.q", d, d, true);
      add_linear(rng, pre + "attn.k", d, d, false);
      add_linear(rng, pre + "attn.v", d, d, true);
      add_linear(rng, pre + "attn.o", d, d, true, resid_gain);
      add_ln(pre + "ln2", d);
      add_linear(rng, pre + "ff.w1", f, d, true);
      add_linear(rng, pre + "ff.w2", d, f, true, resid_gain);
    }
    add_ln("enc.ln_post", d);

    const std::size_t V = cfg_.primary_vocab;
    Tensor<T> emb = Tensor<T>::matrix(V, d);
    for (auto& v : emb.vec()) v = static_cast<T>(rng.normal(0.0, 0.1));
    params_.add("dec.tok_emb", std::move(emb));
    Tensor<T> pos = Tensor<T>::matrix(cfg_.max_tokens, d);
    for (auto& v : pos.vec()) v = static_cast<T>(rng.normal(0.0, 0.02));
    params_.add("dec.pos_emb", std::move(pos));
    const double dec_gain = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg_.n_dec_layers));
    for (std::size_t l = 0; l < cfg_.n_dec_layers; ++l) {
      const std::string pre = "dec." + std::to_string(l) + ".";
      add_ln(pre + "ln1", d);
      add_linear(rng, pre + "self.q", d, d, true);
      add_linear(rng, pre + "self.k", d, d, false);
      add_linear(rng, pre + "self.v", d, d, true);
      add_linear(rng, pre + "self.o", d, d, true, dec_gain);
      add_ln(pre + "ln2", d);
      add_linear(rng, pre + "cross.q", d, d, true);
      add_linear(rng, pre + "cross.k", d, d, false);
      add_linear(rng, pre + "cross.v", d, d, true);
      add_linear(rng, pre + "cross.o", d, d, true, dec_gain);
      add_ln(pre + "ln3", d);
      add_linear(rng, pre + "ff.w1", f, d, true);
      add_linear(rng, pre + "ff.w2", d, f, true, dec_gain);
    }
    add_ln("dec.ln_post", d);
    add_linear(rng, "dec.out", V, d, true);
  }

  ModelConfig cfg_;
  BpeVocab vocab_;
  ParamStore<T> params_;
  bool frozen_ = false;
  std::string frozen_digest_;
};

}  // namespace dualpipe
