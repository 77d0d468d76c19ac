// SPDX-License-Identifier: Apache-2.0

// Dual-pipeline extension of a frozen base model. Encoder layers below the
// start layer run once. From the start layer on, the primary stream keeps the
// frozen weights and the frozen final layer norm, while the secondary stream
// adds a low-rank branch to every attention and feed-forward projection,
// keeps its own residual, and ends in its own layer norm. A LAS decoder (LSTM
// plus two-head additive attention) reads the secondary stream.

#pragma once

#include <memory>

#include "dualpipe/core/lora.hpp"
#include "dualpipe/model/base_model.hpp"

namespace dualpipe {

struct ParamCount {
  std::size_t lora = 0;
  std::size_t decoder = 0;
  std::size_t layernorm = 0;
  std::size_t total() const { return lora + decoder + layernorm; }
};

/// Shape arithmetic only; no tensors are allocated.
inline ParamCount count_additional_params(const ModelConfig& base, const ExtensionConfig& ext) {
  ext.validate(base);
  const std::size_t d = base.d_model, f = base.ffn_dim, r = ext.rank;
  const std::size_t per_layer = 4 * r * (d + d) + r * (d + f) + r * (f + d);
  ParamCount c;
  c.lora = (base.n_enc_layers - ext.start_layer) * per_layer;
  const std::size_t V = ext.secondary_vocab, e = ext.las_embed, H = ext.las_hidden, a = ext.attn_dim;
  const std::size_t ctx = ext.attn_heads * d;
  c.decoder = V * e                                    // embedding
              + 4 * H * (e + ctx) + 4 * H * H + 4 * H  // LSTM
              + ext.attn_heads * (a * d + a * H + a)   // additive attention
              + V * (H + ctx) + V;                     // output projection
  c.layernorm = 2 * d;
  return c;
}

template <typename T>
class DualPipelineModel {
 public:
  /// Recurrent state of the LAS decoder (1 x H each).
  struct LasState {
    Tensor<T> h, c;
  };
  /// Encoder-side attention keys, computed once per utterance.
  struct LasMemory {
    Tensor<T> enc;
    std::vector<Tensor<T>> keys;
  };
  struct LasStepResult {
    Tensor<T> logits;
    LasState state;
    std::vector<Tensor<T>> attention;  // one 1 x frames row per head
  };

  DualPipelineModel(std::shared_ptr<const BaseModel<T>> base, ExtensionConfig ext, BpeVocab secondary_vocab,
                    std::uint64_t seed)
      : base_(std::move(base)), ext_(std::move(ext)), vocab_(std::move(secondary_vocab)) {
    if (!base_->frozen()) throw ConfigError("extension requires a frozen base model");
    ext_.secondary_vocab = vocab_.size();
    ext_.validate(base_->config());
    init_params(seed);
  }

  const BaseModel<T>& base() const { return *base_; }
  std::shared_ptr<const BaseModel<T>> base_ptr() const { return base_; }
  const ExtensionConfig& config() const { return ext_; }
  const BpeVocab& vocab() const { return vocab_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  template <typename U>
  DualPipelineModel<U> cast(std::shared_ptr<const BaseModel<U>> base) const {
    DualPipelineModel<U> out(std::move(base), ext_, vocab_, 0);
    out.params_ = params_.template cast<U>();
    return out;
  }

  // ---- encoder ----------------------------------------------------------------

  struct DualVars {
    Var primary, secondary;
  };

  /// Both streams inside one graph. `want_primary` = false skips the frozen
  /// tail of the primary stream.
  DualVars encode_dual(Graph<T>& g, const Tensor<T>& features, bool want_primary = true) const {
    const auto& base = *base_;
    const std::size_t n = base.config().n_enc_layers, Ls = ext_.start_layer;
    Var x = base.encoder_input(g, features);
    for (std::size_t l = 0; l < Ls; ++l) x = base.encoder_layer(g, l, x);
    Var prim = x, sec = x;
    for (std::size_t l = Ls; l < n; ++l) {
      if (want_primary) prim = base.encoder_layer(g, l, prim);
      const LayerAdapterVars ad = adapter_vars(g, l);
      sec = base.encoder_layer(g, l, sec, &ad);
    }
    DualVars out;
    if (want_primary) out.primary = base.encoder_final_ln(g, prim);
    out.secondary = g.layer_norm(sec, p(g, "sec_ln.g"), p(g, "sec_ln.b"));
    return out;
  }

  std::pair<Tensor<T>, Tensor<T>> encode_dual(const Tensor<T>& features) const {
    Graph<T> g(false);
    DualVars v = encode_dual(g, features, true);
    return {g.value(v.primary), g.value(v.secondary)};
  }

  Tensor<T> encode_secondary(const Tensor<T>& features) const {
    Graph<T> g(false);
    return g.value(encode_dual(g, features, false).secondary);
  }

  // ---- LAS decoder ---------------------------------------------------------------

  LasState initial_state() const {
    return {Tensor<T>::matrix(1, ext_.las_hidden), Tensor<T>::matrix(1, ext_.las_hidden)};
  }

  LasMemory memory(const Tensor<T>& secondary_enc) const {
    if (secondary_enc.rows() == 0) throw DimensionError("LAS attention over empty encoder output");
    Graph<T> g(false);
    Var enc = g.ref(secondary_enc);
    LasMemory m{secondary_enc, {}};
    for (std::size_t k = 0; k < ext_.attn_heads; ++k) m.keys.push_back(g.value(g.linear(enc, att(g, k, "w_enc"))));
    return m;
  }

  /// One decoder step: attend with the previous hidden state, feed
  /// [embed(prev); context] to the LSTM, project [h_new; context].
  LasStepResult las_step(const LasMemory& mem, TokenId prev, const LasState& state) const {
    check_secondary_id(prev);
    Graph<T> g(false);
    std::vector<Var> keys;
    for (const auto& k : mem.keys) keys.push_back(g.ref(k));
    std::vector<Var> attn;
    const std::array<TokenId, 1> ids{prev};
    auto [logits, h, c] =
        step_graph(g, g.ref(mem.enc), keys, g.embedding(p(g, "las.emb"), ids), g.ref(state.h), g.ref(state.c), &attn);
    LasStepResult r{g.value(logits), {g.value(h), g.value(c)}, {}};
    for (Var a : attn) r.attention.push_back(g.value(a));
    return r;
  }

  LasStepResult las_step(const Tensor<T>& secondary_enc, TokenId prev, const LasState& state) const {
    return las_step(memory(secondary_enc), prev, state);
  }

  /// Summed cross-entropy of `target` = [tag, text..., eot] through the
  /// secondary pipeline, and the number of predicted tokens.
  std::pair<Var, std::size_t> secondary_teacher_forced_loss(Graph<T>& g, const Tensor<T>& features,
                                                            std::span<const TokenId> target) const {
    if (target.empty() || !vocab_.is_language_tag(target[0]))
      throw ConfigError("secondary target must start with a registered language tag");
    for (TokenId id : target) check_secondary_id(id);
    std::vector<TokenId> inputs = vocab_.prompt();
    const std::size_t n_prompt = inputs.size();
    inputs.insert(inputs.end(), target.begin(), target.end() - 1);
    std::vector<std::int32_t> tgt(inputs.size(), -1);
    for (std::size_t i = 0; i < target.size(); ++i) tgt[n_prompt - 1 + i] = target[i];

    Var enc = encode_dual(g, features, false).secondary;
    std::vector<Var> keys;
    for (std::size_t k = 0; k < ext_.attn_heads; ++k) keys.push_back(g.linear(enc, att(g, k, "w_enc")));
    Var emb = g.embedding(p(g, "las.emb"), inputs);
    Var h = g.constant(Tensor<T>::matrix(1, ext_.las_hidden));
    Var c = g.constant(Tensor<T>::matrix(1, ext_.las_hidden));
    std::vector<Var> features_out;
    for (std::size_t t = 0; t < inputs.size(); ++t) {
      auto [hid_ctx, h2, c2] = step_core(g, enc, keys, g.slice_rows(emb, t, 1), h, c, nullptr);
      features_out.push_back(hid_ctx);
      h = h2;
      c = c2;
    }
    Var logits = g.linear(g.concat_rows(features_out), p(g, "las.out.w"), p(g, "las.out.b"));
    return {g.cross_entropy_sum(logits, tgt), target.size()};
  }

  // ---- persistence ---------------------------------------------------------------

  void save(const std::filesystem::path& dir) const {
    static_assert(std::is_same_v<T, float>, "checkpoints are stored in f32");
    nlohmann::json meta{{"kind", "extension"},
                        {"config", ext_},
                        {"base_digest", base_->frozen_digest()},
                        {"base_config", base_->config()}};
    save_checkpoint(dir, params_, meta);
    vocab_.save(dir / "vocab.json");
  }

  /// Loads an extension on top of `base`; refuses a base whose digest differs
  /// from the one the extension was trained against.
  static DualPipelineModel load(const std::filesystem::path& dir, std::shared_ptr<const BaseModel<T>> base) {
    static_assert(std::is_same_v<T, float>, "checkpoints are stored in f32");
    Checkpoint ck = load_checkpoint(dir);
    if (ck.meta.value("kind", "") != "extension") throw FormatError(dir.string() + " is not an extension checkpoint");
    const std::string want = ck.meta.at("base_digest").get<std::string>();
    if (base->digest() != want || base->frozen_digest() != want)
      throw DigestMismatch("extension in " + dir.string() + " was trained against a different base model");
    DualPipelineModel m(std::move(base), ck.meta.at("config").get<ExtensionConfig>(),
                        BpeVocab::load(dir / "vocab.json"), 0);
    if (m.params_.size() != ck.params.size()) throw FormatError("extension tensor count does not match config");
    for (std::size_t i = 0; i < ck.params.size(); ++i) {
      auto& dst = m.params_[i];
      if (dst.name != ck.params[i].name || dst.value.shape() != ck.params[i].value.shape())
        throw FormatError("extension tensor " + ck.params[i].name + " does not match the layout");
      dst.value = ck.params[i].value;
    }
    return m;
  }

 private:
  template <typename U>
  friend class DualPipelineModel;

  struct StepOut {
    Var out, h, c;
  };

  Var p(Graph<T>& g, const std::string& name) const { return g.param(params_.get(name)); }
  Var att(Graph<T>& g, std::size_t k, const char* what) const {
    return p(g, "las.att" + std::to_string(k) + "." + what);
  }

  LayerAdapterVars adapter_vars(Graph<T>& g, std::size_t l) const {
    LayerAdapterVars ad;
    if (ext_.rank == 0) return ad;
    const std::string pre = "lora." + std::to_string(l) + ".";
    const double s = ext_.alpha / static_cast<double>(ext_.rank);
    auto one = [&](const char* m) { return AdapterVars{p(g, pre + m + ".A"), p(g, pre + m + ".B"), s}; };
    ad.q = one("q");
    ad.k = one("k");
    ad.v = one("v");
    ad.o = one("o");
    ad.w1 = one("w1");
    ad.w2 = one("w2");
    return ad;
  }

  /// Attention + LSTM; returns [h_new; context] (pre-projection), h_new, c_new.
  StepOut step_core(Graph<T>& g, Var enc, const std::vector<Var>& keys, Var emb, Var h, Var c,
                    std::vector<Var>* attn_out) const {
    Var ctx{};
    for (std::size_t k = 0; k < ext_.attn_heads; ++k) {
      auto head = g.additive_attention(keys[k], g.linear(h, att(g, k, "w_dec")), att(g, k, "v"), enc);
      if (attn_out) attn_out->push_back(head.weights);
      ctx = ctx.valid() ? g.concat_cols(ctx, head.context) : head.context;
    }
    Var gates = g.add(g.linear(g.concat_cols(emb, ctx), p(g, "las.lstm.w_ih"), p(g, "las.lstm.b")),
                      g.linear(h, p(g, "las.lstm.w_hh")));
    const std::size_t H = ext_.las_hidden;
    Var hc = g.lstm_cell(gates, c);
    Var h2 = g.slice_cols(hc, 0, H);
    return {g.concat_cols(h2, ctx), h2, g.slice_cols(hc, H, H)};
  }

  StepOut step_graph(Graph<T>& g, Var enc, const std::vector<Var>& keys, Var emb, Var h, Var c,
                     std::vector<Var>* attn_out) const {
    StepOut s = step_core(g, enc, keys, emb, h, c, attn_out);
    s.out = g.linear(s.out, p(g, "las.out.w"), p(g, "las.out.b"));
    return s;
  }

  void check_secondary_id(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_.size())
      throw DimensionError("token id " + std::to_string(id) + " outside secondary vocab of " +
                           std::to_string(vocab_.size()));
  }

  void add_random(Rng& rng, const std::string& name, std::size_t rows, std::size_t cols, double sd) {
    Tensor<T> w = Tensor<T>::matrix(rows, cols);
    for (auto& v : w.vec()) v = static_cast<T>(rng.normal(0.0, sd));
    params_.add(name, std::move(w));
  }

  void init_params(std::uint64_t seed) {
    Rng root(seed);
    const auto& bc = base_->config();
    const std::size_t d = bc.d_model, f = bc.ffn_dim;
    if (ext_.rank > 0) {
      Rng rng = root.derive(1);
      for (std::size_t l = ext_.start_layer; l < bc.n_enc_layers; ++l) {
        const std::string pre = "lora." + std::to_string(l) + ".";
        for (const char* m : kAdaptedMatrices) {
          const std::string sm(m);
          const std::size_t din = sm == "w2" ? f : d, dout = sm == "w1" ? f : d;
          auto ad = LoraAdapter<T>::init(din, dout, ext_.rank, ext_.alpha, rng);
          params_.add(pre + sm + ".A", std::move(ad.A));
          params_.add(pre + sm + ".B", std::move(ad.B));
        }
      }
    }
    params_.add("sec_ln.g", base_->params().get("enc.ln_post.g").value);
    params_.add("sec_ln.b", base_->params().get("enc.ln_post.b").value);

    Rng rng = root.derive(2);
    const std::size_t V = vocab_.size(), e = ext_.las_embed, H = ext_.las_hidden, a = ext_.attn_dim;
    const std::size_t ctx = ext_.attn_heads * d, in = e + ctx;
    add_random(rng, "las.emb", V, e, 0.1);
    add_random(rng, "las.lstm.w_ih", 4 * H, in, 1.0 / std::sqrt(static_cast<double>(in)));
    add_random(rng, "las.lstm.w_hh", 4 * H, H, 1.0 / std::sqrt(static_cast<double>(H)));
    Tensor<T> b = Tensor<T>::matrix(1, 4 * H);
    for (std::size_t j = H; j < 2 * H; ++j) b[j] = T(1);  // forget gate
    params_.add("las.lstm.b", std::move(b));
    for (std::size_t k = 0; k < ext_.attn_heads; ++k) {
      const std::string pre = "las.att" + std::to_string(k) + ".";
      add_random(rng, pre + "w_enc", a, d, 1.0 / std::sqrt(static_cast<double>(d)));
      add_random(rng, pre + "w_dec", a, H, 1.0 / std::sqrt(static_cast<double>(H)));
      add_random(rng, pre + "v", 1, a, 1.0 / std::sqrt(static_cast<double>(a)));
    }
    add_random(rng, "las.out.w", V, H + ctx, 1.0 / std::sqrt(static_cast<double>(H + ctx)));
    params_.add("las.out.b", Tensor<T>::matrix(1, V));
  }

  std::shared_ptr<const BaseModel<T>> base_;
  ExtensionConfig ext_;
  BpeVocab vocab_;
  ParamStore<T> params_;
};

}  // namespace dualpipe
