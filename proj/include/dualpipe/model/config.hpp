// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string>

#include <json.hpp>

#include "dualpipe/core/errors.hpp"

namespace dualpipe {

/// Shapes of the frozen encoder-decoder and its primary vocabulary.
struct ModelConfig {
  std::size_t feat_dim = 40;
  std::size_t d_model = 128;
  std::size_t n_heads = 4;
  std::size_t n_enc_layers = 6;
  std::size_t n_dec_layers = 2;
  std::size_t ffn_dim = 512;
  std::size_t max_frames = 1024;
  std::size_t max_tokens = 128;
  std::size_t primary_vocab = 0;
  double dropout = 0.0;

  void validate() const {
    if (feat_dim == 0 || d_model == 0 || n_heads == 0) throw ConfigError("model dims must be positive");
    if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
    if (ffn_dim < d_model) throw ConfigError("ffn_dim must be >= d_model");
    if (n_enc_layers == 0 || n_dec_layers == 0) throw ConfigError("layer counts must be positive");
    if (max_frames == 0 || max_tokens < 5) throw ConfigError("max_frames/max_tokens too small");
    if (dropout < 0 || dropout >= 1) throw ConfigError("dropout must be in [0, 1)");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, feat_dim, d_model, n_heads, n_enc_layers, n_dec_layers,
                                                ffn_dim, max_frames, max_tokens, primary_vocab, dropout)

/// The new-language side: LoRA coverage and the LAS decoder shape.
struct ExtensionConfig {
  std::size_t rank = 8;
  double alpha = 8.0;
  std::size_t start_layer = 0;
  std::size_t las_hidden = 128;
  std::size_t las_embed = 64;
  std::size_t attn_dim = 64;
  std::size_t attn_heads = 2;
  std::size_t secondary_vocab = 0;

  void validate(const ModelConfig& base) const {
    if (start_layer > base.n_enc_layers)
      throw ConfigError("start_layer " + std::to_string(start_layer) + " outside [0, " +
                        std::to_string(base.n_enc_layers) + "]");
    if (!(alpha > 0)) throw ConfigError("LoRA alpha must be positive");
    if (las_hidden == 0 || las_embed == 0 || attn_dim == 0 || attn_heads == 0)
      throw ConfigError("LAS decoder dims must be positive");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ExtensionConfig, rank, alpha, start_layer, las_hidden, las_embed,
                                                attn_dim, attn_heads, secondary_vocab)

}  // namespace dualpipe
