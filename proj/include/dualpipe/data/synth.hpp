// SPDX-License-Identifier: Apache-2.0

// Synthetic "languages": each owns a character inventory, a word list, and a
// fixed feature-frame prototype plus duration per character. An utterance is
// rendered by emitting each character's prototype for its duration, with
// Gaussian noise added to every frame. All characters across languages come
// from one pool that is partitioned into disjoint per-slot inventories.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "dualpipe/core/errors.hpp"
#include "dualpipe/core/rng.hpp"
#include "dualpipe/core/tensor.hpp"
#include "dualpipe/core/utf8.hpp"

namespace dualpipe {

struct LanguageParams {
  std::string code;             // language code, becomes the tag <|code|>
  std::size_t slot = 0;         // which disjoint block of the character pool
  std::size_t feat_dim = 40;
  std::size_t inventory_size = 12;
  std::size_t n_words = 60;
  std::size_t word_len_min = 2;
  std::size_t word_len_max = 6;
  std::size_t dur_min = 2;
  std::size_t dur_max = 4;
  double noise_sigma = 0.3;
  double proto_scale = 1.0;
  std::uint64_t pool_seed = 0x5eed;
};

struct SyntheticLanguage {
  std::string code;
  std::uint64_t seed = 0;
  LanguageParams params;
  std::vector<char32_t> inventory;
  std::vector<std::string> words;
  std::map<char32_t, std::vector<float>> prototypes;  // includes U' ' (shared silence)
  std::map<char32_t, std::size_t> durations;          // includes U' '
};

struct Utterance {
  std::string utt_id;
  std::string lang;
  std::string text;
  Tensor<float> features;  // frames x feat_dim
};

struct DatasetSplits {
  std::vector<Utterance> train;
  std::vector<Utterance> dev;
  std::vector<Utterance> test;
};

/// Every character a synthetic language may use, before partitioning.
inline std::vector<char32_t> character_pool() {
  std::vector<char32_t> pool;
  for (char32_t c = U'a'; c <= U'z'; ++c) pool.push_back(c);
  for (char32_t c = 0x00E0; c <= 0x00FF; ++c)
    if (c != 0x00F7) pool.push_back(c);
  for (char32_t c = 0x03B1; c <= 0x03C9; ++c)
    if (c != 0x03C2) pool.push_back(c);
  for (char32_t c = 0x0430; c <= 0x044F; ++c) pool.push_back(c);
  for (char32_t c = 0x0561; c <= 0x0586; ++c) pool.push_back(c);
  for (char32_t c = 0x10D0; c <= 0x10F0; ++c) pool.push_back(c);
  return pool;
}

inline std::uint64_t string_key(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) h = (h ^ c) * 1099511628211ULL;
  return h;
}

/// Silence prototype used for the space character by every language sharing
/// a pool seed.
inline std::vector<float> silence_prototype(const LanguageParams& p) {
  Rng rng = Rng(p.pool_seed).derive(0x51E2CE);
  std::vector<float> v(p.feat_dim);
  for (auto& x : v) x = static_cast<float>(0.5 * p.proto_scale * rng.normal());
  return v;
}

inline SyntheticLanguage gen_language(std::uint64_t seed, const LanguageParams& params) {
  if (params.code.empty()) throw ConfigError("gen_language: empty language code");
  if (params.n_words == 0) throw ConfigError("gen_language: word list must not be empty");
  if (params.inventory_size < 2) throw ConfigError("gen_language: inventory needs at least two characters");
  if (params.word_len_min < 1 || params.word_len_min > params.word_len_max)
    throw ConfigError("gen_language: bad word length range");
  if (params.dur_min < 1 || params.dur_min > params.dur_max) throw ConfigError("gen_language: bad duration range");
  if (params.feat_dim == 0) throw ConfigError("gen_language: feat_dim must be positive");
  if (!(params.noise_sigma >= 0)) throw ConfigError("gen_language: noise sigma must be non-negative");

  std::vector<char32_t> pool = character_pool();
  Rng(params.pool_seed).shuffle(pool);
  const std::size_t begin = params.slot * params.inventory_size;
  if (begin + params.inventory_size > pool.size())
    throw ConfigError("gen_language: character pool exhausted (slot " + std::to_string(params.slot) + " needs " +
                      std::to_string(begin + params.inventory_size) + " of " + std::to_string(pool.size()) +
                      " characters)");

  SyntheticLanguage lang;
  lang.code = params.code;
  lang.seed = seed;
  lang.params = params;
  lang.inventory.assign(pool.begin() + static_cast<std::ptrdiff_t>(begin),
                        pool.begin() + static_cast<std::ptrdiff_t>(begin + params.inventory_size));

  Rng rng(seed);
  Rng proto_rng = rng.derive(1);
  Rng word_rng = rng.derive(2);
  for (char32_t c : lang.inventory) {
    std::vector<float> v(params.feat_dim);
    for (auto& x : v) x = static_cast<float>(params.proto_scale * proto_rng.normal());
    lang.prototypes[c] = std::move(v);
    lang.durations[c] = static_cast<std::size_t>(
        proto_rng.uniform_int(static_cast<std::int64_t>(params.dur_min), static_cast<std::int64_t>(params.dur_max)));
  }
  lang.prototypes[U' '] = silence_prototype(params);
  lang.durations[U' '] = params.dur_min;

  std::set<std::string> seen;
  std::size_t attempts = 0;
  while (lang.words.size() < params.n_words) {
    if (++attempts > params.n_words * 100) throw ConfigError("gen_language: cannot draw enough distinct words");
    const auto len = static_cast<std::size_t>(word_rng.uniform_int(static_cast<std::int64_t>(params.word_len_min),
                                                                   static_cast<std::int64_t>(params.word_len_max)));
    std::u32string w;
    while (w.size() < len) {
      const char32_t c =
          lang.inventory[static_cast<std::size_t>(word_rng.uniform_int(0, static_cast<std::int64_t>(params.inventory_size) - 1))];
      // adjacent repeats would be indistinguishable from a longer duration
      if (!w.empty() && w.back() == c) continue;
      w.push_back(c);
    }
    std::string s = utf8::encode(w);
    if (seen.insert(s).second) lang.words.push_back(std::move(s));
  }
  return lang;
}

/// Fraction of the smaller inventory shared with the other language.
inline double inventory_overlap(const SyntheticLanguage& a, const SyntheticLanguage& b) {
  std::set<char32_t> sa(a.inventory.begin(), a.inventory.end());
  std::size_t shared = 0;
  for (char32_t c : b.inventory) shared += sa.count(c);
  return static_cast<double>(shared) / static_cast<double>(std::min(a.inventory.size(), b.inventory.size()));
}

/// Renders `text` to frames; the noise comes from `rng`.
inline Tensor<float> render(const SyntheticLanguage& lang, const std::string& text, Rng& rng) {
  const std::u32string chars = utf8::decode(text);
  std::size_t frames = 0;
  for (char32_t c : chars) {
    auto it = lang.durations.find(c);
    if (it == lang.durations.end())
      throw ConfigError("render: character U+" + std::to_string(static_cast<std::uint32_t>(c)) +
                        " is not in language " + lang.code);
    frames += it->second;
  }
  const std::size_t d = lang.params.feat_dim;
  Tensor<float> out = Tensor<float>::matrix(frames, d);
  std::size_t row = 0;
  for (char32_t c : chars) {
    const auto& proto = lang.prototypes.at(c);
    for (std::size_t k = 0; k < lang.durations.at(c); ++k, ++row)
      for (std::size_t j = 0; j < d; ++j)
        out.at(row, j) = proto[j] + static_cast<float>(lang.params.noise_sigma * rng.normal());
  }
  return out;
}

struct DatasetParams {
  std::size_t words_min = 3;
  std::size_t words_max = 10;
  double train_frac = 0.8;
  double dev_frac = 0.1;
};

/// Draws `n_utts` utterances and splits them train/dev/test; every split gets
/// at least one utterance.
inline DatasetSplits gen_dataset(const SyntheticLanguage& lang, std::size_t n_utts, std::uint64_t split_seed,
                                 const DatasetParams& dp = {}) {
  if (n_utts < 3) throw ConfigError("gen_dataset: need at least 3 utterances for train/dev/test");
  if (dp.words_min < 1 || dp.words_min > dp.words_max) throw ConfigError("gen_dataset: bad words-per-utterance range");
  const Rng root = Rng(split_seed).derive(string_key(lang.code));
  std::vector<Utterance> all;
  all.reserve(n_utts);
  for (std::size_t i = 0; i < n_utts; ++i) {
    Rng rng = root.derive(i);
    const auto nw = static_cast<std::size_t>(
        rng.uniform_int(static_cast<std::int64_t>(dp.words_min), static_cast<std::int64_t>(dp.words_max)));
    std::string text;
    for (std::size_t w = 0; w < nw; ++w) {
      if (w) text += ' ';
      text += lang.words[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(lang.words.size()) - 1))];
    }
    char id[32];
    std::snprintf(id, sizeof id, "%06zu", i);
    Utterance u;
    u.utt_id = lang.code + "-" + id;
    u.lang = lang.code;
    u.text = std::move(text);
    Rng noise = rng.derive(0xF00D);
    u.features = render(lang, u.text, noise);
    all.push_back(std::move(u));
  }
  std::vector<std::size_t> order(n_utts);
  for (std::size_t i = 0; i < n_utts; ++i) order[i] = i;
  Rng(split_seed).derive(string_key(lang.code) ^ 0x5B117).shuffle(order);
  auto n_train = static_cast<std::size_t>(std::floor(dp.train_frac * static_cast<double>(n_utts)));
  auto n_dev = static_cast<std::size_t>(std::floor(dp.dev_frac * static_cast<double>(n_utts)));
  n_train = std::clamp<std::size_t>(n_train, 1, n_utts - 2);
  n_dev = std::clamp<std::size_t>(n_dev, 1, n_utts - n_train - 1);
  DatasetSplits s;
  for (std::size_t k = 0; k < n_utts; ++k) {
    auto& dst = k < n_train ? s.train : (k < n_train + n_dev ? s.dev : s.test);
    dst.push_back(std::move(all[order[k]]));
  }
  auto by_id = [](const Utterance& a, const Utterance& b) { return a.utt_id < b.utt_id; };
  std::sort(s.train.begin(), s.train.end(), by_id);
  std::sort(s.dev.begin(), s.dev.end(), by_id);
  std::sort(s.test.begin(), s.test.end(), by_id);
  return s;
}

}  // namespace dualpipe
