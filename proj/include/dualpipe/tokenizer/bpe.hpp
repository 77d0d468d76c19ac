// SPDX-License-Identifier: Apache-2.0

// Byte-level BPE. Id layout: 0..255 raw bytes, then the special tokens, then
// learned merges in the order they were learned. Keeping specials right after
// the bytes makes their ids independent of how many merges were learned.

#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dualpipe/core/errors.hpp"
#include "dualpipe/core/utf8.hpp"

namespace dualpipe {

using TokenId = std::int32_t;

class BpeVocab {
 public:
  static constexpr std::size_t kByteTokens = 256;
  static inline const std::vector<std::string> kCoreSpecials = {
      "<|startoftranscript|>", "<|endoftext|>", "<|pad|>", "<|transcribe|>", "<|notimestamps|>"};

  static std::string tag_name(const std::string& lang) { return "<|" + lang + "|>"; }

  BpeVocab() : BpeVocab(std::vector<std::string>{}) {}

  /// A vocabulary with no merges and one language tag per entry of `languages`.
  explicit BpeVocab(const std::vector<std::string>& languages) {
    for (std::size_t b = 0; b < kByteTokens; ++b) tokens_.push_back(std::string(1, static_cast<char>(b)));
    std::vector<std::string> names = kCoreSpecials;
    for (const auto& l : languages) {
      if (l.empty()) throw ConfigError("empty language code");
      names.push_back(tag_name(l));
    }
    for (const auto& name : names) {
      if (special_ids_.count(name)) throw ConfigError("duplicate special token " + name);
      special_ids_[name] = static_cast<TokenId>(tokens_.size());
      special_names_.push_back(name);
      tokens_.push_back(name);
    }
    languages_ = languages;
  }

  std::size_t size() const { return tokens_.size(); }
  std::size_t num_specials() const { return special_names_.size(); }
  const std::vector<std::pair<std::string, std::string>>& merges() const { return merges_; }
  const std::vector<std::string>& languages() const { return languages_; }

  TokenId special(const std::string& name) const {
    auto it = special_ids_.find(name);
    if (it == special_ids_.end()) throw ConfigError("unknown special token " + name);
    return it->second;
  }
  const std::map<std::string, TokenId>& specials() const { return special_ids_; }

  TokenId sot() const { return special(kCoreSpecials[0]); }
  TokenId eot() const { return special(kCoreSpecials[1]); }
  TokenId pad() const { return special(kCoreSpecials[2]); }
  TokenId transcribe() const { return special(kCoreSpecials[3]); }
  TokenId notimestamps() const { return special(kCoreSpecials[4]); }

  /// Decoding prompt: start-of-transcript, transcribe, no-timestamps.
  std::vector<TokenId> prompt() const { return {sot(), transcribe(), notimestamps()}; }

  TokenId language_tag(const std::string& lang) const {
    auto it = special_ids_.find(tag_name(lang));
    if (it == special_ids_.end()) throw ConfigError("language '" + lang + "' has no tag in this vocabulary");
    return it->second;
  }
  bool has_language(const std::string& lang) const { return special_ids_.count(tag_name(lang)) != 0; }
  std::vector<TokenId> language_tags() const {
    std::vector<TokenId> ids;
    for (const auto& l : languages_) ids.push_back(language_tag(l));
    return ids;
  }
  bool is_language_tag(TokenId id) const {
    const auto first = static_cast<TokenId>(kByteTokens + kCoreSpecials.size());
    return id >= first && id < first + static_cast<TokenId>(languages_.size());
  }
  /// Language code of a tag id; throws for non-tag ids.
  const std::string& tag_language(TokenId id) const {
    if (!is_language_tag(id)) throw ConfigError("token " + std::to_string(id) + " is not a language tag");
    return languages_[static_cast<std::size_t>(id) - kByteTokens - kCoreSpecials.size()];
  }
  bool is_special(TokenId id) const {
    return id >= static_cast<TokenId>(kByteTokens) && id < static_cast<TokenId>(kByteTokens + num_specials());
  }

  /// Byte content of a non-special token.
  const std::string& token_bytes(TokenId id) const {
    check_id(id);
    if (is_special(id)) throw ConfigError("token " + std::to_string(id) + " is special");
    return tokens_[static_cast<std::size_t>(id)];
  }
  const std::string& token_string(TokenId id) const {
    check_id(id);
    return tokens_[static_cast<std::size_t>(id)];
  }

  /// Applies merges in learned order; never emits special ids.
  std::vector<TokenId> encode(std::string_view text) const {
    std::vector<TokenId> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(static_cast<TokenId>(c));
    if (merge_rank_.empty()) return ids;
    while (ids.size() > 1) {
      std::size_t best_rank = SIZE_MAX;
      for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
        auto it = merge_rank_.find({ids[i], ids[i + 1]});
        if (it != merge_rank_.end() && it->second < best_rank) best_rank = it->second;
      }
      if (best_rank == SIZE_MAX) break;
      const auto& [a, b] = merge_pairs_[best_rank];
      const TokenId merged = merged_id(best_rank);
      std::vector<TokenId> next;
      next.reserve(ids.size());
      for (std::size_t i = 0; i < ids.size();) {
        if (i + 1 < ids.size() && ids[i] == a && ids[i + 1] == b) {
          next.push_back(merged);
          i += 2;
        } else {
          next.push_back(ids[i++]);
        }
      }
      ids.swap(next);
    }
    return ids;
  }

  /// Concatenates token bytes. Throws on unknown ids, on special ids unless
  /// `skip_specials`, and when the bytes are not valid UTF-8.
  std::string decode(const std::vector<TokenId>& ids, bool skip_specials = false) const {
    std::string out = raw_bytes(ids, skip_specials);
    if (!utf8::valid(out)) throw FormatError("decoded token stream is not valid UTF-8");
    return out;
  }

  /// Like decode(skip_specials = true) but replaces malformed UTF-8 with
  /// U+FFFD instead of throwing; meant for model output.
  std::string decode_lossy(const std::vector<TokenId>& ids) const { return utf8::sanitize(raw_bytes(ids, true)); }

  /// Appends a merge of two existing non-special tokens; returns its id.
  TokenId add_merge(TokenId a, TokenId b) {
    const std::string merged = token_bytes(a) + token_bytes(b);
    const std::size_t rank = merge_pairs_.size();
    merge_pairs_.emplace_back(a, b);
    merge_rank_[{a, b}] = rank;
    merges_.emplace_back(token_bytes(a), token_bytes(b));
    tokens_.push_back(merged);
    return merged_id(rank);
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["format"] = "dualpipe-bpe-1";
    auto merges = nlohmann::json::array();
    for (const auto& [a, b] : merges_) merges.push_back({to_hex(a), to_hex(b)});
    j["merges"] = merges;
    j["specials"] = special_ids_;
    j["languages"] = languages_;
    return j;
  }

  static BpeVocab from_json(const nlohmann::json& j) {
    try {
      BpeVocab v(j.at("languages").get<std::vector<std::string>>());
      const auto specials = j.at("specials").get<std::map<std::string, TokenId>>();
      if (specials != v.special_ids_) throw FormatError("vocab specials do not match the declared languages");
      std::map<std::string, TokenId> by_bytes;
      for (std::size_t b = 0; b < kByteTokens; ++b) by_bytes[v.tokens_[b]] = static_cast<TokenId>(b);
      for (const auto& m : j.at("merges")) {
        const std::string a = from_hex(m.at(0).get<std::string>());
        const std::string b = from_hex(m.at(1).get<std::string>());
        auto ia = by_bytes.find(a);
        auto ib = by_bytes.find(b);
        if (ia == by_bytes.end() || ib == by_bytes.end()) throw FormatError("merge references an unknown token");
        const TokenId id = v.add_merge(ia->second, ib->second);
        by_bytes.emplace(a + b, id);
      }
      return v;
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("malformed vocab json: ") + e.what());
    }
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream f(path);
    if (!f) throw FormatError("cannot write " + path.string());
    f << to_json().dump(1) << '\n';
  }

  static BpeVocab load(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw FormatError("cannot read " + path.string());
    nlohmann::json j;
    try {
      f >> j;
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("malformed vocab json in " + path.string() + ": " + e.what());
    }
    return from_json(j);
  }

 private:
  TokenId merged_id(std::size_t rank) const {
    return static_cast<TokenId>(kByteTokens + special_names_.size() + rank);
  }
  void check_id(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
      throw ConfigError("unknown token id " + std::to_string(id));
  }
  std::string raw_bytes(const std::vector<TokenId>& ids, bool skip_specials) const {
    std::string out;
    for (TokenId id : ids) {
      check_id(id);
      if (is_special(id)) {
        if (skip_specials) continue;
        throw FormatError("special token " + tokens_[static_cast<std::size_t>(id)] + " in text stream");
      }
      out += tokens_[static_cast<std::size_t>(id)];
    }
    return out;
  }
  static std::string to_hex(const std::string& s) {
    static const char* digits = "0123456789abcdef";
    std::string h;
    for (unsigned char c : s) {
      h.push_back(digits[c >> 4]);
      h.push_back(digits[c & 15]);
    }
    return h;
  }
  static std::string from_hex(const std::string& h) {
    if (h.size() % 2) throw FormatError("odd-length hex in vocab");
    std::string s;
    for (std::size_t i = 0; i < h.size(); i += 2) s.push_back(static_cast<char>(std::stoi(h.substr(i, 2), nullptr, 16)));
    return s;
  }

  std::vector<std::string> tokens_;
  std::vector<std::string> special_names_;
  std::map<std::string, TokenId> special_ids_;
  std::vector<std::string> languages_;
  std::vector<std::pair<std::string, std::string>> merges_;
  std::vector<std::pair<TokenId, TokenId>> merge_pairs_;
  std::map<std::pair<TokenId, TokenId>, std::size_t> merge_rank_;
};

/// Greedy highest-count pair merging over whole lines (no pre-tokenization)
/// until `vocab_size` tokens exist or no pair occurs at least twice. Count
/// ties go to the lexicographically smallest (left bytes, right bytes) pair.
inline BpeVocab train_bpe(const std::vector<std::string>& corpus, std::size_t vocab_size,
                          const std::vector<std::string>& languages) {
  if (corpus.empty()) throw ConfigError("train_bpe: empty corpus");
  BpeVocab vocab(languages);
  if (vocab_size < vocab.size())
    throw ConfigError("train_bpe: vocab_size " + std::to_string(vocab_size) + " below byte+special floor " +
                      std::to_string(vocab.size()));

  // identical lines are merged with a multiplicity
  std::map<std::string, std::size_t> line_counts;
  for (const auto& l : corpus) ++line_counts[l];
  std::vector<std::vector<TokenId>> seqs;
  std::vector<std::size_t> mult;
  for (const auto& [line, n] : line_counts) {
    std::vector<TokenId> s;
    for (unsigned char c : line) s.push_back(c);
    seqs.push_back(std::move(s));
    mult.push_back(n);
  }

  while (vocab.size() < vocab_size) {
    std::map<std::pair<TokenId, TokenId>, std::size_t> counts;
    for (std::size_t k = 0; k < seqs.size(); ++k)
      for (std::size_t i = 0; i + 1 < seqs[k].size(); ++i) counts[{seqs[k][i], seqs[k][i + 1]}] += mult[k];
    std::pair<TokenId, TokenId> best{-1, -1};
    std::size_t best_count = 0;
    for (const auto& [pair, n] : counts) {
      if (n < best_count) continue;
      if (n > best_count || std::pair(vocab.token_bytes(pair.first), vocab.token_bytes(pair.second)) <
                                std::pair(vocab.token_bytes(best.first), vocab.token_bytes(best.second))) {
        best = pair;
        best_count = n;
      }
    }
    if (best_count < 2) break;
    const TokenId merged = vocab.add_merge(best.first, best.second);
    for (auto& s : seqs) {
      std::vector<TokenId> next;
      next.reserve(s.size());
      for (std::size_t i = 0; i < s.size();) {
        if (i + 1 < s.size() && s[i] == best.first && s[i + 1] == best.second) {
          next.push_back(merged);
          i += 2;
        } else {
          next.push_back(s[i++]);
        }
      }
      s.swap(next);
    }
  }
  return vocab;
}

}  // namespace dualpipe
