// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>

#include "dualpipe/core/rng.hpp"
#include "dualpipe/tokenizer/bpe.hpp"

using namespace dualpipe;

namespace {

const std::size_t kFloor = BpeVocab::kByteTokens + BpeVocab::kCoreSpecials.size();

std::string random_utf8(Rng& rng, std::size_t max_cps) {
  static const std::vector<std::pair<char32_t, char32_t>> ranges{
      {0x20, 0x7E}, {0xA0, 0x17F}, {0x391, 0x3C9}, {0x410, 0x44F}, {0x10D0, 0x10F0}, {0x4E00, 0x4E50}, {0x1F600, 0x1F64F}};
  std::string s;
  const auto n = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(max_cps)));
  for (std::size_t i = 0; i < n; ++i) {
    const auto& [lo, hi] = ranges[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(ranges.size()) - 1))];
    utf8::append(s, static_cast<char32_t>(rng.uniform_int(lo, hi)));
  }
  return s;
}

std::vector<std::string> sample_corpus() {
  return {"the cat sat on the mat", "the dog sat on the log", "ψυχή και σώμα", "кошка сидит на окне",
          "the cat and the dog", "ψυχή ψυχή", "кошка и собака"};
}

}  // namespace

TEST(Bpe, RepeatedLetterFirstMergeIsThePair) {
  // "aaaa" has three overlapping (a, a) pairs and nothing else
  const auto v = train_bpe({"aaaa"}, kFloor + 2, {});
  ASSERT_GE(v.merges().size(), 1u);
  EXPECT_EQ(v.merges()[0], std::make_pair(std::string("a"), std::string("a")));
  // after the first merge the line is [aa, aa]: one pair, below the count threshold
  EXPECT_EQ(v.merges().size(), 1u);
  EXPECT_EQ(v.encode("aaaa").size(), 2u);
}

TEST(Bpe, FloorVocabLearnsNoMerges) {
  const auto v = train_bpe(sample_corpus(), kFloor + 2, {"xx", "yy"});
  EXPECT_TRUE(v.merges().empty());
  EXPECT_EQ(v.size(), kFloor + 2);
}

TEST(Bpe, BelowFloorAndEmptyCorpusAreErrors) {
  EXPECT_THROW(train_bpe({"abc"}, kFloor - 1, {}), ConfigError);
  EXPECT_THROW(train_bpe({}, 400, {}), ConfigError);
}

TEST(Bpe, CountTiesBreakLexicographically) {
  const auto v = train_bpe({"cd", "ab", "cd", "ab"}, kFloor + 1, {});
  ASSERT_EQ(v.merges().size(), 1u);
  EXPECT_EQ(v.merges()[0].first, "a");
  EXPECT_EQ(v.merges()[0].second, "b");
}

TEST(Bpe, MostFrequentPairWins) {
  const auto v = train_bpe({"xyxyxy zq zq"}, kFloor + 1, {});
  ASSERT_EQ(v.merges().size(), 1u);
  EXPECT_EQ(v.merges()[0], std::make_pair(std::string("x"), std::string("y")));
}

TEST(Bpe, EmptyStringAndRawBytes) {
  const BpeVocab v({"xx"});
  EXPECT_TRUE(v.encode("").empty());
  EXPECT_EQ(v.decode({}), "");
  const auto e = v.encode("é");
  ASSERT_EQ(e.size(), 2u);
  EXPECT_EQ(e[0], 0xC3);
  EXPECT_EQ(e[1], 0xA9);
}

TEST(Bpe, RoundtripFuzzLengthBoundAndNoSpecials) {
  const auto v = train_bpe(sample_corpus(), 400, {"aa", "bb"});
  EXPECT_GT(v.merges().size(), 10u);
  Rng rng(99);
  for (int i = 0; i < 500; ++i) {
    const std::string s = i % 3 == 0 ? sample_corpus()[static_cast<std::size_t>(i) % 7] : random_utf8(rng, 24);
    const auto ids = v.encode(s);
    ASSERT_EQ(v.decode(ids), s);
    ASSERT_LE(ids.size(), s.size());
    for (TokenId id : ids) ASSERT_FALSE(v.is_special(id));
    ASSERT_EQ(v.encode(s), ids);
  }
}

TEST(Bpe, SpecialLayoutAndPrompt) {
  const BpeVocab v({"aa", "bb"});
  EXPECT_EQ(v.sot(), 256);
  EXPECT_EQ(v.language_tag("aa"), static_cast<TokenId>(kFloor));
  EXPECT_EQ(v.language_tag("bb"), static_cast<TokenId>(kFloor + 1));
  EXPECT_TRUE(v.is_language_tag(v.language_tag("bb")));
  EXPECT_FALSE(v.is_language_tag(v.eot()));
  EXPECT_EQ(v.tag_language(v.language_tag("aa")), "aa");
  EXPECT_EQ(v.prompt(), (std::vector<TokenId>{v.sot(), v.transcribe(), v.notimestamps()}));
  EXPECT_THROW(v.language_tag("zz"), ConfigError);
}

TEST(Bpe, DecodeRejectsUnknownIdsSpecialsAndBrokenUtf8) {
  const auto v = train_bpe(sample_corpus(), 300, {"aa"});
  EXPECT_ANY_THROW(v.decode({static_cast<TokenId>(v.size())}));
  EXPECT_ANY_THROW(v.decode({-1}));
  EXPECT_THROW(v.decode({v.eot()}), FormatError);
  EXPECT_EQ(v.decode({'h', v.eot(), 'i'}, true), "hi");
  EXPECT_THROW(v.decode({0xC3}), FormatError);
  EXPECT_EQ(v.decode_lossy({'a', 0xC3}), "a\xEF\xBF\xBD");
}

TEST(Bpe, JsonRoundtripPreservesEncoding) {
  const auto v = train_bpe(sample_corpus(), 350, {"aa", "bb"});
  const auto path = std::filesystem::temp_directory_path() / "dualpipe_vocab_test.json";
  v.save(path);
  const auto w = BpeVocab::load(path);
  std::filesystem::remove(path);
  EXPECT_EQ(w.size(), v.size());
  EXPECT_EQ(w.merges(), v.merges());
  EXPECT_EQ(w.specials(), v.specials());
  for (const auto& line : sample_corpus()) EXPECT_EQ(w.encode(line), v.encode(line));
}

TEST(Bpe, MalformedJsonIsFormatError) {
  nlohmann::json j = train_bpe(sample_corpus(), 300, {"aa"}).to_json();
  j["specials"]["<|aa|>"] = 3;
  EXPECT_THROW(BpeVocab::from_json(j), FormatError);
  EXPECT_THROW(BpeVocab::from_json(nlohmann::json::object()), FormatError);
}
