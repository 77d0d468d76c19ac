// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <unicode/locid.h>
#include <unicode/normalizer2.h>
#include <unicode/uchar.h>
#include <unicode/unistr.h>

#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dualpipe/core/errors.hpp"
#include "dualpipe/core/utf8.hpp"

namespace dualpipe {

/// NFKC, lowercase, drop punctuation and symbols, collapse whitespace, trim.
inline std::string normalize_basic(const std::string& text) {
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* nfkc = icu::Normalizer2::getNFKCInstance(status);
  if (U_FAILURE(status)) throw std::runtime_error("ICU NFKC unavailable");
  icu::UnicodeString s = nfkc->normalize(icu::UnicodeString::fromUTF8(utf8::sanitize(text)), status);
  if (U_FAILURE(status)) throw std::runtime_error("ICU normalization failed");
  s.toLower(icu::Locale::getRoot());

  std::u32string out;
  bool pending_space = false;
  for (int32_t i = 0; i < s.length();) {
    const UChar32 c = s.char32At(i);
    i += U16_LENGTH(c);
    const int8_t cat = u_charType(c);
    const uint32_t mask = U_MASK(cat);
    if (mask & (U_GC_P_MASK | U_GC_S_MASK)) continue;
    if (u_isUWhiteSpace(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(U' ');
    pending_space = false;
    out.push_back(static_cast<char32_t>(c));
  }
  return utf8::encode(out);
}

struct EditCounts {
  std::size_t sub = 0, del = 0, ins = 0;
  std::size_t distance() const { return sub + del + ins; }
};

/// Levenshtein alignment over code points with unit costs; on equal cost,
/// substitution is preferred, then deletion.
inline EditCounts edit_counts(const std::u32string& ref, const std::u32string& hyp) {
  const std::size_t n = ref.size(), m = hyp.size();
  std::vector<std::size_t> d((n + 1) * (m + 1));
  auto at = [&](std::size_t i, std::size_t j) -> std::size_t& { return d[i * (m + 1) + j]; };
  for (std::size_t i = 0; i <= n; ++i) at(i, 0) = i;
  for (std::size_t j = 0; j <= m; ++j) at(0, j) = j;
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j)
      at(i, j) = std::min({at(i - 1, j - 1) + (ref[i - 1] != hyp[j - 1]), at(i - 1, j) + 1, at(i, j - 1) + 1});
  EditCounts e;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && at(i, j) == at(i - 1, j - 1) + (ref[i - 1] != hyp[j - 1])) {
      e.sub += ref[i - 1] != hyp[j - 1];
      --i;
      --j;
    } else if (i > 0 && at(i, j) == at(i - 1, j) + 1) {
      ++e.del;
      --i;
    } else {
      ++e.ins;
      --j;
    }
  }
  return e;
}

struct CerResult {
  double value = 0;
  EditCounts edits;
  std::size_t ref_len = 0;
  bool anomalous = false;  // empty reference with a non-empty hypothesis
};

/// Character error rate over code points. Empty reference: 0 when the
/// hypothesis is empty too, else |hyp| (flagged).
inline CerResult cer_detail(const std::string& ref, const std::string& hyp) {
  const auto r = utf8::decode(ref), h = utf8::decode(hyp);
  CerResult c;
  c.edits = edit_counts(r, h);
  c.ref_len = r.size();
  if (r.empty()) {
    c.value = static_cast<double>(h.size());
    c.anomalous = !h.empty();
  } else {
    c.value = static_cast<double>(c.edits.distance()) / static_cast<double>(r.size());
  }
  return c;
}

inline double cer(const std::string& ref, const std::string& hyp) { return cer_detail(ref, hyp).value; }

struct TextRecord {
  std::string utt_id;
  std::string lang;
  std::string text;
};

struct LanguageScore {
  double cer = 0;
  std::size_t utterances = 0;
  std::size_t ref_chars = 0;
  EditCounts edits;
  std::size_t anomalous = 0;
};

struct EvalReport {
  std::map<std::string, LanguageScore> per_language;
  double macro_cer = 0;
  std::size_t utterances = 0;
};

/// Per-language CER pools edits over all of that language's utterances;
/// the headline number is the unweighted mean over languages.
inline EvalReport evaluate(const std::vector<TextRecord>& refs, const std::vector<TextRecord>& hyps) {
  std::map<std::string, const TextRecord*> by_id;
  for (const auto& h : hyps)
    if (!by_id.emplace(h.utt_id, &h).second) throw FormatError("duplicate hypothesis id " + h.utt_id);
  std::vector<std::string> missing;
  std::set<std::string> ref_ids;
  for (const auto& r : refs) {
    if (!by_id.count(r.utt_id)) missing.push_back(r.utt_id);
    ref_ids.insert(r.utt_id);
  }
  std::vector<std::string> extra;
  for (const auto& h : hyps)
    if (!ref_ids.count(h.utt_id)) extra.push_back(h.utt_id);
  if (!missing.empty() || !extra.empty()) {
    std::string msg = "reference/hypothesis ids differ;";
    if (!missing.empty()) {
      msg += " missing hypotheses:";
      for (const auto& id : missing) msg += " " + id;
    }
    if (!extra.empty()) {
      msg += " hypotheses without reference:";
      for (const auto& id : extra) msg += " " + id;
    }
    throw FormatError(msg);
  }

  EvalReport rep;
  for (const auto& r : refs) {
    const auto c = cer_detail(normalize_basic(r.text), normalize_basic(by_id.at(r.utt_id)->text));
    auto& s = rep.per_language[r.lang];
    ++s.utterances;
    s.ref_chars += c.ref_len;
    s.edits.sub += c.edits.sub;
    s.edits.del += c.edits.del;
    s.edits.ins += c.edits.ins;
    s.anomalous += c.anomalous;
    ++rep.utterances;
  }
  double sum = 0;
  for (auto& [lang, s] : rep.per_language) {
    s.cer = s.ref_chars ? static_cast<double>(s.edits.distance()) / static_cast<double>(s.ref_chars)
                        : static_cast<double>(s.edits.distance());
    sum += s.cer;
  }
  if (!rep.per_language.empty()) rep.macro_cer = sum / static_cast<double>(rep.per_language.size());
  return rep;
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json langs = nlohmann::json::object();
  for (const auto& [lang, s] : r.per_language)
    langs[lang] = {{"cer", s.cer},           {"utterances", s.utterances}, {"ref_chars", s.ref_chars},
                   {"substitutions", s.edits.sub}, {"deletions", s.edits.del}, {"insertions", s.edits.ins},
                   {"anomalous", s.anomalous}};
  return {{"macro_cer", r.macro_cer}, {"utterances", r.utterances}, {"languages", langs}};
}

inline std::string format_table(const EvalReport& r) {
  std::ostringstream os;
  os << std::left << std::setw(10) << "lang" << std::right << std::setw(8) << "utts" << std::setw(10) << "CER%"
     << std::setw(8) << "S" << std::setw(8) << "D" << std::setw(8) << "I" << '\n';
  os << std::fixed << std::setprecision(2);
  for (const auto& [lang, s] : r.per_language)
    os << std::left << std::setw(10) << lang << std::right << std::setw(8) << s.utterances << std::setw(10)
       << 100.0 * s.cer << std::setw(8) << s.edits.sub << std::setw(8) << s.edits.del << std::setw(8) << s.edits.ins
       << '\n';
  os << std::left << std::setw(10) << "average" << std::right << std::setw(8) << r.utterances << std::setw(10)
     << 100.0 * r.macro_cer << '\n';
  return os.str();
}

}  // namespace dualpipe
