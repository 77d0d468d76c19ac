// SPDX-License-Identifier: Apache-2.0

// Decoder adapters for beam search and the two-stage routing policy between
// the primary and the secondary decoder.

#pragma once

#include <memory>
#include <string>

#include <json.hpp>

#include "dualpipe/decode/beam.hpp"
#include "dualpipe/model/dual.hpp"

namespace dualpipe {

template <typename T>
struct PrimaryDecodeState {
  std::shared_ptr<const typename BaseModel<T>::CrossCache> cross;
  typename BaseModel<T>::DecoderState self;
};

template <typename T>
StepModel<PrimaryDecodeState<T>> primary_step_model(const BaseModel<T>& model, const Tensor<T>& enc_out) {
  auto cross = std::make_shared<const typename BaseModel<T>::CrossCache>(model.cross_cache(enc_out));
  StepModel<PrimaryDecodeState<T>> m;
  m.initial = [&model, cross] { return PrimaryDecodeState<T>{cross, model.initial_state()}; };
  m.feed = [&model](PrimaryDecodeState<T>& s, TokenId t) {
    return log_softmax(model.decoder_step(*s.cross, s.self, t));
  };
  m.eot = model.vocab().eot();
  return m;
}

template <typename T>
struct SecondaryDecodeState {
  std::shared_ptr<const typename DualPipelineModel<T>::LasMemory> memory;
  typename DualPipelineModel<T>::LasState las;
};

template <typename T>
StepModel<SecondaryDecodeState<T>> secondary_step_model(const DualPipelineModel<T>& model, const Tensor<T>& sec_out) {
  auto mem = std::make_shared<const typename DualPipelineModel<T>::LasMemory>(model.memory(sec_out));
  StepModel<SecondaryDecodeState<T>> m;
  m.initial = [&model, mem] { return SecondaryDecodeState<T>{mem, model.initial_state()}; };
  m.feed = [&model](SecondaryDecodeState<T>& s, TokenId t) {
    auto r = model.las_step(*s.memory, t, s.las);
    s.las = std::move(r.state);
    return log_softmax(r.logits);
  };
  m.eot = model.vocab().eot();
  return m;
}

/// Best hypothesis turned into text: language from the leading tag, the rest
/// detokenized with specials dropped.
struct Transcript {
  std::string language;
  std::string text;
  Hypothesis hyp;
};

inline Transcript to_transcript(const BpeVocab& vocab, Hypothesis hyp) {
  Transcript t;
  std::vector<TokenId> body;
  for (std::size_t i = 0; i < hyp.tokens.size(); ++i) {
    const TokenId id = hyp.tokens[i];
    if (i == 0 && vocab.is_language_tag(id)) t.language = vocab.tag_language(id);
    else if (!vocab.is_special(id)) body.push_back(id);
  }
  t.text = vocab.decode_lossy(body);
  t.hyp = std::move(hyp);
  return t;
}

/// Highest log-prob among the vocabulary's language tags.
inline std::pair<double, TokenId> best_tag(const BpeVocab& vocab, const std::vector<double>& logprobs) {
  double best = -std::numeric_limits<double>::infinity();
  TokenId arg = -1;
  for (TokenId id : vocab.language_tags())
    if (logprobs.at(static_cast<std::size_t>(id)) > best) {
      best = logprobs[static_cast<std::size_t>(id)];
      arg = id;
    }
  if (arg < 0) throw ConfigError("vocabulary has no language tags");
  return {best, arg};
}

struct SelectionPolicy {
  double tau = 0.5;
  double beta = 0.0;
};

enum class DecoderKind { Primary, Secondary };

inline const char* to_string(DecoderKind k) { return k == DecoderKind::Primary ? "primary" : "secondary"; }

struct SelectionDiagnostics {
  int stage = 1;
  double s_p = 0, s_s = 0;
  std::optional<double> a_p, a_s;
  bool early_exit = false;
};

struct SelectionResult {
  DecoderKind chosen = DecoderKind::Primary;
  Transcript transcript;
  SelectionDiagnostics diag;
};

/// Stage 1 on tag scores; stage 2 on average per-token log-probs (tag and
/// eot included, prompt excluded) with `beta` added to the secondary side.
inline bool stage2_prefers_secondary(double a_p, double a_s, double beta) { return a_s + beta > a_p; }

/// Decision rule alone. Returns nullopt when stage 1 does not commit.
inline std::optional<DecoderKind> stage1_decision(double s_p, double s_s, double tau) {
  if (std::abs(s_p - s_s) >= tau) return s_s > s_p ? DecoderKind::Secondary : DecoderKind::Primary;
  return std::nullopt;
}

struct DecodeOptions {
  std::size_t beam = 5;
  std::size_t max_len = 96;
};

/// Runs the selection policy with two prepared decoders. A decoder that
/// fails is reported by name.
template <typename PS, typename SS>
SelectionResult select_decoder(const StepModel<PS>& primary, const BpeVocab& pvocab, const StepModel<SS>& secondary,
                               const BpeVocab& svocab, const SelectionPolicy& policy, const DecodeOptions& opt) {
  if (policy.tau < 0) throw ConfigError("tau must be non-negative");
  auto guarded = [](const char* who, auto&& fn) {
    try {
      return fn();
    } catch (const std::exception& e) {
      throw std::runtime_error(std::string(who) + " decoder failed: " + e.what());
    }
  };
  const auto pprompt = pvocab.prompt();
  const auto sprompt = svocab.prompt();
  const double s_p = guarded("primary", [&] { return best_tag(pvocab, prime(primary, pprompt).second).first; });
  const double s_s = guarded("secondary", [&] { return best_tag(svocab, prime(secondary, sprompt).second).first; });

  SelectionResult r;
  r.diag.s_p = s_p;
  r.diag.s_s = s_s;
  auto run_p = [&] {
    return guarded("primary", [&] { return beam_search(primary, pprompt, opt.beam, opt.max_len).front(); });
  };
  auto run_s = [&] {
    return guarded("secondary", [&] { return beam_search(secondary, sprompt, opt.beam, opt.max_len).front(); });
  };
  if (auto k = stage1_decision(s_p, s_s, policy.tau)) {
    r.chosen = *k;
    r.diag.stage = 1;
    r.diag.early_exit = true;
    r.transcript = *k == DecoderKind::Primary ? to_transcript(pvocab, run_p()) : to_transcript(svocab, run_s());
    return r;
  }
  Hypothesis hp = run_p();
  Hypothesis hs = run_s();
  r.diag.stage = 2;
  r.diag.a_p = hp.average();
  r.diag.a_s = hs.average();
  if (stage2_prefers_secondary(*r.diag.a_p, *r.diag.a_s, policy.beta)) {
    r.chosen = DecoderKind::Secondary;
    r.transcript = to_transcript(svocab, std::move(hs));
  } else {
    r.chosen = DecoderKind::Primary;
    r.transcript = to_transcript(pvocab, std::move(hp));
  }
  return r;
}

/// One line of decode output.
struct DecodeRecord {
  std::string utt_id;
  std::string lang;  // reference language, when known
  DecoderKind chosen = DecoderKind::Primary;
  SelectionDiagnostics diag;
  std::string predicted_lang;
  std::string transcript;
};

inline nlohmann::json to_json(const DecodeRecord& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"utt_id", r.utt_id},       {"chosen_decoder", to_string(r.chosen)},
          {"stage", r.diag.stage},    {"s_p", r.diag.s_p},
          {"s_s", r.diag.s_s},        {"a_p", opt(r.diag.a_p)},
          {"a_s", opt(r.diag.a_s)},   {"transcript", r.transcript},
          {"lang", r.predicted_lang}, {"text", r.transcript}};
}

}  // namespace dualpipe
