// SPDX-License-Identifier: Apache-2.0

// End-to-end plumbing shared by the CLI and the acceptance harness:
// synthetic corpora, vocabularies, batch decoding, evaluation and sweeps.

#pragma once

#include <map>
#include <thread>

#include "dualpipe/decode/selection.hpp"
#include "dualpipe/eval/cer.hpp"
#include "dualpipe/train/trainer.hpp"

namespace dualpipe {

struct SynthConfig {
  std::vector<std::string> existing{"xa", "xb"};
  std::vector<std::string> added{"na", "nb"};
  std::size_t utts_per_language = 400;
  std::uint64_t seed = 7;
  LanguageParams language;
  DatasetParams dataset;
};

inline void to_json(nlohmann::json& j, const LanguageParams& p) {
  j = {{"feat_dim", p.feat_dim},         {"inventory_size", p.inventory_size}, {"n_words", p.n_words},
       {"word_len_min", p.word_len_min}, {"word_len_max", p.word_len_max},     {"dur_min", p.dur_min},
       {"dur_max", p.dur_max},           {"noise_sigma", p.noise_sigma},       {"proto_scale", p.proto_scale},
       {"pool_seed", p.pool_seed}};
}
inline void from_json(const nlohmann::json& j, LanguageParams& p) {
  const LanguageParams d;
  p.feat_dim = j.value("feat_dim", d.feat_dim);
  p.inventory_size = j.value("inventory_size", d.inventory_size);
  p.n_words = j.value("n_words", d.n_words);
  p.word_len_min = j.value("word_len_min", d.word_len_min);
  p.word_len_max = j.value("word_len_max", d.word_len_max);
  p.dur_min = j.value("dur_min", d.dur_min);
  p.dur_max = j.value("dur_max", d.dur_max);
  p.noise_sigma = j.value("noise_sigma", d.noise_sigma);
  p.proto_scale = j.value("proto_scale", d.proto_scale);
  p.pool_seed = j.value("pool_seed", d.pool_seed);
}
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DatasetParams, words_min, words_max, train_frac, dev_frac)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SynthConfig, existing, added, utts_per_language, seed, language,
                                                dataset)

struct Corpus {
  std::vector<std::string> existing, added;
  std::map<std::string, SyntheticLanguage> languages;
  std::map<std::string, DatasetSplits> splits;

  /// Concatenation of one split over the given languages, in list order.
  std::vector<Utterance> gather(const std::vector<std::string>& langs, const std::string& split) const {
    std::vector<Utterance> out;
    for (const auto& l : langs) {
      const auto& s = splits.at(l);
      const auto& src = split == "train" ? s.train : split == "dev" ? s.dev : s.test;
      out.insert(out.end(), src.begin(), src.end());
    }
    return out;
  }
};

inline Corpus make_corpus(const SynthConfig& cfg) {
  Corpus c;
  c.existing = cfg.existing;
  c.added = cfg.added;
  std::size_t slot = 0;
  for (const auto* group : {&cfg.existing, &cfg.added})
    for (const auto& code : *group) {
      LanguageParams p = cfg.language;
      p.code = code;
      p.slot = slot++;
      auto lang = gen_language(Rng(cfg.seed).derive(string_key(code)).next_u64(), p);
      c.splits[code] = gen_dataset(lang, cfg.utts_per_language, cfg.seed, cfg.dataset);
      c.languages.emplace(code, std::move(lang));
    }
  return c;
}

inline BpeVocab build_vocab(const std::vector<Utterance>& train, const std::vector<std::string>& languages,
                            std::size_t vocab_size) {
  std::vector<std::string> lines;
  for (const auto& u : train) lines.push_back(u.text);
  return train_bpe(lines, vocab_size, languages);
}

/// Runs `fn(i)` for i in [0, n) on up to `threads` workers.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::min(std::max<std::size_t>(threads, 1), std::max<std::size_t>(n, 1));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errs(threads);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += threads) fn(i);
      } catch (...) {
        errs[t] = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errs)
    if (e) std::rethrow_exception(e);
}

enum class DecodeMode { Primary, Secondary, Auto };

inline DecodeMode parse_decode_mode(const std::string& s) {
  if (s == "primary") return DecodeMode::Primary;
  if (s == "secondary") return DecodeMode::Secondary;
  if (s == "auto") return DecodeMode::Auto;
  throw ConfigError("unknown decode mode '" + s + "'");
}

inline DecodeRecord primary_record(const BaseModel<float>& base, const Utterance& u, const DecodeOptions& opt) {
  const Tensor<float> enc = base.encode_primary(u.features);
  const auto sm = primary_step_model(base, enc);
  const auto pv = base.vocab().prompt();
  DecodeRecord r{u.utt_id, u.lang, DecoderKind::Primary, {}, {}, {}};
  r.diag.s_p = best_tag(base.vocab(), prime(sm, pv).second).first;
  auto t = to_transcript(base.vocab(), beam_search(sm, pv, opt.beam, opt.max_len).front());
  r.predicted_lang = t.language;
  r.transcript = t.text;
  r.diag.a_p = t.hyp.average();
  return r;
}

inline DecodeRecord secondary_record(const DualPipelineModel<float>& model, const Utterance& u,
                                     const DecodeOptions& opt) {
  const Tensor<float> enc = model.encode_secondary(u.features);
  const auto sm = secondary_step_model(model, enc);
  const auto pv = model.vocab().prompt();
  DecodeRecord r{u.utt_id, u.lang, DecoderKind::Secondary, {}, {}, {}};
  r.diag.s_s = best_tag(model.vocab(), prime(sm, pv).second).first;
  auto t = to_transcript(model.vocab(), beam_search(sm, pv, opt.beam, opt.max_len).front());
  r.predicted_lang = t.language;
  r.transcript = t.text;
  r.diag.a_s = t.hyp.average();
  return r;
}

inline DecodeRecord auto_record(const DualPipelineModel<float>& model, const Utterance& u,
                                const SelectionPolicy& policy, const DecodeOptions& opt) {
  auto [prim, sec] = model.encode_dual(u.features);
  const auto ps = primary_step_model(model.base(), prim);
  const auto ss = secondary_step_model(model, sec);
  auto res = select_decoder(ps, model.base().vocab(), ss, model.vocab(), policy, opt);
  return {u.utt_id, u.lang, res.chosen, res.diag, res.transcript.language, res.transcript.text};
}

/// Decodes every utterance; output order follows input order.
inline std::vector<DecodeRecord> decode_set(const BaseModel<float>& base, const DualPipelineModel<float>* ext,
                                            const std::vector<Utterance>& utts, DecodeMode mode,
                                            const SelectionPolicy& policy, const DecodeOptions& opt,
                                            std::size_t threads = 0) {
  if (mode != DecodeMode::Primary && !ext) throw ConfigError("secondary/auto decoding needs an extension model");
  std::vector<DecodeRecord> out(utts.size());
  parallel_for(utts.size(), resolve_threads(threads), [&](std::size_t i) {
    switch (mode) {
      case DecodeMode::Primary: out[i] = primary_record(base, utts[i], opt); break;
      case DecodeMode::Secondary: out[i] = secondary_record(*ext, utts[i], opt); break;
      case DecodeMode::Auto: out[i] = auto_record(*ext, utts[i], policy, opt); break;
    }
  });
  return out;
}

inline std::vector<TextRecord> reference_records(const std::vector<Utterance>& utts) {
  std::vector<TextRecord> r;
  for (const auto& u : utts) r.push_back({u.utt_id, u.lang, u.text});
  return r;
}

inline std::vector<TextRecord> hypothesis_records(const std::vector<DecodeRecord>& recs) {
  std::vector<TextRecord> r;
  for (const auto& d : recs) r.push_back({d.utt_id, d.predicted_lang, d.transcript});
  return r;
}

inline EvalReport evaluate_decodes(const std::vector<Utterance>& refs, const std::vector<DecodeRecord>& hyps) {
  return evaluate(reference_records(refs), hypothesis_records(hyps));
}

struct SweepRow {
  std::size_t value = 0;
  ParamCount params;
  double avg_cer = 0;
};

enum class SweepAxis { Rank, StartLayer };

inline SweepAxis parse_sweep_axis(const std::string& s) {
  if (s == "rank") return SweepAxis::Rank;
  if (s == "start-layer" || s == "start_layer") return SweepAxis::StartLayer;
  throw ConfigError("unknown sweep axis '" + s + "'");
}

/// extend + secondary decode + evaluate for each value on the axis.
inline std::vector<SweepRow> sweep(std::shared_ptr<const BaseModel<float>> base, const BpeVocab& secondary_vocab,
                                   const std::vector<Utterance>& train, const std::vector<Utterance>& test,
                                   ExtensionConfig ext, const TrainConfig& tc, SweepAxis axis,
                                   const std::vector<std::size_t>& values, const DecodeOptions& opt,
                                   const std::function<void(const SweepRow&)>& on_row = {}) {
  std::vector<SweepRow> rows;
  for (std::size_t v : values) {
    ExtensionConfig e = ext;
    (axis == SweepAxis::Rank ? e.rank : e.start_layer) = v;
    e.secondary_vocab = secondary_vocab.size();
    auto model = extend(base, e, secondary_vocab, train, tc);
    const auto recs = decode_set(*base, &model, test, DecodeMode::Secondary, {}, opt);
    SweepRow row{v, count_additional_params(base->config(), e), evaluate_decodes(test, recs).macro_cer};
    if (on_row) on_row(row);
    rows.push_back(row);
  }
  return rows;
}

inline std::string sweep_csv(const std::vector<SweepRow>& rows, SweepAxis axis) {
  std::ostringstream os;
  os << (axis == SweepAxis::Rank ? "rank" : "start_layer") << ",params_lora,params_decoder,params_layernorm,params,avg_cer\n";
  os.precision(6);
  for (const auto& r : rows)
    os << r.value << ',' << r.params.lora << ',' << r.params.decoder << ',' << r.params.layernorm << ','
       << r.params.total() << ',' << std::fixed << r.avg_cer << std::defaultfloat << '\n';
  return os.str();
}

}  // namespace dualpipe
