// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <functional>
#include <limits>
#include <numeric>
#include <vector>

#include "dualpipe/core/ops.hpp"
#include "dualpipe/tokenizer/bpe.hpp"

namespace dualpipe {

struct Hypothesis {
  std::vector<TokenId> tokens;  // generated tokens only, prompt excluded
  std::vector<double> logprobs;
  double total = 0.0;
  bool finished = false;
  bool truncated = false;  // max_len hit before any hypothesis finished

  double average() const { return tokens.empty() ? 0.0 : total / static_cast<double>(tokens.size()); }
};

/// Incremental decoder: `feed` consumes one token and returns the
/// log-distribution over the next one.
template <typename State>
struct StepModel {
  std::function<State()> initial;
  std::function<std::vector<double>(State&, TokenId)> feed;
  TokenId eot = 0;
};

/// Row of logits to log-probabilities in double.
template <typename T>
std::vector<double> log_softmax(const Tensor<T>& logits) {
  std::vector<double> out(logits.size());
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < logits.size(); ++i) m = std::max(m, static_cast<double>(logits[i]));
  double s = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) s += std::exp(static_cast<double>(logits[i]) - m);
  const double lse = m + std::log(s);
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = static_cast<double>(logits[i]) - lse;
  return out;
}

namespace detail {

template <typename State>
struct Beam {
  Hypothesis hyp;
  State state;
  std::vector<double> next;  // log-probs after the last token
};

/// Higher score first; equal scores fall back to the smaller token sequence.
inline bool ranks_before(const Hypothesis& a, const Hypothesis& b) {
  if (a.total != b.total) return a.total > b.total;
  return a.tokens < b.tokens;
}

}  // namespace detail

/// Runs the model over `prefix` and returns the state plus next-token log-probs.
template <typename State>
std::pair<State, std::vector<double>> prime(const StepModel<State>& model, std::span<const TokenId> prefix) {
  if (prefix.empty()) throw DimensionError("decoding prefix is empty");
  State s = model.initial();
  std::vector<double> lp;
  for (TokenId t : prefix) lp = model.feed(s, t);
  return {std::move(s), std::move(lp)};
}

/// Length-unnormalized beam search. Finished hypotheses stay in the beam
/// until better ones displace them. Returns the final beam, best first.
template <typename State>
std::vector<Hypothesis> beam_search(const StepModel<State>& model, std::span<const TokenId> prefix,
                                    std::size_t beam_size, std::size_t max_len) {
  if (beam_size == 0) throw ConfigError("beam_size must be at least 1");
  if (max_len == 0) throw ConfigError("max_len must be at least 1");
  auto [s0, lp0] = prime(model, prefix);
  std::vector<detail::Beam<State>> beam;
  beam.push_back({Hypothesis{}, std::move(s0), std::move(lp0)});

  for (std::size_t len = 0; len < max_len; ++len) {
    struct Cand {
      Hypothesis hyp;
      std::size_t parent;
      bool carried;
    };
    std::vector<Cand> cands;
    for (std::size_t b = 0; b < beam.size(); ++b) {
      const auto& cur = beam[b];
      if (cur.hyp.finished) {
        cands.push_back({cur.hyp, b, true});
        continue;
      }
      std::vector<std::size_t> idx(cur.next.size());
      std::iota(idx.begin(), idx.end(), 0);
      const std::size_t k = std::min(beam_size, idx.size());
      std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                        [&](std::size_t x, std::size_t y) {
                          if (cur.next[x] != cur.next[y]) return cur.next[x] > cur.next[y];
                          return x < y;
                        });
      for (std::size_t j = 0; j < k; ++j) {
        Hypothesis h = cur.hyp;
        const auto tok = static_cast<TokenId>(idx[j]);
        h.tokens.push_back(tok);
        h.logprobs.push_back(cur.next[idx[j]]);
        h.total += cur.next[idx[j]];
        h.finished = tok == model.eot;
        cands.push_back({std::move(h), b, false});
      }
    }
    std::stable_sort(cands.begin(), cands.end(),
                     [](const Cand& a, const Cand& b) { return detail::ranks_before(a.hyp, b.hyp); });
    if (cands.size() > beam_size) cands.resize(beam_size);

    std::vector<detail::Beam<State>> next;
    for (auto& c : cands) {
      if (c.carried) {
        next.push_back(beam[c.parent]);
        continue;
      }
      detail::Beam<State> nb{std::move(c.hyp), beam[c.parent].state, {}};
      if (!nb.hyp.finished && len + 1 < max_len) nb.next = model.feed(nb.state, nb.hyp.tokens.back());
      next.push_back(std::move(nb));
    }
    beam = std::move(next);
    if (std::all_of(beam.begin(), beam.end(), [](const auto& b) { return b.hyp.finished; })) break;
  }

  std::vector<Hypothesis> out;
  for (auto& b : beam) out.push_back(std::move(b.hyp));
  const bool any_finished = std::any_of(out.begin(), out.end(), [](const Hypothesis& h) { return h.finished; });
  if (!any_finished) {
    out.front().truncated = true;
    return out;
  }
  // finished hypotheses rank ahead of unfinished ones
  std::stable_partition(out.begin(), out.end(), [](const Hypothesis& h) { return h.finished; });
  return out;
}

}  // namespace dualpipe
