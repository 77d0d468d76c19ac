// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>

#include <json.hpp>

#include "dualpipe/io/files.hpp"
#include "dualpipe/train/experiment.hpp"

namespace dualpipe {

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SelectionPolicy, tau, beta)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DecodeOptions, beam, max_len)

/// Everything a CLI invocation can configure. Flags override file values.
struct RunConfig {
  std::uint64_t seed = 1;
  std::size_t vocab_size = 300;
  SynthConfig synth;
  ModelConfig model;
  TrainConfig base_train;
  ExtensionConfig extension;
  TrainConfig train;
  SelectionPolicy policy;
  DecodeOptions decode;

  void validate() const {
    model.validate();
    extension.validate(model);
    base_train.validate();
    train.validate();
    if (policy.tau < 0) throw ConfigError("policy.tau must be non-negative");
    if (decode.beam == 0) throw ConfigError("decode.beam must be at least 1");
    if (decode.max_len == 0) throw ConfigError("decode.max_len must be at least 1");
    if (vocab_size < BpeVocab::kByteTokens + BpeVocab::kCoreSpecials.size())
      throw ConfigError("vocab_size must cover bytes and special tokens");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RunConfig, seed, vocab_size, synth, model, base_train, extension, train,
                                                policy, decode)

/// Throws ConfigError naming the first key of `given` that the schema
/// (a serialized default object) does not have.
inline void reject_unknown_keys(const nlohmann::json& given, const nlohmann::json& schema, const std::string& path = "") {
  if (!given.is_object()) return;
  if (!schema.is_object()) throw ConfigError("config key '" + path + "' must not be an object");
  for (const auto& [key, value] : given.items()) {
    const std::string where = path.empty() ? key : path + "." + key;
    if (!schema.contains(key)) throw ConfigError("unknown config key '" + where + "'");
    reject_unknown_keys(value, schema.at(key), where);
  }
}

inline RunConfig parse_run_config(const nlohmann::json& j) {
  reject_unknown_keys(j, nlohmann::json(RunConfig{}));
  RunConfig c;
  try {
    c = j.get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_run_config(j);
}

}  // namespace dualpipe
