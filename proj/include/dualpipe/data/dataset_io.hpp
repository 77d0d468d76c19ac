// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dualpipe/data/synth.hpp"
#include "dualpipe/io/files.hpp"

namespace dualpipe {

/// Feature file: "FEA1", u32 n_frames, u32 feat_dim, little-endian f32 data.
inline std::string encode_features(const Tensor<float>& f) {
  std::string out = "FEA1";
  io::put_u32(out, static_cast<std::uint32_t>(f.rows()));
  io::put_u32(out, static_cast<std::uint32_t>(f.cols()));
  out.reserve(out.size() + 4 * f.size());
  for (float v : f.vec()) io::put_f32(out, v);
  return out;
}

inline Tensor<float> decode_features(std::string_view bytes) {
  if (bytes.size() < 12 || bytes.substr(0, 4) != "FEA1") throw FormatError("feature file: bad magic");
  const std::uint32_t n = io::get_u32(bytes, 4);
  const std::uint32_t d = io::get_u32(bytes, 8);
  if (bytes.size() != 12 + 4ULL * n * d) throw FormatError("feature file: size does not match header");
  Tensor<float> f = Tensor<float>::matrix(n, d);
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = io::get_f32(bytes, 12 + 4 * i);
  f.check_finite("feature file");
  return f;
}

inline void write_features(const std::filesystem::path& path, const Tensor<float>& f) {
  io::write_atomic(path, encode_features(f));
}

inline Tensor<float> read_features(const std::filesystem::path& path) { return decode_features(io::read_file(path)); }

/// Writes `<dir>/<name>.jsonl` ({utt_id, lang, text, feature_file}) and one
/// feature file per utterance under `<dir>/feats/`.
inline void write_manifest(const std::filesystem::path& dir, const std::string& name,
                           const std::vector<Utterance>& utts) {
  std::string lines;
  for (const auto& u : utts) {
    const std::string rel = "feats/" + u.utt_id + ".fea";
    write_features(dir / rel, u.features);
    nlohmann::json j{{"utt_id", u.utt_id}, {"lang", u.lang}, {"text", u.text}, {"feature_file", rel}};
    lines += j.dump() + "\n";
  }
  io::write_atomic(dir / (name + ".jsonl"), lines);
}

/// Reads a manifest; relative feature paths resolve against the manifest's directory.
inline std::vector<Utterance> read_manifest(const std::filesystem::path& manifest) {
  std::ifstream f(manifest);
  if (!f) throw FormatError("cannot read manifest " + manifest.string());
  std::vector<Utterance> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      Utterance u;
      u.utt_id = j.at("utt_id").get<std::string>();
      u.lang = j.at("lang").get<std::string>();
      u.text = j.at("text").get<std::string>();
      std::filesystem::path feat = j.at("feature_file").get<std::string>();
      if (feat.is_relative()) feat = manifest.parent_path() / feat;
      u.features = read_features(feat);
      out.push_back(std::move(u));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(manifest.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace dualpipe
