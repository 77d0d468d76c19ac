// SPDX-License-Identifier: Apache-2.0

// Checkpoint directory layout:
//   manifest.json  {format, digest, meta, tensors: [{name, shape, dtype,
//                   offset, nbytes, digest}]}
//   weights.bin    little-endian f32 tensors concatenated in manifest order
// The top-level digest is SHA-256 over every tensor's name, shape and bytes in
// order, so any change to any stored weight changes it.

#pragma once

#include <openssl/evp.h>

#include <filesystem>
#include <memory>
#include <string>
#include <string_view>

#include <json.hpp>

#include "dualpipe/core/parameter.hpp"
#include "dualpipe/io/files.hpp"

namespace dualpipe {

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new(), &EVP_MD_CTX_free) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1) throw std::runtime_error("sha256 init failed");
  }
  void update(std::string_view bytes) {
    if (EVP_DigestUpdate(ctx_.get(), bytes.data(), bytes.size()) != 1) throw std::runtime_error("sha256 update failed");
  }
  std::string hex() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx_.get(), md, &len) != 1) throw std::runtime_error("sha256 final failed");
    static const char* digits = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
      out.push_back(digits[md[i] >> 4]);
      out.push_back(digits[md[i] & 15]);
    }
    return out;
  }

 private:
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

inline std::string sha256_hex(std::string_view bytes) {
  Sha256 h;
  h.update(bytes);
  return h.hex();
}

namespace detail {
inline std::string tensor_bytes(const Tensor<float>& t) {
  std::string out;
  out.reserve(4 * t.size());
  for (float v : t.vec()) io::put_f32(out, v);
  return out;
}
}  // namespace detail

/// Digest over names, shapes and f32 bytes of every parameter, in order.
inline std::string params_digest(const ParamStore<float>& store) {
  Sha256 h;
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& p = store[i];
    std::string header = p.name;
    header.push_back('\0');
    for (auto d : p.value.shape()) io::put_u32(header, static_cast<std::uint32_t>(d));
    h.update(header);
    h.update(detail::tensor_bytes(p.value));
  }
  return h.hex();
}

struct Checkpoint {
  ParamStore<float> params;
  nlohmann::json meta;
  std::string digest;
};

inline void save_checkpoint(const std::filesystem::path& dir, const ParamStore<float>& store,
                            const nlohmann::json& meta) {
  std::filesystem::create_directories(dir);
  std::string blob;
  auto tensors = nlohmann::json::array();
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& p = store[i];
    const std::string bytes = detail::tensor_bytes(p.value);
    tensors.push_back({{"name", p.name},
                       {"shape", p.value.shape()},
                       {"dtype", "f32"},
                       {"offset", blob.size()},
                       {"nbytes", bytes.size()},
                       {"digest", sha256_hex(bytes)}});
    blob += bytes;
  }
  nlohmann::json manifest{
      {"format", "dualpipe-ckpt-1"}, {"digest", params_digest(store)}, {"meta", meta}, {"tensors", tensors}};
  io::write_atomic(dir / "weights.bin", blob);
  io::write_atomic(dir / "manifest.json", manifest.dump(1) + "\n");
}

/// Loads and verifies every per-tensor digest and the top-level digest.
/// Loaded parameters are marked frozen; callers opt tensors back in.
inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(io::read_file(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed manifest in " + dir.string() + ": " + e.what());
  }
  const std::string blob = io::read_file(dir / "weights.bin");
  Checkpoint ck;
  try {
    if (manifest.at("format") != "dualpipe-ckpt-1") throw FormatError("unsupported checkpoint format");
    for (const auto& t : manifest.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      const auto shape = t.at("shape").get<Shape>();
      const auto offset = t.at("offset").get<std::size_t>();
      const auto nbytes = t.at("nbytes").get<std::size_t>();
      if (t.at("dtype") != "f32") throw FormatError("tensor " + name + ": unsupported dtype");
      if (nbytes != 4 * shape_numel(shape) || offset + nbytes > blob.size())
        throw FormatError("tensor " + name + ": size/offset inconsistent with weights.bin");
      const std::string_view bytes(blob.data() + offset, nbytes);
      if (sha256_hex(bytes) != t.at("digest").get<std::string>())
        throw DigestMismatch("tensor " + name + ": digest mismatch");
      Tensor<float> value(shape);
      for (std::size_t i = 0; i < value.size(); ++i) value[i] = io::get_f32(bytes, 4 * i);
      value.check_finite("checkpoint tensor " + name);
      ck.params.add(name, std::move(value), false);
    }
    ck.meta = manifest.at("meta");
    ck.digest = manifest.at("digest").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed manifest in " + dir.string() + ": " + e.what());
  }
  if (params_digest(ck.params) != ck.digest) throw DigestMismatch("checkpoint digest mismatch in " + dir.string());
  return ck;
}

}  // namespace dualpipe
