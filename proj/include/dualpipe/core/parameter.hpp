// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "dualpipe/core/errors.hpp"
#include "dualpipe/core/tensor.hpp"

namespace dualpipe {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  bool trainable = true;
  std::size_t index = 0;  // position in the owning store
};

/// Ordered, name-addressable collection of parameters. Addresses of stored
/// parameters are stable for the lifetime of the store.
template <typename T>
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore& o) { *this = o; }
  ParamStore& operator=(const ParamStore& o) {
    if (this == &o) return *this;
    params_.clear();
    by_name_.clear();
    for (const auto& p : o.params_) add(p->name, p->value, p->trainable);
    return *this;
  }
  ParamStore(ParamStore&&) noexcept = default;
  ParamStore& operator=(ParamStore&&) noexcept = default;

  Parameter<T>& add(const std::string& name, Tensor<T> value, bool trainable = true) {
    if (by_name_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    auto p = std::make_unique<Parameter<T>>();
    p->name = name;
    p->value = std::move(value);
    p->trainable = trainable;
    p->index = params_.size();
    by_name_[name] = p.get();
    params_.push_back(std::move(p));
    return *params_.back();
  }

  Parameter<T>& get(const std::string& name) {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw ConfigError("unknown parameter: " + name);
    return *it->second;
  }
  const Parameter<T>& get(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw ConfigError("unknown parameter: " + name);
    return *it->second;
  }
  bool contains(const std::string& name) const { return by_name_.count(name) != 0; }

  std::size_t size() const { return params_.size(); }
  Parameter<T>& operator[](std::size_t i) { return *params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return *params_[i]; }

  std::size_t numel(bool trainable_only = false) const {
    std::size_t n = 0;
    for (const auto& p : params_)
      if (!trainable_only || p->trainable) n += p->value.size();
    return n;
  }

  void set_trainable(bool trainable) {
    for (auto& p : params_) p->trainable = trainable;
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& p : params_) out.add(p->name, p->value.template cast<U>(), p->trainable);
    return out;
  }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
  std::map<std::string, Parameter<T>*> by_name_;
};

/// Gradient slots aligned with a ParamStore; frozen parameters keep empty slots.
template <typename T>
class GradBuffer {
 public:
  GradBuffer() = default;
  explicit GradBuffer(const ParamStore<T>& store) : grads_(store.size()) {
    for (std::size_t i = 0; i < store.size(); ++i)
      if (store[i].trainable) grads_[i] = Tensor<T>(store[i].value.shape());
  }

  std::size_t size() const { return grads_.size(); }
  Tensor<T>& operator[](std::size_t i) { return grads_[i]; }
  const Tensor<T>& operator[](std::size_t i) const { return grads_[i]; }

  void accumulate(std::size_t index, const Tensor<T>& g) {
    auto& dst = grads_.at(index);
    if (dst.empty() && g.size() != 0) throw ConfigError("gradient for a frozen parameter slot");
    require_same_shape(dst, g, "GradBuffer::accumulate");
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  }

  void add(const GradBuffer& o) {
    for (std::size_t i = 0; i < grads_.size(); ++i)
      if (!o.grads_[i].empty()) accumulate(i, o.grads_[i]);
  }

  void scale(T s) {
    for (auto& g : grads_)
      for (auto& v : g.vec()) v *= s;
  }

  void zero() {
    for (auto& g : grads_) g.fill(T(0));
  }

 private:
  std::vector<Tensor<T>> grads_;
};

}  // namespace dualpipe
