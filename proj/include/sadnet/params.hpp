#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "sadnet/error.hpp"
#include "sadnet/tape.hpp"
#include "sadnet/tensor.hpp"

namespace sadnet {

// Named parameter tensors in insertion order. The order is part of the
// checkpoint layout.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor4<T> value;
  };

  void add(std::string name, Tensor4<T> value) {
    if (index_.count(name) != 0) throw ConfigError("duplicate parameter '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.push_back(Entry{std::move(name), std::move(value)});
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Tensor4<T>& at(const std::string& name) { return entries_[lookup(name)].value; }
  const Tensor4<T>& at(const std::string& name) const { return entries_[lookup(name)].value; }

  std::vector<Entry>& entries() noexcept { return entries_; }
  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }

  std::size_t element_count() const {
    std::size_t total = 0;
    for (const auto& e : entries_) total += e.value.size();
    return total;
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& e : entries_) out.add(e.name, e.value.template cast<U>());
    return out;
  }

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    if (a.entries_.size() != b.entries_.size()) return false;
    for (std::size_t i = 0; i < a.entries_.size(); ++i) {
      if (a.entries_[i].name != b.entries_[i].name || !(a.entries_[i].value == b.entries_[i].value)) return false;
    }
    return true;
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }

  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

// Parameters registered as leaves of one tape.
template <typename T>
class BoundParams {
 public:
  BoundParams() = default;
  BoundParams(Tape<T>& tape, const ParamStore<T>& store, bool requires_grad = true) {
    for (const auto& e : store.entries()) vars_.emplace(e.name, tape.leaf(e.value, requires_grad));
  }

  const Var<T>& operator[](const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw ConfigError("parameter '" + name + "' is not bound");
    return it->second;
  }
  bool contains(const std::string& name) const { return vars_.count(name) != 0; }
  void set(const std::string& name, Var<T> v) { vars_[name] = v; }
  const std::map<std::string, Var<T>>& vars() const noexcept { return vars_; }

 private:
  std::map<std::string, Var<T>> vars_;
};

template <typename T>
using GradMap = std::map<std::string, Tensor4<T>>;

template <typename T>
GradMap<T> named_gradients(const Gradients<T>& grads, const BoundParams<T>& bound) {
  GradMap<T> out;
  for (const auto& [name, var] : bound.vars()) {
    if (const auto* g = grads.find(var)) out.emplace(name, *g);
  }
  return out;
}

}  // namespace sadnet
