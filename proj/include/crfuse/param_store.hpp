#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "crfuse/tensor.hpp"

namespace crfuse {

// Named parameter tensors with stable, insertion-ordered iteration.
template <typename T>
class ParamStoreT {
 public:
  TensorT<T>& add(const std::string& name, TensorT<T> t) {
    if (index_.count(name)) throw ContractError("parameter already present: " + name);
    index_[name] = entries_.size();
    entries_.emplace_back(name, std::move(t));
    return entries_.back().second;
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  TensorT<T>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    return entries_[it->second].second;
  }
  const TensorT<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    return entries_[it->second].second;
  }

  size_t size() const { return entries_.size(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  void watch_all(TapeT<T>& tape) {
    for (auto& [name, t] : entries_) tape.watch(t);
  }

  // Deep copy; the source keeps sole ownership of its buffers.
  ParamStoreT clone() const {
    ParamStoreT out;
    for (const auto& [name, t] : entries_)
      out.add(name, TensorT<T>(t.shape(), std::vector<T>(t.values())));
    return out;
  }

  long total_elements() const {
    long n = 0;
    for (const auto& [name, t] : entries_) n += t.size();
    return n;
  }

 private:
  std::vector<std::pair<std::string, TensorT<T>>> entries_;
  std::unordered_map<std::string, size_t> index_;
};

}  // namespace crfuse
