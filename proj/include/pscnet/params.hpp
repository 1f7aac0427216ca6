#pragma once

// Named, ordered collection of model tensors. Parameters are trainable;
// buffers (batch-norm running statistics) are carried state. Registration
// order is the deterministic serialization order.

#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "pscnet/tensor.hpp"

namespace pscnet {

template <typename T>
class ModelParams {
 public:
  struct Entry {
    std::string name;
    Tensor<T> tensor;
    bool trainable;
  };

  Tensor<T> add_parameter(const std::string& name, Tensor<T> t) { return add(name, std::move(t), true); }
  Tensor<T> add_buffer(const std::string& name, Tensor<T> t) { return add(name, std::move(t), false); }

  const std::vector<Entry>& entries() const { return entries_; }

  Tensor<T>* find(std::string_view name) {
    auto it = index_.find(std::string(name));
    return it == index_.end() ? nullptr : &entries_[it->second].tensor;
  }
  const Tensor<T>* find(std::string_view name) const {
    auto it = index_.find(std::string(name));
    return it == index_.end() ? nullptr : &entries_[it->second].tensor;
  }

  long long scalar_count(bool trainable_only = true) const {
    long long n = 0;
    for (const auto& e : entries_)
      if (e.trainable || !trainable_only) n += e.tensor.numel();
    return n;
  }

  void zero_grads() {
    for (auto& e : entries_)
      if (e.trainable) e.tensor.zero_grad();
  }

 private:
  Tensor<T> add(const std::string& name, Tensor<T> t, bool trainable) {
    if (index_.count(name)) throw Error("ModelParams: duplicate tensor name '" + name + "'");
    if (trainable) t.set_requires_grad(true);
    index_[name] = entries_.size();
    entries_.push_back({name, t, trainable});
    return t;
  }

  std::vector<Entry> entries_;
  std::unordered_map<std::string, size_t> index_;
};

}  // namespace pscnet
