#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "parefine/errors.hpp"
#include "parefine/rng.hpp"
#include "parefine/tensor.hpp"

namespace parefine {

/// One named tensor with its gradient and Adam moments. Non-trainable entries
/// (batchnorm running statistics) share the layout but are skipped by the
/// optimizer and by parameter counting.
template <typename T>
struct ParamEntry {
  std::string name;
  Tensor<T> value, grad, adam_m, adam_v;
  bool trainable = true;
};

/// Ordered collection of learnable tensors. Iteration order is insertion order.
template <typename T>
class ParamStore {
 public:
  Tensor<T>& add(const std::string& name, const Shape& shape, bool trainable = true) {
    if (index_.count(name)) throw ParameterError("param store: duplicate entry '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.push_back({name, Tensor<T>(shape), Tensor<T>(shape), Tensor<T>(shape), Tensor<T>(shape), trainable});
    return entries_.back().value;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  ParamEntry<T>& entry(const std::string& name) {
    const auto it = index_.find(name);
    if (it == index_.end()) throw ParameterError("param store: no entry '" + name + "'");
    return entries_[it->second];
  }
  const ParamEntry<T>& entry(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw ParameterError("param store: no entry '" + name + "'");
    return entries_[it->second];
  }

  Tensor<T>& value(const std::string& name) { return entry(name).value; }
  const Tensor<T>& value(const std::string& name) const { return entry(name).value; }
  Tensor<T>& grad(const std::string& name) { return entry(name).grad; }

  std::vector<ParamEntry<T>>& entries() noexcept { return entries_; }
  const std::vector<ParamEntry<T>>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }

  /// Total trainable scalars.
  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (e.trainable) n += e.value.numel();
    return n;
  }

  /// Trainable scalars whose name starts with `prefix`.
  std::size_t trainable_count(const std::string& prefix) const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (e.trainable && e.name.rfind(prefix, 0) == 0) n += e.value.numel();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.grad.fill(T(0));
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& e : entries_) {
      out.add(e.name, e.value.shape(), e.trainable);
      auto& o = out.entry(e.name);
      o.value = e.value.template cast<U>();
      o.grad = e.grad.template cast<U>();
      o.adam_m = e.adam_m.template cast<U>();
      o.adam_v = e.adam_v.template cast<U>();
    }
    return out;
  }

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    if (a.entries_.size() != b.entries_.size()) return false;
    for (std::size_t i = 0; i < a.entries_.size(); ++i) {
      const auto &x = a.entries_[i], &y = b.entries_[i];
      if (x.name != y.name || x.trainable != y.trainable || !bitwise_equal(x.value, y.value) ||
          !bitwise_equal(x.grad, y.grad) || !bitwise_equal(x.adam_m, y.adam_m) || !bitwise_equal(x.adam_v, y.adam_v)) {
        return false;
      }
    }
    return true;
  }

 private:
  std::vector<ParamEntry<T>> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Megabytes of trainable parameters stored as 32-bit floats.
inline double param_megabytes(std::size_t count) { return static_cast<double>(count) * 4.0 / (1024.0 * 1024.0); }

/// Kaiming-uniform fan-in initialization: U(-b, b) with b = sqrt(6 / fan_in),
/// giving variance 2 / fan_in.
template <typename T>
void kaiming_uniform(Tensor<T>& w, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (std::size_t i = 0; i < w.numel(); ++i) w[i] = static_cast<T>(rng.uniform(-bound, bound));
}

}  // namespace parefine
