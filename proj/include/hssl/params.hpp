#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "hssl/common.hpp"
#include "hssl/tensor.hpp"

namespace hssl {

// A named, persistent weight buffer. Tapes alias the value storage, so a
// forward pass copies nothing; gradients accumulate into `grad` via the leaf
// sink during backward and are cleared by the optimizer.
template <class T>
struct ParameterT {
  std::string name;
  std::vector<int> shape;
  std::shared_ptr<std::vector<T>> value;
  std::vector<T> grad;

  int64_t numel() const { return static_cast<int64_t>(value->size()); }
};

template <class T>
class ParamStoreT {
 public:
  ParameterT<T>& create(const std::string& name, std::vector<int> shape) {
    if (index_.count(name)) throw contract_error("parameter already exists: " + name);
    auto p = std::make_unique<ParameterT<T>>();
    p->name = name;
    p->shape = std::move(shape);
    const int64_t n = shape_numel(p->shape);
    p->value = std::make_shared<std::vector<T>>(static_cast<size_t>(n), T(0));
    p->grad.assign(static_cast<size_t>(n), T(0));
    index_[name] = items_.size();
    items_.push_back(std::move(p));
    return *items_.back();
  }

  ParameterT<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw contract_error("unknown parameter: " + name);
    return *items_[it->second];
  }
  const ParameterT<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw contract_error("unknown parameter: " + name);
    return *items_[it->second];
  }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  // Insertion order, which is fixed by construction order — determinism
  // depends on this.
  size_t size() const { return items_.size(); }
  ParameterT<T>& operator[](size_t i) { return *items_[i]; }
  const ParameterT<T>& operator[](size_t i) const { return *items_[i]; }

  int64_t total_params() const {
    int64_t n = 0;
    for (const auto& p : items_) n += p->numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : items_)
      std::fill(p->grad.begin(), p->grad.end(), T(0));
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(items_.size());
    for (const auto& p : items_) out.push_back(p->name);
    return out;
  }

 private:
  std::vector<std::unique_ptr<ParameterT<T>>> items_;
  std::map<std::string, size_t> index_;
};

using Parameter = ParameterT<float>;
using ParamStore = ParamStoreT<float>;

// Tape leaf for a parameter; gradient lands in p.grad.
template <class T>
TensorT<T> param_leaf(TapeT<T>* tape, ParameterT<T>& p) {
  if (tape == nullptr) return TensorT<T>(p.shape, p.value);
  ParameterT<T>* pp = &p;
  return tape->leaf_shared(p.shape, p.value, [pp](const T* g, int64_t n) {
    for (int64_t i = 0; i < n; ++i) pp->grad[static_cast<size_t>(i)] += g[i];
  });
}

// ---------------------------------------------------------------------------
// Initializers
// ---------------------------------------------------------------------------

template <class T>
void init_trunc_normal(ParameterT<T>& p, Rng& rng, double sigma = 0.02) {
  for (T& v : *p.value) v = static_cast<T>(rng.truncated_normal(sigma));
}

template <class T>
void init_fan_in_normal(ParameterT<T>& p, Rng& rng, int fan_in) {
  const double sigma = std::sqrt(2.0 / std::max(1, fan_in));
  for (T& v : *p.value) v = static_cast<T>(rng.normal() * sigma);
}

template <class T>
void init_constant(ParameterT<T>& p, T c) {
  std::fill(p.value->begin(), p.value->end(), c);
}

// Exact value copy between stores of different scalar types (same layout),
// used by the gradient-check oracle to build a high-precision twin.
template <class Dst, class Src>
void copy_store_values(ParamStoreT<Dst>& dst, const ParamStoreT<Src>& src) {
  if (dst.size() != src.size()) throw contract_error("copy_store_values: store sizes differ");
  for (size_t i = 0; i < dst.size(); ++i) {
    if (dst[i].name != src[i].name || dst[i].shape != src[i].shape)
      throw contract_error("copy_store_values: parameter mismatch at " + dst[i].name);
    for (size_t j = 0; j < dst[i].value->size(); ++j)
      (*dst[i].value)[j] = static_cast<Dst>((*src[i].value)[j]);
  }
}

}  // namespace hssl
