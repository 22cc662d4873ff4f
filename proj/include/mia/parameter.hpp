#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "mia/tensor.hpp"

namespace mia {

/// Bitmask over the three training steps; bit (s - 1) set means trainable in step s.
using StepMask = std::uint8_t;

constexpr StepMask step_bit(int step) { return static_cast<StepMask>(1u << (step - 1)); }

/// A named learnable tensor with its gradient slot.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  StepMask trainable_in_steps = 0;
  // Runtime switch read when a graph binds this parameter.
  bool requires_grad = true;

  bool trainable_in(int step) const { return (trainable_in_steps & step_bit(step)) != 0; }
  void zero_grad() { grad.fill(0.0); }
};

/// Owns every Parameter of a model; names are unique and registration order is stable.
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;
  ParameterStore(ParameterStore&&) = default;
  ParameterStore& operator=(ParameterStore&&) = default;

  Parameter& add(const std::string& name, Tensor init, StepMask steps) {
    if (by_name_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    auto p = std::make_unique<Parameter>();
    p->name = name;
    p->grad = Tensor(init.shape());
    p->value = std::move(init);
    p->trainable_in_steps = steps;
    Parameter& ref = *p;
    by_name_[name] = p.get();
    params_.push_back(std::move(p));
    return ref;
  }

  Parameter* find(const std::string& name) {
    auto it = by_name_.find(name);
    return it == by_name_.end() ? nullptr : it->second;
  }
  const Parameter* find(const std::string& name) const {
    auto it = by_name_.find(name);
    return it == by_name_.end() ? nullptr : it->second;
  }

  Parameter& get(const std::string& name) {
    if (auto* p = find(name)) return *p;
    throw std::out_of_range("unknown parameter: " + name);
  }
  const Parameter& get(const std::string& name) const {
    if (const auto* p = find(name)) return *p;
    throw std::out_of_range("unknown parameter: " + name);
  }

  std::size_t size() const { return params_.size(); }
  Parameter& operator[](std::size_t i) { return *params_[i]; }
  const Parameter& operator[](std::size_t i) const { return *params_[i]; }

  template <typename F>
  void for_each(F&& f) {
    for (auto& p : params_) f(*p);
  }
  template <typename F>
  void for_each(F&& f) const {
    for (const auto& p : params_) f(static_cast<const Parameter&>(*p));
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->value.numel();
    return n;
  }

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::map<std::string, Parameter*> by_name_;
};

}  // namespace mia
