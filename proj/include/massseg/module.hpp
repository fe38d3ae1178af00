#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "massseg/autograd.hpp"

namespace massseg {

enum class Mode { kTrain, kEval };

enum class Init { kHeUniform, kZeros, kOnes };

template <typename T>
struct Parameter {
  ag::Var<T> var;
  bool trainable = true;
  Init init = Init::kZeros;
  int fan_in = 0;

  Tensor<T>& value() { return var.mutable_value(); }
  const Tensor<T>& value() const { return var.value(); }
};

/// Owner of named parameters and child modules. Registration order is the canonical order
/// for initialization, checkpoints and parameter listings.
template <typename T>
class Module {
 public:
  explicit Module(std::string kind) : kind_(std::move(kind)) {}
  virtual ~Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;

  const std::string& kind() const { return kind_; }

  using Visitor = std::function<void(const std::string& path, Parameter<T>& param)>;
  using ConstVisitor = std::function<void(const std::string& path, const Parameter<T>& param)>;

  /// Depth-first over parameters (own first, then children); paths are '/'-joined.
  void visit_parameters(const Visitor& fn, const std::string& prefix = "") {
    for (auto& [name, p] : params_) fn(join(prefix, name), *p);
    for (auto& [name, child] : children_) child->visit_parameters(fn, join(prefix, name));
  }
  void visit_parameters(const ConstVisitor& fn, const std::string& prefix = "") const {
    for (const auto& [name, p] : params_) fn(join(prefix, name), *p);
    for (const auto& [name, child] : children_) {
      static_cast<const Module&>(*child).visit_parameters(fn, join(prefix, name));
    }
  }

  std::int64_t trainable_count() const {
    std::int64_t total = 0;
    visit_parameters(ConstVisitor([&](const std::string&, const Parameter<T>& p) {
      if (p.trainable) total += static_cast<std::int64_t>(p.value().size());
    }));
    return total;
  }

  std::vector<Parameter<T>*> trainable_parameters() {
    std::vector<Parameter<T>*> out;
    visit_parameters(Visitor([&](const std::string&, Parameter<T>& p) {
      if (p.trainable) out.push_back(&p);
    }));
    return out;
  }

  void zero_grad() {
    visit_parameters(Visitor([](const std::string&, Parameter<T>& p) { p.var.zero_grad(); }));
  }

  const std::vector<std::pair<std::string, std::unique_ptr<Module>>>& children() const { return children_; }

 protected:
  Parameter<T>& add_parameter(std::string name, Shape shape, Init init, int fan_in = 0, bool trainable = true) {
    auto p = std::make_unique<Parameter<T>>();
    const T fill = init == Init::kOnes ? T(1) : T(0);
    p->var = ag::Var<T>(Tensor<T>(std::move(shape), fill), trainable);
    p->trainable = trainable;
    p->init = init;
    p->fan_in = fan_in;
    params_.emplace_back(std::move(name), std::move(p));
    return *params_.back().second;
  }

  template <class M, class... Args>
  M& add_child(std::string name, Args&&... args) {
    auto child = std::make_unique<M>(std::forward<Args>(args)...);
    M& ref = *child;
    children_.emplace_back(std::move(name), std::move(child));
    return ref;
  }

 private:
  static std::string join(const std::string& prefix, const std::string& name) {
    return prefix.empty() ? name : prefix + "/" + name;
  }

  std::string kind_;
  std::vector<std::pair<std::string, std::unique_ptr<Parameter<T>>>> params_;
  std::vector<std::pair<std::string, std::unique_ptr<Module>>> children_;
};

template <typename T>
std::int64_t count_params(const Module<T>& module) {
  return module.trainable_count();
}

/// He-uniform kernels (limit sqrt(6 / fan_in)), zero biases, unit BN scales, all drawn from
/// one stream in registration order. Values are drawn in double and rounded to T so float and
/// double builds of the same seed agree to float precision.
template <typename T>
void initialize_parameters(Module<T>& module, std::uint64_t seed);

}  // namespace massseg
