#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "massseg/tensor.hpp"

namespace massseg::ag {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  Tensor<T>& ensure_grad() {
    if (grad.empty() && !value.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

/// Handle to a value in the autodiff tape. Copies share the node.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  bool defined() const { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& mutable_grad() { return node_->ensure_grad(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const Shape& shape() const { return node_->value.shape(); }
  const std::shared_ptr<Node<T>>& node() const { return node_; }

  void zero_grad() {
    if (!node_->grad.empty()) node_->grad.fill(T(0));
  }

  /// Reverse sweep from this (scalar) value. Interior nodes release their saved state as
  /// they are processed; leaf gradients accumulate.
  void backward();

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Thread-local switch; while disabled, ops record no tape.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool on);
};

class NoGradGuard {
 public:
  NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Image ops work on NHWC tensors.

/// Stride-1 convolution with zero "same" padding. `kernel` is (k, k, in, out); `bias` may be
/// undefined. Even kernels pad the extra row/column on the trailing side.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& kernel, const Var<T>& bias, int dilation = 1);

/// 2x2 stride-2 transposed convolution; `kernel` is (2, 2, in, out).
template <typename T>
Var<T> conv_transpose2x2(const Var<T>& x, const Var<T>& kernel, const Var<T>& bias);

template <typename T>
Var<T> max_pool2(const Var<T>& x);

template <typename T>
Var<T> relu(const Var<T>& x);

/// Logistic function with the result held strictly inside (0, 1).
template <typename T>
Var<T> sigmoid(const Var<T>& x);

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);

/// Concatenation along the channel axis. The same Var may appear more than once.
template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts);

struct BatchNormSettings {
  bool training = false;
  double momentum = 0.99;
  double epsilon = 1e-3;
  bool update_running = true;
};

/// Per-channel batch normalization. In training mode batch statistics are used and the
/// running estimates are updated in place (unbiased variance).
template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                  Tensor<T>& running_var, const BatchNormSettings& settings);

/// Mean binary cross-entropy with predictions clamped to [eps, 1 - eps]. `target` must have
/// as many elements as `pred`.
template <typename T>
Var<T> binary_cross_entropy(const Var<T>& pred, const Tensor<T>& target, double eps = 1e-7);

template <typename T>
Var<T> mean(const Var<T>& x);

/// sum_i x_i * weights_i
template <typename T>
Var<T> weighted_sum(const Var<T>& x, const Tensor<T>& weights);

}  // namespace massseg::ag
