#include "massseg/autograd.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <unordered_set>

namespace massseg::ag {

namespace {

thread_local bool g_grad_enabled = true;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

// Adds the column sums of a row-major matrix to `out`. Eigen's colwise().sum() peels by pointer
// alignment, which makes the result depend on where the buffer happens to live.
template <typename T>
void add_column_sums(const T* m, std::size_t rows, int cols, T* out) {
  std::vector<T> acc(static_cast<std::size_t>(cols), T(0));
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = m + r * cols;
    for (int c = 0; c < cols; ++c) acc[c] += row[c];
  }
  for (int c = 0; c < cols; ++c) out[c] += acc[c];
}

// Upper bound on the im2col scratch buffer, in elements.
constexpr std::size_t kColBudget = std::size_t{1} << 22;

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
Var<T> make_result(Tensor<T> value, std::vector<NodePtr<T>> inputs, std::function<void(Node<T>&)> backward) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  const bool needs = GradMode::enabled() &&
                     std::any_of(inputs.begin(), inputs.end(), [](const NodePtr<T>& n) { return n && n->requires_grad; });
  if (needs) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
  }
  return Var<T>(std::move(node));
}

template <typename T>
bool wants_grad(const NodePtr<T>& n) {
  return n && n->requires_grad;
}

void require_rank4(const Shape& s, const char* op) {
  if (s.size() != 4) throw ConfigError(std::string(op) + ": expected NHWC tensor, got " + shape_string(s));
}

struct ConvGeometry {
  int n, h, w, cin, cout, k, dilation, pad_top, pad_left;
  // Kernel rows/columns that reach at least one in-bounds input pixel. Large dilations on small
  // feature maps leave taps that only ever read padding.
  std::vector<int> rows_used, cols_used;

  void find_used_taps() {
    rows_used.clear();
    cols_used.clear();
    for (int t = 0; t < k; ++t) {
      if (std::abs(t * dilation - pad_top) < h) rows_used.push_back(t);
      if (std::abs(t * dilation - pad_left) < w) cols_used.push_back(t);
    }
  }
  bool all_taps_used() const { return static_cast<int>(rows_used.size() * cols_used.size()) == k * k; }
  long rows() const { return static_cast<long>(n) * h * w; }
  long patch() const { return static_cast<long>(rows_used.size() * cols_used.size()) * cin; }
};

// Copies (or scatter-adds) the kernel rows of the used taps between the full (k*k*cin, cout)
// layout and the compact (used_taps*cin, cout) layout.
template <typename T>
void gather_kernel(const ConvGeometry& g, const T* full, T* compact) {
  const std::size_t block = static_cast<std::size_t>(g.cin) * g.cout;
  for (int ky : g.rows_used) {
    for (int kx : g.cols_used) {
      std::memcpy(compact, full + static_cast<std::size_t>(ky * g.k + kx) * block, block * sizeof(T));
      compact += block;
    }
  }
}

template <typename T>
void scatter_kernel_add(const ConvGeometry& g, const T* compact, T* full) {
  const std::size_t block = static_cast<std::size_t>(g.cin) * g.cout;
  for (int ky : g.rows_used) {
    for (int kx : g.cols_used) {
      T* dst = full + static_cast<std::size_t>(ky * g.k + kx) * block;
      for (std::size_t i = 0; i < block; ++i) dst[i] += compact[i];
      compact += block;
    }
  }
}

template <typename T>
void im2col(const ConvGeometry& g, const T* x, long r0, long r1, T* col) {
  const long hw = static_cast<long>(g.h) * g.w;
  const std::size_t cin = static_cast<std::size_t>(g.cin);
  T* dst = col;
  for (long r = r0; r < r1; ++r) {
    const int n = static_cast<int>(r / hw);
    const long rem = r % hw;
    const int y = static_cast<int>(rem / g.w);
    const int xx = static_cast<int>(rem % g.w);
    for (int ky : g.rows_used) {
      const int sy = y + ky * g.dilation - g.pad_top;
      for (int kx : g.cols_used) {
        const int sx = xx + kx * g.dilation - g.pad_left;
        if (sy < 0 || sy >= g.h || sx < 0 || sx >= g.w) {
          std::fill(dst, dst + cin, T(0));
        } else {
          const T* src = x + ((static_cast<std::size_t>(n) * g.h + sy) * g.w + sx) * cin;
          std::memcpy(dst, src, cin * sizeof(T));
        }
        dst += cin;
      }
    }
  }
}

template <typename T>
void col2im_add(const ConvGeometry& g, const T* col, long r0, long r1, T* dx) {
  const long hw = static_cast<long>(g.h) * g.w;
  const int cin = g.cin;
  const T* src = col;
  for (long r = r0; r < r1; ++r) {
    const int n = static_cast<int>(r / hw);
    const long rem = r % hw;
    const int y = static_cast<int>(rem / g.w);
    const int xx = static_cast<int>(rem % g.w);
    for (int ky : g.rows_used) {
      const int sy = y + ky * g.dilation - g.pad_top;
      for (int kx : g.cols_used) {
        const int sx = xx + kx * g.dilation - g.pad_left;
        if (sy >= 0 && sy < g.h && sx >= 0 && sx < g.w) {
          T* d = dx + ((static_cast<std::size_t>(n) * g.h + sy) * g.w + sx) * cin;
          for (int c = 0; c < cin; ++c) d[c] += src[c];
        }
        src += cin;
      }
    }
  }
}

long chunk_rows(const ConvGeometry& g) {
  return std::max<long>(1, std::min<long>(g.rows(), static_cast<long>(kColBudget) / std::max<long>(1, g.patch())));
}

template <typename T>
void conv_forward(const ConvGeometry& g, const T* x, const T* kernel, const T* bias, T* y) {
  std::vector<T> compact;
  if (!g.all_taps_used()) {
    compact.resize(static_cast<std::size_t>(g.patch()) * g.cout);
    gather_kernel(g, kernel, compact.data());
    kernel = compact.data();
  }
  ConstMatMap<T> wm(kernel, g.patch(), g.cout);
  if (g.k == 1) {
    ConstMatMap<T> xm(x, g.rows(), g.cin);
    MatMap<T> ym(y, g.rows(), g.cout);
    ym.noalias() = xm * wm;
  } else {
    const long chunk = chunk_rows(g);
    std::vector<T> col(static_cast<std::size_t>(chunk * g.patch()));
    for (long r0 = 0; r0 < g.rows(); r0 += chunk) {
      const long r1 = std::min(g.rows(), r0 + chunk);
      im2col(g, x, r0, r1, col.data());
      ConstMatMap<T> cm(col.data(), r1 - r0, g.patch());
      MatMap<T> ym(y + r0 * g.cout, r1 - r0, g.cout);
      ym.noalias() = cm * wm;
    }
  }
  if (bias) {
    MatMap<T> ym(y, g.rows(), g.cout);
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bv(bias, g.cout);
    ym.rowwise() += bv;
  }
}

template <typename T>
void conv_backward(const ConvGeometry& g, const T* x, const T* kernel, const T* dy, T* dx, T* dkernel, T* dbias) {
  std::vector<T> compact, compact_grad;
  T* full_dkernel = nullptr;
  if (!g.all_taps_used()) {
    compact.resize(static_cast<std::size_t>(g.patch()) * g.cout);
    gather_kernel(g, kernel, compact.data());
    kernel = compact.data();
    if (dkernel) {
      compact_grad.assign(compact.size(), T(0));
      full_dkernel = dkernel;
      dkernel = compact_grad.data();
    }
  }
  ConstMatMap<T> wm(kernel, g.patch(), g.cout);
  if (dbias) add_column_sums(dy, static_cast<std::size_t>(g.rows()), g.cout, dbias);
  if (g.k == 1) {
    ConstMatMap<T> xm(x, g.rows(), g.cin);
    ConstMatMap<T> dym(dy, g.rows(), g.cout);
    if (dkernel) MatMap<T>(dkernel, g.cin, g.cout).noalias() += xm.transpose() * dym;
    if (dx) MatMap<T>(dx, g.rows(), g.cin).noalias() += dym * wm.transpose();
    return;
  }
  const long chunk = chunk_rows(g);
  std::vector<T> col(static_cast<std::size_t>(chunk * g.patch()));
  for (long r0 = 0; r0 < g.rows(); r0 += chunk) {
    const long r1 = std::min(g.rows(), r0 + chunk);
    ConstMatMap<T> dym(dy + r0 * g.cout, r1 - r0, g.cout);
    if (dkernel) {
      im2col(g, x, r0, r1, col.data());
      ConstMatMap<T> cm(col.data(), r1 - r0, g.patch());
      MatMap<T>(dkernel, g.patch(), g.cout).noalias() += cm.transpose() * dym;
    }
    if (dx) {
      MatMap<T> dcol(col.data(), r1 - r0, g.patch());
      dcol.noalias() = dym * wm.transpose();
      col2im_add(g, col.data(), r0, r1, dx);
    }
  }
  if (full_dkernel) scatter_kernel_add(g, dkernel, full_dkernel);
}

}  // namespace

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool on) { g_grad_enabled = on; }

template <typename T>
void Var<T>::backward() {
  if (!node_) throw ConfigError("backward on undefined Var");
  if (!node_->requires_grad) return;
  // Iterative post-order DFS gives a topological order. `order` owns the nodes so that
  // releasing a node's inputs below cannot free a node that is still pending.
  std::vector<NodePtr<T>> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<NodePtr<T>, std::size_t>> stack{{node_, 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& top = stack.back();
    if (top.second < top.first->inputs.size()) {
      NodePtr<T> child = top.first->inputs[top.second++];
      if (child && child->requires_grad && seen.insert(child.get()).second) stack.emplace_back(std::move(child), 0);
    } else {
      order.push_back(std::move(top.first));
      stack.pop_back();
    }
  }
  node_->ensure_grad().fill(T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>& n = **it;
    if (!n.backward) continue;  // leaf
    if (!n.grad.empty()) n.backward(n);
    n.backward = nullptr;
    n.inputs.clear();
    n.grad = Tensor<T>();
  }
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& kernel, const Var<T>& bias, int dilation) {
  const auto& xs = x.shape();
  const auto& ks = kernel.shape();
  require_rank4(xs, "conv2d");
  if (ks.size() != 4 || ks[0] != ks[1]) throw ConfigError("conv2d: kernel must be (k, k, in, out), got " + shape_string(ks));
  if (xs[3] != ks[2]) {
    throw ConfigError("conv2d: input has " + std::to_string(xs[3]) + " channels but kernel expects " +
                      std::to_string(ks[2]));
  }
  if (dilation < 1) throw ConfigError("conv2d: dilation must be >= 1");
  if (bias.defined() && (bias.shape().size() != 1 || bias.shape()[0] != ks[3])) {
    throw ConfigError("conv2d: bias shape " + shape_string(bias.shape()) + " does not match " + std::to_string(ks[3]) +
                      " filters");
  }
  const int extent = dilation * (ks[0] - 1);
  const int pad = extent / 2;
  ConvGeometry g{xs[0], xs[1], xs[2], xs[3], ks[3], ks[0], dilation, pad, pad, {}, {}};
  g.find_used_taps();
  Tensor<T> y({g.n, g.h, g.w, g.cout});
  conv_forward(g, x.value().data(), kernel.value().data(), bias.defined() ? bias.value().data() : nullptr, y.data());
  std::vector<NodePtr<T>> inputs{x.node(), kernel.node()};
  if (bias.defined()) inputs.push_back(bias.node());
  return make_result<T>(std::move(y), std::move(inputs), [g](Node<T>& self) {
    auto& xn = self.inputs[0];
    auto& kn = self.inputs[1];
    T* dx = wants_grad(xn) ? xn->ensure_grad().data() : nullptr;
    T* dk = wants_grad(kn) ? kn->ensure_grad().data() : nullptr;
    T* db = nullptr;
    if (self.inputs.size() > 2 && wants_grad(self.inputs[2])) db = self.inputs[2]->ensure_grad().data();
    conv_backward(g, xn->value.data(), kn->value.data(), self.grad.data(), dx, dk, db);
  });
}

template <typename T>
Var<T> conv_transpose2x2(const Var<T>& x, const Var<T>& kernel, const Var<T>& bias) {
  const auto& xs = x.shape();
  const auto& ks = kernel.shape();
  require_rank4(xs, "conv_transpose2x2");
  if (ks.size() != 4 || ks[0] != 2 || ks[1] != 2 || ks[2] != xs[3]) {
    throw ConfigError("conv_transpose2x2: kernel " + shape_string(ks) + " incompatible with input " + shape_string(xs));
  }
  const int n = xs[0], h = xs[1], w = xs[2], cin = xs[3], cout = ks[3];
  const long rows = static_cast<long>(n) * h * w;
  Tensor<T> y({n, 2 * h, 2 * w, cout});
  ConstMatMap<T> xm(x.value().data(), rows, cin);
  RowMat<T> tmp(rows, cout);
  for (int a = 0; a < 2; ++a) {
    for (int b = 0; b < 2; ++b) {
      ConstMatMap<T> wm(kernel.value().data() + static_cast<std::size_t>(a * 2 + b) * cin * cout, cin, cout);
      tmp.noalias() = xm * wm;
      for (long r = 0; r < rows; ++r) {
        const long i = (r / w) % h, j = r % w, bn = r / (static_cast<long>(h) * w);
        T* dst = y.data() + ((bn * 2 * h + 2 * i + a) * 2 * w + 2 * j + b) * cout;
        std::memcpy(dst, tmp.data() + r * cout, sizeof(T) * cout);
      }
    }
  }
  if (bias.defined()) {
    MatMap<T> ym(y.data(), rows * 4, cout);
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bv(bias.value().data(), cout);
    ym.rowwise() += bv;
  }
  std::vector<NodePtr<T>> inputs{x.node(), kernel.node()};
  if (bias.defined()) inputs.push_back(bias.node());
  return make_result<T>(std::move(y), std::move(inputs), [n, h, w, cin, cout, rows](Node<T>& self) {
    auto& xn = self.inputs[0];
    auto& kn = self.inputs[1];
    const bool has_bias = self.inputs.size() > 2 && wants_grad(self.inputs[2]);
    if (has_bias) add_column_sums(self.grad.data(), static_cast<std::size_t>(rows) * 4, cout, self.inputs[2]->ensure_grad().data());
    ConstMatMap<T> xm(xn->value.data(), rows, cin);
    RowMat<T> gathered(rows, cout);
    for (int a = 0; a < 2; ++a) {
      for (int b = 0; b < 2; ++b) {
        for (long r = 0; r < rows; ++r) {
          const long i = (r / w) % h, j = r % w, bn = r / (static_cast<long>(h) * w);
          const T* src = self.grad.data() + ((bn * 2 * h + 2 * i + a) * 2 * w + 2 * j + b) * cout;
          std::memcpy(gathered.data() + r * cout, src, sizeof(T) * cout);
        }
        const std::size_t off = static_cast<std::size_t>(a * 2 + b) * cin * cout;
        if (wants_grad(kn)) MatMap<T>(kn->ensure_grad().data() + off, cin, cout).noalias() += xm.transpose() * gathered;
        if (wants_grad(xn)) {
          ConstMatMap<T> wm(kn->value.data() + off, cin, cout);
          MatMap<T>(xn->ensure_grad().data(), rows, cin).noalias() += gathered * wm.transpose();
        }
      }
    }
    (void)n;
  });
}

template <typename T>
Var<T> max_pool2(const Var<T>& x) {
  const auto& xs = x.shape();
  require_rank4(xs, "max_pool2");
  const int n = xs[0], h = xs[1], w = xs[2], c = xs[3];
  if (h % 2 || w % 2) throw ConfigError("max_pool2: spatial dims must be even, got " + shape_string(xs));
  const int oh = h / 2, ow = w / 2;
  Tensor<T> y({n, oh, ow, c});
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(y.size());
  const T* src = x.value().data();
  std::size_t o = 0;
  for (int b = 0; b < n; ++b) {
    for (int i = 0; i < oh; ++i) {
      for (int j = 0; j < ow; ++j) {
        for (int ch = 0; ch < c; ++ch, ++o) {
          std::size_t best = ((static_cast<std::size_t>(b) * h + 2 * i) * w + 2 * j) * c + ch;
          T best_v = src[best];
          for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx) {
              const std::size_t idx = ((static_cast<std::size_t>(b) * h + 2 * i + dy) * w + 2 * j + dx) * c + ch;
              if (src[idx] > best_v) {
                best_v = src[idx];
                best = idx;
              }
            }
          }
          y[o] = best_v;
          (*argmax)[o] = static_cast<std::uint32_t>(best);
        }
      }
    }
  }
  return make_result<T>(std::move(y), {x.node()}, [argmax](Node<T>& self) {
    T* dx = self.inputs[0]->ensure_grad().data();
    for (std::size_t i = 0; i < argmax->size(); ++i) dx[(*argmax)[i]] += self.grad[i];
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> y(x.shape());
  const T* src = x.value().data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = src[i] > T(0) ? src[i] : T(0);
  return make_result<T>(std::move(y), {x.node()}, [](Node<T>& self) {
    T* dx = self.inputs[0]->ensure_grad().data();
    const T* xv = self.inputs[0]->value.data();
    const T* dy = self.grad.data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) dx[i] += xv[i] > T(0) ? dy[i] : T(0);
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> y(x.shape());
  const T lo = std::numeric_limits<T>::min();
  const T hi = T(1) - std::numeric_limits<T>::epsilon() / T(2);
  const T* src = x.value().data();
  for (std::size_t i = 0; i < y.size(); ++i) {
    const T v = T(1) / (T(1) + std::exp(-src[i]));
    y[i] = std::clamp(v, lo, hi);
  }
  return make_result<T>(std::move(y), {x.node()}, [](Node<T>& self) {
    T* dx = self.inputs[0]->ensure_grad().data();
    const T* yv = self.value.data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) dx[i] += self.grad[i] * yv[i] * (T(1) - yv[i]);
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) {
    throw ConfigError("add: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  Tensor<T> y(a.shape());
  const T* av = a.value().data();
  const T* bv = b.value().data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] + bv[i];
  return make_result<T>(std::move(y), {a.node(), b.node()}, [](Node<T>& self) {
    for (auto& in : self.inputs) {
      if (!wants_grad(in)) continue;
      T* d = in->ensure_grad().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i];
    }
  });
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ConfigError("concat_channels: no inputs");
  const Shape& s0 = parts.front().shape();
  require_rank4(s0, "concat_channels");
  std::vector<int> widths;
  int total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != 4 || s[0] != s0[0] || s[1] != s0[1] || s[2] != s0[2]) {
      throw ConfigError("concat_channels: incompatible shapes " + shape_string(s0) + " and " + shape_string(s));
    }
    widths.push_back(s[3]);
    total += s[3];
  }
  const std::size_t pixels = static_cast<std::size_t>(s0[0]) * s0[1] * s0[2];
  Tensor<T> y({s0[0], s0[1], s0[2], total});
  int offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const T* src = parts[k].value().data();
    const int c = widths[k];
    for (std::size_t p = 0; p < pixels; ++p) {
      std::memcpy(y.data() + p * total + offset, src + p * c, sizeof(T) * c);
    }
    offset += c;
  }
  std::vector<NodePtr<T>> inputs;
  for (const auto& p : parts) inputs.push_back(p.node());
  return make_result<T>(std::move(y), std::move(inputs), [widths, total, pixels](Node<T>& self) {
    int offset = 0;
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      const int c = widths[k];
      if (wants_grad(self.inputs[k])) {
        T* d = self.inputs[k]->ensure_grad().data();
        for (std::size_t p = 0; p < pixels; ++p) {
          const T* g = self.grad.data() + p * total + offset;
          T* dst = d + p * c;
          for (int i = 0; i < c; ++i) dst[i] += g[i];
        }
      }
      offset += c;
    }
  });
}

template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                  Tensor<T>& running_var, const BatchNormSettings& settings) {
  const Shape& xs = x.shape();
  require_rank4(xs, "batch_norm");
  const int c = xs[3];
  if (gamma.value().size() != static_cast<std::size_t>(c) || beta.value().size() != static_cast<std::size_t>(c) ||
      running_mean.size() != static_cast<std::size_t>(c) || running_var.size() != static_cast<std::size_t>(c)) {
    throw ConfigError("batch_norm: parameter width does not match " + std::to_string(c) + " channels");
  }
  const std::size_t count = static_cast<std::size_t>(xs[0]) * xs[1] * xs[2];
  const T* xv = x.value().data();
  std::vector<double> mu(c, 0.0), var(c, 0.0);
  if (settings.training) {
    for (std::size_t p = 0; p < count; ++p) {
      const T* row = xv + p * c;
      for (int ch = 0; ch < c; ++ch) mu[ch] += row[ch];
    }
    for (int ch = 0; ch < c; ++ch) mu[ch] /= static_cast<double>(count);
    for (std::size_t p = 0; p < count; ++p) {
      const T* row = xv + p * c;
      for (int ch = 0; ch < c; ++ch) {
        const double d = row[ch] - mu[ch];
        var[ch] += d * d;
      }
    }
    for (int ch = 0; ch < c; ++ch) var[ch] /= static_cast<double>(count);
    if (settings.update_running) {
      const double m = settings.momentum;
      const double bessel = count > 1 ? static_cast<double>(count) / static_cast<double>(count - 1) : 1.0;
      for (int ch = 0; ch < c; ++ch) {
        running_mean[ch] = static_cast<T>(m * running_mean[ch] + (1.0 - m) * mu[ch]);
        running_var[ch] = static_cast<T>(m * running_var[ch] + (1.0 - m) * var[ch] * bessel);
      }
    }
  } else {
    for (int ch = 0; ch < c; ++ch) {
      mu[ch] = running_mean[ch];
      var[ch] = running_var[ch];
    }
  }
  auto inv_std = std::make_shared<std::vector<T>>(c);
  std::vector<T> mean_t(c);
  for (int ch = 0; ch < c; ++ch) {
    (*inv_std)[ch] = static_cast<T>(1.0 / std::sqrt(var[ch] + settings.epsilon));
    mean_t[ch] = static_cast<T>(mu[ch]);
  }
  // Normalized activations are kept for the backward pass.
  auto xhat = std::make_shared<Tensor<T>>(xs);
  Tensor<T> y(xs);
  const T* g = gamma.value().data();
  const T* b = beta.value().data();
  for (std::size_t p = 0; p < count; ++p) {
    const T* row = xv + p * c;
    T* hr = xhat->data() + p * c;
    T* yr = y.data() + p * c;
    for (int ch = 0; ch < c; ++ch) {
      hr[ch] = (row[ch] - mean_t[ch]) * (*inv_std)[ch];
      yr[ch] = g[ch] * hr[ch] + b[ch];
    }
  }
  const bool training = settings.training;
  return make_result<T>(std::move(y), {x.node(), gamma.node(), beta.node()},
                        [xhat, inv_std, c, count, training](Node<T>& self) {
                          const T* dy = self.grad.data();
                          std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
                          for (std::size_t p = 0; p < count; ++p) {
                            const T* dr = dy + p * c;
                            const T* hr = xhat->data() + p * c;
                            for (int ch = 0; ch < c; ++ch) {
                              sum_dy[ch] += dr[ch];
                              sum_dy_xhat[ch] += static_cast<double>(dr[ch]) * hr[ch];
                            }
                          }
                          auto& xn = self.inputs[0];
                          auto& gn = self.inputs[1];
                          auto& bn = self.inputs[2];
                          if (wants_grad(gn)) {
                            T* dg = gn->ensure_grad().data();
                            for (int ch = 0; ch < c; ++ch) dg[ch] += static_cast<T>(sum_dy_xhat[ch]);
                          }
                          if (wants_grad(bn)) {
                            T* db = bn->ensure_grad().data();
                            for (int ch = 0; ch < c; ++ch) db[ch] += static_cast<T>(sum_dy[ch]);
                          }
                          if (!wants_grad(xn)) return;
                          const T* gv = gn->value.data();
                          T* dx = xn->ensure_grad().data();
                          if (!training) {
                            for (std::size_t p = 0; p < count; ++p) {
                              for (int ch = 0; ch < c; ++ch) {
                                dx[p * c + ch] += dy[p * c + ch] * gv[ch] * (*inv_std)[ch];
                              }
                            }
                            return;
                          }
                          const double inv_n = 1.0 / static_cast<double>(count);
                          std::vector<T> k0(c), k1(c), k2(c);
                          for (int ch = 0; ch < c; ++ch) {
                            const double scale = static_cast<double>(gv[ch]) * (*inv_std)[ch];
                            k0[ch] = static_cast<T>(scale);
                            k1[ch] = static_cast<T>(scale * sum_dy[ch] * inv_n);
                            k2[ch] = static_cast<T>(scale * sum_dy_xhat[ch] * inv_n);
                          }
                          for (std::size_t p = 0; p < count; ++p) {
                            const T* dr = dy + p * c;
                            const T* hr = xhat->data() + p * c;
                            T* out = dx + p * c;
                            for (int ch = 0; ch < c; ++ch) out[ch] += k0[ch] * dr[ch] - k1[ch] - k2[ch] * hr[ch];
                          }
                        });
}

template <typename T>
Var<T> binary_cross_entropy(const Var<T>& pred, const Tensor<T>& target, double eps) {
  if (pred.value().size() != target.size()) {
    throw InputError("binary_cross_entropy: prediction " + shape_string(pred.shape()) + " vs target " +
                     shape_string(target.shape()));
  }
  const std::size_t n = target.size();
  const T* p = pred.value().data();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double pv = std::clamp(static_cast<double>(p[i]), eps, 1.0 - eps);
    const double t = target[i];
    total -= t * std::log(pv) + (1.0 - t) * std::log(1.0 - pv);
  }
  Tensor<T> y({1}, static_cast<T>(total / static_cast<double>(n)));
  auto tgt = std::make_shared<Tensor<T>>(target);
  return make_result<T>(std::move(y), {pred.node()}, [tgt, eps, n](Node<T>& self) {
    auto& pn = self.inputs[0];
    T* dp = pn->ensure_grad().data();
    const T* pv = pn->value.data();
    const double scale = static_cast<double>(self.grad[0]) / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double v = pv[i];
      if (v < eps || v > 1.0 - eps) continue;
      const double t = (*tgt)[i];
      dp[i] += static_cast<T>(scale * (-t / v + (1.0 - t) / (1.0 - v)));
    }
  });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  const std::size_t n = x.value().size();
  double total = 0.0;
  for (T v : x.value().values()) total += v;
  Tensor<T> y({1}, static_cast<T>(total / static_cast<double>(n)));
  return make_result<T>(std::move(y), {x.node()}, [n](Node<T>& self) {
    T* d = self.inputs[0]->ensure_grad().data();
    const T g = static_cast<T>(static_cast<double>(self.grad[0]) / static_cast<double>(n));
    for (std::size_t i = 0; i < n; ++i) d[i] += g;
  });
}

template <typename T>
Var<T> weighted_sum(const Var<T>& x, const Tensor<T>& weights) {
  if (x.value().size() != weights.size()) throw ConfigError("weighted_sum: size mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) total += static_cast<double>(x.value()[i]) * weights[i];
  Tensor<T> y({1}, static_cast<T>(total));
  auto w = std::make_shared<Tensor<T>>(weights);
  return make_result<T>(std::move(y), {x.node()}, [w](Node<T>& self) {
    T* d = self.inputs[0]->ensure_grad().data();
    for (std::size_t i = 0; i < w->size(); ++i) d[i] += self.grad[0] * (*w)[i];
  });
}

#define MASSSEG_INSTANTIATE_OPS(T)                                                                            \
  template class Var<T>;                                                                                      \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&, int);                                   \
  template Var<T> conv_transpose2x2(const Var<T>&, const Var<T>&, const Var<T>&);                             \
  template Var<T> max_pool2(const Var<T>&);                                                                   \
  template Var<T> relu(const Var<T>&);                                                                        \
  template Var<T> sigmoid(const Var<T>&);                                                                     \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                          \
  template Var<T> concat_channels(const std::vector<Var<T>>&);                                                \
  template Var<T> batch_norm(const Var<T>&, const Var<T>&, const Var<T>&, Tensor<T>&, Tensor<T>&,             \
                             const BatchNormSettings&);                                                       \
  template Var<T> binary_cross_entropy(const Var<T>&, const Tensor<T>&, double);                              \
  template Var<T> mean(const Var<T>&);                                                                        \
  template Var<T> weighted_sum(const Var<T>&, const Tensor<T>&);

MASSSEG_INSTANTIATE_OPS(float)
MASSSEG_INSTANTIATE_OPS(double)

}  // namespace massseg::ag
