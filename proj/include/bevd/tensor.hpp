#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace bevd {

using Shape = std::vector<int>;

int shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

class GradSink;

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Accumulates parent gradients given the gradient w.r.t. this node.
  std::function<void(const std::vector<double>&, GradSink&)> backward;
  // Filled by backward() on requires-grad leaves; empty otherwise.
  std::vector<double> grad;
};

// Thread-local switch: ops recorded only while enabled.
bool grad_enabled();
void set_grad_enabled(bool on);

}  // namespace detail

/// Dense row-major tensor of doubles participating in a dynamically
/// recorded reverse-mode differentiation graph. Value-semantic handle;
/// copies share the underlying node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  int dim(int i) const { return shape().at(static_cast<size_t>(i)); }
  int numel() const;
  bool requires_grad() const;

  std::span<const double> data() const;
  // In-place access for leaf tensors (parameters). Rejected on op outputs.
  std::span<double> mutable_data();

  double value() const;  // scalar tensors only
  double at(std::initializer_list<int> idx) const;

  /// Gradient of the most recent backward() pass. Present only on
  /// requires-grad leaves.
  std::span<const double> grad() const;
  bool has_grad() const;
  void clear_grad();

  Tensor detach() const;
  Tensor clone() const;  // deep copy, detached leaf
  Tensor reshape(Shape shape) const;

  const void* id() const { return node_.get(); }
  detail::Node* node() const { return node_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::Node> node_;

  friend Tensor make_op(Shape shape, std::vector<double> data,
                        std::vector<Tensor> parents,
                        std::function<void(const std::vector<double>&, GradSink&)> bw);
};

/// Gradient accumulator used during a backward pass. Buffers are keyed by
/// graph node and zero-initialized on first touch.
class GradSink {
 public:
  std::vector<double>& buf(const detail::Node* n);
  std::vector<double>* peek(const detail::Node* n);  // nullptr if absent
  void release(const detail::Node* n);
  std::unordered_map<const detail::Node*, std::vector<double>> take();

 private:
  std::unordered_map<const detail::Node*, std::vector<double>> bufs_;
};

using GradMap = std::unordered_map<const void*, std::vector<double>>;

/// Reverse-mode pass: fills grad() on every requires-grad leaf reachable
/// from `loss`. The loss must be scalar.
void backward(const Tensor& loss);

/// Same pass, but gradients are returned keyed by Tensor::id() and no
/// tensor state is touched. Safe to run concurrently on disjoint graphs
/// that share read-only leaves.
GradMap backward_collect(const Tensor& loss);

struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);
Tensor add_scalar(const Tensor& x, double c);
Tensor const_minus(double c, const Tensor& x);  // c - x
Tensor abs(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor sqrt_guarded(const Tensor& x);     // sqrt(max(x,0)); zero grad at 0
Tensor log_clamped(const Tensor& x);      // log(max(x, 1e-12))
Tensor pow_const(const Tensor& x, double p);  // x >= 0 expected
Tensor recip_floor(const Tensor& x, double floor);  // 1 / max(x, floor)

// ---- reductions ----
Tensor sum_all(const Tensor& x);   // -> scalar
Tensor mean_all(const Tensor& x);  // -> scalar

// ---- structure ----
Tensor concat_channels(const Tensor& a, const Tensor& b);  // [C1+C2,H,W]
Tensor slice_channel(const Tensor& x, int c);              // [C,H,W] -> [H,W]
Tensor channel_sum(const Tensor& x);                       // [C,H,W] -> [H,W]
enum class Pool { kMean, kMax };
Tensor channel_pool(const Tensor& x, Pool mode);           // [C,H,W] -> [H,W]
Tensor scale_channels(const Tensor& x, const Tensor& s);   // x[C,H,W] * s[H,W]

// ---- spatial ----
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              int stride, int padding);
Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 double eps);
Tensor avgpool2x(const Tensor& x);

// ---- similarity ----
/// Pairwise cosine similarity between the channel vectors of all flattened
/// spatial positions. Output is [H*W, H*W], symmetric, diagonal exactly 1.
/// Positions with norm below 1e-12 compare as 0 against everything else.
Tensor affinity(const Tensor& f);

/// Mean absolute difference between the cosine-similarity matrices of two
/// equally shaped maps, computed without materializing either matrix.
Tensor affinity_l1(const Tensor& f_teacher, const Tensor& f_student);

// ---- losses ----
Tensor smooth_l1_mean(const Tensor& pred, const Tensor& target, double delta);

}  // namespace bevd
