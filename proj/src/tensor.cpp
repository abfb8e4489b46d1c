#include "bevd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>

namespace bevd {

int shape_numel(const Shape& s) {
  int n = 1;
  for (int d : s) {
    if (d <= 0) throw std::runtime_error("tensor: non-positive dim in " + shape_str(s));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

namespace detail {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }
void set_grad_enabled(bool on) { g_grad_enabled = on; }

}  // namespace detail

using detail::Node;

Tensor make_op(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
               std::function<void(const std::vector<double>&, GradSink&)> bw);

namespace {

// Reusable scratch for the spatial kernels. Two independent pools because
// conv backward needs two live buffers at once.
std::vector<double>& scratch_a(size_t n) {
  thread_local std::vector<double> buf;
  buf.assign(n, 0.0);
  return buf;
}
std::vector<double>& scratch_b(size_t n) {
  thread_local std::vector<double> buf;
  buf.assign(n, 0.0);
  return buf;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::runtime_error(std::string(op) + ": shape mismatch " +
                             shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

double sgn(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

}  // namespace

NoGradGuard::NoGradGuard() : prev_(detail::grad_enabled()) {
  detail::set_grad_enabled(false);
}
NoGradGuard::~NoGradGuard() { detail::set_grad_enabled(prev_); }

// ---- Tensor basics ----

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  int n = shape_numel(shape);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data.assign(static_cast<size_t>(n), value);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  int n = shape_numel(shape);
  if (static_cast<size_t>(n) != data.size())
    throw std::runtime_error("tensor: data size " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({}, {value}, requires_grad);
}

const Shape& Tensor::shape() const {
  if (!node_) throw std::runtime_error("tensor: undefined");
  return node_->shape;
}

int Tensor::numel() const { return static_cast<int>(node_->data.size()); }

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

std::span<const double> Tensor::data() const {
  if (!node_) throw std::runtime_error("tensor: undefined");
  return {node_->data.data(), node_->data.size()};
}

std::span<double> Tensor::mutable_data() {
  if (!node_) throw std::runtime_error("tensor: undefined");
  if (node_->backward)
    throw std::runtime_error("tensor: in-place write on an op output");
  return {node_->data.data(), node_->data.size()};
}

double Tensor::value() const {
  if (numel() != 1)
    throw std::runtime_error("tensor: value() needs a scalar, got " + shape_str(shape()));
  return node_->data[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
  const Shape& s = shape();
  if (idx.size() != s.size())
    throw std::runtime_error("tensor: at() rank mismatch for " + shape_str(s));
  size_t flat = 0;
  size_t i = 0;
  for (int v : idx) {
    if (v < 0 || v >= s[i])
      throw std::runtime_error("tensor: index out of range for " + shape_str(s));
    flat = flat * static_cast<size_t>(s[i]) + static_cast<size_t>(v);
    ++i;
  }
  return node_->data[flat];
}

std::span<const double> Tensor::grad() const {
  if (!node_ || node_->grad.empty())
    throw std::runtime_error("tensor: no gradient recorded");
  return {node_->grad.data(), node_->grad.size()};
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

void Tensor::clear_grad() {
  if (node_) node_->grad.clear();
}

Tensor Tensor::detach() const {
  if (!node_) return Tensor();
  auto n = std::make_shared<Node>();
  n->shape = node_->shape;
  n->data = node_->data;
  return Tensor(std::move(n));
}

Tensor Tensor::clone() const { return detach(); }

Tensor Tensor::reshape(Shape shape) const {
  int n = shape_numel(shape);
  if (n != numel())
    throw std::runtime_error("tensor: reshape " + shape_str(this->shape()) + " -> " +
                             shape_str(shape) + " changes element count");
  auto self = node_;
  Tensor out = make_op(std::move(shape), node_->data, {*this},
                       [self](const std::vector<double>& g, GradSink& sink) {
                         if (!self->requires_grad) return;
                         auto& gb = sink.buf(self.get());
                         for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                       });
  return out;
}

// ---- op construction and backward machinery ----

Tensor make_op(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
               std::function<void(const std::vector<double>&, GradSink&)> bw) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool rg = false;
  for (const auto& p : parents) rg = rg || p.requires_grad();
  rg = rg && detail::grad_enabled();
  node->requires_grad = rg;
  if (rg) {
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node_);
    node->backward = std::move(bw);
  }
  return Tensor(std::move(node));
}

std::vector<double>& GradSink::buf(const Node* n) {
  auto it = bufs_.find(n);
  if (it == bufs_.end()) {
    it = bufs_.emplace(n, std::vector<double>(n->data.size(), 0.0)).first;
  }
  return it->second;
}

std::vector<double>* GradSink::peek(const Node* n) {
  auto it = bufs_.find(n);
  return it == bufs_.end() ? nullptr : &it->second;
}

void GradSink::release(const Node* n) { bufs_.erase(n); }

std::unordered_map<const Node*, std::vector<double>> GradSink::take() {
  return std::move(bufs_);
}

namespace {

std::vector<Node*> topo_order(Node* root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> done;
  // Explicit stack; second visit emits the node after its parents.
  std::vector<std::pair<Node*, bool>> stack;
  stack.push_back({root, false});
  while (!stack.empty()) {
    auto [n, expanded] = stack.back();
    stack.pop_back();
    if (done.count(n)) continue;
    if (expanded) {
      done.insert(n);
      order.push_back(n);
      continue;
    }
    stack.push_back({n, true});
    for (auto& p : n->parents) {
      if (p->requires_grad && !done.count(p.get())) stack.push_back({p.get(), false});
    }
  }
  return order;  // parents before children
}

void run_backward(Node* root, GradSink& sink) {
  std::vector<Node*> order = topo_order(root);
  sink.buf(root)[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    std::vector<double>* g = sink.peek(n);
    if (!g) continue;
    if (n->backward) {
      n->backward(*g, sink);
      // Interior gradients are dead once propagated; keep memory flat.
      sink.release(n);
    }
  }
}

}  // namespace

void backward(const Tensor& loss) {
  if (loss.numel() != 1)
    throw std::runtime_error("backward: loss must be scalar, got " + shape_str(loss.shape()));
  Node* root = loss.node();
  if (!root->requires_grad)
    throw std::runtime_error("backward: loss does not require grad");
  GradSink sink;
  run_backward(root, sink);
  for (auto& [n, g] : sink.take()) {
    Node* mut = const_cast<Node*>(n);
    if (mut->requires_grad && !mut->backward) {
      if (mut->grad.empty()) {
        mut->grad = std::move(g);
      } else {
        for (size_t i = 0; i < g.size(); ++i) mut->grad[i] += g[i];
      }
    }
  }
}

GradMap backward_collect(const Tensor& loss) {
  if (loss.numel() != 1)
    throw std::runtime_error("backward: loss must be scalar, got " + shape_str(loss.shape()));
  Node* root = loss.node();
  if (!root->requires_grad)
    throw std::runtime_error("backward: loss does not require grad");
  GradSink sink;
  run_backward(root, sink);
  GradMap out;
  for (auto& [n, g] : sink.take()) {
    if (n->requires_grad && !n->backward) out[static_cast<const void*>(n)] = std::move(g);
  }
  return out;
}

// ---- elementwise ----

namespace {

template <class Fwd, class Bwd>
Tensor binary_ew(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, Bwd bwd) {
  check_same_shape(a, b, name);
  std::vector<double> out(a.data().size());
  const auto da = a.data();
  const auto db = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(da[i], db[i]);
  return make_op(a.shape(), std::move(out), {a, b},
                 [bwd, a, b](const std::vector<double>& g, GradSink& sink) {
                   bwd(g, a, b, sink);
                 });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_ew(a, b, "add",
                   [](double x, double y) { return x + y; },
                   [](const std::vector<double>& g, const Tensor& a, const Tensor& b,
                      GradSink& sink) {
                     if (a.node()->requires_grad) {
                       auto& ga = sink.buf(a.node());
                       for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                     }
                     if (b.node()->requires_grad) {
                       auto& gb = sink.buf(b.node());
                       for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                     }
                   });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_ew(a, b, "sub",
                   [](double x, double y) { return x - y; },
                   [](const std::vector<double>& g, const Tensor& a, const Tensor& b,
                      GradSink& sink) {
                     if (a.node()->requires_grad) {
                       auto& ga = sink.buf(a.node());
                       for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                     }
                     if (b.node()->requires_grad) {
                       auto& gb = sink.buf(b.node());
                       for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                     }
                   });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_ew(a, b, "mul",
                   [](double x, double y) { return x * y; },
                   [](const std::vector<double>& g, const Tensor& a, const Tensor& b,
                      GradSink& sink) {
                     const auto da = a.data();
                     const auto db = b.data();
                     if (a.node()->requires_grad) {
                       auto& ga = sink.buf(a.node());
                       for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * db[i];
                     }
                     if (b.node()->requires_grad) {
                       auto& gb = sink.buf(b.node());
                       for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * da[i];
                     }
                   });
}

namespace {

template <class Fwd, class Grad>
Tensor unary_ew(const Tensor& x, Fwd fwd, Grad grad_at) {
  const auto d = x.data();
  std::vector<double> out(d.size());
  for (size_t i = 0; i < d.size(); ++i) out[i] = fwd(d[i]);
  return make_op(x.shape(), std::move(out), {x},
                 [x, grad_at](const std::vector<double>& g, GradSink& sink) {
                   if (!x.node()->requires_grad) return;
                   auto& gx = sink.buf(x.node());
                   const auto d = x.data();
                   for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * grad_at(d[i]);
                 });
}

}  // namespace

Tensor scale(const Tensor& x, double c) {
  return unary_ew(x, [c](double v) { return v * c; }, [c](double) { return c; });
}

Tensor add_scalar(const Tensor& x, double c) {
  return unary_ew(x, [c](double v) { return v + c; }, [](double) { return 1.0; });
}

Tensor const_minus(double c, const Tensor& x) {
  return unary_ew(x, [c](double v) { return c - v; }, [](double) { return -1.0; });
}

Tensor abs(const Tensor& x) {
  return unary_ew(x, [](double v) { return std::fabs(v); },
                  [](double v) { return sgn(v); });
}

Tensor relu(const Tensor& x) {
  return unary_ew(x, [](double v) { return v > 0.0 ? v : 0.0; },
                  [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  const auto d = x.data();
  std::vector<double> out(d.size());
  for (size_t i = 0; i < d.size(); ++i) {
    double v = d[i];
    out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                      : std::exp(v) / (1.0 + std::exp(v));
  }
  auto vals = out;
  return make_op(x.shape(), std::move(out), {x},
                 [x, vals = std::move(vals)](const std::vector<double>& g, GradSink& sink) {
                   if (!x.node()->requires_grad) return;
                   auto& gx = sink.buf(x.node());
                   for (size_t i = 0; i < g.size(); ++i)
                     gx[i] += g[i] * vals[i] * (1.0 - vals[i]);
                 });
}

Tensor sqrt_guarded(const Tensor& x) {
  const auto d = x.data();
  std::vector<double> out(d.size());
  for (size_t i = 0; i < d.size(); ++i) out[i] = std::sqrt(std::max(d[i], 0.0));
  auto vals = out;
  return make_op(x.shape(), std::move(out), {x},
                 [x, vals = std::move(vals)](const std::vector<double>& g, GradSink& sink) {
                   if (!x.node()->requires_grad) return;
                   auto& gx = sink.buf(x.node());
                   const auto d = x.data();
                   for (size_t i = 0; i < g.size(); ++i)
                     if (d[i] > 0.0) gx[i] += g[i] * 0.5 / vals[i];
                 });
}

Tensor log_clamped(const Tensor& x) {
  return unary_ew(x, [](double v) { return std::log(v > 1e-12 ? v : 1e-12); },
                  [](double v) { return v > 1e-12 ? 1.0 / v : 0.0; });
}

Tensor pow_const(const Tensor& x, double p) {
  if (p == 0.0) {
    const auto d = x.data();
    std::vector<double> out(d.size(), 1.0);
    return make_op(x.shape(), std::move(out), {x},
                   [](const std::vector<double>&, GradSink&) {});
  }
  return unary_ew(x,
                  [p](double v) { return std::pow(std::max(v, 0.0), p); },
                  [p](double v) {
                    double b = std::max(v, 0.0);
                    if (b == 0.0) return p >= 1.0 ? (p == 1.0 ? 1.0 : 0.0) : 0.0;
                    return p * std::pow(b, p - 1.0);
                  });
}

Tensor recip_floor(const Tensor& x, double floor) {
  if (floor <= 0.0) throw std::runtime_error("recip_floor: floor must be positive");
  return unary_ew(x,
                  [floor](double v) { return 1.0 / std::max(v, floor); },
                  [floor](double v) {
                    if (v <= floor) return 0.0;
                    return -1.0 / (v * v);
                  });
}

// ---- reductions ----

Tensor sum_all(const Tensor& x) {
  const auto d = x.data();
  double s = 0.0;
  for (double v : d) s += v;
  return make_op({}, {s}, {x}, [x](const std::vector<double>& g, GradSink& sink) {
    if (!x.node()->requires_grad) return;
    auto& gx = sink.buf(x.node());
    double gv = g[0];
    for (auto& v : gx) v += gv;
  });
}

Tensor mean_all(const Tensor& x) {
  return scale(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

// ---- structure ----

namespace {

void check_chw(const Tensor& t, const char* op) {
  if (t.rank() != 3)
    throw std::runtime_error(std::string(op) + ": expected [C,H,W], got " +
                             shape_str(t.shape()));
}

}  // namespace

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  check_chw(a, "concat_channels");
  check_chw(b, "concat_channels");
  if (a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2))
    throw std::runtime_error("concat_channels: spatial mismatch " +
                             shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  int ca = a.dim(0), cb = b.dim(0), h = a.dim(1), w = a.dim(2);
  std::vector<double> out;
  out.reserve(static_cast<size_t>(ca + cb) * h * w);
  out.insert(out.end(), a.data().begin(), a.data().end());
  out.insert(out.end(), b.data().begin(), b.data().end());
  size_t na = a.data().size();
  return make_op({ca + cb, h, w}, std::move(out), {a, b},
                 [a, b, na](const std::vector<double>& g, GradSink& sink) {
                   if (a.node()->requires_grad) {
                     auto& ga = sink.buf(a.node());
                     for (size_t i = 0; i < na; ++i) ga[i] += g[i];
                   }
                   if (b.node()->requires_grad) {
                     auto& gb = sink.buf(b.node());
                     for (size_t i = na; i < g.size(); ++i) gb[i - na] += g[i];
                   }
                 });
}

Tensor slice_channel(const Tensor& x, int c) {
  check_chw(x, "slice_channel");
  if (c < 0 || c >= x.dim(0))
    throw std::runtime_error("slice_channel: channel " + std::to_string(c) +
                             " out of range for " + shape_str(x.shape()));
  int h = x.dim(1), w = x.dim(2);
  size_t plane = static_cast<size_t>(h) * w;
  size_t off = static_cast<size_t>(c) * plane;
  std::vector<double> out(x.data().begin() + off, x.data().begin() + off + plane);
  return make_op({h, w}, std::move(out), {x},
                 [x, off](const std::vector<double>& g, GradSink& sink) {
                   if (!x.node()->requires_grad) return;
                   auto& gx = sink.buf(x.node());
                   for (size_t i = 0; i < g.size(); ++i) gx[off + i] += g[i];
                 });
}

Tensor channel_sum(const Tensor& x) {
  check_chw(x, "channel_sum");
  int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  size_t plane = static_cast<size_t>(h) * w;
  std::vector<double> out(plane, 0.0);
  const auto d = x.data();
  for (int ch = 0; ch < c; ++ch) {
    const double* p = d.data() + static_cast<size_t>(ch) * plane;
    for (size_t i = 0; i < plane; ++i) out[i] += p[i];
  }
  return make_op({h, w}, std::move(out), {x},
                 [x, c, plane](const std::vector<double>& g, GradSink& sink) {
                   if (!x.node()->requires_grad) return;
                   auto& gx = sink.buf(x.node());
                   for (int ch = 0; ch < c; ++ch) {
                     double* p = gx.data() + static_cast<size_t>(ch) * plane;
                     for (size_t i = 0; i < plane; ++i) p[i] += g[i];
                   }
                 });
}

Tensor channel_pool(const Tensor& x, Pool mode) {
  check_chw(x, "channel_pool");
  int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  size_t plane = static_cast<size_t>(h) * w;
  if (mode == Pool::kMean) return scale(channel_sum(x), 1.0 / static_cast<double>(c));
  const auto d = x.data();
  std::vector<double> out(plane);
  std::vector<int> arg(plane, 0);
  for (size_t i = 0; i < plane; ++i) {
    double best = d[i];
    int bi = 0;
    for (int ch = 1; ch < c; ++ch) {
      double v = d[static_cast<size_t>(ch) * plane + i];
      if (v > best) {
        best = v;
        bi = ch;
      }
    }
    out[i] = best;
    arg[i] = bi;
  }
  return make_op({h, w}, std::move(out), {x},
                 [x, plane, arg = std::move(arg)](const std::vector<double>& g,
                                                  GradSink& sink) {
                   if (!x.node()->requires_grad) return;
                   auto& gx = sink.buf(x.node());
                   for (size_t i = 0; i < g.size(); ++i)
                     gx[static_cast<size_t>(arg[i]) * plane + i] += g[i];
                 });
}

Tensor scale_channels(const Tensor& x, const Tensor& s) {
  check_chw(x, "scale_channels");
  if (s.rank() != 2 || s.dim(0) != x.dim(1) || s.dim(1) != x.dim(2))
    throw std::runtime_error("scale_channels: scale map " + shape_str(s.shape()) +
                             " does not match " + shape_str(x.shape()));
  int c = x.dim(0);
  size_t plane = s.data().size();
  const auto dx = x.data();
  const auto ds = s.data();
  std::vector<double> out(dx.size());
  for (int ch = 0; ch < c; ++ch) {
    size_t off = static_cast<size_t>(ch) * plane;
    for (size_t i = 0; i < plane; ++i) out[off + i] = dx[off + i] * ds[i];
  }
  return make_op(x.shape(), std::move(out), {x, s},
                 [x, s, c, plane](const std::vector<double>& g, GradSink& sink) {
                   const auto dx = x.data();
                   const auto ds = s.data();
                   if (x.node()->requires_grad) {
                     auto& gx = sink.buf(x.node());
                     for (int ch = 0; ch < c; ++ch) {
                       size_t off = static_cast<size_t>(ch) * plane;
                       for (size_t i = 0; i < plane; ++i) gx[off + i] += g[off + i] * ds[i];
                     }
                   }
                   if (s.node()->requires_grad) {
                     auto& gs = sink.buf(s.node());
                     for (int ch = 0; ch < c; ++ch) {
                       size_t off = static_cast<size_t>(ch) * plane;
                       for (size_t i = 0; i < plane; ++i) gs[i] += g[off + i] * dx[off + i];
                     }
                   }
                 });
}

// ---- spatial ----

namespace {

void pad_plane_copy(const Tensor& input, std::vector<double>& padded, int ci, int h,
                    int w, int padding, int wp, size_t plane_p) {
  const auto din = input.data();
  for (int c = 0; c < ci; ++c)
    for (int y = 0; y < h; ++y)
      std::memcpy(padded.data() + c * plane_p + (y + padding) * static_cast<size_t>(wp) + padding,
                  din.data() + (static_cast<size_t>(c) * h + y) * w,
                  sizeof(double) * static_cast<size_t>(w));
}

// Stride-1 valid correlation, walked one output row at a time so the [cn x wo]
// accumulator stays cache-hot instead of sweeping whole planes k*k*cm times:
//   out[n][y][x] = bias[n] + sum_{m,ky,kx} ker[n][m][ky][kx] * src[m][y+ky][x+kx]
// Summation order per output element matches the naive m->ky->kx loop exactly,
// so results are bit-identical to it.
void corr_rows_s1(const double* src, int cm, size_t plane_s, int ws,
                  const double* ker, int cn, int k, const double* bias,
                  double* out, int ho, int wo) {
  const size_t plane_o = static_cast<size_t>(ho) * wo;
  std::vector<double> acc(static_cast<size_t>(cn) * wo);
  for (int y = 0; y < ho; ++y) {
    for (int n = 0; n < cn; ++n) {
      double* arow = acc.data() + static_cast<size_t>(n) * wo;
      std::fill(arow, arow + wo, bias ? bias[n] : 0.0);
    }
    for (int m = 0; m < cm; ++m) {
      const double* sp = src + static_cast<size_t>(m) * plane_s;
      for (int ky = 0; ky < k; ++ky) {
        const double* row = sp + static_cast<size_t>(y + ky) * ws;
        for (int n = 0; n < cn; ++n) {
          const double* kp = ker + ((static_cast<size_t>(n) * cm + m) * k + ky) * k;
          double* arow = acc.data() + static_cast<size_t>(n) * wo;
          for (int kx = 0; kx < k; ++kx) {
            const double wv = kp[kx];
            const double* r = row + kx;
            for (int x = 0; x < wo; ++x) arow[x] += wv * r[x];
          }
        }
      }
    }
    for (int n = 0; n < cn; ++n)
      std::memcpy(out + static_cast<size_t>(n) * plane_o + static_cast<size_t>(y) * wo,
                  acc.data() + static_cast<size_t>(n) * wo, sizeof(double) * wo);
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              int stride, int padding) {
  check_chw(input, "conv2d");
  if (kernel.rank() != 4)
    throw std::runtime_error("conv2d: kernel must be [Co,Ci,k,k], got " +
                             shape_str(kernel.shape()));
  if (kernel.dim(2) != kernel.dim(3))
    throw std::runtime_error("conv2d: kernel must be square, got " +
                             shape_str(kernel.shape()));
  if (kernel.dim(1) != input.dim(0))
    throw std::runtime_error("conv2d: kernel expects " + std::to_string(kernel.dim(1)) +
                             " input channels, input has " + std::to_string(input.dim(0)));
  if (bias.rank() != 1 || bias.dim(0) != kernel.dim(0))
    throw std::runtime_error("conv2d: bias must be [Co], got " + shape_str(bias.shape()));
  if (stride < 1) throw std::runtime_error("conv2d: stride must be >= 1");
  if (padding < 0) throw std::runtime_error("conv2d: padding must be >= 0");

  const int ci = input.dim(0), h = input.dim(1), w = input.dim(2);
  const int co = kernel.dim(0), k = kernel.dim(2);
  const int hp = h + 2 * padding, wp = w + 2 * padding;
  const int ho = (hp - k) / stride + 1, wo = (wp - k) / stride + 1;
  if (ho <= 0 || wo <= 0)
    throw std::runtime_error("conv2d: kernel does not fit input");

  const size_t plane_p = static_cast<size_t>(hp) * wp;
  const size_t plane_o = static_cast<size_t>(ho) * wo;

  std::vector<double>& padded = scratch_a(static_cast<size_t>(ci) * plane_p);
  pad_plane_copy(input, padded, ci, h, w, padding, wp, plane_p);

  std::vector<double> out(static_cast<size_t>(co) * plane_o);
  const auto dk = kernel.data();
  const auto db = bias.data();
  if (stride == 1) {
    corr_rows_s1(padded.data(), ci, plane_p, wp, dk.data(), co, k, db.data(),
                 out.data(), ho, wo);
  } else {
    for (int oc = 0; oc < co; ++oc) {
      double* op = out.data() + static_cast<size_t>(oc) * plane_o;
      std::fill(op, op + plane_o, db[oc]);
      for (int c = 0; c < ci; ++c) {
        const double* ip = padded.data() + static_cast<size_t>(c) * plane_p;
        const double* kp = dk.data() + (static_cast<size_t>(oc) * ci + c) * k * k;
        for (int ky = 0; ky < k; ++ky) {
          for (int kx = 0; kx < k; ++kx) {
            const double wv = kp[ky * k + kx];
            for (int y = 0; y < ho; ++y) {
              const double* row = ip + static_cast<size_t>(y * stride + ky) * wp + kx;
              double* orow = op + static_cast<size_t>(y) * wo;
              for (int x = 0; x < wo; ++x) orow[x] += wv * row[x * stride];
            }
          }
        }
      }
    }
  }

  return make_op(
      {co, ho, wo}, std::move(out), {input, kernel, bias},
      [input, kernel, bias, ci, h, w, co, k, hp, wp, ho, wo, stride, padding,
       plane_p, plane_o](const std::vector<double>& g, GradSink& sink) {
        const auto dk = kernel.data();
        const bool need_din = input.node()->requires_grad;
        const bool need_dk = kernel.node()->requires_grad;
        const bool need_db = bias.node()->requires_grad;

        if (need_db) {
          auto& gb = sink.buf(bias.node());
          for (int oc = 0; oc < co; ++oc) {
            const double* gp = g.data() + static_cast<size_t>(oc) * plane_o;
            double s = 0.0;
            for (size_t i = 0; i < plane_o; ++i) s += gp[i];
            gb[oc] += s;
          }
        }

        if (need_dk) {
          std::vector<double>& padded = scratch_a(static_cast<size_t>(ci) * plane_p);
          pad_plane_copy(input, padded, ci, h, w, padding, wp, plane_p);
          auto& gk = sink.buf(kernel.node());
          if (stride == 1 && k == 3) {
            // One pass over both planes per (oc,c) with nine independent
            // accumulator chains; term order per tap is still y-then-x, so the
            // sums are bit-identical to the naive version.
            for (int oc = 0; oc < co; ++oc) {
              const double* gp = g.data() + static_cast<size_t>(oc) * plane_o;
              for (int c = 0; c < ci; ++c) {
                const double* ip = padded.data() + static_cast<size_t>(c) * plane_p;
                double a00 = 0, a01 = 0, a02 = 0, a10 = 0, a11 = 0, a12 = 0,
                       a20 = 0, a21 = 0, a22 = 0;
                for (int y = 0; y < ho; ++y) {
                  const double* grow = gp + static_cast<size_t>(y) * wo;
                  const double* r0 = ip + static_cast<size_t>(y) * wp;
                  const double* r1 = r0 + wp;
                  const double* r2 = r1 + wp;
                  for (int x = 0; x < wo; ++x) {
                    const double gv = grow[x];
                    a00 += gv * r0[x];
                    a01 += gv * r0[x + 1];
                    a02 += gv * r0[x + 2];
                    a10 += gv * r1[x];
                    a11 += gv * r1[x + 1];
                    a12 += gv * r1[x + 2];
                    a20 += gv * r2[x];
                    a21 += gv * r2[x + 1];
                    a22 += gv * r2[x + 2];
                  }
                }
                double* kgp = gk.data() + (static_cast<size_t>(oc) * ci + c) * 9;
                kgp[0] += a00;
                kgp[1] += a01;
                kgp[2] += a02;
                kgp[3] += a10;
                kgp[4] += a11;
                kgp[5] += a12;
                kgp[6] += a20;
                kgp[7] += a21;
                kgp[8] += a22;
              }
            }
          } else {
            for (int oc = 0; oc < co; ++oc) {
              const double* gp = g.data() + static_cast<size_t>(oc) * plane_o;
              for (int c = 0; c < ci; ++c) {
                const double* ip = padded.data() + static_cast<size_t>(c) * plane_p;
                double* kgp = gk.data() + (static_cast<size_t>(oc) * ci + c) * k * k;
                for (int ky = 0; ky < k; ++ky) {
                  for (int kx = 0; kx < k; ++kx) {
                    double s = 0.0;
                    for (int y = 0; y < ho; ++y) {
                      const double* row = ip + static_cast<size_t>(y * stride + ky) * wp + kx;
                      const double* grow = gp + static_cast<size_t>(y) * wo;
                      if (stride == 1) {
                        for (int x = 0; x < wo; ++x) s += grow[x] * row[x];
                      } else {
                        for (int x = 0; x < wo; ++x) s += grow[x] * row[x * stride];
                      }
                    }
                    kgp[ky * k + kx] += s;
                  }
                }
              }
            }
          }
        }

        if (need_din) {
          std::vector<double>& dpad = scratch_b(static_cast<size_t>(ci) * plane_p);
          if (stride == 1) {
            // dL/d(padded input) is the full correlation of the upstream grad
            // with the kernel flipped and its channel axes swapped. Pad the
            // grad by k-1 and reuse the row-blocked kernel. Tap order differs
            // from the naive scatter loop by rounding only.
            const int hq = ho + 2 * (k - 1), wq = wo + 2 * (k - 1);
            const size_t plane_q = static_cast<size_t>(hq) * wq;
            std::vector<double> gq(static_cast<size_t>(co) * plane_q, 0.0);
            for (int oc = 0; oc < co; ++oc)
              for (int y = 0; y < ho; ++y)
                std::memcpy(gq.data() + oc * plane_q +
                                (y + k - 1) * static_cast<size_t>(wq) + (k - 1),
                            g.data() + static_cast<size_t>(oc) * plane_o +
                                static_cast<size_t>(y) * wo,
                            sizeof(double) * static_cast<size_t>(wo));
            std::vector<double> kflip(static_cast<size_t>(ci) * co * k * k);
            for (int c = 0; c < ci; ++c)
              for (int oc = 0; oc < co; ++oc)
                for (int a = 0; a < k; ++a)
                  for (int b = 0; b < k; ++b)
                    kflip[((static_cast<size_t>(c) * co + oc) * k + a) * k + b] =
                        dk[((static_cast<size_t>(oc) * ci + c) * k + (k - 1 - a)) * k +
                           (k - 1 - b)];
            corr_rows_s1(gq.data(), co, plane_q, wq, kflip.data(), ci, k, nullptr,
                         dpad.data(), hp, wp);
          } else {
            for (int oc = 0; oc < co; ++oc) {
              const double* gp = g.data() + static_cast<size_t>(oc) * plane_o;
              for (int c = 0; c < ci; ++c) {
                double* dp = dpad.data() + static_cast<size_t>(c) * plane_p;
                const double* kp = dk.data() + (static_cast<size_t>(oc) * ci + c) * k * k;
                for (int ky = 0; ky < k; ++ky) {
                  for (int kx = 0; kx < k; ++kx) {
                    const double wv = kp[ky * k + kx];
                    for (int y = 0; y < ho; ++y) {
                      double* row = dp + static_cast<size_t>(y * stride + ky) * wp + kx;
                      const double* grow = gp + static_cast<size_t>(y) * wo;
                      for (int x = 0; x < wo; ++x) row[x * stride] += wv * grow[x];
                    }
                  }
                }
              }
            }
          }
          auto& gi = sink.buf(input.node());
          for (int c = 0; c < ci; ++c)
            for (int y = 0; y < h; ++y) {
              const double* src =
                  dpad.data() + c * plane_p + (y + padding) * static_cast<size_t>(wp) + padding;
              double* dst = gi.data() + (static_cast<size_t>(c) * h + y) * w;
              for (int x = 0; x < w; ++x) dst[x] += src[x];
            }
        }
      });
}

Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  check_chw(x, "batchnorm");
  int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (gamma.rank() != 1 || gamma.dim(0) != c || beta.rank() != 1 || beta.dim(0) != c)
    throw std::runtime_error("batchnorm: gamma/beta must be [C] for " +
                             shape_str(x.shape()));
  if (eps <= 0.0) throw std::runtime_error("batchnorm: eps must be positive");
  const size_t plane = static_cast<size_t>(h) * w;
  const double n = static_cast<double>(plane);

  const auto dx = x.data();
  const auto dg = gamma.data();
  const auto db = beta.data();
  std::vector<double> out(dx.size());
  std::vector<double> xhat(dx.size());
  std::vector<double> inv_std(static_cast<size_t>(c));
  for (int ch = 0; ch < c; ++ch) {
    const double* p = dx.data() + static_cast<size_t>(ch) * plane;
    double mean = 0.0;
    for (size_t i = 0; i < plane; ++i) mean += p[i];
    mean /= n;
    double var = 0.0;
    for (size_t i = 0; i < plane; ++i) {
      double d = p[i] - mean;
      var += d * d;
    }
    var /= n;
    double is = 1.0 / std::sqrt(var + eps);
    inv_std[ch] = is;
    double* xh = xhat.data() + static_cast<size_t>(ch) * plane;
    double* op = out.data() + static_cast<size_t>(ch) * plane;
    for (size_t i = 0; i < plane; ++i) {
      xh[i] = (p[i] - mean) * is;
      op[i] = dg[ch] * xh[i] + db[ch];
    }
  }

  return make_op(x.shape(), std::move(out), {x, gamma, beta},
                 [x, gamma, beta, c, plane, n, xhat = std::move(xhat),
                  inv_std = std::move(inv_std)](const std::vector<double>& g, GradSink& sink) {
                   const auto dg = gamma.data();
                   if (beta.node()->requires_grad) {
                     auto& gb = sink.buf(beta.node());
                     for (int ch = 0; ch < c; ++ch) {
                       const double* gp = g.data() + static_cast<size_t>(ch) * plane;
                       double s = 0.0;
                       for (size_t i = 0; i < plane; ++i) s += gp[i];
                       gb[ch] += s;
                     }
                   }
                   if (gamma.node()->requires_grad) {
                     auto& gg = sink.buf(gamma.node());
                     for (int ch = 0; ch < c; ++ch) {
                       const double* gp = g.data() + static_cast<size_t>(ch) * plane;
                       const double* xh = xhat.data() + static_cast<size_t>(ch) * plane;
                       double s = 0.0;
                       for (size_t i = 0; i < plane; ++i) s += gp[i] * xh[i];
                       gg[ch] += s;
                     }
                   }
                   if (x.node()->requires_grad) {
                     auto& gx = sink.buf(x.node());
                     for (int ch = 0; ch < c; ++ch) {
                       const double* gp = g.data() + static_cast<size_t>(ch) * plane;
                       const double* xh = xhat.data() + static_cast<size_t>(ch) * plane;
                       double sum_g = 0.0, sum_gx = 0.0;
                       for (size_t i = 0; i < plane; ++i) {
                         sum_g += gp[i];
                         sum_gx += gp[i] * xh[i];
                       }
                       const double mg = sum_g / n, mgx = sum_gx / n;
                       const double a = dg[ch] * inv_std[ch];
                       double* gxp = gx.data() + static_cast<size_t>(ch) * plane;
                       for (size_t i = 0; i < plane; ++i)
                         gxp[i] += a * (gp[i] - mg - xh[i] * mgx);
                     }
                   }
                 });
}

Tensor avgpool2x(const Tensor& x) {
  check_chw(x, "avgpool2x");
  int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h % 2 != 0 || w % 2 != 0)
    throw std::runtime_error("avgpool2x: spatial dims must be even, got " +
                             shape_str(x.shape()));
  int ho = h / 2, wo = w / 2;
  const auto d = x.data();
  std::vector<double> out(static_cast<size_t>(c) * ho * wo);
  for (int ch = 0; ch < c; ++ch) {
    const double* ip = d.data() + static_cast<size_t>(ch) * h * w;
    double* op = out.data() + static_cast<size_t>(ch) * ho * wo;
    for (int y = 0; y < ho; ++y) {
      const double* r0 = ip + static_cast<size_t>(2 * y) * w;
      const double* r1 = r0 + w;
      for (int xo = 0; xo < wo; ++xo)
        op[y * wo + xo] = 0.25 * (r0[2 * xo] + r0[2 * xo + 1] + r1[2 * xo] + r1[2 * xo + 1]);
    }
  }
  return make_op({c, ho, wo}, std::move(out), {x},
                 [x, c, h, w, ho, wo](const std::vector<double>& g, GradSink& sink) {
                   if (!x.node()->requires_grad) return;
                   auto& gx = sink.buf(x.node());
                   for (int ch = 0; ch < c; ++ch) {
                     const double* gp = g.data() + static_cast<size_t>(ch) * ho * wo;
                     double* xp = gx.data() + static_cast<size_t>(ch) * h * w;
                     for (int y = 0; y < ho; ++y)
                       for (int xo = 0; xo < wo; ++xo) {
                         double v = 0.25 * gp[y * wo + xo];
                         xp[(2 * y) * w + 2 * xo] += v;
                         xp[(2 * y) * w + 2 * xo + 1] += v;
                         xp[(2 * y + 1) * w + 2 * xo] += v;
                         xp[(2 * y + 1) * w + 2 * xo + 1] += v;
                       }
                   }
                 });
}

// ---- similarity ----

namespace {

constexpr double kNormFloor = 1e-12;

// Position-major normalized copies: U[p*c + j] = f[j][p] / max(||f[:,p]||, floor).
// keep[p] records whether the norm cleared the floor (live norm-gradient path).
void normalize_positions(const Tensor& f, std::vector<double>& u,
                         std::vector<double>& inv_n, std::vector<char>& keep) {
  const int c = f.dim(0);
  const size_t plane = static_cast<size_t>(f.dim(1)) * f.dim(2);
  const auto d = f.data();
  u.resize(plane * c);
  inv_n.resize(plane);
  keep.resize(plane);
  for (size_t p = 0; p < plane; ++p) {
    double s = 0.0;
    for (int j = 0; j < c; ++j) {
      double v = d[static_cast<size_t>(j) * plane + p];
      s += v * v;
    }
    double norm = std::sqrt(s);
    keep[p] = norm > kNormFloor ? 1 : 0;
    double in = 1.0 / std::max(norm, kNormFloor);
    inv_n[p] = in;
    for (int j = 0; j < c; ++j) u[p * c + j] = d[static_cast<size_t>(j) * plane + p] * in;
  }
}

inline double dot_c(const double* a, const double* b, int c) {
  double s = 0.0;
  for (int j = 0; j < c; ++j) s += a[j] * b[j];
  return s;
}

// Scatter a position-major gradient back to [C,H,W] layout.
void scatter_grad(std::vector<double>& dst, const std::vector<double>& gu, int c,
                  size_t plane) {
  for (size_t p = 0; p < plane; ++p)
    for (int j = 0; j < c; ++j) dst[static_cast<size_t>(j) * plane + p] += gu[p * c + j];
}

}  // namespace

Tensor affinity(const Tensor& f) {
  check_chw(f, "affinity");
  const int c = f.dim(0);
  const size_t plane = static_cast<size_t>(f.dim(1)) * f.dim(2);
  std::vector<double> u, inv_n;
  std::vector<char> keep;
  normalize_positions(f, u, inv_n, keep);

  std::vector<double> out(plane * plane);
  for (size_t p = 0; p < plane; ++p) {
    out[p * plane + p] = 1.0;
    for (size_t q = p + 1; q < plane; ++q) {
      double v = dot_c(&u[p * c], &u[q * c], c);
      out[p * plane + q] = v;
      out[q * plane + p] = v;
    }
  }
  auto a_copy = out;
  int pn = static_cast<int>(plane);
  return make_op(
      {pn, pn}, std::move(out), {f},
      [f, c, plane, u = std::move(u), inv_n = std::move(inv_n), keep = std::move(keep),
       a = std::move(a_copy)](const std::vector<double>& g, GradSink& sink) {
        if (!f.node()->requires_grad) return;
        std::vector<double> gu(plane * static_cast<size_t>(c), 0.0);
        for (size_t p = 0; p < plane; ++p) {
          const double* up = &u[p * c];
          double* gp = &gu[p * c];
          for (size_t q = 0; q < plane; ++q) {
            if (q == p) continue;  // diagonal is constant
            double gv = g[p * plane + q] + g[q * plane + p];
            if (gv == 0.0) continue;
            const double* uq = &u[q * c];
            double apq = a[p * plane + q];
            double in = inv_n[p];
            if (keep[p]) {
              for (int j = 0; j < c; ++j) gp[j] += gv * (uq[j] - apq * up[j]) * in;
            } else {
              for (int j = 0; j < c; ++j) gp[j] += gv * uq[j] * in;
            }
          }
        }
        auto& gf = sink.buf(f.node());
        scatter_grad(gf, gu, c, plane);
      });
}

Tensor affinity_l1(const Tensor& f_teacher, const Tensor& f_student) {
  check_chw(f_teacher, "affinity_l1");
  check_same_shape(f_teacher, f_student, "affinity_l1");
  const int c = f_teacher.dim(0);
  const size_t plane = static_cast<size_t>(f_teacher.dim(1)) * f_teacher.dim(2);

  std::vector<double> ut, us, int_, ins;
  std::vector<char> kt, ks;
  normalize_positions(f_teacher, ut, int_, kt);
  normalize_positions(f_student, us, ins, ks);

  double total = 0.0;
  for (size_t p = 0; p < plane; ++p) {
    const double* utp = &ut[p * c];
    const double* usp = &us[p * c];
    for (size_t q = p + 1; q < plane; ++q) {
      double at = dot_c(utp, &ut[q * c], c);
      double as = dot_c(usp, &us[q * c], c);
      total += 2.0 * std::fabs(at - as);
    }
  }
  const double denom = static_cast<double>(plane) * static_cast<double>(plane);
  double loss = total / denom;

  return make_op(
      {}, {loss}, {f_teacher, f_student},
      [f_teacher, f_student, c, plane, denom, ut = std::move(ut), us = std::move(us),
       int_ = std::move(int_), ins = std::move(ins), kt = std::move(kt),
       ks = std::move(ks)](const std::vector<double>& g, GradSink& sink) {
        const bool need_t = f_teacher.node()->requires_grad;
        const bool need_s = f_student.node()->requires_grad;
        if (!need_t && !need_s) return;
        const double base = 2.0 * g[0] / denom;
        std::vector<double> gut, gus;
        if (need_t) gut.assign(plane * static_cast<size_t>(c), 0.0);
        if (need_s) gus.assign(plane * static_cast<size_t>(c), 0.0);
        for (size_t p = 0; p < plane; ++p) {
          const double* utp = &ut[p * c];
          const double* usp = &us[p * c];
          for (size_t q = p + 1; q < plane; ++q) {
            const double* utq = &ut[q * c];
            const double* usq = &us[q * c];
            double at = dot_c(utp, utq, c);
            double as = dot_c(usp, usq, c);
            double s = sgn(at - as);
            if (s == 0.0) continue;
            if (need_t) {
              double w = base * s;
              double* gp = &gut[p * c];
              double* gq = &gut[q * c];
              if (kt[p]) {
                double ip = int_[p];
                for (int j = 0; j < c; ++j) gp[j] += w * (utq[j] - at * utp[j]) * ip;
              } else {
                double ip = int_[p];
                for (int j = 0; j < c; ++j) gp[j] += w * utq[j] * ip;
              }
              if (kt[q]) {
                double iq = int_[q];
                for (int j = 0; j < c; ++j) gq[j] += w * (utp[j] - at * utq[j]) * iq;
              } else {
                double iq = int_[q];
                for (int j = 0; j < c; ++j) gq[j] += w * utp[j] * iq;
              }
            }
            if (need_s) {
              double w = -base * s;
              double* gp = &gus[p * c];
              double* gq = &gus[q * c];
              if (ks[p]) {
                double ip = ins[p];
                for (int j = 0; j < c; ++j) gp[j] += w * (usq[j] - as * usp[j]) * ip;
              } else {
                double ip = ins[p];
                for (int j = 0; j < c; ++j) gp[j] += w * usq[j] * ip;
              }
              if (ks[q]) {
                double iq = ins[q];
                for (int j = 0; j < c; ++j) gq[j] += w * (usp[j] - as * usq[j]) * iq;
              } else {
                double iq = ins[q];
                for (int j = 0; j < c; ++j) gq[j] += w * usp[j] * iq;
              }
            }
          }
        }
        if (need_t) scatter_grad(sink.buf(f_teacher.node()), gut, c, plane);
        if (need_s) scatter_grad(sink.buf(f_student.node()), gus, c, plane);
      });
}

// ---- losses ----

Tensor smooth_l1_mean(const Tensor& pred, const Tensor& target, double delta) {
  check_same_shape(pred, target, "smooth_l1");
  if (delta <= 0.0) throw std::runtime_error("smooth_l1: delta must be positive");
  const auto dp = pred.data();
  const auto dt = target.data();
  const double n = static_cast<double>(dp.size());
  double total = 0.0;
  for (size_t i = 0; i < dp.size(); ++i) {
    double d = dp[i] - dt[i];
    double ad = std::fabs(d);
    total += ad < delta ? 0.5 * d * d / delta : ad - 0.5 * delta;
  }
  return make_op({}, {total / n}, {pred, target},
                 [pred, target, delta, n](const std::vector<double>& g, GradSink& sink) {
                   const auto dp = pred.data();
                   const auto dt = target.data();
                   const double gv = g[0] / n;
                   const bool need_p = pred.node()->requires_grad;
                   const bool need_t = target.node()->requires_grad;
                   std::vector<double>* gp = need_p ? &sink.buf(pred.node()) : nullptr;
                   std::vector<double>* gt = need_t ? &sink.buf(target.node()) : nullptr;
                   for (size_t i = 0; i < dp.size(); ++i) {
                     double d = dp[i] - dt[i];
                     double slope = std::fabs(d) < delta ? d / delta : sgn(d);
                     if (gp) (*gp)[i] += gv * slope;
                     if (gt) (*gt)[i] -= gv * slope;
                   }
                 });
}

}  // namespace bevd
