#include "bevd/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <memory>

#include "bevd/config.hpp"
#include "bevd/kd.hpp"
#include "bevd/model.hpp"
#include "bevd/rng.hpp"

namespace bevd {

bool GradSuiteResult::ok() const {
  if (cases.empty()) return false;
  for (const auto& c : cases)
    if (!c.ok()) return false;
  return true;
}

int GradSuiteResult::total_fixtures() const {
  int n = 0;
  for (const auto& c : cases) n += c.fixtures;
  return n;
}

CheckOutcome check_fixture(const GradFixture& fx, double tol) {
  CheckOutcome out;
  Tensor loss = fx.fn();
  GradMap grads = backward_collect(loss);
  double f0;
  {
    NoGradGuard ng;
    f0 = fx.fn().value();
  }
  const double h = fx.h;
  for (const Tensor& leaf : fx.leaves) {
    if (!leaf.requires_grad()) continue;
    const std::vector<double>* g = nullptr;
    auto it = grads.find(leaf.id());
    if (it != grads.end()) g = &it->second;
    Tensor t = leaf;  // shares the node
    std::span<double> d = t.mutable_data();
    for (int j = 0; j < t.numel(); ++j) {
      double save = d[j];
      double lp, lm;
      {
        NoGradGuard ng;
        d[j] = save + h;
        lp = fx.fn().value();
        d[j] = save - h;
        lm = fx.fn().value();
      }
      d[j] = save;
      double num = (lp - lm) / (2.0 * h);
      double ana = g ? (*g)[static_cast<size_t>(j)] : 0.0;
      double denom = std::abs(ana) + std::abs(num);
      if (denom <= 1e-8) continue;
      ++out.checked;
      // Central differences cannot resolve gradient components much
      // smaller than the function's own rounding noise, so the error is
      // taken relative to at least 1e-6 of the output magnitude.
      double floor = 1e-6 * std::max(1.0, std::abs(f0));
      double rel = std::abs(ana - num) / std::max(denom, floor);
      if (rel >= tol) {
        // a subgradient boundary between the two probe points shows up as
        // strongly disagreeing one-sided slopes with the analytic value
        // matching one side
        double right = (lp - f0) / h;
        double left = (f0 - lm) / h;
        double side_gap =
            std::abs(right - left) / (std::abs(right) + std::abs(left) + 1e-12);
        auto rel_to = [&](double s) {
          double dn = std::abs(ana) + std::abs(s);
          return dn <= 1e-8 ? 0.0 : std::abs(ana - s) / dn;
        };
        bool boundary = side_gap > 10.0 * tol &&
                        (rel_to(right) < tol || rel_to(left) < tol);
        if (boundary) continue;
        ++out.failures;
        if (out.first_failure.empty()) {
          char buf[160];
          std::snprintf(buf, sizeof(buf),
                        "element %d: analytic=%.8g numeric=%.8g rel=%.3g", j, ana,
                        num, rel);
          out.first_failure = buf;
        }
      }
      out.worst_rel = std::max(out.worst_rel, rel);
    }
  }
  return out;
}

namespace {

Tensor rand_t(Rng& r, Shape shape, double lo, double hi, bool rg) {
  int n = shape_numel(shape);
  std::vector<double> v(static_cast<size_t>(n));
  for (auto& x : v) x = r.uniform(lo, hi);
  return Tensor::from_data(std::move(shape), std::move(v), rg);
}

// |x| in [min_abs, max_abs], random sign; keeps relu/abs probes off the kink
Tensor rand_away(Rng& r, Shape shape, double min_abs, double max_abs, bool rg) {
  int n = shape_numel(shape);
  std::vector<double> v(static_cast<size_t>(n));
  for (auto& x : v) {
    double m = r.uniform(min_abs, max_abs);
    x = r.uniform01() < 0.5 ? -m : m;
  }
  return Tensor::from_data(std::move(shape), std::move(v), rg);
}

// per spatial position the channel values keep pairwise gaps >= gap
Tensor rand_gapped(Rng& r, int c, int h, int w, double gap) {
  std::vector<double> v(static_cast<size_t>(c) * h * w);
  std::vector<double> slot(static_cast<size_t>(c));
  std::vector<int> perm(static_cast<size_t>(c));
  for (int p = 0; p < h * w; ++p) {
    double base = r.uniform(-1.0, 0.0);
    for (int k = 0; k < c; ++k)
      slot[static_cast<size_t>(k)] = base + 2.0 * gap * k + r.uniform(0.0, gap * 0.5);
    for (int k = 0; k < c; ++k) perm[static_cast<size_t>(k)] = k;
    for (int k = c; k > 1; --k)
      std::swap(perm[static_cast<size_t>(k - 1)],
                perm[static_cast<size_t>(r.uniform_int(k))]);
    for (int k = 0; k < c; ++k)
      v[static_cast<size_t>(perm[static_cast<size_t>(k)]) * h * w + p] =
          slot[static_cast<size_t>(k)];
  }
  return Tensor::from_data({c, h, w}, std::move(v), true);
}

// per-position channel vectors with norm >= floor_norm
void enforce_position_norm(Tensor& t, double floor_norm) {
  int c = t.dim(0), h = t.dim(1), w = t.dim(2);
  std::span<double> d = t.mutable_data();
  for (int p = 0; p < h * w; ++p) {
    double sq = 0.0;
    for (int k = 0; k < c; ++k) {
      double x = d[static_cast<size_t>(k) * h * w + p];
      sq += x * x;
    }
    double nrm = std::sqrt(sq);
    if (nrm < floor_norm) {
      double s = nrm > 1e-9 ? floor_norm / nrm : 0.0;
      for (int k = 0; k < c; ++k) {
        size_t i = static_cast<size_t>(k) * h * w + p;
        d[i] = nrm > 1e-9 ? d[i] * s : floor_norm / std::sqrt(double(c));
      }
    }
  }
}

// pushes b away from a so |a-b| >= min_diff elementwise
void enforce_gap(const Tensor& a, Tensor& b, double min_diff) {
  std::span<const double> ad = a.data();
  std::span<double> bd = b.mutable_data();
  for (size_t i = 0; i < ad.size(); ++i) {
    double diff = bd[i] - ad[i];
    if (std::abs(diff) < min_diff)
      bd[i] = ad[i] + (diff >= 0.0 ? min_diff : -min_diff);
  }
}

// keeps |a-b| elementwise out of [delta-band, delta+band], the smooth-l1 elbow
void enforce_delta_away(const Tensor& a, Tensor& b, double delta, double band) {
  std::span<const double> ad = a.data();
  std::span<double> bd = b.mutable_data();
  for (size_t i = 0; i < ad.size(); ++i) {
    double diff = bd[i] - ad[i];
    double m = std::abs(diff);
    if (std::abs(m - delta) < band) {
      double target = m >= delta ? delta + band : delta - band;
      double s = diff >= 0.0 ? 1.0 : -1.0;
      bd[i] = ad[i] + s * target;
    }
  }
}

struct Case {
  std::string name;
  std::function<GradFixture(uint64_t)> build;
};

DistillConfig tiny_det_cfg() {
  DistillConfig c = DistillConfig::make_default();
  c.grid.h = 8;
  c.grid.w = 8;
  c.grid.cell = 0.6;
  c.grid.x_min = -2.4;
  c.grid.y_min = -2.4;
  c.classes = {c.classes[0], c.classes[3]};  // one dynamic, one static
  return c;
}

std::vector<BoxAnnotation> tiny_boxes() {
  BoxAnnotation b1;
  b1.class_id = 0;
  b1.x = -1.2;
  b1.y = 0.4;
  b1.width = 0.9;
  b1.length = 1.4;
  b1.yaw = 0.4;
  b1.vx = 0.5;
  b1.vy = -0.3;
  BoxAnnotation b2;
  b2.class_id = 1;
  b2.x = 1.0;
  b2.y = -0.9;
  b2.width = 0.7;
  b2.length = 1.1;
  b2.yaw = -1.1;
  b2.vx = 0.0;
  b2.vy = 0.8;
  return {b1, b2};
}

// student regression probe kept off both the smooth-l1 elbow against the
// teacher map and the L1 kink against the ground-truth targets
void det_reg_fixups(Tensor& reg, const DetTargets& tg) {
  std::span<double> rd = reg.mutable_data();
  std::span<const double> td = tg.reg.data();
  std::span<const double> md = tg.reg_mask.data();
  int hw = tg.reg_mask.numel();
  for (int ch = 0; ch < kRegChannels; ++ch)
    for (int p = 0; p < hw; ++p) {
      if (md[static_cast<size_t>(p)] == 0.0) continue;
      size_t i = static_cast<size_t>(ch) * hw + p;
      double diff = rd[i] - td[i];
      if (std::abs(diff) < 0.05) rd[i] = td[i] + (diff >= 0.0 ? 0.05 : -0.05);
    }
}

std::vector<Case> make_cases() {
  std::vector<Case> cs;
  auto add_case = [&](std::string name, std::function<GradFixture(uint64_t)> b) {
    cs.push_back({std::move(name), std::move(b)});
  };

  auto binary = [](Tensor (*op)(const Tensor&, const Tensor&)) {
    return [op](uint64_t seed) {
      Rng r(seed, "fixture");
      Tensor a = rand_t(r, {3, 5, 5}, -1.0, 1.0, true);
      Tensor b = rand_t(r, {3, 5, 5}, -1.0, 1.0, true);
      Tensor w = rand_t(r, {3, 5, 5}, 0.5, 1.5, false);
      GradFixture fx;
      fx.leaves = {a, b};
      fx.fn = [=]() { return sum_all(mul(op(a, b), w)); };
      return fx;
    };
  };
  add_case("op/add", binary(&add));
  add_case("op/sub", binary(&sub));
  add_case("op/mul", binary(&mul));

  add_case("op/scale", [](uint64_t seed) {
    Rng r(seed, "fixture");
    Tensor x = rand_t(r, {3, 5, 5}, -1.0, 1.0, true);
    Tensor w = rand_t(r, {3, 5, 5}, 0.5, 1.5, false);
    double c = (r.uniform01() < 0.5 ? -1.0 : 1.0) * r.uniform(0.3, 2.0);
    GradFixture fx;
    fx.leaves = {x};
    fx.fn = [=]() { return sum_all(mul(scale(x, c), w)); };
    return fx;
  });
  add_case("op/add_scalar", [](uint64_t seed) {
    Rng r(seed, "fixture");
    Tensor x = rand_t(r, {3, 5, 5}, -1.0, 1.0, true);
    Tensor w = rand_t(r, {3, 5, 5}, 0.5, 1.5, false);
    double c = r.uniform(-1.0, 1.0);
    GradFixture fx;
    fx.leaves = {x};
    fx.fn = [=]() { return sum_all(mul(add_scalar(x, c), w)); };
    return fx;
  });
  add_case("op/const_minus", [](uint64_t seed) {
    Rng r(seed, "fixture");
    Tensor x = rand_t(r, {3, 5, 5}, -1.0, 1.0, true);
    Tensor w = rand_t(r, {3, 5, 5}, 0.5, 1.5, false);
    double c = r.uniform(-1.0, 1.0);
    GradFixture fx;
    fx.leaves = {x};
    fx.fn = [=]() { return sum_all(mul(const_minus(c, x), w)); };
    return fx;
  });

  auto unary_away = [](Tensor (*op)(const Tensor&), double min_abs, double max_abs) {
    return [op, min_abs, max_abs](uint64_t seed) {
      Rng r(seed, "fixture");
      Tensor x = rand_away(r, {3, 5, 5}, min_abs, max_abs, true);
      Tensor w = rand_t(r, {3, 5, 5}, 0.5, 1.5, false);
      GradFixture fx;
      fx.leaves = {x};
      fx.fn = [=]() { return sum_all(mul(op(x), w)); };
      return fx;
    };
  };
  add_case("op/abs", unary_away(&abs, 0.05, 1.5));
  add_case("op/relu", unary_away(&relu, 0.05, 1.5));

  auto unary_pos = [](Tensor (*op)(const Tensor&), double lo, double hi) {
    return [op, lo, hi](uint64_t seed) {
      Rng r(seed, "fixture");
      Tensor x = rand_t(r, {3, 5, 5}, lo, hi, true);
      Tensor w = rand_t(r, {3, 5, 5}, 0.5, 1.5, false);
      GradFixture fx;
      fx.leaves = {x};
      fx.fn = [=]() { return sum_all(mul(op(x), w)); };
      return fx;
    };
  };
  add_case("op/sigmoid", unary_pos(&sigmoid, -3.0, 3.0));
  add_case("op/sqrt_guarded", unary_pos(&sqrt_guarded, 0.1, 1.5));
  add_case("op/log_clamped", unary_pos(&log_clamped, 0.1, 2.0));

  add_case("op/pow_const", [](uint64_t seed) {
    Rng r(seed, "fixture");
    const double exps[3] = {2.0, 3.0, 0.5};
    double p = exps[seed % 3];
    Tensor x = rand_t(r, {3, 5, 5}, 0.2, 1.5, true);
    Tensor w = rand_t(r, {3, 5, 5}, 0.5, 1.5, false);
    GradFixture fx;
    fx.leaves = {x};
    fx.fn = [=]() { return sum_all(mul(pow_const(x, p), w)); };
    return fx;
  });
  add_case("op/recip_floor", [](uint64_t seed) {
    Rng r(seed, "fixture");
    const double floor_v = 0.3;
    // half below the floor (flat, zero grad), half above, both away from it
    int n = 3 * 5 * 5;
    std::vector<double> v(static_cast<size_t>(n));
    for (auto& x : v)
      x = r.uniform01() < 0.5 ? r.uniform(0.05, 0.24) : r.uniform(0.36, 2.0);
    Tensor x = Tensor::from_data({3, 5, 5}, std::move(v), true);
    Tensor w = rand_t(r, {3, 5, 5}, 0.5, 1.5, false);
    GradFixture fx;
    fx.leaves = {x};
    fx.fn = [=]() { return sum_all(mul(recip_floor(x, floor_v), w)); };
    return fx;
  });

  add_case("op/sum_all", [](uint64_t seed) {
    Rng r(seed, "fixture");
    Tensor x = rand_t(r, {3, 5, 5}, -1.0, 1.0, true);
    double c = r.uniform(0.5, 1.5);
    GradFixture fx;
    fx.leaves = {x};
    fx.fn = [=]() { return scale(sum_all(x), c); };
    return fx;
  });
  add_case("op/mean_all", [](uint64_t seed) {
    Rng r(seed, "fixture");
    Tensor x = rand_t(r, {3, 5, 5}, -1.0, 1.0, true);
    double c = r.uniform(0.5, 1.5);
    GradFixture fx;
    fx.leaves = {x};
    fx.fn = [=]() { return scale(mean_all(x), c); };
    return fx;
  });

  add_case("op/concat_channels", [](uint64_t seed) {
    Rng r(seed, "fixture");
    Tensor a = rand_t(r, {2, 5, 5}, -1.0, 1.0, true);
    Tensor b = rand_t(r, {3, 5, 5}, -1.0, 1.0, true);
    Tensor w = rand_t(r, {5, 5, 5}, 0.5, 1.5, false);
    GradFixture fx;
    fx.leaves = {a, b};
    fx.fn = [=]() { return sum_all(mul(concat_channels(a, b), w)); };
    return fx;
  });
  add_case("op/slice_channel", [](uint64_t seed) {
    Rng r(seed, "fixture");
    Tensor x = rand_t(r, {4, 5, 5}, -1.0, 1.0, true);
    int c = static_cast<int>(seed % 4);
    Tensor w = rand_t(r, {5, 5}, 0.5, 1.5, false);
    GradFixture fx;
    fx.leaves = {x};
    fx.fn = [=]() { return sum_all(mul(slice_channel(x, c), w)); };
    return fx;
  });
  add_case("op/channel_sum", [](uint64_t seed) {
    Rng r(seed, "fixture");
    Tensor x = rand_t(r, {3, 5, 5}, -1.0, 1.0, true);
    Tensor w = rand_t(r, {5, 5}, 0.5, 1.5, false);
    GradFixture fx;
    fx.leaves = {x};
    fx.fn = [=]() { return sum_all(mul(channel_sum(x), w)); };
    return fx;
  });
  add_case("op/channel_pool_mean", [](uint64_t seed) {
    Rng r(seed, "fixture");
    Tensor x = rand_t(r, {3, 5, 5}, -1.0, 1.0, true);
    Tensor w = rand_t(r, {5, 5}, 0.5, 1.5, false);
    GradFixture fx;
    fx.leaves = {x};
    fx.fn = [=]() { return sum_all(mul(channel_pool(x, Pool::kMean), w)); };
    return fx;
  });
  add_case("op/channel_pool_max", [](uint64_t seed) {
    Rng r(seed, "fixture");
    Tensor x = rand_gapped(r, 3, 5, 5, 0.05);
    Tensor w = rand_t(r, {5, 5}, 0.5, 1.5, false);
    GradFixture fx;
    fx.leaves = {x};
    fx.fn = [=]() { return sum_all(mul(channel_pool(x, Pool::kMax), w)); };
    return fx;
  });
  add_case("op/scale_channels", [](uint64_t seed) {
    Rng r(seed, "fixture");
    Tensor x = rand_t(r, {3, 5, 5}, -1.0, 1.0, true);
    Tensor s = rand_t(r, {5, 5}, -1.0, 1.0, true);
    Tensor w = rand_t(r, {3, 5, 5}, 0.5, 1.5, false);
    GradFixture fx;
    fx.leaves = {x, s};
    fx.fn = [=]() { return sum_all(mul(scale_channels(x, s), w)); };
    return fx;
  });

  add_case("op/conv2d", [](uint64_t seed) {
    Rng r(seed, "fixture");
    bool strided = seed % 2 == 1;
    Tensor in = rand_t(r, {3, 6, 6}, -1.0, 1.0, true);
    Tensor k = rand_t(r, {4, 3, 3, 3}, -0.5, 0.5, true);
    Tensor b = rand_t(r, {4}, -0.3, 0.3, true);
    int stride = strided ? 2 : 1;
    int pad = strided ? 0 : 1;
    int ho = strided ? 2 : 6;
    Tensor w = rand_t(r, {4, ho, ho}, 0.5, 1.5, false);
    GradFixture fx;
    fx.leaves = {in, k, b};
    fx.fn = [=]() { return sum_all(mul(conv2d(in, k, b, stride, pad), w)); };
    return fx;
  });
  add_case("op/batchnorm", [](uint64_t seed) {
    Rng r(seed, "fixture");
    Tensor x = rand_t(r, {3, 6, 6}, -1.0, 1.0, true);
    Tensor gamma = rand_t(r, {3}, 0.5, 1.5, true);
    Tensor beta = rand_t(r, {3}, -0.5, 0.5, true);
    Tensor w = rand_t(r, {3, 6, 6}, 0.5, 1.5, false);
    GradFixture fx;
    fx.leaves = {x, gamma, beta};
    fx.fn = [=]() { return sum_all(mul(batchnorm(x, gamma, beta, 1e-5), w)); };
    return fx;
  });
  add_case("op/avgpool2x", [](uint64_t seed) {
    Rng r(seed, "fixture");
    Tensor x = rand_t(r, {3, 6, 6}, -1.0, 1.0, true);
    Tensor w = rand_t(r, {3, 3, 3}, 0.5, 1.5, false);
    GradFixture fx;
    fx.leaves = {x};
    fx.fn = [=]() { return sum_all(mul(avgpool2x(x), w)); };
    return fx;
  });

  add_case("op/affinity", [](uint64_t seed) {
    Rng r(seed, "fixture");
    Tensor f = rand_t(r, {3, 4, 4}, -1.0, 1.0, true);
    enforce_position_norm(f, 0.3);
    Tensor w = rand_t(r, {16, 16}, 0.5, 1.5, false);
    GradFixture fx;
    fx.leaves = {f};
    fx.h = 1e-4;  // normalization curvature vs readout-summed gradients
    fx.fn = [=]() { return sum_all(mul(affinity(f), w)); };
    return fx;
  });
  add_case("op/affinity_l1", [](uint64_t seed) {
    // resample until every affinity pair is clear of the |t - s| kink
    for (uint64_t attempt = 0;; ++attempt) {
      Rng r(mix_seed(seed, "try/" + std::to_string(attempt)), "fixture");
      Tensor ft = rand_t(r, {3, 4, 4}, -1.0, 1.0, true);
      Tensor fs = rand_t(r, {3, 4, 4}, -1.0, 1.0, true);
      enforce_position_norm(ft, 0.3);
      enforce_position_norm(fs, 0.3);
      double min_gap = 1e9;
      {
        NoGradGuard ng;
        Tensor at = affinity(ft);
        Tensor as = affinity(fs);
        std::span<const double> ad = at.data();
        std::span<const double> bd = as.data();
        for (int p = 0; p < 16; ++p)
          for (int q = p + 1; q < 16; ++q)
            min_gap = std::min(
                min_gap, std::abs(ad[static_cast<size_t>(p) * 16 + q] -
                                  bd[static_cast<size_t>(p) * 16 + q]));
      }
      if (min_gap < 5e-3 && attempt < 50) continue;
      GradFixture fx;
      fx.leaves = {ft, fs};
      fx.h = 1e-4;  // gradients are 1/P^2 scaled; keep truncation below them
      fx.fn = [=]() { return affinity_l1(ft, fs); };
      return fx;
    }
  });

  auto smooth_builder = [](uint64_t seed) {
    Rng r(seed, "fixture");
    const double delta = 1.0;
    Tensor pred = rand_t(r, {3, 5, 5}, -1.0, 1.0, true);
    // differences split between the quadratic and linear branches
    int n = pred.numel();
    std::vector<double> tv(static_cast<size_t>(n));
    std::span<const double> pd = pred.data();
    for (int i = 0; i < n; ++i) {
      double m = r.uniform01() < 0.7 ? r.uniform(0.1, 0.8) : r.uniform(1.2, 1.6);
      tv[static_cast<size_t>(i)] = pd[static_cast<size_t>(i)] +
                                   (r.uniform01() < 0.5 ? -m : m);
    }
    Tensor target = Tensor::from_data(pred.shape(), std::move(tv), false);
    GradFixture fx;
    fx.leaves = {pred};
    fx.fn = [=]() { return smooth_l1_mean(pred, target, delta); };
    return fx;
  };
  add_case("op/smooth_l1_mean", smooth_builder);
  add_case("loss/smooth_l1", smooth_builder);

  add_case("loss/csrd", [](uint64_t seed) {
    Rng r(seed, "fixture");
    Tensor calibrated = rand_t(r, {6, 6}, -1.0, 1.0, true);
    Tensor objectness = rand_t(r, {6, 6}, 0.0, 1.0, false);
    Tensor c2 = calibrated;
    enforce_gap(objectness, c2, 0.05);
    GradFixture fx;
    fx.leaves = {calibrated};
    fx.fn = [=]() { return csrd_loss(calibrated, objectness); };
    return fx;
  });

  add_case("loss/msfd", [](uint64_t seed) {
    Rng r(seed, "fixture");
    Tensor ft = rand_t(r, {4, 6, 6}, -1.0, 1.0, true);
    Tensor fs = rand_t(r, {4, 6, 6}, -1.0, 1.0, true);
    // per-cell difference norms off the sqrt kink
    {
      std::span<const double> td = ft.data();
      std::span<double> sd = fs.mutable_data();
      for (int p = 0; p < 36; ++p) {
        double sq = 0.0;
        for (int k = 0; k < 4; ++k) {
          double dd = sd[static_cast<size_t>(k) * 36 + p] -
                      td[static_cast<size_t>(k) * 36 + p];
          sq += dd * dd;
        }
        if (std::sqrt(sq) < 0.1) sd[static_cast<size_t>(0) * 36 + p] += 0.3;
      }
    }
    std::vector<double> mv(36);
    for (auto& m : mv) m = r.uniform01() < 0.4 ? 0.0 : r.uniform(0.2, 1.0);
    Tensor mask = Tensor::from_data({6, 6}, std::move(mv), false);
    GradFixture fx;
    fx.leaves = {ft, fs};
    fx.fn = [=]() { return msfd_loss(ft, fs, mask); };
    return fx;
  });

  add_case("loss/reld", [](uint64_t seed) {
    Rng r(seed, "fixture");
    Tensor ft = rand_t(r, {4, 8, 8}, -1.0, 1.0, true);
    Tensor fs = rand_t(r, {4, 8, 8}, -1.0, 1.0, true);
    enforce_position_norm(ft, 0.3);
    enforce_position_norm(fs, 0.3);
    GradFixture fx;
    fx.leaves = {ft, fs};
    fx.h = 3e-5;  // tiny per-element gradients; also shortens relu-boundary reach
    fx.fn = [=]() { return reld_loss(ft, fs, 2); };
    return fx;
  });

  add_case("loss/qfl", [](uint64_t seed) {
    Rng r(seed, "fixture");
    Tensor x = rand_t(r, {2, 5, 5}, -2.0, 2.0, true);
    int n = x.numel();
    std::vector<double> yv(static_cast<size_t>(n));
    std::span<const double> xd = x.data();
    for (int i = 0; i < n; ++i) {
      double s = 1.0 / (1.0 + std::exp(-xd[static_cast<size_t>(i)]));
      double y;
      int tries = 0;
      do {
        y = r.uniform01();
      } while (std::abs(y - s) < 0.02 && ++tries < 100);
      yv[static_cast<size_t>(i)] = y;
    }
    Tensor y = Tensor::from_data(x.shape(), std::move(yv), false);
    GradFixture fx;
    fx.leaves = {x};
    fx.fn = [=]() { return qfl(x, y, 2.0); };
    return fx;
  });

  add_case("loss/respd", [](uint64_t seed) {
    Rng r(seed, "fixture");
    DistillConfig cfg = tiny_det_cfg();
    cfg.grid.h = 4;
    cfg.grid.w = 4;
    Tensor tc = rand_t(r, {2, 4, 4}, -2.0, 2.0, false);
    Tensor tr = rand_t(r, {8, 4, 4}, -1.0, 1.0, false);
    Tensor sc = rand_t(r, {2, 4, 4}, -2.0, 2.0, true);
    Tensor sr = rand_t(r, {8, 4, 4}, -1.0, 1.0, true);
    enforce_gap(tc, sc, 0.1);
    enforce_delta_away(tr, sr, cfg.smooth_l1_delta, 0.1);
    GradFixture fx;
    fx.leaves = {sc, sr};
    fx.fn = [=]() {
      auto [a, b] = respd_loss(tc, tr, sc, sr, cfg);
      return add(a, b);
    };
    return fx;
  });

  add_case("loss/detection", [](uint64_t seed) {
    Rng r(seed, "fixture");
    DistillConfig cfg = tiny_det_cfg();
    auto boxes = tiny_boxes();
    auto tg = std::make_shared<DetTargets>(build_targets(boxes, cfg));
    Tensor cls = rand_t(r, {2, 8, 8}, -3.0, 3.0, true);
    Tensor reg = rand_t(r, {8, 8, 8}, -1.0, 1.0, true);
    det_reg_fixups(reg, *tg);
    GradFixture fx;
    fx.leaves = {cls, reg};
    fx.fn = [=]() { return detection_loss(cls, reg, *tg, cfg); };
    return fx;
  });

  add_case("loss/total", [](uint64_t seed) {
    Rng r(seed, "fixture");
    DistillConfig cfg = tiny_det_cfg();
    cfg.grid.h = 4;
    cfg.grid.w = 4;
    cfg.grid.x_min = -1.2;
    cfg.grid.y_min = -1.2;
    cfg.ch_points = 2;
    cfg.ch_calibration = 2;
    cfg.reld_scales = 1;
    cfg.csrd_calibration = false;  // reduced module keeps the probe cheap

    BoxAnnotation b;
    b.class_id = 0;
    b.x = -0.5;
    b.y = 0.3;
    b.width = 0.7;
    b.length = 1.0;
    b.yaw = 0.5;
    b.vx = 0.4;
    b.vy = 0.0;
    std::vector<BoxAnnotation> boxes = {b};
    auto tg = std::make_shared<DetTargets>(build_targets(boxes, cfg));

    auto taps = std::make_shared<ModelTaps>();
    auto staps = std::make_shared<ModelTaps>();
    taps->cam_feat = rand_t(r, {2, 4, 4}, -1.0, 1.0, false);
    staps->cam_feat = rand_t(r, {2, 4, 4}, -1.0, 1.0, false);
    taps->pts_feat = rand_t(r, {2, 4, 4}, -1.0, 1.0, false);
    staps->pts_feat = rand_t(r, {2, 4, 4}, -1.0, 1.0, true);
    taps->gated_cam = rand_t(r, {2, 4, 4}, -1.0, 1.0, false);
    staps->gated_cam = rand_t(r, {2, 4, 4}, -1.0, 1.0, true);
    taps->gated_pts = taps->pts_feat;
    staps->gated_pts = staps->pts_feat;
    taps->fused = rand_t(r, {4, 4, 4}, -1.0, 1.0, false);
    staps->fused = rand_t(r, {4, 4, 4}, -1.0, 1.0, true);
    taps->cls = rand_t(r, {2, 4, 4}, -2.0, 2.0, false);
    staps->cls = rand_t(r, {2, 4, 4}, -2.0, 2.0, true);
    taps->reg = rand_t(r, {8, 4, 4}, -1.0, 1.0, false);
    staps->reg = rand_t(r, {8, 4, 4}, -1.0, 1.0, true);

    // keep every absolute-value style term off its boundary
    for (int round = 0; round < 3; ++round) {
      enforce_position_norm(staps->fused, 0.3);
      enforce_position_norm(taps->fused, 0.3);
      enforce_gap(taps->gated_cam, staps->gated_cam, 0.1);
      enforce_gap(taps->fused, staps->fused, 0.1);
    }
    enforce_gap(taps->cls, staps->cls, 0.1);
    enforce_delta_away(taps->reg, staps->reg, cfg.smooth_l1_delta, 0.1);
    det_reg_fixups(staps->reg, *tg);

    auto calib = std::make_shared<CalibrationModule>(
        2, 2, mix_seed(seed, "calib"), false);
    std::vector<double> mv(16);
    for (auto& m : mv) m = r.uniform01() < 0.3 ? 0.0 : r.uniform(0.3, 1.0);
    Tensor mask = Tensor::from_data({4, 4}, std::move(mv), false);

    GradFixture fx;
    fx.h = 5e-5;
    fx.leaves = {staps->gated_cam, staps->fused, staps->cls,
                 staps->reg,       staps->pts_feat};
    for (auto& p : calib->params()) fx.leaves.push_back(p.second);
    fx.fn = [=]() {
      Tensor det = detection_loss(staps->cls, staps->reg, *tg, cfg);
      LossParts parts =
          distill_losses(*taps, *staps, calib.get(), mask, tg->heatmap, det, cfg);
      return parts.total;
    };
    return fx;
  });

  return cs;
}

}  // namespace

GradSuiteResult run_gradient_suite(int fixtures_per_case, uint64_t seed, double tol) {
  GradSuiteResult out;
  auto t0 = std::chrono::steady_clock::now();
  for (const Case& c : make_cases()) {
    GradCase gc;
    gc.name = c.name;
    for (int i = 0; i < fixtures_per_case; ++i) {
      uint64_t fseed = mix_seed(seed, c.name + "/" + std::to_string(i));
      GradFixture fx = c.build(fseed);
      CheckOutcome o = check_fixture(fx, tol);
      ++gc.fixtures;
      gc.checked += o.checked;
      gc.worst_rel = std::max(gc.worst_rel, o.worst_rel);
      if (o.failures > 0) {
        gc.failures += o.failures;
        if (gc.first_failure.empty())
          gc.first_failure = "fixture " + std::to_string(i) + ": " + o.first_failure;
      }
    }
    out.cases.push_back(std::move(gc));
  }
  auto t1 = std::chrono::steady_clock::now();
  out.seconds = std::chrono::duration<double>(t1 - t0).count();
  return out;
}

std::string gradient_suite_report(const GradSuiteResult& r) {
  std::string out;
  for (const auto& c : r.cases) {
    char line[256];
    std::snprintf(line, sizeof(line), "%-24s %s  fixtures=%d checked=%d worst_rel=%.3g\n",
                  c.name.c_str(), c.ok() ? "pass" : "FAIL", c.fixtures, c.checked,
                  c.worst_rel);
    out += line;
    if (!c.ok() && !c.first_failure.empty()) {
      out += "    ";
      out += c.first_failure;
      out += '\n';
    }
  }
  char tail[96];
  std::snprintf(tail, sizeof(tail), "suite: %s in %.2fs\n", r.ok() ? "pass" : "FAIL",
                r.seconds);
  out += tail;
  return out;
}

}  // namespace bevd
