#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "bsi/autodiff.hpp"
#include "bsi/rng.hpp"
#include "bsi/tensor.hpp"

using namespace bsi;

namespace {

// Independent direct cross-correlation with mirror padding, written as plain
// nested loops; the implementation under test must match it.
int mirror(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    else i = 2 * n - 2 - i;
  }
  return i;
}

Tensor conv_oracle(const Tensor& in, const Tensor& k, const Tensor& b, int stride) {
  const int Ci = in.dim(0), H = in.dim(1), W = in.dim(2);
  const int Co = k.dim(0), ks = k.dim(2), p = (ks - 1) / 2;
  Tensor out({Co, H / stride, W / stride});
  for (int co = 0; co < Co; ++co)
    for (int oy = 0; oy < H / stride; ++oy)
      for (int ox = 0; ox < W / stride; ++ox) {
        double s = b.v[co];
        for (int ci = 0; ci < Ci; ++ci)
          for (int ky = 0; ky < ks; ++ky)
            for (int kx = 0; kx < ks; ++kx)
              s += in.at3(ci, mirror(stride * oy + ky - p, H), mirror(stride * ox + kx - p, W)) *
                   k.v[((static_cast<size_t>(co) * Ci + ci) * ks + ky) * ks + kx];
        out.at3(co, oy, ox) = s;
      }
  return out;
}

Tensor random_tensor(std::vector<int> shape, Rng& rng) {
  Tensor t(std::move(shape));
  fill_normal(t, rng);
  return t;
}

double max_rel_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape == b.shape);
  double worst = 0.0;
  for (size_t i = 0; i < a.v.size(); ++i) {
    const double d = std::fabs(a.v[i] - b.v[i]);
    const double denom = std::max({std::fabs(a.v[i]), std::fabs(b.v[i]), 1e-300});
    worst = std::max(worst, d / denom);
  }
  return worst;
}

}  // namespace

TEST_CASE("conv2d identity kernel passes input through") {
  Tensor in({1, 4, 5});
  Rng rng(7);
  fill_normal(in, rng);
  Tape tp;
  const int x = tp.leaf(in, false);
  const int k = tp.leaf(Tensor({1, 1, 1, 1}, {1.0}), true);
  const int b = tp.leaf(Tensor({1}), true);
  const int y = tp.conv2d(x, k, b, 1);
  CHECK(tp.value(y).v == in.v);
}

TEST_CASE("conv2d averaging kernel preserves constants under reflect padding") {
  Tensor in({1, 6, 7});
  for (double& v : in.v) v = 3.25;
  Tensor k({1, 1, 3, 3});
  for (double& v : k.v) v = 1.0 / 9.0;
  Tape tp;
  const int y = tp.conv2d(tp.leaf(in, false), tp.leaf(k, true), tp.leaf(Tensor({1}), true), 1);
  for (double v : tp.value(y).v) CHECK(v == Catch::Approx(3.25).epsilon(1e-14));
}

TEST_CASE("conv2d matches nested-loop oracle on random batches") {
  Rng rng(11);
  for (int trial = 0; trial < 2; ++trial) {  // two random instances of 3x5x5, 4x3x3x3
    Tensor in = random_tensor({3, 5, 5}, rng);
    Tensor k = random_tensor({4, 3, 3, 3}, rng);
    Tensor b = random_tensor({4}, rng);
    Tape tp;
    const int y = tp.conv2d(tp.leaf(in, false), tp.leaf(k, true), tp.leaf(b, true), 1);
    CHECK(max_rel_diff(tp.value(y), conv_oracle(in, k, b, 1)) <= 1e-12);
  }
  // stride-2 path
  Tensor in = random_tensor({3, 6, 8}, rng);
  Tensor k = random_tensor({4, 3, 3, 3}, rng);
  Tensor b = random_tensor({4}, rng);
  Tape tp;
  const int y = tp.conv2d(tp.leaf(in, false), tp.leaf(k, true), tp.leaf(b, true), 2);
  CHECK(max_rel_diff(tp.value(y), conv_oracle(in, k, b, 2)) <= 1e-12);
}

TEST_CASE("conv2d rejects mismatched shapes with the offending dimension") {
  Tape tp;
  const int x = tp.leaf(Tensor({3, 4, 4}), false);
  const int k = tp.leaf(Tensor({2, 5, 3, 3}), true);
  const int b = tp.leaf(Tensor({2}), true);
  CHECK_THROWS_WITH(tp.conv2d(x, k, b, 1),
                    Catch::Matchers::ContainsSubstring("input-channel dim 5"));
  const int k2 = tp.leaf(Tensor({2, 3, 3, 3}), true);
  const int bbad = tp.leaf(Tensor({3}), true);
  CHECK_THROWS(tp.conv2d(x, k2, bbad, 1));
}

TEST_CASE("leaky_relu values and finite-difference slope") {
  Tape tp;
  const int x = tp.leaf(Tensor({2}, {2.0, -1.0}), true);
  const int y = tp.leaky_relu(x, 0.1);
  CHECK(tp.value(y).v[0] == 2.0);
  CHECK(tp.value(y).v[1] == -0.1);

  // VJP vs central differences away from zero
  Rng rng(3);
  Tensor pt({50});
  for (double& v : pt.v) {
    do {
      v = rng.normal();
    } while (std::fabs(v) < 1e-6);
  }
  auto f = [](const Tensor& t) {
    double s = 0.0;
    for (double v : t.v) s += (v >= 0.0) ? v * v : 0.1 * v * v;  // integral-of-lrelu-like smooth pieces
    return s;
  };
  auto g = [](const Tensor& t) {
    Tensor out(t.shape);
    for (size_t i = 0; i < t.v.size(); ++i)
      out.v[i] = 2.0 * ((t.v[i] >= 0.0) ? t.v[i] : 0.1 * t.v[i]);
    return out;
  };
  CHECK(gradient_check(f, g, pt, 1e-6) <= 1e-6);

  // and through the tape itself
  Tensor cot({2}, {1.0, 1.0});
  auto grads = tp.backward(y, cot);
  CHECK(grads[static_cast<size_t>(x)].v[0] == 1.0);
  CHECK(grads[static_cast<size_t>(x)].v[1] == Catch::Approx(0.1));
  CHECK_THROWS(tp.leaky_relu(x, 1.5));
}

TEST_CASE("upsample2x constants, hand oracle, and adjoint") {
  SECTION("constant input stays constant") {
    Tensor in({2, 3, 4});
    for (double& v : in.v) v = -1.75;
    Tape tp;
    const int y = tp.upsample2x(tp.leaf(in, false));
    for (double v : tp.value(y).v) CHECK(v == Catch::Approx(-1.75).epsilon(1e-14));
  }

  SECTION("2x2 -> 4x4 matches direct interpolation oracle") {
    Tensor in({1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
    Tape tp;
    const Tensor& out = tp.value(tp.upsample2x(tp.leaf(in, false)));
    // independent evaluation of the align-corners-false formula
    auto taps = [](int o, int n, int& i0, int& i1, double& w0, double& w1) {
      const double src = 0.5 * (o + 0.5) - 0.5;
      i0 = static_cast<int>(std::floor(src));
      const double fr = src - i0;
      i1 = std::min(i0 + 1, n - 1);
      i0 = std::max(i0, 0);
      w0 = 1.0 - fr;
      w1 = fr;
    };
    for (int oy = 0; oy < 4; ++oy)
      for (int ox = 0; ox < 4; ++ox) {
        int y0, y1, x0, x1;
        double a0, a1, b0, b1;
        taps(oy, 2, y0, y1, a0, a1);
        taps(ox, 2, x0, x1, b0, b1);
        const double expect = a0 * (b0 * in.at3(0, y0, x0) + b1 * in.at3(0, y0, x1)) +
                              a1 * (b0 * in.at3(0, y1, x0) + b1 * in.at3(0, y1, x1));
        CHECK(out.at3(0, oy, ox) == Catch::Approx(expect).margin(1e-14));
      }
    CHECK(out.at3(0, 0, 0) == 1.0);
    CHECK(out.at3(0, 3, 3) == 4.0);
    CHECK(out.at3(0, 1, 1) == Catch::Approx(1.75));
  }

  SECTION("dot-product identity for the (forward, VJP) pair") {
    Rng rng(5);
    for (int trial = 0; trial < 100; ++trial) {
      Tensor x = random_tensor({2, 3, 5}, rng);
      Tensor y = random_tensor({2, 6, 10}, rng);
      Tape tp;
      const int xid = tp.leaf(x, true);
      const int yid = tp.upsample2x(xid);
      const double lhs = dot(tp.value(yid), y);
      auto grads = tp.backward(yid, y);
      const double rhs = dot(x, grads[static_cast<size_t>(xid)]);
      CHECK(std::fabs(lhs - rhs) <= 1e-12 * std::max(std::fabs(lhs), 1.0));
    }
  }
}

TEST_CASE("backward trivial cases") {
  SECTION("y = 2x") {
    Tape tp;
    const int x = tp.leaf(Tensor({1}, {3.0}), true);
    const int y = tp.scale(x, 2.0);
    auto grads = tp.backward(y, Tensor({1}, {1.0}));
    CHECK(grads[static_cast<size_t>(x)].v[0] == 2.0);
  }
  SECTION("y = sum(x)") {
    Tape tp;
    const int x = tp.leaf(Tensor({2, 3, 2}), true);
    const int y = tp.sum(x);
    auto grads = tp.backward(y, Tensor({1}, {1.0}));
    for (double v : grads[static_cast<size_t>(x)].v) CHECK(v == 1.0);
  }
  SECTION("unreached leaves get zero gradient") {
    Tape tp;
    const int x = tp.leaf(Tensor({2}, {1.0, 2.0}), true);
    const int unused = tp.leaf(Tensor({3}, {1.0, 1.0, 1.0}), true);
    const int y = tp.sum(x);
    auto grads = tp.backward(y, Tensor({1}, {1.0}));
    for (double v : grads[static_cast<size_t>(unused)].v) CHECK(v == 0.0);
  }
  SECTION("cotangent shape mismatch throws") {
    Tape tp;
    const int x = tp.leaf(Tensor({2}), true);
    const int y = tp.scale(x, 1.0);
    CHECK_THROWS(tp.backward(y, Tensor({3})));
  }
}

TEST_CASE("linear ops satisfy <Ax,y> = <x,A'y> over random pairs") {
  Rng rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    // conv as a function of its input (kernel fixed)
    Tensor in = random_tensor({2, 6, 6}, rng);
    Tensor k = random_tensor({3, 2, 3, 3}, rng);
    Tensor b({3});
    Tape tp;
    const int xid = tp.leaf(in, true);
    const int yid = tp.conv2d(xid, tp.leaf(k, false), tp.leaf(b, false), 1);
    Tensor y = random_tensor(tp.value(yid).shape, rng);
    auto grads = tp.backward(yid, y);
    const double lhs = dot(tp.value(yid), y);
    const double rhs = dot(in, grads[static_cast<size_t>(xid)]);
    CHECK(std::fabs(lhs - rhs) <= 1e-12 * std::max({std::fabs(lhs), std::fabs(rhs), 1.0}));
  }
  for (int trial = 0; trial < 100; ++trial) {
    // conv as a function of its kernel (input fixed, bias zero)
    Tensor in = random_tensor({2, 5, 5}, rng);
    Tensor k = random_tensor({3, 2, 3, 3}, rng);
    Tape tp;
    const int kid = tp.leaf(k, true);
    const int yid = tp.conv2d(tp.leaf(in, false), kid, tp.leaf(Tensor({3}), false), 1);
    Tensor y = random_tensor(tp.value(yid).shape, rng);
    auto grads = tp.backward(yid, y);
    const double lhs = dot(tp.value(yid), y);
    const double rhs = dot(k, grads[static_cast<size_t>(kid)]);
    CHECK(std::fabs(lhs - rhs) <= 1e-12 * std::max({std::fabs(lhs), std::fabs(rhs), 1.0}));
  }
  for (int trial = 0; trial < 20; ++trial) {
    // crop + concat + scale chain
    Tensor a = random_tensor({2, 4, 4}, rng);
    Tensor c = random_tensor({1, 4, 4}, rng);
    Tape tp;
    const int aid = tp.leaf(a, true);
    const int cat = tp.concat_channels(aid, tp.leaf(c, false));
    const int s = tp.scale(cat, -2.5);
    const int cr = tp.crop2d(s, 3, 2);
    Tensor y = random_tensor(tp.value(cr).shape, rng);
    auto grads = tp.backward(cr, y);
    const double lhs = dot(tp.value(cr), y);
    // only the `a` part carries gradient; the fixed part contributes a constant
    double rhs = dot(a, grads[static_cast<size_t>(aid)]);
    Tape tp0;
    const int cat0 = tp0.concat_channels(tp0.leaf(Tensor({2, 4, 4}), false), tp0.leaf(c, false));
    const int cr0 = tp0.crop2d(tp0.scale(cat0, -2.5), 3, 2);
    rhs += dot(tp0.value(cr0), y);
    CHECK(std::fabs(lhs - rhs) <= 1e-12 * std::max({std::fabs(lhs), std::fabs(rhs), 1.0}));
  }
}

TEST_CASE("composite stack gradient matches finite differences") {
  Rng rng(23);
  Tensor z = random_tensor({2, 8, 8}, rng);
  Tensor k1 = random_tensor({3, 2, 3, 3}, rng);
  Tensor b1 = random_tensor({3}, rng);
  Tensor k2 = random_tensor({1, 3, 3, 3}, rng);
  Tensor b2 = random_tensor({1}, rng);

  auto run = [&](const Tensor& k1v, const Tensor& b1v, const Tensor& k2v, const Tensor& b2v,
                 Tape* tape_out, std::vector<int>* ids) {
    Tape tp;
    const int zi = tp.leaf(z, false);
    const int k1i = tp.leaf(k1v, true);
    const int b1i = tp.leaf(b1v, true);
    const int k2i = tp.leaf(k2v, true);
    const int b2i = tp.leaf(b2v, true);
    int y = tp.leaky_relu(tp.conv2d(zi, k1i, b1i, 2), 0.1);
    y = tp.upsample2x(y);
    y = tp.conv2d(y, k2i, b2i, 1);
    const int s = tp.sum(y);
    const double val = tp.value(s).v[0];
    if (tape_out) {
      *ids = {k1i, b1i, k2i, b2i, s};
      *tape_out = std::move(tp);
    }
    return val;
  };

  Tape tape;
  std::vector<int> ids;
  run(k1, b1, k2, b2, &tape, &ids);
  auto grads = tape.backward(ids[4], Tensor({1}, {1.0}));

  const double step = 1e-6;
  auto fd_check = [&](Tensor& param, const Tensor& grad) {
    for (size_t i = 0; i < param.v.size(); i += 3) {  // probe a subset of coordinates
      const double x0 = param.v[i];
      param.v[i] = x0 + step;
      const double fp = run(k1, b1, k2, b2, nullptr, nullptr);
      param.v[i] = x0 - step;
      const double fm = run(k1, b1, k2, b2, nullptr, nullptr);
      param.v[i] = x0;
      const double fd = (fp - fm) / (2.0 * step);
      const double denom = std::max({std::fabs(grad.v[i]), std::fabs(fd), 1e-12});
      CHECK(std::fabs(grad.v[i] - fd) / denom <= 1e-6);
    }
  };
  fd_check(k1, grads[static_cast<size_t>(ids[0])]);
  fd_check(b1, grads[static_cast<size_t>(ids[1])]);
  fd_check(k2, grads[static_cast<size_t>(ids[2])]);
  fd_check(b2, grads[static_cast<size_t>(ids[3])]);

  CHECK(tape.replay_matches());
}

TEST_CASE("gradient_check on quadratics is exact to roundoff") {
  SECTION("f(x) = x^2 at x = 3") {
    auto f = [](const Tensor& t) { return t.v[0] * t.v[0]; };
    auto g = [](const Tensor& t) { return Tensor({1}, {2.0 * t.v[0]}); };
    CHECK(gradient_check(f, g, Tensor({1}, {3.0}), 1e-4) <= 1e-8);
  }
  SECTION("negative log-prior lambda^2/2 |w|^2") {
    const double lambda = 170.0;
    auto f = [&](const Tensor& t) {
      double s = 0.0;
      for (double v : t.v) s += v * v;
      return 0.5 * lambda * lambda * s;
    };
    auto g = [&](const Tensor& t) {
      Tensor out(t.shape);
      for (size_t i = 0; i < t.v.size(); ++i) out.v[i] = lambda * lambda * t.v[i];
      return out;
    };
    Rng rng(29);
    Tensor w({40});
    fill_normal(w, rng, 0.0, 1.0 / lambda);
    CHECK(gradient_check(f, g, w, 1e-6) <= 1e-8);
  }
  SECTION("non-finite objective throws") {
    auto f = [](const Tensor& t) { return std::log(t.v[0]); };
    auto g = [](const Tensor& t) { return Tensor({1}, {1.0 / t.v[0]}); };
    CHECK_THROWS(gradient_check(f, g, Tensor({1}, {1e-10}), 1.0));
  }
}

TEST_CASE("forward evaluation is bit-deterministic") {
  auto build = [] {
    Rng rng(999);
    Tensor in = random_tensor({3, 9, 9}, rng);
    Tensor k = random_tensor({4, 3, 3, 3}, rng);
    Tensor b = random_tensor({4}, rng);
    Tape tp;
    int y = tp.conv2d(tp.leaf(in, false), tp.leaf(k, true), tp.leaf(b, true), 1);
    y = tp.leaky_relu(y, 0.1);
    y = tp.upsample2x(y);
    return tp.value(y).v;
  };
  CHECK(build() == build());
}
