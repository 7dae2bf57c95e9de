#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <vector>

#include "oracles.hpp"
#include "segada/rng.hpp"
#include "segada/tensor.hpp"

using namespace segada;

namespace {

template <class T>
Tensor<T> random_tensor(std::vector<int> shape, RngStream& rng, double scale = 1.0) {
  Tensor<T> t(std::move(shape));
  for (auto& v : *t.data) v = static_cast<T>(rng.uniform(-scale, scale));
  return t;
}

// FD-checks d(loss)/d(param) for every element of `param`, where make_loss
// replays the forward pass from the current buffer contents.
template <class T>
void check_grad_against_fd(std::vector<T>& param_storage,
                           const std::vector<T>& analytic_grad,
                           const std::function<T()>& make_loss, T h, T tol) {
  REQUIRE(param_storage.size() == analytic_grad.size());
  T worst = 0;
  for (std::size_t i = 0; i < param_storage.size(); ++i) {
    const T fd = oracle::central_diff(param_storage, i, h, make_loss);
    worst = std::max(worst, oracle::rel_err(analytic_grad[i], fd));
  }
  REQUIRE(worst < tol);
}

}  // namespace

TEST_CASE("conv2d forward basics") {
  Tape<float> tape;
  SECTION("all-ones 3x3 input with 2x2 kernel sums four ones") {
    Tensor<float> in({1, 3, 3}, std::vector<float>(9, 1.0f));
    Tensor<float> w({1, 1, 2, 2}, std::vector<float>(4, 1.0f));
    Tensor<float> b({1});
    auto out = conv2d(tape, in, w, b, 1, 0);
    REQUIRE(out.shape == std::vector<int>{1, 2, 2});
    for (float v : *out.data) REQUIRE(v == 4.0f);
  }
  SECTION("1x1 identity kernel reproduces the input") {
    RngStream rng(7);
    auto in = random_tensor<float>({1, 4, 5}, rng);
    Tensor<float> w({1, 1, 1, 1}, std::vector<float>{1.0f});
    Tensor<float> b({1});
    auto out = conv2d(tape, in, w, b, 1, 0);
    REQUIRE(*out.data == *in.data);
  }
}

TEST_CASE("conv2d matches the 6-loop reference on random cases") {
  RngStream rng(123);
  struct Case { int ci, h, w, co, k, stride, pad; };
  for (const Case& c : {Case{2, 5, 5, 3, 3, 1, 0}, Case{2, 5, 5, 3, 3, 1, 1},
                        Case{3, 8, 6, 4, 3, 2, 1}, Case{1, 7, 7, 2, 5, 2, 2},
                        Case{4, 6, 6, 3, 1, 1, 0}}) {
    Tape<float> tape;
    auto in = random_tensor<float>({c.ci, c.h, c.w}, rng);
    auto w = random_tensor<float>({c.co, c.ci, c.k, c.k}, rng);
    auto b = random_tensor<float>({c.co}, rng);
    auto out = conv2d(tape, in, w, b, c.stride, c.pad);
    int ho = 0, wo = 0;
    auto ref = oracle::naive_conv2d(*in.data, c.ci, c.h, c.w, *w.data, c.co,
                                    c.k, *b.data, c.stride, c.pad, ho, wo);
    REQUIRE(out.shape == std::vector<int>{c.co, ho, wo});
    for (std::size_t i = 0; i < ref.size(); ++i)
      REQUIRE(std::abs((*out.data)[i] - ref[i]) < 1e-6f);
  }
}

TEST_CASE("conv2d rejects malformed shapes with the offending dimension") {
  Tape<float> tape;
  Tensor<float> in({2, 4, 4});
  Tensor<float> w({3, 5, 3, 3});
  Tensor<float> b({3});
  REQUIRE_THROWS_WITH(conv2d(tape, in, w, b, 1, 1),
                      Catch::Matchers::ContainsSubstring("weight input-channel dim 5"));
  Tensor<float> w2({3, 2, 3, 3});
  Tensor<float> bbad({4});
  REQUIRE_THROWS_WITH(conv2d(tape, in, w2, bbad, 1, 1),
                      Catch::Matchers::ContainsSubstring("bias length 4"));
  Tensor<float> wbig({1, 2, 7, 7});
  Tensor<float> b1({1});
  REQUIRE_THROWS_WITH(conv2d(tape, in, wbig, b1, 1, 0),
                      Catch::Matchers::ContainsSubstring("exceeds padded input"));
  REQUIRE_THROWS(conv2d(tape, in, w2, b, 0, 1));
}

TEMPLATE_TEST_CASE("conv2d backward matches finite differences", "", float, double) {
  using T = TestType;
  const T h = static_cast<T>(std::is_same_v<T, float> ? oracle::kFdStep32 : oracle::kFdStep64);
  const T tol = static_cast<T>(std::is_same_v<T, float> ? oracle::kFdTol32 : oracle::kFdTol64);
  RngStream rng(99);
  auto in = random_tensor<T>({2, 4, 4}, rng);
  auto w = random_tensor<T>({3, 2, 3, 3}, rng);
  auto b = random_tensor<T>({3}, rng);
  in.requires_grad = w.requires_grad = b.requires_grad = true;

  auto loss_value = [&]() {
    Tape<T> t2;
    Tensor<T> i2 = in, w2 = w, b2 = b;
    t2.leaf(i2);
    t2.leaf(w2);
    t2.leaf(b2);
    return sum(t2, conv2d(t2, i2, w2, b2, 2, 1)).item();
  };

  Tape<T> tape;
  Tensor<T> iv = tape.watch(in), wv = tape.watch(w), bv = tape.watch(b);
  auto loss = sum(tape, conv2d(tape, iv, wv, bv, 2, 1));
  tape.backward(loss);

  check_grad_against_fd<T>(*in.data, tape.grad(iv.node), loss_value, h, tol);
  check_grad_against_fd<T>(*w.data, tape.grad(wv.node), loss_value, h, tol);
  check_grad_against_fd<T>(*b.data, tape.grad(bv.node), loss_value, h, tol);
}

TEST_CASE("upsample basics") {
  Tape<float> tape;
  SECTION("factor 1 is the identity") {
    Tensor<float> in({1, 2, 2}, {1, 2, 3, 4});
    auto out = upsample(tape, in, 1, UpsampleMode::Nearest);
    REQUIRE(out.data == in.data);
  }
  SECTION("nearest replicates blocks") {
    Tensor<float> in({1, 1, 1}, {5.0f});
    auto out = upsample(tape, in, 2, UpsampleMode::Nearest);
    REQUIRE(out.shape == std::vector<int>{1, 2, 2});
    for (float v : *out.data) REQUIRE(v == 5.0f);
  }
  SECTION("factor below 1 is rejected") {
    Tensor<float> in({1, 2, 2});
    REQUIRE_THROWS(upsample(tape, in, 0, UpsampleMode::Nearest));
  }
  SECTION("bilinear of a constant image stays constant") {
    Tensor<float> in({2, 3, 3}, std::vector<float>(18, 0.75f));
    auto out = upsample(tape, in, 4, UpsampleMode::Bilinear);
    for (float v : *out.data) REQUIRE(v == Catch::Approx(0.75f));
  }
}

TEMPLATE_TEST_CASE("upsample backward matches finite differences", "", float, double) {
  using T = TestType;
  const T h = static_cast<T>(std::is_same_v<T, float> ? oracle::kFdStep32 : oracle::kFdStep64);
  const T tol = static_cast<T>(std::is_same_v<T, float> ? oracle::kFdTol32 : oracle::kFdTol64);
  for (UpsampleMode mode : {UpsampleMode::Bilinear, UpsampleMode::Nearest}) {
    RngStream rng(5);
    auto in = random_tensor<T>({1, 3, 3}, rng);
    in.requires_grad = true;
    // tanh after the upsample makes the output gradient non-uniform
    auto loss_value = [&]() {
      Tape<T> t2;
      Tensor<T> i2 = in;
      t2.leaf(i2);
      return sum(t2, tanh_op(t2, upsample(t2, i2, 2, mode))).item();
    };
    Tape<T> tape;
    Tensor<T> iv = tape.watch(in);
    auto loss = sum(tape, tanh_op(tape, upsample(tape, iv, 2, mode)));
    tape.backward(loss);
    check_grad_against_fd<T>(*in.data, tape.grad(iv.node), loss_value, h, tol);
  }
}

TEST_CASE("activations") {
  Tape<float> tape;
  SECTION("leaky_relu negative side uses the slope") {
    Tensor<float> in({1}, {-1.0f});
    auto out = leaky_relu(tape, in, 0.2f);
    REQUIRE((*out.data)[0] == Catch::Approx(-0.2f));
  }
  SECTION("relu is the identity on positive input") {
    Tensor<float> in({4}, {0.5f, 1.0f, 2.0f, 3.5f});
    auto out = relu(tape, in);
    REQUIRE(*out.data == *in.data);
  }
  SECTION("gradient at exactly zero takes the positive side") {
    Tensor<float> in({1}, {0.0f});
    in.requires_grad = true;
    Tape<float> t;
    auto iv = t.watch(in);
    auto loss = sum(t, leaky_relu(t, iv, 0.2f));
    t.backward(loss);
    REQUIRE(t.grad(iv.node)[0] == 1.0f);
  }
}

TEMPLATE_TEST_CASE("tanh backward matches finite differences", "", float, double) {
  using T = TestType;
  const T h = static_cast<T>(std::is_same_v<T, float> ? oracle::kFdStep32 : oracle::kFdStep64);
  const T tol = static_cast<T>(std::is_same_v<T, float> ? oracle::kFdTol32 : oracle::kFdTol64);
  RngStream rng(11);
  auto in = random_tensor<T>({2, 3, 3}, rng, 2.0);
  in.requires_grad = true;
  auto loss_value = [&]() {
    Tape<T> t2;
    Tensor<T> i2 = in;
    t2.leaf(i2);
    return sum(t2, tanh_op(t2, i2)).item();
  };
  Tape<T> tape;
  auto iv = tape.watch(in);
  auto loss = sum(tape, tanh_op(tape, iv));
  tape.backward(loss);
  check_grad_against_fd<T>(*in.data, tape.grad(iv.node), loss_value, h, tol);
}

TEST_CASE("dropout") {
  SECTION("p = 0 and eval mode are identities") {
    Tape<float> tape;
    RngStream rng(1);
    Tensor<float> in({8}, {1, 2, 3, 4, 5, 6, 7, 8});
    auto a = dropout(tape, in, 0.0, true, rng);
    REQUIRE(a.data == in.data);
    auto b = dropout(tape, in, 0.9, false, rng);
    REQUIRE(b.data == in.data);
  }
  SECTION("p >= 1 is rejected") {
    Tape<float> tape;
    RngStream rng(1);
    Tensor<float> in({4});
    REQUIRE_THROWS(dropout(tape, in, 1.0, true, rng));
  }
  SECTION("survivor fraction concentrates around 1-p") {
    Tape<float> tape;
    RngStream rng(42);
    const std::size_t n = 100000;
    Tensor<float> in({int(n)}, std::vector<float>(n, 1.0f));
    auto out = dropout(tape, in, 0.5, true, rng);
    std::size_t kept = 0;
    for (float v : *out.data) kept += v != 0.0f;
    const double frac = double(kept) / double(n);
    REQUIRE(frac > 0.49);
    REQUIRE(frac < 0.51);
    // survivors get the inverted-dropout scale
    for (float v : *out.data) REQUIRE((v == 0.0f || v == 2.0f));
  }
  SECTION("identical seed gives a bit-identical mask") {
    Tensor<float> in({64}, std::vector<float>(64, 1.0f));
    Tape<float> t1, t2;
    RngStream r1(substream(9, "dropout", 3)), r2(substream(9, "dropout", 3));
    auto o1 = dropout(t1, in, 0.3, true, r1);
    auto o2 = dropout(t2, in, 0.3, true, r2);
    REQUIRE(*o1.data == *o2.data);
  }
  SECTION("backward scales by the stored mask") {
    Tensor<float> in({16}, std::vector<float>(16, 2.0f));
    in.requires_grad = true;
    Tape<float> tape;
    auto iv = tape.watch(in);
    RngStream rng(5);
    auto out = dropout(tape, iv, 0.25, true, rng);
    auto loss = sum(tape, out);
    tape.backward(loss);
    const auto& g = tape.grad(iv.node);
    for (std::size_t i = 0; i < 16; ++i) {
      const float expect = (*out.data)[i] == 0.0f ? 0.0f : 1.0f / 0.75f;
      REQUIRE(g[i] == Catch::Approx(expect));
    }
  }
}

TEST_CASE("global_avg_pool") {
  Tape<float> tape;
  SECTION("constant tensor pools to the constant") {
    Tensor<float> in({3, 4, 4}, std::vector<float>(48, 1.25f));
    auto out = global_avg_pool(tape, in);
    REQUIRE(out.shape == std::vector<int>{3});
    for (float v : *out.data) REQUIRE(v == Catch::Approx(1.25f));
  }
  SECTION("mean of {1,2,3,4} is 2.5") {
    Tensor<float> in({1, 2, 2}, {1, 2, 3, 4});
    auto out = global_avg_pool(tape, in);
    REQUIRE((*out.data)[0] == Catch::Approx(2.5f));
  }
  SECTION("matches a direct loop on random tensors") {
    RngStream rng(31);
    auto in = random_tensor<float>({4, 5, 7}, rng);
    auto out = global_avg_pool(tape, in);
    for (int c = 0; c < 4; ++c) {
      double s = 0;
      for (int i = 0; i < 35; ++i) s += (*in.data)[c * 35 + i];
      REQUIRE(std::abs((*out.data)[c] - s / 35.0) < 1e-6);
    }
  }
}

TEST_CASE("pixelwise cross entropy") {
  SECTION("uniform logits give ln K") {
    Tape<float> tape;
    Tensor<float> logits({4, 2, 2});
    std::vector<std::uint8_t> tgt(4, 2);
    auto loss = pixelwise_cross_entropy(tape, logits, tgt.data(), 2, 2, 255);
    REQUIRE(loss.item() == Catch::Approx(std::log(4.0)).epsilon(1e-6));
  }
  SECTION("huge correct-logit margin drives the loss to zero") {
    Tape<float> tape;
    Tensor<float> logits({3, 1, 1}, {30.0f, 0.0f, 0.0f});
    std::vector<std::uint8_t> tgt{0};
    auto loss = pixelwise_cross_entropy(tape, logits, tgt.data(), 1, 1, 255);
    REQUIRE(loss.item() < 1e-6f);
  }
  SECTION("all pixels ignored returns exact zero with zero gradient") {
    Tape<float> tape;
    Tensor<float> logits({3, 2, 2}, std::vector<float>(12, 0.5f));
    logits.requires_grad = true;
    auto lv = tape.watch(logits);
    std::vector<std::uint8_t> tgt(4, 255);
    auto loss = pixelwise_cross_entropy(tape, lv, tgt.data(), 2, 2, 255);
    REQUIRE(loss.item() == 0.0f);
    tape.backward(loss);
    for (float g : tape.grad(lv.node)) REQUIRE(g == 0.0f);
  }
  SECTION("out-of-range label id is rejected") {
    Tape<float> tape;
    Tensor<float> logits({3, 1, 1});
    std::vector<std::uint8_t> tgt{7};
    REQUIRE_THROWS_WITH(pixelwise_cross_entropy(tape, logits, tgt.data(), 1, 1, 255),
                        Catch::Matchers::ContainsSubstring("label id 7"));
  }
}

TEMPLATE_TEST_CASE("cross entropy backward matches finite differences", "", float, double) {
  using T = TestType;
  const T h = static_cast<T>(std::is_same_v<T, float> ? oracle::kFdStep32 : oracle::kFdStep64);
  const T tol = static_cast<T>(std::is_same_v<T, float> ? oracle::kFdTol32 : oracle::kFdTol64);
  RngStream rng(17);
  auto logits = random_tensor<T>({3, 2, 2}, rng, 1.5);
  logits.requires_grad = true;
  std::vector<std::uint8_t> tgt{0, 2, 255, 1};
  auto loss_value = [&]() {
    Tape<T> t2;
    Tensor<T> l2 = logits;
    t2.leaf(l2);
    return pixelwise_cross_entropy(t2, l2, tgt.data(), 2, 2, std::uint8_t(255)).item();
  };
  Tape<T> tape;
  auto lv = tape.watch(logits);
  auto loss = pixelwise_cross_entropy(tape, lv, tgt.data(), 2, 2, std::uint8_t(255));
  tape.backward(loss);
  check_grad_against_fd<T>(*logits.data, tape.grad(lv.node), loss_value, h, tol);
}

TEST_CASE("l1 loss") {
  SECTION("identical inputs give zero, and zero gradient through both") {
    Tensor<float> x({2, 2}, {1, -2, 3, -4});
    x.requires_grad = true;
    Tape<float> tape;
    auto xv = tape.watch(x);
    auto loss = l1_loss(tape, xv, xv);
    REQUIRE(loss.item() == 0.0f);
    tape.backward(loss);
    for (float g : tape.grad(xv.node)) REQUIRE(g == 0.0f);
  }
  SECTION("ones vs zeros gives one") {
    Tape<float> tape;
    Tensor<float> a({3}, {1, 1, 1});
    Tensor<float> b({3});
    REQUIRE(l1_loss(tape, a, b).item() == Catch::Approx(1.0f));
  }
  SECTION("shape mismatch is rejected") {
    Tape<float> tape;
    Tensor<float> a({3});
    Tensor<float> b({4});
    REQUIRE_THROWS(l1_loss(tape, a, b));
  }
  SECTION("gradient is sign(a-b)/n") {
    Tensor<float> a({4}, {2, -3, 0, 5});
    Tensor<float> b({4}, {1, -1, 0, 9});
    a.requires_grad = true;
    Tape<float> tape;
    auto av = tape.watch(a);
    auto loss = l1_loss(tape, av, b);
    tape.backward(loss);
    const auto& g = tape.grad(av.node);
    REQUIRE(g[0] == Catch::Approx(0.25f));
    REQUIRE(g[1] == Catch::Approx(-0.25f));
    REQUIRE(g[2] == 0.0f);  // subgradient at 0 pinned to 0
    REQUIRE(g[3] == Catch::Approx(-0.25f));
  }
}

TEMPLATE_TEST_CASE("l1 backward matches finite differences", "", float, double) {
  using T = TestType;
  const T h = static_cast<T>(std::is_same_v<T, float> ? oracle::kFdStep32 : oracle::kFdStep64);
  const T tol = static_cast<T>(std::is_same_v<T, float> ? oracle::kFdTol32 : oracle::kFdTol64);
  RngStream rng(23);
  auto a = random_tensor<T>({2, 3, 3}, rng);
  auto b = random_tensor<T>({2, 3, 3}, rng);
  a.requires_grad = true;
  auto loss_value = [&]() {
    Tape<T> t2;
    Tensor<T> a2 = a;
    t2.leaf(a2);
    return l1_loss(t2, a2, b).item();
  };
  Tape<T> tape;
  auto av = tape.watch(a);
  auto loss = l1_loss(tape, av, b);
  tape.backward(loss);
  check_grad_against_fd<T>(*a.data, tape.grad(av.node), loss_value, h, tol);
}

TEST_CASE("backward mechanics") {
  SECTION("sum of a 2x2 tensor gives unit gradients") {
    Tensor<float> x({2, 2}, {1, 2, 3, 4});
    x.requires_grad = true;
    Tape<float> tape;
    auto xv = tape.watch(x);
    auto loss = sum(tape, xv);
    tape.backward(loss);
    for (float g : tape.grad(xv.node)) REQUIRE(g == 1.0f);
  }
  SECTION("a node consumed twice accumulates both gradients") {
    Tensor<float> x({3}, {1, 2, 3});
    x.requires_grad = true;
    Tape<float> tape;
    auto xv = tape.watch(x);
    auto y = add(tape, xv, xv);
    auto loss = sum(tape, y);
    tape.backward(loss);
    for (float g : tape.grad(xv.node)) REQUIRE(g == 2.0f);
  }
  SECTION("non-scalar loss and detached loss are rejected") {
    Tape<float> tape;
    Tensor<float> x({2}, {1, 2});
    x.requires_grad = true;
    auto xv = tape.watch(x);
    REQUIRE_THROWS(tape.backward(xv));
    Tensor<float> detached = Tensor<float>::scalar(1.0f);
    REQUIRE_THROWS(tape.backward(detached));
  }
  SECTION("gradients flow through frozen tensors without materializing them") {
    RngStream rng(3);
    auto x = random_tensor<float>({1, 4, 4}, rng);
    auto w1 = random_tensor<float>({2, 1, 3, 3}, rng);
    auto b1 = random_tensor<float>({2}, rng);
    auto w2 = random_tensor<float>({1, 2, 3, 3}, rng);
    auto b2 = random_tensor<float>({1}, rng);
    x.requires_grad = true;  // only the input wants gradients
    Tape<float> tape;
    auto xv = tape.watch(x);
    auto w1v = tape.watch(w1);  // frozen: requires_grad stays false
    auto b1v = tape.watch(b1);
    auto h1 = leaky_relu(tape, conv2d(tape, xv, w1v, b1v, 1, 1), 0.2f);
    auto h2 = conv2d(tape, h1, w2, b2, 1, 1);  // weights not even on the tape
    auto loss = sum(tape, h2);
    tape.backward(loss);
    REQUIRE(tape.has_grad(xv.node));
    bool any_nonzero = false;
    for (float g : tape.grad(xv.node)) any_nonzero |= g != 0.0f;
    REQUIRE(any_nonzero);
    REQUIRE_FALSE(tape.has_grad(w1v.node));
    REQUIRE_FALSE(tape.has_grad(b1v.node));
  }
}

TEMPLATE_TEST_CASE("composite conv-lrelu-conv-CE gradients match finite differences",
                   "", float, double) {
  using T = TestType;
  const T h = static_cast<T>(std::is_same_v<T, float> ? oracle::kFdStep32 : oracle::kFdStep64);
  const T tol = static_cast<T>(std::is_same_v<T, float> ? oracle::kFdTol32 : oracle::kFdTol64);
  RngStream rng(77);
  auto x = random_tensor<T>({2, 4, 4}, rng);
  auto w1 = random_tensor<T>({3, 2, 3, 3}, rng, 0.5);
  auto b1 = random_tensor<T>({3}, rng, 0.1);
  auto w2 = random_tensor<T>({3, 3, 3, 3}, rng, 0.5);
  auto b2 = random_tensor<T>({3}, rng, 0.1);
  std::vector<std::uint8_t> tgt(16);
  for (std::size_t i = 0; i < 16; ++i) tgt[i] = std::uint8_t(i % 3);
  tgt[5] = 255;
  w1.requires_grad = b1.requires_grad = w2.requires_grad = b2.requires_grad = true;

  auto loss_value = [&]() {
    Tape<T> t2;
    Tensor<T> w1c = w1, b1c = b1, w2c = w2, b2c = b2;
    t2.leaf(w1c);
    t2.leaf(b1c);
    t2.leaf(w2c);
    t2.leaf(b2c);
    auto h1 = leaky_relu(t2, conv2d(t2, x, w1c, b1c, 1, 1), T(0.2));
    auto logits = conv2d(t2, h1, w2c, b2c, 1, 1);
    return pixelwise_cross_entropy(t2, logits, tgt.data(), 4, 4, std::uint8_t(255)).item();
  };

  Tape<T> tape;
  auto w1v = tape.watch(w1), b1v = tape.watch(b1);
  auto w2v = tape.watch(w2), b2v = tape.watch(b2);
  auto h1 = leaky_relu(tape, conv2d(tape, x, w1v, b1v, 1, 1), T(0.2));
  auto logits = conv2d(tape, h1, w2v, b2v, 1, 1);
  auto loss = pixelwise_cross_entropy(tape, logits, tgt.data(), 4, 4, std::uint8_t(255));
  tape.backward(loss);

  check_grad_against_fd<T>(*w1.data, tape.grad(w1v.node), loss_value, h, tol);
  check_grad_against_fd<T>(*b1.data, tape.grad(b1v.node), loss_value, h, tol);
  check_grad_against_fd<T>(*w2.data, tape.grad(w2v.node), loss_value, h, tol);
  check_grad_against_fd<T>(*b2.data, tape.grad(b2v.node), loss_value, h, tol);
}

TEST_CASE("non-finite values are a hard error") {
  Tape<float> tape;
  Tensor<float> in({1, 2, 2}, {1.0f, 2.0f, std::numeric_limits<float>::infinity(), 4.0f});
  Tensor<float> w({1, 1, 1, 1}, {1.0f});
  Tensor<float> b({1});
  REQUIRE_THROWS_WITH(conv2d(tape, in, w, b, 1, 0),
                      Catch::Matchers::ContainsSubstring("non-finite"));
}
