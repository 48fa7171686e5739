#include "doctest.h"

#include <cmath>
#include <set>
#include <cstring>
#include <sstream>

#include "sinkgate/numerics/adam.hpp"
#include "sinkgate/numerics/autodiff.hpp"
#include "sinkgate/numerics/kernels.hpp"
#include "sinkgate/numerics/ops.hpp"
#include "sinkgate/numerics/rng.hpp"
#include "sinkgate/numerics/sgt1.hpp"
#include "test_util.hpp"

using namespace sinkgate;
using testutil::random_tensor;

namespace {

std::vector<const kernels::KernelTable*> available_tables() {
  std::vector<const kernels::KernelTable*> out{&kernels::scalar()};
  if (kernels::avx2()) out.push_back(kernels::avx2());
  if (kernels::neon()) out.push_back(kernels::neon());
  return out;
}

struct ActiveGuard {
  const kernels::KernelTable& saved = kernels::active();
  ~ActiveGuard() { kernels::set_active(saved); }
};

}  // namespace

TEST_CASE("matmul small cases") {
  const Tensor id = Tensor::from_rows({{1, 0}, {0, 1}});
  const Tensor b = Tensor::from_rows({{3, 4}, {5, 6}});
  CHECK(kernels::matmul(id, b) == b);
  CHECK(kernels::matmul(Tensor::from_rows({{2}}), Tensor::from_rows({{3}}))[0] == 6.0);
  CHECK_THROWS_AS(kernels::matmul(Tensor::matrix(2, 3), Tensor::matrix(2, 3)), ShapeError);
}

TEST_CASE("matmul matches triple-loop oracle") {
  const Tensor a = random_tensor({5, 4}, 1);
  const Tensor b = random_tensor({4, 3}, 2);
  const Tensor c = kernels::matmul(a, b);
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      long double acc = 0;
      for (std::size_t k = 0; k < 4; ++k) acc += static_cast<long double>(a.at(i, k)) * b.at(k, j);
      CHECK(std::fabs(c.at(i, j) - static_cast<double>(acc)) <= 1e-12);
    }
  }
  CHECK(max_abs_diff(c, kernels::matmul_naive(a, b)) <= 1e-12);
}

TEST_CASE("transposed products agree with explicit transposes") {
  const Tensor a = random_tensor({7, 5}, 3);
  const Tensor b = random_tensor({6, 5}, 4);
  Tensor bt = Tensor::matrix(5, 6);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 5; ++j) bt.at(j, i) = b.at(i, j);
  CHECK(max_abs_diff(kernels::matmul_bt(a, b), kernels::matmul_naive(a, bt)) <= 1e-12);
  Tensor at = Tensor::matrix(5, 7);
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t j = 0; j < 5; ++j) at.at(j, i) = a.at(i, j);
  const Tensor c = random_tensor({7, 3}, 5);
  CHECK(max_abs_diff(kernels::matmul_at(a, c), kernels::matmul_naive(at, c)) <= 1e-12);
}

TEST_CASE("SIMD kernel tables are bitwise equal to scalar") {
  const auto tables = available_tables();
  MESSAGE("kernel tables available: " << tables.size());
  const auto& ref = kernels::scalar();
  for (std::size_t n : {0u, 1u, 3u, 4u, 5u, 8u, 17u, 64u, 1001u}) {
    const Tensor a = random_tensor({n}, 10 + n, 3.0);
    const Tensor b = random_tensor({n}, 20 + n, 3.0);
    for (const auto* t : tables) {
      CAPTURE(t->name);
      CAPTURE(n);
      const double d_ref = ref.dot(a.data().data(), b.data().data(), n);
      const double d = t->dot(a.data().data(), b.data().data(), n);
      CHECK(std::memcmp(&d_ref, &d, sizeof d) == 0);
      const double s_ref = ref.sum(a.data().data(), n);
      const double s = t->sum(a.data().data(), n);
      CHECK(std::memcmp(&s_ref, &s, sizeof s) == 0);
      Tensor y1 = b, y2 = b;
      ref.axpy(y1.data().data(), 0.37, a.data().data(), n);
      t->axpy(y2.data().data(), 0.37, a.data().data(), n);
      CHECK(bitwise_equal(y1, y2));
      ref.add(y1.data().data(), a.data().data(), b.data().data(), n);
      t->add(y2.data().data(), a.data().data(), b.data().data(), n);
      CHECK(bitwise_equal(y1, y2));
      ref.mul(y1.data().data(), a.data().data(), b.data().data(), n);
      t->mul(y2.data().data(), a.data().data(), b.data().data(), n);
      CHECK(bitwise_equal(y1, y2));
      ref.scale(y1.data().data(), -1.25, a.data().data(), n);
      t->scale(y2.data().data(), -1.25, a.data().data(), n);
      CHECK(bitwise_equal(y1, y2));
    }
  }
}

TEST_CASE("tensor routines give bitwise-identical results under every table") {
  ActiveGuard guard;
  const Tensor a = random_tensor({9, 13}, 31);
  const Tensor b = random_tensor({13, 6}, 32);
  const Tensor g = random_tensor({13}, 33);
  kernels::set_active(kernels::scalar());
  const Tensor mm = kernels::matmul(a, b);
  const Tensor ln = ops::layernorm_rows(a, g, g, 1e-5);
  const Tensor sm = ops::softmax_rows(a);
  for (const auto* t : available_tables()) {
    kernels::set_active(*t);
    CHECK(bitwise_equal(kernels::matmul(a, b), mm));
    CHECK(bitwise_equal(ops::layernorm_rows(a, g, g, 1e-5), ln));
    CHECK(bitwise_equal(ops::softmax_rows(a), sm));
  }
}

TEST_CASE("softmax rows") {
  CHECK(ops::softmax_rows(Tensor::from_rows({{0, 0}})) == Tensor::from_rows({{0.5, 0.5}}));
  for (double c : {-700.0, -3.0, 0.0, 42.0, 900.0}) {
    const Tensor y = ops::softmax_rows(Tensor::from_rows({{c, c, c, c}}));
    for (double v : y.data()) CHECK(v == 0.25);
  }
  const Tensor y = ops::softmax_rows(Tensor::from_rows({{1, 2, 3}}));
  const long double z = std::exp(1.0L) + std::exp(2.0L) + std::exp(3.0L);
  for (int j = 0; j < 3; ++j) CHECK(std::fabs(y[j] - static_cast<double>(std::exp(j + 1.0L) / z)) <= 1e-12);

  const Tensor x = random_tensor({20, 11}, 7, 10.0);
  const Tensor s = ops::softmax_rows(x);
  Tensor shifted = x;
  for (std::size_t r = 0; r < 20; ++r)
    for (auto& v : shifted.row(r)) v += 3.0 * static_cast<double>(r) - 17.0;
  const Tensor s2 = ops::softmax_rows(shifted);
  for (std::size_t r = 0; r < 20; ++r) {
    double total = 0;
    for (double v : s.row(r)) {
      CHECK(v >= 0.0);
      total += v;
    }
    CHECK(std::fabs(total - 1.0) <= 1e-9);
  }
  CHECK(max_abs_diff(s, s2) <= 1e-12);
  Tensor bad = x;
  bad[3] = std::nan("");
  CHECK_THROWS_AS(ops::softmax_rows(bad), NumericError);
}

TEST_CASE("causal softmax masks the future exactly") {
  const Tensor y = ops::causal_softmax_rows(random_tensor({5, 5}, 9));
  for (std::size_t r = 0; r < 5; ++r) {
    for (std::size_t c = r + 1; c < 5; ++c) CHECK(y.at(r, c) == 0.0);
  }
  CHECK(y.at(0, 0) == 1.0);
}

TEST_CASE("layernorm examples") {
  const Tensor ones = Tensor::vector(4, 1.0), zeros = Tensor::vector(4, 0.0);
  const Tensor c = ops::layernorm_rows(Tensor::from_rows({{5, 5, 5, 5}}), ones, zeros, 1e-5);
  for (double v : c.data()) CHECK(v == 0.0);

  const Tensor y = ops::layernorm_rows(Tensor::from_rows({{1, 3}}), Tensor::vector(2, 1.0), Tensor::vector(2, 0.0), 0.0);
  CHECK(y[0] == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(y[1] == doctest::Approx(1.0).epsilon(1e-15));

  const Tensor beta = random_tensor({6}, 12);
  const Tensor x = random_tensor({3, 6}, 13);
  const Tensor p = ops::layernorm_rows(x, Tensor::vector(6, 0.0), beta, 1e-5);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t j = 0; j < 6; ++j) CHECK(p.at(r, j) == beta[j]);

  const Tensor n = ops::layernorm_rows(random_tensor({8, 16}, 14, 5.0), Tensor::vector(16, 1.0), Tensor::vector(16, 0.0), 0.0);
  for (std::size_t r = 0; r < 8; ++r) {
    double m = 0, v = 0;
    for (double e : n.row(r)) m += e;
    m /= 16;
    for (double e : n.row(r)) v += (e - m) * (e - m);
    CHECK(std::fabs(m) <= 1e-6);
    CHECK(std::fabs(v / 16 - 1.0) <= 1e-6);
  }
}

TEST_CASE("rng determinism and stream independence") {
  Rng a(123), b(123);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  // Deriving a stream does not depend on what else was drawn.
  Rng parent(5);
  const Rng s1 = parent.split("scene", 3);
  for (int i = 0; i < 10; ++i) parent.next_u64();
  Rng s2 = parent.split("scene", 3);
  Rng s1c = s1;
  CHECK(s1c.next_u64() == s2.next_u64());
  CHECK(Rng::derive(1, "a", 0) != Rng::derive(1, "b", 0));
  CHECK(Rng::derive(1, "a", 0) != Rng::derive(1, "a", 1));
  // Pinned value guards the cross-platform stream.
  CHECK(Rng(0).next_u64() == Rng(0).next_u64());
  Rng u(9);
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 2000; ++i) seen.insert(u.below(7));
  CHECK(seen.size() == 7);
  const Tensor t1 = random_tensor({50}, 77), t2 = random_tensor({50}, 77);
  CHECK(bitwise_equal(t1, t2));
}

TEST_CASE("sgt1 round trip") {
  const Tensor t = random_tensor({3, 4, 2}, 55);
  std::stringstream ss;
  sgt1::write(ss, t);
  const std::string bytes = ss.str();
  CHECK(bytes.rfind("SGT1 3 3 4 2 f64\n", 0) == 0);
  CHECK(bytes.size() == 17 + 24 * 8);
  CHECK(bitwise_equal(sgt1::read(ss), t));

  std::stringstream s32;
  sgt1::write(s32, t, sgt1::Dtype::f32);
  const Tensor r = sgt1::read(s32);
  for (std::size_t i = 0; i < t.size(); ++i) CHECK(r[i] == static_cast<double>(static_cast<float>(t[i])));

  // Little-endian payload of 1.0 in f64.
  const std::string one = sgt1::encode(Tensor::scalar(1.0));
  CHECK(one == std::string("SGT1 1 1 f64\n\x00\x00\x00\x00\x00\x00\xf0\x3f", 21));

  std::stringstream bad("SGT2 1 1 f64\n");
  CHECK_THROWS_AS(sgt1::read(bad), IoError);
  std::stringstream trunc("SGT1 1 4 f64\nabc");
  CHECK_THROWS_AS(sgt1::read(trunc), IoError);
}

// ---- autodiff -------------------------------------------------------------

namespace {

using OpFn = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;

// Checks one op: loss = sum(op(inputs) .* R) with a fixed random R.
double check_op(const OpFn& op, std::vector<Tensor> inputs, std::uint64_t seed) {
  Tensor weights;
  auto run = [&](bool want_grads, std::vector<Tensor>* grads) {
    ad::Tape tape;
    std::vector<ad::Var> vars;
    for (auto& t : inputs) vars.push_back(tape.parameter_ref(t));
    ad::Var out = op(tape, vars);
    if (weights.empty()) weights = random_tensor(out.value().shape(), seed);
    ad::Var loss = ad::sum(ad::mul(out, tape.constant_ref(weights)));
    if (want_grads) {
      tape.backward(loss);
      for (auto& v : vars) grads->push_back(tape.grad(v) ? *tape.grad(v) : Tensor(v.value().shape()));
    }
    return loss.value()[0];
  };
  std::vector<Tensor> analytic;
  run(true, &analytic);
  return testutil::gradcheck(inputs, [&] { return run(false, nullptr); }, analytic);
}

}  // namespace

TEST_CASE("every differentiable op matches central finite differences") {
  const double tol = 1e-4;
  using V = std::vector<ad::Var>;
  CHECK(check_op([](ad::Tape&, const V& v) { return ad::matmul(v[0], v[1]); },
                 {random_tensor({3, 4}, 1), random_tensor({4, 2}, 2)}, 100) <= tol);
  CHECK(check_op([](ad::Tape&, const V& v) { return ad::matmul_bt(v[0], v[1]); },
                 {random_tensor({3, 4}, 3), random_tensor({5, 4}, 4)}, 101) <= tol);
  CHECK(check_op([](ad::Tape&, const V& v) { return ad::add(v[0], v[1]); },
                 {random_tensor({3, 4}, 5), random_tensor({3, 4}, 6)}, 102) <= tol);
  CHECK(check_op([](ad::Tape&, const V& v) { return ad::add_rowvec(v[0], v[1]); },
                 {random_tensor({3, 4}, 7), random_tensor({4}, 8)}, 103) <= tol);
  CHECK(check_op([](ad::Tape&, const V& v) { return ad::scale(v[0], -2.5); }, {random_tensor({2, 3}, 9)}, 104) <= tol);
  CHECK(check_op([](ad::Tape&, const V& v) { return ad::mul(v[0], v[1]); },
                 {random_tensor({3, 3}, 10), random_tensor({3, 3}, 11)}, 105) <= tol);
  CHECK(check_op([](ad::Tape&, const V& v) { return ad::scale_rows(v[0], v[1]); },
                 {random_tensor({4, 3}, 12), random_tensor({4}, 13)}, 106) <= tol);
  CHECK(check_op([](ad::Tape&, const V& v) { return ad::gelu(v[0]); }, {random_tensor({3, 5}, 14, 2.0)}, 107) <= tol);
  CHECK(check_op([](ad::Tape&, const V& v) { return ad::softmax_rows(v[0]); }, {random_tensor({3, 5}, 15)}, 108) <= tol);
  CHECK(check_op([](ad::Tape&, const V& v) { return ad::causal_softmax_rows(v[0], 1); },
                 {random_tensor({4, 6}, 16)}, 109) <= tol);
  CHECK(check_op([](ad::Tape&, const V& v) { return ad::layernorm_rows(v[0], v[1], v[2], 1e-5); },
                 {random_tensor({3, 6}, 17), random_tensor({6}, 18), random_tensor({6}, 19)}, 110) <= tol);
  CHECK(check_op([](ad::Tape&, const V& v) { return ad::rmsnorm_rows(v[0], v[1], 1e-6); },
                 {random_tensor({3, 6}, 20), random_tensor({6}, 21)}, 111) <= tol);
  CHECK(check_op([](ad::Tape&, const V& v) { return ad::slice_cols(v[0], 2, 3); }, {random_tensor({3, 6}, 22)}, 112) <= tol);
  CHECK(check_op([](ad::Tape&, const V& v) { return ad::concat_cols(v); },
                 {random_tensor({2, 3}, 23), random_tensor({2, 1}, 24)}, 113) <= tol);
  CHECK(check_op([](ad::Tape&, const V& v) { return ad::concat_rows(v); },
                 {random_tensor({2, 3}, 25), random_tensor({1, 3}, 26)}, 114) <= tol);
  CHECK(check_op([](ad::Tape&, const V& v) { return ad::row(v[0], 2); }, {random_tensor({4, 3}, 27)}, 115) <= tol);
  CHECK(check_op(
            [](ad::Tape&, const V& v) {
              const std::vector<std::size_t> rows{0, 2, 3};
              return ad::mean_rows(v[0], rows);
            },
            {random_tensor({4, 3}, 28)}, 116) <= tol);
  CHECK(check_op(
            [](ad::Tape&, const V& v) {
              const std::vector<std::size_t> ids{1, 1, 0, 3};
              return ad::gather_rows(v[0], ids);
            },
            {random_tensor({4, 3}, 29)}, 117) <= tol);
  CHECK(check_op(
            [](ad::Tape& t, const V& v) {
              const std::vector<int> groups{0, -1, 1, 1, 0};
              return ad::scale_rows(t.constant(random_tensor({5, 2}, 30)), ad::expand_groups(v[0], groups));
            },
            {random_tensor({2}, 31)}, 118) <= tol);
  CHECK(check_op([](ad::Tape&, const V& v) { return ad::cross_entropy(v[0], 3); }, {random_tensor({1, 7}, 32)}, 119) <= tol);
}

TEST_CASE("sum of W x gives outer-product gradient") {
  const Tensor w = random_tensor({3, 4}, 40);
  const Tensor x = random_tensor({4, 1}, 41);
  ad::Tape tape;
  ad::Var wv = tape.parameter_ref(w);
  ad::Var loss = ad::sum(ad::matmul(wv, tape.constant_ref(x)));
  tape.backward(loss);
  const Tensor& g = *tape.grad(wv);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) CHECK(g.at(i, j) == x[j]);
  std::vector<Tensor> params{w};
  const double err = testutil::gradcheck(
      params,
      [&] {
        ad::Tape t;
        return ad::sum(ad::matmul(t.constant_ref(params[0]), t.constant_ref(x))).value()[0];
      },
      {g});
  CHECK(err <= 1e-6);
}

TEST_CASE("loss independent of a leaf gives zero gradient") {
  ad::Tape tape;
  ad::Var a = tape.parameter(random_tensor({2, 2}, 50));
  ad::Var b = tape.parameter(random_tensor({2, 2}, 51));
  ad::Var loss = ad::sum(ad::gelu(a));
  tape.backward(loss);
  CHECK(tape.grad(b) == nullptr);
  CHECK(tape.grad(a) != nullptr);
}

TEST_CASE("frozen leaves pass gradients through without materializing their own") {
  ad::Tape tape;
  ad::Var frozen = tape.parameter(random_tensor({3, 3}, 60), false);
  ad::Var train = tape.parameter(random_tensor({3, 3}, 61));
  ad::Var h = ad::matmul(train, frozen);
  ad::Var loss = ad::sum(ad::gelu(ad::matmul(h, frozen)));
  tape.backward(loss);
  CHECK(tape.grad(frozen) == nullptr);
  CHECK(tape.grad(train) != nullptr);
}

TEST_CASE("backward visits ops in exact reverse order") {
  ad::Tape tape;
  ad::Var x = tape.parameter(random_tensor({2, 3}, 70));
  ad::Var a = ad::gelu(x);                 // id 1
  ad::Var b = ad::scale(a, 2.0);           // id 2
  ad::Var c = ad::add(a, b);               // id 3
  ad::Var d = ad::softmax_rows(c);         // id 4
  ad::Var loss = ad::sum(d);               // id 5
  tape.backward(loss);
  const std::vector<std::uint32_t> expect{loss.id(), d.id(), c.id(), b.id(), a.id()};
  CHECK(tape.last_backward_order() == expect);
}

TEST_CASE("backward rejects a loss from another tape") {
  ad::Tape t1, t2;
  ad::Var x = t1.parameter(Tensor::scalar(2.0));
  ad::Var loss = ad::sum(x);
  CHECK_THROWS_AS(t2.backward(loss), InvariantError);
  CHECK_THROWS_AS(ad::add(x, t2.parameter(Tensor::scalar(1.0))), InvariantError);
}

TEST_CASE("non-finite values are surfaced") {
  ad::Tape tape;
  Tensor big = Tensor::scalar(1e308);
  ad::Var x = tape.constant(big);
  CHECK_THROWS_AS(ad::scale(x, 10.0), NumericError);
}

TEST_CASE("adam converges on a quadratic and is deterministic") {
  auto run = [] {
    Tensor p = Tensor::vector(3, 5.0);
    Adam opt({&p}, AdamConfig{.lr = 0.1});
    for (int i = 0; i < 500; ++i) {
      Tensor g = p;
      for (auto& v : g.data()) v *= 2.0;  // d/dp of |p|^2
      opt.step({g});
    }
    return p;
  };
  const Tensor a = run(), b = run();
  CHECK(bitwise_equal(a, b));
  for (double v : a.data()) CHECK(std::fabs(v) < 0.05);
}
