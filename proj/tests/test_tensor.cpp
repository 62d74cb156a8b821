#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "comad/grad_check.hpp"
#include "comad/ops.hpp"
#include "comad/rng.hpp"
#include "comad/tape.hpp"
#include "comad/tensor.hpp"

using namespace comad;
using Td = Tensor<double>;
using Tf = Tensor<float>;

TEST_CASE("tensor construction and access") {
  Td z = Td::zeros({2, 3});
  CHECK(z.numel() == 6);
  CHECK(z.rank() == 2);
  for (std::int64_t i = 0; i < 6; ++i) CHECK(z.data()[i] == 0.0);

  Td f = Td::from_data({2, 2}, {1.0, 2.0, 3.0, 4.0});
  CHECK(f.at({0, 0}) == 1.0);
  CHECK(f.at({1, 1}) == 4.0);
  f.at({1, 0}) = 9.0;
  CHECK(f.data()[2] == 9.0);

  Td s = Td::scalar(5.5);
  CHECK(s.item() == 5.5);
  CHECK_THROWS_AS((void)f.item(), ContractError);

  Td alias = f;
  CHECK(alias.same_storage(f));
  Td copy = f.clone_data();
  CHECK(!copy.same_storage(f));
  copy.at({0, 0}) = -1.0;
  CHECK(f.at({0, 0}) == 1.0);
}

TEST_CASE("rng determinism and distributions") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  Rng r(7);
  double mean = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) mean += r.uniform();
  mean /= n;
  CHECK(std::abs(mean - 0.5) < 0.02);

  Rng g(9);
  for (int i = 0; i < 1000; ++i) CHECK(std::abs(g.trunc_normal(1.0)) <= 2.0);

  Rng c(13);
  (void)c.next_u64();
  (void)c.gaussian();
  const std::string state = c.serialize();
  Rng d(0);
  d.deserialize(state);
  for (int i = 0; i < 20; ++i) {
    CHECK(c.next_u64() == d.next_u64());
    CHECK(c.gaussian() == d.gaussian());
  }

  CHECK(mix_seed(1, 2) != mix_seed(1, 3));
  CHECK(mix_seed(1, 2, 3) != mix_seed(1, 2, 4));
  CHECK(mix_seed(1, 2) == mix_seed(1, 2));
}

TEST_CASE("elementwise ops with broadcasting") {
  Td a = Td::from_data({2, 2}, {1.0, 2.0, 3.0, 4.0});
  Td b = Td::from_data({2}, {10.0, 20.0});
  Td s = add(a, b);
  CHECK(s.at({0, 0}) == 11.0);
  CHECK(s.at({0, 1}) == 22.0);
  CHECK(s.at({1, 0}) == 13.0);
  CHECK(s.at({1, 1}) == 24.0);

  Td d = sub(a, a);
  for (std::int64_t i = 0; i < 4; ++i) CHECK(d.data()[i] == 0.0);

  Td m = mul(a, Td::scalar(2.0));
  CHECK(m.at({1, 1}) == 8.0);

  Td sc = scale(a, -1.0);
  CHECK(sc.at({0, 1}) == -2.0);

  CHECK_THROWS_AS(add(Td::ones({2, 3}), Td::ones({2, 4})), DimensionError);
}

TEST_CASE("gelu frozen values") {
  Td x = Td::from_data({2}, {1.0, -0.5});
  Td y = gelu(x);
  CHECK(y.at({0}) == doctest::Approx(0.8413447460685429).epsilon(1e-12));
  CHECK(y.at({1}) == doctest::Approx(-0.15426876936299344).epsilon(1e-12));
  Td zero = gelu(Td::zeros({3}));
  for (std::int64_t i = 0; i < 3; ++i) CHECK(zero.data()[i] == 0.0);
}

TEST_CASE("matmul oracle and batching") {
  Td a = Td::from_data({2, 2}, {1.0, 2.0, 3.0, 4.0});
  Td b = Td::from_data({2, 1}, {5.0, 6.0});
  Td c = matmul(a, b);
  CHECK(c.shape() == Shape{2, 1});
  CHECK(c.at({0, 0}) == 17.0);
  CHECK(c.at({1, 0}) == 39.0);

  Rng rng(3);
  Td batch = Td::randn({3, 2, 4}, rng);
  Td w = Td::randn({4, 5}, rng);
  Td out = matmul(batch, w);
  CHECK(out.shape() == Shape{3, 2, 5});
  for (std::int64_t i = 0; i < 3; ++i) {
    Td one({2, 4});
    std::copy(batch.data() + i * 8, batch.data() + (i + 1) * 8, one.data());
    Td ref = matmul(one, w);
    for (std::int64_t j = 0; j < 10; ++j)
      CHECK(out.data()[i * 10 + j] == doctest::Approx(ref.data()[j]).epsilon(1e-14));
  }

  Td nt = matmul_nt(Td::from_data({1, 2, 3}, {1, 2, 3, 4, 5, 6}),
                    Td::from_data({1, 2, 3}, {1, 0, 0, 0, 1, 0}));
  CHECK(nt.at({0, 0, 0}) == 1.0);
  CHECK(nt.at({0, 0, 1}) == 2.0);
  CHECK(nt.at({0, 1, 0}) == 4.0);
  CHECK(nt.at({0, 1, 1}) == 5.0);
}

TEST_CASE("softmax frozen values and properties") {
  Td x = Td::from_data({2}, {1.0, 0.0});
  Td y = softmax(x, 0.1);
  CHECK(y.at({0}) == doctest::Approx(0.9999546021312976).epsilon(1e-13));
  CHECK(y.at({1}) == doctest::Approx(4.5397868702434395e-05).epsilon(1e-10));

  Rng rng(5);
  Td r = Td::randn({6, 9}, rng, 4.0);
  Td p = softmax(r, 1.0);
  for (std::int64_t i = 0; i < 6; ++i) {
    double sum = 0;
    for (std::int64_t j = 0; j < 9; ++j) {
      CHECK(p.at({i, j}) > 0.0);
      sum += p.at({i, j});
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }

  Td shifted = r.clone_data();
  for (auto& v : shifted.vec()) v += 3.14;
  Td p2 = softmax(shifted, 1.0);
  for (std::int64_t i = 0; i < p.numel(); ++i)
    CHECK(p.data()[i] == doctest::Approx(p2.data()[i]).epsilon(1e-12));

  CHECK_THROWS_AS(softmax(x, 0.0), ConfigError);
  CHECK_THROWS_AS(softmax(x, -1.0), ConfigError);

  Td lsm = log_softmax(r);
  for (std::int64_t i = 0; i < lsm.numel(); ++i)
    CHECK(lsm.data()[i] == doctest::Approx(std::log(p.data()[i])).epsilon(1e-10));
}

TEST_CASE("kl divergence frozen value and contracts") {
  Td p = Td::from_data({2}, {0.75, 0.25});
  Td q = Td::from_data({2}, {0.5, 0.5});
  CHECK(kl_divergence(p, q).item() ==
        doctest::Approx(0.13081203594113697).epsilon(1e-13));
  CHECK(kl_divergence(p, p.clone_data()).item() == 0.0);

  CHECK_THROWS_AS(
      kl_divergence(Td::from_data({2}, {-0.1, 1.1}), q), ContractError);
  CHECK_THROWS_AS(
      kl_divergence(Td::from_data({2}, {0.6, 0.6}), q), ContractError);

  Td lp = Td::from_data({1, 2}, {0.0, 1.0});
  Td lq = Td::from_data({1, 2}, {1.0, 0.0});
  CHECK(kl_from_logits(lp, lq).at({0}) ==
        doctest::Approx(0.46211715726000974).epsilon(1e-12));
  CHECK(kl_from_logits(lp, lp.clone_data()).at({0}) == 0.0);
}

TEST_CASE("layer_norm frozen values") {
  Td x = Td::from_data({1, 4}, {1.0, 2.0, 3.0, 4.0});
  Td y = layer_norm(x, Td::ones({4}), Td::zeros({4}), 1e-6);
  const double e[4] = {-1.3416402498438813, -0.44721341661462705,
                       0.44721341661462705, 1.3416402498438813};
  for (std::int64_t j = 0; j < 4; ++j)
    CHECK(y.at({0, j}) == doctest::Approx(e[j]).epsilon(1e-12));

  Td g = Td::full({4}, 2.0), b = Td::full({4}, -1.0);
  Td y2 = layer_norm(x, g, b, 1e-6);
  for (std::int64_t j = 0; j < 4; ++j)
    CHECK(y2.at({0, j}) == doctest::Approx(2.0 * e[j] - 1.0).epsilon(1e-12));
}

TEST_CASE("shape ops") {
  Td x = Td::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  Td r = reshape(x, {3, 2});
  CHECK(r.at({2, 1}) == 6.0);
  CHECK_THROWS_AS(reshape(x, {4, 2}), DimensionError);

  Td p = permute(x, {1, 0});
  CHECK(p.shape() == Shape{3, 2});
  CHECK(p.at({0, 1}) == 4.0);
  CHECK(p.at({2, 0}) == 3.0);

  Td tok = Td::from_data({1, 2, 2}, {1, 2, 3, 4});
  Td cls = Td::from_data({2}, {9, 8});
  Td seq = prepend_token(tok, cls);
  CHECK(seq.shape() == Shape{1, 3, 2});
  CHECK(seq.at({0, 0, 0}) == 9.0);
  CHECK(seq.at({0, 1, 0}) == 1.0);
  Td body = drop_first_token(seq);
  CHECK(body.shape() == Shape{1, 2, 2});
  CHECK(body.at({0, 0, 1}) == 2.0);

  Td stacked = stack_last(std::vector<Td>{Td::from_data({2}, {1, 2}),
                                          Td::from_data({2}, {3, 4})});
  CHECK(stacked.shape() == Shape{2, 2});
  CHECK(stacked.at({0, 1}) == 3.0);
  Td col = index_last(stacked, 1);
  CHECK(col.shape() == Shape{2});
  CHECK(col.at({0}) == 3.0);
  CHECK(col.at({1}) == 4.0);
}

TEST_CASE("cosine similarity values") {
  Td a = Td::from_data({1, 3}, {1, 2, 3});
  Td b = Td::from_data({1, 3}, {4, 5, 6});
  CHECK(cosine_similarity(a, b).at({0}) ==
        doctest::Approx(0.9746318461970762).epsilon(1e-12));
  CHECK(cosine_similarity(a, a.clone_data()).at({0}) ==
        doctest::Approx(1.0).epsilon(1e-13));
  CHECK(cosine_similarity(a, scale(a, -2.0)).at({0}) ==
        doctest::Approx(-1.0).epsilon(1e-13));
  Td z = Td::zeros({1, 3});
  CHECK(std::abs(cosine_similarity(a, z).at({0})) < 1e-6);
}

TEST_CASE("tape mechanics") {
  Td x = Td::from_data({2}, {3.0, 4.0});
  x.set_requires_grad(true);

  {
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    Td y = mul(x, x);
    Td loss = sum_all(y);
    CHECK(tape.size() > 0);
    tape.backward(loss);
  }
  CHECK(x.grad()[0] == doctest::Approx(6.0));
  CHECK(x.grad()[1] == doctest::Approx(8.0));

  x.zero_grad();
  {
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    Td y = mul(x, x);
    CHECK_THROWS_AS(tape.backward(y), ContractError);
  }

  {
    Tape<double> tape;
    Td y = mul(x, x);  // no active scope: nothing recorded
    CHECK(tape.empty());
    Td loss = sum_all(y);
    CHECK_THROWS_AS(tape.backward(loss), ContractError);
  }

  Td frozen = Td::from_data({2}, {1.0, 1.0});
  {
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    Td y = mul(frozen, frozen);
    CHECK(tape.empty());  // no input requires grad
  }
}

TEST_CASE("gradient accumulation across reuse") {
  Td x = Td::from_data({1}, {2.0});
  x.set_requires_grad(true);
  Tape<double> tape;
  Tape<double>::Scope scope(tape);
  Td y = add(mul(x, x), x);  // x^2 + x -> dx = 2x + 1 = 5
  tape.backward(y);
  CHECK(x.grad()[0] == doctest::Approx(5.0).epsilon(1e-12));
}

TEST_CASE("finite differences across every op") {
  Rng rng(11);
  Td a = Td::randn({3, 4}, rng);
  Td b = Td::randn({3, 4}, rng);
  Td g = Td::randn({4}, rng, 0.5);
  Td be = Td::randn({4}, rng, 0.5);
  Td w = Td::randn({4, 3}, rng, 0.5);
  for (auto* t : {&a, &b, &g, &be, &w}) t->set_requires_grad(true);

  SUBCASE("add mul sub scale gelu") {
    auto fn = [&] {
      return sum_all(mul(gelu(add(a, b)), sub(scale(a, 0.5), b)));
    };
    auto rep = grad_check<double>(fn, {{"a", a}, {"b", b}});
    CHECK(rep.ok(1e-5));
  }
  SUBCASE("matmul linear") {
    Td b3 = Td::randn({3}, rng, 0.5);
    b3.set_requires_grad(true);
    auto fn = [&] { return sum_all(mul(linear(a, w, b3), linear(a, w, b3))); };
    auto rep = grad_check<double>(fn, {{"a", a}, {"w", w}, {"b3", b3}});
    CHECK(rep.ok(1e-5));
  }
  SUBCASE("layer_norm") {
    auto fn = [&] {
      Td y = layer_norm(a, g, be, 1e-6);
      return sum_all(mul(y, y));
    };
    auto rep = grad_check<double>(fn, {{"a", a}, {"g", g}, {"be", be}});
    CHECK(rep.ok(1e-4));
  }
  SUBCASE("softmax kl") {
    auto fn = [&] { return sum_all(kl_from_logits(a, b)); };
    auto rep = grad_check<double>(fn, {{"a", a}, {"b", b}});
    CHECK(rep.ok(1e-4));
  }
  SUBCASE("cosine") {
    auto fn = [&] { return sum_all(cosine_similarity(a, b)); };
    auto rep = grad_check<double>(fn, {{"a", a}, {"b", b}});
    CHECK(rep.ok(1e-4));
  }
  SUBCASE("softmax with temperature") {
    auto fn = [&] {
      Td p = softmax(a, 0.25);
      return sum_all(mul(p, b));
    };
    auto rep = grad_check<double>(fn, {{"a", a}, {"b", b}});
    CHECK(rep.ok(1e-4));
  }
  SUBCASE("permute reshape stack") {
    auto fn = [&] {
      Td p = permute(a, {1, 0});
      Td r = reshape(p, {3, 4});
      Td st = stack_last(std::vector<Td>{r, b});
      return sum_all(mul(st, st));
    };
    auto rep = grad_check<double>(fn, {{"a", a}, {"b", b}});
    CHECK(rep.ok(1e-5));
  }
}

TEST_CASE("detach blocks gradient flow") {
  Td x = Td::from_data({2}, {1.0, 2.0});
  x.set_requires_grad(true);
  Tape<double> tape;
  Tape<double>::Scope scope(tape);
  Td d = detach(mul(x, x));
  CHECK(!d.requires_grad());
  Td loss = sum_all(add(mul(x, Td::scalar(3.0)), d));
  tape.backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(3.0));  // only the attached path
  CHECK(x.grad()[1] == doctest::Approx(3.0));
}

TEST_CASE("numeric guards") {
  Td bad = Td::from_data({2}, {1.0, std::numeric_limits<double>::quiet_NaN()});
  CHECK_THROWS_AS(check_finite(bad, "test"), NumericError);
  Td inf = Td::from_data({1}, {std::numeric_limits<double>::infinity()});
  CHECK_THROWS_AS(check_finite(inf, "test"), NumericError);
  Td fine = Td::from_data({2}, {0.0, -3.5});
  CHECK_NOTHROW(check_finite(fine, "test"));
}

TEST_CASE("float and double instantiations coexist") {
  Rng rng(2);
  Tf a = Tf::randn({2, 3}, rng);
  Tf b = Tf::randn({3, 4}, rng);
  Tf c = matmul(a, b);
  CHECK(c.shape() == Shape{2, 4});
  a.set_requires_grad(true);
  Tape<float> tape;
  Tape<float>::Scope scope(tape);
  Tf out = sum_all(matmul(a, b));
  tape.backward(out);
  bool any = false;
  for (float gv : a.grad()) any = any || gv != 0.0f;
  CHECK(any);
}
