#include <catch2/catch_amalgamated.hpp>

#include <functional>
#include <vector>

#include "mmkn/rng.hpp"
#include "mmkn/tape.hpp"

using mmkn::Pcg32;
using mmkn::Tape;
using mmkn::Tensor;

namespace {

using BuildFn = std::function<int(Tape&, const std::vector<int>&)>;

double eval_scalar(const std::vector<Tensor>& leaves, const BuildFn& build) {
  Tape tape;
  std::vector<int> ids;
  ids.reserve(leaves.size());
  for (const Tensor& t : leaves) ids.push_back(tape.leaf(t));
  int out = build(tape, ids);
  return tape.value(out).data[0];
}

// Central finite differences against tape gradients for every entry of
// every leaf. The floor keeps near-zero gradients from blowing up the
// relative error on finite-difference noise.
void check_gradients(const std::vector<Tensor>& leaves, const BuildFn& build, double tol,
                     double floor_scale = 1e-4, double eps = 1e-5) {
  Tape tape;
  std::vector<int> ids;
  for (const Tensor& t : leaves) ids.push_back(tape.leaf(t));
  int out = build(tape, ids);
  tape.backward(out);

  for (std::size_t li = 0; li < leaves.size(); ++li) {
    const Tensor& analytic = tape.grad(ids[li]);
    for (std::size_t e = 0; e < leaves[li].data.size(); ++e) {
      std::vector<Tensor> plus = leaves;
      plus[li].data[e] += eps;
      std::vector<Tensor> minus = leaves;
      minus[li].data[e] -= eps;
      double fd = (eval_scalar(plus, build) - eval_scalar(minus, build)) / (2.0 * eps);
      double got = analytic.data[e];
      double rel = std::abs(fd - got) / std::max({std::abs(fd), std::abs(got), floor_scale});
      INFO("leaf " << li << " entry " << e << " fd=" << fd << " tape=" << got);
      REQUIRE(rel < tol);
    }
  }
}

}  // namespace

TEST_CASE("product rule: f = x*y at (2,3)") {
  Tape tape;
  int x = tape.leaf(Tensor::from({1, 1}, {2.0}));
  int y = tape.leaf(Tensor::from({1, 1}, {3.0}));
  int f = tape.hadamard(x, y);
  tape.backward(f);
  REQUIRE(tape.grad(x).data[0] == 3.0);
  REQUIRE(tape.grad(y).data[0] == 2.0);
}

TEST_CASE("unused leaf receives a zero gradient") {
  Tape tape;
  int x = tape.leaf(Tensor::from({1, 1}, {2.0}));
  int unused = tape.leaf(Tensor::from({2, 2}, {1, 2, 3, 4}));
  int f = tape.scale(x, 5.0);
  tape.backward(f);
  REQUIRE(tape.grad(x).data[0] == 5.0);
  for (double v : tape.grad(unused).data) REQUIRE(v == 0.0);
}

TEST_CASE("backward rejects non-scalar outputs") {
  Tape tape;
  int x = tape.leaf(Tensor::from({2, 2}, {1, 2, 3, 4}));
  int y = tape.scale(x, 2.0);
  REQUIRE_THROWS_AS(tape.backward(y), mmkn::ContractError);
}

TEST_CASE("two-layer MLP gradient matches central finite differences") {
  Pcg32 rng(17);
  std::vector<Tensor> leaves = {
      Tensor::uniform({3, 4}, rng, -1.0, 1.0),  // input
      Tensor::uniform({4, 5}, rng, -1.0, 1.0),  // w1
      Tensor::uniform({5}, rng, -1.0, 1.0),     // b1
      Tensor::uniform({5, 2}, rng, -1.0, 1.0),  // w2
  };
  BuildFn build = [](Tape& t, const std::vector<int>& ids) {
    int h = t.gelu(t.add_rowvec(t.matmul(ids[0], ids[1]), ids[2]));
    int o = t.matmul(h, ids[3]);
    int s = t.softmax_rows(o);
    return t.pick(s, 1, 0);
  };
  check_gradients(leaves, build, 1e-6);
}

TEST_CASE("layernorm gradient matches finite differences") {
  Pcg32 rng(23);
  std::vector<Tensor> leaves = {
      Tensor::uniform({3, 6}, rng, -1.0, 1.0),
      Tensor::uniform({6}, rng, 0.5, 1.5),
      Tensor::uniform({6}, rng, -0.5, 0.5),
  };
  BuildFn build = [](Tape& t, const std::vector<int>& ids) {
    int y = t.layernorm_rows(ids[0], ids[1], ids[2]);
    int s = t.matmul(y, t.leaf(Tensor::full({6, 1}, 0.37), false));
    int sm = t.softmax_rows(t.leaf(Tensor::zeros({1, 1}), false));
    (void)sm;
    return t.pick(s, 0, 0);
  };
  check_gradients(leaves, build, 1e-5);
}

TEST_CASE("causal attention gradient matches finite differences") {
  Pcg32 rng(31);
  std::vector<Tensor> leaves = {
      Tensor::uniform({4, 6}, rng, -1.0, 1.0),
      Tensor::uniform({4, 6}, rng, -1.0, 1.0),
      Tensor::uniform({4, 6}, rng, -1.0, 1.0),
  };
  BuildFn build = [](Tape& t, const std::vector<int>& ids) {
    int ctx = t.causal_attention(ids[0], ids[1], ids[2], 2);
    int s = t.matmul(ctx, t.leaf(Tensor::full({6, 1}, 0.5), false));
    return t.pick(s, 3, 0);
  };
  check_gradients(leaves, build, 1e-5);
}

TEST_CASE("gather and cross-entropy gradients match finite differences") {
  Pcg32 rng(41);
  std::vector<Tensor> leaves = {
      Tensor::uniform({5, 3}, rng, -1.0, 1.0),  // table
      Tensor::uniform({3, 4}, rng, -1.0, 1.0),  // projection to logits
  };
  BuildFn build = [](Tape& t, const std::vector<int>& ids) {
    int rows = t.gather_rows(ids[0], {0, 2, 4, 2});
    int logits = t.matmul(rows, ids[1]);
    return t.cross_entropy_mean(logits, {0, 1, 3}, {1, 0, 2});
  };
  check_gradients(leaves, build, 1e-6);
}

TEST_CASE("fan-out accumulates gradients") {
  Tape tape;
  int x = tape.leaf(Tensor::from({1, 1}, {1.5}));
  int a = tape.scale(x, 2.0);
  int b = tape.scale(x, 3.0);
  int f = tape.add(a, b);  // f = 5x
  tape.backward(f);
  REQUIRE(tape.grad(x).data[0] == 5.0);
}

TEST_CASE("add_const passes gradient through unchanged") {
  Tape tape;
  int x = tape.leaf(Tensor::from({2, 2}, {1, 2, 3, 4}));
  int y = tape.add_const(x, Tensor::from({2, 2}, {10, 20, 30, 40}));
  int p = tape.pick(y, 1, 1);
  tape.backward(p);
  REQUIRE(tape.value(y).at(1, 1) == 44.0);
  REQUIRE(tape.grad(x).at(1, 1) == 1.0);
  REQUIRE(tape.grad(x).at(0, 0) == 0.0);
}

TEST_CASE("tape evaluation is bit-deterministic") {
  Pcg32 rng(53);
  Tensor a = Tensor::uniform({6, 6}, rng, -1.0, 1.0);
  auto run = [&]() {
    Tape t;
    int x = t.leaf(a);
    int y = t.causal_attention(x, x, x, 3);
    int s = t.softmax_rows(y);
    int p = t.pick(s, 5, 2);
    t.backward(p);
    return std::make_pair(t.value(p).data[0], t.grad(x).data);
  };
  auto r1 = run();
  auto r2 = run();
  REQUIRE(r1.first == r2.first);
  REQUIRE(r1.second == r2.second);
}

TEST_CASE("leaf rejects non-finite values") {
  Tensor bad = Tensor::from({2}, {1.0, std::numeric_limits<double>::quiet_NaN()});
  Tape tape;
  REQUIRE_THROWS_AS(tape.leaf(bad), mmkn::ContractError);
}
