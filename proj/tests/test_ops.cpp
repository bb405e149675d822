#include <cmath>
#include <string>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"
#include "tnkit/autodiff.hpp"
#include "tnkit/network.hpp"
#include "tnkit/ops.hpp"

using tnkit::Rng;
using tnkit::Shape;
using tnkit::Tensor;
namespace g = tnkit::graph;
namespace ops = tnkit::ops;
namespace ad = tnkit::autodiff;

namespace {

g::Node make_param(g::TensorNetwork& net, const std::string& name, const Shape& shape,
                   const std::vector<std::string>& axes, Rng& rng) {
  return net.make_node(name, shape, axes, g::NodeRole::Param, g::Init::randn(rng));
}

g::Node make_leaf(g::TensorNetwork& net, const std::string& name, const Shape& shape,
                  const std::vector<std::string>& axes, Rng& rng) {
  return net.make_node(name, shape, axes, g::NodeRole::Leaf, g::Init::randn(rng));
}

double tensor_sum(const Tensor& t) {
  double s = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) s += t[i];
  return s;
}

}  // namespace

TEST_CASE("contract_between: two connected edges, survivor order a then b") {
  g::TensorNetwork net;
  Rng rng(11);
  g::Node a = make_param(net, "a", {2, 4, 3, 6, 2}, {"a0", "a1", "a2", "a3", "a4"}, rng);
  g::Node b = make_param(net, "b", {3, 2, 5, 4}, {"b0", "b1", "b2", "b3"}, rng);
  net.connect(a, "a2", b, "b0");
  net.connect(a, "a4", b, "b1");

  g::Node c = ops::contract_between(a, b);
  CHECK(c.shape() == Shape{2, 4, 6, 5, 4});
  CHECK(c.role() == g::NodeRole::Resultant);

  Tensor expected = oracles::naive_tensordot(a.tensor(), b.tensor(), {2, 4}, {0, 1});
  CHECK(tnkit::max_abs_diff(c.tensor(), expected) < 1e-12);

  // Axis names and edges are inherited from the survivors.
  CHECK(c.axes()[0].name == "a0");
  CHECK(c.axes()[2].name == "a3");
  CHECK(c.axes()[3].name == "b2");
  CHECK(c.edge(0) == a.edge(0));
  CHECK(c.edge(3) == b.edge(2));
}

TEST_CASE("contract_between: contraction with the identity leaves values unchanged") {
  g::TensorNetwork net;
  Rng rng(12);
  g::Node t = make_param(net, "t", {3, 4}, {"row", "col"}, rng);
  g::Node id = net.make_node("id", {4, 4}, {"in", "out"}, g::NodeRole::Leaf,
                             g::Init::copy(Tensor::eye(4)));
  net.connect(t, "col", id, "in");

  g::Node c = ops::contract_between(t, id);
  CHECK(c.shape() == Shape{3, 4});
  CHECK(tnkit::max_abs_diff(c.tensor(), t.tensor()) < 1e-12);
  CHECK(c.axes()[1].name == "out");
}

TEST_CASE("contract_between: shared batch axis name is matched slice-wise") {
  g::TensorNetwork net;
  Rng rng(13);
  g::Node a = make_leaf(net, "a", {7, 3}, {"batch", "feat"}, rng);
  g::Node b = make_leaf(net, "b", {7, 3}, {"batch", "feat"}, rng);
  net.connect(a, "feat", b, "feat");

  g::Node c = ops::contract_between(a, b);
  CHECK(c.shape() == Shape{7});
  const Tensor& ta = a.tensor();
  const Tensor& tb = b.tensor();
  for (std::size_t i = 0; i < 7; ++i) {
    double dot = 0.0;
    for (std::size_t k = 0; k < 3; ++k) dot += ta[i * 3 + k] * tb[i * 3 + k];
    CHECK(std::abs(c.tensor()[i] - dot) < 1e-12);
  }
}

TEST_CASE("contract_between: distinct batch names survive independently") {
  g::TensorNetwork net;
  Rng rng(14);
  g::Node a = make_leaf(net, "a", {5, 3}, {"batch_rows", "k"}, rng);
  g::Node b = make_leaf(net, "b", {3, 4}, {"k", "batch_cols"}, rng);
  net.connect(a, "k", b, "k");

  g::Node c = ops::contract_between(a, b);
  CHECK(c.shape() == Shape{5, 4});
  Tensor expected = oracles::naive_matmul(a.tensor(), b.tensor());
  CHECK(tnkit::max_abs_diff(c.tensor(), expected) < 1e-12);
  CHECK(c.axes()[0].name == "batch_rows");
  CHECK(c.axes()[1].name == "batch_cols");
}

TEST_CASE("contract_between: random batched cases match a per-slice loop oracle") {
  Rng rng(15);
  for (int rep = 0; rep < 10; ++rep) {
    std::size_t B = 1 + rng.uniform_index(4);
    std::size_t m = 1 + rng.uniform_index(3);
    std::size_t k = 1 + rng.uniform_index(3);
    std::size_t n = 1 + rng.uniform_index(3);
    g::TensorNetwork net;
    g::Node a = make_leaf(net, "a", {B, m, k}, {"batch", "m", "k"}, rng);
    g::Node b = make_leaf(net, "b", {k, B, n}, {"k", "batch", "n"}, rng);
    net.connect(a, "k", b, "k");
    g::Node c = ops::contract_between(a, b);
    REQUIRE(c.shape() == Shape{B, m, n});
    const Tensor& ta = a.tensor();
    const Tensor& tb = b.tensor();
    for (std::size_t bb = 0; bb < B; ++bb) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          double acc = 0.0;
          for (std::size_t kk = 0; kk < k; ++kk) {
            acc += ta[(bb * m + i) * k + kk] * tb[(kk * B + bb) * n + j];
          }
          CHECK(std::abs(c.tensor()[(bb * m + i) * n + j] - acc) < 1e-12);
        }
      }
    }
  }
}

TEST_CASE("contract_between: resultants inherit live connections to neighbors") {
  g::TensorNetwork net;
  Rng rng(16);
  g::Node a = make_param(net, "a", {2, 3}, {"l", "r"}, rng);
  g::Node b = make_param(net, "b", {3, 4}, {"l", "r"}, rng);
  g::Node c = make_param(net, "c", {4, 5}, {"l", "r"}, rng);
  net.connect(a, "r", b, "l");
  net.connect(b, "r", c, "l");

  g::Node ab = ops::contract_between(a, b);
  g::Node abc = ops::contract_between(ab, c);
  CHECK(abc.shape() == Shape{2, 5});
  Tensor expected = oracles::naive_matmul(oracles::naive_matmul(a.tensor(), b.tensor()), c.tensor());
  CHECK(tnkit::max_abs_diff(abc.tensor(), expected) < 1e-12);
}

TEST_CASE("contract_between: second call reuses the resultant node and successor") {
  g::TensorNetwork net;
  Rng rng(17);
  g::Node a = make_param(net, "a", {2, 3}, {"l", "r"}, rng);
  g::Node b = make_param(net, "b", {3}, {"r"}, rng);
  net.connect(a, "r", b, "r");

  g::Node c1 = ops::contract_between(a, b);
  std::size_t n_nodes = net.node_count();
  std::size_t n_succ = net.successor_count();
  Tensor first = c1.tensor();

  g::Node c2 = ops::contract_between(a, b);
  CHECK(c1 == c2);
  CHECK(net.node_count() == n_nodes);
  CHECK(net.successor_count() == n_succ);

  // New input values flow through on re-execution.
  Tensor replacement = Tensor::gaussian({2, 3}, rng);
  net.set_tensor(a, replacement);
  g::Node c3 = ops::contract_between(a, b);
  CHECK(c3 == c1);
  Tensor expected = oracles::naive_tensordot(replacement, b.tensor(), {1}, {0});
  CHECK(tnkit::max_abs_diff(c3.tensor(), expected) < 1e-12);
  CHECK(tnkit::max_abs_diff(first, expected) > 1e-6);  // values actually changed
}

TEST_CASE("contract_between: error cases") {
  g::TensorNetwork net;
  Rng rng(18);
  g::Node a = make_param(net, "a", {2}, {"x"}, rng);
  g::Node b = make_param(net, "b", {2}, {"y"}, rng);
  CHECK_THROWS_WITH_AS(ops::contract_between(a, b),
                       doctest::Contains("no edge connects"), std::invalid_argument);
  CHECK_THROWS_AS(ops::contract_between(a, a), std::invalid_argument);

  g::TensorNetwork other;
  g::Node c = other.make_node("c", {2}, {"x"}, g::NodeRole::Param, g::Init::ones());
  CHECK_THROWS_WITH_AS(ops::contract_between(a, c), doctest::Contains("different networks"),
                       std::invalid_argument);
}

// ---- split -------------------------------------------------------------------

TEST_CASE("split: axis partition shapes, bond edge, and neighbor re-attachment") {
  g::TensorNetwork net;
  Rng rng(21);
  g::Node n =
      make_leaf(net, "n", {2, 7, 3, 4}, {"left_0", "left_1", "right_0", "right_1"}, rng);
  auto [left, right] =
      ops::split(n, {"left_0", "right_0"}, {"left_1", "right_1"}, ops::SplitMode::Svd, 5);
  CHECK(left.shape() == Shape{2, 3, 5});
  CHECK(right.shape() == Shape{5, 7, 4});
  CHECK(left.axes()[0].name == "left_0");
  CHECK(left.axes()[1].name == "right_0");
  CHECK(left.axes()[2].name == "bond");
  CHECK(right.axes()[0].name == "bond");
  CHECK(right.axes()[1].name == "left_1");
  CHECK(right.axes()[2].name == "right_1");
  CHECK(left.edge("bond") == right.edge("bond"));
  CHECK(left.edge("bond")->connected);
  CHECK(left.edge("bond")->size == 5);
  // Original axes keep their edge objects.
  CHECK(left.edge(0) == n.edge(0));
  CHECK(right.edge(1) == n.edge(1));
}

TEST_CASE("split: full-rank factors reconstruct the identity") {
  g::TensorNetwork net;
  g::Node n = net.make_node("n", {4, 4}, {"u", "v"}, g::NodeRole::Leaf,
                            g::Init::copy(Tensor::eye(4)));
  auto [left, right] = ops::split(n, {"u"}, {"v"}, ops::SplitMode::Svd, 4);
  g::Node rec = ops::contract_between(left, right);
  CHECK(rec.shape() == Shape{4, 4});
  CHECK(tnkit::max_abs_diff(rec.tensor(), Tensor::eye(4)) < 1e-12);
}

TEST_CASE("split: truncated reconstruction error equals the discarded spectrum norm") {
  g::TensorNetwork net;
  Rng rng(22);
  g::Node n = make_leaf(net, "n", {6, 6}, {"u", "v"}, rng);
  Tensor original = n.tensor();

  tnkit::SvdResult full = tnkit::svd(original);
  double discarded = 0.0;
  for (std::size_t i = 3; i < full.s.size(); ++i) discarded += full.s[i] * full.s[i];
  discarded = std::sqrt(discarded);

  auto [left, right] = ops::split(n, {"u"}, {"v"}, ops::SplitMode::Svd, 3);
  g::Node rec = ops::contract_between(left, right);
  double err = 0.0;
  for (std::size_t i = 0; i < original.size(); ++i) {
    double d = rec.tensor()[i] - original[i];
    err += d * d;
  }
  err = std::sqrt(err);
  CHECK(std::abs(err - discarded) < 1e-10);
}

TEST_CASE("split: svdr pushes the spectrum into the right factor") {
  g::TensorNetwork net;
  Rng rng(23);
  g::Node n = make_leaf(net, "n", {5, 4}, {"u", "v"}, rng);
  Tensor original = n.tensor();
  auto [left, right] = ops::split(n, {"u"}, {"v"}, ops::SplitMode::Svdr);

  // Left factor has orthonormal columns (it is u itself).
  const Tensor& l = left.tensor();
  std::size_t k = left.shape()[1];
  for (std::size_t c1 = 0; c1 < k; ++c1) {
    for (std::size_t c2 = 0; c2 < k; ++c2) {
      double dot = 0.0;
      for (std::size_t r = 0; r < 5; ++r) dot += l[r * k + c1] * l[r * k + c2];
      CHECK(std::abs(dot - (c1 == c2 ? 1.0 : 0.0)) < 1e-10);
    }
  }
  g::Node rec = ops::contract_between(left, right);
  CHECK(tnkit::max_abs_diff(rec.tensor(), original) < 1e-10);
}

TEST_CASE("split: qr reconstructs exactly and refuses truncation") {
  g::TensorNetwork net;
  Rng rng(24);
  g::Node n = make_leaf(net, "n", {4, 6}, {"u", "v"}, rng);
  Tensor original = n.tensor();
  auto [q, r] = ops::split(n, {"u"}, {"v"}, ops::SplitMode::Qr);
  g::Node rec = ops::contract_between(q, r);
  CHECK(tnkit::max_abs_diff(rec.tensor(), original) < 1e-12);

  g::TensorNetwork net2;
  g::Node m = net2.make_node("m", {4, 4}, {"u", "v"}, g::NodeRole::Leaf, g::Init::ones());
  CHECK_THROWS_WITH_AS(ops::split(m, {"u"}, {"v"}, ops::SplitMode::Qr, 2),
                       doctest::Contains("does not truncate"), std::invalid_argument);
}

TEST_CASE("split: batch axes are carried leading on both children") {
  g::TensorNetwork net;
  Rng rng(25);
  g::Node n = make_leaf(net, "n", {5, 2, 3}, {"batch", "u", "v"}, rng);
  Tensor original = n.tensor();
  auto [left, right] = ops::split(n, {"u"}, {"v"}, ops::SplitMode::Svd);
  std::size_t k = left.shape()[2];
  CHECK(left.shape() == Shape{5, 2, k});
  CHECK(right.shape() == Shape{5, k, 3});
  CHECK(left.axes()[0].name == "batch");
  CHECK(right.axes()[0].name == "batch");

  // Per-slice reconstruction.
  const Tensor& l = left.tensor();
  const Tensor& r = right.tensor();
  for (std::size_t b = 0; b < 5; ++b) {
    for (std::size_t i = 0; i < 2; ++i) {
      for (std::size_t j = 0; j < 3; ++j) {
        double acc = 0.0;
        for (std::size_t c = 0; c < k; ++c) {
          acc += l[(b * 2 + i) * k + c] * r[(b * k + c) * 3 + j];
        }
        CHECK(std::abs(acc - original[(b * 2 + i) * 3 + j]) < 1e-10);
      }
    }
  }
}

TEST_CASE("split: neighbors re-attach to the child that carries their axis") {
  g::TensorNetwork net;
  Rng rng(26);
  g::Node n = make_param(net, "n", {2, 3}, {"u", "v"}, rng);
  g::Node w = make_param(net, "w", {3, 4}, {"v", "out"}, rng);
  net.connect(n, "v", w, "v");
  ad::GradMode off(false);
  auto [left, right] = ops::split(n, {"u"}, {"v"}, ops::SplitMode::Svd);
  // right carries axis "v", still connected to w.
  g::Node rw = ops::contract_between(right, w);
  g::Node full = ops::contract_between(left, rw);
  Tensor expected = oracles::naive_matmul(n.tensor(), w.tensor());
  CHECK(full.shape() == Shape{2, 4});
  CHECK(tnkit::max_abs_diff(full.tensor(), expected) < 1e-10);
}

TEST_CASE("split: refuses to run inside an active gradient recording") {
  g::TensorNetwork net;
  Rng rng(27);
  g::Node n = make_param(net, "n", {3, 3}, {"u", "v"}, rng);
  REQUIRE(ad::grad_enabled());
  CHECK_THROWS_WITH_AS(ops::split(n, {"u"}, {"v"}, ops::SplitMode::Svd),
                       doctest::Contains("not differentiable"), std::runtime_error);
  {
    ad::GradMode off(false);
    auto [l, r] = ops::split(n, {"u"}, {"v"}, ops::SplitMode::Svd);
    CHECK(l.has_tensor());
    CHECK(r.has_tensor());
  }
}

TEST_CASE("split: invalid partitions are rejected") {
  g::TensorNetwork net;
  g::Node n = net.make_node("n", {2, 3, 4}, {"a", "b", "c"}, g::NodeRole::Leaf, g::Init::ones());
  CHECK_THROWS_WITH_AS(ops::split(n, {"a"}, {"b"}, ops::SplitMode::Svd),
                       doctest::Contains("neither"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(ops::split(n, {"a", "b"}, {"b", "c"}, ops::SplitMode::Svd),
                       doctest::Contains("twice"), std::invalid_argument);
  CHECK_THROWS_AS(ops::split(n, {}, {"a", "b", "c"}, ops::SplitMode::Svd),
                  std::invalid_argument);
}

// ---- stack / unbind -----------------------------------------------------------

TEST_CASE("stack: n equally shaped nodes gain a leading stack axis") {
  g::TensorNetwork net;
  Rng rng(31);
  std::vector<g::Node> nodes;
  for (int i = 0; i < 3; ++i) {
    nodes.push_back(make_leaf(net, "n" + std::to_string(i), {2, 4, 2}, {"a", "b", "c"}, rng));
  }
  g::Node s = ops::stack(nodes);
  CHECK(s.shape() == Shape{3, 2, 4, 2});
  CHECK(s.axes()[0].name == "stack");
  CHECK(s.axes()[1].name == "a");
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(tnkit::max_abs_diff(s.tensor().slice_leading(i), nodes[i].tensor()) == 0.0);
  }
}

TEST_CASE("stack: singleton stack and round trip through unbind") {
  g::TensorNetwork net;
  Rng rng(32);
  g::Node a = make_leaf(net, "a", {2, 2}, {"u", "v"}, rng);
  g::Node s = ops::stack({a});
  CHECK(s.shape() == Shape{1, 2, 2});
  std::vector<g::Node> back = ops::unbind(s);
  REQUIRE(back.size() == 1);
  CHECK(tnkit::max_abs_diff(back[0].tensor(), a.tensor()) == 0.0);

  g::Node b = make_leaf(net, "b", {2, 2}, {"u", "v"}, rng);
  std::vector<g::Node> pair = ops::unbind(ops::stack({a, b}));
  REQUIRE(pair.size() == 2);
  CHECK(tnkit::max_abs_diff(pair[0].tensor(), a.tensor()) == 0.0);
  CHECK(tnkit::max_abs_diff(pair[1].tensor(), b.tensor()) == 0.0);
}

TEST_CASE("stack: validation") {
  g::TensorNetwork net;
  Rng rng(33);
  g::Node a = make_leaf(net, "a", {2, 3}, {"u", "v"}, rng);
  g::Node b = make_leaf(net, "b", {3, 2}, {"u", "v"}, rng);
  g::Node c = make_leaf(net, "c", {2, 3}, {"x", "v"}, rng);
  CHECK_THROWS_WITH_AS(ops::stack({a, b}), doctest::Contains("shape mismatch"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(ops::stack({a, c}), doctest::Contains("axis-name mismatch"),
                       std::invalid_argument);
  CHECK_THROWS_AS(ops::stack({}), std::invalid_argument);
}

TEST_CASE("unbind: only stack-role nodes can be unbound") {
  g::TensorNetwork net;
  Rng rng(34);
  g::Node a = make_leaf(net, "a", {3, 2}, {"u", "v"}, rng);
  CHECK_THROWS_WITH_AS(ops::unbind(a), doctest::Contains("not a stack node"),
                       std::invalid_argument);
}

TEST_CASE("stack of params re-points their storage into one buffer under auto_stack") {
  g::TensorNetwork net;
  REQUIRE(net.auto_stack);
  Rng rng(35);
  g::Node p0 = make_param(net, "p0", {2, 3}, {"u", "v"}, rng);
  g::Node p1 = make_param(net, "p1", {2, 3}, {"u", "v"}, rng);
  Tensor v0 = p0.tensor();
  Tensor v1 = p1.tensor();

  g::Node s = ops::stack({p0, p1});
  CHECK(s.role() == g::NodeRole::ParamStack);
  const g::StoreSlot* slot0 = net.slot_of(p0);
  REQUIRE(slot0 != nullptr);
  CHECK_FALSE(slot0->owns);
  CHECK(slot0->alias_target == s.impl()->address);
  CHECK(slot0->alias_index == 0);
  // Values are unchanged and reads resolve through the alias.
  CHECK(tnkit::max_abs_diff(p0.tensor(), v0) == 0.0);
  CHECK(tnkit::max_abs_diff(p1.tensor(), v1) == 0.0);

  // The stacked buffer is the trainable unit now.
  auto params = net.trainable_parameters();
  REQUIRE(params.size() == 1);
  CHECK(params[0].first == s.impl()->address);

  // Writing to a re-pointed param gives it its own buffer back; the next
  // stack call rebuilds the shared buffer with the new value.
  Tensor fresh = Tensor::gaussian({2, 3}, rng);
  net.set_tensor(p0, fresh);
  CHECK(net.slot_of(p0)->owns);
  g::Node s2 = ops::stack({p0, p1});
  CHECK(s2 == s);
  CHECK(tnkit::max_abs_diff(s2.tensor().slice_leading(0), fresh) == 0.0);
  CHECK(tnkit::max_abs_diff(s2.tensor().slice_leading(1), v1) == 0.0);
  CHECK_FALSE(net.slot_of(p0)->owns);  // re-pointed again
}

TEST_CASE("stack of leaves reuses the cached buffer until an input changes") {
  g::TensorNetwork net;
  Rng rng(36);
  g::Node a = make_leaf(net, "a", {2}, {"x"}, rng);
  g::Node b = make_leaf(net, "b", {2}, {"x"}, rng);
  g::Node s = ops::stack({a, b});
  const void* buf1 = s.tensor().buffer_key();
  ops::stack({a, b});
  CHECK(s.tensor().buffer_key() == buf1);  // unchanged inputs: same buffer

  Tensor fresh = Tensor::gaussian({2}, rng);
  net.set_tensor(b, fresh);
  ops::stack({a, b});
  CHECK(s.tensor().buffer_key() != buf1);  // version bump forces a rebuild
  CHECK(tnkit::max_abs_diff(s.tensor().slice_leading(1), fresh) == 0.0);
}

TEST_CASE("unbind slices share the stacked buffer only when auto_unbind is on") {
  for (bool mode : {false, true}) {
    g::TensorNetwork net;
    net.auto_unbind = mode;
    Rng rng(37);
    g::Node a = make_leaf(net, "a", {2, 2}, {"u", "v"}, rng);
    g::Node b = make_leaf(net, "b", {2, 2}, {"u", "v"}, rng);
    g::Node s = ops::stack({a, b});
    std::vector<g::Node> parts = ops::unbind(s);
    CHECK(tnkit::max_abs_diff(parts[0].tensor(), a.tensor()) == 0.0);
    CHECK(tnkit::max_abs_diff(parts[1].tensor(), b.tensor()) == 0.0);
    bool shares = parts[0].tensor().buffer_key() == s.tensor().buffer_key();
    CHECK(shares == mode);
  }
}

TEST_CASE("unbind children re-attach to each slice's original neighbors") {
  g::TensorNetwork net;
  Rng rng(38);
  g::Node a0 = make_param(net, "a0", {2, 3}, {"l", "r"}, rng);
  g::Node a1 = make_param(net, "a1", {2, 3}, {"l", "r"}, rng);
  g::Node w0 = make_param(net, "w0", {2}, {"l"}, rng);
  g::Node w1 = make_param(net, "w1", {2}, {"l"}, rng);
  net.connect(a0, "l", w0, "l");
  net.connect(a1, "l", w1, "l");

  g::Node s = ops::stack({a0, a1});
  std::vector<g::Node> parts = ops::unbind(s);
  CHECK(parts[0].edge("l") == a0.edge("l"));
  CHECK(parts[1].edge("l") == a1.edge("l"));

  g::Node r0 = ops::contract_between(parts[0], w0);
  CHECK(r0.shape() == Shape{3});
  Tensor expected = oracles::naive_tensordot(a0.tensor(), w0.tensor(), {0}, {0});
  CHECK(tnkit::max_abs_diff(r0.tensor(), expected) < 1e-12);
}

TEST_CASE("stack-level contraction keeps per-slice provenance through to unbind") {
  g::TensorNetwork net;
  Rng rng(39);
  // Two independent (weights ^ vector) pairs, processed as one stacked matvec.
  g::Node a0 = make_param(net, "a0", {2, 3}, {"l", "r"}, rng);
  g::Node a1 = make_param(net, "a1", {2, 3}, {"l", "r"}, rng);
  g::Node b0 = make_param(net, "b0", {3}, {"r"}, rng);
  g::Node b1 = make_param(net, "b1", {3}, {"r"}, rng);
  g::Node w0 = make_param(net, "w0", {2}, {"l"}, rng);
  g::Node w1 = make_param(net, "w1", {2}, {"l"}, rng);
  net.connect(a0, "l", w0, "l");
  net.connect(a1, "l", w1, "l");

  g::Node sa = ops::stack({a0, a1});
  g::Node sb = ops::stack({b0, b1});
  net.connect(sa, "r", sb, "r");
  g::Node c = ops::contract_between(sa, sb);
  CHECK(c.shape() == Shape{2, 2});
  CHECK(c.role() == g::NodeRole::Stack);

  std::vector<g::Node> parts = ops::unbind(c);
  REQUIRE(parts.size() == 2);
  // Each slice equals a_i . b_i and is still connected to w_i.
  Tensor exp0 = oracles::naive_tensordot(a0.tensor(), b0.tensor(), {1}, {0});
  CHECK(tnkit::max_abs_diff(parts[0].tensor(), exp0) < 1e-12);
  g::Node scalar0 = ops::contract_between(parts[0], w0);
  CHECK(scalar0.shape() == Shape{});
  double exp_s = 0.0;
  for (std::size_t l = 0; l < 2; ++l) exp_s += exp0[l] * w0.tensor()[l];
  CHECK(std::abs(scalar0.tensor()[0] - exp_s) < 1e-12);

  g::Node scalar1 = ops::contract_between(parts[1], w1);
  Tensor exp1 = oracles::naive_tensordot(a1.tensor(), b1.tensor(), {1}, {0});
  double exp_s1 = 0.0;
  for (std::size_t l = 0; l < 2; ++l) exp_s1 += exp1[l] * w1.tensor()[l];
  CHECK(std::abs(scalar1.tensor()[0] - exp_s1) < 1e-12);
}

// ---- permute / tprod / arithmetic ------------------------------------------------

TEST_CASE("permute: identity order keeps values, reordering follows names") {
  g::TensorNetwork net;
  Rng rng(41);
  g::Node n = make_leaf(net, "n", {2, 3, 4}, {"a", "b", "c"}, rng);
  g::Node same = ops::permute(n, {"a", "b", "c"});
  CHECK(tnkit::max_abs_diff(same.tensor(), n.tensor()) == 0.0);

  g::Node t = ops::permute(n, {"c", "a", "b"});
  CHECK(t.shape() == Shape{4, 2, 3});
  CHECK(t.axes()[0].name == "c");
  CHECK(t.edge(0) == n.edge(2));
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t k = 0; k < 4; ++k)
        CHECK(t.tensor()[(k * 2 + i) * 3 + j] == n.tensor()[(i * 3 + j) * 4 + k]);

  CHECK_THROWS_AS(ops::permute(n, {"a", "b"}), std::invalid_argument);
  CHECK_THROWS_AS(ops::permute(n, {"a", "b", "b"}), std::invalid_argument);
}

TEST_CASE("tprod: outer product of unconnected nodes; connected pairs are rejected") {
  g::TensorNetwork net;
  Rng rng(42);
  g::Node a = make_leaf(net, "a", {2}, {"x"}, rng);
  g::Node b = make_leaf(net, "b", {3}, {"y"}, rng);
  g::Node c = ops::tprod(a, b);
  CHECK(c.shape() == Shape{2, 3});
  CHECK(tnkit::max_abs_diff(c.tensor(), oracles::naive_outer(a.tensor(), b.tensor())) == 0.0);
  CHECK_FALSE(c.edge(0)->connected);
  CHECK(c.edge(0) == a.edge(0));

  g::Node d = make_leaf(net, "d", {3}, {"y"}, rng);
  net.connect(b, "y", d, "y");
  CHECK_THROWS_WITH_AS(ops::tprod(b, d), doctest::Contains("use contract_between"),
                       std::invalid_argument);
}

TEST_CASE("node arithmetic: add/sub/mul/div with fresh dangling edges") {
  g::TensorNetwork net;
  Rng rng(43);
  g::Node a = make_leaf(net, "a", {2, 3}, {"u", "v"}, rng);
  g::Node b = make_leaf(net, "b", {2, 3}, {"u", "v"}, rng);

  g::Node sum = ops::add(a, b);
  g::Node diff = ops::sub(a, b);
  g::Node prod = ops::mul(a, b);
  g::Node quot = ops::div(a, b);
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(sum.tensor()[i] == a.tensor()[i] + b.tensor()[i]);
    CHECK(diff.tensor()[i] == a.tensor()[i] - b.tensor()[i]);
    CHECK(prod.tensor()[i] == a.tensor()[i] * b.tensor()[i]);
    CHECK(quot.tensor()[i] == a.tensor()[i] / b.tensor()[i]);
  }
  // Fresh dangling edges: not the inputs' edge objects.
  CHECK(sum.edge(0) != a.edge(0));
  CHECK(sum.edge(0) != b.edge(0));
  CHECK_FALSE(sum.edge(0)->connected);
  CHECK(sum.axes()[0].name == "u");

  // a + (-1 * a) == 0, with the negation built as a node product.
  g::Node minus_one = net.make_node("minus_one", {2, 3}, {"u", "v"}, g::NodeRole::Leaf,
                                    g::Init::constant(-1.0));
  g::Node neg = ops::mul(a, minus_one);
  g::Node zero = ops::add(a, neg);
  CHECK(tnkit::frobenius_norm(zero.tensor()) == 0.0);
}

// ---- einsum ----------------------------------------------------------------------

TEST_CASE("einsum: batched ring contraction matches the loop oracle") {
  g::TensorNetwork net;
  Rng rng(51);
  g::Node n1 = make_leaf(net, "n1", {10, 15, 100}, {"ax_i", "ax_j", "batch"}, rng);
  g::Node n2 = make_leaf(net, "n2", {15, 7, 100}, {"ax_j", "ax_k", "batch"}, rng);
  g::Node n3 = make_leaf(net, "n3", {7, 10, 100}, {"ax_k", "ax_i", "batch"}, rng);
  net.connect(n1, "ax_j", n2, "ax_j");
  net.connect(n2, "ax_k", n3, "ax_k");
  net.connect(n3, "ax_i", n1, "ax_i");

  g::Node out = ops::einsum("ijb,jkb,kib->b", {n1, n2, n3});
  REQUIRE(out.shape() == Shape{100});

  const Tensor& t1 = n1.tensor();
  const Tensor& t2 = n2.tensor();
  const Tensor& t3 = n3.tensor();
  for (std::size_t b = 0; b < 100; b += 7) {  // sample the batch
    double acc = 0.0;
    for (std::size_t i = 0; i < 10; ++i)
      for (std::size_t j = 0; j < 15; ++j)
        for (std::size_t k = 0; k < 7; ++k)
          acc += t1[(i * 15 + j) * 100 + b] * t2[(j * 7 + k) * 100 + b] *
                 t3[(k * 10 + i) * 100 + b];
    CHECK(std::abs(out.tensor()[b] - acc) < 1e-9);
  }

  // Same ring via two pairwise contractions.
  g::Node c12 = ops::contract_between(n1, n2);
  g::Node ring = ops::contract_between(c12, n3);
  REQUIRE(ring.shape() == Shape{100});
  CHECK(tnkit::max_abs_diff(ring.tensor(), out.tensor()) < 1e-12);
}

TEST_CASE("einsum: transpose and reductions on a single node") {
  g::TensorNetwork net;
  Rng rng(52);
  g::Node n = make_leaf(net, "n", {3, 4}, {"u", "v"}, rng);

  g::Node t = ops::einsum("ij->ji", {n});
  CHECK(t.shape() == Shape{4, 3});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) CHECK(t.tensor()[j * 3 + i] == n.tensor()[i * 4 + j]);
  CHECK(t.axes()[0].name == "v");
  CHECK(t.edge(0) == n.edge(1));

  g::Node rows = ops::einsum("ij->i", {n});
  CHECK(rows.shape() == Shape{3});
  for (std::size_t i = 0; i < 3; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < 4; ++j) acc += n.tensor()[i * 4 + j];
    CHECK(std::abs(rows.tensor()[i] - acc) < 1e-12);
  }

  g::Node total = ops::einsum("ij->", {n});
  CHECK(total.shape() == Shape{});
  CHECK(std::abs(total.tensor()[0] - tensor_sum(n.tensor())) < 1e-12);
}

TEST_CASE("einsum: batch-only overlap performs a per-slice outer product") {
  g::TensorNetwork net;
  Rng rng(53);
  g::Node a = make_leaf(net, "a", {5, 2}, {"batch", "x"}, rng);
  g::Node b = make_leaf(net, "b", {5, 3}, {"batch", "y"}, rng);
  g::Node out = ops::einsum("bi,bj->bij", {a, b});
  REQUIRE(out.shape() == Shape{5, 2, 3});
  for (std::size_t bb = 0; bb < 5; ++bb)
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 3; ++j)
        CHECK(std::abs(out.tensor()[(bb * 2 + i) * 3 + j] -
                       a.tensor()[bb * 2 + i] * b.tensor()[bb * 3 + j]) < 1e-12);
}

TEST_CASE("einsum: malformed or ill-matched specs are rejected") {
  g::TensorNetwork net;
  Rng rng(54);
  g::Node a = make_leaf(net, "a", {2, 3}, {"u", "v"}, rng);
  g::Node b = make_leaf(net, "b", {3, 2}, {"u", "v"}, rng);
  g::Node c = make_leaf(net, "c", {5, 2}, {"batch", "x"}, rng);
  g::Node d = make_leaf(net, "d", {5, 3}, {"batch", "y"}, rng);

  CHECK_THROWS_WITH_AS(ops::einsum("ij,jk", {a, b}), doctest::Contains("missing '->'"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(ops::einsum("ij->i2", {a}), doctest::Contains("non-letter"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(ops::einsum("ii->i", {a}), doctest::Contains("diagonals"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(ops::einsum("ijk->ijk", {a}), doctest::Contains("rank"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(ops::einsum("ij,jk->ik", {a, b}),
                       doctest::Contains("not connected"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(ops::einsum("ij->ik", {a}), doctest::Contains("not among the inputs"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(ops::einsum("ij->ii", {a}), doctest::Contains("repeated"),
                       std::invalid_argument);
  // Batch letters must survive to the output.
  CHECK_THROWS_WITH_AS(ops::einsum("bi,bj->ij", {c, d}),
                       doctest::Contains("must appear in the output"), std::invalid_argument);

  g::Node e = make_leaf(net, "e", {2, 3}, {"u", "v"}, rng);
  g::Node f = make_leaf(net, "f", {3, 4}, {"u", "v"}, rng);
  g::Node h = make_leaf(net, "h", {3, 4}, {"u", "v"}, rng);
  net.connect(e, "v", f, "u");
  CHECK_THROWS_WITH_AS(ops::einsum("ij,jk->ijk", {e, f}),
                       doctest::Contains("cannot appear in the output"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(ops::einsum("ij,jk,jl->ikl", {e, f, h}), doctest::Contains("times"),
                       std::invalid_argument);
}

TEST_CASE("einsum: letter size mismatch is caught") {
  g::TensorNetwork net;
  Rng rng(55);
  g::Node a = make_leaf(net, "a", {5, 2}, {"batch", "x"}, rng);
  g::Node b = make_leaf(net, "b", {4, 2}, {"batch", "y"}, rng);
  CHECK_THROWS_WITH_AS(ops::einsum("bi,bj->bij", {a, b}), doctest::Contains("spans sizes"),
                       std::invalid_argument);
}

TEST_CASE("einsum: successor cache returns the same resultant node") {
  g::TensorNetwork net;
  Rng rng(56);
  g::Node n = make_leaf(net, "n", {3, 4}, {"u", "v"}, rng);
  g::Node t1 = ops::einsum("ij->ji", {n});
  std::size_t count = net.successor_count();
  g::Node t2 = ops::einsum("ij->ji", {n});
  CHECK(t1 == t2);
  CHECK(net.successor_count() == count);
  // A different spec is a different successor.
  g::Node r = ops::einsum("ij->i", {n});
  CHECK(r != t1);
  CHECK(net.successor_count() == count + 1);
}

// ---- stacked_einsum -----------------------------------------------------------------

TEST_CASE("stacked_einsum: maps einsum over list positions") {
  g::TensorNetwork net;
  Rng rng(61);
  std::vector<g::Node> as, bs;
  for (int i = 0; i < 3; ++i) {
    as.push_back(make_leaf(net, "a" + std::to_string(i), {2, 3}, {"m", "n"}, rng));
    bs.push_back(make_leaf(net, "b" + std::to_string(i), {3, 4}, {"n", "p"}, rng));
  }
  std::vector<g::Node> out = ops::stacked_einsum("ij,jk->ik", {as, bs});
  REQUIRE(out.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(out[i].shape() == Shape{2, 4});
    Tensor expected = oracles::naive_matmul(as[i].tensor(), bs[i].tensor());
    CHECK(tnkit::max_abs_diff(out[i].tensor(), expected) < 1e-12);
  }
}

TEST_CASE("stacked_einsum: singleton lists reduce to one einsum result") {
  g::TensorNetwork net;
  Rng rng(62);
  g::Node a = make_leaf(net, "a", {2, 3}, {"m", "n"}, rng);
  g::Node b = make_leaf(net, "b", {3}, {"n"}, rng);
  std::vector<g::Node> out = ops::stacked_einsum("ij,j->i", {{a}, {b}});
  REQUIRE(out.size() == 1);
  Tensor expected = oracles::naive_tensordot(a.tensor(), b.tensor(), {1}, {0});
  CHECK(tnkit::max_abs_diff(out[0].tensor(), expected) < 1e-12);
}

TEST_CASE("stacked_einsum: mismatched list lengths are rejected") {
  g::TensorNetwork net;
  Rng rng(63);
  std::vector<g::Node> as{make_leaf(net, "a0", {2}, {"x"}, rng),
                          make_leaf(net, "a1", {2}, {"x"}, rng)};
  std::vector<g::Node> bs{make_leaf(net, "b0", {2}, {"x"}, rng)};
  CHECK_THROWS_WITH_AS(ops::stacked_einsum("i,i->", {as, bs}),
                       doctest::Contains("list lengths differ"), std::invalid_argument);
}

// ---- cache soundness, memory modes, trace/replay --------------------------------------

TEST_CASE("cache soundness: repeated calls equal reset-then-recompute") {
  g::TensorNetwork net;
  Rng rng(71);
  g::Node p = make_param(net, "p", {2, 3}, {"l", "r"}, rng);
  g::Node q = make_param(net, "q", {3, 4}, {"l", "r"}, rng);
  net.connect(p, "r", q, "l");

  Tensor r1 = ops::contract_between(p, q).tensor();
  Tensor r2 = ops::contract_between(p, q).tensor();  // cached successor
  CHECK(tnkit::max_abs_diff(r1, r2) < 1e-12);

  net.reset();
  CHECK(net.successor_count() == 0);
  CHECK(net.node_count() == 2);
  Tensor r3 = ops::contract_between(p, q).tensor();  // rebuilt from scratch
  CHECK(tnkit::max_abs_diff(r1, r3) < 1e-12);
}

TEST_CASE("memory mode combinations produce identical values") {
  Rng seed_rng(72);
  Tensor tp0 = Tensor::gaussian({2, 4}, seed_rng);
  Tensor tp1 = Tensor::gaussian({2, 4}, seed_rng);
  Tensor tp2 = Tensor::gaussian({2, 4}, seed_rng);
  Tensor td0 = Tensor::gaussian({2}, seed_rng);
  Tensor td1 = Tensor::gaussian({2}, seed_rng);
  Tensor td2 = Tensor::gaussian({2}, seed_rng);

  auto run = [&](bool auto_stack, bool auto_unbind) {
    g::TensorNetwork net;
    net.auto_stack = auto_stack;
    net.auto_unbind = auto_unbind;
    g::Node p0 = net.make_node("p0", {2, 4}, {"in", "out"}, g::NodeRole::Param,
                               g::Init::copy(tp0));
    g::Node p1 = net.make_node("p1", {2, 4}, {"in", "out"}, g::NodeRole::Param,
                               g::Init::copy(tp1));
    g::Node p2 = net.make_node("p2", {2, 4}, {"in", "out"}, g::NodeRole::Param,
                               g::Init::copy(tp2));
    g::Node d0 = net.make_node("d0", {2}, {"in"}, g::NodeRole::Leaf, g::Init::copy(td0));
    g::Node d1 = net.make_node("d1", {2}, {"in"}, g::NodeRole::Leaf, g::Init::copy(td1));
    g::Node d2 = net.make_node("d2", {2}, {"in"}, g::NodeRole::Leaf, g::Init::copy(td2));

    g::Node sp = ops::stack({p0, p1, p2});
    g::Node sd = ops::stack({d0, d1, d2});
    net.connect(sp, "in", sd, "in");
    g::Node c = ops::contract_between(sp, sd);  // (stack, out)
    std::vector<g::Node> parts = ops::unbind(c);
    std::vector<Tensor> values;
    for (const g::Node& part : parts) values.push_back(part.tensor());
    return values;
  };

  std::vector<Tensor> base = run(true, false);
  REQUIRE(base.size() == 3);
  // Direct oracle: slice s equals d_s . p_s.
  std::vector<Tensor> mats{tp0, tp1, tp2}, vecs{td0, td1, td2};
  for (std::size_t s = 0; s < 3; ++s) {
    Tensor expected = oracles::naive_tensordot(mats[s], vecs[s], {0}, {0});
    CHECK(tnkit::max_abs_diff(base[s], expected) < 1e-12);
  }
  for (bool as : {false, true}) {
    for (bool au : {false, true}) {
      std::vector<Tensor> got = run(as, au);
      for (std::size_t s = 0; s < 3; ++s) {
        CHECK(tnkit::max_abs_diff(got[s], base[s]) < 1e-12);
      }
    }
  }
}

TEST_CASE("trace and replay: recorded plan recomputes with new data and frees intermediates") {
  g::TensorNetwork net;
  Rng rng(73);
  g::Node d = net.make_node("d", {1, 2}, {"batch", "x"}, g::NodeRole::Data, g::Init::zeros());
  g::Node w1 = make_param(net, "w1", {2, 3}, {"in", "out"}, rng);
  g::Node w2 = make_param(net, "w2", {3}, {"v"}, rng);
  net.connect(d, "x", w1, "in");
  net.connect(w1, "out", w2, "v");

  auto forward = [&]() {
    g::Node h = ops::contract_between(d, w1);
    return ops::contract_between(h, w2);
  };

  net.begin_trace();
  net.set_tensor(d, Tensor::gaussian({1, 2}, rng));
  g::Node out = forward();
  net.end_trace(out);
  REQUIRE(net.traced());
  CHECK(net.plan().steps.size() == 2);
  CHECK(net.plan().output == out);

  std::size_t steady_nodes = net.node_count();
  for (int round = 0; round < 3; ++round) {
    Tensor batch = Tensor::gaussian({5, 2}, rng);
    net.set_tensor(d, batch);
    g::Node result = net.replay();
    CHECK(result == out);
    REQUIRE(result.shape() == Shape{5});
    CHECK(net.node_count() == steady_nodes);  // zero new nodes in steady state

    // Oracle: y_b = (x_b W1) . w2
    const Tensor& m = w1.tensor();
    const Tensor& v = w2.tensor();
    for (std::size_t b = 0; b < 5; ++b) {
      double y = 0.0;
      for (std::size_t o = 0; o < 3; ++o) {
        double h = 0.0;
        for (std::size_t i = 0; i < 2; ++i) h += batch[b * 2 + i] * m[i * 3 + o];
        y += h * v[o];
      }
      CHECK(std::abs(result.tensor()[b] - y) < 1e-12);
    }

    // Data and intermediate tensors are freed after their last use; params
    // and the output survive.
    CHECK_FALSE(net.has_tensor(d));
    CHECK(net.has_tensor(out));
    CHECK(net.has_tensor(w1));
    CHECK(net.has_tensor(w2));
    std::size_t with_tensor = 0;
    for (const g::Node& n : net.nodes()) {
      if (net.has_tensor(n)) ++with_tensor;
    }
    CHECK(with_tensor == 3);  // w1, w2, out
  }
}

TEST_CASE("trace plans are reproducible after reset (stable step displays)") {
  g::TensorNetwork net;
  Rng rng(74);
  g::Node d = net.make_node("d", {1, 2}, {"batch", "x"}, g::NodeRole::Data, g::Init::zeros());
  g::Node w = make_param(net, "w", {2, 2}, {"in", "out"}, rng);
  g::Node v = make_param(net, "v", {2}, {"v"}, rng);
  net.connect(d, "x", w, "in");
  net.connect(w, "out", v, "v");

  auto trace_once = [&]() {
    net.begin_trace();
    net.set_tensor(d, Tensor::gaussian({1, 2}, rng));
    g::Node out = ops::contract_between(ops::contract_between(d, w), v);
    net.end_trace(out);
    std::vector<std::string> displays;
    for (const auto& step : net.plan().steps) displays.push_back(step.display);
    return displays;
  };

  std::vector<std::string> first = trace_once();
  std::vector<std::string> second = trace_once();
  CHECK(first == second);
  REQUIRE(first.size() == 2);
  CHECK(first[0].find("contract(") == 0);
}

TEST_CASE("hints are shape-driven: trace at batch 1 replays correctly at batch 7") {
  Rng rng(75);
  Tensor w_val = Tensor::gaussian({3, 4}, rng);
  Tensor batch7 = Tensor::gaussian({7, 3}, rng);

  // Traced network.
  g::TensorNetwork traced;
  g::Node d = traced.make_node("d", {1, 3}, {"batch", "x"}, g::NodeRole::Data,
                               g::Init::zeros());
  g::Node w = traced.make_node("w", {3, 4}, {"in", "out"}, g::NodeRole::Param,
                               g::Init::copy(w_val));
  traced.connect(d, "x", w, "in");
  traced.begin_trace();
  traced.set_tensor(d, Tensor::gaussian({1, 3}, rng));
  g::Node out = ops::contract_between(d, w);
  traced.end_trace(out);

  traced.set_tensor(d, batch7);
  Tensor got = traced.replay().tensor();
  REQUIRE(got.shape() == Shape{7, 4});

  Tensor expected = oracles::naive_matmul(batch7, w_val);
  CHECK(tnkit::max_abs_diff(got, expected) < 1e-12);
}

TEST_CASE("gradients through node operations match untraced and finite differences") {
  Rng rng(76);
  Tensor tv_l = Tensor::gaussian({2}, rng);
  Tensor tc0 = Tensor::gaussian({2, 2}, rng);
  Tensor tc1 = Tensor::gaussian({2, 2}, rng);
  Tensor tv_r = Tensor::gaussian({2}, rng);

  struct Build {
    g::TensorNetwork net;
    g::Node vl, c0, c1, vr;
  };
  auto build = [&](const Tensor& a, const Tensor& b, const Tensor& c, const Tensor& d) {
    auto out = std::make_unique<Build>();
    out->vl = out->net.make_node("vl", {2}, {"r"}, g::NodeRole::Param, g::Init::copy(a));
    out->c0 = out->net.make_node("c0", {2, 2}, {"l", "r"}, g::NodeRole::Param, g::Init::copy(b));
    out->c1 = out->net.make_node("c1", {2, 2}, {"l", "r"}, g::NodeRole::Param, g::Init::copy(c));
    out->vr = out->net.make_node("vr", {2}, {"l"}, g::NodeRole::Param, g::Init::copy(d));
    out->net.connect(out->vl, "r", out->c0, "l");
    out->net.connect(out->c0, "r", out->c1, "l");
    out->net.connect(out->c1, "r", out->vr, "l");
    return out;
  };
  auto forward = [](Build& b) {
    g::Node h = ops::contract_between(b.vl, b.c0);
    h = ops::contract_between(h, b.c1);
    return ops::contract_between(h, b.vr);
  };

  // Untraced gradients.
  auto eager = build(tv_l, tc0, tc1, tv_r);
  g::Node out_e = forward(*eager);
  REQUIRE(out_e.shape() == Shape{});
  ad::Variable loss_e = ad::ops::sum_all(eager->net.node_variable(out_e));
  ad::backward(loss_e);
  Tensor g_c0_e = *eager->net.param_grad(eager->c0);
  Tensor g_vl_e = *eager->net.param_grad(eager->vl);

  // Traced gradients.
  auto traced = build(tv_l, tc0, tc1, tv_r);
  traced->net.begin_trace();
  g::Node out_t = forward(*traced);
  traced->net.end_trace(out_t);
  traced->net.replay();
  ad::Variable loss_t = ad::ops::sum_all(traced->net.node_variable(out_t));
  ad::backward(loss_t);
  Tensor g_c0_t = *traced->net.param_grad(traced->c0);
  Tensor g_vl_t = *traced->net.param_grad(traced->vl);

  CHECK(tnkit::max_abs_diff(g_c0_e, g_c0_t) < 1e-12);
  CHECK(tnkit::max_abs_diff(g_vl_e, g_vl_t) < 1e-12);

  // Central differences on every entry of c0.
  auto value_at = [&](const Tensor& c0_probe) {
    ad::GradMode off(false);
    auto probe = build(tv_l, c0_probe, tc1, tv_r);
    return forward(*probe).tensor()[0];
  };
  const double h = 1e-5;
  for (std::size_t i = 0; i < 4; ++i) {
    std::vector<double> plus(4), minus(4);
    for (std::size_t j = 0; j < 4; ++j) plus[j] = minus[j] = tc0[j];
    plus[i] += h;
    minus[i] -= h;
    double numeric = (value_at(Tensor::from_data({2, 2}, std::move(plus))) -
                      value_at(Tensor::from_data({2, 2}, std::move(minus)))) /
                     (2 * h);
    CHECK(oracles::rel_err(g_c0_e[i], numeric) < 1e-6);
  }
}

TEST_CASE("gradients flow through re-pointed parameter stacks in both modes") {
  Rng rng(77);
  Tensor t0 = Tensor::gaussian({2, 3}, rng);
  Tensor t1 = Tensor::gaussian({2, 3}, rng);

  for (bool auto_stack : {true, false}) {
    g::TensorNetwork net;
    net.auto_stack = auto_stack;
    g::Node p0 = net.make_node("p0", {2, 3}, {"u", "v"}, g::NodeRole::Param, g::Init::copy(t0));
    g::Node p1 = net.make_node("p1", {2, 3}, {"u", "v"}, g::NodeRole::Param, g::Init::copy(t1));
    g::Node s = ops::stack({p0, p1});
    ad::Variable loss = ad::ops::sum_all(net.node_variable(s));
    ad::backward(loss);
    Tensor g0 = *net.param_grad(p0);
    Tensor g1 = *net.param_grad(p1);
    CHECK(tnkit::max_abs_diff(g0, Tensor::ones({2, 3})) == 0.0);
    CHECK(tnkit::max_abs_diff(g1, Tensor::ones({2, 3})) == 0.0);
  }
}

TEST_CASE("replayed forwards keep recording fresh tapes for backward") {
  g::TensorNetwork net;
  Rng rng(78);
  g::Node d = net.make_node("d", {1, 2}, {"batch", "x"}, g::NodeRole::Data, g::Init::zeros());
  g::Node w = make_param(net, "w", {2, 2}, {"in", "out"}, rng);
  net.connect(d, "x", w, "in");

  net.begin_trace();
  net.set_tensor(d, Tensor::gaussian({1, 2}, rng));
  g::Node out = ops::contract_between(d, w);
  net.end_trace(out);

  Tensor batch = Tensor::gaussian({4, 2}, rng);
  for (int it = 0; it < 3; ++it) {
    net.zero_grad();
    net.set_tensor(d, batch);
    net.replay();
    ad::Variable loss = ad::ops::sum_all(net.node_variable(out));
    ad::backward(loss);
    Tensor grad = *net.param_grad(w);
    // d(sum(x W)) / dW[i][o] = sum_b x[b][i]
    for (std::size_t i = 0; i < 2; ++i) {
      double col = 0.0;
      for (std::size_t b = 0; b < 4; ++b) col += batch[b * 2 + i];
      for (std::size_t o = 0; o < 2; ++o) CHECK(std::abs(grad[i * 2 + o] - col) < 1e-12);
    }
  }
}

TEST_CASE("reset removes operation nodes and restores re-pointed parameters") {
  g::TensorNetwork net;
  Rng rng(79);
  g::Node p0 = make_param(net, "p0", {2}, {"x"}, rng);
  g::Node p1 = make_param(net, "p1", {2}, {"x"}, rng);
  Tensor v0 = p0.tensor();
  g::Node s = ops::stack({p0, p1});
  REQUIRE_FALSE(net.slot_of(p0)->owns);
  std::size_t before = net.node_count();
  CHECK(before == 3);

  net.reset();
  CHECK(net.node_count() == 2);
  CHECK(net.successor_count() == 0);
  CHECK(net.slot_of(p0)->owns);  // alias materialized back into its own buffer
  CHECK(tnkit::max_abs_diff(p0.tensor(), v0) == 0.0);
  CHECK_FALSE(s.impl()->net);  // detached handle
  auto params = net.trainable_parameters();
  CHECK(params.size() == 2);
}
