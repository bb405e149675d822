#include "tnkit/models.hpp"

#include <algorithm>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace tnkit::models {

using graph::Init;
using graph::Node;
using graph::NodeRole;
using graph::TensorNetwork;

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

void connect_if_dangling(TensorNetwork& net, const Node& a, const std::string& axis_a,
                         const Node& b, const std::string& axis_b) {
  if (!a.edge(axis_a)->connected && !b.edge(axis_b)->connected) net.connect(a, axis_a, b, axis_b);
}

// (bond_l, mid, bond_r) core: identity on the bond plane replicated across the
// middle index, plus Gaussian noise.
Tensor chain_core(std::size_t dl, std::size_t mid, std::size_t dr, Rng& rng, double noise_std) {
  std::vector<double> v(dl * mid * dr);
  std::size_t idx = 0;
  for (std::size_t a = 0; a < dl; ++a)
    for (std::size_t x = 0; x < mid; ++x)
      for (std::size_t b = 0; b < dr; ++b, ++idx)
        v[idx] = (a == b ? 1.0 : 0.0) + (noise_std > 0.0 ? noise_std * rng.normal() : 0.0);
  return Tensor::from_data({dl, mid, dr}, std::move(v));
}

// (bond_l, out, in, bond_r) operator core: identity on bonds times identity on
// (out, in), plus noise; a chain of these is the identity operator.
Tensor operator_core(std::size_t dl, std::size_t o, std::size_t i, std::size_t dr, Rng& rng,
                     double noise_std) {
  std::vector<double> v(dl * o * i * dr);
  std::size_t idx = 0;
  for (std::size_t a = 0; a < dl; ++a)
    for (std::size_t p = 0; p < o; ++p)
      for (std::size_t q = 0; q < i; ++q)
        for (std::size_t b = 0; b < dr; ++b, ++idx)
          v[idx] = ((a == b && p == q) ? 1.0 : 0.0) + (noise_std > 0.0 ? noise_std * rng.normal() : 0.0);
  return Tensor::from_data({dl, o, i, dr}, std::move(v));
}

// A chain position: the core at that position and, when the position reads an
// input feature, its data node.
struct ChainPos {
  Node core;
  Node data;  // undefined for positions without data (e.g. the output core)
};

// Reduce equal-shape, pairwise-adjacent batch matrices (batch, left, right) to
// a single one by repeated halving: stack the even- and odd-indexed members,
// contract the stacks slice-wise, and unbind. Slice provenance re-attaches
// every intermediate to its original chain neighbors.
Node halve_adjacent(TensorNetwork& net, std::vector<Node> mats) {
  while (mats.size() > 1) {
    const bool carry = (mats.size() % 2) != 0;
    const Node last = mats.back();
    std::vector<Node> evens, odds;
    for (std::size_t i = 0; i + 1 < mats.size(); i += 2) {
      evens.push_back(mats[i]);
      odds.push_back(mats[i + 1]);
    }
    Node se = ops::stack(evens);
    Node so = ops::stack(odds);
    connect_if_dangling(net, se, "right", so, "left");
    Node merged = ops::contract_between(se, so);
    std::vector<Node> next = ops::unbind(merged);
    if (carry) next.push_back(last);
    mats = std::move(next);
  }
  return mats.front();
}

// Contract cap_left, the chain positions in order, and cap_right down to the
// output node.
//
//   inline_input = true   data is absorbed site by site
//                = false  equal-shape input sites and their data nodes are
//                         stacked and absorbed in one slice-wise contraction
//   inline_mats  = true   the per-position operands fold sequentially
//                = false  runs of equal-shape batch matrices reduce by
//                         stack-halving
Node contract_chain(TensorNetwork& net, const Node& cap_left, const std::vector<ChainPos>& chain,
                    const Node& cap_right, bool inline_input, bool inline_mats) {
  if (chain.empty()) fail("contract_chain: empty chain");
  for (const ChainPos& pos : chain)
    if (pos.data.defined() && !pos.data.has_tensor())
      fail("contract_chain: data node '" + pos.data.name() + "' has no tensor; call add_data first");

  if (inline_input && inline_mats) {
    // Memory-light sweep: fold the core first, then its data, so no
    // (batch, bond, bond) matrix is ever materialized.
    Node cur = cap_left;
    for (const ChainPos& pos : chain) {
      cur = ops::contract_between(cur, pos.core);
      if (pos.data.defined()) cur = ops::contract_between(cur, pos.data);
    }
    return ops::contract_between(cur, cap_right);
  }

  // Absorb inputs into per-position operands.
  std::vector<Node> elem(chain.size());
  std::vector<bool> is_mat(chain.size(), false);
  std::vector<std::size_t> pending;  // data positions not yet absorbed
  for (std::size_t p = 0; p < chain.size(); ++p) {
    if (chain[p].data.defined())
      pending.push_back(p);
    else
      elem[p] = chain[p].core;
  }

  if (!inline_input && pending.size() >= 2) {
    // Stack the largest family of identically-shaped input sites (the
    // boundary cores differ) and absorb all their data in one batched
    // contraction.
    std::map<Shape, std::vector<std::size_t>> families;
    for (std::size_t p : pending) families[chain[p].core.shape()].push_back(p);
    const std::vector<std::size_t>* best = nullptr;
    for (const auto& [shape, members] : families)
      if (!best || members.size() > best->size()) best = &members;
    if (best->size() >= 2) {
      std::vector<Node> ds, cs;
      for (std::size_t p : *best) {
        ds.push_back(chain[p].data);
        cs.push_back(chain[p].core);
      }
      Node sd = ops::stack(ds);
      Node sc = ops::stack(cs);
      connect_if_dangling(net, sd, "feature", sc, "input");
      Node hs = ops::contract_between(sd, sc);  // (stack, batch, left, right)
      std::vector<Node> slices = ops::unbind(hs);
      for (std::size_t i = 0; i < best->size(); ++i) {
        elem[(*best)[i]] = slices[i];
        is_mat[(*best)[i]] = true;
      }
      std::vector<std::size_t> rest;
      for (std::size_t p : pending)
        if (!elem[p].defined()) rest.push_back(p);
      pending = std::move(rest);
    }
  }
  for (std::size_t p : pending) {
    elem[p] = ops::contract_between(chain[p].data, chain[p].core);  // (batch, left, right)
    is_mat[p] = true;
  }

  if (inline_mats) {
    Node cur = cap_left;
    for (const Node& e : elem) cur = ops::contract_between(cur, e);
    return ops::contract_between(cur, cap_right);
  }

  // Halve maximal runs of identically-shaped batch matrices, then fold the
  // reduced chain sequentially.
  std::vector<Node> reduced;
  std::vector<Node> run;
  auto flush = [&]() {
    if (!run.empty()) {
      reduced.push_back(halve_adjacent(net, run));
      run.clear();
    }
  };
  for (std::size_t p = 0; p < elem.size(); ++p) {
    if (is_mat[p] && (run.empty() || run.back().shape() == elem[p].shape()))
      run.push_back(elem[p]);
    else if (is_mat[p]) {
      flush();
      run.push_back(elem[p]);
    } else {
      flush();
      reduced.push_back(elem[p]);
    }
  }
  flush();
  Node cur = cap_left;
  for (const Node& e : reduced) cur = ops::contract_between(cur, e);
  return ops::contract_between(cur, cap_right);
}

std::size_t checked_pow(std::size_t base, std::size_t exp, std::size_t limit, const char* what) {
  std::size_t r = 1;
  for (std::size_t i = 0; i < exp; ++i) {
    if (base != 0 && r > limit / base) fail(std::string(what) + ": size overflows the limit");
    r *= base;
  }
  return r;
}

}  // namespace

// --- Model base -------------------------------------------------------------------

void Model::register_input(const Node& node, const std::string& axis) {
  inputs_.push_back(graph::AxisRef{node, node.axis_index(axis)});
}

void Model::set_data_nodes() {
  if (!data_nodes_.empty()) return;
  if (inputs_.empty()) fail("set_data_nodes: the model registered no input edges");
  data_nodes_.reserve(inputs_.size());
  for (std::size_t i = 0; i < inputs_.size(); ++i) {
    const graph::AxisRef& ref = inputs_[i];
    const graph::EdgePtr& e = ref.node.edge(ref.axis);
    if (e->connected)
      fail("set_data_nodes: input axis '" + ref.node.axes()[ref.axis].name + "' of '" +
           ref.node.name() + "' is already connected");
    Node d = net_.make_node("data_" + std::to_string(i), {1, e->size}, {"batch", "feature"},
                            NodeRole::Data);
    net_.connect(d, "feature", ref.node, ref.node.axes()[ref.axis].name);
    data_nodes_.push_back(d);
  }
}

void Model::add_data(const Tensor& batch) {
  set_data_nodes();
  if (batch.rank() != 3)
    fail("add_data: expected a (batch, features, dim) tensor, got rank " +
         std::to_string(batch.rank()));
  if (batch.dim(1) != data_nodes_.size())
    fail("add_data: got " + std::to_string(batch.dim(1)) + " feature slices for " +
         std::to_string(data_nodes_.size()) + " data nodes");
  for (std::size_t k = 0; k < data_nodes_.size(); ++k) {
    const std::size_t want = data_nodes_[k].edge("feature")->size;
    if (batch.dim(2) != want)
      fail("add_data: feature dimension " + std::to_string(batch.dim(2)) + " does not match " +
           std::to_string(want));
    net_.set_tensor(data_nodes_[k], slice_index(batch, 1, k));
  }
}

Tensor Model::forward(const Tensor& batch) {
  set_data_nodes();
  add_data(batch);
  if (net_.traced()) {
    output_ = net_.replay();
    return net_.get_tensor(output_);
  }
  output_ = contract();
  if (!output_.defined()) throw std::logic_error("forward: contract() returned no output node");
  return net_.get_tensor(output_);
}

void Model::trace(const Tensor& example) {
  if (example.rank() != 3 || example.dim(0) != 1)
    fail("trace: the example must be a batch of size 1");
  set_data_nodes();
  net_.begin_trace();
  add_data(example);
  output_ = contract();
  net_.end_trace(output_);
}

// --- Mps ---------------------------------------------------------------------------

Mps::Mps(const MpsSpec& spec) {
  if (spec.n_sites == 0) fail("mps: n_sites must be positive");
  if (spec.phys_dim == 0 || spec.bond_dim == 0) fail("mps: dimensions must be positive");
  Rng rng(spec.seed);
  std::vector<Tensor> cores;
  cores.reserve(spec.n_sites);
  for (std::size_t k = 0; k < spec.n_sites; ++k) {
    const std::size_t dl = (k == 0) ? 1 : spec.bond_dim;
    const std::size_t dr = (k + 1 == spec.n_sites) ? 1 : spec.bond_dim;
    cores.push_back(chain_core(dl, spec.phys_dim, dr, rng, spec.init_std));
  }
  build(std::move(cores));
}

Mps::Mps(std::vector<Tensor> cores) { build(std::move(cores)); }

void Mps::build(std::vector<Tensor> cores) {
  if (cores.empty()) fail("mps: need at least one core");
  for (std::size_t k = 0; k < cores.size(); ++k) {
    if (cores[k].rank() != 3)
      fail("mps: core " + std::to_string(k) + " must have rank 3 (bond, phys, bond)");
    if (k + 1 < cores.size() && cores[k].dim(2) != cores[k + 1].dim(0))
      fail("mps: bond mismatch between cores " + std::to_string(k) + " and " +
           std::to_string(k + 1));
  }
  if (cores.front().dim(0) != 1 || cores.back().dim(2) != 1)
    fail("mps: boundary bonds must have size 1");
  phys_dim_ = cores.front().dim(1);
  for (const Tensor& c : cores)
    if (c.dim(1) != phys_dim_) fail("mps: all cores must share the physical dimension");

  sites_.reserve(cores.size());
  for (std::size_t k = 0; k < cores.size(); ++k) {
    sites_.push_back(net_.make_node("site_" + std::to_string(k), cores[k].shape(),
                                    {"left", "input", "right"}, NodeRole::Param,
                                    Init::copy(cores[k])));
  }
  for (std::size_t k = 0; k + 1 < sites_.size(); ++k)
    net_.connect(sites_[k], "right", sites_[k + 1], "left");
  cap_left_ = net_.make_node("cap_left", {1}, {"bond"}, NodeRole::Leaf, Init::ones());
  cap_right_ = net_.make_node("cap_right", {1}, {"bond"}, NodeRole::Leaf, Init::ones());
  net_.connect(cap_left_, "bond", sites_.front(), "left");
  net_.connect(cap_right_, "bond", sites_.back(), "right");
  for (const Node& s : sites_) register_input(s, "input");
}

Tensor Mps::core(std::size_t k) const {
  if (k >= sites_.size()) fail("mps: core index out of range");
  return net_.get_tensor(sites_[k]);
}

std::size_t Mps::bond_dim(std::size_t bond) const {
  if (bond > sites_.size()) fail("mps: bond index out of range");
  if (bond == 0) return core(0).dim(0);
  return core(bond - 1).dim(2);
}

graph::Node Mps::contract() {
  if (data_nodes_.size() != sites_.size())
    fail("mps: data nodes are missing; run forward or set_data_nodes + add_data");
  std::vector<ChainPos> chain(sites_.size());
  for (std::size_t k = 0; k < sites_.size(); ++k) chain[k] = ChainPos{sites_[k], data_nodes_[k]};
  return contract_chain(net_, cap_left_, chain, cap_right_, inline_input, inline_mats);
}

// --- MpsLayer ------------------------------------------------------------------------

MpsLayer::MpsLayer(const MpsLayerSpec& spec) : spec_(spec) {
  if (spec.n_features < 2) fail("mps_layer: n_features must be at least 2");
  if (spec.in_dim == 0 || spec.out_dim == 0 || spec.bond_dim == 0)
    fail("mps_layer: dimensions must be positive");
  out_position_ = spec.out_position.value_or((spec.n_features - 1) / 2);
  if (out_position_ >= spec.n_features) fail("mps_layer: out_position out of range");

  Rng rng(spec.seed);
  const std::size_t nf = spec.n_features, D = spec.bond_dim;
  cores_.reserve(nf);
  for (std::size_t p = 0; p < nf; ++p) {
    const std::size_t dl = (p == 0) ? 1 : D;
    const std::size_t dr = (p + 1 == nf) ? 1 : D;
    const bool is_out = (p == out_position_);
    const std::size_t mid = is_out ? spec.out_dim : spec.in_dim;
    Tensor t = chain_core(dl, mid, dr, rng, spec.init_std);
    cores_.push_back(net_.make_node(is_out ? "out_core" : "site_" + std::to_string(p),
                                    {dl, mid, dr},
                                    {"left", is_out ? "output" : "input", "right"},
                                    NodeRole::Param, Init::copy(t)));
  }
  for (std::size_t p = 0; p + 1 < nf; ++p) net_.connect(cores_[p], "right", cores_[p + 1], "left");
  cap_left_ = net_.make_node("cap_left", {1}, {"bond"}, NodeRole::Leaf, Init::ones());
  cap_right_ = net_.make_node("cap_right", {1}, {"bond"}, NodeRole::Leaf, Init::ones());
  net_.connect(cap_left_, "bond", cores_.front(), "left");
  net_.connect(cap_right_, "bond", cores_.back(), "right");
  for (std::size_t p = 0; p < nf; ++p)
    if (p != out_position_) register_input(cores_[p], "input");
}

graph::Node MpsLayer::contract() {
  if (data_nodes_.size() + 1 != cores_.size())
    fail("mps_layer: data nodes are missing; run forward or set_data_nodes + add_data");
  std::vector<ChainPos> chain(cores_.size());
  for (std::size_t p = 0; p < cores_.size(); ++p) {
    Node data;
    if (p != out_position_) data = data_nodes_[p < out_position_ ? p : p - 1];
    chain[p] = ChainPos{cores_[p], data};
  }
  return contract_chain(net_, cap_left_, chain, cap_right_, inline_input, inline_mats);
}

// --- Mpo ----------------------------------------------------------------------------

Mpo::Mpo(const MpoSpec& spec) {
  if (spec.n_sites == 0) fail("mpo: n_sites must be positive");
  if (spec.in_dim == 0 || spec.out_dim == 0 || spec.bond_dim == 0)
    fail("mpo: dimensions must be positive");
  Rng rng(spec.seed);
  std::vector<Tensor> cores;
  cores.reserve(spec.n_sites);
  for (std::size_t k = 0; k < spec.n_sites; ++k) {
    const std::size_t dl = (k == 0) ? 1 : spec.bond_dim;
    const std::size_t dr = (k + 1 == spec.n_sites) ? 1 : spec.bond_dim;
    cores.push_back(operator_core(dl, spec.out_dim, spec.in_dim, dr, rng, spec.init_std));
  }
  build(std::move(cores));
}

Mpo::Mpo(std::vector<Tensor> cores) { build(std::move(cores)); }

void Mpo::build(std::vector<Tensor> cores) {
  if (cores.empty()) fail("mpo: need at least one core");
  for (std::size_t k = 0; k < cores.size(); ++k) {
    if (cores[k].rank() != 4)
      fail("mpo: core " + std::to_string(k) + " must have rank 4 (bond, out, in, bond)");
    if (k + 1 < cores.size() && cores[k].dim(3) != cores[k + 1].dim(0))
      fail("mpo: bond mismatch between cores " + std::to_string(k) + " and " +
           std::to_string(k + 1));
  }
  if (cores.front().dim(0) != 1 || cores.back().dim(3) != 1)
    fail("mpo: boundary bonds must have size 1");
  sites_.reserve(cores.size());
  for (std::size_t k = 0; k < cores.size(); ++k) {
    sites_.push_back(net_.make_node("core_" + std::to_string(k), cores[k].shape(),
                                    {"left", "output", "input", "right"}, NodeRole::Param,
                                    Init::copy(cores[k])));
  }
  for (std::size_t k = 0; k + 1 < sites_.size(); ++k)
    net_.connect(sites_[k], "right", sites_[k + 1], "left");
}

Tensor Mpo::core(std::size_t k) const {
  if (k >= sites_.size()) fail("mpo: core index out of range");
  return net_.get_tensor(sites_[k]);
}

// --- UMps ----------------------------------------------------------------------------

UMps::UMps(const UMpsSpec& spec) : spec_(spec) {
  if (spec.n_sites == 0) fail("umps: n_sites must be positive");
  if (spec.phys_dim == 0 || spec.bond_dim == 0) fail("umps: dimensions must be positive");
  Rng rng(spec.seed);
  const std::size_t D = spec.bond_dim, d = spec.phys_dim;
  Tensor t = chain_core(D, d, D, rng, spec.init_std);
  core_ = net_.make_node("core", {D, d, D}, {"left", "input", "right"}, NodeRole::Param,
                         Init::copy(t));
  sites_.reserve(spec.n_sites);
  for (std::size_t k = 0; k < spec.n_sites; ++k) {
    Node s = net_.make_node("site_" + std::to_string(k), {D, d, D}, {"left", "input", "right"},
                            NodeRole::Leaf);
    net_.set_tensor_from(s, core_);  // every site reads the one shared slot
    sites_.push_back(s);
  }
  for (std::size_t k = 0; k + 1 < sites_.size(); ++k)
    net_.connect(sites_[k], "right", sites_[k + 1], "left");
  cap_left_ = net_.make_node("cap_left", {D}, {"bond"}, NodeRole::Leaf, Init::ones());
  cap_right_ = net_.make_node("cap_right", {D}, {"bond"}, NodeRole::Leaf, Init::ones());
  net_.connect(cap_left_, "bond", sites_.front(), "left");
  net_.connect(cap_right_, "bond", sites_.back(), "right");
  for (const Node& s : sites_) register_input(s, "input");
}

Tensor UMps::core() const { return net_.get_tensor(core_); }

void UMps::set_core(Tensor t) { net_.set_tensor(core_, std::move(t)); }

graph::Node UMps::contract() {
  if (data_nodes_.size() != sites_.size())
    fail("umps: data nodes are missing; run forward or set_data_nodes + add_data");
  std::vector<ChainPos> chain(sites_.size());
  for (std::size_t k = 0; k < sites_.size(); ++k) chain[k] = ChainPos{sites_[k], data_nodes_[k]};
  return contract_chain(net_, cap_left_, chain, cap_right_, inline_input, inline_mats);
}

// --- UMpo -----------------------------------------------------------------------------

UMpo::UMpo(const UMpoSpec& spec) : spec_(spec) {
  if (spec.n_sites == 0) fail("umpo: n_sites must be positive");
  if (spec.in_dim == 0 || spec.out_dim == 0 || spec.bond_dim == 0)
    fail("umpo: dimensions must be positive");
  Rng rng(spec.seed);
  const std::size_t D = spec.bond_dim;
  Tensor t = operator_core(D, spec.out_dim, spec.in_dim, D, rng, spec.init_std);
  core_ = net_.make_node("core", {D, spec.out_dim, spec.in_dim, D},
                         {"left", "output", "input", "right"}, NodeRole::Param, Init::copy(t));
  sites_.reserve(spec.n_sites);
  for (std::size_t k = 0; k < spec.n_sites; ++k) {
    Node s = net_.make_node("site_" + std::to_string(k), {D, spec.out_dim, spec.in_dim, D},
                            {"left", "output", "input", "right"}, NodeRole::Leaf);
    net_.set_tensor_from(s, core_);
    sites_.push_back(s);
  }
  for (std::size_t k = 0; k + 1 < sites_.size(); ++k)
    net_.connect(sites_[k], "right", sites_[k + 1], "left");
}

Tensor UMpo::core() const { return net_.get_tensor(core_); }

void UMpo::set_core(Tensor t) { net_.set_tensor(core_, std::move(t)); }

// --- Ttn ------------------------------------------------------------------------------

Ttn::Ttn(const TtnSpec& spec) : spec_(spec) {
  if (spec.arity < 2) fail("ttn: arity must be at least 2");
  if (spec.depth == 0) fail("ttn: depth must be positive");
  if (spec.phys_dim == 0 || spec.bond_dim == 0 || spec.out_dim == 0)
    fail("ttn: dimensions must be positive");
  checked_pow(spec.arity, spec.depth, 1u << 20, "ttn");

  Rng rng(spec.seed);
  levels_.resize(spec.depth);
  std::size_t count = 1;
  for (std::size_t l = 0; l < spec.depth; ++l) {
    const std::size_t child = (l + 1 == spec.depth) ? spec.phys_dim : spec.bond_dim;
    const std::size_t parent = (l == 0) ? spec.out_dim : spec.bond_dim;
    Shape shape(spec.arity, child);
    shape.push_back(parent);
    std::vector<std::string> axes;
    for (std::size_t c = 0; c < spec.arity; ++c) axes.push_back("in_" + std::to_string(c));
    axes.push_back(l == 0 ? "output" : "parent");

    // Identity between the first child bond and the parent bond, plus noise.
    std::vector<double> v;
    v.reserve(checked_pow(child, spec.arity, 1u << 24, "ttn") * parent);
    const std::size_t inner = [&] {
      std::size_t r = 1;
      for (std::size_t c = 1; c < spec.arity; ++c) r *= child;
      return r;
    }();
    for (std::size_t c0 = 0; c0 < child; ++c0)
      for (std::size_t rest = 0; rest < inner; ++rest)
        for (std::size_t p = 0; p < parent; ++p)
          v.push_back((c0 == p ? 1.0 : 0.0) +
                      (spec.init_std > 0.0 ? spec.init_std * rng.normal() : 0.0));
    Tensor t = Tensor::from_data(shape, std::move(v));

    levels_[l].reserve(count);
    for (std::size_t j = 0; j < count; ++j) {
      levels_[l].push_back(net_.make_node("ttn_" + std::to_string(l) + "_" + std::to_string(j),
                                          shape, axes, NodeRole::Param, Init::copy(t)));
    }
    count *= spec.arity;
  }
  for (std::size_t l = 1; l < spec.depth; ++l)
    for (std::size_t j = 0; j < levels_[l].size(); ++j)
      net_.connect(levels_[l][j], "parent", levels_[l - 1][j / spec.arity],
                   "in_" + std::to_string(j % spec.arity));
  for (const Node& leaf_node : levels_.back())
    for (std::size_t c = 0; c < spec.arity; ++c)
      register_input(leaf_node, "in_" + std::to_string(c));
}

std::size_t Ttn::n_leaves() const { return inputs_.size(); }

graph::Node Ttn::contract() {
  if (data_nodes_.size() != n_leaves())
    fail("ttn: data nodes are missing; run forward or set_data_nodes + add_data");
  // Bottom-up, layer by layer: fold each vertex's children into it, producing
  // one (parent_bond, batch) node per vertex, until the root yields
  // (output, batch).
  std::vector<Node> below;  // results of the level beneath the current one
  for (std::size_t li = levels_.size(); li-- > 0;) {
    const std::vector<Node>& level = levels_[li];
    const bool bottom = (li + 1 == levels_.size());
    std::vector<Node> results;
    results.reserve(level.size());
    for (std::size_t j = 0; j < level.size(); ++j) {
      Node cur = level[j];
      for (std::size_t c = 0; c < spec_.arity; ++c) {
        const Node& child =
            bottom ? data_nodes_[j * spec_.arity + c] : below[j * spec_.arity + c];
        cur = ops::contract_between(cur, child);
      }
      results.push_back(cur);
    }
    below = std::move(results);
  }
  return ops::permute(below.front(), {"batch", "output"});
}

}  // namespace tnkit::models
