#include "tnkit/ops.hpp"

#include <algorithm>
#include <memory>
#include <unordered_set>

#include "ops_internal.hpp"
#include "tnkit/error.hpp"

namespace tnkit::ops {

namespace adops = tnkit::autodiff::ops;
using graph::Axis;
using graph::EdgePtr;
using graph::NodeRole;
using graph::StoreSlot;
using graph::Successor;
using graph::TensorNetwork;

namespace internal {

std::string ids_key(const std::string& tag, const std::vector<Node>& args,
                    const std::string& params) {
  std::string key = tag + "(";
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (i) key += ",";
    key += std::to_string(args[i].id());
  }
  key += ";" + params + ")";
  return key;
}

std::string display_key(const std::string& tag, const std::vector<Node>& args,
                        const std::string& params) {
  std::string key = tag + "(";
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (i) key += ",";
    key += args[i].name();
  }
  key += ";" + params + ")";
  return key;
}

// Positions of the non-stack axes of a node, in axis order: the indexing
// scheme of NodeImpl::slice_edges.
std::vector<std::size_t> non_stack_positions(const Node& n) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < n.axes().size(); ++i) {
    if (n.axes()[i].name != "stack") out.push_back(i);
  }
  return out;
}

// Per-slice edge for axis `axis` of `n` in slice `s`: stack nodes with
// recorded provenance answer from slice_edges, anything else repeats its own
// edge.
EdgePtr slice_edge_for(const Node& n, std::size_t axis, std::size_t s) {
  const auto& prov = n.impl()->slice_edges;
  if (prov.empty()) return n.impl()->edges[axis];
  std::vector<std::size_t> pos = non_stack_positions(n);
  for (std::size_t r = 0; r < pos.size(); ++r) {
    if (pos[r] == axis) {
      if (s < prov.size() && r < prov[s].size()) return prov[s][r];
      return n.impl()->edges[axis];
    }
  }
  return n.impl()->edges[axis];
}

bool has_slice_provenance(const Node& n) { return !n.impl()->slice_edges.empty(); }

std::size_t stack_slice_count(const Node& n) {
  if (!n.impl()->edges.empty() && n.axes()[0].name == "stack") return n.impl()->edges[0]->size;
  detail::fail_state("internal: '", n.name(), "' has no leading stack axis");
}

}  // namespace internal

using internal::display_key;
using internal::has_slice_provenance;
using internal::ids_key;
using internal::slice_edge_for;
using internal::stack_slice_count;

namespace {

TensorNetwork& common_network(const Node& a, const Node& b, const char* op) {
  if (!a.defined() || !b.defined()) detail::fail_arg(op, ": undefined node");
  if (&a.network() != &b.network()) {
    detail::fail_arg(op, ": nodes '", a.name(), "' and '", b.name(),
                     "' belong to different networks");
  }
  return a.network();
}

// --- batched pairwise contraction -------------------------------------------------

// Structural recipe for contracting two tensors with slice-wise matched
// batch axes. Independent of the actual dimension sizes.
struct PairContraction {
  std::vector<std::pair<std::size_t, std::size_t>> batch;       // (a axis, b axis)
  std::vector<std::pair<std::size_t, std::size_t>> contracted;  // (a axis, b axis)
  std::vector<std::size_t> free_a;
  std::vector<std::size_t> free_b;
};

// Contract two variables per the recipe. Output axes: a's surviving axes in
// a's order (batch axes staying in place), then b's surviving axes.
autodiff::Variable contract_pair(const autodiff::Variable& va, const autodiff::Variable& vb,
                                 const PairContraction& pc, const char* op) {
  const Shape& sa = va.shape();
  const Shape& sb = vb.shape();
  for (const auto& [i, j] : pc.contracted) {
    if (sa[i] != sb[j]) {
      detail::fail_arg(op, ": contracted axis size mismatch ", sa[i], " vs ", sb[j]);
    }
  }
  for (const auto& [i, j] : pc.batch) {
    if (sa[i] != sb[j]) {
      detail::fail_arg(op, ": batch axis size mismatch ", sa[i], " vs ", sb[j]);
    }
  }

  std::vector<std::size_t> con_a, con_b;
  for (const auto& [i, j] : pc.contracted) {
    con_a.push_back(i);
    con_b.push_back(j);
  }
  if (pc.batch.empty()) {
    // tensordot already yields (free_a..., free_b...).
    return adops::tensordot(va, vb, con_a, con_b);
  }

  const std::size_t nb = pc.batch.size();
  const std::size_t nfa = pc.free_a.size();
  const std::size_t nfb = pc.free_b.size();
  const std::size_t nc = pc.contracted.size();

  // Scatter permutations into (batch..., free..., contracted...) layouts.
  std::vector<std::size_t> perm_a(sa.size()), perm_b(sb.size());
  for (std::size_t t = 0; t < nb; ++t) {
    perm_a[pc.batch[t].first] = t;
    perm_b[pc.batch[t].second] = t;
  }
  for (std::size_t t = 0; t < nfa; ++t) perm_a[pc.free_a[t]] = nb + t;
  for (std::size_t t = 0; t < nc; ++t) {
    perm_a[pc.contracted[t].first] = nb + nfa + t;
    perm_b[pc.contracted[t].second] = nb + t;
  }
  for (std::size_t t = 0; t < nfb; ++t) perm_b[pc.free_b[t]] = nb + nc + t;

  std::size_t batch_n = 1, fa_n = 1, fb_n = 1, c_n = 1;
  Shape batch_dims, fa_dims, fb_dims;
  for (const auto& [i, j] : pc.batch) {
    batch_n *= sa[i];
    batch_dims.push_back(sa[i]);
  }
  for (std::size_t i : pc.free_a) {
    fa_n *= sa[i];
    fa_dims.push_back(sa[i]);
  }
  for (std::size_t j : pc.free_b) {
    fb_n *= sb[j];
    fb_dims.push_back(sb[j]);
  }
  for (const auto& [i, j] : pc.contracted) c_n *= sa[i];

  autodiff::Variable pa = adops::permute(va, perm_a);
  autodiff::Variable pb = adops::permute(vb, perm_b);
  pa = adops::reshape(pa, {batch_n, fa_n, c_n});
  pb = adops::reshape(pb, {batch_n, c_n, fb_n});
  autodiff::Variable prod = adops::batched_matmul(pa, pb);

  Shape out_shape = batch_dims;
  out_shape.insert(out_shape.end(), fa_dims.begin(), fa_dims.end());
  out_shape.insert(out_shape.end(), fb_dims.begin(), fb_dims.end());
  prod = adops::reshape(prod, out_shape);

  // Current order: (batch pairs..., free_a..., free_b...). Scatter each into
  // its final place: a's survivors in a's axis order, then b's survivors.
  std::vector<std::size_t> a_surv, b_surv;
  {
    std::vector<bool> a_gone(sa.size(), false), b_gone(sb.size(), false);
    for (const auto& [i, j] : pc.contracted) {
      a_gone[i] = true;
      b_gone[j] = true;
    }
    for (const auto& [i, j] : pc.batch) b_gone[j] = true;  // b's matched batch axes merge into a's
    for (std::size_t i = 0; i < sa.size(); ++i)
      if (!a_gone[i]) a_surv.push_back(i);
    for (std::size_t j = 0; j < sb.size(); ++j)
      if (!b_gone[j]) b_surv.push_back(j);
  }
  auto a_target = [&](std::size_t axis) {
    for (std::size_t t = 0; t < a_surv.size(); ++t)
      if (a_surv[t] == axis) return t;
    detail::fail_state("internal: contraction bookkeeping out of sync");
  };
  auto b_target = [&](std::size_t axis) {
    for (std::size_t t = 0; t < b_surv.size(); ++t)
      if (b_surv[t] == axis) return a_surv.size() + t;
    detail::fail_state("internal: contraction bookkeeping out of sync");
  };
  std::vector<std::size_t> final_perm(nb + nfa + nfb);
  for (std::size_t t = 0; t < nb; ++t) final_perm[t] = a_target(pc.batch[t].first);
  for (std::size_t t = 0; t < nfa; ++t) final_perm[nb + t] = a_target(pc.free_a[t]);
  for (std::size_t t = 0; t < nfb; ++t) final_perm[nb + nfa + t] = b_target(pc.free_b[t]);
  bool identity = true;
  for (std::size_t t = 0; t < final_perm.size(); ++t) identity = identity && final_perm[t] == t;
  if (!identity) prod = adops::permute(prod, final_perm);
  return prod;
}

}  // namespace

// --- contract_between ----------------------------------------------------------------

namespace {

struct ContractHints {
  PairContraction pc;
};

}  // namespace

Node contract_between(const Node& a, const Node& b) {
  TensorNetwork& net = common_network(a, b, "contract_between");
  if (a == b) detail::fail_arg("contract_between: cannot contract '", a.name(), "' with itself");

  std::vector<Node> args{a, b};
  std::string key = ids_key("contract", args, "");
  if (Successor* hit = net.find_successor(key)) {
    hit->execute(*hit);
    net.record_step(hit);
    return hit->children[0];
  }

  auto hints = std::make_shared<ContractHints>();
  PairContraction& pc = hints->pc;
  std::vector<bool> a_used(a.rank(), false), b_used(b.rank(), false);

  // Connected edge objects present in both nodes' edge lists are contracted.
  for (std::size_t i = 0; i < a.rank(); ++i) {
    const EdgePtr& ea = a.impl()->edges[i];
    if (!ea->connected) continue;
    for (std::size_t j = 0; j < b.rank(); ++j) {
      if (b_used[j]) continue;
      if (b.impl()->edges[j] == ea) {
        pc.contracted.emplace_back(i, j);
        a_used[i] = true;
        b_used[j] = true;
        break;
      }
    }
  }
  if (pc.contracted.empty()) {
    detail::fail_arg("contract_between: no edge connects '", a.name(), "' and '", b.name(),
                     "'; use tprod for an outer product");
  }

  // Batch-like axes sharing a name are matched slice-wise.
  for (std::size_t i = 0; i < a.rank(); ++i) {
    if (a_used[i] || !axis_matches_batchwise(a.axes()[i])) continue;
    for (std::size_t j = 0; j < b.rank(); ++j) {
      if (b_used[j] || !axis_matches_batchwise(b.axes()[j])) continue;
      if (a.axes()[i].name == b.axes()[j].name) {
        pc.batch.emplace_back(i, j);
        a_used[i] = true;
        b_used[j] = true;
        break;
      }
    }
  }
  for (std::size_t i = 0; i < a.rank(); ++i) {
    if (!a_used[i]) pc.free_a.push_back(i);
  }
  // a's batch axes are survivors too (they stay in a's axis order).
  for (const auto& [i, j] : pc.batch) pc.free_a.push_back(i);
  std::sort(pc.free_a.begin(), pc.free_a.end());
  // ... but contract_pair wants free_a without the batch axes:
  {
    std::vector<std::size_t> fa;
    std::unordered_set<std::size_t> batch_axes;
    for (const auto& [i, j] : pc.batch) batch_axes.insert(i);
    for (std::size_t i : pc.free_a) {
      if (!batch_axes.count(i)) fa.push_back(i);
    }
    pc.free_a = std::move(fa);
  }
  for (std::size_t j = 0; j < b.rank(); ++j) {
    if (!b_used[j]) pc.free_b.push_back(j);
  }

  // Resultant axes/edges: a's survivors (including matched batch axes), then
  // b's unmatched survivors.
  std::vector<Axis> child_axes;
  std::vector<EdgePtr> child_edges;
  std::vector<std::size_t> surv_a, surv_b;
  {
    std::unordered_set<std::size_t> a_con, b_gone;
    for (const auto& [i, j] : pc.contracted) {
      a_con.insert(i);
      b_gone.insert(j);
    }
    for (const auto& [i, j] : pc.batch) b_gone.insert(j);
    for (std::size_t i = 0; i < a.rank(); ++i) {
      if (!a_con.count(i)) {
        surv_a.push_back(i);
        child_axes.push_back(a.axes()[i]);
        child_edges.push_back(a.impl()->edges[i]);
      }
    }
    for (std::size_t j = 0; j < b.rank(); ++j) {
      if (!b_gone.count(j)) {
        surv_b.push_back(j);
        child_axes.push_back(b.axes()[j]);
        child_edges.push_back(b.impl()->edges[j]);
      }
    }
  }

  bool child_is_stack = false;
  for (const Axis& ax : child_axes) {
    if (ax.name == "stack" &&
        (a.role() == NodeRole::Stack || a.role() == NodeRole::ParamStack ||
         b.role() == NodeRole::Stack || b.role() == NodeRole::ParamStack)) {
      child_is_stack = true;
    }
  }
  Node child = net.make_operation_node("contract", child_is_stack ? NodeRole::Stack : NodeRole::Resultant,
                                       child_axes, child_edges);
  if (child_is_stack && (has_slice_provenance(a) || has_slice_provenance(b))) {
    std::size_t n_slices = a.role() == NodeRole::Stack || a.role() == NodeRole::ParamStack
                               ? stack_slice_count(a)
                               : stack_slice_count(b);
    auto& prov = child.impl()->slice_edges;
    prov.resize(n_slices);
    for (std::size_t s = 0; s < n_slices; ++s) {
      for (std::size_t i : surv_a) {
        if (a.axes()[i].name == "stack") continue;
        prov[s].push_back(slice_edge_for(a, i, s));
      }
      for (std::size_t j : surv_b) {
        if (b.axes()[j].name == "stack") continue;
        prov[s].push_back(slice_edge_for(b, j, s));
      }
    }
  }

  Successor s;
  s.op_tag = "contract";
  s.arg_key = key;
  s.display = display_key("contract", args, "");
  s.args = args;
  s.children = {child};
  s.hints = hints;
  s.execute = [&net, a, b, child, hints](Successor&) {
    autodiff::Variable va = net.node_variable(a);
    autodiff::Variable vb = net.node_variable(b);
    net.set_operation_variable(child, contract_pair(va, vb, hints->pc, "contract_between"));
  };
  Successor* added = net.add_successor(std::move(s));
  added->execute(*added);
  net.record_step(added);
  return child;
}

// --- split ------------------------------------------------------------------------------

namespace {

struct SplitHints {
  std::vector<std::size_t> batch_idx, left_idx, right_idx;
  SplitMode mode;
  std::optional<std::size_t> max_rank;
  std::optional<double> cum_percentage;
};

std::string split_params(const std::vector<std::string>& l, const std::vector<std::string>& r,
                         SplitMode mode, std::optional<std::size_t> max_rank,
                         std::optional<double> cum) {
  std::string p = "l=";
  for (const auto& s : l) p += s + "+";
  p += ",r=";
  for (const auto& s : r) p += s + "+";
  p += ",mode=";
  p += (mode == SplitMode::Svd ? "svd" : mode == SplitMode::Svdr ? "svdr" : "qr");
  if (max_rank) p += ",rank=" + std::to_string(*max_rank);
  if (cum) p += ",cum=" + std::to_string(*cum);
  return p;
}

}  // namespace

std::pair<Node, Node> split(const Node& n, const std::vector<std::string>& left_axes,
                            const std::vector<std::string>& right_axes, SplitMode mode,
                            std::optional<std::size_t> max_rank,
                            std::optional<double> cum_percentage) {
  if (!n.defined()) detail::fail_arg("split: undefined node");
  TensorNetwork& net = n.network();
  if (mode == SplitMode::Qr && (max_rank || cum_percentage)) {
    detail::fail_arg("split: qr mode does not truncate (max_rank/cum_percentage given)");
  }

  std::string params = split_params(left_axes, right_axes, mode, max_rank, cum_percentage);
  std::vector<Node> args{n};
  std::string key = ids_key("split", args, params);
  if (Successor* hit = net.find_successor(key)) {
    hit->execute(*hit);
    net.record_step(hit);
    return {hit->children[0], hit->children[1]};
  }

  auto hints = std::make_shared<SplitHints>();
  hints->mode = mode;
  hints->max_rank = max_rank;
  hints->cum_percentage = cum_percentage;

  std::vector<bool> taken(n.rank(), false);
  for (std::size_t i = 0; i < n.rank(); ++i) {
    if (n.axes()[i].is_batch) {
      hints->batch_idx.push_back(i);
      taken[i] = true;
    }
  }
  auto claim = [&](const std::vector<std::string>& names, std::vector<std::size_t>& out) {
    for (const std::string& name : names) {
      std::size_t i = n.axis_index(name);
      if (n.axes()[i].is_batch) {
        detail::fail_arg("split: axis '", name, "' is a batch axis; batch axes are carried, not listed");
      }
      if (taken[i]) detail::fail_arg("split: axis '", name, "' listed twice");
      taken[i] = true;
      out.push_back(i);
    }
  };
  claim(left_axes, hints->left_idx);
  claim(right_axes, hints->right_idx);
  for (std::size_t i = 0; i < n.rank(); ++i) {
    if (!taken[i]) {
      detail::fail_arg("split: axis '", n.axes()[i].name,
                       "' appears in neither the left nor the right list");
    }
  }
  if (hints->left_idx.empty() || hints->right_idx.empty()) {
    detail::fail_arg("split: both axis lists must be non-empty");
  }

  // Children: left = (batch..., left..., bond), right = (batch..., bond, right...).
  std::vector<Axis> left_ax, right_ax;
  std::vector<EdgePtr> left_ed, right_ed;
  for (std::size_t i : hints->batch_idx) {
    left_ax.push_back(n.axes()[i]);
    left_ed.push_back(n.impl()->edges[i]);
    right_ax.push_back(n.axes()[i]);
    right_ed.push_back(n.impl()->edges[i]);
  }
  for (std::size_t i : hints->left_idx) {
    left_ax.push_back(n.axes()[i]);
    left_ed.push_back(n.impl()->edges[i]);
  }
  left_ax.push_back(Axis{"bond", false});
  right_ax.push_back(Axis{"bond", false});
  for (std::size_t i : hints->right_idx) {
    right_ax.push_back(n.axes()[i]);
    right_ed.push_back(n.impl()->edges[i]);
  }

  left_ed.push_back(EdgePtr());   // placeholder, bond edge needs both children
  right_ed.insert(right_ed.begin() + static_cast<std::ptrdiff_t>(hints->batch_idx.size()),
                  EdgePtr());
  Node left = net.make_operation_node("split_left", NodeRole::Resultant, left_ax, left_ed);
  Node right = net.make_operation_node("split_right", NodeRole::Resultant, right_ax, right_ed);
  std::size_t bond_left_pos = hints->batch_idx.size() + hints->left_idx.size();
  std::size_t bond_right_pos = hints->batch_idx.size();
  EdgePtr bond = net.make_bond_edge(left, bond_left_pos, right, bond_right_pos, 0);
  left.impl()->edges[bond_left_pos] = bond;
  right.impl()->edges[bond_right_pos] = bond;

  Successor s;
  s.op_tag = "split";
  s.arg_key = key;
  s.display = display_key("split", args, params);
  s.args = args;
  s.children = {left, right};
  s.hints = hints;
  s.execute = [&net, n, left, right, bond, hints](Successor&) {
    autodiff::Variable v = net.node_variable(n);
    if (autodiff::grad_enabled() && v.requires_grad()) {
      detail::fail_state("split: not differentiable; detach or disable gradients first");
    }
    const Tensor& t = v.value();
    const Shape& shape = t.shape();

    std::size_t nb = hints->batch_idx.size();
    std::vector<std::size_t> perm(shape.size());
    Shape batch_dims, left_dims, right_dims;
    for (std::size_t k = 0; k < nb; ++k) {
      perm[hints->batch_idx[k]] = k;
      batch_dims.push_back(shape[hints->batch_idx[k]]);
    }
    for (std::size_t k = 0; k < hints->left_idx.size(); ++k) {
      perm[hints->left_idx[k]] = nb + k;
      left_dims.push_back(shape[hints->left_idx[k]]);
    }
    for (std::size_t k = 0; k < hints->right_idx.size(); ++k) {
      perm[hints->right_idx[k]] = nb + hints->left_idx.size() + k;
      right_dims.push_back(shape[hints->right_idx[k]]);
    }
    std::size_t b_n = 1, l_n = 1, r_n = 1;
    for (std::size_t d : batch_dims) b_n *= d;
    for (std::size_t d : left_dims) l_n *= d;
    for (std::size_t d : right_dims) r_n *= d;

    Tensor grouped = tnkit::permute(t, perm).reshaped({b_n, l_n, r_n});

    struct Factored {
      Tensor l, r;
      std::size_t k;
    };
    std::vector<Factored> per_slice;
    per_slice.reserve(b_n);
    std::size_t k_common = 0;
    for (std::size_t b = 0; b < b_n; ++b) {
      Tensor m = grouped.slice_leading(b).reshaped({l_n, r_n});
      if (hints->mode == SplitMode::Qr) {
        auto [q, r] = tnkit::qr(m);
        per_slice.push_back({q, r, q.dim(1)});
      } else {
        SvdResult f = tnkit::svd(m, hints->max_rank, hints->cum_percentage);
        std::size_t k = f.s.size();
        std::vector<double> lw(l_n * k), rw(k * r_n);
        for (std::size_t i = 0; i < l_n; ++i) {
          for (std::size_t c = 0; c < k; ++c) {
            double w = hints->mode == SplitMode::Svd ? std::sqrt(f.s[c]) : 1.0;
            lw[i * k + c] = f.u[i * k + c] * w;
          }
        }
        for (std::size_t c = 0; c < k; ++c) {
          double w = hints->mode == SplitMode::Svd ? std::sqrt(f.s[c]) : f.s[c];
          for (std::size_t j = 0; j < r_n; ++j) rw[c * r_n + j] = f.vt[c * r_n + j] * w;
        }
        per_slice.push_back({Tensor::from_data({l_n, k}, std::move(lw)),
                             Tensor::from_data({k, r_n}, std::move(rw)), k});
      }
      k_common = std::max(k_common, per_slice.back().k);
    }

    // Assemble with a common bond size, zero-padding narrower slices.
    std::vector<double> ldata(b_n * l_n * k_common, 0.0);
    std::vector<double> rdata(b_n * k_common * r_n, 0.0);
    for (std::size_t b = 0; b < b_n; ++b) {
      const Factored& f = per_slice[b];
      for (std::size_t i = 0; i < l_n; ++i) {
        for (std::size_t c = 0; c < f.k; ++c) {
          ldata[(b * l_n + i) * k_common + c] = f.l[i * f.k + c];
        }
      }
      for (std::size_t c = 0; c < f.k; ++c) {
        for (std::size_t j = 0; j < r_n; ++j) {
          rdata[(b * k_common + c) * r_n + j] = f.r[c * r_n + j];
        }
      }
    }
    Shape lshape = batch_dims;
    lshape.insert(lshape.end(), left_dims.begin(), left_dims.end());
    lshape.push_back(k_common);
    Shape rshape = batch_dims;
    rshape.push_back(k_common);
    rshape.insert(rshape.end(), right_dims.begin(), right_dims.end());

    bond->size = k_common;
    net.set_operation_variable(left, autodiff::Variable(
        Tensor::from_data(std::move(lshape), std::move(ldata)), false));
    net.set_operation_variable(right, autodiff::Variable(
        Tensor::from_data(std::move(rshape), std::move(rdata)), false));
  };
  Successor* added = net.add_successor(std::move(s));
  added->execute(*added);
  net.record_step(added);
  return {left, right};
}

// --- stack -------------------------------------------------------------------------------

Node stack(const std::vector<Node>& nodes) {
  if (nodes.empty()) detail::fail_arg("stack: empty node list");
  TensorNetwork& net = nodes[0].network();
  for (const Node& n : nodes) {
    if (!n.defined()) detail::fail_arg("stack: undefined node");
    if (&n.network() != &net) detail::fail_arg("stack: nodes from different networks");
  }
  const std::vector<Axis>& ax0 = nodes[0].axes();
  Shape shape0 = nodes[0].shape();
  for (const Node& n : nodes) {
    if (n.shape() != shape0) {
      detail::fail_arg("stack: shape mismatch between '", nodes[0].name(), "' ",
                       shape_str(shape0), " and '", n.name(), "' ", shape_str(n.shape()));
    }
    for (std::size_t i = 0; i < ax0.size(); ++i) {
      if (n.axes()[i].name != ax0[i].name) {
        detail::fail_arg("stack: axis-name mismatch on '", n.name(), "' (expected '", ax0[i].name,
                         "', got '", n.axes()[i].name, "')");
      }
    }
  }

  std::string key = ids_key("stack", nodes, "");
  if (Successor* hit = net.find_successor(key)) {
    hit->execute(*hit);
    net.record_step(hit);
    return hit->children[0];
  }

  bool all_param = true;
  for (const Node& n : nodes) all_param = all_param && n.role() == NodeRole::Param;

  std::vector<Axis> child_axes{Axis{"stack", false}};
  std::vector<EdgePtr> child_edges{EdgePtr()};
  Node child = net.make_operation_node("stack", all_param ? NodeRole::ParamStack : NodeRole::Stack,
                                       child_axes, child_edges);
  child.impl()->axes.reserve(1 + ax0.size());
  for (std::size_t i = 0; i < ax0.size(); ++i) {
    child.impl()->axes.push_back(ax0[i]);
    child.impl()->edges.push_back(net.make_dangling_edge(child, 1 + i, shape0[i]));
  }
  child.impl()->edges[0] = net.make_dangling_edge(child, 0, nodes.size());
  for (const Node& n : nodes) child.impl()->slice_edges.push_back(n.impl()->edges);

  Successor s;
  s.op_tag = "stack";
  s.arg_key = key;
  s.display = display_key("stack", nodes, "");
  s.args = nodes;
  s.children = {child};
  s.execute = [&net, nodes, child, all_param](Successor& self) {
    // Re-pointed parameters: the stacked buffer *is* the live parameter; as
    // long as every input still aliases slice i of it, there is nothing to do.
    if (self.repointed) {
      bool intact = true;
      for (std::size_t i = 0; i < nodes.size(); ++i) {
        const StoreSlot* slot = net.slot_of(nodes[i]);
        intact = intact && slot && !slot->owns &&
                 slot->alias_target == child.impl()->address && slot->alias_index == i;
      }
      if (intact) return;
      self.repointed = false;  // an alias was broken (set_tensor); rebuild below
    }

    bool distinct_addresses = true;
    {
      std::unordered_set<std::string> seen;
      for (const Node& n : nodes) {
        if (n.impl()->address.empty() || !seen.insert(n.impl()->address).second) {
          distinct_addresses = false;
        }
      }
    }
    if (net.auto_stack && all_param && distinct_addresses) {
      std::vector<Tensor> parts;
      parts.reserve(nodes.size());
      for (const Node& n : nodes) parts.push_back(net.get_tensor(n));
      autodiff::Variable stacked(stack_tensors(parts), /*requires_grad=*/true);
      net.repoint_params_into_stack(nodes, child, std::move(stacked));
      self.repointed = true;
      self.stamps.clear();
      return;
    }

    bool any_grad = false;
    std::vector<autodiff::Variable> vars;
    vars.reserve(nodes.size());
    for (const Node& n : nodes) {
      vars.push_back(net.node_variable(n));
      any_grad = any_grad || vars.back().requires_grad();
    }
    if (autodiff::grad_enabled() && any_grad) {
      net.set_operation_variable(child, adops::stack(vars));
      self.stamps.clear();
      return;
    }

    // Value path. With auto_stack on and only param/leaf inputs, reuse the
    // buffer while every (address, version) stamp is unchanged.
    bool stampable = net.auto_stack;
    for (const Node& n : nodes) {
      stampable = stampable && (n.role() == NodeRole::Param || n.role() == NodeRole::Leaf);
    }
    std::vector<std::pair<std::string, std::uint64_t>> stamps;
    if (stampable) {
      stamps.reserve(nodes.size());
      for (const Node& n : nodes) {
        stamps.emplace_back(n.impl()->address, net.slot_version(n));
      }
      if (!self.stamps.empty() && self.stamps == stamps && child.has_tensor()) return;
    }
    std::vector<Tensor> parts;
    parts.reserve(nodes.size());
    for (const autodiff::Variable& v : vars) parts.push_back(v.value());
    net.set_operation_variable(child, autodiff::Variable(stack_tensors(parts), false));
    self.stamps = stampable ? stamps : std::vector<std::pair<std::string, std::uint64_t>>{};
  };
  Successor* added = net.add_successor(std::move(s));
  added->execute(*added);
  net.record_step(added);
  return child;
}

// --- unbind ------------------------------------------------------------------------------

std::vector<Node> unbind(const Node& stack_node) {
  if (!stack_node.defined()) detail::fail_arg("unbind: undefined node");
  TensorNetwork& net = stack_node.network();
  if (stack_node.role() != NodeRole::Stack && stack_node.role() != NodeRole::ParamStack) {
    detail::fail_arg("unbind: '", stack_node.name(), "' is not a stack node (role ",
                     graph::role_name(stack_node.role()), ")");
  }
  if (stack_node.axes().empty() || stack_node.axes()[0].name != "stack") {
    detail::fail_arg("unbind: '", stack_node.name(), "' has no leading stack axis");
  }

  std::vector<Node> args{stack_node};
  std::string key = ids_key("unbind", args, "");
  if (Successor* hit = net.find_successor(key)) {
    hit->execute(*hit);
    net.record_step(hit);
    return hit->children;
  }

  std::size_t n_slices = stack_slice_count(stack_node);
  std::vector<Node> children;
  children.reserve(n_slices);
  for (std::size_t i = 0; i < n_slices; ++i) {
    std::vector<Axis> axes(stack_node.axes().begin() + 1, stack_node.axes().end());
    std::vector<EdgePtr> edges;
    edges.reserve(axes.size());
    bool prov = has_slice_provenance(stack_node) && i < stack_node.impl()->slice_edges.size();
    for (std::size_t r = 0; r < axes.size(); ++r) {
      if (prov && r < stack_node.impl()->slice_edges[i].size()) {
        edges.push_back(stack_node.impl()->slice_edges[i][r]);
      } else {
        edges.push_back(EdgePtr());
      }
    }
    Node c = net.make_operation_node("unbind", NodeRole::Resultant, axes, edges);
    for (std::size_t r = 0; r < axes.size(); ++r) {
      if (!c.impl()->edges[r]) {
        c.impl()->edges[r] = net.make_dangling_edge(c, r, stack_node.impl()->edges[r + 1]->size);
      }
    }
    children.push_back(c);
  }

  Successor s;
  s.op_tag = "unbind";
  s.arg_key = key;
  s.display = display_key("unbind", args, "");
  s.args = args;
  s.children = children;
  s.execute = [&net, stack_node, children](Successor&) {
    autodiff::Variable v = net.node_variable(stack_node);
    if (v.value().dim(0) != children.size()) {
      detail::fail_state("unbind: stack size changed from ", children.size(), " to ",
                         v.value().dim(0), " after the successor was built");
    }
    for (std::size_t i = 0; i < children.size(); ++i) {
      net.set_operation_variable(children[i],
                                 adops::unbind_slice(v, i, /*view=*/net.auto_unbind));
    }
  };
  Successor* added = net.add_successor(std::move(s));
  added->execute(*added);
  net.record_step(added);
  return added->children;
}

// --- permute / tprod / arithmetic ----------------------------------------------------------

Node permute(const Node& n, const std::vector<std::string>& axis_order) {
  if (!n.defined()) detail::fail_arg("permute: undefined node");
  TensorNetwork& net = n.network();
  if (axis_order.size() != n.rank()) {
    detail::fail_arg("permute: ", axis_order.size(), " names for rank ", n.rank());
  }
  std::string params;
  for (const auto& name : axis_order) params += name + "+";
  std::vector<Node> args{n};
  std::string key = ids_key("permute", args, params);
  if (Successor* hit = net.find_successor(key)) {
    hit->execute(*hit);
    net.record_step(hit);
    return hit->children[0];
  }

  // axis_order lists the result's axes; build the scatter permutation.
  std::vector<std::size_t> old_of;
  std::vector<bool> used(n.rank(), false);
  for (const std::string& name : axis_order) {
    std::size_t i = n.axis_index(name);
    if (used[i]) detail::fail_arg("permute: axis '", name, "' listed twice");
    used[i] = true;
    old_of.push_back(i);
  }
  auto perm = std::make_shared<std::vector<std::size_t>>(n.rank());
  std::vector<Axis> axes(n.rank());
  std::vector<EdgePtr> edges(n.rank());
  for (std::size_t new_pos = 0; new_pos < old_of.size(); ++new_pos) {
    (*perm)[old_of[new_pos]] = new_pos;
    axes[new_pos] = n.axes()[old_of[new_pos]];
    edges[new_pos] = n.impl()->edges[old_of[new_pos]];
  }
  Node child = net.make_operation_node("permute", NodeRole::Resultant, axes, edges);

  Successor s;
  s.op_tag = "permute";
  s.arg_key = key;
  s.display = display_key("permute", args, params);
  s.args = args;
  s.children = {child};
  s.execute = [&net, n, child, perm](Successor&) {
    net.set_operation_variable(child, adops::permute(net.node_variable(n), *perm));
  };
  Successor* added = net.add_successor(std::move(s));
  added->execute(*added);
  net.record_step(added);
  return child;
}

Node tprod(const Node& a, const Node& b) {
  TensorNetwork& net = common_network(a, b, "tprod");
  if (a == b) detail::fail_arg("tprod: cannot multiply '", a.name(), "' with itself");
  for (const EdgePtr& ea : a.impl()->edges) {
    if (!ea->connected) continue;
    for (const EdgePtr& eb : b.impl()->edges) {
      if (ea == eb) {
        detail::fail_arg("tprod: '", a.name(), "' and '", b.name(),
                         "' are connected; use contract_between");
      }
    }
  }
  std::vector<Node> args{a, b};
  std::string key = ids_key("tprod", args, "");
  if (Successor* hit = net.find_successor(key)) {
    hit->execute(*hit);
    net.record_step(hit);
    return hit->children[0];
  }
  std::vector<Axis> axes = a.axes();
  axes.insert(axes.end(), b.axes().begin(), b.axes().end());
  std::vector<EdgePtr> edges = a.impl()->edges;
  edges.insert(edges.end(), b.impl()->edges.begin(), b.impl()->edges.end());
  Node child = net.make_operation_node("tprod", NodeRole::Resultant, axes, edges);

  Successor s;
  s.op_tag = "tprod";
  s.arg_key = key;
  s.display = display_key("tprod", args, "");
  s.args = args;
  s.children = {child};
  s.execute = [&net, a, b, child](Successor&) {
    net.set_operation_variable(child,
                               adops::outer(net.node_variable(a), net.node_variable(b)));
  };
  Successor* added = net.add_successor(std::move(s));
  added->execute(*added);
  net.record_step(added);
  return child;
}

namespace {

Node elementwise_node_op(const char* tag, const Node& a, const Node& b,
                         autodiff::Variable (*fn)(const autodiff::Variable&,
                                                  const autodiff::Variable&)) {
  TensorNetwork& net = common_network(a, b, tag);
  std::vector<Node> args{a, b};
  std::string key = ids_key(tag, args, "");
  if (Successor* hit = net.find_successor(key)) {
    hit->execute(*hit);
    net.record_step(hit);
    return hit->children[0];
  }
  // The resultant mixes both inputs entry-wise, so it inherits neither input's
  // connections: fresh dangling edges, axis names from the first argument.
  std::vector<Axis> axes = a.axes();
  std::vector<EdgePtr> edges(a.rank());
  Node child = net.make_operation_node(tag, NodeRole::Resultant, axes, edges);
  Shape shape = a.shape();
  for (std::size_t i = 0; i < a.rank(); ++i) {
    child.impl()->edges[i] = net.make_dangling_edge(child, i, shape[i]);
  }

  Successor s;
  s.op_tag = tag;
  s.arg_key = key;
  s.display = display_key(tag, args, "");
  s.args = args;
  s.children = {child};
  s.execute = [&net, a, b, child, fn](Successor&) {
    net.set_operation_variable(child, fn(net.node_variable(a), net.node_variable(b)));
  };
  Successor* added = net.add_successor(std::move(s));
  added->execute(*added);
  net.record_step(added);
  return child;
}

}  // namespace

Node add(const Node& a, const Node& b) { return elementwise_node_op("add", a, b, &adops::add); }
Node sub(const Node& a, const Node& b) { return elementwise_node_op("sub", a, b, &adops::sub); }
Node mul(const Node& a, const Node& b) { return elementwise_node_op("mul", a, b, &adops::mul); }
Node div(const Node& a, const Node& b) { return elementwise_node_op("div", a, b, &adops::div); }

}  // namespace tnkit::ops
