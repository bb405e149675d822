#include <algorithm>
#include <cctype>
#include <map>
#include <memory>
#include <unordered_set>

#include "ops_internal.hpp"
#include "tnkit/error.hpp"
#include "tnkit/ops.hpp"

namespace tnkit::ops {

namespace adops = tnkit::autodiff::ops;
using graph::Axis;
using graph::EdgePtr;
using graph::NodeRole;
using graph::Successor;
using graph::TensorNetwork;
using internal::display_key;
using internal::ids_key;
using internal::slice_edge_for;

namespace {

struct EinsumSpec {
  std::vector<std::string> inputs;  // one subscript string per node
  std::string output;
};

EinsumSpec parse_spec(const std::string& spec) {
  EinsumSpec out;
  std::size_t arrow = spec.find("->");
  if (arrow == std::string::npos) {
    detail::fail_arg("einsum: spec '", spec, "' is missing '->'");
  }
  std::string lhs = spec.substr(0, arrow);
  out.output = spec.substr(arrow + 2);
  std::string cur;
  for (char c : lhs) {
    if (c == ',') {
      out.inputs.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.inputs.push_back(cur);
  auto check_letters = [&spec](const std::string& s) {
    for (char c : s) {
      if (!std::isalpha(static_cast<unsigned char>(c))) {
        detail::fail_arg("einsum: spec '", spec, "' contains non-letter index '",
                         std::string(1, c), "'");
      }
    }
  };
  for (const std::string& s : out.inputs) check_letters(s);
  check_letters(out.output);
  {
    std::unordered_set<char> seen;
    for (char c : out.output) {
      if (!seen.insert(c).second) {
        detail::fail_arg("einsum: output index '", std::string(1, c), "' repeated");
      }
    }
  }
  return out;
}

// One occurrence of an index letter: which node, which axis.
struct Occurrence {
  std::size_t node;
  std::size_t axis;
};

// Full structural recipe: pairwise merges left-to-right, then summed-out
// axis positions (descending), then the final scatter permutation.
struct EinsumHints {
  // Merge step t combines the running result with input t+1.
  struct Merge {
    std::vector<std::pair<std::size_t, std::size_t>> batch;       // (cur pos, rhs axis)
    std::vector<std::pair<std::size_t, std::size_t>> contracted;  // (cur pos, rhs axis)
    std::vector<std::size_t> free_cur, free_rhs;
  };
  std::vector<Merge> merges;
  std::vector<std::size_t> sum_out;        // positions, descending
  std::vector<std::size_t> final_perm;     // scatter; empty = identity
};

autodiff::Variable run_einsum(TensorNetwork& net, const std::vector<Node>& nodes,
                              const EinsumHints& hints) {
  autodiff::Variable cur = net.node_variable(nodes[0]);
  for (std::size_t t = 0; t < hints.merges.size(); ++t) {
    const EinsumHints::Merge& m = hints.merges[t];
    autodiff::Variable rhs = net.node_variable(nodes[t + 1]);
    std::vector<std::size_t> con_a, con_b;
    for (const auto& [i, j] : m.contracted) {
      con_a.push_back(i);
      con_b.push_back(j);
      if (cur.shape()[i] != rhs.shape()[j]) {
        detail::fail_arg("einsum: contracted axis size mismatch ", cur.shape()[i], " vs ",
                         rhs.shape()[j]);
      }
    }
    if (m.batch.empty()) {
      cur = adops::tensordot(cur, rhs, con_a, con_b);
      continue;
    }
    const Shape& sa = cur.shape();
    const Shape& sb = rhs.shape();
    for (const auto& [i, j] : m.batch) {
      if (sa[i] != sb[j]) {
        detail::fail_arg("einsum: batch axis size mismatch ", sa[i], " vs ", sb[j]);
      }
    }
    const std::size_t nb = m.batch.size();
    const std::size_t nfa = m.free_cur.size();
    const std::size_t nfb = m.free_rhs.size();
    const std::size_t nc = m.contracted.size();
    std::vector<std::size_t> perm_a(sa.size()), perm_b(sb.size());
    for (std::size_t t2 = 0; t2 < nb; ++t2) {
      perm_a[m.batch[t2].first] = t2;
      perm_b[m.batch[t2].second] = t2;
    }
    for (std::size_t t2 = 0; t2 < nfa; ++t2) perm_a[m.free_cur[t2]] = nb + t2;
    for (std::size_t t2 = 0; t2 < nc; ++t2) {
      perm_a[m.contracted[t2].first] = nb + nfa + t2;
      perm_b[m.contracted[t2].second] = nb + t2;
    }
    for (std::size_t t2 = 0; t2 < nfb; ++t2) perm_b[m.free_rhs[t2]] = nb + nc + t2;

    std::size_t batch_n = 1, fa_n = 1, fb_n = 1, c_n = 1;
    Shape batch_dims, fa_dims, fb_dims;
    for (const auto& [i, j] : m.batch) {
      batch_n *= sa[i];
      batch_dims.push_back(sa[i]);
    }
    for (std::size_t i : m.free_cur) {
      fa_n *= sa[i];
      fa_dims.push_back(sa[i]);
    }
    for (std::size_t j : m.free_rhs) {
      fb_n *= sb[j];
      fb_dims.push_back(sb[j]);
    }
    for (const auto& [i, j] : m.contracted) c_n *= sa[i];

    autodiff::Variable pa = adops::permute(cur, perm_a);
    autodiff::Variable pb = adops::permute(rhs, perm_b);
    pa = adops::reshape(pa, {batch_n, fa_n, c_n});
    pb = adops::reshape(pb, {batch_n, c_n, fb_n});
    autodiff::Variable prod = adops::batched_matmul(pa, pb);
    Shape out_shape = batch_dims;
    out_shape.insert(out_shape.end(), fa_dims.begin(), fa_dims.end());
    out_shape.insert(out_shape.end(), fb_dims.begin(), fb_dims.end());
    cur = adops::reshape(prod, out_shape);
    // Order is (batch..., free_cur..., free_rhs...): exactly the running
    // letter order the hint builder tracks, so no per-merge permute.
  }
  for (std::size_t pos : hints.sum_out) cur = adops::sum_over_axis(cur, pos);
  if (!hints.final_perm.empty()) cur = adops::permute(cur, hints.final_perm);
  return cur;
}

}  // namespace

Node einsum(const std::string& spec, const std::vector<Node>& nodes) {
  if (nodes.empty()) detail::fail_arg("einsum: no nodes");
  TensorNetwork& net = nodes[0].network();
  for (const Node& n : nodes) {
    if (!n.defined()) detail::fail_arg("einsum: undefined node");
    if (&n.network() != &net) detail::fail_arg("einsum: nodes from different networks");
  }

  std::string key = ids_key("einsum", nodes, spec);
  if (Successor* hit = net.find_successor(key)) {
    hit->execute(*hit);
    net.record_step(hit);
    return hit->children[0];
  }

  EinsumSpec parsed = parse_spec(spec);
  if (parsed.inputs.size() != nodes.size()) {
    detail::fail_arg("einsum: spec has ", parsed.inputs.size(), " inputs for ", nodes.size(),
                     " nodes");
  }
  for (std::size_t t = 0; t < nodes.size(); ++t) {
    if (parsed.inputs[t].size() != nodes[t].rank()) {
      detail::fail_arg("einsum: subscript '", parsed.inputs[t], "' has ",
                       parsed.inputs[t].size(), " indices but '", nodes[t].name(),
                       "' has rank ", nodes[t].rank());
    }
    std::unordered_set<char> seen;
    for (char c : parsed.inputs[t]) {
      if (!seen.insert(c).second) {
        detail::fail_arg("einsum: index '", std::string(1, c),
                         "' repeated within one subscript ('", parsed.inputs[t],
                         "'); diagonals are not supported");
      }
    }
  }

  // Classify letters.
  std::map<char, std::vector<Occurrence>> where;
  for (std::size_t t = 0; t < nodes.size(); ++t) {
    for (std::size_t a = 0; a < parsed.inputs[t].size(); ++a) {
      where[parsed.inputs[t][a]].push_back({t, a});
    }
  }
  std::map<char, bool> is_batch_letter;
  for (const auto& [c, occ] : where) {
    bool all_batchwise = true;
    std::size_t size0 = nodes[occ[0].node].shape()[occ[0].axis];
    for (const Occurrence& o : occ) {
      all_batchwise = all_batchwise && axis_matches_batchwise(nodes[o.node].axes()[o.axis]);
      if (nodes[o.node].shape()[o.axis] != size0) {
        detail::fail_arg("einsum: index '", std::string(1, c), "' spans sizes ", size0, " and ",
                         nodes[o.node].shape()[o.axis]);
      }
    }
    is_batch_letter[c] = all_batchwise;
    bool in_output = parsed.output.find(c) != std::string::npos;
    if (all_batchwise) {
      if (!in_output) {
        detail::fail_arg("einsum: batch index '", std::string(1, c),
                         "' must appear in the output");
      }
    } else if (occ.size() == 2) {
      const Node& na = nodes[occ[0].node];
      const Node& nb = nodes[occ[1].node];
      const EdgePtr& ea = na.impl()->edges[occ[0].axis];
      if (!ea->connected || nb.impl()->edges[occ[1].axis] != ea) {
        detail::fail_arg("einsum: repeated index '", std::string(1, c), "' pairs axes of '",
                         na.name(), "' and '", nb.name(), "' that are not connected");
      }
      if (in_output) {
        detail::fail_arg("einsum: contracted index '", std::string(1, c),
                         "' cannot appear in the output");
      }
    } else if (occ.size() > 2) {
      detail::fail_arg("einsum: index '", std::string(1, c), "' appears ", occ.size(),
                       " times; non-batch indices may appear at most twice");
    }
  }
  for (char c : parsed.output) {
    if (!where.count(c)) {
      detail::fail_arg("einsum: output index '", std::string(1, c), "' not among the inputs");
    }
  }

  // Build the merge plan, tracking the running letter order.
  auto hints = std::make_shared<EinsumHints>();
  std::string cur_letters = parsed.inputs[0];
  for (std::size_t t = 1; t < nodes.size(); ++t) {
    const std::string& rhs = parsed.inputs[t];
    EinsumHints::Merge m;
    std::vector<bool> cur_used(cur_letters.size(), false), rhs_used(rhs.size(), false);
    for (std::size_t i = 0; i < cur_letters.size(); ++i) {
      std::size_t j = rhs.find(cur_letters[i]);
      if (j == std::string::npos) continue;
      if (is_batch_letter[cur_letters[i]]) {
        m.batch.emplace_back(i, j);
      } else {
        m.contracted.emplace_back(i, j);
      }
      cur_used[i] = true;
      rhs_used[j] = true;
    }
    for (std::size_t i = 0; i < cur_letters.size(); ++i) {
      if (!cur_used[i]) m.free_cur.push_back(i);
    }
    for (std::size_t j = 0; j < rhs.size(); ++j) {
      if (!rhs_used[j]) m.free_rhs.push_back(j);
    }
    // Result letter order matches run_einsum's output layout.
    std::string next;
    if (m.batch.empty()) {
      for (std::size_t i : m.free_cur) next += cur_letters[i];
      for (std::size_t j : m.free_rhs) next += rhs[j];
    } else {
      for (const auto& [i, j] : m.batch) next += cur_letters[i];
      for (std::size_t i : m.free_cur) next += cur_letters[i];
      for (std::size_t j : m.free_rhs) next += rhs[j];
    }
    hints->merges.push_back(std::move(m));
    cur_letters = std::move(next);
  }
  // Sum out surviving letters absent from the output (descending positions).
  for (std::size_t i = cur_letters.size(); i-- > 0;) {
    if (parsed.output.find(cur_letters[i]) == std::string::npos) {
      hints->sum_out.push_back(i);
      cur_letters.erase(i, 1);
    }
  }
  if (cur_letters != parsed.output) {
    hints->final_perm.resize(cur_letters.size());
    for (std::size_t i = 0; i < cur_letters.size(); ++i) {
      hints->final_perm[i] = parsed.output.find(cur_letters[i]);
    }
  }

  // Resultant axes in output order, inheriting each letter's first
  // occurrence's axis and edge.
  std::vector<Axis> child_axes;
  std::vector<EdgePtr> child_edges;
  for (char c : parsed.output) {
    const Occurrence& o = where[c][0];
    child_axes.push_back(nodes[o.node].axes()[o.axis]);
    child_edges.push_back(nodes[o.node].impl()->edges[o.axis]);
  }
  bool child_is_stack = false;
  for (std::size_t i = 0; i < child_axes.size(); ++i) {
    if (child_axes[i].name != "stack") continue;
    for (const Node& n : nodes) {
      if (n.role() == NodeRole::Stack || n.role() == NodeRole::ParamStack) child_is_stack = true;
    }
  }
  Node child = net.make_operation_node(
      "einsum", child_is_stack ? NodeRole::Stack : NodeRole::Resultant, child_axes, child_edges);
  if (child_is_stack) {
    std::size_t n_slices = 0;
    bool any_prov = false;
    for (const Node& n : nodes) {
      if (n.role() == NodeRole::Stack || n.role() == NodeRole::ParamStack) {
        n_slices = n.impl()->edges[0]->size;
        any_prov = any_prov || !n.impl()->slice_edges.empty();
      }
    }
    if (any_prov && n_slices > 0) {
      auto& prov = child.impl()->slice_edges;
      prov.resize(n_slices);
      for (std::size_t s = 0; s < n_slices; ++s) {
        for (char c : parsed.output) {
          const Occurrence& o = where[c][0];
          if (nodes[o.node].axes()[o.axis].name == "stack") continue;
          prov[s].push_back(slice_edge_for(nodes[o.node], o.axis, s));
        }
      }
    }
  }

  Successor s;
  s.op_tag = "einsum";
  s.arg_key = key;
  s.display = display_key("einsum", nodes, spec);
  s.args = nodes;
  s.children = {child};
  s.hints = hints;
  s.execute = [&net, nodes, child, hints](Successor&) {
    net.set_operation_variable(child, run_einsum(net, nodes, *hints));
  };
  Successor* added = net.add_successor(std::move(s));
  added->execute(*added);
  net.record_step(added);
  return child;
}

std::vector<Node> stacked_einsum(const std::string& spec,
                                 const std::vector<std::vector<Node>>& node_lists) {
  if (node_lists.empty()) detail::fail_arg("stacked_einsum: no node lists");
  std::size_t len = node_lists[0].size();
  if (len == 0) detail::fail_arg("stacked_einsum: empty node list");
  for (const auto& list : node_lists) {
    if (list.size() != len) {
      detail::fail_arg("stacked_einsum: list lengths differ (", len, " vs ", list.size(), ")");
    }
  }

  EinsumSpec parsed = parse_spec(spec);
  if (parsed.inputs.size() != node_lists.size()) {
    detail::fail_arg("stacked_einsum: spec has ", parsed.inputs.size(), " inputs for ",
                     node_lists.size(), " lists");
  }
  std::unordered_set<char> used;
  for (const std::string& s : parsed.inputs) used.insert(s.begin(), s.end());
  used.insert(parsed.output.begin(), parsed.output.end());
  char stack_letter = 0;
  const std::string alphabet =
      "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ";
  for (char c : alphabet) {
    if (!used.count(c)) {
      stack_letter = c;
      break;
    }
  }
  if (!stack_letter) detail::fail_arg("stacked_einsum: no free index letter for the stack axis");

  std::vector<Node> stacks;
  stacks.reserve(node_lists.size());
  for (const auto& list : node_lists) stacks.push_back(stack(list));

  // Repeated non-batch letters name axes that were connected between the
  // original nodes; mirror those connections between the stacks (once).
  std::map<char, std::vector<Occurrence>> where;
  for (std::size_t t = 0; t < parsed.inputs.size(); ++t) {
    for (std::size_t a = 0; a < parsed.inputs[t].size(); ++a) {
      if (parsed.inputs[t].size() != node_lists[t][0].rank()) {
        detail::fail_arg("stacked_einsum: subscript '", parsed.inputs[t], "' has ",
                         parsed.inputs[t].size(), " indices but the nodes of list ", t,
                         " have rank ", node_lists[t][0].rank());
      }
      where[parsed.inputs[t][a]].push_back({t, a});
    }
  }
  for (const auto& [c, occ] : where) {
    if (occ.size() != 2) continue;
    bool batchwise = true;
    for (const Occurrence& o : occ) {
      batchwise =
          batchwise && axis_matches_batchwise(node_lists[o.node][0].axes()[o.axis]);
    }
    if (batchwise) continue;
    Node sa = stacks[occ[0].node];
    Node sb = stacks[occ[1].node];
    const EdgePtr& ea = sa.impl()->edges[occ[0].axis + 1];
    const EdgePtr& eb = sb.impl()->edges[occ[1].axis + 1];
    if (!ea->connected && !eb->connected) {
      sa.network().connect(sa, sa.axes()[occ[0].axis + 1].name, sb,
                           sb.axes()[occ[1].axis + 1].name);
    }
  }

  std::string inner = "";
  for (std::size_t t = 0; t < parsed.inputs.size(); ++t) {
    if (t) inner += ",";
    inner += stack_letter + parsed.inputs[t];
  }
  inner += "->";
  inner += stack_letter + parsed.output;
  Node combined = einsum(inner, stacks);
  return unbind(combined);
}

}  // namespace tnkit::ops
