#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tnkit/network.hpp"

// Node-level operations. Every operation caches a Successor in the owning
// network keyed by (op tag, argument node ids, frozen parameters): the first
// call validates, precomputes structural hints and creates the resultant
// node(s); later calls re-execute the cached recipe and only replace the
// resultant tensors. While the network is tracing, each execution is appended
// to the trace plan.
//
// Note: the auto_stack / auto_unbind flags are consulted when a successor
// first executes; toggle them only on a freshly reset() network.
namespace tnkit::ops {

using graph::Node;

enum class SplitMode { Svd, Svdr, Qr };

// Contract all edges connecting a and b (error when there are none — use
// tprod for explicit outer products). Batch-like axes present in both nodes
// under the same name are matched slice-wise. The resultant carries a's
// surviving axes, then b's.
Node contract_between(const Node& a, const Node& b);

// Factor a node into (left, right) across the given axis-name partition.
// left = left_axes + bond, right = bond + right_axes; batch axes (excluded
// from both lists) are carried leading on both children. Truncation applies
// to svd/svdr only. Not differentiable: fails when gradients are being
// recorded through the node.
std::pair<Node, Node> split(const Node& n, const std::vector<std::string>& left_axes,
                            const std::vector<std::string>& right_axes, SplitMode mode,
                            std::optional<std::size_t> max_rank = std::nullopt,
                            std::optional<double> cum_percentage = std::nullopt);

// Stack equally-shaped nodes along a new leading "stack" axis. With
// auto_stack on, an all-param stack re-points the parameters' storage into
// the stacked buffer (freeing the per-node copies); all-leaf stacks reuse the
// cached buffer while the inputs' tensors are unchanged.
Node stack(const std::vector<Node>& nodes);

// Slice a stack-role node back into per-slice resultant nodes, re-attached
// to the original neighbors recorded when the stack was formed. With
// auto_unbind on the slices are zero-copy views of the stacked buffer.
std::vector<Node> unbind(const Node& stack_node);

// Einstein-summation contraction over already-connected axes, strictly
// left-to-right pairwise. Repeated non-batch letters must name connected
// axis pairs; batch-letter axes must appear in the output.
Node einsum(const std::string& spec, const std::vector<Node>& nodes);

// stack each list, run einsum over the stacks (with an implicit leading
// stack index), and unbind the result.
std::vector<Node> stacked_einsum(const std::string& spec,
                                 const std::vector<std::vector<Node>>& node_lists);

// Axis permutation by name order; edges follow their axes.
Node permute(const Node& n, const std::vector<std::string>& axis_order);

// Outer (tensor) product of two unconnected nodes; the resultant inherits
// a's axes then b's.
Node tprod(const Node& a, const Node& b);

// Elementwise arithmetic on equally-shaped nodes. The resultant gets fresh
// dangling edges named after the first argument's axes.
Node add(const Node& a, const Node& b);
Node sub(const Node& a, const Node& b);
Node mul(const Node& a, const Node& b);
Node div(const Node& a, const Node& b);

}  // namespace tnkit::ops
