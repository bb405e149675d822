#pragma once

// Helpers shared by the operation implementations (ops.cpp, einsum.cpp).
// Not part of the public API.

#include <string>
#include <vector>

#include "tnkit/network.hpp"

namespace tnkit::ops::internal {

using graph::EdgePtr;
using graph::Node;

// Cache key: op tag + argument node ids + frozen parameters.
std::string ids_key(const std::string& tag, const std::vector<Node>& args,
                    const std::string& params);

// Human-readable twin of ids_key using node names; stable across retraces.
std::string display_key(const std::string& tag, const std::vector<Node>& args,
                        const std::string& params);

// Per-slice edge for axis `axis` of `n` in slice `s`: stack nodes with
// recorded provenance answer from slice_edges, anything else repeats its own
// edge.
EdgePtr slice_edge_for(const Node& n, std::size_t axis, std::size_t s);

bool has_slice_provenance(const Node& n);

// Leading-"stack"-axis length; errors when there is no such axis.
std::size_t stack_slice_count(const Node& n);

}  // namespace tnkit::ops::internal
