#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "tnkit/autodiff.hpp"
#include "tnkit/tensor.hpp"

namespace tnkit::graph {

class TensorNetwork;
struct NodeImpl;

// --- roles -------------------------------------------------------------------

enum class NodeRole { Leaf, Param, Data, Virtual, Resultant, Stack, ParamStack };

const char* role_name(NodeRole role);

// Resultant/Stack/ParamStack nodes are created by operations, never by users,
// and are the ones removed by reset().
inline bool operation_created(NodeRole role) {
  return role == NodeRole::Resultant || role == NodeRole::Stack || role == NodeRole::ParamStack;
}

// --- axes & edges --------------------------------------------------------------

// An axis is a batch axis iff its name contains the substring "batch".
bool axis_name_is_batch(const std::string& name);

struct Axis {
  std::string name;
  bool is_batch = false;
};

// The leading axis of stacked nodes is named "stack"; contraction matches it
// slice-wise like a batch axis even though it is not a batch axis proper.
inline bool axis_matches_batchwise(const Axis& ax) { return ax.is_batch || ax.name == "stack"; }

// Shared edge object. A dangling edge has one endpoint; connect() fuses two
// dangling edges into one connected edge held by both nodes. Resultant nodes
// inherit these objects, so "which edges connect a and b" is answered by
// object identity against each node's edge list.
struct EdgeImpl {
  std::uint64_t id = 0;
  std::size_t size = 0;
  bool connected = false;
  std::weak_ptr<NodeImpl> node_a;
  std::size_t axis_a = 0;
  std::weak_ptr<NodeImpl> node_b;  // engaged iff connected
  std::size_t axis_b = 0;
};
using EdgePtr = std::shared_ptr<EdgeImpl>;

// --- nodes ---------------------------------------------------------------------

struct NodeImpl {
  std::uint64_t id = 0;
  std::string name;
  NodeRole role = NodeRole::Leaf;
  std::vector<Axis> axes;
  std::vector<EdgePtr> edges;  // one per axis
  std::string address;         // key into the network store; empty = no tensor
  TensorNetwork* net = nullptr;
  // Stack provenance: per-slice edge lists (in the order of the non-stack
  // axes), so unbind can hand each slice its original neighbors back.
  std::vector<std::vector<EdgePtr>> slice_edges;
};

struct AxisRef;

// Cheap handle; identity is the underlying impl pointer.
class Node {
 public:
  Node() = default;
  explicit Node(std::shared_ptr<NodeImpl> impl) : impl_(std::move(impl)) {}

  bool defined() const { return static_cast<bool>(impl_); }
  const std::string& name() const;
  NodeRole role() const;
  std::size_t rank() const;
  Shape shape() const;  // stored tensor's shape, or dangling edge sizes if empty
  const std::vector<Axis>& axes() const;
  std::size_t axis_index(const std::string& axis_name) const;
  const EdgePtr& edge(std::size_t axis) const;
  const EdgePtr& edge(const std::string& axis_name) const;
  bool has_tensor() const;
  Tensor tensor() const;  // current value (alias-resolved); errors when absent
  TensorNetwork& network() const;
  std::uint64_t id() const;

  const std::shared_ptr<NodeImpl>& impl() const { return impl_; }
  bool operator==(const Node& o) const { return impl_ == o.impl_; }
  bool operator!=(const Node& o) const { return impl_ != o.impl_; }

  // Axis selector for the connect operator: node["right"] ^ other["left"].
  AxisRef operator[](const std::string& axis_name) const;

 private:
  std::shared_ptr<NodeImpl> impl_;
};

struct AxisRef {
  Node node;
  std::size_t axis;
};

EdgePtr operator^(const AxisRef& a, const AxisRef& b);

// --- initializers ---------------------------------------------------------------

// Initialization policy for make_node. none() leaves the node empty (legal,
// but contraction through it errors until a tensor is set).
class Init {
 public:
  static Init none() { return Init{}; }
  static Init zeros();
  static Init ones();
  static Init constant(double value);
  static Init randn(Rng& rng, double mean = 0.0, double stddev = 1.0);
  static Init copy(Tensor t);

  bool empty() const { return !make_; }
  Tensor operator()(const Shape& shape) const { return make_(shape); }

 private:
  std::function<Tensor(const Shape&)> make_;
};

// --- store ----------------------------------------------------------------------

// One memory slot. Multiple nodes may point at the same address
// (set_tensor_from); a slot may instead alias a slice of another slot
// (parameters re-pointed into a parameter stack while traced).
struct StoreSlot {
  autodiff::Variable var;  // undefined while freed
  bool present = false;
  bool trainable = false;
  bool owns = true;                // false: alias of (alias_target, alias_index)
  std::string alias_target;
  std::size_t alias_index = 0;
  std::uint64_t version = 0;       // bumped on every value replacement
};

// --- successors & trace plan ------------------------------------------------------

// Cached operation call: fixed argument nodes + structural hints + the
// resultant node(s). The first call builds this; later calls only recompute
// tensors. Hints depend on shapes/edges only, never on tensor values.
struct Successor {
  std::string op_tag;
  std::string arg_key;  // op_tag + argument node ids + frozen parameters
  std::string display;  // op_tag + argument node *names* + parameters (stable across retraces)
  std::vector<Node> args;
  std::vector<Node> children;
  std::shared_ptr<void> hints;
  // Recompute the children's tensors from the args' current tensors; set by
  // the operation that created this successor, reused verbatim by replay().
  std::function<void(Successor&)> execute;
  // stack-op state: buffer-reuse stamps (address, version) per input, and
  // whether inputs were re-pointed into the stacked buffer.
  std::vector<std::pair<std::string, std::uint64_t>> stamps;
  bool repointed = false;
};

struct TracePlan {
  struct Step {
    Successor* succ = nullptr;
    std::string display;
  };
  std::vector<Step> steps;
  // node id -> index of the step after which its tensor may be freed
  std::unordered_map<std::uint64_t, std::size_t> last_use;
  // per step: nodes whose slots are dropped once the step has run
  std::vector<std::vector<Node>> free_after;
  Node output;
};

// --- the network -------------------------------------------------------------------

class TensorNetwork {
 public:
  TensorNetwork();
  TensorNetwork(const TensorNetwork&) = delete;
  TensorNetwork& operator=(const TensorNetwork&) = delete;

  // Memory modes (pure optimizations; defaults per the training CLI contract).
  bool auto_stack = true;
  bool auto_unbind = false;

  // -- construction / lookup --
  Node make_node(const std::string& name, const Shape& shape,
                 const std::vector<std::string>& axis_names, NodeRole role,
                 const Init& init = Init::none());
  Node node(const std::string& name) const;
  std::optional<Node> find_node(const std::string& name) const;
  std::vector<Node> nodes() const;  // registration order
  std::size_t node_count() const { return order_.size(); }
  void delete_node(const Node& n);

  // -- graph wiring --
  EdgePtr connect(const Node& a, const std::string& axis_a, const Node& b,
                  const std::string& axis_b);
  void disconnect(const EdgePtr& edge);

  // -- tensors --
  void set_tensor(const Node& n, Tensor t);
  Tensor get_tensor(const Node& n) const;
  bool has_tensor(const Node& n) const;
  void set_tensor_from(const Node& target, const Node& source);
  Node parameterize(const Node& n, bool param);

  // Tape-ready variable for an operation input. Owned slots return the slot
  // variable; alias slots derive a fresh slice view of their target.
  autodiff::Variable node_variable(const Node& n);
  // Gradient w.r.t. a param node's tensor, resolving stack re-pointing.
  std::optional<Tensor> param_grad(const Node& n) const;

  // Trainable (address, variable) pairs, sorted by address: the optimizer's
  // parameter list. Build it after trace() when auto_stack is on.
  std::vector<std::pair<std::string, autodiff::Variable>> trainable_parameters();
  void zero_grad();

  // -- state dict (param nodes only, sorted by node name) --
  std::map<std::string, Tensor> state_dict() const;
  void load_state_dict(const std::map<std::string, Tensor>& entries);

  // -- memory accounting (unique live buffers, bytes) --
  std::size_t live_tensor_bytes() const { return live_bytes_; }
  std::size_t peak_live_tensor_bytes() const { return peak_bytes_; }
  void reset_peak_bytes() { peak_bytes_ = live_bytes_; }

  // -- cache / trace lifecycle --
  void reset();
  bool traced() const { return traced_; }
  bool tracing() const { return tracing_; }
  const TracePlan& plan() const { return plan_; }
  void begin_trace();
  Node end_trace(const Node& output);
  // Re-execute the recorded steps (data nodes must be filled first); frees
  // data/resultant tensors right after their last use.
  Node replay();

  // ---- operation-layer surface (used by the ops module) ----
  Successor* find_successor(const std::string& arg_key);
  Successor* add_successor(Successor s);
  std::size_t successor_count() const { return successors_.size(); }
  Node make_operation_node(const std::string& tag_hint, NodeRole role, std::vector<Axis> axes,
                           std::vector<EdgePtr> edges);
  // Replace an operation node's tensor (resultant/stack slots).
  void set_operation_variable(const Node& n, autodiff::Variable v);
  void record_step(Successor* s);
  EdgePtr make_dangling_edge(const Node& n, std::size_t axis, std::size_t size);
  EdgePtr make_bond_edge(const Node& a, std::size_t axis_a, const Node& b, std::size_t axis_b,
                         std::size_t size);
  const StoreSlot* slot_of(const Node& n) const;
  std::uint64_t slot_version(const Node& n) const;
  // Re-point param slots into a stacked buffer slot (auto_stack fast path).
  void repoint_params_into_stack(const std::vector<Node>& params, const Node& stack_node,
                                 autodiff::Variable stacked);
  // Give every alias slot its own materialized tensor again.
  void materialize_aliases();
  void free_slot_tensor(const Node& n);

  // Adopt every node (and slot) of `other`, leaving it empty. Called by
  // connect() when its endpoints live in different networks.
  void absorb(TensorNetwork& other);

 private:
  friend class Node;

  std::string unique_name(const std::string& base) const;
  std::string fresh_address();
  StoreSlot& slot_at(const std::string& address);
  const StoreSlot& slot_at(const std::string& address) const;
  const StoreSlot& resolved_slot(const Node& n) const;  // follows one alias hop
  void drop_address_if_unreferenced(const std::string& address);
  std::size_t address_refcount(const std::string& address) const;
  void recompute_live_bytes();
  void remove_node_record(const std::shared_ptr<NodeImpl>& impl);

  std::unordered_map<std::string, std::shared_ptr<NodeImpl>> nodes_;
  std::vector<std::shared_ptr<NodeImpl>> order_;
  std::unordered_map<std::string, StoreSlot> store_;
  std::map<std::string, std::unique_ptr<Successor>> successors_;  // by arg_key
  TracePlan plan_;
  bool traced_ = false;
  bool tracing_ = false;
  std::uint64_t next_address_ = 0;
  std::uint64_t op_node_ordinal_ = 0;  // resets with reset(): stable retrace names
  std::size_t live_bytes_ = 0;
  std::size_t peak_bytes_ = 0;
};

// --- state-dict file format -----------------------------------------------------

// Flat binary container: magic "TKRO1", then per entry: name length (u32 LE),
// UTF-8 name, rank (u32 LE), dims (u32 LE each), payload (f64 LE, row-major).
void write_tensor_map(const std::string& path, const std::map<std::string, Tensor>& entries);
std::map<std::string, Tensor> read_tensor_map(const std::string& path);

void save_state_dict(const TensorNetwork& net, const std::string& path);
void load_state_dict(TensorNetwork& net, const std::string& path);

}  // namespace tnkit::graph
