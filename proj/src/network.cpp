#include "tnkit/network.hpp"

#include <algorithm>
#include <atomic>
#include <unordered_set>

#include "tnkit/error.hpp"

namespace tnkit::graph {

namespace {

std::atomic<std::uint64_t> g_next_node_id{1};
std::atomic<std::uint64_t> g_next_edge_id{1};

Axis make_axis(const std::string& name) { return Axis{name, axis_name_is_batch(name)}; }

Tensor copy_tensor(const Tensor& t) {
  return Tensor::from_data(t.shape(), std::vector<double>(t.data(), t.data() + t.size()));
}

}  // namespace

const char* role_name(NodeRole role) {
  switch (role) {
    case NodeRole::Leaf: return "leaf";
    case NodeRole::Param: return "param";
    case NodeRole::Data: return "data";
    case NodeRole::Virtual: return "virtual";
    case NodeRole::Resultant: return "resultant";
    case NodeRole::Stack: return "stack";
    case NodeRole::ParamStack: return "param_stack";
  }
  return "unknown";
}

bool axis_name_is_batch(const std::string& name) {
  return name.find("batch") != std::string::npos;
}

// --- Node handle --------------------------------------------------------------

const std::string& Node::name() const { return impl_->name; }
NodeRole Node::role() const { return impl_->role; }
std::size_t Node::rank() const { return impl_->axes.size(); }

Shape Node::shape() const {
  if (has_tensor()) return tensor().shape();
  Shape s;
  s.reserve(impl_->edges.size());
  for (const EdgePtr& e : impl_->edges) s.push_back(e->size);
  return s;
}

const std::vector<Axis>& Node::axes() const { return impl_->axes; }

std::size_t Node::axis_index(const std::string& axis_name) const {
  for (std::size_t i = 0; i < impl_->axes.size(); ++i) {
    if (impl_->axes[i].name == axis_name) return i;
  }
  detail::fail_arg("node '", impl_->name, "' has no axis named '", axis_name, "'");
}

const EdgePtr& Node::edge(std::size_t axis) const {
  if (axis >= impl_->edges.size()) {
    detail::fail_arg("node '", impl_->name, "': axis ", axis, " out of range for rank ",
                     impl_->edges.size());
  }
  return impl_->edges[axis];
}

const EdgePtr& Node::edge(const std::string& axis_name) const {
  return impl_->edges[axis_index(axis_name)];
}

bool Node::has_tensor() const { return defined() && impl_->net->has_tensor(*this); }
Tensor Node::tensor() const { return impl_->net->get_tensor(*this); }
TensorNetwork& Node::network() const { return *impl_->net; }
std::uint64_t Node::id() const { return impl_->id; }

AxisRef Node::operator[](const std::string& axis_name) const {
  return AxisRef{*this, axis_index(axis_name)};
}

EdgePtr operator^(const AxisRef& a, const AxisRef& b) {
  return a.node.network().connect(a.node, a.node.axes()[a.axis].name, b.node,
                                  b.node.axes()[b.axis].name);
}

// --- Init ----------------------------------------------------------------------

Init Init::zeros() {
  Init i;
  i.make_ = [](const Shape& s) { return Tensor::zeros(s); };
  return i;
}

Init Init::ones() {
  Init i;
  i.make_ = [](const Shape& s) { return Tensor::ones(s); };
  return i;
}

Init Init::constant(double value) {
  Init i;
  i.make_ = [value](const Shape& s) { return Tensor::constant(s, value); };
  return i;
}

Init Init::randn(Rng& rng, double mean, double stddev) {
  Init i;
  i.make_ = [&rng, mean, stddev](const Shape& s) { return Tensor::gaussian(s, rng, mean, stddev); };
  return i;
}

Init Init::copy(Tensor t) {
  Init i;
  i.make_ = [t = std::move(t)](const Shape& s) {
    if (t.shape() != s) {
      detail::fail_arg("Init::copy: tensor shape ", shape_str(t.shape()),
                       " does not match node shape ", shape_str(s));
    }
    return t;
  };
  return i;
}

// --- TensorNetwork: construction / lookup ---------------------------------------

TensorNetwork::TensorNetwork() = default;

std::string TensorNetwork::unique_name(const std::string& base) const {
  if (!nodes_.count(base)) return base;
  for (std::size_t k = 1;; ++k) {
    std::string candidate = base + "_" + std::to_string(k);
    if (!nodes_.count(candidate)) return candidate;
  }
}

std::string TensorNetwork::fresh_address() { return "t" + std::to_string(next_address_++); }

Node TensorNetwork::make_node(const std::string& name, const Shape& shape,
                              const std::vector<std::string>& axis_names, NodeRole role,
                              const Init& init) {
  if (name.empty()) detail::fail_arg("make_node: empty node name");
  if (operation_created(role)) {
    detail::fail_arg("make_node: role '", role_name(role),
                     "' is reserved for operation results");
  }
  if (axis_names.size() != shape.size()) {
    detail::fail_arg("make_node '", name, "': ", axis_names.size(), " axis names for ",
                     shape.size(), " dimensions");
  }
  for (std::size_t i = 0; i < axis_names.size(); ++i) {
    if (axis_names[i].empty()) detail::fail_arg("make_node '", name, "': empty axis name");
    for (std::size_t j = i + 1; j < axis_names.size(); ++j) {
      if (axis_names[i] == axis_names[j]) {
        detail::fail_arg("make_node '", name, "': duplicate axis name '", axis_names[i], "'");
      }
    }
  }

  auto impl = std::make_shared<NodeImpl>();
  impl->id = g_next_node_id++;
  impl->name = unique_name(name);
  impl->role = role;
  impl->net = this;
  for (const std::string& ax : axis_names) impl->axes.push_back(make_axis(ax));

  Node n(impl);
  for (std::size_t i = 0; i < shape.size(); ++i) {
    impl->edges.push_back(EdgePtr());
  }
  nodes_[impl->name] = impl;
  order_.push_back(impl);
  for (std::size_t i = 0; i < shape.size(); ++i) {
    impl->edges[i] = make_dangling_edge(n, i, shape[i]);
  }

  if (!init.empty()) {
    Tensor t = init(shape);
    set_tensor(n, std::move(t));
  }
  return n;
}

Node TensorNetwork::node(const std::string& name) const {
  auto it = nodes_.find(name);
  if (it == nodes_.end()) detail::fail_arg("no node named '", name, "' in this network");
  return Node(it->second);
}

std::optional<Node> TensorNetwork::find_node(const std::string& name) const {
  auto it = nodes_.find(name);
  if (it == nodes_.end()) return std::nullopt;
  return Node(it->second);
}

std::vector<Node> TensorNetwork::nodes() const {
  std::vector<Node> out;
  out.reserve(order_.size());
  for (const auto& impl : order_) out.emplace_back(impl);
  return out;
}

void TensorNetwork::remove_node_record(const std::shared_ptr<NodeImpl>& impl) {
  nodes_.erase(impl->name);
  order_.erase(std::remove(order_.begin(), order_.end(), impl), order_.end());
  impl->net = nullptr;  // surviving handles read as detached
}

void TensorNetwork::delete_node(const Node& n) {
  if (!n.defined() || n.impl()->net != this) detail::fail_arg("delete_node: not a node of this network");
  for (const EdgePtr& e : n.impl()->edges) {
    if (e && e->connected) disconnect(e);
  }
  std::string address = n.impl()->address;
  remove_node_record(n.impl());
  if (!address.empty()) drop_address_if_unreferenced(address);
  recompute_live_bytes();
}

// --- wiring ----------------------------------------------------------------------

EdgePtr TensorNetwork::make_dangling_edge(const Node& n, std::size_t axis, std::size_t size) {
  auto e = std::make_shared<EdgeImpl>();
  e->id = g_next_edge_id++;
  e->size = size;
  e->connected = false;
  e->node_a = n.impl();
  e->axis_a = axis;
  return e;
}

EdgePtr TensorNetwork::make_bond_edge(const Node& a, std::size_t axis_a, const Node& b,
                                      std::size_t axis_b, std::size_t size) {
  auto e = std::make_shared<EdgeImpl>();
  e->id = g_next_edge_id++;
  e->size = size;
  e->connected = true;
  e->node_a = a.impl();
  e->axis_a = axis_a;
  e->node_b = b.impl();
  e->axis_b = axis_b;
  return e;
}

EdgePtr TensorNetwork::connect(const Node& a, const std::string& axis_a, const Node& b,
                               const std::string& axis_b) {
  if (!a.defined() || !b.defined()) detail::fail_arg("connect: undefined node");
  if (a.impl() == b.impl()) {
    detail::fail_arg("connect: cannot connect node '", a.name(), "' to itself");
  }
  std::size_t ai = a.axis_index(axis_a);
  std::size_t bi = b.axis_index(axis_b);
  if (a.axes()[ai].is_batch || b.axes()[bi].is_batch) {
    detail::fail_arg("connect: batch axes are never connected ('", axis_a, "' / '", axis_b, "')");
  }
  const EdgePtr& ea = a.impl()->edges[ai];
  const EdgePtr& eb = b.impl()->edges[bi];
  if (ea->connected || eb->connected) {
    detail::fail_arg("connect: axis already connected ('", a.name(), "[", axis_a, "]' / '",
                     b.name(), "[", axis_b, "]')");
  }
  if (ea->size != eb->size) {
    detail::fail_arg("connect: size mismatch ", ea->size, " vs ", eb->size, " ('", a.name(), "[",
                     axis_a, "]' / '", b.name(), "[", axis_b, "]')");
  }
  if (a.impl()->net != b.impl()->net) {
    a.impl()->net->absorb(*b.impl()->net);
  }

  EdgePtr e = make_bond_edge(a, ai, b, bi, ea->size);
  a.impl()->edges[ai] = e;
  b.impl()->edges[bi] = e;
  return e;
}

void TensorNetwork::disconnect(const EdgePtr& edge) {
  // Copy the handle: the caller's reference may alias a node's edge slot that
  // is overwritten below.
  EdgePtr e = edge;
  if (!e || !e->connected) detail::fail_arg("disconnect: edge is not connected");
  auto na = e->node_a.lock();
  auto nb = e->node_b.lock();
  if (na && na->edges.size() > e->axis_a && na->edges[e->axis_a] == e) {
    na->edges[e->axis_a] = make_dangling_edge(Node(na), e->axis_a, e->size);
  }
  if (nb && nb->edges.size() > e->axis_b && nb->edges[e->axis_b] == e) {
    nb->edges[e->axis_b] = make_dangling_edge(Node(nb), e->axis_b, e->size);
  }
  e->connected = false;
  e->node_b.reset();
}

// --- store helpers ------------------------------------------------------------------

StoreSlot& TensorNetwork::slot_at(const std::string& address) {
  auto it = store_.find(address);
  if (it == store_.end()) detail::fail_state("internal: no store slot at address ", address);
  return it->second;
}

const StoreSlot& TensorNetwork::slot_at(const std::string& address) const {
  auto it = store_.find(address);
  if (it == store_.end()) detail::fail_state("internal: no store slot at address ", address);
  return it->second;
}

const StoreSlot* TensorNetwork::slot_of(const Node& n) const {
  if (n.impl()->address.empty()) return nullptr;
  auto it = store_.find(n.impl()->address);
  return it == store_.end() ? nullptr : &it->second;
}

std::uint64_t TensorNetwork::slot_version(const Node& n) const {
  const StoreSlot* s = slot_of(n);
  return s ? s->version : 0;
}

const StoreSlot& TensorNetwork::resolved_slot(const Node& n) const {
  const StoreSlot& s = slot_at(n.impl()->address);
  if (s.owns) return s;
  return slot_at(s.alias_target);
}

std::size_t TensorNetwork::address_refcount(const std::string& address) const {
  std::size_t count = 0;
  for (const auto& impl : order_) {
    if (impl->address == address) ++count;
  }
  // Alias slots keep their target alive too.
  for (const auto& [addr, slot] : store_) {
    if (!slot.owns && slot.alias_target == address) ++count;
  }
  return count;
}

void TensorNetwork::drop_address_if_unreferenced(const std::string& address) {
  if (address_refcount(address) == 0) store_.erase(address);
}

void TensorNetwork::recompute_live_bytes() {
  std::unordered_set<const void*> seen;
  std::size_t total = 0;
  for (const auto& [addr, slot] : store_) {
    if (!slot.owns || !slot.present || !slot.var.defined()) continue;
    const Tensor& t = slot.var.value();
    if (seen.insert(t.buffer_key()).second) total += t.buffer_bytes();
  }
  live_bytes_ = total;
  peak_bytes_ = std::max(peak_bytes_, live_bytes_);
}

// --- tensors -----------------------------------------------------------------------

bool TensorNetwork::has_tensor(const Node& n) const {
  if (n.impl()->address.empty()) return false;
  auto it = store_.find(n.impl()->address);
  if (it == store_.end()) return false;
  const StoreSlot& s = it->second;
  if (s.owns) return s.present && s.var.defined();
  auto target = store_.find(s.alias_target);
  return target != store_.end() && target->second.present && target->second.var.defined();
}

Tensor TensorNetwork::get_tensor(const Node& n) const {
  if (!has_tensor(n)) {
    detail::fail_state("node '", n.name(),
                       "' has no tensor (never set, or freed after its last traced use)");
  }
  const StoreSlot& direct = slot_at(n.impl()->address);
  if (direct.owns) return direct.var.value();
  const StoreSlot& target = slot_at(direct.alias_target);
  return target.var.value().slice_leading(direct.alias_index);
}

void TensorNetwork::set_tensor(const Node& n, Tensor t) {
  if (!n.defined() || n.impl()->net != this) detail::fail_arg("set_tensor: not a node of this network");
  if (operation_created(n.role())) {
    detail::fail_state("set_tensor: node '", n.name(), "' is operation-created (role ",
                       role_name(n.role()), "); only operations may replace its tensor");
  }
  if (t.rank() != n.rank()) {
    detail::fail_arg("set_tensor on '", n.name(), "': rank ", t.rank(), " does not match node rank ",
                     n.rank());
  }
  for (std::size_t i = 0; i < n.rank(); ++i) {
    const EdgePtr& e = n.impl()->edges[i];
    if (e->connected && e->size != t.dim(i)) {
      detail::fail_arg("set_tensor on '", n.name(), "': axis '", n.axes()[i].name,
                       "' is connected with frozen size ", e->size, ", got ", t.dim(i));
    }
  }
  // Dangling axes may resize; update their edges.
  for (std::size_t i = 0; i < n.rank(); ++i) {
    const EdgePtr& e = n.impl()->edges[i];
    if (!e->connected) e->size = t.dim(i);
  }

  if (n.impl()->address.empty()) {
    std::string addr = fresh_address();
    n.impl()->address = addr;
    StoreSlot slot;
    slot.trainable = (n.role() == NodeRole::Param);
    slot.var = autodiff::Variable(std::move(t), slot.trainable);
    slot.present = true;
    slot.version = 1;
    store_[addr] = std::move(slot);
  } else {
    StoreSlot& slot = slot_at(n.impl()->address);
    if (!slot.owns) {
      // A parameter re-pointed into a stacked buffer: writing to it breaks
      // the alias and gives the node its own (trainable) storage again. The
      // stale stack successor notices and re-stacks on its next call.
      slot.owns = true;
      slot.alias_target.clear();
      slot.alias_index = 0;
      slot.trainable = true;
      slot.var = autodiff::Variable(std::move(t), true);
      slot.present = true;
      slot.version++;
    } else if (!slot.present || !slot.var.defined()) {
      slot.var = autodiff::Variable(std::move(t), slot.trainable);
      slot.present = true;
      slot.version++;
    } else {
      slot.var.set_value(std::move(t));
      slot.version++;
    }
  }
  recompute_live_bytes();
}

void TensorNetwork::set_tensor_from(const Node& target, const Node& source) {
  if (!target.defined() || !source.defined()) detail::fail_arg("set_tensor_from: undefined node");
  if (target.impl()->net != source.impl()->net || target.impl()->net != this) {
    detail::fail_arg("set_tensor_from: nodes must belong to this network (no cross-network sharing)");
  }
  if (operation_created(target.role())) {
    detail::fail_state("set_tensor_from: target '", target.name(), "' is operation-created");
  }
  if (!source.has_tensor()) {
    detail::fail_state("set_tensor_from: source '", source.name(), "' has no tensor");
  }
  if (target.impl() == source.impl()) return;
  Shape target_shape = target.shape();
  Shape source_shape = source.shape();
  if (target_shape != source_shape) {
    detail::fail_arg("set_tensor_from: shape mismatch ", shape_str(target_shape), " vs ",
                     shape_str(source_shape));
  }
  if (target.impl()->address == source.impl()->address) return;
  std::string old = target.impl()->address;
  target.impl()->address = source.impl()->address;
  if (!old.empty()) drop_address_if_unreferenced(old);
  recompute_live_bytes();
}

Node TensorNetwork::parameterize(const Node& n, bool param) {
  if (!n.defined() || n.impl()->net != this) detail::fail_arg("parameterize: not a node of this network");
  NodeRole r = n.role();
  if (r != NodeRole::Leaf && r != NodeRole::Param) {
    detail::fail_state("parameterize: node '", n.name(), "' has role ", role_name(r),
                       "; only leaf and param nodes can be toggled");
  }
  n.impl()->role = param ? NodeRole::Param : NodeRole::Leaf;
  if (!n.impl()->address.empty()) {
    StoreSlot& slot = slot_at(n.impl()->address);
    if (!slot.owns) {
      // Materialize before changing trainability.
      Tensor value = get_tensor(n);
      slot.owns = true;
      slot.alias_target.clear();
      slot.var = autodiff::Variable(copy_tensor(value), param);
      slot.present = true;
      slot.version++;
      recompute_live_bytes();
    } else if (slot.var.defined()) {
      slot.var.set_requires_grad(param);
    }
    slot.trainable = param;
  }
  return n;
}

autodiff::Variable TensorNetwork::node_variable(const Node& n) {
  if (!has_tensor(n)) {
    detail::fail_state("node '", n.name(), "' has no tensor to operate on");
  }
  StoreSlot& slot = slot_at(n.impl()->address);
  if (slot.owns) return slot.var;
  StoreSlot& target = slot_at(slot.alias_target);
  return autodiff::ops::unbind_slice(target.var, slot.alias_index, /*view=*/true);
}

std::optional<Tensor> TensorNetwork::param_grad(const Node& n) const {
  const StoreSlot* s = slot_of(n);
  if (!s) return std::nullopt;
  if (s->owns) {
    if (!s->var.defined() || !s->var.grad()) return std::nullopt;
    return *s->var.grad();
  }
  const StoreSlot& target = slot_at(s->alias_target);
  if (!target.var.defined() || !target.var.grad()) return std::nullopt;
  return target.var.grad()->slice_leading(s->alias_index);
}

std::vector<std::pair<std::string, autodiff::Variable>> TensorNetwork::trainable_parameters() {
  std::vector<std::pair<std::string, autodiff::Variable>> out;
  for (auto& [addr, slot] : store_) {
    if (slot.owns && slot.trainable && slot.present && slot.var.defined()) {
      out.emplace_back(addr, slot.var);
    }
  }
  std::sort(out.begin(), out.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  return out;
}

void TensorNetwork::zero_grad() {
  for (auto& [addr, slot] : store_) {
    if (slot.owns && slot.var.defined()) slot.var.zero_grad();
  }
}

// --- state dict -----------------------------------------------------------------------

std::map<std::string, Tensor> TensorNetwork::state_dict() const {
  std::map<std::string, Tensor> out;
  for (const auto& impl : order_) {
    Node n(impl);
    if (impl->role == NodeRole::Param && has_tensor(n)) {
      out.emplace(impl->name, get_tensor(n));
    }
  }
  return out;
}

void TensorNetwork::load_state_dict(const std::map<std::string, Tensor>& entries) {
  for (const auto& [name, tensor] : entries) {
    auto found = find_node(name);
    if (!found) detail::fail_arg("load_state_dict: no node named '", name, "'");
    if (found->role() != NodeRole::Param) {
      detail::fail_arg("load_state_dict: node '", name, "' is not a param node");
    }
    set_tensor(*found, tensor);
  }
}

// --- operation-layer surface ------------------------------------------------------------

Successor* TensorNetwork::find_successor(const std::string& arg_key) {
  auto it = successors_.find(arg_key);
  return it == successors_.end() ? nullptr : it->second.get();
}

Successor* TensorNetwork::add_successor(Successor s) {
  std::string key = s.arg_key;
  auto owned = std::make_unique<Successor>(std::move(s));
  Successor* raw = owned.get();
  successors_[key] = std::move(owned);
  return raw;
}

Node TensorNetwork::make_operation_node(const std::string& tag_hint, NodeRole role,
                                        std::vector<Axis> axes, std::vector<EdgePtr> edges) {
  if (!operation_created(role)) {
    detail::fail_arg("make_operation_node: role must be resultant/stack, got ", role_name(role));
  }
  if (axes.size() != edges.size()) {
    detail::fail_arg("make_operation_node: ", axes.size(), " axes for ", edges.size(), " edges");
  }
  auto impl = std::make_shared<NodeImpl>();
  impl->id = g_next_node_id++;
  impl->name = unique_name(tag_hint + "_" + std::to_string(op_node_ordinal_++));
  impl->role = role;
  impl->net = this;
  impl->axes = std::move(axes);
  impl->edges = std::move(edges);
  nodes_[impl->name] = impl;
  order_.push_back(impl);
  return Node(impl);
}

void TensorNetwork::set_operation_variable(const Node& n, autodiff::Variable v) {
  if (!operation_created(n.role())) {
    detail::fail_arg("set_operation_variable: '", n.name(), "' is not operation-created");
  }
  if (n.impl()->address.empty()) {
    std::string addr = fresh_address();
    n.impl()->address = addr;
    StoreSlot slot;
    slot.var = std::move(v);
    slot.present = true;
    slot.version = 1;
    store_[addr] = std::move(slot);
  } else {
    StoreSlot& slot = slot_at(n.impl()->address);
    slot.var = std::move(v);
    slot.owns = true;
    slot.alias_target.clear();
    slot.present = true;
    slot.version++;
  }
  // Dangling edges created for this node track the tensor's sizes (batch
  // dimensions may differ between calls); inherited or connected edges are
  // authoritative and stay put.
  const Shape& shape = slot_at(n.impl()->address).var.value().shape();
  for (std::size_t i = 0; i < n.impl()->edges.size() && i < shape.size(); ++i) {
    const EdgePtr& e = n.impl()->edges[i];
    if (e && !e->connected && e->node_a.lock() == n.impl()) e->size = shape[i];
  }
  recompute_live_bytes();
}

void TensorNetwork::record_step(Successor* s) {
  if (tracing_) plan_.steps.push_back(TracePlan::Step{s, s->display});
}

void TensorNetwork::repoint_params_into_stack(const std::vector<Node>& params,
                                              const Node& stack_node,
                                              autodiff::Variable stacked) {
  set_operation_variable(stack_node, std::move(stacked));
  StoreSlot& stack_slot = slot_at(stack_node.impl()->address);
  stack_slot.trainable = true;
  for (std::size_t i = 0; i < params.size(); ++i) {
    StoreSlot& slot = slot_at(params[i].impl()->address);
    slot.owns = false;
    slot.alias_target = stack_node.impl()->address;
    slot.alias_index = i;
    slot.trainable = false;
    slot.present = true;
    slot.var = autodiff::Variable();
  }
  recompute_live_bytes();
}

void TensorNetwork::materialize_aliases() {
  for (auto& [addr, slot] : store_) {
    if (slot.owns) continue;
    const StoreSlot& target = slot_at(slot.alias_target);
    if (!target.present || !target.var.defined()) {
      detail::fail_state("internal: alias slot ", addr, " points at an empty buffer");
    }
    Tensor value = target.var.value().slice_leading(slot.alias_index);
    slot.owns = true;
    slot.alias_target.clear();
    slot.alias_index = 0;
    slot.trainable = true;  // aliases are only ever re-pointed parameters
    slot.var = autodiff::Variable(copy_tensor(value), true);
    slot.present = true;
  }
  recompute_live_bytes();
}

void TensorNetwork::free_slot_tensor(const Node& n) {
  if (n.impl()->address.empty()) return;
  auto it = store_.find(n.impl()->address);
  if (it == store_.end()) return;
  StoreSlot& slot = it->second;
  if (!slot.owns) return;
  slot.var = autodiff::Variable();
  slot.present = false;
  recompute_live_bytes();
}

// --- lifecycle -------------------------------------------------------------------------

void TensorNetwork::reset() {
  materialize_aliases();
  std::vector<std::shared_ptr<NodeImpl>> doomed;
  for (const auto& impl : order_) {
    if (operation_created(impl->role)) doomed.push_back(impl);
  }
  successors_.clear();
  plan_ = TracePlan{};
  for (const auto& impl : doomed) {
    std::string address = impl->address;
    remove_node_record(impl);
    if (!address.empty()) drop_address_if_unreferenced(address);
  }
  traced_ = false;
  tracing_ = false;
  op_node_ordinal_ = 0;
  recompute_live_bytes();
}

void TensorNetwork::begin_trace() {
  reset();
  tracing_ = true;
}

Node TensorNetwork::end_trace(const Node& output) {
  if (!tracing_) detail::fail_state("end_trace: begin_trace was not called");
  if (!output.defined()) detail::fail_arg("end_trace: undefined output node");
  plan_.output = output;

  std::unordered_map<std::uint64_t, Node> by_id;
  plan_.last_use.clear();
  for (std::size_t k = 0; k < plan_.steps.size(); ++k) {
    const Successor* s = plan_.steps[k].succ;
    for (const Node& arg : s->args) {
      plan_.last_use[arg.id()] = k;
      by_id.emplace(arg.id(), arg);
    }
    for (const Node& child : s->children) {
      plan_.last_use[child.id()] = k;
      by_id.emplace(child.id(), child);
    }
  }
  plan_.free_after.assign(plan_.steps.size(), {});
  for (const auto& [node_id, step] : plan_.last_use) {
    const Node& n = by_id.at(node_id);
    if (n == output) continue;
    NodeRole r = n.role();
    if (r != NodeRole::Data && r != NodeRole::Resultant && r != NodeRole::Stack) continue;
    plan_.free_after[step].push_back(n);
  }

  tracing_ = false;
  traced_ = true;
  return output;
}

Node TensorNetwork::replay() {
  if (!traced_) detail::fail_state("replay: network is not traced");
  for (std::size_t k = 0; k < plan_.steps.size(); ++k) {
    Successor* s = plan_.steps[k].succ;
    s->execute(*s);
    for (const Node& n : plan_.free_after[k]) free_slot_tensor(n);
  }
  return plan_.output;
}

void TensorNetwork::absorb(TensorNetwork& other) {
  if (&other == this) return;
  other.reset();  // drop other's resultants/caches; only user nodes move
  std::unordered_map<std::string, std::string> addr_map;
  for (const auto& [old_addr, slot] : other.store_) {
    std::string fresh = fresh_address();
    addr_map[old_addr] = fresh;
    store_[fresh] = slot;
  }
  for (const auto& impl : other.order_) {
    impl->name = unique_name(impl->name);
    impl->net = this;
    if (!impl->address.empty()) impl->address = addr_map.at(impl->address);
    nodes_[impl->name] = impl;
    order_.push_back(impl);
  }
  other.nodes_.clear();
  other.order_.clear();
  other.store_.clear();
  other.recompute_live_bytes();
  recompute_live_bytes();
}

}  // namespace tnkit::graph
