#include "tnkit/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <map>
#include <unordered_set>

#include "tnkit/error.hpp"

namespace tnkit::autodiff {

namespace {

thread_local std::uint64_t g_next_entry_index = 1;
thread_local bool g_grad_enabled = true;

std::map<std::string, BackwardRule>& registry() {
  static std::map<std::string, BackwardRule> r;
  return r;
}

std::vector<std::size_t> inverse_perm(const std::vector<std::size_t>& perm) {
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t k = 0; k < perm.size(); ++k) inv[perm[k]] = k;
  return inv;
}

Tensor copy_of(const Tensor& t) {
  return Tensor::from_data(t.shape(), std::vector<double>(t.data(), t.data() + t.size()));
}

void register_builtin_rules();

struct RegistryInit {
  RegistryInit() { register_builtin_rules(); }
};
const RegistryInit g_registry_init{};

}  // namespace

// --- Variable ---------------------------------------------------------------

Variable::Variable(Tensor value, bool requires_grad) : state_(std::make_shared<VarState>()) {
  state_->value = std::move(value);
  state_->requires_grad = requires_grad;
}

Variable Variable::from_state(std::shared_ptr<VarState> s) {
  Variable v;
  v.state_ = std::move(s);
  return v;
}

const Tensor& Variable::value() const {
  if (!state_) detail::fail_state("Variable: empty handle has no value");
  return state_->value;
}

const std::optional<Tensor>& Variable::grad() const {
  if (!state_) detail::fail_state("Variable: empty handle has no gradient");
  return state_->grad;
}

void Variable::zero_grad() {
  if (!state_) detail::fail_state("Variable: empty handle");
  state_->grad.reset();
}

void Variable::accumulate_grad(const Tensor& g) {
  if (!state_) detail::fail_state("Variable: empty handle");
  if (g.shape() != state_->value.shape()) {
    detail::fail_arg("accumulate_grad: gradient shape ", shape_str(g.shape()),
                     " does not match value shape ", shape_str(state_->value.shape()));
  }
  if (!state_->grad) {
    state_->grad = g;
  } else {
    state_->grad = tnkit::add(*state_->grad, g);
  }
}

void Variable::set_value(Tensor value) {
  if (!state_) detail::fail_state("Variable: empty handle");
  if (state_->entry) detail::fail_state("Variable: only leaf values may be replaced");
  state_->value = std::move(value);
  state_->grad.reset();
}

void Variable::set_requires_grad(bool requires_grad) {
  if (!state_) detail::fail_state("Variable: empty handle");
  if (state_->entry) detail::fail_state("Variable: requires_grad is settable on leaves only");
  state_->requires_grad = requires_grad;
  state_->grad.reset();
}

std::optional<std::uint64_t> Variable::tape_index() const {
  if (!state_ || !state_->entry) return std::nullopt;
  return state_->entry->index;
}

// --- registry / grad mode ---------------------------------------------------

bool has_backward_rule(const std::string& op_kind) { return registry().count(op_kind) > 0; }

void register_backward_rule(const std::string& op_kind, BackwardRule rule) {
  registry()[op_kind] = std::move(rule);
}

bool grad_enabled() { return g_grad_enabled; }

GradMode::GradMode(bool enabled) : prev_(g_grad_enabled) { g_grad_enabled = enabled; }
GradMode::~GradMode() { g_grad_enabled = prev_; }

// --- record / backward ------------------------------------------------------

Variable record(const std::string& op_kind, std::vector<Variable> inputs, Tensor forward_result,
                SavedState saved) {
  if (!has_backward_rule(op_kind)) {
    detail::fail_arg("record: no backward rule registered for op kind '", op_kind, "'");
  }
  bool needs_grad = false;
  std::vector<std::shared_ptr<VarState>> states;
  states.reserve(inputs.size());
  for (const Variable& v : inputs) {
    if (!v.defined()) detail::fail_arg("record: undefined input variable for '", op_kind, "'");
    needs_grad = needs_grad || v.requires_grad();
    states.push_back(v.state());
  }
  auto out_state = std::make_shared<VarState>();
  out_state->requires_grad = needs_grad;
  auto entry = std::make_shared<TapeEntry>();
  entry->index = g_next_entry_index++;
  entry->op_kind = op_kind;
  entry->inputs = std::move(states);
  entry->output = out_state;
  entry->output_shape = forward_result.shape();
  entry->saved = std::move(saved);
  out_state->value = std::move(forward_result);
  out_state->entry = std::move(entry);
  return Variable::from_state(std::move(out_state));
}

void backward(const Variable& root) {
  if (!root.defined()) detail::fail_arg("backward: undefined root");
  if (root.value().size() != 1) {
    detail::fail_arg("backward: root must be a scalar, got shape ",
                     shape_str(root.value().shape()));
  }
  if (!root.requires_grad()) {
    detail::fail_state("backward: root does not require gradients (no differentiable path)");
  }

  // Collect the entries reachable from the root through grad-requiring
  // inputs; refuse re-entry into a consumed graph.
  std::vector<TapeEntry*> entries;
  std::unordered_set<TapeEntry*> seen;
  std::vector<TapeEntry*> dfs;
  if (root.state()->entry) dfs.push_back(root.state()->entry.get());
  while (!dfs.empty()) {
    TapeEntry* e = dfs.back();
    dfs.pop_back();
    if (seen.count(e)) continue;
    if (e->consumed) {
      detail::fail_state("backward: tape already consumed; run forward again before a second "
                         "backward");
    }
    seen.insert(e);
    entries.push_back(e);
    for (const auto& in : e->inputs) {
      if (in->requires_grad && in->entry) dfs.push_back(in->entry.get());
    }
  }
  std::sort(entries.begin(), entries.end(),
            [](const TapeEntry* a, const TapeEntry* b) { return a->index > b->index; });

  root.state()->grad = Tensor::ones(root.value().shape());

  for (TapeEntry* e : entries) {
    auto out_state = e->output.lock();
    if (!out_state || !out_state->grad) continue;
    const BackwardRule& rule = registry().at(e->op_kind);
    std::vector<std::optional<Tensor>> grads = rule(*e, *out_state->grad);
    if (grads.size() != e->inputs.size()) {
      detail::fail_state("backward: rule for '", e->op_kind, "' returned ", grads.size(),
                         " gradients for ", e->inputs.size(), " inputs");
    }
    for (std::size_t i = 0; i < grads.size(); ++i) {
      if (!e->inputs[i]->requires_grad || !grads[i]) continue;
      Variable::from_state(e->inputs[i]).accumulate_grad(*grads[i]);
    }
  }
  for (TapeEntry* e : entries) e->consumed = true;
}

double grad_check(const std::function<Variable(const std::vector<Variable>&)>& f,
                  const std::vector<Variable>& leaves, double h) {
  for (const Variable& leaf : leaves) {
    if (!leaf.defined() || !leaf.is_leaf()) {
      detail::fail_arg("grad_check: inputs must be defined leaf variables");
    }
  }
  std::vector<Variable> work = leaves;
  for (Variable& v : work) v.zero_grad();
  Variable out = f(work);
  if (out.value().size() != 1) detail::fail_arg("grad_check: f must return a scalar");
  backward(out);

  double worst = 0.0;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    const Tensor& x = leaves[li].value();
    Tensor analytic = leaves[li].grad() ? *leaves[li].grad() : Tensor::zeros(x.shape());
    for (std::size_t e = 0; e < x.size(); ++e) {
      auto eval_at = [&](double xe) {
        std::vector<double> data(x.data(), x.data() + x.size());
        data[e] = xe;
        std::vector<Variable> probe = leaves;
        probe[li] = Variable(Tensor::from_data(x.shape(), std::move(data)), false);
        return f(probe).value()[0];
      };
      double numeric = (eval_at(x[e] + h) - eval_at(x[e] - h)) / (2.0 * h);
      double a = analytic[e];
      double denom = std::max(1e-8, std::abs(a) + std::abs(numeric));
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

// --- differentiable ops -----------------------------------------------------

namespace {

bool should_record(std::initializer_list<const Variable*> inputs) {
  if (!g_grad_enabled) return false;
  for (const Variable* v : inputs) {
    if (v->requires_grad()) return true;
  }
  return false;
}

// Gradient of tensordot w.r.t. one side, built from the saved axis
// bookkeeping: contract the output gradient with the other operand over that
// operand's free axes, then scatter the result axes back into this operand's
// original layout.
Tensor tensordot_grad_side(const TapeEntry& e, const Tensor& gout, bool left) {
  const Tensor& a = e.saved.tensors[0];
  const Tensor& b = e.saved.tensors[1];
  const std::vector<std::size_t>& axes_a = e.saved.axis_lists[0];
  const std::vector<std::size_t>& axes_b = e.saved.axis_lists[1];
  std::vector<bool> used_a(a.rank(), false), used_b(b.rank(), false);
  for (std::size_t ax : axes_a) used_a[ax] = true;
  for (std::size_t ax : axes_b) used_b[ax] = true;
  std::vector<std::size_t> free_a, free_b;
  for (std::size_t i = 0; i < a.rank(); ++i)
    if (!used_a[i]) free_a.push_back(i);
  for (std::size_t i = 0; i < b.rank(); ++i)
    if (!used_b[i]) free_b.push_back(i);

  std::vector<std::size_t> sorted_a = axes_a, sorted_b = axes_b;
  std::sort(sorted_a.begin(), sorted_a.end());
  std::sort(sorted_b.begin(), sorted_b.end());
  auto pair_index = [](const std::vector<std::size_t>& axes, std::size_t ax) {
    for (std::size_t j = 0; j < axes.size(); ++j)
      if (axes[j] == ax) return j;
    detail::fail_state("tensordot backward: axis bookkeeping corrupted");
  };

  if (left) {
    // d/da: contract gout's trailing block with b's free axes. The result is
    // (free_a..., contracted axes of b in b's order); scatter into a's layout.
    std::vector<std::size_t> g_axes(free_b.size());
    for (std::size_t i = 0; i < free_b.size(); ++i) g_axes[i] = free_a.size() + i;
    Tensor t = tnkit::tensordot(gout, b, g_axes, free_b);
    std::vector<std::size_t> perm(t.rank());
    for (std::size_t i = 0; i < free_a.size(); ++i) perm[i] = free_a[i];
    for (std::size_t r = 0; r < sorted_b.size(); ++r) {
      std::size_t j = pair_index(axes_b, sorted_b[r]);
      perm[free_a.size() + r] = axes_a[j];
    }
    return tnkit::permute(t, perm);
  }
  // d/db: contract a's free axes with gout's leading block. The result is
  // (contracted axes of a in a's order, free_b...); scatter into b's layout.
  std::vector<std::size_t> g_axes(free_a.size());
  for (std::size_t i = 0; i < free_a.size(); ++i) g_axes[i] = i;
  Tensor t = tnkit::tensordot(a, gout, free_a, g_axes);
  std::vector<std::size_t> perm(t.rank());
  for (std::size_t r = 0; r < sorted_a.size(); ++r) {
    std::size_t j = pair_index(axes_a, sorted_a[r]);
    perm[r] = axes_b[j];
  }
  for (std::size_t i = 0; i < free_b.size(); ++i) perm[sorted_a.size() + i] = free_b[i];
  return tnkit::permute(t, perm);
}

void register_builtin_rules() {
  register_backward_rule("tensordot", [](const TapeEntry& e, const Tensor& g) {
    std::vector<std::optional<Tensor>> out(2);
    if (e.inputs[0]->requires_grad) out[0] = tensordot_grad_side(e, g, true);
    if (e.inputs[1]->requires_grad) out[1] = tensordot_grad_side(e, g, false);
    return out;
  });

  register_backward_rule("batched_matmul", [](const TapeEntry& e, const Tensor& g) {
    const Tensor& a = e.saved.tensors[0];
    const Tensor& b = e.saved.tensors[1];
    std::vector<std::size_t> swap_last{0, 2, 1};
    std::vector<std::optional<Tensor>> out(2);
    if (e.inputs[0]->requires_grad) out[0] = tnkit::batched_matmul(g, tnkit::permute(b, swap_last));
    if (e.inputs[1]->requires_grad) out[1] = tnkit::batched_matmul(tnkit::permute(a, swap_last), g);
    return out;
  });

  register_backward_rule("permute", [](const TapeEntry& e, const Tensor& g) {
    return std::vector<std::optional<Tensor>>{tnkit::permute(g, inverse_perm(e.saved.axis_lists[0]))};
  });

  register_backward_rule("reshape", [](const TapeEntry& e, const Tensor& g) {
    return std::vector<std::optional<Tensor>>{g.reshaped(e.saved.shapes[0])};
  });

  register_backward_rule("outer", [](const TapeEntry& e, const Tensor& g) {
    const Tensor& a = e.saved.tensors[0];
    const Tensor& b = e.saved.tensors[1];
    std::vector<std::size_t> a_dims(a.rank()), b_dims(b.rank());
    for (std::size_t i = 0; i < a.rank(); ++i) a_dims[i] = i;
    for (std::size_t i = 0; i < b.rank(); ++i) b_dims[i] = i;
    std::vector<std::size_t> g_tail(b.rank()), g_head(a.rank());
    for (std::size_t i = 0; i < b.rank(); ++i) g_tail[i] = a.rank() + i;
    for (std::size_t i = 0; i < a.rank(); ++i) g_head[i] = i;
    std::vector<std::optional<Tensor>> out(2);
    if (e.inputs[0]->requires_grad) out[0] = tnkit::tensordot(g, b, g_tail, b_dims);
    if (e.inputs[1]->requires_grad) out[1] = tnkit::tensordot(a, g, a_dims, g_head);
    return out;
  });

  register_backward_rule("add", [](const TapeEntry&, const Tensor& g) {
    return std::vector<std::optional<Tensor>>{g, g};
  });

  register_backward_rule("sub", [](const TapeEntry&, const Tensor& g) {
    return std::vector<std::optional<Tensor>>{g, tnkit::scale(g, -1.0)};
  });

  register_backward_rule("mul", [](const TapeEntry& e, const Tensor& g) {
    const Tensor& a = e.saved.tensors[0];
    const Tensor& b = e.saved.tensors[1];
    std::vector<std::optional<Tensor>> out(2);
    if (e.inputs[0]->requires_grad) out[0] = tnkit::mul(g, b);
    if (e.inputs[1]->requires_grad) out[1] = tnkit::mul(g, a);
    return out;
  });

  register_backward_rule("div", [](const TapeEntry& e, const Tensor& g) {
    const Tensor& a = e.saved.tensors[0];
    const Tensor& b = e.saved.tensors[1];
    std::vector<std::optional<Tensor>> out(2);
    if (e.inputs[0]->requires_grad) out[0] = tnkit::div(g, b);
    if (e.inputs[1]->requires_grad) {
      out[1] = tnkit::scale(tnkit::div(tnkit::mul(g, a), tnkit::mul(b, b)), -1.0);
    }
    return out;
  });

  register_backward_rule("scale", [](const TapeEntry& e, const Tensor& g) {
    return std::vector<std::optional<Tensor>>{tnkit::scale(g, e.saved.tensors[0][0])};
  });

  register_backward_rule("stack", [](const TapeEntry& e, const Tensor& g) {
    std::vector<std::optional<Tensor>> out(e.inputs.size());
    for (std::size_t i = 0; i < e.inputs.size(); ++i) {
      if (e.inputs[i]->requires_grad) out[i] = g.slice_leading(i);
    }
    return out;
  });

  register_backward_rule("unbind", [](const TapeEntry& e, const Tensor& g) {
    const Shape& in_shape = e.saved.shapes[0];
    std::size_t index = static_cast<std::size_t>(e.saved.ints[0]);
    std::vector<double> data(shape_numel(in_shape), 0.0);
    std::size_t block = g.size();
    std::copy(g.data(), g.data() + block, data.data() + index * block);
    return std::vector<std::optional<Tensor>>{Tensor::from_data(in_shape, std::move(data))};
  });

  register_backward_rule("slice", [](const TapeEntry& e, const Tensor& g) {
    const Shape& in_shape = e.saved.shapes[0];
    std::size_t axis = static_cast<std::size_t>(e.saved.ints[0]);
    std::size_t index = static_cast<std::size_t>(e.saved.ints[1]);
    std::size_t outer_n = 1, inner_n = 1;
    for (std::size_t i = 0; i < axis; ++i) outer_n *= in_shape[i];
    for (std::size_t i = axis + 1; i < in_shape.size(); ++i) inner_n *= in_shape[i];
    std::vector<double> data(shape_numel(in_shape), 0.0);
    for (std::size_t o = 0; o < outer_n; ++o) {
      double* dst = data.data() + (o * in_shape[axis] + index) * inner_n;
      const double* src = g.data() + o * inner_n;
      std::copy(src, src + inner_n, dst);
    }
    return std::vector<std::optional<Tensor>>{Tensor::from_data(in_shape, std::move(data))};
  });

  register_backward_rule("sum_over_axis", [](const TapeEntry& e, const Tensor& g) {
    const Shape& in_shape = e.saved.shapes[0];
    std::size_t axis = static_cast<std::size_t>(e.saved.ints[0]);
    std::size_t outer_n = 1, inner_n = 1;
    for (std::size_t i = 0; i < axis; ++i) outer_n *= in_shape[i];
    for (std::size_t i = axis + 1; i < in_shape.size(); ++i) inner_n *= in_shape[i];
    std::vector<double> data(shape_numel(in_shape));
    for (std::size_t o = 0; o < outer_n; ++o) {
      for (std::size_t k = 0; k < in_shape[axis]; ++k) {
        double* dst = data.data() + (o * in_shape[axis] + k) * inner_n;
        const double* src = g.data() + o * inner_n;
        std::copy(src, src + inner_n, dst);
      }
    }
    return std::vector<std::optional<Tensor>>{Tensor::from_data(in_shape, std::move(data))};
  });

  register_backward_rule("sum_all", [](const TapeEntry& e, const Tensor& g) {
    return std::vector<std::optional<Tensor>>{Tensor::constant(e.saved.shapes[0], g[0])};
  });
}

}  // namespace

namespace ops {

Variable tensordot(const Variable& a, const Variable& b, std::span<const std::size_t> axes_a,
                   std::span<const std::size_t> axes_b) {
  Tensor out = tnkit::tensordot(a.value(), b.value(), axes_a, axes_b);
  if (!should_record({&a, &b})) return Variable(std::move(out), false);
  SavedState saved;
  saved.tensors = {a.value(), b.value()};
  saved.axis_lists = {std::vector<std::size_t>(axes_a.begin(), axes_a.end()),
                      std::vector<std::size_t>(axes_b.begin(), axes_b.end())};
  return record("tensordot", {a, b}, std::move(out), std::move(saved));
}

Variable batched_matmul(const Variable& a, const Variable& b) {
  Tensor out = tnkit::batched_matmul(a.value(), b.value());
  if (!should_record({&a, &b})) return Variable(std::move(out), false);
  SavedState saved;
  saved.tensors = {a.value(), b.value()};
  return record("batched_matmul", {a, b}, std::move(out), std::move(saved));
}

Variable permute(const Variable& a, std::span<const std::size_t> perm) {
  Tensor out = tnkit::permute(a.value(), perm);
  if (!should_record({&a})) return Variable(std::move(out), false);
  SavedState saved;
  saved.axis_lists = {std::vector<std::size_t>(perm.begin(), perm.end())};
  return record("permute", {a}, std::move(out), std::move(saved));
}

Variable reshape(const Variable& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  if (!should_record({&a})) return Variable(std::move(out), false);
  SavedState saved;
  saved.shapes = {a.value().shape()};
  return record("reshape", {a}, std::move(out), std::move(saved));
}

Variable outer(const Variable& a, const Variable& b) {
  Tensor out = tnkit::outer(a.value(), b.value());
  if (!should_record({&a, &b})) return Variable(std::move(out), false);
  SavedState saved;
  saved.tensors = {a.value(), b.value()};
  return record("outer", {a, b}, std::move(out), std::move(saved));
}

namespace {
Variable binary_op(const char* kind, BinaryOp op, const Variable& a, const Variable& b,
                   bool save_operands) {
  Tensor out = tnkit::elementwise(op, a.value(), b.value());
  if (!should_record({&a, &b})) return Variable(std::move(out), false);
  SavedState saved;
  if (save_operands) saved.tensors = {a.value(), b.value()};
  return record(kind, {a, b}, std::move(out), std::move(saved));
}
}  // namespace

Variable add(const Variable& a, const Variable& b) {
  return binary_op("add", BinaryOp::Add, a, b, false);
}
Variable sub(const Variable& a, const Variable& b) {
  return binary_op("sub", BinaryOp::Sub, a, b, false);
}
Variable mul(const Variable& a, const Variable& b) {
  return binary_op("mul", BinaryOp::Mul, a, b, true);
}
Variable div(const Variable& a, const Variable& b) {
  return binary_op("div", BinaryOp::Div, a, b, true);
}

Variable scale(const Variable& a, double factor) {
  Tensor out = tnkit::scale(a.value(), factor);
  if (!should_record({&a})) return Variable(std::move(out), false);
  SavedState saved;
  saved.tensors = {Tensor::scalar(factor)};
  return record("scale", {a}, std::move(out), std::move(saved));
}

Variable stack(std::span<const Variable> inputs) {
  if (inputs.empty()) detail::fail_arg("stack: empty input list");
  std::vector<Tensor> values;
  values.reserve(inputs.size());
  bool any_grad = false;
  for (const Variable& v : inputs) {
    values.push_back(v.value());
    any_grad = any_grad || v.requires_grad();
  }
  Tensor out = stack_tensors(values);
  if (!g_grad_enabled || !any_grad) return Variable(std::move(out), false);
  return record("stack", std::vector<Variable>(inputs.begin(), inputs.end()), std::move(out));
}

Variable unbind_slice(const Variable& a, std::size_t index, bool view) {
  Tensor slice_view = a.value().slice_leading(index);
  Tensor out = view ? slice_view : copy_of(slice_view);
  if (!should_record({&a})) return Variable(std::move(out), false);
  SavedState saved;
  saved.shapes = {a.value().shape()};
  saved.ints = {static_cast<long long>(index)};
  return record("unbind", {a}, std::move(out), std::move(saved));
}

std::vector<Variable> unbind(const Variable& a, bool views) {
  if (a.value().rank() == 0) detail::fail_arg("unbind: rank-0 value has no leading axis");
  std::vector<Variable> out;
  out.reserve(a.value().shape()[0]);
  for (std::size_t i = 0; i < a.value().shape()[0]; ++i) {
    out.push_back(unbind_slice(a, i, views));
  }
  return out;
}

Variable slice(const Variable& a, std::size_t axis, std::size_t index) {
  Tensor out = slice_index(a.value(), axis, index);
  if (!should_record({&a})) return Variable(std::move(out), false);
  SavedState saved;
  saved.shapes = {a.value().shape()};
  saved.ints = {static_cast<long long>(axis), static_cast<long long>(index)};
  return record("slice", {a}, std::move(out), std::move(saved));
}

Variable sum_over_axis(const Variable& a, std::size_t axis) {
  Tensor out = tnkit::sum_over_axis(a.value(), axis);
  if (!should_record({&a})) return Variable(std::move(out), false);
  SavedState saved;
  saved.shapes = {a.value().shape()};
  saved.ints = {static_cast<long long>(axis)};
  return record("sum_over_axis", {a}, std::move(out), std::move(saved));
}

Variable sum_all(const Variable& a) {
  Tensor out = tnkit::sum_all(a.value());
  if (!should_record({&a})) return Variable(std::move(out), false);
  SavedState saved;
  saved.shapes = {a.value().shape()};
  return record("sum_all", {a}, std::move(out), std::move(saved));
}

}  // namespace ops

}  // namespace tnkit::autodiff
