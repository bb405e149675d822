#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tnkit/tensor.hpp"

namespace tnkit::autodiff {

struct TapeEntry;

// Shared state behind a Variable handle. Leaves own no tape entry; values of
// leaves may be replaced in place (optimizer updates), non-leaf values are
// fixed by the recording operation.
struct VarState {
  Tensor value;
  bool requires_grad = false;
  std::optional<Tensor> grad;
  std::shared_ptr<TapeEntry> entry;  // creator; null for leaves
};

// Per-operation context captured at record time for the backward rule.
struct SavedState {
  std::vector<Tensor> tensors;
  std::vector<std::vector<std::size_t>> axis_lists;
  std::vector<Shape> shapes;
  std::vector<long long> ints;
};

// One recorded operation. Entries carry a strictly increasing index, so every
// input's creator has a smaller index than its consumers (a topological
// order over the implicit tape).
struct TapeEntry {
  std::uint64_t index = 0;
  std::string op_kind;
  std::vector<std::shared_ptr<VarState>> inputs;
  std::weak_ptr<VarState> output;
  Shape output_shape;
  SavedState saved;
  bool consumed = false;
};

// A tensor in a differentiable computation. Cheap handle; copies share state.
class Variable {
 public:
  Variable() = default;
  explicit Variable(Tensor value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(state_); }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return state_ && state_->requires_grad; }
  bool is_leaf() const { return state_ && !state_->entry; }

  const std::optional<Tensor>& grad() const;
  void zero_grad();
  void accumulate_grad(const Tensor& g);

  // Leaves only: replace the held value (optimizer step / set_tensor) or
  // toggle trainability. The gradient is cleared.
  void set_value(Tensor value);
  void set_requires_grad(bool requires_grad);

  // Index of the creating tape entry; leaves have none.
  std::optional<std::uint64_t> tape_index() const;

  std::shared_ptr<VarState> state() const { return state_; }
  static Variable from_state(std::shared_ptr<VarState> s);

 private:
  std::shared_ptr<VarState> state_;
};

// Rule computing per-input gradients from a recorded entry and the output
// gradient; entries may return nullopt for inputs that need no gradient.
using BackwardRule =
    std::function<std::vector<std::optional<Tensor>>(const TapeEntry&, const Tensor&)>;

// The rule registry. record() refuses unknown op kinds. The built-in rules
// are registered at startup; extensions (losses) add theirs the same way.
bool has_backward_rule(const std::string& op_kind);
void register_backward_rule(const std::string& op_kind, BackwardRule rule);

// Thread-local gradient mode: when disabled, the convenience ops below skip
// recording entirely (inference fast path).
bool grad_enabled();
class GradMode {
 public:
  explicit GradMode(bool enabled);
  ~GradMode();
  GradMode(const GradMode&) = delete;
  GradMode& operator=(const GradMode&) = delete;

 private:
  bool prev_;
};

// Record one operation: the output carries forward_result and a new tape
// entry; requires_grad of the output is the OR of the inputs' flags.
Variable record(const std::string& op_kind, std::vector<Variable> inputs, Tensor forward_result,
                SavedState saved = {});

// Reverse sweep from a scalar root: seeds d(root)/d(root) = 1, walks the
// reachable entries in decreasing index order, and += accumulates gradients
// on every requires_grad state. Consumes the visited entries: a second
// backward through any of them throws.
void backward(const Variable& root);

// Compare analytic gradients of f against central differences (step h) over
// every entry of every leaf. Returns the maximum relative error
// |a - n| / max(1e-8, |a| + |n|).
double grad_check(const std::function<Variable(const std::vector<Variable>&)>& f,
                  const std::vector<Variable>& leaves, double h = 1e-5);

// --- differentiable tensor ops ----------------------------------------------
// Each computes the forward value with the dense kernels and records a tape
// entry when grad mode is on and any input requires a gradient.
namespace ops {

Variable tensordot(const Variable& a, const Variable& b, std::span<const std::size_t> axes_a,
                   std::span<const std::size_t> axes_b);
Variable batched_matmul(const Variable& a, const Variable& b);
Variable permute(const Variable& a, std::span<const std::size_t> perm);
Variable reshape(const Variable& a, Shape shape);
Variable outer(const Variable& a, const Variable& b);
Variable add(const Variable& a, const Variable& b);
Variable sub(const Variable& a, const Variable& b);
Variable mul(const Variable& a, const Variable& b);
Variable div(const Variable& a, const Variable& b);
Variable scale(const Variable& a, double factor);
Variable stack(std::span<const Variable> inputs);
// One slice of the leading axis, as recorded by unbind; `view` shares the
// buffer instead of copying.
Variable unbind_slice(const Variable& a, std::size_t index, bool view);
std::vector<Variable> unbind(const Variable& a, bool views = false);
Variable slice(const Variable& a, std::size_t axis, std::size_t index);
Variable sum_over_axis(const Variable& a, std::size_t axis);
Variable sum_all(const Variable& a);

}  // namespace ops

}  // namespace tnkit::autodiff
