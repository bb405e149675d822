#include <cmath>
#include <string>
#include <vector>

#include "tnkit/train.hpp"

namespace tnkit::train {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

void check_shapes(const std::vector<Tensor>& params, const std::vector<Tensor>& grads) {
  if (params.size() != grads.size())
    fail("optimizer: " + std::to_string(params.size()) + " params vs " +
         std::to_string(grads.size()) + " grads");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i].shape() != grads[i].shape())
      fail("optimizer: param/grad shape mismatch at index " + std::to_string(i));
}

}  // namespace

void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamState& state,
               double lr, double beta1, double beta2, double eps, double weight_decay) {
  check_shapes(params, grads);
  if (state.step == 0) {
    state.m.clear();
    state.v.clear();
    for (const Tensor& p : params) {
      state.m.push_back(Tensor::zeros(p.shape()));
      state.v.push_back(Tensor::zeros(p.shape()));
    }
  }
  if (state.m.size() != params.size() || state.v.size() != params.size())
    fail("optimizer: adam state tracks a different number of params");
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(beta1, t), bc2 = 1.0 - std::pow(beta2, t);

  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].shape() != params[i].shape())
      fail("optimizer: adam state shape mismatch at index " + std::to_string(i));
    Tensor& p = params[i];
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    std::vector<double> out(p.size()), mnew(p.size()), vnew(p.size());
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double g = grads[i][j] + weight_decay * p[j];
      mnew[j] = beta1 * m[j] + (1.0 - beta1) * g;
      vnew[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
      out[j] = p[j] - lr * (mnew[j] / bc1) / (std::sqrt(vnew[j] / bc2) + eps);
    }
    m = Tensor::from_data(p.shape(), std::move(mnew));
    v = Tensor::from_data(p.shape(), std::move(vnew));
    p = Tensor::from_data(p.shape(), std::move(out));
  }
}

void sgd_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, double lr,
              double weight_decay) {
  check_shapes(params, grads);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    std::vector<double> out(p.size());
    for (std::size_t j = 0; j < p.size(); ++j)
      out[j] = p[j] - lr * (grads[i][j] + weight_decay * p[j]);
    p = Tensor::from_data(p.shape(), std::move(out));
  }
}

Optimizer::Optimizer(std::vector<std::pair<std::string, autodiff::Variable>> params, Kind kind,
                     double lr, double weight_decay)
    : params_(std::move(params)), kind_(kind), lr_(lr), weight_decay_(weight_decay) {
  if (params_.empty()) fail("optimizer: no trainable parameters");
  if (lr_ <= 0.0) fail("optimizer: learning rate must be positive");
  if (weight_decay_ < 0.0) fail("optimizer: weight decay must be non-negative");
}

void Optimizer::step() {
  std::vector<Tensor> values, grads;
  values.reserve(params_.size());
  grads.reserve(params_.size());
  for (const auto& [name, var] : params_) {
    values.push_back(var.value());
    grads.push_back(var.grad() ? *var.grad() : Tensor::zeros(var.value().shape()));
  }
  if (kind_ == Kind::Adam) {
    adam_step(values, grads, state_, lr_, 0.9, 0.999, 1e-8, weight_decay_);
  } else {
    sgd_step(values, grads, lr_, weight_decay_);
  }
  // set_value stores the update and clears the accumulated gradient.
  for (std::size_t i = 0; i < params_.size(); ++i) params_[i].second.set_value(values[i]);
}

}  // namespace tnkit::train
