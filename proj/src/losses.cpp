#include <cmath>
#include <string>
#include <vector>

#include "tnkit/autodiff.hpp"
#include "tnkit/tensor.hpp"
#include "tnkit/train.hpp"

namespace tnkit::train {

namespace ad = tnkit::autodiff;

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

// d(mean_b -log softmax[label]) / d(scores) = (softmax - onehot) / batch.
std::vector<std::optional<Tensor>> cross_entropy_backward(const ad::TapeEntry& entry,
                                                          const Tensor& upstream) {
  const Tensor& softmax = entry.saved.tensors.at(0);
  const auto& labels = entry.saved.axis_lists.at(0);
  const std::size_t b = softmax.dim(0), c = softmax.dim(1);
  const double u = upstream[0] / static_cast<double>(b);
  std::vector<double> g(b * c);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < c; ++j)
      g[i * c + j] = (softmax[i * c + j] - (j == labels[i] ? 1.0 : 0.0)) * u;
  return {Tensor::from_data({b, c}, std::move(g))};
}

// d(mean (pred - target)^2) / d(pred) = 2 (pred - target) / n.
std::vector<std::optional<Tensor>> mse_backward(const ad::TapeEntry& entry,
                                                const Tensor& upstream) {
  const Tensor& diff = entry.saved.tensors.at(0);
  const double u = 2.0 * upstream[0] / static_cast<double>(diff.size());
  return {scale(diff, u)};
}

void ensure_rules_registered() {
  static const bool once = [] {
    ad::register_backward_rule("cross_entropy", cross_entropy_backward);
    ad::register_backward_rule("mse", mse_backward);
    return true;
  }();
  (void)once;
}

}  // namespace

ad::Variable cross_entropy(const ad::Variable& scores, const std::vector<std::size_t>& labels) {
  ensure_rules_registered();
  const Tensor& s = scores.value();
  if (s.rank() != 2) fail("cross_entropy: scores must be (batch, classes)");
  const std::size_t b = s.dim(0), c = s.dim(1);
  if (labels.size() != b)
    fail("cross_entropy: got " + std::to_string(labels.size()) + " labels for a batch of " +
         std::to_string(b));

  std::vector<double> softmax(b * c);
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] >= c)
      fail("cross_entropy: label " + std::to_string(labels[i]) + " out of range for " +
           std::to_string(c) + " classes");
    double m = s[i * c];
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, s[i * c + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(s[i * c + j] - m);
    for (std::size_t j = 0; j < c; ++j) softmax[i * c + j] = std::exp(s[i * c + j] - m) / z;
    loss -= s[i * c + labels[i]] - m - std::log(z);
  }
  Tensor value = Tensor::scalar(loss / static_cast<double>(b));

  if (!ad::grad_enabled() || !scores.requires_grad()) return ad::Variable(std::move(value));
  ad::SavedState saved;
  saved.tensors.push_back(Tensor::from_data({b, c}, std::move(softmax)));
  saved.axis_lists.push_back(labels);
  return ad::record("cross_entropy", {scores}, std::move(value), std::move(saved));
}

ad::Variable mse(const ad::Variable& pred, const Tensor& target) {
  ensure_rules_registered();
  const Tensor& p = pred.value();
  if (p.shape() != target.shape()) fail("mse: prediction and target shapes differ");
  if (p.size() == 0) fail("mse: empty prediction");
  Tensor diff = sub(p, target);
  double total = 0.0;
  for (std::size_t i = 0; i < diff.size(); ++i) total += diff[i] * diff[i];
  Tensor value = Tensor::scalar(total / static_cast<double>(diff.size()));

  if (!ad::grad_enabled() || !pred.requires_grad()) return ad::Variable(std::move(value));
  ad::SavedState saved;
  saved.tensors.push_back(std::move(diff));
  return ad::record("mse", {pred}, std::move(value), std::move(saved));
}

}  // namespace tnkit::train
