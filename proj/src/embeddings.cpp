#include "tnkit/models.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace tnkit::models {

namespace {

constexpr double kPi = 3.14159265358979323846;

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument("embed: " + msg); }

double binomial(std::size_t n, std::size_t k) {
  double r = 1.0;
  for (std::size_t i = 1; i <= k; ++i) r = r * static_cast<double>(n - k + i) / static_cast<double>(i);
  return r;
}

void check_unit_interval(double x, const char* mode) {
  if (!(x >= 0.0 && x <= 1.0))
    fail(std::string(mode) + " expects values in [0, 1], got " + std::to_string(x));
}

}  // namespace

EmbedMode embed_mode_from_string(const std::string& name) {
  if (name == "unit") return EmbedMode::Unit;
  if (name == "add_ones") return EmbedMode::AddOnes;
  if (name == "poly") return EmbedMode::Poly;
  if (name == "discretize") return EmbedMode::Discretize;
  if (name == "basis") return EmbedMode::Basis;
  fail("unknown mode '" + name + "'");
}

const char* embed_mode_name(EmbedMode mode) {
  switch (mode) {
    case EmbedMode::Unit: return "unit";
    case EmbedMode::AddOnes: return "add_ones";
    case EmbedMode::Poly: return "poly";
    case EmbedMode::Discretize: return "discretize";
    case EmbedMode::Basis: return "basis";
  }
  return "?";
}

Tensor embed(const Tensor& data, EmbedMode mode, std::size_t dim) {
  if (data.rank() != 2) fail("expected a (batch, features) tensor, got rank " + std::to_string(data.rank()));
  if (dim == 0) fail("dim must be positive");
  if ((mode == EmbedMode::Unit || mode == EmbedMode::AddOnes) && dim < 2)
    fail(std::string(embed_mode_name(mode)) + " needs dim >= 2");
  if (mode == EmbedMode::AddOnes && dim != 2) fail("add_ones produces exactly 2 components");

  const std::size_t b = data.dim(0), n = data.dim(1);
  std::vector<double> out(b * n * dim, 0.0);

  // Precompute the sqrt-binomial weights of the unit embedding once.
  std::vector<double> w;
  if (mode == EmbedMode::Unit) {
    w.resize(dim);
    for (std::size_t k = 0; k < dim; ++k) w[k] = std::sqrt(binomial(dim - 1, k));
  }

  for (std::size_t i = 0; i < b * n; ++i) {
    const double x = data[i];
    double* v = out.data() + i * dim;
    switch (mode) {
      case EmbedMode::Unit: {
        check_unit_interval(x, "unit");
        const double c = std::cos(kPi * x / 2.0), s = std::sin(kPi * x / 2.0);
        for (std::size_t k = 0; k < dim; ++k)
          v[k] = w[k] * std::pow(c, static_cast<double>(dim - 1 - k)) * std::pow(s, static_cast<double>(k));
        break;
      }
      case EmbedMode::AddOnes: {
        check_unit_interval(x, "add_ones");
        v[0] = 1.0;
        v[1] = x;
        break;
      }
      case EmbedMode::Poly: {
        check_unit_interval(x, "poly");
        double p = 1.0;
        for (std::size_t k = 0; k < dim; ++k, p *= x) v[k] = p;
        break;
      }
      case EmbedMode::Discretize: {
        check_unit_interval(x, "discretize");
        auto bin = static_cast<std::size_t>(x * static_cast<double>(dim));
        if (bin >= dim) bin = dim - 1;  // x == 1.0 lands in the last bin
        v[bin] = 1.0;
        break;
      }
      case EmbedMode::Basis: {
        if (x != std::floor(x) || x < 0.0 || x >= static_cast<double>(dim))
          fail("basis expects integers in [0, " + std::to_string(dim) + "), got " + std::to_string(x));
        v[static_cast<std::size_t>(x)] = 1.0;
        break;
      }
    }
  }
  return Tensor::from_data({b, n, dim}, std::move(out));
}

}  // namespace tnkit::models
