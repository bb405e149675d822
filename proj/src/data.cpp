#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "tnkit/train.hpp"

namespace tnkit::train {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw ConfigError(msg); }

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(field);
      field.clear();
    } else if (ch != '\r') {
      field += ch;
    }
  }
  out.push_back(field);
  return out;
}

double parse_number(const std::string& text, const std::string& where) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    fail(where + ": cannot parse number '" + text + "'");
  }
  while (used < text.size() && std::isspace(static_cast<unsigned char>(text[used]))) ++used;
  if (used != text.size()) fail(where + ": trailing characters in number '" + text + "'");
  return v;
}

// Fixed 17-significant-digit formatting: round-trips doubles exactly and is
// platform-stable for the text artifacts we write.
std::string format_number(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

Dataset load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("dataset: cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) fail("dataset '" + path + "': missing header row");
  const std::size_t columns = split_fields(line).size();
  if (columns < 2) fail("dataset '" + path + "': need at least one feature and a label column");

  Dataset data;
  std::vector<double> values;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::vector<std::string> fields = split_fields(line);
    const std::string where = "dataset '" + path + "' row " + std::to_string(rows + 1);
    if (fields.size() != columns)
      fail(where + ": expected " + std::to_string(columns) + " columns, got " +
           std::to_string(fields.size()));
    for (std::size_t i = 0; i + 1 < fields.size(); ++i)
      values.push_back(parse_number(fields[i], where));
    const double label = parse_number(fields.back(), where);
    if (label != std::floor(label) || label < 0.0)
      fail(where + ": label must be a non-negative integer, got '" + fields.back() + "'");
    data.labels.push_back(static_cast<std::size_t>(label));
    ++rows;
  }
  if (rows == 0) fail("dataset '" + path + "': no data rows");
  data.features = Tensor::from_data({rows, columns - 1}, std::move(values));
  data.n_classes = 1 + *std::max_element(data.labels.begin(), data.labels.end());
  return data;
}

void save_csv(const Dataset& data, const std::string& path) {
  std::ofstream out(path);
  if (!out) fail("dataset: cannot write '" + path + "'");
  const std::size_t n = data.size(), f = data.n_features();
  for (std::size_t i = 0; i < f; ++i) out << "f" << i << ",";
  out << "label\n";
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t i = 0; i < f; ++i) out << format_number(data.features[r * f + i]) << ",";
    out << data.labels[r] << "\n";
  }
}

Dataset make_two_gaussians(std::size_t n_samples, std::size_t n_features, Rng& rng,
                           double noise) {
  if (n_samples == 0 || n_features == 0) fail("two_gaussians: empty dataset requested");
  Dataset data;
  std::vector<double> values;
  values.reserve(n_samples * n_features);
  for (std::size_t i = 0; i < n_samples; ++i) {
    const std::size_t label = i % 2;  // balanced classes
    const double mean = label == 0 ? 0.35 : 0.65;
    for (std::size_t k = 0; k < n_features; ++k) {
      const double x = mean + noise * rng.normal();
      values.push_back(std::clamp(x, 0.0, 1.0));
    }
    data.labels.push_back(label);
  }
  data.features = Tensor::from_data({n_samples, n_features}, std::move(values));
  data.n_classes = 2;
  return data;
}

Dataset make_parity(std::size_t n_samples, std::size_t n_bits, Rng& rng) {
  if (n_samples == 0 || n_bits == 0) fail("parity: empty dataset requested");
  Dataset data;
  std::vector<double> values;
  values.reserve(n_samples * n_bits);
  for (std::size_t i = 0; i < n_samples; ++i) {
    std::size_t parity = 0;
    for (std::size_t k = 0; k < n_bits; ++k) {
      const std::size_t bit = rng.uniform_index(2);
      parity ^= bit;
      values.push_back(static_cast<double>(bit));
    }
    data.labels.push_back(parity);
  }
  data.features = Tensor::from_data({n_samples, n_bits}, std::move(values));
  data.n_classes = 2;
  return data;
}

Tensor gather_rows(const Tensor& features, const std::vector<std::size_t>& rows) {
  if (features.rank() != 2) fail("gather_rows: features must be (samples, features)");
  const std::size_t n = features.dim(0), f = features.dim(1);
  std::vector<double> out;
  out.reserve(rows.size() * f);
  for (std::size_t r : rows) {
    if (r >= n) fail("gather_rows: row index out of range");
    for (std::size_t i = 0; i < f; ++i) out.push_back(features[r * f + i]);
  }
  return Tensor::from_data({rows.size(), f}, std::move(out));
}

Tensor read_matrix(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("matrix: cannot open '" + path + "'");
  std::vector<double> values;
  std::size_t rows = 0, columns = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const std::vector<std::string> fields = split_fields(line);
    if (columns == 0) columns = fields.size();
    const std::string where = "matrix '" + path + "' row " + std::to_string(rows);
    if (fields.size() != columns)
      fail(where + ": expected " + std::to_string(columns) + " columns, got " +
           std::to_string(fields.size()));
    for (const std::string& fieldtext : fields) values.push_back(parse_number(fieldtext, where));
    ++rows;
  }
  if (rows == 0) fail("matrix '" + path + "': no rows");
  return Tensor::from_data({rows, columns}, std::move(values));
}

void write_matrix(const Tensor& m, const std::string& path) {
  if (m.rank() != 2) fail("matrix: only rank-2 tensors can be written");
  std::ofstream out(path);
  if (!out) fail("matrix: cannot write '" + path + "'");
  const std::size_t rows = m.dim(0), columns = m.dim(1);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < columns; ++i)
      out << format_number(m[r * columns + i]) << (i + 1 == columns ? "" : ",");
    out << "\n";
  }
}

}  // namespace tnkit::train
