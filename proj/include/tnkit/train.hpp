#pragma once

// Training, evaluation, and benchmarking for tensor-network models: losses
// with registered backward rules, Adam/SGD updates, CSV and synthetic
// datasets, a flat key=value config reader, JSON-lines metrics, and the
// command entry points wrapped by the CLI.

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tnkit/autodiff.hpp"
#include "tnkit/models.hpp"
#include "tnkit/tensor.hpp"

namespace tnkit::train {

// Malformed configs, datasets, or command arguments (process exit code 1).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// Non-finite numbers produced during training/evaluation (process exit code 2).
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// --- losses ------------------------------------------------------------------------

// Mean over the batch of -log softmax(scores)[label], stabilized by row-max
// subtraction. scores is (batch, classes); labels must lie in [0, classes).
// Differentiable through a registered backward rule.
autodiff::Variable cross_entropy(const autodiff::Variable& scores,
                                 const std::vector<std::size_t>& labels);

// Mean squared error against a constant target of the same shape.
autodiff::Variable mse(const autodiff::Variable& pred, const Tensor& target);

// --- optimizers --------------------------------------------------------------------

struct AdamState {
  std::vector<Tensor> m, v;  // first/second moments, same shapes as the params
  std::size_t step = 0;
};

// Standard bias-corrected Adam, applied in place. weight_decay adds
// wd * param to the gradient before the moment updates (L2-in-gradient).
void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamState& state,
               double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
               double weight_decay = 0.0);

// Plain gradient descent: param -= lr * (grad + wd * param).
void sgd_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, double lr,
              double weight_decay = 0.0);

// Drives adam_step/sgd_step over a network's trainable slots. Reads each
// variable's accumulated gradient (an absent gradient counts as zero) and
// writes the updated value back, which also clears the gradient.
class Optimizer {
 public:
  enum class Kind { Adam, Sgd };

  Optimizer(std::vector<std::pair<std::string, autodiff::Variable>> params, Kind kind, double lr,
            double weight_decay);
  void step();
  std::size_t n_params() const { return params_.size(); }

 private:
  std::vector<std::pair<std::string, autodiff::Variable>> params_;
  Kind kind_;
  double lr_, weight_decay_;
  AdamState state_;
};

// --- datasets ----------------------------------------------------------------------

struct Dataset {
  Tensor features;                  // (n_samples, n_features)
  std::vector<std::size_t> labels;  // one integer class per sample
  std::size_t n_classes = 0;        // 1 + max(labels)

  std::size_t size() const { return labels.size(); }
  std::size_t n_features() const { return features.rank() == 2 ? features.dim(1) : 0; }
};

// CSV with a header row, float feature columns, and an integer label in the
// last column.
Dataset load_csv(const std::string& path);
void save_csv(const Dataset& data, const std::string& path);

// Two spherical Gaussian blobs clamped into [0,1]^n (class means 0.35 and
// 0.65), balanced labels.
Dataset make_two_gaussians(std::size_t n_samples, std::size_t n_features, Rng& rng,
                           double noise = 0.1);

// Uniform random bits; the label is their parity.
Dataset make_parity(std::size_t n_samples, std::size_t n_bits, Rng& rng);

// Rows of a feature matrix selected by index, in order: (|rows|, n_features).
Tensor gather_rows(const Tensor& features, const std::vector<std::size_t>& rows);

// Whole numeric matrices as text: one row per line, comma-separated.
Tensor read_matrix(const std::string& path);
void write_matrix(const Tensor& m, const std::string& path);

// --- config ------------------------------------------------------------------------

// Flat key=value file: one pair per line, '#' starts a comment, blank lines
// are ignored. Reads are tracked so typos can be reported as unread keys.
class KvConfig {
 public:
  static KvConfig from_file(const std::string& path);
  static KvConfig from_string(const std::string& text);

  bool has(const std::string& key) const {
    for (const auto& [k, v] : values_)
      if (k == key) return true;
    return false;
  }
  std::string str(const std::string& key, std::string fallback);
  long long integer(const std::string& key, long long fallback);
  double number(const std::string& key, double fallback);
  bool boolean(const std::string& key, bool fallback);
  std::vector<std::string> unread_keys() const;

 private:
  std::string raw(const std::string& key, const std::string& fallback);
  std::vector<std::pair<std::string, std::string>> values_;
  std::set<std::string> read_;
};

struct TrainConfig {
  std::string model = "mpslayer";  // mpslayer | ttn
  std::size_t n_features = 16;     // dataset feature count
  std::size_t out_dim = 2;         // number of classes
  std::size_t bond_dim = 8;
  std::optional<std::size_t> out_position;  // mpslayer only; default = middle
  std::size_t arity = 2, depth = 4;         // ttn only; arity^depth must equal n_features
  double init_std = 1e-9;

  models::EmbedMode embedding = models::EmbedMode::Unit;
  std::size_t embedding_dim = 2;

  std::size_t epochs = 100, batch_size = 16;
  double learning_rate = 1e-4, weight_decay = 1e-2;
  std::string optimizer = "adam";  // adam | sgd
  std::uint64_t seed = 1;          // fixes init, dataset, and shuffling

  bool auto_stack = true, auto_unbind = false;
  bool inline_input = true, inline_mats = true;
  bool trace = true;    // record the contraction once with a batch-1 example
  bool timings = true;  // false writes wall_ms = 0 for byte-reproducible metrics

  std::string dataset;                      // CSV path; empty selects a generator
  std::string synthetic = "two_gaussians";  // two_gaussians | parity
  std::size_t n_samples = 256;
  double noise = 0.1;  // two_gaussians spread

  // Validates and consumes every key; unknown keys raise ConfigError.
  static TrainConfig from_kv(KvConfig& kv);
};

struct MetricsRecord {
  std::size_t epoch = 0;
  double loss = 0.0;
  double accuracy = 0.0;  // fraction in [0, 1]
  double wall_ms = 0.0;
  std::size_t peak_live_tensor_bytes = 0;

  std::string json_line() const;
};

// --- library-level training/evaluation ----------------------------------------------

std::unique_ptr<models::Model> build_model(const TrainConfig& cfg);
Dataset obtain_dataset(const TrainConfig& cfg);

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
};

// Full-pass batched evaluation with gradients disabled. Accuracy breaks
// argmax ties toward the lower class index.
EvalResult evaluate(models::Model& model, const Dataset& data, models::EmbedMode mode,
                    std::size_t embedding_dim, std::size_t batch_size);

struct TrainOutcome {
  std::vector<MetricsRecord> records;  // epoch 0 holds the initial evaluation
  std::unique_ptr<models::Model> model;
  Dataset data;  // the exact training set (generated or loaded)
};

// Build, (optionally) trace, then run epochs of shuffle/forward/loss/backward/
// step, evaluating the full training set after each epoch. The optimizer is
// constructed after tracing. Throws ConfigError/NumericError.
TrainOutcome run_training(const TrainConfig& cfg);

// --- benchmarking --------------------------------------------------------------------

struct BenchCellConfig {
  std::size_t n_features = 100;  // dataset feature count
  std::size_t out_dim = 10;
  std::size_t bond_dim = 50;
  std::size_t batch_size = 64;
  std::size_t reps = 5;  // >= 5; wall_ms_median is the median over these
  std::uint64_t seed = 1;
  bool auto_stack = true, auto_unbind = false;
  bool inline_input = true, inline_mats = true;
  bool traced = true;
  enum class Phase { Inference, Train } phase = Phase::Inference;
};

struct BenchCellResult {
  double first_call_ms = 0.0;   // the tracing call, or the first untraced call
  double wall_ms_median = 0.0;  // median over the steady-state repetitions
  std::size_t peak_live_tensor_bytes = 0;
  // Deterministic small-batch forward with the initial parameters; must agree
  // across every mode combination of the same bond dimension.
  Tensor probe_output;
};

BenchCellResult bench_cell(const BenchCellConfig& cfg);

// Exact header line of the benchmark CSV (schema-stable).
extern const char* const kBenchCsvHeader;

// --- commands ------------------------------------------------------------------------
// Return process exit codes: 0 success, 1 config error, 2 numeric failure.

int cmd_train(const std::string& config_path, const std::string& out_dir, std::ostream& log);
int cmd_bench(const std::string& config_path, const std::string& out_csv, std::ostream& log);
int cmd_tensorize(const std::string& matrix_path, std::size_t n, std::size_t d,
                  std::optional<std::size_t> max_rank, const std::string& out_dir,
                  std::ostream& log);
int cmd_eval(const std::string& model_dir, const std::string& data_path, std::ostream& log);

}  // namespace tnkit::train
