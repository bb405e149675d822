#include <algorithm>
#include <chrono>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tnkit/autodiff.hpp"
#include "tnkit/network.hpp"
#include "tnkit/train.hpp"
#include "train_internal.hpp"

namespace tnkit::train {

namespace ad = tnkit::autodiff;

const char* const kBenchCsvHeader =
    "bond_dim,auto_stack,auto_unbind,inline_input,inline_mats,traced,phase,"
    "wall_ms_median,peak_live_tensor_bytes,max_abs_dev";

namespace {

[[noreturn]] void fail(const std::string& msg) { throw ConfigError(msg); }

double median(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

std::vector<std::size_t> parse_size_list(const std::string& text, const std::string& key) {
  std::vector<std::size_t> out;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      std::size_t used = 0;
      const long long v = std::stoll(item, &used);
      if (used != item.size() || v <= 0) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      fail("config: key '" + key + "' needs positive integers, got '" + item + "'");
    }
  }
  if (out.empty()) fail("config: key '" + key + "' is empty");
  return out;
}

const char* text(bool b) { return b ? "true" : "false"; }

}  // namespace

BenchCellResult bench_cell(const BenchCellConfig& cfg) {
  if (cfg.reps < 5) fail("bench: reps must be >= 5");
  models::MpsLayerSpec spec;
  spec.n_features = cfg.n_features + 1;
  spec.in_dim = 2;
  spec.out_dim = cfg.out_dim;
  spec.bond_dim = cfg.bond_dim;
  spec.seed = cfg.seed;
  models::MpsLayer model(spec);
  model.inline_input = cfg.inline_input;
  model.inline_mats = cfg.inline_mats;
  graph::TensorNetwork& net = model.network();
  net.auto_stack = cfg.auto_stack;
  net.auto_unbind = cfg.auto_unbind;

  Rng batch_rng(cfg.seed + 104729);
  const Tensor batch = models::embed(Tensor::uniform({cfg.batch_size, cfg.n_features}, batch_rng),
                                     models::EmbedMode::Unit, 2);
  std::vector<std::size_t> labels(cfg.batch_size);
  for (std::size_t& l : labels) l = batch_rng.uniform_index(cfg.out_dim);
  Rng probe_rng(cfg.seed + 1299709);
  const Tensor probe = models::embed(Tensor::uniform({8, cfg.n_features}, probe_rng),
                                     models::EmbedMode::Unit, 2);

  const bool training = cfg.phase == BenchCellConfig::Phase::Train;
  BenchCellResult out;
  detail::Stopwatch watch;

  // First call, as a user experiences it: for the traced pipeline that is the
  // tracing pass plus the first real-batch forward; untraced it is the call
  // that builds the operation caches.
  {
    std::optional<ad::GradMode> off;
    if (!training) off.emplace(false);
    watch.restart();
    if (cfg.traced) {
      model.trace(
          models::embed(Tensor::zeros({1, cfg.n_features}), models::EmbedMode::Unit, 2));
    }
    model.forward(batch);
    out.first_call_ms = watch.ms();
  }

  // Cross-combination agreement probe, before any parameter changes.
  {
    ad::GradMode off(false);
    out.probe_output = model.forward(probe);
  }

  std::vector<double> times(cfg.reps);
  if (training) {
    net.zero_grad();  // drop anything accumulated by an untraced first call
    Optimizer opt(net.trainable_parameters(), Optimizer::Kind::Adam, 1e-4, 0.0);
    net.reset_peak_bytes();
    for (std::size_t rep = 0; rep < cfg.reps; ++rep) {
      watch.restart();
      model.forward(batch);
      ad::Variable scores = net.node_variable(model.output_node());
      ad::Variable loss = cross_entropy(scores, labels);
      ad::backward(loss);
      opt.step();
      times[rep] = watch.ms();
    }
  } else {
    ad::GradMode off(false);
    net.reset_peak_bytes();
    for (std::size_t rep = 0; rep < cfg.reps; ++rep) {
      watch.restart();
      model.forward(batch);
      times[rep] = watch.ms();
    }
  }
  out.peak_live_tensor_bytes = net.peak_live_tensor_bytes();
  out.wall_ms_median = median(std::move(times));
  return out;
}

int cmd_bench(const std::string& config_path, const std::string& out_csv, std::ostream& log) {
  return detail::guard(log, [&]() -> int {
    KvConfig kv = KvConfig::from_file(config_path);
    const std::vector<std::size_t> bond_dims =
        parse_size_list(kv.str("bond_dims", "10,50,100"), "bond_dims");
    BenchCellConfig base;
    base.n_features = static_cast<std::size_t>(kv.integer("n_features", 100));
    base.out_dim = static_cast<std::size_t>(kv.integer("out_dim", 10));
    base.batch_size = static_cast<std::size_t>(kv.integer("batch_size", 64));
    base.reps = static_cast<std::size_t>(kv.integer("reps", 5));
    base.seed = static_cast<std::uint64_t>(kv.integer("seed", 1));
    const std::vector<std::string> leftover = kv.unread_keys();
    if (!leftover.empty()) {
      std::string names;
      for (const std::string& k : leftover) names += (names.empty() ? "" : ", ") + k;
      fail("config: unknown keys: " + names);
    }
    if (base.n_features == 0 || base.out_dim < 2 || base.batch_size == 0)
      fail("config: n_features/out_dim/batch_size must be positive (out_dim >= 2)");
    if (base.reps < 5) fail("config: reps must be >= 5");

    std::ofstream csv(out_csv);
    if (!csv) fail("bench: cannot write '" + out_csv + "'");
    csv << kBenchCsvHeader << "\n";

    const std::pair<bool, bool> stack_modes[] = {
        {true, false}, {true, true}, {false, false}, {false, true}};
    const std::pair<bool, bool> inline_modes[] = {{true, true}, {false, false}};

    for (const std::size_t bond : bond_dims) {
      std::optional<Tensor> reference;
      for (const auto& [auto_stack, auto_unbind] : stack_modes) {
        for (const auto& [inline_input, inline_mats] : inline_modes) {
          for (const bool traced : {false, true}) {
            for (const auto phase :
                 {BenchCellConfig::Phase::Inference, BenchCellConfig::Phase::Train}) {
              BenchCellConfig cell = base;
              cell.bond_dim = bond;
              cell.auto_stack = auto_stack;
              cell.auto_unbind = auto_unbind;
              cell.inline_input = inline_input;
              cell.inline_mats = inline_mats;
              cell.traced = traced;
              cell.phase = phase;
              const BenchCellResult r = bench_cell(cell);

              if (!reference) reference = r.probe_output;
              const double dev = max_abs_diff(r.probe_output, *reference);

              csv << bond << ',' << text(auto_stack) << ',' << text(auto_unbind) << ','
                  << text(inline_input) << ',' << text(inline_mats) << ',' << text(traced) << ','
                  << (phase == BenchCellConfig::Phase::Train ? "train" : "inference") << ',';
              csv.precision(3);
              csv << std::fixed << r.wall_ms_median;
              csv.unsetf(std::ios::fixed);
              csv << ',' << r.peak_live_tensor_bytes << ',';
              csv.precision(3);
              csv << std::scientific << dev << "\n";
              csv.unsetf(std::ios::scientific);
            }
          }
        }
      }
      log << "bench: bond_dim " << bond << " done\n";
    }
    log << "bench: wrote " << out_csv << "\n";
    return 0;
  });
}

}  // namespace tnkit::train
