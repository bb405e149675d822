#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "tnkit/network.hpp"
#include "tnkit/ops.hpp"
#include "tnkit/train.hpp"
#include "train_internal.hpp"

namespace tnkit::train {

namespace ad = tnkit::autodiff;
using json = nlohmann::json;
using detail::Stopwatch;
using detail::guard;

namespace {

[[noreturn]] void fail(const std::string& msg) { throw ConfigError(msg); }

std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

void ensure_finite(double v, const std::string& where) {
  if (!std::isfinite(v)) throw NumericError(where + " produced a non-finite value");
}

}  // namespace

// --- config -----------------------------------------------------------------------

KvConfig KvConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("config: cannot open '" + path + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  return from_string(buffer.str());
}

KvConfig KvConfig::from_string(const std::string& text) {
  KvConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      fail("config line " + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) fail("config line " + std::to_string(lineno) + ": empty key");
    for (const auto& [k, v] : cfg.values_)
      if (k == key) fail("config: duplicate key '" + key + "'");
    cfg.values_.emplace_back(key, value);
  }
  return cfg;
}

std::string KvConfig::raw(const std::string& key, const std::string& fallback) {
  read_.insert(key);
  for (const auto& [k, v] : values_)
    if (k == key) return v;
  return fallback;
}

std::string KvConfig::str(const std::string& key, std::string fallback) {
  return raw(key, fallback);
}

long long KvConfig::integer(const std::string& key, long long fallback) {
  const std::string v = raw(key, std::to_string(fallback));
  try {
    std::size_t used = 0;
    const long long parsed = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return parsed;
  } catch (const std::exception&) {
    fail("config: key '" + key + "' needs an integer, got '" + v + "'");
  }
}

double KvConfig::number(const std::string& key, double fallback) {
  std::ostringstream os;
  os.precision(17);
  os << fallback;
  const std::string v = raw(key, os.str());
  try {
    std::size_t used = 0;
    const double parsed = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return parsed;
  } catch (const std::exception&) {
    fail("config: key '" + key + "' needs a number, got '" + v + "'");
  }
}

bool KvConfig::boolean(const std::string& key, bool fallback) {
  std::string v = raw(key, fallback ? "true" : "false");
  std::transform(v.begin(), v.end(), v.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  fail("config: key '" + key + "' needs a boolean, got '" + v + "'");
}

std::vector<std::string> KvConfig::unread_keys() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : values_)
    if (read_.count(k) == 0) out.push_back(k);
  return out;
}

TrainConfig TrainConfig::from_kv(KvConfig& kv) {
  TrainConfig cfg;
  cfg.model = kv.str("model", cfg.model);
  cfg.n_features = static_cast<std::size_t>(kv.integer("n_features", 16));
  cfg.out_dim = static_cast<std::size_t>(kv.integer("out_dim", 2));
  cfg.bond_dim = static_cast<std::size_t>(kv.integer("bond_dim", 8));
  if (kv.has("out_position"))
    cfg.out_position = static_cast<std::size_t>(kv.integer("out_position", 0));
  cfg.arity = static_cast<std::size_t>(kv.integer("arity", 2));
  cfg.depth = static_cast<std::size_t>(kv.integer("depth", 4));
  cfg.init_std = kv.number("init_std", cfg.init_std);

  const std::string emb = kv.str("embedding", "unit");
  try {
    cfg.embedding = models::embed_mode_from_string(emb);
  } catch (const std::exception& e) {
    fail(std::string("config: ") + e.what());
  }
  cfg.embedding_dim = static_cast<std::size_t>(kv.integer("embedding_dim", 2));

  cfg.epochs = static_cast<std::size_t>(kv.integer("epochs", 100));
  cfg.batch_size = static_cast<std::size_t>(kv.integer("batch_size", 16));
  cfg.learning_rate = kv.number("learning_rate", cfg.learning_rate);
  cfg.weight_decay = kv.number("weight_decay", cfg.weight_decay);
  cfg.optimizer = kv.str("optimizer", cfg.optimizer);
  cfg.seed = static_cast<std::uint64_t>(kv.integer("seed", 1));

  cfg.auto_stack = kv.boolean("auto_stack", cfg.auto_stack);
  cfg.auto_unbind = kv.boolean("auto_unbind", cfg.auto_unbind);
  cfg.inline_input = kv.boolean("inline_input", cfg.inline_input);
  cfg.inline_mats = kv.boolean("inline_mats", cfg.inline_mats);
  cfg.trace = kv.boolean("trace", cfg.trace);
  cfg.timings = kv.boolean("timings", cfg.timings);

  cfg.dataset = kv.str("dataset", "");
  cfg.synthetic = kv.str("synthetic", cfg.synthetic);
  cfg.n_samples = static_cast<std::size_t>(kv.integer("n_samples", 256));
  cfg.noise = kv.number("noise", cfg.noise);

  const std::vector<std::string> leftover = kv.unread_keys();
  if (!leftover.empty()) {
    std::string names;
    for (const std::string& k : leftover) names += (names.empty() ? "" : ", ") + k;
    fail("config: unknown keys: " + names);
  }

  if (cfg.model != "mpslayer" && cfg.model != "ttn")
    fail("config: model must be 'mpslayer' or 'ttn', got '" + cfg.model + "'");
  if (cfg.n_features == 0) fail("config: n_features must be positive");
  if (cfg.out_dim < 2) fail("config: out_dim must name at least 2 classes");
  if (cfg.bond_dim == 0) fail("config: bond_dim must be positive");
  if (cfg.embedding_dim == 0) fail("config: embedding_dim must be positive");
  if (cfg.batch_size == 0) fail("config: batch_size must be positive");
  if (cfg.learning_rate <= 0.0) fail("config: learning_rate must be positive");
  if (cfg.weight_decay < 0.0) fail("config: weight_decay must be non-negative");
  if (cfg.optimizer != "adam" && cfg.optimizer != "sgd")
    fail("config: optimizer must be 'adam' or 'sgd', got '" + cfg.optimizer + "'");
  if (cfg.init_std < 0.0) fail("config: init_std must be non-negative");
  if (cfg.model == "ttn") {
    if (cfg.arity < 2 || cfg.depth < 1) fail("config: ttn needs arity >= 2 and depth >= 1");
    std::size_t leaves = 1;
    for (std::size_t i = 0; i < cfg.depth; ++i) {
      leaves *= cfg.arity;
      if (leaves > 1'000'000) fail("config: arity^depth is too large");
    }
    if (leaves != cfg.n_features)
      fail("config: ttn needs n_features = arity^depth = " + std::to_string(leaves) + ", got " +
           std::to_string(cfg.n_features));
  }
  if (cfg.dataset.empty() && cfg.synthetic != "two_gaussians" && cfg.synthetic != "parity")
    fail("config: synthetic must be 'two_gaussians' or 'parity', got '" + cfg.synthetic + "'");
  if (cfg.n_samples == 0) fail("config: n_samples must be positive");
  return cfg;
}

std::string MetricsRecord::json_line() const {
  json j;
  j["epoch"] = epoch;
  j["loss"] = loss;
  j["accuracy"] = accuracy;
  j["wall_ms"] = wall_ms;
  j["peak_live_tensor_bytes"] = peak_live_tensor_bytes;
  return j.dump();
}

// --- model/dataset assembly ---------------------------------------------------------

std::unique_ptr<models::Model> build_model(const TrainConfig& cfg) {
  std::unique_ptr<models::Model> model;
  if (cfg.model == "mpslayer") {
    models::MpsLayerSpec spec;
    spec.n_features = cfg.n_features + 1;  // the input positions plus the output core
    spec.in_dim = cfg.embedding_dim;
    spec.out_dim = cfg.out_dim;
    spec.bond_dim = cfg.bond_dim;
    spec.out_position = cfg.out_position;
    spec.init_std = cfg.init_std;
    spec.seed = cfg.seed;
    model = std::make_unique<models::MpsLayer>(spec);
  } else if (cfg.model == "ttn") {
    models::TtnSpec spec;
    spec.arity = cfg.arity;
    spec.depth = cfg.depth;
    spec.phys_dim = cfg.embedding_dim;
    spec.bond_dim = cfg.bond_dim;
    spec.out_dim = cfg.out_dim;
    spec.init_std = cfg.init_std;
    spec.seed = cfg.seed;
    model = std::make_unique<models::Ttn>(spec);
  } else {
    fail("config: model must be 'mpslayer' or 'ttn', got '" + cfg.model + "'");
  }
  model->inline_input = cfg.inline_input;
  model->inline_mats = cfg.inline_mats;
  model->network().auto_stack = cfg.auto_stack;
  model->network().auto_unbind = cfg.auto_unbind;
  return model;
}

Dataset obtain_dataset(const TrainConfig& cfg) {
  Dataset data;
  if (!cfg.dataset.empty()) {
    data = load_csv(cfg.dataset);
  } else {
    Rng rng(cfg.seed + 1);
    data = cfg.synthetic == "two_gaussians"
               ? make_two_gaussians(cfg.n_samples, cfg.n_features, rng, cfg.noise)
               : make_parity(cfg.n_samples, cfg.n_features, rng);
  }
  if (data.n_features() != cfg.n_features)
    fail("config: n_features = " + std::to_string(cfg.n_features) + " but the dataset has " +
         std::to_string(data.n_features()) + " feature columns");
  if (data.n_classes > cfg.out_dim)
    fail("config: dataset labels need out_dim >= " + std::to_string(data.n_classes) + ", got " +
         std::to_string(cfg.out_dim));
  return data;
}

// --- evaluation and training ----------------------------------------------------------

EvalResult evaluate(models::Model& model, const Dataset& data, models::EmbedMode mode,
                    std::size_t embedding_dim, std::size_t batch_size) {
  if (batch_size == 0) fail("evaluate: batch_size must be positive");
  ad::GradMode off(false);
  const std::size_t n = data.size();
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t stop = std::min(n, start + batch_size);
    std::vector<std::size_t> rows(stop - start);
    std::iota(rows.begin(), rows.end(), start);
    const Tensor scores =
        model.forward(models::embed(gather_rows(data.features, rows), mode, embedding_dim));
    const std::size_t classes = scores.dim(1);
    std::vector<std::size_t> labels(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      labels[i] = data.labels[rows[i]];
      std::size_t best = 0;
      for (std::size_t c = 1; c < classes; ++c)
        if (scores[i * classes + c] > scores[i * classes + best]) best = c;
      if (best == labels[i]) ++correct;
    }
    const double batch_loss = cross_entropy(ad::Variable(scores), labels).value()[0];
    ensure_finite(batch_loss, "evaluate");
    loss_sum += batch_loss * static_cast<double>(rows.size());
  }
  return {loss_sum / static_cast<double>(n), static_cast<double>(correct) / static_cast<double>(n)};
}

TrainOutcome run_training(const TrainConfig& cfg) {
  TrainOutcome out;
  out.data = obtain_dataset(cfg);
  const Dataset& data = out.data;
  out.model = build_model(cfg);
  models::Model& model = *out.model;
  graph::TensorNetwork& net = model.network();

  if (cfg.trace) {
    model.trace(
        models::embed(Tensor::zeros({1, cfg.n_features}), cfg.embedding, cfg.embedding_dim));
  }

  {
    Stopwatch watch;
    net.reset_peak_bytes();
    const EvalResult ev = evaluate(model, data, cfg.embedding, cfg.embedding_dim, cfg.batch_size);
    out.records.push_back({0, ev.loss, ev.accuracy, cfg.timings ? watch.ms() : 0.0,
                           net.peak_live_tensor_bytes()});
  }

  // Bind the optimizer only now: tracing (or the first forward pass) may have
  // re-pointed same-shape parameters into one stacked slot.
  const Optimizer::Kind kind =
      cfg.optimizer == "adam" ? Optimizer::Kind::Adam : Optimizer::Kind::Sgd;
  Optimizer opt(net.trainable_parameters(), kind, cfg.learning_rate, cfg.weight_decay);

  Rng shuffle_rng(cfg.seed + 2);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Stopwatch watch;
    net.reset_peak_bytes();
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.uniform_index(i)]);

    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      const std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                                          order.begin() + static_cast<std::ptrdiff_t>(stop));
      std::vector<std::size_t> labels(rows.size());
      for (std::size_t i = 0; i < rows.size(); ++i) labels[i] = data.labels[rows[i]];

      model.forward(
          models::embed(gather_rows(data.features, rows), cfg.embedding, cfg.embedding_dim));
      ad::Variable scores = net.node_variable(model.output_node());
      ad::Variable loss = cross_entropy(scores, labels);
      if (!std::isfinite(loss.value()[0]))
        throw NumericError("training loss is non-finite at epoch " + std::to_string(epoch) +
                           ", batch starting at sample " + std::to_string(start));
      ad::backward(loss);
      opt.step();
    }

    const EvalResult ev = evaluate(model, data, cfg.embedding, cfg.embedding_dim, cfg.batch_size);
    ensure_finite(ev.loss, "epoch " + std::to_string(epoch) + " evaluation");
    out.records.push_back({epoch, ev.loss, ev.accuracy, cfg.timings ? watch.ms() : 0.0,
                           net.peak_live_tensor_bytes()});
  }
  return out;
}

// --- commands -------------------------------------------------------------------------

namespace {

json meta_from_config(const TrainConfig& cfg) {
  json j;
  j["model"] = cfg.model;
  j["n_features"] = cfg.n_features;
  j["out_dim"] = cfg.out_dim;
  j["bond_dim"] = cfg.bond_dim;
  if (cfg.out_position) j["out_position"] = *cfg.out_position;
  j["arity"] = cfg.arity;
  j["depth"] = cfg.depth;
  j["init_std"] = cfg.init_std;
  j["embedding"] = models::embed_mode_name(cfg.embedding);
  j["embedding_dim"] = cfg.embedding_dim;
  j["seed"] = cfg.seed;
  j["batch_size"] = cfg.batch_size;
  j["auto_stack"] = cfg.auto_stack;
  j["auto_unbind"] = cfg.auto_unbind;
  j["inline_input"] = cfg.inline_input;
  j["inline_mats"] = cfg.inline_mats;
  return j;
}

TrainConfig config_from_meta(const json& j) {
  TrainConfig cfg;
  try {
    cfg.model = j.at("model").get<std::string>();
    cfg.n_features = j.at("n_features").get<std::size_t>();
    cfg.out_dim = j.at("out_dim").get<std::size_t>();
    cfg.bond_dim = j.at("bond_dim").get<std::size_t>();
    if (j.contains("out_position")) cfg.out_position = j.at("out_position").get<std::size_t>();
    cfg.arity = j.at("arity").get<std::size_t>();
    cfg.depth = j.at("depth").get<std::size_t>();
    cfg.init_std = j.at("init_std").get<double>();
    cfg.embedding = models::embed_mode_from_string(j.at("embedding").get<std::string>());
    cfg.embedding_dim = j.at("embedding_dim").get<std::size_t>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    cfg.batch_size = j.at("batch_size").get<std::size_t>();
    cfg.auto_stack = j.at("auto_stack").get<bool>();
    cfg.auto_unbind = j.at("auto_unbind").get<bool>();
    cfg.inline_input = j.at("inline_input").get<bool>();
    cfg.inline_mats = j.at("inline_mats").get<bool>();
  } catch (const json::exception& e) {
    fail(std::string("model meta: ") + e.what());
  }
  return cfg;
}

}  // namespace

int cmd_train(const std::string& config_path, const std::string& out_dir, std::ostream& log) {
  return guard(log, [&]() -> int {
    KvConfig kv = KvConfig::from_file(config_path);
    const TrainConfig cfg = TrainConfig::from_kv(kv);
    std::filesystem::create_directories(out_dir);

    TrainOutcome outcome = run_training(cfg);

    const std::string metrics_path = out_dir + "/metrics.jsonl";
    {
      std::ofstream metrics(metrics_path);
      if (!metrics) fail("train: cannot write '" + metrics_path + "'");
      for (const MetricsRecord& rec : outcome.records) metrics << rec.json_line() << "\n";
    }

    // The exact training set, so a later eval can reproduce the final accuracy.
    save_csv(outcome.data, out_dir + "/train_data.csv");

    // Undo any stacked re-pointing before persisting, so the state dict holds
    // one entry per parameter node.
    graph::TensorNetwork& net = outcome.model->network();
    net.reset();
    graph::save_state_dict(net, out_dir + "/model.tnd");
    {
      std::ofstream meta(out_dir + "/model_meta.json");
      if (!meta) fail("train: cannot write model_meta.json");
      meta << meta_from_config(cfg).dump(2) << "\n";
    }

    const MetricsRecord& last = outcome.records.back();
    log << "train: " << outcome.records.size() << " records -> " << metrics_path
        << " (final loss " << last.loss << ", accuracy " << last.accuracy << ")\n";
    return 0;
  });
}

int cmd_eval(const std::string& model_dir, const std::string& data_path, std::ostream& log) {
  return guard(log, [&]() -> int {
    const std::string meta_path = model_dir + "/model_meta.json";
    std::ifstream meta_in(meta_path);
    if (!meta_in) fail("eval: cannot open '" + meta_path + "'");
    json meta;
    try {
      meta_in >> meta;
    } catch (const json::exception& e) {
      fail("eval: bad model meta: " + std::string(e.what()));
    }
    const TrainConfig cfg = config_from_meta(meta);

    std::unique_ptr<models::Model> model = build_model(cfg);
    graph::load_state_dict(model->network(), model_dir + "/model.tnd");

    Dataset data = load_csv(data_path);
    if (data.n_features() != cfg.n_features)
      fail("eval: the model reads " + std::to_string(cfg.n_features) +
           " features but the dataset has " + std::to_string(data.n_features()));
    if (data.n_classes > cfg.out_dim)
      fail("eval: dataset labels exceed the model's " + std::to_string(cfg.out_dim) + " classes");

    const EvalResult ev =
        evaluate(*model, data, cfg.embedding, cfg.embedding_dim, cfg.batch_size);
    json result;
    result["n_samples"] = data.size();
    result["loss"] = ev.loss;
    result["accuracy"] = ev.accuracy;
    log << result.dump() << "\n";
    return 0;
  });
}

int cmd_tensorize(const std::string& matrix_path, std::size_t n, std::size_t d,
                  std::optional<std::size_t> max_rank, const std::string& out_dir,
                  std::ostream& log) {
  return guard(log, [&]() -> int {
    const Tensor w = read_matrix(matrix_path);
    std::size_t side = 1;
    for (std::size_t i = 0; i < n; ++i) {
      side *= d;
      if (side > (1u << 20)) fail("tensorize: d^n is too large");
    }
    if (w.dim(0) != side || w.dim(1) != side)
      fail("tensorize: expected a " + std::to_string(side) + "x" + std::to_string(side) +
           " matrix for n=" + std::to_string(n) + ", d=" + std::to_string(d) + "; file has " +
           std::to_string(w.dim(0)) + "x" + std::to_string(w.dim(1)));

    const models::TensorizeResult result = models::tensorize_matrix(w, n, d, max_rank);
    models::Mpo mpo(result.cores);
    std::filesystem::create_directories(out_dir);
    graph::save_state_dict(mpo.network(), out_dir + "/mpo.tnd");

    std::size_t mpo_elements = 0;
    json bonds = json::array();
    for (std::size_t k = 0; k < result.cores.size(); ++k) {
      mpo_elements += result.cores[k].size();
      if (k + 1 < result.cores.size()) bonds.push_back(result.cores[k].dim(3));
    }
    const Tensor back = mpo.dense_matrix();
    const double wnorm = frobenius_norm(w);
    const double rel = frobenius_norm(sub(back, w)) / std::max(wnorm, 1e-300);

    json report;
    report["n"] = n;
    report["d"] = d;
    if (max_rank) report["max_rank"] = *max_rank;
    report["bond_dims"] = bonds;
    report["dense_elements"] = side * side;
    report["mpo_elements"] = mpo_elements;
    report["compression_ratio"] =
        static_cast<double>(side * side) / static_cast<double>(mpo_elements);
    report["relative_frobenius_error"] = rel;
    report["truncation_error"] = result.truncation_error;
    {
      std::ofstream rep(out_dir + "/report.json");
      if (!rep) fail("tensorize: cannot write report.json");
      rep << report.dump(2) << "\n";
    }
    log << report.dump() << "\n";
    return 0;
  });
}

}  // namespace tnkit::train
