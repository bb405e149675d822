#include <cstddef>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "tnkit/train.hpp"

int main(int argc, char** argv) {
  CLI::App app{"tensor-network model toolkit: train, benchmark, tensorize, evaluate"};
  app.require_subcommand(1);

  std::string config_path, out_path, matrix_path, model_dir, data_path;
  std::size_t n = 0, d = 2;
  long long max_rank = 0;

  CLI::App* train = app.add_subcommand("train", "train a model from a key=value config");
  train->add_option("--config", config_path, "key=value config file")->required();
  train->add_option("--out", out_path, "output directory (metrics, state dict, meta)")
      ->required();

  CLI::App* bench = app.add_subcommand("bench", "run the contraction benchmark sweep");
  bench->add_option("--config", config_path, "key=value config file")->required();
  bench->add_option("--out", out_path, "output CSV path")->required();

  CLI::App* tensorize =
      app.add_subcommand("tensorize", "factor a d^n x d^n matrix into an operator chain");
  tensorize->add_option("--matrix", matrix_path, "CSV matrix file")->required();
  tensorize->add_option("--n", n, "number of chain sites")->required();
  tensorize->add_option("--d", d, "physical dimension per site")->required();
  CLI::Option* mr = tensorize->add_option("--max-rank", max_rank, "bond truncation rank");
  tensorize->add_option("--out", out_path, "output directory (cores, report)")->required();

  CLI::App* eval = app.add_subcommand("eval", "evaluate a saved model on a CSV dataset");
  eval->add_option("--model", model_dir, "directory written by train")->required();
  eval->add_option("--data", data_path, "CSV dataset")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  if (train->parsed()) return tnkit::train::cmd_train(config_path, out_path, std::cout);
  if (bench->parsed()) return tnkit::train::cmd_bench(config_path, out_path, std::cout);
  if (tensorize->parsed()) {
    std::optional<std::size_t> rank;
    if (mr->count() > 0) {
      if (max_rank <= 0) {
        std::cout << "config error: --max-rank must be positive\n";
        return 1;
      }
      rank = static_cast<std::size_t>(max_rank);
    }
    return tnkit::train::cmd_tensorize(matrix_path, n, d, rank, out_path, std::cout);
  }
  if (eval->parsed()) return tnkit::train::cmd_eval(model_dir, data_path, std::cout);
  return 1;
}
