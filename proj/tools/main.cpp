#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "repa/cli.hpp"

namespace {

std::vector<std::size_t> parse_batches(const std::string& csv) {
  std::vector<std::size_t> out;
  for (const auto& tok : repa::split_csv(csv)) out.push_back(std::stoull(tok));
  if (out.empty()) out = {1, 4, 16};
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"re-parameterizable bottleneck adapters on miniature backbones"};
  app.require_subcommand(1);

  repa::cli::TrainArgs train_args;
  auto* train = app.add_subcommand("train", "train adapters on the synthetic task");
  train->add_option("--config", train_args.config, "config file")->required();
  train->add_option("--out", train_args.out, "output checkpoint")->required();
  train->add_option("--metrics", train_args.metrics, "metrics file (JSON lines)");

  repa::cli::MergeArgs merge_args;
  auto* merge = app.add_subcommand("merge", "fold adapters into the frozen weights");
  merge->add_option("--in", merge_args.in, "input checkpoint")->required();
  merge->add_option("--out", merge_args.out, "output checkpoint")->required();
  merge->add_option("--report", merge_args.report, "merge report file (text; .json added)");
  merge->add_flag("--allow-approximate", merge_args.allow_approximate,
                  "permit border-inexact conv merges, recording the error");

  repa::cli::VerifyArgs verify_args;
  auto* verify = app.add_subcommand("verify", "compare two checkpoints on random probes");
  verify->add_option("--a", verify_args.a, "first checkpoint")->required();
  verify->add_option("--b", verify_args.b, "second checkpoint")->required();
  verify->add_option("--probes", verify_args.probes, "number of probes");
  verify->add_option("--seed", verify_args.seed, "probe seed");
  verify->add_option("--tol", verify_args.tol, "max abs error tolerance");

  repa::cli::BenchArgs bench_args;
  std::string batch_csv = "1,4,16";
  auto* bench = app.add_subcommand("bench", "forward latency: plain vs adapter vs merged");
  bench->add_option("--in", bench_args.in, "checkpoint")->required();
  bench->add_option("--batch", batch_csv, "comma-separated batch sizes");
  bench->add_option("--reps", bench_args.reps, "repetitions (>= 30)");
  bench->add_option("--threads", bench_args.threads, "worker threads for batched inference");
  bench->add_option("--seed", bench_args.seed, "probe seed");

  repa::cli::CountParamsArgs count_args;
  auto* count = app.add_subcommand("count-params", "exact trainable-parameter audit");
  count->add_option("--config", count_args.config, "config file")->required();
  count->add_flag("--with-head", count_args.with_head, "include the classifier head");

  repa::cli::AblateArgs ablate_args;
  auto* ablate = app.add_subcommand("ablate", "sweep groups/dims/position/variant");
  ablate->add_option("--config", ablate_args.config, "config file")->required();
  ablate->add_option("--out", ablate_args.out, "write the table to a file as well");

  CLI11_PARSE(app, argc, argv);

  if (train->parsed()) return repa::cli::cmd_train(train_args, std::cout, std::cerr);
  if (merge->parsed()) return repa::cli::cmd_merge(merge_args, std::cout, std::cerr);
  if (verify->parsed()) return repa::cli::cmd_verify(verify_args, std::cout, std::cerr);
  if (bench->parsed()) {
    bench_args.batches = parse_batches(batch_csv);
    return repa::cli::cmd_bench(bench_args, std::cout, std::cerr);
  }
  if (count->parsed()) return repa::cli::cmd_count_params(count_args, std::cout, std::cerr);
  if (ablate->parsed()) return repa::cli::cmd_ablate(ablate_args, std::cout, std::cerr);
  return repa::cli::kExitFailure;
}
