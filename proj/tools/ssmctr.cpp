#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ssmctr/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Structured-semantic CTR models: train, evaluate, compare, export"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  std::string out;
  std::string checkpoint;
  std::string split = "test";

  auto add_overrides = [&](CLI::App* cmd) {
    cmd->add_option("--set,--override", overrides, "key.path=value config override")
        ->allow_extra_args(false);
  };

  auto* train = app.add_subcommand("train", "train the configured model");
  train->add_option("--config", config_path, "run config (JSON)")->required();
  train->add_option("--out", out, "output directory (overrides output_dir)");
  add_overrides(train);

  auto* evaluate = app.add_subcommand("evaluate", "evaluate a checkpoint");
  evaluate->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  evaluate->add_option("--config", config_path, "run config; defaults to the checkpoint's");
  evaluate->add_option("--split", split, "train | test | all")->capture_default_str();
  add_overrides(evaluate);

  auto* compare = app.add_subcommand("compare", "train all four models and tabulate AUC");
  compare->add_option("--config", config_path, "run config (JSON)")->required();
  compare->add_option("--out", out, "directory for compare.tsv");
  add_overrides(compare);

  auto* exportf = app.add_subcommand("export-flatten", "write SSM flatten vectors as TSV");
  exportf->add_option("--checkpoint", checkpoint, "WideDeepSSM checkpoint")->required();
  exportf->add_option("--out", out, "output TSV path")->required();
  exportf->add_option("--config", config_path, "run config; defaults to the checkpoint's");
  exportf->add_option("--split", split, "train | test | all")->capture_default_str();
  add_overrides(exportf);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : ssmctr::cli::kConfig;
  }

  using namespace ssmctr::cli;
  const std::optional<std::string> maybe_out = out.empty() ? std::nullopt : std::optional(out);
  const std::optional<std::string> maybe_config =
      config_path.empty() ? std::nullopt : std::optional(config_path);
  if (*train) return cmd_train(config_path, overrides, maybe_out, std::cout, std::cerr);
  if (*evaluate) {
    return cmd_evaluate(checkpoint, maybe_config, overrides, split, std::cout, std::cerr);
  }
  if (*compare) return cmd_compare(config_path, overrides, maybe_out, std::cout, std::cerr);
  if (*exportf) {
    return cmd_export_flatten(checkpoint, maybe_config, overrides, split, out, std::cout,
                              std::cerr);
  }
  return kConfig;
}
