#include <CLI11.hpp>
#include <iostream>
#include <optional>

#include "hbfp/commands.hpp"

namespace {

struct CommonFlags {
  std::string config_path;
  std::string out_dir;
  std::string checkpoint;
  std::string lambdas;
  std::string dataset;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config_path, "config file (key=value lines, '#' comments)");
  cmd->add_option("--seed", flags.seed, "override the root seed");
  cmd->add_option("--out", flags.out_dir, "output directory");
  cmd->add_option("--checkpoint", flags.checkpoint, "checkpoint path");
  cmd->add_option("--lambdas", flags.lambdas, "pooling thresholds, e.g. 0,0.3,0.5,0.7,1.0");
  cmd->add_option("--dataset", flags.dataset, "dataset file (overrides dataset_path)");
}

hbfp::RunConfig build_config(const CommonFlags& flags, bool lambdas_given) {
  hbfp::RunConfig cfg;
  if (!flags.config_path.empty()) cfg = hbfp::parse_config_file(flags.config_path);
  if (flags.seed) cfg.seed = *flags.seed;
  if (!flags.out_dir.empty()) cfg.out_dir = flags.out_dir;
  if (!flags.checkpoint.empty()) cfg.checkpoint_path = flags.checkpoint;
  if (!flags.dataset.empty()) cfg.dataset_path = flags.dataset;
  if (lambdas_given) hbfp::apply_config_entry(cfg, "lambdas", flags.lambdas);
  hbfp::validate_config(cfg);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hierarchical bi-directional feature perception: train/eval harness"};
  app.require_subcommand(1);

  CommonFlags flags;
  CLI::App* gen = app.add_subcommand("gen-data", "generate the synthetic identity dataset");
  CLI::App* train = app.add_subcommand("train", "train a model and write a checkpoint");
  CLI::App* eval = app.add_subcommand("eval", "retrieval metrics for a trained checkpoint");
  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference report for every op");
  for (CLI::App* cmd : {gen, train, eval, gradcheck}) add_common(cmd, flags);

  CLI11_PARSE(app, argc, argv);

  try {
    const bool lambdas_given = app.get_subcommands().front()->count("--lambdas") > 0;
    hbfp::RunConfig cfg = build_config(flags, lambdas_given);
    if (gen->parsed()) {
      hbfp::cmd_gen_data(cfg, std::cout);
    } else if (train->parsed()) {
      hbfp::cmd_train(cfg, std::cout);
    } else if (eval->parsed()) {
      std::optional<std::vector<double>> lambda_override;
      if (lambdas_given) lambda_override = cfg.lambdas;
      hbfp::cmd_eval(cfg, std::cout, lambda_override);
    } else if (gradcheck->parsed()) {
      if (!hbfp::cmd_gradcheck(cfg, std::cout)) {
        std::cerr << "gradcheck: at least one op exceeded its tolerance\n";
        return 4;
      }
    }
  } catch (const hbfp::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const hbfp::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 2;
  } catch (const hbfp::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const hbfp::ContractError& e) {
    std::cerr << "contract error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
