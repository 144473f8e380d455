#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "fptrans/errors.hpp"
#include "fptrans/harness.hpp"

namespace fs = std::filesystem;
using namespace fptrans;

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& common) {
  cmd->add_option("--config", common.config_path, "key=value config file")->check(CLI::ExistingFile);
  cmd->add_option("--set", common.overrides, "override one key (key=value), repeatable");
  cmd->add_option("--seed", common.seed, "master seed");
}

harness::RunConfig resolve(const Common& common, harness::RunConfig base = {}) {
  if (!common.config_path.empty()) base.apply_file(common.config_path);
  for (const auto& kv : common.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    base.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (common.seed) base.seed = *common.seed;
  base.validate();
  return base;
}

episodes::DatasetSplit open_dataset(const harness::RunConfig& config) {
  const fs::path root = config.data_dir;
  if (!fs::exists(root / "index.tsv")) {
    throw std::runtime_error("no dataset at " + root.string() + " (run gen-data first)");
  }
  auto split = episodes::load_dataset(root);
  if (!split.samples.empty() && split.samples.front().image.height != config.model.vit.image_size) {
    throw ConfigError("dataset at " + root.string() + " does not match image_size " +
                      std::to_string(config.model.vit.image_size));
  }
  return split;
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

int cmd_gen_data(const harness::RunConfig& config) {
  const auto split = episodes::generate_synthetic_dataset(config.dataset, config.seed, config.data_dir);
  std::printf("wrote %zu samples (%zu classes) to %s\n", split.samples.size(), split.class_names.size(),
              config.data_dir.c_str());
  return 0;
}

int cmd_train(const harness::RunConfig& config, bool resume) {
  const auto split = open_dataset(config);
  const auto start = std::chrono::steady_clock::now();
  harness::TrainOptions options;
  options.resume = resume;
  options.on_epoch = [&](const harness::EpochMetrics& m) {
    std::printf("epoch %zu  ce %.5f  ce' %.5f  pair %.5f  total %.5f  (%.1fs)\n", m.epoch, m.ce, m.ce_prompt, m.pair,
                m.total, seconds_since(start));
    std::fflush(stdout);
  };
  harness::run_training(config, split, options);
  std::printf("checkpoint: %s\n", (fs::path(config.output_dir) / "checkpoint.bin").c_str());
  return 0;
}

int cmd_eval(const harness::RunConfig& config, std::string checkpoint, std::size_t episodes, bool oracle,
             bool random_init) {
  const auto split = open_dataset(config);
  auto state = harness::TrainState::init(config);
  if (!random_init) {
    if (checkpoint.empty()) checkpoint = (fs::path(config.output_dir) / "checkpoint.bin").string();
    harness::assign_from_archive(state.params.named_parameters(), harness::load_archive(checkpoint));
  }
  harness::EvalOptions options;
  options.self_proxy_oracle = oracle;
  options.write_outputs = true;
  const auto report =
      harness::run_evaluation(config, state.params, split, episodes ? episodes : config.eval_episodes, options);
  std::cout << harness::format_eval_report(report, split);
  return 0;
}

int cmd_ablate(const harness::RunConfig& config, const std::vector<std::string>& variants,
               std::vector<std::uint64_t> seeds) {
  const auto split = open_dataset(config);
  if (seeds.empty()) {
    for (std::uint64_t i = 0; i < 5; ++i) seeds.push_back(config.seed + i);
  }
  const auto table = harness::run_ablation(config, split, variants, seeds, [](const std::string& line) {
    std::printf("%s\n", line.c_str());
    std::fflush(stdout);
  });
  const auto path = fs::path(config.output_dir) / "ablation.tsv";
  fs::create_directories(config.output_dir);
  std::ofstream(path) << table.to_tsv();
  std::cout << table.to_tsv();
  for (const auto& w : table.warnings) std::printf("warning: %s\n", w.c_str());
  std::printf("table: %s\n", path.c_str());
  return 0;
}

int cmd_gradcheck(const harness::RunConfig& config, double tolerance, std::size_t coords) {
  harness::GradcheckOptions options;
  options.tolerance = tolerance;
  options.max_coordinates = coords;
  const auto report = harness::run_gradcheck(config, options);
  std::cout << report.to_text();
  return report.passed ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"FPTrans few-shot segmentation at desk scale"};
  app.require_subcommand(1);

  Common gen_common, train_common, eval_common, ablate_common, grad_common;

  auto* gen = app.add_subcommand("gen-data", "render the synthetic shapes dataset into data_dir");
  add_common(gen, gen_common);

  bool resume = false;
  auto* train = app.add_subcommand("train", "episodic training; writes checkpoint and metrics to output_dir");
  add_common(train, train_common);
  train->add_flag("--resume", resume, "continue from output_dir/checkpoint.bin");

  std::string checkpoint;
  std::size_t eval_n = 0;
  bool oracle = false, random_init = false;
  auto* eval = app.add_subcommand("eval", "mIoU on novel-class episodes");
  add_common(eval, eval_common);
  eval->add_option("--checkpoint", checkpoint, "archive to evaluate (default output_dir/checkpoint.bin)");
  eval->add_option("--episodes", eval_n, "number of test episodes (default eval_episodes)");
  eval->add_flag("--oracle", oracle, "also score proxies pooled from the query's own mask");
  eval->add_flag("--random-init", random_init, "evaluate freshly initialised parameters");

  std::vector<std::string> variants;
  std::vector<std::uint64_t> seeds;
  auto* ablate = app.add_subcommand("ablate", "train and evaluate variants over several seeds");
  add_common(ablate, ablate_common);
  ablate->add_option("--variants", variants, "no_pair_loss, no_sync, single_bg_proxy, S_sweep, S1, S3, S5")
      ->delimiter(',');
  ablate->add_option("--seeds", seeds, "seeds (default: five consecutive from the master seed)")->delimiter(',');

  double tolerance = 1e-3;
  std::size_t coords = 48;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of the full objective (tiny config)");
  add_common(grad, grad_common);
  grad->add_option("--tolerance", tolerance, "maximum relative error");
  grad->add_option("--coords", coords, "coordinates checked per parameter group (0 = all)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(resolve(gen_common));
    if (train->parsed()) return cmd_train(resolve(train_common), resume);
    if (eval->parsed()) return cmd_eval(resolve(eval_common), checkpoint, eval_n, oracle, random_init);
    if (ablate->parsed()) return cmd_ablate(resolve(ablate_common), variants, seeds);
    if (grad->parsed()) return cmd_gradcheck(resolve(grad_common, harness::tiny_gradcheck_config()), tolerance, coords);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 1;
}
