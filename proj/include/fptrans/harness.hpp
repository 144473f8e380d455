#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fptrans/episodes.hpp"
#include "fptrans/model.hpp"
#include "fptrans/objective.hpp"
#include "fptrans/partition.hpp"
#include "fptrans/prompting.hpp"
#include "fptrans/tensor.hpp"

namespace fptrans::harness {

// ------------------------------------------------------------------ config

struct RunConfig {
  model::ModelConfig model;
  objective::LossConfig loss;
  episodes::DatasetConfig dataset;
  std::size_t shots = 1;
  bool sync_prompts = true;

  double lr = 1e-3;
  double momentum = 0.9;
  double weight_decay = 5e-5;
  std::size_t epochs = 10;
  std::size_t episodes_per_epoch = 500;
  std::size_t eval_episodes = 500;
  std::uint64_t seed = 0;

  std::string data_dir = "data";
  std::string output_dir = "runs/default";
  /// Optional archive whose "backbone/..." entries seed a fixed prompt
  /// extractor; empty means a frozen copy of the live backbone refreshed
  /// at every epoch start.
  std::string extractor_checkpoint;

  /// Desk-scale defaults: 64x64 images, P=8, L=2, C=32, h=4, S=3, G=4, K=1.
  static RunConfig desk_default() { return {}; }

  void validate() const;
  /// Throws ConfigError for unknown keys or unparsable values.
  void set(const std::string& key, const std::string& value);
  std::vector<std::pair<std::string, std::string>> items() const;

  std::string to_text() const;
  static RunConfig from_text(const std::string& text);
  static RunConfig load(const std::filesystem::path& path);
  /// Applies key=value lines on top of this config; '#' starts a comment.
  void apply_text(const std::string& text);
  void apply_file(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
};

// ------------------------------------------------------------- checkpoints

// Archive layout (all integers little-endian):
//   "FPTRARCH" | u32 version=1 | u64 entry count
//   per entry: u32 key length | key bytes | u32 rank | u64 dims[rank] | f64 values
// Entries are written in the order given.
std::vector<std::uint8_t> encode_archive(const NamedTensors& entries);
NamedTensors decode_archive(std::span<const std::uint8_t> bytes);
void save_archive(const std::filesystem::path& path, const NamedTensors& entries);
NamedTensors load_archive(const std::filesystem::path& path);

/// Copies archive values into same-named tensors; every target must be
/// present with matching shape.
void assign_from_archive(const NamedTensors& targets, const NamedTensors& archive, const std::string& prefix = "");

// --------------------------------------------------------------- optimizer

/// v <- momentum * v + (g + wd * theta); theta <- theta - lr * v.
/// Throws DivergenceError naming `name` for a non-finite gradient.
void sgd_step(const std::string& name, std::span<double> param, std::span<const double> grad,
              std::vector<double>& velocity, double lr, double momentum, double weight_decay);

struct TrainState {
  model::FPTransParams params;
  vit::ViTParams extractor;
  std::map<std::string, std::vector<double>> velocity;
  std::size_t epoch = 0;  // completed epochs

  static TrainState init(const RunConfig& config);
  void refresh_extractor() { extractor = params.backbone.clone(); }
  NamedTensors checkpoint_entries() const;
  void restore(const NamedTensors& archive);
};

/// Applies sgd_step to every parameter and clears gradients.
void apply_sgd(TrainState& state, const RunConfig& config);

// ---------------------------------------------------------------- episodes

/// Images, masks and partitions at the resolutions the model needs.
struct PreparedEpisode {
  episodes::Episode episode;
  Tensor query_image;
  std::vector<Tensor> support_images;
  Mask query_mask;                  // image resolution
  Mask query_labels;                // feature grid
  std::vector<Mask> support_labels;     // feature grid
  std::vector<Mask> support_fg_patch;   // patch grid
  std::vector<partition::PartitionResult> patch_partitions;
  std::vector<partition::PartitionResult> feature_partitions;
};

/// Throws EpisodeInvalid when a support foreground vanishes after
/// downsampling, or (require_query_fg) the query's does.
PreparedEpisode prepare_episode(const episodes::DatasetSplit& split, const episodes::Episode& episode,
                                const RunConfig& config, Rng& rng, bool require_query_fg = false);

struct ModelOutputs {
  prompting::PromptSet prompts;
  model::EpisodeForward forward;
  model::ProxySet feature_proxies;
  model::ProxySet prompt_proxies;
  bool degenerate = false;  // some shot had fewer than S background regions
};

ModelOutputs run_model(const model::FPTransParams& params, const vit::ViTParams& extractor, const RunConfig& config,
                       const PreparedEpisode& prepared, Rng& rng);

objective::LossBreakdown compute_losses(const ModelOutputs& outputs, const PreparedEpisode& prepared,
                                        const RunConfig& config, Rng& rng);

struct StepResult {
  double ce = 0, ce_prompt = 0, pair = 0, total = 0;
  bool degenerate = false;
};

/// One training step: prompts, forward, proxies, losses, backward, SGD.
StepResult train_step(TrainState& state, const episodes::DatasetSplit& split, const episodes::Episode& episode,
                      const RunConfig& config);

// ---------------------------------------------------------------- training

struct EpochMetrics {
  std::size_t epoch = 0;
  double ce = 0, ce_prompt = 0, pair = 0, total = 0;
};

struct TrainOptions {
  bool resume = false;
  bool write_outputs = true;
  /// Stop after this many completed epochs (0 = config.epochs).
  std::size_t stop_after = 0;
  std::function<void(const EpochMetrics&)> on_epoch;
};

struct TrainingResult {
  TrainState state;
  std::vector<EpochMetrics> metrics;
};

/// Trains for config.epochs; with write_outputs, the checkpoint
/// (output_dir/checkpoint.bin), metrics.tsv and train_episodes.tsv are
/// written after every epoch. Resume continues from the checkpoint and is
/// bitwise identical to an uninterrupted run.
TrainingResult run_training(const RunConfig& config, const episodes::DatasetSplit& split,
                            const TrainOptions& options = {});

// -------------------------------------------------------------- evaluation

struct EvalOptions {
  /// Also score each query with proxies pooled from its own ground truth.
  bool self_proxy_oracle = false;
  bool write_outputs = false;
};

struct EvalReport {
  episodes::MiouReport miou;
  std::optional<episodes::MiouReport> oracle;
  std::size_t episodes = 0;
};

EvalReport run_evaluation(const RunConfig& config, const model::FPTransParams& params,
                          const episodes::DatasetSplit& split, std::size_t n_episodes, const EvalOptions& options = {});

std::string format_eval_report(const EvalReport& report, const episodes::DatasetSplit& split);

// ---------------------------------------------------------------- ablation

/// Known variants: no_pair_loss, no_sync, single_bg_proxy, S1, S3, S5
/// ("S_sweep" expands to S1, S3, S5).
RunConfig apply_variant(const RunConfig& base, const std::string& variant);
std::vector<std::string> expand_variants(std::span<const std::string> variants);

struct AblationRow {
  std::string variant;
  std::vector<double> miou;  // one per seed
  double mean = 0, stddev = 0, median = 0;
};

struct AblationTable {
  std::vector<std::uint64_t> seeds;
  std::vector<AblationRow> rows;  // baseline first
  std::vector<std::string> warnings;

  std::string to_tsv() const;
};

/// Trains and evaluates a fresh model per (variant, seed). The baseline row
/// is always present.
AblationTable run_ablation(const RunConfig& config, const episodes::DatasetSplit& split,
                           std::span<const std::string> variants, std::span<const std::uint64_t> seeds,
                           const std::function<void(const std::string&)>& log = {});

// ---------------------------------------------------------------- gradcheck

struct GroupCheck {
  std::string name;
  std::size_t coordinates = 0;
  double worst_relative_error = 0;
  bool passed = false;
};

struct GradcheckReport {
  std::vector<GroupCheck> groups;
  double tolerance = 1e-3;
  bool passed = false;

  std::string to_text() const;
};

struct GradcheckOptions {
  double tolerance = 1e-3;
  double step = 1e-4;
  /// Per group; coordinates are evenly spaced when a group is larger.
  std::size_t max_coordinates = 48;
  /// Test hook: may alter the analytic gradient of a group before comparison.
  std::function<void(const std::string& name, std::vector<double>& grad)> analytic_hook;
};

/// A config small enough for exhaustive checks: 16x16 images, P=8, L=1, C=8,
/// S=2.
RunConfig tiny_gradcheck_config();

/// Finite-difference check of the full objective with respect to every
/// parameter group, on one synthetic episode.
GradcheckReport run_gradcheck(const RunConfig& config, const GradcheckOptions& options = {});

}  // namespace fptrans::harness
