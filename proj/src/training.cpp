#include <cmath>
#include <fstream>
#include <sstream>

#include "fptrans/errors.hpp"
#include "fptrans/harness.hpp"

namespace fptrans::harness {

namespace {

constexpr std::size_t kMaxResamples = 1000;
constexpr const char* kVelocityPrefix = "velocity/";
constexpr const char* kEpochKey = "meta/epoch";

std::string format_loss(double v) {
  std::ostringstream out;
  out.precision(17);
  out << v;
  return out.str();
}

void write_metrics(const std::filesystem::path& path, const std::vector<EpochMetrics>& metrics) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "epoch\tce\tce_prompt\tpair\ttotal\n";
  for (const auto& m : metrics) {
    out << m.epoch << '\t' << format_loss(m.ce) << '\t' << format_loss(m.ce_prompt) << '\t' << format_loss(m.pair)
        << '\t' << format_loss(m.total) << '\n';
  }
}

std::vector<EpochMetrics> read_metrics(const std::filesystem::path& path, std::size_t up_to_epoch) {
  std::vector<EpochMetrics> out;
  std::ifstream in(path);
  if (!in) return out;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    std::istringstream row(line);
    EpochMetrics m;
    std::string ce, ce_prompt, pair, total;
    if (!(row >> m.epoch >> ce >> ce_prompt >> pair >> total)) continue;
    if (m.epoch > up_to_epoch) break;
    m.ce = std::stod(ce);
    m.ce_prompt = std::stod(ce_prompt);
    m.pair = std::stod(pair);
    m.total = std::stod(total);
    out.push_back(m);
  }
  return out;
}

// Keeps manifest rows of completed epochs only (first column is the epoch).
std::vector<std::string> read_manifest(const std::filesystem::path& path, std::size_t up_to_epoch) {
  std::vector<std::string> out;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line)) {
    if (std::stoull(line.substr(0, line.find('\t'))) > up_to_epoch) break;
    out.push_back(line);
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------- optimizer

void sgd_step(const std::string& name, std::span<double> param, std::span<const double> grad,
              std::vector<double>& velocity, double lr, double momentum, double weight_decay) {
  if (param.size() != grad.size()) {
    throw DimensionError("sgd_step '" + name + "': " + std::to_string(param.size()) + " values vs " +
                         std::to_string(grad.size()) + " gradients");
  }
  for (double g : grad) {
    if (!std::isfinite(g)) throw DivergenceError("non-finite gradient for parameter '" + name + "'");
  }
  if (velocity.empty()) velocity.assign(param.size(), 0.0);
  if (velocity.size() != param.size()) throw DimensionError("sgd_step '" + name + "': velocity size mismatch");
  for (std::size_t i = 0; i < param.size(); ++i) {
    velocity[i] = momentum * velocity[i] + (grad[i] + weight_decay * param[i]);
    param[i] -= lr * velocity[i];
  }
}

TrainState TrainState::init(const RunConfig& config) {
  config.validate();
  TrainState state;
  auto rng = make_rng(config.seed, Stream::kInit);
  state.params = model::FPTransParams::init(config.model, rng);
  state.extractor = state.params.backbone.clone();
  if (!config.extractor_checkpoint.empty()) {
    assign_from_archive(state.extractor.named_parameters(""), load_archive(config.extractor_checkpoint), "backbone/");
  }
  return state;
}

NamedTensors TrainState::checkpoint_entries() const {
  auto entries = params.named_parameters();
  const auto n_params = entries.size();
  for (std::size_t i = 0; i < n_params; ++i) {
    const auto& [name, t] = entries[i];
    const auto it = velocity.find(name);
    auto v = it == velocity.end() ? std::vector<double>(t.numel(), 0.0) : it->second;
    entries.push_back({kVelocityPrefix + name, Tensor::from_data(t.shape(), std::move(v))});
  }
  entries.push_back({kEpochKey, Tensor::scalar(static_cast<double>(epoch))});
  return entries;
}

void TrainState::restore(const NamedTensors& archive) {
  const auto named = params.named_parameters();
  assign_from_archive(named, archive);
  velocity.clear();
  bool have_epoch = false;
  for (const auto& [name, t] : archive) {
    if (name == kEpochKey) {
      epoch = static_cast<std::size_t>(t.item());
      have_epoch = true;
    } else if (name.rfind(kVelocityPrefix, 0) == 0) {
      const auto d = t.data();
      velocity[name.substr(std::string(kVelocityPrefix).size())].assign(d.begin(), d.end());
    }
  }
  if (!have_epoch) throw std::runtime_error("checkpoint lacks entry '" + std::string(kEpochKey) + "'");
  // Velocities that were never touched are stored as zeros; drop them so the
  // map matches a run that never stepped those parameters.
  for (auto it = velocity.begin(); it != velocity.end();) {
    bool zero = true;
    for (double v : it->second) zero = zero && v == 0.0;
    it = zero ? velocity.erase(it) : std::next(it);
  }
}

void apply_sgd(TrainState& state, const RunConfig& config) {
  for (auto& [name, t] : state.params.named_parameters()) {
    // Parameters the episode did not touch (unsampled pool tokens) keep their
    // values and momentum.
    if (t.has_grad()) {
      Tensor alias = t;
      sgd_step(name, alias.mutable_data(), t.grad(), state.velocity[name], config.lr, config.momentum,
               config.weight_decay);
    }
    Tensor alias = t;
    alias.zero_grad();
  }
}

// ---------------------------------------------------------------- episodes

PreparedEpisode prepare_episode(const episodes::DatasetSplit& split, const episodes::Episode& episode,
                                const RunConfig& config, Rng& rng, bool require_query_fg) {
  const auto fg = config.model.feature_grid();
  const auto pg = config.model.patch_grid();
  const auto& query = split.samples.at(episode.query);

  PreparedEpisode out;
  out.episode = episode;
  out.query_image = episodes::image_to_tensor(query.image);
  out.query_mask = query.mask;
  out.query_labels = partition::downsample_mask(query.mask, fg, fg);
  if (require_query_fg && out.query_labels.count() == 0) {
    throw EpisodeInvalid("query foreground vanishes on the feature grid");
  }
  for (auto index : episode.supports) {
    const auto& s = split.samples.at(index);
    out.support_images.push_back(episodes::image_to_tensor(s.image));
    out.support_labels.push_back(partition::downsample_mask(s.mask, fg, fg));
    out.support_fg_patch.push_back(partition::downsample_mask(s.mask, pg, pg));
    if (out.support_labels.back().count() == 0 || out.support_fg_patch.back().count() == 0) {
      throw EpisodeInvalid("support foreground vanishes after downsampling");
    }
  }
  for (const auto& m : out.support_fg_patch) out.patch_partitions.push_back(partition::partition(m, config.model.regions, rng));
  for (const auto& m : out.support_labels) out.feature_partitions.push_back(partition::partition(m, config.model.regions, rng));
  return out;
}

ModelOutputs run_model(const model::FPTransParams& params, const vit::ViTParams& extractor, const RunConfig& config,
                       const PreparedEpisode& prepared, Rng& rng) {
  ModelOutputs out;
  std::vector<Tensor> prompt_features;
  for (const auto& image : prepared.support_images) {
    prompt_features.push_back(prompting::extract_prompt_features(image, extractor, config.model.vit));
  }
  out.prompts = prompting::generate_prompts(prompt_features, prepared.support_fg_patch, prepared.patch_partitions,
                                            params.pool, config.model.regions, rng);
  model::ForwardOptions options;
  options.sync_prompts = config.sync_prompts;
  out.forward = model::forward_episode(params, config.model, prepared.query_image, prepared.support_images,
                                       out.prompts, options);
  out.feature_proxies = model::feature_based_proxies(out.forward.support_features, prepared.support_labels,
                                                     prepared.feature_partitions);
  out.prompt_proxies =
      model::prompt_based_proxies(out.forward.prompt_states, params.upsampler, config.model.prompt_tokens);
  for (const auto& p : prepared.patch_partitions) out.degenerate = out.degenerate || p.degenerate();
  for (const auto& p : prepared.feature_partitions) out.degenerate = out.degenerate || p.degenerate();
  return out;
}

objective::LossBreakdown compute_losses(const ModelOutputs& outputs, const PreparedEpisode& prepared,
                                        const RunConfig& config, Rng& rng) {
  const auto tau = config.loss.temperature;
  const auto& query = outputs.forward.query_features;
  objective::LossBreakdown out;
  out.ce = objective::classification_loss(query, outputs.feature_proxies, prepared.query_labels, tau);
  out.ce_prompt = objective::classification_loss(query, outputs.prompt_proxies, prepared.query_labels, tau);
  out.pair = objective::pairwise_loss(query, outputs.forward.support_features, prepared.query_labels,
                                      prepared.support_labels, tau, config.loss.pair_subsample_limit, &rng);
  out.total = objective::total_loss(out.ce, out.ce_prompt, out.pair, config.loss.pair_weight);
  return out;
}

StepResult train_step(TrainState& state, const episodes::DatasetSplit& split, const episodes::Episode& episode,
                      const RunConfig& config) {
  Rng rng(episode.seed);
  const auto prepared = prepare_episode(split, episode, config, rng);
  const auto outputs = run_model(state.params, state.extractor, config, prepared, rng);
  const auto losses = compute_losses(outputs, prepared, config, rng);
  losses.total.backward();
  apply_sgd(state, config);
  return {losses.ce.item(), losses.ce_prompt.item(), losses.pair.item(), losses.total.item(), outputs.degenerate};
}

// ---------------------------------------------------------------- training

TrainingResult run_training(const RunConfig& config, const episodes::DatasetSplit& split,
                            const TrainOptions& options) {
  config.validate();
  TrainingResult result{TrainState::init(config), {}};
  auto& state = result.state;

  const std::filesystem::path out_dir = config.output_dir;
  const auto checkpoint_path = out_dir / "checkpoint.bin";
  const auto metrics_path = out_dir / "metrics.tsv";
  const auto manifest_path = out_dir / "train_episodes.tsv";

  std::vector<std::string> manifest;
  if (options.resume && std::filesystem::exists(checkpoint_path)) {
    state.restore(load_archive(checkpoint_path));
    result.metrics = read_metrics(metrics_path, state.epoch);
    manifest = read_manifest(manifest_path, state.epoch);
  }
  if (options.write_outputs) {
    std::filesystem::create_directories(out_dir);
    config.save(out_dir / "config.txt");
  }

  const auto last = options.stop_after == 0 ? config.epochs : std::min(options.stop_after, config.epochs);
  for (std::size_t epoch = state.epoch; epoch < last; ++epoch) {
    if (config.extractor_checkpoint.empty()) state.refresh_extractor();
    auto rng = make_rng(config.seed, Stream::kTrainEpisodes, epoch);
    EpochMetrics sums;
    sums.epoch = epoch + 1;
    for (std::size_t step = 0; step < config.episodes_per_epoch; ++step) {
      StepResult r;
      for (std::size_t attempt = 0;; ++attempt) {
        if (attempt == kMaxResamples) throw std::runtime_error("no valid training episode after repeated resampling");
        const auto episode = episodes::sample_episode(split, config.shots, episodes::Phase::kTrain, rng);
        try {
          r = train_step(state, split, episode, config);
        } catch (const EpisodeInvalid&) {
          continue;
        }
        if (options.write_outputs) {
          manifest.push_back(std::to_string(epoch + 1) + "\t" + std::to_string(step) + "\t" +
                             episodes::manifest_line(split, episode));
        }
        break;
      }
      sums.ce += r.ce;
      sums.ce_prompt += r.ce_prompt;
      sums.pair += r.pair;
      sums.total += r.total;
    }
    const auto n = static_cast<double>(config.episodes_per_epoch);
    sums.ce /= n;
    sums.ce_prompt /= n;
    sums.pair /= n;
    sums.total /= n;
    state.epoch = epoch + 1;
    result.metrics.push_back(sums);

    if (options.write_outputs) {
      save_archive(checkpoint_path, state.checkpoint_entries());
      write_metrics(metrics_path, result.metrics);
      std::ofstream out(manifest_path);
      if (!out) throw std::runtime_error("cannot write " + manifest_path.string());
      for (const auto& line : manifest) out << line << '\n';
    }
    if (options.on_epoch) options.on_epoch(sums);
  }
  return result;
}

}  // namespace fptrans::harness
