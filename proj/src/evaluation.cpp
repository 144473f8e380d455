#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "fptrans/errors.hpp"
#include "fptrans/harness.hpp"

namespace fptrans::harness {

namespace {

constexpr std::size_t kMaxResamples = 1000;

std::string fixed(double v, int digits) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(digits) << v;
  return out.str();
}

void write_eval_outputs(const std::filesystem::path& dir, const EvalReport& report,
                        const episodes::DatasetSplit& split, const std::vector<std::string>& manifest) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "eval_report.txt");
    if (!out) throw std::runtime_error("cannot write " + (dir / "eval_report.txt").string());
    out << format_eval_report(report, split);
  }
  {
    std::ofstream out(dir / "eval_metrics.tsv");
    if (!out) throw std::runtime_error("cannot write " + (dir / "eval_metrics.tsv").string());
    out << "class_id\tclass\ttp\tfp\tfn\tiou\n";
    for (const auto& c : report.miou.classes) {
      out << c.class_id << '\t' << split.class_names.at(c.class_id) << '\t' << c.true_positive << '\t'
          << c.false_positive << '\t' << c.false_negative << '\t' << fixed(c.iou, 6) << '\n';
    }
    out << "mean\t-\t-\t-\t-\t" << fixed(report.miou.mean, 6) << '\n';
    if (report.oracle) out << "oracle_mean\t-\t-\t-\t-\t" << fixed(report.oracle->mean, 6) << '\n';
  }
  {
    std::ofstream out(dir / "eval_episodes.tsv");
    if (!out) throw std::runtime_error("cannot write " + (dir / "eval_episodes.tsv").string());
    for (const auto& line : manifest) out << line << '\n';
  }
}

double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

// -------------------------------------------------------------- evaluation

EvalReport run_evaluation(const RunConfig& config, const model::FPTransParams& params,
                          const episodes::DatasetSplit& split, std::size_t n_episodes, const EvalOptions& options) {
  config.validate();
  NoGradGuard no_grad;

  auto extractor = params.backbone.clone();
  if (!config.extractor_checkpoint.empty()) {
    assign_from_archive(extractor.named_parameters(""), load_archive(config.extractor_checkpoint), "backbone/");
  }

  auto rng = make_rng(config.seed, Stream::kEvalEpisodes);
  std::vector<Mask> predictions, oracle_predictions, truths;
  std::vector<int> class_ids;
  std::vector<std::string> manifest;
  const auto tau = config.loss.temperature;

  for (std::size_t e = 0; e < n_episodes; ++e) {
    for (std::size_t attempt = 0;; ++attempt) {
      if (attempt == kMaxResamples) throw std::runtime_error("no valid test episode after repeated resampling");
      const auto episode = episodes::sample_episode(split, config.shots, episodes::Phase::kTest, rng);
      Rng episode_rng(episode.seed);
      PreparedEpisode prepared;
      try {
        prepared = prepare_episode(split, episode, config, episode_rng, /*require_query_fg=*/true);
      } catch (const EpisodeInvalid&) {
        continue;
      }
      const auto outputs = run_model(params, extractor, config, prepared, episode_rng);
      const auto& query = outputs.forward.query_features;
      const auto h = prepared.query_mask.height, w = prepared.query_mask.width;
      predictions.push_back(objective::predict_mask(query, outputs.feature_proxies, tau, h, w));
      if (options.self_proxy_oracle) {
        const Tensor own[] = {query};
        const Mask own_labels[] = {prepared.query_labels};
        const partition::PartitionResult own_regions[] = {
            partition::partition(prepared.query_labels, config.model.regions, episode_rng)};
        const auto proxies = model::feature_based_proxies(own, own_labels, own_regions);
        oracle_predictions.push_back(objective::predict_mask(query, proxies, tau, h, w));
      }
      truths.push_back(prepared.query_mask);
      class_ids.push_back(episode.class_id);
      manifest.push_back(std::to_string(e) + "\t" + episodes::manifest_line(split, episode));
      break;
    }
  }

  EvalReport report;
  report.episodes = n_episodes;
  report.miou = episodes::miou(predictions, truths, class_ids);
  if (options.self_proxy_oracle) report.oracle = episodes::miou(oracle_predictions, truths, class_ids);
  if (options.write_outputs) write_eval_outputs(config.output_dir, report, split, manifest);
  return report;
}

std::string format_eval_report(const EvalReport& report, const episodes::DatasetSplit& split) {
  std::ostringstream out;
  out << "episodes: " << report.episodes << "\n\n";
  out << std::left << std::setw(10) << "class" << std::right << std::setw(10) << "TP" << std::setw(10) << "FP"
      << std::setw(10) << "FN" << std::setw(10) << "IoU" << '\n';
  for (const auto& c : report.miou.classes) {
    out << std::left << std::setw(10) << split.class_names.at(c.class_id) << std::right << std::setw(10)
        << c.true_positive << std::setw(10) << c.false_positive << std::setw(10) << c.false_negative << std::setw(10)
        << fixed(c.iou, 4) << '\n';
  }
  out << "\nmIoU: " << fixed(report.miou.mean, 4) << '\n';
  if (report.oracle) out << "self-proxy oracle mIoU: " << fixed(report.oracle->mean, 4) << '\n';
  return out.str();
}

// ---------------------------------------------------------------- ablation

RunConfig apply_variant(const RunConfig& base, const std::string& variant) {
  auto config = base;
  if (variant == "baseline") {
  } else if (variant == "no_pair_loss") {
    config.loss.pair_weight = 0.0;
  } else if (variant == "no_sync") {
    config.sync_prompts = false;
  } else if (variant == "single_bg_proxy" || variant == "S1") {
    config.model.regions = 1;
  } else if (variant == "S3") {
    config.model.regions = 3;
  } else if (variant == "S5") {
    config.model.regions = 5;
  } else {
    throw ConfigError("unknown ablation variant '" + variant + "'");
  }
  return config;
}

std::vector<std::string> expand_variants(std::span<const std::string> variants) {
  std::vector<std::string> out;
  auto add = [&](const std::string& v) {
    if (std::find(out.begin(), out.end(), v) == out.end()) out.push_back(v);
  };
  for (const auto& v : variants) {
    if (v == "S_sweep") {
      for (const char* s : {"S1", "S3", "S5"}) add(s);
    } else {
      apply_variant(RunConfig{}, v);  // validates the name
      add(v);
    }
  }
  return out;
}

std::string AblationTable::to_tsv() const {
  std::ostringstream out;
  out << "variant";
  for (auto s : seeds) out << "\tseed_" << s;
  out << "\tmean\tstd\tmedian\n";
  for (const auto& row : rows) {
    out << row.variant;
    for (double m : row.miou) out << '\t' << fixed(m, 6);
    out << '\t' << fixed(row.mean, 6) << '\t' << fixed(row.stddev, 6) << '\t' << fixed(row.median, 6) << '\n';
  }
  return out.str();
}

AblationTable run_ablation(const RunConfig& config, const episodes::DatasetSplit& split,
                           std::span<const std::string> variants, std::span<const std::uint64_t> seeds,
                           const std::function<void(const std::string&)>& log) {
  AblationTable table;
  table.seeds.assign(seeds.begin(), seeds.end());
  std::vector<std::string> names{"baseline"};
  for (const auto& v : expand_variants(variants)) names.push_back(v);

  for (const auto& name : names) {
    AblationRow row;
    row.variant = name;
    for (auto seed : seeds) {
      auto run_config = apply_variant(config, name);
      run_config.seed = seed;
      TrainOptions train_options;
      train_options.write_outputs = false;
      // Fresh parameters and optimizer state per (variant, seed).
      const auto trained = run_training(run_config, split, train_options);
      const auto report = run_evaluation(run_config, trained.state.params, split, run_config.eval_episodes);
      row.miou.push_back(report.miou.mean);
      if (log) log(name + " seed " + std::to_string(seed) + ": mIoU " + fixed(report.miou.mean, 4));
    }
    const auto n = static_cast<double>(row.miou.size());
    if (!row.miou.empty()) {
      row.mean = std::accumulate(row.miou.begin(), row.miou.end(), 0.0) / n;
      double ss = 0;
      for (double m : row.miou) ss += (m - row.mean) * (m - row.mean);
      row.stddev = row.miou.size() > 1 ? std::sqrt(ss / (n - 1)) : 0.0;
      row.median = median_of(row.miou);
    }
    table.rows.push_back(std::move(row));
  }

  const auto& baseline = table.rows.front();
  for (const auto& row : table.rows) {
    const bool compared = row.variant == "no_sync" || row.variant == "single_bg_proxy" || row.variant == "S1";
    if (compared && row.median > baseline.median) {
      table.warnings.push_back("median mIoU of " + row.variant + " (" + fixed(row.median, 4) +
                               ") exceeds the full model (" + fixed(baseline.median, 4) + ")");
    }
  }
  return table;
}

}  // namespace fptrans::harness
