#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "fptrans/errors.hpp"
#include "fptrans/gradcheck.hpp"
#include "fptrans/harness.hpp"

namespace fptrans::harness {

namespace {

// One class, enough images for a K-shot episode, rendered in memory.
episodes::DatasetSplit tiny_split(const RunConfig& config, Rng& rng) {
  episodes::DatasetSplit split;
  split.class_names = {"disk"};
  split.train_classes = {0};
  split.test_classes = {0};
  for (std::size_t i = 0; i < config.shots + 1; ++i) {
    auto r = episodes::render_sample("disk", config.dataset.image_size, 0.3, 0.6, rng);
    split.samples.push_back({0, "", "", std::move(r.image), std::move(r.mask)});
  }
  split.index();
  return split;
}

std::vector<std::size_t> spaced_coordinates(std::size_t n, std::size_t limit) {
  std::vector<std::size_t> out;
  if (limit == 0 || n <= limit) {
    for (std::size_t i = 0; i < n; ++i) out.push_back(i);
    return out;
  }
  for (std::size_t i = 0; i < limit; ++i) out.push_back(i * n / limit);
  return out;
}

}  // namespace

RunConfig tiny_gradcheck_config() {
  RunConfig c;
  c.model.vit.image_size = 16;
  c.model.vit.patch_size = 8;
  c.model.vit.channels = 8;
  c.model.vit.blocks = 1;
  c.model.vit.heads = 2;
  c.model.vit.mlp_hidden = 16;
  c.model.vit.key_dim = 8;
  c.model.vit.value_dim = 8;
  c.model.upsampler_hidden = 8;
  c.model.prompt_tokens = 2;
  c.model.regions = 2;
  c.model.pool_size = 4;
  c.dataset.image_size = 16;
  c.loss.pair_subsample_limit = 0;
  return c;
}

std::string GradcheckReport::to_text() const {
  std::ostringstream out;
  out << "group\tcoordinates\tworst_relative_error\tstatus\n";
  for (const auto& g : groups) {
    out << g.name << '\t' << g.coordinates << '\t' << std::scientific << std::setprecision(3)
        << g.worst_relative_error << '\t' << (g.passed ? "PASS" : "FAIL") << '\n';
  }
  out << "tolerance " << std::scientific << std::setprecision(1) << tolerance << ": "
      << (passed ? "PASS" : "FAIL") << '\n';
  return out.str();
}

GradcheckReport run_gradcheck(const RunConfig& config, const GradcheckOptions& options) {
  config.validate();
  const auto state = TrainState::init(config);
  // Zero-initialised groups (biases, class token) put ReLU inputs exactly on
  // the kink whenever a hidden vector is all zero, where one-sided and
  // central differences disagree. Nudge them to a generic point first.
  {
    auto jitter_rng = make_rng(config.seed, Stream::kInit, 1);
    for (const auto& [name, t] : state.params.named_parameters()) {
      Tensor alias = t;
      auto values = alias.mutable_data();
      if (std::all_of(values.begin(), values.end(), [](double v) { return v == 0.0; })) {
        const auto noise = truncated_normal(t.shape(), 0.05, jitter_rng, false);
        std::copy(noise.data().begin(), noise.data().end(), values.begin());
      }
    }
  }
  auto data_rng = make_rng(config.seed, Stream::kDataset);
  const auto split = tiny_split(config, data_rng);

  // A fixed episode whose supports keep some foreground and whose query
  // labels are nonempty; its rng seed pins pool and partition draws.
  episodes::Episode episode;
  PreparedEpisode prepared;
  auto episode_rng = make_rng(config.seed, Stream::kTrainEpisodes);
  for (std::size_t attempt = 0;; ++attempt) {
    if (attempt == 1000) throw std::runtime_error("gradcheck: could not draw a usable episode");
    episode = episodes::sample_episode(split, config.shots, episodes::Phase::kTrain, episode_rng);
    try {
      Rng r(episode.seed);
      prepared = prepare_episode(split, episode, config, r, /*require_query_fg=*/true);
      break;
    } catch (const EpisodeInvalid&) {
    }
  }

  // Prompt features come from the frozen extractor, so the loss depends on
  // the live parameters only through the differentiable path.
  auto loss = [&]() {
    Rng r(episode.seed);
    const auto p = prepare_episode(split, episode, config, r, true);
    const auto outputs = run_model(state.params, state.extractor, config, p, r);
    return compute_losses(outputs, p, config, r).total;
  };

  const auto named = state.params.named_parameters();
  for (const auto& [name, t] : named) {
    Tensor alias = t;
    alias.zero_grad();
  }
  loss().backward();

  GradcheckReport report;
  report.tolerance = options.tolerance;
  report.passed = true;
  for (const auto& [name, t] : named) {
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) {
      const auto g = t.grad();
      analytic.assign(g.begin(), g.end());
    }
    if (options.analytic_hook) options.analytic_hook(name, analytic);
    const auto coords = spaced_coordinates(t.numel(), options.max_coordinates);
    const auto numeric = finite_difference_gradient(
        [&](const Tensor&) {
          NoGradGuard no_grad;
          return loss().item();
        },
        t, coords, options.step);
    GroupCheck check;
    check.name = name;
    check.coordinates = coords.size();
    check.worst_relative_error = max_relative_error(analytic, numeric.data(), coords);
    check.passed = std::isfinite(check.worst_relative_error) && check.worst_relative_error <= options.tolerance;
    report.passed = report.passed && check.passed;
    report.groups.push_back(check);
  }
  for (const auto& [name, t] : named) {
    Tensor alias = t;
    alias.zero_grad();
  }
  return report;
}

}  // namespace fptrans::harness
