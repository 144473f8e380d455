#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "fptrans/episodes.hpp"
#include "fptrans/errors.hpp"
#include "fptrans/harness.hpp"
#include "fptrans/objective.hpp"
#include "fptrans/ops.hpp"
#include "fptrans/partition.hpp"
#include "fptrans/prompting.hpp"

namespace py = pybind11;
using namespace fptrans;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;
using ByteArray = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const DoubleArray& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor::from_data(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

DoubleArray to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  DoubleArray out(shape);
  std::ranges::copy(t.data(), out.mutable_data());
  return out;
}

Mask to_mask(const ByteArray& a) {
  if (a.ndim() != 2) throw py::value_error("mask must be a 2-D array");
  Mask m(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)));
  for (std::size_t i = 0; i < m.size(); ++i) m.values[i] = a.data()[i] != 0 ? 1 : 0;
  return m;
}

ByteArray mask_array(const Mask& m) {
  ByteArray out({static_cast<py::ssize_t>(m.height), static_cast<py::ssize_t>(m.width)});
  std::ranges::copy(m.values, out.mutable_data());
  return out;
}

model::ProxySet proxies_from(const DoubleArray& stacked) {
  if (stacked.ndim() != 2 || stacked.shape(0) < 1) throw py::value_error("proxies must be [1 + n, C]");
  auto t = to_tensor(stacked);
  model::ProxySet p;
  const auto c = t.dim(1);
  p.foreground = ops::reshape(ops::slice(t, 0, 0, 1), {c});
  for (std::size_t n = 1; n < t.dim(0); ++n) p.background.push_back(ops::reshape(ops::slice(t, 0, n, 1), {c}));
  return p;
}

harness::RunConfig config_from(const std::map<std::string, std::string>& overrides) {
  auto c = harness::RunConfig::desk_default();
  for (const auto& [k, v] : overrides) c.set(k, v);
  c.validate();
  return c;
}

py::dict report_dict(const episodes::MiouReport& r) {
  py::dict classes;
  for (const auto& c : r.classes) classes[py::int_(c.class_id)] = c.iou;
  py::dict out;
  out["mean"] = r.mean;
  out["classes"] = classes;
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "FPTrans few-shot segmentation core";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<EpisodeInvalid>(m, "EpisodeInvalid", PyExc_RuntimeError);
  py::register_exception<ParseError>(m, "ParseError", PyExc_ValueError);

  m.def(
      "partition",
      [](const ByteArray& mask, std::size_t regions, std::uint64_t seed) {
        Rng rng(seed);
        auto r = partition::partition(to_mask(mask), regions, rng);
        std::vector<std::pair<int, int>> seeds;
        for (const auto& p : r.seeds) seeds.emplace_back(p.row, p.col);
        std::vector<ByteArray> masks;
        for (const auto& region : r.masks) masks.push_back(mask_array(region));
        return py::make_tuple(seeds, masks);
      },
      py::arg("foreground"), py::arg("regions"), py::arg("seed") = 0,
      "Farthest-point seeds and Voronoi regions of the background (mask == 0).");

  m.def(
      "masked_mean",
      [](const DoubleArray& features, const ByteArray& mask) {
        return to_array(prompting::masked_mean(to_tensor(features), to_mask(mask)));
      },
      py::arg("features"), py::arg("mask"), "Mean of features[HW, C] rows selected by an [H, W] mask.");

  m.def(
      "probability_from_similarities",
      [](const DoubleArray& sims, double temperature) {
        return to_array(objective::probability_from_similarities(to_tensor(sims), temperature));
      },
      py::arg("similarities"), py::arg("temperature") = 0.1);

  m.def(
      "foreground_probability",
      [](const DoubleArray& features, const DoubleArray& proxies, double temperature) {
        return to_array(objective::foreground_probability(to_tensor(features), proxies_from(proxies), temperature));
      },
      py::arg("features"), py::arg("proxies"), py::arg("temperature") = 0.1,
      "Per-row foreground probability; proxies[0] is the foreground proxy.");

  m.def(
      "pairwise_loss",
      [](const DoubleArray& query, const std::vector<DoubleArray>& supports, const ByteArray& query_labels,
         const std::vector<ByteArray>& support_labels, double temperature) {
        std::vector<Tensor> s;
        std::vector<Mask> y;
        for (const auto& a : supports) s.push_back(to_tensor(a));
        for (const auto& a : support_labels) y.push_back(to_mask(a));
        return objective::pairwise_loss(to_tensor(query), s, to_mask(query_labels), y, temperature).item();
      },
      py::arg("query"), py::arg("supports"), py::arg("query_labels"), py::arg("support_labels"),
      py::arg("temperature") = 0.1);

  m.def(
      "miou",
      [](const std::vector<ByteArray>& predictions, const std::vector<ByteArray>& truths, const std::vector<int>& ids) {
        std::vector<Mask> p, g;
        for (const auto& a : predictions) p.push_back(to_mask(a));
        for (const auto& a : truths) g.push_back(to_mask(a));
        return report_dict(episodes::miou(p, g, ids));
      },
      py::arg("predictions"), py::arg("ground_truths"), py::arg("class_ids"));

  m.def(
      "config_items",
      [](const std::map<std::string, std::string>& overrides) { return config_from(overrides).items(); },
      py::arg("overrides") = std::map<std::string, std::string>{}, "Resolved key/value pairs of a run config.");

  m.def(
      "generate_dataset",
      [](const std::filesystem::path& root, const std::map<std::string, std::string>& overrides) {
        const auto c = config_from(overrides);
        const auto split = episodes::generate_synthetic_dataset(c.dataset, c.seed, root);
        return split.samples.size();
      },
      py::arg("root"), py::arg("overrides") = std::map<std::string, std::string>{});

  m.def(
      "train",
      [](const std::map<std::string, std::string>& overrides) {
        const auto c = config_from(overrides);
        const auto split = episodes::load_dataset(c.data_dir);
        py::gil_scoped_release release;
        auto result = harness::run_training(c, split);
        std::vector<std::map<std::string, double>> rows;
        for (const auto& e : result.metrics) {
          rows.push_back({{"epoch", static_cast<double>(e.epoch)},
                          {"ce", e.ce},
                          {"ce_prompt", e.ce_prompt},
                          {"pair", e.pair},
                          {"total", e.total}});
        }
        return rows;
      },
      py::arg("overrides"), "Trains into output_dir and returns the per-epoch losses.");

  m.def(
      "evaluate",
      [](const std::map<std::string, std::string>& overrides, const std::string& checkpoint, std::size_t n_episodes) {
        const auto c = config_from(overrides);
        const auto split = episodes::load_dataset(c.data_dir);
        auto state = harness::TrainState::init(c);
        if (!checkpoint.empty()) {
          harness::assign_from_archive(state.params.named_parameters(), harness::load_archive(checkpoint));
        }
        harness::EvalReport report;
        {
          py::gil_scoped_release release;
          report = harness::run_evaluation(c, state.params, split, n_episodes ? n_episodes : c.eval_episodes);
        }
        return report_dict(report.miou);
      },
      py::arg("overrides"), py::arg("checkpoint") = "", py::arg("episodes") = 0,
      "mIoU on novel classes; an empty checkpoint evaluates freshly initialised parameters.");

  m.def(
      "gradcheck",
      [](double tolerance) {
        harness::GradcheckOptions options;
        options.tolerance = tolerance;
        const auto report = harness::run_gradcheck(harness::tiny_gradcheck_config(), options);
        std::map<std::string, double> worst;
        for (const auto& g : report.groups) worst[g.name] = g.worst_relative_error;
        return py::make_tuple(report.passed, worst);
      },
      py::arg("tolerance") = 1e-3, "Finite-difference check of the full objective on a tiny episode.");
}
