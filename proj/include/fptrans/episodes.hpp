#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fptrans/mask.hpp"
#include "fptrans/random.hpp"
#include "fptrans/tensor.hpp"

namespace fptrans::episodes {

/// 8-bit image, interleaved channels (1 = gray, 3 = RGB).
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 3;
  std::vector<std::uint8_t> pixels;

  friend bool operator==(const Image&, const Image&) = default;
};

// Binary NetPBM: P6 for RGB, P5 for gray, maxval 255. Parse failures throw
// ParseError carrying the byte offset.
Image parse_pnm(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_pnm(const Image& image);
Image load_image(const std::filesystem::path& path);
void save_image(const std::filesystem::path& path, const Image& image);

/// P5 mask; pixels >= 128 read as foreground.
Mask load_mask(const std::filesystem::path& path);
/// Writes 0 / 255.
void save_mask(const std::filesystem::path& path, const Mask& mask);

/// RGB image -> [3 x H x W] with v -> (v / 255 - 0.5) / 0.25.
Tensor image_to_tensor(const Image& image);

struct DatasetConfig {
  std::size_t image_size = 64;
  std::vector<std::string> base_classes{"disk", "square", "triangle"};
  std::vector<std::string> novel_classes{"ring", "cross"};
  std::size_t base_images_per_class = 200;
  std::size_t novel_images_per_class = 50;
  double min_foreground = 0.05;
  double max_foreground = 0.60;

  void validate() const;
};

/// Shape families the renderer knows.
const std::vector<std::string>& known_shapes();

struct Sample {
  int class_id = 0;
  std::string image_path;  // relative to the dataset root
  std::string mask_path;
  Image image;
  Mask mask;
};

struct DatasetSplit {
  std::vector<std::string> class_names;  // indexed by class id
  std::vector<int> train_classes;
  std::vector<int> test_classes;
  std::vector<Sample> samples;
  std::map<int, std::vector<std::size_t>> by_class;

  void index();
};

struct RenderedSample {
  Image image;
  Mask mask;
};

/// One image of `shape` with a mask whose foreground fraction lies in
/// [min_fg, max_fg]; deterministic given the rng state.
RenderedSample render_sample(const std::string& shape, std::size_t size, double min_fg, double max_fg, Rng& rng);

/// Renders every image (each with its own derived seed) and, when `root` is
/// non-empty, writes images, masks and `index.tsv` there.
DatasetSplit generate_synthetic_dataset(const DatasetConfig& config, std::uint64_t seed,
                                        const std::filesystem::path& root);

/// Reads `index.tsv` and every image/mask it lists.
DatasetSplit load_dataset(const std::filesystem::path& root);

enum class Phase { kTrain, kTest };

struct Episode {
  int class_id = 0;
  std::size_t query = 0;              // sample index
  std::vector<std::size_t> supports;  // K sample indices
  std::uint64_t seed = 0;             // drives partitions, pool tokens and pair subsampling
};

/// Uniform class from the phase's class list, then K + 1 distinct images.
/// Throws std::runtime_error when the class has fewer than K + 1 images.
Episode sample_episode(const DatasetSplit& split, std::size_t shots, Phase phase, Rng& rng);

/// Tab-separated record: seed, class id, class name, query image, query
/// mask, then image/mask pairs for every support.
std::string manifest_line(const DatasetSplit& split, const Episode& episode);

struct ClassIoU {
  int class_id = 0;
  std::uint64_t true_positive = 0;
  std::uint64_t false_positive = 0;
  std::uint64_t false_negative = 0;
  double iou = 0.0;
};

struct MiouReport {
  std::vector<ClassIoU> classes;  // ascending class id
  double mean = 0.0;
};

/// Counts are summed per class before the ratio; a class whose union is
/// empty scores 1. The mean is unweighted over classes.
MiouReport miou(std::span<const Mask> predictions, std::span<const Mask> ground_truths,
                std::span<const int> class_ids);

}  // namespace fptrans::episodes
