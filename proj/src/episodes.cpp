#include "fptrans/episodes.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <set>
#include <sstream>

#include "fptrans/errors.hpp"

namespace fptrans::episodes {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- NetPBM

namespace {

class PnmReader {
 public:
  explicit PnmReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t offset() const { return pos_; }

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      const auto c = bytes_[pos_];
      if (c == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(c)) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  std::size_t read_number(const char* what) {
    skip_space_and_comments();
    const auto start = pos_;
    std::size_t value = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      value = value * 10 + (bytes_[pos_] - '0');
      if (value > 1u << 20) throw ParseError(std::string("PNM ") + what + " too large", start);
      ++pos_;
    }
    if (pos_ == start) throw ParseError(std::string("PNM header: expected ") + what, start);
    return value;
  }

  std::uint8_t byte() {
    if (pos_ >= bytes_.size()) throw ParseError("PNM: unexpected end of data", pos_);
    return bytes_[pos_++];
  }

  std::span<const std::uint8_t> take(std::size_t n) {
    if (bytes_.size() - pos_ < n) {
      throw ParseError("PNM payload truncated: need " + std::to_string(n) + " bytes, have " +
                           std::to_string(bytes_.size() - pos_),
                       bytes_.size());
    }
    auto out = bytes_.subspan(pos_, n);
    pos_ += n;
    return out;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace

Image parse_pnm(std::span<const std::uint8_t> bytes) {
  PnmReader r(bytes);
  if (r.byte() != 'P') throw ParseError("PNM: bad magic", 0);
  const auto kind = r.byte();
  if (kind != '5' && kind != '6') throw ParseError("PNM: only binary P5/P6 are supported", 1);
  Image img;
  img.channels = kind == '6' ? 3 : 1;
  img.width = r.read_number("width");
  img.height = r.read_number("height");
  const auto maxval_at = r.offset();
  if (r.read_number("maxval") != 255) throw ParseError("PNM: maxval must be 255", maxval_at);
  if (img.width == 0 || img.height == 0) throw ParseError("PNM: empty image", maxval_at);
  const auto sep_at = r.offset();
  if (!std::isspace(r.byte())) throw ParseError("PNM: missing whitespace after header", sep_at);
  auto payload = r.take(img.width * img.height * img.channels);
  img.pixels.assign(payload.begin(), payload.end());
  return img;
}

std::vector<std::uint8_t> encode_pnm(const Image& image) {
  if (image.channels != 1 && image.channels != 3) throw std::invalid_argument("PNM supports 1 or 3 channels");
  if (image.pixels.size() != image.height * image.width * image.channels) {
    throw DimensionError("image pixel buffer does not match its size");
  }
  std::ostringstream header;
  header << (image.channels == 3 ? "P6" : "P5") << '\n' << image.width << ' ' << image.height << "\n255\n";
  const auto h = header.str();
  std::vector<std::uint8_t> out(h.begin(), h.end());
  out.insert(out.end(), image.pixels.begin(), image.pixels.end());
  return out;
}

Image load_image(const fs::path& path) {
  const auto bytes = read_file(path);
  try {
    return parse_pnm(bytes);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what(), e.offset());
  }
}

void save_image(const fs::path& path, const Image& image) { write_file(path, encode_pnm(image)); }

Mask load_mask(const fs::path& path) {
  const auto img = load_image(path);
  if (img.channels != 1) throw std::runtime_error(path.string() + ": mask must be a P5 image");
  Mask m(img.height, img.width);
  for (std::size_t i = 0; i < m.size(); ++i) m.values[i] = img.pixels[i] >= 128 ? 1 : 0;
  return m;
}

void save_mask(const fs::path& path, const Mask& mask) {
  Image img{mask.height, mask.width, 1, {}};
  img.pixels.reserve(mask.size());
  for (auto v : mask.values) img.pixels.push_back(v ? 255 : 0);
  save_image(path, img);
}

Tensor image_to_tensor(const Image& image) {
  if (image.channels != 3) throw DimensionError("image_to_tensor expects an RGB image");
  const auto hw = image.height * image.width;
  std::vector<double> data(3 * hw);
  for (std::size_t i = 0; i < hw; ++i)
    for (std::size_t c = 0; c < 3; ++c) data[c * hw + i] = (image.pixels[i * 3 + c] / 255.0 - 0.5) / 0.25;
  return Tensor::from_data({3, image.height, image.width}, std::move(data));
}

// --------------------------------------------------------------- rendering

void DatasetConfig::validate() const {
  if (base_classes.size() < 2) throw ConfigError("need at least 2 base classes");
  if (novel_classes.empty()) throw ConfigError("need at least 1 novel class");
  std::set<std::string> seen;
  for (const auto* list : {&base_classes, &novel_classes}) {
    for (const auto& name : *list) {
      if (std::find(known_shapes().begin(), known_shapes().end(), name) == known_shapes().end()) {
        throw ConfigError("unknown shape class '" + name + "'");
      }
      if (!seen.insert(name).second) throw ConfigError("class '" + name + "' listed twice");
    }
  }
  if (!(min_foreground > 0 && min_foreground < max_foreground && max_foreground < 1)) {
    throw ConfigError("foreground band must satisfy 0 < min < max < 1");
  }
  if (image_size < 8) throw ConfigError("image_size too small");
}

const std::vector<std::string>& known_shapes() {
  static const std::vector<std::string> shapes{"disk", "square", "triangle", "ring", "cross"};
  return shapes;
}

namespace {

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  const double c = v * s;
  const double hp = std::fmod(h, 1.0) * 6.0;
  const double x = c * (1 - std::abs(std::fmod(hp, 2.0) - 1));
  std::array<double, 3> rgb{};
  switch (static_cast<int>(hp)) {
    case 0: rgb = {c, x, 0}; break;
    case 1: rgb = {x, c, 0}; break;
    case 2: rgb = {0, c, x}; break;
    case 3: rgb = {0, x, c}; break;
    case 4: rgb = {x, 0, c}; break;
    default: rgb = {c, 0, x}; break;
  }
  const double m = v - c;
  for (auto& ch : rgb) ch += m;
  return rgb;
}

// Point (u, v) in the shape's rotated, radius-normalized frame.
bool inside_shape(const std::string& shape, double u, double v) {
  const double r2 = u * u + v * v;
  if (shape == "disk") return r2 <= 1.0;
  if (shape == "ring") return r2 <= 1.0 && r2 >= 0.55 * 0.55;
  if (shape == "square") return std::abs(u) <= 0.8 && std::abs(v) <= 0.8;
  if (shape == "cross") {
    return (std::abs(u) <= 1.0 && std::abs(v) <= 0.34) || (std::abs(v) <= 1.0 && std::abs(u) <= 0.34);
  }
  if (shape == "triangle") {
    // Equilateral triangle inscribed in the unit circle, apex at v = -1.
    const double s3 = std::numbers::sqrt3;
    return v <= 0.5 && (s3 * u - v) <= 1.0 && (-s3 * u - v) <= 1.0;
  }
  throw ConfigError("unknown shape class '" + shape + "'");
}

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v * 255.0), 0L, 255L)); }

}  // namespace

RenderedSample render_sample(const std::string& shape, std::size_t size, double min_fg, double max_fg, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  const double n = static_cast<double>(size);

  Mask mask(size, size);
  for (int attempt = 0;; ++attempt) {
    if (attempt > 1000) throw std::runtime_error("render_sample: could not satisfy the foreground band");
    const double radius = n * (0.10 + 0.25 * unit(rng));
    const double cx = n * (0.2 + 0.6 * unit(rng));
    const double cy = n * (0.2 + 0.6 * unit(rng));
    const double angle = 2.0 * std::numbers::pi * unit(rng);
    const double ca = std::cos(angle), sa = std::sin(angle);
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        const double dx = (static_cast<double>(x) + 0.5 - cx) / radius;
        const double dy = (static_cast<double>(y) + 0.5 - cy) / radius;
        mask.at(y, x) = inside_shape(shape, ca * dx + sa * dy, -sa * dx + ca * dy) ? 1 : 0;
      }
    }
    const double frac = static_cast<double>(mask.count()) / static_cast<double>(mask.size());
    if (frac >= min_fg && frac <= max_fg) break;
  }

  // Background: muted color with a linear shading ramp and pixel noise.
  // Foreground: saturated color of an independent hue with mild noise.
  const auto bg_a = hsv_to_rgb(unit(rng), 0.1 + 0.25 * unit(rng), 0.35 + 0.4 * unit(rng));
  const auto bg_b = hsv_to_rgb(unit(rng), 0.1 + 0.25 * unit(rng), 0.35 + 0.4 * unit(rng));
  const auto fg = hsv_to_rgb(unit(rng), 0.65 + 0.35 * unit(rng), 0.55 + 0.45 * unit(rng));
  const double ramp_angle = 2.0 * std::numbers::pi * unit(rng);
  const double rx = std::cos(ramp_angle), ry = std::sin(ramp_angle);

  Image img{size, size, 3, std::vector<std::uint8_t>(size * size * 3)};
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double t = std::clamp(0.5 + ((x / n - 0.5) * rx + (y / n - 0.5) * ry), 0.0, 1.0);
      const bool is_fg = mask.at(y, x) != 0;
      for (std::size_t c = 0; c < 3; ++c) {
        const double base = is_fg ? fg[c] : (1 - t) * bg_a[c] + t * bg_b[c];
        const double sigma = is_fg ? 0.04 : 0.08;
        img.pixels[(y * size + x) * 3 + c] = to_byte(base + sigma * noise(rng));
      }
    }
  }
  return {std::move(img), std::move(mask)};
}

void DatasetSplit::index() {
  by_class.clear();
  for (std::size_t i = 0; i < samples.size(); ++i) by_class[samples[i].class_id].push_back(i);
}

DatasetSplit generate_synthetic_dataset(const DatasetConfig& config, std::uint64_t seed, const fs::path& root) {
  config.validate();
  DatasetSplit split;
  auto add_classes = [&](const std::vector<std::string>& names, std::vector<int>& ids, std::size_t per_class) {
    for (const auto& name : names) {
      const int id = static_cast<int>(split.class_names.size());
      split.class_names.push_back(name);
      ids.push_back(id);
      for (std::size_t i = 0; i < per_class; ++i) {
        auto rng = make_rng(seed, Stream::kDataset, (static_cast<std::uint64_t>(id) << 32) | i);
        auto rendered = render_sample(name, config.image_size, config.min_foreground, config.max_foreground, rng);
        Sample s;
        s.class_id = id;
        s.image_path = name + "/" + std::to_string(i) + ".ppm";
        s.mask_path = name + "/" + std::to_string(i) + ".pgm";
        s.image = std::move(rendered.image);
        s.mask = std::move(rendered.mask);
        split.samples.push_back(std::move(s));
      }
    }
  };
  add_classes(config.base_classes, split.train_classes, config.base_images_per_class);
  add_classes(config.novel_classes, split.test_classes, config.novel_images_per_class);
  split.index();

  if (!root.empty()) {
    fs::create_directories(root);
    std::ofstream index(root / "index.tsv");
    if (!index) throw std::runtime_error("cannot write " + (root / "index.tsv").string());
    index << "# class_id\tclass_name\tphase\timage\tmask\n";
    for (const auto& s : split.samples) {
      save_image(root / s.image_path, s.image);
      save_mask(root / s.mask_path, s.mask);
      const bool train =
          std::find(split.train_classes.begin(), split.train_classes.end(), s.class_id) != split.train_classes.end();
      index << s.class_id << '\t' << split.class_names[s.class_id] << '\t' << (train ? "train" : "test") << '\t'
            << s.image_path << '\t' << s.mask_path << '\n';
    }
  }
  return split;
}

DatasetSplit load_dataset(const fs::path& root) {
  std::ifstream index(root / "index.tsv");
  if (!index) throw std::runtime_error("cannot open " + (root / "index.tsv").string());
  DatasetSplit split;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(index, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream fields(line);
    std::string id_s, name, phase;
    Sample s;
    if (!std::getline(fields, id_s, '\t') || !std::getline(fields, name, '\t') || !std::getline(fields, phase, '\t') ||
        !std::getline(fields, s.image_path, '\t') || !std::getline(fields, s.mask_path, '\t')) {
      throw std::runtime_error((root / "index.tsv").string() + ":" + std::to_string(line_no) + ": malformed record");
    }
    s.class_id = std::stoi(id_s);
    if (s.class_id < 0) throw std::runtime_error("negative class id in index");
    if (static_cast<std::size_t>(s.class_id) >= split.class_names.size()) {
      split.class_names.resize(s.class_id + 1);
    }
    if (split.class_names[s.class_id].empty()) {
      split.class_names[s.class_id] = name;
      (phase == "train" ? split.train_classes : split.test_classes).push_back(s.class_id);
    }
    s.image = load_image(root / s.image_path);
    s.mask = load_mask(root / s.mask_path);
    split.samples.push_back(std::move(s));
  }
  split.index();
  return split;
}

// ---------------------------------------------------------------- episodes

Episode sample_episode(const DatasetSplit& split, std::size_t shots, Phase phase, Rng& rng) {
  const auto& classes = phase == Phase::kTrain ? split.train_classes : split.test_classes;
  if (classes.empty()) throw std::runtime_error("no classes for the requested phase");
  std::uniform_int_distribution<std::size_t> pick_class(0, classes.size() - 1);
  Episode ep;
  ep.class_id = classes[pick_class(rng)];
  const auto it = split.by_class.find(ep.class_id);
  const std::size_t available = it == split.by_class.end() ? 0 : it->second.size();
  if (available < shots + 1) {
    throw std::runtime_error("class '" + split.class_names[ep.class_id] + "' has " + std::to_string(available) +
                             " images, need " + std::to_string(shots + 1));
  }
  std::vector<std::size_t> pool = it->second;
  for (std::size_t i = 0; i < shots + 1; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  ep.query = pool[0];
  ep.supports.assign(pool.begin() + 1, pool.begin() + 1 + static_cast<std::ptrdiff_t>(shots));
  ep.seed = rng();
  return ep;
}

std::string manifest_line(const DatasetSplit& split, const Episode& episode) {
  std::ostringstream out;
  const auto& q = split.samples[episode.query];
  out << episode.seed << '\t' << episode.class_id << '\t' << split.class_names[episode.class_id] << '\t'
      << q.image_path << '\t' << q.mask_path;
  for (auto s : episode.supports) out << '\t' << split.samples[s].image_path << '\t' << split.samples[s].mask_path;
  return out.str();
}

// -------------------------------------------------------------------- mIoU

MiouReport miou(std::span<const Mask> predictions, std::span<const Mask> ground_truths,
                std::span<const int> class_ids) {
  if (predictions.size() != ground_truths.size() || predictions.size() != class_ids.size()) {
    throw DimensionError("miou: predictions, ground truths and class ids must have equal length");
  }
  std::map<int, ClassIoU> per_class;
  for (std::size_t e = 0; e < predictions.size(); ++e) {
    const auto& p = predictions[e];
    const auto& g = ground_truths[e];
    if (p.height != g.height || p.width != g.width) {
      throw DimensionError("miou: prediction " + std::to_string(p.height) + "x" + std::to_string(p.width) +
                           " vs ground truth " + std::to_string(g.height) + "x" + std::to_string(g.width));
    }
    auto& c = per_class[class_ids[e]];
    c.class_id = class_ids[e];
    for (std::size_t i = 0; i < p.size(); ++i) {
      c.true_positive += p.values[i] && g.values[i];
      c.false_positive += p.values[i] && !g.values[i];
      c.false_negative += !p.values[i] && g.values[i];
    }
  }
  MiouReport report;
  for (auto& [id, c] : per_class) {
    const auto uni = c.true_positive + c.false_positive + c.false_negative;
    c.iou = uni == 0 ? 1.0 : static_cast<double>(c.true_positive) / static_cast<double>(uni);
    report.mean += c.iou;
    report.classes.push_back(c);
  }
  if (!report.classes.empty()) report.mean /= static_cast<double>(report.classes.size());
  return report;
}

}  // namespace fptrans::episodes
