#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "fptrans/errors.hpp"
#include "fptrans/harness.hpp"

namespace fptrans::harness {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("'" + key + "': expected an integer, got '" + v + "'");
  return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("'" + key + "': expected an integer, got '" + v + "'");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("'" + key + "': expected a number, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("'" + key + "': expected true/false, got '" + v + "'");
}

std::string format_double(double v) {
  std::ostringstream out;
  out.precision(17);
  out << v;
  return out.str();
}

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? "," : "") + items[i];
  return out;
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::istringstream in(v);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

struct Field {
  const char* key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define FP_SIZE(name, member)                                                                      \
  Field {                                                                                          \
    name, [](const RunConfig& c) { return std::to_string(c.member); },                            \
        [](RunConfig& c, const std::string& v) { c.member = parse_size(name, v); }                 \
  }
#define FP_DOUBLE(name, member)                                                                    \
  Field {                                                                                          \
    name, [](const RunConfig& c) { return format_double(c.member); },                             \
        [](RunConfig& c, const std::string& v) { c.member = parse_double(name, v); }               \
  }
#define FP_STRING(name, member)                                                                    \
  Field {                                                                                          \
    name, [](const RunConfig& c) { return c.member; }, [](RunConfig& c, const std::string& v) { c.member = v; } \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table{
      FP_SIZE("image_size", model.vit.image_size),
      FP_SIZE("patch_size", model.vit.patch_size),
      FP_SIZE("channels", model.vit.channels),
      FP_SIZE("blocks", model.vit.blocks),
      FP_SIZE("heads", model.vit.heads),
      FP_SIZE("mlp_hidden", model.vit.mlp_hidden),
      FP_SIZE("key_dim", model.vit.key_dim),
      FP_SIZE("value_dim", model.vit.value_dim),
      FP_SIZE("upsampler_hidden", model.upsampler_hidden),
      FP_SIZE("prompt_tokens", model.prompt_tokens),
      FP_SIZE("regions", model.regions),
      FP_SIZE("pool_size", model.pool_size),
      FP_SIZE("shots", shots),
      Field{"sync_prompts", [](const RunConfig& c) { return std::string(c.sync_prompts ? "true" : "false"); },
            [](RunConfig& c, const std::string& v) { c.sync_prompts = parse_bool("sync_prompts", v); }},
      FP_DOUBLE("temperature", loss.temperature),
      FP_DOUBLE("pair_weight", loss.pair_weight),
      FP_SIZE("pair_subsample_limit", loss.pair_subsample_limit),
      FP_DOUBLE("lr", lr),
      FP_DOUBLE("momentum", momentum),
      FP_DOUBLE("weight_decay", weight_decay),
      FP_SIZE("epochs", epochs),
      FP_SIZE("episodes_per_epoch", episodes_per_epoch),
      FP_SIZE("eval_episodes", eval_episodes),
      Field{"seed", [](const RunConfig& c) { return std::to_string(c.seed); },
            [](RunConfig& c, const std::string& v) { c.seed = parse_u64("seed", v); }},
      Field{"base_classes", [](const RunConfig& c) { return join(c.dataset.base_classes); },
            [](RunConfig& c, const std::string& v) { c.dataset.base_classes = split_list(v); }},
      Field{"novel_classes", [](const RunConfig& c) { return join(c.dataset.novel_classes); },
            [](RunConfig& c, const std::string& v) { c.dataset.novel_classes = split_list(v); }},
      FP_SIZE("base_images_per_class", dataset.base_images_per_class),
      FP_SIZE("novel_images_per_class", dataset.novel_images_per_class),
      FP_DOUBLE("min_foreground", dataset.min_foreground),
      FP_DOUBLE("max_foreground", dataset.max_foreground),
      FP_STRING("data_dir", data_dir),
      FP_STRING("output_dir", output_dir),
      FP_STRING("extractor_checkpoint", extractor_checkpoint),
  };
  return table;
}

#undef FP_SIZE
#undef FP_DOUBLE
#undef FP_STRING

}  // namespace

void RunConfig::validate() const {
  model.validate();
  loss.validate();
  dataset.validate();
  if (dataset.image_size != model.vit.image_size) {
    throw ConfigError("dataset image size must equal the model image size");
  }
  if (shots == 0) throw ConfigError("shots must be positive");
  if (!(lr > 0) || !(momentum >= 0 && momentum < 1) || !(weight_decay >= 0)) {
    throw ConfigError("optimizer requires lr > 0, 0 <= momentum < 1, weight_decay >= 0");
  }
  if (episodes_per_epoch == 0) throw ConfigError("episodes_per_epoch must be positive");
}

void RunConfig::set(const std::string& key, const std::string& value) {
  for (const auto& f : fields()) {
    if (key == f.key) {
      f.set(*this, trim(value));
      // The renderer size follows the model size; attention and MLP widths
      // follow the channel count unless set after it.
      if (key == "image_size") dataset.image_size = model.vit.image_size;
      if (key == "channels") {
        model.vit.key_dim = model.vit.value_dim = model.vit.channels;
        model.vit.mlp_hidden = 4 * model.vit.channels;
      }
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

std::vector<std::pair<std::string, std::string>> RunConfig::items() const {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& f : fields()) out.emplace_back(f.key, f.get(*this));
  return out;
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& [k, v] : items()) out += k + "=" + v + "\n";
  return out;
}

RunConfig RunConfig::from_text(const std::string& text) {
  RunConfig config;
  config.apply_text(text);
  return config;
}

void RunConfig::apply_text(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected key=value, got '" + line + "'");
    }
    set(trim(line.substr(0, eq)), line.substr(eq + 1));
  }
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  RunConfig config;
  config.apply_file(path);
  return config;
}

void RunConfig::apply_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  apply_text(buffer.str());
}

void RunConfig::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << to_text();
}

}  // namespace fptrans::harness
