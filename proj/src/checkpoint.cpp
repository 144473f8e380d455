#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <unordered_map>

#include "fptrans/errors.hpp"
#include "fptrans/harness.hpp"

namespace fptrans::harness {

namespace {

constexpr char kMagic[8] = {'F', 'P', 'T', 'R', 'A', 'R', 'C', 'H'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

template <typename T>
void put(std::vector<std::uint8_t>& out, T value) {
  std::uint8_t bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  out.insert(out.end(), bytes, bytes + sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  std::string get_string(std::size_t n) {
    need(n, "key");
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  std::size_t offset() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) throw ParseError(std::string("archive truncated while reading ") + what, pos_);
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_archive(const NamedTensors& entries) {
  std::vector<std::uint8_t> out(kMagic, kMagic + sizeof(kMagic));
  put<std::uint32_t>(out, kVersion);
  put<std::uint64_t>(out, entries.size());
  for (const auto& [name, t] : entries) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put<std::uint64_t>(out, d);
    for (double v : t.data()) put<double>(out, v);
  }
  return out;
}

NamedTensors decode_archive(std::span<const std::uint8_t> bytes) {
  Reader in(bytes);
  for (char c : kMagic) {
    if (in.get<char>("magic") != c) throw ParseError("not an archive (bad magic)", 0);
  }
  const auto version = in.get<std::uint32_t>("version");
  if (version != kVersion) throw ParseError("unsupported archive version " + std::to_string(version), 8);
  const auto count = in.get<std::uint64_t>("entry count");
  NamedTensors out;
  for (std::uint64_t e = 0; e < count; ++e) {
    const auto key_len = in.get<std::uint32_t>("key length");
    auto name = in.get_string(key_len);
    const auto rank = in.get<std::uint32_t>("rank");
    Shape shape(rank);
    for (auto& d : shape) {
      d = in.get<std::uint64_t>("dims");
      if (d == 0) throw ParseError("zero dimension in entry '" + name + "'", in.offset());
    }
    const auto n = shape_numel(shape);
    if (n > bytes.size()) throw ParseError("entry '" + name + "' larger than the archive", in.offset());
    std::vector<double> values(n);
    for (auto& v : values) v = in.get<double>("values");
    out.push_back({std::move(name), Tensor::from_data(std::move(shape), std::move(values))});
  }
  if (!in.done()) throw ParseError("trailing bytes after the last entry", in.offset());
  return out;
}

void save_archive(const std::filesystem::path& path, const NamedTensors& entries) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto bytes = encode_archive(entries);
  // Write beside the target, then rename, so a crash never leaves half a checkpoint.
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

NamedTensors load_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_archive(bytes);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what(), e.offset());
  }
}

void assign_from_archive(const NamedTensors& targets, const NamedTensors& archive, const std::string& prefix) {
  std::unordered_map<std::string, const Tensor*> lookup;
  for (const auto& [name, t] : archive) lookup[name] = &t;
  for (const auto& [name, target] : targets) {
    const auto it = lookup.find(prefix + name);
    if (it == lookup.end()) throw std::runtime_error("checkpoint lacks entry '" + prefix + name + "'");
    if (it->second->shape() != target.shape()) {
      throw DimensionError("checkpoint entry '" + prefix + name + "' has shape " +
                           shape_to_string(it->second->shape()) + ", expected " + shape_to_string(target.shape()));
    }
    Tensor alias = target;
    auto dst = alias.mutable_data();
    const auto src = it->second->data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

}  // namespace fptrans::harness
