#include "keycache/feature_store.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"
#include "keycache/error.hpp"
#include "keycache/rng.hpp"

namespace keycache {

namespace {

constexpr std::size_t kHeaderBytes = 16;
constexpr std::uint8_t kFeatureMagic[4] = {'F', 'T', 'R', '1'};
constexpr std::uint8_t kLabelMagic[4] = {'L', 'B', 'L', '1'};

void put_u32(Bytes& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xFF));
  out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xFF));
  out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xFF));
  out.push_back(static_cast<std::uint8_t>((v >> 24) & 0xFF));
}

std::uint32_t get_u32(std::span<const std::uint8_t> bytes, std::size_t offset) {
  return static_cast<std::uint32_t>(bytes[offset]) |
         (static_cast<std::uint32_t>(bytes[offset + 1]) << 8) |
         (static_cast<std::uint32_t>(bytes[offset + 2]) << 16) |
         (static_cast<std::uint32_t>(bytes[offset + 3]) << 24);
}

std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > 0xFFFFFFFFu) fail(ErrorCode::DimMismatch, std::string(what) + " exceeds u32 range");
  return static_cast<std::uint32_t>(v);
}

// Returns (N, second header field) after checking magic, version and size.
std::pair<std::uint32_t, std::uint32_t> read_header(std::span<const std::uint8_t> bytes,
                                                    const std::uint8_t (&magic)[4],
                                                    const char* kind) {
  if (bytes.size() < 4 || !std::equal(std::begin(magic), std::end(magic), bytes.begin())) {
    fail(ErrorCode::BadMagic, std::string(kind) + " file has wrong magic");
  }
  if (bytes.size() < 8) fail(ErrorCode::DimMismatch, std::string(kind) + " header truncated");
  const std::uint32_t version = get_u32(bytes, 4);
  if (version != kFormatVersion) {
    fail(ErrorCode::VersionMismatch,
         std::string(kind) + " version " + std::to_string(version) + " unsupported");
  }
  if (bytes.size() < kHeaderBytes) {
    fail(ErrorCode::DimMismatch, std::string(kind) + " header truncated");
  }
  return {get_u32(bytes, 8), get_u32(bytes, 12)};
}

void validate_layers(const std::vector<LayerData>& layers, std::size_t n) {
  std::set<std::string> seen;
  for (const auto& layer : layers) {
    if (!seen.insert(layer.id).second) {
      fail(ErrorCode::InvalidArgument, "duplicate layer id '" + layer.id + "'");
    }
    if (static_cast<std::size_t>(layer.values.rows()) != n) {
      fail(ErrorCode::DimMismatch, "layer '" + layer.id + "' has " +
                                       std::to_string(layer.values.rows()) + " rows, expected " +
                                       std::to_string(n));
    }
    if (!layer.values.allFinite()) {
      fail(ErrorCode::NonFiniteValue, "layer '" + layer.id + "' contains NaN/Inf");
    }
  }
}

}  // namespace

std::string_view to_string(Split split) noexcept {
  switch (split) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "train";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::Train;
  if (name == "val") return Split::Val;
  if (name == "test") return Split::Test;
  fail(ErrorCode::InvalidArgument, "unknown split '" + std::string(name) + "'");
}

// ---- FeatureSet ----------------------------------------------------------

FeatureSet::FeatureSet(std::vector<LayerData> layers, std::vector<std::uint32_t> labels,
                       std::uint32_t n_classes, Split split)
    : layers_(std::move(layers)), labels_(std::move(labels)), n_classes_(n_classes), split_(split) {
  if (n_classes_ == 0) fail(ErrorCode::InvalidArgument, "n_classes must be positive");
  validate_layers(layers_, labels_.size());
  for (std::size_t i = 0; i < labels_.size(); ++i) {
    if (labels_[i] >= n_classes_) {
      fail(ErrorCode::DimMismatch, "label " + std::to_string(labels_[i]) + " at row " +
                                       std::to_string(i) + " not below C=" +
                                       std::to_string(n_classes_));
    }
  }
}

bool FeatureSet::has_layer(std::string_view id) const noexcept {
  return std::any_of(layers_.begin(), layers_.end(), [&](const auto& l) { return l.id == id; });
}

std::size_t FeatureSet::layer_index(std::string_view id) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i].id == id) return i;
  }
  fail(ErrorCode::UnknownLayer, "layer '" + std::string(id) + "' not in feature set");
}

const LayerData& FeatureSet::layer(std::string_view id) const { return layers_[layer_index(id)]; }

std::vector<std::string> FeatureSet::layer_ids() const {
  std::vector<std::string> ids;
  ids.reserve(layers_.size());
  for (const auto& l : layers_) ids.push_back(l.id);
  return ids;
}

FeatureSet FeatureSet::select_rows(std::span<const std::size_t> rows) const {
  std::vector<LayerData> layers;
  layers.reserve(layers_.size());
  for (const auto& l : layers_) {
    FloatMatrix m(static_cast<Eigen::Index>(rows.size()), l.values.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (rows[r] >= n_items()) fail(ErrorCode::InvalidArgument, "row index out of range");
      m.row(static_cast<Eigen::Index>(r)) = l.values.row(static_cast<Eigen::Index>(rows[r]));
    }
    layers.push_back({l.id, std::move(m)});
  }
  std::vector<std::uint32_t> labels;
  labels.reserve(rows.size());
  for (std::size_t r : rows) labels.push_back(labels_[r]);
  return FeatureSet(std::move(layers), std::move(labels), n_classes_, split_);
}

FeatureSet FeatureSet::with_split(Split split) const {
  FeatureSet copy = *this;
  copy.split_ = split;
  return copy;
}

bool operator==(const FeatureSet& a, const FeatureSet& b) {
  if (a.n_classes_ != b.n_classes_ || a.split_ != b.split_ || a.labels_ != b.labels_ ||
      a.layers_.size() != b.layers_.size()) {
    return false;
  }
  for (std::size_t i = 0; i < a.layers_.size(); ++i) {
    const auto& la = a.layers_[i];
    const auto& lb = b.layers_[i];
    if (la.id != lb.id || la.values.rows() != lb.values.rows() ||
        la.values.cols() != lb.values.cols()) {
      return false;
    }
    if (la.values.size() > 0 &&
        std::memcmp(la.values.data(), lb.values.data(), sizeof(float) * la.values.size()) != 0) {
      return false;
    }
  }
  return true;
}

// ---- containers ----------------------------------------------------------

Bytes encode_features(const FloatMatrix& values) {
  Bytes out;
  out.reserve(kHeaderBytes + 4 * static_cast<std::size_t>(values.size()));
  out.insert(out.end(), std::begin(kFeatureMagic), std::end(kFeatureMagic));
  put_u32(out, kFormatVersion);
  put_u32(out, checked_u32(static_cast<std::size_t>(values.rows()), "N"));
  put_u32(out, checked_u32(static_cast<std::size_t>(values.cols()), "d"));
  const float* data = values.data();
  for (Eigen::Index i = 0; i < values.size(); ++i) put_u32(out, std::bit_cast<std::uint32_t>(data[i]));
  return out;
}

FloatMatrix decode_features(std::span<const std::uint8_t> bytes) {
  const auto [n, d] = read_header(bytes, kFeatureMagic, "feature");
  const std::size_t expected = kHeaderBytes + 4 * static_cast<std::size_t>(n) * d;
  if (bytes.size() != expected) {
    fail(ErrorCode::DimMismatch, "feature file holds " + std::to_string(bytes.size()) +
                                     " bytes, header N=" + std::to_string(n) +
                                     " d=" + std::to_string(d) + " needs " +
                                     std::to_string(expected));
  }
  FloatMatrix values(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  float* data = values.data();
  for (std::size_t i = 0; i < static_cast<std::size_t>(n) * d; ++i) {
    const float v = std::bit_cast<float>(get_u32(bytes, kHeaderBytes + 4 * i));
    if (!std::isfinite(v)) {
      fail(ErrorCode::NonFiniteValue, "non-finite value at row " + std::to_string(i / d) +
                                          ", column " + std::to_string(i % d));
    }
    data[i] = v;
  }
  return values;
}

Bytes encode_labels(std::span<const std::uint32_t> labels, std::uint32_t n_classes) {
  Bytes out;
  out.reserve(kHeaderBytes + 4 * labels.size());
  out.insert(out.end(), std::begin(kLabelMagic), std::end(kLabelMagic));
  put_u32(out, kFormatVersion);
  put_u32(out, checked_u32(labels.size(), "N"));
  put_u32(out, n_classes);
  for (std::uint32_t l : labels) put_u32(out, l);
  return out;
}

LabelFile decode_labels(std::span<const std::uint8_t> bytes) {
  const auto [n, c] = read_header(bytes, kLabelMagic, "label");
  const std::size_t expected = kHeaderBytes + 4 * static_cast<std::size_t>(n);
  if (bytes.size() != expected) {
    fail(ErrorCode::DimMismatch, "label file holds " + std::to_string(bytes.size()) +
                                     " bytes, header N=" + std::to_string(n) + " needs " +
                                     std::to_string(expected));
  }
  LabelFile out;
  out.n_classes = c;
  out.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.labels[i] = get_u32(bytes, kHeaderBytes + 4 * i);
    if (out.labels[i] >= c) {
      fail(ErrorCode::DimMismatch, "label " + std::to_string(out.labels[i]) + " not below C=" +
                                       std::to_string(c));
    }
  }
  return out;
}

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  std::size_t offset = 0;
  while (offset < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - offset, 1u << 30));
    crc = ::crc32(crc, bytes.data() + offset, chunk);
    offset += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::Io, "cannot open '" + path.string() + "'");
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::Io, "cannot write '" + tmp.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorCode::Io, "short write to '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

void write_text_atomic(const std::filesystem::path& path, std::string_view text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

// ---- manifest ------------------------------------------------------------

namespace {

using nlohmann::json;

json file_to_json(const FileEntry& f) { return json{{"file", f.file}, {"crc32", f.crc32}}; }

FileEntry file_from_json(const json& j) {
  return FileEntry{j.at("file").get<std::string>(), j.at("crc32").get<std::uint32_t>()};
}

}  // namespace

std::string Manifest::to_json_text() const {
  json j;
  j["format"] = "keycache-manifest";
  j["version"] = kFormatVersion;
  j["dataset"] = dataset;
  j["n_classes"] = n_classes;
  j["layers"] = json::array();
  for (const auto& l : layers) j["layers"].push_back({{"id", l.id}, {"dim", l.dim}});
  j["splits"] = json::object();
  for (const auto& [name, s] : splits) {
    json js{{"n_items", s.n_items}, {"labels", file_to_json(s.labels)}};
    js["features"] = json::object();
    for (const auto& [layer, f] : s.features) js["features"][layer] = file_to_json(f);
    j["splits"][name] = std::move(js);
  }
  if (generator_seed) j["generator_seed"] = *generator_seed;
  j["seeds"] = json::object();
  for (const auto& [k, v] : seeds) j["seeds"][k] = v;
  if (image_shape) {
    j["image_shape"] = {{"width", image_shape->width},
                        {"height", image_shape->height},
                        {"channels", image_shape->channels}};
  }
  if (!key_layers.empty()) {
    j["key_layers"] = key_layers;
    j["skipped_items"] = skipped_items;
  }
  return j.dump(2) + "\n";
}

Manifest Manifest::from_json_text(std::string_view text) {
  Manifest m;
  try {
    const json j = json::parse(text);
    if (j.value("version", kFormatVersion) != kFormatVersion) {
      fail(ErrorCode::VersionMismatch, "manifest version unsupported");
    }
    m.dataset = j.value("dataset", std::string{});
    m.n_classes = j.at("n_classes").get<std::uint32_t>();
    for (const auto& l : j.at("layers")) {
      m.layers.push_back({l.at("id").get<std::string>(), l.at("dim").get<std::size_t>()});
    }
    for (const auto& [name, js] : j.at("splits").items()) {
      SplitEntry s;
      s.n_items = js.at("n_items").get<std::size_t>();
      s.labels = file_from_json(js.at("labels"));
      for (const auto& [layer, f] : js.at("features").items()) s.features[layer] = file_from_json(f);
      m.splits[name] = std::move(s);
    }
    if (j.contains("generator_seed")) m.generator_seed = j["generator_seed"].get<std::uint64_t>();
    if (j.contains("seeds")) {
      for (const auto& [k, v] : j["seeds"].items()) m.seeds[k] = v.get<std::uint64_t>();
    }
    if (j.contains("image_shape")) {
      const auto& s = j["image_shape"];
      m.image_shape = ImageShape{s.at("width").get<std::uint32_t>(),
                                 s.at("height").get<std::uint32_t>(),
                                 s.at("channels").get<std::uint32_t>()};
    }
    if (j.contains("key_layers")) m.key_layers = j["key_layers"].get<std::vector<std::string>>();
    m.skipped_items = j.value("skipped_items", std::size_t{0});
  } catch (const json::exception& e) {
    fail(ErrorCode::Io, std::string("malformed manifest: ") + e.what());
  }
  return m;
}

void Manifest::save(const std::filesystem::path& path) const {
  write_text_atomic(path, to_json_text());
}

Manifest Manifest::load(const std::filesystem::path& path) {
  const Bytes bytes = read_file(path);
  return from_json_text(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

const LayerSpec* Manifest::find_layer(std::string_view id) const noexcept {
  for (const auto& l : layers) {
    if (l.id == id) return &l;
  }
  return nullptr;
}

namespace {

Bytes read_checked(const std::filesystem::path& dir, const FileEntry& entry) {
  Bytes bytes = read_file(dir / entry.file);
  const std::uint32_t actual = crc32(bytes);
  if (actual != entry.crc32) {
    fail(ErrorCode::ChecksumMismatch, "checksum of '" + entry.file + "' is " +
                                          std::to_string(actual) + ", manifest says " +
                                          std::to_string(entry.crc32));
  }
  return bytes;
}

}  // namespace

FeatureSet load_feature_set(const std::filesystem::path& dir, const Manifest& manifest,
                            Split split) {
  const auto it = manifest.splits.find(std::string(to_string(split)));
  if (it == manifest.splits.end()) {
    fail(ErrorCode::Io, "manifest has no split '" + std::string(to_string(split)) + "'");
  }
  const SplitEntry& entry = it->second;

  LabelFile labels = decode_labels(read_checked(dir, entry.labels));
  if (labels.labels.size() != entry.n_items || labels.n_classes != manifest.n_classes) {
    fail(ErrorCode::DimMismatch, "label file disagrees with manifest N/C");
  }

  std::vector<LayerData> layers;
  for (const auto& spec : manifest.layers) {
    const auto f = entry.features.find(spec.id);
    if (f == entry.features.end()) continue;
    FloatMatrix values = decode_features(read_checked(dir, f->second));
    if (static_cast<std::size_t>(values.rows()) != entry.n_items ||
        static_cast<std::size_t>(values.cols()) != spec.dim) {
      fail(ErrorCode::DimMismatch, "layer '" + spec.id + "' is " +
                                       std::to_string(values.rows()) + "x" +
                                       std::to_string(values.cols()) + ", manifest declares " +
                                       std::to_string(entry.n_items) + "x" +
                                       std::to_string(spec.dim));
    }
    layers.push_back({spec.id, std::move(values)});
  }
  for (const auto& [layer, f] : entry.features) {
    if (!manifest.find_layer(layer)) {
      fail(ErrorCode::UnknownLayer, "split references undeclared layer '" + layer + "'");
    }
  }
  return FeatureSet(std::move(layers), std::move(labels.labels), manifest.n_classes, split);
}

void save_feature_set(const std::filesystem::path& dir, const FeatureSet& fs, Manifest& manifest) {
  std::filesystem::create_directories(dir);
  if (manifest.n_classes == 0) manifest.n_classes = fs.n_classes();
  if (manifest.n_classes != fs.n_classes()) {
    fail(ErrorCode::DimMismatch, "feature set class count differs from manifest");
  }
  const std::string split_name(to_string(fs.split()));
  SplitEntry entry;
  entry.n_items = fs.n_items();

  const Bytes label_bytes = encode_labels(fs.labels(), fs.n_classes());
  entry.labels = {split_name + ".lbl", crc32(label_bytes)};
  write_file_atomic(dir / entry.labels.file, label_bytes);

  for (const auto& layer : fs.layers()) {
    const auto dim = static_cast<std::size_t>(layer.values.cols());
    if (const LayerSpec* spec = manifest.find_layer(layer.id)) {
      if (spec->dim != dim) {
        fail(ErrorCode::DimMismatch, "layer '" + layer.id + "' width differs from manifest");
      }
    } else {
      manifest.layers.push_back({layer.id, dim});
    }
    const Bytes bytes = encode_features(layer.values);
    FileEntry f{split_name + "." + layer.id + ".ftr", crc32(bytes)};
    write_file_atomic(dir / f.file, bytes);
    entry.features[layer.id] = std::move(f);
  }
  manifest.splits[split_name] = std::move(entry);
}

// ---- subsets and splits --------------------------------------------------

std::vector<std::size_t> subsample_indices(std::span<const std::uint32_t> labels,
                                           std::uint32_t n_classes, const SubsetSpec& spec) {
  if (spec.fraction.has_value() == spec.per_class.has_value()) {
    fail(ErrorCode::InvalidArgument, "subset needs exactly one of fraction / per-class count");
  }
  if (spec.fraction && !(*spec.fraction >= 0.0 && *spec.fraction <= 1.0)) {
    fail(ErrorCode::InvalidArgument, "subset fraction must lie in [0, 1]");
  }

  std::vector<std::vector<std::size_t>> by_class(n_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= n_classes) fail(ErrorCode::DimMismatch, "label out of range");
    by_class[labels[i]].push_back(i);
  }

  Rng rng(spec.seed);
  std::vector<std::size_t> chosen;
  for (auto& rows : by_class) {
    std::size_t take = 0;
    if (spec.fraction) {
      take = static_cast<std::size_t>(std::llround(*spec.fraction * static_cast<double>(rows.size())));
    } else {
      take = std::min(*spec.per_class, rows.size());
    }
    // Every class consumes the generator the same way regardless of `take`,
    // so class c's draw is independent of the counts chosen for others.
    rng.shuffle(rows);
    chosen.insert(chosen.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(take));
  }
  std::sort(chosen.begin(), chosen.end());

  const bool asked_for_some = spec.fraction ? *spec.fraction > 0.0 : *spec.per_class > 0;
  if (chosen.empty() && asked_for_some) {
    fail(ErrorCode::EmptySubset, "subset rounds to zero items");
  }
  return chosen;
}

FeatureSet subsample(const FeatureSet& fs, const SubsetSpec& spec) {
  const auto rows = subsample_indices(fs.labels(), fs.n_classes(), spec);
  return fs.select_rows(rows);
}

SplitIndices split_indices(std::size_t n, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) {
    fail(ErrorCode::InvalidArgument, "split ratio must lie strictly between 0 and 1");
  }
  const auto first_size = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n)));
  if (first_size == 0 || first_size == n) {
    fail(ErrorCode::DegenerateSplit, "split of " + std::to_string(n) + " items at ratio " +
                                         std::to_string(ratio) + " leaves one side empty");
  }
  Rng rng(seed);
  auto order = rng.permutation(n);
  SplitIndices out;
  out.first.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(first_size));
  out.second.assign(order.begin() + static_cast<std::ptrdiff_t>(first_size), order.end());
  std::sort(out.first.begin(), out.first.end());
  std::sort(out.second.begin(), out.second.end());
  return out;
}

std::pair<FeatureSet, FeatureSet> split_validation(const FeatureSet& fs, double ratio,
                                                   std::uint64_t seed) {
  const auto parts = split_indices(fs.n_items(), ratio, seed);
  return {fs.select_rows(parts.first), fs.select_rows(parts.second)};
}

}  // namespace keycache
