#pragma once

// Activation/label interchange: the FTR1/LBL1 binary containers, the JSON
// manifest that ties them together, and the split/subsample utilities used
// to carve caches and validation sets out of a FeatureSet.

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace keycache {

using FloatMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Bytes = std::vector<std::uint8_t>;

enum class Split { Train, Val, Test };

std::string_view to_string(Split split) noexcept;
Split parse_split(std::string_view name);

struct ImageShape {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::uint32_t channels = 1;

  std::size_t size() const noexcept {
    return static_cast<std::size_t>(width) * height * channels;
  }
  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

struct LayerData {
  std::string id;
  FloatMatrix values;  // N x d_l, row per item
};

/// Per-layer activations plus labels for one dataset split. Invariants are
/// checked on construction and the object is immutable afterwards.
class FeatureSet {
 public:
  FeatureSet(std::vector<LayerData> layers, std::vector<std::uint32_t> labels,
             std::uint32_t n_classes, Split split);

  std::size_t n_items() const noexcept { return labels_.size(); }
  std::uint32_t n_classes() const noexcept { return n_classes_; }
  Split split() const noexcept { return split_; }
  const std::vector<std::uint32_t>& labels() const noexcept { return labels_; }
  const std::vector<LayerData>& layers() const noexcept { return layers_; }

  bool has_layer(std::string_view id) const noexcept;
  std::size_t layer_index(std::string_view id) const;  // throws UnknownLayer
  const LayerData& layer(std::string_view id) const;
  std::vector<std::string> layer_ids() const;

  /// Rows in the given order; indices must be < n_items().
  FeatureSet select_rows(std::span<const std::size_t> rows) const;
  FeatureSet with_split(Split split) const;

  friend bool operator==(const FeatureSet& a, const FeatureSet& b);

 private:
  std::vector<LayerData> layers_;
  std::vector<std::uint32_t> labels_;
  std::uint32_t n_classes_;
  Split split_;
};

// ---- binary containers -------------------------------------------------

inline constexpr std::uint32_t kFormatVersion = 1;

Bytes encode_features(const FloatMatrix& values);
FloatMatrix decode_features(std::span<const std::uint8_t> bytes);

struct LabelFile {
  std::vector<std::uint32_t> labels;
  std::uint32_t n_classes = 0;
};

Bytes encode_labels(std::span<const std::uint32_t> labels, std::uint32_t n_classes);
LabelFile decode_labels(std::span<const std::uint8_t> bytes);

std::uint32_t crc32(std::span<const std::uint8_t> bytes);

Bytes read_file(const std::filesystem::path& path);
/// Writes to a sibling temporary and renames over the target.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text_atomic(const std::filesystem::path& path, std::string_view text);

// ---- manifest ----------------------------------------------------------

struct FileEntry {
  std::string file;
  std::uint32_t crc32 = 0;
};

struct SplitEntry {
  std::size_t n_items = 0;
  FileEntry labels;
  std::map<std::string, FileEntry> features;  // by layer id
};

struct LayerSpec {
  std::string id;
  std::size_t dim = 0;
};

struct Manifest {
  std::string dataset;
  std::uint32_t n_classes = 0;
  std::vector<LayerSpec> layers;  // ordered by depth, index 0 = input
  std::map<std::string, SplitEntry> splits;
  std::optional<std::uint64_t> generator_seed;
  std::map<std::string, std::uint64_t> seeds;
  std::optional<ImageShape> image_shape;
  std::vector<std::string> key_layers;  // cache stores only
  std::size_t skipped_items = 0;        // cache stores only

  std::string to_json_text() const;
  static Manifest from_json_text(std::string_view text);

  void save(const std::filesystem::path& path) const;
  static Manifest load(const std::filesystem::path& path);

  const LayerSpec* find_layer(std::string_view id) const noexcept;
};

inline constexpr std::string_view kManifestFile = "manifest.json";

/// Loads one split described by `manifest` from `dir`, verifying CRC32
/// checksums, header dimensions against the manifest, label range and
/// finiteness.
FeatureSet load_feature_set(const std::filesystem::path& dir, const Manifest& manifest,
                            Split split);

/// Writes `fs` as <split>.<layer>.ftr / <split>.lbl under `dir` and records
/// the files in `manifest` (layers are added if not yet declared).
void save_feature_set(const std::filesystem::path& dir, const FeatureSet& fs,
                      Manifest& manifest);

// ---- subsets and splits ------------------------------------------------

struct SubsetSpec {
  std::optional<double> fraction;           // in [0, 1]
  std::optional<std::size_t> per_class;     // exact count per class
  std::uint64_t seed = 0;
};

/// Row indices (ascending) chosen per class without replacement.
std::vector<std::size_t> subsample_indices(std::span<const std::uint32_t> labels,
                                           std::uint32_t n_classes, const SubsetSpec& spec);

FeatureSet subsample(const FeatureSet& fs, const SubsetSpec& spec);

struct SplitIndices {
  std::vector<std::size_t> first;
  std::vector<std::size_t> second;
};

/// Seeded permutation; the first part receives floor(ratio * N) rows. Each
/// part keeps ascending row order.
SplitIndices split_indices(std::size_t n, double ratio, std::uint64_t seed);

std::pair<FeatureSet, FeatureSet> split_validation(const FeatureSet& fs, double ratio,
                                                   std::uint64_t seed);

}  // namespace keycache
