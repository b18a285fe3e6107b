#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace gotcha {

/// Row-major float matrix view, one row per gallery record.
struct FeatureMatrix {
  std::span<const float> data;
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::span<const float> row(std::size_t i) const { return data.subspan(i * cols, cols); }
};

/// Non-owning view of one gallery record.
struct RecordRef {
  std::string_view id;
  std::span<const std::int8_t> attributes;
  std::span<const float> features;
};

class GalleryView;

/// Searchable face collection. Attributes are stored as -1/+1 bytes and
/// features as 32-bit floats, both packed row-major.
class Gallery {
 public:
  Gallery() = default;
  Gallery(std::size_t attr_dim, std::size_t feat_dim);

  /// Appends a record after validating dimensions, attribute signs, finiteness
  /// and id uniqueness.
  void add(std::string id, std::span<const std::int8_t> attributes,
           std::span<const float> features);

  std::size_t size() const { return ids_.size(); }
  bool empty() const { return ids_.empty(); }
  std::size_t attr_dim() const { return attr_dim_; }
  std::size_t feat_dim() const { return feat_dim_; }

  std::string_view id(std::size_t i) const { return ids_.at(i); }
  std::span<const std::int8_t> attributes(std::size_t i) const;
  std::span<const float> features(std::size_t i) const;
  RecordRef record(std::size_t i) const { return {id(i), attributes(i), features(i)}; }
  std::optional<std::size_t> find(std::string_view id) const;

  FeatureMatrix feature_matrix() const { return {features_, size(), feat_dim_}; }

  std::size_t split_point() const { return split_point_; }
  void set_split_point(std::size_t split);

  GalleryView view() const;

  /// Scales every feature row to unit L2 norm (zero rows stay zero).
  void normalize_features();

  friend bool operator==(const Gallery& a, const Gallery& b);

 private:
  std::size_t attr_dim_ = 0;
  std::size_t feat_dim_ = 0;
  std::size_t split_point_ = 0;
  std::vector<std::string> ids_;
  std::vector<std::int8_t> attributes_;
  std::vector<float> features_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Contiguous, read-only slice of a gallery. Indices are local to the view.
class GalleryView {
 public:
  GalleryView() = default;
  GalleryView(const Gallery& gallery, std::size_t begin, std::size_t count);

  std::size_t size() const { return count_; }
  bool empty() const { return count_ == 0; }
  std::size_t attr_dim() const { return gallery_->attr_dim(); }
  std::size_t feat_dim() const { return gallery_->feat_dim(); }
  std::size_t offset() const { return begin_; }

  std::string_view id(std::size_t i) const { return gallery_->id(begin_ + i); }
  std::span<const std::int8_t> attributes(std::size_t i) const {
    return gallery_->attributes(begin_ + i);
  }
  std::span<const float> features(std::size_t i) const { return gallery_->features(begin_ + i); }
  RecordRef record(std::size_t i) const { return gallery_->record(begin_ + i); }
  FeatureMatrix feature_matrix() const;
  std::optional<std::size_t> find(std::string_view id) const;

  const Gallery& gallery() const { return *gallery_; }

 private:
  const Gallery* gallery_ = nullptr;
  std::size_t begin_ = 0;
  std::size_t count_ = 0;
};

struct IngestOptions {
  bool normalize = false;
};

/// Reads one JSON object per line: {"id": ..., "attributes": [...], "features": [...]}.
Gallery ingest_jsonl(const std::filesystem::path& path, const IngestOptions& options = {});
void write_jsonl(const Gallery& gallery, const std::filesystem::path& path);

inline constexpr char kPackedMagic[4] = {'G', 'G', 'A', 'L'};
inline constexpr std::uint32_t kPackedVersion = 1;

void save_packed(const Gallery& gallery, const std::filesystem::path& path);
Gallery load_packed(const std::filesystem::path& path);

/// Loads either format, sniffing the packed magic.
Gallery load_gallery(const std::filesystem::path& path);

/// Synthetic stand-in for a face dataset: uniform random attributes and
/// features tanh(M a + noise) with a seed-derived mixing matrix M.
Gallery gen_synthetic(std::size_t n, std::size_t attr_dim, std::size_t feat_dim, double noise,
                      std::uint64_t seed);

/// The mixing matrix gen_synthetic uses for `seed` (feat_dim x attr_dim, row-major).
std::vector<double> synthetic_mixing_matrix(std::size_t attr_dim, std::size_t feat_dim,
                                            std::uint64_t seed);

/// Prefix split: the first floor(fraction * N) records train, the rest test.
std::pair<GalleryView, GalleryView> split(const Gallery& gallery, double train_fraction);

}  // namespace gotcha
