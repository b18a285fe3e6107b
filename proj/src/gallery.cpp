#include "gotcha/gallery.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "gotcha/error.hpp"
#include "gotcha/rng.hpp"

namespace gotcha {

namespace {

static_assert(std::endian::native == std::endian::little,
              "packed gallery I/O assumes a little-endian host");

template <typename T>
void write_le(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_le(std::istream& in, const char* what) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T))) {
    throw FormatError(std::string("packed gallery truncated while reading ") + what);
  }
  return value;
}

}  // namespace

Gallery::Gallery(std::size_t attr_dim, std::size_t feat_dim)
    : attr_dim_(attr_dim), feat_dim_(feat_dim) {
  if (attr_dim == 0 || feat_dim == 0) {
    throw ConfigError("gallery dimensions must be positive");
  }
}

void Gallery::add(std::string id, std::span<const std::int8_t> attributes,
                  std::span<const float> features) {
  if (attributes.size() != attr_dim_) {
    throw ShapeError("record '" + id + "' has " + std::to_string(attributes.size()) +
                     " attributes, expected " + std::to_string(attr_dim_));
  }
  if (features.size() != feat_dim_) {
    throw ShapeError("record '" + id + "' has " + std::to_string(features.size()) +
                     " features, expected " + std::to_string(feat_dim_));
  }
  for (auto a : attributes) {
    if (a != 1 && a != -1) throw ShapeError("attributes must be ±1");
  }
  for (auto f : features) {
    if (!std::isfinite(f)) throw NumericError("record '" + id + "' has a non-finite feature");
  }
  if (index_.contains(id)) throw IntegrityError("duplicate id '" + id + "'");

  const bool whole = split_point_ == ids_.size();
  index_.emplace(id, ids_.size());
  ids_.push_back(std::move(id));
  attributes_.insert(attributes_.end(), attributes.begin(), attributes.end());
  features_.insert(features_.end(), features.begin(), features.end());
  if (whole) split_point_ = ids_.size();
}

std::span<const std::int8_t> Gallery::attributes(std::size_t i) const {
  if (i >= size()) throw std::out_of_range("gallery index out of range");
  return std::span(attributes_).subspan(i * attr_dim_, attr_dim_);
}

std::span<const float> Gallery::features(std::size_t i) const {
  if (i >= size()) throw std::out_of_range("gallery index out of range");
  return std::span(features_).subspan(i * feat_dim_, feat_dim_);
}

std::optional<std::size_t> Gallery::find(std::string_view id) const {
  auto it = index_.find(std::string(id));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

void Gallery::set_split_point(std::size_t split) {
  if (split > size()) throw ConfigError("split point beyond gallery size");
  split_point_ = split;
}

GalleryView Gallery::view() const { return GalleryView(*this, 0, size()); }

void Gallery::normalize_features() {
  for (std::size_t i = 0; i < size(); ++i) {
    float* row = features_.data() + i * feat_dim_;
    double sq = 0.0;
    for (std::size_t j = 0; j < feat_dim_; ++j) sq += double(row[j]) * double(row[j]);
    if (sq == 0.0) continue;
    const double inv = 1.0 / std::sqrt(sq);
    for (std::size_t j = 0; j < feat_dim_; ++j) row[j] = static_cast<float>(row[j] * inv);
  }
}

bool operator==(const Gallery& a, const Gallery& b) {
  if (a.attr_dim_ != b.attr_dim_ || a.feat_dim_ != b.feat_dim_) return false;
  if (a.ids_ != b.ids_ || a.attributes_ != b.attributes_) return false;
  // Bitwise comparison so that -0.0f and NaN payloads count.
  return a.features_.size() == b.features_.size() &&
         std::memcmp(a.features_.data(), b.features_.data(),
                     a.features_.size() * sizeof(float)) == 0;
}

GalleryView::GalleryView(const Gallery& gallery, std::size_t begin, std::size_t count)
    : gallery_(&gallery), begin_(begin), count_(count) {
  if (begin + count > gallery.size()) throw std::out_of_range("gallery view out of range");
}

FeatureMatrix GalleryView::feature_matrix() const {
  const FeatureMatrix all = gallery_->feature_matrix();
  return {all.data.subspan(begin_ * all.cols, count_ * all.cols), count_, all.cols};
}

std::optional<std::size_t> GalleryView::find(std::string_view id) const {
  auto i = gallery_->find(id);
  if (!i || *i < begin_ || *i >= begin_ + count_) return std::nullopt;
  return *i - begin_;
}

Gallery ingest_jsonl(const std::filesystem::path& path, const IngestOptions& options) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());

  Gallery gallery;
  bool sized = false;
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::int8_t> attrs;
  std::vector<float> feats;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = "line " + std::to_string(line_no) + ": ";

    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(where + "malformed JSON (" + e.what() + ")");
    }
    if (!rec.is_object() || !rec.contains("id") || !rec["id"].is_string() ||
        !rec.contains("attributes") || !rec["attributes"].is_array() ||
        !rec.contains("features") || !rec["features"].is_array()) {
      throw ParseError(where + "expected fields id (string), attributes and features (arrays)");
    }

    attrs.clear();
    for (const auto& v : rec["attributes"]) {
      if (!v.is_number_integer()) throw ParseError(where + "attributes must be integers");
      const auto a = v.get<long long>();
      if (a != 1 && a != -1) throw ParseError(where + "attributes must be ±1");
      attrs.push_back(static_cast<std::int8_t>(a));
    }
    feats.clear();
    for (const auto& v : rec["features"]) {
      if (!v.is_number()) throw ParseError(where + "features must be numbers");
      feats.push_back(v.get<float>());
    }

    if (!sized) {
      if (attrs.empty() || feats.empty()) throw ParseError(where + "empty attributes or features");
      gallery = Gallery(attrs.size(), feats.size());
      sized = true;
    } else if (attrs.size() != gallery.attr_dim() || feats.size() != gallery.feat_dim()) {
      throw ShapeError(where + "inconsistent dimensions: got A=" + std::to_string(attrs.size()) +
                       " F=" + std::to_string(feats.size()) + ", expected A=" +
                       std::to_string(gallery.attr_dim()) +
                       " F=" + std::to_string(gallery.feat_dim()));
    }

    auto id = rec["id"].get<std::string>();
    if (gallery.find(id)) throw IntegrityError(where + "duplicate id '" + id + "'");
    try {
      gallery.add(std::move(id), attrs, feats);
    } catch (const Error& e) {
      throw ParseError(where + e.what());
    }
  }
  if (options.normalize) gallery.normalize_features();
  return gallery;
}

void write_jsonl(const Gallery& gallery, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  for (std::size_t i = 0; i < gallery.size(); ++i) {
    nlohmann::json rec;
    rec["id"] = gallery.id(i);
    auto& attrs = rec["attributes"] = nlohmann::json::array();
    for (auto a : gallery.attributes(i)) attrs.push_back(int(a));
    auto& feats = rec["features"] = nlohmann::json::array();
    for (auto f : gallery.features(i)) feats.push_back(f);
    out << rec.dump() << '\n';
  }
}

void save_packed(const Gallery& gallery, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out.write(kPackedMagic, 4);
  write_le<std::uint32_t>(out, kPackedVersion);
  write_le<std::uint64_t>(out, gallery.size());
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(gallery.attr_dim()));
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(gallery.feat_dim()));
  std::vector<char> attr_bytes(gallery.attr_dim());
  for (std::size_t i = 0; i < gallery.size(); ++i) {
    const auto id = gallery.id(i);
    write_le<std::uint32_t>(out, static_cast<std::uint32_t>(id.size()));
    out.write(id.data(), static_cast<std::streamsize>(id.size()));
    const auto attrs = gallery.attributes(i);
    for (std::size_t j = 0; j < attrs.size(); ++j) attr_bytes[j] = attrs[j] > 0 ? 0x01 : 0x00;
    out.write(attr_bytes.data(), static_cast<std::streamsize>(attr_bytes.size()));
    const auto feats = gallery.features(i);
    out.write(reinterpret_cast<const char*>(feats.data()),
              static_cast<std::streamsize>(feats.size_bytes()));
  }
  if (!out) throw Error("write failed for " + path.string());
}

Gallery load_packed(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  char magic[4];
  if (!in.read(magic, 4)) throw FormatError("packed gallery truncated while reading magic");
  if (std::memcmp(magic, kPackedMagic, 4) != 0) throw FormatError("bad magic in " + path.string());
  const auto version = read_le<std::uint32_t>(in, "version");
  if (version != kPackedVersion) {
    throw FormatError("unsupported packed gallery version " + std::to_string(version));
  }
  const auto n = read_le<std::uint64_t>(in, "record count");
  const auto attr_dim = read_le<std::uint32_t>(in, "attribute dimension");
  const auto feat_dim = read_le<std::uint32_t>(in, "feature dimension");
  if (attr_dim == 0 || feat_dim == 0) throw FormatError("zero dimension in packed header");

  Gallery gallery(attr_dim, feat_dim);
  std::vector<char> attr_bytes(attr_dim);
  std::vector<std::int8_t> attrs(attr_dim);
  std::vector<float> feats(feat_dim);
  for (std::uint64_t i = 0; i < n; ++i) {
    const auto len = read_le<std::uint32_t>(in, "id length");
    std::string id(len, '\0');
    if (!in.read(id.data(), len)) throw FormatError("packed gallery truncated in record id");
    if (!in.read(attr_bytes.data(), attr_dim)) {
      throw FormatError("packed gallery truncated in attributes");
    }
    for (std::size_t j = 0; j < attr_dim; ++j) {
      if (attr_bytes[j] != 0x00 && attr_bytes[j] != 0x01) {
        throw FormatError("invalid attribute byte in record " + std::to_string(i));
      }
      attrs[j] = attr_bytes[j] ? 1 : -1;
    }
    if (!in.read(reinterpret_cast<char*>(feats.data()),
                 static_cast<std::streamsize>(feat_dim * sizeof(float)))) {
      throw FormatError("packed gallery truncated in features");
    }
    gallery.add(std::move(id), attrs, feats);
  }
  return gallery;
}

Gallery load_gallery(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path.string());
  char magic[4] = {};
  in.read(magic, 4);
  if (in.gcount() == 4 && std::memcmp(magic, kPackedMagic, 4) == 0) return load_packed(path);
  return ingest_jsonl(path);
}

std::vector<double> synthetic_mixing_matrix(std::size_t attr_dim, std::size_t feat_dim,
                                            std::uint64_t seed) {
  Rng rng(derive_seed(seed, "mixing"));
  const double scale = 1.0 / std::sqrt(static_cast<double>(attr_dim));
  std::vector<double> mixing(feat_dim * attr_dim);
  for (auto& m : mixing) m = rng.normal() * scale;
  return mixing;
}

Gallery gen_synthetic(std::size_t n, std::size_t attr_dim, std::size_t feat_dim, double noise,
                      std::uint64_t seed) {
  if (n == 0 || attr_dim == 0 || feat_dim == 0) {
    throw ConfigError("synthetic gallery dimensions must be positive");
  }
  if (!(noise >= 0.0)) throw ConfigError("noise must be non-negative");

  const auto mixing = synthetic_mixing_matrix(attr_dim, feat_dim, seed);
  Rng attr_rng(derive_seed(seed, "attributes"));
  Rng noise_rng(derive_seed(seed, "noise"));

  Gallery gallery(attr_dim, feat_dim);
  std::vector<std::int8_t> attrs(attr_dim);
  std::vector<float> feats(feat_dim);
  char id[32];
  for (std::size_t i = 0; i < n; ++i) {
    for (auto& a : attrs) a = attr_rng.bernoulli(0.5) ? 1 : -1;
    for (std::size_t k = 0; k < feat_dim; ++k) {
      double pre = 0.0;
      for (std::size_t j = 0; j < attr_dim; ++j) pre += mixing[k * attr_dim + j] * attrs[j];
      if (noise > 0.0) pre += noise * noise_rng.normal();
      feats[k] = static_cast<float>(std::tanh(pre));
    }
    std::snprintf(id, sizeof(id), "syn-%06zu", i);
    gallery.add(id, attrs, feats);
  }
  return gallery;
}

std::pair<GalleryView, GalleryView> split(const Gallery& gallery, double train_fraction) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ConfigError("train fraction must lie strictly between 0 and 1");
  }
  const auto n = gallery.size();
  const double total = static_cast<double>(n);
  auto cut = static_cast<std::size_t>(std::floor(train_fraction * total));
  // Snap so that a fraction written as k/N yields exactly k despite rounding.
  while (cut < n && static_cast<double>(cut + 1) / total <= train_fraction) ++cut;
  while (cut > 0 && static_cast<double>(cut) / total > train_fraction) --cut;
  return {GalleryView(gallery, 0, cut), GalleryView(gallery, cut, n - cut)};
}

}  // namespace gotcha
