#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "opd/common.hpp"
#include "opd/io.hpp"

namespace opd {

// ---------------------------------------------------------------------------
// Boxes

struct BoundingBox {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }

  bool is_valid() const {
    return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2) && x1 >= 0 &&
           y1 >= 0 && x1 < x2 && y1 < y2;
  }

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

inline BoundingBox checked_box(double x1, double y1, double x2, double y2) {
  BoundingBox b{x1, y1, x2, y2};
  if (!b.is_valid()) {
    std::ostringstream os;
    os << "invalid box [" << x1 << ", " << y1 << ", " << x2 << ", " << y2 << "]";
    throw FormatError(os.str());
  }
  return b;
}

// ---------------------------------------------------------------------------
// Phrases

// Lowercase, strip punctuation, collapse whitespace.
inline std::vector<std::string> tokenize_phrase(std::string_view text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (char ch : text) {
    auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      if (!cur.empty()) tokens.push_back(std::move(cur)), cur.clear();
    } else if (std::ispunct(c)) {
      continue;
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

inline std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

inline std::string normalize_phrase(std::string_view text) { return join_tokens(tokenize_phrase(text)); }

enum class FrequencyBucket { ZeroShot = 0, FewShot = 1, Common = 2 };

inline constexpr std::int64_t kFewShotMax = 100;

inline FrequencyBucket bucket_of(std::int64_t train_count) {
  if (train_count <= 0) return FrequencyBucket::ZeroShot;
  if (train_count <= kFewShotMax) return FrequencyBucket::FewShot;
  return FrequencyBucket::Common;
}

inline std::string_view bucket_name(FrequencyBucket b) {
  switch (b) {
    case FrequencyBucket::ZeroShot: return "zero_shot";
    case FrequencyBucket::FewShot: return "few_shot";
    case FrequencyBucket::Common: return "common";
  }
  return "?";
}

inline constexpr FrequencyBucket kAllBuckets[] = {FrequencyBucket::ZeroShot, FrequencyBucket::FewShot,
                                                  FrequencyBucket::Common};

struct PhraseRecord {
  std::string text;
  std::string feature_id;
  std::int64_t train_count = 0;
};

// ---------------------------------------------------------------------------
// Feature store

inline constexpr std::string_view kFeatureMagic = "OPDFEATS";
inline constexpr std::uint32_t kFeatureVersion = 1;

// Id-indexed dense float32 vectors. Row order is preserved so that a store
// written back out is byte-identical to the file it was read from.
class FeatureStore {
 public:
  FeatureStore() = default;
  explicit FeatureStore(std::uint32_t dimension) : dimension_(dimension) {
    if (dimension == 0) throw IngestError("feature dimension must be positive");
  }

  std::uint32_t dimension() const { return dimension_; }
  std::size_t size() const { return ids_.size(); }
  const std::vector<std::string>& ids() const { return ids_; }

  bool contains(const std::string& id) const { return index_.count(id) > 0; }

  void add(const std::string& id, std::span<const float> values) {
    if (values.size() != dimension_)
      throw IngestError("row \"" + id + "\": expected " + std::to_string(dimension_) + " values, got " +
                        std::to_string(values.size()));
    for (float v : values)
      if (!std::isfinite(v)) throw IngestError("row \"" + id + "\": non-finite value");
    if (index_.count(id)) throw IngestError("duplicate feature id \"" + id + "\"");
    index_.emplace(id, ids_.size());
    ids_.push_back(id);
    data_.insert(data_.end(), values.begin(), values.end());
  }

  void add(const std::string& id, const Vec& v) {
    std::vector<float> f(v.size());
    for (Eigen::Index i = 0; i < v.size(); ++i) f[i] = static_cast<float>(v[i]);
    add(id, f);
  }

  std::span<const float> row(std::size_t i) const { return {data_.data() + i * dimension_, dimension_}; }

  Vec get(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw IngestError("missing feature id \"" + id + "\"");
    auto r = row(it->second);
    Vec v(dimension_);
    for (std::uint32_t i = 0; i < dimension_; ++i) v[i] = r[i];
    return v;
  }

  // Rows for the given ids stacked as a matrix (one sample per row).
  Mat gather(const std::vector<std::string>& ids) const {
    Mat m(static_cast<Eigen::Index>(ids.size()), dimension_);
    for (std::size_t i = 0; i < ids.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = get(ids[i]).transpose();
    return m;
  }

 private:
  std::uint32_t dimension_ = 0;
  std::vector<std::string> ids_;
  std::vector<float> data_;
  std::unordered_map<std::string, std::size_t> index_;
};

inline FeatureStore read_features(std::istream& in) {
  io::expect_magic(in, kFeatureMagic, "feature store");
  auto version = io::get_le<std::uint32_t>(in, "feature store version");
  if (version != kFeatureVersion) throw IngestError("feature store: unsupported version " + std::to_string(version));
  auto dim = io::get_le<std::uint32_t>(in, "feature store dimension");
  auto count = io::get_le<std::uint64_t>(in, "feature store count");
  if (dim == 0) throw IngestError("feature store: malformed header, dimension 0");
  FeatureStore store(dim);
  std::vector<float> buf(dim);
  for (std::uint64_t r = 0; r < count; ++r) {
    std::string id;
    try {
      id = io::get_short_string(in, "row id");
      for (auto& v : buf) v = io::get_le<float>(in, "row values");
    } catch (const FormatError& e) {
      throw IngestError("feature store: row " + std::to_string(r) + (id.empty() ? "" : " (\"" + id + "\")") +
                        ": " + e.what());
    }
    try {
      store.add(id, buf);
    } catch (const IngestError& e) {
      throw IngestError("feature store: row " + std::to_string(r) + ": " + e.what());
    }
  }
  if (in.peek() != std::char_traits<char>::eof())
    throw IngestError("feature store: trailing bytes after " + std::to_string(count) + " rows (dimension mismatch?)");
  return store;
}

inline FeatureStore read_features(const std::string& path) {
  auto in = io::open_in(path);
  try {
    return read_features(in);
  } catch (const FormatError& e) {
    throw IngestError(path + ": " + e.what());
  }
}

inline void write_features(const FeatureStore& store, std::ostream& out) {
  io::put_bytes(out, kFeatureMagic);
  io::put_le<std::uint32_t>(out, kFeatureVersion);
  io::put_le<std::uint32_t>(out, store.dimension());
  io::put_le<std::uint64_t>(out, store.size());
  for (std::size_t i = 0; i < store.size(); ++i) {
    io::put_short_string(out, store.ids()[i]);
    for (float v : store.row(i)) io::put_le<float>(out, v);
  }
}

inline void write_features(const FeatureStore& store, const std::string& path) {
  auto out = io::open_out(path);
  write_features(store, out);
}

// ---------------------------------------------------------------------------
// Ground truth

enum class Split { Train, Val, Test };
enum class DatasetMode { FlickrLike, ReferItLike, GenomeLike };

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw FormatError("unknown split \"" + std::string(s) + "\"");
}

inline DatasetMode parse_mode(std::string_view s) {
  if (s == "flickr") return DatasetMode::FlickrLike;
  if (s == "referit") return DatasetMode::ReferItLike;
  if (s == "genome") return DatasetMode::GenomeLike;
  throw FormatError("unknown dataset mode \"" + std::string(s) + "\"");
}

struct PhraseLabel {
  std::string text;  // normalized
  bool augmented = false;
};

struct GtRegion {
  BoundingBox box;
  std::vector<PhraseLabel> phrases;
};

struct ImageRecord {
  std::string image_id;
  std::vector<GtRegion> regions;
};

struct RegionRecord {
  std::string image_id;
  std::uint32_t region_index = 0;
  BoundingBox box;
  std::string feature_id;
};

inline std::string region_feature_id(std::string_view image_id, std::size_t region_index) {
  return std::string(image_id) + "#" + std::to_string(region_index);
}

// Candidate (proposal) regions are keyed apart from annotated regions.
inline std::string proposal_feature_id(std::string_view image_id, std::size_t proposal_index) {
  return std::string(image_id) + "#p" + std::to_string(proposal_index);
}

struct GroundTruthDataset {
  Split split = Split::Train;
  DatasetMode mode = DatasetMode::FlickrLike;
  std::vector<ImageRecord> images;

  std::vector<RegionRecord> region_records() const {
    std::vector<RegionRecord> out;
    for (const auto& img : images)
      for (std::size_t r = 0; r < img.regions.size(); ++r)
        out.push_back({img.image_id, static_cast<std::uint32_t>(r), img.regions[r].box,
                       region_feature_id(img.image_id, r)});
    return out;
  }

  // Distinct phrase texts, sorted. Augmented labels only when requested.
  std::vector<std::string> vocabulary(bool include_augmented = false) const {
    std::vector<std::string> v;
    for (const auto& img : images)
      for (const auto& reg : img.regions)
        for (const auto& p : reg.phrases)
          if (include_augmented || !p.augmented) v.push_back(p.text);
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
    return v;
  }
};

inline ImageRecord parse_image_line(const nlohmann::json& j) {
  ImageRecord img;
  img.image_id = j.at("image_id").get<std::string>();
  if (img.image_id.empty()) throw FormatError("empty image_id");
  std::size_t annotations = 0;
  for (const auto& r : j.at("regions")) {
    const auto& b = r.at("box");
    if (!b.is_array() || b.size() != 4) throw FormatError("box must have four coordinates");
    GtRegion reg;
    reg.box = checked_box(b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>());
    if (r.contains("phrases")) {
      for (const auto& p : r.at("phrases")) {
        PhraseLabel label;
        if (p.is_string()) {
          label.text = normalize_phrase(p.get<std::string>());
        } else {
          label.text = normalize_phrase(p.at("text").get<std::string>());
          label.augmented = p.value("aug", false);
        }
        if (label.text.empty()) throw FormatError("phrase is empty after normalization");
        reg.phrases.push_back(std::move(label));
        ++annotations;
      }
    }
    img.regions.push_back(std::move(reg));
  }
  if (annotations == 0) throw FormatError("image \"" + img.image_id + "\" has no annotations");
  return img;
}

inline GroundTruthDataset read_dataset(std::istream& in, Split split, DatasetMode mode) {
  GroundTruthDataset ds{split, mode, {}};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      ds.images.push_back(parse_image_line(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw IngestError("dataset line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return ds;
}

inline GroundTruthDataset read_dataset(const std::string& path, Split split, DatasetMode mode) {
  auto in = io::open_in(path);
  try {
    return read_dataset(in, split, mode);
  } catch (const IngestError& e) {
    throw IngestError(path + ": " + e.what());
  }
}

inline nlohmann::json image_to_json(const ImageRecord& img) {
  nlohmann::json regions = nlohmann::json::array();
  for (const auto& reg : img.regions) {
    nlohmann::json phrases = nlohmann::json::array();
    for (const auto& p : reg.phrases) {
      if (p.augmented)
        phrases.push_back({{"text", p.text}, {"aug", true}});
      else
        phrases.push_back(p.text);
    }
    regions.push_back({{"box", {reg.box.x1, reg.box.y1, reg.box.x2, reg.box.y2}}, {"phrases", phrases}});
  }
  return {{"image_id", img.image_id}, {"regions", regions}};
}

inline void write_dataset(const GroundTruthDataset& ds, std::ostream& out) {
  for (const auto& img : ds.images) out << image_to_json(img).dump() << '\n';
}

inline void write_dataset(const GroundTruthDataset& ds, const std::string& path) {
  auto out = io::open_out(path);
  write_dataset(ds, out);
}

// Number of (image, box) ground-truth annotations per phrase; augmented labels
// never count. Duplicate annotations of one box are kept.
inline std::map<std::string, std::int64_t> count_train_occurrences(const GroundTruthDataset& train) {
  if (train.split != Split::Train) throw Error("count_train_occurrences requires the train split");
  std::map<std::string, std::int64_t> counts;
  for (const auto& img : train.images)
    for (const auto& reg : img.regions)
      for (const auto& p : reg.phrases)
        if (!p.augmented) ++counts[p.text];
  return counts;
}

inline std::int64_t count_of(const std::map<std::string, std::int64_t>& counts, const std::string& phrase) {
  auto it = counts.find(phrase);
  return it == counts.end() ? 0 : it->second;
}

inline std::vector<PhraseRecord> phrase_records(const GroundTruthDataset& ds,
                                                const std::map<std::string, std::int64_t>& train_counts) {
  std::vector<PhraseRecord> out;
  for (const auto& text : ds.vocabulary(true)) out.push_back({text, text, count_of(train_counts, text)});
  return out;
}

// ---------------------------------------------------------------------------
// Candidate regions: {"image_id": str, "boxes": [[x1,y1,x2,y2], ...]}

struct ProposalSet {
  std::map<std::string, std::vector<BoundingBox>> boxes;

  const std::vector<BoundingBox>& of(const std::string& image_id) const {
    static const std::vector<BoundingBox> kEmpty;
    auto it = boxes.find(image_id);
    return it == boxes.end() ? kEmpty : it->second;
  }
};

// A scoreable region: its box and the feature-store id of its features.
struct Candidate {
  BoundingBox box;
  std::string feature_id;
};

inline ProposalSet read_proposals(std::istream& in) {
  ProposalSet ps;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto j = nlohmann::json::parse(line);
      auto& list = ps.boxes[j.at("image_id").get<std::string>()];
      for (const auto& b : j.at("boxes")) {
        if (!b.is_array() || b.size() != 4) throw FormatError("box must have four coordinates");
        list.push_back(checked_box(b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()));
      }
    } catch (const std::exception& e) {
      throw IngestError("proposals line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return ps;
}

inline ProposalSet read_proposals(const std::string& path) {
  auto in = io::open_in(path);
  return read_proposals(in);
}

inline void write_proposals(const ProposalSet& ps, std::ostream& out) {
  for (const auto& [id, list] : ps.boxes) {
    nlohmann::json boxes = nlohmann::json::array();
    for (const auto& b : list) boxes.push_back({b.x1, b.y1, b.x2, b.y2});
    out << nlohmann::json{{"image_id", id}, {"boxes", boxes}}.dump() << '\n';
  }
}

}  // namespace opd
