#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "protoalign/linalg.hpp"

namespace protoalign {

/// Labeled vectors of one modality or variant. Rows of `vectors` follow
/// `labels` order, which is the on-disk record order.
class EmbeddingTable {
public:
  EmbeddingTable() = default;
  EmbeddingTable(std::vector<std::string> labels, linalg::Matrix vectors, std::string variant = {});

  std::size_t size() const { return labels_.size(); }
  Eigen::Index dim() const { return vectors_.cols(); }
  const std::string& variant() const { return variant_; }
  const std::vector<std::string>& labels() const { return labels_; }
  const linalg::Matrix& vectors() const { return vectors_; }

  bool contains(const std::string& label) const { return index_.contains(label); }
  /// Row index of `label`; throws DataError if absent.
  std::size_t index_of(const std::string& label) const;
  linalg::Vector row(const std::string& label) const;

  /// Rows for `labels` stacked in the given order.
  linalg::Matrix rows(std::span<const std::string> labels) const;

private:
  std::vector<std::string> labels_;
  linalg::Matrix vectors_;
  std::string variant_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Frozen per-image features plus the image → class assignment.
class VisualFeatureStore {
public:
  VisualFeatureStore() = default;
  /// `assignment` lists (image id, class) in file order; every image id must be
  /// a label of `features`.
  VisualFeatureStore(EmbeddingTable features,
                     std::vector<std::pair<std::string, std::string>> assignment);

  Eigen::Index dim() const { return features_.dim(); }
  const EmbeddingTable& features() const { return features_; }
  linalg::Vector feature(const std::string& image_id) const { return features_.row(image_id); }
  auto feature_row(std::size_t row) const { return features_.vectors().row(static_cast<Eigen::Index>(row)); }
  std::size_t row_of(const std::string& image_id) const { return features_.index_of(image_id); }

  bool has_class(const std::string& cls) const { return by_class_.contains(cls); }
  /// Image ids of `cls` in assignment-file order; throws DataError if the
  /// class has no images.
  const std::vector<std::string>& images_of(const std::string& cls) const;
  /// Class names in order of first appearance in the assignment file.
  const std::vector<std::string>& classes() const { return class_order_; }
  const std::string& class_of(const std::string& image_id) const;

private:
  EmbeddingTable features_;
  std::unordered_map<std::string, std::string> class_of_;
  std::unordered_map<std::string, std::vector<std::string>> by_class_;
  std::vector<std::string> class_order_;
};

struct ClassSplit {
  std::vector<std::string> base;
  std::vector<std::string> val;
  std::vector<std::string> novel;

  /// Throws DataError on overlap between sections or an empty base/novel list.
  void validate() const;
  /// Throws DataError naming the first split class with no assigned images.
  void validate_against(const VisualFeatureStore& store) const;
  const std::vector<std::string>& section(const std::string& name) const;
};

// CMVEC: "CMV1", u32 n, u32 d, n × [u16 label length, label bytes, d × f32], all LE.
EmbeddingTable load_embeddings(const std::filesystem::path& path, std::string variant = {});
void write_embeddings(const EmbeddingTable& table, const std::filesystem::path& path);

// CMMAT: "CMM1", u32 rows, u32 cols, rows × cols f32 row-major, all LE.
linalg::Matrix load_matrix(const std::filesystem::path& path);
void write_matrix(const linalg::Matrix& m, const std::filesystem::path& path);

/// Header fields of a CMVEC or CMMAT file, read without loading the payload.
struct FileHeader {
  std::string magic;
  std::uint32_t first = 0;   // records (CMVEC) or rows (CMMAT)
  std::uint32_t second = 0;  // dim (CMVEC) or cols (CMMAT)
};
FileHeader read_header(const std::filesystem::path& path);

/// JSON object with "base", "val" and "novel" arrays. Validated on load.
ClassSplit load_split(const std::filesystem::path& path);
void write_split(const ClassSplit& split, const std::filesystem::path& path);

/// CSV with header `image_id,class_name`, joined against `features`.
VisualFeatureStore load_assignments(const std::filesystem::path& path, EmbeddingTable features);
void write_assignments(std::span<const std::pair<std::string, std::string>> rows,
                       const std::filesystem::path& path);

/// JSON object class → array of names.
std::map<std::string, std::vector<std::string>> load_synsets(const std::filesystem::path& path);

/// Per-label concatenation in argument order. All tables must share one label
/// set; row order follows the first table.
EmbeddingTable concat_tables(std::span<const EmbeddingTable> tables);

/// One entry per class, the mean of its names' vectors. Output order follows
/// the map's key order.
EmbeddingTable average_synonyms(const EmbeddingTable& table,
                                const std::map<std::string, std::vector<std::string>>& synsets);

}  // namespace protoalign
