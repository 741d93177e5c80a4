#include "protoalign/data.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include "json.hpp"

#include "protoalign/errors.hpp"

namespace protoalign {

namespace {

using json = nlohmann::json;

std::vector<char> read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_all(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed: " + path.string());
}

// Little-endian cursor over a byte buffer that reports offsets on failure.
class Reader {
public:
  Reader(const std::vector<char>& bytes, const std::filesystem::path& path)
      : bytes_(bytes), path_(path.string()) {}

  std::size_t offset() const { return pos_; }
  bool at_end() const { return pos_ == bytes_.size(); }

  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(path_, pos_, std::string("truncated file while reading ") + what);
    }
  }

  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }

  std::uint64_t uint(std::size_t width, const char* what) {
    need(width, what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < width; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += width;
    return v;
  }

  float f32(const char* what) {
    return std::bit_cast<float>(static_cast<std::uint32_t>(uint(4, what)));
  }

  [[noreturn]] void fail(std::size_t at, const std::string& what) const {
    throw FormatError(path_, at, what);
  }

private:
  const std::vector<char>& bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

void put_uint(std::string& out, std::uint64_t v, std::size_t width) {
  for (std::size_t i = 0; i < width; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, double v) {
  put_uint(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)), 4);
}

std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > 0xffffffffULL) throw DataError(std::string(what) + " exceeds 32-bit range");
  return static_cast<std::uint32_t>(v);
}

json load_json(const std::filesystem::path& path) {
  const auto bytes = read_all(path);
  try {
    return json::parse(bytes.begin(), bytes.end());
  } catch (const json::parse_error& e) {
    throw FormatError(path.string(), e.byte, "invalid JSON");
  }
}

std::vector<std::string> string_array(const json& j, const std::string& key,
                                      const std::filesystem::path& path) {
  if (!j.contains(key) || !j.at(key).is_array()) {
    throw FormatError(path.string(), 0, "missing array \"" + key + "\"");
  }
  std::vector<std::string> out;
  for (const auto& item : j.at(key)) {
    if (!item.is_string()) throw FormatError(path.string(), 0, "non-string entry in \"" + key + "\"");
    out.push_back(item.get<std::string>());
  }
  return out;
}

std::string join(const std::set<std::string>& items) {
  std::string out;
  for (const auto& s : items) {
    if (!out.empty()) out += ", ";
    out += s;
  }
  return out;
}

}  // namespace

// ---- EmbeddingTable ---------------------------------------------------------

EmbeddingTable::EmbeddingTable(std::vector<std::string> labels, linalg::Matrix vectors,
                               std::string variant)
    : labels_(std::move(labels)), vectors_(std::move(vectors)), variant_(std::move(variant)) {
  if (static_cast<Eigen::Index>(labels_.size()) != vectors_.rows()) {
    throw DataError("embedding table: " + std::to_string(labels_.size()) + " labels for " +
                    std::to_string(vectors_.rows()) + " vectors");
  }
  linalg::require_finite(vectors_, "embedding table");
  index_.reserve(labels_.size());
  for (std::size_t i = 0; i < labels_.size(); ++i) {
    if (!index_.emplace(labels_[i], i).second) {
      throw DataError("embedding table: duplicate label \"" + labels_[i] + "\"");
    }
  }
}

std::size_t EmbeddingTable::index_of(const std::string& label) const {
  const auto it = index_.find(label);
  if (it == index_.end()) throw DataError("unknown label \"" + label + "\"");
  return it->second;
}

linalg::Vector EmbeddingTable::row(const std::string& label) const {
  return vectors_.row(static_cast<Eigen::Index>(index_of(label))).transpose();
}

linalg::Matrix EmbeddingTable::rows(std::span<const std::string> labels) const {
  linalg::Matrix out(static_cast<Eigen::Index>(labels.size()), dim());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = vectors_.row(static_cast<Eigen::Index>(index_of(labels[i])));
  }
  return out;
}

// ---- VisualFeatureStore -----------------------------------------------------

VisualFeatureStore::VisualFeatureStore(EmbeddingTable features,
                                       std::vector<std::pair<std::string, std::string>> assignment)
    : features_(std::move(features)) {
  for (auto& [image, cls] : assignment) {
    if (!features_.contains(image)) {
      throw DataError("image \"" + image + "\" is assigned to \"" + cls + "\" but has no feature");
    }
    if (!class_of_.emplace(image, cls).second) {
      throw DataError("image \"" + image + "\" is assigned twice");
    }
    auto [it, inserted] = by_class_.try_emplace(cls);
    if (inserted) class_order_.push_back(cls);
    it->second.push_back(image);
  }
}

const std::vector<std::string>& VisualFeatureStore::images_of(const std::string& cls) const {
  const auto it = by_class_.find(cls);
  if (it == by_class_.end()) throw DataError("class \"" + cls + "\" has no assigned images");
  return it->second;
}

const std::string& VisualFeatureStore::class_of(const std::string& image_id) const {
  const auto it = class_of_.find(image_id);
  if (it == class_of_.end()) throw DataError("image \"" + image_id + "\" has no class assignment");
  return it->second;
}

// ---- ClassSplit -------------------------------------------------------------

void ClassSplit::validate() const {
  if (base.empty()) throw DataError("split: base list is empty");
  if (novel.empty()) throw DataError("split: novel list is empty");
  std::map<std::string, std::string> seen;
  const std::pair<const char*, const std::vector<std::string>*> sections[] = {
      {"base", &base}, {"val", &val}, {"novel", &novel}};
  for (const auto& [name, list] : sections) {
    for (const auto& cls : *list) {
      const auto [it, inserted] = seen.emplace(cls, name);
      if (!inserted) {
        throw DataError("split: class \"" + cls + "\" appears in both " + it->second + " and " +
                        name);
      }
    }
  }
}

void ClassSplit::validate_against(const VisualFeatureStore& store) const {
  for (const auto* list : {&base, &val, &novel}) {
    for (const auto& cls : *list) {
      if (!store.has_class(cls)) throw DataError("split class \"" + cls + "\" has no assigned images");
    }
  }
}

const std::vector<std::string>& ClassSplit::section(const std::string& name) const {
  if (name == "base") return base;
  if (name == "val") return val;
  if (name == "novel") return novel;
  throw DataError("unknown split section \"" + name + "\"");
}

// ---- CMVEC ------------------------------------------------------------------

EmbeddingTable load_embeddings(const std::filesystem::path& path, std::string variant) {
  const auto buffer = read_all(path);
  Reader in(buffer, path);
  if (in.bytes(4, "magic") != "CMV1") in.fail(0, "bad magic, expected CMV1");
  const auto n = in.uint(4, "record count");
  const auto d = in.uint(4, "dimension");

  std::vector<std::string> labels;
  labels.reserve(n);
  linalg::Matrix vectors(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  std::unordered_map<std::string, std::size_t> seen;
  for (std::uint64_t r = 0; r < n; ++r) {
    const std::size_t record_start = in.offset();
    const auto len = in.uint(2, "label length");
    auto label = in.bytes(len, "label");
    if (!seen.emplace(label, r).second) in.fail(record_start, "duplicate label \"" + label + "\"");
    for (std::uint64_t c = 0; c < d; ++c) {
      const std::size_t at = in.offset();
      const float v = in.f32("vector");
      if (!std::isfinite(v)) in.fail(at, "non-finite value for \"" + label + "\"");
      vectors(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = v;
    }
    labels.push_back(std::move(label));
  }
  if (!in.at_end()) in.fail(in.offset(), "trailing bytes after last record (dimension mismatch?)");

  if (variant.empty()) variant = path.stem().string();
  return EmbeddingTable(std::move(labels), std::move(vectors), std::move(variant));
}

void write_embeddings(const EmbeddingTable& table, const std::filesystem::path& path) {
  std::string out = "CMV1";
  put_uint(out, checked_u32(table.size(), "record count"), 4);
  put_uint(out, checked_u32(static_cast<std::size_t>(table.dim()), "dimension"), 4);
  for (std::size_t r = 0; r < table.size(); ++r) {
    const auto& label = table.labels()[r];
    if (label.size() > 0xffff) throw DataError("label longer than 65535 bytes: " + label.substr(0, 32));
    put_uint(out, label.size(), 2);
    out += label;
    for (Eigen::Index c = 0; c < table.dim(); ++c) put_f32(out, table.vectors()(static_cast<Eigen::Index>(r), c));
  }
  write_all(path, out);
}

// ---- CMMAT ------------------------------------------------------------------

linalg::Matrix load_matrix(const std::filesystem::path& path) {
  const auto buffer = read_all(path);
  Reader in(buffer, path);
  if (in.bytes(4, "magic") != "CMM1") in.fail(0, "bad magic, expected CMM1");
  const auto rows = static_cast<Eigen::Index>(in.uint(4, "rows"));
  const auto cols = static_cast<Eigen::Index>(in.uint(4, "cols"));
  in.need(static_cast<std::size_t>(rows * cols) * 4, "matrix payload");
  linalg::Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) {
      const std::size_t at = in.offset();
      const float v = in.f32("matrix payload");
      if (!std::isfinite(v)) in.fail(at, "non-finite matrix entry");
      m(r, c) = v;
    }
  }
  if (!in.at_end()) in.fail(in.offset(), "trailing bytes after matrix payload");
  return m;
}

void write_matrix(const linalg::Matrix& m, const std::filesystem::path& path) {
  linalg::require_finite(m, "write_matrix");
  std::string out = "CMM1";
  put_uint(out, checked_u32(static_cast<std::size_t>(m.rows()), "rows"), 4);
  put_uint(out, checked_u32(static_cast<std::size_t>(m.cols()), "cols"), 4);
  out.reserve(out.size() + static_cast<std::size_t>(m.size()) * 4);
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) put_f32(out, m(r, c));
  }
  write_all(path, out);
}

FileHeader read_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<char> head(12);
  in.read(head.data(), 12);
  head.resize(static_cast<std::size_t>(in.gcount()));
  Reader r(head, path);
  FileHeader h;
  h.magic = r.bytes(4, "magic");
  if (h.magic != "CMV1" && h.magic != "CMM1") r.fail(0, "bad magic, expected CMV1 or CMM1");
  h.first = static_cast<std::uint32_t>(r.uint(4, "header"));
  h.second = static_cast<std::uint32_t>(r.uint(4, "header"));
  return h;
}

// ---- JSON / CSV -------------------------------------------------------------

ClassSplit load_split(const std::filesystem::path& path) {
  const json j = load_json(path);
  if (!j.is_object()) throw FormatError(path.string(), 0, "splits file must be a JSON object");
  ClassSplit split{string_array(j, "base", path), string_array(j, "val", path),
                   string_array(j, "novel", path)};
  split.validate();
  return split;
}

void write_split(const ClassSplit& split, const std::filesystem::path& path) {
  const json j = {{"base", split.base}, {"val", split.val}, {"novel", split.novel}};
  write_all(path, j.dump(2) + "\n");
}

VisualFeatureStore load_assignments(const std::filesystem::path& path, EmbeddingTable features) {
  const auto buffer = read_all(path);
  const std::string text(buffer.begin(), buffer.end());
  std::vector<std::pair<std::string, std::string>> rows;

  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    ++line_no;
    const std::size_t eol = text.find('\n', pos);
    const std::string line = text.substr(pos, eol == std::string::npos ? std::string::npos : eol - pos);
    pos = eol == std::string::npos ? text.size() : eol + 1;

    if (!line.empty() && line.back() == '\r') {
      throw FormatError(path.string(), line_no, "CR line ending; assignments must use LF");
    }
    if (line_no == 1) {
      if (line != "image_id,class_name") {
        throw FormatError(path.string(), 1, "expected header image_id,class_name");
      }
      continue;
    }
    if (line.empty()) {
      if (pos < text.size()) throw FormatError(path.string(), line_no, "empty line");
      continue;
    }
    const std::size_t comma = line.find(',');
    if (comma == std::string::npos || line.find(',', comma + 1) != std::string::npos ||
        comma == 0 || comma + 1 == line.size()) {
      throw FormatError(path.string(), line_no, "expected two non-empty fields");
    }
    rows.emplace_back(line.substr(0, comma), line.substr(comma + 1));
  }
  if (line_no == 0) throw FormatError(path.string(), 1, "empty file, missing header");
  return VisualFeatureStore(std::move(features), std::move(rows));
}

void write_assignments(std::span<const std::pair<std::string, std::string>> rows,
                       const std::filesystem::path& path) {
  std::string out = "image_id,class_name\n";
  for (const auto& [image, cls] : rows) out += image + "," + cls + "\n";
  write_all(path, out);
}

std::map<std::string, std::vector<std::string>> load_synsets(const std::filesystem::path& path) {
  const json j = load_json(path);
  if (!j.is_object()) throw FormatError(path.string(), 0, "synsets file must be a JSON object");
  std::map<std::string, std::vector<std::string>> out;
  for (const auto& [cls, names] : j.items()) out.emplace(cls, string_array(j, cls, path));
  return out;
}

// ---- table operations -------------------------------------------------------

EmbeddingTable concat_tables(std::span<const EmbeddingTable> tables) {
  if (tables.empty()) throw DataError("concat_tables: no input tables");
  const auto& first = tables.front();
  const std::set<std::string> reference(first.labels().begin(), first.labels().end());

  Eigen::Index total = 0;
  std::string variant;
  for (const auto& t : tables) {
    const std::set<std::string> labels(t.labels().begin(), t.labels().end());
    if (labels != reference) {
      std::set<std::string> diff;
      std::set_symmetric_difference(reference.begin(), reference.end(), labels.begin(),
                                    labels.end(), std::inserter(diff, diff.end()));
      throw DataError("concat_tables: label sets differ: {" + join(diff) + "}");
    }
    total += t.dim();
    if (!variant.empty()) variant += "+";
    variant += t.variant();
  }

  linalg::Matrix out(static_cast<Eigen::Index>(first.size()), total);
  Eigen::Index col = 0;
  for (const auto& t : tables) {
    out.middleCols(col, t.dim()) = t.rows(first.labels());
    col += t.dim();
  }
  return EmbeddingTable(first.labels(), std::move(out), std::move(variant));
}

EmbeddingTable average_synonyms(const EmbeddingTable& table,
                                const std::map<std::string, std::vector<std::string>>& synsets) {
  std::vector<std::string> labels;
  linalg::Matrix out(static_cast<Eigen::Index>(synsets.size()), table.dim());
  Eigen::Index r = 0;
  for (const auto& [cls, names] : synsets) {
    if (names.empty()) throw DataError("average_synonyms: class \"" + cls + "\" has no names");
    // Summing in sorted order makes the mean independent of list order.
    std::vector<std::string> sorted = names;
    std::sort(sorted.begin(), sorted.end());
    linalg::Vector sum = linalg::Vector::Zero(table.dim());
    for (const auto& name : sorted) {
      if (!table.contains(name)) {
        throw DataError("average_synonyms: name \"" + name + "\" of class \"" + cls +
                        "\" not in table");
      }
      sum += table.row(name);
    }
    out.row(r++) = (sum / static_cast<double>(names.size())).transpose();
    labels.push_back(cls);
  }
  return EmbeddingTable(std::move(labels), std::move(out), table.variant());
}

}  // namespace protoalign
