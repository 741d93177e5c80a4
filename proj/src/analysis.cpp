#include "protoalign/analysis.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>

#include "protoalign/errors.hpp"
#include "protoalign/scoring.hpp"

namespace protoalign {

std::vector<Neighbor> nearest_classes(const EmbeddingTable& table, const std::string& target,
                                      std::size_t k, const ProjectionPair* pair) {
  if (!table.contains(target)) throw DataError("unknown target class \"" + target + "\"");
  if (k >= table.size()) {
    throw DataError("k=" + std::to_string(k) + " must be smaller than the table size " +
                    std::to_string(table.size()));
  }

  const linalg::Matrix space =
      pair != nullptr ? project_text_rows(*pair, table.vectors()) : table.vectors();
  const auto t = static_cast<Eigen::Index>(table.index_of(target));
  const linalg::Vector anchor = space.row(t).transpose();

  std::vector<Neighbor> all;
  all.reserve(table.size() - 1);
  for (Eigen::Index i = 0; i < space.rows(); ++i) {
    if (i == t) continue;
    all.push_back({table.labels()[static_cast<std::size_t>(i)], cosine(anchor, space.row(i).transpose())});
  }
  std::sort(all.begin(), all.end(), [](const Neighbor& a, const Neighbor& b) {
    if (a.cosine != b.cosine) return a.cosine > b.cosine;
    return a.label < b.label;
  });
  all.resize(k);
  return all;
}

std::string format_neighbors(const std::string& target, const std::vector<Neighbor>& neighbors) {
  std::size_t width = 5;
  for (const auto& n : neighbors) width = std::max(width, n.label.size());
  std::string out = "nearest to " + target + "\n";
  char line[64];
  std::snprintf(line, sizeof line, "%4s  ", "rank");
  out += line + std::string("class") + std::string(width - 5, ' ') + "  cosine\n";
  for (std::size_t i = 0; i < neighbors.size(); ++i) {
    std::snprintf(line, sizeof line, "%4zu  ", i + 1);
    out += line + neighbors[i].label + std::string(width - neighbors[i].label.size(), ' ');
    std::snprintf(line, sizeof line, "  %+.6f\n", neighbors[i].cosine);
    out += line;
  }
  return out;
}

std::string neighbors_csv(const std::vector<Neighbor>& neighbors) {
  std::string out = "rank,class,cosine\n";
  for (std::size_t i = 0; i < neighbors.size(); ++i) {
    char buf[64];
    const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, neighbors[i].cosine);
    out += std::to_string(i + 1) + "," + neighbors[i].label + "," + std::string(buf, end) + "\n";
  }
  return out;
}

}  // namespace protoalign
