#pragma once

#include <string>
#include <vector>

#include "protoalign/cem.hpp"
#include "protoalign/data.hpp"

namespace protoalign {

struct Neighbor {
  std::string label;
  double cosine = 0.0;
};

/// The k classes most cosine-similar to `target`, excluding the target itself.
/// With a pair, similarities are taken between text projections n·A. Ordered
/// by descending cosine, then label.
std::vector<Neighbor> nearest_classes(const EmbeddingTable& table, const std::string& target,
                                      std::size_t k, const ProjectionPair* pair = nullptr);

/// Aligned plain-text table, one neighbor per line.
std::string format_neighbors(const std::string& target, const std::vector<Neighbor>& neighbors);
/// CSV with header rank,class,cosine.
std::string neighbors_csv(const std::vector<Neighbor>& neighbors);

}  // namespace protoalign
