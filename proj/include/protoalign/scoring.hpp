#pragma once

#include <cstddef>
#include <string>

#include "protoalign/cem.hpp"
#include "protoalign/linalg.hpp"
#include "protoalign/prototypes.hpp"

namespace protoalign {

struct MapNet;

enum class ScoreVariant { s1, s2, s3 };

std::string to_string(ScoreVariant variant);
ScoreVariant parse_score_variant(const std::string& text);

struct ScoringConfig {
  ScoreVariant variant = ScoreVariant::s1;
  double lambda = 0.0;

  /// Throws DataError on negative or non-finite lambda, or when the asset the
  /// variant needs (net for s2, pair for s3) is missing.
  void validate(const MapNet* net, const ProjectionPair* pair) const;
};

/// Norms below this make the cosine 0.
inline constexpr double kCosineNormFloor = 1e-12;

double cosine(const linalg::Vector& a, const linalg::Vector& b);

/// −‖q − v_c‖² per prototype row.
linalg::Vector score_s1(const linalg::Vector& q, const PrototypeSet& protos);

/// −‖q − v_c‖² + λ·cos(query_text, class_text.row(c)). Shared kernel of s2 and
/// s3; λ = 0 returns score_s1 exactly.
linalg::Vector score_with_text(const linalg::Vector& q, const PrototypeSet& protos,
                               const linalg::Vector& query_text,
                               const linalg::Matrix& class_text, double lambda);

/// s2: the textual term compares q with g(n_c). `names` holds one m_t row per
/// prototype; the net is run in eval mode.
linalg::Vector score_s2(const linalg::Vector& q, const PrototypeSet& protos,
                        const linalg::Matrix& names, const MapNet& net, double lambda);

/// s3: the textual term compares q·B with n_c·A.
linalg::Vector score_s3(const linalg::Vector& q, const PrototypeSet& protos,
                        const linalg::Matrix& names, const ProjectionPair& pair,
                        double lambda);

struct SoftmaxResult {
  linalg::Vector probabilities;
  double loss = 0.0;  // −log p_true
};

SoftmaxResult softmax_ce(const linalg::Vector& scores, std::size_t true_index);

/// Index of the maximum score, lowest index on ties.
std::size_t classify(const linalg::Vector& scores);

}  // namespace protoalign
