#include "protoalign/scoring.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "protoalign/errors.hpp"
#include "protoalign/mapnet.hpp"

namespace protoalign {

using linalg::Matrix;
using linalg::Vector;

std::string to_string(ScoreVariant variant) {
  switch (variant) {
    case ScoreVariant::s1: return "s1";
    case ScoreVariant::s2: return "s2";
    case ScoreVariant::s3: return "s3";
  }
  return "?";
}

ScoreVariant parse_score_variant(const std::string& text) {
  if (text == "s1") return ScoreVariant::s1;
  if (text == "s2") return ScoreVariant::s2;
  if (text == "s3") return ScoreVariant::s3;
  throw DataError("unknown score variant \"" + text + "\" (expected s1, s2 or s3)");
}

void ScoringConfig::validate(const MapNet* net, const ProjectionPair* pair) const {
  if (!std::isfinite(lambda) || lambda < 0.0) {
    throw DataError("lambda must be finite and non-negative");
  }
  if (variant == ScoreVariant::s2 && net == nullptr) throw DataError("variant s2 requires a MapNet");
  if (variant == ScoreVariant::s3 && pair == nullptr) {
    throw DataError("variant s3 requires a projection pair");
  }
}

double cosine(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) {
    throw DataError("cosine: dims " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
  }
  const double na = a.norm();
  const double nb = b.norm();
  if (na < kCosineNormFloor || nb < kCosineNormFloor) return 0.0;
  return a.dot(b) / (na * nb);
}

Vector score_s1(const Vector& q, const PrototypeSet& protos) {
  if (q.size() != protos.matrix.cols()) {
    throw DataError("score: query dim " + std::to_string(q.size()) + ", prototype dim " +
                    std::to_string(protos.matrix.cols()));
  }
  return -(protos.matrix.rowwise() - q.transpose()).rowwise().squaredNorm();
}

Vector score_with_text(const Vector& q, const PrototypeSet& protos, const Vector& query_text,
                       const Matrix& class_text, double lambda) {
  Vector scores = score_s1(q, protos);
  if (class_text.rows() != scores.size()) {
    throw DataError("score: " + std::to_string(class_text.rows()) + " text rows for " +
                    std::to_string(scores.size()) + " prototypes");
  }
  if (lambda == 0.0) return scores;
  for (Eigen::Index c = 0; c < scores.size(); ++c) {
    scores[c] += lambda * cosine(query_text, class_text.row(c).transpose());
  }
  return scores;
}

Vector score_s2(const Vector& q, const PrototypeSet& protos, const Matrix& names,
                const MapNet& net, double lambda) {
  if (lambda == 0.0) return score_s1(q, protos);
  return score_with_text(q, protos, q, net.forward_eval(names), lambda);
}

Vector score_s3(const Vector& q, const PrototypeSet& protos, const Matrix& names,
                const ProjectionPair& pair, double lambda) {
  if (lambda == 0.0) return score_s1(q, protos);
  return score_with_text(q, protos, project_visual(pair, q), project_text_rows(pair, names),
                         lambda);
}

SoftmaxResult softmax_ce(const Vector& scores, std::size_t true_index) {
  if (true_index >= static_cast<std::size_t>(scores.size())) {
    throw DataError("softmax_ce: true index " + std::to_string(true_index) + " out of range for " +
                    std::to_string(scores.size()) + " scores");
  }
  if (!scores.allFinite()) throw NumericalError("softmax_ce: non-finite score");

  const auto t = static_cast<Eigen::Index>(true_index);
  const double max = scores.maxCoeff();
  const Vector e = (scores.array() - max).exp();
  SoftmaxResult out{e / e.sum(), 0.0};

  if (scores[t] == max) {
    // −log p_t = log(1 + Σ_{j≠t} exp(s_j − s_t)); log1p keeps tiny losses exact.
    double rest = 0.0;
    for (Eigen::Index j = 0; j < scores.size(); ++j) {
      if (j != t) rest += std::exp(scores[j] - scores[t]);
    }
    out.loss = std::log1p(rest);
  } else {
    out.loss = std::log(e.sum()) + max - scores[t];
  }
  return out;
}

std::size_t classify(const Vector& scores) {
  if (scores.size() == 0) throw DataError("classify: empty score vector");
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best]) best = i;
  }
  return static_cast<std::size_t>(best);
}

}  // namespace protoalign
