#pragma once

#include <filesystem>
#include <span>
#include <string>

#include "protoalign/data.hpp"
#include "protoalign/linalg.hpp"

namespace protoalign {

/// Plain CCA, or CCA followed by de-whitening (CCA+D).
enum class AlignMethod { cca, cca_dewhiten };

std::string to_string(AlignMethod method);
/// Accepts "cca" and "cca+d" (case-insensitive).
AlignMethod parse_align_method(const std::string& text);

struct AlignmentConfig {
  AlignMethod method = AlignMethod::cca_dewhiten;
  long d = 1;
  double eps_rel = linalg::kDefaultEpsRel;
  bool center = false;

  /// Throws DataError unless 1 <= d <= min(m_t, m_v) and eps_rel > 0.
  void validate(long m_t, long m_v) const;
};

/// Fitted linear maps from the text space (A, m_t x d) and the visual space
/// (B, m_v x d) into a shared d-dimensional space.
struct ProjectionPair {
  linalg::Matrix A;
  linalg::Matrix B;
  AlignmentConfig config;
  linalg::Vector correlations;  // first d canonical correlations, non-increasing
  long class_count = 0;
  linalg::Vector text_mean;    // empty unless config.center
  linalg::Vector visual_mean;  // empty unless config.center

  long m_t() const { return static_cast<long>(A.rows()); }
  long m_v() const { return static_cast<long>(B.rows()); }
  long d() const { return static_cast<long>(A.cols()); }
};

/// Every intermediate of the alignment, for inspection and testing.
///   X1 = X0·A1 and Y1 = Y0·B1 are the whitened inputs,
///   A2·S·B2ᵀ is the full SVD of X1ᵀY1,
///   A3 = A2ᵀ·A1⁺·A2 and B3 = B2ᵀ·B1⁺·B2 are the de-whitening maps, where
///   A1⁺ is the pseudo square root of X0ᵀX0 (the inverse of the whitening).
struct AlignmentSteps {
  linalg::Vector text_mean;
  linalg::Vector visual_mean;
  linalg::Matrix A1, A1_inverse, A2, A3;
  linalg::Matrix B1, B1_inverse, B2, B3;
  linalg::Vector singular_values;
  long rank = 0;
};

/// Computes all steps with full m_t x m_t and m_v x m_v matrices. `fit` avoids
/// forming A3/B3 explicitly; use this only where the intermediates are needed.
AlignmentSteps alignment_steps(const linalg::Matrix& X0, const linalg::Matrix& Y0,
                               double eps_rel, bool center);

/// Fits the pair from paired rows: X0 (C x m_t class-name embeddings) and
/// Y0 (C x m_v visual prototypes). Throws RankError if config.d exceeds the
/// numerical rank of X1ᵀY1.
ProjectionPair fit(const linalg::Matrix& X0, const linalg::Matrix& Y0,
                   const AlignmentConfig& config);

/// Fits on `classes`, pairing each class's text vector with its global
/// visual prototype.
ProjectionPair fit_on_classes(const EmbeddingTable& text, const VisualFeatureStore& store,
                              std::span<const std::string> classes,
                              const AlignmentConfig& config);

linalg::Vector project_text(const ProjectionPair& pair, const linalg::Vector& n);
linalg::Vector project_visual(const ProjectionPair& pair, const linalg::Vector& v);
/// Row-wise projections of a stack of vectors.
linalg::Matrix project_text_rows(const ProjectionPair& pair, const linalg::Matrix& rows);
linalg::Matrix project_visual_rows(const ProjectionPair& pair, const linalg::Matrix& rows);

/// Writes A.cmm, B.cmm and meta.json into `dir` (created if missing).
void save_pair(const ProjectionPair& pair, const std::filesystem::path& dir);
ProjectionPair load_pair(const std::filesystem::path& dir);

}  // namespace protoalign
