#pragma once

#include <Eigen/Dense>

namespace protoalign::linalg {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct Svd {
  Matrix U;   // rows x rows
  Vector S;   // min(rows, cols), descending
  Matrix Vt;  // cols x cols
};

struct SymEig {
  Vector values;   // descending
  Matrix vectors;  // columns orthonormal, column i pairs with values[i]
};

inline constexpr double kDefaultEpsRel = 1e-10;

bool all_finite(const Matrix& m);

/// Throws DataError (invalid input) naming `what` if any entry is NaN or infinite.
void require_finite(const Matrix& m, const char* what);

/// Full SVD with U·diag(S)·Vt = M. Sign convention: the largest-magnitude
/// entry of every column of U is non-negative (first such entry on ties) and
/// the matching row of Vt is flipped with it. Columns of V that have no
/// partner column in U follow the same rule on their own entries.
Svd svd(const Matrix& m);

/// Eigendecomposition of a symmetric matrix, eigenvalues descending, with the
/// svd sign convention applied to the eigenvectors.
SymEig sym_eig(const Matrix& m);

/// V·diag(f(λ))·Vᵀ with f(λ) = λ^(-1/2) above eps_rel·λ_max and 0 otherwise.
Matrix inv_sqrt_psd(const Matrix& m, double eps_rel = kDefaultEpsRel);

/// V·diag(g(λ))·Vᵀ with g(λ) = λ^(1/2) above eps_rel·λ_max and 0 otherwise;
/// the Moore-Penrose inverse of inv_sqrt_psd(m, eps_rel).
Matrix sqrt_psd(const Matrix& m, double eps_rel = kDefaultEpsRel);

/// Flips columns of `columns` (and the matching rows of `partner_rows`, if
/// given) so each column's largest-magnitude entry is non-negative.
void apply_sign_convention(Matrix& columns, Matrix* partner_rows = nullptr);

}  // namespace protoalign::linalg
