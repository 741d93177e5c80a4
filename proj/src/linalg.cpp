#include "protoalign/linalg.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <cmath>
#include <string>

#include "protoalign/errors.hpp"

namespace protoalign::linalg {

namespace {

void require_nonempty(const Matrix& m, const char* what) {
  if (m.rows() == 0 || m.cols() == 0) {
    throw DataError(std::string(what) + ": empty matrix");
  }
}

void require_square(const Matrix& m, const char* what) {
  if (m.rows() != m.cols()) {
    throw DataError(std::string(what) + ": matrix is " + std::to_string(m.rows()) + "x" +
                    std::to_string(m.cols()) + ", expected square");
  }
}

// Index of the first entry of largest magnitude.
Eigen::Index dominant_index(const Eigen::Ref<const Vector>& v) {
  Eigen::Index best = 0;
  double best_abs = -1.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    const double a = std::abs(v[i]);
    if (a > best_abs) {
      best_abs = a;
      best = i;
    }
  }
  return best;
}

Matrix spectral_function(const SymEig& eig, double eps_rel, double exponent) {
  const double scale = std::max(eig.values[0], 0.0);
  const double floor = eps_rel * scale;
  const Eigen::Index n = eig.values.size();
  if (eig.values[n - 1] < -floor) {
    throw NumericalError("matrix is not positive semi-definite: eigenvalue " +
                         std::to_string(eig.values[n - 1]) + " below -" + std::to_string(floor));
  }
  Vector f(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double lambda = eig.values[i];
    f[i] = lambda > floor ? std::pow(lambda, exponent) : 0.0;
  }
  return eig.vectors * f.asDiagonal() * eig.vectors.transpose();
}

}  // namespace

bool all_finite(const Matrix& m) { return m.allFinite(); }

void require_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) {
    throw DataError(std::string(what) + ": invalid input, non-finite entry");
  }
}

void apply_sign_convention(Matrix& columns, Matrix* partner_rows) {
  for (Eigen::Index j = 0; j < columns.cols(); ++j) {
    const Eigen::Index i = dominant_index(columns.col(j));
    if (columns(i, j) < 0.0) {
      columns.col(j) *= -1.0;
      if (partner_rows != nullptr && j < partner_rows->rows()) {
        partner_rows->row(j) *= -1.0;
      }
    }
  }
}

Svd svd(const Matrix& m) {
  require_nonempty(m, "svd");
  require_finite(m, "svd");

  Eigen::BDCSVD<Matrix> solver(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Svd out{solver.matrixU(), solver.singularValues(), solver.matrixV().transpose()};

  apply_sign_convention(out.U, &out.Vt);
  // Rows of Vt beyond min(rows, cols) have no partner column in U.
  for (Eigen::Index k = out.S.size(); k < out.Vt.rows(); ++k) {
    const Eigen::Index i = dominant_index(out.Vt.row(k).transpose());
    if (out.Vt(k, i) < 0.0) out.Vt.row(k) *= -1.0;
  }
  return out;
}

SymEig sym_eig(const Matrix& m) {
  require_nonempty(m, "sym_eig");
  require_square(m, "sym_eig");
  require_finite(m, "sym_eig");

  const double scale = m.cwiseAbs().maxCoeff();
  const double asym = (m - m.transpose()).cwiseAbs().maxCoeff();
  if (asym > 1e-9 * scale) {
    throw DataError("sym_eig: matrix is not symmetric (max asymmetry " + std::to_string(asym) +
                    ")");
  }

  // Symmetrize so the solver sees exactly symmetric input.
  const Matrix sym = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> solver(sym);
  if (solver.info() != Eigen::Success) {
    throw NumericalError("sym_eig: eigensolver did not converge");
  }

  // Eigen returns ascending order.
  SymEig out{solver.eigenvalues().reverse(), solver.eigenvectors().rowwise().reverse()};
  apply_sign_convention(out.vectors);
  return out;
}

Matrix inv_sqrt_psd(const Matrix& m, double eps_rel) {
  if (!(eps_rel > 0.0)) throw DataError("inv_sqrt_psd: eps_rel must be positive");
  return spectral_function(sym_eig(m), eps_rel, -0.5);
}

Matrix sqrt_psd(const Matrix& m, double eps_rel) {
  if (!(eps_rel > 0.0)) throw DataError("sqrt_psd: eps_rel must be positive");
  return spectral_function(sym_eig(m), eps_rel, 0.5);
}

}  // namespace protoalign::linalg
