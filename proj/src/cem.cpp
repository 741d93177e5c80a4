#include "protoalign/cem.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <limits>

#include "json.hpp"

#include "protoalign/errors.hpp"
#include "protoalign/prototypes.hpp"

namespace protoalign {

namespace {

using linalg::Matrix;
using linalg::Vector;
using json = nlohmann::json;

struct Prepared {
  Matrix X, Y;
  Vector text_mean, visual_mean;
};

Prepared prepare(const Matrix& X0, const Matrix& Y0, bool center) {
  if (X0.rows() != Y0.rows()) {
    throw DataError("alignment: text has " + std::to_string(X0.rows()) + " rows, visual has " +
                    std::to_string(Y0.rows()));
  }
  if (X0.rows() < 2) throw DataError("alignment: need at least 2 paired rows");
  linalg::require_finite(X0, "alignment text matrix");
  linalg::require_finite(Y0, "alignment visual matrix");

  Prepared p{X0, Y0, {}, {}};
  if (center) {
    p.text_mean = X0.colwise().mean().transpose();
    p.visual_mean = Y0.colwise().mean().transpose();
    p.X.rowwise() -= p.text_mean.transpose();
    p.Y.rowwise() -= p.visual_mean.transpose();
  }
  if (p.X.cwiseAbs().maxCoeff() == 0.0) throw NumericalError("alignment: text modality is all zero");
  if (p.Y.cwiseAbs().maxCoeff() == 0.0) throw NumericalError("alignment: visual modality is all zero");
  return p;
}

Matrix gram(const Matrix& X) {
  Matrix G = Matrix::Zero(X.cols(), X.cols());
  G.selfadjointView<Eigen::Lower>().rankUpdate(X.transpose());
  return G.selfadjointView<Eigen::Lower>();
}

// Singular values above this are counted toward the rank of X1ᵀY1.
long numerical_rank(const Vector& s, Eigen::Index rows, Eigen::Index cols) {
  if (s.size() == 0 || s[0] <= 0.0) return 0;
  const double tol =
      static_cast<double>(std::max(rows, cols)) * std::numeric_limits<double>::epsilon() * s[0];
  return static_cast<long>((s.array() > tol).count());
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

Vector to_eigen(const std::vector<double>& v) {
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace

std::string to_string(AlignMethod method) {
  return method == AlignMethod::cca ? "cca" : "cca+d";
}

AlignMethod parse_align_method(const std::string& text) {
  std::string lower = text;
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (lower == "cca") return AlignMethod::cca;
  if (lower == "cca+d") return AlignMethod::cca_dewhiten;
  throw DataError("unknown alignment method \"" + text + "\" (expected cca or cca+d)");
}

void AlignmentConfig::validate(long m_t, long m_v) const {
  if (!(eps_rel > 0.0)) throw DataError("alignment: eps_rel must be positive");
  if (d < 1 || d > std::min(m_t, m_v)) {
    throw DataError("alignment: d=" + std::to_string(d) + " outside [1, " +
                    std::to_string(std::min(m_t, m_v)) + "]");
  }
}

AlignmentSteps alignment_steps(const Matrix& X0, const Matrix& Y0, double eps_rel, bool center) {
  const Prepared p = prepare(X0, Y0, center);
  AlignmentSteps s;
  s.text_mean = p.text_mean;
  s.visual_mean = p.visual_mean;

  const Matrix Gx = gram(p.X);
  const Matrix Gy = gram(p.Y);
  s.A1 = linalg::inv_sqrt_psd(Gx, eps_rel);
  s.B1 = linalg::inv_sqrt_psd(Gy, eps_rel);
  s.A1_inverse = linalg::sqrt_psd(Gx, eps_rel);
  s.B1_inverse = linalg::sqrt_psd(Gy, eps_rel);

  const Matrix cross = (p.X * s.A1).transpose() * (p.Y * s.B1);
  auto dec = linalg::svd(cross);
  s.A2 = std::move(dec.U);
  s.B2 = dec.Vt.transpose();
  s.singular_values = std::move(dec.S);
  s.rank = numerical_rank(s.singular_values, cross.rows(), cross.cols());

  s.A3 = s.A2.transpose() * s.A1_inverse * s.A2;
  s.B3 = s.B2.transpose() * s.B1_inverse * s.B2;
  return s;
}

ProjectionPair fit(const Matrix& X0, const Matrix& Y0, const AlignmentConfig& config) {
  config.validate(static_cast<long>(X0.cols()), static_cast<long>(Y0.cols()));
  const Prepared p = prepare(X0, Y0, config.center);

  const Matrix Gx = gram(p.X);
  const Matrix Gy = gram(p.Y);
  const Matrix A1 = linalg::inv_sqrt_psd(Gx, config.eps_rel);
  const Matrix B1 = linalg::inv_sqrt_psd(Gy, config.eps_rel);

  const Matrix cross = (p.X * A1).transpose() * (p.Y * B1);
  const auto dec = linalg::svd(cross);
  const long rank = numerical_rank(dec.S, cross.rows(), cross.cols());
  if (config.d > rank) throw RankError(config.d, rank);

  const Eigen::Index d = config.d;
  const Matrix A2d = dec.U.leftCols(d);
  const Matrix B2d = dec.Vt.topRows(d).transpose();

  ProjectionPair pair;
  pair.config = config;
  pair.class_count = static_cast<long>(X0.rows());
  pair.correlations = dec.S.head(d);
  pair.text_mean = p.text_mean;
  pair.visual_mean = p.visual_mean;

  if (config.method == AlignMethod::cca) {
    pair.A = A1 * A2d;
    pair.B = B1 * B2d;
  } else {
    // A1·A2·A3·A4 with A3 = A2ᵀ·A1⁺·A2, evaluated right to left so only
    // d-column products are formed.
    const Matrix& A2 = dec.U;
    const Matrix B2 = dec.Vt.transpose();
    const Matrix A1_inverse = linalg::sqrt_psd(Gx, config.eps_rel);
    const Matrix B1_inverse = linalg::sqrt_psd(Gy, config.eps_rel);
    pair.A = A1 * (A2 * (A2.transpose() * (A1_inverse * A2d)));
    pair.B = B1 * (B2 * (B2.transpose() * (B1_inverse * B2d)));
  }
  linalg::require_finite(pair.A, "fitted A");
  linalg::require_finite(pair.B, "fitted B");
  return pair;
}

ProjectionPair fit_on_classes(const EmbeddingTable& text, const VisualFeatureStore& store,
                              std::span<const std::string> classes,
                              const AlignmentConfig& config) {
  const Matrix X0 = text.rows(classes);
  const Matrix Y0 = global_prototypes(store, classes).matrix;
  return fit(X0, Y0, config);
}

Vector project_text(const ProjectionPair& pair, const Vector& n) {
  if (n.size() != pair.A.rows()) {
    throw DataError("project_text: vector has dim " + std::to_string(n.size()) + ", expected " +
                    std::to_string(pair.A.rows()));
  }
  if (pair.config.center) return pair.A.transpose() * (n - pair.text_mean);
  return pair.A.transpose() * n;
}

Vector project_visual(const ProjectionPair& pair, const Vector& v) {
  if (v.size() != pair.B.rows()) {
    throw DataError("project_visual: vector has dim " + std::to_string(v.size()) +
                    ", expected " + std::to_string(pair.B.rows()));
  }
  if (pair.config.center) return pair.B.transpose() * (v - pair.visual_mean);
  return pair.B.transpose() * v;
}

Matrix project_text_rows(const ProjectionPair& pair, const Matrix& rows) {
  Matrix out(rows.rows(), pair.A.cols());
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    out.row(i) = project_text(pair, rows.row(i).transpose()).transpose();
  }
  return out;
}

Matrix project_visual_rows(const ProjectionPair& pair, const Matrix& rows) {
  Matrix out(rows.rows(), pair.B.cols());
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    out.row(i) = project_visual(pair, rows.row(i).transpose()).transpose();
  }
  return out;
}

void save_pair(const ProjectionPair& pair, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_matrix(pair.A, dir / "A.cmm");
  write_matrix(pair.B, dir / "B.cmm");
  json meta = {
      {"method", to_string(pair.config.method)},
      {"d", pair.config.d},
      {"eps_rel", pair.config.eps_rel},
      {"center", pair.config.center},
      {"m_t", pair.m_t()},
      {"m_v", pair.m_v()},
      {"class_count", pair.class_count},
      {"correlations", to_std(pair.correlations)},
  };
  if (pair.config.center) {
    meta["text_mean"] = to_std(pair.text_mean);
    meta["visual_mean"] = to_std(pair.visual_mean);
  }
  write_text(dir / "meta.json", meta.dump(2) + "\n");
}

ProjectionPair load_pair(const std::filesystem::path& dir) {
  const auto meta_path = dir / "meta.json";
  std::ifstream in(meta_path);
  if (!in) throw DataError("cannot open " + meta_path.string());
  json meta;
  try {
    meta = json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError(meta_path.string(), e.byte, "invalid JSON");
  }

  ProjectionPair pair;
  try {
    pair.config.method = parse_align_method(meta.at("method").get<std::string>());
    pair.config.d = meta.at("d").get<long>();
    pair.config.eps_rel = meta.at("eps_rel").get<double>();
    pair.config.center = meta.at("center").get<bool>();
    pair.correlations = to_eigen(meta.at("correlations").get<std::vector<double>>());
    pair.class_count = meta.value("class_count", 0L);
    if (pair.config.center) {
      pair.text_mean = to_eigen(meta.at("text_mean").get<std::vector<double>>());
      pair.visual_mean = to_eigen(meta.at("visual_mean").get<std::vector<double>>());
    }
  } catch (const json::exception& e) {
    throw FormatError(meta_path.string(), 0, std::string("bad meta.json: ") + e.what());
  }

  pair.A = load_matrix(dir / "A.cmm");
  pair.B = load_matrix(dir / "B.cmm");
  const long m_t = meta.at("m_t").get<long>();
  const long m_v = meta.at("m_v").get<long>();
  if (pair.A.rows() != m_t || pair.B.rows() != m_v || pair.A.cols() != pair.config.d ||
      pair.B.cols() != pair.config.d || pair.correlations.size() != pair.config.d ||
      (pair.config.center &&
       (pair.text_mean.size() != m_t || pair.visual_mean.size() != m_v))) {
    throw DataError("projection pair in " + dir.string() + " has inconsistent shapes");
  }
  return pair;
}

}  // namespace protoalign
