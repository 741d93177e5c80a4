#include "doctest.h"

#include "protoalign/analysis.hpp"
#include "protoalign/cem.hpp"
#include "protoalign/errors.hpp"
#include "test_util.hpp"

using namespace protoalign;
using linalg::Matrix;

TEST_CASE("a duplicate embedding is the nearest neighbor") {
  Matrix m = testing::random_matrix(6, 4, 1);
  m.row(4) = m.row(1);
  const EmbeddingTable t({"a", "b", "c", "d", "e", "f"}, m);
  const auto nn = nearest_classes(t, "b", 3);
  REQUIRE(nn.size() == 3);
  CHECK(nn[0].label == "e");
  CHECK(nn[0].cosine == doctest::Approx(1.0).epsilon(1e-12));
  for (const auto& n : nn) CHECK(n.label != "b");
  CHECK(nn[0].cosine >= nn[1].cosine);
  CHECK(nn[1].cosine >= nn[2].cosine);
}

TEST_CASE("ties are ordered by label") {
  Matrix m = Matrix::Identity(4, 4);
  const EmbeddingTable t({"target", "zeta", "alpha", "mid"}, m);
  const auto nn = nearest_classes(t, "target", 3);
  REQUIRE(nn.size() == 3);
  CHECK(nn[0].label == "alpha");
  CHECK(nn[1].label == "mid");
  CHECK(nn[2].label == "zeta");
  for (const auto& n : nn) CHECK(n.cosine == 0.0);
}

TEST_CASE("neighbors are invariant to scaling the table") {
  const Matrix m = testing::random_matrix(8, 5, 3);
  std::vector<std::string> labels;
  for (int i = 0; i < 8; ++i) labels.push_back("n" + std::to_string(i));
  const auto a = nearest_classes(EmbeddingTable(labels, m), "n2", 5);
  const auto b = nearest_classes(EmbeddingTable(labels, 3.0 * m), "n2", 5);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].label == b[i].label);
    CHECK(a[i].cosine == doctest::Approx(b[i].cosine).epsilon(1e-12));
  }
}

TEST_CASE("neighbors in the projected space") {
  const Matrix X = testing::random_matrix(20, 5, 4);
  const Matrix Y = X * testing::random_matrix(5, 4, 5) + testing::random_matrix(20, 4, 6);
  const auto pair = fit(X, Y, {AlignMethod::cca_dewhiten, 2, 1e-10, false});
  std::vector<std::string> labels;
  for (int i = 0; i < 20; ++i) labels.push_back("c" + std::to_string(i));
  const EmbeddingTable t(labels, X);
  const auto nn = nearest_classes(t, "c0", 4, &pair);
  const Eigen::VectorXd target = project_text(pair, X.row(0).transpose());
  for (const auto& n : nn) {
    const Eigen::VectorXd other = project_text(pair, t.row(n.label));
    CHECK(n.cosine == doctest::Approx(target.dot(other) / (target.norm() * other.norm())));
  }
}

TEST_CASE("errors and formatting") {
  const EmbeddingTable t({"a", "b", "c"}, testing::random_matrix(3, 2, 7));
  CHECK_THROWS_AS(nearest_classes(t, "zzz", 1), DataError);
  CHECK_THROWS_AS(nearest_classes(t, "a", 3), DataError);
  const auto nn = nearest_classes(t, "a", 2);
  const std::string csv = neighbors_csv(nn);
  CHECK(csv.rfind("rank,class,cosine\n1,", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
  CHECK(format_neighbors("a", nn).find(nn[0].label) != std::string::npos);
}
