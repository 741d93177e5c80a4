#include "doctest.h"

#include <set>

#include "json.hpp"

#include "oracles.hpp"
#include "protoalign/episodes.hpp"
#include "protoalign/errors.hpp"
#include "test_util.hpp"

using namespace protoalign;
using linalg::Matrix;
using testing::random_matrix;

namespace {

// `classes` classes of `images` images each; class c sits at spread·e_c plus
// small noise, text vectors are random.
DataBundle separable(long classes, long images, double spread, std::uint64_t seed) {
  const long m_v = classes;
  const Matrix noise = random_matrix(classes * images, m_v, seed);
  std::vector<std::string> labels, ids;
  std::vector<std::pair<std::string, std::string>> assignment;
  Matrix features(classes * images, m_v);
  ClassSplit split;
  for (long c = 0; c < classes; ++c) {
    labels.push_back("c" + std::to_string(c));
    (c < classes / 2 ? split.base : split.novel).push_back(labels.back());
    for (long i = 0; i < images; ++i) {
      const long r = c * images + i;
      ids.push_back("i" + std::to_string(r));
      assignment.emplace_back(ids.back(), labels.back());
      features.row(r) = 0.1 * noise.row(r);
      features(r, c) += spread;
    }
  }
  return {EmbeddingTable(labels, random_matrix(classes, 6, seed + 1)),
          VisualFeatureStore(EmbeddingTable(ids, features), assignment), split};
}

}  // namespace

TEST_CASE("sample_episode shapes and validity") {
  const DataBundle data = separable(20, 25, 1.0, 1);
  Rng rng(5);
  const Episode e = sample_episode(data.split.novel, data.store, 5, 1, 15, rng);
  CHECK(e.support.size() == 5);
  CHECK(e.query.size() == 75);
  CHECK(e.classes.size() == 5);

  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng r(seed);
    const Episode ep = sample_episode(data.split.novel, data.store, 4, 2, 3, r);
    const std::set<std::string> section(data.split.novel.begin(), data.split.novel.end());
    const std::set<std::string> classes(ep.classes.begin(), ep.classes.end());
    CHECK(classes.size() == 4);
    std::set<std::string> images;
    for (std::size_t i = 0; i < ep.support.size(); ++i) {
      const auto& [image, cls] = ep.support[i];
      CHECK(cls == ep.classes[i / 2]);
      CHECK(data.store.class_of(image) == cls);
      images.insert(image);
    }
    for (std::size_t i = 0; i < ep.query.size(); ++i) {
      const auto& [image, cls] = ep.query[i];
      CHECK(cls == ep.classes[i / 3]);
      CHECK(data.store.class_of(image) == cls);
      images.insert(image);
    }
    CHECK(images.size() == 4 * 5);  // support and query are disjoint
    for (const auto& c : ep.classes) CHECK(section.count(c) == 1);
  }
}

TEST_CASE("sample_episode is determined by the seed") {
  const DataBundle data = separable(20, 25, 1.0, 1);
  Rng a(9), b(9), c(10);
  const Episode x = sample_episode(data.split.novel, data.store, 5, 1, 15, a);
  const Episode y = sample_episode(data.split.novel, data.store, 5, 1, 15, b);
  const Episode z = sample_episode(data.split.novel, data.store, 5, 1, 15, c);
  CHECK(x.support == y.support);
  CHECK(x.query == y.query);
  CHECK((x.support != z.support || x.query != z.query));
}

TEST_CASE("sample_episode capacity errors") {
  const DataBundle data = separable(8, 5, 1.0, 1);
  Rng rng(1);
  CHECK_THROWS_AS(sample_episode(data.split.novel, data.store, 5, 1, 1, rng), DataError);
  CHECK_THROWS_AS(sample_episode(data.split.novel, data.store, 2, 3, 3, rng), DataError);
  CHECK_THROWS_AS(sample_episode(data.split.novel, data.store, 2, 0, 3, rng), DataError);
  CHECK_NOTHROW(sample_episode(data.split.novel, data.store, 4, 2, 3, rng));
}

TEST_CASE("evaluation on separable data is perfect and independent of threads") {
  const DataBundle data = separable(20, 25, 10.0, 3);
  EvalConfig config;
  config.episodes = 100;
  config.seed = 3;
  const EvalReport one = evaluate(config, data);
  CHECK(one.mean_accuracy == 1.0);
  CHECK(one.ci95_half_width == 0.0);
  CHECK(one.accuracies.size() == 100);

  config.threads = 8;
  CHECK(evaluate(config, data).to_json() == one.to_json());

  config.episodes = 1;
  CHECK_THROWS_AS(evaluate(config, data), DataError);
  config.episodes = 10;
  config.scoring = {ScoreVariant::s3, 1.0};
  CHECK_THROWS_AS(evaluate(config, data), DataError);
}

TEST_CASE("report JSON") {
  const DataBundle data = separable(20, 25, 1.0, 4);
  EvalConfig config;
  config.episodes = 20;
  config.seed = 12;
  const auto j = nlohmann::json::parse(evaluate(config, data).to_json());
  for (const char* key : {"mean_accuracy", "ci95_half_width", "episodes", "seed", "config", "per_episode"}) {
    CHECK(j.contains(key));
  }
  CHECK(j.at("per_episode").size() == 20);
  CHECK(j.at("config").at("variant") == "s1");
  CHECK(j.at("config").at("split") == "novel");
  CHECK_FALSE(j.at("config").contains("threads"));
}

TEST_CASE("confidence_interval") {
  SUBCASE("constant accuracies") {
    const std::vector<double> v(10, 0.6);
    const auto [mean, half] = confidence_interval(v);
    CHECK(mean == doctest::Approx(0.6));
    CHECK(half == doctest::Approx(0.0).epsilon(1e-15));
  }
  SUBCASE("half zeros, half ones") {
    std::vector<double> v(600, 0.0);
    std::fill(v.begin() + 300, v.end(), 1.0);
    const auto [mean, half] = confidence_interval(v);
    CHECK(mean == 0.5);
    CHECK(std::abs(half - oracle::ci_half_width(v)) < 1e-12);
  }
  SUBCASE("random values against the oracle") {
    const Matrix r = random_matrix(257, 1, 8);
    const std::vector<double> v(r.data(), r.data() + r.size());
    CHECK(std::abs(confidence_interval(v).second - oracle::ci_half_width(v)) < 1e-12);
  }
  SUBCASE("too few values") {
    const std::vector<double> v{1.0};
    CHECK_THROWS_AS(confidence_interval(v), DataError);
  }
}

TEST_CASE("synthetic generator") {
  testing::TempDir dir;
  SyntheticConfig config;
  config.classes = 30;
  config.images_per_class = 20;
  config.dim_text = 12;
  config.dim_visual = 8;
  config.seed = 21;

  SUBCASE("writes a loadable bundle with the default sections") {
    gen_synthetic(config, dir.path());
    for (const char* f : {"text.cmv", "features.cmv", "assign.csv", "splits.json", "generator.json"}) {
      CHECK(std::filesystem::exists(dir / f));
    }
    const DataBundle data = load_bundle(BundlePaths::in_directory(dir.path()));
    CHECK(data.split.base.size() == 18);
    CHECK(data.split.val.size() == 4);
    CHECK(data.split.novel.size() == 8);
    CHECK(data.text.dim() == 12);
    CHECK(data.store.dim() == 8);
  }
  SUBCASE("same seed, same bytes") {
    testing::TempDir other;
    gen_synthetic(config, dir.path());
    gen_synthetic(config, other.path());
    for (const char* f : {"text.cmv", "features.cmv", "assign.csv", "splits.json"}) {
      CHECK(testing::read_bytes(dir / f) == testing::read_bytes(other / f));
    }
  }
  SUBCASE("noise 0 makes 1-shot prototypes exact") {
    config.noise = 0.0;
    gen_synthetic(config, dir.path());
    const DataBundle data = load_bundle(BundlePaths::in_directory(dir.path()));
    EvalConfig eval;
    eval.episodes = 50;
    CHECK(evaluate(eval, data).mean_accuracy == 1.0);
  }
  SUBCASE("invalid settings") {
    config.rank = 9;  // > min(12, 8)
    CHECK_THROWS_AS(gen_synthetic(config, dir.path()), DataError);
    config.rank = 0;
    config.noise = -1.0;
    CHECK_THROWS_AS(gen_synthetic(config, dir.path()), DataError);
  }
}

TEST_CASE("text carries no information when the signal is zero") {
  testing::TempDir dir;
  SyntheticConfig gen;
  gen.classes = 200;
  gen.images_per_class = 20;
  gen.dim_text = 16;
  gen.dim_visual = 12;
  gen.signal = 0.0;
  gen.noise = 3.0;
  gen.seed = 13;
  gen_synthetic(gen, dir.path());
  const DataBundle data = load_bundle(BundlePaths::in_directory(dir.path()));
  const auto pair = fit_on_classes(data.text, data.store, data.split.base,
                                   {AlignMethod::cca_dewhiten, 6, 1e-10, false});
  EvalConfig eval;
  eval.episodes = 300;
  eval.seed = 13;
  const EvalReport s1 = evaluate(eval, data);
  eval.scoring = {ScoreVariant::s3, 5.0};
  const EvalReport s3 = evaluate(eval, data, &pair);
  MESSAGE("s1 " << s1.mean_accuracy << " s3 " << s3.mean_accuracy);
  CHECK(std::abs(s3.mean_accuracy - s1.mean_accuracy) <= s1.ci95_half_width + s3.ci95_half_width);
}

TEST_CASE("sweep") {
  testing::TempDir dir;
  SyntheticConfig gen;
  gen.classes = 200;
  gen.images_per_class = 20;
  gen.dim_text = 16;
  gen.dim_visual = 12;
  gen.rank = 6;
  gen.signal = 2.0;
  gen.noise = 3.0;
  gen.seed = 11;
  gen_synthetic(gen, dir.path());
  const DataBundle data = load_bundle(BundlePaths::in_directory(dir.path()));

  SweepConfig config;
  config.alignment = {AlignMethod::cca_dewhiten, 1, 1e-10, false};
  config.eval.episodes = 100;
  config.eval.seed = 11;
  config.eval.section = "val";

  SUBCASE("lambda 0 reproduces s1") {
    config.lambdas = {0.0};
    config.dims = {4};
    const auto rows = sweep(config, data);
    REQUIRE(rows.size() == 1);
    EvalConfig s1 = config.eval;
    s1.scoring = {ScoreVariant::s1, 0.0};
    CHECK(rows[0].report.accuracies == evaluate(s1, data).accuracies);
  }
  SUBCASE("grid order, CSV, and the best lambda") {
    for (int l = 1; l <= 10; ++l) config.lambdas.push_back(l);
    config.dims = {2, 4, 6, 8};
    const auto rows = sweep(config, data);
    REQUIRE(rows.size() == 40);
    CHECK(rows[0].d == 2);
    CHECK(rows[0].lambda == 1.0);
    CHECK(rows[10].d == 4);

    const std::string csv = sweep_csv(rows);
    CHECK(csv.rfind("lambda,d,mean_accuracy,ci95_half_width\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 41);

    EvalConfig s1 = config.eval;
    const double baseline = evaluate(s1, data).mean_accuracy;
    double best = 0.0;
    for (const auto& r : rows) best = std::max(best, r.report.mean_accuracy);
    CHECK(best >= baseline);
  }
  SUBCASE("empty grid") {
    CHECK_THROWS_AS(sweep(config, data), DataError);
  }
}
