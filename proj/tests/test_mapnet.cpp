#include "doctest.h"

#include "oracles.hpp"
#include "protoalign/episodes.hpp"
#include "protoalign/errors.hpp"
#include "protoalign/mapnet.hpp"
#include "test_util.hpp"

using namespace protoalign;
using linalg::Matrix;
using linalg::Vector;
using testing::max_abs;
using testing::random_matrix;

namespace {

S2Batch random_batch(long n, long m_t, long m_v, long queries, std::uint64_t seed) {
  S2Batch b;
  b.names = random_matrix(n, m_t, seed);
  b.prototypes = random_matrix(n, m_v, seed + 1);
  b.queries = random_matrix(queries, m_v, seed + 2);
  for (long i = 0; i < queries; ++i) b.labels.push_back(static_cast<std::size_t>(i % n));
  return b;
}

// Every parameter tensor of the net, named, paired with the matching gradient.
template <typename Fn>
void for_each_tensor(MapNet& net, const MapNetGradients& g, Fn fn) {
  fn("W1", net.W1, Matrix(g.W1));
  fn("b1", net.b1, Matrix(g.b1));
  fn("gamma", net.gamma, Matrix(g.gamma));
  fn("beta", net.beta, Matrix(g.beta));
  fn("W2", net.W2, Matrix(g.W2));
  fn("b2", net.b2, Matrix(g.b2));
}

struct Toy {
  EmbeddingTable names;
  VisualFeatureStore store;
  ClassSplit split;
};

// 8 classes, 6 images each; visual features depend on the class name.
Toy toy(std::uint64_t seed) {
  const long classes = 8, images = 6, m_t = 5, m_v = 4;
  const Matrix text = random_matrix(classes, m_t, seed);
  const Matrix map = random_matrix(m_t, m_v, seed + 1);
  const Matrix noise = random_matrix(classes * images, m_v, seed + 2);
  std::vector<std::string> labels, ids;
  std::vector<std::pair<std::string, std::string>> assignment;
  Matrix features(classes * images, m_v);
  ClassSplit split;
  for (long c = 0; c < classes; ++c) {
    labels.push_back("class" + std::to_string(c));
    (c < 6 ? split.base : split.novel).push_back(labels.back());
    for (long i = 0; i < images; ++i) {
      const long r = c * images + i;
      ids.push_back("img" + std::to_string(r));
      assignment.emplace_back(ids.back(), labels.back());
      features.row(r) = text.row(c) * map + 0.5 * noise.row(r);
    }
  }
  return {EmbeddingTable(labels, text), VisualFeatureStore(EmbeddingTable(ids, features), assignment),
          split};
}

}  // namespace

TEST_CASE("construction") {
  const MapNet net(7, 6, 5, 3);
  CHECK(net.m_t() == 7);
  CHECK(net.hidden() == 5);
  CHECK(net.m_v() == 6);
  CHECK(net.W1.cwiseAbs().maxCoeff() <= 1.0 / std::sqrt(7.0));
  CHECK(net.W2.cwiseAbs().maxCoeff() <= 1.0 / std::sqrt(5.0));
  CHECK(net.gamma == Vector::Ones(5));
  CHECK(net.beta == Vector::Zero(5));
  CHECK(net.running_var == Vector::Ones(5));
  CHECK(MapNet(7, 6, 5, 3).W1 == net.W1);
  CHECK(MapNet(7, 6, 5, 4).W1 != net.W1);
  CHECK_THROWS_AS(MapNet(0, 6, 5, 3), DataError);
}

TEST_CASE("all-zero parameters map everything to zero") {
  MapNet net(4, 3, 2, 1);
  net.W1.setZero();
  net.b1.setZero();
  net.W2.setZero();
  net.b2.setZero();
  const Matrix x = random_matrix(5, 4, 2);
  CHECK(net.forward_eval(x) == Matrix::Zero(5, 3));
  CHECK(net.forward_train(x) == Matrix::Zero(5, 3));

  const Vector t = Eigen::Vector3d(1, -2, 3);
  net.b2 = t;
  const Matrix out = net.forward_eval(x);
  for (Eigen::Index r = 0; r < 5; ++r) CHECK(out.row(r) == t.transpose());
}

TEST_CASE("forward matches the straight-line reference") {
  for (auto order : {HiddenOrder::relu_then_norm, HiddenOrder::norm_then_relu}) {
    MapNet net(6, 4, 5, 11, order);
    net.running_mean = random_matrix(5, 1, 12);
    net.running_var = random_matrix(5, 1, 13).cwiseAbs();
    net.gamma = random_matrix(5, 1, 14);
    net.beta = random_matrix(5, 1, 15);
    const Matrix x = random_matrix(7, 6, 16);
    CHECK(max_abs(net.forward_train(x) - oracle::mapnet_forward(net, x, true)) < 1e-12);
    CHECK(max_abs(net.forward_eval(x) - oracle::mapnet_forward(net, x, false)) < 1e-12);
  }
}

TEST_CASE("train-mode batch normalization") {
  MapNet net(6, 4, 5, 21);
  const Matrix x = random_matrix(9, 6, 22);
  ForwardCache cache;
  net.forward_train(x, &cache);
  for (Eigen::Index j = 0; j < 5; ++j) {
    const Vector col = cache.normalized.col(j);
    if (cache.batch_var[j] == 0.0) continue;  // a dead ReLU column
    CHECK(std::abs(col.mean()) < 1e-12);
    CHECK(col.squaredNorm() / 9.0 == doctest::Approx(cache.batch_var[j] / (cache.batch_var[j] + 1e-5)));
  }
  CHECK_THROWS_AS(net.forward_train(x.topRows(1)), DataError);
  CHECK_NOTHROW(net.forward_eval(x.topRows(1)));
}

TEST_CASE("running statistics") {
  MapNet net(6, 4, 5, 31);
  const Matrix x = random_matrix(9, 6, 32);

  const MapNet before = net;
  net.mode = MapNet::Mode::eval;
  CHECK(net.forward(x) == before.forward_eval(x));
  CHECK(net.running_mean == before.running_mean);

  net.mode = MapNet::Mode::train;
  ForwardCache cache;
  before.forward_train(x, &cache);
  net.forward(x);
  const Vector unbiased = cache.batch_var * (9.0 / 8.0);
  CHECK(max_abs(net.running_mean - (0.9 * before.running_mean + 0.1 * cache.batch_mean)) < 1e-15);
  CHECK(max_abs(net.running_var - (0.9 * before.running_var + 0.1 * unbiased)) < 1e-15);
}

TEST_CASE("analytic gradients match central differences") {
  for (auto order : {HiddenOrder::relu_then_norm, HiddenOrder::norm_then_relu}) {
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
      MapNet net(7, 6, 5, seed, order);
      net.gamma = Vector::Ones(5) + 0.3 * random_matrix(5, 1, seed + 40);
      net.beta = 0.3 * random_matrix(5, 1, seed + 50);
      const S2Batch batch = random_batch(4, 7, 6, 8, seed + 60);
      MapNetGradients grads;
      s2_loss(net, batch, 2.0, &grads);
      for_each_tensor(net, grads, [&](const char* name, auto& param, const Matrix& analytic) {
        const Matrix numeric =
            oracle::finite_difference(param, [&] { return s2_loss(net, batch, 2.0); }, 1e-5);
        CAPTURE(name);
        CAPTURE(seed);
        CHECK(oracle::relative_error(analytic, numeric) < 1e-4);
      });
    }
  }
}

TEST_CASE("lambda 0 gives zero gradients and leaves parameters unchanged") {
  MapNet net(7, 6, 5, 5);
  const S2Batch batch = random_batch(4, 7, 6, 8, 6);
  MapNetGradients grads;
  s2_loss(net, batch, 0.0, &grads);
  CHECK(grads.W1.isZero(0.0));
  CHECK(grads.W2.isZero(0.0));
  CHECK(grads.gamma.isZero(0.0));
  CHECK(grads.b2.isZero(0.0));

  const MapNet before = net;
  AdamState adam;
  adam.apply(net, grads);
  CHECK(net.W1 == before.W1);
  CHECK(net.b2 == before.b2);
}

TEST_CASE("s2_loss is pure") {
  const MapNet net(7, 6, 5, 5);
  const S2Batch batch = random_batch(4, 7, 6, 8, 6);
  const double a = s2_loss(net, batch, 3.0);
  const double b = s2_loss(net, batch, 3.0);
  CHECK(a == b);
  CHECK(a > 0.0);
}

TEST_CASE("training on a fixed episode lowers its loss") {
  const Toy t = toy(7);
  Rng rng(7);
  const Episode episode = sample_episode(t.split.base, t.store, 5, 1, 3, rng);
  MapNet net(5, 4, 16, 7);
  AdamState adam;
  adam.learning_rate = 1e-2;
  const S2Batch batch = make_s2_batch(episode, t.store, t.names);
  const double start = s2_loss(net, batch, 5.0);
  double last = start;
  for (int i = 0; i < 200; ++i) last = train_step(net, episode, t.store, t.names, 5.0, adam);
  CHECK(last < start);
  CHECK(adam.step == 200);
}

TEST_CASE("train") {
  const Toy t = toy(9);
  TrainConfig config;
  config.n_way = 3;
  config.k_shot = 1;
  config.query = 2;
  config.seed = 4;
  config.log_every = 10;

  SUBCASE("zero episodes change nothing") {
    MapNet net(5, 4, 8, 1);
    const MapNet before = net;
    AdamState adam;
    config.episodes = 0;
    const auto result = train(net, adam, config, t.store, t.split, t.names);
    CHECK(result.losses.empty());
    CHECK(net.W1 == before.W1);
    CHECK(net.running_mean == before.running_mean);
    CHECK(net.mode == before.mode);
  }
  SUBCASE("deterministic, with a log point per interval") {
    config.episodes = 25;
    MapNet a(5, 4, 8, 1), b(5, 4, 8, 1);
    AdamState adam_a, adam_b;
    std::vector<long> logged;
    const auto ra = train(a, adam_a, config, t.store, t.split, t.names,
                          [&](long n, double) { logged.push_back(n); });
    const auto rb = train(b, adam_b, config, t.store, t.split, t.names);
    CHECK(ra.losses == rb.losses);
    CHECK(a.W1 == b.W1);
    CHECK(logged == std::vector<long>{10, 20, 25});
    CHECK(ra.log.size() == 3);
  }
  SUBCASE("empty section") {
    MapNet net(5, 4, 8, 1);
    AdamState adam;
    config.section = "val";
    CHECK_THROWS_AS(train(net, adam, config, t.store, t.split, t.names), DataError);
  }
}

TEST_CASE("checkpoint round trip") {
  testing::TempDir dir;
  const Toy t = toy(3);
  MapNet net(5, 4, 8, 2, HiddenOrder::norm_then_relu);
  AdamState adam;
  TrainConfig config;
  config.episodes = 5;
  config.n_way = 3;
  config.query = 2;
  train(net, adam, config, t.store, t.split, t.names);
  net.mode = MapNet::Mode::eval;

  save_mapnet(net, adam, dir / "net");
  AdamState back_adam;
  const MapNet back = load_mapnet(dir / "net", &back_adam);
  CHECK(back.order == HiddenOrder::norm_then_relu);
  CHECK(back.mode == MapNet::Mode::eval);
  CHECK(back.W1 == net.W1.cast<float>().cast<double>());
  CHECK(back.running_var == net.running_var.cast<float>().cast<double>());
  CHECK(back_adam.step == 5);
  CHECK(back_adam.learning_rate == adam.learning_rate);

  const Matrix x = t.names.vectors();
  CHECK(max_abs(back.forward_eval(x) - net.forward_eval(x)) < 1e-4);
  CHECK_THROWS(load_mapnet(dir / "missing"));
}

TEST_CASE("a trained map improves on the prototype baseline") {
  testing::TempDir dir;
  SyntheticConfig gen;
  gen.classes = 120;
  gen.images_per_class = 20;
  gen.dim_text = 16;
  gen.dim_visual = 12;
  gen.rank = 6;
  gen.signal = 2.0;
  gen.noise = 3.0;
  gen.seed = 17;
  gen_synthetic(gen, dir.path());
  const DataBundle data = load_bundle(BundlePaths::in_directory(dir.path()));

  MapNet net(16, 12, 32, 1);
  AdamState adam;
  TrainConfig config;
  config.episodes = 2000;
  config.lambda = 5.0;
  config.learning_rate = 1e-3;
  config.seed = 2;
  train(net, adam, config, data.store, data.split, data.text);
  net.mode = MapNet::Mode::eval;

  EvalConfig eval;
  eval.episodes = 300;
  eval.seed = 3;
  const double s1 = evaluate(eval, data).mean_accuracy;
  eval.scoring = {ScoreVariant::s2, 5.0};
  const double s2 = evaluate(eval, data, nullptr, &net).mean_accuracy;
  MESSAGE("s1 " << s1 << " s2 " << s2);
  CHECK(s2 > s1);
}
