#include "protoalign/mapnet.hpp"

#include <cmath>
#include <fstream>
#include <unordered_map>

#include "json.hpp"

#include "protoalign/episodes.hpp"
#include "protoalign/errors.hpp"
#include "protoalign/prototypes.hpp"
#include "protoalign/rng.hpp"
#include "protoalign/scoring.hpp"

namespace protoalign {

using linalg::Matrix;
using linalg::Vector;

namespace {

using json = nlohmann::json;

Matrix uniform_matrix(Eigen::Index rows, Eigen::Index cols, double bound, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = rng.uniform(-bound, bound);
  }
  return m;
}

Vector uniform_vector(Eigen::Index n, double bound, Rng& rng) {
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = rng.uniform(-bound, bound);
  return v;
}

Matrix relu(const Matrix& m) { return m.cwiseMax(0.0); }

Matrix relu_mask(const Matrix& m) { return (m.array() > 0.0).cast<double>().matrix(); }

// Parameter tensors as flat views, in a fixed order shared with gradients.
template <typename Net, typename Grad>
auto flat_views(Net& net, Grad& grads) {
  using Map = Eigen::Map<std::conditional_t<std::is_const_v<Net>, const Vector, Vector>>;
  using GMap = Eigen::Map<std::conditional_t<std::is_const_v<Grad>, const Vector, Vector>>;
  std::vector<std::pair<Map, GMap>> out;
  auto add = [&](auto& p, auto& g) {
    out.emplace_back(Map(p.data(), p.size()), GMap(g.data(), g.size()));
  };
  add(net.W1, grads.W1);
  add(net.b1, grads.b1);
  add(net.gamma, grads.gamma);
  add(net.beta, grads.beta);
  add(net.W2, grads.W2);
  add(net.b2, grads.b2);
  return out;
}

void write_json(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

Vector row_vector(const Matrix& m, const std::filesystem::path& path) {
  if (m.rows() != 1) throw DataError(path.string() + ": expected a 1-row matrix");
  return m.row(0).transpose();
}

}  // namespace

std::string to_string(HiddenOrder order) {
  return order == HiddenOrder::relu_then_norm ? "relu-bn" : "bn-relu";
}

HiddenOrder parse_hidden_order(const std::string& text) {
  if (text == "relu-bn") return HiddenOrder::relu_then_norm;
  if (text == "bn-relu") return HiddenOrder::norm_then_relu;
  throw DataError("unknown hidden-layer order \"" + text + "\" (expected relu-bn or bn-relu)");
}

// ---- MapNet -----------------------------------------------------------------

MapNet::MapNet(long m_t, long m_v, long hidden, std::uint64_t seed, HiddenOrder order_)
    : order(order_) {
  if (m_t < 1 || m_v < 1 || hidden < 1) throw DataError("MapNet: dimensions must be positive");
  Rng rng(seed);
  const double bound1 = 1.0 / std::sqrt(static_cast<double>(m_t));
  const double bound2 = 1.0 / std::sqrt(static_cast<double>(hidden));
  W1 = uniform_matrix(m_t, hidden, bound1, rng);
  b1 = uniform_vector(hidden, bound1, rng);
  W2 = uniform_matrix(hidden, m_v, bound2, rng);
  b2 = uniform_vector(m_v, bound2, rng);
  gamma = Vector::Ones(hidden);
  beta = Vector::Zero(hidden);
  running_mean = Vector::Zero(hidden);
  running_var = Vector::Ones(hidden);
}

void MapNet::validate() const {
  const auto h = W1.cols();
  if (b1.size() != h || gamma.size() != h || beta.size() != h || running_mean.size() != h ||
      running_var.size() != h || W2.rows() != h || b2.size() != W2.cols()) {
    throw DataError("MapNet: inconsistent parameter shapes");
  }
  for (const Matrix* m : {&W1, &W2}) linalg::require_finite(*m, "MapNet weights");
  for (const Vector* v : {&b1, &gamma, &beta, &running_mean, &running_var, &b2}) {
    linalg::require_finite(*v, "MapNet parameters");
  }
  if ((running_var.array() < 0.0).any()) throw DataError("MapNet: negative running variance");
}

Matrix MapNet::forward(const Matrix& inputs) {
  if (mode == Mode::eval) return forward_eval(inputs);
  ForwardCache cache;
  Matrix out = forward_train(inputs, &cache);
  update_running_stats(cache);
  return out;
}

Matrix MapNet::forward_eval(const Matrix& inputs) const {
  if (inputs.cols() != W1.rows()) {
    throw DataError("MapNet: input dim " + std::to_string(inputs.cols()) + ", expected " +
                    std::to_string(W1.rows()));
  }
  if (inputs.rows() < 1) throw DataError("MapNet: empty batch");
  Matrix pre = (inputs * W1).rowwise() + b1.transpose();
  if (order == HiddenOrder::relu_then_norm) pre = relu(pre);
  const Vector inv_std = (running_var.array() + bn_eps).rsqrt();
  Matrix h = ((pre.rowwise() - running_mean.transpose()).array().rowwise() *
              (inv_std.array() * gamma.array()).transpose())
                 .matrix();
  h.rowwise() += beta.transpose();
  if (order == HiddenOrder::norm_then_relu) h = relu(h);
  return (h * W2).rowwise() + b2.transpose();
}

Matrix MapNet::forward_train(const Matrix& inputs, ForwardCache* cache) const {
  if (inputs.cols() != W1.rows()) {
    throw DataError("MapNet: input dim " + std::to_string(inputs.cols()) + ", expected " +
                    std::to_string(W1.rows()));
  }
  if (inputs.rows() < 2) {
    throw DataError("MapNet: train-mode batch normalization needs a batch of at least 2");
  }
  ForwardCache local;
  ForwardCache& c = cache != nullptr ? *cache : local;
  const double batch = static_cast<double>(inputs.rows());

  c.input = inputs;
  c.pre_act = (inputs * W1).rowwise() + b1.transpose();
  const Matrix bn_in = order == HiddenOrder::relu_then_norm ? relu(c.pre_act) : c.pre_act;

  c.batch_mean = bn_in.colwise().mean().transpose();
  const Matrix centered = bn_in.rowwise() - c.batch_mean.transpose();
  c.batch_var = centered.colwise().squaredNorm().transpose() / batch;
  c.inv_std = (c.batch_var.array() + bn_eps).rsqrt();
  c.normalized = (centered.array().rowwise() * c.inv_std.array().transpose()).matrix();
  c.norm_out = (c.normalized.array().rowwise() * gamma.array().transpose()).matrix();
  c.norm_out.rowwise() += beta.transpose();
  c.hidden = order == HiddenOrder::norm_then_relu ? relu(c.norm_out) : c.norm_out;
  c.output = (c.hidden * W2).rowwise() + b2.transpose();
  return c.output;
}

void MapNet::update_running_stats(const ForwardCache& cache) {
  const double batch = static_cast<double>(cache.input.rows());
  const Vector unbiased = cache.batch_var * (batch / (batch - 1.0));
  running_mean = (1.0 - momentum) * running_mean + momentum * cache.batch_mean;
  running_var = (1.0 - momentum) * running_var + momentum * unbiased;
}

MapNetGradients MapNet::backward(const ForwardCache& c, const Matrix& grad_output) const {
  const double batch = static_cast<double>(c.input.rows());
  MapNetGradients g;
  g.W2 = c.hidden.transpose() * grad_output;
  g.b2 = grad_output.colwise().sum().transpose();

  Matrix d_norm_out = grad_output * W2.transpose();
  if (order == HiddenOrder::norm_then_relu) d_norm_out = d_norm_out.cwiseProduct(relu_mask(c.norm_out));

  g.gamma = d_norm_out.cwiseProduct(c.normalized).colwise().sum().transpose();
  g.beta = d_norm_out.colwise().sum().transpose();

  // Batch-norm backward with batch statistics.
  const Matrix d_normalized = (d_norm_out.array().rowwise() * gamma.array().transpose()).matrix();
  const Eigen::RowVectorXd sum_d = d_normalized.colwise().sum();
  const Eigen::RowVectorXd sum_dx = d_normalized.cwiseProduct(c.normalized).colwise().sum();
  Matrix d_bn_in = batch * d_normalized;
  d_bn_in.rowwise() -= sum_d;
  d_bn_in -= (c.normalized.array().rowwise() * sum_dx.array()).matrix();
  d_bn_in = (d_bn_in.array().rowwise() * (c.inv_std.array() / batch).transpose()).matrix();

  Matrix d_pre = d_bn_in;
  if (order == HiddenOrder::relu_then_norm) d_pre = d_pre.cwiseProduct(relu_mask(c.pre_act));

  g.W1 = c.input.transpose() * d_pre;
  g.b1 = d_pre.colwise().sum().transpose();
  return g;
}

// ---- s2 objective -----------------------------------------------------------

S2Batch make_s2_batch(const Episode& episode, const VisualFeatureStore& store,
                      const EmbeddingTable& names) {
  S2Batch batch;
  const PrototypeSet protos = episode_prototypes(episode.support, store);
  batch.prototypes = protos.matrix;
  batch.names = names.rows(protos.classes);

  std::unordered_map<std::string, std::size_t> class_index;
  for (std::size_t i = 0; i < protos.classes.size(); ++i) class_index.emplace(protos.classes[i], i);

  batch.queries.resize(static_cast<Eigen::Index>(episode.query.size()), store.dim());
  for (std::size_t i = 0; i < episode.query.size(); ++i) {
    const auto& [image, cls] = episode.query[i];
    const auto it = class_index.find(cls);
    if (it == class_index.end()) throw DataError("query class \"" + cls + "\" not in support set");
    batch.queries.row(static_cast<Eigen::Index>(i)) = store.feature_row(store.row_of(image));
    batch.labels.push_back(it->second);
  }
  return batch;
}

double s2_loss(const MapNet& net, const S2Batch& batch, double lambda, MapNetGradients* grads,
               ForwardCache* cache) {
  const Eigen::Index classes = batch.prototypes.rows();
  const Eigen::Index queries = batch.queries.rows();
  if (batch.names.rows() != classes) throw DataError("s2_loss: names/prototypes row mismatch");
  if (queries == 0) throw DataError("s2_loss: no queries");

  ForwardCache local;
  ForwardCache& c = cache != nullptr ? *cache : local;
  const Matrix mapped = net.forward_train(batch.names, &c);
  if (mapped.cols() != batch.queries.cols()) {
    throw DataError("s2_loss: net output dim " + std::to_string(mapped.cols()) +
                    " differs from feature dim " + std::to_string(batch.queries.cols()));
  }

  const PrototypeSet protos{{}, batch.prototypes};
  Matrix d_mapped = Matrix::Zero(classes, mapped.cols());
  const Vector mapped_norm = mapped.rowwise().norm();
  double total = 0.0;

  for (Eigen::Index i = 0; i < queries; ++i) {
    const Vector q = batch.queries.row(i).transpose();
    const Vector scores = score_with_text(q, protos, q, mapped, lambda);
    const auto label = batch.labels[static_cast<std::size_t>(i)];
    const auto soft = softmax_ce(scores, label);
    total += soft.loss;
    if (grads == nullptr || lambda == 0.0) continue;

    const double q_norm = q.norm();
    if (q_norm < kCosineNormFloor) continue;
    for (Eigen::Index k = 0; k < classes; ++k) {
      const double g_norm = mapped_norm[k];
      if (g_norm < kCosineNormFloor) continue;
      const double d_score =
          (soft.probabilities[k] - (static_cast<std::size_t>(k) == label ? 1.0 : 0.0)) /
          static_cast<double>(queries);
      const Vector g = mapped.row(k).transpose();
      const double cos = q.dot(g) / (q_norm * g_norm);
      // ∂cos(q, g)/∂g = q/(|q||g|) − cos·g/|g|²
      d_mapped.row(k) +=
          (d_score * lambda) * (q / (q_norm * g_norm) - (cos / (g_norm * g_norm)) * g).transpose();
    }
  }

  if (grads != nullptr) *grads = net.backward(c, d_mapped);
  return total / static_cast<double>(queries);
}

// ---- Adam -------------------------------------------------------------------

void AdamState::apply(MapNet& net, const MapNetGradients& grads) {
  auto views = flat_views(net, grads);
  if (first_moment.empty()) {
    for (const auto& [p, g] : views) {
      first_moment.push_back(Vector::Zero(p.size()));
      second_moment.push_back(Vector::Zero(p.size()));
    }
  }
  if (first_moment.size() != views.size()) throw DataError("Adam: optimizer state shape mismatch");

  ++step;
  const double correction1 = 1.0 - std::pow(beta1, static_cast<double>(step));
  const double correction2 = 1.0 - std::pow(beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < views.size(); ++i) {
    auto& [p, g] = views[i];
    Vector& m = first_moment[i];
    Vector& v = second_moment[i];
    m = beta1 * m + (1.0 - beta1) * g;
    v = beta2 * v + (1.0 - beta2) * g.cwiseAbs2();
    const Vector m_hat = m / correction1;
    const Vector v_hat = v / correction2;
    p.array() -= learning_rate * m_hat.array() / (v_hat.array().sqrt() + epsilon);
  }
}

double train_step(MapNet& net, const Episode& episode, const VisualFeatureStore& store,
                  const EmbeddingTable& names, double lambda, AdamState& adam) {
  const S2Batch batch = make_s2_batch(episode, store, names);
  MapNetGradients grads;
  ForwardCache cache;
  const double loss = s2_loss(net, batch, lambda, &grads, &cache);
  if (!std::isfinite(loss)) throw NumericalError("train_step: loss diverged (non-finite)");
  net.update_running_stats(cache);
  adam.apply(net, grads);
  return loss;
}

TrainResult train(MapNet& net, AdamState& adam, const TrainConfig& config,
                  const VisualFeatureStore& store, const ClassSplit& split,
                  const EmbeddingTable& names, const std::function<void(long, double)>& on_log) {
  const auto& classes = split.section(config.section);
  if (classes.empty()) throw DataError("train: split section \"" + config.section + "\" is empty");
  if (config.log_every < 1) throw DataError("train: log interval must be positive");

  adam.learning_rate = config.learning_rate;
  TrainResult result;
  double interval_sum = 0.0;
  long interval_count = 0;
  for (long i = 0; i < config.episodes; ++i) {
    Rng rng(derive_seed(config.seed, static_cast<std::uint64_t>(i)));
    const Episode episode =
        sample_episode(classes, store, config.n_way, config.k_shot, config.query, rng);
    const double loss = train_step(net, episode, store, names, config.lambda, adam);
    result.losses.push_back(loss);
    interval_sum += loss;
    ++interval_count;
    if ((i + 1) % config.log_every == 0 || i + 1 == config.episodes) {
      const double mean = interval_sum / static_cast<double>(interval_count);
      result.log.emplace_back(i + 1, mean);
      if (on_log) on_log(i + 1, mean);
      interval_sum = 0.0;
      interval_count = 0;
    }
  }
  return result;
}

// ---- checkpoint -------------------------------------------------------------

void save_mapnet(const MapNet& net, const AdamState& adam, const std::filesystem::path& dir) {
  net.validate();
  std::filesystem::create_directories(dir);
  write_matrix(net.W1, dir / "W1.cmm");
  write_matrix(net.b1.transpose(), dir / "b1.cmm");
  write_matrix(net.gamma.transpose(), dir / "gamma.cmm");
  write_matrix(net.beta.transpose(), dir / "beta.cmm");
  write_matrix(net.running_mean.transpose(), dir / "running_mean.cmm");
  write_matrix(net.running_var.transpose(), dir / "running_var.cmm");
  write_matrix(net.W2, dir / "W2.cmm");
  write_matrix(net.b2.transpose(), dir / "b2.cmm");
  write_json(dir / "meta.json",
             {{"m_t", net.m_t()},
              {"hidden", net.hidden()},
              {"m_v", net.m_v()},
              {"mode", net.mode == MapNet::Mode::train ? "train" : "eval"},
              {"order", to_string(net.order)},
              {"momentum", net.momentum},
              {"bn_eps", net.bn_eps},
              {"optimizer",
               {{"step", adam.step},
                {"learning_rate", adam.learning_rate},
                {"beta1", adam.beta1},
                {"beta2", adam.beta2},
                {"epsilon", adam.epsilon}}}});
}

MapNet load_mapnet(const std::filesystem::path& dir, AdamState* adam) {
  const auto meta_path = dir / "meta.json";
  std::ifstream in(meta_path);
  if (!in) throw DataError("cannot open " + meta_path.string());
  MapNet net;
  try {
    const json meta = json::parse(in);
    net.mode = meta.at("mode").get<std::string>() == "train" ? MapNet::Mode::train
                                                               : MapNet::Mode::eval;
    net.order = parse_hidden_order(meta.at("order").get<std::string>());
    net.momentum = meta.at("momentum").get<double>();
    net.bn_eps = meta.at("bn_eps").get<double>();
    if (adam != nullptr) {
      const auto& opt = meta.at("optimizer");
      *adam = AdamState{};
      adam->step = opt.at("step").get<long>();
      adam->learning_rate = opt.at("learning_rate").get<double>();
      adam->beta1 = opt.at("beta1").get<double>();
      adam->beta2 = opt.at("beta2").get<double>();
      adam->epsilon = opt.at("epsilon").get<double>();
    }
  } catch (const json::exception& e) {
    throw FormatError(meta_path.string(), 0, std::string("bad meta.json: ") + e.what());
  }
  net.W1 = load_matrix(dir / "W1.cmm");
  net.b1 = row_vector(load_matrix(dir / "b1.cmm"), dir / "b1.cmm");
  net.gamma = row_vector(load_matrix(dir / "gamma.cmm"), dir / "gamma.cmm");
  net.beta = row_vector(load_matrix(dir / "beta.cmm"), dir / "beta.cmm");
  net.running_mean = row_vector(load_matrix(dir / "running_mean.cmm"), dir / "running_mean.cmm");
  net.running_var = row_vector(load_matrix(dir / "running_var.cmm"), dir / "running_var.cmm");
  net.W2 = load_matrix(dir / "W2.cmm");
  net.b2 = row_vector(load_matrix(dir / "b2.cmm"), dir / "b2.cmm");
  net.validate();
  return net;
}

}  // namespace protoalign
