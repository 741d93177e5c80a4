#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "protoalign/data.hpp"
#include "protoalign/linalg.hpp"

namespace protoalign {

struct Episode;

/// Where the ReLU sits relative to batch normalization in the hidden layer.
enum class HiddenOrder { relu_then_norm, norm_then_relu };

std::string to_string(HiddenOrder order);
HiddenOrder parse_hidden_order(const std::string& text);

/// Intermediates of a train-mode forward pass, kept for backpropagation.
struct ForwardCache {
  linalg::Matrix input;       // B x m_t
  linalg::Matrix pre_act;     // X·W1 + b1
  linalg::Matrix normalized;  // batch-normalized values before gamma/beta
  linalg::Matrix norm_out;    // gamma ⊙ normalized + beta
  linalg::Matrix hidden;      // input to the second linear layer
  linalg::Vector batch_mean;
  linalg::Vector batch_var;   // biased
  linalg::Vector inv_std;
  linalg::Matrix output;      // B x m_v
};

/// Gradients with the same shapes as the MapNet parameters.
struct MapNetGradients {
  linalg::Matrix W1, W2;
  linalg::Vector b1, gamma, beta, b2;
};

/// g(n): linear (m_t → h), ReLU, batch norm, linear (h → m_v).
struct MapNet {
  enum class Mode { train, eval };

  linalg::Matrix W1;  // m_t x h
  linalg::Vector b1;
  linalg::Vector gamma, beta;
  linalg::Vector running_mean, running_var;
  linalg::Matrix W2;  // h x m_v
  linalg::Vector b2;

  Mode mode = Mode::train;
  HiddenOrder order = HiddenOrder::relu_then_norm;
  double momentum = 0.1;
  double bn_eps = 1e-5;

  MapNet() = default;
  /// Weights and biases uniform in ±1/√fan_in; gamma = 1, beta = 0,
  /// running mean 0 and running variance 1.
  MapNet(long m_t, long m_v, long hidden, std::uint64_t seed,
         HiddenOrder order = HiddenOrder::relu_then_norm);

  long m_t() const { return static_cast<long>(W1.rows()); }
  long hidden() const { return static_cast<long>(W1.cols()); }
  long m_v() const { return static_cast<long>(W2.cols()); }

  /// Forward in the current mode; train mode also updates running statistics.
  linalg::Matrix forward(const linalg::Matrix& inputs);
  /// Running-statistics forward; never mutates.
  linalg::Matrix forward_eval(const linalg::Matrix& inputs) const;
  /// Batch-statistics forward; never mutates. Requires at least 2 rows.
  linalg::Matrix forward_train(const linalg::Matrix& inputs, ForwardCache* cache = nullptr) const;
  /// Momentum update of the running statistics from a train-mode pass.
  void update_running_stats(const ForwardCache& cache);

  /// Given dL/d(output) for a cached train-mode pass, returns all parameter
  /// gradients.
  MapNetGradients backward(const ForwardCache& cache, const linalg::Matrix& grad_output) const;

  void validate() const;
};

/// One episode's tensors for the s2 objective. Rows of `names` and
/// `prototypes` correspond; `labels[i]` indexes the class of query row i.
struct S2Batch {
  linalg::Matrix queries;
  std::vector<std::size_t> labels;
  linalg::Matrix prototypes;
  linalg::Matrix names;
};

S2Batch make_s2_batch(const Episode& episode, const VisualFeatureStore& store,
                      const EmbeddingTable& names);

/// Mean softmax cross-entropy of the s2 scores over all queries, the net in
/// train mode on the batch of class-name embeddings. Fills `grads` (and
/// `cache`) when non-null. Does not mutate the net.
double s2_loss(const MapNet& net, const S2Batch& batch, double lambda,
               MapNetGradients* grads = nullptr, ForwardCache* cache = nullptr);

struct AdamState {
  long step = 0;
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::vector<linalg::Vector> first_moment;
  std::vector<linalg::Vector> second_moment;

  /// One bias-corrected Adam update of every parameter tensor.
  void apply(MapNet& net, const MapNetGradients& grads);
};

/// Computes the s2 loss and gradients, updates running statistics and applies
/// one Adam step. Returns the loss before the update; throws NumericalError
/// if it is not finite.
double train_step(MapNet& net, const Episode& episode, const VisualFeatureStore& store,
                  const EmbeddingTable& names, double lambda, AdamState& adam);

struct TrainConfig {
  long episodes = 50000;
  long n_way = 5;
  long k_shot = 1;
  long query = 15;
  double lambda = 5.0;
  double learning_rate = 1e-4;
  std::uint64_t seed = 0;
  long log_every = 100;
  std::string section = "base";
};

struct TrainResult {
  std::vector<double> losses;  // one per episode
  /// (episode count so far, mean loss over the interval) at each log point.
  std::vector<std::pair<long, double>> log;
};

/// Episodic training on `config.section` classes. Episode i is sampled from
/// derive_seed(config.seed, i).
TrainResult train(MapNet& net, AdamState& adam, const TrainConfig& config,
                  const VisualFeatureStore& store, const ClassSplit& split,
                  const EmbeddingTable& names,
                  const std::function<void(long, double)>& on_log = {});

/// meta.json plus one CMMAT file per parameter tensor.
void save_mapnet(const MapNet& net, const AdamState& adam, const std::filesystem::path& dir);
MapNet load_mapnet(const std::filesystem::path& dir, AdamState* adam = nullptr);

}  // namespace protoalign
