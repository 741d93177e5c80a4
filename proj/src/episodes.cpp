#include "protoalign/episodes.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <exception>
#include <fstream>
#include <mutex>
#include <thread>
#include <unordered_map>

#include "json.hpp"

#include "protoalign/errors.hpp"

namespace protoalign {

using linalg::Matrix;
using linalg::Vector;

namespace {

using json = nlohmann::json;

std::string format_double(double v) {
  char buf[64];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("write failed: " + path.string());
}

// Partial Fisher-Yates: the first `count` entries become a uniform sample
// without replacement.
template <typename T>
std::vector<T> sample_without_replacement(std::vector<T> items, std::size_t count, Rng& rng) {
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(items.size() - i));
    std::swap(items[i], items[j]);
  }
  items.resize(count);
  return items;
}

void check_asset_dims(const EvalConfig& config, const DataBundle& data, const ProjectionPair* pair,
                      const MapNet* net) {
  if (config.scoring.variant == ScoreVariant::s3) {
    if (pair->m_t() != data.text.dim() || pair->m_v() != data.store.dim()) {
      throw DataError("projection pair is " + std::to_string(pair->m_t()) + "->" +
                      std::to_string(pair->m_v()) + " but data is " +
                      std::to_string(data.text.dim()) + "->" + std::to_string(data.store.dim()));
    }
  }
  if (config.scoring.variant == ScoreVariant::s2) {
    if (net->m_t() != data.text.dim() || net->m_v() != data.store.dim()) {
      throw DataError("MapNet maps " + std::to_string(net->m_t()) + "->" +
                      std::to_string(net->m_v()) + " but data is " +
                      std::to_string(data.text.dim()) + "->" + std::to_string(data.store.dim()));
    }
  }
}

double episode_accuracy(const EvalConfig& config, const DataBundle& data,
                        const ProjectionPair* pair, const MapNet* net, std::uint64_t index) {
  Rng rng(derive_seed(config.seed, index));
  const Episode episode = sample_episode(data.split.section(config.section), data.store,
                                         config.n_way, config.k_shot, config.query, rng);
  const PrototypeSet protos = episode_prototypes(episode.support, data.store);

  std::unordered_map<std::string, std::size_t> class_index;
  for (std::size_t i = 0; i < protos.classes.size(); ++i) class_index.emplace(protos.classes[i], i);

  const double lambda = config.scoring.lambda;
  const ScoreVariant variant = lambda == 0.0 ? ScoreVariant::s1 : config.scoring.variant;
  Matrix class_text;
  if (variant == ScoreVariant::s2) class_text = net->forward_eval(data.text.rows(protos.classes));
  if (variant == ScoreVariant::s3) class_text = project_text_rows(*pair, data.text.rows(protos.classes));

  std::size_t correct = 0;
  for (const auto& [image, cls] : episode.query) {
    const Vector q = data.store.feature_row(data.store.row_of(image)).transpose();
    Vector scores;
    switch (variant) {
      case ScoreVariant::s1: scores = score_s1(q, protos); break;
      case ScoreVariant::s2: scores = score_with_text(q, protos, q, class_text, lambda); break;
      case ScoreVariant::s3:
        scores = score_with_text(q, protos, project_visual(*pair, q), class_text, lambda);
        break;
    }
    if (classify(scores) == class_index.at(cls)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(episode.query.size());
}

}  // namespace

Episode sample_episode(std::span<const std::string> section, const VisualFeatureStore& store,
                       long n_way, long k_shot, long query, Rng& rng) {
  if (n_way < 1 || k_shot < 1 || query < 1) {
    throw DataError("episode: N, K and Q must be positive");
  }
  if (section.size() < static_cast<std::size_t>(n_way)) {
    throw DataError("episode: section has " + std::to_string(section.size()) +
                    " classes, need " + std::to_string(n_way));
  }

  Episode ep;
  ep.n_way = n_way;
  ep.k_shot = k_shot;
  ep.query_per_class = query;
  ep.classes = sample_without_replacement(std::vector<std::string>(section.begin(), section.end()),
                                          static_cast<std::size_t>(n_way), rng);

  const auto needed = static_cast<std::size_t>(k_shot + query);
  std::vector<std::vector<std::string>> drawn;
  for (const auto& cls : ep.classes) {
    const auto& images = store.images_of(cls);
    if (images.size() < needed) {
      throw DataError("episode: class \"" + cls + "\" has " + std::to_string(images.size()) +
                      " images, need " + std::to_string(needed));
    }
    drawn.push_back(sample_without_replacement(images, needed, rng));
  }
  for (std::size_t c = 0; c < ep.classes.size(); ++c) {
    for (long k = 0; k < k_shot; ++k) ep.support.emplace_back(drawn[c][static_cast<std::size_t>(k)], ep.classes[c]);
  }
  for (std::size_t c = 0; c < ep.classes.size(); ++c) {
    for (std::size_t k = static_cast<std::size_t>(k_shot); k < needed; ++k) {
      ep.query.emplace_back(drawn[c][k], ep.classes[c]);
    }
  }
  return ep;
}

BundlePaths BundlePaths::in_directory(const std::filesystem::path& dir) {
  return {dir / "text.cmv", dir / "features.cmv", dir / "assign.csv", dir / "splits.json"};
}

DataBundle load_bundle(const BundlePaths& paths) {
  DataBundle data{load_embeddings(paths.text), {}, load_split(paths.splits)};
  data.store = load_assignments(paths.assignments, load_embeddings(paths.features));
  data.split.validate_against(data.store);
  for (const auto* list : {&data.split.base, &data.split.val, &data.split.novel}) {
    for (const auto& cls : *list) {
      if (!data.text.contains(cls)) {
        throw DataError("split class \"" + cls + "\" has no text embedding in " + paths.text.string());
      }
    }
  }
  return data;
}

std::pair<double, double> confidence_interval(std::span<const double> accuracies) {
  if (accuracies.size() < 2) throw DataError("confidence interval needs at least 2 values");
  const double n = static_cast<double>(accuracies.size());
  double sum = 0.0;
  for (double a : accuracies) sum += a;
  const double mean = sum / n;
  double ss = 0.0;
  for (double a : accuracies) ss += (a - mean) * (a - mean);
  const double sd = std::sqrt(ss / (n - 1.0));
  return {mean, 1.96 * sd / std::sqrt(n)};
}

std::string EvalReport::to_json() const {
  const json j = {
      {"mean_accuracy", mean_accuracy},
      {"ci95_half_width", ci95_half_width},
      {"episodes", config.episodes},
      {"seed", config.seed},
      {"config",
       {{"variant", to_string(config.scoring.variant)},
        {"lambda", config.scoring.lambda},
        {"n_way", config.n_way},
        {"k_shot", config.k_shot},
        {"query", config.query},
        {"split", config.section}}},
      {"per_episode", accuracies},
  };
  return j.dump(2) + "\n";
}

EvalReport evaluate(const EvalConfig& config, const DataBundle& data, const ProjectionPair* pair,
                    const MapNet* net) {
  config.scoring.validate(net, pair);
  check_asset_dims(config, data, pair, net);
  if (config.episodes < 2) throw DataError("evaluate: need at least 2 episodes");

  EvalReport report;
  report.config = config;
  const auto count = static_cast<std::size_t>(config.episodes);
  report.accuracies.assign(count, 0.0);

  std::atomic<std::size_t> next{0};
  std::mutex error_mutex;
  std::size_t error_index = count;
  std::exception_ptr error;

  auto worker = [&] {
    for (std::size_t i = next++; i < count; i = next++) {
      try {
        report.accuracies[i] = episode_accuracy(config, data, pair, net, i);
      } catch (...) {
        // Keep the failure of the lowest episode index so errors are stable too.
        std::lock_guard lock(error_mutex);
        if (i < error_index) {
          error_index = i;
          error = std::current_exception();
        }
      }
    }
  };

  const unsigned threads = std::max(1u, std::min<unsigned>(config.threads, static_cast<unsigned>(count)));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  if (error) std::rethrow_exception(error);

  std::tie(report.mean_accuracy, report.ci95_half_width) = confidence_interval(report.accuracies);
  return report;
}

std::vector<SweepRow> sweep(const SweepConfig& config, const DataBundle& data) {
  if (config.lambdas.empty() || config.dims.empty()) throw DataError("sweep: empty grid");
  std::vector<SweepRow> rows;
  for (long d : config.dims) {
    AlignmentConfig alignment = config.alignment;
    alignment.d = d;
    const ProjectionPair pair =
        fit_on_classes(data.text, data.store, data.split.section(config.fit_section), alignment);
    for (double lambda : config.lambdas) {
      EvalConfig eval = config.eval;
      eval.scoring = {ScoreVariant::s3, lambda};
      rows.push_back({lambda, d, evaluate(eval, data, &pair)});
    }
  }
  return rows;
}

std::string sweep_csv(std::span<const SweepRow> rows) {
  std::string out = "lambda,d,mean_accuracy,ci95_half_width\n";
  for (const auto& row : rows) {
    out += format_double(row.lambda) + "," + std::to_string(row.d) + "," +
           format_double(row.report.mean_accuracy) + "," +
           format_double(row.report.ci95_half_width) + "\n";
  }
  return out;
}

void gen_synthetic(const SyntheticConfig& config, const std::filesystem::path& out_dir) {
  if (config.classes < 2 || config.images_per_class < 1 || config.dim_text < 1 ||
      config.dim_visual < 1) {
    throw DataError("gen-synthetic: sizes must be positive (and at least 2 classes)");
  }
  if (config.noise < 0.0 || config.signal < 0.0) {
    throw DataError("gen-synthetic: signal and noise must be non-negative");
  }
  const long max_rank = std::min(config.dim_text, config.dim_visual);
  const long rank = config.rank == 0 ? max_rank : config.rank;
  if (rank < 1 || rank > max_rank) {
    throw DataError("gen-synthetic: rank must be in [1, " + std::to_string(max_rank) + "]");
  }
  const long base = config.base > 0 ? config.base : config.classes * 60 / 100;
  const long val = config.val > 0 ? config.val : config.classes * 15 / 100;
  const long novel = config.classes - base - val;
  if (base < 1 || novel < 1) {
    throw DataError("gen-synthetic: split sizes leave an empty base or novel section");
  }

  Rng rng(config.seed);
  auto gaussian = [&rng](Eigen::Index rows, Eigen::Index cols) {
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = rng.normal();
    }
    return m;
  };

  const Matrix left = gaussian(config.dim_visual, rank);
  const Matrix right = gaussian(rank, config.dim_text);
  const Matrix map = left * right / std::sqrt(static_cast<double>(rank * config.dim_text));
  const double visual_scale = 1.0 / std::sqrt(static_cast<double>(config.dim_visual));

  std::vector<std::string> class_names;
  Matrix text(config.classes, config.dim_text);
  Matrix features(config.classes * config.images_per_class, config.dim_visual);
  std::vector<std::string> image_ids;
  std::vector<std::pair<std::string, std::string>> assignment;

  char buf[32];
  for (long c = 0; c < config.classes; ++c) {
    std::snprintf(buf, sizeof buf, "class%04ld", c);
    class_names.emplace_back(buf);
    const Vector n = gaussian(config.dim_text, 1);
    const Vector offset = gaussian(config.dim_visual, 1);
    text.row(c) = n.transpose();
    const Vector mean = (config.signal * (map * n) + offset) * visual_scale;
    for (long i = 0; i < config.images_per_class; ++i) {
      const long row = c * config.images_per_class + i;
      std::snprintf(buf, sizeof buf, "img%07ld", row);
      image_ids.emplace_back(buf);
      assignment.emplace_back(buf, class_names.back());
      const Vector z = gaussian(config.dim_visual, 1);
      features.row(row) = (mean + config.noise * visual_scale * z).transpose();
    }
  }

  std::filesystem::create_directories(out_dir);
  write_embeddings(EmbeddingTable(class_names, text, "synthetic"), out_dir / "text.cmv");
  write_embeddings(EmbeddingTable(image_ids, features, "features"), out_dir / "features.cmv");
  write_assignments(assignment, out_dir / "assign.csv");

  ClassSplit split;
  split.base.assign(class_names.begin(), class_names.begin() + base);
  split.val.assign(class_names.begin() + base, class_names.begin() + base + val);
  split.novel.assign(class_names.begin() + base + val, class_names.end());
  write_split(split, out_dir / "splits.json");

  const json meta = {{"classes", config.classes},   {"images_per_class", config.images_per_class},
                     {"dim_text", config.dim_text}, {"dim_visual", config.dim_visual},
                     {"rank", rank},                {"signal", config.signal},
                     {"noise", config.noise},       {"seed", config.seed},
                     {"base", base},                {"val", val},
                     {"novel", novel}};
  write_text(out_dir / "generator.json", meta.dump(2) + "\n");
}

}  // namespace protoalign
