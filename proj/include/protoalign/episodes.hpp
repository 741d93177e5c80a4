#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "protoalign/cem.hpp"
#include "protoalign/data.hpp"
#include "protoalign/mapnet.hpp"
#include "protoalign/prototypes.hpp"
#include "protoalign/rng.hpp"
#include "protoalign/scoring.hpp"

namespace protoalign {

/// One N-way K-shot task. Support and query lists are class-major, classes in
/// sampled order.
struct Episode {
  long n_way = 0;
  long k_shot = 0;
  long query_per_class = 0;
  std::vector<std::string> classes;
  std::vector<LabeledImage> support;
  std::vector<LabeledImage> query;
};

/// Draws N classes of `section` and, per class, K support then Q query images,
/// all uniformly without replacement. Throws DataError when the section has
/// fewer than N classes or a drawn class has fewer than K+Q images.
Episode sample_episode(std::span<const std::string> section, const VisualFeatureStore& store,
                       long n_way, long k_shot, long query, Rng& rng);

/// The on-disk assets an evaluation or fit needs.
struct DataBundle {
  EmbeddingTable text;
  VisualFeatureStore store;
  ClassSplit split;
};

struct BundlePaths {
  std::filesystem::path text;
  std::filesystem::path features;
  std::filesystem::path assignments;
  std::filesystem::path splits;

  /// text.cmv, features.cmv, assign.csv and splits.json under `dir`.
  static BundlePaths in_directory(const std::filesystem::path& dir);
};

/// Loads and cross-validates: every split class must have images and a text
/// embedding.
DataBundle load_bundle(const BundlePaths& paths);

struct EvalConfig {
  ScoringConfig scoring;
  long n_way = 5;
  long k_shot = 1;
  long query = 15;
  long episodes = 600;
  std::uint64_t seed = 0;
  std::string section = "novel";
  unsigned threads = 1;
};

struct EvalReport {
  std::vector<double> accuracies;  // indexed by episode
  double mean_accuracy = 0.0;
  double ci95_half_width = 0.0;
  EvalConfig config;

  /// Report JSON: mean_accuracy, ci95_half_width, episodes, seed, config,
  /// per_episode. The worker count is not part of the report.
  std::string to_json() const;
};

/// Accuracy of argmax classification per episode. Episode i draws from
/// derive_seed(seed, i), so the report does not depend on `threads`.
EvalReport evaluate(const EvalConfig& config, const DataBundle& data,
                    const ProjectionPair* pair = nullptr, const MapNet* net = nullptr);

/// Mean and 1.96·s/√n with the n−1 sample standard deviation.
std::pair<double, double> confidence_interval(std::span<const double> accuracies);

struct SweepConfig {
  std::vector<double> lambdas;
  std::vector<long> dims;
  AlignmentConfig alignment;  // d is taken from `dims`
  EvalConfig eval;            // variant forced to s3; lambda from `lambdas`
  std::string fit_section = "base";
};

struct SweepRow {
  double lambda = 0.0;
  long d = 0;
  EvalReport report;
};

/// One projection pair per d (fit on `fit_section`), one evaluation per
/// (λ, d), rows ordered d-major then λ in grid order.
std::vector<SweepRow> sweep(const SweepConfig& config, const DataBundle& data);

/// CSV with header lambda,d,mean_accuracy,ci95_half_width.
std::string sweep_csv(std::span<const SweepRow> rows);

struct SyntheticConfig {
  long classes = 100;
  long images_per_class = 30;
  long dim_text = 64;
  long dim_visual = 32;
  long rank = 0;  // rank of the text → visual map; 0 means min(dim_text, dim_visual)
  double signal = 1.0;
  double noise = 0.5;
  std::uint64_t seed = 0;
  // Section sizes; 0 selects 60% / 15% / remainder of `classes`.
  long base = 0;
  long val = 0;
};

/// Writes text.cmv, features.cmv, assign.csv, splits.json and generator.json.
///
/// Class c gets a text vector n_c ~ N(0, I). Its visual mean is
/// (signal·M·n_c + u_c)/√m_v, where M is a random rank-r map scaled so each
/// coordinate of M·n_c has unit variance and u_c ~ N(0, I) is a
/// text-independent offset. Images are mean + noise·z/√m_v with z ~ N(0, I).
void gen_synthetic(const SyntheticConfig& config, const std::filesystem::path& out_dir);

}  // namespace protoalign
