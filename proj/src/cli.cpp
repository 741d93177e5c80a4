#include "protoalign/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "protoalign/analysis.hpp"
#include "protoalign/cem.hpp"
#include "protoalign/data.hpp"
#include "protoalign/episodes.hpp"
#include "protoalign/errors.hpp"
#include "protoalign/mapnet.hpp"

namespace protoalign {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

struct DataFlags {
  std::string dir, text, features, assign, splits;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--data", dir, "Bundle directory (text.cmv, features.cmv, assign.csv, splits.json)");
    cmd->add_option("--text", text, "Class-name embeddings (CMVEC)");
    cmd->add_option("--features", features, "Image features (CMVEC)");
    cmd->add_option("--assign", assign, "Image-class assignments (CSV)");
    cmd->add_option("--splits", splits, "Class splits (JSON)");
  }

  BundlePaths resolve() const {
    BundlePaths p = dir.empty() ? BundlePaths{} : BundlePaths::in_directory(dir);
    if (!text.empty()) p.text = text;
    if (!features.empty()) p.features = features;
    if (!assign.empty()) p.assignments = assign;
    if (!splits.empty()) p.splits = splits;
    for (const auto& [path, flag] : {std::pair{p.text, "--text"}, std::pair{p.features, "--features"},
                                     std::pair{p.assignments, "--assign"},
                                     std::pair{p.splits, "--splits"}}) {
      if (path.empty()) throw UsageError(std::string("missing ") + flag + " (or --data)");
    }
    return p;
  }
};

struct EpisodeFlags {
  long n_way = 5, k_shot = 1, query = 15, episodes = 600;
  std::uint64_t seed = 0;
  unsigned threads = 1;
  std::string split = "novel";

  void add_to(CLI::App* cmd) {
    cmd->add_option("--n-way", n_way, "Classes per episode")->capture_default_str();
    cmd->add_option("--k-shot", k_shot, "Support images per class")->capture_default_str();
    cmd->add_option("--query", query, "Query images per class")->capture_default_str();
    cmd->add_option("--episodes", episodes, "Number of episodes")->capture_default_str();
    cmd->add_option("--seed", seed, "Master seed")->capture_default_str();
    cmd->add_option("--threads", threads, "Worker threads")->capture_default_str();
    cmd->add_option("--split", split, "Split section to sample from")
        ->check(CLI::IsMember({"base", "val", "novel"}))
        ->capture_default_str();
  }

  EvalConfig eval_config() const {
    EvalConfig c;
    c.n_way = n_way;
    c.k_shot = k_shot;
    c.query = query;
    c.episodes = episodes;
    c.seed = seed;
    c.threads = threads;
    c.section = split;
    return c;
  }
};

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

// Splices keys of a JSON config file into the argument list as flags,
// skipping any flag already given on the command line.
std::vector<std::string> apply_config(std::vector<std::string> args) {
  std::string config_path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) config_path = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) config_path = args[i].substr(9);
  }
  if (config_path.empty()) return args;

  std::ifstream in(config_path);
  if (!in) throw DataError("cannot open config " + config_path);
  json config;
  try {
    config = json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError(config_path, e.byte, "invalid JSON config");
  }
  if (!config.is_object()) throw FormatError(config_path, 0, "config must be a JSON object");

  auto given = [&args](const std::string& flag) {
    return std::any_of(args.begin(), args.end(), [&](const std::string& a) {
      return a == flag || a.rfind(flag + "=", 0) == 0;
    });
  };
  auto scalar = [&config_path](const json& v) -> std::string {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_number_integer()) return std::to_string(v.get<long long>());
    if (v.is_number()) return v.dump();
    throw FormatError(config_path, 0, "unsupported config value " + v.dump());
  };

  for (const auto& [key, value] : config.items()) {
    const std::string flag = "--" + key;
    if (key == "config" || given(flag)) continue;
    if (value.is_boolean()) {
      if (value.get<bool>()) args.push_back(flag);
    } else if (value.is_array()) {
      args.push_back(flag);
      for (const auto& item : value) args.push_back(scalar(item));
    } else {
      args.push_back(flag);
      args.push_back(scalar(value));
    }
  }
  return args;
}

void print_inspect(const fs::path& path, std::ostream& out) {
  const auto ext = path.extension().string();
  if (ext == ".json") {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    json j;
    try {
      j = json::parse(in);
    } catch (const json::parse_error& e) {
      throw FormatError(path.string(), e.byte, "invalid JSON");
    }
    out << path.string() << ": JSON " << (j.is_object() ? "object" : j.type_name());
    if (j.is_object()) {
      out << " keys=";
      bool first = true;
      for (const auto& [k, v] : j.items()) {
        out << (first ? "" : ",") << k;
        first = false;
      }
    }
    out << "\n";
    return;
  }
  if (ext == ".csv") {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    std::string header, line;
    std::getline(in, header);
    long rows = 0;
    while (std::getline(in, line)) {
      if (!line.empty()) ++rows;
    }
    out << path.string() << ": CSV header=" << header << " rows=" << rows << "\n";
    return;
  }

  const FileHeader h = read_header(path);
  if (h.magic == "CMV1") {
    // Full parse validates every record.
    const EmbeddingTable table = load_embeddings(path);
    out << path.string() << ": CMV1 records=" << h.first << " dim=" << h.second;
    if (table.size() > 0) out << " first=" << table.labels().front();
    out << "\n";
  } else {
    load_matrix(path);
    out << path.string() << ": CMM1 rows=" << h.first << " cols=" << h.second << "\n";
  }
}

}  // namespace

int run_cli(const std::vector<std::string>& raw_args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Cross-modal prototype alignment for few-shot classification", "protoalign"};
  app.require_subcommand(1);
  std::string config_path;
  app.add_option("--config", config_path, "JSON file of flag values; command-line flags win");
  app.fallthrough();

  // align
  auto* align = app.add_subcommand("align", "Fit a CCA / CCA+D projection pair on base classes");
  DataFlags align_data;
  align_data.add_to(align);
  std::string method = "cca+d", align_section = "base", align_out;
  long dim = 0;
  double eps_rel = linalg::kDefaultEpsRel;
  bool center = false;
  align->add_option("--method", method, "cca or cca+d")->capture_default_str();
  align->add_option("--dim", dim, "Target dimension d")->required();
  align->add_option("--eps-rel", eps_rel, "Relative eigenvalue floor")->capture_default_str();
  align->add_flag("--center", center, "Subtract column means before fitting");
  align->add_option("--split", align_section, "Split section to fit on")->capture_default_str();
  align->add_option("--out", align_out, "Output directory")->required();

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a scoring variant over sampled episodes");
  DataFlags eval_data;
  eval_data.add_to(eval);
  EpisodeFlags eval_episodes;
  eval_episodes.add_to(eval);
  std::string variant = "s1", proj_dir, net_dir, report_path;
  double lambda = 5.0;
  eval->add_option("--variant", variant, "s1, s2 or s3")->capture_default_str();
  eval->add_option("--lambda", lambda, "Weight of the textual term")->capture_default_str();
  eval->add_option("--proj", proj_dir, "Projection pair directory (s3)");
  eval->add_option("--net", net_dir, "MapNet checkpoint directory (s2)");
  eval->add_option("--report", report_path, "Report JSON path (stdout if omitted)");

  // train-map
  auto* train_map = app.add_subcommand("train-map", "Train the mapping network on base episodes");
  DataFlags train_data;
  train_data.add_to(train_map);
  EpisodeFlags train_episodes;
  train_episodes.episodes = 50000;
  train_episodes.split = "base";
  train_episodes.add_to(train_map);
  long hidden = 512, log_every = 100;
  double train_lambda = 5.0, lr = 1e-4;
  std::string order = "relu-bn", train_out, loss_csv;
  train_map->add_option("--hidden", hidden, "Hidden width")->capture_default_str();
  train_map->add_option("--order", order, "relu-bn or bn-relu")->capture_default_str();
  train_map->add_option("--lambda", train_lambda, "Weight of the textual term")->capture_default_str();
  train_map->add_option("--lr", lr, "Adam learning rate")->capture_default_str();
  train_map->add_option("--log-every", log_every, "Episodes per loss log line")->capture_default_str();
  train_map->add_option("--out", train_out, "Checkpoint directory")->required();
  train_map->add_option("--loss-csv", loss_csv, "Per-episode loss CSV");

  // sweep
  auto* sweep_cmd = app.add_subcommand("sweep", "Grid over lambda and d with s3 scoring");
  DataFlags sweep_data;
  sweep_data.add_to(sweep_cmd);
  EpisodeFlags sweep_episodes;
  sweep_episodes.split = "val";
  sweep_episodes.add_to(sweep_cmd);
  std::vector<double> lambda_grid{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  std::vector<long> dim_grid{25, 50, 100, 200};
  std::string sweep_method = "cca+d", sweep_out;
  double sweep_eps = linalg::kDefaultEpsRel;
  bool sweep_center = false;
  sweep_cmd->add_option("--lambda-grid", lambda_grid, "Lambda values")->capture_default_str();
  sweep_cmd->add_option("--dim-grid", dim_grid, "Dimension values")->capture_default_str();
  sweep_cmd->add_option("--method", sweep_method, "cca or cca+d")->capture_default_str();
  sweep_cmd->add_option("--eps-rel", sweep_eps, "Relative eigenvalue floor")->capture_default_str();
  sweep_cmd->add_flag("--center", sweep_center, "Subtract column means before fitting");
  sweep_cmd->add_option("--out", sweep_out, "CSV path (stdout if omitted)");

  // neighbors
  auto* neighbors = app.add_subcommand("neighbors", "Most similar class names to a target");
  std::string nb_text, nb_target, nb_proj, nb_csv;
  std::size_t nb_k = 5;
  neighbors->add_option("--text", nb_text, "Class-name embeddings (CMVEC)")->required();
  neighbors->add_option("--target", nb_target, "Target class")->required();
  neighbors->add_option("--k", nb_k, "Number of neighbors")->capture_default_str();
  neighbors->add_option("--proj", nb_proj, "Projection pair; compare n·A instead of n");
  neighbors->add_option("--csv", nb_csv, "Also write CSV here");

  // gen-synthetic
  auto* gen = app.add_subcommand("gen-synthetic", "Write a seeded synthetic data bundle");
  SyntheticConfig syn;
  std::string gen_out;
  gen->add_option("--classes", syn.classes)->capture_default_str();
  gen->add_option("--images-per-class", syn.images_per_class)->capture_default_str();
  gen->add_option("--dim-text", syn.dim_text)->capture_default_str();
  gen->add_option("--dim-vis", syn.dim_visual)->capture_default_str();
  gen->add_option("--rank", syn.rank, "Rank of the text-to-visual map (0 = full)")->capture_default_str();
  gen->add_option("--signal", syn.signal, "Text signal strength")->capture_default_str();
  gen->add_option("--noise", syn.noise, "Per-image noise level")->capture_default_str();
  gen->add_option("--seed", syn.seed)->capture_default_str();
  gen->add_option("--base", syn.base, "Base classes (0 = 60%)")->capture_default_str();
  gen->add_option("--val", syn.val, "Validation classes (0 = 15%)")->capture_default_str();
  gen->add_option("--out", gen_out, "Output directory")->required();

  // inspect
  auto* inspect = app.add_subcommand("inspect", "Print headers of data files");
  std::vector<std::string> inspect_files;
  inspect->add_option("files", inspect_files, "Files to inspect")->required();

  try {
    std::vector<std::string> args = apply_config(raw_args);
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(ErrorKind::usage);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(e.kind());
  }

  try {
    if (*align) {
      const DataBundle data = load_bundle(align_data.resolve());
      AlignmentConfig config{parse_align_method(method), dim, eps_rel, center};
      const ProjectionPair pair =
          fit_on_classes(data.text, data.store, data.split.section(align_section), config);
      save_pair(pair, align_out);
      out << "fit " << to_string(config.method) << " d=" << pair.d() << " on "
          << pair.class_count << " classes; top correlation " << pair.correlations[0] << "\n";
    } else if (*eval) {
      const DataBundle data = load_bundle(eval_data.resolve());
      EvalConfig config = eval_episodes.eval_config();
      config.scoring = {parse_score_variant(variant), lambda};
      std::optional<ProjectionPair> pair;
      std::optional<MapNet> net;
      if (config.scoring.variant == ScoreVariant::s3) {
        if (proj_dir.empty()) throw UsageError("variant s3 requires --proj");
        pair = load_pair(proj_dir);
      }
      if (config.scoring.variant == ScoreVariant::s2) {
        if (net_dir.empty()) throw UsageError("variant s2 requires --net");
        net = load_mapnet(net_dir);
      }
      const EvalReport report =
          evaluate(config, data, pair ? &*pair : nullptr, net ? &*net : nullptr);
      if (report_path.empty()) {
        out << report.to_json();
      } else {
        write_file(report_path, report.to_json());
        out << "mean accuracy " << report.mean_accuracy << " +/- " << report.ci95_half_width
            << " over " << report.accuracies.size() << " episodes\n";
      }
    } else if (*train_map) {
      const DataBundle data = load_bundle(train_data.resolve());
      MapNet net(static_cast<long>(data.text.dim()), static_cast<long>(data.store.dim()), hidden,
                 derive_seed(train_episodes.seed, ~std::uint64_t{0}), parse_hidden_order(order));
      AdamState adam;
      TrainConfig config;
      config.episodes = train_episodes.episodes;
      config.n_way = train_episodes.n_way;
      config.k_shot = train_episodes.k_shot;
      config.query = train_episodes.query;
      config.lambda = train_lambda;
      config.learning_rate = lr;
      config.seed = train_episodes.seed;
      config.log_every = log_every;
      config.section = train_episodes.split;
      const TrainResult result = train(net, adam, config, data.store, data.split, data.text,
                                       [&out](long episode, double loss) {
                                         out << "episode " << episode << " loss " << loss << "\n";
                                       });
      net.mode = MapNet::Mode::eval;
      save_mapnet(net, adam, train_out);
      if (!loss_csv.empty()) {
        std::ostringstream csv;
        csv.precision(17);
        csv << "episode,loss\n";
        for (std::size_t i = 0; i < result.losses.size(); ++i) csv << i + 1 << "," << result.losses[i] << "\n";
        write_file(loss_csv, csv.str());
      }
    } else if (*sweep_cmd) {
      const DataBundle data = load_bundle(sweep_data.resolve());
      SweepConfig config;
      config.lambdas = lambda_grid;
      config.dims = dim_grid;
      config.alignment = {parse_align_method(sweep_method), 1, sweep_eps, sweep_center};
      config.eval = sweep_episodes.eval_config();
      const auto csv = sweep_csv(sweep(config, data));
      if (sweep_out.empty()) {
        out << csv;
      } else {
        write_file(sweep_out, csv);
      }
    } else if (*neighbors) {
      const EmbeddingTable table = load_embeddings(nb_text);
      std::optional<ProjectionPair> pair;
      if (!nb_proj.empty()) pair = load_pair(nb_proj);
      const auto result = nearest_classes(table, nb_target, nb_k, pair ? &*pair : nullptr);
      out << format_neighbors(nb_target, result);
      if (!nb_csv.empty()) write_file(nb_csv, neighbors_csv(result));
    } else if (*gen) {
      gen_synthetic(syn, gen_out);
      out << "wrote synthetic bundle to " << gen_out << "\n";
    } else if (*inspect) {
      for (const auto& file : inspect_files) print_inspect(file, out);
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(e.kind());
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(ErrorKind::data);
  }
  return 0;
}

}  // namespace protoalign
