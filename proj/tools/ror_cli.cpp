// ror: build, analyze, train, evaluate and plot residual networks with nested shortcut levels.

#include <CLI11.hpp>
#include <json.hpp>

#include <Eigen/Core>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "ror/analysis.hpp"
#include "ror/checkpoint.hpp"
#include "ror/data.hpp"
#include "ror/plot.hpp"
#include "ror/train.hpp"

#ifndef ROR_VERSION
#define ROR_VERSION "0.0.0"
#endif

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

enum ExitCode { kOk = 0, kOther = 1, kConfig = 2, kIo = 3, kNumeric = 4 };

struct ArchFlags {
  std::string config_file;
  std::string family, order, block_size, final_shortcut, upper_shortcut, blocks_per_group;
  std::optional<int> depth, wrn, width, levels, classes, input_size;
  std::optional<double> pL;

  void add(CLI::App& app) {
    app.add_option("--config", config_file, "key=value file with architecture/training keys");
    app.add_option("--family", family, "cifar|imagenet");
    app.add_option("--depth", depth, "ResNet-style depth (6n+2 for b33, 9n+2 for b333)");
    app.add_option("--wrn", wrn, "WRN-style depth (6n+4)");
    app.add_option("--width", width, "width multiplier k");
    app.add_option("--levels", levels, "shortcut levels m (1 = plain ResNet)");
    app.add_option("--order", order, "post|pre");
    app.add_option("--block-size", block_size, "b33|b333|bottleneck");
    app.add_option("--blocks-per-group", blocks_per_group, "explicit blocks per group, e.g. 2,2,2");
    app.add_option("--final-shortcut", final_shortcut, "A|B");
    app.add_option("--upper-shortcut", upper_shortcut, "A|B");
    app.add_option("--classes", classes, "number of classes");
    app.add_option("--input-size", input_size, "input resolution");
    app.add_option("--pL", pL, "stochastic-depth survival probability of the last block");
  }

  ror::ArchConfig resolve(ror::TrainConfig* train = nullptr) const {
    ror::ArchConfig c;
    if (!config_file.empty()) load_config_file(config_file, c, train);
    auto set = [&](const char* key, const std::string& v) { ror::set_arch_field(c, key, v); };
    if (!family.empty()) set("family", family);
    if (depth) c.depth = *depth;
    if (wrn) {
      c.depth = *wrn;
      c.naming = ror::DepthNaming::wrn;
    }
    if (width) c.width_k = *width;
    if (levels) c.levels_m = *levels;
    if (!order.empty()) set("block_order", order == "pre" ? "pre_act" : order == "post" ? "post_act" : order);
    if (!block_size.empty()) set("block_size", block_size);
    if (!blocks_per_group.empty()) {
      set("blocks_per_group", blocks_per_group);
      if (!depth && !wrn) c.depth.reset();
    }
    if (!final_shortcut.empty()) set("final_shortcut", final_shortcut);
    if (!upper_shortcut.empty()) set("upper_shortcut", upper_shortcut);
    if (classes) c.num_classes = *classes;
    if (input_size) c.input_size = *input_size;
    if (pL) c.sd_p_L = *pL;
    return c;
  }

  static void load_config_file(const std::string& path, ror::ArchConfig& arch, ror::TrainConfig* train) {
    std::ifstream in(path);
    if (!in) throw ror::IoError("cannot open config file " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw ror::ConfigError(path + ":" + std::to_string(lineno) + ": expected key=value");
      }
      auto strip = [](std::string s) {
        s.erase(0, s.find_first_not_of(" \t\r"));
        s.erase(s.find_last_not_of(" \t\r") + 1);
        return s;
      };
      const std::string key = strip(line.substr(0, eq)), value = strip(line.substr(eq + 1));
      bool known = ror::set_arch_field(arch, key, value);
      if (train && (!known || key == "sd.p_L")) {
        ror::set_train_field(*train, key, value);
        known = true;
      }
      if (!known) throw ror::ConfigError(path + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
  }
};

struct DataFlags {
  bool synthetic = false;
  std::string data_dir;
  std::string variant = "c10";
  std::string difficulty = "easy";
  int samples = 500;
  int test_samples = 200;
  std::uint64_t data_seed = 1;

  void add(CLI::App& app) {
    app.add_flag("--synthetic", synthetic, "use the synthetic class-conditional dataset");
    app.add_option("--data", data_dir, "directory with CIFAR binary files");
    app.add_option("--variant", variant, "c10|c100");
    app.add_option("--difficulty", difficulty, "easy|medium|hard (synthetic)");
    app.add_option("--samples", samples, "synthetic training samples");
    app.add_option("--test-samples", test_samples, "synthetic test samples");
    app.add_option("--data-seed", data_seed, "synthetic dataset seed");
  }

  json to_json(int classes) const {
    json j;
    if (synthetic) {
      j["kind"] = "synthetic";
      j["classes"] = classes;
      j["difficulty"] = difficulty;
      j["samples"] = samples;
      j["test_samples"] = test_samples;
      j["seed"] = data_seed;
    } else {
      j["kind"] = "cifar";
      j["dir"] = fs::absolute(data_dir).string();
      j["variant"] = variant;
    }
    return j;
  }

  static DataFlags from_json(const json& j) {
    DataFlags f;
    if (j.at("kind") == "synthetic") {
      f.synthetic = true;
      f.difficulty = j.at("difficulty").get<std::string>();
      f.samples = j.at("samples").get<int>();
      f.test_samples = j.at("test_samples").get<int>();
      f.data_seed = j.at("seed").get<std::uint64_t>();
    } else {
      f.data_dir = j.at("dir").get<std::string>();
      f.variant = j.at("variant").get<std::string>();
    }
    return f;
  }

  std::pair<ror::Dataset, ror::Dataset> load(int classes, int image_size) const {
    if (synthetic) {
      const auto d = ror::parse_difficulty(difficulty);
      return {ror::synthetic_dataset(data_seed, classes, samples, d, "train", image_size),
              ror::synthetic_dataset(data_seed, classes, test_samples, d, "test", image_size)};
    }
    if (data_dir.empty()) throw ror::ConfigError("either --synthetic or --data DIR is required");
    if (variant != "c10" && variant != "c100") throw ror::ConfigError("--variant must be c10 or c100");
    return ror::load_cifar(data_dir, variant == "c10" ? ror::CifarVariant::c10 : ror::CifarVariant::c100);
  }
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ror::IoError("cannot write " + path.string());
  out << text;
  if (!out) throw ror::IoError("short write to " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ror::IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

int cmd_build(const ArchFlags& flags, const std::string& dump_ir) {
  const ror::Graph g = ror::build_graph(flags.resolve());
  const ror::ParamReport params = ror::count_params(g);
  std::cout << ror::describe(g.plan);
  std::printf("parameters: %lld (%.1fM)\n", static_cast<long long>(params.total), params.millions());
  if (!dump_ir.empty()) {
    write_text(dump_ir, ror::to_jsonl(g));
    std::cout << "wrote " << g.nodes.size() << " nodes to " << dump_ir << "\n";
  }
  return kOk;
}

int cmd_analyze(const ArchFlags& flags, bool params, bool paths, bool expected, const std::string& format) {
  if (format != "text" && format != "csv") throw ror::ConfigError("--format must be text or csv");
  const bool csv = format == "csv";
  ror::ArchConfig config = flags.resolve();
  std::optional<double> pL = config.sd_p_L;
  if (expected && !pL) throw ror::ConfigError("--expected-depth needs --pL");
  const ror::Graph g = ror::build_graph(config);
  if (!params && !paths && !expected) params = true;
  if (params) {
    const ror::ParamReport r = ror::count_params(g);
    std::cout << (csv ? r.csv() : r.table());
  }
  if (paths) {
    const ror::PathStats s = ror::count_paths(g);
    std::cout << (csv ? s.csv() : s.table());
  }
  if (expected) {
    const int blocks = g.plan.total_blocks();
    const double e = ror::expected_active_blocks(ror::survival_schedule(blocks, *pL));
    if (csv) {
      std::printf("p_L,blocks,expected_active,expected_saving\n%.17g,%d,%.17g,%.17g\n", *pL, blocks, e,
                  1.0 - e / blocks);
    } else {
      std::printf("expected active blocks: %g of %d (p_L=%g, expected compute saving %.2f%%)\n", e, blocks, *pL,
                  100.0 * (1.0 - e / blocks));
    }
  }
  return kOk;
}

struct TrainFlags {
  std::optional<int> epochs, batch_size;
  std::optional<double> lr;
  std::string milestones;
  std::uint64_t seed = 0;
  bool no_augment = false;
  std::string out_dir;
  int threads = 1;
};

json stats_json(const ror::ChannelStats& s) {
  return json{{"per_channel", true}, {"source_split", s.source_split}, {"mean", s.mean}, {"std", s.std}};
}

int cmd_train(const ArchFlags& arch_flags, const DataFlags& data_flags, const TrainFlags& tf) {
  if (tf.out_dir.empty()) throw ror::ConfigError("--out-dir is required");
  ror::TrainConfig tc;
  tc.seed = tf.seed;
  ror::ArchConfig arch = arch_flags.resolve(&tc);
  if (tf.epochs) {
    tc.max_epochs = *tf.epochs;
    if (tf.milestones.empty() && arch_flags.config_file.empty()) {
      // Keep the 50% / 75% positions of the 500-epoch protocol.
      tc.milestones.clear();
      for (int m : {*tf.epochs / 2, *tf.epochs * 3 / 4}) {
        if (m > 0 && m < *tf.epochs && (tc.milestones.empty() || m > tc.milestones.back())) tc.milestones.push_back(m);
      }
    }
  }
  if (!tf.milestones.empty()) ror::set_train_field(tc, "milestones", tf.milestones);
  if (tf.batch_size) tc.batch_size = *tf.batch_size;
  if (tf.lr) tc.base_lr = *tf.lr;
  if (tf.no_augment) tc.augmentation = {false, false};
  if (arch_flags.pL) tc.sd_p_L = arch_flags.pL;
  if (tc.sd_p_L) arch.sd_p_L = tc.sd_p_L;
  tc.validate();

  auto [train, test] = data_flags.load(arch.num_classes, arch.input_size ? arch.input_size : 32);
  if (train.class_count != arch.num_classes) {
    throw ror::ConfigError("dataset has " + std::to_string(train.class_count) + " classes but num_classes=" +
                           std::to_string(arch.num_classes));
  }
  const std::string train_digest = train.digest, test_digest = test.digest;
  const ror::ChannelStats stats = ror::normalize_dataset(train, test);

  ror::Model<float> model = ror::build<float>(arch, tc.seed);
  fs::create_directories(tf.out_dir);
  const fs::path out(tf.out_dir);

  json manifest;
  manifest["tool"] = "ror";
  manifest["version"] = ROR_VERSION;
  manifest["precision"] = "f32";
  manifest["threads"] = tf.threads;
  manifest["arch_config"] = ror::to_text(arch);
  manifest["train_config"] = ror::to_text(tc);
  manifest["seeds"] = {{"init", tc.seed}, {"train", tc.seed}, {"data", data_flags.data_seed}};
  manifest["dataset"] = data_flags.to_json(arch.num_classes);
  manifest["dataset"]["train_digest"] = train_digest;
  manifest["dataset"]["test_digest"] = test_digest;
  manifest["normalization"] = stats_json(stats);
  manifest["outputs"] = {"metrics.csv", "final.ckpt"};
  write_text(out / "manifest.json", manifest.dump(2) + "\n");

  ror::TrainHooks hooks;
  hooks.checkpoint_dir = out;
  hooks.on_epoch = [](const ror::MetricsRow& r) {
    std::printf("epoch %3d  loss %.4f  train_err %6.2f%%  test_err %6.2f%%  lr %g  %.1fs\n", r.epoch, r.train_loss,
                r.train_err, r.test_err, r.lr, r.wall_seconds);
    std::fflush(stdout);
  };
  ror::MetricsLog log;
  try {
    log = ror::train(model, train, test, tc, hooks);
  } catch (...) {
    write_text(out / "metrics.csv", log.csv());
    throw;
  }
  write_text(out / "metrics.csv", log.csv());
  const ror::MetricsRow& last = log.rows.back();
  std::printf("final train accuracy %.2f%%, test error %s%%\n", 100.0 - last.train_err, percent(last.test_err).c_str());
  return kOk;
}

int cmd_eval(const std::string& checkpoint, std::string manifest_path, const DataFlags& data_flags, bool data_given) {
  const ror::Checkpoint ckpt = ror::load_checkpoint(checkpoint);
  ror::Model<float> model = ror::load_model<float>(ckpt);
  if (manifest_path.empty()) {
    const fs::path beside = fs::path(checkpoint).parent_path() / "manifest.json";
    if (fs::exists(beside)) manifest_path = beside.string();
  }
  DataFlags flags = data_flags;
  std::optional<ror::ChannelStats> stats;
  if (!manifest_path.empty()) {
    const json m = json::parse(read_text(manifest_path));
    if (!data_given) flags = DataFlags::from_json(m.at("dataset"));
    ror::ChannelStats s;
    s.mean = m.at("normalization").at("mean").get<std::vector<double>>();
    s.std = m.at("normalization").at("std").get<std::vector<double>>();
    s.source_split = m.at("normalization").at("source_split").get<std::string>();
    stats = s;
  }
  const ror::ArchConfig& arch = model.graph.plan.config;
  auto [train, test] = flags.load(arch.num_classes, model.graph.plan.input_size);
  if (!stats) stats = ror::channel_stats(train);
  ror::apply_normalization(test, *stats);
  const double err = ror::evaluate(model, test);
  std::printf("test error: %s%%\n", percent(err).c_str());
  return kOk;
}

int cmd_plot(const std::vector<std::string>& files, const std::vector<std::string>& labels, const std::string& output,
             int window) {
  if (!labels.empty() && labels.size() != files.size()) throw ror::ConfigError("--label count must match CSV count");
  std::vector<ror::Series> series;
  for (std::size_t i = 0; i < files.size(); ++i) {
    const ror::MetricsLog log = ror::MetricsLog::parse_csv(read_text(files[i]));
    const std::string label = labels.empty() ? fs::path(files[i]).stem().string() : labels[i];
    series.push_back(ror::test_error_series(log, label));
  }
  write_text(output, ror::render_svg(series, window));
  std::cout << "wrote " << output << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Residual networks with nested shortcut levels: build, analyze, train, evaluate, plot"};
  app.require_subcommand(1);
  app.set_version_flag("--version", ROR_VERSION);
  int threads = 1;
  app.add_option("--threads", threads, "threads for numeric primitives")->check(CLI::PositiveNumber);

  ArchFlags build_flags, analyze_flags, train_arch;
  std::string dump_ir;
  auto* build = app.add_subcommand("build", "print the resolved plan and parameter total");
  build_flags.add(*build);
  build->add_option("--dump-ir", dump_ir, "write the graph as JSON lines");

  bool want_params = false, want_paths = false, want_expected = false;
  std::string format = "text";
  auto* analyze = app.add_subcommand("analyze", "parameter, path and expected-depth reports");
  analyze_flags.add(*analyze);
  analyze->add_flag("--params", want_params, "parameter counts by scope");
  analyze->add_flag("--paths", want_paths, "path count and length histogram");
  analyze->add_flag("--expected-depth", want_expected, "expected active blocks under stochastic depth");
  analyze->add_option("--format", format, "text|csv");

  DataFlags train_data;
  TrainFlags tf;
  auto* train = app.add_subcommand("train", "train on CIFAR or the synthetic set");
  train_arch.add(*train);
  train_data.add(*train);
  train->add_option("--epochs", tf.epochs, "max epochs (milestones default to 50% and 75%)");
  train->add_option("--batch-size", tf.batch_size, "mini-batch size");
  train->add_option("--lr", tf.lr, "base learning rate");
  train->add_option("--milestones", tf.milestones, "comma-separated epochs");
  train->add_option("--seed", tf.seed, "initialization, shuffling, augmentation and gate seed");
  train->add_flag("--no-augment", tf.no_augment, "disable crop and flip");
  train->add_option("--out-dir", tf.out_dir, "output directory")->required();

  std::string checkpoint, manifest;
  DataFlags eval_data;
  auto* eval = app.add_subcommand("eval", "top-1 test error of a checkpoint");
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--manifest", manifest, "run manifest (default: beside the checkpoint)");
  eval_data.add(*eval);

  std::vector<std::string> csvs, labels;
  std::string output;
  int window = 5;
  auto* plot = app.add_subcommand("plot", "smoothed test error curves as SVG");
  plot->add_option("csv", csvs, "metrics CSV files")->required()->check(CLI::ExistingFile);
  plot->add_option("-o,--output", output, "SVG path")->required();
  plot->add_option("--window", window, "moving-average window")->check(CLI::PositiveNumber);
  plot->add_option("--label", labels, "series labels in CSV order");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  Eigen::setNbThreads(threads);
  tf.threads = threads;
  try {
    if (*build) return cmd_build(build_flags, dump_ir);
    if (*analyze) return cmd_analyze(analyze_flags, want_params, want_paths, want_expected, format);
    if (*train) return cmd_train(train_arch, train_data, tf);
    if (*eval) {
      const bool data_given = eval_data.synthetic || !eval_data.data_dir.empty();
      return cmd_eval(checkpoint, manifest, eval_data, data_given);
    }
    if (*plot) return cmd_plot(csvs, labels, output, window);
  } catch (const ror::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const ror::IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const ror::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "i/o error: malformed manifest: " << e.what() << "\n";
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kOther;
  }
  return kOther;
}
