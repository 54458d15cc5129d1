// epc: synthesize data, train, distill, evaluate, benchmark and export.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 data error,
// 3 numeric failure (non-finite loss).

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "epc/binary_io.hpp"
#include "epc/dataset.hpp"
#include "epc/evaluation.hpp"
#include "epc/models.hpp"
#include "epc/run_config.hpp"
#include "epc/training.hpp"

namespace {

using namespace epc;

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

/// Thrown for errors the user fixes on the command line.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config_file;
  std::vector<std::string> assignments;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_file, "key=value configuration file");
    cmd->add_option("--set", assignments, "dotted key=value override (repeatable)");
  }

  RunConfig load() const {
    RunConfig rc;
    if (!config_file.empty()) rc.load_file(config_file);
    for (const auto& a : assignments) rc.set(a);
    return rc;
  }
};

EpcNetConfig preset(const std::string& name) {
  if (name == "epcnet") return EpcNetConfig::epcnet();
  if (name == "epcnet-l") return EpcNetConfig::epcnet_l();
  throw UsageError("--model must be epcnet or epcnet-l, got '" + name + "'");
}

std::ostream& log_stream(const std::string& path, std::ofstream& file) {
  if (path.empty()) return std::cout;
  file.open(path);
  if (!file) throw UsageError("cannot open log file " + path);
  return file;
}

std::vector<std::size_t> parse_list(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream in(text);
  for (std::string item; std::getline(in, item, ',');) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoul(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError("expected a comma-separated list of integers, got '" + text + "'");
    }
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  epc::tune_allocator();
  CLI::App app{"Point-cloud place recognition: proxy-conv backbones, G-VLAD descriptors, distillation"};
  app.require_subcommand(1);

  // synth ---------------------------------------------------------------------
  Common synth_common;
  std::string synth_out;
  std::optional<std::size_t> places, traversals, points;
  std::optional<std::uint64_t> synth_seed;
  std::optional<double> noise, dropout, spacing;
  std::optional<std::string> rotation;
  auto* synth = app.add_subcommand("synth", "generate a synthetic submap dataset");
  synth_common.attach(synth);
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--places", places, "number of places");
  synth->add_option("--traversals", traversals, "observations per place");
  synth->add_option("--points", points, "points per submap");
  synth->add_option("--seed", synth_seed, "random seed");
  synth->add_option("--noise", noise, "per-coordinate noise sigma (m)");
  synth->add_option("--dropout", dropout, "fraction of points dropped and refilled");
  synth->add_option("--spacing", spacing, "grid spacing between places (m)");
  synth->add_option("--rotation", rotation, "none or yaw");

  // train / distill -------------------------------------------------------------
  Common train_common;
  std::string train_data, train_out = "model.ckpt", train_log, train_model = "epcnet";
  std::optional<std::size_t> train_epochs;
  std::optional<std::uint64_t> train_seed;
  std::optional<double> train_lr;
  auto* train = app.add_subcommand("train", "train a network with the lazy quadruplet loss");
  train_common.attach(train);
  train->add_option("--data", train_data, "index.csv of the dataset")->required();
  train->add_option("--model", train_model, "epcnet or epcnet-l");
  train->add_option("--epochs", train_epochs, "training epochs");
  train->add_option("--seed", train_seed, "random seed");
  train->add_option("--lr", train_lr, "learning rate");
  train->add_option("--out", train_out, "checkpoint path");
  train->add_option("--log", train_log, "per-epoch log file (default: stdout)");

  Common distill_common;
  std::string distill_data, distill_teacher, distill_out = "student.ckpt", distill_log, distill_model = "epcnet-l";
  std::optional<std::size_t> distill_epochs;
  std::optional<std::uint64_t> distill_seed;
  std::optional<double> distill_lr, distill_lambda;
  auto* distill = app.add_subcommand("distill", "train a student against a frozen teacher");
  distill_common.attach(distill);
  distill->add_option("--data", distill_data, "index.csv of the dataset")->required();
  distill->add_option("--teacher", distill_teacher, "teacher checkpoint");
  distill->add_option("--model", distill_model, "student architecture: epcnet or epcnet-l");
  distill->add_option("--lambda", distill_lambda, "weight of the SSE distillation term");
  distill->add_option("--epochs", distill_epochs, "training epochs");
  distill->add_option("--seed", distill_seed, "random seed");
  distill->add_option("--lr", distill_lr, "learning rate");
  distill->add_option("--out", distill_out, "checkpoint path");
  distill->add_option("--log", distill_log, "per-epoch log file (default: stdout)");

  // eval / export -----------------------------------------------------------------
  Common eval_common;
  std::string eval_data, eval_ckpt, eval_report;
  std::optional<double> eval_radius;
  std::optional<std::size_t> eval_max_k;
  auto* eval = app.add_subcommand("eval", "recall@K of query submaps against the database");
  eval_common.attach(eval);
  eval->add_option("--data", eval_data, "index.csv of the dataset")->required();
  eval->add_option("--checkpoint", eval_ckpt, "model checkpoint")->required();
  eval->add_option("--radius", eval_radius, "success radius (m)");
  eval->add_option("--max-k", eval_max_k, "report recall@1..max-k");
  eval->add_option("--report", eval_report, "also write the JSON report here");

  std::string export_data, export_ckpt, export_out, export_split = "database";
  auto* exp = app.add_subcommand("export", "write descriptors of one split as an EPCD file");
  exp->add_option("--data", export_data, "index.csv of the dataset")->required();
  exp->add_option("--checkpoint", export_ckpt, "model checkpoint")->required();
  exp->add_option("--split", export_split, "database, query or train");
  exp->add_option("--out", export_out, "output .epcd path")->required();

  // bench -------------------------------------------------------------------------
  Common bench_common;
  std::string bench_model = "epcnet", bench_groups;
  std::size_t bench_points = 4096;
  auto* bench = app.add_subcommand("bench", "parameter, FLOP and activation-memory accounting");
  bench_common.attach(bench);
  bench->add_option("--model", bench_model, "epcnet or epcnet-l");
  bench->add_option("--groups", bench_groups, "comma-separated GFC group counts for a parameter table");
  bench->add_option("--points", bench_points, "points per cloud");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*synth) {
      ResolvedConfig cfg = synth_common.load().resolve();
      if (places) cfg.synth.places = *places;
      if (traversals) cfg.synth.traversals = *traversals;
      if (points) cfg.synth.points = *points;
      if (synth_seed) cfg.synth.seed = *synth_seed;
      if (noise) cfg.synth.noise_sigma = *noise;
      if (dropout) cfg.synth.dropout = *dropout;
      if (spacing) cfg.synth.grid_spacing = *spacing;
      if (rotation) cfg.synth.set("rotation", *rotation);
      generate_synthetic(cfg.synth, synth_out);
      std::cout << (std::filesystem::path(synth_out) / "index.csv").string() << '\n';
      return kOk;
    }

    if (*train) {
      ResolvedConfig base;
      base.model = preset(train_model);
      ResolvedConfig cfg = train_common.load().resolve(base);
      if (train_epochs) cfg.train.epochs = *train_epochs;
      if (train_seed) cfg.train.seed = *train_seed;
      if (train_lr) cfg.optim.learning_rate = *train_lr;
      const Dataset data = Dataset::load(train_data);
      EpcModel<float> model(cfg.model, cfg.train.seed);
      std::ofstream log_file;
      TrainOptions options = cfg.train_options();
      options.log = &log_stream(train_log, log_file);
      train_teacher(model, data, options);
      save_checkpoint(train_out, model);
      std::cerr << "wrote " << train_out << '\n';
      return kOk;
    }

    if (*distill) {
      if (distill_teacher.empty()) throw UsageError("distill: --teacher <checkpoint> is required");
      if (!std::filesystem::exists(distill_teacher)) {
        throw UsageError("distill: --teacher checkpoint '" + distill_teacher + "' does not exist");
      }
      ResolvedConfig base;
      base.model = preset(distill_model);
      ResolvedConfig cfg = distill_common.load().resolve(base);
      if (distill_epochs) cfg.train.epochs = *distill_epochs;
      if (distill_seed) cfg.train.seed = *distill_seed;
      if (distill_lr) cfg.optim.learning_rate = *distill_lr;
      if (distill_lambda) cfg.loss.lambda = *distill_lambda;
      const Dataset data = Dataset::load(distill_data);
      EpcModel<float> teacher = load_checkpoint(distill_teacher);
      EpcModel<float> student(cfg.model, cfg.train.seed);
      std::ofstream log_file;
      TrainOptions options = cfg.train_options();
      options.log = &log_stream(distill_log, log_file);
      train_student_distill(student, teacher, data, options);
      save_checkpoint(distill_out, student);
      std::cerr << "wrote " << distill_out << '\n';
      return kOk;
    }

    if (*eval) {
      ResolvedConfig cfg = eval_common.load().resolve();
      if (eval_radius) cfg.eval.radius = *eval_radius;
      if (eval_max_k) cfg.eval.max_k = *eval_max_k;
      if (cfg.eval.max_k == 0) throw UsageError("eval: --max-k must be >= 1");
      const SubmapIndex index = load_index(eval_data);
      EpcModel<float> model = load_checkpoint(eval_ckpt);
      const DescriptorTable db = build_descriptor_db(model, index, Split::database);
      const DescriptorTable queries = build_descriptor_db(model, index, Split::query);
      std::vector<std::size_t> ks;
      for (std::size_t k = 1; k <= cfg.eval.max_k; ++k) ks.push_back(k);
      const std::string json = to_json(evaluate(db, queries, index, ks, cfg.eval.radius));
      std::cout << json << '\n';
      if (!eval_report.empty()) {
        std::ofstream out(eval_report);
        out << json << '\n';
        if (!out) throw std::runtime_error("failed writing " + eval_report);
      }
      return kOk;
    }

    if (*exp) {
      const SubmapIndex index = load_index(export_data);
      EpcModel<float> model = load_checkpoint(export_ckpt);
      Split split;
      try {
        split = parse_split(export_split);
      } catch (const std::invalid_argument& e) {
        throw UsageError(std::string("export: ") + e.what());
      }
      save_descriptors(export_out, build_descriptor_db(model, index, split));
      std::cout << export_out << '\n';
      return kOk;
    }

    if (*bench) {
      ResolvedConfig base;
      base.model = preset(bench_model);
      const ResolvedConfig cfg = bench_common.load().resolve(base);
      const EpcNetConfig& m = cfg.model;
      const MemoryModelReport mem = memory_model(bench_points, m.k, m.width, m.modules);
      std::cout << std::fixed;
      std::cout << "memory model (n=" << bench_points << ", k=" << m.k << ", d=" << m.width << ", m=" << m.modules
                << ")\n";
      std::cout << "  proxy_elements " << mem.proxy_elements << "\n  edge_elements  " << mem.edge_elements
                << "\n  ratio          " << std::setprecision(4) << mem.ratio << "\n";
      const CostReport cost = count_flops(m, bench_points);
      std::cout << "model " << bench_model << " (head " << to_string(m.head) << ")\n"
                << "  parameters     " << cost.parameter_count << " (" << std::setprecision(2)
                << cost.parameter_count / 1e6 << "M)\n"
                << "  flops          " << cost.flop_count << " (" << cost.flop_count / 1e9 << "G)\n"
                << "  activations    " << cost.activation_elements << "\n";
      if (!bench_groups.empty()) {
        if (m.head != HeadKind::g_vlad) throw UsageError("bench: --groups needs a G-VLAD model");
        std::cout << "groups,parameters,millions,gfc_parameters\n";
        for (std::size_t g : parse_list(bench_groups)) {
          EpcNetConfig c = m;
          c.groups = g;
          const std::size_t p = count_params(c);
          std::cout << g << ',' << p << ',' << std::setprecision(2) << p / 1e6 << ','
                    << gfc_param_count(c.clusters, c.mlp_width, c.output_dim, g) << '\n';
        }
      }
      return kOk;
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  }
  return kUsage;
}
