#include "dppkit/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "dppkit/train.hpp"

namespace dppkit {

namespace fs = std::filesystem;

namespace {

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

fs::path data_dir_or_env(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("DPP_DATA_DIR"); env && *env) return env;
  throw CLI::ValidationError("--data-dir", "no MNIST directory given (use --data-dir or set DPP_DATA_DIR)");
}

bool has_magic(const fs::path& path, const char* magic) {
  std::ifstream in(path, std::ios::binary);
  char buf[4] = {};
  in.read(buf, 4);
  return in && std::equal(buf, buf + 4, magic);
}

void print_report(std::ostream& out, const SparseModel& m, bool json) {
  const auto total = m.report();
  std::size_t file_bytes = 0;
  for (const auto& info : m.info) file_bytes += info.file_bytes;
  if (json) {
    for (std::size_t l = 0; l < m.info.size(); ++l) {
      const auto& info = m.info[l];
      MaskGeometry geo(m.model.layers[l].kind, info.original, info.pruning);
      nlohmann::json row{{"layer", l + 1},
                         {"kind", std::string(to_string(geo.kind()))},
                         {"granularity", std::string(to_string(info.pruning.level))},
                         {"k", info.pruning.k},
                         {"n_in", info.original.n_in},
                         {"a", info.original.kernel_area()},
                         {"n_out", info.original.n_out},
                         {"P", info.original.weight_count()},
                         {"S", geo.active_weights()},
                         {"stored_values", geo.stored_values()},
                         {"file_bytes", info.file_bytes}};
      out << row.dump() << '\n';
    }
    nlohmann::json summary{{"layer", "total"},
                           {"architecture", std::string(to_string(m.model.arch))},
                           {"P", total.dense_params},
                           {"S", total.active},
                           {"b", total.bits},
                           {"stored_values", total.stored_values},
                           {"remaining_percent", 100.0 * total.remaining()},
                           {"compression_rate", total.rate()},
                           {"file_bytes", file_bytes}};
    out << summary.dump() << '\n';
    return;
  }
  out << "layer,kind,granularity,k,n_in,a,n_out,P,S,b,stored_values,remaining_percent,compression_rate,file_bytes\n";
  for (std::size_t l = 0; l < m.info.size(); ++l) {
    const auto& info = m.info[l];
    MaskGeometry geo(m.model.layers[l].kind, info.original, info.pruning);
    const MaskGeometry one[] = {geo};
    const auto r = compression_report(one, m.bits);
    out << l + 1 << ',' << to_string(geo.kind()) << ',' << to_string(info.pruning.level) << ',' << info.pruning.k << ','
        << info.original.n_in << ',' << info.original.kernel_area() << ',' << info.original.n_out << ','
        << r.dense_params << ',' << r.active << ',' << r.bits << ',' << r.stored_values << ','
        << fixed(100.0 * r.remaining(), 4) << ',' << fixed(r.rate(), 4) << ',' << info.file_bytes << '\n';
  }
  out << "total," << to_string(m.model.arch) << ",,,,,," << total.dense_params << ',' << total.active << ','
      << total.bits << ',' << total.stored_values << ',' << fixed(100.0 * total.remaining(), 4) << ','
      << fixed(total.rate(), 4) << ',' << file_bytes << '\n';
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Dynamic probabilistic pruning toolkit", "dppkit"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  std::string config_path, data_dir, out_dir, model_path, state_path, export_out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs, train_limit, test_limit;
  std::size_t samples = 100;
  bool json = false, quiet = false;

  auto* train_cmd = app.add_subcommand("train", "train a pruned network, write metrics.csv, model.dpps and state.dpst");
  train_cmd->add_option("--config", config_path, "run configuration (key = value lines)")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--seed", seed, "master seed (overrides the config)");
  train_cmd->add_option("--data-dir", data_dir, "directory with the MNIST IDX files (default: $DPP_DATA_DIR)")->check(CLI::ExistingDirectory);
  train_cmd->add_option("--out", out_dir, "output directory")->required();
  train_cmd->add_option("--epochs", epochs, "number of epochs (overrides the config)");
  train_cmd->add_option("--train-limit", train_limit, "use only the first N training images");
  train_cmd->add_option("--test-limit", test_limit, "use only the first N test images");
  train_cmd->add_flag("--quiet", quiet, "no per-epoch progress lines");

  auto* eval_cmd = app.add_subcommand("eval", "test accuracy of a .dpps model or a training state");
  eval_cmd->add_option("model", model_path, "model.dpps or state.dpst")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--seed", seed, "seed of the mask draw (training states only)");
  eval_cmd->add_option("--data-dir", data_dir, "directory with the MNIST IDX files (default: $DPP_DATA_DIR)")->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--test-limit", test_limit, "use only the first N test images");

  auto* export_cmd = app.add_subcommand("export", "draw one mask per layer from a training state and write a .dpps model");
  export_cmd->add_option("state", state_path, "state.dpst written by train")->required()->check(CLI::ExistingFile);
  export_cmd->add_option("--seed", seed, "seed of the mask draw");
  export_cmd->add_option("--out", export_out, "output .dpps path")->required();

  auto* inspect_cmd = app.add_subcommand("inspect", "print storage accounting of a .dpps model");
  inspect_cmd->add_option("model", model_path, ".dpps model")->required()->check(CLI::ExistingFile);
  inspect_cmd->add_flag("--json", json, "JSON lines instead of CSV");

  auto* metrics_cmd = app.add_subcommand("metrics", "entropy and diversity of the pruning distributions of a training state");
  metrics_cmd->add_option("state", state_path, "state.dpst written by train")->required()->check(CLI::ExistingFile);
  metrics_cmd->add_option("--samples", samples, "Monte Carlo mask draws (T)")->check(CLI::PositiveNumber);
  metrics_cmd->add_option("--seed", seed, "seed of the mask draws");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    std::string what = e.what();
    std::replace(what.begin(), what.end(), '\n', ' ');
    err << "dppkit: usage error: " << what << '\n';
    return 2;
  }

  try {
    if (train_cmd->parsed()) {
      TrainConfig config = load_train_config(config_path);
      if (seed) config.seed = *seed;
      if (epochs) config.epochs = *epochs;
      if (train_limit) config.train_limit = *train_limit;
      if (test_limit) config.test_limit = *test_limit;
      config.validate();
      const auto data = load_mnist_dir(data_dir_or_env(data_dir));
      fs::create_directories(out_dir);
      auto result = train(config, data.train, data.test, [&](const EpochRecord& r) {
        if (quiet) return;
        out << "epoch " << r.epoch << '/' << config.epochs << "  loss " << fixed(r.train_loss, 4) << "  train "
            << fixed(100 * r.train_acc, 2) << "%  test " << fixed(100 * r.test_acc, 2) << "%  tau "
            << fixed(r.tau, 3) << "  (" << fixed(r.seconds, 1) << " s)" << std::endl;
      });
      {
        std::ofstream csv(fs::path(out_dir) / "metrics.csv");
        write_metrics_csv(csv, result.log);
        if (!csv) throw std::runtime_error("cannot write metrics.csv");
      }
      save_state(fs::path(out_dir) / "state.dpst", result.state);
      Rng rng(config.seed);
      const auto masks = draw_masks(result.state.network, config.beta, rng);
      const auto layers = export_layers(result.state, masks);
      write_file(fs::path(out_dir) / "model.dpps", export_model(config.arch, config.bits, layers));
      const auto model = import_model(read_file_bytes(fs::path(out_dir) / "model.dpps"));
      const auto report = model.report();
      out << "wrote " << (fs::path(out_dir) / "model.dpps").string() << ": remaining "
          << fixed(100 * report.remaining(), 2) << "%, compression " << fixed(report.rate(), 2) << "x\n";
      return 0;
    }
    if (eval_cmd->parsed()) {
      const auto dir = data_dir_or_env(data_dir);
      double acc = 0;
      if (has_magic(model_path, "DPPS")) {
        const auto model = import_model(read_file_bytes(model_path));
        auto test = load_mnist_dir(dir).test.head(test_limit.value_or(0));
        acc = accuracy(model.model, test);
      } else {
        const auto state = load_state(model_path);
        auto test = load_mnist_dir(dir).test.head(test_limit.value_or(0));
        acc = evaluate(state, test, seed.value_or(state.config.seed));
      }
      out << "accuracy," << fixed(acc, 6) << '\n';
      return 0;
    }
    if (export_cmd->parsed()) {
      const auto state = load_state(state_path);
      Rng rng(seed.value_or(state.config.seed));
      const auto masks = draw_masks(state.network, state.config.beta, rng);
      const auto bytes = export_model(state.config.arch, state.config.bits, export_layers(state, masks));
      write_file(export_out, bytes);
      out << "wrote " << export_out << " (" << bytes.size() << " bytes)\n";
      return 0;
    }
    if (inspect_cmd->parsed()) {
      print_report(out, import_model(read_file_bytes(model_path)), json);
      return 0;
    }
    if (metrics_cmd->parsed()) {
      const auto state = load_state(state_path);
      Rng rng(seed.value_or(state.config.seed));
      const auto metrics = network_metrics(state.network, state.config.beta, samples, rng);
      out << "layer,D,C,K,H_avg,H_mean_mask,I,U,H_norm,I_norm\n";
      for (std::size_t l = 0; l < metrics.size(); ++l) {
        const auto& m = metrics[l];
        const auto& geo = state.network.layers()[l].geometry();
        const auto na = [&](std::optional<double> v) { return v ? fixed(*v, 6) : std::string("NA"); };
        out << l + 1 << ',' << geo.distributions() << ',' << geo.classes() << ',' << geo.k() << ','
            << fixed(m.h_avg, 6) << ',' << fixed(m.h_mean_mask, 6) << ',' << na(m.diversity) << ','
            << fixed(m.upper_bound, 6) << ',' << fixed(m.h_avg_normalized(), 6) << ','
            << na(m.diversity_normalized()) << '\n';
      }
      return 0;
    }
  } catch (const CLI::ValidationError& e) {
    err << "dppkit: usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::string what = e.what();
    std::replace(what.begin(), what.end(), '\n', ' ');
    err << "dppkit: error: " << what << '\n';
    return 1;
  }
  return 2;
}

}  // namespace dppkit
