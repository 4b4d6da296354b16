#include <cstdio>
#include <exception>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "feddwa/experiment.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;

struct CommonFlags {
  std::string config;
  feddwa::ConfigOverrides overrides;
  bool quiet = false;
};

template <typename T>
void optional_flag(CLI::App* app, const std::string& name, std::optional<T>& target,
                   const std::string& help) {
  app->add_option_function<T>(name, [&target](const T& v) { target = v; }, help);
}

void add_common(CLI::App* app, CommonFlags& f) {
  auto& o = f.overrides;
  app->add_option("--config", f.config, "JSON config file")->check(CLI::ExistingFile);
  optional_flag(app, "--method", o.method, "feddwa | fedavg | fedprox | fedavg_ft | local");
  optional_flag(app, "--clients", o.clients, "number of clients N");
  optional_flag(app, "--rounds", o.rounds, "communication rounds T");
  optional_flag(app, "--frac", o.fraction, "participation fraction");
  optional_flag(app, "--k", o.k, "top-K neighbours kept per client");
  optional_flag(app, "--alpha", o.alpha, "Dirichlet concentration");
  optional_flag(app, "--s", o.s, "dominant-class fraction");
  optional_flag(app, "--seed", o.seed, "master seed");
  optional_flag(app, "--out", o.out, "output directory");
  optional_flag(app, "--guidance", o.guidance, "onestep | last | current");
  optional_flag(app, "--adapt-steps", o.adapt_steps, "gradient steps for the guidance model");
  app->add_flag_callback("--export-weights", [&o] { o.export_weights = true; },
                         "write weights_<t>.csv each round");
  app->add_flag("--quiet", f.quiet, "suppress notices");
}

std::vector<double> parse_values(const std::string& text) {
  std::vector<double> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto end = text.find(',', start);
    const std::string item = text.substr(start, end == std::string::npos ? std::string::npos : end - start);
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw feddwa::ConfigError("values", "'" + item + "' is not a number");
    }
    if (end == std::string::npos) break;
    start = end + 1;
  }
  return out;
}

void print_summary(const feddwa::ExperimentResult& r) {
  const auto& s = r.summary;
  std::cout << "method " << r.method_name << "  rounds " << s["rounds"].get<std::size_t>();
  if (!s["best_mean_accuracy"].is_null()) {
    std::printf("  best %.4f @%zu  final %.4f", s["best_mean_accuracy"].get<double>(),
                s["best_round"].get<std::size_t>(), s["final_mean_accuracy"].get<double>());
    std::fflush(stdout);
  }
  std::cout << "  bytes " << s["total_bytes"].get<std::uint64_t>() << "\n"
            << "outputs in " << r.config.output.dir.string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Personalized federated learning with dynamic weight adjustment"};
  app.require_subcommand(1);

  CommonFlags run_flags;
  auto* run_cmd = app.add_subcommand("run", "train one configuration");
  add_common(run_cmd, run_flags);

  CommonFlags sweep_flags;
  std::string axis, values;
  auto* sweep_cmd = app.add_subcommand("sweep", "repeat a run over one parameter");
  add_common(sweep_cmd, sweep_flags);
  sweep_cmd->add_option("--axis", axis, "K | alpha | adapt_steps | s")->required();
  sweep_cmd->add_option("--values", values, "comma-separated values")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (run_cmd->parsed()) {
      feddwa::set_quiet(run_flags.quiet);
      auto path = run_flags.config.empty() ? std::nullopt
                                           : std::optional<std::filesystem::path>(run_flags.config);
      const auto cfg = feddwa::parse_config(path, run_flags.overrides);
      const auto result = feddwa::run_experiment(cfg);
      print_summary(result);
      return kExitOk;
    }
    feddwa::set_quiet(sweep_flags.quiet);
    auto path = sweep_flags.config.empty() ? std::nullopt
                                           : std::optional<std::filesystem::path>(sweep_flags.config);
    const auto cfg = feddwa::parse_config(path, sweep_flags.overrides);
    const auto ax = feddwa::parse_axis(axis);
    const auto rows = feddwa::sweep(cfg, ax, parse_values(values));
    std::size_t failed = 0;
    for (const auto& r : rows) {
      if (r.ok) {
        std::printf("%s=%g  best %.4f  final %.4f\n", std::string(feddwa::to_string(ax)).c_str(),
                    r.value, r.best_mean_accuracy, r.final_mean_accuracy);
      } else {
        ++failed;
        std::printf("%s=%g  failed: %s\n", std::string(feddwa::to_string(ax)).c_str(), r.value,
                    r.error.c_str());
      }
    }
    std::printf("sweep written to %s\n", (cfg.output.dir / "sweep.csv").string().c_str());
    return failed == rows.size() ? kExitRuntime : kExitOk;
  } catch (const feddwa::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}
