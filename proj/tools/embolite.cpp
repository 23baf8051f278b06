#include <chrono>
#include <iostream>
#include <thread>

#include <fmt/format.h>

#include "CLI11.hpp"
#include "embolite/errors.hpp"
#include "embolite/harness.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;

}  // namespace

int main(int argc, char** argv) {
  using namespace embolite;
  CLI::App app{"embolite: two-stage pulmonary embolism detection on CT volumes"};
  app.require_subcommand(1);

  std::string config_path;
  bool force = false;
  int jobs = 1;
  std::string out_dir;
  const std::vector<std::pair<std::string, std::string>> commands{
      {"gen-data", "generate the synthetic phantom dataset"},
      {"train-stage1", "train the slab U-Net"},
      {"train-stage2", "train the bag detector on masked stacks"},
      {"eval", "score a split and write the stratified report"},
      {"ablate", "train and compare the detector variants and the T sweep"},
  };
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "run config (JSON)")->required();
    sub->add_flag("--force", force, "overwrite a non-empty data directory");
    sub->add_option("--jobs", jobs, "worker threads for per-study work")->check(CLI::PositiveNumber);
    sub->add_option("--out", out_dir, "output directory, overrides output_dir");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  try {
    RunConfig cfg = load_run_config(config_path);
    if (!out_dir.empty()) cfg.output_dir = out_dir;
    CommandOptions opt;
    opt.force = force;
    opt.jobs = jobs;
    opt.log = [](const std::string& line) { std::cout << line << std::endl; };
    const auto t0 = std::chrono::steady_clock::now();
    opt.log(fmt::format("{}: seed {} output {}", command, cfg.seed, cfg.output_dir.string()));

    if (command == "gen-data") {
      cmd_gen_data(cfg, opt);
    } else if (command == "train-stage1") {
      cmd_train_stage1(cfg, opt);
    } else if (command == "train-stage2") {
      cmd_train_stage2(cfg, opt);
    } else if (command == "eval") {
      cmd_eval(cfg, opt);
    } else if (command == "ablate") {
      cmd_ablate(cfg, opt);
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    opt.log(fmt::format("{}: done in {:.1f}s", command, secs));
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
