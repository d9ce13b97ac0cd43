#include <CLI11.hpp>
#include <iostream>

#include "dic3d/pipeline.hpp"

namespace {

constexpr const char* kDescriptions[] = {
    "render a synthetic stereo sequence with ground truth",
    "correlate a frame sequence into displacement fields",
    "virtual gauge histories and plateaus from field CSVs",
    "out-of-plane profile along a lattice segment",
    "align two PLY scans by markers and report deviations",
    "back-calculate a bearing reaction from strain",
};

}  // namespace

int main(int argc, char** argv) {
  namespace pl = dic3d::pipeline;
  CLI::App app{"dic3d: stereo digital image correlation and scan comparison"};
  app.set_version_flag("--version", pl::kVersion);
  app.require_subcommand(1);

  pl::RunOptions opt;
  std::uint64_t seed = 0;
  const auto& names = pl::command_names();
  std::vector<CLI::App*> subs;
  std::vector<CLI::Option*> seed_opts;
  for (std::size_t i = 0; i < names.size(); ++i) {
    auto* sub = app.add_subcommand(names[i], kDescriptions[i]);
    sub->add_option("--config", opt.config_path, "JSON configuration file")->required();
    sub->add_option("--out", opt.out_dir, "output directory")->required();
    seed_opts.push_back(sub->add_option("--seed", seed, "override the configured random seed"));
    sub->add_option("--threads", opt.threads, "worker threads (0 = all cores); affects speed only")
        ->check(CLI::NonNegativeNumber);
    sub->add_flag("--verbose", opt.verbose, "progress on stderr");
    subs.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  std::string command;
  for (std::size_t i = 0; i < subs.size(); ++i)
    if (subs[i]->parsed()) {
      command = names[i];
      if (seed_opts[i]->count() > 0) opt.seed = seed;
    }

  try {
    const auto result = pl::run_command(command, opt);
    std::cout << command << ": " << result.outputs.size() << " files in " << result.out_dir.string()
              << " (outputs digest " << result.outputs_digest << ")\n";
    return 0;
  } catch (const dic3d::Error& e) {
    std::cerr << "dic3d " << command << ": error: " << e.what() << '\n';
    return dic3d::exit_code(e.kind());
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "dic3d " << command << ": error: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "dic3d " << command << ": internal error: " << e.what() << '\n';
    return 1;
  }
}
