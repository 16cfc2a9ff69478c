#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>

#include "ocd/config.hpp"
#include "ocd/harness.hpp"

namespace {

constexpr int kUsage = 1;
constexpr int kStageFailure = 2;

struct Flags {
  std::string config_file;
  std::string preset;
  std::string out = "runs";
  std::vector<std::string> sets;
  std::map<std::string, std::string> keys;
  bool verbose = false;
  bool dump_config = false;
};

void add_common(CLI::App& sub, Flags& f) {
  sub.add_option("-c,--config", f.config_file, "key = value config file");
  sub.add_option("-p,--preset", f.preset, "starting preset: blobs, tabular, smoke, smoke-tabular");
  sub.add_option("-o,--out", f.out, "root directory for run directories")->capture_default_str();
  sub.add_option("-s,--set", f.sets, "override key=value (repeatable)");
  sub.add_flag("-v,--verbose", f.verbose, "log stage progress to stderr");
  sub.add_flag("--dump-config", f.dump_config, "print the resolved configuration and exit");
  for (const auto& k : ocd::config_keys()) {
    sub.add_option("--" + k.name, f.keys[k.name], k.help);
  }
}

ocd::PipelineConfig resolve(const Flags& f, const CLI::App& sub) {
  std::vector<std::pair<std::string, std::string>> file_entries, flag_entries;
  if (!f.config_file.empty()) {
    std::ifstream in(f.config_file);
    if (!in) throw ocd::ConfigError("cannot read config file " + f.config_file);
    std::stringstream ss;
    ss << in.rdbuf();
    file_entries = ocd::parse_config_text(ss.str());
  }
  if (!f.preset.empty()) flag_entries.emplace_back("preset", f.preset);
  for (const auto& k : ocd::config_keys()) {
    if (sub.count("--" + k.name) > 0) flag_entries.emplace_back(k.name, f.keys.at(k.name));
  }
  for (const auto& s : f.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ocd::ConfigError("--set expects key=value, got '" + s + "'");
    flag_entries.emplace_back(s.substr(0, eq), s.substr(eq + 1));
  }
  return ocd::resolve_config(file_entries, flag_entries);
}

void print_summary(const ocd::EvalReport& rep) {
  for (const auto& r : rep.rows) {
    std::cout << r.variant << " " << r.metric << " " << ocd::format_double(r.mean);
    if (r.sd) std::cout << " ± " << ocd::format_double(*r.sd);
    std::cout << "\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Per-sample weight deltas from a conditional diffusion hypernetwork"};
  app.require_subcommand(1);
  Flags flags;
  const std::vector<std::pair<std::string, std::string>> commands{
      {"train-base", "train the base model"},
      {"select-layer", "score layers by perturbed-loss entropy"},
      {"collect", "finetune per sample and store the normalized deltas"},
      {"train-diffusion", "train the diffusion hypernetwork"},
      {"train-scale", "train the scale estimator"},
      {"eval", "evaluate every variant on the test split"},
      {"report", "write report.csv, timings.csv and report.md from stored metrics"},
      {"all", "every stage, then the report"}};
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, help] : commands) {
    subs[name] = app.add_subcommand(name, help);
    add_common(*subs[name], flags);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsage;
  }

  std::string command;
  for (const auto& [name, sub] : subs) {
    if (sub->parsed()) command = name;
  }
  const CLI::App& sub = *subs.at(command);

  ocd::PipelineConfig cfg;
  try {
    cfg = resolve(flags, sub);
  } catch (const ocd::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  }
  if (flags.dump_config) {
    std::cout << cfg.canonical();
    return 0;
  }

  const auto paths = ocd::run_paths(flags.out, cfg);
  try {
    if (command == "report") {
      const auto rep = ocd::report_from_disk(cfg, flags.out);
      print_summary(rep);
    } else if (command == "all") {
      const auto rep = ocd::run_pipeline(cfg, flags.out, flags.verbose);
      print_summary(rep);
    } else {
      const std::map<std::string, ocd::Stage> stages{
          {"train-base", ocd::Stage::Base},        {"select-layer", ocd::Stage::Select},
          {"collect", ocd::Stage::Collect},        {"train-diffusion", ocd::Stage::Diffusion},
          {"train-scale", ocd::Stage::Scale},      {"eval", ocd::Stage::Eval}};
      std::filesystem::create_directories(paths.dir);
      std::ofstream(paths.dir / "config.txt") << cfg.canonical();
      for (auto seed : cfg.seeds) {
        const auto r = ocd::run_seed(cfg, paths, seed, {stages.at(command), flags.verbose});
        if (r) {
          for (const auto& [variant, m] : r->rows) {
            std::cout << "seed " << seed << " " << variant << " loss " << ocd::format_double(m.loss);
            if (m.accuracy) std::cout << " accuracy " << ocd::format_double(*m.accuracy);
            std::cout << "\n";
          }
        }
      }
    }
  } catch (const ocd::StageError& e) {
    std::cerr << "stage failed: " << e.what() << "\n";
    return kStageFailure;
  } catch (const std::exception& e) {
    std::cerr << "stage failed: " << e.what() << "\n";
    return kStageFailure;
  }
  std::cout << "run directory: " << paths.dir.string() << "\n";
  return 0;
}
