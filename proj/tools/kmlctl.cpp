// kmlctl: train, transfer, paramcount, verify-film, report, baselines.

#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "kml/harness.hpp"

namespace {

kml::Shape parse_shape(const std::string& s) {
  kml::Shape shape;
  if (s.empty()) return shape;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto x = s.find('x', start);
    const std::string part = s.substr(start, x == std::string::npos ? std::string::npos : x - start);
    try {
      shape.push_back(std::stoul(part));
    } catch (const std::exception&) {
      throw kml::ConfigError("bad input shape '" + s + "' (expected e.g. 3x84x84)");
    }
    if (x == std::string::npos) break;
    start = x + 1;
  }
  return shape;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Kernel-modulated meta-learning toolkit"};
  app.require_subcommand(1);

  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Suppress progress output");

  std::string config_path, checkpoint_path, resume_path, out_dir, run_dir;

  auto* train = app.add_subcommand("train", "Meta-train from a key=value config");
  train->add_option("config", config_path, "Config file")->required();
  train->add_option("--resume", resume_path, "Continue from a checkpoint");
  train->add_option("--out", out_dir, "Override output_dir");

  auto* transfer = app.add_subcommand("transfer", "Measure transference at a checkpoint");
  transfer->add_option("config", config_path, "Config file")->required();
  transfer->add_option("checkpoint", checkpoint_path, "Checkpoint file")->required();
  transfer->add_option("--out", out_dir, "Override output_dir");

  std::string arch = "paper-4conv", input;
  std::size_t d_upsilon = 128, rank = 1;
  bool json = false;
  auto* paramcount = app.add_subcommand("paramcount", "Generator parameter counts per layer");
  paramcount->add_option("--arch", arch, "Architecture name")->capture_default_str();
  paramcount->add_option("--input", input, "Input shape such as 3x84x84");
  paramcount->add_option("--d", d_upsilon, "Task embedding width")->capture_default_str();
  paramcount->add_option("--rank", rank, "Generator rank")->capture_default_str();
  paramcount->add_flag("--json", json, "Emit JSON");

  std::uint64_t seed = 0;
  std::size_t trials = 100;
  std::string precision = "f64";
  auto* verify = app.add_subcommand("verify-film", "Compare feature-space and kernel-space FiLM");
  verify->add_option("--seed", seed, "Seed")->capture_default_str();
  verify->add_option("--trials", trials, "Random trials")->capture_default_str();
  verify->add_option("--precision", precision, "f64 or f32")
      ->check(CLI::IsMember({"f64", "f32"}))
      ->capture_default_str();

  auto* report = app.add_subcommand("report", "Consolidate a run directory into report.json");
  report->add_option("run_dir", run_dir, "Run directory")->required();

  auto* baselines = app.add_subcommand("baselines", "Joint, per-mode, FiLM and KML comparison");
  baselines->add_option("config", config_path, "Config file")->required();
  baselines->add_option("--out", out_dir, "Override output_dir");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kml::exit_config;
  }

  std::ostream null_stream(nullptr);
  std::ostream& log = quiet ? null_stream : std::cerr;

  auto load = [&] {
    kml::RunConfig cfg = kml::load_config(config_path);
    if (!out_dir.empty()) cfg.output_dir = out_dir;
    return cfg;
  };

  return kml::guarded(
      [&] {
        if (*train) {
          std::optional<std::filesystem::path> resume;
          if (!resume_path.empty()) resume = resume_path;
          kml::train_run(load(), resume, log);
        } else if (*transfer) {
          kml::transfer_run(load(), checkpoint_path, log);
        } else if (*paramcount) {
          const kml::ParamReport r = kml::param_report(arch, parse_shape(input), d_upsilon, rank);
          std::cout << (json ? kml::param_report_json(r) : kml::param_report_text(r));
        } else if (*verify) {
          const kml::FilmCheck c =
              kml::verify_film(seed, trials, precision == "f32" ? kml::Precision::f32 : kml::Precision::f64);
          std::cout << "precision " << precision << " trials " << c.trials << " max_rel_error "
                    << kml::format_double(c.max_rel_error) << " mean_rel_error "
                    << kml::format_double(c.mean_rel_error) << '\n';
        } else if (*report) {
          std::cout << kml::report_run(run_dir);
        } else if (*baselines) {
          kml::baselines_run(load(), log);
        }
      },
      std::cerr);
}
