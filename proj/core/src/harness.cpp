#include "kml/harness.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <limits>
#include <sstream>
#include <tuple>

#include "json.hpp"

namespace kml {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

int guarded(const std::function<void()>& fn, std::ostream& err) {
  try {
    fn();
    return exit_ok;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return exit_config;
  } catch (const CapacityError& e) {
    err << "config error: " << e.what() << '\n';
    return exit_config;
  } catch (const ContractViolation& e) {
    err << "config error: " << e.what() << '\n';
    return exit_config;
  } catch (const DivergenceError& e) {
    err << "divergence: " << e.what() << '\n';
    return exit_divergence;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << '\n';
    return exit_io;
  } catch (const fs::filesystem_error& e) {
    err << "i/o error: " << e.what() << '\n';
    return exit_io;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return exit_io;
  }
}

TrainOutcome train_run(const RunConfig& cfg, const std::optional<fs::path>& resume, std::ostream& log) {
  cfg.validate();
  const fs::path dir = cfg.output_dir;
  fs::create_directories(dir);
  write_text(dir / "config.resolved", render_config(cfg));

  const TaskDistribution dist = cfg.distribution();
  const Architecture arch = resolve_architecture(cfg.learner, dist.sample_shape());
  TrainHooks hooks;
  hooks.on_log = [&log](const HistoryRow& r) {
    log << "iter " << r.iteration << " loss " << format_double(r.loss) << " acc " << format_double(r.accuracy);
    if (!std::isnan(r.val_accuracy)) log << " val " << format_double(r.val_accuracy);
    log << '\n';
  };
  hooks.on_checkpoint = [&](const TrainState& s) {
    save_checkpoint(dir / "checkpoints" / ("iter_" + std::to_string(s.iteration) + ".bin"), checkpoint_of(s),
                    cfg.checkpoint_f32);
  };

  TrainOutcome out;
  if (resume) {
    const TrainState layout = init_train_state(cfg.learner, arch);
    out.result = meta_train(cfg.learner, dist, state_from_checkpoint(layout, load_checkpoint(*resume)), hooks);
  } else {
    out.result = meta_train(cfg.learner, dist, hooks);
  }
  write_text(dir / "history.csv", history_csv(out.result.history));
  save_checkpoint(dir / "checkpoint.bin", checkpoint_of(out.result.state), cfg.checkpoint_f32);

  if (cfg.eval_episodes >= 2) {
    out.eval = meta_evaluate(cfg.learner, arch, out.result.state, dist, cfg.eval_episodes, cfg.eval_seed);
    write_text(dir / "eval.json", eval_json(*out.eval));
    log << "meta-test accuracy " << format_double(out.eval->overall.mean) << " +- "
        << format_double(out.eval->overall.half_width) << '\n';
  }
  if (cfg.embed_episodes > 0 && out.result.state.modulated())
    write_text(dir / "embeddings.csv",
               embeddings_csv(export_embeddings(cfg.learner, arch, out.result.state, dist, cfg.embed_episodes,
                                                cfg.eval_seed)));
  return out;
}

TransferTasks transfer_tasks(const RunConfig& cfg, const TaskDistribution& dist) {
  Philox seeds(cfg.transfer.seed, StreamDomain::transfer, 0);
  const std::uint64_t source_seed = seeds.next_u64();
  const std::uint64_t target_seed = seeds.next_u64();
  auto pick = [&dist](int mode) {
    return mode < 0 ? dist : dist.restricted_to(static_cast<std::size_t>(mode));
  };
  const TaskDistribution src = pick(cfg.transfer.source_mode);
  const TaskDistribution tgt = pick(cfg.transfer.target_mode);
  TransferTasks t;
  for (std::size_t i = 0; i < cfg.transfer.sources; ++i)
    t.sources.push_back(sample_episode(src, cfg.learner.episode, Split::train, source_seed, i));
  for (std::size_t i = 0; i < cfg.transfer.targets; ++i)
    t.targets.push_back(sample_episode(tgt, cfg.learner.episode, Split::test, target_seed, i));
  return t;
}

TransferOutcome transfer_run(const RunConfig& cfg, const fs::path& checkpoint, std::ostream& log) {
  cfg.validate();
  const fs::path dir = cfg.output_dir;
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  const TaskDistribution dist = cfg.distribution();
  const Architecture arch = resolve_architecture(cfg.learner, dist.sample_shape());
  const TrainState state = state_from_checkpoint(init_train_state(cfg.learner, arch), ckpt);
  const TransferTasks tasks = transfer_tasks(cfg, dist);
  const LearnerLoss loss = make_learner_loss(cfg.learner, arch, state);
  const std::vector<Tensor> theta = state.trainable();
  const NeutralBand band{cfg.transfer.epsilon};

  TransferOutcome out;
  for (std::size_t t = 0; t < tasks.targets.size(); ++t) {
    TransferSetup setup;
    setup.alpha = cfg.transfer.alpha;
    setup.band = band;
    setup.first_order = cfg.learner.first_order;
    setup.iteration = state.iteration;
    setup.target_task_id = t;
    auto recs = measure_transference(theta, tasks.sources, tasks.targets[t], loss, setup);
    out.records.insert(out.records.end(), recs.begin(), recs.end());
  }
  out.summary = summarize(out.records, linear_edges(cfg.transfer.bin_lo, cfg.transfer.bin_hi, cfg.transfer.bin_count),
                          band);
  fs::create_directories(dir);
  write_text(dir / "config.resolved", render_config(cfg));
  write_text(dir / "transference.csv", transference_csv(out.records));
  write_text(dir / "transference.json", histogram_json(out.summary, band));
  log << "transference P " << format_double(out.summary.positive_pct) << "% N "
      << format_double(out.summary.negative_pct) << "% Nu " << format_double(out.summary.neutral_pct)
      << "% mean lr " << format_double(out.summary.mean_lr) << '\n';
  return out;
}

ParamReport param_report(const std::string& arch_name, const Shape& input, std::size_t d_upsilon,
                         std::size_t rank) {
  if (d_upsilon == 0 || rank == 0) throw ConfigError("d_upsilon and rank must be positive");
  const Architecture arch = named_architecture(arch_name, input);
  ParamReport r;
  r.architecture = arch.name;
  r.d_upsilon = d_upsilon;
  r.rank = rank;
  r.single_mlp = count_generator_params(arch, d_upsilon, GeneratorStructure::single_mlp, rank);
  r.simplified = count_generator_params(arch, d_upsilon, GeneratorStructure::simplified, rank);
  for (const LayerSpec& s : arch.layers) {
    r.single_bias.per_layer.push_back(d_upsilon * (s.kernel * s.kernel * s.in + s.out));
    r.single_bias.total += r.single_bias.per_layer.back();
  }
  r.ratio_formula = static_cast<double>(r.single_mlp.total) / static_cast<double>(r.simplified.total);
  r.ratio_reference = std::numeric_limits<double>::quiet_NaN();
  if (arch.name == "paper-4conv" && d_upsilon == 128 && rank == 1) {
    r.reference_simplified = {11648, 45056, 90112, 180224};
    r.reference_total = 327040;
    r.ratio_reference = static_cast<double>(r.single_mlp.total) / static_cast<double>(r.reference_total);
  }
  return r;
}

std::string param_report_text(const ParamReport& r) {
  std::ostringstream o;
  const bool ref = !r.reference_simplified.empty();
  o << "architecture " << r.architecture << "  d_upsilon " << r.d_upsilon << "  rank " << r.rank << '\n';
  o << std::left << std::setw(8) << "layer" << std::setw(14) << "single_mlp" << std::setw(14) << "simplified"
    << std::setw(14) << "single_bias";
  if (ref) o << "reference";
  o << '\n';
  for (std::size_t l = 0; l < r.single_mlp.per_layer.size(); ++l) {
    o << std::setw(8) << (l + 1) << std::setw(14) << r.single_mlp.per_layer[l] << std::setw(14)
      << r.simplified.per_layer[l] << std::setw(14) << r.single_bias.per_layer[l];
    if (ref) o << r.reference_simplified[l];
    o << '\n';
  }
  o << std::setw(8) << "total" << std::setw(14) << r.single_mlp.total << std::setw(14) << r.simplified.total
    << std::setw(14) << r.single_bias.total;
  if (ref) o << r.reference_total;
  o << '\n';
  o << "ratio single_mlp/simplified " << std::fixed << std::setprecision(2) << r.ratio_formula << '\n';
  if (ref) o << "ratio single_mlp/reference " << r.ratio_reference << '\n';
  return o.str();
}

std::string param_report_json(const ParamReport& r) {
  ordered_json j = {
      {"architecture", r.architecture},
      {"d_upsilon", r.d_upsilon},
      {"rank", r.rank},
      {"single_mlp", {{"per_layer", r.single_mlp.per_layer}, {"total", r.single_mlp.total}}},
      {"simplified", {{"per_layer", r.simplified.per_layer}, {"total", r.simplified.total}}},
      {"single_bias", {{"per_layer", r.single_bias.per_layer}, {"total", r.single_bias.total}}},
      {"ratio_formula", r.ratio_formula},
  };
  if (!r.reference_simplified.empty()) {
    j["reference"] = {{"per_layer", r.reference_simplified}, {"total", r.reference_total}};
    j["ratio_reference"] = r.ratio_reference;
  }
  return j.dump(2) + '\n';
}

double film_stack_error(const Architecture& arch, const Tensor& x, const BaseParams& params,
                        std::span<const FilmLayer> film) {
  require(film.size() == arch.layers.size(), "film_stack_error: one FiLM pair per layer");
  const Tensor feature = forward_base(arch, x, params, film);
  BaseParams folded = params;
  for (std::size_t l = 0; l < arch.layers.size(); ++l)
    std::tie(folded.weights[l], folded.biases[l]) =
        film_to_kernel(params.weights[l], params.biases[l], film[l].eta, film[l].gamma);
  const Tensor kernel = forward_base(arch, x, folded);
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < feature.numel(); ++i) {
    diff = std::max(diff, std::abs(kernel[i] - feature[i]));
    scale = std::max(scale, std::abs(feature[i]));
  }
  return scale > 0.0 ? diff / scale : diff;
}

FilmCheck verify_film(std::uint64_t seed, std::size_t trials, Precision precision) {
  require(trials >= 1, "verify_film: need at least one trial");
  FilmCheck c;
  c.trials = trials;
  double sum = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    Philox g(seed, StreamDomain::evaluation, t);
    auto draw = [&g, precision](Shape shape) {
      std::vector<double> v(shape_numel(shape));
      for (double& x : v) x = g.normal();
      return Tensor::from_values(std::move(shape), std::move(v), precision);
    };
    const std::size_t in = 1 + g.below(3);
    std::vector<std::size_t> widths(4);
    for (std::size_t& w : widths) w = 2 + g.below(7);
    const Architecture arch = conv_architecture({in, 10, 10}, widths, 3, {1, 1}, FeaturePool::flatten);
    BaseParams params = init_base(arch, 0, seed, t, precision);
    std::vector<FilmLayer> film;
    for (std::size_t l = 0; l < widths.size(); ++l) {
      params.biases[l] = draw({widths[l]});
      film.push_back({draw({widths[l]}), draw({widths[l]})});
    }
    const double e = film_stack_error(arch, draw({2, in, 10, 10}), params, film);
    c.max_rel_error = std::max(c.max_rel_error, e);
    sum += e;
  }
  c.mean_rel_error = sum / static_cast<double>(trials);
  return c;
}

namespace {

ordered_json read_json(const fs::path& p) {
  try {
    return ordered_json::parse(read_text(p));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed JSON in '" + p.string() + "': " + e.what());
  }
}

std::vector<std::string> csv_lines(const fs::path& p) {
  std::vector<std::string> lines;
  std::istringstream in(read_text(p));
  for (std::string l; std::getline(in, l);)
    if (!l.empty()) lines.push_back(l);
  return lines;
}

}  // namespace

std::string report_run(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("run directory '" + dir.string() + "' not found");
  ordered_json report = ordered_json::object();

  if (fs::exists(dir / "config.resolved")) {
    ordered_json cfg = ordered_json::object();
    for (const std::string& line : csv_lines(dir / "config.resolved")) {
      const auto eq = line.find('=');
      if (eq != std::string::npos) cfg[line.substr(0, eq)] = line.substr(eq + 1);
    }
    report["config"] = cfg;
  }
  if (fs::exists(dir / "eval.json")) {
    const ordered_json eval = read_json(dir / "eval.json");
    ordered_json table = ordered_json::array();
    for (const auto& row : eval.at("per_mode")) {
      ordered_json r = row;
      r["mode"] = std::to_string(row.at("mode").get<int>());
      table.push_back(r);
    }
    ordered_json overall = eval.at("overall");
    overall["mode"] = "Overall";
    table.push_back(overall);
    report["accuracy"] = table;
  }
  if (fs::exists(dir / "history.csv")) {
    const std::vector<HistoryRow> rows = parse_history_csv(read_text(dir / "history.csv"));
    ordered_json h = {{"rows", rows.size()}};
    if (!rows.empty())
      h["final"] = {{"iteration", rows.back().iteration}, {"loss", rows.back().loss},
                    {"accuracy", rows.back().accuracy}};
    report["history"] = h;
  }
  if (fs::exists(dir / "transference.json")) report["transference"] = read_json(dir / "transference.json");
  if (fs::exists(dir / "baselines.json")) report["baselines"] = read_json(dir / "baselines.json");
  if (fs::exists(dir / "embeddings.csv")) {
    const auto lines = csv_lines(dir / "embeddings.csv");
    ordered_json table = ordered_json::array();
    for (std::size_t i = 1; i < lines.size(); ++i) {
      ordered_json row = ordered_json::array();
      std::istringstream in(lines[i]);
      std::size_t col = 0;
      for (std::string f; std::getline(in, f, ','); ++col) {
        if (col < 2) row.push_back(std::stoll(f));
        else row.push_back(std::stod(f));
      }
      table.push_back(row);
    }
    report["embeddings"] = {{"columns", lines.empty() ? "" : lines.front()}, {"rows", table}};
  }
  const std::string text = report.dump(2) + '\n';
  write_text(dir / "report.json", text);
  return text;
}

std::vector<BaselineResult> baselines_run(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  if (cfg.eval_episodes < 2) throw ConfigError("key 'eval.episodes' must be at least 2 for baselines");
  const fs::path dir = cfg.output_dir;
  fs::create_directories(dir);
  write_text(dir / "config.resolved", render_config(cfg));
  const std::vector<BaselineResult> results =
      run_baselines(cfg.learner, cfg.distribution(), cfg.eval_episodes, cfg.eval_seed);
  write_text(dir / "baselines.json", baselines_json(results));
  for (const BaselineResult& r : results)
    log << r.name << ' ' << format_double(r.eval.overall.mean) << " +- " << format_double(r.eval.overall.half_width)
        << '\n';
  return results;
}

}  // namespace kml
