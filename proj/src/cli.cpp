#include "far/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "far/checkpoint.hpp"
#include "far/verify.hpp"

namespace far {

namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string dump(const Json& j) { return j.dump(2) + "\n"; }

// Dotted overrides arrive either as "--key=value" or as "--key value".
std::vector<std::string> collect_overrides(const std::vector<std::string>& extras) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& a = extras[i];
    if (a.rfind("--", 0) != 0) throw ConfigError("unexpected argument '" + a + "'");
    if (a.find('=') != std::string::npos) {
      out.push_back(a.substr(2));
    } else if (i + 1 < extras.size()) {
      out.push_back(a.substr(2) + "=" + extras[++i]);
    } else {
      throw ConfigError("override '" + a + "' has no value");
    }
  }
  return out;
}

std::vector<double> parse_list(const std::string& text, const char* flag) {
  std::vector<double> out;
  std::stringstream s(text);
  std::string item;
  while (std::getline(s, item, ',')) {
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError(std::string("--") + flag + " expects comma-separated numbers, got '" + item + "'");
    }
  }
  return out;
}

std::string cell_name(double p, double r) { return "p" + format_double(p) + "_r" + format_double(r); }

template <typename Real>
SeedResult train_seed_with_checkpoint(const RunConfig& config, const Dataset& data, std::uint64_t seed,
                                      const fs::path& dir) {
  ModelConfig mc = config.model;
  mc.seed = model_seed(config.model, seed);
  EncoderModel<Real> model(mc);
  SeedResult r = train(model, data, config.train, seed);
  save_checkpoint(model, dir / ("model_seed" + std::to_string(seed) + ".ckpt"));
  return r;
}

RunResult execute(const RunConfig& config, const Dataset& data, const fs::path& dir) {
  if (!config.save_checkpoints) return run_experiment(config.model, data, config.train);
  fs::create_directories(dir);
  RunResult run = run_header(config.train);
  for (std::uint64_t seed : config.train.seeds) {
    run.seeds.push_back(config.train.precision == Precision::f64
                            ? train_seed_with_checkpoint<double>(config, data, seed, dir)
                            : train_seed_with_checkpoint<float>(config, data, seed, dir));
  }
  return run;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides, std::ostream& out,
              std::ostream& err) {
  const RunConfig config = load_run_config(config_path, overrides);
  const Dataset data = load_dataset(config);
  const fs::path dir = config.output_directory;
  const RunResult result = execute(config, data, dir);
  write_run_directory(dir, config, result, read_text(config_path));
  for (const auto& s : result.seeds) err << "seed " << s.seed << ": " << format_double(s.score) << "\n";
  out << eval_metric_name(result.metric) << " mean " << format_double(result.mean()) << " over "
      << result.seeds.size() << " seeds -> " << dir.string() << "\n";
  return kExitOk;
}

int cmd_grid(const std::string& config_path, const std::string& p_text, const std::string& r_text,
             const std::vector<std::string>& overrides, std::ostream& out, std::ostream& err) {
  const std::vector<double> ps = parse_list(p_text, "p"), rs = parse_list(r_text, "r");
  if (ps.empty() || rs.empty()) throw ConfigError("grid needs at least one --p and one --r value");
  RunConfig config = load_run_config(config_path, overrides);
  if (config.train.far.selection_mode == SelectionMode::none ||
      config.train.far.selection_mode == SelectionMode::bias_only) {
    throw ConfigError("grid requires far.selection_mode metric or random");
  }
  for (double p : ps) {
    config.train.far.priming_percent = p;
    for (double r : rs) {
      config.train.far.retention_percent = r;
      config.train.far.validate();
    }
  }
  const Dataset data = load_dataset(config);
  const GridResult grid = run_grid(config.model, data, config.train, ps, rs);
  const fs::path dir = config.output_directory;
  fs::create_directories(dir);
  for (std::size_t i = 0; i < ps.size(); ++i)
    for (std::size_t j = 0; j < rs.size(); ++j) {
      RunConfig cell = config;
      cell.train.far.priming_percent = ps[i];
      cell.train.far.retention_percent = rs[j];
      cell.output_directory = (dir / cell_name(ps[i], rs[j])).string();
      write_run_directory(cell.output_directory, cell, grid.at(i, j));
    }
  std::ostringstream table;
  write_grid_table(table, grid);
  write_text(dir / "grid.tsv", table.str());
  write_text(dir / "config.json", dump(to_json(config)));
  out << table.str();
  // Direction check: wider retention should not lose more than a point.
  const double scale = 100.0;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const auto lo = std::min_element(rs.begin(), rs.end()) - rs.begin();
    const auto hi = std::max_element(rs.begin(), rs.end()) - rs.begin();
    const double diff = scale * (grid.at(i, hi).mean() - grid.at(i, lo).mean());
    err << "p=" << format_double(ps[i]) << ": r=" << format_double(rs[hi]) << " minus r=" << format_double(rs[lo])
        << " = " << std::fixed << std::setprecision(2) << diff << " points" << (diff >= -1.0 ? "" : " (below -1)")
        << std::defaultfloat << "\n";
  }
  return kExitOk;
}

int cmd_ablate(const std::string& config_path, const std::vector<std::string>& overrides, std::ostream& out,
               std::ostream&) {
  const RunConfig base = load_run_config(config_path, overrides);
  const Dataset data = load_dataset(base);
  const fs::path dir = base.output_directory;
  fs::create_directories(dir);
  struct Row {
    std::string label;
    SelectionMode mode;
  };
  const std::vector<Row> rows = {{"far", SelectionMode::metric},
                                 {"random", SelectionMode::random},
                                 {"bias_only", SelectionMode::bias_only},
                                 {"baseline", SelectionMode::none}};
  std::ostringstream table;
  table << "row\tselection_mode\tp\tr\tmean_score\ttrainable_fraction\ttrainable_parameters\ttraining_steps";
  for (const auto& [name, value] : counter_list(MemoryOps{})) table << '\t' << name;
  table << "\ttotal_ops\n";
  for (const auto& row : rows) {
    RunConfig cfg = base;
    cfg.train.far.selection_mode = row.mode;
    cfg.output_directory = (dir / row.label).string();
    const RunResult result = execute(cfg, data, cfg.output_directory);
    write_run_directory(cfg.output_directory, cfg, result);
    const ResourceReport res = result.resources();
    const MemoryOps ops = res.training_totals();
    table << row.label << '\t' << selection_mode_name(row.mode) << '\t' << format_double(result.priming_percent)
          << '\t' << format_double(result.retention_percent) << '\t' << format_double(result.mean()) << '\t'
          << format_double(result.seeds.front().trainable_fraction) << '\t' << res.trainable_parameters << '\t'
          << res.training_steps();
    for (const auto& [name, value] : counter_list(ops)) table << '\t' << value;
    table << '\t' << ops.total() << '\n';
  }
  write_text(dir / "ablation.tsv", table.str());
  write_text(dir / "config.json", dump(to_json(base)));
  out << table.str();
  return kExitOk;
}

int cmd_verify(const std::string& fault, std::ostream& out, std::ostream& err) {
  VerifyOptions options;
  options.fault = parse_fault(fault);
  err << "verification runs in f64 regardless of configuration\n";
  const VerifyReport report = run_verification(options);
  for (const auto& c : report.checks) out << (c.passed ? "PASS " : "FAIL ") << c.name << ": " << c.detail << "\n";
  if (report.all_passed()) return kExitOk;
  out << "failed:";
  for (const auto& name : report.failed()) out << ' ' << name;
  out << "\n";
  return kExitFailure;
}

int cmd_report(const std::vector<std::string>& dirs, const std::string& output, std::ostream& out) {
  std::vector<fs::path> paths(dirs.begin(), dirs.end());
  std::ostringstream table;
  write_report(table, paths);
  if (!output.empty()) write_text(output, table.str());
  out << table.str();
  return kExitOk;
}

}  // namespace

void write_run_directory(const fs::path& dir, const RunConfig& config, const RunResult& result,
                         const std::string& verbatim_config) {
  fs::create_directories(dir);
  write_text(dir / "config.json", dump(to_json(config)));
  if (!verbatim_config.empty()) write_text(dir / "config.input.json", verbatim_config);
  for (const auto& s : result.seeds) {
    const std::string k = std::to_string(s.seed);
    Json j = to_json(s);
    j["selection_mode"] = selection_mode_name(result.selection_mode);
    j["p"] = result.priming_percent;
    j["r"] = result.retention_percent;
    j["metric"] = eval_metric_name(result.metric);
    write_text(dir / ("run_seed" + k + ".json"), dump(j));
    std::ostringstream steps;
    write_step_log(steps, s.steps);
    write_text(dir / ("steps_seed" + k + ".tsv"), steps.str());
    if (!s.metrics.empty()) {
      std::ostringstream learners;
      write_learner_report(learners, s.metrics, s.learners);
      write_text(dir / ("learners_seed" + k + ".tsv"), learners.str());
    }
  }
  write_text(dir / "resources.json", dump(to_json(result.resources())));
  write_text(dir / "summary.json", dump(to_json(result)));
}

void write_grid_table(std::ostream& out, const GridResult& grid) {
  out << "p\\r";
  for (double r : grid.r_values) out << '\t' << format_double(r);
  out << '\n';
  for (std::size_t i = 0; i < grid.p_values.size(); ++i) {
    out << format_double(grid.p_values[i]);
    for (std::size_t j = 0; j < grid.r_values.size(); ++j) out << '\t' << format_double(grid.at(i, j).mean());
    out << '\n';
  }
}

void write_report(std::ostream& out, const std::vector<fs::path>& run_dirs) {
  if (run_dirs.empty()) throw InputError("report needs at least one run directory");
  struct Row {
    double r, p;
    std::string mode, dir;
    double mean;
    ResourceReport res;
  };
  std::vector<Row> rows;
  for (const auto& d : run_dirs) {
    const fs::path summary = d / "summary.json";
    if (!fs::exists(summary)) throw InputError(summary.string() + " not found");
    const Json j = Json::parse(read_text(summary), nullptr, false);
    if (j.is_discarded()) throw FormatError(summary.string() + " is not valid JSON");
    try {
      rows.push_back({j.at("r").get<double>(), j.at("p").get<double>(), j.at("selection_mode").get<std::string>(),
                      d.string(), j.at("mean").get<double>(), resource_report_from_json(j.at("resources"))});
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(summary.string() + ": " + e.what());
    }
  }
  std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) { return a.r < b.r; });
  out << "r\tp\tselection_mode\tmean_score\ttrainable_parameters\ttraining_steps";
  for (const auto& [name, value] : counter_list(MemoryOps{})) out << '\t' << name;
  out << "\ttotal_ops\twall_seconds\trun\n";
  for (const auto& row : rows) {
    const MemoryOps ops = row.res.training_totals();
    out << format_double(row.r) << '\t' << format_double(row.p) << '\t' << row.mode << '\t' << format_double(row.mean)
        << '\t' << row.res.trainable_parameters << '\t' << row.res.training_steps();
    for (const auto& [name, value] : counter_list(ops)) out << '\t' << value;
    out << '\t' << ops.total() << '\t';
    double wall = 0;
    bool timed = false;
    for (const auto& p : row.res.phases) {
      if (p.kind == CostPhase::training && p.wall_seconds) {
        wall += *p.wall_seconds;
        timed = true;
      }
    }
    if (timed) out << format_double(wall);
    out << '\t' << row.dir << '\n';
  }
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"FAR fine-tuning experiments"};
  app.require_subcommand(1);

  std::string config_path, p_text, r_text, fault = "none", report_out;
  std::vector<std::string> report_dirs;

  auto* train_cmd = app.add_subcommand("train", "Train every seed of one configuration");
  train_cmd->add_option("config", config_path, "Config file (JSON)")->required();
  train_cmd->allow_extras();

  auto* grid_cmd = app.add_subcommand("grid", "Sweep priming and retention percentages");
  grid_cmd->add_option("config", config_path, "Config file (JSON)")->required();
  grid_cmd->add_option("--p", p_text, "Comma-separated priming percentages")->required();
  grid_cmd->add_option("--r", r_text, "Comma-separated retention percentages")->required();
  grid_cmd->allow_extras();

  auto* ablate_cmd = app.add_subcommand("ablate", "Compare FAR, random selection, bias-only and baseline");
  ablate_cmd->add_option("config", config_path, "Config file (JSON)")->required();
  ablate_cmd->allow_extras();

  auto* verify_cmd = app.add_subcommand("verify", "Run the invariant suite in f64");
  verify_cmd->add_option("--inject-fault", fault, "Deliberate defect: skip-permutation");

  auto* report_cmd = app.add_subcommand("report", "Tabulate run directories by retention");
  report_cmd->add_option("runs", report_dirs, "Run directories")->required();
  report_cmd->add_option("-o,--output", report_out, "Also write the table to this file");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    const CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << "error: " << e.what() << "\n" << sub->help();
    return kExitConfig;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(config_path, collect_overrides(train_cmd->remaining()), out, err);
    if (grid_cmd->parsed())
      return cmd_grid(config_path, p_text, r_text, collect_overrides(grid_cmd->remaining()), out, err);
    if (ablate_cmd->parsed()) return cmd_ablate(config_path, collect_overrides(ablate_cmd->remaining()), out, err);
    if (verify_cmd->parsed()) return cmd_verify(fault, out, err);
    if (report_cmd->parsed()) return cmd_report(report_dirs, report_out, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const InputError& e) {
    err << "input error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const GenerationError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}

}  // namespace far
