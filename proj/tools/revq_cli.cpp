// SPDX-License-Identifier: Apache-2.0
//
// revq: train, evaluate and inspect multi-group quantizers from the shell.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "revq/revq.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

// Raised for flag combinations CLI11 cannot reject on its own.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw revq::FormatError(revq::FormatErrorKind::Io, "cannot open '" + path.string() + "' for writing");
  os << text;
  if (!os) throw revq::FormatError(revq::FormatErrorKind::Io, "write failed for '" + path.string() + "'");
}

json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw revq::FormatError(revq::FormatErrorKind::Io, "cannot open '" + path.string() + "'");
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw revq::FormatError(revq::FormatErrorKind::Truncated, path.string() + ": " + e.what());
  }
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw revq::FormatError(revq::FormatErrorKind::Io, "cannot create '" + dir.string() + "': " + ec.message());
}

// ---------------------------------------------------------------------------
// Run description shared by train and eval

struct RunLayout {
  revq::LatentShape shape;
  revq::SplitAxis axis = revq::SplitAxis::Channel;
  std::size_t tokens = 512;
  std::size_t secondary_split = 0;
  bool single_group = false;
  std::size_t codes = 16384;

  revq::GroupSpec spec() const {
    return axis == revq::SplitAxis::Channel ? revq::GroupSpec::channel(shape, tokens, secondary_split)
                                            : revq::GroupSpec::spatial(shape, tokens);
  }
};

revq::SplitAxis parse_axis(const std::string& s) {
  return s == "spatial" ? revq::SplitAxis::Spatial : revq::SplitAxis::Channel;
}

json layout_json(const RunLayout& l, const revq::RectifierOptions& rect, std::uint64_t seed) {
  return json{{"shape", {l.shape.height, l.shape.width, l.shape.channels}},
              {"axis", revq::to_string(l.axis)},
              {"tokens", l.tokens},
              {"secondary_split", l.secondary_split},
              {"single_group", l.single_group},
              {"codes", l.codes},
              {"rectifier",
               {{"arch", revq::to_string(rect.arch)},
                {"layers", rect.layers},
                {"hidden", rect.hidden},
                {"head_dim", rect.head_dim}}},
              {"seed", seed}};
}

RunLayout layout_from_json(const json& j, const std::string& context) {
  try {
    RunLayout l;
    const auto shape = j.at("shape").get<std::vector<std::uint32_t>>();
    if (shape.size() != 3) throw revq::ConfigError(context + ": shape must have 3 entries");
    l.shape = {shape[0], shape[1], shape[2]};
    l.axis = parse_axis(j.at("axis").get<std::string>());
    l.tokens = j.at("tokens").get<std::size_t>();
    l.secondary_split = j.at("secondary_split").get<std::size_t>();
    l.single_group = j.at("single_group").get<bool>();
    l.codes = j.at("codes").get<std::size_t>();
    return l;
  } catch (const json::exception& e) {
    throw revq::FormatError(revq::FormatErrorKind::Truncated, context + ": " + e.what());
  }
}

json epoch_json(const revq::EpochReport& r) {
  return json{{"epoch", r.epoch},
              {"qua_loss", r.qua_loss},
              {"dec_loss", r.dec_loss},
              {"utilization_overall", r.utilization_overall},
              {"utilization_min_group", r.utilization_min_group},
              {"lr", r.lr},
              {"reset_count", r.reset_count},
              {"wall_ms", r.wall_ms}};
}

// ---------------------------------------------------------------------------
// train

struct TrainFlags {
  std::string latents;
  std::string out = "revq_run";
  std::string axis = "channel";
  std::string rect = "attn";
  std::string init = "data";
  RunLayout layout;
  revq::TrainConfig cfg;
  revq::RectifierOptions rect_opt;
  bool no_reset = false;
  bool no_timing = false;
  std::string config;
  CLI::App* cmd = nullptr;
};

void add_train(CLI::App& app, TrainFlags& f) {
  auto* cmd = app.add_subcommand("train", "Train a codebook and rectifier on a latent file");
  f.cmd = cmd;
  cmd->add_option("--config", f.config, "key=value file naming long flags; explicit flags take precedence")
      ->check(CLI::ExistingFile);
  cmd->add_option("--latents", f.latents, "RVQL latent file")->required()->check(CLI::ExistingFile);
  cmd->add_option("--out", f.out, "Output directory")->capture_default_str();
  cmd->add_option("--tokens", f.layout.tokens, "Tokens per sample (groups)")->capture_default_str()->check(CLI::PositiveNumber);
  cmd->add_option("--codes", f.layout.codes, "Codes per codebook")->capture_default_str()->check(CLI::PositiveNumber);
  cmd->add_option("--axis", f.axis, "Split axis")->capture_default_str()->check(CLI::IsMember({"channel", "spatial"}));
  cmd->add_option("--secondary-split", f.layout.secondary_split, "Position runs per channel slice (0 = auto)")
      ->capture_default_str();
  cmd->add_flag("--single-group", f.layout.single_group, "Share one codebook across all groups");
  cmd->add_flag("--no-reset", f.no_reset, "Disable the non-activation reset");
  cmd->add_option("--rect", f.rect, "Rectifier architecture")->capture_default_str()->check(CLI::IsMember({"none", "mlp", "attn"}));
  cmd->add_option("--rect-layers", f.rect_opt.layers, "Rectifier blocks")->capture_default_str();
  cmd->add_option("--hidden", f.rect_opt.hidden, "MLP hidden width (0 = 4 x dim)")->capture_default_str();
  cmd->add_option("--head-dim", f.rect_opt.head_dim, "Attention head width")->capture_default_str()->check(CLI::PositiveNumber);
  cmd->add_option("--epochs", f.cfg.epochs, "Training epochs")->capture_default_str();
  cmd->add_option("--batch-size", f.cfg.batch_size, "Minibatch size")->capture_default_str()->check(CLI::PositiveNumber);
  cmd->add_option("--lr", f.cfg.quantizer_lr, "Base quantizer learning rate")->capture_default_str();
  cmd->add_option("--final-lr", f.cfg.final_lr, "Learning rate at the last epoch")->capture_default_str();
  cmd->add_option("--rect-lr-fraction", f.cfg.rectifier_lr_fraction, "Rectifier LR as a fraction of the quantizer LR")
      ->capture_default_str();
  cmd->add_option("--reset-sigma", f.cfg.reset_epsilon_sigma, "Std of the reset perturbation")->capture_default_str();
  cmd->add_option("--init", f.init, "Codebook init")->capture_default_str()->check(CLI::IsMember({"data", "gaussian"}));
  cmd->add_option("--seed", f.cfg.seed, "Random seed")->capture_default_str();
  cmd->add_flag("--no-timing", f.no_timing, "Record wall_ms as 0 so metrics are byte-reproducible");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Fills every option not given on the command line from `key = value` lines.
void apply_config_file(CLI::App& cmd, const std::string& path) {
  std::ifstream is(path);
  if (!is) throw revq::FormatError(revq::FormatErrorKind::Io, "cannot open '" + path + "'");
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError(path + ":" + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    if (key == "config") throw UsageError(path + ": config files cannot nest");
    CLI::Option* opt = nullptr;
    try {
      opt = cmd.get_option("--" + key);
    } catch (const CLI::OptionNotFound&) {
      throw UsageError(path + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
    if (opt->count() > 0) continue;
    try {
      opt->add_result(value);
      opt->run_callback();
    } catch (const CLI::Error& e) {
      throw UsageError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void save_checkpoint(const fs::path& dir, const revq::MultiCodebook& cb, const revq::Rectifier& rect) {
  revq::write_codebook((dir / "codebook.rvqc").string(), cb);
  revq::write_rectifier((dir / "rectifier.rvqr").string(), rect);
}

int run_train(TrainFlags& f) {
  if (!f.config.empty()) apply_config_file(*f.cmd, f.config);
  f.layout.axis = parse_axis(f.axis);
  f.rect_opt.arch = f.rect == "none" ? revq::RectifierArch::None
                  : f.rect == "mlp"  ? revq::RectifierArch::Mlp
                                     : revq::RectifierArch::Attention;
  f.rect_opt.seed = f.cfg.seed;
  f.cfg.reset_enabled = !f.no_reset;
  f.cfg.init = f.init == "gaussian" ? revq::CodebookInit::Gaussian : revq::CodebookInit::FromData;
  f.cfg.validate();

  const auto raw = revq::read_latents(f.latents);
  f.layout.shape = raw.shape();
  const auto stats = revq::compute_normalization(raw);
  const auto spec = f.layout.spec();
  const auto groups = revq::reshape_to_groups(revq::normalize(raw, stats), spec);

  const fs::path out(f.out);
  ensure_dir(out);
  revq::write_norm_stats((out / "normalization.json").string(), stats);
  write_text(out / "run.json", layout_json(f.layout, f.rect_opt, f.cfg.seed).dump(2) + "\n");

  std::ofstream metrics(out / "metrics.jsonl", std::ios::binary);
  if (!metrics) throw revq::FormatError(revq::FormatErrorKind::Io, "cannot open metrics log in '" + out.string() + "'");

  auto rect = revq::make_rectifier<float>(groups.tokens, groups.dim, f.rect_opt);
  std::cerr << "revq: " << groups.batch << " samples, " << groups.tokens << " tokens of dim " << groups.dim << ", "
            << (f.layout.single_group ? 1 : groups.tokens) << " codebook(s) x " << f.layout.codes << " codes, "
            << rect.parameter_count() << " rectifier parameters\n";

  const auto on_epoch = [&](const revq::EpochReport& r, const revq::MultiCodebook& cb, const revq::Rectifier& g) {
    revq::EpochReport logged = r;
    if (f.no_timing) logged.wall_ms = 0.0;
    metrics << epoch_json(logged).dump() << '\n';
    metrics.flush();
    save_checkpoint(out, cb, g);
    std::cerr << "epoch " << r.epoch << "  qua " << r.qua_loss << "  dec " << r.dec_loss << "  util "
              << r.utilization_overall << "  resets " << r.reset_count << '\n';
  };
  const auto res = revq::train(groups, f.layout.codes, f.layout.single_group, std::move(rect), f.cfg, on_epoch);

  save_checkpoint(out, res.codebook, res.rectifier);
  revq::Evaluation final_eval;
  if (res.log.empty()) {
    final_eval = revq::evaluate<float>(groups, res.codebook, res.rectifier, f.cfg.batch_size);
  } else {
    const auto& last = res.log.back();
    final_eval.qua_loss = last.qua_loss;
    final_eval.dec_loss = last.dec_loss;
    final_eval.utilization.overall = last.utilization_overall;
  }
  const json summary{{"final_qua_loss", final_eval.qua_loss},
                     {"final_dec_loss", final_eval.dec_loss},
                     {"utilization", final_eval.utilization.overall},
                     {"epochs", res.log.size()}};
  write_text(out / "summary.json", summary.dump(2) + "\n");
  std::cout << summary.dump() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------
// eval

struct EvalFlags {
  std::string checkpoint;
  std::string latents;
  std::size_t batch_size = 256;
};

void add_eval(CLI::App& app, EvalFlags& f) {
  auto* cmd = app.add_subcommand("eval", "Evaluate a trained checkpoint on a latent file");
  cmd->add_option("--checkpoint", f.checkpoint, "Directory written by train")->required()->check(CLI::ExistingDirectory);
  cmd->add_option("--latents", f.latents, "RVQL latent file")->required()->check(CLI::ExistingFile);
  cmd->add_option("--batch-size", f.batch_size, "Evaluation chunk size")->capture_default_str()->check(CLI::PositiveNumber);
}

int run_eval(const EvalFlags& f) {
  const fs::path dir(f.checkpoint);
  const auto layout = layout_from_json(read_json(dir / "run.json"), (dir / "run.json").string());
  const auto cb = revq::read_codebook((dir / "codebook.rvqc").string());
  const auto rect = revq::read_rectifier((dir / "rectifier.rvqr").string());
  const auto stats = revq::read_norm_stats((dir / "normalization.json").string());

  const auto raw = revq::read_latents(f.latents);
  if (!(raw.shape() == layout.shape)) {
    throw revq::ConfigError("latent shape " + revq::to_string(raw.shape()) + " does not match checkpoint shape " +
                            revq::to_string(layout.shape));
  }
  const auto groups = revq::reshape_to_groups(revq::normalize(raw, stats), layout.spec());
  cb.check_compatible(groups.tokens, groups.dim);
  if (rect.tokens() != groups.tokens || rect.dim() != groups.dim) {
    throw revq::ConfigError("rectifier expects " + std::to_string(rect.tokens()) + " tokens of dim " +
                            std::to_string(rect.dim()) + ", data has " + std::to_string(groups.tokens) + " x " +
                            std::to_string(groups.dim));
  }
  const auto ev = revq::evaluate<float>(groups, cb, rect, f.batch_size);
  const double bits = static_cast<double>(groups.tokens) * std::log2(static_cast<double>(cb.codes_per_group()));
  const json report{{"qua_loss", ev.qua_loss},
                    {"dec_loss", ev.dec_loss},
                    {"utilization", ev.utilization.overall},
                    {"utilization_min_group", ev.utilization.min_group},
                    {"tokens_per_sample", groups.tokens},
                    {"bits_per_sample", bits}};
  std::cout << report.dump(2) << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------
// toy2d

struct ToyFlags {
  std::string experiment;
  std::uint64_t seed = 1;
  std::string out = "toy2d";
};

void add_toy(CLI::App& app, ToyFlags& f) {
  auto* cmd = app.add_subcommand("toy2d", "Run a 2-D toy comparison and write per-epoch trajectories");
  cmd->add_option("--experiment", f.experiment, "multigroup or reset")->required()->check(CLI::IsMember({"multigroup", "reset"}));
  cmd->add_option("--seed", f.seed, "Random seed")->capture_default_str();
  cmd->add_option("--out", f.out, "Output directory")->capture_default_str();
}

int run_toy(const ToyFlags& f) {
  const bool multigroup = f.experiment == "multigroup";
  const auto cmp = multigroup ? revq::run_multigroup_experiment(f.seed) : revq::run_reset_experiment(f.seed);
  const fs::path out(f.out);
  ensure_dir(out);
  std::ostringstream csv;
  revq::write_trajectory_csv(csv, cmp);
  write_text(out / (f.experiment + ".csv"), csv.str());

  json summary{{"experiment", f.experiment}, {"seed", f.seed}, {"ratio", cmp.ratio()}};
  for (const auto* v : {&cmp.baseline, &cmp.improved}) {
    summary[v->name] = {{"final_error", v->final_error}, {"utilization", v->utilization}};
  }
  write_text(out / (f.experiment + "_summary.json"), summary.dump(2) + "\n");
  std::cout << summary.dump() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------
// fitcurve

struct FitFlags {
  std::string points;
  bool sweep = false;
  std::string out = "scaling.csv";
  std::uint32_t dim = 32;
  std::size_t clusters = 64;
  std::size_t samples = 2048;
  double noise = 0.1;
  double threshold = 0.05;
  std::vector<std::size_t> token_lengths{4, 8, 16, 32};
  std::vector<std::size_t> grid{1, 2, 4, 8, 16, 32, 64, 128, 256};
  std::size_t epochs = 20;
  std::size_t batch_size = 128;
  std::uint64_t seed = 1;
};

void add_fit(CLI::App& app, FitFlags& f) {
  auto* cmd = app.add_subcommand("fitcurve", "Fit log10(codes) against log10(tokens)");
  auto* pts = cmd->add_option("--points", f.points, "CSV with columns tokens,codes")->check(CLI::ExistingFile);
  auto* sw = cmd->add_flag("--sweep", f.sweep, "Measure points with a minimum-codebook sweep on synthetic clusters");
  pts->excludes(sw);
  cmd->add_option("--out", f.out, "Output CSV")->capture_default_str();
  cmd->add_option("--dim", f.dim, "Sweep: latent channels")->capture_default_str();
  cmd->add_option("--clusters", f.clusters, "Sweep: cluster count")->capture_default_str();
  cmd->add_option("--samples", f.samples, "Sweep: sample count")->capture_default_str();
  cmd->add_option("--noise", f.noise, "Sweep: per-coordinate noise std")->capture_default_str();
  cmd->add_option("--threshold", f.threshold, "Sweep: per-scalar MSE target")->capture_default_str()->check(CLI::PositiveNumber);
  cmd->add_option("--token-lengths", f.token_lengths, "Sweep: token lengths")->delimiter(',')->capture_default_str();
  cmd->add_option("--grid", f.grid, "Sweep: ascending codebook sizes")->delimiter(',')->capture_default_str();
  cmd->add_option("--epochs", f.epochs, "Sweep: epochs per trial")->capture_default_str();
  cmd->add_option("--batch-size", f.batch_size, "Sweep: minibatch size")->capture_default_str()->check(CLI::PositiveNumber);
  cmd->add_option("--seed", f.seed, "Sweep: random seed")->capture_default_str();
}

std::vector<revq::ScalingPoint> read_points_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw revq::FormatError(revq::FormatErrorKind::Io, "cannot open '" + path + "'");
  std::vector<revq::ScalingPoint> pts;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string a, b;
    if (!std::getline(ls, a, ',') || !std::getline(ls, b, ',')) {
      throw UsageError(path + ":" + std::to_string(lineno) + ": expected 'tokens,codes'");
    }
    try {
      pts.push_back({std::stod(a), std::stod(b)});
    } catch (const std::exception&) {
      if (pts.empty() && lineno == 1) continue;  // header row
      throw UsageError(path + ":" + std::to_string(lineno) + ": not a number");
    }
  }
  return pts;
}

int run_fit(const FitFlags& f) {
  std::vector<revq::ScalingPoint> pts;
  std::vector<std::string> notes;
  if (f.sweep) {
    const auto data = revq::gen_corner_clusters(f.samples, f.dim, f.clusters, f.noise, f.seed);
    revq::TrainConfig cfg;
    cfg.epochs = f.epochs;
    cfg.batch_size = f.batch_size;
    cfg.seed = f.seed;
    const auto sweep = revq::scaling_sweep(data, f.token_lengths, f.threshold, f.grid, cfg);
    for (const auto& s : sweep) {
      std::cerr << "tokens " << s.tokens << ": ";
      for (const auto& t : s.search.trials) std::cerr << t.codes << "->" << t.mse << ' ';
      std::cerr << (s.search.codes ? "pass" : "none") << '\n';
    }
    pts = revq::sweep_points(sweep);
  } else if (!f.points.empty()) {
    pts = read_points_csv(f.points);
  } else {
    throw UsageError("fitcurve needs --points CSV or --sweep");
  }
  if (pts.size() < 2) throw UsageError("fitcurve needs at least 2 points, got " + std::to_string(pts.size()));

  const auto fit = revq::fit_scaling_law(pts);
  std::ostringstream csv;
  csv.precision(17);
  csv << "tokens,codes,fitted_codes\n";
  for (const auto& p : pts) csv << p.tokens << ',' << p.codes << ',' << fit.predict(p.tokens) << '\n';
  write_text(f.out, csv.str());
  std::cout << json{{"slope", fit.slope}, {"intercept", fit.intercept}, {"points", pts.size()}}.dump() << '\n';
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"revq: multi-group vector quantization with a learnable rectifier"};
  app.require_subcommand(1);
  TrainFlags train;
  EvalFlags eval;
  ToyFlags toy;
  FitFlags fit;
  add_train(app, train);
  add_eval(app, eval);
  add_toy(app, toy);
  add_fit(app, fit);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (app.got_subcommand("train")) return run_train(train);
    if (app.got_subcommand("eval")) return run_eval(eval);
    if (app.got_subcommand("toy2d")) return run_toy(toy);
    return run_fit(fit);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const revq::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const revq::FormatError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.kind() == revq::FormatErrorKind::Io ? kExitRuntime : kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}
