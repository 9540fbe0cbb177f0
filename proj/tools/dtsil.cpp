// Command-line front end: run experiments, plot and compare them, and the
// gradient-check, oracle and buffer inspection utilities.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "dtsil/checks.hpp"
#include "dtsil/error.hpp"
#include "dtsil/harness.hpp"
#include "dtsil/oracle.hpp"

namespace fs = std::filesystem;
using namespace dtsil;

namespace {

int cmd_run(const std::string& config_path, const std::string& seeds, const std::string& root_flag, int jobs,
            bool attention, bool quiet, int print_every) {
  harness::ExperimentConfig cfg = harness::load_config(config_path);
  if (!seeds.empty()) cfg.seeds = harness::parse_seed_list(seeds);
  if (attention) cfg.attention = true;
  const std::string root = root_flag.empty() ? harness::output_root() : root_flag;
  harness::Progress progress;
  if (!quiet)
    progress = [print_every](std::uint64_t seed, const IterationReport& r) {
      if (r.iteration % print_every != 0) return;
      std::printf("seed %llu  it %lld  steps %lld  episodes %lld  recent %.3f  best %.2f  buffer %zu  p %.3f\n",
                  static_cast<unsigned long long>(seed), static_cast<long long>(r.iteration),
                  static_cast<long long>(r.env_steps), static_cast<long long>(r.episodes), r.recent_mean,
                  r.best_return, r.buffer_size, r.p);
      std::fflush(stdout);
    };
  const auto outcomes = harness::run_experiment(cfg, root, jobs, progress);
  int status = 0;
  for (const auto& o : outcomes) {
    if (o.failed) {
      std::fprintf(stderr, "seed %llu failed: %s\n", static_cast<unsigned long long>(o.seed), o.error.c_str());
      status = 1;
    } else {
      std::printf("seed %llu done: %lld steps, recent %.3f, best %.2f -> %s\n",
                  static_cast<unsigned long long>(o.seed), static_cast<long long>(o.env_steps), o.recent_mean,
                  o.best_return, o.dir.c_str());
    }
  }
  return status;
}

std::vector<harness::PlotSeries> load_series(const std::vector<std::string>& inputs) {
  std::vector<harness::PlotSeries> series;
  harness::PlotSeries loose{"runs", {}};
  for (const std::string& in : inputs) {
    if (fs::is_regular_file(in)) {
      loose.runs.push_back(harness::read_metrics(in));
      continue;
    }
    harness::PlotSeries s{fs::path(in).lexically_normal().filename().string(), {}};
    if (s.label.empty() || s.label == ".") s.label = in;
    for (const std::string& p : harness::metrics_paths(in)) s.runs.push_back(harness::read_metrics(p));
    series.push_back(std::move(s));
  }
  if (!loose.runs.empty()) series.push_back(std::move(loose));
  return series;
}

int cmd_plot(const std::vector<std::string>& inputs, const std::string& out, const std::string& column,
             const std::string& title) {
  const std::string svg = harness::plot_svg(load_series(inputs), column, title);
  std::ofstream f(out, std::ios::binary);
  if (!f) throw Error("cannot write " + out);
  f << svg;
  std::printf("wrote %s\n", out.c_str());
  return 0;
}

int cmd_compare(const std::vector<std::string>& runs, double threshold) {
  std::vector<harness::CompareRow> rows;
  for (const std::string& run : runs) {
    std::vector<harness::MetricsFile> files;
    for (const std::string& p : harness::metrics_paths(run)) files.push_back(harness::read_metrics(p));
    rows.push_back(harness::summarize_run(run, files, threshold));
  }
  std::cout << harness::format_compare(rows, threshold);
  return 0;
}

int cmd_gradcheck(double tol, std::uint64_t seed) {
  bool ok = true;
  for (const NamedCheck& c : gradient_check_suite(tol, seed)) {
    std::size_t checked = 0;
    for (const auto& e : c.report.entries) checked += e.checked;
    std::printf("%-28s %s  worst rel err %.3e  (%zu elements)\n", c.name.c_str(), c.report.passed ? "ok  " : "FAIL",
                c.report.worst, checked);
    ok = ok && c.report.passed;
  }
  std::printf("%s at tolerance %.1e\n", ok ? "all checks passed" : "gradient check FAILED", tol);
  return ok ? 0 : 1;
}

int cmd_oracle(const std::string& name, const std::string& map, int size, int horizon, bool per_start) {
  env::EnvSpec spec;
  spec.name = name;
  spec.map_path = map;
  spec.size = size;
  spec.horizon = horizon;
  auto world = env::make_env(spec);
  if (auto* ag = dynamic_cast<env::AppleGold*>(world.get())) {
    const auto best = env::optimal_return(*ag, true);
    const auto apples = env::optimal_return(*ag, false);
    std::printf("apple_gold optimal_return mean %.4f min %.4f max %.4f\n", best.mean, best.min, best.max);
    std::printf("apple_gold apples_only    mean %.4f min %.4f max %.4f\n", apples.mean, apples.min, apples.max);
    std::printf("shortest path to gold: %d steps\n", env::shortest_gold_path(*ag));
    if (per_start)
      for (std::size_t i = 0; i < best.per_start.size(); ++i)
        std::printf("  start (%d,%d): %.4f\n", ag->start_cells()[i].first, ag->start_cells()[i].second,
                    best.per_start[i]);
  } else {
    const auto r = env::optimal_return(*world);
    std::printf("%s N=%d optimal_return %.4f\n", name.c_str(), size, r.mean);
  }
  return 0;
}

int cmd_buffer_dump(const std::string& path, bool grid) {
  TrajectoryBuffer buf;
  buf.restore(path);
  const auto top = buf.top_k_indices();
  std::printf("%zu entries, %lld updates, delta %.3g, top_k %zu\n", buf.size(),
              static_cast<long long>(buf.total_updates()), buf.config().delta, buf.config().top_k);
  std::printf("%5s %4s %4s %8s %8s %10s %6s %s\n", "index", "x", "y", "r_plus", "count", "return", "length", "top");
  for (std::size_t i = 0; i < buf.size(); ++i) {
    const BufferEntry& e = buf.entry(i);
    const bool is_top = std::find(top.begin(), top.end(), i) != top.end();
    std::printf("%5zu %4d %4d %8.2f %8lld %10.3f %6zu %s\n", i, e.representative.x, e.representative.y,
                e.representative.r_plus, static_cast<long long>(e.count), e.cached_return, e.cached_length,
                is_top ? "*" : "");
  }
  if (grid && !buf.empty()) {
    int w = 0, h = 0;
    std::vector<env::CellCount> cells;
    for (const BufferEntry& e : buf.entries()) {
      w = std::max(w, e.representative.x + 1);
      h = std::max(h, e.representative.y + 1);
      cells.push_back({e.representative.x, e.representative.y, 1});
    }
    const env::Grid g = env::render_occupancy(w, h, cells);
    std::printf("clusters per cell:\n");
    for (const auto& row : g) {
      for (auto v : row) std::printf("%c", v == 0 ? '.' : v < 10 ? static_cast<char>('0' + v) : '+');
      std::printf("\n");
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Trajectory-conditioned self-imitation experiments on Apple-Gold and Deep Sea.\n"
               "Output goes under $" + std::string(harness::kOutputRootEnv) + " (default ./runs)."};
  app.require_subcommand(1);

  std::string config, seeds, root;
  int jobs = 1, print_every = 10;
  bool attention = false, quiet = false;
  auto* run = app.add_subcommand("run", "Train every seed of an experiment config");
  run->add_option("-c,--config", config, "Experiment config (INI)")->required()->check(CLI::ExistingFile);
  run->add_option("--seeds", seeds, "Override the seed list, e.g. 0-4 or 1,3");
  run->add_option("--output-root", root, "Output root; overrides $" + std::string(harness::kOutputRootEnv));
  run->add_option("-j,--jobs", jobs, "Seeds to run at once as separate processes")->check(CLI::PositiveNumber);
  run->add_flag("--attention", attention, "Export attention.csv from a greedy rollout at the end");
  run->add_flag("-q,--quiet", quiet, "No per-iteration progress");
  run->add_option("--print-every", print_every, "Progress cadence in iterations")->check(CLI::PositiveNumber);

  std::vector<std::string> plot_inputs;
  std::string plot_out = "plot.svg", column = "recent_mean", title;
  auto* plot = app.add_subcommand("plot", "SVG learning curves: run dirs form one series each, loose CSVs another");
  plot->add_option("inputs", plot_inputs, "Run directories or metrics.csv files")->required();
  plot->add_option("-o,--out", plot_out, "Output SVG path");
  plot->add_option("--column", column, "Metrics column on the y axis");
  plot->add_option("--title", title, "Plot title");

  std::vector<std::string> runs;
  double threshold = 8.0;
  auto* compare = app.add_subcommand("compare", "Final and best returns, and steps to a threshold per run dir");
  compare->add_option("runs", runs, "Run directories")->required();
  compare->add_option("-t,--threshold", threshold, "Recent-mean threshold");

  double tol = 1e-4;
  std::uint64_t gc_seed = 0;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of ops, GRU, attention and losses");
  gradcheck->add_option("--tol", tol, "Relative error tolerance");
  gradcheck->add_option("--seed", gc_seed, "Seed for the random cases");

  std::string env_name = "deep_sea", map = "maps/apple_gold.txt";
  int size = 10, horizon = 150;
  bool per_start = false;
  auto* oracle = app.add_subcommand("oracle", "Print the optimal return of an environment");
  oracle->add_option("--env", env_name, "apple_gold or deep_sea")->check(CLI::IsMember({"apple_gold", "deep_sea"}));
  oracle->add_option("--map", map, "Apple-Gold map file");
  oracle->add_option("--size", size, "Deep Sea N");
  oracle->add_option("--horizon", horizon, "Apple-Gold episode length");
  oracle->add_flag("--per-start", per_start, "Also list the optimum for every start cell");

  std::string snapshot;
  bool grid = false;
  auto* dump = app.add_subcommand("buffer-dump", "List the entries of a buffer snapshot");
  dump->add_option("snapshot", snapshot, "buffer_*.jsonl file")->required()->check(CLI::ExistingFile);
  dump->add_flag("--grid", grid, "Also draw clusters per cell");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*run) return cmd_run(config, seeds, root, jobs, attention, quiet, print_every);
    if (*plot) return cmd_plot(plot_inputs, plot_out, column, title);
    if (*compare) return cmd_compare(runs, threshold);
    if (*gradcheck) return cmd_gradcheck(tol, gc_seed);
    if (*oracle) return cmd_oracle(env_name, map, size, horizon, per_start);
    if (*dump) return cmd_buffer_dump(snapshot, grid);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
