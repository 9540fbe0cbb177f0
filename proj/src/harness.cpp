#include "dtsil/harness.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "dtsil/error.hpp"
#include "dtsil/imitation.hpp"

namespace fs = std::filesystem;

namespace dtsil::harness {

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::string fmt_exact(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(trim(cur));
  return out;
}

template <class T>
T parse_integer(const std::string& key, const std::string& value) {
  T out{};
  const char* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end || value.empty())
    throw ConfigError(key + ": expected an integer, got '" + value + "'");
  return out;
}

double parse_double(const std::string& key, const std::string& value) {
  errno = 0;
  char* end = nullptr;
  const double v = std::strtod(value.c_str(), &end);
  if (value.empty() || end != value.c_str() + value.size() || errno != 0 || !std::isfinite(v))
    throw ConfigError(key + ": expected a number, got '" + value + "'");
  return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  throw ConfigError(key + ": expected true or false, got '" + value + "'");
}

// "0,1,2" or "0-4", or a mix.
std::vector<std::uint64_t> parse_seeds(const std::string& key, const std::string& value) {
  std::vector<std::uint64_t> seeds;
  for (const std::string& part : split(value, ',')) {
    const auto dash = part.find('-');
    if (dash == std::string::npos) {
      seeds.push_back(parse_integer<std::uint64_t>(key, part));
      continue;
    }
    const auto lo = parse_integer<std::uint64_t>(key, trim(part.substr(0, dash)));
    const auto hi = parse_integer<std::uint64_t>(key, trim(part.substr(dash + 1)));
    if (hi < lo) throw ConfigError(key + ": empty range '" + part + "'");
    for (std::uint64_t s = lo; s <= hi; ++s) seeds.push_back(s);
  }
  return seeds;
}

using Setter = std::function<void(ExperimentConfig&, const std::string& key, const std::string& value)>;
using Getter = std::function<std::string(const ExperimentConfig&)>;

struct Field {
  std::string key;  // section.name
  Setter set;
  Getter get;
};

#define DTSIL_INT_FIELD(k, member, T)                                                                 \
  Field {                                                                                             \
    k, [](ExperimentConfig& c, const std::string& key, const std::string& v) {                        \
      c.member = parse_integer<T>(key, v);                                                            \
    },                                                                                                \
        [](const ExperimentConfig& c) { return std::to_string(c.member); }                            \
  }
#define DTSIL_DOUBLE_FIELD(k, member)                                                                 \
  Field {                                                                                             \
    k, [](ExperimentConfig& c, const std::string& key, const std::string& v) {                        \
      c.member = parse_double(key, v);                                                                \
    },                                                                                                \
        [](const ExperimentConfig& c) { return fmt_exact(c.member); }                                 \
  }
#define DTSIL_BOOL_FIELD(k, member)                                                                   \
  Field {                                                                                             \
    k, [](ExperimentConfig& c, const std::string& key, const std::string& v) {                        \
      c.member = parse_bool(key, v);                                                                  \
    },                                                                                                \
        [](const ExperimentConfig& c) { return std::string(c.member ? "true" : "false"); }            \
  }
#define DTSIL_OPTIONAL_DOUBLE_FIELD(k, member)                                                        \
  Field {                                                                                             \
    k, [](ExperimentConfig& c, const std::string& key, const std::string& v) {                        \
      if (v == "none" || v.empty())                                                                   \
        c.member.reset();                                                                             \
      else                                                                                            \
        c.member = parse_double(key, v);                                                              \
    },                                                                                                \
        [](const ExperimentConfig& c) { return c.member ? fmt_exact(*c.member) : std::string("none"); } \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      {"experiment.name", [](ExperimentConfig& c, const std::string& key, const std::string& v) {
         if (v.empty() || v.find('/') != std::string::npos) throw ConfigError(key + ": must be a plain directory name");
         c.name = v;
       },
       [](const ExperimentConfig& c) { return c.name; }},
      {"experiment.algorithm",
       [](ExperimentConfig& c, const std::string& key, const std::string& v) {
         try {
           c.train.algorithm = parse_algorithm(v);
         } catch (const ConfigError& e) {
           throw ConfigError(key + ": " + e.what());
         }
       },
       [](const ExperimentConfig& c) { return algorithm_name(c.train.algorithm); }},
      {"experiment.seeds",
       [](ExperimentConfig& c, const std::string& key, const std::string& v) { c.seeds = parse_seeds(key, v); },
       [](const ExperimentConfig& c) {
         std::string s;
         for (std::size_t i = 0; i < c.seeds.size(); ++i) s += (i ? "," : "") + std::to_string(c.seeds[i]);
         return s;
       }},
      DTSIL_INT_FIELD("experiment.log_every", log_every, int),
      DTSIL_BOOL_FIELD("experiment.attention", attention),
      DTSIL_OPTIONAL_DOUBLE_FIELD("experiment.stop_at_mean", stop_at_mean),

      {"env.name",
       [](ExperimentConfig& c, const std::string& key, const std::string& v) {
         if (v != "apple_gold" && v != "deep_sea") throw ConfigError(key + ": unknown environment '" + v + "'");
         c.env.name = v;
       },
       [](const ExperimentConfig& c) { return c.env.name; }},
      {"env.map", [](ExperimentConfig& c, const std::string&, const std::string& v) { c.env.map_path = v; },
       [](const ExperimentConfig& c) { return c.env.map_path; }},
      DTSIL_INT_FIELD("env.size", env.size, int),
      DTSIL_INT_FIELD("env.horizon", env.horizon, int),

      DTSIL_INT_FIELD("train.total_steps", train.total_steps, std::int64_t),
      DTSIL_INT_FIELD("train.workers", train.workers, int),
      DTSIL_INT_FIELD("train.rollout_steps", train.rollout_steps, int),
      DTSIL_DOUBLE_FIELD("train.gamma", train.gamma),
      DTSIL_INT_FIELD("train.nstep", train.nstep, int),
      DTSIL_OPTIONAL_DOUBLE_FIELD("train.gae_lambda", train.gae_lambda),
      DTSIL_DOUBLE_FIELD("train.clip", train.clip),
      DTSIL_INT_FIELD("train.epochs", train.epochs, int),
      DTSIL_INT_FIELD("train.minibatches", train.minibatches, int),
      DTSIL_DOUBLE_FIELD("train.entropy_coef", train.entropy_coef),
      DTSIL_DOUBLE_FIELD("train.value_coef", train.value_coef),
      DTSIL_DOUBLE_FIELD("train.lr", train.lr),
      DTSIL_BOOL_FIELD("train.lr_decay", train.lr_decay),
      DTSIL_DOUBLE_FIELD("train.max_grad_norm", train.max_grad_norm),
      DTSIL_DOUBLE_FIELD("train.sl_coef", train.sl_coef),
      DTSIL_INT_FIELD("train.sl_batch", train.sl_batch, int),
      DTSIL_INT_FIELD("train.sl_warmup", train.sl_warmup, std::size_t),
      DTSIL_INT_FIELD("train.sil_batch", train.sil_batch, int),
      DTSIL_INT_FIELD("train.sil_capacity", train.sil_capacity, std::size_t),
      DTSIL_DOUBLE_FIELD("train.sil_coef", train.sil_coef),
      DTSIL_DOUBLE_FIELD("train.sil_value_coef", train.sil_value_coef),
      DTSIL_DOUBLE_FIELD("train.p_start", train.p_start),
      DTSIL_DOUBLE_FIELD("train.p_end", train.p_end),
      DTSIL_DOUBLE_FIELD("train.p_decay_fraction", train.p_decay_fraction),
      DTSIL_OPTIONAL_DOUBLE_FIELD("train.bonus_scale", train.bonus_scale),

      DTSIL_DOUBLE_FIELD("buffer.delta", train.buffer.delta),
      DTSIL_INT_FIELD("buffer.top_k", train.buffer.top_k, std::size_t),
      DTSIL_INT_FIELD("buffer.capacity", train.buffer.capacity, std::size_t),

      DTSIL_INT_FIELD("tracker.window", train.tracker.window, int),
      DTSIL_DOUBLE_FIELD("tracker.delta", train.tracker.delta),
      DTSIL_DOUBLE_FIELD("tracker.r_im", train.tracker.r_im),

      DTSIL_INT_FIELD("policy.demo_hidden", train.policy.demo_hidden, std::size_t),
      DTSIL_INT_FIELD("policy.agent_hidden", train.policy.agent_hidden, std::size_t),
      DTSIL_INT_FIELD("policy.attention_dim", train.policy.attention_dim, std::size_t),
      DTSIL_INT_FIELD("policy.proj_dim", train.policy.proj_dim, std::size_t),
      DTSIL_INT_FIELD("policy.head_hidden", train.policy.head_hidden, std::size_t),
      DTSIL_INT_FIELD("policy.max_demo_len", train.policy.max_demo_len, std::size_t),
  };
  return table;
}

#undef DTSIL_INT_FIELD
#undef DTSIL_DOUBLE_FIELD
#undef DTSIL_BOOL_FIELD
#undef DTSIL_OPTIONAL_DOUBLE_FIELD

void validate(const ExperimentConfig& c) {
  if (c.seeds.empty()) throw ConfigError("experiment.seeds: at least one seed required");
  if (c.log_every < 1) throw ConfigError("experiment.log_every: must be >= 1");
  if (c.env.name.empty()) throw ConfigError("env.name: required");
  if (c.env.name == "apple_gold") {
    if (c.env.map_path.empty()) throw ConfigError("env.map: required for apple_gold");
    if (!fs::exists(c.env.map_path)) throw ConfigError("env.map: no such file '" + c.env.map_path + "'");
    if (c.env.horizon < 1) throw ConfigError("env.horizon: must be >= 1");
  }
  if (c.env.name == "deep_sea" && c.env.size < 2) throw ConfigError("env.size: must be >= 2");
  c.train.validate();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

std::string percent_tag(int pct) {
  char buf[8];
  std::snprintf(buf, sizeof buf, "%03d", pct);
  return buf;
}

std::string metrics_meta(const ExperimentConfig& c, std::uint64_t seed) {
  std::string env = c.env.name;
  if (c.env.name == "deep_sea") env += std::to_string(c.env.size);
  return std::string("# schema=") + kMetricsSchema + " algorithm=" + algorithm_name(c.train.algorithm) +
         " env=" + env + " seed=" + std::to_string(seed) + " total_steps=" + std::to_string(c.train.total_steps);
}

std::string format_row(const MetricsRow& r) {
  std::string s;
  s += std::to_string(r.iteration) + "," + std::to_string(r.env_steps) + "," + std::to_string(r.episodes) + ",";
  s += fmt(r.recent_mean) + "," + fmt(r.best_return) + "," + std::to_string(r.buffer_size) + ",";
  s += fmt(r.explore_fraction) + "," + fmt(r.p) + "," + fmt(r.lr) + ",";
  s += fmt(r.policy_loss) + "," + fmt(r.value_loss) + "," + fmt(r.entropy) + ",";
  s += fmt(r.sl_loss) + "," + fmt(r.sil_loss) + "," + fmt(r.clip_fraction) + "," + fmt(r.approx_kl) + ",";
  s += std::to_string(r.aborted_updates);
  return s;
}

SeedOutcome outcome_from_dir(std::uint64_t seed, const std::string& dir) {
  SeedOutcome o;
  o.seed = seed;
  o.dir = dir;
  const fs::path marker = fs::path(dir) / kFailureMarker;
  if (fs::exists(marker)) {
    o.failed = true;
    std::ifstream in(marker);
    std::getline(in, o.error);
  }
  const fs::path metrics = fs::path(dir) / "metrics.csv";
  if (fs::exists(metrics)) {
    try {
      MetricsFile f = read_metrics(metrics.string());
      if (!f.rows.empty()) {
        o.env_steps = f.rows.back().env_steps;
        o.recent_mean = f.rows.back().recent_mean;
        o.best_return = f.rows.back().best_return;
      }
    } catch (const Error&) {
    }
  } else if (!o.failed) {
    o.failed = true;
    o.error = "no metrics written";
  }
  return o;
}

}  // namespace

// ---- config -----------------------------------------------------------------

ExperimentConfig parse_config(const std::string& text, const std::string& base_dir) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config: " + e.message() + " at line " + std::to_string(e.line()));
  }
  std::map<std::string, const Field*> index;
  for (const Field& f : fields()) index[f.key] = &f;

  ExperimentConfig c;
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) throw ConfigError("unknown key '" + section + "' outside any section");
    for (const auto& [name, value] : body) {
      const std::string key = section + "." + name;
      auto it = index.find(key);
      if (it == index.end()) throw ConfigError("unknown key '" + key + "'");
      it->second->set(c, key, trim(value.data()));
    }
  }
  if (!c.env.map_path.empty() && fs::path(c.env.map_path).is_relative())
    c.env.map_path = fs::absolute(fs::path(base_dir) / c.env.map_path).lexically_normal().string();
  validate(c);
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), fs::path(path).parent_path().string());
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  auto seeds = parse_seeds("seeds", text);
  if (seeds.empty()) throw ConfigError("seeds: at least one seed required");
  return seeds;
}

std::string format_config(const ExperimentConfig& config) {
  std::string out, section;
  for (const Field& f : fields()) {
    const auto dot = f.key.find('.');
    const std::string sec = f.key.substr(0, dot);
    if (sec != section) {
      out += (section.empty() ? "" : "\n") + std::string("[") + sec + "]\n";
      section = sec;
    }
    out += f.key.substr(dot + 1) + " = " + f.get(config) + "\n";
  }
  return out;
}

std::string output_root() {
  const char* root = std::getenv(kOutputRootEnv);
  return root && *root ? root : "runs";
}

// ---- metrics ----------------------------------------------------------------

const std::vector<std::string>& metrics_columns() {
  static const std::vector<std::string> cols = {
      "iteration",    "env_steps", "episodes", "recent_mean",   "best_return", "buffer_size",
      "explore_fraction", "p",     "lr",       "policy_loss",   "value_loss",  "entropy",
      "sl_loss",      "sil_loss",  "clip_fraction", "approx_kl", "aborted_updates"};
  return cols;
}

MetricsRow to_row(const IterationReport& r) {
  MetricsRow m;
  m.iteration = r.iteration;
  m.env_steps = r.env_steps;
  m.episodes = r.episodes;
  m.recent_mean = r.recent_mean;
  m.best_return = r.best_return;
  m.buffer_size = static_cast<std::int64_t>(r.buffer_size);
  m.explore_fraction = r.explore_fraction;
  m.p = r.p;
  m.lr = r.lr;
  m.policy_loss = r.ppo.policy_loss;
  m.value_loss = r.ppo.value_loss;
  m.entropy = r.ppo.entropy;
  m.sl_loss = r.sl_loss;
  m.sil_loss = r.sil_loss;
  m.clip_fraction = r.ppo.clip_fraction;
  m.approx_kl = r.ppo.approx_kl;
  m.aborted_updates = r.ppo.aborted;
  return m;
}

double column_value(const MetricsRow& r, const std::string& column) {
  const std::map<std::string, double> values = {
      {"iteration", static_cast<double>(r.iteration)},
      {"env_steps", static_cast<double>(r.env_steps)},
      {"episodes", static_cast<double>(r.episodes)},
      {"recent_mean", r.recent_mean},
      {"best_return", r.best_return},
      {"buffer_size", static_cast<double>(r.buffer_size)},
      {"explore_fraction", r.explore_fraction},
      {"p", r.p},
      {"lr", r.lr},
      {"policy_loss", r.policy_loss},
      {"value_loss", r.value_loss},
      {"entropy", r.entropy},
      {"sl_loss", r.sl_loss},
      {"sil_loss", r.sil_loss},
      {"clip_fraction", r.clip_fraction},
      {"approx_kl", r.approx_kl},
      {"aborted_updates", static_cast<double>(r.aborted_updates)},
  };
  auto it = values.find(column);
  if (it == values.end()) throw ConfigError("unknown metrics column '" + column + "'");
  return it->second;
}

MetricsFile read_metrics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read metrics '" + path + "'");
  MetricsFile f;
  f.path = path;
  std::string line;
  if (!std::getline(in, line) || line.rfind("# ", 0) != 0) throw FormatError(path + ": missing schema line");
  std::istringstream meta(line.substr(2));
  std::string kv;
  while (meta >> kv) {
    const auto eq = kv.find('=');
    if (eq != std::string::npos) f.meta[kv.substr(0, eq)] = kv.substr(eq + 1);
  }
  if (f.meta["schema"] != kMetricsSchema)
    throw FormatError(path + ": schema '" + f.meta["schema"] + "', expected " + kMetricsSchema);
  std::string expected;
  for (std::size_t i = 0; i < metrics_columns().size(); ++i) expected += (i ? "," : "") + metrics_columns()[i];
  if (!std::getline(in, line) || trim(line) != expected) throw FormatError(path + ": header does not match schema");
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const auto cells = split(line, ',');
    if (cells.size() != metrics_columns().size()) throw FormatError(path + ": malformed row '" + line + "'");
    MetricsRow r;
    try {
      r.iteration = std::stoll(cells[0]);
      r.env_steps = std::stoll(cells[1]);
      r.episodes = std::stoll(cells[2]);
      r.recent_mean = std::stod(cells[3]);
      r.best_return = std::stod(cells[4]);
      r.buffer_size = std::stoll(cells[5]);
      r.explore_fraction = std::stod(cells[6]);
      r.p = std::stod(cells[7]);
      r.lr = std::stod(cells[8]);
      r.policy_loss = std::stod(cells[9]);
      r.value_loss = std::stod(cells[10]);
      r.entropy = std::stod(cells[11]);
      r.sl_loss = std::stod(cells[12]);
      r.sil_loss = std::stod(cells[13]);
      r.clip_fraction = std::stod(cells[14]);
      r.approx_kl = std::stod(cells[15]);
      r.aborted_updates = std::stoll(cells[16]);
    } catch (const std::exception&) {
      throw FormatError(path + ": malformed row '" + line + "'");
    }
    if (!f.rows.empty() && r.env_steps <= f.rows.back().env_steps)
      throw FormatError(path + ": env_steps not strictly increasing");
    f.rows.push_back(r);
  }
  return f;
}

// ---- occupancy --------------------------------------------------------------

std::size_t Occupancy::covered_cells() const {
  std::size_t n = 0;
  for (const auto& row : clusters)
    for (auto v : row) n += v > 0;
  return n;
}

std::int64_t Occupancy::total_clusters() const {
  std::int64_t n = 0;
  for (const auto& row : clusters)
    for (auto v : row) n += v;
  return n;
}

Occupancy occupancy(const Trainer& trainer) {
  const env::Environment& e = trainer.environment();
  Occupancy o;
  o.width = e.width();
  o.height = e.height();
  std::vector<env::CellCount> reps, visits;
  for (const BufferEntry& entry : trainer.buffer().entries())
    reps.push_back({entry.representative.x, entry.representative.y, 1});
  auto add_visits = [&](const Trajectory& t) {
    for (const env::Embedding& s : t.embeddings) visits.push_back({s.x, s.y, 1});
  };
  if (trainer.config().algorithm == Algorithm::kPpoSil) {
    for (const Trajectory& t : trainer.sil_replay()) add_visits(t);
  } else {
    for (const BufferEntry& entry : trainer.buffer().entries()) add_visits(entry.best);
  }
  o.clusters = env::render_occupancy(o.width, o.height, reps);
  o.visits = env::render_occupancy(o.width, o.height, visits);
  return o;
}

void write_occupancy(const Occupancy& o, const std::string& path) {
  std::string s = "# occupancy width=" + std::to_string(o.width) + " height=" + std::to_string(o.height) + "\n";
  s += "x,y,clusters,visits\n";
  for (int y = 0; y < o.height; ++y)
    for (int x = 0; x < o.width; ++x)
      s += std::to_string(x) + "," + std::to_string(y) + "," + std::to_string(o.clusters[y][x]) + "," +
           std::to_string(o.visits[y][x]) + "\n";
  write_text(path, s);
}

Occupancy read_occupancy(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read occupancy '" + path + "'");
  std::string line;
  Occupancy o;
  if (!std::getline(in, line) || std::sscanf(line.c_str(), "# occupancy width=%d height=%d", &o.width, &o.height) != 2 ||
      o.width < 1 || o.height < 1)
    throw FormatError(path + ": bad occupancy header");
  std::getline(in, line);
  o.clusters.assign(o.height, std::vector<std::int64_t>(o.width, 0));
  o.visits = o.clusters;
  while (std::getline(in, line)) {
    int x = 0, y = 0;
    long long c = 0, v = 0;
    if (std::sscanf(line.c_str(), "%d,%d,%lld,%lld", &x, &y, &c, &v) != 4 || x < 0 || y < 0 || x >= o.width ||
        y >= o.height)
      throw FormatError(path + ": malformed row '" + line + "'");
    o.clusters[y][x] = c;
    o.visits[y][x] = v;
  }
  return o;
}

// ---- greedy rollouts --------------------------------------------------------

GreedyRollout greedy_rollout(const Trainer& trainer, const Trajectory& demo) {
  if (demo.embeddings.empty()) throw Error("greedy rollout needs a demonstration with a start state");
  auto world = trainer.environment().clone();
  env::Step s;
  if (auto* ag = dynamic_cast<env::AppleGold*>(world.get())) {
    s = ag->reset_at(demo.embeddings[0].x, demo.embeddings[0].y);
  } else {
    Rng rng(0);
    s = world->reset(rng);
  }
  const TrajectoryPolicy& policy = *trainer.policy();
  PolicyRunner runner(policy);
  const bool conditioned = policy.config().conditioned;
  if (conditioned) runner.set_demo(trainer.embedding_rows(demo.embeddings, demo.embeddings.size()));
  DemoTracker tracker(demo.embeddings, trainer.config().tracker);
  tracker.observe_initial(s.embedding);

  GreedyRollout r;
  r.trajectory.start(s);
  r.u.push_back(tracker.u());
  std::vector<double> h = runner.initial_hidden();
  while (!world->done()) {
    StepOutput out = runner.step(world->obs_features(s.obs), world->embedding_features(s.embedding), h);
    h = out.hidden;
    const int a = static_cast<int>(std::max_element(out.log_probs.begin(), out.log_probs.end()) - out.log_probs.begin());
    if (conditioned) r.attention.push_back(out.alpha);
    s = world->step(a);
    tracker.shape_reward(s.embedding, s.reward);
    r.trajectory.append(a, s);
    r.u.push_back(tracker.u());
  }
  r.trajectory.done = true;
  return r;
}

void write_attention(const GreedyRollout& r, const std::string& path) {
  std::size_t width = 0;
  for (const auto& row : r.attention) width = std::max(width, row.size());
  std::string s = "step,u,action";
  for (std::size_t i = 0; i < width; ++i) s += ",alpha_" + std::to_string(i);
  s += "\n";
  for (std::size_t t = 0; t < r.attention.size(); ++t) {
    s += std::to_string(t) + "," + std::to_string(r.u[t]) + "," + std::to_string(r.trajectory.actions[t]);
    for (std::size_t i = 0; i < width; ++i) s += "," + (i < r.attention[t].size() ? fmt(r.attention[t][i]) : "0");
    s += "\n";
  }
  write_text(path, s);
}

// ---- runs -------------------------------------------------------------------

std::string experiment_dir(const ExperimentConfig& config, const std::string& root) {
  return (fs::path(root) / config.name).string();
}

std::string seed_dir(const ExperimentConfig& config, const std::string& root, std::uint64_t seed) {
  return (fs::path(experiment_dir(config, root)) / ("seed_" + std::to_string(seed))).string();
}

SeedOutcome run_seed(const ExperimentConfig& config, std::uint64_t seed, const std::string& dir,
                     const Progress& progress) {
  SeedOutcome outcome;
  outcome.seed = seed;
  outcome.dir = dir;
  const fs::path base(dir);
  try {
    fs::create_directories(base);
    fs::remove(base / kFailureMarker);
    fs::remove(base / kDoneMarker);
    ExperimentConfig one = config;
    one.seeds = {seed};
    write_text(base / "config.ini", format_config(one));

    auto world = env::make_env(config.env);
    TrainConfig tc = config.train;
    tc.seed = seed;
    Trainer trainer(tc, *world);

    std::ofstream metrics(base / "metrics.csv", std::ios::binary);
    if (!metrics) throw Error("cannot write " + (base / "metrics.csv").string());
    metrics << metrics_meta(config, seed) << "\n";
    for (std::size_t i = 0; i < metrics_columns().size(); ++i) metrics << (i ? "," : "") << metrics_columns()[i];
    metrics << "\n";
    metrics.flush();

    const int milestones[] = {25, 50, 100};
    std::size_t next = 0;
    auto snapshot = [&](int pct) {
      trainer.buffer().snapshot((base / ("buffer_" + percent_tag(pct) + ".jsonl")).string());
      write_occupancy(occupancy(trainer), (base / ("occupancy_" + percent_tag(pct) + ".csv")).string());
    };

    while (!trainer.done()) {
      IterationReport rep = trainer.iterate();
      const bool stop = config.stop_at_mean && trainer.episodes().size() >= Trainer::kRecentWindow &&
                        rep.recent_mean >= *config.stop_at_mean;
      const bool last = trainer.done() || stop;
      if (rep.iteration % config.log_every == 0 || last) {
        metrics << format_row(to_row(rep)) << "\n";
        metrics.flush();
      }
      while (next < 3 && rep.env_steps * 100 >= milestones[next] * tc.total_steps) snapshot(milestones[next++]);
      if (progress) progress(seed, rep);
      outcome.env_steps = rep.env_steps;
      outcome.recent_mean = rep.recent_mean;
      outcome.best_return = rep.best_return;
      if (stop) break;
    }
    if (next < 3) snapshot(100);

    if (learns(tc.algorithm)) trainer.policy()->save((base / "checkpoint").string());
    if (config.attention && uses_conditioned_policy(tc.algorithm) && !trainer.buffer().empty()) {
      const BufferEntry& best = trainer.buffer().entry(trainer.buffer().top_k_indices().front());
      write_attention(greedy_rollout(trainer, best.best), (base / "attention.csv").string());
    }
    write_text(base / kDoneMarker, "");
  } catch (const std::exception& e) {
    outcome.failed = true;
    outcome.error = e.what();
    std::ofstream(base / kFailureMarker) << e.what() << "\n";
  }
  return outcome;
}

bool seed_complete(const ExperimentConfig& config, std::uint64_t seed, const std::string& dir) {
  const fs::path base(dir);
  if (!fs::exists(base / kDoneMarker) || fs::exists(base / kFailureMarker)) return false;
  std::ifstream in(base / "config.ini", std::ios::binary);
  std::stringstream saved;
  saved << in.rdbuf();
  ExperimentConfig one = config;
  one.seeds = {seed};
  return saved.str() == format_config(one);
}

std::vector<SeedOutcome> run_experiment(const ExperimentConfig& config, const std::string& root, int jobs,
                                        const Progress& progress) {
  std::vector<SeedOutcome> out;
  if (jobs <= 1) {
    for (std::uint64_t seed : config.seeds) out.push_back(run_seed(config, seed, seed_dir(config, root, seed), progress));
    return out;
  }
  std::size_t launched = 0, running = 0;
  while (launched < config.seeds.size() || running > 0) {
    while (running < static_cast<std::size_t>(jobs) && launched < config.seeds.size()) {
      const std::uint64_t seed = config.seeds[launched++];
      std::fflush(nullptr);
      const pid_t pid = fork();
      if (pid < 0) throw Error("fork failed");
      if (pid == 0) {
        const SeedOutcome o = run_seed(config, seed, seed_dir(config, root, seed), progress);
        std::fflush(nullptr);
        _exit(o.failed ? 1 : 0);
      }
      ++running;
    }
    int status = 0;
    if (wait(&status) > 0) --running;
  }
  for (std::uint64_t seed : config.seeds) out.push_back(outcome_from_dir(seed, seed_dir(config, root, seed)));
  return out;
}

std::vector<std::string> metrics_paths(const std::string& path) {
  std::vector<std::string> out;
  if (fs::is_regular_file(path)) return {path};
  if (!fs::is_directory(path)) throw FormatError("no such run '" + path + "'");
  if (fs::exists(fs::path(path) / "metrics.csv")) return {(fs::path(path) / "metrics.csv").string()};
  for (const auto& entry : fs::directory_iterator(path)) {
    const fs::path m = entry.path() / "metrics.csv";
    if (entry.is_directory() && fs::exists(m)) out.push_back(m.string());
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) throw FormatError("no metrics under '" + path + "'");
  return out;
}

// ---- plot -------------------------------------------------------------------

namespace {

double interpolate(const std::vector<MetricsRow>& rows, const std::string& column, double x) {
  auto it = std::lower_bound(rows.begin(), rows.end(), x,
                             [](const MetricsRow& r, double v) { return static_cast<double>(r.env_steps) < v; });
  if (it == rows.begin()) return column_value(*it, column);
  if (it == rows.end()) return column_value(rows.back(), column);
  const MetricsRow& hi = *it;
  const MetricsRow& lo = *(it - 1);
  const double w = (x - static_cast<double>(lo.env_steps)) / static_cast<double>(hi.env_steps - lo.env_steps);
  return (1 - w) * column_value(lo, column) + w * column_value(hi, column);
}

std::string nice(double v) {
  char buf[32];
  if (std::abs(v) >= 1e6)
    std::snprintf(buf, sizeof buf, "%.3gM", v / 1e6);
  else if (std::abs(v) >= 1e3)
    std::snprintf(buf, sizeof buf, "%.3gk", v / 1e3);
  else
    std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

std::string points(const std::vector<double>& xs, const std::vector<double>& ys,
                   const std::function<double(double)>& sx, const std::function<double(double)>& sy) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? " " : "") + fmt(sx(xs[i])) + "," + fmt(sy(ys[i]));
  return s;
}

}  // namespace

std::string plot_svg(const std::vector<PlotSeries>& series, const std::string& column, const std::string& title) {
  if (series.empty()) throw FormatError("nothing to plot");
  for (const PlotSeries& s : series) {
    if (s.runs.empty()) throw FormatError("series '" + s.label + "' has no runs");
    for (const MetricsFile& f : s.runs)
      if (f.rows.empty()) throw FormatError(f.path + ": no rows to plot");
  }
  column_value(series.front().runs.front().rows.front(), column);

  struct Curve {
    std::vector<double> xs, mean, lo, hi;
    std::vector<std::vector<double>> runs_x, runs_y;
  };
  std::vector<Curve> curves;
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin, ymin = xmin, ymax = -xmin;
  for (const PlotSeries& s : series) {
    Curve c;
    std::vector<double> grid;
    for (const MetricsFile& f : s.runs)
      for (const MetricsRow& r : f.rows) grid.push_back(static_cast<double>(r.env_steps));
    std::sort(grid.begin(), grid.end());
    grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
    for (double x : grid) {
      double sum = 0.0, lo = std::numeric_limits<double>::infinity(), hi = -lo;
      std::size_t n = 0;
      for (const MetricsFile& f : s.runs) {
        if (x < static_cast<double>(f.rows.front().env_steps) || x > static_cast<double>(f.rows.back().env_steps)) continue;
        const double y = interpolate(f.rows, column, x);
        sum += y;
        lo = std::min(lo, y);
        hi = std::max(hi, y);
        ++n;
      }
      if (n == 0) continue;
      c.xs.push_back(x);
      c.mean.push_back(sum / static_cast<double>(n));
      c.lo.push_back(lo);
      c.hi.push_back(hi);
    }
    for (const MetricsFile& f : s.runs) {
      std::vector<double> xs, ys;
      for (const MetricsRow& r : f.rows) {
        xs.push_back(static_cast<double>(r.env_steps));
        ys.push_back(column_value(r, column));
      }
      c.runs_x.push_back(xs);
      c.runs_y.push_back(ys);
    }
    for (double x : c.xs) xmin = std::min(xmin, x), xmax = std::max(xmax, x);
    for (double y : c.lo) ymin = std::min(ymin, y);
    for (double y : c.hi) ymax = std::max(ymax, y);
    curves.push_back(std::move(c));
  }
  if (xmax <= xmin) xmax = xmin + 1;
  if (ymax <= ymin) ymax = ymin + 1;
  const double pad = 0.05 * (ymax - ymin);
  ymin -= pad;
  ymax += pad;

  const double w = 800, h = 480, left = 70, right = 20, top = 40, bottom = 50;
  auto sx = [&](double x) { return left + (x - xmin) / (xmax - xmin) * (w - left - right); };
  auto sy = [&](double y) { return h - bottom - (y - ymin) / (ymax - ymin) * (h - top - bottom); };
  static const char* palette[] = {"#1f4e9c", "#b8401f", "#2b7a3a", "#7a2b7a", "#8a6d00", "#00707a"};

  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"800\" height=\"480\" viewBox=\"0 0 800 480\">\n";
  svg += "<rect width=\"800\" height=\"480\" fill=\"white\"/>\n";
  svg += "<text x=\"400\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">" +
         (title.empty() ? column : title) + "</text>\n";
  svg += "<g stroke=\"#444\" stroke-width=\"1\">\n";
  svg += "<line x1=\"" + fmt(left) + "\" y1=\"" + fmt(h - bottom) + "\" x2=\"" + fmt(w - right) + "\" y2=\"" +
         fmt(h - bottom) + "\"/>\n";
  svg += "<line x1=\"" + fmt(left) + "\" y1=\"" + fmt(top) + "\" x2=\"" + fmt(left) + "\" y2=\"" + fmt(h - bottom) + "\"/>\n";
  svg += "</g>\n<g font-family=\"sans-serif\" font-size=\"11\" fill=\"#222\">\n";
  for (int i = 0; i <= 5; ++i) {
    const double xv = xmin + (xmax - xmin) * i / 5.0, yv = ymin + (ymax - ymin) * i / 5.0;
    svg += "<text x=\"" + fmt(sx(xv)) + "\" y=\"" + fmt(h - bottom + 16) + "\" text-anchor=\"middle\">" + nice(xv) + "</text>\n";
    svg += "<text x=\"" + fmt(left - 6) + "\" y=\"" + fmt(sy(yv) + 4) + "\" text-anchor=\"end\">" + nice(yv) + "</text>\n";
    svg += "<line x1=\"" + fmt(left) + "\" y1=\"" + fmt(sy(yv)) + "\" x2=\"" + fmt(w - right) + "\" y2=\"" + fmt(sy(yv)) +
           "\" stroke=\"#ddd\"/>\n";
  }
  svg += "<text x=\"" + fmt((left + w - right) / 2) + "\" y=\"" + fmt(h - 12) + "\" text-anchor=\"middle\">env steps</text>\n";
  svg += "</g>\n";

  for (std::size_t k = 0; k < curves.size(); ++k) {
    const Curve& c = curves[k];
    const std::string color = palette[k % 6];
    const bool several = series[k].runs.size() > 1;
    if (several) {
      std::vector<double> bx(c.xs), by(c.hi);
      bx.insert(bx.end(), c.xs.rbegin(), c.xs.rend());
      by.insert(by.end(), c.lo.rbegin(), c.lo.rend());
      svg += "<polygon class=\"band\" fill=\"" + color + "\" fill-opacity=\"0.12\" stroke=\"none\" points=\"" +
             points(bx, by, sx, sy) + "\"/>\n";
      for (std::size_t r = 0; r < c.runs_x.size(); ++r)
        svg += "<polyline class=\"run\" fill=\"none\" stroke=\"" + color + "\" stroke-opacity=\"0.3\" stroke-width=\"1\" points=\"" +
               points(c.runs_x[r], c.runs_y[r], sx, sy) + "\"/>\n";
    }
    svg += "<polyline class=\"mean\" fill=\"none\" stroke=\"" + color + "\" stroke-width=\"2.2\" points=\"" +
           points(c.xs, c.mean, sx, sy) + "\"/>\n";
    svg += "<text x=\"" + fmt(left + 12) + "\" y=\"" + fmt(top + 16 + 16 * static_cast<double>(k)) +
           "\" font-family=\"sans-serif\" font-size=\"12\" fill=\"" + color + "\">" + series[k].label + " (" +
           std::to_string(series[k].runs.size()) + ")</text>\n";
  }
  svg += "</svg>\n";
  return svg;
}

// ---- compare ----------------------------------------------------------------

CompareRow summarize_run(const std::string& run, const std::vector<MetricsFile>& files, double threshold) {
  if (files.empty()) throw FormatError("run '" + run + "' has no metrics");
  CompareRow row;
  row.run = run;
  row.algorithm = files.front().meta.count("algorithm") ? files.front().meta.at("algorithm") : "?";
  row.seeds = files.size();
  row.final_min = std::numeric_limits<double>::infinity();
  row.final_max = -row.final_min;
  row.best = -row.final_min;
  double sum = 0.0;
  for (const MetricsFile& f : files) {
    if (f.rows.empty()) throw FormatError(f.path + ": no rows");
    const double last = f.rows.back().recent_mean;
    sum += last;
    row.final_min = std::min(row.final_min, last);
    row.final_max = std::max(row.final_max, last);
    row.best = std::max(row.best, f.rows.back().best_return);
    std::optional<std::int64_t> reached;
    for (const MetricsRow& r : f.rows)
      if (r.episodes >= static_cast<std::int64_t>(Trainer::kRecentWindow) && r.recent_mean >= threshold) {
        reached = r.env_steps;
        break;
      }
    row.steps_to_threshold.push_back(reached);
  }
  row.final_mean = sum / static_cast<double>(files.size());
  return row;
}

std::string format_compare(const std::vector<CompareRow>& rows, double threshold) {
  std::vector<std::vector<std::string>> table;
  table.push_back({"run", "algorithm", "seeds", "final_mean", "final_min", "final_max", "best",
                   "steps_to_" + fmt(threshold)});
  for (const CompareRow& r : rows) {
    std::string steps;
    for (std::size_t i = 0; i < r.steps_to_threshold.size(); ++i)
      steps += (i ? " " : "") + (r.steps_to_threshold[i] ? std::to_string(*r.steps_to_threshold[i]) : std::string("∞"));
    char a[16], b[16], c[16], d[16];
    std::snprintf(a, sizeof a, "%.3f", r.final_mean);
    std::snprintf(b, sizeof b, "%.3f", r.final_min);
    std::snprintf(c, sizeof c, "%.3f", r.final_max);
    std::snprintf(d, sizeof d, "%.3f", r.best);
    table.push_back({r.run, r.algorithm, std::to_string(r.seeds), a, b, c, d, steps});
  }
  std::vector<std::size_t> widths(table.front().size(), 0);
  auto display = [](const std::string& s) {
    std::size_t n = 0;
    for (unsigned char ch : s) n += (ch & 0xC0) != 0x80;
    return n;
  };
  for (const auto& r : table)
    for (std::size_t i = 0; i < r.size(); ++i) widths[i] = std::max(widths[i], display(r[i]));
  std::string out;
  for (const auto& r : table) {
    for (std::size_t i = 0; i < r.size(); ++i) {
      out += r[i];
      if (i + 1 < r.size()) out += std::string(widths[i] - display(r[i]) + 2, ' ');
    }
    out += "\n";
  }
  return out;
}

}  // namespace dtsil::harness
