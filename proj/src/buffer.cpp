#include "dtsil/buffer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "dtsil/error.hpp"
#include "json.hpp"

namespace dtsil {

using json = nlohmann::json;

TrajectoryBuffer::TrajectoryBuffer(BufferConfig config) : config_(config) {
  if (config_.delta < 0) throw ConfigError("buffer delta must be non-negative");
  if (config_.top_k == 0) throw ConfigError("buffer top_k must be positive");
}

std::size_t TrajectoryBuffer::KeyHash::operator()(const Key& k) const {
  std::uint64_t h = splitmix64(static_cast<std::uint64_t>(k.x));
  h = splitmix64(h ^ static_cast<std::uint64_t>(k.y));
  h = splitmix64(h ^ static_cast<std::uint64_t>(k.r_cents));
  return static_cast<std::size_t>(h);
}

TrajectoryBuffer::Key TrajectoryBuffer::key_of(const env::Embedding& e) {
  return {e.x, e.y, static_cast<std::int64_t>(std::llround(e.r_plus * 100.0))};
}

void TrajectoryBuffer::rebuild_index() {
  index_.clear();
  if (config_.delta != 0.0) return;
  for (std::size_t i = 0; i < entries_.size(); ++i) index_.emplace(key_of(entries_[i].representative), i);
}

std::optional<std::size_t> TrajectoryBuffer::match(const env::Embedding& e) const {
  if (config_.delta == 0.0) {
    auto it = index_.find(key_of(e));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }
  std::optional<std::size_t> best;
  double best_d = 0.0;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const double d = env::distance(e, entries_[i].representative);
    if (d <= config_.delta && (!best || d < best_d)) {
      best = i;
      best_d = d;
    }
  }
  return best;
}

UpdateReport TrajectoryBuffer::update_with_trajectory(const Trajectory& episode) {
  UpdateReport report;
  double prefix_return = 0.0;
  for (std::size_t t = 0; t < episode.embeddings.size(); ++t) {
    if (t > 0) prefix_return += episode.rewards[t - 1];
    const env::Embedding& e = episode.embeddings[t];
    if (auto k = match(e)) {
      BufferEntry& entry = entries_[*k];
      ++entry.count;
      ++report.matched_steps;
      const bool better = prefix_return > entry.cached_return + kReturnTolerance;
      const bool shorter = std::abs(prefix_return - entry.cached_return) <= kReturnTolerance &&
                           t < entry.cached_length;
      if (better || shorter) {
        if (config_.delta == 0.0) {
          index_.erase(key_of(entry.representative));
          index_.emplace(key_of(e), *k);
        }
        entry.representative = e;
        entry.best = episode.prefix(t);
        entry.cached_return = prefix_return;
        entry.cached_length = t;
        ++report.replaced;
      }
    } else {
      BufferEntry entry;
      entry.representative = e;
      entry.best = episode.prefix(t);
      entry.count = 1;
      entry.cached_return = prefix_return;
      entry.cached_length = t;
      entries_.push_back(std::move(entry));
      if (config_.delta == 0.0) index_.emplace(key_of(e), entries_.size() - 1);
      ++report.inserted;
    }
  }
  ++total_updates_;
  evict_if_needed(report);
  return report;
}

void TrajectoryBuffer::evict_if_needed(UpdateReport& report) {
  if (config_.capacity == 0 || entries_.size() <= config_.capacity) return;
  while (entries_.size() > config_.capacity) {
    std::size_t victim = 0;
    for (std::size_t i = 1; i < entries_.size(); ++i) {
      const BufferEntry& a = entries_[i];
      const BufferEntry& v = entries_[victim];
      if (a.cached_return < v.cached_return - kReturnTolerance ||
          (std::abs(a.cached_return - v.cached_return) <= kReturnTolerance && a.count > v.count))
        victim = i;
    }
    entries_.erase(entries_.begin() + static_cast<long>(victim));
    ++report.evicted;
  }
  rebuild_index();
}

std::vector<double> TrajectoryBuffer::exploration_probabilities() const {
  std::vector<double> w(entries_.size());
  double total = 0.0;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    w[i] = 1.0 / std::sqrt(static_cast<double>(entries_[i].count));
    total += w[i];
  }
  for (double& x : w) x /= total;
  return w;
}

std::vector<std::size_t> TrajectoryBuffer::top_k_indices() const {
  std::vector<std::size_t> idx(entries_.size());
  std::iota(idx.begin(), idx.end(), 0);
  const std::size_t k = std::min(config_.top_k, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<long>(k), idx.end(),
                    [this](std::size_t a, std::size_t b) {
                      const BufferEntry& ea = entries_[a];
                      const BufferEntry& eb = entries_[b];
                      if (std::abs(ea.cached_return - eb.cached_return) > kReturnTolerance)
                        return ea.cached_return > eb.cached_return;
                      if (ea.cached_length != eb.cached_length) return ea.cached_length < eb.cached_length;
                      return a < b;
                    });
  idx.resize(k);
  return idx;
}

DemoSample TrajectoryBuffer::sample_demonstration(double p, Rng& rng) const {
  if (entries_.empty()) throw Error("sample_demonstration on an empty buffer");
  DemoSample s;
  if (rng.uniform() < p) {
    s.mode = SampleMode::kExplore;
    std::vector<double> w(entries_.size());
    for (std::size_t i = 0; i < entries_.size(); ++i)
      w[i] = 1.0 / std::sqrt(static_cast<double>(entries_[i].count));
    s.index = rng.categorical(w);
  } else {
    s.mode = SampleMode::kExploit;
    const auto top = top_k_indices();
    s.index = top[rng.below(top.size())];
  }
  return s;
}

std::int64_t TrajectoryBuffer::visitation_count(const env::Embedding& e) const {
  auto k = match(e);
  return k ? entries_[*k].count : 0;
}

// ---- serialization ----------------------------------------------------------

namespace {

constexpr const char* kSchema = "dtsil-buffer/1";

json embedding_json(const env::Embedding& e) { return json::array({e.x, e.y, e.r_plus}); }

env::Embedding embedding_from(const json& j) {
  if (!j.is_array() || j.size() != 3) throw FormatError("embedding must be [x, y, r_plus]");
  return {j.at(0).get<int>(), j.at(1).get<int>(), j.at(2).get<double>()};
}

}  // namespace

std::string TrajectoryBuffer::serialize() const {
  std::ostringstream out;
  json header = {{"schema", kSchema},
                 {"delta", config_.delta},
                 {"entries", entries_.size()},
                 {"total_updates", total_updates_}};
  out << header.dump() << '\n';
  for (const BufferEntry& e : entries_) {
    json emb = json::array();
    for (const auto& x : e.best.embeddings) emb.push_back(embedding_json(x));
    json rec = {{"representative", embedding_json(e.representative)},
                {"count", e.count},
                {"return", e.cached_return},
                {"length", e.cached_length},
                {"done", e.best.done},
                {"actions", e.best.actions},
                {"rewards", e.best.rewards},
                {"embeddings", emb},
                {"obs", e.best.obs}};
    out << rec.dump() << '\n';
  }
  return out.str();
}

void TrajectoryBuffer::snapshot(const std::string& path) const {
  std::ofstream f(path);
  if (!f) throw Error("cannot write buffer snapshot " + path);
  f << serialize();
  if (!f) throw Error("failed writing buffer snapshot " + path);
}

void TrajectoryBuffer::deserialize(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::vector<BufferEntry> entries;
  std::int64_t total = 0;
  std::size_t expected = 0;
  try {
    if (!std::getline(in, line)) throw FormatError("buffer snapshot is empty");
    json header = json::parse(line);
    if (header.at("schema").get<std::string>() != kSchema)
      throw FormatError("unknown buffer schema " + header.at("schema").get<std::string>());
    expected = header.at("entries").get<std::size_t>();
    total = header.at("total_updates").get<std::int64_t>();
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      json rec = json::parse(line);
      BufferEntry e;
      e.representative = embedding_from(rec.at("representative"));
      e.count = rec.at("count").get<std::int64_t>();
      e.cached_return = rec.at("return").get<double>();
      e.cached_length = rec.at("length").get<std::size_t>();
      e.best.done = rec.at("done").get<bool>();
      e.best.actions = rec.at("actions").get<std::vector<int>>();
      e.best.rewards = rec.at("rewards").get<std::vector<double>>();
      for (const auto& x : rec.at("embeddings")) e.best.embeddings.push_back(embedding_from(x));
      e.best.obs = rec.at("obs").get<std::vector<std::vector<double>>>();
      const std::size_t t = e.best.actions.size();
      if (e.count <= 0 || e.best.rewards.size() != t || e.best.embeddings.size() != t + 1 ||
          e.best.obs.size() != t + 1 || e.cached_length != t)
        throw FormatError("inconsistent buffer entry");
      entries.push_back(std::move(e));
    }
  } catch (const json::exception& ex) {
    throw FormatError(std::string("malformed buffer snapshot: ") + ex.what());
  }
  if (entries.size() != expected)
    throw FormatError("buffer snapshot truncated: expected " + std::to_string(expected) +
                      " entries, found " + std::to_string(entries.size()));
  entries_ = std::move(entries);
  total_updates_ = total;
  rebuild_index();
}

void TrajectoryBuffer::restore(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open buffer snapshot " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  deserialize(ss.str());
}

}  // namespace dtsil
