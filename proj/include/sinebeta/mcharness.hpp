#pragma once

// Monte Carlo orchestration: job descriptions, deterministic parallel
// execution over per-path streams, aggregation and JSON persistence.
//
// Every path writes its values into a fixed slot of flat per-path arrays, so
// the reduction below sees the same numbers in the same order whatever the
// worker count.  Integer cells are summed exactly; real cells are reduced in
// ascending path order with compensated summation.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <limits>
#include <mutex>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include "json.hpp"
#include "sinebeta/carousel.hpp"
#include "sinebeta/ensemble.hpp"
#include "sinebeta/pointstats.hpp"
#include "sinebeta/rng.hpp"

#ifndef SINEBETA_VERSION
#define SINEBETA_VERSION "0.1.0"
#endif

namespace sinebeta::mc {

using json = nlohmann::ordered_json;

inline constexpr int kSchemaVersion = 1;
inline constexpr const char* kArtifactVersion = SINEBETA_VERSION;

// ---------------------------------------------------------------------------
// Formatting helpers

/// Shortest form that reads back to the same double, capped at 17 digits.
inline std::string format_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  char buf[64];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

inline std::string format_double17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string cell_key(const std::string& name, const std::vector<std::pair<std::string, double>>& labels) {
  std::string s = name + "(";
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (i) s += ",";
    s += labels[i].first + "=" + format_double(labels[i].second);
  }
  return s + ")";
}

// ---------------------------------------------------------------------------
// Experiment parameters

enum class Experiment { bulk_counts, sine_counts, carousel_counts, gap_prob, phase_transition, compare, limit_sde };

inline const char* to_string(Experiment e) {
  switch (e) {
    case Experiment::bulk_counts:
      return "bulk-counts";
    case Experiment::sine_counts:
      return "sine-counts";
    case Experiment::carousel_counts:
      return "carousel-counts";
    case Experiment::gap_prob:
      return "gap-prob";
    case Experiment::phase_transition:
      return "phase-transition";
    case Experiment::compare:
      return "compare";
    default:
      return "limit-sde";
  }
}

inline Experiment experiment_from_string(const std::string& s) {
  for (Experiment e : {Experiment::bulk_counts, Experiment::sine_counts, Experiment::carousel_counts,
                       Experiment::gap_prob, Experiment::phase_transition, Experiment::compare,
                       Experiment::limit_sde}) {
    if (s == to_string(e)) return e;
  }
  throw std::invalid_argument("unknown experiment '" + s + "'");
}

inline json to_json(const carousel::SolverConfig& c) {
  return json{{"dt_max", c.dt_max},
              {"drift_step_scale", c.drift_step_scale},
              {"tail_tol", c.tail_tol},
              {"angle_tol", c.angle_tol},
              {"t_hard_max", c.t_hard_max},
              {"below_margin", c.below_margin},
              {"approach_min_steps", c.approach_min_steps},
              {"max_split_depth", c.max_split_depth}};
}

inline carousel::SolverConfig solver_from_json(const json& j) {
  carousel::SolverConfig c;
  c.dt_max = j.at("dt_max").get<double>();
  c.drift_step_scale = j.at("drift_step_scale").get<double>();
  c.tail_tol = j.at("tail_tol").get<double>();
  c.angle_tol = j.at("angle_tol").get<double>();
  c.t_hard_max = j.at("t_hard_max").get<double>();
  c.below_margin = j.at("below_margin").get<double>();
  c.approach_min_steps = j.at("approach_min_steps").get<std::size_t>();
  c.max_split_depth = j.at("max_split_depth").get<int>();
  return c;
}

namespace detail {

inline void require_beta(double beta) {
  if (!(beta > 0.0) || !std::isfinite(beta)) throw std::invalid_argument("beta must be a positive number");
}

inline void require_grid(const std::vector<double>& g, const char* name) {
  if (g.empty()) throw std::invalid_argument(std::string(name) + " must be nonempty");
  for (double v : g) {
    if (!std::isfinite(v)) throw std::invalid_argument(std::string(name) + " must be finite");
  }
  if (!std::is_sorted(g.begin(), g.end())) throw std::invalid_argument(std::string(name) + " must be sorted");
}

inline json nu_to_json(double nu) { return std::isinf(nu) ? json("inf") : json(nu); }

}  // namespace detail

struct BulkCountsParams {
  std::size_t n = 4096;
  double beta = 2.0;
  double mu = 0.0;
  std::vector<double> lambdas{0.0, 6.283185307179586};
  /// Optional times t in (0, 1): record alpha and phi at l = floor(t n0).
  std::vector<double> phase_times;

  void validate() const {
    ensemble::EnsembleParams{n, beta, mu, 0}.validate_bulk();
    detail::require_grid(lambdas, "lambdas");
    for (double t : phase_times) {
      if (!(t > 0.0 && t < 1.0)) throw std::invalid_argument("phase_times must lie in (0, 1)");
    }
  }
  json to_json() const {
    return json{{"n", n}, {"beta", beta}, {"mu", mu}, {"lambdas", lambdas}, {"phase_times", phase_times}};
  }
};

struct SineCountsParams {
  double beta = 2.0;
  std::vector<double> lambdas{0.0, 6.283185307179586};
  carousel::SolverConfig solver;

  void validate() const {
    detail::require_beta(beta);
    detail::require_grid(lambdas, "lambdas");
    solver.validate();
  }
  json to_json() const { return json{{"beta", beta}, {"lambdas", lambdas}, {"solver", mc::to_json(solver)}}; }
};

struct CarouselCountsParams {
  double beta = 2.0;
  std::vector<double> lambdas{0.0, 6.283185307179586};
  double z0_angle = 3.141592653589793;  ///< z0 = e^{i z0_angle}
  carousel::SolverConfig solver;

  void validate() const {
    detail::require_beta(beta);
    detail::require_grid(lambdas, "lambdas");
    if (!std::isfinite(z0_angle)) throw std::invalid_argument("z0 angle must be finite");
    solver.validate();
  }
  json to_json() const {
    return json{{"beta", beta}, {"lambdas", lambdas}, {"z0_angle", z0_angle}, {"solver", mc::to_json(solver)}};
  }
};

struct GapProbParams {
  double beta = 2.0;
  std::vector<double> lambdas{6.0, 10.0, 14.0};
  std::vector<long> ks{0};
  carousel::SolverConfig solver;

  void validate() const {
    detail::require_beta(beta);
    detail::require_grid(lambdas, "lambdas");
    for (double l : lambdas) {
      if (l < 0.0) throw std::invalid_argument("gap-prob lambdas must be >= 0");
    }
    if (ks.empty()) throw std::invalid_argument("k list must be nonempty");
    for (long k : ks) {
      if (k < 0) throw std::invalid_argument("k must be >= 0");
    }
    solver.validate();
  }
  json to_json() const {
    return json{{"beta", beta}, {"lambdas", lambdas}, {"ks", ks}, {"solver", mc::to_json(solver)}};
  }
};

struct PhaseTransitionParams {
  double beta = 2.0;
  double lambda = 4.0;
  std::vector<double> dt_list{1e-3, 5e-4};
  carousel::SolverConfig solver;  ///< dt_max is replaced by each entry of dt_list

  void validate() const {
    detail::require_beta(beta);
    if (!std::isfinite(lambda)) throw std::invalid_argument("lambda must be finite");
    if (dt_list.empty()) throw std::invalid_argument("dt list must be nonempty");
    for (double dt : dt_list) {
      carousel::SolverConfig c = solver;
      c.dt_max = dt;
      c.validate();
    }
  }
  json to_json() const {
    return json{{"beta", beta}, {"lambda", lambda}, {"dt_list", dt_list}, {"solver", mc::to_json(solver)}};
  }
};

struct LimitSdeParams {
  double beta = 2.0;
  double nu = std::numeric_limits<double>::infinity();
  double lambda = 1.0;
  std::vector<double> times{0.25, 0.5, 0.75};
  carousel::SolverConfig solver;

  void validate() const {
    detail::require_beta(beta);
    if (!(nu >= 0.0)) throw std::invalid_argument("nu must lie in [0, inf]");
    if (!std::isfinite(lambda)) throw std::invalid_argument("lambda must be finite");
    detail::require_grid(times, "times");
    for (double t : times) {
      if (!(t >= 0.0 && t < 1.0)) throw std::invalid_argument("times must lie in [0, 1)");
    }
    solver.validate();
  }
  json to_json() const {
    return json{{"beta", beta}, {"nu", detail::nu_to_json(nu)}, {"lambda", lambda}, {"times", times},
                {"solver", mc::to_json(solver)}};
  }
};

struct CompareParams {
  std::string file_a;
  std::string file_b;
  double threshold = 0.05;

  void validate() const {
    if (file_a.empty() || file_b.empty()) throw std::invalid_argument("compare needs two input files");
    if (!(threshold > 0.0)) throw std::invalid_argument("threshold must be positive");
  }
  json to_json() const { return json{{"file_a", file_a}, {"file_b", file_b}, {"threshold", threshold}}; }
};

using ExperimentParams = std::variant<BulkCountsParams, SineCountsParams, CarouselCountsParams, GapProbParams,
                                      PhaseTransitionParams, CompareParams, LimitSdeParams>;

struct JobSpec {
  ExperimentParams params = SineCountsParams{};
  std::uint64_t n_paths = 1000;
  std::uint64_t master_seed = 0;
  unsigned workers = 0;  ///< 0 = hardware concurrency
  std::string output_path;
  bool record_timing = true;

  Experiment experiment() const {
    return std::visit(
        [](const auto& p) -> Experiment {
          using T = std::decay_t<decltype(p)>;
          if constexpr (std::is_same_v<T, BulkCountsParams>) return Experiment::bulk_counts;
          if constexpr (std::is_same_v<T, SineCountsParams>) return Experiment::sine_counts;
          if constexpr (std::is_same_v<T, CarouselCountsParams>) return Experiment::carousel_counts;
          if constexpr (std::is_same_v<T, GapProbParams>) return Experiment::gap_prob;
          if constexpr (std::is_same_v<T, PhaseTransitionParams>) return Experiment::phase_transition;
          if constexpr (std::is_same_v<T, CompareParams>) return Experiment::compare;
          return Experiment::limit_sde;
        },
        params);
  }

  void validate() const {
    if (experiment() != Experiment::compare && n_paths < 1) throw std::invalid_argument("n_paths must be >= 1");
    std::visit([](const auto& p) { p.validate(); }, params);
  }
};

// ---------------------------------------------------------------------------
// Results

struct Cell {
  std::string key;
  std::uint64_t n = 0;
  double mean = 0.0;
  double stderr_ = 0.0;
  bool integer = false;
  pointstats::Histogram histogram;
};

struct Flags {
  std::uint64_t unconverged = 0;
  std::uint64_t clamped = 0;
  std::uint64_t errored = 0;
};

struct RunSummary {
  int schema_version = kSchemaVersion;
  std::string experiment;
  json params = json::object();
  std::uint64_t master_seed = 0;
  std::uint64_t n_paths = 0;
  std::vector<Cell> cells;
  Flags flags;
  double wall_seconds = 0.0;
  std::string artifact_version = kArtifactVersion;
  json derived;  ///< null when absent

  const Cell* find(const std::string& key) const {
    for (const Cell& c : cells) {
      if (c.key == key) return &c;
    }
    return nullptr;
  }

  const Cell& at(const std::string& key) const {
    const Cell* c = find(key);
    if (!c) throw std::out_of_range("RunSummary: no cell '" + key + "'");
    return *c;
  }

  /// More than 1% of paths errored.
  bool failed() const { return flags.errored * 100 > n_paths; }
};

inline json to_json(const RunSummary& s) {
  json cells = json::array();
  for (const Cell& c : s.cells) {
    json h = json::object();
    for (const auto& [v, cnt] : c.histogram) h[std::to_string(v)] = cnt;
    cells.push_back(json{{"key", c.key},
                         {"n", c.n},
                         {"mean", c.mean},
                         {"stderr", c.stderr_},
                         {"integer", c.integer},
                         {"histogram", std::move(h)}});
  }
  json j{{"schema_version", s.schema_version},
         {"experiment", s.experiment},
         {"params", s.params},
         {"master_seed", s.master_seed},
         {"n_paths", s.n_paths},
         {"cells", std::move(cells)},
         {"flags", json{{"unconverged", s.flags.unconverged}, {"clamped", s.flags.clamped},
                        {"errored", s.flags.errored}}},
         {"wall_seconds", s.wall_seconds},
         {"artifact_version", s.artifact_version}};
  if (!s.derived.is_null()) j["derived"] = s.derived;
  return j;
}

inline bool operator==(const RunSummary& a, const RunSummary& b) { return to_json(a) == to_json(b); }

class SchemaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline RunSummary summary_from_json(const json& j) {
  if (!j.is_object()) throw SchemaError("result document must be a JSON object");
  if (!j.contains("schema_version")) throw SchemaError("missing schema_version");
  const int version = j.at("schema_version").get<int>();
  if (version != kSchemaVersion) {
    throw SchemaError("schema_version mismatch: file has " + std::to_string(version) + ", expected " +
                      std::to_string(kSchemaVersion));
  }
  try {
    RunSummary s;
    s.schema_version = version;
    s.experiment = j.at("experiment").get<std::string>();
    s.params = j.at("params");
    s.master_seed = j.at("master_seed").get<std::uint64_t>();
    s.n_paths = j.at("n_paths").get<std::uint64_t>();
    for (const json& c : j.at("cells")) {
      Cell cell;
      cell.key = c.at("key").get<std::string>();
      cell.n = c.value("n", std::uint64_t{0});
      cell.mean = c.at("mean").get<double>();
      cell.stderr_ = c.at("stderr").get<double>();
      const json& h = c.at("histogram");
      cell.integer = c.value("integer", !h.empty());
      for (auto it = h.begin(); it != h.end(); ++it) {
        cell.histogram[std::stol(it.key())] = it.value().get<std::uint64_t>();
      }
      s.cells.push_back(std::move(cell));
    }
    const json& f = j.at("flags");
    s.flags.unconverged = f.at("unconverged").get<std::uint64_t>();
    s.flags.clamped = f.at("clamped").get<std::uint64_t>();
    s.flags.errored = f.at("errored").get<std::uint64_t>();
    s.wall_seconds = j.at("wall_seconds").get<double>();
    s.artifact_version = j.at("artifact_version").get<std::string>();
    if (j.contains("derived")) s.derived = j.at("derived");
    return s;
  } catch (const json::exception& e) {
    throw SchemaError(std::string("malformed result document: ") + e.what());
  }
}

enum class Format { json, csv };

inline std::string render(const RunSummary& s, Format format) {
  if (format == Format::json) return to_json(s).dump(2) + "\n";
  std::ostringstream out;
  out << "key,n,mean,stderr,histogram\n";
  for (const Cell& c : s.cells) {
    std::string h;
    for (const auto& [v, cnt] : c.histogram) {
      if (!h.empty()) h += ";";
      h += std::to_string(v) + ":" + std::to_string(cnt);
    }
    out << '"' << c.key << "\"," << c.n << "," << format_double17(c.mean) << "," << format_double17(c.stderr_)
        << "," << h << "\n";
  }
  return out.str();
}

/// Write the summary; JSON output is the loadable form.
inline void persist(const RunSummary& s, const std::string& path, Format format = Format::json) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
  f << render(s, format);
  if (!f) throw std::runtime_error("write to '" + path + "' failed");
}

inline RunSummary load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open '" + path + "'");
  std::stringstream buf;
  buf << f.rdbuf();
  json j;
  try {
    j = json::parse(buf.str());
  } catch (const json::parse_error& e) {
    throw SchemaError("parse error in '" + path + "': " + e.what());
  }
  return summary_from_json(j);
}

// ---------------------------------------------------------------------------
// Parallel execution

/// Worker count: explicit request, else hardware concurrency, capped by
/// SINE_BETA_THREADS when set, and by the number of paths.
inline unsigned resolve_workers(unsigned requested, std::uint64_t n_paths) {
  unsigned w = requested ? requested : std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("SINE_BETA_THREADS")) {
    const long cap = std::strtol(env, nullptr, 10);
    if (cap > 0) w = std::min<unsigned>(w, static_cast<unsigned>(cap));
  }
  if (n_paths > 0 && w > n_paths) w = static_cast<unsigned>(n_paths);
  return std::max(1u, w);
}

using ProgressFn = std::function<void(std::uint64_t done, std::uint64_t total)>;

/// Calls fn(path_index) for every path in [0, n_paths) across `workers`
/// threads.  fn must only write state owned by its path index.
template <class Fn>
void for_each_path(std::uint64_t n_paths, unsigned workers, Fn&& fn, const ProgressFn& progress = {}) {
  workers = resolve_workers(workers, n_paths);
  constexpr std::uint64_t kChunk = 64;
  std::atomic<std::uint64_t> next{0};
  std::atomic<std::uint64_t> done{0};
  std::mutex progress_mutex;
  auto last_report = std::chrono::steady_clock::now();
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto work = [&] {
    for (;;) {
      const std::uint64_t begin = next.fetch_add(kChunk);
      if (begin >= n_paths) return;
      const std::uint64_t end = std::min(n_paths, begin + kChunk);
      try {
        for (std::uint64_t p = begin; p < end; ++p) fn(p);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next.store(n_paths);
        return;
      }
      const std::uint64_t d = done.fetch_add(end - begin) + (end - begin);
      if (progress) {
        std::lock_guard lock(progress_mutex);
        const auto now = std::chrono::steady_clock::now();
        if (now - last_report > std::chrono::seconds(2) || d == n_paths) {
          last_report = now;
          progress(d, n_paths);
        }
      }
    }
  };
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (unsigned i = 0; i < workers; ++i) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
}

/// Per-path outcome flags.
struct PathFlags {
  bool unconverged = false;
  bool clamped = false;
};

/// Flat per-path storage for one experiment.
struct PathTable {
  std::vector<std::string> int_keys;
  std::vector<std::string> real_keys;
  std::uint64_t n_paths = 0;
  std::vector<long> ints;
  std::vector<double> reals;
  std::vector<std::uint8_t> status;  ///< bit 0 unconverged, bit 1 clamped, bit 2 errored
  std::vector<std::string> errors;   ///< first few error messages

  void allocate(std::uint64_t n) {
    n_paths = n;
    ints.assign(n * int_keys.size(), 0);
    reals.assign(n * real_keys.size(), 0.0);
    status.assign(n, 0);
  }
  std::span<long> int_row(std::uint64_t p) {
    return {ints.data() + p * int_keys.size(), int_keys.size()};
  }
  std::span<double> real_row(std::uint64_t p) {
    return {reals.data() + p * real_keys.size(), real_keys.size()};
  }
  long int_at(std::uint64_t p, std::size_t c) const { return ints[p * int_keys.size() + c]; }
  double real_at(std::uint64_t p, std::size_t c) const { return reals[p * real_keys.size() + c]; }
  bool errored(std::uint64_t p) const { return status[p] & 4u; }

  std::size_t int_index(const std::string& key) const {
    const auto it = std::find(int_keys.begin(), int_keys.end(), key);
    if (it == int_keys.end()) throw std::out_of_range("PathTable: no integer column '" + key + "'");
    return static_cast<std::size_t>(it - int_keys.begin());
  }
  std::size_t real_index(const std::string& key) const {
    const auto it = std::find(real_keys.begin(), real_keys.end(), key);
    if (it == real_keys.end()) throw std::out_of_range("PathTable: no real column '" + key + "'");
    return static_cast<std::size_t>(it - real_keys.begin());
  }

  /// Column of an integer cell over non-errored paths, in path order.
  std::vector<long> int_column(const std::string& key) const {
    const std::size_t c = int_index(key);
    std::vector<long> out;
    out.reserve(n_paths);
    for (std::uint64_t p = 0; p < n_paths; ++p) {
      if (!errored(p)) out.push_back(int_at(p, c));
    }
    return out;
  }
  std::vector<double> real_column(const std::string& key) const {
    const std::size_t c = real_index(key);
    std::vector<double> out;
    out.reserve(n_paths);
    for (std::uint64_t p = 0; p < n_paths; ++p) {
      if (!errored(p)) out.push_back(real_at(p, c));
    }
    return out;
  }
};

/// Neumaier compensated sum.
class NeumaierSum {
 public:
  void add(double v) {
    const double t = sum_ + v;
    if (std::abs(sum_) >= std::abs(v)) {
      comp_ += (sum_ - t) + v;
    } else {
      comp_ += (v - t) + sum_;
    }
    sum_ = t;
  }
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

inline std::vector<Cell> aggregate(const PathTable& t) {
  std::vector<Cell> cells;
  for (std::size_t c = 0; c < t.int_keys.size(); ++c) {
    Cell cell;
    cell.key = t.int_keys[c];
    cell.integer = true;
    long double sum = 0, sumsq = 0;
    for (std::uint64_t p = 0; p < t.n_paths; ++p) {
      if (t.errored(p)) continue;
      const long v = t.int_at(p, c);
      ++cell.histogram[v];
      ++cell.n;
    }
    // histogram order is value order: exact integer accumulation
    for (const auto& [v, cnt] : cell.histogram) {
      sum += static_cast<long double>(v) * static_cast<long double>(cnt);
      sumsq += static_cast<long double>(v) * static_cast<long double>(v) * static_cast<long double>(cnt);
    }
    if (cell.n > 0) {
      const long double n = static_cast<long double>(cell.n);
      cell.mean = static_cast<double>(sum / n);
      if (cell.n > 1) {
        const long double var = (sumsq - sum * sum / n) / (n - 1);
        cell.stderr_ = static_cast<double>(std::sqrt(std::max<long double>(0, var) / n));
      }
    }
    cells.push_back(std::move(cell));
  }
  for (std::size_t c = 0; c < t.real_keys.size(); ++c) {
    Cell cell;
    cell.key = t.real_keys[c];
    NeumaierSum s;
    for (std::uint64_t p = 0; p < t.n_paths; ++p) {
      if (t.errored(p)) continue;
      s.add(t.real_at(p, c));
      ++cell.n;
    }
    if (cell.n > 0) {
      const double n = static_cast<double>(cell.n);
      cell.mean = s.value() / n;
      if (cell.n > 1) {
        NeumaierSum sq;
        for (std::uint64_t p = 0; p < t.n_paths; ++p) {
          if (t.errored(p)) continue;
          const double d = t.real_at(p, c) - cell.mean;
          sq.add(d * d);
        }
        cell.stderr_ = std::sqrt(sq.value() / (n - 1.0) / n);
      }
    }
    cells.push_back(std::move(cell));
  }
  return cells;
}

inline Flags count_flags(const PathTable& t) {
  Flags f;
  for (std::uint8_t s : t.status) {
    if (s & 4u) {
      ++f.errored;
    } else {
      if (s & 1u) ++f.unconverged;
      if (s & 2u) ++f.clamped;
    }
  }
  return f;
}

/// Runs `fn(path, stream, int_row, real_row, flags)` for every path.
/// Exceptions thrown by fn mark the path as errored.
template <class Fn>
void run_table(PathTable& table, std::uint64_t master_seed, unsigned workers, Fn&& fn,
               const ProgressFn& progress = {}) {
  std::mutex err_mutex;
  for_each_path(
      table.n_paths, workers,
      [&](std::uint64_t p) {
        RngStream rng(master_seed, p);
        PathFlags flags;
        try {
          fn(p, rng, table.int_row(p), table.real_row(p), flags);
          table.status[p] = static_cast<std::uint8_t>((flags.unconverged ? 1u : 0u) | (flags.clamped ? 2u : 0u));
        } catch (const std::exception& e) {
          table.status[p] = 4u;
          std::lock_guard lock(err_mutex);
          if (table.errors.size() < 8) table.errors.push_back("path " + std::to_string(p) + ": " + e.what());
        }
      },
      progress);
}

// ---------------------------------------------------------------------------
// Experiments

inline std::string count_key(double lambda) { return cell_key("N", {{"lambda", lambda}}); }

namespace detail {

/// Seed of an independent family of streams (one per dt in phase-transition).
inline std::uint64_t derived_seed(std::uint64_t master, std::uint64_t tag) {
  return splitmix64(master ^ splitmix64(tag + 0xA0761D6478BD642Full));
}

inline void fill_counts(const carousel::CountResult& r, std::span<long> ints, PathFlags& flags) {
  for (std::size_t i = 0; i < r.counts.size(); ++i) ints[i] = r.counts[i];
  if (!r.all_converged()) flags.unconverged = true;
  if (r.clamped) flags.clamped = true;
}

inline std::vector<std::string> count_keys(const std::vector<double>& lambdas) {
  std::vector<std::string> keys;
  for (double l : lambdas) keys.push_back(count_key(l));
  return keys;
}

}  // namespace detail

struct JobOutput {
  RunSummary summary;
  PathTable table;
};

/// Executes the job and keeps the per-path table alongside the summary.
inline JobOutput run_job_with_table(const JobSpec& job, const ProgressFn& progress = {}) {
  job.validate();
  const auto start = std::chrono::steady_clock::now();
  JobOutput out;
  RunSummary& s = out.summary;
  PathTable& table = out.table;
  s.experiment = to_string(job.experiment());
  s.master_seed = job.master_seed;
  s.n_paths = job.n_paths;
  s.params = std::visit([](const auto& p) { return p.to_json(); }, job.params);

  if (const auto* p = std::get_if<CompareParams>(&job.params)) {
    const RunSummary a = load(p->file_a);
    const RunSummary b = load(p->file_b);
    s.n_paths = 0;
    json reports = json::array();
    for (const Cell& ca : a.cells) {
      const Cell* cb = b.find(ca.key);
      if (!cb || !ca.integer || !cb->integer || ca.histogram.empty() || cb->histogram.empty()) continue;
      const auto r = pointstats::ks_two_sample(ca.histogram, cb->histogram, p->threshold);
      reports.push_back(json{{"key", ca.key},
                             {"ks_stat", r.ks_stat},
                             {"wasserstein1", r.wasserstein1},
                             {"n1", r.n1},
                             {"n2", r.n2},
                             {"threshold", r.threshold},
                             {"pass", r.passes()},
                             {"mean_a", ca.mean},
                             {"mean_b", cb->mean},
                             {"mean_diff_se", std::sqrt(ca.stderr_ * ca.stderr_ + cb->stderr_ * cb->stderr_)}});
    }
    s.derived = json{{"experiment_a", a.experiment}, {"experiment_b", b.experiment}, {"reports", reports}};
  } else if (const auto* p = std::get_if<BulkCountsParams>(&job.params)) {
    const ensemble::EnsembleParams ep{p->n, p->beta, p->mu, job.master_seed};
    table.int_keys = detail::count_keys(p->lambdas);
    std::vector<double> phase_lambdas;
    for (double l : p->lambdas) {
      if (l != 0.0) phase_lambdas.push_back(l);
    }
    const double n0 = ep.n0();
    std::vector<std::size_t> phase_ells;
    for (double t : p->phase_times) {
      phase_ells.push_back(static_cast<std::size_t>(std::floor(t * n0)));
      for (double l : phase_lambdas) {
        table.real_keys.push_back(cell_key("alpha", {{"t", t}, {"lambda", l}}));
        table.real_keys.push_back(cell_key("phi", {{"t", t}, {"lambda", l}}));
      }
    }
    table.allocate(job.n_paths);
    const std::size_t last = phase_ells.empty() ? 0 : *std::max_element(phase_ells.begin(), phase_ells.end());
    run_table(
        table, job.master_seed, job.workers,
        [&](std::uint64_t, RngStream& rng, std::span<long> ints, std::span<double> reals, PathFlags&) {
          const auto m = ensemble::sample_ensemble(ep, rng);
          const auto c = ensemble::scaled_counts(m, ep, p->lambdas);
          for (std::size_t i = 0; i < c.counts.size(); ++i) ints[i] = c.counts[i];
          if (phase_ells.empty()) return;
          const auto model = ensemble::conjugate(m);
          std::size_t col = 0;
          std::vector<std::vector<ensemble::RegularizedPhaseState>> runs;
          for (double l : phase_lambdas) runs.push_back(ensemble::regularized_phase_run(model, ep, l, last));
          for (std::size_t ti = 0; ti < phase_ells.size(); ++ti) {
            for (std::size_t li = 0; li < phase_lambdas.size(); ++li) {
              const auto& st = runs[li][phase_ells[ti]];
              reals[col++] = st.alpha;
              reals[col++] = st.phi;
            }
          }
        },
        progress);
    s.derived = json{{"n0", n0}, {"edge_diagnostic", ep.edge_diagnostic()}, {"scale_factor", 2.0 * std::sqrt(n0)}};
  } else if (const auto* p = std::get_if<SineCountsParams>(&job.params)) {
    table.int_keys = detail::count_keys(p->lambdas);
    table.allocate(job.n_paths);
    const auto spec = carousel::IntensitySpec::exponential(p->beta);
    run_table(
        table, job.master_seed, job.workers,
        [&](std::uint64_t, RngStream& rng, std::span<long> ints, std::span<double>, PathFlags& flags) {
          detail::fill_counts(carousel::solve_counts(spec, p->lambdas, p->solver, rng), ints, flags);
        },
        progress);
  } else if (const auto* p = std::get_if<CarouselCountsParams>(&job.params)) {
    table.int_keys = detail::count_keys(p->lambdas);
    table.allocate(job.n_paths);
    const auto spec = carousel::IntensitySpec::exponential(p->beta);
    const std::complex<double> z0 = std::polar(1.0, p->z0_angle);
    run_table(
        table, job.master_seed, job.workers,
        [&](std::uint64_t, RngStream& rng, std::span<long> ints, std::span<double>, PathFlags& flags) {
          detail::fill_counts(carousel::carousel_counts(spec, p->lambdas, p->solver, rng, z0), ints, flags);
        },
        progress);
  } else if (const auto* p = std::get_if<GapProbParams>(&job.params)) {
    table.int_keys = detail::count_keys(p->lambdas);
    table.allocate(job.n_paths);
    const auto spec = carousel::IntensitySpec::exponential(p->beta);
    run_table(
        table, job.master_seed, job.workers,
        [&](std::uint64_t, RngStream& rng, std::span<long> ints, std::span<double>, PathFlags& flags) {
          detail::fill_counts(carousel::solve_counts(spec, p->lambdas, p->solver, rng), ints, flags);
        },
        progress);
  } else if (const auto* p = std::get_if<PhaseTransitionParams>(&job.params)) {
    for (double dt : p->dt_list) {
      table.int_keys.push_back(cell_key("N", {{"dt", dt}}));
      table.int_keys.push_back(cell_key("below", {{"dt", dt}}));
      table.int_keys.push_back(cell_key("above", {{"dt", dt}}));
      table.int_keys.push_back(cell_key("undecided", {{"dt", dt}}));
    }
    table.allocate(job.n_paths);
    const auto spec = carousel::IntensitySpec::exponential(p->beta);
    run_table(
        table, job.master_seed, job.workers,
        [&](std::uint64_t path, RngStream&, std::span<long> ints, std::span<double>, PathFlags& flags) {
          for (std::size_t d = 0; d < p->dt_list.size(); ++d) {
            carousel::SolverConfig cfg = p->solver;
            cfg.dt_max = p->dt_list[d];
            RngStream rng(detail::derived_seed(job.master_seed, d), path);
            const auto r = carousel::solve_single_counts(spec, p->lambda, cfg, rng);
            const auto a = r.approach[0];
            ints[4 * d + 0] = r.counts[0];
            ints[4 * d + 1] = a == carousel::Approach::below;
            ints[4 * d + 2] = a == carousel::Approach::above;
            ints[4 * d + 3] = a == carousel::Approach::undecided;
            if (!r.converged[0]) flags.unconverged = true;
          }
        },
        progress);
  } else if (const auto* p = std::get_if<LimitSdeParams>(&job.params)) {
    for (double t : p->times) table.real_keys.push_back(cell_key("phi", {{"t", t}}));
    for (double t : p->times) table.real_keys.push_back(cell_key("alpha", {{"t", t}}));
    table.allocate(job.n_paths);
    run_table(
        table, job.master_seed, job.workers,
        [&](std::uint64_t path, RngStream& rng, std::span<long>, std::span<double> reals, PathFlags&) {
          const auto phi = carousel::solve_phase_limit_sde(p->nu, p->beta, p->lambda, p->times, p->solver, rng);
          RngStream rng2(detail::derived_seed(job.master_seed, 1), path);
          const auto alpha = carousel::solve_relative_phase_limit(p->beta, p->lambda, p->times, p->solver, rng2);
          for (std::size_t i = 0; i < phi.size(); ++i) reals[i] = phi[i];
          for (std::size_t i = 0; i < alpha.size(); ++i) reals[phi.size() + i] = alpha[i];
        },
        progress);
  }

  if (job.experiment() != Experiment::compare) {
    s.cells = aggregate(table);
    s.flags = count_flags(table);
    json derived = s.derived.is_null() ? json::object() : s.derived;
    if (!table.errors.empty()) derived["errors"] = table.errors;

    if (const auto* p = std::get_if<GapProbParams>(&job.params)) {
      json estimates = json::array();
      json fits = json::object();
      for (long k : p->ks) {
        std::vector<pointstats::GapEstimate> per_k;
        for (double l : p->lambdas) {
          const auto g = pointstats::gap_probability(l, s.at(count_key(l)).histogram, k);
          per_k.push_back(g);
          json e{{"lambda", g.lambda}, {"k", g.k},         {"n", g.n},
                 {"p_hat", g.p_hat},   {"ci_low", g.ci_low}, {"ci_high", g.ci_high}};
          e["neg_log_p"] = g.neg_log_p ? json(*g.neg_log_p) : json(nullptr);
          estimates.push_back(std::move(e));
        }
        json fit;
        try {
          const auto f = pointstats::gap_slope_fit(per_k);
          fit = json{{"slope", f.slope},
                     {"slope_se", f.slope_se},
                     {"intercept", f.intercept},
                     {"used", f.used},
                     {"excluded_lambdas", f.excluded_lambdas},
                     {"target", p->beta / 64.0}};
        } catch (const std::invalid_argument& e) {
          fit = json{{"error", e.what()}, {"target", p->beta / 64.0}};
        }
        fits[std::to_string(k)] = std::move(fit);
      }
      derived["gap_estimates"] = std::move(estimates);
      derived["slope_fits"] = std::move(fits);
    } else if (const auto* p = std::get_if<PhaseTransitionParams>(&job.params)) {
      json rows = json::array();
      for (double dt : p->dt_list) {
        json row{{"dt", dt}};
        for (const char* name : {"below", "above", "undecided"}) {
          const Cell& c = s.at(cell_key(name, {{"dt", dt}}));
          const auto it = c.histogram.find(1);
          const std::uint64_t hits = it == c.histogram.end() ? 0 : it->second;
          const auto iv = pointstats::wilson_interval(hits, std::max<std::uint64_t>(c.n, 1));
          row[name] = json{{"fraction", c.mean}, {"count", hits}, {"ci_low", iv.low}, {"ci_high", iv.high}};
        }
        rows.push_back(std::move(row));
      }
      derived["approach"] = std::move(rows);
    }
    s.derived = derived.empty() ? json() : derived;
  }

  if (job.record_timing) {
    s.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
  return out;
}

inline RunSummary run_job(const JobSpec& job, const ProgressFn& progress = {}) {
  return run_job_with_table(job, progress).summary;
}

/// Per-path CSV sidecar: path, one column per cell, status bits.
inline void write_path_csv(const PathTable& t, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
  f << "path";
  for (const auto& k : t.int_keys) f << ",\"" << k << '"';
  for (const auto& k : t.real_keys) f << ",\"" << k << '"';
  f << ",status\n";
  for (std::uint64_t p = 0; p < t.n_paths; ++p) {
    f << p;
    for (std::size_t c = 0; c < t.int_keys.size(); ++c) f << "," << t.int_at(p, c);
    for (std::size_t c = 0; c < t.real_keys.size(); ++c) f << "," << format_double17(t.real_at(p, c));
    f << "," << static_cast<int>(t.status[p]) << "\n";
  }
}

}  // namespace sinebeta::mc
