#pragma once

// Command-line front end.  run_cli returns the process exit code:
// 0 success, 1 validation error, 2 job failure.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "sinebeta/ensemble.hpp"
#include "sinebeta/mcharness.hpp"
#include "sinebeta/selftest.hpp"

namespace sinebeta::cli {

class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline double parse_number(const std::string& s) {
  std::string t = s;
  t.erase(0, t.find_first_not_of(" \t"));
  t.erase(t.find_last_not_of(" \t") + 1);
  if (t == "inf" || t == "+inf" || t == "infinity") return std::numeric_limits<double>::infinity();
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(t, &used);
  } catch (const std::exception&) {
    throw ValidationError("not a number: '" + s + "'");
  }
  if (used != t.size()) throw ValidationError("not a number: '" + s + "'");
  return v;
}

inline std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(parse_number(item));
  }
  if (out.empty()) throw ValidationError("empty list: '" + s + "'");
  return out;
}

/// `a:b:step` (endpoints included within half a step) or a comma list.
inline std::vector<double> parse_lambda_grid(const std::string& s) {
  if (s.find(':') == std::string::npos) return parse_list(s);
  std::vector<std::string> parts;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ':')) parts.push_back(item);
  if (parts.size() != 3) throw ValidationError("grid must look like a:b:step, got '" + s + "'");
  const double a = parse_number(parts[0]);
  const double b = parse_number(parts[1]);
  const double step = parse_number(parts[2]);
  if (!std::isfinite(a) || !std::isfinite(b) || !std::isfinite(step)) throw ValidationError("grid values must be finite");
  if (!(step > 0.0)) throw ValidationError("grid step must be positive");
  if (b < a) throw ValidationError("grid end must not precede its start");
  const double count = std::floor((b - a) / step + 0.5) + 1.0;
  if (count > 1e7) throw ValidationError("grid has too many points");
  std::vector<double> out;
  for (long i = 0; i < static_cast<long>(count); ++i) out.push_back(a + static_cast<double>(i) * step);
  return out;
}

struct SolverOptions {
  double dt_max = 1e-3;
  double tail_tol = 1e-4;
  double angle_tol = 0.05;
  double t_hard_max = 0.0;
  double below_margin = 1e-3;
  std::size_t min_window_steps = 100;

  void attach(CLI::App* sub) {
    sub->add_option("--dt-max", dt_max, "Largest time step")->capture_default_str();
    sub->add_option("--tail-tol", tail_tol, "Stop once lambda_max times the remaining intensity is below this")
        ->capture_default_str();
    sub->add_option("--angle-tol", angle_tol, "Required distance of each angle to 2 pi Z at the stop")
        ->capture_default_str();
    sub->add_option("--t-hard-max", t_hard_max, "Hard time limit (0 = 40 (4/beta)(1 + log(1 + lambda_max)))")
        ->capture_default_str();
    sub->add_option("--below-margin", below_margin, "Approach classifier: margin below the level at window start")
        ->capture_default_str();
    sub->add_option("--min-window-steps", min_window_steps, "Approach classifier: minimum window length in steps")
        ->capture_default_str();
  }

  carousel::SolverConfig config() const {
    carousel::SolverConfig c;
    c.dt_max = dt_max;
    c.tail_tol = tail_tol;
    c.angle_tol = angle_tol;
    c.t_hard_max = t_hard_max;
    c.below_margin = below_margin;
    c.approach_min_steps = min_window_steps;
    return c;
  }
};

namespace detail {

inline void emit(const std::string& text, const std::string& out_path) {
  if (out_path.empty()) {
    std::cout << text;
    std::cout.flush();
    return;
  }
  std::ofstream f(out_path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open '" + out_path + "' for writing");
  f << text;
}

inline std::string render_matrix(const ensemble::TridiagonalSymmetric& m, const ensemble::ConjugatedModel* c,
                                 mc::Format format) {
  using mc::format_double17;
  const std::size_t n = m.size();
  if (format == mc::Format::json) {
    mc::json j;
    if (c) {
      j = mc::json{{"x", c->x}, {"y", c->y}, {"s", c->s}};
    } else {
      j = mc::json{{"diag", m.diag}, {"offdiag", m.offdiag}};
    }
    return j.dump(2) + "\n";
  }
  std::ostringstream out;
  if (c) {
    out << "row,x,y,s\n";
    for (std::size_t i = 0; i < n; ++i) {
      out << i << "," << format_double17(c->x[i]) << "," << format_double17(c->y[i]) << ","
          << format_double17(c->s[i]) << "\n";
    }
  } else {
    out << "row,diag,offdiag\n";
    for (std::size_t i = 0; i < n; ++i) {
      out << i << "," << format_double17(m.diag[i]) << ",";
      if (i + 1 < n) out << format_double17(m.offdiag[i]);
      out << "\n";
    }
  }
  return out.str();
}

}  // namespace detail

inline int run_cli(int argc, const char* const* argv, std::ostream& err = std::cerr) {
  CLI::App app{"Finite-n beta-ensembles and the Sine_beta process: Monte Carlo experiments"};
  app.require_subcommand(1);
  app.fallthrough();

  std::uint64_t seed = 1;
  std::uint64_t paths = 1000;
  unsigned workers = 0;
  std::string out_path;
  std::string format_name = "json";
  bool quiet = false;
  bool no_timing = false;
  std::string per_path;
  app.add_option("--seed", seed, "Master seed")->capture_default_str();
  app.add_option("--paths", paths, "Number of Monte Carlo paths")->capture_default_str();
  app.add_option("--workers", workers, "Worker threads (0 = all cores; SINE_BETA_THREADS caps it)")
      ->capture_default_str();
  app.add_option("--out", out_path, "Output file (default: standard output)");
  app.add_option("--format", format_name, "Output format")->check(CLI::IsMember({"json", "csv"}))->capture_default_str();
  app.add_flag("--quiet", quiet, "Suppress progress messages");
  app.add_flag("--no-timing", no_timing, "Record wall_seconds as 0 so repeated runs are byte-identical");
  app.add_option("--per-path", per_path, "Also write per-path records to this CSV file");

  // sample-ensemble
  auto* sample = app.add_subcommand("sample-ensemble", "Emit one sampled tridiagonal matrix");
  std::size_t s_n = 10;
  double s_beta = 2.0;
  bool s_conj = false;
  sample->add_option("--n", s_n, "Matrix size")->capture_default_str();
  sample->add_option("--beta", s_beta, "beta")->capture_default_str();
  sample->add_flag("--conjugated", s_conj, "Emit the conjugated (x, y, s) form");

  // bulk-counts
  auto* bulk = app.add_subcommand("bulk-counts", "Scaled eigenvalue counts of the finite-n ensemble");
  mc::BulkCountsParams bulk_p;
  std::string bulk_grid = "0:6.283185307179586:3.141592653589793";
  std::string bulk_times;
  bulk->add_option("--n", bulk_p.n, "Matrix size")->capture_default_str();
  bulk->add_option("--beta", bulk_p.beta, "beta")->capture_default_str();
  bulk->add_option("--mu", bulk_p.mu, "Center of the scaling window")->capture_default_str();
  bulk->add_option("--lambdas", bulk_grid, "Grid a:b:step or comma list")->capture_default_str();
  bulk->add_option("--phase-times", bulk_times, "Comma list of t in (0,1) at which to record alpha and phi");

  // sine-counts
  auto* sine = app.add_subcommand("sine-counts", "Counts from the coupled stochastic sine equation");
  mc::SineCountsParams sine_p;
  std::string sine_grid = "0:6.283185307179586:3.141592653589793";
  SolverOptions sine_solver;
  sine->add_option("--beta", sine_p.beta, "beta")->capture_default_str();
  sine->add_option("--lambdas", sine_grid, "Grid a:b:step or comma list")->capture_default_str();
  sine_solver.attach(sine);

  // carousel-counts
  auto* car = app.add_subcommand("carousel-counts", "Counts from the Brownian carousel");
  mc::CarouselCountsParams car_p;
  std::string car_grid = "0:6.283185307179586:3.141592653589793";
  SolverOptions car_solver;
  car->add_option("--beta", car_p.beta, "beta")->capture_default_str();
  car->add_option("--lambdas", car_grid, "Grid a:b:step or comma list")->capture_default_str();
  car->add_option("--z0", car_p.z0_angle, "Angle of the boundary start point z0")->capture_default_str();
  car_solver.attach(car);

  // gap-prob
  auto* gap = app.add_subcommand("gap-prob", "Gap probabilities P(N(lambda) <= k) and the slope fit");
  mc::GapProbParams gap_p;
  std::string gap_lambdas = "6,10,14";
  std::string gap_ks = "0";
  SolverOptions gap_solver;
  gap->add_option("--beta", gap_p.beta, "beta")->capture_default_str();
  gap->add_option("--lambda-list", gap_lambdas, "Comma list of lambda")->capture_default_str();
  gap->add_option("--k", gap_ks, "Comma list of k")->capture_default_str();
  gap_solver.attach(gap);

  // phase-transition
  auto* pt = app.add_subcommand("phase-transition", "Approach-direction fractions per time step");
  mc::PhaseTransitionParams pt_p;
  std::string pt_dts = "0.001,0.0005";
  SolverOptions pt_solver;
  pt->add_option("--beta", pt_p.beta, "beta")->capture_default_str();
  pt->add_option("--lambda", pt_p.lambda, "lambda")->capture_default_str();
  pt->add_option("--dt-list", pt_dts, "Comma list of time steps")->capture_default_str();
  pt_solver.attach(pt);

  // compare
  auto* cmp = app.add_subcommand("compare", "Two-sample report between two result files");
  mc::CompareParams cmp_p;
  cmp->add_option("--file-a", cmp_p.file_a, "First result file")->required();
  cmp->add_option("--file-b", cmp_p.file_b, "Second result file")->required();
  cmp->add_option("--threshold", cmp_p.threshold, "KS decision threshold")->capture_default_str();

  // limit-sde
  auto* lim = app.add_subcommand("limit-sde", "Limiting phase and relative-phase SDEs on [0, 1)");
  mc::LimitSdeParams lim_p;
  std::string lim_nu = "inf";
  std::string lim_times = "0.25,0.5,0.75";
  SolverOptions lim_solver;
  lim->add_option("--beta", lim_p.beta, "beta")->capture_default_str();
  lim->add_option("--nu", lim_nu, "nu in [0, inf]")->capture_default_str();
  lim->add_option("--lambda", lim_p.lambda, "lambda")->capture_default_str();
  lim->add_option("--times", lim_times, "Comma list of t in [0, 1)")->capture_default_str();
  lim_solver.attach(lim);

  auto* self = app.add_subcommand("selftest", "Run the exact invariant checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    std::cout << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  const mc::Format format = format_name == "csv" ? mc::Format::csv : mc::Format::json;
  mc::ProgressFn progress;
  if (!quiet) {
    progress = [&err](std::uint64_t done, std::uint64_t total) {
      err << "\rprogress: " << done << "/" << total << (done == total ? "\n" : "") << std::flush;
    };
  }

  mc::JobSpec job;
  try {
    if (*self) {
      bool ok = true;
      std::ostringstream out;
      for (const auto& r : selftest::run_all()) {
        ok = ok && r.pass;
        out << (r.pass ? "PASS " : "FAIL ") << r.name;
        if (!r.detail.empty()) out << " (" << r.detail << ")";
        out << "\n";
      }
      detail::emit(out.str(), out_path);
      return ok ? 0 : 2;
    }
    if (*sample) {
      const ensemble::EnsembleParams p{s_n, s_beta, 0.0, seed};
      p.validate();
      mc::RngStream rng(seed, 0);
      const auto m = ensemble::sample_ensemble(p, rng);
      if (s_conj) {
        const auto c = ensemble::conjugate(m);
        detail::emit(detail::render_matrix(m, &c, format), out_path);
      } else {
        detail::emit(detail::render_matrix(m, nullptr, format), out_path);
      }
      return 0;
    }
    if (*bulk) {
      bulk_p.lambdas = parse_lambda_grid(bulk_grid);
      if (!bulk_times.empty()) bulk_p.phase_times = parse_list(bulk_times);
      job.params = bulk_p;
    } else if (*sine) {
      sine_p.lambdas = parse_lambda_grid(sine_grid);
      sine_p.solver = sine_solver.config();
      job.params = sine_p;
    } else if (*car) {
      car_p.lambdas = parse_lambda_grid(car_grid);
      car_p.solver = car_solver.config();
      job.params = car_p;
    } else if (*gap) {
      gap_p.lambdas = parse_list(gap_lambdas);
      gap_p.ks.clear();
      for (double k : parse_list(gap_ks)) {
        if (k != std::floor(k)) throw ValidationError("k must be an integer");
        gap_p.ks.push_back(static_cast<long>(k));
      }
      gap_p.solver = gap_solver.config();
      job.params = gap_p;
    } else if (*pt) {
      pt_p.dt_list = parse_list(pt_dts);
      pt_p.solver = pt_solver.config();
      job.params = pt_p;
    } else if (*cmp) {
      job.params = cmp_p;
    } else if (*lim) {
      lim_p.nu = parse_number(lim_nu);
      lim_p.times = parse_list(lim_times);
      lim_p.solver = lim_solver.config();
      job.params = lim_p;
    }
    job.n_paths = paths;
    job.master_seed = seed;
    job.workers = workers;
    job.output_path = out_path;
    job.record_timing = !no_timing;
    job.validate();
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }

  try {
    auto result = mc::run_job_with_table(job, progress);
    detail::emit(mc::render(result.summary, format), out_path);
    if (!per_path.empty()) mc::write_path_csv(result.table, per_path);
    if (result.summary.failed()) {
      err << "error: " << result.summary.flags.errored << " of " << result.summary.n_paths << " paths failed\n";
      for (const auto& e : result.table.errors) err << "  " << e << "\n";
      return 2;
    }
    if (const auto* c = std::get_if<mc::CompareParams>(&job.params); c && !quiet) {
      for (const auto& r : result.summary.derived.at("reports")) {
        err << r.at("key").get<std::string>() << ": ks " << r.at("ks_stat").get<double>() << " w1 "
            << r.at("wasserstein1").get<double>() << (r.at("pass").get<bool>() ? " pass" : " FAIL") << "\n";
      }
    }
  } catch (const mc::SchemaError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace sinebeta::cli
