#pragma once

// Scaling sweeps: wall time, peak tracked bytes and counted work per
// (variant, mode, length), written as CSV with a log-log slope footer.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <new>
#include <sstream>
#include <string>
#include <vector>

#include "lmn/alloc.hpp"
#include "lmn/config_text.hpp"
#include "lmn/counters.hpp"
#include "lmn/model.hpp"

namespace lmn {

/// n^2 / log2(n): full attention scores over logarithmic memory entries.
inline double compression_factor(std::uint64_t n) {
  if (n < 2) throw std::invalid_argument("compression_factor: n must be at least 2");
  const double x = static_cast<double>(n);
  return x * x / std::log2(x);
}

struct BenchRecord {
  std::string variant;
  Mode mode = Mode::parallel;
  std::size_t length = 0;
  std::size_t reps = 0;
  double median_seconds = 0;
  std::size_t peak_bytes = 0;
  std::uint64_t score_macs = 0;
  std::uint64_t summarizer_ops = 0;
  std::string status = "ok";
};

struct BenchConfig {
  std::vector<std::uint64_t> lengths{256, 1024, 4096, 16384};
  std::vector<Variant> variants{Variant::logmem, Variant::baseline};
  std::vector<Mode> modes{Mode::parallel, Mode::sequential};
  std::size_t reps = 3;
  std::size_t memory_limit_mb = 3072;
  std::uint64_t seed = 1337;

  bool set(const std::string& key, const std::string& value) {
    if (key == "bench.lengths") {
      lengths = parse_uint_list(key, value);
    } else if (key == "bench.variants") {
      variants.clear();
      for (std::string_view rest = value; !rest.empty();) {
        const auto comma = rest.find(',');
        variants.push_back(parse_variant(trim(rest.substr(0, comma))));
        rest = comma == std::string_view::npos ? std::string_view{} : rest.substr(comma + 1);
      }
    } else if (key == "bench.modes") {
      modes.clear();
      for (std::string_view rest = value; !rest.empty();) {
        const auto comma = rest.find(',');
        modes.push_back(parse_mode(trim(rest.substr(0, comma))));
        rest = comma == std::string_view::npos ? std::string_view{} : rest.substr(comma + 1);
      }
    } else if (key == "bench.reps") {
      reps = parse_positive(key, value);
    } else if (key == "bench.memory_limit_mb") {
      memory_limit_mb = parse_uint(key, value);
    } else if (key == "bench.seed") {
      seed = parse_uint(key, value);
    } else {
      return false;
    }
    return true;
  }

  std::string to_text() const {
    std::ostringstream os;
    const auto join = [&](const auto& items, auto&& fmt) {
      std::string out;
      for (const auto& x : items) out += (out.empty() ? "" : ",") + fmt(x);
      return out;
    };
    os << "bench.lengths=" << join(lengths, [](auto v) { return std::to_string(v); }) << '\n'
       << "bench.variants=" << join(variants, [](Variant v) { return to_string(v); }) << '\n'
       << "bench.modes=" << join(modes, [](Mode m) { return to_string(m); }) << '\n'
       << "bench.reps=" << reps << '\n'
       << "bench.memory_limit_mb=" << memory_limit_mb << '\n'
       << "bench.seed=" << seed << '\n';
    return os.str();
  }

  void validate() const {
    if (reps < 3) throw ConfigError("bench.reps must be at least 3");
    if (lengths.empty() || variants.empty() || modes.empty()) throw ConfigError("bench: lengths, variants and modes must be non-empty");
  }
};

/// Sets an allocation limit for the lifetime of the object.
class AllocationLimit {
 public:
  explicit AllocationLimit(std::size_t bytes) : previous_(alloc_counters().limit.load()) { set_allocation_limit(bytes); }
  ~AllocationLimit() { set_allocation_limit(previous_); }
  AllocationLimit(const AllocationLimit&) = delete;
  AllocationLimit& operator=(const AllocationLimit&) = delete;

 private:
  std::size_t previous_;
};

/// One inference pass over `tokens` (batch 1). Parallel mode runs the full
/// forward; sequential mode feeds one token at a time through a decode state.
inline void run_inference(const Model<float>& model, std::span<const std::int32_t> tokens, Mode mode) {
  NoGradGuard no_grad;
  if (mode == Mode::parallel) {
    (void)model.forward(tokens, 1, tokens.size(), Mode::parallel);
    return;
  }
  DecodeState<float> state = model.begin_decode(1);
  for (std::int32_t tok : tokens) (void)model.step(state, std::span<const std::int32_t>(&tok, 1));
}

/// Median wall time over `reps` runs after one warm-up. Peak bytes and
/// counters come from the last run; both are deterministic across runs.
inline BenchRecord time_forward(const Model<float>& model, std::size_t length, Mode mode, std::size_t reps, std::uint64_t seed = 1) {
  if (reps < 3) throw std::invalid_argument("time_forward: at least 3 repetitions required");
  BenchRecord rec;
  rec.variant = to_string(model.config().variant);
  rec.mode = mode;
  rec.length = length;
  rec.reps = reps;
  try {
    Rng rng(seed);
    std::vector<std::int32_t> tokens(length);
    for (auto& t : tokens) t = static_cast<std::int32_t>(rng.uniform_int(0, model.config().vocab_size - 1));
    run_inference(model, tokens, mode);
    std::vector<double> times;
    for (std::size_t r = 0; r < reps; ++r) {
      op_counter().reset();
      PeakScope scope;
      const auto t0 = std::chrono::steady_clock::now();
      run_inference(model, tokens, mode);
      times.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
      rec.peak_bytes = scope.peak_bytes();
      rec.score_macs = op_counter().score_macs;
      rec.summarizer_ops = op_counter().summarizer_apps;
    }
    std::sort(times.begin(), times.end());
    rec.median_seconds = times[times.size() / 2];
  } catch (const std::bad_alloc&) {
    rec.status = "failed";
  } catch (const CapacityError&) {
    rec.status = "failed";
  }
  return rec;
}

struct SlopeFit {
  std::string variant;
  Mode mode = Mode::parallel;
  double time_slope = 0;
  double peak_slope = 0;
  std::size_t points = 0;
};

/// Least-squares slope of log(y) against log(x).
inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) return std::nan("");
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(x.size());
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  return sxx > 0 ? sxy / sxx : std::nan("");
}

inline std::vector<SlopeFit> fit_slopes(const std::vector<BenchRecord>& rows) {
  std::map<std::pair<std::string, int>, std::vector<const BenchRecord*>> groups;
  for (const auto& r : rows)
    if (r.status == "ok") groups[{r.variant, static_cast<int>(r.mode)}].push_back(&r);
  std::vector<SlopeFit> fits;
  for (const auto& [key, recs] : groups) {
    std::vector<double> x, t, p;
    for (const auto* r : recs) {
      x.push_back(static_cast<double>(r->length));
      t.push_back(std::max(r->median_seconds, 1e-9));
      p.push_back(std::max<double>(static_cast<double>(r->peak_bytes), 1.0));
    }
    fits.push_back({key.first, static_cast<Mode>(key.second), loglog_slope(x, t), loglog_slope(x, p), recs.size()});
  }
  return fits;
}

inline std::string csv_header() { return "variant,mode,L,reps,median_seconds,peak_bytes,score_macs,summarizer_ops,status"; }

inline std::string csv_row(const BenchRecord& r) {
  std::ostringstream os;
  os << r.variant << ',' << to_string(r.mode) << ',' << r.length << ',' << r.reps << ',' << std::setprecision(6) << std::scientific
     << r.median_seconds << ',' << r.peak_bytes << ',' << r.score_macs << ',' << r.summarizer_ops << ',' << r.status;
  return os.str();
}

/// Model used for a sweep: the given architecture with max_seq_len raised to
/// the longest swept length.
inline ModelConfig bench_model_config(ModelConfig base, Variant variant, std::uint64_t max_length) {
  base.variant = variant;
  base.max_seq_len = std::max<std::size_t>(base.max_seq_len, max_length);
  if (variant == Variant::expsum) base.banks = 1;
  if (variant == Variant::tiny_logmem) base.ffn_mult = 1;
  return base;
}

/// Runs the cross product and writes `out_path` (if non-empty). Every row is
/// flushed as soon as it is measured; the slope footer follows the rows.
inline std::vector<BenchRecord> sweep(const BenchConfig& cfg, const ModelConfig& base, const std::filesystem::path& out_path,
                                      const std::function<void(const BenchRecord&)>& on_row = {}) {
  cfg.validate();
  std::ofstream os;
  if (!out_path.empty()) {
    os.open(out_path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write '" + out_path.string() + "'");
    os << csv_header() << '\n' << std::flush;
  }
  const std::uint64_t max_length = *std::max_element(cfg.lengths.begin(), cfg.lengths.end());
  AllocationLimit limit(cfg.memory_limit_mb << 20);
  std::vector<BenchRecord> rows;
  for (Variant v : cfg.variants) {
    const Model<float> model = Model<float>::init(bench_model_config(base, v, max_length));
    for (Mode mode : cfg.modes)
      for (std::uint64_t L : cfg.lengths) {
        rows.push_back(time_forward(model, L, mode, cfg.reps, cfg.seed));
        if (os.is_open()) os << csv_row(rows.back()) << '\n' << std::flush;
        if (on_row) on_row(rows.back());
      }
  }
  if (os.is_open()) {
    for (const auto& f : fit_slopes(rows)) {
      os << "# slope variant=" << f.variant << " mode=" << to_string(f.mode) << " points=" << f.points << std::fixed << std::setprecision(3)
         << " time=" << f.time_slope << " peak_bytes=" << f.peak_slope << '\n';
    }
  }
  return rows;
}

/// Score multiply-accumulates of one LMN forward over L positions (batch 1).
inline std::uint64_t lmn_score_macs(std::uint64_t length, std::size_t embed, std::size_t banks) {
  std::uint64_t entries = 0;
  for (std::uint64_t t = 0; t < length; ++t) entries += static_cast<std::uint64_t>(std::popcount(t)) + 1;
  return entries * embed * banks;
}

/// Causal full attention: position t scores t + 1 keys.
inline std::uint64_t baseline_score_macs(std::uint64_t length, std::size_t embed) { return embed * length * (length + 1) / 2; }

}  // namespace lmn
