// Acceptance run: one PASS/FAIL line per criterion, exit 1 if any fails.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "lmn/bench.hpp"
#include "lmn/data.hpp"
#include "lmn/train.hpp"
#include "lmn/verify.hpp"

namespace fs = std::filesystem;
using namespace lmn;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Outcome from_check(const CheckResult& r, double seconds, double budget) {
  const bool in_time = seconds < budget;
  return {r.passed && in_time, r.detail + " (" + fmt(seconds, 1) + " s, budget " + fmt(budget, 0) + " s)"};
}

template <class Check>
Outcome timed_check(Check check, double budget) {
  const auto t0 = std::chrono::steady_clock::now();
  const CheckResult r = check();
  return from_check(r, seconds_since(t0), budget);
}

void apply_config_file(const fs::path& path, ModelConfig& model, TrainConfig& train) {
  for (const auto& kv : parse_key_values(read_text_file(path))) {
    if (!model.set(kv.key, kv.value) && !train.set(kv.key, kv.value)) throw ConfigError(path.string() + ": unknown key '" + kv.key + "'");
  }
}

Outcome param_counts() {
  const std::pair<Variant, std::size_t> reference[] = {
      {Variant::logmem, 71489}, {Variant::tiny_logmem, 42305}, {Variant::baseline, 71105}};
  Outcome o{true, ""};
  for (auto [v, target] : reference) {
    const std::size_t n = param_count(ModelConfig::table1(v));
    const double rel = (static_cast<double>(n) - static_cast<double>(target)) / static_cast<double>(target);
    if (std::abs(rel) > 0.15) o.passed = false;
    o.detail += to_string(v) + " " + std::to_string(n) + " (target " + std::to_string(target) + ", delta " +
                std::to_string(static_cast<long long>(n) - static_cast<long long>(target)) + "); ";
  }
  if (!(param_count(ModelConfig::table1(Variant::tiny_logmem)) < param_count(ModelConfig::table1(Variant::logmem)))) o.passed = false;
  return o;
}

Outcome scaling(const fs::path& csv) {
  const auto t0 = std::chrono::steady_clock::now();
  BenchConfig b;
  b.lengths = {1024, 2048, 4096, 8192, 16384};
  b.variants = {Variant::logmem, Variant::baseline};
  b.modes = {Mode::parallel, Mode::sequential};
  b.reps = 9;
  ModelConfig base;
  base.embed = 32;
  const auto rows = sweep(b, base, csv);
  const auto find = [&](Variant v, Mode m, std::size_t L) -> const BenchRecord& {
    for (const auto& r : rows)
      if (r.variant == to_string(v) && r.mode == m && r.length == L) return r;
    throw std::logic_error("missing bench row");
  };
  double base_slope = std::nan(""), lmn_slope = std::nan("");
  for (const auto& f : fit_slopes(rows)) {
    if (f.mode != Mode::parallel) continue;
    (f.variant == to_string(Variant::baseline) ? base_slope : lmn_slope) = f.time_slope;
  }
  const auto growth = [&](Variant v) {
    return static_cast<double>(find(v, Mode::sequential, 16384).peak_bytes) / static_cast<double>(find(v, Mode::sequential, 1024).peak_bytes);
  };
  bool all_ok = true;
  for (const auto& r : rows) all_ok &= r.status == "ok";
  const double lmn_growth = growth(Variant::logmem), base_growth = growth(Variant::baseline);
  const double secs = seconds_since(t0);
  Outcome o;
  o.passed = all_ok && base_slope >= 1.7 && lmn_slope <= 1.3 && lmn_growth < 2.0 && base_growth >= 8.0 && secs < 600;
  o.detail = "time slope baseline " + fmt(base_slope, 3) + " (>= 1.7), LMN parallel " + fmt(lmn_slope, 3) +
             " (<= 1.3); sequential peak growth 1024->16384: LMN " + fmt(lmn_growth, 3) + "x (< 2), baseline " + fmt(base_growth, 2) +
             "x (>= 8); " + fmt(secs, 1) + " s; rows in " + csv.string();
  return o;
}

Outcome training(const fs::path& corpus, const fs::path& config_dir, const fs::path& out_dir) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::string text = read_text_file(corpus);
  const Vocab vocab = Vocab::build(text);
  const auto run = [&](const std::string& name) {
    ModelConfig model;
    TrainConfig cfg;
    apply_config_file(config_dir / (name + "-reduced.conf"), model, cfg);
    model.vocab_size = vocab.size();
    model = model.normalized();
    model.validate();
    const Dataset ds = Dataset::from_ids(vocab.encode(text), cfg.train_fraction);
    Model<float> m = Model<float>::init(model);
    const fs::path dir = out_dir / name;
    fs::create_directories(dir);
    return train(m, ds, cfg, {dir, [&](const std::string& line) { std::cerr << "  [" << name << "] " << line << std::endl; }});
  };
  const TrainReport lmn = run("logmem");
  const TrainReport base = run("baseline");
  const double ceiling = std::log(static_cast<double>(vocab.size())) - 1.0;
  const double secs = seconds_since(t0);
  Outcome o;
  o.passed = lmn.final_val_loss < base.final_val_loss && lmn.final_val_loss < ceiling && base.final_val_loss < ceiling && secs < 7200;
  o.detail = "val loss LMN " + fmt(lmn.final_val_loss) + " vs baseline " + fmt(base.final_val_loss) + " (both < ln(" +
             std::to_string(vocab.size()) + ") - 1 = " + fmt(ceiling) + "); " + fmt(secs / 60, 1) + " min";
  return o;
}

Outcome cli_verify(const std::string& cli) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::string cmd = "\"" + cli + "\" verify --quick > acceptance_verify.log 2>&1";
  const int status = std::system(cmd.c_str());
  const double secs = seconds_since(t0);
  return {status == 0 && secs < 60, "exit status " + std::to_string(status) + ", " + fmt(secs, 1) + " s (budget 60 s)"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string corpus, cli, config_dir, out = "acceptance_out";
  std::vector<int> only;
  app.add_option("--corpus", corpus, "training corpus")->required();
  app.add_option("--cli", cli, "path to the lmn executable")->required();
  app.add_option("--configs", config_dir, "directory holding the reduced training configs");
  app.add_option("--out", out, "directory for bench and training artifacts");
  app.add_option("--only", only, "run only these criteria");
  CLI11_PARSE(app, argc, argv);
  if (config_dir.empty()) config_dir = (fs::path(corpus).parent_path().parent_path() / "configs").string();
  fs::create_directories(out);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"mode equivalence", [] { return timed_check([] { return check_mode_equivalence(2, 64, 16); }, 10); }},
      {"gradient correctness", [] { return timed_check([] { return check_gradients(); }, 60); }},
      {"causality", [] { return timed_check([] { return check_causality(100, 48); }, 600); }},
      {"structural counts", [] { return timed_check([] { return check_structural_counts(4096); }, 600); }},
      {"attention invariants", [] { return timed_check([] { return check_attention(1000); }, 600); }},
      {"complexity counters", [] { return timed_check([] { return check_counters(1000, true); }, 600); }},
      {"scaling trends", [&] { return scaling(fs::path(out) / "bench.csv"); }},
      {"training comparison", [&] { return training(corpus, config_dir, fs::path(out) / "train"); }},
      {"parameter counts", [] { return param_counts(); }},
      {"generation consistency", [] { return timed_check([] { return check_generation(10, 64); }, 600); }},
      {"verify --quick", [&] { return cli_verify(cli); }},
  };

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failures += o.passed ? 0 : 1;
    std::cout << (o.passed ? "PASS" : "FAIL") << "  " << std::setw(2) << id << ". " << criteria[i].first << ": " << o.detail << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
