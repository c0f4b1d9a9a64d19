#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "lmn/checkpoint.hpp"
#include "lmn/config_text.hpp"
#include "lmn/data.hpp"
#include "lmn/model.hpp"

namespace lmn {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Schedule { constant, cosine };

struct TrainConfig {
  std::size_t batch_size = 16;
  std::size_t block_size = 512;
  std::size_t max_iters = 5000;
  double learning_rate = 1e-3;
  std::size_t eval_iters = 200;
  std::size_t eval_interval = 500;
  std::uint64_t seed = 1337;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  double grad_clip = 1.0;  // global norm; 0 disables
  Schedule schedule = Schedule::constant;
  double min_lr_ratio = 0.1;  // cosine floor as a fraction of learning_rate
  double train_fraction = 0.9;

  void validate(const ModelConfig& model) const {
    if (batch_size == 0 || block_size == 0 || max_iters == 0 || eval_iters == 0 || eval_interval == 0) {
      throw ConfigError("train: sizes and iteration counts must be positive");
    }
    if (!(learning_rate > 0)) throw ConfigError("train.learning_rate must be positive");
    if (block_size > model.max_seq_len) {
      throw ConfigError("train.block_size " + std::to_string(block_size) + " exceeds model.max_seq_len " + std::to_string(model.max_seq_len));
    }
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("train: betas must lie in [0, 1)");
    if (grad_clip < 0 || weight_decay < 0) throw ConfigError("train: grad_clip and weight_decay must be non-negative");
  }

  std::string to_text() const {
    std::ostringstream os;
    os << std::setprecision(17);
    os << "train.batch_size=" << batch_size << '\n'
       << "train.block_size=" << block_size << '\n'
       << "train.max_iters=" << max_iters << '\n'
       << "train.learning_rate=" << learning_rate << '\n'
       << "train.eval_iters=" << eval_iters << '\n'
       << "train.eval_interval=" << eval_interval << '\n'
       << "train.seed=" << seed << '\n'
       << "train.beta1=" << beta1 << '\n'
       << "train.beta2=" << beta2 << '\n'
       << "train.adam_eps=" << adam_eps << '\n'
       << "train.weight_decay=" << weight_decay << '\n'
       << "train.grad_clip=" << grad_clip << '\n'
       << "train.schedule=" << (schedule == Schedule::constant ? "constant" : "cosine") << '\n'
       << "train.min_lr_ratio=" << min_lr_ratio << '\n'
       << "train.train_fraction=" << train_fraction << '\n';
    return os.str();
  }

  bool set(const std::string& key, const std::string& value) {
    if (key == "train.batch_size") batch_size = parse_positive(key, value);
    else if (key == "train.block_size") block_size = parse_positive(key, value);
    else if (key == "train.max_iters") max_iters = parse_positive(key, value);
    else if (key == "train.learning_rate") learning_rate = parse_double(key, value);
    else if (key == "train.eval_iters") eval_iters = parse_positive(key, value);
    else if (key == "train.eval_interval") eval_interval = parse_positive(key, value);
    else if (key == "train.seed") seed = parse_uint(key, value);
    else if (key == "train.beta1") beta1 = parse_double(key, value);
    else if (key == "train.beta2") beta2 = parse_double(key, value);
    else if (key == "train.adam_eps") adam_eps = parse_double(key, value);
    else if (key == "train.weight_decay") weight_decay = parse_double(key, value);
    else if (key == "train.grad_clip") grad_clip = parse_double(key, value);
    else if (key == "train.schedule") {
      if (value == "constant") schedule = Schedule::constant;
      else if (value == "cosine") schedule = Schedule::cosine;
      else throw ConfigError("train.schedule: expected constant or cosine, got '" + value + "'");
    }
    else if (key == "train.min_lr_ratio") min_lr_ratio = parse_double(key, value);
    else if (key == "train.train_fraction") train_fraction = parse_double(key, value);
    else return false;
    return true;
  }

  double lr_at(std::size_t step) const {
    if (schedule == Schedule::constant) return learning_rate;
    const double progress = static_cast<double>(step) / static_cast<double>(max_iters);
    const double floor = learning_rate * min_lr_ratio;
    return floor + 0.5 * (learning_rate - floor) * (1.0 + std::cos(std::numbers::pi * progress));
  }
};

/// Adam with decoupled weight decay.
class AdamW {
 public:
  AdamW(NamedParams<float> params, const TrainConfig& cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& [name, p] : params_) {
      m_.emplace_back(p.numel(), 0.0f);
      v_.emplace_back(p.numel(), 0.0f);
    }
  }

  void zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
  }

  /// Global L2 norm of all gradients (missing gradients count as zero).
  double grad_norm() const {
    double total = 0;
    for (const auto& [name, p] : params_) {
      if (!p.has_grad()) continue;
      for (float g : p.grad()) total += static_cast<double>(g) * g;
    }
    return std::sqrt(total);
  }

  /// Returns the pre-clipping gradient norm.
  double step(double lr) {
    ++t_;
    const double norm = grad_norm();
    const double clip = cfg_.grad_clip > 0 && norm > cfg_.grad_clip ? cfg_.grad_clip / (norm + 1e-6) : 1.0;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i].second;
      auto w = p.mutable_data();
      const bool has = p.has_grad();
      const std::span<const float> g = has ? p.grad() : std::span<const float>{};
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = has ? g[j] * clip : 0.0;
        m[j] = static_cast<float>(cfg_.beta1 * m[j] + (1 - cfg_.beta1) * gj);
        v[j] = static_cast<float>(cfg_.beta2 * v[j] + (1 - cfg_.beta2) * gj * gj);
        const double update = (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.adam_eps);
        w[j] = static_cast<float>(w[j] - lr * (update + cfg_.weight_decay * w[j]));
      }
    }
    return norm;
  }

  const NamedParams<float>& params() const { return params_; }

 private:
  NamedParams<float> params_;
  TrainConfig cfg_;
  std::vector<std::vector<float>> m_, v_;
  std::uint64_t t_ = 0;
};

struct EvalResult {
  double train_loss = 0;
  double val_loss = 0;
};

/// Mean loss over eval_iters fresh batches per split; parameters untouched.
inline EvalResult evaluate(const Model<float>& model, const Dataset& ds, const TrainConfig& cfg, std::uint64_t seed) {
  NoGradGuard no_grad;
  EvalResult r;
  Rng rng(seed);
  for (Split s : {Split::train, Split::val}) {
    double total = 0;
    for (std::size_t i = 0; i < cfg.eval_iters; ++i) {
      const Batch b = sample_batch(ds, s, cfg.batch_size, cfg.block_size, rng);
      total += lm_loss(model.forward(b.inputs, b.batch, b.length, Mode::parallel), std::span<const std::int32_t>(b.targets)).item();
    }
    (s == Split::train ? r.train_loss : r.val_loss) = total / static_cast<double>(cfg.eval_iters);
  }
  return r;
}

struct TrainRow {
  std::size_t step = 0;
  double train_loss = 0;
  double val_loss = 0;
};

struct TrainReport {
  std::vector<TrainRow> rows;
  double final_train_loss = 0;
  double final_val_loss = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::size_t best_step = 0;
  double seconds = 0;
};

struct TrainOutputs {
  std::filesystem::path dir;  // empty: write nothing
  std::function<void(const std::string&)> log;
};

inline void write_report_csv(const std::filesystem::path& path, const TrainReport& report) {
  std::ofstream os(path);
  if (!os) throw TrainingError("cannot write '" + path.string() + "'");
  os << "step,train_loss,val_loss\n" << std::setprecision(6) << std::fixed;
  for (const auto& r : report.rows) os << r.step << ',' << r.train_loss << ',' << r.val_loss << '\n';
}

/// Parallel-mode training. Evaluates at step 0, every eval_interval steps and
/// after the last step; checkpoints best.ckpt on improvement and final.ckpt at
/// the end.
inline TrainReport train(Model<float>& model, const Dataset& ds, const TrainConfig& cfg, const TrainOutputs& out = {}) {
  cfg.validate(model.config());
  const auto start = std::chrono::steady_clock::now();
  TrainReport report;
  AdamW opt(model.parameters(), cfg);
  Rng rng(cfg.seed);
  const auto log = [&](const std::string& line) {
    if (out.log) out.log(line);
  };
  const auto run_eval = [&](std::size_t step) {
    const EvalResult e = evaluate(model, ds, cfg, cfg.seed + 7919 * (step + 1));
    report.rows.push_back({step, e.train_loss, e.val_loss});
    std::ostringstream os;
    os << std::fixed << std::setprecision(4) << "step " << step << ": train " << e.train_loss << ", val " << e.val_loss;
    log(os.str());
    if (e.val_loss < report.best_val_loss) {
      report.best_val_loss = e.val_loss;
      report.best_step = step;
      if (!out.dir.empty()) save_checkpoint(out.dir / "best.ckpt", model);
    }
    report.final_train_loss = e.train_loss;
    report.final_val_loss = e.val_loss;
  };

  run_eval(0);
  for (std::size_t step = 1; step <= cfg.max_iters; ++step) {
    const double lr = cfg.lr_at(step - 1);
    const Batch b = sample_batch(ds, Split::train, cfg.batch_size, cfg.block_size, rng);
    opt.zero_grad();
    const Tensor loss = lm_loss(model.forward(b.inputs, b.batch, b.length, Mode::parallel), std::span<const std::int32_t>(b.targets));
    if (!std::isfinite(loss.item())) {
      std::ostringstream os;
      os << "non-finite loss at step " << step << " (lr " << lr << ", previous grad norm " << opt.grad_norm() << ")";
      throw TrainingError(os.str());
    }
    loss.backward();
    const double norm = opt.grad_norm();
    if (!std::isfinite(norm)) {
      std::ostringstream os;
      os << "non-finite gradient at step " << step << " (lr " << lr << ", loss " << loss.item() << "); per-parameter norms:";
      for (const auto& [name, p] : opt.params()) {
        double n2 = 0;
        if (p.has_grad())
          for (float g : p.grad()) n2 += static_cast<double>(g) * g;
        os << ' ' << name << '=' << std::sqrt(n2);
      }
      throw TrainingError(os.str());
    }
    opt.step(lr);
    if (step % cfg.eval_interval == 0 || step == cfg.max_iters) run_eval(step);
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (!out.dir.empty()) {
    save_checkpoint(out.dir / "final.ckpt", model);
    write_report_csv(out.dir / "report.csv", report);
  }
  return report;
}

}  // namespace lmn
