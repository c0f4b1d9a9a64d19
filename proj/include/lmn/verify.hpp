#pragma once

// Self-check suite run by `lmn verify`: every property is checked on random
// weights against an independent slow computation.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "lmn/attention.hpp"
#include "lmn/bench.hpp"
#include "lmn/gradcheck.hpp"
#include "lmn/memory.hpp"
#include "lmn/model.hpp"
#include "lmn/summarizers.hpp"

namespace lmn {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0;
};

namespace oracle {

/// Greedy binary decomposition of the prefix [0, t): (level, start) for each
/// block, oldest first.
inline std::vector<std::pair<std::size_t, std::uint64_t>> prefix_blocks(std::uint64_t t) {
  std::vector<std::pair<std::size_t, std::uint64_t>> blocks;
  std::uint64_t start = 0;
  for (int l = 63; l >= 0; --l) {
    const std::uint64_t size = std::uint64_t{1} << l;
    if (start + size <= t) {
      blocks.emplace_back(static_cast<std::size_t>(l), start);
      start += size;
    }
  }
  return blocks;
}

/// Summary of tokens [start, start + 2^level) of x [B, L, E], merged from
/// scratch as a balanced tree.
template <class T, PairSummarizer<T> S>
BasicTensor<T> block_summary(const BasicTensor<T>& x, const S& s, std::uint64_t start, std::size_t level) {
  if (level == 0) return position(x, static_cast<std::size_t>(start));
  const std::uint64_t half = std::uint64_t{1} << (level - 1);
  BasicTensor<T> older = block_summary(x, s, start, level - 1);
  BasicTensor<T> newer = block_summary(x, s, start + half, level - 1);
  return s.merge(concat<T>({older, newer}, 1), level - 1);
}

/// Memory row of position t rebuilt from its prefix decomposition: [B, D, E].
template <class T, PairSummarizer<T> S>
BasicTensor<T> memory_row(const BasicTensor<T>& x, const S& s, std::size_t levels, std::uint64_t t) {
  const std::size_t B = x.dim(0), E = x.dim(2);
  const MemoryLayout layout = MemoryLayout::of<T>(s, levels);
  std::vector<BasicTensor<T>> parts(levels + 1);
  parts[0] = reshape(position(x, static_cast<std::size_t>(t)), {B, 1, E});
  for (std::size_t l = 0; l < levels; ++l) parts[l + 1] = BasicTensor<T>::zeros({B, layout.widths[l], E});
  for (auto [level, start] : prefix_blocks(t)) parts[level + 1] = reshape(block_summary(x, s, start, level), {B, layout.widths[level], E});
  return concat(parts, 1);
}

}  // namespace oracle

namespace detail {

inline std::vector<std::int32_t> random_tokens(std::size_t n, std::size_t vocab, Rng& rng) {
  std::vector<std::int32_t> t(n);
  for (auto& v : t) v = static_cast<std::int32_t>(rng.uniform_int(0, vocab - 1));
  return t;
}

template <class T>
double max_abs_diff(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return d;
}

inline std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(3) << v;
  return os.str();
}

}  // namespace detail

/// The four LMN architectures named by the mode-equivalence criterion.
inline std::vector<std::pair<std::string, ModelConfig>> equivalence_configs(std::size_t embed, std::size_t max_len, std::size_t blocks) {
  std::vector<std::pair<std::string, ModelConfig>> out;
  const auto make = [&](Variant v, std::size_t banks, SummarizerKind kind = SummarizerKind::linear) {
    ModelConfig c;
    c.variant = v;
    c.vocab_size = 65;
    c.embed = embed;
    c.max_seq_len = max_len;
    c.banks = banks;
    c.expansion = 1;
    c.n_blocks = blocks;
    c.summarizer = kind;
    return c;
  };
  out.emplace_back("logmem nb=1", make(Variant::logmem, 1));
  out.emplace_back("logmem nb=2", make(Variant::logmem, 2));
  out.emplace_back("logmem nb=2 dsconv", make(Variant::logmem, 2, SummarizerKind::dsconv));
  out.emplace_back("tiny-logmem nb=2", make(Variant::tiny_logmem, 2));
  out.emplace_back("expsum k=1", make(Variant::expsum, 1));
  return out;
}

/// Max |parallel - sequential| logits per configuration.
inline CheckResult check_mode_equivalence(std::size_t B, std::size_t L, std::size_t E, std::uint64_t seed = 11) {
  CheckResult r{"mode equivalence (parallel vs sequential logits <= 1e-4)", true, "", 0};
  std::ostringstream os;
  Rng rng(seed);
  for (auto [name, cfg] : equivalence_configs(E, L, 2)) {
    cfg.seed = rng.uniform_int(0, 1u << 30);
    const auto model = Model<float>::init(cfg);
    const auto tokens = detail::random_tokens(B * L, cfg.vocab_size, rng);
    NoGradGuard ng;
    const double d = detail::max_abs_diff(model.forward(tokens, B, L, Mode::parallel).data(), model.forward(tokens, B, L, Mode::sequential).data());
    if (!(d <= 1e-4)) r.passed = false;
    os << name << ": " << detail::fmt(d) << "; ";
  }
  r.detail = os.str();
  return r;
}

/// Memory-level equivalence plus the prefix-decomposition oracle.
inline CheckResult check_memory_oracle(std::size_t B, std::size_t L, std::size_t E, std::uint64_t seed = 12) {
  CheckResult r{"memory rows match parallel, sequential and prefix oracle", true, "", 0};
  Rng rng(seed);
  NoGradGuard ng;
  std::vector<float> xs(B * L * E);
  for (auto& v : xs) v = static_cast<float>(rng.normal());
  const auto x = Tensor::from({B, L, E}, std::span<const float>(xs));
  const std::size_t levels = slot_levels(L);
  double worst = 0;
  const auto run = [&](const auto& s) {
    const auto seq = sequential_memory(x, s, levels);
    const auto par = parallel_memory(x, s, levels);
    worst = std::max(worst, detail::max_abs_diff(seq.data.data(), par.data.data()));
    if (seq.valid != par.valid) r.passed = false;
    const std::size_t D = seq.entries();
    for (std::uint64_t t = 0; t < L; t += std::max<std::size_t>(1, L / 16)) {
      const auto row = oracle::memory_row(x, s, levels, t);
      const auto got = reshape(slice(seq.data, 1, t, 1), {B, D, E});
      worst = std::max(worst, detail::max_abs_diff(row.data(), got.data()));
    }
  };
  run(LinearSummarizer<float>::init(E, true, rng));
  run(DsConvSummarizer<float>::init(E, true, rng));
  run(ExpanderSummarizer<float>::init(E, 1, true, rng));
  run(ExpanderSummarizer<float>::init(E, 2, true, rng));
  if (!(worst <= 1e-5)) r.passed = false;
  r.detail = "max diff " + detail::fmt(worst);
  return r;
}

/// Relative-error grad check of one LMN block (nb = 2) and of a whole tiny
/// model. The 64-bit bound gates; the 32-bit figure is reported only.
template <class T>
GradCheckResult block_grad_check(std::size_t E, std::size_t L, std::size_t B, std::size_t banks, Variant variant, std::uint64_t seed) {
  ModelConfig cfg;
  cfg.variant = variant;
  cfg.vocab_size = 7;
  cfg.embed = E;
  cfg.max_seq_len = L;
  cfg.banks = banks;
  cfg.n_blocks = 1;
  cfg.seed = seed;
  const auto model = Model<T>::init(cfg);
  Rng rng(seed + 1);
  std::vector<T> xs(B * L * E), ws(B * L * E);
  for (auto& v : xs) v = static_cast<T>(rng.normal());
  for (auto& v : ws) v = static_cast<T>(rng.normal());
  auto x = BasicTensor<T>::from({B, L, E}, std::span<const T>(xs), true);
  const auto w = BasicTensor<T>::from({B, L, E}, std::span<const T>(ws));
  NamedParams<T> params;
  for (auto& [name, p] : model.parameters())
    if (name.rfind("blocks.0.", 0) == 0) params.emplace_back(name, p);
  params.emplace_back("input", x);
  // Mean keeps the loss small so rounding noise stays below the error floor on
  // coordinates whose true gradient is zero (query bias under softmax shift).
  const std::function<BasicTensor<T>()> f = [&] { return mean(mul(model.block_forward(0, x, Mode::parallel), w)); };
  return grad_check<T>(f, params, 1e-3);
}

template <class T>
GradCheckResult model_grad_check(Variant variant, std::uint64_t seed) {
  ModelConfig cfg;
  cfg.variant = variant;
  cfg.vocab_size = 5;
  cfg.embed = 4;
  cfg.max_seq_len = 8;
  cfg.banks = 2;
  cfg.n_heads = variant == Variant::baseline ? 2 : 1;
  cfg.seed = seed;
  const auto model = Model<T>::init(cfg);
  Rng rng(seed + 2);
  const auto tokens = detail::random_tokens(8, 5, rng);
  const auto targets = detail::random_tokens(8, 5, rng);
  auto params = model.parameters();
  const std::function<BasicTensor<T>()> f = [&] {
    return lm_loss(model.forward(tokens, 1, 8, Mode::parallel), std::span<const std::int32_t>(targets));
  };
  return grad_check<T>(f, params, 2e-4);
}

inline CheckResult check_gradients() {
  CheckResult r{"gradients match central differences (64-bit, <= 1e-4)", true, "", 0};
  std::ostringstream os;
  const auto note = [&](const std::string& what, const GradCheckResult& g, double bound) {
    if (!(g.max_rel_error <= bound)) r.passed = false;
    os << what << ": " << detail::fmt(g.max_rel_error) << " (" << g.worst_param << ")"
       << "; ";
  };
  note("block f64", block_grad_check<double>(4, 8, 1, 2, Variant::logmem, 3), 1e-4);
  // 32-bit result is informational: the 64-bit bound is the gate.
  const GradCheckResult f32 = block_grad_check<float>(4, 8, 1, 2, Variant::logmem, 3);
  os << "block f32 (info): " << detail::fmt(f32.max_rel_error) << " (" << f32.worst_param << "); ";
  note("expsum block f64", block_grad_check<double>(4, 8, 1, 1, Variant::expsum, 4), 1e-4);
  for (Variant v : {Variant::logmem, Variant::tiny_logmem, Variant::expsum, Variant::baseline}) {
    note(to_string(v) + " model f64", model_grad_check<double>(v, 5), 1e-4);
  }
  r.detail = os.str();
  return r;
}

/// Perturbs every position after t and requires bit-identical logits up to t.
inline CheckResult check_causality(std::size_t trials, std::size_t L, std::uint64_t seed = 13) {
  CheckResult r{"causality (logits at <= t bit-identical after perturbing > t)", true, "", 0};
  Rng rng(seed);
  std::size_t failures = 0;
  std::vector<std::unique_ptr<Model<float>>> models;
  for (Variant v : {Variant::logmem, Variant::tiny_logmem, Variant::expsum, Variant::baseline}) {
    ModelConfig c;
    c.variant = v;
    c.vocab_size = 17;
    c.embed = 8;
    c.max_seq_len = L;
    c.banks = 2;
    c.n_blocks = 2;
    c.n_heads = v == Variant::baseline ? 2 : 1;
    c.seed = rng.uniform_int(0, 1u << 30);
    models.push_back(std::make_unique<Model<float>>(Model<float>::init(c)));
  }
  NoGradGuard ng;
  for (std::size_t trial = 0; trial < trials; ++trial) {
    const Model<float>& m = *models[trial % models.size()];
    const Mode mode = (trial / models.size()) % 2 == 0 ? Mode::parallel : Mode::sequential;
    auto tokens = detail::random_tokens(L, m.config().vocab_size, rng);
    const std::size_t t = static_cast<std::size_t>(rng.uniform_int(0, L - 2));
    const auto before = m.forward(tokens, 1, L, mode);
    for (std::size_t u = t + 1; u < L; ++u) tokens[u] = static_cast<std::int32_t>((tokens[u] + 1 + rng.uniform_int(0, 14)) % 17);
    const auto after = m.forward(tokens, 1, L, mode);
    const std::size_t V = m.config().vocab_size;
    const auto a = before.data().first((t + 1) * V);
    const auto b = after.data().first((t + 1) * V);
    if (!std::equal(a.begin(), a.end(), b.begin())) ++failures;
  }
  r.passed = failures == 0;
  r.detail = std::to_string(trials) + " trials, " + std::to_string(failures) + " failures";
  return r;
}

/// Valid entries per position against the prefix decomposition, and the
/// expander slot totals.
inline CheckResult check_structural_counts(std::uint64_t positions) {
  CheckResult r{"valid entry counts and expander slot totals", true, "", 0};
  const std::size_t S = slot_levels(positions);
  std::size_t mismatches = 0;
  for (std::size_t k : {0, 1, 2, 3}) {
    const MemoryLayout layout = MemoryLayout::from_widths(expanded_slot_widths(S, k == 0 ? 0 : k));
    for (std::uint64_t t = 0; t < positions; ++t) {
      std::size_t expect = 1;
      for (auto [level, start] : oracle::prefix_blocks(t)) {
        expect += 1 + level * k;
        if (gather_index(t, level) != static_cast<std::int64_t>(start >> level)) ++mismatches;
      }
      const auto row = layout.valid_row(t);
      const auto got = static_cast<std::size_t>(std::count(row.begin(), row.end(), std::uint8_t{1}));
      if (got != expect || layout.valid_count(t) != expect) ++mismatches;
      if (k == 0 && got != static_cast<std::size_t>(std::popcount(t)) + 1) ++mismatches;
    }
    if (k > 0 && layout.entries - 1 != S + k * S * (S - 1) / 2) ++mismatches;
    if (k > 0 && expanded_slot_total(S, k) != S + k * S * (S - 1) / 2) ++mismatches;
  }
  // The counter-driven expander memory must have the same widths.
  Rng rng(14);
  const auto es = ExpanderSummarizer<float>::init(2, 1, true, rng);
  const MemoryLayout built = MemoryLayout::of<float>(es, 13);
  if (built.entries - 1 != 91) ++mismatches;
  r.passed = mismatches == 0;
  r.detail = "t < " + std::to_string(positions) + ", k in {0..3}: " + std::to_string(mismatches) + " mismatches";
  return r;
}

/// Softmax weights over random memories, and scores against naive loops.
inline CheckResult check_attention(std::size_t cases, std::uint64_t seed = 15) {
  CheckResult r{"attention weights sum to 1, zero at invalid entries, scores match naive", true, "", 0};
  Rng rng(seed);
  double worst_sum = 0, worst_score = 0;
  std::size_t nonzero_invalid = 0;
  NoGradGuard ng;
  for (std::size_t c = 0; c < cases; ++c) {
    const std::size_t E = 1 + rng.uniform_int(0, 7);
    const std::size_t L = 1 + rng.uniform_int(0, 11);
    const std::size_t banks = 1 + rng.uniform_int(0, 1);
    const std::size_t levels = slot_levels(std::max<std::size_t>(L, 2));
    std::vector<float> xs(L * E);
    for (auto& v : xs) v = static_cast<float>(rng.normal(0, 2));
    const auto x = Tensor::from({1, L, E}, std::span<const float>(xs));
    std::vector<MemoryTensor<float>> mems;
    for (std::size_t b = 0; b < banks; ++b) mems.push_back(parallel_memory(x, LinearSummarizer<float>::init(E, true, rng), levels));
    const auto mem = multi_bank_combine(mems);
    const auto proj = QkvProjection<float>::init(E, rng);
    const auto orientation = c % 2 == 0 ? ScoreOrientation::literal : ScoreOrientation::swapped;
    const auto qkv = qkv_project(mem, proj);
    const auto scores = single_vector_scores(qkv.q, qkv.k, mem.valid, orientation);
    const auto out = attend(qkv, mem.valid, orientation);
    const std::size_t D = mem.entries();
    const auto q = qkv.q.data(), k = qkv.k.data(), w = out.weights.data();
    for (std::size_t t = 0; t < L; ++t) {
      double total = 0;
      for (std::size_t i = 0; i < D; ++i) {
        const std::size_t idx = t * D + i;
        if (!mem.valid[idx]) {
          if (w[idx] != 0.0f) ++nonzero_invalid;
          continue;
        }
        total += w[idx];
        const std::size_t lv = orientation == ScoreOrientation::literal ? idx : t * D;
        const std::size_t an = orientation == ScoreOrientation::literal ? t * D : idx;
        double naive = 0;
        for (std::size_t e = 0; e < E; ++e) naive += static_cast<double>(q[lv * E + e]) * k[an * E + e];
        naive /= std::sqrt(static_cast<double>(E));
        worst_score = std::max(worst_score, std::abs(naive - scores.data()[idx]));
      }
      worst_sum = std::max(worst_sum, std::abs(total - 1.0));
    }
  }
  r.passed = worst_sum <= 1e-6 && worst_score <= 1e-5 && nonzero_invalid == 0;
  r.detail = std::to_string(cases) + " cases: |sum-1| " + detail::fmt(worst_sum) + ", score err " + detail::fmt(worst_score) +
             ", nonzero invalid " + std::to_string(nonzero_invalid);
  return r;
}

/// Live counters against closed forms, and the summarizer application counts.
inline CheckResult check_counters(std::uint64_t L, bool include_ratio) {
  CheckResult r{"score MAC and summarizer counters equal closed forms", true, "", 0};
  std::ostringstream os;
  NoGradGuard ng;
  Rng rng(16);
  for (std::size_t banks : {1, 2}) {
    ModelConfig c;
    c.embed = 8;
    c.max_seq_len = L;
    c.banks = banks;
    const auto m = Model<float>::init(c);
    const auto tokens = detail::random_tokens(L, c.vocab_size, rng);
    for (Mode mode : {Mode::parallel, Mode::sequential}) {
      op_counter().reset();
      (void)m.forward(tokens, 1, L, mode);
      if (op_counter().score_macs != lmn_score_macs(L, c.embed, banks)) r.passed = false;
      const std::uint64_t merges = mode == Mode::parallel ? std::bit_ceil(L) - 1 : (L - 1) - std::popcount(L - 1);
      if (op_counter().summarizer_apps != merges * banks) r.passed = false;
    }
  }
  {
    ModelConfig c;
    c.variant = Variant::baseline;
    c.embed = 8;
    c.max_seq_len = L;
    c.n_heads = 2;
    const auto m = Model<float>::init(c);
    const auto tokens = detail::random_tokens(L, c.vocab_size, rng);
    for (Mode mode : {Mode::parallel, Mode::sequential}) {
      op_counter().reset();
      (void)m.forward(tokens, 1, L, mode);
      if (op_counter().score_macs != baseline_score_macs(L, c.embed)) r.passed = false;
    }
  }
  {
    // Streaming push of L tokens: one merge per completed pair.
    const auto s = LinearSummarizer<float>::init(4, true, rng);
    SlotState<float> state(slot_levels(L));
    op_counter().reset();
    const auto x = Tensor::zeros({1, 4});
    for (std::uint64_t t = 0; t < L; ++t) push_token(state, x, s);
    if (op_counter().summarizer_apps != L - std::popcount(L)) r.passed = false;
  }
  os << "L=" << L;
  if (include_ratio) {
    const std::uint64_t n = 8192;
    const double ratio = static_cast<double>(baseline_score_macs(n, 32)) / static_cast<double>(lmn_score_macs(n, 32, 1));
    if (!(ratio > 100)) r.passed = false;
    os << ", baseline/LMN score MACs at 8192 = " << detail::fmt(ratio);
  }
  r.detail = os.str();
  return r;
}

/// Step-by-step decode logits against teacher-forced parallel forward.
inline CheckResult check_generation(std::size_t prompts, std::size_t L, std::uint64_t seed = 17) {
  CheckResult r{"step-by-step decoding matches teacher-forced forward (<= 1e-4)", true, "", 0};
  Rng rng(seed);
  double worst = 0;
  NoGradGuard ng;
  for (std::size_t p = 0; p < prompts; ++p) {
    ModelConfig c;
    const Variant variants[] = {Variant::logmem, Variant::tiny_logmem, Variant::expsum, Variant::baseline};
    c.variant = variants[p % 4];
    c.embed = 16;
    c.max_seq_len = L;
    c.banks = 2;
    c.n_blocks = 2;
    c.n_heads = c.variant == Variant::baseline ? 4 : 1;
    c.seed = rng.uniform_int(0, 1u << 30);
    const auto m = Model<float>::init(c);
    const auto tokens = detail::random_tokens(L, c.vocab_size, rng);
    const auto full = m.forward(tokens, 1, L, Mode::parallel);
    auto state = m.begin_decode(1);
    for (std::size_t t = 0; t < L; ++t) {
      const auto logits = m.step(state, std::span<const std::int32_t>(&tokens[t], 1));
      worst = std::max(worst, detail::max_abs_diff(logits.data(), full.data().subspan(t * c.vocab_size, c.vocab_size)));
    }
  }
  r.passed = worst <= 1e-4;
  r.detail = std::to_string(prompts) + " prompts of " + std::to_string(L) + ": max diff " + detail::fmt(worst);
  return r;
}

/// Softmax, concat/split and masking identities on random shapes.
inline CheckResult check_engine(std::size_t cases, std::uint64_t seed = 18) {
  CheckResult r{"softmax sums, masked zeros, concat/split identity", true, "", 0};
  Rng rng(seed);
  double worst = 0;
  std::size_t bad = 0;
  for (std::size_t c = 0; c < cases; ++c) {
    const std::size_t rows = 1 + rng.uniform_int(0, 5), cols = 1 + rng.uniform_int(0, 9);
    std::vector<float> xs(rows * cols);
    std::vector<std::uint8_t> keep(cols, 1);
    for (auto& v : xs) v = static_cast<float>(rng.normal(0, 4));
    for (std::size_t j = 1; j < cols; ++j) keep[j] = static_cast<std::uint8_t>(rng.uniform_int(0, 1));
    const auto x = Tensor::from({rows, cols}, std::span<const float>(xs));
    const auto sm = softmax(masked_fill(x, std::span<const std::uint8_t>(keep), -std::numeric_limits<float>::infinity()));
    for (std::size_t i = 0; i < rows; ++i) {
      double total = 0;
      for (std::size_t j = 0; j < cols; ++j) {
        total += sm[i * cols + j];
        if (!keep[j] && sm[i * cols + j] != 0.0f) ++bad;
      }
      worst = std::max(worst, std::abs(total - 1.0));
    }
    if (cols >= 2) {
      const std::size_t cut = rng.uniform_int(1, cols - 1);
      const auto back = concat(split(x, 1, {cut, cols - cut}), 1);
      if (!std::equal(back.data().begin(), back.data().end(), x.data().begin())) ++bad;
    }
  }
  r.passed = worst <= 1e-6 && bad == 0;
  r.detail = "|sum-1| " + detail::fmt(worst) + ", violations " + std::to_string(bad);
  return r;
}

inline std::vector<CheckResult> run_verify(bool quick, const std::function<void(const CheckResult&)>& on_result = {}) {
  std::vector<std::function<CheckResult()>> checks = {
      [] { return check_engine(200); },
      [&] { return check_structural_counts(quick ? 1024 : 4096); },
      [&] { return check_memory_oracle(2, quick ? 32 : 64, quick ? 8 : 16); },
      [&] { return check_attention(quick ? 200 : 1000); },
      [&] { return check_mode_equivalence(2, quick ? 32 : 64, quick ? 8 : 16); },
      [&] { return check_causality(quick ? 24 : 100, quick ? 24 : 48); },
      [] { return check_gradients(); },
      [&] { return check_counters(quick ? 200 : 1000, true); },
      [&] { return check_generation(quick ? 4 : 10, quick ? 24 : 64); },
  };
  std::vector<CheckResult> results;
  for (auto& check : checks) {
    const auto t0 = std::chrono::steady_clock::now();
    CheckResult res;
    try {
      res = check();
    } catch (const std::exception& e) {
      res.name = "check threw";
      res.passed = false;
      res.detail = e.what();
    }
    res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (on_result) on_result(res);
    results.push_back(std::move(res));
  }
  return results;
}

}  // namespace lmn
