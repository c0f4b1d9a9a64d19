#pragma once

// Learnable pair-merging layers used to build memory trees.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "lmn/gradcheck.hpp"
#include "lmn/memory.hpp"
#include "lmn/ops.hpp"
#include "lmn/rng.hpp"

namespace lmn {

template <class T>
BasicTensor<T> uniform_param(Shape shape, double fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(fan_in);
  std::vector<T> values(numel(shape));
  for (auto& v : values) v = static_cast<T>(rng.uniform(-bound, bound));
  return BasicTensor<T>::from(std::move(shape), std::span<const T>(values), true);
}

/// out = concat(older, newer) @ weight[2E, E] + bias[E].
template <class T>
struct LinearSummarizer {
  BasicTensor<T> weight;
  BasicTensor<T> bias;  // undefined when the summarizer is bias-free

  static LinearSummarizer init(std::size_t embed, bool with_bias, Rng& rng) {
    LinearSummarizer s;
    s.weight = uniform_param<T>({2 * embed, embed}, 2.0 * embed, rng);
    if (with_bias) s.bias = uniform_param<T>({embed}, 2.0 * embed, rng);
    return s;
  }

  std::size_t embed() const { return weight.dim(1); }
  std::size_t node_width(std::size_t) const { return 1; }

  BasicTensor<T> merge(const BasicTensor<T>& pairs, std::size_t = 0) const {
    if (pairs.rank() != 2 || pairs.dim(1) != 2 * embed()) throw ShapeError("LinearSummarizer::merge", pairs.shape(), weight.shape());
    op_counter().summarizer_apps += pairs.dim(0);
    return linear(pairs, weight, bias);
  }

  void collect(NamedParams<T>& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".weight", weight);
    if (bias.defined()) out.emplace_back(prefix + ".bias", bias);
  }
};

/// Depthwise kernel-2 stride-2 convolution over the (older, newer) pair,
/// then a pointwise [E, E] map.
template <class T>
struct DsConvSummarizer {
  BasicTensor<T> depthwise;  // [E, 2]
  BasicTensor<T> pointwise;  // [E, E]
  BasicTensor<T> bias;       // [E] or undefined

  static DsConvSummarizer init(std::size_t embed, bool with_bias, Rng& rng) {
    DsConvSummarizer s;
    s.depthwise = uniform_param<T>({embed, 2}, 2.0, rng);
    s.pointwise = uniform_param<T>({embed, embed}, static_cast<double>(embed), rng);
    if (with_bias) s.bias = uniform_param<T>({embed}, static_cast<double>(embed), rng);
    return s;
  }

  std::size_t embed() const { return pointwise.dim(0); }
  std::size_t node_width(std::size_t) const { return 1; }

  BasicTensor<T> merge(const BasicTensor<T>& pairs, std::size_t = 0) const {
    const std::size_t E = embed();
    if (pairs.rank() != 2 || pairs.dim(1) != 2 * E) throw ShapeError("DsConvSummarizer::merge", pairs.shape(), pointwise.shape());
    const std::size_t n = pairs.dim(0);
    op_counter().summarizer_apps += n;
    BasicTensor<T> mixed = depthwise_conv1d_k2s2(reshape(pairs, {n, 2, E}), depthwise);
    return linear(reshape(mixed, {n, E}), pointwise, bias);
  }

  void collect(NamedParams<T>& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".depthwise", depthwise);
    out.emplace_back(prefix + ".pointwise", pointwise);
    if (bias.defined()) out.emplace_back(prefix + ".bias", bias);
  }
};

/// Slot widths of expander memory: w_l = 1 + l * k.
inline std::vector<std::size_t> expanded_slot_widths(std::size_t levels, std::size_t expansion) {
  std::vector<std::size_t> widths(levels);
  for (std::size_t l = 0; l < levels; ++l) widths[l] = 1 + l * expansion;
  return widths;
}

/// S + k * S * (S - 1) / 2
inline std::size_t expanded_slot_total(std::size_t levels, std::size_t expansion) {
  return levels + expansion * levels * (levels - (levels > 0 ? 1 : 0)) / 2;
}

/// Merges two width-w blocks into one width-(w + k) block: a kernel-2
/// stride-2 convolution along the slot axis halves [2w, E] to [w, E], then a
/// stride-1 transposed convolution with kernel k + 1 widens it to [w + k, E].
template <class T>
struct ExpanderSummarizer {
  BasicTensor<T> conv_weight;    // [2E, E], tap-major
  BasicTensor<T> conv_bias;      // [E] or undefined
  BasicTensor<T> expand_weight;  // [k + 1, E, E]
  BasicTensor<T> expand_bias;    // [E] or undefined

  static ExpanderSummarizer init(std::size_t embed, std::size_t expansion, bool with_bias, Rng& rng) {
    ExpanderSummarizer s;
    s.conv_weight = uniform_param<T>({2 * embed, embed}, 2.0 * embed, rng);
    if (with_bias) s.conv_bias = uniform_param<T>({embed}, 2.0 * embed, rng);
    const double fan = static_cast<double>(embed * (expansion + 1));
    s.expand_weight = uniform_param<T>({expansion + 1, embed, embed}, fan, rng);
    if (with_bias) s.expand_bias = uniform_param<T>({embed}, fan, rng);
    return s;
  }

  std::size_t embed() const { return conv_weight.dim(1); }
  std::size_t expansion() const { return expand_weight.dim(0) - 1; }
  std::size_t node_width(std::size_t level) const { return 1 + level * expansion(); }

  /// left, right: [N, w, E] -> [N, w + k, E]
  BasicTensor<T> expand_merge(const BasicTensor<T>& left, const BasicTensor<T>& right) const {
    if (left.shape() != right.shape() || left.rank() != 3) throw ShapeError("expand_merge: block widths differ", left.shape(), right.shape());
    const std::size_t n = left.dim(0);
    const std::size_t w = left.dim(1);
    return merge_blocks(reshape(concat<T>({left, right}, 1), {n, 2 * w, embed()}));
  }

  BasicTensor<T> merge(const BasicTensor<T>& pairs, std::size_t level) const {
    const std::size_t E = embed();
    const std::size_t w = node_width(level);
    if (pairs.rank() != 2 || pairs.dim(1) != 2 * w * E) {
      throw ShapeError("ExpanderSummarizer::merge: level " + std::to_string(level) + " expects rows of " +
                       std::to_string(2 * w * E) + ", got " + shape_str(pairs.shape()));
    }
    const std::size_t n = pairs.dim(0);
    BasicTensor<T> out = merge_blocks(reshape(pairs, {n, 2 * w, E}));
    return reshape(out, {n, out.dim(1) * E});
  }

  void collect(NamedParams<T>& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".conv_weight", conv_weight);
    if (conv_bias.defined()) out.emplace_back(prefix + ".conv_bias", conv_bias);
    out.emplace_back(prefix + ".expand_weight", expand_weight);
    if (expand_bias.defined()) out.emplace_back(prefix + ".expand_bias", expand_bias);
  }

 private:
  // blocks [N, 2w, E] -> [N, w + k, E]
  BasicTensor<T> merge_blocks(const BasicTensor<T>& blocks) const {
    const std::size_t n = blocks.dim(0);
    op_counter().summarizer_apps += n;
    op_counter().expander_apps += n;
    BasicTensor<T> halved = conv1d_k2s2(blocks, conv_weight, conv_bias);
    return conv_transpose1d(halved, expand_weight, expand_bias);
  }
};

template <class T>
MemoryTensor<T> build_expanded_memory(const BasicTensor<T>& x, const ExpanderSummarizer<T>& es, std::size_t levels,
                                      bool parallel) {
  return parallel ? parallel_memory(x, es, levels) : sequential_memory(x, es, levels);
}

}  // namespace lmn
