#pragma once

// Logarithmic tree memory.
//
// Position t sees the current token plus one summary node for every set bit
// of t: bit l covers the block of 2^l tokens that the greedy binary
// decomposition of the prefix [0, t) assigns to level l. Two constructions
// produce the same per-position memory:
//   sequential: a binary counter of slots; pushing a token runs the carry
//               chain, merging (older, newer) pairs upward.
//   parallel:   a pyramid of all aligned pair summaries, then a gather of
//               the blocks each position needs.

#include <bit>
#include <concepts>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "lmn/ops.hpp"
#include "lmn/tensor.hpp"

namespace lmn {

class CapacityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A learnable pair merge. merge() receives [N, 2 * width(level) * E]
/// (older node first) and returns [N, width(level + 1) * E].
template <class S, class T>
concept PairSummarizer = requires(const S& s, const BasicTensor<T>& pairs, std::size_t level) {
  { s.embed() } -> std::convertible_to<std::size_t>;
  { s.node_width(level) } -> std::convertible_to<std::size_t>;
  { s.merge(pairs, level) } -> std::same_as<BasicTensor<T>>;
};

/// Number of slot levels needed for sequences up to max_seq_len tokens.
inline std::size_t slot_levels(std::size_t max_seq_len) {
  if (max_seq_len == 0) throw std::invalid_argument("slot_levels: max_seq_len must be positive");
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::bit_width(max_seq_len - 1)));
}

struct PointerUpdate {
  std::uint64_t new_pointer;
  std::uint64_t bitmask;
};

/// Advances the token pointer. Bits set in the mask mark the levels that
/// change: every set bit below the highest is a merge, the highest is the
/// write of the carried node.
inline PointerUpdate summarize_table(std::uint64_t prev_pointer) {
  const std::uint64_t next = prev_pointer + 1;
  return {next, prev_pointer ^ next};
}

/// Entry layout of one memory row: entry 0 is the current token, then the
/// entries of slot level 0, 1, ... with widths[l] entries each.
struct MemoryLayout {
  std::vector<std::size_t> widths;
  std::vector<std::size_t> offsets;
  std::size_t entries = 1;

  static MemoryLayout from_widths(std::vector<std::size_t> widths) {
    MemoryLayout layout;
    layout.widths = std::move(widths);
    for (std::size_t w : layout.widths) {
      layout.offsets.push_back(layout.entries);
      layout.entries += w;
    }
    return layout;
  }

  template <class T, PairSummarizer<T> S>
  static MemoryLayout of(const S& summarizer, std::size_t levels) {
    std::vector<std::size_t> widths(levels);
    for (std::size_t l = 0; l < levels; ++l) widths[l] = summarizer.node_width(l);
    return from_widths(std::move(widths));
  }

  std::size_t levels() const { return widths.size(); }

  /// Validity of each entry at position t.
  std::vector<std::uint8_t> valid_row(std::uint64_t t) const {
    std::vector<std::uint8_t> row(entries, 0);
    row[0] = 1;
    for (std::size_t l = 0; l < widths.size(); ++l)
      if ((t >> l) & 1U) std::fill_n(row.begin() + offsets[l], widths[l], 1);
    return row;
  }

  std::size_t valid_count(std::uint64_t t) const {
    std::size_t n = 1;
    for (std::size_t l = 0; l < widths.size(); ++l)
      if ((t >> l) & 1U) n += widths[l];
    return n;
  }
};

/// Per-position memory: data [B, L, D, E]; valid is row-major [L, D].
/// Invalid entries hold exact zeros.
template <class T>
struct MemoryTensor {
  BasicTensor<T> data;
  std::vector<std::uint8_t> valid;

  std::size_t batch() const { return data.dim(0); }
  std::size_t length() const { return data.dim(1); }
  std::size_t entries() const { return data.dim(2); }
  std::size_t embed() const { return data.dim(3); }
  bool is_valid(std::size_t t, std::size_t i) const { return valid[t * entries() + i] != 0; }
};

template <class T>
std::vector<std::uint8_t> valid_mask(const MemoryLayout& layout, std::size_t length, std::uint64_t first_position = 0) {
  std::vector<std::uint8_t> mask;
  mask.reserve(length * layout.entries);
  for (std::size_t t = 0; t < length; ++t) {
    const auto row = layout.valid_row(first_position + t);
    mask.insert(mask.end(), row.begin(), row.end());
  }
  return mask;
}

/// Binary-counter memory state: slot l is occupied iff bit l of `consumed`
/// is set, and then holds a node summarizing 2^l consecutive tokens. Slots
/// are [B, width(l) * E].
template <class T>
struct SlotState {
  explicit SlotState(std::size_t levels) : slots(levels) {}

  std::vector<BasicTensor<T>> slots;
  std::uint64_t consumed = 0;

  std::size_t levels() const { return slots.size(); }
  bool occupied(std::size_t level) const { return slots[level].defined(); }
  std::uint64_t capacity() const { return std::uint64_t{1} << slots.size(); }
};

/// Pushes one node through the carry chain driven by summarize_table's mask.
template <class T, PairSummarizer<T> S>
void push_token(SlotState<T>& state, const BasicTensor<T>& x, const S& summarizer) {
  const PointerUpdate update = summarize_table(state.consumed);
  const std::size_t top = static_cast<std::size_t>(std::bit_width(update.bitmask)) - 1;
  if (top >= state.levels()) {
    throw CapacityError("memory capacity exceeded: " + std::to_string(state.consumed + 1) + " tokens need more than " +
                        std::to_string(state.levels()) + " slot levels");
  }
  BasicTensor<T> carry = x;
  for (std::size_t l = 0; l < top; ++l) {
    if (!state.occupied(l)) throw ContractError("push_token: slot state does not match its pointer");
    carry = summarizer.merge(concat<T>({state.slots[l], carry}, 1), l);
    state.slots[l] = BasicTensor<T>();
  }
  state.slots[top] = carry;
  state.consumed = update.new_pointer;
}

/// Memory row for the position whose predecessors are in `state`:
/// data [B, 1, D, E] and the validity of its D entries.
template <class T>
MemoryTensor<T> snapshot(const SlotState<T>& state, const BasicTensor<T>& current, const MemoryLayout& layout) {
  const std::size_t B = current.dim(0);
  const std::size_t E = current.dim(1);
  if (layout.levels() != state.levels()) throw ContractError("snapshot: layout and state disagree on level count");
  std::vector<BasicTensor<T>> parts;
  parts.reserve(layout.levels() + 1);
  parts.push_back(reshape(current, {B, 1, 1, E}));
  for (std::size_t l = 0; l < layout.levels(); ++l) {
    const std::size_t w = layout.widths[l];
    if (state.occupied(l)) {
      parts.push_back(reshape(state.slots[l], {B, 1, w, E}));
    } else {
      parts.push_back(BasicTensor<T>::zeros({B, 1, w, E}));
    }
  }
  return {concat(parts, 2), layout.valid_row(state.consumed)};
}

template <class T>
BasicTensor<T> position(const BasicTensor<T>& x, std::size_t t) {
  return reshape(slice(x, 1, t, 1), {x.dim(0), x.dim(2)});
}

/// Builds the memory of x [B, L, E] position by position. The token at t is
/// pushed only when position t + 1 is processed, so a sequence of exactly
/// 2^levels tokens fits.
template <class T, PairSummarizer<T> S>
MemoryTensor<T> sequential_memory(const BasicTensor<T>& x, const S& summarizer, std::size_t levels) {
  if (x.rank() != 3 || x.dim(2) != summarizer.embed()) throw ShapeError("sequential_memory: expected [B, L, E], got " + shape_str(x.shape()));
  const std::size_t L = x.dim(1);
  const MemoryLayout layout = MemoryLayout::of<T>(summarizer, levels);
  if (L > (std::uint64_t{1} << levels)) {
    throw CapacityError("sequence of " + std::to_string(L) + " tokens exceeds memory capacity " + std::to_string(std::uint64_t{1} << levels));
  }
  SlotState<T> state(levels);
  std::vector<BasicTensor<T>> rows;
  rows.reserve(L);
  BasicTensor<T> previous;
  for (std::size_t t = 0; t < L; ++t) {
    BasicTensor<T> current = position(x, t);
    if (t > 0) push_token(state, previous, summarizer);
    rows.push_back(snapshot(state, current, layout).data);
    previous = std::move(current);
  }
  return {concat(rows, 1), valid_mask<T>(layout, L)};
}

/// levels[l] is [B, ceil(L_pad / 2^l), width(l) * E]; levels[0] is the
/// zero-padded input.
template <class T>
struct Pyramid {
  std::vector<BasicTensor<T>> levels;
  std::size_t length = 0;  // unpadded L
};

template <class T, PairSummarizer<T> S>
Pyramid<T> build_pyramid(const BasicTensor<T>& x, const S& summarizer) {
  if (x.rank() != 3 || x.dim(2) != summarizer.embed()) throw ShapeError("build_pyramid: expected [B, L, E], got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0);
  const std::size_t L = x.dim(1);
  const std::size_t E = x.dim(2);
  const std::size_t padded = std::bit_ceil(L);
  Pyramid<T> p;
  p.length = L;
  p.levels.push_back(padded == L ? x : concat<T>({x, BasicTensor<T>::zeros({B, padded - L, E})}, 1));
  for (std::size_t l = 0, n = padded; n > 1; ++l, n /= 2) {
    const BasicTensor<T>& prev = p.levels.back();
    const std::size_t feat = prev.dim(2);
    BasicTensor<T> merged = summarizer.merge(reshape(prev, {B * (n / 2), 2 * feat}), l);
    p.levels.push_back(reshape(merged, {B, n / 2, merged.dim(1)}));
  }
  return p;
}

/// Index of the level-l block position t reads: blocks are aligned, and the
/// level-l block of [0, t) starts at (t >> (l + 1)) << (l + 1), i.e. node
/// 2 * (t >> (l + 1)) of level l. -1 when bit l of t is clear.
inline std::int64_t gather_index(std::uint64_t t, std::size_t level) {
  if (!((t >> level) & 1U)) return -1;
  return static_cast<std::int64_t>(2 * (t >> (level + 1)));
}

template <class T>
MemoryTensor<T> gather_memory(const Pyramid<T>& p, const MemoryLayout& layout) {
  const BasicTensor<T>& base = p.levels.front();
  const std::size_t B = base.dim(0);
  const std::size_t E = base.dim(2);
  const std::size_t L = p.length;
  std::vector<BasicTensor<T>> parts;
  parts.reserve(layout.levels() + 1);
  parts.push_back(reshape(slice(base, 1, 0, L), {B, L, 1, E}));
  std::vector<std::int64_t> idx(L);
  for (std::size_t l = 0; l < layout.levels(); ++l) {
    const std::size_t w = layout.widths[l];
    bool any = false;
    for (std::size_t t = 0; t < L; ++t) {
      idx[t] = gather_index(t, l);
      any = any || idx[t] >= 0;
    }
    if (!any) {
      parts.push_back(BasicTensor<T>::zeros({B, L, w, E}));
      continue;
    }
    const BasicTensor<T>& level = p.levels.at(l);
    if (level.dim(2) != w * E) throw ContractError("gather_memory: pyramid level width does not match layout");
    parts.push_back(reshape(index_select<T>(level, 1, idx), {B, L, w, E}));
  }
  return {concat(parts, 2), valid_mask<T>(layout, L)};
}

template <class T, PairSummarizer<T> S>
MemoryTensor<T> parallel_memory(const BasicTensor<T>& x, const S& summarizer, std::size_t levels) {
  if (x.rank() == 3 && x.dim(1) > (std::uint64_t{1} << levels)) {
    throw CapacityError("sequence of " + std::to_string(x.dim(1)) + " tokens exceeds memory capacity " + std::to_string(std::uint64_t{1} << levels));
  }
  return gather_memory(build_pyramid(x, summarizer), MemoryLayout::of<T>(summarizer, levels));
}

}  // namespace lmn
