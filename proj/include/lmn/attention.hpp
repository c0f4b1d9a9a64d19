#pragma once

// Single-vector attention: every position attends over its own memory
// entries only, scoring each entry against the current token (entry 0).

#include <cmath>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "lmn/counters.hpp"
#include "lmn/gradcheck.hpp"
#include "lmn/memory.hpp"
#include "lmn/ops.hpp"
#include "lmn/summarizers.hpp"

namespace lmn {

/// literal: score_i = <Q_i, K_0>; swapped: score_i = <Q_0, K_i>.
enum class ScoreOrientation { literal, swapped };

template <class T>
struct QkvProjection {
  BasicTensor<T> weight;  // [E, 3E]
  BasicTensor<T> bias;    // [3E]

  static QkvProjection init(std::size_t embed, Rng& rng) {
    return {uniform_param<T>({embed, 3 * embed}, static_cast<double>(embed), rng),
            uniform_param<T>({3 * embed}, static_cast<double>(embed), rng)};
  }

  std::size_t embed() const { return weight.dim(0); }

  void collect(NamedParams<T>& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".weight", weight);
    out.emplace_back(prefix + ".bias", bias);
  }
};

template <class T>
struct Qkv {
  BasicTensor<T> q, k, v;  // each [B, L, D, E]
};

/// Affine map of every memory entry; entries at invalid levels are zeroed
/// again afterwards so padding stays zero.
template <class T>
Qkv<T> qkv_project(const MemoryTensor<T>& mem, const QkvProjection<T>& p) {
  const std::size_t E = mem.embed();
  if (p.embed() != E) throw ShapeError("qkv_project", mem.data.shape(), p.weight.shape());
  BasicTensor<T> proj = masked_fill(linear(mem.data, p.weight, p.bias), std::span<const std::uint8_t>(mem.valid), T{0}, 3 * E);
  auto parts = split(proj, 3, {E, E, E});
  return {parts[0], parts[1], parts[2]};
}

/// scores [B, L, D]. Only valid entries are computed (E multiply-adds each,
/// added to op_counter().score_macs); invalid entries are 0, which equals
/// the dense value because their projected rows are zero.
template <class T>
BasicTensor<T> single_vector_scores(const BasicTensor<T>& q, const BasicTensor<T>& k, std::span<const std::uint8_t> valid,
                                    ScoreOrientation orientation = ScoreOrientation::literal) {
  if (q.rank() != 4 || q.shape() != k.shape()) throw ShapeError("single_vector_scores", q.shape(), k.shape());
  const std::size_t B = q.dim(0), L = q.dim(1), D = q.dim(2), E = q.dim(3);
  if (valid.size() != L * D) throw ShapeError("single_vector_scores: mask does not match [L, D] of " + shape_str(q.shape()));
  const T factor = T{1} / std::sqrt(static_cast<T>(E));
  // "levels" supplies one vector per entry, "anchor" supplies entry 0.
  const bool literal = orientation == ScoreOrientation::literal;
  const T* levels = (literal ? q : k).data().data();
  const T* anchor = (literal ? k : q).data().data();
  Buffer<T> out(B * L * D, T{0});
  std::uint64_t macs = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < L; ++t) {
      const std::size_t base = ((b * L) + t) * D;
      const T* a = anchor + base * E;
      for (std::size_t i = 0; i < D; ++i) {
        if (!valid[t * D + i]) continue;
        const T* lv = levels + (base + i) * E;
        T acc = 0;
        for (std::size_t e = 0; e < E; ++e) acc += lv[e] * a[e];
        out[base + i] = acc * factor;
        macs += E;
      }
    }
  op_counter().score_macs += macs;
  auto mask = std::make_shared<std::vector<std::uint8_t>>(valid.begin(), valid.end());
  return detail::make_result<T>({B, L, D}, std::move(out), {&q, &k}, [mask, B, L, D, E, factor, literal](Node<T>& self) {
    const T* g = self.grad.data();
    const std::size_t li = literal ? 0 : 1;
    const std::size_t ai = literal ? 1 : 0;
    const T* levels = self.inputs[li]->data.data();
    const T* anchor = self.inputs[ai]->data.data();
    T* glev = detail::input_grad(self, li);
    T* ganc = detail::input_grad(self, ai);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < L; ++t) {
        const std::size_t base = ((b * L) + t) * D;
        for (std::size_t i = 0; i < D; ++i) {
          if (!(*mask)[t * D + i]) continue;
          const T gi = g[base + i] * factor;
          const T* lv = levels + (base + i) * E;
          const T* a = anchor + base * E;
          if (glev) {
            T* d = glev + (base + i) * E;
            for (std::size_t e = 0; e < E; ++e) d[e] += gi * a[e];
          }
          if (ganc) {
            T* d = ganc + base * E;
            for (std::size_t e = 0; e < E; ++e) d[e] += gi * lv[e];
          }
        }
      }
  });
}

/// Softmax over the entry axis with -inf at invalid entries.
template <class T>
BasicTensor<T> mask_softmax(const BasicTensor<T>& scores, std::span<const std::uint8_t> valid) {
  return softmax(masked_fill(scores, valid, -std::numeric_limits<T>::infinity()));
}

/// values[b, t] = sum_i weights[b, t, i] * V[b, t, i]
template <class T>
BasicTensor<T> weighted_sum(const BasicTensor<T>& weights, const BasicTensor<T>& v) {
  if (v.rank() != 4 || weights.rank() != 3 || weights.dim(0) != v.dim(0) || weights.dim(1) != v.dim(1) || weights.dim(2) != v.dim(2)) {
    throw ShapeError("weighted_sum", weights.shape(), v.shape());
  }
  const std::size_t B = v.dim(0), L = v.dim(1), D = v.dim(2), E = v.dim(3);
  const std::size_t rows = B * L;
  Buffer<T> out(rows * E, T{0});
  const T* w = weights.data().data();
  const T* vv = v.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    T* o = out.data() + r * E;
    for (std::size_t i = 0; i < D; ++i) {
      const T wi = w[r * D + i];
      if (wi == T{0}) continue;
      const T* vi = vv + (r * D + i) * E;
      for (std::size_t e = 0; e < E; ++e) o[e] += wi * vi[e];
    }
  }
  return detail::make_result<T>({B, L, E}, std::move(out), {&weights, &v}, [rows, D, E](Node<T>& self) {
    const T* g = self.grad.data();
    const T* w = self.inputs[0]->data.data();
    const T* vv = self.inputs[1]->data.data();
    T* gw = detail::input_grad(self, 0);
    T* gv = detail::input_grad(self, 1);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* gr = g + r * E;
      for (std::size_t i = 0; i < D; ++i) {
        const T* vi = vv + (r * D + i) * E;
        if (gw) {
          T acc = 0;
          for (std::size_t e = 0; e < E; ++e) acc += gr[e] * vi[e];
          gw[r * D + i] += acc;
        }
        if (gv) {
          const T wi = w[r * D + i];
          T* d = gv + (r * D + i) * E;
          for (std::size_t e = 0; e < E; ++e) d[e] += wi * gr[e];
        }
      }
    }
  });
}

/// Concatenates bank memories along the entry axis.
template <class T>
MemoryTensor<T> multi_bank_combine(const std::vector<MemoryTensor<T>>& memories) {
  if (memories.empty()) throw ShapeError("multi_bank_combine: no memories");
  if (memories.size() == 1) return memories.front();
  const std::size_t L = memories.front().length();
  std::vector<BasicTensor<T>> parts;
  for (const auto& m : memories) {
    if (m.length() != L || m.batch() != memories.front().batch() || m.embed() != memories.front().embed()) {
      throw ShapeError("multi_bank_combine", memories.front().data.shape(), m.data.shape());
    }
    parts.push_back(m.data);
  }
  MemoryTensor<T> out;
  out.data = concat(parts, 2);
  out.valid.reserve(L * out.data.dim(2));
  for (std::size_t t = 0; t < L; ++t)
    for (const auto& m : memories) {
      const std::size_t D = m.entries();
      out.valid.insert(out.valid.end(), m.valid.begin() + t * D, m.valid.begin() + (t + 1) * D);
    }
  return out;
}

template <class T>
struct AttentionOutput {
  BasicTensor<T> values;   // [B, L, E]
  BasicTensor<T> weights;  // [B, L, D]
};

template <class T>
AttentionOutput<T> attend(const Qkv<T>& qkv, std::span<const std::uint8_t> valid,
                          ScoreOrientation orientation = ScoreOrientation::literal) {
  BasicTensor<T> weights = mask_softmax(single_vector_scores(qkv.q, qkv.k, valid, orientation), valid);
  return {weighted_sum(weights, qkv.v), weights};
}

template <class T>
AttentionOutput<T> single_vector_attention(const MemoryTensor<T>& mem, const QkvProjection<T>& proj,
                                           ScoreOrientation orientation = ScoreOrientation::literal) {
  return attend(qkv_project(mem, proj), std::span<const std::uint8_t>(mem.valid), orientation);
}

/// Applies the qkv map to every pyramid node once. Gathering the result
/// gives the same [B, L, D, 3E] rows as projecting the gathered memory, at
/// O(L) instead of O(L * D) projections.
template <class T>
Pyramid<T> project_pyramid(const Pyramid<T>& p, const QkvProjection<T>& proj) {
  const std::size_t E = proj.embed();
  Pyramid<T> out;
  out.length = p.length;
  for (const auto& level : p.levels) {
    const std::size_t B = level.dim(0), n = level.dim(1), w = level.dim(2) / E;
    BasicTensor<T> y = linear(reshape(level, {B, n * w, E}), proj.weight, proj.bias);
    out.levels.push_back(reshape(y, {B, n, w * 3 * E}));
  }
  return out;
}

/// Single-vector attention straight from projected pyramids (one per bank,
/// levels [B, n, w * 3E] holding q|k|v per entry). Equal to gathering the
/// banks, combining them and running attend(), without materializing the
/// [B, L, D, 3E] memory: each position reads its valid entries in place.
template <class T>
BasicTensor<T> pyramid_attention(const std::vector<Pyramid<T>>& banks, const MemoryLayout& layout,
                                 ScoreOrientation orientation = ScoreOrientation::literal) {
  if (banks.empty()) throw ShapeError("pyramid_attention: no banks");
  const BasicTensor<T>& base = banks.front().levels.front();
  const std::size_t B = base.dim(0), padded = base.dim(1), E3 = base.dim(2), E = E3 / 3;
  const std::size_t L = banks.front().length;
  if (E3 != 3 * E) throw ShapeError("pyramid_attention: level 0 rows must hold q|k|v, got " + shape_str(base.shape()));

  // inputs: bank-major, then level
  std::vector<const BasicTensor<T>*> inputs;
  std::vector<std::size_t> first_input;
  for (const auto& p : banks) {
    if (p.length != L || p.levels.front().shape() != base.shape()) throw ShapeError("pyramid_attention: banks disagree", base.shape(), p.levels.front().shape());
    first_input.push_back(inputs.size());
    for (std::size_t l = 0; l < std::min(p.levels.size(), layout.levels()); ++l) {
      if (l > 0 && p.levels[l].dim(2) != layout.widths[l] * E3) throw ContractError("pyramid_attention: level width does not match layout");
      inputs.push_back(&p.levels[l]);
    }
  }

  // Per-position entry list: (input, element offset for batch 0, batch stride).
  struct Ref {
    std::uint32_t input;
    std::size_t offset;
    std::size_t stride;
  };
  auto refs = std::make_shared<std::vector<Ref>>();
  auto start = std::make_shared<std::vector<std::size_t>>(L + 1, 0);
  for (std::size_t t = 0; t < L; ++t) {
    (*start)[t] = refs->size();
    for (std::size_t k = 0; k < banks.size(); ++k) {
      refs->push_back({static_cast<std::uint32_t>(first_input[k]), t * E3, padded * E3});
      for (std::size_t l = 0; l < layout.levels(); ++l) {
        const std::int64_t node = gather_index(t, l);
        if (node < 0) continue;
        const BasicTensor<T>& level = *inputs[first_input[k] + l];
        const std::size_t w = layout.widths[l];
        for (std::size_t j = 0; j < w; ++j) {
          refs->push_back({static_cast<std::uint32_t>(first_input[k] + l), (static_cast<std::size_t>(node) * w + j) * E3,
                           level.dim(1) * level.dim(2)});
        }
      }
    }
  }
  (*start)[L] = refs->size();

  const T factor = T{1} / std::sqrt(static_cast<T>(E));
  const bool literal = orientation == ScoreOrientation::literal;
  auto weights = std::make_shared<Buffer<T>>(B * refs->size());
  Buffer<T> out(B * L * E, T{0});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < L; ++t) {
      const T* anchor = base.data().data() + b * padded * E3 + t * E3;
      const T* a = literal ? anchor + E : anchor;  // K_0 or Q_0
      const std::size_t lo = (*start)[t], hi = (*start)[t + 1];
      T* wrow = weights->data() + b * refs->size();
      T m = -std::numeric_limits<T>::infinity();
      for (std::size_t r = lo; r < hi; ++r) {
        const Ref& ref = (*refs)[r];
        const T* row = inputs[ref.input]->data().data() + b * ref.stride + ref.offset;
        const T* lv = literal ? row : row + E;
        T acc = 0;
        for (std::size_t e = 0; e < E; ++e) acc += lv[e] * a[e];
        wrow[r] = acc * factor;
        m = std::max(m, wrow[r]);
      }
      T total = 0;
      for (std::size_t r = lo; r < hi; ++r) {
        wrow[r] = std::exp(wrow[r] - m);
        total += wrow[r];
      }
      T* o = out.data() + (b * L + t) * E;
      for (std::size_t r = lo; r < hi; ++r) {
        wrow[r] /= total;
        const Ref& ref = (*refs)[r];
        const T* v = inputs[ref.input]->data().data() + b * ref.stride + ref.offset + 2 * E;
        for (std::size_t e = 0; e < E; ++e) o[e] += wrow[r] * v[e];
      }
    }
  op_counter().score_macs += static_cast<std::uint64_t>(B) * refs->size() * E;

  return detail::make_result<T>({B, L, E}, std::move(out), inputs,
                                [refs, start, weights, B, L, E, E3, padded, factor, literal](Node<T>& self) {
    const std::size_t R = refs->size();
    std::vector<const T*> data(self.inputs.size());
    std::vector<T*> grads(self.inputs.size());
    for (std::size_t i = 0; i < self.inputs.size(); ++i) {
      data[i] = self.inputs[i]->data.data();
      grads[i] = detail::input_grad(self, i);
    }
    std::vector<T> dw;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < L; ++t) {
        const T* g = self.grad.data() + (b * L + t) * E;
        const std::size_t lo = (*start)[t], hi = (*start)[t + 1];
        const T* wrow = weights->data() + b * R;
        dw.assign(hi - lo, T{0});
        T dot = 0;
        for (std::size_t r = lo; r < hi; ++r) {
          const Ref& ref = (*refs)[r];
          const T* v = data[ref.input] + b * ref.stride + ref.offset + 2 * E;
          T acc = 0;
          for (std::size_t e = 0; e < E; ++e) acc += g[e] * v[e];
          dw[r - lo] = acc;
          dot += wrow[r] * acc;
          if (T* gv = grads[ref.input]) {
            gv += b * ref.stride + ref.offset + 2 * E;
            for (std::size_t e = 0; e < E; ++e) gv[e] += wrow[r] * g[e];
          }
        }
        const std::size_t anchor_off = b * padded * E3 + t * E3;
        const T* anchor = data[0] + anchor_off;
        T* ganchor = grads[0] ? grads[0] + anchor_off : nullptr;
        const T* a = literal ? anchor + E : anchor;
        T* ga = ganchor ? (literal ? ganchor + E : ganchor) : nullptr;
        for (std::size_t r = lo; r < hi; ++r) {
          const T ds = wrow[r] * (dw[r - lo] - dot) * factor;
          const Ref& ref = (*refs)[r];
          const std::size_t off = b * ref.stride + ref.offset + (literal ? 0 : E);
          const T* lv = data[ref.input] + off;
          if (T* gl = grads[ref.input]) {
            gl += off;
            for (std::size_t e = 0; e < E; ++e) gl[e] += ds * a[e];
          }
          if (ga) {
            for (std::size_t e = 0; e < E; ++e) ga[e] += ds * lv[e];
          }
        }
      }
  });
}

/// Splits gathered projected memory [B, L, D, 3E] into Q, K, V.
template <class T>
Qkv<T> split_qkv(const MemoryTensor<T>& projected) {
  const std::size_t E = projected.embed() / 3;
  auto parts = split(projected.data, 3, {E, E, E});
  return {parts[0], parts[1], parts[2]};
}

}  // namespace lmn
