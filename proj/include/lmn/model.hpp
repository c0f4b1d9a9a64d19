#pragma once

// Token-level language models: the logarithmic-memory variants (logmem,
// tiny-logmem, expsum) and a causal self-attention baseline.
//
// Block layout (pre-norm):  x += out(attend(memory(ln1(x))));  x += ffn(ln2(x))
// followed by a final norm and the unembedding. LMN variants have no
// positional embedding table; position reaches the model only through the
// order in which the memory tree merges tokens.

#include <cmath>
#include <algorithm>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "lmn/attention.hpp"
#include "lmn/config_text.hpp"
#include "lmn/gradcheck.hpp"
#include "lmn/memory.hpp"
#include "lmn/ops.hpp"
#include "lmn/rng.hpp"
#include "lmn/summarizers.hpp"

namespace lmn {

enum class Variant { logmem, tiny_logmem, expsum, baseline };
enum class SummarizerKind { linear, dsconv };
enum class Mode { parallel, sequential };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::logmem: return "logmem";
    case Variant::tiny_logmem: return "tiny-logmem";
    case Variant::expsum: return "expsum";
    case Variant::baseline: return "baseline-attn";
  }
  return "?";
}

inline Variant parse_variant(std::string_view s) {
  if (s == "logmem") return Variant::logmem;
  if (s == "tiny-logmem") return Variant::tiny_logmem;
  if (s == "expsum") return Variant::expsum;
  if (s == "baseline-attn" || s == "baseline") return Variant::baseline;
  throw ConfigError("unknown model variant '" + std::string(s) + "' (logmem, tiny-logmem, expsum, baseline-attn)");
}

inline std::string to_string(Mode m) { return m == Mode::parallel ? "parallel" : "sequential"; }

inline Mode parse_mode(std::string_view s) {
  if (s == "parallel") return Mode::parallel;
  if (s == "sequential") return Mode::sequential;
  throw ConfigError("unknown mode '" + std::string(s) + "' (parallel, sequential)");
}

inline std::string to_string(ScoreOrientation o) { return o == ScoreOrientation::literal ? "literal" : "swapped"; }

inline ScoreOrientation parse_orientation(std::string_view s) {
  if (s == "literal") return ScoreOrientation::literal;
  if (s == "swapped") return ScoreOrientation::swapped;
  throw ConfigError("unknown score orientation '" + std::string(s) + "' (literal, swapped)");
}

inline std::string to_string(SummarizerKind k) { return k == SummarizerKind::linear ? "linear" : "dsconv"; }

inline SummarizerKind parse_summarizer(std::string_view s) {
  if (s == "linear") return SummarizerKind::linear;
  if (s == "dsconv") return SummarizerKind::dsconv;
  throw ConfigError("unknown summarizer '" + std::string(s) + "' (linear, dsconv)");
}

struct ModelConfig {
  Variant variant = Variant::logmem;
  std::size_t vocab_size = 65;
  std::size_t embed = 32;
  std::size_t max_seq_len = 512;
  std::size_t banks = 1;
  std::size_t expansion = 1;
  std::size_t ffn_mult = 4;
  std::size_t n_blocks = 1;
  std::size_t n_heads = 1;  // baseline only
  SummarizerKind summarizer = SummarizerKind::linear;
  bool summarizer_bias = true;
  bool tie_embeddings = false;
  ScoreOrientation orientation = ScoreOrientation::literal;
  std::uint64_t seed = 1337;

  bool is_lmn() const { return variant != Variant::baseline; }
  std::size_t levels() const { return slot_levels(max_seq_len); }

  /// Applies the variant-forced fields: tiny-logmem uses a single shared
  /// E->E feed-forward layer, expsum uses one bank.
  ModelConfig normalized() const {
    ModelConfig c = *this;
    if (c.variant == Variant::tiny_logmem) c.ffn_mult = 1;
    if (c.variant == Variant::expsum) c.banks = 1;
    return c;
  }

  void validate() const {
    if (vocab_size == 0 || embed == 0 || max_seq_len == 0 || banks == 0 || n_blocks == 0 || n_heads == 0) {
      throw ConfigError("model: sizes must be positive");
    }
    if (ffn_mult != 1 && ffn_mult != 4) throw ConfigError("model.ffn_mult must be 1 or 4");
    if (variant == Variant::expsum && expansion == 0) throw ConfigError("model.expansion must be positive for expsum");
    if (variant == Variant::baseline && embed % n_heads != 0) throw ConfigError("model.n_heads must divide model.embed");
    if (variant == Variant::tiny_logmem && ffn_mult != 1) throw ConfigError("tiny-logmem requires ffn_mult = 1");
    if (variant == Variant::expsum && banks != 1) throw ConfigError("expsum requires banks = 1");
  }

  /// Architecture matching the embedding-32 comparison models: four blocks,
  /// bias-free summarizers, two banks, 512-token context, vocabulary 65.
  static ModelConfig table1(Variant v) {
    ModelConfig c;
    c.variant = v;
    c.vocab_size = 65;
    c.embed = 32;
    c.max_seq_len = 512;
    c.n_blocks = 4;
    c.banks = v == Variant::expsum ? 1 : 2;
    c.expansion = 1;
    c.summarizer_bias = false;
    c.n_heads = v == Variant::baseline ? 4 : 1;
    c.ffn_mult = v == Variant::tiny_logmem ? 1 : 4;
    return c;
  }

  std::string to_text() const {
    std::ostringstream os;
    os << "model.variant=" << to_string(variant) << '\n'
       << "model.vocab_size=" << vocab_size << '\n'
       << "model.embed=" << embed << '\n'
       << "model.max_seq_len=" << max_seq_len << '\n'
       << "model.banks=" << banks << '\n'
       << "model.expansion=" << expansion << '\n'
       << "model.ffn_mult=" << ffn_mult << '\n'
       << "model.n_blocks=" << n_blocks << '\n'
       << "model.n_heads=" << n_heads << '\n'
       << "model.summarizer=" << to_string(summarizer) << '\n'
       << "model.summarizer_bias=" << (summarizer_bias ? "true" : "false") << '\n'
       << "model.tie_embeddings=" << (tie_embeddings ? "true" : "false") << '\n'
       << "model.score_orientation=" << to_string(orientation) << '\n'
       << "model.seed=" << seed << '\n';
    return os.str();
  }

  /// Applies one model.* key; returns false when the key is not a model key.
  bool set(const std::string& key, const std::string& value) {
    if (key == "model.variant") variant = parse_variant(value);
    else if (key == "model.vocab_size") vocab_size = parse_positive(key, value);
    else if (key == "model.embed") embed = parse_positive(key, value);
    else if (key == "model.max_seq_len") max_seq_len = parse_positive(key, value);
    else if (key == "model.banks") banks = parse_positive(key, value);
    else if (key == "model.expansion") expansion = parse_positive(key, value);
    else if (key == "model.ffn_mult") ffn_mult = parse_positive(key, value);
    else if (key == "model.n_blocks") n_blocks = parse_positive(key, value);
    else if (key == "model.n_heads") n_heads = parse_positive(key, value);
    else if (key == "model.summarizer") summarizer = parse_summarizer(value);
    else if (key == "model.summarizer_bias") summarizer_bias = parse_bool(key, value);
    else if (key == "model.tie_embeddings") tie_embeddings = parse_bool(key, value);
    else if (key == "model.score_orientation") orientation = parse_orientation(value);
    else if (key == "model.seed") seed = parse_uint(key, value);
    else return false;
    return true;
  }

  static ModelConfig from_text(std::string_view text) {
    ModelConfig c;
    for (const auto& kv : parse_key_values(text)) {
      if (!c.set(kv.key, kv.value)) throw ConfigError("unknown model key '" + kv.key + "'");
    }
    return c;
  }

  bool operator==(const ModelConfig&) const = default;
};

template <class T>
using AnySummarizer = std::variant<LinearSummarizer<T>, DsConvSummarizer<T>, ExpanderSummarizer<T>>;

template <class T>
struct Block {
  BasicTensor<T> ln1_gain, ln1_bias, ln2_gain, ln2_bias;
  std::vector<AnySummarizer<T>> banks;  // LMN only
  QkvProjection<T> qkv;                 // LMN only
  BasicTensor<T> attn_qkv;              // baseline only, [E, 3E], bias-free
  BasicTensor<T> out_weight, out_bias;
  BasicTensor<T> ffn_in_weight, ffn_in_bias;
  BasicTensor<T> ffn_out_weight, ffn_out_bias;  // undefined when the layer is shared
};

/// Recurrent state for token-by-token decoding.
template <class T>
struct DecodeState {
  std::size_t batch = 0;
  std::uint64_t position = 0;
  std::vector<std::vector<SlotState<T>>> slots;  // [block][bank]
  std::vector<BasicTensor<T>> pending;           // per block: normalized input of the previous position
  std::vector<Buffer<T>> keys, values;           // baseline per block: [t][B][E]
};

template <class T>
class Model {
 public:
  static Model init(const ModelConfig& config_in) {
    Model m;
    m.config_ = config_in.normalized();
    m.config_.validate();
    const ModelConfig& c = m.config_;
    Rng rng(c.seed);
    const std::size_t E = c.embed;
    m.token_embedding_ = normal_param({c.vocab_size, E}, rng);
    if (!c.is_lmn()) m.position_embedding_ = normal_param({c.max_seq_len, E}, rng);
    for (std::size_t b = 0; b < c.n_blocks; ++b) {
      Block<T> blk;
      blk.ln1_gain = BasicTensor<T>::full({E}, T{1}, true);
      blk.ln1_bias = BasicTensor<T>::zeros({E}, true);
      if (c.is_lmn()) {
        for (std::size_t k = 0; k < c.banks; ++k) {
          if (c.variant == Variant::expsum) {
            blk.banks.emplace_back(ExpanderSummarizer<T>::init(E, c.expansion, c.summarizer_bias, rng));
          } else if (c.summarizer == SummarizerKind::dsconv) {
            blk.banks.emplace_back(DsConvSummarizer<T>::init(E, c.summarizer_bias, rng));
          } else {
            blk.banks.emplace_back(LinearSummarizer<T>::init(E, c.summarizer_bias, rng));
          }
        }
        blk.qkv = QkvProjection<T>::init(E, rng);
      } else {
        blk.attn_qkv = uniform_param<T>({E, 3 * E}, static_cast<double>(E), rng);
      }
      blk.out_weight = uniform_param<T>({E, E}, static_cast<double>(E), rng);
      blk.out_bias = uniform_param<T>({E}, static_cast<double>(E), rng);
      blk.ln2_gain = BasicTensor<T>::full({E}, T{1}, true);
      blk.ln2_bias = BasicTensor<T>::zeros({E}, true);
      const std::size_t hidden = c.ffn_mult * E;
      blk.ffn_in_weight = uniform_param<T>({E, hidden}, static_cast<double>(E), rng);
      blk.ffn_in_bias = uniform_param<T>({hidden}, static_cast<double>(E), rng);
      if (c.variant != Variant::tiny_logmem) {
        blk.ffn_out_weight = uniform_param<T>({hidden, E}, static_cast<double>(hidden), rng);
        blk.ffn_out_bias = uniform_param<T>({E}, static_cast<double>(hidden), rng);
      }
      m.blocks_.push_back(std::move(blk));
    }
    m.final_gain_ = BasicTensor<T>::full({E}, T{1}, true);
    m.final_bias_ = BasicTensor<T>::zeros({E}, true);
    if (!c.tie_embeddings) m.head_weight_ = uniform_param<T>({E, c.vocab_size}, static_cast<double>(E), rng);
    m.head_bias_ = uniform_param<T>({c.vocab_size}, static_cast<double>(E), rng);
    if (c.is_lmn()) {
      m.layout_ = std::visit([&](const auto& s) { return MemoryLayout::of<T>(s, c.levels()); }, m.blocks_.front().banks.front());
    }
    return m;
  }

  const ModelConfig& config() const { return config_; }
  const MemoryLayout& layout() const { return layout_; }
  const std::vector<Block<T>>& blocks() const { return blocks_; }

  /// Memory entries per position after combining banks.
  std::size_t memory_entries() const { return layout_.entries * config_.banks; }

  /// Named learnable tensors in a stable order (shared handles).
  NamedParams<T> parameters() const {
    NamedParams<T> out;
    out.emplace_back("token_embedding", token_embedding_);
    if (position_embedding_.defined()) out.emplace_back("position_embedding", position_embedding_);
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      const Block<T>& blk = blocks_[b];
      const std::string p = "blocks." + std::to_string(b);
      out.emplace_back(p + ".ln1.gain", blk.ln1_gain);
      out.emplace_back(p + ".ln1.bias", blk.ln1_bias);
      for (std::size_t k = 0; k < blk.banks.size(); ++k) {
        std::visit([&](const auto& s) { s.collect(out, p + ".bank" + std::to_string(k)); }, blk.banks[k]);
      }
      if (config_.is_lmn()) {
        blk.qkv.collect(out, p + ".qkv");
      } else {
        out.emplace_back(p + ".attn_qkv.weight", blk.attn_qkv);
      }
      out.emplace_back(p + ".out.weight", blk.out_weight);
      out.emplace_back(p + ".out.bias", blk.out_bias);
      out.emplace_back(p + ".ln2.gain", blk.ln2_gain);
      out.emplace_back(p + ".ln2.bias", blk.ln2_bias);
      out.emplace_back(p + ".ffn_in.weight", blk.ffn_in_weight);
      out.emplace_back(p + ".ffn_in.bias", blk.ffn_in_bias);
      if (blk.ffn_out_weight.defined()) {
        out.emplace_back(p + ".ffn_out.weight", blk.ffn_out_weight);
        out.emplace_back(p + ".ffn_out.bias", blk.ffn_out_bias);
      }
    }
    out.emplace_back("final.gain", final_gain_);
    out.emplace_back("final.bias", final_bias_);
    if (head_weight_.defined()) out.emplace_back("head.weight", head_weight_);
    out.emplace_back("head.bias", head_bias_);
    return out;
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : parameters()) n += t.numel();
    return n;
  }

  /// logits [B, L, V] for tokens laid out [B, L].
  BasicTensor<T> forward(std::span<const std::int32_t> tokens, std::size_t batch, std::size_t length, Mode mode) const {
    check_tokens(tokens, batch, length);
    if (!config_.is_lmn() && mode == Mode::sequential) return forward_by_steps(tokens, batch, length);
    BasicTensor<T> x = embedding(token_embedding_, tokens, {batch, length});
    if (position_embedding_.defined()) {
      std::vector<std::int32_t> pos(batch * length);
      for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<std::int32_t>(i % length);
      x = add(x, embedding(position_embedding_, std::span<const std::int32_t>(pos), {batch, length}));
    }
    for (std::size_t b = 0; b < blocks_.size(); ++b) x = block_forward(b, x, mode);
    return head(x);
  }

  /// One residual block over x [B, L, E].
  BasicTensor<T> block_forward(std::size_t index, const BasicTensor<T>& x, Mode mode) const {
    const Block<T>& blk = blocks_.at(index);
    BasicTensor<T> h = layer_norm(x, blk.ln1_gain, blk.ln1_bias);
    BasicTensor<T> attended;
    if (config_.is_lmn()) {
      if (mode == Mode::parallel) {
        if (h.dim(1) > capacity()) throw CapacityError("sequence of " + std::to_string(h.dim(1)) + " tokens exceeds memory capacity " + std::to_string(capacity()));
        std::vector<Pyramid<T>> projected;
        for (const auto& bank : blk.banks) {
          std::visit([&](const auto& s) { projected.push_back(project_pyramid(build_pyramid(h, s), blk.qkv)); }, bank);
        }
        attended = pyramid_attention(projected, layout_, config_.orientation);
      } else {
        std::vector<MemoryTensor<T>> mems;
        for (const auto& bank : blk.banks) {
          std::visit([&](const auto& s) { mems.push_back(sequential_memory(h, s, config_.levels())); }, bank);
        }
        attended = single_vector_attention(multi_bank_combine(mems), blk.qkv, config_.orientation).values;
      }
    } else {
      attended = causal_self_attention(blk, h);
    }
    BasicTensor<T> y = add(x, linear(attended, blk.out_weight, blk.out_bias));
    return add(y, ffn(blk, layer_norm(y, blk.ln2_gain, blk.ln2_bias)));
  }

  DecodeState<T> begin_decode(std::size_t batch) const {
    DecodeState<T> s;
    s.batch = batch;
    for (const auto& blk : blocks_) {
      s.slots.emplace_back(blk.banks.size(), SlotState<T>(config_.levels()));
      s.pending.emplace_back();
      s.keys.emplace_back();
      s.values.emplace_back();
    }
    return s;
  }

  /// Largest number of positions a decode state can hold.
  std::uint64_t capacity() const {
    return config_.is_lmn() ? (std::uint64_t{1} << config_.levels()) : config_.max_seq_len;
  }

  /// Consumes one token per batch row at the next position and returns its
  /// logits [B, V]. Inference only: runs without recording gradients.
  BasicTensor<T> step(DecodeState<T>& state, std::span<const std::int32_t> tokens) const {
    NoGradGuard no_grad;
    const std::size_t B = state.batch;
    const std::size_t E = config_.embed;
    if (tokens.size() != B) throw ShapeError("step: expected " + std::to_string(B) + " tokens, got " + std::to_string(tokens.size()));
    if (state.position >= capacity()) {
      throw CapacityError("decode position " + std::to_string(state.position) + " exceeds model capacity " + std::to_string(capacity()));
    }
    check_tokens(tokens, B, 1);
    BasicTensor<T> x = embedding(token_embedding_, tokens, {B});
    if (position_embedding_.defined()) {
      std::vector<std::int32_t> pos(B, static_cast<std::int32_t>(state.position));
      x = add(x, embedding(position_embedding_, std::span<const std::int32_t>(pos), {B}));
    }
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      const Block<T>& blk = blocks_[b];
      BasicTensor<T> h = layer_norm(x, blk.ln1_gain, blk.ln1_bias);
      BasicTensor<T> attended;
      if (config_.is_lmn()) {
        std::vector<MemoryTensor<T>> rows;
        for (std::size_t k = 0; k < blk.banks.size(); ++k) {
          SlotState<T>& slots = state.slots[b][k];
          std::visit([&](const auto& s) {
            if (state.position > 0) push_token(slots, state.pending[b], s);
          }, blk.banks[k]);
          rows.push_back(snapshot(slots, h, layout_));
        }
        state.pending[b] = h;
        attended = reshape(single_vector_attention(multi_bank_combine(rows), blk.qkv, config_.orientation).values, {B, E});
      } else {
        attended = cached_attention(blk, h, state.keys[b], state.values[b], state.position, B);
      }
      x = add(x, linear(attended, blk.out_weight, blk.out_bias));
      x = add(x, ffn(blk, layer_norm(x, blk.ln2_gain, blk.ln2_bias)));
    }
    ++state.position;
    return head(x);
  }

 private:
  static BasicTensor<T> normal_param(Shape shape, Rng& rng) {
    std::vector<T> values(numel(shape));
    for (auto& v : values) v = static_cast<T>(rng.normal());
    return BasicTensor<T>::from(std::move(shape), std::span<const T>(values), true);
  }

  void check_tokens(std::span<const std::int32_t> tokens, std::size_t batch, std::size_t length) const {
    if (tokens.size() != batch * length) {
      throw ShapeError("forward: " + std::to_string(tokens.size()) + " tokens for batch " + std::to_string(batch) + " x length " + std::to_string(length));
    }
    if (length > config_.max_seq_len) {
      throw CapacityError("sequence of " + std::to_string(length) + " tokens exceeds max_seq_len " + std::to_string(config_.max_seq_len));
    }
    for (std::int32_t t : tokens) {
      if (t < 0 || static_cast<std::size_t>(t) >= config_.vocab_size) {
        throw ShapeError("token id " + std::to_string(t) + " outside vocabulary of " + std::to_string(config_.vocab_size));
      }
    }
  }

  BasicTensor<T> ffn(const Block<T>& blk, const BasicTensor<T>& h) const {
    BasicTensor<T> a = relu(linear(h, blk.ffn_in_weight, blk.ffn_in_bias));
    if (!blk.ffn_out_weight.defined()) return linear(a, blk.ffn_in_weight, blk.ffn_in_bias);
    return linear(a, blk.ffn_out_weight, blk.ffn_out_bias);
  }

  BasicTensor<T> head(const BasicTensor<T>& x) const {
    BasicTensor<T> h = layer_norm(x, final_gain_, final_bias_);
    if (head_weight_.defined()) return linear(h, head_weight_, head_bias_);
    return linear(h, transpose(token_embedding_, 0, 1), head_bias_);
  }

  BasicTensor<T> causal_self_attention(const Block<T>& blk, const BasicTensor<T>& h) const {
    const std::size_t B = h.dim(0), L = h.dim(1), E = h.dim(2);
    const std::size_t H = config_.n_heads, hd = E / H;
    auto parts = split(linear(h, blk.attn_qkv, BasicTensor<T>()), 2, {E, E, E});
    const auto heads = [&](const BasicTensor<T>& t) { return reshape(transpose(reshape(t, {B, L, H, hd}), 1, 2), {B * H, L, hd}); };
    BasicTensor<T> v = heads(parts[2]);
    BasicTensor<T> w = softmax(dot_scores(heads(parts[0]), heads(parts[1]), T{1} / std::sqrt(static_cast<T>(hd)), std::int64_t{0}));
    BasicTensor<T> out = matmul(w, v);
    return reshape(transpose(reshape(out, {B, H, L, hd}), 1, 2), {B, L, E});
  }

  // One query position against the growing key/value cache.
  BasicTensor<T> cached_attention(const Block<T>& blk, const BasicTensor<T>& h, Buffer<T>& keys, Buffer<T>& values,
                                  std::uint64_t pos, std::size_t B) const {
    const std::size_t E = config_.embed;
    const std::size_t H = config_.n_heads, hd = E / H;
    BasicTensor<T> qkv = linear(h, blk.attn_qkv, BasicTensor<T>());
    const T* p = qkv.data().data();
    for (std::size_t b = 0; b < B; ++b) {
      keys.insert(keys.end(), p + b * 3 * E + E, p + b * 3 * E + 2 * E);
      values.insert(values.end(), p + b * 3 * E + 2 * E, p + b * 3 * E + 3 * E);
    }
    const std::size_t steps = pos + 1;
    const T factor = T{1} / std::sqrt(static_cast<T>(hd));
    Buffer<T> out(B * E, T{0});
    Buffer<T> scores(steps);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t hh = 0; hh < H; ++hh) {
        const T* q = p + b * 3 * E + hh * hd;
        T m = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < steps; ++j) {
          const T* kj = keys.data() + (j * B + b) * E + hh * hd;
          T acc = 0;
          for (std::size_t e = 0; e < hd; ++e) acc += q[e] * kj[e];
          scores[j] = acc * factor;
          m = std::max(m, scores[j]);
        }
        T total = 0;
        for (std::size_t j = 0; j < steps; ++j) {
          scores[j] = std::exp(scores[j] - m);
          total += scores[j];
        }
        T* o = out.data() + b * E + hh * hd;
        for (std::size_t j = 0; j < steps; ++j) {
          const T wj = scores[j] / total;
          const T* vj = values.data() + (j * B + b) * E + hh * hd;
          for (std::size_t e = 0; e < hd; ++e) o[e] += wj * vj[e];
        }
      }
    op_counter().score_macs += static_cast<std::uint64_t>(B) * steps * E;
    return BasicTensor<T>::from({B, E}, std::move(out));
  }

  BasicTensor<T> forward_by_steps(std::span<const std::int32_t> tokens, std::size_t batch, std::size_t length) const {
    DecodeState<T> state = begin_decode(batch);
    std::vector<BasicTensor<T>> rows;
    std::vector<std::int32_t> column(batch);
    for (std::size_t t = 0; t < length; ++t) {
      for (std::size_t b = 0; b < batch; ++b) column[b] = tokens[b * length + t];
      BasicTensor<T> logits = step(state, column);
      rows.push_back(reshape(logits, {batch, 1, config_.vocab_size}));
    }
    return concat(rows, 1);
  }

  ModelConfig config_;
  MemoryLayout layout_;
  BasicTensor<T> token_embedding_;
  BasicTensor<T> position_embedding_;
  std::vector<Block<T>> blocks_;
  BasicTensor<T> final_gain_, final_bias_;
  BasicTensor<T> head_weight_, head_bias_;
};

struct SamplingOptions {
  double temperature = 1.0;
  bool argmax = false;  // greedy decoding; temperature ignored
};

/// Index drawn from softmax(logits / temperature), or the argmax.
template <class T>
std::int32_t sample_token(std::span<const T> logits, const SamplingOptions& opt, Rng& rng) {
  if (opt.argmax) return static_cast<std::int32_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  if (!(opt.temperature > 0)) throw std::invalid_argument("temperature must be positive");
  const double m = static_cast<double>(*std::max_element(logits.begin(), logits.end()));
  std::vector<double> p(logits.size());
  double total = 0;
  for (std::size_t i = 0; i < p.size(); ++i) total += p[i] = std::exp((static_cast<double>(logits[i]) - m) / opt.temperature);
  double u = rng.uniform(0.0, total);
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (u < p[i]) return static_cast<std::int32_t>(i);
    u -= p[i];
  }
  return static_cast<std::int32_t>(p.size() - 1);
}

/// Feeds the prompt through the decode state, then samples n_new tokens one
/// position at a time. The decode state is the only recurrent state. Each new
/// token is passed to on_token as soon as it is drawn.
template <class T>
std::vector<std::int32_t> generate(const Model<T>& model, std::span<const std::int32_t> prompt, std::size_t n_new,
                                   const SamplingOptions& opt, Rng& rng,
                                   const std::function<void(std::int32_t)>& on_token = {}) {
  if (prompt.empty()) throw std::invalid_argument("generate: prompt must contain at least one token");
  if (prompt.size() + n_new - (n_new > 0 ? 1 : 0) > model.capacity()) {
    throw CapacityError("generate: prompt of " + std::to_string(prompt.size()) + " plus " + std::to_string(n_new) +
                        " new tokens exceeds model capacity " + std::to_string(model.capacity()));
  }
  DecodeState<T> state = model.begin_decode(1);
  BasicTensor<T> logits;
  for (std::int32_t tok : prompt) logits = model.step(state, std::span<const std::int32_t>(&tok, 1));
  std::vector<std::int32_t> out;
  out.reserve(n_new);
  for (std::size_t i = 0; i < n_new; ++i) {
    const std::int32_t next = sample_token(logits.data(), opt, rng);
    out.push_back(next);
    if (on_token) on_token(next);
    if (i + 1 < n_new) logits = model.step(state, std::span<const std::int32_t>(&next, 1));
  }
  return out;
}

/// Exact number of learnable scalars for a configuration.
inline std::size_t param_count(const ModelConfig& config) { return Model<float>::init(config).param_count(); }

/// Mean next-token cross-entropy of logits [B, L, V] against targets [B, L].
template <class T>
BasicTensor<T> lm_loss(const BasicTensor<T>& logits, std::span<const std::int32_t> targets) {
  return cross_entropy(logits, targets);
}

}  // namespace lmn
