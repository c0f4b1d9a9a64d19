#pragma once

// Character-level corpus handling. Characters are Unicode code points
// decoded from UTF-8; ids follow code-point order.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <span>
#include <string_view>
#include <vector>

#include "lmn/rng.hpp"

namespace lmn {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace utf8 {

inline std::vector<char32_t> decode(std::string_view s) {
  std::vector<char32_t> out;
  out.reserve(s.size());
  for (std::size_t i = 0; i < s.size();) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t len = c < 0x80 ? 1 : (c >> 5) == 0x6 ? 2 : (c >> 4) == 0xE ? 3 : (c >> 3) == 0x1E ? 4 : 0;
    if (len == 0 || i + len > s.size()) throw DataError("invalid UTF-8 at byte " + std::to_string(i));
    char32_t cp = len == 1 ? c : len == 2 ? (c & 0x1F) : len == 3 ? (c & 0x0F) : (c & 0x07);
    for (std::size_t k = 1; k < len; ++k) {
      const auto cc = static_cast<unsigned char>(s[i + k]);
      if ((cc >> 6) != 0x2) throw DataError("invalid UTF-8 at byte " + std::to_string(i + k));
      cp = (cp << 6) | (cc & 0x3F);
    }
    out.push_back(cp);
    i += len;
  }
  return out;
}

inline void append(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out += static_cast<char>(cp);
  } else if (cp < 0x800) {
    out += static_cast<char>(0xC0 | (cp >> 6));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else if (cp < 0x10000) {
    out += static_cast<char>(0xE0 | (cp >> 12));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else {
    out += static_cast<char>(0xF0 | (cp >> 18));
    out += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  }
}

inline std::string encode(char32_t cp) {
  std::string s;
  append(s, cp);
  return s;
}

}  // namespace utf8

class Vocab {
 public:
  static Vocab build(std::string_view text) {
    if (text.empty()) throw DataError("cannot build a vocabulary from an empty corpus");
    auto cps = utf8::decode(text);
    std::sort(cps.begin(), cps.end());
    cps.erase(std::unique(cps.begin(), cps.end()), cps.end());
    return Vocab(std::move(cps));
  }

  /// Sidecar format: every character once, in id order, nothing else.
  static Vocab from_sidecar(std::string_view text) {
    auto cps = utf8::decode(text);
    if (cps.empty()) throw DataError("vocabulary sidecar is empty");
    if (!std::is_sorted(cps.begin(), cps.end()) || std::adjacent_find(cps.begin(), cps.end()) != cps.end()) {
      throw DataError("vocabulary sidecar must list unique characters in code-point order");
    }
    return Vocab(std::move(cps));
  }

  std::string sidecar() const {
    std::string out;
    for (char32_t cp : chars_) utf8::append(out, cp);
    return out;
  }

  std::size_t size() const { return chars_.size(); }
  const std::vector<char32_t>& chars() const { return chars_; }

  bool contains(char32_t cp) const { return ids_.count(cp) != 0; }

  std::int32_t id(char32_t cp) const {
    const auto it = ids_.find(cp);
    if (it == ids_.end()) throw DataError("character '" + utf8::encode(cp) + "' (U+" + hex(cp) + ") is not in the vocabulary");
    return it->second;
  }

  std::vector<std::int32_t> encode(std::string_view text) const {
    std::vector<std::int32_t> out;
    for (char32_t cp : utf8::decode(text)) out.push_back(id(cp));
    return out;
  }

  std::string decode(std::span<const std::int32_t> ids) const {
    std::string out;
    for (std::int32_t i : ids) utf8::append(out, chars_.at(static_cast<std::size_t>(i)));
    return out;
  }

  bool operator==(const Vocab& o) const { return chars_ == o.chars_; }

 private:
  explicit Vocab(std::vector<char32_t> chars) : chars_(std::move(chars)) {
    for (std::size_t i = 0; i < chars_.size(); ++i) ids_[chars_[i]] = static_cast<std::int32_t>(i);
  }

  static std::string hex(char32_t cp) {
    std::ostringstream os;
    os << std::hex << std::uppercase << static_cast<std::uint32_t>(cp);
    return os.str();
  }

  std::vector<char32_t> chars_;
  std::map<char32_t, std::int32_t> ids_;
};

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read '" + path.string() + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

enum class Split { train, val };

struct Dataset {
  std::vector<std::int32_t> ids;
  std::size_t split_point = 0;  // ids[0, split_point) train, the rest validation

  static Dataset from_ids(std::vector<std::int32_t> ids, double train_fraction = 0.9) {
    if (!(train_fraction > 0 && train_fraction < 1)) throw DataError("train fraction must lie in (0, 1)");
    Dataset d;
    d.split_point = static_cast<std::size_t>(static_cast<double>(ids.size()) * train_fraction);
    d.ids = std::move(ids);
    return d;
  }

  std::span<const std::int32_t> part(Split s) const {
    const std::span<const std::int32_t> all(ids);
    return s == Split::train ? all.first(split_point) : all.subspan(split_point);
  }
};

struct Batch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::int32_t> inputs;   // [batch, length]
  std::vector<std::int32_t> targets;  // inputs shifted by one
  std::vector<std::size_t> offsets;
};

/// Uniform offsets in [0, n - length - 1].
inline Batch sample_batch(const Dataset& ds, Split split, std::size_t batch, std::size_t length, Rng& rng) {
  const auto src = ds.part(split);
  if (src.size() < length + 1) {
    throw DataError(std::string(split == Split::train ? "training" : "validation") + " split has " + std::to_string(src.size()) +
                    " tokens, need at least block_size + 1 = " + std::to_string(length + 1));
  }
  Batch b;
  b.batch = batch;
  b.length = length;
  b.inputs.resize(batch * length);
  b.targets.resize(batch * length);
  const auto max_offset = static_cast<std::int64_t>(src.size() - length - 1);
  for (std::size_t i = 0; i < batch; ++i) {
    const auto off = static_cast<std::size_t>(rng.uniform_int(0, max_offset));
    b.offsets.push_back(off);
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(off), length, b.inputs.begin() + static_cast<std::ptrdiff_t>(i * length));
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(off + 1), length, b.targets.begin() + static_cast<std::ptrdiff_t>(i * length));
  }
  return b;
}

}  // namespace lmn
