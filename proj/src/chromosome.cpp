#include "chprune/chromosome.hpp"

#include <algorithm>

#include "chprune/errors.hpp"

namespace chprune {

std::size_t Chromosome::popcount() const {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

std::vector<std::size_t> Chromosome::kept() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < bits.size(); ++i) {
    if (bits[i]) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> Chromosome::pruned() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < bits.size(); ++i) {
    if (!bits[i]) out.push_back(i);
  }
  return out;
}

std::string Chromosome::hex() const {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out;
  for (std::size_t i = 0; i < bits.size(); i += 4) {
    unsigned v = 0;
    for (std::size_t j = 0; j < 4; ++j) {
      v <<= 1;
      if (i + j < bits.size() && bits[i + j]) v |= 1;
    }
    out.push_back(kDigits[v]);
  }
  return out;
}

Chromosome Chromosome::from_hex(const std::string& hex, std::size_t length) {
  if (hex.size() != (length + 3) / 4) throw FormatError("hex mask has wrong length");
  Chromosome c(length, 0);
  for (std::size_t i = 0; i < hex.size(); ++i) {
    const char ch = hex[i];
    unsigned v = 0;
    if (ch >= '0' && ch <= '9') {
      v = static_cast<unsigned>(ch - '0');
    } else if (ch >= 'a' && ch <= 'f') {
      v = static_cast<unsigned>(ch - 'a' + 10);
    } else {
      throw FormatError(std::string("bad hex digit '") + ch + "'");
    }
    for (std::size_t j = 0; j < 4; ++j) {
      const bool bit = (v >> (3 - j)) & 1U;
      if (4 * i + j < length) {
        c.bits[4 * i + j] = bit ? 1 : 0;
      } else if (bit) {
        throw FormatError("hex mask has bits set past its length");
      }
    }
  }
  return c;
}

std::string Chromosome::str() const {
  std::string s;
  s.reserve(bits.size());
  for (auto b : bits) s.push_back(b ? '1' : '0');
  return s;
}

Chromosome Chromosome::from_string(const std::string& s) {
  Chromosome c(s.size(), 0);
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '0' && s[i] != '1') throw FormatError("mask string must contain only 0 and 1");
    c.bits[i] = s[i] == '1' ? 1 : 0;
  }
  return c;
}

}  // namespace chprune
