#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace chprune {

// Channel mask: bit c is 1 when input channel c is kept.
struct Chromosome {
  std::vector<std::uint8_t> bits;

  Chromosome() = default;
  explicit Chromosome(std::size_t length, std::uint8_t fill = 1) : bits(length, fill) {}
  explicit Chromosome(std::vector<std::uint8_t> b) : bits(std::move(b)) {}

  std::size_t size() const { return bits.size(); }
  std::uint8_t operator[](std::size_t i) const { return bits[i]; }
  std::uint8_t& operator[](std::size_t i) { return bits[i]; }
  std::size_t popcount() const;

  std::vector<std::size_t> kept() const;
  std::vector<std::size_t> pruned() const;

  // MSB-first hex: bit 0 is the high bit of the first digit, the last digit
  // is zero padded on the right.
  std::string hex() const;
  static Chromosome from_hex(const std::string& hex, std::size_t length);
  // "10110" style.
  std::string str() const;
  static Chromosome from_string(const std::string& s);

  bool operator==(const Chromosome&) const = default;
};

}  // namespace chprune
