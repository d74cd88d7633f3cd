#pragma once

#include <array>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "dctir/error.hpp"

namespace dctir {

enum class HuffmanClass : std::uint8_t { DC = 0, AC = 1 };

/// A DHT table: 16 code-length counts plus symbols in code order.
struct HuffmanTable {
  HuffmanClass cls = HuffmanClass::DC;
  std::uint8_t id = 0;
  std::array<std::uint8_t, 16> counts{};
  std::vector<std::uint8_t> symbols;

  friend bool operator==(const HuffmanTable&, const HuffmanTable&) = default;

  std::size_t total() const { return std::accumulate(counts.begin(), counts.end(), std::size_t{0}); }

  template <std::size_t N>
  static HuffmanTable make(HuffmanClass cls, std::uint8_t id, const std::array<std::uint8_t, 16>& counts,
                           const std::array<std::uint8_t, N>& symbols) {
    return HuffmanTable{cls, id, counts, std::vector<std::uint8_t>(symbols.begin(), symbols.end())};
  }

  void validate() const {
    require(total() <= 256, ErrorCode::CorruptStream, "huffman table has more than 256 symbols");
    require(total() == symbols.size(), ErrorCode::CorruptStream, "huffman symbol count mismatch");
    // Canonical assignment must not run out of codes at any length.
    std::uint32_t code = 0;
    for (int len = 1; len <= 16; ++len) {
      code += counts[len - 1];
      require(code <= (1u << len), ErrorCode::CorruptStream, "huffman code lengths oversubscribed");
      code <<= 1;
    }
  }
};

/// Canonical code assignment (T.81 Annex C).
struct HuffmanCode {
  std::uint16_t code = 0;
  std::uint8_t length = 0;  // 0 = symbol not present
};

inline std::array<HuffmanCode, 256> build_encoder(const HuffmanTable& table) {
  table.validate();
  std::array<HuffmanCode, 256> codes{};
  std::uint32_t code = 0;
  std::size_t k = 0;
  for (int len = 1; len <= 16; ++len) {
    for (int i = 0; i < table.counts[len - 1]; ++i) {
      codes[table.symbols[k++]] = {static_cast<std::uint16_t>(code), static_cast<std::uint8_t>(len)};
      ++code;
    }
    code <<= 1;
  }
  return codes;
}

/// Length-indexed decoding tables (T.81 Annex F.2.2.3).
struct HuffmanDecoder {
  std::array<std::int32_t, 17> maxcode{};
  std::array<std::int32_t, 17> mincode{};
  std::array<std::int32_t, 17> valptr{};
  std::vector<std::uint8_t> symbols;

  explicit HuffmanDecoder(const HuffmanTable& table) : symbols(table.symbols) {
    table.validate();
    std::int32_t code = 0;
    std::int32_t k = 0;
    for (int len = 1; len <= 16; ++len) {
      const int n = table.counts[len - 1];
      if (n == 0) {
        maxcode[len] = -1;
      } else {
        valptr[len] = k;
        mincode[len] = code;
        code += n;
        k += n;
        maxcode[len] = code - 1;
      }
      code <<= 1;
    }
  }

  /// next_bit() must return 0 or 1. Throws CorruptStream when no code of
  /// length <= 16 matches.
  template <typename NextBit>
  std::uint8_t decode(NextBit&& next_bit) const {
    std::int32_t code = 0;
    for (int len = 1; len <= 16; ++len) {
      code = (code << 1) | next_bit();
      if (maxcode[len] >= 0 && code <= maxcode[len]) return symbols[valptr[len] + code - mincode[len]];
    }
    fail(ErrorCode::CorruptStream, "huffman code overrun");
  }
};

}  // namespace dctir
