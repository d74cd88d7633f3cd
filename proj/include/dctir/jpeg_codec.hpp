#pragma once

// Baseline sequential JPEG (SOF0, Huffman, 8-bit) to and from quantized DCT
// coefficient planes. Parsing stops at the entropy layer: no dequantization
// and no inverse transform happen here.

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dctir/binary_io.hpp"
#include "dctir/dct_core.hpp"
#include "dctir/error.hpp"
#include "dctir/image.hpp"
#include "dctir/jpeg_huffman.hpp"
#include "dctir/jpeg_tables.hpp"

namespace dctir {

enum class ComponentKind : std::uint8_t { Y = 0, Cb = 1, Cr = 2 };

struct ComponentPlane {
  ComponentKind kind = ComponentKind::Y;
  std::uint8_t id = 1;        // component identifier from SOF
  std::uint8_t h = 1, v = 1;  // sampling factors
  std::uint8_t quant_id = 0;
  std::uint8_t dc_table = 0;
  std::uint8_t ac_table = 0;
  int block_rows = 0;
  int block_cols = 0;
  std::vector<QuantizedBlock> blocks;  // row-major block grid

  QuantizedBlock& block(int r, int c) { return blocks[static_cast<std::size_t>(r) * block_cols + c]; }
  const QuantizedBlock& block(int r, int c) const { return blocks[static_cast<std::size_t>(r) * block_cols + c]; }
  friend bool operator==(const ComponentPlane&, const ComponentPlane&) = default;
};

/// Marker segment as encountered in the stream (for inspection).
struct SegmentInfo {
  std::uint8_t marker = 0;
  std::size_t offset = 0;  // offset of the 0xFF byte
  std::size_t length = 0;  // payload length including the 2 length bytes; 0 for standalone markers
};

enum class ChromaSubsampling { Yuv444, Yuv420 };

struct JpegImage {
  int width = 0;
  int height = 0;
  std::vector<ComponentPlane> planes;  // 1 (grayscale) or 3 (Y, Cb, Cr)
  std::array<std::optional<QuantTable>, 4> quant_tables;
  std::vector<HuffmanTable> huffman_tables;
  std::uint16_t restart_interval = 0;
  std::vector<SegmentInfo> segments;  // filled by parse_jpeg only

  int max_h() const {
    int m = 1;
    for (const auto& p : planes) m = std::max<int>(m, p.h);
    return m;
  }
  int max_v() const {
    int m = 1;
    for (const auto& p : planes) m = std::max<int>(m, p.v);
    return m;
  }
  /// Sample dimensions (rows, cols) of a component before block padding.
  std::pair<int, int> component_size(const ComponentPlane& p) const {
    const int cols = (width * p.h + max_h() - 1) / max_h();
    const int rows = (height * p.v + max_v() - 1) / max_v();
    return {rows, cols};
  }
  ChromaSubsampling subsampling() const {
    return (planes.size() == 3 && planes[0].h == 2) ? ChromaSubsampling::Yuv420 : ChromaSubsampling::Yuv444;
  }
  const HuffmanTable* find_huffman(HuffmanClass cls, std::uint8_t id) const {
    for (const auto& t : huffman_tables)
      if (t.cls == cls && t.id == id) return &t;
    return nullptr;
  }
};

/// Standard linear quality scaling of a base table, entries clamped to [1, 255].
inline QuantTable scale_quant_table(const std::array<std::uint16_t, 64>& base, int quality) {
  require(quality >= 1 && quality <= 100, ErrorCode::InvalidArgument, "quality must be in 1..100");
  const int scale = quality < 50 ? 5000 / quality : 200 - 2 * quality;
  QuantTable q;
  for (int i = 0; i < 64; ++i) q.entries[i] = static_cast<std::uint16_t>(std::clamp((base[i] * scale + 50) / 100, 1, 255));
  return q;
}

inline std::vector<HuffmanTable> standard_huffman_tables() {
  using namespace jpeg_tables;
  return {HuffmanTable::make(HuffmanClass::DC, 0, kDcLuminanceCounts, kDcLuminanceSymbols),
          HuffmanTable::make(HuffmanClass::AC, 0, kAcLuminanceCounts, kAcLuminanceSymbols),
          HuffmanTable::make(HuffmanClass::DC, 1, kDcChrominanceCounts, kDcChrominanceSymbols),
          HuffmanTable::make(HuffmanClass::AC, 1, kAcChrominanceCounts, kAcChrominanceSymbols)};
}

namespace detail {

inline constexpr std::uint8_t kSOI = 0xD8, kEOI = 0xD9, kSOS = 0xDA, kDQT = 0xDB, kDHT = 0xC4, kDRI = 0xDD,
                              kSOF0 = 0xC0, kAPP0 = 0xE0, kCOM = 0xFE;

inline int magnitude_category(int v) {
  unsigned a = static_cast<unsigned>(v < 0 ? -v : v);
  int s = 0;
  while (a) {
    ++s;
    a >>= 1;
  }
  return s;
}

inline int extend(int bits, int s) { return bits < (1 << (s - 1)) ? bits - (1 << s) + 1 : bits; }

/// Entropy-coded segment reader: handles 0xFF00 stuffing and stops at markers.
class BitReader {
 public:
  BitReader(std::span<const std::uint8_t> data, std::size_t pos) : data_(data), pos_(pos) {}

  int bit() {
    if (nbits_ == 0) fill();
    --nbits_;
    return (byte_ >> nbits_) & 1;
  }

  int bits(int n) {
    int v = 0;
    for (int i = 0; i < n; ++i) v = (v << 1) | bit();
    return v;
  }

  /// Discards buffered bits and consumes the expected RSTn marker.
  void restart(int expected) {
    nbits_ = 0;
    if (pos_ + 1 >= data_.size()) fail(ErrorCode::TruncatedInput, "stream ends before restart marker");
    if (data_[pos_] != 0xFF || data_[pos_ + 1] != 0xD0 + expected)
      fail(ErrorCode::CorruptStream, "missing RST" + std::to_string(expected) + " marker");
    pos_ += 2;
  }

  std::size_t position() const { return pos_; }

 private:
  void fill() {
    if (pos_ >= data_.size()) fail(ErrorCode::TruncatedInput, "entropy-coded data truncated");
    std::uint8_t b = data_[pos_];
    if (b == 0xFF) {
      if (pos_ + 1 >= data_.size()) fail(ErrorCode::TruncatedInput, "entropy-coded data truncated");
      if (data_[pos_ + 1] != 0x00) fail(ErrorCode::CorruptStream, "entropy-coded data ran into a marker");
      pos_ += 2;
    } else {
      ++pos_;
    }
    byte_ = b;
    nbits_ = 8;
  }

  std::span<const std::uint8_t> data_;
  std::size_t pos_;
  std::uint8_t byte_ = 0;
  int nbits_ = 0;
};

class BitWriter {
 public:
  void put(std::uint32_t code, int length) {
    for (int i = length - 1; i >= 0; --i) {
      acc_ = static_cast<std::uint8_t>((acc_ << 1) | ((code >> i) & 1u));
      if (++n_ == 8) flush_byte();
    }
  }
  /// Pads the final byte with 1-bits.
  void finish() {
    while (n_ != 0) put(1, 1);
  }
  std::vector<std::uint8_t>& bytes() { return out_; }

 private:
  void flush_byte() {
    out_.push_back(acc_);
    if (acc_ == 0xFF) out_.push_back(0x00);
    acc_ = 0;
    n_ = 0;
  }

  std::vector<std::uint8_t> out_;
  std::uint8_t acc_ = 0;
  int n_ = 0;
};

inline std::uint16_t be16(std::span<const std::uint8_t> d, std::size_t pos) {
  if (pos + 2 > d.size()) fail(ErrorCode::TruncatedInput, "segment header truncated");
  return static_cast<std::uint16_t>((d[pos] << 8) | d[pos + 1]);
}

struct ScanComponent {
  std::size_t plane;
  const HuffmanDecoder* dc;
  const HuffmanDecoder* ac;
};

inline void decode_block(BitReader& br, const ScanComponent& sc, int& pred, QuantizedBlock& out) {
  std::array<std::int32_t, 64> zz{};
  const int s = sc.dc->decode([&] { return br.bit(); });
  if (s > 11) fail(ErrorCode::CorruptStream, "DC magnitude category out of range");
  pred += s ? extend(br.bits(s), s) : 0;
  zz[0] = pred;
  for (int k = 1; k < 64;) {
    const int rs = sc.ac->decode([&] { return br.bit(); });
    const int r = rs >> 4;
    const int size = rs & 15;
    if (size == 0) {
      if (r != 15) break;  // EOB
      k += 16;
      if (k > 64) fail(ErrorCode::CorruptStream, "zero run past end of block");
      continue;
    }
    if (size > 10) fail(ErrorCode::CorruptStream, "AC magnitude category out of range");
    k += r;
    if (k > 63) fail(ErrorCode::CorruptStream, "coefficient index beyond 63");
    zz[k++] = extend(br.bits(size), size);
  }
  out.coeffs = zigzag_unscan(zz);
}

inline void encode_block(BitWriter& bw, const QuantizedBlock& block, int& pred,
                         const std::array<HuffmanCode, 256>& dc, const std::array<HuffmanCode, 256>& ac) {
  const auto zz = zigzag_scan(block.coeffs);
  auto emit = [&](const std::array<HuffmanCode, 256>& table, int symbol) {
    const HuffmanCode c = table[symbol];
    if (c.length == 0) fail(ErrorCode::InvalidArgument, "symbol missing from huffman table");
    bw.put(c.code, c.length);
  };
  auto emit_value = [&](int v, int s) {
    if (s) bw.put(static_cast<std::uint32_t>(v < 0 ? v + (1 << s) - 1 : v), s);
  };
  const int diff = zz[0] - pred;
  pred = zz[0];
  const int s = magnitude_category(diff);
  if (s > 11) fail(ErrorCode::InvalidArgument, "DC difference out of baseline range");
  emit(dc, s);
  emit_value(diff, s);
  int run = 0;
  for (int k = 1; k < 64; ++k) {
    const int v = zz[k];
    if (v == 0) {
      ++run;
      continue;
    }
    while (run > 15) {
      emit(ac, 0xF0);
      run -= 16;
    }
    const int size = magnitude_category(v);
    if (size > 10) fail(ErrorCode::InvalidArgument, "AC coefficient out of baseline range");
    emit(ac, (run << 4) | size);
    emit_value(v, size);
    run = 0;
  }
  if (run > 0) emit(ac, 0x00);
}

}  // namespace detail

/// Parses a baseline JFIF/JPEG stream down to quantized coefficient planes.
inline JpegImage parse_jpeg(std::span<const std::uint8_t> data) {
  using namespace detail;
  if (data.size() < 2) fail(ErrorCode::TruncatedInput, "stream shorter than SOI");
  if (data[0] != 0xFF || data[1] != kSOI) fail(ErrorCode::CorruptStream, "stream does not begin with SOI");

  JpegImage img;
  img.segments.push_back({kSOI, 0, 0});
  std::vector<HuffmanDecoder> decoders;  // rebuilt as tables change
  std::array<std::optional<std::size_t>, 8> decoder_slot{};  // [cls*4 + id]
  bool have_frame = false;
  bool have_scan = false;
  std::size_t pos = 2;

  for (;;) {
    if (pos >= data.size()) fail(ErrorCode::TruncatedInput, "missing EOI marker");
    if (data[pos] != 0xFF) fail(ErrorCode::CorruptStream, "expected marker at offset " + std::to_string(pos));
    while (pos < data.size() && data[pos] == 0xFF) ++pos;  // fill bytes
    if (pos >= data.size()) fail(ErrorCode::TruncatedInput, "missing EOI marker");
    const std::uint8_t marker = data[pos];
    const std::size_t marker_offset = pos - 1;
    ++pos;

    if (marker == kEOI) {
      img.segments.push_back({marker, marker_offset, 0});
      break;
    }
    if (marker == kSOI || (marker >= 0xD0 && marker <= 0xD7))
      fail(ErrorCode::CorruptStream, "unexpected standalone marker");

    const std::uint16_t len = be16(data, pos);
    if (len < 2) fail(ErrorCode::CorruptStream, "segment length below 2");
    if (pos + len > data.size()) fail(ErrorCode::TruncatedInput, "segment extends past end of stream");
    img.segments.push_back({marker, marker_offset, len});
    const std::span<const std::uint8_t> seg = data.subspan(pos + 2, len - 2);
    ByteReader rd(seg, ErrorCode::CorruptStream);
    const std::size_t seg_end = pos + len;

    switch (marker) {
      case kDQT:
        while (!rd.at_end()) {
          const std::uint8_t pq_tq = rd.u8();
          if ((pq_tq >> 4) != 0) fail(ErrorCode::UnsupportedFormat, "16-bit quantization tables");
          const int tq = pq_tq & 15;
          if (tq > 3) fail(ErrorCode::CorruptStream, "quantization table id > 3");
          std::array<std::uint16_t, 64> zz{};
          for (auto& e : zz) e = rd.u8();
          QuantTable q;
          q.entries = zigzag_unscan(zz);
          if (!q.valid()) fail(ErrorCode::CorruptStream, "zero quantization entry");
          img.quant_tables[tq] = q;
        }
        break;

      case kDHT:
        while (!rd.at_end()) {
          const std::uint8_t tc_th = rd.u8();
          HuffmanTable t;
          if ((tc_th >> 4) > 1 || (tc_th & 15) > 3) fail(ErrorCode::CorruptStream, "bad huffman table class/id");
          t.cls = static_cast<HuffmanClass>(tc_th >> 4);
          t.id = tc_th & 15;
          for (auto& c : t.counts) c = rd.u8();
          if (t.total() > 256) fail(ErrorCode::CorruptStream, "huffman table has more than 256 symbols");
          t.symbols.resize(t.total());
          for (auto& s : t.symbols) s = rd.u8();
          t.validate();
          const std::size_t slot = static_cast<std::size_t>(t.cls) * 4 + t.id;
          decoders.emplace_back(t);
          decoder_slot[slot] = decoders.size() - 1;
          std::erase_if(img.huffman_tables, [&](const HuffmanTable& o) { return o.cls == t.cls && o.id == t.id; });
          img.huffman_tables.push_back(std::move(t));
        }
        break;

      case kDRI:
        img.restart_interval = static_cast<std::uint16_t>((seg.size() >= 2) ? (seg[0] << 8 | seg[1]) : 0);
        if (seg.size() != 2) fail(ErrorCode::CorruptStream, "DRI length must be 4");
        break;

      case 0xC0:
      case 0xC1: {
        if (have_frame) fail(ErrorCode::CorruptStream, "multiple frames");
        have_frame = true;
        const std::uint8_t precision = rd.u8();
        if (precision != 8) fail(ErrorCode::UnsupportedFormat, "sample precision " + std::to_string(precision));
        img.height = (rd.u8() << 8);
        img.height |= rd.u8();
        img.width = (rd.u8() << 8);
        img.width |= rd.u8();
        if (img.height == 0) fail(ErrorCode::UnsupportedFormat, "DNL-defined height");
        if (img.width == 0) fail(ErrorCode::CorruptStream, "zero width");
        const int nc = rd.u8();
        if (nc != 1 && nc != 3) fail(ErrorCode::UnsupportedFormat, std::to_string(nc) + " components");
        for (int i = 0; i < nc; ++i) {
          ComponentPlane p;
          p.kind = static_cast<ComponentKind>(i);
          p.id = rd.u8();
          const std::uint8_t hv = rd.u8();
          p.h = hv >> 4;
          p.v = hv & 15;
          p.quant_id = rd.u8();
          if (p.h < 1 || p.h > 2 || p.v < 1 || p.v > 2) fail(ErrorCode::UnsupportedFormat, "sampling factors");
          if (p.quant_id > 3) fail(ErrorCode::CorruptStream, "quantization table id > 3");
          img.planes.push_back(p);
        }
        if (nc == 3) {
          const auto& y = img.planes[0];
          const bool s444 = y.h == 1 && y.v == 1;
          const bool s420 = y.h == 2 && y.v == 2;
          for (int i = 1; i < 3; ++i)
            if (img.planes[i].h != 1 || img.planes[i].v != 1 || !(s444 || s420))
              fail(ErrorCode::UnsupportedFormat, "only 4:4:4 and 4:2:0 sampling are supported");
        } else {
          img.planes[0].h = img.planes[0].v = 1;  // single component: MCU is one block
        }
        for (auto& p : img.planes) {
          const auto [rows, cols] = img.component_size(p);
          p.block_rows = (rows + 7) / 8;
          p.block_cols = (cols + 7) / 8;
          p.blocks.assign(static_cast<std::size_t>(p.block_rows) * p.block_cols, QuantizedBlock{});
        }
        break;
      }

      case 0xC2:
      case 0xC6:
      case 0xCA:
      case 0xCE:
        fail(ErrorCode::UnsupportedFormat, "progressive JPEG");
      case 0xC3:
      case 0xC5:
      case 0xC7:
      case 0xCB:
      case 0xCD:
      case 0xCF:
        fail(ErrorCode::UnsupportedFormat, "lossless or hierarchical JPEG");
      case 0xC9:
        fail(ErrorCode::UnsupportedFormat, "arithmetic coding");
      case 0xCC:
        fail(ErrorCode::UnsupportedFormat, "arithmetic coding conditioning");

      case kSOS: {
        if (!have_frame) fail(ErrorCode::CorruptStream, "SOS before SOF");
        const int ns = rd.u8();
        if (ns < 1 || ns > static_cast<int>(img.planes.size())) fail(ErrorCode::CorruptStream, "bad scan component count");
        std::vector<ScanComponent> comps;
        for (int i = 0; i < ns; ++i) {
          const std::uint8_t cid = rd.u8();
          const std::uint8_t tables = rd.u8();
          auto it = std::find_if(img.planes.begin(), img.planes.end(), [&](const auto& p) { return p.id == cid; });
          if (it == img.planes.end()) fail(ErrorCode::CorruptStream, "scan references unknown component");
          it->dc_table = tables >> 4;
          it->ac_table = tables & 15;
          if (it->dc_table > 3 || it->ac_table > 3) fail(ErrorCode::CorruptStream, "huffman table id > 3");
          const auto dc = decoder_slot[it->dc_table];
          const auto ac = decoder_slot[4 + it->ac_table];
          if (!dc || !ac) fail(ErrorCode::CorruptStream, "scan uses undefined huffman table");
          if (!img.quant_tables[it->quant_id]) fail(ErrorCode::CorruptStream, "component uses undefined quantization table");
          comps.push_back({static_cast<std::size_t>(it - img.planes.begin()), &decoders[*dc], &decoders[*ac]});
        }
        const int ss = rd.u8(), se = rd.u8(), ahal = rd.u8();
        if (ss != 0 || se != 63 || ahal != 0) fail(ErrorCode::UnsupportedFormat, "non-sequential scan parameters");

        BitReader br(data, seg_end);
        std::vector<int> pred(comps.size(), 0);
        const int ri = img.restart_interval;
        int next_rst = 0;
        long units = 0;
        auto maybe_restart = [&](long done, long total) {
          if (ri > 0 && done % ri == 0 && done < total) {
            br.restart(next_rst);
            next_rst = (next_rst + 1) & 7;
            std::fill(pred.begin(), pred.end(), 0);
          }
        };
        QuantizedBlock scratch;
        if (comps.size() == 1) {
          ComponentPlane& p = img.planes[comps[0].plane];
          const long total = static_cast<long>(p.block_rows) * p.block_cols;
          for (int r = 0; r < p.block_rows; ++r)
            for (int c = 0; c < p.block_cols; ++c) {
              decode_block(br, comps[0], pred[0], p.block(r, c));
              maybe_restart(++units, total);
            }
        } else {
          const int mcu_cols = (img.width + 8 * img.max_h() - 1) / (8 * img.max_h());
          const int mcu_rows = (img.height + 8 * img.max_v() - 1) / (8 * img.max_v());
          const long total = static_cast<long>(mcu_rows) * mcu_cols;
          for (int mr = 0; mr < mcu_rows; ++mr)
            for (int mc = 0; mc < mcu_cols; ++mc) {
              for (std::size_t ci = 0; ci < comps.size(); ++ci) {
                ComponentPlane& p = img.planes[comps[ci].plane];
                for (int by = 0; by < p.v; ++by)
                  for (int bx = 0; bx < p.h; ++bx) {
                    const int r = mr * p.v + by;
                    const int c = mc * p.h + bx;
                    const bool inside = r < p.block_rows && c < p.block_cols;
                    decode_block(br, comps[ci], pred[ci], inside ? p.block(r, c) : scratch);
                  }
              }
              maybe_restart(++units, total);
            }
        }
        have_scan = true;
        pos = br.position();
        continue;  // entropy data has no length; resume at the next marker
      }

      default:
        // APPn, COM, DNL and anything else with a length: skipped.
        break;
    }
    pos = seg_end;
  }
  if (!have_frame) fail(ErrorCode::CorruptStream, "no SOF segment");
  if (!have_scan) fail(ErrorCode::CorruptStream, "no scan");
  return img;
}

inline JpegImage parse_jpeg(const std::vector<std::uint8_t>& data) {
  return parse_jpeg(std::span<const std::uint8_t>(data.data(), data.size()));
}

/// Writes a baseline JFIF stream. Huffman tables stored in the image are
/// reused; images without tables get the Annex K tables. Restart markers are
/// never emitted.
inline std::vector<std::uint8_t> encode_jpeg(const JpegImage& img) {
  using namespace detail;
  require(img.width >= 1 && img.height >= 1 && img.width <= 65535 && img.height <= 65535,
          ErrorCode::InvalidDimensions, "image dimensions out of range");
  require(img.planes.size() == 1 || img.planes.size() == 3, ErrorCode::InvalidArgument, "1 or 3 planes required");

  std::vector<HuffmanTable> tables = img.huffman_tables.empty() ? standard_huffman_tables() : img.huffman_tables;
  auto find = [&](HuffmanClass cls, std::uint8_t id) -> const HuffmanTable& {
    for (const auto& t : tables)
      if (t.cls == cls && t.id == id) return t;
    fail(ErrorCode::InvalidArgument, "missing huffman table");
  };

  std::vector<std::uint8_t> out;
  auto marker = [&](std::uint8_t m) {
    out.push_back(0xFF);
    out.push_back(m);
  };
  auto u16 = [&](int v) {
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v & 0xFF));
  };

  marker(kSOI);
  marker(kAPP0);
  u16(16);
  for (char c : std::string("JFIF")) out.push_back(static_cast<std::uint8_t>(c));
  out.insert(out.end(), {0x00, 0x01, 0x01, 0x00});  // version 1.1, no density units
  u16(1);
  u16(1);
  out.insert(out.end(), {0x00, 0x00});  // no thumbnail

  for (std::uint8_t id = 0; id < 4; ++id) {
    if (!img.quant_tables[id]) continue;
    require(img.quant_tables[id]->valid(), ErrorCode::InvalidArgument, "quantization entries must be 1..255");
    marker(kDQT);
    u16(2 + 65);
    out.push_back(id);
    const auto zz = zigzag_scan(img.quant_tables[id]->entries);
    for (auto e : zz) out.push_back(static_cast<std::uint8_t>(e));
  }

  marker(kSOF0);
  u16(8 + 3 * static_cast<int>(img.planes.size()));
  out.push_back(8);
  u16(img.height);
  u16(img.width);
  out.push_back(static_cast<std::uint8_t>(img.planes.size()));
  for (const auto& p : img.planes) {
    require(img.quant_tables[p.quant_id].has_value(), ErrorCode::InvalidArgument, "plane uses undefined quant table");
    const auto [rows, cols] = img.component_size(p);
    require(p.block_rows == (rows + 7) / 8 && p.block_cols == (cols + 7) / 8 &&
                p.blocks.size() == static_cast<std::size_t>(p.block_rows) * p.block_cols,
            ErrorCode::InvalidDimensions, "plane block grid inconsistent with image size");
    out.push_back(p.id);
    out.push_back(static_cast<std::uint8_t>(p.h << 4 | p.v));
    out.push_back(p.quant_id);
  }

  std::vector<const HuffmanTable*> used;
  for (const auto& p : img.planes)
    for (const HuffmanTable* t : {&find(HuffmanClass::DC, p.dc_table), &find(HuffmanClass::AC, p.ac_table)})
      if (std::find(used.begin(), used.end(), t) == used.end()) used.push_back(t);
  for (const HuffmanTable* t : used) {
    t->validate();
    marker(kDHT);
    u16(2 + 17 + static_cast<int>(t->symbols.size()));
    out.push_back(static_cast<std::uint8_t>(static_cast<int>(t->cls) << 4 | t->id));
    out.insert(out.end(), t->counts.begin(), t->counts.end());
    out.insert(out.end(), t->symbols.begin(), t->symbols.end());
  }

  marker(kSOS);
  u16(6 + 2 * static_cast<int>(img.planes.size()));
  out.push_back(static_cast<std::uint8_t>(img.planes.size()));
  for (const auto& p : img.planes) {
    out.push_back(p.id);
    out.push_back(static_cast<std::uint8_t>(p.dc_table << 4 | p.ac_table));
  }
  out.insert(out.end(), {0, 63, 0});

  struct Coder {
    std::array<HuffmanCode, 256> dc, ac;
  };
  std::vector<Coder> coders;
  for (const auto& p : img.planes)
    coders.push_back({build_encoder(find(HuffmanClass::DC, p.dc_table)), build_encoder(find(HuffmanClass::AC, p.ac_table))});

  BitWriter bw;
  std::vector<int> pred(img.planes.size(), 0);
  if (img.planes.size() == 1) {
    const auto& p = img.planes[0];
    for (const auto& b : p.blocks) encode_block(bw, b, pred[0], coders[0].dc, coders[0].ac);
  } else {
    const int mcu_cols = (img.width + 8 * img.max_h() - 1) / (8 * img.max_h());
    const int mcu_rows = (img.height + 8 * img.max_v() - 1) / (8 * img.max_v());
    for (int mr = 0; mr < mcu_rows; ++mr)
      for (int mc = 0; mc < mcu_cols; ++mc)
        for (std::size_t ci = 0; ci < img.planes.size(); ++ci) {
          const auto& p = img.planes[ci];
          QuantizedBlock previous;
          for (int by = 0; by < p.v; ++by)
            for (int bx = 0; bx < p.h; ++bx) {
              const int r = mr * p.v + by;
              const int c = mc * p.h + bx;
              if (r < p.block_rows && c < p.block_cols) {
                previous = p.block(r, c);
              } else {
                // Dummy block of a partial MCU: zero AC, DC replicated from
                // the previous block (the libjpeg convention).
                const int dc = previous.coeffs[0];
                previous = QuantizedBlock{};
                previous.coeffs[0] = dc;
              }
              encode_block(bw, previous, pred[ci], coders[ci].dc, coders[ci].ac);
            }
        }
  }
  bw.finish();
  out.insert(out.end(), bw.bytes().begin(), bw.bytes().end());
  marker(kEOI);
  return out;
}

struct EncodeOptions {
  int quality = 90;
  ChromaSubsampling subsampling = ChromaSubsampling::Yuv420;
  bool grayscale = false;
};

/// The lossy half of the encoder: color conversion, chroma subsampling,
/// level shift, DCT and quantization into a JpegImage with Annex K tables.
inline JpegImage jpeg_from_pixels(const ImageTensor& rgb, const EncodeOptions& opts = {}) {
  require(rgb.height >= 1 && rgb.width >= 1, ErrorCode::InvalidDimensions, "image must be at least 1x1");
  require(rgb.height <= 65535 && rgb.width <= 65535, ErrorCode::InvalidDimensions, "image too large for JPEG");
  JpegImage img;
  img.width = rgb.width;
  img.height = rgb.height;
  img.quant_tables[0] = scale_quant_table(jpeg_tables::kLuminanceQuant, opts.quality);
  img.huffman_tables = standard_huffman_tables();

  const auto ycc = to_ycbcr_planes(rgb);
  const int ncomp = opts.grayscale ? 1 : 3;
  const bool sub = !opts.grayscale && opts.subsampling == ChromaSubsampling::Yuv420;
  if (ncomp == 3) img.quant_tables[1] = scale_quant_table(jpeg_tables::kChrominanceQuant, opts.quality);

  for (int ci = 0; ci < ncomp; ++ci) {
    ComponentPlane p;
    p.kind = static_cast<ComponentKind>(ci);
    p.id = static_cast<std::uint8_t>(ci + 1);
    p.h = p.v = (sub && ci == 0) ? 2 : 1;
    p.quant_id = p.dc_table = p.ac_table = ci == 0 ? 0 : 1;
    img.planes.push_back(p);
  }
  for (int ci = 0; ci < ncomp; ++ci) {
    ComponentPlane& p = img.planes[ci];
    Plane src = ycc[ci];
    for (double& v : src.data) v = clamp_sample(v);
    // Pad to whole MCUs by replication before subsampling so chroma edges
    // see replicated pixels rather than a shortened average.
    const int mcu_w = 8 * img.max_h(), mcu_h = 8 * img.max_v();
    const int padded_cols = (rgb.width + mcu_w - 1) / mcu_w * mcu_w;
    const int padded_rows = (rgb.height + mcu_h - 1) / mcu_h * mcu_h;
    src = pad_replicate(src, padded_rows, padded_cols);
    if (sub && ci > 0) src = chroma_resample(src, Resample::Down);
    const auto [rows, cols] = img.component_size(p);
    p.block_rows = (rows + 7) / 8;
    p.block_cols = (cols + 7) / 8;
    p.blocks.resize(static_cast<std::size_t>(p.block_rows) * p.block_cols);
    const QuantTable& q = *img.quant_tables[p.quant_id];
    for (int br = 0; br < p.block_rows; ++br)
      for (int bc = 0; bc < p.block_cols; ++bc) {
        PixelBlock b = extract_block(src, br, bc);
        for (double& s : b.samples) s -= 128.0;
        p.block(br, bc) = quantize(forward_dct(b), q);
      }
  }
  return img;
}

inline std::vector<std::uint8_t> encode_jpeg(const ImageTensor& rgb, const EncodeOptions& opts = {}) {
  return encode_jpeg(jpeg_from_pixels(rgb, opts));
}

/// Per-plane block grids as real coefficients, optionally multiplied by the
/// quantization entries.
inline std::vector<std::vector<CoeffBlock>> coefficient_planes(const JpegImage& img, bool dequantized) {
  std::vector<std::vector<CoeffBlock>> out;
  for (const auto& p : img.planes) {
    const QuantTable q = dequantized ? img.quant_tables[p.quant_id].value() : QuantTable::ones();
    std::vector<CoeffBlock> blocks;
    blocks.reserve(p.blocks.size());
    for (const auto& b : p.blocks) blocks.push_back(dequantize(b, q));
    out.push_back(std::move(blocks));
  }
  return out;
}

/// Decoded component samples at block-grid resolution (level shift undone,
/// not rounded or clamped).
inline Plane reconstruct_plane(const JpegImage& img, std::size_t index) {
  const auto& p = img.planes.at(index);
  const QuantTable& q = img.quant_tables[p.quant_id].value();
  Plane out(p.block_rows * 8, p.block_cols * 8);
  for (int br = 0; br < p.block_rows; ++br)
    for (int bc = 0; bc < p.block_cols; ++bc) {
      PixelBlock b = inverse_dct(dequantize(p.block(br, bc), q));
      for (double& s : b.samples) s += 128.0;
      store_block(out, br, bc, b);
    }
  return out;
}

/// Full decode of each component: dequantize, IDCT, +128, round, clamp, crop
/// to the component's sample size. No upsampling.
inline std::vector<Plane> decode_component_planes(const JpegImage& img) {
  std::vector<Plane> out;
  for (std::size_t i = 0; i < img.planes.size(); ++i) {
    const Plane full = reconstruct_plane(img, i);
    const auto [rows, cols] = img.component_size(img.planes[i]);
    Plane p(rows, cols);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) p(r, c) = std::clamp(std::round(full(r, c)), 0.0, 255.0);
    out.push_back(std::move(p));
  }
  return out;
}

/// Full decode to RGB (bilinear chroma upsampling for 4:2:0), 8-bit values.
inline ImageTensor decode_rgb(const JpegImage& img) {
  std::vector<Plane> planes;
  for (std::size_t i = 0; i < img.planes.size(); ++i) {
    Plane p = reconstruct_plane(img, i);
    for (double& s : p.data) s = std::clamp(std::round(s), 0.0, 255.0);
    if (img.planes[i].h < img.max_h()) p = chroma_resample(p, Resample::Up);
    planes.push_back(std::move(p));
  }
  if (planes.size() == 1) {
    planes.emplace_back(planes[0].rows, planes[0].cols, 128.0);
    planes.push_back(planes[1]);
  }
  ImageTensor out(img.height, img.width);
  for (int r = 0; r < img.height; ++r)
    for (int c = 0; c < img.width; ++c) {
      const Rgb v = ycbcr_to_rgb(planes[0](r, c), planes[1](r, c), planes[2](r, c));
      out.at(r, c, 0) = std::round(v.r);
      out.at(r, c, 1) = std::round(v.g);
      out.at(r, c, 2) = std::round(v.b);
    }
  return out;
}

}  // namespace dctir
