#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "pnr/shot_engine.hpp"

namespace pnr {

inline constexpr std::uint16_t kTagFormatVersion = 1;
inline constexpr std::size_t kTagHeaderBytes = 28;
inline constexpr std::size_t kTagRecordBytes = 16;
// record_count value of a file whose writer never finished.
inline constexpr std::uint64_t kIncompleteRecordCount = ~std::uint64_t{0};

struct TagFileHeader {
  std::uint16_t version = kTagFormatVersion;
  std::uint16_t channel_count = 9;
  std::uint64_t rep_period_ps = 0;
  std::uint64_t record_count = 0;
};

/// Append-only writer. The header's record_count is written as the
/// "incomplete" marker and patched by finish(), so the stream must be seekable.
class TagWriter {
 public:
  TagWriter(std::ostream& os, std::uint64_t rep_period_ps, std::uint16_t channel_count = 9);
  void write(std::span<const TimeTag> tags);
  void finish();
  std::uint64_t records() const noexcept { return count_; }

 private:
  std::ostream& os_;
  std::streampos start_;
  std::uint16_t channel_count_;
  std::uint64_t count_ = 0;
  std::uint64_t last_ts_ = 0;
  std::vector<unsigned char> buf_;
  bool finished_ = false;
};

/// Chunked reader; validates magic, version, record layout, sort order and
/// the record count, reporting byte offsets on failure.
class TagReader {
 public:
  explicit TagReader(std::istream& is);

  const TagFileHeader& header() const noexcept { return header_; }

  // Fills up to out.size() tags; returns how many were read (0 at the end).
  std::size_t read(std::span<TimeTag> out);

  // Positions the reader at record `index` (seekable streams only). Sort
  // order is then checked from that record on.
  void seek(std::uint64_t index);

 private:
  void check_end();

  std::istream& is_;
  std::streampos start_;
  TagFileHeader header_;
  std::uint64_t next_ = 0;
  std::uint64_t last_ts_ = 0;
  bool have_last_ = false;
  std::vector<unsigned char> buf_;
};

void write_tags(std::ostream& os, std::span<const TimeTag> tags, std::uint64_t rep_period_ps,
                std::uint16_t channel_count = 9);
std::vector<TimeTag> read_tags(std::istream& is, TagFileHeader* header = nullptr);

}  // namespace pnr
