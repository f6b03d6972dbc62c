#include "pnr/tag_io.hpp"

#include <algorithm>
#include <cstring>
#include <istream>
#include <ostream>
#include <sstream>

#include "binary_io.hpp"

namespace pnr {

namespace {

constexpr char kMagic[8] = {'P', 'N', 'R', 'T', 'A', 'G', 'S', '\0'};
constexpr std::size_t kChunkRecords = 1 << 16;

[[noreturn]] void format_error(std::uint64_t offset, const std::string& what) {
  std::ostringstream os;
  os << "tag file: " << what << " at byte offset " << offset;
  fail(ErrorCategory::format, os.str());
}

std::uint64_t record_offset(std::uint64_t index) { return kTagHeaderBytes + index * kTagRecordBytes; }

}  // namespace

TagWriter::TagWriter(std::ostream& os, std::uint64_t rep_period_ps, std::uint16_t channel_count)
    : os_(os), channel_count_(channel_count) {
  require(channel_count >= 1, "tag file needs at least the trigger channel");
  start_ = os_.tellp();
  if (start_ == std::streampos(-1)) fail(ErrorCategory::io, "tag output stream is not seekable");
  detail::BinaryWriter w(os_);
  w.bytes(kMagic, sizeof kMagic);
  w.u16(kTagFormatVersion);
  w.u16(channel_count);
  w.u64(rep_period_ps);
  w.u64(kIncompleteRecordCount);
  buf_.reserve(kChunkRecords * kTagRecordBytes);
}

void TagWriter::write(std::span<const TimeTag> tags) {
  require(!finished_, "tag writer already finished");
  for (std::size_t i = 0; i < tags.size(); i += kChunkRecords) {
    const std::size_t n = std::min(kChunkRecords, tags.size() - i);
    buf_.assign(n * kTagRecordBytes, 0);
    for (std::size_t j = 0; j < n; ++j) {
      const TimeTag& t = tags[i + j];
      if (count_ + j > 0 && t.timestamp_ps < last_ts_) {
        std::ostringstream os;
        os << "tags must be written in time order (record " << count_ + j << ")";
        fail(ErrorCategory::invalid_argument, os.str());
      }
      if (t.channel >= channel_count_) fail(ErrorCategory::invalid_argument, "tag channel out of range");
      last_ts_ = t.timestamp_ps;
      unsigned char* p = buf_.data() + j * kTagRecordBytes;
      detail::store_u64(p, t.timestamp_ps);
      p[8] = t.channel;
      p[9] = t.channel == kTriggerChannel ? 1 : 0;
    }
    os_.write(reinterpret_cast<const char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
    if (!os_) fail(ErrorCategory::io, "failed writing tag records");
    count_ += n;
  }
}

void TagWriter::finish() {
  if (finished_) return;
  const auto end = os_.tellp();
  os_.seekp(start_ + std::streamoff(20));
  detail::BinaryWriter(os_).u64(count_);
  os_.seekp(end);
  os_.flush();
  if (!os_) fail(ErrorCategory::io, "failed finalizing tag file header");
  finished_ = true;
}

TagReader::TagReader(std::istream& is) : is_(is) {
  start_ = is_.tellg();
  detail::BinaryReader r(is_, "tag file header");
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (!std::equal(magic, magic + 8, kMagic)) format_error(0, "bad magic (not a PNRTAGS file)");
  header_.version = r.u16();
  if (header_.version != kTagFormatVersion) {
    std::ostringstream os;
    os << "unsupported version " << header_.version;
    format_error(8, os.str());
  }
  header_.channel_count = r.u16();
  if (header_.channel_count == 0 || header_.channel_count > 256) format_error(10, "invalid channel_count");
  header_.rep_period_ps = r.u64();
  header_.record_count = r.u64();
  if (header_.record_count == kIncompleteRecordCount)
    format_error(20, "incomplete file (record_count was never finalized)");
  buf_.resize(kChunkRecords * kTagRecordBytes);
}

void TagReader::seek(std::uint64_t index) {
  if (index > header_.record_count) fail(ErrorCategory::invalid_argument, "seek past the last tag record");
  is_.clear();
  is_.seekg(start_ + std::streamoff(record_offset(index)));
  if (!is_) fail(ErrorCategory::io, "tag input stream is not seekable");
  next_ = index;
  have_last_ = false;
}

void TagReader::check_end() {
  char extra;
  if (is_.read(&extra, 1); is_.gcount() != 0)
    format_error(record_offset(header_.record_count), "trailing bytes after the declared records");
}

std::size_t TagReader::read(std::span<TimeTag> out) {
  const std::uint64_t remaining = header_.record_count - next_;
  if (remaining == 0) {
    check_end();
    return 0;
  }
  std::size_t want = static_cast<std::size_t>(std::min<std::uint64_t>({remaining, out.size(), kChunkRecords}));
  is_.read(reinterpret_cast<char*>(buf_.data()), static_cast<std::streamsize>(want * kTagRecordBytes));
  const auto got_bytes = static_cast<std::size_t>(is_.gcount());
  if (got_bytes != want * kTagRecordBytes) {
    std::ostringstream os;
    os << "truncated: header declares " << header_.record_count << " records, data ends";
    format_error(record_offset(next_) + got_bytes, os.str());
  }
  const unsigned char* p = buf_.data();
  const std::uint8_t channels = static_cast<std::uint8_t>(std::min<unsigned>(header_.channel_count, 255));
  for (std::size_t i = 0; i < want; ++i, p += kTagRecordBytes) {
    const std::uint64_t ts = detail::load_u64(p);
    const std::uint64_t tail = detail::load_u64(p + 8);
    const auto channel = static_cast<std::uint8_t>(tail);
    const auto type = static_cast<std::uint8_t>(tail >> 8);
    if ((tail >> 16) != 0 || channel >= channels || type != (channel == kTriggerChannel ? 1 : 0) ||
        (have_last_ && ts < last_ts_)) {
      const std::uint64_t at = record_offset(next_ + i);
      std::ostringstream os;
      if ((tail >> 16) != 0) os << "nonzero reserved bytes in record " << next_ + i;
      else if (channel >= channels) os << "record " << next_ + i << " has channel " << int(channel);
      else if (type > 1) os << "record " << next_ + i << " has unknown event_type " << int(type);
      else if (type != (channel == kTriggerChannel ? 1 : 0))
        os << "record " << next_ + i << " event_type does not match channel " << int(channel);
      else
        os << "unsorted records: record " << next_ + i << " (" << ts << " ps) precedes the previous record ("
           << last_ts_ << " ps)";
      format_error(at, os.str());
    }
    out[i] = {ts, channel};
    last_ts_ = ts;
    have_last_ = true;
  }
  next_ += want;
  return want;
}

void write_tags(std::ostream& os, std::span<const TimeTag> tags, std::uint64_t rep_period_ps,
                std::uint16_t channel_count) {
  TagWriter w(os, rep_period_ps, channel_count);
  w.write(tags);
  w.finish();
}

std::vector<TimeTag> read_tags(std::istream& is, TagFileHeader* header) {
  TagReader r(is);
  if (header) *header = r.header();
  std::vector<TimeTag> out(static_cast<std::size_t>(std::min<std::uint64_t>(r.header().record_count, 1u << 26)));
  std::size_t filled = 0;
  while (true) {
    if (filled == out.size()) out.resize(out.size() + kChunkRecords);
    const std::size_t n = r.read(std::span<TimeTag>(out).subspan(filled));
    if (n == 0) break;
    filled += n;
  }
  out.resize(filled);
  return out;
}

}  // namespace pnr
