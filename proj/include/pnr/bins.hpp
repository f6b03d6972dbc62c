#pragma once

#include <cstddef>
#include <vector>

#include "pnr/error.hpp"

namespace pnr {

inline constexpr int kSpatialBins = 8;
inline constexpr int kTemporalBins = 128;
inline constexpr int kBins = kSpatialBins * kTemporalBins;

/// One (spatial, temporal) detection slot; flat index = spatial * 128 + temporal.
struct BinId {
  int spatial = 0;
  int temporal = 0;

  constexpr int flat() const noexcept { return spatial * kTemporalBins + temporal; }
  static constexpr BinId from_flat(int index) noexcept {
    return {index / kTemporalBins, index % kTemporalBins};
  }
  constexpr bool valid() const noexcept {
    return spatial >= 0 && spatial < kSpatialBins && temporal >= 0 &&
           temporal < kTemporalBins;
  }
  friend constexpr bool operator==(BinId, BinId) = default;
};

/// Per-bin table that is either shared (one entry for all bins) or explicit
/// (one entry per bin).
template <class T>
class BinTable {
 public:
  BinTable() = default;
  explicit BinTable(T shared) { values_.push_back(std::move(shared)); }
  explicit BinTable(std::vector<T> values) : values_(std::move(values)) {
    require(values_.size() == 1 || values_.size() == static_cast<std::size_t>(kBins),
            "per-bin table needs 1 or 1024 entries");
  }

  bool empty() const noexcept { return values_.empty(); }
  bool shared() const noexcept { return values_.size() == 1; }
  std::size_t distinct() const noexcept { return values_.size(); }

  const T& operator[](int flat_index) const {
    return values_.size() == 1 ? values_.front() : values_.at(flat_index);
  }
  const T& operator[](BinId id) const { return (*this)[id.flat()]; }

  // Index into values() for a bin.
  std::size_t slot(int flat_index) const noexcept {
    return values_.size() == 1 ? 0 : static_cast<std::size_t>(flat_index);
  }
  const std::vector<T>& values() const noexcept { return values_; }

 private:
  std::vector<T> values_;
};

}  // namespace pnr
