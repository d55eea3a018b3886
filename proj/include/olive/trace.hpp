#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace olive {

// Memory regions named in access traces. Ids are stable and stored verbatim
// in trace dumps, so renumbering would invalidate recorded files.
enum Region : uint8_t {
  kRegionInput = 0,      // packed sparse input cells (the concatenated client entries)
  kRegionAggregate = 1,  // dense aggregation target
  kRegionWork = 2,       // oblivious sort / fold scratch
  kRegionOramTree = 3,   // ORAM bucket tree, one trace cell per bucket
  kRegionOramMap = 4,    // ORAM position map entries
  kRegionOramStash = 5,  // ORAM stash slots
};

inline constexpr int kRegionCount = 6;

enum class MemOp : uint8_t { kRead = 0, kWrite = 1 };

// One observable access: (region, op, cell). `cell` is an element offset
// within its region, or a bucket id once a granularity divisor is applied.
struct AccessEvent {
  uint8_t region;
  MemOp op;
  uint64_t cell;

  friend bool operator==(const AccessEvent&, const AccessEvent&) = default;
};

// A finished trace. `granularity` records the bucket width already applied
// to the cell fields (1 = exact cells).
struct AccessTrace {
  std::vector<AccessEvent> events;
  uint64_t granularity = 1;
};

// Collects access events from instrumented algorithms.
//
// kOff makes every hook a cheap predictable branch so untraced runs pay
// almost nothing; kCount keeps per-(region, op) totals without materializing
// events, which is what the benchmarks use (recording five billion comparator
// events is not an option); kRecord stores the exact sequence.
//
// The bulk hooks (scan / scan_rw / scan_copy / scan_merge / comparator) exist
// so counting stays O(1) per sweep instead of O(cells): an algorithm that
// touches a strided range emits one call, and record mode expands it to the
// canonical per-cell order.
class Tracer {
 public:
  enum class Mode : uint8_t { kOff, kCount, kRecord };

  explicit Tracer(Mode mode = Mode::kRecord) : mode_(mode) {}

  bool active() const { return mode_ != Mode::kOff; }
  Mode mode() const { return mode_; }

  void on_read(uint8_t region, uint64_t cell) { touch(region, MemOp::kRead, cell); }
  void on_write(uint8_t region, uint64_t cell) { touch(region, MemOp::kWrite, cell); }

  void touch(uint8_t region, MemOp op, uint64_t cell) {
    if (mode_ == Mode::kOff) return;
    assert(region < kRegionCount);
    bump(region, op, 1);
    if (mode_ == Mode::kRecord) events_.push_back({region, op, cell});
  }

  // `count` same-op accesses starting at `first`, stepping by `stride`.
  void scan(uint8_t region, MemOp op, uint64_t first, uint64_t stride, uint64_t count) {
    if (mode_ == Mode::kOff) return;
    bump(region, op, count);
    if (mode_ == Mode::kRecord) {
      events_.reserve(events_.size() + count);
      for (uint64_t i = 0; i < count; ++i) events_.push_back({region, op, first + i * stride});
    }
  }

  // Read-modify-write sweep: read then write each visited cell.
  void scan_rw(uint8_t region, uint64_t first, uint64_t stride, uint64_t count) {
    if (mode_ == Mode::kOff) return;
    bump(region, MemOp::kRead, count);
    bump(region, MemOp::kWrite, count);
    if (mode_ == Mode::kRecord) {
      events_.reserve(events_.size() + 2 * count);
      for (uint64_t i = 0; i < count; ++i) {
        const uint64_t cell = first + i * stride;
        events_.push_back({region, MemOp::kRead, cell});
        events_.push_back({region, MemOp::kWrite, cell});
      }
    }
  }

  // Element-wise move between regions: read src cell, write dst cell.
  void scan_copy(uint8_t src_region, uint64_t src_first, uint8_t dst_region,
                 uint64_t dst_first, uint64_t count) {
    if (mode_ == Mode::kOff) return;
    bump(src_region, MemOp::kRead, count);
    bump(dst_region, MemOp::kWrite, count);
    if (mode_ == Mode::kRecord) {
      events_.reserve(events_.size() + 2 * count);
      for (uint64_t i = 0; i < count; ++i) {
        events_.push_back({src_region, MemOp::kRead, src_first + i});
        events_.push_back({dst_region, MemOp::kWrite, dst_first + i});
      }
    }
  }

  // Element-wise accumulate: read src cell, read dst cell, write dst cell.
  void scan_merge(uint8_t src_region, uint64_t src_first, uint8_t dst_region,
                  uint64_t dst_first, uint64_t count) {
    if (mode_ == Mode::kOff) return;
    bump(src_region, MemOp::kRead, count);
    bump(dst_region, MemOp::kRead, count);
    bump(dst_region, MemOp::kWrite, count);
    if (mode_ == Mode::kRecord) {
      events_.reserve(events_.size() + 3 * count);
      for (uint64_t i = 0; i < count; ++i) {
        events_.push_back({src_region, MemOp::kRead, src_first + i});
        events_.push_back({dst_region, MemOp::kRead, dst_first + i});
        events_.push_back({dst_region, MemOp::kWrite, dst_first + i});
      }
    }
  }

  // Compare-exchange footprint: read lo, read hi, write lo, write hi.
  void comparator(uint8_t region, uint64_t lo, uint64_t hi) {
    if (mode_ == Mode::kOff) return;
    bump(region, MemOp::kRead, 2);
    bump(region, MemOp::kWrite, 2);
    if (mode_ == Mode::kRecord) {
      events_.push_back({region, MemOp::kRead, lo});
      events_.push_back({region, MemOp::kRead, hi});
      events_.push_back({region, MemOp::kWrite, lo});
      events_.push_back({region, MemOp::kWrite, hi});
    }
  }

  uint64_t total_events() const { return total_; }

  uint64_t count(uint8_t region, MemOp op) const {
    assert(region < kRegionCount);
    return counts_[region][int(op)];
  }

  const std::vector<AccessEvent>& events() const { return events_; }

  // Moves the recorded events out as a finished trace, optionally bucketing
  // cells to `granularity` consecutive cells per bucket. Resets the tracer.
  AccessTrace take(uint64_t granularity = 1) {
    AccessTrace trace;
    trace.events = std::move(events_);
    trace.granularity = granularity;
    if (granularity > 1) {
      for (auto& ev : trace.events) ev.cell /= granularity;
    }
    reset();
    return trace;
  }

  void reset() {
    events_.clear();
    total_ = 0;
    std::memset(counts_, 0, sizeof counts_);
  }

 private:
  void bump(uint8_t region, MemOp op, uint64_t n) {
    counts_[region][int(op)] += n;
    total_ += n;
  }

  Mode mode_;
  uint64_t total_ = 0;
  uint64_t counts_[kRegionCount][2] = {};
  std::vector<AccessEvent> events_;
};

// Array view whose element accesses report to a tracer. Convenience wrapper
// for algorithms that are naturally expressed element-at-a-time; bulk sweeps
// should use the tracer's scan hooks directly.
template <class T>
class TracedArray {
 public:
  TracedArray(std::span<T> data, uint8_t region, Tracer& tracer)
      : data_(data), tracer_(&tracer), region_(region) {}

  size_t size() const { return data_.size(); }

  T get(size_t i) const {
    tracer_->on_read(region_, i);
    return data_[i];
  }

  void set(size_t i, T value) {
    tracer_->on_write(region_, i);
    data_[i] = value;
  }

  std::span<T> raw() { return data_; }

 private:
  std::span<T> data_;
  Tracer* tracer_;
  uint8_t region_;
};

// True when both traces expose the same (region, op, bucket) sequence at the
// same granularity. This is the obliviousness predicate for deterministic
// algorithms: equal traces on every input pair means the adversary's view
// carries no information about the data.
inline bool trace_equal(const AccessTrace& a, const AccessTrace& b) {
  return a.granularity == b.granularity && a.events == b.events;
}

// Index of the first differing event, or nullopt when traces are equal.
// Length differences report the shorter length. Used by check reports to
// point at the divergence instead of just saying "unequal".
inline std::optional<size_t> trace_divergence(const AccessTrace& a, const AccessTrace& b) {
  const size_t common = std::min(a.events.size(), b.events.size());
  for (size_t i = 0; i < common; ++i) {
    if (!(a.events[i] == b.events[i])) return i;
  }
  if (a.events.size() != b.events.size() || a.granularity != b.granularity) return common;
  return std::nullopt;
}

namespace detail {

inline std::string trace_key(const AccessTrace& trace) {
  std::string key;
  key.reserve(trace.events.size() * 10);
  for (const auto& ev : trace.events) {
    key.push_back(char(ev.region));
    key.push_back(char(ev.op));
    uint64_t cell = ev.cell;
    for (int b = 0; b < 8; ++b) {
      key.push_back(char(cell & 0xFF));
      cell >>= 8;
    }
  }
  return key;
}

}  // namespace detail

// Total-variation distance between two empirical trace distributions, each
// given as a sample of traces. Zero means the samples are indistinguishable;
// for a randomized algorithm run on two different inputs this estimates the
// statistical-obliviousness gap delta.
inline double trace_statistical_distance(std::span<const AccessTrace> sample_a,
                                         std::span<const AccessTrace> sample_b) {
  if (sample_a.empty() || sample_b.empty()) {
    throw std::invalid_argument("empty trace sample");
  }
  std::unordered_map<std::string, std::pair<uint64_t, uint64_t>> buckets;
  for (const auto& trace : sample_a) buckets[detail::trace_key(trace)].first++;
  for (const auto& trace : sample_b) buckets[detail::trace_key(trace)].second++;
  const double na = double(sample_a.size());
  const double nb = double(sample_b.size());
  double distance = 0.0;
  for (const auto& [key, counts] : buckets) {
    distance += std::abs(double(counts.first) / na - double(counts.second) / nb);
  }
  return distance / 2.0;
}

// Shape of a linear-aggregation trace: n clients, k entries each, d dense
// coordinates. Granularity is carried by the trace itself.
struct LinearLayout {
  uint64_t n = 0;
  uint64_t k = 0;
  uint64_t d = 0;
};

// Recovers, per client, the set of dense coordinates (bucket ids when the
// trace was bucketed) touched by linear aggregation. This is the attacker's
// parsing step: the linear trace interleaves, for every input entry, a read
// of the input cell and a read+write pair on the dense target whose address
// is the entry's coordinate. Anything that does not look like that pattern
// is rejected, since decoding someone else's trace shape would silently
// produce garbage leaks.
inline std::vector<std::vector<uint64_t>> leaked_indices(const AccessTrace& trace,
                                                         const LinearLayout& layout) {
  const uint64_t per_entry = 3;
  if (trace.events.size() != layout.n * layout.k * per_entry) {
    throw std::invalid_argument("trace shape mismatch");
  }
  const uint64_t bucket_count =
      layout.d == 0 ? 0 : (layout.d + trace.granularity - 1) / trace.granularity;
  std::vector<std::vector<uint64_t>> leaked(layout.n);
  size_t pos = 0;
  for (uint64_t user = 0; user < layout.n; ++user) {
    auto& indices = leaked[user];
    for (uint64_t entry = 0; entry < layout.k; ++entry) {
      const AccessEvent& input = trace.events[pos];
      const AccessEvent& target_read = trace.events[pos + 1];
      const AccessEvent& target_write = trace.events[pos + 2];
      pos += per_entry;
      if (input.region != kRegionInput || input.op != MemOp::kRead ||
          target_read.region != kRegionAggregate || target_read.op != MemOp::kRead ||
          target_write.region != kRegionAggregate || target_write.op != MemOp::kWrite ||
          target_read.cell != target_write.cell || target_read.cell >= bucket_count) {
        throw std::invalid_argument("trace shape mismatch");
      }
      indices.push_back(target_read.cell);
    }
    std::sort(indices.begin(), indices.end());
    indices.erase(std::unique(indices.begin(), indices.end()), indices.end());
  }
  return leaked;
}

// Trace dump format: magic "OLVT", u32 version, then one 10-byte record per
// event (u8 region, u8 op, u64 cell, little endian). Granularity is not
// stored; bucketing is applied by the writer and the cells are opaque ids.
inline constexpr char kTraceMagic[4] = {'O', 'L', 'V', 'T'};
inline constexpr uint32_t kTraceVersion = 1;

namespace detail {

inline void put_u32(std::ostream& out, uint32_t v) {
  char bytes[4];
  for (int i = 0; i < 4; ++i) bytes[i] = char((v >> (8 * i)) & 0xFF);
  out.write(bytes, 4);
}

inline void put_u64(std::ostream& out, uint64_t v) {
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = char((v >> (8 * i)) & 0xFF);
  out.write(bytes, 8);
}

inline uint32_t get_u32(std::istream& in) {
  unsigned char bytes[4];
  in.read(reinterpret_cast<char*>(bytes), 4);
  if (!in) throw std::runtime_error("truncated file");
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= uint32_t(bytes[i]) << (8 * i);
  return v;
}

inline uint64_t get_u64(std::istream& in) {
  unsigned char bytes[8];
  in.read(reinterpret_cast<char*>(bytes), 8);
  if (!in) throw std::runtime_error("truncated file");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= uint64_t(bytes[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline void write_trace(const std::string& path, const AccessTrace& trace) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path);
  out.write(kTraceMagic, 4);
  detail::put_u32(out, kTraceVersion);
  for (const auto& ev : trace.events) {
    char head[2] = {char(ev.region), char(uint8_t(ev.op))};
    out.write(head, 2);
    detail::put_u64(out, ev.cell);
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

inline AccessTrace read_trace(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kTraceMagic, 4) != 0) throw std::runtime_error("bad magic");
  const uint32_t version = detail::get_u32(in);
  if (version != kTraceVersion) throw std::runtime_error("unsupported version");
  AccessTrace trace;
  for (;;) {
    unsigned char head[2];
    in.read(reinterpret_cast<char*>(head), 2);
    if (in.eof() && in.gcount() == 0) break;
    if (!in || in.gcount() != 2) throw std::runtime_error("truncated file");
    if (head[1] > 1) throw std::runtime_error("corrupt record");
    trace.events.push_back({head[0], MemOp(head[1]), detail::get_u64(in)});
  }
  return trace;
}

}  // namespace olive
