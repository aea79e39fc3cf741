#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "txfs/types.hpp"

namespace txfs {

struct BlockSpan {
  std::uint64_t block_no = 0;
  std::uint32_t offset = 0;  // within the block
  std::uint32_t length = 0;

  bool operator==(const BlockSpan&) const = default;
};

// Split the byte range [offset, offset+length) into per-block spans.
// Spans are contiguous, non-overlapping, and cover the range exactly.
std::vector<BlockSpan> block_span(std::uint64_t offset, std::uint64_t length,
                                  std::uint32_t block_size);

// Normalize a write list: later writes win on overlap, adjacent/overlapping
// ranges within a block merge, output sorted by (block_no, offset). Applying
// the result to any base yields the same bytes as applying the input in order.
std::vector<WriteRecord> coalesce_writes(std::span<const WriteRecord> writes);

// Overlay a transaction's own writes for one block onto a base image.
std::vector<std::uint8_t> merge_read_view(std::span<const std::uint8_t> base,
                                          std::span<const WriteRecord> own_writes);

}  // namespace txfs
