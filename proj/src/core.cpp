#include "txfs/core.hpp"

#include <algorithm>
#include <cassert>
#include <map>

namespace txfs {

std::vector<BlockSpan> block_span(std::uint64_t offset, std::uint64_t length,
                                  std::uint32_t block_size) {
  assert(block_size >= 1);
  std::vector<BlockSpan> spans;
  std::uint64_t pos = offset;
  const std::uint64_t end = offset + length;
  while (pos < end) {
    const std::uint64_t block_no = pos / block_size;
    const std::uint32_t in_block = static_cast<std::uint32_t>(pos % block_size);
    const std::uint64_t span_end = std::min<std::uint64_t>(end, (block_no + 1) * block_size);
    spans.push_back(BlockSpan{block_no, in_block,
                              static_cast<std::uint32_t>(span_end - pos)});
    pos = span_end;
  }
  return spans;
}

std::vector<WriteRecord> coalesce_writes(std::span<const WriteRecord> writes) {
  // Replay per block into a sparse byte map (later writes win), then emit one
  // record per contiguous run.
  std::map<BlockRef, std::map<std::uint32_t, std::uint8_t>> per_block;
  for (const WriteRecord& w : writes) {
    auto& bytes = per_block[w.block];
    for (std::uint32_t i = 0; i < w.bytes.size(); ++i) {
      bytes[w.offset + i] = w.bytes[i];
    }
  }

  std::vector<WriteRecord> out;
  for (auto& [block, bytes] : per_block) {
    WriteRecord current;
    current.block = block;
    bool open = false;
    std::uint32_t next_off = 0;
    for (auto& [off, b] : bytes) {
      if (!open || off != next_off) {
        if (open) out.push_back(std::move(current));
        current = WriteRecord{block, off, {}};
        open = true;
      }
      current.bytes.push_back(b);
      next_off = off + 1;
    }
    if (open) out.push_back(std::move(current));
  }
  return out;
}

std::vector<std::uint8_t> merge_read_view(std::span<const std::uint8_t> base,
                                          std::span<const WriteRecord> own_writes) {
  std::vector<std::uint8_t> view(base.begin(), base.end());
  for (const WriteRecord& w : own_writes) {
    assert(w.offset + w.bytes.size() <= view.size());
    std::copy(w.bytes.begin(), w.bytes.end(), view.begin() + w.offset);
  }
  return view;
}

}  // namespace txfs
