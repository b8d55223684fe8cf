#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "vseg/errors.hpp"

namespace vseg::crypto {

struct Rect {
  std::uint16_t x = 0;
  std::uint16_t y = 0;
  std::uint16_t w = 0;
  std::uint16_t h = 0;

  std::size_t area() const { return static_cast<std::size_t>(w) * h; }
  bool operator==(const Rect&) const = default;
};

struct ChunkId {
  std::uint32_t slice_index = 0;
  std::uint16_t row = 0;
  std::uint16_t col = 0;

  bool operator==(const ChunkId&) const = default;
  auto operator<=>(const ChunkId&) const = default;
};

// k x k tiling of one slice. Base cell is floor(dim / k); the last row and
// column absorb the remainder, so the rects always tile the slice exactly.
struct ChunkGrid {
  std::size_t k = 1;
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<Rect> rects;  // row-major k*k

  const Rect& rect(std::size_t row, std::size_t col) const { return rects[row * k + col]; }
  std::size_t chunk_count() const { return k * k; }
};

inline ChunkGrid make_grid(std::size_t width, std::size_t height, std::size_t k) {
  if (k < 1) throw ArgumentError("grid order k must be >= 1");
  if (width < k || height < k)
    throw ArgumentError("grid order " + std::to_string(k) + " exceeds slice dims " +
                        std::to_string(width) + "x" + std::to_string(height));
  if (width > 65535 || height > 65535) throw ArgumentError("slice dims exceed u16 rect range");

  ChunkGrid grid;
  grid.k = k;
  grid.width = width;
  grid.height = height;
  grid.rects.resize(k * k);
  const std::size_t base_w = width / k, base_h = height / k;
  for (std::size_t r = 0; r < k; ++r) {
    const std::size_t y = r * base_h;
    const std::size_t h = (r + 1 == k) ? height - y : base_h;
    for (std::size_t c = 0; c < k; ++c) {
      const std::size_t x = c * base_w;
      const std::size_t w = (c + 1 == k) ? width - x : base_w;
      grid.rects[r * k + c] = Rect{static_cast<std::uint16_t>(x), static_cast<std::uint16_t>(y),
                                   static_cast<std::uint16_t>(w), static_cast<std::uint16_t>(h)};
    }
  }
  return grid;
}

struct PlainChunk {
  ChunkId id;
  Rect rect;
  std::vector<std::uint8_t> payload;
};

// Cuts a raster-order slice (bytes_per_voxel bytes per sample) into the
// grid's rectangles.
inline std::vector<PlainChunk> split_slice(const std::uint8_t* slice_bytes, const ChunkGrid& grid,
                                           std::size_t bytes_per_voxel, std::uint32_t slice_index) {
  if (slice_bytes == nullptr) throw ArgumentError("null slice");
  if (bytes_per_voxel == 0) throw ArgumentError("bytes_per_voxel must be >= 1");
  std::vector<PlainChunk> chunks;
  chunks.reserve(grid.chunk_count());
  const std::size_t row_stride = grid.width * bytes_per_voxel;
  for (std::size_t r = 0; r < grid.k; ++r)
    for (std::size_t c = 0; c < grid.k; ++c) {
      const Rect& rect = grid.rect(r, c);
      PlainChunk chunk;
      chunk.id = ChunkId{slice_index, static_cast<std::uint16_t>(r), static_cast<std::uint16_t>(c)};
      chunk.rect = rect;
      chunk.payload.resize(rect.area() * bytes_per_voxel);
      for (std::size_t yy = 0; yy < rect.h; ++yy)
        std::memcpy(chunk.payload.data() + yy * rect.w * bytes_per_voxel,
                    slice_bytes + (rect.y + yy) * row_stride + rect.x * bytes_per_voxel,
                    rect.w * bytes_per_voxel);
      chunks.push_back(std::move(chunk));
    }
  return chunks;
}

// Rebuilds the slice from chunks in any order. Every grid cell must be
// present exactly once; rects decide placement, never arrival order.
inline std::vector<std::uint8_t> reassemble(const std::vector<PlainChunk>& chunks,
                                            const ChunkGrid& grid, std::size_t bytes_per_voxel) {
  if (chunks.size() != grid.chunk_count())
    throw AssemblyError("expected " + std::to_string(grid.chunk_count()) + " chunks, got " +
                        std::to_string(chunks.size()));
  std::vector<std::uint8_t> slice(grid.width * grid.height * bytes_per_voxel);
  std::vector<bool> seen(grid.chunk_count(), false);
  const std::size_t row_stride = grid.width * bytes_per_voxel;
  for (const auto& chunk : chunks) {
    if (chunk.id.row >= grid.k || chunk.id.col >= grid.k)
      throw AssemblyError("chunk id outside grid");
    const std::size_t cell = chunk.id.row * grid.k + chunk.id.col;
    if (seen[cell]) throw AssemblyError("duplicate chunk for grid cell");
    seen[cell] = true;
    if (!(chunk.rect == grid.rect(chunk.id.row, chunk.id.col)))
      throw AssemblyError("chunk rect does not match its grid cell");
    if (chunk.payload.size() != chunk.rect.area() * bytes_per_voxel)
      throw AssemblyError("chunk payload size does not match its rect");
    for (std::size_t yy = 0; yy < chunk.rect.h; ++yy)
      std::memcpy(slice.data() + (chunk.rect.y + yy) * row_stride + chunk.rect.x * bytes_per_voxel,
                  chunk.payload.data() + yy * chunk.rect.w * bytes_per_voxel,
                  chunk.rect.w * bytes_per_voxel);
  }
  return slice;
}

}  // namespace vseg::crypto
