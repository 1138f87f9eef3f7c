#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "amimv/tensor.hpp"

namespace amimv::npz {

/// One NPY array: dtype descriptor (e.g. "|u1", "<i8"), C-order shape, and
/// the raw little-endian payload.
struct NpyArray {
  std::string descr;
  Shape shape;
  std::vector<std::uint8_t> payload;

  std::size_t item_size() const;
};

/// Parses an NPY version 1.0 buffer. Fortran order and big-endian data are
/// rejected with FormatError.
NpyArray parse_npy(std::span<const std::uint8_t> bytes);
/// Serializes with a version 1.0 header laid out the way numpy writes it.
std::vector<std::uint8_t> serialize_npy(const NpyArray& array);

/// Archive members keyed by name without the ".npy" suffix.
using Archive = std::map<std::string, NpyArray>;

/// Reads a ZIP archive of NPY members (stored or deflate).
Archive read_npz(const std::filesystem::path& path);
/// Writes an uncompressed ZIP; member order follows `order` (names not listed
/// are appended in map order). Output bytes are a pure function of content.
std::vector<std::uint8_t> serialize_npz(const Archive& archive,
                                        const std::vector<std::string>& order = {});

}  // namespace amimv::npz
