#include "amimv/npz.hpp"

#include <zlib.h>

#include <algorithm>
#include <cctype>
#include <cstring>
#include <fstream>
#include <set>

#include "amimv/errors.hpp"

namespace amimv::npz {

namespace {

constexpr std::uint8_t kMagic[] = {0x93, 'N', 'U', 'M', 'P', 'Y'};
constexpr std::uint32_t kLocalSig = 0x04034b50;
constexpr std::uint32_t kCentralSig = 0x02014b50;
constexpr std::uint32_t kEndSig = 0x06054b50;
constexpr std::uint32_t kZip64EndSig = 0x06064b50;
constexpr std::uint32_t kZip64LocatorSig = 0x07064b50;
constexpr std::uint16_t kDosDate1980 = 0x21;

std::uint64_t read_le(std::span<const std::uint8_t> bytes, std::size_t offset, int width) {
  if (offset + width > bytes.size()) throw FormatError("zip: truncated archive");
  std::uint64_t v = 0;
  for (int i = width - 1; i >= 0; --i) v = (v << 8) | bytes[offset + i];
  return v;
}

void write_le(std::vector<std::uint8_t>& out, std::uint64_t v, int width) {
  for (int i = 0; i < width; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::string trim(std::string s) {
  auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

// Raw text of the value stored under `key` in a Python dict literal.
std::string dict_value(const std::string& header, const std::string& key) {
  const std::string quoted = "'" + key + "'";
  auto pos = header.find(quoted);
  if (pos == std::string::npos) throw FormatError("npy: header lacks key " + key);
  pos = header.find(':', pos + quoted.size());
  if (pos == std::string::npos) throw FormatError("npy: malformed header near " + key);
  ++pos;
  while (pos < header.size() && std::isspace(static_cast<unsigned char>(header[pos]))) ++pos;
  if (pos >= header.size()) throw FormatError("npy: malformed header near " + key);
  std::size_t end;
  if (header[pos] == '\'') {
    end = header.find('\'', pos + 1);
    if (end == std::string::npos) throw FormatError("npy: unterminated string for " + key);
    return header.substr(pos + 1, end - pos - 1);
  }
  if (header[pos] == '(') {
    end = header.find(')', pos);
    if (end == std::string::npos) throw FormatError("npy: unterminated tuple for " + key);
    return header.substr(pos, end - pos + 1);
  }
  end = header.find_first_of(",}", pos);
  return trim(header.substr(pos, end - pos));
}

Shape parse_shape(const std::string& tuple) {
  Shape shape;
  std::string body = tuple.substr(1, tuple.size() - 2);
  std::size_t start = 0;
  while (start < body.size()) {
    auto comma = body.find(',', start);
    std::string item = trim(body.substr(start, comma == std::string::npos ? std::string::npos
                                                                          : comma - start));
    if (!item.empty()) {
      if (!std::all_of(item.begin(), item.end(), [](unsigned char c) { return std::isdigit(c); }))
        throw FormatError("npy: bad shape entry '" + item + "'");
      shape.push_back(std::stoull(item));
    }
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return shape;
}

std::string shape_tuple(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  if (shape.size() == 1) s += ",";
  return s + ")";
}

std::vector<std::uint8_t> inflate_raw(std::span<const std::uint8_t> in, std::size_t out_size,
                                      const std::string& member) {
  std::vector<std::uint8_t> out(out_size);
  z_stream zs{};
  if (inflateInit2(&zs, -MAX_WBITS) != Z_OK) throw FormatError("zip: inflate init failed");
  zs.next_in = const_cast<Bytef*>(in.data());
  zs.avail_in = static_cast<uInt>(in.size());
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  const int rc = inflate(&zs, Z_FINISH);
  const auto produced = zs.total_out;
  inflateEnd(&zs);
  if (rc != Z_STREAM_END || produced != out_size)
    throw FormatError("zip: corrupt deflate stream in member " + member);
  return out;
}

}  // namespace

std::size_t NpyArray::item_size() const {
  if (descr.size() < 3) throw FormatError("npy: bad dtype '" + descr + "'");
  return std::stoul(descr.substr(2));
}

NpyArray parse_npy(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 10 || !std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin()))
    throw FormatError("npy: bad magic bytes");
  if (bytes[6] != 1 || bytes[7] != 0)
    throw FormatError("npy: unsupported format version " + std::to_string(bytes[6]) + "." +
                      std::to_string(bytes[7]));
  const std::size_t header_len = read_le(bytes, 8, 2);
  if (10 + header_len > bytes.size()) throw FormatError("npy: truncated header");
  const std::string header(reinterpret_cast<const char*>(bytes.data()) + 10, header_len);

  NpyArray array;
  array.descr = dict_value(header, "descr");
  if (array.descr.size() < 3 || array.descr[0] == '>')
    throw FormatError("npy: unsupported dtype '" + array.descr + "'");
  if (array.descr[0] == '=') array.descr[0] = '<';
  const std::string fortran = dict_value(header, "fortran_order");
  if (fortran == "True") throw FormatError("npy: fortran_order arrays are not supported");
  if (fortran != "False") throw FormatError("npy: bad fortran_order value '" + fortran + "'");
  array.shape = parse_shape(dict_value(header, "shape"));

  const std::size_t expected = shape_numel(array.shape) * array.item_size();
  const std::size_t offset = 10 + header_len;
  if (bytes.size() - offset != expected)
    throw FormatError("npy: payload has " + std::to_string(bytes.size() - offset) +
                      " bytes, shape " + shape_string(array.shape) + " needs " +
                      std::to_string(expected));
  array.payload.assign(bytes.begin() + offset, bytes.end());
  return array;
}

std::vector<std::uint8_t> serialize_npy(const NpyArray& array) {
  std::string header = "{'descr': '" + array.descr + "', 'fortran_order': False, 'shape': " +
                       shape_tuple(array.shape) + ", }";
  const std::size_t unpadded = 10 + header.size() + 1;
  header.append((64 - unpadded % 64) % 64, ' ');
  header.push_back('\n');
  if (header.size() > 0xFFFF) throw FormatError("npy: header too long for version 1.0");

  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  out.push_back(1);
  out.push_back(0);
  write_le(out, header.size(), 2);
  out.insert(out.end(), header.begin(), header.end());
  out.insert(out.end(), array.payload.begin(), array.payload.end());
  return out;
}

Archive read_npz(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<std::uint8_t> file((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  const std::span<const std::uint8_t> bytes(file);
  if (bytes.size() < 22) throw FormatError(path.string() + " is not a ZIP archive");

  std::size_t eocd = std::string::npos;
  const std::size_t floor = bytes.size() > 65557 ? bytes.size() - 65557 : 0;
  for (std::size_t pos = bytes.size() - 22 + 1; pos-- > floor;)
    if (read_le(bytes, pos, 4) == kEndSig) {
      eocd = pos;
      break;
    }
  if (eocd == std::string::npos) throw FormatError(path.string() + " is not a ZIP archive");

  std::uint64_t entries = read_le(bytes, eocd + 10, 2);
  std::uint64_t cd_offset = read_le(bytes, eocd + 16, 4);
  if ((entries == 0xFFFF || cd_offset == 0xFFFFFFFF) && eocd >= 20 &&
      read_le(bytes, eocd - 20, 4) == kZip64LocatorSig) {
    const std::uint64_t z64 = read_le(bytes, eocd - 20 + 8, 8);
    if (read_le(bytes, z64, 4) != kZip64EndSig) throw FormatError("zip: bad zip64 end record");
    entries = read_le(bytes, z64 + 32, 8);
    cd_offset = read_le(bytes, z64 + 48, 8);
  }

  Archive archive;
  std::size_t pos = cd_offset;
  for (std::uint64_t e = 0; e < entries; ++e) {
    if (read_le(bytes, pos, 4) != kCentralSig) throw FormatError("zip: bad central directory");
    const auto method = read_le(bytes, pos + 10, 2);
    const auto crc = read_le(bytes, pos + 16, 4);
    std::uint64_t csize = read_le(bytes, pos + 20, 4);
    std::uint64_t usize = read_le(bytes, pos + 24, 4);
    const auto name_len = read_le(bytes, pos + 28, 2);
    const auto extra_len = read_le(bytes, pos + 30, 2);
    const auto comment_len = read_le(bytes, pos + 32, 2);
    std::uint64_t local = read_le(bytes, pos + 42, 4);
    if (pos + 46 + name_len > bytes.size()) throw FormatError("zip: truncated archive");
    std::string name(reinterpret_cast<const char*>(bytes.data()) + pos + 46, name_len);

    // zip64 extended information overrides saturated 32-bit fields, in order
    std::size_t extra = pos + 46 + name_len;
    const std::size_t extra_end = extra + extra_len;
    while (extra + 4 <= extra_end) {
      const auto id = read_le(bytes, extra, 2);
      const auto len = read_le(bytes, extra + 2, 2);
      if (id == 0x0001) {
        std::size_t field = extra + 4;
        if (usize == 0xFFFFFFFF) usize = read_le(bytes, field, 8), field += 8;
        if (csize == 0xFFFFFFFF) csize = read_le(bytes, field, 8), field += 8;
        if (local == 0xFFFFFFFF) local = read_le(bytes, field, 8);
      }
      extra += 4 + len;
    }
    pos = extra_end + comment_len;

    if (read_le(bytes, local, 4) != kLocalSig) throw FormatError("zip: bad local header for " + name);
    const std::size_t data = local + 30 + read_le(bytes, local + 26, 2) + read_le(bytes, local + 28, 2);
    if (data + csize > bytes.size()) throw FormatError("zip: truncated member " + name);
    const auto raw = bytes.subspan(data, csize);

    std::vector<std::uint8_t> member;
    if (method == 0) {
      member.assign(raw.begin(), raw.end());
    } else if (method == 8) {
      member = inflate_raw(raw, usize, name);
    } else {
      throw FormatError("zip: member " + name + " uses unsupported compression method " +
                        std::to_string(method));
    }
    if (::crc32(0L, member.data(), static_cast<uInt>(member.size())) != crc)
      throw FormatError("zip: CRC mismatch in member " + name);

    if (name.size() > 4 && name.ends_with(".npy")) name.resize(name.size() - 4);
    try {
      archive.emplace(name, parse_npy(member));
    } catch (const FormatError& err) {
      throw FormatError("member " + name + ": " + err.what());
    }
  }
  return archive;
}

std::vector<std::uint8_t> serialize_npz(const Archive& archive,
                                        const std::vector<std::string>& order) {
  std::vector<std::string> names;
  std::set<std::string> seen;
  for (const auto& n : order)
    if (archive.count(n) && seen.insert(n).second) names.push_back(n);
  for (const auto& [n, _] : archive)
    if (seen.insert(n).second) names.push_back(n);

  struct CentralInfo {
    std::string name;
    std::uint32_t crc;
    std::uint32_t size;
    std::uint32_t offset;
  };
  std::vector<std::uint8_t> out;
  std::vector<CentralInfo> central;
  for (const auto& n : names) {
    const auto payload = serialize_npy(archive.at(n));
    if (payload.size() >= 0xFFFFFFFFull || out.size() >= 0xFFFFFFFFull)
      throw FormatError("npz writer: archive exceeds 4 GiB");
    CentralInfo info{n + ".npy",
                     static_cast<std::uint32_t>(::crc32(0L, payload.data(), static_cast<uInt>(payload.size()))),
                     static_cast<std::uint32_t>(payload.size()), static_cast<std::uint32_t>(out.size())};
    write_le(out, kLocalSig, 4);
    write_le(out, 20, 2);  // version needed
    write_le(out, 0, 2);   // flags
    write_le(out, 0, 2);   // stored
    write_le(out, 0, 2);   // time
    write_le(out, kDosDate1980, 2);
    write_le(out, info.crc, 4);
    write_le(out, info.size, 4);
    write_le(out, info.size, 4);
    write_le(out, info.name.size(), 2);
    write_le(out, 0, 2);
    out.insert(out.end(), info.name.begin(), info.name.end());
    out.insert(out.end(), payload.begin(), payload.end());
    central.push_back(std::move(info));
  }
  const std::size_t cd_offset = out.size();
  for (const auto& info : central) {
    write_le(out, kCentralSig, 4);
    write_le(out, 20, 2);  // version made by
    write_le(out, 20, 2);  // version needed
    write_le(out, 0, 2);
    write_le(out, 0, 2);
    write_le(out, 0, 2);
    write_le(out, kDosDate1980, 2);
    write_le(out, info.crc, 4);
    write_le(out, info.size, 4);
    write_le(out, info.size, 4);
    write_le(out, info.name.size(), 2);
    write_le(out, 0, 2);  // extra
    write_le(out, 0, 2);  // comment
    write_le(out, 0, 2);  // disk
    write_le(out, 0, 2);  // internal attrs
    write_le(out, 0, 4);  // external attrs
    write_le(out, info.offset, 4);
    out.insert(out.end(), info.name.begin(), info.name.end());
  }
  const std::size_t cd_size = out.size() - cd_offset;
  write_le(out, kEndSig, 4);
  write_le(out, 0, 2);
  write_le(out, 0, 2);
  write_le(out, central.size(), 2);
  write_le(out, central.size(), 2);
  write_le(out, cd_size, 4);
  write_le(out, cd_offset, 4);
  write_le(out, 0, 2);
  return out;
}

}  // namespace amimv::npz
