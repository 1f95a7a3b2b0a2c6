#include "medlab/tensor_store.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <unordered_set>

#include "medlab/error.hpp"

namespace medlab::store {

namespace {

template <typename T>
void put_le(std::ostream& out, T value) {
  unsigned char bytes[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    bytes[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF);
  }
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

void read_exact(std::istream& in, void* dst, std::size_t n, const char* what) {
  in.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) {
    throw Error(ErrorCode::Truncated, std::string("stream ended while reading ") + what);
  }
}

template <typename T>
T get_le(std::istream& in, const char* what) {
  unsigned char bytes[sizeof(T)];
  read_exact(in, bytes, sizeof(T), what);
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  }
  return static_cast<T>(v);
}

void validate_entry(const TensorEntry& e) {
  if (e.dims.empty()) {
    throw Error(ErrorCode::ShapeMismatch, "tensor '" + e.name + "' has no dimensions");
  }
  if (e.dims.size() > std::numeric_limits<std::uint8_t>::max()) {
    throw Error(ErrorCode::ShapeMismatch, "tensor '" + e.name + "' has too many dimensions");
  }
  std::uint64_t count = 1;
  for (auto d : e.dims) {
    if (d == 0) throw Error(ErrorCode::ShapeMismatch, "tensor '" + e.name + "' has a zero dimension");
    if (count > std::numeric_limits<std::uint64_t>::max() / d) {
      throw Error(ErrorCode::ShapeMismatch, "tensor '" + e.name + "' element count overflows");
    }
    count *= d;
  }
  if (count != e.data.size()) {
    throw Error(ErrorCode::ShapeMismatch, "tensor '" + e.name + "' dims imply " + std::to_string(count) +
                                              " elements but data holds " + std::to_string(e.data.size()));
  }
}

}  // namespace

std::uint64_t TensorEntry::element_count() const {
  std::uint64_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

TensorArchive::TensorArchive(std::vector<TensorEntry> entries) : entries_(std::move(entries)) { validate(); }

void TensorArchive::add(TensorEntry entry) {
  validate_entry(entry);
  if (find(entry.name) != nullptr) {
    throw Error(ErrorCode::DuplicateTensor, "tensor '" + entry.name + "' already present");
  }
  entries_.push_back(std::move(entry));
}

void TensorArchive::validate() const {
  std::unordered_set<std::string_view> seen;
  for (const auto& e : entries_) {
    if (!seen.insert(e.name).second) {
      throw Error(ErrorCode::DuplicateTensor, "tensor '" + e.name + "' appears twice");
    }
    validate_entry(e);
  }
}

const TensorEntry* TensorArchive::find(std::string_view name) const {
  auto it = std::find_if(entries_.begin(), entries_.end(), [&](const TensorEntry& e) { return e.name == name; });
  return it == entries_.end() ? nullptr : &*it;
}

bool TensorArchive::operator==(const TensorArchive& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& a = entries_[i];
    const auto& b = other.entries_[i];
    if (a.name != b.name || a.dims != b.dims || a.data.size() != b.data.size()) return false;
    if (!a.data.empty() && std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) != 0) {
      return false;
    }
  }
  return true;
}

std::uint64_t write_archive(const TensorArchive& archive, std::ostream& out) {
  archive.validate();
  const auto start = out.tellp();
  std::uint64_t written = 0;

  out.write(kMagic, 4);
  put_le<std::uint32_t>(out, kVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(archive.size()));
  written += 12;

  for (const auto& e : archive.entries()) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
    out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    put_le<std::uint8_t>(out, kDtypeF32);
    put_le<std::uint8_t>(out, static_cast<std::uint8_t>(e.dims.size()));
    for (auto d : e.dims) put_le<std::uint64_t>(out, d);
    for (float f : e.data) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));
    written += 4 + e.name.size() + 1 + 1 + 8 * e.dims.size() + 4 * e.data.size();
  }
  if (!out) throw Error(ErrorCode::IoError, "failed writing archive");
  if (start != std::streampos(-1) && out.tellp() != std::streampos(-1)) {
    written = static_cast<std::uint64_t>(out.tellp() - start);
  }
  return written;
}

TensorArchive read_archive(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0) {
    throw Error(ErrorCode::NotAnArchive, "missing MLAB magic");
  }
  const auto version = get_le<std::uint32_t>(in, "version");
  if (version != kVersion) {
    throw Error(ErrorCode::UnsupportedVersion, "archive version " + std::to_string(version));
  }
  const auto count = get_le<std::uint32_t>(in, "entry count");

  TensorArchive archive;
  for (std::uint32_t i = 0; i < count; ++i) {
    TensorEntry e;
    const auto name_len = get_le<std::uint32_t>(in, "name length");
    e.name.resize(name_len);
    if (name_len > 0) read_exact(in, e.name.data(), name_len, "tensor name");
    const auto dtype = get_le<std::uint8_t>(in, "dtype");
    if (dtype != kDtypeF32) {
      throw Error(ErrorCode::UnsupportedDtype, "tensor '" + e.name + "' has dtype tag " + std::to_string(dtype));
    }
    const auto ndim = get_le<std::uint8_t>(in, "ndim");
    e.dims.reserve(ndim);
    for (std::uint8_t d = 0; d < ndim; ++d) e.dims.push_back(get_le<std::uint64_t>(in, "dims"));
    // Validate shape before sizing the payload so a corrupt header cannot force a huge allocation.
    std::uint64_t n = 1;
    for (auto d : e.dims) {
      if (d == 0 || n > std::numeric_limits<std::uint64_t>::max() / d) {
        throw Error(ErrorCode::ShapeMismatch, "tensor '" + e.name + "' has invalid dims");
      }
      n *= d;
    }
    if (e.dims.empty()) throw Error(ErrorCode::ShapeMismatch, "tensor '" + e.name + "' has no dimensions");

    constexpr std::uint64_t kChunk = 1 << 20;
    std::vector<unsigned char> buf;
    for (std::uint64_t done = 0; done < n;) {
      const std::uint64_t take = std::min(kChunk, n - done);
      buf.resize(take * 4);
      read_exact(in, buf.data(), buf.size(), "tensor payload");
      for (std::uint64_t k = 0; k < take; ++k) {
        const unsigned char* p = buf.data() + 4 * k;
        const std::uint32_t bits = std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 |
                                   std::uint32_t(p[3]) << 24;
        e.data.push_back(std::bit_cast<float>(bits));
      }
      done += take;
    }
    archive.add(std::move(e));
  }
  return archive;
}

std::uint64_t write_archive_file(const TensorArchive& archive, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + path.string() + " for writing");
  return write_archive(archive, out);
}

TensorArchive read_archive_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  return read_archive(in);
}

}  // namespace medlab::store
