#include "tda/binio.hpp"

#include <bit>
#include <fstream>
#include <iterator>

#include "tda/errors.hpp"

namespace tda::binio {

void Writer::bytes(std::string_view raw) { buf_.insert(buf_.end(), raw.begin(), raw.end()); }

void Writer::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void Writer::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void Writer::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void Writer::f64s(std::span<const double> v) {
  buf_.reserve(buf_.size() + 8 * v.size());
  for (double x : v) f64(x);
}

void Writer::str(std::string_view s) {
  u32(static_cast<std::uint32_t>(s.size()));
  bytes(s);
}

void Reader::need(std::size_t n, std::string_view what) const {
  if (remaining() < n) throw FormatError("truncated file while reading " + std::string(what), pos_);
}

void Reader::expect_magic(std::string_view magic) {
  need(magic.size(), "magic");
  for (std::size_t i = 0; i < magic.size(); ++i) {
    if (data_[pos_ + i] != static_cast<std::uint8_t>(magic[i])) {
      throw FormatError("bad magic, expected '" + std::string(magic) + "'", pos_ + i);
    }
  }
  pos_ += magic.size();
}

std::string Reader::bytes(std::size_t n) {
  need(n, "byte string");
  std::string out(reinterpret_cast<const char*>(data_.data() + pos_), n);
  pos_ += n;
  return out;
}

std::uint32_t Reader::u32() {
  need(4, "u32");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
  pos_ += 4;
  return v;
}

std::uint64_t Reader::u64() {
  need(8, "u64");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
  pos_ += 8;
  return v;
}

double Reader::f64() { return std::bit_cast<double>(u64()); }

void Reader::f64s(std::span<double> out) {
  need(8 * out.size(), "f64 array");
  for (double& x : out) x = f64();
}

std::string Reader::str() {
  const std::size_t at = pos_;
  const std::uint32_t n = u32();
  if (remaining() < n) throw FormatError("string length exceeds file size", at);
  return bytes(n);
}

void Reader::expect_end() const {
  if (remaining() != 0) throw FormatError("trailing bytes after end of record", pos_);
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, std::span<const std::uint8_t> data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) throw Error("write failed for '" + path + "'");
}

void write_text(const std::string& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out << text;
  if (!out) throw Error("write failed for '" + path + "'");
}

}  // namespace tda::binio
