#include "xnet/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

#include "xnet/errors.hpp"

namespace xnet {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

  void need(std::size_t n, const char* what) const {
    if (remaining() < n) {
      throw FormatError("checkpoint truncated at offset " + std::to_string(pos_) + " while reading " + what +
                        " (" + std::to_string(n) + " bytes needed, " + std::to_string(remaining()) + " left)");
    }
  }

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

bool starts_with(const std::string& s, std::string_view prefix) {
  return s.compare(0, prefix.size(), prefix) == 0;
}

}  // namespace

bool is_valid_utf8(std::string_view s) {
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t len;
    std::uint32_t cp;
    if (c < 0x80) {
      ++i;
      continue;
    } else if ((c >> 5) == 0x6) {
      len = 2;
      cp = c & 0x1F;
    } else if ((c >> 4) == 0xE) {
      len = 3;
      cp = c & 0x0F;
    } else if ((c >> 3) == 0x1E) {
      len = 4;
      cp = c & 0x07;
    } else {
      return false;
    }
    if (i + len > s.size()) return false;
    for (std::size_t k = 1; k < len; ++k) {
      const auto cc = static_cast<unsigned char>(s[i + k]);
      if ((cc >> 6) != 0x2) return false;
      cp = (cp << 6) | (cc & 0x3F);
    }
    if ((len == 2 && cp < 0x80) || (len == 3 && cp < 0x800) || (len == 4 && (cp < 0x10000 || cp > 0x10FFFF)) ||
        (cp >= 0xD800 && cp <= 0xDFFF)) {
      return false;
    }
    i += len;
  }
  return true;
}

std::vector<std::uint8_t> serialize_checkpoint(const ParamMap& params) {
  std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    if (name.empty() || !is_valid_utf8(name)) throw ValidationError("checkpoint name is empty or not UTF-8");
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    const auto& ext = t.shape().extents();
    put_u32(out, static_cast<std::uint32_t>(ext.size()));
    for (auto e : ext) put_u32(out, static_cast<std::uint32_t>(e));
    for (float v : t.data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

ParamMap deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  auto magic = r.take(sizeof(kCheckpointMagic), "magic");
  if (std::memcmp(magic.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw FormatError("bad checkpoint magic at offset 0");
  }
  const std::size_t version_offset = r.offset();
  const auto version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " at offset " +
                      std::to_string(version_offset));
  }
  const auto count = r.u32("entry count");
  ParamMap params;
  std::string previous;
  for (std::uint32_t e = 0; e < count; ++e) {
    const std::size_t entry_offset = r.offset();
    const auto name_len = r.u32("name length");
    auto name_bytes = r.take(name_len, "name");
    std::string name(name_bytes.begin(), name_bytes.end());
    if (name.empty() || !is_valid_utf8(name)) {
      throw FormatError("invalid entry name at offset " + std::to_string(entry_offset));
    }
    if (e > 0 && !(previous < name)) {
      throw FormatError("entry '" + name + "' at offset " + std::to_string(entry_offset) +
                        " breaks sorted unique name order");
    }
    const auto ndim = r.u32("ndim");
    r.need(static_cast<std::size_t>(ndim) * 4, "dims");
    std::vector<std::int64_t> dims;
    std::uint64_t numel = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      const std::size_t dim_offset = r.offset();
      const auto v = r.u32("dim");
      if (v == 0) throw FormatError("zero extent at offset " + std::to_string(dim_offset));
      numel *= v;
      if (numel > (std::uint64_t{1} << 40)) {
        throw FormatError("implausible tensor size at offset " + std::to_string(dim_offset));
      }
      dims.push_back(v);
    }
    auto raw = r.take(static_cast<std::size_t>(numel) * 4, "tensor data");
    std::vector<float> data(static_cast<std::size_t>(numel));
    for (std::size_t i = 0; i < data.size(); ++i) {
      std::uint32_t u = 0;
      for (int k = 0; k < 4; ++k) u |= static_cast<std::uint32_t>(raw[i * 4 + k]) << (8 * k);
      data[i] = std::bit_cast<float>(u);
    }
    params.emplace(name, Tensor::from_data(Shape(std::move(dims)), std::move(data)));
    previous = std::move(name);
  }
  if (r.remaining() != 0) {
    throw FormatError("trailing bytes after last entry at offset " + std::to_string(r.offset()));
  }
  return params;
}

void save_checkpoint(const ParamMap& params, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(params);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("write failed for '" + path.string() + "'");
}

ParamMap load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (is.bad()) throw IoError("read failed for '" + path.string() + "'");
  return deserialize_checkpoint(bytes);
}

LoadReport remap_into_decoder(const ParamMap& checkpoint, ParamMap& decoder, RemapPolicy policy) {
  LoadReport report;
  auto wanted = [&](const std::string& name) {
    if (starts_with(name, "head.")) return false;
    if (starts_with(name, "stem.")) return policy.include_stem;
    return true;
  };
  // Every decoder entry the policy covers must come from the checkpoint.
  for (const auto& [name, t] : decoder) {
    if (wanted(name) && !checkpoint.contains(name)) {
      throw LoadError("checkpoint is missing decoder parameter '" + name + "'");
    }
  }
  for (const auto& [name, src] : checkpoint) {
    if (!wanted(name)) {
      report.skipped.push_back(name);
      continue;
    }
    auto it = decoder.find(name);
    if (it == decoder.end()) {
      throw LoadError("checkpoint parameter '" + name + "' has no counterpart in the decoder");
    }
    if (it->second.shape() != src.shape()) {
      throw LoadError("shape mismatch for '" + name + "': checkpoint " + src.shape().str() + ", decoder " +
                      it->second.shape().str());
    }
  }
  // Validation passed; copy.
  for (const auto& [name, src] : checkpoint) {
    if (!wanted(name)) continue;
    auto dst = decoder.at(name).data();
    std::copy(src.data().begin(), src.data().end(), dst.begin());
    report.loaded.push_back(name);
  }
  return report;
}

void load_params_into(const ParamMap& source, ParamMap& target, bool allow_missing) {
  for (const auto& [name, src] : source) {
    auto it = target.find(name);
    if (it == target.end()) throw LoadError("parameter '" + name + "' does not exist in the target");
    if (it->second.shape() != src.shape()) {
      throw LoadError("shape mismatch for '" + name + "': source " + src.shape().str() + ", target " +
                      it->second.shape().str());
    }
  }
  if (!allow_missing) {
    for (const auto& kv : target) {
      if (!source.contains(kv.first)) throw LoadError("source is missing parameter '" + kv.first + "'");
    }
  }
  for (const auto& [name, src] : source) {
    auto dst = target.at(name).data();
    std::copy(src.data().begin(), src.data().end(), dst.begin());
  }
}

}  // namespace xnet
