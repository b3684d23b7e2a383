#include "exitnet/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "exitnet/error.hpp"

namespace exitnet {

namespace {

constexpr char kMagic[4] = {'X', 'N', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double d) {
  std::uint64_t v;
  std::memcpy(&v, &d, 8);
  put_u64(out, v);
}

struct Reader {
  std::string bytes;
  std::size_t pos = 0;

  void need(std::size_t n, const char* what) {
    if (pos + n > bytes.size())
      throw FormatError("checkpoint truncated at byte " + std::to_string(pos) + " reading " +
                        what);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }
  double f64(const char* what) {
    std::uint64_t v = u64(what);
    double d;
    std::memcpy(&d, &v, 8);
    return d;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace

void save_checkpoint(const std::string& file, std::uint64_t config_hash,
                     const std::vector<std::pair<std::string, Tensor>>& params) {
  std::string out;
  out.append(kMagic, 4);
  put_u32(out, kVersion);
  put_u64(out, config_hash);
  put_u64(out, params.size());
  for (const auto& [path, t] : params) {
    put_u32(out, static_cast<std::uint32_t>(path.size()));
    out.append(path);
    put_u32(out, static_cast<std::uint32_t>(t.shape().size()));
    for (auto d : t.shape()) put_u64(out, d);
    for (std::size_t i = 0; i < t.numel(); ++i) put_f64(out, t.at(i));
  }
  std::ofstream os(file, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open " + file + " for writing");
  os.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!os) throw FormatError("short write to " + file);
}

Checkpoint load_checkpoint(const std::string& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw FormatError("cannot open " + file);
  Reader r;
  r.bytes.assign(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());

  std::string magic = r.str(4, "magic");
  if (std::memcmp(magic.data(), kMagic, 4) != 0)
    throw FormatError("checkpoint magic mismatch at byte 0 in " + file);
  std::uint32_t version = r.u32("version");
  if (version != kVersion)
    throw FormatError("checkpoint version " + std::to_string(version) + " unsupported, want " +
                      std::to_string(kVersion));
  Checkpoint ck;
  ck.config_hash = r.u64("config hash");
  std::uint64_t n = r.u64("record count");
  ck.params.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    std::uint32_t plen = r.u32("path length");
    std::string path = r.str(plen, "path");
    std::uint32_t ndim = r.u32("ndim");
    std::vector<std::size_t> shape(ndim);
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      shape[d] = static_cast<std::size_t>(r.u64("dim"));
      numel *= shape[d];
    }
    std::vector<double> data(numel);
    for (std::size_t j = 0; j < numel; ++j) data[j] = r.f64("tensor data");
    ck.params.emplace_back(std::move(path),
                           Tensor::from_data(std::move(shape), std::move(data), false));
  }
  if (r.pos != r.bytes.size())
    throw FormatError("checkpoint has " + std::to_string(r.bytes.size() - r.pos) +
                      " trailing bytes at byte " + std::to_string(r.pos));
  return ck;
}

Checkpoint load_checkpoint(const std::string& file, std::uint64_t expected_config_hash) {
  Checkpoint ck = load_checkpoint(file);
  if (ck.config_hash != expected_config_hash)
    throw FormatError("checkpoint was written for a different model configuration (hash " +
                      std::to_string(ck.config_hash) + ", expected " +
                      std::to_string(expected_config_hash) + ")");
  return ck;
}

}  // namespace exitnet
