#include "opama/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "opama/error.hpp"

namespace opama {

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

void put_u64(std::ostream& os, std::uint64_t v) {
  char buf[8];
  std::memcpy(buf, &v, 8);
  os.write(buf, 8);
}

std::uint64_t get_u64(std::istream& is) {
  char buf[8];
  if (!is.read(buf, 8)) throw IoError("checkpoint: truncated file");
  std::uint64_t v;
  std::memcpy(&v, buf, 8);
  return v;
}

}  // namespace

void write_checkpoint(std::ostream& os, const ParamList& params) {
  os.write(kCheckpointMagic, 8);
  put_u64(os, params.size());
  for (const auto& p : params.items()) {
    put_u64(os, p.name.size());
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put_u64(os, p.tensor.rank());
    for (auto e : p.tensor.shape()) put_u64(os, static_cast<std::uint64_t>(e));
    auto d = p.tensor.data();
    os.write(reinterpret_cast<const char*>(d.data()), static_cast<std::streamsize>(d.size() * 8));
  }
  if (!os) throw IoError("checkpoint: write failed");
}

void save_checkpoint(const std::string& path, const ParamList& params) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("checkpoint: cannot open " + path + " for writing");
  write_checkpoint(os, params);
}

ParamList read_checkpoint(std::istream& is) {
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw IoError("checkpoint: bad magic");
  const auto count = get_u64(is);
  ParamList out;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = get_u64(is);
    if (len > (1u << 20)) throw IoError("checkpoint: implausible name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), static_cast<std::streamsize>(len))) throw IoError("checkpoint: truncated name");
    const auto rank = get_u64(is);
    if (rank > 16) throw IoError("checkpoint: implausible rank for " + name);
    Shape shape;
    for (std::uint64_t r = 0; r < rank; ++r) shape.push_back(static_cast<std::int64_t>(get_u64(is)));
    Tensor t(shape);
    auto d = t.data();
    if (!is.read(reinterpret_cast<char*>(d.data()), static_cast<std::streamsize>(d.size() * 8)))
      throw IoError("checkpoint: truncated payload for " + name);
    out.add(std::move(name), t);
  }
  return out;
}

ParamList load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open " + path);
  return read_checkpoint(is);
}

std::size_t assign_parameters(const ParamList& target, const ParamList& source) {
  std::size_t n = 0;
  for (const auto& p : target.items()) {
    const Parameter* s = source.find(p.name);
    if (s == nullptr) throw ContractError("checkpoint: missing parameter " + p.name);
    if (s->tensor.shape() != p.tensor.shape())
      throw DimensionError("checkpoint: parameter " + p.name + " has shape " +
                           shape_str(s->tensor.shape()) + ", expected " +
                           shape_str(p.tensor.shape()));
    Tensor dst = p.tensor;
    std::copy(s->tensor.data().begin(), s->tensor.data().end(), dst.data().begin());
    ++n;
  }
  return n;
}

}  // namespace opama
