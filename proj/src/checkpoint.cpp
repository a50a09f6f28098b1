#include "advdino/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include "advdino/binary_io.hpp"

namespace advdino {

namespace io {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for " + path);
}

}  // namespace io

void write_checkpoint(std::ostream& os, const ParamStore& params) {
  io::write_magic(os, "ADVD", kCheckpointVersion);
  for (const auto& [name, t] : params) {
    io::write_string(os, name);
    io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) io::write_pod<std::uint64_t>(os, e);
    os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
}

ParamStore read_checkpoint(std::istream& is) {
  auto version = io::read_magic(is, "ADVD");
  if (version != kCheckpointVersion) throw io::FormatError("unsupported checkpoint version " + std::to_string(version));
  ParamStore out;
  while (is.peek() != std::char_traits<char>::eof()) {
    std::string name = io::read_string(is);
    auto rank = io::read_pod<std::uint32_t>(is);
    if (rank > 8) throw io::FormatError("implausible rank for '" + name + "'");
    Shape shape(rank);
    for (auto& e : shape) e = io::read_pod<std::uint64_t>(is);
    Tensor t(shape);
    if (!is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(double)))) {
      throw io::FormatError("truncated payload for '" + name + "'");
    }
    if (!out.emplace(name, std::move(t)).second) throw io::FormatError("duplicate record '" + name + "'");
  }
  return out;
}

void save_checkpoint(const std::string& path, const ParamStore& params) {
  std::ostringstream os;
  write_checkpoint(os, params);
  io::write_file(path, os.str());
}

ParamStore load_checkpoint(const std::string& path) {
  std::istringstream is(io::read_file(path));
  return read_checkpoint(is);
}

ParamStore with_prefix_stripped(const ParamStore& params, const std::string& prefix) {
  ParamStore out;
  for (const auto& [name, t] : params) {
    if (name.rfind(prefix, 0) == 0) out.emplace(name.substr(prefix.size()), t);
  }
  return out;
}

void merge_with_prefix(ParamStore& into, const ParamStore& from, const std::string& prefix) {
  for (const auto& [name, t] : from) into[prefix + name] = t;
}

}  // namespace advdino
