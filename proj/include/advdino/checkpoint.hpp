#pragma once

#include <iosfwd>
#include <map>
#include <string>

#include "advdino/tensor.hpp"

namespace advdino {

// Named parameter tensors, iterated in lexicographic name order.
using ParamStore = std::map<std::string, Tensor>;

inline constexpr std::uint32_t kCheckpointVersion = 1;

// "ADVD", u32 version, then (u32 name length, name, u32 rank, u64 extents, f64 payload)
// records until end of stream.
void write_checkpoint(std::ostream& os, const ParamStore& params);
ParamStore read_checkpoint(std::istream& is);
void save_checkpoint(const std::string& path, const ParamStore& params);
ParamStore load_checkpoint(const std::string& path);

// Entries whose name starts with `prefix`, with the prefix stripped.
ParamStore with_prefix_stripped(const ParamStore& params, const std::string& prefix);
void merge_with_prefix(ParamStore& into, const ParamStore& from, const std::string& prefix);

}  // namespace advdino
