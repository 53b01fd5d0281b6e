#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "opama/nn.hpp"

namespace opama {

// Binary layout (all integers unsigned 64-bit little-endian, payload IEEE-754
// float64 little-endian):
//
//   "OPAMA001" count
//   count x { name_len name[name_len] rank extent[rank] value[prod(extent)] }
inline constexpr char kCheckpointMagic[9] = "OPAMA001";

void write_checkpoint(std::ostream& os, const ParamList& params);
void save_checkpoint(const std::string& path, const ParamList& params);

/// Parameters in file order, as fresh tensors.
ParamList read_checkpoint(std::istream& is);
ParamList load_checkpoint(const std::string& path);

/// Copies values from `source` into the same-named tensors of `target`.
/// Every target name must be present with a matching shape. Returns the
/// number of parameters copied.
std::size_t assign_parameters(const ParamList& target, const ParamList& source);

}  // namespace opama
