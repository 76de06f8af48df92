#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>

#include "fens/network.hpp"

namespace fens {

/// Free-form key/value pairs stored in the model header (filter name, seeds, ...).
using ModelMetadata = std::map<std::string, std::string>;

struct LoadedModel {
  Network net;
  ModelMetadata metadata;
};

// File layout:
//   FENET1\n
//   input <d0> <d1> ...\n
//   meta <key> <value>\n            (zero or more; value runs to end of line)
//   layers <count>\n
//   dense <out> <in> | conv2d <outC> <inC> <kH> <kW> <stride> <same|valid>
//     | relu | avgpool2d <kernel> <stride> | flatten       (one line each)
//   end\n
//   parameter tensors, little-endian float64, row-major, layer order, weight then bias
void write_network(std::ostream& out, const Network& net, const ModelMetadata& metadata = {});
LoadedModel read_network(std::istream& in);

void save_network(const std::filesystem::path& path, const Network& net, const ModelMetadata& metadata = {});
LoadedModel load_network(const std::filesystem::path& path);

}  // namespace fens
