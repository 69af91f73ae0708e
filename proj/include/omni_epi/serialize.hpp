// SPDX-License-Identifier: Apache-2.0
//
// OEPT raw tensor format: "OEPT", version byte, dtype byte (0 f32, 1 f64),
// rank byte, rank little-endian u32 extents, row-major little-endian payload.
//
// A checkpoint is a text header (key-sorted key=value lines) terminated by a
// line holding a single '.', followed by named OEPT records, each preceded by
// a little-endian u32 name length and the name bytes.

#pragma once

#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "omni_epi/config.hpp"
#include "omni_epi/tensor.hpp"

namespace omni {

inline constexpr std::uint8_t kOeptVersion = 1;

void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

struct Checkpoint {
  KeyValues header;
  NamedTensors tensors;

  const Tensor* find(const std::string& name) const;
  /// All tensors whose name starts with `prefix`, with the prefix stripped.
  NamedTensors group(const std::string& prefix) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace omni
